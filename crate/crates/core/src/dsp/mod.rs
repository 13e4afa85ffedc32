//! Deterministic spectral signal processing: STFT/ISTFT, mel filterbanks,
//! log-mel spectrograms, Griffin-Lim phase reconstruction, and mel cepstra.
//!
//! Everything here is a pure function of its inputs and runs in `f64`. The
//! ISTFT is the exact least-squares inverse of the (reflect-padded, windowed)
//! STFT, which is what makes the Griffin-Lim error monotone and the
//! round-trip identity exact to FFT rounding.

pub mod fft;
pub mod wav;

use ndarray::Array2;
use rand::Rng;
use rustfft::num_complex::Complex64;

use crate::error::{Error, Result};
use crate::util::seeded_rng;
use fft::RealFft;

/// Natural-log floor applied to mel power.
pub const LOG_FLOOR: f64 = 1e-5;

pub const DEFAULT_SAMPLE_RATE: u32 = 8000;
pub const DEFAULT_N_MELS: usize = 64;

/// Mono audio in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Waveform {
            samples,
            sample_rate,
        }
    }

    pub fn silence(n: usize, sample_rate: u32) -> Self {
        Waveform::new(vec![0.0; n], sample_rate)
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// STFT framing parameters. The analysis window is a periodic Hann of length
/// `n_fft`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FrameConfig {
    pub n_fft: usize,
    pub hop: usize,
    pub center: bool,
}

impl Default for FrameConfig {
    fn default() -> Self {
        FrameConfig {
            n_fft: 512,
            hop: 200,
            center: true,
        }
    }
}

impl FrameConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hop == 0 || self.hop > self.n_fft {
            return Err(Error::InvalidInput(format!(
                "hop {} must satisfy 0 < hop <= n_fft {}",
                self.hop, self.n_fft
            )));
        }
        if !self.n_fft.is_power_of_two() {
            return Err(Error::InvalidInput(format!(
                "n_fft {} must be a power of two",
                self.n_fft
            )));
        }
        Ok(())
    }

    /// Number of analysis frames for a signal of `len` samples.
    pub fn n_frames(&self, len: usize) -> usize {
        if self.center {
            1 + len / self.hop
        } else {
            if len < self.n_fft {
                0
            } else {
                1 + (len - self.n_fft) / self.hop
            }
        }
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }
}

/// Periodic Hann window of length `n`.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()))
        .collect()
}

#[derive(Debug, Clone)]
pub struct ComplexSpectrogram {
    /// `T_f × (n_fft/2 + 1)` complex frames.
    pub frames: Array2<Complex64>,
    pub frame_rate: f64,
    pub sample_rate: u32,
    pub cfg: FrameConfig,
    /// Length of the source signal; needed for the exact inverse.
    pub n_samples: usize,
}

impl ComplexSpectrogram {
    pub fn magnitude(&self) -> MagnitudeSpectrogram {
        MagnitudeSpectrogram {
            frames: self.frames.mapv(|c| c.norm()),
            frame_rate: self.frame_rate,
            sample_rate: self.sample_rate,
            cfg: self.cfg,
            n_samples: self.n_samples,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MagnitudeSpectrogram {
    pub frames: Array2<f64>,
    pub frame_rate: f64,
    pub sample_rate: u32,
    pub cfg: FrameConfig,
    pub n_samples: usize,
}

/// Log-power mel spectrogram; every entry is `>= ln(LOG_FLOOR)`.
#[derive(Debug, Clone)]
pub struct MelSpectrogram {
    /// `T_f × n_mels`.
    pub frames: Array2<f64>,
    pub frame_rate: f64,
    pub sample_rate: u32,
    pub cfg: FrameConfig,
    pub n_samples: usize,
    pub f_min: f64,
    pub f_max: f64,
}

impl MelSpectrogram {
    pub fn n_mels(&self) -> usize {
        self.frames.ncols()
    }
}

/// Mel cepstral coefficients, coefficient 0 excluded.
#[derive(Debug, Clone)]
pub struct CepstralSequence {
    /// `T_f × K`.
    pub frames: Array2<f64>,
}

/// Index into a reflect-padded signal: maps padded position `p` (with pad
/// amount `pad` on the left) back to the source index, reflecting without
/// repeating the edge sample.
fn reflect_index(p: isize, pad: isize, len: usize) -> usize {
    let i = p - pad;
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= len as isize {
        j = period - j;
    }
    j as usize
}

/// Short-time Fourier transform with a periodic Hann window.
///
/// With `center = true` the signal is reflect-padded by `n_fft/2` so frame `t`
/// is centred on sample `t·hop`, and the frame count is `1 + len/hop`.
pub fn stft(wave: &Waveform, cfg: &FrameConfig) -> Result<ComplexSpectrogram> {
    cfg.validate()?;
    let len = wave.samples.len();
    if len == 0 {
        return Err(Error::InvalidInput("cannot STFT an empty signal".into()));
    }
    if !cfg.center && len < cfg.n_fft {
        return Err(Error::InvalidInput(format!(
            "signal of {len} samples is shorter than n_fft {} with center=false",
            cfg.n_fft
        )));
    }
    let window = hann_window(cfg.n_fft);
    let n_frames = cfg.n_frames(len);
    let fft = RealFft::new(cfg.n_fft);
    let pad = if cfg.center { (cfg.n_fft / 2) as isize } else { 0 };

    let mut frames = Array2::zeros((n_frames, cfg.n_bins()));
    let mut buf = vec![0.0f64; cfg.n_fft];
    for t in 0..n_frames {
        let start = (t * cfg.hop) as isize;
        for (k, b) in buf.iter_mut().enumerate() {
            let p = start + k as isize;
            let src = if cfg.center {
                wave.samples[reflect_index(p, pad, len)]
            } else {
                wave.samples[p as usize]
            };
            *b = src * window[k];
        }
        let bins = fft.forward(&buf);
        for (j, c) in bins.into_iter().enumerate() {
            frames[(t, j)] = c;
        }
    }
    Ok(ComplexSpectrogram {
        frames,
        frame_rate: wave.sample_rate as f64 / cfg.hop as f64,
        sample_rate: wave.sample_rate,
        cfg: *cfg,
        n_samples: len,
    })
}

/// Inverse STFT: the exact least-squares inverse of [`stft`].
///
/// Overlap-adds windowed inverse DFTs and window-squared weights over the
/// padded domain, folds both through the adjoint of the reflection, and
/// divides. For a spectrogram that actually is `stft(x)` this returns `x` up
/// to FFT rounding.
pub fn istft(spec: &ComplexSpectrogram, cfg: &FrameConfig) -> Result<Waveform> {
    cfg.validate()?;
    if spec.cfg != *cfg {
        return Err(Error::ShapeMismatch(format!(
            "spectrogram built with {:?} but istft called with {:?}",
            spec.cfg, cfg
        )));
    }
    let len = spec.n_samples;
    let n_frames = spec.frames.nrows();
    if n_frames != cfg.n_frames(len) || spec.frames.ncols() != cfg.n_bins() {
        return Err(Error::ShapeMismatch(format!(
            "spectrogram is {}x{} but config implies {}x{}",
            n_frames,
            spec.frames.ncols(),
            cfg.n_frames(len),
            cfg.n_bins()
        )));
    }
    let window = hann_window(cfg.n_fft);
    let fft = RealFft::new(cfg.n_fft);
    let pad = if cfg.center { (cfg.n_fft / 2) as isize } else { 0 };

    let mut acc = vec![0.0f64; len];
    let mut wsum = vec![0.0f64; len];
    let mut bins = vec![Complex64::new(0.0, 0.0); cfg.n_bins()];
    for t in 0..n_frames {
        for (j, b) in bins.iter_mut().enumerate() {
            *b = spec.frames[(t, j)];
        }
        let frame = fft.inverse(&bins);
        let start = (t * cfg.hop) as isize;
        for (k, &v) in frame.iter().enumerate() {
            let p = start + k as isize;
            let idx = if cfg.center {
                reflect_index(p, pad, len)
            } else {
                let u = p as usize;
                if u >= len {
                    continue;
                }
                u
            };
            acc[idx] += v * window[k];
            wsum[idx] += window[k] * window[k];
        }
    }
    let samples = acc
        .iter()
        .zip(wsum.iter())
        .map(|(&a, &w)| if w > 1e-12 { a / w } else { 0.0 })
        .collect();
    Ok(Waveform::new(samples, spec.sample_rate))
}

/// Mel scale (HTK convention): `m(f) = 2595·log10(1 + f/700)`.
pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filterbank over one-sided FFT bins.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    /// `n_mels × n_bins`, all weights nonnegative.
    pub weights: Array2<f64>,
    pub n_fft: usize,
    pub sample_rate: u32,
    pub f_min: f64,
    pub f_max: f64,
}

impl MelFilterbank {
    pub fn new(
        n_mels: usize,
        n_fft: usize,
        sample_rate: u32,
        f_min: f64,
        f_max: f64,
    ) -> Result<Self> {
        if n_mels < 2 {
            return Err(Error::InvalidInput(format!("n_mels {n_mels} must be >= 2")));
        }
        if f_max <= f_min {
            return Err(Error::InvalidInput(format!(
                "f_max {f_max} must exceed f_min {f_min}"
            )));
        }
        let n_bins = n_fft / 2 + 1;
        let mel_lo = hz_to_mel(f_min);
        let mel_hi = hz_to_mel(f_max);
        let points: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let mut weights = Array2::zeros((n_mels, n_bins));
        for m in 0..n_mels {
            let (lo, mid, hi) = (points[m], points[m + 1], points[m + 2]);
            for j in 0..n_bins {
                let f = j as f64 * sample_rate as f64 / n_fft as f64;
                let w = if f <= lo || f >= hi {
                    0.0
                } else if f <= mid {
                    (f - lo) / (mid - lo)
                } else {
                    (hi - f) / (hi - mid)
                };
                weights[(m, j)] = w.max(0.0);
            }
        }
        Ok(MelFilterbank {
            weights,
            n_fft,
            sample_rate,
            f_min,
            f_max,
        })
    }
}

/// Log-power mel spectrogram: `ln(max(ε, FB · |frame|²))` per frame.
pub fn mel_spectrogram(
    spec: &ComplexSpectrogram,
    n_mels: usize,
    f_min: f64,
    f_max: f64,
) -> Result<MelSpectrogram> {
    let fb = MelFilterbank::new(n_mels, spec.cfg.n_fft, spec.sample_rate, f_min, f_max)?;
    let power = spec.frames.mapv(|c| c.norm_sqr());
    let mel_power = power.dot(&fb.weights.t());
    let frames = mel_power.mapv(|p| p.max(LOG_FLOOR).ln());
    Ok(MelSpectrogram {
        frames,
        frame_rate: spec.frame_rate,
        sample_rate: spec.sample_rate,
        cfg: spec.cfg,
        n_samples: spec.n_samples,
        f_min,
        f_max,
    })
}

/// Convenience: waveform straight to log-mel with default band edges.
pub fn waveform_to_mel(wave: &Waveform, cfg: &FrameConfig, n_mels: usize) -> Result<MelSpectrogram> {
    let spec = stft(wave, cfg)?;
    mel_spectrogram(&spec, n_mels, 0.0, wave.sample_rate as f64 / 2.0)
}

/// Approximate inverse of the mel stage: log-mel back to a linear magnitude
/// spectrogram via the clamped right pseudo-inverse of the filterbank.
///
/// The log floor is subtracted before inversion so exact-floor entries map to
/// zero power rather than to the floor's power.
pub fn mel_to_magnitude(mel: &MelSpectrogram) -> Result<MagnitudeSpectrogram> {
    let fb = MelFilterbank::new(
        mel.n_mels(),
        mel.cfg.n_fft,
        mel.sample_rate,
        mel.f_min,
        mel.f_max,
    )?;
    // Right pseudo-inverse FBᵀ(FB·FBᵀ)⁻¹; the Gram matrix is SPD because
    // adjacent triangles overlap.
    let gram = fb.weights.dot(&fb.weights.t());
    let gram_inv = crate::linalg::symmetric_matfn(&gram, |l| 1.0 / l.max(1e-12));
    let pinv = fb.weights.t().dot(&gram_inv);

    let mel_power = mel.frames.mapv(|v| (v.exp() - LOG_FLOOR).max(0.0));
    let power = mel_power.dot(&pinv.t()).mapv(|p: f64| p.max(0.0));
    Ok(MagnitudeSpectrogram {
        frames: power.mapv(f64::sqrt),
        frame_rate: mel.frame_rate,
        sample_rate: mel.sample_rate,
        cfg: mel.cfg,
        n_samples: mel.n_samples,
    })
}

/// Full-spectrum Frobenius distance ratio `‖|S| − M‖ / ‖M‖`, weighting
/// interior bins twice (they occur twice in the symmetric spectrum).
pub fn spectral_convergence(spec: &ComplexSpectrogram, target: &MagnitudeSpectrogram) -> f64 {
    let n_bins = target.frames.ncols();
    let nyquist = n_bins - 1;
    let mut num = 0.0;
    let mut den = 0.0;
    for t in 0..target.frames.nrows() {
        for j in 0..n_bins {
            let w = if j == 0 || j == nyquist { 1.0 } else { 2.0 };
            let d = spec.frames[(t, j)].norm() - target.frames[(t, j)];
            num += w * d * d;
            den += w * target.frames[(t, j)] * target.frames[(t, j)];
        }
    }
    if den == 0.0 {
        return if num == 0.0 { 0.0 } else { f64::INFINITY };
    }
    (num / den).sqrt()
}

pub struct GriffinLimResult {
    pub waveform: Waveform,
    /// Spectral convergence after each iteration.
    pub convergence: Vec<f64>,
}

/// Estimates the dominant frequency of a magnitude spectrogram from the peak
/// of its mean spectrum, refined by parabolic interpolation on log magnitude.
fn dominant_frequency(target: &MagnitudeSpectrogram) -> f64 {
    let n_bins = target.frames.ncols();
    let mut mean = vec![0.0f64; n_bins];
    for row in target.frames.rows() {
        for (j, &m) in row.iter().enumerate() {
            mean[j] += m;
        }
    }
    let peak = mean
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(j, _)| j)
        .unwrap_or(0);
    let bin_hz = target.sample_rate as f64 / target.cfg.n_fft as f64;
    if peak == 0 || peak + 1 >= n_bins || mean[peak] <= 0.0 {
        return peak as f64 * bin_hz;
    }
    let la = mean[peak - 1].max(1e-12).ln();
    let lb = mean[peak].max(1e-12).ln();
    let lc = mean[peak + 1].max(1e-12).ln();
    let denom = la - 2.0 * lb + lc;
    let delta = if denom.abs() > 1e-12 {
        (0.5 * (la - lc) / denom).clamp(-0.5, 0.5)
    } else {
        0.0
    };
    (peak as f64 + delta) * bin_hz
}

/// Griffin-Lim phase reconstruction by alternating STFT/ISTFT projections.
///
/// Phases are initialized from the STFT of a reference tone at the target's
/// estimated dominant frequency, plus a small seeded jitter — a tonal phase
/// prior that converges far faster than random phases on harmonic material
/// while leaving the plain (monotone) projection iteration untouched.
/// Deterministic for a fixed `(target, seed)`.
pub fn griffin_lim(
    target: &MagnitudeSpectrogram,
    cfg: &FrameConfig,
    iters: usize,
    seed: u64,
) -> Result<GriffinLimResult> {
    cfg.validate()?;
    if iters == 0 {
        return Err(Error::InvalidInput("griffin_lim needs iters >= 1".into()));
    }
    if target.frames.iter().any(|&m| !(m >= 0.0)) {
        return Err(Error::InvalidInput(
            "griffin_lim target magnitudes must be nonnegative and finite".into(),
        ));
    }
    if target.cfg != *cfg {
        return Err(Error::ShapeMismatch(
            "griffin_lim target built with a different frame config".into(),
        ));
    }
    let mut rng = seeded_rng(seed);
    let f_dom = dominant_frequency(target);
    let reference = sine_wave(f_dom, 1.0, target.n_samples.max(1), target.sample_rate);
    let ref_spec = stft(&reference, cfg)?;
    let mut init = target.frames.mapv(|m| Complex64::new(m, 0.0));
    for ((t, j), e) in init.indexed_iter_mut() {
        let phi = ref_spec.frames[(t, j)].arg() + 0.1 * rng.gen_range(-1.0..1.0);
        *e = Complex64::from_polar(target.frames[(t, j)], phi);
    }
    let mut estimate = ComplexSpectrogram {
        frames: init,
        frame_rate: target.frame_rate,
        sample_rate: target.sample_rate,
        cfg: *cfg,
        n_samples: target.n_samples,
    };

    let mut convergence = Vec::with_capacity(iters);
    let mut signal = istft(&estimate, cfg)?;
    for _ in 0..iters {
        let rebuilt = stft(&signal, cfg)?;
        convergence.push(spectral_convergence(&rebuilt, target));
        // Keep the rebuilt phase, enforce the target magnitude.
        for (e, (r, &m)) in estimate
            .frames
            .iter_mut()
            .zip(rebuilt.frames.iter().zip(target.frames.iter()))
        {
            let norm = r.norm();
            *e = if norm > 0.0 {
                r * (m / norm)
            } else {
                Complex64::new(m, 0.0)
            };
        }
        signal = istft(&estimate, cfg)?;
    }
    Ok(GriffinLimResult {
        waveform: signal,
        convergence,
    })
}

/// Mel cepstra: orthonormal DCT-II along the mel axis, keeping coefficients
/// `1..=K` (the energy coefficient 0 is dropped).
pub fn mel_cepstrum(mel: &MelSpectrogram, k: usize) -> Result<CepstralSequence> {
    let n = mel.n_mels();
    if k >= n {
        return Err(Error::InvalidInput(format!(
            "cepstrum order {k} must be < n_mels {n}"
        )));
    }
    let t_f = mel.frames.nrows();
    let mut out = Array2::zeros((t_f, k));
    let scale = (2.0 / n as f64).sqrt();
    // Precompute the DCT-II basis rows 1..=K.
    let mut basis = Array2::zeros((k, n));
    for c in 1..=k {
        for j in 0..n {
            basis[(c - 1, j)] = scale
                * (std::f64::consts::PI * c as f64 * (2.0 * j as f64 + 1.0) / (2.0 * n as f64))
                    .cos();
        }
    }
    for t in 0..t_f {
        for c in 0..k {
            let mut acc = 0.0;
            for j in 0..n {
                acc += basis[(c, j)] * mel.frames[(t, j)];
            }
            out[(t, c)] = acc;
        }
    }
    Ok(CepstralSequence { frames: out })
}

/// Writes a spectrogram-like matrix as CSV, one row per frame.
pub fn matrix_to_csv(frames: &Array2<f64>) -> String {
    let mut out = String::new();
    for row in frames.rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// Display range for log-mel PGM export (natural-log power).
pub const PGM_LO: f64 = -11.512925464970229; // ln(1e-5), the log floor
pub const PGM_HI: f64 = 10.0;

/// Renders a log-mel spectrogram as a binary PGM (P5) image, time on the
/// horizontal axis. The gray mapping is fixed so identical inputs produce
/// identical bytes.
pub fn mel_to_pgm(mel: &MelSpectrogram) -> Vec<u8> {
    let (t_f, n_mels) = (mel.frames.nrows(), mel.frames.ncols());
    let mut out = format!("P5\n{} {}\n255\n", t_f, n_mels).into_bytes();
    for m in (0..n_mels).rev() {
        for t in 0..t_f {
            let v = mel.frames[(t, m)];
            let g = ((v - PGM_LO) / (PGM_HI - PGM_LO) * 255.0).clamp(0.0, 255.0);
            out.push(g.round() as u8);
        }
    }
    out
}

/// Oracle-friendly tone generator used across tests and examples.
pub fn sine_wave(freq: f64, amplitude: f64, n_samples: usize, sample_rate: u32) -> Waveform {
    let samples = (0..n_samples)
        .map(|i| amplitude * (2.0 * std::f64::consts::PI * freq * i as f64 / sample_rate as f64).sin())
        .collect();
    Waveform::new(samples, sample_rate)
}

#[cfg(test)]
mod tests;
