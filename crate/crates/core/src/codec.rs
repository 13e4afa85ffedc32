//! Per-frame variational autoencoder over mel frames. Encodes each log-mel
//! frame independently into a compact latent (so the latent rate equals the
//! mel frame rate), decodes back, and trains on an ELBO with a small KL
//! weight. Stands in for a pretrained codec; the flow model generates in its
//! latent space.

use ndarray::{s, Array1, Array2, ArrayViewD, ArrayViewMutD, Axis};
use rand::seq::SliceRandom;

use crate::dsp::{FrameConfig, MelSpectrogram, LOG_FLOOR};
use crate::error::{Error, Result};
use crate::nn::{self, tanh_bwd, tanh_fwd, Linear, Params};
use crate::synthdata::{Manifest, Split};
use crate::trainer::{adamw_step, lr_at, AdamState, AdamWConfig, LrSchedule};
use crate::util::{derive_seed, randn_mat, seeded_rng, Float};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CodecConfig {
    pub n_mels: usize,
    pub d_latent: usize,
    pub hidden: usize,
    pub beta_kl: f64,
    pub sample_rate: u32,
    pub frame: FrameConfig,
    pub f_min: f64,
    pub f_max: f64,
    /// Fixed affine normalization applied to log-mel values at the encoder
    /// input (and inverted at the decoder output).
    pub input_shift: f64,
    pub input_scale: f64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            n_mels: 64,
            d_latent: 16,
            hidden: 64,
            beta_kl: 1e-3,
            sample_rate: 8000,
            frame: FrameConfig::default(),
            f_min: 0.0,
            f_max: 4000.0,
            input_shift: -6.0,
            input_scale: 3.0,
        }
    }
}

/// Encoder/decoder weights plus the post-training latent standardization.
#[derive(Debug, Clone)]
pub struct CodecParams<F> {
    pub cfg: CodecConfig,
    pub enc1: Linear<F>,
    pub enc2: Linear<F>,
    pub dec1: Linear<F>,
    pub dec2: Linear<F>,
    /// Per-dimension affine applied to encoder outputs so downstream latents
    /// are roughly unit scale; identity until calibrated.
    pub latent_shift: Array1<F>,
    pub latent_scale: Array1<F>,
}

impl<F: Float> CodecParams<F> {
    pub fn init(cfg: &CodecConfig, seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        CodecParams {
            cfg: cfg.clone(),
            enc1: Linear::init(&mut rng, cfg.n_mels, cfg.hidden),
            enc2: Linear::init(&mut rng, cfg.hidden, 2 * cfg.d_latent),
            dec1: Linear::init(&mut rng, cfg.d_latent, cfg.hidden),
            dec2: Linear::init(&mut rng, cfg.hidden, cfg.n_mels),
            latent_shift: Array1::zeros(cfg.d_latent),
            latent_scale: Array1::from_elem(cfg.d_latent, F::one()),
        }
    }

    pub fn zeros_like(&self) -> Self {
        CodecParams {
            cfg: self.cfg.clone(),
            enc1: Linear::zeros(self.cfg.n_mels, self.cfg.hidden),
            enc2: Linear::zeros(self.cfg.hidden, 2 * self.cfg.d_latent),
            dec1: Linear::zeros(self.cfg.d_latent, self.cfg.hidden),
            dec2: Linear::zeros(self.cfg.hidden, self.cfg.n_mels),
            latent_shift: Array1::zeros(self.cfg.d_latent),
            latent_scale: Array1::zeros(self.cfg.d_latent),
        }
    }
}

impl<F: Float> Params<F> for CodecParams<F> {
    fn entries(&self) -> Vec<(String, ArrayViewD<'_, F>)> {
        vec![
            ("enc1.w".into(), self.enc1.w.view().into_dyn()),
            ("enc1.b".into(), self.enc1.b.view().into_dyn()),
            ("enc2.w".into(), self.enc2.w.view().into_dyn()),
            ("enc2.b".into(), self.enc2.b.view().into_dyn()),
            ("dec1.w".into(), self.dec1.w.view().into_dyn()),
            ("dec1.b".into(), self.dec1.b.view().into_dyn()),
            ("dec2.w".into(), self.dec2.w.view().into_dyn()),
            ("dec2.b".into(), self.dec2.b.view().into_dyn()),
            ("latent_shift".into(), self.latent_shift.view().into_dyn()),
            ("latent_scale".into(), self.latent_scale.view().into_dyn()),
        ]
    }

    fn entries_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, F>)> {
        vec![
            ("enc1.w".into(), self.enc1.w.view_mut().into_dyn()),
            ("enc1.b".into(), self.enc1.b.view_mut().into_dyn()),
            ("enc2.w".into(), self.enc2.w.view_mut().into_dyn()),
            ("enc2.b".into(), self.enc2.b.view_mut().into_dyn()),
            ("dec1.w".into(), self.dec1.w.view_mut().into_dyn()),
            ("dec1.b".into(), self.dec1.b.view_mut().into_dyn()),
            ("dec2.w".into(), self.dec2.w.view_mut().into_dyn()),
            ("dec2.b".into(), self.dec2.b.view_mut().into_dyn()),
            ("latent_shift".into(), self.latent_shift.view_mut().into_dyn()),
            ("latent_scale".into(), self.latent_scale.view_mut().into_dyn()),
        ]
    }
}

/// Per-frame latents at the mel frame rate.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSequence<F> {
    pub frames: Array2<F>,
    pub frame_rate: f64,
}

impl<F: Float> LatentSequence<F> {
    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.nrows() == 0
    }

    pub fn slice_frames(&self, start: usize, end: usize) -> LatentSequence<F> {
        LatentSequence {
            frames: self.frames.slice(s![start..end, ..]).to_owned(),
            frame_rate: self.frame_rate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncodeMode {
    Mean,
    Sample(u64),
}

fn normalize_input<F: Float>(mel: &MelSpectrogram, cfg: &CodecConfig) -> Array2<F> {
    let shift = cfg.input_shift;
    let scale = cfg.input_scale;
    mel.frames.mapv(|v| F::c((v - shift) / scale))
}

/// Raw (pre-standardization) posterior stats for each frame.
fn encoder_stats<F: Float>(x: &Array2<F>, params: &CodecParams<F>) -> (Array2<F>, Array2<F>, Array2<F>) {
    let h = tanh_fwd(&params.enc1.forward(x));
    let stats = params.enc2.forward(&h);
    let d = params.cfg.d_latent;
    let mu = stats.slice(s![.., ..d]).to_owned();
    let logvar = stats.slice(s![.., d..]).to_owned();
    (h, mu, logvar)
}

/// Encodes a mel spectrogram to per-frame latents. `Mean` returns the
/// posterior mean; `Sample(seed)` draws `μ + σ⊙ζ` deterministically from the
/// seed. Output latents carry the calibrated standardization.
pub fn encode<F: Float>(
    mel: &MelSpectrogram,
    params: &CodecParams<F>,
    mode: EncodeMode,
) -> Result<LatentSequence<F>> {
    if mel.n_mels() != params.cfg.n_mels {
        return Err(Error::ShapeMismatch(format!(
            "mel has {} bands, codec expects {}",
            mel.n_mels(),
            params.cfg.n_mels
        )));
    }
    let x = normalize_input(mel, &params.cfg);
    let (_, mu, logvar) = encoder_stats(&x, params);
    let raw = match mode {
        EncodeMode::Mean => mu,
        EncodeMode::Sample(seed) => {
            let mut rng = seeded_rng(seed);
            let zeta = randn_mat::<F>(&mut rng, mu.nrows(), mu.ncols());
            let half = F::c(0.5);
            let sigma = logvar.mapv(|lv| (lv * half).exp());
            mu + sigma * zeta
        }
    };
    let mut frames = raw;
    for mut row in frames.rows_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - params.latent_shift[j]) / params.latent_scale[j];
        }
    }
    Ok(LatentSequence {
        frames,
        frame_rate: mel.frame_rate,
    })
}

fn decode_raw<F: Float>(raw: &Array2<F>, params: &CodecParams<F>) -> (Array2<F>, Array2<F>) {
    let h = tanh_fwd(&params.dec1.forward(raw));
    let out_norm = params.dec2.forward(&h);
    (h, out_norm)
}

/// Decodes latents back to a log-mel spectrogram, clamped at the log floor.
pub fn decode<F: Float>(latents: &LatentSequence<F>, params: &CodecParams<F>) -> Result<MelSpectrogram> {
    if latents.frames.ncols() != params.cfg.d_latent {
        return Err(Error::ShapeMismatch(format!(
            "latents have dim {}, codec expects {}",
            latents.frames.ncols(),
            params.cfg.d_latent
        )));
    }
    let mut raw = latents.frames.clone();
    for mut row in raw.rows_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = *v * params.latent_scale[j] + params.latent_shift[j];
        }
    }
    let (_, out_norm) = decode_raw(&raw, params);
    let cfg = &params.cfg;
    let floor = LOG_FLOOR.ln();
    let frames = out_norm.mapv(|v| (v.as_f64() * cfg.input_scale + cfg.input_shift).max(floor));
    let l = frames.nrows();
    Ok(MelSpectrogram {
        frames,
        frame_rate: cfg.sample_rate as f64 / cfg.frame.hop as f64,
        sample_rate: cfg.sample_rate,
        cfg: cfg.frame,
        n_samples: l.saturating_sub(1) * cfg.frame.hop,
        f_min: cfg.f_min,
        f_max: cfg.f_max,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboBreakdown {
    pub total: f64,
    pub recon_mse: f64,
    pub kl_term: f64,
}

/// ELBO pieces for one mel spectrogram: reconstruction MSE of a sampled
/// decode (in log-mel units) plus the closed-form Gaussian KL.
pub fn elbo_loss<F: Float>(
    mel: &MelSpectrogram,
    params: &CodecParams<F>,
    beta_kl: f64,
    seed: u64,
) -> Result<ElboBreakdown> {
    elbo_with_grad(mel, params, beta_kl, seed, None)
}

/// Shared forward/backward for the ELBO. When `grads` is given, accumulates
/// exact reverse-mode gradients for every encoder/decoder parameter.
pub fn elbo_with_grad<F: Float>(
    mel: &MelSpectrogram,
    params: &CodecParams<F>,
    beta_kl: f64,
    seed: u64,
    grads: Option<&mut CodecParams<F>>,
) -> Result<ElboBreakdown> {
    if beta_kl < 0.0 {
        return Err(Error::InvalidInput("beta_kl must be >= 0".into()));
    }
    if mel.n_mels() != params.cfg.n_mels {
        return Err(Error::ShapeMismatch("mel width != codec n_mels".into()));
    }
    let cfg = params.cfg.clone();
    let x = normalize_input::<F>(mel, &cfg);
    let (h_enc, mu, logvar) = encoder_stats(&x, params);
    let (l, d) = (mu.nrows(), mu.ncols());

    let mut rng = seeded_rng(seed);
    let zeta = randn_mat::<F>(&mut rng, l, d);
    let half = F::c(0.5);
    let sigma = logvar.mapv(|lv| (lv * half).exp());
    let z = &mu + &(&sigma * &zeta);

    let (h_dec, out_norm) = decode_raw(&z, params);
    let floor = LOG_FLOOR.ln();
    // Decoded log-mel with the clamp applied, as decode() would produce.
    let decoded = out_norm.mapv(|v| (v.as_f64() * cfg.input_scale + cfg.input_shift).max(floor));

    let n_rec = (l * cfg.n_mels) as f64;
    let mut recon = 0.0;
    for (d_v, m_v) in decoded.iter().zip(mel.frames.iter()) {
        recon += (d_v - m_v) * (d_v - m_v);
    }
    recon /= n_rec;

    let n_kl = (l * d) as f64;
    let mut kl = 0.0;
    for (m_v, lv) in mu.iter().zip(logvar.iter()) {
        let m = m_v.as_f64();
        let lvf = lv.as_f64();
        kl += 0.5 * (m * m + lvf.exp() - 1.0 - lvf);
    }
    kl /= n_kl;

    let breakdown = ElboBreakdown {
        total: recon + beta_kl * kl,
        recon_mse: recon,
        kl_term: kl,
    };

    let Some(grads) = grads else {
        return Ok(breakdown);
    };

    // d(total)/d(decoded log-mel), zero where the floor clamp is active.
    let mut d_out_norm = Array2::zeros(out_norm.raw_dim());
    for ((dn, &on), (&dec, &target)) in d_out_norm
        .iter_mut()
        .zip(out_norm.iter())
        .zip(decoded.iter().zip(mel.frames.iter()))
    {
        let pre_clamp = on.as_f64() * cfg.input_scale + cfg.input_shift;
        if pre_clamp > floor {
            *dn = F::c(2.0 * (dec - target) / n_rec * cfg.input_scale);
        }
    }
    // Decoder backward.
    let dh_dec = params.dec2.backward(&h_dec, &d_out_norm, &mut grads.dec2);
    let dpre_dec = tanh_bwd(&h_dec, &dh_dec);
    let dz = params.dec1.backward(&z, &dpre_dec, &mut grads.dec1);

    // Reparametrization + KL backward into μ and logσ².
    let mut d_stats = Array2::zeros((l, 2 * d));
    let kl_scale = F::c(beta_kl / n_kl);
    for i in 0..l {
        for j in 0..d {
            let dz_ij = dz[(i, j)];
            let d_mu = dz_ij + kl_scale * mu[(i, j)];
            let d_lv = dz_ij * zeta[(i, j)] * sigma[(i, j)] * half
                + kl_scale * half * (logvar[(i, j)].exp() - F::one());
            d_stats[(i, j)] = d_mu;
            d_stats[(i, j + d)] = d_lv;
        }
    }
    // Encoder backward.
    let dh_enc = params.enc2.backward(&h_enc, &d_stats, &mut grads.enc2);
    let dpre_enc = tanh_bwd(&h_enc, &dh_enc);
    let _dx = params.enc1.backward(&x, &dpre_enc, &mut grads.enc1);

    Ok(breakdown)
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CodecTrainConfig {
    pub steps: u64,
    pub batch_frames: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta_kl: f64,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        CodecTrainConfig {
            steps: 3000,
            batch_frames: 256,
            lr: 1e-3,
            weight_decay: 1e-4,
            beta_kl: 1e-3,
        }
    }
}

pub struct TrainedCodec {
    pub params: CodecParams<f32>,
    /// Per-step training loss.
    pub loss_curve: Vec<f64>,
    /// Held-out (val split) reconstruction MSE in log-mel units.
    pub val_mse: f64,
}

fn mel_for_entry(manifest: &Manifest, entry: &crate::synthdata::ManifestEntry, cfg: &CodecConfig) -> Result<MelSpectrogram> {
    let wave = manifest.load_audio(entry)?;
    let spec = crate::dsp::stft(&wave, &cfg.frame)?;
    crate::dsp::mel_spectrogram(&spec, cfg.n_mels, cfg.f_min, cfg.f_max)
}

/// Trains the codec on the manifest's train split by minibatch gradient
/// descent over pooled mel frames. Deterministic given the seed; calibrates
/// the latent standardization from train-split posterior means at the end.
pub fn train_codec(
    manifest: &Manifest,
    cfg: &CodecConfig,
    train_cfg: &CodecTrainConfig,
    seed: u64,
) -> Result<TrainedCodec> {
    use rayon::prelude::*;
    let train_entries: Vec<_> = manifest.split(Split::Train).collect();
    if train_entries.is_empty() {
        return Err(Error::InvalidInput("empty train split".into()));
    }
    let mels: Vec<MelSpectrogram> = train_entries
        .par_iter()
        .map(|e| mel_for_entry(manifest, e, cfg))
        .collect::<Result<Vec<_>>>()?;

    // Pool all frames into one matrix (frame order fixed by clip order).
    let n_frames: usize = mels.iter().map(|m| m.frames.nrows()).sum();
    let mut pool = Array2::zeros((n_frames, cfg.n_mels));
    let mut row = 0;
    for mel in &mels {
        for r in mel.frames.rows() {
            pool.row_mut(row).assign(&r);
            row += 1;
        }
    }

    let mut params = CodecParams::<f32>::init(cfg, derive_seed(seed, "codec-init", 0));
    let mut grads = params.zeros_like();
    let mut state = AdamState::new(nn::n_params(&params));
    let adam = AdamWConfig {
        weight_decay: train_cfg.weight_decay,
        ..AdamWConfig::default()
    };
    let schedule = LrSchedule {
        base: train_cfg.lr,
        warmup_steps: 20,
        milestones: vec![],
        decay_factor: 0.1,
    };

    let mut order: Vec<usize> = (0..n_frames).collect();
    let mut rng = seeded_rng(derive_seed(seed, "codec-batches", 0));
    order.shuffle(&mut rng);
    let mut cursor = 0usize;
    let mut loss_curve = Vec::with_capacity(train_cfg.steps as usize);

    for step in 0..train_cfg.steps {
        let mut batch = Array2::zeros((train_cfg.batch_frames, cfg.n_mels));
        for i in 0..train_cfg.batch_frames {
            if cursor >= order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.row_mut(i).assign(&pool.row(order[cursor]));
            cursor += 1;
        }
        let mel_batch = MelSpectrogram {
            frames: batch,
            frame_rate: 0.0,
            sample_rate: cfg.sample_rate,
            cfg: cfg.frame,
            n_samples: 0,
            f_min: cfg.f_min,
            f_max: cfg.f_max,
        };
        nn::scale_params(&mut grads, 0.0);
        let breakdown = elbo_with_grad(
            &mel_batch,
            &params,
            train_cfg.beta_kl,
            derive_seed(seed, "codec-noise", step),
            Some(&mut grads),
        )?;
        loss_curve.push(breakdown.total);
        let lr = lr_at(step + 1, &schedule);
        adamw_step(&mut params, &grads, &mut state, lr, &adam);
    }

    // Calibrate per-dimension latent standardization on train posteriors.
    let mut mean = vec![0.0f64; cfg.d_latent];
    let mut sq = vec![0.0f64; cfg.d_latent];
    let mut count = 0.0f64;
    for mel in &mels {
        let x = normalize_input::<f32>(mel, cfg);
        let (_, mu, _) = encoder_stats(&x, &params);
        for r in mu.rows() {
            for (j, v) in r.iter().enumerate() {
                mean[j] += *v as f64;
                sq[j] += (*v as f64) * (*v as f64);
            }
            count += 1.0;
        }
    }
    for j in 0..cfg.d_latent {
        let m = mean[j] / count;
        let var = (sq[j] / count - m * m).max(0.0);
        params.latent_shift[j] = m as f32;
        params.latent_scale[j] = (var.sqrt().max(1e-3)) as f32;
    }

    // Held-out reconstruction error (mean-mode encode, no sampling noise).
    let val_entries: Vec<_> = manifest.split(Split::Val).collect();
    let eval_entries = if val_entries.is_empty() {
        train_entries.clone()
    } else {
        val_entries
    };
    let mut val_mse = 0.0;
    let mut val_n = 0.0;
    for entry in eval_entries {
        let mel = mel_for_entry(manifest, entry, cfg)?;
        let latents = encode(&mel, &params, EncodeMode::Mean)?;
        let rec = decode(&latents, &params)?;
        for (a, b) in rec.frames.iter().zip(mel.frames.iter()) {
            val_mse += (a - b) * (a - b);
            val_n += 1.0;
        }
    }
    val_mse /= val_n;

    Ok(TrainedCodec {
        params,
        loss_curve,
        val_mse,
    })
}

/// Encodes one clip's full 10 s audio to latents (mean mode).
pub fn encode_clip(
    manifest: &Manifest,
    entry: &crate::synthdata::ManifestEntry,
    params: &CodecParams<f32>,
) -> Result<LatentSequence<f32>> {
    let mel = mel_for_entry(manifest, entry, &params.cfg)?;
    encode(&mel, params, EncodeMode::Mean)
}
