use super::*;
use rustfft::num_complex::Complex64;

fn cfg() -> FrameConfig {
    FrameConfig::default()
}

/// Independent O(n²) DFT used as the oracle for spectral assertions.
fn brute_dft(frame: &[f64]) -> Vec<Complex64> {
    let n = frame.len();
    (0..n / 2 + 1)
        .map(|k| {
            let mut acc = Complex64::new(0.0, 0.0);
            for (i, &x) in frame.iter().enumerate() {
                let ang = -2.0 * std::f64::consts::PI * k as f64 * i as f64 / n as f64;
                acc += Complex64::new(ang.cos(), ang.sin()) * x;
            }
            acc
        })
        .collect()
}

#[test]
fn stft_of_zero_signal_is_zero() {
    let wave = Waveform::silence(4321, 8000);
    let spec = stft(&wave, &cfg()).unwrap();
    assert!(spec.frames.iter().all(|c| c.norm() == 0.0));
}

#[test]
fn stft_frame_count_formula() {
    let wave = Waveform::silence(80000, 8000);
    let spec = stft(&wave, &cfg()).unwrap();
    assert_eq!(spec.frames.nrows(), 401);
    // Frame t is centred on sample t·hop, so the first 8 s of a 10 s clip
    // correspond to frames [0, 320).
    assert_eq!((8.0 * 8000.0 / 200.0) as usize, 320);
    assert!((spec.frame_rate - 40.0).abs() < 1e-12);
}

#[test]
fn stft_rejects_empty_signal() {
    let wave = Waveform::new(vec![], 8000);
    assert!(stft(&wave, &cfg()).is_err());
}

#[test]
fn exact_bin_sine_concentrates_like_the_brute_force_oracle() {
    let c = cfg();
    let k = 12;
    let freq = k as f64 * 8000.0 / c.n_fft as f64;
    let wave = sine_wave(freq, 0.9, 8000, 8000);
    let spec = stft(&wave, &c).unwrap();
    let window = hann_window(c.n_fft);

    // Oracle: windowed slice around an interior frame, brute-force DFT.
    let t = 20usize;
    let start = t * c.hop - c.n_fft / 2;
    let frame: Vec<f64> = (0..c.n_fft)
        .map(|i| wave.samples[start + i] * window[i])
        .collect();
    let oracle = brute_dft(&frame);
    let oracle_energy: Vec<f64> = oracle.iter().map(|c| c.norm_sqr()).collect();
    let total: f64 = oracle_energy.iter().sum();
    let frac_k = oracle_energy[k] / total;
    let frac_neighborhood = (oracle_energy[k - 1] + oracle_energy[k] + oracle_energy[k + 1]) / total;

    // A Hann window spreads an exact-bin sine over bins k-1..k+1 with
    // amplitude weights (0.25, 0.5, 0.25): 2/3 of the energy sits in bin k
    // and everything sits in the three-bin neighborhood.
    assert!((frac_k - 2.0 / 3.0).abs() < 1e-9, "oracle bin fraction {frac_k}");
    assert!(frac_neighborhood > 0.999999);

    // The implementation agrees with the oracle on every interior frame.
    for t in 2..spec.frames.nrows() - 2 {
        let row = spec.frames.row(t);
        let energy: Vec<f64> = row.iter().map(|c| c.norm_sqr()).collect();
        let total: f64 = energy.iter().sum();
        assert!((energy[k] / total - frac_k).abs() < 1e-9);
        let peak = energy
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(peak, k);
    }
}

#[test]
fn istft_inverts_stft_exactly() {
    let mut rng = crate::util::seeded_rng(42);
    let c = cfg();
    for len in [1usize, 7, 199, 200, 512, 1000, 8000] {
        let wave = Waveform::new(
            (0..len).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect(),
            8000,
        );
        let spec = stft(&wave, &c).unwrap();
        let back = istft(&spec, &c).unwrap();
        assert_eq!(back.samples.len(), len);
        for (a, b) in wave.samples.iter().zip(back.samples.iter()) {
            assert!((a - b).abs() <= 1e-6, "len {len}: {a} vs {b}");
        }
    }
}

#[test]
fn istft_roundtrip_random_signals() {
    let mut rng = crate::util::seeded_rng(7);
    let c = cfg();
    for _ in 0..1000 {
        let len = rand::Rng::gen_range(&mut rng, 1..4000usize);
        let wave = Waveform::new(
            (0..len).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect(),
            8000,
        );
        let back = istft(&stft(&wave, &c).unwrap(), &c).unwrap();
        let max_err = wave
            .samples
            .iter()
            .zip(back.samples.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_err <= 1e-6, "len {len} err {max_err}");
    }
}

#[test]
fn istft_of_zero_spectrogram_is_zero() {
    let c = cfg();
    let spec = stft(&Waveform::silence(999, 8000), &c).unwrap();
    let back = istft(&spec, &c).unwrap();
    assert!(back.samples.iter().all(|&s| s == 0.0));
}

#[test]
fn istft_rejects_mismatched_config() {
    let c = cfg();
    let spec = stft(&Waveform::silence(999, 8000), &c).unwrap();
    let other = FrameConfig {
        hop: 256,
        ..c
    };
    assert!(istft(&spec, &other).is_err());
}

#[test]
fn frame_count_property_over_lengths() {
    let c = cfg();
    let mut rng = crate::util::seeded_rng(9);
    let mut lens: Vec<usize> = (0..200).map(|_| rand::Rng::gen_range(&mut rng, 1..=80000usize)).collect();
    lens.extend([1, 2, 199, 200, 201, 511, 512, 513, 79999, 80000]);
    for len in lens {
        let spec = stft(&Waveform::silence(len, 8000), &c).unwrap();
        assert_eq!(spec.frames.nrows(), 1 + len / c.hop, "len {len}");
    }
}

#[test]
fn hann_satisfies_cola_at_half_hop() {
    let n = 512;
    let w = hann_window(n);
    for offset in 0..n / 2 {
        let sum = w[offset] + w[offset + n / 2];
        assert!((sum - 1.0).abs() < 1e-12);
    }
}

#[test]
fn mel_scale_matches_formula() {
    // Oracle: direct evaluation of m(f) = 2595·log10(1 + f/700).
    let m1000 = hz_to_mel(1000.0);
    assert!((m1000 - 1000.0).abs() < 0.1, "m(1000) = {m1000}");
    assert!((mel_to_hz(m1000) - 1000.0).abs() < 1e-9);
    // Strictly increasing.
    let mut prev = hz_to_mel(0.0);
    for f in 1..4000 {
        let m = hz_to_mel(f as f64);
        assert!(m > prev);
        prev = m;
    }
}

#[test]
fn mel_of_zero_spectrogram_is_log_floor() {
    let spec = stft(&Waveform::silence(2000, 8000), &cfg()).unwrap();
    let mel = mel_spectrogram(&spec, 64, 0.0, 4000.0).unwrap();
    for &v in mel.frames.iter() {
        assert_eq!(v, LOG_FLOOR.ln());
    }
}

#[test]
fn mel_rejects_bad_band() {
    let spec = stft(&Waveform::silence(2000, 8000), &cfg()).unwrap();
    assert!(mel_spectrogram(&spec, 64, 2000.0, 1999.0).is_err());
    assert!(mel_spectrogram(&spec, 1, 0.0, 4000.0).is_err());
}

#[test]
fn filterbank_rows_are_unimodal_and_cover_band() {
    let fb = MelFilterbank::new(64, 512, 8000, 0.0, 4000.0).unwrap();
    assert!(fb.weights.iter().all(|&w| w >= 0.0));
    for row in fb.weights.rows() {
        // Exactly one maximal plateau: weights rise to the peak then fall.
        let peak = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        for j in 1..=peak {
            assert!(row[j] >= row[j - 1] - 1e-12);
        }
        for j in peak + 1..row.len() {
            assert!(row[j] <= row[j - 1] + 1e-12);
        }
        assert!(row.iter().any(|&w| w > 0.0), "empty filter row");
    }
    // Columns between the first filter's peak and f_max are covered.
    let col_start = (hz_to_mel(0.0).max(0.0) as usize).max(1);
    let _ = col_start;
    let n_bins = 257;
    let first_peak_bin = fb.weights.row(0).iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0;
    for j in first_peak_bin..n_bins - 1 {
        let col_sum: f64 = (0..64).map(|m| fb.weights[(m, j)]).sum();
        assert!(col_sum > 0.0, "uncovered bin {j}");
    }
}

#[test]
fn griffin_lim_zero_magnitude_gives_silence() {
    let c = cfg();
    let spec = stft(&Waveform::silence(1600, 8000), &c).unwrap();
    let result = griffin_lim(&spec.magnitude(), &c, 4, 0).unwrap();
    assert!(result.waveform.samples.iter().all(|&s| s == 0.0));
}

#[test]
fn griffin_lim_converges_on_a_tone() {
    let c = cfg();
    let tone = sine_wave(440.0, 0.8, 8000, 8000);
    let target = stft(&tone, &c).unwrap().magnitude();
    let result = griffin_lim(&target, &c, 32, 1).unwrap();
    let last = *result.convergence.last().unwrap();
    assert!(last <= 0.1, "spectral convergence {last} after 32 iters");
    // Non-increasing within slack, a property of alternating projections.
    for w in result.convergence.windows(2) {
        assert!(w[1] <= w[0] + 1e-9, "convergence increased: {:?}", w);
    }
}

#[test]
fn griffin_lim_is_deterministic_per_seed() {
    let c = cfg();
    let tone = sine_wave(330.0, 0.5, 4000, 8000);
    let target = stft(&tone, &c).unwrap().magnitude();
    let a = griffin_lim(&target, &c, 8, 5).unwrap();
    let b = griffin_lim(&target, &c, 8, 5).unwrap();
    assert_eq!(a.waveform.samples, b.waveform.samples);
    let other = griffin_lim(&target, &c, 8, 6).unwrap();
    assert_ne!(a.waveform.samples, other.waveform.samples);
}

#[test]
fn griffin_lim_rejects_negative_magnitudes_and_zero_iters() {
    let c = cfg();
    let mut target = stft(&Waveform::silence(1000, 8000), &c).unwrap().magnitude();
    assert!(griffin_lim(&target, &c, 0, 0).is_err());
    target.frames[(0, 0)] = -1.0;
    assert!(griffin_lim(&target, &c, 4, 0).is_err());
}

#[test]
fn mel_to_magnitude_of_floor_is_near_zero() {
    let spec = stft(&Waveform::silence(2000, 8000), &cfg()).unwrap();
    let mel = mel_spectrogram(&spec, 64, 0.0, 4000.0).unwrap();
    let mag = mel_to_magnitude(&mel).unwrap();
    assert_eq!(mag.frames.ncols(), 257);
    let max = mag.frames.iter().cloned().fold(0.0, f64::max);
    assert!(max <= 1e-4, "max magnitude {max}");
}

#[test]
fn mel_magnitude_roundtrip_keeps_tone_energy_within_factor_two() {
    let c = cfg();
    let tone = sine_wave(740.0, 0.7, 8000, 8000);
    let mag = stft(&tone, &c).unwrap().magnitude();
    let mel = mel_spectrogram(&stft(&tone, &c).unwrap(), 64, 0.0, 4000.0).unwrap();
    let back = mel_to_magnitude(&mel).unwrap();
    for t in 2..mag.frames.nrows() - 2 {
        let e0: f64 = mag.frames.row(t).iter().map(|m| m * m).sum();
        let e1: f64 = back.frames.row(t).iter().map(|m| m * m).sum();
        if e0 < 1e-6 {
            continue;
        }
        let ratio = e1 / e0;
        assert!(
            (0.5..=2.0).contains(&ratio),
            "frame {t}: energy ratio {ratio}"
        );
    }
}

#[test]
fn cepstrum_of_constant_rows_is_zero() {
    let spec = stft(&Waveform::silence(2000, 8000), &cfg()).unwrap();
    let mel = mel_spectrogram(&spec, 64, 0.0, 4000.0).unwrap(); // constant rows at the floor
    let cep = mel_cepstrum(&mel, 13).unwrap();
    assert_eq!(cep.frames.ncols(), 13);
    for &v in cep.frames.iter() {
        assert!(v.abs() < 1e-12);
    }
}

#[test]
fn cepstrum_concentrates_on_matching_dct_coefficient() {
    // Build a mel spectrogram whose log rows are cosine-shaped in the mel
    // index and check against a brute-force DCT oracle.
    let spec = stft(&Waveform::silence(400, 8000), &cfg()).unwrap();
    let mut mel = mel_spectrogram(&spec, 64, 0.0, 4000.0).unwrap();
    let n = 64usize;
    let target_c = 5usize;
    for t in 0..mel.frames.nrows() {
        for j in 0..n {
            mel.frames[(t, j)] = -3.0
                + (std::f64::consts::PI * target_c as f64 * (2.0 * j as f64 + 1.0)
                    / (2.0 * n as f64))
                    .cos();
        }
    }
    let cep = mel_cepstrum(&mel, 13).unwrap();

    // Brute-force DCT-II of one row.
    let row: Vec<f64> = (0..n).map(|j| mel.frames[(0, j)]).collect();
    for c in 1..=13usize {
        let mut acc = 0.0;
        for (j, &x) in row.iter().enumerate() {
            acc += x
                * (std::f64::consts::PI * c as f64 * (2.0 * j as f64 + 1.0) / (2.0 * n as f64))
                    .cos();
        }
        let oracle = acc * (2.0 / n as f64).sqrt();
        assert!((cep.frames[(0, c - 1)] - oracle).abs() < 1e-10);
    }
    // Energy concentrates on the matching coefficient.
    let energies: Vec<f64> = (0..13).map(|c| cep.frames[(0, c)].powi(2)).collect();
    let peak = energies
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .unwrap()
        .0;
    assert_eq!(peak, target_c - 1);
    let total: f64 = energies.iter().sum();
    assert!(energies[target_c - 1] / total > 0.99);
}

#[test]
fn cepstrum_rejects_k_not_below_n_mels() {
    let spec = stft(&Waveform::silence(400, 8000), &cfg()).unwrap();
    let mel = mel_spectrogram(&spec, 16, 0.0, 4000.0).unwrap();
    assert!(mel_cepstrum(&mel, 16).is_err());
    assert!(mel_cepstrum(&mel, 15).is_ok());
}

#[test]
fn cepstrum_is_linear_in_log_mel() {
    let spec = stft(&sine_wave(500.0, 0.6, 2000, 8000), &cfg()).unwrap();
    let mel_a = mel_spectrogram(&spec, 64, 0.0, 4000.0).unwrap();
    let mut mel_b = mel_a.clone();
    let mut rng = crate::util::seeded_rng(3);
    mel_b
        .frames
        .mapv_inplace(|v| v + rand::Rng::gen_range(&mut rng, -1.0..1.0));
    let mut mel_sum = mel_a.clone();
    mel_sum.frames = &mel_a.frames + &mel_b.frames;

    let ca = mel_cepstrum(&mel_a, 13).unwrap();
    let cb = mel_cepstrum(&mel_b, 13).unwrap();
    let csum = mel_cepstrum(&mel_sum, 13).unwrap();
    for ((a, b), s) in ca.frames.iter().zip(cb.frames.iter()).zip(csum.frames.iter()) {
        assert!((a + b - s).abs() <= 1e-9);
    }
}

#[test]
fn pgm_export_is_uniform_for_silence_and_deterministic() {
    let spec = stft(&Waveform::silence(2000, 8000), &cfg()).unwrap();
    let mel = mel_spectrogram(&spec, 64, 0.0, 4000.0).unwrap();
    let img = mel_to_pgm(&mel);
    let img2 = mel_to_pgm(&mel);
    assert_eq!(img, img2);
    let header_end = img.iter().enumerate().filter(|(_, &b)| b == b'\n').nth(2).unwrap().0 + 1;
    let body = &img[header_end..];
    assert_eq!(body.len(), 11 * 64);
    assert!(body.iter().all(|&b| b == body[0]), "silence must render uniform");
}

#[test]
fn csv_export_has_one_row_per_frame() {
    let spec = stft(&Waveform::silence(999, 8000), &cfg()).unwrap();
    let mel = mel_spectrogram(&spec, 8, 0.0, 4000.0).unwrap();
    let csv = matrix_to_csv(&mel.frames);
    assert_eq!(csv.lines().count(), mel.frames.nrows());
    assert_eq!(csv.lines().next().unwrap().split(',').count(), 8);
}
