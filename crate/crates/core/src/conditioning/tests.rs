use super::*;
use crate::nn;
use crate::synthdata::{render_video, ClipSpec, TimbreFamily, VIDEO_FPS};
use crate::util::{randn_mat, seeded_rng};

fn cfg() -> CondConfig {
    CondConfig {
        h: 32,
        d_latent: 8,
        n_families: 4,
    }
}

fn to_f<Fl: Float>(a: &ndarray::Array2<f64>) -> Array2<Fl> {
    a.mapv(Fl::c)
}

fn oracle_clip() -> ClipSpec {
    ClipSpec {
        clip_id: 0,
        duration: 10.0,
        event_times: vec![1.0, 3.5, 8.6],
        amplitudes: vec![0.9, 0.7, 0.8],
        family: TimbreFamily {
            family_id: 1,
            f0: 220.0,
            n_harmonics: 3,
            harmonic_weights: vec![1.0, 0.5, 0.25],
            decay_rate: 6.0,
            noise_mix: 0.05,
            blob: (0.3, 0.6),
            tint: [0.9, 0.5, 0.4],
        },
        rng_seed: 5,
    }
}

fn demo_inputs(drop: DropMask) -> CondInputs<f64> {
    let video = render_video(&oracle_clip());
    let feats = extract_visual_features(&video);
    let sync = extract_sync_features(&video).unwrap();
    let mut rng = seeded_rng(17);
    CondInputs {
        visual_feats: to_f(&feats),
        family_id: 1,
        cond_latents: Some(randn_mat::<f64>(&mut rng, 20, 8)),
        sync_raw: sync,
        latent_len: 40,
        pool: PoolMode::Average,
        drop,
    }
}

#[test]
fn time_embedding_at_zero_and_distinctness() {
    let e = fourier_time_embedding::<f64>(0.0, 16).unwrap();
    for i in 0..8 {
        assert_eq!(e[i], 0.0);
        assert_eq!(e[8 + i], 1.0);
    }
    assert!(fourier_time_embedding::<f64>(0.3, 7).is_err());

    // Distinct embeddings on a 0.01 grid.
    let grid: Vec<Array1<f64>> = (0..=100)
        .map(|k| fourier_time_embedding(k as f64 / 100.0, 16).unwrap())
        .collect();
    let mut min_dist = f64::INFINITY;
    for i in 0..grid.len() {
        for j in i + 1..grid.len() {
            let d: f64 = grid[i]
                .iter()
                .zip(grid[j].iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            min_dist = min_dist.min(d);
        }
    }
    assert!(min_dist > 0.0, "grid embeddings collide");
}

#[test]
fn time_embedding_is_lipschitz_per_coordinate() {
    let dim = 32;
    for &(t1, t2) in &[(0.0, 0.013), (0.41, 0.46), (0.9, 1.0)] {
        let a = fourier_time_embedding::<f64>(t1, dim).unwrap();
        let b = fourier_time_embedding::<f64>(t2, dim).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() <= TIME_EMB_OMEGA_MAX * (t1 - t2).abs() + 1e-12);
        }
    }
}

#[test]
fn visual_features_on_black_video_have_zero_diff() {
    let video = crate::synthdata::VideoFrames {
        frames: ndarray::Array4::zeros((240, 16, 16, 3)),
    };
    let feats = extract_visual_features(&video);
    assert_eq!(feats.nrows(), 240);
    for t in 0..240 {
        assert_eq!(feats[(t, 5)], 0.0);
    }
}

#[test]
fn visual_diff_energy_spikes_at_events() {
    let clip = oracle_clip();
    let video = render_video(&clip);
    let feats = extract_visual_features(&video);
    assert_eq!(feats.nrows(), 240);
    for &t_e in &clip.event_times {
        let ev = (t_e * VIDEO_FPS as f64).ceil() as usize;
        let quiet = ev.saturating_sub(3);
        assert!(
            feats[(ev, 5)] > feats[(quiet, 5)],
            "event frame {ev} not above quiet frame {quiet}"
        );
    }
}

#[test]
fn sync_features_static_video_and_peaks() {
    let video = crate::synthdata::VideoFrames {
        frames: ndarray::Array4::from_elem((10, 16, 16, 3), 0.3),
    };
    let s = extract_sync_features(&video).unwrap();
    assert_eq!(s.len(), 10);
    assert!(s.iter().all(|&v| v == 0.0));

    let clip = oracle_clip();
    let video = render_video(&clip);
    let s = extract_sync_features(&video).unwrap();
    assert_eq!(s.len(), 240);
    for &t_e in &clip.event_times {
        let ev = (t_e * VIDEO_FPS as f64).ceil() as usize;
        let lo = ev.saturating_sub(4);
        let hi = (ev + 4).min(s.len() - 1);
        let peak = (lo..=hi)
            .max_by(|&a, &b| s[a].partial_cmp(&s[b]).unwrap())
            .unwrap();
        assert!(
            (peak as isize - ev as isize).abs() <= 1,
            "sync peak {peak} vs event frame {ev}"
        );
    }

    let tiny = crate::synthdata::VideoFrames {
        frames: ndarray::Array4::zeros((1, 4, 4, 3)),
    };
    assert!(extract_sync_features(&tiny).is_err());
}

#[test]
fn resample_nearest_endpoints_and_identity() {
    let input: Vec<f64> = (0..192).map(|i| i as f64).collect();
    let out = resample_nearest(&input, 320);
    assert_eq!(out.len(), 320);
    assert_eq!(out[0], 0.0);
    assert_eq!(out[319], 191.0);

    let same = resample_nearest(&input, 192);
    assert_eq!(same, input);

    let constant = vec![0.7; 50];
    assert!(resample_nearest(&constant, 123).iter().all(|&v| v == 0.7));
}

#[test]
fn resample_nearest_index_map_is_monotone() {
    let input: Vec<f64> = (0..77).map(|i| i as f64).collect();
    for target in [1usize, 13, 77, 200, 333] {
        let out = resample_nearest(&input, target);
        for w in out.windows(2) {
            assert!(w[1] >= w[0], "non-monotone index map at target {target}");
        }
    }
}

#[test]
fn average_pooling_matches_hand_computation() {
    let params = ConditioningParams::<f64>::init(&cfg(), 3);
    // Constant sequence pools to the projection of that constant.
    let row = Array1::from_iter((0..8).map(|i| 0.1 * i as f64));
    let latents = Array2::from_shape_fn((6, 8), |(_, j)| row[j]);
    let (pooled, _) = pool_audio_condition(&latents, &params, PoolMode::Average).unwrap();
    let direct = params.audio_proj.forward_vec(&row);
    for (a, b) in pooled.iter().zip(direct.iter()) {
        assert!((a - b).abs() < 1e-12);
    }

    // Two frames pool to the projection of their midpoint.
    let mut rng = seeded_rng(4);
    let a = crate::util::randn_vec::<f64>(&mut rng, 8);
    let b = crate::util::randn_vec::<f64>(&mut rng, 8);
    let two = ndarray::stack![Axis(0), a, b];
    let (pooled, _) = pool_audio_condition(&two, &params, PoolMode::Average).unwrap();
    let mid = (&a + &b) / 2.0;
    let direct = params.audio_proj.forward_vec(&mid);
    for (x, y) in pooled.iter().zip(direct.iter()) {
        assert!((x - y).abs() < 1e-12);
    }

    let empty = Array2::<f64>::zeros((0, 8));
    assert!(pool_audio_condition(&empty, &params, PoolMode::Average).is_err());
}

#[test]
fn attention_pooling_with_uniform_scores_equals_average() {
    // Zero query ⇒ equal logits ⇒ softmax uniform ⇒ mean.
    let mut params = ConditioningParams::<f64>::init(&cfg(), 5);
    params.pool_query.fill(0.0);
    let mut rng = seeded_rng(9);
    let latents = randn_mat::<f64>(&mut rng, 11, 8);
    let (attn, _) = pool_audio_condition(&latents, &params, PoolMode::Attention).unwrap();
    let (avg, _) = pool_audio_condition(&latents, &params, PoolMode::Average).unwrap();
    for (a, b) in attn.iter().zip(avg.iter()) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn all_dropped_condition_depends_only_on_time() {
    let params = ConditioningParams::<f64>::init(&cfg(), 7);
    let mut inputs_a = demo_inputs(DropMask::all());
    let (bundle_a, _) = assemble_condition(&inputs_a, 0.3, &params).unwrap();

    // A completely different clip, same t → identical c.
    let mut rng = seeded_rng(55);
    inputs_a.cond_latents = Some(randn_mat::<f64>(&mut rng, 33, 8));
    inputs_a.family_id = 3;
    inputs_a.sync_raw = (0..240).map(|i| (i as f64).sin().abs()).collect();
    let (bundle_b, _) = assemble_condition(&inputs_a, 0.3, &params).unwrap();
    assert_eq!(bundle_a.c, bundle_b.c);

    // Different t → different c.
    let (bundle_c, _) = assemble_condition(&inputs_a, 0.7, &params).unwrap();
    assert_ne!(bundle_a.c, bundle_c.c);
}

#[test]
fn toggling_audio_drop_changes_c() {
    let params = ConditioningParams::<f64>::init(&cfg(), 7);
    let with_audio = demo_inputs(DropMask::none());
    let without_audio = demo_inputs(DropMask {
        audio: true,
        ..DropMask::none()
    });
    let (a, _) = assemble_condition(&with_audio, 0.4, &params).unwrap();
    let (b, _) = assemble_condition(&without_audio, 0.4, &params).unwrap();
    let dist: f64 = a
        .c
        .iter()
        .zip(b.c.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    assert!(dist > 0.0);
}

#[test]
fn bundles_are_finite_and_correctly_shaped() {
    let params = ConditioningParams::<f64>::init(&cfg(), 2);
    let mut rng = seeded_rng(31);
    for k in 0..1000 {
        let n_vis = rand::Rng::gen_range(&mut rng, 2..40usize);
        let n_lat = rand::Rng::gen_range(&mut rng, 1..30usize);
        let latent_len = rand::Rng::gen_range(&mut rng, 1..50usize);
        let drop = DropMask {
            audio: k % 3 == 0,
            video: k % 5 == 0,
            text: k % 7 == 0,
            sync: k % 11 == 0,
        };
        let inputs = CondInputs {
            visual_feats: randn_mat::<f64>(&mut rng, n_vis, VISUAL_FEATURE_DIM),
            family_id: k % 4,
            cond_latents: Some(randn_mat::<f64>(&mut rng, n_lat, 8)),
            sync_raw: (0..48).map(|_| rand::Rng::gen_range(&mut rng, 0.0..1.0)).collect(),
            latent_len,
            pool: if k % 2 == 0 { PoolMode::Average } else { PoolMode::Attention },
            drop,
        };
        let t = rand::Rng::gen_range(&mut rng, 0.0..1.0);
        let (bundle, _) = assemble_condition(&inputs, t, &params).unwrap();
        assert_eq!(bundle.c.len(), 32);
        assert!(bundle.c.iter().all(|v| v.is_finite()));
        assert_eq!(bundle.sync_stream.nrows(), latent_len);
        assert!(bundle.sync_stream.iter().all(|v| v.is_finite()));
    }
}

#[test]
fn missing_cond_audio_without_drop_flag_is_an_error() {
    let params = ConditioningParams::<f64>::init(&cfg(), 2);
    let mut inputs = demo_inputs(DropMask::none());
    inputs.cond_latents = None;
    assert!(assemble_condition(&inputs, 0.2, &params).is_err());
    inputs.drop.audio = true;
    assert!(assemble_condition(&inputs, 0.2, &params).is_ok());
}

#[test]
fn dropped_sync_stream_equals_null_stream_exactly() {
    let params = ConditioningParams::<f64>::init(&cfg(), 12);
    let inputs = demo_inputs(DropMask {
        sync: true,
        ..DropMask::none()
    });
    let (bundle, _) = assemble_condition(&inputs, 0.1, &params).unwrap();
    for row in bundle.sync_stream.rows() {
        for (a, b) in row.iter().zip(params.null_sync.iter()) {
            assert_eq!(a, b);
        }
    }
}

#[test]
fn assemble_is_bit_stable() {
    let params = ConditioningParams::<f64>::init(&cfg(), 12);
    let inputs = demo_inputs(DropMask::none());
    let (a, _) = assemble_condition(&inputs, 0.37, &params).unwrap();
    let (b, _) = assemble_condition(&inputs, 0.37, &params).unwrap();
    assert_eq!(a.c, b.c);
    assert_eq!(a.sync_stream, b.sync_stream);
    assert_eq!(a.visual_tokens, b.visual_tokens);
}

fn identity_adaln(h: usize) -> AdaLnParams<f64> {
    // Zero MLPs with output biases forcing W_γ(c) ≡ 1, W_β(c) ≡ 0.
    let mut p = AdaLnParams::zeros(h);
    p.w_gamma.fc2.b.fill(1.0);
    p
}

#[test]
fn adaln_identity_modulation_reduces_to_layernorm() {
    let h = 16;
    let params = identity_adaln(h);
    let mut rng = seeded_rng(3);
    let f = randn_mat::<f64>(&mut rng, 9, h);
    let c = crate::util::randn_vec::<f64>(&mut rng, h);
    let out = adaln(&f, &c, &params);
    let ln = layernorm_fwd(&f, LN_EPS);
    let max_dev = out
        .iter()
        .zip(ln.normalized.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(max_dev <= 1e-7, "max deviation {max_dev}");
}

#[test]
fn adaln_zero_gamma_outputs_beta_for_every_token() {
    let h = 8;
    let mut params = AdaLnParams::<f64>::zeros(h);
    for j in 0..h {
        params.w_beta.fc2.b[j] = j as f64 * 0.5 - 1.0;
    }
    let mut rng = seeded_rng(4);
    let f = randn_mat::<f64>(&mut rng, 5, h);
    let c = crate::util::randn_vec::<f64>(&mut rng, h);
    let out = adaln(&f, &c, &params);
    for row in out.rows() {
        for (j, v) in row.iter().enumerate() {
            assert!((v - (j as f64 * 0.5 - 1.0)).abs() < 1e-12);
        }
    }
}

#[test]
fn adaln_is_invariant_to_per_token_affine_rescale() {
    let h = 24;
    let mut rng = seeded_rng(8);
    let params = AdaLnParams::<f64>::init(&mut rng, h);
    let f = randn_mat::<f64>(&mut rng, 6, h);
    let c = crate::util::randn_vec::<f64>(&mut rng, h);
    let base = adaln(&f, &c, &params);
    let mut scaled = f.clone();
    // Rescale one row by a > 0 and shift by b.
    for v in scaled.row_mut(2).iter_mut() {
        *v = 3.7 * *v + 0.9;
    }
    let out = adaln(&scaled, &c, &params);
    // Exact only at ε = 0; the ε = 1e-5 variance correction leaves a
    // residual of order ε·(1 − 1/a²)/2 per unit output.
    for (a, b) in base.row(2).iter().zip(out.row(2).iter()) {
        assert!((a - b).abs() < 1e-4, "{a} vs {b}");
    }
}

#[test]
fn adaln_backward_matches_finite_differences() {
    let h = 10;
    let mut rng = seeded_rng(21);
    let params = AdaLnParams::<f64>::init(&mut rng, h);
    let f = randn_mat::<f64>(&mut rng, 4, h);
    let c = crate::util::randn_vec::<f64>(&mut rng, h);
    let wts = randn_mat::<f64>(&mut rng, 4, h);

    let loss = |f: &Array2<f64>, c: &Array1<f64>, p: &AdaLnParams<f64>| {
        (&adaln(f, c, p) * &wts).sum()
    };
    let (out, cache) = adaln_fwd(&f, &c, &params);
    let _ = out;
    let mut grads = AdaLnParams::<f64>::zeros(h);
    let mut d_c = Array1::zeros(h);
    let df = adaln_bwd(&wts, &cache, &params, &mut grads, &mut d_c);

    let eps = 1e-6;
    // f gradient.
    for idx in [(0usize, 0usize), (2, 5), (3, 9)] {
        let mut fp = f.clone();
        fp[idx] += eps;
        let lp = loss(&fp, &c, &params);
        fp[idx] -= 2.0 * eps;
        let lm = loss(&fp, &c, &params);
        let num = (lp - lm) / (2.0 * eps);
        assert!((num - df[idx]).abs() < 1e-5 * (1.0 + num.abs()));
    }
    // c gradient.
    for i in [0usize, 4, 9] {
        let mut cp = c.clone();
        cp[i] += eps;
        let lp = loss(&f, &cp, &params);
        cp[i] -= 2.0 * eps;
        let lm = loss(&f, &cp, &params);
        let num = (lp - lm) / (2.0 * eps);
        assert!((num - d_c[i]).abs() < 1e-5 * (1.0 + num.abs()));
    }
    // One weight coordinate in each modulation net.
    let mut pp = params.clone();
    pp.w_gamma.fc1.w[(3, 2)] += eps;
    let lp = loss(&f, &c, &pp);
    pp.w_gamma.fc1.w[(3, 2)] -= 2.0 * eps;
    let lm = loss(&f, &c, &pp);
    let num = (lp - lm) / (2.0 * eps);
    assert!((num - grads.w_gamma.fc1.w[(3, 2)]).abs() < 1e-5 * (1.0 + num.abs()));
}

#[test]
fn assemble_backward_matches_finite_differences() {
    let c = cfg();
    let params = ConditioningParams::<f64>::init(&c, 77);
    for pool in [PoolMode::Average, PoolMode::Attention] {
        for drop in [
            DropMask::none(),
            DropMask {
                audio: true,
                ..DropMask::none()
            },
            DropMask {
                video: true,
                sync: true,
                ..DropMask::none()
            },
        ] {
            let mut inputs = demo_inputs(drop);
            inputs.pool = pool;
            // A scalar loss touching every bundle output.
            let mut rng = seeded_rng(1000);
            let w_sum = crate::util::randn_vec::<f64>(&mut rng, c.h);
            let w_sync = randn_mat::<f64>(&mut rng, inputs.latent_len, c.h);
            let w_vis = randn_mat::<f64>(&mut rng, inputs.visual_feats.nrows(), c.h);
            let w_text = crate::util::randn_vec::<f64>(&mut rng, c.h);
            let loss = |p: &ConditioningParams<f64>| {
                let (b, _) = assemble_condition(&inputs, 0.5, p).unwrap();
                b.modality_sum.dot(&w_sum)
                    + (&b.sync_stream * &w_sync).sum()
                    + (&b.visual_tokens * &w_vis).sum()
                    + b.text_token.dot(&w_text)
            };
            let (_, cache) = assemble_condition(&inputs, 0.5, &params).unwrap();
            let mut grads = params.zeros_like();
            assemble_backward(
                &inputs, &cache, &w_sum, &w_sync, &w_vis, &w_text, &params, &mut grads,
            );

            let flat = nn::flatten(&params);
            let gflat = nn::flatten(&grads);
            let mut rng = seeded_rng(2024);
            let h_fd = 1e-6;
            for _ in 0..40 {
                let idx = rand::Rng::gen_range(&mut rng, 0..flat.len());
                let mut pp = params.clone();
                let mut fp = flat.clone();
                fp[idx] += h_fd;
                nn::load_flat(&mut pp, &fp);
                let lp = loss(&pp);
                fp[idx] -= 2.0 * h_fd;
                nn::load_flat(&mut pp, &fp);
                let lm = loss(&pp);
                let num = (lp - lm) / (2.0 * h_fd);
                let ana = gflat[idx];
                assert!(
                    (num - ana).abs() <= 1e-5 * (1.0 + num.abs().max(ana.abs())),
                    "pool {pool:?} drop {drop:?} coord {idx}: {num} vs {ana}"
                );
            }
        }
    }
}
