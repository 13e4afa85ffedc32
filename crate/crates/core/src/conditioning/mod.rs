//! Multimodal conditioning: visual/sync feature extraction, nearest-neighbor
//! resampling to the latent rate, audio pooling, learned null embeddings, the
//! global conditioning vector, and adaptive layer normalization.
//!
//! The global vector `c` is the two-layer MLP of (time embedding + pooled
//! audio + pooled visual + text embedding + pooled sync); sync features also
//! feed the transformer as a per-token additive stream at the latent length.

use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD, Axis};

use crate::error::{Error, Result};
use crate::nn::{
    layernorm_bwd, layernorm_fwd, softmax_rows, LayerNormCache, Linear, Mlp2, Mlp2Cache, Params,
};
use crate::synthdata::VideoFrames;
use crate::util::{seeded_rng, Float};

pub const LN_EPS: f64 = 1e-5;
pub const VISUAL_FEATURE_DIM: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub struct DropMask {
    pub audio: bool,
    pub video: bool,
    pub text: bool,
    pub sync: bool,
}

impl DropMask {
    pub fn none() -> Self {
        DropMask::default()
    }

    pub fn all() -> Self {
        DropMask {
            audio: true,
            video: true,
            text: true,
            sync: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    Average,
    Attention,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CondConfig {
    pub h: usize,
    pub d_latent: usize,
    pub n_families: usize,
}

impl Default for CondConfig {
    fn default() -> Self {
        CondConfig {
            h: 128,
            d_latent: 16,
            n_families: 8,
        }
    }
}

/// adaLN modulation nets: `adaLN(f, c) = LayerNorm(f)·W_γ(c) + W_β(c)`.
#[derive(Debug, Clone)]
pub struct AdaLnParams<F> {
    pub w_gamma: Mlp2<F>,
    pub w_beta: Mlp2<F>,
}

impl<F: Float> AdaLnParams<F> {
    /// Near-identity init: output layers are damped toward zero with the
    /// gamma bias at one, so adaLN starts close to plain LayerNorm while the
    /// conditioning path stays differentiably live.
    pub fn init(rng: &mut impl rand::Rng, h: usize) -> Self {
        let damp = F::c(0.02);
        let mut w_gamma = Mlp2::init(rng, h, h, h);
        w_gamma.fc2.w.mapv_inplace(|w| w * damp);
        w_gamma.fc2.b.fill(F::one());
        let mut w_beta = Mlp2::init(rng, h, h, h);
        w_beta.fc2.w.mapv_inplace(|w| w * damp);
        AdaLnParams { w_gamma, w_beta }
    }

    pub fn zeros(h: usize) -> Self {
        AdaLnParams {
            w_gamma: Mlp2::zeros(h, h, h),
            w_beta: Mlp2::zeros(h, h, h),
        }
    }

    pub fn push_entries<'a>(
        &'a self,
        prefix: &str,
        out: &mut Vec<(String, ArrayViewD<'a, F>)>,
    ) {
        out.push((format!("{prefix}.gamma.fc1.w"), self.w_gamma.fc1.w.view().into_dyn()));
        out.push((format!("{prefix}.gamma.fc1.b"), self.w_gamma.fc1.b.view().into_dyn()));
        out.push((format!("{prefix}.gamma.fc2.w"), self.w_gamma.fc2.w.view().into_dyn()));
        out.push((format!("{prefix}.gamma.fc2.b"), self.w_gamma.fc2.b.view().into_dyn()));
        out.push((format!("{prefix}.beta.fc1.w"), self.w_beta.fc1.w.view().into_dyn()));
        out.push((format!("{prefix}.beta.fc1.b"), self.w_beta.fc1.b.view().into_dyn()));
        out.push((format!("{prefix}.beta.fc2.w"), self.w_beta.fc2.w.view().into_dyn()));
        out.push((format!("{prefix}.beta.fc2.b"), self.w_beta.fc2.b.view().into_dyn()));
    }

    pub fn push_entries_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, ArrayViewMutD<'a, F>)>,
    ) {
        out.push((format!("{prefix}.gamma.fc1.w"), self.w_gamma.fc1.w.view_mut().into_dyn()));
        out.push((format!("{prefix}.gamma.fc1.b"), self.w_gamma.fc1.b.view_mut().into_dyn()));
        out.push((format!("{prefix}.gamma.fc2.w"), self.w_gamma.fc2.w.view_mut().into_dyn()));
        out.push((format!("{prefix}.gamma.fc2.b"), self.w_gamma.fc2.b.view_mut().into_dyn()));
        out.push((format!("{prefix}.beta.fc1.w"), self.w_beta.fc1.w.view_mut().into_dyn()));
        out.push((format!("{prefix}.beta.fc1.b"), self.w_beta.fc1.b.view_mut().into_dyn()));
        out.push((format!("{prefix}.beta.fc2.w"), self.w_beta.fc2.w.view_mut().into_dyn()));
        out.push((format!("{prefix}.beta.fc2.b"), self.w_beta.fc2.b.view_mut().into_dyn()));
    }
}

/// Everything learned on the conditioning side: per-modality projections,
/// attention-pooling weights, the text embedding table, the four null
/// embeddings, and the aggregator MLP behind `c`.
#[derive(Debug, Clone)]
pub struct ConditioningParams<F> {
    pub cfg: CondConfig,
    pub visual_proj: Linear<F>,
    pub sync_proj: Linear<F>,
    pub audio_proj: Linear<F>,
    pub pool_query: Array1<F>,
    pub pool_key: Linear<F>,
    pub text_table: Array2<F>,
    pub null_audio: Array1<F>,
    pub null_video: Array1<F>,
    pub null_text: Array1<F>,
    pub null_sync: Array1<F>,
    pub cond_mlp: Mlp2<F>,
}

impl<F: Float> ConditioningParams<F> {
    pub fn init(cfg: &CondConfig, seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        let h = cfg.h;
        let d = cfg.d_latent;
        let scale = F::c(0.02);
        let mut null = |rng: &mut rand_chacha::ChaCha8Rng| {
            Array1::from_shape_fn(h, |_| F::standard_normal(rng) * scale)
        };
        ConditioningParams {
            cfg: cfg.clone(),
            visual_proj: Linear::init(&mut rng, VISUAL_FEATURE_DIM, h),
            sync_proj: Linear::init(&mut rng, 1, h),
            audio_proj: Linear::init(&mut rng, d, h),
            // Zero query makes attention pooling start as plain averaging.
            pool_query: Array1::zeros(d),
            pool_key: Linear::init(&mut rng, d, d),
            text_table: Array2::from_shape_fn((cfg.n_families, h), |_| {
                F::standard_normal(&mut rng) * F::c(1.0 / (h as f64).sqrt())
            }),
            null_audio: null(&mut rng),
            null_video: null(&mut rng),
            null_text: null(&mut rng),
            null_sync: null(&mut rng),
            cond_mlp: Mlp2::init(&mut rng, h, h, h),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let cfg = &self.cfg;
        ConditioningParams {
            cfg: cfg.clone(),
            visual_proj: Linear::zeros(VISUAL_FEATURE_DIM, cfg.h),
            sync_proj: Linear::zeros(1, cfg.h),
            audio_proj: Linear::zeros(cfg.d_latent, cfg.h),
            pool_query: Array1::zeros(cfg.d_latent),
            pool_key: Linear::zeros(cfg.d_latent, cfg.d_latent),
            text_table: Array2::zeros((cfg.n_families, cfg.h)),
            null_audio: Array1::zeros(cfg.h),
            null_video: Array1::zeros(cfg.h),
            null_text: Array1::zeros(cfg.h),
            null_sync: Array1::zeros(cfg.h),
            cond_mlp: Mlp2::zeros(cfg.h, cfg.h, cfg.h),
        }
    }
}

impl<F: Float> Params<F> for ConditioningParams<F> {
    fn entries(&self) -> Vec<(String, ArrayViewD<'_, F>)> {
        let mut v = vec![
            ("visual_proj.w".into(), self.visual_proj.w.view().into_dyn()),
            ("visual_proj.b".into(), self.visual_proj.b.view().into_dyn()),
            ("sync_proj.w".into(), self.sync_proj.w.view().into_dyn()),
            ("sync_proj.b".into(), self.sync_proj.b.view().into_dyn()),
            ("audio_proj.w".into(), self.audio_proj.w.view().into_dyn()),
            ("audio_proj.b".into(), self.audio_proj.b.view().into_dyn()),
            ("pool_query".into(), self.pool_query.view().into_dyn()),
            ("pool_key.w".into(), self.pool_key.w.view().into_dyn()),
            ("pool_key.b".into(), self.pool_key.b.view().into_dyn()),
            ("text_table".into(), self.text_table.view().into_dyn()),
            ("null_audio".into(), self.null_audio.view().into_dyn()),
            ("null_video".into(), self.null_video.view().into_dyn()),
            ("null_text".into(), self.null_text.view().into_dyn()),
            ("null_sync".into(), self.null_sync.view().into_dyn()),
        ];
        v.push(("cond_mlp.fc1.w".into(), self.cond_mlp.fc1.w.view().into_dyn()));
        v.push(("cond_mlp.fc1.b".into(), self.cond_mlp.fc1.b.view().into_dyn()));
        v.push(("cond_mlp.fc2.w".into(), self.cond_mlp.fc2.w.view().into_dyn()));
        v.push(("cond_mlp.fc2.b".into(), self.cond_mlp.fc2.b.view().into_dyn()));
        v
    }

    fn entries_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, F>)> {
        let mut v: Vec<(String, ArrayViewMutD<'_, F>)> = Vec::new();
        v.push(("visual_proj.w".into(), self.visual_proj.w.view_mut().into_dyn()));
        v.push(("visual_proj.b".into(), self.visual_proj.b.view_mut().into_dyn()));
        v.push(("sync_proj.w".into(), self.sync_proj.w.view_mut().into_dyn()));
        v.push(("sync_proj.b".into(), self.sync_proj.b.view_mut().into_dyn()));
        v.push(("audio_proj.w".into(), self.audio_proj.w.view_mut().into_dyn()));
        v.push(("audio_proj.b".into(), self.audio_proj.b.view_mut().into_dyn()));
        v.push(("pool_query".into(), self.pool_query.view_mut().into_dyn()));
        v.push(("pool_key.w".into(), self.pool_key.w.view_mut().into_dyn()));
        v.push(("pool_key.b".into(), self.pool_key.b.view_mut().into_dyn()));
        v.push(("text_table".into(), self.text_table.view_mut().into_dyn()));
        v.push(("null_audio".into(), self.null_audio.view_mut().into_dyn()));
        v.push(("null_video".into(), self.null_video.view_mut().into_dyn()));
        v.push(("null_text".into(), self.null_text.view_mut().into_dyn()));
        v.push(("null_sync".into(), self.null_sync.view_mut().into_dyn()));
        v.push(("cond_mlp.fc1.w".into(), self.cond_mlp.fc1.w.view_mut().into_dyn()));
        v.push(("cond_mlp.fc1.b".into(), self.cond_mlp.fc1.b.view_mut().into_dyn()));
        v.push(("cond_mlp.fc2.w".into(), self.cond_mlp.fc2.w.view_mut().into_dyn()));
        v.push(("cond_mlp.fc2.b".into(), self.cond_mlp.fc2.b.view_mut().into_dyn()));
        v
    }
}

/// `[sin(ω_i t), cos(ω_i t)]` with geometric frequencies spanning `[1, 10⁴]`.
pub fn fourier_time_embedding<F: Float>(t: F, dim: usize) -> Result<Array1<F>> {
    if dim % 2 != 0 || dim == 0 {
        return Err(Error::InvalidInput(format!(
            "time embedding dim {dim} must be even and positive"
        )));
    }
    let half = dim / 2;
    let mut out = Array1::zeros(dim);
    for i in 0..half {
        let exponent = if half == 1 {
            0.0
        } else {
            i as f64 / (half - 1) as f64
        };
        let omega = F::c(1e4f64.powf(exponent));
        out[i] = (omega * t).sin();
        out[half + i] = (omega * t).cos();
    }
    Ok(out)
}

pub const TIME_EMB_OMEGA_MAX: f64 = 1e4;

/// Per-frame handcrafted visual features: mean brightness, four quadrant
/// means, temporal difference energy, and the brightness centroid (x, y).
pub fn extract_visual_features(video: &VideoFrames) -> Array2<f64> {
    let shape = video.frames.shape();
    let (t_v, h, w) = (shape[0], shape[1], shape[2]);
    let mut out = Array2::zeros((t_v, VISUAL_FEATURE_DIM));
    let mut prev_gray: Option<Array2<f64>> = None;
    for t in 0..t_v {
        let frame = video.frames.index_axis(Axis(0), t);
        let mut gray = Array2::zeros((h, w));
        for y in 0..h {
            for x in 0..w {
                let mut v = 0.0;
                for ch in 0..3 {
                    v += frame[(y, x, ch)] as f64;
                }
                gray[(y, x)] = v / 3.0;
            }
        }
        let total: f64 = gray.sum();
        let mean = total / (h * w) as f64;
        let (hy, hx) = (h / 2, w / 2);
        let quad = |y0: usize, y1: usize, x0: usize, x1: usize| -> f64 {
            let mut acc = 0.0;
            for y in y0..y1 {
                for x in x0..x1 {
                    acc += gray[(y, x)];
                }
            }
            acc / ((y1 - y0) * (x1 - x0)) as f64
        };
        let diff = match &prev_gray {
            Some(p) => {
                let mut acc = 0.0;
                for (a, b) in gray.iter().zip(p.iter()) {
                    acc += (a - b).abs();
                }
                acc / (h * w) as f64
            }
            None => 0.0,
        };
        let (mut cx, mut cy) = (0.5, 0.5);
        if total > 1e-9 {
            let mut sx = 0.0;
            let mut sy = 0.0;
            for y in 0..h {
                for x in 0..w {
                    sx += gray[(y, x)] * x as f64;
                    sy += gray[(y, x)] * y as f64;
                }
            }
            cx = sx / total / (w - 1) as f64;
            cy = sy / total / (h - 1) as f64;
        }
        out[(t, 0)] = mean;
        out[(t, 1)] = quad(0, hy, 0, hx);
        out[(t, 2)] = quad(0, hy, hx, w);
        out[(t, 3)] = quad(hy, h, 0, hx);
        out[(t, 4)] = quad(hy, h, hx, w);
        out[(t, 5)] = diff;
        out[(t, 6)] = cx;
        out[(t, 7)] = cy;
        prev_gray = Some(gray);
    }
    out
}

/// 24 fps scalar motion stream: `s_t = mean |frame_t − frame_{t−1}|`, `s_0 = 0`.
pub fn extract_sync_features(video: &VideoFrames) -> Result<Vec<f64>> {
    let shape = video.frames.shape();
    let t_v = shape[0];
    if t_v < 2 {
        return Err(Error::InvalidInput(
            "sync features need at least 2 frames".into(),
        ));
    }
    let n = shape[1] * shape[2] * shape[3];
    let mut out = vec![0.0; t_v];
    for t in 1..t_v {
        let cur = video.frames.index_axis(Axis(0), t);
        let prev = video.frames.index_axis(Axis(0), t - 1);
        let mut acc = 0.0;
        for (a, b) in cur.iter().zip(prev.iter()) {
            acc += (*a as f64 - *b as f64).abs();
        }
        out[t] = acc / n as f64;
    }
    Ok(out)
}

/// Nearest-neighbor resampling: `out[j] = in[clamp(round(j·S/L), 0, S−1)]`.
pub fn resample_nearest<T: Clone>(input: &[T], target_len: usize) -> Vec<T> {
    assert!(!input.is_empty(), "resample_nearest needs a nonempty input");
    assert!(target_len >= 1);
    let s = input.len();
    (0..target_len)
        .map(|j| {
            let idx = ((j as f64 * s as f64 / target_len as f64).round() as usize).min(s - 1);
            input[idx].clone()
        })
        .collect()
}

pub struct AttnPoolCache<F> {
    pub scores: Array2<F>, // 1 × L softmax weights
    pub keys: Array2<F>,   // L × d
    pub pooled_latent: Array1<F>,
}

/// Pools a conditional-audio latent sequence to one h-vector. Average mode
/// projects the temporal mean; attention mode projects a learned-query
/// softmax combination (which reduces to the mean for uniform scores).
pub fn pool_audio_condition<F: Float>(
    latents: &Array2<F>,
    params: &ConditioningParams<F>,
    mode: PoolMode,
) -> Result<(Array1<F>, Option<AttnPoolCache<F>>)> {
    let l = latents.nrows();
    if l == 0 {
        return Err(Error::InvalidInput("cannot pool an empty latent sequence".into()));
    }
    match mode {
        PoolMode::Average => {
            let mean = latents.mean_axis(Axis(0)).unwrap();
            Ok((params.audio_proj.forward_vec(&mean), None))
        }
        PoolMode::Attention => {
            let keys = params.pool_key.forward(latents);
            let scale = F::c(1.0 / (params.cfg.d_latent as f64).sqrt());
            let raw: Array1<F> = keys.dot(&params.pool_query) * scale;
            let scores = softmax_rows(&raw.insert_axis(Axis(0)).to_owned());
            let pooled_latent = scores.row(0).dot(latents);
            let out = params.audio_proj.forward_vec(&pooled_latent);
            Ok((
                out,
                Some(AttnPoolCache {
                    scores,
                    keys,
                    pooled_latent,
                }),
            ))
        }
    }
}

/// Raw per-clip conditioning ingredients, before any learned projection.
#[derive(Debug, Clone)]
pub struct CondInputs<F> {
    pub visual_feats: Array2<F>,
    pub family_id: usize,
    pub cond_latents: Option<Array2<F>>,
    pub sync_raw: Vec<F>,
    pub latent_len: usize,
    pub pool: PoolMode,
    pub drop: DropMask,
}

/// Assembled conditioning for one example. `c` is valid for the `t` it was
/// built with; the flow model re-derives it from `modality_sum` for other
/// timesteps along the sampling path.
#[derive(Debug, Clone)]
pub struct ConditionBundle<F> {
    pub c: Array1<F>,
    pub modality_sum: Array1<F>,
    pub sync_stream: Array2<F>,
    pub visual_tokens: Array2<F>,
    pub text_token: Array1<F>,
    pub audio_pooled: Array1<F>,
    pub drop: DropMask,
}

pub struct AssembleCache<F> {
    pub sync_resampled: Vec<F>,
    pub pool_cache: Option<AttnPoolCache<F>>,
    pub latents_mean: Option<Array1<F>>,
    pub cond_mlp_cache: Mlp2Cache<F>,
}

/// Builds the condition bundle for one example at flow time `t`. Dropped
/// modalities are replaced by their learned null embeddings.
pub fn assemble_condition<F: Float>(
    inputs: &CondInputs<F>,
    t: F,
    params: &ConditioningParams<F>,
) -> Result<(ConditionBundle<F>, AssembleCache<F>)> {
    let cfg = &params.cfg;
    let h = cfg.h;
    let drop = inputs.drop;
    if inputs.cond_latents.is_none() && !drop.audio {
        return Err(Error::InvalidInput(
            "conditional audio missing but the audio modality is not dropped".into(),
        ));
    }
    if inputs.visual_feats.ncols() != VISUAL_FEATURE_DIM {
        return Err(Error::ShapeMismatch(format!(
            "visual features must have {VISUAL_FEATURE_DIM} columns"
        )));
    }
    if inputs.family_id >= cfg.n_families {
        return Err(Error::InvalidInput(format!(
            "family id {} out of range ({} families)",
            inputs.family_id, cfg.n_families
        )));
    }

    // Audio: pooled condition latents or the null embedding.
    let mut pool_cache = None;
    let mut latents_mean = None;
    let audio_pooled = if drop.audio {
        params.null_audio.clone()
    } else {
        let latents = inputs.cond_latents.as_ref().unwrap();
        let (pooled, cache) = pool_audio_condition(latents, params, inputs.pool)?;
        match inputs.pool {
            PoolMode::Average => latents_mean = Some(latents.mean_axis(Axis(0)).unwrap()),
            PoolMode::Attention => pool_cache = cache,
        }
        pooled
    };

    // Video: projected per-frame tokens, or null rows when dropped.
    let n_vis = inputs.visual_feats.nrows();
    let visual_tokens = if drop.video {
        let mut rows = Array2::zeros((n_vis, h));
        for mut r in rows.rows_mut() {
            r.assign(&params.null_video);
        }
        rows
    } else {
        params.visual_proj.forward(&inputs.visual_feats)
    };
    let visual_pooled = if drop.video {
        params.null_video.clone()
    } else {
        visual_tokens.mean_axis(Axis(0)).unwrap()
    };

    // Text: family embedding or null.
    let text_token = if drop.text {
        params.null_text.clone()
    } else {
        params.text_table.row(inputs.family_id).to_owned()
    };

    // Sync: resample to the latent length, project per token; null stream
    // when dropped (no leakage of the real stream).
    let sync_resampled: Vec<F> = if inputs.sync_raw.is_empty() {
        vec![F::zero(); inputs.latent_len]
    } else {
        resample_nearest(&inputs.sync_raw, inputs.latent_len)
    };
    let sync_stream = if drop.sync {
        let mut rows = Array2::zeros((inputs.latent_len, h));
        for mut r in rows.rows_mut() {
            r.assign(&params.null_sync);
        }
        rows
    } else {
        let col = Array2::from_shape_fn((inputs.latent_len, 1), |(i, _)| sync_resampled[i]);
        params.sync_proj.forward(&col)
    };
    let sync_pooled = if drop.sync {
        params.null_sync.clone()
    } else {
        sync_stream.mean_axis(Axis(0)).unwrap()
    };

    let modality_sum = &audio_pooled + &visual_pooled + &text_token + &sync_pooled;
    let time_emb = fourier_time_embedding(t, h)?;
    let (c, cond_mlp_cache) = params.cond_mlp.forward_vec(&(&time_emb + &modality_sum));

    Ok((
        ConditionBundle {
            c,
            modality_sum,
            sync_stream,
            visual_tokens,
            text_token,
            audio_pooled,
            drop,
        },
        AssembleCache {
            sync_resampled,
            pool_cache,
            latents_mean,
            cond_mlp_cache,
        },
    ))
}

/// Backward through bundle assembly. Takes gradients w.r.t. the bundle's
/// downstream-visible tensors and accumulates into the conditioning grads.
/// The pooled-term contributions (mean over tokens) are folded in here.
pub fn assemble_backward<F: Float>(
    inputs: &CondInputs<F>,
    cache: &AssembleCache<F>,
    d_modality_sum: &Array1<F>,
    d_sync_stream: &Array2<F>,
    d_visual_tokens: &Array2<F>,
    d_text_token: &Array1<F>,
    params: &ConditioningParams<F>,
    grads: &mut ConditioningParams<F>,
) {
    let drop = inputs.drop;
    let h = params.cfg.h;

    // Audio pooled term.
    if drop.audio {
        grads.null_audio += d_modality_sum;
    } else {
        let latents = inputs.cond_latents.as_ref().unwrap();
        match inputs.pool {
            PoolMode::Average => {
                let mean = cache.latents_mean.as_ref().unwrap();
                params
                    .audio_proj
                    .backward_vec(mean, d_modality_sum, &mut grads.audio_proj);
            }
            PoolMode::Attention => {
                let pc = cache.pool_cache.as_ref().unwrap();
                let d_pooled_latent = params.audio_proj.backward_vec(
                    &pc.pooled_latent,
                    d_modality_sum,
                    &mut grads.audio_proj,
                );
                // pooled_latent = Σ α_i x_i
                let d_alpha: Array1<F> = latents.dot(&d_pooled_latent);
                let d_scores = crate::nn::softmax_rows_bwd(
                    &pc.scores,
                    &d_alpha.insert_axis(Axis(0)).to_owned(),
                );
                let scale = F::c(1.0 / (params.cfg.d_latent as f64).sqrt());
                let d_raw = d_scores.row(0).mapv(|v| v * scale);
                // raw_i = q·k_i; grads into the query and the key projection.
                for (i, &dr) in d_raw.iter().enumerate() {
                    let k = pc.keys.row(i);
                    ndarray::Zip::from(&mut grads.pool_query)
                        .and(&k)
                        .for_each(|g, &kv| *g = *g + dr * kv);
                }
                let d_keys = {
                    let mut dk = Array2::zeros(pc.keys.raw_dim());
                    for (i, &dr) in d_raw.iter().enumerate() {
                        let mut row = dk.row_mut(i);
                        ndarray::Zip::from(&mut row)
                            .and(&params.pool_query)
                            .for_each(|o, &q| *o = dr * q);
                    }
                    dk
                };
                params.pool_key.backward(latents, &d_keys, &mut grads.pool_key);
            }
        }
    }

    // Visual: transformer tokens + pooled mean share the projection.
    let n_vis = inputs.visual_feats.nrows();
    if drop.video {
        let inv = F::c(1.0 / n_vis.max(1) as f64);
        for i in 0..n_vis {
            let row = d_visual_tokens.row(i);
            ndarray::Zip::from(&mut grads.null_video)
                .and(&row)
                .for_each(|g, &d| *g = *g + d);
        }
        let _ = inv;
        grads.null_video += d_modality_sum;
    } else {
        let inv = F::c(1.0 / n_vis as f64);
        let mut d_tokens = d_visual_tokens.clone();
        for mut row in d_tokens.rows_mut() {
            ndarray::Zip::from(&mut row)
                .and(d_modality_sum)
                .for_each(|o, &d| *o = *o + d * inv);
        }
        params
            .visual_proj
            .backward(&inputs.visual_feats, &d_tokens, &mut grads.visual_proj);
    }

    // Text token feeds both the transformer and the pooled sum.
    let d_text_total = d_text_token + d_modality_sum;
    if drop.text {
        grads.null_text += &d_text_total;
    } else {
        let mut row = grads.text_table.row_mut(inputs.family_id);
        ndarray::Zip::from(&mut row)
            .and(&d_text_total)
            .for_each(|g, &d| *g = *g + d);
    }

    // Sync stream + its pooled mean.
    let l = inputs.latent_len;
    let inv_l = F::c(1.0 / l.max(1) as f64);
    if drop.sync {
        for i in 0..l {
            let row = d_sync_stream.row(i);
            ndarray::Zip::from(&mut grads.null_sync)
                .and(&row)
                .for_each(|g, &d| *g = *g + d);
        }
        grads.null_sync += d_modality_sum;
    } else {
        let mut d_rows = d_sync_stream.clone();
        for mut row in d_rows.rows_mut() {
            ndarray::Zip::from(&mut row)
                .and(d_modality_sum)
                .for_each(|o, &d| *o = *o + d * inv_l);
        }
        let col = Array2::from_shape_fn((l, 1), |(i, _)| cache.sync_resampled[i]);
        params.sync_proj.backward(&col, &d_rows, &mut grads.sync_proj);
    }
    let _ = h;
}

pub struct AdaLnCache<F> {
    pub ln: LayerNormCache<F>,
    pub gamma: Array1<F>,
    pub beta: Array1<F>,
    pub gamma_cache: Mlp2Cache<F>,
    pub beta_cache: Mlp2Cache<F>,
}

/// `adaLN(f, c) = LayerNorm(f)·W_γ(c) + W_β(c)`, LayerNorm per token over the
/// hidden axis with ε = 1e-5 and no learned affine.
pub fn adaln_fwd<F: Float>(
    f: &Array2<F>,
    c: &Array1<F>,
    params: &AdaLnParams<F>,
) -> (Array2<F>, AdaLnCache<F>) {
    let ln = layernorm_fwd(f, F::c(LN_EPS));
    let (gamma, gamma_cache) = params.w_gamma.forward_vec(c);
    let (beta, beta_cache) = params.w_beta.forward_vec(c);
    let mut out = ln.normalized.clone();
    for mut row in out.rows_mut() {
        ndarray::Zip::from(&mut row)
            .and(&gamma)
            .and(&beta)
            .for_each(|o, &g, &b| *o = *o * g + b);
    }
    (
        out,
        AdaLnCache {
            ln,
            gamma,
            beta,
            gamma_cache,
            beta_cache,
        },
    )
}

/// Backward for adaLN; returns `df` and accumulates modulation-net gradients
/// plus the condition gradient into `d_c`.
pub fn adaln_bwd<F: Float>(
    dy: &Array2<F>,
    cache: &AdaLnCache<F>,
    params: &AdaLnParams<F>,
    grads: &mut AdaLnParams<F>,
    d_c: &mut Array1<F>,
) -> Array2<F> {
    let h = dy.ncols();
    let mut d_gamma = Array1::zeros(h);
    let mut d_beta = Array1::zeros(h);
    for i in 0..dy.nrows() {
        let dyr = dy.row(i);
        let yr = cache.ln.normalized.row(i);
        ndarray::Zip::from(&mut d_gamma)
            .and(&dyr)
            .and(&yr)
            .for_each(|g, &d, &y| *g = *g + d * y);
        ndarray::Zip::from(&mut d_beta)
            .and(&dyr)
            .for_each(|g, &d| *g = *g + d);
    }
    let mut d_norm = dy.clone();
    for mut row in d_norm.rows_mut() {
        ndarray::Zip::from(&mut row)
            .and(&cache.gamma)
            .for_each(|o, &g| *o = *o * g);
    }
    let df = layernorm_bwd(&cache.ln, &d_norm);
    *d_c += &params
        .w_gamma
        .backward_vec(&cache.gamma_cache, &d_gamma, &mut grads.w_gamma);
    *d_c += &params
        .w_beta
        .backward_vec(&cache.beta_cache, &d_beta, &mut grads.w_beta);
    df
}

/// Cache-free adaLN.
pub fn adaln<F: Float>(f: &Array2<F>, c: &Array1<F>, params: &AdaLnParams<F>) -> Array2<F> {
    adaln_fwd(f, c, params).0
}

#[cfg(test)]
mod tests;
