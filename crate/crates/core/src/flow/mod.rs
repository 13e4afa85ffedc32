//! The conditional velocity field: a multimodal transformer trained with flow
//! matching, plus ODE sampling and the full video+text+audio → waveform
//! generation pipeline.
//!
//! Audio latent tokens (with an additive per-token sync stream) pass through
//! joint-attention blocks over [audio ⊕ visual ⊕ text], then audio-only
//! blocks; every block is modulated by adaLN on the shared conditioning
//! vector. Gradients are exact reverse-mode, written out by hand and checked
//! against finite differences in double precision.

use ndarray::{s, Array1, Array2, ArrayViewD, ArrayViewMutD, Axis};
use rayon::prelude::*;

use crate::codec::{CodecParams, LatentSequence};
use crate::conditioning::{
    adaln_bwd, adaln_fwd, assemble_backward, assemble_condition, extract_sync_features,
    extract_visual_features, fourier_time_embedding, AdaLnCache, AdaLnParams, AssembleCache,
    CondInputs, ConditionBundle, ConditioningParams, DropMask, PoolMode,
};
use crate::dsp::{self, Waveform};
use crate::error::{Error, Result};
use crate::nn::{self, gelu_bwd, gelu_fwd, softmax_rows, softmax_rows_bwd, Linear, Params};
use crate::synthdata::VideoFrames;
use crate::util::{derive_seed, randn_mat, seeded_rng, Float};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FlowConfig {
    pub h: usize,
    pub d_latent: usize,
    pub n_mm: usize,
    pub n_sm: usize,
    pub heads: usize,
    pub mlp_expand: usize,
    pub max_audio_len: usize,
    pub max_visual_len: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            h: 128,
            d_latent: 16,
            n_mm: 2,
            n_sm: 3,
            heads: 4,
            mlp_expand: 4,
            max_audio_len: 400,
            max_visual_len: 240,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.h % self.heads != 0 {
            return Err(Error::Config(format!(
                "head count {} must divide hidden size {}",
                self.heads, self.h
            )));
        }
        Ok(())
    }
}

/// One transformer block: adaLN → multi-head self-attention → residual,
/// adaLN → MLP → residual.
#[derive(Debug, Clone)]
pub struct BlockParams<F> {
    pub ada1: AdaLnParams<F>,
    pub wq: Linear<F>,
    pub wk: Linear<F>,
    pub wv: Linear<F>,
    pub wo: Linear<F>,
    pub ada2: AdaLnParams<F>,
    pub fc1: Linear<F>,
    pub fc2: Linear<F>,
}

impl<F: Float> BlockParams<F> {
    fn init(rng: &mut impl rand::Rng, cfg: &FlowConfig) -> Self {
        let h = cfg.h;
        let hidden = h * cfg.mlp_expand;
        BlockParams {
            ada1: AdaLnParams::init(rng, h),
            wq: Linear::init(rng, h, h),
            wk: Linear::init(rng, h, h),
            wv: Linear::init(rng, h, h),
            wo: Linear::init(rng, h, h),
            ada2: AdaLnParams::init(rng, h),
            fc1: Linear::init(rng, h, hidden),
            fc2: Linear::init(rng, hidden, h),
        }
    }

    fn zeros(cfg: &FlowConfig) -> Self {
        let h = cfg.h;
        let hidden = h * cfg.mlp_expand;
        BlockParams {
            ada1: AdaLnParams::zeros(h),
            wq: Linear::zeros(h, h),
            wk: Linear::zeros(h, h),
            wv: Linear::zeros(h, h),
            wo: Linear::zeros(h, h),
            ada2: AdaLnParams::zeros(h),
            fc1: Linear::zeros(h, hidden),
            fc2: Linear::zeros(hidden, h),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FlowParams<F> {
    pub cfg: FlowConfig,
    pub audio_in: Linear<F>,
    pub visual_adapter: Linear<F>,
    pub text_adapter: Linear<F>,
    pub pos_audio: Array2<F>,
    pub pos_visual: Array2<F>,
    pub pos_text: Array1<F>,
    pub mm_blocks: Vec<BlockParams<F>>,
    pub sm_blocks: Vec<BlockParams<F>>,
    pub head: Linear<F>,
}

impl<F: Float> FlowParams<F> {
    pub fn init(cfg: &FlowConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seeded_rng(seed);
        let pos_scale = F::c(0.02);
        let mut head = Linear::init(&mut rng, cfg.h, cfg.d_latent);
        // Damped output head: the field starts near zero velocity, which
        // keeps the initial flow loss at the displacement variance.
        let damp = F::c(0.02);
        head.w.mapv_inplace(|w| w * damp);
        Ok(FlowParams {
            cfg: cfg.clone(),
            audio_in: Linear::init(&mut rng, cfg.d_latent, cfg.h),
            visual_adapter: Linear::init(&mut rng, cfg.h, cfg.h),
            text_adapter: Linear::init(&mut rng, cfg.h, cfg.h),
            pos_audio: randn_mat::<F>(&mut rng, cfg.max_audio_len, cfg.h).mapv(|v| v * pos_scale),
            pos_visual: randn_mat::<F>(&mut rng, cfg.max_visual_len, cfg.h).mapv(|v| v * pos_scale),
            pos_text: crate::util::randn_vec::<F>(&mut rng, cfg.h).mapv(|v| v * pos_scale),
            mm_blocks: (0..cfg.n_mm).map(|_| BlockParams::init(&mut rng, cfg)).collect(),
            sm_blocks: (0..cfg.n_sm).map(|_| BlockParams::init(&mut rng, cfg)).collect(),
            head,
        })
    }

    pub fn zeros_like(&self) -> Self {
        let cfg = &self.cfg;
        FlowParams {
            cfg: cfg.clone(),
            audio_in: Linear::zeros(cfg.d_latent, cfg.h),
            visual_adapter: Linear::zeros(cfg.h, cfg.h),
            text_adapter: Linear::zeros(cfg.h, cfg.h),
            pos_audio: Array2::zeros((cfg.max_audio_len, cfg.h)),
            pos_visual: Array2::zeros((cfg.max_visual_len, cfg.h)),
            pos_text: Array1::zeros(cfg.h),
            mm_blocks: (0..cfg.n_mm).map(|_| BlockParams::zeros(cfg)).collect(),
            sm_blocks: (0..cfg.n_sm).map(|_| BlockParams::zeros(cfg)).collect(),
            head: Linear::zeros(cfg.h, cfg.d_latent),
        }
    }
}

/// All learnable tensors of the generator: conditioning + velocity field.
#[derive(Debug, Clone)]
pub struct ModelParams<F> {
    pub cond: ConditioningParams<F>,
    pub flow: FlowParams<F>,
}

impl<F: Float> ModelParams<F> {
    pub fn init(
        cond_cfg: &crate::conditioning::CondConfig,
        flow_cfg: &FlowConfig,
        seed: u64,
    ) -> Result<Self> {
        Ok(ModelParams {
            cond: ConditioningParams::init(cond_cfg, derive_seed(seed, "cond-init", 0)),
            flow: FlowParams::init(flow_cfg, derive_seed(seed, "flow-init", 0))?,
        })
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams {
            cond: self.cond.zeros_like(),
            flow: self.flow.zeros_like(),
        }
    }
}

fn block_entries<'a, F>(
    prefix: &str,
    b: &'a BlockParams<F>,
    out: &mut Vec<(String, ArrayViewD<'a, F>)>,
) where
    F: Float,
{
    b.ada1.push_entries(&format!("{prefix}.ada1"), out);
    out.push((format!("{prefix}.wq.w"), b.wq.w.view().into_dyn()));
    out.push((format!("{prefix}.wq.b"), b.wq.b.view().into_dyn()));
    out.push((format!("{prefix}.wk.w"), b.wk.w.view().into_dyn()));
    out.push((format!("{prefix}.wk.b"), b.wk.b.view().into_dyn()));
    out.push((format!("{prefix}.wv.w"), b.wv.w.view().into_dyn()));
    out.push((format!("{prefix}.wv.b"), b.wv.b.view().into_dyn()));
    out.push((format!("{prefix}.wo.w"), b.wo.w.view().into_dyn()));
    out.push((format!("{prefix}.wo.b"), b.wo.b.view().into_dyn()));
    b.ada2.push_entries(&format!("{prefix}.ada2"), out);
    out.push((format!("{prefix}.fc1.w"), b.fc1.w.view().into_dyn()));
    out.push((format!("{prefix}.fc1.b"), b.fc1.b.view().into_dyn()));
    out.push((format!("{prefix}.fc2.w"), b.fc2.w.view().into_dyn()));
    out.push((format!("{prefix}.fc2.b"), b.fc2.b.view().into_dyn()));
}

fn block_entries_mut<'a, F>(
    prefix: &str,
    b: &'a mut BlockParams<F>,
    out: &mut Vec<(String, ArrayViewMutD<'a, F>)>,
) where
    F: Float,
{
    b.ada1.push_entries_mut(&format!("{prefix}.ada1"), out);
    out.push((format!("{prefix}.wq.w"), b.wq.w.view_mut().into_dyn()));
    out.push((format!("{prefix}.wq.b"), b.wq.b.view_mut().into_dyn()));
    out.push((format!("{prefix}.wk.w"), b.wk.w.view_mut().into_dyn()));
    out.push((format!("{prefix}.wk.b"), b.wk.b.view_mut().into_dyn()));
    out.push((format!("{prefix}.wv.w"), b.wv.w.view_mut().into_dyn()));
    out.push((format!("{prefix}.wv.b"), b.wv.b.view_mut().into_dyn()));
    out.push((format!("{prefix}.wo.w"), b.wo.w.view_mut().into_dyn()));
    out.push((format!("{prefix}.wo.b"), b.wo.b.view_mut().into_dyn()));
    b.ada2.push_entries_mut(&format!("{prefix}.ada2"), out);
    out.push((format!("{prefix}.fc1.w"), b.fc1.w.view_mut().into_dyn()));
    out.push((format!("{prefix}.fc1.b"), b.fc1.b.view_mut().into_dyn()));
    out.push((format!("{prefix}.fc2.w"), b.fc2.w.view_mut().into_dyn()));
    out.push((format!("{prefix}.fc2.b"), b.fc2.b.view_mut().into_dyn()));
}

impl<F: Float> Params<F> for FlowParams<F> {
    fn entries(&self) -> Vec<(String, ArrayViewD<'_, F>)> {
        let mut v = vec![
            ("audio_in.w".to_string(), self.audio_in.w.view().into_dyn()),
            ("audio_in.b".to_string(), self.audio_in.b.view().into_dyn()),
            ("visual_adapter.w".to_string(), self.visual_adapter.w.view().into_dyn()),
            ("visual_adapter.b".to_string(), self.visual_adapter.b.view().into_dyn()),
            ("text_adapter.w".to_string(), self.text_adapter.w.view().into_dyn()),
            ("text_adapter.b".to_string(), self.text_adapter.b.view().into_dyn()),
            ("pos_audio".to_string(), self.pos_audio.view().into_dyn()),
            ("pos_visual".to_string(), self.pos_visual.view().into_dyn()),
            ("pos_text".to_string(), self.pos_text.view().into_dyn()),
        ];
        for (i, b) in self.mm_blocks.iter().enumerate() {
            block_entries(&format!("mm{i}"), b, &mut v);
        }
        for (i, b) in self.sm_blocks.iter().enumerate() {
            block_entries(&format!("sm{i}"), b, &mut v);
        }
        v.push(("head.w".to_string(), self.head.w.view().into_dyn()));
        v.push(("head.b".to_string(), self.head.b.view().into_dyn()));
        v
    }

    fn entries_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, F>)> {
        let mut v: Vec<(String, ArrayViewMutD<'_, F>)> = vec![];
        v.push(("audio_in.w".to_string(), self.audio_in.w.view_mut().into_dyn()));
        v.push(("audio_in.b".to_string(), self.audio_in.b.view_mut().into_dyn()));
        v.push(("visual_adapter.w".to_string(), self.visual_adapter.w.view_mut().into_dyn()));
        v.push(("visual_adapter.b".to_string(), self.visual_adapter.b.view_mut().into_dyn()));
        v.push(("text_adapter.w".to_string(), self.text_adapter.w.view_mut().into_dyn()));
        v.push(("text_adapter.b".to_string(), self.text_adapter.b.view_mut().into_dyn()));
        v.push(("pos_audio".to_string(), self.pos_audio.view_mut().into_dyn()));
        v.push(("pos_visual".to_string(), self.pos_visual.view_mut().into_dyn()));
        v.push(("pos_text".to_string(), self.pos_text.view_mut().into_dyn()));
        for (i, b) in self.mm_blocks.iter_mut().enumerate() {
            block_entries_mut(&format!("mm{i}"), b, &mut v);
        }
        for (i, b) in self.sm_blocks.iter_mut().enumerate() {
            block_entries_mut(&format!("sm{i}"), b, &mut v);
        }
        v.push(("head.w".to_string(), self.head.w.view_mut().into_dyn()));
        v.push(("head.b".to_string(), self.head.b.view_mut().into_dyn()));
        v
    }
}

impl<F: Float> Params<F> for ModelParams<F> {
    fn entries(&self) -> Vec<(String, ArrayViewD<'_, F>)> {
        let mut v: Vec<(String, ArrayViewD<'_, F>)> = self
            .cond
            .entries()
            .into_iter()
            .map(|(n, a)| (format!("cond.{n}"), a))
            .collect();
        v.extend(
            self.flow
                .entries()
                .into_iter()
                .map(|(n, a)| (format!("flow.{n}"), a)),
        );
        v
    }

    fn entries_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, F>)> {
        let mut v: Vec<(String, ArrayViewMutD<'_, F>)> = self
            .cond
            .entries_mut()
            .into_iter()
            .map(|(n, a)| (format!("cond.{n}"), a))
            .collect();
        v.extend(
            self.flow
                .entries_mut()
                .into_iter()
                .map(|(n, a)| (format!("flow.{n}"), a)),
        );
        v
    }
}

/// `x_t = t·x1 + (1−t)·x0` on the linear noise→data path.
pub fn interpolate<F: Float>(x0: &Array2<F>, x1: &Array2<F>, t: F) -> Result<Array2<F>> {
    if x0.raw_dim() != x1.raw_dim() {
        return Err(Error::ShapeMismatch("interpolate endpoints differ in shape".into()));
    }
    let tf = t.as_f64();
    if !(0.0..=1.0).contains(&tf) {
        return Err(Error::InvalidInput(format!("t = {tf} outside [0, 1]")));
    }
    Ok(x1.mapv(|v| v * t) + x0.mapv(|v| v * (F::one() - t)))
}

struct AttnCache<F> {
    n1: Array2<F>,
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    probs: Vec<Array2<F>>,
    ctx: Array2<F>,
}

struct BlockCache<F> {
    ada1: AdaLnCache<F>,
    attn: AttnCache<F>,
    ada2: AdaLnCache<F>,
    n2: Array2<F>,
    fc1_raw: Array2<F>,
    gelu_out: Array2<F>,
}

fn attention_fwd<F: Float>(
    n1: &Array2<F>,
    block: &BlockParams<F>,
    heads: usize,
) -> (Array2<F>, AttnCache<F>) {
    let h = n1.ncols();
    let dh = h / heads;
    let q = block.wq.forward(n1);
    let k = block.wk.forward(n1);
    let v = block.wv.forward(n1);
    let scale = F::c(1.0 / (dh as f64).sqrt());
    let t = n1.nrows();
    let mut ctx = Array2::zeros((t, h));
    let mut probs = Vec::with_capacity(heads);
    for head in 0..heads {
        let cols = s![.., head * dh..(head + 1) * dh];
        let qh = q.slice(cols);
        let kh = k.slice(cols);
        let vh = v.slice(cols);
        let scores = qh.dot(&kh.t()).mapv(|x| x * scale);
        let p = softmax_rows(&scores);
        let ctx_h = p.dot(&vh);
        ctx.slice_mut(cols).assign(&ctx_h);
        probs.push(p);
    }
    let out = block.wo.forward(&ctx);
    (
        out,
        AttnCache {
            n1: n1.clone(),
            q,
            k,
            v,
            probs,
            ctx,
        },
    )
}

fn attention_bwd<F: Float>(
    d_out: &Array2<F>,
    cache: &AttnCache<F>,
    block: &BlockParams<F>,
    grads: &mut BlockParams<F>,
    heads: usize,
) -> Array2<F> {
    let h = cache.n1.ncols();
    let dh = h / heads;
    let scale = F::c(1.0 / (dh as f64).sqrt());
    let d_ctx = block.wo.backward(&cache.ctx, d_out, &mut grads.wo);
    let t = cache.n1.nrows();
    let mut dq = Array2::zeros((t, h));
    let mut dk = Array2::zeros((t, h));
    let mut dv = Array2::zeros((t, h));
    for head in 0..heads {
        let cols = s![.., head * dh..(head + 1) * dh];
        let d_ctx_h = d_ctx.slice(cols).to_owned();
        let p = &cache.probs[head];
        let vh = cache.v.slice(cols);
        let qh = cache.q.slice(cols);
        let kh = cache.k.slice(cols);
        let d_p = d_ctx_h.dot(&vh.t());
        dv.slice_mut(cols).assign(&p.t().dot(&d_ctx_h));
        let d_scores = softmax_rows_bwd(p, &d_p).mapv(|x| x * scale);
        dq.slice_mut(cols).assign(&d_scores.dot(&kh));
        dk.slice_mut(cols).assign(&d_scores.t().dot(&qh));
    }
    let mut d_n1 = block.wq.backward(&cache.n1, &dq, &mut grads.wq);
    d_n1 += &block.wk.backward(&cache.n1, &dk, &mut grads.wk);
    d_n1 += &block.wv.backward(&cache.n1, &dv, &mut grads.wv);
    d_n1
}

fn block_fwd<F: Float>(
    x: &Array2<F>,
    c: &Array1<F>,
    block: &BlockParams<F>,
    heads: usize,
) -> (Array2<F>, BlockCache<F>) {
    let (n1, ada1) = adaln_fwd(x, c, &block.ada1);
    let (attn_out, attn) = attention_fwd(&n1, block, heads);
    let x1 = x + &attn_out;
    let (n2, ada2) = adaln_fwd(&x1, c, &block.ada2);
    let fc1_raw = block.fc1.forward(&n2);
    let gelu_out = gelu_fwd(&fc1_raw);
    let m = block.fc2.forward(&gelu_out);
    let x2 = &x1 + &m;
    (
        x2,
        BlockCache {
            ada1,
            attn,
            ada2,
            n2,
            fc1_raw,
            gelu_out,
        },
    )
}

fn block_bwd<F: Float>(
    d_x2: &Array2<F>,
    cache: &BlockCache<F>,
    block: &BlockParams<F>,
    grads: &mut BlockParams<F>,
    d_c: &mut Array1<F>,
    heads: usize,
) -> Array2<F> {
    // x2 = x1 + fc2(gelu(fc1(adaln2(x1))))
    let d_gelu = block.fc2.backward(&cache.gelu_out, d_x2, &mut grads.fc2);
    let d_fc1_raw = gelu_bwd(&cache.fc1_raw, &d_gelu);
    let d_n2 = block.fc1.backward(&cache.n2, &d_fc1_raw, &mut grads.fc1);
    let mut d_x1 = adaln_bwd(&d_n2, &cache.ada2, &block.ada2, &mut grads.ada2, d_c);
    d_x1 += d_x2;
    // x1 = x + attn(adaln1(x))
    let d_attn_out = &d_x1;
    let d_n1 = attention_bwd(d_attn_out, &cache.attn, block, grads, heads);
    let mut d_x = adaln_bwd(&d_n1, &cache.ada1, &block.ada1, &mut grads.ada1, d_c);
    d_x += &d_x1;
    d_x
}

pub struct VelocityCache<F> {
    bundle: ConditionBundle<F>,
    assemble: AssembleCache<F>,
    c: Array1<F>,
    cond_mlp_cache: nn::Mlp2Cache<F>,
    x_t: Array2<F>,
    mm_caches: Vec<BlockCache<F>>,
    sm_caches: Vec<BlockCache<F>>,
    /// Final audio tokens, the input to the output head.
    head_input: Array2<F>,
    n_audio: usize,
    n_visual: usize,
}

/// Forward pass of the velocity field with all caches retained for backward.
/// The conditioning vector is derived from `(t, modality_sum)` so the same
/// bundle can be reused across ODE timesteps.
pub fn velocity_with_cache<F: Float>(
    model: &ModelParams<F>,
    t: F,
    inputs: &CondInputs<F>,
    x_t: &Array2<F>,
) -> Result<(Array2<F>, VelocityCache<F>)> {
    let cfg = &model.flow.cfg;
    cfg.validate()?;
    let l = x_t.nrows();
    if x_t.ncols() != cfg.d_latent {
        return Err(Error::ShapeMismatch(format!(
            "x_t has {} channels, model expects {}",
            x_t.ncols(),
            cfg.d_latent
        )));
    }
    if l == 0 || l > cfg.max_audio_len {
        return Err(Error::ShapeMismatch(format!(
            "audio length {l} outside 1..={}",
            cfg.max_audio_len
        )));
    }
    if inputs.latent_len != l {
        return Err(Error::ShapeMismatch(
            "condition inputs prepared for a different latent length".into(),
        ));
    }
    let (bundle, assemble) = assemble_condition(inputs, t, &model.cond)?;
    let n_visual = bundle.visual_tokens.nrows();
    if n_visual > cfg.max_visual_len {
        return Err(Error::ShapeMismatch(format!(
            "visual length {n_visual} exceeds max {}",
            cfg.max_visual_len
        )));
    }

    // c = MLP(time_emb + modality_sum); recomputed here so the cache knows
    // the exact Mlp2 internals for backward.
    let time_emb = fourier_time_embedding(t, model.cond.cfg.h)?;
    let (c, cond_mlp_cache) = model
        .cond
        .cond_mlp
        .forward_vec(&(&time_emb + &bundle.modality_sum));

    let mut audio = model.flow.audio_in.forward(x_t);
    audio += &model.flow.pos_audio.slice(s![..l, ..]);
    audio += &bundle.sync_stream;

    let mut vis = model.flow.visual_adapter.forward(&bundle.visual_tokens);
    vis += &model.flow.pos_visual.slice(s![..n_visual, ..]);

    let txt = model
        .flow
        .text_adapter
        .forward_vec(&bundle.text_token)
        + &model.flow.pos_text;

    // Joint stream [audio ⊕ visual ⊕ text].
    let total = l + n_visual + 1;
    let mut x = Array2::zeros((total, cfg.h));
    x.slice_mut(s![..l, ..]).assign(&audio);
    x.slice_mut(s![l..l + n_visual, ..]).assign(&vis);
    x.row_mut(total - 1).assign(&txt);

    let mut mm_caches = Vec::with_capacity(cfg.n_mm);
    for block in &model.flow.mm_blocks {
        let (next, cache) = block_fwd(&x, &c, block, cfg.heads);
        x = next;
        mm_caches.push(cache);
    }
    let audio_after_mm = x.slice(s![..l, ..]).to_owned();

    let mut a = audio_after_mm.clone();
    let mut sm_caches = Vec::with_capacity(cfg.n_sm);
    for block in &model.flow.sm_blocks {
        let (next, cache) = block_fwd(&a, &c, block, cfg.heads);
        a = next;
        sm_caches.push(cache);
    }
    let _ = audio_after_mm;
    let v = model.flow.head.forward(&a);
    Ok((
        v,
        VelocityCache {
            bundle,
            assemble,
            c,
            cond_mlp_cache,
            x_t: x_t.clone(),
            mm_caches,
            sm_caches,
            head_input: a,
            n_audio: l,
            n_visual,
        },
    ))
}

/// Velocity field without caches; the public forward surface.
pub fn velocity_forward<F: Float>(
    model: &ModelParams<F>,
    t: F,
    inputs: &CondInputs<F>,
    x_t: &Array2<F>,
) -> Result<Array2<F>> {
    velocity_with_cache(model, t, inputs, x_t).map(|(v, _)| v)
}

/// Backward through the velocity field given `d_v`; accumulates into `grads`.
pub fn velocity_backward<F: Float>(
    model: &ModelParams<F>,
    inputs: &CondInputs<F>,
    cache: &VelocityCache<F>,
    d_v: &Array2<F>,
    grads: &mut ModelParams<F>,
) {
    let cfg = &model.flow.cfg;
    let l = cache.n_audio;
    let n_visual = cache.n_visual;
    let mut d_c = Array1::zeros(model.cond.cfg.h);

    let mut d_a = model
        .flow
        .head
        .backward(&cache.head_input, d_v, &mut grads.flow.head);
    for i in (0..model.flow.sm_blocks.len()).rev() {
        d_a = block_bwd(
            &d_a,
            &cache.sm_caches[i],
            &model.flow.sm_blocks[i],
            &mut grads.flow.sm_blocks[i],
            &mut d_c,
            cfg.heads,
        );
    }

    // Expand to the joint stream: visual/text rows receive zero gradient at
    // the split (they are discarded after the multimodal stage).
    let total = l + n_visual + 1;
    let mut d_x = Array2::zeros((total, cfg.h));
    d_x.slice_mut(s![..l, ..]).assign(&d_a);
    for i in (0..model.flow.mm_blocks.len()).rev() {
        d_x = block_bwd(
            &d_x,
            &cache.mm_caches[i],
            &model.flow.mm_blocks[i],
            &mut grads.flow.mm_blocks[i],
            &mut d_c,
            cfg.heads,
        );
    }

    let d_audio0 = d_x.slice(s![..l, ..]).to_owned();
    let d_vis0 = d_x.slice(s![l..l + n_visual, ..]).to_owned();
    let d_txt0 = d_x.row(total - 1).to_owned();

    // Audio stream: input projection, positional rows, sync stream.
    let _ = model
        .flow
        .audio_in
        .backward(&cache.x_t, &d_audio0, &mut grads.flow.audio_in);
    {
        let mut pa = grads.flow.pos_audio.slice_mut(s![..l, ..]);
        pa += &d_audio0;
    }
    let d_sync_stream = d_audio0;

    // Visual stream.
    let d_visual_tokens = model.flow.visual_adapter.backward(
        &cache.bundle.visual_tokens,
        &d_vis0,
        &mut grads.flow.visual_adapter,
    );
    {
        let mut pv = grads.flow.pos_visual.slice_mut(s![..n_visual, ..]);
        pv += &d_vis0;
    }

    // Text stream.
    let d_text_token = model.flow.text_adapter.backward_vec(
        &cache.bundle.text_token,
        &d_txt0,
        &mut grads.flow.text_adapter,
    );
    grads.flow.pos_text += &d_txt0;

    // Conditioning vector path: c = cond_mlp(time_emb + modality_sum).
    let d_sum = model
        .cond
        .cond_mlp
        .backward_vec(&cache.cond_mlp_cache, &d_c, &mut grads.cond.cond_mlp);

    assemble_backward(
        inputs,
        &cache.assemble,
        &d_sum,
        &d_sync_stream,
        &d_visual_tokens,
        &d_text_token,
        &model.cond,
        &mut grads.cond,
    );
    let _ = &cache.c;
}

/// One training item: target latents, noise, flow time, and the conditioning
/// ingredients.
#[derive(Debug, Clone)]
pub struct FlowItem<F> {
    pub inputs: CondInputs<F>,
    pub x0: Array2<F>,
    pub x1: Array2<F>,
    pub t: F,
}

pub type FlowBatch<F> = Vec<FlowItem<F>>;

/// Mean squared error between the predicted velocity and the displacement
/// `x1 − x0`, averaged over batch, tokens, and channels.
pub fn cfm_loss<F: Float>(model: &ModelParams<F>, batch: &FlowBatch<F>) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0.0f64;
    for item in batch {
        let x_t = interpolate(&item.x0, &item.x1, item.t)?;
        let v = velocity_forward(model, item.t, &item.inputs, &x_t)?;
        for ((vi, x1i), x0i) in v.iter().zip(item.x1.iter()).zip(item.x0.iter()) {
            let d = (*vi - (*x1i - *x0i)).as_f64();
            total += d * d;
            count += 1.0;
        }
    }
    Ok(total / count.max(1.0))
}

/// Loss and exact gradients for a batch. Items are processed in parallel;
/// per-item gradients are reduced in index order, so the result is identical
/// for any thread count.
pub fn cfm_loss_backward<F: Float>(
    model: &ModelParams<F>,
    batch: &FlowBatch<F>,
) -> Result<(f64, ModelParams<F>)> {
    let n_total: usize = batch.iter().map(|it| it.x1.len()).sum();
    let per_item: Vec<Result<(f64, ModelParams<F>)>> = batch
        .par_iter()
        .map(|item| -> Result<(f64, ModelParams<F>)> {
            let x_t = interpolate(&item.x0, &item.x1, item.t)?;
            let (v, cache) = velocity_with_cache(model, item.t, &item.inputs, &x_t)?;
            let mut d_v = Array2::zeros(v.raw_dim());
            let mut loss = 0.0;
            let scale = F::c(2.0 / n_total as f64);
            for ((dv, vi), (x1i, x0i)) in d_v
                .iter_mut()
                .zip(v.iter())
                .zip(item.x1.iter().zip(item.x0.iter()))
            {
                let diff = *vi - (*x1i - *x0i);
                loss += diff.as_f64() * diff.as_f64();
                *dv = diff * scale;
            }
            let mut grads = model.zeros_like();
            velocity_backward(model, &item.inputs, &cache, &d_v, &mut grads);
            Ok((loss, grads))
        })
        .collect();

    let mut total_loss = 0.0;
    let mut grads = model.zeros_like();
    for r in per_item {
        let (loss, g) = r?;
        total_loss += loss;
        nn::add_assign_params(&mut grads, &g);
    }
    Ok((total_loss / n_total as f64, grads))
}

/// Euler integration of `dx/dt = field(t, x)` from `x0` at `t = 0` to `t = 1`
/// in `steps` uniform steps.
pub fn euler_integrate<F: Float>(
    x0: &Array2<F>,
    steps: usize,
    mut field: impl FnMut(F, &Array2<F>) -> Result<Array2<F>>,
) -> Result<Array2<F>> {
    if steps == 0 {
        return Err(Error::InvalidInput("ODE sampler needs steps >= 1".into()));
    }
    let mut x = x0.clone();
    let dt = F::c(1.0 / steps as f64);
    for k in 0..steps {
        let t = F::c(k as f64 / steps as f64);
        let v = field(t, &x)?;
        if v.raw_dim() != x.raw_dim() {
            return Err(Error::ShapeMismatch("field output shape mismatch".into()));
        }
        x = x + v.mapv(|vi| vi * dt);
    }
    Ok(x)
}

/// Samples latents by integrating the learned field from seeded Gaussian
/// noise. `guidance_w = 1` evaluates the conditional field only; otherwise
/// `v̂ = v_null + w·(v_cond − v_null)` with the all-dropped bundle as null.
pub fn sample_ode<F: Float>(
    model: &ModelParams<F>,
    inputs: &CondInputs<F>,
    steps: usize,
    guidance_w: f64,
    seed: u64,
) -> Result<LatentSequence<F>> {
    if guidance_w < 0.0 {
        return Err(Error::InvalidInput("guidance_w must be >= 0".into()));
    }
    let mut rng = seeded_rng(seed);
    let x0 = randn_mat::<F>(&mut rng, inputs.latent_len, model.flow.cfg.d_latent);
    let null_inputs = CondInputs {
        drop: DropMask::all(),
        ..inputs.clone()
    };
    let frames = euler_integrate(&x0, steps, |t, x| {
        let v_cond = velocity_forward(model, t, inputs, x)?;
        if guidance_w == 1.0 {
            return Ok(v_cond);
        }
        let v_null = velocity_forward(model, t, &null_inputs, x)?;
        let w = F::c(guidance_w);
        Ok(&v_null + &(&v_cond - &v_null).mapv(|d| d * w))
    })?;
    Ok(LatentSequence {
        frames,
        frame_rate: 40.0,
    })
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GenerateConfig {
    pub ode_steps: usize,
    pub guidance_w: f64,
    pub seed: u64,
    /// Latent frames to generate (320 = 8 s at 40 fps).
    pub latent_len: usize,
    /// Temporal stride over 24 fps visual features for transformer tokens.
    pub visual_stride: usize,
    /// Video frames fed to conditioning (192 = first 8 s at 24 fps).
    pub visual_window: usize,
    pub gl_iters: usize,
    pub pool: PoolMode,
    pub drop: DropMask,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            ode_steps: 25,
            guidance_w: 1.0,
            seed: 0,
            latent_len: 320,
            visual_stride: 8,
            visual_window: 192,
            gl_iters: 32,
            pool: PoolMode::Average,
            drop: DropMask::none(),
        }
    }
}

/// Builds conditioning inputs from a clip's video (and optional conditional
/// latents), striding the visual features for the transformer token stream.
pub fn prepare_cond_inputs<F: Float>(
    video: &VideoFrames,
    family_id: usize,
    cond_latents: Option<Array2<F>>,
    cfg: &GenerateConfig,
) -> Result<CondInputs<F>> {
    let feats = extract_visual_features(video);
    let sync = extract_sync_features(video)?;
    let window = cfg.visual_window.min(feats.nrows());
    let strided: Vec<usize> = (0..window).step_by(cfg.visual_stride.max(1)).collect();
    let mut visual = Array2::zeros((strided.len(), feats.ncols()));
    for (row, &src) in strided.iter().enumerate() {
        for col in 0..feats.ncols() {
            visual[(row, col)] = F::c(feats[(src, col)]);
        }
    }
    let sync_raw: Vec<F> = sync[..window].iter().map(|&v| F::c(v)).collect();
    let mut drop = cfg.drop;
    if cond_latents.is_none() {
        drop.audio = true;
    }
    Ok(CondInputs {
        visual_feats: visual,
        family_id,
        cond_latents,
        sync_raw,
        latent_len: cfg.latent_len,
        pool: cfg.pool,
        drop,
    })
}

/// Full generation pipeline: condition audio (if any) → latents by ODE →
/// decode to mel → magnitude → Griffin-Lim → 8 s waveform.
pub fn generate(
    model: &ModelParams<f32>,
    codec: &CodecParams<f32>,
    video: &VideoFrames,
    family_id: usize,
    cond_audio: Option<&Waveform>,
    cfg: &GenerateConfig,
) -> Result<Waveform> {
    let cond_latents = match cond_audio {
        Some(wave) => {
            let spec = dsp::stft(wave, &codec.cfg.frame)?;
            let mel = dsp::mel_spectrogram(&spec, codec.cfg.n_mels, codec.cfg.f_min, codec.cfg.f_max)?;
            Some(crate::codec::encode(&mel, codec, crate::codec::EncodeMode::Mean)?.frames)
        }
        None => None,
    };
    generate_from_latents(model, codec, video, family_id, cond_latents, cfg)
}

/// Same pipeline with the conditional audio already encoded (used for the
/// self-tail and cross-clip protocols where latents come from the corpus).
pub fn generate_from_latents(
    model: &ModelParams<f32>,
    codec: &CodecParams<f32>,
    video: &VideoFrames,
    family_id: usize,
    cond_latents: Option<Array2<f32>>,
    cfg: &GenerateConfig,
) -> Result<Waveform> {
    let inputs = prepare_cond_inputs(video, family_id, cond_latents, cfg)?;
    let latents = sample_ode(
        model,
        &inputs,
        cfg.ode_steps,
        cfg.guidance_w,
        derive_seed(cfg.seed, "ode-noise", 0),
    )?;
    let mel = crate::codec::decode(&latents, codec)?;
    let mag = dsp::mel_to_magnitude(&mel)?;
    let gl = dsp::griffin_lim(
        &mag,
        &codec.cfg.frame,
        cfg.gl_iters,
        derive_seed(cfg.seed, "gl-phase", 0),
    )?;
    Ok(gl.waveform)
}
