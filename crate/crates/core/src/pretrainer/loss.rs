//! Composite pre-training objective and its full backward pass.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{decode_backward, decode_cached, encode_backward, encode_cached, ModelParams};
use crate::dataio::Batch;
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::seed;
use crate::semantic_prior::{semantic_terms_grad, FrozenEmbedder};
use crate::structural_prior::{cls_distill_loss_grad, patch_distill_loss_grad, DistillSettings};
use crate::tensor::Mat;
use crate::tokenizer::{embed_patches, embed_positions, embed_positions_backward, patchify, sample_mask, MaskPlan};

/// Scalar weights of the five losses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_r: f64,
    pub lambda_mim: f64,
    pub lambda_cls: f64,
    pub lambda_cf: f64,
    pub lambda_cs: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_r: 4.0, lambda_mim: 0.02, lambda_cls: 0.02, lambda_cf: 2.0, lambda_cs: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in self.named() {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::Config(format!("loss weight {name} = {w} must be finite and nonnegative")));
            }
        }
        Ok(())
    }

    pub fn named(&self) -> [(&'static str, f64); 5] {
        [
            ("lambda_r", self.lambda_r),
            ("lambda_mim", self.lambda_mim),
            ("lambda_cls", self.lambda_cls),
            ("lambda_cf", self.lambda_cf),
            ("lambda_cs", self.lambda_cs),
        ]
    }

    /// Zeroes the weight of every disabled loss.
    pub fn masked_by(&self, t: &LossToggles) -> Self {
        let on = |flag: bool, w: f64| if flag { w } else { 0.0 };
        Self {
            lambda_r: on(t.reconstruction, self.lambda_r),
            lambda_mim: on(t.patch_distill, self.lambda_mim),
            lambda_cls: on(t.cls_distill, self.lambda_cls),
            lambda_cf: on(t.feature_align, self.lambda_cf),
            lambda_cs: on(t.consistency, self.lambda_cs),
        }
    }
}

/// Per-loss on/off switches. A disabled loss is not computed and is reported as 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossToggles {
    pub reconstruction: bool,
    pub patch_distill: bool,
    pub cls_distill: bool,
    pub feature_align: bool,
    pub consistency: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        Self::all()
    }
}

impl LossToggles {
    pub fn all() -> Self {
        Self { reconstruction: true, patch_distill: true, cls_distill: true, feature_align: true, consistency: true }
    }

    pub fn only_reconstruction() -> Self {
        Self {
            reconstruction: true,
            patch_distill: false,
            cls_distill: false,
            feature_align: false,
            consistency: false,
        }
    }

    /// The six loss combinations of the ablation grid, with labels.
    pub fn ablation_rows() -> [(&'static str, Self); 6] {
        let r = Self::only_reconstruction();
        [
            ("l_r", r),
            ("l_r+l_mim", Self { patch_distill: true, ..r }),
            ("l_r+l_mim+l_cls", Self { patch_distill: true, cls_distill: true, ..r }),
            ("l_r+l_cf", Self { feature_align: true, ..r }),
            ("l_r+l_cf+l_cs", Self { feature_align: true, consistency: true, ..r }),
            ("all", Self::all()),
        ]
    }

    fn structural(&self) -> bool {
        self.patch_distill || self.cls_distill
    }

    fn semantic(&self) -> bool {
        self.feature_align || self.consistency
    }
}

/// Everything about the objective besides the model and the data.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub toggles: LossToggles,
    pub distill: DistillSettings,
    /// Treat the sketch branch and teacher heads as constants.
    pub stop_teacher_grad: bool,
}

/// Batch-averaged loss values. `weights` are the effective weights, zero for disabled losses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_r: f64,
    pub l_mim: f64,
    pub l_cls: f64,
    pub l_cf: f64,
    pub l_cs: f64,
    pub weights: LossWeights,
    pub total: f64,
    /// Samples with a caption, over which `l_cf` and `l_cs` are averaged.
    pub captioned: usize,
}

impl LossBreakdown {
    pub fn components(&self) -> [f64; 5] {
        [self.l_r, self.l_mim, self.l_cls, self.l_cf, self.l_cs]
    }

    pub fn compose(components: [f64; 5], weights: LossWeights, captioned: usize) -> Self {
        let w = weights.named().map(|(_, w)| w);
        let total = components.iter().zip(w).map(|(l, w)| l * w).sum();
        let [l_r, l_mim, l_cls, l_cf, l_cs] = components;
        Self { l_r, l_mim, l_cls, l_cf, l_cs, weights, total, captioned }
    }

    pub fn is_finite(&self) -> bool {
        self.components().iter().all(|v| v.is_finite()) && self.total.is_finite()
    }
}

/// Mean squared error over masked pixel values.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Reconstruction<S> {
    pub value: S,
    /// Set when there were no masked pixels; `value` is then 0.
    pub empty: bool,
}

/// `(1/N_m) Σ (V − V^r)²` over the masked-patch rows given. `n_masked` counts pixel values.
pub fn reconstruction_loss<S: Real>(target: &Mat<S>, pred: &Mat<S>, n_masked: usize) -> Result<Reconstruction<S>> {
    if target.shape() != pred.shape() {
        return Err(Error::Structural(format!("targets {:?} vs predictions {:?}", target.shape(), pred.shape())));
    }
    if n_masked != target.len() {
        return Err(Error::Structural(format!("N_m = {n_masked} but {} masked values were given", target.len())));
    }
    if n_masked == 0 {
        log::warn!("reconstruction loss over zero masked pixels");
        return Ok(Reconstruction { value: S::zero(), empty: true });
    }
    let sum: S = target.as_slice().iter().zip(pred.as_slice()).map(|(&v, &r)| (v - r) * (v - r)).sum();
    Ok(Reconstruction { value: sum / S::count(n_masked), empty: false })
}

/// Same loss over full-grid `[N, patch_dim]` tensors, reading only the rows `mask` hides.
pub fn masked_reconstruction_loss<S: Real>(
    target: &Mat<S>,
    pred: &Mat<S>,
    mask: &MaskPlan,
) -> Result<Reconstruction<S>> {
    if target.rows() != mask.n_tokens || pred.shape() != target.shape() {
        return Err(Error::Structural(format!(
            "mask over {} patches, targets {:?}, predictions {:?}",
            mask.n_tokens,
            target.shape(),
            pred.shape()
        )));
    }
    let t = target.select_rows(&mask.masked_idx);
    let p = pred.select_rows(&mask.masked_idx);
    reconstruction_loss(&t, &p, t.len())
}

/// Seed of the mask for the sample at `position` of a batch drawn with `batch_seed`.
pub fn sample_mask_seed(batch_seed: u64, position: usize) -> u64 {
    seed::derive(batch_seed, &[0x4d41_534b, position as u64])
}

struct SampleOut<S> {
    l_r: S,
    l_mim: S,
    l_cls: S,
    semantic: Option<(S, S)>,
    grads: Option<ModelParams<S>>,
}

struct Coefficients<S> {
    r: S,
    mim: S,
    cls: S,
    cf: S,
    cs: S,
}

fn axpy<S: Real>(dst: &mut Mat<S>, src: &Mat<S>, w: S) {
    for (d, &s) in dst.as_mut_slice().iter_mut().zip(src.as_slice()) {
        *d += w * s;
    }
}

#[allow(clippy::too_many_arguments)]
fn sample_pass<S: Real>(
    params: &ModelParams<S>,
    sample: &crate::dataio::Sample<S>,
    mask_seed: u64,
    texts: Option<&Mat<S>>,
    embedder: &FrozenEmbedder,
    cfg: &LossConfig,
    coef: &Coefficients<S>,
    want_grad: bool,
) -> Result<SampleOut<S>> {
    let mc = params.config();
    let t = cfg.toggles;
    let n = mc.n_patches();
    let img = &sample.image;
    if (img.height(), img.width(), img.channels()) != (mc.image_size, mc.image_size, mc.channels) {
        return Err(Error::Input(format!(
            "sample {} is {}x{}x{}, model expects {}x{}x{}",
            sample.key,
            img.height(),
            img.width(),
            img.channels(),
            mc.image_size,
            mc.image_size,
            mc.channels
        )));
    }
    let patches = patchify(img, mc.patch_size)?;
    let mask = sample_mask(n, mc.mask_ratio, mask_seed)?;
    let tokens = embed_patches(&patches, &mask, params.image_embedding())?;
    let (encoded, enc_cache) = encode_cached(&tokens.tokens, params)?;
    let (bundle, dec_cache) = decode_cached(&encoded, &tokens.positions, &mask, params)?;

    let mut grads = want_grad.then(|| params.zeros_like());
    let mut d_dec = bundle.dec_tokens.zeros_like();
    let mut d_pixel = bundle.pixel_pred.zeros_like();

    let mut l_r = S::zero();
    if t.reconstruction {
        let target = patches.patches.select_rows(&mask.masked_idx);
        let rec = reconstruction_loss(&target, &bundle.pixel_pred, target.len())?;
        l_r = rec.value;
        if !rec.empty {
            let k = S::lit(2.0) * coef.r / S::count(target.len());
            for ((d, &p), &v) in
                d_pixel.as_mut_slice().iter_mut().zip(bundle.pixel_pred.as_slice()).zip(target.as_slice())
            {
                *d = k * (p - v);
            }
        }
    }

    let (mut l_mim, mut l_cls) = (S::zero(), S::zero());
    let mut sketch_branch = None;
    if t.structural() {
        let sketch_img = sample.sketch.image.broadcast_channels(mc.channels)?;
        let sketch_patches = patchify(&sketch_img, mc.patch_size)?;
        let all: Vec<usize> = (0..n).collect();
        let sketch_tokens = embed_positions(&sketch_patches, &all, params.sketch_embedding())?;
        let (sketch_feats, sketch_cache) = encode_cached(&sketch_tokens.tokens, params)?;
        let mut d_sketch = sketch_feats.zeros_like();
        if t.patch_distill {
            let (loss, g) =
                patch_distill_loss_grad(&sketch_feats, &bundle.dec_tokens, &mask, &params.distill, &cfg.distill)?;
            l_mim = loss;
            if let Some(gr) = grads.as_mut() {
                axpy(&mut d_dec, &g.d_decoded, coef.mim);
                axpy(&mut gr.distill.student, &g.d_student, coef.mim);
                if !cfg.stop_teacher_grad {
                    axpy(&mut d_sketch, &g.d_sketch, coef.mim);
                    axpy(&mut gr.distill.teacher, &g.d_teacher, coef.mim);
                }
            }
        }
        if t.cls_distill {
            let (loss, g) = cls_distill_loss_grad(sketch_feats.row(0), &bundle.dec_cls, &params.distill, &cfg.distill)?;
            l_cls = loss;
            if let Some(gr) = grads.as_mut() {
                for (d, &v) in d_dec.row_mut(0).iter_mut().zip(g.d_decoded.as_slice()) {
                    *d += coef.cls * v;
                }
                axpy(&mut gr.distill.student_cls, &g.d_student, coef.cls);
                if !cfg.stop_teacher_grad {
                    for (d, &v) in d_sketch.row_mut(0).iter_mut().zip(g.d_sketch.as_slice()) {
                        *d += coef.cls * v;
                    }
                    axpy(&mut gr.distill.teacher_cls, &g.d_teacher, coef.cls);
                }
            }
        }
        if !cfg.stop_teacher_grad {
            sketch_branch = Some((sketch_patches, all, sketch_cache, d_sketch));
        }
    }

    let mut semantic = None;
    if let (true, Some(_), Some(texts)) = (t.semantic(), &sample.caption, texts) {
        let visual: Vec<S> =
            embedder.embed_image(&sample.key, img)?.into_iter().map(|v| S::from_f64_lossy(v as f64)).collect();
        let (wa, wc) =
            (if t.feature_align { coef.cf } else { S::zero() }, if t.consistency { coef.cs } else { S::zero() });
        let terms =
            semantic_terms_grad(&bundle.dec_cls, &visual, texts, &params.sem_head, S::lit(mc.temperature), wa, wc)?;
        let cs = if t.consistency { terms.consistency.total() } else { S::zero() };
        let cf = if t.feature_align { terms.align } else { S::zero() };
        semantic = Some((cf, cs));
        if let Some(gr) = grads.as_mut() {
            for (d, &v) in d_dec.row_mut(0).iter_mut().zip(&terms.d_decoded) {
                *d += v;
            }
            gr.sem_head.add_assign(&terms.d_head);
        }
    }

    if let Some(gr) = grads.as_mut() {
        let d_enc = decode_backward(&dec_cache, params, &d_dec, &d_pixel, gr);
        let d_tok = encode_backward(&enc_cache, params, &d_enc, gr);
        embed_positions_backward(&patches, &tokens.positions, &d_tok, gr.image_embedding_grad());
        if let Some((sp, all, cache, d_sketch)) = sketch_branch {
            let d_tok = encode_backward(&cache, params, &d_sketch, gr);
            embed_positions_backward(&sp, &all, &d_tok, gr.sketch_embedding_grad());
        }
    }
    Ok(SampleOut { l_r, l_mim, l_cls, semantic, grads })
}

/// Caption embeddings of the batch, one row per distinct caption in order of appearance.
fn batch_texts<S: Real>(batch: &Batch<'_, S>, embedder: &FrozenEmbedder) -> Result<Option<Mat<S>>> {
    let mut seen: Vec<&str> = Vec::new();
    for c in batch.samples.iter().filter_map(|s| s.caption.as_deref()) {
        if !seen.contains(&c) {
            seen.push(c);
        }
    }
    if seen.is_empty() {
        return Ok(None);
    }
    let rows = seen
        .iter()
        .map(|c| Ok(embedder.embed_text(c)?.into_iter().map(|v| S::from_f64_lossy(v as f64)).collect()))
        .collect::<Result<Vec<Vec<S>>>>()?;
    Ok(Some(Mat::from_rows(&rows)?))
}

fn run<S: Real>(
    batch: &Batch<'_, S>,
    params: &ModelParams<S>,
    cfg: &LossConfig,
    embedder: &FrozenEmbedder,
    batch_seed: u64,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<ModelParams<S>>)> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    cfg.weights.validate()?;
    let mc = params.config();
    let t = cfg.toggles;
    if t.semantic() && embedder.dim() != mc.sem_dim {
        return Err(Error::Config(format!(
            "embedder dimension {} differs from sem_dim {}",
            embedder.dim(),
            mc.sem_dim
        )));
    }
    let weights = cfg.weights.masked_by(&t);
    let texts = if t.semantic() { batch_texts(batch, embedder)? } else { None };
    let b = batch.len();
    let captioned = batch.samples.iter().filter(|s| s.caption.is_some()).count();
    let per = |w: f64, count: usize| if count == 0 { S::zero() } else { S::lit(w) / S::count(count) };
    let coef = Coefficients {
        r: per(weights.lambda_r, b),
        mim: per(weights.lambda_mim, b),
        cls: per(weights.lambda_cls, b),
        cf: per(weights.lambda_cf, captioned),
        cs: per(weights.lambda_cs, captioned),
    };
    let outs = batch
        .samples
        .par_iter()
        .enumerate()
        .map(|(k, s)| {
            sample_pass(params, s, sample_mask_seed(batch_seed, k), texts.as_ref(), embedder, cfg, &coef, want_grad)
        })
        .collect::<Result<Vec<_>>>()?;

    let mean = |v: &mut dyn Iterator<Item = S>, count: usize| {
        if count == 0 {
            0.0
        } else {
            v.fold(S::zero(), |a, x| a + x).to_f64_lossy() / count as f64
        }
    };
    let l_r = mean(&mut outs.iter().map(|o| o.l_r), b);
    let l_mim = mean(&mut outs.iter().map(|o| o.l_mim), b);
    let l_cls = mean(&mut outs.iter().map(|o| o.l_cls), b);
    let l_cf = mean(&mut outs.iter().filter_map(|o| o.semantic.map(|s| s.0)), captioned);
    let l_cs = mean(&mut outs.iter().filter_map(|o| o.semantic.map(|s| s.1)), captioned);
    let breakdown = LossBreakdown::compose([l_r, l_mim, l_cls, l_cf, l_cs], weights, captioned);

    let grads = want_grad.then(|| {
        let mut acc = params.zeros_like();
        for o in &outs {
            acc.add_assign(o.grads.as_ref().expect("requested"));
        }
        acc
    });
    Ok((breakdown, grads))
}

/// Weighted sum of the five losses over a batch. Masks are drawn from `batch_seed`.
pub fn total_loss<S: Real>(
    batch: &Batch<'_, S>,
    params: &ModelParams<S>,
    cfg: &LossConfig,
    embedder: &FrozenEmbedder,
    batch_seed: u64,
) -> Result<LossBreakdown> {
    Ok(run(batch, params, cfg, embedder, batch_seed, false)?.0)
}

/// [`total_loss`] together with the gradient of `total` for every parameter tensor.
pub fn total_loss_grad<S: Real>(
    batch: &Batch<'_, S>,
    params: &ModelParams<S>,
    cfg: &LossConfig,
    embedder: &FrozenEmbedder,
    batch_seed: u64,
) -> Result<(LossBreakdown, ModelParams<S>)> {
    let (b, g) = run(batch, params, cfg, embedder, batch_seed, true)?;
    Ok((b, g.expect("gradient requested")))
}
