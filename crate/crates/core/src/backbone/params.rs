use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::config::ModelConfig;
use super::layers::BlockParams;
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::structural_prior::DistillHeads;
use crate::tensor::Mat;
use crate::tokenizer::{PatchEmbedding, PatchEmbeddingGrad};

const INIT_STD: f64 = 0.02;

/// Every learnable tensor of the model. Vectors are `1 × n` matrices.
///
/// The same struct doubles as a gradient buffer (see [`ModelParams::zeros`]).
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<S> {
    config: ModelConfig,
    /// `[patch_dim, d_enc]`
    pub patch_proj: Mat<S>,
    pub patch_bias: Mat<S>,
    pub cls_token: Mat<S>,
    /// Image-branch positions `[1 + N, d_enc]`.
    pub pos_enc: Mat<S>,
    /// Sketch-branch positions `[1 + N, d_enc]`.
    pub pos_sketch: Mat<S>,
    pub encoder: Vec<BlockParams<S>>,
    /// `[d_enc, d_dec]`
    pub dec_embed_w: Mat<S>,
    pub dec_embed_b: Mat<S>,
    /// Shared learnable vector placed in every masked slot.
    pub mask_token: Mat<S>,
    /// Decoder positions `[1 + N, d_dec]`.
    pub pos_dec: Mat<S>,
    pub decoder: Vec<BlockParams<S>>,
    /// `[d_dec, patch_dim]`
    pub pixel_w: Mat<S>,
    pub pixel_b: Mat<S>,
    pub distill: DistillHeads<S>,
    /// `[d_dec, sem_dim]`
    pub sem_head: Mat<S>,
}

impl<S: Real> ModelParams<S> {
    /// All-zero tensors with the shapes implied by `config`.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let n1 = config.n_patches() + 1;
        let (de, dd, pd, k) = (config.d_enc, config.d_dec, config.patch_dim(), config.distill_dim);
        Ok(Self {
            config: config.clone(),
            patch_proj: Mat::zeros(pd, de),
            patch_bias: Mat::zeros(1, de),
            cls_token: Mat::zeros(1, de),
            pos_enc: Mat::zeros(n1, de),
            pos_sketch: Mat::zeros(n1, de),
            encoder: (0..config.enc_depth).map(|_| BlockParams::zeros(de, config.mlp_hidden(de))).collect(),
            dec_embed_w: Mat::zeros(de, dd),
            dec_embed_b: Mat::zeros(1, dd),
            mask_token: Mat::zeros(1, dd),
            pos_dec: Mat::zeros(n1, dd),
            decoder: (0..config.dec_depth).map(|_| BlockParams::zeros(dd, config.mlp_hidden(dd))).collect(),
            pixel_w: Mat::zeros(dd, pd),
            pixel_b: Mat::zeros(1, pd),
            distill: DistillHeads {
                teacher: Mat::zeros(de, k),
                student: Mat::zeros(dd, k),
                teacher_cls: Mat::zeros(de, k),
                student_cls: Mat::zeros(dd, k),
            },
            sem_head: Mat::zeros(dd, config.sem_dim),
        })
    }

    /// Truncated `N(0, 0.02²)` weights, zero biases, unit layer-norm scales. Deterministic per seed.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut params = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, t) in params.tensors_mut() {
            let leaf = name.rsplit('.').next().unwrap_or(&name);
            match leaf {
                "ln1_g" | "ln2_g" => t.as_mut_slice().iter_mut().for_each(|v| *v = S::one()),
                l if l.ends_with("_b") || l == "patch_bias" => {}
                _ => {
                    for v in t.as_mut_slice() {
                        *v = S::lit(truncated_normal(&mut rng) * INIT_STD);
                    }
                }
            }
        }
        Ok(params)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config).expect("config validated at construction")
    }

    /// Named tensors in a fixed canonical order.
    pub fn tensors(&self) -> Vec<(String, &Mat<S>)> {
        let mut out: Vec<(String, &Mat<S>)> = vec![
            ("patch_proj".into(), &self.patch_proj),
            ("patch_bias".into(), &self.patch_bias),
            ("cls_token".into(), &self.cls_token),
            ("pos_enc".into(), &self.pos_enc),
            ("pos_sketch".into(), &self.pos_sketch),
        ];
        for (i, b) in self.encoder.iter().enumerate() {
            out.extend(b.tensors().into_iter().map(|(n, t)| (format!("encoder.{i}.{n}"), t)));
        }
        out.push(("dec_embed_w".into(), &self.dec_embed_w));
        out.push(("dec_embed_b".into(), &self.dec_embed_b));
        out.push(("mask_token".into(), &self.mask_token));
        out.push(("pos_dec".into(), &self.pos_dec));
        for (i, b) in self.decoder.iter().enumerate() {
            out.extend(b.tensors().into_iter().map(|(n, t)| (format!("decoder.{i}.{n}"), t)));
        }
        out.push(("pixel_w".into(), &self.pixel_w));
        out.push(("pixel_b".into(), &self.pixel_b));
        out.push(("distill.teacher".into(), &self.distill.teacher));
        out.push(("distill.student".into(), &self.distill.student));
        out.push(("distill.teacher_cls".into(), &self.distill.teacher_cls));
        out.push(("distill.student_cls".into(), &self.distill.student_cls));
        out.push(("sem_head".into(), &self.sem_head));
        out
    }

    /// Mutable view in the same order as [`ModelParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Mat<S>)> {
        let mut out: Vec<(String, &mut Mat<S>)> = vec![
            ("patch_proj".into(), &mut self.patch_proj),
            ("patch_bias".into(), &mut self.patch_bias),
            ("cls_token".into(), &mut self.cls_token),
            ("pos_enc".into(), &mut self.pos_enc),
            ("pos_sketch".into(), &mut self.pos_sketch),
        ];
        for (i, b) in self.encoder.iter_mut().enumerate() {
            out.extend(b.tensors_mut().into_iter().map(|(n, t)| (format!("encoder.{i}.{n}"), t)));
        }
        out.push(("dec_embed_w".into(), &mut self.dec_embed_w));
        out.push(("dec_embed_b".into(), &mut self.dec_embed_b));
        out.push(("mask_token".into(), &mut self.mask_token));
        out.push(("pos_dec".into(), &mut self.pos_dec));
        for (i, b) in self.decoder.iter_mut().enumerate() {
            out.extend(b.tensors_mut().into_iter().map(|(n, t)| (format!("decoder.{i}.{n}"), t)));
        }
        out.push(("pixel_w".into(), &mut self.pixel_w));
        out.push(("pixel_b".into(), &mut self.pixel_b));
        out.push(("distill.teacher".into(), &mut self.distill.teacher));
        out.push(("distill.student".into(), &mut self.distill.student));
        out.push(("distill.teacher_cls".into(), &mut self.distill.teacher_cls));
        out.push(("distill.student_cls".into(), &mut self.distill.student_cls));
        out.push(("sem_head".into(), &mut self.sem_head));
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.all_finite())
    }

    /// `self += other`, tensor by tensor.
    pub fn add_assign(&mut self, other: &Self) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: S) {
        for (_, t) in self.tensors_mut() {
            t.scale(s);
        }
    }

    pub fn sq_norm(&self) -> S {
        self.tensors().iter().map(|(_, t)| t.sq_norm()).sum()
    }

    pub fn cast<T: Real>(&self) -> ModelParams<T> {
        let mut out = ModelParams::<T>::zeros(&self.config).expect("validated config");
        for ((_, dst), (_, src)) in out.tensors_mut().into_iter().zip(self.tensors()) {
            *dst = src.cast();
        }
        out
    }

    /// Rebuilds parameters from named tensors, rejecting the first name or shape that disagrees with `config`.
    pub fn from_named(config: &ModelConfig, mut named: Vec<(String, Mat<S>)>) -> Result<Self> {
        let mut params = Self::zeros(config)?;
        let expected = params.tensors().len();
        if named.len() != expected {
            let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
            let first = names
                .iter()
                .find(|n| !named.iter().any(|(m, _)| m == *n))
                .cloned()
                .or_else(|| named.iter().map(|(m, _)| m.clone()).find(|m| !names.contains(m)))
                .unwrap_or_default();
            return Err(Error::Checkpoint(format!(
                "tensor count {} does not match config ({expected}); first offending tensor: {first}",
                named.len()
            )));
        }
        for ((name, slot), (given_name, given)) in params.tensors_mut().into_iter().zip(named.drain(..)) {
            if name != given_name {
                return Err(Error::Checkpoint(format!("expected tensor {name}, found {given_name}")));
            }
            if slot.shape() != given.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, config requires {:?}",
                    given.shape(),
                    slot.shape()
                )));
            }
            *slot = given;
        }
        Ok(params)
    }

    pub(crate) fn image_embedding(&self) -> PatchEmbedding<'_, S> {
        PatchEmbedding {
            proj: &self.patch_proj,
            bias: self.patch_bias.row(0),
            cls: self.cls_token.row(0),
            pos: &self.pos_enc,
        }
    }

    pub(crate) fn sketch_embedding(&self) -> PatchEmbedding<'_, S> {
        PatchEmbedding {
            proj: &self.patch_proj,
            bias: self.patch_bias.row(0),
            cls: self.cls_token.row(0),
            pos: &self.pos_sketch,
        }
    }

    pub(crate) fn image_embedding_grad(&mut self) -> PatchEmbeddingGrad<'_, S> {
        PatchEmbeddingGrad {
            proj: &mut self.patch_proj,
            bias: self.patch_bias.row_mut(0),
            cls: self.cls_token.row_mut(0),
            pos: &mut self.pos_enc,
        }
    }

    pub(crate) fn sketch_embedding_grad(&mut self) -> PatchEmbeddingGrad<'_, S> {
        PatchEmbeddingGrad {
            proj: &mut self.patch_proj,
            bias: self.patch_bias.row_mut(0),
            cls: self.cls_token.row_mut(0),
            pos: &mut self.pos_sketch,
        }
    }
}

fn truncated_normal(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic() {
        let cfg = ModelConfig::tiny();
        let a = ModelParams::<f64>::init(&cfg, 7).unwrap();
        let b = ModelParams::<f64>::init(&cfg, 7).unwrap();
        assert_eq!(a, b);
        let c = ModelParams::<f64>::init(&cfg, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn init_statistics() {
        let p = ModelParams::<f64>::init(&ModelConfig::tiny(), 1).unwrap();
        assert!(p.encoder[0].ln1_g.as_slice().iter().all(|&g| g == 1.0));
        assert!(p.pixel_b.as_slice().iter().all(|&b| b == 0.0));
        assert!(p.patch_proj.as_slice().iter().all(|v| v.abs() <= 0.04));
        let var = p.patch_proj.sq_norm() / p.patch_proj.len() as f64;
        assert!((var.sqrt() - 0.02).abs() < 0.004, "std {}", var.sqrt());
    }

    #[test]
    fn tiny_param_count_matches_shape_arithmetic() {
        // independent closed form for the tiny config
        let (pd, de, dd, n1, k, sem) = (8 * 8 * 3, 16, 8, 16 + 1, 8, 8);
        let block = |d: usize| {
            let h = 4 * d;
            2 * d + (d * 3 * d + 3 * d) + (d * d + d) + 2 * d + (d * h + h) + (h * d + d)
        };
        let expected = pd * de
            + de
            + de
            + 2 * n1 * de
            + 2 * block(de)
            + de * dd
            + dd
            + dd
            + n1 * dd
            + block(dd)
            + dd * pd
            + pd
            + 2 * de * k
            + 2 * dd * k
            + dd * sem;
        let p = ModelParams::<f64>::init(&ModelConfig::tiny(), 0).unwrap();
        assert_eq!(p.num_params(), expected);
    }

    #[test]
    fn base_patch_projection_shape() {
        let cfg = ModelConfig::base();
        // avoid allocating the full model: the projection shape follows from the config alone
        assert_eq!((cfg.patch_dim(), cfg.d_enc), (768, 768));
        let small = ModelConfig { enc_depth: 0, dec_depth: 0, ..cfg };
        let p = ModelParams::<f32>::zeros(&small).unwrap();
        assert_eq!(p.patch_proj.shape(), (768, 768));
        assert_eq!(p.pos_dec.shape(), (197, 512));
        assert_eq!(p.pos_sketch.shape(), (197, 768));
    }

    #[test]
    fn from_named_names_offending_tensor() {
        let cfg = ModelConfig::tiny();
        let p = ModelParams::<f64>::init(&cfg, 0).unwrap();
        let mut named: Vec<(String, Mat<f64>)> = p.tensors().into_iter().map(|(n, t)| (n, t.clone())).collect();
        assert_eq!(ModelParams::from_named(&cfg, named.clone()).unwrap(), p);
        named[3].1 = Mat::zeros(2, 2);
        let err = ModelParams::from_named(&cfg, named).unwrap_err().to_string();
        assert!(err.contains("pos_enc"), "{err}");
    }
}
