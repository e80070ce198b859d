//! Shared transformer encoder, reconstruction decoder and pixel head.
//!
//! Every forward routine has a `*_cached` twin that keeps the activations
//! needed by the matching backward routine. The image branch and the sketch
//! branch both run through [`ModelParams::encoder`]; there is no second copy
//! of the encoder weights.

mod config;
pub(crate) mod layers;
mod params;

pub use config::ModelConfig;
pub use layers::BlockParams;
pub use params::ModelParams;

use layers::{linear, linear_backward, stack_backward, stack_forward, BlockCache};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Mat;
use crate::tokenizer::{MaskPlan, TokenEmbeddings};

/// Decoder-side features of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBundle<S> {
    /// Encoder output `[n_visible + 1, d_enc]`.
    pub enc_tokens: Mat<S>,
    /// Decoder output in original patch order, CLS first: `[N + 1, d_dec]`.
    pub dec_tokens: Mat<S>,
    pub dec_cls: Vec<S>,
    /// Pixel predictions for the masked patches, in `mask.masked_idx` order.
    pub pixel_pred: Mat<S>,
}

pub(crate) struct EncoderCache<S> {
    blocks: Vec<BlockCache<S>>,
}

pub(crate) struct DecoderCache<S> {
    encoded: Mat<S>,
    positions: Vec<usize>,
    masked: Vec<usize>,
    blocks: Vec<BlockCache<S>>,
    masked_rows: Mat<S>,
}

fn check_tokens<S: Real>(tokens: &Mat<S>, width: usize) -> Result<()> {
    if tokens.cols() != width {
        return Err(Error::Structural(format!("token width {} does not match d_enc {width}", tokens.cols())));
    }
    if let Some(i) = tokens.first_non_finite_row() {
        return Err(Error::Numeric(format!("non-finite value in input token {i}")));
    }
    Ok(())
}

pub(crate) fn encode_cached<S: Real>(tokens: &Mat<S>, params: &ModelParams<S>) -> Result<(Mat<S>, EncoderCache<S>)> {
    let cfg = params.config();
    check_tokens(tokens, cfg.d_enc)?;
    let (out, blocks) = stack_forward(tokens, &params.encoder, cfg.n_heads_enc);
    Ok((out, EncoderCache { blocks }))
}

pub(crate) fn encode_backward<S: Real>(
    cache: &EncoderCache<S>,
    params: &ModelParams<S>,
    d_out: &Mat<S>,
    grads: &mut ModelParams<S>,
) -> Mat<S> {
    stack_backward(&cache.blocks, &params.encoder, d_out, &mut grads.encoder)
}

/// Runs the encoder stack. Output length equals input length; positions are carried through.
pub fn encode<S: Real>(tokens: &TokenEmbeddings<S>, params: &ModelParams<S>) -> Result<TokenEmbeddings<S>> {
    let (out, _) = encode_cached(&tokens.tokens, params)?;
    Ok(TokenEmbeddings { tokens: out, includes_cls: tokens.includes_cls, positions: tokens.positions.clone() })
}

/// Encodes the full, unmasked sketch sequence with the image encoder's weights.
pub fn forward_sketch<S: Real>(sketch_tokens: &TokenEmbeddings<S>, params: &ModelParams<S>) -> Result<Mat<S>> {
    if sketch_tokens.positions.len() != params.config().n_patches() {
        return Err(Error::Structural(format!(
            "sketch branch needs all {} patches, got {}",
            params.config().n_patches(),
            sketch_tokens.positions.len()
        )));
    }
    Ok(encode_cached(&sketch_tokens.tokens, params)?.0)
}

pub(crate) fn decode_cached<S: Real>(
    encoded: &Mat<S>,
    positions: &[usize],
    mask: &MaskPlan,
    params: &ModelParams<S>,
) -> Result<(FeatureBundle<S>, DecoderCache<S>)> {
    let cfg = params.config();
    let n = cfg.n_patches();
    if mask.n_tokens != n {
        return Err(Error::Structural(format!("mask covers {} tokens, model grid has {n}", mask.n_tokens)));
    }
    if encoded.rows() != positions.len() + 1 {
        return Err(Error::Structural(format!(
            "{} encoded tokens for {} visible positions plus CLS",
            encoded.rows(),
            positions.len()
        )));
    }
    if positions.len() != mask.n_visible() {
        return Err(Error::Structural(format!(
            "mask has {} visible tokens, encoder produced {}",
            mask.n_visible(),
            positions.len()
        )));
    }
    let mut sorted = positions.to_vec();
    sorted.sort_unstable();
    if sorted != mask.visible_idx {
        return Err(Error::Structural("encoded positions disagree with the mask's visible set".into()));
    }
    let projected = linear(encoded, &params.dec_embed_w, &params.dec_embed_b);
    let mut full = params.pos_dec.clone();
    for (j, v) in full.row_mut(0).iter_mut().enumerate() {
        *v += projected[(0, j)];
    }
    for (i, &p) in positions.iter().enumerate() {
        for (j, v) in full.row_mut(p + 1).iter_mut().enumerate() {
            *v += projected[(i + 1, j)];
        }
    }
    for &m in &mask.masked_idx {
        for (v, &t) in full.row_mut(m + 1).iter_mut().zip(params.mask_token.row(0)) {
            *v += t;
        }
    }
    let (dec_tokens, blocks) = stack_forward(&full, &params.decoder, cfg.n_heads_dec);
    let rows: Vec<usize> = mask.masked_idx.iter().map(|&m| m + 1).collect();
    let masked_rows = dec_tokens.select_rows(&rows);
    let pixel_pred = linear(&masked_rows, &params.pixel_w, &params.pixel_b);
    let dec_cls = dec_tokens.row(0).to_vec();
    let bundle = FeatureBundle { enc_tokens: encoded.clone(), dec_tokens, dec_cls, pixel_pred };
    let cache = DecoderCache {
        encoded: encoded.clone(),
        positions: positions.to_vec(),
        masked: mask.masked_idx.clone(),
        blocks,
        masked_rows,
    };
    Ok((bundle, cache))
}

/// Backward through pixel head, decoder stack, mask-token fill and the d_enc→d_dec projection.
///
/// `d_dec_tokens` is the gradient flowing into the decoder output from the prior losses;
/// `d_pixel` is the gradient of the pixel predictions. Returns the gradient of the encoder output.
pub(crate) fn decode_backward<S: Real>(
    cache: &DecoderCache<S>,
    params: &ModelParams<S>,
    d_dec_tokens: &Mat<S>,
    d_pixel: &Mat<S>,
    grads: &mut ModelParams<S>,
) -> Mat<S> {
    let mut d_out = d_dec_tokens.clone();
    if !cache.masked.is_empty() {
        let d_rows =
            linear_backward(&cache.masked_rows, &params.pixel_w, d_pixel, &mut grads.pixel_w, &mut grads.pixel_b);
        for (r, &m) in cache.masked.iter().enumerate() {
            for (d, &g) in d_out.row_mut(m + 1).iter_mut().zip(d_rows.row(r)) {
                *d += g;
            }
        }
    }
    let d_full = stack_backward(&cache.blocks, &params.decoder, &d_out, &mut grads.decoder);
    grads.pos_dec.add_assign(&d_full);
    for &m in &cache.masked {
        for (g, &d) in grads.mask_token.row_mut(0).iter_mut().zip(d_full.row(m + 1)) {
            *g += d;
        }
    }
    let mut d_proj = Mat::zeros(cache.positions.len() + 1, d_full.cols());
    d_proj.row_mut(0).copy_from_slice(d_full.row(0));
    for (i, &p) in cache.positions.iter().enumerate() {
        d_proj.row_mut(i + 1).copy_from_slice(d_full.row(p + 1));
    }
    linear_backward(&cache.encoded, &params.dec_embed_w, &d_proj, &mut grads.dec_embed_w, &mut grads.dec_embed_b)
}

/// Restores original patch order, fills masked slots, decodes, and predicts masked pixels.
pub fn decode<S: Real>(
    encoded: &TokenEmbeddings<S>,
    mask: &MaskPlan,
    params: &ModelParams<S>,
) -> Result<FeatureBundle<S>> {
    if !encoded.includes_cls {
        return Err(Error::Structural("decoder input must carry the CLS token".into()));
    }
    Ok(decode_cached(&encoded.tokens, &encoded.positions, mask, params)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcheck::{central_difference, relative_error};
    use crate::tokenizer::{embed_patches, embed_positions, patchify, sample_mask, ImageTensor};

    fn image(cfg: &ModelConfig, salt: usize) -> ImageTensor<f64> {
        ImageTensor::from_fn(cfg.image_size, cfg.image_size, 3, |r, c, ch| {
            (((r * 7 + c * 13 + ch * 29 + salt * 31) % 64) as f64) / 63.0
        })
    }

    fn noisy_params(cfg: &ModelConfig, seed: u64) -> ModelParams<f64> {
        let mut p = ModelParams::init(cfg, seed).unwrap();
        // larger weights so every path carries signal in the gradient checks
        for (name, t) in p.tensors_mut() {
            if !name.ends_with("_g") {
                for (i, v) in t.as_mut_slice().iter_mut().enumerate() {
                    *v = *v * 10.0 + 0.01 * ((i % 7) as f64 - 3.0);
                }
            }
        }
        p
    }

    #[test]
    fn depth_zero_encoder_is_identity() {
        let cfg = ModelConfig { enc_depth: 0, ..ModelConfig::tiny() };
        let p = ModelParams::<f64>::init(&cfg, 1).unwrap();
        let seq = patchify(&image(&cfg, 0), cfg.patch_size).unwrap();
        let t = embed_patches(&seq, &sample_mask(16, 0.5, 1).unwrap(), p.image_embedding()).unwrap();
        assert_eq!(encode(&t, &p).unwrap(), t);
    }

    #[test]
    fn zero_params_encoder_matches_reference() {
        // reference forward: pre-norm residual blocks whose branches are all zero contribute nothing
        let cfg = ModelConfig::tiny();
        let p = ModelParams::<f64>::zeros(&cfg).unwrap();
        let x = Mat::from_vec(5, 16, (0..80).map(|i| (i as f64).sin()).collect()).unwrap();
        let t = TokenEmbeddings { tokens: x.clone(), includes_cls: true, positions: vec![0, 1, 2, 3] };
        let mut reference = x.clone();
        for _ in 0..cfg.enc_depth {
            let attn_branch = Mat::zeros(5, 16); // zero QKV / out-proj weights and biases
            reference = reference.add(&attn_branch);
            let mlp_branch = Mat::zeros(5, 16); // fc2 weights and bias zero
            reference = reference.add(&mlp_branch);
        }
        assert_eq!(encode(&t, &p).unwrap().tokens, reference);
    }

    #[test]
    fn rejects_non_finite_input_with_index() {
        let cfg = ModelConfig::tiny();
        let p = ModelParams::<f64>::init(&cfg, 0).unwrap();
        let mut x = Mat::zeros(3, 16);
        x[(2, 4)] = f64::NAN;
        let t = TokenEmbeddings { tokens: x, includes_cls: true, positions: vec![0, 1] };
        let err = encode(&t, &p).unwrap_err();
        assert!(matches!(&err, Error::Numeric(m) if m.contains("token 2")), "{err}");
    }

    #[test]
    fn base_shapes_without_depth() {
        // full-width shapes with zero blocks keep the test fast
        let cfg = ModelConfig { enc_depth: 1, dec_depth: 1, ..ModelConfig::base() };
        let p = ModelParams::<f32>::zeros(&cfg).unwrap();
        let seq = patchify(&ImageTensor::<f32>::zeros(224, 224, 3), 16).unwrap();
        let mask = sample_mask(196, 0.75, 0).unwrap();
        let t = embed_patches(&seq, &mask, p.image_embedding()).unwrap();
        let enc = encode(&t, &p).unwrap();
        assert_eq!(enc.tokens.shape(), (50, 768));
        let f = decode(&enc, &mask, &p).unwrap();
        assert_eq!(f.dec_tokens.shape(), (197, 512));
        assert_eq!(f.pixel_pred.shape(), (147, 768));
        let sk = embed_positions(&seq, &(0..196).collect::<Vec<_>>(), p.sketch_embedding()).unwrap();
        assert_eq!(forward_sketch(&sk, &p).unwrap().shape(), (197, 768));
    }

    #[test]
    fn zero_ratio_has_no_pixel_rows() {
        let cfg = ModelConfig::tiny();
        let p = ModelParams::<f64>::init(&cfg, 0).unwrap();
        let seq = patchify(&image(&cfg, 1), 8).unwrap();
        let mask = MaskPlan::none(16);
        let enc = encode(&embed_patches(&seq, &mask, p.image_embedding()).unwrap(), &p).unwrap();
        let f = decode(&enc, &mask, &p).unwrap();
        assert_eq!(f.pixel_pred.rows(), 0);
        assert_eq!(f.dec_tokens.rows(), 17);
    }

    #[test]
    fn single_masked_patch_matches_manual_head() {
        let cfg = ModelConfig::tiny();
        let p = noisy_params(&cfg, 3);
        let seq = patchify(&image(&cfg, 2), 8).unwrap();
        let mask = MaskPlan::from_masked(16, vec![5]).unwrap();
        let enc = encode(&embed_patches(&seq, &mask, p.image_embedding()).unwrap(), &p).unwrap();
        let f = decode(&enc, &mask, &p).unwrap();
        assert_eq!(f.pixel_pred.rows(), 1);
        let h = f.dec_tokens.row(6);
        for j in 0..cfg.patch_dim() {
            let mut acc = p.pixel_b[(0, j)];
            for (k, &hk) in h.iter().enumerate() {
                acc += hk * p.pixel_w[(k, j)];
            }
            assert!((acc - f.pixel_pred[(0, j)]).abs() < 1e-12);
        }
    }

    #[test]
    fn decode_rejects_mismatched_mask() {
        let cfg = ModelConfig::tiny();
        let p = ModelParams::<f64>::init(&cfg, 0).unwrap();
        let seq = patchify(&image(&cfg, 0), 8).unwrap();
        let mask = sample_mask(16, 0.5, 0).unwrap();
        let enc = encode(&embed_patches(&seq, &mask, p.image_embedding()).unwrap(), &p).unwrap();
        let other = sample_mask(16, 0.25, 0).unwrap();
        assert!(matches!(decode(&enc, &other, &p), Err(Error::Structural(_))));
    }

    #[test]
    fn visible_token_order_does_not_matter() {
        let cfg = ModelConfig::tiny();
        let p = noisy_params(&cfg, 5);
        let seq = patchify(&image(&cfg, 4), 8).unwrap();
        let mask = sample_mask(16, 0.5, 9).unwrap();
        let forward = |positions: &[usize]| {
            let t = embed_positions(&seq, positions, p.image_embedding()).unwrap();
            decode(&encode(&t, &p).unwrap(), &mask, &p).unwrap()
        };
        let a = forward(&mask.visible_idx);
        let mut shuffled = mask.visible_idx.clone();
        shuffled.reverse();
        shuffled.swap(0, 2);
        let b = forward(&shuffled);
        for (x, y) in a.dec_tokens.as_slice().iter().zip(b.dec_tokens.as_slice()) {
            assert!((x - y).abs() <= 1e-6);
        }
    }

    #[test]
    fn sketch_and_image_share_encoder_sensitivity() {
        let cfg = ModelConfig::tiny();
        let p = noisy_params(&cfg, 2);
        let seq = patchify(&image(&cfg, 6), 8).unwrap();
        let all: Vec<usize> = (0..16).collect();
        let t = embed_positions(&seq, &all, p.image_embedding()).unwrap();
        let probe = |p: &ModelParams<f64>| {
            let a = encode(&t, p).unwrap().tokens.sum();
            let b = forward_sketch(&t, p).unwrap().sum();
            (a, b)
        };
        assert_eq!(probe(&p).0, probe(&p).1);
        let h = 1e-5;
        for idx in [0usize, 17, 200] {
            let mut up = p.clone();
            up.encoder[0].qkv_w.as_mut_slice()[idx] += h;
            let mut down = p.clone();
            down.encoder[0].qkv_w.as_mut_slice()[idx] -= h;
            let (ua, ub) = probe(&up);
            let (da, db) = probe(&down);
            assert_eq!((ua - da) / (2.0 * h), (ub - db) / (2.0 * h));
        }
    }

    #[test]
    fn decoder_gradients_match_finite_differences() {
        let cfg = ModelConfig::tiny();
        let p = noisy_params(&cfg, 8);
        let seq = patchify(&image(&cfg, 3), 8).unwrap();
        let mask = sample_mask(16, 0.75, 4).unwrap();
        let t = embed_patches(&seq, &mask, p.image_embedding()).unwrap();
        let (enc, enc_cache) = encode_cached(&t.tokens, &p).unwrap();
        let (f, cache) = decode_cached(&enc, &t.positions, &mask, &p).unwrap();
        // scalar: Σ w·dec_tokens + Σ u·pixel_pred with fixed pseudo-random weights
        let wd = Mat::from_vec(17, 8, (0..136).map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0).collect()).unwrap();
        let wp_len = f.pixel_pred.len();
        let wp = Mat::from_vec(12, 192, (0..wp_len).map(|i| ((i * 13 % 17) as f64 - 8.0) / 9.0).collect()).unwrap();
        let scalar = |p: &ModelParams<f64>| {
            let t = embed_patches(&seq, &mask, p.image_embedding()).unwrap();
            let e = encode(&t, p).unwrap();
            let f = decode(&e, &mask, p).unwrap();
            crate::tensor::dot(f.dec_tokens.as_slice(), wd.as_slice())
                + crate::tensor::dot(f.pixel_pred.as_slice(), wp.as_slice())
        };
        let mut g = p.zeros_like();
        let d_enc = decode_backward(&cache, &p, &wd, &wp, &mut g);
        let d_tok = encode_backward(&enc_cache, &p, &d_enc, &mut g);
        crate::tokenizer::embed_positions_backward(&seq, &t.positions, &d_tok, g.image_embedding_grad());
        let names: Vec<String> = p.tensors().into_iter().map(|(n, _)| n).collect();
        for (k, name) in names.iter().enumerate() {
            if name.starts_with("distill") || name == "sem_head" || name == "pos_sketch" {
                continue;
            }
            let base = p.tensors()[k].1.as_slice().to_vec();
            let fd = central_difference(&base, 1e-5, |v| {
                let mut q = p.clone();
                q.tensors_mut()[k].1.as_mut_slice().copy_from_slice(v);
                scalar(&q)
            });
            let err = relative_error(g.tensors()[k].1.as_slice(), &fd, 1e-7);
            assert!(err <= 1e-5, "{name}: relative error {err}");
        }
    }
}
