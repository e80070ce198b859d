//! Reconstruction dumps: original, masked input, filled-in reconstruction and error map side by side.

use crate::backbone::{decode, encode, ModelParams};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tokenizer::{embed_patches, patchify, sample_mask, unpatchify, ImageTensor, MaskPlan};

/// Gray used for hidden patches in the masked panel.
const MASK_FILL: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct ReconstructionPanels<S> {
    pub original: ImageTensor<S>,
    pub masked: ImageTensor<S>,
    /// Visible patches copied from the input, masked ones predicted.
    pub filled: ImageTensor<S>,
    /// Per-pixel mean absolute error, scaled so the worst pixel is red.
    pub error: ImageTensor<S>,
    pub mask: MaskPlan,
}

impl<S: Real> ReconstructionPanels<S> {
    /// The four panels stacked left to right.
    pub fn stacked(&self) -> ImageTensor<S> {
        let panels = [&self.original, &self.masked, &self.filled, &self.error];
        let (h, w, c) = (self.original.height(), self.original.width(), self.original.channels());
        ImageTensor::from_fn(h, 4 * w, c, |r, col, ch| panels[col / w].get(r, col % w, ch))
    }
}

pub fn reconstruct<S: Real>(
    params: &ModelParams<S>,
    image: &ImageTensor<S>,
    mask_ratio: f64,
    seed: u64,
) -> Result<ReconstructionPanels<S>> {
    let cfg = params.config();
    if image.channels() != cfg.channels || image.height() != cfg.image_size || image.width() != cfg.image_size {
        return Err(Error::Input(format!(
            "image is {}x{}x{}, model expects {}x{}x{}",
            image.height(),
            image.width(),
            image.channels(),
            cfg.image_size,
            cfg.image_size,
            cfg.channels
        )));
    }
    let patches = patchify(image, cfg.patch_size)?;
    let mask = sample_mask(patches.len(), mask_ratio, seed)?;
    let tokens = embed_patches(&patches, &mask, params.image_embedding())?;
    let bundle = decode(&encode(&tokens, params)?, &mask, params)?;

    let mut hidden = patches.clone();
    let mut filled = patches.clone();
    for (i, &p) in mask.masked_idx.iter().enumerate() {
        hidden.patches.row_mut(p).fill(S::lit(MASK_FILL));
        for (d, &v) in filled.patches.row_mut(p).iter_mut().zip(bundle.pixel_pred.row(i)) {
            *d = v.max(S::zero()).min(S::one());
        }
    }
    let masked = unpatchify(&hidden)?;
    let filled = unpatchify(&filled)?;

    let (h, w, c) = (image.height(), image.width(), image.channels());
    let err: Vec<S> = (0..h * w)
        .map(|k| {
            (0..c).map(|ch| (filled.pixels()[k * c + ch] - image.pixels()[k * c + ch]).abs()).sum::<S>() / S::count(c)
        })
        .collect();
    let peak = err.iter().copied().fold(S::zero(), S::max);
    let scale = if peak > S::zero() { S::one() / peak } else { S::zero() };
    let error = ImageTensor::from_fn(h, w, c, |r, col, ch| {
        let e = err[r * w + col] * scale;
        match ch {
            0 => e,
            1 => S::zero(),
            _ => S::one() - e,
        }
    });
    Ok(ReconstructionPanels { original: image.clone(), masked, filled, error, mask })
}
