//! Images to patch tokens and back: patchify, random masking, patch embedding.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Mat;

/// `H × W × C` pixel array, channel-last, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor<S> {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<S>,
}

impl<S: Real> ImageTensor<S> {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<S>) -> Result<Self> {
        if pixels.len() != height * width * channels {
            return Err(Error::Structural(format!(
                "image {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().position(|v| !(*v >= S::zero() && *v <= S::one())) {
            return Err(Error::Input(format!("pixel value {} at flat index {bad} outside [0,1]", pixels[bad])));
        }
        Ok(Self { height, width, channels, pixels })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels, pixels: vec![S::zero(); height * width * channels] }
    }

    pub fn from_fn(height: usize, width: usize, channels: usize, f: impl Fn(usize, usize, usize) -> S) -> Self {
        let mut pixels = Vec::with_capacity(height * width * channels);
        for r in 0..height {
            for c in 0..width {
                for ch in 0..channels {
                    pixels.push(f(r, c, ch).max(S::zero()).min(S::one()));
                }
            }
        }
        Self { height, width, channels, pixels }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }
    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }
    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }
    #[inline]
    pub fn pixels(&self) -> &[S] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize, ch: usize) -> S {
        self.pixels[(r * self.width + c) * self.channels + ch]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, ch: usize, v: S) {
        self.pixels[(r * self.width + c) * self.channels + ch] = v;
    }

    pub fn cast<T: Real>(&self) -> ImageTensor<T> {
        ImageTensor {
            height: self.height,
            width: self.width,
            channels: self.channels,
            pixels: self.pixels.iter().map(|&v| crate::scalar::cast(v)).collect(),
        }
    }

    /// Replicates a single channel into `channels` identical planes.
    pub fn broadcast_channels(&self, channels: usize) -> Result<Self> {
        if self.channels == channels {
            return Ok(self.clone());
        }
        if self.channels != 1 {
            return Err(Error::Structural(format!("cannot broadcast {} channels to {channels}", self.channels)));
        }
        let mut pixels = Vec::with_capacity(self.pixels.len() * channels);
        for &v in &self.pixels {
            pixels.extend(std::iter::repeat_n(v, channels));
        }
        Ok(Self { height: self.height, width: self.width, channels, pixels })
    }

    /// ITU-R 601 luma for RGB, identity for single channel.
    pub fn grayscale(&self) -> Self {
        if self.channels == 1 {
            return self.clone();
        }
        let (wr, wg, wb) = (S::lit(0.299), S::lit(0.587), S::lit(0.114));
        let pixels = self.pixels.chunks(self.channels).map(|px| wr * px[0] + wg * px[1] + wb * px[2]).collect();
        Self { height: self.height, width: self.width, channels: 1, pixels }
    }
}

/// Non-overlapping square patches, row-major from the top-left cell.
///
/// Each row of `patches` is one patch flattened as `(dy, dx, channel)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSequence<S> {
    pub patches: Mat<S>,
    pub patch_size: usize,
    pub channels: usize,
    pub grid: (usize, usize),
}

impl<S: Real> PatchSequence<S> {
    #[inline]
    pub fn len(&self) -> usize {
        self.patches.rows()
    }
    #[inline]
    pub fn is_empty(&self) -> bool {
        self.patches.rows() == 0
    }
    #[inline]
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

pub fn patchify<S: Real>(image: &ImageTensor<S>, patch_size: usize) -> Result<PatchSequence<S>> {
    if patch_size == 0 {
        return Err(Error::Parameter("patch size must be positive".into()));
    }
    if !image.height.is_multiple_of(patch_size) {
        return Err(Error::NotDivisible { axis: "height", size: image.height, patch: patch_size });
    }
    if !image.width.is_multiple_of(patch_size) {
        return Err(Error::NotDivisible { axis: "width", size: image.width, patch: patch_size });
    }
    let grid = (image.height / patch_size, image.width / patch_size);
    let c = image.channels;
    let dim = patch_size * patch_size * c;
    let mut patches = Mat::zeros(grid.0 * grid.1, dim);
    for gr in 0..grid.0 {
        for gc in 0..grid.1 {
            let row = patches.row_mut(gr * grid.1 + gc);
            for dy in 0..patch_size {
                let src = ((gr * patch_size + dy) * image.width + gc * patch_size) * c;
                let dst = dy * patch_size * c;
                row[dst..dst + patch_size * c].copy_from_slice(&image.pixels[src..src + patch_size * c]);
            }
        }
    }
    Ok(PatchSequence { patches, patch_size, channels: c, grid })
}

pub fn unpatchify<S: Real>(seq: &PatchSequence<S>) -> Result<ImageTensor<S>> {
    let (rows, cols) = seq.grid;
    if seq.patches.rows() != rows * cols {
        return Err(Error::Structural(format!(
            "grid {rows}x{cols} expects {} patches, got {}",
            rows * cols,
            seq.patches.rows()
        )));
    }
    if seq.patches.cols() != seq.patch_dim() {
        return Err(Error::Structural(format!(
            "patch width {} does not match {}x{}x{}",
            seq.patches.cols(),
            seq.patch_size,
            seq.patch_size,
            seq.channels
        )));
    }
    let p = seq.patch_size;
    let c = seq.channels;
    let (h, w) = (rows * p, cols * p);
    let mut pixels = vec![S::zero(); h * w * c];
    for gr in 0..rows {
        for gc in 0..cols {
            let row = seq.patches.row(gr * cols + gc);
            for dy in 0..p {
                let dst = ((gr * p + dy) * w + gc * p) * c;
                let src = dy * p * c;
                pixels[dst..dst + p * c].copy_from_slice(&row[src..src + p * c]);
            }
        }
    }
    Ok(ImageTensor { height: h, width: w, channels: c, pixels })
}

/// Partition of a patch grid into masked and visible indices.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    pub n_tokens: usize,
    pub masked_idx: Vec<usize>,
    pub visible_idx: Vec<usize>,
    pub ratio: f64,
    pub seed: u64,
}

impl MaskPlan {
    /// Every token visible.
    pub fn none(n_tokens: usize) -> Self {
        Self { n_tokens, masked_idx: Vec::new(), visible_idx: (0..n_tokens).collect(), ratio: 0.0, seed: 0 }
    }

    /// Builds a plan from an explicit masked set.
    pub fn from_masked(n_tokens: usize, mut masked_idx: Vec<usize>) -> Result<Self> {
        masked_idx.sort_unstable();
        masked_idx.dedup();
        if masked_idx.last().is_some_and(|&i| i >= n_tokens) {
            return Err(Error::Structural(format!("masked index out of range for {n_tokens} tokens")));
        }
        let visible_idx = (0..n_tokens).filter(|i| masked_idx.binary_search(i).is_err()).collect();
        let ratio = masked_idx.len() as f64 / n_tokens.max(1) as f64;
        Ok(Self { n_tokens, masked_idx, visible_idx, ratio, seed: 0 })
    }

    pub fn n_masked(&self) -> usize {
        self.masked_idx.len()
    }

    pub fn n_visible(&self) -> usize {
        self.visible_idx.len()
    }

    pub fn is_masked(&self, idx: usize) -> bool {
        self.masked_idx.binary_search(&idx).is_ok()
    }
}

/// Number of tokens hidden for a ratio, rounding half to even.
pub fn masked_count(n_tokens: usize, ratio: f64) -> usize {
    (ratio * n_tokens as f64).round_ties_even() as usize
}

/// Uniform sampling without replacement through a seeded shuffle.
pub fn sample_mask(n_tokens: usize, ratio: f64, seed: u64) -> Result<MaskPlan> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Parameter(format!("mask ratio {ratio} outside [0,1)")));
    }
    if n_tokens == 0 {
        return Err(Error::Parameter("mask plan needs at least one token".into()));
    }
    let k = masked_count(n_tokens, ratio);
    let mut order: Vec<usize> = (0..n_tokens).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut masked_idx = order[..k].to_vec();
    let mut visible_idx = order[k..].to_vec();
    masked_idx.sort_unstable();
    visible_idx.sort_unstable();
    Ok(MaskPlan { n_tokens, masked_idx, visible_idx, ratio, seed })
}

/// Token matrix plus the original patch index of each non-CLS row.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenEmbeddings<S> {
    pub tokens: Mat<S>,
    pub includes_cls: bool,
    pub positions: Vec<usize>,
}

/// Learned parameters of the patch embedding.
#[derive(Clone, Copy, Debug)]
pub struct PatchEmbedding<'a, S> {
    /// `[patch_dim, d_model]`
    pub proj: &'a Mat<S>,
    pub bias: &'a [S],
    pub cls: &'a [S],
    /// `[1 + n_patches, d_model]`; row 0 belongs to the CLS slot.
    pub pos: &'a Mat<S>,
}

/// Gradient buffers matching [`PatchEmbedding`].
pub struct PatchEmbeddingGrad<'a, S> {
    pub proj: &'a mut Mat<S>,
    pub bias: &'a mut [S],
    pub cls: &'a mut [S],
    pub pos: &'a mut Mat<S>,
}

/// Embeds the patches listed in `positions`, prepends CLS and adds position rows.
pub fn embed_positions<S: Real>(
    patches: &PatchSequence<S>,
    positions: &[usize],
    emb: PatchEmbedding<'_, S>,
) -> Result<TokenEmbeddings<S>> {
    let (in_dim, d) = emb.proj.shape();
    if patches.patches.cols() != in_dim {
        return Err(Error::Structural(format!(
            "patch projection expects {in_dim} inputs, patches have {}",
            patches.patches.cols()
        )));
    }
    if emb.bias.len() != d || emb.cls.len() != d || emb.pos.cols() != d {
        return Err(Error::Structural(format!("embedding width mismatch (d_model {d})")));
    }
    if emb.pos.rows() < patches.len() + 1 {
        return Err(Error::Structural(format!(
            "position table has {} rows, need {}",
            emb.pos.rows(),
            patches.len() + 1
        )));
    }
    if let Some(&bad) = positions.iter().find(|&&p| p >= patches.len()) {
        return Err(Error::Structural(format!("position {bad} outside a {}-patch grid", patches.len())));
    }
    let selected = patches.patches.select_rows(positions);
    let projected = selected.matmul(emb.proj);
    let mut tokens = Mat::zeros(positions.len() + 1, d);
    for (j, t) in tokens.row_mut(0).iter_mut().enumerate() {
        *t = emb.cls[j] + emb.pos[(0, j)];
    }
    for (i, &p) in positions.iter().enumerate() {
        let src = projected.row(i);
        let pos = emb.pos.row(p + 1);
        for (j, t) in tokens.row_mut(i + 1).iter_mut().enumerate() {
            *t = src[j] + emb.bias[j] + pos[j];
        }
    }
    Ok(TokenEmbeddings { tokens, includes_cls: true, positions: positions.to_vec() })
}

/// Embeds only the visible patches of `mask`.
pub fn embed_patches<S: Real>(
    patches: &PatchSequence<S>,
    mask: &MaskPlan,
    emb: PatchEmbedding<'_, S>,
) -> Result<TokenEmbeddings<S>> {
    if mask.n_tokens != patches.len() {
        return Err(Error::Structural(format!("mask covers {} tokens, sequence has {}", mask.n_tokens, patches.len())));
    }
    embed_positions(patches, &mask.visible_idx, emb)
}

/// Accumulates the gradient of [`embed_positions`] given `d_tokens`.
pub fn embed_positions_backward<S: Real>(
    patches: &PatchSequence<S>,
    positions: &[usize],
    d_tokens: &Mat<S>,
    grad: PatchEmbeddingGrad<'_, S>,
) {
    for (j, g) in d_tokens.row(0).iter().enumerate() {
        grad.cls[j] += *g;
        grad.pos[(0, j)] += *g;
    }
    let mut d_proj_out = Mat::zeros(positions.len(), d_tokens.cols());
    for (i, &p) in positions.iter().enumerate() {
        let g = d_tokens.row(i + 1);
        d_proj_out.row_mut(i).copy_from_slice(g);
        for (j, &gj) in g.iter().enumerate() {
            grad.bias[j] += gj;
            grad.pos[(p + 1, j)] += gj;
        }
    }
    let selected = patches.patches.select_rows(positions);
    grad.proj.add_assign(&selected.t_matmul(&d_proj_out));
}
