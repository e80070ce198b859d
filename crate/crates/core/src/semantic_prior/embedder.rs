//! Frozen image/text embedders standing in for a pretrained vision-language model.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::bank::EmbeddingBank;
use crate::dataio::synth::{VehicleType, PALETTE};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Mat;
use crate::tokenizer::ImageTensor;

const THUMB: usize = 16;
const PIXEL_WEIGHT: f64 = 0.35;
const FILLER_WEIGHT: f64 = 0.3;
const SATURATION_MIN: f64 = 0.3;
const PALETTE_MAX_DIST2: f64 = 0.06;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    Stub,
    FileBank,
}

/// 64-bit FNV-1a; stable across platforms and toolchains.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

fn unit(v: &mut [f64]) -> bool {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
        true
    } else {
        false
    }
}

/// Lower-cased alphanumeric words.
pub fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()).map(str::to_lowercase).collect()
}

/// Deterministic embedder: bag-of-words for text, with color and type words dominant; a fixed random projection of a
/// 16×16 grayscale thumbnail plus detected color/type words for images.
#[derive(Clone, Debug, PartialEq)]
pub struct StubEmbedder {
    seed: u64,
    dim: usize,
    projection: Mat<f64>,
    vocabulary: HashMap<&'static str, Vec<f64>>,
}

impl StubEmbedder {
    pub fn new(seed: u64, dim: usize) -> Result<Self> {
        if dim < 2 {
            return Err(Error::Parameter(format!("embedding dimension {dim} must be at least 2")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (THUMB as f64);
        let data = (0..THUMB * THUMB * dim)
            .map(|_| Distribution::<f64>::sample(&StandardNormal, &mut rng) * scale)
            .collect::<Vec<f64>>();
        let mut stub =
            Self { seed, dim, projection: Mat::from_vec(THUMB * THUMB, dim, data)?, vocabulary: HashMap::new() };
        // color and type words get mutually orthogonal directions when the dimension allows
        let mut basis: Vec<Vec<f64>> = Vec::new();
        for word in PALETTE.iter().map(|c| c.name).chain(VehicleType::ALL.iter().map(|t| t.name())) {
            let mut v = stub.hashed_vector(word);
            if basis.len() < dim {
                for b in &basis {
                    let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                    v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
                }
                unit(&mut v);
                basis.push(v.clone());
            }
            stub.vocabulary.insert(word, v);
        }
        Ok(stub)
    }

    fn word_vector(&self, word: &str) -> Vec<f64> {
        match self.vocabulary.get(word) {
            Some(v) => v.clone(),
            None => self.hashed_vector(word).into_iter().map(|x| x * FILLER_WEIGHT).collect(),
        }
    }

    fn hashed_vector(&self, word: &str) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(word.as_bytes()) ^ self.seed.rotate_left(17));
        let mut v: Vec<f64> = (0..self.dim).map(|_| Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect();
        unit(&mut v);
        v
    }

    fn bag(&self, ws: &[impl AsRef<str>]) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for w in ws {
            for (a, b) in v.iter_mut().zip(self.word_vector(w.as_ref())) {
                *a += b;
            }
        }
        v
    }

    pub fn embed_text(&self, text: &str) -> Vec<f32> {
        let mut v = self.bag(&words(text));
        if !unit(&mut v) {
            v = self.hashed_vector("");
        }
        v.into_iter().map(|x| x as f32).collect()
    }

    pub fn embed_image<S: Real>(&self, image: &ImageTensor<S>) -> Vec<f32> {
        let thumb = thumbnail(image);
        let mut pix = Mat::row_vector(&thumb).matmul(&self.projection).into_vec();
        let has_pixels = unit(&mut pix);
        let mut bag = self.bag(&visual_words(image));
        let has_words = unit(&mut bag);
        let mut v: Vec<f64> = pix.iter().zip(&bag).map(|(p, b)| PIXEL_WEIGHT * p + b).collect();
        if !(has_pixels || has_words) || !unit(&mut v) {
            v = self.hashed_vector("blank");
        }
        v.into_iter().map(|x| x as f32).collect()
    }
}

/// Mean-centered, unit-norm 16×16 grayscale thumbnail by area averaging.
fn thumbnail<S: Real>(image: &ImageTensor<S>) -> Vec<f64> {
    let gray = image.grayscale();
    let (h, w) = (gray.height(), gray.width());
    let mut sum = vec![0.0; THUMB * THUMB];
    let mut cnt = vec![0usize; THUMB * THUMB];
    for r in 0..h {
        for c in 0..w {
            let cell = (r * THUMB / h) * THUMB + c * THUMB / w;
            sum[cell] += gray.get(r, c, 0).to_f64_lossy();
            cnt[cell] += 1;
        }
    }
    let mut v: Vec<f64> = sum.iter().zip(&cnt).map(|(s, &n)| if n > 0 { s / n as f64 } else { 0.0 }).collect();
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= mean);
    unit(&mut v);
    v
}

/// Color name of the dominant saturated palette color and the vehicle type implied by
/// the extent of those pixels.
pub fn visual_words<S: Real>(image: &ImageTensor<S>) -> Vec<&'static str> {
    if image.channels() < 3 {
        return Vec::new();
    }
    let (h, w) = (image.height(), image.width());
    let mut votes = [0usize; PALETTE.len()];
    let mut boxes = [(usize::MAX, usize::MAX, 0usize, 0usize); PALETTE.len()];
    for r in 0..h {
        for c in 0..w {
            let px = [0, 1, 2].map(|k| image.get(r, c, k).to_f64_lossy());
            let sat = px.iter().copied().fold(f64::MIN, f64::max) - px.iter().copied().fold(f64::MAX, f64::min);
            if sat < SATURATION_MIN {
                continue;
            }
            let (best, d2) = PALETTE
                .iter()
                .enumerate()
                .map(|(k, p)| (k, (0..3).map(|i| (p.rgb[i] - px[i]).powi(2)).sum::<f64>()))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap();
            if d2 > PALETTE_MAX_DIST2 {
                continue;
            }
            votes[best] += 1;
            let b = &mut boxes[best];
            *b = (b.0.min(r), b.1.min(c), b.2.max(r), b.3.max(c));
        }
    }
    let (best, &count) = votes.iter().enumerate().max_by_key(|(k, &v)| (v, usize::MAX - k)).unwrap();
    if count < (h * w / 50).max(4) {
        return Vec::new();
    }
    let (r0, c0, r1, c1) = boxes[best];
    let aspect = (c1 - c0 + 1) as f64 / (r1 - r0 + 1) as f64;
    vec![PALETTE[best].name, VehicleType::from_aspect(aspect).name()]
}

/// Looks up precomputed vectors: images under `image:<id>`, captions under `text:<caption>`.
#[derive(Clone, Debug, PartialEq)]
pub struct BankEmbedder {
    bank: EmbeddingBank,
    index: HashMap<String, usize>,
}

impl BankEmbedder {
    pub fn new(bank: EmbeddingBank) -> Self {
        let index = bank.ids().iter().enumerate().map(|(k, id)| (id.clone(), k)).collect();
        Self { bank, index }
    }

    fn lookup(&self, key: &str) -> Result<Vec<f32>> {
        self.index
            .get(key)
            .map(|&k| self.bank.vectors()[k].clone())
            .ok_or_else(|| Error::Input(format!("embedding bank has no record {key:?}")))
    }

    pub fn bank(&self) -> &EmbeddingBank {
        &self.bank
    }
}

/// Frozen embedder. Nothing here is ever updated by training.
#[derive(Clone, Debug, PartialEq)]
pub enum FrozenEmbedder {
    Stub(StubEmbedder),
    FileBank(BankEmbedder),
}

impl FrozenEmbedder {
    pub fn stub(seed: u64, dim: usize) -> Result<Self> {
        Ok(Self::Stub(StubEmbedder::new(seed, dim)?))
    }

    pub fn from_bank(bank: EmbeddingBank) -> Self {
        Self::FileBank(BankEmbedder::new(bank))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Ok(Self::from_bank(EmbeddingBank::read(path)?))
    }

    pub fn kind(&self) -> EmbedderKind {
        match self {
            Self::Stub(_) => EmbedderKind::Stub,
            Self::FileBank(_) => EmbedderKind::FileBank,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Stub(s) => s.dim,
            Self::FileBank(b) => b.bank.dim(),
        }
    }

    /// `id` identifies the image for bank lookups; the stub ignores it.
    pub fn embed_image<S: Real>(&self, id: &str, image: &ImageTensor<S>) -> Result<Vec<f32>> {
        match self {
            Self::Stub(s) => Ok(s.embed_image(image)),
            Self::FileBank(b) => b.lookup(&format!("image:{id}")),
        }
    }

    pub fn embed_text(&self, text: &str) -> Result<Vec<f32>> {
        match self {
            Self::Stub(s) => Ok(s.embed_text(text)),
            Self::FileBank(b) => b.lookup(&format!("text:{text}")),
        }
    }

    /// Dumps image and caption embeddings in the layout [`BankEmbedder`] reads back.
    pub fn export<'a, S: Real>(
        &self,
        images: impl IntoIterator<Item = (&'a str, &'a ImageTensor<S>)>,
        captions: impl IntoIterator<Item = &'a str>,
    ) -> Result<EmbeddingBank> {
        let mut bank = EmbeddingBank::new(self.dim());
        for (id, img) in images {
            bank.push(format!("image:{id}"), self.embed_image(id, img)?)?;
        }
        for c in captions {
            let key = format!("text:{c}");
            if bank.get(&key).is_none() {
                bank.push(key, self.embed_text(c)?)?;
            }
        }
        Ok(bank)
    }
}

/// Caption embeddings `W` with an optional image → caption pairing.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbeddingBank {
    pub captions: Vec<String>,
    pub embeddings: Vec<Vec<f32>>,
    pub pairing: HashMap<String, usize>,
}

impl TextEmbeddingBank {
    pub fn from_embedder(embedder: &FrozenEmbedder, captions: &[String]) -> Result<Self> {
        let embeddings = captions.iter().map(|c| embedder.embed_text(c)).collect::<Result<_>>()?;
        Ok(Self { captions: captions.to_vec(), embeddings, pairing: HashMap::new() })
    }

    /// Uses `text:`-prefixed records when present, otherwise every record, with ids as captions.
    pub fn from_bank(bank: &EmbeddingBank) -> Self {
        let prefixed = bank.ids().iter().any(|id| id.starts_with("text:"));
        let mut captions = Vec::new();
        let mut embeddings = Vec::new();
        for (id, v) in bank.ids().iter().zip(bank.vectors()) {
            match (prefixed, id.strip_prefix("text:")) {
                (true, Some(c)) => captions.push(c.to_string()),
                (false, _) => captions.push(id.clone()),
                (true, None) => continue,
            }
            embeddings.push(v.clone());
        }
        Self { captions, embeddings, pairing: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.captions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.captions.is_empty()
    }

    pub fn matrix<S: Real>(&self) -> Mat<S> {
        let dim = self.embeddings.first().map_or(0, Vec::len);
        let data = self.embeddings.iter().flatten().map(|&x| S::from_f64_lossy(x as f64)).collect();
        Mat::from_vec(self.embeddings.len(), dim, data).expect("rows share the bank dimension")
    }
}

/// Reads a bank file as both a caption bank and a file-backed embedder.
pub fn load_embedding_bank(path: &std::path::Path) -> Result<(TextEmbeddingBank, FrozenEmbedder)> {
    let bank = EmbeddingBank::read(path)?;
    Ok((TextEmbeddingBank::from_bank(&bank), FrozenEmbedder::from_bank(bank)))
}
