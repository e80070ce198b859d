//! In-memory samples and seeded batch assembly.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::manifest::DatasetManifest;
use super::png;
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::seed;
use crate::structural_prior::{extract_edges, SketchMap, SketchSource};
use crate::tokenizer::ImageTensor;

const SHUFFLE_TAG: u64 = 0x5348_5546;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample<S> {
    /// Stable key, the image path as written in the manifest.
    pub key: String,
    pub image: ImageTensor<S>,
    pub sketch: SketchMap<S>,
    pub caption: Option<String>,
    pub attributes: Vec<u8>,
    pub identity: u64,
    pub fine_label: usize,
}

impl<S: Real> Sample<S> {
    /// A sample whose sketch is computed from the image.
    pub fn new(key: impl Into<String>, image: ImageTensor<S>) -> Self {
        let sketch = extract_edges(&image);
        Self { key: key.into(), image, sketch, caption: None, attributes: Vec::new(), identity: 0, fine_label: 0 }
    }

    pub fn with_caption(mut self, caption: impl Into<String>) -> Self {
        self.caption = Some(caption.into());
        self
    }

    pub fn with_labels(mut self, attributes: Vec<u8>, identity: u64, fine_label: usize) -> Self {
        self.attributes = attributes;
        self.identity = identity;
        self.fine_label = fine_label;
        self
    }
}

/// Fully loaded samples sharing one attribute schema.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<S> {
    attribute_names: Vec<String>,
    samples: Vec<Sample<S>>,
}

impl<S: Real> Dataset<S> {
    pub fn from_samples(attribute_names: Vec<String>, samples: Vec<Sample<S>>) -> Result<Self> {
        if let Some(s) = samples.iter().find(|s| s.attributes.len() != attribute_names.len()) {
            return Err(Error::Input(format!(
                "sample {} has {} attribute bits, expected {}",
                s.key,
                s.attributes.len(),
                attribute_names.len()
            )));
        }
        Ok(Self { attribute_names, samples })
    }

    /// Decodes every image, reading sketch files where given and extracting edges otherwise.
    pub fn load(manifest: &DatasetManifest) -> Result<Self> {
        let samples = manifest
            .records()
            .par_iter()
            .map(|r| {
                let image: ImageTensor<S> = png::read_rgb(&manifest.resolve(&r.image))?;
                let sketch = match &r.sketch {
                    Some(p) => {
                        let path = manifest.resolve(p);
                        let img: ImageTensor<S> = png::read_gray(&path)?;
                        if (img.height(), img.width()) != (image.height(), image.width()) {
                            return Err(Error::Input(format!(
                                "sketch {} is {}x{}, image is {}x{}",
                                path.display(),
                                img.height(),
                                img.width(),
                                image.height(),
                                image.width()
                            )));
                        }
                        SketchMap { image: img, source: SketchSource::ExternalFile }
                    }
                    None => extract_edges(&image),
                };
                Ok(Sample {
                    key: r.image.display().to_string(),
                    image,
                    sketch,
                    caption: r.caption.clone(),
                    attributes: r.attributes.clone(),
                    identity: r.identity,
                    fine_label: r.fine_label,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_samples(manifest.attribute_names().to_vec(), samples)
    }

    pub fn attribute_names(&self) -> &[String] {
        &self.attribute_names
    }

    pub fn samples(&self) -> &[Sample<S>] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, idx: usize) -> Option<&Sample<S>> {
        self.samples.get(idx)
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch<'_, S>> {
        let samples = indices
            .iter()
            .map(|&i| self.samples.get(i).ok_or_else(|| Error::Structural(format!("sample index {i} out of range"))))
            .collect::<Result<_>>()?;
        Ok(Batch { indices: indices.to_vec(), samples })
    }
}

/// Borrowed view of a few samples, in draw order.
#[derive(Clone, Debug)]
pub struct Batch<'a, S> {
    pub indices: Vec<usize>,
    pub samples: Vec<&'a Sample<S>>,
}

impl<'a, S> Batch<'a, S> {
    pub fn new(samples: Vec<&'a Sample<S>>) -> Self {
        Self { indices: (0..samples.len()).collect(), samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Index batches for one epoch: a seeded shuffle cut into `batch_size` pieces, last one short.
pub fn batch_order(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        return Err(Error::Input("cannot batch an empty dataset".into()));
    }
    if batch_size == 0 {
        return Err(Error::Parameter("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed::derive(seed, &[SHUFFLE_TAG, epoch])));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

pub fn make_batches<S: Real>(
    dataset: &Dataset<S>,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Batch<'_, S>>> {
    batch_order(dataset.len(), batch_size, seed, epoch)?.iter().map(|b| dataset.batch(b)).collect()
}
