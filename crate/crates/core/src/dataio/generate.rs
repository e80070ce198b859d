//! Writes synthetic datasets and ingests plain image folders.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::manifest::{DatasetManifest, ManifestRecord};
use super::png;
use super::synth::{attribute_bits, attribute_names, caption, identity_specs, quantize, random_pose, render};
use crate::error::{Error, Result};
use crate::seed;

pub const MANIFEST_NAME: &str = "manifest.tsv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthOptions {
    pub n: usize,
    pub image_size: usize,
    pub seed: u64,
    /// Share of records that carry a caption; exactly `round(fraction · n)` do.
    pub caption_fraction: f64,
    /// Images per identity, on average.
    pub images_per_identity: usize,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self { n: 256, image_size: 32, seed: 0, caption_fraction: 0.3, images_per_identity: 4 }
    }
}

pub fn image_name(k: usize) -> String {
    format!("image_{k:05}.png")
}

pub fn outline_name(k: usize) -> String {
    format!("outline_{k:05}.png")
}

/// Renders `n` vehicles into `out_dir` along with outline masks and `manifest.tsv`.
pub fn generate_synthetic(opts: &SynthOptions, out_dir: &Path) -> Result<DatasetManifest> {
    if opts.n == 0 {
        return Err(Error::Parameter("n must be at least 1".into()));
    }
    if opts.image_size < 8 {
        return Err(Error::Parameter(format!("image size {} is below 8 pixels", opts.image_size)));
    }
    if !(0.0..=1.0).contains(&opts.caption_fraction) {
        return Err(Error::Parameter(format!("caption fraction {} outside [0, 1]", opts.caption_fraction)));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let n_ids = opts.n.div_ceil(opts.images_per_identity.max(1));
    let specs = identity_specs(n_ids, opts.seed);
    let mut order: Vec<usize> = (0..opts.n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed::derive(opts.seed, &[0xca97])));
    let n_captioned = (opts.caption_fraction * opts.n as f64).round() as usize;
    let mut captioned = vec![false; opts.n];
    for &k in &order[..n_captioned] {
        captioned[k] = true;
    }

    let records = (0..opts.n)
        .into_par_iter()
        .map(|k| {
            let identity = k % n_ids;
            let spec = &specs[identity];
            let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(opts.seed, &[0x1a9e, k as u64]));
            let pose = random_pose(&mut rng);
            let r = render(spec, &pose, opts.image_size, &mut rng);
            png::write(&quantize(&r.image), &out_dir.join(image_name(k)))?;
            png::write_mask(&r.outline, opts.image_size, opts.image_size, &out_dir.join(outline_name(k)))?;
            Ok(ManifestRecord {
                image: PathBuf::from(image_name(k)),
                sketch: None,
                caption: captioned[k].then(|| caption(spec, &pose)),
                attributes: attribute_bits(spec),
                identity: identity as u64,
                fine_label: spec.fine_label(),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut manifest = DatasetManifest::new(out_dir, attribute_names())?;
    for r in records {
        manifest.push(r)?;
    }
    manifest.write(&out_dir.join(MANIFEST_NAME))?;
    Ok(manifest)
}

/// Builds an unlabeled manifest over every `*.png` in `dir`; `<stem>.sketch.png` files pair up as sketches.
pub fn ingest_folder(dir: &Path) -> Result<DatasetManifest> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.file_name().to_string_lossy().into_owned()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    names.sort();
    let mut manifest = DatasetManifest::new(dir, Vec::new())?;
    for name in names.iter().filter(|n| n.to_ascii_lowercase().ends_with(".png") && !n.ends_with(".sketch.png")) {
        let stem = &name[..name.len() - 4];
        let sketch = format!("{stem}.sketch.png");
        manifest.push(ManifestRecord {
            image: PathBuf::from(name),
            sketch: names.contains(&sketch).then(|| PathBuf::from(sketch)),
            caption: None,
            attributes: Vec::new(),
            identity: 0,
            fine_label: 0,
        })?;
    }
    if manifest.is_empty() {
        return Err(Error::Input(format!("no PNG images in {}", dir.display())));
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::dataset::Dataset;
    use crate::dataio::manifest::load_manifest;
    use crate::dataio::synth::decode_attribute_bits;
    use crate::structural_prior::SketchSource;

    fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
        let mut files: Vec<_> = std::fs::read_dir(dir)
            .unwrap()
            .map(|e| {
                let e = e.unwrap();
                (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
            })
            .collect();
        files.sort();
        files
    }

    #[test]
    fn generation_is_byte_identical() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let opts = SynthOptions { n: 10, seed: 4, ..SynthOptions::default() };
        generate_synthetic(&opts, a.path()).unwrap();
        generate_synthetic(&opts, b.path()).unwrap();
        let ta = tree(a.path());
        assert_eq!(ta.len(), 21);
        assert_eq!(ta, tree(b.path()));
    }

    #[test]
    fn labels_and_captions_follow_the_options() {
        let dir = tempfile::tempdir().unwrap();
        let opts = SynthOptions { n: 40, seed: 2, caption_fraction: 0.25, ..SynthOptions::default() };
        let m = generate_synthetic(&opts, dir.path()).unwrap();
        assert_eq!(m.records().iter().filter(|r| r.caption.is_some()).count(), 10);
        let loaded = load_manifest(&dir.path().join(MANIFEST_NAME)).unwrap();
        assert_eq!(loaded.records(), m.records());
        let specs = identity_specs(10, 2);
        for r in m.records() {
            let spec = &specs[r.identity as usize];
            assert_eq!(decode_attribute_bits(&r.attributes), Some((spec.color, spec.kind)));
            assert_eq!(r.fine_label, spec.fine_label());
            if let Some(c) = &r.caption {
                assert!(c.starts_with(&format!("a {} {}", spec.color_name(), spec.kind.name())), "{c}");
            }
        }
        let none = SynthOptions { caption_fraction: 0.0, ..opts };
        let m = generate_synthetic(&none, dir.path()).unwrap();
        assert!(m.records().iter().all(|r| r.caption.is_none()));
    }

    #[test]
    fn loaded_images_tile_into_patches() {
        let dir = tempfile::tempdir().unwrap();
        generate_synthetic(&SynthOptions { n: 3, image_size: 32, ..SynthOptions::default() }, dir.path()).unwrap();
        let ds = Dataset::<f32>::load(&load_manifest(&dir.path().join(MANIFEST_NAME)).unwrap()).unwrap();
        for s in ds.samples() {
            assert_eq!((s.image.height(), s.image.width(), s.image.channels()), (32, 32, 3));
            assert!(crate::tokenizer::patchify(&s.image, 8).is_ok());
            assert_eq!(s.sketch.source, SketchSource::BuiltinGradient);
        }
    }

    #[test]
    fn edge_maps_cover_the_outline() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_synthetic(&SynthOptions { n: 24, image_size: 64, seed: 8, ..Default::default() }, dir.path())
            .unwrap();
        let ds = Dataset::<f64>::load(&m).unwrap();
        let (mut hit, mut total) = (0usize, 0usize);
        for (k, s) in ds.samples().iter().enumerate() {
            let outline = png::read_gray::<f64>(&dir.path().join(outline_name(k))).unwrap();
            for (o, e) in outline.pixels().iter().zip(s.sketch.image.pixels()) {
                if *o > 0.5 {
                    total += 1;
                    hit += (*e > 0.05) as usize;
                }
            }
        }
        assert!(hit as f64 >= 0.9 * total as f64, "edge recall {hit}/{total}");
    }

    #[test]
    fn folders_pair_sketches_by_stem() {
        let dir = tempfile::tempdir().unwrap();
        let img = crate::tokenizer::ImageTensor::<f64>::zeros(8, 8, 3);
        png::write(&img, &dir.path().join("b.png")).unwrap();
        png::write(&img, &dir.path().join("a.png")).unwrap();
        png::write(&crate::tokenizer::ImageTensor::<f64>::zeros(8, 8, 1), &dir.path().join("a.sketch.png")).unwrap();
        std::fs::write(dir.path().join("notes.txt"), "x").unwrap();
        let m = ingest_folder(dir.path()).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m.records()[0].sketch, Some(PathBuf::from("a.sketch.png")));
        assert_eq!(m.records()[1].sketch, None);
        let ds = Dataset::<f32>::load(&m).unwrap();
        assert_eq!(ds.samples()[0].sketch.source, SketchSource::ExternalFile);
        assert!(ingest_folder(tempfile::tempdir().unwrap().path()).is_err());
    }
}
