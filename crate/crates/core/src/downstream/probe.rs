//! Linear probing and fine-tuning on mean-pooled encoder tokens.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{attribute_metrics, retrieval_metrics, top1_accuracy, PredictionSet, TaskKind};
use super::report::MetricReport;
use crate::backbone::{encode_backward, encode_cached, ModelParams};
use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::pretrainer::{adamw_update, AdamState, OptimConfig};
use crate::scalar::Real;
use crate::seed;
use crate::tensor::{softmax, Mat};
use crate::tokenizer::{embed_patches, embed_positions_backward, patchify, ImageTensor, MaskPlan};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeTask {
    /// Multi-label attribute recognition.
    Attribute,
    /// Single-label classification of `fine_label`.
    FineGrained,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Head learning rate.
    pub lr: f64,
    /// Encoder learning rate when fine-tuning.
    pub finetune_lr: f64,
    pub weight_decay: f64,
    pub train_fraction: f64,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            lr: 0.01,
            finetune_lr: 0.0004,
            weight_decay: 0.0,
            train_fraction: 0.8,
            threshold: 0.5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeOutcome {
    pub report: MetricReport,
    /// Scores on the held-out split.
    pub predictions: PredictionSet,
}

/// Mean of the encoder's patch tokens for the full, unmasked image.
pub fn encoder_features<S: Real>(params: &ModelParams<S>, image: &ImageTensor<S>) -> Result<Vec<f64>> {
    Ok(pooled_with_cache(params, image)?.0)
}

struct Pooled<S> {
    patches: crate::tokenizer::PatchSequence<S>,
    positions: Vec<usize>,
    cache: crate::backbone::EncoderCache<S>,
    n_tokens: usize,
}

fn pooled_with_cache<S: Real>(params: &ModelParams<S>, image: &ImageTensor<S>) -> Result<(Vec<f64>, Pooled<S>)> {
    let cfg = params.config();
    let patches = patchify(image, cfg.patch_size)?;
    if patches.len() != cfg.n_patches() {
        return Err(Error::Input(format!("image gives {} patches, model expects {}", patches.len(), cfg.n_patches())));
    }
    let mask = MaskPlan::none(patches.len());
    let tokens = embed_patches(&patches, &mask, params.image_embedding())?;
    let (out, cache) = encode_cached(&tokens.tokens, params)?;
    let n = patches.len();
    let mut mean = vec![0.0; out.cols()];
    for r in 1..=n {
        for (m, &v) in mean.iter_mut().zip(out.row(r)) {
            *m += v.to_f64_lossy() / n as f64;
        }
    }
    Ok((mean, Pooled { patches, positions: tokens.positions, cache, n_tokens: n }))
}

/// Pooled features of every sample, in dataset order.
pub fn dataset_features<S: Real>(params: &ModelParams<S>, dataset: &Dataset<S>) -> Result<Mat<f64>> {
    let rows = dataset.samples().par_iter().map(|s| encoder_features(params, &s.image)).collect::<Result<Vec<_>>>()?;
    if rows.is_empty() {
        return Err(Error::Input("dataset is empty".into()));
    }
    Mat::from_rows(&rows)
}

struct Labels {
    kind: TaskKind,
    columns: Vec<String>,
    targets: Mat<f64>,
}

fn labels<S: Real>(dataset: &Dataset<S>, task: ProbeTask) -> Result<Labels> {
    let n = dataset.len();
    match task {
        ProbeTask::Attribute => {
            let a = dataset.attribute_names().len();
            if a == 0 {
                return Err(Error::Config("attribute task on a dataset without attributes".into()));
            }
            let data = dataset.samples().iter().flat_map(|s| s.attributes.iter().map(|&b| b as f64)).collect();
            Ok(Labels {
                kind: TaskKind::Multilabel,
                columns: dataset.attribute_names().to_vec(),
                targets: Mat::from_vec(n, a, data)?,
            })
        }
        ProbeTask::FineGrained => {
            let c = dataset.samples().iter().map(|s| s.fine_label).max().unwrap_or(0) + 1;
            let mut t = Mat::zeros(n, c);
            for (i, s) in dataset.samples().iter().enumerate() {
                t[(i, s.fine_label)] = 1.0;
            }
            Ok(Labels {
                kind: TaskKind::Multiclass,
                columns: (0..c).map(|k| format!("class_{k}")).collect(),
                targets: t,
            })
        }
    }
}

/// Deterministic train/test split of `0..n`.
pub fn split_indices(n: usize, train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::Input(format!("need at least 2 samples to split, got {n}")));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!("train fraction {train_fraction} outside (0, 1)")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed::derive(seed, &[0x5350_4c54])));
    let n_train = ((train_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let test = idx.split_off(n_train);
    Ok((idx, test))
}

/// Linear head over standardized features.
#[derive(Clone, Debug)]
struct Head {
    w: Vec<f64>,
    b: Vec<f64>,
    mean: Vec<f64>,
    inv_std: Vec<f64>,
    d: usize,
    c: usize,
}

impl Head {
    fn new(train_feats: &[&[f64]], c: usize) -> Self {
        let d = train_feats[0].len();
        let n = train_feats.len() as f64;
        let mean: Vec<f64> = (0..d).map(|j| train_feats.iter().map(|f| f[j]).sum::<f64>() / n).collect();
        let inv_std = (0..d)
            .map(|j| {
                let var = train_feats.iter().map(|f| (f[j] - mean[j]).powi(2)).sum::<f64>() / n;
                1.0 / (var + 1e-6).sqrt()
            })
            .collect();
        Self { w: vec![0.0; d * c], b: vec![0.0; c], mean, inv_std, d, c }
    }

    fn standardize(&self, f: &[f64]) -> Vec<f64> {
        f.iter().zip(&self.mean).zip(&self.inv_std).map(|((x, m), s)| (x - m) * s).collect()
    }

    fn logits(&self, z: &[f64]) -> Vec<f64> {
        (0..self.c).map(|k| self.b[k] + (0..self.d).map(|j| z[j] * self.w[j * self.c + k]).sum::<f64>()).collect()
    }

    fn probs(&self, kind: TaskKind, f: &[f64]) -> Vec<f64> {
        let z = self.logits(&self.standardize(f));
        match kind {
            TaskKind::Multiclass => softmax(&z),
            _ => z.iter().map(|v| sigmoid(*v)).collect(),
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Gradient of the mean loss wrt the logits of one sample.
fn logit_grad(kind: TaskKind, z: &[f64], y: &[f64]) -> Vec<f64> {
    match kind {
        TaskKind::Multiclass => softmax(z).iter().zip(y).map(|(p, t)| p - t).collect(),
        _ => z.iter().zip(y).map(|(v, t)| (sigmoid(*v) - t) / z.len() as f64).collect(),
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, x: &mut [f64], g: &[f64], lr: f64, wd: f64) {
        self.t += 1;
        let (b1, b2) = (0.9f64, 0.999f64);
        let (c1, c2) = (1.0 - b1.powi(self.t), 1.0 - b2.powi(self.t));
        for i in 0..x.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g[i] * g[i];
            x[i] -= lr * ((self.m[i] / c1) / ((self.v[i] / c2).sqrt() + 1e-8) + wd * x[i]);
        }
    }
}

fn evaluate(
    head: &Head,
    feats: &[Vec<f64>],
    lab: &Labels,
    test: &[usize],
    keys: Vec<String>,
    threshold: f64,
) -> Result<ProbeOutcome> {
    let scores: Vec<Vec<f64>> = test.iter().map(|&i| head.probs(lab.kind, &feats[i])).collect();
    let truth = lab.targets.select_rows(test);
    let predictions = PredictionSet::new(lab.kind, keys, lab.columns.clone(), Mat::from_rows(&scores)?, truth)?;
    let report = match lab.kind {
        TaskKind::Multiclass => {
            let mut r = MetricReport::new();
            r.insert("Acc", top1_accuracy(&predictions)?)?;
            r
        }
        _ => MetricReport::from_attributes(&attribute_metrics(&predictions, threshold)?)?,
    };
    Ok(ProbeOutcome { report, predictions })
}

/// Trains a linear head on frozen features and scores the held-out split.
pub fn linear_probe<S: Real>(
    params: &ModelParams<S>,
    dataset: &Dataset<S>,
    task: ProbeTask,
    cfg: &ProbeConfig,
) -> Result<ProbeOutcome> {
    run(params, dataset, task, cfg, false)
}

/// Like [`linear_probe`] but also updates the encoder and patch embedding.
pub fn finetune<S: Real>(
    params: &ModelParams<S>,
    dataset: &Dataset<S>,
    task: ProbeTask,
    cfg: &ProbeConfig,
) -> Result<ProbeOutcome> {
    run(params, dataset, task, cfg, true)
}

fn run<S: Real>(
    params: &ModelParams<S>,
    dataset: &Dataset<S>,
    task: ProbeTask,
    cfg: &ProbeConfig,
    tune_encoder: bool,
) -> Result<ProbeOutcome> {
    if cfg.batch_size == 0 || !(cfg.lr >= 0.0) || !(cfg.finetune_lr >= 0.0) {
        return Err(Error::Config("probe batch size must be positive and learning rates nonnegative".into()));
    }
    let lab = labels(dataset, task)?;
    let (train, test) = split_indices(dataset.len(), cfg.train_fraction, cfg.seed)?;
    let feats0 = dataset_features(params, dataset)?;
    let rows0: Vec<Vec<f64>> = (0..feats0.rows()).map(|i| feats0.row(i).to_vec()).collect();
    let train_refs: Vec<&[f64]> = train.iter().map(|&i| rows0[i].as_slice()).collect();
    let mut head = Head::new(&train_refs, lab.columns.len());
    let mut head_opt = Adam::new(head.w.len() + head.b.len());
    let mut enc = params.clone();
    let enc_cfg = OptimConfig { lr: cfg.finetune_lr, weight_decay: cfg.weight_decay, ..OptimConfig::default() };
    let mut enc_opt = AdamState::new(&enc);
    let mut enc_steps = 0u64;

    let mut order = train.clone();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, &[0x5052_4f42, epoch as u64])));
        for chunk in order.chunks(cfg.batch_size) {
            let per_sample = chunk
                .par_iter()
                .map(|&i| {
                    let sample = &dataset.samples()[i];
                    let (f, pooled) = if tune_encoder {
                        let (f, p) = pooled_with_cache(&enc, &sample.image)?;
                        (f, Some(p))
                    } else {
                        (rows0[i].clone(), None)
                    };
                    let z = head.standardize(&f);
                    let dl = logit_grad(lab.kind, &head.logits(&z), lab.targets.row(i));
                    let mut gw = vec![0.0; head.w.len()];
                    for j in 0..head.d {
                        for k in 0..head.c {
                            gw[j * head.c + k] = z[j] * dl[k];
                        }
                    }
                    let enc_grad = match pooled {
                        Some(p) => {
                            let d_feat: Vec<f64> = (0..head.d)
                                .map(|j| {
                                    (0..head.c).map(|k| head.w[j * head.c + k] * dl[k]).sum::<f64>() * head.inv_std[j]
                                })
                                .collect();
                            let mut d_out = Mat::<S>::zeros(p.n_tokens + 1, head.d);
                            for r in 1..=p.n_tokens {
                                for (d, &g) in d_out.row_mut(r).iter_mut().zip(&d_feat) {
                                    *d = S::from_f64_lossy(g / p.n_tokens as f64);
                                }
                            }
                            let mut g = enc.zeros_like();
                            let d_tok = encode_backward(&p.cache, &enc, &d_out, &mut g);
                            embed_positions_backward(&p.patches, &p.positions, &d_tok, g.image_embedding_grad());
                            Some(g)
                        }
                        None => None,
                    };
                    Ok((gw, dl, enc_grad))
                })
                .collect::<Result<Vec<_>>>()?;
            let scale = 1.0 / chunk.len() as f64;
            let mut g = vec![0.0; head.w.len() + head.b.len()];
            let mut enc_total = tune_encoder.then(|| enc.zeros_like());
            for (gw, dl, eg) in &per_sample {
                for (a, b) in g.iter_mut().zip(gw.iter().chain(dl)) {
                    *a += b * scale;
                }
                if let (Some(acc), Some(eg)) = (enc_total.as_mut(), eg) {
                    acc.add_assign(eg);
                }
            }
            let mut flat: Vec<f64> = head.w.iter().chain(&head.b).copied().collect();
            head_opt.step(&mut flat, &g, cfg.lr, cfg.weight_decay);
            let (w, b) = flat.split_at(head.w.len());
            head.w.copy_from_slice(w);
            head.b.copy_from_slice(b);
            if let Some(mut eg) = enc_total {
                eg.scale(S::lit(scale));
                enc_steps += 1;
                adamw_update(&mut enc, &mut enc_opt, &eg, &enc_cfg, cfg.finetune_lr, enc_steps);
            }
        }
    }
    let feats: Vec<Vec<f64>> = if tune_encoder && enc_steps > 0 {
        let m = dataset_features(&enc, dataset)?;
        (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
    } else {
        rows0
    };
    let keys = test.iter().map(|&i| dataset.samples()[i].key.clone()).collect();
    evaluate(&head, &feats, &lab, &test, keys, cfg.threshold)
}

/// Re-identification style evaluation: the first image of each identity queries the rest.
pub fn retrieval_eval<S: Real>(params: &ModelParams<S>, dataset: &Dataset<S>, ks: &[usize]) -> Result<MetricReport> {
    let feats = dataset_features(params, dataset)?;
    let mut seen = std::collections::HashSet::new();
    let (mut q, mut g) = (Vec::new(), Vec::new());
    for (i, s) in dataset.samples().iter().enumerate() {
        if seen.insert(s.identity) {
            q.push(i);
        } else {
            g.push(i);
        }
    }
    if g.is_empty() {
        return Err(Error::Input("every identity has a single image; nothing to retrieve".into()));
    }
    let ids = |idx: &[usize]| idx.iter().map(|&i| dataset.samples()[i].identity).collect::<Vec<_>>();
    let m = retrieval_metrics(&feats.select_rows(&q), &feats.select_rows(&g), &ids(&q), &ids(&g), ks)?;
    MetricReport::from_retrieval(&m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ModelConfig;
    use crate::dataio::synth::{attribute_bits, attribute_names, quantize, random_pose, random_spec, render};
    use crate::dataio::Sample;

    fn dataset(n: usize, seed: u64) -> Dataset<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = (0..n)
            .map(|k| {
                let spec = random_spec(&mut rng);
                let pose = random_pose(&mut rng);
                let img = quantize(&render(&spec, &pose, 32, &mut rng).image);
                Sample::new(format!("s{k}"), img).with_labels(attribute_bits(&spec), (k % 5) as u64, spec.fine_label())
            })
            .collect();
        Dataset::from_samples(attribute_names(), samples).unwrap()
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let (a, b) = split_indices(10, 0.8, 3).unwrap();
        assert_eq!((a.len(), b.len()), (8, 2));
        assert_eq!(split_indices(10, 0.8, 3).unwrap(), (a.clone(), b.clone()));
        let mut all = [a, b].concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert!(split_indices(1, 0.5, 0).is_err());
    }

    #[test]
    fn probe_is_deterministic_and_learns_single_class() {
        let cfg = ModelConfig::tiny();
        let params = ModelParams::init(&cfg, 1).unwrap();
        let ds = dataset(24, 2);
        let pc = ProbeConfig { epochs: 30, ..Default::default() };
        let a = linear_probe(&params, &ds, ProbeTask::Attribute, &pc).unwrap();
        assert_eq!(a, linear_probe(&params, &ds, ProbeTask::Attribute, &pc).unwrap());
        for name in ["mA", "Acc", "Prec", "Rec", "F1"] {
            assert!(a.report.get(name).is_some());
        }
        let single: Vec<Sample<f64>> = ds
            .samples()
            .iter()
            .cloned()
            .map(|s| {
                let a = s.attributes.clone();
                s.with_labels(a, 0, 5)
            })
            .collect();
        let single = Dataset::from_samples(attribute_names(), single).unwrap();
        let r = linear_probe(&params, &single, ProbeTask::FineGrained, &pc).unwrap();
        assert_eq!(r.report.get("Acc"), Some(1.0));
    }

    #[test]
    fn zero_epochs_fine_tune_equals_untrained_probe() {
        let cfg = ModelConfig::tiny();
        let params = ModelParams::init(&cfg, 1).unwrap();
        let ds = dataset(12, 3);
        let pc = ProbeConfig { epochs: 0, ..Default::default() };
        let p = linear_probe(&params, &ds, ProbeTask::FineGrained, &pc).unwrap();
        let f = finetune(&params, &ds, ProbeTask::FineGrained, &pc).unwrap();
        assert_eq!(p, f);
        let t = finetune(&params, &ds, ProbeTask::Attribute, &ProbeConfig { epochs: 2, ..pc.clone() }).unwrap();
        assert_eq!(t, finetune(&params, &ds, ProbeTask::Attribute, &ProbeConfig { epochs: 2, ..pc }).unwrap());
    }

    #[test]
    fn attribute_task_needs_attributes() {
        let cfg = ModelConfig::tiny();
        let params = ModelParams::init(&cfg, 1).unwrap();
        let ds = Dataset::from_samples(
            vec![],
            dataset(4, 1).samples().iter().cloned().map(|s| s.with_labels(vec![], 0, 0)).collect(),
        )
        .unwrap();
        assert!(matches!(
            linear_probe(&params, &ds, ProbeTask::Attribute, &ProbeConfig::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn encoder_gradient_of_pooled_features_is_exact() {
        // finite-difference check of the pooling backward used by fine-tuning
        let cfg = ModelConfig::tiny();
        let params = ModelParams::<f64>::init(&cfg, 4).unwrap();
        let img = dataset(1, 5).samples()[0].image.clone();
        let probe: Vec<f64> = (0..cfg.d_enc).map(|j| ((j * 7 % 5) as f64 - 2.0) * 0.3).collect();
        let f = |p: &ModelParams<f64>| {
            encoder_features(p, &img).unwrap().iter().zip(&probe).map(|(a, b)| a * b).sum::<f64>()
        };
        let (_, pooled) = pooled_with_cache(&params, &img).unwrap();
        let mut d_out = Mat::zeros(pooled.n_tokens + 1, cfg.d_enc);
        for r in 1..=pooled.n_tokens {
            d_out.row_mut(r).iter_mut().zip(&probe).for_each(|(d, p)| *d = p / pooled.n_tokens as f64);
        }
        let mut g = params.zeros_like();
        let d_tok = encode_backward(&pooled.cache, &params, &d_out, &mut g);
        embed_positions_backward(&pooled.patches, &pooled.positions, &d_tok, g.image_embedding_grad());
        for c in crate::numcheck::check_param_gradients(&params, &g, 1e-5, 1e-7, f) {
            assert!(c.rel_err <= 1e-5, "{}: {}", c.name, c.rel_err);
        }
    }

    #[test]
    fn retrieval_eval_reports_rank_metrics() {
        let cfg = ModelConfig::tiny();
        let params = ModelParams::init(&cfg, 1).unwrap();
        let r = retrieval_eval(&params, &dataset(15, 6), &[1, 5]).unwrap();
        assert_eq!(r.get_count("queries"), Some(5));
        assert!(r.get("Rank-1").unwrap() <= r.get("Rank-5").unwrap());
    }
}
