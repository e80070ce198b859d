use std::path::{Path, PathBuf};

use vmae_core::dataio::{
    generate_synthetic, ingest_folder, load_manifest, png, Dataset, DatasetManifest, SynthOptions, MANIFEST_NAME,
};
use vmae_core::downstream::{
    attribute_metrics, finetune, linear_probe, read_confusion, read_predictions, retrieval_eval, segmentation_metrics,
    top1_accuracy, write_predictions, MetricReport, ProbeOutcome, ProbeTask, TaskKind,
};
use vmae_core::pretrainer::{
    load_checkpoint, pretrain as run_pretrain, reconstruct as run_reconstruct, LossToggles, PretrainOptions,
    PretrainSummary, TrainState,
};
use vmae_core::scalar::Real;
use vmae_core::tokenizer::masked_count;

use crate::config::{Dtype, RunConfig};
use crate::error::{CliError, CliResult};
use crate::lock::RunLock;
use crate::{AblateArgs, EvalArgs, GenDataArgs, Grid, Mode, PretrainArgs, ReconstructArgs, RunArgs, Task};

/// Mask ratios of the sweep.
pub const RATIO_SWEEP: [f64; 4] = [0.25, 0.5, 0.75, 0.85];

fn write(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn gen_data(a: GenDataArgs) -> CliResult<()> {
    if !(0.0..=1.0).contains(&a.caption_frac) {
        return Err(CliError::Usage(format!("--caption-frac {} outside [0, 1]", a.caption_frac)));
    }
    let opts = SynthOptions {
        n: a.n,
        image_size: a.size,
        seed: a.seed,
        caption_fraction: a.caption_frac,
        images_per_identity: a.images_per_identity,
    };
    let _lock = RunLock::acquire(&a.out, false)?;
    let m = generate_synthetic(&opts, &a.out)?;
    let captioned = m.records().iter().filter(|r| r.caption.is_some()).count();
    println!("wrote {} images ({captioned} captioned) to {}", m.len(), a.out.display());
    Ok(())
}

fn open_manifest(path: &Path) -> CliResult<DatasetManifest> {
    if path.is_dir() {
        let m = path.join(MANIFEST_NAME);
        if m.exists() {
            return Ok(load_manifest(&m)?);
        }
        return Ok(ingest_folder(path)?);
    }
    Ok(load_manifest(path)?)
}

fn data_path(cli: Option<&Path>, cfg: &RunConfig) -> CliResult<PathBuf> {
    cli.map(Path::to_path_buf)
        .or_else(|| cfg.data.clone())
        .ok_or_else(|| CliError::Usage("no dataset: pass --data or set `data` in the config".into()))
}

fn train_cell<S: Real>(
    cfg: &RunConfig,
    manifest: &DatasetManifest,
    out: &Path,
    opts: &PretrainOptions,
) -> CliResult<PretrainSummary> {
    let dataset = Dataset::<S>::load(manifest)?;
    let embedder = cfg.embedder.build(cfg.model.sem_dim)?;
    write(&out.join("config.yaml"), &cfg.to_yaml())?;
    Ok(run_pretrain(&cfg.model, &cfg.train, &dataset, &embedder, out, opts)?)
}

fn train_any(
    cfg: &RunConfig,
    manifest: &DatasetManifest,
    out: &Path,
    opts: &PretrainOptions,
) -> CliResult<PretrainSummary> {
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    match cfg.dtype {
        Dtype::F32 => train_cell::<f32>(cfg, manifest, out, opts),
        Dtype::F64 => train_cell::<f64>(cfg, manifest, out, opts),
    }
}

fn print_summary(s: &PretrainSummary) {
    println!("steps {} epochs {} faults {} checkpoint {}", s.steps, s.epochs, s.faults, s.checkpoint.display());
    if let Some(b) = &s.last {
        println!(
            "last l_r {:.6} l_mim {:.6} l_cls {:.6} l_cf {:.6} l_cs {:.6} total {:.6}",
            b.l_r, b.l_mim, b.l_cls, b.l_cf, b.l_cs, b.total
        );
    }
}

fn prepare(run: &RunArgs) -> CliResult<(RunConfig, DatasetManifest, RunLock)> {
    let cfg = RunConfig::load(run.config.as_deref())?;
    let manifest = open_manifest(&data_path(run.data.as_deref(), &cfg)?)?;
    let lock = RunLock::acquire(&run.out, run.break_lock)?;
    Ok((cfg, manifest, lock))
}

pub fn pretrain(a: PretrainArgs) -> CliResult<()> {
    let (cfg, manifest, _lock) = prepare(&a.run)?;
    let opts = PretrainOptions { resume: a.resume, stop_after_epoch: a.stop_after_epoch };
    print_summary(&train_any(&cfg, &manifest, &a.run.out, &opts)?);
    Ok(())
}

fn probe_cell(cfg: &RunConfig, manifest: &DatasetManifest, checkpoint: &Path) -> CliResult<MetricReport> {
    let state: TrainState<f64> = load_checkpoint(checkpoint)?;
    let dataset = Dataset::<f64>::load(manifest)?;
    Ok(linear_probe(&state.params, &dataset, ProbeTask::Attribute, &cfg.probe)?.report)
}

pub fn ablate(a: AblateArgs) -> CliResult<()> {
    let (base, manifest, _lock) = prepare(&a.run)?;
    let mut cells: Vec<(String, RunConfig, String)> = Vec::new();
    if matches!(a.grid, Grid::Loss | Grid::All) {
        for (label, toggles) in LossToggles::ablation_rows() {
            let mut cfg = base.clone();
            cfg.train.loss.toggles = toggles;
            cells.push((format!("loss/{label}"), cfg, format!("toggles: {label}\n")));
        }
    }
    if matches!(a.grid, Grid::Ratio | Grid::All) {
        for ratio in RATIO_SWEEP {
            let mut cfg = base.clone();
            cfg.model.mask_ratio = ratio;
            let n = cfg.model.n_patches();
            let info = format!("mask_ratio: {ratio}\nn_patches: {n}\nmasked_per_image: {}\n", masked_count(n, ratio));
            cells.push((format!("ratio/{ratio}"), cfg, info));
        }
    }
    let mut table = String::from("cell\tsteps\tl_r\tl_mim\tl_cls\tl_cf\tl_cs\ttotal\tprobe_mA\tprobe_Acc\n");
    for (name, cfg, info) in cells {
        let out = a.run.out.join(&name);
        log::info!("ablation cell {name}");
        let s = train_any(&cfg, &manifest, &out, &PretrainOptions::default())?;
        write(&out.join("cell.yaml"), &info)?;
        let Some(b) = s.last else {
            return Err(CliError::Usage(format!("cell {name} ran no steps; set train.epochs above 0")));
        };
        let (mut ma, mut acc) = (String::from("-"), String::from("-"));
        if a.probe {
            let r = probe_cell(&cfg, &manifest, &s.checkpoint)?;
            r.write(&out.join("probe.txt"))?;
            ma = format!("{:.6}", r.get("mA").unwrap_or(0.0));
            acc = format!("{:.6}", r.get("Acc").unwrap_or(0.0));
        }
        table.push_str(&format!(
            "{name}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{ma}\t{acc}\n",
            s.steps, b.l_r, b.l_mim, b.l_cls, b.l_cf, b.l_cs, b.total
        ));
    }
    write(&a.run.out.join("ablation.tsv"), &table)?;
    print!("{table}");
    Ok(())
}

fn score_dump(path: &Path, threshold: f64) -> CliResult<MetricReport> {
    let pred = read_predictions(path)?;
    Ok(match pred.task {
        TaskKind::Multilabel => MetricReport::from_attributes(&attribute_metrics(&pred, threshold)?)?,
        TaskKind::Multiclass => {
            let mut r = MetricReport::new();
            r.insert("Acc", top1_accuracy(&pred)?)?;
            r
        }
        other => return Err(CliError::Usage(format!("prediction dumps of {other:?} tasks cannot be re-scored"))),
    })
}

pub fn eval(a: EvalArgs) -> CliResult<()> {
    if !(a.threshold > 0.0 && a.threshold < 1.0) {
        return Err(CliError::Usage(format!("--threshold {} outside (0, 1)", a.threshold)));
    }
    let report = if let Some(path) = &a.confusion {
        MetricReport::from_segmentation(&segmentation_metrics(&read_confusion(path)?)?)?
    } else if let Some(path) = &a.predictions {
        score_dump(path, a.threshold)?
    } else if let (Some(ckpt), Some(data), Some(task)) = (&a.checkpoint, &a.data, a.task) {
        let mut cfg = RunConfig::load(a.config.as_deref())?;
        cfg.probe.threshold = a.threshold;
        let state: TrainState<f64> = load_checkpoint(ckpt)?;
        let dataset = Dataset::<f64>::load(&open_manifest(data)?)?;
        let run = |t| -> CliResult<ProbeOutcome> {
            Ok(match a.mode {
                Mode::Probe => linear_probe(&state.params, &dataset, t, &cfg.probe)?,
                Mode::Finetune => finetune(&state.params, &dataset, t, &cfg.probe)?,
            })
        };
        let outcome = match task {
            Task::Attribute => Some(run(ProbeTask::Attribute)?),
            Task::FineGrained => Some(run(ProbeTask::FineGrained)?),
            Task::Retrieval => None,
        };
        match outcome {
            Some(o) => {
                if let Some(p) = &a.dump_predictions {
                    write_predictions(&o.predictions, p)?;
                }
                o.report
            }
            None => retrieval_eval(&state.params, &dataset, &a.ks)?,
        }
    } else {
        return Err(CliError::Usage("pass --confusion, --predictions, or --checkpoint with --data and --task".into()));
    };
    print!("{}", report.to_text());
    if let Some(out) = &a.out {
        report.write(out)?;
    }
    Ok(())
}

pub fn reconstruct(a: ReconstructArgs) -> CliResult<()> {
    let state: TrainState<f64> = load_checkpoint(&a.checkpoint)?;
    let image = png::read_rgb::<f64>(&a.image)?;
    let ratio = a.mask_ratio.unwrap_or(state.params.config().mask_ratio);
    let panels = run_reconstruct(&state.params, &image, ratio, a.seed)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    png::write(&panels.stacked(), &a.out)?;
    println!("masked {} of {} patches, wrote {}", panels.mask.n_masked(), panels.mask.n_tokens, a.out.display());
    Ok(())
}
