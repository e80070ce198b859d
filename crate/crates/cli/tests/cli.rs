use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = "model:
  image_size: 32
  patch_size: 8
  d_enc: 16
  d_dec: 8
  enc_depth: 2
  dec_depth: 1
  n_heads_enc: 2
  n_heads_dec: 2
  distill_dim: 8
  sem_dim: 8
train:
  epochs: 2
  batch_size: 4
probe:
  epochs: 5
";

fn vmae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vmae")).args(args).env_remove("VMAE_SEED").output().unwrap()
}

fn vmae_env(args: &[&str], key: &str, val: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vmae")).args(args).env(key, val).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn ok(o: Output) -> String {
    assert_eq!(code(&o), 0, "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(tree(&p));
        } else {
            out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
        }
    }
    out
}

fn gen(dir: &Path, n: usize, size: usize) {
    ok(vmae(&["gen-data", "--n", &n.to_string(), "--size", &size.to_string(), "--seed", "1", "--out", s(dir)]));
}

fn config(dir: &Path, extra: &str) -> PathBuf {
    let p = dir.join("run.yaml");
    std::fs::write(&p, format!("{TINY}{extra}")).unwrap();
    p
}

#[test]
fn gen_data_writes_images_and_manifest_reproducibly() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    gen(&a, 64, 32);
    gen(&b, 64, 32);
    let ta = tree(&a);
    let pngs = ta.keys().filter(|k| k.to_str().unwrap().starts_with("image_")).count();
    assert_eq!(pngs, 64);
    assert!(ta.contains_key(Path::new("manifest.tsv")));
    assert!(!ta.contains_key(Path::new("run.lock")));
    assert_eq!(ta, tree(&b));
}

#[test]
fn caption_fraction_is_honoured() {
    let t = tempfile::tempdir().unwrap();
    ok(vmae(&["gen-data", "--n", "1000", "--size", "16", "--caption-frac", "0.3", "--out", s(t.path())]));
    let text = std::fs::read_to_string(t.path().join("manifest.tsv")).unwrap();
    let captioned = text.lines().skip(1).filter(|l| l.split('\t').nth(2) != Some("-")).count();
    assert!((280..=320).contains(&captioned), "{captioned}");
}

#[test]
fn usage_and_io_failures_have_distinct_exit_codes() {
    let t = tempfile::tempdir().unwrap();
    assert_eq!(code(&vmae(&["gen-data", "--n", "many", "--out", s(t.path())])), 2);
    assert_eq!(code(&vmae(&["gen-data", "--caption-frac", "1.5", "--out", s(t.path())])), 2);
    assert_eq!(code(&vmae(&["frobnicate"])), 2);
    let file = t.path().join("file");
    std::fs::write(&file, "x").unwrap();
    assert_eq!(code(&vmae(&["gen-data", "--n", "4", "--out", s(&file.join("sub"))])), 3);
    let missing = t.path().join("nope.vmae");
    let o = vmae(&["eval", "--checkpoint", s(&missing), "--data", s(t.path()), "--task", "attribute"]);
    assert_eq!(code(&o), 3);
    let o =
        vmae(&["reconstruct", "--checkpoint", s(&missing), "--image", "x.png", "--out", s(&t.path().join("r.png"))]);
    assert_eq!(code(&o), 3);
}

#[test]
fn config_errors_name_the_key() {
    let t = tempfile::tempdir().unwrap();
    gen(&t.path().join("d"), 4, 32);
    let cfg = config(t.path(), "dtype: f64\nsurprise: 1\n");
    let o = vmae(&["pretrain", "--config", s(&cfg), "--data", s(&t.path().join("d")), "--out", s(&t.path().join("o"))]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("surprise"));
}

#[test]
fn pretrain_resumes_to_the_same_trajectory() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("d");
    gen(&data, 8, 32);
    let cfg = config(t.path(), "");
    let (full, cut) = (t.path().join("full"), t.path().join("cut"));
    ok(vmae(&["pretrain", "--config", s(&cfg), "--data", s(&data), "--out", s(&full)]));
    ok(vmae(&["pretrain", "--config", s(&cfg), "--data", s(&data), "--out", s(&cut), "--stop-after-epoch", "1"]));
    assert_eq!(std::fs::read_to_string(cut.join("metrics.csv")).unwrap().lines().count(), 3);
    ok(vmae(&["pretrain", "--config", s(&cfg), "--data", s(&data), "--out", s(&cut), "--resume"]));
    for f in ["metrics.csv", "last.vmae", "epoch_0002.vmae"] {
        assert_eq!(std::fs::read(full.join(f)).unwrap(), std::fs::read(cut.join(f)).unwrap(), "{f}");
    }
    assert!(!cut.join("run.lock").exists());
}

#[test]
fn seed_env_overrides_config_and_lock_blocks_writers() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("d");
    gen(&data, 4, 32);
    let cfg = config(t.path(), "");
    let args = |out: &Path| {
        vec![
            "pretrain".to_string(),
            "--config".into(),
            s(&cfg).into(),
            "--data".into(),
            s(&data).into(),
            "--out".into(),
            s(out).into(),
        ]
    };
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    let run = |out: &Path, seed: &str| {
        let v = args(out);
        ok(vmae_env(&v.iter().map(String::as_str).collect::<Vec<_>>(), "VMAE_SEED", seed))
    };
    run(&a, "11");
    run(&b, "12");
    assert!(std::fs::read_to_string(a.join("config.yaml")).unwrap().contains("seed: 11"));
    assert_ne!(std::fs::read(a.join("metrics.csv")).unwrap(), std::fs::read(b.join("metrics.csv")).unwrap());
    std::fs::write(a.join("run.lock"), "1").unwrap();
    let v = args(&a);
    let o = vmae(&v.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(code(&o), 3);
    let mut v = args(&a);
    v.push("--break-lock".into());
    ok(vmae(&v.iter().map(String::as_str).collect::<Vec<_>>()));
}

#[test]
fn divergence_exits_with_numeric_code() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("d");
    gen(&data, 4, 32);
    let cfg = config(t.path(), "");
    let text = std::fs::read_to_string(&cfg).unwrap().replace(
        "  batch_size: 4\n",
        "  batch_size: 1\n  max_consecutive_faults: 0\n  optim:\n    lr: 1.0e30\n    warmup_fraction: 0.0\n",
    );
    std::fs::write(&cfg, text).unwrap();
    let o = vmae(&["pretrain", "--config", s(&cfg), "--data", s(&data), "--out", s(&t.path().join("o"))]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
}

fn csv_rows(path: &Path) -> Vec<Vec<f64>> {
    let text = std::fs::read_to_string(path).unwrap();
    text.lines().skip(1).map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect()
}

#[test]
fn loss_grid_logs_zero_for_disabled_losses() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("d");
    gen(&data, 8, 32);
    let cfg = config(t.path(), "");
    let out = t.path().join("grid");
    let table =
        ok(vmae(&["ablate", "--grid", "loss", "--probe", "--config", s(&cfg), "--data", s(&data), "--out", s(&out)]));
    assert_eq!(table.lines().count(), 7);
    let rows = csv_rows(&out.join("loss/l_r/metrics.csv"));
    assert_eq!(rows.len(), 4);
    for r in &rows {
        assert!(r[1] > 0.0);
        assert_eq!(&r[2..6], &[0.0; 4]);
    }
    let all = csv_rows(&out.join("loss/all/metrics.csv"));
    assert!(all.iter().all(|r| r[2] > 0.0 && r[3] > 0.0));
    assert!(out.join("loss/all/probe.txt").exists());
    assert!(out.join("loss/l_r+l_cf+l_cs/last.vmae").exists());
}

#[test]
fn ratio_sweep_masks_the_expected_counts() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("d");
    gen(&data, 2, 112);
    let cfg = config(t.path(), "");
    let text = std::fs::read_to_string(&cfg)
        .unwrap()
        .replace("image_size: 32", "image_size: 112")
        .replace("epochs: 2", "epochs: 1");
    std::fs::write(&cfg, text).unwrap();
    let out = t.path().join("sweep");
    ok(vmae(&["ablate", "--grid", "ratio", "--config", s(&cfg), "--data", s(&data), "--out", s(&out)]));
    for (ratio, count) in [("0.25", 49), ("0.5", 98), ("0.75", 147), ("0.85", 167)] {
        let cell = std::fs::read_to_string(out.join("ratio").join(ratio).join("cell.yaml")).unwrap();
        assert!(cell.contains("n_patches: 196"), "{cell}");
        assert!(cell.contains(&format!("masked_per_image: {count}")), "{cell}");
        assert!(out.join("ratio").join(ratio).join("last.vmae").exists());
    }
}

#[test]
fn eval_scores_fixtures_and_checkpoints() {
    let t = tempfile::tempdir().unwrap();
    let dump = t.path().join("perfect.tsv");
    std::fs::write(
        &dump,
        "#task\tmultilabel\nkey\tscore:a\tscore:b\ttruth:a\ttruth:b\nx\t0.9\t0.1\t1\t0\ny\t0.2\t0.8\t0\t1\nz\t0.7\t0.6\t1\t1\n",
    )
    .unwrap();
    let text = ok(vmae(&["eval", "--predictions", s(&dump)]));
    for m in ["mA", "Acc", "Prec", "Rec", "F1"] {
        assert!(text.contains(&format!("{m} = 1")), "{text}");
    }
    let conf = t.path().join("conf.txt");
    std::fs::write(&conf, "5 0 0\n0 3 0\n0 0 2\n").unwrap();
    let text = ok(vmae(&["eval", "--confusion", s(&conf), "--out", s(&t.path().join("seg.txt"))]));
    assert!(text.contains("mIoU = 1") && text.contains("mAcc = 1"), "{text}");
    assert_eq!(std::fs::read_to_string(t.path().join("seg.txt")).unwrap(), text);

    let data = t.path().join("d");
    gen(&data, 12, 32);
    let cfg = config(t.path(), "");
    let run = t.path().join("run");
    ok(vmae(&["pretrain", "--config", s(&cfg), "--data", s(&data), "--out", s(&run)]));
    let ckpt = run.join("last.vmae");
    let preds = t.path().join("preds.tsv");
    let a = ok(vmae(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&data),
        "--task",
        "attribute",
        "--config",
        s(&cfg),
        "--dump-predictions",
        s(&preds),
    ]));
    assert!(a.contains("mA = "));
    let rescored = ok(vmae(&["eval", "--predictions", s(&preds)]));
    assert_eq!(a, rescored);
    let f = ok(vmae(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&data),
        "--task",
        "fine-grained",
        "--mode",
        "finetune",
        "--config",
        s(&cfg),
    ]));
    assert!(f.contains("Acc = "));
    let r = ok(vmae(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--task", "retrieval", "--ks", "1,3"]));
    assert!(r.contains("mAP = ") && r.contains("Rank-3 = "), "{r}");
    assert_eq!(code(&vmae(&["eval", "--data", s(&data)])), 2);
}

#[test]
fn reconstruct_writes_four_panels() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("d");
    gen(&data, 4, 32);
    let cfg = config(t.path(), "");
    let run = t.path().join("run");
    ok(vmae(&["pretrain", "--config", s(&cfg), "--data", s(&data), "--out", s(&run)]));
    let img = data.join("image_00000.png");
    let out = t.path().join("panels/r.png");
    ok(vmae(&[
        "reconstruct",
        "--checkpoint",
        s(&run.join("last.vmae")),
        "--image",
        s(&img),
        "--out",
        s(&out),
        "--mask-ratio",
        "0",
    ]));
    let panels = image::open(&out).unwrap().to_rgb8();
    let orig = image::open(&img).unwrap().to_rgb8();
    assert_eq!(panels.dimensions(), (4 * orig.width(), orig.height()));
    for y in 0..orig.height() {
        for x in 0..orig.width() {
            assert_eq!(panels.get_pixel(x, y), orig.get_pixel(x, y));
            assert_eq!(panels.get_pixel(2 * orig.width() + x, y), orig.get_pixel(x, y));
        }
    }
    ok(vmae(&["reconstruct", "--checkpoint", s(&run.join("last.vmae")), "--image", s(&img), "--out", s(&out)]));
    assert_eq!(image::open(&out).unwrap().width(), 128);
}
