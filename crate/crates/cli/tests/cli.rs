//! End-to-end runs of the `lgformer` binary on a tiny model.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use lgformer::evalkit::{evaluate, miou_macc};
use lgformer::model::Upsample;
use lgformer::synthshapes::dataset_read;
use lgformer::Model32;
use lgformer_cli::images::parse_netpbm;

const TINY: &str = r#"{
  "model": {
    "image_h": 32, "image_w": 32, "stem_stride": 2, "pixel_channels": 8,
    "sp_channels": 16, "trunk_depth": 2, "sca_before": [1], "branch_depth": 2,
    "gca_stages": 1, "sca_heads": 2, "gca_heads": 2, "vit_heads": 2,
    "mlp_ratio": 2, "group_ratio": 4
  },
  "data": { "height": 32, "width": 32, "seed": 3 },
  "train": {
    "iterations": 20, "batch_size": 2, "base_lr": 0.001, "eval_interval": 10,
    "train_samples": 12, "val_samples": 6
  }
}"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lgformer"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
    data: PathBuf,
    run_dir: PathBuf,
}

/// One trained tiny model shared by the tests below.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let config = root.join("tiny.json");
        std::fs::write(&config, TINY).unwrap();
        let data = root.join("eval.bin");
        ok(&["gen", "--config", s(&config), "--out", s(&data), "--count", "6", "--seed", "11"]);
        let run_dir = root.join("run");
        ok(&["train", "--config", s(&config), "--out", s(&run_dir)]);
        Fixture { _dir: dir, root, config, data, run_dir }
    })
}

#[test]
fn gen_writes_readable_reproducible_files() {
    let f = fixture();
    let a = f.root.join("gen_a.bin");
    let b = f.root.join("gen_b.bin");
    let text = ok(&["gen", "--config", s(&f.config), "--out", s(&a), "--count", "100", "--seed", "5"]);
    ok(&["gen", "--config", s(&f.config), "--out", s(&b), "--count", "100", "--seed", "5"]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(dataset_read(&a).unwrap().len(), 100);

    let (mut part, mut obj) = (0u64, 0u64);
    for line in text.lines().filter(|l| l.starts_with("part,") || l.starts_with("object,")) {
        let n: u64 = line.rsplit(',').next().unwrap().parse().unwrap();
        if line.starts_with("part,") {
            part += n;
        } else {
            obj += n;
        }
    }
    assert_eq!((part, obj), (100 * 32 * 32, 100 * 32 * 32));
}

#[test]
fn train_log_schedule_and_echo() {
    let f = fixture();
    let log = std::fs::read_to_string(f.run_dir.join("train.csv")).unwrap();
    let rows: Vec<Vec<&str>> = log.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 20);
    for (i, r) in rows.iter().enumerate() {
        let lr: f64 = r[1].parse().unwrap();
        let want = if i < 18 { 1e-3 } else if i < 19 { 1e-4 } else { 1e-5 };
        assert_eq!(lr, want, "iteration {i}");
        assert_eq!(!r[4].is_empty(), i == 9 || i == 19);
    }
    let first: f64 = rows[0][2].parse().unwrap();
    let last: f64 = rows[19][2].parse().unwrap();
    assert!(last < first, "loss {first} -> {last}");

    // the echo reproduces the run when fed back verbatim
    let echo = f.run_dir.join("config.json");
    let mut cfg = lgformer_cli::config::RunConfig::load(Some(&echo)).unwrap();
    let again = f.root.join("again");
    cfg.out_dir = again.clone();
    let cfg_path = f.root.join("again.json");
    std::fs::write(&cfg_path, cfg.canonical_json()).unwrap();
    ok(&["train", "--config", s(&cfg_path)]);
    for name in ["train.csv", "model.ckpt", "final_summary.csv"] {
        assert_eq!(std::fs::read(again.join(name)).unwrap(), std::fs::read(f.run_dir.join(name)).unwrap(), "{name}");
    }
}

fn summary(path: &Path) -> Vec<(String, Vec<f64>)> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let mut it = l.split(',');
            (it.next().unwrap().to_string(), it.map(|v| v.parse().unwrap()).collect())
        })
        .collect()
}

#[test]
fn eval_matches_library_and_writes_both_modes() {
    let f = fixture();
    let out = f.root.join("eval");
    let ckpt = f.run_dir.join("model.ckpt");
    for mode in ["assoc", "bilinear"] {
        ok(&["eval", "--checkpoint", s(&ckpt), "--data", s(&f.data), "--out", s(&out), "--upsample", mode]);
    }
    let model = Model32::load(&ckpt).unwrap();
    let samples = dataset_read(&f.data).unwrap();
    for (mode, up) in [("assoc", Upsample::Assoc), ("bilinear", Upsample::Bilinear)] {
        let rows = summary(&out.join(format!("eval_{mode}_summary.csv")));
        let r = evaluate(&model, &samples, up).unwrap();
        let want = [
            miou_macc(&r.part).unwrap().miou,
            miou_macc(&r.part).unwrap().macc,
            miou_macc(&r.obj).unwrap().miou,
            miou_macc(&r.obj).unwrap().macc,
            r.part_boundary,
            r.obj_boundary,
        ];
        for ((_, got), want) in rows.iter().zip(want) {
            assert!((got[0] - want).abs() <= 5e-7, "{mode}: {} vs {want}", got[0]);
        }
        assert!(out.join(format!("eval_{mode}_part.csv")).exists());
    }
}

#[test]
fn eval_occlusion_reports_drops() {
    let f = fixture();
    let out = f.root.join("occ");
    let ckpt = f.run_dir.join("model.ckpt");
    ok(&["eval", "--checkpoint", s(&ckpt), "--data", s(&f.data), "--out", s(&out), "--occlude"]);
    let rows = summary(&out.join("eval_assoc_summary.csv"));
    assert_eq!(rows.len(), 6);
    for (name, v) in &rows {
        assert_eq!(v.len(), 3, "{name}");
        assert!((v[0] - v[1] - v[2]).abs() <= 2e-6);
    }
    let cov = std::fs::read_to_string(out.join("occlusion.csv")).unwrap();
    for line in cov.lines().skip(1) {
        let c: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert!((0.18..=0.42).contains(&c), "{line}");
    }
}

#[test]
fn emerge_maps_and_monotone_topk() {
    let f = fixture();
    let ckpt = f.run_dir.join("model.ckpt");
    for (level, units) in [("superpixel", 16u8), ("group", 4)] {
        let out = f.root.join(format!("emerge_{level}"));
        ok(&["emerge", "--checkpoint", s(&ckpt), "--data", s(&f.data), "--out", s(&out), "--level", level, "--topk", "6"]);
        let (w, h, ch, ids) = parse_netpbm(&std::fs::read(out.join(format!("{level}_ids_0.pgm"))).unwrap()).unwrap();
        assert_eq!((w, h, ch), (32, 32, 1));
        assert!(ids.iter().all(|&v| v < units));
        let csv = std::fs::read_to_string(out.join(format!("emerge_{level}.csv"))).unwrap();
        let mut per_class: std::collections::BTreeMap<String, Vec<f64>> = Default::default();
        for line in csv.lines().skip(1) {
            let v: Vec<&str> = line.split(',').collect();
            if v[2] != "nan" {
                per_class.entry(v[1].to_string()).or_default().push(v[2].parse().unwrap());
            }
        }
        for (class, series) in per_class.iter().filter(|(c, _)| c.as_str() != "mean") {
            assert!(series.windows(2).all(|p| p[1] >= p[0]), "{level}/{class}: {series:?}");
        }
    }
}

#[test]
fn dump_writes_documented_files() {
    let f = fixture();
    let out = f.root.join("dump");
    let ckpt = f.run_dir.join("model.ckpt");
    ok(&["dump", "--checkpoint", s(&ckpt), "--data", s(&f.data), "--index", "2", "--out", s(&out)]);
    let mut names: Vec<String> = [
        "input.ppm",
        "part_pred.ppm",
        "obj_pred.ppm",
        "part_gt.ppm",
        "obj_gt.ppm",
        "superpixel_ids.pgm",
        "group_ids.pgm",
        "superpixel_overlay.ppm",
        "assoc_pix_sp_max.pgm",
        "assoc_pix_sp.csv",
        "assoc_sp_group.csv",
        "chain_groups.csv",
        "chain_superpixels.ppm",
        "chain_pixels.ppm",
        "chain_image.ppm",
    ]
    .map(String::from)
    .to_vec();
    names.extend((0..4).map(|g| format!("assoc_sp_group_{g}.pgm")));
    for n in &names {
        assert!(out.join(n).exists(), "{n} missing");
    }
    for n in ["input.ppm", "part_pred.ppm", "obj_pred.ppm", "chain_image.ppm"] {
        let (w, h, ch, _) = parse_netpbm(&std::fs::read(out.join(n)).unwrap()).unwrap();
        assert_eq!((w, h, ch), (32, 32, 3), "{n}");
    }
    let (w, h, _, _) = parse_netpbm(&std::fs::read(out.join("chain_superpixels.ppm")).unwrap()).unwrap();
    assert_eq!((w, h), (4, 4));

    let pix = std::fs::read_to_string(out.join("assoc_pix_sp.csv")).unwrap();
    let mut sums = vec![0.0f64; 256];
    for line in pix.lines().skip(1) {
        let v: Vec<&str> = line.split(',').collect();
        let w: f64 = v[2].parse().unwrap();
        assert!(w >= 0.0);
        sums[v[0].parse::<usize>().unwrap()] += w;
    }
    assert!(sums.iter().all(|t| (t - 1.0).abs() <= 1e-9));
    let grp = std::fs::read_to_string(out.join("assoc_sp_group.csv")).unwrap();
    for line in grp.lines().skip(1) {
        let t: f64 = line.split(',').skip(1).map(|v| v.parse::<f64>().unwrap()).sum();
        assert!((t - 1.0).abs() <= 1e-9);
    }

    // a PPM input works the same way
    let img_out = f.root.join("dump_img");
    ok(&["dump", "--checkpoint", s(&ckpt), "--image", s(&out.join("input.ppm")), "--out", s(&img_out)]);
    assert_eq!(std::fs::read(img_out.join("obj_pred.ppm")).unwrap(), std::fs::read(out.join("obj_pred.ppm")).unwrap());
    assert!(!img_out.join("part_gt.ppm").exists());
}

#[test]
fn exit_codes() {
    let f = fixture();
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    for sub in ["gen", "train", "eval", "emerge", "dump"] {
        let out = run(&[sub, "--help"]);
        assert_eq!(out.status.code(), Some(0));
        let text = String::from_utf8(out.stdout).unwrap();
        assert!(text.contains("--out"), "{sub} help lacks --out");
    }
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));

    let bad = f.root.join("bad.json");
    std::fs::write(&bad, r#"{"train": {"iterations": 5, "learning_rate": 1}}"#).unwrap();
    let out = run(&["train", "--config", s(&bad)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));

    let out = run(&["eval", "--checkpoint", "/nonexistent.ckpt", "--data", s(&f.data), "--out", s(&f.root)]);
    assert_eq!(out.status.code(), Some(1));
    let garbage = f.root.join("garbage.ckpt");
    std::fs::write(&garbage, b"not a checkpoint").unwrap();
    let out = run(&["eval", "--checkpoint", s(&garbage), "--data", s(&f.data), "--out", s(&f.root)]);
    assert_eq!(out.status.code(), Some(1));

    // output directory that cannot be created
    let blocker = f.root.join("file_not_dir");
    std::fs::write(&blocker, b"x").unwrap();
    let ckpt = f.run_dir.join("model.ckpt");
    let out = run(&["eval", "--checkpoint", s(&ckpt), "--data", s(&f.data), "--out", s(&blocker.join("sub"))]);
    assert_eq!(out.status.code(), Some(2));
}
