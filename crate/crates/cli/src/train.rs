use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use lgformer::evalkit::{evaluate, metrics_csv, miou_macc, EvalReport, Metrics};
use lgformer::model::{lr_at, model_build, train_step, AdamW, Upsample};
use lgformer::rng::seeded;
use lgformer::synthshapes::{dataset_read, gen_dataset, GenConfig, Sample};
use lgformer::Model32;
use rand::seq::SliceRandom;

use crate::config::RunConfig;
use crate::{ensure_dir, write_file, CliError, CliResult, OBJECT_NAMES, PART_NAMES};

pub const CONFIG_ECHO: &str = "config.json";
pub const CHECKPOINT: &str = "model.ckpt";
pub const TRAIN_LOG: &str = "train.csv";

/// Reads `path`, or generates `n` samples from `gen` with `seed`.
pub fn load_or_generate(path: Option<&Path>, gen: &GenConfig, seed: u64, n: usize) -> CliResult<Vec<Sample>> {
    match path {
        Some(p) => Ok(dataset_read(p)?),
        None => Ok(gen_dataset(&GenConfig { seed, ..gen.clone() }, n)?),
    }
}

pub fn check_dims(samples: &[Sample], h: usize, w: usize, what: &str) -> CliResult<()> {
    if samples.is_empty() {
        return Err(CliError::Validation(format!("{what} is empty")));
    }
    if let Some(s) = samples.iter().find(|s| (s.height, s.width) != (h, w)) {
        return Err(CliError::Validation(format!("{what} has {}x{} images, model expects {h}x{w}", s.height, s.width)));
    }
    Ok(())
}

/// Seed of the generated validation set; kept apart from the training seed.
pub fn val_seed(data_seed: u64) -> u64 {
    data_seed.wrapping_add(1)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub out_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub part: Metrics,
    pub obj: Metrics,
    pub report: EvalReport,
}

/// `metric,value` rows for one evaluation.
pub fn summary_rows(report: &EvalReport) -> CliResult<Vec<(&'static str, f64)>> {
    let (p, o) = (miou_macc(&report.part)?, miou_macc(&report.obj)?);
    Ok(vec![
        ("part_miou", p.miou),
        ("part_macc", p.macc),
        ("obj_miou", o.miou),
        ("obj_macc", o.macc),
        ("part_boundary_f", report.part_boundary),
        ("obj_boundary_f", report.obj_boundary),
    ])
}

pub fn run_train(cfg: &RunConfig, mut progress: impl FnMut(&str)) -> CliResult<TrainOutcome> {
    cfg.validate()?;
    let t = &cfg.train;
    let (h, w) = (cfg.model.image_h, cfg.model.image_w);
    let train = load_or_generate(t.train_set.as_deref(), &cfg.data, cfg.data.seed, t.train_samples)?;
    let val = load_or_generate(t.val_set.as_deref(), &cfg.data, val_seed(cfg.data.seed), t.val_samples)?;
    check_dims(&train, h, w, "training set")?;
    check_dims(&val, h, w, "validation set")?;

    let out = cfg.out_dir.clone();
    ensure_dir(&out)?;
    write_file(&out, CONFIG_ECHO, cfg.canonical_json())?;

    let mut model: Model32 = model_build(&cfg.model, t.seed)?;
    let mut opt = AdamW::new(model.store(), t.weight_decay);
    let mut order_rng = seeded(t.seed ^ 0x0BA7_C4E5);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;

    let mut log = String::from("iter,lr,loss,grad_norm,part_miou,obj_miou\n");
    for iter in 0..t.iterations {
        let mut batch = Vec::with_capacity(t.batch_size);
        for _ in 0..t.batch_size {
            if cursor == order.len() {
                order = (0..train.len()).collect();
                order.shuffle(&mut order_rng);
                cursor = 0;
            }
            batch.push(train[order[cursor]].example::<f32>()?);
            cursor += 1;
        }
        let lr = lr_at(iter, t.iterations, t.base_lr);
        let stats = train_step(&mut model, &mut opt, &batch, lr, t.supervision)?;
        let _ = write!(log, "{iter},{lr},{:.6},{:.6},", stats.loss, stats.grad_norm);
        if (iter + 1) % t.eval_interval == 0 || iter + 1 == t.iterations {
            let r = evaluate(&model, &val, Upsample::Assoc)?;
            let (p, o) = (miou_macc(&r.part)?, miou_macc(&r.obj)?);
            let _ = writeln!(log, "{:.6},{:.6}", p.miou, o.miou);
            progress(&format!(
                "iter {:>5}  lr {lr:e}  loss {:.4}  part mIoU {:.4}  obj mIoU {:.4}",
                iter + 1,
                stats.loss,
                p.miou,
                o.miou
            ));
        } else {
            log.push_str(",\n");
        }
    }

    let checkpoint = out.join(CHECKPOINT);
    model.save(&checkpoint)?;
    let logp = write_file(&out, TRAIN_LOG, &log)?;
    let report = evaluate(&model, &val, Upsample::Assoc)?;
    let (part, obj) = (miou_macc(&report.part)?, miou_macc(&report.obj)?);
    write_file(&out, "final_part.csv", metrics_csv(&PART_NAMES, &part))?;
    write_file(&out, "final_obj.csv", metrics_csv(&OBJECT_NAMES, &obj))?;
    let mut summary = String::from("metric,value\n");
    for (k, v) in summary_rows(&report)? {
        let _ = writeln!(summary, "{k},{v:.6}");
    }
    write_file(&out, "final_summary.csv", summary)?;
    Ok(TrainOutcome { out_dir: out, checkpoint, log: logp, part, obj, report })
}

