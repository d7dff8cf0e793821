//! Emergence probe: how well argmax assignments of an unsupervised level
//! line up with the other granularity's labels.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use lgformer::evalkit::{argmax_assignment, oracle_topk_iou, resize_ids, unit_masks};
use lgformer::model::ForwardOptions;
use lgformer::synthshapes::{dataset_read, OBJECT_CLASSES, PART_CLASSES};
use lgformer::Model32;
use rayon::prelude::*;

use crate::images::{blend, colorize, id_color, pgm_bytes, ppm_bytes};
use crate::train::check_dims;
use crate::{ensure_dir, write_file, CliError, CliResult, OBJECT_NAMES, PART_NAMES};

/// Superpixels are scored against part labels, groups against object
/// labels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Level {
    Superpixel,
    Group,
}

impl Level {
    pub fn name(self) -> &'static str {
        match self {
            Level::Superpixel => "superpixel",
            Level::Group => "group",
        }
    }
}

#[derive(Clone, Debug)]
pub struct EmergeOutcome {
    pub units: usize,
    /// `[k-1][class]` mean IoU over samples containing the class; class 0
    /// (background) is never scored.
    pub iou: Vec<Vec<Option<f64>>>,
    /// `[k-1]` mean over the scored classes.
    pub mean: Vec<f64>,
    pub files: Vec<PathBuf>,
}

/// Image-resolution unit id per pixel.
fn pixel_units(model: &Model32, image: &lgformer::Tensor32, level: Level) -> CliResult<(Vec<usize>, usize)> {
    let out = model.forward(image, &ForwardOptions::default())?;
    let cfg = model.config();
    let (ih, iw) = cfg.pixel_dims();
    let sp = resize_ids(&argmax_assignment(&out.assoc_pix_sp), ih, iw, cfg.image_h, cfg.image_w);
    Ok(match level {
        Level::Superpixel => (sp, out.assoc_pix_sp.cmap().superpixel_count()),
        Level::Group => {
            let g = argmax_assignment(&out.assoc_sp_group);
            (sp.iter().map(|&s| g[s]).collect(), out.assoc_sp_group.groups())
        }
    })
}

pub fn run_emerge(checkpoint: &Path, data: &Path, out: &Path, level: Level, topk: usize, maps: usize) -> CliResult<EmergeOutcome> {
    if topk == 0 {
        return Err(CliError::Validation("--topk must be at least 1".into()));
    }
    let model = Model32::load(checkpoint)?;
    let samples = dataset_read(data)?;
    let (h, w) = (model.config().image_h, model.config().image_w);
    check_dims(&samples, h, w, "dataset")?;
    ensure_dir(out)?;
    let classes = match level {
        Level::Superpixel => PART_CLASSES,
        Level::Group => OBJECT_CLASSES,
    };

    type PerSample = (Vec<usize>, Vec<Vec<Option<f64>>>);
    let per: Vec<PerSample> = samples
        .par_iter()
        .map(|s| -> CliResult<PerSample> {
            let ex = s.example::<f32>()?;
            let (ids, units) = pixel_units(&model, &ex.image, level)?;
            let gt = match level {
                Level::Superpixel => &ex.part,
                Level::Group => &ex.obj,
            };
            let masks = unit_masks(&ids, units);
            let mut scores = vec![vec![None; classes]; topk];
            for (k, row) in scores.iter_mut().enumerate() {
                for (c, cell) in row.iter_mut().enumerate().skip(1) {
                    *cell = oracle_topk_iou(&masks, gt, c as u32, k + 1)?;
                }
            }
            Ok((ids, scores))
        })
        .collect::<CliResult<_>>()?;

    let units = match level {
        Level::Superpixel => model.cmap().superpixel_count(),
        Level::Group => model.config().groups(),
    };
    let mut iou = vec![vec![None; classes]; topk];
    let mut mean = vec![0.0; topk];
    let names: &[&str] = if level == Level::Superpixel { &PART_NAMES } else { &OBJECT_NAMES };
    let mut csv = String::from("k,class,mean_iou,samples\n");
    for k in 0..topk {
        let mut scored = Vec::new();
        for c in 1..classes {
            let vals: Vec<f64> = per.iter().filter_map(|p| p.1[k][c]).collect();
            if !vals.is_empty() {
                let m = vals.iter().sum::<f64>() / vals.len() as f64;
                iou[k][c] = Some(m);
                scored.push(m);
                let _ = writeln!(csv, "{},{},{m:.6},{}", k + 1, names[c], vals.len());
            } else {
                let _ = writeln!(csv, "{},{},nan,0", k + 1, names[c]);
            }
        }
        mean[k] = scored.iter().sum::<f64>() / scored.len().max(1) as f64;
        let _ = writeln!(csv, "{},mean,{:.6},{}", k + 1, mean[k], samples.len());
    }

    let mut files = vec![write_file(out, &format!("emerge_{}.csv", level.name()), csv)?];
    for (i, (s, (ids, _))) in samples.iter().zip(&per).enumerate().take(maps) {
        let gray: Vec<u8> = ids.iter().map(|&u| u.min(255) as u8).collect();
        files.push(write_file(out, &format!("{}_ids_{i}.pgm", level.name()), pgm_bytes(w, h, &gray))?);
        let layer = colorize(ids.iter().copied(), id_color);
        files.push(write_file(out, &format!("{}_overlay_{i}.ppm", level.name()), ppm_bytes(w, h, &blend(&s.image, &layer)))?);
    }
    Ok(EmergeOutcome { units, iou, mean, files })
}
