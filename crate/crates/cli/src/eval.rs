use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use lgformer::evalkit::{evaluate, metrics_csv, miou_macc, EvalReport};
use lgformer::model::Upsample;
use lgformer::rng::substream;
use lgformer::synthshapes::{apply_occlusion, dataset_read, Occluded, Sample};
use lgformer::Model32;
use rayon::prelude::*;

use crate::train::{check_dims, summary_rows};
use crate::{ensure_dir, write_file, CliResult, OBJECT_NAMES, PART_NAMES};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OcclusionOpts {
    pub seed: u64,
    pub coverage: [f64; 2],
}

#[derive(Clone, Debug)]
pub struct EvalOutcome {
    pub clean: EvalReport,
    pub occluded: Option<EvalReport>,
    /// Per-sample occluder coverage of object pixels.
    pub coverage: Vec<f64>,
    pub files: Vec<PathBuf>,
}

pub fn mode_name(u: Upsample) -> &'static str {
    match u {
        Upsample::Assoc => "assoc",
        Upsample::Bilinear => "bilinear",
    }
}

/// Occludes sample `i` with its own substream of `seed`.
pub fn occlude_all(samples: &[Sample], opts: OcclusionOpts) -> CliResult<Vec<Occluded>> {
    Ok(samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| apply_occlusion(s, &mut substream(opts.seed, i as u64), opts.coverage))
        .collect::<lgformer::Result<_>>()?)
}

pub fn run_eval(
    checkpoint: &Path,
    data: &Path,
    out: &Path,
    upsample: Upsample,
    occlude: Option<OcclusionOpts>,
) -> CliResult<EvalOutcome> {
    let model = Model32::load(checkpoint)?;
    let samples = dataset_read(data)?;
    check_dims(&samples, model.config().image_h, model.config().image_w, "dataset")?;
    ensure_dir(out)?;
    let mode = mode_name(upsample);
    let mut files = Vec::new();

    let clean = evaluate(&model, &samples, upsample)?;
    files.push(write_file(out, &format!("eval_{mode}_part.csv"), metrics_csv(&PART_NAMES, &miou_macc(&clean.part)?))?);
    files.push(write_file(out, &format!("eval_{mode}_obj.csv"), metrics_csv(&OBJECT_NAMES, &miou_macc(&clean.obj)?))?);

    let (mut occluded, mut coverage) = (None, Vec::new());
    if let Some(opts) = occlude {
        let occ = occlude_all(&samples, opts)?;
        let mut table = String::from("sample,coverage,in_range,x0,y0,x1,y1\n");
        for (i, o) in occ.iter().enumerate() {
            let r = o.rect;
            let _ = writeln!(table, "{i},{:.6},{},{},{},{},{}", o.coverage, o.in_range, r.x0, r.y0, r.x1, r.y1);
        }
        files.push(write_file(out, "occlusion.csv", table)?);
        coverage = occ.iter().map(|o| o.coverage).collect();
        let images: Vec<Sample> = occ.into_iter().map(|o| o.sample).collect();
        let rep = evaluate(&model, &images, upsample)?;
        files.push(write_file(
            out,
            &format!("eval_{mode}_part_occluded.csv"),
            metrics_csv(&PART_NAMES, &miou_macc(&rep.part)?),
        )?);
        files.push(write_file(
            out,
            &format!("eval_{mode}_obj_occluded.csv"),
            metrics_csv(&OBJECT_NAMES, &miou_macc(&rep.obj)?),
        )?);
        occluded = Some(rep);
    }

    let mut summary = String::from(if occluded.is_some() { "metric,clean,occluded,drop\n" } else { "metric,clean\n" });
    let clean_rows = summary_rows(&clean)?;
    let occ_rows = occluded.as_ref().map(summary_rows).transpose()?;
    for (k, (name, v)) in clean_rows.iter().enumerate() {
        match &occ_rows {
            Some(rows) => {
                let o = rows[k].1;
                let _ = writeln!(summary, "{name},{v:.6},{o:.6},{:.6}", v - o);
            }
            None => {
                let _ = writeln!(summary, "{name},{v:.6}");
            }
        }
    }
    files.push(write_file(out, &format!("eval_{mode}_summary.csv"), summary)?);
    Ok(EvalOutcome { clean, occluded, coverage, files })
}
