use std::fmt::Write as _;
use std::path::Path;

use lgformer::synthshapes::{class_histogram, dataset_write, gen_dataset, GenConfig, OBJECT_CLASSES, PART_CLASSES};

use crate::{CliResult, OBJECT_NAMES, PART_NAMES};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GenReport {
    pub count: usize,
    pub part_pixels: [u64; PART_CLASSES],
    pub obj_pixels: [u64; OBJECT_CLASSES],
}

impl GenReport {
    /// `level,class,pixels` rows.
    pub fn histogram_table(&self) -> String {
        let mut out = String::from("level,class,pixels\n");
        for (name, n) in PART_NAMES.iter().zip(&self.part_pixels) {
            let _ = writeln!(out, "part,{name},{n}");
        }
        for (name, n) in OBJECT_NAMES.iter().zip(&self.obj_pixels) {
            let _ = writeln!(out, "object,{name},{n}");
        }
        out
    }
}

pub fn run_gen(cfg: &GenConfig, count: usize, out: &Path) -> CliResult<GenReport> {
    let samples = gen_dataset(cfg, count)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        crate::ensure_dir(dir)?;
    }
    dataset_write(out, &samples)?;
    let (part_pixels, obj_pixels) = class_histogram(&samples);
    Ok(GenReport { count, part_pixels, obj_pixels })
}
