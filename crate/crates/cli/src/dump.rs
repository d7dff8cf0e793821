//! Predictions, association maps and the group → superpixel → pixel
//! prediction chain for one image.
//!
//! Files written to the output directory:
//!
//! | file | contents |
//! |------|----------|
//! | `input.ppm` | the input image |
//! | `part_pred.ppm`, `obj_pred.ppm` | predicted classes, image resolution |
//! | `part_gt.ppm`, `obj_gt.ppm` | ground truth (dataset input only) |
//! | `superpixel_ids.pgm`, `group_ids.pgm` | argmax assignments, image resolution |
//! | `superpixel_overlay.ppm` | input blended with superpixel colours |
//! | `assoc_pix_sp_max.pgm` | largest pixel→superpixel weight per feature pixel |
//! | `assoc_sp_group_<g>.pgm` | weight of group `g` per superpixel |
//! | `assoc_pix_sp.csv` | `pixel,superpixel,weight` for every candidate pair |
//! | `assoc_sp_group.csv` | `superpixel,g0,g1,...` dense rows |
//! | `chain_groups.csv` | group object logits and argmax |
//! | `chain_superpixels.ppm` | object classes on the superpixel grid |
//! | `chain_pixels.ppm` | object classes on the feature pixel grid |
//! | `chain_image.ppm` | object classes at image resolution |

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use lgformer::evalkit::{argmax_assignment, argmax_labels, resize_ids};
use lgformer::model::{image_tensor, ForwardOptions};
use lgformer::synthshapes::dataset_read;
use lgformer::Model64;

use crate::images::{blend, class_color, colorize, gray_levels, id_color, pgm_bytes, ppm_bytes, read_netpbm};
use crate::{ensure_dir, write_file, CliError, CliResult};

#[derive(Clone, Debug)]
pub enum DumpInput {
    Image(PathBuf),
    Sample { data: PathBuf, index: usize },
}

type Labels = Option<(Vec<u8>, Vec<u8>)>;

fn load_input(input: &DumpInput) -> CliResult<(usize, usize, Vec<u8>, Labels)> {
    match input {
        DumpInput::Image(p) => {
            let (w, h, ch, data) = read_netpbm(p)?;
            if ch != 3 {
                return Err(CliError::Validation(format!("{} is not an RGB (P6) image", p.display())));
            }
            Ok((h, w, data, None))
        }
        DumpInput::Sample { data, index } => {
            let mut samples = dataset_read(data)?;
            if *index >= samples.len() {
                return Err(CliError::Validation(format!("index {index} out of range for {} samples", samples.len())));
            }
            let s = samples.swap_remove(*index);
            Ok((s.height, s.width, s.image, Some((s.part, s.obj))))
        }
    }
}

pub fn run_dump(checkpoint: &Path, input: &DumpInput, out: &Path) -> CliResult<Vec<PathBuf>> {
    let model = Model64::load(checkpoint)?;
    let cfg = model.config().clone();
    let (h, w, rgb, labels) = load_input(input)?;
    if (h, w) != (cfg.image_h, cfg.image_w) {
        return Err(CliError::Validation(format!("input is {h}x{w}, model expects {}x{}", cfg.image_h, cfg.image_w)));
    }
    ensure_dir(out)?;
    let fwd = model.forward(&image_tensor(&rgb, h, w)?, &ForwardOptions::default())?;
    let (ih, iw) = cfg.pixel_dims();
    let (sh, sw) = cfg.sp_dims();
    let classes = |t: &lgformer::Tensor64| colorize(argmax_labels(t).into_iter().map(|v| v as usize), class_color);

    let mut files = vec![write_file(out, "input.ppm", ppm_bytes(w, h, &rgb))?];
    files.push(write_file(out, "part_pred.ppm", ppm_bytes(w, h, &classes(&fwd.part_logits)))?);
    files.push(write_file(out, "obj_pred.ppm", ppm_bytes(w, h, &classes(&fwd.obj_logits)))?);
    if let Some((part, obj)) = &labels {
        let paint = |m: &[u8]| colorize(m.iter().map(|&v| v as usize), class_color);
        files.push(write_file(out, "part_gt.ppm", ppm_bytes(w, h, &paint(part)))?);
        files.push(write_file(out, "obj_gt.ppm", ppm_bytes(w, h, &paint(obj)))?);
    }

    let sp_ids = argmax_assignment(&fwd.assoc_pix_sp);
    let g_of_sp = argmax_assignment(&fwd.assoc_sp_group);
    let sp_img = resize_ids(&sp_ids, ih, iw, h, w);
    let g_img: Vec<usize> = sp_img.iter().map(|&s| g_of_sp[s]).collect();
    let as_gray = |ids: &[usize]| ids.iter().map(|&v| v.min(255) as u8).collect::<Vec<_>>();
    files.push(write_file(out, "superpixel_ids.pgm", pgm_bytes(w, h, &as_gray(&sp_img)))?);
    files.push(write_file(out, "group_ids.pgm", pgm_bytes(w, h, &as_gray(&g_img)))?);
    let layer = colorize(sp_img.iter().copied(), id_color);
    files.push(write_file(out, "superpixel_overlay.ppm", ppm_bytes(w, h, &blend(&rgb, &layer)))?);

    let a = &fwd.assoc_pix_sp;
    let max_w = (0..a.cmap().pixel_count()).map(|p| a.row(p).map(|(_, v)| v).fold(0.0, f64::max));
    files.push(write_file(out, "assoc_pix_sp_max.pgm", pgm_bytes(iw, ih, &gray_levels(max_w)))?);
    let mut csv = String::from("pixel,superpixel,weight\n");
    for p in 0..a.cmap().pixel_count() {
        for (s, v) in a.row(p) {
            let _ = writeln!(csv, "{p},{s},{v}");
        }
    }
    files.push(write_file(out, "assoc_pix_sp.csv", csv)?);

    let g = &fwd.assoc_sp_group;
    let gw = g.weights();
    for k in 0..g.groups() {
        let col = gw.rows().map(|r| r[k]);
        files.push(write_file(out, &format!("assoc_sp_group_{k}.pgm"), pgm_bytes(sw, sh, &gray_levels(col)))?);
    }
    let mut csv = String::from("superpixel");
    (0..g.groups()).for_each(|k| {
        let _ = write!(csv, ",g{k}");
    });
    csv.push('\n');
    for (s, r) in gw.rows().enumerate() {
        let _ = write!(csv, "{s}");
        r.iter().for_each(|v| {
            let _ = write!(csv, ",{v}");
        });
        csv.push('\n');
    }
    files.push(write_file(out, "assoc_sp_group.csv", csv)?);

    let mut chain = String::from("group");
    (0..cfg.object_classes).for_each(|c| {
        let _ = write!(chain, ",logit{c}");
    });
    chain.push_str(",class\n");
    let gl = argmax_labels(&fwd.group_logits);
    for (k, r) in fwd.group_logits.rows().enumerate() {
        let _ = write!(chain, "{k}");
        r.iter().for_each(|v| {
            let _ = write!(chain, ",{v:.6}");
        });
        let _ = writeln!(chain, ",{}", gl[k]);
    }
    files.push(write_file(out, "chain_groups.csv", chain)?);
    files.push(write_file(out, "chain_superpixels.ppm", ppm_bytes(sw, sh, &classes(&fwd.obj_sp_logits)))?);
    files.push(write_file(out, "chain_pixels.ppm", ppm_bytes(iw, ih, &classes(&fwd.obj_pix_logits)))?);
    files.push(write_file(out, "chain_image.ppm", ppm_bytes(w, h, &classes(&fwd.obj_logits)))?);
    Ok(files)
}
