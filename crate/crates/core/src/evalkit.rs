//! Segmentation metrics and emergence probes over association matrices.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::assoc::{AssocPixSp, AssocSpGroup};
use crate::model::{ForwardOptions, Model, Upsample};
use crate::numerics::{Scalar, Tensor};
use crate::synthshapes::Sample;
use crate::{Error, Result};

/// Pixel counts indexed `[ground truth][prediction]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix { classes, counts: vec![0; classes * classes] }
    }

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(Error::shape("ConfusionMatrix", &[counts.len()], &[classes, classes]));
        }
        Ok(ConfusionMatrix { classes, counts })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn update<L: Copy + Into<u32>>(&mut self, pred: &[L], gt: &[L]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::shape("confusion_update", &[pred.len()], &[gt.len()]));
        }
        let c = self.classes;
        if let Some(bad) = pred.iter().chain(gt).map(|&v| v.into()).find(|&v| v as usize >= c) {
            return Err(Error::Label { label: bad as usize, classes: c });
        }
        for (&p, &g) in pred.iter().zip(gt) {
            self.counts[g.into() as usize * c + p.into() as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::shape("ConfusionMatrix::merge", &[self.classes], &[other.classes]));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }
}

/// Per-class scores; `None` where a class is undefined.
#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub iou: Vec<Option<f64>>,
    pub miou: f64,
    pub acc: Vec<Option<f64>>,
    pub macc: f64,
}

/// `IoU_c = TP/(TP+FP+FN)` and `Acc_c = TP/(TP+FN)`. A class absent from
/// both ground truth and prediction has no IoU; a class absent from ground
/// truth has no accuracy. Means run over the defined entries.
pub fn miou_macc(cm: &ConfusionMatrix) -> Result<Metrics> {
    if cm.total() == 0 {
        return Err(Error::Invalid("empty confusion matrix".into()));
    }
    let c = cm.classes;
    let mut iou = Vec::with_capacity(c);
    let mut acc = Vec::with_capacity(c);
    for k in 0..c {
        let tp = cm.get(k, k);
        let gt: u64 = (0..c).map(|p| cm.get(k, p)).sum();
        let pred: u64 = (0..c).map(|g| cm.get(g, k)).sum();
        let union = gt + pred - tp;
        iou.push((union > 0).then(|| tp as f64 / union as f64));
        acc.push((gt > 0).then(|| tp as f64 / gt as f64));
    }
    let mean = |v: &[Option<f64>]| {
        let d: Vec<f64> = v.iter().flatten().copied().collect();
        d.iter().sum::<f64>() / d.len().max(1) as f64
    };
    Ok(Metrics { miou: mean(&iou), macc: mean(&acc), iou, acc })
}

/// Header, one row per class, then a `mean` row. Undefined cells are `nan`.
pub fn metrics_csv(names: &[&str], m: &Metrics) -> String {
    let cell = |v: Option<f64>| v.map_or("nan".to_string(), |x| format!("{x:.6}"));
    let mut out = String::from("class,iou,acc\n");
    for (k, name) in names.iter().enumerate() {
        let _ = writeln!(out, "{name},{},{}", cell(m.iou[k]), cell(m.acc[k]));
    }
    let _ = writeln!(out, "mean,{:.6},{:.6}", m.miou, m.macc);
    out
}

/// Pixels with a 4-neighbour of a different label.
pub fn boundary_mask<L: PartialEq>(map: &[L], h: usize, w: usize) -> Vec<bool> {
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            out[i] = (x + 1 < w && map[i] != map[i + 1])
                || (x > 0 && map[i] != map[i - 1])
                || (y + 1 < h && map[i] != map[i + w])
                || (y > 0 && map[i] != map[i - w]);
        }
    }
    out
}

/// Square dilation by `r` (Chebyshev distance), separable.
fn dilate(mask: &[bool], h: usize, w: usize, r: usize) -> Vec<bool> {
    let mut rows = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            rows[y * w + x] = (x.saturating_sub(r)..=(x + r).min(w - 1)).any(|xx| mask[y * w + xx]);
        }
    }
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = (y.saturating_sub(r)..=(y + r).min(h - 1)).any(|yy| rows[yy * w + x]);
        }
    }
    out
}

/// F1 between boundary pixel sets, each side matched within Chebyshev
/// radius `r` of the other. Two boundary-free maps score 1.
pub fn boundary_fscore<L: PartialEq>(pred: &[L], gt: &[L], h: usize, w: usize, r: usize) -> Result<f64> {
    if pred.len() != h * w || gt.len() != h * w {
        return Err(Error::shape("boundary_fscore", &[pred.len(), gt.len()], &[h * w, h * w]));
    }
    let (bp, bg) = (boundary_mask(pred, h, w), boundary_mask(gt, h, w));
    let (np, ng) = (bp.iter().filter(|&&b| b).count(), bg.iter().filter(|&&b| b).count());
    if np == 0 && ng == 0 {
        return Ok(1.0);
    }
    if np == 0 || ng == 0 {
        return Ok(0.0);
    }
    let (dp, dg) = (dilate(&bp, h, w, r), dilate(&bg, h, w, r));
    let precision = bp.iter().zip(&dg).filter(|(&b, &d)| b && d).count() as f64 / np as f64;
    let recall = bg.iter().zip(&dp).filter(|(&b, &d)| b && d).count() as f64 / ng as f64;
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Index of the first maximum.
fn first_argmax<S: Scalar>(it: impl Iterator<Item = (usize, S)>) -> usize {
    let mut best: Option<(usize, S)> = None;
    for (i, v) in it {
        match best {
            Some((bi, bv)) if v < bv || (v == bv && i > bi) => {}
            _ => best = Some((i, v)),
        }
    }
    best.map_or(0, |b| b.0)
}

/// Row-wise argmax of an association matrix, lowest index on ties.
pub trait ArgmaxAssignment {
    fn argmax_assignment(&self) -> Vec<usize>;
}

impl<S: Scalar> ArgmaxAssignment for AssocPixSp<S> {
    /// Superpixel id per pixel.
    fn argmax_assignment(&self) -> Vec<usize> {
        (0..self.cmap().pixel_count()).map(|p| first_argmax(self.row(p))).collect()
    }
}

impl<S: Scalar> ArgmaxAssignment for AssocSpGroup<S> {
    /// Group id per superpixel.
    fn argmax_assignment(&self) -> Vec<usize> {
        self.weights().rows().map(|r| first_argmax(r.iter().copied().enumerate())).collect()
    }
}

pub fn argmax_assignment<A: ArgmaxAssignment>(a: &A) -> Vec<usize> {
    a.argmax_assignment()
}

/// Per-pixel argmax over the last axis of `[h × w × c]` logits.
pub fn argmax_labels<S: Scalar>(logits: &Tensor<S>) -> Vec<u32> {
    logits.rows().map(|r| first_argmax(r.iter().copied().enumerate()) as u32).collect()
}

/// Nearest-neighbour resize of an id map; used to bring the
/// feature-resolution assignment to image resolution.
pub fn resize_ids(ids: &[usize], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        for x in 0..out_w {
            out.push(ids[(y * h / out_h) * w + x * w / out_w]);
        }
    }
    out
}

/// Binary masks `{ids == u}` for `u < units`, as sorted pixel index lists.
pub fn unit_masks(ids: &[usize], units: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); units];
    for (i, &u) in ids.iter().enumerate() {
        if u < units {
            out[u].push(i);
        }
    }
    out
}

/// Greedy oracle: up to `k` times, add the mask whose union with the running
/// selection has the highest IoU against `{gt == class}`, accepting it only
/// if IoU does not drop. Ties pick the lowest mask index. `None` when the
/// class is absent from `gt`.
pub fn oracle_topk_iou(masks: &[Vec<usize>], gt: &[u32], class: u32, k: usize) -> Result<Option<f64>> {
    if k == 0 {
        return Err(Error::Invalid("top-k needs k >= 1".into()));
    }
    let positives = gt.iter().filter(|&&g| g == class).count();
    if positives == 0 {
        return Ok(None);
    }
    let mut selected = vec![false; gt.len()];
    let (mut inter, mut union) = (0usize, positives);
    let mut current = 0.0;
    for _ in 0..k {
        let mut best: Option<(f64, usize, usize, usize)> = None;
        for (m, mask) in masks.iter().enumerate() {
            let (mut di, mut du) = (0, 0);
            for &i in mask {
                if i >= gt.len() {
                    return Err(Error::Invalid(format!("mask pixel {i} outside the map")));
                }
                if !selected[i] {
                    if gt[i] == class {
                        di += 1;
                    } else {
                        du += 1;
                    }
                }
            }
            let iou = (inter + di) as f64 / (union + du) as f64;
            if best.is_none_or(|b| iou > b.0) {
                best = Some((iou, m, di, du));
            }
        }
        match best {
            Some((iou, m, di, du)) if iou >= current => {
                masks[m].iter().for_each(|&i| selected[i] = true);
                inter += di;
                union += du;
                current = iou;
            }
            _ => break,
        }
    }
    Ok(Some(current))
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub part: ConfusionMatrix,
    pub obj: ConfusionMatrix,
    /// Mean over samples of the radius-1 boundary F-score.
    pub part_boundary: f64,
    pub obj_boundary: f64,
}

/// Runs the model over `samples` in parallel and accumulates metrics.
pub fn evaluate<S: Scalar>(model: &Model<S>, samples: &[Sample], upsample: Upsample) -> Result<EvalReport> {
    let cfg = model.config();
    let opts = ForwardOptions { upsample, ..Default::default() };
    let per: Vec<(ConfusionMatrix, ConfusionMatrix, f64, f64)> = samples
        .par_iter()
        .map(|s| {
            let ex = s.example::<S>()?;
            let out = model.forward(&ex.image, &opts)?;
            let (pp, po) = (argmax_labels(&out.part_logits), argmax_labels(&out.obj_logits));
            let mut cp = ConfusionMatrix::new(cfg.part_classes);
            let mut co = ConfusionMatrix::new(cfg.object_classes);
            cp.update(&pp, &ex.part)?;
            co.update(&po, &ex.obj)?;
            let bp = boundary_fscore(&pp, &ex.part, s.height, s.width, 1)?;
            let bo = boundary_fscore(&po, &ex.obj, s.height, s.width, 1)?;
            Ok((cp, co, bp, bo))
        })
        .collect::<Result<_>>()?;
    let mut report = EvalReport {
        part: ConfusionMatrix::new(cfg.part_classes),
        obj: ConfusionMatrix::new(cfg.object_classes),
        part_boundary: 0.0,
        obj_boundary: 0.0,
    };
    for (cp, co, bp, bo) in &per {
        report.part.merge(cp)?;
        report.obj.merge(co)?;
        report.part_boundary += bp;
        report.obj_boundary += bo;
    }
    let n = per.len().max(1) as f64;
    report.part_boundary /= n;
    report.obj_boundary /= n;
    Ok(report)
}
