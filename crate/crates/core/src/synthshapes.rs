//! Procedural part/object segmentation scenes.
//!
//! Two object kinds, each built from three parts:
//!
//! | object      | parts                                   |
//! |-------------|-----------------------------------------|
//! | 1 creature  | 1 head (disk), 2 body (rect), 3 legs    |
//! | 2 vehicle   | 4 body (rect), 5 wheels (disks), 6 roof |
//!
//! Geometry is integer-only. Colour jitter and pixel noise come from the
//! Irwin–Hall sampler in [`crate::rng`], so a seed reproduces the same
//! bytes everywhere.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::{image_tensor, Example};
use crate::numerics::Scalar;
use crate::rng::{gauss, int_in, substream, unit, Prng};
use crate::{Error, Result};

/// Part classes including background.
pub const PART_CLASSES: usize = 7;
/// Object classes including background.
pub const OBJECT_CLASSES: usize = 3;
pub const MARGIN: i64 = 2;

const MAGIC: &[u8; 7] = b"LGSYN1\0";
const VERSION: u32 = 1;

const PART_COLORS: [[f64; 3]; 6] = [
    [205.0, 70.0, 60.0],
    [225.0, 160.0, 45.0],
    [150.0, 50.0, 170.0],
    [45.0, 95.0, 215.0],
    [25.0, 25.0, 30.0],
    [70.0, 210.0, 200.0],
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub height: usize,
    pub width: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Per-instance std of each part's base colour.
    pub color_jitter: f64,
    /// Std of additive per-pixel noise.
    pub noise_std: f64,
    pub occlusion: bool,
    pub coverage: [f64; 2],
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            height: 64,
            width: 64,
            min_objects: 1,
            max_objects: 3,
            color_jitter: 12.0,
            noise_std: 6.0,
            occlusion: false,
            coverage: [0.2, 0.4],
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.height < 32 || self.width < 32 || self.height > u16::MAX as usize || self.width > u16::MAX as usize {
            return bad(format!("image {}x{} outside 32..=65535", self.height, self.width));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return bad(format!("object range [{}, {}] is empty or starts at 0", self.min_objects, self.max_objects));
        }
        if !(self.color_jitter >= 0.0 && self.noise_std >= 0.0) {
            return bad("color_jitter and noise_std must be non-negative".into());
        }
        let [lo, hi] = self.coverage;
        if !(0.0 < lo && lo <= hi && hi < 1.0) {
            return bad(format!("coverage [{lo}, {hi}] must satisfy 0 < lo <= hi < 1"));
        }
        Ok(())
    }

    /// Range of the object unit length in pixels.
    pub fn unit_range(&self) -> (i64, i64) {
        let s = self.height.min(self.width) as i64;
        ((s / 16).max(2), (s / 10).max(2))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub height: usize,
    pub width: usize,
    /// Interleaved RGB, row-major.
    pub image: Vec<u8>,
    pub part: Vec<u8>,
    pub obj: Vec<u8>,
}

impl Sample {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn object_pixels(&self) -> usize {
        self.obj.iter().filter(|&&o| o > 0).count()
    }

    pub fn example<S: Scalar>(&self) -> Result<Example<S>> {
        Ok(Example {
            image: image_tensor(&self.image, self.height, self.width)?,
            part: self.part.iter().map(|&v| v as u32).collect(),
            obj: self.obj.iter().map(|&v| v as u32).collect(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObjectKind {
    Creature,
    Vehicle,
}

impl ObjectKind {
    pub fn label(self) -> u8 {
        match self {
            ObjectKind::Creature => 1,
            ObjectKind::Vehicle => 2,
        }
    }

    pub fn parts(self) -> [u8; 3] {
        match self {
            ObjectKind::Creature => [1, 2, 3],
            ObjectKind::Vehicle => [4, 5, 6],
        }
    }

    /// Bounding box `(width, height)` for unit length `u`.
    pub fn extent(self, u: i64) -> (i64, i64) {
        match self {
            ObjectKind::Creature => (4 * u + 1, 7 * u),
            ObjectKind::Vehicle => (6 * u, 4 * u + 1),
        }
    }
}

/// One object instance: kind, top-left corner and unit length.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Placement {
    pub kind: ObjectKind,
    pub x: i64,
    pub y: i64,
    pub unit: i64,
}

#[derive(Clone, Copy, Debug)]
enum Prim {
    /// Half-open `[x0, x1) × [y0, y1)`.
    Rect { x0: i64, y0: i64, x1: i64, y1: i64 },
    /// Closed disk `(x-cx)² + (y-cy)² ≤ r²`.
    Disk { cx: i64, cy: i64, r: i64 },
}

impl Prim {
    fn bounds(self) -> (i64, i64, i64, i64) {
        match self {
            Prim::Rect { x0, y0, x1, y1 } => (x0, y0, x1, y1),
            Prim::Disk { cx, cy, r } => (cx - r, cy - r, cx + r + 1, cy + r + 1),
        }
    }

    fn contains(self, x: i64, y: i64) -> bool {
        match self {
            Prim::Rect { x0, y0, x1, y1 } => x >= x0 && x < x1 && y >= y0 && y < y1,
            Prim::Disk { cx, cy, r } => (x - cx).pow(2) + (y - cy).pow(2) <= r * r,
        }
    }
}

impl Placement {
    pub fn bounds(&self) -> (i64, i64, i64, i64) {
        let (w, h) = self.kind.extent(self.unit);
        (self.x, self.y, self.x + w, self.y + h)
    }

    /// Primitives in drawing order with their part labels.
    fn prims(&self) -> Vec<(u8, Prim)> {
        let (x, y, u) = (self.x, self.y, self.unit);
        match self.kind {
            ObjectKind::Creature => {
                let leg = (u / 2).max(1);
                vec![
                    (3, Prim::Rect { x0: x + u / 2, y0: y + 5 * u, x1: x + u / 2 + leg, y1: y + 7 * u }),
                    (3, Prim::Rect { x0: x + 4 * u - u / 2 - leg, y0: y + 5 * u, x1: x + 4 * u - u / 2, y1: y + 7 * u }),
                    (2, Prim::Rect { x0: x, y0: y + 2 * u, x1: x + 4 * u + 1, y1: y + 5 * u }),
                    (1, Prim::Disk { cx: x + 2 * u, cy: y + u, r: u }),
                ]
            }
            ObjectKind::Vehicle => vec![
                (6, Prim::Rect { x0: x + 3 * u / 2, y0: y, x1: x + 9 * u / 2, y1: y + u }),
                (4, Prim::Rect { x0: x, y0: y + u, x1: x + 6 * u, y1: y + 3 * u }),
                (5, Prim::Disk { cx: x + 3 * u / 2, cy: y + 3 * u, r: u }),
                (5, Prim::Disk { cx: x + 9 * u / 2, cy: y + 3 * u, r: u }),
            ],
        }
    }
}

/// Paints `placements` back to front over a noisy background.
pub fn render_scene(rng: &mut Prng, cfg: &GenConfig, placements: &[Placement]) -> Sample {
    let (h, w) = (cfg.height, cfg.width);
    let mut part = vec![0u8; h * w];
    let mut obj = vec![0u8; h * w];
    let mut color = vec![0.0f64; h * w * 3];

    let bg: Vec<f64> = (0..3).map(|_| 70.0 + 60.0 * unit(rng)).collect();
    for px in color.chunks_exact_mut(3) {
        px.copy_from_slice(&bg);
    }
    for p in placements {
        let tint: Vec<[f64; 3]> = PART_COLORS
            .iter()
            .map(|c| c.map(|v| v + cfg.color_jitter * gauss(rng)))
            .collect();
        for (label, prim) in p.prims() {
            let (x0, y0, x1, y1) = prim.bounds();
            for y in y0.max(0)..y1.min(h as i64) {
                for x in x0.max(0)..x1.min(w as i64) {
                    if prim.contains(x, y) {
                        let i = y as usize * w + x as usize;
                        part[i] = label;
                        obj[i] = p.kind.label();
                        color[i * 3..i * 3 + 3].copy_from_slice(&tint[label as usize - 1]);
                    }
                }
            }
        }
    }
    let image = color
        .iter()
        .map(|&c| (c + cfg.noise_std * gauss(rng)).round().clamp(0.0, 255.0) as u8)
        .collect();
    Sample { height: h, width: w, image, part, obj }
}

fn overlap(a: (i64, i64, i64, i64), b: (i64, i64, i64, i64)) -> i64 {
    let w = (a.2.min(b.2) - a.0.max(b.0)).max(0);
    let h = (a.3.min(b.3) - a.1.max(b.1)).max(0);
    w * h
}

/// Random object layout. A placement overlapping earlier boxes by more than
/// half its own area is redrawn; after 100 attempts the unit shrinks.
pub fn sample_layout(rng: &mut Prng, cfg: &GenConfig) -> Vec<Placement> {
    let n = int_in(rng, cfg.min_objects as i64, cfg.max_objects as i64) as usize;
    let (umin, umax) = cfg.unit_range();
    let mut out: Vec<Placement> = Vec::with_capacity(n);
    for _ in 0..n {
        let kind = if rng_bit(rng) { ObjectKind::Creature } else { ObjectKind::Vehicle };
        let mut unit = int_in(rng, umin, umax);
        'place: loop {
            let (bw, bh) = kind.extent(unit);
            let (xmax, ymax) = (cfg.width as i64 - MARGIN - bw, cfg.height as i64 - MARGIN - bh);
            if xmax >= MARGIN && ymax >= MARGIN {
                let mut last = None;
                for _ in 0..100 {
                    let p = Placement { kind, x: int_in(rng, MARGIN, xmax), y: int_in(rng, MARGIN, ymax), unit };
                    let area = bw * bh;
                    if out.iter().all(|q| 2 * overlap(p.bounds(), q.bounds()) <= area) {
                        out.push(p);
                        break 'place;
                    }
                    last = Some(p);
                }
                if unit == 1 {
                    out.extend(last);
                    break;
                }
            }
            unit -= 1;
        }
    }
    out
}

fn rng_bit(rng: &mut Prng) -> bool {
    int_in(rng, 0, 1) == 1
}

pub fn gen_sample(rng: &mut Prng, cfg: &GenConfig) -> Sample {
    let layout = sample_layout(rng, cfg);
    render_scene(rng, cfg, &layout)
}

/// `n` samples; sample `i` uses its own substream, so the result does not
/// depend on thread count. Occlusion is applied when `cfg.occlusion` is set.
pub fn gen_dataset(cfg: &GenConfig, n: usize) -> Result<Vec<Sample>> {
    cfg.validate()?;
    Ok((0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream(cfg.seed, i as u64);
            let s = gen_sample(&mut rng, cfg);
            if cfg.occlusion {
                apply_occlusion(&s, &mut rng, cfg.coverage).map(|o| o.sample).unwrap_or(s)
            } else {
                s
            }
        })
        .collect())
}

/// Occluder rectangle, half-open.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Rect {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }
}

#[derive(Clone, Debug)]
pub struct Occluded {
    pub sample: Sample,
    pub rect: Rect,
    /// Fraction of object pixels under the rectangle.
    pub coverage: f64,
    /// Whether `coverage` landed inside the requested range.
    pub in_range: bool,
}

/// Summed-area table of the object mask.
struct MaskSums {
    w: usize,
    s: Vec<u32>,
}

impl MaskSums {
    fn new(sample: &Sample) -> Self {
        let (h, w) = (sample.height, sample.width);
        let mut s = vec![0u32; (h + 1) * (w + 1)];
        for y in 0..h {
            for x in 0..w {
                let v = (sample.obj[y * w + x] > 0) as u32;
                s[(y + 1) * (w + 1) + x + 1] = v + s[y * (w + 1) + x + 1] + s[(y + 1) * (w + 1) + x] - s[y * (w + 1) + x];
            }
        }
        MaskSums { w: w + 1, s }
    }

    fn count(&self, r: Rect) -> u32 {
        let at = |x: usize, y: usize| self.s[y * self.w + x];
        at(r.x1, r.y1) + at(r.x0, r.y0) - at(r.x0, r.y1) - at(r.x1, r.y0)
    }
}

/// Covers a fraction of the union object mask within `coverage` by a grey
/// textured rectangle. Labels are left as they were.
///
/// Each attempt seeds a 1×1 rectangle on a random object pixel and grows it
/// one row or column at a time towards a random target fraction, keeping
/// the size closest to the target. After 100 attempts without landing in
/// range, the closest result is returned with `in_range == false`.
pub fn apply_occlusion(sample: &Sample, rng: &mut Prng, coverage: [f64; 2]) -> Result<Occluded> {
    let [lo, hi] = coverage;
    if !(0.0 < lo && lo <= hi && hi < 1.0) {
        return Err(Error::Invalid(format!("coverage range [{lo}, {hi}]")));
    }
    let (h, w) = (sample.height, sample.width);
    let object: Vec<usize> = (0..h * w).filter(|&i| sample.obj[i] > 0).collect();
    if object.is_empty() {
        return Err(Error::Invalid("sample has no object pixels".into()));
    }
    let total = object.len() as f64;
    let sums = MaskSums::new(sample);
    let frac = |r: Rect| sums.count(r) as f64 / total;
    let miss = |f: f64| if f < lo { lo - f } else if f > hi { f - hi } else { 0.0 };

    let mut best: Option<(f64, Rect)> = None;
    for _ in 0..100 {
        let target = lo + (hi - lo) * unit(rng);
        let seed = object[int_in(rng, 0, object.len() as i64 - 1) as usize];
        let mut r = Rect { x0: seed % w, y0: seed / w, x1: seed % w + 1, y1: seed / w + 1 };
        let mut closest = (f64::INFINITY, r);
        loop {
            let f = frac(r);
            if (f - target).abs() < closest.0 {
                closest = ((f - target).abs(), r);
            }
            if f >= target {
                break;
            }
            let mut grow = [(r.x0 > 0, 0), (r.x1 < w, 1), (r.y0 > 0, 2), (r.y1 < h, 3)]
                .into_iter()
                .filter(|g| g.0)
                .map(|g| g.1)
                .collect::<Vec<_>>();
            if grow.is_empty() {
                break;
            }
            match grow.swap_remove(int_in(rng, 0, grow.len() as i64 - 1) as usize) {
                0 => r.x0 -= 1,
                1 => r.x1 += 1,
                2 => r.y0 -= 1,
                _ => r.y1 += 1,
            }
        }
        let r = closest.1;
        let f = frac(r);
        if best.is_none_or(|(bf, _)| miss(f) < miss(bf)) {
            best = Some((f, r));
        }
        if miss(f) == 0.0 {
            break;
        }
    }
    let (coverage, rect) = best.expect("at least one attempt");
    let mut out = sample.clone();
    for y in rect.y0..rect.y1 {
        for x in rect.x0..rect.x1 {
            let tex = if (x / 2 + y / 2) % 2 == 0 { 112 } else { 144 };
            let v = (tex + int_in(rng, -12, 12)) as u8;
            let i = (y * w + x) * 3;
            out.image[i..i + 3].fill(v);
        }
    }
    Ok(Occluded { sample: out, rect, coverage, in_range: miss(coverage) == 0.0 })
}

/// Writes samples in the `LGSYN1` layout. All samples must share one size.
pub fn dataset_write(path: &Path, samples: &[Sample]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(&dataset_bytes(samples)?)?;
    f.flush()?;
    Ok(())
}

pub fn dataset_bytes(samples: &[Sample]) -> Result<Vec<u8>> {
    let (h, w) = samples.first().map_or((0, 0), |s| (s.height, s.width));
    if h > u16::MAX as usize || w > u16::MAX as usize {
        return Err(Error::Invalid(format!("image {h}x{w} too large for the dataset header")));
    }
    let mut out = Vec::with_capacity(21 + samples.len() * h * w * 5);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(samples.len() as u32).to_le_bytes());
    out.extend_from_slice(&(h as u16).to_le_bytes());
    out.extend_from_slice(&(w as u16).to_le_bytes());
    out.push((PART_CLASSES - 1) as u8);
    out.push((OBJECT_CLASSES - 1) as u8);
    for s in samples {
        if (s.height, s.width) != (h, w) || s.image.len() != h * w * 3 || s.part.len() != h * w || s.obj.len() != h * w {
            return Err(Error::Invalid("samples in one dataset must share dimensions".into()));
        }
        out.extend_from_slice(&s.image);
        out.extend_from_slice(&s.part);
        out.extend_from_slice(&s.obj);
    }
    Ok(out)
}

pub fn dataset_read(path: &Path) -> Result<Vec<Sample>> {
    dataset_parse(&std::fs::read(path)?)
}

pub fn dataset_parse(bytes: &[u8]) -> Result<Vec<Sample>> {
    let fail = |offset: usize, msg: &str| Error::Format { offset, msg: msg.to_string() };
    let take = |at: usize, n: usize, what: &str| {
        bytes.get(at..at + n).ok_or_else(|| fail(at, &format!("truncated {what}")))
    };
    if take(0, 7, "magic")? != MAGIC {
        return Err(fail(0, "bad magic"));
    }
    let version = u32::from_le_bytes(take(7, 4, "version")?.try_into().unwrap());
    if version != VERSION {
        return Err(fail(7, &format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(take(11, 4, "count")?.try_into().unwrap()) as usize;
    let h = u16::from_le_bytes(take(15, 2, "height")?.try_into().unwrap()) as usize;
    let w = u16::from_le_bytes(take(17, 2, "width")?.try_into().unwrap()) as usize;
    let classes = take(19, 2, "class counts")?;
    if (classes[0] as usize, classes[1] as usize) != (PART_CLASSES - 1, OBJECT_CLASSES - 1) {
        return Err(fail(19, &format!("class counts {}/{} do not match the taxonomy", classes[0], classes[1])));
    }
    let mut at = 21;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let image = take(at, h * w * 3, "image")?.to_vec();
        at += h * w * 3;
        let mut maps = [Vec::new(), Vec::new()];
        for (k, map) in maps.iter_mut().enumerate() {
            let limit = [PART_CLASSES, OBJECT_CLASSES][k];
            let raw = take(at, h * w, "label map")?;
            if let Some(pos) = raw.iter().position(|&v| v as usize >= limit) {
                return Err(fail(at + pos, &format!("label {} out of range", raw[pos])));
            }
            *map = raw.to_vec();
            at += h * w;
        }
        let [part, obj] = maps;
        out.push(Sample { height: h, width: w, image, part, obj });
    }
    if at != bytes.len() {
        return Err(fail(at, "trailing bytes"));
    }
    Ok(out)
}

/// Per-class pixel counts `(part, object)` over a set of samples.
pub fn class_histogram(samples: &[Sample]) -> ([u64; PART_CLASSES], [u64; OBJECT_CLASSES]) {
    let mut part = [0u64; PART_CLASSES];
    let mut obj = [0u64; OBJECT_CLASSES];
    for s in samples {
        s.part.iter().for_each(|&v| part[v as usize] += 1);
        s.obj.iter().for_each(|&v| obj[v as usize] += 1);
    }
    (part, obj)
}
