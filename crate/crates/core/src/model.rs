//! The assembled model: stem, SCA/ViT trunk, part and object branches,
//! association-aware upsampling, losses, optimizer and checkpoints.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assoc::{
    graph_group_to_sp, graph_pix_sp_weights, graph_sp_to_pix, pix_sp_assoc, sp_group_assoc, AssocPixSp, AssocSpGroup,
};
use crate::blocks::{layer_norm, linear, vit_block, Init, LayerNormParams, LinearParams, ViTBlockParams};
use crate::hierarchy::{
    build_candidate_map, conv_stem, gca_stage, group_init, init_gca, init_group, init_sca, init_stem, sca_block,
    superpixel_init, CandidateMap, GcaParams, GroupInit, GroupParams, ScaParams, StemParams, SP_STRIDE,
};
use crate::numerics::{Graph, ParamStore, Scalar, Tensor, Var};
use crate::rng::seeded;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_h: usize,
    pub image_w: usize,
    /// Stem downsampling σ₀ (a power of two).
    pub stem_stride: usize,
    pub pixel_channels: usize,
    pub sp_channels: usize,
    pub trunk_depth: usize,
    /// 1-based trunk blocks preceded by an SCA block.
    pub sca_before: Vec<usize>,
    pub branch_depth: usize,
    /// GCA stages, placed before the last `gca_stages` object-branch blocks.
    pub gca_stages: usize,
    pub sca_heads: usize,
    pub gca_heads: usize,
    pub vit_heads: usize,
    pub mlp_ratio: usize,
    /// Superpixels per group token; a perfect square.
    pub group_ratio: usize,
    pub group_init: GroupInit,
    /// Part classes including background.
    pub part_classes: usize,
    /// Object classes including background.
    pub object_classes: usize,
    /// Weight of the object loss.
    pub lambda: f64,
    pub layer_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_h: 64,
            image_w: 64,
            stem_stride: 2,
            pixel_channels: 32,
            sp_channels: 48,
            trunk_depth: 4,
            sca_before: vec![1, 3],
            branch_depth: 3,
            gca_stages: 3,
            sca_heads: 2,
            gca_heads: 6,
            vit_heads: 6,
            mlp_ratio: 4,
            group_ratio: 16,
            group_init: GroupInit::AvgPool,
            part_classes: 7,
            object_classes: 3,
            lambda: 1.0,
            layer_scale: 1e-4,
        }
    }
}

fn bad(msg: String) -> Error {
    Error::Config(msg)
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let s = self.stem_stride;
        if s == 0 || !s.is_power_of_two() {
            return Err(bad(format!("stem_stride {s} must be a power of two")));
        }
        if !self.image_h.is_multiple_of(s) || !self.image_w.is_multiple_of(s) {
            return Err(bad(format!("image {}×{} not divisible by stem_stride {s}", self.image_h, self.image_w)));
        }
        let (ph, pw) = self.pixel_dims();
        if ph == 0 || pw == 0 || ph % SP_STRIDE != 0 || pw % SP_STRIDE != 0 {
            return Err(bad(format!("pixel grid {ph}×{pw} not divisible by superpixel stride {SP_STRIDE}")));
        }
        let pool = self.group_pool();
        let (sh, sw) = self.sp_dims();
        if pool * pool != self.group_ratio || sh % pool != 0 || sw % pool != 0 {
            return Err(bad(format!(
                "group_ratio {} must be a square whose root divides the superpixel grid {sh}×{sw}",
                self.group_ratio
            )));
        }
        for (what, h) in [("sca_heads", self.sca_heads), ("gca_heads", self.gca_heads), ("vit_heads", self.vit_heads)] {
            if h == 0 || !self.sp_channels.is_multiple_of(h) {
                return Err(bad(format!("{what} {h} must divide sp_channels {}", self.sp_channels)));
            }
        }
        if self.pixel_channels == 0 || self.mlp_ratio == 0 {
            return Err(bad("pixel_channels and mlp_ratio must be positive".into()));
        }
        if self.trunk_depth == 0 || self.branch_depth == 0 {
            return Err(bad("trunk_depth and branch_depth must be at least 1".into()));
        }
        if self.gca_stages == 0 || self.gca_stages > self.branch_depth {
            return Err(bad(format!("gca_stages {} must lie in 1..={}", self.gca_stages, self.branch_depth)));
        }
        let mut seen = self.sca_before.clone();
        seen.sort_unstable();
        seen.dedup();
        if self.sca_before.is_empty()
            || seen.len() != self.sca_before.len()
            || seen.iter().any(|&i| i == 0 || i > self.trunk_depth)
        {
            return Err(bad(format!(
                "sca_before {:?} must be distinct positions in 1..={}",
                self.sca_before, self.trunk_depth
            )));
        }
        if self.part_classes < 2 || self.object_classes < 2 {
            return Err(bad("class counts include background and must be at least 2".into()));
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(bad(format!("lambda {} must be finite and non-negative", self.lambda)));
        }
        if !self.layer_scale.is_finite() {
            return Err(bad("layer_scale must be finite".into()));
        }
        Ok(())
    }

    pub fn pixel_dims(&self) -> (usize, usize) {
        (self.image_h / self.stem_stride.max(1), self.image_w / self.stem_stride.max(1))
    }

    pub fn sp_dims(&self) -> (usize, usize) {
        let (h, w) = self.pixel_dims();
        (h / SP_STRIDE, w / SP_STRIDE)
    }

    pub fn group_pool(&self) -> usize {
        (self.group_ratio as f64).sqrt().round() as usize
    }

    pub fn group_dims(&self) -> (usize, usize) {
        let (h, w) = self.sp_dims();
        let p = self.group_pool().max(1);
        (h / p, w / p)
    }

    pub fn groups(&self) -> usize {
        let (h, w) = self.group_dims();
        h * w
    }

    /// Canonical serialized form, as echoed into checkpoints.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TrunkLayer {
    pub sca: Option<ScaParams>,
    pub block: ViTBlockParams,
}

/// One object-branch position: an optional GCA stage followed by a ViT
/// block. The block after the final GCA stage is absent, since nothing
/// downstream of it reaches the group tokens.
#[derive(Clone, Copy, Debug)]
pub struct ObjLayer {
    pub gca: Option<GcaParams>,
    pub block: Option<ViTBlockParams>,
}

#[derive(Clone, Debug)]
pub struct ModelParams {
    pub stem: StemParams,
    pub sp_init: LinearParams,
    pub trunk: Vec<TrunkLayer>,
    pub part_blocks: Vec<ViTBlockParams>,
    pub part_norm: LayerNormParams,
    pub part_head: LinearParams,
    pub group: GroupParams,
    pub obj_layers: Vec<ObjLayer>,
    pub obj_norm: LayerNormParams,
    pub obj_head: LinearParams,
}

#[derive(Clone, Debug)]
pub struct Model<S: Scalar> {
    cfg: ModelConfig,
    store: ParamStore<S>,
    params: ModelParams,
    cmap: CandidateMap,
}

/// Name prefix shared by every object-branch parameter.
pub const OBJECT_PREFIX: &str = "obj.";

/// Builds and initializes a model: truncated-normal weights (std 0.02),
/// zero biases, unit LayerNorm gains and LayerScale at `cfg.layer_scale`.
pub fn model_build<S: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<Model<S>> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut rng = seeded(seed);
    let mut init = Init { store: &mut store, rng: &mut rng, layer_scale: cfg.layer_scale };
    let (c, ratio) = (cfg.sp_channels, cfg.mlp_ratio);

    let stem = init_stem(&mut init, "stem", cfg.stem_stride, cfg.pixel_channels)?;
    let sp_init = init.linear("sp_init", cfg.pixel_channels, c)?;
    let trunk = (1..=cfg.trunk_depth)
        .map(|i| {
            let sca = if cfg.sca_before.contains(&i) {
                Some(init_sca(&mut init, &format!("trunk.{i}.sca"), c, cfg.pixel_channels, cfg.sca_heads)?)
            } else {
                None
            };
            Ok(TrunkLayer { sca, block: init.vit_block(&format!("trunk.{i}.block"), c, cfg.vit_heads, ratio)? })
        })
        .collect::<Result<Vec<_>>>()?;
    let part_blocks = (1..=cfg.branch_depth)
        .map(|i| init.vit_block(&format!("part.{i}.block"), c, cfg.vit_heads, ratio))
        .collect::<Result<Vec<_>>>()?;
    let part_norm = init.layer_norm("part.norm", c)?;
    let part_head = init.linear("part.head", c, cfg.part_classes)?;

    let group = init_group(&mut init, "obj.group", cfg.group_init, cfg.sp_dims(), c, cfg.group_pool())?;
    let first_gca = cfg.branch_depth - cfg.gca_stages + 1;
    let obj_layers = (1..=cfg.branch_depth)
        .map(|i| {
            let gca = if i >= first_gca {
                Some(init_gca(&mut init, &format!("obj.{i}.gca"), c, cfg.gca_heads, ratio)?)
            } else {
                None
            };
            let block = if i == cfg.branch_depth {
                None
            } else {
                Some(init.vit_block(&format!("obj.{i}.block"), c, cfg.vit_heads, ratio)?)
            };
            Ok(ObjLayer { gca, block })
        })
        .collect::<Result<Vec<_>>>()?;
    let obj_norm = init.layer_norm("obj.norm", c)?;
    let obj_head = init.linear("obj.head", c, cfg.object_classes)?;

    let (ph, pw) = cfg.pixel_dims();
    Ok(Model {
        cfg: cfg.clone(),
        store,
        params: ModelParams { stem, sp_init, trunk, part_blocks, part_norm, part_head, group, obj_layers, obj_norm, obj_head },
        cmap: build_candidate_map(ph, pw)?,
    })
}

/// How coarse predictions reach the pixel grid.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Upsample {
    /// Through the association matrices.
    #[default]
    Assoc,
    /// Bilinear resizing from the token grids.
    Bilinear,
}

/// Forward-pass switches. The forced associations replace the computed ones
/// and are meant for tests.
#[derive(Clone, Debug, Default)]
pub struct ForwardOptions<S> {
    pub upsample: Upsample,
    /// Per-pair pixel weights in candidate-map order.
    pub forced_pix_sp: Option<Tensor<S>>,
    /// `[s_n × g_n]` superpixel-to-group weights.
    pub forced_sp_group: Option<Tensor<S>>,
}

/// Graph handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct GraphOutput {
    /// `[m_h × m_w × P]`
    pub part_logits: Var,
    /// `[m_h × m_w × O]`
    pub obj_logits: Var,
    /// Last SCA block's logits `[heads × pairs]`.
    pub sca_logits: Var,
    /// Last GCA stage's G2S weights `[heads × s_n × g_n]`.
    pub g2s_weights: Var,
    /// Per-pair pixel weights `[pairs]`.
    pub pix_weights: Var,
    /// `[g_n × O]`
    pub group_logits: Var,
    /// `[s_h × s_w × O]`
    pub obj_sp_logits: Var,
    /// `[i_h × i_w × O]`
    pub obj_pix_logits: Var,
    /// `[s_h × s_w × P]`
    pub part_sp_logits: Var,
    /// `[i_h × i_w × P]`
    pub part_pix_logits: Var,
}

/// Values of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput<S: Scalar> {
    pub part_logits: Tensor<S>,
    pub obj_logits: Tensor<S>,
    pub assoc_pix_sp: AssocPixSp<S>,
    pub assoc_sp_group: AssocSpGroup<S>,
    pub group_logits: Tensor<S>,
    pub obj_sp_logits: Tensor<S>,
    pub obj_pix_logits: Tensor<S>,
    pub part_sp_logits: Tensor<S>,
    pub part_pix_logits: Tensor<S>,
}

/// Normalizes 8-bit RGB to `[h × w × 3]` with mean 0.5 and scale 0.25.
pub fn image_tensor<S: Scalar>(rgb: &[u8], h: usize, w: usize) -> Result<Tensor<S>> {
    if rgb.len() != h * w * 3 {
        return Err(Error::shape("image_tensor", &[rgb.len()], &[h, w, 3]));
    }
    Tensor::new([h, w, 3], rgb.iter().map(|&v| S::of((v as f64 / 255.0 - 0.5) / 0.25)).collect())
}

impl<S: Scalar> Model<S> {
    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore<S> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.store
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn cmap(&self) -> &CandidateMap {
        &self.cmap
    }

    pub fn param_count(&self) -> usize {
        self.store.num_elements()
    }

    fn resize(g: &mut Graph<S>, x: Var, h: usize, w: usize) -> Result<Var> {
        if g.shape(x)[..2] == [h, w] {
            Ok(x)
        } else {
            g.bilinear_resize(x, h, w)
        }
    }

    /// Records the forward pass on `g`, which must be bound to this model's
    /// parameter store (or a structurally identical copy).
    pub fn forward_graph(&self, g: &mut Graph<S>, image: Var, opts: &ForwardOptions<S>) -> Result<GraphOutput> {
        let cfg = &self.cfg;
        let p = &self.params;
        if g.shape(image) != [cfg.image_h, cfg.image_w, 3] {
            return Err(Error::shape("model_forward", g.shape(image), &[cfg.image_h, cfg.image_w, 3]));
        }
        let px = conv_stem(g, image, &p.stem)?;
        let mut s = superpixel_init(g, &px, &p.sp_init)?;
        let mut sca_logits = None;
        for layer in &p.trunk {
            if let Some(sca) = &layer.sca {
                let (next, logits) = sca_block(g, &s, &px, &self.cmap, sca)?;
                s = next;
                sca_logits = Some(logits);
            }
            s.tokens = vit_block(g, s.tokens, &layer.block)?;
        }
        let sca_logits = sca_logits.expect("validated config has an SCA block");

        let mut part = s.tokens;
        for b in &p.part_blocks {
            part = vit_block(g, part, b)?;
        }
        let part = layer_norm(g, part, &p.part_norm)?;
        let part_tokens = linear(g, part, &p.part_head)?;

        let mut os = s;
        let mut groups = None;
        let mut g2s = None;
        for layer in &p.obj_layers {
            if let Some(gca) = &layer.gca {
                let gs = match groups {
                    Some(gs) => gs,
                    None => group_init(g, &os, &p.group)?,
                };
                let out = gca_stage(g, &gs, &os, gca)?;
                groups = Some(out.groups);
                os = out.superpixels;
                g2s = Some(out.g2s_weights);
            }
            if let Some(b) = &layer.block {
                os.tokens = vit_block(g, os.tokens, b)?;
            }
        }
        let (groups, g2s_weights) = (groups.expect("validated config has a GCA stage"), g2s.unwrap());
        let gn = layer_norm(g, groups.tokens, &p.obj_norm)?;
        let group_logits = linear(g, gn, &p.obj_head)?;

        let pix_weights = match &opts.forced_pix_sp {
            Some(w) => {
                AssocPixSp::from_weights(self.cmap.clone(), w.clone())?;
                g.constant(w.clone().reshape([self.cmap.pairs().len()])?)
            }
            None => graph_pix_sp_weights(g, sca_logits, &self.cmap)?,
        };
        let (sh, sw) = cfg.sp_dims();
        let (ih, iw) = cfg.pixel_dims();
        let (pc, oc) = (cfg.part_classes, cfg.object_classes);
        let (part_sp_logits, part_pix_logits, obj_sp_logits, obj_pix_logits) = match opts.upsample {
            Upsample::Assoc => {
                let obj_sp = match &opts.forced_sp_group {
                    Some(a) => {
                        AssocSpGroup::from_weights(a.clone())?;
                        let av = g.constant(a.clone());
                        g.matmul(av, group_logits)?
                    }
                    None => graph_group_to_sp(g, group_logits, g2s_weights)?,
                };
                let part_pix = graph_sp_to_pix(g, part_tokens, pix_weights, &self.cmap)?;
                let obj_pix = graph_sp_to_pix(g, obj_sp, pix_weights, &self.cmap)?;
                let part_sp = g.reshape(part_tokens, &[sh, sw, pc])?;
                let obj_sp = g.reshape(obj_sp, &[sh, sw, oc])?;
                (part_sp, part_pix, obj_sp, obj_pix)
            }
            Upsample::Bilinear => {
                let (gh, gw) = cfg.group_dims();
                let part_sp = g.reshape(part_tokens, &[sh, sw, pc])?;
                let part_pix = Self::resize(g, part_sp, ih, iw)?;
                let og = g.reshape(group_logits, &[gh, gw, oc])?;
                let obj_sp = Self::resize(g, og, sh, sw)?;
                let obj_pix = Self::resize(g, obj_sp, ih, iw)?;
                (part_sp, part_pix, obj_sp, obj_pix)
            }
        };
        let part_logits = Self::resize(g, part_pix_logits, cfg.image_h, cfg.image_w)?;
        let obj_logits = Self::resize(g, obj_pix_logits, cfg.image_h, cfg.image_w)?;
        Ok(GraphOutput {
            part_logits,
            obj_logits,
            sca_logits,
            g2s_weights,
            pix_weights,
            group_logits,
            obj_sp_logits,
            obj_pix_logits,
            part_sp_logits,
            part_pix_logits,
        })
    }

    /// Inference on one normalized image `[m_h × m_w × 3]`.
    pub fn forward(&self, image: &Tensor<S>, opts: &ForwardOptions<S>) -> Result<ForwardOutput<S>> {
        let mut g = Graph::with_params(&self.store);
        let iv = g.constant(image.clone());
        let o = self.forward_graph(&mut g, iv, opts)?;
        let assoc_pix_sp = match &opts.forced_pix_sp {
            Some(w) => AssocPixSp::from_weights(self.cmap.clone(), w.clone())?,
            None => pix_sp_assoc(g.value(o.sca_logits), &self.cmap)?,
        };
        let assoc_sp_group = match &opts.forced_sp_group {
            Some(a) => AssocSpGroup::from_weights(a.clone())?,
            None => sp_group_assoc(g.value(o.g2s_weights))?,
        };
        let v = |x: Var| g.value(x).clone();
        Ok(ForwardOutput {
            part_logits: v(o.part_logits),
            obj_logits: v(o.obj_logits),
            assoc_pix_sp,
            assoc_sp_group,
            group_logits: v(o.group_logits),
            obj_sp_logits: v(o.obj_sp_logits),
            obj_pix_logits: v(o.obj_pix_logits),
            part_sp_logits: v(o.part_sp_logits),
            part_pix_logits: v(o.part_pix_logits),
        })
    }
}

/// Which label maps drive training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Supervision {
    #[default]
    Joint,
    PartOnly,
    ObjectOnly,
}

fn pixel_ce<S: Scalar>(g: &mut Graph<S>, logits: Var, labels: &[u32]) -> Result<Var> {
    let c = g.value(logits).last_dim();
    let n = g.value(logits).len() / c;
    let flat = g.reshape(logits, &[n, c])?;
    g.cross_entropy(flat, labels)
}

/// Mean per-pixel cross-entropy of the part map plus `λ` times that of the
/// object map.
pub fn joint_loss<S: Scalar>(
    g: &mut Graph<S>,
    part_logits: Var,
    obj_logits: Var,
    part_gt: &[u32],
    obj_gt: &[u32],
    lambda: f64,
) -> Result<Var> {
    let lp = pixel_ce(g, part_logits, part_gt)?;
    let lo = pixel_ce(g, obj_logits, obj_gt)?;
    let lo = g.scale(lo, S::of(lambda))?;
    g.add(lp, lo)
}

pub fn supervised_loss<S: Scalar>(
    g: &mut Graph<S>,
    out: &GraphOutput,
    part_gt: &[u32],
    obj_gt: &[u32],
    sup: Supervision,
    lambda: f64,
) -> Result<Var> {
    match sup {
        Supervision::Joint => joint_loss(g, out.part_logits, out.obj_logits, part_gt, obj_gt, lambda),
        Supervision::PartOnly => pixel_ce(g, out.part_logits, part_gt),
        Supervision::ObjectOnly => pixel_ce(g, out.obj_logits, obj_gt),
    }
}

/// `base` until 90% of `total`, a tenth of it until 95%, a hundredth after.
pub fn lr_at(iter: usize, total: usize, base: f64) -> f64 {
    let (i, t) = (iter as u128 * 100, total as u128);
    if i < 90 * t {
        base
    } else if i < 95 * t {
        base / 10.0
    } else {
        base / 100.0
    }
}

/// AdamW with decoupled weight decay, applied to matrices and kernels only
/// (rank ≥ 2); biases, norms and LayerScale gains are not decayed.
#[derive(Clone, Debug)]
pub struct AdamW<S> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(store: &ParamStore<S>, weight_decay: f64) -> Self {
        let zeros: Vec<Tensor<S>> = store.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect();
        AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor<S>], &[Tensor<S>]) {
        (&self.m, &self.v)
    }

    pub fn update(&mut self, store: &mut ParamStore<S>, grads: &[Tensor<S>], lr: f64) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::Invalid(format!(
                "optimizer holds {} moments, store has {} parameters, got {} gradients",
                self.m.len(),
                store.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = S::of(1.0 - b1.powi(t));
        let c2 = S::of(1.0 - b2.powi(t));
        let (lr_s, eps) = (S::of(lr), S::of(self.eps));
        let (b1s, b2s) = (S::of(b1), S::of(b2));
        let (ob1, ob2) = (S::of(1.0 - b1), S::of(1.0 - b2));
        for (i, p) in store.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let g = &grads[i];
            if g.shape() != p.value.shape() {
                return Err(Error::shape("adamw", g.shape(), p.value.shape()));
            }
            let decay = if p.value.rank() >= 2 { S::of(lr * self.weight_decay) } else { S::zero() };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((w, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *w -= decay * *w;
                *mi = b1s * *mi + ob1 * gi;
                *vi = b2s * *vi + ob2 * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *w -= lr_s * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// One supervised image.
#[derive(Clone, Debug)]
pub struct Example<S> {
    pub image: Tensor<S>,
    pub part: Vec<u32>,
    pub obj: Vec<u32>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub grad_norm: f64,
}

fn example_grads<S: Scalar>(model: &Model<S>, ex: &Example<S>, sup: Supervision) -> Result<(f64, Vec<Tensor<S>>)> {
    let mut g = Graph::with_params(model.store());
    let iv = g.constant(ex.image.clone());
    let out = model.forward_graph(&mut g, iv, &ForwardOptions::default())?;
    let loss = supervised_loss(&mut g, &out, &ex.part, &ex.obj, sup, model.cfg.lambda)?;
    g.backward(loss)?;
    let grads = model.store.ids().map(|id| g.grad_or_zero(g.param(id))).collect();
    Ok((g.value(loss).item().as_f64(), grads))
}

/// Batch-mean loss and gradients. Examples are processed in parallel; their
/// gradients are summed in batch order so results do not depend on
/// scheduling.
pub fn loss_and_grads<S: Scalar>(model: &Model<S>, batch: &[Example<S>], sup: Supervision) -> Result<(f64, Vec<Tensor<S>>)> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let per: Vec<(f64, Vec<Tensor<S>>)> =
        batch.par_iter().map(|ex| example_grads(model, ex, sup)).collect::<Result<_>>()?;
    let mut iter = per.into_iter();
    let (mut loss, mut grads) = iter.next().unwrap();
    for (l, gs) in iter {
        loss += l;
        for (a, b) in grads.iter_mut().zip(&gs) {
            a.add_assign(b)?;
        }
    }
    let inv = 1.0 / batch.len() as f64;
    for gr in &mut grads {
        gr.scale_in_place(S::of(inv));
    }
    Ok((loss * inv, grads))
}

/// Forward, backward and one AdamW update on a batch.
pub fn train_step<S: Scalar>(
    model: &mut Model<S>,
    opt: &mut AdamW<S>,
    batch: &[Example<S>],
    lr: f64,
    sup: Supervision,
) -> Result<StepStats> {
    let (loss, grads) = loss_and_grads(model, batch, sup)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("training loss"));
    }
    let grad_norm = grads.iter().flat_map(|t| t.data()).map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
    opt.update(&mut model.store, &grads, lr)?;
    Ok(StepStats { loss, grad_norm })
}

const CKPT_MAGIC: &[u8; 8] = b"LGCKPT\0\0";
const CKPT_VERSION: u32 = 1;

impl<S: Scalar> Model<S> {
    /// Serializes config and parameters: magic, u32 version, u32-prefixed
    /// config JSON, u32 parameter count, then per parameter a u32-prefixed
    /// name, u32 rank, u32 dims and little-endian f64 values.
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        let cfg = self.cfg.canonical_json();
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(cfg.as_bytes());
        out.extend_from_slice(&(self.store.len() as u32).to_le_bytes());
        for p in self.store.iter() {
            out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
            for &d in p.value.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in p.value.data() {
                out.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        }
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CKPT_MAGIC {
            return Err(Error::Format { offset: 0, msg: "not a checkpoint (bad magic)".into() });
        }
        let at = r.pos;
        let version = r.u32()?;
        if version != CKPT_VERSION {
            return Err(Error::Format { offset: at, msg: format!("unsupported checkpoint version {version}") });
        }
        let n = r.u32()? as usize;
        let at = r.pos;
        let cfg: ModelConfig = serde_json::from_slice(r.take(n)?)
            .map_err(|e| Error::Format { offset: at, msg: format!("config: {e}") })?;
        let mut model = model_build::<S>(&cfg, 0)?;
        let count = r.u32()? as usize;
        if count != model.store.len() {
            return Err(Error::Format {
                offset: r.pos,
                msg: format!("checkpoint has {count} parameters, config implies {}", model.store.len()),
            });
        }
        for _ in 0..count {
            let at = r.pos;
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format { offset: at, msg: "parameter name is not UTF-8".into() })?
                .to_string();
            let id = model
                .store
                .id(&name)
                .ok_or_else(|| Error::Format { offset: at, msg: format!("unknown parameter {name:?}") })?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            if shape != model.store.value(id).shape() {
                return Err(Error::Format {
                    offset: at,
                    msg: format!("parameter {name:?} has shape {shape:?}, expected {:?}", model.store.value(id).shape()),
                });
            }
            let numel: usize = shape.iter().product();
            let data = r.take(numel * 8)?;
            let values = data.chunks_exact(8).map(|c| S::of(f64::from_le_bytes(c.try_into().unwrap()))).collect();
            model.store.set(id, Tensor::new(shape, values)?)?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Format { offset: r.pos, msg: "trailing bytes after last parameter".into() });
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_checkpoint_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(Error::Format {
            offset: self.pos,
            msg: format!("truncated: wanted {n} bytes, {} left", self.bytes.len() - self.pos),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
