//! The three-level representation: pixel features from a convolution stem,
//! superpixels refined by local cross-attention (SCA), and group tokens
//! exchanging information with superpixels (GCA).

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::blocks::{
    cross_attention, ffn, layer_norm, layer_scale, linear, vit_block, FfnParams, Init, LayerNormParams,
    LayerScaleParams, LinearParams, MhsaParams, ViTBlockParams,
};
use crate::numerics::{Graph, PairList, ParamId, Scalar, Var};
use crate::{Error, Result};

/// Superpixel cell size in pixels, per axis.
pub const SP_STRIDE: usize = 4;

/// Pixel features `[h × w × channels]` at `stride` relative to the image.
#[derive(Clone, Copy, Debug)]
pub struct PixelGrid {
    pub features: Var,
    pub h: usize,
    pub w: usize,
    pub channels: usize,
    pub stride: usize,
}

impl PixelGrid {
    pub fn len(&self) -> usize {
        self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Superpixel tokens `[h·w × channels]`, row-major over the cell grid.
#[derive(Clone, Copy, Debug)]
pub struct SuperpixelGrid {
    pub tokens: Var,
    pub h: usize,
    pub w: usize,
    pub channels: usize,
}

impl SuperpixelGrid {
    pub fn len(&self) -> usize {
        self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Group tokens `[n × channels]`.
#[derive(Clone, Copy, Debug)]
pub struct GroupSet {
    pub tokens: Var,
    pub n: usize,
    pub channels: usize,
}

/// Candidate superpixels of every pixel: the 3×3 block of cells around the
/// pixel's own cell. Stored as (superpixel, pixel) pairs ordered by pixel,
/// then by candidate row-major offset, so the pixel-side grouping lists each
/// pixel's candidates in a fixed order and the superpixel-side grouping is
/// the neighborhood `N_p`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CandidateMap {
    pixel_h: usize,
    pixel_w: usize,
    pairs: Arc<PairList>,
}

impl CandidateMap {
    fn build(i_h: usize, i_w: usize, torus: bool) -> Result<Self> {
        if i_h == 0 || i_w == 0 || !i_h.is_multiple_of(SP_STRIDE) || !i_w.is_multiple_of(SP_STRIDE) {
            return Err(Error::Geometry(format!(
                "pixel grid {i_h}×{i_w} is not divisible into {SP_STRIDE}×{SP_STRIDE} cells"
            )));
        }
        let (s_h, s_w) = (i_h / SP_STRIDE, i_w / SP_STRIDE);
        if torus && (s_h < 3 || s_w < 3) {
            return Err(Error::Geometry(format!("torus candidate map needs ≥ 3×3 cells, got {s_h}×{s_w}")));
        }
        let mut pairs = Vec::with_capacity(i_h * i_w * 9);
        for y in 0..i_h {
            for x in 0..i_w {
                let (cy, cx) = ((y / SP_STRIDE) as isize, (x / SP_STRIDE) as isize);
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (mut ny, mut nx) = (cy + dy, cx + dx);
                        if torus {
                            ny = ny.rem_euclid(s_h as isize);
                            nx = nx.rem_euclid(s_w as isize);
                        } else if ny < 0 || nx < 0 || ny >= s_h as isize || nx >= s_w as isize {
                            continue;
                        }
                        pairs.push((ny as usize * s_w + nx as usize, y * i_w + x));
                    }
                }
            }
        }
        Ok(CandidateMap { pixel_h: i_h, pixel_w: i_w, pairs: Arc::new(PairList::new(s_h * s_w, i_h * i_w, pairs)) })
    }

    /// (superpixel, pixel) pairs; superpixels are the left side.
    pub fn pairs(&self) -> &Arc<PairList> {
        &self.pairs
    }

    pub fn pixel_dims(&self) -> (usize, usize) {
        (self.pixel_h, self.pixel_w)
    }

    pub fn superpixel_dims(&self) -> (usize, usize) {
        (self.pixel_h / SP_STRIDE, self.pixel_w / SP_STRIDE)
    }

    pub fn pixel_count(&self) -> usize {
        self.pixel_h * self.pixel_w
    }

    pub fn superpixel_count(&self) -> usize {
        self.pairs.n_left()
    }

    /// Pair positions belonging to `pixel`, in candidate order.
    pub fn pixel_pairs(&self, pixel: usize) -> &[u32] {
        self.pairs.by_right().get(pixel)
    }

    /// Candidate superpixels of `pixel`.
    pub fn candidates(&self, pixel: usize) -> impl Iterator<Item = usize> + '_ {
        self.pixel_pairs(pixel).iter().map(|&e| self.pairs.left()[e as usize] as usize)
    }

    /// Pixels attended to by superpixel `sp`.
    pub fn neighborhood(&self, sp: usize) -> impl Iterator<Item = usize> + '_ {
        self.pairs.by_left().get(sp).iter().map(|&e| self.pairs.right()[e as usize] as usize)
    }
}

/// Candidate map clipped at the grid border.
pub fn build_candidate_map(i_h: usize, i_w: usize) -> Result<CandidateMap> {
    CandidateMap::build(i_h, i_w, false)
}

/// Candidate map on a torus: windows wrap around the grid edges, so every
/// pixel has exactly 9 candidates. Used to test translation equivariance.
pub fn build_candidate_map_torus(i_h: usize, i_w: usize) -> Result<CandidateMap> {
    CandidateMap::build(i_h, i_w, true)
}

#[derive(Clone, Copy, Debug)]
pub struct StemStage {
    pub w: ParamId,
    pub b: ParamId,
    pub ln: LayerNormParams,
    pub kernel: usize,
}

/// Stride-2 patchify stages (2×2 kernel, conv → LN → GELU), one per factor
/// of two in `stride`. A stride of 1 uses a single 1×1 stage.
#[derive(Clone, Debug)]
pub struct StemParams {
    pub stages: Vec<StemStage>,
    pub stride: usize,
    pub channels: usize,
}

pub fn init_stem<S: Scalar>(init: &mut Init<'_, S>, name: &str, stride: usize, channels: usize) -> Result<StemParams> {
    if stride == 0 || !stride.is_power_of_two() {
        return Err(Error::Config(format!("stem stride must be a power of two, got {stride}")));
    }
    let (n, kernel) = if stride == 1 { (1, 1) } else { (stride.trailing_zeros() as usize, 2) };
    let mut stages = Vec::with_capacity(n);
    let mut cin = 3;
    for i in 0..n {
        stages.push(StemStage {
            w: init.weight(&format!("{name}.{i}.w"), &[kernel, kernel, cin, channels])?,
            b: init.constant(&format!("{name}.{i}.b"), &[channels], 0.0)?,
            ln: init.layer_norm(&format!("{name}.{i}.ln"), channels)?,
            kernel,
        });
        cin = channels;
    }
    Ok(StemParams { stages, stride, channels })
}

/// Image `[m_h × m_w × 3]` to pixel features at stride σ₀.
pub fn conv_stem<S: Scalar>(g: &mut Graph<S>, image: Var, p: &StemParams) -> Result<PixelGrid> {
    let shape = g.shape(image).to_vec();
    let (m_h, m_w) = match shape[..] {
        [h, w, 3] => (h, w),
        _ => return Err(Error::Geometry(format!("stem expects an h×w×3 image, got {shape:?}"))),
    };
    if m_h % p.stride != 0 || m_w % p.stride != 0 {
        return Err(Error::Geometry(format!("image {m_h}×{m_w} is not divisible by stem stride {}", p.stride)));
    }
    let mut x = image;
    for st in &p.stages {
        let (w, b) = (g.param(st.w), g.param(st.b));
        x = g.conv2d(x, w, Some(b), st.kernel, 0)?;
        x = layer_norm(g, x, &st.ln)?;
        x = g.gelu(x)?;
    }
    Ok(PixelGrid { features: x, h: m_h / p.stride, w: m_w / p.stride, channels: p.channels, stride: p.stride })
}

/// 4×4 average pooling of pixel features followed by a projection to the
/// superpixel width.
pub fn superpixel_init<S: Scalar>(g: &mut Graph<S>, p: &PixelGrid, proj: &LinearParams) -> Result<SuperpixelGrid> {
    if !p.h.is_multiple_of(SP_STRIDE) || !p.w.is_multiple_of(SP_STRIDE) {
        return Err(Error::Geometry(format!("pixel grid {}×{} is not divisible by {SP_STRIDE}", p.h, p.w)));
    }
    let (h, w) = (p.h / SP_STRIDE, p.w / SP_STRIDE);
    let pooled = g.avg_pool2d(p.features, SP_STRIDE, SP_STRIDE)?;
    let tokens = g.reshape(pooled, &[h * w, p.channels])?;
    let tokens = linear(g, tokens, proj)?;
    Ok(SuperpixelGrid { tokens, h, w, channels: proj.fan_out })
}

/// Query projection for superpixels, key/value projections for pixels, each
/// behind its own LayerNorm. No output projection: the aggregated values are
/// added to the superpixels directly.
#[derive(Clone, Copy, Debug)]
pub struct ScaParams {
    pub ln_s: LayerNormParams,
    pub ln_i: LayerNormParams,
    pub q: LinearParams,
    pub k: LinearParams,
    pub v: LinearParams,
    pub heads: usize,
}

pub fn init_sca<S: Scalar>(
    init: &mut Init<'_, S>,
    name: &str,
    sp_channels: usize,
    pixel_channels: usize,
    heads: usize,
) -> Result<ScaParams> {
    if heads == 0 || !sp_channels.is_multiple_of(heads) {
        return Err(Error::Config(format!("{name}: {heads} heads do not divide superpixel width {sp_channels}")));
    }
    Ok(ScaParams {
        ln_s: init.layer_norm(&format!("{name}.ln_s"), sp_channels)?,
        ln_i: init.layer_norm(&format!("{name}.ln_i"), pixel_channels)?,
        q: init.linear(&format!("{name}.q"), sp_channels, sp_channels)?,
        k: init.linear(&format!("{name}.k"), pixel_channels, sp_channels)?,
        v: init.linear(&format!("{name}.v"), pixel_channels, sp_channels)?,
        heads,
    })
}

/// `S_p ← S_p + Σ_{i∈N_p} softmax_i(q_p·k_i / √d) v_i`, per head.
///
/// Also returns the pre-softmax logits `[heads × pairs]` in candidate-map
/// pair order, for association capture.
pub fn sca_block<S: Scalar>(
    g: &mut Graph<S>,
    s: &SuperpixelGrid,
    p: &PixelGrid,
    cmap: &CandidateMap,
    params: &ScaParams,
) -> Result<(SuperpixelGrid, Var)> {
    if cmap.pixel_dims() != (p.h, p.w) || cmap.superpixel_dims() != (s.h, s.w) {
        return Err(Error::Geometry(format!(
            "SCA: pixels {}×{} / superpixels {}×{} do not match candidate map {:?}/{:?}",
            p.h,
            p.w,
            s.h,
            s.w,
            cmap.pixel_dims(),
            cmap.superpixel_dims()
        )));
    }
    let pixels = g.reshape(p.features, &[p.len(), p.channels])?;
    let ns = layer_norm(g, s.tokens, &params.ln_s)?;
    let ni = layer_norm(g, pixels, &params.ln_i)?;
    let q = linear(g, ns, &params.q)?;
    let k = linear(g, ni, &params.k)?;
    let v = linear(g, ni, &params.v)?;
    let d = s.channels / params.heads;
    let pairs = cmap.pairs();
    let logits = g.pair_dot(q, k, pairs, params.heads, S::of(1.0 / (d as f64).sqrt()))?;
    let w = g.segment_softmax(logits, pairs.by_left())?;
    let upd = g.pair_aggregate(w, v, pairs)?;
    let tokens = g.add(s.tokens, upd)?;
    Ok((SuperpixelGrid { tokens, ..*s }, logits))
}

/// How group tokens are initialized from superpixels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupInit {
    /// Average pooling over `pool×pool` superpixel cells, then a projection.
    #[default]
    AvgPool,
    /// Image-independent learned tokens.
    Learnable,
    /// Strided `pool×pool` convolution over the superpixel grid.
    Conv,
}

#[derive(Clone, Copy, Debug)]
pub enum GroupInitParams {
    AvgPool { proj: LinearParams },
    Learnable { tokens: ParamId },
    Conv { w: ParamId, b: ParamId },
}

#[derive(Clone, Copy, Debug)]
pub struct GroupParams {
    pub init: GroupInitParams,
    pub pool: usize,
    pub n: usize,
}

pub fn init_group<S: Scalar>(
    init: &mut Init<'_, S>,
    name: &str,
    kind: GroupInit,
    sp_dims: (usize, usize),
    channels: usize,
    pool: usize,
) -> Result<GroupParams> {
    let (s_h, s_w) = sp_dims;
    if pool == 0 || s_h % pool != 0 || s_w % pool != 0 {
        return Err(Error::Config(format!("group pool {pool} does not divide superpixel grid {s_h}×{s_w}")));
    }
    let n = (s_h / pool) * (s_w / pool);
    let p = match kind {
        GroupInit::AvgPool => GroupInitParams::AvgPool { proj: init.linear(&format!("{name}.proj"), channels, channels)? },
        GroupInit::Learnable => GroupInitParams::Learnable { tokens: init.weight(&format!("{name}.tokens"), &[n, channels])? },
        GroupInit::Conv => GroupInitParams::Conv {
            w: init.weight(&format!("{name}.w"), &[pool, pool, channels, channels])?,
            b: init.constant(&format!("{name}.b"), &[channels], 0.0)?,
        },
    };
    Ok(GroupParams { init: p, pool, n })
}

pub fn group_init<S: Scalar>(g: &mut Graph<S>, s: &SuperpixelGrid, p: &GroupParams) -> Result<GroupSet> {
    if !s.h.is_multiple_of(p.pool) || !s.w.is_multiple_of(p.pool) || (s.h / p.pool) * (s.w / p.pool) != p.n {
        return Err(Error::Geometry(format!(
            "superpixel grid {}×{} does not pool by {} into {} groups",
            s.h, s.w, p.pool, p.n
        )));
    }
    let c = s.channels;
    let tokens = match p.init {
        GroupInitParams::AvgPool { proj } => {
            let grid = g.reshape(s.tokens, &[s.h, s.w, c])?;
            let pooled = g.avg_pool2d(grid, p.pool, p.pool)?;
            let flat = g.reshape(pooled, &[p.n, c])?;
            linear(g, flat, &proj)?
        }
        GroupInitParams::Learnable { tokens } => g.param(tokens),
        GroupInitParams::Conv { w, b } => {
            let grid = g.reshape(s.tokens, &[s.h, s.w, c])?;
            let (w, b) = (g.param(w), g.param(b));
            let out = g.conv2d(grid, w, Some(b), p.pool, 0)?;
            g.reshape(out, &[p.n, c])?
        }
    };
    Ok(GroupSet { tokens, n: p.n, channels: c })
}

/// One direction of GCA: `x ← x + γ·FFN(LN(CA(LN(x), LN(ctx))))`.
#[derive(Clone, Copy, Debug)]
pub struct CrossUpdateParams {
    pub ln_q: LayerNormParams,
    pub ln_kv: LayerNormParams,
    pub attn: MhsaParams,
    pub ln_ffn: LayerNormParams,
    pub ffn: FfnParams,
    pub ls: LayerScaleParams,
}

#[derive(Clone, Copy, Debug)]
pub struct GcaParams {
    pub s2g: CrossUpdateParams,
    pub block: ViTBlockParams,
    pub g2s: CrossUpdateParams,
}

fn init_cross_update<S: Scalar>(
    init: &mut Init<'_, S>,
    name: &str,
    dim: usize,
    heads: usize,
    mlp_ratio: usize,
) -> Result<CrossUpdateParams> {
    Ok(CrossUpdateParams {
        ln_q: init.layer_norm(&format!("{name}.ln_q"), dim)?,
        ln_kv: init.layer_norm(&format!("{name}.ln_kv"), dim)?,
        attn: init.mhsa(&format!("{name}.attn"), dim, heads)?,
        ln_ffn: init.layer_norm(&format!("{name}.ln_ffn"), dim)?,
        ffn: init.ffn(&format!("{name}.mlp"), dim, dim * mlp_ratio)?,
        ls: init.layer_scale(&format!("{name}.ls"), dim)?,
    })
}

pub fn init_gca<S: Scalar>(
    init: &mut Init<'_, S>,
    name: &str,
    dim: usize,
    heads: usize,
    mlp_ratio: usize,
) -> Result<GcaParams> {
    Ok(GcaParams {
        s2g: init_cross_update(init, &format!("{name}.s2g"), dim, heads, mlp_ratio)?,
        block: init.vit_block(&format!("{name}.block"), dim, heads, mlp_ratio)?,
        g2s: init_cross_update(init, &format!("{name}.g2s"), dim, heads, mlp_ratio)?,
    })
}

fn cross_update<S: Scalar>(g: &mut Graph<S>, x: Var, ctx: Var, p: &CrossUpdateParams) -> Result<(Var, Var)> {
    let q = layer_norm(g, x, &p.ln_q)?;
    let kv = layer_norm(g, ctx, &p.ln_kv)?;
    let (a, w) = cross_attention(g, q, kv, &p.attn)?;
    let a = layer_norm(g, a, &p.ln_ffn)?;
    let f = ffn(g, a, &p.ffn)?;
    let f = layer_scale(g, f, &p.ls)?;
    Ok((g.add(x, f)?, w))
}

#[derive(Clone, Copy, Debug)]
pub struct GcaOutput {
    pub groups: GroupSet,
    pub superpixels: SuperpixelGrid,
    /// `[heads × groups × superpixels]`
    pub s2g_weights: Var,
    /// `[heads × superpixels × groups]`
    pub g2s_weights: Var,
}

/// S2G update of the groups, a ViT block over the groups, then the G2S
/// update of the superpixels.
pub fn gca_stage<S: Scalar>(g: &mut Graph<S>, groups: &GroupSet, s: &SuperpixelGrid, p: &GcaParams) -> Result<GcaOutput> {
    if groups.channels != s.channels {
        return Err(Error::shape("gca_stage", &[groups.n, groups.channels], &[s.len(), s.channels]));
    }
    let (gt, s2g_weights) = cross_update(g, groups.tokens, s.tokens, &p.s2g)?;
    let gt = vit_block(g, gt, &p.block)?;
    let (st, g2s_weights) = cross_update(g, s.tokens, gt, &p.g2s)?;
    Ok(GcaOutput {
        groups: GroupSet { tokens: gt, ..*groups },
        superpixels: SuperpixelGrid { tokens: st, ..*s },
        s2g_weights,
        g2s_weights,
    })
}
