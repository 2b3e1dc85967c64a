//! Depth-guided point/image feature fusion.
//!
//! Each stage gathers the backbone map back onto the points, mixes it with
//! the running point features under a query computed from point depth,
//! scatters the result back onto the stage grid, and adds it onto the
//! backbone map through a learned sigmoid gate.

use crate::error::{Error, Result, StageContext};
use crate::layers::{ConvNorm, ConvNormCache, Linear};
use crate::params::{join, ParamKind, ParamSet};
use crate::projection::{flatten, flatten_mean_backward, unflatten, unflatten_backward, ProjectionIndex, Reduce};
use crate::tensor::backward::{bilinear_resize_backward, softmax_backward};
use crate::tensor::ops::{bilinear_resize, concat_channels, softmax, split_channels, Activation, ConvSpec};
use crate::tensor::{Real, Tensor};

/// Key, value and query maps of the point/image attention.
#[derive(Clone, Debug, PartialEq)]
pub struct Attention<T: Real> {
    pub key_g: Linear<T>,
    pub value_g: Linear<T>,
    pub key_p: Linear<T>,
    pub value_p: Linear<T>,
    pub query: Linear<T>,
    pub out: Linear<T>,
}

impl<T: Real> Attention<T> {
    /// `image_width` channels gathered from the grid, `point_width` point
    /// channels (also the output width), `attn` attention channels.
    pub fn new(image_width: usize, point_width: usize, attn: usize) -> Self {
        Self {
            key_g: Linear::new(image_width, attn),
            value_g: Linear::new(image_width, attn),
            key_p: Linear::new(point_width, attn),
            value_p: Linear::new(point_width, attn),
            query: Linear::new(1, attn),
            out: Linear::new(attn, point_width),
        }
    }
}

impl<T: Real> ParamSet<T> for Attention<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor<T>)) {
        self.key_g.visit(&join(prefix, "key_g"), f);
        self.value_g.visit(&join(prefix, "value_g"), f);
        self.key_p.visit(&join(prefix, "key_p"), f);
        self.value_p.visit(&join(prefix, "value_p"), f);
        self.query.visit(&join(prefix, "query"), f);
        self.out.visit(&join(prefix, "out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<T>)) {
        self.key_g.visit_mut(&join(prefix, "key_g"), f);
        self.value_g.visit_mut(&join(prefix, "value_g"), f);
        self.key_p.visit_mut(&join(prefix, "key_p"), f);
        self.value_p.visit_mut(&join(prefix, "value_p"), f);
        self.query.visit_mut(&join(prefix, "query"), f);
        self.out.visit_mut(&join(prefix, "out"), f);
    }
}

/// The two 3×3 convolutions producing the enhancement gate.
#[derive(Clone, Debug, PartialEq)]
pub struct Enhance<T: Real> {
    pub gate_inner: ConvNorm<T>,
    pub gate_outer: ConvNorm<T>,
}

impl<T: Real> Enhance<T> {
    pub fn new(width: usize) -> Self {
        Self {
            gate_inner: ConvNorm::new(3, width, width, ConvSpec::same(3, 1), Activation::Relu),
            gate_outer: ConvNorm::new(3, width, width, ConvSpec::same(3, 1), Activation::Sigmoid),
        }
    }
}

impl<T: Real> ParamSet<T> for Enhance<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor<T>)) {
        self.gate_inner.visit(&join(prefix, "gate_inner"), f);
        self.gate_outer.visit(&join(prefix, "gate_outer"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<T>)) {
        self.gate_inner.visit_mut(&join(prefix, "gate_inner"), f);
        self.gate_outer.visit_mut(&join(prefix, "gate_outer"), f);
    }
}

/// All parameters of one fusion stage.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams<T: Real> {
    pub attention: Attention<T>,
    pub reproject: ConvNorm<T>,
    pub enhance: Enhance<T>,
}

impl<T: Real> FusionParams<T> {
    pub fn new(image_width: usize, point_width: usize, attn: usize) -> Self {
        Self {
            attention: Attention::new(image_width, point_width, attn),
            reproject: ConvNorm::new(
                1,
                point_width + image_width,
                image_width,
                ConvSpec::same(1, 1),
                Activation::Relu,
            ),
            enhance: Enhance::new(image_width),
        }
    }
}

impl<T: Real> ParamSet<T> for FusionParams<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor<T>)) {
        self.attention.visit(&join(prefix, "attention"), f);
        self.reproject.visit(&join(prefix, "reproject"), f);
        self.enhance.visit(&join(prefix, "enhance"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<T>)) {
        self.attention.visit_mut(&join(prefix, "attention"), f);
        self.reproject.visit_mut(&join(prefix, "reproject"), f);
        self.enhance.visit_mut(&join(prefix, "enhance"), f);
    }
}

#[derive(Clone, Debug)]
pub struct AttentionCache<T: Real> {
    kg: Tensor<T>,
    vg: Tensor<T>,
    kp: Tensor<T>,
    vp: Tensor<T>,
    q: Tensor<T>,
    pub wg: Tensor<T>,
    pub wp: Tensor<T>,
    pub fused: Tensor<T>,
}

/// Point update: per point, `softmax(Q ⊙ K_g) ⊙ V_g + softmax(Q ⊙ K_p) ⊙ V_p`
/// over the attention channels, then an output linear map.
pub fn depth_attention<T: Real>(
    fg: &Tensor<T>,
    fp: &Tensor<T>,
    depth: &Tensor<T>,
    params: &Attention<T>,
) -> Result<Tensor<T>> {
    Ok(depth_attention_cached(fg, fp, depth, params)?.0)
}

pub fn depth_attention_cached<T: Real>(
    fg: &Tensor<T>,
    fp: &Tensor<T>,
    depth: &Tensor<T>,
    params: &Attention<T>,
) -> Result<(Tensor<T>, AttentionCache<T>)> {
    let (ng, _) = fg.nc()?;
    let (np, _) = fp.nc()?;
    let (nd, one) = depth.nc()?;
    if ng != np || nd != np || one != 1 {
        return Err(Error::dim(format!(
            "depth_attention: gathered {:?}, points {:?}, depth {:?}",
            fg.shape(),
            fp.shape(),
            depth.shape()
        )));
    }
    let kg = params.key_g.forward(fg)?;
    let vg = params.value_g.forward(fg)?;
    let kp = params.key_p.forward(fp)?;
    let vp = params.value_p.forward(fp)?;
    let q = params.query.forward(depth)?;
    let wg = softmax(&q.mul(&kg)?, 1)?;
    let wp = softmax(&q.mul(&kp)?, 1)?;
    let fused = wg.mul(&vg)?.add(&wp.mul(&vp)?)?;
    let out = params.out.forward(&fused)?;
    Ok((
        out,
        AttentionCache {
            kg,
            vg,
            kp,
            vp,
            q,
            wg,
            wp,
            fused,
        },
    ))
}

/// Returns `(d gathered, d points, parameter gradients)`.
pub fn depth_attention_backward<T: Real>(
    fg: &Tensor<T>,
    fp: &Tensor<T>,
    depth: &Tensor<T>,
    params: &Attention<T>,
    cache: &AttentionCache<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Attention<T>)> {
    let (dfused, out) = params.out.backward(&cache.fused, dy)?;
    let dvg = dfused.mul(&cache.wg)?;
    let dvp = dfused.mul(&cache.wp)?;
    let dag = softmax_backward(&cache.wg, &dfused.mul(&cache.vg)?, 1)?;
    let dap = softmax_backward(&cache.wp, &dfused.mul(&cache.vp)?, 1)?;
    let dq = dag.mul(&cache.kg)?.add(&dap.mul(&cache.kp)?)?;
    let dkg = dag.mul(&cache.q)?;
    let dkp = dap.mul(&cache.q)?;
    let (dg_k, key_g) = params.key_g.backward(fg, &dkg)?;
    let (dg_v, value_g) = params.value_g.backward(fg, &dvg)?;
    let (dp_k, key_p) = params.key_p.backward(fp, &dkp)?;
    let (dp_v, value_p) = params.value_p.backward(fp, &dvp)?;
    let (_, query) = params.query.backward(depth, &dq)?;
    Ok((
        dg_k.add(&dg_v)?,
        dp_k.add(&dp_v)?,
        Attention {
            key_g,
            value_g,
            key_p,
            value_p,
            query,
            out,
        },
    ))
}

#[derive(Clone, Debug)]
pub struct ReprojectCache<T: Real> {
    cat: Tensor<T>,
    conv: ConvNormCache<T>,
}

/// Scatters the point features onto `index`'s grid (cell mean), stacks them
/// with `fg` and applies the pointwise conv.
pub fn reproject_fuse<T: Real>(
    fp: &Tensor<T>,
    fg: &Tensor<T>,
    index: &ProjectionIndex,
    params: &ConvNorm<T>,
) -> Result<Tensor<T>> {
    Ok(reproject_fuse_cached(fp, fg, index, params)?.0)
}

pub fn reproject_fuse_cached<T: Real>(
    fp: &Tensor<T>,
    fg: &Tensor<T>,
    index: &ProjectionIndex,
    params: &ConvNorm<T>,
) -> Result<(Tensor<T>, ReprojectCache<T>)> {
    let (h, w, _) = fg.hwc()?;
    if (h, w) != index.resolution() {
        return Err(Error::dim(format!(
            "reproject_fuse: image is {h}x{w}, index is {:?}",
            index.resolution()
        )));
    }
    let flat = flatten(fp, index, Reduce::Mean)?;
    let cat = concat_channels(&[&flat, fg])?;
    let conv = params.forward_cached(&cat)?;
    Ok((conv.out.clone(), ReprojectCache { cat, conv }))
}

/// Returns `(d points, d image, conv gradients)`.
pub fn reproject_fuse_backward<T: Real>(
    fp: &Tensor<T>,
    index: &ProjectionIndex,
    params: &ConvNorm<T>,
    cache: &ReprojectCache<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, ConvNorm<T>)> {
    let (dcat, grads) = params.backward(&cache.cat, &cache.conv, dy)?;
    let cp = fp.channels();
    let cg = cache.cat.channels() - cp;
    let parts = split_channels(&dcat, &[cp, cg])?;
    let dfp = flatten_mean_backward(&parts[0], index)?;
    Ok((dfp, parts[1].clone(), grads))
}

#[derive(Clone, Debug)]
pub struct EnhanceCache<T: Real> {
    inner: ConvNormCache<T>,
    outer: ConvNormCache<T>,
}

impl<T: Real> EnhanceCache<T> {
    pub fn gate(&self) -> &Tensor<T> {
        &self.outer.out
    }
}

/// `base + gate ⊙ fused` with `gate = sigmoid(norm(conv(relu(norm(conv(fused))))))`.
pub fn residual_enhance<T: Real>(fused: &Tensor<T>, base: &Tensor<T>, params: &Enhance<T>) -> Result<Tensor<T>> {
    Ok(residual_enhance_cached(fused, base, params)?.0)
}

pub fn residual_enhance_cached<T: Real>(
    fused: &Tensor<T>,
    base: &Tensor<T>,
    params: &Enhance<T>,
) -> Result<(Tensor<T>, EnhanceCache<T>)> {
    fused.expect_same_shape(base)?;
    let inner = params.gate_inner.forward_cached(fused)?;
    let outer = params.gate_outer.forward_cached(&inner.out)?;
    let out = base.add(&outer.out.mul(fused)?)?;
    Ok((out, EnhanceCache { inner, outer }))
}

/// Returns `(d fused, d base, gate gradients)`.
pub fn residual_enhance_backward<T: Real>(
    fused: &Tensor<T>,
    params: &Enhance<T>,
    cache: &EnhanceCache<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Enhance<T>)> {
    let dgate = dy.mul(fused)?;
    let mut dfused = dy.mul(cache.gate())?;
    let (dinner, gate_outer) = params.gate_outer.backward(&cache.inner.out, &cache.outer, &dgate)?;
    let (dfused_gate, gate_inner) = params.gate_inner.backward(fused, &cache.inner, &dinner)?;
    dfused.add_assign(&dfused_gate)?;
    Ok((dfused, dy.clone(), Enhance { gate_inner, gate_outer }))
}

/// Geometry shared by every fusion stage of one scan.
pub struct StageGeometry<'a, T: Real> {
    /// Full-resolution index, used to gather onto points.
    pub full: &'a ProjectionIndex,
    /// Index at this stage's resolution, used to scatter points back.
    pub stage: &'a ProjectionIndex,
    /// `N × 1` point depths.
    pub depth: &'a Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct FusionCache<T: Real> {
    gathered: Tensor<T>,
    attention: AttentionCache<T>,
    fp: Tensor<T>,
    reproject: ReprojectCache<T>,
    fused: Tensor<T>,
    enhance: EnhanceCache<T>,
}

/// Gathers a stage map onto the full-resolution points, resizing first when
/// the stage is downsampled.
pub fn gather_stage<T: Real>(fg: &Tensor<T>, full: &ProjectionIndex) -> Result<Tensor<T>> {
    let (h, w, _) = fg.hwc()?;
    let (fh, fw) = full.resolution();
    if (h, w) == (fh, fw) {
        unflatten(fg, full)
    } else {
        unflatten(&bilinear_resize(fg, fh, fw)?, full)
    }
}

fn gather_stage_backward<T: Real>(dpoints: &Tensor<T>, fg_shape: &[usize], full: &ProjectionIndex) -> Result<Tensor<T>> {
    let d_full = unflatten_backward(dpoints, full)?;
    if fg_shape[..2] == [full.resolution().0, full.resolution().1] {
        Ok(d_full)
    } else {
        bilinear_resize_backward(&d_full, fg_shape[0], fg_shape[1])
    }
}

/// One fusion stage: `(F_p^{i-1}, backbone output of stage i) → (F_p^i, F_g^i)`.
/// The gated residual is added onto the backbone output of the same stage.
pub fn fusion_stage<T: Real>(
    fp_prev: &Tensor<T>,
    fg_stage: &Tensor<T>,
    geom: &StageGeometry<'_, T>,
    params: &FusionParams<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (fp, fg, _) = fusion_stage_cached(fp_prev, fg_stage, geom, params)?;
    Ok((fp, fg))
}

pub fn fusion_stage_cached<T: Real>(
    fp_prev: &Tensor<T>,
    fg_stage: &Tensor<T>,
    geom: &StageGeometry<'_, T>,
    params: &FusionParams<T>,
) -> Result<(Tensor<T>, Tensor<T>, FusionCache<T>)> {
    let gathered = gather_stage(fg_stage, geom.full).stage("gather")?;
    let (fp, attention) =
        depth_attention_cached(&gathered, fp_prev, geom.depth, &params.attention).stage("depth_attention")?;
    let (fused, reproject) =
        reproject_fuse_cached(&fp, fg_stage, geom.stage, &params.reproject).stage("reproject_fuse")?;
    let (fg, enhance) = residual_enhance_cached(&fused, fg_stage, &params.enhance).stage("residual_enhance")?;
    Ok((
        fp.clone(),
        fg,
        FusionCache {
            gathered,
            attention,
            fp,
            reproject,
            fused,
            enhance,
        },
    ))
}

/// Backward of [`fusion_stage`] given gradients on both outputs. Returns
/// `(d F_p^{i-1}, d backbone output, parameter gradients)`.
pub fn fusion_stage_backward<T: Real>(
    fp_prev: &Tensor<T>,
    fg_stage: &Tensor<T>,
    geom: &StageGeometry<'_, T>,
    params: &FusionParams<T>,
    cache: &FusionCache<T>,
    d_fp: &Tensor<T>,
    d_fg: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, FusionParams<T>)> {
    let (d_fused, mut d_stage, enhance) = residual_enhance_backward(&cache.fused, &params.enhance, &cache.enhance, d_fg)?;
    let (d_fp_reproject, d_stage_reproject, reproject) =
        reproject_fuse_backward(&cache.fp, geom.stage, &params.reproject, &cache.reproject, &d_fused)?;
    d_stage.add_assign(&d_stage_reproject)?;
    let d_fp_total = d_fp.add(&d_fp_reproject)?;
    let (d_gathered, d_fp_prev, attention) = depth_attention_backward(
        &cache.gathered,
        fp_prev,
        geom.depth,
        &params.attention,
        &cache.attention,
        &d_fp_total,
    )?;
    d_stage.add_assign(&gather_stage_backward(&d_gathered, fg_stage.shape(), geom.full)?)?;
    Ok((
        d_fp_prev,
        d_stage,
        FusionParams {
            attention,
            reproject,
            enhance,
        },
    ))
}
