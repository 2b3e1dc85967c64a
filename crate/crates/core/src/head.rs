//! Multi-stage fusion head.
//!
//! The point features of every stage are stacked and mixed by an MLP; the
//! stage images are resized to full resolution, stacked and mixed by a 1×1
//! conv. The image path is gathered back onto the points, refined, combined
//! with the point path and the initial point embedding, and classified.

use crate::error::{Error, Result};
use crate::layers::{ConvNorm, ConvNormCache, Linear, Mlp, MlpCache};
use crate::params::{join, ParamKind, ParamSet};
use crate::projection::{unflatten, unflatten_backward, ProjectionIndex};
use crate::tensor::backward::bilinear_resize_backward;
use crate::tensor::ops::{bilinear_resize, concat_channels, split_channels, Activation, ConvSpec};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams<T: Real> {
    pub point_mlp: Mlp<T>,
    pub image_fuse: ConvNorm<T>,
    pub group_mlp: Mlp<T>,
    pub refine_mlp: Mlp<T>,
    pub classifier: Linear<T>,
}

impl<T: Real> HeadParams<T> {
    /// `stages` point-feature stages of width `c`, stage images whose widths
    /// sum to `image_widths`, `classes` outputs.
    pub fn new(stages: usize, c: usize, image_widths: usize, classes: usize) -> Self {
        Self {
            point_mlp: Mlp::new(stages * c, c, c),
            image_fuse: ConvNorm::new(1, image_widths, c, ConvSpec::same(1, 1), Activation::Relu),
            group_mlp: Mlp::new(c, c, c),
            refine_mlp: Mlp::new(c, c, c),
            classifier: Linear::new(c, classes),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.out_features()
    }
}

impl<T: Real> ParamSet<T> for HeadParams<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor<T>)) {
        self.point_mlp.visit(&join(prefix, "point_mlp"), f);
        self.image_fuse.visit(&join(prefix, "image_fuse"), f);
        self.group_mlp.visit(&join(prefix, "group_mlp"), f);
        self.refine_mlp.visit(&join(prefix, "refine_mlp"), f);
        self.classifier.visit(&join(prefix, "classifier"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<T>)) {
        self.point_mlp.visit_mut(&join(prefix, "point_mlp"), f);
        self.image_fuse.visit_mut(&join(prefix, "image_fuse"), f);
        self.group_mlp.visit_mut(&join(prefix, "group_mlp"), f);
        self.refine_mlp.visit_mut(&join(prefix, "refine_mlp"), f);
        self.classifier.visit_mut(&join(prefix, "classifier"), f);
    }
}

/// `F_p^out`: MLP over the channel-stacked stage point features.
pub fn fuse_point_path<T: Real>(stage_points: &[Tensor<T>], params: &HeadParams<T>) -> Result<Tensor<T>> {
    let cat = stack_points(stage_points)?;
    params.point_mlp.forward(&cat)
}

fn stack_points<T: Real>(stage_points: &[Tensor<T>]) -> Result<Tensor<T>> {
    let n = stage_points.first().map(|t| t.rows());
    if stage_points.iter().any(|t| t.rank() != 2 || Some(t.rows()) != n) {
        return Err(Error::dim("fuse_point_path: stages disagree on point count"));
    }
    let refs: Vec<&Tensor<T>> = stage_points.iter().collect();
    concat_channels(&refs)
}

fn stack_images<T: Real>(stage_images: &[Tensor<T>], h: usize, w: usize) -> Result<Tensor<T>> {
    let resized = stage_images
        .iter()
        .map(|img| bilinear_resize(img, h, w))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Tensor<T>> = resized.iter().collect();
    concat_channels(&refs)
}

/// `F_g^out`: stage images resized to `(h, w)`, stacked, pointwise conv.
pub fn fuse_image_path<T: Real>(
    stage_images: &[Tensor<T>],
    h: usize,
    w: usize,
    params: &HeadParams<T>,
) -> Result<Tensor<T>> {
    params.image_fuse.forward(&stack_images(stage_images, h, w)?)
}

/// Per-point class scores from the two fused paths and `F_p^0`.
pub fn logits<T: Real>(
    fg_out: &Tensor<T>,
    fp_out: &Tensor<T>,
    fp0: &Tensor<T>,
    index: &ProjectionIndex,
    params: &HeadParams<T>,
) -> Result<Tensor<T>> {
    let gathered = unflatten(fg_out, index)?;
    let group = params.group_mlp.forward(&gathered)?;
    let refined = params.refine_mlp.forward(&group.add(fp_out)?)?;
    params.classifier.forward(&refined.add(fp0)?)
}

/// Row-wise argmax; ties go to the lowest class index.
pub fn predict<T: Real>(scores: &Tensor<T>) -> Result<Vec<u32>> {
    let (_, k) = scores.nc()?;
    if k == 0 {
        return Err(Error::dim("predict: scores have no classes"));
    }
    Ok((0..scores.rows())
        .map(|r| {
            let row = scores.row(r);
            let mut best = 0;
            for (i, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = i;
                }
            }
            best as u32
        })
        .collect())
}

/// Everything the head consumes.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadInputs<T: Real> {
    pub stage_points: Vec<Tensor<T>>,
    pub stage_images: Vec<Tensor<T>>,
    pub fp0: Tensor<T>,
}

impl<T: Real> ParamSet<T> for HeadInputs<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor<T>)) {
        self.stage_points.visit(&join(prefix, "stage_points"), f);
        self.stage_images.visit(&join(prefix, "stage_images"), f);
        self.fp0.visit(&join(prefix, "fp0"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<T>)) {
        self.stage_points.visit_mut(&join(prefix, "stage_points"), f);
        self.stage_images.visit_mut(&join(prefix, "stage_images"), f);
        self.fp0.visit_mut(&join(prefix, "fp0"), f);
    }
}

#[derive(Clone, Debug)]
pub struct HeadCache<T: Real> {
    points_cat: Tensor<T>,
    point_mlp: MlpCache<T>,
    images_cat: Tensor<T>,
    image_fuse: ConvNormCache<T>,
    gathered: Tensor<T>,
    group_mlp: MlpCache<T>,
    group_sum: Tensor<T>,
    refine_mlp: MlpCache<T>,
    pre_class: Tensor<T>,
}

/// Full head forward: `inputs → scores`, keeping intermediates.
pub fn head_forward_cached<T: Real>(
    inputs: &HeadInputs<T>,
    index: &ProjectionIndex,
    params: &HeadParams<T>,
) -> Result<(Tensor<T>, HeadCache<T>)> {
    let (h, w) = index.resolution();
    let points_cat = stack_points(&inputs.stage_points)?;
    let (fp_out, point_mlp) = params.point_mlp.forward_cached(&points_cat)?;
    let images_cat = stack_images(&inputs.stage_images, h, w)?;
    let image_fuse = params.image_fuse.forward_cached(&images_cat)?;
    let gathered = unflatten(&image_fuse.out, index)?;
    let (group, group_mlp) = params.group_mlp.forward_cached(&gathered)?;
    let group_sum = group.add(&fp_out)?;
    let (refined, refine_mlp) = params.refine_mlp.forward_cached(&group_sum)?;
    let pre_class = refined.add(&inputs.fp0)?;
    let scores = params.classifier.forward(&pre_class)?;
    Ok((
        scores,
        HeadCache {
            points_cat,
            point_mlp,
            images_cat,
            image_fuse,
            gathered,
            group_mlp,
            group_sum,
            refine_mlp,
            pre_class,
        },
    ))
}

pub fn head_forward<T: Real>(inputs: &HeadInputs<T>, index: &ProjectionIndex, params: &HeadParams<T>) -> Result<Tensor<T>> {
    Ok(head_forward_cached(inputs, index, params)?.0)
}

/// Gradients of [`head_forward`] with respect to its inputs and parameters.
pub fn head_backward<T: Real>(
    inputs: &HeadInputs<T>,
    index: &ProjectionIndex,
    params: &HeadParams<T>,
    cache: &HeadCache<T>,
    d_scores: &Tensor<T>,
) -> Result<(HeadInputs<T>, HeadParams<T>)> {
    let (d_pre, classifier) = params.classifier.backward(&cache.pre_class, d_scores)?;
    let (d_sum, refine_mlp) = params.refine_mlp.backward(&cache.group_sum, &cache.refine_mlp, &d_pre)?;
    let (d_gathered, group_mlp) = params.group_mlp.backward(&cache.gathered, &cache.group_mlp, &d_sum)?;
    let d_image = unflatten_backward(&d_gathered, index)?;
    let (d_images_cat, image_fuse) = params.image_fuse.backward(&cache.images_cat, &cache.image_fuse, &d_image)?;
    let (d_points_cat, point_mlp) = params.point_mlp.backward(&cache.points_cat, &cache.point_mlp, &d_sum)?;

    let point_widths: Vec<usize> = inputs.stage_points.iter().map(|t| t.channels()).collect();
    let stage_points = split_channels(&d_points_cat, &point_widths)?;
    let image_widths: Vec<usize> = inputs.stage_images.iter().map(|t| t.channels()).collect();
    let stage_images = split_channels(&d_images_cat, &image_widths)?
        .iter()
        .zip(&inputs.stage_images)
        .map(|(d, img)| bilinear_resize_backward(d, img.shape()[0], img.shape()[1]))
        .collect::<Result<Vec<_>>>()?;
    Ok((
        HeadInputs {
            stage_points,
            stage_images,
            fp0: d_pre,
        },
        HeadParams {
            point_mlp,
            image_fuse,
            group_mlp,
            refine_mlp,
            classifier,
        },
    ))
}
