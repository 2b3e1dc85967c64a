//! Finite-difference checks of every hand-written backward pass at toy
//! extents, in `f64`.
//!
//! Each check treats both the block parameters and the block inputs as
//! variables and reduces the block output to `Σ out ⊙ probe`.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::BasicBlock;
use crate::encoder::{aggregate_groups_backward, aggregate_groups_cached, EncoderParams};
use crate::error::Result;
use crate::fusion::{
    depth_attention_backward, depth_attention_cached, fusion_stage_backward, fusion_stage_cached,
    reproject_fuse_backward, reproject_fuse_cached, residual_enhance_backward, residual_enhance_cached, Attention,
    Enhance, FusionParams, StageGeometry,
};
use crate::head::{head_backward, head_forward_cached, HeadInputs, HeadParams};
use crate::layers::{ConvNorm, Linear, Mlp};
use crate::params::{ParamKind, ParamSet};
use crate::projection::{project, BeamTable, ProjectionIndex};
use crate::scan_io::{DatasetConfig, Point, RawScan, IGNORE_ID};
use crate::tensor::check::{grad_check, probe, Differentiable, GradCheckReport, DEFAULT_EPS};
use crate::tensor::ops::{Activation, ConvSpec};
use crate::tensor::Tensor;

/// Pass threshold on the maximum relative error.
pub const TOLERANCE: f64 = 1e-4;

/// Draws every tensor from a range suited to its role: weights and inputs
/// in `(-1, 1)`, biases and shifts in `(-0.5, 0.5)`, scales and variances
/// in `(0.5, 1.5)`.
pub fn randomize(params: &mut impl ParamSet<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    params.visit_mut("", &mut |_, kind, t| {
        let (lo, hi) = match kind {
            ParamKind::Weight { .. } | ParamKind::Input => (-1.0, 1.0),
            ParamKind::Bias | ParamKind::NormShift => (-0.5, 0.5),
            ParamKind::RunningMean => (-0.2, 0.2),
            ParamKind::NormScale | ParamKind::RunningVar => (0.5, 1.5),
        };
        for v in t.data_mut() {
            *v = rng.gen_range(lo..hi);
        }
    });
}

/// A tiny `h × w` sensor and a scan of `n` points on it; the first points
/// come in pairs sharing a direction so that several cells hold more than
/// one point.
pub struct ToyScene {
    pub scan: RawScan,
    pub dataset: DatasetConfig,
    pub index: ProjectionIndex,
}

impl ToyScene {
    pub fn new(h: usize, w: usize, n: usize, seed: u64) -> Result<Self> {
        let dataset = DatasetConfig {
            name: "toy".into(),
            num_beams: h,
            width: w,
            fov_up: 10f64.to_radians(),
            fov_down: (-10f64).to_radians(),
            num_classes: 3,
            label_remap: HashMap::from([(0, 0), (1, 1), (2, 2)]),
            ignore_id: IGNORE_ID,
            class_names: vec!["a".into(), "b".into(), "c".into()],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut points = Vec::with_capacity(n);
        while points.len() < n {
            let elev: f64 = rng.gen_range(-0.15..0.15);
            let az: f64 = rng.gen_range(-3.0..3.0);
            let copies = if points.len() < n / 2 { 2 } else { 1 };
            for _ in 0..copies.min(n - points.len()) {
                let r: f64 = rng.gen_range(2.0..20.0);
                let horiz = r * elev.cos();
                points.push(Point::new(
                    (horiz * az.cos()) as f32,
                    (horiz * az.sin()) as f32,
                    (r * elev.sin()) as f32,
                    rng.gen_range(0.0..1.0),
                ));
            }
        }
        let scan = RawScan::new(points)?;
        let index = project(&scan, &BeamTable::uniform(&dataset)?, &dataset)?;
        Ok(Self { scan, dataset, index })
    }

    pub fn depth(&self) -> Tensor<f64> {
        Tensor::new([self.index.num_points(), 1], self.index.ranges().to_vec()).expect("one depth per point")
    }
}

struct EmbedCheck {
    probe: Tensor<f64>,
}

impl Differentiable for EmbedCheck {
    type Params = (Mlp<f64>, Tensor<f64>);

    fn name(&self) -> &str {
        "embed_points"
    }

    fn loss(&self, (mlp, x): &Self::Params) -> Result<f64> {
        mlp.forward(x)?.dot(&self.probe)
    }

    fn gradient(&self, (mlp, x): &Self::Params) -> Result<Self::Params> {
        let (_, cache) = mlp.forward_cached(x)?;
        let (dx, g) = mlp.backward(x, &cache, &self.probe)?;
        Ok((g, dx))
    }
}

struct BlockCheck {
    probe: Tensor<f64>,
}

impl Differentiable for BlockCheck {
    type Params = (BasicBlock<f64>, Tensor<f64>);

    fn name(&self) -> &str {
        "basic_block"
    }

    fn loss(&self, (block, x): &Self::Params) -> Result<f64> {
        block.forward(x)?.dot(&self.probe)
    }

    fn gradient(&self, (block, x): &Self::Params) -> Result<Self::Params> {
        let cache = block.forward_cached(x)?;
        let (dx, g) = block.backward(x, &cache, &self.probe)?;
        Ok((g, dx))
    }
}

struct AttentionCheck {
    depth: Tensor<f64>,
    probe: Tensor<f64>,
}

impl Differentiable for AttentionCheck {
    type Params = (Attention<f64>, (Tensor<f64>, Tensor<f64>));

    fn name(&self) -> &str {
        "depth_attention"
    }

    fn loss(&self, (p, (fg, fp)): &Self::Params) -> Result<f64> {
        depth_attention_cached(fg, fp, &self.depth, p)?.0.dot(&self.probe)
    }

    fn gradient(&self, (p, (fg, fp)): &Self::Params) -> Result<Self::Params> {
        let (_, cache) = depth_attention_cached(fg, fp, &self.depth, p)?;
        let (dfg, dfp, g) = depth_attention_backward(fg, fp, &self.depth, p, &cache, &self.probe)?;
        Ok((g, (dfg, dfp)))
    }
}

struct EnhanceCheck {
    probe: Tensor<f64>,
}

impl Differentiable for EnhanceCheck {
    type Params = (Enhance<f64>, (Tensor<f64>, Tensor<f64>));

    fn name(&self) -> &str {
        "residual_enhance"
    }

    fn loss(&self, (p, (fused, base)): &Self::Params) -> Result<f64> {
        residual_enhance_cached(fused, base, p)?.0.dot(&self.probe)
    }

    fn gradient(&self, (p, (fused, base)): &Self::Params) -> Result<Self::Params> {
        let (_, cache) = residual_enhance_cached(fused, base, p)?;
        let (dfused, dbase, g) = residual_enhance_backward(fused, p, &cache, &self.probe)?;
        Ok((g, (dfused, dbase)))
    }
}

struct HeadCheck {
    scene: ToyScene,
    probe: Tensor<f64>,
}

impl Differentiable for HeadCheck {
    type Params = (HeadParams<f64>, HeadInputs<f64>);

    fn name(&self) -> &str {
        "fusion_head"
    }

    fn loss(&self, (p, inputs): &Self::Params) -> Result<f64> {
        head_forward_cached(inputs, &self.scene.index, p)?.0.dot(&self.probe)
    }

    fn gradient(&self, (p, inputs): &Self::Params) -> Result<Self::Params> {
        let (_, cache) = head_forward_cached(inputs, &self.scene.index, p)?;
        let (d_inputs, g) = head_backward(inputs, &self.scene.index, p, &cache, &self.probe)?;
        Ok((g, d_inputs))
    }
}

struct AggregateCheck {
    scene: ToyScene,
    channels: usize,
    probe: Tensor<f64>,
}

impl AggregateCheck {
    fn encoder(&self, linear: &Linear<f64>) -> EncoderParams<f64> {
        EncoderParams {
            aggregate: linear.clone(),
            ..EncoderParams::new(self.channels)
        }
    }
}

impl Differentiable for AggregateCheck {
    type Params = (Linear<f64>, Tensor<f64>);

    fn name(&self) -> &str {
        "aggregate_groups"
    }

    fn loss(&self, (linear, fp0): &Self::Params) -> Result<f64> {
        aggregate_groups_cached(fp0, &self.scene.index, &self.encoder(linear))?
            .0
            .dot(&self.probe)
    }

    fn gradient(&self, (linear, fp0): &Self::Params) -> Result<Self::Params> {
        let enc = self.encoder(linear);
        let (_, cache) = aggregate_groups_cached(fp0, &self.scene.index, &enc)?;
        let (dfp, g) = aggregate_groups_backward(fp0, &self.scene.index, &enc, &cache, &self.probe)?;
        Ok((g, dfp))
    }
}

struct ReprojectCheck {
    scene: ToyScene,
    probe: Tensor<f64>,
}

impl Differentiable for ReprojectCheck {
    type Params = (ConvNorm<f64>, (Tensor<f64>, Tensor<f64>));

    fn name(&self) -> &str {
        "reproject_fuse"
    }

    fn loss(&self, (p, (fp, fg)): &Self::Params) -> Result<f64> {
        reproject_fuse_cached(fp, fg, &self.scene.index, p)?.0.dot(&self.probe)
    }

    fn gradient(&self, (p, (fp, fg)): &Self::Params) -> Result<Self::Params> {
        let (_, cache) = reproject_fuse_cached(fp, fg, &self.scene.index, p)?;
        let (dfp, dfg, g) = reproject_fuse_backward(fp, &self.scene.index, p, &cache, &self.probe)?;
        Ok((g, (dfp, dfg)))
    }
}

struct StageCheck {
    scene: ToyScene,
    stage_index: ProjectionIndex,
    depth: Tensor<f64>,
    probe_points: Tensor<f64>,
    probe_image: Tensor<f64>,
}

impl StageCheck {
    fn geometry(&self) -> StageGeometry<'_, f64> {
        StageGeometry {
            full: &self.scene.index,
            stage: &self.stage_index,
            depth: &self.depth,
        }
    }
}

impl Differentiable for StageCheck {
    type Params = (FusionParams<f64>, (Tensor<f64>, Tensor<f64>));

    fn name(&self) -> &str {
        "fusion_stage"
    }

    fn loss(&self, (p, (fp, fg)): &Self::Params) -> Result<f64> {
        let (fp_i, fg_i, _) = fusion_stage_cached(fp, fg, &self.geometry(), p)?;
        Ok(fp_i.dot(&self.probe_points)? + fg_i.dot(&self.probe_image)?)
    }

    fn gradient(&self, (p, (fp, fg)): &Self::Params) -> Result<Self::Params> {
        let geom = self.geometry();
        let (_, _, cache) = fusion_stage_cached(fp, fg, &geom, p)?;
        let (dfp, dfg, g) = fusion_stage_backward(fp, fg, &geom, p, &cache, &self.probe_points, &self.probe_image)?;
        Ok((g, (dfp, dfg)))
    }
}

/// Wraps a check and perturbs its analytic gradient, as a negative control.
struct Corrupted<D>(D);

impl<D: Differentiable> Differentiable for Corrupted<D> {
    type Params = D::Params;

    fn name(&self) -> &str {
        self.0.name()
    }

    fn loss(&self, p: &Self::Params) -> Result<f64> {
        self.0.loss(p)
    }

    fn gradient(&self, p: &Self::Params) -> Result<Self::Params> {
        let mut g = self.0.gradient(p)?;
        let mut done = false;
        g.visit_mut("", &mut |_, kind, t| {
            if !done && kind.is_learnable() && !t.is_empty() {
                t.data_mut()[0] += 1.0;
                done = true;
            }
        });
        Ok(g)
    }
}

fn check<D: Differentiable>(d: D, params: D::Params, corrupt: bool) -> Result<GradCheckReport> {
    if corrupt {
        grad_check(&Corrupted(d), &params, DEFAULT_EPS)
    } else {
        grad_check(&d, &params, DEFAULT_EPS)
    }
}

fn with_random<P: ParamSet<f64>>(mut p: P, seed: u64) -> P {
    randomize(&mut p, seed);
    p
}

/// Names of the checked blocks, in run order.
pub const BLOCKS: [&str; 8] = [
    "embed_points",
    "aggregate_groups",
    "basic_block",
    "depth_attention",
    "reproject_fuse",
    "residual_enhance",
    "fusion_stage",
    "fusion_head",
];

/// Runs one named check. `corrupt` adds a constant to one analytic gradient
/// entry so the check must fail.
pub fn run_block(name: &str, seed: u64, corrupt: bool) -> Result<GradCheckReport> {
    let s = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    match name {
        "embed_points" => check(
            EmbedCheck { probe: probe(&[5, 4], s) },
            with_random((Mlp::new(10, 4, 4), Tensor::zeros([5, 10])), s + 1),
            corrupt,
        ),
        "aggregate_groups" => {
            let scene = ToyScene::new(4, 4, 6, s + 2)?;
            let probe = probe(&[4, 4, 3], s);
            let fp0 = Tensor::zeros([6, 3]);
            check(
                AggregateCheck { scene, channels: 3, probe },
                with_random((Linear::new(6, 3), fp0), s + 1),
                corrupt,
            )
        }
        "basic_block" => check(
            BlockCheck { probe: probe(&[6, 8, 4], s) },
            with_random((BasicBlock::new(4), Tensor::zeros([6, 8, 4])), s + 1),
            corrupt,
        ),
        "depth_attention" => {
            let mut rng = ChaCha8Rng::seed_from_u64(s + 2);
            let depth = Tensor::from_fn([5, 1], |_| rng.gen_range(0.5..3.0));
            check(
                AttentionCheck { depth, probe: probe(&[5, 4], s) },
                with_random((Attention::new(4, 4, 3), (Tensor::zeros([5, 4]), Tensor::zeros([5, 4]))), s + 1),
                corrupt,
            )
        }
        "reproject_fuse" => {
            let scene = ToyScene::new(4, 6, 6, s + 2)?;
            let conv = ConvNorm::new(1, 7, 4, ConvSpec::same(1, 1), Activation::Relu);
            check(
                ReprojectCheck { scene, probe: probe(&[4, 6, 4], s) },
                with_random((conv, (Tensor::zeros([6, 3]), Tensor::zeros([4, 6, 4]))), s + 1),
                corrupt,
            )
        }
        "residual_enhance" => check(
            EnhanceCheck { probe: probe(&[4, 5, 3], s) },
            with_random((Enhance::new(3), (Tensor::zeros([4, 5, 3]), Tensor::zeros([4, 5, 3]))), s + 1),
            corrupt,
        ),
        "fusion_stage" => {
            let scene = ToyScene::new(4, 4, 6, s + 2)?;
            let stage_index = scene.index.downscale(2)?;
            let (c, w) = (4, 5);
            let stage = StageCheck {
                depth: scene.depth().scale(0.1),
                stage_index,
                scene,
                probe_points: probe(&[6, c], s),
                probe_image: probe(&[2, 2, w], s + 3),
            };
            let params = (FusionParams::new(w, c, 3), (Tensor::zeros([6, c]), Tensor::zeros([2, 2, w])));
            check(stage, with_random(params, s + 1), corrupt)
        }
        "fusion_head" => {
            let scene = ToyScene::new(4, 6, 6, s + 2)?;
            let c = 3;
            let inputs = HeadInputs {
                stage_points: vec![Tensor::zeros([6, c]), Tensor::zeros([6, c])],
                stage_images: vec![Tensor::zeros([4, 6, 2]), Tensor::zeros([2, 3, 4])],
                fp0: Tensor::zeros([6, c]),
            };
            let head = HeadParams::new(2, c, 6, 4);
            check(
                HeadCheck { scene, probe: probe(&[6, 4], s) },
                with_random((head, inputs), s + 1),
                corrupt,
            )
        }
        other => Err(crate::error::Error::Config(format!("unknown gradient check `{other}`"))),
    }
}

/// Runs every block in [`BLOCKS`] order. `corrupt` names a block whose
/// analytic gradient is deliberately perturbed.
pub fn run_suite(seed: u64, corrupt: Option<&str>) -> Result<Vec<GradCheckReport>> {
    BLOCKS
        .iter()
        .map(|&name| run_block(name, seed, corrupt == Some(name)))
        .collect()
}
