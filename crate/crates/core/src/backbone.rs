//! Multi-branch feature extraction.
//!
//! A [`BasicBlock`] runs three parallel branches over the same input: a plain
//! 3×3 conv (local detail), a 3×3 conv with dilation 2 (wider context) and a
//! 1×1 bottleneck followed by a 3×3 conv (edges). A bias-free 1×1 conv mixes
//! the concatenated branches, and the result is added back onto the input.
//! Blocks are grouped into stages; a stage may open with a strided 3×3
//! transition that changes resolution and width.

use crate::error::{Error, Result, StageContext};
use crate::layers::{Conv, ConvNorm, ConvNormCache, Norm};
use crate::params::{join, ParamKind, ParamSet};
use crate::tensor::ops::{concat_channels, split_channels, Activation, ConvSpec};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub depths: Vec<usize>,
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
}

impl BackboneConfig {
    /// Depths `[3, 4, 6, 3]`, widths `[C, 2C, 4C, 4C]`, strides `[1, 2, 2, 2]`.
    pub fn standard(c: usize) -> Self {
        Self {
            depths: vec![3, 4, 6, 3],
            widths: vec![c, 2 * c, 4 * c, 4 * c],
            strides: vec![1, 2, 2, 2],
        }
    }

    pub fn num_stages(&self) -> usize {
        self.depths.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.depths.len();
        if k == 0 {
            return Err(Error::Config("backbone needs at least one stage".into()));
        }
        if self.widths.len() != k || self.strides.len() != k {
            return Err(Error::Config(format!(
                "backbone: {} depths, {} widths, {} strides",
                k,
                self.widths.len(),
                self.strides.len()
            )));
        }
        for (name, values) in [("depth", &self.depths), ("width", &self.widths), ("stride", &self.strides)] {
            if let Some(i) = values.iter().position(|&v| v == 0) {
                return Err(Error::Config(format!("backbone: stage {i} has {name} 0")));
            }
        }
        Ok(())
    }

    /// Cumulative stride of each stage relative to the input grid.
    pub fn scales(&self) -> Vec<usize> {
        self.strides
            .iter()
            .scan(1, |acc, &s| {
                *acc *= s;
                Some(*acc)
            })
            .collect()
    }
}

/// Width of the edge branch bottleneck.
pub fn reduced_width(width: usize) -> usize {
    (width / 2).max(1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BasicBlock<T: Real> {
    pub local: ConvNorm<T>,
    pub dilated: ConvNorm<T>,
    pub reduce: ConvNorm<T>,
    pub edge: ConvNorm<T>,
    pub fuse: Conv<T>,
    pub out: Norm<T>,
}

#[derive(Clone, Debug)]
pub struct BasicBlockCache<T: Real> {
    local: ConvNormCache<T>,
    dilated: ConvNormCache<T>,
    reduce: ConvNormCache<T>,
    edge: ConvNormCache<T>,
    cat: Tensor<T>,
    sum: Tensor<T>,
    out: Tensor<T>,
}

impl<T: Real> BasicBlockCache<T> {
    pub fn output(&self) -> &Tensor<T> {
        &self.out
    }
}

impl<T: Real> BasicBlock<T> {
    pub fn new(width: usize) -> Self {
        let r = reduced_width(width);
        let relu = Activation::Relu;
        Self {
            local: ConvNorm::new(3, width, width, ConvSpec::same(3, 1), relu),
            dilated: ConvNorm::new(3, width, width, ConvSpec::same(3, 2), relu),
            reduce: ConvNorm::new(1, width, r, ConvSpec::same(1, 1), relu),
            edge: ConvNorm::new(3, r, width, ConvSpec::same(3, 1), relu),
            fuse: Conv::new(1, 3 * width, width, ConvSpec::same(1, 1)),
            out: Norm::identity(width, relu),
        }
    }

    pub fn width(&self) -> usize {
        self.fuse.out_channels()
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_cached(x)?.out)
    }

    pub fn forward_cached(&self, x: &Tensor<T>) -> Result<BasicBlockCache<T>> {
        let (_, _, c) = x.hwc()?;
        if c != self.width() {
            return Err(Error::dim(format!(
                "basic_block: input has {c} channels, block expects {}",
                self.width()
            )));
        }
        let local = self.local.forward_cached(x)?;
        let dilated = self.dilated.forward_cached(x)?;
        let reduce = self.reduce.forward_cached(x)?;
        let edge = self.edge.forward_cached(&reduce.out)?;
        let cat = concat_channels(&[&local.out, &dilated.out, &edge.out])?;
        let sum = self.fuse.forward(&cat)?.add(x)?;
        let out = self.out.forward(&sum)?;
        Ok(BasicBlockCache {
            local,
            dilated,
            reduce,
            edge,
            cat,
            sum,
            out,
        })
    }

    pub fn backward(&self, x: &Tensor<T>, cache: &BasicBlockCache<T>, dy: &Tensor<T>) -> Result<(Tensor<T>, Self)> {
        let w = self.width();
        let (dsum, out) = self.out.backward(&cache.sum, &cache.out, dy)?;
        let (dcat, fuse) = self.fuse.backward(&cache.cat, &dsum)?;
        let parts = split_channels(&dcat, &[w, w, w])?;
        let (dx_local, local) = self.local.backward(x, &cache.local, &parts[0])?;
        let (dx_dilated, dilated) = self.dilated.backward(x, &cache.dilated, &parts[1])?;
        let (dreduced, edge) = self.edge.backward(&cache.reduce.out, &cache.edge, &parts[2])?;
        let (dx_reduce, reduce) = self.reduce.backward(x, &cache.reduce, &dreduced)?;
        let mut dx = dsum;
        for d in [&dx_local, &dx_dilated, &dx_reduce] {
            dx.add_assign(d)?;
        }
        Ok((
            dx,
            Self {
                local,
                dilated,
                reduce,
                edge,
                fuse,
                out,
            },
        ))
    }
}

impl<T: Real> ParamSet<T> for BasicBlock<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor<T>)) {
        self.local.visit(&join(prefix, "local"), f);
        self.dilated.visit(&join(prefix, "dilated"), f);
        self.reduce.visit(&join(prefix, "reduce"), f);
        self.edge.visit(&join(prefix, "edge"), f);
        self.fuse.visit(&join(prefix, "fuse"), f);
        self.out.visit(&join(prefix, "out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<T>)) {
        self.local.visit_mut(&join(prefix, "local"), f);
        self.dilated.visit_mut(&join(prefix, "dilated"), f);
        self.reduce.visit_mut(&join(prefix, "reduce"), f);
        self.edge.visit_mut(&join(prefix, "edge"), f);
        self.fuse.visit_mut(&join(prefix, "fuse"), f);
        self.out.visit_mut(&join(prefix, "out"), f);
    }
}

/// An optional strided transition followed by width-preserving blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage<T: Real> {
    pub transition: Option<ConvNorm<T>>,
    pub blocks: Vec<BasicBlock<T>>,
}

impl<T: Real> Stage<T> {
    pub fn new(in_width: usize, width: usize, stride: usize, depth: usize) -> Self {
        let transition = (stride != 1 || in_width != width)
            .then(|| ConvNorm::new(3, in_width, width, ConvSpec::strided(stride), Activation::Relu));
        Self {
            transition,
            blocks: (0..depth).map(|_| BasicBlock::new(width)).collect(),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut cur = match &self.transition {
            Some(t) => t.forward(x).stage("transition")?,
            None => x.clone(),
        };
        for (j, block) in self.blocks.iter().enumerate() {
            cur = block.forward(&cur).stage(&format!("block{j}"))?;
        }
        Ok(cur)
    }
}

impl<T: Real> ParamSet<T> for Stage<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor<T>)) {
        if let Some(t) = &self.transition {
            t.visit(&join(prefix, "transition"), f);
        }
        for (j, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("block{j}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<T>)) {
        if let Some(t) = &mut self.transition {
            t.visit_mut(&join(prefix, "transition"), f);
        }
        for (j, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("block{j}")), f);
        }
    }
}

/// One [`Stage`] per configured depth, fed by `in_width` input channels.
pub fn build_stages<T: Real>(in_width: usize, cfg: &BackboneConfig) -> Result<Vec<Stage<T>>> {
    cfg.validate()?;
    let mut prev = in_width;
    let mut stages = Vec::with_capacity(cfg.num_stages());
    for i in 0..cfg.num_stages() {
        stages.push(Stage::new(prev, cfg.widths[i], cfg.strides[i], cfg.depths[i]));
        prev = cfg.widths[i];
    }
    Ok(stages)
}

/// Runs the stages back to back and returns every stage output, finest first.
pub fn run_backbone<T: Real>(fg0: &Tensor<T>, cfg: &BackboneConfig, stages: &[Stage<T>]) -> Result<Vec<Tensor<T>>> {
    cfg.validate()?;
    if stages.len() != cfg.num_stages() {
        return Err(Error::Config(format!(
            "backbone: {} stages configured, {} provided",
            cfg.num_stages(),
            stages.len()
        )));
    }
    let mut outputs: Vec<Tensor<T>> = Vec::with_capacity(stages.len());
    for (i, stage) in stages.iter().enumerate() {
        let input = outputs.last().unwrap_or(fg0);
        let out = stage.forward(input).stage(&format!("stage{i}"))?;
        outputs.push(out);
    }
    Ok(outputs)
}
