//! Parameter layout, initialization and the end-to-end forward pass.

mod config;
pub mod weights;

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use config::ModelConfig;

use crate::backbone::{build_stages, Stage};
use crate::encoder::{encode, EncoderParams};
use crate::error::{Error, Result, StageContext};
use crate::fusion::{fusion_stage, FusionParams, StageGeometry};
use crate::head::{head_forward, predict, HeadInputs, HeadParams};
use crate::params::{join, param_count, ParamKind, ParamSet, ParamStore};
use crate::projection::{project, BeamTable};
use crate::scan_io::{DatasetConfig, RawScan};
use crate::tensor::{Real, Tensor};

/// Every tensor of the network, named `encoder.*`, `stage{i}.*`,
/// `fusion{i}.*` and `head.*`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T: Real> {
    pub encoder: EncoderParams<T>,
    pub stages: Vec<Stage<T>>,
    pub fusion: Vec<FusionParams<T>>,
    pub head: HeadParams<T>,
}

impl<T: Real> ModelParams<T> {
    /// Zero weights and identity normalization, shaped for `cfg`.
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let dataset = cfg.dataset_config()?;
        let c = cfg.channels;
        let widths = &cfg.backbone.widths;
        Ok(Self {
            encoder: EncoderParams::new(c),
            stages: build_stages(c, &cfg.backbone)?,
            fusion: widths
                .iter()
                .map(|&w| FusionParams::new(w, c, cfg.attn_channels))
                .collect(),
            head: HeadParams::new(widths.len(), c, widths.iter().sum(), dataset.num_classes),
        })
    }
}

impl<T: Real> ParamSet<T> for ModelParams<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor<T>)) {
        self.encoder.visit(&join(prefix, "encoder"), f);
        for (i, s) in self.stages.iter().enumerate() {
            s.visit(&join(prefix, &format!("stage{i}")), f);
        }
        for (i, p) in self.fusion.iter().enumerate() {
            p.visit(&join(prefix, &format!("fusion{i}")), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<T>)) {
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.visit_mut(&join(prefix, &format!("stage{i}")), f);
        }
        for (i, p) in self.fusion.iter_mut().enumerate() {
            p.visit_mut(&join(prefix, &format!("fusion{i}")), f);
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

/// Fills every weight tensor with uniform `±sqrt(6 / (fan_in + fan_out))`
/// draws from a ChaCha8 stream seeded with `seed`, in visit order. Other
/// tensors keep their constructor values (zero bias, unit scale, zero shift,
/// zero mean, unit variance).
pub fn init_weights<T: Real>(params: &mut impl ParamSet<T>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    params.visit_mut("", &mut |_, kind, t| {
        if let ParamKind::Weight { fan_in, fan_out } = kind {
            let bound = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
            for v in t.data_mut() {
                *v = T::lit(rng.gen_range(-bound..bound));
            }
        }
    });
}

pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    let mut params = ModelParams::<f32>::new(cfg)?;
    init_weights(&mut params, seed);
    ParamStore::from_params(&params)
}

/// Learnable scalar count for `cfg`.
pub fn model_param_count(cfg: &ModelConfig) -> Result<usize> {
    Ok(param_count(&ModelParams::<f32>::new(cfg)?))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageShapes {
    /// Backbone output of the stage.
    pub backbone: Vec<usize>,
    /// Image after fusion.
    pub image: Vec<usize>,
    /// Point features after fusion.
    pub points: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Diagnostics {
    pub num_points: usize,
    pub num_cells: usize,
    pub empty_cells: usize,
    pub degenerate_points: usize,
    pub outside_fov_points: usize,
    pub encoder_points: Vec<usize>,
    pub encoder_image: Vec<usize>,
    pub stages: Vec<StageShapes>,
    pub scores: Vec<usize>,
    pub elapsed: Duration,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub scores: Tensor<f32>,
    pub labels: Vec<u32>,
    pub diagnostics: Diagnostics,
}

/// A configured network with loaded parameters. Immutable after
/// construction; [`Model::forward`] may run concurrently.
#[derive(Clone, Debug)]
pub struct Model {
    cfg: ModelConfig,
    dataset: DatasetConfig,
    beams: BeamTable,
    params: ModelParams<f32>,
}

impl Model {
    /// Loads `store` into the layout of `cfg`. Missing, extra or mis-shaped
    /// tensors are reported by name.
    pub fn new(cfg: &ModelConfig, store: &ParamStore) -> Result<Self> {
        store.validate()?;
        let mut params = ModelParams::new(cfg)?;
        store.load_into(&mut params)?;
        let dataset = cfg.dataset_config()?;
        let beams = BeamTable::uniform(&dataset)?;
        Ok(Self {
            cfg: cfg.clone(),
            dataset,
            beams,
            params,
        })
    }

    pub fn from_seed(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        Self::new(cfg, &init_params(cfg, seed)?)
    }

    /// Replaces the uniform beam table, e.g. with a calibrated one.
    pub fn with_beams(mut self, beams: BeamTable) -> Result<Self> {
        if beams.len() != self.dataset.num_beams {
            return Err(Error::Config(format!(
                "beam table has {} rows, dataset expects {}",
                beams.len(),
                self.dataset.num_beams
            )));
        }
        self.beams = beams;
        Ok(self)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn dataset(&self) -> &DatasetConfig {
        &self.dataset
    }

    pub fn beams(&self) -> &BeamTable {
        &self.beams
    }

    pub fn params(&self) -> &ModelParams<f32> {
        &self.params
    }

    pub fn forward(&self, scan: &RawScan) -> Result<ForwardOutput> {
        let start = Instant::now();
        let p = &self.params;
        let index = project(scan, &self.beams, &self.dataset).stage("projection")?;
        let depth = Tensor::new(
            [index.num_points(), 1],
            index.ranges().iter().map(|&r| r as f32).collect(),
        )?;
        let (fp0, fg0) = encode(scan, &index, &p.encoder).stage("encoder")?;

        let scales = self.cfg.backbone.scales();
        let mut fp = fp0.clone();
        let mut fg = fg0.clone();
        let mut stage_points = Vec::with_capacity(scales.len());
        let mut stage_images = Vec::with_capacity(scales.len());
        let mut shapes = Vec::with_capacity(scales.len());
        for (i, &scale) in scales.iter().enumerate() {
            let name = format!("stage{i}");
            let tilde = p.stages[i].forward(&fg).stage(&name)?;
            let stage_index = index.downscale(scale).stage(&name)?;
            let geom = StageGeometry {
                full: &index,
                stage: &stage_index,
                depth: &depth,
            };
            let (fp_i, fg_i) = fusion_stage(&fp, &tilde, &geom, &p.fusion[i]).stage(&format!("fusion{i}"))?;
            shapes.push(StageShapes {
                backbone: tilde.shape().to_vec(),
                image: fg_i.shape().to_vec(),
                points: fp_i.shape().to_vec(),
            });
            stage_points.push(fp_i.clone());
            stage_images.push(fg_i.clone());
            fp = fp_i;
            fg = fg_i;
        }

        let inputs = HeadInputs {
            stage_points,
            stage_images,
            fp0: fp0.clone(),
        };
        let scores = head_forward(&inputs, &index, &p.head).stage("head")?;
        let labels = predict(&scores).stage("head")?;
        let diagnostics = Diagnostics {
            num_points: index.num_points(),
            num_cells: index.num_cells(),
            empty_cells: index.empty_cells(),
            degenerate_points: index.degenerate_points(),
            outside_fov_points: index.outside_fov_points(),
            encoder_points: fp0.shape().to_vec(),
            encoder_image: fg0.shape().to_vec(),
            stages: shapes,
            scores: scores.shape().to_vec(),
            elapsed: start.elapsed(),
        };
        Ok(ForwardOutput {
            scores,
            labels,
            diagnostics,
        })
    }
}
