use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics::{ProConfig, Thresholds, PRO_FPR_LIMIT, PRO_THRESHOLDS};
use crate::mvas::validate_geometry;

/// Window size, top-K and block count of one MVAS stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageConfig {
    pub a: usize,
    pub k: usize,
    pub blocks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub resolution: usize,
    pub views: usize,
    pub stem_channels: usize,
    pub channels: [usize; 3],
    pub stages: [StageConfig; 3],
    pub bottleneck: usize,
}

impl ModelConfig {
    /// 64x64 inputs, 5 views, `a = 4`, `k = 8/16/32`, `N = 1/1/2`.
    pub fn desk() -> Self {
        Self::with_stages(64, 5, 8, [16, 32, 64], [(4, 8, 1), (4, 16, 1), (4, 32, 2)], 64)
    }

    /// 256x256 inputs, `a = 8`, `k = 16/32/64`, `N = 1/2/4`.
    pub fn paper_scale() -> Self {
        Self::with_stages(256, 5, 32, [64, 128, 256], [(8, 16, 1), (8, 32, 2), (8, 64, 4)], 256)
    }

    /// Builds a config with each `k` capped at `(v - 1) a²`.
    pub fn with_stages(
        resolution: usize,
        views: usize,
        stem_channels: usize,
        channels: [usize; 3],
        stages: [(usize, usize, usize); 3],
        bottleneck: usize,
    ) -> Self {
        let stages = stages.map(|(a, k, blocks)| StageConfig {
            a,
            k: k.min(views.saturating_sub(1) * a * a).max(1),
            blocks,
        });
        Self {
            resolution,
            views,
            stem_channels,
            channels,
            stages,
            bottleneck,
        }
    }

    /// Spatial side of stage `j` (0-based): `resolution / 2^(j + 2)`.
    pub fn stage_side(&self, j: usize) -> usize {
        self.resolution >> (j + 2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.views < 2 {
            return Err(Error::Config(format!("need at least 2 views, got {}", self.views)));
        }
        if !self.resolution.is_multiple_of(16) || self.resolution < 16 {
            return Err(Error::Config(format!("resolution {} must be a positive multiple of 16", self.resolution)));
        }
        if self.channels.iter().chain([&self.stem_channels, &self.bottleneck]).any(|&c| c == 0) {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        for (j, s) in self.stages.iter().enumerate() {
            let side = self.stage_side(j);
            if s.blocks > 0 {
                validate_geometry(&[self.views, side, side, self.channels[j]], s.a, s.k)
                    .map_err(|e| Error::Config(format!("stage {}: {e}", j + 1)))?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_samples: usize,
}

impl TrainConfig {
    /// One sample per step at `lr = 0.002`.
    pub fn desk() -> Self {
        Self {
            lr: 0.002,
            weight_decay: 1e-4,
            epochs: 20,
            batch_samples: 1,
        }
    }

    pub fn paper_scale() -> Self {
        Self {
            lr: 0.005,
            weight_decay: 1e-4,
            epochs: 100,
            batch_samples: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::Config(format!("invalid optimizer lr={} wd={}", self.lr, self.weight_decay)));
        }
        if self.batch_samples == 0 {
            return Err(Error::Config("batch_samples must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub pro_fpr_limit: f64,
    pub pro_thresholds: usize,
    /// Gaussian smoothing of anomaly maps; `None` disables it.
    pub smoothing_sigma: Option<f64>,
    pub batch_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            pro_fpr_limit: PRO_FPR_LIMIT,
            pro_thresholds: PRO_THRESHOLDS,
            smoothing_sigma: None,
            batch_samples: 4,
        }
    }
}

impl EvalConfig {
    pub fn pro(&self) -> ProConfig {
        ProConfig {
            fpr_limit: self.pro_fpr_limit,
            thresholds: Thresholds::Uniform(self.pro_thresholds),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.pro_fpr_limit > 0.0 && self.pro_fpr_limit <= 1.0) {
            return Err(Error::Config(format!("pro_fpr_limit {} outside (0, 1]", self.pro_fpr_limit)));
        }
        if self.pro_thresholds == 0 || self.batch_samples == 0 {
            return Err(Error::Config("pro_thresholds and eval batch_samples must be positive".into()));
        }
        if let Some(s) = self.smoothing_sigma {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Config(format!("smoothing_sigma {s} must be positive")));
            }
        }
        Ok(())
    }
}

/// Everything that determines a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub preset: String,
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    /// Fixed architectural choices, echoed for reproducibility.
    pub wiring: Wiring,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Wiring {
    pub fpn: String,
    pub loss_spatial_norm: String,
    pub map_combination: String,
    pub upsampling: String,
    pub positional: String,
}

impl Default for Wiring {
    fn default() -> Self {
        Self {
            fpn: "s1 -conv3x3/s2-> s2 size, concat s2, -conv3x3/s2-> s3 size, concat s3, -conv1x1-> bottleneck".into(),
            loss_spatial_norm: "per-stage h_j*w_j".into(),
            map_combination: "mean of stage maps".into(),
            upsampling: "nearest".into(),
            positional: "fixed 2-D sinusoid, one table per stage".into(),
        }
    }
}

impl RunConfig {
    pub fn desk() -> Self {
        Self {
            preset: "desk".into(),
            seed: 7,
            model: ModelConfig::desk(),
            train: TrainConfig::desk(),
            eval: EvalConfig::default(),
            wiring: Wiring::default(),
        }
    }

    pub fn paper_scale() -> Self {
        Self {
            preset: "paper-scale".into(),
            model: ModelConfig::paper_scale(),
            train: TrainConfig::paper_scale(),
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper-scale" => Ok(Self::paper_scale()),
            other => Err(Error::Config(format!("unknown preset {other:?} (desk | paper-scale)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.eval.validate()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }
}
