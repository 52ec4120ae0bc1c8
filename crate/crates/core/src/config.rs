//! Pipeline configuration, read from JSON.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::compositing::AugmentConfig;
use crate::error::{Error, Result};
use crate::pnm::BitDepth;
use crate::query::DECODER_LAYERS;
use crate::temporal::AttentionConfig;

pub const SEED_ENV: &str = "OAVM_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Feature width of the temporal, query and correction stages.
    pub channels: usize,
    /// Local attention window.
    pub window: usize,
    /// Guidance dilation kernel.
    pub dilation: usize,
    pub num_queries: usize,
    pub decoder_layers: usize,
    pub p1: f64,
    pub p2: f64,
    pub seed: u64,
    /// Output widths of the four backbone levels, finest first.
    pub backbone_channels: [usize; 4],
    /// Output widths of the four matting decoder blocks, coarsest first.
    pub decoder_channels: [usize; 4],
    /// Sample depth of the written alpha files, 8 or 16.
    pub bit_depth: u8,
    /// Also run the set-prediction head on every frame. Its output is
    /// dropped.
    pub set_prediction: bool,
    /// Load weights from this file instead of seeding them.
    pub weights: Option<PathBuf>,
    pub per_frame_metrics: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            channels: 128,
            window: 15,
            dilation: 3,
            num_queries: 8,
            decoder_layers: DECODER_LAYERS,
            p1: 0.4,
            p2: 0.5,
            seed: 0,
            backbone_channels: [16, 32, 64, 96],
            decoder_channels: [64, 32, 16, 8],
            bit_depth: 8,
            set_prediction: false,
            weights: None,
            per_frame_metrics: true,
        }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: PipelineConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("bad config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text).map_err(|e| e.in_file(path))?;
        if let Some(w) = &cfg.weights {
            if w.is_relative() {
                cfg.weights = Some(path.parent().unwrap_or(Path::new(".")).join(w));
            }
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    /// Replace the seed with `OAVM_SEED` when it is set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.apply_seed_override(&v)?;
        }
        Ok(())
    }

    pub fn apply_seed_override(&mut self, value: &str) -> Result<()> {
        self.seed = value
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV} must be an unsigned integer, got {value:?}")))?;
        Ok(())
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            channels: self.channels,
            window: self.window,
        }
    }

    pub fn augment(&self) -> AugmentConfig {
        AugmentConfig {
            p1: self.p1,
            p2: self.p2,
            seed: self.seed,
        }
    }

    pub fn depth(&self) -> BitDepth {
        if self.bit_depth == 16 {
            BitDepth::Sixteen
        } else {
            BitDepth::Eight
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.attention().validate()?;
        self.augment().validate()?;
        if !self.channels.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "channels must be divisible by 4 for the positional embedding, got {}",
                self.channels
            )));
        }
        if self.dilation.is_multiple_of(2) {
            return Err(Error::Config(format!("dilation must be odd, got {}", self.dilation)));
        }
        if self.num_queries == 0 {
            return Err(Error::Config("num_queries must be positive".into()));
        }
        if self.decoder_layers != DECODER_LAYERS {
            return Err(Error::Config(format!(
                "decoder_layers must be {DECODER_LAYERS} (one per pixel decoder scale), got {}",
                self.decoder_layers
            )));
        }
        if self.backbone_channels.contains(&0) || self.decoder_channels.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if self.bit_depth != 8 && self.bit_depth != 16 {
            return Err(Error::Config(format!("bit_depth must be 8 or 16, got {}", self.bit_depth)));
        }
        Ok(())
    }
}
