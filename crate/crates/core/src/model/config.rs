use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{HdError, Result};
use crate::hganet::DEFAULT_VERTEX_CAP;
use crate::hypergraph::VertexScaling;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Square input side in pixels.
    pub input_size: usize,
    /// Widths after the stem / stage 1 / stage 2 (P3) and stage 3 (P4);
    /// stage 4 (P5) uses the last entry.
    pub widths: [usize; 4],
    /// Hypergraph threshold inside MGNet.
    pub epsilon: f64,
    #[serde(default)]
    pub scaling: VertexScaling,
    pub sam_kernels: [usize; 3],
    pub num_classes: usize,
    #[serde(default = "default_strides")]
    pub strides: [usize; 3],
    #[serde(default = "default_dba_scale")]
    pub dba_scale: f64,
    #[serde(default = "default_vertex_cap")]
    pub vertex_cap: usize,
}

fn default_strides() -> [usize; 3] {
    [8, 16, 32]
}

fn default_dba_scale() -> f64 {
    1.0
}

fn default_vertex_cap() -> usize {
    DEFAULT_VERTEX_CAP
}

impl ModelConfig {
    /// Test-sized preset: 64 px input, widths 8/16/32/64.
    pub fn micro() -> Self {
        Self {
            input_size: 64,
            widths: [8, 16, 32, 64],
            epsilon: 3.0,
            scaling: VertexScaling::Raw,
            sam_kernels: [1, 3, 5],
            num_classes: 3,
            strides: default_strides(),
            dba_scale: 1.0,
            vertex_cap: DEFAULT_VERTEX_CAP,
        }
    }

    /// Default for training runs: micro widths at 320 px.
    pub fn desk() -> Self {
        Self {
            input_size: 320,
            ..Self::micro()
        }
    }

    pub fn full() -> Self {
        Self {
            input_size: 640,
            widths: [32, 64, 128, 256],
            ..Self::micro()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "micro" => Ok(Self::micro()),
            "desk" => Ok(Self::desk()),
            "full" => Ok(Self::full()),
            other => Err(HdError::config("preset", format!("unknown preset `{other}`"))),
        }
    }

    pub fn from_yaml_str(s: &str) -> Result<Self> {
        let cfg: Self = serde_yaml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_yaml_file(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| HdError::io(path, e))?;
        Self::from_yaml_str(&s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return Err(HdError::config(
                "input_size",
                format!("must be a positive multiple of 32, got {}", self.input_size),
            ));
        }
        if self.widths.iter().any(|&w| w == 0) || self.widths.windows(2).any(|p| p[0] >= p[1]) {
            return Err(HdError::config(
                "widths",
                format!("must be positive and strictly ascending, got {:?}", self.widths),
            ));
        }
        if self.widths[2] % 2 != 0 || self.widths[3] % 2 != 0 {
            return Err(HdError::config("widths", "the last two widths must be even"));
        }
        if !self.epsilon.is_finite() || self.epsilon < 0.0 {
            return Err(HdError::config(
                "epsilon",
                format!("must be finite and non-negative, got {}", self.epsilon),
            ));
        }
        if let Some(k) = self.sam_kernels.iter().find(|&&k| k % 2 == 0) {
            return Err(HdError::config("sam_kernels", format!("kernel sizes must be odd, got {k}")));
        }
        if self.num_classes == 0 {
            return Err(HdError::config("num_classes", "must be at least 1"));
        }
        if self.strides != [8, 16, 32] {
            return Err(HdError::config(
                "strides",
                format!("only [8, 16, 32] is supported, got {:?}", self.strides),
            ));
        }
        if !self.dba_scale.is_finite() || self.dba_scale <= 0.0 {
            return Err(HdError::config(
                "dba_scale",
                format!("must be finite and positive, got {}", self.dba_scale),
            ));
        }
        if self.vertex_cap == 0 {
            return Err(HdError::config("vertex_cap", "must be at least 1"));
        }
        Ok(())
    }

    /// Head grid side per stride.
    pub fn grid_sizes(&self) -> [usize; 3] {
        self.strides.map(|s| self.input_size / s)
    }

    pub fn head_channels(&self) -> usize {
        4 + self.num_classes
    }
}
