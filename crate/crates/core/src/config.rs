//! Declarative architecture descriptions.
//!
//! One [`ArchitectureConfig`] describes one network: optional multi-scale and
//! single convolutions repeated over `num_blocks` blocks, an optional 1-wide
//! projection carried between blocks, a fixed-context window feeding a stack
//! of fully-connected layers, and an eight-way softmax per residue.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of secondary-structure classes.
pub const NUM_CLASSES: usize = 8;
/// Label-context channels appended for conditioned models: 8 classes + "unknown".
pub const CONTEXT_CHANNELS: usize = NUM_CLASSES + 1;
/// Per-residue feature depth (21 residue one-hot + 21 profile channels).
pub const FEATURE_DEPTH: usize = 42;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub width: usize,
    pub depth: usize,
}

impl ConvSpec {
    pub const fn new(width: usize, depth: usize) -> Self {
        ConvSpec { width, depth }
    }
}

/// Which tensor the between-block projection reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualSource {
    /// The input of the previous block.
    #[default]
    BlockInput,
    /// The output of the previous block.
    BlockOutput,
}

/// How far the label-context channels are shifted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextShift {
    /// Shift by `(W + 1) / 2`: the centred receptive field of position `i`
    /// covers exactly the labels `i-W .. i-1`.
    #[default]
    Centered,
    /// Shift by the full effective window `W`.
    FullWindow,
}

fn default_input_depth() -> usize {
    FEATURE_DEPTH
}
fn default_fc_width() -> usize {
    455
}
fn default_projection() -> usize {
    96
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureConfig {
    #[serde(default)]
    pub name: String,
    #[serde(default = "default_input_depth")]
    pub input_depth: usize,
    #[serde(default)]
    pub multiscale_banks: Vec<ConvSpec>,
    #[serde(default)]
    pub single_conv: Option<ConvSpec>,
    #[serde(default)]
    pub num_blocks: usize,
    pub fc_window: usize,
    pub fc_layers: usize,
    #[serde(default = "default_fc_width")]
    pub fc_width: usize,
    #[serde(default)]
    pub residual_connections: bool,
    #[serde(default = "default_projection")]
    pub residual_projection_depth: usize,
    #[serde(default)]
    pub residual_source: ResidualSource,
    pub dropout_rate: f64,
    /// Cap on the L2 norm of each hidden fully-connected unit's incoming weights.
    #[serde(default)]
    pub maxnorm_cap: Option<f64>,
    #[serde(default)]
    pub conditioned: bool,
    #[serde(default)]
    pub context_shift: ContextShift,
}

impl ArchitectureConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::config(m));
        if self.input_depth == 0 {
            return err("input_depth must be positive".into());
        }
        if self.fc_window.is_multiple_of(2) {
            return err(format!("fc_window {} must be odd", self.fc_window));
        }
        if self.fc_layers == 0 || self.fc_width == 0 {
            return err("need at least one fully-connected layer of positive width".into());
        }
        let convs = self.multiscale_banks.iter().chain(self.single_conv.iter());
        for c in convs {
            if c.width % 2 == 0 {
                return err(format!("filter width {} must be odd", c.width));
            }
            if c.depth == 0 {
                return err("filter depth must be positive".into());
            }
        }
        let mut widths: Vec<usize> = self.multiscale_banks.iter().map(|b| b.width).collect();
        widths.sort_unstable();
        if widths.windows(2).any(|w| w[0] == w[1]) {
            return err("multi-scale bank widths must be distinct".into());
        }
        let has_convs = !self.multiscale_banks.is_empty() || self.single_conv.is_some();
        if self.num_blocks > 0 && !has_convs {
            return err("convolutional blocks need a multi-scale layer or a single convolution".into());
        }
        if self.num_blocks == 0 && has_convs {
            return err("convolution layers given but num_blocks is 0".into());
        }
        if self.residual_connections {
            if self.num_blocks < 2 {
                return err("residual connections span blocks and need num_blocks >= 2".into());
            }
            if self.residual_projection_depth == 0 {
                return err("residual_projection_depth must be positive".into());
            }
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return err(format!("dropout_rate {} must lie in [0, 1)", self.dropout_rate));
        }
        if let Some(c) = self.maxnorm_cap {
            if !(c > 0.0) {
                return err(format!("maxnorm_cap {c} must be positive"));
            }
        }
        Ok(())
    }

    /// Depth of the tensor the first layer consumes.
    pub fn model_input_depth(&self) -> usize {
        self.input_depth + if self.conditioned { CONTEXT_CHANNELS } else { 0 }
    }

    /// Widest multi-scale filter (`M`), 1 when there is no multi-scale layer.
    pub fn max_multiscale_width(&self) -> usize {
        self.multiscale_banks.iter().map(|b| b.width).max().unwrap_or(1)
    }

    /// Single-convolution width (`C`), 1 when absent.
    pub fn single_width(&self) -> usize {
        self.single_conv.map_or(1, |c| c.width)
    }

    /// Effective window `W = F + n·(C + M − 2)`: the number of residues that
    /// influence one prediction. A missing layer counts as width 1.
    pub fn effective_window(&self) -> usize {
        self.fc_window + self.num_blocks * (self.single_width() + self.max_multiscale_width() - 2)
    }

    /// Half-width of the receptive field, `(W − 1) / 2`.
    pub fn receptive_radius(&self) -> usize {
        (self.effective_window() - 1) / 2
    }

    /// Shift applied by the label-context channels of a conditioned model.
    pub fn context_shift_amount(&self) -> usize {
        match self.context_shift {
            ContextShift::Centered => self.receptive_radius() + 1,
            ContextShift::FullWindow => self.effective_window(),
        }
    }

    fn base(name: &str) -> Self {
        ArchitectureConfig {
            name: name.to_string(),
            input_depth: FEATURE_DEPTH,
            multiscale_banks: Vec::new(),
            single_conv: None,
            num_blocks: 0,
            fc_window: 11,
            fc_layers: 2,
            fc_width: 455,
            residual_connections: false,
            residual_projection_depth: 96,
            residual_source: ResidualSource::BlockInput,
            dropout_rate: 0.4,
            maxnorm_cap: Some(0.1503),
            conditioned: false,
            context_shift: ContextShift::Centered,
        }
    }

    /// Window-17 five-layer perceptron with 20% dropout and a 0.04614 cap.
    pub fn mlp_baseline() -> Self {
        ArchitectureConfig {
            fc_window: 17,
            fc_layers: 5,
            dropout_rate: 0.2,
            maxnorm_cap: Some(0.04614),
            ..Self::base("row1_mlp")
        }
    }

    /// Two residual multi-scale blocks (3/7/9 x 64, then 9 x 24), window 11, two FC layers.
    pub fn final_model() -> Self {
        Self::baseline_row(9).expect("row 9 exists")
    }

    /// The final model with label-context conditioning.
    pub fn final_conditioned() -> Self {
        ArchitectureConfig {
            name: "final_conditioned".into(),
            conditioned: true,
            ..Self::final_model()
        }
    }

    /// Baseline architectures, rows 1..=9: MLP, single-conv, multi-scale, then residual.
    pub fn baseline_row(row: usize) -> Option<Self> {
        let ms32 = vec![ConvSpec::new(3, 32), ConvSpec::new(5, 32), ConvSpec::new(7, 32)];
        let ms64 = vec![ConvSpec::new(3, 64), ConvSpec::new(7, 64), ConvSpec::new(9, 64)];
        let cfg = match row {
            1 => Self::mlp_baseline(),
            2 | 3 => ArchitectureConfig {
                single_conv: Some(ConvSpec::new(7, 32)),
                num_blocks: row - 1,
                fc_window: 17,
                fc_layers: 5,
                ..Self::base(&format!("row{row}_single7x32_{}blocks", row - 1))
            },
            4 | 5 => ArchitectureConfig {
                multiscale_banks: ms32,
                num_blocks: 1,
                fc_layers: if row == 4 { 5 } else { 2 },
                ..Self::base(&format!("row{row}_multiscale32_fc{}", if row == 4 { 5 } else { 2 }))
            },
            6 => ArchitectureConfig {
                multiscale_banks: ms32,
                single_conv: Some(ConvSpec::new(7, 32)),
                num_blocks: 1,
                ..Self::base("row6_multiscale32_single7x32")
            },
            7 | 8 => ArchitectureConfig {
                multiscale_banks: ms64,
                single_conv: Some(ConvSpec::new(9, 24)),
                num_blocks: if row == 7 { 2 } else { 5 },
                ..Self::base(&format!("row{row}_multiscale64_{}blocks", if row == 7 { 2 } else { 5 }))
            },
            9 => ArchitectureConfig {
                multiscale_banks: ms64,
                single_conv: Some(ConvSpec::new(9, 24)),
                num_blocks: 2,
                residual_connections: true,
                ..Self::base("row9_final_residual")
            },
            _ => return None,
        };
        Some(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
