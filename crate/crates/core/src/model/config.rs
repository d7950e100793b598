use serde::{Deserialize, Serialize};

use crate::tensor::TensorError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    /// Logits pass through untouched.
    Identity,
    /// Logits pass through; only the softmax temperature differs.
    Temperature,
    /// Fixed, normalized isotropic Gaussian.
    Gaussian,
    /// Learnable, unconstrained weights.
    Conv,
    /// Learnable weights kept on the simplex by a softmax reparametrization.
    Wnconv,
}

impl KernelKind {
    pub const ALL: [KernelKind; 5] = [
        Self::Identity,
        Self::Temperature,
        Self::Gaussian,
        Self::Conv,
        Self::Wnconv,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Identity => "identity",
            Self::Temperature => "temperature",
            Self::Gaussian => "gaussian",
            Self::Conv => "conv",
            Self::Wnconv => "wnconv",
        }
    }

    pub fn learnable(self) -> bool {
        matches!(self, Self::Conv | Self::Wnconv)
    }
}

impl std::str::FromStr for KernelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown kernel kind `{s}`"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelVariant {
    pub kind: KernelKind,
    pub size: usize,
    pub tau: f64,
    pub gaussian_sigma: f64,
}

impl Default for KernelVariant {
    fn default() -> Self {
        Self {
            kind: KernelKind::Wnconv,
            size: 5,
            tau: 1.0,
            gaussian_sigma: 1.0,
        }
    }
}

impl KernelVariant {
    pub fn identity() -> Self {
        Self {
            kind: KernelKind::Identity,
            ..Self::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IppeSchedule {
    /// After the slot update of every iteration.
    Every,
    /// After the last iteration only.
    Final,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    /// Number of slots.
    pub slots: usize,
    pub slot_dim: usize,
    pub enc_dim: usize,
    /// Width of the key/query/value projections.
    pub attn_dim: usize,
    pub iterations: usize,
    /// Channels of the hidden encoder and decoder convolutions.
    pub conv_channels: usize,
    pub conv_kernel: usize,
    /// Hidden width of the residual slot MLP.
    pub mlp_hidden: usize,
    pub kernel: KernelVariant,
    pub ippe_enabled: bool,
    pub ippe_schedule: IppeSchedule,
    pub ws_init_enabled: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            slots: 7,
            slot_dim: 64,
            enc_dim: 64,
            attn_dim: 64,
            iterations: 3,
            conv_channels: 32,
            conv_kernel: 5,
            mlp_hidden: 128,
            kernel: KernelVariant::default(),
            ippe_enabled: true,
            ippe_schedule: IppeSchedule::Every,
            ws_init_enabled: false,
        }
    }
}

impl ModelConfig {
    /// 8×8 images, 3 slots of width 16, 2 iterations and a 3×3 learned
    /// kernel. Small enough for exhaustive gradient checks and smoke runs.
    pub fn tiny() -> Self {
        Self {
            height: 8,
            width: 8,
            slots: 3,
            slot_dim: 16,
            enc_dim: 16,
            attn_dim: 16,
            iterations: 2,
            conv_channels: 8,
            conv_kernel: 3,
            mlp_hidden: 16,
            kernel: KernelVariant {
                size: 3,
                ..KernelVariant::default()
            },
            ..Self::default()
        }
    }

    /// Plain Slot Attention: identity kernel, unit temperature, no point
    /// modules.
    pub fn plain(mut self) -> Self {
        self.kernel = KernelVariant {
            kind: KernelKind::Identity,
            tau: 1.0,
            ..self.kernel
        };
        self.ippe_enabled = false;
        self.ws_init_enabled = false;
        self
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        let bad = |m: String| Err(TensorError::Config(m));
        if self.slots < 2 {
            return bad(format!("need at least 2 slots, got {}", self.slots));
        }
        if self.iterations < 1 {
            return bad("need at least 1 iteration".into());
        }
        let dims = [
            ("height", self.height),
            ("width", self.width),
            ("slot_dim", self.slot_dim),
            ("enc_dim", self.enc_dim),
            ("attn_dim", self.attn_dim),
            ("conv_channels", self.conv_channels),
            ("mlp_hidden", self.mlp_hidden),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return bad(format!("{name} must be at least 1"));
        }
        if self.conv_kernel % 2 == 0 {
            return bad(format!("conv_kernel must be odd, got {}", self.conv_kernel));
        }
        if ![3, 5, 7].contains(&self.kernel.size) {
            return bad(format!("kernel size must be 3, 5 or 7, got {}", self.kernel.size));
        }
        if !(self.kernel.tau > 0.0 && self.kernel.tau.is_finite()) {
            return bad(format!("tau must be positive, got {}", self.kernel.tau));
        }
        if !(self.kernel.gaussian_sigma > 0.0 && self.kernel.gaussian_sigma.is_finite()) {
            return bad(format!(
                "gaussian_sigma must be positive, got {}",
                self.kernel.gaussian_sigma
            ));
        }
        if self.ippe_enabled && self.ws_init_enabled {
            return bad("ippe_enabled and ws_init_enabled both inject points into slots; pick one".into());
        }
        Ok(())
    }
}
