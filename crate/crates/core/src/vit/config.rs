use serde::{Deserialize, Serialize};

use super::VitError;

/// Layernorm epsilon used throughout the model.
pub const LAYERNORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum GeluGranularity {
    /// One switch per token, gating all `mlp_dim` GELUs of that token.
    #[default]
    PerToken,
    /// One switch per GELU element.
    PerElement,
}

/// Surrogate used in place of a softmax attention row.
#[derive(
    Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default,
)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionVariant {
    /// `(QKᵀ)² / N`
    #[default]
    Squared,
    /// `QKᵀ / N`
    Scale,
    /// Every weight `1 / N`.
    Uniform,
}

impl AttentionVariant {
    pub const ALL: [AttentionVariant; 3] = [Self::Squared, Self::Scale, Self::Uniform];

    pub fn name(self) -> &'static str {
        match self {
            Self::Squared => "squared",
            Self::Scale => "scale",
            Self::Uniform => "uniform",
        }
    }
}

impl std::str::FromStr for AttentionVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "squared" => Ok(Self::Squared),
            "scale" => Ok(Self::Scale),
            "uniform" => Ok(Self::Uniform),
            other => Err(format!("unknown attention variant `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub embed_dim: usize,
    pub mlp_dim: usize,
    pub num_heads: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub gelu_granularity: GeluGranularity,
    pub attn_variant: AttentionVariant,
}

impl Default for ModelConfig {
    /// Desk-scale model: 16×16 images in 4×4 patches (17 tokens), 2 layers.
    fn default() -> Self {
        Self {
            num_layers: 2,
            embed_dim: 16,
            mlp_dim: 32,
            num_heads: 2,
            image_size: 16,
            patch_size: 4,
            channels: 3,
            num_classes: 4,
            gelu_granularity: GeluGranularity::PerToken,
            attn_variant: AttentionVariant::Squared,
        }
    }
}

impl ModelConfig {
    /// ViT-Base at 224px, used for census arithmetic only.
    pub fn vit_base() -> Self {
        Self {
            num_layers: 12,
            embed_dim: 768,
            mlp_dim: 3072,
            num_heads: 12,
            image_size: 224,
            patch_size: 16,
            channels: 3,
            num_classes: 1000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), VitError> {
        let fields = [
            ("num_layers", self.num_layers),
            ("embed_dim", self.embed_dim),
            ("mlp_dim", self.mlp_dim),
            ("num_heads", self.num_heads),
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(VitError::Config(format!("{name} must be positive")));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(VitError::Config(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(VitError::Config(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Patches plus the class token.
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn gelu_switch_shape(&self) -> Vec<usize> {
        match self.gelu_granularity {
            GeluGranularity::PerToken => vec![self.num_layers, self.num_tokens()],
            GeluGranularity::PerElement => vec![self.num_layers, self.num_tokens(), self.mlp_dim],
        }
    }

    pub fn softmax_switch_shape(&self) -> Vec<usize> {
        vec![self.num_layers, self.num_heads, self.num_tokens()]
    }

    /// Pointwise GELU applications gated by one GELU switch.
    pub fn gelus_per_switch(&self) -> usize {
        match self.gelu_granularity {
            GeluGranularity::PerToken => self.mlp_dim,
            GeluGranularity::PerElement => 1,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_config_has_17_tokens() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.num_tokens(), 17);
        assert_eq!(cfg.head_dim(), 8);
        assert_eq!(cfg.gelu_switch_shape(), vec![2, 17]);
        assert_eq!(cfg.softmax_switch_shape(), vec![2, 2, 17]);
    }

    #[test]
    fn vit_base_tokens() {
        assert_eq!(ModelConfig::vit_base().num_tokens(), 197);
    }

    #[test]
    fn rejects_indivisible_heads() {
        let cfg = ModelConfig {
            num_heads: 3,
            ..ModelConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(VitError::Config(_))));
        let cfg = ModelConfig {
            patch_size: 5,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = ModelConfig {
            num_classes: 0,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
