use serde::{Deserialize, Serialize};

use crate::autodiff::Activation;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_channels: usize,
    pub seq_len: usize,
    pub patch_len: usize,
    pub stride: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub ffn_dim: usize,
    #[serde(with = "activation_name")]
    pub ffn_activation: Activation,
    /// Hidden widths of the regression head; ReLU between layers.
    pub head_dims: Vec<usize>,
    /// Encoder layers that receive the attention hint; `None` means all.
    pub hint_layers: Option<Vec<usize>>,
    /// Renormalize rows of `A + λH` to sum to one. Off by default.
    pub renormalize_hint: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_channels: crate::dataset::N_CHANNELS,
            seq_len: 128,
            patch_len: 16,
            stride: 8,
            d_model: 64,
            n_heads: 4,
            n_layers: 3,
            ffn_dim: 128,
            ffn_activation: Activation::Gelu,
            head_dims: vec![1024, 512, 256, 128, 64, 32],
            hint_layers: None,
            renormalize_hint: false,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn n_patches(&self) -> usize {
        (self.seq_len - self.patch_len) / self.stride + 1
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Width of the flattened encoder output fed to the head.
    pub fn flatten_len(&self) -> usize {
        self.n_channels * self.n_patches() * self.d_model
    }

    pub fn hint_active(&self, layer: usize) -> bool {
        self.hint_layers.as_ref().is_none_or(|set| set.contains(&layer))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        for (name, v) in [
            ("n_channels", self.n_channels),
            ("seq_len", self.seq_len),
            ("patch_len", self.patch_len),
            ("stride", self.stride),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("ffn_dim", self.ffn_dim),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.patch_len > self.seq_len {
            return bad(format!("patch_len {} exceeds seq_len {}", self.patch_len, self.seq_len));
        }
        if !(self.seq_len - self.patch_len).is_multiple_of(self.stride) {
            return bad(format!(
                "stride {} must divide seq_len - patch_len = {}",
                self.stride,
                self.seq_len - self.patch_len
            ));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.head_dims.contains(&0) {
            return bad("head_dims entries must be positive".into());
        }
        if let Some(layers) = &self.hint_layers {
            if let Some(&l) = layers.iter().find(|&&l| l >= self.n_layers) {
                return bad(format!("hint layer {l} out of range for {} layers", self.n_layers));
            }
        }
        Ok(())
    }
}

mod activation_name {
    use super::Activation;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(a: &Activation, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(match a {
            Activation::Relu => "relu",
            Activation::Gelu => "gelu",
        })
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Activation, D::Error> {
        match String::deserialize(d)?.as_str() {
            "relu" => Ok(Activation::Relu),
            "gelu" => Ok(Activation::Gelu),
            other => Err(serde::de::Error::custom(format!("unknown activation {other:?}"))),
        }
    }
}
