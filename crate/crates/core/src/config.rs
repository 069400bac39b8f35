//! Architectural description shared by teacher, pruned and hybrid models.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Dual,
    Single,
}

/// Per-layer block kinds. Every `Dual` layer precedes every `Single` layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<BlockKind>", into = "Vec<BlockKind>")]
pub struct StreamLayout(Vec<BlockKind>);

impl StreamLayout {
    pub fn new(kinds: Vec<BlockKind>) -> Result<Self> {
        if let Some(pos) = kinds.iter().position(|k| *k == BlockKind::Single) {
            if kinds[pos..].contains(&BlockKind::Dual) {
                return Err(Error::config(
                    "layout",
                    "all dual layers before all single layers",
                    format!("{kinds:?}"),
                ));
            }
        }
        Ok(Self(kinds))
    }

    pub fn all_dual(depth: usize) -> Self {
        Self(vec![BlockKind::Dual; depth])
    }

    pub fn hybrid(n_dual: usize, n_single: usize) -> Self {
        let mut kinds = vec![BlockKind::Dual; n_dual];
        kinds.extend(std::iter::repeat_n(BlockKind::Single, n_single));
        Self(kinds)
    }

    pub fn kinds(&self) -> &[BlockKind] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn kind(&self, layer: usize) -> BlockKind {
        self.0[layer]
    }

    pub fn n_dual(&self) -> usize {
        self.0.iter().filter(|k| **k == BlockKind::Dual).count()
    }

    pub fn n_single(&self) -> usize {
        self.0.len() - self.n_dual()
    }

    pub fn is_all_dual(&self) -> bool {
        self.n_single() == 0
    }

    /// Short human form such as `12D` or `2D+4S`.
    pub fn describe(&self) -> String {
        match (self.n_dual(), self.n_single()) {
            (d, 0) => format!("{d}D"),
            (0, s) => format!("{s}S"),
            (d, s) => format!("{d}D+{s}S"),
        }
    }
}

impl TryFrom<Vec<BlockKind>> for StreamLayout {
    type Error = Error;
    fn try_from(kinds: Vec<BlockKind>) -> Result<Self> {
        Self::new(kinds)
    }
}

impl From<StreamLayout> for Vec<BlockKind> {
    fn from(l: StreamLayout) -> Self {
        l.0
    }
}

fn default_timesteps() -> usize {
    100
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub depth: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub mlp_hidden: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub text_vocab: usize,
    pub text_len: usize,
    pub timestep_dim: usize,
    /// Number of diffusion timesteps the model is conditioned on; valid `t` is `1..=timesteps`.
    #[serde(default = "default_timesteps")]
    pub timesteps: usize,
    pub layout: StreamLayout,
}

impl Default for ModelConfig {
    /// 12-layer all-dual teacher on 16x16x3 images, 4x4 patches.
    fn default() -> Self {
        Self {
            depth: 12,
            d_model: 64,
            n_heads: 4,
            mlp_hidden: 256,
            image_size: 16,
            patch_size: 4,
            channels: 3,
            text_vocab: 32,
            text_len: 6,
            timestep_dim: 64,
            timesteps: 100,
            layout: StreamLayout::all_dual(12),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("mlp_hidden", self.mlp_hidden),
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("text_vocab", self.text_vocab),
            ("text_len", self.text_len),
            ("timesteps", self.timesteps),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("model.{name}"), "> 0", v));
            }
        }
        if self.timestep_dim < 2 || !self.timestep_dim.is_multiple_of(2) {
            return Err(Error::config("model.timestep_dim", "even and >= 2", self.timestep_dim));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::config(
                "model.d_model",
                format!("divisible by n_heads={}", self.n_heads),
                self.d_model,
            ));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::config(
                "model.image_size",
                format!("divisible by patch_size={}", self.patch_size),
                self.image_size,
            ));
        }
        if self.depth < 2 {
            return Err(Error::config("model.depth", ">= 2", self.depth));
        }
        if self.layout.len() != self.depth {
            return Err(Error::config(
                "model.layout",
                format!("{} entries (depth)", self.depth),
                self.layout.len(),
            ));
        }
        Ok(())
    }

    pub fn with_layout(&self, layout: StreamLayout) -> Self {
        Self {
            depth: layout.len(),
            layout,
            ..self.clone()
        }
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn image_numel(&self) -> usize {
        self.image_size * self.image_size * self.channels
    }

    pub fn seq_len(&self) -> usize {
        self.text_len + self.n_patches()
    }
}
