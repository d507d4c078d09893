use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the learned `(max_ar, max_patches, E)` table is fitted to the live
/// `(t, n)` token grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeVariant {
    /// Bilinear resampling over both time and patch axes.
    StBilinear,
    /// First `t` time rows verbatim, linear resampling along patches.
    SLinearTSlice,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraConfig {
    /// Adapter rank on the axial-attention Q/K/V/O projections.
    pub r_attn: usize,
    /// Adapter rank on the two MLP linears.
    pub r_mlp: usize,
    /// Adapter outputs are scaled by `alpha / r`.
    pub alpha: f64,
    /// Dropout on the adapter input.
    pub dropout: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self { r_attn: 0, r_mlp: 0, alpha: 16.0, dropout: 0.0 }
    }
}

/// Network hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub embed: usize,
    pub heads: usize,
    pub cross_heads: usize,
    pub depth: usize,
    pub mlp_dim: usize,
    pub conv_filters: usize,
    pub conv_stem: usize,
    pub patch: usize,
    pub max_ar: usize,
    pub max_patches: usize,
    pub pe_variant: PeVariant,
    #[serde(default)]
    pub lora: LoraConfig,
    pub max_in_ch: usize,
    pub max_fields: usize,
    pub max_components: usize,
    /// Dropout on attention-branch outputs, inside the MLP and on the
    /// positional encoding.
    #[serde(default)]
    pub dropout: f64,
}

/// Named presets.
pub const PRESET_NAMES: [&str; 5] = ["nano", "ti", "s", "m", "l"];

impl ModelConfig {
    fn base(embed: usize, heads: usize, depth: usize, mlp_dim: usize) -> Self {
        Self {
            embed,
            heads,
            cross_heads: 32,
            depth,
            mlp_dim,
            conv_filters: 8,
            conv_stem: 8,
            patch: 8,
            max_ar: 1,
            max_patches: 4096,
            pe_variant: PeVariant::SLinearTSlice,
            lora: LoraConfig::default(),
            max_in_ch: 3,
            max_fields: 3,
            max_components: 3,
            dropout: 0.0,
        }
    }

    /// Tiny configuration for gradient checks and fast tests.
    pub fn nano() -> Self {
        Self { cross_heads: 4, patch: 4, max_ar: 2, max_patches: 64, ..Self::base(32, 4, 1, 64) }
    }

    pub fn ti() -> Self {
        Self::base(256, 4, 4, 1024)
    }

    pub fn s() -> Self {
        Self::base(512, 8, 4, 2048)
    }

    pub fn m() -> Self {
        Self::base(768, 12, 8, 3072)
    }

    pub fn l() -> Self {
        Self { max_ar: 16, pe_variant: PeVariant::StBilinear, ..Self::base(1024, 16, 16, 4096) }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "nano" => Ok(Self::nano()),
            "ti" => Ok(Self::ti()),
            "s" => Ok(Self::s()),
            "m" => Ok(Self::m()),
            "l" => Ok(Self::l()),
            o => Err(Error::invalid(format!("unknown model preset '{o}' (expected one of {PRESET_NAMES:?})"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("embed", self.embed),
            ("heads", self.heads),
            ("cross_heads", self.cross_heads),
            ("depth", self.depth),
            ("mlp_dim", self.mlp_dim),
            ("conv_filters", self.conv_filters),
            ("conv_stem", self.conv_stem),
            ("patch", self.patch),
            ("max_ar", self.max_ar),
            ("max_patches", self.max_patches),
            ("max_in_ch", self.max_in_ch),
            ("max_fields", self.max_fields),
            ("max_components", self.max_components),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::invalid(format!("model.{k} must be positive")));
            }
        }
        if !self.embed.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!("embed {} not divisible by heads {}", self.embed, self.heads)));
        }
        if !self.embed.is_multiple_of(self.cross_heads) {
            return Err(Error::invalid(format!("embed {} not divisible by cross_heads {}", self.embed, self.cross_heads)));
        }
        if self.max_components > self.max_in_ch {
            return Err(Error::invalid("max_components exceeds max_in_ch"));
        }
        for (k, p) in [("dropout", self.dropout), ("lora.dropout", self.lora.dropout)] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::invalid(format!("{k} {p} outside [0,1)")));
            }
        }
        if !(self.lora.alpha > 0.0) {
            return Err(Error::invalid("lora.alpha must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed / self.heads
    }

    /// Channel schedule of the 3x3x3 blocks: `h -> min(2h, F) -> ... -> F`,
    /// always at least one block.
    pub fn conv_schedule(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let mut w = self.conv_stem;
        loop {
            let next = (2 * w).min(self.conv_filters);
            let next = if w > self.conv_filters { self.conv_filters } else { next };
            out.push((w, next));
            w = next;
            if w == self.conv_filters {
                return out;
            }
        }
    }

    /// Longest token vector: all filters over a full `p^3` patch.
    pub fn token_dim(&self) -> usize {
        self.conv_filters * self.patch.pow(3)
    }

    /// Decoder output width per token.
    pub fn decoder_dim(&self) -> usize {
        self.max_fields * self.max_components * self.patch.pow(3)
    }
}
