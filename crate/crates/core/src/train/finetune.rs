use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{Model, ParamGroup};

/// Nested trainable sets for fine-tuning a pretrained model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum FinetuneLevel {
    /// Adapters, positional table and every layer-norm affine.
    L1,
    /// Level 1 plus the conv encoder, token projection and field fusion.
    L2,
    /// Level 2 plus the decoder.
    L3,
    /// Every parameter.
    L4,
}

impl FinetuneLevel {
    pub fn new(level: u8) -> Result<Self> {
        match level {
            1 => Ok(Self::L1),
            2 => Ok(Self::L2),
            3 => Ok(Self::L3),
            4 => Ok(Self::L4),
            l => Err(Error::invalid(format!("unknown fine-tuning level {l} (expected 1-4)"))),
        }
    }

    pub fn number(self) -> u8 {
        match self {
            Self::L1 => 1,
            Self::L2 => 2,
            Self::L3 => 3,
            Self::L4 => 4,
        }
    }

    pub fn groups(self) -> Vec<ParamGroup> {
        use ParamGroup::*;
        let mut g = vec![LoraAdapter, PosEnc, Norm];
        if self >= Self::L2 {
            g.extend([Conv, Projection, Fusion]);
        }
        if self >= Self::L3 {
            g.push(Decoder);
        }
        if self == Self::L4 {
            g.extend([AttnBase, MlpBase]);
        }
        g
    }

    /// Default `(learning rate, weight decay)`.
    pub fn default_hparams(self) -> (f64, f64) {
        match self {
            Self::L1 => (1e-3, 0.0),
            _ => (1e-4, 0.0),
        }
    }
}

impl FromStr for FinetuneLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let n: u8 = s.trim().parse().map_err(|_| Error::invalid(format!("unknown fine-tuning level '{s}'")))?;
        Self::new(n)
    }
}

impl fmt::Display for FinetuneLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "level-{}", self.number())
    }
}

/// Installs adapters of the given ranks (keeping existing ones of equal
/// rank) and marks exactly the level's groups trainable. Returns the
/// trainable parameter count.
pub fn apply_finetune_level(model: &mut Model, level: FinetuneLevel, r_attn: usize, r_mlp: usize, seed: u64) -> usize {
    model.set_lora_mode(r_attn, r_mlp, false, seed);
    let groups = level.groups();
    model.params_mut().set_trainable_where(|_, e| groups.contains(&e.group));
    model.params().trainable_count()
}
