use std::collections::BTreeMap;

use crate::attention::CrossQvMode;
use crate::error::{Error, Result};

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    /// Per-frame feature width `D`.
    pub input_dim: usize,
    /// Width `F` of the residual stream.
    pub model_dim: usize,
    pub num_classes: usize,
    /// DA blocks per stage, `N`. Also the exponent base of the window schedule.
    pub blocks_per_stage: usize,
    pub num_decoders: usize,
    /// Width `d` of queries, keys and values.
    pub attn_dim: usize,
    pub cross_qv_mode: CrossQvMode,
    /// When false, every decoder block cross-attends to the encoder's last
    /// block instead of its index-matched block.
    pub cross_connections: bool,
    pub seed: u64,
}

/// `F / 4`, but never below 4.
pub fn default_attn_dim(model_dim: usize) -> usize {
    (model_dim / 4).max(4)
}

impl ModelConfig {
    /// Defaults shared by both presets: `F = 64`, three decoders.
    pub fn new(input_dim: usize, num_classes: usize, blocks_per_stage: usize) -> Self {
        Self {
            input_dim,
            model_dim: 64,
            num_classes,
            blocks_per_stage,
            num_decoders: 3,
            attn_dim: default_attn_dim(64),
            cross_qv_mode: CrossQvMode::QueryKey,
            cross_connections: true,
            seed: 0,
        }
    }

    /// Small-dataset preset, nine blocks per stage.
    pub fn small(input_dim: usize, num_classes: usize) -> Self {
        Self::new(input_dim, num_classes, 9)
    }

    /// Large-dataset preset, seven blocks per stage.
    pub fn large(input_dim: usize, num_classes: usize) -> Self {
        Self::new(input_dim, num_classes, 7)
    }

    /// Sets `F` and resets `d` to its default for that width.
    pub fn with_model_dim(mut self, model_dim: usize) -> Self {
        self.model_dim = model_dim;
        self.attn_dim = default_attn_dim(model_dim);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.input_dim == 0 {
            return fail("input_dim must be positive".into());
        }
        if self.model_dim == 0 || self.attn_dim == 0 {
            return fail("model_dim and attn_dim must be positive".into());
        }
        if self.num_classes < 2 {
            return fail(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            ));
        }
        if self.blocks_per_stage < 1 {
            return fail("blocks_per_stage must be at least 1".into());
        }
        if self.blocks_per_stage >= usize::BITS as usize - 1 {
            return fail(format!(
                "blocks_per_stage {} is too large",
                self.blocks_per_stage
            ));
        }
        Ok(())
    }

    pub fn stages(&self) -> usize {
        1 + self.num_decoders
    }

    /// Ordered `key=value` pairs describing the config.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("input_dim", self.input_dim.to_string()),
            ("model_dim", self.model_dim.to_string()),
            ("num_classes", self.num_classes.to_string()),
            ("blocks_per_stage", self.blocks_per_stage.to_string()),
            ("num_decoders", self.num_decoders.to_string()),
            ("attn_dim", self.attn_dim.to_string()),
            ("cross_qv_mode", self.cross_qv_mode.to_string()),
            ("cross_connections", self.cross_connections.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    /// Inverse of [`to_pairs`](Self::to_pairs). Every key must be present.
    pub fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<Self> {
        fn field<T: std::str::FromStr>(pairs: &BTreeMap<String, String>, key: &str) -> Result<T> {
            let raw = pairs
                .get(key)
                .ok_or_else(|| Error::Config(format!("missing key {key}")))?;
            raw.parse()
                .map_err(|_| Error::Config(format!("invalid value {raw:?} for {key}")))
        }
        let cfg = Self {
            input_dim: field(pairs, "input_dim")?,
            model_dim: field(pairs, "model_dim")?,
            num_classes: field(pairs, "num_classes")?,
            blocks_per_stage: field(pairs, "blocks_per_stage")?,
            num_decoders: field(pairs, "num_decoders")?,
            attn_dim: field(pairs, "attn_dim")?,
            cross_qv_mode: pairs
                .get("cross_qv_mode")
                .ok_or_else(|| Error::Config("missing key cross_qv_mode".into()))?
                .parse()?,
            cross_connections: field(pairs, "cross_connections")?,
            seed: field(pairs, "seed")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets() {
        assert_eq!(ModelConfig::small(16, 11).blocks_per_stage, 9);
        assert_eq!(ModelConfig::large(16, 12).blocks_per_stage, 7);
        assert_eq!(ModelConfig::small(16, 11).num_decoders, 3);
        assert_eq!(ModelConfig::small(16, 11).attn_dim, 16);
        assert_eq!(default_attn_dim(8), 4);
    }

    #[test]
    fn validation() {
        let mut c = ModelConfig::small(16, 11);
        assert!(c.validate().is_ok());
        c.num_classes = 1;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::small(16, 11);
        c.blocks_per_stage = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn pairs_round_trip() {
        let mut c = ModelConfig::large(7, 3).with_model_dim(12);
        c.cross_qv_mode = CrossQvMode::QueryValue;
        c.cross_connections = false;
        c.seed = 99;
        let map = c
            .to_pairs()
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        assert_eq!(ModelConfig::from_pairs(&map).unwrap(), c);
    }
}
