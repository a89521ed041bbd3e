use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Cnn,
    Transformer,
}

impl std::fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EncoderKind::Cnn => "cnn",
            EncoderKind::Transformer => "transformer",
        })
    }
}

/// Instance encoder hyperparameters. Defaults follow the reference
/// setup: 300-d words, 50-d positions, one CNN layer (window 3, 250
/// filters) or a 2-layer, 512-wide Transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub word_dim: usize,
    pub pos_dim: usize,
    pub cnn_window: usize,
    pub cnn_filters: usize,
    pub tf_layers: usize,
    pub tf_dim: usize,
    pub tf_heads: usize,
    pub tf_ff_dim: usize,
    pub max_pos_dist: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            kind: EncoderKind::Cnn,
            word_dim: 300,
            pos_dim: 50,
            cnn_window: 3,
            cnn_filters: 250,
            tf_layers: 2,
            tf_dim: 512,
            tf_heads: 8,
            tf_ff_dim: 1024,
            max_pos_dist: 50,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("word_dim", self.word_dim),
            ("pos_dim", self.pos_dim),
            ("cnn_window", self.cnn_window),
            ("cnn_filters", self.cnn_filters),
            ("tf_layers", self.tf_layers),
            ("tf_dim", self.tf_dim),
            ("tf_heads", self.tf_heads),
            ("tf_ff_dim", self.tf_ff_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("encoder.{name} must be positive")));
            }
        }
        if self.tf_dim % self.tf_heads != 0 {
            return Err(Error::Config(format!(
                "encoder.tf_dim {} is not divisible by encoder.tf_heads {}",
                self.tf_dim, self.tf_heads
            )));
        }
        if self.cnn_window % 2 == 0 {
            return Err(Error::Config(format!("encoder.cnn_window {} must be odd", self.cnn_window)));
        }
        Ok(())
    }

    /// Width of a token vector: word plus position embedding.
    pub fn token_dim(&self) -> usize {
        self.word_dim + self.pos_dim
    }

    /// Width of an instance encoding.
    pub fn output_dim(&self) -> usize {
        match self.kind {
            EncoderKind::Cnn => self.cnn_filters,
            EncoderKind::Transformer => self.tf_dim,
        }
    }
}

/// The four metric-learning heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    Matching,
    Proto,
    ProtoAtt,
    Relation,
}

impl HeadKind {
    pub const ALL: [HeadKind; 4] = [HeadKind::Matching, HeadKind::Proto, HeadKind::ProtoAtt, HeadKind::Relation];

    pub fn name(&self) -> &'static str {
        match self {
            HeadKind::Matching => "Matching",
            HeadKind::Proto => "Proto",
            HeadKind::ProtoAtt => "Proto+Att",
            HeadKind::Relation => "Relation",
        }
    }

    pub fn distance(&self) -> Distance {
        match self {
            HeadKind::Matching => Distance::Cosine,
            HeadKind::Proto | HeadKind::ProtoAtt => Distance::Euclidean,
            HeadKind::Relation => Distance::Relation,
        }
    }

    pub fn prototype(&self) -> PrototypeMode {
        match self {
            HeadKind::ProtoAtt => PrototypeMode::HybridAttention,
            _ => PrototypeMode::Mean,
        }
    }
}

impl std::fmt::Display for HeadKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            HeadKind::Matching => "matching",
            HeadKind::Proto => "proto",
            HeadKind::ProtoAtt => "proto-att",
            HeadKind::Relation => "relation",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Distance {
    /// `1 − cos(a, b)`
    Cosine,
    /// `‖a − b‖²`
    Euclidean,
    /// `1 − sigmoid(mlp([a; b]))`
    Relation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrototypeMode {
    Mean,
    HybridAttention,
}

/// Squashing applied to the elementwise support·query product before the
/// per-dimension sum that scores attention prototypes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionActivation {
    Tanh,
    Identity,
}

impl AttentionActivation {
    pub fn apply(&self, x: f64) -> f64 {
        match self {
            AttentionActivation::Tanh => x.tanh(),
            AttentionActivation::Identity => x,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub kind: HeadKind,
    pub relation_hidden: usize,
    pub attention_activation: AttentionActivation,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            kind: HeadKind::Proto,
            relation_hidden: 64,
            attention_activation: AttentionActivation::Tanh,
        }
    }
}

impl HeadConfig {
    pub fn new(kind: HeadKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn distance(&self) -> Distance {
        self.kind.distance()
    }

    pub fn prototype(&self) -> PrototypeMode {
        self.kind.prototype()
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == HeadKind::Relation && self.relation_hidden == 0 {
            return Err(Error::Config("head.relation_hidden must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.head.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_mapping() {
        use Distance::*;
        use PrototypeMode::*;
        let got: Vec<_> = HeadKind::ALL.iter().map(|k| (k.distance(), k.prototype())).collect();
        assert_eq!(
            got,
            vec![(Cosine, Mean), (Euclidean, Mean), (Euclidean, HybridAttention), (Relation, Mean)]
        );
    }

    #[test]
    fn default_encoder_is_valid_and_sized() {
        let c = EncoderConfig::default();
        c.validate().unwrap();
        assert_eq!(c.token_dim(), 350);
        assert_eq!(c.output_dim(), 250);
    }

    #[test]
    fn rejects_indivisible_heads_and_even_window() {
        let c = EncoderConfig {
            tf_heads: 10,
            ..EncoderConfig::default()
        };
        assert!(c.validate().is_err());
        let c = EncoderConfig {
            cnn_window: 4,
            ..EncoderConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn head_names_round_trip_through_serde() {
        for k in HeadKind::ALL {
            let s = serde_json::to_string(&k).unwrap();
            assert_eq!(s, format!("\"{k}\""));
            assert_eq!(serde_json::from_str::<HeadKind>(&s).unwrap(), k);
        }
    }
}
