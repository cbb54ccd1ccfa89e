//! Training configuration and the four ablation variants.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{ConvStackSpec, WeightSource};
use crate::discriminator::DiscriminatorConfig;
use crate::error::{FurnError, Result};
use crate::generator::GeneratorConfig;
use crate::losses::{AdversarialLoss, LossWeights};
use crate::optim::AdamConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// BCE loss, image-only critic.
    Ridb,
    /// RaLS loss, image-only critic.
    RidbRals,
    /// BCE loss, joint image/semantics critic.
    RidbSe,
    /// RaLS loss, joint image/semantics critic.
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Ridb, Variant::RidbRals, Variant::RidbSe, Variant::Full];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Ridb => "ridb",
            Variant::RidbRals => "ridb-rals",
            Variant::RidbSe => "ridb-se",
            Variant::Full => "full",
        }
    }

    pub fn loss(self) -> AdversarialLoss {
        match self {
            Variant::Ridb | Variant::RidbSe => AdversarialLoss::Bce,
            Variant::RidbRals | Variant::Full => AdversarialLoss::Rals,
        }
    }

    pub fn use_semantics(self) -> bool {
        matches!(self, Variant::RidbSe | Variant::Full)
    }
}

impl FromStr for Variant {
    type Err = FurnError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| FurnError::UnknownVariant(s.to_string()))
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub spec: ConvStackSpec,
    pub weights: WeightSource,
    /// Use one weight set for the HR and LR semantic encoders.
    pub share_encoders: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            spec: ConvStackSpec::vgg19(),
            weights: WeightSource::SeededRandom { seed: 0 },
            share_encoders: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub optimizer: AdamConfig,
    pub batch_size: usize,
    pub steps: u64,
    /// Checkpoint interval in steps; the final step is always written.
    pub checkpoint_every: u64,
    pub scale: usize,
    pub variant: Variant,
    pub seed: u64,
    pub weights: LossWeights,
    /// Skip the discriminator and train on the perceptual loss alone.
    pub generator_only: bool,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub backbone: BackboneConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: AdamConfig::default(),
            batch_size: 8,
            steps: 30_000,
            checkpoint_every: 1_000,
            scale: 4,
            variant: Variant::Full,
            seed: 0,
            weights: LossWeights::default(),
            generator_only: false,
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            backbone: BackboneConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Small networks, batch 4: sized for 64×64 synthetic faces on a CPU.
    pub fn desk() -> Self {
        let mut cfg = TrainConfig {
            batch_size: 4,
            steps: 200,
            checkpoint_every: 50,
            generator: GeneratorConfig::tiny(4),
            discriminator: DiscriminatorConfig {
                esldsn_channels: vec![16, 16, 16, 16, 8, 8],
                ildsn_channels: vec![8, 8, 16, 16, 32, 32, 64, 64, 64],
                ..DiscriminatorConfig::default()
            },
            backbone: BackboneConfig {
                spec: ConvStackSpec::narrow(8, 16),
                ..BackboneConfig::default()
            },
            ..TrainConfig::default()
        };
        cfg.normalize();
        cfg
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self.normalize();
        self
    }

    /// Propagates the top-level settings into the nested network configs.
    pub fn normalize(&mut self) {
        self.generator.scale = self.scale;
        self.discriminator.use_semantics = self.variant.use_semantics();
        self.discriminator.semantic_channels = self.backbone.spec.semantic_channels;
    }

    pub fn loss(&self) -> AdversarialLoss {
        self.variant.loss()
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(FurnError::InvalidConfig("batch size must be at least 1".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(FurnError::InvalidConfig("checkpoint interval must be at least 1".into()));
        }
        if self.generator.scale != self.scale
            || self.discriminator.use_semantics != self.variant.use_semantics()
            || self.discriminator.semantic_channels != self.backbone.spec.semantic_channels
        {
            return Err(FurnError::InvalidConfig("nested configs disagree with the top-level settings".into()));
        }
        self.optimizer.validate()?;
        self.weights.validate()?;
        self.generator.validate()?;
        self.discriminator.validate()?;
        self.backbone.spec.validate()
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// Fingerprint ignoring the step budget and checkpoint interval, which a
    /// resumed run may change.
    pub fn resume_key(&self) -> String {
        let mut c = self.clone();
        c.steps = 0;
        c.checkpoint_every = 0;
        c.fingerprint()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut cfg: TrainConfig = serde_json::from_str(text)?;
        cfg.normalize();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| FurnError::io(path.display(), e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_table() {
        assert_eq!("full".parse::<Variant>().unwrap().loss(), AdversarialLoss::Rals);
        assert!("full".parse::<Variant>().unwrap().use_semantics());
        assert_eq!("ridb".parse::<Variant>().unwrap().loss(), AdversarialLoss::Bce);
        assert!(!"ridb".parse::<Variant>().unwrap().use_semantics());
        assert!(matches!("xyz".parse::<Variant>(), Err(FurnError::UnknownVariant(_))));
    }

    #[test]
    fn full_and_ridb_differ_in_two_bits() {
        let full = TrainConfig::desk().with_variant(Variant::Full);
        let ridb = TrainConfig::desk().with_variant(Variant::Ridb);
        assert_ne!(full.loss(), ridb.loss());
        assert_ne!(full.discriminator.use_semantics, ridb.discriminator.use_semantics);
        let mut patched = ridb.clone();
        patched.variant = Variant::Full;
        patched.normalize();
        assert_eq!(patched, full);
    }

    #[test]
    fn fingerprints_are_distinct_and_stable() {
        let prints: std::collections::HashSet<_> =
            Variant::ALL.iter().map(|&v| TrainConfig::desk().with_variant(v).fingerprint()).collect();
        assert_eq!(prints.len(), 4);
        let cfg = TrainConfig::desk();
        let back = TrainConfig::from_json(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back.fingerprint(), cfg.fingerprint());
    }

    #[test]
    fn partial_json_fills_defaults() {
        let cfg = TrainConfig::from_json(r#"{"variant": "ridb-se", "scale": 8}"#).unwrap();
        assert_eq!(cfg.generator.scale, 8);
        assert!(cfg.discriminator.use_semantics);
        assert_eq!(cfg.optimizer.learning_rate, 1e-4);
        assert!(TrainConfig::from_json(r#"{"variant": "nope"}"#).is_err());
    }
}
