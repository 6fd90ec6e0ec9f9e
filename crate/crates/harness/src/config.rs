//! Flat TOML experiment configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use stag_core::backbone::BackboneConfig;
use stag_core::model::Strategy;
use stag_core::side::{RefineFn, StagConfig};
use stag_core::train::TrainConfig;
use stag_core::{Error, Precision, Result};

/// Every key is optional; missing keys take the desk-scale defaults and
/// unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub d: usize,
    pub layers: usize,
    pub tokens: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub group_size: usize,

    pub strategy: String,
    pub d_prime: usize,
    /// Accumulation blocks for `stag_custom`.
    pub a_blocks: usize,
    pub k: usize,
    pub refine_fn: String,
    /// Consecutive blocks sharing one parameter group under `stag_custom`;
    /// 0 shares one group per block type.
    pub share_run: usize,
    pub include_self: bool,

    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub seeds: Vec<u64>,
    pub backbone_seed: u64,

    pub train_manifest: PathBuf,
    pub test_manifest: PathBuf,
    pub out_dir: PathBuf,
    pub deterministic: bool,
    pub precision: String,

    /// Synthetic generator settings.
    pub data_seed: u64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub points: usize,
    pub noise_sigma: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let bb = BackboneConfig::desk();
        Self {
            d: bb.d,
            layers: bb.layers,
            tokens: bb.tokens,
            heads: bb.heads,
            mlp_ratio: bb.mlp_ratio,
            group_size: bb.group_size,
            strategy: Strategy::StagStd.as_str().into(),
            d_prime: bb.d / 2,
            a_blocks: bb.layers / 2,
            k: 8,
            refine_fn: RefineFn::EfficientEdgeConv.as_str().into(),
            share_run: 0,
            include_self: false,
            epochs: 100,
            batch_size: 16,
            lr_max: 5e-4,
            lr_min: 1e-6,
            weight_decay: 0.05,
            dropout: 0.5,
            seeds: vec![1, 2, 3],
            backbone_seed: 0,
            train_manifest: PathBuf::from("data/train/manifest.tsv"),
            test_manifest: PathBuf::from("data/test/manifest.tsv"),
            out_dir: PathBuf::from("runs"),
            deterministic: false,
            precision: Precision::Single.as_str().into(),
            data_seed: 0,
            train_per_class: 100,
            test_per_class: 25,
            points: 256,
            noise_sigma: 0.01,
        }
    }
}

fn keyed<T>(key: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Config(format!("{key}: {e}")))
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(base) = path.parent() {
            for p in [&mut cfg.train_manifest, &mut cfg.test_manifest, &mut cfg.out_dir] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    /// The effective configuration with every default written out.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn validate(&self) -> Result<()> {
        self.strategy()?;
        self.refine()?;
        self.precision()?;
        keyed("d/layers/tokens/heads", self.backbone().validate())?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size: must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout: {} not in [0, 1)", self.dropout)));
        }
        if self.lr_min > self.lr_max || self.lr_min < 0.0 {
            return Err(Error::Config("lr_min/lr_max: need 0 ≤ lr_min ≤ lr_max".into()));
        }
        Ok(())
    }

    pub fn strategy(&self) -> Result<Strategy> {
        keyed("strategy", self.strategy.parse())
    }

    pub fn refine(&self) -> Result<RefineFn> {
        keyed("refine_fn", self.refine_fn.parse())
    }

    pub fn precision(&self) -> Result<Precision> {
        keyed("precision", self.precision.parse().map_err(Error::Config))
    }

    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            d: self.d,
            layers: self.layers,
            tokens: self.tokens,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            group_size: self.group_size,
        }
    }

    /// Side template: the `stag_custom` configuration, from which the
    /// named variants take `d′`, `k`, the refinement function and self-loops.
    pub fn side_template(&self) -> Result<StagConfig> {
        let run = (self.share_run > 0).then_some(self.share_run);
        let mut cfg = StagConfig::custom(self.d, self.d_prime, self.layers, self.a_blocks, self.k, run)
            .with_refine(self.refine()?);
        cfg.include_self = self.include_self;
        Ok(cfg)
    }

    pub fn train_config(&self, seed: u64) -> Result<TrainConfig> {
        Ok(TrainConfig {
            strategy: self.strategy()?,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr_max: self.lr_max,
            lr_min: self.lr_min,
            weight_decay: self.weight_decay,
            seed,
            deterministic: self.deterministic,
        })
    }
}
