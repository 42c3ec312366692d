//! The JSON run manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::data::{SplitConfig, SynthConfig, TileConfig};
use crate::error::{Error, Result};
use crate::topology::{parse_topology, preset, TopologySpec};
use crate::train::{OptimizerConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub volume: PathBuf,
    pub masks: PathBuf,
    /// Output of `prepare`.
    pub prepared_dir: PathBuf,
    /// Output of `train`, `eval` and `export-masks`.
    pub run_dir: PathBuf,
    pub clip_lo_pct: f64,
    pub clip_hi_pct: f64,
    /// Merge an 8-class mask onto 7 classes during `prepare`.
    pub merge_classes: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            volume: "work/volume.segv".into(),
            masks: "work/masks.segv".into(),
            prepared_dir: "work/prepared".into(),
            run_dir: "work/run".into(),
            clip_lo_pct: 1.0,
            clip_hi_pct: 99.0,
            merge_classes: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub preset: String,
    /// DSL file; takes precedence over `preset`.
    pub topology: Option<PathBuf>,
    /// Divides every hidden width (1 keeps the topology as is).
    pub width_divisor: usize,
    pub min_channels: usize,
    /// Running-statistics momentum of every batch norm.
    pub bn_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            preset: "danet-fcn2".into(),
            topology: None,
            width_divisor: 1,
            min_channels: 4,
            bn_momentum: crate::nn::BN_MOMENTUM,
        }
    }
}

impl ModelConfig {
    /// Builds the network with the configured batch-norm momentum.
    pub fn build<T: crate::tensor::Scalar>(&self, seed: u64) -> Result<crate::topology::Model<T>> {
        let mut model = crate::topology::Model::build(&self.resolve()?, seed)?;
        model.set_bn_momentum(self.bn_momentum)?;
        Ok(model)
    }

    pub fn resolve(&self) -> Result<TopologySpec> {
        let spec = match &self.topology {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| Error::config(format!("model.topology {}: {e}", path.display())))?;
                parse_topology(&text)?
            }
            None => preset(&self.preset)?,
        };
        if self.width_divisor == 0 {
            return Err(Error::config("model.width_divisor must be >= 1"));
        }
        Ok(if self.width_divisor == 1 {
            spec
        } else {
            spec.with_width_divisor(self.width_divisor, self.min_channels)
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub tile_h: usize,
    pub tile_w: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            tile_h: 80,
            tile_w: 120,
        }
    }
}

/// Every setting of a run. All randomness derives from `seed`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub split: SplitConfig,
    pub tiles: TileConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub optimizer: OptimizerConfig,
    pub eval: EvalConfig,
}

/// Sets `a.b.c` in a JSON tree. The value is parsed as JSON, falling back
/// to a plain string.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override `{assignment}` is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::config(format!("`{}` is not a section", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            if !obj.contains_key(*part) {
                return Err(Error::config(format!("unknown config key `{key}`")));
            }
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj
            .get_mut(*part)
            .ok_or_else(|| Error::config(format!("unknown config key `{key}`")))?;
    }
    Ok(())
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads an optional file, then applies `key=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| Error::config(format!("cannot read config {}: {e}", p.display())))?;
                let parsed: Self =
                    serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", p.display())))?;
                serde_json::to_value(parsed)?
            }
            None => serde_json::to_value(Self::default())?,
        };
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: Self = serde_json::from_value(value).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.split.validate()?;
        self.tiles.strides()?;
        self.train.validate()?;
        self.optimizer.validate()?;
        if !(0.0 <= self.data.clip_lo_pct
            && self.data.clip_lo_pct < self.data.clip_hi_pct
            && self.data.clip_hi_pct <= 100.0)
        {
            return Err(Error::config(
                "data.clip_lo_pct/clip_hi_pct must satisfy 0 <= lo < hi <= 100",
            ));
        }
        if !(self.model.bn_momentum > 0.0 && self.model.bn_momentum < 1.0) {
            return Err(Error::config("model.bn_momentum must be in (0, 1)"));
        }
        if self.eval.tile_h == 0 || self.eval.tile_w == 0 {
            return Err(Error::config("eval tile extents must be >= 1"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises") + "\n"
    }

    /// SHA-256 of the compact JSON form.
    pub fn digest(&self) -> String {
        let compact = serde_json::to_string(self).expect("config serialises");
        Sha256::digest(compact.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        assert_eq!(cfg.digest().len(), 64);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::from_json(r#"{"sed": 1}"#), Err(Error::Config(_))));
        assert!(matches!(
            RunConfig::from_json(r#"{"train": {"batch": 1}}"#),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn overrides() {
        let cfg = RunConfig::load(None, &["train.batch_size=8".into(), "model.preset=danet-fcn3".into()]).unwrap();
        assert_eq!(cfg.train.batch_size, 8);
        assert_eq!(cfg.model.preset, "danet-fcn3");
        assert!(RunConfig::load(None, &["train.nope=1".into()]).is_err());
        assert!(RunConfig::load(None, &["seed.x=1".into()]).is_err());
        assert!(RunConfig::load(None, &["train.batch_size=0".into()]).is_err());
    }

    #[test]
    fn digest_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.seed = 1;
        assert_ne!(a.digest(), b.digest());
    }
}
