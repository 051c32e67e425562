use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::NetworkConfig;
use crate::train::TrainConfig;

/// Data locations.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Directory holding `manifest.csv` from `prepare`.
    pub dir: Option<PathBuf>,
    /// Directory of held-out clips for `ablate`; defaults to `dir`.
    pub eval_dir: Option<PathBuf>,
}

/// JSON run configuration. Every section and key is optional; unknown keys
/// are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfigFile {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    /// Overrides `train.seed` when present.
    pub seed: Option<u64>,
}

impl RunConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("run config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// Training config with the top-level seed folded in.
    pub fn effective_train(&self) -> TrainConfig {
        let mut t = self.train.clone();
        if let Some(s) = self.seed {
            t.seed = s;
        }
        t
    }
}

/// Command-line overrides; they take precedence over the config file.
#[derive(Args, Clone, Debug, Default)]
pub struct Overrides {
    #[arg(long = "network.base_channels", value_name = "N")]
    pub base_channels: Option<usize>,
    #[arg(long = "network.resdb_count", value_name = "N")]
    pub resdb_count: Option<usize>,
    #[arg(long = "network.resdb_growth", value_name = "N")]
    pub resdb_growth: Option<usize>,
    #[arg(long = "network.conv3d_count", value_name = "N")]
    pub conv3d_count: Option<usize>,
    #[arg(long = "network.enable_qe", value_name = "BOOL")]
    pub enable_qe: Option<bool>,
    #[arg(long = "network.enable_cfqe", value_name = "BOOL")]
    pub enable_cfqe: Option<bool>,
    #[arg(long = "network.cbam_reduction", value_name = "N")]
    pub cbam_reduction: Option<usize>,
    #[arg(long = "network.skip_grounded", value_name = "BOOL")]
    pub skip_grounded: Option<bool>,
    #[arg(long = "train.batch_size", value_name = "N")]
    pub batch_size: Option<usize>,
    #[arg(long = "train.lr0", value_name = "LR")]
    pub lr0: Option<f64>,
    #[arg(long = "train.max_epochs", value_name = "N")]
    pub max_epochs: Option<usize>,
    #[arg(long = "train.label_extent", value_name = "PX")]
    pub label_extent: Option<usize>,
    #[arg(long = "train.patches_per_clip", value_name = "N")]
    pub patches_per_clip: Option<usize>,
    #[arg(long = "train.grad_clip", value_name = "NORM")]
    pub grad_clip: Option<f64>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfigFile) {
        let n = &mut cfg.network;
        macro_rules! set {
            ($dst:expr, $src:expr) => {
                if let Some(v) = $src {
                    $dst = v;
                }
            };
        }
        set!(n.base_channels, self.base_channels);
        set!(n.resdb_count, self.resdb_count);
        set!(n.resdb_growth, self.resdb_growth);
        set!(n.conv3d_count, self.conv3d_count);
        set!(n.enable_qe, self.enable_qe);
        set!(n.enable_cfqe, self.enable_cfqe);
        set!(n.cbam_reduction, self.cbam_reduction);
        set!(n.skip_grounded, self.skip_grounded);
        let t = &mut cfg.train;
        set!(t.batch_size, self.batch_size);
        set!(t.lr0, self.lr0);
        set!(t.max_epochs, self.max_epochs);
        set!(t.label_extent, self.label_extent);
        set!(t.patches_per_clip, self.patches_per_clip);
        if self.grad_clip.is_some() {
            t.grad_clip = self.grad_clip;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_unknown_keys() {
        let c = RunConfigFile::parse("{}").unwrap();
        assert_eq!(c, RunConfigFile::default());
        assert!(RunConfigFile::parse(r#"{"netwerk": {}}"#).is_err());
        assert!(RunConfigFile::parse(r#"{"train": {"lr": 1}}"#).is_err());
    }

    #[test]
    fn json_round_trip() {
        let mut c = RunConfigFile::default();
        c.network.resdb_count = 5;
        c.seed = Some(9);
        assert_eq!(RunConfigFile::parse(&c.to_json()).unwrap(), c);
        assert_eq!(c.effective_train().seed, 9);
    }

    #[test]
    fn overrides_win() {
        let mut c = RunConfigFile::parse(r#"{"network": {"resdb_count": 7}}"#).unwrap();
        Overrides {
            resdb_count: Some(3),
            ..Default::default()
        }
        .apply(&mut c);
        assert_eq!(c.network.resdb_count, 3);
    }
}
