//! Output directory layout, config snapshot and version stamp.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use protoseg_core::evaluation::Variant;
use protoseg_core::RunConfig;

pub const CONFIG_SNAPSHOT: &str = "config.toml";
pub const VERSION_STAMP: &str = "VERSION";

pub fn version_stamp() -> String {
    format!(
        "protoseg {} ({})\n",
        env!("CARGO_PKG_VERSION"),
        option_env!("PROTOSEG_GIT_DESCRIBE").unwrap_or("unknown")
    )
}

/// The output directory of a run.
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    /// Claims `root` for `cfg`: writes the snapshot and stamp, refusing when
    /// an existing snapshot differs unless `force` is set.
    pub fn claim(root: &Path, cfg: &RunConfig, force: bool) -> Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        let snapshot = root.join(CONFIG_SNAPSHOT);
        let digest = cfg.digest()?;
        if snapshot.exists() {
            let text = fs::read_to_string(&snapshot).with_context(|| format!("reading {}", snapshot.display()))?;
            let previous = RunConfig::from_toml(&text)
                .with_context(|| format!("parsing {}", snapshot.display()))?
                .digest()?;
            if previous != digest && !force {
                bail!(
                    "{} holds outputs of config {previous}, current config is {digest}; pass --force to overwrite",
                    root.display()
                );
            }
        }
        fs::write(&snapshot, cfg.to_toml()?).with_context(|| format!("writing {}", snapshot.display()))?;
        let stamp = root.join(VERSION_STAMP);
        fs::write(&stamp, version_stamp()).with_context(|| format!("writing {}", stamp.display()))?;
        Ok(Workspace {
            root: root.to_path_buf(),
        })
    }

    pub fn synth_data(&self) -> PathBuf {
        self.root.join("data")
    }

    /// Training directory of the model a variant relies on.
    pub fn train_dir(&self, model: &str, fold: &str) -> PathBuf {
        self.root.join("train").join(model).join(fold)
    }

    pub fn ttt_dir(&self, fold: &str) -> PathBuf {
        self.root.join("ttt").join(fold)
    }

    pub fn predictions(&self, variant: Variant, fold: &str) -> PathBuf {
        self.root.join("predictions").join(variant.name()).join(fold)
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn changed_config_needs_force() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::synthetic();
        Workspace::claim(dir.path(), &cfg, false).unwrap();
        Workspace::claim(dir.path(), &cfg, false).unwrap();
        let other = cfg.clone().with_seed(9);
        let err = Workspace::claim(dir.path(), &other, false).err().unwrap();
        assert!(err.to_string().contains("--force"));
        Workspace::claim(dir.path(), &other, true).unwrap();
        let text = fs::read_to_string(dir.path().join(CONFIG_SNAPSHOT)).unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), other);
        assert!(fs::read_to_string(dir.path().join(VERSION_STAMP)).unwrap().starts_with("protoseg "));
    }
}
