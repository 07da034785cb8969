//! Optional TOML configuration. Explicit command-line flags take precedence.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::parser::ValueSource;
use clap::ArgMatches;
use serde::Deserialize;

use pendepth::datagen::AugmentConfig;
use pendepth::estimate::LandmarkFitConfig;
use pendepth::hha::HhaConfig;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    /// Model file; relative paths resolve against the config file.
    pub model: Option<PathBuf>,
    /// `passthrough`, `landmark` or `external:<command>`.
    pub estimator: Option<String>,
    /// `default` or a camera file.
    pub camera: Option<String>,
    pub threads: Option<usize>,
    pub hha: Option<HhaConfig>,
    pub augment: Option<AugmentConfig>,
    pub landmark: Option<LandmarkFitConfig>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("config: cannot read {}", path.display()))?;
        let mut cfg: FileConfig =
            toml::from_str(&text).with_context(|| format!("config: {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(model) = cfg.model.take() {
            let model = base.join(model);
            if !model.is_file() {
                bail!("config: model file {} does not exist", model.display());
            }
            cfg.model = Some(model);
        }
        if let Some(camera) = cfg.camera.take() {
            cfg.camera = Some(if camera == "default" {
                camera
            } else {
                let p = base.join(&camera);
                if !p.is_file() {
                    bail!("config: camera file {} does not exist", p.display());
                }
                p.to_string_lossy().into_owned()
            });
        }
        if let Some(h) = &cfg.hha {
            h.validate().context("config: [hha]")?;
        }
        if let Some(a) = &cfg.augment {
            a.validate().context("config: [augment]")?;
        }
        Ok(cfg)
    }
}

/// True when `id` was given on the command line rather than defaulted.
pub fn explicit(m: &ArgMatches, id: &str) -> bool {
    matches!(m.value_source(id), Some(ValueSource::CommandLine))
}

/// The flag value if given explicitly, else the config value, else the
/// flag's default.
pub fn pick<T>(m: &ArgMatches, id: &str, flag: T, config: Option<T>) -> T {
    if explicit(m, id) {
        flag
    } else {
        config.unwrap_or(flag)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "threads = 2\ncolour = \"red\"\n").unwrap();
        let err = FileConfig::load(&p).unwrap_err();
        assert!(format!("{err:#}").contains("colour"), "{err:#}");

        std::fs::write(&p, "[hha]\nd_min = 0.5\nbogus = 1\n").unwrap();
        assert!(FileConfig::load(&p).is_err());
    }

    #[test]
    fn referenced_files_must_exist() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "model = \"missing.penm\"\n").unwrap();
        assert!(format!("{:#}", FileConfig::load(&p).unwrap_err()).contains("missing.penm"));

        std::fs::write(dir.path().join("m.penm"), b"x").unwrap();
        std::fs::write(&p, "model = \"m.penm\"\ncamera = \"default\"\n[hha]\nd_max = 5.0\n").unwrap();
        let cfg = FileConfig::load(&p).unwrap();
        assert_eq!(cfg.model.unwrap(), dir.path().join("m.penm"));
        assert_eq!(cfg.hha.unwrap().d_max, 5.0);
        assert_eq!(cfg.hha.unwrap().d_min, 0.3);
    }
}
