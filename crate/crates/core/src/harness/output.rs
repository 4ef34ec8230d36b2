//! Files written by a run: moment table, curves and the run manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::table::{curves_to_csv, CurveRow, MomentTable};
use crate::error::{Error, Result};

/// Everything needed to re-run: the effective configuration (seed included)
/// and the crate version. Thread count and timestamps are left out so that
/// the manifest is a pure function of the run's inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub code_version: String,
    pub config: ExperimentConfig,
}

impl Manifest {
    pub fn new(config: &ExperimentConfig) -> Self {
        Manifest { code_version: env!("CARGO_PKG_VERSION").to_string(), config: config.clone() }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let m: Manifest = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        m.config.validate()?;
        Ok(m)
    }
}

pub(crate) fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

pub(crate) fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| Error::Io { path: dir.to_path_buf(), source })
}

/// Write `moments.csv`, `curves.csv` and `manifest.toml` into `dir`.
pub fn emit_outputs(table: &MomentTable, curves: &[CurveRow], manifest: &Manifest, dir: &Path) -> Result<Vec<PathBuf>> {
    ensure_dir(dir)?;
    let files = [
        (dir.join("moments.csv"), table.to_csv()),
        (dir.join("curves.csv"), curves_to_csv(curves)),
        (dir.join("manifest.toml"), manifest.to_toml()?),
    ];
    for (path, text) in &files {
        write_file(path, text)?;
    }
    Ok(files.into_iter().map(|(p, _)| p).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::preset;
    use crate::harness::table::{MomentRow, TimeKey};

    #[test]
    fn manifest_round_trip_is_byte_identical() {
        for name in ["model1", "model2_linear"] {
            let cfg = ExperimentConfig::from_toml(preset(name).unwrap()).unwrap();
            let text = Manifest::new(&cfg).to_toml().unwrap();
            let back = Manifest::from_toml(&text).unwrap();
            assert_eq!(back.config, cfg);
            assert_eq!(back.to_toml().unwrap(), text);
        }
    }

    #[test]
    fn writes_header_only_csv_for_empty_table() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::from_toml(preset("model2_linear").unwrap()).unwrap();
        let paths = emit_outputs(&MomentTable::default(), &[], &Manifest::new(&cfg), dir.path()).unwrap();
        assert_eq!(paths.len(), 3);
        let csv = fs::read_to_string(dir.path().join("moments.csv")).unwrap();
        assert_eq!(csv, "epsilon,statistic,time,estimate,stderr,replicas,aborted\n");
    }

    #[test]
    fn io_errors_carry_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, "x").unwrap();
        let mut t = MomentTable::default();
        t.push(MomentRow {
            epsilon: 0.1,
            statistic: "u_gap".into(),
            time: TimeKey::Sup,
            estimate: 1.0,
            stderr: 0.0,
            replicas: 2,
            aborted: 0,
        });
        let cfg = ExperimentConfig::from_toml(preset("model1").unwrap()).unwrap();
        let err = emit_outputs(&t, &[], &Manifest::new(&cfg), &blocker.join("sub")).unwrap_err();
        assert!(err.to_string().contains("file"), "{err}");
    }
}
