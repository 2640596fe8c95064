//! Pipeline configuration: one JSON file, overridden by command-line flags.

use std::path::{Path, PathBuf};

use debias_core::blueprint::{DEFAULT_FILL_ALPHA, DEFAULT_VALUE_MIN, DEFAULT_VALUE_STEP};
use debias_core::digest::json_digest;
use debias_core::scoring::DEFAULT_BETA;
use debias_core::{BinningConfig, DynamicsConfig, Error, FillAlpha, Palette, RecalibConfig, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// COCO annotation file.
    pub annotations: Option<PathBuf>,
    /// JSON Lines of `{instance_id, embedding}`.
    pub embeddings: Option<PathBuf>,
    /// Image directory for fallback descriptors.
    pub images: Option<PathBuf>,
    /// Seed layouts (JSON Lines); defaults to the dataset's own images.
    pub seeds: Option<PathBuf>,
    /// Detection-error stream for the update stage.
    pub errors: Option<PathBuf>,
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlueprintOptions {
    pub fill_alpha: f64,
    pub value_step: f64,
    pub value_min: f64,
}

impl Default for BlueprintOptions {
    fn default() -> Self {
        BlueprintOptions {
            fill_alpha: DEFAULT_FILL_ALPHA,
            value_step: DEFAULT_VALUE_STEP,
            value_min: DEFAULT_VALUE_MIN,
        }
    }
}

impl BlueprintOptions {
    pub fn palette(&self, num_classes: usize) -> Result<Palette> {
        Palette::new(num_classes, self.value_step, self.value_min)
    }

    pub fn alpha(&self) -> Result<FillAlpha> {
        FillAlpha::new(self.fill_alpha)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportOptions {
    /// Number of lowest-scoring groups listed in the bias report.
    pub lowest_groups: usize,
    /// Also write histogram images.
    pub plots: bool,
}

impl Default for ReportOptions {
    fn default() -> Self {
        ReportOptions {
            lowest_groups: 10,
            plots: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: Paths,
    pub binning: BinningConfig,
    pub beta: f64,
    pub recalib: RecalibConfig,
    pub dynamics: DynamicsConfig,
    pub blueprint: BlueprintOptions,
    pub report: ReportOptions,
    /// Thread count for recalibration and rendering; `None` uses all cores.
    pub workers: Option<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            paths: Paths {
                out: PathBuf::from("out"),
                ..Default::default()
            },
            binning: BinningConfig::default(),
            beta: DEFAULT_BETA,
            recalib: RecalibConfig::default(),
            dynamics: DynamicsConfig::default(),
            blueprint: BlueprintOptions::default(),
            report: ReportOptions::default(),
            workers: None,
        }
    }
}

impl PipelineConfig {
    /// Reads a config file. Relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let mut cfg: PipelineConfig = serde_json::from_str(&text).map_err(|e| Error::Parse {
            offset: byte_offset(&text, e.line(), e.column()),
            message: format!("{}: {e}", path.display()),
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        let p = &mut cfg.paths;
        for slot in [
            &mut p.annotations,
            &mut p.embeddings,
            &mut p.images,
            &mut p.seeds,
            &mut p.errors,
        ] {
            if let Some(rel) = slot.as_mut() {
                *rel = base.join(&*rel);
            }
        }
        p.out = base.join(&p.out);
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.binning.validate()?;
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(Error::InvalidArgument(format!("beta must be >= 0, got {}", self.beta)));
        }
        self.recalib.validate()?;
        self.dynamics.validate()?;
        self.blueprint.alpha()?;
        self.blueprint.palette(1)?;
        if self.workers == Some(0) {
            return Err(Error::InvalidArgument("workers must be at least 1".into()));
        }
        Ok(())
    }

    /// Digest of everything that can change results. The output directory
    /// and worker count are left out: results do not depend on them.
    pub fn digest(&self) -> String {
        json_digest(&self.recorded())
    }

    /// Copy written into output metadata, independent of where and how
    /// widely the run was executed.
    pub fn recorded(&self) -> Self {
        let mut c = self.clone();
        c.paths.out = PathBuf::from(".");
        c.workers = None;
        c
    }

    pub fn require_annotations(&self) -> Result<&Path> {
        self.paths
            .annotations
            .as_deref()
            .ok_or_else(|| Error::InvalidArgument("no annotation file given (--annotations or config paths.annotations)".into()))
    }
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let start: usize = text.split_inclusive('\n').take(line.saturating_sub(1)).map(str::len).sum();
    start + column.saturating_sub(1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_paths_follow_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"paths": {"annotations": "a.json", "out": "o"}, "beta": 0.25}"#).unwrap();
        let cfg = PipelineConfig::load(&path).unwrap();
        assert_eq!(cfg.paths.annotations, Some(dir.path().join("a.json")));
        assert_eq!(cfg.paths.out, dir.path().join("o"));
        assert_eq!(cfg.beta, 0.25);
        assert_eq!(cfg.recalib, RecalibConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"betta": 1}"#).unwrap();
        assert!(matches!(PipelineConfig::load(&path), Err(Error::Parse { .. })));
    }

    #[test]
    fn digest_ignores_output_location_and_workers() {
        let a = PipelineConfig::default();
        let mut b = a.clone();
        b.paths.out = "elsewhere".into();
        b.workers = Some(3);
        assert_eq!(a.digest(), b.digest());
        b.recalib.rng_seed = 1;
        assert_ne!(a.digest(), b.digest());
    }
}
