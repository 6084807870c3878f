//! Run configuration. Defaults live in `configs/default.toml`, which is
//! compiled in; user files only need the keys they change.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::appearance::{AppearanceMode, AppearanceOptions, PatchSize};
use crate::error::{Error, Result};
use crate::inference::InferenceConfig;

pub const DEFAULT_CONFIG: &str = include_str!("../configs/default.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeSection {
    pub q_ppca: usize,
    pub variance_inflation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppearanceSection {
    pub alpha_glasso: f64,
    pub q_pca: usize,
    pub patch_rows: usize,
    pub patch_cols: usize,
    pub beta_layer: u8,
    pub beta_transition: u8,
    pub mode: AppearanceMode,
    pub patches_per_class: usize,
    pub projector_samples: usize,
    pub glasso_tol: f64,
    pub glasso_max_iter: usize,
    pub shared_across_bscans: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub folds: usize,
    pub regions: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape_model: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub appearance_model: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub shape: ShapeSection,
    pub appearance: AppearanceSection,
    pub inference: InferenceConfig,
    pub eval: EvalSection,
    #[serde(default)]
    pub paths: PathsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::from_toml_str("").expect("embedded default config is valid")
    }
}

fn merge(base: &mut toml::Value, overlay: toml::Value) {
    match (base, overlay) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl RunConfig {
    /// Parses `text` as an overlay on the defaults.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut base: toml::Value = DEFAULT_CONFIG.parse().map_err(|e| Error::Config(format!("default config: {e}")))?;
        let overlay: toml::Value = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        merge(&mut base, overlay);
        let cfg: RunConfig = base.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let a = &self.appearance;
        if self.seed > i64::MAX as u64 {
            return bad(format!("seed must not exceed {}", i64::MAX));
        }
        if self.shape.q_ppca == 0 {
            return bad("shape.q_ppca must be at least 1".into());
        }
        if !(self.shape.variance_inflation > 0.0) {
            return bad("shape.variance_inflation must be positive".into());
        }
        if !(a.alpha_glasso >= 0.0) {
            return bad("appearance.alpha_glasso must be non-negative".into());
        }
        if a.beta_layer > 1 || a.beta_transition > 1 {
            return bad("appearance.beta_layer and beta_transition must be 0 or 1".into());
        }
        if a.q_pca == 0 || a.q_pca > a.patch_rows * a.patch_cols {
            return bad(format!("appearance.q_pca must lie in 1..={}", a.patch_rows * a.patch_cols));
        }
        if a.patch_rows % 2 == 0 || a.patch_cols % 2 == 0 {
            return bad("appearance patch size must be odd".into());
        }
        if a.patches_per_class < 2 {
            return bad("appearance.patches_per_class must be at least 2".into());
        }
        if self.inference.max_iters == 0 {
            return bad("inference.max_iters must be at least 1".into());
        }
        if !(self.inference.cg_tol > 0.0) || !(self.inference.rel_tol >= 0.0) {
            return bad("inference tolerances must be positive".into());
        }
        if self.eval.folds < 2 || self.eval.regions == 0 {
            return bad("eval.folds must be at least 2 and eval.regions at least 1".into());
        }
        Ok(())
    }

    pub fn appearance_options(&self) -> Result<AppearanceOptions> {
        let a = &self.appearance;
        Ok(AppearanceOptions {
            alpha_glasso: a.alpha_glasso,
            q_pca: a.q_pca,
            patch_size: PatchSize::new(a.patch_rows, a.patch_cols)?,
            patches_per_class: a.patches_per_class,
            projector_samples: a.projector_samples,
            glasso_tol: a.glasso_tol,
            glasso_max_iter: a.glasso_max_iter,
            beta_layer: a.beta_layer == 1,
            beta_transition: a.beta_transition == 1,
            mode: a.mode,
            shared_across_bscans: a.shared_across_bscans,
            seed: self.seed,
        })
    }
}
