//! Synthetic scans with exact ground truth, drawn from the generative model:
//! sample boundaries, rasterize labels, draw pixel intensities per class.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::appearance::ClassLabel;
use crate::error::{Error, Result};
use crate::scan::{Scan, ScanFile};
use crate::shape::{BoundaryField, ShapeGeometry, ShapePrior};

pub const SYNTH_CONFIG: &str = include_str!("../configs/synth.toml");
pub const SYNTH_SMALL_CONFIG: &str = include_str!("../configs/synth_small.toml");
pub const SYNTH_TINY_CONFIG: &str = include_str!("../configs/synth_tiny.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthGeometry {
    pub rows: usize,
    pub columns: usize,
    pub boundaries: usize,
    pub bscans: usize,
    pub pixel_pitch_um: f64,
}

/// Mean boundary `k` at local column position `x ∈ [0, 1)`:
/// `base[k] + amplitude[k]·sin(2π·frequency·x + phase[k])`, perturbed by
/// three global modes (shift, tilt, spacing) and independent jitter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParametricShape {
    pub base: Vec<f64>,
    pub amplitude: Vec<f64>,
    pub frequency: f64,
    pub phase: Vec<f64>,
    pub shift_sd: f64,
    /// Standard deviation of the boundary offset at the scan edges.
    pub tilt_sd: f64,
    /// Relative scaling of the distances to the central depth.
    pub spacing_sd: f64,
    pub jitter_sd: f64,
    /// Boundaries must stay within `margin ..= rows − 1 − margin`.
    pub margin: f64,
    pub max_attempts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthAppearance {
    pub layer_mean: Vec<f64>,
    pub layer_sd: Vec<f64>,
    pub transition_mean: Vec<f64>,
    pub transition_sd: Vec<f64>,
    /// Horizontal stripes inside layers: `amplitude·sin(2π·row/period)`.
    pub texture_amplitude: f64,
    pub texture_period: f64,
    pub noise_sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub geometry: SynthGeometry,
    pub shape: ParametricShape,
    pub appearance: SynthAppearance,
}

impl SynthConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: SynthConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("synth config serializes")
    }

    /// Hex SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn shape_geometry(&self) -> Result<ShapeGeometry> {
        ShapeGeometry::new(self.geometry.boundaries, self.geometry.columns, self.geometry.bscans)
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.geometry;
        let nb = g.boundaries;
        self.shape_geometry()?;
        let bad = |m: String| Err(Error::Config(m));
        if g.rows < nb + 1 || !(g.pixel_pitch_um > 0.0) {
            return bad("synthetic geometry needs rows > boundaries and a positive pitch".into());
        }
        let s = &self.shape;
        if s.base.len() != nb || s.amplitude.len() != nb || s.phase.len() != nb {
            return bad(format!("shape.base, amplitude and phase need {nb} entries"));
        }
        let a = &self.appearance;
        if a.layer_mean.len() != nb + 1 || a.layer_sd.len() != nb + 1 {
            return bad(format!("appearance.layer_mean and layer_sd need {} entries", nb + 1));
        }
        if a.transition_mean.len() != nb || a.transition_sd.len() != nb {
            return bad(format!("appearance.transition_mean and transition_sd need {nb} entries"));
        }
        let sds = [s.shift_sd, s.tilt_sd, s.spacing_sd, s.jitter_sd, a.noise_sd, a.texture_amplitude.abs()];
        if sds.iter().chain(&a.layer_sd).chain(&a.transition_sd).any(|v| !(*v >= 0.0)) {
            return bad("standard deviations must be non-negative".into());
        }
        if !(a.texture_period > 0.0) || s.max_attempts == 0 || !(s.margin >= 0.0) {
            return bad("texture_period, max_attempts and margin must be positive".into());
        }
        Ok(())
    }

    fn class_params(&self, label: ClassLabel) -> (f64, f64) {
        let a = &self.appearance;
        match label {
            ClassLabel::Layer(k) => (a.layer_mean[k], a.layer_sd[k]),
            ClassLabel::Transition(k) => (a.transition_mean[k], a.transition_sd[k]),
        }
    }
}

/// Where boundary fields come from.
#[derive(Debug, Clone, Copy)]
pub enum ShapeSource<'a> {
    Parametric,
    Prior(&'a ShapePrior),
}

fn column_position(j: usize, cpb: usize) -> f64 {
    (j % cpb) as f64 / cpb as f64
}

/// Mean boundary field of the parametric model (all modes at zero).
pub fn parametric_mean(config: &SynthConfig) -> Result<BoundaryField> {
    let g = &config.geometry;
    let s = &config.shape;
    let cpb = g.columns / g.bscans;
    let values = DMatrix::from_fn(g.boundaries, g.columns, |k, j| {
        let x = column_position(j, cpb);
        s.base[k] + s.amplitude[k] * (2.0 * std::f64::consts::PI * s.frequency * x + s.phase[k]).sin()
    });
    BoundaryField::new(values, g.bscans)
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn draw_parametric(config: &SynthConfig, mean: &BoundaryField, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let g = &config.geometry;
    let s = &config.shape;
    let cpb = g.columns / g.bscans;
    let center = s.base.iter().sum::<f64>() / s.base.len() as f64;
    let shift = s.shift_sd * normal(rng);
    let tilt = s.tilt_sd * normal(rng);
    let spacing = s.spacing_sd * normal(rng);
    let mut values = mean.values().clone();
    for j in 0..g.columns {
        let x = column_position(j, cpb);
        for k in 0..g.boundaries {
            values[(k, j)] += shift + tilt * (2.0 * x - 1.0) + spacing * (s.base[k] - center);
        }
    }
    for v in values.iter_mut() {
        *v += s.jitter_sd * normal(rng);
    }
    values
}

fn draw_prior(prior: &ShapePrior, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let g = prior.gaussian();
    let geom = prior.geometry();
    let s = DVector::from_fn(g.rank(), |_, _| normal(rng));
    let noise = DVector::from_fn(g.dim(), |_, _| normal(rng));
    let b = g.mean() + g.factor() * s + noise * g.noise_variance().sqrt();
    DMatrix::from_column_slice(geom.boundaries, geom.columns, b.as_slice())
}

/// Integer rows `round(b)`; `None` unless strictly increasing inside the
/// image margins.
fn accept(values: &DMatrix<f64>, rows: usize, margin: f64) -> bool {
    let hi = rows as f64 - 1.0 - margin;
    values.column_iter().all(|col| {
        col.iter().all(|&v| v >= margin && v <= hi)
            && col.as_slice().windows(2).all(|w| w[0].round() < w[1].round())
    })
}

/// Draws a boundary field, resampling until it is strictly ordered after
/// rounding and inside the margins.
pub fn sample_boundaries(config: &SynthConfig, source: ShapeSource, rng: &mut ChaCha8Rng) -> Result<BoundaryField> {
    let g = &config.geometry;
    let mean = parametric_mean(config)?;
    if let ShapeSource::Prior(p) = source {
        if p.geometry() != config.shape_geometry()? {
            return Err(Error::InvalidParameter("shape prior geometry does not match the synthetic geometry".into()));
        }
    }
    for _ in 0..config.shape.max_attempts {
        let values = match source {
            ShapeSource::Parametric => draw_parametric(config, &mean, rng),
            ShapeSource::Prior(p) => draw_prior(p, rng),
        };
        if accept(&values, g.rows, config.shape.margin) {
            return BoundaryField::new(values, g.bscans);
        }
    }
    Err(Error::RejectionCap {
        attempts: config.shape.max_attempts,
        reason: format!(
            "no ordered boundary field within rows {}..={} (margin {})",
            config.shape.margin,
            g.rows as f64 - 1.0 - config.shape.margin,
            config.shape.margin
        ),
    })
}

/// Pixel labels from the rounded boundaries: the boundary row itself is the
/// transition, rows between two boundaries belong to the layer between them.
pub fn rasterize(truth: &BoundaryField, rows: usize) -> Vec<Vec<ClassLabel>> {
    let m = truth.geometry().columns;
    let nb = truth.geometry().boundaries;
    (0..m)
        .map(|j| {
            let cuts: Vec<usize> = (0..nb).map(|k| truth.get(k, j).round() as usize).collect();
            (0..rows).map(|i| ClassLabel::of_row(i, &cuts)).collect()
        })
        .collect()
}

/// Draws pixel intensities for a labeled field.
pub fn render(config: &SynthConfig, truth: &BoundaryField, rng: &mut ChaCha8Rng) -> Result<Scan> {
    let g = &config.geometry;
    let a = &config.appearance;
    let labels = rasterize(truth, g.rows);
    let mut pixels = vec![0f32; g.rows * g.columns];
    for i in 0..g.rows {
        let texture = a.texture_amplitude * (2.0 * std::f64::consts::PI * i as f64 / a.texture_period).sin();
        for j in 0..g.columns {
            let label = labels[j][i];
            let (mean, sd) = config.class_params(label);
            let mut v = mean;
            if sd > 0.0 {
                v += sd * normal(rng);
            }
            if matches!(label, ClassLabel::Layer(_)) {
                v += texture;
            }
            if a.noise_sd > 0.0 {
                v += a.noise_sd * normal(rng);
            }
            pixels[i * g.columns + j] = v as f32;
        }
    }
    Scan::new(g.rows, g.columns, g.boundaries, g.bscans, g.pixel_pitch_um, pixels)
}

fn scan_rng(config: &SynthConfig, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index as u64);
    rng
}

/// Scan number `index` of the stream defined by the config seed.
pub fn generate_scan(config: &SynthConfig, source: ShapeSource, index: usize) -> Result<ScanFile> {
    let mut rng = scan_rng(config, index);
    let truth = sample_boundaries(config, source, &mut rng)?;
    let scan = render(config, &truth, &mut rng)?;
    Ok(ScanFile { scan, truth: Some(truth) })
}

pub fn generate(config: &SynthConfig) -> Result<(Scan, BoundaryField)> {
    let f = generate_scan(config, ShapeSource::Parametric, 0)?;
    Ok((f.scan, f.truth.expect("generated scans carry truth")))
}

/// `n` scans, indices `first .. first + n`, generated in parallel.
pub fn generate_scans(config: &SynthConfig, source: ShapeSource, first: usize, n: usize) -> Result<Vec<ScanFile>> {
    (first..first + n)
        .into_par_iter()
        .map(|i| generate_scan(config, source, i))
        .collect()
}

/// Boundary fields only (no pixels), e.g. for prior fitting.
pub fn generate_fields(config: &SynthConfig, source: ShapeSource, n: usize) -> Result<Vec<BoundaryField>> {
    (0..n)
        .into_par_iter()
        .map(|i| sample_boundaries(config, source, &mut scan_rng(config, i)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub config_sha256: String,
    pub source: String,
    pub n_scans: usize,
    pub files: Vec<String>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    pub fn scan_paths(&self, dir: &Path) -> Vec<PathBuf> {
        self.files.iter().map(|f| dir.join(f)).collect()
    }
}

pub fn scan_file_name(index: usize) -> String {
    format!("scan_{index:04}.lsc")
}

/// Writes `n` scans plus `manifest.toml` and a copy of the config into `dir`.
pub fn generate_dataset(config: &SynthConfig, source: ShapeSource, n: usize, dir: &Path) -> Result<Manifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let scans = generate_scans(config, source, 0, n)?;
    let mut files = Vec::with_capacity(n);
    for (i, s) in scans.iter().enumerate() {
        let name = scan_file_name(i);
        s.save(&dir.join(&name))?;
        files.push(name);
    }
    let manifest = Manifest {
        seed: config.seed,
        config_sha256: config.hash(),
        source: match source {
            ShapeSource::Parametric => "parametric".into(),
            ShapeSource::Prior(_) => "prior".into(),
        },
        n_scans: n,
        files,
    };
    let text = toml::to_string(&manifest).expect("manifest serializes");
    let path = dir.join("manifest.toml");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    let cfg_path = dir.join("synth.toml");
    std::fs::write(&cfg_path, config.to_toml()).map_err(|e| Error::io(&cfg_path, e))?;
    Ok(manifest)
}

/// Loads every scan listed in a dataset manifest.
pub fn load_dataset(dir: &Path) -> Result<Vec<ScanFile>> {
    let manifest = Manifest::load(&dir.join("manifest.toml"))?;
    manifest.scan_paths(dir).iter().map(|p| ScanFile::load(p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig::from_toml_str(SYNTH_SMALL_CONFIG).unwrap()
    }

    #[test]
    fn noiseless_rows_equal_class_means() {
        let mut c = small();
        c.appearance.noise_sd = 0.0;
        c.appearance.layer_sd = vec![0.0; 4];
        c.appearance.transition_sd = vec![0.0; 3];
        let (scan, truth) = generate(&c).unwrap();
        for j in 0..scan.columns() {
            let cuts: Vec<usize> = (0..3).map(|k| truth.get(k, j).round() as usize).collect();
            for i in 0..scan.rows() {
                let (mean, _) = c.class_params(ClassLabel::of_row(i, &cuts));
                assert_eq!(scan.pixel(i, j), mean as f32 as f64);
            }
        }
    }

    #[test]
    fn label_counts_match_boundary_gaps() {
        let (scan, truth) = generate(&small()).unwrap();
        let labels = rasterize(&truth, scan.rows());
        for (j, col) in labels.iter().enumerate() {
            for k in 1..3 {
                let count = col.iter().filter(|&&l| l == ClassLabel::Layer(k)).count();
                let gap = truth.get(k, j).round() as usize - truth.get(k - 1, j).round() as usize - 1;
                assert_eq!(count, gap);
            }
            assert_eq!(col.iter().filter(|&&l| l == ClassLabel::Layer(0)).count(), truth.get(0, j).round() as usize);
        }
    }

    #[test]
    fn seeded_generation_is_reproducible() {
        let c = small();
        assert_eq!(generate_scan(&c, ShapeSource::Parametric, 3).unwrap(), generate_scan(&c, ShapeSource::Parametric, 3).unwrap());
        assert_ne!(generate_scan(&c, ShapeSource::Parametric, 3).unwrap(), generate_scan(&c, ShapeSource::Parametric, 4).unwrap());
        assert_eq!(c.hash(), small().hash());
        assert_eq!(c.hash().len(), 64);
    }

    #[test]
    fn impossible_geometry_hits_the_rejection_cap() {
        let mut c = small();
        c.shape.margin = 29.0;
        c.shape.max_attempts = 5;
        assert!(matches!(generate(&c), Err(Error::RejectionCap { attempts: 5, .. })));
    }

    #[test]
    fn dataset_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let c = small();
        let m = generate_dataset(&c, ShapeSource::Parametric, 3, dir.path()).unwrap();
        assert_eq!(m.files.len(), 3);
        assert_eq!(Manifest::load(&dir.path().join("manifest.toml")).unwrap(), m);
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded, generate_scans(&c, ShapeSource::Parametric, 0, 3).unwrap());
        assert_eq!(SynthConfig::load(&dir.path().join("synth.toml")).unwrap(), c);
    }
}
