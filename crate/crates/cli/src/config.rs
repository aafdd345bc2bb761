use std::path::{Path, PathBuf};

use lmadhere::decoding::DecodeMode;
use lmadhere::lmm::{EmOptions, SelectionOptions};
use lmadhere::pipeline::{covariate_names, TimeOrigin};
use lmadhere::survival::SurvivalOptions;
use serde::Deserialize;

/// Invalid configuration; reported with exit code 1.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "invalid configuration: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn bad<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError(msg.into()))
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    #[serde(default)]
    pub paths: Paths,
    pub model: ModelGrid,
    #[serde(default)]
    pub em: EmSection,
    #[serde(default)]
    pub profile: ProfileSection,
    #[serde(default)]
    pub survival: SurvivalSection,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// Simulator configuration used by `simulate`.
    pub simulator: Option<PathBuf>,
    /// Defaults to `<output_dir>/patients.csv`.
    pub patients: Option<PathBuf>,
    /// Defaults to `<output_dir>/purchases.csv`.
    pub purchases: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelGrid {
    pub k_range: Vec<usize>,
    #[serde(default)]
    pub covariates: Vec<String>,
    #[serde(default = "yes")]
    pub logit_baseline: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmSection {
    pub tol: f64,
    pub max_iter: usize,
    pub random_starts: usize,
}

impl Default for EmSection {
    fn default() -> Self {
        let d = EmOptions::default();
        EmSection {
            tol: d.tol,
            max_iter: d.max_iter,
            random_starts: d.n_random_starts,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfileSection {
    pub min_count: usize,
    pub decode_mode: DecodeMode,
}

impl Default for ProfileSection {
    fn default() -> Self {
        ProfileSection {
            min_count: 1500,
            decode_mode: DecodeMode::Global,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurvivalSection {
    pub tau: f64,
    pub tie_method: String,
    pub time_origin: TimeOrigin,
    pub adjust: bool,
}

impl Default for SurvivalSection {
    fn default() -> Self {
        SurvivalSection {
            tau: 7.0,
            tie_method: "efron".into(),
            time_origin: TimeOrigin::Landmark,
            adjust: true,
        }
    }
}

/// Fully resolved settings: every path absolute or relative to the working
/// directory.
#[derive(Debug, Clone)]
pub struct Settings {
    pub simulator: Option<PathBuf>,
    pub patients: PathBuf,
    pub purchases: PathBuf,
    pub output_dir: PathBuf,
    pub selection: SelectionOptions,
    pub profile: ProfileSection,
    pub survival: SurvivalOptions,
    pub time_origin: TimeOrigin,
}

impl Settings {
    /// Reads and validates a configuration file. Relative paths inside it
    /// are taken relative to the file's directory; `output` and `seed`
    /// override the file.
    pub fn load(config: &Path, seed: Option<u64>, output: Option<&Path>) -> Result<Settings, ConfigError> {
        let text = std::fs::read_to_string(config)
            .map_err(|e| ConfigError(format!("cannot read {}: {e}", config.display())))?;
        let cfg: PipelineConfig =
            toml::from_str(&text).map_err(|e| ConfigError(format!("{}: {e}", config.display())))?;
        let base = config.parent().unwrap_or(Path::new("."));
        let rel = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        let output_dir = match (output, &cfg.paths.output_dir) {
            (Some(o), _) => o.to_path_buf(),
            (None, Some(o)) => rel(o),
            (None, None) => return bad("paths.output_dir is required (or pass --output)"),
        };
        let settings = Settings {
            simulator: cfg.paths.simulator.as_deref().map(rel),
            patients: cfg
                .paths
                .patients
                .as_deref()
                .map(rel)
                .unwrap_or_else(|| output_dir.join("patients.csv")),
            purchases: cfg
                .paths
                .purchases
                .as_deref()
                .map(rel)
                .unwrap_or_else(|| output_dir.join("purchases.csv")),
            output_dir,
            selection: SelectionOptions {
                k_range: cfg.model.k_range.clone(),
                covariates: cfg.model.covariates.clone(),
                logit_baseline: cfg.model.logit_baseline,
                em: EmOptions {
                    max_iter: cfg.em.max_iter,
                    tol: cfg.em.tol,
                    n_random_starts: cfg.em.random_starts,
                    seed: seed.unwrap_or(cfg.seed),
                },
            },
            profile: cfg.profile.clone(),
            survival: SurvivalOptions {
                tau: cfg.survival.tau,
                adjust: cfg.survival.adjust,
            },
            time_origin: cfg.survival.time_origin,
        };
        validate(&cfg)?;
        Ok(settings)
    }

    pub fn out(&self, name: &str) -> PathBuf {
        self.output_dir.join(name)
    }
}

fn validate(cfg: &PipelineConfig) -> Result<(), ConfigError> {
    let m = &cfg.model;
    if m.k_range.is_empty() {
        return bad("model.k_range must not be empty");
    }
    if m.k_range.iter().any(|&k| k == 0 || k > 12) {
        return bad("model.k_range entries must lie in 1..=12");
    }
    let mut ks = m.k_range.clone();
    ks.sort_unstable();
    ks.dedup();
    if ks.len() != m.k_range.len() {
        return bad("model.k_range has duplicate entries");
    }
    let names = covariate_names();
    if let Some(c) = m.covariates.iter().find(|c| !names.contains(c)) {
        return bad(format!("unknown covariate `{c}` (available: {})", names.join(", ")));
    }
    if !(cfg.em.tol.is_finite() && cfg.em.tol > 0.0) {
        return bad("em.tol must be positive");
    }
    if cfg.em.max_iter == 0 {
        return bad("em.max_iter must be at least 1");
    }
    if !(cfg.survival.tau.is_finite() && cfg.survival.tau > 0.0) {
        return bad("survival.tau must be positive");
    }
    if cfg.survival.tie_method != "efron" {
        return bad(format!(
            "survival.tie_method `{}` is not supported (only `efron`)",
            cfg.survival.tie_method
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn load(body: &str) -> Result<Settings, ConfigError> {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, body).unwrap();
        Settings::load(&p, None, None)
    }

    #[test]
    fn seed_is_mandatory() {
        let err = load("[paths]\noutput_dir = \"o\"\n[model]\nk_range = [1]\n").unwrap_err();
        assert!(err.0.contains("seed"), "{err}");
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "seed = 3\n[paths]\noutput_dir = \"out\"\n[model]\nk_range = [2]\n").unwrap();
        let s = Settings::load(&p, Some(9), None).unwrap();
        assert_eq!(s.patients, dir.path().join("out").join("patients.csv"));
        assert_eq!(s.selection.em.seed, 9);
    }

    #[test]
    fn bad_values_are_rejected() {
        let base = "seed = 1\n[paths]\noutput_dir = \"o\"\n";
        assert!(load(&format!("{base}[model]\nk_range = []\n")).is_err());
        assert!(load(&format!("{base}[model]\nk_range = [2]\ncovariates = [\"bmi\"]\n")).is_err());
        assert!(load(&format!(
            "{base}[model]\nk_range = [2]\n[survival]\ntau = 7.0\ntie_method = \"breslow\"\ntime_origin = \"landmark\"\nadjust = true\n"
        ))
        .is_err());
        assert!(load(&format!("{base}[model]\nk_range = [2]\nbogus = 1\n")).is_err());
        assert!(load(&format!("{base}[model]\nk_range = [2]\n")).is_ok());
    }
}
