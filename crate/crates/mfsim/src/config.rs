//! Experiment configuration: one TOML file, one section per experiment,
//! shared [model]/[seeds]/[output] sections.
//!
//! Every field is required. Physics parameters are never defaulted: a
//! missing rate is a hard error at parse time, before any output path is
//! touched. Pass/fail thresholds live here, not in code.

use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config has no [{0}] section (required by this experiment)")]
    MissingSection(&'static str),
    #[error("invalid config value: {0}")]
    Invalid(String),
}

/// Rates of the site dynamics. All four are required; site counts are
/// experiment-specific and live in the experiment sections.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub c: f64,
    pub s: f64,
    pub d: f64,
    pub m: f64,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SeedsSection {
    pub master: u64,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: String,
}

/// Emergence-time scaling: median hitting time of the mean mass level
/// `eps` versus ln N, fitted and compared against 1/alpha.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct EmergenceSection {
    pub n_list: Vec<usize>,
    pub reps: usize,
    pub eps: f64,
    pub dt: f64,
    /// Horizon per N is `horizon_factor * ln(N)/alpha`.
    pub horizon_factor: f64,
    /// Fitted slope must be within this relative gap of 1/alpha.
    pub slope_tolerance: f64,
}

/// Mean-mass profile across the emergence window at a single N.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct FixationSection {
    pub n_sites: usize,
    pub reps: usize,
    pub dt: f64,
    /// Grid offsets from the emergence time, in units of 1/alpha.
    pub offsets_alpha: Vec<f64>,
    /// Mean must sit below this at the leftmost grid point.
    pub low_threshold: f64,
    /// Mean must sit above this at the rightmost grid point.
    pub high_threshold: f64,
}

/// Dual-count profile against the limiting one-parameter curve and the
/// stable size distribution.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct DualProfileSection {
    pub n_list: Vec<usize>,
    pub reps: usize,
    pub record_every: f64,
    /// Size-distribution checkpoint, in time units relative to the
    /// emergence time (negative = before).
    pub early_offset: f64,
    /// Count-profile checkpoint, same convention.
    pub late_offset: f64,
    pub tv_threshold: f64,
    /// Per-replica median of count/curve ratios must be within this
    /// relative gap of 1.
    pub curve_tolerance: f64,
}

/// Two-route comparison of the exponential growth prefactor.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct GrowthSection {
    pub reps_droplet: usize,
    pub reps_forward: usize,
    pub eps: f64,
    pub dt: f64,
    /// Droplet readout time for the prefactor estimate.
    pub t_late: f64,
    pub n_sites: usize,
    /// Negative offset (units of 1/alpha) for the macroscopic-side sample.
    pub neg_offset_alpha: f64,
    /// Readout time for the rescaled site-count sample, as a fraction of
    /// the emergence time ln(N)/alpha.
    pub forward_time_factor: f64,
    /// Replicas for the dual-count prefactor mean.
    pub dual_reps: usize,
    /// Dual runs until the count first reaches this size.
    pub dual_target_count: usize,
    pub var_ratio_low: f64,
    pub var_ratio_high: f64,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub model: ModelSection,
    pub seeds: SeedsSection,
    pub output: OutputSection,
    pub emergence: Option<EmergenceSection>,
    pub fixation: Option<FixationSection>,
    pub dual_profile: Option<DualProfileSection>,
    pub growth: Option<GrowthSection>,
}

impl RawConfig {
    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_str(&text)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn from_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: RawConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let m = &self.model;
        for (name, v) in [("c", m.c), ("s", m.s), ("d", m.d), ("m", m.m)] {
            if !v.is_finite() || v < 0.0 {
                return Err(ConfigError::Invalid(format!("model.{name} = {v}")));
            }
        }
        if let Some(e) = &self.emergence {
            if e.n_list.len() < 2 {
                return Err(ConfigError::Invalid(
                    "emergence.n_list needs at least two sizes for a fit".into(),
                ));
            }
            if e.reps < 2 || !(e.eps > 0.0 && e.eps < 1.0) || !(e.dt > 0.0) {
                return Err(ConfigError::Invalid("emergence reps/eps/dt".into()));
            }
        }
        if let Some(f) = &self.fixation {
            if f.n_sites == 0 || f.reps < 2 || !(f.dt > 0.0) || f.offsets_alpha.len() < 2 {
                return Err(ConfigError::Invalid("fixation section".into()));
            }
        }
        if let Some(dp) = &self.dual_profile {
            if dp.n_list.is_empty() || dp.reps < 2 || !(dp.record_every > 0.0) {
                return Err(ConfigError::Invalid("dual_profile section".into()));
            }
        }
        if let Some(g) = &self.growth {
            if g.reps_droplet < 2 || g.reps_forward < 2 || g.dual_reps < 2 {
                return Err(ConfigError::Invalid("growth replica counts".into()));
            }
            if !(g.eps > 0.0 && g.eps < 0.1) || !(g.dt > 0.0) || !(g.t_late > 0.0) {
                return Err(ConfigError::Invalid("growth eps/dt/t_late".into()));
            }
            if !(g.forward_time_factor > 0.0 && g.forward_time_factor < 1.0) {
                return Err(ConfigError::Invalid(
                    "growth.forward_time_factor must lie in (0,1)".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn emergence(&self) -> Result<&EmergenceSection, ConfigError> {
        self.emergence
            .as_ref()
            .ok_or(ConfigError::MissingSection("emergence"))
    }

    pub fn fixation(&self) -> Result<&FixationSection, ConfigError> {
        self.fixation
            .as_ref()
            .ok_or(ConfigError::MissingSection("fixation"))
    }

    pub fn dual_profile(&self) -> Result<&DualProfileSection, ConfigError> {
        self.dual_profile
            .as_ref()
            .ok_or(ConfigError::MissingSection("dual_profile"))
    }

    pub fn growth(&self) -> Result<&GrowthSection, ConfigError> {
        self.growth
            .as_ref()
            .ok_or(ConfigError::MissingSection("growth"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOOD: &str = r#"
[model]
c = 1.0
s = 1.0
d = 1.0
m = 1.0

[seeds]
master = 42

[output]
dir = "out"

[emergence]
n_list = [64, 256]
reps = 10
eps = 0.1
dt = 1e-3
horizon_factor = 2.0
slope_tolerance = 0.25
"#;

    #[test]
    fn parses_and_routes_sections() {
        let cfg = RawConfig::from_str(GOOD).unwrap();
        assert_eq!(cfg.seeds.master, 42);
        assert_eq!(cfg.emergence().unwrap().n_list, vec![64, 256]);
        assert!(matches!(
            cfg.fixation(),
            Err(ConfigError::MissingSection("fixation"))
        ));
    }

    #[test]
    fn missing_rate_is_a_parse_error() {
        let broken = GOOD.replace("d = 1.0\n", "");
        let err = RawConfig::from_str(&broken).unwrap_err();
        assert!(matches!(err, ConfigError::Parse(_)), "{err}");
        assert!(err.to_string().contains('d'), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let extra = GOOD.replace("[seeds]", "typo_key = 1\n[seeds]");
        assert!(RawConfig::from_str(&extra).is_err());
    }

    #[test]
    fn negative_rate_is_rejected() {
        let bad = GOOD.replace("s = 1.0", "s = -0.5");
        let err = RawConfig::from_str(&bad).unwrap_err();
        assert!(matches!(err, ConfigError::Invalid(_)), "{err}");
    }
}
