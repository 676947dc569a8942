use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Deserialize;

/// Run configuration read from TOML. Relative paths are resolved against the
/// directory holding the config file.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Environment model JSON.
    pub model: PathBuf,
    /// Regeneration direction as an integer lattice vector.
    pub direction: Vec<i64>,
    /// Number of regeneration increments to harvest.
    pub samples: usize,
    pub lookahead: Option<usize>,
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    pub workers: Option<usize>,
    #[serde(default)]
    pub rate: RateSection,
    #[serde(default)]
    pub region: RegionSection,
    #[serde(default)]
    pub verify: VerifySection,
    /// Per-claim tolerance overrides; the key `all` applies to every claim.
    #[serde(default)]
    pub tolerances: BTreeMap<String, f64>,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateSection {
    #[serde(default)]
    pub velocities: Vec<Vec<f64>>,
    pub grid: Option<VelocityGrid>,
}

/// Square grid of `points` per axis around `center`.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VelocityGrid {
    pub center: Vec<f64>,
    pub half_width: f64,
    pub points: usize,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionSection {
    #[serde(default = "default_resolution")]
    pub resolution: f64,
}

impl Default for RegionSection {
    fn default() -> Self {
        Self { resolution: default_resolution() }
    }
}

fn default_resolution() -> f64 {
    0.01
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySection {
    #[serde(default = "default_tilts")]
    pub tilts: Vec<Vec<f64>>,
    #[serde(default = "default_thetas")]
    pub thetas: Vec<f64>,
    #[serde(default = "default_pairs")]
    pub convexity_pairs: usize,
    #[serde(default = "default_marginal_points")]
    pub marginal_points: usize,
    pub sandwich: Option<SandwichSection>,
}

impl Default for VerifySection {
    fn default() -> Self {
        Self {
            tilts: default_tilts(),
            thetas: default_thetas(),
            convexity_pairs: default_pairs(),
            marginal_points: default_marginal_points(),
            sandwich: None,
        }
    }
}

fn default_tilts() -> Vec<Vec<f64>> {
    vec![vec![0.02, 0.0], vec![-0.02, 0.0], vec![0.0, 0.02], vec![0.0, -0.02]]
}

fn default_thetas() -> Vec<f64> {
    vec![0.25, 0.5, 0.75, 1.0]
}

fn default_pairs() -> usize {
    20
}

fn default_marginal_points() -> usize {
    4
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SandwichSection {
    pub velocities: Vec<Vec<f64>>,
    pub n_schedule: Vec<usize>,
    #[serde(default)]
    pub delta: f64,
    #[serde(default = "default_trials")]
    pub trials: u64,
}

fn default_trials() -> u64 {
    100_000
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.model = base.join(&cfg.model);
        cfg.out = base.join(&cfg.out);
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        if !self.model.is_file() {
            bail!("model file {} does not exist", self.model.display());
        }
        if self.samples == 0 {
            bail!("samples must be positive");
        }
        if !(self.region.resolution > 0.0) {
            bail!("region resolution must be positive");
        }
        if let Some(g) = &self.rate.grid {
            if g.points == 0 || !(g.half_width >= 0.0) {
                bail!("rate grid needs points > 0 and half_width >= 0");
            }
        }
        if let Some(s) = &self.verify.sandwich {
            if s.velocities.is_empty() || s.n_schedule.is_empty() {
                bail!("sandwich velocities and n_schedule must be nonempty");
            }
        }
        for (name, tol) in &self.tolerances {
            if !tol.is_finite() {
                bail!("tolerance {name} is not finite");
            }
        }
        Ok(())
    }

    /// Tolerance for `claim`: an explicit override, then `all`, then `default`.
    pub fn tolerance(&self, claim: &str, default: f64) -> f64 {
        self.tolerances.get(claim).or_else(|| self.tolerances.get("all")).copied().unwrap_or(default)
    }

    /// Velocities requested for `rate`: the explicit list followed by the grid.
    pub fn rate_velocities(&self) -> Vec<Vec<f64>> {
        let mut out = self.rate.velocities.clone();
        if let Some(g) = &self.rate.grid {
            let offsets: Vec<f64> = if g.points == 1 {
                vec![0.0]
            } else {
                (0..g.points).map(|i| -g.half_width + 2.0 * g.half_width * i as f64 / (g.points - 1) as f64).collect()
            };
            let mut acc: Vec<Vec<f64>> = vec![Vec::new()];
            for c in &g.center {
                acc = acc.into_iter().flat_map(|p| offsets.iter().map(move |o| [p.clone(), vec![c + o]].concat())).collect();
            }
            out.extend(acc);
        }
        out
    }
}
