//! Experiment configuration files (TOML).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::characteristics::{CommonNoise, FlowMap, Spline};
use crate::coefficients::{Coefficients, Diffusion, InteractionDrift, PotentialTerm};
use crate::error::{Error, Result};
use crate::field::{gaussian_pdf, DensityField};
use crate::grid::{Grid1D, TimeGrid};
use crate::spde::{Coupling, PathOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub grid: GridConfig,
    pub time: TimeConfig,
    #[serde(default)]
    pub coefficients: CoefficientConfig,
    pub initial: InitialConfig,
    /// Second initial condition for stability runs.
    #[serde(default)]
    pub comparison: Option<InitialConfig>,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default)]
    pub run: RunConfig,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub x_min: f64,
    pub x_max: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeConfig {
    pub horizon: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientConfig {
    #[serde(default)]
    pub diffusion: DiffusionConfig,
    #[serde(default)]
    pub drift: DriftConfig,
    #[serde(default)]
    pub potential: PotentialConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DiffusionConfig {
    Constant { value: f64 },
    SinSquared { base: f64, amplitude: f64 },
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig::Constant { value: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DriftConfig {
    #[default]
    None,
    MeanReversion {
        rate: f64,
    },
    MomentQuadratic {
        rate: f64,
        strength: f64,
        width: f64,
    },
    Confining {
        rate: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PotentialConfig {
    #[default]
    None,
    ConstantKilling {
        rate: f64,
    },
    MomentKilling {
        strength: f64,
        width: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialConfig {
    Gaussian {
        mean: f64,
        std: f64,
        #[serde(default = "unit")]
        mass: f64,
    },
    MollifiedDelta {
        x: f64,
    },
    Mixture {
        components: Vec<MixtureComponent>,
    },
}

fn unit() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoisePreset {
    Constant,
    Linear,
    BoundedOdd,
    Sine,
    Tabulated,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseConfig {
    #[default]
    None,
    #[serde(rename = "state_1d")]
    State1d {
        preset: NoisePreset,
        #[serde(default)]
        amplitude: f64,
        /// Node values for `tabulated`, on `[table_min, table_max]`.
        #[serde(default)]
        table: Vec<f64>,
        #[serde(default)]
        table_min: f64,
        #[serde(default)]
        table_max: f64,
    },
    ConstantMatrix {
        values: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default)]
    pub probes: Vec<f64>,
    /// Index pairs into `probes` for second variations.
    #[serde(default)]
    pub pairs: Vec<(usize, usize)>,
    #[serde(default = "default_paths")]
    pub n_paths: usize,
    #[serde(default)]
    pub particles: Vec<usize>,
    #[serde(default)]
    pub strict: bool,
    /// Time indices written to field snapshots; empty means first and last.
    #[serde(default)]
    pub snapshots: Vec<usize>,
    #[serde(default)]
    pub dump_paths: bool,
}

fn default_tolerance() -> f64 {
    1e-8
}

fn default_paths() -> usize {
    1
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            tolerance: default_tolerance(),
            probes: Vec::new(),
            pairs: Vec::new(),
            n_paths: default_paths(),
            particles: Vec::new(),
            strict: false,
            snapshots: Vec::new(),
            dump_paths: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    fn validate(&self) -> Result<()> {
        self.grid()?;
        self.time_grid()?;
        self.coefficients()?;
        self.initial()?;
        if let Some(c) = &self.comparison {
            build_initial(c, self.grid()?)?;
        }
        self.flow()?;
        if !(self.run.tolerance > 0.0) {
            return Err(Error::Config("run.tolerance must be positive".into()));
        }
        for (a, b) in &self.run.pairs {
            if *a >= self.run.probes.len() || *b >= self.run.probes.len() {
                return Err(Error::Config(format!("probe pair ({a}, {b}) out of range")));
            }
        }
        if let Some(k) = self.run.snapshots.iter().find(|k| **k > self.time.steps) {
            return Err(Error::Config(format!(
                "snapshot index {k} beyond {} steps",
                self.time.steps
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<Grid1D> {
        Grid1D::new(self.grid.x_min, self.grid.x_max, self.grid.n).map_err(as_config)
    }

    pub fn time_grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.time.horizon, self.time.steps).map_err(as_config)
    }

    pub fn coefficients(&self) -> Result<Coefficients> {
        let c = &self.coefficients;
        let diffusion = match c.diffusion {
            DiffusionConfig::Constant { value } => Diffusion::constant(value),
            DiffusionConfig::SinSquared { base, amplitude } => {
                Diffusion::sin_squared(base, amplitude)
            }
        }
        .map_err(as_config)?;
        let drift = match c.drift {
            DriftConfig::None => InteractionDrift::none(),
            DriftConfig::MeanReversion { rate } => InteractionDrift::mean_reversion(rate),
            DriftConfig::MomentQuadratic {
                rate,
                strength,
                width,
            } => InteractionDrift::moment_quadratic(rate, strength, width),
            DriftConfig::Confining { rate } => InteractionDrift::confining(rate),
        };
        let potential = match c.potential {
            PotentialConfig::None => PotentialTerm::none(),
            PotentialConfig::ConstantKilling { rate } => {
                PotentialTerm::constant_killing(rate).map_err(as_config)?
            }
            PotentialConfig::MomentKilling { strength, width } => {
                PotentialTerm::moment_killing(strength, width).map_err(as_config)?
            }
        };
        Ok(Coefficients {
            diffusion,
            drift,
            potential,
        })
    }

    pub fn initial(&self) -> Result<DensityField> {
        build_initial(&self.initial, self.grid()?)
    }

    pub fn comparison(&self) -> Result<Option<DensityField>> {
        match &self.comparison {
            Some(c) => Ok(Some(build_initial(c, self.grid()?)?)),
            None => Ok(None),
        }
    }

    /// Scalar noise field, or `None` for constant-matrix noise.
    pub fn flow(&self) -> Result<Option<FlowMap>> {
        let noise = match &self.noise {
            NoiseConfig::None => CommonNoise::Zero,
            NoiseConfig::ConstantMatrix { values } => {
                if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Config(
                        "noise.values must be a nonempty list of finite numbers".into(),
                    ));
                }
                return Ok(None);
            }
            NoiseConfig::State1d {
                preset,
                amplitude,
                table,
                table_min,
                table_max,
            } => match preset {
                NoisePreset::Constant => CommonNoise::Constant(*amplitude),
                NoisePreset::Linear => CommonNoise::Linear(*amplitude),
                NoisePreset::BoundedOdd => CommonNoise::BoundedOdd(*amplitude),
                NoisePreset::Sine => CommonNoise::Sine(*amplitude),
                NoisePreset::Tabulated => {
                    let g = Grid1D::new(*table_min, *table_max, table.len()).map_err(as_config)?;
                    CommonNoise::Tabulated(Spline::new(g, table.clone()).map_err(as_config)?)
                }
            },
        };
        Ok(Some(FlowMap::new(noise)))
    }

    pub fn noise_matrix(&self) -> Option<&[f64]> {
        match &self.noise {
            NoiseConfig::ConstantMatrix { values } => Some(values),
            _ => None,
        }
    }

    pub fn has_noise(&self) -> bool {
        !matches!(self.noise, NoiseConfig::None)
    }

    pub fn path_options(&self) -> PathOptions {
        PathOptions {
            coupling: if self.run.strict {
                Coupling::Strict
            } else {
                Coupling::Lag
            },
            ..PathOptions::default()
        }
    }

    /// `(mean, variance, mass)` of the closed-form solution when the
    /// experiment is a pure heat flow from a Gaussian.
    pub fn heat_closed_form(&self) -> Option<(f64, f64, f64)> {
        let c = &self.coefficients;
        match (&c.diffusion, &c.drift, &c.potential, &self.initial) {
            (
                DiffusionConfig::Constant { value },
                DriftConfig::None,
                PotentialConfig::None,
                InitialConfig::Gaussian { mean, std, mass },
            ) => Some((*mean, std * std + value * self.time.horizon, *mass)),
            _ => None,
        }
    }
}

fn as_config(e: Error) -> Error {
    match e {
        Error::Config(m) => Error::Config(m),
        other => Error::Config(other.to_string()),
    }
}

fn build_initial(c: &InitialConfig, grid: Grid1D) -> Result<DensityField> {
    match c {
        InitialConfig::Gaussian { mean, std, mass } => {
            DensityField::gaussian(grid, *mean, *std, *mass)
        }
        InitialConfig::MollifiedDelta { x } => DensityField::mollified_delta(grid, *x),
        InitialConfig::Mixture { components } => {
            if components.is_empty() {
                return Err(Error::Config("mixture needs at least one component".into()));
            }
            if components.iter().any(|c| !(c.weight >= 0.0 && c.std > 0.0)) {
                return Err(Error::Config(
                    "mixture weights must be ≥ 0 and stds > 0".into(),
                ));
            }
            DensityField::from_fn(grid, 0.0, |x| {
                components
                    .iter()
                    .map(|c| c.weight * gaussian_pdf(x - c.mean, c.std * c.std))
                    .sum()
            })
        }
    }
    .map_err(as_config)
}
