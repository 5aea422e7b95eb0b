//! Scenario config files.
//!
//! One JSON document with sections `population`, `supply`, `schedule` and
//! `simulation`:
//!
//! ```json
//! {
//!   "population": { "generate": { "preset": "reference_multi", "q": 1.5 } },
//!   "supply": { "beta1": 0.008, "beta2": 20 },
//!   "schedule": [ { "beta2": 20, "duration": 20 }, { "beta2": 40, "duration": 20 } ],
//!   "simulation": { "seed": 7 }
//! }
//! ```
//!
//! `population` is either `{"assets": [DerParams, ...]}` or
//! `{"generate": GenerationInput}`.

use std::path::Path;

use dermarket::clearing::SupplyModel;
use dermarket::der::{DerParams, MarketState};
use dermarket::simulator::{InitialState, Population, ScenarioConfig, Segment};
use serde::{Deserialize, Serialize};

use crate::generate::{generate_population, GenerationInput};
use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum PopulationSection {
    Assets(Vec<DerParams>),
    Generate(GenerationInput),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SupplySection {
    pub beta1: f64,
    pub beta2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSection {
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<usize>,
    /// Explicit `x(0)`; drawn uniformly over each box from `seed` otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_state: Option<Vec<f64>>,
    /// Clearing bracket width; `1e-10·max(1, |β₂|)` per segment otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tolerance: Option<f64>,
    /// Adds `x_1 … x_m` columns to the CSV.
    #[serde(default = "default_true")]
    pub record_states: bool,
}

fn default_true() -> bool {
    true
}

impl Default for SimulationSection {
    fn default() -> Self {
        Self {
            seed: 0,
            horizon: None,
            initial_state: None,
            tolerance: None,
            record_states: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub population: PopulationSection,
    pub supply: SupplySection,
    #[serde(default)]
    pub schedule: Vec<Segment>,
    #[serde(default)]
    pub simulation: SimulationSection,
}

/// A config with its population drawn and every invariant checked.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub scenario: ScenarioConfig,
    pub initial_state: MarketState,
    pub seed: u64,
    pub record_states: bool,
}

impl Resolved {
    pub fn population(&self) -> &Population {
        &self.scenario.population
    }

    pub fn supply(&self) -> &SupplyModel {
        &self.scenario.supply
    }
}

pub fn parse_config(text: &str, origin: &str) -> Result<Config, CliError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        CliError::Config(format!("{origin}: field `{path}`: {}", e.inner()))
    })
}

pub fn load_config(path: &Path) -> Result<Config, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text, &path.display().to_string())
}

impl Config {
    /// Draws or checks the population and assembles the scenario.
    pub fn resolve(&self, seed_override: Option<u64>) -> Result<Resolved, CliError> {
        let seed = seed_override.unwrap_or(self.simulation.seed);
        let population = match &self.population {
            PopulationSection::Assets(assets) => {
                for (i, p) in assets.iter().enumerate() {
                    p.validate().map_err(|e| {
                        CliError::Config(format!("population.assets[{i}]: {e}"))
                    })?;
                }
                Population::new(assets.clone())
                    .map_err(|e| CliError::Config(format!("population.assets: {e}")))?
            }
            PopulationSection::Generate(input) => generate_population(&input.resolve()?, seed)?.0,
        };
        let supply = SupplyModel::new(self.supply.beta1, self.supply.beta2)
            .map_err(|e| CliError::Config(format!("supply: {e}")))?;
        if let Some(tol) = self.simulation.tolerance {
            if !(tol.is_finite() && tol > 0.0) {
                return Err(CliError::Config(format!(
                    "simulation.tolerance must be finite and > 0, got {tol}"
                )));
            }
        }
        let initial = match &self.simulation.initial_state {
            Some(x) => InitialState::Explicit(x.clone()),
            None => InitialState::Uniform { seed },
        };
        let scenario = ScenarioConfig {
            population,
            supply,
            schedule: self.schedule.clone(),
            horizon: self.simulation.horizon,
            initial,
            tolerance: self.simulation.tolerance,
        };
        scenario
            .plan()
            .map_err(|e| CliError::Config(format!("schedule: {e}")))?;
        let initial_state = scenario
            .initial_state()
            .map_err(|e| CliError::Config(format!("simulation.initial_state: {e}")))?;
        Ok(Resolved {
            scenario,
            initial_state,
            seed,
            record_states: self.simulation.record_states,
        })
    }

    /// The same scenario with the population and initial state written out.
    pub fn explicit(&self, resolved: &Resolved) -> Config {
        Config {
            population: PopulationSection::Assets(resolved.population().assets().to_vec()),
            supply: self.supply,
            schedule: self.schedule.clone(),
            simulation: SimulationSection {
                seed: resolved.seed,
                initial_state: Some(resolved.initial_state.x.clone()),
                ..self.simulation.clone()
            },
        }
    }
}
