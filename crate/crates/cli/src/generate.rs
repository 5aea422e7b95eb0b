//! Seeded population generation.
//!
//! Asset `i` draws its parameters from its own stream, keyed by the config
//! seed and `i`, in the fixed order `a, x_ref, x_half_width, d_lo, d_hi, q`.
//! Point-mass rules still consume a draw so the order never shifts. Initial
//! states come from a separate stream, uniform over each state box.

use dermarket::der::{DerParams, MarketState};
use dermarket::error::Error as CoreError;
use dermarket::rng::{stream, stream_rng, uniform};
use dermarket::simulator::Population;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// A point mass or `{"uniform": [lo, hi]}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Rule {
    Fixed(f64),
    Uniform { uniform: [f64; 2] },
}

impl Rule {
    fn sample(&self, rng: &mut dermarket::rng::StreamRng) -> f64 {
        match *self {
            Rule::Fixed(v) => uniform(rng, v, v),
            Rule::Uniform { uniform: [lo, hi] } => uniform(rng, lo, hi),
        }
    }

    /// Reorders reversed endpoints, warning once per rule.
    fn normalized(self, name: &str) -> Rule {
        match self {
            Rule::Uniform { uniform: [lo, hi] } if lo > hi => {
                log::warn!("rule `{name}`: reversed bounds U[{lo}, {hi}] read as U[{hi}, {lo}]");
                Rule::Uniform { uniform: [hi, lo] }
            }
            r => r,
        }
    }

    fn is_finite(&self) -> bool {
        match self {
            Rule::Fixed(v) => v.is_finite(),
            Rule::Uniform { uniform } => uniform.iter().all(|v| v.is_finite()),
        }
    }
}

/// Distribution of a random population. The box is `x_ref ± x_half_width`,
/// `r = r_per_a·a` and `c = c_per_xref·x_ref + c_offset`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationSpec {
    pub m: usize,
    pub a: Rule,
    pub x_ref: Rule,
    pub x_half_width: Rule,
    pub d_lo: Rule,
    pub d_hi: Rule,
    pub q: Rule,
    pub r_per_a: f64,
    pub c_per_xref: f64,
    pub c_offset: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// The single reference asset, unstable at its default q.
    ReferenceSingle,
    /// The randomized 100-asset reference population.
    ReferenceMulti,
}

impl Preset {
    pub fn spec(self) -> GenerationSpec {
        match self {
            Preset::ReferenceSingle => GenerationSpec {
                m: 1,
                a: Rule::Fixed(0.95),
                x_ref: Rule::Fixed(5000.0),
                x_half_width: Rule::Fixed(2500.0),
                d_lo: Rule::Fixed(0.0),
                d_hi: Rule::Fixed(500.0),
                q: Rule::Fixed(0.005),
                r_per_a: -0.1,
                c_per_xref: 0.0,
                c_offset: 500.0,
            },
            Preset::ReferenceMulti => GenerationSpec {
                m: 100,
                a: Rule::Uniform { uniform: [0.9, 0.95] },
                x_ref: Rule::Uniform { uniform: [350.0, 500.0] },
                x_half_width: Rule::Fixed(200.0),
                d_lo: Rule::Fixed(0.0),
                d_hi: Rule::Uniform { uniform: [100.0, 150.0] },
                q: Rule::Fixed(0.005),
                r_per_a: -2.0,
                c_per_xref: 2.0,
                c_offset: 0.0,
            },
        }
    }

    pub fn beta1(self) -> f64 {
        match self {
            Preset::ReferenceSingle => 0.04,
            Preset::ReferenceMulti => 0.008,
        }
    }
}

/// Generation section of a config: an optional preset plus overrides.
/// Without a preset every field is required.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationInput {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<Preset>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<Rule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x_ref: Option<Rule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x_half_width: Option<Rule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_lo: Option<Rule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_hi: Option<Rule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<Rule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_per_a: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_per_xref: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_offset: Option<f64>,
}

impl GenerationInput {
    pub fn resolve(&self) -> Result<GenerationSpec, CliError> {
        fn pick<T: Copy>(v: Option<T>, base: Option<T>, name: &str) -> Result<T, CliError> {
            v.or(base).ok_or_else(|| {
                CliError::Config(format!(
                    "population.generate.{name} is required when no preset is given"
                ))
            })
        }
        let base = self.preset.map(Preset::spec);
        let b = base.as_ref();
        let spec = GenerationSpec {
            m: pick(self.m, b.map(|s| s.m), "m")?,
            a: pick(self.a, b.map(|s| s.a), "a")?.normalized("a"),
            x_ref: pick(self.x_ref, b.map(|s| s.x_ref), "x_ref")?.normalized("x_ref"),
            x_half_width: pick(self.x_half_width, b.map(|s| s.x_half_width), "x_half_width")?
                .normalized("x_half_width"),
            d_lo: pick(self.d_lo, b.map(|s| s.d_lo), "d_lo")?.normalized("d_lo"),
            d_hi: pick(self.d_hi, b.map(|s| s.d_hi), "d_hi")?.normalized("d_hi"),
            q: pick(self.q, b.map(|s| s.q), "q")?.normalized("q"),
            r_per_a: pick(self.r_per_a, b.map(|s| s.r_per_a), "r_per_a")?,
            c_per_xref: pick(self.c_per_xref, b.map(|s| s.c_per_xref), "c_per_xref")?,
            c_offset: pick(self.c_offset, b.map(|s| s.c_offset), "c_offset")?,
        };
        if spec.m == 0 {
            return Err(CliError::Config("population.generate.m must be ≥ 1".into()));
        }
        let rules = [
            ("a", spec.a),
            ("x_ref", spec.x_ref),
            ("x_half_width", spec.x_half_width),
            ("d_lo", spec.d_lo),
            ("d_hi", spec.d_hi),
            ("q", spec.q),
        ];
        if let Some((name, _)) = rules.iter().find(|(_, r)| !r.is_finite()) {
            return Err(CliError::Config(format!(
                "population.generate.{name} must be finite"
            )));
        }
        Ok(spec)
    }
}

/// Draws the population and its initial state. Rejects the spec, naming
/// the first asset and invariant that fails, instead of redrawing.
pub fn generate_population(
    spec: &GenerationSpec,
    seed: u64,
) -> Result<(Population, MarketState), CliError> {
    if spec.m == 0 {
        return Err(CliError::Config("population.generate.m must be ≥ 1".into()));
    }
    let assets: Vec<DerParams> = (0..spec.m)
        .map(|i| {
            let mut rng = stream_rng(seed, stream::POPULATION, i as u64);
            let a = spec.a.sample(&mut rng);
            let x_ref = spec.x_ref.sample(&mut rng);
            let half = spec.x_half_width.sample(&mut rng);
            let d_lo = spec.d_lo.sample(&mut rng);
            let d_hi = spec.d_hi.sample(&mut rng);
            let q = spec.q.sample(&mut rng);
            DerParams {
                a,
                x_lo: x_ref - half,
                x_hi: x_ref + half,
                d_lo,
                d_hi,
                q,
                r: spec.r_per_a * a,
                c: spec.c_per_xref * x_ref + spec.c_offset,
            }
        })
        .collect();
    for (i, p) in assets.iter().enumerate() {
        p.validate().map_err(|e| {
            CliError::Config(format!("generated asset {i} violates the generation rules: {e}"))
        })?;
    }
    let population = Population::new(assets).map_err(|e| match e {
        CoreError::NotControllable { .. } => {
            CliError::Config(format!("generation rules give an uncontrollable population: {e}"))
        }
        e => CliError::Config(e.to_string()),
    })?;
    let x0 = population.uniform_state(seed);
    Ok((population, x0))
}
