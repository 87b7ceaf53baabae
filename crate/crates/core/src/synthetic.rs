//! Data-generating processes with known treatment effects.
//!
//! Features are i.i.d. standard normal and the noise is Gaussian. Every process
//! writes `y = μ₀(x) + τ(x)·t + σ·ε` with:
//!
//! | name        | μ₀(x)              | τ(x)     | P(t=1 \| x)        |
//! |-------------|--------------------|----------|--------------------|
//! | DGP-NULL    | x₁ + 0.5x₂         | 0        | 0.5                |
//! | DGP-CONST   | x₁ + 0.5x₂         | 5        | 0.5                |
//! | DGP-CONF    | 3x₁ + x₂           | 5        | logistic(s·x₁)     |
//! | DGP-CONF-DYN| 3x₁ + 2x₂          | 5        | logistic(s·(x₁−x₂))|
//! | DGP-NL      | sin(2x₁) + x₂²     | 5        | 0.5                |
//! | DGP-HET     | x₁ + 0.5x₂         | 2 + x₁   | 0.5                |
//!
//! where `s` is the selection strength. In DGP-CONF-DYN, x₂ plays the role of
//! pre-period earnings growth: units with slower growth select into treatment.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::learners::logistic::sigmoid;
use crate::rng::rng_from;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DgpKind {
    #[serde(rename = "DGP-NULL")]
    Null,
    #[serde(rename = "DGP-CONST")]
    Const,
    #[serde(rename = "DGP-CONF")]
    Conf,
    #[serde(rename = "DGP-CONF-DYN")]
    ConfDyn,
    #[serde(rename = "DGP-NL")]
    Nl,
    #[serde(rename = "DGP-HET")]
    Het,
}

impl DgpKind {
    pub const ALL: [DgpKind; 6] = [
        DgpKind::Null,
        DgpKind::Const,
        DgpKind::Conf,
        DgpKind::ConfDyn,
        DgpKind::Nl,
        DgpKind::Het,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DgpKind::Null => "DGP-NULL",
            DgpKind::Const => "DGP-CONST",
            DgpKind::Conf => "DGP-CONF",
            DgpKind::ConfDyn => "DGP-CONF-DYN",
            DgpKind::Nl => "DGP-NL",
            DgpKind::Het => "DGP-HET",
        }
    }
}

impl fmt::Display for DgpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DgpKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let up = s.to_ascii_uppercase();
        DgpKind::ALL
            .into_iter()
            .find(|k| k.name() == up || k.name().trim_start_matches("DGP-") == up)
            .ok_or_else(|| Error::contract(format!("unknown DGP '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub kind: DgpKind,
    pub n: usize,
    pub d: usize,
    pub noise_sd: f64,
    pub selection_strength: f64,
    pub seed: u64,
}

impl DgpSpec {
    pub fn new(kind: DgpKind, n: usize, seed: u64) -> Self {
        DgpSpec {
            kind,
            n,
            d: 5,
            noise_sd: 1.0,
            selection_strength: 1.0,
            seed,
        }
    }

    pub fn with_d(mut self, d: usize) -> Self {
        self.d = d;
        self
    }

    pub fn with_noise(mut self, noise_sd: f64) -> Self {
        self.noise_sd = noise_sd;
        self
    }

    pub fn with_selection(mut self, s: f64) -> Self {
        self.selection_strength = s;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.n < 50 {
            return Err(Error::contract("a DGP needs n >= 50"));
        }
        if self.d < 2 {
            return Err(Error::contract("a DGP needs d >= 2"));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return Err(Error::contract("noise sd must be finite and >= 0"));
        }
        if !self.selection_strength.is_finite() {
            return Err(Error::contract("selection strength must be finite"));
        }
        Ok(())
    }

    /// Prognostic surface μ₀(x).
    pub fn prognostic(&self, x: &[f64]) -> f64 {
        match self.kind {
            DgpKind::Null | DgpKind::Const | DgpKind::Het => x[0] + 0.5 * x[1],
            DgpKind::Conf => 3.0 * x[0] + x[1],
            DgpKind::ConfDyn => 3.0 * x[0] + 2.0 * x[1],
            DgpKind::Nl => (2.0 * x[0]).sin() + x[1] * x[1],
        }
    }

    /// Closed-form CATE τ(x).
    pub fn tau(&self, x: &[f64]) -> f64 {
        match self.kind {
            DgpKind::Null => 0.0,
            DgpKind::Het => 2.0 + x[0],
            _ => 5.0,
        }
    }

    /// True propensity P(t=1 | x).
    pub fn propensity(&self, x: &[f64]) -> f64 {
        let s = self.selection_strength;
        match self.kind {
            DgpKind::Conf => sigmoid(s * x[0]),
            DgpKind::ConfDyn => sigmoid(s * (x[0] - x[1])),
            _ => 0.5,
        }
    }

    /// Population ATE E[τ(X)].
    pub fn population_ate(&self) -> f64 {
        match self.kind {
            DgpKind::Null => 0.0,
            DgpKind::Het => 2.0,
            _ => 5.0,
        }
    }

    /// Population bias of the difference in means. Every confounded process
    /// here has a constant effect, so this is the prognostic gap
    /// `E[μ₀ | t=1] − E[μ₀ | t=0]`.
    ///
    /// For a linear prognostic `aᵀx` and selection `logistic(cᵀx)` with standard
    /// normal features, P(t=1) = ½ and Stein's lemma gives
    /// `4 (a·c) E[σ'(‖c‖Z)]`, evaluated by quadrature.
    pub fn naive_bias(&self) -> f64 {
        let s = self.selection_strength;
        let (dot, norm) = match self.kind {
            DgpKind::Conf => (3.0 * s, s.abs()),
            DgpKind::ConfDyn => (3.0 * s - 2.0 * s, s.abs() * 2f64.sqrt()),
            _ => return 0.0,
        };
        4.0 * dot * expected_logistic_density(norm)
    }
}

/// E[σ'(kZ)] for Z ~ N(0,1), by composite Simpson on [-12, 12].
pub fn expected_logistic_density(k: f64) -> f64 {
    let m = 4000;
    let (a, b) = (-12.0f64, 12.0f64);
    let h = (b - a) / m as f64;
    let f = |z: f64| {
        let s = sigmoid(k * z);
        s * (1.0 - s) * (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
    };
    let mut acc = f(a) + f(b);
    for i in 1..m {
        let z = a + h * i as f64;
        acc += if i % 2 == 1 { 4.0 } else { 2.0 } * f(z);
    }
    acc * h / 3.0
}

/// Ground truth carried alongside a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    /// Sample ATE, the mean of `tau`.
    pub ate: f64,
    pub population_ate: f64,
    pub tau: Vec<f64>,
    pub propensity: Vec<f64>,
    pub prognostic: Vec<f64>,
    pub naive_bias: f64,
}

pub fn generate(spec: &DgpSpec) -> Result<(Dataset, Truth)> {
    spec.validate()?;
    let mut rng = rng_from(spec.seed);
    let (n, d) = (spec.n, spec.d);
    let mut x = DMatrix::<f64>::zeros(n, d);
    let mut y = Vec::with_capacity(n);
    let mut t = Vec::with_capacity(n);
    let mut tau = Vec::with_capacity(n);
    let mut propensity = Vec::with_capacity(n);
    let mut prognostic = Vec::with_capacity(n);
    let mut row = vec![0.0; d];
    for i in 0..n {
        for (j, v) in row.iter_mut().enumerate() {
            *v = rng.sample(StandardNormal);
            x[(i, j)] = *v;
        }
        let p = spec.propensity(&row);
        let ti = u8::from(rng.random::<f64>() < p);
        let mu0 = spec.prognostic(&row);
        let effect = spec.tau(&row);
        let eps: f64 = rng.sample(StandardNormal);
        y.push(mu0 + effect * ti as f64 + spec.noise_sd * eps);
        t.push(ti);
        tau.push(effect);
        propensity.push(p);
        prognostic.push(mu0);
    }
    let ate = tau.iter().sum::<f64>() / n as f64;
    let ds = Dataset::from_continuous(y, t, x)?;
    Ok((
        ds,
        Truth {
            ate,
            population_ate: spec.population_ate(),
            tau,
            propensity,
            prognostic,
            naive_bias: spec.naive_bias(),
        },
    ))
}
