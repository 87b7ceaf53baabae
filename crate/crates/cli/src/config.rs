//! Flat `key = value` run configuration.
//!
//! Lines starting with `#` and blank lines are ignored. List values are comma
//! separated. Column kinds are given as `kind.<column> = binary`.

use std::collections::BTreeMap;
use std::path::Path;

use causalkit::{ColumnKind, ColumnRoles};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const ESTIMATORS: [&str; 9] = [
    "t-lasso", "t-ridge", "t-gbr", "dr-lasso", "dr-ridge", "dr-gbr", "hlm", "gp", "bcf",
];

/// Everything that influences a run's numbers. Output location and thread
/// count are deliberately absent: they never change results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub input: Option<String>,
    pub outcome: String,
    pub treatment: String,
    pub features: Vec<String>,
    pub kinds: BTreeMap<String, String>,
    pub estimator: String,
    pub bootstrap: usize,
    pub ci_level: f64,
    pub epsilon: f64,
    pub fixed_propensity: bool,
    pub paper_faithful: bool,
    pub seed: u64,
    pub folds: usize,
    pub screen_k: usize,
    pub auxiliary: Option<String>,
    pub subgroups: Vec<String>,
    pub importance_replicates: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            input: None,
            outcome: "y".into(),
            treatment: "t".into(),
            features: Vec::new(),
            kinds: BTreeMap::new(),
            estimator: "all".into(),
            bootstrap: 100,
            ci_level: 0.95,
            epsilon: 0.01,
            fixed_propensity: false,
            paper_faithful: false,
            seed: 0,
            folds: 5,
            screen_k: 10,
            auxiliary: None,
            subgroups: Vec::new(),
            importance_replicates: None,
        }
    }
}

fn list(v: &str) -> Vec<String> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect()
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, CliError> {
    v.parse()
        .map_err(|_| CliError::Usage(format!("config key '{key}': cannot parse '{v}'")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool, CliError> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(CliError::Usage(format!(
            "config key '{key}': expected true/false, got '{v}'"
        ))),
    }
}

pub fn parse_kind(v: &str) -> Result<ColumnKind, CliError> {
    match v.to_ascii_lowercase().replace('-', "_").as_str() {
        "continuous" => Ok(ColumnKind::Continuous),
        "binary" => Ok(ColumnKind::Binary),
        "categorical" | "categorical_encoded" => Ok(ColumnKind::CategoricalEncoded),
        "missing" | "missing_indicator" => Ok(ColumnKind::MissingIndicator),
        other => Err(CliError::Usage(format!("unknown column kind '{other}'"))),
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = RunConfig::default();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                CliError::Usage(format!("config line {}: expected key = value", no + 1))
            })?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<(), CliError> {
        if let Some(col) = key.strip_prefix("kind.") {
            parse_kind(v)?;
            self.kinds.insert(col.to_string(), v.to_ascii_lowercase());
            return Ok(());
        }
        match key {
            "input" => self.input = Some(v.to_string()),
            "outcome" => self.outcome = v.to_string(),
            "treatment" => self.treatment = v.to_string(),
            "features" => self.features = list(v),
            "estimator" => self.estimator = v.to_ascii_lowercase(),
            "bootstrap" => self.bootstrap = parse(key, v)?,
            "ci_level" => self.ci_level = parse(key, v)?,
            "epsilon" => self.epsilon = parse(key, v)?,
            "fixed_propensity" => self.fixed_propensity = parse_bool(key, v)?,
            "paper_faithful" => self.paper_faithful = parse_bool(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "folds" => self.folds = parse(key, v)?,
            "screen_k" => self.screen_k = parse(key, v)?,
            "auxiliary" => self.auxiliary = Some(v.to_string()).filter(|s| !s.is_empty()),
            "subgroups" => self.subgroups = list(v),
            "importance_replicates" => {
                self.importance_replicates = Some(parse(key, v)?).filter(|&r| r > 0)
            }
            other => return Err(CliError::Usage(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// The same configuration as flat text, loadable with [`RunConfig::load`].
    pub fn to_flat(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: String| out.push_str(&format!("{k} = {v}\n"));
        if let Some(i) = &self.input {
            put("input", i.clone());
        }
        put("outcome", self.outcome.clone());
        put("treatment", self.treatment.clone());
        put("features", self.features.join(","));
        for (c, k) in &self.kinds {
            put(&format!("kind.{c}"), k.clone());
        }
        put("estimator", self.estimator.clone());
        put("bootstrap", self.bootstrap.to_string());
        put("ci_level", self.ci_level.to_string());
        put("epsilon", self.epsilon.to_string());
        put("fixed_propensity", self.fixed_propensity.to_string());
        put("paper_faithful", self.paper_faithful.to_string());
        put("seed", self.seed.to_string());
        put("folds", self.folds.to_string());
        put("screen_k", self.screen_k.to_string());
        put("auxiliary", self.auxiliary.clone().unwrap_or_default());
        put("subgroups", self.subgroups.join(","));
        put(
            "importance_replicates",
            self.importance_replicates.unwrap_or(0).to_string(),
        );
        out
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.estimator != "all" && !ESTIMATORS.contains(&self.estimator.as_str()) {
            return Err(CliError::Usage(format!(
                "unknown estimator '{}'; expected one of {} or all",
                self.estimator,
                ESTIMATORS.join(", ")
            )));
        }
        if !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            return Err(CliError::Usage("ci-level must lie in (0, 1)".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(CliError::Usage("epsilon must lie in (0, 0.5)".into()));
        }
        if self.bootstrap == 1 {
            return Err(CliError::Usage(
                "bootstrap needs at least 2 replicates (0 disables it)".into(),
            ));
        }
        if self.folds < 2 {
            return Err(CliError::Usage("folds must be at least 2".into()));
        }
        Ok(())
    }

    pub fn estimators(&self) -> Vec<&'static str> {
        if self.estimator == "all" {
            ESTIMATORS.to_vec()
        } else {
            ESTIMATORS
                .iter()
                .copied()
                .filter(|e| *e == self.estimator)
                .collect()
        }
    }

    pub fn roles(&self) -> Result<ColumnRoles, CliError> {
        let mut roles = ColumnRoles::new(&self.outcome, &self.treatment);
        roles.features = self.features.clone();
        for (c, k) in &self.kinds {
            roles.kinds.insert(c.clone(), parse_kind(k)?);
        }
        Ok(roles)
    }

    pub fn input(&self) -> Result<&str, CliError> {
        self.input
            .as_deref()
            .ok_or_else(|| CliError::Usage("no input file: pass --input or set input".into()))
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}
