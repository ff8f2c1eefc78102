//! Experiment configuration: TOML text resolved against a profile.
//!
//! Keys absent from the file take the profile's value; unknown keys are
//! errors. A minimal file needs only `problem`.
//!
//! ```toml
//! problem = "poisson"
//! dimensions = [2, 10]
//! repetitions = 6
//! mode = "fixed_tree"        # or "expanding_trees", "eigen_iterative"
//!
//! [search]
//! iterations = 200
//!
//! [search.controller]
//! epsilon = 0.1
//!
//! [pde]
//! batches = [5000, 1000]
//! lambda = 100.0
//! ```

use std::path::PathBuf;
use std::str::FromStr;

use fex_core::eigen::EigenConfig;
use fex_core::pde::PdeProblem;
use fex_core::search::SearchConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Settings of the published experiments.
    #[default]
    Paper,
    /// Fewer iterations and smaller batches, for runs of minutes.
    Desk,
}

impl FromStr for Profile {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        match s {
            "paper" => Ok(Self::Paper),
            "desk" => Ok(Self::Desk),
            _ => Err(CliError::Config(format!("unknown profile `{s}`; expected `desk` or `paper`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    FixedTree,
    ExpandingTrees,
    EigenIterative,
}

/// Overrides of the problem's own constants.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PdeOverrides {
    pub batches: Option<Vec<usize>>,
    pub lambda: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpandingConfig {
    /// Template depths, tried in order.
    pub depths: Vec<usize>,
    /// Functional value at which the expansion stops.
    pub tolerance: f64,
}

impl Default for ExpandingConfig {
    fn default() -> Self {
        Self { depths: vec![3, 4, 6], tolerance: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub problem: String,
    pub dimensions: Vec<usize>,
    pub repetitions: usize,
    pub mode: Mode,
    pub profile: Profile,
    pub output: PathBuf,
    /// Master seed; every run derives its own.
    pub seed: u64,
    pub search: SearchConfig,
    pub pde: PdeOverrides,
    pub expanding: ExpandingConfig,
    pub eigen: EigenConfig,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            problem: String::new(),
            dimensions: vec![2],
            repetitions: 6,
            mode: Mode::FixedTree,
            profile: Profile::Paper,
            output: PathBuf::from("runs"),
            seed: 0,
            search: SearchConfig::default(),
            pde: PdeOverrides::default(),
            expanding: ExpandingConfig::default(),
            eigen: EigenConfig::default(),
        }
    }
}

/// Profile values for `problem`, as a TOML table.
fn profile_base(profile: Profile, problem: &str) -> toml::Table {
    let mut spec = ExperimentSpec { problem: problem.to_string(), profile, ..ExperimentSpec::default() };
    if profile == Profile::Desk {
        spec.search.iterations = 200;
        spec.search.fine_steps = 2000;
        spec.pde.batches = match problem {
            "poisson" | "conservation" => Some(vec![1000, 200]),
            "schrodinger" => Some(vec![1000, 2000]),
            _ => None,
        };
        spec.eigen.initial_batches = vec![2000, 500];
        spec.eigen.simplified_batch = 2000;
    }
    toml::Table::try_from(&spec).expect("spec serializes to a table")
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parses and resolves a config. `profile` overrides the file's `profile` key.
pub fn validate_config(text: &str, profile: Option<Profile>) -> Result<ExperimentSpec, CliError> {
    // first pass: key names, types and positions
    let raw: ExperimentSpec = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
    let user: toml::Table = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
    if raw.problem.is_empty() {
        return Err(CliError::Config(format!(
            "missing `problem`; expected one of: {}",
            PdeProblem::NAMES.join(", ")
        )));
    }
    let profile = profile.unwrap_or(raw.profile);
    let mut table = profile_base(profile, &raw.problem);
    merge(&mut table, user);
    table.insert("profile".into(), toml::Value::try_from(profile).expect("profile value"));
    let spec: ExperimentSpec = table.try_into().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
    spec.check()?;
    Ok(spec)
}

impl ExperimentSpec {
    fn check(&self) -> Result<(), CliError> {
        if !PdeProblem::NAMES.contains(&self.problem.as_str()) {
            return Err(CliError::Config(format!(
                "unknown problem `{}`; expected one of: {}",
                self.problem,
                PdeProblem::NAMES.join(", ")
            )));
        }
        if self.repetitions == 0 {
            return Err(CliError::Config("`repetitions` must be at least 1".into()));
        }
        if self.dimensions.is_empty() || self.dimensions.contains(&0) {
            return Err(CliError::Config("`dimensions` must be a non-empty list of positive integers".into()));
        }
        if self.mode == Mode::EigenIterative && self.problem != "eigen" {
            return Err(CliError::Config("`eigen_iterative` mode requires problem = \"eigen\"".into()));
        }
        if self.mode == Mode::ExpandingTrees && (self.expanding.depths.is_empty() || self.expanding.depths.contains(&0)) {
            return Err(CliError::Config("`expanding.depths` must be a non-empty list of positive depths".into()));
        }
        self.search.validate().map_err(|e| CliError::Config(format!("[search] {e}")))?;
        self.eigen.validate().map_err(|e| CliError::Config(format!("[eigen] {e}")))?;
        if self.eigen.initial_batches.len() != 2 {
            return Err(CliError::Config("`eigen.initial_batches` takes an interior and a boundary size".into()));
        }
        for &d in &self.dimensions {
            self.problem_for(d)?;
        }
        Ok(())
    }

    /// The problem in dimension `d` with this experiment's overrides applied.
    pub fn problem_for(&self, d: usize) -> Result<PdeProblem, CliError> {
        let cfg = |e: fex_core::FexError| CliError::Config(format!("[pde] {e}"));
        let mut p = PdeProblem::by_name(&self.problem, d).map_err(cfg)?;
        if let Some(b) = &self.pde.batches {
            p = p.with_batches(b).map_err(cfg)?;
        }
        if let Some(l) = self.pde.lambda {
            p = p.with_lambda(l).map_err(cfg)?;
        }
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_takes_full_scale_defaults() {
        let s = validate_config("problem = \"poisson\"", None).unwrap();
        assert_eq!(s.profile, Profile::Paper);
        assert_eq!(s.search.iterations, 1000);
        assert_eq!(s.search.batch_size, 10);
        assert_eq!(s.search.pool_capacity, 10);
        assert_eq!(s.search.coarse.adam_steps, 20);
        assert_eq!(s.search.coarse.bfgs_steps, 20);
        assert_eq!(s.search.fine_steps, 20_000);
        assert_eq!(s.search.controller.epsilon, 0.1);
        assert_eq!(s.repetitions, 6);
        let p = s.problem_for(2).unwrap();
        let sizes: Vec<usize> = p.regions().iter().map(|r| r.batch).collect();
        assert_eq!(sizes, vec![5000, 1000]);
        assert_eq!(p.combiner(), PdeProblem::poisson(2).unwrap().combiner());
    }

    #[test]
    fn desk_profile_scales_down() {
        let s = validate_config("problem = \"poisson\"\nprofile = \"desk\"", None).unwrap();
        assert_eq!(s.search.iterations, 200);
        assert_eq!(s.search.fine_steps, 2000);
        let s = validate_config("problem = \"poisson\"\n[search]\niterations = 7", Some(Profile::Desk)).unwrap();
        assert_eq!(s.search.iterations, 7);
        assert_eq!(s.search.fine_steps, 2000);
    }

    #[test]
    fn partial_nested_tables_keep_other_defaults() {
        let s = validate_config("problem = \"poisson\"\n[search.controller]\nnu = 0.25", None).unwrap();
        assert_eq!(s.search.controller.nu, 0.25);
        assert_eq!(s.search.controller.learning_rate, 0.002);
    }

    #[test]
    fn rejects_bad_values() {
        let e = validate_config("problem = \"poisson\"\n[search.controller]\nepsilon = 1.5", None).unwrap_err();
        assert!(e.to_string().contains("ε must satisfy 0 ≤ ε < 1"), "{e}");
        let e = validate_config("problem = \"poisson\"\ndimensions = [-2]", None).unwrap_err();
        assert!(matches!(e, CliError::Config(_)));
        let e = validate_config("problem = \"heat\"", None).unwrap_err();
        assert!(e.to_string().contains("poisson, conservation, schrodinger, eigen"), "{e}");
        let e = validate_config("problem = \"poisson\"\nrepetitions = 0", None).unwrap_err();
        assert!(matches!(e, CliError::Config(_)));
        let e = validate_config("problem = \"poisson\"\nmode = \"eigen_iterative\"", None).unwrap_err();
        assert!(matches!(e, CliError::Config(_)));
        let e = validate_config("problem = \"poisson\"\n[pde]\nbatches = [10]", None).unwrap_err();
        assert!(matches!(e, CliError::Config(_)));
    }

    #[test]
    fn unknown_keys_are_reported_with_position() {
        let e = validate_config("problem = \"poisson\"\n\n[search]\niteratons = 5\n", None).unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("iteratons"), "{msg}");
        assert!(msg.contains("line 4"), "{msg}");
    }
}
