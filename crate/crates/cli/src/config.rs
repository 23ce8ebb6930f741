//! Experiment configuration files.

use std::path::{Path, PathBuf};

use carnot::exponent::Exponent;
use carnot::group::{Group, StructureConstant};
use carnot::metric::Calibration;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Parse { path: PathBuf, source: serde_json::Error },
    #[error("{0}")]
    Invalid(String),
}

pub fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Suite {
    #[serde(rename = "group-axioms")]
    GroupAxioms,
    #[serde(rename = "metric")]
    Metric,
    #[serde(rename = "field-calculus")]
    FieldCalculus,
    #[serde(rename = "lipschitz-lab")]
    LipschitzLab,
    #[serde(rename = "distortion")]
    Distortion,
    #[serde(rename = "theorem-4.1")]
    LipschitzNorm,
    #[serde(rename = "theorem-5.1")]
    SobolevNorm,
    #[serde(rename = "prop-qinf")]
    SupNorm,
}

impl Suite {
    pub const ALL: [Suite; 8] = [
        Suite::GroupAxioms,
        Suite::Metric,
        Suite::FieldCalculus,
        Suite::LipschitzLab,
        Suite::Distortion,
        Suite::LipschitzNorm,
        Suite::SobolevNorm,
        Suite::SupNorm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::GroupAxioms => "group-axioms",
            Suite::Metric => "metric",
            Suite::FieldCalculus => "field-calculus",
            Suite::LipschitzLab => "lipschitz-lab",
            Suite::Distortion => "distortion",
            Suite::LipschitzNorm => "theorem-4.1",
            Suite::SobolevNorm => "theorem-5.1",
            Suite::SupNorm => "prop-qinf",
        }
    }
}

/// A group descriptor in the graded exponential basis.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Descriptor {
    pub name: String,
    pub layer_dims: Vec<usize>,
    #[serde(default)]
    pub structure_constants: Vec<StructureConstant<f64>>,
    /// Precomputed calibration, skipping the Monte Carlo run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration: Option<Calibration>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GroupSpec {
    /// A zoo name such as `heisenberg-1`.
    Named(String),
    File { descriptor: PathBuf },
    Inline(Descriptor),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DomainSpec {
    /// CC ball; the center defaults to the identity.
    Ball {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        center: Option<Vec<f64>>,
        radius: f64,
    },
    /// Box in exponential coordinates.
    Box { lo: Vec<f64>, hi: Vec<f64> },
}

impl Default for DomainSpec {
    fn default() -> Self {
        DomainSpec::Ball { center: None, radius: 1.0 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case", deny_unknown_fields)]
pub enum MapSpec {
    Identity,
    Translation { by: Vec<f64> },
    Dilation { lambda: f64 },
    Shear { a: f64 },
    Projection,
    /// Homomorphism given by its horizontal block, rows first.
    Linear { matrix: Vec<Vec<f64>> },
    RadialSquash { inner_radius: f64 },
    Constant { value: Vec<f64> },
    /// `maps[n-1] o ... o maps[0]`.
    Compose { maps: Vec<MapSpec> },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Term {
    pub coefficient: f64,
    pub exponents: Vec<u32>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case", deny_unknown_fields)]
pub enum FieldSpec {
    Coordinate { k: usize },
    DistanceToPoint { center: Vec<f64> },
    Bump { center: Vec<f64>, radius: f64 },
    Polynomial { terms: Vec<Term> },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Budgets {
    /// Test functions per family.
    #[serde(default = "Budgets::default_family")]
    pub family: usize,
    /// Quadrature nodes for analytic sides.
    #[serde(default = "Budgets::default_quadrature")]
    pub quadrature: usize,
    /// Quadrature nodes per estimator block.
    #[serde(default = "Budgets::default_samples")]
    pub samples: usize,
    /// Nodes used to screen a family.
    #[serde(default = "Budgets::default_screen")]
    pub screen: usize,
    /// Screened candidates evaluated in full.
    #[serde(default = "Budgets::default_top")]
    pub top: usize,
    #[serde(default = "Budgets::default_sub_balls")]
    pub sub_balls: usize,
    /// Sample points of the axiom, metric, field and Lipschitz suites.
    #[serde(default = "Budgets::default_checks")]
    pub checks: usize,
}

impl Budgets {
    fn default_family() -> usize {
        256
    }
    fn default_quadrature() -> usize {
        100_000
    }
    fn default_samples() -> usize {
        20_000
    }
    fn default_screen() -> usize {
        1024
    }
    fn default_top() -> usize {
        8
    }
    fn default_sub_balls() -> usize {
        5
    }
    fn default_checks() -> usize {
        200
    }

    pub fn scaled(&self, factor: f64) -> Self {
        let s = |n: usize| ((n as f64 * factor).round() as usize).max(1);
        Self {
            family: s(self.family),
            quadrature: s(self.quadrature),
            samples: s(self.samples),
            screen: s(self.screen).min(s(self.samples)),
            top: self.top,
            sub_balls: self.sub_balls,
            checks: s(self.checks),
        }
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let fields = [
            ("family", self.family),
            ("quadrature", self.quadrature),
            ("samples", self.samples),
            ("screen", self.screen),
            ("top", self.top),
            ("sub_balls", self.sub_balls),
            ("checks", self.checks),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(invalid(format!("budgets.{name} must be positive")));
            }
        }
        Ok(())
    }
}

impl Default for Budgets {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

fn infinite() -> Exponent {
    Exponent::Infinite
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub group: GroupSpec,
    #[serde(default)]
    pub domain: DomainSpec,
    pub map: MapSpec,
    /// Source exponent; `inf` for the Lipschitz-target suites.
    #[serde(default = "infinite")]
    pub p: Exponent,
    pub q: Exponent,
    #[serde(default)]
    pub budgets: Budgets,
    pub seed: u64,
    /// Field for the `field-calculus` suite.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<FieldSpec>,
    pub suites: Vec<Suite>,
    /// Report path; the per-sample CSV goes next to it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        let mut cfg: Self =
            serde_json::from_str(&text).map_err(|source| ConfigError::Parse { path: path.into(), source })?;
        // Descriptor files are resolved relative to the config.
        if let GroupSpec::File { descriptor } = &mut cfg.group {
            if descriptor.is_relative() {
                if let Some(dir) = path.parent() {
                    *descriptor = dir.join(&*descriptor);
                }
            }
        }
        Ok(cfg)
    }

    /// Checks that do not need the group.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.q.reciprocal() < self.p.reciprocal() {
            return Err(invalid(format!("need 1 <= q <= p, got q = {} > p = {}", self.q, self.p)));
        }
        self.budgets.validate()?;
        let needs_finite_p = [Suite::Distortion, Suite::SobolevNorm];
        if self.p.is_infinite() {
            if let Some(s) = self.suites.iter().find(|s| needs_finite_p.contains(s)) {
                return Err(invalid(format!("suite {} needs a finite p", s.name())));
            }
        }
        if self.q.is_infinite() && self.suites.contains(&Suite::SobolevNorm) {
            return Err(invalid("suite theorem-5.1 needs a finite q"));
        }
        Ok(())
    }
}

pub fn load_descriptor(path: &Path) -> Result<Descriptor, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
    serde_json::from_str(&text).map_err(|source| ConfigError::Parse { path: path.into(), source })
}

/// Builds a group from a zoo name or descriptor.
pub fn build_group(spec: &GroupSpec) -> Result<Group<f64>, ConfigError> {
    match spec {
        GroupSpec::Named(name) => named_group(name),
        GroupSpec::File { descriptor } => from_descriptor(&load_descriptor(descriptor)?),
        GroupSpec::Inline(d) => from_descriptor(d),
    }
}

fn from_descriptor(d: &Descriptor) -> Result<Group<f64>, ConfigError> {
    let g = Group::new(d.name.clone(), d.layer_dims.clone(), d.structure_constants.clone())
        .map_err(|e| invalid(format!("group descriptor `{}`: {e}", d.name)))?;
    if let Some(c) = &d.calibration {
        if c.layer_bounds.len() != g.step() {
            return Err(invalid("calibration.layer_bounds must have one entry per layer"));
        }
        g.set_calibration(c.clone());
    }
    Ok(g)
}

/// `abelian-<n>`, `heisenberg-<k>` or `engel`.
pub fn named_group(name: &str) -> Result<Group<f64>, ConfigError> {
    let numbered = |prefix: &str| -> Option<Result<usize, ConfigError>> {
        name.strip_prefix(prefix).map(|rest| match rest.parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(invalid(format!("group `{name}`: expected a positive integer after `{prefix}`"))),
        })
    };
    if let Some(n) = numbered("abelian-") {
        return Ok(Group::abelian(n?));
    }
    if let Some(k) = numbered("heisenberg-") {
        return Ok(Group::heisenberg(k?));
    }
    if name == "engel" {
        return Ok(Group::engel());
    }
    Err(invalid(format!("unknown group `{name}`; see `carnot list-zoo`")))
}
