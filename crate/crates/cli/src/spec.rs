//! Experiment spec: one TOML file with a scenario name, a seed, per-module
//! blocks and sweep axes.

use std::collections::BTreeSet;
use std::path::PathBuf;

use anyhow::{anyhow, bail, Context, Result};
use mdlab::concentration::CheckConfig;
use mdlab::estimators::{FamilyConstants, TrainConfig};
use mdlab::fit::{EpsConfig, SolverConfig};
use mdlab::geometry::{DensitySpec, EmbeddedManifold, ManifoldKind, make_manifold};
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    pub scenario: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub manifold: ManifoldBlock,
    #[serde(default)]
    pub measure: MeasureBlock,
    #[serde(default)]
    pub check: CheckBlock,
    #[serde(default)]
    pub sampler: SamplerBlock,
    #[serde(default)]
    pub estimator: EstimatorBlock,
    #[serde(default)]
    pub fit: FitBlock,
    #[serde(default)]
    pub bounds: BoundsBlock,
    #[serde(default)]
    pub sweep: Sweep,
}

fn schema_version() -> u32 {
    SCHEMA_VERSION
}

/// Manifold kind and frame seed; the ambient dimension comes from `sweep.dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifoldBlock {
    #[serde(flatten)]
    pub kind: ManifoldKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for ManifoldBlock {
    fn default() -> Self {
        ManifoldBlock { kind: ManifoldKind::Circle { radius: 1.0 }, seed: Some(1) }
    }
}

impl ManifoldBlock {
    pub fn build(&self, ambient_dim: usize) -> Result<EmbeddedManifold> {
        make_manifold(self.kind.clone(), ambient_dim, self.seed).with_context(|| format!("manifold (D = {ambient_dim})"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MeasureBlock {
    pub density: DensitySpec,
    pub n: usize,
}

impl Default for MeasureBlock {
    fn default() -> Self {
        MeasureBlock { density: DensitySpec::Uniform, n: 500 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CheckBlock {
    pub delta: f64,
    pub trials: usize,
    /// Diffusion time; each check has its own default when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t: Option<f64>,
    /// Length scale of the inner-product check.
    pub eps: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub net_resolution: Option<f64>,
}

impl Default for CheckBlock {
    fn default() -> Self {
        CheckBlock { delta: 0.05, trials: 2000, t: None, eps: 0.1, net_resolution: None }
    }
}

impl CheckBlock {
    pub fn config(&self, seed: u64) -> CheckConfig {
        CheckConfig { delta: self.delta, trials: self.trials, seed, net_resolution: self.net_resolution }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerBlock {
    pub schemes: Vec<String>,
    pub t_bar: f64,
    pub t_under: f64,
    pub n_paths: usize,
    /// Step budget when K is not swept.
    pub k: usize,
    /// Step budget of the coupled reference run in `sampler.k_sweep`.
    pub k_ref: usize,
    pub seeds: usize,
}

impl Default for SamplerBlock {
    fn default() -> Self {
        SamplerBlock {
            schemes: vec!["classic".into(), "modified".into()],
            t_bar: 2.0,
            t_under: 0.05,
            n_paths: 500,
            k: 32,
            k_ref: 2048,
            seeds: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorBlock {
    pub samples: usize,
    pub anchors: usize,
    pub anchor_radius: f64,
    pub frame_cap: usize,
    pub hidden: Vec<usize>,
    pub weight_bound: f64,
    pub constants: FamilyConstants,
    pub train: TrainConfig,
}

impl Default for EstimatorBlock {
    fn default() -> Self {
        EstimatorBlock {
            samples: 200,
            anchors: 8,
            anchor_radius: 1.5,
            frame_cap: 4,
            hidden: vec![16, 16],
            weight_bound: 10.0,
            constants: FamilyConstants::default(),
            train: TrainConfig { step_size: 2e-3, ..Default::default() },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitBlock {
    pub beta: f64,
    pub eps: EpsConfig,
    pub solver: SolverConfig,
    /// Sample size used to set the ε_n constant once per seed.
    pub pilot_n: usize,
    pub seeds: usize,
    /// Evaluation grid points per ε_n when measuring Hausdorff distance.
    pub per_eps: usize,
}

impl Default for FitBlock {
    fn default() -> Self {
        FitBlock { beta: 2.0, eps: EpsConfig::default(), solver: SolverConfig::default(), pilot_n: 200, seeds: 5, per_eps: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoundsBlock {
    pub pairs: usize,
    pub max_points: usize,
    pub max_dim: usize,
    pub t_min: f64,
    pub t_max: f64,
    pub mc_trials: usize,
    pub nodes_per_doubling: usize,
    /// Multiple of the relative Fisher information compared with |dKL/dt|.
    pub factor: f64,
    pub tolerance: f64,
}

impl Default for BoundsBlock {
    fn default() -> Self {
        BoundsBlock {
            pairs: 100,
            max_points: 4,
            max_dim: 4,
            t_min: 0.1,
            t_max: 0.18,
            mc_trials: 32,
            nodes_per_doubling: 8,
            factor: 2.0,
            tolerance: 0.01,
        }
    }
}

/// Sweep axes. An absent axis takes the scenario's default; a present axis
/// must be nonempty.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Sweep {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dim: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<Vec<f64>>,
}

impl Sweep {
    fn check_nonempty(&self) -> Result<()> {
        let axes: [(&str, Option<usize>); 5] = [
            ("dim", self.dim.as_ref().map(Vec::len)),
            ("n", self.n.as_ref().map(Vec::len)),
            ("k", self.k.as_ref().map(Vec::len)),
            ("t", self.t.as_ref().map(Vec::len)),
            ("gamma", self.gamma.as_ref().map(Vec::len)),
        ];
        for (name, len) in axes {
            if len == Some(0) {
                bail!("sweep.{name}: sweep axis is empty");
            }
        }
        Ok(())
    }
}

impl ExperimentSpec {
    /// Parse TOML, rejecting keys that no block understands.
    pub fn parse(text: &str) -> Result<Self> {
        let raw: toml::Value = toml::from_str(text).map_err(|e| anyhow!("spec is not valid TOML: {}", e.message()))?;
        let spec: ExperimentSpec = raw.clone().try_into().map_err(|e: toml::de::Error| anyhow!("{}", e.message()))?;
        let known = toml::Value::try_from(&spec).context("re-encoding spec")?;
        if let Some(key) = unknown_key(&raw, &known, "") {
            bail!("{key}: unknown key");
        }
        Ok(spec)
    }

    /// Checks shared by every scenario.
    pub fn validate_common(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            bail!("schema_version: expected {SCHEMA_VERSION}, got {}", self.schema_version);
        }
        self.sweep.check_nonempty()?;
        if !(self.check.delta > 0.0 && self.check.delta < 1.0) {
            bail!("check.delta: must lie in (0, 1)");
        }
        if self.check.trials == 0 {
            bail!("check.trials: must be at least 1");
        }
        if self.measure.n == 0 {
            bail!("measure.n: must be at least 1");
        }
        Ok(())
    }
}

/// First key of `raw` (depth first, sorted) missing from `known`.
fn unknown_key(raw: &toml::Value, known: &toml::Value, prefix: &str) -> Option<String> {
    let (toml::Value::Table(r), toml::Value::Table(k)) = (raw, known) else {
        return None;
    };
    let keys: BTreeSet<&String> = r.keys().collect();
    for key in keys {
        let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        match k.get(key) {
            None => return Some(path),
            Some(sub) => {
                if let Some(found) = unknown_key(&r[key], sub, &path) {
                    return Some(found);
                }
            }
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_spec_takes_defaults() {
        let s = ExperimentSpec::parse("scenario = \"fit.rate\"").unwrap();
        assert_eq!(s.seed, 0);
        assert_eq!(s.measure.n, 500);
        assert!(s.sweep.dim.is_none());
        s.validate_common().unwrap();
    }

    #[test]
    fn unknown_keys_are_named() {
        let e = ExperimentSpec::parse("scenario = \"x\"\n[measure]\nsize = 3").unwrap_err();
        assert_eq!(e.to_string(), "measure.size: unknown key");
        let e = ExperimentSpec::parse("scenario = \"x\"\n[manifold]\nkind = \"circle\"\nradius = 1.0\nwobble = 2").unwrap_err();
        assert_eq!(e.to_string(), "manifold.wobble: unknown key");
    }

    #[test]
    fn empty_axis_is_named() {
        let s = ExperimentSpec::parse("scenario = \"x\"\n[sweep]\nk = []").unwrap();
        assert_eq!(s.validate_common().unwrap_err().to_string(), "sweep.k: sweep axis is empty");
    }

    #[test]
    fn nested_blocks_parse() {
        let text = r#"
scenario = "estimator.erm_demo"
[manifold]
kind = "sphere"
dim = 2
radius = 1.0
[measure]
density = { kind = "cosine", amplitude = 0.5 }
[estimator.train]
steps = 10
[fit.eps]
mode = "fixed"
eps = 0.2
"#;
        let s = ExperimentSpec::parse(text).unwrap();
        assert_eq!(s.estimator.train.steps, 10);
        assert_eq!(s.fit.eps, EpsConfig::Fixed { eps: 0.2 });
        assert_eq!(s.manifold.kind.intrinsic_dim(), 2);
    }
}
