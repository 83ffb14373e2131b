//! Experiment configuration: TOML schema, presets, and sweep overrides.

use crate::consistency::Fidelity;
use crate::error::{Error, Result};
use crate::guidance::EstimatorKind;
use crate::scheduler::NoisePolicy;
use crate::schedule::{PerturbForm, ScheduleKind, Weighting};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentConfig {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub cov_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetConfig {
    pub dim: usize,
    pub components: Vec<ComponentConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptConfig {
    /// Component indices; omit for the unconditional prompt.
    #[serde(default)]
    pub selected: Option<Vec<usize>>,
    #[serde(default = "default_cfg_scale")]
    pub cfg_scale: f64,
}

fn default_cfg_scale() -> f64 {
    7.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    #[serde(default)]
    pub perturb: PerturbForm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub kind: EstimatorKind,
    #[serde(default = "default_fidelity")]
    pub fidelity: Fidelity,
    /// Inversion-chain interval (interval score matching only).
    #[serde(default = "default_delta_t")]
    pub delta_t: usize,
    #[serde(default)]
    pub omega: Weighting,
}

fn default_fidelity() -> Fidelity {
    Fidelity::KStep(1)
}

fn default_delta_t() -> usize {
    20
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanConfig {
    pub n_total: usize,
    /// Cut-off iteration between the geometry and appearance phases.
    pub cut_iter: usize,
    pub t_cut: usize,
    pub geo_max: usize,
    pub app_min: usize,
    pub noise: NoisePolicy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitKind {
    Point,
    Cloud,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitConfig {
    pub kind: InitKind,
    pub center: Vec<f64>,
    #[serde(default = "default_spread")]
    pub spread: f64,
}

fn default_spread() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub particles: usize,
    pub init: InitConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub method: OptimKind,
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    /// Final learning rate as a fraction of the initial one, reached linearly
    /// at the last iteration; 1.0 disables the decay.
    #[serde(default = "default_lr_final_frac")]
    pub lr_final_frac: f64,
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.99
}

fn default_adam_eps() -> f64 {
    1e-8
}

fn default_lr_final_frac() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CameraKind {
    Identity,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraConfig {
    pub kind: CameraKind,
    #[serde(default = "default_camera_count")]
    pub count: usize,
}

fn default_camera_count() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSettings {
    pub seed: u64,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_out_dir")]
    pub out_dir: String,
    /// Window for the sliding guidance-variance metric.
    #[serde(default = "default_variance_window")]
    pub variance_window: usize,
}

fn default_trials() -> usize {
    1
}

fn default_out_dir() -> String {
    "runs".into()
}

fn default_variance_window() -> usize {
    50
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub target: TargetConfig,
    pub prompts: BTreeMap<String, PromptConfig>,
    /// Name of the active prompt.
    pub prompt: String,
    pub schedule: ScheduleConfig,
    pub estimator: EstimatorConfig,
    pub plan: PlanConfig,
    pub scene: SceneConfig,
    pub optimizer: OptimizerConfig,
    pub cameras: CameraConfig,
    pub run: RunSettings,
}

impl ExperimentConfig {
    /// Desk-scale default: the bimodal benchmark with the calibrated
    /// estimator, 2000 iterations and the phase cut scaled accordingly.
    pub fn desk() -> Self {
        let mut prompts = BTreeMap::new();
        prompts.insert(
            "right".to_string(),
            PromptConfig {
                selected: Some(vec![1]),
                cfg_scale: 7.5,
            },
        );
        ExperimentConfig {
            target: TargetConfig {
                dim: 2,
                components: vec![
                    ComponentConfig {
                        weight: 0.5,
                        mean: vec![-3.0, 0.0],
                        cov_scale: 0.5,
                    },
                    ComponentConfig {
                        weight: 0.5,
                        mean: vec![3.0, 0.0],
                        cov_scale: 0.5,
                    },
                ],
            },
            prompts,
            prompt: "right".into(),
            schedule: ScheduleConfig {
                kind: ScheduleKind::Linear,
                steps: 1000,
                beta_min: 1e-4,
                beta_max: 0.02,
                perturb: PerturbForm::Scaled,
            },
            estimator: EstimatorConfig {
                kind: EstimatorKind::SdsLcmGc,
                fidelity: Fidelity::KStep(1),
                delta_t: 20,
                omega: Weighting::One,
            },
            plan: PlanConfig {
                n_total: 2000,
                cut_iter: 400,
                t_cut: 350,
                geo_max: 980,
                app_min: 20,
                noise: NoisePolicy::Fresh,
            },
            scene: SceneConfig {
                particles: 64,
                init: InitConfig {
                    kind: InitKind::Cloud,
                    center: vec![0.0, 0.0],
                    spread: 0.5,
                },
            },
            optimizer: OptimizerConfig {
                method: OptimKind::Adam,
                learning_rate: 0.01,
                beta1: 0.9,
                beta2: 0.99,
                adam_eps: 1e-8,
                lr_final_frac: 0.02,
            },
            cameras: CameraConfig {
                kind: CameraKind::Random,
                count: 8,
            },
            run: RunSettings {
                seed: 42,
                trials: 1,
                out_dir: "runs".into(),
                variance_window: 50,
            },
        }
    }

    /// Full-scale settings: 5000 iterations, cut at 1000, fixed noise.
    pub fn paper61() -> Self {
        let mut cfg = Self::desk();
        cfg.plan.n_total = 5000;
        cfg.plan.cut_iter = 1000;
        cfg.plan.noise = NoisePolicy::Fixed { seed: 0 };
        cfg
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper-6.1" => Ok(Self::paper61()),
            other => Err(Error::Config(format!(
                "unknown preset '{other}' (expected 'desk' or 'paper-6.1')"
            ))),
        }
    }

    pub fn active_prompt(&self) -> Result<&PromptConfig> {
        self.prompts
            .get(&self.prompt)
            .ok_or_else(|| Error::Config(format!("active prompt '{}' not defined", self.prompt)))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        parse(&text).map_err(|e| Error::ConfigFile {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serialize(e.to_string()))
    }
}

pub fn parse(text: &str) -> Result<ExperimentConfig> {
    toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
}

/// Applies `key = value` overrides onto a config, using dotted TOML paths
/// (e.g. `estimator.kind`, `prompts.right.cfg_scale`, `run.seed`). The
/// shorthand keys `estimator`, `cfg_scale` and `seed` map to the obvious
/// paths.
pub fn apply_overrides(config: &ExperimentConfig, overrides: &[(String, String)]) -> Result<ExperimentConfig> {
    let text = config.to_toml()?;
    let mut doc: toml::Value = toml::from_str(&text).map_err(|e| Error::Serialize(e.to_string()))?;
    for (key, value) in overrides {
        let path = match key.as_str() {
            "estimator" => "estimator.kind".to_string(),
            "cfg_scale" => format!("prompts.{}.cfg_scale", config.prompt),
            "seed" => "run.seed".to_string(),
            other => other.to_string(),
        };
        set_path(&mut doc, &path, parse_scalar(value))?;
    }
    doc.try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))
}

fn parse_scalar(raw: &str) -> toml::Value {
    if let Ok(b) = raw.parse::<bool>() {
        return toml::Value::Boolean(b);
    }
    if let Ok(i) = raw.parse::<i64>() {
        return toml::Value::Integer(i);
    }
    if let Ok(f) = raw.parse::<f64>() {
        return toml::Value::Float(f);
    }
    toml::Value::String(raw.to_string())
}

fn set_path(doc: &mut toml::Value, path: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = path.split('.').collect();
    let mut cur = doc;
    for part in &parts[..parts.len() - 1] {
        cur = cur
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override path '{path}' is not a table")))?
            .entry(part.to_string())
            .or_insert(toml::Value::Table(Default::default()));
    }
    cur.as_table_mut()
        .ok_or_else(|| Error::Config(format!("override path '{path}' is not a table")))?
        .insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Parses a sweep grid `key=v1,v2;key2=w1,w2` into the list of cells
/// (cartesian product), each a list of overrides.
pub fn parse_grid(spec: &str) -> Result<Vec<Vec<(String, String)>>> {
    let mut axes: Vec<(String, Vec<String>)> = Vec::new();
    for axis in spec.split(';').filter(|s| !s.trim().is_empty()) {
        let (key, values) = axis
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("grid axis '{axis}' is not key=v1,v2")))?;
        let values: Vec<String> = values
            .split(',')
            .map(|v| v.trim().to_string())
            .filter(|v| !v.is_empty())
            .collect();
        if values.is_empty() {
            return Err(Error::Config(format!("grid axis '{key}' has no values")));
        }
        axes.push((key.trim().to_string(), values));
    }
    if axes.is_empty() {
        return Err(Error::Config("empty sweep grid".into()));
    }
    let mut cells: Vec<Vec<(String, String)>> = vec![Vec::new()];
    for (key, values) in axes {
        let mut next = Vec::with_capacity(cells.len() * values.len());
        for cell in &cells {
            for v in &values {
                let mut c = cell.clone();
                c.push((key.clone(), v.clone()));
                next.push(c);
            }
        }
        cells = next;
    }
    Ok(cells)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_parse_and_round_trip() {
        for name in ["desk", "paper-6.1"] {
            let cfg = ExperimentConfig::preset(name).unwrap();
            let text = cfg.to_toml().unwrap();
            let back = parse(&text).unwrap();
            assert_eq!(cfg, back);
        }
        assert!(ExperimentConfig::preset("nope").is_err());
    }

    #[test]
    fn overrides_apply() {
        let cfg = ExperimentConfig::desk();
        let out = apply_overrides(
            &cfg,
            &[
                ("estimator".into(), "sds_ddpm".into()),
                ("cfg_scale".into(), "100".into()),
                ("run.seed".into(), "7".into()),
            ],
        )
        .unwrap();
        assert_eq!(out.estimator.kind, EstimatorKind::SdsDdpm);
        assert_eq!(out.prompts["right"].cfg_scale, 100.0);
        assert_eq!(out.run.seed, 7);
    }

    #[test]
    fn grid_cross_product() {
        let cells = parse_grid("estimator=sds_ddpm,sds_lcm;seed=1,2,3").unwrap();
        assert_eq!(cells.len(), 6);
        assert!(parse_grid("").is_err());
        assert!(parse_grid("novalues=").is_err());
    }

    #[test]
    fn parses_minimal_toml() {
        let text = r#"
prompt = "p"

[target]
dim = 1
components = [{ weight = 1.0, mean = [0.0], cov_scale = 1.0 }]

[prompts.p]
selected = [0]

[schedule]
kind = "linear"
steps = 100
beta_min = 1e-4
beta_max = 0.02

[estimator]
kind = "sds_ddpm"

[plan]
n_total = 10
cut_iter = 2
t_cut = 35
geo_max = 98
app_min = 2
noise = { policy = "fresh" }

[scene]
particles = 1
init = { kind = "point", center = [0.0] }

[optimizer]
method = "sgd"
learning_rate = 0.1

[cameras]
kind = "identity"

[run]
seed = 1
"#;
        let cfg = parse(text).unwrap();
        assert_eq!(cfg.estimator.fidelity, Fidelity::KStep(1));
        assert_eq!(cfg.cameras.count, 8);
        assert_eq!(cfg.run.variance_window, 50);
        assert_eq!(cfg.prompts["p"].cfg_scale, 7.5);
    }
}
