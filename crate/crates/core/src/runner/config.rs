//! Experiment configuration and built-in scenario presets.
//!
//! The preset numbers are synthetic. Five draft models range from fast
//! with low agreement to slow with high agreement, and each workload class
//! prefers a different one, so no single draft model is best for a mix.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bandit::BanditConfig;
use crate::error::{Error, Result};
use crate::model::{
    DifficultyClass, LlmProfile, PromptLenDist, SsmProfile, TargetLenDist, WorkloadSpec,
};
use crate::pipeline::TuningConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    Lbss,
    EpsilonGreedy,
    Greedy,
    /// Every lane runs copies of one SSM.
    Homogeneous,
}

impl PolicyKind {
    pub fn label(&self) -> &'static str {
        match self {
            PolicyKind::Lbss => "lbss",
            PolicyKind::EpsilonGreedy => "epsilon-greedy",
            PolicyKind::Greedy => "greedy",
            PolicyKind::Homogeneous => "homogeneous",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    pub epsilon: f64,
    /// SSM replicated by the homogeneous policy; unset picks the best one.
    pub homogeneous_ssm: Option<usize>,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            kind: PolicyKind::Lbss,
            epsilon: 0.2,
            homogeneous_ssm: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PackerConfig {
    /// Split long requests across tensor rows during verification.
    pub decomposition: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PipelineMode {
    #[default]
    Serial,
    Pipelined,
    Tuned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub mode: PipelineMode,
    /// Micro-batches per SSM in `pipelined` mode.
    pub micro_batches: usize,
    pub b0: usize,
    pub max_b: usize,
    pub threshold: f64,
    pub probe_slots: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let t = TuningConfig::default();
        Self {
            mode: PipelineMode::Serial,
            micro_batches: 2,
            b0: t.b0,
            max_b: t.max_b,
            threshold: t.threshold,
            probe_slots: t.probe_slots,
        }
    }
}

impl PipelineConfig {
    pub fn tuning(&self) -> TuningConfig {
        TuningConfig {
            b0: self.b0,
            max_b: self.max_b,
            threshold: self.threshold,
            probe_slots: self.probe_slots,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceFormat {
    #[default]
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Also write the event trace of every repetition.
    pub traces: bool,
    pub trace_format: TraceFormat,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("results"),
            traces: false,
            trace_format: TraceFormat::Csv,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default = "one")]
    pub repetitions: usize,
    pub workload: WorkloadSpec,
    #[serde(default)]
    pub bandit: BanditConfig,
    #[serde(default)]
    pub policy: PolicyConfig,
    #[serde(default)]
    pub packer: PackerConfig,
    #[serde(default)]
    pub pipeline: PipelineConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

fn one() -> usize {
    1
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::Config(
                "name must be non-empty without path separators".into(),
            ));
        }
        if self.repetitions == 0 {
            return Err(Error::Config("repetitions must be >= 1".into()));
        }
        self.workload.validate()?;
        self.bandit.validate()?;
        if !(0.0..=1.0).contains(&self.policy.epsilon) {
            return Err(Error::Config("epsilon must lie in [0, 1]".into()));
        }
        if let Some(j) = self.policy.homogeneous_ssm {
            self.workload.ssm(j).map_err(|_| {
                Error::Config(format!("homogeneous_ssm {j} is not a configured ssm"))
            })?;
        }
        if self.pipeline.micro_batches == 0 {
            return Err(Error::Config("micro_batches must be >= 1".into()));
        }
        self.pipeline.tuning().validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self =
            toml::from_str(text).map_err(|e| Error::Config(format!("parse error: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("serialize error: {e}")))
    }

    /// Reads and validates a config file. A missing or unreadable file is an
    /// I/O error, not a config error.
    pub fn load(path: &Path) -> std::io::Result<Result<Self>> {
        let text = std::fs::read_to_string(path)?;
        Ok(Self::from_toml(&text))
    }
}

/// Five draft models, fastest first.
pub fn ssm_family() -> Vec<SsmProfile> {
    [520.0, 300.0, 190.0, 120.0, 90.0]
        .into_iter()
        .enumerate()
        .map(|(id, tokens_per_sec)| SsmProfile {
            id,
            tokens_per_sec,
            batch_capacity: 8,
            batch_slowdown: 0.12,
        })
        .collect()
}

pub fn default_llm() -> LlmProfile {
    LlmProfile {
        fixed_overhead_sec: 0.008,
        per_token_sec: 6e-6,
    }
}

fn class(name: &str, weight: f64, center: [f64; 5]) -> DifficultyClass {
    DifficultyClass {
        name: name.to_string(),
        weight,
        accept_lo: center.iter().map(|c| (c - 0.05f64).max(0.0)).collect(),
        accept_hi: center.iter().map(|c| (c + 0.05f64).min(1.0)).collect(),
    }
}

/// Per-class acceptance centers over the five draft models.
fn chat_class(weight: f64) -> DifficultyClass {
    class("chat", weight, [0.40, 0.85, 0.45, 0.45, 0.50])
}

fn code_class(weight: f64) -> DifficultyClass {
    class("code", weight, [0.30, 0.40, 0.45, 0.88, 0.55])
}

fn instruct_class(weight: f64) -> DifficultyClass {
    class("instruct", weight, [0.35, 0.45, 0.86, 0.45, 0.55])
}

fn workload(n: usize, mix: Vec<DifficultyClass>, target: TargetLenDist) -> WorkloadSpec {
    WorkloadSpec {
        num_requests: n,
        ssm_profiles: ssm_family(),
        llm: default_llm(),
        difficulty_mix: mix,
        window: 4,
        seed: 0,
        bonus_token: true,
        prompt_len: PromptLenDist {
            median: 96.0,
            sigma: 0.9,
            min: 8,
            max: 2048,
        },
        target_len: target,
    }
}

pub const PRESETS: [&str; 6] = ["alpaca", "cp", "cip", "mix", "hetero", "skewed"];

/// Built-in scenario by name.
pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let third = 1.0 / 3.0;
    let serving = TargetLenDist { min: 64, max: 512 };
    let (workload, bandit, pipeline) = match name {
        "alpaca" => (
            workload(96, vec![chat_class(1.0)], serving),
            BanditConfig::default(),
            PipelineConfig::default(),
        ),
        "cp" => (
            workload(96, vec![code_class(1.0)], serving),
            BanditConfig::default(),
            PipelineConfig::default(),
        ),
        "cip" => (
            workload(96, vec![instruct_class(1.0)], serving),
            BanditConfig::default(),
            PipelineConfig::default(),
        ),
        "mix" => (
            workload(
                40,
                vec![
                    chat_class(third),
                    code_class(third),
                    instruct_class(1.0 - 2.0 * third),
                ],
                TargetLenDist {
                    min: 1024,
                    max: 2048,
                },
            ),
            BanditConfig::default(),
            PipelineConfig {
                mode: PipelineMode::Tuned,
                ..PipelineConfig::default()
            },
        ),
        // no request finishes within the horizon, so the goodput matrix
        // stays fixed and regret is well defined
        "hetero" => {
            let mut w = workload(
                32,
                vec![
                    chat_class(third),
                    code_class(third),
                    instruct_class(1.0 - 2.0 * third),
                ],
                TargetLenDist {
                    min: 50_000,
                    max: 50_000,
                },
            );
            // keep verification near its fixed cost as contexts grow
            w.llm.per_token_sec = 1e-7;
            (w, BanditConfig::default(), PipelineConfig::default())
        }
        // load skewed toward the slow models
        "skewed" => {
            let mut w = workload(
                40,
                vec![code_class(0.5), instruct_class(0.5)],
                TargetLenDist {
                    min: 50_000,
                    max: 50_000,
                },
            );
            // long prompts dominate the context so timing is stable over
            // the horizon
            w.prompt_len = PromptLenDist {
                median: 1200.0,
                sigma: 0.25,
                min: 256,
                max: 4096,
            };
            for ssm in &mut w.ssm_profiles {
                ssm.batch_slowdown = 0.5;
            }
            w.llm.fixed_overhead_sec = 0.004;
            w.llm.per_token_sec = 2e-6;
            (
                w,
                BanditConfig {
                    max_slots: 200,
                    ..BanditConfig::default()
                },
                PipelineConfig {
                    mode: PipelineMode::Tuned,
                    ..PipelineConfig::default()
                },
            )
        }
        other => {
            return Err(Error::Config(format!(
                "unknown preset {other:?}; known: {}",
                PRESETS.join(", ")
            )))
        }
    };
    Ok(ExperimentConfig {
        name: name.to_string(),
        repetitions: 10,
        workload,
        bandit,
        policy: PolicyConfig::default(),
        packer: PackerConfig {
            decomposition: true,
        },
        pipeline,
        output: OutputConfig::default(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for name in PRESETS {
            let p = preset(name).unwrap();
            p.validate().unwrap();
            let back = ExperimentConfig::from_toml(&p.to_toml().unwrap()).unwrap();
            assert_eq!(back, p, "{name}");
        }
    }

    #[test]
    fn unknown_preset_is_config_error() {
        assert!(matches!(preset("nope"), Err(Error::Config(_))));
    }

    #[test]
    fn zero_repetitions_rejected() {
        let mut p = preset("mix").unwrap();
        p.repetitions = 0;
        assert!(p.validate().is_err());
    }

    #[test]
    fn minimal_toml_uses_defaults() {
        let mut text = String::from("name = \"tiny\"\n");
        let w = toml::to_string(&preset("cp").unwrap().workload).unwrap();
        text.push_str("[workload]\n");
        text.push_str(
            &w.replace("[ssm_profiles", "[workload.ssm_profiles")
                .replace("[llm]", "[workload.llm]")
                .replace("[difficulty_mix", "[workload.difficulty_mix")
                .replace("[prompt_len]", "[workload.prompt_len]")
                .replace("[target_len]", "[workload.target_len]"),
        );
        let c = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(c.repetitions, 1);
        assert_eq!(c.bandit, BanditConfig::default());
        assert_eq!(c.pipeline.mode, PipelineMode::Serial);
    }
}
