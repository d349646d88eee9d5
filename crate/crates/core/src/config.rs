//! Experiment configuration with every default materialized.
//!
//! The same structure is read from the CLI's TOML files and echoed back as a
//! manifest next to every output, so unknown keys are rejected everywhere.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::model::ModelSpec;
use crate::optim::{AdamHyper, ProximityMode, ProximityPolicy, Schedule};
use crate::params::FreezeMask;
use crate::tasks::{make_task_triple, TaskTriple};

/// Reference `λ_max` values for several model/benchmark pairs, useful as
/// starting points for sweeps.
pub const LAMBDA_MAX_PRESETS: [(&str, f64); 10] = [
    ("libero/minivla-vq", 0.5),
    ("libero/minivla-oft", 3.2),
    ("libero/vla-adapter", 0.5),
    ("libero/openvla-oft", 1.0),
    ("calvin/minivla-oft", 2.5),
    ("calvin/openvla-oft", 1.5),
    ("simplerenv/minivla-vq", 0.5),
    ("simplerenv/minivla-oft", 3.0),
    ("simplerenv/openvla-oft", 0.8),
    ("franka/minivla-oft", 1.5),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    /// Seed of the teacher network shared by every task of the triple.
    pub base_seed: u64,
    pub noise_std: f64,
    /// Samples per training split.
    pub n: usize,
    /// Samples per evaluation set.
    pub eval_n: usize,
    /// Whether fine-tune targets come from the teacher on shifted inputs.
    pub teacher_sees_shift: bool,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            base_seed: 0,
            noise_std: 0.01,
            n: 8192,
            eval_n: 2048,
            teacher_sees_shift: true,
        }
    }
}

/// Proximity policy plus Adam hyperparameters, as flat config keys.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub mode: ProximityMode,
    pub lambda_reg: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub lambda_max: f64,
    pub schedule: Schedule,
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self::from_parts(ProximityPolicy::default(), AdamHyper::default())
    }
}

impl PolicyConfig {
    pub fn from_parts(p: ProximityPolicy, a: AdamHyper) -> Self {
        Self {
            mode: p.mode,
            lambda_reg: p.lambda_reg,
            gamma: p.gamma,
            lambda: p.lambda,
            lambda_max: p.lambda_max,
            schedule: p.schedule,
            alpha: a.alpha,
            beta1: a.beta1,
            beta2: a.beta2,
            epsilon: a.epsilon,
            weight_decay: a.weight_decay,
        }
    }

    pub fn proximity(&self) -> ProximityPolicy {
        ProximityPolicy {
            mode: self.mode,
            lambda_reg: self.lambda_reg,
            gamma: self.gamma,
            lambda: self.lambda,
            lambda_max: self.lambda_max,
            schedule: self.schedule,
        }
    }

    pub fn adam(&self) -> AdamHyper {
        AdamHyper {
            alpha: self.alpha,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            weight_decay: self.weight_decay,
        }
    }

    pub fn set_proximity(&mut self, p: ProximityPolicy) {
        *self = Self::from_parts(p, self.adam());
    }
}

/// A module referenced by 1-based index or by name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModuleRef {
    Index(usize),
    Name(String),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FreezeConfig {
    pub modules: Vec<ModuleRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub pretrain_steps: usize,
    pub finetune_steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub log_every: usize,
    /// Adam learning rate of the (unregularized) pretraining phase.
    pub pretrain_alpha: f64,
    /// Stop fine-tuning at the first logged step whose train loss is at or below this.
    pub early_stop_loss: Option<f64>,
    /// Output directory, relative to the config file.
    pub out_dir: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            pretrain_steps: 3000,
            finetune_steps: 2000,
            batch_size: 64,
            seed: 0,
            log_every: 100,
            pretrain_alpha: 1e-3,
            early_stop_loss: None,
            out_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FreezeVariant {
    pub label: String,
    pub modules: Vec<ModuleRef>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    /// Scheduler grid: every schedule crossed with every λ_max value.
    pub schedules: Vec<Schedule>,
    pub lambda_max_values: Vec<f64>,
    pub freeze: Vec<FreezeVariant>,
}

impl SweepConfig {
    pub fn scheduler_grid(&self) -> Vec<(Schedule, f64)> {
        self.schedules
            .iter()
            .flat_map(|&s| self.lambda_max_values.iter().map(move |&v| (s, v)))
            .collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub task: TaskConfig,
    pub policy: PolicyConfig,
    pub freeze: FreezeConfig,
    pub run: RunConfig,
    pub sweep: SweepConfig,
}

impl ExperimentConfig {
    /// Default desk-scale experiment with every seed set to `seed`.
    pub fn desk_scale(seed: u64) -> Self {
        Self::default().with_seed(seed)
    }

    /// Set the run, model-init and teacher seeds at once.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.run.seed = seed;
        self.model.init_seed = seed;
        self.task.base_seed = seed;
        self
    }

    pub fn with_policy(mut self, policy: ProximityPolicy) -> Self {
        self.policy.set_proximity(policy);
        self
    }

    pub fn with_freeze(mut self, modules: &[usize]) -> Self {
        self.freeze.modules = modules.iter().map(|&k| ModuleRef::Index(k)).collect();
        self
    }

    pub fn tasks(&self) -> TaskTriple {
        make_task_triple(
            self.task.base_seed,
            self.model.input_dim,
            self.model.output_dim,
            self.task.noise_std,
            self.task.teacher_sees_shift,
        )
    }

    pub fn resolve_modules(&self, refs: &[ModuleRef]) -> Result<FreezeMask> {
        let count = self.model.modules.len();
        refs.iter()
            .map(|r| match r {
                ModuleRef::Index(k) if (1..=count).contains(k) => Ok(*k),
                ModuleRef::Index(k) => Err(Error::Config(format!("freeze index {k} outside 1..={count}"))),
                ModuleRef::Name(name) => self
                    .model
                    .modules
                    .iter()
                    .position(|m| &m.name == name)
                    .map(|i| i + 1)
                    .ok_or_else(|| Error::Config(format!("unknown module `{name}` in freeze list"))),
            })
            .collect()
    }

    pub fn freeze_mask(&self) -> Result<FreezeMask> {
        self.resolve_modules(&self.freeze.modules)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.policy.proximity().validate()?;
        self.policy.adam().validate()?;
        self.freeze_mask()?;
        let r = &self.run;
        ensure!(r.batch_size > 0, Config, "batch_size must be positive");
        ensure!(r.log_every > 0, Config, "log_every must be positive");
        ensure!(
            r.finetune_steps == 0 || r.log_every <= r.finetune_steps,
            Config,
            "log_every ({}) exceeds finetune_steps ({})",
            r.log_every,
            r.finetune_steps
        );
        ensure!(r.pretrain_alpha.is_finite() && r.pretrain_alpha > 0.0, Config, "pretrain_alpha must be > 0");
        ensure!(self.task.n > 0 && self.task.eval_n > 0, Config, "task.n and task.eval_n must be positive");
        ensure!(
            self.task.noise_std.is_finite() && self.task.noise_std >= 0.0,
            Config,
            "noise_std must be >= 0"
        );
        for v in &self.sweep.lambda_max_values {
            ensure!(v.is_finite() && *v >= 0.0, Config, "sweep lambda_max value {v} must be >= 0");
        }
        for f in &self.sweep.freeze {
            self.resolve_modules(&f.modules)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_desk_scale() {
        let c = ExperimentConfig::default();
        assert_eq!(c.run.pretrain_steps, 3000);
        assert_eq!(c.run.finetune_steps, 2000);
        assert_eq!(c.run.batch_size, 64);
        assert_eq!(c.task.n, 8192);
        assert_eq!((c.policy.beta1, c.policy.beta2, c.policy.epsilon), (0.9, 0.999, 1e-8));
        c.validate().unwrap();
    }

    #[test]
    fn module_refs_resolve() {
        let c = ExperimentConfig::default();
        let mask = c
            .resolve_modules(&[ModuleRef::Name("bridge".into()), ModuleRef::Index(1)])
            .unwrap();
        assert_eq!(mask.iter().collect::<Vec<_>>(), vec![1, 3]);
        assert!(c.resolve_modules(&[ModuleRef::Name("nope".into())]).is_err());
        assert!(c.resolve_modules(&[ModuleRef::Index(7)]).is_err());
    }

    #[test]
    fn log_every_bounded_by_steps() {
        let mut c = ExperimentConfig::default();
        c.run.log_every = 5000;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn scheduler_grid_is_a_product() {
        let s = SweepConfig {
            schedules: vec![Schedule::Constant, Schedule::Cosine, Schedule::Linear],
            lambda_max_values: vec![0.5, 2.0, 3.0],
            freeze: vec![],
        };
        let grid = s.scheduler_grid();
        assert_eq!(grid.len(), 9);
        assert_eq!(grid[0], (Schedule::Constant, 0.5));
        assert_eq!(grid[8], (Schedule::Linear, 3.0));
    }

    #[test]
    fn presets_cover_reported_values() {
        let mut values: Vec<f64> = LAMBDA_MAX_PRESETS.iter().map(|p| p.1).collect();
        values.sort_by(f64::total_cmp);
        values.dedup();
        assert_eq!(values, vec![0.5, 0.8, 1.0, 1.5, 2.5, 3.0, 3.2]);
    }
}
