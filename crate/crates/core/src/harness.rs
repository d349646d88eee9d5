//! Pretrain → snapshot → fine-tune pipelines, freeze ablations and scheduler sweeps.

use ndarray::Array2;
use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::metrics::{ComparisonRow, ComparisonTable, MetricsRecord, MetricsTable};
use crate::model::{loss_mse, mse, Gradients, Network};
use crate::optim::{AdamHyper, ProximalAdam, ProximityPolicy, Schedule, StepReport};
use crate::params::{FreezeMask, ModelParameters};
use crate::rng::{mix64, Domain, SplitMix64};
use crate::tasks::{generate, Dataset};

/// Fixed dataset seeds of one experiment, derived from `run.seed`.
#[derive(Debug, Clone, Copy)]
enum Split {
    Pretrain = 0,
    Finetune = 1,
    Retention = 2,
    Shift = 3,
}

fn split_seed(seed: u64, split: Split) -> u64 {
    mix64(seed.wrapping_mul(4).wrapping_add(split as u64 + 1))
}

/// Minibatch indices for every step of one training phase.
struct BatchSampler {
    rng: SplitMix64,
    rows: usize,
    batch: Vec<usize>,
}

impl BatchSampler {
    fn new(seed: u64, phase: u64, rows: usize, batch_size: usize) -> Self {
        Self {
            rng: SplitMix64::derive(seed, Domain::Batches, phase),
            rows,
            batch: vec![0; batch_size],
        }
    }

    fn next(&mut self) -> &[usize] {
        for slot in &mut self.batch {
            *slot = self.rng.below(self.rows);
        }
        &self.batch
    }
}

/// One minibatch loss and gradient.
fn loss_and_grads(net: &Network, params: &ModelParameters, x: &Array2<f64>, y: &Array2<f64>) -> Result<(f64, Gradients)> {
    let (out, cache) = net.forward(params, x)?;
    let (loss, dl) = loss_mse(&out, y)?;
    let grads = net.backward(params, &cache, &dl)?;
    Ok((loss, grads))
}

pub fn evaluate(net: &Network, params: &ModelParameters, data: &Dataset) -> Result<f64> {
    mse(&net.predict(params, &data.inputs)?, &data.targets)
}

/// Train with plain Adam on the pretrain task. The snapshot is not taken.
pub fn run_pretrain(config: &ExperimentConfig) -> Result<ModelParameters> {
    config.validate()?;
    let net = Network::new(config.model.clone())?;
    let mut params = net.build();
    let steps = config.run.pretrain_steps;
    if steps == 0 {
        return Ok(params);
    }
    let tasks = config.tasks();
    let data = generate(&tasks.pretrain, split_seed(config.run.seed, Split::Pretrain), config.task.n)?;
    let mut opt = ProximalAdam::new(
        ProximityPolicy::none(),
        AdamHyper::with_alpha(config.run.pretrain_alpha),
        &params,
    )?;
    let mut sampler = BatchSampler::new(config.run.seed, 0, data.len(), config.run.batch_size);
    for step in 1..=steps {
        let (x, y) = data.select(sampler.next());
        let (loss, grads) = loss_and_grads(&net, &params, &x, &y)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        opt.step(&mut params, &grads)?;
    }
    Ok(params)
}

/// Pretrain-phase loss on the training split, for diagnostics.
pub fn pretrain_loss(config: &ExperimentConfig, params: &ModelParameters) -> Result<f64> {
    let net = Network::new(config.model.clone())?;
    let data = generate(&config.tasks().pretrain, split_seed(config.run.seed, Split::Pretrain), config.task.n)?;
    evaluate(&net, params, &data)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FinetuneStatus {
    Completed,
    /// Train loss reached `run.early_stop_loss` at this step.
    EarlyStopped { step: usize },
    /// Non-finite minibatch loss; the records hold everything logged before.
    Diverged { step: usize, loss: f64 },
}

#[derive(Debug, Clone)]
pub struct FinetuneRun {
    pub model: ModelParameters,
    pub metrics: MetricsTable,
    pub status: FinetuneStatus,
}

impl FinetuneRun {
    pub fn final_record(&self) -> &MetricsRecord {
        self.metrics.records.last().expect("a fine-tune run always logs step 0")
    }

    /// Converts a diverged run into an error.
    pub fn into_result(self) -> Result<Self> {
        match self.status {
            FinetuneStatus::Diverged { step, loss } => Err(Error::Divergence { step, loss }),
            _ => Ok(self),
        }
    }
}

struct EvalSets {
    train: Dataset,
    retention: Dataset,
    shift: Dataset,
}

/// Fine-tune a pretrained model under `config.policy` and `config.freeze`.
///
/// Takes the snapshot first, then logs a record at step 0, every
/// `log_every` steps, and at the last step.
pub fn run_finetune(mut params: ModelParameters, config: &ExperimentConfig) -> Result<FinetuneRun> {
    config.validate()?;
    let net = Network::new(config.model.clone())?;
    net.build().check_layout(&params)?;
    params.snapshot_pretrained();
    params.apply_freeze_mask(&config.freeze_mask()?)?;

    let run = &config.run;
    let tasks = config.tasks();
    let data = generate(&tasks.finetune, split_seed(run.seed, Split::Finetune), config.task.n)?;
    let eval = EvalSets {
        train: data.head(config.task.eval_n),
        retention: generate(&tasks.retention, split_seed(run.seed, Split::Retention), config.task.eval_n)?,
        shift: generate(&tasks.shift, split_seed(run.seed, Split::Shift), config.task.eval_n)?,
    };
    let mut opt = ProximalAdam::new(config.policy.proximity(), config.policy.adam(), &params)?;
    let mut sampler = BatchSampler::new(run.seed, 1, data.len(), run.batch_size);

    let record = |params: &ModelParameters, step: usize, report: Option<&StepReport>| -> Result<MetricsRecord> {
        Ok(MetricsRecord {
            step,
            module_deviations: params.module_deviations(),
            projection_rate: report.map_or(0.0, StepReport::projection_rate),
            train_loss: evaluate(&net, params, &eval.train)?,
            retention_loss: evaluate(&net, params, &eval.retention)?,
            shift_loss: evaluate(&net, params, &eval.shift)?,
        })
    };
    let reached = |r: &MetricsRecord| run.early_stop_loss.is_some_and(|limit| r.train_loss <= limit);

    let mut records = vec![record(&params, 0, None)?];
    let mut status = FinetuneStatus::Completed;
    for step in 1..=run.finetune_steps {
        let (x, y) = data.select(sampler.next());
        let (loss, grads) = loss_and_grads(&net, &params, &x, &y)?;
        if !loss.is_finite() {
            status = FinetuneStatus::Diverged { step, loss };
            break;
        }
        let report = opt.step(&mut params, &grads)?;
        if step % run.log_every == 0 || step == run.finetune_steps {
            let r = record(&params, step, Some(&report))?;
            let stop = reached(&r);
            records.push(r);
            if stop {
                status = FinetuneStatus::EarlyStopped { step };
                break;
            }
        }
    }

    Ok(FinetuneRun {
        model: params,
        metrics: MetricsTable {
            module_names: config.model.module_names(),
            records,
        },
        status,
    })
}

fn comparison_row(label: String, run: &FinetuneRun) -> ComparisonRow {
    let last = run.final_record();
    ComparisonRow {
        label,
        steps: last.step,
        train_loss: last.train_loss,
        retention_loss: last.retention_loss,
        shift_loss: last.shift_loss,
        total_deviation: run.model.total_deviation(),
        module_deviations: last.module_deviations.clone(),
    }
}

/// Run every variant from the same pretrained model, `jobs` at a time.
/// Rows come back in variant order regardless of scheduling.
fn run_variants(
    pretrained: &ModelParameters,
    variants: Vec<(String, ExperimentConfig)>,
    jobs: usize,
) -> Result<Vec<(ComparisonRow, FinetuneRun)>> {
    let work = |(label, cfg): &(String, ExperimentConfig)| -> Result<(ComparisonRow, FinetuneRun)> {
        let run = run_finetune(pretrained.clone(), cfg)?.into_result()?;
        Ok((comparison_row(label.clone(), &run), run))
    };
    if jobs <= 1 {
        return variants.iter().map(work).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {jobs} worker threads: {e}")))?;
    pool.install(|| variants.par_iter().map(work).collect())
}

/// The six labelled component-freezing variants over the default six-module stack.
/// Bridge and head are never frozen.
pub fn component_freeze_masks() -> Vec<(String, FreezeMask)> {
    let m = |label: &str, modules: &[usize]| (label.to_string(), modules.iter().copied().collect());
    vec![
        m("freeze_vision", &[1, 2]),
        m("freeze_language", &[4, 5]),
        m("freeze_all", &[1, 2, 4, 5]),
        m("freeze_vision_early", &[1]),
        m("freeze_vision_late", &[2]),
        m("freeze_lang_early", &[4]),
    ]
}

pub fn run_freeze_ablation(
    base: &ExperimentConfig,
    pretrained: &ModelParameters,
    masks: &[(String, FreezeMask)],
    jobs: usize,
) -> Result<ComparisonTable> {
    if masks.is_empty() {
        return Err(Error::Config("freeze ablation needs at least one mask".into()));
    }
    let variants = masks
        .iter()
        .map(|(label, mask)| {
            let mut cfg = base.clone();
            cfg.freeze.modules = mask.iter().map(crate::config::ModuleRef::Index).collect();
            (label.clone(), cfg)
        })
        .collect();
    let rows = run_variants(pretrained, variants, jobs)?;
    Ok(ComparisonTable {
        module_names: base.model.module_names(),
        rows: rows.into_iter().map(|(r, _)| r).collect(),
    })
}

pub fn schedule_label(schedule: Schedule, lambda_max: f64) -> String {
    let kind = match schedule {
        Schedule::Constant => "constant",
        Schedule::Linear => "linear",
        Schedule::Cosine => "cosine",
    };
    format!("{kind}_{lambda_max}")
}

/// One MAPS run per `(schedule, λ_max)` with shared seeds.
pub fn run_scheduler_sweep(
    base: &ExperimentConfig,
    pretrained: &ModelParameters,
    schedules: &[(Schedule, f64)],
    jobs: usize,
) -> Result<ComparisonTable> {
    if schedules.is_empty() {
        return Err(Error::Config("scheduler sweep needs at least one schedule".into()));
    }
    let variants = schedules
        .iter()
        .map(|&(s, v)| (schedule_label(s, v), base.clone().with_policy(ProximityPolicy::maps(s, v))))
        .collect();
    let rows = run_variants(pretrained, variants, jobs)?;
    Ok(ComparisonTable {
        module_names: base.model.module_names(),
        rows: rows.into_iter().map(|(r, _)| r).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelSpec, ModuleSpec};

    /// Small, fast configuration for unit tests.
    fn quick(seed: u64) -> ExperimentConfig {
        let mut c = ExperimentConfig::desk_scale(seed);
        c.model = ModelSpec {
            input_dim: 4,
            output_dim: 2,
            modules: vec![
                ModuleSpec::new("a", &[8], false),
                ModuleSpec::new("b", &[8], false),
                ModuleSpec::new("c", &[8], false),
                ModuleSpec::new("head", &[2], true),
            ],
            ..c.model
        };
        c.model.init_seed = seed;
        c.task.n = 256;
        c.task.eval_n = 128;
        c.run.pretrain_steps = 200;
        c.run.finetune_steps = 60;
        c.run.batch_size = 16;
        c.run.log_every = 20;
        c.policy.alpha = 3e-3;
        c
    }

    #[test]
    fn zero_pretrain_steps_returns_fresh_model() {
        let mut c = quick(0);
        c.run.pretrain_steps = 0;
        let p = run_pretrain(&c).unwrap();
        assert_eq!(p, Network::new(c.model.clone()).unwrap().build());
    }

    #[test]
    fn pretrain_is_deterministic_and_learns() {
        let c = quick(1);
        let a = run_pretrain(&c).unwrap();
        let b = run_pretrain(&c).unwrap();
        assert_eq!(a.groups(), b.groups());
        let fresh = Network::new(c.model.clone()).unwrap().build();
        assert!(pretrain_loss(&c, &a).unwrap() < pretrain_loss(&c, &fresh).unwrap());
    }

    #[test]
    fn finetune_logs_expected_steps() {
        let c = quick(2);
        let run = run_finetune(run_pretrain(&c).unwrap(), &c).unwrap();
        let steps: Vec<usize> = run.metrics.records.iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![0, 20, 40, 60]);
        assert_eq!(run.status, FinetuneStatus::Completed);
        assert!(run.metrics.records[0].module_deviations.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn freeze_all_keeps_everything_at_snapshot() {
        let c = quick(3).with_freeze(&[1, 2, 3, 4]);
        let run = run_finetune(run_pretrain(&c).unwrap(), &c).unwrap();
        for r in &run.metrics.records {
            assert!(r.module_deviations.iter().all(|&d| d == 0.0));
            assert_eq!(r.train_loss, run.metrics.records[0].train_loss);
        }
    }

    #[test]
    fn early_stop_triggers() {
        let mut c = quick(4);
        c.run.early_stop_loss = Some(f64::INFINITY);
        let run = run_finetune(run_pretrain(&c).unwrap(), &c).unwrap();
        assert_eq!(run.status, FinetuneStatus::EarlyStopped { step: 20 });
        assert_eq!(run.metrics.records.len(), 2);
    }

    #[test]
    fn layout_mismatch_rejected() {
        let c = quick(5);
        let other = ExperimentConfig::desk_scale(5);
        let p = run_pretrain(&ExperimentConfig {
            run: crate::config::RunConfig {
                pretrain_steps: 0,
                ..other.run.clone()
            },
            ..other
        })
        .unwrap();
        assert!(matches!(run_finetune(p, &c), Err(Error::ArchiveMismatch(_))));
    }

    #[test]
    fn divergence_keeps_partial_metrics() {
        let mut c = quick(6);
        c.policy.alpha = 1e300;
        c.run.finetune_steps = 60;
        let run = run_finetune(run_pretrain(&c).unwrap(), &c).unwrap();
        assert!(matches!(run.status, FinetuneStatus::Diverged { .. }), "{:?}", run.status);
        assert!(!run.metrics.records.is_empty());
        assert!(matches!(run.into_result(), Err(Error::Divergence { .. })));
    }

    #[test]
    fn parallel_sweep_matches_sequential() {
        let c = quick(7);
        let p = run_pretrain(&c).unwrap();
        let grid = [(Schedule::Linear, 1.0), (Schedule::Constant, 2.0)];
        let seq = run_scheduler_sweep(&c, &p, &grid, 1).unwrap();
        let par = run_scheduler_sweep(&c, &p, &grid, 2).unwrap();
        assert_eq!(seq.to_csv(), par.to_csv());
        assert!(run_scheduler_sweep(&c, &p, &[], 1).is_err());
    }

    #[test]
    fn component_masks_are_valid_on_default_stack() {
        let masks = component_freeze_masks();
        assert_eq!(masks.len(), 6);
        for (_, m) in &masks {
            m.validate(6).unwrap();
            assert!(!m.contains(3) && !m.contains(6));
        }
    }
}
