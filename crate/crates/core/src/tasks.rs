//! Synthetic regression tasks generated by a fixed random teacher network.
//!
//! The pretrain task samples standard-normal inputs; fine-tune and
//! evaluation tasks shift the input mean and optionally transform the
//! teacher's outputs, which creates the tension between adapting to the new
//! task and retaining the pretrain behaviour.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::rng::{Domain, SplitMix64};

pub const TEACHER_WIDTH: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InputShift {
    Scalar(f64),
    PerCoordinate(Vec<f64>),
}

impl Default for InputShift {
    fn default() -> Self {
        InputShift::Scalar(0.0)
    }
}

impl InputShift {
    fn at(&self, i: usize) -> f64 {
        match self {
            InputShift::Scalar(s) => *s,
            InputShift::PerCoordinate(v) => v[i],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", deny_unknown_fields)]
pub enum TargetTransform {
    #[default]
    Identity,
    /// `y ↦ a·y + b`.
    Affine { a: f64, b: f64 },
}

impl TargetTransform {
    #[inline]
    fn apply(self, y: f64) -> f64 {
        match self {
            TargetTransform::Identity => y,
            TargetTransform::Affine { a, b } => a * y + b,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Shift {
    pub input_mean_shift: InputShift,
    pub target_transform: TargetTransform,
    /// Evaluate the teacher on the shifted inputs (`true`) or on the
    /// underlying unshifted draws (`false`, a pure covariate offset).
    pub teacher_sees_shift: bool,
}

impl Default for Shift {
    fn default() -> Self {
        Self {
            input_mean_shift: InputShift::default(),
            target_transform: TargetTransform::default(),
            teacher_sees_shift: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub teacher_seed: u64,
    #[serde(default)]
    pub shift: Shift,
    #[serde(default)]
    pub noise_std: f64,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.input_dim > 0 && self.output_dim > 0, Config, "task dimensions must be positive");
        ensure!(self.noise_std.is_finite() && self.noise_std >= 0.0, Config, "noise_std must be >= 0");
        if let InputShift::PerCoordinate(v) = &self.shift.input_mean_shift {
            ensure!(
                v.len() == self.input_dim,
                Config,
                "input_mean_shift has {} entries, expected {}",
                v.len(),
                self.input_dim
            );
        }
        Ok(())
    }
}

/// Fixed two-layer tanh network that defines the ground-truth mapping.
#[derive(Debug, Clone)]
pub struct Teacher {
    w1: Array2<f64>,
    b1: Array1<f64>,
    w2: Array2<f64>,
}

impl Teacher {
    pub fn new(input_dim: usize, output_dim: usize, seed: u64) -> Self {
        let mut rng = SplitMix64::derive(seed, Domain::Teacher, 0);
        let s1 = 1.0 / (input_dim as f64).sqrt();
        let w1 = Array2::from_shape_fn((TEACHER_WIDTH, input_dim), |_| s1 * rng.standard_normal());
        let b1 = Array1::from_shape_fn(TEACHER_WIDTH, |_| 0.5 * rng.standard_normal());
        let s2 = 1.0 / (TEACHER_WIDTH as f64).sqrt();
        let w2 = Array2::from_shape_fn((output_dim, TEACHER_WIDTH), |_| s2 * rng.standard_normal());
        Self { w1, b1, w2 }
    }

    pub fn eval(&self, inputs: &Array2<f64>) -> Array2<f64> {
        let mut h = inputs.dot(&self.w1.t());
        h += &self.b1;
        h.mapv_inplace(f64::tanh);
        h.dot(&self.w2.t())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Array2<f64>,
    pub targets: Array2<f64>,
    pub seed: u64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.nrows() == 0
    }

    /// Rows `0..n` as a new dataset.
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            inputs: self.inputs.slice(ndarray::s![..n, ..]).to_owned(),
            targets: self.targets.slice(ndarray::s![..n, ..]).to_owned(),
            seed: self.seed,
        }
    }

    /// Gather the given rows.
    pub fn select(&self, rows: &[usize]) -> (Array2<f64>, Array2<f64>) {
        (
            self.inputs.select(ndarray::Axis(0), rows),
            self.targets.select(ndarray::Axis(0), rows),
        )
    }

    /// Delimited text: header `x0,…,y0,…` then one sample per line.
    pub fn to_csv(&self) -> String {
        let (d_in, d_out) = (self.inputs.ncols(), self.targets.ncols());
        let mut out = String::new();
        let header: Vec<String> = (0..d_in)
            .map(|i| format!("x{i}"))
            .chain((0..d_out).map(|j| format!("y{j}")))
            .collect();
        out.push_str(&header.join(","));
        out.push('\n');
        for (x, y) in self.inputs.rows().into_iter().zip(self.targets.rows()) {
            let mut first = true;
            for v in x.iter().chain(y.iter()) {
                if !first {
                    out.push(',');
                }
                first = false;
                write!(out, "{v}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Draw `n` samples of `spec`; fully determined by `(spec, seed, n)`.
pub fn generate(spec: &TaskSpec, seed: u64, n: usize) -> Result<Dataset> {
    spec.validate()?;
    ensure!(n > 0, Config, "dataset size must be positive");
    let mut rng = SplitMix64::derive(seed, Domain::DataInputs, 0);
    let raw = Array2::from_shape_fn((n, spec.input_dim), |_| rng.standard_normal());
    let mut inputs = raw.clone();
    for mut row in inputs.rows_mut() {
        for (i, x) in row.iter_mut().enumerate() {
            *x += spec.shift.input_mean_shift.at(i);
        }
    }
    let teacher = Teacher::new(spec.input_dim, spec.output_dim, spec.teacher_seed);
    let mut targets = teacher.eval(if spec.shift.teacher_sees_shift { &inputs } else { &raw });
    let transform = spec.shift.target_transform;
    targets.mapv_inplace(|y| transform.apply(y));
    if spec.noise_std > 0.0 {
        let mut noise = SplitMix64::derive(seed, Domain::DataNoise, 0);
        targets.mapv_inplace(|y| y + spec.noise_std * noise.standard_normal());
    }
    Ok(Dataset { inputs, targets, seed })
}

/// The task family used by one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskTriple {
    pub pretrain: TaskSpec,
    pub finetune: TaskSpec,
    /// Retention probe: the pretrain distribution itself.
    pub retention: TaskSpec,
    /// Held-out input shift of the fine-tune task.
    pub shift: TaskSpec,
}

pub const FINETUNE_INPUT_SHIFT: f64 = 1.5;
pub const FINETUNE_TRANSFORM: TargetTransform = TargetTransform::Affine { a: 1.2, b: 0.3 };
pub const HELD_OUT_INPUT_SHIFT: f64 = -1.0;

pub fn make_task_triple(base_seed: u64, input_dim: usize, output_dim: usize, noise_std: f64, teacher_sees_shift: bool) -> TaskTriple {
    let pretrain = TaskSpec {
        input_dim,
        output_dim,
        teacher_seed: base_seed,
        shift: Shift::default(),
        noise_std,
    };
    let finetune = TaskSpec {
        shift: Shift {
            input_mean_shift: InputShift::Scalar(FINETUNE_INPUT_SHIFT),
            target_transform: FINETUNE_TRANSFORM,
            teacher_sees_shift,
        },
        ..pretrain.clone()
    };
    let shift = TaskSpec {
        shift: Shift {
            input_mean_shift: InputShift::Scalar(HELD_OUT_INPUT_SHIFT),
            target_transform: FINETUNE_TRANSFORM,
            teacher_sees_shift,
        },
        ..pretrain.clone()
    };
    TaskTriple {
        retention: pretrain.clone(),
        pretrain,
        finetune,
        shift,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> TaskSpec {
        make_task_triple(3, 4, 2, 0.0, true).pretrain
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&spec(), 5, 100).unwrap();
        let b = generate(&spec(), 5, 100).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_csv(), b.to_csv());
        assert_ne!(a.inputs, generate(&spec(), 6, 100).unwrap().inputs);
    }

    #[test]
    fn noiseless_targets_are_teacher_outputs() {
        let d = generate(&spec(), 1, 50).unwrap();
        let teacher = Teacher::new(4, 2, 3);
        assert_eq!(d.targets, teacher.eval(&d.inputs));
    }

    #[test]
    fn affine_transform_applied() {
        let mut s = spec();
        s.shift.target_transform = TargetTransform::Affine { a: 2.0, b: -1.0 };
        let d = generate(&s, 1, 20).unwrap();
        let raw = Teacher::new(4, 2, 3).eval(&d.inputs);
        for (t, r) in d.targets.iter().zip(raw.iter()) {
            assert!((t - (2.0 * r - 1.0)).abs() < 1e-15);
        }
    }

    #[test]
    fn input_shift_shows_in_sample_mean() {
        let mut s = spec();
        s.shift.input_mean_shift = InputShift::Scalar(2.0);
        let n = 10_000;
        let d = generate(&s, 9, n).unwrap();
        let tol = 3.0 / (n as f64).sqrt();
        for col in d.inputs.columns() {
            let mean = col.sum() / n as f64;
            assert!((mean - 2.0).abs() < tol, "mean {mean}");
            let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
            assert!((var - 1.0).abs() < 0.05, "var {var}");
        }
    }

    #[test]
    fn per_coordinate_shift_checked() {
        let mut s = spec();
        s.shift.input_mean_shift = InputShift::PerCoordinate(vec![1.0, 2.0]);
        assert!(matches!(generate(&s, 0, 10), Err(Error::Config(_))));
        s.shift.input_mean_shift = InputShift::PerCoordinate(vec![0.0, 0.0, 0.0, 5.0]);
        let d = generate(&s, 0, 4000).unwrap();
        let mean3 = d.inputs.column(3).sum() / 4000.0;
        assert!((mean3 - 5.0).abs() < 0.1);
    }

    #[test]
    fn triple_construction() {
        let t = make_task_triple(7, 8, 4, 0.01, true);
        assert_eq!(t.pretrain.teacher_seed, t.finetune.teacher_seed);
        assert_eq!(t.retention, t.pretrain);
        assert_eq!(t.pretrain.shift, Shift::default());
        assert_eq!(t.finetune.shift.input_mean_shift, InputShift::Scalar(1.5));
        assert_eq!(t.finetune.shift.target_transform, TargetTransform::Affine { a: 1.2, b: 0.3 });
        assert_eq!(t.shift.shift.input_mean_shift, InputShift::Scalar(-1.0));
    }

    #[test]
    fn csv_layout() {
        let d = generate(&spec(), 0, 3).unwrap();
        let csv = d.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], "x0,x1,x2,x3,y0,y1");
        let first: Vec<f64> = lines[1].split(',').map(|s| s.parse().unwrap()).collect();
        assert_eq!(first[0], d.inputs[[0, 0]]);
        assert_eq!(first[5], d.targets[[0, 1]]);
    }

    #[test]
    fn zero_size_rejected() {
        assert!(generate(&spec(), 0, 0).is_err());
    }
}
