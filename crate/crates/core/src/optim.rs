//! Bias-corrected Adam with proximity regimes toward the pretrained snapshot.
//!
//! Every step first computes the unconstrained Adam proposal θ̃ₜ for a group,
//! then hands it to [`proximal_step`], which decides the final values:
//!
//! | mode   | final values                                                   |
//! |--------|----------------------------------------------------------------|
//! | `none` | θ̃ₜ                                                             |
//! | `l2sp` | θ̃ₜ, with λ_reg·(θ − θ₀) added to the gradient beforehand       |
//! | `tpgm` | θ̃ₜ projected onto the ℓ2 ball of radius γ around θ₀            |
//! | `spd`  | θ̃ₜ − λ·rₜ·(θ̃ₜ − θ₀) when cₜ < 0, otherwise θ̃ₜ                 |
//! | `maps` | as `spd`, with λ replaced by the scheduled per-module λₖ       |
//!
//! cₜ = −gₜᵀ(θₜ₋₁ − θ₀) is evaluated with the current gradient and the
//! pre-step displacement; rₜ = max(0, γₜ − γₜ₋₁)/γₜ is the fractional growth
//! of the radius that the proposal would cause.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::params::{l2_distance, ModelParameters, ParameterGroup};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProximityMode {
    #[default]
    None,
    L2sp,
    Tpgm,
    Spd,
    Maps,
}

/// How λ decays across the module stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Constant,
    #[default]
    Linear,
    Cosine,
}

impl Schedule {
    /// Multiplier in `[0, 1]` applied to λ_max for module `k` of `module_count`.
    pub fn factor(self, k: usize, module_count: usize) -> f64 {
        if module_count == 1 {
            return 1.0;
        }
        let pos = (k - 1) as f64 / (module_count - 1) as f64;
        match self {
            Schedule::Constant => 1.0,
            Schedule::Linear => 1.0 - pos,
            Schedule::Cosine => 0.5 * (1.0 + (PI * pos).cos()),
        }
    }
}

/// Which proximity regime is active and its hyperparameters.
///
/// Only the fields of the active mode are consulted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProximityPolicy {
    pub mode: ProximityMode,
    pub lambda_reg: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub lambda_max: f64,
    pub schedule: Schedule,
}

impl Default for ProximityPolicy {
    fn default() -> Self {
        Self {
            mode: ProximityMode::None,
            lambda_reg: 0.0,
            gamma: 1.0,
            lambda: 0.0,
            lambda_max: 0.0,
            schedule: Schedule::Linear,
        }
    }
}

impl ProximityPolicy {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn l2sp(lambda_reg: f64) -> Self {
        Self {
            mode: ProximityMode::L2sp,
            lambda_reg,
            ..Self::default()
        }
    }

    pub fn tpgm(gamma: f64) -> Self {
        Self {
            mode: ProximityMode::Tpgm,
            gamma,
            ..Self::default()
        }
    }

    pub fn spd(lambda: f64) -> Self {
        Self {
            mode: ProximityMode::Spd,
            lambda,
            ..Self::default()
        }
    }

    pub fn maps(schedule: Schedule, lambda_max: f64) -> Self {
        Self {
            mode: ProximityMode::Maps,
            lambda_max,
            schedule,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |x: f64| x.is_finite() && x >= 0.0;
        match self.mode {
            ProximityMode::None => {}
            ProximityMode::L2sp => ensure!(finite_nonneg(self.lambda_reg), Config, "lambda_reg must be >= 0, got {}", self.lambda_reg),
            ProximityMode::Tpgm => ensure!(self.gamma.is_finite() && self.gamma > 0.0, Config, "gamma must be > 0, got {}", self.gamma),
            ProximityMode::Spd => ensure!(finite_nonneg(self.lambda), Config, "lambda must be >= 0, got {}", self.lambda),
            ProximityMode::Maps => ensure!(finite_nonneg(self.lambda_max), Config, "lambda_max must be >= 0, got {}", self.lambda_max),
        }
        Ok(())
    }

    /// SPD and MAPS replace conventional weight decay.
    pub fn allows_weight_decay(&self) -> bool {
        !matches!(self.mode, ProximityMode::Spd | ProximityMode::Maps)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamHyper {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Decoupled weight decay; ignored under SPD and MAPS.
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            alpha: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamHyper {
    pub fn with_alpha(alpha: f64) -> Self {
        Self {
            alpha,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.alpha.is_finite() && self.alpha > 0.0, Config, "alpha must be > 0, got {}", self.alpha);
        ensure!((0.0..1.0).contains(&self.beta1), Config, "beta1 must be in [0, 1), got {}", self.beta1);
        ensure!((0.0..1.0).contains(&self.beta2), Config, "beta2 must be in [0, 1), got {}", self.beta2);
        ensure!(self.epsilon.is_finite() && self.epsilon > 0.0, Config, "epsilon must be > 0, got {}", self.epsilon);
        ensure!(self.weight_decay.is_finite() && self.weight_decay >= 0.0, Config, "weight_decay must be >= 0, got {}", self.weight_decay);
        Ok(())
    }
}

/// First and second moment estimates of one group.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    pub fn zeros(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub hyper: AdamHyper,
    t: u64,
    moments: Vec<Moments>,
}

impl AdamState {
    pub fn new(hyper: AdamHyper, model: &ModelParameters) -> Self {
        Self {
            hyper,
            t: 0,
            moments: model.groups().iter().map(|g| Moments::zeros(g.len())).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn moments(&self, group: usize) -> &Moments {
        &self.moments[group]
    }
}

/// Unconstrained Adam proposal θ̃ₜ = θₜ₋₁ − α·m̂ₜ/(√v̂ₜ + ε).
///
/// `t` is the already-incremented step count. Updates `moments` in place and
/// leaves the group untouched.
pub fn adam_propose(
    group: &ParameterGroup,
    grad: &[f64],
    moments: &mut Moments,
    hyper: &AdamHyper,
    t: u64,
    decoupled_decay: bool,
) -> Result<Vec<f64>> {
    ensure!(
        grad.len() == group.len() && moments.m.len() == group.len(),
        Contract,
        "group `{}` has {} values but gradient has {} and moments {}",
        group.name(),
        group.len(),
        grad.len(),
        moments.m.len()
    );
    ensure!(t >= 1, Contract, "step count must be incremented before proposing");
    let AdamHyper {
        alpha,
        beta1,
        beta2,
        epsilon,
        weight_decay,
    } = *hyper;
    let bc1 = 1.0 - beta1.powf(t as f64);
    let bc2 = 1.0 - beta2.powf(t as f64);
    let decay = decoupled_decay && weight_decay != 0.0;

    let mut proposed = Vec::with_capacity(group.len());
    for (((&theta, &g), m), v) in group
        .values()
        .iter()
        .zip(grad)
        .zip(moments.m.iter_mut())
        .zip(moments.v.iter_mut())
    {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        let mut next = theta - alpha * m_hat / (v_hat.sqrt() + epsilon);
        if decay {
            next -= alpha * weight_decay * theta;
        }
        proposed.push(next);
    }
    Ok(proposed)
}

/// Gradient of (λ_reg/2)·‖θ − θ₀‖², i.e. λ_reg·(θ − θ₀).
pub fn l2sp_gradient(group: &ParameterGroup, lambda_reg: f64) -> Vec<f64> {
    group
        .values()
        .iter()
        .zip(group.snapshot())
        .map(|(x, x0)| lambda_reg * (x - x0))
        .collect()
}

/// Projection onto the ℓ2 ball of radius `gamma` centred at `snapshot`.
pub fn project_l2_ball(proposed: &[f64], snapshot: &[f64], gamma: f64) -> Vec<f64> {
    debug_assert_eq!(proposed.len(), snapshot.len());
    let radius = l2_distance(proposed, snapshot);
    if radius <= gamma {
        return proposed.to_vec();
    }
    let scale = 1.0 / (radius / gamma);
    proposed
        .iter()
        .zip(snapshot)
        .map(|(p, s)| s + scale * (p - s))
        .collect()
}

/// cₜ = −gᵀ(current − snapshot); a projection is warranted when negative.
pub fn spd_condition(grad: &[f64], current: &[f64], snapshot: &[f64]) -> f64 {
    debug_assert!(grad.len() == current.len() && current.len() == snapshot.len());
    -grad
        .iter()
        .zip(current.iter().zip(snapshot))
        .map(|(g, (c, s))| g * (c - s))
        .sum::<f64>()
}

/// rₜ = max(0, γₜ − γₜ₋₁)/γₜ, defined as 0 when γₜ = 0.
pub fn deviation_ratio(proposed_radius: f64, previous_radius: f64) -> f64 {
    if proposed_radius <= previous_radius || proposed_radius == 0.0 {
        return 0.0;
    }
    (proposed_radius - previous_radius) / proposed_radius
}

/// Projection strength for a group in module `k` of `module_count`.
///
/// From-scratch groups get 0 under SPD and MAPS; the other modes never
/// consult λ and also get 0.
pub fn assign_lambda(k: usize, module_count: usize, policy: &ProximityPolicy, group: &ParameterGroup) -> Result<f64> {
    ensure!(
        module_count >= 1 && (1..=module_count).contains(&k),
        Contract,
        "module index {k} outside 1..={module_count}"
    );
    if group.is_from_scratch() {
        return Ok(0.0);
    }
    Ok(match policy.mode {
        ProximityMode::Maps => policy.lambda_max * policy.schedule.factor(k, module_count),
        ProximityMode::Spd => policy.lambda,
        ProximityMode::None | ProximityMode::L2sp | ProximityMode::Tpgm => 0.0,
    })
}

/// Per-group diagnostics of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupReport {
    pub group: usize,
    /// γₜ₋₁ = ‖θₜ₋₁ − θ₀‖.
    pub previous_radius: f64,
    /// γₜ = ‖θ̃ₜ − θ₀‖.
    pub proposed_radius: f64,
    pub c_t: f64,
    pub lambda_k: f64,
    /// The final values differ from the proposal because of a projection.
    pub projected: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepReport {
    pub t: u64,
    pub groups: Vec<GroupReport>,
}

impl StepReport {
    pub fn projection_rate(&self) -> f64 {
        if self.groups.is_empty() {
            return 0.0;
        }
        self.groups.iter().filter(|g| g.projected).count() as f64 / self.groups.len() as f64
    }
}

/// Turn the Adam proposal into the group's next values according to `policy`.
///
/// `grad` is the task gradient gₜ used for the selection condition.
pub fn proximal_step(
    group: &ParameterGroup,
    grad: &[f64],
    proposed: Vec<f64>,
    lambda_k: f64,
    policy: &ProximityPolicy,
) -> (Vec<f64>, GroupReport) {
    let snapshot = group.snapshot();
    let mut report = GroupReport {
        group: 0,
        previous_radius: group.deviation(),
        proposed_radius: l2_distance(&proposed, snapshot),
        c_t: spd_condition(grad, group.values(), snapshot),
        lambda_k,
        projected: false,
    };
    let next = match policy.mode {
        ProximityMode::None | ProximityMode::L2sp => proposed,
        ProximityMode::Tpgm => {
            report.projected = report.proposed_radius > policy.gamma;
            project_l2_ball(&proposed, snapshot, policy.gamma)
        }
        ProximityMode::Spd | ProximityMode::Maps => {
            let r_t = deviation_ratio(report.proposed_radius, report.previous_radius);
            if report.c_t < 0.0 && lambda_k != 0.0 && r_t > 0.0 {
                report.projected = true;
                let shrink = lambda_k * r_t;
                proposed
                    .iter()
                    .zip(snapshot)
                    .map(|(p, s)| p - shrink * (p - s))
                    .collect()
            } else {
                proposed
            }
        }
    };
    (next, report)
}

/// Adam driving every non-frozen group of a model under one proximity policy.
#[derive(Debug, Clone)]
pub struct ProximalAdam {
    policy: ProximityPolicy,
    state: AdamState,
}

impl ProximalAdam {
    pub fn new(policy: ProximityPolicy, hyper: AdamHyper, model: &ModelParameters) -> Result<Self> {
        policy.validate()?;
        hyper.validate()?;
        Ok(Self {
            policy,
            state: AdamState::new(hyper, model),
        })
    }

    pub fn policy(&self) -> &ProximityPolicy {
        &self.policy
    }

    pub fn state(&self) -> &AdamState {
        &self.state
    }

    /// One optimizer step over all groups in declaration order.
    ///
    /// `grads[i]` is the task gradient of group `i`; it may be `None` only
    /// for frozen groups. Frozen groups are skipped entirely.
    pub fn step(&mut self, model: &mut ModelParameters, grads: &[Option<Vec<f64>>]) -> Result<StepReport> {
        ensure!(
            grads.len() == model.groups().len() && self.state.moments.len() == grads.len(),
            Contract,
            "expected {} gradient slots, got {}",
            model.groups().len(),
            grads.len()
        );
        for (g, slot) in model.groups().iter().zip(grads) {
            match slot {
                None if !g.is_frozen() => {
                    return Err(Error::Contract(format!("missing gradient for group `{}`", g.name())))
                }
                Some(v) if v.len() != g.len() => {
                    return Err(Error::Contract(format!(
                        "gradient for `{}` has length {}, expected {}",
                        g.name(),
                        v.len(),
                        g.len()
                    )))
                }
                _ => {}
            }
        }

        self.state.t += 1;
        let t = self.state.t;
        let module_count = model.module_count();
        let decay = self.policy.allows_weight_decay();
        let mut report = StepReport {
            t,
            groups: Vec::new(),
        };

        for (i, slot) in grads.iter().enumerate() {
            let group = model.group(i);
            if group.is_frozen() {
                continue;
            }
            let task_grad = slot.as_deref().expect("checked above");
            let proposed = if self.policy.mode == ProximityMode::L2sp {
                let mut g = l2sp_gradient(group, self.policy.lambda_reg);
                g.iter_mut().zip(task_grad).for_each(|(a, b)| *a += b);
                adam_propose(group, &g, &mut self.state.moments[i], &self.state.hyper, t, decay)?
            } else {
                adam_propose(group, task_grad, &mut self.state.moments[i], &self.state.hyper, t, decay)?
            };
            let lambda_k = assign_lambda(group.module_index(), module_count, &self.policy, group)?;
            let (next, mut entry) = proximal_step(group, task_grad, proposed, lambda_k, &self.policy);
            entry.group = i;
            model.set_values(i, next);
            report.groups.push(entry);
        }
        Ok(report)
    }
}
