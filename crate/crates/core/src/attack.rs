//! Feature-matching model inversion.
//!
//! Given the hidden-layer features of an unknown input, the attack searches
//! input space for `x̂ ∈ [0, 1]^d` minimizing
//!
//! `J(x̂) = ||features(x̂) - target||² + tv_weight · TV(x̂)`
//!
//! by projected gradient descent with step halving. `TV` is the sum of
//! squared differences between neighbouring components, either along the
//! flattened vector or on a square grid. Reconstructions are scored by PSNR
//! against the true input with peak value 1.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{self, ModelSpec};
use crate::numkit::{ParamVector, RandomSource};
use crate::par::{self, Execution};
use crate::patientdb::PatientDatabase;

/// PSNR reported for a perfect reconstruction.
pub const PSNR_CAP_DB: f64 = 100.0;

const MAX_HALVINGS: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackInit {
    #[default]
    Zeros,
    Uniform,
}

/// Neighbourhood used by the smoothness penalty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum TvLayout {
    /// Adjacent indices of the flattened vector.
    #[default]
    Flat,
    /// Horizontal and vertical neighbours on a `width × width` grid.
    Grid { width: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub steps: usize,
    pub step_size: f64,
    #[serde(default)]
    pub tv_weight: f64,
    #[serde(default)]
    pub tv_layout: TvLayout,
    #[serde(default)]
    pub init: AttackInit,
    #[serde(default = "default_true")]
    pub backtracking: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_true() -> bool {
    true
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            step_size: 0.5,
            tv_weight: 0.0,
            tv_layout: TvLayout::Flat,
            init: AttackInit::Zeros,
            backtracking: true,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::invalid("steps", "must be at least 1"));
        }
        if !self.step_size.is_finite() || self.step_size <= 0.0 {
            return Err(Error::invalid("step_size", "must be positive"));
        }
        if !self.tv_weight.is_finite() || self.tv_weight < 0.0 {
            return Err(Error::invalid("tv_weight", "must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub x_hat: Vec<f64>,
    pub initial_objective: f64,
    pub final_objective: f64,
    /// Objective after each step.
    pub objective_trace: Vec<f64>,
    /// Set when the true input is known (see [`AttackResult::score`]).
    pub psnr_db: Option<f64>,
}

impl AttackResult {
    /// `1 - final / initial`; zero when the initial objective is already 0.
    pub fn objective_reduction(&self) -> f64 {
        if self.initial_objective > 0.0 {
            1.0 - self.final_objective / self.initial_objective
        } else {
            0.0
        }
    }

    pub fn score(mut self, x_true: &[f64]) -> Result<Self> {
        self.psnr_db = Some(psnr(x_true, &self.x_hat)?);
        Ok(self)
    }
}

fn tv_penalty(x: &[f64], layout: TvLayout) -> Result<(f64, Vec<f64>)> {
    let mut grad = vec![0.0; x.len()];
    let mut value = 0.0;
    let mut pair = |i: usize, j: usize| {
        let diff = x[j] - x[i];
        value += diff * diff;
        grad[j] += 2.0 * diff;
        grad[i] -= 2.0 * diff;
    };
    match layout {
        TvLayout::Flat => (1..x.len()).for_each(|i| pair(i - 1, i)),
        TvLayout::Grid { width } => {
            if width == 0 || width * width != x.len() {
                return Err(Error::invalid(
                    "tv_layout",
                    format!("grid width {width} does not tile {} features", x.len()),
                ));
            }
            for r in 0..width {
                for c in 0..width {
                    let i = r * width + c;
                    if c + 1 < width {
                        pair(i, i + 1);
                    }
                    if r + 1 < width {
                        pair(i, i + width);
                    }
                }
            }
        }
    }
    Ok((value, grad))
}

struct Objective<'a> {
    spec: &'a ModelSpec,
    theta: &'a ParamVector,
    target: &'a [f64],
    cfg: &'a AttackConfig,
}

impl Objective<'_> {
    fn value(&self, x: &[f64]) -> Result<f64> {
        let f = models::features(self.spec, self.theta, x)?;
        let fit: f64 = f.iter().zip(self.target).map(|(a, b)| (a - b) * (a - b)).sum();
        let tv = if self.cfg.tv_weight > 0.0 {
            tv_penalty(x, self.cfg.tv_layout)?.0
        } else {
            0.0
        };
        Ok(fit + self.cfg.tv_weight * tv)
    }

    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        let f = models::features(self.spec, self.theta, x)?;
        let residual: Vec<f64> = f.iter().zip(self.target).map(|(a, b)| 2.0 * (a - b)).collect();
        let mut g = models::feature_grad_x(self.spec, self.theta, x, &residual)?;
        if self.cfg.tv_weight > 0.0 {
            let (_, tv) = tv_penalty(x, self.cfg.tv_layout)?;
            g.iter_mut().zip(tv).for_each(|(a, b)| *a += self.cfg.tv_weight * b);
        }
        Ok(g)
    }
}

fn project(x: &mut [f64]) {
    x.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
}

/// Inverts `target` with the init stream seeded from `cfg.seed`.
pub fn invert(spec: &ModelSpec, theta: &ParamVector, target: &[f64], cfg: &AttackConfig) -> Result<AttackResult> {
    invert_with_rng(
        spec,
        theta,
        target,
        cfg,
        &mut RandomSource::new(cfg.seed).child("attack-init"),
    )
}

pub fn invert_with_rng(
    spec: &ModelSpec,
    theta: &ParamVector,
    target: &[f64],
    cfg: &AttackConfig,
    rng: &mut RandomSource,
) -> Result<AttackResult> {
    cfg.validate()?;
    if target.len() != spec.hidden_dim {
        return Err(Error::DimensionMismatch {
            expected: spec.hidden_dim,
            actual: target.len(),
        });
    }
    let objective = Objective {
        spec,
        theta,
        target,
        cfg,
    };
    let d = spec.input_dim;
    let mut x: Vec<f64> = match cfg.init {
        AttackInit::Zeros => vec![0.0; d],
        AttackInit::Uniform => (0..d).map(|_| rng.uniform()).collect(),
    };
    let initial_objective = objective.value(&x)?;
    let mut current = initial_objective;
    let mut step = cfg.step_size;
    let mut trace = Vec::with_capacity(cfg.steps);

    for _ in 0..cfg.steps {
        let g = objective.gradient(&x)?;
        let mut accepted = false;
        for _ in 0..=MAX_HALVINGS {
            let mut candidate: Vec<f64> = x.iter().zip(&g).map(|(xi, gi)| xi - step * gi).collect();
            project(&mut candidate);
            let value = objective.value(&candidate)?;
            if !cfg.backtracking || value <= current {
                x = candidate;
                current = value;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        trace.push(current);
        if !accepted {
            // No descent even at a tiny step: a projected stationary point.
            break;
        }
    }
    Ok(AttackResult {
        x_hat: x,
        initial_objective,
        final_objective: current,
        objective_trace: trace,
        psnr_db: None,
    })
}

/// `10 log10(1 / MSE)` for signals with peak 1, capped at [`PSNR_CAP_DB`].
pub fn psnr(x: &[f64], x_hat: &[f64]) -> Result<f64> {
    if x.len() != x_hat.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            actual: x_hat.len(),
        });
    }
    if x.is_empty() {
        return Err(Error::Empty("psnr input"));
    }
    let mse = x.iter().zip(x_hat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((-10.0 * mse.log10()).min(PSNR_CAP_DB))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelTag {
    Private,
    NonPrivate,
}

/// An input to reconstruct, addressed by a stable id.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackTarget {
    pub example_id: String,
    pub x: Vec<f64>,
}

/// `n` examples drawn without replacement, ids `<patient_id>#<index>`.
pub fn sample_targets(db: &PatientDatabase, n: usize, rng: &mut RandomSource) -> Vec<AttackTarget> {
    let mut all: Vec<AttackTarget> = db
        .patients()
        .iter()
        .flat_map(|p| {
            p.examples.iter().enumerate().map(move |(k, e)| AttackTarget {
                example_id: format!("{}#{k}", p.id),
                x: e.x.clone(),
            })
        })
        .collect();
    let n = n.min(all.len());
    // Partial Fisher-Yates: the first n slots end up a uniform sample.
    for i in 0..n {
        let j = i + rng.below(all.len() - i);
        all.swap(i, j);
    }
    all.truncate(n);
    all
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    pub example_id: String,
    pub group: Group,
    pub model_tag: ModelTag,
    pub psnr_db: f64,
    pub initial_objective: f64,
    pub final_objective: f64,
    pub objective_reduction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub group: Group,
    pub model_tag: ModelTag,
    pub count: usize,
    pub mean_psnr_db: f64,
    pub mean_final_objective: f64,
    pub mean_objective_reduction: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub records: Vec<AttackRecord>,
    pub summaries: Vec<GroupSummary>,
}

impl AttackReport {
    pub fn summary(&self, group: Group, model_tag: ModelTag) -> Option<&GroupSummary> {
        self.summaries
            .iter()
            .find(|s| s.group == group && s.model_tag == model_tag)
    }
}

/// Attacks every target against both models. Each target's init stream is
/// keyed by `(cfg.seed, example_id)`, so both models start from the same
/// point.
pub fn attack_report(
    spec: &ModelSpec,
    theta_private: &ParamVector,
    theta_nonprivate: &ParamVector,
    train: &[AttackTarget],
    test: &[AttackTarget],
    cfg: &AttackConfig,
    execution: Execution,
) -> Result<AttackReport> {
    cfg.validate()?;
    let root = RandomSource::new(cfg.seed).child("attack-report");
    let mut report = AttackReport::default();
    for (group, targets) in [(Group::Train, train), (Group::Test, test)] {
        for (model_tag, theta) in [
            (ModelTag::Private, theta_private),
            (ModelTag::NonPrivate, theta_nonprivate),
        ] {
            let records = par::try_map(execution, targets, |t| {
                let target = models::features(spec, theta, &t.x)?;
                let result = invert_with_rng(spec, theta, &target, cfg, &mut root.child(&t.example_id))?.score(&t.x)?;
                Ok::<_, Error>(AttackRecord {
                    example_id: t.example_id.clone(),
                    group,
                    model_tag,
                    psnr_db: result.psnr_db.unwrap_or(f64::NAN),
                    initial_objective: result.initial_objective,
                    final_objective: result.final_objective,
                    objective_reduction: result.objective_reduction(),
                })
            })?;
            if !records.is_empty() {
                let n = records.len() as f64;
                report.summaries.push(GroupSummary {
                    group,
                    model_tag,
                    count: records.len(),
                    mean_psnr_db: records.iter().map(|r| r.psnr_db).sum::<f64>() / n,
                    mean_final_objective: records.iter().map(|r| r.final_objective).sum::<f64>() / n,
                    mean_objective_reduction: records.iter().map(|r| r.objective_reduction).sum::<f64>() / n,
                });
            }
            report.records.extend(records);
        }
    }
    Ok(report)
}
