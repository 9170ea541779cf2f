//! Training engines: P3SGD and the non-private SGD baseline.
//!
//! A P3SGD round:
//!
//! 1. sample patients independently with probability `p`;
//! 2. each sampled patient runs local SGD from the current parameters and
//!    returns its clipped parameter delta ([`patient_update`]);
//! 3. the deltas are averaged ([`average_updates`]);
//! 4. one noisy candidate is built per noise scale `z`, with standard
//!    deviation `z · C_u / |B_t|` ([`build_candidates`]);
//! 5. a candidate is chosen by the exponential mechanism on the negative
//!    clipped loss over the sampled patients' examples
//!    ([`noisy_update_select`]);
//! 6. the chosen candidate is applied and the accountant is charged.
//!
//! Randomness is keyed by `(seed, round, purpose[, patient_id])`, per-patient
//! work is order-independent, and averaging runs in database order, so the
//! result is bit-identical whether patients are processed in parallel or not.

use serde::{Deserialize, Serialize};

use crate::accountant::MomentsAccountant;
use crate::error::{Error, Result};
use crate::metrics::{MetricsSink, RoundLog, SgdStepLog};
use crate::models::{self, Example, ModelSpec};
use crate::numkit::{clip_norm, gaussian_noise, ParamVector, RandomSource};
use crate::par::{self, Execution};
use crate::patientdb::{sample_patients, PatientDatabase, PatientRecord, SamplingPlan};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Patient sampling ratio `p`.
    pub sampling_ratio: f64,
    /// Total rounds `T`.
    pub rounds: usize,
    /// Candidate noise multipliers `Ω_z`, in candidate order.
    pub noise_scales: Vec<f64>,
    /// Selection budget `ε'` per round.
    pub eps_select: f64,
    /// Per-patient update norm bound `C_u`.
    pub update_bound: f64,
    /// Selection loss clamp `C_o`.
    pub objective_bound: f64,
    /// Local learning rate `γ`.
    pub learning_rate: f64,
    pub local_epochs: usize,
    pub local_batch: usize,
    pub seed: u64,
    /// Charge the selection moment even when `Ω_z` has a single entry and
    /// selection is bypassed.
    #[serde(default)]
    pub charge_selection_always: bool,
    #[serde(default)]
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            sampling_ratio: 0.1,
            rounds: 100,
            noise_scales: vec![3.0, 1.0],
            eps_select: 0.1f64.sqrt(),
            update_bound: 5.0,
            objective_bound: 3.0,
            learning_rate: 0.1,
            local_epochs: 1,
            local_batch: 10,
            seed: 0,
            charge_selection_always: false,
            execution: Execution::Parallel,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        SamplingPlan::new(self.sampling_ratio)?;
        if self.noise_scales.is_empty() {
            return Err(Error::invalid("noise_scales", "needs at least one entry"));
        }
        if let Some(z) = self.noise_scales.iter().find(|z| !z.is_finite() || **z <= 0.0) {
            return Err(Error::invalid(
                "noise_scales",
                format!("entries must be positive, got {z}"),
            ));
        }
        let positive = [
            ("update_bound", self.update_bound),
            ("objective_bound", self.objective_bound),
            ("learning_rate", self.learning_rate),
        ];
        for (name, v) in positive {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::invalid(name, format!("must be positive, got {v}")));
            }
        }
        if !self.eps_select.is_finite() || self.eps_select < 0.0 {
            return Err(Error::invalid(
                "eps_select",
                format!("must be non-negative, got {}", self.eps_select),
            ));
        }
        if self.local_epochs == 0 {
            return Err(Error::invalid("local_epochs", "must be at least 1"));
        }
        if self.local_batch == 0 {
            return Err(Error::invalid("local_batch", "must be at least 1"));
        }
        Ok(())
    }

    /// Selection budget charged per round, if any.
    fn selection_charge(&self) -> Option<f64> {
        (self.noise_scales.len() > 1 || self.charge_selection_always).then_some(self.eps_select)
    }
}

/// Local SGD on one patient's examples starting from `theta_t`; returns the
/// parameter delta clipped to norm `C_u`.
///
/// Each epoch visits the patient's examples in a fresh random order, in
/// mini-batches of `local_batch` (the last one may be smaller).
pub fn patient_update(
    spec: &ModelSpec,
    theta_t: &ParamVector,
    patient: &PatientRecord,
    cfg: &TrainConfig,
    rng: &mut RandomSource,
) -> Result<ParamVector> {
    if theta_t.dim() != spec.param_count() {
        return Err(Error::DimensionMismatch {
            expected: spec.param_count(),
            actual: theta_t.dim(),
        });
    }
    let mut theta = theta_t.clone();
    let mut order: Vec<usize> = (0..patient.examples.len()).collect();
    for _ in 0..cfg.local_epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.local_batch) {
            let batch = chunk.iter().map(|&i| &patient.examples[i]);
            let (_, g) = models::mean_loss_and_grad(spec, &theta, batch)?;
            theta = theta.axpy(-cfg.learning_rate, &g)?;
        }
    }
    clip_norm(&theta.sub(theta_t)?, cfg.update_bound)
}

/// Component-wise mean, summed in slice order.
pub fn average_updates(updates: &[ParamVector]) -> Result<ParamVector> {
    let first = updates.first().ok_or(Error::Empty("update list"))?;
    let mut sum = vec![0.0; first.dim()];
    for u in updates {
        if u.dim() != sum.len() {
            return Err(Error::DimensionMismatch {
                expected: sum.len(),
                actual: u.dim(),
            });
        }
        sum.iter_mut().zip(u.as_slice()).for_each(|(s, v)| *s += v);
    }
    let n = updates.len() as f64;
    ParamVector::new(sum.into_iter().map(|s| s / n).collect())
}

/// A noisy version of the averaged update.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateCandidate {
    pub delta: ParamVector,
    pub z: f64,
    /// Realized noise standard deviation `z · C_u / |B_t|`.
    pub sigma: f64,
}

/// One candidate per noise scale, each with its own independent noise draw.
pub fn build_candidates(
    delta_t: &ParamVector,
    cfg: &TrainConfig,
    batch_size: usize,
    rng: &mut RandomSource,
) -> Result<Vec<UpdateCandidate>> {
    if batch_size == 0 {
        return Err(Error::invalid(
            "batch_size",
            "cannot build candidates for an empty batch",
        ));
    }
    cfg.noise_scales
        .iter()
        .map(|&z| {
            let sigma = z * cfg.update_bound / batch_size as f64;
            let noise = gaussian_noise(delta_t.dim(), sigma, rng)?;
            Ok(UpdateCandidate {
                delta: delta_t.add(&noise)?,
                z,
                sigma,
            })
        })
        .collect()
}

/// Exponential-mechanism probabilities `∝ exp(ε' u / (2 C_o))`, computed
/// with a max shift so large budgets do not overflow.
pub fn selection_probabilities(utilities: &[f64], eps_select: f64, objective_bound: f64) -> Vec<f64> {
    let scores: Vec<f64> = utilities
        .iter()
        .map(|u| eps_select * u / (2.0 * objective_bound))
        .collect();
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / total).collect()
}

/// Draws an index from a probability vector.
pub fn sample_index(probabilities: &[f64], rng: &mut RandomSource) -> usize {
    let u = rng.uniform();
    let mut cumulative = 0.0;
    for (i, p) in probabilities.iter().enumerate() {
        cumulative += p;
        if u < cumulative {
            return i;
        }
    }
    probabilities.len().saturating_sub(1)
}

/// Result of the noisy-update selection.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub index: usize,
    pub candidate: UpdateCandidate,
    pub probabilities: Vec<f64>,
    /// Loss clamped into `[0, C_o]`, per candidate.
    pub clipped_losses: Vec<f64>,
}

/// Scores each candidate by `u = -clamp(L(B; θ_t + Δ̃), 0, C_o)` over all
/// examples of the sampled patients and samples one with the exponential
/// mechanism.
pub fn noisy_update_select(
    candidates: &[UpdateCandidate],
    cfg: &TrainConfig,
    batch: &[&PatientRecord],
    theta_t: &ParamVector,
    spec: &ModelSpec,
    rng: &mut RandomSource,
) -> Result<Selection> {
    if candidates.is_empty() {
        return Err(Error::Empty("candidate list"));
    }
    let clipped_losses = par::try_map(cfg.execution, candidates, |c| {
        let theta = theta_t.add(&c.delta)?;
        let examples = batch.iter().flat_map(|p| p.examples.iter());
        let loss = models::mean_loss(spec, &theta, examples)?;
        Ok::<_, Error>(loss.clamp(0.0, cfg.objective_bound))
    })?;
    let utilities: Vec<f64> = clipped_losses.iter().map(|l| -l).collect();
    let probabilities = selection_probabilities(&utilities, cfg.eps_select, cfg.objective_bound);
    let index = sample_index(&probabilities, rng);
    Ok(Selection {
        index,
        candidate: candidates[index].clone(),
        probabilities,
        clipped_losses,
    })
}

/// Labelled random streams for one training run.
struct Streams {
    root: RandomSource,
}

impl Streams {
    fn new(seed: u64) -> Self {
        Self {
            root: RandomSource::new(seed).child("p3sgd"),
        }
    }

    fn init(&self) -> RandomSource {
        self.root.child("init")
    }

    fn round(&self, t: usize, purpose: &str) -> RandomSource {
        self.root.child_u64(t as u64).child(purpose)
    }
}

/// Runs P3SGD from a random initialization.
pub fn p3sgd_train(
    spec: &ModelSpec,
    db: &PatientDatabase,
    cfg: &TrainConfig,
    accountant: &mut MomentsAccountant,
    sink: &mut dyn MetricsSink,
) -> Result<ParamVector> {
    spec.validate()?;
    let theta0 = models::init_params(spec, &mut Streams::new(cfg.seed).init())?;
    p3sgd_train_from(spec, db, cfg, theta0, accountant, sink)
}

/// Runs P3SGD from the given parameters.
pub fn p3sgd_train_from(
    spec: &ModelSpec,
    db: &PatientDatabase,
    cfg: &TrainConfig,
    theta0: ParamVector,
    accountant: &mut MomentsAccountant,
    sink: &mut dyn MetricsSink,
) -> Result<ParamVector> {
    cfg.validate()?;
    spec.validate()?;
    if db.feature_dim() != spec.input_dim {
        return Err(Error::DimensionMismatch {
            expected: spec.input_dim,
            actual: db.feature_dim(),
        });
    }
    if accountant.q() != cfg.sampling_ratio {
        return Err(Error::invalid(
            "accountant",
            format!(
                "accountant q={} does not match sampling ratio {}",
                accountant.q(),
                cfg.sampling_ratio
            ),
        ));
    }
    let plan = SamplingPlan::new(cfg.sampling_ratio)?;
    let streams = Streams::new(cfg.seed);
    let mut theta = theta0;

    for t in 1..=cfg.rounds {
        let batch = sample_patients(db, &plan, &mut streams.round(t, "sample"));
        if batch.is_empty() {
            let spend = accountant.spend();
            let log = RoundLog {
                round: t,
                batch_size: 0,
                skipped: true,
                selected_z: None,
                selected_index: None,
                selection_probabilities: Vec::new(),
                update_norm: None,
                clipped_loss: None,
                epsilon: spend.epsilon,
                delta: spend.delta,
            };
            sink.round(&log, &theta)?;
            continue;
        }

        let patient_root = streams.round(t, "patient");
        let updates = par::try_map(cfg.execution, &batch, |patient| {
            let mut rng = patient_root.child(&patient.id);
            patient_update(spec, &theta, patient, cfg, &mut rng)
        })?;
        let delta_t = average_updates(&updates)?;
        let candidates = build_candidates(&delta_t, cfg, batch.len(), &mut streams.round(t, "noise"))?;

        let (chosen, probabilities, clipped_loss) = if candidates.len() == 1 {
            (candidates[0].clone(), vec![1.0], None)
        } else {
            let sel = noisy_update_select(&candidates, cfg, &batch, &theta, spec, &mut streams.round(t, "select"))?;
            let loss = sel.clipped_losses[sel.index];
            (sel.candidate, sel.probabilities, Some(loss))
        };
        let selected_index = cfg.noise_scales.iter().position(|z| *z == chosen.z);

        theta = theta.add(&chosen.delta)?;
        accountant.charge_round(chosen.z, cfg.selection_charge())?;
        let spend = accountant.spend();
        let log = RoundLog {
            round: t,
            batch_size: batch.len(),
            skipped: false,
            selected_z: Some(chosen.z),
            selected_index,
            selection_probabilities: probabilities,
            update_norm: Some(delta_t.l2_norm()),
            clipped_loss,
            epsilon: spend.epsilon,
            delta: spend.delta,
        };
        sink.round(&log, &theta)?;
    }
    Ok(theta)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    /// Number of gradient steps.
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be at least 1"));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::invalid("learning_rate", "must be non-negative"));
        }
        Ok(())
    }
}

/// Non-private mini-batch SGD on the pooled examples, ignoring patients.
/// Batches walk through a fresh permutation each epoch.
pub fn sgd_train(
    spec: &ModelSpec,
    db: &PatientDatabase,
    cfg: &SgdConfig,
    sink: &mut dyn MetricsSink,
) -> Result<ParamVector> {
    spec.validate()?;
    let root = RandomSource::new(cfg.seed).child("sgd");
    let theta0 = models::init_params(spec, &mut root.child("init"))?;
    sgd_train_from(spec, db, cfg, theta0, sink)
}

pub fn sgd_train_from(
    spec: &ModelSpec,
    db: &PatientDatabase,
    cfg: &SgdConfig,
    theta0: ParamVector,
    sink: &mut dyn MetricsSink,
) -> Result<ParamVector> {
    cfg.validate()?;
    if db.feature_dim() != spec.input_dim {
        return Err(Error::DimensionMismatch {
            expected: spec.input_dim,
            actual: db.feature_dim(),
        });
    }
    let pool: Vec<&Example> = db.examples().collect();
    if cfg.batch_size > pool.len() {
        return Err(Error::invalid(
            "batch_size",
            format!("{} exceeds the {} available examples", cfg.batch_size, pool.len()),
        ));
    }
    let root = RandomSource::new(cfg.seed).child("sgd");
    let mut order: Vec<usize> = (0..pool.len()).collect();
    let mut cursor = pool.len();
    let mut epoch = 0u64;
    let mut theta = theta0;
    for step in 1..=cfg.steps {
        if cursor + cfg.batch_size > pool.len() {
            root.child("epoch").child_u64(epoch).shuffle(&mut order);
            epoch += 1;
            cursor = 0;
        }
        let batch = order[cursor..cursor + cfg.batch_size].iter().map(|&i| pool[i]);
        cursor += cfg.batch_size;
        let (loss, g) = models::mean_loss_and_grad(spec, &theta, batch)?;
        theta = theta.axpy(-cfg.learning_rate, &g)?;
        let log = SgdStepLog {
            step,
            batch_size: cfg.batch_size,
            batch_loss: loss,
        };
        sink.sgd_step(&log, &theta)?;
    }
    Ok(theta)
}
