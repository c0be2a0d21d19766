//! The continual protocol: train on cycle t, early-stop on its validation
//! split, evaluate on cycle t+1, refresh exemplars, repeat.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{CycleDataset, TrainingExample};
use crate::exemplar::{self, ExemplarSet, SelectionConfig, SelectionStrategy};
use crate::losses::{self, FisherDiagonal, LossBreakdown};
use crate::metrics::{self, CycleReport, Rank};
use crate::model::{self, AdamConfig, BatchSpec, LossTerm, ModelConfig, ModelState, Params, Target, TermKind};
use crate::{rng, Error, Result};

/// The validation metric driving early stopping.
pub const EARLY_STOP_K: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MethodKind {
    Finetune,
    Dropout,
    Ewc,
    Joint,
    Ader,
    ErHerding,
    ErRandom,
    ErLoss,
    AderEqual,
    AderFix,
}

impl MethodKind {
    pub const ALL: [MethodKind; 10] = [
        MethodKind::Finetune,
        MethodKind::Dropout,
        MethodKind::Ewc,
        MethodKind::Joint,
        MethodKind::Ader,
        MethodKind::ErHerding,
        MethodKind::ErRandom,
        MethodKind::ErLoss,
        MethodKind::AderEqual,
        MethodKind::AderFix,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MethodKind::Finetune => "FINETUNE",
            MethodKind::Dropout => "DROPOUT",
            MethodKind::Ewc => "EWC",
            MethodKind::Joint => "JOINT",
            MethodKind::Ader => "ADER",
            MethodKind::ErHerding => "ER_HERDING",
            MethodKind::ErRandom => "ER_RANDOM",
            MethodKind::ErLoss => "ER_LOSS",
            MethodKind::AderEqual => "ADER_EQUAL",
            MethodKind::AderFix => "ADER_FIX",
        }
    }

    /// Exemplar selection rule, for methods that keep an exemplar store.
    pub fn selection(self) -> Option<SelectionStrategy> {
        match self {
            MethodKind::Ewc | MethodKind::Ader | MethodKind::ErHerding | MethodKind::AderFix => {
                Some(SelectionStrategy::Herding)
            }
            MethodKind::ErRandom => Some(SelectionStrategy::Random),
            MethodKind::ErLoss => Some(SelectionStrategy::Loss),
            MethodKind::AderEqual => Some(SelectionStrategy::EqualHerding),
            MethodKind::Finetune | MethodKind::Dropout | MethodKind::Joint => None,
        }
    }

    pub fn distills(self) -> bool {
        matches!(self, MethodKind::Ader | MethodKind::AderEqual | MethodKind::AderFix)
    }

    pub fn replays(self) -> bool {
        matches!(self, MethodKind::ErHerding | MethodKind::ErRandom | MethodKind::ErLoss)
    }

    pub fn default_dropout(self) -> f64 {
        match self {
            MethodKind::Finetune | MethodKind::Ewc => 0.0,
            _ => 0.3,
        }
    }
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MethodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let upper = s.to_ascii_uppercase();
        MethodKind::ALL
            .into_iter()
            .find(|k| k.name() == upper)
            .ok_or_else(|| Error::invalid(format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub kind: MethodKind,
    /// Row name in reports; defaults to the kind's name.
    pub label: String,
    pub lambda_base: f64,
    /// The constant weight used by ADER_FIX.
    pub fixed_lambda: f64,
    pub exemplar_capacity: usize,
    pub dropout_rate: f64,
    pub ewc_strength: f64,
    /// Weight of the exemplar cross-entropy stream of the ER variants.
    pub exemplar_ce_weight: f64,
    /// L2-normalize features before herding.
    pub normalize_features: bool,
}

impl MethodSpec {
    pub fn new(kind: MethodKind) -> Self {
        Self {
            kind,
            label: kind.name().to_owned(),
            lambda_base: 0.8,
            fixed_lambda: 0.8,
            exemplar_capacity: 1300,
            dropout_rate: kind.default_dropout(),
            ewc_strength: 100.0,
            exemplar_ce_weight: 1.0,
            normalize_features: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: &str| {
            Err(Error::Config {
                field: format!("{}.{field}", self.label),
                reason: reason.to_owned(),
            })
        };
        if self.kind.selection().is_some() && self.exemplar_capacity == 0 {
            return bad("exemplar_capacity", "must be positive for exemplar methods");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate", "must lie in [0, 1)");
        }
        if matches!(self.kind, MethodKind::Finetune | MethodKind::Ewc) && self.dropout_rate != 0.0 {
            return bad("dropout_rate", "FINETUNE and EWC train without dropout");
        }
        for (name, v) in [
            ("lambda_base", self.lambda_base),
            ("fixed_lambda", self.fixed_lambda),
            ("ewc_strength", self.ewc_strength),
            ("exemplar_ce_weight", self.exemplar_ce_weight),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(name, "must be finite and nonnegative");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainLoopConfig {
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Cutoffs reported per cycle.
    pub ks: Vec<usize>,
    /// Keep a copy of the model after every cycle.
    pub keep_checkpoints: bool,
}

/// Desk-scale preset; see `full_scale` for the published settings.
impl Default for TrainLoopConfig {
    fn default() -> Self {
        Self {
            max_epochs: 30,
            patience: 5,
            batch_size: 64,
            lr: 1e-3,
            ks: vec![10, 20],
            keep_checkpoints: false,
        }
    }
}

impl TrainLoopConfig {
    pub fn full_scale() -> Self {
        Self {
            max_epochs: 100,
            batch_size: 256,
            lr: 5e-4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: &str| {
            Err(Error::Config {
                field: field.to_owned(),
                reason: reason.to_owned(),
            })
        };
        if self.max_epochs == 0 {
            return bad("max_epochs", "must be positive");
        }
        if self.patience == 0 || self.patience >= self.max_epochs {
            return bad("patience", "must be in 1..max_epochs");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("lr", "must be positive");
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            return bad("ks", "must be a nonempty list of positive cutoffs");
        }
        Ok(())
    }
}

/// Patience counter over validation Recall@20; only strict gains count.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: usize,
    best: Option<f64>,
    best_epoch: usize,
    stale: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            best_epoch: 0,
            stale: 0,
        }
    }

    /// Records a 1-based epoch's score; returns true if it is the new best.
    pub fn observe(&mut self, epoch: usize, score: f64) -> bool {
        if self.best.is_none_or(|b| score > b) {
            self.best = Some(score);
            self.best_epoch = epoch;
            self.stale = 0;
            true
        } else {
            self.stale += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub cycle: usize,
    pub epoch: usize,
    pub losses: LossBreakdown,
    pub lambda_t: f64,
    pub val_recall20: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentState {
    pub model: Option<ModelState>,
    /// Frozen θ_{t-1}, the distillation teacher.
    pub previous_model: Option<ModelState>,
    pub exemplars: ExemplarSet,
    pub history: Vec<CycleReport>,
    /// Every past training example (JOINT only).
    pub joint_buffer: Vec<TrainingExample>,
    /// EWC anchor parameters and Fisher diagonal.
    pub ewc: Option<(Params, FisherDiagonal)>,
    pub last_cycle: Option<usize>,
    pub seed: u64,
}

impl ExperimentState {
    pub fn new(method: &MethodSpec, seed: u64) -> Self {
        Self {
            model: None,
            previous_model: None,
            exemplars: ExemplarSet::empty(
                method.exemplar_capacity,
                method.kind.selection().unwrap_or(SelectionStrategy::Herding),
                seed,
            ),
            history: Vec::new(),
            joint_buffer: Vec::new(),
            ewc: None,
            last_cycle: None,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataUse {
    Train,
    Validation,
    Test,
}

/// Hooks for instrumenting the protocol.
pub trait RunObserver {
    fn data_accessed(&mut self, _cycle: usize, _use: DataUse) {}
    fn evaluated(&mut self, _trained_cycle: usize, _test_cycle: usize) {}
    fn cycle_finished(&mut self, _state: &ExperimentState) {}
}

pub struct NoObserver;

impl RunObserver for NoObserver {}

/// What one call to `update_model` did.
#[derive(Debug, Clone, PartialEq)]
pub struct CycleTraining {
    pub epochs: Vec<EpochRecord>,
    pub lambda_t: f64,
    pub best_epoch: usize,
    pub mean_losses: LossBreakdown,
}

/// Ranks each example's target over the model's items. Prefix items the model
/// has never seen are dropped; an unseen target or an emptied prefix is a miss.
pub fn evaluate(state: &ModelState, examples: &[TrainingExample]) -> Result<(Vec<Rank>, usize)> {
    let n = state.item_count();
    let ranks = examples
        .par_iter()
        .map(|ex| {
            let prefix: Vec<usize> = ex.prefix.iter().copied().filter(|&i| i < n).collect();
            if ex.target >= n || prefix.is_empty() {
                return Ok(None);
            }
            let logits = model::score(state, &prefix, n)?;
            metrics::rank_of_target(&logits, ex.target).map(Some)
        })
        .collect::<Result<Vec<Rank>>>()?;
    let unseen = examples.iter().filter(|ex| ex.target >= n).count();
    Ok((ranks, unseen))
}

fn validation_score(state: &ModelState, validation: &[TrainingExample]) -> Result<f64> {
    if validation.is_empty() {
        return Ok(0.0);
    }
    let (ranks, _) = evaluate(state, validation)?;
    metrics::recall_at_k(&ranks, EARLY_STOP_K)
}

fn shuffled(len: usize, seed: u64, tags: &[u64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(&mut rng::rng(seed, tags));
    idx
}

fn train_model(model: &mut ModelState, cfg: &AdamConfig, batch: &BatchSpec, ewc: Option<(&Params, &FisherDiagonal, f64)>) -> Result<LossBreakdown> {
    let (mut breakdown, mut grads) = model::loss_and_gradients(model, batch)?;
    if let Some((anchor, fisher, strength)) = ewc {
        let (penalty, g) = losses::ewc_penalty(&model.params, anchor, fisher)?;
        grads.add_scaled(strength, &g);
        breakdown.ewc = penalty;
        breakdown.total += strength * penalty;
    }
    if !breakdown.total.is_finite() || !grads.is_finite() {
        return Err(Error::NonFiniteLoss(format!("{breakdown:?}")));
    }
    model::adam_step(model, &grads, cfg)?;
    Ok(breakdown)
}

/// Trains on one cycle, then refreshes exemplars and the frozen teacher.
pub fn update_model(
    state: &mut ExperimentState,
    cycle: &CycleDataset,
    method: &MethodSpec,
    loop_cfg: &TrainLoopConfig,
    model_cfg: &ModelConfig,
    observer: &mut dyn RunObserver,
) -> Result<CycleTraining> {
    let t = cycle.cycle_id;
    if let Some(last) = state.last_cycle {
        if t != last + 1 {
            return Err(Error::invalid(format!("expected cycle {}, got {t}", last + 1)));
        }
    }
    if cycle.train.is_empty() {
        return Err(Error::invalid(format!("cycle {t} has no training data")));
    }
    observer.data_accessed(t, DataUse::Train);
    let seed = state.seed;
    let items = cycle.item_count_after;

    let mut model = match state.model.take() {
        Some(mut m) => {
            model::grow_vocabulary(&mut m, items, rng::derive(seed, &[rng::tag("grow"), t as u64]))?;
            m
        }
        None => {
            let cfg = ModelConfig {
                dropout_rate: method.dropout_rate,
                ..*model_cfg
            };
            model::init_model(&cfg, items, rng::derive(seed, &[rng::tag("init"), model_cfg.seed]))?
        }
    };
    let old_items = state.previous_model.as_ref().map_or(0, ModelState::item_count);

    let mut data: Vec<&TrainingExample> = Vec::new();
    if method.kind == MethodKind::Joint {
        data.extend(state.joint_buffer.iter());
    }
    data.extend(cycle.train.iter());

    let replay: Vec<TrainingExample> = state.exemplars.to_vec();
    let lambda_t = match (method.kind, &state.previous_model) {
        (MethodKind::AderFix, Some(_)) if !replay.is_empty() => method.fixed_lambda,
        (k, Some(_)) if k.distills() && !replay.is_empty() => {
            losses::adaptive_lambda(method.lambda_base, old_items, items, replay.len(), cycle.train.len())?
        }
        _ => 0.0,
    };
    let teachers = match &state.previous_model {
        Some(prev) if lambda_t > 0.0 => losses::teacher_distributions(prev, &replay, old_items)?,
        _ => Vec::new(),
    };
    let replay_weight = if method.kind.replays() { method.exemplar_ce_weight } else { 0.0 };

    let ewc = state.ewc.take().map(|(mut anchor, mut fisher)| {
        anchor.pad_items(items);
        fisher.0.pad_items(items);
        (anchor, fisher)
    });
    let adam = AdamConfig {
        lr: loop_cfg.lr,
        ..AdamConfig::default()
    };

    observer.data_accessed(t, DataUse::Validation);
    let bsz = loop_cfg.batch_size;
    let steps = data.len().div_ceil(bsz);
    let chunk = replay.len().div_ceil(steps);
    let mut stopper = EarlyStopper::new(loop_cfg.patience);
    let mut best = model.clone();
    let mut epochs = Vec::new();
    let mut loss_sum = LossBreakdown::default();
    for epoch in 1..=loop_cfg.max_epochs {
        let tags = |name: &str| [rng::tag(name), t as u64, epoch as u64];
        let order = shuffled(data.len(), seed, &tags("data-order"));
        let replay_order = shuffled(replay.len(), seed, &tags("exemplar-order"));
        let mut epoch_sum = LossBreakdown::default();
        for step in 0..steps {
            let batch = &order[step * bsz..((step + 1) * bsz).min(order.len())];
            let mut terms = vec![LossTerm {
                kind: TermKind::CrossEntropy,
                weight: 1.0,
                item_range: items,
                normalizer: batch.len() as f64,
                examples: batch.iter().map(|&i| (&data[i].prefix[..], Target::Item(data[i].target))).collect(),
            }];
            if lambda_t > 0.0 {
                // the whole store when it fits the batch budget, else a wrapping window
                let take = replay.len().min(bsz);
                let sample = (0..take).map(|j| replay_order[(step * take + j) % replay.len()]);
                terms.push(LossTerm {
                    kind: TermKind::Distillation,
                    weight: lambda_t,
                    item_range: old_items,
                    normalizer: take as f64,
                    examples: sample.map(|i| (&replay[i].prefix[..], Target::Distribution(&teachers[i]))).collect(),
                });
            }
            // replayed exemplars behave like appended data: one pass per epoch
            let lo = (step * chunk).min(replay.len());
            let slice = &replay_order[lo..((step + 1) * chunk).min(replay.len())];
            if replay_weight > 0.0 && !slice.is_empty() {
                terms.push(LossTerm {
                    kind: TermKind::Replay,
                    weight: replay_weight,
                    item_range: items,
                    normalizer: batch.len() as f64,
                    examples: slice.iter().map(|&i| (&replay[i].prefix[..], Target::Item(replay[i].target))).collect(),
                });
            }
            let spec = BatchSpec {
                terms,
                dropout_seed: Some(rng::derive(seed, &[rng::tag("dropout"), t as u64, epoch as u64, step as u64])),
            };
            let ewc_ref = ewc.as_ref().map(|(a, f)| (a, f, method.ewc_strength));
            let b = train_model(&mut model, &adam, &spec, ewc_ref).map_err(|e| match e {
                Error::NonFiniteLoss(detail) => Error::Divergence { cycle: t, epoch, detail },
                other => other,
            })?;
            epoch_sum.add(&b);
        }
        let mean = epoch_sum.scaled(1.0 / steps as f64);
        loss_sum.add(&mean);
        let val = validation_score(&model, &cycle.validation)?;
        log::debug!(
            "{} cycle {t} epoch {epoch}: ce {:.5} kd {:.5} total {:.5} val R@20 {:.4}",
            method.label,
            mean.ce,
            mean.kd,
            mean.total,
            val
        );
        epochs.push(EpochRecord {
            cycle: t,
            epoch,
            losses: mean,
            lambda_t,
            val_recall20: val,
        });
        if stopper.observe(epoch, val) {
            best = model.clone();
        }
        if stopper.should_stop() {
            break;
        }
    }
    let model = best;
    let best_epoch = stopper.best_epoch();
    let mean_losses = loss_sum.scaled(1.0 / epochs.len() as f64);

    if let Some(strategy) = method.kind.selection() {
        let mut pool = cycle.train.clone();
        pool.extend(replay);
        let cfg = SelectionConfig {
            strategy,
            seed,
            normalize_features: method.normalize_features,
        };
        state.exemplars = exemplar::select_exemplars(&model, &pool, method.exemplar_capacity, &cfg, t)?;
        if method.kind == MethodKind::Ewc {
            let fisher = losses::fisher_diagonal(&model, &state.exemplars.to_vec(), items)?;
            state.ewc = Some((model.params.clone(), fisher));
        }
    }
    if method.kind == MethodKind::Joint {
        state.joint_buffer.extend(cycle.train.iter().cloned());
    }
    state.previous_model = Some(model.clone());
    state.model = Some(model);
    state.last_cycle = Some(t);
    Ok(CycleTraining {
        epochs,
        lambda_t,
        best_epoch,
        mean_losses,
    })
}

/// Everything one method/seed run produced.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub method: MethodSpec,
    pub seed: u64,
    pub reports: Vec<CycleReport>,
    pub epochs: Vec<EpochRecord>,
    /// The store after each trained cycle (exemplar methods only).
    pub exemplar_history: Vec<ExemplarSet>,
    /// The model after each trained cycle, if requested.
    pub checkpoints: Vec<ModelState>,
}

impl RunResult {
    pub fn mean_recall(&self, k: usize) -> f64 {
        metrics::aggregate(&self.reports, metrics::Weighting::PerCycle)
            .recall_at
            .get(&k)
            .copied()
            .unwrap_or(f64::NAN)
    }
}

/// Trains on cycles 0..T-2 in order, evaluating each on the following cycle.
pub fn run_experiment(
    datasets: &[CycleDataset],
    method: &MethodSpec,
    loop_cfg: &TrainLoopConfig,
    model_cfg: &ModelConfig,
    seed: u64,
    observer: &mut dyn RunObserver,
) -> Result<RunResult> {
    if datasets.len() < 2 {
        return Err(Error::TooFewCycles(datasets.len()));
    }
    method.validate()?;
    loop_cfg.validate()?;
    model_cfg.validate()?;
    let mut state = ExperimentState::new(method, seed);
    let mut result = RunResult {
        method: method.clone(),
        seed,
        reports: Vec::new(),
        epochs: Vec::new(),
        exemplar_history: Vec::new(),
        checkpoints: Vec::new(),
    };
    for pair in datasets.windows(2) {
        let (train, test) = (&pair[0], &pair[1]);
        let trained = update_model(&mut state, train, method, loop_cfg, model_cfg, observer)?;
        let model = state.model.as_ref().expect("model exists after a trained cycle");

        observer.data_accessed(test.cycle_id, DataUse::Test);
        let test_examples: Vec<TrainingExample> = test.all_examples().cloned().collect();
        let (ranks, unseen) = evaluate(model, &test_examples)?;
        observer.evaluated(train.cycle_id, test.cycle_id);

        let mut report = CycleReport::from_ranks(train.cycle_id, &ranks, &loop_cfg.ks)?;
        report.unseen_target_fraction = unseen as f64 / test_examples.len() as f64;
        report.mean_losses = trained.mean_losses;
        report.lambda_t = trained.lambda_t;
        report.epochs_trained = trained.epochs.len();
        report.best_epoch = trained.best_epoch;
        report.exemplar_count = state.exemplars.len();
        log::info!(
            "{} seed {seed} cycle {}: R@20 {:.4} after {} epochs (best {}), lambda {:.4}, {} exemplars",
            method.label,
            train.cycle_id,
            report.recall_at.get(&20).copied().unwrap_or(f64::NAN),
            report.epochs_trained,
            report.best_epoch,
            report.lambda_t,
            report.exemplar_count
        );
        state.history.push(report.clone());
        result.reports.push(report);
        result.epochs.extend(trained.epochs);
        if method.kind.selection().is_some() {
            result.exemplar_history.push(state.exemplars.clone());
        }
        if loop_cfg.keep_checkpoints {
            result.checkpoints.push(model.clone());
        }
        observer.cycle_finished(&state);
    }
    Ok(result)
}

/// Runs every method under every seed; results come back in method-major order.
pub fn compare_methods(
    datasets: &[CycleDataset],
    methods: &[MethodSpec],
    seeds: &[u64],
    loop_cfg: &TrainLoopConfig,
    model_cfg: &ModelConfig,
) -> Result<Vec<RunResult>> {
    if seeds.is_empty() {
        return Err(Error::Config {
            field: "seeds".into(),
            reason: "at least one seed is required".into(),
        });
    }
    let jobs: Vec<(&MethodSpec, u64)> = methods.iter().flat_map(|m| seeds.iter().map(move |&s| (m, s))).collect();
    jobs.par_iter()
        .map(|&(m, s)| run_experiment(datasets, m, loop_cfg, model_cfg, s, &mut NoObserver))
        .collect()
}
