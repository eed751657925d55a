//! Dataset splits, loss, optimizer and the training loop.

use std::collections::HashSet;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{auc_of, auc_of_scores, score_shots};
use crate::gradcore::{Graph, NodeId, Parameters};
use crate::model::{CcnnConfig, CcnnModel, InputNorm, Mode};
use crate::shots::{clip_augment, whitenoise_gaps, Label, Shot};

/// Disruptive shots kept in the scarce-disruption composition.
pub const CASE2_DISRUPTIVE: usize = 20;
/// Share of non-disruptive shots kept in the reduced-normal composition.
pub const CASE3_FRACTION: f64 = 0.33;

const STREAM_TEST: u64 = 1;
const STREAM_CASE: u64 = 2;
const STREAM_VAL: u64 = 3;
const STREAM_EPOCH: u64 = 1 << 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Training-set composition: 1 all shots, 2 all non-disruptive plus 20
    /// disruptive, 3 a third of the non-disruptive plus all disruptive.
    pub case: u8,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Weight each class by inverse frequency. Unset means on for case 2
    /// and off otherwise.
    pub class_weighting: Option<bool>,
    /// Stop after this many epochs without a better validation AUC.
    pub patience: Option<usize>,
    pub test_fraction: f64,
    pub val_fraction: f64,
    /// Re-clip non-disruptive shots to a random prefix every epoch.
    pub clip_augment: bool,
    /// Chance that a non-disruptive shot is clipped in a given epoch.
    pub clip_probability: f64,
    pub gap_rate: f64,
    pub gap_len_ms: f64,
    /// Standardize inputs with statistics of the training shots.
    pub normalize_inputs: bool,
    /// Validate and checkpoint an exponential moving average of the
    /// weights with this per-step decay instead of the raw weights.
    pub ema_decay: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            case: 1,
            epochs: 60,
            batch_size: 16,
            learning_rate: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            class_weighting: None,
            patience: Some(20),
            test_fraction: 0.2,
            val_fraction: 0.15,
            clip_augment: true,
            clip_probability: 0.5,
            gap_rate: 0.0,
            gap_len_ms: 50.0,
            normalize_inputs: true,
            ema_decay: Some(0.99),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(1..=3).contains(&self.case) {
            return bad(format!("case must be 1, 2 or 3, got {}", self.case));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad(format!("invalid learning_rate {}", self.learning_rate));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.adam_eps.is_finite() && self.adam_eps > 0.0) {
            return bad(format!("invalid adam_eps {}", self.adam_eps));
        }
        for (name, f) in [
            ("test_fraction", self.test_fraction),
            ("val_fraction", self.val_fraction),
        ] {
            if !(0.0..1.0).contains(&f) {
                return bad(format!("{name} must lie in [0, 1), got {f}"));
            }
        }
        if !(0.0..=1.0).contains(&self.clip_probability) {
            return bad(format!(
                "clip_probability must lie in [0, 1], got {}",
                self.clip_probability
            ));
        }
        if !(0.0..=1.0).contains(&self.gap_rate) {
            return bad(format!(
                "gap_rate must lie in [0, 1], got {}",
                self.gap_rate
            ));
        }
        if !(self.gap_len_ms.is_finite() && self.gap_len_ms > 0.0) {
            return bad(format!("invalid gap_len_ms {}", self.gap_len_ms));
        }
        if let Some(d) = self.ema_decay {
            if !(0.0..1.0).contains(&d) {
                return bad(format!("ema_decay must lie in [0, 1), got {d}"));
            }
        }
        Ok(())
    }

    pub fn class_weighting_enabled(&self) -> bool {
        self.class_weighting.unwrap_or(self.case == 2)
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Indices of `shots` drawn per label: `round(n * fraction)` of each class.
/// Returned sorted.
fn stratified_pick(shots: &[&Shot], fraction: f64, rng: &mut ChaCha8Rng) -> HashSet<usize> {
    let mut picked = HashSet::new();
    for label in [Label::Disruptive, Label::Nondisruptive] {
        let mut idx: Vec<usize> = (0..shots.len())
            .filter(|&i| shots[i].label == label)
            .collect();
        idx.shuffle(rng);
        let take = (idx.len() as f64 * fraction).round() as usize;
        picked.extend(idx.into_iter().take(take));
    }
    picked
}

#[derive(Clone, Debug)]
pub struct Split {
    pub train: Vec<Shot>,
    pub test: Vec<Shot>,
}

/// Splits off a stratified test set, then applies the case composition to
/// the rest. The test set depends only on `shots`, `test_fraction` and
/// `seed`, so all cases share it. Shots keep their input order.
pub fn split_case(shots: &[Shot], case: u8, seed: u64, test_fraction: f64) -> Result<Split> {
    if !(1..=3).contains(&case) {
        return Err(Error::Config(format!("case must be 1, 2 or 3, got {case}")));
    }
    let all: Vec<&Shot> = shots.iter().collect();
    if !all.iter().any(|s| s.label.is_disruptive()) || all.iter().all(|s| s.label.is_disruptive()) {
        return Err(Error::Composition("the dataset needs both labels".into()));
    }
    let test_idx = stratified_pick(&all, test_fraction, &mut rng_for(seed, STREAM_TEST));
    let test: Vec<Shot> = (0..shots.len())
        .filter(|i| test_idx.contains(i))
        .map(|i| shots[i].clone())
        .collect();
    let rest: Vec<usize> = (0..shots.len()).filter(|i| !test_idx.contains(i)).collect();

    let mut case_rng = rng_for(seed, STREAM_CASE);
    let keep: HashSet<usize> = match case {
        1 => rest.iter().copied().collect(),
        2 => {
            let mut dis: Vec<usize> = rest
                .iter()
                .copied()
                .filter(|&i| shots[i].label.is_disruptive())
                .collect();
            if dis.len() < CASE2_DISRUPTIVE {
                return Err(Error::Composition(format!(
                    "case 2 needs {CASE2_DISRUPTIVE} disruptive training shots, found {}",
                    dis.len()
                )));
            }
            dis.shuffle(&mut case_rng);
            dis.truncate(CASE2_DISRUPTIVE);
            rest.iter()
                .copied()
                .filter(|&i| !shots[i].label.is_disruptive())
                .chain(dis)
                .collect()
        }
        _ => {
            let mut non: Vec<usize> = rest
                .iter()
                .copied()
                .filter(|&i| !shots[i].label.is_disruptive())
                .collect();
            non.shuffle(&mut case_rng);
            non.truncate((non.len() as f64 * CASE3_FRACTION).round() as usize);
            rest.iter()
                .copied()
                .filter(|&i| shots[i].label.is_disruptive())
                .chain(non)
                .collect()
        }
    };
    let train = rest
        .into_iter()
        .filter(|i| keep.contains(i))
        .map(|i| shots[i].clone())
        .collect();
    Ok(Split { train, test })
}

/// Weighted binary cross-entropy on a logit.
pub fn bce_loss(logit: f64, label: f64, weight: f64) -> f64 {
    weight * crate::gradcore::bce_with_logits(logit, label)
}

/// Adaptive moment estimation over a model's parameters in visit order.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(model: &impl Parameters, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let mut m = Vec::new();
        model.visit("", &mut |_, t| m.push(vec![0.0; t.numel()]));
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            v: m.clone(),
            m,
        }
    }

    /// Applies one update from the gradients stored on the parameters.
    pub fn step(&mut self, model: &mut impl Parameters) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let mut i = 0;
        model.visit_mut("", &mut |_, t| {
            let grad = t.grad().map(<[f64]>::to_vec);
            if let Some(grad) = grad {
                let (m, v) = (&mut self.m[i], &mut self.v[i]);
                for (k, p) in t.data_mut().iter_mut().enumerate() {
                    let g = grad[k];
                    m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g;
                    v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g * g;
                    *p -= self.lr * (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
                }
            }
            i += 1;
        });
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_config: TrainConfig,
    pub model_config: CcnnConfig,
    pub param_count: usize,
    pub n_train: usize,
    pub n_train_disruptive: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub class_weights: [f64; 2],
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_auc: Option<f64>,
    pub final_train_auc: Option<f64>,
    pub test_auc: Option<f64>,
    /// Not serialized, so reports from identical runs compare equal.
    #[serde(skip)]
    pub wall_clock_s: f64,
}

/// (disruptive, non-disruptive) weights: inverse class frequency scaled so
/// the weights average to one over the set, or ones when disabled.
fn class_weights(shots: &[Shot], enabled: bool) -> [f64; 2] {
    let n = shots.len() as f64;
    let pos = shots.iter().filter(|s| s.label.is_disruptive()).count() as f64;
    let neg = n - pos;
    if !enabled || pos == 0.0 || neg == 0.0 {
        return [1.0, 1.0];
    }
    [n / (2.0 * pos), n / (2.0 * neg)]
}

/// Trains `model` on `train` (a validation share is held out internally)
/// and returns the checkpoint with the best validation AUC. Without a
/// usable validation set the final weights are returned.
pub fn fit(
    model: CcnnModel,
    train: &[Shot],
    cfg: &TrainConfig,
) -> Result<(CcnnModel, TrainReport)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Composition("the training set is empty".into()));
    }
    let started = Instant::now();
    let refs: Vec<&Shot> = train.iter().collect();
    let val_idx = stratified_pick(&refs, cfg.val_fraction, &mut rng_for(cfg.seed, STREAM_VAL));
    let (val, fit_set): (Vec<Shot>, Vec<Shot>) = {
        let mut val = Vec::new();
        let mut rest = Vec::new();
        for (i, s) in train.iter().enumerate() {
            if val_idx.contains(&i) {
                val.push(s.clone());
            } else {
                rest.push(s.clone());
            }
        }
        (val, rest)
    };
    if fit_set.is_empty() {
        return Err(Error::Composition(
            "no shots left after the validation split".into(),
        ));
    }
    let val_usable =
        val.iter().any(|s| s.label.is_disruptive()) && val.iter().any(|s| !s.label.is_disruptive());
    let weights = class_weights(&fit_set, cfg.class_weighting_enabled());

    let mut model = model;
    if cfg.normalize_inputs {
        model.input_norm = InputNorm::estimate(
            model.config.in_channels,
            fit_set.iter().map(|s| &s.channels),
        )?;
    }
    let mut adam = Adam::new(
        &model,
        cfg.learning_rate,
        cfg.beta1,
        cfg.beta2,
        cfg.adam_eps,
    );
    let mut averaged = model.clone();
    let mut best = model.clone();
    let mut best_auc: Option<f64> = None;
    let mut best_epoch = 0;
    let mut records = Vec::new();

    for epoch in 1..=cfg.epochs {
        let mut rng = rng_for(cfg.seed, STREAM_EPOCH + epoch as u64);
        let mut epoch_shots = Vec::with_capacity(fit_set.len());
        for s in &fit_set {
            let clip = cfg.clip_augment
                && !s.label.is_disruptive()
                && rng.random::<f64>() < cfg.clip_probability;
            let mut s = if clip {
                clip_augment(s, &mut rng)?
            } else {
                s.clone()
            };
            if cfg.gap_rate > 0.0 {
                s = whitenoise_gaps(&s, &mut rng, cfg.gap_rate, cfg.gap_len_ms)?;
            }
            epoch_shots.push(s);
        }
        let mut order: Vec<usize> = (0..epoch_shots.len()).collect();
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let shots: Vec<&Shot> = batch.iter().map(|&i| &epoch_shots[i]).collect();
            let loss = train_step(&mut model, &mut adam, &shots, weights).map_err(|e| match e {
                Error::NonFiniteLoss { shots, .. } => Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    shots,
                },
                other => other,
            })?;
            loss_sum += loss * shots.len() as f64;
            if let Some(d) = cfg.ema_decay {
                ema_update(&mut averaged, &model, d);
            }
        }
        let current = if cfg.ema_decay.is_some() {
            &averaged
        } else {
            &model
        };
        let train_loss = loss_sum / epoch_shots.len() as f64;

        let val_auc = if val_usable {
            Some(auc_of(current, &val)?)
        } else {
            None
        };
        log::info!("epoch {epoch}: loss {train_loss:.5} val auc {val_auc:?}");
        records.push(EpochRecord {
            epoch,
            train_loss,
            val_auc,
        });
        match (val_auc, best_auc) {
            (Some(a), Some(b)) if a <= b => {
                if cfg.patience.is_some_and(|p| epoch - best_epoch >= p) {
                    log::info!("early stop after epoch {epoch}");
                    break;
                }
            }
            (Some(a), _) => {
                best_auc = Some(a);
                best_epoch = epoch;
                best = current.clone();
            }
            (None, _) => {
                best_epoch = epoch;
                best = current.clone();
            }
        }
    }
    best.visit_mut("", &mut |_, t| t.zero_grad());

    let final_train_auc = auc_of_scores(&score_shots(&best, &fit_set)?).ok();
    let report = TrainReport {
        train_config: cfg.clone(),
        model_config: best.config.clone(),
        param_count: best.param_count(),
        n_train: train.len(),
        n_train_disruptive: train.iter().filter(|s| s.label.is_disruptive()).count(),
        n_val: val.len(),
        n_test: 0,
        class_weights: weights,
        epochs: records,
        best_epoch,
        best_val_auc: best_auc,
        final_train_auc,
        test_auc: None,
        wall_clock_s: started.elapsed().as_secs_f64(),
    };
    Ok((best, report))
}

/// `avg += (1 - decay) * (model - avg)`, parameter by parameter.
fn ema_update(avg: &mut CcnnModel, model: &CcnnModel, decay: f64) {
    let mut flat = Vec::new();
    model.visit("", &mut |_, t| flat.extend_from_slice(t.data()));
    let mut i = 0;
    avg.visit_mut("", &mut |_, t| {
        for v in t.data_mut() {
            *v += (1.0 - decay) * (flat[i] - *v);
            i += 1;
        }
    });
}

/// One optimizer step on a batch; returns the mean weighted loss.
fn train_step(
    model: &mut CcnnModel,
    adam: &mut Adam,
    shots: &[&Shot],
    weights: [f64; 2],
) -> Result<f64> {
    let mut g = Graph::new();
    let vars = model.bind(&mut g, true);
    let max_len = shots.iter().map(|s| s.len()).max().unwrap_or(1);
    let grid = model.config.grid_for(max_len)?;
    let kernels = model.sample_kernels(&mut g, &vars, &grid)?;
    let mut losses: Vec<NodeId> = Vec::with_capacity(shots.len());
    for s in shots {
        let x = g.constant(s.channels.clone());
        let logit = model.forward_on_graph(&mut g, &vars, &kernels, x, Mode::Label)?;
        let w = if s.label.is_disruptive() {
            weights[0]
        } else {
            weights[1]
        };
        losses.push(g.bce_with_logits(logit, s.label.target(), w)?);
    }
    let bad: Vec<String> = shots
        .iter()
        .zip(&losses)
        .filter(|(_, &l)| !g.value(l).all_finite())
        .map(|(s, _)| s.id.clone())
        .collect();
    if !bad.is_empty() {
        return Err(Error::NonFiniteLoss {
            epoch: 0,
            batch: 0,
            shots: bad,
        });
    }
    let mut total = losses[0];
    for &l in &losses[1..] {
        total = g.add(total, l)?;
    }
    let mean = g.scale(total, 1.0 / shots.len() as f64);
    let value = g.value(mean).data()[0];
    g.backward(mean)?;
    model.collect_grads(&g, &vars)?;
    adam.step(model);
    Ok(value)
}

/// Result of a complete case run: split, fit and test evaluation.
#[derive(Clone, Debug)]
pub struct CaseRun {
    pub model: CcnnModel,
    pub report: TrainReport,
    pub split: Split,
}

/// Splits `shots` per `cfg.case`, trains a fresh model and scores the
/// held-out test set.
pub fn run_case(shots: &[Shot], model_cfg: &CcnnConfig, cfg: &TrainConfig) -> Result<CaseRun> {
    cfg.validate()?;
    let split = split_case(shots, cfg.case, cfg.seed, cfg.test_fraction)?;
    let model = CcnnModel::init(model_cfg)?;
    let (model, mut report) = fit(model, &split.train, cfg)?;
    report.n_test = split.test.len();
    report.test_auc = if split.test.is_empty() {
        None
    } else {
        Some(auc_of(&model, &split.test)?)
    };
    Ok(CaseRun {
        model,
        report,
        split,
    })
}
