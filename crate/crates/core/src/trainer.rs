//! Adadelta training with a plateau-triggered SGD fallback and a
//! sigmoid-ramped weight-decay schedule.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{argmax, Dropout, ModelState};
use crate::error::{Error, Result};
use crate::lexkb::LexicalKB;
use crate::numcore::{Gradients, Matrix, ParamStore, Rng};
use crate::scalar::{self, Scalar};
use crate::textio::TokenizedPair;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub rho: f64,
    pub epsilon: f64,
    pub adadelta_lr: f64,
    pub sgd_lr: f64,
    pub batch_size: usize,
    pub plateau_steps: usize,
    pub l2_full_ratio: f64,
    pub l2_full_step: usize,
    pub max_steps: usize,
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    /// Desk-scale schedule: plateau and decay ramp 100× shorter than the
    /// full-scale preset.
    fn default() -> Self {
        TrainConfig {
            rho: 0.95,
            epsilon: 1e-8,
            adadelta_lr: 0.5,
            sgd_lr: 3e-4,
            batch_size: 16,
            plateau_steps: 300,
            l2_full_ratio: 0.9e-5,
            l2_full_step: 1000,
            max_steps: 2000,
            eval_every: 100,
            seed: 1,
        }
    }
}

impl TrainConfig {
    /// Full-scale schedule constants.
    pub fn long_schedule() -> Self {
        TrainConfig {
            plateau_steps: 30_000,
            l2_full_step: 100_000,
            max_steps: 200_000,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::Config("rho must lie in (0, 1)".into()));
        }
        let reals = [
            ("epsilon", self.epsilon),
            ("adadelta_lr", self.adadelta_lr),
            ("sgd_lr", self.sgd_lr),
            ("l2_full_ratio", self.l2_full_ratio),
        ];
        if let Some((name, _)) = reals.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        let counts = [
            ("batch_size", self.batch_size),
            ("plateau_steps", self.plateau_steps),
            ("l2_full_step", self.l2_full_step),
            ("eval_every", self.eval_every),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        Ok(())
    }
}

/// Weight-decay ratio at step `t`: `σ(8·(t − F/2)/(F/2)) · full_ratio`
/// with `F = full_step`.
pub fn l2_ratio(t: usize, full_step: usize, full_ratio: f64) -> f64 {
    let half = full_step as f64 / 2.0;
    scalar::sigmoid((t as f64 - half) * 8.0 / half) * full_ratio
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Adadelta,
    Sgd,
}

/// Validation-driven phase switch. Every optimizer step counts toward the
/// plateau; an improving validation score resets the count.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauTracker {
    pub phase: Phase,
    pub best: f64,
    pub steps_since_improvement: usize,
    pub switched_at: Option<usize>,
    patience: usize,
}

impl PlateauTracker {
    pub fn new(patience: usize) -> Self {
        PlateauTracker {
            phase: Phase::Adadelta,
            best: f64::NEG_INFINITY,
            steps_since_improvement: 0,
            switched_at: None,
            patience,
        }
    }

    /// Records a validation score; returns whether it improved on the best.
    pub fn observe(&mut self, score: f64) -> bool {
        if score > self.best {
            self.best = score;
            self.steps_since_improvement = 0;
            true
        } else {
            false
        }
    }

    /// Marks optimizer step `t` as done and switches phase once the plateau
    /// reaches the patience.
    pub fn step(&mut self, t: usize) {
        self.steps_since_improvement += 1;
        if self.phase == Phase::Adadelta && self.steps_since_improvement >= self.patience {
            self.phase = Phase::Sgd;
            self.switched_at = Some(t);
        }
    }
}

/// Adadelta accumulators `E[g²]` and `E[Δ²]`, one pair per parameter.
#[derive(Debug, Clone)]
pub struct OptState<T> {
    pub sq_grad: Vec<Matrix<T>>,
    pub sq_delta: Vec<Matrix<T>>,
}

impl<T: Scalar> OptState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = || {
            params
                .entries()
                .iter()
                .map(|e| Matrix::zeros(e.value.rows(), e.value.cols()))
                .collect::<Vec<_>>()
        };
        OptState {
            sq_grad: zeros(),
            sq_delta: zeros(),
        }
    }
}

fn decay<T: Scalar>(params: &mut ParamStore<T>, ratio: f64) {
    let keep = T::lit(1.0 - ratio);
    for e in params.entries_mut() {
        for v in e.value.data_mut() {
            *v *= keep;
        }
    }
}

fn check_finite<T: Scalar>(params: &ParamStore<T>, t: usize) -> Result<()> {
    match params.entries().iter().find(|e| !e.value.is_finite()) {
        Some(e) => Err(Error::NonFinite(format!("parameter {} after step {t}", e.name))),
        None => Ok(()),
    }
}

/// One Adadelta update followed by the scheduled decay. The step size `lr`
/// scales the applied update; `E[Δ²]` tracks the unscaled update.
pub fn adadelta_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &Gradients<T>,
    opt: &mut OptState<T>,
    cfg: &TrainConfig,
    t: usize,
) -> Result<()> {
    let rho = T::lit(cfg.rho);
    let one_m = T::one() - rho;
    let eps = T::lit(cfg.epsilon);
    let lr = T::lit(cfg.adadelta_lr);
    for (((e, g), eg), ed) in params
        .entries_mut()
        .iter_mut()
        .zip(grads.iter())
        .zip(&mut opt.sq_grad)
        .zip(&mut opt.sq_delta)
    {
        let values = e.value.data_mut();
        let (eg, ed) = (eg.data_mut(), ed.data_mut());
        for (k, &gk) in g.data().iter().enumerate() {
            eg[k] = rho * eg[k] + one_m * gk * gk;
            let delta = -((ed[k] + eps).sqrt() / (eg[k] + eps).sqrt()) * gk;
            ed[k] = rho * ed[k] + one_m * delta * delta;
            values[k] += lr * delta;
        }
    }
    decay(params, l2_ratio(t, cfg.l2_full_step, cfg.l2_full_ratio));
    check_finite(params, t)
}

/// Plain gradient step followed by the scheduled decay.
pub fn sgd_step<T: Scalar>(params: &mut ParamStore<T>, grads: &Gradients<T>, cfg: &TrainConfig, t: usize) -> Result<()> {
    let lr = T::lit(cfg.sgd_lr);
    for (e, g) in params.entries_mut().iter_mut().zip(grads.iter()) {
        for (v, &gk) in e.value.data_mut().iter_mut().zip(g.data()) {
            *v -= lr * gk;
        }
    }
    decay(params, l2_ratio(t, cfg.l2_full_step, cfg.l2_full_ratio));
    check_finite(params, t)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub gold: usize,
    pub predicted: usize,
    pub correct: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub loss: f64,
    pub examples: usize,
    pub per_class: Vec<ClassCounts>,
}

/// Accuracy, mean cross-entropy and per-class counts with dropout off.
pub fn evaluate<T: Scalar>(model: &ModelState<T>, data: &[TokenizedPair], kb: &LexicalKB) -> Result<Metrics> {
    if data.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    let n_classes = model.config.n_classes;
    let outcomes = data
        .par_iter()
        .enumerate()
        .map(|(i, pair)| {
            let label = pair
                .label
                .filter(|&y| y < n_classes)
                .ok_or_else(|| Error::Data(format!("example {i} lacks a valid label")))?;
            let fwd = model.forward(pair, kb, Dropout::Off)?;
            let p = fwd.probs[label].as_f64();
            Ok((label, argmax(&fwd.probs), -p.ln()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut per_class = vec![
        ClassCounts {
            gold: 0,
            predicted: 0,
            correct: 0
        };
        n_classes
    ];
    let mut loss = 0.0;
    for &(gold, pred, l) in &outcomes {
        per_class[gold].gold += 1;
        per_class[pred].predicted += 1;
        if gold == pred {
            per_class[gold].correct += 1;
        }
        loss += l;
    }
    let correct: usize = per_class.iter().map(|c| c.correct).sum();
    Ok(Metrics {
        accuracy: correct as f64 / data.len() as f64,
        loss: loss / data.len() as f64,
        examples: data.len(),
        per_class,
    })
}

/// One metrics-log line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    /// Mean training loss since the previous record.
    pub loss: f64,
    pub val_acc: f64,
    pub val_loss: f64,
    pub phase: Phase,
    pub l2_ratio: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    /// Parameters with the best validation accuracy seen.
    pub best: ModelState<T>,
    pub best_step: usize,
    pub best_val_acc: f64,
    pub log: Vec<LogRecord>,
    pub switched_to_sgd_at: Option<usize>,
}

/// Serializes log records as JSON lines.
pub fn log_to_jsonl(log: &[LogRecord]) -> Result<String> {
    let mut out = String::new();
    for r in log {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

/// Trains `model` on `train`, selecting by accuracy on `val`.
pub fn train<T: Scalar>(
    model: ModelState<T>,
    train: &[TokenizedPair],
    val: &[TokenizedPair],
    kb: &LexicalKB,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data("training and validation splits must be non-empty".into()));
    }
    if cfg.max_steps == 0 {
        return Ok(TrainOutcome {
            best: model,
            best_step: 0,
            best_val_acc: f64::NAN,
            log: Vec::new(),
            switched_to_sgd_at: None,
        });
    }
    let mut model = model;
    let mut tracker = PlateauTracker::new(cfg.plateau_steps);
    tracker.observe(evaluate(&model, val, kb)?.accuracy);
    let mut best = model.clone();
    let mut best_step = 0;
    let mut opt = OptState::new(&model.params);
    let mut order_rng = Rng::stream(cfg.seed, 0);
    let mut dropout_rng = Rng::stream(cfg.seed, 1);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let mut log = Vec::new();
    let mut loss_sum = 0.0;
    let mut loss_n = 0usize;
    let mut batch = Vec::with_capacity(cfg.batch_size);

    for t in 1..=cfg.max_steps {
        batch.clear();
        while batch.len() < cfg.batch_size.min(train.len()) {
            if cursor == order.len() {
                order_rng.shuffle(&mut order);
                cursor = 0;
            }
            batch.push(train[order[cursor]].clone());
            cursor += 1;
        }
        let dropout = Dropout::On {
            seed: dropout_rng.next_u64(),
        };
        let (loss, grads) = model.loss_and_grads(&batch, kb, dropout)?;
        loss_sum += loss.as_f64();
        loss_n += 1;
        match tracker.phase {
            Phase::Adadelta => adadelta_step(&mut model.params, &grads, &mut opt, cfg, t)?,
            Phase::Sgd => sgd_step(&mut model.params, &grads, cfg, t)?,
        }
        let phase = tracker.phase;
        if t % cfg.eval_every == 0 || t == cfg.max_steps {
            let m = evaluate(&model, val, kb)?;
            log.push(LogRecord {
                step: t,
                loss: loss_sum / loss_n as f64,
                val_acc: m.accuracy,
                val_loss: m.loss,
                phase,
                l2_ratio: l2_ratio(t, cfg.l2_full_step, cfg.l2_full_ratio),
            });
            loss_sum = 0.0;
            loss_n = 0;
            if tracker.observe(m.accuracy) {
                best = model.clone();
                best_step = t;
            }
        }
        tracker.step(t);
    }
    Ok(TrainOutcome {
        best,
        best_step,
        best_val_acc: tracker.best,
        log,
        switched_to_sgd_at: tracker.switched_at,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::ParamStore;

    #[test]
    fn l2_ratio_reference_values() {
        assert!((l2_ratio(50_000, 100_000, 0.9e-5) - 0.45e-5).abs() < 1e-18);
        let start = l2_ratio(0, 100_000, 0.9e-5);
        assert!((start - 0.9e-5 / (1.0 + 8f64.exp())).abs() < 1e-20);
        assert!((start - 3.02e-9).abs() < 0.01e-9);
        let end = l2_ratio(100_000, 100_000, 0.9e-5);
        assert!((end - 0.8997e-5).abs() < 0.0001e-5);
    }

    #[test]
    fn l2_ratio_increases_within_bounds() {
        let vals: Vec<f64> = (0..=10).map(|k| l2_ratio(k * 10_000, 100_000, 0.9e-5)).collect();
        assert!(vals.windows(2).all(|w| w[1] > w[0]));
        assert!(vals.iter().all(|&v| v > 0.0 && v < 0.9e-5));
    }

    fn scalar_store(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("theta", Matrix::scalar(v)).unwrap();
        s
    }

    fn grads_of(store: &ParamStore<f64>, g: f64) -> Gradients<f64> {
        let mut gr = store.zeros_like();
        gr.get_mut(store.ids().next().unwrap()).data_mut()[0] = g;
        gr
    }

    #[test]
    fn first_adadelta_step_matches_hand_value() {
        let cfg = TrainConfig {
            l2_full_ratio: 1e-300,
            ..TrainConfig::default()
        };
        let mut s = scalar_store(0.0);
        let mut opt = OptState::new(&s);
        let g = grads_of(&s, 1.0);
        adadelta_step(&mut s, &g, &mut opt, &cfg, 1).unwrap();
        let delta = s.entries()[0].value.data()[0];
        let expected = -0.5 * (1e-8f64).sqrt() / (0.05f64 + 1e-8).sqrt();
        assert!((delta - expected).abs() < 1e-18);
        assert!((delta + 2.236e-4).abs() < 1e-7);
    }

    #[test]
    fn zero_gradient_only_decays() {
        let cfg = TrainConfig::default();
        let mut s = scalar_store(2.0);
        let mut opt = OptState::new(&s);
        let g = grads_of(&s, 0.0);
        adadelta_step(&mut s, &g, &mut opt, &cfg, 700).unwrap();
        let expected = 2.0 * (1.0 - l2_ratio(700, 1000, 0.9e-5));
        assert_eq!(s.entries()[0].value.data()[0], expected);
    }

    #[test]
    fn non_finite_update_is_an_error() {
        let cfg = TrainConfig::default();
        let mut s = scalar_store(1.0);
        let g = grads_of(&s, f64::NAN);
        assert!(matches!(sgd_step(&mut s, &g, &cfg, 1), Err(Error::NonFinite(_))));
    }

    #[test]
    fn plateau_switches_exactly_at_patience() {
        let mut tr = PlateauTracker::new(5);
        assert!(tr.observe(0.5));
        for t in 1..=12 {
            assert_eq!(tr.phase, Phase::Adadelta.max_phase(t > 5));
            if t % 2 == 0 {
                assert!(!tr.observe(0.5));
            }
            tr.step(t);
        }
        assert_eq!(tr.switched_at, Some(5));
        // improvement after the switch never returns to Adadelta
        assert!(tr.observe(0.9));
        tr.step(13);
        assert_eq!(tr.phase, Phase::Sgd);
    }

    #[test]
    fn improvement_resets_the_plateau() {
        let mut tr = PlateauTracker::new(3);
        tr.observe(0.1);
        tr.step(1);
        tr.step(2);
        assert!(tr.observe(0.2));
        tr.step(3);
        tr.step(4);
        assert_eq!(tr.phase, Phase::Adadelta);
        tr.step(5);
        assert_eq!(tr.switched_at, Some(5));
    }

    impl Phase {
        fn max_phase(self, sgd: bool) -> Phase {
            if sgd {
                Phase::Sgd
            } else {
                self
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig::long_schedule().validate().is_ok());
        assert_eq!(TrainConfig::long_schedule().plateau_steps, 30_000);
        assert!(TrainConfig { rho: 1.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { sgd_lr: 0.0, ..TrainConfig::default() }.validate().is_err());
    }
}
