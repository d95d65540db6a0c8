//! Loss, Adam, L2 regularization, early stopping and evaluation.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use crate::autodiff::{floor_prob, Tape, Var};
use crate::data::{batchify, Batch, EncodedExample};
use crate::dropout::Mode;
use crate::error::{Error, Result};
use crate::layers::PAD_INDEX;
use crate::model::Model;
use crate::params::{ParamKind, ParamStore};

/// Negative log-probability of `label`, with probabilities floored at 1e-12.
pub fn cross_entropy(probs: &[f64], label: usize) -> Result<f64> {
    let p = probs.get(label).ok_or(Error::Index {
        index: label,
        extent: probs.len(),
    })?;
    Ok(-floor_prob(*p).ln())
}

/// `lambda * sum(w^2)` over weight matrices. Biases and embeddings are excluded.
pub fn l2_penalty(params: &ParamStore, lambda: f64) -> f64 {
    let sq: f64 = params
        .iter()
        .filter(|p| p.kind == ParamKind::Weight)
        .flat_map(|p| p.value.data())
        .map(|w| w * w)
        .sum();
    lambda * sq
}

/// The same penalty recorded on `tape` against the bound parameter variables.
pub fn l2_term(
    tape: &mut Tape,
    params: &ParamStore,
    vars: &[Var],
    lambda: f64,
) -> Result<Option<Var>> {
    if lambda == 0.0 {
        return Ok(None);
    }
    let mut total: Option<Var> = None;
    for (p, &v) in params.iter().zip(vars) {
        if p.kind != ParamKind::Weight {
            continue;
        }
        let sq = tape.mul(v, v)?;
        let s = tape.sum(sq);
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    Ok(total.map(|t| tape.scale(t, lambda)))
}

/// Bias-corrected Adam.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore, learning_rate: f64) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        AdamState {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update. `None` entries mark frozen parameters, which are left
    /// untouched along with their moments.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Vec<f64>>]) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Contract(format!(
                "adam: {} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (k, (param, grad)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = grad else { continue };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let values = param.value.data_mut();
            if g.len() != values.len() {
                return Err(Error::Dimension {
                    op: "adam",
                    lhs: vec![values.len()],
                    rhs: vec![g.len()],
                });
            }
            for i in 0..values.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                values[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub l2_lambda: f64,
    pub patience: usize,
    pub seed: u64,
    /// Record elapsed seconds in the metrics. Off by default so that reruns
    /// produce identical files.
    pub wall_clock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 32,
            learning_rate: 0.001,
            l2_lambda: 1e-5,
            patience: 5,
            seed: 1,
            wall_clock: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.patience == 0 {
            return Err(Error::Config(
                "epochs, batch_size and patience must be at least 1".into(),
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0)
            || !(self.l2_lambda.is_finite() && self.l2_lambda >= 0.0)
        {
            return Err(Error::Config(
                "learning_rate and l2_lambda must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Stable 64-bit mix of several seed components.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x243f_6a88_85a3_08d3;
    for &p in parts {
        h ^= p;
        h = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

/// Index of the largest entry; ties go to the lower index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
}

/// Accuracy and mean cross-entropy of per-row probabilities against labels.
pub fn score(probs: &[f64], num_classes: usize, labels: &[usize]) -> Result<Evaluation> {
    if labels.is_empty() || probs.len() != labels.len() * num_classes {
        return Err(Error::Dimension {
            op: "score",
            lhs: vec![probs.len()],
            rhs: vec![labels.len(), num_classes],
        });
    }
    let mut correct = 0;
    let mut loss = 0.0;
    for (row, &label) in probs.chunks(num_classes).zip(labels) {
        correct += usize::from(argmax(row) == label);
        loss += cross_entropy(row, label)?;
    }
    let n = labels.len() as f64;
    Ok(Evaluation {
        accuracy: correct as f64 / n,
        loss: loss / n,
    })
}

/// Eval-mode accuracy and mean loss over `batches`.
pub fn evaluate(model: &Model, batches: &[Batch]) -> Result<Evaluation> {
    if batches.is_empty() {
        return Err(Error::Input("evaluation set is empty".into()));
    }
    let classes = model.config().num_classes;
    let mut probs = Vec::new();
    let mut labels = Vec::new();
    for batch in batches {
        probs.extend_from_slice(model.predict(batch)?.data());
        labels.extend_from_slice(&batch.labels);
    }
    score(&probs, classes, &labels)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub seconds: f64,
}

pub const METRICS_HEADER: &str = "epoch,train_loss,train_acc,val_loss,val_acc,seconds";

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.epoch, r.train_loss, r.train_acc, r.val_loss, r.val_acc, r.seconds
        );
    }
    out
}

pub fn write_metrics_csv(path: &Path, rows: &[EpochMetrics]) -> Result<()> {
    std::fs::write(path, metrics_csv(rows)).map_err(|e| Error::io(path, e))
}

/// Patience-based stopping on strictly improving validation accuracy.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    stale: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: None,
            stale: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, val_acc: f64) -> Verdict {
        match self.best {
            Some((_, best)) if val_acc.partial_cmp(&best) != Some(std::cmp::Ordering::Greater) => {
                self.stale += 1;
                if self.stale >= self.patience {
                    Verdict::Stop
                } else {
                    Verdict::Continue
                }
            }
            _ => {
                self.best = Some((epoch, val_acc));
                self.stale = 0;
                Verdict::Improved
            }
        }
    }

    /// Epoch and accuracy of the best observation so far.
    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub metrics: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

/// Runs one optimization step on `batch` in train mode and returns the batch
/// loss (cross-entropy plus penalty).
fn train_step(
    model: &mut Model,
    adam: &mut AdamState,
    batch: &Batch,
    dropout: &mut crate::dropout::Dropout,
    l2_lambda: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = model.params().bind(&mut tape);
    let out = model.forward(&mut tape, &vars, &batch.premise, &batch.hypothesis, dropout)?;
    let mut loss = tape.cross_entropy(out.probs, &batch.labels)?;
    if let Some(pen) = l2_term(&mut tape, model.params(), &vars, l2_lambda)? {
        loss = tape.add(loss, pen)?;
    }
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Ok(value);
    }
    tape.backward(loss)?;
    let emb = model.embedding_id();
    let trainable_emb = model.config().trainable_embeddings;
    let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(vars.len());
    for (id, &v) in model.params().ids().zip(&vars) {
        if id == emb {
            if !trainable_emb {
                grads.push(None);
                continue;
            }
            let mut g = tape.take_grad(v);
            let d = model.config().embedding_dim;
            g[PAD_INDEX * d..(PAD_INDEX + 1) * d].fill(0.0);
            grads.push(Some(g));
        } else {
            grads.push(Some(tape.take_grad(v)));
        }
    }
    adam.step(model.params_mut(), &grads)?;
    Ok(value)
}

/// Trains `model` with Adam and early stopping, leaving it at the parameters
/// of the epoch with the best validation accuracy.
///
/// Train metrics are measured in eval mode after each epoch.
pub fn train(
    model: &mut Model,
    train_set: &[EncodedExample],
    val_set: &[EncodedExample],
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Input(
            "training and validation sets must be non-empty".into(),
        ));
    }
    let train_eval = batchify(train_set, config.batch_size, None)?;
    let val_batches = batchify(val_set, config.batch_size, None)?;
    let mut adam = AdamState::new(model.params(), config.learning_rate);
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best_params = model.params().clone();
    let mut best_val_loss = f64::INFINITY;
    let mut metrics = Vec::new();
    let mut stopped_early = false;
    let start = Instant::now();

    for epoch in 1..=config.epochs {
        let batches = batchify(
            train_set,
            config.batch_size,
            Some(mix_seed(&[config.seed, epoch as u64, 1])),
        )?;
        let mut dropout = model
            .config()
            .dropout(Mode::Train, mix_seed(&[config.seed, epoch as u64, 2]))?;
        for (b, batch) in batches.iter().enumerate() {
            let loss = train_step(model, &mut adam, batch, &mut dropout, config.l2_lambda)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
        }
        let tr = evaluate(model, &train_eval)?;
        let va = evaluate(model, &val_batches)?;
        metrics.push(EpochMetrics {
            epoch,
            train_loss: tr.loss,
            train_acc: tr.accuracy,
            val_loss: va.loss,
            val_acc: va.accuracy,
            seconds: if config.wall_clock {
                start.elapsed().as_secs_f64()
            } else {
                0.0
            },
        });
        match stopper.observe(epoch, va.accuracy) {
            Verdict::Improved => {
                best_params = model.params().clone();
                best_val_loss = va.loss;
            }
            Verdict::Continue => {}
            Verdict::Stop => {
                stopped_early = true;
                break;
            }
        }
    }
    let (best_epoch, best_val_acc) = stopper.best().expect("at least one epoch");
    model.params_mut().copy_from(&best_params)?;
    Ok(TrainReport {
        metrics,
        best_epoch,
        best_val_acc,
        best_val_loss,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::gradcheck::numeric_gradient;
    use crate::model::ModelConfig;
    use crate::placement::PlacementSet;
    use crate::tensor::Tensor;

    #[test]
    fn cross_entropy_cases() {
        assert_eq!(cross_entropy(&[0.0, 1.0, 0.0], 1).unwrap(), 0.0);
        let u = [1.0 / 3.0; 3];
        assert!((cross_entropy(&u, 2).unwrap() - 3f64.ln()).abs() < 1e-15);
        assert!((cross_entropy(&[1.0, 0.0], 1).unwrap() - 1e-12f64.ln().abs()).abs() < 1e-9);
        assert!(matches!(cross_entropy(&u, 3), Err(Error::Index { .. })));
    }

    #[test]
    fn batch_loss_is_mean_of_example_losses() {
        let probs: [f64; 9] = [0.7, 0.2, 0.1, 0.1, 0.3, 0.6, 0.25, 0.5, 0.25];
        let labels = [0, 2, 1];
        let each: Vec<f64> = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -probs[i * 3 + l].ln())
            .collect();
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::new(&[3, 3], probs.to_vec()).unwrap());
        let loss = tape.cross_entropy(p, &labels).unwrap();
        let mean = each.iter().sum::<f64>() / 3.0;
        assert!((tape.value(loss).item() - mean).abs() < 1e-15);
        assert!((score(&probs, 3, &labels).unwrap().loss - mean).abs() < 1e-15);
    }

    fn two_by_two_store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", ParamKind::Weight, Tensor::full(&[2, 2], 1.0));
        s.add("b", ParamKind::Bias, Tensor::full(&[2], 5.0));
        s.add("emb", ParamKind::Embedding, Tensor::full(&[3, 2], 7.0));
        s
    }

    #[test]
    fn l2_penalty_cases() {
        let s = two_by_two_store();
        assert_eq!(l2_penalty(&s, 0.0), 0.0);
        assert_eq!(l2_penalty(&s, 0.5), 2.0);
        let mut tape = Tape::new();
        let vars = s.bind(&mut tape);
        let term = l2_term(&mut tape, &s, &vars, 0.5).unwrap().unwrap();
        assert_eq!(tape.value(term).item(), 2.0);
        assert!(l2_term(&mut tape, &s, &vars, 0.0).unwrap().is_none());
    }

    #[test]
    fn l2_gradient_is_two_lambda_w() {
        let lambda = 0.3;
        let mut s = ParamStore::new();
        let w = Tensor::new(&[2, 3], vec![0.5, -1.0, 2.0, 0.1, 0.0, -0.7]).unwrap();
        s.add("w", ParamKind::Weight, w.clone());
        s.add("b", ParamKind::Bias, Tensor::full(&[3], 1.0));
        let mut tape = Tape::new();
        let vars = s.bind(&mut tape);
        let term = l2_term(&mut tape, &s, &vars, lambda).unwrap().unwrap();
        tape.backward(term).unwrap();
        let analytic = tape.grad(vars[0]);
        let mut values = w.data().to_vec();
        let numeric = numeric_gradient(&mut values, |v| {
            let mut probe = s.clone();
            probe.iter_mut().next().unwrap().value = Tensor::new(&[2, 3], v.to_vec())?;
            Ok(l2_penalty(&probe, lambda))
        })
        .unwrap();
        for ((a, n), x) in analytic.data().iter().zip(&numeric).zip(w.data()) {
            assert!((a - 2.0 * lambda * x).abs() < 1e-15);
            assert!((a - n).abs() < 1e-8);
        }
        assert!(tape.grad(vars[1]).data().iter().all(|&g| g == 0.0));
    }

    fn scalar_store(x: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("x", ParamKind::Weight, Tensor::vector(vec![x]));
        s
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut s = two_by_two_store();
        let before = s.clone();
        let mut adam = AdamState::new(&s, 0.001);
        let grads: Vec<_> = s.iter().map(|p| Some(vec![0.0; p.value.len()])).collect();
        adam.step(&mut s, &grads).unwrap();
        assert_eq!(s, before);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn adam_first_step_by_hand() {
        let mut s = scalar_store(0.0);
        let mut adam = AdamState::new(&s, 0.001);
        adam.step(&mut s, &[Some(vec![1.0])]).unwrap();
        let x = s.iter().next().unwrap().value.item();
        assert!((x - (-0.000999999990)).abs() < 1e-15);
    }

    #[test]
    fn adam_three_step_trajectory() {
        // Hand evaluation with g = 1: m_t = 1 - 0.9^t, v_t = 1 - 0.999^t,
        // so both bias-corrected moments are exactly 1 and every step moves
        // the parameter by lr / (1 + eps).
        let lr = 0.001;
        let step = lr / (1.0 + 1e-8);
        let expected = [1.0 - step, 1.0 - 2.0 * step, 1.0 - 3.0 * step];
        let mut s = scalar_store(1.0);
        let mut adam = AdamState::new(&s, lr);
        for e in expected {
            adam.step(&mut s, &[Some(vec![1.0])]).unwrap();
            assert!((s.iter().next().unwrap().value.item() - e).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_varying_gradient_by_hand() {
        let gs = [2.0, -1.0, 0.5];
        let mut m = 0.0;
        let mut v = 0.0;
        let mut x = 0.3;
        let mut s = scalar_store(x);
        let mut adam = AdamState::new(&s, 0.01);
        for (t, g) in gs.iter().enumerate() {
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t as i32 + 1));
            let vh = v / (1.0 - 0.999f64.powi(t as i32 + 1));
            x -= 0.01 * mh / (vh.sqrt() + 1e-8);
            adam.step(&mut s, &[Some(vec![*g])]).unwrap();
            assert!((s.iter().next().unwrap().value.item() - x).abs() < 1e-15);
        }
    }

    #[test]
    fn adam_skips_frozen_parameters() {
        let mut s = two_by_two_store();
        let before = s.clone();
        let mut adam = AdamState::new(&s, 0.1);
        adam.step(&mut s, &[Some(vec![1.0; 4]), None, None])
            .unwrap();
        assert_ne!(s.iter().next(), before.iter().next());
        assert_eq!(s.iter().nth(2), before.iter().nth(2));
        assert!(adam.step(&mut s, &[None]).is_err());
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.2, 0.5, 0.5]), 1);
        assert_eq!(argmax(&[1.0 / 3.0; 3]), 0);
        assert_eq!(argmax(&[0.1, 0.2, 0.7]), 2);
    }

    #[test]
    fn uniform_predictions_score_class_zero_fraction() {
        let labels = [0, 1, 0, 2, 2, 0, 1];
        let probs = vec![1.0 / 3.0; labels.len() * 3];
        let e = score(&probs, 3, &labels).unwrap();
        assert_eq!(e.accuracy, 3.0 / 7.0);
    }

    #[test]
    fn early_stopping_rules() {
        let mut s = EarlyStopping::new(1);
        assert_eq!(s.observe(1, 0.9), Verdict::Improved);
        assert_eq!(s.observe(2, 0.8), Verdict::Stop);
        assert_eq!(s.best(), Some((1, 0.9)));

        let mut s = EarlyStopping::new(3);
        let accs = [0.5, 0.6, 0.6, 0.55, 0.7, 0.65, 0.7, 0.7];
        let verdicts: Vec<Verdict> = accs
            .iter()
            .enumerate()
            .map(|(i, &a)| s.observe(i + 1, a))
            .collect();
        use Verdict::*;
        assert_eq!(
            verdicts,
            [Improved, Improved, Continue, Continue, Improved, Continue, Continue, Stop]
        );
        assert_eq!(s.best(), Some((5, 0.7)));
    }

    #[test]
    fn seed_mixing_separates_components() {
        assert_ne!(mix_seed(&[1, 2]), mix_seed(&[2, 1]));
        assert_ne!(mix_seed(&[0]), mix_seed(&[0, 0]));
        assert_eq!(mix_seed(&[7, 3]), mix_seed(&[7, 3]));
    }

    fn toy_data() -> Vec<EncodedExample> {
        (0..6)
            .map(|i| EncodedExample {
                premise: vec![2 + i % 3, 3, 4],
                hypothesis: vec![5 + i % 2, 2],
                label: i % 3,
            })
            .collect()
    }

    fn toy_model(placement: PlacementSet, drop_rate: f64) -> Model {
        Model::new(
            ModelConfig {
                embedding_dim: 4,
                hidden_units: 3,
                placement,
                drop_rate,
                ..ModelConfig::default()
            },
            8,
        )
        .unwrap()
    }

    #[test]
    fn zero_learning_rate_freezes_everything() {
        let mut model = toy_model(PlacementSet::all(), 0.3);
        let before = model.params().clone();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 4,
            learning_rate: 0.0,
            patience: 10,
            ..TrainConfig::default()
        };
        let data = toy_data();
        let report = train(&mut model, &data, &data, &cfg).unwrap();
        assert_eq!(model.params(), &before);
        assert_eq!(report.metrics.len(), 3);
        for m in &report.metrics[1..] {
            assert_eq!(
                (m.train_loss, m.train_acc, m.val_loss, m.val_acc),
                (
                    report.metrics[0].train_loss,
                    report.metrics[0].train_acc,
                    report.metrics[0].val_loss,
                    report.metrics[0].val_acc
                )
            );
        }
    }

    #[test]
    fn training_is_deterministic_and_keeps_best() {
        let cfg = TrainConfig {
            epochs: 4,
            batch_size: 2,
            learning_rate: 0.01,
            patience: 2,
            seed: 5,
            ..TrainConfig::default()
        };
        let data = toy_data();
        let run = || {
            let mut model = toy_model(PlacementSet::all(), 0.2);
            let report = train(&mut model, &data, &data[..3], &cfg).unwrap();
            (model, report)
        };
        let (m1, r1) = run();
        let (m2, r2) = run();
        assert_eq!(metrics_csv(&r1.metrics), metrics_csv(&r2.metrics));
        assert_eq!(m1.params(), m2.params());
        let best = r1.metrics.iter().map(|m| m.val_acc).fold(0.0, f64::max);
        assert_eq!(r1.best_val_acc, best);
        let restored = evaluate(&m1, &batchify(&data[..3], 2, None).unwrap()).unwrap();
        assert_eq!(restored.accuracy, r1.best_val_acc);
        assert!(metrics_csv(&r1.metrics).starts_with(METRICS_HEADER));
    }

    #[test]
    fn frozen_embeddings_do_not_move() {
        let mut model = toy_model(PlacementSet::empty(), 0.0);
        let mut cfg = model.config().clone();
        cfg.trainable_embeddings = false;
        let mut model = Model::from_params(cfg, model.params_mut().clone()).unwrap();
        let emb = model.embedding_id();
        let before = model.params().get(emb).value.clone();
        let tc = TrainConfig {
            epochs: 2,
            learning_rate: 0.05,
            ..TrainConfig::default()
        };
        train(&mut model, &toy_data(), &toy_data(), &tc).unwrap();
        assert_eq!(model.params().get(emb).value, before);
    }

    #[test]
    fn padding_row_stays_zero() {
        let mut model = toy_model(PlacementSet::empty(), 0.0);
        let data: Vec<EncodedExample> = vec![
            EncodedExample {
                premise: vec![2],
                hypothesis: vec![3, 4, 5],
                label: 0,
            },
            EncodedExample {
                premise: vec![2, 6, 7, 3],
                hypothesis: vec![3],
                label: 1,
            },
        ];
        let tc = TrainConfig {
            epochs: 3,
            batch_size: 2,
            learning_rate: 0.05,
            ..TrainConfig::default()
        };
        train(&mut model, &data, &data, &tc).unwrap();
        let emb = &model.params().get(model.embedding_id()).value;
        assert!(emb.data()[..4].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_finite_loss_names_the_batch() {
        let mut model = toy_model(PlacementSet::empty(), 0.0);
        let id = model.params().find("mlp.out.bias").unwrap();
        model.params_mut().get_mut(id).value.data_mut()[0] = f64::NAN;
        let err = train(
            &mut model,
            &toy_data(),
            &toy_data(),
            &TrainConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { epoch: 1, batch: 0 }));
        assert!(err.is_numerical());
    }

    #[test]
    fn rejects_bad_config_and_empty_data() {
        let mut model = toy_model(PlacementSet::empty(), 0.0);
        let bad = TrainConfig {
            patience: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train(&mut model, &toy_data(), &toy_data(), &bad),
            Err(Error::Config(_))
        ));
        assert!(train(&mut model, &[], &toy_data(), &TrainConfig::default()).is_err());
    }
}
