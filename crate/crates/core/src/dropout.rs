//! Standard dropout: multiply activations by an i.i.d. Bernoulli(p) zero-one
//! mask while training, and by the retain probability p at evaluation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
#[allow(clippy::large_enum_variant)]
enum MaskSource {
    Sample {
        rng: ChaCha8Rng,
        recorded: Option<Vec<Tensor>>,
    },
    Replay {
        masks: Vec<Tensor>,
        next: usize,
    },
}

/// Dropout configuration plus its mask stream.
///
/// `drop_rate` is the probability that a unit is zeroed; units survive with
/// `retain = 1 - drop_rate`. With `inverted` set, training masks are scaled by
/// `1 / retain` and evaluation is the identity.
#[derive(Clone, Debug)]
pub struct Dropout {
    drop_rate: f64,
    mode: Mode,
    inverted: bool,
    source: MaskSource,
}

impl Dropout {
    pub fn new(drop_rate: f64, mode: Mode, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&drop_rate) {
            return Err(Error::Config(format!(
                "drop rate must lie in [0, 1), got {drop_rate}"
            )));
        }
        Ok(Dropout {
            drop_rate,
            mode,
            inverted: false,
            source: MaskSource::Sample {
                rng: ChaCha8Rng::seed_from_u64(seed),
                recorded: None,
            },
        })
    }

    /// Train-mode dropout that replays previously recorded masks in order.
    pub fn replay(drop_rate: f64, masks: Vec<Tensor>) -> Result<Self> {
        let mut d = Self::new(drop_rate, Mode::Train, 0)?;
        d.source = MaskSource::Replay { masks, next: 0 };
        Ok(d)
    }

    pub fn with_inverted(mut self, inverted: bool) -> Self {
        self.inverted = inverted;
        self
    }

    /// Keeps a copy of every sampled mask, retrievable with [`Dropout::take_recorded`].
    pub fn recording(mut self) -> Self {
        if let MaskSource::Sample { recorded, .. } = &mut self.source {
            *recorded = Some(Vec::new());
        }
        self
    }

    pub fn take_recorded(&mut self) -> Vec<Tensor> {
        match &mut self.source {
            MaskSource::Sample { recorded, .. } => {
                recorded.as_mut().map(std::mem::take).unwrap_or_default()
            }
            MaskSource::Replay { .. } => Vec::new(),
        }
    }

    pub fn drop_rate(&self) -> f64 {
        self.drop_rate
    }

    pub fn retain(&self) -> f64 {
        1.0 - self.drop_rate
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_inverted(&self) -> bool {
        self.inverted
    }

    fn next_mask(&mut self, shape: &[usize]) -> Result<Tensor> {
        let p = self.retain();
        let on = if self.inverted { 1.0 / p } else { 1.0 };
        match &mut self.source {
            MaskSource::Sample { rng, recorded } => {
                let n = shape.iter().product();
                let data = (0..n)
                    .map(|_| if rng.gen::<f64>() < p { on } else { 0.0 })
                    .collect();
                let mask = Tensor::new(shape, data)?;
                if let Some(r) = recorded {
                    r.push(mask.clone());
                }
                Ok(mask)
            }
            MaskSource::Replay { masks, next } => {
                let mask = masks.get(*next).cloned().ok_or_else(|| {
                    Error::Contract(format!("mask replay exhausted after {next} masks"))
                })?;
                if mask.shape() != shape {
                    return Err(Error::Dimension {
                        op: "dropout replay",
                        lhs: shape.to_vec(),
                        rhs: mask.shape().to_vec(),
                    });
                }
                *next += 1;
                Ok(mask)
            }
        }
    }

    /// Applies dropout to `x`. Dropped units receive zero gradient.
    pub fn apply(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        if self.drop_rate == 0.0 {
            return Ok(x);
        }
        match (self.mode, self.inverted) {
            (Mode::Train, _) => {
                let mask = self.next_mask(tape.shape(x))?;
                let m = tape.constant(mask);
                tape.mul(x, m)
            }
            (Mode::Eval, false) => Ok(tape.scale(x, self.retain())),
            (Mode::Eval, true) => Ok(x),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(d: &mut Dropout, x: Tensor) -> Tensor {
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let y = d.apply(&mut tape, v).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn zero_rate_is_identity_in_both_modes() {
        let x = Tensor::vector(vec![0.3, -1.7, 2.5]);
        for mode in [Mode::Train, Mode::Eval] {
            let mut d = Dropout::new(0.0, mode, 3).unwrap();
            assert_eq!(run(&mut d, x.clone()), x);
        }
    }

    #[test]
    fn eval_scales_by_retain_probability() {
        let mut d = Dropout::new(0.4, Mode::Eval, 3).unwrap();
        let y = run(&mut d, Tensor::vector(vec![1.0, 1.0]));
        for v in y.data() {
            assert!((v - 0.6).abs() < 1e-15);
        }
        let again = run(&mut d, Tensor::vector(vec![1.0, 1.0]));
        assert_eq!(y, again);
    }

    #[test]
    fn rate_of_one_is_rejected() {
        assert!(matches!(
            Dropout::new(1.0, Mode::Train, 0),
            Err(Error::Config(_))
        ));
        assert!(Dropout::new(-0.1, Mode::Train, 0).is_err());
    }

    #[test]
    fn train_mask_fraction_within_binomial_bound() {
        let n = 100_000;
        let mut d = Dropout::new(0.5, Mode::Train, 11).unwrap();
        let y = run(&mut d, Tensor::full(&[n], 1.0));
        let dropped = y.data().iter().filter(|&&v| v == 0.0).count() as f64 / n as f64;
        assert!((dropped - 0.5).abs() <= 0.0055, "{dropped}");
        assert!(y.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn fresh_mask_per_call() {
        let mut d = Dropout::new(0.5, Mode::Train, 5).unwrap();
        let a = run(&mut d, Tensor::full(&[64], 1.0));
        let b = run(&mut d, Tensor::full(&[64], 1.0));
        assert_ne!(a, b);
    }

    #[test]
    fn dropped_units_get_zero_gradient() {
        let mut d = Dropout::new(0.5, Mode::Train, 9).unwrap().recording();
        let mut tape = Tape::new();
        let x = tape.param(Tensor::full(&[32], 2.0));
        let y = d.apply(&mut tape, x).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        let mask = d.take_recorded().pop().unwrap();
        assert_eq!(tape.grad(x).data(), mask.data());
    }

    #[test]
    fn replay_reproduces_recorded_masks() {
        let x = Tensor::full(&[3, 4], 1.5);
        let mut rec = Dropout::new(0.3, Mode::Train, 21).unwrap().recording();
        let a = run(&mut rec, x.clone());
        let b = run(&mut rec, x.clone());
        let masks = rec.take_recorded();
        let mut rep = Dropout::replay(0.3, masks).unwrap();
        assert_eq!(run(&mut rep, x.clone()), a);
        assert_eq!(run(&mut rep, x.clone()), b);
        let mut tape = Tape::new();
        let v = tape.constant(x);
        assert!(rep.apply(&mut tape, v).is_err());
    }

    #[test]
    fn inverted_mode_preserves_expectation_at_train_time() {
        let n = 20_000;
        let mut d = Dropout::new(0.4, Mode::Train, 2)
            .unwrap()
            .with_inverted(true);
        let y = run(&mut d, Tensor::full(&[n], 1.0));
        let mean = y.data().iter().sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.03, "{mean}");
        let mut e = Dropout::new(0.4, Mode::Eval, 2)
            .unwrap()
            .with_inverted(true);
        assert_eq!(run(&mut e, Tensor::full(&[3], 1.0)).data(), &[1.0; 3]);
    }
}
