//! Python bindings for the dropnet NLI model.

use std::collections::HashMap;
use std::path::PathBuf;

use dropnet::checkpoint::Checkpoint;
use dropnet::data::{tokenize, Batch, EncodedExample, PaddedSequences, Vocabulary};
use dropnet::dropout::{Dropout, Mode};
use dropnet::model::ModelConfig;
use dropnet::params::{ParamKind, ParamStore};
use dropnet::placement::placement_for_model;
use dropnet::synth::SynthConfig;
use dropnet::tensor::Tensor;
use dropnet::train::{AdamState, TrainConfig};
use pyo3::exceptions::{PyArithmeticError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: dropnet::Error) -> PyErr {
    if e.is_numerical() {
        PyArithmeticError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

/// Names of the dropout sites active in a numbered model configuration (1 to 13).
#[pyfunction]
fn placement(model_id: u8) -> PyResult<Vec<&'static str>> {
    let set = placement_for_model(model_id).map_err(py_err)?;
    Ok(set.sites().into_iter().map(|s| s.as_str()).collect())
}

/// Applies dropout to a flat list of values.
#[pyfunction]
#[pyo3(signature = (values, drop_rate, train, seed = 1, inverted = false))]
fn dropout(
    values: Vec<f64>,
    drop_rate: f64,
    train: bool,
    seed: u64,
    inverted: bool,
) -> PyResult<Vec<f64>> {
    let mode = if train { Mode::Train } else { Mode::Eval };
    let mut d = Dropout::new(drop_rate, mode, seed)
        .map_err(py_err)?
        .with_inverted(inverted);
    let mut tape = dropnet::autodiff::Tape::new();
    let n = values.len();
    let x = tape.constant(Tensor::new(&[n], values).map_err(py_err)?);
    let y = d.apply(&mut tape, x).map_err(py_err)?;
    Ok(tape.value(y).data().to_vec())
}

/// Parameter values after each Adam step on a single scalar parameter.
#[pyfunction]
#[pyo3(signature = (initial, gradients, learning_rate = 0.001))]
fn adam_trajectory(initial: f64, gradients: Vec<f64>, learning_rate: f64) -> PyResult<Vec<f64>> {
    let mut store = ParamStore::new();
    store.add(
        "x",
        ParamKind::Weight,
        Tensor::new(&[1], vec![initial]).map_err(py_err)?,
    );
    let mut adam = AdamState::new(&store, learning_rate);
    let mut out = Vec::with_capacity(gradients.len());
    for g in gradients {
        adam.step(&mut store, &[Some(vec![g])]).map_err(py_err)?;
        out.push(
            store
                .iter()
                .next()
                .map(|p| p.value.item())
                .unwrap_or(f64::NAN),
        );
    }
    Ok(out)
}

/// Worst relative gradient error per parameter group of the tiny
/// configuration, keyed by mode.
#[pyfunction]
#[pyo3(signature = (seed = 1))]
fn gradcheck(seed: u64) -> PyResult<HashMap<String, HashMap<String, f64>>> {
    let reports = dropnet::cli::tiny_gradient_reports(seed).map_err(py_err)?;
    Ok(reports
        .into_iter()
        .map(|(mode, r)| {
            let groups = r
                .groups
                .iter()
                .map(|g| (g.name.clone(), g.max_rel_err()))
                .collect();
            (mode.to_string(), groups)
        })
        .collect())
}

#[pyfunction(name = "tokenize")]
fn py_tokenize(text: &str) -> Vec<String> {
    tokenize(text)
}

/// Synthetic three-class corpus as `(premise, hypothesis, label)` triples.
#[pyfunction]
#[pyo3(signature = (examples, seed = 1, label_noise = 0.0))]
fn synth(examples: usize, seed: u64, label_noise: f64) -> PyResult<Vec<(String, String, usize)>> {
    let data = dropnet::synth::generate(&SynthConfig {
        examples,
        seed,
        label_noise,
    })
    .map_err(py_err)?;
    Ok(data
        .into_iter()
        .map(|e| (e.premise.join(" "), e.hypothesis.join(" "), e.label))
        .collect())
}

type Pair = (Vec<usize>, Vec<usize>, usize);

fn encoded(pairs: Vec<Pair>) -> Vec<EncodedExample> {
    pairs
        .into_iter()
        .map(|(premise, hypothesis, label)| EncodedExample {
            premise,
            hypothesis,
            label,
        })
        .collect()
}

fn padded(seqs: &[Vec<usize>]) -> PyResult<PaddedSequences> {
    let refs: Vec<&[usize]> = seqs.iter().map(Vec::as_slice).collect();
    PaddedSequences::new(&refs).map_err(py_err)
}

/// BiLSTM classifier with intra- and inter-attention over token indices.
#[pyclass]
struct Model {
    inner: dropnet::model::Model,
    vocab: Option<Vocabulary>,
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (vocab_size, embedding_dim = 300, hidden_units = 100, model_id = 1,
                        drop_rate = 0.0, num_classes = 3, seed = 1))]
    fn new(
        vocab_size: usize,
        embedding_dim: usize,
        hidden_units: usize,
        model_id: u8,
        drop_rate: f64,
        num_classes: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let config = ModelConfig {
            embedding_dim,
            hidden_units,
            num_classes,
            placement: placement_for_model(model_id).map_err(py_err)?,
            drop_rate,
            seed,
            ..ModelConfig::default()
        };
        let inner = dropnet::model::Model::new(config, vocab_size).map_err(py_err)?;
        Ok(Model { inner, vocab: None })
    }

    /// Loads a checkpoint written by `dropnet train`.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ckpt = Checkpoint::load(&path).map_err(py_err)?;
        let (_, vocab, inner) = dropnet::cli::restore(&ckpt).map_err(py_err)?;
        Ok(Model {
            inner,
            vocab: Some(vocab),
        })
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.vocab_size()
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.params().num_values()
    }

    #[getter]
    fn placement(&self) -> String {
        self.inner.config().placement.to_string()
    }

    /// Token indices of a sentence under the checkpoint vocabulary.
    fn encode(&self, text: &str) -> PyResult<Vec<usize>> {
        let vocab = self
            .vocab
            .as_ref()
            .ok_or_else(|| PyValueError::new_err("model has no vocabulary"))?;
        Ok(vocab.encode(&tokenize(text)))
    }

    /// Class probabilities in evaluation mode, one row per pair.
    fn predict(
        &self,
        premises: Vec<Vec<usize>>,
        hypotheses: Vec<Vec<usize>>,
    ) -> PyResult<Vec<Vec<f64>>> {
        let probs = self
            .inner
            .predict_pair(&padded(&premises)?, &padded(&hypotheses)?)
            .map_err(py_err)?;
        let c = self.inner.config().num_classes;
        Ok(probs.data().chunks(c).map(<[f64]>::to_vec).collect())
    }

    /// Accuracy and mean cross-entropy on `(premise, hypothesis, label)` triples.
    fn evaluate(&self, data: Vec<Pair>) -> PyResult<(f64, f64)> {
        let data = encoded(data);
        let batches = dropnet::data::batchify(&data, 64, None).map_err(py_err)?;
        let e = dropnet::train::evaluate(&self.inner, &batches).map_err(py_err)?;
        Ok((e.accuracy, e.loss))
    }

    /// Trains in place with early stopping and returns per-epoch metrics
    /// together with the best epoch.
    #[pyo3(signature = (train_set, val_set, epochs = 50, batch_size = 32, learning_rate = 0.001,
                        l2_lambda = 1e-5, patience = 5, seed = 1))]
    #[allow(clippy::too_many_arguments)]
    fn fit(
        &mut self,
        train_set: Vec<Pair>,
        val_set: Vec<Pair>,
        epochs: usize,
        batch_size: usize,
        learning_rate: f64,
        l2_lambda: f64,
        patience: usize,
        seed: u64,
    ) -> PyResult<(usize, Vec<HashMap<&'static str, f64>>)> {
        let config = TrainConfig {
            epochs,
            batch_size,
            learning_rate,
            l2_lambda,
            patience,
            seed,
            wall_clock: false,
        };
        let report = dropnet::train::train(
            &mut self.inner,
            &encoded(train_set),
            &encoded(val_set),
            &config,
        )
        .map_err(py_err)?;
        let rows = report
            .metrics
            .iter()
            .map(|m| {
                HashMap::from([
                    ("epoch", m.epoch as f64),
                    ("train_loss", m.train_loss),
                    ("train_acc", m.train_acc),
                    ("val_loss", m.val_loss),
                    ("val_acc", m.val_acc),
                ])
            })
            .collect();
        Ok((report.best_epoch, rows))
    }

    /// Intra-attention weights of the premise and hypothesis of one pair.
    fn attention(
        &self,
        premise: Vec<usize>,
        hypothesis: Vec<usize>,
    ) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let ex = EncodedExample {
            premise,
            hypothesis,
            label: 0,
        };
        let batch = Batch::single(&ex).map_err(py_err)?;
        let mut tape = dropnet::autodiff::Tape::new();
        let vars = self.inner.params().bind(&mut tape);
        let mut d = self.inner.config().dropout(Mode::Eval, 0).map_err(py_err)?;
        let out = self
            .inner
            .forward(&mut tape, &vars, &batch.premise, &batch.hypothesis, &mut d)
            .map_err(py_err)?;
        Ok((
            tape.value(out.alpha_premise).data().to_vec(),
            tape.value(out.alpha_hypothesis).data().to_vec(),
        ))
    }
}

#[pymodule]
fn dropnet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(placement, m)?)?;
    m.add_function(wrap_pyfunction!(dropout, m)?)?;
    m.add_function(wrap_pyfunction!(adam_trajectory, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(py_tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    Ok(())
}
