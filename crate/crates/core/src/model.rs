//! BiLSTM encoder with intra-attention, inter-attention, multiplicative
//! fusion and a pooled relation vector fed to an MLP classifier. Dropout is
//! routed to the layers named in the configured [`PlacementSet`].
//!
//! Shapes use the batched row layout `[batch, length, features]`; column `t`
//! of a `features x length` sentence matrix is row `t` here.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::data::{Batch, PaddedSequences};
use crate::dropout::{Dropout, Mode};
use crate::error::{Error, Result};
use crate::gradcheck::{GradReport, GroupCheck, FD_STEP};
use crate::layers::{bilstm, dense, embed, Dense, EmbeddingTable, LstmParams, PAD_INDEX};
use crate::params::{xavier_uniform, ParamId, ParamKind, ParamStore};
use crate::placement::{PlacementSet, Site};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub embedding_dim: usize,
    pub hidden_units: usize,
    pub num_classes: usize,
    pub placement: PlacementSet,
    /// Probability of dropping a unit at each active site.
    pub drop_rate: f64,
    pub inverted_dropout: bool,
    pub trainable_embeddings: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embedding_dim: 300,
            hidden_units: 100,
            num_classes: 3,
            placement: PlacementSet::empty(),
            drop_rate: 0.0,
            inverted_dropout: false,
            trainable_embeddings: true,
            seed: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 || self.hidden_units == 0 {
            return Err(Error::Config(
                "embedding_dim and hidden_units must be positive".into(),
            ));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.drop_rate) {
            return Err(Error::Config(format!(
                "drop_rate must lie in [0, 1), got {}",
                self.drop_rate
            )));
        }
        Ok(())
    }

    /// Width of the BiLSTM output.
    pub fn encoding_dim(&self) -> usize {
        2 * self.hidden_units
    }

    pub fn dropout(&self, mode: Mode, seed: u64) -> Result<Dropout> {
        Ok(Dropout::new(self.drop_rate, mode, seed)?.with_inverted(self.inverted_dropout))
    }
}

/// `W_y, W_h: [2h, 2h]`, `w: [2h]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IntraAttentionParams<H> {
    pub w_y: H,
    pub w_h: H,
    pub w: H,
}

impl IntraAttentionParams<ParamId> {
    fn register(store: &mut ParamStore, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        IntraAttentionParams {
            w_y: store.add(
                "intra.w_y",
                ParamKind::Weight,
                xavier_uniform(rng, &[dim, dim]),
            ),
            w_h: store.add(
                "intra.w_h",
                ParamKind::Weight,
                xavier_uniform(rng, &[dim, dim]),
            ),
            w: store.add("intra.w", ParamKind::Weight, xavier_uniform(rng, &[dim])),
        }
    }

    fn bind(&self, vars: &[Var]) -> IntraAttentionParams<Var> {
        IntraAttentionParams {
            w_y: vars[self.w_y.index()],
            w_h: vars[self.w_h.index()],
            w: vars[self.w.index()],
        }
    }
}

/// Repeats a `[B, L]` mask over a trailing feature axis of width `dim`.
fn expand_last(mask: &[bool], dim: usize) -> Vec<bool> {
    mask.iter()
        .flat_map(|&m| std::iter::repeat_n(m, dim))
        .collect()
}

fn seq_dims(tape: &Tape, y: Var, op: &'static str) -> Result<(usize, usize, usize)> {
    match tape.shape(y) {
        &[b, l, d] => Ok((b, l, d)),
        s => Err(Error::Dimension {
            op,
            lhs: s.to_vec(),
            rhs: vec![],
        }),
    }
}

/// Intra-attention over `y [B, L, 2h]`.
///
/// M = tanh(W_y Y + W_h R_avg replicated over positions), alpha = masked
/// softmax(w^T M), and position t of R is alpha_t times position t of Y.
/// Returns `(alpha [B, L], R [B, L, 2h])`.
pub fn intra_attention(
    tape: &mut Tape,
    y: Var,
    mask: &[bool],
    p: &IntraAttentionParams<Var>,
) -> Result<(Var, Var)> {
    let (b, l, d) = seq_dims(tape, y, "intra_attention")?;
    if mask.len() != b * l {
        return Err(Error::Dimension {
            op: "intra_attention mask",
            lhs: vec![b, l],
            rhs: vec![mask.len()],
        });
    }
    let r_avg = tape.mean(y, 1, Some(&expand_last(mask, d)))?;
    let flat = tape.reshape(y, &[b * l, d])?;
    let proj_y = tape.matmul_ex(flat, p.w_y, false, true)?;
    let proj_y = tape.reshape(proj_y, &[b, l, d])?;
    let proj_h = tape.matmul_ex(r_avg, p.w_h, false, true)?;
    let proj_h = tape.reshape(proj_h, &[b, 1, d])?;
    let pre = tape.add(proj_y, proj_h)?;
    let m = tape.tanh(pre);
    let m = tape.reshape(m, &[b * l, d])?;
    let w = tape.reshape(p.w, &[d, 1])?;
    let scores = tape.matmul(m, w)?;
    let scores = tape.reshape(scores, &[b, l])?;
    let alpha = tape.softmax(scores, 1, Some(mask))?;
    let weights = tape.reshape(alpha, &[b, l, 1])?;
    let r = tape.mul(y, weights)?;
    Ok((alpha, r))
}

#[derive(Clone, Copy, Debug)]
pub struct InterAttention {
    /// `I_v = R_p R_h^T`, `[B, Lp, Lh]`.
    pub interaction: Var,
    /// Row-normalized over hypothesis positions.
    pub premise_weights: Var,
    /// Column-normalized over premise positions.
    pub hypothesis_weights: Var,
    /// `[B, Lp, 2h]`: each premise position's soft alignment over R_h.
    pub aligned_premise: Var,
    /// `[B, Lh, 2h]`: each hypothesis position's soft alignment over R_p.
    pub aligned_hypothesis: Var,
}

pub fn inter_attention(
    tape: &mut Tape,
    r_p: Var,
    r_h: Var,
    mask_p: &[bool],
    mask_h: &[bool],
) -> Result<InterAttention> {
    let (b, lp, d) = seq_dims(tape, r_p, "inter_attention")?;
    let (bh, lh, dh) = seq_dims(tape, r_h, "inter_attention")?;
    if b != bh || d != dh || mask_p.len() != b * lp || mask_h.len() != b * lh {
        return Err(Error::Dimension {
            op: "inter_attention",
            lhs: vec![b, lp, d],
            rhs: vec![bh, lh, dh],
        });
    }
    let interaction = tape.matmul_ex(r_p, r_h, false, true)?;
    let mut over_h = Vec::with_capacity(b * lp * lh);
    let mut over_p = Vec::with_capacity(b * lp * lh);
    for bi in 0..b {
        for i in 0..lp {
            for j in 0..lh {
                over_h.push(mask_h[bi * lh + j]);
                over_p.push(mask_p[bi * lp + i]);
            }
        }
    }
    let premise_weights = tape.softmax(interaction, 2, Some(&over_h))?;
    let hypothesis_weights = tape.softmax(interaction, 1, Some(&over_p))?;
    let aligned_premise = tape.matmul(premise_weights, r_h)?;
    let aligned_hypothesis = tape.matmul_ex(hypothesis_weights, r_p, true, false)?;
    Ok(InterAttention {
        interaction,
        premise_weights,
        hypothesis_weights,
        aligned_premise,
        aligned_hypothesis,
    })
}

/// Elementwise product of aligned and intra-attended representations.
pub fn fuse(tape: &mut Tape, aligned: Var, r: Var) -> Result<Var> {
    if tape.shape(aligned) != tape.shape(r) {
        return Err(Error::Dimension {
            op: "fuse",
            lhs: tape.shape(aligned).to_vec(),
            rhs: tape.shape(r).to_vec(),
        });
    }
    tape.mul(aligned, r)
}

/// `[avg(F_p); max(F_p); avg(F_h); max(F_h)]` pooled over valid positions,
/// giving `[B, 8h]`.
pub fn relation_vector(
    tape: &mut Tape,
    f_p: Var,
    f_h: Var,
    mask_p: &[bool],
    mask_h: &[bool],
) -> Result<Var> {
    let dp = seq_dims(tape, f_p, "relation_vector")?.2;
    let dh = seq_dims(tape, f_h, "relation_vector")?.2;
    let (mp, mh) = (expand_last(mask_p, dp), expand_last(mask_h, dh));
    let p_avg = tape.mean(f_p, 1, Some(&mp))?;
    let p_max = tape.max(f_p, 1, Some(&mp))?;
    let h_avg = tape.mean(f_h, 1, Some(&mh))?;
    let h_max = tape.max(f_h, 1, Some(&mh))?;
    tape.concat(&[p_avg, p_max, h_avg, h_max], 1)
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    embedding: ParamId,
    lstm_fwd: LstmParams<ParamId>,
    lstm_bwd: LstmParams<ParamId>,
    intra: IntraAttentionParams<ParamId>,
    mlp_hidden: Dense<ParamId>,
    mlp_out: Dense<ParamId>,
}

/// Handles to everything computed in one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    /// `[B, num_classes]`
    pub probs: Var,
    pub alpha_premise: Var,
    pub alpha_hypothesis: Var,
    pub inter: InterAttention,
    pub relation: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    layout: Layout,
}

impl Model {
    /// Fresh model with a randomly initialized embedding table.
    pub fn new(config: ModelConfig, vocab_size: usize) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut table = EmbeddingTable::random(vocab_size, config.embedding_dim, &mut rng);
        table.trainable = config.trainable_embeddings;
        Self::build(config, table, rng)
    }

    /// Fresh model whose embedding table is `table` (e.g. pretrained vectors).
    pub fn with_embeddings(config: ModelConfig, table: EmbeddingTable) -> Result<Self> {
        let rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x05ee_d0fe_4b3d);
        Self::build(config, table, rng)
    }

    fn build(config: ModelConfig, mut table: EmbeddingTable, mut rng: ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        if table.dim() != config.embedding_dim {
            return Err(Error::Config(format!(
                "embedding table has dimension {}, embedding_dim is {}",
                table.dim(),
                config.embedding_dim
            )));
        }
        if table.vocab_size() < 2 {
            return Err(Error::Config(
                "vocabulary must hold at least PAD and UNK".into(),
            ));
        }
        let d = config.embedding_dim;
        table.table.data_mut()[PAD_INDEX * d..(PAD_INDEX + 1) * d].fill(0.0);
        let h = config.hidden_units;
        let enc = config.encoding_dim();
        let mut store = ParamStore::new();
        let embedding = store.add("embedding", ParamKind::Embedding, table.table);
        let lstm_fwd = LstmParams::register(&mut store, "lstm_fwd", d, h, &mut rng);
        let lstm_bwd = LstmParams::register(&mut store, "lstm_bwd", d, h, &mut rng);
        let intra = IntraAttentionParams::register(&mut store, enc, &mut rng);
        let mlp_hidden = Dense::register(&mut store, "mlp.hidden", 4 * enc, enc, &mut rng);
        let mlp_out = Dense::register(&mut store, "mlp.out", enc, config.num_classes, &mut rng);
        Ok(Model {
            config,
            params: store,
            layout: Layout {
                embedding,
                lstm_fwd,
                lstm_bwd,
                intra,
                mlp_hidden,
                mlp_out,
            },
        })
    }

    /// Rebuilds a model from saved parameters; names and shapes must match
    /// the layout implied by `config`.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let vocab = params
            .find("embedding")
            .map(|id| params.get(id).value.shape()[0])
            .ok_or_else(|| Error::Contract("missing embedding parameter".into()))?;
        let mut model = Self::new(config, vocab)?;
        model.params.copy_from(&params)?;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn embedding_id(&self) -> ParamId {
        self.layout.embedding
    }

    pub fn vocab_size(&self) -> usize {
        self.params.get(self.layout.embedding).value.shape()[0]
    }

    /// Forward pass with dropout applied at the configured sites.
    /// `vars` are this model's parameters bound on `tape`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        premise: &PaddedSequences,
        hypothesis: &PaddedSequences,
        dropout: &mut Dropout,
    ) -> Result<ForwardOutput> {
        let placement = self.config.placement;
        let mut site = |tape: &mut Tape, s: Site, x: Var| -> Result<Var> {
            if placement.contains(s) {
                dropout.apply(tape, x)
            } else {
                Ok(x)
            }
        };
        let b = premise.indices.len() / premise.len;
        if hypothesis.indices.len() / hypothesis.len != b {
            return Err(Error::Input(
                "premise and hypothesis batch sizes differ".into(),
            ));
        }
        let table = vars[self.layout.embedding.index()];
        let fwd = self.layout.lstm_fwd.bind(vars);
        let bwd = self.layout.lstm_bwd.bind(vars);
        let intra = self.layout.intra.bind(vars);

        let mut encode = |tape: &mut Tape, seq: &PaddedSequences| -> Result<(Var, Var)> {
            let x = embed(tape, table, &seq.indices, b, seq.len)?;
            let x = site(tape, Site::Embedding, x)?;
            let y = bilstm(tape, x, &seq.mask, &fwd, &bwd)?;
            let y = site(tape, Site::Recurrent, y)?;
            let (alpha, r) = intra_attention(tape, y, &seq.mask, &intra)?;
            let r = site(tape, Site::IntraAttention, r)?;
            Ok((alpha, r))
        };
        let (alpha_premise, r_p) = encode(tape, premise)?;
        let (alpha_hypothesis, r_h) = encode(tape, hypothesis)?;

        let inter = inter_attention(tape, r_p, r_h, &premise.mask, &hypothesis.mask)?;
        let f_p = fuse(tape, inter.aligned_premise, r_p)?;
        let f_h = fuse(tape, inter.aligned_hypothesis, r_h)?;
        let f_p = site(tape, Site::InterAttention, f_p)?;
        let f_h = site(tape, Site::InterAttention, f_h)?;

        let relation = relation_vector(tape, f_p, f_h, &premise.mask, &hypothesis.mask)?;
        let x = site(tape, Site::Mlp, relation)?;
        let hidden = dense(tape, x, &self.layout.mlp_hidden.bind(vars))?;
        let hidden = tape.tanh(hidden);
        let hidden = site(tape, Site::Mlp, hidden)?;
        let logits = dense(tape, hidden, &self.layout.mlp_out.bind(vars))?;
        let probs = tape.softmax(logits, 1, None)?;
        Ok(ForwardOutput {
            probs,
            alpha_premise,
            alpha_hypothesis,
            inter,
            relation,
        })
    }

    /// Class probabilities `[B, num_classes]` in evaluation mode.
    pub fn predict(&self, batch: &Batch) -> Result<Tensor> {
        self.predict_pair(&batch.premise, &batch.hypothesis)
    }

    pub fn predict_pair(
        &self,
        premise: &PaddedSequences,
        hypothesis: &PaddedSequences,
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind_constants(&mut tape);
        let mut dropout = self.config.dropout(Mode::Eval, 0)?;
        let out = self.forward(&mut tape, &vars, premise, hypothesis, &mut dropout)?;
        Ok(tape.value(out.probs).clone())
    }

    fn bind_constants(&self, tape: &mut Tape) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.constant(p.value.clone()))
            .collect()
    }

    /// Mean cross-entropy of `batch` under fixed parameter values.
    fn loss_with(&self, params: &ParamStore, batch: &Batch, dropout: &mut Dropout) -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params
            .iter()
            .map(|p| tape.constant(p.value.clone()))
            .collect();
        let out = self.forward(&mut tape, &vars, &batch.premise, &batch.hypothesis, dropout)?;
        let loss = tape.cross_entropy(out.probs, &batch.labels)?;
        Ok(tape.value(loss).item())
    }

    /// Compares backpropagated gradients of the batch cross-entropy with
    /// central finite differences for every parameter. In train mode the
    /// dropout masks of the first pass are recorded and replayed, so every
    /// evaluation sees the same masks.
    pub fn gradient_check(&self, batch: &Batch, mode: Mode, seed: u64) -> Result<GradReport> {
        let masks = match mode {
            Mode::Eval => None,
            Mode::Train => {
                let mut rec = self.config.dropout(Mode::Train, seed)?.recording();
                self.loss_with(&self.params, batch, &mut rec)?;
                Some(rec.take_recorded())
            }
        };
        let fresh = || -> Result<Dropout> {
            match &masks {
                None => self.config.dropout(Mode::Eval, seed),
                Some(m) => Ok(Dropout::replay(self.config.drop_rate, m.clone())?
                    .with_inverted(self.config.inverted_dropout)),
            }
        };

        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape);
        let out = self.forward(
            &mut tape,
            &vars,
            &batch.premise,
            &batch.hypothesis,
            &mut fresh()?,
        )?;
        let loss = tape.cross_entropy(out.probs, &batch.labels)?;
        tape.backward(loss)?;

        let mut probe = self.params.clone();
        let mut report = GradReport::default();
        for (k, (id, param)) in self.params.ids().zip(self.params.iter()).enumerate() {
            let analytic = tape.grad(vars[k]).into_data();
            let mut numeric = Vec::with_capacity(analytic.len());
            for i in 0..param.value.len() {
                let orig = param.value.data()[i];
                probe.get_mut(id).value.data_mut()[i] = orig + FD_STEP;
                let plus = self.loss_with(&probe, batch, &mut fresh()?)?;
                probe.get_mut(id).value.data_mut()[i] = orig - FD_STEP;
                let minus = self.loss_with(&probe, batch, &mut fresh()?)?;
                probe.get_mut(id).value.data_mut()[i] = orig;
                numeric.push((plus - minus) / (2.0 * FD_STEP));
            }
            report.groups.push(GroupCheck {
                name: param.name.clone(),
                analytic,
                numeric,
            });
        }
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::EncodedExample;
    use crate::gradcheck::{check_gradients, random_tensor};
    use crate::placement::placement_for_model;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn tiny_config(placement: PlacementSet, drop_rate: f64) -> ModelConfig {
        ModelConfig {
            embedding_dim: 6,
            hidden_units: 3,
            num_classes: 3,
            placement,
            drop_rate,
            seed: 17,
            ..ModelConfig::default()
        }
    }

    fn pair(p: &[usize], h: &[usize], label: usize) -> EncodedExample {
        EncodedExample {
            premise: p.to_vec(),
            hypothesis: h.to_vec(),
            label,
        }
    }

    fn intra_vars(
        tape: &mut Tape,
        w_y: Tensor,
        w_h: Tensor,
        w: Tensor,
    ) -> IntraAttentionParams<Var> {
        IntraAttentionParams {
            w_y: tape.constant(w_y),
            w_h: tape.constant(w_h),
            w: tape.constant(w),
        }
    }

    #[test]
    fn intra_attention_hand_example() {
        // Positions y1 = (1, 2), y2 = (3, -1); W_y = W_h = I, w = (1, 0).
        let y1: [f64; 2] = [1.0, 2.0];
        let y2: [f64; 2] = [3.0, -1.0];
        let avg: [f64; 2] = [(y1[0] + y2[0]) / 2.0, (y1[1] + y2[1]) / 2.0];
        let s1 = (y1[0] + avg[0]).tanh();
        let s2 = (y2[0] + avg[0]).tanh();
        let a1 = s1.exp() / (s1.exp() + s2.exp());
        let a2 = s2.exp() / (s1.exp() + s2.exp());

        let mut tape = Tape::new();
        let p = intra_vars(
            &mut tape,
            Tensor::identity(2),
            Tensor::identity(2),
            Tensor::vector(vec![1.0, 0.0]),
        );
        let y = tape.constant(Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, -1.0]).unwrap());
        let (alpha, r) = intra_attention(&mut tape, y, &[true, true], &p).unwrap();
        let alpha = tape.value(alpha).data();
        assert!((alpha[0] - a1).abs() < 1e-15 && (alpha[1] - a2).abs() < 1e-15);
        let r = tape.value(r).data();
        let expected = [a1 * y1[0], a1 * y1[1], a2 * y2[0], a2 * y2[1]];
        for (x, e) in r.iter().zip(expected) {
            assert!((x - e).abs() < 1e-15);
        }
    }

    #[test]
    fn intra_attention_identical_columns_give_uniform_weights() {
        let mut r = rng(1);
        let mut tape = Tape::new();
        let p = intra_vars(
            &mut tape,
            random_tensor(&mut r, &[4, 4]),
            random_tensor(&mut r, &[4, 4]),
            random_tensor(&mut r, &[4]),
        );
        let col = random_tensor(&mut r, &[4]);
        let data: Vec<f64> = (0..4).flat_map(|_| col.data().to_vec()).collect();
        let y = tape.constant(Tensor::new(&[1, 4, 4], data).unwrap());
        let (alpha, r_out) = intra_attention(&mut tape, y, &[true, true, true, false], &p).unwrap();
        let a = tape.value(alpha).data();
        for &v in &a[..3] {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(a[3], 0.0);
        assert!(tape.value(r_out).data()[12..].iter().all(|&v| v == 0.0));
        assert!(intra_attention(&mut tape, y, &[false; 4], &p).is_err());
    }

    #[test]
    fn intra_attention_gradient() {
        let mut r = rng(2);
        let inputs = vec![
            random_tensor(&mut r, &[2, 3, 4]),
            random_tensor(&mut r, &[4, 4]),
            random_tensor(&mut r, &[4, 4]),
            random_tensor(&mut r, &[4]),
        ];
        let w = random_tensor(&mut r, &[2, 3, 4]);
        let mask = [true, true, false, true, true, true];
        let report = check_gradients(&inputs, |t, v| {
            let p = IntraAttentionParams {
                w_y: v[1],
                w_h: v[2],
                w: v[3],
            };
            let (_, out) = intra_attention(t, v[0], &mask, &p)?;
            let w = t.constant(w.clone());
            let prod = t.mul(out, w)?;
            Ok(t.sum(prod))
        })
        .unwrap();
        assert!(report.max_rel_err() < 1e-6, "{report:?}");
    }

    /// Direct evaluation of the soft alignment for one example.
    fn align_oracle(rp: &[[f64; 2]], rh: &[[f64; 2]]) -> (Vec<[f64; 2]>, Vec<[f64; 2]>) {
        let dot = |a: &[f64; 2], b: &[f64; 2]| a[0] * b[0] + a[1] * b[1];
        let iv: Vec<Vec<f64>> = rp
            .iter()
            .map(|p| rh.iter().map(|h| dot(p, h)).collect())
            .collect();
        let mut rt_p = Vec::new();
        for row in &iv {
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            let mut acc = [0.0; 2];
            for (j, h) in rh.iter().enumerate() {
                let w = row[j].exp() / z;
                acc[0] += w * h[0];
                acc[1] += w * h[1];
            }
            rt_p.push(acc);
        }
        let mut rt_h = Vec::new();
        for j in 0..rh.len() {
            let z: f64 = iv.iter().map(|row| row[j].exp()).sum();
            let mut acc = [0.0; 2];
            for (i, p) in rp.iter().enumerate() {
                let w = iv[i][j].exp() / z;
                acc[0] += w * p[0];
                acc[1] += w * p[1];
            }
            rt_h.push(acc);
        }
        (rt_p, rt_h)
    }

    #[test]
    fn inter_attention_two_by_two_hand_example() {
        let rp = [[0.5, -1.0], [2.0, 0.25]];
        let rh = [[1.0, 1.0], [-0.5, 3.0]];
        let (ep, eh) = align_oracle(&rp, &rh);
        let mut tape = Tape::new();
        let flat = |x: &[[f64; 2]]| x.iter().flat_map(|r| r.to_vec()).collect::<Vec<_>>();
        let vp = tape.constant(Tensor::new(&[1, 2, 2], flat(&rp)).unwrap());
        let vh = tape.constant(Tensor::new(&[1, 2, 2], flat(&rh)).unwrap());
        let out = inter_attention(&mut tape, vp, vh, &[true; 2], &[true; 2]).unwrap();
        let gp = tape.value(out.aligned_premise).data();
        let gh = tape.value(out.aligned_hypothesis).data();
        for (x, e) in gp.iter().zip(flat(&ep)) {
            assert!((x - e).abs() < 1e-14);
        }
        for (x, e) in gh.iter().zip(flat(&eh)) {
            assert!((x - e).abs() < 1e-14);
        }
    }

    #[test]
    fn inter_attention_single_positions_swap() {
        let mut r = rng(3);
        let rp = random_tensor(&mut r, &[1, 1, 4]);
        let rh = random_tensor(&mut r, &[1, 1, 4]);
        let mut tape = Tape::new();
        let (vp, vh) = (tape.constant(rp.clone()), tape.constant(rh.clone()));
        let out = inter_attention(&mut tape, vp, vh, &[true], &[true]).unwrap();
        assert_eq!(tape.value(out.aligned_premise), &rh);
        assert_eq!(tape.value(out.aligned_hypothesis), &rp);
    }

    #[test]
    fn inter_attention_outputs_are_convex_combinations() {
        let mut r = rng(4);
        let (lp, lh, d) = (3, 4, 5);
        let rp = random_tensor(&mut r, &[1, lp, d]);
        let rh = random_tensor(&mut r, &[1, lh, d]);
        let mask_h = [true, true, true, false];
        let mut tape = Tape::new();
        let (vp, vh) = (tape.constant(rp), tape.constant(rh.clone()));
        let out = inter_attention(&mut tape, vp, vh, &[true; 3], &mask_h).unwrap();
        let aligned = tape.value(out.aligned_premise);
        for i in 0..lp {
            for k in 0..d {
                let vals: Vec<f64> = (0..3).map(|j| rh.at(&[0, j, k])).collect();
                let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let v = aligned.at(&[0, i, k]);
                assert!(v >= lo - 1e-15 && v <= hi + 1e-15);
            }
        }
        let w = tape.value(out.premise_weights);
        for i in 0..lp {
            assert_eq!(w.at(&[0, i, 3]), 0.0);
        }
    }

    #[test]
    fn inter_attention_gradient() {
        let mut r = rng(5);
        let inputs = vec![
            random_tensor(&mut r, &[2, 3, 4]),
            random_tensor(&mut r, &[2, 2, 4]),
        ];
        let (wp, wh) = (
            random_tensor(&mut r, &[2, 3, 4]),
            random_tensor(&mut r, &[2, 2, 4]),
        );
        let report = check_gradients(&inputs, |t, v| {
            let out = inter_attention(
                t,
                v[0],
                v[1],
                &[true, true, false, true, true, true],
                &[true, true, true, false],
            )?;
            let (wp, wh) = (t.constant(wp.clone()), t.constant(wh.clone()));
            let a = t.mul(out.aligned_premise, wp)?;
            let b = t.mul(out.aligned_hypothesis, wh)?;
            let (a, b) = (t.sum(a), t.sum(b));
            t.add(a, b)
        })
        .unwrap();
        assert!(report.max_rel_err() < 1e-6, "{report:?}");
    }

    #[test]
    fn fuse_cases() {
        let mut r = rng(6);
        let x = random_tensor(&mut r, &[1, 2, 3]);
        let mut tape = Tape::new();
        let ones = tape.constant(Tensor::full(&[1, 2, 3], 1.0));
        let vx = tape.constant(x.clone());
        let f = fuse(&mut tape, ones, vx).unwrap();
        assert_eq!(tape.value(f), &x);
        let mut z = Tensor::full(&[1, 2, 3], 1.0);
        z.data_mut()[4] = 0.0;
        let vz = tape.constant(z);
        let f = fuse(&mut tape, vz, vx).unwrap();
        assert_eq!(tape.value(f).data()[4], 0.0);
        let other = tape.constant(Tensor::zeros(&[1, 3, 3]));
        assert!(fuse(&mut tape, other, vx).is_err());

        let inputs = vec![
            random_tensor(&mut r, &[1, 2, 3]),
            random_tensor(&mut r, &[1, 2, 3]),
        ];
        let report = check_gradients(&inputs, |t, v| {
            let f = fuse(t, v[0], v[1])?;
            let f = t.tanh(f);
            Ok(t.sum(f))
        })
        .unwrap();
        assert!(report.max_rel_err() < 1e-6);
    }

    #[test]
    fn relation_vector_pooling() {
        let mut r = rng(7);
        // single position: avg = max = the column
        let col_p = random_tensor(&mut r, &[1, 1, 4]);
        let col_h = random_tensor(&mut r, &[1, 1, 4]);
        let mut tape = Tape::new();
        let (vp, vh) = (tape.constant(col_p.clone()), tape.constant(col_h.clone()));
        let rel = relation_vector(&mut tape, vp, vh, &[true], &[true]).unwrap();
        let v = tape.value(rel).data();
        assert_eq!(tape.shape(rel), &[1, 16]);
        assert_eq!(&v[0..4], col_p.data());
        assert_eq!(&v[4..8], col_p.data());
        assert_eq!(&v[8..12], col_h.data());
        assert_eq!(&v[12..16], col_h.data());

        // brute-force per-row mean/max on a random 2h = 4, L = 3 instance
        let fp = random_tensor(&mut r, &[1, 3, 4]);
        let fh = random_tensor(&mut r, &[1, 3, 4]);
        let (vp, vh) = (tape.constant(fp.clone()), tape.constant(fh.clone()));
        let rel = relation_vector(&mut tape, vp, vh, &[true; 3], &[true, true, false]).unwrap();
        let v = tape.value(rel).data().to_vec();
        for k in 0..4 {
            let p: Vec<f64> = (0..3).map(|t| fp.at(&[0, t, k])).collect();
            let h: Vec<f64> = (0..2).map(|t| fh.at(&[0, t, k])).collect();
            let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
            let max = |x: &[f64]| x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!((v[k] - mean(&p)).abs() < 1e-15);
            assert_eq!(v[4 + k], max(&p));
            assert!((v[8 + k] - mean(&h)).abs() < 1e-15);
            assert_eq!(v[12 + k], max(&h));
        }
    }

    #[test]
    fn relation_vector_of_constant_input() {
        let mut tape = Tape::new();
        let c = Tensor::new(&[1, 3, 2], vec![0.5, -2.0, 0.5, -2.0, 0.5, -2.0]).unwrap();
        let v = tape.constant(c);
        let rel = relation_vector(&mut tape, v, v, &[true; 3], &[true; 3]).unwrap();
        assert_eq!(
            tape.value(rel).data(),
            &[0.5, -2.0, 0.5, -2.0, 0.5, -2.0, 0.5, -2.0]
        );
    }

    #[test]
    fn forward_outputs_distribution() {
        let model = Model::new(tiny_config(placement_for_model(12).unwrap(), 0.3), 10).unwrap();
        let batch =
            Batch::from_examples(&[&pair(&[2, 3, 4], &[5, 6], 0), &pair(&[7], &[8, 9, 2], 2)])
                .unwrap();
        let probs = model.predict(&batch).unwrap();
        assert_eq!(probs.shape(), &[2, 3]);
        for row in probs.data().chunks(3) {
            assert!(row.iter().all(|&p| p > 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(probs, model.predict(&batch).unwrap());
    }

    #[test]
    fn without_placement_train_equals_eval() {
        let model = Model::new(tiny_config(PlacementSet::empty(), 0.5), 10).unwrap();
        let batch = Batch::from_examples(&[&pair(&[2, 3, 4], &[5, 6], 0)]).unwrap();
        let mut tape = Tape::new();
        let vars = model.params().bind(&mut tape);
        let mut d = model.config().dropout(Mode::Train, 3).unwrap();
        let out = model
            .forward(&mut tape, &vars, &batch.premise, &batch.hypothesis, &mut d)
            .unwrap();
        assert_eq!(tape.value(out.probs), &model.predict(&batch).unwrap());
    }

    #[test]
    fn padding_does_not_change_eval_output() {
        let model = Model::new(tiny_config(placement_for_model(9).unwrap(), 0.4), 10).unwrap();
        let short = Batch::single(&pair(&[2, 3, 4], &[5, 6], 0)).unwrap();
        let base = model.predict(&short).unwrap();
        let long = Batch::from_examples(&[
            &pair(&[2, 3, 4], &[5, 6], 0),
            &pair(&[2, 3, 4, 5, 6, 7, 8], &[5, 6, 7, 8, 9, 9], 0),
        ])
        .unwrap();
        let padded = model.predict(&long).unwrap();
        for (a, b) in base.data().iter().zip(&padded.data()[..3]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn premise_permutation_permutes_alpha_and_interaction_rows() {
        let mut r = rng(9);
        let (l, d) = (4, 3);
        let y = random_tensor(&mut r, &[1, l, d]);
        let r_h = random_tensor(&mut r, &[1, 2, d]);
        let mask = [true, true, true, false];
        let perm = [2, 0, 3, 1];
        let mut py = Vec::new();
        for &src in &perm {
            py.extend_from_slice(&y.data()[src * d..(src + 1) * d]);
        }
        let py = Tensor::new(&[1, l, d], py).unwrap();
        let pmask: Vec<bool> = perm.iter().map(|&src| mask[src]).collect();

        let mut tape = Tape::new();
        let p = intra_vars(
            &mut tape,
            random_tensor(&mut r, &[d, d]),
            random_tensor(&mut r, &[d, d]),
            random_tensor(&mut r, &[d]),
        );
        let vh = tape.constant(r_h);
        let run = |tape: &mut Tape, y: Tensor, mask: &[bool]| {
            let vy = tape.constant(y);
            let (alpha, rp) = intra_attention(tape, vy, mask, &p).unwrap();
            let inter = inter_attention(tape, rp, vh, mask, &[true, true]).unwrap();
            (
                tape.value(alpha).clone(),
                tape.value(inter.interaction).clone(),
            )
        };
        let (a, iv) = run(&mut tape, y, &mask);
        let (pa, piv) = run(&mut tape, py, &pmask);
        for (t, &src) in perm.iter().enumerate() {
            assert!((pa.data()[t] - a.data()[src]).abs() < 1e-12);
            for j in 0..2 {
                assert!((piv.at(&[0, t, j]) - iv.at(&[0, src, j])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn swapping_sentences_swaps_relation_halves() {
        let model = Model::new(tiny_config(PlacementSet::empty(), 0.0), 10).unwrap();
        let relation = |p: &[usize], h: &[usize]| {
            let batch = Batch::single(&pair(p, h, 0)).unwrap();
            let mut tape = Tape::new();
            let vars = model.params().bind(&mut tape);
            let mut d = model.config().dropout(Mode::Eval, 0).unwrap();
            let out = model
                .forward(&mut tape, &vars, &batch.premise, &batch.hypothesis, &mut d)
                .unwrap();
            tape.value(out.relation).data().to_vec()
        };
        let a = relation(&[2, 3, 4], &[5, 6]);
        let b = relation(&[5, 6], &[2, 3, 4]);
        let half = a.len() / 2;
        for k in 0..half {
            assert!((a[k] - b[half + k]).abs() < 1e-12);
            assert!((a[half + k] - b[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn full_model_gradient_check_both_modes() {
        let model = Model::new(tiny_config(PlacementSet::all(), 0.3), 10).unwrap();
        let batch =
            Batch::from_examples(&[&pair(&[2, 3, 4], &[5, 6], 1), &pair(&[7, 8], &[9, 2, 3], 2)])
                .unwrap();
        for mode in [Mode::Eval, Mode::Train] {
            let report = model.gradient_check(&batch, mode, 5).unwrap();
            assert_eq!(report.groups.len(), model.params().len());
            assert!(
                report.violations(1e-4).is_empty(),
                "{mode:?}: {:?}",
                report.violations(1e-4)
            );
        }
    }

    #[test]
    fn from_params_restores_identical_model() {
        let model = Model::new(tiny_config(PlacementSet::empty(), 0.0), 10).unwrap();
        let mut other_cfg = model.config().clone();
        other_cfg.seed = 999;
        let restored = Model::from_params(other_cfg, model.params().clone()).unwrap();
        assert_eq!(restored.params(), model.params());
        let bad = Model::new(
            ModelConfig {
                hidden_units: 4,
                ..tiny_config(PlacementSet::empty(), 0.0)
            },
            10,
        )
        .unwrap();
        assert!(Model::from_params(model.config().clone(), bad.params().clone()).is_err());
    }

    #[test]
    fn embedding_dimension_must_match_config() {
        let mut r = rng(8);
        let table = EmbeddingTable::random(10, 5, &mut r);
        assert!(matches!(
            Model::with_embeddings(tiny_config(PlacementSet::empty(), 0.0), table),
            Err(Error::Config(_))
        ));
    }
}
