//! LSTM predictive policy.
//!
//! The model reads the model-space input `x_in(t) = [joints, torques, whole
//! latent, thumb latent]`, optionally gates it with modality attention and
//! predicts the model-space frame `horizon` steps ahead through a sigmoid
//! readout. Hidden states are indexed `H[0] = 0` and `H[t + 1]` = state after
//! consuming frame `t`; a switch pair `(s, e)` constrains `‖H[e] − H[s]‖²`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{attention_forward, AttentionNet, ModalityLayout};
use crate::autoencoder::{Autoencoder, EpochLoss};
use crate::env::{judge, Env, EnvConfig, EvalOutcome, JudgeConfig, ObjectSpec};
use crate::episode::SubTask;
use crate::error::{Error, Result};
use crate::math::{
    affine_forward, sigmoid, Bound, Checkpoint, Matrix, NodeId, OptimizerConfig, OptimizerState, ParamId, ParamStore,
    Tape,
};
use crate::preprocess::{add_noise, ChannelLayout, NoiseSigmas, NormalizationStats, ProcessedEpisode};

/// Whole-hand and thumb tactile encoders feeding the policy.
#[derive(Clone, Debug, PartialEq)]
pub struct TactileEncoders {
    pub whole: Autoencoder,
    pub thumb: Autoencoder,
}

impl TactileEncoders {
    pub fn layout(&self, joints: usize) -> ModalityLayout {
        ModalityLayout::new(joints, self.whole.config.latent_dim, self.thumb.config.latent_dim)
    }

    /// Normalized frames `[joints, torques, whole, thumb]` → model inputs.
    pub fn model_inputs(&self, frames: &Matrix, ch: &ChannelLayout) -> Result<Matrix> {
        if frames.cols() != ch.width() {
            return Err(Error::shape("model_inputs", frames.shape(), (1, ch.width())));
        }
        let zw = self.whole.encode(&frames.col_slice(ch.whole_range().start, ch.whole))?;
        let zt = self.thumb.encode(&frames.col_slice(ch.thumb_range().start, ch.thumb))?;
        let jt = frames.col_slice(0, 2 * ch.joints);
        Matrix::hstack(&[&jt, &zw, &zt])
    }
}

/// Constrained `(start, end)` pairs in hidden-state indices.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwitchSpec {
    pub pairs: Vec<(usize, usize)>,
}

impl SwitchSpec {
    /// One pair per try-open, retract and slide segment of `labels`.
    pub fn from_labels(labels: &[SubTask]) -> Self {
        let mut pairs = Vec::new();
        let mut start = 0;
        for t in 1..=labels.len() {
            if t == labels.len() || labels[t] != labels[start] {
                if matches!(
                    labels[start],
                    SubTask::TryOpen | SubTask::RetractThumb | SubTask::SlideLeft | SubTask::SlideRight
                ) {
                    pairs.push((start, t));
                }
                start = t;
            }
        }
        Self { pairs }
    }

    /// The single pair `(0, T)`.
    pub fn whole_sequence(len: usize) -> Self {
        Self { pairs: vec![(0, len)] }
    }

    pub fn validate(&self, len: usize) -> Result<()> {
        match self.pairs.iter().find(|&&(s, e)| s >= e || e > len) {
            Some(p) => Err(Error::Config(format!("switch pair {p:?} invalid for a {len}-step sequence"))),
            None => Ok(()),
        }
    }
}

/// Teacher-forcing data of one episode in model space.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceData {
    pub inputs: Matrix,
    /// Row `t` is the clean model-space frame `t + horizon`.
    pub targets: Matrix,
    pub labels: Vec<SubTask>,
    pub switches: SwitchSpec,
}

impl SequenceData {
    /// Encodes a shifted processed episode.
    pub fn from_processed(ep: &ProcessedEpisode, encoders: &TactileEncoders) -> Result<Self> {
        if ep.horizon == 0 {
            return Err(Error::State("episode targets are not shifted".into()));
        }
        Ok(Self {
            inputs: encoders.model_inputs(&ep.inputs, &ep.channels)?,
            targets: encoders.model_inputs(&ep.targets, &ep.channels)?,
            switches: SwitchSpec::from_labels(&ep.labels),
            labels: ep.labels.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.rows() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub hidden_size: usize,
    pub attention: bool,
    pub attention_hidden: usize,
    pub layout: ModalityLayout,
}

impl PolicyConfig {
    pub fn new(layout: ModalityLayout, hidden_size: usize, attention: bool) -> Self {
        Self { hidden_size, attention, attention_hidden: 32, layout }
    }

    /// Width of the vector entering the cell. The thumb block is dropped
    /// when attention is off.
    pub fn lstm_input_width(&self) -> usize {
        if self.attention {
            self.layout.width()
        } else {
            self.layout.width_without_thumb()
        }
    }

    /// Predicted channels (the same model-space vector the cell reads).
    pub fn output_width(&self) -> usize {
        self.lstm_input_width()
    }

    pub fn validate(&self) -> Result<()> {
        self.layout.validate()?;
        if self.hidden_size == 0 || (self.attention && self.attention_hidden == 0) {
            return Err(Error::Config("hidden sizes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub gamma: f64,
    /// One weight per predicted channel.
    pub weights: Vec<f64>,
    pub horizon: usize,
}

/// Joints whose prediction error is doubled: finger-base lateral joints and
/// the three thumb joints.
pub const EMPHASIZED_JOINTS: [usize; 5] = [0, 1, 5, 6, 7];

impl LossConfig {
    pub fn new(config: &PolicyConfig, gamma: f64) -> Self {
        let mut weights = vec![1.0; config.output_width()];
        let joints = config.layout.blocks[0].width;
        for j in EMPHASIZED_JOINTS.into_iter().filter(|&j| j < joints) {
            weights[j] = 2.0;
        }
        Self { gamma, weights, horizon: 2 }
    }

    pub fn validate(&self, config: &PolicyConfig) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be finite and nonnegative, got {}", self.gamma)));
        }
        if self.weights.len() != config.output_width() {
            return Err(Error::Config(format!(
                "{} loss weights for {} predicted channels",
                self.weights.len(),
                config.output_width()
            )));
        }
        if self.weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("loss weights must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

/// Prediction and constraint parts of the sequence loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms {
    pub prediction: f64,
    pub constraint: f64,
    pub gamma: f64,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.prediction + self.gamma * self.constraint
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HiddenState {
    pub h: Matrix,
    pub c: Matrix,
}

impl HiddenState {
    pub fn zeros(batch: usize, hidden: usize) -> Self {
        Self { h: Matrix::zeros(batch, hidden), c: Matrix::zeros(batch, hidden) }
    }
}

/// Output of one plain (non-recording) cell step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    pub state: HiddenState,
    pub prediction: Matrix,
    pub attention: Option<Matrix>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Policy {
    pub config: PolicyConfig,
    pub params: ParamStore,
    attention: Option<AttentionNet>,
    lstm_w: ParamId,
    lstm_b: ParamId,
    out_w: ParamId,
    out_b: ParamId,
}

impl Policy {
    pub fn new(config: PolicyConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let h = config.hidden_size;
        let w_in = config.lstm_input_width();
        let attention = config
            .attention
            .then(|| AttentionNet::new(&mut params, h, config.layout.width(), config.attention_hidden, &mut rng));
        let lstm_w = params.add_uniform("lstm.w", w_in + h, 4 * h, h, &mut rng);
        let mut bias = Matrix::zeros(1, 4 * h);
        bias.as_mut_slice()[h..2 * h].fill(1.0);
        let lstm_b = params.add("lstm.b", bias);
        let out_w = params.add_uniform("out.w", h, config.output_width(), h, &mut rng);
        let out_b = params.add("out.b", Matrix::zeros(1, config.output_width()));
        Ok(Self { config, params, attention, lstm_w, lstm_b, out_w, out_b })
    }

    pub fn hidden_size(&self) -> usize {
        self.config.hidden_size
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        let trimmed = self.attention.is_none() && x.cols() == self.config.lstm_input_width();
        if x.cols() != self.config.layout.width() && !trimmed {
            return Err(Error::shape("policy input", x.shape(), (1, self.config.layout.width())));
        }
        Ok(())
    }

    /// One plain cell step on a batch of model inputs. Without attention the
    /// thumb block may already be dropped.
    pub fn step(&self, state: &HiddenState, x_in: &Matrix) -> Result<StepOutput> {
        self.check_input(x_in)?;
        let hs = self.config.hidden_size;
        let (x, attention) = match &self.attention {
            Some(net) => {
                let a = attention_forward(&self.params, net, &state.h, x_in)?;
                (crate::attention::apply_attention(x_in, &a, &self.config.layout)?, Some(a))
            }
            None => (x_in.col_slice(0, self.config.lstm_input_width()), None),
        };
        let z = affine_forward(&Matrix::hstack(&[&x, &state.h])?, self.params.value(self.lstm_w), self.params.value(self.lstm_b))?;
        let mut h = Matrix::zeros(x.rows(), hs);
        let mut c = Matrix::zeros(x.rows(), hs);
        for r in 0..x.rows() {
            let g = z.row(r);
            let c_prev = state.c.row(r);
            for k in 0..hs {
                let i = sigmoid(g[k]);
                let f = sigmoid(g[hs + k]);
                let cand = g[2 * hs + k].tanh();
                let o = sigmoid(g[3 * hs + k]);
                let ck = f * c_prev[k] + i * cand;
                c.set(r, k, ck);
                h.set(r, k, o * ck.tanh());
            }
        }
        let prediction = affine_forward(&h, self.params.value(self.out_w), self.params.value(self.out_b))?.map(sigmoid);
        Ok(StepOutput { state: HiddenState { h, c }, prediction, attention })
    }

    /// Records one cell step; returns `(h, c, prediction, attention)`.
    fn step_on_tape(
        &self,
        tape: &mut Tape<'_>,
        bound: &Bound,
        h: NodeId,
        c: NodeId,
        x_in: NodeId,
    ) -> Result<(NodeId, NodeId, NodeId, Option<NodeId>)> {
        let hs = self.config.hidden_size;
        let (x, att) = match &self.attention {
            Some(net) => {
                let a = net.forward_on_tape(tape, bound, h, x_in)?;
                (tape.block_scale(x_in, a, &self.config.layout.spans())?, Some(a))
            }
            None => (x_in, None),
        };
        let xh = tape.concat(&[x, h])?;
        let z = tape.affine(xh, bound[self.lstm_w], Some(bound[self.lstm_b]))?;
        let zi = tape.slice(z, 0, hs)?;
        let zf = tape.slice(z, hs, hs)?;
        let zg = tape.slice(z, 2 * hs, hs)?;
        let zo = tape.slice(z, 3 * hs, hs)?;
        let i = tape.sigmoid(zi);
        let f = tape.sigmoid(zf);
        let g = tape.tanh(zg);
        let o = tape.sigmoid(zo);
        let fc = tape.mul(f, c)?;
        let ig = tape.mul(i, g)?;
        let c_new = tape.add(fc, ig)?;
        let tc = tape.tanh(c_new);
        let h_new = tape.mul(o, tc)?;
        let y = tape.affine(h_new, bound[self.out_w], Some(bound[self.out_b]))?;
        let y = tape.sigmoid(y);
        Ok((h_new, c_new, y, att))
    }

    /// Records the loss of a padded batch. Returns `(total, prediction,
    /// constraint)`, each already divided by the number of episodes.
    fn loss_on_tape(
        &self,
        tape: &mut Tape<'_>,
        bound: &Bound,
        batch: &Batch,
        gamma: f64,
    ) -> Result<(NodeId, NodeId, NodeId)> {
        let b = batch.episodes;
        let hs = self.config.hidden_size;
        let mut h = tape.input(Matrix::zeros(b, hs));
        let mut c = tape.input(Matrix::zeros(b, hs));
        let mut states = vec![h];
        let mut terms = Vec::with_capacity(batch.inputs.len());
        for t in 0..batch.inputs.len() {
            let x = tape.input(batch.inputs[t].clone());
            let (h2, c2, y, _) = self.step_on_tape(tape, bound, h, c, x)?;
            terms.push(tape.weighted_sq_err(y, batch.targets[t].clone(), batch.weights[t].clone())?);
            states.push(h2);
            h = h2;
            c = c2;
        }
        let scale = 1.0 / b as f64;
        let pred_sum = tape.sum(&terms)?;
        let pred = tape.scale(pred_sum, scale);
        let mut pair_terms = Vec::with_capacity(batch.pairs.len());
        for ((s, e), mask) in &batch.pairs {
            pair_terms.push(tape.masked_sq_diff(states[*e], states[*s], mask.clone())?);
        }
        let constraint = if pair_terms.is_empty() {
            tape.input(Matrix::zeros(1, 1))
        } else {
            let s = tape.sum(&pair_terms)?;
            tape.scale(s, scale)
        };
        let weighted = tape.scale(constraint, gamma);
        let total = tape.sum(&[pred, weighted])?;
        Ok((total, pred, constraint))
    }

    /// Teacher-forced pass over one sequence.
    pub fn teacher_forced(&self, seq: &SequenceData) -> Result<ForwardTrace> {
        let t = seq.len();
        let mut state = HiddenState::zeros(1, self.config.hidden_size);
        let mut hidden = Matrix::zeros(t + 1, self.config.hidden_size);
        let mut predictions = Matrix::zeros(t, self.config.output_width());
        let mut attention = self.attention.map(|_| Matrix::zeros(t, 4));
        for step in 0..t {
            let out = self.step(&state, &seq.inputs.row_matrix(step))?;
            hidden.row_mut(step + 1).copy_from_slice(out.state.h.row(0));
            predictions.row_mut(step).copy_from_slice(out.prediction.row(0));
            if let (Some(a), Some(w)) = (attention.as_mut(), out.attention) {
                a.row_mut(step).copy_from_slice(w.row(0));
            }
            state = out.state;
        }
        Ok(ForwardTrace { hidden, predictions, attention })
    }

    /// Eq.-style sequence loss of one episode under teacher forcing.
    pub fn sequence_loss(&self, seq: &SequenceData, loss: &LossConfig) -> Result<LossTerms> {
        loss.validate(&self.config)?;
        seq.switches.validate(seq.len())?;
        let tr = self.teacher_forced(seq)?;
        let w = self.config.output_width();
        let mut prediction = 0.0;
        for t in 0..seq.len() {
            let (p, y) = (tr.predictions.row(t), &seq.targets.row(t)[..w]);
            prediction += p.iter().zip(y).zip(&loss.weights).map(|((p, y), k)| k * (p - y) * (p - y)).sum::<f64>();
        }
        let constraint = pair_distance_sum(&tr.hidden, &seq.switches);
        Ok(LossTerms { prediction, constraint, gamma: loss.gamma })
    }

    pub fn to_checkpoint(&self, config_hash: &str, optimizer: Option<OptimizerState>) -> Checkpoint {
        Checkpoint {
            kind: "policy".into(),
            config_hash: config_hash.into(),
            meta_json: serde_json::to_string(&self.config).expect("config serializes"),
            params: self.params.clone(),
            optimizer,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != "policy" {
            return Err(Error::format("policy checkpoint", format!("kind is `{}`", ck.kind)));
        }
        let config: PolicyConfig =
            serde_json::from_str(&ck.meta_json).map_err(|e| Error::format("policy checkpoint meta", e.to_string()))?;
        let reference = Policy::new(config.clone(), 0)?;
        let same_layout = reference.params.len() == ck.params.len()
            && reference.params.groups().iter().zip(ck.params.groups()).all(|(a, b)| a.name == b.name && a.value.shape() == b.value.shape());
        if !same_layout {
            return Err(Error::format("policy checkpoint", "parameter groups do not match the stored config"));
        }
        Ok(Self { params: ck.params.clone(), ..reference })
    }
}

/// Σ over pairs of `‖H[e] − H[s]‖²` for rows of `hidden` indexed `0..=T`.
pub fn pair_distance_sum(hidden: &Matrix, switches: &SwitchSpec) -> f64 {
    switches
        .pairs
        .iter()
        .map(|&(s, e)| hidden.row(e).iter().zip(hidden.row(s)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum()
}

/// Per-step records of a teacher-forced pass. `hidden` has `T + 1` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    pub hidden: Matrix,
    pub predictions: Matrix,
    pub attention: Option<Matrix>,
}

/// Padded minibatch in time-major layout.
#[derive(Clone, Debug)]
pub struct Batch {
    episodes: usize,
    inputs: Vec<Matrix>,
    targets: Vec<Matrix>,
    weights: Vec<Matrix>,
    /// Pairs shared by several episodes are merged; the mask counts each
    /// episode's occurrences of the pair.
    pairs: Vec<((usize, usize), Vec<f64>)>,
}

impl Batch {
    fn new(seqs: &[(&Matrix, &SequenceData)], config: &PolicyConfig, weights: &[f64]) -> Result<Batch> {
        let b = seqs.len();
        let t_max = seqs.iter().map(|(_, s)| s.len()).max().unwrap_or(0);
        let (w_full, w_out) = (config.layout.width(), config.output_width());
        let w_in = if config.attention { w_full } else { config.lstm_input_width() };
        let mut inputs = vec![Matrix::zeros(b, w_in); t_max];
        let mut targets = vec![Matrix::zeros(b, w_out); t_max];
        let mut wts = vec![Matrix::zeros(b, w_out); t_max];
        let mut pairs: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
        for (r, (x, seq)) in seqs.iter().enumerate() {
            if x.rows() != seq.len() || x.cols() != w_full || seq.targets.cols() != w_full {
                return Err(Error::shape("policy batch", x.shape(), seq.targets.shape()));
            }
            seq.switches.validate(seq.len())?;
            for t in 0..seq.len() {
                inputs[t].row_mut(r).copy_from_slice(&x.row(t)[..w_in]);
                targets[t].row_mut(r).copy_from_slice(&seq.targets.row(t)[..w_out]);
                wts[t].row_mut(r).copy_from_slice(weights);
            }
            for &p in &seq.switches.pairs {
                pairs.entry(p).or_insert_with(|| vec![0.0; b])[r] += 1.0;
            }
        }
        Ok(Batch { episodes: b, inputs, targets, weights: wts, pairs: pairs.into_iter().collect() })
    }
}

impl Policy {
    /// Mean-over-episodes loss terms of a prepared batch without a tape.
    pub fn batch_loss(&self, batch: &Batch, gamma: f64) -> Result<LossTerms> {
        let b = batch.episodes;
        let mut state = HiddenState::zeros(b, self.config.hidden_size);
        let mut states = vec![state.h.clone()];
        let mut prediction = 0.0;
        for t in 0..batch.inputs.len() {
            let out = self.step(&state, &batch.inputs[t])?;
            let (p, y, w) = (out.prediction.as_slice(), batch.targets[t].as_slice(), batch.weights[t].as_slice());
            prediction += p.iter().zip(y).zip(w).map(|((p, y), k)| k * (p - y) * (p - y)).sum::<f64>();
            states.push(out.state.h.clone());
            state = out.state;
        }
        let mut constraint = 0.0;
        for ((s, e), mask) in &batch.pairs {
            let (hs, he) = (&states[*s], &states[*e]);
            for (r, &m) in mask.iter().enumerate() {
                constraint += m * he.row(r).iter().zip(hs.row(r)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            }
        }
        let k = 1.0 / b as f64;
        Ok(LossTerms { prediction: prediction * k, constraint: constraint * k, gamma })
    }
}

/// Recomputes noisy model inputs from normalized frames each epoch.
#[derive(Clone, Debug)]
pub struct NoiseSource<'a> {
    /// Shifted processed episodes aligned with the training sequences.
    pub processed: &'a [ProcessedEpisode],
    pub encoders: &'a TactileEncoders,
    pub sigmas: NoiseSigmas,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    /// Largest gradient norm per update; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for PolicyTrainConfig {
    fn default() -> Self {
        Self { epochs: 3000, batch_size: 8, optimizer: OptimizerConfig::default(), clip_norm: 10.0 }
    }
}

#[derive(Clone, Debug)]
pub struct TrainedPolicy {
    pub policy: Policy,
    pub optimizer: OptimizerState,
    pub curve: Vec<EpochLoss>,
    pub best_epoch: usize,
    pub warnings: Vec<String>,
}

/// Mean loss terms over sequences (teacher forcing, clean inputs).
pub fn mean_loss(policy: &Policy, seqs: &[SequenceData], loss: &LossConfig) -> Result<LossTerms> {
    let mut acc = LossTerms { prediction: 0.0, constraint: 0.0, gamma: loss.gamma };
    for s in seqs {
        let t = policy.sequence_loss(s, loss)?;
        acc.prediction += t.prediction;
        acc.constraint += t.constraint;
    }
    let n = seqs.len().max(1) as f64;
    acc.prediction /= n;
    acc.constraint /= n;
    Ok(acc)
}

fn clip_gradients(store: &mut ParamStore, max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = store.groups().iter().flat_map(|g| g.grad.as_slice()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        store.groups_mut().iter_mut().for_each(|g| g.grad.map_inplace(|v| v * k));
    }
}

/// Minibatch training with teacher forcing; returns the parameters of the
/// epoch with the lowest validation loss.
pub fn train_policy(
    train: &[SequenceData],
    validation: &[SequenceData],
    config: &PolicyConfig,
    loss: &LossConfig,
    train_config: &PolicyTrainConfig,
    seed: u64,
    noise: Option<&NoiseSource<'_>>,
) -> Result<TrainedPolicy> {
    loss.validate(config)?;
    if train.is_empty() || validation.is_empty() {
        return Err(Error::Config("policy training needs non-empty train and validation splits".into()));
    }
    if train_config.epochs == 0 || train_config.batch_size == 0 {
        return Err(Error::Config("epochs and batch_size must be positive".into()));
    }
    if let Some(n) = noise {
        if n.processed.len() != train.len() {
            return Err(Error::Config("noise source does not match the training set".into()));
        }
    }
    let mut warnings = Vec::new();
    if loss.gamma > 0.0 && train.iter().all(|s| s.switches.pairs.is_empty()) {
        warnings.push("gamma > 0 but no switch pairs: constraint term is 0".to_string());
    }
    let mut policy = Policy::new(config.clone(), seed)?;
    let val_batch = policy.prepare_batch(validation, loss)?;
    let mut opt = OptimizerState::new(train_config.optimizer, &policy.params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9011_c1e5);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best = policy.clone();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let mut curve = Vec::with_capacity(train_config.epochs);

    for epoch in 1..=train_config.epochs {
        let inputs: Vec<Matrix> = match noise {
            Some(n) => n
                .processed
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    let noisy = add_noise(p, n.sigmas, seed ^ ((epoch as u64) << 20) ^ i as u64)?;
                    n.encoders.model_inputs(&noisy.inputs, &noisy.channels)
                })
                .collect::<Result<_>>()?,
            None => train.iter().map(|s| s.inputs.clone()).collect(),
        };
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(train_config.batch_size) {
            let items: Vec<(&Matrix, &SequenceData)> = chunk.iter().map(|&i| (&inputs[i], &train[i])).collect();
            let batch = Batch::new(&items, config, &loss.weights)?;
            let grads = {
                let mut tape = Tape::new();
                let bound = tape.bind(&policy.params);
                let (root, _, _) = policy.loss_on_tape(&mut tape, &bound, &batch, loss.gamma)?;
                total += tape.scalar(root) * chunk.len() as f64;
                tape.backward(root)?
            };
            policy.params.accumulate(&grads.params)?;
            clip_gradients(&mut policy.params, train_config.clip_norm);
            opt.step(&mut policy.params)?;
        }
        let val = policy.batch_loss(&val_batch, loss.gamma)?.total();
        if !val.is_finite() {
            return Err(Error::Diverged { epoch, value: val });
        }
        curve.push(EpochLoss { epoch, train: total / train.len() as f64, validation: val });
        if val < best_val {
            best_val = val;
            best_epoch = epoch;
            best.params.copy_values_from(&policy.params)?;
        }
    }
    Ok(TrainedPolicy { policy: best, optimizer: opt, curve, best_epoch, warnings })
}

impl Policy {
    /// Clean-input minibatch of `seqs` for [`Policy::batch_loss_on_tape`].
    pub fn prepare_batch(&self, seqs: &[SequenceData], loss: &LossConfig) -> Result<Batch> {
        loss.validate(&self.config)?;
        let items: Vec<(&Matrix, &SequenceData)> = seqs.iter().map(|s| (&s.inputs, s)).collect();
        Batch::new(&items, &self.config, &loss.weights)
    }

    /// Records the mean-over-episodes loss of a prepared batch; returns
    /// `(total, prediction, constraint)` nodes.
    pub fn batch_loss_on_tape(
        &self,
        tape: &mut Tape<'_>,
        bound: &Bound,
        batch: &Batch,
        gamma: f64,
    ) -> Result<(NodeId, NodeId, NodeId)> {
        self.loss_on_tape(tape, bound, batch, gamma)
    }
}

/// Per-step record of a closed-loop trial.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutTrace {
    pub outcome: EvalOutcome,
    /// Kinematic phase at each observation.
    pub labels: Vec<SubTask>,
    pub attention: Option<Matrix>,
    /// `H[t + 1]`, one row per step.
    pub hidden: Matrix,
    pub commands: Vec<Vec<f64>>,
    pub cap_open: Vec<bool>,
    pub error: Option<String>,
}

/// Everything a closed-loop rollout reads.
#[derive(Clone, Copy, Debug)]
pub struct Controller<'a> {
    pub policy: &'a Policy,
    pub encoders: &'a TactileEncoders,
    pub stats: &'a NormalizationStats,
}

impl Controller<'_> {
    fn model_input(&self, obs: &crate::env::Observation) -> Result<Matrix> {
        let clip = self.stats.clip_bound;
        let mut frame: Vec<f64> = obs.joints.iter().chain(&obs.torques).copied().collect();
        frame.extend(obs.tactile_whole.iter().chain(&obs.tactile_thumb).map(|v| v.clamp(-clip, clip)));
        self.stats.scale_frame(&mut frame);
        let ch = self.stats.channels();
        self.encoders.model_inputs(&Matrix::row_vector(&frame), &ch)
    }

    /// Runs one trial: observe, encode, predict, command predicted joints.
    pub fn rollout(&self, env_config: &EnvConfig, object: &ObjectSpec, initial_pos: f64, seed: u64, judge_config: &JudgeConfig) -> Result<RolloutTrace> {
        let (mut env, mut obs) = Env::reset(env_config, object, initial_pos, seed)?;
        let joints = env_config.joints;
        let hs = self.policy.hidden_size();
        let mut state = HiddenState::zeros(1, hs);
        let mut labels = Vec::new();
        let mut hidden = Vec::new();
        let mut attention = Vec::new();
        let mut commands: Vec<Vec<f64>> = Vec::new();
        let mut cap_open = Vec::new();
        let mut error = None;
        let mut open_step = None;
        while commands.len() < judge_config.rollout_end(open_step) {
            labels.push(env.state().phase);
            let out = self.policy.step(&state, &self.model_input(&obs)?)?;
            hidden.extend_from_slice(out.state.h.row(0));
            if let Some(a) = &out.attention {
                attention.extend_from_slice(a.row(0));
            }
            let cmd = self.stats.unscale(0, &out.prediction.row(0)[..joints]);
            state = out.state;
            match env.step(&cmd) {
                Ok(o) => obs = o,
                Err(e) => {
                    error = Some(e.to_string());
                    commands.push(cmd);
                    cap_open.push(env.state().cap_open);
                    break;
                }
            }
            commands.push(cmd);
            cap_open.push(env.state().cap_open);
            if open_step.is_none() && env.state().cap_open {
                open_step = Some(commands.len() - 1);
            }
        }
        let n = commands.len();
        let mut outcome = judge(&commands, &cap_open, judge_config);
        if error.is_some() {
            outcome.result = crate::env::TrialResult::Failure;
        }
        Ok(RolloutTrace {
            outcome,
            labels,
            attention: self.policy.attention.map(|_| Matrix::from_vec(n, 4, attention)).transpose()?,
            hidden: Matrix::from_vec(n, hs, hidden)?,
            commands,
            cap_open,
            error,
        })
    }
}

/// Attention trace CSV: `t,A_joint,A_torque,A_whole_tactile,A_thumb_tactile,subtask_label`.
pub fn attention_trace_csv(attention: &Matrix, labels: &[SubTask]) -> String {
    let mut s = String::from("t,A_joint,A_torque,A_whole_tactile,A_thumb_tactile,subtask_label\n");
    for (t, l) in labels.iter().enumerate().take(attention.rows()) {
        let a = attention.row(t);
        let _ = writeln!(s, "{t},{},{},{},{},{l}", a[0], a[1], a[2], a[3]);
    }
    s
}

/// Hidden trace CSV: `t,subtask_label,h_0,…,h_{n-1}`.
pub fn hidden_trace_csv(hidden: &Matrix, labels: &[SubTask]) -> String {
    let mut s = String::from("t,subtask_label");
    for k in 0..hidden.cols() {
        let _ = write!(s, ",h_{k}");
    }
    s.push('\n');
    for (t, l) in labels.iter().enumerate().take(hidden.rows()) {
        let _ = write!(s, "{t},{l}");
        for v in hidden.row(t) {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

/// Parses either trace CSV back into `(values, labels)`; the label column
/// is found by header name and `#` lines are skipped.
pub fn parse_trace_csv(text: &str) -> Result<(Matrix, Vec<SubTask>)> {
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    let header: Vec<&str> = lines.next().ok_or_else(|| Error::format("trace", "empty file"))?.split(',').collect();
    let label_col = header
        .iter()
        .position(|h| *h == "subtask_label")
        .ok_or_else(|| Error::format("trace", "missing subtask_label column"))?;
    let value_cols: Vec<usize> = (1..header.len()).filter(|&c| c != label_col).collect();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != header.len() {
            return Err(Error::format("trace", format!("row {} has {} fields", i + 1, f.len())));
        }
        labels.push(f[label_col].parse()?);
        for &c in &value_cols {
            data.push(f[c].parse::<f64>().map_err(|_| Error::format("trace", format!("bad number in row {}", i + 1)))?);
        }
    }
    Ok((Matrix::from_vec(labels.len(), value_cols.len(), data)?, labels))
}
