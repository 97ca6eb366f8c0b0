//! End-to-end character recognizer: pyramidal bidirectional GRU encoder with
//! frame subsampling, additive-attention character decoder, CTC head, and the
//! joint loss λ·L_ctc + (1−λ)·L_att.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Alphabet, CorpusError, Utterance};
use crate::nn::{
    self, adam_step, clip_global_norm, AdamConfig, AdamState, AttentionParams, DropoutMode,
    DropoutSpec, GruParams, ParamId, ParamSet,
};
use crate::seeding;
use crate::tape::{Tape, Var};
use crate::tensor::{log_add, NdArray};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("utterance too short: T={t}, minimum {min}")]
    TooShort { t: usize, min: usize },
    #[error("empty target text")]
    EmptyText,
    #[error("ctc alignment infeasible: L={l}, need at least {need}")]
    AlignmentInfeasible { l: usize, need: usize },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("non-finite forward pass: {0}")]
    NonFinite(String),
    #[error(transparent)]
    Nn(#[from] nn::NnError),
    #[error("checkpoint error at {path}: {msg}")]
    Checkpoint { path: String, msg: String },
    #[error("training dataset is empty or not fully labeled")]
    BadDataset,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub encoder_hidden: usize,
    pub subsample_factors: Vec<usize>,
    pub decoder_hidden: usize,
    pub attention_dim: usize,
    pub embed_dim: usize,
    pub dropout_rate: f64,
    /// λ of the joint loss λ·L_ctc + (1−λ)·L_att.
    pub ctc_weight: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feature_dim: 16,
            encoder_hidden: 32,
            subsample_factors: vec![2, 2],
            decoder_hidden: 32,
            attention_dim: 32,
            embed_dim: 16,
            dropout_rate: 0.2,
            ctc_weight: 0.3,
        }
    }
}

impl ModelConfig {
    pub fn encoder_layers(&self) -> usize {
        self.subsample_factors.len()
    }

    /// Minimum frame count an utterance must have.
    pub fn min_frames(&self) -> usize {
        self.subsample_factors.iter().product::<usize>().max(1)
    }

    /// Encoded length after successive ceil-divisions, or None if too short.
    pub fn encoded_len(&self, t: usize) -> Option<usize> {
        if t < self.min_frames() {
            return None;
        }
        let mut l = t;
        for &f in &self.subsample_factors {
            l = l.div_ceil(f);
        }
        Some(l)
    }
}

/// Per-step decoder posteriors (and optionally CTC frame posteriors)
/// collected during a forward pass.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct PosteriorTrace {
    pub decoder_steps: Vec<Vec<f64>>,
    pub ctc_frames: Option<Vec<Vec<f64>>>,
}

/// Sum of per-step negative log posteriors of `targets` under `probs`.
pub fn nll_of_posteriors(probs: &[Vec<f64>], targets: &[usize]) -> f64 {
    assert_eq!(probs.len(), targets.len());
    probs.iter().zip(targets).map(|(p, &t)| -p[t].ln()).sum()
}

struct Layout {
    enc: Vec<[GruParams; 2]>, // [forward, backward] per layer
    att: AttentionParams,
    dec: GruParams,
    emb: ParamId,
    wo: ParamId,
    bo: ParamId,
    ctc_w: ParamId,
    ctc_b: ParamId,
}

pub struct Model {
    pub cfg: ModelConfig,
    pub alphabet: Alphabet,
    pub params: ParamSet,
    layout: Layout,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        let mut m = Model::new(self.cfg.clone(), self.alphabet.clone(), 0);
        m.params = self.params.clone();
        m
    }
}

pub struct StepOutput {
    pub log_posterior: Var,
    pub state: Var,
    pub attention: Var,
}

impl Model {
    /// Deterministic Glorot-uniform initialization from `seed`.
    pub fn new(cfg: ModelConfig, alphabet: Alphabet, seed: u64) -> Model {
        let mut rng = seeding::rng_for(seed, &["model-init"]);
        let mut set = ParamSet::new();
        let h = cfg.encoder_hidden;
        let mut enc = Vec::new();
        let mut input = cfg.feature_dim;
        for l in 0..cfg.encoder_layers() {
            let fwd = GruParams::create(&mut set, &format!("enc.{l}.fwd"), input, h, &mut rng);
            let bwd = GruParams::create(&mut set, &format!("enc.{l}.bwd"), input, h, &mut rng);
            enc.push([fwd, bwd]);
            input = 2 * h;
        }
        let key_dim = 2 * h;
        let att = AttentionParams::create(
            &mut set,
            "att",
            cfg.decoder_hidden,
            key_dim,
            cfg.attention_dim,
            &mut rng,
        );
        let dec = GruParams::create(
            &mut set,
            "dec.cell",
            cfg.embed_dim + key_dim,
            cfg.decoder_hidden,
            &mut rng,
        );
        let emb = set.add_matrix("dec.emb", alphabet.decoder_dim(), cfg.embed_dim, &mut rng);
        let wo = set.add_matrix("dec.wo", cfg.decoder_hidden + key_dim, alphabet.decoder_dim(), &mut rng);
        let bo = set.add_bias("dec.bo", alphabet.decoder_dim());
        let ctc_w = set.add_matrix("ctc.w", key_dim, alphabet.ctc_dim(), &mut rng);
        let ctc_b = set.add_bias("ctc.b", alphabet.ctc_dim());
        Model {
            cfg,
            alphabet,
            params: set,
            layout: Layout { enc, att, dec, emb, wo, bo, ctc_w, ctc_b },
        }
    }

    /// Tape leaves for all parameters; leaf k corresponds to ParamId(k).
    /// Must be called on a fresh tape before any forward op.
    pub fn leaves(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.leaves(tape)
    }

    /// Run the pyramidal bidirectional encoder; returns the L×2H key matrix.
    pub fn encode(
        &self,
        tape: &mut Tape,
        leaves: &[Var],
        features: &NdArray,
        dropout: &DropoutSpec,
    ) -> Result<Var, ModelError> {
        let t_in = features.rows();
        if self.cfg.encoded_len(t_in).is_none() {
            return Err(ModelError::TooShort { t: t_in, min: self.cfg.min_frames() });
        }
        let h = self.cfg.encoder_hidden;
        let mut rows: Vec<Var> = (0..t_in)
            .map(|r| tape.leaf(NdArray::new(vec![1, features.cols()], features.row(r).to_vec())))
            .collect();
        for (l, dirs) in self.layout.enc.iter().enumerate() {
            let n = rows.len();
            let mut fwd = Vec::with_capacity(n);
            let mut state = tape.leaf(NdArray::zeros(vec![1, h]));
            for &x in &rows {
                state = nn::gru_cell(tape, leaves, &dirs[0], x, state);
                fwd.push(state);
            }
            let mut bwd = vec![fwd[0]; n];
            state = tape.leaf(NdArray::zeros(vec![1, h]));
            for (i, &x) in rows.iter().enumerate().rev() {
                state = nn::gru_cell(tape, leaves, &dirs[1], x, state);
                bwd[i] = state;
            }
            let layer_name = format!("enc.{l}");
            let mut outs = Vec::with_capacity(n);
            for i in 0..n {
                let cat = tape.concat_cols(&[fwd[i], bwd[i]]);
                outs.push(nn::dropout(tape, dropout, &layer_name, i as u64, cat));
            }
            let factor = self.cfg.subsample_factors[l];
            rows = outs.into_iter().step_by(factor).collect();
        }
        Ok(tape.concat_rows(&rows))
    }

    pub fn init_state(&self, tape: &mut Tape) -> Var {
        tape.leaf(NdArray::zeros(vec![1, self.cfg.decoder_hidden]))
    }

    /// One attention-decoder step conditioned on the previous output symbol.
    pub fn decode_step(
        &self,
        tape: &mut Tape,
        leaves: &[Var],
        prev_symbol: usize,
        state: Var,
        keys: Var,
        dropout: &DropoutSpec,
        step_index: u64,
    ) -> StepOutput {
        assert!(prev_symbol < self.alphabet.decoder_dim(), "invalid symbol index {prev_symbol}");
        let emb = tape.pick_row(leaves[self.layout.emb.0], prev_symbol);
        let (ctx, attention) = nn::additive_attention(tape, leaves, &self.layout.att, state, keys);
        let x = tape.concat_cols(&[emb, ctx]);
        let new_state = nn::gru_cell(tape, leaves, &self.layout.dec, x, state);
        // dropout only on the output branch; the recurrent state stays clean,
        // a fresh mask per step on the carried state wipes it out over long
        // sequences
        let dropped = nn::dropout(tape, dropout, "dec.cell", step_index, new_state);
        let out_in = tape.concat_cols(&[dropped, ctx]);
        let logits = nn::affine(tape, out_in, leaves[self.layout.wo.0], leaves[self.layout.bo.0]);
        let log_posterior = tape.log_softmax_rows(logits);
        StepOutput { log_posterior, state: new_state, attention }
    }

    /// Teacher-forced attention loss −log p(C|X) = Σ −log p(c_i|c_<i, X),
    /// final step predicting eos. Also returns the posterior trace.
    pub fn attention_loss_node(
        &self,
        tape: &mut Tape,
        leaves: &[Var],
        keys: Var,
        text: &str,
        dropout: &DropoutSpec,
    ) -> Result<(Var, PosteriorTrace), ModelError> {
        if text.is_empty() {
            return Err(ModelError::EmptyText);
        }
        let ids = self.alphabet.encode(text)?;
        let mut targets = ids.clone();
        targets.push(self.alphabet.eos_id());
        let mut prev = self.alphabet.sos_id();
        let mut state = self.init_state(tape);
        let mut terms = Vec::with_capacity(targets.len());
        let mut trace = PosteriorTrace::default();
        for (i, &tgt) in targets.iter().enumerate() {
            let step = self.decode_step(tape, leaves, prev, state, keys, dropout, i as u64);
            terms.push((tape.neg_pick(step.log_posterior, 0, tgt), 1.0));
            trace.decoder_steps.push(tape.value(step.log_posterior).data().iter().map(|&v| v.exp()).collect());
            state = step.state;
            prev = tgt;
        }
        Ok((tape.weighted_sum(&terms), trace))
    }

    /// CTC frame log-posteriors over the blank-augmented output space, L×(S+1).
    pub fn ctc_log_probs(&self, tape: &mut Tape, leaves: &[Var], keys: Var) -> Var {
        let logits =
            nn::affine(tape, keys, leaves[self.layout.ctc_w.0], leaves[self.layout.ctc_b.0]);
        tape.log_softmax_rows(logits)
    }

    /// CTC loss −log p_ctc(C|X) via the forward dynamic program.
    pub fn ctc_loss_node(
        &self,
        tape: &mut Tape,
        leaves: &[Var],
        keys: Var,
        text: &str,
    ) -> Result<Var, ModelError> {
        if text.is_empty() {
            return Err(ModelError::EmptyText);
        }
        let labels = self.alphabet.encode(text)?;
        let logp = self.ctc_log_probs(tape, leaves, keys);
        let (loss, grad) = ctc_forward_backward(tape.value(logp), &labels, self.alphabet.blank_id())?;
        Ok(tape.custom_scalar(logp, loss, grad))
    }

    /// λ·L_ctc + (1−λ)·L_att on a shared encoder pass. When the CTC alignment
    /// is infeasible for this utterance the CTC term is dropped (λ treated as
    /// 0); any other error propagates.
    pub fn joint_loss_node(
        &self,
        tape: &mut Tape,
        leaves: &[Var],
        features: &NdArray,
        text: &str,
        lambda: f64,
        dropout: &DropoutSpec,
    ) -> Result<(Var, PosteriorTrace), ModelError> {
        assert!((0.0..=1.0).contains(&lambda), "lambda must be in [0,1]");
        let keys = self.encode(tape, leaves, features, dropout)?;
        let (att, trace) = self.attention_loss_node(tape, leaves, keys, text, dropout)?;
        if lambda == 0.0 {
            return Ok((att, trace));
        }
        match self.ctc_loss_node(tape, leaves, keys, text) {
            Ok(ctc) => Ok((tape.weighted_sum(&[(ctc, lambda), (att, 1.0 - lambda)]), trace)),
            Err(ModelError::AlignmentInfeasible { .. }) => Ok((att, trace)),
            Err(e) => Err(e),
        }
    }

    /// Scalar joint loss (no gradients).
    pub fn joint_loss(
        &self,
        features: &NdArray,
        text: &str,
        lambda: f64,
        dropout: &DropoutSpec,
    ) -> Result<f64, ModelError> {
        let mut tape = Tape::new();
        let leaves = self.leaves(&mut tape);
        let (loss, _) = self.joint_loss_node(&mut tape, &leaves, features, text, lambda, dropout)?;
        tape.check_finite().map_err(ModelError::NonFinite)?;
        Ok(tape.value(loss).as_scalar())
    }

    /// Joint loss plus parameter gradients (indexed by ParamId order).
    pub fn joint_loss_grads(
        &self,
        features: &NdArray,
        text: &str,
        lambda: f64,
        dropout: &DropoutSpec,
    ) -> Result<(f64, Vec<NdArray>), ModelError> {
        let mut tape = Tape::new();
        let leaves = self.leaves(&mut tape);
        let (loss, _) = self.joint_loss_node(&mut tape, &leaves, features, text, lambda, dropout)?;
        tape.check_finite().map_err(ModelError::NonFinite)?;
        let value = tape.value(loss).as_scalar();
        let grads = tape.backward(loss);
        Ok((value, grads.into_iter().take(self.params.len()).collect()))
    }

    /// Attention loss alone (λ = 0), dropout off. Used for CV early selection.
    pub fn eval_loss(&self, features: &NdArray, text: &str) -> Result<f64, ModelError> {
        self.joint_loss(features, text, 0.0, &DropoutSpec::off())
    }

    pub fn is_encoder_param(name: &str) -> bool {
        name.starts_with("enc.")
    }

    // ----- checkpoint I/O ------------------------------------------------

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let err = |msg: String| ModelError::Checkpoint { path: path.display().to_string(), msg };
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(b"STCKPT01");
        let header = serde_json::to_vec(&(&self.cfg, &self.alphabet)).map_err(|e| err(e.to_string()))?;
        buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
        buf.extend_from_slice(&header);
        buf.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in self.params.iter() {
            buf.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            buf.extend_from_slice(p.name.as_bytes());
            buf.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
            for &d in p.value.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in p.value.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| err(e.to_string()))?;
        f.write_all(&buf).map_err(|e| err(e.to_string()))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Model, ModelError> {
        let err = |msg: String| ModelError::Checkpoint { path: path.display().to_string(), msg };
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| err(e.to_string()))?;
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8], ModelError> {
            if *pos + n > bytes.len() {
                return Err(ModelError::Checkpoint {
                    path: path.display().to_string(),
                    msg: "truncated checkpoint".into(),
                });
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 8)? != b"STCKPT01" {
            return Err(err("bad magic".into()));
        }
        let hlen = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let (cfg, alphabet): (ModelConfig, Alphabet) =
            serde_json::from_slice(take(&mut pos, hlen)?).map_err(|e| err(e.to_string()))?;
        let mut model = Model::new(cfg, alphabet, 0);
        let n = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        if n != model.params.len() {
            return Err(err(format!("parameter count {} != expected {}", n, model.params.len())));
        }
        for i in 0..n {
            let nlen = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut pos, nlen)?.to_vec()).map_err(|e| err(e.to_string()))?;
            let ndim = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize);
            }
            let count: usize = shape.iter().product();
            let mut data = Vec::with_capacity(count);
            for _ in 0..count {
                data.push(f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()));
            }
            let p = model.params.get_mut(ParamId(i));
            if p.name != name || p.value.shape() != shape.as_slice() {
                return Err(err(format!("parameter {i} mismatch: {name} {shape:?}")));
            }
            p.value = NdArray::new(shape, data);
        }
        Ok(model)
    }
}

/// CTC forward-backward over the blank-augmented label sequence, in log
/// space. Returns (−log p_ctc, gradient of the loss w.r.t. `logp`).
pub fn ctc_forward_backward(
    logp: &NdArray,
    labels: &[usize],
    blank: usize,
) -> Result<(f64, NdArray), ModelError> {
    let l = logp.rows();
    let n = labels.len();
    assert!(n >= 1);
    let repeats = labels.windows(2).filter(|w| w[0] == w[1]).count();
    let need = n + repeats;
    if l < need {
        return Err(ModelError::AlignmentInfeasible { l, need });
    }
    // extended sequence: blank, l1, blank, l2, ..., blank
    let s_len = 2 * n + 1;
    let lab = |s: usize| if s % 2 == 0 { blank } else { labels[s / 2] };
    let neg = f64::NEG_INFINITY;

    let mut alpha = vec![vec![neg; s_len]; l];
    alpha[0][0] = logp.at(0, blank);
    if s_len > 1 {
        alpha[0][1] = logp.at(0, lab(1));
    }
    for t in 1..l {
        for s in 0..s_len {
            let mut acc = alpha[t - 1][s];
            if s >= 1 {
                acc = log_add(acc, alpha[t - 1][s - 1]);
            }
            if s >= 2 && lab(s) != blank && lab(s) != lab(s - 2) {
                acc = log_add(acc, alpha[t - 1][s - 2]);
            }
            alpha[t][s] = acc + logp.at(t, lab(s));
        }
    }
    let log_z = log_add(alpha[l - 1][s_len - 1], if s_len > 1 { alpha[l - 1][s_len - 2] } else { neg });
    if log_z == neg {
        return Err(ModelError::AlignmentInfeasible { l, need });
    }

    // beta[t][s] includes the emission at t
    let mut beta = vec![vec![neg; s_len]; l];
    beta[l - 1][s_len - 1] = logp.at(l - 1, lab(s_len - 1));
    if s_len > 1 {
        beta[l - 1][s_len - 2] = logp.at(l - 1, lab(s_len - 2));
    }
    for t in (0..l - 1).rev() {
        for s in 0..s_len {
            let mut acc = beta[t + 1][s];
            if s + 1 < s_len {
                acc = log_add(acc, beta[t + 1][s + 1]);
            }
            if s + 2 < s_len && lab(s + 2) != blank && lab(s + 2) != lab(s) {
                acc = log_add(acc, beta[t + 1][s + 2]);
            }
            beta[t][s] = acc + logp.at(t, lab(s));
        }
    }

    // dL/dlogp[t][k] = -Σ_{s: lab(s)=k} exp(α[t][s] + β[t][s] − logp[t][lab(s)] − logZ)
    let mut grad = NdArray::zeros(vec![l, logp.cols()]);
    for t in 0..l {
        for s in 0..s_len {
            let k = lab(s);
            let v = alpha[t][s] + beta[t][s] - logp.at(t, k) - log_z;
            if v > neg {
                let cur = grad.at(t, k);
                grad.set(t, k, cur - v.exp());
            }
        }
    }
    Ok((-log_z, grad))
}

// --------------------------------------------------------------------------
// Training
// --------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    All,
    EncoderOnly,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainHyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip_norm: f64,
    /// Dropout rate during training; 0 disables dropout entirely.
    pub dropout_rate: f64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper { epochs: 10, batch_size: 16, lr: 2e-3, clip_norm: 5.0, dropout_rate: 0.0 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean training loss per output symbol.
    pub train_loss: f64,
    /// Mean eval attention loss per output symbol (dropout off).
    pub eval_loss: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub curve: Vec<EpochStats>,
    pub best_epoch: Option<usize>,
    pub diverged: bool,
}

fn symbols_of(text: &str) -> f64 {
    (text.chars().count() + 1) as f64
}

/// Mean per-symbol attention loss over a labeled set, dropout off.
pub fn eval_set_loss(model: &Model, set: &[Utterance]) -> Result<f64, ModelError> {
    use rayon::prelude::*;
    let losses: Result<Vec<(f64, f64)>, ModelError> = set
        .par_iter()
        .map(|u| {
            let text = u.text.as_deref().ok_or(ModelError::BadDataset)?;
            Ok((model.eval_loss(&u.features, text)?, symbols_of(text)))
        })
        .collect();
    let losses = losses?;
    let total: f64 = losses.iter().map(|(l, _)| l).sum();
    let syms: f64 = losses.iter().map(|(_, s)| s).sum();
    Ok(total / syms.max(1.0))
}

/// Shuffled-minibatch Adam on the joint loss. Per-utterance gradients within
/// a batch are computed in parallel and summed in fixed utterance order, so
/// results are bit-reproducible regardless of the worker count. Returns the
/// parameters of the epoch with the best eval loss.
pub fn train(
    model: &mut Model,
    data: &[Utterance],
    eval: &[Utterance],
    hyper: &TrainHyper,
    mode: TrainMode,
    seed: u64,
) -> Result<TrainReport, ModelError> {
    use rayon::prelude::*;
    if hyper.epochs == 0 || data.is_empty() {
        if data.is_empty() && hyper.epochs > 0 {
            return Err(ModelError::BadDataset);
        }
        return Ok(TrainReport::default());
    }
    if data.iter().any(|u| u.text.is_none()) {
        return Err(ModelError::BadDataset);
    }
    let trainable: Vec<bool> = model
        .params
        .iter()
        .map(|p| mode == TrainMode::All || Model::is_encoder_param(&p.name))
        .collect();
    let adam_cfg = AdamConfig { lr: hyper.lr, ..AdamConfig::default() };
    let mut adam = AdamState::for_params(&model.params);
    let lambda = model.cfg.ctc_weight;

    let mut report = TrainReport::default();
    let mut best: Option<(f64, ParamSet)> = None;
    'epochs: for epoch in 0..hyper.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut rng = seeding::rng(seeding::mix_u64(seed, &[0x51, epoch as u64]));
        shuffle(&mut order, &mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_syms = 0.0;
        for (batch_no, batch) in order.chunks(hyper.batch_size.max(1)).enumerate() {
            let results: Result<Vec<_>, ModelError> = batch
                .par_iter()
                .map(|&idx| {
                    let u = &data[idx];
                    let text = u.text.as_deref().unwrap();
                    let dropout = if hyper.dropout_rate > 0.0 {
                        DropoutSpec {
                            rate: hyper.dropout_rate,
                            mode: DropoutMode::Train,
                            mask_seed: seeding::mix(seed, &["drop", &epoch.to_string(), &u.id]),
                        }
                    } else {
                        DropoutSpec::off()
                    };
                    let (loss, grads) =
                        model.joint_loss_grads(&u.features, text, lambda, &dropout)?;
                    Ok((loss, symbols_of(text), grads))
                })
                .collect();
            let results = match results {
                Ok(r) => r,
                Err(ModelError::NonFinite(_)) => {
                    report.diverged = true;
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            model.params.zero_grads();
            let mut batch_syms = 0.0;
            for (loss, syms, grads) in &results {
                epoch_loss += loss;
                epoch_syms += syms;
                batch_syms += syms;
                for (p, g) in model.params.iter_mut().zip(grads) {
                    p.grad.add_assign(g);
                }
            }
            // normalize by total output symbols in the batch
            let scale = 1.0 / batch_syms.max(1.0);
            for p in model.params.iter_mut() {
                p.grad.scale(scale);
            }
            clip_global_norm(&mut model.params, hyper.clip_norm);
            if let Err(nn::NnError::NonFiniteGrad(_)) =
                adam_step(&mut model.params, &mut adam, &adam_cfg, Some(&trainable))
            {
                report.diverged = true;
                break 'epochs;
            }
            let _ = batch_no;
        }
        let eval_loss = if eval.is_empty() {
            epoch_loss / epoch_syms.max(1.0)
        } else {
            match eval_set_loss(model, eval) {
                Ok(l) => l,
                Err(ModelError::NonFinite(_)) => {
                    report.diverged = true;
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        };
        report.curve.push(EpochStats {
            epoch,
            train_loss: epoch_loss / epoch_syms.max(1.0),
            eval_loss,
        });
        if best.as_ref().map_or(true, |(b, _)| eval_loss < *b) {
            best = Some((eval_loss, model.params.clone()));
            report.best_epoch = Some(epoch);
        }
    }
    // early selection: restore the best epoch (also the last good checkpoint
    // when training diverged)
    if let Some((_, params)) = best {
        model.params = params;
    }
    Ok(report)
}

/// Supervised adaptation; `EncoderOnly` leaves every non-encoder parameter
/// bit-identical.
pub fn adapt(
    model: &mut Model,
    data: &[Utterance],
    eval: &[Utterance],
    hyper: &TrainHyper,
    mode: TrainMode,
    seed: u64,
) -> Result<TrainReport, ModelError> {
    if data.is_empty() {
        return Ok(TrainReport::default());
    }
    train(model, data, eval, hyper, mode, seed)
}

fn shuffle(xs: &mut [usize], rng: &mut impl rand::Rng) {
    for i in (1..xs.len()).rev() {
        let j = rng.gen_range(0..=i);
        xs.swap(i, j);
    }
}
