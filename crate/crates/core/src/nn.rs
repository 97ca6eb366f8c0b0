//! Neural substrate: named parameters, layers on top of the tape, inverted
//! dropout, and a bias-corrected Adam optimizer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::seeding;
use crate::tape::{Tape, Var};
use crate::tensor::NdArray;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGrad(String),
    #[error("non-finite value during forward pass: {0}")]
    NonFiniteForward(String),
    #[error("{0}")]
    Shape(String),
}

/// A trainable tensor with a stable name for checkpointing.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamTensor {
    pub name: String,
    pub value: NdArray,
    pub grad: NdArray,
}

/// Ordered collection of parameters. Order is creation order and is part of
/// the determinism contract (gradient reductions and Adam updates walk it).
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ParamSet {
    params: Vec<ParamTensor>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamId(pub usize);

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    /// Glorot-uniform matrix parameter.
    pub fn add_matrix(&mut self, name: &str, rows: usize, cols: usize, rng: &mut impl Rng) -> ParamId {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect();
        self.push(name, NdArray::new(vec![rows, cols], data))
    }

    /// Zero-initialized bias (row vector).
    pub fn add_bias(&mut self, name: &str, cols: usize) -> ParamId {
        self.push(name, NdArray::zeros(vec![1, cols]))
    }

    pub fn push(&mut self, name: &str, value: NdArray) -> ParamId {
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name `{name}`"
        );
        let grad = NdArray::zeros(value.shape().to_vec());
        self.params.push(ParamTensor { name: name.to_string(), value, grad });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ParamTensor {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamTensor {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamTensor> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamTensor> {
        self.params.iter_mut()
    }

    pub fn by_name(&self, name: &str) -> Option<&ParamTensor> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Materialize every parameter as a tape leaf; index k is the leaf for
    /// ParamId(k).
    pub fn leaves(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.value.clone())).collect()
    }
}

/// y = xW + b on the tape.
pub fn affine(tape: &mut Tape, x: Var, w: Var, b: Var) -> Var {
    let y = tape.matmul(x, w);
    tape.add_row(y, b)
}

/// Parameter ids for one GRU cell.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct GruParams {
    pub wz: ParamId,
    pub uz: ParamId,
    pub bz: ParamId,
    pub wr: ParamId,
    pub ur: ParamId,
    pub br: ParamId,
    pub wh: ParamId,
    pub uh: ParamId,
    pub bh: ParamId,
}

impl GruParams {
    pub fn create(set: &mut ParamSet, prefix: &str, input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        GruParams {
            wz: set.add_matrix(&format!("{prefix}.wz"), input, hidden, rng),
            uz: set.add_matrix(&format!("{prefix}.uz"), hidden, hidden, rng),
            bz: set.add_bias(&format!("{prefix}.bz"), hidden),
            wr: set.add_matrix(&format!("{prefix}.wr"), input, hidden, rng),
            ur: set.add_matrix(&format!("{prefix}.ur"), hidden, hidden, rng),
            br: set.add_bias(&format!("{prefix}.br"), hidden),
            wh: set.add_matrix(&format!("{prefix}.wh"), input, hidden, rng),
            uh: set.add_matrix(&format!("{prefix}.uh"), hidden, hidden, rng),
            bh: set.add_bias(&format!("{prefix}.bh"), hidden),
        }
    }
}

/// One gated-recurrent step: h' = (1-z)∘h + z∘tanh(xWh + (r∘h)Uh + bh).
pub fn gru_cell(tape: &mut Tape, leaves: &[Var], p: &GruParams, x: Var, h_prev: Var) -> Var {
    let xz = affine(tape, x, leaves[p.wz.0], leaves[p.bz.0]);
    let hz = tape.matmul(h_prev, leaves[p.uz.0]);
    let z_pre = tape.add(xz, hz);
    let z = tape.sigmoid(z_pre);

    let xr = affine(tape, x, leaves[p.wr.0], leaves[p.br.0]);
    let hr = tape.matmul(h_prev, leaves[p.ur.0]);
    let r_pre = tape.add(xr, hr);
    let r = tape.sigmoid(r_pre);

    let rh = tape.mul(r, h_prev);
    let xh = affine(tape, x, leaves[p.wh.0], leaves[p.bh.0]);
    let hh = tape.matmul(rh, leaves[p.uh.0]);
    let cand_pre = tape.add(xh, hh);
    let cand = tape.tanh(cand_pre);

    let one_minus_z = tape.affine_scalar(z, -1.0, 1.0);
    let keep = tape.mul(one_minus_z, h_prev);
    let update = tape.mul(z, cand);
    tape.add(keep, update)
}

/// Parameter ids for additive attention.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub v: ParamId,
}

impl AttentionParams {
    pub fn create(
        set: &mut ParamSet,
        prefix: &str,
        query_dim: usize,
        key_dim: usize,
        attn_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        AttentionParams {
            wq: set.add_matrix(&format!("{prefix}.wq"), query_dim, attn_dim, rng),
            wk: set.add_matrix(&format!("{prefix}.wk"), key_dim, attn_dim, rng),
            v: set.add_matrix(&format!("{prefix}.v"), attn_dim, 1, rng),
        }
    }
}

/// Additive attention: e_l = v·tanh(Wq q + Wk k_l); returns (context, weights).
pub fn additive_attention(
    tape: &mut Tape,
    leaves: &[Var],
    p: &AttentionParams,
    query: Var,
    keys: Var,
) -> (Var, Var) {
    let l = tape.shape(keys)[0];
    assert!(l >= 1, "attention over zero keys");
    let q_proj = tape.matmul(query, leaves[p.wq.0]); // 1×A
    let k_proj = tape.matmul(keys, leaves[p.wk.0]); // L×A
    let mixed = tape.add_row(k_proj, q_proj);
    let act = tape.tanh(mixed);
    let energies = tape.matmul(act, leaves[p.v.0]); // L×1
    let e_row = tape.reshape(energies, vec![1, l]);
    let weights = tape.softmax_rows(e_row); // 1×L
    let context = tape.matmul(weights, keys); // 1×key_dim
    (context, weights)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropoutMode {
    Train,
    InferenceOff,
    InferenceOn,
}

/// Inverted-dropout spec. Masks are a pure function of
/// (mask_seed, layer name, call index).
#[derive(Clone, Debug)]
pub struct DropoutSpec {
    pub rate: f64,
    pub mode: DropoutMode,
    pub mask_seed: u64,
}

impl DropoutSpec {
    pub fn off() -> Self {
        DropoutSpec { rate: 0.0, mode: DropoutMode::InferenceOff, mask_seed: 0 }
    }

    pub fn active(&self) -> bool {
        self.rate > 0.0 && self.mode != DropoutMode::InferenceOff
    }

    pub fn mask(&self, layer: &str, call_index: u64, len: usize) -> Vec<f64> {
        let seed = seeding::mix_u64(
            seeding::mix(self.mask_seed, &["dropout", layer]),
            &[call_index],
        );
        let mut rng = seeding::rng(seed);
        let keep = 1.0 - self.rate;
        (0..len).map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect()
    }
}

/// Apply dropout to a tape node. `call_index` distinguishes repeated
/// applications within one forward pass (e.g. per time step).
pub fn dropout(tape: &mut Tape, spec: &DropoutSpec, layer: &str, call_index: u64, x: Var) -> Var {
    assert!((0.0..1.0).contains(&spec.rate), "dropout rate must be in [0,1)");
    if !spec.active() {
        return x;
    }
    let len = tape.value(x).len();
    tape.mul_mask(x, spec.mask(layer, call_index, len))
}

/// Adam optimizer state (first/second moments per parameter, shared step count).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamState {
    m: Vec<NdArray>,
    v: Vec<NdArray>,
    pub step: u64,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 2e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamState {
    pub fn for_params(params: &ParamSet) -> Self {
        AdamState {
            m: params.iter().map(|p| NdArray::zeros(p.value.shape().to_vec())).collect(),
            v: params.iter().map(|p| NdArray::zeros(p.value.shape().to_vec())).collect(),
            step: 0,
        }
    }
}

/// Scale all gradients so their global L2 norm is at most `max_norm`.
pub fn clip_global_norm(params: &mut ParamSet, max_norm: f64) -> f64 {
    let norm = params.iter().map(|p| p.grad.norm_sq()).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for p in params.iter_mut() {
            p.grad.scale(s);
        }
    }
    norm
}

/// One bias-corrected Adam step over `trainable` (all params when None).
/// Parameters outside the trainable set keep value, grad, and moments intact.
pub fn adam_step(
    params: &mut ParamSet,
    state: &mut AdamState,
    cfg: &AdamConfig,
    trainable: Option<&[bool]>,
) -> Result<(), NnError> {
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);
    for (i, p) in params.params.iter_mut().enumerate() {
        if let Some(mask) = trainable {
            if !mask[i] {
                continue;
            }
        }
        if !p.grad.is_finite() {
            return Err(NnError::NonFiniteGrad(p.name.clone()));
        }
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        for ((w, g), (mi, vi)) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(p.grad.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
        {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * g;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * g * g;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *w -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff, rel_err};
    use crate::seeding::rng as seeded_rng;

    fn rand_arr(rng: &mut impl Rng, shape: Vec<usize>) -> NdArray {
        let n = shape.iter().product();
        NdArray::new(shape, (0..n).map(|_| rng.gen_range(-0.8..0.8)).collect())
    }

    #[test]
    fn affine_identity_and_hand_case() {
        let mut tape = Tape::new();
        let x = tape.leaf(NdArray::from_rows(vec![vec![1.0, 2.0]]));
        let w = tape.leaf(NdArray::from_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]]));
        let b = tape.leaf(NdArray::zeros(vec![1, 2]));
        let y = affine(&mut tape, x, w, b);
        assert_eq!(tape.value(y).data(), &[1.0, 2.0]);

        let w2 = tape.leaf(NdArray::from_rows(vec![vec![1.0], vec![1.0]]));
        let b2 = tape.leaf(NdArray::zeros(vec![1, 1]));
        let y2 = affine(&mut tape, x, w2, b2);
        assert_eq!(tape.value(y2).as_scalar(), 3.0);
    }

    /// Scalar head used by the layer gradient checks: sum over tanh keeps the
    /// output bounded so finite differences stay well-conditioned.
    fn scalar_head(tape: &mut Tape, x: Var) -> Var {
        let n = tape.value(x).len();
        let flat = tape.reshape(x, vec![1, n]);
        let sm = tape.log_softmax_rows(flat);
        tape.neg_pick(sm, 0, 0)
    }

    #[test]
    fn affine_gradient_check() {
        let mut rng = seeded_rng(21);
        let leaves =
            vec![rand_arr(&mut rng, vec![3, 4]), rand_arr(&mut rng, vec![4, 2]), rand_arr(&mut rng, vec![1, 2])];
        let eval = |ls: &[NdArray]| {
            let mut t = Tape::new();
            let x = t.leaf(ls[0].clone());
            let w = t.leaf(ls[1].clone());
            let b = t.leaf(ls[2].clone());
            let y = affine(&mut t, x, w, b);
            let out = scalar_head(&mut t, y);
            t.value(out).as_scalar()
        };
        let mut t = Tape::new();
        let vars: Vec<Var> = leaves.iter().map(|l| t.leaf(l.clone())).collect();
        let y = affine(&mut t, vars[0], vars[1], vars[2]);
        let out = scalar_head(&mut t, y);
        let grads = t.backward(out);
        for k in 0..3 {
            let fd = finite_diff(&eval, &leaves, k, 1e-5);
            assert!(rel_err(&grads[k], &fd) < 1e-6, "leaf {k}");
        }
    }

    #[test]
    fn gru_zero_weights_halves_state() {
        let mut set = ParamSet::new();
        let mut rng = seeded_rng(1);
        let p = GruParams::create(&mut set, "g", 3, 4, &mut rng);
        for param in set.iter_mut() {
            param.value.fill(0.0);
        }
        let mut tape = Tape::new();
        let leaves = set.leaves(&mut tape);
        let x = tape.leaf(NdArray::from_rows(vec![vec![0.3, -0.1, 0.5]]));
        let h = tape.leaf(NdArray::from_rows(vec![vec![0.4, -0.2, 0.8, 0.0]]));
        let h_new = gru_cell(&mut tape, &leaves, &p, x, h);
        let expect = [0.2, -0.1, 0.4, 0.0];
        for (got, want) in tape.value(h_new).data().iter().zip(expect) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn gru_zero_input_zero_state_is_zero() {
        let mut set = ParamSet::new();
        let mut rng = seeded_rng(2);
        let p = GruParams::create(&mut set, "g", 3, 4, &mut rng);
        let mut tape = Tape::new();
        let leaves = set.leaves(&mut tape);
        let x = tape.leaf(NdArray::zeros(vec![1, 3]));
        let h = tape.leaf(NdArray::zeros(vec![1, 4]));
        let h_new = gru_cell(&mut tape, &leaves, &p, x, h);
        // biases are zero-initialized, so the candidate is tanh(0) = 0
        assert!(tape.value(h_new).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gru_gradient_check() {
        let mut rng = seeded_rng(5);
        let (b, i, h) = (2, 3, 4);
        let mut set = ParamSet::new();
        let p = GruParams::create(&mut set, "g", i, h, &mut rng);
        // bundle inputs and all 9 params as finite-difference leaves
        let mut leaves = vec![rand_arr(&mut rng, vec![b, i]), rand_arr(&mut rng, vec![b, h])];
        leaves.extend(set.iter().map(|pt| pt.value.clone()));
        let eval = |ls: &[NdArray]| {
            let mut t = Tape::new();
            let x = t.leaf(ls[0].clone());
            let hp = t.leaf(ls[1].clone());
            let lv: Vec<Var> = ls[2..].iter().map(|a| t.leaf(a.clone())).collect();
            let y = gru_cell(&mut t, &lv, &p, x, hp);
            let out = scalar_head(&mut t, y);
            t.value(out).as_scalar()
        };
        let mut t = Tape::new();
        let x = t.leaf(leaves[0].clone());
        let hp = t.leaf(leaves[1].clone());
        let lv: Vec<Var> = leaves[2..].iter().map(|a| t.leaf(a.clone())).collect();
        let y = gru_cell(&mut t, &lv, &p, x, hp);
        let out = scalar_head(&mut t, y);
        let grads = t.backward(out);
        // leaves were pushed first, so node index k is finite-difference leaf k
        for k in 0..leaves.len() {
            let fd = finite_diff(&eval, &leaves, k, 1e-5);
            assert!(rel_err(&grads[k], &fd) < 1e-6, "leaf {k}: {}", rel_err(&grads[k], &fd));
        }
    }

    #[test]
    fn attention_uniform_on_identical_keys_and_singleton() {
        let mut rng = seeded_rng(9);
        let mut set = ParamSet::new();
        let p = AttentionParams::create(&mut set, "att", 4, 6, 5, &mut rng);
        let mut tape = Tape::new();
        let leaves = set.leaves(&mut tape);
        let q = tape.leaf(rand_arr(&mut rng, vec![1, 4]));
        let key_row: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let keys = tape.leaf(NdArray::from_rows(vec![key_row.clone(); 3]));
        let (ctx, w) = additive_attention(&mut tape, &leaves, &p, q, keys);
        for &wi in tape.value(w).data() {
            assert!((wi - 1.0 / 3.0).abs() < 1e-12);
        }
        for (c, k) in tape.value(ctx).data().iter().zip(&key_row) {
            assert!((c - k).abs() < 1e-12);
        }

        let single = tape.leaf(NdArray::from_rows(vec![key_row.clone()]));
        let (ctx1, w1) = additive_attention(&mut tape, &leaves, &p, q, single);
        assert_eq!(tape.value(w1).data(), &[1.0]);
        for (c, k) in tape.value(ctx1).data().iter().zip(&key_row) {
            assert!((c - k).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_weights_sum_to_one() {
        let mut rng = seeded_rng(10);
        let mut set = ParamSet::new();
        let p = AttentionParams::create(&mut set, "att", 4, 6, 5, &mut rng);
        let mut tape = Tape::new();
        let leaves = set.leaves(&mut tape);
        let q = tape.leaf(rand_arr(&mut rng, vec![1, 4]));
        let keys = tape.leaf(rand_arr(&mut rng, vec![5, 6]));
        let (_, w) = additive_attention(&mut tape, &leaves, &p, q, keys);
        let sum: f64 = tape.value(w).data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn attention_gradient_check() {
        let mut rng = seeded_rng(17);
        let (h, kd, a, l) = (4, 6, 5, 3);
        let mut set = ParamSet::new();
        let p = AttentionParams::create(&mut set, "att", h, kd, a, &mut rng);
        let mut leaves = vec![rand_arr(&mut rng, vec![1, h]), rand_arr(&mut rng, vec![l, kd])];
        leaves.extend(set.iter().map(|pt| pt.value.clone()));
        let eval = |ls: &[NdArray]| {
            let mut t = Tape::new();
            let q = t.leaf(ls[0].clone());
            let keys = t.leaf(ls[1].clone());
            let lv: Vec<Var> = ls[2..].iter().map(|x| t.leaf(x.clone())).collect();
            let (ctx, _) = additive_attention(&mut t, &lv, &p, q, keys);
            let out = scalar_head(&mut t, ctx);
            t.value(out).as_scalar()
        };
        let mut t = Tape::new();
        let q = t.leaf(leaves[0].clone());
        let keys = t.leaf(leaves[1].clone());
        let lv: Vec<Var> = leaves[2..].iter().map(|x| t.leaf(x.clone())).collect();
        let (ctx, _) = additive_attention(&mut t, &lv, &p, q, keys);
        let out = scalar_head(&mut t, ctx);
        let grads = t.backward(out);
        for k in 0..leaves.len() {
            let fd = finite_diff(&eval, &leaves, k, 1e-5);
            assert!(rel_err(&grads[k], &fd) < 1e-6, "leaf {k}");
        }
    }

    #[test]
    fn dropout_rate_zero_and_off_mode_are_identity() {
        let mut rng = seeded_rng(4);
        let x = rand_arr(&mut rng, vec![3, 5]);
        for spec in [
            DropoutSpec { rate: 0.0, mode: DropoutMode::Train, mask_seed: 1 },
            DropoutSpec { rate: 0.2, mode: DropoutMode::InferenceOff, mask_seed: 1 },
        ] {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let y = dropout(&mut tape, &spec, "layer", 0, xv);
            assert_eq!(tape.value(y), &x);
        }
    }

    #[test]
    fn dropout_masks_reproducible_and_distinct_by_call() {
        let spec = DropoutSpec { rate: 0.2, mode: DropoutMode::Train, mask_seed: 99 };
        assert_eq!(spec.mask("enc.0", 3, 64), spec.mask("enc.0", 3, 64));
        assert_ne!(spec.mask("enc.0", 3, 64), spec.mask("enc.0", 4, 64));
        assert_ne!(spec.mask("enc.0", 3, 64), spec.mask("enc.1", 3, 64));
    }

    #[test]
    fn dropout_keep_fraction_and_mean() {
        let spec = DropoutSpec { rate: 0.2, mode: DropoutMode::InferenceOn, mask_seed: 7 };
        let n = 100_000;
        let mask = spec.mask("big", 0, n);
        let kept = mask.iter().filter(|&&m| m > 0.0).count() as f64 / n as f64;
        assert!((kept - 0.8).abs() < 0.01, "keep fraction {kept}");
        // inverted scaling preserves the mean of an all-ones input within 2%
        let mean: f64 = mask.iter().sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn adam_zero_grad_is_noop() {
        let mut rng = seeded_rng(30);
        let mut set = ParamSet::new();
        set.add_matrix("w", 2, 2, &mut rng);
        let before = set.get(ParamId(0)).value.clone();
        let mut state = AdamState::for_params(&set);
        adam_step(&mut set, &mut state, &AdamConfig::default(), None).unwrap();
        assert_eq!(set.get(ParamId(0)).value, before);
        assert!(state.m[0].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adam_first_step_magnitude() {
        let mut set = ParamSet::new();
        set.push("w", NdArray::scalar(3.0));
        set.get_mut(ParamId(0)).grad = NdArray::scalar(1.0);
        let mut state = AdamState::for_params(&set);
        let cfg = AdamConfig { lr: 0.1, ..AdamConfig::default() };
        adam_step(&mut set, &mut state, &cfg, None).unwrap();
        let moved = 3.0 - set.get(ParamId(0)).value.as_scalar();
        assert!((moved - 0.1).abs() < 1e-6, "first Adam step moved {moved}");
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut set = ParamSet::new();
        set.push("w", NdArray::scalar(1.0));
        let mut state = AdamState::for_params(&set);
        let cfg = AdamConfig { lr: 0.05, ..AdamConfig::default() };
        for _ in 0..100 {
            let w = set.get(ParamId(0)).value.as_scalar();
            set.get_mut(ParamId(0)).grad = NdArray::scalar(2.0 * w);
            adam_step(&mut set, &mut state, &cfg, None).unwrap();
        }
        assert!(set.get(ParamId(0)).value.as_scalar().abs() < 0.1);
    }

    #[test]
    fn adam_rejects_non_finite_grad() {
        let mut set = ParamSet::new();
        set.push("w", NdArray::scalar(1.0));
        set.get_mut(ParamId(0)).grad = NdArray::scalar(f64::NAN);
        let mut state = AdamState::for_params(&set);
        let err = adam_step(&mut set, &mut state, &AdamConfig::default(), None).unwrap_err();
        assert!(err.to_string().contains("`w`"));
    }

    #[test]
    fn clip_scales_large_gradients() {
        let mut set = ParamSet::new();
        set.push("w", NdArray::zeros(vec![1, 2]));
        set.get_mut(ParamId(0)).grad = NdArray::new(vec![1, 2], vec![30.0, 40.0]);
        let norm = clip_global_norm(&mut set, 5.0);
        assert_eq!(norm, 50.0);
        let g = set.get(ParamId(0)).grad.clone();
        assert!((g.norm_sq().sqrt() - 5.0).abs() < 1e-12);
    }
}
