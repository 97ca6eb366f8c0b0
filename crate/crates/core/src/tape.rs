//! Minimal reverse-mode automatic differentiation over [`NdArray`].
//!
//! A [`Tape`] records every operation of a forward pass; [`Tape::backward`]
//! replays it in reverse and accumulates exact gradients into every node.
//! The op set is exactly what the recognizer needs, nothing generic.

use crate::tensor::NdArray;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    /// a[m×k] · b[k×n]
    Matmul(usize, usize),
    /// elementwise, same shape
    Add(usize, usize),
    /// x[m×n] + row[1×n] broadcast over rows
    AddRowBroadcast(usize, usize),
    /// elementwise product, same shape
    Mul(usize, usize),
    /// a·x + b applied elementwise
    AffineScalar(usize, f64),
    Sigmoid(usize),
    Tanh(usize),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    Reshape(usize),
    /// elementwise product with a constant mask (dropout)
    MulMask(usize, Vec<f64>),
    /// -x[r][c] as a 1×1 scalar
    NegPick(usize, usize, usize),
    /// row r of x as a 1×cols row (embedding lookup)
    PickRow(usize, usize),
    /// Σ wᵢ·sᵢ over 1×1 scalars
    WeightedSum(Vec<(usize, f64)>),
    /// scalar loss with a gradient w.r.t. its input precomputed at forward time
    CustomScalar { input: usize, input_grad: NdArray },
}

struct Node {
    op: Op,
    value: NdArray,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    error: Option<String>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// First NaN/Inf produced by any recorded op, if any. Checked once per
    /// forward pass so non-finite values never propagate silently.
    pub fn check_finite(&self) -> Result<(), String> {
        match &self.error {
            Some(e) => Err(e.clone()),
            None => Ok(()),
        }
    }

    pub fn value(&self, v: Var) -> &NdArray {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op: Op, value: NdArray) -> Var {
        if self.error.is_none() && !value.is_finite() {
            self.error = Some(format!("non-finite value at node {} ({})", self.nodes.len(), op_name(&op)));
        }
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: NdArray) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a.0].value.matmul(&self.nodes[b.0].value);
        self.push(Op::Matmul(a.0, b.0), v)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a.0].value.zip(&self.nodes[b.0].value, |x, y| x + y);
        self.push(Op::Add(a.0, b.0), v)
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let rv = &self.nodes[row.0].value;
        assert_eq!(rv.rows(), 1);
        assert_eq!(rv.cols(), xv.cols(), "bias width mismatch");
        let mut out = xv.clone();
        let cols = out.cols();
        for i in 0..out.rows() {
            for j in 0..cols {
                let v = out.at(i, j) + rv.at(0, j);
                out.set(i, j, v);
            }
        }
        self.push(Op::AddRowBroadcast(x.0, row.0), out)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a.0].value.zip(&self.nodes[b.0].value, |x, y| x * y);
        self.push(Op::Mul(a.0, b.0), v)
    }

    pub fn affine_scalar(&mut self, x: Var, a: f64, b: f64) -> Var {
        let v = self.nodes[x.0].value.map(|t| a * t + b);
        self.push(Op::AffineScalar(x.0, a), v)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.map(|t| 1.0 / (1.0 + (-t).exp()));
        self.push(Op::Sigmoid(x.0), v)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.map(f64::tanh);
        self.push(Op::Tanh(x.0), v)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let v = softmax_rows(&self.nodes[x.0].value);
        self.push(Op::SoftmaxRows(x.0), v)
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let mut out = xv.clone();
        let cols = out.cols();
        for i in 0..out.rows() {
            let row = xv.row(i);
            let lse = crate::tensor::log_sum_exp(row);
            for j in 0..cols {
                out.set(i, j, row[j] - lse);
            }
        }
        self.push(Op::LogSoftmaxRows(x.0), out)
    }

    /// Concatenate row vectors (all 1×cᵢ, same row count) along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.nodes[parts[0].0].value.rows();
        let mut data = Vec::new();
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.nodes[p.0].value.row(r));
            }
        }
        let cols = data.len() / rows;
        let v = NdArray::new(vec![rows, cols], data);
        self.push(Op::ConcatCols(parts.iter().map(|p| p.0).collect()), v)
    }

    /// Stack arrays with equal column counts along rows.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.nodes[parts[0].0].value.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let pv = &self.nodes[p.0].value;
            assert_eq!(pv.cols(), cols);
            rows += pv.rows();
            data.extend_from_slice(pv.data());
        }
        let v = NdArray::new(vec![rows, cols], data);
        self.push(Op::ConcatRows(parts.iter().map(|p| p.0).collect()), v)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let xv = &self.nodes[x.0].value;
        assert_eq!(shape.iter().product::<usize>(), xv.len());
        let v = NdArray::new(shape, xv.data().to_vec());
        self.push(Op::Reshape(x.0), v)
    }

    pub fn mul_mask(&mut self, x: Var, mask: Vec<f64>) -> Var {
        let xv = &self.nodes[x.0].value;
        assert_eq!(mask.len(), xv.len());
        let data: Vec<f64> = xv.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let v = NdArray::new(xv.shape().to_vec(), data);
        self.push(Op::MulMask(x.0, mask), v)
    }

    /// Negative log-likelihood pick: -x[r][c] as a scalar node.
    pub fn neg_pick(&mut self, x: Var, r: usize, c: usize) -> Var {
        let v = NdArray::scalar(-self.nodes[x.0].value.at(r, c));
        self.push(Op::NegPick(x.0, r, c), v)
    }

    pub fn pick_row(&mut self, x: Var, r: usize) -> Var {
        let row = self.nodes[x.0].value.row(r).to_vec();
        let v = NdArray::new(vec![1, row.len()], row);
        self.push(Op::PickRow(x.0, r), v)
    }

    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let mut acc = 0.0;
        for (t, w) in terms {
            acc += w * self.nodes[t.0].value.as_scalar();
        }
        let v = NdArray::scalar(acc);
        self.push(Op::WeightedSum(terms.iter().map(|(t, w)| (t.0, *w)).collect()), v)
    }

    /// Scalar node whose backward injects a precomputed gradient into `input`
    /// (used by the CTC dynamic program, which differentiates itself).
    pub fn custom_scalar(&mut self, input: Var, loss: f64, input_grad: NdArray) -> Var {
        assert_eq!(input_grad.shape(), self.nodes[input.0].value.shape());
        self.push(Op::CustomScalar { input: input.0, input_grad }, NdArray::scalar(loss))
    }

    /// Reverse sweep from a scalar node. Returns one gradient per node.
    pub fn backward(&self, from: Var) -> Vec<NdArray> {
        let mut grads: Vec<NdArray> =
            self.nodes.iter().map(|n| NdArray::zeros(n.value.shape().to_vec())).collect();
        grads[from.0] = NdArray::scalar(1.0);
        for i in (0..=from.0).rev() {
            let g = grads[i].clone();
            if g.data().iter().all(|&v| v == 0.0) {
                continue;
            }
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Matmul(a, b) => {
                    let av = &self.nodes[*a].value;
                    let bv = &self.nodes[*b].value;
                    grads[*a].add_assign(&g.matmul(&bv.transpose()));
                    grads[*b].add_assign(&av.transpose().matmul(&g));
                }
                Op::Add(a, b) => {
                    grads[*a].add_assign(&g);
                    grads[*b].add_assign(&g);
                }
                Op::AddRowBroadcast(x, row) => {
                    grads[*x].add_assign(&g);
                    let cols = g.cols();
                    let mut rg = NdArray::zeros(vec![1, cols]);
                    for r in 0..g.rows() {
                        for c in 0..cols {
                            let v = rg.at(0, c) + g.at(r, c);
                            rg.set(0, c, v);
                        }
                    }
                    grads[*row].add_assign(&rg);
                }
                Op::Mul(a, b) => {
                    let ga = g.zip(&self.nodes[*b].value, |x, y| x * y);
                    let gb = g.zip(&self.nodes[*a].value, |x, y| x * y);
                    grads[*a].add_assign(&ga);
                    grads[*b].add_assign(&gb);
                }
                Op::AffineScalar(x, a) => {
                    let mut gx = g.clone();
                    gx.scale(*a);
                    grads[*x].add_assign(&gx);
                }
                Op::Sigmoid(x) => {
                    let y = &self.nodes[i].value;
                    grads[*x].add_assign(&g.zip(y, |gi, yi| gi * yi * (1.0 - yi)));
                }
                Op::Tanh(x) => {
                    let y = &self.nodes[i].value;
                    grads[*x].add_assign(&g.zip(y, |gi, yi| gi * (1.0 - yi * yi)));
                }
                Op::SoftmaxRows(x) => {
                    let y = &self.nodes[i].value;
                    let mut gx = NdArray::zeros(y.shape().to_vec());
                    for r in 0..y.rows() {
                        let dot: f64 =
                            y.row(r).iter().zip(g.row(r)).map(|(&yi, &gi)| yi * gi).sum();
                        for c in 0..y.cols() {
                            gx.set(r, c, y.at(r, c) * (g.at(r, c) - dot));
                        }
                    }
                    grads[*x].add_assign(&gx);
                }
                Op::LogSoftmaxRows(x) => {
                    let y = &self.nodes[i].value;
                    let mut gx = NdArray::zeros(y.shape().to_vec());
                    for r in 0..y.rows() {
                        let gsum: f64 = g.row(r).iter().sum();
                        for c in 0..y.cols() {
                            gx.set(r, c, g.at(r, c) - y.at(r, c).exp() * gsum);
                        }
                    }
                    grads[*x].add_assign(&gx);
                }
                Op::ConcatCols(parts) => {
                    let rows = g.rows();
                    let mut col_off = 0;
                    for p in parts {
                        let pc = self.nodes[*p].value.cols();
                        let mut gp = NdArray::zeros(vec![rows, pc]);
                        for r in 0..rows {
                            for c in 0..pc {
                                gp.set(r, c, g.at(r, col_off + c));
                            }
                        }
                        grads[*p].add_assign(&gp);
                        col_off += pc;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut row_off = 0;
                    for p in parts {
                        let pr = self.nodes[*p].value.rows();
                        let pc = self.nodes[*p].value.cols();
                        let mut gp = NdArray::zeros(vec![pr, pc]);
                        for r in 0..pr {
                            for c in 0..pc {
                                gp.set(r, c, g.at(row_off + r, c));
                            }
                        }
                        grads[*p].add_assign(&gp);
                        row_off += pr;
                    }
                }
                Op::Reshape(x) => {
                    let gx = NdArray::new(self.nodes[*x].value.shape().to_vec(), g.data().to_vec());
                    grads[*x].add_assign(&gx);
                }
                Op::MulMask(x, mask) => {
                    let data: Vec<f64> =
                        g.data().iter().zip(mask).map(|(&gi, &m)| gi * m).collect();
                    grads[*x].add_assign(&NdArray::new(g.shape().to_vec(), data));
                }
                Op::NegPick(x, r, c) => {
                    let gs = g.as_scalar();
                    let mut gx = NdArray::zeros(self.nodes[*x].value.shape().to_vec());
                    gx.set(*r, *c, -gs);
                    grads[*x].add_assign(&gx);
                }
                Op::PickRow(x, r) => {
                    let cols = g.cols();
                    let gx = &mut grads[*x];
                    for c in 0..cols {
                        let v = gx.at(*r, c) + g.at(0, c);
                        gx.set(*r, c, v);
                    }
                }
                Op::WeightedSum(terms) => {
                    let gs = g.as_scalar();
                    for (t, w) in terms {
                        grads[*t].data_mut()[0] += gs * w;
                    }
                }
                Op::CustomScalar { input, input_grad } => {
                    let gs = g.as_scalar();
                    let mut gi = input_grad.clone();
                    gi.scale(gs);
                    grads[*input].add_assign(&gi);
                }
            }
        }
        grads
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Matmul(..) => "matmul",
        Op::Add(..) => "add",
        Op::AddRowBroadcast(..) => "add_row",
        Op::Mul(..) => "mul",
        Op::AffineScalar(..) => "affine_scalar",
        Op::Sigmoid(..) => "sigmoid",
        Op::Tanh(..) => "tanh",
        Op::SoftmaxRows(..) => "softmax",
        Op::LogSoftmaxRows(..) => "log_softmax",
        Op::ConcatCols(..) => "concat_cols",
        Op::ConcatRows(..) => "concat_rows",
        Op::Reshape(..) => "reshape",
        Op::MulMask(..) => "dropout_mask",
        Op::NegPick(..) => "neg_pick",
        Op::PickRow(..) => "pick_row",
        Op::WeightedSum(..) => "weighted_sum",
        Op::CustomScalar { .. } => "custom_scalar",
    }
}

pub fn softmax_rows(x: &NdArray) -> NdArray {
    let mut out = x.clone();
    let cols = out.cols();
    for i in 0..out.rows() {
        let row = x.row(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        let mut tmp = vec![0.0; cols];
        for (j, &v) in row.iter().enumerate() {
            let e = (v - m).exp();
            tmp[j] = e;
            sum += e;
        }
        for (j, e) in tmp.into_iter().enumerate() {
            out.set(i, j, e / sum);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff, rel_err};
    use crate::seeding::rng as seeded_rng;
    use rand::Rng;

    /// Rebuilds the graph from scratch for every perturbed evaluation, so the
    /// finite-difference oracle never shares state with the tape under test.
    fn check_grads(build: &dyn Fn(&mut Tape, &[Var]) -> Var, leaves: &[NdArray], tol: f64) {
        let eval = |ls: &[NdArray]| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = ls.iter().map(|l| tape.leaf(l.clone())).collect();
            let out = build(&mut tape, &vars);
            tape.value(out).as_scalar()
        };
        let mut tape = Tape::new();
        let vars: Vec<Var> = leaves.iter().map(|l| tape.leaf(l.clone())).collect();
        let out = build(&mut tape, &vars);
        tape.check_finite().unwrap();
        let grads = tape.backward(out);
        for (k, v) in vars.iter().enumerate() {
            let fd = finite_diff(&eval, leaves, k, 1e-5);
            let rel = rel_err(&grads[v.0], &fd);
            assert!(rel < tol, "leaf {k}: rel err {rel}");
        }
    }

    fn rand_arr(rng: &mut impl Rng, shape: Vec<usize>) -> NdArray {
        let n = shape.iter().product();
        NdArray::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn matmul_add_grad() {
        let mut rng = seeded_rng(7);
        for _ in 0..5 {
            let leaves =
                vec![rand_arr(&mut rng, vec![3, 4]), rand_arr(&mut rng, vec![4, 2]), rand_arr(&mut rng, vec![1, 2])];
            check_grads(
                &|t, vs| {
                    let (x, w, b) = (vs[0], vs[1], vs[2]);
                    let y = t.matmul(x, w);
                    let y = t.add_row(y, b);
                    let y = t.tanh(y);
                    let flat = t.reshape(y, vec![1, 6]);
                    let sm = t.log_softmax_rows(flat);
                    t.neg_pick(sm, 0, 2)
                },
                &leaves,
                1e-6,
            );
        }
    }

    #[test]
    fn softmax_mul_grad() {
        let mut rng = seeded_rng(11);
        for _ in 0..5 {
            let leaves = vec![rand_arr(&mut rng, vec![2, 5]), rand_arr(&mut rng, vec![2, 5])];
            check_grads(
                &|t, vs| {
                    let (a, b) = (vs[0], vs[1]);
                    let s = t.softmax_rows(a);
                    let m = t.mul(s, b);
                    let sig = t.sigmoid(m);
                    let flat = t.reshape(sig, vec![1, 10]);
                    let ls_ = t.log_softmax_rows(flat);
                    t.neg_pick(ls_, 0, 3)
                },
                &leaves,
                1e-6,
            );
        }
    }

    #[test]
    fn concat_weighted_sum_grad() {
        let mut rng = seeded_rng(13);
        let leaves = vec![rand_arr(&mut rng, vec![1, 3]), rand_arr(&mut rng, vec![1, 2])];
        check_grads(
            &|t, vs| {
                let (a, b) = (vs[0], vs[1]);
                let cat = t.concat_cols(&[a, b]);
                let th = t.tanh(cat);
                let lsm = t.log_softmax_rows(th);
                let p1 = t.neg_pick(lsm, 0, 0);
                let p2 = t.neg_pick(lsm, 0, 4);
                t.weighted_sum(&[(p1, 0.3), (p2, 0.7)])
            },
            &leaves,
            1e-6,
        );
    }

    #[test]
    fn non_finite_is_reported() {
        let mut tape = Tape::new();
        let x = tape.leaf(NdArray::scalar(1e308));
        let y = tape.affine_scalar(x, 1e10, 0.0);
        let _ = y;
        assert!(tape.check_finite().is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = seeded_rng(3);
        let x = rand_arr(&mut rng, vec![4, 7]);
        let s = softmax_rows(&x);
        for r in 0..4 {
            let sum: f64 = s.row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(s.row(r).iter().all(|&v| v >= 0.0));
        }
    }
}
