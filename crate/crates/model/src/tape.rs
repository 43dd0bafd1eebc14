//! Reverse-mode automatic differentiation over 2-D `f64` arrays.
//!
//! A [`Tape`] records every operation in creation order; [`Tape::backward`]
//! walks it in reverse. Only the operations the transformer needs exist.

use ndarray::{s, Array2, Axis};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gather(Var, Vec<usize>),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    CausalSoftmax(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    BlockMean(Var, usize),
    MeanRows(Var, Vec<usize>),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Array2<f64>,
        scale: f64,
    },
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// A constant input; receives no gradient outside the tape.
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A trainable parameter; its gradient is reported under `id`.
    pub fn param(&mut self, id: usize, value: Array2<f64>) -> Var {
        self.push(value, Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    /// Adds the `1 × n` row `r` to every row of `a`.
    pub fn add_row(&mut self, a: Var, r: Var) -> Var {
        assert_eq!(self.value(r).nrows(), 1, "add_row expects a single row");
        let v = self.value(a) + self.value(r);
        self.push(v, Op::AddRow(a, r))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a) * s;
        self.push(v, Op::Scale(a, s))
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut v = Array2::zeros((ids.len(), t.ncols()));
        for (r, &id) in ids.iter().enumerate() {
            v.row_mut(r).assign(&t.row(id));
        }
        self.push(v, Op::Gather(table, ids.to_vec()))
    }

    /// Row-wise layer normalization with `1 × n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let n = xv.ncols() as f64;
        let mut xhat = Array2::zeros(xv.raw_dim());
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for (r, row) in xv.rows().into_iter().enumerate() {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for (c, v) in row.iter().enumerate() {
                xhat[[r, c]] = (v - mean) * is;
            }
        }
        let v = &xhat * self.value(gamma) + self.value(beta);
        self.push(
            v,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self
            .value(a)
            .mapv(|x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()));
        self.push(v, Op::Gelu(a))
    }

    /// Softmax of row `i` over columns `0..=i`; later columns are zero.
    pub fn causal_softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut v = Array2::zeros(x.raw_dim());
        for i in 0..x.nrows() {
            let upto = (i + 1).min(x.ncols());
            let row = x.slice(s![i, ..upto]);
            let max = row.fold(f64::NEG_INFINITY, |m, &e| m.max(e));
            let mut sum = 0.0;
            for j in 0..upto {
                let e = (x[[i, j]] - max).exp();
                v[[i, j]] = e;
                sum += e;
            }
            for j in 0..upto {
                v[[i, j]] /= sum;
            }
        }
        self.push(v, Op::CausalSoftmax(a))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(v, Op::SliceCols(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("equal row counts");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    /// Mean over consecutive blocks of `block` rows: `(R·block) × n → R × n`.
    pub fn block_mean(&mut self, a: Var, block: usize) -> Var {
        let x = self.value(a);
        assert!(block > 0 && x.nrows().is_multiple_of(block), "rows must split into blocks");
        let r = x.nrows() / block;
        let mut v = Array2::zeros((r, x.ncols()));
        for b in 0..r {
            let sum = x.slice(s![b * block..(b + 1) * block, ..]).sum_axis(Axis(0));
            v.row_mut(b).assign(&(sum / block as f64));
        }
        self.push(v, Op::BlockMean(a, block))
    }

    /// Mean of the selected rows, as a `1 × n` row.
    pub fn mean_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        assert!(!rows.is_empty(), "mean of no rows");
        let x = self.value(a);
        let mut v = Array2::zeros((1, x.ncols()));
        for &r in rows {
            v.row_mut(0).scaled_add(1.0, &x.row(r));
        }
        v /= rows.len() as f64;
        self.push(v, Op::MeanRows(a, rows.to_vec()))
    }

    /// `scale · Σ -ln softmax(logits[t])[targets[t]]` over rows with a target,
    /// as a `1 × 1` value.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>], scale: f64) -> Var {
        let x = self.value(logits);
        assert_eq!(x.nrows(), targets.len(), "one target slot per row");
        let mut probs = Array2::zeros(x.raw_dim());
        let mut loss = 0.0;
        for (i, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            let row = x.row(i);
            let max = row.fold(f64::NEG_INFINITY, |m, &e| m.max(e));
            let lse = max + row.iter().map(|e| (e - max).exp()).sum::<f64>().ln();
            for j in 0..x.ncols() {
                probs[[i, j]] = (x[[i, j]] - lse).exp();
            }
            loss += lse - x[[i, t]];
        }
        let v = Array2::from_elem((1, 1), loss * scale);
        self.push(
            v,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                scale,
            },
        )
    }

    /// Back-propagates from the scalar `root` and returns
    /// `(param id, gradient)` pairs in tape order. A parameter placed on the
    /// tape several times appears several times.
    pub fn backward(&self, root: Var) -> Vec<(usize, Array2<f64>)> {
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Array2::ones(self.nodes[root.0].value.raw_dim()));
        let mut out = Vec::new();
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let mut acc = |v: Var, d: Array2<f64>| match &mut grads[v.0] {
                Some(existing) => *existing += &d,
                slot @ None => *slot = Some(d),
            };
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => out.push((*id, g)),
                Op::MatMul(a, b) => {
                    acc(*a, g.dot(&self.value(*b).t()));
                    acc(*b, self.value(*a).t().dot(&g));
                }
                Op::MatMulT(a, b) => {
                    acc(*a, g.dot(self.value(*b)));
                    acc(*b, g.t().dot(self.value(*a)));
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::AddRow(a, r) => {
                    acc(*r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(*a, g);
                }
                Op::Scale(a, s) => acc(*a, g * *s),
                Op::Gather(table, ids) => {
                    let mut d = Array2::zeros(self.value(*table).raw_dim());
                    for (r, &id) in ids.iter().enumerate() {
                        d.row_mut(id).scaled_add(1.0, &g.row(r));
                    }
                    acc(*table, d);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    acc(*beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(*gamma, (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                    let gxhat = &g * self.value(*gamma);
                    let n = xhat.ncols() as f64;
                    let mut dx = Array2::zeros(xhat.raw_dim());
                    for r in 0..xhat.nrows() {
                        let gr = gxhat.row(r);
                        let xr = xhat.row(r);
                        let mean_g = gr.sum() / n;
                        let mean_gx = gr.dot(&xr) / n;
                        for c in 0..xhat.ncols() {
                            dx[[r, c]] = inv_std[r] * (gr[c] - mean_g - xr[c] * mean_gx);
                        }
                    }
                    acc(*x, dx);
                }
                Op::Gelu(a) => {
                    let d = ndarray::Zip::from(&g).and(self.value(*a)).map_collect(|&g, &x| {
                        let u = GELU_C * (x + 0.044715 * x * x * x);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                        g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                    });
                    acc(*a, d);
                }
                Op::CausalSoftmax(a) => {
                    let y = &node.value;
                    let dot = (&g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(*a, y * &(&g - &dot));
                }
                Op::SliceCols(a, start) => {
                    let mut d = Array2::zeros(self.value(*a).raw_dim());
                    d.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(*a, d);
                }
                Op::ConcatCols(parts) => {
                    let mut col = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        acc(*p, g.slice(s![.., col..col + w]).to_owned());
                        col += w;
                    }
                }
                Op::BlockMean(a, block) => {
                    let mut d = Array2::zeros(self.value(*a).raw_dim());
                    for r in 0..d.nrows() {
                        d.row_mut(r).assign(&(&g.row(r / block) / *block as f64));
                    }
                    acc(*a, d);
                }
                Op::MeanRows(a, rows) => {
                    let mut d = Array2::zeros(self.value(*a).raw_dim());
                    let share = &g.row(0) / rows.len() as f64;
                    for &r in rows {
                        d.row_mut(r).scaled_add(1.0, &share);
                    }
                    acc(*a, d);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                    scale,
                } => {
                    let k = g[[0, 0]] * scale;
                    let mut d = probs * k;
                    for (i, t) in targets.iter().enumerate() {
                        if let Some(t) = t {
                            d[[i, *t]] -= k;
                        }
                    }
                    acc(*logits, d);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Central-difference check of d(build)/d(param 0) against the tape.
    fn check(p0: Array2<f64>, build: impl Fn(&mut Tape, Var) -> Var) {
        let mut tape = Tape::new();
        let p = tape.param(0, p0.clone());
        let out = build(&mut tape, p);
        let mut analytic = Array2::zeros(p0.raw_dim());
        for (_, g) in tape.backward(out) {
            analytic += &g;
        }
        let eval = |p: Array2<f64>| {
            let mut t = Tape::new();
            let v = t.param(0, p);
            let o = build(&mut t, v);
            t.value(o)[[0, 0]]
        };
        let h = 1e-6;
        for idx in ndarray::indices(p0.raw_dim()) {
            let mut plus = p0.clone();
            plus[idx] += h;
            let mut minus = p0.clone();
            minus[idx] -= h;
            let numeric = (eval(plus) - eval(minus)) / (2.0 * h);
            let a = analytic[idx];
            assert!(
                (a - numeric).abs() <= 1e-6 * (1.0 + numeric.abs()),
                "at {idx:?}: analytic {a} vs numeric {numeric}"
            );
        }
    }

    /// Reduces any node to a scalar through a fixed random weighting so every
    /// output element influences the check.
    fn reduce(t: &mut Tape, x: Var, seed: u64) -> Var {
        let (r, c) = t.value(x).dim();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = t.leaf(random(&mut rng, c, 1));
        let col = t.matmul(x, w);
        let ones = t.leaf(Array2::ones((1, r)));
        t.matmul(ones, col)
    }

    #[test]
    fn gradients_of_each_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = random(&mut rng, 4, 3);
        let c = random(&mut rng, 5, 4);
        let row = random(&mut rng, 1, 4);
        let gamma = random(&mut rng, 1, 4);
        let beta = random(&mut rng, 1, 4);
        let p = random(&mut rng, 5, 4);

        check(p.clone(), |t, p| {
            let b = t.leaf(b.clone());
            let y = t.matmul(p, b);
            reduce(t, y, 1)
        });
        check(p.clone(), |t, p| {
            let c = t.leaf(c.clone());
            let y = t.matmul_t(p, c);
            reduce(t, y, 2)
        });
        check(p.clone(), |t, p| {
            let y = t.matmul_t(p, p);
            reduce(t, y, 3)
        });
        check(row.clone(), |t, r| {
            let a = t.leaf(p.clone());
            let y = t.add_row(a, r);
            let y = t.gelu(y);
            reduce(t, y, 4)
        });
        check(p.clone(), |t, p| {
            let g = t.leaf(gamma.clone());
            let bt = t.leaf(beta.clone());
            let y = t.layer_norm(p, g, bt);
            reduce(t, y, 5)
        });
        check(gamma.clone(), |t, g| {
            let x = t.leaf(p.clone());
            let bt = t.leaf(beta.clone());
            let y = t.layer_norm(x, g, bt);
            reduce(t, y, 6)
        });
        check(p.clone(), |t, p| {
            let s = t.matmul_t(p, p);
            let s = t.scale(s, 0.7);
            let y = t.causal_softmax(s);
            reduce(t, y, 7)
        });
        check(p.clone(), |t, p| {
            let a = t.slice_cols(p, 1, 2);
            let b = t.slice_cols(p, 0, 3);
            let y = t.concat_cols(&[b, a]);
            let y = t.add(y, y);
            reduce(t, y, 8)
        });
        check(p.clone(), |t, p| {
            let y = t.gather(p, &[4, 0, 4, 2]);
            let y = t.block_mean(y, 2);
            let y = t.mean_rows(y, &[0, 1, 1]);
            reduce(t, y, 9)
        });
        check(p, |t, p| t.cross_entropy(p, &[Some(1), None, Some(3), Some(0), Some(1)], 0.25));
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut t = Tape::new();
        let x = t.leaf(array![[1.0, 5.0, 9.0], [0.0, 0.0, 7.0], [1.0, 2.0, 3.0]]);
        let y = t.causal_softmax(x);
        let v = t.value(y);
        assert_eq!(v.row(0).to_vec(), vec![1.0, 0.0, 0.0]);
        assert_eq!(v.row(1).to_vec(), vec![0.5, 0.5, 0.0]);
        assert!((v.row(2).sum() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn block_mean_hand_values() {
        let mut t = Tape::new();
        let x = t.leaf(array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0], [7.0, 8.0]]);
        let y = t.block_mean(x, 2);
        assert_eq!(t.value(y), &array![[2.0, 3.0], [6.0, 7.0]]);
    }

    #[test]
    fn cross_entropy_ignores_masked_rows() {
        let mut t = Tape::new();
        let x = t.leaf(array![[0.0, 0.0], [100.0, -100.0]]);
        let l = t.cross_entropy(x, &[Some(0), None], 1.0);
        assert!((t.value(l)[[0, 0]] - 2f64.ln()).abs() < 1e-15);
    }
}
