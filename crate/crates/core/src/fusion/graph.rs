//! Minimal reverse-mode autodiff over [`Tensor`]s.
//!
//! A [`Graph`] records every op of one forward pass. Parameters are borrowed
//! from the caller and never copied; [`Graph::backward`] returns one gradient
//! tensor per parameter.

// Kernels index several parallel buffers by the same loop variable.
#![allow(clippy::needless_range_loop)]

use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Debug)]
enum Op {
    Param(usize),
    Const,
    MatMul(Var, Var),
    /// a · bᵀ
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Tensor),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    Gather {
        table: Var,
        ids: Vec<u32>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    Interleave(Var, Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<u32>,
        probs: Tensor,
        divisor: f64,
    },
}

struct Node {
    value: Option<Tensor>,
    op: Op,
}

pub struct Graph<'p> {
    params: &'p [Tensor],
    nodes: Vec<Node>,
    param_nodes: Vec<Option<Var>>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p [Tensor]) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(256),
            param_nodes: vec![None; params.len()],
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value: Some(value), op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(i)) => &self.params[*i],
            _ => unreachable!("node without value"),
        }
    }

    pub fn into_value(mut self, v: Var) -> Tensor {
        match self.nodes[v.0].value.take() {
            Some(t) => t,
            None => self.value(v).clone(),
        }
    }

    pub fn param(&mut self, index: usize) -> Var {
        if let Some(v) = self.param_nodes[index] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(index),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes[index] = Some(v);
        v
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Const)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_bt(self.value(b));
        self.push(v, Op::MatMulBt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    /// Adds a `1 × cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let b = self.value(bias);
        assert_eq!(b.rows, 1, "bias must be a row");
        let mut v = self.value(a).clone();
        assert_eq!(v.cols, b.cols, "bias width");
        for r in 0..v.rows {
            for (x, y) in v.row_mut(r).iter_mut().zip(&b.data) {
                *x += y;
            }
        }
        self.push(v, Op::AddRow(a, bias))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s))
    }

    /// Elementwise product with a constant (dropout masks).
    pub fn mul_const(&mut self, a: Var, mask: Tensor) -> Var {
        let x = self.value(a);
        assert_eq!(x.shape(), mask.shape());
        let data = x.data.iter().zip(&mask.data).map(|(a, b)| a * b).collect();
        let v = Tensor::from_vec(x.rows, x.cols, data);
        self.push(v, Op::MulConst(a, mask))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let data = x
            .data
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()))
            .collect();
        let v = Tensor::from_vec(x.rows, x.cols, data);
        self.push(v, Op::Gelu(a))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut xhat = Tensor::zeros(rows, cols);
        let mut out = Tensor::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd.push(rs);
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat.data[r * cols + c] = h;
                out.data[r * cols + c] = h * g.data[c] + b.data[c];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    /// Row-wise softmax. With `causal`, column `j` of row `i` is masked when
    /// `j > i + (cols - rows)`.
    pub fn softmax(&mut self, x: Var, causal: bool) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let offset = cols as isize - rows as isize;
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let limit = if causal {
                ((r as isize + offset + 1).clamp(0, cols as isize)) as usize
            } else {
                cols
            };
            let row = &xv.row(r)[..limit];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            let o = out.row_mut(r);
            for (c, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                o[c] = e;
                sum += e;
            }
            for v in &mut o[..limit] {
                *v /= sum;
            }
        }
        self.push(out, Op::Softmax(x))
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[u32]) -> Var {
        let t = self.value(table);
        let mut out = Tensor::zeros(ids.len(), t.cols);
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(t.row(id as usize));
        }
        self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_rows(&tensors);
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut at = 0;
            for &p in parts {
                let t = self.value(p);
                assert_eq!(t.rows, rows);
                out.data[r * cols + at..r * cols + at + t.cols].copy_from_slice(t.row(r));
                at += t.cols;
            }
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let t = self.value(x);
        let mut out = Tensor::zeros(t.rows, len);
        for r in 0..t.rows {
            out.row_mut(r).copy_from_slice(&t.row(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols { x, start })
    }

    /// Rows `a0, b0, a1, b1, ...`; `a` and `b` must have equal shapes.
    pub fn interleave(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "interleave shapes");
        let mut out = Tensor::zeros(av.rows * 2, av.cols);
        for r in 0..av.rows {
            out.row_mut(2 * r).copy_from_slice(av.row(r));
            out.row_mut(2 * r + 1).copy_from_slice(bv.row(r));
        }
        self.push(out, Op::Interleave(a, b))
    }

    /// Cross-entropy of each row against its target id, summed and divided
    /// by `divisor` (row count for mean reduction, 1 for sum). Returns `1×1`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32], divisor: f64) -> Var {
        let l = self.value(logits);
        assert_eq!(l.rows, targets.len(), "one target per row");
        let mut probs = Tensor::zeros(l.rows, l.cols);
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = l.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            total += lse - row[t as usize];
            for (p, v) in probs.row_mut(r).iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
        }
        let v = Tensor::from_vec(1, 1, vec![total / divisor]);
        self.push(
            v,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                divisor,
            },
        )
    }

    /// Backpropagates from the scalar `loss`; returns one gradient per
    /// parameter (zeros for parameters the graph never touched).
    pub fn backward(&self, loss: Var) -> Vec<Tensor> {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_vec(1, 1, vec![1.0]));
        let mut param_grads: Vec<Tensor> = self
            .params
            .iter()
            .map(|p| Tensor::zeros(p.rows, p.cols))
            .collect();

        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Param(p) => param_grads[*p].add_assign(&g),
                Op::Const => {}
                Op::MatMul(a, b) => {
                    let ga = g.matmul_bt(self.value(*b));
                    let gb = self.value(*a).matmul_at(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulBt(a, b) => {
                    let ga = g.matmul(self.value(*b));
                    let gb = g.matmul_at(self.value(*a));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::AddRow(a, bias) => {
                    let mut gb = Tensor::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (s, v) in gb.data.iter_mut().zip(g.row(r)) {
                            *s += v;
                        }
                    }
                    acc(&mut grads, *bias, gb);
                    acc(&mut grads, *a, g);
                }
                Op::Scale(a, s) => acc(&mut grads, *a, g.scale(*s)),
                Op::MulConst(a, mask) => {
                    let data = g.data.iter().zip(&mask.data).map(|(x, m)| x * m).collect();
                    acc(&mut grads, *a, Tensor::from_vec(g.rows, g.cols, data));
                }
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let data = g
                        .data
                        .iter()
                        .zip(&x.data)
                        .map(|(gv, &x)| {
                            let u = GELU_C * (x + 0.044715 * x * x * x);
                            let t = u.tanh();
                            let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                            gv * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                        })
                        .collect();
                    acc(&mut grads, *a, Tensor::from_vec(g.rows, g.cols, data));
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let gam = self.value(*gamma);
                    let (rows, cols) = g.shape();
                    let mut gx = Tensor::zeros(rows, cols);
                    let mut gg = Tensor::zeros(1, cols);
                    let mut gbeta = Tensor::zeros(1, cols);
                    let nf = cols as f64;
                    for r in 0..rows {
                        let gr = g.row(r);
                        let hr = xhat.row(r);
                        let mut sum_d = 0.0;
                        let mut sum_dh = 0.0;
                        for c in 0..cols {
                            let d = gr[c] * gam.data[c];
                            sum_d += d;
                            sum_dh += d * hr[c];
                            gg.data[c] += gr[c] * hr[c];
                            gbeta.data[c] += gr[c];
                        }
                        let out = gx.row_mut(r);
                        for c in 0..cols {
                            let d = gr[c] * gam.data[c];
                            out[c] = rstd[r] / nf * (nf * d - sum_d - hr[c] * sum_dh);
                        }
                    }
                    acc(&mut grads, *x, gx);
                    acc(&mut grads, *gamma, gg);
                    acc(&mut grads, *beta, gbeta);
                }
                Op::Softmax(x) => {
                    let p = self.nodes[i].value.as_ref().expect("softmax value");
                    let mut gx = Tensor::zeros(p.rows, p.cols);
                    for r in 0..p.rows {
                        let pr = p.row(r);
                        let gr = g.row(r);
                        let dot: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (o, (pv, gv)) in gx.row_mut(r).iter_mut().zip(pr.iter().zip(gr)) {
                            *o = pv * (gv - dot);
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Gather { table, ids } => {
                    let t = self.value(*table);
                    let mut gt = Tensor::zeros(t.rows, t.cols);
                    for (r, &id) in ids.iter().enumerate() {
                        for (o, v) in gt.row_mut(id as usize).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    acc(&mut grads, *table, gt);
                }
                Op::ConcatRows(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let (rows, cols) = self.value(p).shape();
                        let slice = g.data[at * cols..(at + rows) * cols].to_vec();
                        acc(&mut grads, p, Tensor::from_vec(rows, cols, slice));
                        at += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let (rows, cols) = self.value(p).shape();
                        let mut gp = Tensor::zeros(rows, cols);
                        for r in 0..rows {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[at..at + cols]);
                        }
                        acc(&mut grads, p, gp);
                        at += cols;
                    }
                }
                Op::SliceCols { x, start } => {
                    let (rows, cols) = self.value(*x).shape();
                    let mut gx = Tensor::zeros(rows, cols);
                    for r in 0..rows {
                        gx.row_mut(r)[*start..*start + g.cols].copy_from_slice(g.row(r));
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Interleave(a, b) => {
                    let (rows, cols) = self.value(*a).shape();
                    let mut ga = Tensor::zeros(rows, cols);
                    let mut gb = Tensor::zeros(rows, cols);
                    for r in 0..rows {
                        ga.row_mut(r).copy_from_slice(g.row(2 * r));
                        gb.row_mut(r).copy_from_slice(g.row(2 * r + 1));
                    }
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                    divisor,
                } => {
                    let scale = g.data[0] / divisor;
                    let mut gl = probs.scale(scale);
                    for (r, &t) in targets.iter().enumerate() {
                        gl.data[r * gl.cols + t as usize] -= scale;
                    }
                    acc(&mut grads, *logits, gl);
                }
            }
        }
        param_grads
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central differences of a scalar function of the params.
    fn check<F>(params: &mut [Tensor], f: F)
    where
        F: Fn(&mut Graph) -> Var,
    {
        let analytic = {
            let mut g = Graph::new(params);
            let loss = f(&mut g);
            g.backward(loss)
        };
        let eps = 1e-5;
        for p in 0..params.len() {
            for i in 0..params[p].len() {
                let orig = params[p].data[i];
                params[p].data[i] = orig + eps;
                let plus = {
                    let mut g = Graph::new(params);
                    let l = f(&mut g);
                    g.value(l).data[0]
                };
                params[p].data[i] = orig - eps;
                let minus = {
                    let mut g = Graph::new(params);
                    let l = f(&mut g);
                    g.value(l).data[0]
                };
                params[p].data[i] = orig;
                let numeric = (plus - minus) / (2.0 * eps);
                let a = analytic[p].data[i];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(err < 1e-6, "param {p}[{i}]: analytic {a} numeric {numeric}");
            }
        }
    }

    fn params() -> Vec<Tensor> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        vec![
            Tensor::randn(3, 4, 1.0, &mut rng),
            Tensor::randn(4, 4, 1.0, &mut rng),
            Tensor::randn(1, 4, 1.0, &mut rng),
            Tensor::randn(1, 4, 1.0, &mut rng),
            Tensor::randn(6, 4, 1.0, &mut rng),
        ]
    }
    use rand::SeedableRng;

    #[test]
    fn ops_gradcheck() {
        let mut p = params();
        check(&mut p, |g| {
            let x = g.param(0);
            let w = g.param(1);
            let h = g.matmul(x, w);
            let b = g.param(2);
            let h = g.add_row(h, b);
            let h = g.gelu(h);
            let (ga, be) = (g.param(2), g.param(3));
            let h = g.layer_norm(h, ga, be);
            let s = g.matmul_bt(h, x);
            let s = g.scale(s, 0.7);
            let a = g.softmax(s, true);
            let o = g.matmul(a, x);
            let left = g.slice_cols(o, 0, 2);
            let right = g.slice_cols(o, 2, 2);
            let o = g.concat_cols(&[right, left]);
            let o = g.interleave(o, o);
            let table = g.param(4);
            let e = g.gather(table, &[1, 5, 1]);
            let o = g.concat_rows(&[o, e]);
            let o = g.add(o, o);
            let mask = Tensor::from_vec(9, 4, (0..36).map(|i| (i % 3) as f64 * 0.5).collect());
            let o = g.mul_const(o, mask);
            let logits = g.matmul_bt(o, table);
            g.cross_entropy(logits, &[0, 1, 2, 3, 4, 5, 0, 1, 2], 9.0)
        });
    }

    #[test]
    fn causal_softmax_masks_future() {
        let p: Vec<Tensor> = vec![];
        let mut g = Graph::new(&p);
        let x = g.constant(Tensor::from_vec(2, 3, vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0]));
        let s = g.softmax(x, true);
        let v = g.value(s);
        // offset 1: row 0 sees cols 0..=1, row 1 sees all
        assert_eq!(v.get(0, 2), 0.0);
        assert!((v.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(v.get(1, 2) > 0.0);
    }
}
