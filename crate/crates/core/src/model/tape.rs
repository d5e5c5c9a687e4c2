//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every operation of one forward pass as a node in
//! creation order. [`Tape::backward`] walks the nodes in reverse, pushing
//! adjoints to their inputs. Block operations treat a `(B·W)×d` matrix as
//! `B` stacked sequences of `W` rows and never mix rows across sequences.

use super::tensor::{axpy, dot, Mat};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    /// `a * scale + shift`, elementwise.
    Affine(Var, f64),
    /// Adds a `1×c` row to every row.
    AddRow(Var, Var),
    /// Multiplies every row elementwise by a `1×c` row.
    MulRow(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    /// Row normalization without affine terms; stores `1/σ` per row.
    LayerNorm(Var, Vec<f64>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    /// Per-sequence `Q Kᵀ`.
    BlockScores(Var, Var, usize),
    /// Per-sequence `P V`.
    BlockMix(Var, Var, usize),
    BlockMean(Var, usize),
    /// Mean binary cross-entropy of probabilities against fixed labels.
    Bce(Var, Vec<f64>),
}

struct Node {
    value: Mat,
    op: Op,
}

pub const PROB_EPS: f64 = 1e-12;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape());
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p * q).collect();
        let out = Mat::from_vec(x.rows, x.cols, data);
        self.push(out, Op::Mul(a, b))
    }

    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let x = self.value(a);
        let data = x.data.iter().map(|v| v * scale + shift).collect();
        let out = Mat::from_vec(x.rows, x.cols, data);
        self.push(out, Op::Affine(a, scale))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows, 1);
        let mut out = self.value(a).clone();
        assert_eq!(out.cols, r.cols);
        let r = r.data.clone();
        for i in 0..out.rows {
            axpy(1.0, &r, out.row_mut(i));
        }
        self.push(out, Op::AddRow(a, row))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row).data.clone();
        let mut out = self.value(a).clone();
        assert_eq!(out.cols, r.len());
        for i in 0..out.rows {
            for (d, g) in out.row_mut(i).iter_mut().zip(&r) {
                *d *= g;
            }
        }
        self.push(out, Op::MulRow(a, row))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let data = x.data.iter().map(|v| v.max(0.0)).collect();
        let out = Mat::from_vec(x.rows, x.cols, data);
        self.push(out, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let data = x.data.iter().map(|&z| sigmoid(z)).collect();
        let out = Mat::from_vec(x.rows, x.cols, data);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for i in 0..out.rows {
            let row = out.row_mut(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let mut out = self.value(a).clone();
        let n = out.cols as f64;
        let mut inv = Vec::with_capacity(out.rows);
        for i in 0..out.rows {
            let row = out.row_mut(i);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let r = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * r;
            }
            inv.push(r);
        }
        self.push(out, Op::LayerNorm(a, inv))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.cols);
        let mut out = Mat::zeros(x.rows, len);
        for i in 0..x.rows {
            out.row_mut(i).copy_from_slice(&x.row(i)[start..start + len]);
        }
        self.push(out, Op::SliceCols(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let x = self.value(p);
            assert_eq!(x.rows, rows);
            for i in 0..rows {
                out.row_mut(i)[offset..offset + x.cols].copy_from_slice(x.row(i));
            }
            offset += x.cols;
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn block_scores(&mut self, q: Var, k: Var, block: usize) -> Var {
        let (qm, km) = (self.value(q), self.value(k));
        assert_eq!(qm.shape(), km.shape());
        assert_eq!(qm.rows % block, 0);
        let mut out = Mat::zeros(qm.rows, block);
        for b in 0..qm.rows / block {
            for i in 0..block {
                let qi = qm.row(b * block + i);
                let dst = out.row_mut(b * block + i);
                for (j, d) in dst.iter_mut().enumerate() {
                    *d = dot(qi, km.row(b * block + j));
                }
            }
        }
        self.push(out, Op::BlockScores(q, k, block))
    }

    pub fn block_mix(&mut self, p: Var, v: Var, block: usize) -> Var {
        let (pm, vm) = (self.value(p), self.value(v));
        assert_eq!(pm.rows, vm.rows);
        assert_eq!(pm.cols, block);
        let mut out = Mat::zeros(vm.rows, vm.cols);
        for b in 0..pm.rows / block {
            for i in 0..block {
                let weights = pm.row(b * block + i);
                let dst = &mut out.data[(b * block + i) * vm.cols..(b * block + i + 1) * vm.cols];
                for (j, &w) in weights.iter().enumerate() {
                    axpy(w, vm.row(b * block + j), dst);
                }
            }
        }
        self.push(out, Op::BlockMix(p, v, block))
    }

    pub fn block_mean(&mut self, a: Var, block: usize) -> Var {
        let x = self.value(a);
        assert_eq!(x.rows % block, 0);
        let n = x.rows / block;
        let mut out = Mat::zeros(n, x.cols);
        let scale = 1.0 / block as f64;
        for b in 0..n {
            for i in 0..block {
                axpy(scale, x.row(b * block + i), out.row_mut(b));
            }
        }
        self.push(out, Op::BlockMean(a, block))
    }

    pub fn bce(&mut self, probs: Var, labels: &[f64]) -> Var {
        let p = self.value(probs);
        assert_eq!(p.cols, 1);
        assert_eq!(p.rows, labels.len());
        let loss = bce_mean(&p.data, labels);
        self.push(Mat::scalar(loss), Op::Bce(probs, labels.to_vec()))
    }

    /// Adjoints of every node given a scalar output.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).shape(), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Mat::scalar(1.0));
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let da = g.matmul_t(self.value(*b));
                    let db = self.value(*a).t_matmul(&g);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Mul(a, b) => {
                    let (x, y) = (self.value(*a), self.value(*b));
                    let da = zip_map(&g, y, |gv, yv| gv * yv);
                    let db = zip_map(&g, x, |gv, xv| gv * xv);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Affine(a, scale) => {
                    let s = *scale;
                    let da = Mat::from_vec(g.rows, g.cols, g.data.iter().map(|v| v * s).collect());
                    accumulate(&mut grads, *a, da);
                }
                Op::AddRow(a, row) => {
                    let mut dr = Mat::zeros(1, g.cols);
                    for i in 0..g.rows {
                        axpy(1.0, g.row(i), &mut dr.data);
                    }
                    accumulate(&mut grads, *row, dr);
                    accumulate(&mut grads, *a, g);
                }
                Op::MulRow(a, row) => {
                    let x = self.value(*a);
                    let r = &self.value(*row).data;
                    let mut dr = Mat::zeros(1, g.cols);
                    let mut da = g.clone();
                    for i in 0..g.rows {
                        for (j, (d, &gv)) in da.row_mut(i).iter_mut().zip(g.row(i)).enumerate() {
                            *d = gv * r[j];
                            dr.data[j] += gv * x.get(i, j);
                        }
                    }
                    accumulate(&mut grads, *row, dr);
                    accumulate(&mut grads, *a, da);
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let da = zip_map(&g, x, |gv, xv| if xv > 0.0 { gv } else { 0.0 });
                    accumulate(&mut grads, *a, da);
                }
                Op::Sigmoid(a) => {
                    let da = zip_map(&g, &node.value, |gv, p| gv * p * (1.0 - p));
                    accumulate(&mut grads, *a, da);
                }
                Op::SoftmaxRows(a) => {
                    let p = &node.value;
                    let mut da = Mat::zeros(g.rows, g.cols);
                    for i in 0..g.rows {
                        let s = dot(g.row(i), p.row(i));
                        for ((d, &gv), &pv) in da.row_mut(i).iter_mut().zip(g.row(i)).zip(p.row(i)) {
                            *d = pv * (gv - s);
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::LayerNorm(a, inv) => {
                    let y = &node.value;
                    let n = g.cols as f64;
                    let mut da = Mat::zeros(g.rows, g.cols);
                    for i in 0..g.rows {
                        let gi = g.row(i);
                        let yi = y.row(i);
                        let mean_g = gi.iter().sum::<f64>() / n;
                        let mean_gy = dot(gi, yi) / n;
                        for ((d, &gv), &yv) in da.row_mut(i).iter_mut().zip(gi).zip(yi) {
                            *d = inv[i] * (gv - mean_g - yv * mean_gy);
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::SliceCols(a, start) => {
                    let x = self.value(*a);
                    let mut da = Mat::zeros(x.rows, x.cols);
                    for i in 0..g.rows {
                        da.row_mut(i)[*start..*start + g.cols].copy_from_slice(g.row(i));
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let cols = self.value(p).cols;
                        let mut dp = Mat::zeros(g.rows, cols);
                        for i in 0..g.rows {
                            dp.row_mut(i).copy_from_slice(&g.row(i)[offset..offset + cols]);
                        }
                        offset += cols;
                        accumulate(&mut grads, p, dp);
                    }
                }
                Op::BlockScores(q, k, block) => {
                    let (qm, km) = (self.value(*q), self.value(*k));
                    let mut dq = Mat::zeros(qm.rows, qm.cols);
                    let mut dk = Mat::zeros(km.rows, km.cols);
                    let block = *block;
                    for b in 0..qm.rows / block {
                        for i in 0..block {
                            let r = b * block + i;
                            let gi = g.row(r);
                            for (j, &gv) in gi.iter().enumerate() {
                                if gv == 0.0 {
                                    continue;
                                }
                                let c = b * block + j;
                                axpy(gv, km.row(c), dq.row_mut(r));
                                axpy(gv, qm.row(r), dk.row_mut(c));
                            }
                        }
                    }
                    accumulate(&mut grads, *q, dq);
                    accumulate(&mut grads, *k, dk);
                }
                Op::BlockMix(p, v, block) => {
                    let (pm, vm) = (self.value(*p), self.value(*v));
                    let mut dp = Mat::zeros(pm.rows, pm.cols);
                    let mut dv = Mat::zeros(vm.rows, vm.cols);
                    let block = *block;
                    for b in 0..pm.rows / block {
                        for i in 0..block {
                            let r = b * block + i;
                            let gi = g.row(r);
                            for j in 0..block {
                                let c = b * block + j;
                                dp.data[r * block + j] = dot(gi, vm.row(c));
                                axpy(pm.get(r, j), gi, dv.row_mut(c));
                            }
                        }
                    }
                    accumulate(&mut grads, *p, dp);
                    accumulate(&mut grads, *v, dv);
                }
                Op::BlockMean(a, block) => {
                    let x = self.value(*a);
                    let mut da = Mat::zeros(x.rows, x.cols);
                    let scale = 1.0 / *block as f64;
                    for b in 0..g.rows {
                        for i in 0..*block {
                            axpy(scale, g.row(b), da.row_mut(b * block + i));
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::Bce(probs, labels) => {
                    let p = self.value(*probs);
                    let n = labels.len() as f64;
                    let scale = g.data[0] / n;
                    let data = p
                        .data
                        .iter()
                        .zip(labels)
                        .map(|(&pv, &y)| {
                            if pv <= PROB_EPS || pv >= 1.0 - PROB_EPS {
                                0.0
                            } else {
                                scale * (-(y / pv) + (1.0 - y) / (1.0 - pv))
                            }
                        })
                        .collect();
                    accumulate(&mut grads, *probs, Mat::from_vec(p.rows, 1, data));
                }
            }
        }
        Gradients { grads }
    }
}

pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    /// Adjoint of a leaf, or zeros shaped like `like` when it did not
    /// influence the output.
    pub fn of(&self, v: Var, like: &Mat) -> Mat {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Mat::zeros(like.rows, like.cols))
    }
}

fn accumulate(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn zip_map(a: &Mat, b: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
    let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
    Mat::from_vec(a.rows, a.cols, data)
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean binary cross-entropy with probabilities clamped to
/// `[PROB_EPS, 1 - PROB_EPS]`.
pub fn bce_mean(probs: &[f64], labels: &[f64]) -> f64 {
    let n = labels.len() as f64;
    probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / n
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SimRng;

    fn random(rows: usize, cols: usize, rng: &mut SimRng) -> Mat {
        Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.uniform_range(-1.0, 1.0)).collect())
    }

    /// Central differences of `f` with respect to every entry of `inputs[which]`.
    fn check(inputs: &[Mat], build: impl Fn(&mut Tape, &[Var]) -> Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
        let out = build(&mut tape, &vars);
        let grads = tape.backward(out);
        let h = 1e-5;
        for (which, m) in inputs.iter().enumerate() {
            let analytic = grads.of(vars[which], m);
            for k in 0..m.data.len() {
                let eval = |delta: f64| {
                    let mut t = Tape::new();
                    let vs: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(i, x)| {
                            let mut x = x.clone();
                            if i == which {
                                x.data[k] += delta;
                            }
                            t.leaf(x)
                        })
                        .collect();
                    let o = build(&mut t, &vs);
                    t.value(o).data[0]
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic.data[k];
                let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
                assert!(err < 1e-6 || (a - numeric).abs() < 1e-9, "input {which}[{k}]: {a} vs {numeric}");
            }
        }
    }

    /// Reduces any matrix to a scalar with fixed, non-uniform weights.
    fn weighted_sum(t: &mut Tape, v: Var) -> Var {
        let (r, c) = t.value(v).shape();
        let w = Mat::from_vec(c, 1, (0..c).map(|j| 0.3 + 0.17 * j as f64).collect());
        let w = t.leaf(w);
        let col = t.matmul(v, w);
        let ones = t.leaf(Mat::from_vec(1, r, (0..r).map(|i| 1.0 - 0.05 * i as f64).collect()));
        t.matmul(ones, col)
    }

    #[test]
    fn elementwise_ops_gradients() {
        let mut rng = SimRng::new(1);
        let a = random(4, 3, &mut rng);
        let b = random(4, 3, &mut rng);
        let row = random(1, 3, &mut rng);
        check(&[a, b, row], |t, v| {
            let x = t.mul(v[0], v[1]);
            let x = t.add(x, v[0]);
            let x = t.affine(x, 1.7, 0.3);
            let x = t.mul_row(x, v[2]);
            let x = t.add_row(x, v[2]);
            let x = t.relu(x);
            weighted_sum(t, x)
        });
    }

    #[test]
    fn normalization_ops_gradients() {
        let mut rng = SimRng::new(2);
        let a = random(6, 4, &mut rng);
        check(&[a], |t, v| {
            let s = t.softmax_rows(v[0]);
            let l = t.layer_norm(v[0], 1e-5);
            let x = t.mul(s, l);
            let x = t.slice_cols(x, 1, 2);
            let y = t.slice_cols(v[0], 0, 1);
            let x = t.concat_cols(&[x, y]);
            weighted_sum(t, x)
        });
    }

    #[test]
    fn block_ops_gradients() {
        let mut rng = SimRng::new(3);
        let q = random(6, 2, &mut rng);
        let k = random(6, 2, &mut rng);
        let v = random(6, 2, &mut rng);
        check(&[q, k, v], |t, x| {
            let s = t.block_scores(x[0], x[1], 3);
            let p = t.softmax_rows(s);
            let o = t.block_mix(p, x[2], 3);
            let m = t.block_mean(o, 3);
            weighted_sum(t, m)
        });
    }

    #[test]
    fn bce_gradient_and_values() {
        let mut rng = SimRng::new(4);
        let z = random(5, 1, &mut rng);
        let labels = [1.0, 0.0, 1.0, 1.0, 0.0];
        check(&[z], |t, v| {
            let p = t.sigmoid(v[0]);
            t.bce(p, &labels)
        });
        assert!((bce_mean(&[0.5], &[1.0]) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((bce_mean(&[0.5], &[0.0]) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn bce_clamps_saturated_probabilities() {
        assert!(bce_mean(&[0.0], &[1.0]).is_finite());
        assert!((bce_mean(&[0.0], &[1.0]) + PROB_EPS.ln()).abs() < 1e-12);
        let near = bce_mean(&[1.0 - 1e-12], &[1.0]);
        assert!(near > 0.0 && near < 2e-12, "{near}");
    }
}
