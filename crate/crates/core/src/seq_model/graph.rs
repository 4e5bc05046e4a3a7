//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Values are computed eagerly as nodes are added. Parameter nodes borrow
//! the model's tensors instead of copying them. [`Graph::backward`] returns
//! one gradient tensor per parameter.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::{dot, Tensor};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Input,
    Param(usize),
    MatMul(NodeId, NodeId),
    MatMulT(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Gelu(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Tensor,
        rstd: Vec<f64>,
    },
    Softmax(NodeId),
    SliceCols {
        x: NodeId,
        start: usize,
    },
    ConcatCols(Vec<NodeId>),
    Embed {
        table: NodeId,
        ids: Vec<usize>,
    },
    /// Elementwise product with a constant, used for dropout.
    Mask {
        x: NodeId,
        mask: Tensor,
    },
    MeanRows(NodeId),
    Cosine {
        a: NodeId,
        b: NodeId,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

pub struct Graph<'p> {
    params: &'p [Tensor],
    nodes: Vec<Node>,
    dropout: Option<(f64, ChaCha8Rng)>,
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p [Tensor]) -> Self {
        Graph { params, nodes: Vec::with_capacity(256), dropout: None }
    }

    /// Turns on inverted dropout with drop probability `rate` for every
    /// later [`Graph::dropout`] call.
    pub fn with_dropout(mut self, rate: f64, seed: u64) -> Self {
        assert!((0.0..1.0).contains(&rate), "dropout rate must be in [0, 1)");
        if rate > 0.0 {
            self.dropout = Some((rate, ChaCha8Rng::seed_from_u64(seed)));
        }
        self
    }

    /// Identity unless dropout is on.
    pub fn dropout(&mut self, x: NodeId) -> NodeId {
        let (rows, cols) = self.value(x).shape();
        let Some((rate, rng)) = &mut self.dropout else { return x };
        let keep = 1.0 / (1.0 - *rate);
        let mask_data: Vec<f64> = (0..rows * cols).map(|_| if rng.gen_bool(*rate) { 0.0 } else { keep }).collect();
        let mask = Tensor::from_vec(rows, cols, mask_data);
        let mut v = self.value(x).clone();
        v.data.iter_mut().zip(&mask.data).for_each(|(a, m)| *a *= m);
        self.push(v, Op::Mask { x, mask })
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        match self.nodes[id.0].op {
            Op::Param(p) => &self.params[p],
            _ => &self.nodes[id.0].value,
        }
    }

    /// Number of nodes; pass to [`Graph::truncate`] to drop everything added later.
    pub fn mark(&self) -> usize {
        self.nodes.len()
    }

    pub fn truncate(&mut self, mark: usize) {
        self.nodes.truncate(mark);
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, index: usize) -> NodeId {
        self.push(Tensor::zeros(0, 0), Op::Param(index))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a @ b^T`
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul_t(self.value(b));
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let r = self.value(row);
        assert_eq!(r.rows, 1);
        let mut v = self.value(a).clone();
        for i in 0..v.rows {
            for (x, b) in v.row_mut(i).iter_mut().zip(&r.data) {
                *x += b;
            }
        }
        self.push(v, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let mut v = self.value(a).clone();
        v.data.iter_mut().for_each(|x| *x *= s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        v.data.iter_mut().for_each(|x| *x = gelu(*x));
        self.push(v, Op::Gelu(a))
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let xv = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let (rows, cols) = xv.shape();
        let mut xhat = Tensor::zeros(rows, cols);
        let mut out = Tensor::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let s = 1.0 / (var + LN_EPS).sqrt();
            rstd.push(s);
            for c in 0..cols {
                let h = (row[c] - mean) * s;
                xhat.data[r * cols + c] = h;
                out.data[r * cols + c] = h * g.data[c] + b.data[c];
            }
        }
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd })
    }

    /// Row-wise softmax. With `causal`, entry (i, j) is masked for j > i.
    pub fn softmax(&mut self, a: NodeId, causal: bool) -> NodeId {
        let mut v = self.value(a).clone();
        for r in 0..v.rows {
            let row = v.row_mut(r);
            let limit = if causal { (r + 1).min(row.len()) } else { row.len() };
            let max = row[..limit].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in row[..limit].iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            for x in row[..limit].iter_mut() {
                *x /= sum;
            }
            for x in row[limit..].iter_mut() {
                *x = 0.0;
            }
        }
        self.push(v, Op::Softmax(a))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let av = self.value(a);
        let mut v = Tensor::zeros(av.rows, len);
        for r in 0..av.rows {
            v.row_mut(r).copy_from_slice(&av.row(r)[start..start + len]);
        }
        self.push(v, Op::SliceCols { x: a, start })
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut v = Tensor::zeros(rows, cols);
        let mut off = 0;
        for p in parts {
            let pv = self.value(*p);
            assert_eq!(pv.rows, rows);
            for r in 0..rows {
                v.row_mut(r)[off..off + pv.cols].copy_from_slice(pv.row(r));
            }
            off += pv.cols;
        }
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    /// Gathers rows `ids` of `table`.
    pub fn embed(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let t = self.value(table);
        let mut v = Tensor::zeros(ids.len(), t.cols);
        for (r, &id) in ids.iter().enumerate() {
            v.row_mut(r).copy_from_slice(t.row(id));
        }
        self.push(v, Op::Embed { table, ids: ids.to_vec() })
    }

    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let v = Tensor::from_vec(1, av.cols, av.mean_rows());
        self.push(v, Op::MeanRows(a))
    }

    /// Cosine similarity of two `1 x d` rows, as a `1 x 1` node.
    pub fn cosine(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        let (na, nb) = (dot(&av.data, &av.data).sqrt(), dot(&bv.data, &bv.data).sqrt());
        let c = if na * nb < 1e-12 { 0.0 } else { dot(&av.data, &bv.data) / (na * nb) };
        self.push(Tensor::scalar(c), Op::Cosine { a, b })
    }

    /// Sum over rows of `-log softmax(logits_i)[targets_i]`, as a `1 x 1` node.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> NodeId {
        let lv = self.value(logits);
        assert_eq!(lv.rows, targets.len());
        let mut probs = Tensor::zeros(lv.rows, lv.cols);
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = lv.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            loss += lse - row[t];
            for (p, v) in probs.row_mut(r).iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
        }
        self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, targets: targets.to_vec(), probs })
    }

    /// Gradients of the scalar node `loss` with respect to every parameter.
    pub fn backward(&self, loss: NodeId) -> Vec<Tensor> {
        let mut param_grads: Vec<Tensor> = self.params.iter().map(|p| Tensor::zeros(p.rows, p.cols)).collect();
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        fn acc(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
            match &mut grads[id.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param(p) => param_grads[*p].add_assign(&gout),
                Op::MatMul(a, b) => {
                    let ga = gout.matmul_t(self.value(*b));
                    let gb = self.value(*a).t_matmul(&gout);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    let ga = gout.matmul(self.value(*b));
                    let gb = gout.t_matmul(self.value(*a));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, gout.clone());
                    acc(&mut grads, *b, gout);
                }
                Op::AddRow(a, row) => {
                    let mut gr = Tensor::zeros(1, gout.cols);
                    for r in 0..gout.rows {
                        for (s, v) in gr.data.iter_mut().zip(gout.row(r)) {
                            *s += v;
                        }
                    }
                    acc(&mut grads, *row, gr);
                    acc(&mut grads, *a, gout);
                }
                Op::Scale(a, s) => {
                    let mut g = gout;
                    g.data.iter_mut().for_each(|x| *x *= s);
                    acc(&mut grads, *a, g);
                }
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let mut g = gout;
                    for (gv, xv) in g.data.iter_mut().zip(&x.data) {
                        *gv *= gelu_grad(*xv);
                    }
                    acc(&mut grads, *a, g);
                }
                Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                    let g = self.value(*gamma);
                    let (rows, cols) = gout.shape();
                    let mut gx = Tensor::zeros(rows, cols);
                    let mut gg = Tensor::zeros(1, cols);
                    let mut gb = Tensor::zeros(1, cols);
                    for r in 0..rows {
                        let go = gout.row(r);
                        let xh = xhat.row(r);
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for c in 0..cols {
                            let d = go[c] * g.data[c];
                            mean_d += d;
                            mean_dx += d * xh[c];
                            gg.data[c] += go[c] * xh[c];
                            gb.data[c] += go[c];
                        }
                        mean_d /= cols as f64;
                        mean_dx /= cols as f64;
                        let out = gx.row_mut(r);
                        for c in 0..cols {
                            let d = go[c] * g.data[c];
                            out[c] = rstd[r] * (d - mean_d - xh[c] * mean_dx);
                        }
                    }
                    acc(&mut grads, *x, gx);
                    acc(&mut grads, *gamma, gg);
                    acc(&mut grads, *beta, gb);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let mut g = gout;
                    for r in 0..y.rows {
                        let yr = y.row(r);
                        let s = dot(g.row(r), yr);
                        for (gv, yv) in g.row_mut(r).iter_mut().zip(yr) {
                            *gv = yv * (*gv - s);
                        }
                    }
                    acc(&mut grads, *a, g);
                }
                Op::SliceCols { x, start } => {
                    let xv = self.value(*x);
                    let mut g = Tensor::zeros(xv.rows, xv.cols);
                    for r in 0..gout.rows {
                        g.row_mut(r)[*start..*start + gout.cols].copy_from_slice(gout.row(r));
                    }
                    acc(&mut grads, *x, g);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let cols = self.value(*p).cols;
                        let mut g = Tensor::zeros(gout.rows, cols);
                        for r in 0..gout.rows {
                            g.row_mut(r).copy_from_slice(&gout.row(r)[off..off + cols]);
                        }
                        off += cols;
                        acc(&mut grads, *p, g);
                    }
                }
                Op::Embed { table, ids } => {
                    // scatter straight into a parameter table instead of
                    // materializing a dense gradient for it
                    let scatter = |g: &mut Tensor| {
                        for (r, &id) in ids.iter().enumerate() {
                            for (s, v) in g.row_mut(id).iter_mut().zip(gout.row(r)) {
                                *s += v;
                            }
                        }
                    };
                    if let Op::Param(p) = self.nodes[table.0].op {
                        scatter(&mut param_grads[p]);
                    } else {
                        let t = self.value(*table);
                        let mut g = Tensor::zeros(t.rows, t.cols);
                        scatter(&mut g);
                        acc(&mut grads, *table, g);
                    }
                }
                Op::Mask { x, mask } => {
                    let mut g = gout;
                    g.data.iter_mut().zip(&mask.data).for_each(|(a, m)| *a *= m);
                    acc(&mut grads, *x, g);
                }
                Op::MeanRows(a) => {
                    let av = self.value(*a);
                    let n = av.rows.max(1) as f64;
                    let mut g = Tensor::zeros(av.rows, av.cols);
                    for r in 0..av.rows {
                        for (s, v) in g.row_mut(r).iter_mut().zip(&gout.data) {
                            *s = v / n;
                        }
                    }
                    acc(&mut grads, *a, g);
                }
                Op::Cosine { a, b } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (na, nb) = (dot(&av.data, &av.data).sqrt(), dot(&bv.data, &bv.data).sqrt());
                    if na * nb < 1e-12 {
                        continue;
                    }
                    let y = node.value.data[0];
                    let go = gout.data[0];
                    let ga: Vec<f64> =
                        av.data.iter().zip(&bv.data).map(|(x, z)| go * (z / (na * nb) - y * x / (na * na))).collect();
                    let gb: Vec<f64> =
                        av.data.iter().zip(&bv.data).map(|(x, z)| go * (x / (na * nb) - y * z / (nb * nb))).collect();
                    acc(&mut grads, *a, Tensor::from_vec(av.rows, av.cols, ga));
                    acc(&mut grads, *b, Tensor::from_vec(bv.rows, bv.cols, gb));
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    let go = gout.data[0];
                    let mut g = probs.clone();
                    for (r, &t) in targets.iter().enumerate() {
                        g.data[r * g.cols + t] -= 1.0;
                    }
                    g.data.iter_mut().for_each(|x| *x *= go);
                    acc(&mut grads, *logits, g);
                }
            }
        }
        param_grads
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Central differences over every parameter entry.
    fn check<F>(params: &mut [Tensor], f: F)
    where
        F: Fn(&mut Graph) -> NodeId,
    {
        let analytic = {
            let mut g = Graph::new(params);
            let loss = f(&mut g);
            g.backward(loss)
        };
        let h = 1e-6;
        for p in 0..params.len() {
            for i in 0..params[p].len() {
                let orig = params[p].data[i];
                params[p].data[i] = orig + h;
                let plus = {
                    let mut g = Graph::new(params);
                    let l = f(&mut g);
                    g.value(l).data[0]
                };
                params[p].data[i] = orig - h;
                let minus = {
                    let mut g = Graph::new(params);
                    let l = f(&mut g);
                    g.value(l).data[0]
                };
                params[p].data[i] = orig;
                let numeric = (plus - minus) / (2.0 * h);
                let a = analytic[p].data[i];
                let denom = a.abs().max(numeric.abs()).max(1e-6);
                assert!((a - numeric).abs() / denom < 1e-5, "param {p}[{i}]: analytic {a} numeric {numeric}");
            }
        }
    }

    #[test]
    fn dropout_scales_kept_entries_and_routes_gradient_through_mask() {
        let params = vec![Tensor::from_vec(4, 8, (1..=32).map(f64::from).collect())];
        let mut off = Graph::new(&params).with_dropout(0.0, 1);
        let x = off.param(0);
        assert_eq!(off.dropout(x), x);

        let mut g = Graph::new(&params).with_dropout(0.5, 1);
        let x = g.param(0);
        let y = g.dropout(x);
        let mut dropped = 0;
        for (v, orig) in g.value(y).data.iter().zip(&params[0].data) {
            if *v == 0.0 {
                dropped += 1;
            } else {
                assert_eq!(*v, 2.0 * orig);
            }
        }
        assert!(dropped > 0 && dropped < 32);
        // loss = mean of y, so d/dx is mask / n
        let ones = g.input(Tensor::filled(8, 1, 1.0));
        let s = g.matmul(y, ones);
        let m = g.mean_rows(s);
        let loss = g.scale(m, 1.0 / 8.0);
        let grads = g.backward(loss);
        for (gv, v) in grads[0].data.iter().zip(&g.value(y).data) {
            let kept = *v != 0.0;
            assert_eq!(*gv, if kept { 2.0 / 32.0 } else { 0.0 });
        }
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut params = vec![
            rand_tensor(&mut rng, 5, 4), // table
            rand_tensor(&mut rng, 4, 4), // w
            rand_tensor(&mut rng, 1, 4), // bias
            rand_tensor(&mut rng, 1, 4), // gamma
            rand_tensor(&mut rng, 1, 4), // beta
        ];
        check(&mut params, |g| {
            let table = g.param(0);
            let w = g.param(1);
            let b = g.param(2);
            let gamma = g.param(3);
            let beta = g.param(4);
            let x = g.embed(table, &[0, 3, 3, 1]);
            let h = g.matmul(x, w);
            let h = g.add_row(h, b);
            let h = g.layer_norm(h, gamma, beta);
            let h = g.gelu(h);
            let s = g.matmul_t(h, x);
            let s = g.scale(s, 0.5);
            let p = g.softmax(s, true);
            let ctx = g.matmul(p, h);
            let left = g.slice_cols(ctx, 0, 2);
            let right = g.slice_cols(ctx, 2, 2);
            let cat = g.concat_cols(&[right, left]);
            let res = g.add(cat, x);
            let logits = g.matmul_t(res, table);
            let ce = g.cross_entropy(logits, &[1, 2, 0, 4]);
            let m1 = g.mean_rows(res);
            let m2 = g.mean_rows(h);
            let c = g.cosine(m1, m2);
            let c2 = g.cosine(m2, m1);
            let sims = g.concat_cols(&[c, c2]);
            let nce = g.cross_entropy(sims, &[0]);
            g.add(ce, nce)
        });
    }

    #[test]
    fn causal_softmax_masks_future() {
        let params = vec![];
        let mut g = Graph::new(&params);
        let x = g.input(Tensor::from_vec(2, 2, vec![1.0, 5.0, 1.0, 5.0]));
        let p = g.softmax(x, true);
        assert_eq!(g.value(p).row(0), &[1.0, 0.0]);
        assert!((g.value(p).row(1).iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }
}
