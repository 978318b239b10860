//! Recorded-operation reverse-mode differentiation.
//!
//! A [`Tape`] captures one forward pass as a sequence of primitive
//! records. Each record owns its output tensor, so replaying the tape
//! reproduces the recorded values bit-exactly, and [`Tape::backward`]
//! walks the records in reverse to accumulate gradients for every node.
//! A tape belongs to a single forward pass; distinct tapes are
//! independent.

use crate::tensor::{sigmoid, Tensor};
use crate::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: NodeId, b: NodeId, trans_b: bool },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, c: f32 },
    Silu { a: NodeId },
    RmsNorm { a: NodeId, scale: NodeId, eps: f32 },
    Softmax { a: NodeId },
    CausalSoftmax { a: NodeId },
    LogSoftmax { a: NodeId },
    Rotary { a: NodeId, n_heads: usize, base: f32 },
    SliceCols { a: NodeId, start: usize, len: usize },
    ConcatCols { parts: Vec<NodeId> },
    Sum { a: NodeId },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// One forward pass worth of recorded primitives.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input tensor. Leaves receive gradients but do not
    /// propagate further.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul { a, b, trans_b: false }, v))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul_nt(self.value(b))?;
        Ok(self.push(Op::MatMul { a, b, trans_b: true }, v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add { a, b }, v))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(Op::Mul { a, b }, v))
    }

    pub fn scale(&mut self, a: NodeId, c: f32) -> NodeId {
        let v = self.value(a).scale(c);
        self.push(Op::Scale { a, c }, v)
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).silu();
        self.push(Op::Silu { a }, v)
    }

    pub fn rmsnorm(&mut self, a: NodeId, scale: NodeId, eps: f32) -> Result<NodeId> {
        let v = self.value(a).rmsnorm(self.value(scale), eps)?;
        Ok(self.push(Op::RmsNorm { a, scale, eps }, v))
    }

    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).softmax();
        self.push(Op::Softmax { a }, v)
    }

    pub fn causal_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).causal_softmax()?;
        Ok(self.push(Op::CausalSoftmax { a }, v))
    }

    pub fn log_softmax(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).log_softmax();
        self.push(Op::LogSoftmax { a }, v)
    }

    pub fn rotary(&mut self, a: NodeId, n_heads: usize, base: f32) -> Result<NodeId> {
        let v = self.value(a).rotary(n_heads, base)?;
        Ok(self.push(Op::Rotary { a, n_heads, base }, v))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let v = self.value(a).slice_cols(start, len)?;
        Ok(self.push(Op::SliceCols { a, start, len }, v))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_cols(&tensors)?;
        Ok(self.push(Op::ConcatCols { parts: parts.to_vec() }, v))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).sum();
        self.push(Op::Sum { a }, v)
    }

    /// Re-executes every non-leaf record from the leaf values and
    /// returns the maximum absolute difference against the recorded
    /// outputs. Deterministic kernels make this exactly 0.
    pub fn replay_max_diff(&self) -> Result<f64> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        let mut worst = 0.0f64;
        for node in &self.nodes {
            let v = match &node.op {
                Op::Leaf => node.value.clone(),
                Op::MatMul { a, b, trans_b: false } => values[a.0].matmul(&values[b.0])?,
                Op::MatMul { a, b, trans_b: true } => values[a.0].matmul_nt(&values[b.0])?,
                Op::Add { a, b } => values[a.0].add(&values[b.0])?,
                Op::Mul { a, b } => values[a.0].mul(&values[b.0])?,
                Op::Scale { a, c } => values[a.0].scale(*c),
                Op::Silu { a } => values[a.0].silu(),
                Op::RmsNorm { a, scale, eps } => values[a.0].rmsnorm(&values[scale.0], *eps)?,
                Op::Softmax { a } => values[a.0].softmax(),
                Op::CausalSoftmax { a } => values[a.0].causal_softmax()?,
                Op::LogSoftmax { a } => values[a.0].log_softmax(),
                Op::Rotary { a, n_heads, base } => values[a.0].rotary(*n_heads, *base)?,
                Op::SliceCols { a, start, len } => values[a.0].slice_cols(*start, *len)?,
                Op::ConcatCols { parts } => {
                    let tensors: Vec<&Tensor> = parts.iter().map(|p| &values[p.0]).collect();
                    Tensor::concat_cols(&tensors)?
                }
                Op::Sum { a } => values[a.0].sum(),
            };
            worst = worst.max(v.max_abs_diff(&node.value)?);
            values.push(v);
        }
        Ok(worst)
    }

    /// Backpropagates from a scalar node, returning one gradient per
    /// reachable node.
    pub fn backward(&self, target: NodeId) -> Result<Gradients> {
        if target.0 >= self.nodes.len() {
            return Err(Error::Lookup(format!(
                "node {} is not on this tape ({} nodes)",
                target.0,
                self.nodes.len()
            )));
        }
        if !self.nodes[target.0].value.is_scalar() {
            return Err(Error::input(format!(
                "backward target must be scalar, got shape {:?}",
                self.nodes[target.0].value.shape()
            )));
        }

        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[target.0] = Some(vec![1.0]);

        for idx in (0..=target.0).rev() {
            // Op inputs always precede their output, so accumulation below
            // only touches indices < idx; the taken gradient is restored
            // after dispatch.
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul { a, b, trans_b } => {
                    let gt = Tensor::new(node.value.shape().to_vec(), g.clone())?;
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if *trans_b {
                        // c = a·bᵀ: ga = g·b, gb = gᵀ·a
                        self.accumulate(&mut grads, *a, gt.matmul(bv)?.data());
                        self.accumulate(&mut grads, *b, gt.matmul_tn(av)?.data());
                    } else {
                        // c = a·b: ga = g·bᵀ, gb = aᵀ·g
                        self.accumulate(&mut grads, *a, gt.matmul_nt(bv)?.data());
                        self.accumulate(&mut grads, *b, av.matmul_tn(&gt)?.data());
                    }
                }
                Op::Add { a, b } => {
                    self.accumulate(&mut grads, *a, &g);
                    self.accumulate(&mut grads, *b, &g);
                }
                Op::Mul { a, b } => {
                    let av = self.value(*a).data();
                    let bv = self.value(*b).data();
                    let ga: Vec<f32> = g.iter().zip(bv).map(|(&gi, &bi)| gi * bi).collect();
                    let gb: Vec<f32> = g.iter().zip(av).map(|(&gi, &ai)| gi * ai).collect();
                    self.accumulate(&mut grads, *a, &ga);
                    self.accumulate(&mut grads, *b, &gb);
                }
                Op::Scale { a, c } => {
                    let ga: Vec<f32> = g.iter().map(|&gi| gi * c).collect();
                    self.accumulate(&mut grads, *a, &ga);
                }
                Op::Silu { a } => {
                    let av = self.value(*a).data();
                    let ga: Vec<f32> = g
                        .iter()
                        .zip(av)
                        .map(|(&gi, &x)| {
                            let s = sigmoid(x);
                            gi * s * (1.0 + x * (1.0 - s))
                        })
                        .collect();
                    self.accumulate(&mut grads, *a, &ga);
                }
                Op::RmsNorm { a, scale, eps } => {
                    let x = self.value(*a);
                    let s = self.value(*scale).data();
                    let d = x.cols();
                    let mut ga = vec![0.0f32; x.len()];
                    let mut gs = vec![0.0f32; d];
                    for (ri, row) in x.data().chunks_exact(d).enumerate() {
                        let grow = &g[ri * d..(ri + 1) * d];
                        let mut ssq = 0.0f32;
                        for &v in row {
                            ssq += v * v;
                        }
                        let r = (ssq / d as f32 + eps).sqrt();
                        let inv = 1.0 / r;
                        // dot = Σ_i g_i · s_i · x_i
                        let mut dot = 0.0f32;
                        for j in 0..d {
                            dot += grow[j] * s[j] * row[j];
                        }
                        let coef = dot / (d as f32 * r * r * r);
                        let out_ga = &mut ga[ri * d..(ri + 1) * d];
                        for j in 0..d {
                            out_ga[j] = grow[j] * s[j] * inv - row[j] * coef;
                            gs[j] += grow[j] * row[j] * inv;
                        }
                    }
                    self.accumulate(&mut grads, *a, &ga);
                    self.accumulate(&mut grads, *scale, &gs);
                }
                Op::Softmax { a } => {
                    let y = node.value.data();
                    let d = node.value.cols();
                    let mut ga = vec![0.0f32; y.len()];
                    for ri in 0..y.len() / d {
                        let yr = &y[ri * d..(ri + 1) * d];
                        let gr = &g[ri * d..(ri + 1) * d];
                        let mut dot = 0.0f32;
                        for j in 0..d {
                            dot += gr[j] * yr[j];
                        }
                        let out = &mut ga[ri * d..(ri + 1) * d];
                        for j in 0..d {
                            out[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    self.accumulate(&mut grads, *a, &ga);
                }
                Op::CausalSoftmax { a } => {
                    let y = node.value.data();
                    let n = node.value.cols();
                    let mut ga = vec![0.0f32; y.len()];
                    for i in 0..n {
                        let yr = &y[i * n..i * n + i + 1];
                        let gr = &g[i * n..i * n + i + 1];
                        let mut dot = 0.0f32;
                        for j in 0..=i {
                            dot += gr[j] * yr[j];
                        }
                        let out = &mut ga[i * n..i * n + i + 1];
                        for j in 0..=i {
                            out[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    self.accumulate(&mut grads, *a, &ga);
                }
                Op::LogSoftmax { a } => {
                    let y = node.value.data(); // log-probs
                    let d = node.value.cols();
                    let mut ga = vec![0.0f32; y.len()];
                    for ri in 0..y.len() / d {
                        let yr = &y[ri * d..(ri + 1) * d];
                        let gr = &g[ri * d..(ri + 1) * d];
                        let gsum: f32 = gr.iter().sum();
                        let out = &mut ga[ri * d..(ri + 1) * d];
                        for j in 0..d {
                            out[j] = gr[j] - yr[j].exp() * gsum;
                        }
                    }
                    self.accumulate(&mut grads, *a, &ga);
                }
                Op::Rotary { a, n_heads, base } => {
                    let gt = Tensor::new(node.value.shape().to_vec(), g.clone())?;
                    let ga = gt.rotary_inverse(*n_heads, *base)?;
                    self.accumulate(&mut grads, *a, ga.data());
                }
                Op::SliceCols { a, start, len } => {
                    let src = self.value(*a);
                    let c = src.cols();
                    let mut ga = vec![0.0f32; src.len()];
                    for i in 0..src.rows() {
                        ga[i * c + start..i * c + start + len]
                            .copy_from_slice(&g[i * len..(i + 1) * len]);
                    }
                    self.accumulate(&mut grads, *a, &ga);
                }
                Op::ConcatCols { parts } => {
                    let total = node.value.cols();
                    let rows = node.value.rows();
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        let mut gp = vec![0.0f32; rows * w];
                        for i in 0..rows {
                            gp[i * w..(i + 1) * w]
                                .copy_from_slice(&g[i * total + offset..i * total + offset + w]);
                        }
                        self.accumulate(&mut grads, p, &gp);
                        offset += w;
                    }
                }
                Op::Sum { a } => {
                    let n = self.value(*a).len();
                    let ga = vec![g[0]; n];
                    self.accumulate(&mut grads, *a, &ga);
                }
            }
            grads[idx] = Some(g);
        }

        let tensors = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|v| Tensor::new(self.nodes[i].value.shape().to_vec(), v))
                    .transpose()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Gradients { grads: tensors })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f32>>], id: NodeId, delta: &[f32]) {
        match &mut grads[id.0] {
            Some(existing) => {
                for (e, &d) in existing.iter_mut().zip(delta) {
                    *e += d;
                }
            }
            slot => *slot = Some(delta.to_vec()),
        }
    }
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the backward target with respect to a node, or `None`
    /// if the node does not influence the target.
    pub fn wrt(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_tensor(shape: Vec<usize>, seed: u64) -> Tensor {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| r.gen_range(-1.0f32..1.0)).collect();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn gradient_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(random_tensor(vec![3, 4], 1));
        let s = tape.sum(x);
        let grads = tape.backward(s).unwrap();
        let g = grads.wrt(x).unwrap();
        assert!(g.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn gradient_of_dot_product_is_other_operand() {
        let mut tape = Tape::new();
        let x = tape.leaf(random_tensor(vec![1, 6], 2));
        let y_val = random_tensor(vec![1, 6], 3);
        let y = tape.leaf(y_val.clone());
        let prod = tape.mul(x, y).unwrap();
        let target = tape.sum(prod);
        let grads = tape.backward(target).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), y_val.data());
    }

    #[test]
    fn backward_rejects_non_scalar_target() {
        let mut tape = Tape::new();
        let x = tape.leaf(random_tensor(vec![2, 2], 4));
        assert!(matches!(tape.backward(x), Err(Error::Input(_))));
    }

    #[test]
    fn backward_rejects_unknown_node() {
        let tape = Tape::new();
        assert!(matches!(tape.backward(NodeId(5)), Err(Error::Lookup(_))));
    }

    #[test]
    fn replay_reproduces_recorded_values_exactly() {
        let mut tape = Tape::new();
        let x = tape.leaf(random_tensor(vec![4, 6], 5));
        let w = tape.leaf(random_tensor(vec![6, 8], 6));
        let s = tape.leaf(Tensor::filled(vec![6], 1.0));
        let normed = tape.rmsnorm(x, s, 1e-6).unwrap();
        let h = tape.matmul(normed, w).unwrap();
        let r = tape.rotary(h, 2, 10000.0).unwrap();
        let att = tape.matmul_nt(r, r).unwrap();
        let probs = tape.causal_softmax(att).unwrap();
        let ctx = tape.matmul(probs, h).unwrap();
        let act = tape.silu(ctx);
        let _ = tape.sum(act);
        assert_eq!(tape.replay_max_diff().unwrap(), 0.0);
    }

    /// Central finite differences on a scalar function of one leaf.
    fn gradcheck(
        build: impl Fn(&mut Tape, NodeId) -> NodeId,
        input: Tensor,
        step: f32,
        tol: f64,
    ) {
        let mut tape = Tape::new();
        let x = tape.leaf(input.clone());
        let target = build(&mut tape, x);
        let grads = tape.backward(target).unwrap();
        let analytic = grads.wrt(x).unwrap().clone();

        for i in 0..input.len() {
            let eval = |delta: f32| -> f64 {
                let mut data = input.data().to_vec();
                data[i] += delta;
                let perturbed = Tensor::new(input.shape().to_vec(), data).unwrap();
                let mut t = Tape::new();
                let xn = t.leaf(perturbed);
                let out = build(&mut t, xn);
                t.value(out).data()[0] as f64
            };
            let fd = (eval(step) - eval(-step)) / (2.0 * step as f64);
            let ad = analytic.data()[i] as f64;
            let denom = ad.abs().max(fd.abs());
            if denom < 1e-4 {
                assert!((ad - fd).abs() <= 1e-4, "coord {i}: {ad} vs {fd}");
            } else {
                assert!((ad - fd).abs() / denom <= tol, "coord {i}: {ad} vs {fd}");
            }
        }
    }

    #[test]
    fn gradcheck_matmul() {
        let w = random_tensor(vec![5, 3], 10);
        gradcheck(
            move |t, x| {
                let wn = t.leaf(w.clone());
                let y = t.matmul(x, wn).unwrap();
                t.sum(y)
            },
            random_tensor(vec![2, 5], 11),
            1e-2,
            1e-3,
        );
    }

    #[test]
    fn gradcheck_matmul_nt() {
        let w = random_tensor(vec![3, 5], 12);
        gradcheck(
            move |t, x| {
                let wn = t.leaf(w.clone());
                let y = t.matmul_nt(x, wn).unwrap();
                let sq = t.mul(y, y).unwrap();
                t.sum(sq)
            },
            random_tensor(vec![2, 5], 13),
            1e-2,
            1e-3,
        );
    }

    #[test]
    fn gradcheck_rmsnorm() {
        let scale = random_tensor(vec![6], 14);
        gradcheck(
            move |t, x| {
                let s = t.leaf(scale.clone());
                let y = t.rmsnorm(x, s, 1e-6).unwrap();
                let sq = t.mul(y, y).unwrap();
                t.sum(sq)
            },
            random_tensor(vec![3, 6], 15),
            1e-2,
            1e-3,
        );
    }

    #[test]
    fn gradcheck_rmsnorm_scale_argument() {
        let x = random_tensor(vec![3, 6], 16);
        gradcheck(
            move |t, s| {
                let xn = t.leaf(x.clone());
                let y = t.rmsnorm(xn, s, 1e-6).unwrap();
                let sq = t.mul(y, y).unwrap();
                t.sum(sq)
            },
            random_tensor(vec![6], 17),
            1e-2,
            1e-3,
        );
    }

    #[test]
    fn gradcheck_softmax_variants() {
        let weight = random_tensor(vec![4, 4], 18);
        let w2 = weight.clone();
        gradcheck(
            move |t, x| {
                let wn = t.leaf(weight.clone());
                let y = t.softmax(x);
                let p = t.mul(y, wn).unwrap();
                t.sum(p)
            },
            random_tensor(vec![4, 4], 19),
            1e-2,
            1e-3,
        );
        gradcheck(
            move |t, x| {
                let wn = t.leaf(w2.clone());
                let y = t.causal_softmax(x).unwrap();
                let p = t.mul(y, wn).unwrap();
                t.sum(p)
            },
            random_tensor(vec![4, 4], 20),
            1e-2,
            1e-3,
        );
    }

    #[test]
    fn gradcheck_log_softmax() {
        let weight = random_tensor(vec![2, 5], 21);
        gradcheck(
            move |t, x| {
                let wn = t.leaf(weight.clone());
                let y = t.log_softmax(x);
                let p = t.mul(y, wn).unwrap();
                t.sum(p)
            },
            random_tensor(vec![2, 5], 22),
            1e-2,
            1e-3,
        );
    }

    #[test]
    fn gradcheck_silu_and_rotary() {
        gradcheck(
            |t, x| {
                let y = t.silu(x);
                t.sum(y)
            },
            random_tensor(vec![2, 4], 23),
            1e-2,
            1e-3,
        );
        let weight = random_tensor(vec![3, 8], 24);
        gradcheck(
            move |t, x| {
                let wn = t.leaf(weight.clone());
                let y = t.rotary(x, 2, 10000.0).unwrap();
                let p = t.mul(y, wn).unwrap();
                t.sum(p)
            },
            random_tensor(vec![3, 8], 25),
            1e-2,
            1e-3,
        );
    }

    #[test]
    fn gradcheck_slice_concat() {
        let weight = random_tensor(vec![2, 6], 26);
        gradcheck(
            move |t, x| {
                let a = t.slice_cols(x, 0, 2).unwrap();
                let b = t.slice_cols(x, 2, 4).unwrap();
                let joined = t.concat_cols(&[b, a]).unwrap();
                let wn = t.leaf(weight.clone());
                let p = t.mul(joined, wn).unwrap();
                t.sum(p)
            },
            random_tensor(vec![2, 6], 27),
            1e-2,
            1e-3,
        );
    }

    #[test]
    fn fan_out_accumulates_gradients() {
        // y = x·x (elementwise) + x ⇒ dy/dx = 2x + 1
        let input = random_tensor(vec![1, 4], 28);
        let mut tape = Tape::new();
        let x = tape.leaf(input.clone());
        let sq = tape.mul(x, x).unwrap();
        let y = tape.add(sq, x).unwrap();
        let target = tape.sum(y);
        let grads = tape.backward(target).unwrap();
        for (g, &v) in grads.wrt(x).unwrap().data().iter().zip(input.data()) {
            assert!((g - (2.0 * v + 1.0)).abs() <= 1e-5);
        }
    }
}
