//! Reverse-mode automatic differentiation over a fixed primitive set.
//!
//! A `Graph` is a per-sample tape: the forward pass appends nodes in
//! topological order, `backward` walks them in reverse and accumulates
//! gradients. Parameters enter as leaves; gradients are read back by
//! `NodeId`. Finite differences never drive training — they are the
//! oracle for this module (see `gradcheck`).

use crate::error::{Result, VoltError};
use crate::tensor::{self, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    /// a (m×k) · b (k×n)
    MatMul { a: NodeId, b: NodeId },
    /// a (m×k) · bᵀ with b stored n×k
    MatMulNT { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Scale { a: NodeId, c: f64 },
    ConcatCols { parts: Vec<NodeId> },
    SoftmaxRows { a: NodeId },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, eps: f64 },
    Relu { a: NodeId },
    Sigmoid { a: NodeId },
    /// Mean binary cross-entropy of `pred` against a constant target.
    /// No gradient flows to the target.
    BceMean { pred: NodeId, target: NodeId },
    SumAll { a: NodeId },
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar output with respect to every tracked node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads[id.0].take()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Constant input; no gradient is tracked through it.
    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Leaf, t, false)
    }

    /// Trainable leaf; `backward` produces a gradient for it.
    pub fn param(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Leaf, t, true)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = tensor::matmul(self.value(a), self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMul { a, b }, v, ng))
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = tensor::matmul_nt(self.value(a), self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMulNT { a, b }, v, ng))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = tensor::add(self.value(a), self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add { a, b }, v, ng))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let v = tensor::scale(self.value(a), c)?;
        let ng = self.needs(a);
        Ok(self.push(Op::Scale { a, c }, v, ng))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&id| self.value(id)).collect();
        let v = tensor::concat_cols(&tensors)?;
        let ng = parts.iter().any(|&id| self.needs(id));
        Ok(self.push(
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            v,
            ng,
        ))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let v = tensor::softmax_rows(self.value(a))?;
        let ng = self.needs(a);
        Ok(self.push(Op::SoftmaxRows { a }, v, ng))
    }

    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let v = tensor::layer_norm(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(Op::LayerNorm { x, gamma, beta, eps }, v, ng))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = tensor::relu(self.value(a))?;
        let ng = self.needs(a);
        Ok(self.push(Op::Relu { a }, v, ng))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let v = tensor::sigmoid(self.value(a))?;
        let ng = self.needs(a);
        Ok(self.push(Op::Sigmoid { a }, v, ng))
    }

    pub fn bce_mean(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        if self.needs(target) {
            return Err(VoltError::shape(
                "bce_mean: gradient through the target is not supported",
            ));
        }
        let v = tensor::bce_mean(self.value(pred), self.value(target))?;
        let ng = self.needs(pred);
        Ok(self.push(Op::BceMean { pred, target }, v, ng))
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        let v = tensor::sum_all(self.value(a))?;
        let ng = self.needs(a);
        Ok(self.push(Op::SumAll { a }, v, ng))
    }

    /// Accumulate gradients of the scalar `loss` node into every
    /// gradient-tracked node, walking the tape in reverse.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(VoltError::shape(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(out_grad) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if node.needs_grad {
                self.accumulate_inputs(node, &out_grad, &mut grads)?;
            }
            grads[idx] = Some(out_grad);
        }

        #[cfg(debug_assertions)]
        for g in grads.iter().flatten() {
            g.check_finite("backward")?;
        }

        Ok(Gradients { grads })
    }

    fn accumulate_inputs(
        &self,
        node: &Node,
        dy: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                // C = A·B: dA = dC·Bᵀ, dB = Aᵀ·dC
                if self.needs(*a) {
                    let da = tensor::matmul_nt(dy, self.value(*b))?;
                    accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    let db = tensor::matmul_tn(self.value(*a), dy)?;
                    accumulate(grads, *b, db);
                }
            }
            Op::MatMulNT { a, b } => {
                // C = A·Bᵀ: dA = dC·B, dB = dCᵀ·A
                if self.needs(*a) {
                    let da = tensor::matmul(dy, self.value(*b))?;
                    accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    let db = tensor::matmul_tn(dy, self.value(*a))?;
                    accumulate(grads, *b, db);
                }
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    accumulate(grads, *a, dy.clone());
                }
                if self.needs(*b) {
                    accumulate(grads, *b, dy.clone());
                }
            }
            Op::Scale { a, c } => {
                if self.needs(*a) {
                    accumulate(grads, *a, tensor::scale(dy, *c)?);
                }
            }
            Op::ConcatCols { parts } => {
                let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
                let pieces = tensor::split_cols(dy, &widths)?;
                for (&p, piece) in parts.iter().zip(pieces) {
                    if self.needs(p) {
                        accumulate(grads, p, piece);
                    }
                }
            }
            Op::SoftmaxRows { a } => {
                if self.needs(*a) {
                    // dx_ij = y_ij (dy_ij − Σ_k dy_ik y_ik)
                    let y = &node.value;
                    let (rows, cols) = (y.rows(), y.cols());
                    let mut dx = vec![0.0; rows * cols];
                    for i in 0..rows {
                        let yr = &y.data()[i * cols..(i + 1) * cols];
                        let gr = &dy.data()[i * cols..(i + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(yv, gv)| yv * gv).sum();
                        let dst = &mut dx[i * cols..(i + 1) * cols];
                        for j in 0..cols {
                            dst[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    accumulate(grads, *a, Tensor::from_parts(vec![rows, cols], dx));
                }
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                self.layer_norm_backward(*x, *gamma, *beta, *eps, dy, grads)?;
            }
            Op::Relu { a } => {
                if self.needs(*a) {
                    let xv = self.value(*a);
                    let data = xv
                        .data()
                        .iter()
                        .zip(dy.data())
                        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                        .collect();
                    accumulate(grads, *a, Tensor::from_parts(xv.shape().to_vec(), data));
                }
            }
            Op::Sigmoid { a } => {
                if self.needs(*a) {
                    let y = &node.value;
                    let data = y
                        .data()
                        .iter()
                        .zip(dy.data())
                        .map(|(&yv, &g)| g * yv * (1.0 - yv))
                        .collect();
                    accumulate(grads, *a, Tensor::from_parts(y.shape().to_vec(), data));
                }
            }
            Op::BceMean { pred, target } => {
                if self.needs(*pred) {
                    let p = self.value(*pred);
                    let t = self.value(*target);
                    let n = p.len() as f64;
                    let g0 = dy.data()[0];
                    let data = p
                        .data()
                        .iter()
                        .zip(t.data())
                        .map(|(&pv, &yv)| {
                            // The clamp is flat outside (lo, hi): zero gradient there.
                            let pc = tensor::clamp_prob(pv);
                            if pc != pv {
                                0.0
                            } else {
                                g0 * ((1.0 - yv) / (1.0 - pc) - yv / pc) / n
                            }
                        })
                        .collect();
                    accumulate(grads, *pred, Tensor::from_parts(p.shape().to_vec(), data));
                }
            }
            Op::SumAll { a } => {
                if self.needs(*a) {
                    let xv = self.value(*a);
                    let g0 = dy.data()[0];
                    accumulate(
                        grads,
                        *a,
                        Tensor::from_parts(xv.shape().to_vec(), vec![g0; xv.len()]),
                    );
                }
            }
        }
        Ok(())
    }

    fn layer_norm_backward(
        &self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
        dy: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let xv = self.value(x);
        let gv = self.value(gamma);
        let (rows, d) = (xv.rows(), xv.cols());
        let need_x = self.needs(x);
        let need_g = self.needs(gamma);
        let need_b = self.needs(beta);

        let mut dx = vec![0.0; rows * d];
        let mut dgamma = vec![0.0; d];
        let mut dbeta = vec![0.0; d];

        for i in 0..rows {
            let row = &xv.data()[i * d..(i + 1) * d];
            let dyr = &dy.data()[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv_std = 1.0 / (var + eps).sqrt();

            // g = dy ⊙ gamma; dx = inv_std (g − mean(g) − x̂ · mean(g ⊙ x̂))
            let mut g_mean = 0.0;
            let mut gx_mean = 0.0;
            for j in 0..d {
                let xhat = (row[j] - mean) * inv_std;
                let gj = dyr[j] * gv.data()[j];
                g_mean += gj;
                gx_mean += gj * xhat;
                if need_g {
                    dgamma[j] += dyr[j] * xhat;
                }
                if need_b {
                    dbeta[j] += dyr[j];
                }
            }
            g_mean /= d as f64;
            gx_mean /= d as f64;
            if need_x {
                for j in 0..d {
                    let xhat = (row[j] - mean) * inv_std;
                    let gj = dyr[j] * gv.data()[j];
                    dx[i * d + j] = inv_std * (gj - g_mean - xhat * gx_mean);
                }
            }
        }

        if need_x {
            accumulate(grads, x, Tensor::from_parts(vec![rows, d], dx));
        }
        if need_g {
            accumulate(grads, gamma, Tensor::from_parts(vec![d], dgamma));
        }
        if need_b {
            accumulate(grads, beta, Tensor::from_parts(vec![d], dbeta));
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, contribution: Tensor) {
    match &mut grads[id.0] {
        Some(existing) => tensor::add_assign(existing, &contribution),
        slot @ None => *slot = Some(contribution),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::params::{Grads, ParamStore};
    use rand::Rng;

    /// Gradient-check one primitive: `build` wires params into a scalar loss.
    /// Every differentiable primitive must agree with central differences at
    /// 1e-4 relative tolerance (epsilon 1e-5) on randomized shapes.
    fn check_op<F>(params: &ParamStore, build: F, tol: f64)
    where
        F: Fn(&mut Graph, &ParamStore) -> Result<(Vec<(String, NodeId)>, NodeId)>,
    {
        let loss = |p: &ParamStore| -> Result<f64> {
            let mut g = Graph::new();
            let (_, out) = build(&mut g, p)?;
            g.value(out).as_scalar()
        };
        let mut g = Graph::new();
        let (ids, out) = build(&mut g, params).unwrap();
        let mut node_grads = g.backward(out).unwrap();
        let mut analytic = Grads::new();
        for (name, id) in ids {
            analytic.insert(name, node_grads.take(id).unwrap());
        }
        let report = grad_check(loss, params, &analytic, 1e-5).unwrap();
        assert!(
            report.max_rel_err < tol,
            "max rel err {} at {:?}",
            report.max_rel_err,
            report.worst
        );
    }

    fn random_tensor(rng: &mut impl Rng, shape: Vec<usize>) -> Tensor {
        let len = shape.iter().product();
        let data = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(shape, data).unwrap()
    }

    /// Scalarize a rank-2 node as u·M·vᵀ so upstream gradients are non-uniform.
    fn sandwich(g: &mut Graph, m: NodeId, u: Tensor, v: Tensor) -> Result<NodeId> {
        let u = g.input(u);
        let v = g.input(v);
        let um = g.matmul(u, m)?;
        let s = g.matmul_nt(um, v)?;
        g.sum_all(s)
    }

    fn store_of(entries: &[(&str, Tensor)]) -> ParamStore {
        let mut p = ParamStore::new();
        for (name, t) in entries {
            p.insert(*name, t.clone(), true).unwrap();
        }
        p
    }

    #[test]
    fn primitives_pass_grad_check_on_random_shapes() {
        let mut rng = crate::rng::stream(42, "test/graph-primitives");
        for _trial in 0..8 {
            let rows = rng.random_range(1..=8);
            let cols = rng.random_range(1..=8);
            let inner = rng.random_range(1..=8);
            let u = random_tensor(&mut rng, vec![1, rows]);
            let v = random_tensor(&mut rng, vec![1, cols]);

            let a = random_tensor(&mut rng, vec![rows, inner]);
            let b = random_tensor(&mut rng, vec![inner, cols]);
            let c = random_tensor(&mut rng, vec![rows, cols]);
            let gamma = random_tensor(&mut rng, vec![cols]);
            let beta = random_tensor(&mut rng, vec![cols]);

            // matmul + add + relu chained into the sandwich.
            let (uu, vv) = (u.clone(), v.clone());
            check_op(
                &store_of(&[("a", a.clone()), ("b", b.clone()), ("c", c.clone())]),
                move |g, p| {
                    let a = g.param(p.tensor("a")?.clone());
                    let b = g.param(p.tensor("b")?.clone());
                    let c = g.param(p.tensor("c")?.clone());
                    let ab = g.matmul(a, b)?;
                    let sum = g.add(ab, c)?;
                    let r = g.relu(sum)?;
                    let out = sandwich(g, r, uu.clone(), vv.clone())?;
                    Ok((
                        vec![("a".into(), a), ("b".into(), b), ("c".into(), c)],
                        out,
                    ))
                },
                1e-4,
            );

            // softmax → sigmoid, scaled.
            let (uu, vv) = (u.clone(), v.clone());
            check_op(
                &store_of(&[("c", c.clone())]),
                move |g, p| {
                    let c = g.param(p.tensor("c")?.clone());
                    let sc = g.scale(c, 1.7)?;
                    let sm = g.softmax_rows(sc)?;
                    let sg = g.sigmoid(sm)?;
                    let out = sandwich(g, sg, uu.clone(), vv.clone())?;
                    Ok((vec![("c".into(), c)], out))
                },
                1e-4,
            );

            // layer norm over x, gamma, beta.
            let (uu, vv) = (u.clone(), v.clone());
            check_op(
                &store_of(&[
                    ("c", c.clone()),
                    ("gamma", gamma.clone()),
                    ("beta", beta.clone()),
                ]),
                move |g, p| {
                    let c = g.param(p.tensor("c")?.clone());
                    let gamma = g.param(p.tensor("gamma")?.clone());
                    let beta = g.param(p.tensor("beta")?.clone());
                    let ln = g.layer_norm(c, gamma, beta, 1e-5)?;
                    let out = sandwich(g, ln, uu.clone(), vv.clone())?;
                    Ok((
                        vec![
                            ("c".into(), c),
                            ("gamma".into(), gamma),
                            ("beta".into(), beta),
                        ],
                        out,
                    ))
                },
                1e-4,
            );

            // concat_cols + matmul_nt, scalarized through the same row twice.
            let uu = u.clone();
            check_op(
                &store_of(&[("a", a.clone()), ("c", c.clone())]),
                move |g, p| {
                    let a = g.param(p.tensor("a")?.clone());
                    let c = g.param(p.tensor("c")?.clone());
                    let cat = g.concat_cols(&[a, c])?;
                    let sq = g.matmul_nt(cat, cat)?;
                    let urow = g.input(uu.clone());
                    let left = g.matmul(urow, sq)?;
                    let right = g.matmul_nt(left, urow)?;
                    let out = g.sum_all(right)?;
                    Ok((vec![("a".into(), a), ("c".into(), c)], out))
                },
                1e-4,
            );

            // sigmoid → BCE against a random binary target.
            let target = {
                let data: Vec<f64> = (0..rows * cols)
                    .map(|_| if rng.random_range(0.0..1.0) < 0.5 { 0.0 } else { 1.0 })
                    .collect();
                Tensor::new(vec![rows, cols], data).unwrap()
            };
            check_op(
                &store_of(&[("c", c.clone())]),
                move |g, p| {
                    let c = g.param(p.tensor("c")?.clone());
                    let sg = g.sigmoid(c)?;
                    let t = g.input(target.clone());
                    let out = g.bce_mean(sg, t)?;
                    Ok((vec![("c".into(), c)], out))
                },
                1e-4,
            );
        }
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut g = Graph::new();
        let a = g.param(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        assert!(g.backward(a).is_err());
    }

    #[test]
    fn inputs_receive_no_gradients() {
        let mut g = Graph::new();
        let a = g.input(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let b = g.param(Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap());
        let c = g.matmul(a, b).unwrap();
        let l = g.sum_all(c).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(grads.get(a).is_none());
        assert!(grads.get(b).is_some());
    }
}
