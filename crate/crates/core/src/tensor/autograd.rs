//! Reverse pass: topological sort plus one vector-Jacobian product per op.
//!
//! Gradients for a single backward call accumulate in a scratch map keyed by
//! node identity and are flushed into the persistent `grad` buffers at the
//! end, so calling `backward` twice on the same graph yields exactly twice
//! the single-pass gradients.

use std::collections::{HashMap, HashSet};

use super::{Op, Result, Tensor, TensorError, LOG_EPS};

impl Tensor {
    /// Backpropagates from this scalar through every reachable node with
    /// `requires_grad`, accumulating into their `grad` buffers.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(TensorError::NotScalar { shape: self.shape().to_vec() });
        }
        let order = topo_order(self);
        let mut grads: HashMap<usize, Vec<f64>> = HashMap::new();
        grads.insert(self.id(), vec![1.0]);
        for node in order.iter().rev() {
            let Some(g) = grads.get(&node.id()).cloned() else { continue };
            apply_vjp(node, &g, &mut grads);
        }
        for node in &order {
            if node.requires_grad() {
                if let Some(g) = grads.remove(&node.id()) {
                    node.accumulate_grad(&g);
                }
            }
        }
        Ok(())
    }
}

/// Post-order over the `requires_grad` subgraph: inputs appear before the
/// nodes that consume them, and each node exactly once.
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut seen = HashSet::new();
    if !root.requires_grad() {
        return order;
    }
    // Stack frames: (node, next-input-index).
    let mut stack: Vec<(Tensor, usize)> = vec![(root.clone(), 0)];
    seen.insert(root.id());
    while let Some((node, idx)) = stack.pop() {
        let inputs = node.op().inputs();
        if idx < inputs.len() {
            let child = inputs[idx].clone();
            stack.push((node, idx + 1));
            if child.requires_grad() && seen.insert(child.id()) {
                stack.push((child, 0));
            }
        } else {
            order.push(node);
        }
    }
    order
}

fn add_into(grads: &mut HashMap<usize, Vec<f64>>, target: &Tensor, update: &[f64]) {
    if !target.requires_grad() {
        return;
    }
    let slot = grads.entry(target.id()).or_insert_with(|| vec![0.0; target.len()]);
    for (s, u) in slot.iter_mut().zip(update) {
        *s += u;
    }
}

fn apply_vjp(node: &Tensor, g: &[f64], grads: &mut HashMap<usize, Vec<f64>>) {
    match node.op() {
        Op::Leaf => {}
        Op::Matmul { a, b } => {
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            if a.requires_grad() {
                let bv = b.values();
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for j in 0..n {
                        let gij = g[i * n + j];
                        if gij == 0.0 {
                            continue;
                        }
                        for p in 0..k {
                            da[i * k + p] += gij * bv[p * n + j];
                        }
                    }
                }
                drop(bv);
                add_into(grads, a, &da);
            }
            if b.requires_grad() {
                let av = a.values();
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    for p in 0..k {
                        let aip = av[i * k + p];
                        if aip == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            db[p * n + j] += aip * g[i * n + j];
                        }
                    }
                }
                drop(av);
                add_into(grads, b, &db);
            }
        }
        Op::Transpose { x } => {
            let (r, c) = (x.shape()[0], x.shape()[1]);
            let mut dx = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    dx[i * c + j] = g[j * r + i];
                }
            }
            add_into(grads, x, &dx);
        }
        Op::Add { a, b } => {
            add_into(grads, a, g);
            add_into(grads, b, g);
        }
        Op::Sub { a, b } => {
            add_into(grads, a, g);
            let neg: Vec<f64> = g.iter().map(|v| -v).collect();
            add_into(grads, b, &neg);
        }
        Op::Mul { a, b } => {
            if a.requires_grad() {
                let bv = b.values();
                let da: Vec<f64> = g.iter().zip(bv.iter()).map(|(g, b)| g * b).collect();
                drop(bv);
                add_into(grads, a, &da);
            }
            if b.requires_grad() {
                let av = a.values();
                let db: Vec<f64> = g.iter().zip(av.iter()).map(|(g, a)| g * a).collect();
                drop(av);
                add_into(grads, b, &db);
            }
        }
        Op::Relu { x } => {
            let xv = x.values();
            let dx: Vec<f64> =
                g.iter().zip(xv.iter()).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect();
            drop(xv);
            add_into(grads, x, &dx);
        }
        Op::Exp { x } => {
            let out = node.values();
            let dx: Vec<f64> = g.iter().zip(out.iter()).map(|(g, y)| g * y).collect();
            drop(out);
            add_into(grads, x, &dx);
        }
        Op::Log { x } => {
            let xv = x.values();
            let dx: Vec<f64> = g.iter().zip(xv.iter()).map(|(g, x)| g / (x + LOG_EPS)).collect();
            drop(xv);
            add_into(grads, x, &dx);
        }
        Op::Neg { x } => {
            let dx: Vec<f64> = g.iter().map(|v| -v).collect();
            add_into(grads, x, &dx);
        }
        Op::Scale { x, factor } => {
            let dx: Vec<f64> = g.iter().map(|v| factor * v).collect();
            add_into(grads, x, &dx);
        }
        Op::Sigmoid { x } => {
            let out = node.values();
            let dx: Vec<f64> =
                g.iter().zip(out.iter()).map(|(g, s)| g * s * (1.0 - s)).collect();
            drop(out);
            add_into(grads, x, &dx);
        }
        Op::SoftmaxRows { x } => {
            let (n, k) = (node.shape()[0], node.shape()[1]);
            let y = node.values();
            let mut dx = vec![0.0; n * k];
            for i in 0..n {
                let yrow = &y[i * k..(i + 1) * k];
                let grow = &g[i * k..(i + 1) * k];
                let dot: f64 = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
                for j in 0..k {
                    dx[i * k + j] = yrow[j] * (grow[j] - dot);
                }
            }
            drop(y);
            add_into(grads, x, &dx);
        }
        Op::Sum { x } => {
            let dx = vec![g[0]; x.len()];
            add_into(grads, x, &dx);
        }
        Op::GatherRows { x, indices } => {
            let k = x.shape()[1];
            let mut dx = vec![0.0; x.len()];
            for (i, &j) in indices.iter().enumerate() {
                dx[i * k + j] += g[i];
            }
            add_into(grads, x, &dx);
        }
        Op::AddRowBias { x, bias } => {
            add_into(grads, x, g);
            if bias.requires_grad() {
                let (n, d) = (x.shape()[0], x.shape()[1]);
                let mut db = vec![0.0; d];
                for i in 0..n {
                    for j in 0..d {
                        db[j] += g[i * d + j];
                    }
                }
                add_into(grads, bias, &db);
            }
        }
        Op::ConcatRows { parts } => {
            let mut offset = 0;
            for p in parts {
                let len = p.len();
                add_into(grads, p, &g[offset..offset + len]);
                offset += len;
            }
        }
        Op::ConcatCols { a, b } => {
            let (n, da) = (a.shape()[0], a.shape()[1]);
            let db = b.shape()[1];
            let width = da + db;
            if a.requires_grad() {
                let mut ga = vec![0.0; n * da];
                for i in 0..n {
                    ga[i * da..(i + 1) * da].copy_from_slice(&g[i * width..i * width + da]);
                }
                add_into(grads, a, &ga);
            }
            if b.requires_grad() {
                let mut gb = vec![0.0; n * db];
                for i in 0..n {
                    gb[i * db..(i + 1) * db]
                        .copy_from_slice(&g[i * width + da..(i + 1) * width]);
                }
                add_into(grads, b, &gb);
            }
        }
        Op::OuterRows { a, b } => {
            let (n, da) = (a.shape()[0], a.shape()[1]);
            let db = b.shape()[1];
            if a.requires_grad() {
                let bv = b.values();
                let mut ga = vec![0.0; n * da];
                for i in 0..n {
                    for p in 0..da {
                        let mut acc = 0.0;
                        for q in 0..db {
                            acc += g[i * da * db + p * db + q] * bv[i * db + q];
                        }
                        ga[i * da + p] = acc;
                    }
                }
                drop(bv);
                add_into(grads, a, &ga);
            }
            if b.requires_grad() {
                let av = a.values();
                let mut gb = vec![0.0; n * db];
                for i in 0..n {
                    for q in 0..db {
                        let mut acc = 0.0;
                        for p in 0..da {
                            acc += g[i * da * db + p * db + q] * av[i * da + p];
                        }
                        gb[i * db + q] = acc;
                    }
                }
                drop(av);
                add_into(grads, b, &gb);
            }
        }
        Op::GradReverse { x, coeff } => {
            let dx: Vec<f64> = g.iter().map(|v| -coeff * v).collect();
            add_into(grads, x, &dx);
        }
    }
}
