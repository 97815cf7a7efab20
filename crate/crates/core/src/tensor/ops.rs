//! Forward definitions for every graph operation.
//!
//! Each op validates shapes, computes the result eagerly, and records itself
//! so the backward pass in `autograd.rs` can replay it. Binary elementwise
//! ops require exactly equal shapes; the only implicit expansion anywhere is
//! `add_row_bias`.

use super::{Op, Result, Tensor, TensorError, LOG_EPS};

impl Tensor {
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.rows_cols("matmul")?;
        let (k2, n) = other.rows_cols("matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let a = self.values();
        let b = other.values();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = a[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += aip * brow[j];
                }
            }
        }
        drop(a);
        drop(b);
        let rg = self.requires_grad() || other.requires_grad();
        Tensor::from_op(vec![m, n], out, rg, Op::Matmul { a: self.clone(), b: other.clone() })
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.rows_cols("transpose")?;
        let x = self.values();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        drop(x);
        Tensor::from_op(vec![c, r], out, self.requires_grad(), Op::Transpose { x: self.clone() })
    }

    fn binary(
        &self,
        other: &Tensor,
        op_name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(TensorError::ShapeMismatch {
                op: op_name,
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let out = {
            let a = self.values();
            let b = other.values();
            a.iter().zip(b.iter()).map(|(x, y)| f(*x, *y)).collect()
        };
        let rg = self.requires_grad() || other.requires_grad();
        Tensor::from_op(self.shape().to_vec(), out, rg, op)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "add", |x, y| x + y, Op::Add { a: self.clone(), b: other.clone() })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "sub", |x, y| x - y, Op::Sub { a: self.clone(), b: other.clone() })
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "mul", |x, y| x * y, Op::Mul { a: self.clone(), b: other.clone() })
    }

    fn unary(&self, f: impl Fn(f64) -> f64, op: Op) -> Result<Tensor> {
        let out = self.values().iter().map(|x| f(*x)).collect();
        Tensor::from_op(self.shape().to_vec(), out, self.requires_grad(), op)
    }

    pub fn relu(&self) -> Result<Tensor> {
        self.unary(|x| if x > 0.0 { x } else { 0.0 }, Op::Relu { x: self.clone() })
    }

    pub fn exp(&self) -> Result<Tensor> {
        self.unary(f64::exp, Op::Exp { x: self.clone() })
    }

    /// Guarded natural log: computes `ln(x + LOG_EPS)` and rejects inputs at
    /// or below `-LOG_EPS`.
    pub fn log(&self) -> Result<Tensor> {
        if let Some(min) = self.values().iter().copied().fold(None, |m: Option<f64>, v| {
            Some(m.map_or(v, |m| m.min(v)))
        }) {
            if min <= -LOG_EPS {
                return Err(TensorError::LogDomain { min, eps: LOG_EPS });
            }
        }
        self.unary(|x| (x + LOG_EPS).ln(), Op::Log { x: self.clone() })
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.unary(|x| -x, Op::Neg { x: self.clone() })
    }

    pub fn scale(&self, factor: f64) -> Result<Tensor> {
        self.unary(|x| factor * x, Op::Scale { x: self.clone(), factor })
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        self.unary(
            |x| {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            },
            Op::Sigmoid { x: self.clone() },
        )
    }

    /// Row-wise softmax with max subtraction; rows sum to 1.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let (n, k) = self.rows_cols("softmax_rows")?;
        if k == 0 {
            return Err(TensorError::Rank {
                op: "softmax_rows",
                expected: "at least one column",
                shape: self.shape().to_vec(),
            });
        }
        let x = self.values();
        let mut out = vec![0.0; n * k];
        for i in 0..n {
            let row = &x[i * k..(i + 1) * k];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..k {
                let e = (row[j] - max).exp();
                out[i * k + j] = e;
                z += e;
            }
            for j in 0..k {
                out[i * k + j] /= z;
            }
        }
        drop(x);
        Tensor::from_op(vec![n, k], out, self.requires_grad(), Op::SoftmaxRows { x: self.clone() })
    }

    /// Sum of all entries, as a `[1]` tensor. Empty tensors sum to 0.
    pub fn sum(&self) -> Result<Tensor> {
        let total = self.values().iter().sum();
        Tensor::from_op(vec![1], vec![total], self.requires_grad(), Op::Sum { x: self.clone() })
    }

    /// Picks `x[i, indices[i]]` from a `[n, k]` tensor into a `[n]` tensor.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor> {
        let (n, k) = self.rows_cols("gather_rows")?;
        if indices.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "gather_rows",
                lhs: self.shape().to_vec(),
                rhs: vec![indices.len()],
            });
        }
        let x = self.values();
        let mut out = Vec::with_capacity(n);
        for (i, &j) in indices.iter().enumerate() {
            if j >= k {
                return Err(TensorError::IndexOutOfRange { op: "gather_rows", index: j, bound: k });
            }
            out.push(x[i * k + j]);
        }
        drop(x);
        Tensor::from_op(
            vec![n],
            out,
            self.requires_grad(),
            Op::GatherRows { x: self.clone(), indices: indices.to_vec() },
        )
    }

    /// Adds a `[d]` bias to every row of a `[n, d]` tensor.
    pub fn add_row_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let (n, d) = self.rows_cols("add_row_bias")?;
        if bias.shape() != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "add_row_bias",
                lhs: self.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        let x = self.values();
        let b = bias.values();
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            for j in 0..d {
                out[i * d + j] = x[i * d + j] + b[j];
            }
        }
        drop(x);
        drop(b);
        let rg = self.requires_grad() || bias.requires_grad();
        Tensor::from_op(vec![n, d], out, rg, Op::AddRowBias { x: self.clone(), bias: bias.clone() })
    }

    /// Stacks 2-d tensors with equal column counts on top of each other.
    pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
        assert!(!parts.is_empty(), "concat_rows needs at least one part");
        let (_, d) = parts[0].rows_cols("concat_rows")?;
        let mut n = 0;
        let mut values = Vec::new();
        for p in parts {
            let (pn, pd) = p.rows_cols("concat_rows")?;
            if pd != d {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: parts[0].shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            n += pn;
            values.extend_from_slice(&p.values());
        }
        let rg = parts.iter().any(Tensor::requires_grad);
        Tensor::from_op(vec![n, d], values, rg, Op::ConcatRows { parts: parts.to_vec() })
    }

    /// Joins two 2-d tensors side by side; row counts must match.
    pub fn concat_cols(&self, other: &Tensor) -> Result<Tensor> {
        let (n, da) = self.rows_cols("concat_cols")?;
        let (n2, db) = other.rows_cols("concat_cols")?;
        if n != n2 {
            return Err(TensorError::ShapeMismatch {
                op: "concat_cols",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let a = self.values();
        let b = other.values();
        let mut out = Vec::with_capacity(n * (da + db));
        for i in 0..n {
            out.extend_from_slice(&a[i * da..(i + 1) * da]);
            out.extend_from_slice(&b[i * db..(i + 1) * db]);
        }
        drop(a);
        drop(b);
        let rg = self.requires_grad() || other.requires_grad();
        Tensor::from_op(
            vec![n, da + db],
            out,
            rg,
            Op::ConcatCols { a: self.clone(), b: other.clone() },
        )
    }

    /// Row-wise flattened outer product: row `i` of the result holds
    /// `a[i, p] * b[i, q]` at index `p * db + q`.
    pub fn outer_rows(&self, other: &Tensor) -> Result<Tensor> {
        let (n, da) = self.rows_cols("outer_rows")?;
        let (n2, db) = other.rows_cols("outer_rows")?;
        if n != n2 {
            return Err(TensorError::ShapeMismatch {
                op: "outer_rows",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let a = self.values();
        let b = other.values();
        let mut out = vec![0.0; n * da * db];
        for i in 0..n {
            for p in 0..da {
                let ap = a[i * da + p];
                for q in 0..db {
                    out[i * da * db + p * db + q] = ap * b[i * db + q];
                }
            }
        }
        drop(a);
        drop(b);
        let rg = self.requires_grad() || other.requires_grad();
        Tensor::from_op(
            vec![n, da * db],
            out,
            rg,
            Op::OuterRows { a: self.clone(), b: other.clone() },
        )
    }

    /// Identity forward; backward multiplies the incoming gradient by
    /// `-coeff`. Realizes a min-max objective in a single backward pass.
    pub fn grad_reverse(&self, coeff: f64) -> Result<Tensor> {
        Tensor::from_op(
            self.shape().to_vec(),
            self.to_vec(),
            self.requires_grad(),
            Op::GradReverse { x: self.clone(), coeff },
        )
    }

    /// Mean of all entries; an empty tensor has mean 0.
    pub fn mean_all(&self) -> Result<Tensor> {
        if self.is_empty() {
            return Ok(Tensor::scalar(0.0));
        }
        self.sum()?.scale(1.0 / self.len() as f64)
    }
}
