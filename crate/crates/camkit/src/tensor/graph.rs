//! Operation tape with reverse-mode differentiation.
//!
//! A [`Graph`] records one step's worth of operations; [`Graph::backward`]
//! walks the tape in exact reverse order and accumulates gradients into a
//! map keyed by [`ParamId`]. Every op validates shapes up front and checks
//! its output for NaN/Inf so non-finite values surface as errors instead of
//! propagating silently.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::ops;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Globally unique identifier of a trainable parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub u64);

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

/// A named, trainable tensor. The value is replaced (not mutated) by the
/// optimizer between steps; graphs hold cheap clones of the buffer.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub id: ParamId,
    pub name: String,
    pub value: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        Param {
            id: ParamId(NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed)),
            name: name.into(),
            value,
        }
    }
}

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Padding mode for [`Graph::conv2d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// No padding; output shrinks by k-1 per axis.
    Valid,
    /// Zero padding of (k-1)/2 on each side; requires odd k. Preserves the
    /// spatial extent at stride 1.
    Same,
}

/// Gradients for leaf parameters, keyed by [`ParamId`]. BTreeMap so the
/// optimizer walks parameters in a fixed order.
pub type GradMap<T> = BTreeMap<ParamId, Tensor<T>>;

enum Op<T> {
    Leaf {
        param: Option<ParamId>,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        stride: usize,
        pad: usize,
    },
    Depthwise {
        x: usize,
        f: usize,
        stride: usize,
    },
    ChannelMean {
        x: usize,
    },
    AdaptiveAvgPool {
        x: usize,
        out_h: usize,
        out_w: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        x: usize,
        c: T,
    },
    AddChannelBias {
        x: usize,
        bias: usize,
    },
    Gelu {
        x: usize,
    },
    SpatialNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        eps: T,
        /// Frozen (mean, var) per channel for eval mode; None = batch stats.
        frozen: Option<(Tensor<T>, Tensor<T>)>,
        /// Batch stats computed at forward time (train mode), kept for backward.
        batch: Option<(Vec<T>, Vec<T>)>,
    },
    Affine {
        w: usize,
        x: usize,
        b: usize,
    },
    Reshape {
        x: usize,
    },
    ConcatAxis1 {
        parts: Vec<usize>,
    },
    WeightedSum {
        items: Vec<usize>,
        weights: usize,
    },
    StackRows {
        rows: Vec<usize>,
    },
    RowNormalize {
        x: usize,
        norms: Vec<T>,
    },
    PairwiseSqdist {
        a: usize,
        b: usize,
    },
    MatmulNT {
        a: usize,
        b: usize,
    },
    SoftmaxXentRows {
        logits: usize,
        targets: Vec<usize>,
        exclude_diagonal: bool,
        /// Row-wise probabilities cached at forward time.
        probs: Vec<T>,
    },
    Sum {
        x: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Operation tape. Create one per training step (or per loss evaluation),
/// record leaves and ops, then call [`Graph::backward`] once.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool, opname: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: opname });
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Record a constant input (no gradient).
    pub fn input(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Leaf { param: None }, false, "input")
    }

    /// Record a trainable parameter leaf.
    pub fn param(&mut self, p: &Param<T>) -> Result<Var> {
        self.push(
            p.value.clone(),
            Op::Leaf {
                param: Some(p.id),
            },
            true,
            "param",
        )
    }

    /// Record a leaf tensor that receives a gradient under the given id.
    /// Used by gradient checks that differentiate w.r.t. arbitrary tensors.
    pub fn leaf_with_grad(&mut self, id: ParamId, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Leaf { param: Some(id) }, true, "leaf")
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: Padding) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 4 || xs[0] != ws[1] {
            return Err(Error::Dimension {
                op: "conv2d",
                lhs: xs,
                rhs: ws,
            });
        }
        let k = ws[2];
        if ws[3] != k {
            return Err(Error::Dimension {
                op: "conv2d (non-square kernel)",
                lhs: ws.clone(),
                rhs: ws,
            });
        }
        if stride == 0 {
            return Err(Error::contract("conv2d: stride must be >= 1"));
        }
        let pad = match padding {
            Padding::Valid => 0,
            Padding::Same => {
                if k % 2 == 0 {
                    return Err(Error::contract("same padding requires an odd kernel"));
                }
                (k - 1) / 2
            }
        };
        if xs[1] + 2 * pad < k || xs[2] + 2 * pad < k {
            return Err(Error::Dimension {
                op: "conv2d (kernel larger than input)",
                lhs: xs,
                rhs: ws,
            });
        }
        if let Some(b) = b {
            let bs = self.shape(b);
            if bs != [ws[0]] {
                return Err(Error::Dimension {
                    op: "conv2d bias",
                    lhs: bs.to_vec(),
                    rhs: vec![ws[0]],
                });
            }
        }
        let out = ops::conv2d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
        );
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(
            out,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
                stride,
                pad,
            },
            needs,
            "conv2d",
        )
    }

    pub fn depthwise_conv2d(&mut self, x: Var, f: Var, stride: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let fs = self.shape(f).to_vec();
        if xs.len() != 3 || fs.len() != 4 || fs[0] != xs[0] || fs[1] != 1 || fs[2] != fs[3] {
            return Err(Error::Dimension {
                op: "depthwise_conv2d",
                lhs: xs,
                rhs: fs,
            });
        }
        if stride == 0 {
            return Err(Error::contract("depthwise_conv2d: stride must be >= 1"));
        }
        if xs[1] < fs[2] || xs[2] < fs[2] {
            return Err(Error::Dimension {
                op: "depthwise_conv2d (kernel larger than input)",
                lhs: xs,
                rhs: fs,
            });
        }
        let out = ops::depthwise_forward(self.value(x), self.value(f), stride);
        let needs = self.needs(x) || self.needs(f);
        self.push(
            out,
            Op::Depthwise {
                x: x.0,
                f: f.0,
                stride,
            },
            needs,
            "depthwise_conv2d",
        )
    }

    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || xs[0] == 0 {
            return Err(Error::contract(format!(
                "channel_mean: need non-empty [C,H,W], got {xs:?}"
            )));
        }
        let out = ops::channel_mean_forward(self.value(x));
        let needs = self.needs(x);
        self.push(out, Op::ChannelMean { x: x.0 }, needs, "channel_mean")
    }

    pub fn adaptive_avg_pool(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || out_h == 0 || out_w == 0 || out_h > xs[1] || out_w > xs[2] {
            return Err(Error::Dimension {
                op: "adaptive_avg_pool",
                lhs: xs,
                rhs: vec![out_h, out_w],
            });
        }
        let out = ops::adaptive_avg_pool_forward(self.value(x), out_h, out_w);
        let needs = self.needs(x);
        self.push(
            out,
            Op::AdaptiveAvgPool {
                x: x.0,
                out_h,
                out_w,
            },
            needs,
            "adaptive_avg_pool",
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Add { a: a.0, b: b.0 }, needs, "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension {
                op: "mul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Mul { a: a.0, b: b.0 }, needs, "mul")
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let out = self.value(x).map(|v| v * c);
        let needs = self.needs(x);
        self.push(out, Op::Scale { x: x.0, c }, needs, "scale")
    }

    /// Broadcast-add a per-channel bias [C] onto a [C,H,W] map.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let bs = self.shape(bias).to_vec();
        if xs.len() != 3 || bs != [xs[0]] {
            return Err(Error::Dimension {
                op: "add_channel_bias",
                lhs: xs,
                rhs: bs,
            });
        }
        let hw = xs[1] * xs[2];
        let xv = self.value(x).clone();
        let bv = self.value(bias).clone();
        let mut data = Vec::with_capacity(xv.numel());
        for (ch, chunk) in xv.data().chunks(hw).enumerate() {
            let b = bv.data()[ch];
            data.extend(chunk.iter().map(|&v| v + b));
        }
        let out = Tensor::new(xs.clone(), data)?;
        let needs = self.needs(x) || self.needs(bias);
        self.push(
            out,
            Op::AddChannelBias {
                x: x.0,
                bias: bias.0,
            },
            needs,
            "add_channel_bias",
        )
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(ops::gelu);
        let needs = self.needs(x);
        self.push(out, Op::Gelu { x: x.0 }, needs, "gelu")
    }

    /// Per-channel spatial normalization with affine scale/shift.
    ///
    /// `frozen = None` normalizes by the tensor's own per-channel statistics
    /// (training mode); `frozen = Some((mean, var))` uses the provided frozen
    /// statistics (eval mode).
    pub fn spatial_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
        frozen: Option<(Tensor<T>, Tensor<T>)>,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let c = xs[0];
        if xs.len() != 3 || self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::Dimension {
                op: "spatial_norm",
                lhs: xs,
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let (means, vars) = match &frozen {
            Some((m, v)) => (m.data().to_vec(), v.data().to_vec()),
            None => ops::spatial_stats(self.value(x)),
        };
        let hw = xs[1] * xs[2];
        let xv = self.value(x).clone();
        let gv = self.value(gamma).clone();
        let bv = self.value(beta).clone();
        let mut data = Vec::with_capacity(xv.numel());
        for (ch, chunk) in xv.data().chunks(hw).enumerate() {
            let inv_s = T::ONE / (vars[ch] + eps).sqrt();
            let g = gv.data()[ch];
            let b = bv.data()[ch];
            let m = means[ch];
            data.extend(chunk.iter().map(|&v| g * (v - m) * inv_s + b));
        }
        let out = Tensor::new(xs.clone(), data)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let batch = if frozen.is_none() {
            Some((means, vars))
        } else {
            None
        };
        self.push(
            out,
            Op::SpatialNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                eps,
                frozen,
                batch,
            },
            needs,
            "spatial_norm",
        )
    }

    /// y = W x + b for a vector x: W is [m,n], x is [n], b is [m].
    pub fn affine(&mut self, w: Var, x: Var, b: Var) -> Result<Var> {
        let ws = self.shape(w).to_vec();
        let xs = self.shape(x).to_vec();
        if ws.len() != 2 || xs != [ws[1]] || self.shape(b) != [ws[0]] {
            return Err(Error::Dimension {
                op: "affine",
                lhs: ws,
                rhs: xs,
            });
        }
        let (m, n) = (ws[0], ws[1]);
        let wv = self.value(w).clone();
        let xv = self.value(x).clone();
        let bv = self.value(b).clone();
        let out = Tensor::from_fn(&[m], |i| {
            let mut acc = bv.data()[i];
            for j in 0..n {
                acc += wv.data()[i * n + j] * xv.data()[j];
            }
            acc
        });
        let needs = self.needs(w) || self.needs(x) || self.needs(b);
        self.push(
            out,
            Op::Affine {
                w: w.0,
                x: x.0,
                b: b.0,
            },
            needs,
            "affine",
        )
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).reshaped(shape)?;
        let needs = self.needs(x);
        self.push(out, Op::Reshape { x: x.0 }, needs, "reshape")
    }

    /// Concatenate rank-4 tensors [O,Ci,k,k] along axis 1.
    pub fn concat_axis1(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat_axis1: no parts"));
        }
        let first = self.shape(parts[0]).to_vec();
        if first.len() != 4 {
            return Err(Error::contract(format!(
                "concat_axis1: expected rank-4 parts, got {first:?}"
            )));
        }
        let (o, k) = (first[0], first[2]);
        let mut total_c = 0;
        for &p in parts {
            let s = self.shape(p);
            if s[0] != o || s[2] != k || s[3] != first[3] {
                return Err(Error::Dimension {
                    op: "concat_axis1",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            total_c += s[1];
        }
        let kk = k * first[3];
        let mut data = vec![T::ZERO; o * total_c * kk];
        for oi in 0..o {
            let mut coff = 0;
            for &p in parts {
                let pc = self.shape(p)[1];
                let pv = self.value(p);
                for ci in 0..pc {
                    let src = (oi * pc + ci) * kk;
                    let dst = (oi * total_c + coff + ci) * kk;
                    data[dst..dst + kk].copy_from_slice(&pv.data()[src..src + kk]);
                }
                coff += pc;
            }
        }
        let out = Tensor::new(vec![o, total_c, k, first[3]], data)?;
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(
            out,
            Op::ConcatAxis1 {
                parts: parts.iter().map(|p| p.0).collect(),
            },
            needs,
            "concat_axis1",
        )
    }

    /// sum_t weights[t] * items[t]; all items share one shape, weights is [T].
    pub fn weighted_sum(&mut self, items: &[Var], weights: Var) -> Result<Var> {
        if items.is_empty() {
            return Err(Error::contract("weighted_sum: no items"));
        }
        let ws = self.shape(weights).to_vec();
        if ws != [items.len()] {
            return Err(Error::Dimension {
                op: "weighted_sum",
                lhs: ws,
                rhs: vec![items.len()],
            });
        }
        let shape = self.shape(items[0]).to_vec();
        for &it in items {
            if self.shape(it) != shape {
                return Err(Error::Dimension {
                    op: "weighted_sum",
                    lhs: shape,
                    rhs: self.shape(it).to_vec(),
                });
            }
        }
        let numel: usize = shape.iter().product();
        let mut data = vec![T::ZERO; numel];
        for (t, &it) in items.iter().enumerate() {
            let wv = self.value(weights).data()[t];
            let iv = self.value(it).clone();
            for (d, &v) in data.iter_mut().zip(iv.data()) {
                *d += wv * v;
            }
        }
        let out = Tensor::new(shape, data)?;
        let needs = self.needs(weights) || items.iter().any(|&p| self.needs(p));
        self.push(
            out,
            Op::WeightedSum {
                items: items.iter().map(|p| p.0).collect(),
                weights: weights.0,
            },
            needs,
            "weighted_sum",
        )
    }

    /// Stack N vectors of length d into an [N,d] matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        if rows.is_empty() {
            return Err(Error::contract("stack_rows: no rows"));
        }
        let d = {
            let s = self.shape(rows[0]);
            if s.len() != 1 {
                return Err(Error::contract(format!(
                    "stack_rows: expected vectors, got {s:?}"
                )));
            }
            s[0]
        };
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if self.shape(r) != [d] {
                return Err(Error::Dimension {
                    op: "stack_rows",
                    lhs: vec![d],
                    rhs: self.shape(r).to_vec(),
                });
            }
            data.extend_from_slice(self.value(r).data());
        }
        let out = Tensor::new(vec![rows.len(), d], data)?;
        let needs = rows.iter().any(|&p| self.needs(p));
        self.push(
            out,
            Op::StackRows {
                rows: rows.iter().map(|p| p.0).collect(),
            },
            needs,
            "stack_rows",
        )
    }

    /// L2-normalize each row of an [N,d] matrix. Zero-norm rows are an error.
    pub fn row_normalize(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(Error::contract(format!(
                "row_normalize: expected [N,d], got {xs:?}"
            )));
        }
        let (n, d) = (xs[0], xs[1]);
        let xv = self.value(x).clone();
        let mut norms = vec![T::ZERO; n];
        let mut data = vec![T::ZERO; n * d];
        for i in 0..n {
            let row = &xv.data()[i * d..(i + 1) * d];
            let mut acc = T::ZERO;
            for &v in row {
                acc += v * v;
            }
            let norm = acc.sqrt();
            if norm.to_f64() == 0.0 {
                return Err(Error::ZeroNorm {
                    op: "row_normalize",
                    detail: format!("row {i}"),
                });
            }
            norms[i] = norm;
            for j in 0..d {
                data[i * d + j] = row[j] / norm;
            }
        }
        let out = Tensor::new(xs, data)?;
        let needs = self.needs(x);
        self.push(out, Op::RowNormalize { x: x.0, norms }, needs, "row_normalize")
    }

    /// Squared Euclidean distance between every row pair: [N,d] x [K,d] -> [N,K].
    pub fn pairwise_sqdist(&mut self, a: Var, b: Var) -> Result<Var> {
        let as_ = self.shape(a).to_vec();
        let bs = self.shape(b).to_vec();
        if as_.len() != 2 || bs.len() != 2 || as_[1] != bs[1] {
            return Err(Error::Dimension {
                op: "pairwise_sqdist",
                lhs: as_,
                rhs: bs,
            });
        }
        let (n, d, k) = (as_[0], as_[1], bs[0]);
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let out = Tensor::from_fn(&[n, k], |i| {
            let (r, c) = (i / k, i % k);
            let mut acc = T::ZERO;
            for j in 0..d {
                let diff = av.data()[r * d + j] - bv.data()[c * d + j];
                acc += diff * diff;
            }
            acc
        });
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::PairwiseSqdist { a: a.0, b: b.0 }, needs, "pairwise_sqdist")
    }

    /// A · B^T for row-major [N,d] and [M,d] -> [N,M].
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let as_ = self.shape(a).to_vec();
        let bs = self.shape(b).to_vec();
        if as_.len() != 2 || bs.len() != 2 || as_[1] != bs[1] {
            return Err(Error::Dimension {
                op: "matmul_nt",
                lhs: as_,
                rhs: bs,
            });
        }
        let (n, d, m) = (as_[0], as_[1], bs[0]);
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let out = Tensor::from_fn(&[n, m], |i| {
            let (r, c) = (i / m, i % m);
            let mut acc = T::ZERO;
            for j in 0..d {
                acc += av.data()[r * d + j] * bv.data()[c * d + j];
            }
            acc
        });
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::MatmulNT { a: a.0, b: b.0 }, needs, "matmul_nt")
    }

    /// Mean over rows of -log softmax(row)[target], with optional exclusion
    /// of the diagonal entry (row i ignores column i). Log-sum-exp is
    /// stabilized by max subtraction.
    pub fn softmax_xent_rows(
        &mut self,
        logits: Var,
        targets: &[usize],
        exclude_diagonal: bool,
    ) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 || targets.len() != ls[0] {
            return Err(Error::Dimension {
                op: "softmax_xent_rows",
                lhs: ls,
                rhs: vec![targets.len()],
            });
        }
        let (n, k) = (ls[0], ls[1]);
        for (i, &t) in targets.iter().enumerate() {
            if t >= k {
                return Err(Error::Index(format!(
                    "softmax_xent_rows: target {t} out of range 0..{k} at row {i}"
                )));
            }
            if exclude_diagonal && t == i {
                return Err(Error::Index(format!(
                    "softmax_xent_rows: target of row {i} is its excluded diagonal"
                )));
            }
        }
        let lv = self.value(logits).clone();
        let mut probs = vec![T::ZERO; n * k];
        let mut total = T::ZERO;
        for i in 0..n {
            let row = &lv.data()[i * k..(i + 1) * k];
            let mut maxv: Option<T> = None;
            for (j, &v) in row.iter().enumerate() {
                if exclude_diagonal && j == i {
                    continue;
                }
                maxv = Some(match maxv {
                    None => v,
                    Some(m) => m.max_val(v),
                });
            }
            let m = maxv.ok_or_else(|| Error::contract("softmax_xent_rows: empty row"))?;
            let mut denom = T::ZERO;
            for (j, &v) in row.iter().enumerate() {
                if exclude_diagonal && j == i {
                    continue;
                }
                denom += (v - m).exp();
            }
            let log_denom = denom.ln();
            for (j, &v) in row.iter().enumerate() {
                if exclude_diagonal && j == i {
                    probs[i * k + j] = T::ZERO;
                } else {
                    probs[i * k + j] = ((v - m) - log_denom).exp();
                }
            }
            let logp_t = (row[targets[i]] - m) - log_denom;
            total += -logp_t;
        }
        let loss = total / T::from_f64(n as f64);
        let needs = self.needs(logits);
        self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXentRows {
                logits: logits.0,
                targets: targets.to_vec(),
                exclude_diagonal,
                probs,
            },
            needs,
            "softmax_xent_rows",
        )
    }

    /// Batch statistics (mean, var) recorded by a training-mode
    /// [`Graph::spatial_norm`] node, for running-statistic updates.
    pub fn norm_batch_stats(&self, v: Var) -> Option<(&[T], &[T])> {
        match &self.nodes[v.0].op {
            Op::SpatialNorm {
                batch: Some((m, va)),
                ..
            } => Some((m, va)),
            _ => None,
        }
    }

    /// Sum of all elements -> scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let mut acc = T::ZERO;
        for &v in self.value(x).data() {
            acc += v;
        }
        let needs = self.needs(x);
        self.push(Tensor::scalar(acc), Op::Sum { x: x.0 }, needs, "sum")
    }

    /// Reverse pass from a scalar loss. Returns gradients for every leaf
    /// recorded with a parameter id; gradients from multiple uses accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<GradMap<T>> {
        if self.consumed {
            return Err(Error::StaleGraph);
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::ONE]);

        for i in (0..n).rev() {
            if grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let g = grads[i].take().unwrap();
            self.backprop_node(i, &g, &mut grads);
        }

        let mut map: GradMap<T> = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(id) } = node.op {
                if let Some(g) = grads[i].take() {
                    map.insert(id, Tensor::new(node.value.shape().to_vec(), g)?);
                }
            }
        }
        Ok(map)
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], target: usize, delta: &[T]) {
        if !self.nodes[target].needs_grad {
            return;
        }
        match &mut grads[target] {
            Some(buf) => {
                for (b, &d) in buf.iter_mut().zip(delta) {
                    *b += d;
                }
            }
            slot => {
                *slot = Some(delta.to_vec());
            }
        }
    }

    fn accumulate_owned(&self, grads: &mut [Option<Vec<T>>], target: usize, delta: Vec<T>) {
        if !self.nodes[target].needs_grad {
            return;
        }
        match &mut grads[target] {
            Some(buf) => {
                for (b, d) in buf.iter_mut().zip(delta) {
                    *b += d;
                }
            }
            slot => {
                *slot = Some(delta);
            }
        }
    }

    #[allow(clippy::too_many_lines)]
    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &self.nodes[i].op {
            Op::Leaf { .. } => {
                // re-store the taken gradient so leaf collection sees it
                self.accumulate(grads, i, g);
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let (gx, gw, gb) = ops::conv2d_backward(
                    &self.nodes[*x].value,
                    &self.nodes[*w].value,
                    g,
                    *stride,
                    *pad,
                    self.nodes[*x].needs_grad,
                    self.nodes[*w].needs_grad,
                    b.map(|b| self.nodes[b].needs_grad).unwrap_or(false),
                );
                if let Some(gx) = gx {
                    self.accumulate_owned(grads, *x, gx);
                }
                if let Some(gw) = gw {
                    self.accumulate_owned(grads, *w, gw);
                }
                if let (Some(gb), Some(b)) = (gb, b) {
                    self.accumulate_owned(grads, *b, gb);
                }
            }
            Op::Depthwise { x, f, stride } => {
                let (gx, gf) = ops::depthwise_backward(
                    &self.nodes[*x].value,
                    &self.nodes[*f].value,
                    g,
                    *stride,
                    self.nodes[*x].needs_grad,
                    self.nodes[*f].needs_grad,
                );
                if let Some(gx) = gx {
                    self.accumulate_owned(grads, *x, gx);
                }
                if let Some(gf) = gf {
                    self.accumulate_owned(grads, *f, gf);
                }
            }
            Op::ChannelMean { x } => {
                let xs = self.nodes[*x].value.shape();
                let (c, hw) = (xs[0], xs[1] * xs[2]);
                let inv = T::from_f64(1.0 / c as f64);
                let mut gx = vec![T::ZERO; c * hw];
                for ch in 0..c {
                    for p in 0..hw {
                        gx[ch * hw + p] = g[p] * inv;
                    }
                }
                self.accumulate_owned(grads, *x, gx);
            }
            Op::AdaptiveAvgPool { x, out_h, out_w } => {
                let gx = ops::adaptive_avg_pool_backward(
                    self.nodes[*x].value.shape(),
                    g,
                    *out_h,
                    *out_w,
                );
                self.accumulate_owned(grads, *x, gx);
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g);
                self.accumulate(grads, *b, g);
            }
            Op::Mul { a, b } => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                if self.nodes[*a].needs_grad {
                    let ga: Vec<T> = g.iter().zip(bv.data()).map(|(&g, &b)| g * b).collect();
                    self.accumulate_owned(grads, *a, ga);
                }
                if self.nodes[*b].needs_grad {
                    let gb: Vec<T> = g.iter().zip(av.data()).map(|(&g, &a)| g * a).collect();
                    self.accumulate_owned(grads, *b, gb);
                }
            }
            Op::Scale { x, c } => {
                let gx: Vec<T> = g.iter().map(|&g| g * *c).collect();
                self.accumulate_owned(grads, *x, gx);
            }
            Op::AddChannelBias { x, bias } => {
                self.accumulate(grads, *x, g);
                if self.nodes[*bias].needs_grad {
                    let xs = self.nodes[*x].value.shape();
                    let (c, hw) = (xs[0], xs[1] * xs[2]);
                    let mut gb = vec![T::ZERO; c];
                    for ch in 0..c {
                        let mut acc = T::ZERO;
                        for p in 0..hw {
                            acc += g[ch * hw + p];
                        }
                        gb[ch] = acc;
                    }
                    self.accumulate_owned(grads, *bias, gb);
                }
            }
            Op::Gelu { x } => {
                let xv = &self.nodes[*x].value;
                let gx: Vec<T> = g
                    .iter()
                    .zip(xv.data())
                    .map(|(&g, &x)| g * ops::gelu_prime(x))
                    .collect();
                self.accumulate_owned(grads, *x, gx);
            }
            Op::SpatialNorm {
                x,
                gamma,
                beta,
                eps,
                frozen,
                batch,
            } => {
                let xv = &self.nodes[*x].value;
                let xs = xv.shape();
                let (c, hw) = (xs[0], xs[1] * xs[2]);
                let gv = &self.nodes[*gamma].value;
                let (means, vars): (&[T], &[T]) = match (frozen, batch) {
                    (Some((m, v)), _) => (m.data(), v.data()),
                    (None, Some((m, v))) => (m, v),
                    _ => unreachable!("spatial_norm node without stats"),
                };
                let n_inv = T::from_f64(1.0 / hw as f64);
                let mut gx = vec![T::ZERO; c * hw];
                let mut ggamma = vec![T::ZERO; c];
                let mut gbeta = vec![T::ZERO; c];
                for ch in 0..c {
                    let s = (vars[ch] + *eps).sqrt();
                    let mut sum_g = T::ZERO;
                    let mut sum_gx = T::ZERO;
                    for p in 0..hw {
                        let xhat = (xv.data()[ch * hw + p] - means[ch]) / s;
                        let gi = g[ch * hw + p];
                        sum_g += gi;
                        sum_gx += gi * xhat;
                    }
                    ggamma[ch] = sum_gx;
                    gbeta[ch] = sum_g;
                    let scale = gv.data()[ch] / s;
                    if frozen.is_some() {
                        // frozen stats: d out / d x is a plain affine map
                        for p in 0..hw {
                            gx[ch * hw + p] = g[ch * hw + p] * scale;
                        }
                    } else {
                        let mean_g = sum_g * n_inv;
                        let mean_gx = sum_gx * n_inv;
                        for p in 0..hw {
                            let xhat = (xv.data()[ch * hw + p] - means[ch]) / s;
                            gx[ch * hw + p] =
                                scale * (g[ch * hw + p] - mean_g - xhat * mean_gx);
                        }
                    }
                }
                self.accumulate_owned(grads, *x, gx);
                self.accumulate_owned(grads, *gamma, ggamma);
                self.accumulate_owned(grads, *beta, gbeta);
            }
            Op::Affine { w, x, b } => {
                let wv = &self.nodes[*w].value;
                let xv = &self.nodes[*x].value;
                let (m, n) = (wv.shape()[0], wv.shape()[1]);
                if self.nodes[*w].needs_grad {
                    let mut gw = vec![T::ZERO; m * n];
                    for i2 in 0..m {
                        for j in 0..n {
                            gw[i2 * n + j] = g[i2] * xv.data()[j];
                        }
                    }
                    self.accumulate_owned(grads, *w, gw);
                }
                if self.nodes[*x].needs_grad {
                    let mut gx = vec![T::ZERO; n];
                    for j in 0..n {
                        let mut acc = T::ZERO;
                        for i2 in 0..m {
                            acc += wv.data()[i2 * n + j] * g[i2];
                        }
                        gx[j] = acc;
                    }
                    self.accumulate_owned(grads, *x, gx);
                }
                self.accumulate(grads, *b, g);
            }
            Op::Reshape { x } => {
                self.accumulate(grads, *x, g);
            }
            Op::ConcatAxis1 { parts } => {
                let out_shape = self.nodes[i].value.shape();
                let (o, total_c) = (out_shape[0], out_shape[1]);
                let kk = out_shape[2] * out_shape[3];
                let mut coff = 0;
                for &p in parts {
                    let pc = self.nodes[p].value.shape()[1];
                    if self.nodes[p].needs_grad {
                        let mut gp = vec![T::ZERO; o * pc * kk];
                        for oi in 0..o {
                            for ci in 0..pc {
                                let src = (oi * total_c + coff + ci) * kk;
                                let dst = (oi * pc + ci) * kk;
                                gp[dst..dst + kk].copy_from_slice(&g[src..src + kk]);
                            }
                        }
                        self.accumulate_owned(grads, p, gp);
                    }
                    coff += pc;
                }
            }
            Op::WeightedSum { items, weights } => {
                let wv = &self.nodes[*weights].value;
                for (t, &it) in items.iter().enumerate() {
                    if self.nodes[it].needs_grad {
                        let wt = wv.data()[t];
                        let gi: Vec<T> = g.iter().map(|&g| g * wt).collect();
                        self.accumulate_owned(grads, it, gi);
                    }
                }
                if self.nodes[*weights].needs_grad {
                    let mut gw = vec![T::ZERO; items.len()];
                    for (t, &it) in items.iter().enumerate() {
                        let iv = &self.nodes[it].value;
                        let mut acc = T::ZERO;
                        for (p, &v) in iv.data().iter().enumerate() {
                            acc += g[p] * v;
                        }
                        gw[t] = acc;
                    }
                    self.accumulate_owned(grads, *weights, gw);
                }
            }
            Op::StackRows { rows } => {
                let d = self.nodes[rows[0]].value.numel();
                for (r, &row) in rows.iter().enumerate() {
                    self.accumulate(grads, row, &g[r * d..(r + 1) * d]);
                }
            }
            Op::RowNormalize { x, norms } => {
                let yv = &self.nodes[i].value;
                let (n, d) = (yv.shape()[0], yv.shape()[1]);
                let mut gx = vec![T::ZERO; n * d];
                for r in 0..n {
                    let y = &yv.data()[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let mut dot = T::ZERO;
                    for j in 0..d {
                        dot += gr[j] * y[j];
                    }
                    for j in 0..d {
                        gx[r * d + j] = (gr[j] - dot * y[j]) / norms[r];
                    }
                }
                self.accumulate_owned(grads, *x, gx);
            }
            Op::PairwiseSqdist { a, b } => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                let (n, d) = (av.shape()[0], av.shape()[1]);
                let k = bv.shape()[0];
                let two = T::from_f64(2.0);
                if self.nodes[*a].needs_grad {
                    let mut ga = vec![T::ZERO; n * d];
                    for r in 0..n {
                        for c in 0..k {
                            let gv = g[r * k + c] * two;
                            for j in 0..d {
                                ga[r * d + j] += gv * (av.data()[r * d + j] - bv.data()[c * d + j]);
                            }
                        }
                    }
                    self.accumulate_owned(grads, *a, ga);
                }
                if self.nodes[*b].needs_grad {
                    let mut gb = vec![T::ZERO; k * d];
                    for r in 0..n {
                        for c in 0..k {
                            let gv = g[r * k + c] * two;
                            for j in 0..d {
                                gb[c * d + j] += gv * (bv.data()[c * d + j] - av.data()[r * d + j]);
                            }
                        }
                    }
                    self.accumulate_owned(grads, *b, gb);
                }
            }
            Op::MatmulNT { a, b } => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                let (n, d) = (av.shape()[0], av.shape()[1]);
                let m = bv.shape()[0];
                if self.nodes[*a].needs_grad {
                    // gA = G . B  ([n,m] . [m,d])
                    let mut ga = vec![T::ZERO; n * d];
                    T::gemm(n, m, d, T::ONE, g, bv.data(), T::ZERO, &mut ga);
                    self.accumulate_owned(grads, *a, ga);
                }
                if self.nodes[*b].needs_grad {
                    // gB[c,j] = sum_r G[r,c] * A[r,j]
                    let mut gb = vec![T::ZERO; m * d];
                    for r in 0..n {
                        for c in 0..m {
                            let gv = g[r * m + c];
                            for j in 0..d {
                                gb[c * d + j] += gv * av.data()[r * d + j];
                            }
                        }
                    }
                    self.accumulate_owned(grads, *b, gb);
                }
            }
            Op::SoftmaxXentRows {
                logits,
                targets,
                exclude_diagonal,
                probs,
            } => {
                if self.nodes[*logits].needs_grad {
                    let ls = self.nodes[*logits].value.shape();
                    let (n, k) = (ls[0], ls[1]);
                    let scale = g[0] / T::from_f64(n as f64);
                    let mut gl = vec![T::ZERO; n * k];
                    for r in 0..n {
                        for c in 0..k {
                            if *exclude_diagonal && c == r {
                                continue;
                            }
                            let indicator = if targets[r] == c { T::ONE } else { T::ZERO };
                            gl[r * k + c] = (probs[r * k + c] - indicator) * scale;
                        }
                    }
                    self.accumulate_owned(grads, *logits, gl);
                }
            }
            Op::Sum { x } => {
                let n = self.nodes[*x].value.numel();
                let gx = vec![g[0]; n];
                self.accumulate_owned(grads, *x, gx);
            }
        }
    }
}
