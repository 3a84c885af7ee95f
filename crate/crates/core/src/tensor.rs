//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! The graph is define-by-run: every forward pass builds a fresh [`Graph`]
//! whose nodes are appended in topological order, so a reverse walk over
//! the node list is a valid backward schedule. Values are checked for
//! finiteness as they are produced; a NaN or Inf is an error, never a
//! silent value.
//!
//! Matrix products (dense layers, im2col'd convolutions) go through one
//! f64 GEMM so the engine stays usable for minutes-scale CPU training.

use crate::error::{Error, Result};

/// Row-major n-dimensional f64 array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!("zero extent in shape {shape:?}")));
        }
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} implies {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::Validation(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Clamp {
        a: usize,
        lo: f64,
        hi: f64,
    },
    Sign(usize),
    Exp(usize),
    Log(usize),
    Silu(usize),
    Sum(usize),
    Mean(usize),
    Reshape(usize),
    Affine {
        x: usize,
        w: usize,
        b: usize,
    },
    Conv2d {
        x: usize,
        k: usize,
        stride: usize,
        padding: usize,
        col: Vec<f64>,
    },
    /// Row-wise log-softmax, shape [B,K].
    LogSoftmax {
        a: usize,
        probs: Vec<f64>,
    },
    /// Per-example cross entropy against soft labels, shape [B].
    CrossEntropy {
        logits: usize,
        labels: usize,
        probs: Vec<f64>,
    },
    /// Per-example KL(softmax(p) || softmax(q)), shape [B].
    KlDiv {
        p: usize,
        q: usize,
        lp: Vec<f64>,
        lq: Vec<f64>,
    },
    /// Per-example KL(labels || softmax(z)), shape [B]. Gradient flows to
    /// the logits only; label entries equal to zero contribute nothing.
    KlFromLabels {
        logits: usize,
        labels: usize,
        probs: Vec<f64>,
    },
    /// Per-example margin z_y - max_{i != y} z_i, shape [B].
    Margin {
        logits: usize,
        labels: Vec<usize>,
        competitor: Vec<usize>,
    },
    /// Per-example z[pos] - z[neg], shape [B].
    LogitDiff {
        logits: usize,
        pos: Vec<usize>,
        neg: Vec<usize>,
    },
}

struct Node {
    op: Op,
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

/// Define-by-run computation graph. Nodes are appended after their
/// parents, so index order is a topological order.
pub struct Graph {
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn ensure_finite(data: &[f64], ctx: &str) -> Result<()> {
    for &v in data {
        if !v.is_finite() {
            return Err(Error::Numerical(format!("non-finite value in {ctx}")));
        }
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log-softmax of one row, written into `out` (log-sum-exp stabilized).
fn log_softmax_row(row: &[f64], out: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
    for (o, &z) in out.iter_mut().zip(row) {
        *o = z - lse;
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            grad: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient buffer of a node, if any backward pass has reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Zero every allocated gradient buffer.
    pub fn clear_grads(&mut self) {
        for n in &mut self.nodes {
            if let Some(g) = &mut n.grad {
                g.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Result<Var> {
        ensure_finite(t.data(), "leaf")?;
        Ok(self.push(Op::Leaf, t, requires_grad))
    }

    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.leaf(t, false)
    }

    // ---- elementwise ----

    fn binary_shapes(&self, a: Var, b: Var, op: &str) -> Result<bool> {
        let sa = self.value(a).shape();
        let sb = self.value(b).shape();
        if sa == sb {
            Ok(false)
        } else if self.value(b).numel() == 1 {
            Ok(true) // broadcast scalar b
        } else {
            Err(Error::Dimension(format!("{op}: shapes {sa:?} vs {sb:?}")))
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let scalar_b = self.binary_shapes(a, b, "add")?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = if scalar_b {
            let s = bv.data()[0];
            av.data().iter().map(|x| x + s).collect()
        } else {
            av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect()
        };
        let t = Tensor::new(av.shape().to_vec(), data)?;
        ensure_finite(t.data(), "add")?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Add(a.0, b.0), t, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let scalar_b = self.binary_shapes(a, b, "sub")?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = if scalar_b {
            let s = bv.data()[0];
            av.data().iter().map(|x| x - s).collect()
        } else {
            av.data().iter().zip(bv.data()).map(|(x, y)| x - y).collect()
        };
        let t = Tensor::new(av.shape().to_vec(), data)?;
        ensure_finite(t.data(), "sub")?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Sub(a.0, b.0), t, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let scalar_b = self.binary_shapes(a, b, "mul")?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = if scalar_b {
            let s = bv.data()[0];
            av.data().iter().map(|x| x * s).collect()
        } else {
            av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect()
        };
        let t = Tensor::new(av.shape().to_vec(), data)?;
        ensure_finite(t.data(), "mul")?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Mul(a.0, b.0), t, rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let av = self.value(a);
        let t = Tensor::new(av.shape().to_vec(), av.data().iter().map(|x| x * c).collect())?;
        ensure_finite(t.data(), "scale")?;
        let rg = self.rg(a);
        Ok(self.push(Op::Scale(a.0, c), t, rg))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let av = self.value(a);
        let t = Tensor::new(av.shape().to_vec(), av.data().iter().map(|x| x + c).collect())?;
        ensure_finite(t.data(), "add_scalar")?;
        let rg = self.rg(a);
        Ok(self.push(Op::AddScalar(a.0), t, rg))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(Error::Validation(format!("clamp bounds {lo} > {hi}")));
        }
        let av = self.value(a);
        let t = Tensor::new(
            av.shape().to_vec(),
            av.data().iter().map(|x| x.clamp(lo, hi)).collect(),
        )?;
        let rg = self.rg(a);
        Ok(self.push(Op::Clamp { a: a.0, lo, hi }, t, rg))
    }

    /// sign(x) with sign(0) = 0. Gradient is zero everywhere.
    pub fn sign(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .map(|&x| {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            })
            .collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(Op::Sign(a.0), t, rg))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let t = Tensor::new(av.shape().to_vec(), av.data().iter().map(|x| x.exp()).collect())?;
        ensure_finite(t.data(), "exp")?;
        let rg = self.rg(a);
        Ok(self.push(Op::Exp(a.0), t, rg))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.data().iter().any(|&x| x <= 0.0) {
            return Err(Error::Domain("log of non-positive value".into()));
        }
        let t = Tensor::new(av.shape().to_vec(), av.data().iter().map(|x| x.ln()).collect())?;
        ensure_finite(t.data(), "log")?;
        let rg = self.rg(a);
        Ok(self.push(Op::Log(a.0), t, rg))
    }

    /// x * sigmoid(x)
    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let t = Tensor::new(
            av.shape().to_vec(),
            av.data().iter().map(|&x| x * sigmoid(x)).collect(),
        )?;
        ensure_finite(t.data(), "silu")?;
        let rg = self.rg(a);
        Ok(self.push(Op::Silu(a.0), t, rg))
    }

    // ---- reductions / shape ----

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().sum();
        ensure_finite(&[s], "sum")?;
        let rg = self.rg(a);
        Ok(self.push(Op::Sum(a.0), Tensor::scalar(s), rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel() as f64;
        let s: f64 = self.value(a).data().iter().sum::<f64>() / n;
        ensure_finite(&[s], "mean")?;
        let rg = self.rg(a);
        Ok(self.push(Op::Mean(a.0), Tensor::scalar(s), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let av = self.value(a);
        if shape.iter().product::<usize>() != av.numel() {
            return Err(Error::Dimension(format!(
                "reshape {:?} -> {shape:?}",
                av.shape()
            )));
        }
        let t = Tensor::new(shape, av.data().to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(Op::Reshape(a.0), t, rg))
    }

    // ---- linear algebra ----

    /// y = x.w + b with x:[B,I], w:[I,O], b:[O].
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (
            self.value(x).shape().to_vec(),
            self.value(w).shape().to_vec(),
            self.value(b).shape().to_vec(),
        );
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[0] || ws[1] != bs[0] {
            return Err(Error::Dimension(format!(
                "affine: x {xs:?}, w {ws:?}, b {bs:?}"
            )));
        }
        let (bsz, i, o) = (xs[0], xs[1], ws[1]);
        let mut out = vec![0.0; bsz * o];
        gemm(
            bsz,
            i,
            o,
            self.value(x).data(),
            i as isize,
            1,
            self.value(w).data(),
            o as isize,
            1,
            0.0,
            &mut out,
        );
        let bias = self.value(b).data();
        for row in out.chunks_mut(o) {
            for (v, &bv) in row.iter_mut().zip(bias) {
                *v += bv;
            }
        }
        ensure_finite(&out, "affine")?;
        let t = Tensor::new(vec![bsz, o], out)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(
            Op::Affine {
                x: x.0,
                w: w.0,
                b: b.0,
            },
            t,
            rg,
        ))
    }

    /// 2-D cross correlation: x:[B,C,H,W], k:[F,C,kh,kw]. Output extents
    /// must divide exactly: H' = (H + 2*padding - kh)/stride + 1.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, padding: usize) -> Result<Var> {
        if stride == 0 {
            return Err(Error::Validation("conv2d stride must be >= 1".into()));
        }
        let xs = self.value(x).shape().to_vec();
        let ks = self.value(k).shape().to_vec();
        if xs.len() != 4 || ks.len() != 4 {
            return Err(Error::Dimension(format!("conv2d: x {xs:?}, k {ks:?}")));
        }
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (f, kc, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
        if kc != c {
            return Err(Error::Dimension(format!(
                "conv2d: input has {c} channels, kernel expects {kc}"
            )));
        }
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::Dimension(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input"
            )));
        }
        let (oh, ow) = (
            conv_extent(h, kh, stride, padding)?,
            conv_extent(w, kw, stride, padding)?,
        );
        let ckk = c * kh * kw;
        let rows = b * oh * ow;
        let mut col = vec![0.0; rows * ckk];
        im2col(
            self.value(x).data(),
            b,
            c,
            h,
            w,
            kh,
            kw,
            stride,
            padding,
            oh,
            ow,
            &mut col,
        );
        // out_flat[row, f] = col[row, :] . kernel[f, :]
        let mut out_flat = vec![0.0; rows * f];
        gemm(
            rows,
            ckk,
            f,
            &col,
            ckk as isize,
            1,
            self.value(k).data(),
            1,
            ckk as isize,
            0.0,
            &mut out_flat,
        );
        let mut out = vec![0.0; b * f * oh * ow];
        for bi in 0..b {
            for fi in 0..f {
                for oyx in 0..oh * ow {
                    out[((bi * f + fi) * oh * ow) + oyx] = out_flat[(bi * oh * ow + oyx) * f + fi];
                }
            }
        }
        ensure_finite(&out, "conv2d")?;
        let t = Tensor::new(vec![b, f, oh, ow], out)?;
        let rg = self.rg(x) || self.rg(k);
        Ok(self.push(
            Op::Conv2d {
                x: x.0,
                k: k.0,
                stride,
                padding,
                col,
            },
            t,
            rg,
        ))
    }

    /// Row-wise log-softmax of a [B,K] tensor.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.value(a).shape().to_vec();
        if shape.len() != 2 {
            return Err(Error::Dimension(format!("log_softmax: shape {shape:?}")));
        }
        let (b, k) = (shape[0], shape[1]);
        let mut out = vec![0.0; b * k];
        for i in 0..b {
            log_softmax_row(
                &self.value(a).data()[i * k..(i + 1) * k],
                &mut out[i * k..(i + 1) * k],
            );
        }
        ensure_finite(&out, "log_softmax")?;
        let probs: Vec<f64> = out.iter().map(|l| l.exp()).collect();
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(a);
        Ok(self.push(Op::LogSoftmax { a: a.0, probs }, t, rg))
    }

    // ---- losses ----

    fn check_label_rows(labels: &Tensor) -> Result<()> {
        let k = labels.shape()[1];
        for row in labels.data().chunks(k) {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-6 || row.iter().any(|&v| v < 0.0) {
                return Err(Error::Validation(
                    "soft-label row is not a probability distribution".into(),
                ));
            }
        }
        Ok(())
    }

    /// Per-example cross entropy against soft labels: [B,K] x [B,K] -> [B].
    pub fn cross_entropy_per_example(&mut self, logits: Var, labels: Var) -> Result<Var> {
        let ls = self.value(logits).shape().to_vec();
        if ls.len() != 2 || self.value(labels).shape() != ls.as_slice() {
            return Err(Error::Dimension(format!(
                "cross entropy: logits {ls:?} vs labels {:?}",
                self.value(labels).shape()
            )));
        }
        Self::check_label_rows(self.value(labels))?;
        let (b, k) = (ls[0], ls[1]);
        let mut probs = vec![0.0; b * k];
        let mut out = vec![0.0; b];
        let mut lsm = vec![0.0; k];
        for i in 0..b {
            let z = &self.value(logits).data()[i * k..(i + 1) * k];
            let y = &self.value(labels).data()[i * k..(i + 1) * k];
            log_softmax_row(z, &mut lsm);
            out[i] = -lsm.iter().zip(y).map(|(&l, &yv)| yv * l).sum::<f64>();
            for j in 0..k {
                probs[i * k + j] = lsm[j].exp();
            }
        }
        ensure_finite(&out, "cross_entropy")?;
        let t = Tensor::new(vec![b], out)?;
        let rg = self.rg(logits);
        Ok(self.push(
            Op::CrossEntropy {
                logits: logits.0,
                labels: labels.0,
                probs,
            },
            t,
            rg,
        ))
    }

    /// Mean over the batch of per-example cross entropy.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: Var) -> Result<Var> {
        let per = self.cross_entropy_per_example(logits, labels)?;
        self.mean(per)
    }

    /// Per-example KL(softmax(p) || softmax(q)): [B,K] x [B,K] -> [B].
    pub fn kl_per_example(&mut self, p: Var, q: Var) -> Result<Var> {
        let ps = self.value(p).shape().to_vec();
        if ps.len() != 2 || self.value(q).shape() != ps.as_slice() {
            return Err(Error::Dimension(format!(
                "kl: p {ps:?} vs q {:?}",
                self.value(q).shape()
            )));
        }
        let (b, k) = (ps[0], ps[1]);
        let mut lp = vec![0.0; b * k];
        let mut lq = vec![0.0; b * k];
        let mut out = vec![0.0; b];
        for i in 0..b {
            log_softmax_row(
                &self.value(p).data()[i * k..(i + 1) * k],
                &mut lp[i * k..(i + 1) * k],
            );
            log_softmax_row(
                &self.value(q).data()[i * k..(i + 1) * k],
                &mut lq[i * k..(i + 1) * k],
            );
            out[i] = (0..k)
                .map(|j| lp[i * k + j].exp() * (lp[i * k + j] - lq[i * k + j]))
                .sum();
        }
        ensure_finite(&out, "kl_divergence")?;
        let t = Tensor::new(vec![b], out)?;
        let rg = self.rg(p) || self.rg(q);
        Ok(self.push(Op::KlDiv { p: p.0, q: q.0, lp, lq }, t, rg))
    }

    /// Mean over the batch of per-example KL(softmax(p) || softmax(q)).
    pub fn kl_divergence(&mut self, p: Var, q: Var) -> Result<Var> {
        let per = self.kl_per_example(p, q)?;
        self.mean(per)
    }

    /// Per-example KL(labels || softmax(z)); labels is a distribution per
    /// row. Zero label entries contribute zero by convention.
    pub fn kl_from_labels_per_example(&mut self, logits: Var, labels: Var) -> Result<Var> {
        let ls = self.value(logits).shape().to_vec();
        if ls.len() != 2 || self.value(labels).shape() != ls.as_slice() {
            return Err(Error::Dimension(format!(
                "kl_from_labels: logits {ls:?} vs labels {:?}",
                self.value(labels).shape()
            )));
        }
        Self::check_label_rows(self.value(labels))?;
        let (b, k) = (ls[0], ls[1]);
        let mut probs = vec![0.0; b * k];
        let mut out = vec![0.0; b];
        let mut lsm = vec![0.0; k];
        for i in 0..b {
            let z = &self.value(logits).data()[i * k..(i + 1) * k];
            let y = &self.value(labels).data()[i * k..(i + 1) * k];
            log_softmax_row(z, &mut lsm);
            let mut v = 0.0;
            for j in 0..k {
                probs[i * k + j] = lsm[j].exp();
                if y[j] > 0.0 {
                    v += y[j] * (y[j].ln() - lsm[j]);
                }
            }
            out[i] = v;
        }
        ensure_finite(&out, "kl_from_labels")?;
        let t = Tensor::new(vec![b], out)?;
        let rg = self.rg(logits);
        Ok(self.push(
            Op::KlFromLabels {
                logits: logits.0,
                labels: labels.0,
                probs,
            },
            t,
            rg,
        ))
    }

    /// Per-example margin z_y - max_{i != y} z_i. Negative iff the argmax
    /// prediction differs from the label. The max competitor backpropagates
    /// to a single element, lowest index on ties.
    pub fn margin_loss(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.value(logits).shape().to_vec();
        if ls.len() != 2 {
            return Err(Error::Dimension(format!("margin: logits {ls:?}")));
        }
        let (b, k) = (ls[0], ls[1]);
        if k < 2 {
            return Err(Error::Validation("margin needs at least 2 classes".into()));
        }
        if labels.len() != b {
            return Err(Error::Validation(format!(
                "margin: {b} examples, {} labels",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::Validation(format!(
                "margin: label {bad} out of range for {k} classes"
            )));
        }
        let mut out = vec![0.0; b];
        let mut competitor = vec![0usize; b];
        for i in 0..b {
            let z = &self.value(logits).data()[i * k..(i + 1) * k];
            let y = labels[i];
            let mut best = usize::MAX;
            for j in 0..k {
                if j != y && (best == usize::MAX || z[j] > z[best]) {
                    best = j;
                }
            }
            competitor[i] = best;
            out[i] = z[y] - z[best];
        }
        let t = Tensor::new(vec![b], out)?;
        let rg = self.rg(logits);
        Ok(self.push(
            Op::Margin {
                logits: logits.0,
                labels: labels.to_vec(),
                competitor,
            },
            t,
            rg,
        ))
    }

    /// Per-example z[pos] - z[neg] (targeted-attack objective).
    pub fn logit_diff(&mut self, logits: Var, pos: &[usize], neg: &[usize]) -> Result<Var> {
        let ls = self.value(logits).shape().to_vec();
        if ls.len() != 2 {
            return Err(Error::Dimension(format!("logit_diff: logits {ls:?}")));
        }
        let (b, k) = (ls[0], ls[1]);
        if pos.len() != b || neg.len() != b {
            return Err(Error::Validation("logit_diff: index length mismatch".into()));
        }
        if pos.iter().chain(neg).any(|&j| j >= k) {
            return Err(Error::Validation("logit_diff: class index out of range".into()));
        }
        let mut out = vec![0.0; b];
        for i in 0..b {
            let z = &self.value(logits).data()[i * k..(i + 1) * k];
            out[i] = z[pos[i]] - z[neg[i]];
        }
        let t = Tensor::new(vec![b], out)?;
        let rg = self.rg(logits);
        Ok(self.push(
            Op::LogitDiff {
                logits: logits.0,
                pos: pos.to_vec(),
                neg: neg.to_vec(),
            },
            t,
            rg,
        ))
    }

    // ---- backward ----

    /// Populate gradients of every requires_grad node reachable from
    /// `root` with d(root)/d(node). Repeated calls without `clear_grads`
    /// accumulate.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(Error::Validation(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                adj[i] = None;
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj);
            let numel = self.nodes[i].value.numel();
            let grad = self.nodes[i].grad.get_or_insert_with(|| vec![0.0; numel]);
            for (acc, gv) in grad.iter_mut().zip(&g) {
                *acc += gv;
            }
            ensure_finite(grad, "backward")?;
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let acc = |adj: &mut [Option<Vec<f64>>], parent: usize, contrib: &dyn Fn(&mut [f64])| {
            if !self.nodes[parent].requires_grad {
                return;
            }
            let buf = adj[parent]
                .get_or_insert_with(|| vec![0.0; self.nodes[parent].value.numel()]);
            contrib(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Sign(a) => {
                // sign has zero gradient everywhere; nothing flows to the parent
                let _ = *a;
            }
            Op::Add(a, b) => {
                acc(adj, *a, &|buf| {
                    for (o, gv) in buf.iter_mut().zip(g) {
                        *o += gv;
                    }
                });
                let scalar_b = self.nodes[*b].value.numel() == 1 && g.len() != 1;
                acc(adj, *b, &|buf| {
                    if scalar_b {
                        buf[0] += g.iter().sum::<f64>();
                    } else {
                        for (o, gv) in buf.iter_mut().zip(g) {
                            *o += gv;
                        }
                    }
                });
            }
            Op::Sub(a, b) => {
                acc(adj, *a, &|buf| {
                    for (o, gv) in buf.iter_mut().zip(g) {
                        *o += gv;
                    }
                });
                let scalar_b = self.nodes[*b].value.numel() == 1 && g.len() != 1;
                acc(adj, *b, &|buf| {
                    if scalar_b {
                        buf[0] -= g.iter().sum::<f64>();
                    } else {
                        for (o, gv) in buf.iter_mut().zip(g) {
                            *o -= gv;
                        }
                    }
                });
            }
            Op::Mul(a, b) => {
                let av = self.nodes[*a].value.data();
                let bv = self.nodes[*b].value.data();
                let scalar_b = bv.len() == 1 && g.len() != 1;
                acc(adj, *a, &|buf| {
                    if scalar_b {
                        for (o, gv) in buf.iter_mut().zip(g) {
                            *o += gv * bv[0];
                        }
                    } else {
                        for ((o, gv), bvv) in buf.iter_mut().zip(g).zip(bv) {
                            *o += gv * bvv;
                        }
                    }
                });
                acc(adj, *b, &|buf| {
                    if scalar_b {
                        buf[0] += g.iter().zip(av).map(|(gv, avv)| gv * avv).sum::<f64>();
                    } else {
                        for ((o, gv), avv) in buf.iter_mut().zip(g).zip(av) {
                            *o += gv * avv;
                        }
                    }
                });
            }
            Op::Scale(a, c) => acc(adj, *a, &|buf| {
                for (o, gv) in buf.iter_mut().zip(g) {
                    *o += gv * c;
                }
            }),
            Op::AddScalar(a) | Op::Reshape(a) => acc(adj, *a, &|buf| {
                for (o, gv) in buf.iter_mut().zip(g) {
                    *o += gv;
                }
            }),
            Op::Clamp { a, lo, hi } => {
                let av = self.nodes[*a].value.data();
                acc(adj, *a, &|buf| {
                    for ((o, gv), &x) in buf.iter_mut().zip(g).zip(av) {
                        if x > *lo && x < *hi {
                            *o += gv;
                        }
                    }
                });
            }
            Op::Exp(a) => {
                let out = node.value.data();
                acc(adj, *a, &|buf| {
                    for ((o, gv), &e) in buf.iter_mut().zip(g).zip(out) {
                        *o += gv * e;
                    }
                });
            }
            Op::Log(a) => {
                let av = self.nodes[*a].value.data();
                acc(adj, *a, &|buf| {
                    for ((o, gv), &x) in buf.iter_mut().zip(g).zip(av) {
                        *o += gv / x;
                    }
                });
            }
            Op::Silu(a) => {
                let av = self.nodes[*a].value.data();
                acc(adj, *a, &|buf| {
                    for ((o, gv), &x) in buf.iter_mut().zip(g).zip(av) {
                        let s = sigmoid(x);
                        *o += gv * s * (1.0 + x * (1.0 - s));
                    }
                });
            }
            Op::Sum(a) => acc(adj, *a, &|buf| {
                for o in buf.iter_mut() {
                    *o += g[0];
                }
            }),
            Op::Mean(a) => {
                let n = self.nodes[*a].value.numel() as f64;
                acc(adj, *a, &|buf| {
                    for o in buf.iter_mut() {
                        *o += g[0] / n;
                    }
                });
            }
            Op::Affine { x, w, b } => {
                let xv = self.nodes[*x].value.data();
                let wv = self.nodes[*w].value.data();
                let (bsz, i_dim) = {
                    let s = self.nodes[*x].value.shape();
                    (s[0], s[1])
                };
                let o_dim = self.nodes[*w].value.shape()[1];
                acc(adj, *x, &|buf| {
                    // dx = g . w^T
                    gemm(bsz, o_dim, i_dim, g, o_dim as isize, 1, wv, 1, o_dim as isize, 1.0, buf);
                });
                acc(adj, *w, &|buf| {
                    // dw = x^T . g
                    gemm(i_dim, bsz, o_dim, xv, 1, i_dim as isize, g, o_dim as isize, 1, 1.0, buf);
                });
                acc(adj, *b, &|buf| {
                    for row in g.chunks(o_dim) {
                        for (o, gv) in buf.iter_mut().zip(row) {
                            *o += gv;
                        }
                    }
                });
            }
            Op::Conv2d {
                x,
                k,
                stride,
                padding,
                col,
            } => {
                let xs = self.nodes[*x].value.shape();
                let ks = self.nodes[*k].value.shape();
                let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let (f, _, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
                let os = node.value.shape();
                let (oh, ow) = (os[2], os[3]);
                let rows = b * oh * ow;
                let ckk = c * kh * kw;
                // gather upstream into [rows, f]
                let mut gf = vec![0.0; rows * f];
                for bi in 0..b {
                    for fi in 0..f {
                        for oyx in 0..oh * ow {
                            gf[(bi * oh * ow + oyx) * f + fi] =
                                g[(bi * f + fi) * oh * ow + oyx];
                        }
                    }
                }
                let kv = self.nodes[*k].value.data();
                acc(adj, *k, &|buf| {
                    // dk[f, ckk] = gf^T . col
                    gemm(f, rows, ckk, &gf, 1, f as isize, col, ckk as isize, 1, 1.0, buf);
                });
                acc(adj, *x, &|buf| {
                    let mut dcol = vec![0.0; rows * ckk];
                    gemm(rows, f, ckk, &gf, f as isize, 1, kv, ckk as isize, 1, 0.0, &mut dcol);
                    col2im(&dcol, b, c, h, w, kh, kw, *stride, *padding, oh, ow, buf);
                });
            }
            Op::LogSoftmax { a, probs } => {
                let k = self.nodes[*a].value.shape()[1];
                acc(adj, *a, &|buf| {
                    for (i, row) in g.chunks(k).enumerate() {
                        let gsum: f64 = row.iter().sum();
                        for (j, &gv) in row.iter().enumerate() {
                            buf[i * k + j] += gv - probs[i * k + j] * gsum;
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let yv = self.nodes[*labels].value.data();
                let k = self.nodes[*logits].value.shape()[1];
                acc(adj, *logits, &|buf| {
                    for (i, &gi) in g.iter().enumerate() {
                        for j in 0..k {
                            buf[i * k + j] += gi * (probs[i * k + j] - yv[i * k + j]);
                        }
                    }
                });
            }
            Op::KlFromLabels {
                logits,
                labels,
                probs,
            } => {
                let yv = self.nodes[*labels].value.data();
                let k = self.nodes[*logits].value.shape()[1];
                acc(adj, *logits, &|buf| {
                    for (i, &gi) in g.iter().enumerate() {
                        for j in 0..k {
                            buf[i * k + j] += gi * (probs[i * k + j] - yv[i * k + j]);
                        }
                    }
                });
            }
            Op::KlDiv { p, q, lp, lq } => {
                let k = self.nodes[*p].value.shape()[1];
                let vals = node.value.data();
                acc(adj, *p, &|buf| {
                    for (i, &gi) in g.iter().enumerate() {
                        for j in 0..k {
                            let sp = lp[i * k + j].exp();
                            buf[i * k + j] += gi * sp * ((lp[i * k + j] - lq[i * k + j]) - vals[i]);
                        }
                    }
                });
                acc(adj, *q, &|buf| {
                    for (i, &gi) in g.iter().enumerate() {
                        for j in 0..k {
                            let sp = lp[i * k + j].exp();
                            let sq = lq[i * k + j].exp();
                            buf[i * k + j] += gi * (sq - sp);
                        }
                    }
                });
            }
            Op::Margin {
                logits,
                labels,
                competitor,
            } => {
                let k = self.nodes[*logits].value.shape()[1];
                acc(adj, *logits, &|buf| {
                    for (i, &gi) in g.iter().enumerate() {
                        buf[i * k + labels[i]] += gi;
                        buf[i * k + competitor[i]] -= gi;
                    }
                });
            }
            Op::LogitDiff { logits, pos, neg } => {
                let k = self.nodes[*logits].value.shape()[1];
                acc(adj, *logits, &|buf| {
                    for (i, &gi) in g.iter().enumerate() {
                        buf[i * k + pos[i]] += gi;
                        buf[i * k + neg[i]] -= gi;
                    }
                });
            }
        }
    }
}

fn conv_extent(h: usize, kh: usize, stride: usize, padding: usize) -> Result<usize> {
    let span = h + 2 * padding - kh;
    if span % stride != 0 {
        return Err(Error::Dimension(format!(
            "conv2d: extent {h} (pad {padding}, kernel {kh}) not divisible by stride {stride}"
        )));
    }
    Ok(span / stride + 1)
}

/// Row-major-output GEMM: c[m,n] (+)= a[m,k] . b[k,n] with explicit
/// element strides for a and b so transposed views need no copies.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    col: &mut [f64],
) {
    let ckk = c * kh * kw;
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((bi * oh + oy) * ow + ox) * ckk;
                for ci in 0..c {
                    for ky in 0..kh {
                        let sy = (oy * stride + ky) as isize - pad as isize;
                        for kx in 0..kw {
                            let sx = (ox * stride + kx) as isize - pad as isize;
                            let v = if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                                x[((bi * c + ci) * h + sy as usize) * w + sx as usize]
                            } else {
                                0.0
                            };
                            col[row + (ci * kh + ky) * kw + kx] = v;
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    dcol: &[f64],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    dx: &mut [f64],
) {
    let ckk = c * kh * kw;
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((bi * oh + oy) * ow + ox) * ckk;
                for ci in 0..c {
                    for ky in 0..kh {
                        let sy = (oy * stride + ky) as isize - pad as isize;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let sx = (ox * stride + kx) as isize - pad as isize;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            dx[((bi * c + ci) * h + sy as usize) * w + sx as usize] +=
                                dcol[row + (ci * kh + ky) * kw + kx];
                        }
                    }
                }
            }
        }
    }
}

/// Central-difference gradient estimate of `f` at `params`, per tensor,
/// per coordinate. Independent of the graph machinery by construction.
pub fn finite_difference_gradient<F>(mut f: F, params: &[Tensor], h: f64) -> Result<Vec<Vec<f64>>>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    if h <= 0.0 {
        return Err(Error::Validation("finite differences need h > 0".into()));
    }
    let mut work: Vec<Tensor> = params.to_vec();
    let mut grads = Vec::with_capacity(params.len());
    for ti in 0..params.len() {
        let n = params[ti].numel();
        let mut g = vec![0.0; n];
        for j in 0..n {
            let orig = work[ti].data()[j];
            work[ti].data_mut()[j] = orig + h;
            let fp = f(&work)?;
            work[ti].data_mut()[j] = orig - h;
            let fm = f(&work)?;
            work[ti].data_mut()[j] = orig;
            g[j] = (fp - fm) / (2.0 * h);
        }
        grads.push(g);
    }
    Ok(grads)
}

/// Largest elementwise relative error between two gradient buffers.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / (x.abs().max(y.abs()) + 1e-6))
        .fold(0.0, f64::max)
}
