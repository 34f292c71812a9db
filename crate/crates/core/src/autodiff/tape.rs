use rand::Rng;

use super::kernels::{matmul_a_bt_acc, matmul_acc, matmul_at_b_acc};
use super::tensor::{numel, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Elementwise binary operations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    /// Gradient goes to the first operand on ties.
    Max,
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    batch: usize,
    height: usize,
    width: usize,
    c_in: usize,
    c_out: usize,
    kernel: usize,
    stride: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.c_in
    }

    fn positions(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Binary {
        op: BinaryOp,
        a: usize,
        b: usize,
        scalar_b: bool,
    },
    AddBias {
        x: usize,
        bias: usize,
        width: usize,
    },
    Relu {
        x: usize,
    },
    Scale {
        x: usize,
        factor: f64,
    },
    Softmax {
        x: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        d: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Dropout {
        x: usize,
        mask: Vec<f64>,
    },
    Conv2d {
        x: usize,
        kernel: usize,
        cols: Vec<f64>,
        geom: ConvGeom,
    },
    MaxPool2d {
        x: usize,
        argmax: Vec<usize>,
    },
    Reshape {
        x: usize,
    },
    Concat {
        a: usize,
        b: usize,
        wa: usize,
        wb: usize,
    },
    Narrow {
        x: usize,
        width: usize,
        start: usize,
        len: usize,
    },
    SwapLast2 {
        x: usize,
        batch: usize,
        m: usize,
        n: usize,
    },
    Sum {
        x: usize,
    },
    Mean {
        x: usize,
    },
    CrossEntropy {
        logits: usize,
        probs: Vec<f64>,
        labels: Vec<usize>,
        classes: usize,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Dynamic reverse-mode tape.
///
/// Operations append nodes in execution order, so the node list is always
/// topologically sorted. A tape is rebuilt for every forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

fn dim_err(msg: String) -> Error {
    Error::Dimension(msg)
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Records a tensor; it becomes a gradient leaf if it requires a gradient.
    pub fn leaf(&mut self, tensor: &Tensor) -> Var {
        self.push(
            tensor.shape().to_vec(),
            tensor.data().to_vec(),
            Op::Leaf,
            tensor.requires_grad(),
        )
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        let shape = tensor.shape().to_vec();
        self.push(shape, tensor.into_data(), Op::Leaf, false)
    }

    /// Records a parameter from `store` as a gradient leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let t = store.get(id);
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true);
        self.nodes[v.0].param = Some(id);
        v
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    /// Copy of a recorded value as a standalone tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(&n.shape, n.value.clone()).expect("recorded shapes are consistent")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    // ---------------------------------------------------------------- ops

    /// Matrix product. `a` may carry leading batch dimensions, which are
    /// folded into its row count; `b` must be a matrix.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(dim_err(format!("matmul of {sa:?} and {sb:?}")));
        }
        let k = sb[0];
        let n = sb[1];
        let m = numel(sa) / k;
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(shape, out, Op::MatMul { a: a.0, b: b.0, m, k, n }, rg))
    }

    /// Batched product of `[B, m, k]` and `[B, k, n]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(dim_err(format!("batch_matmul of {sa:?} and {sb:?}")));
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; batch * m * n];
        {
            let (va, vb) = (self.value(a), self.value(b));
            for i in 0..batch {
                matmul_acc(
                    &va[i * m * k..(i + 1) * m * k],
                    &vb[i * k * n..(i + 1) * k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(
            vec![batch, m, n],
            out,
            Op::BatchMatMul {
                a: a.0,
                b: b.0,
                batch,
                m,
                k,
                n,
            },
            rg,
        ))
    }

    /// Elementwise operation on equal shapes, or with a one-element `b`
    /// broadcast over `a`.
    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let scalar_b = numel(sb) == 1 && sa != sb;
        if sa != sb && !scalar_b {
            return Err(dim_err(format!("elementwise {op:?} of {sa:?} and {sb:?}")));
        }
        let shape = sa.to_vec();
        let va = self.value(a);
        let vb = self.value(b);
        let f = |x: f64, y: f64| match op {
            BinaryOp::Add => x + y,
            BinaryOp::Sub => x - y,
            BinaryOp::Mul => x * y,
            BinaryOp::Max => {
                if x >= y {
                    x
                } else {
                    y
                }
            }
        };
        let out: Vec<f64> = if scalar_b {
            va.iter().map(|&x| f(x, vb[0])).collect()
        } else {
            va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
        };
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(
            shape,
            out,
            Op::Binary {
                op,
                a: a.0,
                b: b.0,
                scalar_b,
            },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Max, a, b)
    }

    /// Adds a `[w]` bias to every row of `[..., w]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        let width = *sx.last().unwrap_or(&1);
        if sb.len() != 1 || sb[0] != width || sx.is_empty() {
            return Err(dim_err(format!("bias {sb:?} for input {sx:?}")));
        }
        let shape = sx.to_vec();
        let vb = self.value(bias);
        let out: Vec<f64> = self
            .value(x)
            .chunks_exact(width)
            .flat_map(|row| row.iter().zip(vb).map(|(r, b)| r + b))
            .collect();
        let rg = self.rg(&[x.0, bias.0]);
        Ok(self.push(
            shape,
            out,
            Op::AddBias {
                x: x.0,
                bias: bias.0,
                width,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let out = self.value(x).iter().map(|&v| v.max(0.0)).collect();
        let rg = self.rg(&[x.0]);
        self.push(shape, out, Op::Relu { x: x.0 }, rg)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let shape = self.shape(x).to_vec();
        let out = self.value(x).iter().map(|&v| v * factor).collect();
        let rg = self.rg(&[x.0]);
        self.push(shape, out, Op::Scale { x: x.0, factor }, rg)
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(dim_err(format!("softmax axis {axis} for shape {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let vx = self.value(x);
        let mut out = vec![0.0; vx.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| (o * len + l) * inner + i;
                let max = (0..len).map(|l| vx[idx(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for l in 0..len {
                    let e = (vx[idx(l)] - max).exp();
                    out[idx(l)] = e;
                    total += e;
                }
                for l in 0..len {
                    out[idx(l)] /= total;
                }
            }
        }
        let rg = self.rg(&[x.0]);
        Ok(self.push(
            shape,
            out,
            Op::Softmax {
                x: x.0,
                outer,
                len,
                inner,
            },
            rg,
        ))
    }

    /// Per-row normalization over the last dimension followed by `gain·x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| dim_err("layer_norm of a scalar".into()))?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(dim_err(format!(
                "layer_norm gain {:?} / bias {:?} for width {d}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        if eps <= 0.0 {
            return Err(Error::Parameter(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let vx = self.value(x);
        let (vg, vb) = (self.value(gain), self.value(bias));
        let rows = vx.len() / d;
        let mut xhat = vec![0.0; vx.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; vx.len()];
        for r in 0..rows {
            let row = &vx[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                let h = (row[c] - mean) * is;
                xhat[r * d + c] = h;
                out[r * d + c] = vg[c] * h + vb[c];
            }
        }
        let rg = self.rg(&[x.0, gain.0, bias.0]);
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                d,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Inverted dropout. With `rng == None` (inference) this is the identity
    /// and records nothing.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: Option<&mut R>) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Parameter(format!("dropout rate must be in [0, 1), got {rate}")));
        }
        let Some(rng) = rng else { return Ok(x) };
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let shape = self.shape(x).to_vec();
        let mask: Vec<f64> = (0..numel(&shape))
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let out = self.value(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let rg = self.rg(&[x.0]);
        Ok(self.push(shape, out, Op::Dropout { x: x.0, mask }, rg))
    }

    /// Valid cross-correlation of NHWC input `[b, h, w, c_in]` with a
    /// `[k, k, c_in, c_out]` kernel.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize) -> Result<Var> {
        let (sx, sk) = (self.shape(x), self.shape(kernel));
        if sx.len() != 4 || sk.len() != 4 || sk[0] != sk[1] || sk[2] != sx[3] {
            return Err(dim_err(format!("conv2d input {sx:?} with kernel {sk:?}")));
        }
        if stride == 0 {
            return Err(Error::Parameter("conv2d stride must be >= 1".into()));
        }
        let (batch, height, width, c_in) = (sx[0], sx[1], sx[2], sx[3]);
        let (k, c_out) = (sk[0], sk[3]);
        if height < k || width < k {
            return Err(dim_err(format!(
                "conv2d image {height}x{width} smaller than kernel {k}x{k}"
            )));
        }
        let geom = ConvGeom {
            batch,
            height,
            width,
            c_in,
            c_out,
            kernel: k,
            stride,
            out_h: (height - k) / stride + 1,
            out_w: (width - k) / stride + 1,
        };
        let cols = im2col(self.value(x), &geom);
        let mut out = vec![0.0; geom.positions() * c_out];
        matmul_acc(
            &cols,
            self.value(kernel),
            &mut out,
            geom.positions(),
            geom.patch_len(),
            c_out,
        );
        let rg = self.rg(&[x.0, kernel.0]);
        Ok(self.push(
            vec![batch, geom.out_h, geom.out_w, c_out],
            out,
            Op::Conv2d {
                x: x.0,
                kernel: kernel.0,
                cols,
                geom,
            },
            rg,
        ))
    }

    /// 2×2 max-pool with stride 2 over NHWC input; odd edges are dropped.
    pub fn max_pool2d(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() != 4 || sx[1] < 2 || sx[2] < 2 {
            return Err(dim_err(format!("max_pool2d of {sx:?}")));
        }
        let (b, h, w, c) = (sx[0], sx[1], sx[2], sx[3]);
        let (oh, ow) = (h / 2, w / 2);
        let vx = self.value(x);
        let mut out = Vec::with_capacity(b * oh * ow * c);
        let mut argmax = Vec::with_capacity(b * oh * ow * c);
        for bi in 0..b {
            for oy in 0..oh {
                for ox in 0..ow {
                    for ch in 0..c {
                        let mut best = usize::MAX;
                        let mut best_v = f64::NEG_INFINITY;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let idx = ((bi * h + 2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                                if best == usize::MAX || vx[idx] > best_v {
                                    best = idx;
                                    best_v = vx[idx];
                                }
                            }
                        }
                        out.push(best_v);
                        argmax.push(best);
                    }
                }
            }
        }
        let rg = self.rg(&[x.0]);
        Ok(self.push(vec![b, oh, ow, c], out, Op::MaxPool2d { x: x.0, argmax }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != numel(self.shape(x)) {
            return Err(dim_err(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape(x)
            )));
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(&[x.0]);
        Ok(self.push(shape.to_vec(), out, Op::Reshape { x: x.0 }, rg))
    }

    /// Concatenation along the last dimension; `a` occupies the leading columns.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.is_empty() || sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(dim_err(format!("concat of {sa:?} and {sb:?}")));
        }
        let (wa, wb) = (sa[sa.len() - 1], sb[sb.len() - 1]);
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = wa + wb;
        let out: Vec<f64> = self
            .value(a)
            .chunks_exact(wa)
            .zip(self.value(b).chunks_exact(wb))
            .flat_map(|(ra, rb)| ra.iter().chain(rb).copied())
            .collect();
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                a: a.0,
                b: b.0,
                wa,
                wb,
            },
            rg,
        ))
    }

    /// Columns `start..start+len` of the last dimension.
    pub fn narrow_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let sx = self.shape(x);
        let width = *sx.last().unwrap_or(&0);
        if len == 0 || start + len > width {
            return Err(dim_err(format!("narrow {start}..{} of {sx:?}", start + len)));
        }
        let mut shape = sx.to_vec();
        *shape.last_mut().unwrap() = len;
        let out: Vec<f64> = self
            .value(x)
            .chunks_exact(width)
            .flat_map(|r| r[start..start + len].iter().copied())
            .collect();
        let rg = self.rg(&[x.0]);
        Ok(self.push(
            shape,
            out,
            Op::Narrow {
                x: x.0,
                width,
                start,
                len,
            },
            rg,
        ))
    }

    /// Swaps the last two dimensions.
    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() < 2 {
            return Err(dim_err(format!("transpose of {sx:?}")));
        }
        let (m, n) = (sx[sx.len() - 2], sx[sx.len() - 1]);
        let batch = numel(sx) / (m * n);
        let mut shape = sx.to_vec();
        let r = shape.len();
        shape.swap(r - 2, r - 1);
        let vx = self.value(x);
        let mut out = vec![0.0; vx.len()];
        for bi in 0..batch {
            let off = bi * m * n;
            for i in 0..m {
                for j in 0..n {
                    out[off + j * m + i] = vx[off + i * n + j];
                }
            }
        }
        let rg = self.rg(&[x.0]);
        Ok(self.push(shape, out, Op::SwapLast2 { x: x.0, batch, m, n }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.rg(&[x.0]);
        self.push(Vec::new(), vec![s], Op::Sum { x: x.0 }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(&[x.0]);
        self.push(Vec::new(), vec![s], Op::Mean { x: x.0 }, rg)
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`, computed
    /// with log-sum-exp stabilization.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let sl = self.shape(logits);
        if sl.len() != 2 || sl[0] != labels.len() {
            return Err(dim_err(format!(
                "cross_entropy logits {sl:?} with {} labels",
                labels.len()
            )));
        }
        let (batch, classes) = (sl[0], sl[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let vl = self.value(logits);
        let mut probs = vec![0.0; vl.len()];
        let mut loss = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = &vl[r * classes..(r + 1) * classes];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + total.ln();
            loss += lse - row[label];
            for c in 0..classes {
                probs[r * classes + c] = (row[c] - lse).exp();
            }
        }
        let rg = self.rg(&[logits.0]);
        Ok(self.push(
            Vec::new(),
            vec![loss / batch as f64],
            Op::CrossEntropy {
                logits: logits.0,
                probs,
                labels: labels.to_vec(),
                classes,
            },
            rg,
        ))
    }

    // ----------------------------------------------------------- backward

    /// Reverse sweep from a scalar `loss`. Every gradient leaf receives a
    /// gradient (zero when unreachable). Runs at most once per tape until
    /// [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Contract(
                "backward already ran on this tape; call zero_grad first".into(),
            ));
        }
        let n = self.node(loss);
        if n.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                n.shape
            )));
        }
        let Tape { nodes, grads, .. } = self;
        grads.clear();
        grads.resize_with(nodes.len(), || None);
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if nodes[i].requires_grad {
                propagate(nodes, grads, i, &g);
            }
            grads[i] = Some(g);
        }
        for (i, node) in nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grads[i].is_none() {
                grads[i] = Some(vec![0.0; node.value.len()]);
            }
        }
        self.backward_done = true;
        Ok(())
    }

    /// Clears computed gradients so that backward may run again.
    pub fn zero_grad(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    /// Drops every recorded operation.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.zero_grad();
    }

    /// Adds the gradients of every recorded parameter leaf into `store`.
    pub fn export_grads(&self, store: &mut ParamStore) -> Result<()> {
        if !self.backward_done {
            return Err(Error::Contract("export_grads before backward".into()));
        }
        for (i, node) in self.nodes.iter().enumerate() {
            let (Some(id), Some(g)) = (node.param, self.grads[i].as_ref()) else {
                continue;
            };
            let target = store
                .get_mut(id)
                .grad_mut()
                .ok_or_else(|| Error::Contract("parameter without gradient buffer".into()))?;
            for (t, v) in target.iter_mut().zip(g) {
                *t += v;
            }
        }
        Ok(())
    }
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let row_len = g.kernel * g.c_in;
    let mut cols = Vec::with_capacity(g.positions() * g.patch_len());
    for bi in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                for ky in 0..g.kernel {
                    let start = ((bi * g.height + oy * g.stride + ky) * g.width + ox * g.stride) * g.c_in;
                    cols.extend_from_slice(&x[start..start + row_len]);
                }
            }
        }
    }
    cols
}

fn col2im_acc(dcols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let row_len = g.kernel * g.c_in;
    let mut chunks = dcols.chunks_exact(row_len);
    for bi in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                for ky in 0..g.kernel {
                    let start = ((bi * g.height + oy * g.stride + ky) * g.width + ox * g.stride) * g.c_in;
                    let src = chunks.next().expect("column count matches geometry");
                    for (d, s) in dx[start..start + row_len].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
    }
}

fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], j: usize) -> Option<&'a mut Vec<f64>> {
    if !nodes[j].requires_grad {
        return None;
    }
    Some(grads[j].get_or_insert_with(|| vec![0.0; nodes[j].value.len()]))
}

fn propagate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], i: usize, g: &[f64]) {
    let node = &nodes[i];
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul { a, b, m, k, n } => {
            if let Some(da) = slot(nodes, grads, a) {
                matmul_a_bt_acc(g, &nodes[b].value, da, m, n, k);
            }
            if let Some(db) = slot(nodes, grads, b) {
                matmul_at_b_acc(&nodes[a].value, g, db, m, k, n);
            }
        }
        &Op::BatchMatMul { a, b, batch, m, k, n } => {
            if let Some(da) = slot(nodes, grads, a) {
                for bi in 0..batch {
                    matmul_a_bt_acc(
                        &g[bi * m * n..(bi + 1) * m * n],
                        &nodes[b].value[bi * k * n..(bi + 1) * k * n],
                        &mut da[bi * m * k..(bi + 1) * m * k],
                        m,
                        n,
                        k,
                    );
                }
            }
            if let Some(db) = slot(nodes, grads, b) {
                for bi in 0..batch {
                    matmul_at_b_acc(
                        &nodes[a].value[bi * m * k..(bi + 1) * m * k],
                        &g[bi * m * n..(bi + 1) * m * n],
                        &mut db[bi * k * n..(bi + 1) * k * n],
                        m,
                        k,
                        n,
                    );
                }
            }
        }
        &Op::Binary { op, a, b, scalar_b } => {
            let va = &nodes[a].value;
            let vb = &nodes[b].value;
            let bv = |idx: usize| if scalar_b { vb[0] } else { vb[idx] };
            if let Some(da) = slot(nodes, grads, a) {
                for (idx, d) in da.iter_mut().enumerate() {
                    *d += match op {
                        BinaryOp::Add | BinaryOp::Sub => g[idx],
                        BinaryOp::Mul => g[idx] * bv(idx),
                        BinaryOp::Max => {
                            if va[idx] >= bv(idx) {
                                g[idx]
                            } else {
                                0.0
                            }
                        }
                    };
                }
            }
            if let Some(db) = slot(nodes, grads, b) {
                for idx in 0..g.len() {
                    let contrib = match op {
                        BinaryOp::Add => g[idx],
                        BinaryOp::Sub => -g[idx],
                        BinaryOp::Mul => g[idx] * va[idx],
                        BinaryOp::Max => {
                            if va[idx] >= bv(idx) {
                                0.0
                            } else {
                                g[idx]
                            }
                        }
                    };
                    db[if scalar_b { 0 } else { idx }] += contrib;
                }
            }
        }
        &Op::AddBias { x, bias, width } => {
            if let Some(dx) = slot(nodes, grads, x) {
                dx.iter_mut().zip(g).for_each(|(d, v)| *d += v);
            }
            if let Some(db) = slot(nodes, grads, bias) {
                for row in g.chunks_exact(width) {
                    db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                }
            }
        }
        &Op::Relu { x } => {
            if let Some(dx) = slot(nodes, grads, x) {
                for ((d, &v), &gv) in dx.iter_mut().zip(&nodes[x].value).zip(g) {
                    if v > 0.0 {
                        *d += gv;
                    }
                }
            }
        }
        &Op::Scale { x, factor } => {
            if let Some(dx) = slot(nodes, grads, x) {
                dx.iter_mut().zip(g).for_each(|(d, v)| *d += v * factor);
            }
        }
        &Op::Softmax { x, outer, len, inner } => {
            let y = &node.value;
            if let Some(dx) = slot(nodes, grads, x) {
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |l: usize| (o * len + l) * inner + i;
                        let dot: f64 = (0..len).map(|l| g[idx(l)] * y[idx(l)]).sum();
                        for l in 0..len {
                            dx[idx(l)] += y[idx(l)] * (g[idx(l)] - dot);
                        }
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            d,
            xhat,
            inv_std,
        } => {
            let (x, gain, bias, d) = (*x, *gain, *bias, *d);
            let vg = &nodes[gain].value;
            if let Some(dg) = slot(nodes, grads, gain) {
                for (grow, hrow) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                    for c in 0..d {
                        dg[c] += grow[c] * hrow[c];
                    }
                }
            }
            if let Some(db) = slot(nodes, grads, bias) {
                for grow in g.chunks_exact(d) {
                    db.iter_mut().zip(grow).for_each(|(a, v)| *a += v);
                }
            }
            if let Some(dx) = slot(nodes, grads, x) {
                let df = d as f64;
                for (r, (grow, hrow)) in g.chunks_exact(d).zip(xhat.chunks_exact(d)).enumerate() {
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for c in 0..d {
                        let dh = grow[c] * vg[c];
                        sum_dh += dh;
                        sum_dh_h += dh * hrow[c];
                    }
                    let scale = inv_std[r] / df;
                    for c in 0..d {
                        let dh = grow[c] * vg[c];
                        dx[r * d + c] += scale * (df * dh - sum_dh - hrow[c] * sum_dh_h);
                    }
                }
            }
        }
        Op::Dropout { x, mask } => {
            if let Some(dx) = slot(nodes, grads, *x) {
                for ((d, m), v) in dx.iter_mut().zip(mask).zip(g) {
                    *d += m * v;
                }
            }
        }
        Op::Conv2d {
            x,
            kernel,
            cols,
            geom,
        } => {
            let (x, kernel) = (*x, *kernel);
            if let Some(dk) = slot(nodes, grads, kernel) {
                matmul_at_b_acc(cols, g, dk, geom.positions(), geom.patch_len(), geom.c_out);
            }
            if nodes[x].requires_grad {
                let mut dcols = vec![0.0; cols.len()];
                matmul_a_bt_acc(
                    g,
                    &nodes[kernel].value,
                    &mut dcols,
                    geom.positions(),
                    geom.c_out,
                    geom.patch_len(),
                );
                if let Some(dx) = slot(nodes, grads, x) {
                    col2im_acc(&dcols, geom, dx);
                }
            }
        }
        Op::MaxPool2d { x, argmax } => {
            if let Some(dx) = slot(nodes, grads, *x) {
                for (&src, v) in argmax.iter().zip(g) {
                    dx[src] += v;
                }
            }
        }
        &Op::Reshape { x } => {
            if let Some(dx) = slot(nodes, grads, x) {
                dx.iter_mut().zip(g).for_each(|(d, v)| *d += v);
            }
        }
        &Op::Concat { a, b, wa, wb } => {
            let w = wa + wb;
            if let Some(da) = slot(nodes, grads, a) {
                for (drow, grow) in da.chunks_exact_mut(wa).zip(g.chunks_exact(w)) {
                    drow.iter_mut().zip(&grow[..wa]).for_each(|(d, v)| *d += v);
                }
            }
            if let Some(db) = slot(nodes, grads, b) {
                for (drow, grow) in db.chunks_exact_mut(wb).zip(g.chunks_exact(w)) {
                    drow.iter_mut().zip(&grow[wa..]).for_each(|(d, v)| *d += v);
                }
            }
        }
        &Op::Narrow { x, width, start, len } => {
            if let Some(dx) = slot(nodes, grads, x) {
                for (drow, grow) in dx.chunks_exact_mut(width).zip(g.chunks_exact(len)) {
                    drow[start..start + len]
                        .iter_mut()
                        .zip(grow)
                        .for_each(|(d, v)| *d += v);
                }
            }
        }
        &Op::SwapLast2 { x, batch, m, n } => {
            if let Some(dx) = slot(nodes, grads, x) {
                for bi in 0..batch {
                    let off = bi * m * n;
                    for i in 0..m {
                        for j in 0..n {
                            dx[off + i * n + j] += g[off + j * m + i];
                        }
                    }
                }
            }
        }
        &Op::Sum { x } => {
            if let Some(dx) = slot(nodes, grads, x) {
                dx.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        &Op::Mean { x } => {
            if let Some(dx) = slot(nodes, grads, x) {
                let s = g[0] / dx.len() as f64;
                dx.iter_mut().for_each(|d| *d += s);
            }
        }
        Op::CrossEntropy {
            logits,
            probs,
            labels,
            classes,
        } => {
            if let Some(dl) = slot(nodes, grads, *logits) {
                let scale = g[0] / labels.len() as f64;
                for (r, &label) in labels.iter().enumerate() {
                    for c in 0..*classes {
                        let onehot = if c == label { 1.0 } else { 0.0 };
                        dl[r * classes + c] += scale * (probs[r * classes + c] - onehot);
                    }
                }
            }
        }
    }
}
