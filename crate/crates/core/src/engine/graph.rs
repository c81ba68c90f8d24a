use crate::engine::gemm::gemm;
use crate::engine::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    fn im2col(&self, image: &[f64], cols: &mut [f64]) {
        let p = self.positions();
        for c in 0..self.c {
            let plane = &image[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        let out_row = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            out_row.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, v) in out_row.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            *v = if ix < 0 || ix >= self.w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], image: &mut [f64]) {
        let p = self.positions();
        for c in 0..self.c {
            let plane = &mut image[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
        // im2col buffers for every batch item; empty when the kernel needs no gradient
        cols: Vec<f64>,
    },
    BiasAdd {
        x: Var,
        bias: Var,
    },
    Relu {
        x: Var,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        x: Var,
    },
    SelectBatch {
        x: Var,
        index: usize,
    },
    Gather {
        x: Var,
        coords: Vec<(usize, usize)>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    SquaredL2Mean {
        a: Var,
        b: Var,
    },
    ConcatRows {
        parts: Vec<Var>,
    },
    MeanRows {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    Sum {
        x: Var,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Tape of operations in creation (topological) order.
///
/// Leaves copy their value in; gradients of leaves accumulate across
/// [`Graph::backward`] calls until [`Graph::zero_grad`].
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::usage(format!("variable {} not in this graph", v.0)))
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Registers a leaf; it is trainable iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let requires_grad = t.requires_grad();
        let value = Tensor::new(t.shape(), t.data().to_vec()).expect("valid tensor");
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Registers a non-trainable leaf, taking ownership of the value.
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(false);
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass (accumulated for leaves).
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes.get(v.0).and_then(|n| n.grad.as_deref())
    }

    /// Adds this graph's gradient for `v` into the gradient slot of `target`.
    pub fn accumulate_into(&self, v: Var, target: &mut Tensor) -> Result<()> {
        self.check(v)?;
        if target.shape() != self.value(v).shape() {
            return Err(Error::input(format!(
                "gradient shape {:?} does not match target {:?}",
                self.value(v).shape(),
                target.shape()
            )));
        }
        let Some(dst) = target.grad_mut() else {
            return Err(Error::usage("target tensor does not require grad"));
        };
        if let Some(g) = self.grad(v) {
            add_into(dst, g);
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    /// 2-D convolution with zero padding; `input` is `[N,C,H,W]`, `kernel` is `[O,C,kh,kw]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        self.check(input)?;
        self.check(kernel)?;
        let xs = self.value(input).shape().to_vec();
        let ks = self.value(kernel).shape().to_vec();
        if xs.len() != 4 || ks.len() != 4 {
            return Err(Error::config(format!(
                "conv2d expects rank-4 input and kernel, got {xs:?} and {ks:?}"
            )));
        }
        if stride == 0 {
            return Err(Error::config("conv2d stride must be positive"));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, kc, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
        if kc != c {
            return Err(Error::config(format!(
                "conv2d channel mismatch: input has {c}, kernel expects {kc}"
            )));
        }
        let (hp, wp) = (h + 2 * pad, w + 2 * pad);
        if kh == 0 || kw == 0 || kh > hp || kw > wp {
            return Err(Error::config(format!(
                "conv2d kernel {kh}x{kw} does not fit padded input {hp}x{wp}"
            )));
        }
        if (hp - kh) % stride != 0 || (wp - kw) % stride != 0 {
            return Err(Error::config(format!(
                "conv2d output extent not exact: ({hp}-{kh})/{stride}, ({wp}-{kw})/{stride}"
            )));
        }
        let geom = ConvGeom {
            n,
            c,
            h,
            w,
            o,
            kh,
            kw,
            ho: (hp - kh) / stride + 1,
            wo: (wp - kw) / stride + 1,
            stride,
            pad,
        };
        let keep_cols = self.needs(kernel);
        let (patch, positions) = (geom.patch(), geom.positions());
        let mut out = vec![0.0; n * o * positions];
        let mut cols = if keep_cols {
            vec![0.0; n * patch * positions]
        } else {
            Vec::new()
        };
        let mut scratch = if keep_cols {
            Vec::new()
        } else {
            vec![0.0; patch * positions]
        };
        {
            let x = self.value(input).data();
            let k = self.value(kernel).data();
            for b in 0..n {
                let image = &x[b * c * h * w..(b + 1) * c * h * w];
                let col = if keep_cols {
                    &mut cols[b * patch * positions..(b + 1) * patch * positions]
                } else {
                    &mut scratch[..]
                };
                geom.im2col(image, col);
                gemm(
                    o,
                    patch,
                    positions,
                    k,
                    false,
                    col,
                    false,
                    0.0,
                    &mut out[b * o * positions..(b + 1) * o * positions],
                );
            }
        }
        let value = Tensor::new(&[n, o, geom.ho, geom.wo], out)?;
        let rg = self.needs(input) || self.needs(kernel);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                geom,
                cols,
            },
            rg,
        ))
    }

    /// Adds a per-channel bias `[C]` to `[N,C,H,W]`.
    pub fn bias_add(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.check(x)?;
        self.check(bias)?;
        let xs = self.value(x).shape().to_vec();
        let bs = self.value(bias).shape();
        if xs.len() != 4 || bs != [xs[1]] {
            return Err(Error::input(format!(
                "bias_add expects [N,C,H,W] and [C], got {xs:?} and {bs:?}"
            )));
        }
        let plane = xs[2] * xs[3];
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for (i, chunk) in out.chunks_mut(plane).enumerate() {
            let bv = b[i % xs[1]];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        let value = Tensor::new(&xs, out)?;
        let rg = self.needs(x) || self.needs(bias);
        Ok(self.push(value, Op::BiasAdd { x, bias }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let src = self.value(x);
        let shape = src.shape().to_vec();
        let out = src.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let value = Tensor::new(&shape, out)?;
        let rg = self.needs(x);
        Ok(self.push(value, Op::Relu { x }, rg))
    }

    /// Max over disjoint 2x2 windows; ties go to the first row-major maximizer.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::config(format!("maxpool2 expects rank 4, got {xs:?}")));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::config(format!(
                "maxpool2 needs even spatial extents, got {h}x{w}"
            )));
        }
        let (ho, wo) = (h / 2, w / 2);
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if data[idx] > data[best] {
                            best = idx;
                        }
                    }
                    out.push(data[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(&[n, c, ho, wo], out)?;
        let rg = self.needs(x);
        Ok(self.push(value, Op::MaxPool2 { x, argmax }, rg))
    }

    /// `[N,C,H,W]` to `[N,C]` by spatial mean.
    pub fn global_average_pool(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 || xs[2] == 0 || xs[3] == 0 {
            return Err(Error::input(format!(
                "global_average_pool expects [N,C,H,W] with H,W >= 1, got {xs:?}"
            )));
        }
        let plane = xs[2] * xs[3];
        let out = self
            .value(x)
            .data()
            .chunks(plane)
            .map(|p| p.iter().sum::<f64>() / plane as f64)
            .collect();
        let value = Tensor::new(&[xs[0], xs[1]], out)?;
        let rg = self.needs(x);
        Ok(self.push(value, Op::GlobalAvgPool { x }, rg))
    }

    /// Item `index` of the leading axis, dropping that axis.
    pub fn select_batch(&mut self, x: Var, index: usize) -> Result<Var> {
        self.check(x)?;
        let xs = self.value(x).shape().to_vec();
        if xs.len() < 2 {
            return Err(Error::input("select_batch needs rank >= 2"));
        }
        if index >= xs[0] {
            return Err(Error::input(format!(
                "batch index {index} out of range for {} items",
                xs[0]
            )));
        }
        let item = xs[1..].iter().product::<usize>();
        let out = self.value(x).data()[index * item..(index + 1) * item].to_vec();
        let value = Tensor::new(&xs[1..], out)?;
        let rg = self.needs(x);
        Ok(self.push(value, Op::SelectBatch { x, index }, rg))
    }

    /// Collects the channel vectors of `[D,H,W]` at `coords` into `[K,D]`.
    pub fn gather_spatial(&mut self, x: Var, coords: &[(usize, usize)]) -> Result<Var> {
        self.check(x)?;
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 3 {
            return Err(Error::input(format!("gather_spatial expects [D,H,W], got {xs:?}")));
        }
        let (d, h, w) = (xs[0], xs[1], xs[2]);
        if coords.is_empty() {
            return Err(Error::input("gather_spatial needs at least one coordinate"));
        }
        if let Some(&(row, col)) = coords.iter().find(|&&(r, c)| r >= h || c >= w) {
            return Err(Error::Bounds {
                row,
                col,
                height: h,
                width: w,
            });
        }
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(coords.len() * d);
        for &(r, c) in coords {
            out.extend((0..d).map(|ch| data[ch * h * w + r * w + c]));
        }
        let value = Tensor::new(&[coords.len(), d], out)?;
        let rg = self.needs(x);
        Ok(self.push(
            value,
            Op::Gather {
                x,
                coords: coords.to_vec(),
            },
            rg,
        ))
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.check(logits)?;
        let ls = self.value(logits).shape().to_vec();
        if ls.len() != 2 || ls[0] != labels.len() || ls[0] == 0 {
            return Err(Error::input(format!(
                "softmax_cross_entropy expects [N,Y] with N = {} labels, got {ls:?}",
                labels.len()
            )));
        }
        let (n, y) = (ls[0], ls[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= y) {
            return Err(Error::input(format!("label {bad} out of range for {y} classes")));
        }
        let data = self.value(logits).data();
        let mut probs = vec![0.0; n * y];
        let mut loss = 0.0;
        for (row, &label) in labels.iter().enumerate() {
            let z = &data[row * y..(row + 1) * y];
            let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = z.iter().map(|v| (v - max).exp()).sum();
            let log_sum = sum.ln();
            for (j, p) in probs[row * y..(row + 1) * y].iter_mut().enumerate() {
                *p = (z[j] - max).exp() / sum;
            }
            loss += log_sum - (z[label] - max);
        }
        let value = Tensor::scalar(loss / n as f64);
        let rg = self.needs(logits);
        Ok(self.push(
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// `(1/K) * sum_k ||a_k - b_k||^2` for `[K,D]` operands.
    pub fn squared_l2_mean(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb || sa.len() != 2 || sa[0] == 0 {
            return Err(Error::input(format!(
                "squared_l2_mean expects equal [K,D] shapes, got {sa:?} and {sb:?}"
            )));
        }
        let k = sa[0];
        let total: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::scalar(total / k as f64), Op::SquaredL2Mean { a, b }, rg))
    }

    /// Stacks `[D]` vectors and `[k,D]` blocks into one `[sum k, D]` matrix.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::input("concat_rows needs at least one part"));
        }
        let mut width = None;
        let mut rows = 0;
        for &p in parts {
            self.check(p)?;
            let s = self.value(p).shape();
            let (r, d) = match s.len() {
                1 => (1, s[0]),
                2 => (s[0], s[1]),
                _ => {
                    return Err(Error::input(format!(
                        "concat_rows expects rank 1 or 2, got {s:?}"
                    )))
                }
            };
            if *width.get_or_insert(d) != d {
                return Err(Error::input(format!(
                    "concat_rows width mismatch: {d} vs {}",
                    width.unwrap()
                )));
            }
            rows += r;
        }
        let width = width.unwrap();
        let mut out = Vec::with_capacity(rows * width);
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.needs(p));
        let value = Tensor::new(&[rows, width], out)?;
        Ok(self.push(
            value,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    /// Column means of `[R,D]`, giving `[D]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let s = self.value(x).shape().to_vec();
        if s.len() != 2 || s[0] == 0 {
            return Err(Error::input(format!("mean_rows expects non-empty [R,D], got {s:?}")));
        }
        let (r, d) = (s[0], s[1]);
        let mut out = vec![0.0; d];
        for row in self.value(x).data().chunks(d) {
            add_into(&mut out, row);
        }
        out.iter_mut().for_each(|v| *v /= r as f64);
        let value = Tensor::new(&[d], out)?;
        let rg = self.needs(x);
        Ok(self.push(value, Op::MeanRows { x }, rg))
    }

    /// Elementwise sum; either operand may be a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let value = if ta.shape() == tb.shape() {
            let out = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
            Tensor::new(ta.shape(), out)?
        } else if tb.is_scalar() {
            let s = tb.data()[0];
            Tensor::new(ta.shape(), ta.data().iter().map(|x| x + s).collect())?
        } else if ta.is_scalar() {
            let s = ta.data()[0];
            Tensor::new(tb.shape(), tb.data().iter().map(|x| x + s).collect())?
        } else {
            return Err(Error::input(format!(
                "add shape mismatch: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        };
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    /// Elementwise product of equal shapes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::input(format!(
                "mul shape mismatch: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let out = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(ta.shape(), out)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.check(x)?;
        let t = self.value(x);
        let value = Tensor::new(t.shape(), t.data().iter().map(|v| v * factor).collect())?;
        let rg = self.needs(x);
        Ok(self.push(value, Op::Scale { x, factor }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let total = self.value(x).data().iter().sum();
        let rg = self.needs(x);
        Ok(self.push(Tensor::scalar(total), Op::Sum { x }, rg))
    }

    /// Reverse pass from a scalar `loss`, visiting nodes in reverse creation order.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check(loss)?;
        if !self.value(loss).is_scalar() {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        for node in &mut self.nodes {
            if !matches!(node.op, Op::Leaf) {
                node.grad = None;
            }
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.seed(loss, &[1.0]);
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) || !self.nodes[i].requires_grad {
                continue;
            }
            let Some(grad) = self.nodes[i].grad.take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.backprop_node(&op, &grad);
            self.nodes[i].op = op;
            self.nodes[i].grad = Some(grad);
        }
        Ok(())
    }

    fn seed(&mut self, v: Var, g: &[f64]) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match node.grad.as_mut() {
            Some(dst) => add_into(dst, g),
            None => node.grad = Some(g.to_vec()),
        }
    }

    fn grad_slot(&mut self, v: Var) -> Option<&mut [f64]> {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let len = node.value.numel();
        Some(node.grad.get_or_insert_with(|| vec![0.0; len]))
    }

    fn backprop_node(&mut self, op: &Op, g: &[f64]) {
        match op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                geom,
                cols,
            } => {
                let (patch, positions) = (geom.patch(), geom.positions());
                let out_item = geom.o * positions;
                if self.needs(*kernel) {
                    let mut dk = vec![0.0; geom.o * patch];
                    for b in 0..geom.n {
                        gemm(
                            geom.o,
                            positions,
                            patch,
                            &g[b * out_item..(b + 1) * out_item],
                            false,
                            &cols[b * patch * positions..(b + 1) * patch * positions],
                            true,
                            1.0,
                            &mut dk,
                        );
                    }
                    self.seed(*kernel, &dk);
                }
                if self.needs(*input) {
                    let item = geom.c * geom.h * geom.w;
                    let mut dx = vec![0.0; geom.n * item];
                    let mut dcols = vec![0.0; patch * positions];
                    {
                        let k = self.value(*kernel).data();
                        for b in 0..geom.n {
                            gemm(
                                patch,
                                geom.o,
                                positions,
                                k,
                                true,
                                &g[b * out_item..(b + 1) * out_item],
                                false,
                                0.0,
                                &mut dcols,
                            );
                            geom.col2im(&dcols, &mut dx[b * item..(b + 1) * item]);
                        }
                    }
                    self.seed(*input, &dx);
                }
            }
            Op::BiasAdd { x, bias } => {
                self.seed(*x, g);
                if self.needs(*bias) {
                    let s = self.value(*x).shape().to_vec();
                    let plane = s[2] * s[3];
                    let mut db = vec![0.0; s[1]];
                    for (k, chunk) in g.chunks(plane).enumerate() {
                        db[k % s[1]] += chunk.iter().sum::<f64>();
                    }
                    self.seed(*bias, &db);
                }
            }
            Op::Relu { x } => {
                let dx: Vec<f64> = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                    .collect();
                self.seed(*x, &dx);
            }
            Op::MaxPool2 { x, argmax } => {
                if let Some(dst) = self.grad_slot(*x) {
                    for (&src, &gv) in argmax.iter().zip(g) {
                        dst[src] += gv;
                    }
                }
            }
            Op::GlobalAvgPool { x } => {
                let s = self.value(*x).shape().to_vec();
                let plane = s[2] * s[3];
                let inv = 1.0 / plane as f64;
                if let Some(dst) = self.grad_slot(*x) {
                    for (chunk, &gv) in dst.chunks_mut(plane).zip(g) {
                        chunk.iter_mut().for_each(|d| *d += gv * inv);
                    }
                }
            }
            Op::SelectBatch { x, index } => {
                let item = g.len();
                if let Some(dst) = self.grad_slot(*x) {
                    add_into(&mut dst[index * item..(index + 1) * item], g);
                }
            }
            Op::Gather { x, coords } => {
                let s = self.value(*x).shape().to_vec();
                let (d, h, w) = (s[0], s[1], s[2]);
                if let Some(dst) = self.grad_slot(*x) {
                    for (k, &(r, c)) in coords.iter().enumerate() {
                        for ch in 0..d {
                            dst[ch * h * w + r * w + c] += g[k * d + ch];
                        }
                    }
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let n = labels.len();
                let y = probs.len() / n;
                let scale = g[0] / n as f64;
                let mut dz: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (row, &label) in labels.iter().enumerate() {
                    dz[row * y + label] -= scale;
                }
                self.seed(*logits, &dz);
            }
            Op::SquaredL2Mean { a, b } => {
                let k = self.value(*a).shape()[0] as f64;
                let coef = 2.0 * g[0] / k;
                let diff: Vec<f64> = self
                    .value(*a)
                    .data()
                    .iter()
                    .zip(self.value(*b).data())
                    .map(|(x, y)| coef * (x - y))
                    .collect();
                self.seed(*a, &diff);
                if self.needs(*b) {
                    let neg: Vec<f64> = diff.iter().map(|v| -v).collect();
                    self.seed(*b, &neg);
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    self.seed(p, &g[offset..offset + len]);
                    offset += len;
                }
            }
            Op::MeanRows { x } => {
                let s = self.value(*x).shape().to_vec();
                let inv = 1.0 / s[0] as f64;
                if let Some(dst) = self.grad_slot(*x) {
                    for row in dst.chunks_mut(s[1]) {
                        for (d, gv) in row.iter_mut().zip(g) {
                            *d += gv * inv;
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if !self.needs(v) {
                        continue;
                    }
                    if self.value(v).numel() == g.len() {
                        self.seed(v, g);
                    } else {
                        let total: f64 = g.iter().sum();
                        self.seed(v, &[total]);
                    }
                }
            }
            Op::Mul { a, b } => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let da: Vec<f64> = vb.iter().zip(g).map(|(y, gv)| y * gv).collect();
                let db: Vec<f64> = va.iter().zip(g).map(|(x, gv)| x * gv).collect();
                self.seed(*a, &da);
                self.seed(*b, &db);
            }
            Op::Scale { x, factor } => {
                let dx: Vec<f64> = g.iter().map(|v| v * factor).collect();
                self.seed(*x, &dx);
            }
            Op::Sum { x } => {
                let n = self.value(*x).numel();
                self.seed(*x, &vec![g[0]; n]);
            }
        }
    }
}
