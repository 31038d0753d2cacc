//! Reverse-mode autodiff over a flat tape of tensor ops.
//!
//! Every forward op pushes a node holding its output value and enough
//! information to backpropagate. A fresh tape is built per training step;
//! parameters enter as leaves and their gradients are read back by `Var`
//! after `backward`.

use super::tensor::Tensor;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Op {
    Leaf,
    Relu {
        x: Var,
    },
    Tanh {
        x: Var,
    },
    Sigmoid {
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
    /// Elementwise multiply by a constant mask (dropout; mask carries the
    /// 1/(1-p) scaling).
    MulMask {
        x: Var,
        mask: Tensor,
    },
    /// 1-D convolution. Weight layout `[c_out, c_in * kernel]`, bias `[c_out, 1]`.
    /// Causal pads on the left only; non-causal uses centered same-padding.
    Conv1d {
        x: Var,
        w: Var,
        bias: Var,
        kernel: usize,
        dilation: usize,
        causal: bool,
    },
    /// `w [out, in] × x [in, T] + bias [out, 1]`.
    Matmul {
        w: Var,
        x: Var,
        bias: Var,
    },
    /// Non-overlapping average pooling along time; a short tail window is
    /// averaged over its actual length.
    AvgPool {
        x: Var,
        kernel: usize,
    },
    /// Nearest-neighbor upsampling along time: column `t` of the output
    /// copies column `t / factor` of the input.
    RepeatCols {
        x: Var,
        factor: usize,
    },
    ConcatRows {
        parts: Vec<Var>,
    },
    MeanCols {
        x: Var,
    },
    /// Mean softmax cross-entropy over columns of `[n_classes, T]` logits.
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        softmax: Tensor,
    },
    /// Mean squared error against a constant target of the same shape.
    Mse {
        pred: Var,
        target: Tensor,
    },
    /// Scalar linear combination Σ cᵢ·xᵢ of scalar vars.
    AffineSum {
        terms: Vec<(f64, Var)>,
    },
    /// Row `row` of `x [R, C]` as a column vector `[C, 1]` (embedding lookup).
    SelectRow {
        x: Var,
        row: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

/// Input index for causal / same convolution taps.
#[inline]
fn conv_src(t: usize, k: usize, kernel: usize, dilation: usize, causal: bool) -> isize {
    if causal {
        t as isize - ((kernel - 1 - k) * dilation) as isize
    } else {
        t as isize + (k as isize - (kernel / 2) as isize) * dilation as isize
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor {
            rows: v.rows,
            cols: v.cols,
            data: v.data.iter().map(|&a| a.max(0.0)).collect(),
        };
        self.push(out, Op::Relu { x })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor {
            rows: v.rows,
            cols: v.cols,
            data: v.data.iter().map(|&a| a.tanh()).collect(),
        };
        self.push(out, Op::Tanh { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor {
            rows: v.rows,
            cols: v.cols,
            data: v.data.iter().map(|&a| 1.0 / (1.0 + (-a).exp())).collect(),
        };
        self.push(out, Op::Sigmoid { x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!((va.rows, va.cols), (vb.rows, vb.cols), "add shape mismatch");
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x + y).collect();
        let out = Tensor {
            rows: va.rows,
            cols: va.cols,
            data,
        };
        self.push(out, Op::Add { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!((va.rows, va.cols), (vb.rows, vb.cols), "mul shape mismatch");
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect();
        let out = Tensor {
            rows: va.rows,
            cols: va.cols,
            data,
        };
        self.push(out, Op::Mul { a, b })
    }

    pub fn mul_mask(&mut self, x: Var, mask: Tensor) -> Var {
        let v = self.value(x);
        assert_eq!((v.rows, v.cols), (mask.rows, mask.cols));
        let data = v.data.iter().zip(&mask.data).map(|(a, m)| a * m).collect();
        let out = Tensor {
            rows: v.rows,
            cols: v.cols,
            data,
        };
        self.push(out, Op::MulMask { x, mask })
    }

    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        bias: Var,
        kernel: usize,
        dilation: usize,
        causal: bool,
    ) -> Var {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(bias));
        let c_in = vx.rows;
        let t_len = vx.cols;
        assert_eq!(vw.cols, c_in * kernel, "conv weight shape mismatch");
        let c_out = vw.rows;
        assert_eq!(vb.rows, c_out);
        let mut out = Tensor::zeros(c_out, t_len);
        for o in 0..c_out {
            let b = vb.data[o];
            let orow = &mut out.data[o * t_len..(o + 1) * t_len];
            orow.iter_mut().for_each(|v| *v = b);
            for i in 0..c_in {
                let xrow = &vx.data[i * t_len..(i + 1) * t_len];
                for k in 0..kernel {
                    let wv = vw.data[o * vw.cols + i * kernel + k];
                    if wv == 0.0 {
                        continue;
                    }
                    for t in 0..t_len {
                        let s = conv_src(t, k, kernel, dilation, causal);
                        if s >= 0 && (s as usize) < t_len {
                            orow[t] += wv * xrow[s as usize];
                        }
                    }
                }
            }
        }
        self.push(
            out,
            Op::Conv1d {
                x,
                w,
                bias,
                kernel,
                dilation,
                causal,
            },
        )
    }

    pub fn matmul(&mut self, w: Var, x: Var, bias: Var) -> Var {
        let (vw, vx, vb) = (self.value(w), self.value(x), self.value(bias));
        assert_eq!(vw.cols, vx.rows, "matmul inner dim mismatch");
        assert_eq!(vb.rows, vw.rows);
        let (out_r, t_len) = (vw.rows, vx.cols);
        let mut out = Tensor::zeros(out_r, t_len);
        for o in 0..out_r {
            let b = vb.data[o];
            let orow = &mut out.data[o * t_len..(o + 1) * t_len];
            orow.iter_mut().for_each(|v| *v = b);
            for i in 0..vw.cols {
                let wv = vw.data[o * vw.cols + i];
                let xrow = &vx.data[i * t_len..(i + 1) * t_len];
                for t in 0..t_len {
                    orow[t] += wv * xrow[t];
                }
            }
        }
        self.push(out, Op::Matmul { w, x, bias })
    }

    pub fn avg_pool(&mut self, x: Var, kernel: usize) -> Var {
        let v = self.value(x);
        let t_len = v.cols;
        let out_cols = t_len.div_ceil(kernel);
        let mut out = Tensor::zeros(v.rows, out_cols);
        for r in 0..v.rows {
            for w in 0..out_cols {
                let start = w * kernel;
                let end = (start + kernel).min(t_len);
                let sum: f64 = v.data[r * t_len + start..r * t_len + end].iter().sum();
                out.set(r, w, sum / (end - start) as f64);
            }
        }
        self.push(out, Op::AvgPool { x, kernel })
    }

    pub fn repeat_cols(&mut self, x: Var, factor: usize, out_cols: usize) -> Var {
        let v = self.value(x);
        assert!(out_cols.div_ceil(factor) <= v.cols, "repeat_cols overrun");
        let mut out = Tensor::zeros(v.rows, out_cols);
        for r in 0..v.rows {
            for t in 0..out_cols {
                out.set(r, t, v.get(r, t / factor));
            }
        }
        self.push(out, Op::RepeatCols { x, factor })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols;
        let rows: usize = parts.iter().map(|&p| self.value(p).rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols, cols, "concat_rows column mismatch");
            data.extend_from_slice(&v.data);
        }
        self.push(
            Tensor { rows, cols, data },
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
        )
    }

    pub fn mean_cols(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let mut out = Tensor::zeros(v.rows, 1);
        for r in 0..v.rows {
            let sum: f64 = v.data[r * v.cols..(r + 1) * v.cols].iter().sum();
            out.data[r] = sum / v.cols as f64;
        }
        self.push(out, Op::MeanCols { x })
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let v = self.value(logits);
        assert_eq!(v.cols, targets.len(), "logit/target length mismatch");
        let (n_cls, t_len) = (v.rows, v.cols);
        let mut softmax = Tensor::zeros(n_cls, t_len);
        let mut loss = 0.0;
        for t in 0..t_len {
            let mut max = f64::NEG_INFINITY;
            for c in 0..n_cls {
                max = max.max(v.get(c, t));
            }
            let mut z = 0.0;
            for c in 0..n_cls {
                z += (v.get(c, t) - max).exp();
            }
            let log_z = z.ln() + max;
            loss += log_z - v.get(targets[t], t);
            for c in 0..n_cls {
                softmax.set(c, t, (v.get(c, t) - max).exp() / z);
            }
        }
        let out = Tensor::scalar(loss / t_len as f64);
        self.push(
            out,
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                softmax,
            },
        )
    }

    pub fn mse(&mut self, pred: Var, target: Tensor) -> Var {
        let v = self.value(pred);
        assert_eq!((v.rows, v.cols), (target.rows, target.cols));
        let m = v.data.len() as f64;
        let loss: f64 = v
            .data
            .iter()
            .zip(&target.data)
            .map(|(p, y)| (p - y) * (p - y))
            .sum::<f64>()
            / m;
        self.push(Tensor::scalar(loss), Op::Mse { pred, target })
    }

    pub fn affine_sum(&mut self, terms: &[(f64, Var)]) -> Var {
        let mut acc = 0.0;
        for &(c, v) in terms {
            acc += c * self.value(v).item();
        }
        self.push(
            Tensor::scalar(acc),
            Op::AffineSum {
                terms: terms.to_vec(),
            },
        )
    }

    pub fn select_row(&mut self, x: Var, row: usize) -> Var {
        let v = self.value(x);
        assert!(row < v.rows, "select_row out of range");
        let data: Vec<f64> = v.data[row * v.cols..(row + 1) * v.cols].to_vec();
        let out = Tensor {
            rows: v.cols,
            cols: 1,
            data,
        };
        self.push(out, Op::SelectRow { x, row })
    }

    /// Backpropagate from a scalar loss; returns per-var gradients.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for id in (0..=loss.0).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Relu { x } => {
                    let vx = &self.nodes[x.0].value;
                    let gx = self.grad_slot(&mut grads, *x);
                    for (i, &v) in vx.data.iter().enumerate() {
                        if v > 0.0 {
                            gx.data[i] += g.data[i];
                        }
                    }
                }
                Op::Tanh { x } => {
                    let out = &node.value;
                    let gx = self.grad_slot(&mut grads, *x);
                    for i in 0..out.data.len() {
                        gx.data[i] += g.data[i] * (1.0 - out.data[i] * out.data[i]);
                    }
                }
                Op::Sigmoid { x } => {
                    let out = &node.value;
                    let gx = self.grad_slot(&mut grads, *x);
                    for i in 0..out.data.len() {
                        gx.data[i] += g.data[i] * out.data[i] * (1.0 - out.data[i]);
                    }
                }
                Op::Add { a, b } => {
                    let ga = self.grad_slot(&mut grads, *a);
                    for i in 0..g.data.len() {
                        ga.data[i] += g.data[i];
                    }
                    let gb = self.grad_slot(&mut grads, *b);
                    for i in 0..g.data.len() {
                        gb.data[i] += g.data[i];
                    }
                }
                Op::Mul { a, b } => {
                    let vb = self.nodes[b.0].value.clone();
                    let va = self.nodes[a.0].value.clone();
                    let ga = self.grad_slot(&mut grads, *a);
                    for i in 0..g.data.len() {
                        ga.data[i] += g.data[i] * vb.data[i];
                    }
                    let gb = self.grad_slot(&mut grads, *b);
                    for i in 0..g.data.len() {
                        gb.data[i] += g.data[i] * va.data[i];
                    }
                }
                Op::MulMask { x, mask } => {
                    let gx = self.grad_slot(&mut grads, *x);
                    for i in 0..g.data.len() {
                        gx.data[i] += g.data[i] * mask.data[i];
                    }
                }
                Op::Conv1d {
                    x,
                    w,
                    bias,
                    kernel,
                    dilation,
                    causal,
                } => {
                    let vx = self.nodes[x.0].value.clone();
                    let vw = self.nodes[w.0].value.clone();
                    let (c_in, t_len) = (vx.rows, vx.cols);
                    let c_out = vw.rows;
                    {
                        let gb = self.grad_slot(&mut grads, *bias);
                        for o in 0..c_out {
                            gb.data[o] += g.data[o * t_len..(o + 1) * t_len].iter().sum::<f64>();
                        }
                    }
                    {
                        let gw = self.grad_slot(&mut grads, *w);
                        for o in 0..c_out {
                            let go = &g.data[o * t_len..(o + 1) * t_len];
                            for i in 0..c_in {
                                let xrow = &vx.data[i * t_len..(i + 1) * t_len];
                                for k in 0..*kernel {
                                    let mut acc = 0.0;
                                    for t in 0..t_len {
                                        let s = conv_src(t, k, *kernel, *dilation, *causal);
                                        if s >= 0 && (s as usize) < t_len {
                                            acc += go[t] * xrow[s as usize];
                                        }
                                    }
                                    gw.data[o * vw.cols + i * kernel + k] += acc;
                                }
                            }
                        }
                    }
                    {
                        let gx = self.grad_slot(&mut grads, *x);
                        for o in 0..c_out {
                            let go = &g.data[o * t_len..(o + 1) * t_len];
                            for i in 0..c_in {
                                for k in 0..*kernel {
                                    let wv = vw.data[o * vw.cols + i * kernel + k];
                                    if wv == 0.0 {
                                        continue;
                                    }
                                    for t in 0..t_len {
                                        let s = conv_src(t, k, *kernel, *dilation, *causal);
                                        if s >= 0 && (s as usize) < t_len {
                                            gx.data[i * t_len + s as usize] += wv * go[t];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                Op::Matmul { w, x, bias } => {
                    let vw = self.nodes[w.0].value.clone();
                    let vx = self.nodes[x.0].value.clone();
                    let t_len = vx.cols;
                    {
                        let gb = self.grad_slot(&mut grads, *bias);
                        for o in 0..vw.rows {
                            gb.data[o] += g.data[o * t_len..(o + 1) * t_len].iter().sum::<f64>();
                        }
                    }
                    {
                        let gw = self.grad_slot(&mut grads, *w);
                        for o in 0..vw.rows {
                            let go = &g.data[o * t_len..(o + 1) * t_len];
                            for i in 0..vw.cols {
                                let xrow = &vx.data[i * t_len..(i + 1) * t_len];
                                let mut acc = 0.0;
                                for t in 0..t_len {
                                    acc += go[t] * xrow[t];
                                }
                                gw.data[o * vw.cols + i] += acc;
                            }
                        }
                    }
                    {
                        let gx = self.grad_slot(&mut grads, *x);
                        for o in 0..vw.rows {
                            let go = &g.data[o * t_len..(o + 1) * t_len];
                            for i in 0..vw.cols {
                                let wv = vw.data[o * vw.cols + i];
                                let gxrow = &mut gx.data[i * t_len..(i + 1) * t_len];
                                for t in 0..t_len {
                                    gxrow[t] += wv * go[t];
                                }
                            }
                        }
                    }
                }
                Op::AvgPool { x, kernel } => {
                    let t_len = self.nodes[x.0].value.cols;
                    let rows = self.nodes[x.0].value.rows;
                    let out_cols = node.value.cols;
                    let gx = self.grad_slot(&mut grads, *x);
                    for r in 0..rows {
                        for w in 0..out_cols {
                            let start = w * kernel;
                            let end = (start + kernel).min(t_len);
                            let share = g.get(r, w) / (end - start) as f64;
                            for t in start..end {
                                gx.data[r * t_len + t] += share;
                            }
                        }
                    }
                }
                Op::RepeatCols { x, factor } => {
                    let in_cols = self.nodes[x.0].value.cols;
                    let rows = node.value.rows;
                    let out_cols = node.value.cols;
                    let gx = self.grad_slot(&mut grads, *x);
                    for r in 0..rows {
                        for t in 0..out_cols {
                            gx.data[r * in_cols + t / factor] += g.get(r, t);
                        }
                    }
                }
                Op::ConcatRows { parts } => {
                    let cols = node.value.cols;
                    let mut row_off = 0;
                    for &p in parts {
                        let r = self.nodes[p.0].value.rows;
                        let gp = self.grad_slot(&mut grads, p);
                        for i in 0..r * cols {
                            gp.data[i] += g.data[row_off * cols + i];
                        }
                        row_off += r;
                    }
                }
                Op::MeanCols { x } => {
                    let vx_cols = self.nodes[x.0].value.cols;
                    let rows = node.value.rows;
                    let gx = self.grad_slot(&mut grads, *x);
                    for r in 0..rows {
                        let share = g.data[r] / vx_cols as f64;
                        for t in 0..vx_cols {
                            gx.data[r * vx_cols + t] += share;
                        }
                    }
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    targets,
                    softmax,
                } => {
                    let t_len = targets.len() as f64;
                    let scale = g.item() / t_len;
                    let gl = self.grad_slot(&mut grads, *logits);
                    for t in 0..targets.len() {
                        for c in 0..softmax.rows {
                            let indicator = if c == targets[t] { 1.0 } else { 0.0 };
                            gl.data[c * softmax.cols + t] +=
                                scale * (softmax.get(c, t) - indicator);
                        }
                    }
                }
                Op::Mse { pred, target } => {
                    let vp = self.nodes[pred.0].value.clone();
                    let m = vp.data.len() as f64;
                    let scale = g.item() * 2.0 / m;
                    let gp = self.grad_slot(&mut grads, *pred);
                    for i in 0..vp.data.len() {
                        gp.data[i] += scale * (vp.data[i] - target.data[i]);
                    }
                }
                Op::AffineSum { terms } => {
                    let gv = g.item();
                    for &(c, v) in terms {
                        let gt = self.grad_slot(&mut grads, v);
                        gt.data[0] += c * gv;
                    }
                }
                Op::SelectRow { x, row } => {
                    let cols = self.nodes[x.0].value.cols;
                    let gx = self.grad_slot(&mut grads, *x);
                    for c in 0..cols {
                        gx.data[row * cols + c] += g.data[c];
                    }
                }
            }
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    /// Borrow (allocating on first touch) the gradient accumulator for `v`.
    #[allow(clippy::mut_from_ref)]
    fn grad_slot<'a>(&self, grads: &'a mut [Option<Tensor>], v: Var) -> &'a mut Tensor {
        if grads[v.0].is_none() {
            let val = &self.nodes[v.0].value;
            grads[v.0] = Some(Tensor::zeros(val.rows, val.cols));
        }
        grads[v.0].as_mut().unwrap()
    }
}
