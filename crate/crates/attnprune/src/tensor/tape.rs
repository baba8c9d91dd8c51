use std::collections::BTreeMap;

use crate::error::{Error, Result};

use super::{Param, ParamId, Tensor};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// One recorded operation, with everything backward needs.
#[derive(Debug)]
pub enum Op {
    Leaf {
        param: Option<ParamId>,
        requires_grad: bool,
    },
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    },
    DepthwiseConv2d {
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        // per-channel 1/sqrt(var+eps) actually used in forward
        inv_std: Vec<f64>,
        // normalized input, saved for backward
        x_hat: Tensor,
        train: bool,
    },
    Relu {
        input: Var,
    },
    ClippedRelu {
        input: Var,
        ceiling: f64,
    },
    Sigmoid {
        input: Var,
    },
    Softmax {
        input: Var,
    },
    Gap {
        input: Var,
    },
    ChannelScale {
        input: Var,
        scale: Var,
    },
    ChannelSelect {
        input: Var,
        indices: Vec<usize>,
    },
    Add {
        a: Var,
        b: Var,
    },
    MulScalar {
        input: Var,
        factor: f64,
    },
    Mul {
        a: Var,
        b: Var,
    },
    MaxPool {
        input: Var,
        // flat source index per output element
        argmax: Vec<usize>,
    },
    Flatten {
        input: Var,
    },
    Sum {
        input: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients keyed by parameter id, produced by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    pub by_param: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: &ParamId) -> Option<&Tensor> {
        self.by_param.get(id)
    }
}

/// Record of one forward pass; discarded after backward.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Constant input (no gradient tracked back into the caller's buffer).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(
            value,
            Op::Leaf {
                param: None,
                requires_grad: false,
            },
        )
    }

    /// Parameter leaf; gradient is exported under the param's id when
    /// `requires_grad` is set.
    pub fn param(&mut self, p: &Param) -> Var {
        self.push(
            p.value.clone(),
            Op::Leaf {
                param: Some(p.id.clone()),
                requires_grad: p.requires_grad,
            },
        )
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let x = self.value(input);
        let k = self.value(kernel);
        if x.shape.len() != 4 || k.shape.len() != 4 {
            return Err(Error::dim("conv2d", "rank-4 input and kernel", format!("{:?}/{:?}", x.shape, k.shape)));
        }
        let (n, c_in, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
        let (c_out, kc, kh, kw) = (k.shape[0], k.shape[1], k.shape[2], k.shape[3]);
        if kc != c_in {
            return Err(Error::dim("conv2d input channels", kc, c_in));
        }
        if let Some(b) = bias {
            let bt = self.value(b);
            if bt.numel() != c_out {
                return Err(Error::dim("conv2d bias", c_out, bt.numel()));
            }
        }
        let (oh, ow) = conv_out_hw(h, w, kh, kw, stride, padding)?;
        let mut out = Tensor::zeros(&[n, c_out, oh, ow]);
        let x = &self.nodes[input.0].value;
        let k = &self.nodes[kernel.0].value;
        for ni in 0..n {
            for co in 0..c_out {
                let b = bias.map(|b| self.nodes[b.0].value.data[co]).unwrap_or(0.0);
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b;
                        for ci in 0..c_in {
                            for ky in 0..kh {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                if iy < 0 || iy as usize >= h {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox * stride + kx) as isize - padding as isize;
                                    if ix < 0 || ix as usize >= w {
                                        continue;
                                    }
                                    acc += x.data[x.idx4(ni, ci, iy as usize, ix as usize)]
                                        * k.data[k.idx4(co, ci, ky, kx)];
                                }
                            }
                        }
                        let oi = out.idx4(ni, co, oy, ox);
                        out.data[oi] = acc;
                    }
                }
            }
        }
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            },
        ))
    }

    pub fn depthwise_conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let x = self.value(input);
        let k = self.value(kernel);
        if x.shape.len() != 4 || k.shape.len() != 4 || k.shape[1] != 1 {
            return Err(Error::dim(
                "depthwise_conv2d",
                "NCHW input and C x 1 x k x k kernel",
                format!("{:?}/{:?}", x.shape, k.shape),
            ));
        }
        let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
        if k.shape[0] != c {
            return Err(Error::dim("depthwise_conv2d channels", c, k.shape[0]));
        }
        let (kh, kw) = (k.shape[2], k.shape[3]);
        let (oh, ow) = conv_out_hw(h, w, kh, kw, stride, padding)?;
        let mut out = Tensor::zeros(&[n, c, oh, ow]);
        let x = &self.nodes[input.0].value;
        let k = &self.nodes[kernel.0].value;
        for ni in 0..n {
            for ci in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy as usize >= h {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix < 0 || ix as usize >= w {
                                    continue;
                                }
                                acc += x.data[x.idx4(ni, ci, iy as usize, ix as usize)]
                                    * k.data[k.idx4(ci, 0, ky, kx)];
                            }
                        }
                        let oi = out.idx4(ni, ci, oy, ox);
                        out.data[oi] = acc;
                    }
                }
            }
        }
        Ok(self.push(
            out,
            Op::DepthwiseConv2d {
                input,
                kernel,
                stride,
                padding,
            },
        ))
    }

    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let x = self.value(input);
        let wt = self.value(weight);
        if x.shape.len() != 2 || wt.shape.len() != 2 {
            return Err(Error::dim("linear", "rank-2 input and weight", format!("{:?}/{:?}", x.shape, wt.shape)));
        }
        let (n, c_in) = (x.shape[0], x.shape[1]);
        let (c_out, wc) = (wt.shape[0], wt.shape[1]);
        if wc != c_in {
            return Err(Error::dim("linear input features", wc, c_in));
        }
        if let Some(b) = bias {
            if self.value(b).numel() != c_out {
                return Err(Error::dim("linear bias", c_out, self.value(b).numel()));
            }
        }
        let mut out = Tensor::zeros(&[n, c_out]);
        let x = &self.nodes[input.0].value;
        let wt = &self.nodes[weight.0].value;
        for ni in 0..n {
            for co in 0..c_out {
                let mut acc = bias.map(|b| self.nodes[b.0].value.data[co]).unwrap_or(0.0);
                for ci in 0..c_in {
                    acc += x.data[ni * c_in + ci] * wt.data[co * c_in + ci];
                }
                out.data[ni * c_out + co] = acc;
            }
        }
        Ok(self.push(out, Op::Linear { input, weight, bias }))
    }

    /// Batch normalization over the channel axis (axis 1) of a rank-2 or
    /// rank-4 input. Train mode uses batch moments and updates the running
    /// buffers in place; eval mode reads the running buffers.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &mut Tensor,
        running_var: &mut Tensor,
        train: bool,
        momentum: f64,
        epsilon: f64,
    ) -> Result<Var> {
        let x = self.value(input).clone();
        let c = x.dim(1);
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::dim("batchnorm gamma/beta", c, self.value(gamma).numel()));
        }
        if running_mean.numel() != c || running_var.numel() != c {
            return Err(Error::dim("batchnorm running stats", c, running_mean.numel()));
        }
        if epsilon <= 0.0 {
            return Err(Error::InvalidInput("batchnorm epsilon must be > 0".into()));
        }
        let per_channel = x.numel() / c;
        if train && x.dim(0) == 0 {
            return Err(Error::InvalidInput("batchnorm train mode on empty batch".into()));
        }

        let (mean, var) = if train {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for_each_channel(&x, |ci, v| mean[ci] += v);
            for m in &mut mean {
                *m /= per_channel as f64;
            }
            for_each_channel(&x, |ci, v| {
                let d = v - mean[ci];
                var[ci] += d * d;
            });
            for v in &mut var {
                *v /= per_channel as f64;
            }
            for ci in 0..c {
                running_mean.data[ci] = (1.0 - momentum) * running_mean.data[ci] + momentum * mean[ci];
                running_var.data[ci] = (1.0 - momentum) * running_var.data[ci] + momentum * var[ci];
            }
            (mean, var)
        } else {
            (running_mean.data.clone(), running_var.data.clone())
        };

        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + epsilon).sqrt()).collect();
        let mut x_hat = Tensor::zeros(&x.shape);
        let g = self.value(gamma).data.clone();
        let b = self.value(beta).data.clone();
        let mut out = Tensor::zeros(&x.shape);
        map_channels(&x, &mut x_hat, &mut out, |ci, v, xh, o| {
            let h = (v - mean[ci]) * inv_std[ci];
            *xh = h;
            *o = g[ci] * h + b[ci];
        });
        Ok(self.push(
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                inv_std,
                x_hat,
                train,
            },
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = Tensor {
            shape: self.value(input).shape.clone(),
            data: self.value(input).data.iter().map(|v| v.max(0.0)).collect(),
        };
        self.push(out, Op::Relu { input })
    }

    pub fn clipped_relu(&mut self, input: Var, ceiling: f64) -> Result<Var> {
        if ceiling <= 0.0 {
            return Err(Error::InvalidInput("clipped_relu ceiling must be > 0".into()));
        }
        let out = Tensor {
            shape: self.value(input).shape.clone(),
            data: self
                .value(input)
                .data
                .iter()
                .map(|v| v.max(0.0).min(ceiling))
                .collect(),
        };
        Ok(self.push(out, Op::ClippedRelu { input, ceiling }))
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let out = Tensor {
            shape: self.value(input).shape.clone(),
            data: self
                .value(input)
                .data
                .iter()
                .map(|v| 1.0 / (1.0 + (-v).exp()))
                .collect(),
        };
        self.push(out, Op::Sigmoid { input })
    }

    /// Row softmax of an N x C tensor, computed with max subtraction.
    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        if x.shape.len() != 2 {
            return Err(Error::dim("softmax", "rank-2 input", format!("{:?}", x.shape)));
        }
        let (n, c) = (x.shape[0], x.shape[1]);
        let mut out = Tensor::zeros(&[n, c]);
        for ni in 0..n {
            let row = &x.data[ni * c..(ni + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for ci in 0..c {
                let e = (row[ci] - m).exp();
                out.data[ni * c + ci] = e;
                sum += e;
            }
            for ci in 0..c {
                out.data[ni * c + ci] /= sum;
            }
        }
        Ok(self.push(out, Op::Softmax { input }))
    }

    /// Global average pooling NCHW -> N x C.
    pub fn global_average_pool(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        if x.shape.len() != 4 {
            return Err(Error::dim("global_average_pool", "rank-4 input", format!("{:?}", x.shape)));
        }
        let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
        let hw = (h * w) as f64;
        let mut out = Tensor::zeros(&[n, c]);
        for ni in 0..n {
            for ci in 0..c {
                let mut acc = 0.0;
                for hi in 0..h {
                    for wi in 0..w {
                        acc += x.data[x.idx4(ni, ci, hi, wi)];
                    }
                }
                out.data[ni * c + ci] = acc / hw;
            }
        }
        Ok(self.push(out, Op::Gap { input }))
    }

    /// Multiply each channel by a per-sample scale: out[n,c,..] = x[n,c,..] * s[n,c].
    pub fn channel_scale(&mut self, input: Var, scale: Var) -> Result<Var> {
        let x = self.value(input);
        let s = self.value(scale);
        if s.shape.len() != 2 || x.dim(0) != s.shape[0] || x.dim(1) != s.shape[1] {
            return Err(Error::dim(
                "channel_scale",
                format!("scale {}x{}", x.dim(0), x.dim(1)),
                format!("{:?}", s.shape),
            ));
        }
        let mut out = Tensor::zeros(&x.shape);
        let inner = x.numel() / (x.dim(0) * x.dim(1));
        for (i, v) in x.data.iter().enumerate() {
            out.data[i] = v * s.data[i / inner];
        }
        Ok(self.push(out, Op::ChannelScale { input, scale }))
    }

    /// Keep only the listed channels (axis 1), in the given order.
    pub fn channel_select(&mut self, input: Var, indices: &[usize]) -> Result<Var> {
        let x = self.value(input);
        let c = x.dim(1);
        if indices.is_empty() {
            return Err(Error::InvalidInput("channel_select with no channels".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= c) {
            return Err(Error::dim("channel_select index", format!("< {c}"), bad));
        }
        let n = x.dim(0);
        let inner = x.numel() / (n * c);
        let mut shape = x.shape.clone();
        shape[1] = indices.len();
        let mut out = Tensor::zeros(&shape);
        for ni in 0..n {
            for (j, &ci) in indices.iter().enumerate() {
                let src = (ni * c + ci) * inner;
                let dst = (ni * indices.len() + j) * inner;
                out.data[dst..dst + inner].copy_from_slice(&x.data[src..src + inner]);
            }
        }
        Ok(self.push(
            out,
            Op::ChannelSelect {
                input,
                indices: indices.to_vec(),
            },
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape != self.value(b).shape {
            return Err(Error::dim(
                "add",
                format!("{:?}", self.value(a).shape),
                format!("{:?}", self.value(b).shape),
            ));
        }
        let out = Tensor {
            shape: self.value(a).shape.clone(),
            data: self
                .value(a)
                .data
                .iter()
                .zip(&self.value(b).data)
                .map(|(x, y)| x + y)
                .collect(),
        };
        Ok(self.push(out, Op::Add { a, b }))
    }

    pub fn mul_scalar(&mut self, input: Var, factor: f64) -> Var {
        let out = Tensor {
            shape: self.value(input).shape.clone(),
            data: self.value(input).data.iter().map(|v| v * factor).collect(),
        };
        self.push(out, Op::MulScalar { input, factor })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape != self.value(b).shape {
            return Err(Error::dim(
                "mul",
                format!("{:?}", self.value(a).shape),
                format!("{:?}", self.value(b).shape),
            ));
        }
        let out = Tensor {
            shape: self.value(a).shape.clone(),
            data: self
                .value(a)
                .data
                .iter()
                .zip(&self.value(b).data)
                .map(|(x, y)| x * y)
                .collect(),
        };
        Ok(self.push(out, Op::Mul { a, b }))
    }

    /// Max pooling with square window `k` and stride `k` (no padding).
    pub fn max_pool(&mut self, input: Var, k: usize) -> Result<Var> {
        let x = self.value(input);
        if x.shape.len() != 4 {
            return Err(Error::dim("max_pool", "rank-4 input", format!("{:?}", x.shape)));
        }
        let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
        if h % k != 0 || w % k != 0 {
            return Err(Error::dim("max_pool extent", format!("multiple of {k}"), format!("{h}x{w}")));
        }
        let (oh, ow) = (h / k, w / k);
        let mut out = Tensor::zeros(&[n, c, oh, ow]);
        let mut argmax = vec![0usize; out.numel()];
        for ni in 0..n {
            for ci in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_i = 0;
                        for ky in 0..k {
                            for kx in 0..k {
                                let i = x.idx4(ni, ci, oy * k + ky, ox * k + kx);
                                if x.data[i] > best {
                                    best = x.data[i];
                                    best_i = i;
                                }
                            }
                        }
                        let oi = out.idx4(ni, ci, oy, ox);
                        out.data[oi] = best;
                        argmax[oi] = best_i;
                    }
                }
            }
        }
        Ok(self.push(out, Op::MaxPool { input, argmax }))
    }

    /// NCHW -> N x (C*H*W), channel-major.
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        if x.shape.len() != 4 {
            return Err(Error::dim("flatten", "rank-4 input", format!("{:?}", x.shape)));
        }
        let n = x.shape[0];
        let rest = x.numel() / n;
        let out = Tensor::from_vec(&[n, rest], x.data.clone())?;
        Ok(self.push(out, Op::Flatten { input }))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let total: f64 = self.value(input).data.iter().sum();
        self.push(Tensor::scalar(total), Op::Sum { input })
    }

    /// Mean negative log-softmax probability of the true class.
    pub fn cross_entropy_loss(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let x = self.value(logits);
        if x.shape.len() != 2 {
            return Err(Error::dim("cross_entropy_loss", "rank-2 logits", format!("{:?}", x.shape)));
        }
        let (n, k) = (x.shape[0], x.shape[1]);
        if labels.len() != n {
            return Err(Error::dim("cross_entropy_loss labels", n, labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::InvalidInput(format!("label {bad} out of range for {k} classes")));
        }
        let mut probs = Tensor::zeros(&[n, k]);
        let mut loss = 0.0;
        for ni in 0..n {
            let row = &x.data[ni * k..(ni + 1) * k];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for ci in 0..k {
                let e = (row[ci] - m).exp();
                probs.data[ni * k + ci] = e;
                sum += e;
            }
            for ci in 0..k {
                probs.data[ni * k + ci] /= sum;
            }
            loss -= probs.data[ni * k + labels[ni]].ln();
        }
        loss /= n as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Reverse pass from a scalar loss. Returns gradients for every
    /// `requires_grad` parameter leaf reachable from it.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::InvalidInput(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let mut out = Gradients::default();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf {
                param: Some(id),
                requires_grad: true,
            } = &node.op
            {
                if let Some(g) = grads[i].take() {
                    // same param used twice on one tape accumulates
                    match out.by_param.get_mut(id) {
                        Some(acc) => {
                            for (a, b) in acc.data.iter_mut().zip(&g.data) {
                                *a += b;
                            }
                        }
                        None => {
                            out.by_param.insert(id.clone(), g);
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    fn accumulate(grads: &mut [Option<Tensor>], target: Var, contribution: Tensor) {
        match &mut grads[target.0] {
            Some(existing) => {
                for (a, b) in existing.data.iter_mut().zip(&contribution.data) {
                    *a += b;
                }
            }
            slot => *slot = Some(contribution),
        }
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[i].op {
            Op::Leaf { .. } => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            } => {
                let x = &self.nodes[input.0].value;
                let k = &self.nodes[kernel.0].value;
                let (n, c_in, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
                let (c_out, _, kh, kw) = (k.shape[0], k.shape[1], k.shape[2], k.shape[3]);
                let out = &self.nodes[i].value;
                let (oh, ow) = (out.shape[2], out.shape[3]);
                let mut dx = Tensor::zeros(&x.shape);
                let mut dk = Tensor::zeros(&k.shape);
                let mut db = Tensor::zeros(&[c_out]);
                for ni in 0..n {
                    for co in 0..c_out {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let go = g.data[out.idx4(ni, co, oy, ox)];
                                if go == 0.0 {
                                    continue;
                                }
                                db.data[co] += go;
                                for ci in 0..c_in {
                                    for ky in 0..kh {
                                        let iy = (oy * stride + ky) as isize - *padding as isize;
                                        if iy < 0 || iy as usize >= h {
                                            continue;
                                        }
                                        for kx in 0..kw {
                                            let ix = (ox * stride + kx) as isize - *padding as isize;
                                            if ix < 0 || ix as usize >= w {
                                                continue;
                                            }
                                            let xi = x.idx4(ni, ci, iy as usize, ix as usize);
                                            let kidx = k.idx4(co, ci, ky, kx);
                                            dx.data[xi] += go * k.data[kidx];
                                            dk.data[kidx] += go * x.data[xi];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                Self::accumulate(grads, *input, dx);
                Self::accumulate(grads, *kernel, dk);
                if let Some(b) = bias {
                    Self::accumulate(grads, *b, db);
                }
            }
            Op::DepthwiseConv2d {
                input,
                kernel,
                stride,
                padding,
            } => {
                let x = &self.nodes[input.0].value;
                let k = &self.nodes[kernel.0].value;
                let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
                let (kh, kw) = (k.shape[2], k.shape[3]);
                let out = &self.nodes[i].value;
                let (oh, ow) = (out.shape[2], out.shape[3]);
                let mut dx = Tensor::zeros(&x.shape);
                let mut dk = Tensor::zeros(&k.shape);
                for ni in 0..n {
                    for ci in 0..c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let go = g.data[out.idx4(ni, ci, oy, ox)];
                                if go == 0.0 {
                                    continue;
                                }
                                for ky in 0..kh {
                                    let iy = (oy * stride + ky) as isize - *padding as isize;
                                    if iy < 0 || iy as usize >= h {
                                        continue;
                                    }
                                    for kx in 0..kw {
                                        let ix = (ox * stride + kx) as isize - *padding as isize;
                                        if ix < 0 || ix as usize >= w {
                                            continue;
                                        }
                                        let xi = x.idx4(ni, ci, iy as usize, ix as usize);
                                        let kidx = k.idx4(ci, 0, ky, kx);
                                        dx.data[xi] += go * k.data[kidx];
                                        dk.data[kidx] += go * x.data[xi];
                                    }
                                }
                            }
                        }
                    }
                }
                Self::accumulate(grads, *input, dx);
                Self::accumulate(grads, *kernel, dk);
            }
            Op::Linear { input, weight, bias } => {
                let x = &self.nodes[input.0].value;
                let wt = &self.nodes[weight.0].value;
                let (n, c_in) = (x.shape[0], x.shape[1]);
                let c_out = wt.shape[0];
                let mut dx = Tensor::zeros(&x.shape);
                let mut dw = Tensor::zeros(&wt.shape);
                let mut db = Tensor::zeros(&[c_out]);
                for ni in 0..n {
                    for co in 0..c_out {
                        let go = g.data[ni * c_out + co];
                        if go == 0.0 {
                            continue;
                        }
                        db.data[co] += go;
                        for ci in 0..c_in {
                            dx.data[ni * c_in + ci] += go * wt.data[co * c_in + ci];
                            dw.data[co * c_in + ci] += go * x.data[ni * c_in + ci];
                        }
                    }
                }
                Self::accumulate(grads, *input, dx);
                Self::accumulate(grads, *weight, dw);
                if let Some(b) = bias {
                    Self::accumulate(grads, *b, db);
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                inv_std,
                x_hat,
                train,
            } => {
                let c = x_hat.dim(1);
                let per_channel = (x_hat.numel() / c) as f64;
                let gv = &self.nodes[gamma.0].value.data;
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut sum_dy = vec![0.0; c];
                for (idx, ci) in channel_indices(x_hat) {
                    let dy = g.data[idx];
                    dgamma[ci] += dy * x_hat.data[idx];
                    dbeta[ci] += dy;
                    sum_dy[ci] += dy;
                }
                let mut dx = Tensor::zeros(&x_hat.shape);
                if *train {
                    for (idx, ci) in channel_indices(x_hat) {
                        let dy = g.data[idx];
                        dx.data[idx] = gv[ci] * inv_std[ci] / per_channel
                            * (per_channel * dy - sum_dy[ci] - x_hat.data[idx] * dgamma[ci]);
                    }
                } else {
                    for (idx, ci) in channel_indices(x_hat) {
                        dx.data[idx] = g.data[idx] * gv[ci] * inv_std[ci];
                    }
                }
                Self::accumulate(grads, *input, dx);
                Self::accumulate(grads, *gamma, Tensor::from_vec(&[c], dgamma).unwrap());
                Self::accumulate(grads, *beta, Tensor::from_vec(&[c], dbeta).unwrap());
            }
            Op::Relu { input } => {
                // Subgradient convention relu'(0) = 1: gate stacks start from
                // zero-initialised FC layers whose pre-activation is exactly 0,
                // and choosing the upper subgradient lets them leave that point.
                let x = &self.nodes[input.0].value;
                let dx = Tensor {
                    shape: x.shape.clone(),
                    data: x
                        .data
                        .iter()
                        .zip(&g.data)
                        .map(|(v, gy)| if *v >= 0.0 { *gy } else { 0.0 })
                        .collect(),
                };
                Self::accumulate(grads, *input, dx);
            }
            Op::ClippedRelu { input, ceiling } => {
                // derivative defined as 0 at both kinks
                let x = &self.nodes[input.0].value;
                let dx = Tensor {
                    shape: x.shape.clone(),
                    data: x
                        .data
                        .iter()
                        .zip(&g.data)
                        .map(|(v, gy)| if *v > 0.0 && *v < *ceiling { *gy } else { 0.0 })
                        .collect(),
                };
                Self::accumulate(grads, *input, dx);
            }
            Op::Sigmoid { input } => {
                let y = &self.nodes[i].value;
                let dx = Tensor {
                    shape: y.shape.clone(),
                    data: y
                        .data
                        .iter()
                        .zip(&g.data)
                        .map(|(s, gy)| gy * s * (1.0 - s))
                        .collect(),
                };
                Self::accumulate(grads, *input, dx);
            }
            Op::Softmax { input } => {
                let s = &self.nodes[i].value;
                let (n, c) = (s.shape[0], s.shape[1]);
                let mut dx = Tensor::zeros(&s.shape);
                for ni in 0..n {
                    let mut dot = 0.0;
                    for ci in 0..c {
                        dot += g.data[ni * c + ci] * s.data[ni * c + ci];
                    }
                    for ci in 0..c {
                        dx.data[ni * c + ci] = s.data[ni * c + ci] * (g.data[ni * c + ci] - dot);
                    }
                }
                Self::accumulate(grads, *input, dx);
            }
            Op::Gap { input } => {
                let x = &self.nodes[input.0].value;
                let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
                let scale = 1.0 / (h * w) as f64;
                let mut dx = Tensor::zeros(&x.shape);
                for ni in 0..n {
                    for ci in 0..c {
                        let gy = g.data[ni * c + ci] * scale;
                        for hi in 0..h {
                            for wi in 0..w {
                                dx.data[x.idx4(ni, ci, hi, wi)] = gy;
                            }
                        }
                    }
                }
                Self::accumulate(grads, *input, dx);
            }
            Op::ChannelScale { input, scale } => {
                let x = &self.nodes[input.0].value;
                let s = &self.nodes[scale.0].value;
                let (n, c) = (s.shape[0], s.shape[1]);
                let inner = x.numel() / (n * c);
                let mut dx = Tensor::zeros(&x.shape);
                let mut ds = Tensor::zeros(&s.shape);
                for (idx, gy) in g.data.iter().enumerate() {
                    let nc = idx / inner;
                    dx.data[idx] = gy * s.data[nc];
                    ds.data[nc] += gy * x.data[idx];
                }
                Self::accumulate(grads, *input, dx);
                Self::accumulate(grads, *scale, ds);
            }
            Op::ChannelSelect { input, indices } => {
                let x = &self.nodes[input.0].value;
                let (n, c) = (x.dim(0), x.dim(1));
                let inner = x.numel() / (n * c);
                let mut dx = Tensor::zeros(&x.shape);
                for ni in 0..n {
                    for (j, &ci) in indices.iter().enumerate() {
                        let src = (ni * indices.len() + j) * inner;
                        let dst = (ni * c + ci) * inner;
                        for off in 0..inner {
                            dx.data[dst + off] += g.data[src + off];
                        }
                    }
                }
                Self::accumulate(grads, *input, dx);
            }
            Op::Add { a, b } => {
                Self::accumulate(grads, *a, g.clone());
                Self::accumulate(grads, *b, g.clone());
            }
            Op::MulScalar { input, factor } => {
                let dx = Tensor {
                    shape: g.shape.clone(),
                    data: g.data.iter().map(|gy| gy * factor).collect(),
                };
                Self::accumulate(grads, *input, dx);
            }
            Op::Mul { a, b } => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let da = Tensor {
                    shape: av.shape.clone(),
                    data: g.data.iter().zip(&bv.data).map(|(gy, v)| gy * v).collect(),
                };
                let db = Tensor {
                    shape: bv.shape.clone(),
                    data: g.data.iter().zip(&av.data).map(|(gy, v)| gy * v).collect(),
                };
                Self::accumulate(grads, *a, da);
                Self::accumulate(grads, *b, db);
            }
            Op::MaxPool { input, argmax } => {
                let x = &self.nodes[input.0].value;
                let mut dx = Tensor::zeros(&x.shape);
                for (oi, &src) in argmax.iter().enumerate() {
                    dx.data[src] += g.data[oi];
                }
                Self::accumulate(grads, *input, dx);
            }
            Op::Flatten { input } => {
                let x = &self.nodes[input.0].value;
                let dx = Tensor::from_vec(&x.shape, g.data.clone()).unwrap();
                Self::accumulate(grads, *input, dx);
            }
            Op::Sum { input } => {
                let x = &self.nodes[input.0].value;
                let dx = Tensor::full(&x.shape, g.data[0]);
                Self::accumulate(grads, *input, dx);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let (n, k) = (probs.shape[0], probs.shape[1]);
                let scale = g.data[0] / n as f64;
                let mut dx = Tensor::zeros(&[n, k]);
                for ni in 0..n {
                    for ci in 0..k {
                        let y = if labels[ni] == ci { 1.0 } else { 0.0 };
                        dx.data[ni * k + ci] = scale * (probs.data[ni * k + ci] - y);
                    }
                }
                Self::accumulate(grads, *logits, dx);
            }
        }
    }
}

fn conv_out_hw(h: usize, w: usize, kh: usize, kw: usize, stride: usize, padding: usize) -> Result<(usize, usize)> {
    if stride == 0 {
        return Err(Error::InvalidInput("stride must be positive".into()));
    }
    let oh = (h + 2 * padding).checked_sub(kh).map(|v| v / stride + 1);
    let ow = (w + 2 * padding).checked_sub(kw).map(|v| v / stride + 1);
    match (oh, ow) {
        (Some(oh), Some(ow)) if oh > 0 && ow > 0 => Ok((oh, ow)),
        _ => Err(Error::dim(
            "conv output extent",
            "positive",
            format!("input {h}x{w}, kernel {kh}x{kw}, stride {stride}, padding {padding}"),
        )),
    }
}

fn for_each_channel(x: &Tensor, mut f: impl FnMut(usize, f64)) {
    let c = x.dim(1);
    let inner = if x.shape.len() == 4 { x.shape[2] * x.shape[3] } else { 1 };
    for (i, v) in x.data.iter().enumerate() {
        f((i / inner) % c, *v);
    }
}

fn channel_indices(x: &Tensor) -> impl Iterator<Item = (usize, usize)> + '_ {
    let c = x.dim(1);
    let inner = if x.shape.len() == 4 { x.shape[2] * x.shape[3] } else { 1 };
    (0..x.numel()).map(move |i| (i, (i / inner) % c))
}

fn map_channels(
    x: &Tensor,
    x_hat: &mut Tensor,
    out: &mut Tensor,
    mut f: impl FnMut(usize, f64, &mut f64, &mut f64),
) {
    let c = x.dim(1);
    let inner = if x.shape.len() == 4 { x.shape[2] * x.shape[3] } else { 1 };
    for i in 0..x.numel() {
        let ci = (i / inner) % c;
        let (xh, o) = (&mut x_hat.data[i], &mut out.data[i]);
        f(ci, x.data[i], xh, o);
    }
}
