//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Operations are recorded on an append-only [`Tape`]; inputs always have a
//! smaller index than the node they feed, so the tape is its own topological
//! order and a provenance cycle is impossible by construction (asserted when
//! recording). [`Tape::backward`] walks the tape once in reverse, depositing
//! gradients into every reachable node.
//!
//! A node flagged with [`Tape::stop_gradient`] is absorbing: reverse
//! traversal deposits nothing upstream of it, which is how distillation
//! teachers are kept out of the optimization path.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kernels::{self, Conv2dDims};
use crate::tensor::{Elem, Tensor};

/// Handle to a value on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Per-channel batch statistics produced by training-mode normalization,
/// returned to the caller so running statistics can be folded in afterwards.
#[derive(Debug, Clone)]
pub struct BatchStats<E: Elem> {
    pub mean: Tensor<E>,
    pub var: Tensor<E>,
}

struct TapeNode<E: Elem> {
    value: Tensor<E>,
    grad: Option<Tensor<E>>,
    stop: bool,
    op: OpRecord<E>,
}

enum OpRecord<E: Elem> {
    Leaf,
    StopGradient {
        input: Var,
    },
    MulElem {
        a: Var,
        b: Var,
    },
    AddScaled {
        a: Var,
        b: Var,
        ca: E,
        cb: E,
    },
    SumVars {
        inputs: Vec<Var>,
    },
    MeanStack {
        inputs: Vec<Var>,
    },
    StackGroups {
        inputs: Vec<Var>,
    },
    SliceCols {
        input: Var,
        cols: usize,
        start: usize,
        len: usize,
    },
    Reshape {
        input: Var,
    },
    Relu {
        input: Var,
    },
    ReplicateGroups {
        input: Var,
        groups: usize,
        block: usize,
        factor: usize,
    },
    GroupedLinear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        batch: usize,
        groups: usize,
        cin: usize,
        cout: usize,
    },
    GroupedConv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        dims: Conv2dDims,
    },
    BatchNormTrain {
        input: Var,
        gamma: Var,
        beta: Var,
        batch: usize,
        channels: usize,
        spatial: usize,
        mean: Vec<E>,
        invstd: Vec<E>,
    },
    BatchNormInfer {
        input: Var,
        gamma: Var,
        beta: Var,
        batch: usize,
        channels: usize,
        spatial: usize,
        mean: Vec<E>,
        invstd: Vec<E>,
    },
    GlobalAvgPool {
        input: Var,
        batch: usize,
        channels: usize,
        spatial: usize,
    },
    Softmax {
        input: Var,
        temp: E,
    },
    CrossEntropyHard {
        logits: Var,
        labels: Vec<usize>,
    },
    CrossEntropySoft {
        logits: Var,
        teacher: Var,
        temp: E,
        scale: E,
    },
}

/// Append-only record of a differentiable computation.
pub struct Tape<E: Elem> {
    nodes: Vec<TapeNode<E>>,
}

impl<E: Elem> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Elem> Tape<E> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    /// Gradient deposited by the last [`Tape::backward`] call, if any.
    pub fn grad(&self, v: Var) -> Option<&Tensor<E>> {
        self.nodes[v.0].grad.as_ref()
    }

    fn push(&mut self, value: Tensor<E>, op: OpRecord<E>, stop: bool) -> Var {
        let id = self.nodes.len();
        debug_assert!(op_inputs(&op).iter().all(|v| v.0 < id));
        self.nodes.push(TapeNode { value, grad: None, stop, op });
        Var(id)
    }

    /// Record an input or parameter tensor.
    pub fn leaf(&mut self, value: Tensor<E>) -> Var {
        self.push(value, OpRecord::Leaf, false)
    }

    /// Copy of `input` that absorbs gradient: nothing upstream of it receives
    /// any contribution through this value.
    pub fn stop_gradient(&mut self, input: Var) -> Var {
        let value = self.value(input).clone();
        self.push(value, OpRecord::StopGradient { input }, true)
    }

    pub fn is_stopped(&self, v: Var) -> bool {
        self.nodes[v.0].stop
    }

    pub fn mul_elem(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::ShapeMismatch {
                op: "mul_elem",
                axis: "elements",
                expected: va.numel(),
                got: vb.numel(),
            });
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data().iter())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(va.shape(), data)?;
        Ok(self.push(value, OpRecord::MulElem { a, b }, false))
    }

    /// `ca * a + cb * b`, elementwise.
    pub fn add_scaled(&mut self, a: Var, b: Var, ca: E, cb: E) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::ShapeMismatch {
                op: "add_scaled",
                axis: "elements",
                expected: va.numel(),
                got: vb.numel(),
            });
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data().iter())
            .map(|(&x, &y)| ca * x + cb * y)
            .collect();
        let value = Tensor::new(va.shape(), data)?;
        Ok(self.push(value, OpRecord::AddScaled { a, b, ca, cb }, false))
    }

    /// Elementwise sum in argument order.
    pub fn sum_vars(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs.first().ok_or_else(|| empty_inputs("sum_vars"))?;
        let shape = self.value(first).shape().to_vec();
        let mut acc = Tensor::zeros(&shape);
        for &v in inputs {
            let t = self.value(v);
            if t.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "sum_vars",
                    axis: "elements",
                    expected: acc.numel(),
                    got: t.numel(),
                });
            }
            for (a, &x) in acc.data_mut().iter_mut().zip(t.data().iter()) {
                *a += x;
            }
        }
        Ok(self.push(acc, OpRecord::SumVars { inputs: inputs.to_vec() }, false))
    }

    /// Elementwise mean in argument order (sum first, then one scale).
    pub fn mean_stack(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs.first().ok_or_else(|| empty_inputs("mean_stack"))?;
        let shape = self.value(first).shape().to_vec();
        let mut acc = Tensor::zeros(&shape);
        for &v in inputs {
            let t = self.value(v);
            if t.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "mean_stack",
                    axis: "elements",
                    expected: acc.numel(),
                    got: t.numel(),
                });
            }
            for (a, &x) in acc.data_mut().iter_mut().zip(t.data().iter()) {
                *a += x;
            }
        }
        let inv = E::ONE / E::from_f64(inputs.len() as f64);
        for a in acc.data_mut().iter_mut() {
            *a *= inv;
        }
        Ok(self.push(acc, OpRecord::MeanStack { inputs: inputs.to_vec() }, false))
    }

    /// Stack same-shaped tensors along a new leading axis: k tensors of shape
    /// `s` become one tensor of shape `[k, s...]`. Used to assemble packed
    /// per-group parameters from per-node tensors.
    pub fn stack_groups(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs.first().ok_or_else(|| empty_inputs("stack_groups"))?;
        let inner = self.value(first).shape().to_vec();
        let mut data = Vec::with_capacity(self.value(first).numel() * inputs.len());
        for &v in inputs {
            let t = self.value(v);
            if t.shape() != inner.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "stack_groups",
                    axis: "elements",
                    expected: self.value(first).numel(),
                    got: t.numel(),
                });
            }
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![inputs.len()];
        shape.extend_from_slice(&inner);
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(value, OpRecord::StackGroups { inputs: inputs.to_vec() }, false))
    }

    /// Columns `[start, start+len)` of a `[rows, cols]` tensor.
    pub fn slice_cols(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(input);
        let cols = *t.shape().get(1).ok_or(Error::InvalidArgument {
            op: "slice_cols",
            message: String::from("expected a 2-d tensor"),
        })?;
        let value = t.slice_cols(start, len)?;
        Ok(self.push(value, OpRecord::SliceCols { input, cols, start, len }, false))
    }

    /// Same data, new shape.
    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).reshaped(shape)?;
        Ok(self.push(value, OpRecord::Reshape { input }, false))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let mut value = Tensor::zeros(x.shape());
        kernels::relu_fwd(x.data(), value.data_mut());
        self.push(value, OpRecord::Relu { input }, false)
    }

    /// Duplicate each group's channel block `factor` times; children of
    /// branch g occupy output positions `g*factor .. (g+1)*factor`.
    pub fn replicate_groups(&mut self, input: Var, groups: usize, factor: usize) -> Result<Var> {
        let x = self.value(input);
        let shape = x.shape().to_vec();
        if shape.len() < 2 {
            return Err(Error::InvalidArgument {
                op: "replicate_groups",
                message: String::from("expected at least a 2-d tensor"),
            });
        }
        if factor == 0 {
            return Err(Error::InvalidArgument {
                op: "replicate_groups",
                message: String::from("factor must be at least 1"),
            });
        }
        let channels = shape[1];
        if channels % groups != 0 {
            return Err(Error::NotDivisible { op: "replicate_groups", channels, groups });
        }
        let spatial: usize = shape[2..].iter().product();
        let block = (channels / groups) * spatial;
        let batch = shape[0];
        let mut out_shape = shape.clone();
        out_shape[1] = channels * factor;
        let mut value = Tensor::zeros(&out_shape);
        kernels::replicate_groups_fwd(batch, groups, block, factor, x.data(), value.data_mut());
        Ok(self.push(value, OpRecord::ReplicateGroups { input, groups, block, factor }, false))
    }

    /// Block-diagonal linear map: output group g depends only on input group
    /// g. `input` is `[batch, G*cin]`, `weight` is `[G, cout, cin]`, `bias`
    /// holds `G*cout` elements.
    pub fn grouped_linear(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        groups: usize,
    ) -> Result<Var> {
        let w = self.value(weight);
        if w.shape().len() != 3 {
            return Err(Error::InvalidArgument {
                op: "grouped_linear",
                message: format!("weight must be [groups, cout, cin], got rank {}", w.shape().len()),
            });
        }
        if w.shape()[0] != groups {
            return Err(Error::ShapeMismatch {
                op: "grouped_linear",
                axis: "weight groups",
                expected: groups,
                got: w.shape()[0],
            });
        }
        let (cout, cin) = (w.shape()[1], w.shape()[2]);
        let x = self.value(input);
        if x.shape().len() != 2 {
            return Err(Error::InvalidArgument {
                op: "grouped_linear",
                message: format!("input must be [batch, channels], got rank {}", x.shape().len()),
            });
        }
        let channels = x.shape()[1];
        if channels % groups != 0 {
            return Err(Error::NotDivisible { op: "grouped_linear", channels, groups });
        }
        if channels / groups != cin {
            return Err(Error::ShapeMismatch {
                op: "grouped_linear",
                axis: "input channels per group",
                expected: cin,
                got: channels / groups,
            });
        }
        if let Some(b) = bias {
            let bt = self.value(b);
            if bt.numel() != groups * cout {
                return Err(Error::ShapeMismatch {
                    op: "grouped_linear",
                    axis: "bias",
                    expected: groups * cout,
                    got: bt.numel(),
                });
            }
        }
        let batch = x.shape()[0];
        let mut value = Tensor::zeros(&[batch, groups * cout]);
        {
            let bias_data = bias.map(|b| self.value(b).data().to_vec());
            kernels::grouped_linear_fwd(
                batch,
                groups,
                cin,
                cout,
                self.value(input).data(),
                self.value(weight).data(),
                bias_data.as_deref(),
                value.data_mut(),
            );
        }
        Ok(self.push(
            value,
            OpRecord::GroupedLinear { input, weight, bias, batch, groups, cin, cout },
            false,
        ))
    }

    /// Grouped 2-d convolution. `input` is `[batch, G*cin, H, W]`, `kernel`
    /// is `[G, cout, cin, k, k]` with k in {1, 3}; depthwise convolutions are
    /// the `cin = 1` case with G equal to the channel count.
    pub fn grouped_conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        groups: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let k = self.value(kernel);
        if k.shape().len() != 5 {
            return Err(Error::InvalidArgument {
                op: "grouped_conv2d",
                message: format!(
                    "kernel must be [groups, cout, cin, kh, kw], got rank {}",
                    k.shape().len()
                ),
            });
        }
        if k.shape()[0] != groups {
            return Err(Error::ShapeMismatch {
                op: "grouped_conv2d",
                axis: "kernel groups",
                expected: groups,
                got: k.shape()[0],
            });
        }
        let (cout, cin, kh, kw) = (k.shape()[1], k.shape()[2], k.shape()[3], k.shape()[4]);
        if kh != kw || !(kh == 1 || kh == 3) {
            return Err(Error::InvalidArgument {
                op: "grouped_conv2d",
                message: format!("kernel size must be 1x1 or 3x3, got {kh}x{kw}"),
            });
        }
        if stride == 0 {
            return Err(Error::InvalidArgument {
                op: "grouped_conv2d",
                message: String::from("stride must be at least 1"),
            });
        }
        let x = self.value(input);
        if x.shape().len() != 4 {
            return Err(Error::InvalidArgument {
                op: "grouped_conv2d",
                message: format!("input must be [batch, channels, h, w], got rank {}", x.shape().len()),
            });
        }
        let channels = x.shape()[1];
        if channels % groups != 0 {
            return Err(Error::NotDivisible { op: "grouped_conv2d", channels, groups });
        }
        if channels / groups != cin {
            return Err(Error::ShapeMismatch {
                op: "grouped_conv2d",
                axis: "input channels per group",
                expected: cin,
                got: channels / groups,
            });
        }
        if let Some(b) = bias {
            let bt = self.value(b);
            if bt.numel() != groups * cout {
                return Err(Error::ShapeMismatch {
                    op: "grouped_conv2d",
                    axis: "bias",
                    expected: groups * cout,
                    got: bt.numel(),
                });
            }
        }
        let (batch, h, w) = (x.shape()[0], x.shape()[2], x.shape()[3]);
        let dims = Conv2dDims {
            batch,
            groups,
            cin,
            cout,
            h,
            w,
            kh,
            kw,
            stride,
            pad: padding,
            ho: Conv2dDims::out_extent(h, kh, stride, padding),
            wo: Conv2dDims::out_extent(w, kw, stride, padding),
        };
        let mut value = Tensor::zeros(&[batch, groups * cout, dims.ho, dims.wo]);
        {
            let bias_data = bias.map(|b| self.value(b).data().to_vec());
            kernels::conv2d_fwd(
                &dims,
                self.value(input).data(),
                self.value(kernel).data(),
                bias_data.as_deref(),
                value.data_mut(),
            );
        }
        Ok(self.push(value, OpRecord::GroupedConv2d { input, kernel, bias, dims }, false))
    }

    /// Training-mode batch normalization: normalizes with this batch's
    /// per-channel statistics (population variance) and returns them so the
    /// caller can update running statistics.
    pub fn batch_norm_train(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats<E>)> {
        let (batch, channels, spatial) = norm_dims(self.value(input), "batch_norm")?;
        check_per_channel(self.value(gamma), channels, "gamma")?;
        check_per_channel(self.value(beta), channels, "beta")?;
        let x = self.value(input);
        let (mean, var) = kernels::bn_stats(x.data(), batch, channels, spatial);
        let invstd = kernels::bn_invstd(&var, E::from_f64(eps));
        let mut value = Tensor::zeros(x.shape());
        kernels::bn_apply(
            x.data(),
            batch,
            channels,
            spatial,
            &mean,
            &invstd,
            self.value(gamma).data(),
            self.value(beta).data(),
            value.data_mut(),
        );
        let stats = BatchStats {
            mean: Tensor::new(&[channels], mean.clone())?,
            var: Tensor::new(&[channels], var)?,
        };
        let v = self.push(
            value,
            OpRecord::BatchNormTrain { input, gamma, beta, batch, channels, spatial, mean, invstd },
            false,
        );
        Ok((v, stats))
    }

    /// Inference-mode batch normalization against fixed running statistics.
    pub fn batch_norm_infer(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor<E>,
        running_var: &Tensor<E>,
        eps: f64,
    ) -> Result<Var> {
        let (batch, channels, spatial) = norm_dims(self.value(input), "batch_norm")?;
        check_per_channel(self.value(gamma), channels, "gamma")?;
        check_per_channel(self.value(beta), channels, "beta")?;
        check_per_channel(running_mean, channels, "running mean")?;
        check_per_channel(running_var, channels, "running var")?;
        let mean = running_mean.data().to_vec();
        let invstd = kernels::bn_invstd(running_var.data(), E::from_f64(eps));
        let x = self.value(input);
        let mut value = Tensor::zeros(x.shape());
        kernels::bn_apply(
            x.data(),
            batch,
            channels,
            spatial,
            &mean,
            &invstd,
            self.value(gamma).data(),
            self.value(beta).data(),
            value.data_mut(),
        );
        Ok(self.push(
            value,
            OpRecord::BatchNormInfer { input, gamma, beta, batch, channels, spatial, mean, invstd },
            false,
        ))
    }

    /// `[batch, C, H, W] -> [batch, C]`, spatial mean per channel.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        if x.shape().len() != 4 {
            return Err(Error::InvalidArgument {
                op: "global_avg_pool",
                message: format!("input must be [batch, channels, h, w], got rank {}", x.shape().len()),
            });
        }
        let (batch, channels) = (x.shape()[0], x.shape()[1]);
        let spatial = x.shape()[2] * x.shape()[3];
        let mut value = Tensor::zeros(&[batch, channels]);
        kernels::global_avg_pool_fwd(x.data(), batch, channels, spatial, value.data_mut());
        Ok(self.push(value, OpRecord::GlobalAvgPool { input, batch, channels, spatial }, false))
    }

    /// Row-wise softmax of `logits / temperature`, max-subtracted.
    pub fn softmax_stable(&mut self, logits: Var, temperature: f64) -> Result<Var> {
        if !(temperature > 0.0) {
            return Err(Error::InvalidArgument {
                op: "softmax_stable",
                message: format!("temperature must be positive, got {temperature}"),
            });
        }
        let x = self.value(logits);
        let (batch, classes) = rows_cols(x, "softmax_stable")?;
        let temp = E::from_f64(temperature);
        let mut value = Tensor::zeros(x.shape());
        kernels::softmax_rows(x.data(), batch, classes, temp, value.data_mut());
        Ok(self.push(value, OpRecord::Softmax { input: logits, temp }, false))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy_hard(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let x = self.value(logits);
        let (batch, classes) = rows_cols(x, "cross_entropy_hard")?;
        if labels.len() != batch {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy_hard",
                axis: "labels",
                expected: batch,
                got: labels.len(),
            });
        }
        for &l in labels {
            if l >= classes {
                return Err(Error::LabelOutOfRange { label: l, classes });
            }
        }
        let lse = kernels::logsumexp_rows(x.data(), batch, classes, E::ONE);
        let mut total = E::ZERO;
        for (b, &label) in labels.iter().enumerate() {
            total += lse[b] - x.data()[b * classes + label];
        }
        total = total / E::from_f64(batch as f64);
        let value = Tensor::scalar(total);
        Ok(self.push(value, OpRecord::CrossEntropyHard { logits, labels: labels.to_vec() }, false))
    }

    /// Mean over the batch of `-sum_l teacher[l] * log softmax(logits/T)[l]`.
    /// Gradient flows only into `logits`; the teacher is treated as data. If
    /// `t_squared_rescale` is set the loss (and hence its gradient) is
    /// multiplied by T^2.
    pub fn cross_entropy_soft(
        &mut self,
        logits: Var,
        teacher: Var,
        temperature: f64,
        t_squared_rescale: bool,
    ) -> Result<Var> {
        if !(temperature > 0.0) {
            return Err(Error::InvalidArgument {
                op: "cross_entropy_soft",
                message: format!("temperature must be positive, got {temperature}"),
            });
        }
        let x = self.value(logits);
        let (batch, classes) = rows_cols(x, "cross_entropy_soft")?;
        let t = self.value(teacher);
        if t.shape() != x.shape() {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy_soft",
                axis: "teacher rows",
                expected: x.numel(),
                got: t.numel(),
            });
        }
        for b in 0..batch {
            let sum: f64 = t.data()[b * classes..(b + 1) * classes]
                .iter()
                .map(|v| v.to_f64())
                .sum();
            if (sum - 1.0).abs() > 1e-5 {
                return Err(Error::TeacherNotNormalized { row: b, sum });
            }
        }
        let temp = E::from_f64(temperature);
        let scale = if t_squared_rescale { temp * temp } else { E::ONE };
        let lse = kernels::logsumexp_rows(x.data(), batch, classes, temp);
        let mut total = E::ZERO;
        for b in 0..batch {
            let mut row = E::ZERO;
            for l in 0..classes {
                let log_p = x.data()[b * classes + l] / temp - lse[b];
                row += t.data()[b * classes + l] * log_p;
            }
            total -= row;
        }
        total = total * scale / E::from_f64(batch as f64);
        let value = Tensor::scalar(total);
        Ok(self.push(value, OpRecord::CrossEntropySoft { logits, teacher, temp, scale }, false))
    }

    /// Reverse pass from a scalar root. Clears previous gradients, then
    /// deposits `droot/dnode` into every node reachable through
    /// non-absorbing edges.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if !self.nodes[root.0].value.is_scalar() {
            return Err(Error::InvalidArgument {
                op: "backward",
                message: format!(
                    "root must be scalar, got {} elements",
                    self.nodes[root.0].value.numel()
                ),
            });
        }
        for n in self.nodes.iter_mut() {
            n.grad = None;
        }
        self.nodes[root.0].grad = Some(Tensor::scalar(E::ONE));

        for id in (0..=root.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(id);
            let node = &rest[0];
            let Some(gy) = node.grad.as_ref() else { continue };
            if node.stop {
                continue;
            }
            backprop_one(&node.op, &node.value, gy, before);
        }
        Ok(())
    }
}

fn empty_inputs(op: &'static str) -> Error {
    Error::InvalidArgument { op, message: String::from("empty input list") }
}

fn rows_cols<E: Elem>(t: &Tensor<E>, op: &'static str) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::InvalidArgument {
            op,
            message: format!("expected [batch, classes], got rank {}", t.shape().len()),
        });
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn norm_dims<E: Elem>(t: &Tensor<E>, op: &'static str) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [b, c] => Ok((*b, *c, 1)),
        [b, c, h, w] => Ok((*b, *c, h * w)),
        other => Err(Error::InvalidArgument {
            op,
            message: format!("expected rank 2 or 4 input, got rank {}", other.len()),
        }),
    }
}

fn check_per_channel<E: Elem>(t: &Tensor<E>, channels: usize, axis: &'static str) -> Result<()> {
    if t.numel() != channels {
        return Err(Error::ShapeMismatch {
            op: "batch_norm",
            axis,
            expected: channels,
            got: t.numel(),
        });
    }
    Ok(())
}

fn op_inputs<E: Elem>(op: &OpRecord<E>) -> Vec<Var> {
    match op {
        OpRecord::Leaf => vec![],
        OpRecord::StopGradient { input }
        | OpRecord::SliceCols { input, .. }
        | OpRecord::Reshape { input }
        | OpRecord::Relu { input }
        | OpRecord::ReplicateGroups { input, .. }
        | OpRecord::GlobalAvgPool { input, .. }
        | OpRecord::Softmax { input, .. } => vec![*input],
        OpRecord::MulElem { a, b } | OpRecord::AddScaled { a, b, .. } => vec![*a, *b],
        OpRecord::SumVars { inputs }
        | OpRecord::MeanStack { inputs }
        | OpRecord::StackGroups { inputs } => inputs.clone(),
        OpRecord::GroupedLinear { input, weight, bias, .. } => {
            let mut v = vec![*input, *weight];
            v.extend(bias.iter().copied());
            v
        }
        OpRecord::GroupedConv2d { input, kernel, bias, .. } => {
            let mut v = vec![*input, *kernel];
            v.extend(bias.iter().copied());
            v
        }
        OpRecord::BatchNormTrain { input, gamma, beta, .. }
        | OpRecord::BatchNormInfer { input, gamma, beta, .. } => vec![*input, *gamma, *beta],
        OpRecord::CrossEntropyHard { logits, .. } => vec![*logits],
        OpRecord::CrossEntropySoft { logits, teacher, .. } => vec![*logits, *teacher],
    }
}

fn accumulate<E: Elem>(nodes: &mut [TapeNode<E>], v: Var, delta: &Tensor<E>) {
    let node = &mut nodes[v.0];
    match node.grad.as_mut() {
        Some(g) => {
            for (gi, &di) in g.data_mut().iter_mut().zip(delta.data().iter()) {
                *gi += di;
            }
        }
        None => node.grad = Some(delta.clone()),
    }
}

fn grad_buffer<'a, E: Elem>(nodes: &'a mut [TapeNode<E>], v: Var) -> &'a mut Tensor<E> {
    let node = &mut nodes[v.0];
    if node.grad.is_none() {
        node.grad = Some(Tensor::zeros(node.value.shape()));
    }
    node.grad.as_mut().unwrap()
}

fn backprop_one<E: Elem>(
    op: &OpRecord<E>,
    value: &Tensor<E>,
    gy: &Tensor<E>,
    before: &mut [TapeNode<E>],
) {
    match op {
        OpRecord::Leaf => {}
        // StopGradient nodes never reach here (the traversal skips them),
        // but the non-absorbing identity is the right adjoint if they did.
        OpRecord::StopGradient { input } | OpRecord::Reshape { input } => {
            let delta = Tensor::new(before[input.0].value.shape(), gy.data().to_vec()).unwrap();
            accumulate(before, *input, &delta);
        }
        OpRecord::MulElem { a, b } => {
            let da_data: Vec<E> = gy
                .data()
                .iter()
                .zip(before[b.0].value.data().iter())
                .map(|(&g, &vb)| g * vb)
                .collect();
            let db_data: Vec<E> = gy
                .data()
                .iter()
                .zip(before[a.0].value.data().iter())
                .map(|(&g, &va)| g * va)
                .collect();
            let da = Tensor::new(gy.shape(), da_data).unwrap();
            let db = Tensor::new(gy.shape(), db_data).unwrap();
            accumulate(before, *a, &da);
            accumulate(before, *b, &db);
        }
        OpRecord::AddScaled { a, b, ca, cb } => {
            let da = gy.map(|g| g * *ca);
            let db = gy.map(|g| g * *cb);
            accumulate(before, *a, &da);
            accumulate(before, *b, &db);
        }
        OpRecord::SumVars { inputs } => {
            for &v in inputs {
                accumulate(before, v, gy);
            }
        }
        OpRecord::MeanStack { inputs } => {
            let inv = E::ONE / E::from_f64(inputs.len() as f64);
            let delta = gy.map(|g| g * inv);
            for &v in inputs {
                accumulate(before, v, &delta);
            }
        }
        OpRecord::StackGroups { inputs } => {
            let mut off = 0;
            for &v in inputs {
                let n = before[v.0].value.numel();
                let delta =
                    Tensor::new(before[v.0].value.shape(), gy.data()[off..off + n].to_vec())
                        .unwrap();
                accumulate(before, v, &delta);
                off += n;
            }
        }
        OpRecord::SliceCols { input, cols, start, len } => {
            let rows = gy.shape()[0];
            let gx = grad_buffer(before, *input);
            for r in 0..rows {
                for j in 0..*len {
                    gx.data_mut()[r * cols + start + j] += gy.data()[r * len + j];
                }
            }
        }
        OpRecord::Relu { input } => {
            let x = before[input.0].value.data().to_vec();
            let gx = grad_buffer(before, *input);
            kernels::relu_bwd(&x, gy.data(), gx.data_mut());
        }
        OpRecord::ReplicateGroups { input, groups, block, factor } => {
            let batch = before[input.0].value.shape()[0];
            let gx = grad_buffer(before, *input);
            kernels::replicate_groups_bwd(batch, *groups, *block, *factor, gy.data(), gx.data_mut());
        }
        OpRecord::GroupedLinear { input, weight, bias, batch, groups, cin, cout } => {
            let x = before[input.0].value.data().to_vec();
            let w = before[weight.0].value.data().to_vec();
            {
                let gx = grad_buffer(before, *input);
                kernels::grouped_linear_bwd_input(
                    *batch, *groups, *cin, *cout, gy.data(), &w, gx.data_mut(),
                );
            }
            {
                let gw = grad_buffer(before, *weight);
                kernels::grouped_linear_bwd_weight(
                    *batch, *groups, *cin, *cout, &x, gy.data(), gw.data_mut(),
                );
            }
            if let Some(bv) = bias {
                let gb = grad_buffer(before, *bv);
                kernels::grouped_linear_bwd_bias(*batch, *groups, *cout, gy.data(), gb.data_mut());
            }
        }
        OpRecord::GroupedConv2d { input, kernel, bias, dims } => {
            let x = before[input.0].value.data().to_vec();
            let k = before[kernel.0].value.data().to_vec();
            {
                let gx = grad_buffer(before, *input);
                kernels::conv2d_bwd_input(dims, gy.data(), &k, gx.data_mut());
            }
            {
                let gk = grad_buffer(before, *kernel);
                kernels::conv2d_bwd_kernel(dims, &x, gy.data(), gk.data_mut());
            }
            if let Some(bv) = bias {
                let gb = grad_buffer(before, *bv);
                kernels::conv2d_bwd_bias(dims, gy.data(), gb.data_mut());
            }
        }
        OpRecord::BatchNormTrain { input, gamma, beta, batch, channels, spatial, mean, invstd } => {
            let x = before[input.0].value.data().to_vec();
            let ga = before[gamma.0].value.data().to_vec();
            let mut gx = Tensor::zeros(before[input.0].value.shape());
            let mut ggamma = Tensor::zeros(&[*channels]);
            let mut gbeta = Tensor::zeros(&[*channels]);
            kernels::bn_bwd_train(
                &x,
                gy.data(),
                *batch,
                *channels,
                *spatial,
                mean,
                invstd,
                &ga,
                gx.data_mut(),
                ggamma.data_mut(),
                gbeta.data_mut(),
            );
            accumulate(before, *input, &gx);
            accumulate(before, *gamma, &ggamma);
            accumulate(before, *beta, &gbeta);
        }
        OpRecord::BatchNormInfer { input, gamma, beta, batch, channels, spatial, mean, invstd } => {
            let x = before[input.0].value.data().to_vec();
            let ga = before[gamma.0].value.data().to_vec();
            let mut gx = Tensor::zeros(before[input.0].value.shape());
            let mut ggamma = Tensor::zeros(&[*channels]);
            let mut gbeta = Tensor::zeros(&[*channels]);
            kernels::bn_bwd_infer(
                &x,
                gy.data(),
                *batch,
                *channels,
                *spatial,
                mean,
                invstd,
                &ga,
                gx.data_mut(),
                ggamma.data_mut(),
                gbeta.data_mut(),
            );
            accumulate(before, *input, &gx);
            accumulate(before, *gamma, &ggamma);
            accumulate(before, *beta, &gbeta);
        }
        OpRecord::GlobalAvgPool { input, batch, channels, spatial } => {
            let gx = grad_buffer(before, *input);
            kernels::global_avg_pool_bwd(gy.data(), *batch, *channels, *spatial, gx.data_mut());
        }
        OpRecord::Softmax { input, temp } => {
            // dx_i = y_i * (g_i - sum_j g_j y_j) / T, per row
            let y = value;
            let (batch, classes) = (y.shape()[0], y.shape()[1]);
            let mut delta = Tensor::zeros(y.shape());
            for b in 0..batch {
                let yr = &y.data()[b * classes..(b + 1) * classes];
                let gr = &gy.data()[b * classes..(b + 1) * classes];
                let inner = kernels::dot(gr, yr);
                let dr = &mut delta.data_mut()[b * classes..(b + 1) * classes];
                for i in 0..classes {
                    dr[i] = yr[i] * (gr[i] - inner) / *temp;
                }
            }
            accumulate(before, *input, &delta);
        }
        OpRecord::CrossEntropyHard { logits, labels } => {
            let x = &before[logits.0].value;
            let (batch, classes) = (x.shape()[0], x.shape()[1]);
            let g = gy.item() / E::from_f64(batch as f64);
            let mut sm = Tensor::zeros(x.shape());
            kernels::softmax_rows(x.data(), batch, classes, E::ONE, sm.data_mut());
            for (b, &label) in labels.iter().enumerate() {
                sm.data_mut()[b * classes + label] -= E::ONE;
            }
            let delta = sm.map(|v| v * g);
            accumulate(before, *logits, &delta);
        }
        OpRecord::CrossEntropySoft { logits, teacher, temp, scale } => {
            // d/dlogits = scale * (rowsum(t) * softmax(s/T) - t) / T / batch;
            // nothing is deposited into the teacher slot.
            let x = &before[logits.0].value;
            let t = &before[teacher.0].value;
            let (batch, classes) = (x.shape()[0], x.shape()[1]);
            let g = gy.item() * *scale / (*temp * E::from_f64(batch as f64));
            let mut sm = Tensor::zeros(x.shape());
            kernels::softmax_rows(x.data(), batch, classes, *temp, sm.data_mut());
            let mut delta = Tensor::zeros(x.shape());
            for b in 0..batch {
                let tr = &t.data()[b * classes..(b + 1) * classes];
                let mut tsum = E::ZERO;
                for &tv in tr {
                    tsum += tv;
                }
                for l in 0..classes {
                    let i = b * classes + l;
                    delta.data_mut()[i] = g * (tsum * sm.data()[i] - t.data()[i]);
                }
            }
            accumulate(before, *logits, &delta);
        }
    }
}
