use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::mask::Rect;
use crate::scalar::Scalar;

use super::kernels::ConvSpec;
use super::Tensor;

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Conv2d {
        x: Var,
        w: Var,
        spec: ConvSpec,
    },
    Conv2dData {
        gy: Var,
        w: Var,
        spec: ConvSpec,
    },
    Conv2dFilter {
        x: Var,
        gy: Var,
        spec: ConvSpec,
    },
    AddChannelBias {
        x: Var,
        b: Var,
    },
    ChannelSum {
        x: Var,
    },
    ChannelExpand {
        v: Var,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    ScalarMul {
        x: Var,
        c: T,
    },
    AddScalar {
        x: Var,
    },
    ScaleBy {
        s: Var,
        x: Var,
    },
    MulConst {
        x: Var,
        c: Tensor<T>,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    Expand {
        x: Var,
        scale: T,
    },
    SumPerSample {
        x: Var,
    },
    ExpandPerSample {
        x: Var,
    },
    Square(Var),
    Sqrt(Var),
    Abs(Var),
    Ln(Var),
    Relu(Var),
    LeakyRelu {
        x: Var,
        slope: T,
    },
    Sigmoid(Var),
    ClampMin {
        x: Var,
        min: T,
    },
    SoftmaxRows(Var),
    SoftmaxRowsBackward {
        y: Var,
        gy: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor<T>,
        invstd: Arc<Vec<T>>,
        train: bool,
    },
    BatchNormBackward {
        gy: Var,
    },
    Upsample2x(Var),
    SumPool2x(Var),
    Concat {
        parts: Vec<Var>,
    },
    SliceChannels {
        x: Var,
        start: usize,
    },
    PadChannels {
        x: Var,
        start: usize,
    },
    GatherRows {
        x: Var,
        idx: Arc<Vec<usize>>,
    },
    ScatterRows {
        x: Var,
        idx: Arc<Vec<usize>>,
    },
    Crop {
        x: Var,
        b: usize,
        rect: Rect,
    },
    Uncrop {
        x: Var,
        b: usize,
        rect: Rect,
    },
    SampleToRows {
        x: Var,
        b: usize,
    },
    RowsToSample {
        x: Var,
        b: usize,
    },
    Reshape {
        x: Var,
    },
}

impl<T> Op<T> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::Conv2dData { .. } => "conv2d_backward_data",
            Op::Conv2dFilter { .. } => "conv2d_backward_filter",
            Op::AddChannelBias { .. } => "add_channel_bias",
            Op::ChannelSum { .. } => "channel_sum",
            Op::ChannelExpand { .. } => "channel_expand",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::ScalarMul { .. } => "scalar_mul",
            Op::AddScalar { .. } => "add_scalar",
            Op::ScaleBy { .. } => "scale_by",
            Op::MulConst { .. } => "mul_const",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Expand { .. } => "expand",
            Op::SumPerSample { .. } => "sum_per_sample",
            Op::ExpandPerSample { .. } => "expand_per_sample",
            Op::Square(_) => "square",
            Op::Sqrt(_) => "sqrt",
            Op::Abs(_) => "abs",
            Op::Ln(_) => "ln",
            Op::Relu(_) => "relu",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::ClampMin { .. } => "clamp_min",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::SoftmaxRowsBackward { .. } => "softmax_rows_backward",
            Op::BatchNorm { .. } => "batch_norm",
            Op::BatchNormBackward { .. } => "batch_norm_backward",
            Op::Upsample2x(_) => "upsample2x",
            Op::SumPool2x(_) => "sumpool2x",
            Op::Concat { .. } => "concat",
            Op::SliceChannels { .. } => "slice_channels",
            Op::PadChannels { .. } => "pad_channels",
            Op::GatherRows { .. } => "gather_rows",
            Op::ScatterRows { .. } => "scatter_rows",
            Op::Crop { .. } => "crop",
            Op::Uncrop { .. } => "uncrop",
            Op::SampleToRows { .. } => "sample_to_rows",
            Op::RowsToSample { .. } => "rows_to_sample",
            Op::Reshape { .. } => "reshape",
        }
    }

    pub(crate) fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Conv2d { x, w, .. } => vec![*x, *w],
            Op::Conv2dData { gy, w, .. } => vec![*gy, *w],
            Op::Conv2dFilter { x, gy, .. } => vec![*x, *gy],
            Op::AddChannelBias { x, b } => vec![*x, *b],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![*a, *b],
            Op::ScaleBy { s, x } => vec![*s, *x],
            Op::SoftmaxRowsBackward { y, gy } => vec![*y, *gy],
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Concat { parts } => parts.clone(),
            Op::ChannelSum { x }
            | Op::ChannelExpand { v: x }
            | Op::ScalarMul { x, .. }
            | Op::AddScalar { x }
            | Op::MulConst { x, .. }
            | Op::Sum { x }
            | Op::Mean { x }
            | Op::Expand { x, .. }
            | Op::SumPerSample { x }
            | Op::ExpandPerSample { x }
            | Op::Square(x)
            | Op::Sqrt(x)
            | Op::Abs(x)
            | Op::Ln(x)
            | Op::Relu(x)
            | Op::LeakyRelu { x, .. }
            | Op::Sigmoid(x)
            | Op::ClampMin { x, .. }
            | Op::SoftmaxRows(x)
            | Op::BatchNormBackward { gy: x }
            | Op::Upsample2x(x)
            | Op::SumPool2x(x)
            | Op::SliceChannels { x, .. }
            | Op::PadChannels { x, .. }
            | Op::GatherRows { x, .. }
            | Op::ScatterRows { x, .. }
            | Op::Crop { x, .. }
            | Op::Uncrop { x, .. }
            | Op::SampleToRows { x, .. }
            | Op::RowsToSample { x, .. }
            | Op::Reshape { x } => vec![*x],
        }
    }
}

pub(crate) struct Node<T> {
    pub value: Tensor<T>,
    pub op: Op<T>,
    pub requires_grad: bool,
}

/// Per-channel batch statistics observed by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BnBatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, the value blended into running averages.
    pub var: Vec<T>,
}

/// Record of a computation. Single-threaded; build one per forward pass.
pub struct Tape<T> {
    pub(crate) nodes: Vec<Node<T>>,
    /// When false, new nodes never require gradients.
    pub(crate) grad_mode: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients<T> {
    map: HashMap<Var, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf; `None` when the root does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.map.get(&v)
    }

    /// Gradient of a leaf, zeros when the root does not depend on it.
    pub fn get_or_zeros(&self, tape: &Tape<T>, v: Var) -> Tensor<T> {
        self.map
            .get(&v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_mode: true,
        }
    }

    /// A tape that records values only; nothing on it requires gradients.
    pub fn no_grad() -> Self {
        Self {
            nodes: Vec::new(),
            grad_mode: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf; gradients flow into it.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    /// Copy of `v` cut off from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(&mut self, op: Op<T>, value: Tensor<T>) -> Var {
        let requires_grad =
            self.grad_mode && op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// Gradients of a scalar `root` with respect to `wrt`.
    ///
    /// With `create_graph` the returned gradients are differentiable tape
    /// nodes and may be fed into a second `grad` call.
    pub fn grad(&mut self, root: Var, wrt: &[Var], create_graph: bool) -> Result<Vec<Option<Var>>> {
        let root_shape = self.shape(root).to_vec();
        if root_shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarRoot(root_shape));
        }
        let n = root.0 + 1;

        // Nodes through which some `wrt` variable influences the root.
        let mut reaches = vec![false; n];
        for w in wrt {
            if w.0 < n {
                reaches[w.0] = true;
            }
        }
        for i in 0..n {
            if !reaches[i] && self.nodes[i].requires_grad {
                reaches[i] = self.nodes[i].op.inputs().iter().any(|v| reaches[v.0]);
            }
        }

        let saved_mode = self.grad_mode;
        self.grad_mode = create_graph;
        let result = self.run_backward(root, n, &reaches);
        self.grad_mode = saved_mode;
        let grads = result?;
        Ok(wrt
            .iter()
            .map(|w| if w.0 < n { grads[w.0] } else { None })
            .collect())
    }

    fn run_backward(&mut self, root: Var, n: usize, reaches: &[bool]) -> Result<Vec<Option<Var>>> {
        let mut grads: Vec<Option<Var>> = vec![None; n];
        if !reaches[root.0] || !self.nodes[root.0].requires_grad {
            return Ok(grads);
        }
        let seed = self.constant(Tensor::ones(&self.shape(root).to_vec()));
        grads[root.0] = Some(seed);
        for i in (0..n).rev() {
            let Some(g) = grads[i] else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let inputs = node.op.inputs();
            let need: Vec<bool> = inputs
                .iter()
                .map(|v| reaches[v.0] && self.nodes[v.0].requires_grad)
                .collect();
            if !need.iter().any(|&b| b) {
                continue;
            }
            let input_grads = self.backward_node(i, g, &need)?;
            for ((inp, gi), needed) in inputs.into_iter().zip(input_grads).zip(need) {
                let (Some(gi), true) = (gi, needed) else {
                    continue;
                };
                grads[inp.0] = Some(match grads[inp.0] {
                    Some(prev) => self.add(prev, gi)?,
                    None => gi,
                });
            }
        }
        Ok(grads)
    }

    /// First-order gradients of `root` for every trainable leaf.
    pub fn backward(&mut self, root: Var) -> Result<Gradients<T>> {
        let leaves: Vec<Var> = (0..self.nodes.len().min(root.0 + 1))
            .filter(|&i| matches!(self.nodes[i].op, Op::Leaf) && self.nodes[i].requires_grad)
            .map(Var)
            .collect();
        let grads = self.grad(root, &leaves, false)?;
        let mut map = HashMap::new();
        for (leaf, g) in leaves.into_iter().zip(grads) {
            if let Some(g) = g {
                map.insert(leaf, self.value(g).clone());
            }
        }
        Ok(Gradients { map })
    }
}
