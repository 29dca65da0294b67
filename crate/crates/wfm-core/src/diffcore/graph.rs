//! Computation graphs: append-only DAGs of named primitive operations.
//!
//! Nodes may only reference earlier nodes, so definition order is a valid
//! topological order; evaluation and gradient accumulation both walk it,
//! which keeps runs deterministic.

use crate::error::{Error, Result};

/// Handle to a node inside a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

/// Small dense blur kernel applied depthwise to one image.
#[derive(Debug, Clone, PartialEq)]
pub struct BlurKernel {
    /// Odd kernel side length (1 = identity).
    pub size: usize,
    /// Row-major `size * size` weights, normalized to sum 1.
    pub weights: Vec<f32>,
}

impl BlurKernel {
    pub fn identity() -> Self {
        BlurKernel {
            size: 1,
            weights: vec![1.0],
        }
    }

    /// Gaussian kernel of odd `size` with standard deviation `std` (pixels).
    pub fn gaussian(size: usize, std: f32) -> Result<Self> {
        if size % 2 == 0 || size == 0 {
            return Err(Error::InvalidArg(format!(
                "blur kernel size must be odd and positive, got {size}"
            )));
        }
        if std <= 0.0 {
            return Err(Error::InvalidArg(format!(
                "blur std must be positive, got {std}"
            )));
        }
        let half = (size / 2) as i64;
        let mut weights = Vec::with_capacity(size * size);
        let inv2s2 = 1.0 / (2.0 * (std as f64) * (std as f64));
        for dy in -half..=half {
            for dx in -half..=half {
                let d2 = (dy * dy + dx * dx) as f64;
                weights.push((-d2 * inv2s2).exp() as f32);
            }
        }
        let sum: f32 = weights.iter().sum();
        for w in &mut weights {
            *w /= sum;
        }
        Ok(BlurKernel { size, weights })
    }
}

/// Primitive operations. Images are NCHW; dense activations are `[N, F]`.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    /// Named external input, fed at evaluation time.
    Input,
    /// Reference to a ParamSet entry (`pname` is the ParamSet key).
    Param { pname: String },
    /// `x[N,I] * w[I,O] + b[O]`.
    Dense { x: NodeId, w: NodeId, b: NodeId },
    /// Direct 2-D convolution, zero padding. `w` is `[O,C,kh,kw]`, `b` is `[O]`.
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    },
    /// Nearest-neighbor 2x upsample.
    UpsampleNearest2 { x: NodeId },
    /// 2x2 average pool, stride 2 (spatial dims must be even).
    AvgPool2 { x: NodeId },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Concat { parts: Vec<NodeId>, axis: usize },
    Relu { x: NodeId },
    LeakyRelu { x: NodeId, slope: f32 },
    Tanh { x: NodeId },
    Sigmoid { x: NodeId },
    /// Per-sample, per-channel normalization over spatial dims with learnable
    /// scale/shift (`gamma`, `beta` are `[C]`).
    InstanceNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f32,
    },
    /// `[N, rest..] -> [N, prod(rest)]`.
    Flatten { x: NodeId },
    /// `[N, ..] -> [N, row_shape..]` (per-row element count must match).
    ReshapeRows { x: NodeId, row_shape: Vec<usize> },
    /// `[N,C,H,W] -> [N,C]` spatial mean.
    GlobalAvgPool { x: NodeId },
    /// `x * c`.
    Scale { x: NodeId, c: f32 },
    /// `x * mul + add`, elementwise with scalar coefficients.
    AffineScalar { x: NodeId, mul: f32, add: f32 },
    /// Scalar mean over all elements, shape `[1]`.
    MeanAll { x: NodeId },
    /// `ln(max(x, eps))`; gradient is zero in the clamped region.
    LogClamped { x: NodeId, eps: f32 },
    /// Mean squared error over all elements, shape `[1]`.
    Mse { a: NodeId, b: NodeId },
    /// Mean binary cross entropy from logits (numerically stable), shape `[1]`.
    BceFromLogits { logits: NodeId, targets: NodeId },
    /// Clamp to `[0, 1]`; gradient passes inside the interval.
    Clamp01 { x: NodeId },
    /// Depthwise blur with one kernel per image (len == batch).
    BlurPerImage { x: NodeId, kernels: Vec<BlurKernel> },
    /// Differentiable JPEG approximation: per-image count (1..=64) of 8x8
    /// block-DCT coefficients kept in zigzag order; 64 = exact passthrough.
    DiffJpeg { x: NodeId, keep: Vec<usize> },
    /// Per-image multiplicative brightness factor.
    Brightness { x: NodeId, factors: Vec<f32> },
    /// Per-image contrast about the image mean.
    Contrast { x: NodeId, factors: Vec<f32> },
    /// Per-image saturation about the per-pixel channel mean.
    Saturation { x: NodeId, factors: Vec<f32> },
}

#[derive(Debug, Clone)]
pub struct Node {
    pub name: String,
    pub op: Op,
}

/// Append-only computation graph.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn name_of(&self, id: NodeId) -> &str {
        &self.nodes[id.0].name
    }

    /// Look a node up by name.
    pub fn by_name(&self, name: &str) -> Option<NodeId> {
        self.nodes
            .iter()
            .position(|n| n.name == name)
            .map(NodeId)
    }

    fn push(&mut self, name: impl Into<String>, op: Op) -> NodeId {
        let name = name.into();
        debug_assert!(
            self.by_name(&name).is_none(),
            "duplicate node name `{name}`"
        );
        for dep in op_inputs(&op) {
            assert!(
                dep.0 < self.nodes.len(),
                "node `{name}` references a node from another graph"
            );
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { name, op });
        id
    }

    pub fn input(&mut self, name: impl Into<String>) -> NodeId {
        self.push(name, Op::Input)
    }

    /// Parameter node; `name` doubles as the ParamSet key.
    pub fn param(&mut self, name: impl Into<String>) -> NodeId {
        let name = name.into();
        let pname = name.clone();
        self.push(name, Op::Param { pname })
    }

    pub fn dense(&mut self, name: impl Into<String>, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        self.push(name, Op::Dense { x, w, b })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv2d(
        &mut self,
        name: impl Into<String>,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    ) -> NodeId {
        self.push(name, Op::Conv2d { x, w, b, stride, pad })
    }

    pub fn upsample2(&mut self, name: impl Into<String>, x: NodeId) -> NodeId {
        self.push(name, Op::UpsampleNearest2 { x })
    }

    pub fn avgpool2(&mut self, name: impl Into<String>, x: NodeId) -> NodeId {
        self.push(name, Op::AvgPool2 { x })
    }

    pub fn add(&mut self, name: impl Into<String>, a: NodeId, b: NodeId) -> NodeId {
        self.push(name, Op::Add { a, b })
    }

    pub fn mul(&mut self, name: impl Into<String>, a: NodeId, b: NodeId) -> NodeId {
        self.push(name, Op::Mul { a, b })
    }

    pub fn concat(&mut self, name: impl Into<String>, parts: Vec<NodeId>, axis: usize) -> NodeId {
        self.push(name, Op::Concat { parts, axis })
    }

    pub fn relu(&mut self, name: impl Into<String>, x: NodeId) -> NodeId {
        self.push(name, Op::Relu { x })
    }

    pub fn leaky_relu(&mut self, name: impl Into<String>, x: NodeId, slope: f32) -> NodeId {
        self.push(name, Op::LeakyRelu { x, slope })
    }

    pub fn tanh(&mut self, name: impl Into<String>, x: NodeId) -> NodeId {
        self.push(name, Op::Tanh { x })
    }

    pub fn sigmoid(&mut self, name: impl Into<String>, x: NodeId) -> NodeId {
        self.push(name, Op::Sigmoid { x })
    }

    pub fn instance_norm(
        &mut self,
        name: impl Into<String>,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    ) -> NodeId {
        self.push(
            name,
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                eps: 1e-5,
            },
        )
    }

    pub fn flatten(&mut self, name: impl Into<String>, x: NodeId) -> NodeId {
        self.push(name, Op::Flatten { x })
    }

    pub fn reshape_rows(
        &mut self,
        name: impl Into<String>,
        x: NodeId,
        row_shape: Vec<usize>,
    ) -> NodeId {
        self.push(name, Op::ReshapeRows { x, row_shape })
    }

    pub fn global_avg_pool(&mut self, name: impl Into<String>, x: NodeId) -> NodeId {
        self.push(name, Op::GlobalAvgPool { x })
    }

    pub fn scale(&mut self, name: impl Into<String>, x: NodeId, c: f32) -> NodeId {
        self.push(name, Op::Scale { x, c })
    }

    pub fn affine(&mut self, name: impl Into<String>, x: NodeId, mul: f32, add: f32) -> NodeId {
        self.push(name, Op::AffineScalar { x, mul, add })
    }

    pub fn mean_all(&mut self, name: impl Into<String>, x: NodeId) -> NodeId {
        self.push(name, Op::MeanAll { x })
    }

    pub fn log_clamped(&mut self, name: impl Into<String>, x: NodeId, eps: f32) -> NodeId {
        self.push(name, Op::LogClamped { x, eps })
    }

    pub fn mse(&mut self, name: impl Into<String>, a: NodeId, b: NodeId) -> NodeId {
        self.push(name, Op::Mse { a, b })
    }

    pub fn bce_from_logits(
        &mut self,
        name: impl Into<String>,
        logits: NodeId,
        targets: NodeId,
    ) -> NodeId {
        self.push(name, Op::BceFromLogits { logits, targets })
    }

    pub fn clamp01(&mut self, name: impl Into<String>, x: NodeId) -> NodeId {
        self.push(name, Op::Clamp01 { x })
    }

    pub fn blur_per_image(
        &mut self,
        name: impl Into<String>,
        x: NodeId,
        kernels: Vec<BlurKernel>,
    ) -> NodeId {
        self.push(name, Op::BlurPerImage { x, kernels })
    }

    pub fn diff_jpeg(&mut self, name: impl Into<String>, x: NodeId, keep: Vec<usize>) -> NodeId {
        self.push(name, Op::DiffJpeg { x, keep })
    }

    pub fn brightness(&mut self, name: impl Into<String>, x: NodeId, factors: Vec<f32>) -> NodeId {
        self.push(name, Op::Brightness { x, factors })
    }

    pub fn contrast(&mut self, name: impl Into<String>, x: NodeId, factors: Vec<f32>) -> NodeId {
        self.push(name, Op::Contrast { x, factors })
    }

    pub fn saturation(&mut self, name: impl Into<String>, x: NodeId, factors: Vec<f32>) -> NodeId {
        self.push(name, Op::Saturation { x, factors })
    }
}

/// Node ids an operation reads from.
pub(crate) fn op_inputs(op: &Op) -> Vec<NodeId> {
    match op {
        Op::Input | Op::Param { .. } => vec![],
        Op::Dense { x, w, b } => vec![*x, *w, *b],
        Op::Conv2d { x, w, b, .. } => vec![*x, *w, *b],
        Op::UpsampleNearest2 { x }
        | Op::AvgPool2 { x }
        | Op::Relu { x }
        | Op::LeakyRelu { x, .. }
        | Op::Tanh { x }
        | Op::Sigmoid { x }
        | Op::Flatten { x }
        | Op::ReshapeRows { x, .. }
        | Op::GlobalAvgPool { x }
        | Op::Scale { x, .. }
        | Op::AffineScalar { x, .. }
        | Op::MeanAll { x }
        | Op::LogClamped { x, .. }
        | Op::Clamp01 { x }
        | Op::BlurPerImage { x, .. }
        | Op::DiffJpeg { x, .. }
        | Op::Brightness { x, .. }
        | Op::Contrast { x, .. }
        | Op::Saturation { x, .. } => vec![*x],
        Op::Add { a, b } | Op::Mul { a, b } | Op::Mse { a, b } => vec![*a, *b],
        Op::BceFromLogits { logits, targets } => vec![*logits, *targets],
        Op::InstanceNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        Op::Concat { parts, .. } => parts.clone(),
    }
}
