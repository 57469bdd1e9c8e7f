//! Layer graphs: an ordered DAG of operations with named feature taps.

pub mod builder;
pub mod config;
pub mod shapes;

use std::collections::HashSet;
use std::fmt;

use crate::error::{bail, Result};
use crate::tensor::{ConvParams, UpsampleMode};

pub use builder::{
    add_backbone, add_seg_head, add_stem, add_up_head, build_backbone_graph, build_model,
    build_stem_graph, GraphBuilder,
};
pub use config::{BackboneConfig, BlockType, ModelConfig, Variant};
pub use shapes::{infer_shapes, ShapeMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "%{}", self.0)
    }
}

pub const BN_EPS: f32 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Input {
        channels: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        params: ConvParams,
    },
    BatchNorm {
        channels: usize,
        eps: f32,
    },
    Relu,
    Add,
    MaxPool {
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Upsample {
        factor: usize,
        mode: UpsampleMode,
    },
    Concat,
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Conv2d { .. } => "conv",
            Op::BatchNorm { .. } => "bn",
            Op::Relu => "relu",
            Op::Add => "add",
            Op::MaxPool { .. } => "maxpool",
            Op::Upsample { .. } => "upsample",
            Op::Concat => "concat",
        }
    }

    /// Number of operands, or `None` for variadic ops.
    pub fn arity(&self) -> Option<usize> {
        match self {
            Op::Input { .. } => Some(0),
            Op::Add => Some(2),
            Op::Concat => None,
            _ => Some(1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum WeightRole {
    ConvWeight,
    ConvBias,
    BnGamma,
    BnBeta,
    BnMean,
    BnVar,
}

impl WeightRole {
    /// Trained parameters, as opposed to running statistics.
    pub fn is_learnable(self) -> bool {
        !matches!(self, WeightRole::BnMean | WeightRole::BnVar)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WeightSpec {
    pub name: String,
    pub dims: Vec<usize>,
    pub role: WeightRole,
}

impl WeightSpec {
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Weight entries a node needs, named after the node.
pub fn weight_specs(name: &str, op: &Op) -> Vec<WeightSpec> {
    let spec = |suffix: &str, dims: Vec<usize>, role| WeightSpec {
        name: format!("{name}.{suffix}"),
        dims,
        role,
    };
    match *op {
        Op::Conv2d {
            in_channels,
            out_channels,
            params,
        } => {
            let mut v = vec![spec(
                "weight",
                vec![out_channels, in_channels, params.kernel.0, params.kernel.1],
                WeightRole::ConvWeight,
            )];
            if params.has_bias {
                v.push(spec("bias", vec![out_channels], WeightRole::ConvBias));
            }
            v
        }
        Op::BatchNorm { channels, .. } => vec![
            spec("gamma", vec![channels], WeightRole::BnGamma),
            spec("beta", vec![channels], WeightRole::BnBeta),
            spec("mean", vec![channels], WeightRole::BnMean),
            spec("var", vec![channels], WeightRole::BnVar),
        ],
        _ => Vec::new(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: NodeId,
    pub name: String,
    pub op: Op,
    pub inputs: Vec<NodeId>,
    pub weights: Vec<WeightSpec>,
}

/// A named feature map consumed by the Up-head.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tap {
    pub name: String,
    pub node: NodeId,
    /// Downsampling factor relative to the input image.
    pub stride: usize,
    pub channels: usize,
}

/// Immutable DAG in topological order. Node `i` has id `NodeId(i)` and only
/// consumes nodes with smaller ids.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGraph {
    name: String,
    nodes: Vec<Node>,
    taps: Vec<Tap>,
    pyramid: Vec<NodeId>,
    output: NodeId,
}

impl LayerGraph {
    /// Assembles and validates a graph.
    pub fn new(
        name: impl Into<String>,
        nodes: Vec<Node>,
        taps: Vec<Tap>,
        pyramid: Vec<NodeId>,
        output: NodeId,
    ) -> Result<Self> {
        let g = LayerGraph {
            name: name.into(),
            nodes,
            taps,
            pyramid,
            output,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Backbone feature taps ordered fine to coarse.
    pub fn taps(&self) -> &[Tap] {
        &self.taps
    }

    /// Up-head outputs ordered coarse to fine. Empty for partial graphs.
    pub fn pyramid(&self) -> &[NodeId] {
        &self.pyramid
    }

    pub fn output(&self) -> NodeId {
        self.output
    }

    pub fn input(&self) -> NodeId {
        NodeId(0)
    }

    pub fn input_channels(&self) -> usize {
        match self.nodes[0].op {
            Op::Input { channels } => channels,
            _ => unreachable!("validated graphs start with an input node"),
        }
    }

    pub fn find(&self, name: &str) -> Option<NodeId> {
        self.nodes.iter().find(|n| n.name == name).map(|n| n.id)
    }

    /// All weight entries in node order.
    pub fn weight_specs(&self) -> impl Iterator<Item = &WeightSpec> {
        self.nodes.iter().flat_map(|n| n.weights.iter())
    }

    /// Consumers of every node.
    pub fn consumers(&self) -> Vec<Vec<NodeId>> {
        let mut out = vec![Vec::new(); self.nodes.len()];
        for n in &self.nodes {
            for &i in &n.inputs {
                out[i.0].push(n.id);
            }
        }
        out
    }

    pub fn count_kind(&self, kind: &str) -> usize {
        self.nodes.iter().filter(|n| n.op.kind() == kind).count()
    }

    fn validate(&self) -> Result<()> {
        if !matches!(self.nodes.first().map(|n| &n.op), Some(Op::Input { .. })) {
            bail!(Graph, "`{}`: first node must be the input", self.name);
        }
        let mut names = HashSet::new();
        for (i, n) in self.nodes.iter().enumerate() {
            if n.id != NodeId(i) {
                bail!(Graph, "node `{}` has id {} at position {}", n.name, n.id, i);
            }
            if i > 0 && matches!(n.op, Op::Input { .. }) {
                bail!(Graph, "second input node `{}`", n.name);
            }
            if !names.insert(n.name.as_str()) {
                bail!(Graph, "duplicate node name `{}`", n.name);
            }
            if let Some(a) = n.op.arity() {
                if n.inputs.len() != a {
                    bail!(
                        Graph,
                        "`{}` takes {} inputs, has {}",
                        n.name,
                        a,
                        n.inputs.len()
                    );
                }
            } else if n.inputs.is_empty() {
                bail!(Graph, "`{}` has no inputs", n.name);
            }
            if let Some(bad) = n.inputs.iter().find(|j| j.0 >= i) {
                bail!(
                    Graph,
                    "`{}` consumes {} which does not precede it",
                    n.name,
                    bad
                );
            }
            if n.weights != weight_specs(&n.name, &n.op) {
                bail!(Graph, "`{}` has inconsistent weight specs", n.name);
            }
        }
        let in_range = |id: NodeId| id.0 < self.nodes.len();
        if !in_range(self.output)
            || !self.pyramid.iter().all(|&p| in_range(p))
            || !self.taps.iter().all(|t| in_range(t.node))
        {
            bail!(Graph, "`{}` references a node out of range", self.name);
        }
        Ok(())
    }
}
