use crate::error::{Error, Result};
use crate::tensor::ops::{concat_dims, pool_dims};
use crate::tensor::Dims;

use super::{LayerGraph, NodeId, Op};

/// Output dims of every node for one input size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeMap {
    dims: Vec<Dims>,
}

impl ShapeMap {
    pub fn get(&self, id: NodeId) -> Dims {
        self.dims[id.0]
    }

    pub fn len(&self) -> usize {
        self.dims.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dims.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, Dims)> + '_ {
        self.dims.iter().enumerate().map(|(i, d)| (NodeId(i), *d))
    }
}

/// Propagates dims through the graph using the same shape rules as the
/// kernels, without executing anything.
pub fn infer_shapes(graph: &LayerGraph, input: Dims) -> Result<ShapeMap> {
    let mut dims: Vec<Dims> = Vec::with_capacity(graph.len());
    for node in graph.nodes() {
        let ins: Vec<Dims> = node.inputs.iter().map(|i| dims[i.0]).collect();
        let context = |e: Error| Error::ShapeMismatch(format!("node `{}`: {}", node.name, e));
        let d = match &node.op {
            Op::Input { channels } => {
                if input.c != *channels || input.is_empty() {
                    return Err(Error::ShapeMismatch(format!(
                        "input {} does not match a {}-channel graph",
                        input, channels
                    )));
                }
                input
            }
            Op::Conv2d {
                in_channels,
                out_channels,
                params,
            } => {
                let x = ins[0];
                if x.c != *in_channels {
                    return Err(context(Error::ShapeMismatch(format!(
                        "expects {} channels, got {}",
                        in_channels, x.c
                    ))));
                }
                let (h, w) = params.output_hw(x.h, x.w).map_err(context)?;
                Dims::new(x.n, *out_channels, h, w)
            }
            Op::BatchNorm { channels, .. } => {
                if ins[0].c != *channels {
                    return Err(context(Error::ShapeMismatch(format!(
                        "expects {} channels, got {}",
                        channels, ins[0].c
                    ))));
                }
                ins[0]
            }
            Op::Relu => ins[0],
            Op::Add => {
                if ins[0] != ins[1] {
                    return Err(context(Error::ShapeMismatch(format!(
                        "add of {} and {}",
                        ins[0], ins[1]
                    ))));
                }
                ins[0]
            }
            Op::MaxPool {
                kernel,
                stride,
                padding,
            } => pool_dims(ins[0], *kernel, *stride, *padding).map_err(context)?,
            Op::Upsample { factor, .. } => {
                let x = ins[0];
                Dims::new(x.n, x.c, x.h * factor, x.w * factor)
            }
            Op::Concat => concat_dims(&ins).map_err(context)?,
        };
        dims.push(d);
    }
    Ok(ShapeMap { dims })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_model, build_stem_graph, ModelConfig, Variant};

    #[test]
    fn stems_reach_quarter_resolution() {
        for v in Variant::ALL {
            let g = build_stem_graph(v).unwrap();
            let s = infer_shapes(&g, Dims::new(1, 3, 1024, 2048)).unwrap();
            assert_eq!(s.get(g.output()), Dims::new(1, 64, 256, 512), "stem {v}");
        }
        let c = build_stem_graph(Variant::C).unwrap();
        assert_eq!(c.count_kind("conv"), 3);
        assert_eq!(c.count_kind("maxpool"), 0);
    }

    #[test]
    fn smallest_legal_input_for_a_stride_64_model() {
        let cfg = ModelConfig::from_registry("resnet18")
            .unwrap()
            .with_stride1(2);
        let g = build_model(&cfg).unwrap();
        let s = infer_shapes(&g, Dims::new(1, 3, 64, 128)).unwrap();
        assert_eq!(s.get(g.output()), Dims::new(1, 19, 8, 16));
        assert_eq!(s.len(), g.len());
        assert!(infer_shapes(&g, Dims::new(1, 3, 32, 64)).is_err());
    }

    #[test]
    fn wrong_input_channels() {
        let g = build_stem_graph(Variant::A).unwrap();
        assert!(infer_shapes(&g, Dims::new(1, 1, 64, 64)).is_err());
    }
}
