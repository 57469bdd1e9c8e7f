use std::sync::Arc;

use crate::error::{bail, Error, Result};
use crate::graph::{infer_shapes, LayerGraph, NodeId, Op, ShapeMap};
use crate::tensor::ops::{
    add_into, batchnorm_into, concat_into, conv2d_into, maxpool_into, relu_into, upsample_into,
};
use crate::tensor::{reference, Dims, Filter, Tensor};
use crate::weights::WeightStore;

/// Which kernel implementations a session runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KernelPath {
    #[default]
    Optimized,
    /// Direct loop implementations; orders of magnitude slower.
    Reference,
}

/// Results of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceOutput {
    /// Backbone taps in graph order (fine to coarse).
    pub taps: Vec<Tensor>,
    /// Up-head features, coarse to fine.
    pub pyramid: Vec<Tensor>,
    /// The graph output; class logits for full models.
    pub logits: Tensor,
}

/// Executes one graph with one weight store at a fixed input size.
///
/// Activation buffers are planned once from the shape map: a node's buffer
/// returns to the pool after its last consumer runs, and later nodes reuse
/// it. Outputs that are returned to the caller stay resident.
pub struct InferenceSession {
    graph: Arc<LayerGraph>,
    weights: Arc<WeightStore>,
    shapes: ShapeMap,
    input_dims: Dims,
    path: KernelPath,
    /// Entry indices into `weights`, per node, in weight-spec order.
    node_weights: Vec<Vec<usize>>,
    node_slot: Vec<usize>,
    slots: Vec<Tensor>,
}

impl InferenceSession {
    pub fn new(
        graph: Arc<LayerGraph>,
        weights: Arc<WeightStore>,
        input_dims: Dims,
    ) -> Result<Self> {
        Self::with_path(graph, weights, input_dims, KernelPath::Optimized)
    }

    pub fn with_path(
        graph: Arc<LayerGraph>,
        weights: Arc<WeightStore>,
        input_dims: Dims,
        path: KernelPath,
    ) -> Result<Self> {
        weights.check_against(&graph, true)?;
        let shapes = infer_shapes(&graph, input_dims)?;
        let node_weights = resolve_weights(&graph, &weights);
        let (node_slot, slot_caps) = plan_buffers(&graph, &shapes);
        let slots = slot_caps
            .into_iter()
            .map(|cap| Tensor::zeros(Dims::new(1, 1, 1, cap)))
            .collect();
        Ok(InferenceSession {
            graph,
            weights,
            shapes,
            input_dims,
            path,
            node_weights,
            node_slot,
            slots,
        })
    }

    pub fn graph(&self) -> &LayerGraph {
        &self.graph
    }

    pub fn shapes(&self) -> &ShapeMap {
        &self.shapes
    }

    pub fn input_dims(&self) -> Dims {
        self.input_dims
    }

    /// Number of distinct activation buffers after planning.
    pub fn buffer_count(&self) -> usize {
        self.slots.len()
    }

    /// Total activation memory held by the session, in bytes.
    pub fn buffer_bytes(&self) -> usize {
        self.slots.iter().map(|s| s.data().len() * 4).sum()
    }

    pub fn run(&mut self, input: &Tensor) -> Result<InferenceOutput> {
        if input.dims() != self.input_dims {
            bail!(
                ShapeMismatch,
                "session expects input {}, got {}",
                self.input_dims,
                input.dims()
            );
        }
        for node in self.graph.nodes() {
            let slot = self.node_slot[node.id.0];
            let mut out = std::mem::take(&mut self.slots[slot]);
            let result = if let Op::Input { .. } = node.op {
                out.reset(input.dims());
                out.data_mut().copy_from_slice(input.data());
                Ok(())
            } else {
                let ins: Vec<&Tensor> = node
                    .inputs
                    .iter()
                    .map(|i| &self.slots[self.node_slot[i.0]])
                    .collect();
                let ws: Vec<&[f32]> = self.node_weights[node.id.0]
                    .iter()
                    .map(|&e| self.weights.entries()[e].data.as_slice())
                    .collect();
                execute(&node.op, &ins, &ws, self.path, &mut out)
            };
            self.slots[slot] = out;
            result.map_err(|e| Error::Graph(format!("node `{}`: {}", node.name, e)))?;
            debug_assert_eq!(self.slots[slot].dims(), self.shapes.get(node.id));
        }
        let fetch = |id: NodeId| self.slots[self.node_slot[id.0]].clone();
        Ok(InferenceOutput {
            taps: self.graph.taps().iter().map(|t| fetch(t.node)).collect(),
            pyramid: self.graph.pyramid().iter().map(|&p| fetch(p)).collect(),
            logits: fetch(self.graph.output()),
        })
    }
}

/// Runs one forward pass through `session`.
pub fn run_inference(session: &mut InferenceSession, input: &Tensor) -> Result<InferenceOutput> {
    session.run(input)
}

fn resolve_weights(graph: &LayerGraph, weights: &WeightStore) -> Vec<Vec<usize>> {
    let index: std::collections::HashMap<&str, usize> = weights
        .entries()
        .iter()
        .enumerate()
        .map(|(i, e)| (e.name.as_str(), i))
        .collect();
    graph
        .nodes()
        .iter()
        .map(|n| n.weights.iter().map(|s| index[s.name.as_str()]).collect())
        .collect()
}

/// Index of the last consumer of each node; `usize::MAX` for nodes that must
/// survive the whole pass.
fn last_uses(graph: &LayerGraph) -> Vec<usize> {
    let mut last = vec![0usize; graph.len()];
    for n in graph.nodes() {
        for i in &n.inputs {
            last[i.0] = last[i.0].max(n.id.0);
        }
    }
    let kept = graph
        .taps()
        .iter()
        .map(|t| t.node)
        .chain(graph.pyramid().iter().copied())
        .chain([graph.output()]);
    for id in kept {
        last[id.0] = usize::MAX;
    }
    last
}

/// Greedy buffer assignment: each node takes the smallest free buffer that
/// fits, else the largest free one (grown), else a new one.
fn plan_buffers(graph: &LayerGraph, shapes: &ShapeMap) -> (Vec<usize>, Vec<usize>) {
    let last = last_uses(graph);
    let mut caps: Vec<usize> = Vec::new();
    let mut free: Vec<usize> = Vec::new();
    let mut node_slot = vec![0usize; graph.len()];
    for n in graph.nodes() {
        let need = shapes.get(n.id).len();
        let fit = free
            .iter()
            .enumerate()
            .filter(|(_, &s)| caps[s] >= need)
            .min_by_key(|(_, &s)| caps[s])
            .map(|(i, _)| i)
            .or_else(|| {
                free.iter()
                    .enumerate()
                    .max_by_key(|(_, &s)| caps[s])
                    .map(|(i, _)| i)
            });
        let slot = match fit {
            Some(i) => free.swap_remove(i),
            None => {
                caps.push(0);
                caps.len() - 1
            }
        };
        caps[slot] = caps[slot].max(need);
        node_slot[n.id.0] = slot;
        let mut released: Vec<usize> = n
            .inputs
            .iter()
            .filter(|i| last[i.0] == n.id.0)
            .map(|i| node_slot[i.0])
            .collect();
        released.sort_unstable();
        released.dedup();
        free.extend(released);
        if last[n.id.0] == 0 && n.id.0 != 0 {
            // no consumers and not an output
            free.push(slot);
        }
    }
    (node_slot, caps)
}

/// Evaluates one op. `weights` are the node's entries in weight-spec order.
pub(crate) fn execute(
    op: &Op,
    inputs: &[&Tensor],
    weights: &[&[f32]],
    path: KernelPath,
    out: &mut Tensor,
) -> Result<()> {
    let reference = path == KernelPath::Reference;
    match *op {
        Op::Input { .. } => bail!(Graph, "input nodes are not executable"),
        Op::Conv2d {
            in_channels,
            out_channels,
            params,
        } => {
            let filter = Filter::new(
                weights[0],
                [out_channels, in_channels, params.kernel.0, params.kernel.1],
            )?;
            let bias = weights.get(1).copied();
            if reference {
                let w = Tensor::from_vec(
                    Dims::new(out_channels, in_channels, params.kernel.0, params.kernel.1),
                    weights[0].to_vec(),
                )?;
                *out = reference::conv2d(inputs[0], &w, bias, &params)?;
                Ok(())
            } else {
                conv2d_into(inputs[0], filter, bias, &params, out)
            }
        }
        Op::BatchNorm { eps, .. } => {
            let stats = [weights[0], weights[1], weights[2], weights[3]];
            if reference {
                *out = reference::batchnorm_infer(
                    inputs[0], stats[0], stats[1], stats[2], stats[3], eps,
                )?;
                Ok(())
            } else {
                batchnorm_into(inputs[0], stats, eps, out)
            }
        }
        Op::Relu => {
            relu_into(inputs[0], out);
            Ok(())
        }
        Op::Add => add_into(inputs[0], inputs[1], out),
        Op::MaxPool {
            kernel,
            stride,
            padding,
        } => {
            if reference {
                *out = reference::maxpool2d(inputs[0], kernel, stride, padding)?;
                Ok(())
            } else {
                maxpool_into(inputs[0], kernel, stride, padding, out)
            }
        }
        Op::Upsample { factor, mode } => {
            if reference {
                *out = reference::upsample(inputs[0], factor, mode)?;
                Ok(())
            } else {
                upsample_into(inputs[0], factor, mode, out)
            }
        }
        Op::Concat => {
            if reference {
                *out = reference::concat_channels(inputs)?;
                Ok(())
            } else {
                concat_into(inputs, out)
            }
        }
    }
}

/// Replaces every batch norm's running mean and variance with the
/// per-channel statistics of its input on `input`, as a trained network's
/// statistics would be. Gamma and beta are kept.
pub fn calibrate_batchnorm(
    graph: &LayerGraph,
    store: &WeightStore,
    input: &Tensor,
) -> Result<WeightStore> {
    store.check_against(graph, true)?;
    infer_shapes(graph, input.dims())?;
    let mut out_store = store.clone();
    let last = last_uses(graph);
    let mut values: Vec<Option<Tensor>> = vec![None; graph.len()];
    for node in graph.nodes() {
        let mut out = Tensor::default();
        if let Op::Input { .. } = node.op {
            out = input.clone();
        } else {
            let ins: Vec<&Tensor> = node
                .inputs
                .iter()
                .map(|i| values[i.0].as_ref().expect("live input"))
                .collect();
            if let Op::BatchNorm { channels, .. } = node.op {
                let (mean, var) = channel_stats(ins[0]);
                debug_assert_eq!(mean.len(), channels);
                out_store
                    .data_mut(&node.weights[2].name)
                    .expect("checked")
                    .copy_from_slice(&mean);
                out_store
                    .data_mut(&node.weights[3].name)
                    .expect("checked")
                    .copy_from_slice(&var);
            }
            let ws: Vec<&[f32]> = node
                .weights
                .iter()
                .map(|s| out_store.data(&s.name))
                .collect::<Result<_>>()?;
            execute(&node.op, &ins, &ws, KernelPath::Optimized, &mut out)
                .map_err(|e| Error::Graph(format!("node `{}`: {}", node.name, e)))?;
        }
        for i in &node.inputs {
            if last[i.0] == node.id.0 {
                values[i.0] = None;
            }
        }
        values[node.id.0] = Some(out);
    }
    Ok(out_store)
}

/// Per-channel mean and (biased) variance over batch and space.
fn channel_stats(x: &Tensor) -> (Vec<f32>, Vec<f32>) {
    let d = x.dims();
    let count = (d.n * d.plane()) as f64;
    let mut mean = vec![0.0f32; d.c];
    let mut var = vec![0.0f32; d.c];
    for c in 0..d.c {
        let mut sum = 0.0f64;
        for n in 0..d.n {
            sum += x.plane(n, c).iter().map(|&v| v as f64).sum::<f64>();
        }
        let m = sum / count;
        let mut sq = 0.0f64;
        for n in 0..d.n {
            sq += x
                .plane(n, c)
                .iter()
                .map(|&v| (v as f64 - m).powi(2))
                .sum::<f64>();
        }
        mean[c] = m as f32;
        var[c] = (sq / count) as f32;
    }
    (mean, var)
}

/// Entry-by-entry copy of `store` with batch-norm gamma and beta replaced by
/// `f(name, index)`. Handy for making folding tests non-trivial.
pub fn map_batchnorm_affine(
    graph: &LayerGraph,
    store: &WeightStore,
    mut f: impl FnMut(&str, usize) -> (f32, f32),
) -> Result<WeightStore> {
    let mut out = store.clone();
    for node in graph.nodes() {
        if let Op::BatchNorm { channels, .. } = node.op {
            let (mut gamma, mut beta) = (vec![0.0; channels], vec![0.0; channels]);
            for c in 0..channels {
                (gamma[c], beta[c]) = f(&node.name, c);
            }
            out.data_mut(&node.weights[0].name)
                .ok_or_else(|| Error::MissingWeight(node.weights[0].name.clone()))?
                .copy_from_slice(&gamma);
            out.data_mut(&node.weights[1].name)
                .ok_or_else(|| Error::MissingWeight(node.weights[1].name.clone()))?
                .copy_from_slice(&beta);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_model, build_stem_graph, ModelConfig, Variant};
    use crate::weights::{init_constant, init_random};

    fn tiny_model() -> (Arc<LayerGraph>, ModelConfig) {
        let cfg = ModelConfig::from_registry("resnet22s")
            .unwrap()
            .with_variants(Variant::C, Variant::C, Variant::C)
            .with_stride1(2)
            .with_input(64, 128);
        (Arc::new(build_model(&cfg).unwrap()), cfg)
    }

    fn random_input(dims: Dims, seed: u32) -> Tensor {
        let mut s = seed.wrapping_mul(2654435761).wrapping_add(1);
        Tensor::from_fn(dims, |_, _, _, _| {
            s ^= s << 13;
            s ^= s >> 17;
            s ^= s << 5;
            (s as f32 / u32::MAX as f32) * 2.0 - 1.0
        })
    }

    #[test]
    fn buffers_are_reused() {
        let (g, _) = tiny_model();
        let w = Arc::new(init_random(&g, 0));
        let s = InferenceSession::new(g.clone(), w, Dims::new(1, 3, 64, 128)).unwrap();
        assert!(
            s.buffer_count() * 4 < g.len(),
            "{} buffers for {} nodes",
            s.buffer_count(),
            g.len()
        );
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let (g, _) = tiny_model();
        let w = Arc::new(init_constant(&g, |_| 0.0));
        let dims = Dims::new(1, 3, 64, 128);
        let mut s = InferenceSession::new(g, w, dims).unwrap();
        let out = s.run(&Tensor::zeros(dims)).unwrap();
        assert_eq!(out.logits.dims(), Dims::new(1, 19, 8, 16));
        assert!(out.logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn repeated_and_interleaved_runs_are_identical() {
        let (g, _) = tiny_model();
        let w = Arc::new(init_random(&g, 3));
        let dims = Dims::new(1, 3, 64, 128);
        let mut s = InferenceSession::new(g, w, dims).unwrap();
        let a = random_input(dims, 1);
        let b = random_input(dims, 2);
        let first = s.run(&a).unwrap();
        let other = s.run(&b).unwrap();
        let again = s.run(&a).unwrap();
        assert_eq!(first, again);
        assert_ne!(first.logits, other.logits);
        assert_eq!(first.pyramid.len(), 4);
        assert_eq!(first.taps.len(), 4);
    }

    #[test]
    fn reference_path_agrees() {
        let g = Arc::new(build_stem_graph(Variant::A).unwrap());
        let w = Arc::new(init_random(&g, 5));
        let dims = Dims::new(1, 3, 32, 40);
        let x = random_input(dims, 9);
        let fast = InferenceSession::new(g.clone(), w.clone(), dims)
            .unwrap()
            .run(&x)
            .unwrap();
        let slow = InferenceSession::with_path(g, w, dims, KernelPath::Reference)
            .unwrap()
            .run(&x)
            .unwrap();
        let scale = slow.logits.max_abs().max(1e-6);
        assert!(fast.logits.max_abs_diff(&slow.logits) / scale < 1e-5);
    }

    #[test]
    fn rejects_wrong_input_and_missing_weights() {
        let (g, _) = tiny_model();
        let w = init_random(&g, 0);
        let mut s = InferenceSession::new(g.clone(), Arc::new(w.clone()), Dims::new(1, 3, 64, 128))
            .unwrap();
        assert!(s.run(&Tensor::zeros(Dims::new(1, 3, 64, 64))).is_err());
        let partial = WeightStore::from_entries(w.entries()[2..].to_vec()).unwrap();
        assert!(matches!(
            InferenceSession::new(g, Arc::new(partial), Dims::new(1, 3, 64, 128)),
            Err(Error::MissingWeight(_))
        ));
    }

    #[test]
    fn calibration_normalizes_batch_norm_outputs() {
        let g = build_stem_graph(Variant::B).unwrap();
        let w = init_random(&g, 2);
        let x = random_input(Dims::new(1, 3, 32, 32), 4);
        let cal = calibrate_batchnorm(&g, &w, &x).unwrap();
        let mean = cal.data("stem.conv1.bn.mean").unwrap();
        let var = cal.data("stem.conv1.bn.var").unwrap();
        assert!(mean.iter().any(|&m| m != 0.0));
        assert!(var.iter().all(|&v| v > 0.0 && v != 1.0));
    }
}
