use std::collections::HashMap;

use crate::error::{bail, Result};
use crate::graph::{weight_specs, LayerGraph, Node, NodeId, Op, Tap};
use crate::tensor::ops::batchnorm_affine;
use crate::weights::{WeightEntry, WeightStore};

/// Absorbs every batch norm into the convolution feeding it:
/// `w' = w·γ/√(σ²+ε)` per output channel and `b' = (b − μ)·γ/√(σ²+ε) + β`.
///
/// Each batch norm must consume a convolution whose output nothing else
/// reads. The folded convolutions gain a bias; batch-norm nodes disappear and
/// node ids are renumbered.
pub fn fold_batchnorm(
    graph: &LayerGraph,
    store: &WeightStore,
) -> Result<(LayerGraph, WeightStore)> {
    store.check_against(graph, true)?;
    let consumers = graph.consumers();
    let exposed: Vec<NodeId> = graph
        .taps()
        .iter()
        .map(|t| t.node)
        .chain(graph.pyramid().iter().copied())
        .chain([graph.output()])
        .collect();

    // conv id -> bn id
    let mut folds: HashMap<NodeId, NodeId> = HashMap::new();
    for node in graph.nodes() {
        if let Op::BatchNorm { .. } = node.op {
            let src = node.inputs[0];
            let producer = graph.node(src);
            if !matches!(producer.op, Op::Conv2d { .. }) {
                bail!(
                    Graph,
                    "batch norm `{}` follows {} `{}`, not a convolution",
                    node.name,
                    producer.op.kind(),
                    producer.name
                );
            }
            if consumers[src.0] != [node.id] || exposed.contains(&src) {
                bail!(
                    Graph,
                    "convolution `{}` feeds more than batch norm `{}`",
                    producer.name,
                    node.name
                );
            }
            folds.insert(src, node.id);
        }
    }

    let mut remap: Vec<NodeId> = Vec::with_capacity(graph.len());
    let mut nodes: Vec<Node> = Vec::with_capacity(graph.len() - folds.len());
    let mut entries: Vec<WeightEntry> = Vec::with_capacity(store.len());
    for node in graph.nodes() {
        if let Op::BatchNorm { .. } = node.op {
            if folds.values().any(|&b| b == node.id) {
                remap.push(remap[node.inputs[0].0]);
                continue;
            }
        }
        let id = NodeId(nodes.len());
        remap.push(id);
        let inputs = node.inputs.iter().map(|i| remap[i.0]).collect();
        let op = match (&node.op, folds.get(&node.id)) {
            (
                Op::Conv2d {
                    in_channels,
                    out_channels,
                    params,
                },
                Some(&bn_id),
            ) => {
                let bn = graph.node(bn_id);
                let Op::BatchNorm { eps, .. } = bn.op else {
                    unreachable!()
                };
                let stat = |i: usize| store.data(&bn.weights[i].name);
                let stats = [stat(0)?, stat(1)?, stat(2)?, stat(3)?];
                let affine = batchnorm_affine(stats, eps)?;
                let (beta, mean) = (stats[1], stats[2]);
                let mut w = store.data(&node.weights[0].name)?.to_vec();
                let per_out = w.len() / out_channels;
                let old_bias = match node.weights.get(1) {
                    Some(b) => Some(store.data(&b.name)?),
                    None => None,
                };
                let mut bias = vec![0.0f32; *out_channels];
                for co in 0..*out_channels {
                    let scale = affine[co].0;
                    w[co * per_out..(co + 1) * per_out]
                        .iter_mut()
                        .for_each(|v| *v *= scale);
                    let b = old_bias.map_or(0.0, |b| b[co]);
                    bias[co] = (b - mean[co]) * scale + beta[co];
                }
                let op = Op::Conv2d {
                    in_channels: *in_channels,
                    out_channels: *out_channels,
                    params: params.with_bias(true),
                };
                let specs = weight_specs(&node.name, &op);
                entries.push(WeightEntry::new(
                    specs[0].name.clone(),
                    specs[0].dims.clone(),
                    w,
                )?);
                entries.push(WeightEntry::new(
                    specs[1].name.clone(),
                    specs[1].dims.clone(),
                    bias,
                )?);
                op
            }
            (op, _) => {
                for spec in &node.weights {
                    let e = store.get(&spec.name).expect("checked against graph");
                    entries.push(e.clone());
                }
                op.clone()
            }
        };
        nodes.push(Node {
            id,
            name: node.name.clone(),
            weights: weight_specs(&node.name, &op),
            op,
            inputs,
        });
    }

    let taps = graph
        .taps()
        .iter()
        .map(|t| Tap {
            node: remap[t.node.0],
            ..t.clone()
        })
        .collect();
    let pyramid = graph.pyramid().iter().map(|p| remap[p.0]).collect();
    let folded = LayerGraph::new(
        format!("{}+folded", graph.name()),
        nodes,
        taps,
        pyramid,
        remap[graph.output().0],
    )?;
    Ok((folded, WeightStore::from_entries(entries)?))
}
