//! Parameter, FLOP and memory-traffic accounting per node.
//!
//! Memory traffic assumes nothing is fused: every node reads all its inputs
//! and weights from memory and writes its output, at 4 bytes per element.
//! That makes the figure an upper bound rather than a prediction.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{self, Write};

use crate::error::Result;
use crate::graph::{infer_shapes, LayerGraph, NodeId, Op, WeightRole};
use crate::tensor::Dims;

use super::receptive::{receptive_fields, ReceptiveField};

const BYTES_PER_ELEMENT: u64 = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileRow {
    pub id: NodeId,
    pub name: String,
    pub kind: &'static str,
    /// Learnable parameters: conv weights and biases, batch-norm gamma/beta.
    pub params: u64,
    /// Batch-norm running mean and variance.
    pub bn_stats: u64,
    pub macs: u64,
    /// `2·macs` for convolutions, one per element for elementwise ops and
    /// batch norm, `k²` comparisons per output for max pooling.
    pub flops: u64,
    pub mem_bytes: u64,
    pub output: Option<Dims>,
    pub rf: ReceptiveField,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ProfileTotals {
    pub params: u64,
    pub bn_stats: u64,
    pub macs: u64,
    pub flops: u64,
    pub mem_bytes: u64,
}

impl ProfileTotals {
    fn accumulate(&mut self, r: &ProfileRow) {
        self.params += r.params;
        self.bn_stats += r.bn_stats;
        self.macs += r.macs;
        self.flops += r.flops;
        self.mem_bytes += r.mem_bytes;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileReport {
    pub model: String,
    /// `None` for parameter-only reports.
    pub input: Option<Dims>,
    pub rows: Vec<ProfileRow>,
    pub totals: ProfileTotals,
}

fn rows_for(graph: &LayerGraph, input: Option<Dims>) -> Result<Vec<ProfileRow>> {
    let rfs = receptive_fields(graph)?;
    let shapes = input.map(|d| infer_shapes(graph, d)).transpose()?;
    let mut rows = Vec::with_capacity(graph.len());
    for node in graph.nodes() {
        let (mut params, mut bn_stats) = (0u64, 0u64);
        for spec in &node.weights {
            if spec.role.is_learnable() {
                params += spec.len() as u64;
            } else {
                bn_stats += spec.len() as u64;
            }
        }
        let mut row = ProfileRow {
            id: node.id,
            name: node.name.clone(),
            kind: node.op.kind(),
            params,
            bn_stats,
            macs: 0,
            flops: 0,
            mem_bytes: 0,
            output: None,
            rf: rfs[node.id.0],
        };
        if let Some(shapes) = &shapes {
            let out = shapes.get(node.id);
            let out_len = out.len() as u64;
            row.output = Some(out);
            match node.op {
                Op::Input { .. } => {}
                Op::Conv2d {
                    in_channels,
                    params,
                    ..
                } => {
                    let per_output = (in_channels * params.kernel.0 * params.kernel.1) as u64;
                    row.macs = out_len * per_output;
                    row.flops = 2 * row.macs;
                }
                Op::BatchNorm { .. } | Op::Relu | Op::Add => row.flops = out_len,
                Op::MaxPool { kernel, .. } => row.flops = out_len * (kernel * kernel) as u64,
                Op::Upsample { .. } | Op::Concat => {}
            }
            if !matches!(node.op, Op::Input { .. }) {
                let read: u64 = node
                    .inputs
                    .iter()
                    .map(|i| shapes.get(*i).len() as u64)
                    .sum();
                let weights: u64 = node.weights.iter().map(|s| s.len() as u64).sum();
                row.mem_bytes = BYTES_PER_ELEMENT * (read + weights + out_len);
            }
        }
        rows.push(row);
    }
    Ok(rows)
}

fn report(graph: &LayerGraph, input: Option<Dims>) -> Result<ProfileReport> {
    let rows = rows_for(graph, input)?;
    let mut totals = ProfileTotals::default();
    rows.iter().for_each(|r| totals.accumulate(r));
    Ok(ProfileReport {
        model: graph.name().to_string(),
        input,
        rows,
        totals,
    })
}

/// Parameter counts only; compute and traffic columns are zero.
pub fn count_params(graph: &LayerGraph) -> Result<ProfileReport> {
    report(graph, None)
}

/// Full per-node profile at the given input size.
pub fn count_flops(graph: &LayerGraph, input: Dims) -> Result<ProfileReport> {
    report(graph, Some(input))
}

/// Total unfused memory traffic in bytes, summed directly from the shape map.
pub fn memory_traffic_estimate(graph: &LayerGraph, input: Dims) -> Result<u64> {
    let shapes = infer_shapes(graph, input)?;
    let mut elements = 0u64;
    for node in graph.nodes().iter().skip(1) {
        elements += node
            .inputs
            .iter()
            .map(|i| shapes.get(*i).len() as u64)
            .sum::<u64>();
        elements += graph
            .node(node.id)
            .weights
            .iter()
            .map(|s| s.len() as u64)
            .sum::<u64>();
        elements += shapes.get(node.id).len() as u64;
    }
    Ok(BYTES_PER_ELEMENT * elements)
}

/// Totals of conv weights only, the usual "parameter count" of a backbone.
pub fn conv_weight_count(graph: &LayerGraph) -> u64 {
    graph
        .weight_specs()
        .filter(|s| s.role == WeightRole::ConvWeight)
        .map(|s| s.len() as u64)
        .sum()
}

impl ProfileReport {
    /// Totals grouped by the first component of node names (`stem`,
    /// `backbone`, `up`, `seg`), in first-appearance order.
    pub fn section_totals(&self) -> Vec<(String, ProfileTotals)> {
        let mut order: Vec<String> = Vec::new();
        let mut by: BTreeMap<String, ProfileTotals> = BTreeMap::new();
        for r in &self.rows {
            let section = r.name.split('.').next().unwrap_or("").to_string();
            if !by.contains_key(&section) {
                order.push(section.clone());
            }
            by.entry(section).or_default().accumulate(r);
        }
        order
            .into_iter()
            .map(|s| {
                let t = by[&s];
                (s, t)
            })
            .collect()
    }

    pub fn write_csv(&self, mut w: impl Write) -> io::Result<()> {
        writeln!(w, "id,name,kind,params,bn_stats,macs,flops,mem_bytes,r,j")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{}",
                r.id.0,
                r.name,
                r.kind,
                r.params,
                r.bn_stats,
                r.macs,
                r.flops,
                r.mem_bytes,
                r.rf.vertical.r,
                r.rf.vertical.j
            )?;
        }
        let t = &self.totals;
        writeln!(
            w,
            "total,{},model,{},{},{},{},{},,",
            self.model, t.params, t.bn_stats, t.macs, t.flops, t.mem_bytes
        )
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let name_w = self
            .rows
            .iter()
            .map(|r| r.name.len())
            .max()
            .unwrap_or(4)
            .max(4);
        let _ = writeln!(
            s,
            "{:>5}  {:<name_w$}  {:<8}  {:>18}  {:>10}  {:>14}  {:>12}  {:>14}  {:>5}  {:>3}",
            "id", "name", "kind", "output", "params", "macs", "flops", "mem_bytes", "r", "j"
        );
        for r in &self.rows {
            let out = r.output.map(|d| d.to_string()).unwrap_or_default();
            let _ = writeln!(
                s,
                "{:>5}  {:<name_w$}  {:<8}  {:>18}  {:>10}  {:>14}  {:>12}  {:>14}  {:>5}  {:>3}",
                r.id.0,
                r.name,
                r.kind,
                out,
                r.params,
                r.macs,
                r.flops,
                r.mem_bytes,
                r.rf.vertical.r,
                r.rf.vertical.j
            );
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "model {}", self.model);
        if let Some(d) = self.input {
            let _ = writeln!(s, "input {d}");
        }
        for (section, t) in self.section_totals() {
            let _ = writeln!(
                s,
                "  {:<10} params {:>12}  GMACs {:>10.3}  MB moved {:>10.1}",
                section,
                t.params,
                t.macs as f64 / 1e9,
                t.mem_bytes as f64 / 1e6
            );
        }
        let t = &self.totals;
        let _ = writeln!(s, "learnable params  {}", t.params);
        let _ = writeln!(s, "bn statistics     {}", t.bn_stats);
        let _ = writeln!(s, "GMACs             {:.3}", t.macs as f64 / 1e9);
        let _ = writeln!(s, "GFLOPs            {:.3}", t.flops as f64 / 1e9);
        let _ = writeln!(s, "memory traffic    {:.1} MB", t.mem_bytes as f64 / 1e6);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::GraphBuilder;
    use crate::tensor::{ConvParams, UpsampleMode};

    #[test]
    fn conv_counts() {
        let mut b = GraphBuilder::new(64);
        let c = b.conv("c", b.input(), 64, ConvParams::square(3, 1, 1));
        let g = b.finish("g", c, vec![]).unwrap();
        assert_eq!(count_params(&g).unwrap().totals.params, 36864);

        let mut b = GraphBuilder::new(4);
        let c = b.conv("c", b.input(), 8, ConvParams::square(1, 1, 0));
        let g = b.finish("g", c, vec![]).unwrap();
        let p = count_flops(&g, Dims::new(1, 4, 2, 2)).unwrap();
        assert_eq!(p.rows[1].macs, 128);
        assert_eq!(p.rows[1].flops, 256);
    }

    #[test]
    fn data_movement_nodes() {
        let mut b = GraphBuilder::new(64);
        let i = b.input();
        let p = b.max_pool("p", i, 2, 2, 0);
        let r = b.relu("r", i);
        let u = b.upsample("u", p, 2, UpsampleMode::Nearest).unwrap();
        let c = b.concat("cat", &[r, u]).unwrap();
        let g = b.finish("g", c, vec![]).unwrap();
        let d = Dims::new(1, 64, 128, 256);
        let rep = count_flops(&g, d).unwrap();
        let n = d.len() as u64;
        let row = |id: NodeId| &rep.rows[id.0];
        assert_eq!(row(r).mem_bytes, 4 * 2 * 64 * 128 * 256);
        assert_eq!((row(u).macs, row(u).mem_bytes), (0, 4 * (n / 4 + n)));
        assert_eq!(
            (row(c).macs, row(c).flops, row(c).mem_bytes),
            (0, 0, 4 * (2 * n + 2 * n))
        );
        assert_eq!(
            rep.totals.mem_bytes,
            memory_traffic_estimate(&g, d).unwrap()
        );
    }
}
