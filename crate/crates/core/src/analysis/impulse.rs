//! Measures receptive fields by running the network on impulse images.
//!
//! Every convolution gets weight `1/cin`, biases are zero and batch norm is
//! the identity, so all activations are non-negative and an output pixel is
//! positive exactly when some lit input pixel lies in its receptive field.
//! That makes "is the left edge of the field at or before column `m`?" a
//! monotone question: light every pixel of the centre row up to `m` and look
//! at the output pixel. Each edge is found by binary search, with all open
//! searches batched into one forward pass.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{bail, Result};
use crate::graph::{infer_shapes, LayerGraph, NodeId};
use crate::runtime::InferenceSession;
use crate::tensor::{Dims, Tensor};
use crate::weights::init_constant;

/// Measured support of one feature map's centre pixel. Bounds are inclusive
/// input coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct ImpulseSupport {
    pub name: String,
    pub node: NodeId,
    /// The output pixel `(y, x)` whose field was measured.
    pub pixel: (usize, usize),
    pub rows: (usize, usize),
    pub cols: (usize, usize),
    /// The field reaches the image border, so the true support may be larger.
    pub clipped: bool,
}

impl ImpulseSupport {
    pub fn height(&self) -> usize {
        self.rows.1 - self.rows.0 + 1
    }

    pub fn width(&self) -> usize {
        self.cols.1 - self.cols.0 + 1
    }

    /// Centre of the measured box, `(y, x)`.
    pub fn centre(&self) -> (f64, f64) {
        (
            (self.rows.0 + self.rows.1) as f64 / 2.0,
            (self.cols.0 + self.cols.1) as f64 / 2.0,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Edge {
    Top,
    Bottom,
    Left,
    Right,
}

struct Search {
    target: usize,
    edge: Edge,
    lo: usize,
    hi: usize,
}

impl Search {
    fn probe(&self) -> usize {
        match self.edge {
            Edge::Top | Edge::Left => (self.lo + self.hi) / 2,
            Edge::Bottom | Edge::Right => (self.lo + self.hi).div_ceil(2),
        }
    }

    fn update(&mut self, m: usize, hit: bool) {
        match (self.edge, hit) {
            (Edge::Top | Edge::Left, true) => self.hi = m,
            (Edge::Top | Edge::Left, false) => self.lo = m + 1,
            (Edge::Bottom | Edge::Right, true) => self.lo = m,
            (Edge::Bottom | Edge::Right, false) => self.hi = m - 1,
        }
    }
}

struct Prober {
    graph: Arc<LayerGraph>,
    weights: Arc<crate::weights::WeightStore>,
    dims: Dims,
    sessions: HashMap<usize, InferenceSession>,
    /// Per target, `None` for the graph output or the index of a tap.
    targets: Vec<Option<usize>>,
}

impl Prober {
    /// Runs one image per entry of `lit` (each a list of lit pixels) and
    /// returns, per image, the target feature maps.
    fn run(&mut self, lit: &[Vec<(usize, usize)>]) -> Result<Vec<Tensor>> {
        let n = lit.len();
        let dims = Dims { n, ..self.dims };
        let mut input = Tensor::zeros(dims);
        let plane = dims.plane();
        for (i, pixels) in lit.iter().enumerate() {
            for &(y, x) in pixels {
                for c in 0..dims.c {
                    input.data_mut()[(i * dims.c + c) * plane + y * dims.w + x] = 1.0;
                }
            }
        }
        if !self.sessions.contains_key(&n) {
            let s = InferenceSession::new(self.graph.clone(), self.weights.clone(), dims)?;
            self.sessions.insert(n, s);
        }
        let out = self.sessions.get_mut(&n).expect("inserted").run(&input)?;
        let maps: Vec<Tensor> = self
            .targets
            .iter()
            .map(|t| match t {
                None => out.logits.clone(),
                Some(i) => out.taps[*i].clone(),
            })
            .collect();
        if let Some(bad) = maps.iter().position(|m| !m.is_finite()) {
            bail!(
                InvalidInput,
                "impulse response overflowed at target {} of `{}`; the graph is too deep for this probe",
                bad,
                self.graph.name()
            );
        }
        Ok(maps)
    }
}

/// Sum over channels of batch item `n` at `(y, x)`.
fn response(t: &Tensor, n: usize, (y, x): (usize, usize)) -> f32 {
    (0..t.dims().c).map(|c| t.at(n, c, y, x)).sum()
}

/// Measures the support of every tap and of the graph output on an input of
/// `input_hw`. Fields touching the border are flagged as clipped rather than
/// treated as errors.
pub fn impulse_support_oracle(
    graph: &LayerGraph,
    input_hw: (usize, usize),
) -> Result<Vec<ImpulseSupport>> {
    let (h, w) = input_hw;
    let dims = Dims::new(1, graph.input_channels(), h, w);
    infer_shapes(graph, dims)?;
    let mut names = Vec::new();
    let mut nodes = Vec::new();
    let mut targets = Vec::new();
    for (i, tap) in graph.taps().iter().enumerate() {
        names.push(tap.name.clone());
        nodes.push(tap.node);
        targets.push(Some(i));
    }
    if !nodes.contains(&graph.output()) {
        names.push(graph.node(graph.output()).name.clone());
        nodes.push(graph.output());
        targets.push(None);
    }
    let weights = init_constant(graph, |d| 1.0 / d[1] as f32);
    let mut prober = Prober {
        graph: Arc::new(graph.clone()),
        weights: Arc::new(weights),
        dims,
        sessions: HashMap::new(),
        targets,
    };

    let (cy, cx) = (h / 2, w / 2);
    let centre = prober.run(&[vec![(cy, cx)]])?;
    let mut pixels = Vec::with_capacity(nodes.len());
    for (t, map) in centre.iter().enumerate() {
        let d = map.dims();
        let mut bbox: Option<(usize, usize, usize, usize)> = None;
        for y in 0..d.h {
            for x in 0..d.w {
                if response(map, 0, (y, x)) > 0.0 {
                    bbox = Some(match bbox {
                        None => (y, y, x, x),
                        Some((y0, y1, x0, x1)) => (y0.min(y), y1.max(y), x0.min(x), x1.max(x)),
                    });
                }
            }
        }
        let Some((y0, y1, x0, x1)) = bbox else {
            bail!(
                InvalidInput,
                "`{}` does not respond to a centre impulse",
                names[t]
            );
        };
        let p = ((y0 + y1) / 2, (x0 + x1) / 2);
        if response(map, 0, p) <= 0.0 {
            bail!(
                InvalidInput,
                "`{}` responds to a centre impulse with a hole",
                names[t]
            );
        }
        pixels.push(p);
    }

    let mut searches: Vec<Search> = Vec::new();
    for t in 0..nodes.len() {
        for (edge, lo, hi) in [
            (Edge::Top, 0, cy),
            (Edge::Bottom, cy, h - 1),
            (Edge::Left, 0, cx),
            (Edge::Right, cx, w - 1),
        ] {
            searches.push(Search {
                target: t,
                edge,
                lo,
                hi,
            });
        }
    }
    loop {
        let open: Vec<usize> = (0..searches.len())
            .filter(|&i| searches[i].lo < searches[i].hi)
            .collect();
        if open.is_empty() {
            break;
        }
        let probes: Vec<usize> = open.iter().map(|&i| searches[i].probe()).collect();
        let lit: Vec<Vec<(usize, usize)>> = open
            .iter()
            .zip(&probes)
            .map(|(&i, &m)| match searches[i].edge {
                Edge::Top => (0..=m).map(|y| (y, cx)).collect(),
                Edge::Bottom => (m..h).map(|y| (y, cx)).collect(),
                Edge::Left => (0..=m).map(|x| (cy, x)).collect(),
                Edge::Right => (m..w).map(|x| (cy, x)).collect(),
            })
            .collect();
        let maps = prober.run(&lit)?;
        for (n, (&i, &m)) in open.iter().zip(&probes).enumerate() {
            let t = searches[i].target;
            let hit = response(&maps[t], n, pixels[t]) > 0.0;
            searches[i].update(m, hit);
        }
    }

    let mut out = Vec::with_capacity(nodes.len());
    for t in 0..nodes.len() {
        let edge = |e: Edge| {
            searches
                .iter()
                .find(|s| s.target == t && s.edge == e)
                .map(|s| s.lo)
                .expect("one search per edge")
        };
        let rows = (edge(Edge::Top), edge(Edge::Bottom));
        let cols = (edge(Edge::Left), edge(Edge::Right));
        out.push(ImpulseSupport {
            name: names[t].clone(),
            node: nodes[t],
            pixel: pixels[t],
            rows,
            cols,
            clipped: rows.0 == 0 || cols.0 == 0 || rows.1 == h - 1 || cols.1 == w - 1,
        });
    }
    Ok(out)
}
