//! Theoretical receptive field by forward recurrence over the graph.
//!
//! Coordinates are in input pixels with pixel `i` centred at `i`. Per axis,
//! a feature map is described by its support `r`, its jump `j` (spacing of
//! adjacent outputs in input pixels) and the centre of output 0's field.
//!
//! | op                  | r'            | j'    | offset'                         |
//! |---------------------|---------------|-------|---------------------------------|
//! | conv / pool k, s, p | r + (k-1)·j   | j·s   | offset + ((k-1)/2 - p)·j        |
//! | nearest ×f          | r             | j / f | offset                          |
//! | bilinear ×f         | r + j         | j / f | offset + (1/(2f) - 1/2)·j       |
//! | add / concat        | max r         | equal | offset of the widest input      |
//!
//! Bilinear outputs blend two neighbouring sources, hence the extra `j`.
//! Upsampled pixels repeat their sources in groups, so an even window placed
//! after an upsample may see one source more or less than the table says;
//! odd windows after a ×2 upsample are exact.

use std::fmt;

use crate::error::{bail, Result};
use crate::graph::{LayerGraph, NodeId, Op};
use crate::tensor::UpsampleMode;

/// Receptive field along one axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RFInfo {
    pub r: usize,
    pub j: usize,
    pub offset: f64,
}

impl RFInfo {
    pub const INPUT: RFInfo = RFInfo {
        r: 1,
        j: 1,
        offset: 0.0,
    };

    fn window(self, k: usize, s: usize, p: usize) -> RFInfo {
        RFInfo {
            r: self.r + (k - 1) * self.j,
            j: self.j * s,
            offset: self.offset + ((k - 1) as f64 / 2.0 - p as f64) * self.j as f64,
        }
    }

    fn upsample(self, f: usize, mode: UpsampleMode) -> Option<RFInfo> {
        if f == 0 || !self.j.is_multiple_of(f) {
            return None;
        }
        Some(match mode {
            UpsampleMode::Nearest => RFInfo {
                r: self.r,
                j: self.j / f,
                offset: self.offset,
            },
            UpsampleMode::Bilinear if f == 1 => self,
            UpsampleMode::Bilinear => RFInfo {
                r: self.r + self.j,
                j: self.j / f,
                offset: self.offset + (0.5 / f as f64 - 0.5) * self.j as f64,
            },
        })
    }
}

/// Receptive field of one feature map, per spatial axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReceptiveField {
    pub vertical: RFInfo,
    pub horizontal: RFInfo,
}

impl ReceptiveField {
    pub const INPUT: ReceptiveField = ReceptiveField {
        vertical: RFInfo::INPUT,
        horizontal: RFInfo::INPUT,
    };

    /// `(r_v, r_h)`.
    pub fn support(&self) -> (usize, usize) {
        (self.vertical.r, self.horizontal.r)
    }

    pub fn is_square(&self) -> bool {
        self.vertical.r == self.horizontal.r && self.vertical.j == self.horizontal.j
    }
}

impl fmt::Display for ReceptiveField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (v, h) = (self.vertical, self.horizontal);
        if self.is_square() {
            write!(f, "r={} j={}", v.r, v.j)
        } else {
            write!(f, "r={}x{} j={}x{}", v.r, h.r, v.j, h.j)
        }
    }
}

/// Receptive field of every node, indexed by node id.
pub fn receptive_fields(graph: &LayerGraph) -> Result<Vec<ReceptiveField>> {
    let mut out: Vec<ReceptiveField> = Vec::with_capacity(graph.len());
    for node in graph.nodes() {
        let ins: Vec<ReceptiveField> = node.inputs.iter().map(|i| out[i.0]).collect();
        let rf = match node.op {
            Op::Input { .. } => ReceptiveField::INPUT,
            Op::Conv2d { params, .. } => ReceptiveField {
                vertical: ins[0].vertical.window(
                    params.kernel.0,
                    params.stride.0,
                    params.padding.0,
                ),
                horizontal: ins[0].horizontal.window(
                    params.kernel.1,
                    params.stride.1,
                    params.padding.1,
                ),
            },
            Op::MaxPool {
                kernel,
                stride,
                padding,
            } => ReceptiveField {
                vertical: ins[0].vertical.window(kernel, stride, padding),
                horizontal: ins[0].horizontal.window(kernel, stride, padding),
            },
            Op::BatchNorm { .. } | Op::Relu => ins[0],
            Op::Upsample { factor, mode } => {
                match (
                    ins[0].vertical.upsample(factor, mode),
                    ins[0].horizontal.upsample(factor, mode),
                ) {
                    (Some(vertical), Some(horizontal)) => ReceptiveField {
                        vertical,
                        horizontal,
                    },
                    _ => bail!(
                        Graph,
                        "`{}`: upsampling by {} from jump {} gives a fractional jump",
                        node.name,
                        factor,
                        ins[0].vertical.j
                    ),
                }
            }
            Op::Add | Op::Concat => ReceptiveField {
                vertical: join(&node.name, ins.iter().map(|f| f.vertical))?,
                horizontal: join(&node.name, ins.iter().map(|f| f.horizontal))?,
            },
        };
        out.push(rf);
    }
    Ok(out)
}

fn join(name: &str, mut fields: impl Iterator<Item = RFInfo>) -> Result<RFInfo> {
    let mut acc = fields.next().expect("joins have inputs");
    for f in fields {
        if f.j != acc.j {
            bail!(
                Graph,
                "`{}` joins feature maps with jumps {} and {}",
                name,
                acc.j,
                f.j
            );
        }
        if f.r > acc.r {
            acc = f;
        }
    }
    Ok(acc)
}

/// Receptive field of `node`'s output with respect to the input image.
pub fn receptive_field(graph: &LayerGraph, node: NodeId) -> Result<ReceptiveField> {
    if node.0 >= graph.len() {
        bail!(
            InvalidInput,
            "node {} out of range for `{}`",
            node,
            graph.name()
        );
    }
    Ok(receptive_fields(graph)?[node.0])
}
