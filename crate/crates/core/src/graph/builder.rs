//! Construction of FFNet graphs: stem → residual backbone → Up-head →
//! segmentation head.
//!
//! Stem layouts (all end at 1/4 resolution with 64 channels):
//!
//! | variant | layers                                                  |
//! |---------|---------------------------------------------------------|
//! | A       | 7×7/2 c64, 3×3/2 max pool                               |
//! | B       | 3×3/2 c32, 3×3/1 c48, 3×3/2 c64                         |
//! | C       | 3×3/2 c32, 3×3/2 c64, 3×3/1 c64                         |
//!
//! Every stem convolution is followed by batch norm and ReLU.

use crate::error::{bail, Result};
use crate::tensor::{ConvParams, UpsampleMode};

use super::config::{BackboneConfig, BlockType, ModelConfig, Variant};
use super::{weight_specs, LayerGraph, Node, NodeId, Op, Tap, BN_EPS};

pub const STEM_CHANNELS: usize = 64;

/// Appends nodes while tracking channel count and cumulative stride.
#[derive(Debug, Clone)]
pub struct GraphBuilder {
    nodes: Vec<Node>,
    channels: Vec<usize>,
    strides: Vec<usize>,
    taps: Vec<Tap>,
}

impl GraphBuilder {
    pub fn new(input_channels: usize) -> Self {
        let mut b = GraphBuilder {
            nodes: Vec::new(),
            channels: Vec::new(),
            strides: Vec::new(),
            taps: Vec::new(),
        };
        b.push(
            "input",
            Op::Input {
                channels: input_channels,
            },
            vec![],
            input_channels,
            1,
        );
        b
    }

    pub fn input(&self) -> NodeId {
        NodeId(0)
    }

    pub fn channels(&self, id: NodeId) -> usize {
        self.channels[id.0]
    }

    /// Downsampling factor of a node's output relative to the input.
    pub fn stride(&self, id: NodeId) -> usize {
        self.strides[id.0]
    }

    fn push(
        &mut self,
        name: &str,
        op: Op,
        inputs: Vec<NodeId>,
        channels: usize,
        stride: usize,
    ) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            id,
            name: name.to_string(),
            weights: weight_specs(name, &op),
            op,
            inputs,
        });
        self.channels.push(channels);
        self.strides.push(stride);
        id
    }

    pub fn conv(
        &mut self,
        name: &str,
        input: NodeId,
        out_channels: usize,
        params: ConvParams,
    ) -> NodeId {
        let op = Op::Conv2d {
            in_channels: self.channels(input),
            out_channels,
            params,
        };
        let stride = self.stride(input) * params.stride.0;
        self.push(name, op, vec![input], out_channels, stride)
    }

    pub fn batch_norm(&mut self, name: &str, input: NodeId) -> NodeId {
        let c = self.channels(input);
        let s = self.stride(input);
        self.push(
            name,
            Op::BatchNorm {
                channels: c,
                eps: BN_EPS,
            },
            vec![input],
            c,
            s,
        )
    }

    pub fn relu(&mut self, name: &str, input: NodeId) -> NodeId {
        let (c, s) = (self.channels(input), self.stride(input));
        self.push(name, Op::Relu, vec![input], c, s)
    }

    pub fn add(&mut self, name: &str, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.channels(a) != self.channels(b) || self.stride(a) != self.stride(b) {
            bail!(
                Graph,
                "`{}` adds {}ch/{} and {}ch/{}",
                name,
                self.channels(a),
                self.stride(a),
                self.channels(b),
                self.stride(b)
            );
        }
        let (c, s) = (self.channels(a), self.stride(a));
        Ok(self.push(name, Op::Add, vec![a, b], c, s))
    }

    pub fn max_pool(
        &mut self,
        name: &str,
        input: NodeId,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> NodeId {
        let (c, s) = (self.channels(input), self.stride(input) * stride);
        let op = Op::MaxPool {
            kernel,
            stride,
            padding,
        };
        self.push(name, op, vec![input], c, s)
    }

    pub fn upsample(
        &mut self,
        name: &str,
        input: NodeId,
        factor: usize,
        mode: UpsampleMode,
    ) -> Result<NodeId> {
        let s = self.stride(input);
        if factor == 0 || !s.is_multiple_of(factor) {
            bail!(
                Graph,
                "`{}`: cannot upsample stride {} by {}",
                name,
                s,
                factor
            );
        }
        let c = self.channels(input);
        Ok(self.push(
            name,
            Op::Upsample { factor, mode },
            vec![input],
            c,
            s / factor,
        ))
    }

    pub fn concat(&mut self, name: &str, inputs: &[NodeId]) -> Result<NodeId> {
        let Some(&first) = inputs.first() else {
            bail!(Graph, "`{}`: concat of nothing", name);
        };
        if inputs.iter().any(|&i| self.stride(i) != self.stride(first)) {
            bail!(Graph, "`{}`: concat across feature scales", name);
        }
        let c = inputs.iter().map(|&i| self.channels(i)).sum();
        let s = self.stride(first);
        Ok(self.push(name, Op::Concat, inputs.to_vec(), c, s))
    }

    /// Square `k×k` convolution with `k/2` padding followed by batch norm and
    /// optionally ReLU. Nodes are named `{name}`, `{name}.bn`, `{name}.relu`.
    pub fn conv_bn(
        &mut self,
        name: &str,
        input: NodeId,
        out_channels: usize,
        k: usize,
        stride: usize,
        relu: bool,
    ) -> NodeId {
        let conv = self.conv(
            name,
            input,
            out_channels,
            ConvParams::square(k, stride, k / 2),
        );
        let bn = self.batch_norm(&format!("{name}.bn"), conv);
        if relu {
            self.relu(&format!("{name}.relu"), bn)
        } else {
            bn
        }
    }

    pub fn tap(&mut self, name: &str, node: NodeId) {
        self.taps.push(Tap {
            name: name.to_string(),
            node,
            stride: self.stride(node),
            channels: self.channels(node),
        });
    }

    pub fn taps(&self) -> &[Tap] {
        &self.taps
    }

    pub fn finish(self, name: &str, output: NodeId, pyramid: Vec<NodeId>) -> Result<LayerGraph> {
        LayerGraph::new(name, self.nodes, self.taps, pyramid, output)
    }
}

/// Appends a stem; the output sits at 1/4 resolution with 64 channels.
pub fn add_stem(b: &mut GraphBuilder, variant: Variant, input: NodeId) -> NodeId {
    match variant {
        Variant::A => {
            let c = b.conv_bn("stem.conv1", input, STEM_CHANNELS, 7, 2, true);
            b.max_pool("stem.pool", c, 3, 2, 1)
        }
        Variant::B => {
            let c = b.conv_bn("stem.conv1", input, 32, 3, 2, true);
            let c = b.conv_bn("stem.conv2", c, 48, 3, 1, true);
            b.conv_bn("stem.conv3", c, STEM_CHANNELS, 3, 2, true)
        }
        Variant::C => {
            let c = b.conv_bn("stem.conv1", input, 32, 3, 2, true);
            let c = b.conv_bn("stem.conv2", c, STEM_CHANNELS, 3, 2, true);
            b.conv_bn("stem.conv3", c, STEM_CHANNELS, 3, 1, true)
        }
    }
}

fn add_block(
    b: &mut GraphBuilder,
    block: BlockType,
    prefix: &str,
    input: NodeId,
    out_channels: usize,
    stride: usize,
) -> Result<NodeId> {
    let in_channels = b.channels(input);
    let main = match block {
        BlockType::Basic => {
            let x = b.conv_bn(
                &format!("{prefix}.conv1"),
                input,
                out_channels,
                3,
                stride,
                true,
            );
            b.conv_bn(&format!("{prefix}.conv2"), x, out_channels, 3, 1, false)
        }
        BlockType::Bottleneck => {
            let inner = out_channels / BlockType::BOTTLENECK_EXPANSION;
            let x = b.conv_bn(&format!("{prefix}.conv1"), input, inner, 1, 1, true);
            let x = b.conv_bn(&format!("{prefix}.conv2"), x, inner, 3, stride, true);
            b.conv_bn(&format!("{prefix}.conv3"), x, out_channels, 1, 1, false)
        }
    };
    let skip = if stride != 1 || in_channels != out_channels {
        b.conv_bn(
            &format!("{prefix}.proj"),
            input,
            out_channels,
            1,
            stride,
            false,
        )
    } else {
        input
    };
    let sum = b.add(&format!("{prefix}.add"), main, skip)?;
    Ok(b.relu(&format!("{prefix}.relu"), sum))
}

/// Appends the residual stages and registers a `stage{i}` tap after each.
/// Returns the stage outputs, fine to coarse.
pub fn add_backbone(
    b: &mut GraphBuilder,
    cfg: &BackboneConfig,
    first_stage_stride: usize,
    input: NodeId,
) -> Result<Vec<NodeId>> {
    cfg.validate()?;
    let strides = cfg.effective_strides(first_stage_stride);
    let mut x = input;
    let mut outs = Vec::with_capacity(cfg.num_stages());
    for (s, ((&blocks, &channels), &stride)) in cfg
        .num_blocks
        .iter()
        .zip(&cfg.stage_channels)
        .zip(&strides)
        .enumerate()
    {
        for i in 0..blocks {
            let prefix = format!("backbone.stage{}.block{}", s + 1, i);
            x = add_block(
                b,
                cfg.block_type,
                &prefix,
                x,
                channels,
                if i == 0 { stride } else { 1 },
            )?;
        }
        b.tap(&format!("stage{}", s + 1), x);
        outs.push(x);
    }
    Ok(outs)
}

/// Top-down feature pyramid over four taps given coarse to fine. Each tap
/// gets a 1×1 lateral projection; coarser merged features are upsampled ×2
/// and added in; every level is smoothed by a 3×3 convolution. Returns the
/// smoothed outputs, coarse to fine, all `variant.up_width()` channels wide.
pub fn add_up_head(
    b: &mut GraphBuilder,
    variant: Variant,
    taps: &[NodeId],
    mode: UpsampleMode,
) -> Result<Vec<NodeId>> {
    if taps.len() != 4 {
        bail!(Graph, "Up-head needs 4 taps, got {}", taps.len());
    }
    let width = variant.up_width();
    let mut outs = Vec::with_capacity(taps.len());
    let mut merged: Option<NodeId> = None;
    for (i, &tap) in taps.iter().enumerate() {
        let lateral = b.conv_bn(&format!("up.lateral{i}"), tap, width, 1, 1, false);
        let level = match merged {
            None => lateral,
            Some(coarse) => {
                let (sc, sf) = (b.stride(coarse), b.stride(lateral));
                if sf == 0 || sc % sf != 0 || sc <= sf {
                    bail!(
                        Graph,
                        "Up-head taps not ordered coarse to fine (strides {} then {})",
                        sc,
                        sf
                    );
                }
                let up = b.upsample(&format!("up.upsample{i}"), coarse, sc / sf, mode)?;
                b.add(&format!("up.merge{i}"), lateral, up)?
            }
        };
        merged = Some(level);
        outs.push(b.conv_bn(&format!("up.smooth{i}"), level, width, 3, 1, true));
    }
    Ok(outs)
}

/// Upsamples the coarser pyramid levels to the finest one, concatenates
/// (finest first), fuses with a 3×3 conv and classifies with a 1×1 conv.
/// Output stays at the finest pyramid resolution.
pub fn add_seg_head(
    b: &mut GraphBuilder,
    variant: Variant,
    pyramid: &[NodeId],
    num_classes: usize,
    mode: UpsampleMode,
) -> Result<NodeId> {
    let Some(&finest) = pyramid.last() else {
        bail!(Graph, "segmentation head needs at least one pyramid level");
    };
    let width = b.channels(finest);
    if let Some(&bad) = pyramid.iter().find(|&&p| b.channels(p) != width) {
        bail!(
            Graph,
            "pyramid widths differ: {} vs {}",
            b.channels(bad),
            width
        );
    }
    if num_classes == 0 {
        bail!(Graph, "segmentation head needs at least one class");
    }
    let target = b.stride(finest);
    let mut parts = vec![finest];
    for (i, &level) in pyramid.iter().enumerate().rev().skip(1) {
        let s = b.stride(level);
        if !s.is_multiple_of(target) {
            bail!(
                Graph,
                "pyramid level stride {} is not a multiple of {}",
                s,
                target
            );
        }
        parts.push(b.upsample(&format!("seg.upsample{i}"), level, s / target, mode)?);
    }
    let cat = b.concat("seg.concat", &parts)?;
    let fused = b.conv_bn("seg.fuse", cat, variant.seg_width(), 3, 1, true);
    Ok(b.conv(
        "seg.classifier",
        fused,
        num_classes,
        ConvParams::square(1, 1, 0).with_bias(true),
    ))
}

/// Builds the full segmentation network described by `cfg`.
///
/// Four-stage backbones feed their four stage outputs to the Up-head. For
/// three-stage backbones the stem output stands in for the missing first
/// stage.
pub fn build_model(cfg: &ModelConfig) -> Result<LayerGraph> {
    cfg.validate()?;
    let mut b = GraphBuilder::new(3);
    let input = b.input();
    let stem = add_stem(&mut b, cfg.stem, input);
    if cfg.backbone.is_three_stage() {
        b.tap("stem", stem);
    }
    let mut taps: Vec<NodeId> = if cfg.backbone.is_three_stage() {
        vec![stem]
    } else {
        Vec::new()
    };
    taps.extend(add_backbone(
        &mut b,
        &cfg.backbone,
        cfg.first_stage_stride,
        stem,
    )?);
    taps.reverse();
    let pyramid = add_up_head(&mut b, cfg.up, &taps, cfg.upsample_mode)?;
    let logits = add_seg_head(
        &mut b,
        cfg.seg,
        &pyramid,
        cfg.num_classes,
        cfg.upsample_mode,
    )?;
    b.finish(&cfg.name(), logits, pyramid)
}

/// Input followed by a single stem.
pub fn build_stem_graph(variant: Variant) -> Result<LayerGraph> {
    let mut b = GraphBuilder::new(3);
    let input = b.input();
    let stem = add_stem(&mut b, variant, input);
    b.tap("stem", stem);
    b.finish(&format!("stem-{variant}"), stem, Vec::new())
}

/// Stem plus backbone without heads; the output is the last stage.
pub fn build_backbone_graph(
    stem: Variant,
    cfg: &BackboneConfig,
    first_stage_stride: usize,
) -> Result<LayerGraph> {
    let mut b = GraphBuilder::new(3);
    let input = b.input();
    let s = add_stem(&mut b, stem, input);
    let stages = add_backbone(&mut b, cfg, first_stage_stride, s)?;
    let out = *stages.last().expect("validated backbone has stages");
    b.finish(&format!("{}-backbone", cfg.name), out, Vec::new())
}
