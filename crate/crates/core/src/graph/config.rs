//! Declarative model descriptions and the line-oriented config format.
//!
//! ```text
//! # GPU-Large FFNet
//! backbone = resnet150
//! stem = A
//! up = A
//! seg = A
//! stride1 = 1
//! mode = bilinear
//! ```
//!
//! Several `key=value` pairs may share a line when separated by whitespace.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{bail, Error, Result};
use crate::tensor::UpsampleMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BlockType {
    /// Two 3×3 convolutions.
    Basic,
    /// 1×1 → 3×3 → 1×1 with a 4× channel expansion.
    Bottleneck,
}

impl BlockType {
    pub const BOTTLENECK_EXPANSION: usize = 4;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneConfig {
    pub name: String,
    pub block_type: BlockType,
    pub num_blocks: Vec<usize>,
    /// Output channels of each stage. For bottleneck stages this is the
    /// expanded width, four times the inner 3×3 width.
    pub stage_channels: Vec<usize>,
    /// Stride of the first block of each stage. For four-stage backbones the
    /// first entry is replaced by the model's `stride1`.
    pub stage_strides: Vec<usize>,
}

/// `(name, block type, blocks per stage, channels per stage)`.
const REGISTRY: &[(&str, BlockType, &[usize], &[usize])] = &[
    (
        "resnet150",
        BlockType::Basic,
        &[16, 18, 28, 12],
        &[64, 128, 256, 512],
    ),
    (
        "resnet134",
        BlockType::Basic,
        &[8, 18, 28, 12],
        &[64, 128, 256, 512],
    ),
    (
        "resnet101",
        BlockType::Bottleneck,
        &[3, 4, 23, 3],
        &[256, 512, 1024, 2048],
    ),
    (
        "resnet86",
        BlockType::Basic,
        &[8, 12, 16, 6],
        &[64, 128, 256, 512],
    ),
    (
        "resnet56",
        BlockType::Basic,
        &[4, 8, 12, 3],
        &[64, 128, 256, 512],
    ),
    (
        "resnet50",
        BlockType::Bottleneck,
        &[3, 4, 6, 3],
        &[256, 512, 1024, 2048],
    ),
    (
        "resnet34",
        BlockType::Basic,
        &[3, 4, 6, 3],
        &[64, 128, 256, 512],
    ),
    (
        "resnet18",
        BlockType::Basic,
        &[2, 2, 2, 2],
        &[64, 128, 256, 512],
    ),
    (
        "resnet150s",
        BlockType::Basic,
        &[16, 18, 28, 12],
        &[64, 128, 192, 320],
    ),
    (
        "resnet86s",
        BlockType::Basic,
        &[8, 12, 16, 6],
        &[64, 128, 192, 320],
    ),
    (
        "resnet78s",
        BlockType::Basic,
        &[6, 12, 12, 8],
        &[64, 128, 192, 320],
    ),
    (
        "resnet54s",
        BlockType::Basic,
        &[5, 8, 8, 5],
        &[64, 128, 192, 320],
    ),
    (
        "resnet40s",
        BlockType::Basic,
        &[4, 5, 6, 4],
        &[64, 128, 192, 320],
    ),
    (
        "resnet30s",
        BlockType::Basic,
        &[3, 4, 4, 3],
        &[64, 128, 192, 320],
    ),
    (
        "resnet22s",
        BlockType::Basic,
        &[2, 3, 3, 2],
        &[64, 128, 192, 320],
    ),
    (
        "resnet122n",
        BlockType::Basic,
        &[16, 24, 20],
        &[96, 160, 320],
    ),
    ("resnet74n", BlockType::Basic, &[8, 12, 16], &[96, 160, 320]),
    ("resnet46n", BlockType::Basic, &[6, 8, 8], &[96, 160, 320]),
    (
        "resnet122ns",
        BlockType::Basic,
        &[16, 24, 20],
        &[64, 128, 256],
    ),
    (
        "resnet74ns",
        BlockType::Basic,
        &[8, 12, 16],
        &[64, 128, 256],
    ),
    ("resnet46ns", BlockType::Basic, &[6, 8, 8], &[64, 128, 256]),
];

/// Lowercase with spaces, underscores and dashes removed, so `ResNet 122 NS`
/// and `resnet122ns` name the same backbone.
pub fn normalize_backbone_name(name: &str) -> String {
    name.chars()
        .filter(|c| !c.is_whitespace() && *c != '_' && *c != '-')
        .flat_map(char::to_lowercase)
        .collect()
}

impl BackboneConfig {
    /// Names of every registered backbone, in registry order.
    pub fn registry_names() -> impl Iterator<Item = &'static str> {
        REGISTRY.iter().map(|r| r.0)
    }

    pub fn registry() -> Vec<BackboneConfig> {
        REGISTRY
            .iter()
            .map(|&(name, block_type, blocks, channels)| BackboneConfig {
                name: name.to_string(),
                block_type,
                num_blocks: blocks.to_vec(),
                stage_channels: channels.to_vec(),
                stage_strides: if blocks.len() == 3 {
                    vec![2, 2, 2]
                } else {
                    vec![1, 2, 2, 2]
                },
            })
            .collect()
    }

    pub fn from_name(name: &str) -> Result<Self> {
        let key = normalize_backbone_name(name);
        Self::registry()
            .into_iter()
            .find(|b| b.name == key)
            .ok_or(Error::UnknownBackbone(name.to_string()))
    }

    pub fn num_stages(&self) -> usize {
        self.num_blocks.len()
    }

    pub fn is_three_stage(&self) -> bool {
        self.num_stages() == 3
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_stages();
        if n != 3 && n != 4 {
            bail!(
                InvalidConfig,
                "backbone `{}` has {} stages, expected 3 or 4",
                self.name,
                n
            );
        }
        if self.stage_channels.len() != n || self.stage_strides.len() != n {
            bail!(
                InvalidConfig,
                "backbone `{}`: {} block counts, {} channel entries, {} strides",
                self.name,
                n,
                self.stage_channels.len(),
                self.stage_strides.len()
            );
        }
        let lists = [&self.num_blocks, &self.stage_channels, &self.stage_strides];
        if lists.iter().any(|l| l.contains(&0)) {
            bail!(InvalidConfig, "backbone `{}` has a zero entry", self.name);
        }
        if self.block_type == BlockType::Bottleneck
            && self
                .stage_channels
                .iter()
                .any(|c| c % BlockType::BOTTLENECK_EXPANSION != 0)
        {
            bail!(
                InvalidConfig,
                "bottleneck backbone `{}` needs channels divisible by 4",
                self.name
            );
        }
        Ok(())
    }

    /// Stage strides after applying `first_stage_stride` (four-stage only).
    pub fn effective_strides(&self, first_stage_stride: usize) -> Vec<usize> {
        let mut s = self.stage_strides.clone();
        if !self.is_three_stage() {
            s[0] = first_stage_stride;
        }
        s
    }
}

/// One of the three stem / Up-head / segmentation-head designs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    A,
    B,
    C,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::A, Variant::B, Variant::C];

    /// Channel width of every Up-head output.
    pub fn up_width(self) -> usize {
        match self {
            Variant::A => 256,
            Variant::B => 128,
            Variant::C => 64,
        }
    }

    /// Width of the fusion convolution in the segmentation head.
    pub fn seg_width(self) -> usize {
        match self {
            Variant::A => 256,
            Variant::B => 128,
            Variant::C => 64,
        }
    }

    pub fn as_char(self) -> char {
        match self {
            Variant::A => 'A',
            Variant::B => 'B',
            Variant::C => 'C',
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(Variant::A),
            "B" | "b" => Ok(Variant::B),
            "C" | "c" => Ok(Variant::C),
            other => bail!(
                InvalidConfig,
                "unknown variant `{other}` (expected A, B or C)"
            ),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_char())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub stem: Variant,
    pub up: Variant,
    pub seg: Variant,
    /// Stride of the first residual stage; fixed at 2 for three-stage backbones.
    pub first_stage_stride: usize,
    pub upsample_mode: UpsampleMode,
    pub num_classes: usize,
    pub input_hw: (usize, usize),
}

pub const DEFAULT_CLASSES: usize = 19;
pub const DEFAULT_INPUT_HW: (usize, usize) = (1024, 2048);

const KEYS: [&str; 9] = [
    "backbone", "stem", "up", "seg", "stride1", "mode", "classes", "input_h", "input_w",
];

impl ModelConfig {
    /// Defaults: A-A-A heads (C-A-A for three-stage backbones), `stride1 = 1`,
    /// bilinear upsampling, 19 classes, 1024×2048 input.
    pub fn new(backbone: BackboneConfig) -> Self {
        let three = backbone.is_three_stage();
        ModelConfig {
            stem: if three { Variant::C } else { Variant::A },
            up: Variant::A,
            seg: Variant::A,
            first_stage_stride: if three { 2 } else { 1 },
            upsample_mode: UpsampleMode::Bilinear,
            num_classes: DEFAULT_CLASSES,
            input_hw: DEFAULT_INPUT_HW,
            backbone,
        }
    }

    pub fn from_registry(name: &str) -> Result<Self> {
        Ok(Self::new(BackboneConfig::from_name(name)?))
    }

    pub fn with_variants(mut self, stem: Variant, up: Variant, seg: Variant) -> Self {
        self.stem = stem;
        self.up = up;
        self.seg = seg;
        self
    }

    pub fn with_stride1(mut self, stride: usize) -> Self {
        if !self.backbone.is_three_stage() {
            self.first_stage_stride = stride;
        }
        self
    }

    pub fn with_mode(mut self, mode: UpsampleMode) -> Self {
        self.upsample_mode = mode;
        self
    }

    pub fn with_input(mut self, h: usize, w: usize) -> Self {
        self.input_hw = (h, w);
        self
    }

    pub fn with_classes(mut self, n: usize) -> Self {
        self.num_classes = n;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.backbone.is_three_stage() && self.stem != Variant::C {
            bail!(
                InvalidConfig,
                "three-stage backbone `{}` requires stem C, got stem {}",
                self.backbone.name,
                self.stem
            );
        }
        if self.first_stage_stride != 1 && self.first_stage_stride != 2 {
            bail!(
                InvalidConfig,
                "stride1 must be 1 or 2, got {}",
                self.first_stage_stride
            );
        }
        if self.num_classes == 0 {
            bail!(InvalidConfig, "classes must be at least 1");
        }
        if self.input_hw.0 == 0 || self.input_hw.1 == 0 {
            bail!(InvalidConfig, "input size must be positive");
        }
        Ok(())
    }

    /// Stem-Up-Seg triple, e.g. `A-B-B`.
    pub fn variant_triple(&self) -> String {
        format!("{}-{}-{}", self.stem, self.up, self.seg)
    }

    /// Short identifier such as `resnet150/A-A-A/s1/bilinear`.
    pub fn name(&self) -> String {
        format!(
            "{}/{}/s{}/{}",
            self.backbone.name,
            self.variant_triple(),
            self.first_stage_stride,
            self.upsample_mode
        )
    }

    /// Parses the config format. Unknown or repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs: BTreeMap<&str, (usize, String)> = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            for (key, value) in
                split_pairs(line).map_err(|msg| Error::ConfigSyntax { line: line_no, msg })?
            {
                let Some(&key) = KEYS.iter().find(|k| **k == key) else {
                    return Err(Error::ConfigSyntax {
                        line: line_no,
                        msg: format!("unknown key `{key}`"),
                    });
                };
                if pairs.insert(key, (line_no, value)).is_some() {
                    return Err(Error::ConfigSyntax {
                        line: line_no,
                        msg: format!("duplicate key `{key}`"),
                    });
                }
            }
        }

        let field = |key: &str| pairs.get(key).map(|(l, v)| (*l, v.as_str()));
        let at = |line: usize, e: Error| match e {
            Error::InvalidConfig(msg) => Error::ConfigSyntax { line, msg },
            other => other,
        };
        let number = |key: &str| -> Result<Option<usize>> {
            match field(key) {
                None => Ok(None),
                Some((line, v)) => v
                    .parse::<usize>()
                    .map(Some)
                    .map_err(|_| Error::ConfigSyntax {
                        line,
                        msg: format!("`{key}` expects a non-negative integer, got `{v}`"),
                    }),
            }
        };

        let Some((_, backbone)) = field("backbone") else {
            bail!(InvalidConfig, "missing required key `backbone`");
        };
        let mut cfg = ModelConfig::from_registry(backbone)?;
        for (key, slot) in [
            ("stem", &mut cfg.stem),
            ("up", &mut cfg.up),
            ("seg", &mut cfg.seg),
        ] {
            if let Some((line, v)) = field(key) {
                *slot = v.parse().map_err(|e| at(line, e))?;
            }
        }
        if let Some(s) = number("stride1")? {
            cfg = cfg.with_stride1(s);
        }
        if let Some((line, v)) = field("mode") {
            cfg.upsample_mode = v.parse().map_err(|_| Error::ConfigSyntax {
                line,
                msg: format!("unknown upsample mode `{v}`"),
            })?;
        }
        if let Some(n) = number("classes")? {
            cfg.num_classes = n;
        }
        if let Some(h) = number("input_h")? {
            cfg.input_hw.0 = h;
        }
        if let Some(w) = number("input_w")? {
            cfg.input_hw.1 = w;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical text form; `parse(render(c)) == c` for registry backbones.
    pub fn render(&self) -> String {
        format!(
            "backbone = {}\nstem = {}\nup = {}\nseg = {}\nstride1 = {}\nmode = {}\nclasses = {}\ninput_h = {}\ninput_w = {}\n",
            self.backbone.name,
            self.stem,
            self.up,
            self.seg,
            self.first_stage_stride,
            self.upsample_mode,
            self.num_classes,
            self.input_hw.0,
            self.input_hw.1
        )
    }
}

impl FromStr for ModelConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelConfig::parse(s)
    }
}

/// Canonical rendering of a config text.
pub fn normalize(text: &str) -> Result<String> {
    Ok(ModelConfig::parse(text)?.render())
}

fn split_pairs(line: &str) -> std::result::Result<Vec<(&str, String)>, String> {
    // `key = value with spaces` form
    if line.matches('=').count() == 1 {
        let (k, v) = line.split_once('=').expect("one `=`");
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || v.is_empty() || k.contains(char::is_whitespace) {
            return Err(format!("malformed entry `{line}`"));
        }
        return Ok(vec![(k, v.to_string())]);
    }
    line.split_whitespace()
        .map(|tok| match tok.split_once('=') {
            Some((k, v)) if !k.is_empty() && !v.is_empty() && !v.contains('=') => {
                Ok((k, v.to_string()))
            }
            _ => Err(format!("expected `key=value`, found `{tok}`")),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_has_every_backbone_once() {
        let names: Vec<_> = BackboneConfig::registry_names().collect();
        assert_eq!(names.len(), 21);
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), 21);
        for b in BackboneConfig::registry() {
            b.validate().unwrap();
        }
    }

    #[test]
    fn registry_rows() {
        let r50 = BackboneConfig::from_name("ResNet 50").unwrap();
        assert_eq!(r50.block_type, BlockType::Bottleneck);
        assert_eq!(r50.num_blocks, vec![3, 4, 6, 3]);
        assert_eq!(r50.stage_channels, vec![256, 512, 1024, 2048]);

        let r46ns = BackboneConfig::from_name("resnet46ns").unwrap();
        assert!(r46ns.is_three_stage());
        assert_eq!(r46ns.num_blocks, vec![6, 8, 8]);
        assert_eq!(r46ns.stage_channels, vec![64, 128, 256]);
        assert_eq!(r46ns.stage_strides, vec![2, 2, 2]);

        let r78s = BackboneConfig::from_name("resnet_78_s").unwrap();
        assert_eq!(r78s.num_blocks, vec![6, 12, 12, 8]);
        assert_eq!(r78s.stage_channels, vec![64, 128, 192, 320]);
    }

    #[test]
    fn parses_one_line_form() {
        let cfg =
            ModelConfig::parse("backbone=resnet150 stem=A up=A seg=A stride1=1 mode=bilinear")
                .unwrap();
        assert_eq!(cfg.backbone.name, "resnet150");
        assert_eq!(cfg.variant_triple(), "A-A-A");
        assert_eq!(cfg.first_stage_stride, 1);
        assert_eq!(cfg.upsample_mode, UpsampleMode::Bilinear);
        assert_eq!(cfg.num_classes, 19);
    }

    #[test]
    fn parses_line_per_key_with_comments() {
        let text = "# mobile\nbackbone = ResNet 78 S\nstem = B\nup = C  # narrow\nseg = C\n\nstride1 = 1\nmode = nearest\ninput_h = 512\ninput_w = 1024\n";
        let cfg = ModelConfig::parse(text).unwrap();
        assert_eq!(cfg.backbone.name, "resnet78s");
        assert_eq!(cfg.variant_triple(), "B-C-C");
        assert_eq!(cfg.upsample_mode, UpsampleMode::Nearest);
        assert_eq!(cfg.input_hw, (512, 1024));
    }

    #[test]
    fn three_stage_requires_stem_c() {
        let err = ModelConfig::parse("backbone=resnet122n stem=A up=B seg=B").unwrap_err();
        assert!(
            matches!(err, Error::InvalidConfig(ref m) if m.contains("stem C")),
            "{err}"
        );
        let ok = ModelConfig::parse("backbone=resnet122n stem=C up=B seg=B stride1=1").unwrap();
        assert_eq!(
            ok.first_stage_stride, 2,
            "stride1 is ignored for three-stage backbones"
        );
    }

    #[test]
    fn syntax_errors_carry_line_numbers() {
        match ModelConfig::parse("backbone = resnet18\n\nfoo = 3\n").unwrap_err() {
            Error::ConfigSyntax { line, msg } => {
                assert_eq!(line, 3);
                assert!(msg.contains("foo"));
            }
            e => panic!("unexpected {e}"),
        }
        match ModelConfig::parse("backbone = resnet18\nstem\n").unwrap_err() {
            Error::ConfigSyntax { line, .. } => assert_eq!(line, 2),
            e => panic!("unexpected {e}"),
        }
        match ModelConfig::parse("backbone=resnet18\nclasses=x\n").unwrap_err() {
            Error::ConfigSyntax { line, .. } => assert_eq!(line, 2),
            e => panic!("unexpected {e}"),
        }
        assert!(matches!(
            ModelConfig::parse("backbone=resnet9000").unwrap_err(),
            Error::UnknownBackbone(_)
        ));
        assert!(matches!(
            ModelConfig::parse("stem=A").unwrap_err(),
            Error::InvalidConfig(_)
        ));
        assert!(matches!(
            ModelConfig::parse("backbone=resnet18 backbone=resnet34").unwrap_err(),
            Error::ConfigSyntax { line: 1, .. }
        ));
    }

    #[test]
    fn render_is_a_normal_form() {
        let text = "backbone=ResNet86S stem=b up=b seg=b stride1=2 mode=nearest";
        let n1 = normalize(text).unwrap();
        assert_eq!(normalize(&n1).unwrap(), n1);
        assert_eq!(
            ModelConfig::parse(&n1).unwrap(),
            ModelConfig::parse(text).unwrap()
        );
        assert!(n1.starts_with("backbone = resnet86s\nstem = B\n"));
    }
}
