//! Image I/O, preprocessing, colorization and evaluation for segmentation.

pub mod image;
pub mod metrics;

use std::path::Path;

use crate::error::{bail, Error, Result};
use crate::tensor::{ClassMap, Dims, Tensor};

pub use image::{Image, ImageError};
pub use metrics::{miou, ConfusionMatrix, MiouResult};

/// Per-channel normalization applied after scaling pixels to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Normalization {
    pub const IMAGENET: Normalization = Normalization {
        mean: [0.485, 0.456, 0.406],
        std: [0.229, 0.224, 0.225],
    };

    pub const IDENTITY: Normalization = Normalization {
        mean: [0.0; 3],
        std: [1.0; 3],
    };
}

impl Default for Normalization {
    fn default() -> Self {
        Self::IMAGENET
    }
}

/// RGB image to a `(1, 3, h, w)` tensor with `x = (p/255 - mean) / std`.
pub fn preprocess(img: &Image, norm: &Normalization) -> Result<Tensor> {
    if !img.is_rgb() {
        bail!(
            InvalidInput,
            "expected an RGB image, got {} channel(s)",
            img.channels()
        );
    }
    if let Some(s) = norm.std.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
        bail!(
            InvalidInput,
            "normalization std must be positive, got {}",
            s
        );
    }
    let (h, w) = (img.height(), img.width());
    let dims = Dims::new(1, 3, h, w);
    let px = img.data();
    let mut data = vec![0.0f32; dims.len()];
    for c in 0..3 {
        let (m, s) = (norm.mean[c], norm.std[c]);
        for (i, v) in data[c * h * w..(c + 1) * h * w].iter_mut().enumerate() {
            *v = (px[i * 3 + c] as f32 / 255.0 - m) / s;
        }
    }
    Tensor::from_vec(dims, data)
}

/// Inverse of [`preprocess`], rounding to the nearest 8-bit value.
pub fn to_image(t: &Tensor, norm: &Normalization) -> Result<Image> {
    let d = t.dims();
    if d.n != 1 || d.c != 3 {
        bail!(ShapeMismatch, "expected (1,3,h,w), got {}", d);
    }
    let mut px = vec![0u8; d.h * d.w * 3];
    for c in 0..3 {
        for (i, v) in t.plane(0, c).iter().enumerate() {
            let p = ((v * norm.std[c] + norm.mean[c]) * 255.0).round();
            px[i * 3 + c] = p.clamp(0.0, 255.0) as u8;
        }
    }
    Ok(Image::rgb(d.w, d.h, px)?)
}

/// Class colours, indexed by label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Palette {
    pub colors: Vec<[u8; 3]>,
    pub names: Vec<String>,
}

const CITYSCAPES: &str = include_str!("../../data/cityscapes_palette.txt");

impl Palette {
    /// The 19 Cityscapes train-id colours.
    pub fn cityscapes() -> Palette {
        Palette::parse(CITYSCAPES).expect("bundled palette parses")
    }

    /// Lines of `r g b [name]`; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Palette> {
        let mut colors = Vec::new();
        let mut names = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut it = line.split_whitespace();
            let mut rgb = [0u8; 3];
            for v in &mut rgb {
                *v = it.next().and_then(|s| s.parse().ok()).ok_or_else(|| {
                    Error::InvalidInput(format!("palette line {}: expected `r g b [name]`", i + 1))
                })?;
            }
            colors.push(rgb);
            names.push(it.collect::<Vec<_>>().join(" "));
        }
        if colors.len() > 255 {
            bail!(
                InvalidInput,
                "palette has {} colours; labels stop at 254",
                colors.len()
            );
        }
        Ok(Palette { colors, names })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Palette> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Palette::parse(&text)
    }

    pub fn len(&self) -> usize {
        self.colors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.colors.is_empty()
    }
}

/// Paints each label with its palette colour; ignored pixels are black.
pub fn colorize(map: &ClassMap, palette: &Palette) -> Result<Image> {
    if map.n != 1 {
        bail!(
            InvalidInput,
            "colorize takes a single class map, got a batch of {}",
            map.n
        );
    }
    let mut px = Vec::with_capacity(map.data.len() * 3);
    for &label in &map.data {
        if label == ClassMap::IGNORE {
            px.extend([0, 0, 0]);
        } else if let Some(c) = palette.colors.get(label as usize) {
            px.extend(c);
        } else {
            bail!(
                InvalidInput,
                "label {} has no palette colour ({} defined)",
                label,
                palette.len()
            );
        }
    }
    Ok(Image::rgb(map.w, map.h, px)?)
}

/// Single class map as a grayscale image of raw labels.
pub fn classmap_to_image(map: &ClassMap) -> Result<Image> {
    if map.n != 1 {
        bail!(
            InvalidInput,
            "expected a single class map, got a batch of {}",
            map.n
        );
    }
    Ok(Image::gray(map.w, map.h, map.data.clone())?)
}

/// Grayscale label image back to a class map.
pub fn image_to_classmap(img: &Image) -> Result<ClassMap> {
    if img.is_rgb() {
        bail!(InvalidInput, "label images must be grayscale");
    }
    ClassMap::new(img.height(), img.width(), img.data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preprocess_arithmetic() {
        let img = Image::rgb(2, 1, vec![255, 0, 128, 0, 255, 127]).unwrap();
        let t = preprocess(&img, &Normalization::IDENTITY).unwrap();
        assert_eq!(t.dims(), Dims::new(1, 3, 1, 2));
        assert_eq!(t.at(0, 0, 0, 0), 1.0);
        assert_eq!(t.at(0, 1, 0, 0), 0.0);
        let half = Normalization {
            mean: [0.5; 3],
            std: [0.5; 3],
        };
        let t = preprocess(&img, &half).unwrap();
        assert!(t.at(0, 2, 0, 0).abs() < 1.0 / 255.0 + 1e-6);
        assert!(t.at(0, 2, 0, 1).abs() < 1.0 / 255.0 + 1e-6);
        assert!(preprocess(&Image::gray(1, 1, vec![0]).unwrap(), &half).is_err());
    }

    #[test]
    fn palette_and_colorize() {
        let p = Palette::cityscapes();
        assert_eq!(p.len(), 19);
        assert_eq!(p.colors[0], [128, 64, 128]);
        assert_eq!(p.names[18], "bicycle");

        let map = ClassMap::new(1, 3, vec![0, 255, 13]).unwrap();
        let img = colorize(&map, &p).unwrap();
        assert_eq!(img.data(), &[128, 64, 128, 0, 0, 0, 0, 0, 142]);
        assert!(colorize(&ClassMap::filled(1, 1, 19), &p).is_err());
    }
}
