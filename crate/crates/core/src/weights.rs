//! Named weight tensors, seeded initialization and the `FFNW` container.
//!
//! File layout, all integers little-endian, no padding:
//!
//! ```text
//! magic   "FFNW"
//! u32     version (1)
//! u32     entry count
//! entries:
//!   u16   name length, then UTF-8 name bytes
//!   u8    ndim, then ndim × u32 dims
//!   f32   payload, product(dims) values
//! ```

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::{LayerGraph, WeightRole};

pub const MAGIC: [u8; 4] = *b"FFNW";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct WeightEntry {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl WeightEntry {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let name = name.into();
        if dims.iter().product::<usize>() != data.len() {
            return Err(Error::DimMismatch {
                name,
                dims,
                len: data.len(),
            });
        }
        Ok(WeightEntry { name, dims, data })
    }
}

/// Ordered, uniquely named weight entries.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightStore {
    entries: Vec<WeightEntry>,
    index: HashMap<String, usize>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries(entries: Vec<WeightEntry>) -> Result<Self> {
        let mut store = WeightStore::new();
        for e in entries {
            store.insert(e)?;
        }
        Ok(store)
    }

    pub fn insert(&mut self, entry: WeightEntry) -> Result<()> {
        if entry.dims.iter().product::<usize>() != entry.data.len() {
            return Err(Error::DimMismatch {
                name: entry.name,
                dims: entry.dims,
                len: entry.data.len(),
            });
        }
        if self.index.contains_key(&entry.name) {
            return Err(Error::DuplicateName(entry.name));
        }
        self.index.insert(entry.name.clone(), self.entries.len());
        self.entries.push(entry);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&WeightEntry> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    /// Mutable payload of an entry; dims cannot change.
    pub fn data_mut(&mut self, name: &str) -> Option<&mut [f32]> {
        let i = *self.index.get(name)?;
        Some(&mut self.entries[i].data)
    }

    pub fn data(&self, name: &str) -> Result<&[f32]> {
        self.get(name)
            .map(|e| e.data.as_slice())
            .ok_or_else(|| Error::MissingWeight(name.to_string()))
    }

    pub fn entries(&self) -> &[WeightEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count.
    pub fn num_elements(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    /// Checks that every weight the graph needs is present with the right
    /// dims. Entries the graph does not use are an error unless `permissive`,
    /// in which case their names are returned as warnings.
    pub fn check_against(&self, graph: &LayerGraph, permissive: bool) -> Result<Vec<String>> {
        let mut used = std::collections::HashSet::new();
        for spec in graph.weight_specs() {
            let entry = self
                .get(&spec.name)
                .ok_or_else(|| Error::MissingWeight(spec.name.clone()))?;
            if entry.dims != spec.dims {
                return Err(Error::DimMismatch {
                    name: spec.name.clone(),
                    dims: spec.dims.clone(),
                    len: entry.data.len(),
                });
            }
            used.insert(spec.name.as_str());
        }
        let extra: Vec<String> = self
            .entries
            .iter()
            .filter(|e| !used.contains(e.name.as_str()))
            .map(|e| e.name.clone())
            .collect();
        if !extra.is_empty() && !permissive {
            return Err(Error::UnexpectedWeights(extra));
        }
        Ok(extra)
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(&MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for e in &self.entries {
            w.write_all(&(e.name.len() as u16).to_le_bytes())?;
            w.write_all(e.name.as_bytes())?;
            w.write_all(&[e.dims.len() as u8])?;
            for &d in &e.dims {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            let mut payload = Vec::with_capacity(e.data.len() * 4);
            for v in &e.data {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&payload)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.check_encodable()?;
        let mut buf = Vec::new();
        self.write_to(&mut buf)
            .expect("writing to a Vec cannot fail");
        Ok(buf)
    }

    fn check_encodable(&self) -> Result<()> {
        for e in &self.entries {
            if e.name.len() > u16::MAX as usize
                || e.dims.len() > u8::MAX as usize
                || e.dims.iter().any(|&d| d > u32::MAX as usize)
            {
                return Err(Error::InvalidInput(format!(
                    "entry `{}` exceeds the container's field widths",
                    e.name
                )));
            }
        }
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(Error::BadMagic(magic));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let count = r.u32("entry count")? as usize;
        let mut store = WeightStore::new();
        for i in 0..count {
            let what = format!("entry {i} of {count}");
            let name_len = r.u16(&what)? as usize;
            let name = std::str::from_utf8(r.take(name_len, &what)?)
                .map_err(|_| Error::InvalidInput(format!("{what}: name is not UTF-8")))?
                .to_string();
            let ndim = r.take(1, &what)?[0] as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(r.u32(&what)? as usize);
            }
            let n: usize = dims.iter().product();
            let payload = r.take(
                n.checked_mul(4)
                    .ok_or_else(|| Error::Truncated(what.clone()))?,
                &what,
            )?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            store.insert(WeightEntry { name, dims, data })?;
        }
        if r.pos != bytes.len() {
            return Err(Error::TrailingData(bytes.len() - r.pos));
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(format!("{what} at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2, what)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }
}

pub fn save_weights(store: &WeightStore, path: impl AsRef<Path>) -> Result<()> {
    store.save(path)
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<WeightStore> {
    WeightStore::load(path)
}

/// He-normal convolution weights (`N(0, 2/fan_in)`), zero biases and
/// identity batch norm (`gamma 1, beta 0, mean 0, var 1`).
///
/// Each entry draws from its own ChaCha8 stream selected by the entry's
/// position, so a given seed reproduces the same store on every platform.
pub fn init_random(graph: &LayerGraph, seed: u64) -> WeightStore {
    let mut store = WeightStore::new();
    for (i, spec) in graph.weight_specs().enumerate() {
        let n = spec.len();
        let data = match spec.role {
            WeightRole::ConvWeight => {
                let fan_in: usize = spec.dims[1..].iter().product();
                let normal =
                    Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).expect("finite positive std");
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                normal.sample_iter(&mut rng).take(n).collect()
            }
            WeightRole::ConvBias | WeightRole::BnBeta | WeightRole::BnMean => vec![0.0; n],
            WeightRole::BnGamma | WeightRole::BnVar => vec![1.0; n],
        };
        store
            .insert(WeightEntry {
                name: spec.name.clone(),
                dims: spec.dims.clone(),
                data,
            })
            .expect("graph weight names are unique");
    }
    store
}

/// Every weight set to a constant; batch norm stays the identity.
pub fn init_constant(graph: &LayerGraph, conv_value: impl Fn(&[usize]) -> f32) -> WeightStore {
    let mut store = WeightStore::new();
    for spec in graph.weight_specs() {
        let n = spec.len();
        let data = match spec.role {
            WeightRole::ConvWeight => vec![conv_value(&spec.dims); n],
            WeightRole::ConvBias | WeightRole::BnBeta | WeightRole::BnMean => vec![0.0; n],
            WeightRole::BnGamma | WeightRole::BnVar => vec![1.0; n],
        };
        store
            .insert(WeightEntry {
                name: spec.name.clone(),
                dims: spec.dims.clone(),
                data,
            })
            .expect("graph weight names are unique");
    }
    store
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_stem_graph, Variant};

    fn sample() -> WeightStore {
        WeightStore::from_entries(vec![
            WeightEntry::new("a.weight", vec![2, 1, 1, 1], vec![1.5, -2.0]).unwrap(),
            WeightEntry::new("b", vec![3], vec![0.0, f32::MIN_POSITIVE, -0.0]).unwrap(),
        ])
        .unwrap()
    }

    #[test]
    fn layout_is_bit_exact() {
        let bytes = sample().to_bytes().unwrap();
        let mut expect = b"FFNW".to_vec();
        expect.extend(1u32.to_le_bytes());
        expect.extend(2u32.to_le_bytes());
        expect.extend(8u16.to_le_bytes());
        expect.extend(b"a.weight");
        expect.push(4);
        for d in [2u32, 1, 1, 1] {
            expect.extend(d.to_le_bytes());
        }
        expect.extend(1.5f32.to_le_bytes());
        expect.extend((-2.0f32).to_le_bytes());
        expect.extend(1u16.to_le_bytes());
        expect.extend(b"b");
        expect.push(1);
        expect.extend(3u32.to_le_bytes());
        for v in [0.0f32, f32::MIN_POSITIVE, -0.0] {
            expect.extend(v.to_le_bytes());
        }
        assert_eq!(bytes, expect);
        let back = WeightStore::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn distinct_load_errors() {
        let good = sample().to_bytes().unwrap();

        let mut bad = good.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(matches!(WeightStore::from_bytes(&bad), Err(Error::BadMagic(m)) if &m == b"XXXX"));

        let mut v2 = good.clone();
        v2[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            WeightStore::from_bytes(&v2),
            Err(Error::UnsupportedVersion(2))
        ));

        let mut more = good.clone();
        more[8..12].copy_from_slice(&3u32.to_le_bytes());
        assert!(matches!(
            WeightStore::from_bytes(&more),
            Err(Error::Truncated(_))
        ));

        assert!(matches!(
            WeightStore::from_bytes(&good[..good.len() - 1]),
            Err(Error::Truncated(_))
        ));

        let mut fewer = good.clone();
        fewer[8..12].copy_from_slice(&1u32.to_le_bytes());
        assert!(matches!(
            WeightStore::from_bytes(&fewer),
            Err(Error::TrailingData(_))
        ));

        let e = WeightEntry::new("x", vec![1], vec![1.0]).unwrap();
        let mut dup = WeightStore::new();
        dup.insert(e.clone()).unwrap();
        let mut bytes = dup.to_bytes().unwrap();
        bytes[8..12].copy_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&dup.to_bytes().unwrap()[12..]);
        assert!(
            matches!(WeightStore::from_bytes(&bytes), Err(Error::DuplicateName(n)) if n == "x")
        );

        assert!(matches!(
            WeightEntry::new("y", vec![2, 2], vec![0.0; 3]),
            Err(Error::DimMismatch { .. })
        ));
    }

    #[test]
    fn init_is_seeded_and_batch_norm_is_identity() {
        let g = build_stem_graph(Variant::B).unwrap();
        let a = init_random(&g, 7);
        let b = init_random(&g, 7);
        assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
        assert_ne!(a, init_random(&g, 8));
        for spec in g.weight_specs() {
            let d = a.data(&spec.name).unwrap();
            match spec.role {
                WeightRole::BnGamma | WeightRole::BnVar => assert!(d.iter().all(|&v| v == 1.0)),
                WeightRole::BnBeta | WeightRole::BnMean => assert!(d.iter().all(|&v| v == 0.0)),
                _ => {}
            }
        }
        a.check_against(&g, false).unwrap();
    }

    #[test]
    fn he_normal_spread() {
        let mut b = crate::graph::GraphBuilder::new(64);
        let c = b.conv(
            "c",
            b.input(),
            64,
            crate::tensor::ConvParams::square(3, 1, 1),
        );
        let g = b.finish("one-conv", c, vec![]).unwrap();
        let w = init_random(&g, 1);
        let d = w.data("c.weight").unwrap();
        assert_eq!(d.len(), 64 * 64 * 9);
        let mean = d.iter().map(|&v| v as f64).sum::<f64>() / d.len() as f64;
        let var = d.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / (d.len() - 1) as f64;
        let target = (2.0f64 / 576.0).sqrt();
        assert!(
            (var.sqrt() - target).abs() < 0.1 * target,
            "std {} vs {}",
            var.sqrt(),
            target
        );
    }

    #[test]
    fn check_against_graph() {
        let g = build_stem_graph(Variant::C).unwrap();
        let mut w = init_random(&g, 0);
        w.insert(WeightEntry::new("extra", vec![1], vec![0.0]).unwrap())
            .unwrap();
        assert!(matches!(
            w.check_against(&g, false),
            Err(Error::UnexpectedWeights(_))
        ));
        assert_eq!(
            w.check_against(&g, true).unwrap(),
            vec!["extra".to_string()]
        );

        let partial = WeightStore::from_entries(w.entries()[1..].to_vec()).unwrap();
        assert!(matches!(
            partial.check_against(&g, true),
            Err(Error::MissingWeight(_))
        ));
    }
}
