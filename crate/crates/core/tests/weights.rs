//! Weight container format and initialization.

use ffnet::graph::build_stem_graph;
use ffnet::weights::{init_constant, MAGIC};
use ffnet::{
    build_model, init_random, load_weights, save_weights, Error, ModelConfig, Variant, WeightEntry,
    WeightStore,
};
use proptest::prelude::*;

fn header(count: u32) -> Vec<u8> {
    let mut b = MAGIC.to_vec();
    b.extend_from_slice(&1u32.to_le_bytes());
    b.extend_from_slice(&count.to_le_bytes());
    b
}

fn entry(name: &str, dims: &[u32], data: &[f32]) -> Vec<u8> {
    let mut b = (name.len() as u16).to_le_bytes().to_vec();
    b.extend_from_slice(name.as_bytes());
    b.push(dims.len() as u8);
    for d in dims {
        b.extend_from_slice(&d.to_le_bytes());
    }
    for v in data {
        b.extend_from_slice(&v.to_le_bytes());
    }
    b
}

#[test]
fn hand_assembled_file_decodes() {
    let mut bytes = header(2);
    bytes.extend(entry("a", &[2], &[1.5, -2.0]));
    bytes.extend(entry("b.w", &[1, 1, 1, 1], &[0.25]));
    let s = WeightStore::from_bytes(&bytes).unwrap();
    assert_eq!(s.len(), 2);
    assert_eq!(s.data("a").unwrap(), &[1.5, -2.0]);
    assert_eq!(s.get("b.w").unwrap().dims, [1, 1, 1, 1]);
    assert_eq!(s.to_bytes().unwrap(), bytes);
}

#[test]
fn every_failure_has_its_own_error() {
    let mut bad = header(0);
    bad[..4].copy_from_slice(b"XXXX");
    assert!(matches!(WeightStore::from_bytes(&bad), Err(Error::BadMagic(m)) if &m == b"XXXX"));

    let mut short = header(2);
    short.extend(entry("a", &[1], &[1.0]));
    assert!(matches!(
        WeightStore::from_bytes(&short),
        Err(Error::Truncated(_))
    ));

    let mut cut = header(1);
    cut.extend(entry("a", &[3], &[1.0, 2.0, 3.0]));
    cut.pop();
    assert!(matches!(
        WeightStore::from_bytes(&cut),
        Err(Error::Truncated(_))
    ));

    let mut dup = header(2);
    dup.extend(entry("a", &[1], &[1.0]));
    dup.extend(entry("a", &[1], &[2.0]));
    assert!(matches!(
        WeightStore::from_bytes(&dup),
        Err(Error::DuplicateName(_))
    ));

    let mut extra = header(1);
    extra.extend(entry("a", &[1], &[1.0]));
    extra.push(0);
    assert!(matches!(
        WeightStore::from_bytes(&extra),
        Err(Error::TrailingData(1))
    ));

    assert!(matches!(
        WeightEntry::new("x", vec![2, 2], vec![0.0; 3]),
        Err(Error::DimMismatch { .. })
    ));
    let mut v2 = header(0);
    v2[4] = 2;
    assert!(matches!(
        WeightStore::from_bytes(&v2),
        Err(Error::UnsupportedVersion(2))
    ));
}

#[test]
fn model_stores_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    for (name, v) in [
        ("resnet22s", Variant::B),
        ("resnet46ns", Variant::C),
        ("resnet50", Variant::A),
    ] {
        let cfg =
            ModelConfig::from_registry(name)
                .unwrap()
                .with_variants(v, Variant::C, Variant::C);
        let g = build_model(&cfg).unwrap();
        let store = init_random(&g, 11);
        let path = dir.path().join(format!("{name}.ffnw"));
        save_weights(&store, &path).unwrap();
        let back = load_weights(&path).unwrap();
        assert_eq!(back, store);
        assert!(back.check_against(&g, false).unwrap().is_empty());
        assert_eq!(std::fs::read(&path).unwrap(), store.to_bytes().unwrap());
    }
    assert!(matches!(
        load_weights(dir.path().join("missing.ffnw")),
        Err(Error::Io { .. })
    ));
}

#[test]
fn loading_into_a_graph_checks_names_and_dims() {
    let a = build_stem_graph(Variant::A).unwrap();
    let c = build_stem_graph(Variant::C).unwrap();
    let store = init_random(&c, 0);
    assert!(matches!(
        store.check_against(&a, false),
        Err(Error::MissingWeight(_)) | Err(Error::DimMismatch { .. })
    ));

    let mut both = init_random(&a, 0);
    both.insert(WeightEntry::new("unused", vec![1], vec![0.0]).unwrap())
        .unwrap();
    assert!(
        matches!(both.check_against(&a, false), Err(Error::UnexpectedWeights(ref v)) if v == &["unused"])
    );
    assert_eq!(both.check_against(&a, true).unwrap(), ["unused"]);
}

#[test]
fn init_is_seeded_he_normal() {
    let g = build_stem_graph(Variant::C).unwrap();
    assert_eq!(init_random(&g, 5), init_random(&g, 5));
    assert_ne!(init_random(&g, 5), init_random(&g, 6));
    let s = init_random(&g, 5);
    let w = s.data("stem.conv3.weight").unwrap();
    assert_eq!(w.len(), 64 * 64 * 9);
    let mean = w.iter().map(|&v| v as f64).sum::<f64>() / w.len() as f64;
    let var = w.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / (w.len() - 1) as f64;
    let target = (2.0f64 / 576.0).sqrt();
    assert!((var.sqrt() - target).abs() <= 0.1 * target);
    for (suffix, v) in [("gamma", 1.0), ("beta", 0.0), ("mean", 0.0), ("var", 1.0)] {
        assert!(s
            .data(&format!("stem.conv1.bn.{suffix}"))
            .unwrap()
            .iter()
            .all(|&x| x == v));
    }
    let k = init_constant(&g, |d| d[0] as f32);
    assert!(k
        .data("stem.conv1.weight")
        .unwrap()
        .iter()
        .all(|&x| x == 32.0));
}

proptest! {
    #[test]
    fn arbitrary_stores_round_trip(
        entries in prop::collection::btree_map("[a-z.]{1,12}", prop::collection::vec(any::<f32>(), 0..20), 0..8)
    ) {
        let store = WeightStore::from_entries(
            entries
                .into_iter()
                .map(|(n, d)| WeightEntry::new(n, vec![d.len()], d).unwrap())
                .collect(),
        )
        .unwrap();
        let bytes = store.to_bytes().unwrap();
        let back = WeightStore::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        for (a, b) in store.entries().iter().zip(back.entries()) {
            prop_assert_eq!(&a.name, &b.name);
            prop_assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn truncated_prefixes_never_decode(cut in 1usize..60) {
        let mut bytes = header(2);
        bytes.extend(entry("layer.w", &[2, 3], &[1.0; 6]));
        bytes.extend(entry("b", &[1], &[2.0]));
        let cut = cut.min(bytes.len() - 1);
        prop_assert!(WeightStore::from_bytes(&bytes[..bytes.len() - cut]).is_err());
    }
}
