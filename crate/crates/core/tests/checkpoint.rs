mod common;

use common::small_spec;
use swiftseg::graph::checkpoint;
use swiftseg::graph::ParamStore;
use swiftseg::{Backbone, Dims, Error, Model, ModelSpec, Tensor};

fn configs() -> Vec<ModelSpec> {
    vec![
        small_spec(Backbone::Resnet18, 1, true),
        small_spec(Backbone::Resnet18, 2, true),
        small_spec(Backbone::Mobilenetv2, 1, true),
        small_spec(Backbone::Mobilenetv2, 2, false),
    ]
}

#[test]
fn round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    for (i, spec) in configs().iter().enumerate() {
        let a = Model::<f32>::build(spec, i as u64).unwrap();
        let path = dir.path().join(format!("m{i}.swft"));
        a.save(&path).unwrap();
        let mut b = Model::<f32>::build(spec, 99).unwrap();
        b.load(&path).unwrap();
        for ((na, ta), (nb, tb)) in a.params().iter().zip(b.params().iter()) {
            assert_eq!(na, nb);
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(ta), bits(tb), "{na}");
        }
    }
}

#[test]
fn mismatched_spec_names_the_tensor() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.swft");
    Model::<f32>::build(&small_spec(Backbone::Resnet18, 1, true), 0).unwrap().save(&path).unwrap();
    let wider = ModelSpec {
        decoder_width: 256,
        ..small_spec(Backbone::Resnet18, 1, true)
    };
    let err = Model::<f32>::build(&wider, 0).unwrap().load(&path).unwrap_err();
    match &err {
        Error::DimsMismatch { name, .. } => assert_eq!(name, "classifier.conv.weight"),
        other => panic!("unexpected {other:?}"),
    }
    let other = Model::<f32>::build(&small_spec(Backbone::Mobilenetv2, 1, true), 0);
    let err = other.unwrap().load(&path).unwrap_err();
    assert!(matches!(err, Error::UnknownParam(ref n) if n.starts_with("backbone.")), "{err:?}");
}

#[test]
fn corrupted_files_are_rejected() {
    let mut store = ParamStore::<f32>::new();
    store.insert("a.weight", Tensor::full(Dims::new(2, 1, 3, 3), 0.5));
    let bytes = checkpoint::encode(store.iter());
    for cut in [0, 3, 8, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(checkpoint::decode::<f32>(&bytes[..cut]), Err(Error::Checkpoint(_))), "cut {cut}");
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(checkpoint::decode::<f32>(&bad), Err(Error::Checkpoint(_))));
    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(checkpoint::decode::<f32>(&long), Err(Error::Checkpoint(_))));

    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.swft");
    assert!(matches!(checkpoint::load::<f32>(&missing), Err(Error::Io { .. })));
}

#[test]
fn precision_survives_the_file() {
    let mut store = ParamStore::<f64>::new();
    store.insert("w", Tensor::full(Dims::vector(4), std::f64::consts::PI));
    let back = checkpoint::decode::<f64>(&checkpoint::encode(store.iter())).unwrap();
    assert_eq!(back[0].1.data()[0], std::f64::consts::PI);
    let empty = checkpoint::decode::<f32>(&checkpoint::encode(ParamStore::<f32>::new().iter())).unwrap();
    assert!(empty.is_empty());
}
