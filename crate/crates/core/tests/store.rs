use std::fs;

use ternres::store::container::CONTAINER_MAGIC;
use ternres::store::{load_quantized, load_tensor, save_quantized, save_tensor, ModelManifest, Network, Tensor};
use ternres::toy::toy_network;
use ternres::{convert_model, make_schedule, reconstruct, Error, ScheduleSpec};

#[test]
fn npy_files_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let t = Tensor::new("w", vec![3, 1, 2], vec![1.0, -0.5, 3.25, 0.0, f32::MIN_POSITIVE, 1e30]).unwrap();
    let path = dir.path().join("w.npy");
    save_tensor(&t, &path).unwrap();
    let back = load_tensor(&path).unwrap();
    assert_eq!(back, t);
    let bytes = fs::read(&path).unwrap();
    assert_eq!(&bytes[..6], b"\x93NUMPY");
    assert_eq!((bytes.len() - t.len() * 4) % 64, 0);
}

#[test]
fn network_save_and_load() {
    let dir = tempfile::tempdir().unwrap();
    let net = toy_network(0);
    let manifest = net.save(dir.path(), "net.json").unwrap();
    let back = Network::load(&manifest).unwrap();
    assert_eq!(back.params(), net.params());
    assert_eq!(back.layers().len(), net.layers().len());
    assert!(back.layers()[0].weight_ref.is_some());
}

#[test]
fn missing_weight_file_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = toy_network(0).save(dir.path(), "net.json").unwrap();
    let victim = dir.path().join("fc1.weight.npy");
    fs::remove_file(&victim).unwrap();
    match Network::load(&manifest) {
        Err(e @ Error::Io { .. }) => {
            assert!(e.is_io());
            assert!(e.to_string().contains("fc1.weight.npy"));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn loading_requires_weight_refs() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = toy_network(0).save(dir.path(), "net.json").unwrap();
    let mut m = ModelManifest::load(&manifest).unwrap();
    m.layers[0].weight_ref = None;
    fs::write(&manifest, m.to_json().unwrap()).unwrap();
    assert!(matches!(Network::load(&manifest), Err(Error::InvalidArgument(_))));
}

#[test]
fn weight_shape_must_match_architecture() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = toy_network(0).save(dir.path(), "net.json").unwrap();
    save_tensor(
        &Tensor::zeros("w", vec![16, 31]).unwrap(),
        dir.path().join("fc1.weight.npy"),
    )
    .unwrap();
    assert!(Network::load(&manifest).is_err());
}

#[test]
fn container_files_roundtrip_and_reject_garbage() {
    let dir = tempfile::tempdir().unwrap();
    let net = toy_network(2);
    let s = make_schedule(&net, ScheduleSpec::Uniform { epsilon_sq: 0.02 }).unwrap();
    let model = convert_model(&net, 64, &s, 16).unwrap().model;
    let path = dir.path().join("m.tq");
    save_quantized(&model, &path).unwrap();
    let bytes = fs::read(&path).unwrap();
    assert_eq!(&bytes[..8], CONTAINER_MAGIC);
    let back = load_quantized(&path).unwrap();
    assert_eq!(back, model);
    for (a, b) in model.layers.iter().zip(&back.layers) {
        assert_eq!(reconstruct(a), reconstruct(b));
    }

    let bad = dir.path().join("bad.tq");
    fs::write(&bad, b"not a container").unwrap();
    assert!(load_quantized(&bad).unwrap_err().is_io());
    let mut flipped = bytes.clone();
    flipped[0] ^= 0xff;
    fs::write(&bad, &flipped).unwrap();
    assert!(load_quantized(&bad).unwrap_err().is_io());
    fs::write(&bad, &bytes[..bytes.len() - 1]).unwrap();
    assert!(load_quantized(&bad).unwrap_err().is_io());
}
