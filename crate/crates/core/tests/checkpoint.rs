use glmamba::checkpoint::{encode, load, read_manifest, save, MAGIC};
use glmamba::config::ModelConfig;
use glmamba::gradcheck::random_tensor;
use glmamba::model::{param_count, GlMamba};
use glmamba::nn::ParamStore;
use glmamba::train::{train_step, Adam, Batch};
use glmamba::{Error, Tensor};

fn cfg() -> ModelConfig {
    ModelConfig {
        channels: 4,
        num_blocks: 1,
        n_state: 4,
        seed: 3,
        ..Default::default()
    }
}

fn batch() -> Batch<f32> {
    let img = |s: u64, h| random_tensor([1, 1, h, h], s, 0.5).map(|v| v + 0.5).cast();
    Batch {
        lr: img(1, 4),
        reference: img(2, 8),
        hr: img(3, 8),
    }
}

/// Model after two Adam steps, so moments are non-trivial.
fn trained() -> (GlMamba, ParamStore<f32>, Adam<f32>) {
    let (m, mut store) = GlMamba::init::<f32>(&cfg()).unwrap();
    let mut adam = Adam::new(1e-3, &store);
    for _ in 0..2 {
        train_step(&m, &mut store, &mut adam, &batch()).unwrap();
    }
    (m, store, adam)
}

fn bits(t: &Tensor<f32>) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn round_trip_restores_params_optimizer_and_outputs_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ckpt");
    let (m, store, adam) = trained();
    save(&path, &m.config, &store, Some(&adam)).unwrap();

    let (_, template) = GlMamba::init::<f32>(&cfg()).unwrap();
    let ck = load(&path, &cfg(), &template).unwrap();
    assert_eq!(ck.config, m.config);
    for (a, b) in store.entries().iter().zip(ck.params.entries()) {
        assert_eq!(a.name, b.name);
        assert_eq!(bits(&a.value), bits(&b.value), "{}", a.name);
    }
    assert_eq!(ck.adam.as_ref(), Some(&adam));

    let b = batch();
    let (sr0, rec0) = m.predict(&store, &b.lr, &b.reference).unwrap();
    let (sr1, rec1) = m.predict(&ck.params, &b.lr, &b.reference).unwrap();
    assert_eq!(bits(&sr0), bits(&sr1));
    assert_eq!(bits(&rec0), bits(&rec1));

    // Continuing training from the checkpoint matches continuing in memory.
    let (mut s0, mut a0) = (store.clone(), adam.clone());
    let (mut s1, mut a1) = (ck.params, ck.adam.unwrap());
    let l0 = train_step(&m, &mut s0, &mut a0, &b).unwrap();
    let l1 = train_step(&m, &mut s1, &mut a1, &b).unwrap();
    assert_eq!(l0.loss.to_bits(), l1.loss.to_bits());

    // Saving the reloaded state reproduces the file byte for byte.
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], MAGIC);
    assert_eq!(encode(&m.config, &store, Some(&adam)), bytes);
}

#[test]
fn manifest_total_equals_param_count() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.ckpt");
    let (m, store) = GlMamba::init::<f32>(&cfg()).unwrap();
    save(&path, &m.config, &store, None).unwrap();
    let manifest = read_manifest(&path).unwrap();
    assert_eq!(manifest.len(), store.len());
    assert_eq!(manifest.iter().map(|e| e.numel()).sum::<usize>(), param_count(&store));
    let (_, template) = GlMamba::init::<f32>(&cfg()).unwrap();
    assert!(load(&path, &cfg(), &template).unwrap().adam.is_none());
}

#[test]
fn version_mismatch_and_truncation_are_errors() {
    let dir = tempfile::tempdir().unwrap();
    let (m, store, adam) = trained();
    let bytes = encode(&m.config, &store, Some(&adam));
    let (_, template) = GlMamba::init::<f32>(&cfg()).unwrap();

    let mut v2 = bytes.clone();
    v2[4..8].copy_from_slice(&2u32.to_le_bytes());
    let p = dir.path().join("v2.ckpt");
    std::fs::write(&p, &v2).unwrap();
    let err = load(&p, &cfg(), &template).unwrap_err();
    assert!(err.to_string().contains("version 2"), "{err}");

    for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
        let p = dir.path().join(format!("cut{cut}.ckpt"));
        std::fs::write(&p, &bytes[..cut]).unwrap();
        let err = load(&p, &cfg(), &template).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "cut {cut}: {err}");
    }
}

#[test]
fn unknown_tensor_name_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let (m, mut store) = GlMamba::init::<f32>(&cfg()).unwrap();
    store.add("lr.stowaway", Tensor::zeros([1, 1, 1, 2]));
    let p = dir.path().join("u.ckpt");
    save(&p, &m.config, &store, None).unwrap();
    let (_, template) = GlMamba::init::<f32>(&cfg()).unwrap();
    let err = load(&p, &cfg(), &template).unwrap_err();
    assert!(err.to_string().contains("unknown tensor name `lr.stowaway`"), "{err}");
}

#[test]
fn mismatched_channels_are_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let (m, store) = GlMamba::init::<f32>(&cfg()).unwrap();
    let p = dir.path().join("c.ckpt");
    save(&p, &m.config, &store, None).unwrap();
    let other = ModelConfig { channels: 8, ..cfg() };
    let (_, template) = GlMamba::init::<f32>(&other).unwrap();
    let err = load(&p, &other, &template).unwrap_err();
    assert!(matches!(err, Error::Checkpoint(_)));
    assert!(err.to_string().contains("channels"), "{err}");
}

#[test]
fn missing_tensor_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let (m, store) = GlMamba::init::<f32>(&cfg()).unwrap();
    let mut partial = ParamStore::new();
    for e in store.entries().iter().skip(1) {
        partial.add(e.name.clone(), e.value.clone());
    }
    let p = dir.path().join("m.ckpt");
    save(&p, &m.config, &partial, None).unwrap();
    let err = load(&p, &cfg(), &store).unwrap_err();
    assert!(err.to_string().contains("missing tensor"), "{err}");
}
