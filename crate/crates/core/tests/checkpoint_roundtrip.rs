//! Checkpoint round-trip contracts.

use std::collections::BTreeMap;
use tunelab_core::checkpoint::{
    file_hash, load_adapter, load_base, save_adapter, save_base,
};
use tunelab_core::model::{LoraAdapter, ModelConfig, Params};
use tunelab_core::rng::stream;

fn config() -> ModelConfig {
    ModelConfig {
        vocab: 17,
        d_model: 8,
        layers: 2,
        heads: 2,
        d_ff: 12,
        window: 9,
    }
}

#[test]
fn base_checkpoint_roundtrip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("base.ckpt");
    let params = Params::<f32>::init(&config(), &mut stream(1, "ckpt")).unwrap();
    let mut extra = BTreeMap::new();
    extra.insert("holdout_ppl".to_string(), "3.5".to_string());
    save_base(&path, &params, 42, &extra).unwrap();
    let (loaded, meta) = load_base(&path).unwrap();
    assert_eq!(meta.get("seed").unwrap(), "42");
    assert_eq!(meta.get("holdout_ppl").unwrap(), "3.5");
    assert_eq!(loaded.config, params.config);
    for ((na, ta), (nb, tb)) in params
        .named_tensors()
        .iter()
        .zip(loaded.named_tensors().iter())
    {
        assert_eq!(na, nb);
        assert_eq!(ta.shape(), tb.shape());
        // bit-exact: compare the raw bit patterns
        let bits_a: Vec<u32> = ta.data().iter().map(|v| v.to_bits()).collect();
        let bits_b: Vec<u32> = tb.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits_a, bits_b, "{na}");
    }

    // saving the loaded params reproduces the file byte-for-byte
    let path2 = dir.path().join("base2.ckpt");
    save_base(&path2, &loaded, 42, &extra).unwrap();
    assert_eq!(
        std::fs::read(&path).unwrap(),
        std::fs::read(&path2).unwrap()
    );
}

#[test]
fn adapter_checkpoint_roundtrip_and_hash_binding() {
    let dir = tempfile::tempdir().unwrap();
    let base_path = dir.path().join("base.ckpt");
    let params = Params::<f32>::init(&config(), &mut stream(2, "ckpt")).unwrap();
    save_base(&base_path, &params, 7, &BTreeMap::new()).unwrap();
    let base_hash = file_hash(&base_path).unwrap();

    let adapter =
        LoraAdapter::<f32>::init(&config(), 2, 4.0, 0.05, &mut stream(3, "ckpt")).unwrap();
    let path = dir.path().join("adapter.ckpt");
    save_adapter(&path, &adapter, &config(), 7, base_hash, &BTreeMap::new()).unwrap();
    let loaded = load_adapter(&path).unwrap();
    assert_eq!(loaded.base_hash, base_hash);
    assert_eq!(loaded.config, config());
    assert_eq!(loaded.adapter.rank, 2);
    assert_eq!(loaded.adapter.alpha, 4.0);
    for ((na, ta), (nb, tb)) in adapter
        .named_tensors()
        .iter()
        .zip(loaded.adapter.named_tensors().iter())
    {
        assert_eq!(na, nb);
        assert_eq!(ta.data(), tb.data());
    }
}

#[test]
fn kind_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("base.ckpt");
    let params = Params::<f32>::init(&config(), &mut stream(4, "ckpt")).unwrap();
    save_base(&path, &params, 1, &BTreeMap::new()).unwrap();
    assert!(load_adapter(&path).is_err());
}
