use cmfd_core::checkpoint::FORMAT_VERSION;
use cmfd_core::nn::Params;
use cmfd_core::{load_checkpoint, save_checkpoint, Checkpoint, Error, Model, ModelConfig, Tensor};
use sha2::{Digest, Sha256};

fn micro_ckpt() -> Checkpoint {
    let config = ModelConfig::micro();
    let params: Params<f32> = Model::new(&config).unwrap().init_params();
    Checkpoint {
        params,
        config,
        training_step: 42,
    }
}

#[test]
fn round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let ck = micro_ckpt();
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.config, ck.config);
    assert_eq!(back.training_step, 42);
    assert_eq!(back.params.checksum(), ck.params.checksum());
    for (name, t) in ck.params.iter() {
        let b = back.params.get(name).unwrap();
        assert_eq!(b.shape(), t.shape());
        assert!(t.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    let p2 = dir.path().join("f.ckpt");
    save_checkpoint(&ck.params, &ck.config, &p2).unwrap();
    let (params, config) = load_checkpoint(&p2).unwrap();
    assert_eq!(config, ck.config);
    assert_eq!(params.checksum(), ck.params.checksum());
}

#[test]
fn default_config_round_trips_through_text() {
    let cfg = ModelConfig::default();
    assert_eq!(ModelConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
}

#[test]
fn version_mismatch_is_reported() {
    let mut bytes = micro_ckpt().to_bytes();
    bytes[8..12].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    let n = bytes.len();
    let digest = Sha256::digest(&bytes[..n - 32]);
    bytes[n - 32..].copy_from_slice(&digest);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("v.ckpt");
    std::fs::write(&path, &bytes).unwrap();
    match Checkpoint::load(&path) {
        Err(Error::Version { found, expected, .. }) => assert_eq!((found, expected), (FORMAT_VERSION + 1, FORMAT_VERSION)),
        other => panic!("expected version error, got {:?}", other.map(|c| c.training_step)),
    }
}

#[test]
fn flipped_byte_fails_integrity_check() {
    let mut bytes = micro_ckpt().to_bytes();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x01;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.ckpt");
    std::fs::write(&path, &bytes).unwrap();
    match Checkpoint::load(&path) {
        Err(Error::Checkpoint { msg, .. }) => assert!(msg.contains("integrity"), "{msg}"),
        other => panic!("expected integrity error, got {:?}", other.map(|c| c.training_step)),
    }
}

#[test]
fn missing_file_is_not_found() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(Checkpoint::load(&dir.path().join("nope.ckpt")), Err(Error::NotFound(_))));
}

#[test]
fn shapes_disagreeing_with_config_are_rejected() {
    let mut ck = micro_ckpt();
    ck.params.insert("decoder.seg.bias", Tensor::zeros(&[3]));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.ckpt");
    std::fs::write(&path, ck.to_bytes()).unwrap();
    let err = Checkpoint::load(&path).unwrap_err();
    assert!(err.to_string().contains("decoder.seg.bias"), "{err}");
}
