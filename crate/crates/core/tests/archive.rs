use proptest::prelude::*;
use retina_forge::arch::{ArchKind, ArchitectureSpec, Model};
use retina_forge::io::{archive_size, decode_weights, encode_weights, load_weights, save_weights, ArchiveMeta};
use retina_forge::{Error, ErrorClass};
use std::path::Path;

fn mini(seed: u64) -> Model {
    Model::build(&ArchitectureSpec::default_for(ArchKind::MiUnet), seed).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn round_trip_is_exact(seed in any::<u64>(), epoch in 0usize..500) {
        let model = mini(seed);
        let meta = ArchiveMeta { seed, epoch };
        let bytes = encode_weights(&model, meta);
        prop_assert_eq!(bytes.len(), archive_size(&model, meta));
        let (back, m) = decode_weights(&bytes, Path::new("mem"), Some(model.spec())).unwrap();
        prop_assert_eq!(m, meta);
        prop_assert_eq!(back.params().values(), model.params().values());
        prop_assert_eq!(encode_weights(&back, meta), bytes);
    }

    #[test]
    fn any_single_byte_flip_is_rejected(pos in any::<prop::sample::Index>(), bit in 0u8..8) {
        let model = mini(3);
        let mut bytes = encode_weights(&model, ArchiveMeta::default());
        let i = pos.index(bytes.len());
        bytes[i] ^= 1 << bit;
        let err = decode_weights(&bytes, Path::new("mem"), None).unwrap_err();
        prop_assert_eq!(err.class(), ErrorClass::Data);
    }

    #[test]
    fn truncation_is_rejected(cut in 1usize..64) {
        let bytes = encode_weights(&mini(4), ArchiveMeta::default());
        prop_assert!(decode_weights(&bytes[..bytes.len() - cut], Path::new("mem"), None).is_err());
    }
}

#[test]
fn spec_mismatch_names_both_architectures() {
    let bytes = encode_weights(&mini(1), ArchiveMeta::default());
    let want = ArchitectureSpec::default_for(ArchKind::IterMiUnet);
    let err = decode_weights(&bytes, Path::new("w.imiu"), Some(&want)).unwrap_err();
    let text = err.to_string();
    assert!(matches!(err, Error::Archive { .. }), "{err:?}");
    assert!(text.contains("miunet") && text.contains("itermiunet"), "{text}");
}

#[test]
fn save_and_load_through_the_filesystem() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.imiu");
    let model = Model::build(&ArchitectureSpec::default_for(ArchKind::IterMiUnet), 8).unwrap();
    let meta = ArchiveMeta { seed: 8, epoch: 3 };
    let size = save_weights(&model, meta, &path).unwrap();
    assert_eq!(size as usize, archive_size(&model, meta));
    assert_eq!(std::fs::metadata(&path).unwrap().len(), size);
    let (back, m) = load_weights(&path, Some(model.spec())).unwrap();
    assert_eq!(m, meta);
    assert_eq!(back.params().values(), model.params().values());
    assert_eq!(back.spec(), model.spec());
}

#[test]
fn missing_archive_is_an_io_error() {
    let err = load_weights(Path::new("/nonexistent/w.imiu"), None).unwrap_err();
    assert_eq!(err.class(), ErrorClass::Io);
}
