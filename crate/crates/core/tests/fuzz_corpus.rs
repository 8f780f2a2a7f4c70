//! Replays the checked-in fuzz seeds through the decoders they target.

use std::fs;
use std::path::PathBuf;

use skinseg_core::checkpoint::Checkpoint;
use skinseg_core::data::{decode_mask_png, encode_mask_png, DatasetManifest};

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<_> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

#[test]
fn checkpoint_seeds() {
    for (name, bytes) in seeds("checkpoint_decode") {
        match Checkpoint::decode(&bytes) {
            Ok(c) => assert_eq!(c.encode(), bytes, "{name}"),
            Err(_) => assert_eq!(name, "truncated"),
        }
    }
}

#[test]
fn manifest_seeds() {
    for (name, bytes) in seeds("manifest_parse") {
        let parsed = DatasetManifest::parse(std::str::from_utf8(&bytes).unwrap(), None);
        assert_eq!(parsed.is_ok(), name == "train", "{name}");
    }
}

#[test]
fn mask_seeds() {
    for (name, bytes) in seeds("mask_png_decode") {
        if let Ok(mask) = decode_mask_png(&bytes) {
            assert_eq!(decode_mask_png(&encode_mask_png(&mask)), Ok(mask), "{name}");
        }
    }
    assert!(decode_mask_png(&seeds("mask_png_decode").iter().find(|s| s.0 == "synth_mask.png").unwrap().1).is_ok());
}
