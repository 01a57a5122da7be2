mod common;

use moacl::harness::checkpoint::{decode_backbone_file, decode_state, encode_backbone_file, encode_state};
use moacl::harness::{load_backbone, load_state, save_backbone, save_state};
use moacl::Error;

/// `(name, payload start, payload len)` of every section.
fn layout(bytes: &[u8]) -> Vec<(String, usize, usize)> {
    let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let mut at = 12;
    let mut out = Vec::new();
    for _ in 0..count {
        let n = u16::from_le_bytes(bytes[at..at + 2].try_into().unwrap()) as usize;
        let name = String::from_utf8(bytes[at + 2..at + 2 + n].to_vec()).unwrap();
        at += 2 + n;
        let len = u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap()) as usize;
        at += 8;
        out.push((name, at, len));
        at += len + 32;
    }
    assert_eq!(at, bytes.len());
    out
}

#[test]
fn state_round_trip_and_corruption() {
    let cfg = common::tiny_config();
    let (frozen, _, log, state) = common::tiny_run(&cfg);
    assert_eq!(log.fusions.len(), 1);

    let bytes = encode_state(&state);
    let back = decode_state(&bytes).unwrap();
    assert_eq!(back, state);
    assert_eq!(encode_state(&back), bytes);

    let sections = layout(&bytes);
    let names: Vec<&str> = sections.iter().map(|s| s.0.as_str()).collect();
    assert_eq!(names, ["config", "backbone", "adapters", "router", "memory"]);
    for (name, start, len) in &sections {
        let mut bad = bytes.clone();
        bad[start + len / 2] ^= 0x5a;
        match decode_state(&bad) {
            Err(Error::Checkpoint { section, .. }) => assert_eq!(&section, name),
            other => panic!("corrupt {name} gave {other:?}"),
        }
    }

    for cut in [0, 3, 11, 40, bytes.len() / 2, bytes.len() - 1] {
        assert!(decode_state(&bytes[..cut]).is_err(), "prefix {cut} accepted");
    }
    let mut longer = bytes.clone();
    longer.push(0);
    assert!(decode_state(&longer).is_err());
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(decode_state(&magic).is_err());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("state.ckpt");
    save_state(&path, &state).unwrap();
    assert_eq!(load_state(&path).unwrap(), state);

    let bb = encode_backbone_file(&frozen);
    assert_eq!(decode_backbone_file(&bb).unwrap(), frozen);
    assert_eq!(decode_backbone_file(&bytes).unwrap(), frozen);
    assert!(decode_state(&bb).is_err());
    let bpath = dir.path().join("backbone.ckpt");
    save_backbone(&bpath, &frozen).unwrap();
    let loaded = load_backbone(&bpath).unwrap();
    loaded.verify().unwrap();
    assert_eq!(loaded.digest(), frozen.digest());
}
