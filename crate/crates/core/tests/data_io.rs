//! Feature files, manifests and dataset persistence on disk.

use std::fs;

use lightattn::data::{
    generate_synthetic, load_dataset, read_features, read_manifest, save_dataset, write_features, write_manifest,
    ManifestRecord, SyntheticTask,
};
use lightattn::{Error, Tensor};

fn record(id: &str, path: &str, intent: usize, speaker: usize) -> ManifestRecord {
    ManifestRecord { id: id.into(), path: path.into(), intent, speaker }
}

#[test]
fn feature_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.feat");
    let t = Tensor::from_vec(&[3, 2], vec![1.5, -2.25, 1e-12, 3.0, 0.1 + 0.2, -0.0]).unwrap();
    write_features(&path, &t).unwrap();
    assert!(fs::read_to_string(&path).unwrap().starts_with("FEAT 1 3 2\n"));
    assert_eq!(read_features(&path).unwrap(), t);
}

#[test]
fn header_only_manifest_is_empty() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    fs::write(&path, "id,path,intent,speaker\n").unwrap();
    assert!(read_manifest(&path).unwrap().records.is_empty());
    let ds = load_dataset(&path, Some(2), Some(2)).unwrap();
    assert!(ds.is_empty());
}

#[test]
fn manifest_round_trip_keeps_order_and_resolves_relative_paths() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir(dir.path().join("f")).unwrap();
    let t = Tensor::from_vec(&[2, 1], vec![1.0, 2.0]).unwrap();
    let records = vec![record("z", "f/z.feat", 1, 0), record("a", "f/a.feat", 0, 2), record("m, quoted", "f/m.feat", 2, 1)];
    for r in &records {
        write_features(&dir.path().join(&r.path), &t).unwrap();
    }
    let path = dir.path().join("manifest.csv");
    write_manifest(&path, &records).unwrap();
    let m = read_manifest(&path).unwrap();
    assert_eq!(m.records, records);
    assert_eq!(m.resolve(&m.records[0]), dir.path().join("f/z.feat"));
}

#[test]
fn duplicate_ids_are_named() {
    let dir = tempfile::tempdir().unwrap();
    let t = Tensor::from_vec(&[1, 1], vec![0.0]).unwrap();
    write_features(&dir.path().join("x.feat"), &t).unwrap();
    let path = dir.path().join("m.csv");
    write_manifest(&path, &[record("dup", "x.feat", 0, 0), record("dup", "x.feat", 1, 0)]).unwrap();
    match read_manifest(&path) {
        Err(Error::Data(msg)) => assert!(msg.contains("dup"), "{msg}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn missing_file_and_bad_label_are_load_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    write_manifest(&path, &[record("a", "nope.feat", 0, 0)]).unwrap();
    assert!(matches!(read_manifest(&path), Err(Error::Data(_))));

    fs::write(dir.path().join("x.feat"), "FEAT 1 1 1\n0\n").unwrap();
    fs::write(&path, "id,path,intent,speaker\na,x.feat,-1,0\n").unwrap();
    assert!(matches!(read_manifest(&path), Err(Error::Format { .. })));

    fs::write(&path, "id,path,intent,speaker\na,x.feat,5,0\n").unwrap();
    assert!(matches!(load_dataset(&path, Some(3), Some(1)), Err(Error::Data(_))));
}

#[test]
fn dataset_survives_disk() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_synthetic(SyntheticTask::Presence, 12, 3, 2, 4).unwrap();
    let manifest = save_dataset(dir.path(), &ds).unwrap();
    let back = load_dataset(&manifest, Some(3), Some(2)).unwrap();
    assert_eq!(back, ds);
}
