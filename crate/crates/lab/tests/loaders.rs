use qatlab::core::data::{gen_regression, Split, Task, Teacher};
use qatlab::loaders::{load_csv, load_idx, write_csv_dataset, write_idx_images, write_idx_labels, CsvSchema};
use qatlab::LabError;

#[test]
fn hand_built_idx_pair() {
    let dir = tempfile::tempdir().unwrap();
    let (img, lab) = (dir.path().join("img.idx"), dir.path().join("lab.idx"));
    let mut bytes = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 3];
    bytes.extend_from_slice(&[0, 51, 102, 153, 204, 255, 255, 0, 255, 0, 255, 0]);
    std::fs::write(&img, bytes).unwrap();
    std::fs::write(&lab, [0, 0, 8, 1, 0, 0, 0, 2, 1, 0]).unwrap();
    let d = load_idx(&img, &lab, None, 0).unwrap();
    assert_eq!(d.inputs.shape(), &[2, 1, 2, 3]);
    assert_eq!(&d.inputs.data()[..6], &[0.0, 0.2, 0.4, 0.6, 0.8, 1.0]);
    assert_eq!(&d.inputs.data()[6..], &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
    assert_eq!(d.targets.data(), &[1.0, 0.0]);
    assert_eq!(d.task, Task::Classification { classes: 2 });
}

#[test]
fn idx_writers_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (img, lab) = (dir.path().join("i"), dir.path().join("l"));
    let pixels: Vec<u8> = (0..5 * 4 * 4).map(|i| (i * 7 % 256) as u8).collect();
    write_idx_images(&img, 4, 4, &pixels).unwrap();
    write_idx_labels(&lab, &[0, 1, 2, 1, 0]).unwrap();
    let d = load_idx(&img, &lab, Some(3), 0).unwrap();
    let back: Vec<u8> = d.inputs.data().iter().map(|v| (v * 255.0).round() as u8).collect();
    assert_eq!(back, pixels);
}

#[test]
fn idx_errors_carry_offsets() {
    let dir = tempfile::tempdir().unwrap();
    let (img, lab) = (dir.path().join("i"), dir.path().join("l"));
    write_idx_labels(&lab, &[0, 1]).unwrap();
    std::fs::write(&img, [0, 0, 8, 1, 0, 0, 0, 2, 0, 0]).unwrap();
    let err = load_idx(&img, &lab, None, 0).unwrap_err();
    assert!(matches!(&err, LabError::Parse { location, .. } if location == "byte 0"), "{err}");
    write_idx_images(&img, 2, 2, &[1; 8]).unwrap();
    let mut bytes = std::fs::read(&img).unwrap();
    bytes.truncate(bytes.len() - 2);
    std::fs::write(&img, &bytes).unwrap();
    let err = load_idx(&img, &lab, None, 0).unwrap_err();
    assert!(matches!(&err, LabError::Parse { location, .. } if location == "byte 22"), "{err}");
    std::fs::write(&img, [0, 0, 8, 3, 0]).unwrap();
    assert!(matches!(load_idx(&img, &lab, None, 0), Err(LabError::Parse { .. })));
}

#[test]
fn csv_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    let d = gen_regression(3, 50, 4, &Teacher::Mlp { hidden: vec![5], outputs: 2 }, 0.1).unwrap();
    let schema = CsvSchema { targets: vec!["y0".into(), "y1".into()], classes: None };
    write_csv_dataset(&path, &d, &schema).unwrap();
    let back = load_csv(&path, &schema, 3).unwrap();
    assert_eq!(back.inputs, d.inputs);
    assert_eq!(back.targets, d.targets);
    assert_eq!(back.indices(Split::Eval), d.indices(Split::Eval));
}

#[test]
fn csv_errors_carry_lines() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    let schema = CsvSchema { targets: vec!["label".into()], classes: Some(2) };
    std::fs::write(&path, "").unwrap();
    assert!(matches!(load_csv(&path, &schema, 0), Err(LabError::Parse { location, .. }) if location == "line 1"));
    std::fs::write(&path, "a,label\n").unwrap();
    assert!(matches!(load_csv(&path, &schema, 0), Err(LabError::Parse { .. })));
    std::fs::write(&path, "a,label\n0.5,1\nx,0\n").unwrap();
    assert!(matches!(load_csv(&path, &schema, 0), Err(LabError::Parse { location, .. }) if location == "line 3"));
    std::fs::write(&path, "a,label\n0.5,1\n0.1,2\n").unwrap();
    assert!(matches!(load_csv(&path, &schema, 0), Err(LabError::Parse { location, .. }) if location == "line 3"));
    std::fs::write(&path, "a,label\n0.5,1\n0.1\n").unwrap();
    assert!(matches!(load_csv(&path, &schema, 0), Err(LabError::Parse { location, .. }) if location == "line 3"));
    std::fs::write(&path, "a,b\n0.5,1\n").unwrap();
    assert!(matches!(load_csv(&path, &schema, 0), Err(LabError::Parse { .. })));
}
