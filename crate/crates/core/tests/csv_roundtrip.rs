use gs_lvmogp::data::{gen_synthetic, load_csv, save_csv, Split, SyntheticOptions};

#[test]
fn synthetic_dataset_survives_a_csv_round_trip() {
    let (ds, _) = gen_synthetic(4, &SyntheticOptions { d: 6, n: 9, noise_std: Some(0.05), ..Default::default() });
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.csv");
    save_csv(&ds, &path).unwrap();
    let back = load_csv(&path).unwrap();
    assert_eq!(back, ds);
}

#[test]
fn outputs_without_rows_keep_their_index() {
    let mut ds = gs_lvmogp::data::Dataset::new(2, 4);
    ds.push(0, vec![0.1, -0.2], 1.5, Split::Train).unwrap();
    ds.push(3, vec![0.3, 0.4], -2.0, Split::Test).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sparse.csv");
    save_csv(&ds, &path).unwrap();
    let back = load_csv(&path).unwrap();
    assert_eq!(back.outputs[3], ds.outputs[3]);
    assert!(back.outputs[1].is_empty());
}
