use confseg::data::{make_splits, Fraction, SplitSpec};
use confseg::data::{generate_synthetic_dataset, load_segmentation_dataset, write_dataset, DatasetKind, DatasetSpec, SyntheticConfig};

fn spec(root: &std::path::Path, k: usize) -> DatasetSpec {
    DatasetSpec { kind: DatasetKind::Synthetic, root: root.to_path_buf(), num_classes: k, ignore_index: 255 }
}

#[test]
fn written_dataset_loads_back_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_synthetic_dataset(&SyntheticConfig::new(10, (24, 20), 5, 11)).unwrap();
    write_dataset(&ds, dir.path()).unwrap();
    let back = load_segmentation_dataset(&spec(dir.path(), 5)).unwrap();
    assert_eq!(back.ids(), ds.ids());
    for (a, b) in ds.samples.iter().zip(&back.samples) {
        assert_eq!(a.label, b.label, "{}", a.id);
        assert_eq!((a.image.height, a.image.width), (b.image.height, b.image.width));
        // images pass through 8-bit PNG
        let worst = a.image.values.iter().zip(&b.image.values).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max);
        assert!(worst <= 0.5 / 255.0 + 1e-6, "{worst}");
    }
}

#[test]
fn out_of_range_labels_load_as_ignore() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_synthetic_dataset(&SyntheticConfig::new(6, (32, 32), 6, 2)).unwrap();
    write_dataset(&ds, dir.path()).unwrap();
    let back = load_segmentation_dataset(&spec(dir.path(), 3)).unwrap();
    let mut dropped = 0;
    for (a, b) in ds.samples.iter().zip(&back.samples) {
        for (&x, &y) in a.label.as_ref().unwrap().values.iter().zip(&b.label.as_ref().unwrap().values) {
            if x >= 3 {
                assert_eq!(y, 255);
                dropped += 1;
            } else {
                assert_eq!(x, y);
            }
        }
    }
    assert!(dropped > 0, "fixture has no classes >= 3");
}

#[test]
fn splits_are_seeded_and_explicit_lists_win() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_synthetic_dataset(&SyntheticConfig::new(40, (16, 16), 3, 0)).unwrap();
    let ids = ds.ids();
    let frac = |seed| SplitSpec { labeled_fraction: Fraction::new(1, 8).unwrap(), seed, explicit_list: None };
    let (l, u) = make_splits(&ids, &frac(3)).unwrap();
    assert_eq!(l.len(), 5);
    assert_eq!(l.len() + u.len(), 40);
    assert!(l.iter().all(|id| !u.contains(id)));
    assert_eq!(make_splits(&ids, &frac(3)).unwrap(), (l.clone(), u));
    assert_ne!(make_splits(&ids, &frac(4)).unwrap().0, l);

    let list = dir.path().join("labeled.txt");
    std::fs::write(&list, "syn_00007\nsyn_00002\n").unwrap();
    let spec = SplitSpec { explicit_list: Some(list.clone()), ..frac(3) };
    let (l, u) = make_splits(&ids, &spec).unwrap();
    assert_eq!(l, ["syn_00002", "syn_00007"]);
    assert_eq!(u.len(), 38);
    std::fs::write(&list, "nope\n").unwrap();
    assert!(make_splits(&ids, &spec).is_err());
}
