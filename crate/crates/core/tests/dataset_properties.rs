use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use rand::Rng;
use tinyvit_core::dataset::{
    augment_training_set, ingest, make_kfolds, stratified_split, AugmentationSpec, DatasetManifest, Origin, SampleRecord,
    Split, SplitRatios,
};
use tinyvit_core::imageproc::{write_image, ImageU8};
use tinyvit_core::seed;

fn manifest_with(counts: &[usize]) -> DatasetManifest {
    let labels: Vec<String> = (0..counts.len()).map(|c| format!("class{c}")).collect();
    let records = counts
        .iter()
        .enumerate()
        .flat_map(|(c, &n)| {
            let name = labels[c].clone();
            (0..n).map(move |i| SampleRecord {
                path: format!("{name}/{i:05}.png"),
                class_id: c,
                class_name: name.clone(),
                split: None,
                fold: None,
                origin: Origin::Original,
            })
        })
        .collect();
    DatasetManifest::new("/data", labels, 0, records)
}

fn per_class(m: &DatasetManifest, split: Split, k: usize) -> Vec<usize> {
    (0..k).map(|c| m.records.iter().filter(|r| r.split == Some(split) && r.class_id == c).count()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn split_partitions_with_ratios_within_one(counts in prop::collection::vec(10usize..200, 2..5), seed_value in any::<u64>()) {
        let m = manifest_with(&counts);
        let ratios = SplitRatios::default();
        let s = stratified_split(&m, ratios, seed_value).unwrap();
        prop_assert_eq!(s.records.len(), m.records.len());
        let paths: BTreeSet<_> = s.records.iter().map(|r| &r.path).collect();
        prop_assert_eq!(paths.len(), m.records.len());
        prop_assert!(s.records.iter().all(|r| r.split.is_some()));
        let k = counts.len();
        for (split, ratio) in [(Split::Train, ratios.train), (Split::Val, ratios.val), (Split::Test, ratios.test)] {
            for (c, got) in per_class(&s, split, k).into_iter().enumerate() {
                let want = ratio * counts[c] as f64;
                prop_assert!((got as f64 - want).abs() <= 1.0 + 1e-9, "class {} {:?}: {} vs {}", c, split, got, want);
            }
        }
        prop_assert_eq!(s.content_hash, stratified_split(&m, ratios, seed_value).unwrap().content_hash);
    }

    #[test]
    fn kfolds_are_disjoint_covering_and_balanced(counts in prop::collection::vec(5usize..80, 2..5), k in 2usize..6, seed_value in any::<u64>()) {
        let m = manifest_with(&counts);
        let folds = make_kfolds(&m, k, seed_value).unwrap();
        prop_assert_eq!(folds.len(), k);
        let mut owner = BTreeMap::new();
        for (f, (train, test)) in folds.iter().enumerate() {
            prop_assert_eq!(train.records.len() + test.records.len(), m.records.len());
            for r in &test.records {
                prop_assert!(owner.insert(r.path.clone(), f).is_none());
            }
            let held: BTreeSet<_> = test.records.iter().map(|r| &r.path).collect();
            prop_assert!(train.records.iter().all(|r| !held.contains(&r.path)));
        }
        prop_assert_eq!(owner.len(), m.records.len());
        for c in 0..counts.len() {
            let sizes: Vec<usize> = folds.iter().map(|(_, t)| t.records.iter().filter(|r| r.class_id == c).count()).collect();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1, "class {} sizes {:?}", c, sizes);
        }
    }
}

#[test]
fn augmentation_provenance_points_at_original_train_records() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = seed::rng(11, &[]);
    for class in ["a", "b"] {
        for i in 0..12 {
            let img = ImageU8::new(10, 10, 3, (0..300).map(|_| rng.random::<u8>()).collect()).unwrap();
            write_image(&dir.path().join(class).join(format!("{i}.png")), &img).unwrap();
        }
    }
    let m = ingest(dir.path()).unwrap().manifest;
    let split = stratified_split(&m, SplitRatios::default(), 3).unwrap();
    let aug = augment_training_set(&split, &AugmentationSpec::default(), 3, "aug").unwrap();
    let originals: BTreeMap<&str, &SampleRecord> =
        aug.records.iter().filter(|r| r.is_original()).map(|r| (r.path.as_str(), r)).collect();
    let mut copies = 0;
    for r in &aug.records {
        if let Origin::Augmented { parent, .. } = &r.origin {
            copies += 1;
            let p = originals.get(parent.as_str()).expect("parent exists");
            assert!(p.is_original());
            assert_eq!(p.split, Some(Split::Train));
            assert_eq!((r.split, r.class_id), (Some(Split::Train), p.class_id));
            assert!(dir.path().join(&r.path).is_file());
        }
    }
    let train = split.records.iter().filter(|r| r.split == Some(Split::Train)).count();
    assert_eq!(copies, 3 * train);
    let again = augment_training_set(&split, &AugmentationSpec::default(), 3, "aug").unwrap();
    assert_eq!(again.content_hash, aug.content_hash);
}
