// Cross-module checks through the public API only.

use std::collections::{BTreeMap, BTreeSet};

use leafdet_core::boxgeom::{iou, nms, BBox, Detection};
use leafdet_core::data::{parse_voc_xml, split_dataset, write_voc_xml, AnnotatedObject, AnnotationRecord, GroundTruth, SplitRatios};
use leafdet_core::eval::{f2, match_detections, precision, recall};
use leafdet_core::model::{ModelConfig, ModelWeights};
use proptest::prelude::*;

fn bbox() -> impl Strategy<Value = BBox> {
    (0u16..200, 0u16..200, 1u16..100, 1u16..100)
        .prop_map(|(x, y, w, h)| BBox::new(x as f32, y as f32, (x + w) as f32, (y + h) as f32).unwrap())
}

fn detections(max: usize) -> impl Strategy<Value = Vec<Detection>> {
    prop::collection::vec((bbox(), 0usize..3, 0u8..=100), 0..max)
        .prop_map(|v| v.into_iter().map(|(b, c, s)| Detection::new(b, c, s as f32 / 100.0).unwrap()).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn voc_round_trip(objs in prop::collection::vec((bbox(), "[A-Za-z]([A-Za-z &<>]{0,10}[A-Za-z])?"), 0..6)) {
        let record = AnnotationRecord {
            filename: "leaf & stem.ppm".into(),
            width: 300,
            height: 300,
            depth: 3,
            objects: objs.into_iter().map(|(bbox, name)| AnnotatedObject { name, bbox }).collect(),
        };
        record.validate().unwrap();
        let parsed = parse_voc_xml(write_voc_xml(&record).as_bytes()).unwrap();
        prop_assert_eq!(parsed, record);
    }

    #[test]
    fn split_is_a_partition(sizes in prop::collection::vec(0usize..60, 1..5), seed in any::<u64>()) {
        let groups: BTreeMap<String, Vec<usize>> = sizes
            .iter()
            .enumerate()
            .map(|(c, &n)| (format!("c{c}"), (0..n).map(|i| c * 1000 + i).collect()))
            .collect();
        let split = split_dataset(&groups, &SplitRatios::default(), seed).unwrap();
        let mut all: Vec<usize> = split.train.iter().chain(&split.val).chain(&split.test).copied().collect();
        all.sort();
        let mut expected: Vec<usize> = groups.values().flatten().copied().collect();
        expected.sort();
        prop_assert_eq!(all, expected);
        prop_assert_eq!(&split_dataset(&groups, &SplitRatios::default(), seed).unwrap(), &split);
    }

    #[test]
    fn nms_then_match_counts_balance(dets in detections(12), gts in prop::collection::vec((bbox(), 0usize..3), 0..6)) {
        let kept = nms(&dets, 0.5);
        for (i, a) in kept.iter().enumerate() {
            for b in &kept[i + 1..] {
                prop_assert!(a.class_id != b.class_id || iou(&a.bbox, &b.bbox) <= 0.5);
            }
        }
        let gts: Vec<GroundTruth> = gts.into_iter().map(|(bbox, class_id)| GroundTruth { class_id, bbox }).collect();
        let m = match_detections(&kept, &gts, 3, 0.5);
        for c in 0..3 {
            let n_det = kept.iter().filter(|d| d.class_id == c).count() as u64;
            let n_gt = gts.iter().filter(|g| g.class_id == c).count() as u64;
            prop_assert_eq!(m.per_class[c].tp + m.per_class[c].fp, n_det);
            prop_assert_eq!(m.per_class[c].tp + m.per_class[c].fn_, n_gt);
        }
        let used: BTreeSet<usize> = m.pairs.iter().map(|p| p.1).collect();
        prop_assert_eq!(used.len(), m.pairs.len());
    }

    #[test]
    fn f2_sits_between_precision_and_recall(tp in 1u64..1000, fp in 0u64..1000, fn_ in 0u64..1000) {
        let (p, r, f) = (precision(tp, fp), recall(tp, fn_), f2(tp, fp, fn_));
        prop_assert!(f >= p.min(r) - 1e-12 && f <= p.max(r) + 1e-12);
        prop_assert!((f - 5.0 * p * r / (4.0 * p + r)).abs() < 1e-12);
    }
}

#[test]
fn weights_survive_save_and_load() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ircn");
    let w = ModelWeights::init(ModelConfig::full(2).width_divided(16), 5)
        .unwrap()
        .with_class_names(vec!["spot".into(), "mold".into()])
        .unwrap();
    w.save(&path).unwrap();
    let back = ModelWeights::load(&path).unwrap();
    assert_eq!(back, w);
    assert_eq!(back.checksum(), w.checksum());
}

#[test]
fn load_rejects_a_truncated_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ircn");
    ModelWeights::init(ModelConfig::full(1).width_divided(16), 1).unwrap().save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(ModelWeights::load(&path).is_err());
}
