use lesionaug_core::augment::*;
use lesionaug_core::cpggan::{GanConfig, TrainState};
use lesionaug_core::dataio::{
    load_manifest, BoxAnnotation, DatasetManifest, ImageRecord, Provenance, Split,
};
use lesionaug_core::{BBox, Error, GrayImage};
use proptest::prelude::*;

fn annotations() -> Vec<BoxAnnotation> {
    vec![
        BoxAnnotation::new("a", BBox::new(10, 10, 20, 20)),
        BoxAnnotation::new("a", BBox::new(30, 30, 36, 40)),
        BoxAnnotation::new("b", BBox::new(5, 40, 12, 47)),
        BoxAnnotation::new("c", BBox::new(50, 2, 60, 9)),
    ]
}

fn manifest(name: &str, provenance: Provenance, n: usize) -> DatasetManifest {
    let mut m = DatasetManifest::new(name, Split::Train);
    for i in 0..n {
        let id = format!("{name}{i:03}");
        m.records.push(ImageRecord {
            image_id: id.clone(),
            patient_id: format!("{name}-p{}", i % 7),
            slice_index: i as u32,
            pixels: GrayImage::filled(16, 16, 0.1),
            provenance,
        });
        m.annotations.push(BoxAnnotation::new(id, BBox::new(1, 1, 5, 5)));
    }
    m
}

#[test]
fn zero_jitter_copies_training_boxes() {
    let spec = ConditionJitterSpec {
        shift_frac: 0.0,
        scale_frac: 0.0,
        seed: 3,
    };
    let pool: Vec<BBox> = annotations().iter().map(|a| a.bbox()).collect();
    for set in sample_conditions(&annotations(), 200, &spec, 64).unwrap() {
        assert!((1..=2).contains(&set.len()));
        for b in set {
            assert!(pool.contains(&b));
        }
    }
}

#[test]
fn shift_arithmetic() {
    let b = jitter_box(BBox::new(20, 20, 40, 40), 0.1, 0.1, 0.0, 0.0, 100);
    assert_eq!(b, BBox::new(30, 30, 50, 50));
}

#[test]
fn four_thousand_conditions_deterministic() {
    let spec = ConditionJitterSpec::default();
    let a = sample_conditions(&annotations(), 4000, &spec, 64).unwrap();
    assert_eq!(a.len(), 4000);
    assert_eq!(a, sample_conditions(&annotations(), 4000, &spec, 64).unwrap());
}

#[test]
fn empty_pool_and_bad_fractions_rejected() {
    let spec = ConditionJitterSpec::default();
    assert!(matches!(sample_conditions(&[], 3, &spec, 64), Err(Error::EmptyPool(_))));
    let bad = ConditionJitterSpec {
        shift_frac: 0.6,
        ..spec
    };
    assert!(sample_conditions(&annotations(), 3, &bad, 64).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]
    #[test]
    fn sampled_boxes_always_valid(seed in any::<u64>(), shift in 0.0..=0.5f64, scale in 0.0..=0.5f64) {
        let spec = ConditionJitterSpec { shift_frac: shift, scale_frac: scale, seed };
        for set in sample_conditions(&annotations(), 100, &spec, 64).unwrap() {
            for b in set {
                prop_assert!(b.is_valid_in(64, 64), "{b}");
            }
        }
    }
}

#[test]
fn synthesis_writes_manifest_matching_conditions() {
    let cfg = GanConfig {
        latent_dim: 8,
        base_channels: 4,
        min_channels: 4,
        target_resolution: 16,
        ..GanConfig::default()
    };
    let state = TrainState::at_stage(&cfg, cfg.final_stage()).unwrap();
    let conds = vec![vec![BBox::new(2, 2, 6, 6)], vec![], vec![BBox::new(0, 0, 4, 4), BBox::new(8, 8, 12, 12)]];
    let dir = tempfile::tempdir().unwrap();
    let m = synthesize_augmentation(&state, &cfg, &conds, 1, Some(dir.path())).unwrap();
    assert_eq!(m.records.len(), 3);
    assert!(m.records.iter().all(|r| r.provenance == Provenance::Synthetic));
    for (rec, cond) in m.records.iter().zip(&conds) {
        assert_eq!(&m.boxes_for(&rec.image_id), cond);
    }
    let again = synthesize_augmentation(&state, &cfg, &conds, 1, None).unwrap();
    assert_eq!(again, m);
    let loaded = load_manifest(dir.path()).unwrap();
    assert_eq!(loaded.annotations, m.annotations);
    assert_eq!(loaded.records.len(), 3);
}

#[test]
fn exclusion_list_semantics() {
    let synth = manifest("s", Provenance::Synthetic, 100);
    assert_eq!(apply_exclusion_list(&synth, &ExclusionList::default()).unwrap(), synth);
    let list = ExclusionList {
        entries: (0..10)
            .map(|i| ExclusionEntry {
                image_id: format!("s{:03}", i * 3),
                reason: "unclear lesion".into(),
            })
            .chain([ExclusionEntry {
                image_id: "not-there".into(),
                reason: String::new(),
            }])
            .collect(),
    };
    let out = apply_exclusion_list(&synth, &list).unwrap();
    assert_eq!(out.counts().images, 90);
    assert_eq!(out.counts().boxes, 90);
    assert_eq!(apply_exclusion_list(&out, &list).unwrap(), out);

    let real = manifest("r", Provenance::Real, 5);
    let bad = ExclusionList {
        entries: vec![ExclusionEntry {
            image_id: "r002".into(),
            reason: String::new(),
        }],
    };
    assert!(matches!(apply_exclusion_list(&real, &bad), Err(Error::ExcludesRealRecord(_))));
}

#[test]
fn exclusion_list_json_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("ex.json");
    std::fs::write(&p, r#"[{"image_id": "SYN_00001", "reason": "blurry"}]"#).unwrap();
    let l = ExclusionList::load(&p).unwrap();
    assert_eq!(l.entries[0].image_id, "SYN_00001");
    assert_eq!(serde_json::to_string(&l).unwrap(), r#"[{"image_id":"SYN_00001","reason":"blurry"}]"#);
}

#[test]
fn mixing_ratios() {
    let real = manifest("r", Provenance::Real, 100);
    let synth = manifest("s", Provenance::Synthetic, 250);
    let spec = |ratio| MixSpec { ratio, shuffle_seed: 4 };
    let one = mix_real_synthetic(&real, &synth, &spec(MixRatio::OneToOne)).unwrap();
    assert_eq!(one.records.len(), 200);
    assert_eq!(one.records.iter().filter(|r| r.provenance == Provenance::Synthetic).count(), 100);
    let two = mix_real_synthetic(&real, &synth, &spec(MixRatio::OneToTwo)).unwrap();
    assert_eq!(two.records.len(), 300);
    let only = mix_real_synthetic(&real, &synth, &spec(MixRatio::RealOnly)).unwrap();
    let mut ids: Vec<_> = only.records.iter().map(|r| r.image_id.clone()).collect();
    ids.sort();
    let mut want: Vec<_> = real.records.iter().map(|r| r.image_id.clone()).collect();
    want.sort();
    assert_eq!(ids, want);
    assert_eq!(only.annotations.len(), 100);
    let err = mix_real_synthetic(&real, &synth, &spec(MixRatio::AbsoluteCount(300))).unwrap_err();
    assert!(matches!(err, Error::InsufficientPool { requested: 300, available: 250 }));
    assert!(err.to_string().contains("50"));
    assert_eq!(one, mix_real_synthetic(&real, &synth, &spec(MixRatio::OneToOne)).unwrap());
}

#[test]
fn paper_scale_mix_count() {
    let real = manifest("r", Provenance::Real, 2813);
    let synth = manifest("s", Provenance::Synthetic, 4000);
    let out = mix_real_synthetic(
        &real,
        &synth,
        &MixSpec {
            ratio: MixRatio::AbsoluteCount(4000),
            shuffle_seed: 0,
        },
    )
    .unwrap();
    assert_eq!(out.records.len(), 6813);
}

#[test]
fn mix_ratio_json_shapes() {
    let spec: MixSpec = serde_json::from_str(r#"{"ratio": {"absolute_count": 12}, "shuffle_seed": 1}"#).unwrap();
    assert_eq!(spec.ratio, MixRatio::AbsoluteCount(12));
    let spec: MixSpec = serde_json::from_str(r#"{"ratio": "one_to_two"}"#).unwrap();
    assert_eq!(spec.ratio, MixRatio::OneToTwo);
}

#[test]
fn roi_paste_feathering() {
    let base = GrayImage::filled(10, 10, 0.2);
    let patch = GrayImage::filled(4, 4, 1.0);
    let b = BBox::new(3, 3, 7, 7);
    let hard = paste_roi(&base, &patch, b, 0).unwrap();
    let soft = paste_roi(&base, &patch, b, 2).unwrap();
    for y in 0..10 {
        for x in 0..10 {
            let inside = b.contains_pixel(x as i32, y as i32);
            if !inside {
                assert_eq!(hard.get(x, y).to_bits(), base.get(x, y).to_bits());
                assert_eq!(soft.get(x, y).to_bits(), base.get(x, y).to_bits());
            } else {
                assert_eq!(hard.get(x, y), 1.0);
            }
        }
    }
    // outermost ring: weight 1/2
    assert!((soft.get(3, 5) - (0.5 * 1.0 + 0.5 * 0.2)).abs() < 1e-6);
    assert_eq!(soft.get(4, 4), 1.0);
    assert!(paste_roi(&base, &GrayImage::filled(3, 4, 1.0), b, 0).is_err());
}
