use lfm3d::data::*;
use lfm3d::keypoints::{KeypointSet2D, KeypointSet3D, Sample, SkeletonGraph, VisibilityMask};
use lfm3d::procrustes::align;
use lfm3d::Error;
use ndarray::{array, Array2, Axis};

fn spec(noise: f64, occlusion: f64, seed: u64) -> DatasetSpec {
    let mut s = DatasetSpec::new(
        vec![
            CategorySpec {
                model: chain(6).unwrap(),
                count: 12,
            },
            CategorySpec {
                model: star(3, 3).unwrap(),
                count: 5,
            },
            CategorySpec {
                model: humanoid17().unwrap(),
                count: 9,
            },
        ],
        seed,
    );
    s.noise_std = noise;
    s.occlusion_rate = occlusion;
    s
}

#[test]
fn zero_noise_projection_is_consistent() {
    let d = generate(&spec(0.0, 0.0, 1)).unwrap();
    for s in &d.samples {
        let gt = s.s3d_gt.as_ref().unwrap();
        for i in 0..s.len() {
            assert_eq!(s.w2d.row(i)[0], gt.row(i)[0]);
            assert_eq!(s.w2d.row(i)[1], gt.row(i)[1]);
        }
        assert_eq!(s.mask.count_visible(), s.len());
    }
}

#[test]
fn frozen_coefficients_reproduce_the_rotated_mean() {
    let mut model = chain(5).unwrap();
    model.coeff_scale = 0.0;
    let spec = DatasetSpec::new(
        vec![CategorySpec {
            model: model.clone(),
            count: 4,
        }],
        2,
    );
    for s in generate_category(&model, 4, &spec, 11).unwrap() {
        let gt = s.s3d_gt.unwrap();
        let mean = KeypointSet3D::new(model.mean_shape.clone()).unwrap();
        let fit = align(&mean, &gt, &VisibilityMask::all_visible(5)).unwrap();
        assert!(fit.residual < 1e-12);
        assert!((fit.scale - 1.0).abs() < 1e-12);
        assert!((fit.rotation.determinant() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn generation_is_deterministic_and_counts_match() {
    let s = spec(0.01, 0.2, 5);
    let a = generate(&s).unwrap();
    let b = generate(&s).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, generate(&spec(0.01, 0.2, 6)).unwrap());
    let idx = a.category_index();
    assert_eq!(idx["chain6"].len(), 12);
    assert_eq!(idx["star3x3"].len(), 5);
    assert_eq!(idx["humanoid17"].len(), 9);
    assert_eq!(a.categories, vec!["chain6", "star3x3", "humanoid17"]);
    assert_eq!(a.n_max, 17);
}

#[test]
fn occlusion_respects_minimum_visible() {
    let mut s = spec(0.0, 0.9, 7);
    s.min_visible = 4;
    let d = generate(&s).unwrap();
    assert!(d.samples.iter().all(|x| x.mask.count_visible() >= 4));
    assert!(d.samples.iter().any(|x| x.mask.count_visible() < x.len()));

    s.min_visible = 7;
    assert!(matches!(generate(&s), Err(Error::Spec(_))));
    let m = chain(5).unwrap();
    assert!(matches!(generate_category(&m, 1, &s, 0), Err(Error::Spec(_))));
}

#[test]
fn dataset_file_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    let mut d = generate(&spec(0.013, 0.3, 9)).unwrap();
    d.samples[0].s3d_gt = None;
    save_dataset(&d, &path).unwrap();
    let back = load_dataset(&path).unwrap();
    assert_eq!(back, d);
    for (a, b) in back.samples.iter().zip(&d.samples) {
        for (x, y) in a.w2d.coords().iter().zip(b.w2d.coords()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}

#[test]
fn empty_dataset_writes_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.jsonl");
    let d = Dataset::new(vec![]).unwrap();
    save_dataset(&d, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 1);
    assert_eq!(load_dataset(&path).unwrap(), d);
}

#[test]
fn truncated_file_reports_offending_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    save_dataset(&generate(&spec(0.0, 0.0, 1)).unwrap(), &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let cut = text.len() - 40;
    std::fs::write(&path, &text[..cut]).unwrap();
    let lines = text[..cut].lines().count();
    match load_dataset(&path) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, lines),
        other => panic!("expected parse error, got {other:?}"),
    }
    std::fs::write(&path, "").unwrap();
    assert!(matches!(load_dataset(&path), Err(Error::Parse { line: 1, .. })));
}

#[test]
fn inconsistent_record_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.jsonl");
    std::fs::write(
        &path,
        "{\"n_max\":3,\"categories\":[\"x\"]}\n{\"category\":\"x\",\"w2d\":[[0,0],[1,0],[0,1]],\"s3d\":null,\"mask\":[1,1],\"edges\":[]}\n",
    )
    .unwrap();
    match load_dataset(&path) {
        Err(Error::Validation(msg)) => assert!(msg.contains("line 2"), "{msg}"),
        other => panic!("{other:?}"),
    }
}

fn three_joint_dataset() -> Dataset {
    let s = Sample {
        w2d: KeypointSet2D::new(array![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]).unwrap(),
        s3d_gt: Some(KeypointSet3D::new(array![[0.0, 0.0, 0.0], [1.0, 0.0, 2.0], [0.0, 1.0, 3.0]]).unwrap()),
        mask: VisibilityMask::all_visible(3),
        skeleton: SkeletonGraph::from_edges(3, &[(0, 1), (1, 2)]).unwrap(),
        category_id: "tri".into(),
    };
    Dataset::new(vec![s]).unwrap()
}

#[test]
fn rig_subset_examples() {
    let d = generate(&spec(0.0, 0.0, 3)).unwrap();
    let chains = Dataset::new(d.samples.iter().filter(|s| s.len() == 6).cloned().collect()).unwrap();
    let all: Vec<usize> = (0..6).collect();
    let edges = chains.samples[0].skeleton.edges();
    let (same, dropped) = rig_subset(&chains, &all, &edges).unwrap();
    assert_eq!(dropped, 0);
    assert_eq!(same, chains);

    assert!(matches!(rig_subset(&chains, &[], &[]), Err(Error::Spec(_))));
    assert!(matches!(rig_subset(&chains, &[0, 0, 1], &[]), Err(Error::Spec(_))));
    assert!(matches!(rig_subset(&chains, &[0, 9, 1], &[]), Err(Error::Spec(_))));

    // two kept joints cannot reach three visible, so the sample is dropped
    let tri = three_joint_dataset();
    let (sub, dropped) = rig_subset(&tri, &[0, 2], &[(0, 1)]).unwrap();
    assert_eq!((sub.len(), dropped), (0, 1));

    let wide = Dataset::new(vec![{
        let mut s = tri.samples[0].clone();
        s.w2d = KeypointSet2D::new(array![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [2.0, 2.0]]).unwrap();
        s.s3d_gt = Some(KeypointSet3D::new(Array2::from_shape_fn((4, 3), |(i, k)| (i * 3 + k) as f64)).unwrap());
        s.mask = VisibilityMask::all_visible(4);
        s.skeleton = SkeletonGraph::from_edges(4, &[(0, 1), (1, 2), (2, 3)]).unwrap();
        s
    }])
    .unwrap();
    let (sub, _) = rig_subset(&wide, &[0, 2, 3], &[(0, 1), (1, 2)]).unwrap();
    let s = &sub.samples[0];
    assert_eq!(s.w2d.coords(), &array![[0.0, 0.0], [0.0, 1.0], [2.0, 2.0]]);
    assert_eq!(s.s3d_gt.as_ref().unwrap().coords().row(1).to_vec(), vec![6.0, 7.0, 8.0]);
    assert_eq!(s.skeleton.edges(), vec![(0, 1), (1, 2)]);
    assert_eq!(s.category_id, "tri-sub3");
}

#[test]
fn humanoid_rig_transfer_subset() {
    let s = DatasetSpec::new(
        vec![CategorySpec {
            model: humanoid17().unwrap(),
            count: 5,
        }],
        4,
    );
    let d = generate(&s).unwrap();
    let (sub, dropped) = rig_subset(&d, &HUMANOID15_KEEP, &HUMANOID15_EDGES).unwrap();
    assert_eq!(dropped, 0);
    assert_eq!(sub.n_max, 15);
    for (a, b) in sub.samples.iter().zip(&d.samples) {
        assert_eq!(a.w2d.coords(), &b.w2d.coords().select(Axis(0), &HUMANOID15_KEEP));
        assert_eq!(a.category_id, "humanoid17-sub15");
    }
}

#[test]
fn ood_split_examples() {
    let s = spec(0.0, 0.1, 8);
    let (train, test) = make_ood_split(&s, "star3x3").unwrap();
    assert_eq!(train.len() + test.len(), s.total());
    assert!(test.samples.iter().all(|x| x.category_id == "star3x3"));
    assert!(train.samples.iter().all(|x| x.category_id != "star3x3"));
    assert_eq!(test.len(), 5);
    assert!(matches!(make_ood_split(&s, "dragon"), Err(Error::Spec(_))));
}

#[test]
fn spec_file_parsing() {
    let s = DatasetSpec::parse(
        "seed = 4\nnoise_std = 0.5\nocclusion_rate = 0.25\nmin_visible = 4\ncategory = chain8 10\ncategory = humanoid17 3 0.2\n",
    )
    .unwrap();
    assert_eq!(s.seed, 4);
    assert_eq!(s.categories.len(), 2);
    assert_eq!(s.categories[1].model.coeff_scale, 0.2);
    assert_eq!(s.total(), 13);
    assert!(matches!(
        DatasetSpec::parse("category = blob 3"),
        Err(Error::Parse { line: 1, .. })
    ));
    assert!(DatasetSpec::parse("occlusion_rate = 1.0\ncategory = chain8 1").is_err());
    assert!(DatasetSpec::parse("category = chain8 0").is_err());
    assert!(DatasetSpec::parse("colour = red").is_err());
}
