//! End-to-end checks of the labeling pipeline against a hand trace of the
//! fixture set.

use std::path::{Path, PathBuf};

use ovw::autolabel::{label_sample, run_pipeline, CaptionSample, FixtureSet, LabelConfig, LabelReport};
use ovw::bbox::BBox;
use ovw::io::read_json_lines;
use ovw::loss::{AnnotationEntry, AnnotationsFile, Source};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn load() -> (Vec<CaptionSample>, FixtureSet) {
    let f = fixtures();
    (read_json_lines(f.join("captions.jsonl")).unwrap(), FixtureSet::load(f.join("label_fixtures.json")).unwrap())
}

fn ann(image_id: &str, items: &[([f64; 4], &str)]) -> AnnotationsFile {
    AnnotationsFile {
        image_id: image_id.into(),
        source: Source::ImageText,
        annotations: items
            .iter()
            .map(|(b, t)| AnnotationEntry { bbox: BBox(*b), text: (*t).into(), box_accurate: false })
            .collect(),
    }
}

#[test]
fn hand_traced_run() {
    let (data, fx) = load();
    let out = run_pipeline(&data, &fx, &fx, &LabelConfig::default()).unwrap();
    // img1: duplicate dog box removed by NMS, park has c̃ = 0.21; s = sqrt(0.64·0.81) = 0.72.
    // img2: sofa has c̃ = sqrt(0.5·0.18) = 0.3 and is dropped; cats c̃ = 0.31 stays.
    // img3: no detector fixture.
    // img4: both kept; s = sqrt(0.5·0.45) ≈ 0.474.
    // img5: bird kept at c̃ ≈ 0.40 but s = sqrt(0.5·0.18) = 0.3 drops the image.
    let want = vec![
        ann("img1", &[([10.0, 10.0, 50.0, 50.0], "dog running")]),
        ann("img2", &[([5.0, 5.0, 30.0, 25.0], "cats")]),
        ann("img4", &[([20.0, 0.0, 40.0, 30.0], "person riding"), ([50.0, 30.0, 90.0, 90.0], "horse")]),
    ];
    assert_eq!(out.annotations, want);
    let r = &out.report;
    assert_eq!(
        (r.images_in, r.images_kept, r.images_dropped, r.images_errored),
        (5, 3, 1, 1)
    );
    assert_eq!(
        (r.proposals_in, r.proposals_dropped_nms, r.proposals_dropped_conf, r.proposals_dropped_image, r.proposals_kept),
        (8, 1, 2, 1, 4)
    );
    assert!(r.reconciles());
    assert_eq!(r.errors[0].image_id, "img3");
}

#[test]
fn per_sample_scores() {
    let (data, fx) = load();
    let cfg = LabelConfig::default();
    let t1 = label_sample(&data[0], &fx, &fx, &cfg).unwrap();
    assert_eq!(t1.nouns, ["dog running", "park"]);
    let c: Vec<f64> = t1.proposals.iter().map(|p| p.rescored.unwrap()).collect();
    assert_eq!(c[0], 0.81);
    assert!((c[1] - 0.72).abs() < 1e-15);
    assert!((c[2] - 0.21).abs() < 1e-15);
    assert_eq!(t1.image.s_region, 0.81);
    assert!((t1.image.s - 0.72).abs() < 1e-15 && t1.image.keep);

    let t5 = label_sample(&data[4], &fx, &fx, &cfg).unwrap();
    assert_eq!(t5.region.kept, [0]);
    assert_eq!(t5.image.s, 0.3);
    assert!(!t5.image.keep);
}

#[test]
fn relabel_changes_text_not_boxes() {
    let (data, fx) = load();
    let img4 = &data[3..4];
    let off = run_pipeline(img4, &fx, &fx, &LabelConfig::default()).unwrap();
    let on = run_pipeline(img4, &fx, &fx, &LabelConfig { relabel: true, ..Default::default() }).unwrap();
    let boxes = |o: &ovw::autolabel::LabelOutput| o.annotations[0].annotations.iter().map(|a| a.bbox).collect::<Vec<_>>();
    assert_eq!(boxes(&off), boxes(&on));
    assert_eq!(off.annotations[0].annotations[0].text, "person riding");
    assert_eq!(on.annotations[0].annotations[0].text, "horse");
    assert_eq!(on.report.relabeled, 1);
}

#[test]
fn box_accurate_override_and_determinism() {
    let (data, fx) = load();
    let cfg = LabelConfig { box_accurate: true, ..Default::default() };
    let a = run_pipeline(&data, &fx, &fx, &cfg).unwrap();
    assert!(a.annotations.iter().flat_map(|f| &f.annotations).all(|x| x.box_accurate));
    let b = run_pipeline(&data, &fx, &fx, &cfg).unwrap();
    assert_eq!(a.annotations_jsonl().unwrap(), b.annotations_jsonl().unwrap());
    assert_eq!(a.report_json().unwrap(), b.report_json().unwrap());
}

#[test]
fn malformed_proposal_only_fails_its_sample() {
    let (data, mut fx) = load();
    fx.detector.get_mut("img2").unwrap()[0].bbox = BBox([30.0, 5.0, 5.0, 25.0]);
    let out = run_pipeline(&data, &fx, &fx, &LabelConfig::default()).unwrap();
    let r: &LabelReport = &out.report;
    assert_eq!(r.images_errored, 2);
    assert!(r.errors.iter().any(|e| e.image_id == "img2" && e.message.contains("proposal 0")));
    assert_eq!(out.annotations.len(), 2);
    assert!(r.reconciles());
}

#[test]
fn annotations_feed_the_training_loss() {
    let (data, fx) = load();
    let out = run_pipeline(&data, &fx, &fx, &LabelConfig::default()).unwrap();
    let vocab = ["dog running", "cats", "person riding", "horse"];
    for file in &out.annotations {
        let gt = ovw::loss::GroundTruth::from_file(file, &vocab).unwrap();
        assert_eq!(gt.source.regression_weight(), 0.0);
    }
}
