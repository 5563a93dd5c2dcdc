//! Pseudo-label the bundled caption fixtures, then label the same captions
//! with the toy embedding scorer.
//!
//! `cargo run --example autolabel`

use std::path::Path;

use ovw::autolabel::{run_pipeline, CaptionSample, Detector, FixtureSet, LabelConfig, RawProposal, ToyScorer};
use ovw::bbox::BBox;
use ovw::io::read_json_lines;

/// Proposes one fixed box per noun with a confidence that shrinks down the list.
struct GridDetector;

impl Detector for GridDetector {
    fn propose(&self, _image_id: &str, nouns: &[String]) -> ovw::Result<Vec<RawProposal>> {
        Ok(nouns
            .iter()
            .enumerate()
            .map(|(i, n)| {
                let x = 20.0 * i as f64;
                RawProposal { bbox: BBox([x, 0.0, x + 40.0, 40.0]), text: n.clone(), confidence: 0.9 - 0.1 * i as f64 }
            })
            .collect())
    }
}

fn main() -> ovw::Result<()> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    let data: Vec<CaptionSample> = read_json_lines(dir.join("captions.jsonl"))?;
    let fx = FixtureSet::load(dir.join("label_fixtures.json"))?;

    for relabel in [false, true] {
        let out = run_pipeline(&data, &fx, &fx, &LabelConfig { relabel, ..Default::default() })?;
        println!("relabel={relabel}");
        print!("{}", out.annotations_jsonl()?);
        let r = &out.report;
        println!(
            "  images {} in, {} kept, {} dropped, {} errored; proposals {} in, {} kept\n",
            r.images_in, r.images_kept, r.images_dropped, r.images_errored, r.proposals_in, r.proposals_kept
        );
    }

    let toy = ToyScorer { dim: 32, seed: 0 };
    let out = run_pipeline(&data, &GridDetector, &toy, &LabelConfig::default())?;
    println!("toy scorer kept {} of {} images", out.report.images_kept, out.report.images_in);
    Ok(())
}
