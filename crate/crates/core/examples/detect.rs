//! Prompt-then-detect: encode a vocabulary once, then detect with it.
//!
//! `cargo run --example detect`

use ovw::detect::{detect, random_image, DetectConfig, ModelParams};
use ovw::text::toy_encode;

fn main() -> ovw::Result<()> {
    let vocab = toy_encode(&["person", "dog", "car", "traffic light", "bench"], 32, 0)?;
    let params = ModelParams::default_seeded(0)?;
    let image = random_image(96, 5);
    let cfg = DetectConfig { score_thresh: 0.55, ..Default::default() };

    let dets = detect("demo", &image, &vocab, &params, &cfg)?;
    println!("{} detections above {}", dets.detections.len(), cfg.score_thresh);
    for d in dets.detections.iter().take(8) {
        let [x1, y1, x2, y2] = d.bbox.0;
        println!("  {:<14} {:.3}  [{x1:6.1} {y1:6.1} {x2:6.1} {y2:6.1}]", d.text, d.score);
    }
    Ok(())
}
