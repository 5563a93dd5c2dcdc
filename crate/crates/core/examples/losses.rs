//! Assign predictions to ground truth and evaluate the region-text losses
//! for a box-annotated sample and an image-text sample.
//!
//! `cargo run --example losses`

use ovw::bbox::BBox;
use ovw::head::{contrastive_similarity, head_forward, HeadParams};
use ovw::loss::{iou_loss, task_aligned_assign, total_loss, AssignConfig, GroundTruth, RegionText, Source};
use ovw::pan::FeaturePyramid;
use ovw::rng;

fn main() -> ovw::Result<()> {
    let mut r = rng::seeded(0);
    let pyramid = FeaturePyramid::random(3, 3, 16, &mut r)?;
    let head = head_forward(&pyramid, &HeadParams::seeded(16, 16, 1)?)?;
    let text = rng::uniform(&mut r, &[4, 16], 1.0);
    let sim = contrastive_similarity(&head.embeddings, &text, 1.0, 0.0)?;

    let annotations = vec![
        RegionText { bbox: BBox::new(8.0, 8.0, 40.0, 48.0), text_index: 1, box_accurate: true },
        RegionText { bbox: BBox::new(50.0, 20.0, 90.0, 70.0), text_index: 3, box_accurate: true },
    ];
    for source in [Source::Detection, Source::ImageText] {
        let gt = GroundTruth::new(source, annotations.clone(), 4)?;
        let assign = task_aligned_assign(&sim, &head.boxes, &head.anchors, &gt, AssignConfig::default())?;
        let l = total_loss(&sim, &head, &gt, &assign)?;
        println!(
            "{source:?}: {} positives, con {:.4} iou {:.4} dfl {:.4} total {:.4}",
            assign.num_positives(),
            l.contrastive,
            l.iou,
            l.dfl,
            l.total
        );
    }
    println!("IoU loss of half-overlapping squares: {}", iou_loss(&BBox::new(0.0, 0.0, 2.0, 2.0), &BBox::new(1.0, 0.0, 3.0, 2.0))?);
    Ok(())
}
