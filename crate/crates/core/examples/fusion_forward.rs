//! Run the vision-language fusion network on a toy image and look at the
//! text update and the pooled tokens.
//!
//! `cargo run --example fusion_forward`

use ovw::detect::random_image;
use ovw::pan::{pool_tokens, repvlpan_forward_with, toy_backbone, FusionParams, LayerId, MaxSigmoidGuide};
use ovw::text::toy_encode;

fn main() -> ovw::Result<()> {
    let dim = 32;
    let pyramid = toy_backbone(&random_image(128, 1), dim, 2)?;
    for (l, t) in (3..=5).zip(pyramid.levels()) {
        println!("C{l}: {:?}", t.shape());
    }

    let vocab = toy_encode(&["person", "bicycle", "dog"], dim, 0)?;
    let params = FusionParams::seeded(dim, 4, 3)?;
    let trace = repvlpan_forward_with(&pyramid, vocab.matrix(), &params, &MaxSigmoidGuide)?;

    println!("pooled tokens: {:?}", pool_tokens(&trace.top_down)?.shape());
    for id in LayerId::ALL {
        let l = trace.layer(id);
        println!("{:<12} in {:?} out {:?}", id.name(), l.guide_input.shape(), l.output.shape());
    }
    let moved = trace.text.sub(vocab.matrix())?.max_abs();
    println!("text update moved embeddings by up to {moved:.4}");
    Ok(())
}
