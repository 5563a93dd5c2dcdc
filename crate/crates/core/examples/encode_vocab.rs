//! Build an online training vocabulary and bake an offline one.
//!
//! `cargo run --example encode_vocab`

use ovw::autolabel::extract_nouns;
use ovw::text::{bake_offline_vocabulary, build_online_vocabulary, load_embeddings, toy_encode};

fn main() -> ovw::Result<()> {
    let nouns = extract_nouns("A man walking a dog near a red car by the old bridge")?;
    println!("nouns: {nouns:?}");

    let pool = ["tree", "bicycle", "bench", "kite", "umbrella", "cat"];
    let vocab = build_online_vocabulary(&nouns, &pool, 6, 7)?;
    for e in &vocab.entries {
        println!("  {:<12} {:?}", e.noun, e.origin);
    }

    let emb = toy_encode(&nouns, 32, 0)?;
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("vocab.json");
    bake_offline_vocabulary(&emb, &path)?;
    let back = load_embeddings(&path)?;
    // Rows are renormalized on load, so expect rounding-level differences.
    let drift = back.matrix().sub(emb.matrix())?.max_abs();
    println!("baked {} × {} embeddings, reload drift {drift:.1e}", back.len(), back.dim());
    Ok(())
}
