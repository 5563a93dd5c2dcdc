//! Fold an offline vocabulary into 1×1 convolutions and check the folded
//! network against the plain one, with and without an injected fault.
//!
//! `cargo run --example reparam_verify`

use ovw::pan::{FusionParams, LayerId};
use ovw::reparam::{fold_tcsp, simplified_update_params, verify_equivalence, VerifyOptions};
use ovw::text::toy_encode;

fn main() -> ovw::Result<()> {
    let nouns: Vec<String> = (0..80).map(|i| format!("class{i}")).collect();
    let vocab = toy_encode(&nouns, 32, 0)?;
    println!("folded kernel shape: {:?}", fold_tcsp(vocab.matrix())?.weights.shape());

    let mut params = FusionParams::seeded(32, 4, 1)?;
    let opts = VerifyOptions { trials: 20, tol: 1e-6, seed: 0, corrupt: None };
    let report = verify_equivalence(&params, &vocab, opts)?;
    for c in &report.checks {
        println!("  {:<24} max rel {:.2e} asserted {} passed {}", c.name, c.max_rel, c.asserted, c.passed);
    }
    println!("clean run passed: {}", report.passed);

    let broken = verify_equivalence(&params, &vocab, VerifyOptions { corrupt: Some(LayerId::TopDown3), ..opts })?;
    println!("corrupted run passed: {} (failures {:?})", broken.passed, broken.failures());

    params.pool_attn = simplified_update_params(32)?;
    let aligned = verify_equivalence(&params, &vocab, opts)?;
    let gap = aligned.check("text_update_divergence").map(|c| c.max_rel).unwrap_or(f64::NAN);
    println!("single-head identity projections: text update gap {gap:.2e}");
    Ok(())
}
