//! Finite-difference check of every analytic gradient.
//!
//! `cargo run --release --example grad_check`

use ovw::grad::{grad_check, GradOp, DEFAULT_EPS};

fn main() -> ovw::Result<()> {
    for op in GradOp::ALL {
        let mut worst = 0.0f64;
        let mut components = 0;
        for seed in 0..20 {
            let row = grad_check(op, seed, DEFAULT_EPS)?;
            worst = worst.max(row.max_rel_error);
            components = row.components;
        }
        println!("{:<12} {components:>4} params  worst rel err {worst:.2e}", op.name());
    }
    Ok(())
}
