//! The full gradient-check suite: every network primitive and layer plus
//! the embedding loss.

use alloc::vec::Vec;

use crate::nn::gradcheck::{run_case, CheckReport, CASES};
use crate::nn::Result;
use crate::rng::{derive_seed, seeded};

pub const KGE_CASE: &str = "kge_loss";

/// Runs `count` instances of every case; each case has its own seed stream.
pub fn gradient_suite(count: usize, seed: u64) -> Result<Vec<CheckReport>> {
    let mut out = Vec::with_capacity(CASES.len() + 1);
    for (i, (name, make)) in CASES.iter().enumerate() {
        out.push(run_case(name, count, &mut seeded(derive_seed(seed, i as u64)), make)?);
    }
    let mut rng = seeded(derive_seed(seed, CASES.len() as u64));
    out.push(run_case(KGE_CASE, count, &mut rng, &crate::kge::loss_check_case)?);
    Ok(out)
}
