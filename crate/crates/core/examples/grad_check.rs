//! Finite-difference check of every tape op and of a full two-layer model.

use std::collections::BTreeMap;
use std::time::Instant;

use xling::gradcheck::{check_model, op_suite, TOLERANCE};

fn main() -> xling::Result<()> {
    let t0 = Instant::now();
    let mut results = op_suite(8, 11)?;
    for seed in 0..3 {
        results.push(check_model(seed, 6)?);
    }

    let mut by_name: BTreeMap<&str, (usize, usize, f64)> = BTreeMap::new();
    for r in &results {
        let e = by_name.entry(r.name.as_str()).or_default();
        e.0 += 1;
        e.1 += r.checked;
        e.2 = e.2.max(r.max_rel_err);
    }
    println!("{:<24} {:>5} {:>8} {:>12}", "op", "cases", "partials", "max rel err");
    for (name, (cases, partials, err)) in &by_name {
        println!("{name:<24} {cases:>5} {partials:>8} {err:>12.2e}");
    }
    let failed = results.iter().filter(|r| !r.passed()).count();
    println!(
        "\n{} cases, {failed} above {TOLERANCE:e}, {:.2}s",
        results.len(),
        t0.elapsed().as_secs_f64()
    );
    Ok(())
}
