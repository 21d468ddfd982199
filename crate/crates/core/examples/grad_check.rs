//! Finite-difference check of every differentiable operator.

use crossnorm::grad_suite;

fn main() -> crossnorm::Result<()> {
    let reports = grad_suite::run(grad_suite::DEFAULT_TOLERANCE)?;
    for r in &reports {
        println!("{r}");
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    println!("{} checks, {failed} failed", reports.len());
    Ok(())
}
