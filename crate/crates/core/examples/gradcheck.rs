//! Finite-difference checks of every differentiable op.

fn main() -> vqlab::Result<()> {
    for c in vqlab::gradsuite::gradient_suite(3)? {
        let verdict = if c.passed() { "ok" } else { "FAILED" };
        println!("{:<24} max rel err {:.2e} (tol {:.0e}) {verdict}", c.op, c.max_rel_err, c.tolerance);
    }
    Ok(())
}
