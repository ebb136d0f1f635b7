//! Times the cover solver on growing sparse pairs.

use coverobs::coverage::runtime_scaling;

fn main() -> coverobs::Result<()> {
    let rows = runtime_scaling(11, &[50, 100, 200, 400])?;
    for w in rows.windows(2) {
        println!(
            "N={:>4} {:>9.4}s   N={:>4} {:>9.4}s   ratio {:.2}",
            w[0].n,
            w[0].seconds,
            w[1].n,
            w[1].seconds,
            w[1].seconds / w[0].seconds
        );
    }
    Ok(())
}
