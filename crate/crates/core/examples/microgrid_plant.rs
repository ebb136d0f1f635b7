//! Builds the droop-controlled microgrid on a star and checks its blocks.

use coverobs::netgraph::NetworkPair;
use coverobs::plant::{build_microgrid, check_structure};

fn main() -> coverobs::Result<()> {
    let pair = NetworkPair::star(9)?;
    let plant = build_microgrid(&pair, 1, 1.0)?;
    let (n, m, p) = plant.orders();
    println!("{} subsystems, n={n} m={m} p={p}", plant.subsystems());
    println!("A_11 = {}", plant.a_diag(0));
    let report = check_structure(&plant);
    println!("all (C_i, A_ii) observable: {}", report.all_observable());
    let (a, _, _) = plant.assemble();
    println!("assembled A is {}x{}", a.nrows(), a.ncols());
    Ok(())
}
