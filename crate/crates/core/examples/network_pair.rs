//! Generates a random physical/communication pair and reports its overlap.

use coverobs::netgraph::{gen_random_pair, similarity, NetworkPair};

fn main() -> coverobs::Result<()> {
    let star = NetworkPair::star(9)?;
    println!("star(9): {} directed physical edges, S_pc = {}", star.phys_edges().len(), similarity(&star)?);

    for target in [0.7, 0.85, 1.0] {
        let pair = gen_random_pair(47, 3.0, target, 7)?;
        println!(
            "n=47 target={target:.2}: phys={} comm={} S_pc={:.3}",
            pair.phys_edges().len(),
            pair.comm_edges().len(),
            similarity(&pair)?
        );
    }
    let pair = gen_random_pair(12, 3.0, 0.85, 1)?;
    println!("path 0 -> 11 on the communication graph: {:?}", pair.shortest_path(0, 11)?);
    Ok(())
}
