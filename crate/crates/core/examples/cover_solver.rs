//! Solves covers, validates them and prints the dimension reduction.

use coverobs::coverage::{dimension_stats, pareto_local_audit, solve, validate};
use coverobs::netgraph::{gen_random_pair, NetworkPair};

fn main() -> coverobs::Result<()> {
    let star = NetworkPair::star(9)?;
    let cover = solve(&star);
    let sets: Vec<Vec<usize>> = cover.active_sets().map(|s| s.members.iter().map(|v| v + 1).collect()).collect();
    println!("star(9) cover: {sets:?}");
    let stats = dimension_stats(&cover, 2)?;
    println!(
        "observer dimension max={} min={} mean={:.2} (full {}), mean reduction {:.1}%",
        stats.max,
        stats.min,
        stats.mean,
        stats.full,
        100.0 * stats.mean_reduction
    );

    let pair = gen_random_pair(10, 3.0, 0.85, 3)?;
    let cover = solve(&pair);
    println!("random(10): valid={} total load={}", validate(&cover, &pair).is_valid(), cover.total_load());
    let audit = pareto_local_audit(&cover, &pair)?;
    println!("local Pareto audit: pareto={} moves={}", audit.pareto, audit.moves_checked);
    Ok(())
}
