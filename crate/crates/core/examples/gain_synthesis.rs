//! Synthesises observer and controller gains across θ and shows how γ and
//! the stiffness grow.

use coverobs::coverage::solve;
use coverobs::gains::{design_controller_microgrid, synthesize, CrossGain, GammaPolicy};
use coverobs::netgraph::NetworkPair;
use coverobs::observer::ObserverSystem;
use coverobs::plant::build_microgrid;

fn main() -> coverobs::Result<()> {
    let pair = NetworkPair::star(9)?;
    let plant = build_microgrid(&pair, 1, 1.0)?;
    let cover = solve(&pair);
    let gains = design_controller_microgrid(&plant, &[-3.0, -4.0], CrossGain::Cancel, f64::INFINITY)?;
    println!("{:>5} {:>12} {:>12} {:>12}", "θ", "γ bound", "γ=100θ²", "ω_max");
    for theta in [2.0, 5.0, 7.0, 15.0] {
        let design = synthesize(&plant, &cover, &pair, theta, &gains, GammaPolicy::Quadratic, None, true)?;
        let system = ObserverSystem::new(&plant, &cover, &pair, &design, &gains)?;
        println!(
            "{theta:>5} {:>12.4e} {:>12.4e} {:>12.4e}",
            design.gamma_lower_bound,
            design.gamma,
            system.stiffness()
        );
    }
    Ok(())
}
