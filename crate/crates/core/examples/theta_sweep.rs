//! Small θ sweep of `I_{x_r} − I_{x_c}` on the 4-node microgrid.

use coverobs::coverage::solve;
use coverobs::gains::{design_controller_microgrid, CrossGain, GammaPolicy};
use coverobs::netgraph::NetworkPair;
use coverobs::plant::build_microgrid;
use coverobs::simloop::{theta_sweep, write_sweep_csv, StepPolicy, SweepConfig};

fn main() -> coverobs::Result<()> {
    let pair = NetworkPair::star(4)?;
    let plant = build_microgrid(&pair, 1, 2.5e8)?;
    let cover = solve(&pair);
    let gains = design_controller_microgrid(&plant, &[-3.0, -4.0], CrossGain::Cancel, f64::INFINITY)?;
    let config = SweepConfig {
        gamma_policy: GammaPolicy::Quadratic,
        observer_poles: Some(vec![-8.0, -9.0]),
        step: StepPolicy::Auto { safety: 2.0, max_step: 1e-3 },
        force: true,
        ..SweepConfig::default()
    };
    let rows = theta_sweep(&plant, &cover, &pair, &gains, &[2.0, 7.0], 1, 0, &config)?;
    write_sweep_csv(&rows, &mut std::io::stdout(), None)?;
    Ok(())
}
