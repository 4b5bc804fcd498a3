//! Cell means of the initial profiles.

use crate::cli::config::{InitProfile, RunConfig};
use crate::cli::RunError;
use crate::mesh::Mesh;
use crate::scheme::State;

/// Cell-averaged initial data. Constants and checkerboards are exact;
/// Gaussians `A exp(−|x − c|²/(2σ²))` use the one-point midpoint rule at `x_K`.
pub fn initial_state(config: &RunConfig, mesh: &Mesh) -> Result<State, RunError> {
    let n = config.model.n;
    let mut species = Vec::with_capacity(n);
    for (i, profile) in config.init.iter().enumerate() {
        let values = match *profile {
            InitProfile::Constant(c) => vec![c; mesh.num_cells()],
            InitProfile::Gaussian { cx, cy, sigma, amplitude } => mesh
                .cells
                .iter()
                .map(|c| {
                    let r2 = (c.center.x - cx).powi(2) + (c.center.y - cy).powi(2);
                    amplitude * (-r2 / (2.0 * sigma * sigma)).exp()
                })
                .collect(),
            InitProfile::Checkerboard { hi, lo } => {
                let g = mesh.grid.ok_or_else(|| {
                    RunError::Setup(format!("init.{}: checkerboard needs a Cartesian mesh", i + 1))
                })?;
                (0..mesh.num_cells())
                    .map(|k| if (k % g.nx + k / g.nx) % 2 == 0 { hi } else { lo })
                    .collect()
            }
        };
        species.push(values);
    }
    Ok(State::from_species(&species))
}
