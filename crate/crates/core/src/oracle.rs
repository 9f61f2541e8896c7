//! Explicit finite-volume reference solver on the voxel grid.
//!
//! Each occupied cell exchanges heat with face neighbors through a
//! harmonic-mean conductance and with boundary faces through either a
//! half-cell conductance (Dirichlet) or a transfer coefficient (Neumann).
//! A reporting step is split into equal sub-steps below the explicit
//! stability limit.

use crate::error::{Error, Result};
use crate::system::{BoundaryKind, BoundarySpec, Face, MaterialProps, ThermalState, VoxelSystem, DEFAULT_DT};
use crate::trajectory::Trajectory;

/// Fraction of the explicit stability limit used for sub-steps.
pub const STABILITY_SAFETY: f64 = 0.5;

/// Conductance between two face-adjacent cubic cells, W/K.
pub fn interface_conductance(a: &MaterialProps, b: &MaterialProps, dx: f64) -> f64 {
    let k_harm = 2.0 * a.k * b.k / (a.k + b.k);
    k_harm * dx
}

/// Conductance of one boundary face, W/K.
pub fn boundary_conductance(bc: &BoundarySpec, mat: &MaterialProps, dx: f64) -> f64 {
    match bc.kind {
        BoundaryKind::Neumann => bc.alpha * dx * dx,
        // Cell center to face: k * A / (dx / 2).
        BoundaryKind::Dirichlet => mat.k * dx * dx / (dx / 2.0),
    }
}

/// Heat flow into a cell through one boundary face, W.
pub fn boundary_flux(cell_temp: f64, bc: &BoundarySpec, mat: &MaterialProps, dx: f64) -> f64 {
    boundary_conductance(bc, mat, dx) * (bc.t_bc - cell_temp)
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum FaceTerm {
    Adiabatic,
    Neighbor { cell: usize, g: f64 },
    Boundary { g: f64, t_bc: f64 },
}

/// Precomputed conductance network of one system.
#[derive(Debug, Clone)]
pub struct Oracle {
    capacity: Vec<f64>,
    terms: Vec<[FaceTerm; 6]>,
    cells: Vec<usize>,
    dt_int: f64,
}

impl Oracle {
    pub fn new(system: &VoxelSystem) -> Self {
        let cells = system.occupied_cells();
        let mut slot = vec![usize::MAX; system.n_cells()];
        for (s, &c) in cells.iter().enumerate() {
            slot[c] = s;
        }
        let v = system.cell_volume();
        let mut capacity = Vec::with_capacity(cells.len());
        let mut terms = Vec::with_capacity(cells.len());
        for &c in &cells {
            let mat = system.material_of(c);
            capacity.push(mat.volumetric_capacity() * v);
            let mut t = [FaceTerm::Adiabatic; 6];
            for face in Face::ALL {
                t[face.index()] = match system.neighbor(c, face) {
                    Some(n) if system.cells[n].occupied => FaceTerm::Neighbor {
                        cell: slot[n],
                        g: interface_conductance(mat, system.material_of(n), system.dx),
                    },
                    _ => {
                        let bc = system.bc_for(c, face);
                        let g = boundary_conductance(&bc, mat, system.dx);
                        if g > 0.0 {
                            FaceTerm::Boundary { g, t_bc: bc.t_bc }
                        } else {
                            FaceTerm::Adiabatic
                        }
                    }
                };
            }
            terms.push(t);
        }

        let mut dt_int = f64::INFINITY;
        for (cap, t) in capacity.iter().zip(&terms) {
            let g_sum: f64 = t
                .iter()
                .map(|f| match f {
                    FaceTerm::Adiabatic => 0.0,
                    FaceTerm::Neighbor { g, .. } | FaceTerm::Boundary { g, .. } => *g,
                })
                .sum();
            if g_sum > 0.0 {
                dt_int = dt_int.min(STABILITY_SAFETY * cap / g_sum);
            }
        }
        let dt_int = if dt_int.is_finite() {
            dt_int.min(DEFAULT_DT)
        } else {
            DEFAULT_DT
        };

        Self {
            capacity,
            terms,
            cells,
            dt_int,
        }
    }

    pub fn stable_substep(&self) -> f64 {
        self.dt_int
    }

    /// Number of equal sub-steps used for a reporting step `dt`.
    pub fn substeps(&self, dt: f64) -> usize {
        ((dt / self.dt_int) * (1.0 - 1e-12)).ceil().max(1.0) as usize
    }

    pub fn capacities(&self) -> &[f64] {
        &self.capacity
    }

    /// Total thermal energy sum(rho c_p V T), J.
    pub fn energy(&self, state: &ThermalState) -> f64 {
        self.capacity.iter().zip(&state.temps).map(|(c, t)| c * t).sum()
    }

    fn substep(&self, temps: &[f64], power: &[f64], dt_sub: f64, out: &mut [f64]) {
        for i in 0..temps.len() {
            let ti = temps[i];
            let mut q = [0.0; 6];
            for (d, term) in self.terms[i].iter().enumerate() {
                q[d] = match *term {
                    FaceTerm::Adiabatic => 0.0,
                    FaceTerm::Neighbor { cell, g } => g * (temps[cell] - ti),
                    FaceTerm::Boundary { g, t_bc } => g * (t_bc - ti),
                };
            }
            // Paired per axis so mirrored configurations sum identically.
            let flow = (q[0] + q[1]) + (q[2] + q[3]) + (q[4] + q[5]);
            out[i] = ti + dt_sub / self.capacity[i] * (flow + power[i]);
        }
    }

    pub fn step(&self, system: &VoxelSystem, state: &ThermalState, dt: f64) -> Result<ThermalState> {
        state.check_matches(system)?;
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::Contract(format!("dt must be positive, got {dt}")));
        }
        let step = state.step_index(dt);
        let power: Vec<f64> = self.cells.iter().map(|&c| system.cells[c].power_at(step)).collect();
        let n = self.substeps(dt);
        let dt_sub = dt / n as f64;
        let mut cur = state.temps.clone();
        let mut next = vec![0.0; cur.len()];
        for _ in 0..n {
            self.substep(&cur, &power, dt_sub, &mut next);
            std::mem::swap(&mut cur, &mut next);
        }
        if let Some(i) = cur.iter().position(|t| !t.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite temperature in cell {} of system {}",
                self.cells[i], system.name
            )));
        }
        Ok(ThermalState {
            t: state.t + dt,
            temps: cur,
        })
    }

    pub fn simulate(&self, system: &VoxelSystem, t0_temp: f64, n_steps: usize, dt: f64) -> Result<Trajectory> {
        let mut states = Vec::with_capacity(n_steps + 1);
        states.push(ThermalState::uniform(system, t0_temp));
        for i in 0..n_steps {
            let mut next = self.step(system, &states[i], dt)?;
            next.t = (i + 1) as f64 * dt;
            states.push(next);
        }
        Ok(Trajectory {
            system_ref: system.name.clone(),
            dt,
            states,
        })
    }
}

/// Explicit-scheme internal step for a system, in (0, 0.01] s.
pub fn stable_substep(system: &VoxelSystem) -> f64 {
    Oracle::new(system).stable_substep()
}

pub fn step_reference(system: &VoxelSystem, state: &ThermalState, dt: f64) -> Result<ThermalState> {
    Oracle::new(system).step(system, state, dt)
}

pub fn simulate_reference(system: &VoxelSystem, t0_temp: f64, n_steps: usize, dt: f64) -> Result<Trajectory> {
    if n_steps == 0 {
        return Err(Error::Contract("n_steps must be >= 1".into()));
    }
    Oracle::new(system).simulate(system, t0_temp, n_steps, dt)
}

/// Steps until the largest per-step change drops below `tol` kelvin.
/// Returns the final state and the number of reporting steps taken.
pub fn run_to_steady_state(
    system: &VoxelSystem,
    initial: &ThermalState,
    dt: f64,
    tol: f64,
    max_steps: usize,
) -> Result<(ThermalState, usize)> {
    let oracle = Oracle::new(system);
    let mut state = initial.clone();
    for n in 1..=max_steps {
        let next = oracle.step(system, &state, dt)?;
        let change = next
            .temps
            .iter()
            .zip(&state.temps)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        state = next;
        if change < tol {
            return Ok((state, n));
        }
    }
    Err(Error::Numerical(format!(
        "no steady state within {max_steps} steps for system {}",
        system.name
    )))
}
