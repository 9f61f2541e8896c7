//! Conversion of a voxel system and its temperature field into the GNS input
//! graph.
//!
//! Interior nodes come first, in occupied-cell order, followed by one
//! auxiliary node per exposed face. Edges are directed `(sender, receiver)`
//! pairs grouped by receiver: every interior node receives exactly one edge
//! per face, from either its neighbor or the face's auxiliary node.
//! Auxiliary nodes never receive edges.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::system::{BoundaryKind, Face, ThermalState, VoxelSystem};

pub const N_ATTR: usize = 5;
/// Slot holding the scaled temperature.
pub const TEMP_SLOT: usize = 3;
/// Slot holding the source power.
pub const SOURCE_SLOT: usize = 4;
/// Version tag of the attribute layout and normalization.
pub const ATTR_NORMALIZATION_VERSION: u32 = 1;

/// `x -> -log10(x) / 10` for positive inputs, zero for vanishing inputs.
pub fn normalize_attr(x: f64) -> Result<f64> {
    if x > 0.0 {
        Ok(-x.log10() / 10.0)
    } else if x == 0.0 {
        Ok(0.0)
    } else {
        Err(Error::Contract(format!("attribute must be >= 0, got {x}")))
    }
}

fn normalize_all(raw: &[f64; N_ATTR]) -> Result<[f64; N_ATTR]> {
    let mut out = [0.0; N_ATTR];
    for (o, &r) in out.iter_mut().zip(raw) {
        *o = normalize_attr(r)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum NodeKind {
    Interior,
    DirichletAux,
    NeumannAux,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CellRef {
    Cell(usize),
    Face { cell: usize, face: Face },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GraphNode {
    pub kind: NodeKind,
    pub raw_attr: [f64; N_ATTR],
    pub norm_attr: [f64; N_ATTR],
    pub cell_ref: CellRef,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThermalGraph {
    pub nodes: Vec<GraphNode>,
    /// `(sender, receiver)` pairs.
    pub edges: Vec<(usize, usize)>,
    pub n_interior: usize,
    /// Current interior temperatures, K.
    pub temps: Vec<f64>,
    /// `dt / (V rho c_p)` per interior node.
    pub c_flux: Vec<f64>,
    /// `dt P / (V rho c_p)` per interior node.
    pub c_src: Vec<f64>,
    pub dt: f64,
}

fn interior_raw(k: f64, rho_cp: f64, dx: f64, temp: f64, power: f64) -> [f64; N_ATTR] {
    [k / rho_cp, 1.0 / rho_cp, dx, temp / 1000.0, power]
}

impl ThermalGraph {
    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn n_aux(&self) -> usize {
        self.nodes.len() - self.n_interior
    }

    pub fn senders(&self) -> Vec<usize> {
        self.edges.iter().map(|e| e.0).collect()
    }

    pub fn receivers(&self) -> Vec<usize> {
        self.edges.iter().map(|e| e.1).collect()
    }

    /// Normalized attributes as a row-major `n_nodes x 5` buffer.
    pub fn attr_matrix(&self) -> Vec<f64> {
        self.nodes.iter().flat_map(|n| n.norm_attr).collect()
    }

    pub fn state(&self, t: f64) -> ThermalState {
        ThermalState {
            t,
            temps: self.temps.clone(),
        }
    }

    /// Replaces the interior temperature attribute in place. Only slot 3 of
    /// interior nodes changes.
    pub fn refresh_temperatures_mut(&mut self, state: &ThermalState) -> Result<()> {
        if state.temps.len() != self.n_interior {
            return Err(Error::Structure(format!(
                "state has {} temperatures, graph has {} interior nodes",
                state.temps.len(),
                self.n_interior
            )));
        }
        for (node, &t) in self.nodes[..self.n_interior].iter_mut().zip(&state.temps) {
            node.raw_attr[TEMP_SLOT] = t / 1000.0;
            node.norm_attr[TEMP_SLOT] = normalize_attr(node.raw_attr[TEMP_SLOT])?;
        }
        self.temps.clone_from(&state.temps);
        Ok(())
    }

    pub fn refresh_temperatures(&self, state: &ThermalState) -> Result<ThermalGraph> {
        let mut g = self.clone();
        g.refresh_temperatures_mut(state)?;
        Ok(g)
    }

    /// Re-reads source powers for reporting step `step` (time-varying
    /// schedules).
    pub fn refresh_sources_mut(&mut self, system: &VoxelSystem, step: usize) -> Result<()> {
        for i in 0..self.n_interior {
            let CellRef::Cell(c) = self.nodes[i].cell_ref else {
                return Err(Error::Structure(format!("interior node {i} has a face reference")));
            };
            let p = system.cells[c].power_at(step);
            self.nodes[i].raw_attr[SOURCE_SLOT] = p;
            self.nodes[i].norm_attr[SOURCE_SLOT] = normalize_attr(p)?;
            self.c_src[i] = self.c_flux[i] * p;
        }
        Ok(())
    }

    /// Structured debug dump of nodes and edges.
    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Dump<'a> {
            nodes: &'a [GraphNode],
            edges: &'a [(usize, usize)],
        }
        Ok(serde_json::to_string_pretty(&Dump {
            nodes: &self.nodes,
            edges: &self.edges,
        })?)
    }
}

/// Builds the input graph for `state`; sources are read at the state's
/// reporting step.
pub fn build_graph(system: &VoxelSystem, state: &ThermalState, dt: f64) -> Result<ThermalGraph> {
    state.check_matches(system)?;
    let cells = system.occupied_cells();
    let mut slot = vec![usize::MAX; system.n_cells()];
    for (s, &c) in cells.iter().enumerate() {
        slot[c] = s;
    }
    let step = state.step_index(dt);
    let v = system.cell_volume();
    let dx = system.dx;

    let mut nodes = Vec::with_capacity(cells.len() * 2);
    let mut c_flux = Vec::with_capacity(cells.len());
    let mut c_src = Vec::with_capacity(cells.len());
    for (s, &c) in cells.iter().enumerate() {
        let m = system.material_of(c);
        let rho_cp = m.volumetric_capacity();
        let p = system.cells[c].power_at(step);
        let raw = interior_raw(m.k, rho_cp, dx, state.temps[s], p);
        nodes.push(GraphNode {
            kind: NodeKind::Interior,
            raw_attr: raw,
            norm_attr: normalize_all(&raw)?,
            cell_ref: CellRef::Cell(c),
        });
        let cf = dt / (v * rho_cp);
        c_flux.push(cf);
        c_src.push(cf * p);
    }

    let mut edges = Vec::with_capacity(cells.len() * 6);
    for (s, &c) in cells.iter().enumerate() {
        for face in Face::ALL {
            match system.neighbor(c, face) {
                Some(n) if system.cells[n].occupied => edges.push((slot[n], s)),
                _ => {
                    let bc = system.bc_for(c, face);
                    let (kind, a0) = match bc.kind {
                        BoundaryKind::Dirichlet => (NodeKind::DirichletAux, 0.0),
                        BoundaryKind::Neumann => (NodeKind::NeumannAux, bc.alpha),
                    };
                    let raw = [a0, 0.0, dx, bc.t_bc / 1000.0, 0.0];
                    edges.push((nodes.len(), s));
                    nodes.push(GraphNode {
                        kind,
                        raw_attr: raw,
                        norm_attr: normalize_all(&raw)?,
                        cell_ref: CellRef::Face { cell: c, face },
                    });
                }
            }
        }
    }

    Ok(ThermalGraph {
        nodes,
        edges,
        n_interior: cells.len(),
        temps: state.temps.clone(),
        c_flux,
        c_src,
        dt,
    })
}
