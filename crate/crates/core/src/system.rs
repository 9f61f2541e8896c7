//! Voxelized 3D systems: geometry, materials, heat sources and boundary
//! conditions on a regular cubic grid.
//!
//! Cells are addressed by a linear index `x + nx * (y + ny * z)`; `z` is the
//! vertical axis and `z = 0` is the bottom layer.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Schema version of the system JSON document.
pub const SYSTEM_FORMAT_VERSION: u32 = 1;

pub const K_RANGE: (f64, f64) = (0.66, 1.1);
pub const RHO_RANGE: (f64, f64) = (1261.5, 2102.5);
pub const CP_RANGE: (f64, f64) = (714.0, 1190.0);
/// Heat source power per voxel (W).
pub const SOURCE_POWER_RANGE: (f64, f64) = (0.0, 6e-4);
pub const T_BC_RANGE: (f64, f64) = (280.0, 400.0);
pub const ALPHA_RANGE: (f64, f64) = (10.0, 20.0);
/// Default cell edge length (m).
pub const DEFAULT_DX: f64 = 2e-4;
/// Default reporting time step (s).
pub const DEFAULT_DT: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaterialProps {
    /// Thermal conductivity, W/(m K).
    pub k: f64,
    /// Density, kg/m^3.
    pub rho: f64,
    /// Specific heat capacity, J/(kg K).
    pub c_p: f64,
}

impl MaterialProps {
    pub fn new(k: f64, rho: f64, c_p: f64) -> Result<Self> {
        let m = Self { k, rho, c_p };
        m.validate()?;
        Ok(m)
    }

    /// Maps three unit-interval draws onto the sampling ranges.
    pub fn from_unit(u: [f64; 3]) -> Self {
        let lerp = |(lo, hi): (f64, f64), t: f64| lo + (hi - lo) * t;
        Self {
            k: lerp(K_RANGE, u[0]),
            rho: lerp(RHO_RANGE, u[1]),
            c_p: lerp(CP_RANGE, u[2]),
        }
    }

    /// Volumetric heat capacity rho * c_p, J/(m^3 K).
    pub fn volumetric_capacity(&self) -> f64 {
        self.rho * self.c_p
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if ok(self.k) && ok(self.rho) && ok(self.c_p) {
            Ok(())
        } else {
            Err(Error::Contract(format!(
                "material properties must be finite and positive, got {self:?}"
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoundaryKind {
    Dirichlet,
    Neumann,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundarySpec {
    pub kind: BoundaryKind,
    /// Boundary temperature, K.
    pub t_bc: f64,
    /// Heat transfer coefficient, W/(m^2 K); only meaningful for Neumann faces.
    pub alpha: f64,
}

impl BoundarySpec {
    pub fn dirichlet(t_bc: f64) -> Self {
        Self {
            kind: BoundaryKind::Dirichlet,
            t_bc,
            alpha: 0.0,
        }
    }

    pub fn neumann(t_bc: f64, alpha: f64) -> Self {
        Self {
            kind: BoundaryKind::Neumann,
            t_bc,
            alpha,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_bc.is_finite() && self.t_bc > 0.0) {
            return Err(Error::Contract(format!("t_bc must be positive, got {}", self.t_bc)));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::Contract(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Axis-aligned face directions, in the fixed order used everywhere a
/// per-face loop appears.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Face {
    XMinus,
    XPlus,
    YMinus,
    YPlus,
    /// Bottom.
    ZMinus,
    /// Top.
    ZPlus,
}

impl Face {
    pub const ALL: [Face; 6] = [
        Face::XMinus,
        Face::XPlus,
        Face::YMinus,
        Face::YPlus,
        Face::ZMinus,
        Face::ZPlus,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn axis(self) -> usize {
        self.index() / 2
    }

    pub fn offset(self) -> [i64; 3] {
        match self {
            Face::XMinus => [-1, 0, 0],
            Face::XPlus => [1, 0, 0],
            Face::YMinus => [0, -1, 0],
            Face::YPlus => [0, 1, 0],
            Face::ZMinus => [0, 0, -1],
            Face::ZPlus => [0, 0, 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    /// Index into the system's material table.
    pub material: u32,
    /// Heat source power P = rho h V, W.
    pub source_power: f64,
    pub occupied: bool,
    /// Optional piecewise-constant source power per reporting step index;
    /// the last entry holds for all later steps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<Vec<f64>>,
}

impl Cell {
    pub fn void() -> Self {
        Self {
            material: 0,
            source_power: 0.0,
            occupied: false,
            schedule: None,
        }
    }

    pub fn solid(material: u32) -> Self {
        Self {
            material,
            source_power: 0.0,
            occupied: true,
            schedule: None,
        }
    }

    /// Source power at reporting step `step`.
    pub fn power_at(&self, step: usize) -> f64 {
        match &self.schedule {
            Some(s) if !s.is_empty() => s[step.min(s.len() - 1)],
            _ => self.source_power,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Voxel,
    Block,
    Electronic,
    Custom,
}

/// A voxelized system on a regular cubic grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoxelSystem {
    pub format_version: u32,
    pub name: String,
    pub family: Family,
    pub dims: [usize; 3],
    pub dx: f64,
    pub materials: Vec<MaterialProps>,
    pub cells: Vec<Cell>,
    /// One spec per bounding-box face, indexed by [`Face::index`].
    pub face_bc: [BoundarySpec; 6],
}

/// A boundary face of one occupied cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExposedFace {
    pub cell: usize,
    pub face: Face,
    pub bc: BoundarySpec,
}

impl VoxelSystem {
    /// Fully occupied single-material box with the given per-face BCs.
    pub fn homogeneous(
        name: &str,
        dims: [usize; 3],
        dx: f64,
        material: MaterialProps,
        face_bc: [BoundarySpec; 6],
    ) -> Self {
        let n = dims[0] * dims[1] * dims[2];
        Self {
            format_version: SYSTEM_FORMAT_VERSION,
            name: name.to_string(),
            family: Family::Custom,
            dims,
            dx,
            materials: vec![material],
            cells: vec![Cell::solid(0); n],
            face_bc,
        }
    }

    /// Standard BC layout: Dirichlet bottom, Neumann elsewhere, shared t_bc.
    pub fn standard_bc(t_bc: f64, alphas: [f64; 5]) -> [BoundarySpec; 6] {
        [
            BoundarySpec::neumann(t_bc, alphas[0]),
            BoundarySpec::neumann(t_bc, alphas[1]),
            BoundarySpec::neumann(t_bc, alphas[2]),
            BoundarySpec::neumann(t_bc, alphas[3]),
            BoundarySpec::dirichlet(t_bc),
            BoundarySpec::neumann(t_bc, alphas[4]),
        ]
    }

    pub fn n_cells(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    /// Cell volume V = dx^3.
    pub fn cell_volume(&self) -> f64 {
        self.dx * self.dx * self.dx
    }

    pub fn linear_index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    /// Neighbor cell across `face`, or `None` outside the bounding box.
    pub fn neighbor(&self, idx: usize, face: Face) -> Option<usize> {
        let c = self.coords(idx);
        let o = face.offset();
        let mut n = [0usize; 3];
        for a in 0..3 {
            let v = c[a] as i64 + o[a];
            if v < 0 || v >= self.dims[a] as i64 {
                return None;
            }
            n[a] = v as usize;
        }
        Some(self.linear_index(n[0], n[1], n[2]))
    }

    pub fn is_occupied(&self, idx: usize) -> bool {
        self.cells[idx].occupied
    }

    /// Linear indices of occupied cells, in ascending order. This order
    /// defines the layout of every per-cell temperature vector.
    pub fn occupied_cells(&self) -> Vec<usize> {
        (0..self.n_cells()).filter(|&i| self.cells[i].occupied).collect()
    }

    pub fn n_occupied(&self) -> usize {
        self.cells.iter().filter(|c| c.occupied).count()
    }

    pub fn material_of(&self, idx: usize) -> &MaterialProps {
        &self.materials[self.cells[idx].material as usize]
    }

    /// BC governing an exposed face. Faces on the bounding box take that
    /// face's spec; faces adjacent to an interior void take the spec of the
    /// same normal direction, except that a Dirichlet spec only applies on
    /// the bounding box itself and interior faces fall back to the top spec.
    pub fn bc_for(&self, idx: usize, face: Face) -> BoundarySpec {
        let spec = self.face_bc[face.index()];
        if self.neighbor(idx, face).is_none() || spec.kind == BoundaryKind::Neumann {
            spec
        } else {
            self.face_bc[Face::ZPlus.index()]
        }
    }

    /// Every exposed face of every occupied cell, in (cell, face-order)
    /// order.
    pub fn exposed_faces(&self) -> Vec<ExposedFace> {
        let mut out = Vec::new();
        for cell in self.occupied_cells() {
            for face in Face::ALL {
                let exposed = match self.neighbor(cell, face) {
                    Some(n) => !self.cells[n].occupied,
                    None => true,
                };
                if exposed {
                    out.push(ExposedFace {
                        cell,
                        face,
                        bc: self.bc_for(cell, face),
                    });
                }
            }
        }
        out
    }

    /// Shared boundary temperature of the bottom face; the natural uniform
    /// initial temperature for generated systems.
    pub fn reference_temperature(&self) -> f64 {
        self.face_bc[Face::ZMinus.index()].t_bc
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != SYSTEM_FORMAT_VERSION {
            return Err(Error::Version(format!(
                "system format version {} (expected {SYSTEM_FORMAT_VERSION})",
                self.format_version
            )));
        }
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::Contract(format!("dims must be >= 1, got {:?}", self.dims)));
        }
        if !(self.dx.is_finite() && self.dx > 0.0) {
            return Err(Error::Contract(format!("dx must be positive, got {}", self.dx)));
        }
        if self.cells.len() != self.n_cells() {
            return Err(Error::Structure(format!(
                "cell table has {} entries for dims {:?}",
                self.cells.len(),
                self.dims
            )));
        }
        for m in &self.materials {
            m.validate()?;
        }
        for bc in &self.face_bc {
            bc.validate()?;
        }
        for (i, c) in self.cells.iter().enumerate() {
            if c.occupied && c.material as usize >= self.materials.len() {
                return Err(Error::Structure(format!(
                    "cell {i} references material {} of {}",
                    c.material,
                    self.materials.len()
                )));
            }
            if !(c.source_power.is_finite() && c.source_power >= 0.0) {
                return Err(Error::Contract(format!(
                    "cell {i} has invalid source power {}",
                    c.source_power
                )));
            }
        }
        Ok(())
    }

    /// Flood fill over face adjacency from the occupied bottom layer.
    /// Returns true when every occupied cell is reached.
    pub fn is_connected_to_bottom(&self) -> bool {
        let mut seen = vec![false; self.n_cells()];
        let mut stack: Vec<usize> = (0..self.dims[0] * self.dims[1])
            .filter(|&i| self.cells[i].occupied)
            .collect();
        for &i in &stack {
            seen[i] = true;
        }
        while let Some(i) = stack.pop() {
            for face in Face::ALL {
                if let Some(n) = self.neighbor(i, face) {
                    if self.cells[n].occupied && !seen[n] {
                        seen[n] = true;
                        stack.push(n);
                    }
                }
            }
        }
        (0..self.n_cells()).all(|i| !self.cells[i].occupied || seen[i])
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let sys: VoxelSystem = serde_json::from_str(s)?;
        sys.validate()?;
        Ok(sys)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s).map_err(|e| match e {
            Error::Json(j) => Error::Format {
                path: path.to_path_buf(),
                message: j.to_string(),
            },
            other => other,
        })
    }
}

/// Per-occupied-cell volume-average temperatures at time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThermalState {
    pub t: f64,
    pub temps: Vec<f64>,
}

impl ThermalState {
    pub fn uniform(system: &VoxelSystem, temp: f64) -> Self {
        Self {
            t: 0.0,
            temps: vec![temp; system.n_occupied()],
        }
    }

    /// Reporting step index for a step size `dt`.
    pub fn step_index(&self, dt: f64) -> usize {
        (self.t / dt).round().max(0.0) as usize
    }

    pub fn check_matches(&self, system: &VoxelSystem) -> Result<()> {
        let n = system.n_occupied();
        if self.temps.len() != n {
            return Err(Error::Structure(format!(
                "state has {} temperatures, system {} has {n} occupied cells",
                self.temps.len(),
                system.name
            )));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if let Some((i, t)) = self
            .temps
            .iter()
            .enumerate()
            .find(|(_, t)| !(t.is_finite() && **t > 0.0))
        {
            return Err(Error::Numerical(format!("cell {i} has temperature {t}")));
        }
        Ok(())
    }

    /// Expands the per-occupied-cell field onto the full grid, filling void
    /// cells with `fill`.
    pub fn to_grid(&self, system: &VoxelSystem, fill: f64) -> Vec<f64> {
        scatter_to_grid(system, &self.temps, fill)
    }
}

pub fn scatter_to_grid(system: &VoxelSystem, values: &[f64], fill: f64) -> Vec<f64> {
    let mut grid = vec![fill; system.n_cells()];
    for (v, idx) in values.iter().zip(system.occupied_cells()) {
        grid[idx] = *v;
    }
    grid
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_bc() -> [BoundarySpec; 6] {
        VoxelSystem::standard_bc(300.0, [15.0; 5])
    }

    #[test]
    fn material_unit_mapping_hits_range_bounds() {
        let lo = MaterialProps::from_unit([0.0; 3]);
        assert_eq!((lo.k, lo.rho, lo.c_p), (0.66, 1261.5, 714.0));
        let hi = MaterialProps::from_unit([1.0; 3]);
        assert_eq!((hi.k, hi.rho, hi.c_p), (1.1, 2102.5, 1190.0));
    }

    #[test]
    fn neighbors_respect_bounding_box() {
        let s = VoxelSystem::homogeneous("b", [3, 2, 2], 1e-3, MaterialProps::from_unit([0.5; 3]), unit_bc());
        let i = s.linear_index(0, 1, 1);
        assert_eq!(s.coords(i), [0, 1, 1]);
        assert_eq!(s.neighbor(i, Face::XMinus), None);
        assert_eq!(s.neighbor(i, Face::XPlus), Some(s.linear_index(1, 1, 1)));
        assert_eq!(s.neighbor(i, Face::YPlus), None);
        assert_eq!(s.neighbor(i, Face::ZMinus), Some(s.linear_index(0, 1, 0)));
    }

    #[test]
    fn single_cell_has_six_exposed_faces() {
        let s = VoxelSystem::homogeneous("one", [1, 1, 1], 1e-3, MaterialProps::from_unit([0.5; 3]), unit_bc());
        let faces = s.exposed_faces();
        assert_eq!(faces.len(), 6);
        let dirichlet: Vec<_> = faces.iter().filter(|f| f.bc.kind == BoundaryKind::Dirichlet).collect();
        assert_eq!(dirichlet.len(), 1);
        assert_eq!(dirichlet[0].face, Face::ZMinus);
    }

    #[test]
    fn interior_void_faces_never_get_dirichlet() {
        let mut s = VoxelSystem::homogeneous("v", [1, 1, 3], 1e-3, MaterialProps::from_unit([0.5; 3]), unit_bc());
        s.cells[1] = Cell::void();
        // Top cell sits above a void: its downward face is interior.
        let f = s.bc_for(2, Face::ZMinus);
        assert_eq!(f.kind, BoundaryKind::Neumann);
        assert!(!s.is_connected_to_bottom());
    }

    #[test]
    fn json_round_trip_preserves_system() {
        let mut s = VoxelSystem::homogeneous("j", [2, 2, 1], 2e-4, MaterialProps::from_unit([0.2; 3]), unit_bc());
        s.cells[3].schedule = Some(vec![1e-4, 0.0]);
        let back = VoxelSystem::from_json(&s.to_json().unwrap()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn schedule_holds_last_value() {
        let mut c = Cell::solid(0);
        c.source_power = 5.0;
        assert_eq!(c.power_at(7), 5.0);
        c.schedule = Some(vec![1.0, 2.0]);
        assert_eq!(c.power_at(0), 1.0);
        assert_eq!(c.power_at(9), 2.0);
    }

    #[test]
    fn validate_rejects_bad_version_and_sizes() {
        let mut s = VoxelSystem::homogeneous("x", [2, 1, 1], 2e-4, MaterialProps::from_unit([0.2; 3]), unit_bc());
        s.format_version = 99;
        assert!(matches!(s.validate(), Err(Error::Version(_))));
        s.format_version = SYSTEM_FORMAT_VERSION;
        s.cells.pop();
        assert!(matches!(s.validate(), Err(Error::Structure(_))));
    }
}
