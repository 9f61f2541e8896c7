//! Procedural generators for the three system families: per-voxel random
//! materials, blocks on a base plate, and PCB-like electronic layouts.
//!
//! All generators are pure functions of their seed and parameters.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::system::{
    BoundarySpec, Cell, Face, Family, MaterialProps, VoxelSystem, ALPHA_RANGE, SOURCE_POWER_RANGE,
    SYSTEM_FORMAT_VERSION, T_BC_RANGE,
};

pub fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Independent uniform draw of (k, rho, c_p) within the material ranges.
pub fn sample_materials(rng: &mut impl Rng) -> MaterialProps {
    let u = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
    MaterialProps::from_unit(u)
}

pub fn sample_source_power(rng: &mut impl Rng) -> f64 {
    uniform(rng, SOURCE_POWER_RANGE)
}

/// Dirichlet bottom, Neumann on the other five faces, one shared t_bc.
pub fn sample_boundaries(rng: &mut impl Rng) -> [BoundarySpec; 6] {
    let t_bc = uniform(rng, T_BC_RANGE);
    let mut alphas = [0.0; 5];
    for a in &mut alphas {
        *a = uniform(rng, ALPHA_RANGE);
    }
    VoxelSystem::standard_bc(t_bc, alphas)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VoxelConfig {
    /// Fraction of cells carrying a heat source.
    pub source_fraction: f64,
}

impl Default for VoxelConfig {
    fn default() -> Self {
        Self { source_fraction: 0.05 }
    }
}

pub fn gen_voxel_system(seed: u64, dims: [usize; 3], dx: f64) -> VoxelSystem {
    gen_voxel_system_with(seed, dims, dx, &VoxelConfig::default())
}

/// Fully occupied box where every cell gets its own sampled material.
pub fn gen_voxel_system_with(seed: u64, dims: [usize; 3], dx: f64, cfg: &VoxelConfig) -> VoxelSystem {
    let mut rng = rng_for(seed);
    let n = dims[0] * dims[1] * dims[2];
    let materials: Vec<MaterialProps> = (0..n).map(|_| sample_materials(&mut rng)).collect();
    let mut cells: Vec<Cell> = (0..n as u32).map(Cell::solid).collect();

    let n_sources = ((cfg.source_fraction.clamp(0.0, 1.0) * n as f64).round() as usize).min(n);
    let mut chosen: Vec<usize> = index::sample(&mut rng, n, n_sources).into_vec();
    chosen.sort_unstable();
    for i in chosen {
        cells[i].source_power = sample_source_power(&mut rng);
    }
    let face_bc = sample_boundaries(&mut rng);

    VoxelSystem {
        format_version: SYSTEM_FORMAT_VERSION,
        name: format!("voxel_{seed}"),
        family: Family::Voxel,
        dims,
        dx,
        materials,
        cells,
        face_bc,
    }
}

/// Axis-aligned box of cells with one material and uniform per-voxel
/// source power.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Block {
    pub origin: [usize; 3],
    pub size: [usize; 3],
    pub material: MaterialProps,
    pub source_power: f64,
}

impl Block {
    fn contains(&self, c: [usize; 3]) -> bool {
        (0..3).all(|a| c[a] >= self.origin[a] && c[a] < self.origin[a] + self.size[a])
    }
}

/// Rasterizes blocks onto a grid whose bottom layer is a full base plate.
/// Later blocks overwrite earlier ones, which decomposes overlapping blocks
/// into non-overlapping segments. Cells outside plate and blocks are void.
pub fn rasterize_blocks(
    name: &str,
    dims: [usize; 3],
    dx: f64,
    plate: MaterialProps,
    blocks: &[Block],
    face_bc: [BoundarySpec; 6],
) -> VoxelSystem {
    let mut sys = VoxelSystem {
        format_version: SYSTEM_FORMAT_VERSION,
        name: name.to_string(),
        family: Family::Block,
        dims,
        dx,
        materials: std::iter::once(plate)
            .chain(blocks.iter().map(|b| b.material))
            .collect(),
        cells: vec![Cell::void(); dims[0] * dims[1] * dims[2]],
        face_bc,
    };
    for i in 0..sys.n_cells() {
        let c = sys.coords(i);
        if c[2] == 0 {
            sys.cells[i] = Cell::solid(0);
        }
        if let Some((b_idx, b)) = blocks.iter().enumerate().rev().find(|(_, b)| b.contains(c)) {
            sys.cells[i] = Cell {
                material: b_idx as u32 + 1,
                source_power: b.source_power,
                occupied: true,
                schedule: None,
            };
        }
    }
    sys
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlockConfig {
    /// Largest block extent along x and y as a fraction of the grid.
    pub max_footprint_fraction: f64,
    /// Probability that a block carries a heat source.
    pub source_block_probability: f64,
}

impl Default for BlockConfig {
    fn default() -> Self {
        Self {
            max_footprint_fraction: 0.6,
            source_block_probability: 0.5,
        }
    }
}

pub fn gen_block_system(seed: u64, dims: [usize; 3], dx: f64, n_blocks: usize) -> VoxelSystem {
    gen_block_system_with(seed, dims, dx, n_blocks, &BlockConfig::default())
}

/// Randomly sized blocks resting on a base plate.
pub fn gen_block_system_with(seed: u64, dims: [usize; 3], dx: f64, n_blocks: usize, cfg: &BlockConfig) -> VoxelSystem {
    let mut rng = rng_for(seed);
    let plate = sample_materials(&mut rng);
    let mut blocks = Vec::with_capacity(n_blocks);
    if dims[2] > 1 {
        for _ in 0..n_blocks {
            let mut size = [0usize; 3];
            let mut origin = [0usize; 3];
            for a in 0..2 {
                let max = ((dims[a] as f64 * cfg.max_footprint_fraction).ceil() as usize).clamp(1, dims[a]);
                size[a] = rng.random_range(1..=max);
                origin[a] = rng.random_range(0..=dims[a] - size[a]);
            }
            size[2] = rng.random_range(1..=dims[2] - 1);
            origin[2] = 1;
            let material = sample_materials(&mut rng);
            let source_power = if rng.random::<f64>() < cfg.source_block_probability {
                sample_source_power(&mut rng)
            } else {
                0.0
            };
            blocks.push(Block {
                origin,
                size,
                material,
                source_power,
            });
        }
    }
    let face_bc = sample_boundaries(&mut rng);
    rasterize_blocks(&format!("block_{seed}"), dims, dx, plate, &blocks, face_bc)
}

/// Number of face-connected regions of cells sharing a material index.
pub fn material_segments(sys: &VoxelSystem) -> usize {
    let mut label = vec![false; sys.n_cells()];
    let mut count = 0;
    for start in 0..sys.n_cells() {
        if !sys.cells[start].occupied || label[start] {
            continue;
        }
        count += 1;
        let m = sys.cells[start].material;
        let mut stack = vec![start];
        label[start] = true;
        while let Some(i) = stack.pop() {
            for f in Face::ALL {
                if let Some(n) = sys.neighbor(i, f) {
                    if !label[n] && sys.cells[n].occupied && sys.cells[n].material == m {
                        label[n] = true;
                        stack.push(n);
                    }
                }
            }
        }
    }
    count
}

/// Four times the base edge length on every axis.
pub fn electronic_dims(base: [usize; 3]) -> [usize; 3] {
    [4 * base[0], 4 * base[1], 4 * base[2]]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ComponentKind {
    Ic,
    LargeCapacitor,
    SmallCapacitor,
    CopperPatch,
}

impl ComponentKind {
    fn has_source(self) -> bool {
        !matches!(self, ComponentKind::CopperPatch)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ElectronicConfig {
    pub n_components: usize,
    /// PCB slab thickness in cells; `None` picks `max(1, nz / 10)`.
    pub pcb_layers: Option<usize>,
    pub max_retries: usize,
    /// Extent of the source patch at each chip/capacitor center.
    pub source_patch: [usize; 3],
}

impl Default for ElectronicConfig {
    fn default() -> Self {
        Self {
            n_components: 8,
            pcb_layers: None,
            max_retries: 64,
            source_patch: [2, 2, 1],
        }
    }
}

pub fn gen_electronic_system(seed: u64, dims: [usize; 3], dx: f64) -> Result<VoxelSystem> {
    gen_electronic_system_with(seed, dims, dx, &ElectronicConfig::default())
}

fn range_of(base: f64, lo: f64, hi: f64) -> (usize, usize) {
    let a = ((base * lo).ceil() as usize).max(1);
    let b = ((base * hi).ceil() as usize).max(a);
    (a, b)
}

fn pick(rng: &mut impl Rng, (a, b): (usize, usize)) -> usize {
    rng.random_range(a..=b)
}

fn component_size(kind: ComponentKind, base: f64, r: &mut impl Rng) -> [usize; 3] {
    match kind {
        ComponentKind::Ic => {
            let w = pick(r, range_of(base, 0.5, 1.2));
            let d = pick(r, range_of(base, 0.5, 1.2));
            [w, d, pick(r, range_of(base, 0.1, 0.3))]
        }
        ComponentKind::LargeCapacitor => {
            let w = pick(r, range_of(base, 0.4, 0.6));
            [w, w, pick(r, range_of(base, 0.8, 1.6))]
        }
        ComponentKind::SmallCapacitor => {
            let w = pick(r, range_of(base, 0.1, 0.3));
            [w, w, pick(r, range_of(base, 0.3, 0.6))]
        }
        ComponentKind::CopperPatch => {
            let long = pick(r, range_of(base, 0.5, 1.5));
            let short = pick(r, range_of(base, 0.1, 0.3));
            if r.random::<bool>() {
                [long, short, 1]
            } else {
                [short, long, 1]
            }
        }
    }
}

/// PCB slab with randomly placed, non-overlapping component boxes. Chips and
/// capacitors carry a source patch at their center.
pub fn gen_electronic_system_with(seed: u64, dims: [usize; 3], dx: f64, cfg: &ElectronicConfig) -> Result<VoxelSystem> {
    let mut rng = rng_for(seed);
    let pcb_layers = cfg.pcb_layers.unwrap_or((dims[2] / 10).max(1)).min(dims[2]);
    let base = dims[0].min(dims[1]) as f64 / 4.0;

    let mut sys = VoxelSystem {
        format_version: SYSTEM_FORMAT_VERSION,
        name: format!("electronic_{seed}"),
        family: Family::Electronic,
        dims,
        dx,
        materials: vec![sample_materials(&mut rng)],
        cells: vec![Cell::void(); dims[0] * dims[1] * dims[2]],
        face_bc: [BoundarySpec::dirichlet(300.0); 6],
    };
    for i in 0..sys.n_cells() {
        if sys.coords(i)[2] < pcb_layers {
            sys.cells[i] = Cell::solid(0);
        }
    }

    for c in 0..cfg.n_components {
        let kind = match rng.random_range(0..100) {
            0..30 => ComponentKind::Ic,
            30..50 => ComponentKind::LargeCapacitor,
            50..75 => ComponentKind::SmallCapacitor,
            _ => ComponentKind::CopperPatch,
        };
        let mut placed = None;
        for _ in 0..cfg.max_retries.max(1) {
            let size = component_size(kind, base, &mut rng);
            let fits = size[0] <= dims[0] && size[1] <= dims[1] && pcb_layers + size[2] <= dims[2];
            if !fits {
                continue;
            }
            let origin = [
                rng.random_range(0..=dims[0] - size[0]),
                rng.random_range(0..=dims[1] - size[1]),
                pcb_layers,
            ];
            let free = (origin[2]..origin[2] + size[2]).all(|z| {
                (origin[1]..origin[1] + size[1])
                    .all(|y| (origin[0]..origin[0] + size[0]).all(|x| !sys.cells[sys.linear_index(x, y, z)].occupied))
            });
            if free {
                placed = Some((origin, size));
                break;
            }
        }
        let (origin, size) = placed.ok_or_else(|| {
            Error::Placement(format!(
                "component {c} ({kind:?}) could not be placed in {dims:?} after {} retries",
                cfg.max_retries
            ))
        })?;

        let material = sys.materials.len() as u32;
        sys.materials.push(sample_materials(&mut rng));
        for z in origin[2]..origin[2] + size[2] {
            for y in origin[1]..origin[1] + size[1] {
                for x in origin[0]..origin[0] + size[0] {
                    let i = sys.linear_index(x, y, z);
                    sys.cells[i] = Cell::solid(material);
                }
            }
        }
        if kind.has_source() {
            let power = sample_source_power(&mut rng);
            let mut lo = [0usize; 3];
            let mut hi = [0usize; 3];
            for a in 0..3 {
                let p = cfg.source_patch[a].clamp(1, size[a]);
                lo[a] = origin[a] + (size[a] - p) / 2;
                hi[a] = lo[a] + p;
            }
            for z in lo[2]..hi[2] {
                for y in lo[1]..hi[1] {
                    for x in lo[0]..hi[0] {
                        let i = sys.linear_index(x, y, z);
                        sys.cells[i].source_power = power;
                    }
                }
            }
        }
    }
    sys.face_bc = sample_boundaries(&mut rng);
    Ok(sys)
}

/// Switches every source cell on and off with the given period, producing
/// a piecewise-constant schedule over `n_steps` reporting steps.
pub fn apply_on_off_schedule(sys: &mut VoxelSystem, on_steps: usize, off_steps: usize, n_steps: usize) {
    let period = (on_steps + off_steps).max(1);
    for cell in sys.cells.iter_mut().filter(|c| c.occupied && c.source_power > 0.0) {
        let p = cell.source_power;
        cell.schedule = Some(
            (0..n_steps)
                .map(|s| if s % period < on_steps { p } else { 0.0 })
                .collect(),
        );
    }
}
