//! Legacy VTK `STRUCTURED_POINTS` output.
//!
//! Files use the `BINARY` encoding, which the format defines as big-endian;
//! scalars are 64-bit floats stored as `CELL_DATA`, with `NaN` in void cells.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::system::{scatter_to_grid, VoxelSystem};

fn check_name(name: &str) -> Result<()> {
    if name.is_empty() || name.chars().any(|c| c.is_whitespace()) {
        return Err(Error::Contract(format!("invalid VTK field name {name:?}")));
    }
    Ok(())
}

/// Encodes per-occupied-cell fields on the system's grid.
pub fn to_vtk_bytes(system: &VoxelSystem, title: &str, fields: &[(&str, &[f64])]) -> Result<Vec<u8>> {
    let n = system.n_occupied();
    let [nx, ny, nz] = system.dims;
    let mut header = String::new();
    let _ = writeln!(header, "# vtk DataFile Version 3.0");
    let _ = writeln!(header, "{}", title.replace(['\n', '\r'], " "));
    let _ = writeln!(header, "BINARY");
    let _ = writeln!(header, "DATASET STRUCTURED_POINTS");
    let _ = writeln!(header, "DIMENSIONS {} {} {}", nx + 1, ny + 1, nz + 1);
    let _ = writeln!(header, "ORIGIN 0 0 0");
    let _ = writeln!(header, "SPACING {} {} {}", system.dx, system.dx, system.dx);
    let _ = writeln!(header, "CELL_DATA {}", system.n_cells());
    let mut out = header.into_bytes();
    for (name, values) in fields {
        check_name(name)?;
        if values.len() != n {
            return Err(Error::Shape(format!(
                "field {name} has {} values for {n} occupied cells",
                values.len()
            )));
        }
        out.extend_from_slice(format!("SCALARS {name} double 1\nLOOKUP_TABLE default\n").as_bytes());
        for v in scatter_to_grid(system, values, f64::NAN) {
            out.extend_from_slice(&v.to_be_bytes());
        }
        out.push(b'\n');
    }
    Ok(out)
}

pub fn write_vtk(path: &Path, system: &VoxelSystem, title: &str, fields: &[(&str, &[f64])]) -> Result<()> {
    write_atomic(path, &to_vtk_bytes(system, title, fields)?)
}
