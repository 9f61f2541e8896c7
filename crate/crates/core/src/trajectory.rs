//! Time-ordered temperature fields and their on-disk formats.
//!
//! Binary layout (all little-endian):
//!
//! | offset | size | field                         |
//! |--------|------|-------------------------------|
//! | 0      | 8    | magic `TGNSTRJ\0`             |
//! | 8      | 4    | format version (u32)          |
//! | 12     | 8    | cell count (u64)              |
//! | 20     | 8    | dt in seconds (f64)           |
//! | 28     | 8    | number of states (u64)        |
//! | 36     | ...  | `n_states * cell_count` f64   |
//!
//! Frame `i` holds the state at `t = i * dt`.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{put_f64s, read_file, write_atomic, Reader};
use crate::system::ThermalState;

pub const TRAJECTORY_MAGIC: [u8; 8] = *b"TGNSTRJ\0";
pub const TRAJECTORY_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub system_ref: String,
    pub dt: f64,
    pub states: Vec<ThermalState>,
}

impl Trajectory {
    pub fn n_cells(&self) -> usize {
        self.states.first().map_or(0, |s| s.temps.len())
    }

    pub fn n_steps(&self) -> usize {
        self.states.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_cells();
        for (i, s) in self.states.iter().enumerate() {
            if s.temps.len() != n {
                return Err(Error::Structure(format!(
                    "state {i} has {} cells, expected {n}",
                    s.temps.len()
                )));
            }
            let expected = i as f64 * self.dt;
            if (s.t - expected).abs() > 1e-9 * expected.max(1.0) {
                return Err(Error::Structure(format!(
                    "state {i} at t = {}, expected {expected}",
                    s.t
                )));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.n_cells();
        let mut out = Vec::with_capacity(36 + 8 * n * self.states.len());
        out.extend_from_slice(&TRAJECTORY_MAGIC);
        out.extend_from_slice(&TRAJECTORY_VERSION.to_le_bytes());
        out.extend_from_slice(&(n as u64).to_le_bytes());
        out.extend_from_slice(&self.dt.to_le_bytes());
        out.extend_from_slice(&(self.states.len() as u64).to_le_bytes());
        for s in &self.states {
            put_f64s(&mut out, &s.temps);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], system_ref: &str, path: &Path) -> Result<Self> {
        let mut r = Reader::new(bytes, path);
        if r.bytes::<8>()? != TRAJECTORY_MAGIC {
            return Err(r.err("not a trajectory file (bad magic)"));
        }
        let version = r.u32()?;
        if version != TRAJECTORY_VERSION {
            return Err(Error::Version(format!(
                "{}: trajectory version {version} (expected {TRAJECTORY_VERSION})",
                path.display()
            )));
        }
        let n = r.u64()? as usize;
        let dt = r.f64()?;
        let n_states = r.u64()? as usize;
        let mut states = Vec::with_capacity(n_states);
        for i in 0..n_states {
            states.push(ThermalState {
                t: i as f64 * dt,
                temps: r.f64_vec(n)?,
            });
        }
        r.finish()?;
        Ok(Self {
            system_ref: system_ref.to_string(),
            dt,
            states,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    /// Loads a trajectory; the system reference is taken from the file stem.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Self::from_bytes(&bytes, &stem, path)
    }

    /// `step,cell_index,temperature` rows, one per cell per frame.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,cell_index,temperature\n");
        for (step, st) in self.states.iter().enumerate() {
            for (i, t) in st.temps.iter().enumerate() {
                let _ = writeln!(s, "{step},{i},{t}");
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn binary_round_trip(n in 1usize..20, frames in 1usize..5, dt in 1e-4f64..1.0, seed in any::<u64>()) {
            let states = (0..frames)
                .map(|i| ThermalState {
                    t: i as f64 * dt,
                    temps: (0..n).map(|c| 280.0 + ((seed.wrapping_mul(31).wrapping_add((i * n + c) as u64)) % 1000) as f64 * 0.1).collect(),
                })
                .collect();
            let tr = Trajectory { system_ref: "s".into(), dt, states };
            let back = Trajectory::from_bytes(&tr.to_bytes(), "s", Path::new("mem")).unwrap();
            prop_assert_eq!(back, tr);
        }
    }

    #[test]
    fn rejects_corrupt_input() {
        let tr = Trajectory {
            system_ref: "s".into(),
            dt: 0.01,
            states: vec![ThermalState {
                t: 0.0,
                temps: vec![300.0; 3],
            }],
        };
        let mut bytes = tr.to_bytes();
        assert!(Trajectory::from_bytes(&bytes[..bytes.len() - 1], "s", Path::new("m")).is_err());
        bytes[0] = b'X';
        assert!(Trajectory::from_bytes(&bytes, "s", Path::new("m")).is_err());
        let mut bytes = tr.to_bytes();
        bytes[8] = 9;
        assert!(matches!(
            Trajectory::from_bytes(&bytes, "s", Path::new("m")),
            Err(Error::Version(_))
        ));
    }

    #[test]
    fn csv_has_one_row_per_cell_per_frame() {
        let tr = Trajectory {
            system_ref: "s".into(),
            dt: 0.01,
            states: vec![
                ThermalState {
                    t: 0.0,
                    temps: vec![300.0; 4]
                };
                3
            ],
        };
        assert_eq!(tr.to_csv().lines().count(), 1 + 12);
    }
}
