//! Snapshot and checkpoint persistence.
//!
//! Snapshot binary layout (little-endian f64): velocity block then pressure
//! block; within the velocity block elements are major, then component, then
//! node (node fastest): index = (e * 2 + c) * nv + node. Pressure:
//! index = e * np + node. A JSON sidecar carries mesh, time and format
//! metadata. Dataset shards reuse the same velocity block layout without the
//! pressure block.

use crate::field::FlowField;
use crate::mesh::{MeshSpec, SpectralMesh};
use crate::{SolverError, SolverResult};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

pub const SNAPSHOT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SnapshotHeader {
    pub format_version: u32,
    pub mesh: MeshSpec,
    pub time: f64,
    pub has_pressure: bool,
}

pub fn write_f64_slice(w: &mut impl Write, data: &[f64]) -> SolverResult<()> {
    let mut buf = Vec::with_capacity(data.len() * 8);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_f64_vec(r: &mut impl Read, n: usize) -> SolverResult<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Velocity block in the documented order: (e, c, node), node fastest.
pub fn velocity_bytes(vel: &Array3<f64>) -> Vec<f64> {
    let (e, nv, d) = vel.dim();
    let mut out = Vec::with_capacity(e * nv * d);
    for el in 0..e {
        for c in 0..d {
            for n in 0..nv {
                out.push(vel[[el, n, c]]);
            }
        }
    }
    out
}

pub fn velocity_from_flat(flat: &[f64], e: usize, nv: usize, d: usize) -> Array3<f64> {
    let mut vel = Array3::zeros((e, nv, d));
    let mut idx = 0;
    for el in 0..e {
        for c in 0..d {
            for n in 0..nv {
                vel[[el, n, c]] = flat[idx];
                idx += 1;
            }
        }
    }
    vel
}

/// Write one snapshot as `<path>.bin` plus `<path>.json`.
pub fn write_snapshot(path: &Path, field: &FlowField) -> SolverResult<()> {
    let header = SnapshotHeader {
        format_version: SNAPSHOT_FORMAT_VERSION,
        mesh: MeshSpec {
            elements_x: field.mesh.elements_x,
            elements_y: field.mesh.elements_y,
            order: field.mesh.order_vel,
        },
        time: field.time,
        has_pressure: true,
    };
    let mut bin = std::fs::File::create(path.with_extension("bin"))?;
    write_f64_slice(&mut bin, &velocity_bytes(&field.velocity))?;
    let pres: Vec<f64> = field.pressure.iter().cloned().collect();
    write_f64_slice(&mut bin, &pres)?;
    std::fs::write(
        path.with_extension("json"),
        serde_json::to_string_pretty(&header)?,
    )?;
    Ok(())
}

pub fn read_snapshot(path: &Path) -> SolverResult<FlowField> {
    let header: SnapshotHeader =
        serde_json::from_str(&std::fs::read_to_string(path.with_extension("json"))?)?;
    if header.format_version != SNAPSHOT_FORMAT_VERSION {
        return Err(SolverError::Integrity(format!(
            "snapshot format {} unsupported",
            header.format_version
        )));
    }
    let mesh = header.mesh.build()?;
    let e = mesh.n_elements();
    let nv = mesh.n_vel_nodes();
    let np = mesh.n_pres_nodes();
    let mut f = std::fs::File::open(path.with_extension("bin"))?;
    let vel = read_f64_vec(&mut f, e * nv * 2)?;
    let velocity = velocity_from_flat(&vel, e, nv, 2);
    let pressure = if header.has_pressure {
        let p = read_f64_vec(&mut f, e * np)?;
        Array2::from_shape_vec((e, np), p).unwrap()
    } else {
        Array2::zeros((e, np))
    };
    Ok(FlowField {
        mesh,
        velocity,
        pressure,
        time: header.time,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StateCheckpointMeta {
    pub format_version: u32,
    pub mesh: MeshSpec,
    pub times: Vec<f64>,
}

/// Save a full integration state (up to three history fields) so a run can
/// resume bit-identically.
pub fn write_state(dir: &Path, history: &[FlowField]) -> SolverResult<()> {
    std::fs::create_dir_all(dir)?;
    let mesh = &history[0].mesh;
    let meta = StateCheckpointMeta {
        format_version: SNAPSHOT_FORMAT_VERSION,
        mesh: MeshSpec {
            elements_x: mesh.elements_x,
            elements_y: mesh.elements_y,
            order: mesh.order_vel,
        },
        times: history.iter().map(|f| f.time).collect(),
    };
    std::fs::write(dir.join("state.json"), serde_json::to_string_pretty(&meta)?)?;
    for (i, f) in history.iter().enumerate() {
        write_snapshot(&dir.join(format!("field_{i}")), f)?;
    }
    Ok(())
}

pub fn read_state(dir: &Path) -> SolverResult<Vec<FlowField>> {
    let meta: StateCheckpointMeta =
        serde_json::from_str(&std::fs::read_to_string(dir.join("state.json"))?)?;
    let mut out = Vec::new();
    for i in 0..meta.times.len() {
        out.push(read_snapshot(&dir.join(format!("field_{i}")))?);
    }
    Ok(out)
}

pub fn sha256_hex(data: &[u8]) -> String {
    let digest = Sha256::digest(data);
    let mut s = String::with_capacity(64);
    for b in digest {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

pub fn sha256_file(path: &Path) -> SolverResult<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

/// Shared helper: coarse snapshots have velocity only.
pub fn coarse_field_from_velocity(
    mesh: &Arc<SpectralMesh>,
    velocity: Array3<f64>,
    time: f64,
) -> FlowField {
    FlowField {
        mesh: Arc::clone(mesh),
        velocity,
        pressure: Array2::zeros((mesh.n_elements(), mesh.n_pres_nodes())),
        time,
    }
}
