//! Flow state on a spectral-element mesh: element-local velocity and
//! pressure nodal values plus the simulation time.

use crate::mesh::SpectralMesh;
use crate::{SolverError, SolverResult};
use ndarray::{Array2, Array3};
use std::sync::Arc;

#[derive(Debug, Clone)]
pub struct FlowField {
    pub mesh: Arc<SpectralMesh>,
    /// (E, (P+1)^2, 2) velocity nodal values.
    pub velocity: Array3<f64>,
    /// (E, (P-1)^2) pressure nodal values.
    pub pressure: Array2<f64>,
    pub time: f64,
}

impl FlowField {
    pub fn zeros(mesh: &Arc<SpectralMesh>) -> FlowField {
        FlowField {
            mesh: Arc::clone(mesh),
            velocity: Array3::zeros((mesh.n_elements(), mesh.n_vel_nodes(), 2)),
            pressure: Array2::zeros((mesh.n_elements(), mesh.n_pres_nodes())),
            time: 0.0,
        }
    }

    /// Build from a pointwise velocity function (u, v) = f(x, y).
    pub fn from_fn(mesh: &Arc<SpectralMesh>, f: impl Fn(f64, f64) -> (f64, f64)) -> FlowField {
        let coords = mesh.vel_node_coords();
        let mut field = FlowField::zeros(mesh);
        for el in 0..mesh.n_elements() {
            for n in 0..mesh.n_vel_nodes() {
                let (u, v) = f(coords[[el, n, 0]], coords[[el, n, 1]]);
                field.velocity[[el, n, 0]] = u;
                field.velocity[[el, n, 1]] = v;
            }
        }
        field
    }

    pub fn check_same_mesh(&self, other: &FlowField) -> SolverResult<()> {
        if !Arc::ptr_eq(&self.mesh, &other.mesh)
            && (self.mesh.elements_x != other.mesh.elements_x
                || self.mesh.elements_y != other.mesh.elements_y
                || self.mesh.order_vel != other.mesh.order_vel)
        {
            return Err(SolverError::GridMismatch(
                "fields live on different meshes".into(),
            ));
        }
        Ok(())
    }

    pub fn max_speed(&self) -> f64 {
        let mut m: f64 = 0.0;
        for el in 0..self.velocity.dim().0 {
            for n in 0..self.velocity.dim().1 {
                let u = self.velocity[[el, n, 0]];
                let v = self.velocity[[el, n, 1]];
                m = m.max((u * u + v * v).sqrt());
            }
        }
        m
    }

    pub fn is_finite(&self) -> bool {
        self.velocity.iter().all(|x| x.is_finite()) && self.pressure.iter().all(|x| x.is_finite())
    }
}
