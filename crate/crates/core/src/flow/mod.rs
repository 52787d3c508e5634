//! Variational 3D flow estimation on a strided grid: sparse descriptor and
//! dense volume data terms, quadratic (optionally divergence-constrained)
//! regularization, primal-dual iterations and coarse-to-fine warping.

mod dense;
mod ops;
mod solver;
mod sparse;

pub use dense::{
    dense_ssd_linearize, downsample, gaussian_blur, prox_primal_dense, render_volume, DenseModel,
};
pub use ops::{
    divergence, divergence_adjoint, divergence_adjoint_into, divergence_into, gradient,
    gradient_adjoint, gradient_adjoint_into, gradient_into, prox_dual_regularizer,
    regularizer_energy, sample_grid, DualState, Grad, RegularizerSpec,
};
pub use solver::{
    level_geometry, primal_dual_solve, solve_flow, solve_flow_grid, DataTerm, FlowInput,
    LevelGeometry, PrimalData, SolveReport, SolverConfig, WarpRecord,
};
pub use sparse::{
    linearize_sparse_data, prox_primal_sparse, prox_primal_sparse_quadratic, warp_and_rebuild,
    Linearization, Metric, SparseModel, SparseWorkspace,
};

use crate::error::{Error, Result};
use crate::geometry::{Domain, Vec3};

/// Displacement vectors on grid points `(i, j, k) * stride`, x fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub dims: [usize; 3],
    pub stride: usize,
    pub vectors: Vec<Vec3>,
}

impl FlowField {
    pub fn new(dims: [usize; 3], stride: usize, vectors: Vec<Vec3>) -> Result<Self> {
        if stride == 0 || dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!(
                "bad flow grid {dims:?} stride {stride}"
            )));
        }
        let n: usize = dims.iter().product();
        if vectors.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{} vectors for a {}x{}x{} grid",
                vectors.len(),
                dims[0],
                dims[1],
                dims[2]
            )));
        }
        if vectors.iter().any(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(Error::NonFinite("flow field"));
        }
        Ok(FlowField {
            dims,
            stride,
            vectors,
        })
    }

    pub fn zeros(dims: [usize; 3], stride: usize) -> Self {
        FlowField {
            dims,
            stride,
            vectors: vec![Vec3::zeros(); dims.iter().product()],
        }
    }

    /// Grid covering voxel centers `0..extent` with the given stride.
    pub fn grid_dims(domain: &Domain, stride: usize) -> [usize; 3] {
        domain.extents.map(|n| (n - 1) / stride + 1)
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.dims[1] + j) * self.dims[0] + i
    }

    pub fn coords(&self, n: usize) -> [usize; 3] {
        ops::coords(self.dims, n)
    }

    /// Voxel-space position of grid point `n`.
    pub fn position(&self, n: usize) -> Vec3 {
        let c = self.coords(n);
        Vec3::new(c[0] as f64, c[1] as f64, c[2] as f64) * self.stride as f64
    }

    /// Trilinear interpolation at a voxel-space point, clamped at the grid border.
    pub fn sample(&self, p: &Vec3) -> Vec3 {
        sample_grid(self.dims, &self.vectors, &(p / self.stride as f64))
    }

    /// Resample to every voxel center of `extents`.
    pub fn upsample(&self, extents: [usize; 3]) -> FlowField {
        let mut vectors = Vec::with_capacity(extents.iter().product());
        for k in 0..extents[2] {
            for j in 0..extents[1] {
                for i in 0..extents[0] {
                    vectors.push(self.sample(&Vec3::new(i as f64, j as f64, k as f64)));
                }
            }
        }
        FlowField {
            dims: extents,
            stride: 1,
            vectors,
        }
    }
}
