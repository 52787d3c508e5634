//! Primal-dual iterations and the coarse-to-fine driver.

use crate::descriptor::{DescriptorLayout, ParticleIndex};
use crate::error::{Error, Result};
use crate::geometry::{Domain, IntensityVolume, ParticleSet, Vec3};

use super::dense::{dense_models, downsample, prox_primal_dense, DenseModel};
use super::ops::{
    divergence_adjoint_into, divergence_into, gradient_adjoint_into, gradient_into,
    prox_dual_regularizer, regularizer_energy, sample_grid, DualState, Grad, RegularizerSpec,
};
use super::sparse::{
    linearize_sparse_data, prox_primal_sparse, prox_primal_sparse_quadratic, warp_particles,
    Linearization, Metric, SparseModel, SparseWorkspace,
};
use super::FlowField;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DataTerm {
    SparseSsd,
    SparseNcc,
    /// Windowed SSD on intensity volumes; `window` voxels per side (odd).
    DenseSsd {
        window: usize,
    },
}

impl DataTerm {
    pub fn is_sparse(&self) -> bool {
        !matches!(self, DataTerm::DenseSsd { .. })
    }

    pub fn name(&self) -> &'static str {
        match self {
            DataTerm::SparseSsd => "sparse_ssd",
            DataTerm::SparseNcc => "sparse_ncc",
            DataTerm::DenseSsd { .. } => "dense_ssd",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub lambda: f64,
    pub pyramid_levels: usize,
    pub pyramid_factor: f64,
    pub warps_per_level: usize,
    pub inner_iterations: usize,
    pub data_term: DataTerm,
    /// Probe distance for the numerical slope, in level voxels.
    pub fd_probe_h: f64,
    /// Voxels between grid points at the finest level.
    pub stride: usize,
    pub sparse_model: SparseModel,
}

pub const DEFAULT_LAMBDA_SSD: f64 = 3.0e6;
pub const DEFAULT_LAMBDA_NCC: f64 = 30.0;
pub const DEFAULT_LAMBDA_DENSE: f64 = 3.0e3;

impl SolverConfig {
    pub fn new(data_term: DataTerm) -> Self {
        let lambda = match data_term {
            DataTerm::SparseSsd => DEFAULT_LAMBDA_SSD,
            DataTerm::SparseNcc => DEFAULT_LAMBDA_NCC,
            DataTerm::DenseSsd { .. } => DEFAULT_LAMBDA_DENSE,
        };
        SolverConfig {
            lambda,
            pyramid_levels: 9,
            pyramid_factor: 0.95,
            warps_per_level: 10,
            inner_iterations: 100,
            data_term,
            fd_probe_h: 0.5,
            stride: 4,
            sparse_model: SparseModel::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be finite and >= 0");
        }
        if !(self.pyramid_factor > 0.0 && self.pyramid_factor < 1.0) {
            return bad("pyramid_factor must lie in (0, 1)");
        }
        if self.pyramid_levels == 0
            || self.warps_per_level == 0
            || self.inner_iterations == 0
            || self.stride == 0
        {
            return bad("levels, warps, inner iterations and stride must be >= 1");
        }
        if !(self.fd_probe_h > 0.0) {
            return bad("fd_probe_h must be > 0");
        }
        if let DataTerm::DenseSsd { window } = self.data_term {
            if window == 0 || window % 2 == 0 {
                return bad("dense window must be odd");
            }
        }
        Ok(())
    }
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self::new(DataTerm::SparseSsd)
    }
}

#[derive(Debug, Clone, Copy)]
pub enum FlowInput<'a> {
    Particles {
        t0: &'a ParticleSet,
        t1: &'a ParticleSet,
    },
    Volumes {
        u0: &'a IntensityVolume,
        u1: &'a IntensityVolume,
    },
}

/// Data term of one warp, expressed in level units.
#[derive(Debug, Clone)]
pub enum PrimalData {
    Zero,
    Sparse {
        lin: Vec<Linearization>,
        v0: Vec<Vec3>,
        model: SparseModel,
    },
    Dense(Vec<DenseModel>),
}

impl PrimalData {
    fn prox(&self, n: usize, v_hat: &Vec3, tau: f64, lambda: f64) -> Vec3 {
        match self {
            PrimalData::Zero => *v_hat,
            PrimalData::Sparse { lin, v0, model } => match model {
                SparseModel::Linear => prox_primal_sparse(v_hat, tau, lambda, &lin[n]),
                SparseModel::Quadratic => {
                    prox_primal_sparse_quadratic(v_hat, &v0[n], tau, lambda, &lin[n])
                }
            },
            PrimalData::Dense(m) => prox_primal_dense(v_hat, tau, lambda, &m[n]),
        }
    }

    pub fn energy(&self, v: &[Vec3]) -> f64 {
        match self {
            PrimalData::Zero => 0.0,
            PrimalData::Sparse { lin, v0, model } => lin
                .iter()
                .zip(v)
                .zip(v0)
                .map(|((l, v), v0)| l.eval_model(v, v0, *model))
                .sum(),
            PrimalData::Dense(m) => m.iter().zip(v).map(|(m, v)| m.eval(v)).sum(),
        }
    }
}

/// Primal energy (linearized data plus regularizer) before and after one warp.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WarpRecord {
    pub level: usize,
    pub warp: usize,
    pub energy_first: f64,
    pub energy_last: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SolveReport {
    pub warps: Vec<WarpRecord>,
}

struct Buffers {
    adj: Vec<Vec3>,
    v_new: Vec<Vec3>,
    v_bar: Vec<Vec3>,
    grad: Vec<Grad>,
    div: Vec<f64>,
}

impl Buffers {
    fn new(n: usize) -> Self {
        Buffers {
            adj: vec![Vec3::zeros(); n],
            v_new: vec![Vec3::zeros(); n],
            v_bar: vec![Vec3::zeros(); n],
            grad: vec![[Vec3::zeros(); 3]; n],
            div: vec![0.0; n],
        }
    }
}

/// Run `iterations` primal-dual steps with `tau = sigma = 1/sqrt(|D|^2 bound)`.
/// Returns the primal energy after the first and after the last step.
pub fn primal_dual_solve(
    dims: [usize; 3],
    v: &mut Vec<Vec3>,
    y: &mut DualState,
    data: &PrimalData,
    lambda: f64,
    spec: &RegularizerSpec,
    iterations: usize,
) -> Result<(f64, f64)> {
    let n = v.len();
    let step = 1.0 / spec.norm_bound().sqrt();
    let (tau, sigma) = (step, step);
    let mut b = Buffers::new(n);
    let energy = |v: &[Vec3]| lambda * data.energy(v) + regularizer_energy(dims, v, spec);
    let mut first = f64::NAN;
    for it in 0..iterations {
        gradient_adjoint_into(dims, &y.grad, &mut b.adj);
        if let Some(z) = &y.div {
            divergence_adjoint_into(dims, z, &mut b.adj, true);
        }
        for i in 0..n {
            let v_hat = v[i] - b.adj[i] * tau;
            b.v_new[i] = data.prox(i, &v_hat, tau, lambda);
            b.v_bar[i] = b.v_new[i] * 2.0 - v[i];
        }
        gradient_into(dims, &b.v_bar, &mut b.grad);
        for (yg, g) in y.grad.iter_mut().zip(&b.grad) {
            for a in 0..3 {
                yg[a] += g[a] * sigma;
            }
        }
        if let Some(z) = &mut y.div {
            divergence_into(dims, &b.v_bar, &mut b.div);
            for (zi, d) in z.iter_mut().zip(&b.div) {
                *zi += d * sigma;
            }
        }
        prox_dual_regularizer(y, sigma, spec);
        std::mem::swap(v, &mut b.v_new);
        if it == 0 {
            first = energy(v);
        }
    }
    if v.iter().any(|x| !x.iter().all(|c| c.is_finite())) {
        return Err(Error::NonFinite("flow iterate"));
    }
    Ok((first, energy(v)))
}

/// Grid of one pyramid level. Level `l` has scale `s = factor^l`; grid points
/// keep the full-resolution extent `[0, (n0 - 1) stride]` with `spacing`
/// voxels between them, and flow is stored in level units (voxels times `s`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelGeometry {
    pub scale: f64,
    pub dims: [usize; 3],
    pub spacing: Vec3,
}

impl LevelGeometry {
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn position(&self, n: usize) -> Vec3 {
        let c = super::ops::coords(self.dims, n);
        Vec3::new(c[0] as f64, c[1] as f64, c[2] as f64).component_mul(&self.spacing)
    }

    /// Full-resolution displacement at a voxel-space point.
    pub fn displacement(&self, v: &[Vec3], p: &Vec3) -> Vec3 {
        sample_grid(self.dims, v, &p.component_div(&self.spacing)) / self.scale
    }
}

pub fn level_geometry(base_dims: [usize; 3], stride: usize, scale: f64) -> LevelGeometry {
    let mut dims = [1usize; 3];
    let mut spacing = Vec3::repeat(stride as f64);
    for a in 0..3 {
        if base_dims[a] > 1 {
            let span = ((base_dims[a] - 1) * stride) as f64;
            dims[a] = (((base_dims[a] - 1) as f64 * scale).round() as usize + 1).max(2);
            spacing[a] = span / (dims[a] - 1) as f64;
        }
    }
    LevelGeometry {
        scale,
        dims,
        spacing,
    }
}

fn prolongate(prev: &LevelGeometry, v: &[Vec3], next: &LevelGeometry) -> Vec<Vec3> {
    let ratio = next.scale / prev.scale;
    (0..next.len())
        .map(|n| sample_grid(prev.dims, v, &next.position(n).component_div(&prev.spacing)) * ratio)
        .collect()
}

fn sparse_level_data(
    t0: &ParticleSet,
    index_t1: &ParticleIndex,
    level: &LevelGeometry,
    v: &[Vec3],
    layout: &DescriptorLayout,
    metric: Metric,
    h_level: f64,
    model: SparseModel,
) -> PrimalData {
    let s = level.scale;
    let warped =
        ParticleIndex::from_particles(warp_particles(&t0.particles, |p| level.displacement(v, p)));
    let mut ws = SparseWorkspace::default();
    let lin = (0..level.len())
        .map(|n| {
            let x = level.position(n);
            let l = linearize_sparse_data(
                &x,
                &(v[n] / s),
                &warped,
                index_t1,
                layout,
                metric,
                h_level / s,
                s,
                &mut ws,
            );
            // slope per level unit of displacement
            Linearization {
                constant: l.constant,
                slope: l.slope / s,
                curvature: l.curvature / (s * s),
            }
        })
        .collect();
    PrimalData::Sparse {
        lin,
        v0: v.to_vec(),
        model,
    }
}

/// Estimate the flow on the finest grid (`stride` voxels apart).
pub fn solve_flow_grid(
    input: FlowInput<'_>,
    domain: &Domain,
    config: &SolverConfig,
    spec: &RegularizerSpec,
) -> Result<(FlowField, SolveReport)> {
    config.validate()?;
    if let RegularizerSpec::QrdAlpha(a) = spec {
        if !(*a > 0.0) {
            return Err(Error::InvalidArgument("alpha must be > 0".into()));
        }
    }
    let base_dims = FlowField::grid_dims(domain, config.stride);
    let layout = config.data_term.is_sparse().then(DescriptorLayout::new);
    let (metric, window) = match config.data_term {
        DataTerm::SparseSsd => (Metric::Ssd, 0),
        DataTerm::SparseNcc => (Metric::Ncc, 0),
        DataTerm::DenseSsd { window } => (Metric::Ssd, window),
    };
    let index_t1 = match (input, config.data_term.is_sparse()) {
        (FlowInput::Particles { t1, .. }, true) => Some(ParticleIndex::new(t1)),
        (FlowInput::Volumes { u0, u1 }, false) => {
            if u0.dims != domain.extents || u1.dims != domain.extents {
                return Err(Error::DimensionMismatch(
                    "volumes must match the domain".into(),
                ));
            }
            None
        }
        _ => {
            return Err(Error::InvalidArgument(format!(
                "data term {} does not match the supplied input",
                config.data_term.name()
            )))
        }
    };

    let mut report = SolveReport::default();
    let mut prev: Option<(LevelGeometry, Vec<Vec3>)> = None;
    for level_idx in (0..config.pyramid_levels).rev() {
        let scale = config.pyramid_factor.powi(level_idx as i32);
        let level = level_geometry(base_dims, config.stride, scale);
        let mut v = match &prev {
            Some((g, pv)) => prolongate(g, pv, &level),
            None => vec![Vec3::zeros(); level.len()],
        };
        let mut y = DualState::zeros(level.len(), spec);
        let volumes = match input {
            FlowInput::Volumes { u0, u1 } if !config.data_term.is_sparse() => {
                Some((downsample(u0, scale), downsample(u1, scale)))
            }
            _ => None,
        };
        for warp in 0..config.warps_per_level {
            let data = match (&volumes, &input) {
                (Some((u0, u1)), _) => PrimalData::Dense(dense_models(
                    u0,
                    u1,
                    level.dims,
                    level.spacing * scale,
                    &v,
                    window,
                )),
                (None, FlowInput::Particles { t0, .. }) => sparse_level_data(
                    t0,
                    index_t1.as_ref().expect("sparse index"),
                    &level,
                    &v,
                    layout.as_ref().expect("layout"),
                    metric,
                    config.fd_probe_h,
                    config.sparse_model,
                ),
                _ => unreachable!("input checked above"),
            };
            let (e0, e1) = primal_dual_solve(
                level.dims,
                &mut v,
                &mut y,
                &data,
                config.lambda,
                spec,
                config.inner_iterations,
            )?;
            log::debug!("level {level_idx} warp {warp}: energy {e0:.6e} -> {e1:.6e}");
            report.warps.push(WarpRecord {
                level: level_idx,
                warp,
                energy_first: e0,
                energy_last: e1,
            });
        }
        prev = Some((level, v));
    }
    let (level, v) = prev.expect("at least one level");
    debug_assert_eq!(level.dims, base_dims);
    let vectors = v.iter().map(|x| x / level.scale).collect();
    Ok((FlowField::new(base_dims, config.stride, vectors)?, report))
}

/// Estimate the flow and upsample it to every voxel of the domain.
pub fn solve_flow(
    input: FlowInput<'_>,
    domain: &Domain,
    config: &SolverConfig,
    spec: &RegularizerSpec,
) -> Result<FlowField> {
    let (grid, _) = solve_flow_grid(input, domain, config, spec)?;
    Ok(grid.upsample(domain.extents))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_data_keeps_zero_flow() {
        let dims = [6, 5, 4];
        let mut v = vec![Vec3::zeros(); 120];
        for spec in [
            RegularizerSpec::Qr,
            RegularizerSpec::QrdInf,
            RegularizerSpec::QrdAlpha(2.0),
        ] {
            let mut y = DualState::zeros(120, &spec);
            primal_dual_solve(dims, &mut v, &mut y, &PrimalData::Zero, 1.0, &spec, 30).unwrap();
            assert!(v.iter().all(|x| *x == Vec3::zeros()));
        }
    }

    #[test]
    fn pure_smoothness_energy_vanishes() {
        let dims = [8, 8, 8];
        let mut v: Vec<Vec3> = (0..512)
            .map(|n| {
                let c = super::super::ops::coords(dims, n);
                Vec3::new(
                    (c[0] as f64 * 0.7).sin(),
                    (c[1] * c[2]) as f64 / 30.0,
                    ((c[0] + c[2]) % 3) as f64,
                )
            })
            .collect();
        let spec = RegularizerSpec::Qr;
        let e_init = regularizer_energy(dims, &v, &spec);
        let mut y = DualState::zeros(512, &spec);
        primal_dual_solve(dims, &mut v, &mut y, &PrimalData::Zero, 0.0, &spec, 3000).unwrap();
        let e_end = regularizer_energy(dims, &v, &spec);
        assert!(e_end < 1e-6 * e_init, "{e_end} vs {e_init}");
    }

    #[test]
    fn level_geometry_spans_base_grid() {
        let g = level_geometry([64, 32, 22], 4, 0.95f64.powi(8));
        for a in 0..3 {
            let span = (g.dims[a] - 1) as f64 * g.spacing[a];
            assert!((span - [252.0, 124.0, 84.0][a]).abs() < 1e-9);
        }
        let fine = level_geometry([64, 32, 22], 4, 1.0);
        assert_eq!(fine.dims, [64, 32, 22]);
        assert_eq!(fine.spacing, Vec3::new(4.0, 4.0, 4.0));
    }
}
