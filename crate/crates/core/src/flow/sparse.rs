//! First-order model of the descriptor matching cost around the current flow.

use crate::descriptor::{
    evaluate_candidates, ncc, ssd, DescriptorLayout, ParticleIndex, DESCRIPTOR_LEN,
};
use crate::geometry::{Particle, ParticleSet, Vec3};

use super::FlowField;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Ssd,
    /// Negative normalized cross-correlation.
    Ncc,
}

impl Metric {
    pub fn cost(&self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Metric::Ssd => ssd(a, b),
            Metric::Ncc => -ncc(a, b),
        }
    }
}

/// `S(v) ~ constant + <slope, v - v0>`, plus the per-axis second
/// differences of the same probes.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Linearization {
    pub constant: f64,
    pub slope: Vec3,
    pub curvature: Vec3,
}

/// How the probes enter the per-point prox.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SparseModel {
    /// Linear model only.
    Linear,
    /// Linear model plus `0.5 sum_k q_k (v_k - v0_k)^2` with
    /// `q_k = max(curvature_k, |slope_k| / TRUST_RADIUS)`, so the data term
    /// alone never moves a point further than `TRUST_RADIUS` per warp.
    #[default]
    Quadratic,
}

/// Level voxels.
pub const TRUST_RADIUS: f64 = 1.0;

impl Linearization {
    pub fn model_curvature(&self, k: usize) -> f64 {
        self.curvature[k].max(self.slope[k].abs() / TRUST_RADIUS)
    }

    pub fn eval(&self, v: &Vec3, v0: &Vec3) -> f64 {
        self.constant + self.slope.dot(&(v - v0))
    }

    pub fn eval_model(&self, v: &Vec3, v0: &Vec3, model: SparseModel) -> f64 {
        let lin = self.eval(v, v0);
        match model {
            SparseModel::Linear => lin,
            SparseModel::Quadratic => {
                let d = v - v0;
                lin + 0.5
                    * (0..3)
                        .map(|k| self.model_curvature(k) * d[k] * d[k])
                        .sum::<f64>()
            }
        }
    }
}

#[derive(Debug)]
pub struct SparseWorkspace {
    cand0: Vec<usize>,
    cand1: Vec<usize>,
    nn: Vec<u16>,
    d0: Vec<f64>,
    d1: Vec<f64>,
}

impl Default for SparseWorkspace {
    fn default() -> Self {
        SparseWorkspace {
            cand0: Vec::new(),
            cand1: Vec::new(),
            nn: Vec::new(),
            d0: vec![0.0; DESCRIPTOR_LEN],
            d1: vec![0.0; DESCRIPTOR_LEN],
        }
    }
}

/// Cost of matching the (warped) first-frame descriptor at `x = center + v0`
/// against second-frame descriptors at `x` and `x +- h e_k`; the slope is the
/// central difference of each probe pair, or zero along an axis where neither
/// probe improves on `x`. The descriptor jumps whenever a particle's k-NN
/// vertex set changes, so around an exact match the probes are lopsided and
/// the central difference alone would pull a perfect estimate off target.
/// All lengths are in voxels; `scale` enlarges the descriptor by `1/scale`.
#[allow(clippy::too_many_arguments)]
pub fn linearize_sparse_data(
    center: &Vec3,
    v0: &Vec3,
    index_t0: &ParticleIndex,
    index_t1: &ParticleIndex,
    layout: &DescriptorLayout,
    metric: Metric,
    h: f64,
    scale: f64,
    ws: &mut SparseWorkspace,
) -> Linearization {
    let x = center + v0;
    let r = layout.radius / scale;
    index_t0.query_into(&x, r, &mut ws.cand0);
    index_t1.query_into(&x, r + h, &mut ws.cand1);
    if ws.cand0.is_empty() && ws.cand1.is_empty() {
        return Linearization::default();
    }
    evaluate_candidates(
        &x,
        index_t0.particles(),
        &ws.cand0,
        layout,
        scale,
        &mut ws.nn,
        &mut ws.d0,
    );
    let probe = |p: &Vec3, ws: &mut SparseWorkspace| {
        evaluate_candidates(
            p,
            index_t1.particles(),
            &ws.cand1,
            layout,
            scale,
            &mut ws.nn,
            &mut ws.d1,
        );
        metric.cost(&ws.d0, &ws.d1)
    };
    let constant = probe(&x, ws);
    let mut slope = Vec3::zeros();
    let mut curvature = Vec3::zeros();
    for a in 0..3 {
        let mut e = Vec3::zeros();
        e[a] = h;
        let plus = probe(&(x + e), ws);
        let minus = probe(&(x - e), ws);
        slope[a] = if plus >= constant && minus >= constant {
            0.0
        } else {
            (plus - minus) / (2.0 * h)
        };
        curvature[a] = (plus - 2.0 * constant + minus) / (h * h);
    }
    Linearization {
        constant,
        slope,
        curvature,
    }
}

/// Minimizer of `|v - v_hat|^2 / (2 tau) + lambda <slope, v>`.
pub fn prox_primal_sparse(v_hat: &Vec3, tau: f64, lambda: f64, lin: &Linearization) -> Vec3 {
    v_hat - lin.slope * (tau * lambda)
}

/// Minimizer of `|v - v_hat|^2 / (2 tau) + lambda * eval_model(v)` for the
/// quadratic model; separable per axis.
pub fn prox_primal_sparse_quadratic(
    v_hat: &Vec3,
    v0: &Vec3,
    tau: f64,
    lambda: f64,
    lin: &Linearization,
) -> Vec3 {
    let tl = tau * lambda;
    Vec3::from_fn(|k, _| {
        let q = lin.model_curvature(k);
        (v_hat[k] + tl * (q * v0[k] - lin.slope[k])) / (1.0 + tl * q)
    })
}

pub(crate) fn warp_particles(
    particles: &[Particle],
    displacement: impl Fn(&Vec3) -> Vec3,
) -> Vec<Particle> {
    particles
        .iter()
        .map(|p| Particle::new(p.position + displacement(&p.position), p.intensity))
        .collect()
}

/// Move every particle by the interpolated flow and index the result.
pub fn warp_and_rebuild(particles_t0: &ParticleSet, v: &FlowField) -> ParticleIndex {
    ParticleIndex::from_particles(warp_particles(&particles_t0.particles, |p| v.sample(p)))
}
