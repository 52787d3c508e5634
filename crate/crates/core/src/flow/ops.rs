//! Finite-difference operators on a regular grid, their adjoints and the
//! dual proximal maps of the quadratic regularizers.

use crate::geometry::Vec3;

/// Per-point gradient: entry `a` holds the forward difference of all three
/// components along axis `a`.
pub type Grad = [Vec3; 3];

#[inline]
fn strides(dims: [usize; 3]) -> [usize; 3] {
    [1, dims[0], dims[0] * dims[1]]
}

#[inline]
pub(crate) fn coords(dims: [usize; 3], n: usize) -> [usize; 3] {
    [
        n % dims[0],
        (n / dims[0]) % dims[1],
        n / (dims[0] * dims[1]),
    ]
}

/// Forward differences, zero on the last slice of each axis.
pub fn gradient_into(dims: [usize; 3], v: &[Vec3], out: &mut [Grad]) {
    let st = strides(dims);
    let mut n = 0;
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                let c = [i, j, k];
                let mut g = [Vec3::zeros(); 3];
                for a in 0..3 {
                    if c[a] + 1 < dims[a] {
                        g[a] = v[n + st[a]] - v[n];
                    }
                }
                out[n] = g;
                n += 1;
            }
        }
    }
}

pub fn gradient(dims: [usize; 3], v: &[Vec3]) -> Vec<Grad> {
    let mut out = vec![[Vec3::zeros(); 3]; v.len()];
    gradient_into(dims, v, &mut out);
    out
}

/// Exact adjoint of [`gradient`]; `out` is overwritten.
pub fn gradient_adjoint_into(dims: [usize; 3], y: &[Grad], out: &mut [Vec3]) {
    let st = strides(dims);
    let mut n = 0;
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                let c = [i, j, k];
                let mut acc = Vec3::zeros();
                for a in 0..3 {
                    if c[a] + 1 < dims[a] {
                        acc -= y[n][a];
                    }
                    if c[a] > 0 {
                        acc += y[n - st[a]][a];
                    }
                }
                out[n] = acc;
                n += 1;
            }
        }
    }
}

pub fn gradient_adjoint(dims: [usize; 3], y: &[Grad]) -> Vec<Vec3> {
    let mut out = vec![Vec3::zeros(); y.len()];
    gradient_adjoint_into(dims, y, &mut out);
    out
}

#[inline]
fn interior(c: [usize; 3]) -> bool {
    c[0] > 0 && c[1] > 0 && c[2] > 0
}

/// Backward-difference divergence, evaluated where every backward neighbour
/// exists; rows touching the lower faces are zero.
pub fn divergence_into(dims: [usize; 3], v: &[Vec3], out: &mut [f64]) {
    let st = strides(dims);
    let mut n = 0;
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                out[n] = if interior([i, j, k]) {
                    (0..3).map(|a| v[n][a] - v[n - st[a]][a]).sum()
                } else {
                    0.0
                };
                n += 1;
            }
        }
    }
}

pub fn divergence(dims: [usize; 3], v: &[Vec3]) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    divergence_into(dims, v, &mut out);
    out
}

/// Exact adjoint of [`divergence`]. Adds into `out` when `accumulate` is set.
pub fn divergence_adjoint_into(dims: [usize; 3], z: &[f64], out: &mut [Vec3], accumulate: bool) {
    let st = strides(dims);
    let mut n = 0;
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                let c = [i, j, k];
                let mut acc = Vec3::zeros();
                let own = if interior(c) { z[n] } else { 0.0 };
                for a in 0..3 {
                    acc[a] = own;
                    if c[a] + 1 < dims[a] {
                        let mut up = c;
                        up[a] += 1;
                        if interior(up) {
                            acc[a] -= z[n + st[a]];
                        }
                    }
                }
                if accumulate {
                    out[n] += acc;
                } else {
                    out[n] = acc;
                }
                n += 1;
            }
        }
    }
}

pub fn divergence_adjoint(dims: [usize; 3], z: &[f64]) -> Vec<Vec3> {
    let mut out = vec![Vec3::zeros(); z.len()];
    divergence_adjoint_into(dims, z, &mut out, false);
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RegularizerSpec {
    /// Quadratic gradient penalty.
    Qr,
    /// Quadratic gradient penalty with hard zero divergence.
    QrdInf,
    /// Quadratic gradient penalty plus `alpha/2 |div v|^2`.
    QrdAlpha(f64),
}

impl RegularizerSpec {
    pub fn has_divergence(&self) -> bool {
        !matches!(self, RegularizerSpec::Qr)
    }

    /// Upper bound of the squared operator norm of the stacked operator.
    pub fn norm_bound(&self) -> f64 {
        if self.has_divergence() {
            24.0
        } else {
            12.0
        }
    }

    pub fn name(&self) -> String {
        match self {
            RegularizerSpec::Qr => "qr".into(),
            RegularizerSpec::QrdInf => "qrd_inf".into(),
            RegularizerSpec::QrdAlpha(a) => format!("qrd_alpha({a})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualState {
    pub grad: Vec<Grad>,
    /// Divergence multiplier (pressure); absent for `Qr`.
    pub div: Option<Vec<f64>>,
}

impl DualState {
    pub fn zeros(len: usize, spec: &RegularizerSpec) -> Self {
        DualState {
            grad: vec![[Vec3::zeros(); 3]; len],
            div: spec.has_divergence().then(|| vec![0.0; len]),
        }
    }

    pub fn reset(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = [Vec3::zeros(); 3]);
        if let Some(d) = &mut self.div {
            d.iter_mut().for_each(|x| *x = 0.0);
        }
    }
}

pub fn prox_dual_regularizer(y: &mut DualState, sigma: f64, spec: &RegularizerSpec) {
    let s = 1.0 / (1.0 + sigma);
    for g in &mut y.grad {
        for a in g.iter_mut() {
            *a *= s;
        }
    }
    if let (RegularizerSpec::QrdAlpha(alpha), Some(d)) = (spec, &mut y.div) {
        let s = alpha / (alpha + sigma);
        d.iter_mut().for_each(|x| *x *= s);
    }
}

/// `1/2 |grad v|^2`, plus `alpha/2 |div v|^2` for the soft variant. The hard
/// constraint contributes nothing here.
pub fn regularizer_energy(dims: [usize; 3], v: &[Vec3], spec: &RegularizerSpec) -> f64 {
    let g = gradient(dims, v);
    let mut e: f64 = g
        .iter()
        .map(|g| g.iter().map(|a| a.norm_squared()).sum::<f64>())
        .sum::<f64>()
        * 0.5;
    if let RegularizerSpec::QrdAlpha(alpha) = spec {
        e += 0.5 * alpha * divergence(dims, v).iter().map(|d| d * d).sum::<f64>();
    }
    e
}

/// Trilinear interpolation of grid values at continuous grid coordinates,
/// clamped to the grid.
pub fn sample_grid(dims: [usize; 3], values: &[Vec3], g: &Vec3) -> Vec3 {
    let mut base = [0usize; 3];
    let mut frac = [0.0f64; 3];
    for a in 0..3 {
        let hi = (dims[a] - 1) as f64;
        let x = g[a].clamp(0.0, hi);
        let f = x.floor().min((dims[a].max(2) - 2) as f64);
        base[a] = f as usize;
        frac[a] = if dims[a] == 1 { 0.0 } else { x - f };
    }
    let st = strides(dims);
    let mut acc = Vec3::zeros();
    for corner in 0..8 {
        let mut w = 1.0;
        let mut n = 0;
        for a in 0..3 {
            let up = (corner >> a) & 1;
            if dims[a] == 1 {
                if up == 1 {
                    w = 0.0;
                }
                n += base[a] * st[a];
                continue;
            }
            w *= if up == 1 { frac[a] } else { 1.0 - frac[a] };
            n += (base[a] + up) * st[a];
        }
        if w != 0.0 {
            acc += values[n] * w;
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(dims: [usize; 3]) -> Vec<Vec3> {
        (0..dims.iter().product())
            .map(|n| {
                let c = coords(dims, n);
                Vec3::new(c[0] as f64, c[1] as f64, c[2] as f64)
            })
            .collect()
    }

    #[test]
    fn gradient_of_constant_and_ramp() {
        let dims = [5, 4, 3];
        let c = vec![Vec3::new(1.0, 2.0, 3.0); 60];
        assert!(gradient(dims, &c)
            .iter()
            .all(|g| g.iter().all(|a| *a == Vec3::zeros())));
        let g = gradient(dims, &ramp(dims));
        let n = 1 + 5 + 20;
        assert_eq!(g[n][0].x, 1.0);
        assert_eq!(g[n][1].y, 1.0);
        assert_eq!(g[n][2].z, 1.0);
        assert_eq!(g[4][0].x, 0.0);
    }

    #[test]
    fn divergence_of_identity_field() {
        let dims = [5, 4, 3];
        let d = divergence(dims, &ramp(dims));
        for (n, v) in d.iter().enumerate() {
            let c = coords(dims, n);
            if interior(c) {
                assert_eq!(*v, 3.0);
            } else {
                assert_eq!(*v, 0.0);
            }
        }
        let c = vec![Vec3::new(1.0, -2.0, 3.0); 60];
        assert!(divergence(dims, &c).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn dual_prox_values() {
        let mut y = DualState::zeros(1, &RegularizerSpec::QrdAlpha(1.0));
        y.grad[0][0].x = 2.0;
        y.div.as_mut().unwrap()[0] = 2.0;
        prox_dual_regularizer(&mut y, 1.0, &RegularizerSpec::QrdAlpha(1.0));
        assert_eq!(y.grad[0][0].x, 1.0);
        assert_eq!(y.div.as_ref().unwrap()[0], 1.0);
        let mut y = DualState::zeros(1, &RegularizerSpec::QrdInf);
        y.div.as_mut().unwrap()[0] = 5.0;
        prox_dual_regularizer(&mut y, 0.3, &RegularizerSpec::QrdInf);
        assert_eq!(y.div.as_ref().unwrap()[0], 5.0);
        assert!(DualState::zeros(3, &RegularizerSpec::Qr).div.is_none());
    }

    #[test]
    fn sampling_reproduces_linear_fields() {
        let dims = [4, 3, 5];
        let v = ramp(dims);
        let p = Vec3::new(1.25, 0.5, 3.75);
        assert!((sample_grid(dims, &v, &p) - p).norm() < 1e-12);
        let clamped = sample_grid(dims, &v, &Vec3::new(-3.0, 9.0, 2.0));
        assert!((clamped - Vec3::new(0.0, 2.0, 2.0)).norm() < 1e-12);
        let flat = [3, 1, 1];
        let w = vec![
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(2.0, 0.0, 0.0),
        ];
        assert!((sample_grid(flat, &w, &Vec3::new(1.5, 0.3, 0.0)).x - 1.5).abs() < 1e-12);
    }
}
