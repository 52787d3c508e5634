//! Dense-volume SSD baseline: windowed quadratic model per grid point.

use nalgebra::Matrix3;

use crate::geometry::{IntensityVolume, ParticleSet, Vec3};

use super::ops::{coords, sample_grid};
use super::FlowField;

/// Volume with a Gaussian `c exp(-d^2 / sigma^2)` per particle, cut at `3 sigma`.
pub fn render_volume(particles: &ParticleSet, dims: [usize; 3], sigma: f64) -> IntensityVolume {
    let mut vol = IntensityVolume::zeros(dims);
    let r = 3.0 * sigma;
    let inv = 1.0 / (sigma * sigma);
    for p in particles.iter() {
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        let mut empty = false;
        for a in 0..3 {
            let l = (p.position[a] - r).ceil().max(0.0);
            let h = (p.position[a] + r).floor().min((dims[a] - 1) as f64);
            if h < l {
                empty = true;
                break;
            }
            lo[a] = l as usize;
            hi[a] = h as usize;
        }
        if empty {
            continue;
        }
        for k in lo[2]..=hi[2] {
            let dz = k as f64 - p.position.z;
            for j in lo[1]..=hi[1] {
                let dy = j as f64 - p.position.y;
                for i in lo[0]..=hi[0] {
                    let dx = i as f64 - p.position.x;
                    let d2 = dx * dx + dy * dy + dz * dz;
                    if d2 < r * r {
                        let n = vol.index(i, j, k);
                        vol.values[n] += (p.intensity * (-d2 * inv).exp()) as f32;
                    }
                }
            }
        }
    }
    vol
}

fn blur_axis(src: &[f32], dims: [usize; 3], axis: usize, kernel: &[f64], dst: &mut [f32]) {
    let half = (kernel.len() / 2) as isize;
    let st = [1, dims[0], dims[0] * dims[1]][axis];
    let n = dims[axis] as isize;
    for (idx, out) in dst.iter_mut().enumerate() {
        let c = coords(dims, idx)[axis] as isize;
        let (mut acc, mut wsum) = (0.0, 0.0);
        for (t, w) in kernel.iter().enumerate() {
            let q = c + t as isize - half;
            if q >= 0 && q < n {
                acc += w * src[(idx as isize + (q - c) * st as isize) as usize] as f64;
                wsum += w;
            }
        }
        *out = (acc / wsum) as f32;
    }
}

/// Separable Gaussian blur (standard deviation `sigma` voxels), renormalized at borders.
pub fn gaussian_blur(vol: &IntensityVolume, sigma: f64) -> IntensityVolume {
    if sigma <= 0.0 {
        return vol.clone();
    }
    let half = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-half..=half)
        .map(|t| (-(t * t) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let mut a = vol.values.clone();
    let mut b = vec![0.0f32; a.len()];
    for axis in 0..3 {
        blur_axis(&a, vol.dims, axis, &kernel, &mut b);
        std::mem::swap(&mut a, &mut b);
    }
    IntensityVolume {
        dims: vol.dims,
        values: a,
    }
}

/// Pre-smoothed resampling so that level voxel `q` sits at full-resolution `q / scale`.
pub fn downsample(vol: &IntensityVolume, scale: f64) -> IntensityVolume {
    if scale >= 1.0 {
        return vol.clone();
    }
    let blurred = gaussian_blur(vol, 0.6 * (1.0 / (scale * scale) - 1.0).sqrt());
    let dims = vol
        .dims
        .map(|n| (((n as f64) * scale).round() as usize).max(2).min(n));
    let mut out = IntensityVolume::zeros(dims);
    let mut n = 0;
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                let p = Vec3::new(i as f64, j as f64, k as f64) / scale;
                out.values[n] = blurred.sample(&p) as f32;
                n += 1;
            }
        }
    }
    out
}

/// Quadratic model `v^T A v - 2 b^T v + c` of the windowed SSD.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DenseModel {
    pub a: Matrix3<f64>,
    pub b: Vec3,
    pub c: f64,
}

impl Default for DenseModel {
    fn default() -> Self {
        DenseModel {
            a: Matrix3::zeros(),
            b: Vec3::zeros(),
            c: 0.0,
        }
    }
}

impl DenseModel {
    pub fn eval(&self, v: &Vec3) -> f64 {
        v.dot(&(self.a * v)) - 2.0 * self.b.dot(v) + self.c
    }
}

/// Minimizer of `|v - v_hat|^2 / (2 tau) + lambda * model(v)`.
pub fn prox_primal_dense(v_hat: &Vec3, tau: f64, lambda: f64, model: &DenseModel) -> Vec3 {
    let m = Matrix3::identity() / tau + model.a * (2.0 * lambda);
    let rhs = v_hat / tau + model.b * (2.0 * lambda);
    m.cholesky().map(|c| c.solve(&rhs)).unwrap_or(*v_hat)
}

const NQ: usize = 10;

/// Per-voxel contributions `g g^T`, `a g`, `a^2` with `g = grad U1(j + v0_j)`
/// and `a = U0(j) - U1(j + v0_j) + v0_j . g`.
#[inline]
fn voxel_terms(u1: &IntensityVolume, j: &Vec3, u0_val: f64, v0: &Vec3) -> [f64; NQ] {
    let p = j + v0;
    let r = u0_val - u1.sample(&p);
    let mut g = Vec3::zeros();
    for a in 0..3 {
        let mut e = Vec3::zeros();
        e[a] = 1.0;
        g[a] = 0.5 * (u1.sample(&(p + e)) - u1.sample(&(p - e)));
    }
    let a = r + v0.dot(&g);
    [
        g.x * g.x,
        g.x * g.y,
        g.x * g.z,
        g.y * g.y,
        g.y * g.z,
        g.z * g.z,
        a * g.x,
        a * g.y,
        a * g.z,
        a * a,
    ]
}

/// Window `[c - half, c + half]` clipped to `0..n`, with `c = round(x)`.
fn window(x: f64, half: usize, n: usize) -> (usize, usize) {
    let c = (x.round().max(0.0) as usize).min(n - 1);
    (c.saturating_sub(half), (c + half).min(n - 1))
}

/// Windowed SSD models at the points of a grid with `spacing` (in voxels of
/// `u0`/`u1`), given the flow `v` on that grid. Box sums run separably and
/// are evaluated only at grid points.
pub(crate) fn dense_models(
    u0: &IntensityVolume,
    u1: &IntensityVolume,
    grid_dims: [usize; 3],
    spacing: Vec3,
    v: &[Vec3],
    window_size: usize,
) -> Vec<DenseModel> {
    let [nx, ny, nz] = u0.dims;
    let [gx, gy, gz] = grid_dims;
    let half = window_size / 2;
    let win = |axis: usize, g: usize| window(g as f64 * spacing[axis], half, u0.dims[axis]);
    // pass 1: per voxel row, prefix sums along x, sampled at grid x windows
    let mut sx = vec![[0.0f64; NQ]; gx * ny * nz];
    let mut prefix = vec![[0.0f64; NQ]; nx + 1];
    for k in 0..nz {
        for j in 0..ny {
            let row = (k * ny + j) * nx;
            for i in 0..nx {
                let jv = Vec3::new(i as f64, j as f64, k as f64);
                let gcoord = jv.component_div(&spacing);
                let v0 = sample_grid(grid_dims, v, &gcoord);
                let t = voxel_terms(u1, &jv, u0.values[row + i] as f64, &v0);
                for q in 0..NQ {
                    prefix[i + 1][q] = prefix[i][q] + t[q];
                }
            }
            for g in 0..gx {
                let (lo, hi) = win(0, g);
                let dst = &mut sx[(k * ny + j) * gx + g];
                for q in 0..NQ {
                    dst[q] = prefix[hi + 1][q] - prefix[lo][q];
                }
            }
        }
    }
    // pass 2: along y
    let mut sy = vec![[0.0f64; NQ]; gx * gy * nz];
    for k in 0..nz {
        for g0 in 0..gx {
            for g1 in 0..gy {
                let (lo, hi) = win(1, g1);
                let dst = &mut sy[(k * gy + g1) * gx + g0];
                for j in lo..=hi {
                    let src = &sx[(k * ny + j) * gx + g0];
                    for q in 0..NQ {
                        dst[q] += src[q];
                    }
                }
            }
        }
    }
    drop(sx);
    // pass 3: along z, normalize by window size
    let mut models = vec![DenseModel::default(); gx * gy * gz];
    for g2 in 0..gz {
        let (lo2, hi2) = win(2, g2);
        for g1 in 0..gy {
            let (lo1, hi1) = win(1, g1);
            for g0 in 0..gx {
                let (lo0, hi0) = win(0, g0);
                let count = ((hi0 - lo0 + 1) * (hi1 - lo1 + 1) * (hi2 - lo2 + 1)) as f64;
                let mut s = [0.0f64; NQ];
                for k in lo2..=hi2 {
                    let src = &sy[(k * gy + g1) * gx + g0];
                    for q in 0..NQ {
                        s[q] += src[q];
                    }
                }
                let w = 1.0 / count;
                let a = Matrix3::new(s[0], s[1], s[2], s[1], s[3], s[4], s[2], s[4], s[5]) * w;
                models[(g2 * gy + g1) * gx + g0] = DenseModel {
                    a,
                    b: Vec3::new(s[6], s[7], s[8]) * w,
                    c: s[9] * w,
                };
            }
        }
    }
    models
}

/// Windowed SSD models at the grid points of `v0` (full resolution).
pub fn dense_ssd_linearize(
    u0: &IntensityVolume,
    u1: &IntensityVolume,
    v0: &FlowField,
    window: usize,
) -> Vec<DenseModel> {
    let s = v0.stride as f64;
    dense_models(u0, u1, v0.dims, Vec3::new(s, s, s), &v0.vectors, window)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Particle;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_volume(dims: [usize; 3], n: usize, seed: u64) -> (ParticleSet, IntensityVolume) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ps: Vec<Particle> = (0..n)
            .map(|_| {
                Particle::new(
                    Vec3::new(
                        rng.gen_range(0.0..dims[0] as f64),
                        rng.gen_range(0.0..dims[1] as f64),
                        rng.gen_range(0.0..dims[2] as f64),
                    ),
                    rng.gen_range(0.3..1.0),
                )
            })
            .collect();
        let set = ParticleSet::new(ps, 0);
        let vol = render_volume(&set, dims, 1.0);
        (set, vol)
    }

    #[test]
    fn exact_integer_warp_is_a_fixed_point() {
        let dims = [24, 24, 24];
        let (set, u0) = random_volume(dims, 150, 1);
        let shifted = ParticleSet::new(
            set.iter()
                .map(|p| Particle::new(p.position + Vec3::new(1.0, 0.0, 0.0), p.intensity))
                .collect(),
            1,
        );
        let u1 = render_volume(&shifted, dims, 1.0);
        let v0 = FlowField::new([6, 6, 6], 4, vec![Vec3::new(1.0, 0.0, 0.0); 216]).unwrap();
        let models = dense_ssd_linearize(&u0, &u1, &v0, 13);
        // interior grid points see no clipped particles
        let n = v0.index(3, 3, 3);
        let v = prox_primal_dense(&v0.vectors[n], 0.2, 1.0, &models[n]);
        assert!((v - v0.vectors[n]).norm() < 1e-4, "{v:?}");
    }

    #[test]
    fn identical_volumes_minimized_at_zero() {
        let dims = [20, 20, 20];
        let (_, u0) = random_volume(dims, 100, 2);
        let v0 = FlowField::zeros([5, 5, 5], 4);
        let models = dense_ssd_linearize(&u0, &u0, &v0, 13);
        for m in &models {
            assert!(m.b.norm() < 1e-12);
            let v = prox_primal_dense(&Vec3::zeros(), 0.2, 3.0, m);
            assert!(v.norm() < 1e-12);
        }
    }

    #[test]
    fn prox_matches_grid_search() {
        let dims = [16, 16, 16];
        let (_, u0) = random_volume(dims, 80, 3);
        let (_, u1) = random_volume(dims, 80, 4);
        let v0 = FlowField::new([4, 4, 4], 4, vec![Vec3::new(0.3, -0.2, 0.1); 64]).unwrap();
        let models = dense_ssd_linearize(&u0, &u1, &v0, 13);
        let (tau, lambda) = (0.5, 2.0);
        let v_hat = Vec3::new(0.4, -0.6, 0.2);
        for m in models.iter().step_by(9) {
            let got = prox_primal_dense(&v_hat, tau, lambda, m);
            let obj = |v: &Vec3| (v - v_hat).norm_squared() / (2.0 * tau) + lambda * m.eval(v);
            let mut best = (f64::INFINITY, Vec3::zeros());
            for a in -40..=40 {
                for b in -40..=40 {
                    for c in -40..=40 {
                        let v = Vec3::new(a as f64, b as f64, c as f64) * 0.05;
                        let e = obj(&v);
                        if e < best.0 {
                            best = (e, v);
                        }
                    }
                }
            }
            assert!(obj(&got) <= best.0 + 1e-12);
            assert!((got - best.1).norm() < 0.05 * 3f64.sqrt());
        }
    }

    #[test]
    fn blur_preserves_constants_and_downsample_dims() {
        let vol = IntensityVolume::filled([10, 8, 6], 2.0);
        let b = gaussian_blur(&vol, 1.3);
        assert!(b.values.iter().all(|v| (v - 2.0).abs() < 1e-5));
        let d = downsample(&vol, 0.5);
        assert_eq!(d.dims, [5, 4, 3]);
    }
}
