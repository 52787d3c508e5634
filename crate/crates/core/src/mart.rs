//! Tomographic baseline: MART reconstruction, smoothing, contrast stretch and
//! sub-voxel peak extraction.

use crate::error::{Error, Result};
use crate::geometry::{
    CameraModel, Domain, Image, IntensityVolume, Particle, ParticleSet, Vec2, Vec3,
};
use crate::subpixel::{fit_axis, SubpixelFit};

#[derive(Debug, Clone, PartialEq)]
pub struct MartConfig {
    pub n_iterations: usize,
    /// Radius of the uncertainty cone around each viewing ray, in voxels.
    pub cone_radius: f64,
    /// 3x3x1 Gaussian smoothing (flat along z) after every iteration.
    pub smoothing: bool,
    pub gamma: f64,
    /// Peaks must exceed this value in the stretched volume.
    pub min_intensity: f64,
    pub fit: SubpixelFit,
}

impl Default for MartConfig {
    fn default() -> Self {
        MartConfig {
            n_iterations: 5,
            cone_radius: 0.75,
            smoothing: true,
            gamma: 0.7,
            min_intensity: 0.05,
            fit: SubpixelFit::Gaussian,
        }
    }
}

impl MartConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_iterations == 0 {
            return Err(Error::InvalidArgument(
                "MART needs at least one iteration".into(),
            ));
        }
        if !(self.gamma > 0.0) || !(self.cone_radius > 0.0) {
            return Err(Error::InvalidArgument(
                "gamma and cone_radius must be > 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct CameraRays {
    width: usize,
    height: usize,
    offsets: Vec<usize>,
    voxels: Vec<u32>,
    weights: Vec<f32>,
}

/// Voxel weights `max(0, 1 - d / R)` along every pixel's viewing ray, stored
/// per camera in compressed rows (pixels in scanline order).
#[derive(Debug, Clone)]
pub struct RayWeights {
    pub dims: [usize; 3],
    cameras: Vec<CameraRays>,
}

impl RayWeights {
    pub fn camera_count(&self) -> usize {
        self.cameras.len()
    }

    pub fn image_size(&self, camera: usize) -> (usize, usize) {
        (self.cameras[camera].width, self.cameras[camera].height)
    }

    /// Voxel indices and weights for pixel `(x, y)` of `camera`.
    pub fn ray(&self, camera: usize, x: usize, y: usize) -> (&[u32], &[f32]) {
        let c = &self.cameras[camera];
        let p = y * c.width + x;
        let (a, b) = (c.offsets[p], c.offsets[p + 1]);
        (&c.voxels[a..b], &c.weights[a..b])
    }

    pub fn entry_count(&self) -> usize {
        self.cameras.iter().map(|c| c.voxels.len()).sum()
    }
}

/// Append the cone weights of one viewing line (`origin + s dir`, unit `dir`).
fn trace_ray(
    origin: &Vec3,
    dir: &Vec3,
    dims: [usize; 3],
    radius: f64,
    voxels: &mut Vec<u32>,
    weights: &mut Vec<f32>,
) {
    let a = dir.iamax();
    let (b, c) = ((a + 1) % 3, (a + 2) % 3);
    let reach = radius / dir[a].abs();
    let r2 = radius * radius;
    let stride = [1usize, dims[0], dims[0] * dims[1]];
    for s in 0..dims[a] {
        let t = (s as f64 - origin[a]) / dir[a];
        let q = origin + dir * t;
        let range = |axis: usize| -> Option<(usize, usize)> {
            let lo = (q[axis] - reach).ceil().max(0.0);
            let hi = (q[axis] + reach).floor().min((dims[axis] - 1) as f64);
            (lo <= hi).then_some((lo as usize, hi as usize))
        };
        let (Some((b0, b1)), Some((c0, c1))) = (range(b), range(c)) else {
            continue;
        };
        let mut cell = [0usize; 3];
        cell[a] = s;
        for ic in c0..=c1 {
            cell[c] = ic;
            for ib in b0..=b1 {
                cell[b] = ib;
                let center = Vec3::new(cell[0] as f64, cell[1] as f64, cell[2] as f64);
                let rel = center - q;
                let along = rel.dot(dir);
                let d2 = (rel.norm_squared() - along * along).max(0.0);
                if d2 < r2 {
                    let w = 1.0 - d2.sqrt() / radius;
                    if w > 0.0 {
                        voxels.push(
                            (cell[0] * stride[0] + cell[1] * stride[1] + cell[2] * stride[2])
                                as u32,
                        );
                        weights.push(w as f32);
                    }
                }
            }
        }
    }
}

pub fn build_ray_weights(
    cameras: &[CameraModel],
    domain: &Domain,
    cone_radius: f64,
) -> Result<RayWeights> {
    if !(cone_radius > 0.0) {
        return Err(Error::InvalidArgument("cone_radius must be > 0".into()));
    }
    if domain.voxel_count() > u32::MAX as usize {
        return Err(Error::InvalidArgument(
            "domain too large for 32-bit voxel indices".into(),
        ));
    }
    let dims = domain.extents;
    let mut out = Vec::with_capacity(cameras.len());
    for cam in cameras {
        let dir = cam.ray_direction();
        let mut offsets = Vec::with_capacity(cam.width * cam.height + 1);
        let mut voxels = Vec::new();
        let mut weights = Vec::new();
        offsets.push(0);
        for y in 0..cam.height {
            for x in 0..cam.width {
                let origin = cam.back_project(&Vec2::new(x as f64, y as f64));
                trace_ray(&origin, &dir, dims, cone_radius, &mut voxels, &mut weights);
                offsets.push(voxels.len());
            }
        }
        voxels.shrink_to_fit();
        weights.shrink_to_fit();
        out.push(CameraRays {
            width: cam.width,
            height: cam.height,
            offsets,
            voxels,
            weights,
        });
    }
    Ok(RayWeights { dims, cameras: out })
}

/// Separable `[1/4, 1/2, 1/4]` smoothing along x and y, renormalized at borders.
pub fn smooth_xy(values: &mut [f64], dims: [usize; 3]) {
    let mut tmp = vec![0.0; values.len()];
    for (axis, stride) in [(0usize, 1usize), (1, dims[0])] {
        let n = dims[axis];
        for (idx, out) in tmp.iter_mut().enumerate() {
            let c = if axis == 0 {
                idx % dims[0]
            } else {
                (idx / dims[0]) % dims[1]
            };
            let mut acc = 0.5 * values[idx];
            let mut w = 0.5;
            if c > 0 {
                acc += 0.25 * values[idx - stride];
                w += 0.25;
            }
            if c + 1 < n {
                acc += 0.25 * values[idx + stride];
                w += 0.25;
            }
            *out = acc / w;
        }
        values.copy_from_slice(&tmp);
    }
}

pub const DENOMINATOR_FLOOR: f64 = 1e-12;

/// Multiplicative updates from `U = 1`, cameras in order, pixels in scanline
/// order; smoothing after each full iteration when enabled.
pub fn mart_reconstruct(
    images: &[Image],
    weights: &RayWeights,
    config: &MartConfig,
) -> Result<IntensityVolume> {
    config.validate()?;
    if images.len() != weights.camera_count() {
        return Err(Error::DimensionMismatch(format!(
            "{} images for {} cameras",
            images.len(),
            weights.camera_count()
        )));
    }
    for (k, img) in images.iter().enumerate() {
        if (img.width, img.height) != weights.image_size(k) {
            return Err(Error::DimensionMismatch(format!(
                "image {k} size differs from its camera"
            )));
        }
    }
    let dims = weights.dims;
    let mut u = vec![1.0f64; dims.iter().product()];
    for _ in 0..config.n_iterations {
        for (k, img) in images.iter().enumerate() {
            for y in 0..img.height {
                for x in 0..img.width {
                    let (vox, w) = weights.ray(k, x, y);
                    if vox.is_empty() {
                        continue;
                    }
                    let denom: f64 = vox
                        .iter()
                        .zip(w)
                        .map(|(&i, &w)| w as f64 * u[i as usize])
                        .sum();
                    if denom <= 0.0 {
                        continue;
                    }
                    let ratio = img.get(x, y) / denom.max(DENOMINATOR_FLOOR);
                    for (&i, &w) in vox.iter().zip(w) {
                        let w = w as f64;
                        u[i as usize] *= if w == 1.0 { ratio } else { ratio.powf(w) };
                    }
                }
            }
        }
        if config.smoothing {
            smooth_xy(&mut u, dims);
        }
    }
    if u.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("MART volume"));
    }
    IntensityVolume::from_values(dims, u.iter().map(|&v| v as f32).collect())
}

pub fn gamma_stretch(volume: &IntensityVolume, gamma: f64) -> IntensityVolume {
    IntensityVolume {
        dims: volume.dims,
        values: volume
            .values
            .iter()
            .map(|&v| (v as f64).max(0.0).powf(gamma) as f32)
            .collect(),
    }
}

/// Local maxima over the 26-neighbourhood (equal values: the smaller linear
/// index wins) above `min_intensity`, refined per axis.
pub fn extract_peaks_with(
    volume: &IntensityVolume,
    min_intensity: f64,
    fit: SubpixelFit,
) -> ParticleSet {
    let [nx, ny, nz] = volume.dims;
    let v = &volume.values;
    let mut out = Vec::new();
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let idx = volume.index(i, j, k);
                let f0 = v[idx];
                if !(f0 as f64 > min_intensity) {
                    continue;
                }
                let mut is_peak = true;
                'scan: for dk in -1i64..=1 {
                    for dj in -1i64..=1 {
                        for di in -1i64..=1 {
                            if di == 0 && dj == 0 && dk == 0 {
                                continue;
                            }
                            let (a, b, c) = (i as i64 + di, j as i64 + dj, k as i64 + dk);
                            if a < 0
                                || b < 0
                                || c < 0
                                || a >= nx as i64
                                || b >= ny as i64
                                || c >= nz as i64
                            {
                                continue;
                            }
                            let n = volume.index(a as usize, b as usize, c as usize);
                            if v[n] > f0 || (v[n] == f0 && n < idx) {
                                is_peak = false;
                                break 'scan;
                            }
                        }
                    }
                }
                if !is_peak {
                    continue;
                }
                let c = [i, j, k];
                let mut pos = Vec3::new(i as f64, j as f64, k as f64);
                let mut value = f0 as f64;
                let st = [1usize, nx, nx * ny];
                for a in 0..3 {
                    if c[a] == 0 || c[a] + 1 >= volume.dims[a] {
                        continue;
                    }
                    let fit =
                        fit_axis(v[idx - st[a]] as f64, f0 as f64, v[idx + st[a]] as f64, fit);
                    pos[a] += fit.offset;
                    value *= fit.gain;
                }
                out.push(Particle::new(pos, value));
            }
        }
    }
    ParticleSet::new(out, 0)
}

pub fn extract_peaks(volume: &IntensityVolume, min_intensity: f64) -> ParticleSet {
    extract_peaks_with(volume, min_intensity, SubpixelFit::default())
}

/// Full MART chain: reconstruction, contrast stretch and peak extraction.
pub fn mart_particles(
    images: &[Image],
    weights: &RayWeights,
    config: &MartConfig,
) -> Result<(IntensityVolume, ParticleSet)> {
    let volume = mart_reconstruct(images, weights, config)?;
    let stretched = gamma_stretch(&volume, config.gamma);
    let particles = extract_peaks_with(&stretched, config.min_intensity, config.fit);
    Ok((stretched, particles))
}
