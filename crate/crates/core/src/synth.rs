//! Synthetic ground truth: analytic incompressible flows, seeded particle
//! populations, advection and rendered camera images.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::geometry::{render_particles, CameraModel, Domain, Image, Particle, ParticleSet, Vec3};
use crate::io;

/// Analytic velocity fields in voxels per frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AnalyticFlow {
    Uniform(Vec3),
    /// `u = A cos(ax) sin(by) sin(cz)`, `v = B sin(ax) cos(by) sin(cz)`,
    /// `w = C sin(ax) sin(by) cos(cz)` with `(A, B, C) = amp (1, -a/2b, -a/2c)`,
    /// so `aA + bB + cC = 0`.
    TaylorGreen {
        amplitude: f64,
        wavelengths: Vec3,
    },
    /// Arnold-Beltrami-Childress flow with wavenumber `scale`.
    Abc {
        a: f64,
        b: f64,
        c: f64,
        scale: f64,
    },
}

impl AnalyticFlow {
    pub fn velocity(&self, p: &Vec3) -> Vec3 {
        match *self {
            AnalyticFlow::Uniform(v) => v,
            AnalyticFlow::TaylorGreen {
                amplitude,
                wavelengths,
            } => {
                let k = Vec3::new(
                    2.0 * PI / wavelengths.x,
                    2.0 * PI / wavelengths.y,
                    2.0 * PI / wavelengths.z,
                );
                let coef = Vec3::new(1.0, -k.x / (2.0 * k.y), -k.x / (2.0 * k.z)) * amplitude;
                let (sx, cx) = (k.x * p.x).sin_cos();
                let (sy, cy) = (k.y * p.y).sin_cos();
                let (sz, cz) = (k.z * p.z).sin_cos();
                Vec3::new(
                    coef.x * cx * sy * sz,
                    coef.y * sx * cy * sz,
                    coef.z * sx * sy * cz,
                )
            }
            AnalyticFlow::Abc { a, b, c, scale } => {
                let (sx, cx) = (scale * p.x).sin_cos();
                let (sy, cy) = (scale * p.y).sin_cos();
                let (sz, cz) = (scale * p.z).sin_cos();
                Vec3::new(a * sz + c * cy, b * sx + a * cz, c * sy + b * cx)
            }
        }
    }

    /// Taylor-Green field whose largest one-frame displacement over the domain
    /// (sampled every 4 voxels) is approximately `target`.
    pub fn taylor_green_for_max_displacement(
        target: f64,
        wavelengths: Vec3,
        domain: &Domain,
    ) -> Self {
        let mut flow = AnalyticFlow::TaylorGreen {
            amplitude: 1.0,
            wavelengths,
        };
        for _ in 0..3 {
            let current = max_displacement(&flow, domain, 4);
            if current <= 0.0 {
                break;
            }
            if let AnalyticFlow::TaylorGreen { amplitude, .. } = &mut flow {
                *amplitude *= target / current;
            }
        }
        flow
    }
}

/// One frame of RK4 with `substeps` equal sub-intervals.
pub fn advect_point(p: &Vec3, flow: &AnalyticFlow, substeps: usize) -> Vec3 {
    let h = 1.0 / substeps as f64;
    let mut x = *p;
    for _ in 0..substeps {
        let k1 = flow.velocity(&x);
        let k2 = flow.velocity(&(x + k1 * (0.5 * h)));
        let k3 = flow.velocity(&(x + k2 * (0.5 * h)));
        let k4 = flow.velocity(&(x + k3 * h));
        x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    }
    x
}

/// Advance every particle by one frame (single RK4 step); intensities unchanged.
pub fn advect(particles: &ParticleSet, flow: &AnalyticFlow) -> ParticleSet {
    let moved = particles
        .particles
        .iter()
        .map(|p| Particle::new(advect_point(&p.position, flow, 1), p.intensity))
        .collect();
    ParticleSet::new(moved, particles.time_index + 1)
}

/// One-frame displacement at grid points `(i, j, k) * stride`.
pub fn sample_gt_flow(
    flow: &AnalyticFlow,
    grid_dims: [usize; 3],
    stride: usize,
) -> Result<FlowField> {
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be >= 1".into()));
    }
    let mut vectors = Vec::with_capacity(grid_dims.iter().product());
    for k in 0..grid_dims[2] {
        for j in 0..grid_dims[1] {
            for i in 0..grid_dims[0] {
                let p = Vec3::new(
                    (i * stride) as f64,
                    (j * stride) as f64,
                    (k * stride) as f64,
                );
                vectors.push(advect_point(&p, flow, 1) - p);
            }
        }
    }
    FlowField::new(grid_dims, stride, vectors)
}

/// Largest one-frame displacement over voxel centers sampled every `stride` voxels.
pub fn max_displacement(flow: &AnalyticFlow, domain: &Domain, stride: usize) -> f64 {
    let [n, m, l] = domain.extents;
    let mut best: f64 = 0.0;
    for k in (0..l).step_by(stride) {
        for j in (0..m).step_by(stride) {
            for i in (0..n).step_by(stride) {
                let p = Vec3::new(i as f64, j as f64, k as f64);
                best = best.max((advect_point(&p, flow, 1) - p).norm());
            }
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub domain: Domain,
    pub cameras: Vec<CameraModel>,
    /// Particles per pixel of the first camera image.
    pub ppp: f64,
    pub sigma: f64,
    pub intensity_range: (f64, f64),
    pub rng_seed: u64,
    pub flow: AnalyticFlow,
    /// Standard deviation of additive pixel noise (0 disables).
    pub noise_sigma: f64,
}

/// Four cameras at `(+-yaw, +-pitch)` degrees, one pixel per voxel.
pub fn camera_rig(
    domain: &Domain,
    yaw: f64,
    pitch: f64,
    width: usize,
    height: usize,
) -> Result<Vec<CameraModel>> {
    [(yaw, pitch), (-yaw, pitch), (yaw, -pitch), (-yaw, -pitch)]
        .iter()
        .map(|&(y, p)| CameraModel::orthographic(y, p, 1.0, domain, width, height))
        .collect()
}

pub const DESK_DOMAIN: [usize; 3] = [256, 128, 88];
pub const DESK_IMAGE: (usize, usize) = (375, 200);
pub const DESK_WAVELENGTHS: [f64; 3] = [384.0, 256.0, 176.0];
pub const FULL_DOMAIN: [usize; 3] = [1024, 512, 352];
pub const FULL_IMAGE: (usize, usize) = (1500, 800);
pub const MAX_DISPLACEMENT: f64 = 4.8;

impl SceneConfig {
    /// Desk-scale scene: 256x128x88 voxels, 4 cameras, 375x200 images and a
    /// Taylor-Green flow with maximum displacement of about 4.8 voxels.
    pub fn desk(ppp: f64, seed: u64) -> Result<Self> {
        let domain = Domain::new(DESK_DOMAIN[0], DESK_DOMAIN[1], DESK_DOMAIN[2])?;
        let cameras = camera_rig(&domain, 35.0, 18.0, DESK_IMAGE.0, DESK_IMAGE.1)?;
        let w = DESK_WAVELENGTHS;
        let flow = AnalyticFlow::taylor_green_for_max_displacement(
            MAX_DISPLACEMENT,
            Vec3::new(w[0], w[1], w[2]),
            &domain,
        );
        Ok(SceneConfig {
            domain,
            cameras,
            ppp,
            sigma: 1.0,
            intensity_range: (0.3, 1.0),
            rng_seed: seed,
            flow,
            noise_sigma: 0.0,
        })
    }

    /// Full-scale geometry: 1024x512x352 voxels observed by 1500x800 cameras.
    pub fn full_scale(ppp: f64, seed: u64) -> Result<Self> {
        let domain = Domain::new(FULL_DOMAIN[0], FULL_DOMAIN[1], FULL_DOMAIN[2])?;
        let cameras = camera_rig(&domain, 35.0, 18.0, FULL_IMAGE.0, FULL_IMAGE.1)?;
        let w = [
            DESK_WAVELENGTHS[0] * 4.0,
            DESK_WAVELENGTHS[1] * 4.0,
            DESK_WAVELENGTHS[2] * 4.0,
        ];
        let flow = AnalyticFlow::taylor_green_for_max_displacement(
            MAX_DISPLACEMENT,
            Vec3::new(w[0], w[1], w[2]),
            &domain,
        );
        Ok(SceneConfig {
            domain,
            cameras,
            ppp,
            sigma: 1.0,
            intensity_range: (0.3, 1.0),
            rng_seed: seed,
            flow,
            noise_sigma: 0.0,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.intensity_range;
        if !(self.ppp > 0.0) {
            return Err(Error::InvalidArgument("ppp must be > 0".into()));
        }
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::InvalidArgument(
                "intensity range must satisfy 0 < lo <= hi".into(),
            ));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::InvalidArgument("sigma must be > 0".into()));
        }
        if self.cameras.is_empty() {
            return Err(Error::InvalidArgument(
                "at least one camera is required".into(),
            ));
        }
        Ok(())
    }

    pub fn particle_count(&self) -> usize {
        let cam = &self.cameras[0];
        (self.ppp * (cam.width * cam.height) as f64).round() as usize
    }
}

/// Uniform positions in the domain and uniform intensities, deterministic in the seed.
pub fn sample_particles(config: &SceneConfig) -> Result<ParticleSet> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let size = config.domain.size();
    let (lo, hi) = config.intensity_range;
    let n = config.particle_count();
    let particles = (0..n)
        .map(|_| {
            let p = Vec3::new(
                rng.gen_range(0.0..size.x),
                rng.gen_range(0.0..size.y),
                rng.gen_range(0.0..size.z),
            );
            let c = if hi > lo { rng.gen_range(lo..hi) } else { lo };
            Particle::new(p, c)
        })
        .collect();
    Ok(ParticleSet::new(particles, 0))
}

/// Two consecutive frames of particles and their camera images.
#[derive(Debug, Clone)]
pub struct Scene {
    pub config: SceneConfig,
    pub particles_t0: ParticleSet,
    pub particles_t1: ParticleSet,
    pub images_t0: Vec<Image>,
    pub images_t1: Vec<Image>,
}

pub fn render_images(particles: &ParticleSet, config: &SceneConfig, noise_seed: u64) -> Vec<Image> {
    let mut images: Vec<Image> = config
        .cameras
        .iter()
        .map(|cam| render_particles(particles, cam, config.sigma))
        .collect();
    if config.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        let normal = Normal::new(0.0, config.noise_sigma).expect("positive noise sigma");
        for img in &mut images {
            for v in &mut img.values {
                *v = (*v + normal.sample(&mut rng)).max(0.0);
            }
        }
    }
    images
}

pub fn generate_scene(config: &SceneConfig) -> Result<Scene> {
    let particles_t0 = sample_particles(config)?;
    let particles_t1 = advect(&particles_t0, &config.flow);
    let images_t0 = render_images(&particles_t0, config, config.rng_seed.wrapping_add(1));
    let images_t1 = render_images(&particles_t1, config, config.rng_seed.wrapping_add(2));
    Ok(Scene {
        config: config.clone(),
        particles_t0,
        particles_t1,
        images_t0,
        images_t1,
    })
}

pub fn image_path(dir: &Path, frame: usize, camera: usize) -> std::path::PathBuf {
    dir.join(format!("img_t{frame}_cam{camera}.pfm"))
}

pub fn write_domain(path: &Path, domain: &Domain) -> Result<()> {
    let [n, m, l] = domain.extents;
    std::fs::write(path, format!("{n} {m} {l}\n")).map_err(|e| Error::io(path, e))
}

pub fn read_domain(path: &Path) -> Result<Domain> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let v: Vec<usize> = text
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::format(path, "expected three integers"))?;
    match v.as_slice() {
        [n, m, l] => Domain::new(*n, *m, *l),
        _ => Err(Error::format(path, "expected three integers")),
    }
}

/// Write particles, images, cameras, domain and the ground-truth flow sampled
/// every `gt_stride` voxels.
pub fn write_scene(scene: &Scene, dir: &Path, gt_stride: usize) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    io::write_particles(&dir.join("particles_t0.csv"), &scene.particles_t0)?;
    io::write_particles(&dir.join("particles_t1.csv"), &scene.particles_t1)?;
    for (k, img) in scene.images_t0.iter().enumerate() {
        io::write_pfm(&image_path(dir, 0, k), img)?;
    }
    for (k, img) in scene.images_t1.iter().enumerate() {
        io::write_pfm(&image_path(dir, 1, k), img)?;
    }
    io::write_cameras(&dir.join("cameras.txt"), &scene.config.cameras)?;
    write_domain(&dir.join("domain.txt"), &scene.config.domain)?;
    let dims = FlowField::grid_dims(&scene.config.domain, gt_stride.max(1));
    let gt = sample_gt_flow(&scene.config.flow, dims, gt_stride)?;
    io::write_flow(&dir.join("gt_flow.fld"), &gt)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(ppp: f64) -> SceneConfig {
        let domain = Domain::new(64, 32, 24).unwrap();
        SceneConfig {
            cameras: camera_rig(&domain, 35.0, 18.0, 100, 60).unwrap(),
            domain,
            ppp,
            sigma: 1.0,
            intensity_range: (0.3, 1.0),
            rng_seed: 7,
            flow: AnalyticFlow::Uniform(Vec3::new(1.0, 0.0, 0.0)),
            noise_sigma: 0.0,
        }
    }

    #[test]
    fn particle_count_follows_ppp() {
        let mut cfg = small_config(0.1);
        cfg.cameras[0].width = 1500;
        cfg.cameras[0].height = 800;
        assert_eq!(cfg.particle_count(), 120_000);
        let cfg = small_config(1e-6);
        assert!(sample_particles(&cfg).unwrap().is_empty());
    }

    #[test]
    fn sampling_is_deterministic() {
        let cfg = small_config(0.05);
        let a = sample_particles(&cfg).unwrap();
        let b = sample_particles(&cfg).unwrap();
        assert_eq!(io::particles_to_csv(&a), io::particles_to_csv(&b));
        let size = cfg.domain.size();
        for p in a.iter() {
            assert!((0..3).all(|ax| p.position[ax] >= 0.0 && p.position[ax] < size[ax]));
            assert!(p.intensity >= 0.3 && p.intensity <= 1.0);
        }
    }

    #[test]
    fn uniform_and_zero_advection() {
        let cfg = small_config(0.02);
        let p0 = sample_particles(&cfg).unwrap();
        let p1 = advect(&p0, &cfg.flow);
        for (a, b) in p0.iter().zip(p1.iter()) {
            assert_eq!(b.position - a.position, Vec3::new(1.0, 0.0, 0.0));
            assert_eq!(a.intensity, b.intensity);
        }
        let still = advect(&p0, &AnalyticFlow::Uniform(Vec3::zeros()));
        assert_eq!(still.particles, p0.particles);
    }

    #[test]
    fn rk4_single_step_matches_refined_integration() {
        let cfg = SceneConfig::desk(0.05, 1).unwrap();
        let mut worst: f64 = 0.0;
        let mut max_disp: f64 = 0.0;
        for k in (0..88).step_by(7) {
            for j in (0..128).step_by(9) {
                for i in (0..256).step_by(11) {
                    let p = Vec3::new(i as f64 + 0.3, j as f64 + 0.6, k as f64 + 0.1);
                    let one = advect_point(&p, &cfg.flow, 1);
                    let fine = advect_point(&p, &cfg.flow, 100);
                    worst = worst.max((one - fine).norm());
                    max_disp = max_disp.max((one - p).norm());
                }
            }
        }
        assert!(max_disp <= 5.0);
        assert!(worst < 1e-6, "worst {worst}");
    }

    #[test]
    fn gt_sampling_matches_advect() {
        let domain = Domain::new(64, 64, 64).unwrap();
        let flow = AnalyticFlow::taylor_green_for_max_displacement(
            3.0,
            Vec3::new(64.0, 64.0, 64.0),
            &domain,
        );
        let gt = sample_gt_flow(&flow, [16, 16, 16], 4).unwrap();
        let idx = gt.index(5, 7, 3);
        let p = Vec3::new(20.0, 28.0, 12.0);
        let moved = advect(&ParticleSet::new(vec![Particle::new(p, 1.0)], 0), &flow);
        assert!((gt.vectors[idx] - (moved.particles[0].position - p)).norm() < 1e-9);
        let zero = sample_gt_flow(&AnalyticFlow::Uniform(Vec3::zeros()), [4, 4, 4], 2).unwrap();
        assert!(zero.vectors.iter().all(|v| *v == Vec3::zeros()));
        let uni = sample_gt_flow(
            &AnalyticFlow::Uniform(Vec3::new(1.0, 0.0, 0.0)),
            [4, 4, 4],
            2,
        )
        .unwrap();
        assert!(uni.vectors.iter().all(|v| *v == Vec3::new(1.0, 0.0, 0.0)));
    }

    #[test]
    fn analytic_fields_are_divergence_free() {
        let domain = Domain::new(128, 128, 96).unwrap();
        let tg = AnalyticFlow::taylor_green_for_max_displacement(
            5.0,
            Vec3::new(64.0, 64.0, 64.0),
            &domain,
        );
        let abc = AnalyticFlow::Abc {
            a: 1.0,
            b: 0.8,
            c: 0.6,
            scale: 2.0 * PI / 64.0,
        };
        for flow in [tg, abc] {
            let gt = sample_gt_flow(&flow, [64, 64, 48], 2).unwrap();
            // velocity divergence by central differences (spacing 2 voxels)
            let mut worst: f64 = 0.0;
            for k in 1..47 {
                for j in 1..63 {
                    for i in 1..63 {
                        let p = Vec3::new(2.0 * i as f64, 2.0 * j as f64, 2.0 * k as f64);
                        let mut div = 0.0;
                        for a in 0..3 {
                            let mut e = Vec3::zeros();
                            e[a] = 2.0;
                            div += (flow.velocity(&(p + e))[a] - flow.velocity(&(p - e))[a]) / 4.0;
                        }
                        worst = worst.max(div.abs());
                    }
                }
            }
            assert!(worst < 0.02, "{worst}");
            assert!(gt.vectors.iter().all(|v| v.iter().all(|c| c.is_finite())));
        }
    }
}
