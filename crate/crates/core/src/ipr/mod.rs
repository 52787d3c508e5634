//! Iterative particle reconstruction: candidates triangulated from residual
//! image peaks, refined by sparse energy minimization.

mod candidates;
mod energy;

pub use candidates::{
    detect_peaks_2d, detect_peaks_2d_with, init_intensity, reprojection_error, triangulate,
    triangulate_candidates, Candidate, MAX_CAMERAS,
};
pub use energy::{
    energy_data, ipalm_minimize, prox_sparsity, residual_images, BlockStep, IpalmOptions,
    IpalmTrace, IprState,
};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{CameraModel, Domain, Image, Particle, ParticleSet, Vec3};
use crate::kdtree::KdTree;
use crate::subpixel::SubpixelFit;

#[derive(Debug, Clone, PartialEq)]
pub struct IprConfig {
    pub eta: f64,
    pub sigma: f64,
    pub theta: f64,
    pub epsilon_schedule: Vec<f64>,
    pub n_inner: usize,
    pub tau_inertia: f64,
    pub fit: SubpixelFit,
    /// New candidates closer than this to a kept particle are dropped.
    pub dedup_radius: f64,
    /// After each outer iteration, particles weaker than this fraction of
    /// the mean intensity are removed. Zero disables pruning.
    pub prune_fraction: f64,
}

/// `n` values spaced linearly from `first` to `last`.
pub fn linear_schedule(first: f64, last: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![first],
        _ => (0..n)
            .map(|i| first + (last - first) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

impl Default for IprConfig {
    fn default() -> Self {
        IprConfig {
            eta: DEFAULT_ETA,
            sigma: 1.0,
            theta: 0.04,
            epsilon_schedule: linear_schedule(0.8, 2.0, 40),
            n_inner: 40,
            tau_inertia: std::f64::consts::FRAC_1_SQRT_2,
            fit: SubpixelFit::default(),
            dedup_radius: 0.5,
            prune_fraction: 0.4,
        }
    }
}

/// Deletes intensities below about 0.05 at the curvature `4 pi / sigma^2`
/// of a lone unit blob seen by four cameras.
pub const DEFAULT_ETA: f64 = 0.0157;

impl IprConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64, name: &str| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!("{name} must be positive")))
            }
        };
        pos(self.eta, "eta")?;
        pos(self.sigma, "sigma")?;
        pos(self.theta, "theta")?;
        pos(self.tau_inertia, "tau_inertia")?;
        pos(self.dedup_radius, "dedup_radius")?;
        if !(0.0..1.0).contains(&self.prune_fraction) {
            return Err(Error::InvalidArgument(
                "prune_fraction must lie in [0, 1)".into(),
            ));
        }
        if self.n_inner == 0 {
            return Err(Error::InvalidArgument("n_inner must be positive".into()));
        }
        if self.epsilon_schedule.is_empty() {
            return Err(Error::InvalidArgument("epsilon_schedule is empty".into()));
        }
        for e in &self.epsilon_schedule {
            pos(*e, "epsilon")?;
        }
        if self.epsilon_schedule.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidArgument(
                "epsilon_schedule must be nondecreasing".into(),
            ));
        }
        Ok(())
    }

    pub fn ipalm_options(&self) -> IpalmOptions {
        IpalmOptions {
            eta: self.eta,
            sigma: self.sigma,
            n_inner: self.n_inner,
            tau_inertia: self.tau_inertia,
        }
    }
}

/// One line of the per-outer-iteration log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OuterLog {
    pub iteration: usize,
    pub epsilon: f64,
    pub peaks: Vec<usize>,
    pub candidates: usize,
    pub added: usize,
    pub particles: usize,
    pub energy: f64,
    pub l_p: f64,
    pub l_c: f64,
}

/// Candidates that survive deduplication, with `m` recounted per reference
/// peak and intensities shared accordingly.
fn admit_candidates(
    state: &mut IprState,
    mut cands: Vec<Candidate>,
    residual_ref: &Image,
    camera: &CameraModel,
    k: usize,
    config: &IprConfig,
) -> usize {
    cands.sort_by(|a, b| {
        a.reprojection_error
            .total_cmp(&b.reprojection_error)
            .then(a.reference.cmp(&b.reference))
    });
    let existing = KdTree::new(&state.positions);
    let r2 = config.dedup_radius * config.dedup_radius;
    let mut kept: Vec<Candidate> = Vec::new();
    let mut kept_pts: Vec<Vec3> = Vec::new();
    let mut hits = Vec::new();
    for c in cands {
        existing.within_radius_into(&c.position, config.dedup_radius, &mut hits);
        if !hits.is_empty() {
            continue;
        }
        // new candidates are few per call; a linear scan is enough
        if kept_pts
            .iter()
            .any(|p| (p - c.position).norm_squared() < r2)
        {
            continue;
        }
        kept_pts.push(c.position);
        kept.push(c);
    }
    let mut per_ref = std::collections::HashMap::new();
    for c in &kept {
        *per_ref.entry(c.reference).or_insert(0usize) += 1;
    }
    let s2 = config.sigma * config.sigma;
    let mut added = 0;
    kept.sort_by_key(|c| c.reference);
    for c in &kept {
        let i_ref = residual_ref.sample(&camera.project(&c.position)) * s2;
        let ci = init_intensity(i_ref, k, per_ref[&c.reference]);
        if ci > 0.0 {
            state.push(c.position, ci);
            added += 1;
        }
    }
    added
}

/// Drops particles below `fraction` of the mean intensity; returns how many.
fn prune_weak(state: &mut IprState, fraction: f64) -> usize {
    if state.is_empty() {
        return 0;
    }
    let mean = state.intensities.iter().sum::<f64>() / state.len() as f64;
    let cut = fraction * mean;
    let before = state.len();
    for c in state.intensities.iter_mut() {
        if *c < cut {
            *c = 0.0;
        }
    }
    state.compact();
    before - state.len()
}

/// Alternate candidate generation on residual images with energy
/// minimization over the whole epsilon schedule. `on_outer` sees each log
/// entry and the state it describes as soon as they are available.
pub fn ipr_reconstruct_logged(
    images: &[Image],
    cameras: &[CameraModel],
    domain: &Domain,
    config: &IprConfig,
    on_outer: &mut dyn FnMut(&OuterLog, &IprState),
) -> Result<(ParticleSet, Vec<OuterLog>)> {
    config.validate()?;
    let k = cameras.len();
    if k < 2 {
        return Err(Error::InvalidArgument(
            "IPR needs at least two cameras".into(),
        ));
    }
    if k > MAX_CAMERAS {
        return Err(Error::InvalidArgument(format!(
            "at most {MAX_CAMERAS} cameras are supported"
        )));
    }
    if images.len() != k {
        return Err(Error::DimensionMismatch(format!(
            "{} images for {k} cameras",
            images.len()
        )));
    }
    let mut state = IprState::new(Vec::new(), Vec::new());
    let mut logs = Vec::new();
    let opts = config.ipalm_options();
    for (it, &eps) in config.epsilon_schedule.iter().enumerate() {
        let residual = residual_images(
            images,
            &state.positions,
            &state.intensities,
            cameras,
            config.sigma,
        )?;
        let peaks: Vec<Vec<_>> = residual
            .iter()
            .map(|r| detect_peaks_2d_with(r, config.theta, config.fit))
            .collect();
        let cands = triangulate_candidates(&peaks, cameras, domain, eps);
        let n_cands = cands.len();
        let added = admit_candidates(&mut state, cands, &residual[0], &cameras[0], k, config);
        // fresh inertia for the enlarged state
        state.prev_positions.clone_from(&state.positions);
        state.prev_intensities.clone_from(&state.intensities);
        let mut trace = ipalm_minimize(&mut state, images, cameras, &opts)?;
        let last = it + 1 == config.epsilon_schedule.len();
        // the next outer iteration refits anyway; only the last one needs it here
        if config.prune_fraction > 0.0 && prune_weak(&mut state, config.prune_fraction) > 0 && last
        {
            state.prev_positions.clone_from(&state.positions);
            state.prev_intensities.clone_from(&state.intensities);
            trace = ipalm_minimize(&mut state, images, cameras, &opts)?;
        }
        let energy = match trace.energies.last() {
            Some(_) => {
                let (e, _, _) = energy_data(&state, images, cameras, config.sigma)?;
                e + config.eta * state.active_count() as f64
            }
            None => f64::NAN,
        };
        let entry = OuterLog {
            iteration: it,
            epsilon: eps,
            peaks: peaks.iter().map(|p| p.len()).collect(),
            candidates: n_cands,
            added,
            particles: state.len(),
            energy,
            l_p: state.l_p,
            l_c: state.l_c,
        };
        log::debug!(
            "ipr outer {it}: eps {eps:.3}, {n_cands} candidates, {added} added, {} particles, E {energy:.6e}",
            state.len()
        );
        on_outer(&entry, &state);
        logs.push(entry);
    }
    let particles = state
        .positions
        .iter()
        .zip(&state.intensities)
        .map(|(p, &c)| Particle::new(*p, c))
        .collect();
    Ok((ParticleSet::new(particles, 0), logs))
}

pub fn ipr_reconstruct(
    images: &[Image],
    cameras: &[CameraModel],
    domain: &Domain,
    config: &IprConfig,
) -> Result<ParticleSet> {
    ipr_reconstruct_logged(images, cameras, domain, config, &mut |_, _| {}).map(|r| r.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::render_particles;

    #[test]
    fn schedule_and_validation() {
        let s = linear_schedule(0.8, 2.0, 24);
        assert_eq!(s.len(), 24);
        assert_eq!(s[0], 0.8);
        assert!((s[23] - 2.0).abs() < 1e-15);
        let mut c = IprConfig::default();
        c.validate().unwrap();
        c.epsilon_schedule = vec![1.0, 0.5];
        assert!(c.validate().is_err());
    }

    #[test]
    fn blank_images_give_nothing() {
        let d = Domain::new(20, 20, 10).unwrap();
        let cams = crate::synth::camera_rig(&d, 35.0, 18.0, 32, 32).unwrap();
        let imgs: Vec<Image> = cams
            .iter()
            .map(|c| Image::zeros(c.width, c.height))
            .collect();
        let mut cfg = IprConfig::default();
        cfg.epsilon_schedule = linear_schedule(0.8, 2.0, 3);
        assert!(ipr_reconstruct(&imgs, &cams, &d, &cfg).unwrap().is_empty());
    }

    #[test]
    fn single_particle_is_recovered() {
        let d = Domain::new(30, 24, 16).unwrap();
        let cams = crate::synth::camera_rig(&d, 35.0, 18.0, 48, 40).unwrap();
        let x = Vec3::new(14.3, 11.8, 7.6);
        let set = ParticleSet::new(vec![Particle::new(x, 0.6)], 0);
        let imgs: Vec<Image> = cams
            .iter()
            .map(|c| render_particles(&set, c, 1.0))
            .collect();
        let mut cfg = IprConfig::default();
        cfg.epsilon_schedule = linear_schedule(0.8, 2.0, 4);
        cfg.n_inner = 30;
        let out = ipr_reconstruct(&imgs, &cams, &d, &cfg).unwrap();
        assert_eq!(out.len(), 1);
        assert!((out.particles[0].position - x).norm() < 1e-3);
        assert!((out.particles[0].intensity - 0.6).abs() < 1e-3);
    }
}
