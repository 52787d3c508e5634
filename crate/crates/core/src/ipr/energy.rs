//! Image-space data energy of a particle set, its analytic gradients and the
//! inertial proximal alternating minimization over positions and intensities.

use crate::error::{Error, Result};
use crate::geometry::{blob, blob_window, CameraModel, Image, Vec2, Vec3};

/// Particle positions and intensities plus the previous iterates used for
/// inertia and the current Lipschitz estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct IprState {
    pub positions: Vec<Vec3>,
    pub intensities: Vec<f64>,
    pub prev_positions: Vec<Vec3>,
    pub prev_intensities: Vec<f64>,
    pub l_p: f64,
    pub l_c: f64,
}

impl IprState {
    pub fn new(positions: Vec<Vec3>, intensities: Vec<f64>) -> Self {
        IprState {
            prev_positions: positions.clone(),
            prev_intensities: intensities.clone(),
            positions,
            intensities,
            l_p: 1.0,
            l_c: 1.0,
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn push(&mut self, p: Vec3, c: f64) {
        self.positions.push(p);
        self.intensities.push(c);
        self.prev_positions.push(p);
        self.prev_intensities.push(c);
    }

    /// Drop particles whose intensity is exactly zero.
    pub fn compact(&mut self) {
        let keep: Vec<bool> = self.intensities.iter().map(|&c| c != 0.0).collect();
        let filter = |v: &mut Vec<Vec3>| {
            let mut it = keep.iter();
            v.retain(|_| *it.next().unwrap());
        };
        filter(&mut self.positions);
        filter(&mut self.prev_positions);
        let filter_c = |v: &mut Vec<f64>| {
            let mut it = keep.iter();
            v.retain(|_| *it.next().unwrap());
        };
        filter_c(&mut self.intensities);
        filter_c(&mut self.prev_intensities);
    }

    pub fn active_count(&self) -> usize {
        self.intensities.iter().filter(|&&c| c != 0.0).count()
    }
}

/// `0` if `t c^2 < 2 eta` or `c < 0`, else `c`: the proximal map of
/// `eta |c|_0 + indicator(c >= 0)` with step `1/t`.
pub fn prox_sparsity(c_bar: f64, t: f64, eta: f64) -> f64 {
    if c_bar < 0.0 || t * c_bar * c_bar < 2.0 * eta {
        0.0
    } else {
        c_bar
    }
}

/// Model images of a particle set and the data energy against fixed targets.
pub(crate) struct Renderer<'a> {
    images: &'a [Image],
    cameras: &'a [CameraModel],
    sigma: f64,
    pub(crate) residual: Vec<Vec<f64>>,
}

impl<'a> Renderer<'a> {
    pub(crate) fn new(images: &'a [Image], cameras: &'a [CameraModel], sigma: f64) -> Result<Self> {
        if images.len() != cameras.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} images for {} cameras",
                images.len(),
                cameras.len()
            )));
        }
        for (img, cam) in images.iter().zip(cameras) {
            if (img.width, img.height) != (cam.width, cam.height) {
                return Err(Error::DimensionMismatch(
                    "image size differs from its camera".into(),
                ));
            }
        }
        Ok(Renderer {
            images,
            cameras,
            sigma,
            residual: images.iter().map(|i| vec![0.0; i.values.len()]).collect(),
        })
    }

    /// Fill `residual = model - image` and return `sum residual^2`.
    pub(crate) fn energy(&mut self, positions: &[Vec3], intensities: &[f64]) -> f64 {
        let mut total = 0.0;
        for (k, cam) in self.cameras.iter().enumerate() {
            let img = &self.images[k];
            let res = &mut self.residual[k];
            for (r, &v) in res.iter_mut().zip(&img.values) {
                *r = -v;
            }
            for (p, &c) in positions.iter().zip(intensities) {
                if c == 0.0 {
                    continue;
                }
                crate::geometry::splat_blob(
                    res,
                    img.width,
                    img.height,
                    &cam.project(p),
                    c,
                    self.sigma,
                );
            }
            total += res.iter().map(|r| r * r).sum::<f64>();
        }
        total
    }

    /// Gradients at the state of the last `energy` call.
    pub(crate) fn gradients(
        &self,
        positions: &[Vec3],
        intensities: &[f64],
        grad_p: &mut [Vec3],
        grad_c: &mut [f64],
    ) {
        let s2 = self.sigma * self.sigma;
        let r2 = 9.0 * s2;
        grad_p.iter_mut().for_each(|g| *g = Vec3::zeros());
        grad_c.iter_mut().for_each(|g| *g = 0.0);
        for (k, cam) in self.cameras.iter().enumerate() {
            let (w, h) = (cam.width, cam.height);
            let res = &self.residual[k];
            let a = cam.linear();
            for (l, (p, &c)) in positions.iter().zip(intensities).enumerate() {
                let mu = cam.project(p);
                let Some((x0, x1, y0, y1)) = blob_window(&mu, self.sigma, w, h) else {
                    continue;
                };
                let mut dc = 0.0;
                let mut dmu = Vec2::zeros();
                for y in y0..=y1 {
                    let dy = y as f64 - mu.y;
                    for x in x0..=x1 {
                        let dx = x as f64 - mu.x;
                        let d2 = dx * dx + dy * dy;
                        if d2 >= r2 {
                            continue;
                        }
                        let g = blob(d2, self.sigma);
                        let rg = res[y * w + x] * g;
                        dc += rg;
                        dmu += Vec2::new(dx, dy) * rg;
                    }
                }
                grad_c[l] += 2.0 * dc;
                if c != 0.0 {
                    // d G / d mu = G * 2 (x - mu) / sigma^2
                    grad_p[l] += a.transpose() * (dmu * (4.0 * c / s2));
                }
            }
        }
    }
}

/// Data energy and analytic gradients with respect to positions and intensities.
pub fn energy_data(
    state: &IprState,
    images: &[Image],
    cameras: &[CameraModel],
    sigma: f64,
) -> Result<(f64, Vec<Vec3>, Vec<f64>)> {
    let mut r = Renderer::new(images, cameras, sigma)?;
    let e = r.energy(&state.positions, &state.intensities);
    let mut gp = vec![Vec3::zeros(); state.len()];
    let mut gc = vec![0.0; state.len()];
    r.gradients(&state.positions, &state.intensities, &mut gp, &mut gc);
    Ok((e, gp, gc))
}

/// Residual images `I_k - render(particles)`, not clamped.
pub fn residual_images(
    images: &[Image],
    positions: &[Vec3],
    intensities: &[f64],
    cameras: &[CameraModel],
    sigma: f64,
) -> Result<Vec<Image>> {
    let mut r = Renderer::new(images, cameras, sigma)?;
    r.energy(positions, intensities);
    Ok(images
        .iter()
        .zip(&r.residual)
        .map(|(img, res)| Image {
            width: img.width,
            height: img.height,
            values: res.iter().map(|v| -v).collect(),
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IpalmOptions {
    pub eta: f64,
    pub sigma: f64,
    pub n_inner: usize,
    pub tau_inertia: f64,
}

/// One accepted block step, for inspection in tests.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockStep {
    pub block: char,
    pub lipschitz: f64,
    pub energy_before: f64,
    pub energy_after: f64,
    /// Right-hand side of the descent-lemma test that accepted the step.
    pub bound: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct IpalmTrace {
    pub steps: Vec<BlockStep>,
    /// `E_data + eta * #active` after each full iteration.
    pub energies: Vec<f64>,
}

const MAX_BACKTRACK: usize = 60;

/// Inertial PALM on `E_data + eta |c|_0` subject to `c >= 0`. Particles whose
/// intensity the prox sets to zero stay deleted for the rest of the call and
/// are removed at the end. The lowest-energy iterate is returned.
pub fn ipalm_minimize(
    state: &mut IprState,
    images: &[Image],
    cameras: &[CameraModel],
    opts: &IpalmOptions,
) -> Result<IpalmTrace> {
    let n = state.len();
    let mut trace = IpalmTrace::default();
    let mut r = Renderer::new(images, cameras, opts.sigma)?;
    let mut gp = vec![Vec3::zeros(); n];
    let mut gc = vec![0.0; n];
    let mut p_hat = vec![Vec3::zeros(); n];
    let mut p_new = vec![Vec3::zeros(); n];
    let mut c_hat = vec![0.0; n];
    let mut c_new = vec![0.0; n];
    let total = |e: f64, c: &[f64]| e + opts.eta * c.iter().filter(|&&v| v != 0.0).count() as f64;

    let e0 = r.energy(&state.positions, &state.intensities);
    let mut best = (
        total(e0, &state.intensities),
        state.positions.clone(),
        state.intensities.clone(),
    );
    let tau = opts.tau_inertia;

    for _ in 0..opts.n_inner {
        // position block
        for l in 0..n {
            p_hat[l] = if state.intensities[l] != 0.0 {
                state.positions[l] + (state.positions[l] - state.prev_positions[l]) * tau
            } else {
                state.positions[l]
            };
        }
        let e_hat = r.energy(&p_hat, &state.intensities);
        r.gradients(&p_hat, &state.intensities, &mut gp, &mut gc);
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACK {
            let inv = 1.0 / state.l_p;
            let mut lin = 0.0;
            let mut quad = 0.0;
            for l in 0..n {
                p_new[l] = p_hat[l] - gp[l] * inv;
                let d = p_new[l] - p_hat[l];
                lin += gp[l].dot(&d);
                quad += d.norm_squared();
            }
            let e_new = r.energy(&p_new, &state.intensities);
            let bound = e_hat + lin + 0.5 * state.l_p * quad;
            if !e_new.is_finite() || !bound.is_finite() {
                return Err(Error::NonFinite("IPR energy"));
            }
            if e_new <= bound {
                accepted = Some(BlockStep {
                    block: 'p',
                    lipschitz: state.l_p,
                    energy_before: e_hat,
                    energy_after: e_new,
                    bound,
                });
                break;
            }
            state.l_p *= 2.0;
        }
        match accepted {
            Some(step) => {
                trace.steps.push(step);
                std::mem::swap(&mut state.prev_positions, &mut state.positions);
                state.positions.copy_from_slice(&p_new);
                state.l_p = (state.l_p * 0.5).max(1e-12);
            }
            None => state.prev_positions.copy_from_slice(&state.positions),
        }

        // intensity block
        for l in 0..n {
            c_hat[l] = if state.intensities[l] != 0.0 {
                state.intensities[l] + (state.intensities[l] - state.prev_intensities[l]) * tau
            } else {
                0.0
            };
        }
        let e_hat = r.energy(&state.positions, &c_hat);
        r.gradients(&state.positions, &c_hat, &mut gp, &mut gc);
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACK {
            let t = state.l_c;
            let mut lin = 0.0;
            let mut quad = 0.0;
            for l in 0..n {
                c_new[l] = if state.intensities[l] != 0.0 {
                    prox_sparsity(c_hat[l] - gc[l] / t, t, opts.eta)
                } else {
                    0.0
                };
                let d = c_new[l] - c_hat[l];
                lin += gc[l] * d;
                quad += d * d;
            }
            let e_new = r.energy(&state.positions, &c_new);
            let bound = e_hat + lin + 0.5 * t * quad;
            if !e_new.is_finite() || !bound.is_finite() {
                return Err(Error::NonFinite("IPR energy"));
            }
            if e_new <= bound {
                accepted = Some((
                    BlockStep {
                        block: 'c',
                        lipschitz: t,
                        energy_before: e_hat,
                        energy_after: e_new,
                        bound,
                    },
                    e_new,
                ));
                break;
            }
            state.l_c *= 2.0;
        }
        let e_now = match accepted {
            Some((step, e_new)) => {
                trace.steps.push(step);
                std::mem::swap(&mut state.prev_intensities, &mut state.intensities);
                state.intensities.copy_from_slice(&c_new);
                state.l_c = (state.l_c * 0.5).max(1e-12);
                e_new
            }
            None => {
                state.prev_intensities.copy_from_slice(&state.intensities);
                r.energy(&state.positions, &state.intensities)
            }
        };
        // a deleted particle stays deleted, including its inertia
        for l in 0..n {
            if state.intensities[l] == 0.0 {
                state.prev_intensities[l] = 0.0;
            }
        }
        let e_total = total(e_now, &state.intensities);
        trace.energies.push(e_total);
        if e_total <= best.0 {
            best = (e_total, state.positions.clone(), state.intensities.clone());
        }
    }
    if best.0
        < total(
            r.energy(&state.positions, &state.intensities),
            &state.intensities,
        )
    {
        state.positions = best.1;
        state.intensities = best.2;
        state.prev_positions.copy_from_slice(&state.positions);
        state.prev_intensities.copy_from_slice(&state.intensities);
    }
    state.compact();
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{render_particles, Domain, Particle, ParticleSet};

    fn rig() -> (Domain, Vec<CameraModel>) {
        let domain = Domain::new(24, 20, 16).unwrap();
        let cams = crate::synth::camera_rig(&domain, 35.0, 18.0, 40, 34).unwrap();
        (domain, cams)
    }

    #[test]
    fn prox_cases() {
        assert_eq!(prox_sparsity(-0.5, 1.0, 1.0), 0.0);
        assert_eq!(prox_sparsity(2.0, 1.0, 1.0), 2.0);
        assert_eq!(prox_sparsity(1.0, 1.0, 1.0), 0.0);
    }

    #[test]
    fn perfect_state_is_stationary() {
        let (_, cams) = rig();
        let set = ParticleSet::new(
            vec![
                Particle::new(Vec3::new(8.2, 9.1, 7.7), 0.8),
                Particle::new(Vec3::new(15.6, 11.3, 9.4), 0.5),
            ],
            0,
        );
        let imgs: Vec<Image> = cams
            .iter()
            .map(|c| render_particles(&set, c, 1.0))
            .collect();
        let mut st = IprState::new(set.positions(), vec![0.8, 0.5]);
        let (e, gp, gc) = energy_data(&st, &imgs, &cams, 1.0).unwrap();
        assert!(e < 1e-20);
        assert!(gp.iter().all(|g| g.norm() < 1e-9) && gc.iter().all(|g| g.abs() < 1e-9));
        let before = st.clone();
        let opts = IpalmOptions {
            eta: 0.01,
            sigma: 1.0,
            n_inner: 10,
            tau_inertia: 1.0 / 2f64.sqrt(),
        };
        let trace = ipalm_minimize(&mut st, &imgs, &cams, &opts).unwrap();
        for (a, b) in st.positions.iter().zip(&before.positions) {
            assert!((a - b).norm() < 1e-8);
        }
        for (a, b) in st.intensities.iter().zip(&before.intensities) {
            assert!((a - b).abs() < 1e-8);
        }
        assert!(trace.energies.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    }

    #[test]
    fn lone_particle_on_blank_images_is_deleted() {
        let (_, cams) = rig();
        let imgs: Vec<Image> = cams
            .iter()
            .map(|c| Image::zeros(c.width, c.height))
            .collect();
        let mut st = IprState::new(vec![Vec3::new(12.0, 10.0, 8.0)], vec![0.3]);
        let opts = IpalmOptions {
            eta: 1e-3,
            sigma: 1.0,
            n_inner: 20,
            tau_inertia: 1.0 / 2f64.sqrt(),
        };
        let trace = ipalm_minimize(&mut st, &imgs, &cams, &opts).unwrap();
        assert!(st.is_empty());
        for s in &trace.steps {
            assert!(s.energy_after <= s.bound);
        }
    }

    #[test]
    fn energy_is_quadratic_in_intensity() {
        let (_, cams) = rig();
        let imgs: Vec<Image> = cams
            .iter()
            .map(|c| Image::zeros(c.width, c.height))
            .collect();
        let st = IprState::new(vec![Vec3::new(12.3, 9.8, 7.1)], vec![0.4]);
        let st2 = IprState::new(vec![Vec3::new(12.3, 9.8, 7.1)], vec![0.8]);
        let e1 = energy_data(&st, &imgs, &cams, 1.0).unwrap().0;
        let e2 = energy_data(&st2, &imgs, &cams, 1.0).unwrap().0;
        assert!((e2 - 4.0 * e1).abs() < 1e-12 * e2);
        let res = residual_images(&imgs, &st.positions, &st.intensities, &cams, 1.0).unwrap();
        let blob = render_particles(
            &ParticleSet::new(vec![Particle::new(st.positions[0], 0.4)], 0),
            &cams[0],
            1.0,
        );
        for (r, b) in res[0].values.iter().zip(&blob.values) {
            assert!((r + b).abs() < 1e-15);
        }
    }
}
