//! Property checks shared by the proptest target and the acceptance runner.
//! Each check drives its own proptest runner and returns the first
//! counterexample as an error string.

use nalgebra::Matrix2x4;
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};

use pivflow::descriptor::{
    evaluate_scaled, ncc, DescriptorLayout, ParticleIndex, Workspace, SPLAT_FALLOFF,
};
use pivflow::eval::match_particles;
use pivflow::flow::{divergence, divergence_adjoint, gradient, gradient_adjoint, Grad};
use pivflow::geometry::{
    render_particles, CameraModel, Domain, Image, Particle, ParticleSet, Vec3,
};
use pivflow::ipr::{energy_data, prox_sparsity, IprState};
use pivflow::synth::camera_rig;

pub const ADJOINT_TOL: f64 = 1e-10;
pub const PROX_CASES: u32 = 1000;
pub const FD_REL_TOL: f64 = 1e-4;

fn run<S: Strategy>(
    cases: u32,
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<(), String> {
    let mut runner = TestRunner::new(Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    });
    runner.run(&strategy, test).map_err(|e| e.to_string())
}

fn dims() -> impl Strategy<Value = [usize; 3]> {
    (1usize..7, 1usize..7, 1usize..7).prop_map(|(a, b, c)| [a, b, c])
}

fn vec3(lo: f64, hi: f64) -> impl Strategy<Value = Vec3> {
    (lo..hi, lo..hi, lo..hi).prop_map(|(x, y, z)| Vec3::new(x, y, z))
}

fn field(n: usize) -> impl Strategy<Value = Vec<Vec3>> {
    prop::collection::vec(vec3(-2.0, 2.0), n)
}

fn close(a: f64, b: f64, scale: f64, tol: f64) -> Result<(), TestCaseError> {
    prop_assert!(
        (a - b).abs() <= tol * scale.max(1.0),
        "{} vs {} (scale {})",
        a,
        b,
        scale
    );
    Ok(())
}

/// `<grad v, y> = <v, grad^T y>` and the same for the divergence.
pub fn adjoint_identities(cases: u32) -> Result<(), String> {
    let s = dims().prop_flat_map(|d| {
        let n = d.iter().product::<usize>();
        (
            Just(d),
            field(n),
            field(3 * n),
            prop::collection::vec(-2.0..2.0f64, n),
        )
    });
    run(cases, s, |(d, v, yflat, z)| {
        let y: Vec<Grad> = yflat.chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
        let gv = gradient(d, &v);
        let lhs: f64 = gv
            .iter()
            .zip(&y)
            .map(|(a, b)| (0..3).map(|r| a[r].dot(&b[r])).sum::<f64>())
            .sum();
        let gty = gradient_adjoint(d, &y);
        let rhs: f64 = v.iter().zip(&gty).map(|(a, b)| a.dot(b)).sum();
        let scale = gv.iter().flatten().map(|a| a.norm()).sum::<f64>() * 2.0 * 3f64.sqrt();
        close(lhs, rhs, scale, ADJOINT_TOL)?;

        let dv = divergence(d, &v);
        let lhs: f64 = dv.iter().zip(&z).map(|(a, b)| a * b).sum();
        let dtz = divergence_adjoint(d, &z);
        let rhs: f64 = v.iter().zip(&dtz).map(|(a, b)| a.dot(b)).sum();
        close(
            lhs,
            rhs,
            dv.iter().map(|x| x.abs()).sum::<f64>() * 2.0,
            ADJOINT_TOL,
        )
    })
}

/// Direct evaluation: every particle inside the radius goes to its `k`
/// nearest vertices found by a full scan, ties to the smaller index.
pub fn brute_force_descriptor(
    center: &Vec3,
    particles: &[Particle],
    layout: &DescriptorLayout,
    scale: f64,
) -> Vec<f64> {
    let mut out = vec![0.0; layout.len()];
    for p in particles {
        let d = (p.position - center) * scale;
        if d.norm_squared() >= layout.radius * layout.radius {
            continue;
        }
        let mut order: Vec<(f64, usize)> = layout
            .vertices
            .iter()
            .enumerate()
            .map(|(h, v)| ((d - v).norm_squared(), h))
            .collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut near: Vec<usize> = order[..layout.splat_k].iter().map(|e| e.1).collect();
        near.sort_unstable();
        let w: Vec<f64> = near
            .iter()
            .map(|&h| (-(d - layout.vertices[h]).norm() / SPLAT_FALLOFF).exp())
            .collect();
        let total: f64 = w.iter().sum();
        for (&h, wi) in near.iter().zip(&w) {
            out[h] += p.intensity * (wi / total) * layout.center_weights[h];
        }
    }
    out
}

fn cloud(max: usize, half: f64) -> impl Strategy<Value = Vec<Particle>> {
    prop::collection::vec((vec3(-half, half), 0.1..1.0f64), 0..max)
        .prop_map(|v| v.into_iter().map(|(p, c)| Particle::new(p, c)).collect())
}

/// Indexed evaluation equals the brute-force oracle bit for bit.
pub fn descriptor_brute_force(cases: u32) -> Result<(), String> {
    let layout = DescriptorLayout::new();
    run(
        cases,
        (
            cloud(60, 13.0),
            vec3(-2.0, 2.0),
            prop_oneof![Just(1.0), 0.6..1.0f64],
        ),
        |(ps, c, scale)| {
            let set = ParticleSet::new(ps.clone(), 0);
            let mut out = vec![0.0; layout.len()];
            evaluate_scaled(
                &c,
                &ParticleIndex::new(&set),
                &layout,
                scale,
                &mut Workspace::default(),
                &mut out,
            );
            let want = brute_force_descriptor(&c, &ps, &layout, scale);
            prop_assert_eq!(out, want);
            Ok(())
        },
    )
}

fn dyadic(v: i64, denom: f64) -> f64 {
    v as f64 / denom
}

/// Shifting particles and center together leaves the descriptor unchanged.
/// Coordinates are dyadic so the shifted offsets are exactly the same.
pub fn descriptor_translation(cases: u32) -> Result<(), String> {
    let layout = DescriptorLayout::new();
    let pt = (
        -12_000i64..12_000,
        -12_000i64..12_000,
        -12_000i64..12_000,
        1i64..1024,
    );
    let s = (
        prop::collection::vec(pt, 1..50),
        (-800i64..800, -800i64..800, -800i64..800),
    );
    run(cases, s, |(raw, t)| {
        let ps: Vec<Particle> = raw
            .iter()
            .map(|&(x, y, z, c)| {
                Particle::new(
                    Vec3::new(dyadic(x, 1024.0), dyadic(y, 1024.0), dyadic(z, 1024.0)),
                    dyadic(c, 1024.0),
                )
            })
            .collect();
        let shift = Vec3::new(dyadic(t.0, 8.0), dyadic(t.1, 8.0), dyadic(t.2, 8.0));
        let moved: Vec<Particle> = ps
            .iter()
            .map(|p| Particle::new(p.position + shift, p.intensity))
            .collect();
        let eval = |v: Vec<Particle>, c: Vec3| {
            let mut out = vec![0.0; layout.len()];
            let set = ParticleSet::new(v, 0);
            evaluate_scaled(
                &c,
                &ParticleIndex::new(&set),
                &layout,
                1.0,
                &mut Workspace::default(),
                &mut out,
            );
            out
        };
        let c = Vec3::new(0.25, -0.5, 0.125);
        prop_assert_eq!(eval(ps, c), eval(moved, c + shift));
        Ok(())
    })
}

/// Soft-assignment weights of one particle sum to one before the vertex
/// weighting, and the vertex weights themselves sum to one.
pub fn splat_normalization(cases: u32) -> Result<(), String> {
    let layout = DescriptorLayout::new();
    let total: f64 = layout.center_weights.iter().sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(format!("vertex weights sum to {total}"));
    }
    run(cases, (vec3(-10.5, 10.5), 0.01..5.0f64), |(d, c)| {
        prop_assume!(d.norm() < layout.radius);
        let mut out = vec![0.0; layout.len()];
        let mut scratch = Vec::new();
        layout.splat(&d, c, &mut scratch, &mut out);
        let mass: f64 = out
            .iter()
            .zip(&layout.center_weights)
            .map(|(o, w)| o / w)
            .sum();
        prop_assert!(
            (mass - c).abs() <= 1e-12 * c,
            "mass {} for intensity {}",
            mass,
            c
        );
        prop_assert_eq!(out.iter().filter(|&&v| v > 0.0).count(), layout.splat_k);
        Ok(())
    })
}

/// Correlation lies in [-1, 1], is symmetric and invariant to positive
/// affine changes of either argument.
pub fn ncc_bounds(cases: u32) -> Result<(), String> {
    let s = (1usize..40).prop_flat_map(|n| {
        (
            prop::collection::vec(-5.0..5.0f64, n),
            prop::collection::vec(-5.0..5.0f64, n),
            0.1..10.0f64,
            -3.0..3.0f64,
        )
    });
    run(cases, s, |(a, b, alpha, beta)| {
        let r = ncc(&a, &b);
        prop_assert!((-1.0..=1.0).contains(&r));
        prop_assert!((r - ncc(&b, &a)).abs() < 1e-12);
        let a2: Vec<f64> = a.iter().map(|x| alpha * x + beta).collect();
        prop_assert!((r - ncc(&a2, &b)).abs() < 1e-9);
        let spread = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - a.iter().cloned().fold(f64::INFINITY, f64::min);
        if spread > 1e-6 {
            prop_assert!((ncc(&a, &a) - 1.0).abs() < 1e-12);
            let neg: Vec<f64> = a.iter().map(|x| -x).collect();
            prop_assert!((ncc(&a, &neg) + 1.0).abs() < 1e-12);
        }
        Ok(())
    })
}

fn prox_objective(c: f64, c_bar: f64, t: f64, eta: f64) -> f64 {
    if c < 0.0 {
        return f64::INFINITY;
    }
    let l0 = if c != 0.0 { eta } else { 0.0 };
    l0 + 0.5 * t * (c - c_bar) * (c - c_bar)
}

/// The closed-form prox is never beaten by a grid search over `[0, 4]`
/// that includes zero and the unconstrained minimizer.
pub fn prox_grid_search(cases: u32) -> Result<(), String> {
    run(
        cases,
        (-2.0..3.0f64, 0.05..20.0f64, 0.0..2.0f64),
        |(c_bar, t, eta)| {
            let p = prox_sparsity(c_bar, t, eta);
            let fp = prox_objective(p, c_bar, t, eta);
            let mut best =
                prox_objective(0.0, c_bar, t, eta).min(prox_objective(c_bar, c_bar, t, eta));
            for i in 0..=4000 {
                best = best.min(prox_objective(i as f64 * 1e-3, c_bar, t, eta));
            }
            prop_assert!(
                fp <= best + 1e-12,
                "prox({}, {}, {}) = {} scores {} > grid {}",
                c_bar,
                t,
                eta,
                p,
                fp,
                best
            );
            Ok(())
        },
    )
}

fn fd_scene() -> (Vec<CameraModel>, Vec<Image>) {
    let d = Domain::new(24, 20, 16).unwrap();
    let cams = camera_rig(&d, 35.0, 18.0, 40, 34).unwrap();
    let truth = ParticleSet::new(
        vec![
            Particle::new(Vec3::new(9.3, 8.1, 7.7), 0.8),
            Particle::new(Vec3::new(14.6, 11.2, 6.4), 0.5),
            Particle::new(Vec3::new(11.9, 9.7, 9.2), 0.65),
        ],
        0,
    );
    let images = cams
        .iter()
        .map(|c| render_particles(&truth, c, 1.0))
        .collect();
    (cams, images)
}

/// Analytic gradients of the data energy against central differences, for
/// states perturbed around the rendered truth.
pub fn ipr_gradients(cases: u32) -> Result<(), String> {
    let (cams, images) = fd_scene();
    let base = [
        Vec3::new(9.3, 8.1, 7.7),
        Vec3::new(14.6, 11.2, 6.4),
        Vec3::new(11.9, 9.7, 9.2),
    ];
    let s = (
        prop::collection::vec(vec3(-0.7, 0.7), 3),
        prop::collection::vec(0.2..1.2f64, 3),
    );
    run(cases, s, |(dp, cs)| {
        let pos: Vec<Vec3> = base.iter().zip(&dp).map(|(b, d)| b + d).collect();
        let state = IprState::new(pos.clone(), cs.clone());
        let (_, gp, gc) = energy_data(&state, &images, &cams, 1.0).unwrap();
        let energy = |p: &[Vec3], c: &[f64]| {
            energy_data(&IprState::new(p.to_vec(), c.to_vec()), &images, &cams, 1.0)
                .unwrap()
                .0
        };
        let h = 1e-5;
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for l in 0..3 {
            for a in 0..3 {
                let (mut p1, mut p2) = (pos.clone(), pos.clone());
                p1[l][a] += h;
                p2[l][a] -= h;
                numeric.push((energy(&p1, &cs) - energy(&p2, &cs)) / (2.0 * h));
                analytic.push(gp[l][a]);
            }
            let (mut c1, mut c2) = (cs.clone(), cs.clone());
            c1[l] += h;
            c2[l] -= h;
            numeric.push((energy(&pos, &c1) - energy(&pos, &c2)) / (2.0 * h));
            analytic.push(gc[l]);
        }
        let err: f64 = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n) * (a - n))
            .sum::<f64>()
            .sqrt();
        let norm: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        prop_assert!(
            err <= FD_REL_TOL * norm,
            "relative gradient error {}",
            err / norm
        );
        Ok(())
    })
}

fn plane_camera(w: usize, h: usize) -> CameraModel {
    CameraModel::new(Matrix2x4::new(1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0), w, h).unwrap()
}

/// An integer pixel shift of the particles shifts the image, and rendering
/// is linear in the intensities.
pub fn renderer_translation_linearity(cases: u32) -> Result<(), String> {
    let (w, h) = (48, 40);
    let cam = plane_camera(w, h);
    let pt = (40i64..1400, 40i64..1200, 0.1..1.0f64);
    let s = (
        prop::collection::vec(pt, 1..20),
        0i64..6,
        0i64..6,
        0.1..3.0f64,
    );
    run(cases, s, |(raw, sx, sy, alpha)| {
        let ps: Vec<Particle> = raw
            .iter()
            .map(|&(x, y, c)| Particle::new(Vec3::new(dyadic(x, 64.0), dyadic(y, 64.0), 3.0), c))
            .collect();
        let shift = Vec3::new(sx as f64, sy as f64, 0.0);
        let a = render_particles(&ParticleSet::new(ps.clone(), 0), &cam, 1.0);
        let moved: Vec<Particle> = ps
            .iter()
            .map(|p| Particle::new(p.position + shift, p.intensity))
            .collect();
        let b = render_particles(&ParticleSet::new(moved, 0), &cam, 1.0);
        let (sx, sy) = (sx as usize, sy as usize);
        // every blob lies inside both frames, so no clipping at the edges
        for y in 0..h - sy {
            for x in 0..w - sx {
                prop_assert_eq!(a.get(x, y), b.get(x + sx, y + sy));
            }
        }
        let scaled: Vec<Particle> = ps
            .iter()
            .map(|p| Particle::new(p.position, alpha * p.intensity))
            .collect();
        let c = render_particles(&ParticleSet::new(scaled, 0), &cam, 1.0);
        let half = ps.len() / 2;
        let first = render_particles(&ParticleSet::new(ps[..half].to_vec(), 0), &cam, 1.0);
        let second = render_particles(&ParticleSet::new(ps[half..].to_vec(), 0), &cam, 1.0);
        for i in 0..a.values.len() {
            prop_assert!(
                (c.values[i] - alpha * a.values[i]).abs() <= 1e-12 * (1.0 + a.values[i].abs())
            );
            prop_assert!(
                (first.values[i] + second.values[i] - a.values[i]).abs()
                    <= 1e-12 * (1.0 + a.values[i].abs())
            );
        }
        Ok(())
    })
}

/// Swapping the roles of reconstruction and truth swaps ghosts and
/// undetected particles and keeps the mean error.
pub fn match_symmetry(cases: u32) -> Result<(), String> {
    let pts = |n| prop::collection::vec(vec3(0.0, 12.0), 0..n);
    run(cases, (pts(40), pts(40)), |(a, b)| {
        let sa = ParticleSet::new(a.into_iter().map(|p| Particle::new(p, 1.0)).collect(), 0);
        let sb = ParticleSet::new(b.into_iter().map(|p| Particle::new(p, 1.0)).collect(), 0);
        let ab = match_particles(&sa, &sb, 2.0);
        let ba = match_particles(&sb, &sa, 2.0);
        prop_assert_eq!(ab.ghosts, ba.undetected);
        prop_assert_eq!(ab.undetected, ba.ghosts);
        prop_assert!((ab.avg_position_error - ba.avg_position_error).abs() < 1e-12);
        Ok(())
    })
}

/// Every check with its case count, in a fixed order.
#[allow(dead_code)]
pub fn all() -> Vec<(&'static str, Box<dyn Fn() -> Result<(), String>>)> {
    vec![
        ("adjoint identities", Box::new(|| adjoint_identities(256))),
        (
            "descriptor brute force",
            Box::new(|| descriptor_brute_force(128)),
        ),
        (
            "descriptor translation",
            Box::new(|| descriptor_translation(64)),
        ),
        (
            "prox grid search",
            Box::new(|| prox_grid_search(PROX_CASES)),
        ),
        ("ipr gradients", Box::new(|| ipr_gradients(64))),
        ("splat normalization", Box::new(|| splat_normalization(512))),
        ("ncc bounds", Box::new(|| ncc_bounds(512))),
        (
            "renderer translation",
            Box::new(|| renderer_translation_linearity(64)),
        ),
        ("match symmetry", Box::new(|| match_symmetry(256))),
    ]
}
