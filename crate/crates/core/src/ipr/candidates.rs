//! Residual-image peaks and their multi-view triangulation into candidate
//! particles.

use nalgebra::{Matrix3, Vector3};

use crate::geometry::{clip_line_to_box, CameraModel, Domain, Image, Vec2, Vec3};
use crate::subpixel::{fit_axis, SubpixelFit};

/// Maxima over the 8-neighbourhood above `theta` (ties: the smaller linear
/// index wins), refined per axis where both neighbours exist.
pub fn detect_peaks_2d_with(image: &Image, theta: f64, fit: SubpixelFit) -> Vec<Vec2> {
    let (w, h) = (image.width, image.height);
    let v = &image.values;
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let idx = y * w + x;
            let f0 = v[idx];
            if !(f0 > theta) {
                continue;
            }
            let mut is_peak = true;
            'scan: for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let (a, b) = (x as i64 + dx, y as i64 + dy);
                    if a < 0 || b < 0 || a >= w as i64 || b >= h as i64 {
                        continue;
                    }
                    let n = b as usize * w + a as usize;
                    if v[n] > f0 || (v[n] == f0 && n < idx) {
                        is_peak = false;
                        break 'scan;
                    }
                }
            }
            if !is_peak {
                continue;
            }
            let mut p = Vec2::new(x as f64, y as f64);
            if x > 0 && x + 1 < w {
                p.x += fit_axis(v[idx - 1], f0, v[idx + 1], fit).offset;
            }
            if y > 0 && y + 1 < h {
                p.y += fit_axis(v[idx - w], f0, v[idx + w], fit).offset;
            }
            out.push(p);
        }
    }
    out
}

pub fn detect_peaks_2d(image: &Image, theta: f64) -> Vec<Vec2> {
    detect_peaks_2d_with(image, theta, SubpixelFit::default())
}

/// `I K / (K - 1 + m)`: the reference intensity shared among the `m`
/// candidates of one reference peak.
pub fn init_intensity(reference_intensity: f64, k: usize, m: usize) -> f64 {
    reference_intensity * k as f64 / (k as f64 - 1.0 + m as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub position: Vec3,
    /// Index of the peak in the first camera this candidate was built from.
    pub reference: usize,
    /// Number of accepted candidates sharing that reference peak.
    pub m: usize,
    /// Largest reprojection distance over all views, in pixels.
    pub reprojection_error: f64,
    /// Peak index used in each camera.
    pub peaks: [usize; MAX_CAMERAS],
}

pub const MAX_CAMERAS: usize = 8;

/// Linear least squares over `sum_k |A_k X + t_k - q_k|^2`.
pub fn triangulate(cameras: &[CameraModel], pixels: &[Vec2]) -> Option<Vec3> {
    let mut ata = Matrix3::zeros();
    let mut atb = Vector3::zeros();
    for (cam, q) in cameras.iter().zip(pixels) {
        let a = cam.linear();
        ata += a.transpose() * a;
        atb += a.transpose() * (q - cam.translation());
    }
    ata.cholesky().map(|c| c.solve(&atb))
}

pub fn reprojection_error(cameras: &[CameraModel], pixels: &[Vec2], x: &Vec3) -> f64 {
    cameras
        .iter()
        .zip(pixels)
        .map(|(c, q)| (c.project(x) - q).norm())
        .fold(0.0, f64::max)
}

fn point_segment_distance(p: &Vec2, a: &Vec2, b: &Vec2) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    let t = if len2 > 0.0 {
        ((p - a).dot(&ab) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (p - (a + ab * t)).norm()
}

/// Uniform bucket grid over one camera's peaks.
struct PeakGrid<'a> {
    peaks: &'a [Vec2],
    cell: f64,
    nx: usize,
    ny: usize,
    start: Vec<usize>,
    items: Vec<usize>,
}

impl<'a> PeakGrid<'a> {
    fn new(peaks: &'a [Vec2], width: usize, height: usize) -> Self {
        let cell = 4.0;
        let nx = (width as f64 / cell).ceil().max(1.0) as usize + 2;
        let ny = (height as f64 / cell).ceil().max(1.0) as usize + 2;
        let mut counts = vec![0usize; nx * ny + 1];
        let cells: Vec<usize> = peaks
            .iter()
            .map(|p| {
                let cx = ((p.x / cell).floor() as i64 + 1).clamp(0, nx as i64 - 1) as usize;
                let cy = ((p.y / cell).floor() as i64 + 1).clamp(0, ny as i64 - 1) as usize;
                cy * nx + cx
            })
            .collect();
        for &c in &cells {
            counts[c + 1] += 1;
        }
        for i in 0..nx * ny {
            counts[i + 1] += counts[i];
        }
        let mut fill = counts.clone();
        let mut items = vec![0; peaks.len()];
        for (i, &c) in cells.iter().enumerate() {
            items[fill[c]] = i;
            fill[c] += 1;
        }
        PeakGrid {
            peaks,
            cell,
            nx,
            ny,
            start: counts,
            items,
        }
    }

    /// Peaks whose bucket overlaps `[lo, hi]`, ascending index order.
    fn in_box(&self, lo: Vec2, hi: Vec2, out: &mut Vec<usize>) {
        out.clear();
        let ix =
            |v: f64, n: usize| ((v / self.cell).floor() as i64 + 1).clamp(0, n as i64 - 1) as usize;
        let (x0, x1) = (ix(lo.x, self.nx), ix(hi.x, self.nx));
        let (y0, y1) = (ix(lo.y, self.ny), ix(hi.y, self.ny));
        for cy in y0..=y1 {
            for cx in x0..=x1 {
                let c = cy * self.nx + cx;
                out.extend_from_slice(&self.items[self.start[c]..self.start[c + 1]]);
            }
        }
        out.sort_unstable();
    }

    fn near_segment(&self, a: &Vec2, b: &Vec2, eps: f64, out: &mut Vec<usize>) {
        let lo = Vec2::new(a.x.min(b.x) - eps, a.y.min(b.y) - eps);
        let hi = Vec2::new(a.x.max(b.x) + eps, a.y.max(b.y) + eps);
        self.in_box(lo, hi, out);
        out.retain(|&i| point_segment_distance(&self.peaks[i], a, b) < eps);
    }
}

/// Upper bound on constellations explored per reference peak.
const MAX_CONSTELLATIONS: usize = 4096;

/// For each peak of camera 0, every combination of peaks within `epsilon`
/// of the projected, domain-clipped viewing ray in the other cameras is
/// triangulated; constellations with reprojection error below `epsilon` in
/// all views become candidates. Later cameras are searched near the
/// position predicted by the views chosen so far (radius `3 epsilon`).
pub fn triangulate_candidates(
    peaks_per_camera: &[Vec<Vec2>],
    cameras: &[CameraModel],
    domain: &Domain,
    epsilon: f64,
) -> Vec<Candidate> {
    let k = cameras.len();
    if k < 2 || k > MAX_CAMERAS || peaks_per_camera.len() != k {
        return Vec::new();
    }
    let grids: Vec<PeakGrid> = (0..k)
        .map(|c| PeakGrid::new(&peaks_per_camera[c], cameras[c].width, cameras[c].height))
        .collect();
    let dir = cameras[0].ray_direction();
    let mut out = Vec::new();
    let mut lists: Vec<Vec<usize>> = vec![Vec::new(); k];
    let mut scratch = Vec::new();
    for (r, q0) in peaks_per_camera[0].iter().enumerate() {
        let origin = cameras[0].back_project(q0);
        let Some((s0, s1)) = clip_line_to_box(&origin, &dir, domain) else {
            continue;
        };
        let (e0, e1) = (origin + dir * s0, origin + dir * s1);
        let mut empty = false;
        for c in 1..k {
            let (a, b) = (cameras[c].project(&e0), cameras[c].project(&e1));
            let mut l = std::mem::take(&mut lists[c]);
            grids[c].near_segment(&a, &b, epsilon, &mut l);
            empty |= l.is_empty();
            lists[c] = l;
        }
        if empty {
            continue;
        }
        let first = out.len();
        let mut chosen = [0usize; MAX_CAMERAS];
        let mut pixels = [Vec2::zeros(); MAX_CAMERAS];
        pixels[0] = *q0;
        chosen[0] = r;
        let mut budget = MAX_CONSTELLATIONS;
        extend(
            1,
            &mut chosen,
            &mut pixels,
            &lists,
            &grids,
            cameras,
            epsilon,
            &mut budget,
            &mut scratch,
            &mut |pos, err, chosen| {
                out.push(Candidate {
                    position: pos,
                    reference: r,
                    m: 0,
                    reprojection_error: err,
                    peaks: *chosen,
                })
            },
        );
        let m = out.len() - first;
        for cand in &mut out[first..] {
            cand.m = m;
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn extend(
    level: usize,
    chosen: &mut [usize; MAX_CAMERAS],
    pixels: &mut [Vec2; MAX_CAMERAS],
    lists: &[Vec<usize>],
    grids: &[PeakGrid],
    cameras: &[CameraModel],
    eps: f64,
    budget: &mut usize,
    scratch: &mut Vec<usize>,
    emit: &mut dyn FnMut(Vec3, f64, &[usize; MAX_CAMERAS]),
) {
    let k = cameras.len();
    if level == k {
        if *budget == 0 {
            return;
        }
        *budget -= 1;
        if let Some(x) = triangulate(cameras, &pixels[..k]) {
            let err = reprojection_error(cameras, &pixels[..k], &x);
            if err < eps {
                emit(x, err, chosen);
            }
        }
        return;
    }
    let options: Vec<usize> = if level >= 2 {
        // views chosen so far pin the point; look near its projection
        let Some(x) = triangulate(&cameras[..level], &pixels[..level]) else {
            return;
        };
        if reprojection_error(&cameras[..level], &pixels[..level], &x) >= eps {
            return;
        }
        let p = cameras[level].project(&x);
        let rad = 3.0 * eps;
        grids[level].in_box(p - Vec2::new(rad, rad), p + Vec2::new(rad, rad), scratch);
        let near: Vec<usize> = scratch
            .iter()
            .copied()
            .filter(|&i| (grids[level].peaks[i] - p).norm() < rad)
            .collect();
        lists[level]
            .iter()
            .copied()
            .filter(|i| near.binary_search(i).is_ok())
            .collect()
    } else {
        lists[level].clone()
    };
    for i in options {
        chosen[level] = i;
        pixels[level] = grids[level].peaks[i];
        extend(
            level + 1,
            chosen,
            pixels,
            lists,
            grids,
            cameras,
            eps,
            budget,
            scratch,
            emit,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{render_particles, Particle, ParticleSet};
    use crate::synth::camera_rig;

    fn rig() -> (Domain, Vec<CameraModel>) {
        let d = Domain::new(40, 30, 20).unwrap();
        let cams = camera_rig(&d, 35.0, 18.0, 64, 48).unwrap();
        (d, cams)
    }

    #[test]
    fn blob_peak_is_located() {
        let mut img = Image::zeros(40, 40);
        crate::geometry::splat_blob(&mut img.values, 40, 40, &Vec2::new(10.4, 20.0), 1.0, 1.0);
        let p = detect_peaks_2d(&img, 0.04);
        assert_eq!(p.len(), 1);
        assert!((p[0] - Vec2::new(10.4, 20.0)).norm() < 0.05);
        assert!(detect_peaks_2d(&img, 1.5).is_empty());
        assert!(detect_peaks_2d(&Image::zeros(8, 8), 0.04).is_empty());
    }

    #[test]
    fn intensity_sharing() {
        assert_eq!(init_intensity(0.8, 4, 1), 0.8);
        assert!((init_intensity(0.8, 4, 3) - 0.8 * 4.0 / 6.0).abs() < 1e-15);
        assert_eq!(init_intensity(0.0, 4, 2), 0.0);
    }

    #[test]
    fn exact_projections_give_one_candidate() {
        let (d, cams) = rig();
        let x = Vec3::new(17.3, 12.6, 9.1);
        let peaks: Vec<Vec<Vec2>> = cams.iter().map(|c| vec![c.project(&x)]).collect();
        let cands = triangulate_candidates(&peaks, &cams, &d, 0.8);
        assert_eq!(cands.len(), 1);
        assert!((cands[0].position - x).norm() < 1e-6);
        assert_eq!(cands[0].m, 1);

        let mut missing = peaks.clone();
        missing[2].clear();
        assert!(triangulate_candidates(&missing, &cams, &d, 0.8).is_empty());
    }

    #[test]
    fn two_particles_on_one_reference_ray() {
        let (d, cams) = rig();
        let a = Vec3::new(17.3, 12.6, 4.1);
        let b = a + cams[0].ray_direction() * 9.0;
        assert!((cams[0].project(&a) - cams[0].project(&b)).norm() < 1e-9);
        let mut peaks: Vec<Vec<Vec2>> = cams
            .iter()
            .map(|c| vec![c.project(&a), c.project(&b)])
            .collect();
        peaks[0].truncate(1);
        let eps = 0.8;
        let cands = triangulate_candidates(&peaks, &cams, &d, eps);

        // exhaustive pairing oracle
        let mut oracle = Vec::new();
        for i in 0..2 {
            for j in 0..2 {
                for l in 0..2 {
                    let px = [peaks[0][0], peaks[1][i], peaks[2][j], peaks[3][l]];
                    let x = triangulate(&cams, &px).unwrap();
                    if reprojection_error(&cams, &px, &x) < eps {
                        oracle.push(x);
                    }
                }
            }
        }
        assert_eq!(oracle.len(), 2);
        assert_eq!(cands.len(), 2);
        assert!(cands.iter().all(|c| c.m == 2));
        for (c, o) in cands.iter().zip(&oracle) {
            assert!((c.position - o).norm() < 1e-9);
        }
        assert!((cands[0].position - a).norm() < 1e-6 || (cands[0].position - b).norm() < 1e-6);
    }

    #[test]
    fn rendered_particle_round_trip() {
        let (d, cams) = rig();
        let x = Vec3::new(20.2, 14.7, 10.4);
        let set = ParticleSet::new(vec![Particle::new(x, 0.7)], 0);
        let peaks: Vec<Vec<Vec2>> = cams
            .iter()
            .map(|c| detect_peaks_2d(&render_particles(&set, c, 1.0), 0.04))
            .collect();
        let cands = triangulate_candidates(&peaks, &cams, &d, 0.8);
        assert_eq!(cands.len(), 1);
        assert!((cands[0].position - x).norm() < 0.1);
    }
}
