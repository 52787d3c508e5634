//! Coordinate frames, affine cameras and the particle/image/volume value types.
//!
//! Volume coordinates are in voxels; voxel `(i, j, k)` has its center at the
//! integer point `(i, j, k)`. The domain is the box `[0, N] x [0, M] x [0, L]`.
//! Pixel `(x, y)` samples the continuous image at the integer point `(x, y)`.

use nalgebra::{Matrix2, Matrix2x3, Matrix2x4, Vector2, Vector3};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Vec2 = Vector2<f64>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Particle {
    pub position: Vec3,
    pub intensity: f64,
}

impl Particle {
    pub fn new(position: Vec3, intensity: f64) -> Self {
        Particle {
            position,
            intensity,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParticleSet {
    pub particles: Vec<Particle>,
    pub time_index: i64,
}

impl ParticleSet {
    pub fn new(particles: Vec<Particle>, time_index: i64) -> Self {
        ParticleSet {
            particles,
            time_index,
        }
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn positions(&self) -> Vec<Vec3> {
        self.particles.iter().map(|p| p.position).collect()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Particle> {
        self.particles.iter()
    }
}

/// Cuboid domain `[0, N] x [0, M] x [0, L]` in voxels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Domain {
    pub extents: [usize; 3],
}

impl Domain {
    pub fn new(n: usize, m: usize, l: usize) -> Result<Self> {
        if n == 0 || m == 0 || l == 0 {
            return Err(Error::InvalidArgument(format!(
                "domain extents must be >= 1, got {n}x{m}x{l}"
            )));
        }
        Ok(Domain { extents: [n, m, l] })
    }

    pub fn size(&self) -> Vec3 {
        Vec3::new(
            self.extents[0] as f64,
            self.extents[1] as f64,
            self.extents[2] as f64,
        )
    }

    pub fn center(&self) -> Vec3 {
        self.size() * 0.5
    }

    pub fn voxel_count(&self) -> usize {
        self.extents.iter().product()
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|a| p[a] >= 0.0 && p[a] <= self.extents[a] as f64)
    }

    /// The eight corners of the domain box.
    pub fn corners(&self) -> [Vec3; 8] {
        let s = self.size();
        let mut out = [Vec3::zeros(); 8];
        for (c, corner) in out.iter_mut().enumerate() {
            *corner = Vec3::new(
                if c & 1 != 0 { s.x } else { 0.0 },
                if c & 2 != 0 { s.y } else { 0.0 },
                if c & 4 != 0 { s.z } else { 0.0 },
            );
        }
        out
    }
}

/// Affine camera: pixel = `projection * (x, y, z, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    pub projection: Matrix2x4<f64>,
    pub width: usize,
    pub height: usize,
}

impl CameraModel {
    pub fn new(projection: Matrix2x4<f64>, width: usize, height: usize) -> Result<Self> {
        let linear: Matrix2x3<f64> = projection.fixed_view::<2, 3>(0, 0).into();
        let r0: Vec3 = linear.row(0).transpose();
        let r1: Vec3 = linear.row(1).transpose();
        if r0.cross(&r1).norm() <= 1e-12 * (r0.norm() * r1.norm()).max(1e-300) {
            return Err(Error::InvalidArgument(
                "camera linear part must have rank 2".into(),
            ));
        }
        if !projection.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("camera projection"));
        }
        Ok(CameraModel {
            projection,
            width,
            height,
        })
    }

    /// Orthographic camera rotated by `yaw` about the volume y axis and `pitch`
    /// about the x axis (degrees), looking along +z before rotation, with the
    /// domain center mapped to the image center at `scale` pixels per voxel.
    pub fn orthographic(
        yaw_deg: f64,
        pitch_deg: f64,
        scale: f64,
        domain: &Domain,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let (sy, cy) = yaw_deg.to_radians().sin_cos();
        let (sp, cp) = pitch_deg.to_radians().sin_cos();
        // R = Rx(pitch) * Ry(yaw); image rows are the first two rows of R.
        let ry = nalgebra::Matrix3::new(cy, 0.0, sy, 0.0, 1.0, 0.0, -sy, 0.0, cy);
        let rx = nalgebra::Matrix3::new(1.0, 0.0, 0.0, 0.0, cp, -sp, 0.0, sp, cp);
        let r = rx * ry;
        let linear: Matrix2x3<f64> = r.fixed_view::<2, 3>(0, 0) * scale;
        let image_center = Vec2::new((width as f64 - 1.0) * 0.5, (height as f64 - 1.0) * 0.5);
        let t = image_center - linear * domain.center();
        let mut projection = Matrix2x4::zeros();
        projection.fixed_view_mut::<2, 3>(0, 0).copy_from(&linear);
        projection.set_column(3, &t);
        CameraModel::new(projection, width, height)
    }

    pub fn linear(&self) -> Matrix2x3<f64> {
        self.projection.fixed_view::<2, 3>(0, 0).into()
    }

    pub fn translation(&self) -> Vec2 {
        self.projection.column(3).into()
    }

    /// Unit direction of the viewing rays (null space of the linear part).
    pub fn ray_direction(&self) -> Vec3 {
        let a = self.linear();
        let r0: Vec3 = a.row(0).transpose();
        let r1: Vec3 = a.row(1).transpose();
        r0.cross(&r1).normalize()
    }

    pub fn project(&self, point: &Vec3) -> Vec2 {
        self.linear() * point + self.translation()
    }

    /// Minimum-norm point of the affine preimage of `pixel`.
    pub fn back_project(&self, pixel: &Vec2) -> Vec3 {
        let a = self.linear();
        let aat: Matrix2<f64> = a * a.transpose();
        let rhs = pixel - self.translation();
        // rank 2 is checked at construction
        let w = aat.try_inverse().expect("rank-2 camera") * rhs;
        a.transpose() * w
    }

    pub fn contains_pixel(&self, px: &Vec2) -> bool {
        px.x >= 0.0
            && px.y >= 0.0
            && px.x <= (self.width as f64 - 1.0)
            && px.y <= (self.height as f64 - 1.0)
    }
}

pub fn project(camera: &CameraModel, point: &Vec3) -> Vec2 {
    camera.project(point)
}

/// Clip the parametric line `origin + s * dir` to the domain box (slab test).
pub(crate) fn clip_line_to_box(origin: &Vec3, dir: &Vec3, domain: &Domain) -> Option<(f64, f64)> {
    let size = domain.size();
    let mut s_min = f64::NEG_INFINITY;
    let mut s_max = f64::INFINITY;
    for a in 0..3 {
        if dir[a].abs() < 1e-15 {
            if origin[a] < 0.0 || origin[a] > size[a] {
                return None;
            }
            continue;
        }
        let s0 = (0.0 - origin[a]) / dir[a];
        let s1 = (size[a] - origin[a]) / dir[a];
        let (lo, hi) = if s0 < s1 { (s0, s1) } else { (s1, s0) };
        s_min = s_min.max(lo);
        s_max = s_max.min(hi);
    }
    if s_min > s_max {
        None
    } else {
        Some((s_min, s_max))
    }
}

/// Entry and exit points of the viewing line through `pixel`, ordered along
/// the camera's ray direction.
pub fn ray_through_pixel(
    camera: &CameraModel,
    pixel: Vec2,
    domain: &Domain,
) -> Result<(Vec3, Vec3)> {
    let origin = camera.back_project(&pixel);
    let dir = camera.ray_direction();
    let (s0, s1) = clip_line_to_box(&origin, &dir, domain).ok_or(Error::NoIntersection)?;
    Ok((origin + dir * s0, origin + dir * s1))
}

/// Row-major 2D image, `values[y * width + x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl Image {
    pub fn zeros(width: usize, height: usize) -> Self {
        Image {
            width,
            height,
            values: vec![0.0; width * height],
        }
    }

    pub fn from_values(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "image {}x{} needs {} values, got {}",
                width,
                height,
                width * height,
                values.len()
            )));
        }
        Ok(Image {
            width,
            height,
            values,
        })
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.values[y * self.width + x] = v;
    }

    /// Bilinear sample with zero outside the image.
    pub fn sample(&self, px: &Vec2) -> f64 {
        let x0 = px.x.floor();
        let y0 = px.y.floor();
        let fx = px.x - x0;
        let fy = px.y - y0;
        let mut acc = 0.0;
        for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
            for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
                let x = x0 as i64 + dx;
                let y = y0 as i64 + dy;
                if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
                    acc += wx * wy * self.get(x as usize, y as usize);
                }
            }
        }
        acc
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }
}

/// Dense voxel grid, x fastest: `values[(k * M + j) * N + i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityVolume {
    pub dims: [usize; 3],
    pub values: Vec<f32>,
}

impl IntensityVolume {
    pub fn filled(dims: [usize; 3], value: f32) -> Self {
        IntensityVolume {
            dims,
            values: vec![value; dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn zeros(dims: [usize; 3]) -> Self {
        Self::filled(dims, 0.0)
    }

    pub fn from_values(dims: [usize; 3], values: Vec<f32>) -> Result<Self> {
        let n = dims[0] * dims[1] * dims[2];
        if values.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "volume {:?} needs {} values, got {}",
                dims,
                n,
                values.len()
            )));
        }
        Ok(IntensityVolume { dims, values })
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.dims[1] + j) * self.dims[0] + i
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.values[self.index(i, j, k)]
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let i = idx % self.dims[0];
        let j = (idx / self.dims[0]) % self.dims[1];
        let k = idx / (self.dims[0] * self.dims[1]);
        [i, j, k]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Trilinear sample; zero outside the grid.
    pub fn sample(&self, p: &Vec3) -> f64 {
        let base = [p.x.floor(), p.y.floor(), p.z.floor()];
        let f = [p.x - base[0], p.y - base[1], p.z - base[2]];
        let mut acc = 0.0;
        for c in 0..8 {
            let off = [c & 1, (c >> 1) & 1, (c >> 2) & 1];
            let mut w = 1.0;
            let mut idx = [0usize; 3];
            let mut inside = true;
            for a in 0..3 {
                let v = base[a] as i64 + off[a] as i64;
                if v < 0 || v >= self.dims[a] as i64 {
                    inside = false;
                    break;
                }
                idx[a] = v as usize;
                w *= if off[a] == 1 { f[a] } else { 1.0 - f[a] };
            }
            if inside && w != 0.0 {
                acc += w * self.get(idx[0], idx[1], idx[2]) as f64;
            }
        }
        acc
    }

    /// Deposit `value` onto the 2x2x2 voxels around `p` with trilinear weights.
    pub fn splat_trilinear(&mut self, p: &Vec3, value: f64) {
        let base = [p.x.floor(), p.y.floor(), p.z.floor()];
        let f = [p.x - base[0], p.y - base[1], p.z - base[2]];
        for c in 0..8 {
            let off = [c & 1, (c >> 1) & 1, (c >> 2) & 1];
            let mut w = 1.0;
            let mut idx = [0usize; 3];
            let mut inside = true;
            for a in 0..3 {
                let v = base[a] as i64 + off[a] as i64;
                if v < 0 || v >= self.dims[a] as i64 {
                    inside = false;
                    break;
                }
                idx[a] = v as usize;
                w *= if off[a] == 1 { f[a] } else { 1.0 - f[a] };
            }
            if inside {
                let id = self.index(idx[0], idx[1], idx[2]);
                self.values[id] += (w * value) as f32;
            }
        }
    }
}

/// Unnormalized blob profile `(1/sigma^2) exp(-d^2 / sigma^2)`.
#[inline]
pub fn blob(d2: f64, sigma: f64) -> f64 {
    let s2 = sigma * sigma;
    (-d2 / s2).exp() / s2
}

/// Integer pixel window `[x0, x1] x [y0, y1]` covering the truncation disc.
#[inline]
pub(crate) fn blob_window(
    center: &Vec2,
    sigma: f64,
    width: usize,
    height: usize,
) -> Option<(usize, usize, usize, usize)> {
    let r = 3.0 * sigma;
    let x0 = (center.x - r).ceil().max(0.0);
    let y0 = (center.y - r).ceil().max(0.0);
    let x1 = (center.x + r).floor().min(width as f64 - 1.0);
    let y1 = (center.y + r).floor().min(height as f64 - 1.0);
    if !(x0 <= x1 && y0 <= y1) {
        return None;
    }
    Some((x0 as usize, x1 as usize, y0 as usize, y1 as usize))
}

/// Add one blob of intensity `c` centered at `center` into `values`.
pub(crate) fn splat_blob(
    values: &mut [f64],
    width: usize,
    height: usize,
    center: &Vec2,
    c: f64,
    sigma: f64,
) {
    let Some((x0, x1, y0, y1)) = blob_window(center, sigma, width, height) else {
        return;
    };
    let r2 = 9.0 * sigma * sigma;
    for y in y0..=y1 {
        let dy = y as f64 - center.y;
        let row = y * width;
        for x in x0..=x1 {
            let dx = x as f64 - center.x;
            let d2 = dx * dx + dy * dy;
            if d2 < r2 {
                values[row + x] += c * blob(d2, sigma);
            }
        }
    }
}

/// Render particles as truncated Gaussian blobs (radius 3 sigma, additive).
pub fn render_particles(particles: &ParticleSet, camera: &CameraModel, sigma: f64) -> Image {
    let mut img = Image::zeros(camera.width, camera.height);
    for p in &particles.particles {
        let center = camera.project(&p.position);
        splat_blob(
            &mut img.values,
            img.width,
            img.height,
            &center,
            p.intensity,
            sigma,
        );
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn identity_camera(w: usize, h: usize) -> CameraModel {
        CameraModel::new(Matrix2x4::new(1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0), w, h).unwrap()
    }

    #[test]
    fn identity_and_swap_projection() {
        let cam = identity_camera(10, 10);
        let p = cam.project(&Vec3::new(1.0, 2.0, 3.0));
        assert_eq!((p.x, p.y), (1.0, 2.0));
        let swap = CameraModel::new(
            Matrix2x4::new(0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0),
            10,
            10,
        )
        .unwrap();
        let p = swap.project(&Vec3::new(1.0, 2.0, 3.0));
        assert_eq!((p.x, p.y), (2.0, 1.0));
    }

    #[test]
    fn rotated_camera_matches_hand_product() {
        let domain = Domain::new(256, 128, 88).unwrap();
        let cam = CameraModel::orthographic(35.0, 0.0, 1.0, &domain, 375, 200).unwrap();
        let (s, c) = 35f64.to_radians().sin_cos();
        // by hand: row0 = (cos, 0, sin), row1 = (0, 1, 0), t centers the domain
        let center = (128.0, 64.0, 44.0);
        let tx = 187.0 - (c * center.0 + s * center.2);
        let ty = 99.5 - center.1;
        let expected_u = c * 10.0 + tx;
        let expected_v = ty;
        let p = cam.project(&Vec3::new(10.0, 0.0, 0.0));
        assert_relative_eq!(p.x, expected_u, epsilon = 1e-12);
        assert_relative_eq!(p.y, expected_v, epsilon = 1e-12);
    }

    #[test]
    fn rank_deficient_camera_rejected() {
        let m = Matrix2x4::new(1.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0);
        assert!(CameraModel::new(m, 4, 4).is_err());
    }

    #[test]
    fn axis_aligned_ray() {
        let cam = identity_camera(10, 10);
        let d = Domain::new(10, 10, 10).unwrap();
        let (a, b) = ray_through_pixel(&cam, Vec2::new(5.0, 5.0), &d).unwrap();
        assert_relative_eq!(a, Vec3::new(5.0, 5.0, 0.0), epsilon = 1e-12);
        assert_relative_eq!(b, Vec3::new(5.0, 5.0, 10.0), epsilon = 1e-12);
        assert!(matches!(
            ray_through_pixel(&cam, Vec2::new(20.0, 5.0), &d),
            Err(Error::NoIntersection)
        ));
    }

    #[test]
    fn oblique_ray_matches_independent_clipping() {
        let domain = Domain::new(64, 48, 32).unwrap();
        let cam = CameraModel::orthographic(-35.0, 18.0, 1.0, &domain, 120, 100).unwrap();
        let px = Vec2::new(59.5, 49.5);
        let (a, b) = ray_through_pixel(&cam, px, &domain).unwrap();
        // endpoints reproject to the pixel and lie on the box surface
        for p in [a, b] {
            assert_relative_eq!(cam.project(&p), px, epsilon = 1e-9);
            let on_face =
                (0..3).any(|ax| p[ax].abs() < 1e-9 || (p[ax] - domain.size()[ax]).abs() < 1e-9);
            assert!(on_face, "{p:?}");
            assert!((0..3).all(|ax| p[ax] > -1e-9 && p[ax] < domain.size()[ax] + 1e-9));
        }
        // oracle: march the line densely and keep the extreme inside samples
        let dir = cam.ray_direction();
        let origin = cam.back_project(&px);
        let mut inside = vec![];
        let n = 400_000;
        for i in 0..=n {
            let s = -200.0 + 400.0 * i as f64 / n as f64;
            let q = origin + dir * s;
            if domain.contains(&q) {
                inside.push(s);
            }
        }
        let s_lo = origin + dir * inside[0];
        let s_hi = origin + dir * *inside.last().unwrap();
        assert!((s_lo - a).norm() < 2e-3);
        assert!((s_hi - b).norm() < 2e-3);
        assert!((b - a).dot(&dir) > 0.0);
    }

    #[test]
    fn empty_render_is_zero() {
        let cam = identity_camera(16, 16);
        let img = render_particles(&ParticleSet::default(), &cam, 1.0);
        assert!(img.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rendering_superposes() {
        let cam = identity_camera(32, 32);
        let a = Particle::new(Vec3::new(10.2, 11.7, 3.0), 0.7);
        let b = Particle::new(Vec3::new(12.9, 10.1, 5.0), 0.4);
        let ia = render_particles(&ParticleSet::new(vec![a], 0), &cam, 1.0);
        let ib = render_particles(&ParticleSet::new(vec![b], 0), &cam, 1.0);
        let iab = render_particles(&ParticleSet::new(vec![a, b], 0), &cam, 1.0);
        for i in 0..iab.values.len() {
            assert_eq!(iab.values[i], ia.values[i] + ib.values[i]);
        }
    }

    #[test]
    fn single_blob_peak_and_mass() {
        let cam = identity_camera(21, 21);
        let set = ParticleSet::new(vec![Particle::new(Vec3::new(10.0, 10.0, 0.0), 1.0)], 0);
        let img = render_particles(&set, &cam, 1.0);
        let peak = img.get(10, 10);
        assert_eq!(peak, 1.0);
        assert!(img.values.iter().all(|&v| v <= peak));
        // oracle: midpoint-rule integration of the truncated blob on a fine grid
        let n = 1200;
        let h = 6.0 / n as f64;
        let mut integral = 0.0;
        for i in 0..n {
            for j in 0..n {
                let x = -3.0 + (i as f64 + 0.5) * h;
                let y = -3.0 + (j as f64 + 0.5) * h;
                let d2 = x * x + y * y;
                if d2 < 9.0 {
                    integral += blob(d2, 1.0) * h * h;
                }
            }
        }
        let analytic = std::f64::consts::PI;
        assert!(integral / analytic >= 0.997);
        assert!((img.sum() - integral).abs() / integral < 1e-3);
    }
}
