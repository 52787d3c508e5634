//! Layered spherical descriptor of local particle constellations.
//!
//! 331 vertices on concentric geodesic shells. Each particle within `radius`
//! of the evaluation point soft-assigns its intensity to its `k` nearest
//! vertices (weights `exp(-|d - h| / 2)`, normalized), scaled by a fixed
//! center weight per vertex.

use std::f64::consts::PI;

use crate::geometry::{Particle, ParticleSet, Vec3};
use crate::kdtree::KdTree;

pub const DESCRIPTOR_LEN: usize = 331;
pub const LAYER_RADII: [f64; 6] = [0.0, 1.0, 2.205, 3.484, 5.503, 8.693];
/// Geodesic frequency per layer (0 marks the single center vertex).
pub const LAYER_FREQUENCY: [usize; 6] = [0, 1, 2, 3, 3, 3];
pub const DEFAULT_RADIUS: f64 = 10.5;
pub const DEFAULT_SPLAT_K: usize = 5;
const CENTER_WEIGHT_SCALE: f64 = 10.0;
pub const SPLAT_FALLOFF: f64 = 2.0;
const CELL: f64 = 0.5;

/// Unit icosahedron vertices.
fn icosahedron() -> (Vec<Vec3>, Vec<[usize; 3]>) {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let raw = [
        [-1.0, t, 0.0],
        [1.0, t, 0.0],
        [-1.0, -t, 0.0],
        [1.0, -t, 0.0],
        [0.0, -1.0, t],
        [0.0, 1.0, t],
        [0.0, -1.0, -t],
        [0.0, 1.0, -t],
        [t, 0.0, -1.0],
        [t, 0.0, 1.0],
        [-t, 0.0, -1.0],
        [-t, 0.0, 1.0],
    ];
    let verts = raw
        .iter()
        .map(|v| Vec3::new(v[0], v[1], v[2]).normalize())
        .collect();
    let faces = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    (verts, faces)
}

fn slerp(a: &Vec3, b: &Vec3, t: f64) -> Vec3 {
    let omega = a.dot(b).clamp(-1.0, 1.0).acos();
    let s = omega.sin();
    (a * ((1.0 - t) * omega).sin() + b * (t * omega).sin()) / s
}

/// Unit-sphere geodesic points with `10 f^2 + 2` vertices for `f` in 1..=3:
/// icosahedron corners, equal-arc points on every edge and, for `f = 3`,
/// the projected face centers.
pub fn geodesic_sphere(frequency: usize) -> Vec<Vec3> {
    assert!(
        (1..=3).contains(&frequency),
        "supported frequencies are 1, 2, 3"
    );
    let (mut pts, faces) = icosahedron();
    if frequency == 1 {
        return pts;
    }
    let corners = pts.clone();
    let mut edges: Vec<(usize, usize)> = faces
        .iter()
        .flat_map(|f| [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])])
        .map(|(a, b)| (a.min(b), a.max(b)))
        .collect();
    edges.sort_unstable();
    edges.dedup();
    for &(a, b) in &edges {
        for s in 1..frequency {
            pts.push(slerp(&corners[a], &corners[b], s as f64 / frequency as f64));
        }
    }
    if frequency == 3 {
        for f in &faces {
            pts.push((corners[f[0]] + corners[f[1]] + corners[f[2]]).normalize());
        }
    }
    pts
}

/// Precomputed nearest-vertex lookup over the offset cube.
///
/// Order-k Voronoi regions are convex, so a cell whose eight corners share
/// the same k nearest vertices (with a strict margin) has that set
/// everywhere inside. Other cells keep every vertex that can be among the k
/// nearest of some point in the cell: since the k-th neighbour distance is
/// 1-Lipschitz, those lie within `d_k(center) + 2 * half_diagonal` of the
/// cell center.
#[derive(Debug, Clone)]
struct NnGrid {
    cells_per_axis: usize,
    half_extent: f64,
    /// `k` vertex indices (ascending) per cell, or `u16::MAX` in slot 0 when
    /// the cell uses its candidate list.
    sets: Vec<u16>,
    cand_start: Vec<u32>,
    candidates: Vec<u16>,
    k: usize,
}

fn kth_distance2(
    vertices: &[Vec3],
    q: &Vec3,
    k: usize,
    dist: &mut Vec<(f64, usize)>,
) -> (f64, f64) {
    dist.clear();
    dist.extend(
        vertices
            .iter()
            .enumerate()
            .map(|(i, h)| ((q - h).norm_squared(), i)),
    );
    dist.select_nth_unstable_by(k, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let kth = dist[..k]
        .iter()
        .map(|e| e.0)
        .fold(f64::NEG_INFINITY, f64::max);
    let next = dist[k..].iter().map(|e| e.0).fold(f64::INFINITY, f64::min);
    (kth, next)
}

impl NnGrid {
    fn build(vertices: &[Vec3], k: usize, half_extent: f64) -> Self {
        let cells = (2.0 * half_extent / CELL).round() as usize;
        let corners = cells + 1;
        let mut corner_sets: Vec<Option<Vec<u16>>> =
            Vec::with_capacity(corners * corners * corners);
        let mut dist: Vec<(f64, usize)> = Vec::with_capacity(vertices.len());
        for ck in 0..corners {
            for cj in 0..corners {
                for ci in 0..corners {
                    let q = Vec3::new(ci as f64, cj as f64, ck as f64) * CELL
                        - Vec3::repeat(half_extent);
                    let (kth, next) = kth_distance2(vertices, &q, k, &mut dist);
                    if next - kth > 1e-9 {
                        let mut set: Vec<u16> = dist[..k].iter().map(|e| e.1 as u16).collect();
                        set.sort_unstable();
                        corner_sets.push(Some(set));
                    } else {
                        corner_sets.push(None);
                    }
                }
            }
        }
        let corner = |i: usize, j: usize, l: usize| &corner_sets[(l * corners + j) * corners + i];
        let half_diagonal = CELL * 3f64.sqrt() / 2.0;
        let mut sets = vec![u16::MAX; cells * cells * cells * k];
        let mut cand_start = vec![0u32; cells * cells * cells + 1];
        let mut candidates = Vec::new();
        for ck in 0..cells {
            for cj in 0..cells {
                for ci in 0..cells {
                    let cell = (ck * cells + cj) * cells + ci;
                    let shared = corner(ci, cj, ck).as_ref().filter(|set| {
                        (0..8).all(|c| {
                            corner(ci + (c & 1), cj + ((c >> 1) & 1), ck + ((c >> 2) & 1)).as_ref()
                                == Some(set)
                        })
                    });
                    if let Some(set) = shared {
                        sets[cell * k..(cell + 1) * k].copy_from_slice(set);
                    } else {
                        let c = (Vec3::new(ci as f64, cj as f64, ck as f64) + Vec3::repeat(0.5))
                            * CELL
                            - Vec3::repeat(half_extent);
                        let (kth, _) = kth_distance2(vertices, &c, k, &mut dist);
                        let reach = kth.sqrt() + 2.0 * half_diagonal + 1e-9;
                        candidates.extend(
                            (0..vertices.len())
                                .filter(|&i| (vertices[i] - c).norm() <= reach)
                                .map(|i| i as u16),
                        );
                    }
                    cand_start[cell + 1] = candidates.len() as u32;
                }
            }
        }
        NnGrid {
            cells_per_axis: cells,
            half_extent,
            sets,
            cand_start,
            candidates,
            k,
        }
    }

    #[inline]
    fn cell_of(&self, d: &Vec3) -> Option<usize> {
        let n = self.cells_per_axis;
        let axis = |x: f64| -> Option<usize> {
            let c = ((x + self.half_extent) / CELL).floor();
            (c >= 0.0 && c < n as f64).then_some(c as usize)
        };
        Some((axis(d.z)? * n + axis(d.y)?) * n + axis(d.x)?)
    }

    fn fallback_fraction(&self) -> f64 {
        let total = self.sets.len() / self.k;
        let bad = self
            .sets
            .chunks(self.k)
            .filter(|s| s[0] == u16::MAX)
            .count();
        bad as f64 / total as f64
    }
}

#[derive(Debug, Clone)]
pub struct DescriptorLayout {
    pub vertices: Vec<Vec3>,
    pub layer_of_vertex: Vec<usize>,
    pub radius: f64,
    pub splat_k: usize,
    pub center_weights: Vec<f64>,
    vertex_tree: KdTree,
    nn_grid: NnGrid,
}

impl Default for DescriptorLayout {
    fn default() -> Self {
        Self::new()
    }
}

impl DescriptorLayout {
    pub fn new() -> Self {
        Self::with_params(DEFAULT_RADIUS, DEFAULT_SPLAT_K)
    }

    pub fn with_params(radius: f64, splat_k: usize) -> Self {
        assert!(radius > 0.0 && (1..=16).contains(&splat_k));
        let mut vertices = vec![Vec3::zeros()];
        let mut layer_of_vertex = vec![0];
        for layer in 1..LAYER_RADII.len() {
            for v in geodesic_sphere(LAYER_FREQUENCY[layer]) {
                vertices.push(v * LAYER_RADII[layer]);
                layer_of_vertex.push(layer);
            }
        }
        debug_assert_eq!(vertices.len(), DESCRIPTOR_LEN);
        let raw: Vec<f64> = vertices
            .iter()
            .map(|h| (-h.norm() / CENTER_WEIGHT_SCALE).exp())
            .collect();
        let total: f64 = raw.iter().sum();
        let center_weights = raw.iter().map(|w| w / total).collect();
        let vertex_tree = KdTree::new(&vertices);
        let nn_grid = NnGrid::build(&vertices, splat_k, radius);
        DescriptorLayout {
            vertices,
            layer_of_vertex,
            radius,
            splat_k,
            center_weights,
            vertex_tree,
            nn_grid,
        }
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; LAYER_RADII.len()];
        for &l in &self.layer_of_vertex {
            sizes[l] += 1;
        }
        sizes
    }

    /// Smallest distance between two vertices of one layer.
    pub fn min_spacing(&self, layer: usize) -> f64 {
        let pts: Vec<&Vec3> = self
            .vertices
            .iter()
            .zip(&self.layer_of_vertex)
            .filter(|(_, &l)| l == layer)
            .map(|(v, _)| v)
            .collect();
        let mut best = f64::INFINITY;
        for a in 0..pts.len() {
            for b in a + 1..pts.len() {
                best = best.min((pts[a] - pts[b]).norm());
            }
        }
        best
    }

    /// Fraction of offset cells without a single shared nearest-vertex set.
    pub fn fallback_fraction(&self) -> f64 {
        self.nn_grid.fallback_fraction()
    }

    /// The `k` nearest vertices of an offset, ascending by index. Distance
    /// ties go to the smaller index.
    pub fn nearest_vertices(&self, offset: &Vec3, out: &mut Vec<u16>) {
        out.clear();
        let grid = &self.nn_grid;
        let Some(cell) = grid.cell_of(offset) else {
            out.extend(
                self.vertex_tree
                    .knn(offset, self.splat_k)
                    .iter()
                    .map(|&(i, _)| i as u16),
            );
            out.sort_unstable();
            return;
        };
        let k = self.splat_k;
        let set = &grid.sets[cell * k..(cell + 1) * k];
        if set[0] != u16::MAX {
            out.extend_from_slice(set);
            return;
        }
        let cands =
            &grid.candidates[grid.cand_start[cell] as usize..grid.cand_start[cell + 1] as usize];
        let mut best = [(f64::INFINITY, u16::MAX); 16];
        for &c in cands {
            let d2 = (offset - self.vertices[c as usize]).norm_squared();
            let e = (d2, c);
            if e.0 < best[k - 1].0 || (e.0 == best[k - 1].0 && e.1 < best[k - 1].1) {
                let mut pos = k - 1;
                while pos > 0
                    && (e.0 < best[pos - 1].0 || (e.0 == best[pos - 1].0 && e.1 < best[pos - 1].1))
                {
                    best[pos] = best[pos - 1];
                    pos -= 1;
                }
                best[pos] = e;
            }
        }
        out.extend(best[..k].iter().map(|e| e.1));
        out.sort_unstable();
    }

    /// Soft-assign one particle at `offset` (already in layout units) into `out`.
    #[inline]
    pub fn splat(&self, offset: &Vec3, intensity: f64, scratch: &mut Vec<u16>, out: &mut [f64]) {
        self.nearest_vertices(offset, scratch);
        let mut e = [0.0f64; 16];
        let mut total = 0.0;
        for (slot, &h) in scratch.iter().enumerate() {
            let w = (-(offset - self.vertices[h as usize]).norm() / SPLAT_FALLOFF).exp();
            e[slot] = w;
            total += w;
        }
        for (slot, &h) in scratch.iter().enumerate() {
            let h = h as usize;
            out[h] += intensity * (e[slot] / total) * self.center_weights[h];
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor {
    pub values: Vec<f64>,
}

impl Descriptor {
    pub fn zeros() -> Self {
        Descriptor {
            values: vec![0.0; DESCRIPTOR_LEN],
        }
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }
}

/// KD-tree over the positions of one particle set.
#[derive(Debug, Clone)]
pub struct ParticleIndex {
    particles: Vec<Particle>,
    tree: KdTree,
}

impl ParticleIndex {
    pub fn new(set: &ParticleSet) -> Self {
        Self::from_particles(set.particles.clone())
    }

    pub fn from_particles(particles: Vec<Particle>) -> Self {
        let positions: Vec<Vec3> = particles.iter().map(|p| p.position).collect();
        ParticleIndex {
            tree: KdTree::new(&positions),
            particles,
        }
    }

    pub fn particles(&self) -> &[Particle] {
        &self.particles
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    /// Indices with `|p - center| < radius`, ascending.
    pub fn query(&self, center: &Vec3, radius: f64) -> Vec<usize> {
        let mut out = Vec::new();
        self.query_into(center, radius, &mut out);
        out
    }

    pub fn query_into(&self, center: &Vec3, radius: f64, out: &mut Vec<usize>) {
        self.tree.within_radius_into(center, radius, out);
        out.sort_unstable();
    }
}

/// Reusable buffers for repeated evaluation.
#[derive(Debug, Default)]
pub struct Workspace {
    candidates: Vec<usize>,
    nn: Vec<u16>,
}

/// Accumulate the descriptor at `center` from the given candidate particles
/// (ascending indices) into `out`. Lengths are multiplied by `scale` before
/// the layout lookup, which is the same as enlarging every radius by `1/scale`.
pub fn evaluate_candidates(
    center: &Vec3,
    particles: &[Particle],
    candidates: &[usize],
    layout: &DescriptorLayout,
    scale: f64,
    nn: &mut Vec<u16>,
    out: &mut [f64],
) {
    out.iter_mut().for_each(|v| *v = 0.0);
    let r2 = layout.radius * layout.radius;
    for &i in candidates {
        let p = &particles[i];
        let d = (p.position - center) * scale;
        if d.norm_squared() < r2 {
            layout.splat(&d, p.intensity, nn, out);
        }
    }
}

pub fn evaluate_scaled(
    center: &Vec3,
    index: &ParticleIndex,
    layout: &DescriptorLayout,
    scale: f64,
    ws: &mut Workspace,
    out: &mut [f64],
) {
    index.query_into(center, layout.radius / scale, &mut ws.candidates);
    evaluate_candidates(
        center,
        &index.particles,
        &ws.candidates,
        layout,
        scale,
        &mut ws.nn,
        out,
    );
}

pub fn evaluate(center: &Vec3, index: &ParticleIndex, layout: &DescriptorLayout) -> Descriptor {
    let mut d = Descriptor::zeros();
    evaluate_scaled(
        center,
        index,
        layout,
        1.0,
        &mut Workspace::default(),
        &mut d.values,
    );
    d
}

pub fn ssd(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Pearson correlation; 0 when either vector is constant.
pub fn ncc(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (da, db) = (x - ma, y - mb);
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return 0.0;
    }
    (sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0)
}

/// Volume of the descriptor support, for density estimates.
pub fn support_volume(layout: &DescriptorLayout) -> f64 {
    4.0 / 3.0 * PI * layout.radius.powi(3)
}
