//! Static 3D KD-tree for fixed-radius and k-nearest-neighbour queries.

use crate::geometry::Vec3;

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<Vec3>,
    /// Original index of each entry in `points`.
    ids: Vec<usize>,
    nodes: Vec<Node>,
}

impl KdTree {
    pub fn new(points: &[Vec3]) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        let mut nodes = Vec::new();
        if !points.is_empty() {
            build(points, &mut order, 0, points.len(), &mut nodes);
        }
        let sorted = order.iter().map(|&i| points[i]).collect();
        KdTree {
            points: sorted,
            ids: order,
            nodes,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Indices of all points with `|p - center| < radius`, in no particular order.
    pub fn within_radius(&self, center: &Vec3, radius: f64) -> Vec<usize> {
        let mut out = Vec::new();
        self.within_radius_into(center, radius, &mut out);
        out
    }

    pub fn within_radius_into(&self, center: &Vec3, radius: f64, out: &mut Vec<usize>) {
        out.clear();
        if self.nodes.is_empty() {
            return;
        }
        let r2 = radius * radius;
        let mut stack = vec![0usize];
        while let Some(n) = stack.pop() {
            match self.nodes[n] {
                Node::Leaf { start, end } => {
                    for i in start..end {
                        if (self.points[i] - center).norm_squared() < r2 {
                            out.push(self.ids[i]);
                        }
                    }
                }
                Node::Split {
                    axis,
                    value,
                    left,
                    right,
                } => {
                    let d = center[axis] - value;
                    if d - radius < 0.0 {
                        stack.push(left);
                    }
                    if d + radius >= 0.0 {
                        stack.push(right);
                    }
                }
            }
        }
    }

    /// The `k` nearest points as `(index, squared distance)`, ordered by
    /// distance with ties broken by smaller index.
    pub fn knn(&self, q: &Vec3, k: usize) -> Vec<(usize, f64)> {
        let mut best: Vec<(usize, f64)> = Vec::with_capacity(k + 1);
        if self.nodes.is_empty() || k == 0 {
            return best;
        }
        self.knn_rec(0, q, k, &mut best);
        best
    }

    fn knn_rec(&self, n: usize, q: &Vec3, k: usize, best: &mut Vec<(usize, f64)>) {
        match self.nodes[n] {
            Node::Leaf { start, end } => {
                for i in start..end {
                    let d2 = (self.points[i] - q).norm_squared();
                    let cand = (self.ids[i], d2);
                    if best.len() < k || less(&cand, &best[best.len() - 1]) {
                        let pos = best.partition_point(|e| less(e, &cand));
                        best.insert(pos, cand);
                        best.truncate(k);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let d = q[axis] - value;
                let (near, far) = if d < 0.0 {
                    (left, right)
                } else {
                    (right, left)
                };
                self.knn_rec(near, q, k, best);
                // `<=` keeps equal-distance points reachable for index tie-breaks
                if best.len() < k || d * d <= best[best.len() - 1].1 {
                    self.knn_rec(far, q, k, best);
                }
            }
        }
    }
}

#[inline]
fn less(a: &(usize, f64), b: &(usize, f64)) -> bool {
    a.1 < b.1 || (a.1 == b.1 && a.0 < b.0)
}

fn build(
    points: &[Vec3],
    order: &mut [usize],
    start: usize,
    end: usize,
    nodes: &mut Vec<Node>,
) -> usize {
    let id = nodes.len();
    if end - start <= LEAF_SIZE {
        nodes.push(Node::Leaf { start, end });
        return id;
    }
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for &i in &order[start..end] {
        lo = lo.inf(&points[i]);
        hi = hi.sup(&points[i]);
    }
    let spread = hi - lo;
    let axis = spread.imax();
    if spread[axis] == 0.0 {
        nodes.push(Node::Leaf { start, end });
        return id;
    }
    let mid = start + (end - start) / 2;
    order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
        points[a][axis].total_cmp(&points[b][axis])
    });
    let value = points[order[mid]][axis];
    // left holds coordinates <= value, right holds >= value
    nodes.push(Node::Leaf { start: 0, end: 0 });
    let left = build(points, order, start, mid, nodes);
    let right = build(points, order, mid, end, nodes);
    nodes[id] = Node::Split {
        axis,
        value,
        left,
        right,
    };
    id
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(n: usize, seed: u64) -> Vec<Vec3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                Vec3::new(
                    rng.gen_range(0.0..50.0),
                    rng.gen_range(0.0..30.0),
                    rng.gen_range(0.0..20.0),
                )
            })
            .collect()
    }

    #[test]
    fn radius_query_matches_linear_scan() {
        let pts = cloud(2000, 1);
        let tree = KdTree::new(&pts);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let c = Vec3::new(
                rng.gen_range(-5.0..55.0),
                rng.gen_range(-5.0..35.0),
                rng.gen_range(-5.0..25.0),
            );
            let r = rng.gen_range(0.1..12.0);
            let mut got = tree.within_radius(&c, r);
            got.sort_unstable();
            let want: Vec<usize> = (0..pts.len())
                .filter(|&i| (pts[i] - c).norm() < r)
                .collect();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn knn_matches_sorted_scan_with_ties() {
        // lattice points produce many exact distance ties
        let mut pts = vec![];
        for i in 0..6 {
            for j in 0..6 {
                for k in 0..6 {
                    pts.push(Vec3::new(i as f64, j as f64, k as f64));
                }
            }
        }
        let tree = KdTree::new(&pts);
        for q in [
            Vec3::new(2.0, 2.0, 2.0),
            Vec3::new(2.5, 2.5, 2.5),
            Vec3::new(0.0, 5.0, 3.5),
        ] {
            for k in [1, 5, 9] {
                let got = tree.knn(&q, k);
                let mut all: Vec<(usize, f64)> = pts
                    .iter()
                    .enumerate()
                    .map(|(i, p)| (i, (p - q).norm_squared()))
                    .collect();
                all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
                all.truncate(k);
                assert_eq!(got, all);
            }
        }
    }

    #[test]
    fn empty_tree() {
        let tree = KdTree::new(&[]);
        assert!(tree.within_radius(&Vec3::zeros(), 5.0).is_empty());
        assert!(tree.knn(&Vec3::zeros(), 3).is_empty());
    }
}
