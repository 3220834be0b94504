//! Exact nearest-neighbour queries over 3-D points.

use crate::geometry::Vec3;

/// Static kd-tree stored as a permuted point array; each subtree is a
/// contiguous slice whose median element splits on `depth % 3`.
#[derive(Clone, Debug)]
pub struct KdTree {
    points: Vec<Vec3>,
    index: Vec<usize>,
}

const LEAF: usize = 8;

impl KdTree {
    pub fn new(points: &[Vec3]) -> Self {
        let mut pts: Vec<(Vec3, usize)> = points.iter().copied().zip(0..).collect();
        build(&mut pts, 0);
        let (points, index) = pts.into_iter().unzip();
        Self { points, index }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Index (into the construction slice) and distance of the nearest point.
    pub fn nearest(&self, q: &Vec3) -> Option<(usize, f64)> {
        if self.points.is_empty() {
            return None;
        }
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(0, self.points.len(), 0, q, &mut best);
        Some((self.index[best.0], best.1.sqrt()))
    }

    fn search(&self, lo: usize, hi: usize, depth: usize, q: &Vec3, best: &mut (usize, f64)) {
        if hi - lo <= LEAF {
            for k in lo..hi {
                let d = (self.points[k] - q).norm_squared();
                if d < best.1 {
                    *best = (k, d);
                }
            }
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let axis = depth % 3;
        let diff = q[axis] - self.points[mid][axis];
        let d = (self.points[mid] - q).norm_squared();
        if d < best.1 {
            *best = (mid, d);
        }
        let (near, far) = if diff <= 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.search(near.0, near.1, depth + 1, q, best);
        if diff * diff <= best.1 {
            self.search(far.0, far.1, depth + 1, q, best);
        }
    }
}

fn build(pts: &mut [(Vec3, usize)], depth: usize) {
    if pts.len() <= LEAF {
        return;
    }
    let axis = depth % 3;
    let mid = pts.len() / 2;
    pts.select_nth_unstable_by(mid, |a, b| a.0[axis].total_cmp(&b.0[axis]));
    let (left, right) = pts.split_at_mut(mid);
    build(left, depth + 1);
    build(&mut right[1..], depth + 1);
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut r = || Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let pts: Vec<Vec3> = (0..700).map(|_| r()).collect();
        let tree = KdTree::new(&pts);
        for _ in 0..500 {
            let q = r() * 1.5;
            let (i, d) = tree.nearest(&q).unwrap();
            let bd = pts.iter().map(|p| (p - q).norm()).fold(f64::INFINITY, f64::min);
            assert_eq!(d, bd);
            assert_eq!((pts[i] - q).norm(), d);
        }
        assert!(KdTree::new(&[]).nearest(&Vec3::zeros()).is_none());
    }
}
