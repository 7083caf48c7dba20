use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::tensor::Tensor;

#[inline]
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// `(squared distance, index)` ordered lexicographically; ties go to the lower index.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Cand(f64, usize);

impl Eq for Cand {}

impl PartialOrd for Cand {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Cand {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

const LEAF: usize = 8;

enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: Box<Node>, right: Box<Node> },
}

/// Static 3-d tree for exact nearest-neighbour queries.
pub struct KdTree<'a> {
    points: &'a Tensor,
    order: Vec<usize>,
    root: Node,
}

impl<'a> KdTree<'a> {
    pub fn new(points: &'a Tensor) -> Self {
        let mut order: Vec<usize> = (0..points.rows()).collect();
        let n = order.len();
        let root = build(points, &mut order, 0, n);
        KdTree { points, order, root }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// The `k` nearest points to `q`, sorted by `(distance, index)`.
    pub fn knn(&self, q: &[f64], k: usize) -> Vec<(f64, usize)> {
        let k = k.min(self.order.len());
        if k == 0 {
            return Vec::new();
        }
        let mut heap: BinaryHeap<Cand> = BinaryHeap::with_capacity(k + 1);
        self.search(&self.root, q, k, &mut heap);
        let mut out: Vec<Cand> = heap.into_vec();
        out.sort();
        out.into_iter().map(|c| (c.0, c.1)).collect()
    }

    pub fn nearest(&self, q: &[f64]) -> (f64, usize) {
        self.knn(q, 1)[0]
    }

    fn search(&self, node: &Node, q: &[f64], k: usize, heap: &mut BinaryHeap<Cand>) {
        match node {
            Node::Leaf { start, end } => {
                for &i in &self.order[*start..*end] {
                    let c = Cand(sq_dist(q, self.points.row(i)), i);
                    if heap.len() < k {
                        heap.push(c);
                    } else if c < *heap.peek().unwrap() {
                        heap.pop();
                        heap.push(c);
                    }
                }
            }
            Node::Split { axis, value, left, right } => {
                let diff = q[*axis] - value;
                let (near, far) = if diff <= 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, k, heap);
                if heap.len() < k || diff * diff <= heap.peek().unwrap().0 {
                    self.search(far, q, k, heap);
                }
            }
        }
    }
}

fn build(points: &Tensor, order: &mut [usize], start: usize, end: usize) -> Node {
    if end - start <= LEAF {
        return Node::Leaf { start, end };
    }
    let slice = &mut order[start..end];
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for &i in slice.iter() {
        let p = points.row(i);
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let axis = (0..3).max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b]))).unwrap();
    let mid = slice.len() / 2;
    slice.select_nth_unstable_by(mid, |&a, &b| points.get(a, axis).total_cmp(&points.get(b, axis)));
    let value = points.get(slice[mid], axis);
    // Every point left of `mid` is <= value and every point right is >= value,
    // so the split plane bounds both halves.
    let left = build(points, order, start, start + mid);
    let right = build(points, order, start + mid, end);
    Node::Split { axis, value, left: Box::new(left), right: Box::new(right) }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matches_linear_scan_with_duplicates() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..20 {
            let n = 50 + trial * 13;
            // Coarse lattice values force many exact distance ties.
            let data: Vec<f64> = (0..n * 3).map(|_| rng.gen_range(0..4) as f64 * 0.25).collect();
            let pts = Tensor::from_vec(n, 3, data);
            let tree = KdTree::new(&pts);
            for _ in 0..20 {
                let q = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
                let k = rng.gen_range(1..10);
                let mut all: Vec<(f64, usize)> = (0..n).map(|i| (sq_dist(&q, pts.row(i)), i)).collect();
                all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                all.truncate(k);
                assert_eq!(tree.knn(&q, k), all);
            }
        }
    }
}
