//! Farthest point sampling and k-nearest-neighbour search.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kdtree::{sq_dist, KdTree};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Below this many reference points a linear scan beats building a tree.
const TREE_THRESHOLD: usize = 64;

/// FPS with the first index drawn uniformly from a seeded RNG.
pub fn farthest_point_sampling(points: &Tensor, m: usize, seed: u64) -> Result<Vec<usize>> {
    let n = points.rows();
    check_count(n, m)?;
    let first = ChaCha8Rng::seed_from_u64(seed).gen_range(0..n);
    farthest_point_sampling_from(points, m, first)
}

/// FPS whose first point is chosen independently of point order: the
/// extreme point along a seed-derived direction.
pub fn fps_canonical(points: &Tensor, m: usize, seed: u64) -> Result<Vec<usize>> {
    let n = points.rows();
    check_count(n, m)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dir = loop {
        let d = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let len2: f64 = d.iter().map(|x| x * x).sum();
        if len2 > 1e-6 {
            break d;
        }
    };
    let score = |i: usize| {
        let p = points.row(i);
        (dir[0] * p[0] + dir[1] * p[1] + dir[2] * p[2], p[0], p[1], p[2])
    };
    let first = (0..n)
        .max_by(|&a, &b| {
            let (sa, sb) = (score(a), score(b));
            sa.0.total_cmp(&sb.0)
                .then(sa.1.total_cmp(&sb.1))
                .then(sa.2.total_cmp(&sb.2))
                .then(sa.3.total_cmp(&sb.3))
                .then(b.cmp(&a))
        })
        .unwrap();
    farthest_point_sampling_from(points, m, first)
}

/// FPS from a fixed first index. Each later pick maximizes the distance to
/// the selected set; ties go to the lowest index.
pub fn farthest_point_sampling_from(points: &Tensor, m: usize, first: usize) -> Result<Vec<usize>> {
    let n = points.rows();
    check_count(n, m)?;
    if first >= n {
        return Err(Error::InvalidArgument(format!("first index {first} out of range for {n} points")));
    }
    let mut selected = Vec::with_capacity(m);
    let mut min_d = vec![f64::INFINITY; n];
    let mut taken = vec![false; n];
    let mut cur = first;
    for _ in 0..m {
        selected.push(cur);
        taken[cur] = true;
        let c = points.row(cur);
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for i in 0..n {
            if taken[i] {
                continue;
            }
            let d = sq_dist(points.row(i), c);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > best_d {
                best_d = min_d[i];
                best = i;
            }
        }
        cur = best;
    }
    Ok(selected)
}

fn check_count(n: usize, m: usize) -> Result<()> {
    if m == 0 {
        return Err(Error::InvalidArgument("sample count must be at least 1".into()));
    }
    if m > n {
        return Err(Error::InvalidArgument(format!("cannot sample {m} of {n} points")));
    }
    Ok(())
}

/// Indices of the `k` nearest `refs` for every query row, ascending by
/// distance with ties broken by lower index. Returned row-major, `M·k` long.
pub fn knn(queries: &Tensor, refs: &Tensor, k: usize) -> Result<Vec<usize>> {
    if k > refs.rows() {
        return Err(Error::InvalidArgument(format!("k = {k} exceeds {} reference points", refs.rows())));
    }
    let mut out = Vec::with_capacity(queries.rows() * k);
    if k == 0 {
        return Ok(out);
    }
    if refs.rows() <= TREE_THRESHOLD {
        let mut buf: Vec<(f64, usize)> = Vec::with_capacity(refs.rows());
        for q in 0..queries.rows() {
            let qr = queries.row(q);
            buf.clear();
            buf.extend((0..refs.rows()).map(|i| (sq_dist(qr, refs.row(i)), i)));
            let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            if k < buf.len() {
                buf.select_nth_unstable_by(k - 1, cmp);
                buf.truncate(k);
            }
            buf.sort_by(cmp);
            out.extend(buf.iter().map(|c| c.1));
        }
    } else {
        let tree = KdTree::new(refs);
        for q in 0..queries.rows() {
            out.extend(tree.knn(queries.row(q), k).into_iter().map(|c| c.1));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(v: &[[f64; 3]]) -> Tensor {
        Tensor::from_rows(v)
    }

    #[test]
    fn fps_picks_the_far_end() {
        let p = pts(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.1, 0.0, 0.0], [2.0, 0.0, 0.0]]);
        assert_eq!(farthest_point_sampling_from(&p, 2, 0).unwrap(), vec![0, 3]);
    }

    #[test]
    fn fps_exhaustion_is_a_permutation() {
        let p = pts(&[[0.0; 3], [0.0; 3], [1.0, 2.0, 3.0], [0.5, 0.5, 0.5], [0.0; 3]]);
        let mut s = farthest_point_sampling(&p, 5, 3).unwrap();
        s.sort();
        assert_eq!(s, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn fps_rejects_too_many() {
        let p = pts(&[[0.0; 3]]);
        assert!(farthest_point_sampling(&p, 2, 0).is_err());
        assert!(farthest_point_sampling(&p, 0, 0).is_err());
    }

    #[test]
    fn knn_basic_cases() {
        let q = pts(&[[0.0; 3]]);
        let r = pts(&[[1.0, 0.0, 0.0], [3.0, 0.0, 0.0]]);
        assert_eq!(knn(&q, &r, 1).unwrap(), vec![0]);
        assert!(knn(&q, &r, 3).is_err());
        let same = pts(&[[0.0; 3], [1.0, 0.0, 0.0], [0.0, 5.0, 0.0]]);
        assert_eq!(knn(&same, &same, 1).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn canonical_fps_ignores_point_order() {
        let mut v: Vec<[f64; 3]> = (0..40).map(|i| {
            let t = i as f64 * 0.37;
            [t.sin(), (1.3 * t).cos(), (0.7 * t).sin() * 0.5]
        }).collect();
        let a = fps_canonical(&pts(&v), 10, 11).unwrap();
        let chosen_a: Vec<[f64; 3]> = a.iter().map(|&i| v[i]).collect();
        v.reverse();
        let b = fps_canonical(&pts(&v), 10, 11).unwrap();
        let chosen_b: Vec<[f64; 3]> = b.iter().map(|&i| v[i]).collect();
        assert_eq!(chosen_a, chosen_b);
    }
}
