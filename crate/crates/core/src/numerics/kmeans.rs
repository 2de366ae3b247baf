//! Lloyd's k-means over small dense vectors with seeded initialization.

use serde::{Deserialize, Serialize};

use super::{RngStream, Vector};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KMeansInit {
    /// k distinct input points chosen by the rng.
    #[default]
    RandomDistinct,
    /// One random point, then repeatedly the point farthest from those chosen.
    FarthestPoint,
}

#[derive(Clone, Debug)]
pub struct KMeansResult {
    pub centroids: Vec<Vector>,
    pub assignments: Vec<usize>,
    /// Within-cluster sum of squared distances after every iteration,
    /// starting with the initial assignment.
    pub objective_history: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

fn objective(points: &[Vector], assign: &[usize], centroids: &[Vec<f64>]) -> f64 {
    points
        .iter()
        .zip(assign)
        .map(|(p, &c)| sq_dist(p, &centroids[c]))
        .sum()
}

/// Moves the point farthest from its centroid into each empty cluster.
fn fill_empty(points: &[Vector], assign: &mut [usize], centroids: &mut [Vec<f64>]) {
    let k = centroids.len();
    loop {
        let mut counts = vec![0usize; k];
        for &a in assign.iter() {
            counts[a] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let mut donor = None;
        let mut donor_d = -1.0;
        for (i, p) in points.iter().enumerate() {
            if counts[assign[i]] < 2 {
                continue;
            }
            let d = sq_dist(p, &centroids[assign[i]]);
            if d > donor_d {
                donor_d = d;
                donor = Some(i);
            }
        }
        let i = donor.expect("k <= n guarantees a cluster with two members");
        assign[i] = empty;
        centroids[empty] = points[i].to_vec();
    }
}

fn means(points: &[Vector], assign: &[usize], k: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(assign) {
        counts[a] += 1;
        for (s, x) in sums[a].iter_mut().zip(p.iter()) {
            *s += x;
        }
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        let inv = 1.0 / c as f64;
        s.iter_mut().for_each(|v| *v *= inv);
    }
    sums
}

/// k-means with [`KMeansInit::RandomDistinct`] initialization.
pub fn kmeans(
    points: &[Vector],
    k: usize,
    rng: &mut RngStream,
    max_iter: usize,
) -> Result<KMeansResult> {
    kmeans_with(points, k, rng, max_iter, KMeansInit::RandomDistinct)
}

pub fn kmeans_with(
    points: &[Vector],
    k: usize,
    rng: &mut RngStream,
    max_iter: usize,
    init: KMeansInit,
) -> Result<KMeansResult> {
    if k == 0 {
        return Err(Error::invalid("kmeans needs k >= 1"));
    }
    if k > points.len() {
        return Err(Error::invalid(format!(
            "kmeans: k = {k} exceeds the number of points ({})",
            points.len()
        )));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::invalid("kmeans: points have mixed dimensions"));
    }

    let seeds: Vec<usize> = match init {
        KMeansInit::RandomDistinct => rng.choose_distinct(points.len(), k),
        KMeansInit::FarthestPoint => {
            let mut chosen = vec![rng.below(points.len())];
            let mut dmin: Vec<f64> = points
                .iter()
                .map(|p| sq_dist(p, &points[chosen[0]]))
                .collect();
            while chosen.len() < k {
                let mut far = 0;
                let mut far_d = -1.0;
                for (i, &d) in dmin.iter().enumerate() {
                    if d > far_d && !chosen.contains(&i) {
                        far_d = d;
                        far = i;
                    }
                }
                chosen.push(far);
                for (d, p) in dmin.iter_mut().zip(points) {
                    *d = d.min(sq_dist(p, &points[far]));
                }
            }
            chosen
        }
    };
    let mut centroids: Vec<Vec<f64>> = seeds.iter().map(|&i| points[i].to_vec()).collect();

    let mut assign: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
    fill_empty(points, &mut assign, &mut centroids);
    let mut history = vec![objective(points, &assign, &centroids)];

    for _ in 0..max_iter {
        centroids = means(points, &assign, k, dim);
        let mut next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
        fill_empty(points, &mut next, &mut centroids);
        history.push(objective(points, &next, &centroids));
        let converged = next == assign;
        assign = next;
        if converged {
            break;
        }
    }

    Ok(KMeansResult {
        centroids: centroids.into_iter().map(Vector::from_raw).collect(),
        assignments: assign,
        objective_history: history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(xs: &[f64]) -> Vector {
        Vector::new(xs.to_vec()).unwrap()
    }

    /// Best 2-partition by enumerating every nonempty split.
    fn exhaustive_two_means(points: &[Vector]) -> (Vec<f64>, Vec<f64>) {
        let n = points.len();
        let dim = points[0].len();
        let mut best = (f64::INFINITY, vec![], vec![]);
        for mask in 1u64..(1u64 << (n - 1)) {
            let mut groups = [vec![], vec![]];
            for (i, p) in points.iter().enumerate() {
                groups[((mask >> i) & 1) as usize].push(p);
            }
            let cents: Vec<Vec<f64>> = groups
                .iter()
                .map(|g| {
                    (0..dim)
                        .map(|d| g.iter().map(|p| p[d]).sum::<f64>() / g.len() as f64)
                        .collect()
                })
                .collect();
            let cost: f64 = groups
                .iter()
                .zip(&cents)
                .map(|(g, c)| g.iter().map(|p| sq_dist(p, c)).sum::<f64>())
                .sum();
            if cost < best.0 {
                best = (cost, cents[0].clone(), cents[1].clone());
            }
        }
        (best.1, best.2)
    }

    fn sorted(mut cs: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
        cs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        cs
    }

    #[test]
    fn two_clusters_match_exhaustive_oracle() {
        let pts = vec![v(&[0.0, 0.0]), v(&[0.1, 0.0]), v(&[10.0, 10.0]), v(&[10.1, 10.0])];
        let (a, b) = exhaustive_two_means(&pts);
        let want = sorted(vec![a, b]);
        assert!((want[0][0] - 0.05).abs() < 1e-12 && (want[1][0] - 10.05).abs() < 1e-12);
        for seed in 0..20 {
            let mut rng = RngStream::new(seed, 0);
            let res = kmeans(&pts, 2, &mut rng, 50).unwrap();
            let got = sorted(res.centroids.iter().map(|c| c.to_vec()).collect());
            for (g, w) in got.iter().zip(&want) {
                for (x, y) in g.iter().zip(w) {
                    assert!((x - y).abs() < 1e-9, "seed {seed}: {got:?} vs {want:?}");
                }
            }
        }
    }

    #[test]
    fn k_equals_n_returns_points() {
        let pts = vec![v(&[1.0, 2.0]), v(&[3.0, -1.0]), v(&[0.5, 0.5])];
        let mut rng = RngStream::new(3, 0);
        let res = kmeans(&pts, 3, &mut rng, 10).unwrap();
        let got = sorted(res.centroids.iter().map(|c| c.to_vec()).collect());
        let want = sorted(pts.iter().map(|p| p.to_vec()).collect());
        assert_eq!(got, want);
    }

    #[test]
    fn identical_points() {
        let pts = vec![v(&[2.0, 2.0]); 5];
        let mut rng = RngStream::new(9, 0);
        let res = kmeans(&pts, 2, &mut rng, 10).unwrap();
        for c in &res.centroids {
            assert_eq!(c.as_slice(), &[2.0, 2.0]);
        }
        assert!(res.assignments.contains(&0) && res.assignments.contains(&1));
    }

    #[test]
    fn k_too_large() {
        let pts = vec![v(&[0.0])];
        let mut rng = RngStream::new(0, 0);
        assert!(matches!(
            kmeans(&pts, 2, &mut rng, 5),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn objective_never_increases() {
        for seed in 0..30u64 {
            let mut rng = RngStream::new(seed, 1);
            let pts: Vec<Vector> = (0..60)
                .map(|_| v(&[rng.normal(), rng.normal(), rng.normal()]))
                .collect();
            for init in [KMeansInit::RandomDistinct, KMeansInit::FarthestPoint] {
                let res = kmeans_with(&pts, 7, &mut rng, 100, init).unwrap();
                for w in res.objective_history.windows(2) {
                    assert!(w[1] <= w[0] + 1e-12, "{:?}", res.objective_history);
                }
            }
        }
    }

    #[test]
    fn deterministic_given_stream() {
        let mut g = RngStream::new(77, 0);
        let pts: Vec<Vector> = (0..40).map(|_| v(&[g.normal(), g.normal()])).collect();
        let a = kmeans(&pts, 4, &mut RngStream::new(1, 2), 30).unwrap();
        let b = kmeans(&pts, 4, &mut RngStream::new(1, 2), 30).unwrap();
        assert_eq!(a.centroids, b.centroids);
    }
}
