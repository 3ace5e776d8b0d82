//! Environment division: K-means over interaction representations.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{IflError, Result};
use crate::model::{interaction_rep, ModelState};
use crate::rng::{stream, Stream};
use crate::scalar::{sq_dist, Scalar};
use crate::schema::{Dataset, InteractionRecord, Side};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansParams {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for KMeansParams {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tol: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult<T> {
    pub assignment: Vec<usize>,
    pub centroids: Vec<Vec<T>>,
    pub inertia: T,
    /// Inertia after each assignment step.
    pub trace: Vec<T>,
    pub iterations: usize,
}

fn nearest<T: Scalar>(p: &[T], centroids: &[Vec<T>]) -> (usize, T) {
    let mut best = (0, T::infinity());
    for (c, cen) in centroids.iter().enumerate() {
        let d = sq_dist(p, cen);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// k-means++ seeding.
pub fn kmeans_pp_init<T: Scalar>(points: &[Vec<T>], k: usize, seed: u64) -> Result<Vec<Vec<T>>> {
    if points.len() < k || k == 0 {
        return Err(IflError::TooFewPoints {
            points: points.len(),
            clusters: k,
        });
    }
    let mut rng = stream(seed, Stream::Kmeans);
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0]).as_f64()).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut pick = d2.len() - 1;
            for (i, w) in d2.iter().enumerate() {
                if r < *w {
                    pick = i;
                    break;
                }
                r -= *w;
            }
            pick
        } else {
            // every point coincides with a centroid already
            rng.random_range(0..points.len())
        };
        centroids.push(points[next].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &centroids[centroids.len() - 1]).as_f64());
        }
    }
    Ok(centroids)
}

/// Lloyd iterations from given centroids. Stops when no centroid moves by
/// `tol` or more (Euclidean), or after `max_iter` updates. A centroid left
/// without members is moved onto the point farthest from its own centroid.
pub fn lloyd<T: Scalar>(points: &[Vec<T>], init: Vec<Vec<T>>, params: &KMeansParams) -> KMeansResult<T> {
    let k = init.len();
    let dim = init[0].len();
    let mut centroids = init;
    let mut assignment = vec![0usize; points.len()];
    let mut dist = vec![T::zero(); points.len()];
    let mut trace = Vec::new();
    let mut iterations = 0;

    let assign = |centroids: &[Vec<T>], assignment: &mut [usize], dist: &mut [T]| -> T {
        let mut inertia = T::zero();
        for ((p, a), d) in points.iter().zip(assignment.iter_mut()).zip(dist.iter_mut()) {
            let (c, dd) = nearest(p, centroids);
            *a = c;
            *d = dd;
            inertia += dd;
        }
        inertia
    };

    let mut inertia = assign(&centroids, &mut assignment, &mut dist);
    trace.push(inertia);
    while iterations < params.max_iter {
        iterations += 1;
        let mut sums = vec![vec![T::zero(); dim]; k];
        let mut counts = vec![0usize; k];
        for (p, a) in points.iter().zip(&assignment) {
            counts[*a] += 1;
            for (s, x) in sums[*a].iter_mut().zip(p) {
                *s += *x;
            }
        }
        let mut shift = T::zero();
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let n = T::of(counts[c] as f64);
            let new: Vec<T> = sums[c].iter().map(|s| *s / n).collect();
            shift = shift.max(sq_dist(&new, &centroids[c]).sqrt());
            centroids[c] = new;
        }
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let mut far = 0;
            for i in 1..points.len() {
                if dist[i] > dist[far] {
                    far = i;
                }
            }
            log::debug!("k-means: reseeding empty cluster {c} at point {far}");
            centroids[c] = points[far].clone();
            dist[far] = T::zero();
            shift = T::infinity();
        }
        inertia = assign(&centroids, &mut assignment, &mut dist);
        trace.push(inertia);
        if shift.as_f64() < params.tol {
            break;
        }
    }
    KMeansResult {
        assignment,
        centroids,
        inertia,
        trace,
        iterations,
    }
}

pub fn kmeans<T: Scalar>(points: &[Vec<T>], k: usize, seed: u64, params: &KMeansParams) -> Result<KMeansResult<T>> {
    let init = kmeans_pp_init(points, k, seed)?;
    Ok(lloyd(points, init, params))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentAssignment {
    /// Environment of each training positive, in the order given to [`assign_environments`].
    pub env_of: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    pub n_envs: usize,
}

impl EnvironmentAssignment {
    /// Everything in environment 0.
    pub fn single(n: usize) -> Self {
        Self {
            env_of: vec![0; n],
            centroids: Vec::new(),
            inertia: 0.0,
            n_envs: 1,
        }
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut out = vec![0; self.n_envs];
        for e in &self.env_of {
            out[*e] += 1;
        }
        out
    }
}

/// Clusters the eval-mode interaction representations of `records` into `n_envs` environments.
pub fn assign_environments<T: Scalar>(
    state: &ModelState<T>,
    d: &Dataset,
    records: &[InteractionRecord],
    n_envs: usize,
    seed: u64,
    params: &KMeansParams,
) -> Result<EnvironmentAssignment> {
    if n_envs == 0 {
        return Err(IflError::Config("number of environments must be at least 1".into()));
    }
    if records.is_empty() {
        return Err(IflError::InsufficientPositives { have: 0, need: 1 });
    }
    if n_envs == 1 {
        return Ok(EnvironmentAssignment::single(records.len()));
    }
    let zu = state.encode_all(Side::User, &d.users);
    let zi = state.encode_all(Side::Item, &d.items);
    let points: Vec<Vec<T>> = records
        .iter()
        .map(|r| interaction_rep(&zu[r.user], &zi[r.item]))
        .collect();
    let res = kmeans(&points, n_envs, seed, params)?;
    Ok(EnvironmentAssignment {
        env_of: res.assignment,
        centroids: res
            .centroids
            .iter()
            .map(|c| c.iter().map(|x| x.as_f64()).collect())
            .collect(),
        inertia: res.inertia.as_f64(),
        n_envs,
    })
}

/// `interaction_index,env_id` rows.
pub fn write_environments(path: &std::path::Path, a: &EnvironmentAssignment) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["interaction_index", "env_id"])?;
    for (i, e) in a.env_of.iter().enumerate() {
        w.write_record([i.to_string(), e.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(xs: &[f64]) -> Vec<Vec<f64>> {
        xs.iter().map(|x| vec![*x]).collect()
    }

    #[test]
    fn well_separated_1d() {
        let p = pts(&[0.0, 0.1, 10.0, 10.1]);
        for seed in 0..20 {
            let r = kmeans(&p, 2, seed, &KMeansParams::default()).unwrap();
            assert_eq!(r.assignment[0], r.assignment[1]);
            assert_eq!(r.assignment[2], r.assignment[3]);
            assert_ne!(r.assignment[0], r.assignment[2]);
        }
    }

    #[test]
    fn single_cluster_is_mean() {
        let p = pts(&[1.0, 2.0, 6.0]);
        let r = kmeans(&p, 1, 0, &KMeansParams::default()).unwrap();
        assert!((r.centroids[0][0] - 3.0).abs() < 1e-12);
        assert!(r.assignment.iter().all(|a| *a == 0));
    }

    #[test]
    fn too_few_points() {
        let err = kmeans(&pts(&[1.0]), 2, 0, &KMeansParams::default()).unwrap_err();
        assert_eq!(err.to_string(), "fewer points than clusters (1 < 2)");
    }

    #[test]
    fn empty_cluster_is_reseeded() {
        // second centroid starts far from every point and attracts none
        let p = pts(&[0.0, 1.0, 2.0, 3.0]);
        let r = lloyd(&p, vec![vec![1.5], vec![100.0]], &KMeansParams::default());
        assert!(r.assignment.contains(&1));
        assert!(r.trace.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    }
}
