//! k-means clustering with greedy k-means++ seeding, centroid distances and
//! the hard/easy cluster-pair pools that control self-context difficulty.

use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embed_store::{decode_label_block, encode_label_block, Cursor, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::exec::Executor;

pub const DEFAULT_KMEANS_ITERS: usize = 10;
pub const DEFAULT_POOL_FRACTION: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KMeansOptions {
    pub k: usize,
    pub iters: usize,
    pub seed: u64,
    /// Candidates drawn per seeding step; the one that lowers the potential most wins.
    pub seeding_trials: usize,
}

impl KMeansOptions {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            iters: DEFAULT_KMEANS_ITERS,
            seed,
            seeding_trials: default_seeding_trials(k),
        }
    }
}

/// `2 + 4 ln k`, rounded down.
pub fn default_seeding_trials(k: usize) -> usize {
    2 + (4.0 * (k.max(1) as f64).ln()) as usize
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    k: usize,
    dim: usize,
    centroids: Vec<f32>,
    assignments: Vec<u32>,
    inertia: f64,
    inertia_history: Vec<f64>,
}

impl ClusterModel {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn centroid(&self, c: usize) -> &[f32] {
        &self.centroids[c * self.dim..(c + 1) * self.dim]
    }

    pub fn centroids(&self) -> &[f32] {
        &self.centroids
    }

    pub fn assignments(&self) -> &[u32] {
        &self.assignments
    }

    pub fn inertia(&self) -> f64 {
        self.inertia
    }

    /// Inertia after the seeding assignment, then after each Lloyd iteration.
    pub fn inertia_history(&self) -> &[f64] {
        &self.inertia_history
    }

    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut m = vec![Vec::new(); self.k];
        for (row, &c) in self.assignments.iter().enumerate() {
            m[c as usize].push(row);
        }
        m
    }

    /// Index of the centroid nearest to `v`, lowest index on ties.
    pub fn nearest(&self, v: &[f32]) -> usize {
        nearest_centroid(v, &self.centroids, self.dim).0
    }

    pub fn centroid_matrix(&self) -> Result<EmbeddingMatrix> {
        EmbeddingMatrix::new(self.k, self.dim, self.centroids.clone())
    }

    /// Centroids in the embedding format, and assignments as a bare label
    /// block sidecar.
    pub fn to_bytes(&self) -> Result<(Vec<u8>, Vec<u8>)> {
        let cent = self.centroid_matrix()?.to_bytes(None)?;
        let mut side = Vec::with_capacity(1 + 4 * self.assignments.len());
        encode_label_block(&mut side, Some(&self.assignments));
        Ok((cent, side))
    }

    /// Inverse of [`ClusterModel::to_bytes`]; inertia is recomputed against `data`.
    pub fn from_bytes(centroids: &[u8], assignments: &[u8], data: &EmbeddingMatrix) -> Result<Self> {
        let (cent, _) = EmbeddingMatrix::from_bytes(centroids)?;
        let mut cur = Cursor::new(assignments);
        let assignments = decode_label_block(&mut cur, data.n_rows())?
            .ok_or_else(|| Error::Data("assignment sidecar has no labels".into()))?;
        Self::from_parts(cent.n_rows(), cent.data().to_vec(), assignments, data)
    }

    pub fn save(&self, centroids_path: &Path, assignments_path: &Path) -> Result<()> {
        let (cent, side) = self.to_bytes()?;
        std::fs::write(centroids_path, cent)?;
        std::fs::write(assignments_path, side)?;
        Ok(())
    }

    pub fn load(centroids_path: &Path, assignments_path: &Path, data: &EmbeddingMatrix) -> Result<Self> {
        Self::from_bytes(&std::fs::read(centroids_path)?, &std::fs::read(assignments_path)?, data)
    }

    pub fn from_parts(k: usize, centroids: Vec<f32>, assignments: Vec<u32>, data: &EmbeddingMatrix) -> Result<Self> {
        let dim = data.dim();
        if centroids.len() != k * dim {
            return Err(Error::config(format!(
                "centroids have {} values, expected {k}x{dim}",
                centroids.len()
            )));
        }
        if assignments.len() != data.n_rows() {
            return Err(Error::Length(format!(
                "{} assignments for {} rows",
                assignments.len(),
                data.n_rows()
            )));
        }
        if assignments.iter().any(|&a| a as usize >= k) {
            return Err(Error::Data("assignment out of range".into()));
        }
        let inertia = (0..data.n_rows())
            .map(|r| {
                let c = assignments[r] as usize;
                sq_dist(data.row(r), &centroids[c * dim..(c + 1) * dim])
            })
            .sum();
        Ok(Self {
            k,
            dim,
            centroids,
            assignments,
            inertia,
            inertia_history: vec![inertia],
        })
    }
}

pub(crate) fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum()
}

fn nearest_centroid(v: &[f32], centroids: &[f32], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, cent) in centroids.chunks(dim).enumerate() {
        let d = sq_dist(v, cent);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// k-means with the default executor.
pub fn kmeans(matrix: &EmbeddingMatrix, k: usize, iters: usize, seed: u64) -> Result<ClusterModel> {
    let mut opts = KMeansOptions::new(k, seed);
    opts.iters = iters;
    kmeans_with(matrix, &opts, Executor::default())
}

/// Greedy k-means++ seeding followed by exactly `opts.iters` Lloyd iterations.
///
/// Each iteration recomputes centroids as member means, repairs empty
/// clusters by moving in the point farthest from its centroid, and then
/// reassigns every row to its nearest centroid.
pub fn kmeans_with(matrix: &EmbeddingMatrix, opts: &KMeansOptions, exec: Executor) -> Result<ClusterModel> {
    let n = matrix.n_rows();
    let dim = matrix.dim();
    let k = opts.k;
    if k == 0 {
        return Err(Error::validation("k must be >= 1"));
    }
    if k > n {
        return Err(Error::validation(format!("k = {k} exceeds {n} rows")));
    }
    if opts.iters < 1 {
        return Err(Error::validation("iters must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut centroids = seed_plus_plus(matrix, k, opts.seeding_trials.max(1), &mut rng, exec);

    let (mut assignments, mut dists) = assign(matrix, &centroids, exec);
    let mut history = vec![dists.iter().sum::<f64>()];

    for _ in 0..opts.iters {
        update_means(matrix, &assignments, &mut centroids, k);
        repair_empty(matrix, &mut assignments, &mut dists, &mut centroids, k);
        let (a, d) = assign(matrix, &centroids, exec);
        assignments = a;
        dists = d;
        history.push(dists.iter().sum());
    }
    // A final reassignment can leave a cluster empty; fix without a mean update.
    for _ in 0..k {
        if !repair_empty(matrix, &mut assignments, &mut dists, &mut centroids, k) {
            break;
        }
        let (a, d) = assign(matrix, &centroids, exec);
        assignments = a;
        dists = d;
        *history.last_mut().expect("history") = dists.iter().sum();
    }

    let inertia = *history.last().expect("history");
    if !inertia.is_finite() {
        return Err(Error::Data("non-finite inertia".into()));
    }
    Ok(ClusterModel {
        k,
        dim,
        centroids,
        assignments,
        inertia,
        inertia_history: history,
    })
}

fn seed_plus_plus(matrix: &EmbeddingMatrix, k: usize, trials: usize, rng: &mut ChaCha8Rng, exec: Executor) -> Vec<f32> {
    let n = matrix.n_rows();
    let dim = matrix.dim();
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(matrix.row(first));
    let mut closest: Vec<f64> = exec.map_range(n, |r| sq_dist(matrix.row(r), matrix.row(first)));

    for _ in 1..k {
        let total: f64 = closest.iter().sum();
        let candidates: Vec<usize> = (0..trials)
            .map(|_| {
                if total <= 0.0 {
                    return rng.random_range(0..n);
                }
                let mut target = rng.random::<f64>() * total;
                for (r, &d) in closest.iter().enumerate() {
                    target -= d;
                    if target < 0.0 {
                        return r;
                    }
                }
                closest.iter().rposition(|&d| d > 0.0).unwrap_or(n - 1)
            })
            .collect();

        let mut best: Option<(f64, usize, Vec<f64>)> = None;
        for &cand in &candidates {
            let updated: Vec<f64> = exec.map_range(n, |r| closest[r].min(sq_dist(matrix.row(r), matrix.row(cand))));
            let potential: f64 = updated.iter().sum();
            if best.as_ref().is_none_or(|b| potential < b.0) {
                best = Some((potential, cand, updated));
            }
        }
        let (_, chosen, updated) = best.expect("at least one trial");
        centroids.extend_from_slice(matrix.row(chosen));
        closest = updated;
    }
    centroids
}

fn assign(matrix: &EmbeddingMatrix, centroids: &[f32], exec: Executor) -> (Vec<u32>, Vec<f64>) {
    let dim = matrix.dim();
    let pairs = exec.map_range(matrix.n_rows(), |r| nearest_centroid(matrix.row(r), centroids, dim));
    pairs.into_iter().map(|(c, d)| (c as u32, d)).unzip()
}

fn update_means(matrix: &EmbeddingMatrix, assignments: &[u32], centroids: &mut [f32], k: usize) {
    let dim = matrix.dim();
    let mut sums = vec![0.0f64; k * dim];
    let mut counts = vec![0usize; k];
    for (r, &c) in assignments.iter().enumerate() {
        let c = c as usize;
        counts[c] += 1;
        for (s, &v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(matrix.row(r)) {
            *s += f64::from(v);
        }
    }
    for c in 0..k {
        if counts[c] > 0 {
            for d in 0..dim {
                centroids[c * dim + d] = (sums[c * dim + d] / counts[c] as f64) as f32;
            }
        }
    }
}

/// Returns true if any cluster was empty.
fn repair_empty(
    matrix: &EmbeddingMatrix,
    assignments: &mut [u32],
    dists: &mut [f64],
    centroids: &mut [f32],
    k: usize,
) -> bool {
    let dim = matrix.dim();
    let mut counts = vec![0usize; k];
    for &c in assignments.iter() {
        counts[c as usize] += 1;
    }
    let mut repaired = false;
    for empty in 0..k {
        if counts[empty] > 0 {
            continue;
        }
        // farthest point whose cluster can spare it; lowest row on ties
        let donor = (0..assignments.len())
            .filter(|&r| counts[assignments[r] as usize] > 1)
            .fold(None::<(usize, f64)>, |best, r| match best {
                Some((_, d)) if dists[r] <= d => best,
                _ => Some((r, dists[r])),
            });
        let Some((row, _)) = donor else { break };
        counts[assignments[row] as usize] -= 1;
        counts[empty] += 1;
        assignments[row] = empty as u32;
        dists[row] = 0.0;
        centroids[empty * dim..(empty + 1) * dim].copy_from_slice(matrix.row(row));
        repaired = true;
    }
    repaired
}

/// Symmetric matrix of Euclidean distances between centroids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceMatrix {
    k: usize,
    data: Vec<f64>,
}

impl DistanceMatrix {
    pub fn from_points(points: &[f32], dim: usize) -> Self {
        let k = points.len() / dim;
        let mut data = vec![0.0; k * k];
        for i in 0..k {
            for j in i + 1..k {
                let d = sq_dist(&points[i * dim..(i + 1) * dim], &points[j * dim..(j + 1) * dim]).sqrt();
                data[i * k + j] = d;
                data[j * k + i] = d;
            }
        }
        Self { k, data }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.k + j]
    }
}

pub fn centroid_distance_matrix(model: &ClusterModel) -> DistanceMatrix {
    DistanceMatrix::from_points(&model.centroids, model.dim)
}

/// Unordered cluster pair, always stored with `.0 < .1`.
pub type ClusterPair = (u32, u32);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifficultyPools {
    pub hard_pairs: Vec<ClusterPair>,
    pub easy_pairs: Vec<ClusterPair>,
    pub fraction: f64,
    /// Distance band covered by each pool, used to extend beyond pairs.
    pub hard_band: (f64, f64),
    pub easy_band: (f64, f64),
}

/// Hard pool: the `fraction` of pairs with the smallest centroid distance.
/// Easy pool: the same number with the largest. Ties go to the
/// lexicographically smaller pair.
pub fn difficulty_pools(dist: &DistanceMatrix, fraction: f64) -> Result<DifficultyPools> {
    let k = dist.k();
    if k < 2 {
        return Err(Error::validation("difficulty pools need at least two clusters"));
    }
    if !(fraction > 0.0 && fraction <= 0.5) {
        return Err(Error::validation(format!("fraction {fraction} outside (0, 0.5]")));
    }
    let mut pairs: Vec<(f64, ClusterPair)> = Vec::with_capacity(k * (k - 1) / 2);
    for i in 0..k {
        for j in i + 1..k {
            pairs.push((dist.get(i, j), (i as u32, j as u32)));
        }
    }
    let count = ((fraction * pairs.len() as f64) - 1e-9).ceil().max(1.0) as usize;

    let mut asc = pairs.clone();
    asc.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut desc = pairs;
    desc.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));

    let hard: Vec<(f64, ClusterPair)> = asc[..count].to_vec();
    let easy: Vec<(f64, ClusterPair)> = desc[..count].to_vec();
    if hard.iter().any(|h| easy.iter().any(|e| e.1 == h.1)) {
        return Err(Error::validation("pools overlap"));
    }
    let band = |v: &[(f64, ClusterPair)]| {
        v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            (lo.min(p.0), hi.max(p.0))
        })
    };
    Ok(DifficultyPools {
        hard_band: band(&hard),
        easy_band: band(&easy),
        hard_pairs: hard.into_iter().map(|p| p.1).collect(),
        easy_pairs: easy.into_iter().map(|p| p.1).collect(),
        fraction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(points: &[f32]) -> EmbeddingMatrix {
        // 1-D data embedded in 2-D (dim must be >= 2)
        EmbeddingMatrix::from_rows(&points.iter().map(|&p| vec![p, 0.0]).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn default_iteration_count() {
        assert_eq!(KMeansOptions::new(3, 0).iters, 10);
        assert_eq!(DEFAULT_KMEANS_ITERS, 10);
    }

    #[test]
    fn exact_fit_on_repeated_points() {
        let mut rows = Vec::new();
        for p in 0..4 {
            for _ in 0..3 {
                rows.push(vec![p as f32 * 5.0, -(p as f32)]);
            }
        }
        let m = EmbeddingMatrix::from_rows(&rows).unwrap();
        let model = kmeans(&m, 4, 10, 1).unwrap();
        assert_eq!(model.inertia(), 0.0);
        let members = model.members();
        for group in members {
            assert_eq!(group.len(), 3);
            let first = m.row(group[0]).to_vec();
            assert!(group.iter().all(|&r| m.row(r) == first.as_slice()));
        }
    }

    #[test]
    fn four_points_two_clusters() {
        // balanced partitions: {0,1}{10,11} costs 1.0, {0,10}{1,11} costs 100, {0,11}{1,10} costs 101
        let m = line(&[0.0, 1.0, 10.0, 11.0]);
        let model = kmeans(&m, 2, 10, 3).unwrap();
        assert!((model.inertia() - 1.0).abs() < 1e-9);
        let mut cs: Vec<f32> = (0..2).map(|c| model.centroid(c)[0]).collect();
        cs.sort_by(f32::total_cmp);
        assert_eq!(cs, vec![0.5, 10.5]);
    }

    #[test]
    fn k_larger_than_rows_rejected() {
        let m = line(&[0.0, 1.0]);
        assert!(matches!(kmeans(&m, 3, 10, 0), Err(Error::Validation(_))));
    }

    #[test]
    fn distance_matrix_examples() {
        let d = DistanceMatrix::from_points(&[0.0, 0.0, 3.0, 4.0], 2);
        assert_eq!(d.get(0, 1), 5.0);
        assert_eq!(d.get(1, 0), 5.0);
        assert_eq!(d.get(0, 0), 0.0);

        let d = DistanceMatrix::from_points(&[0.0, 0.0, 1.0, 0.0, 3.0, 0.0], 2);
        assert_eq!((d.get(0, 1), d.get(1, 2), d.get(0, 2)), (1.0, 2.0, 3.0));
    }

    #[test]
    fn collinear_pools() {
        let d = DistanceMatrix::from_points(&[0.0, 0.0, 1.0, 0.0, 3.0, 0.0], 2);
        let pools = difficulty_pools(&d, 1.0 / 3.0).unwrap();
        assert_eq!(pools.hard_pairs, vec![(0, 1)]);
        assert_eq!(pools.easy_pairs, vec![(0, 2)]);
    }

    #[test]
    fn two_clusters_overlap() {
        let d = DistanceMatrix::from_points(&[0.0, 0.0, 1.0, 0.0], 2);
        let err = difficulty_pools(&d, 0.5).unwrap_err();
        assert!(err.to_string().contains("pools overlap"));
    }

    #[test]
    fn pool_argument_checks() {
        let d = DistanceMatrix::from_points(&[0.0, 0.0], 2);
        assert!(difficulty_pools(&d, 0.05).is_err());
        let d = DistanceMatrix::from_points(&[0.0, 0.0, 1.0, 0.0, 3.0, 0.0], 2);
        assert!(difficulty_pools(&d, 0.0).is_err());
        assert!(difficulty_pools(&d, 0.6).is_err());
    }

    #[test]
    fn save_load_roundtrip() {
        let m = line(&[0.0, 1.0, 10.0, 11.0]);
        let model = kmeans(&m, 2, 10, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (c, a) = (dir.path().join("c.emb"), dir.path().join("a.lbl"));
        model.save(&c, &a).unwrap();
        let back = ClusterModel::load(&c, &a, &m).unwrap();
        assert_eq!(back.centroids(), model.centroids());
        assert_eq!(back.assignments(), model.assignments());
        assert!((back.inertia() - model.inertia()).abs() < 1e-9);
    }
}
