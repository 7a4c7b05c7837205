//! Two-dimensional UMAP embedding: exact k-nearest-neighbour fuzzy graph,
//! spectral initialisation and negative-sampling SGD, following the
//! reference algorithm. Single-threaded and bit-reproducible for a seed.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::analysis::{parse_label, LatentMatrix};
use crate::dataset::Label;
use crate::error::{arg_err, shape_err};
use crate::rng::{self, tag};
use crate::{Error, Result};

const SMOOTH_K_TOLERANCE: f64 = 1e-5;
const MIN_K_DIST_SCALE: f64 = 1e-3;
/// Largest graph for which the dense spectral initialisation is attempted.
const SPECTRAL_MAX_N: usize = 4000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UmapParams {
    pub n_neighbors: usize,
    pub min_dist: f64,
    pub spread: f64,
    /// Optimisation epochs; `None` picks 500 for up to 10 000 points, else 200.
    pub n_epochs: Option<usize>,
    pub learning_rate: f64,
    pub negative_sample_rate: usize,
    pub repulsion_strength: f64,
    pub seed: u64,
}

impl Default for UmapParams {
    fn default() -> Self {
        Self {
            n_neighbors: 15,
            min_dist: 0.1,
            spread: 1.0,
            n_epochs: None,
            learning_rate: 1.0,
            negative_sample_rate: 5,
            repulsion_strength: 1.0,
            seed: 42,
        }
    }
}

impl UmapParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_neighbors < 2 {
            return arg_err("n_neighbors must be at least 2");
        }
        if !(self.spread > 0.0) || !(0.0..=self.spread).contains(&self.min_dist) {
            return arg_err("min_dist must be in [0, spread] and spread positive");
        }
        if !(self.learning_rate > 0.0) || !(self.repulsion_strength >= 0.0) {
            return arg_err("learning_rate must be positive and repulsion_strength non-negative");
        }
        if self.n_epochs == Some(0) {
            return arg_err("n_epochs must be at least 1");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Embedding2D {
    pub coords: Vec<[f64; 2]>,
    pub params: UmapParams,
}

impl Embedding2D {
    /// Header `id,label,u0,u1`.
    pub fn write_csv(&self, path: &Path, ids: &[String], labels: &[Label]) -> Result<()> {
        if ids.len() != self.coords.len() || labels.len() != self.coords.len() {
            return shape_err("ids and labels must match the embedding rows");
        }
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["id", "label", "u0", "u1"])?;
        for ((id, l), p) in ids.iter().zip(labels).zip(&self.coords) {
            w.write_record([id.clone(), l.to_string(), p[0].to_string(), p[1].to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads coordinates, ids and labels; the parameters are not stored in
    /// the CSV and come back as defaults.
    pub fn read_csv(path: &Path) -> Result<(Self, Vec<String>, Vec<Label>)> {
        let bad = |reason: String| Error::Ingestion {
            path: path.to_path_buf(),
            reason,
        };
        let mut coords = Vec::new();
        let mut ids = Vec::new();
        let mut labels = Vec::new();
        for rec in csv::Reader::from_path(path)?.records() {
            let rec = rec?;
            if rec.len() != 4 {
                return Err(bad("expected id,label,u0,u1".into()));
            }
            ids.push(rec[0].to_string());
            labels.push(parse_label(&rec[1]).ok_or_else(|| bad(format!("bad label {:?}", &rec[1])))?);
            let p = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("{s:?}: {e}")));
            coords.push([p(&rec[2])?, p(&rec[3])?]);
        }
        Ok((
            Self {
                coords,
                params: UmapParams::default(),
            },
            ids,
            labels,
        ))
    }
}

/// Exact k nearest neighbours (self included, distance 0 first), ordered by
/// distance then index.
pub(crate) fn knn(data: &[f64], n: usize, dim: usize, k: usize) -> (Vec<usize>, Vec<f64>) {
    let rows = crate::par::map_range(n, |i| {
        let pi = &data[i * dim..(i + 1) * dim];
        let mut d: Vec<(f64, usize)> = (0..n)
            .map(|j| {
                let pj = &data[j * dim..(j + 1) * dim];
                let s: f64 = pi.iter().zip(pj).map(|(a, b)| (a - b) * (a - b)).sum();
                (if i == j { 0.0 } else { s.sqrt() }, j)
            })
            .collect();
        // Self sorts first among zero-distance duplicates.
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then((a.1 != i).cmp(&(b.1 != i))).then(a.1.cmp(&b.1)));
        d.truncate(k);
        d
    });
    let mut idx = Vec::with_capacity(n * k);
    let mut dist = Vec::with_capacity(n * k);
    for r in rows {
        for (d, j) in r {
            idx.push(j);
            dist.push(d);
        }
    }
    (idx, dist)
}

/// Per-point `(rho, sigma)` such that `sum_j exp(-(d_j - rho) / sigma)`
/// over the non-self neighbours equals `log2(k)`.
pub(crate) fn smooth_knn_dist(dist: &[f64], n: usize, k: usize) -> (Vec<f64>, Vec<f64>) {
    let target = (k as f64).log2();
    let mean_all = dist.iter().sum::<f64>() / dist.len().max(1) as f64;
    let mut rhos = vec![0.0; n];
    let mut sigmas = vec![0.0; n];
    for i in 0..n {
        let row = &dist[i * k..(i + 1) * k];
        let rho = row.iter().copied().find(|d| *d > 0.0).unwrap_or(0.0);
        let (mut lo, mut hi, mut mid) = (0.0f64, f64::INFINITY, 1.0f64);
        for _ in 0..64 {
            let psum: f64 = row[1..]
                .iter()
                .map(|&d| {
                    let e = d - rho;
                    if e > 0.0 {
                        (-e / mid).exp()
                    } else {
                        1.0
                    }
                })
                .sum();
            if (psum - target).abs() < SMOOTH_K_TOLERANCE {
                break;
            }
            if psum > target {
                hi = mid;
                mid = (lo + hi) / 2.0;
            } else {
                lo = mid;
                if hi == f64::INFINITY {
                    mid *= 2.0;
                } else {
                    mid = (lo + hi) / 2.0;
                }
            }
        }
        let mean_row = row.iter().sum::<f64>() / k as f64;
        let floor = if rho > 0.0 { mean_row } else { mean_all };
        rhos[i] = rho;
        sigmas[i] = mid.max(MIN_K_DIST_SCALE * floor);
    }
    (rhos, sigmas)
}

/// Symmetrised fuzzy graph as a sorted edge list `(head, tail, weight)` in
/// both directions.
pub(crate) fn fuzzy_graph(data: &[f64], n: usize, dim: usize, k: usize) -> Vec<(usize, usize, f64)> {
    let (idx, dist) = knn(data, n, dim, k);
    let (rhos, sigmas) = smooth_knn_dist(&dist, n, k);
    let mut directed = std::collections::BTreeMap::new();
    for i in 0..n {
        for s in 0..k {
            let j = idx[i * k + s];
            if j == i {
                continue;
            }
            let e = dist[i * k + s] - rhos[i];
            let w = if e <= 0.0 { 1.0 } else { (-e / sigmas[i]).exp() };
            directed.insert((i, j), w);
        }
    }
    let mut sym = std::collections::BTreeMap::new();
    for (&(i, j), &w) in &directed {
        let wt = directed.get(&(j, i)).copied().unwrap_or(0.0);
        let v = w + wt - w * wt;
        sym.insert((i, j), v);
        sym.insert((j, i), v);
    }
    sym.into_iter()
        .filter(|(_, w)| *w > 0.0)
        .map(|((i, j), w)| (i, j, w))
        .collect()
}

/// Fits `1 / (1 + a x^(2b))` to the target membership curve by
/// Levenberg-Marquardt least squares.
pub fn find_ab_params(spread: f64, min_dist: f64) -> (f64, f64) {
    let xs: Vec<f64> = (0..300).map(|i| 3.0 * spread * i as f64 / 299.0).collect();
    let ys: Vec<f64> = xs
        .iter()
        .map(|&x| if x < min_dist { 1.0 } else { (-(x - min_dist) / spread).exp() })
        .collect();
    let sse = |a: f64, b: f64| -> f64 {
        xs.iter()
            .zip(&ys)
            .map(|(&x, &y)| {
                let r = 1.0 / (1.0 + a * x.powf(2.0 * b)) - y;
                r * r
            })
            .sum()
    };
    let (mut a, mut b) = (1.0f64, 1.0f64);
    let mut lambda = 1e-3;
    let mut cost = sse(a, b);
    for _ in 0..500 {
        let (mut jtj, mut jtr) = ([[0.0f64; 2]; 2], [0.0f64; 2]);
        for (&x, &y) in xs.iter().zip(&ys) {
            if x <= 0.0 {
                continue;
            }
            let p = x.powf(2.0 * b);
            let den = 1.0 + a * p;
            let r = 1.0 / den - y;
            let da = -p / (den * den);
            let db = -a * p * 2.0 * x.ln() / (den * den);
            let g = [da, db];
            for u in 0..2 {
                jtr[u] += g[u] * r;
                for v in 0..2 {
                    jtj[u][v] += g[u] * g[v];
                }
            }
        }
        let mut improved = false;
        for _ in 0..20 {
            let m = [
                [jtj[0][0] * (1.0 + lambda), jtj[0][1]],
                [jtj[1][0], jtj[1][1] * (1.0 + lambda)],
            ];
            let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
            if det == 0.0 {
                lambda *= 10.0;
                continue;
            }
            let sa = -(m[1][1] * jtr[0] - m[0][1] * jtr[1]) / det;
            let sb = -(m[0][0] * jtr[1] - m[1][0] * jtr[0]) / det;
            let (na, nb) = (a + sa, b + sb);
            let nc = if na > 0.0 && nb > 0.0 { sse(na, nb) } else { f64::INFINITY };
            if nc < cost {
                let done = (cost - nc) <= 1e-15 * cost.max(1e-300);
                a = na;
                b = nb;
                cost = nc;
                lambda = (lambda / 10.0).max(1e-12);
                improved = !done;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    (a, b)
}

fn connected_components(n: usize, edges: &[(usize, usize, f64)]) -> usize {
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for &(i, j, _) in edges {
        let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
        if ri != rj {
            parent[ri] = rj;
        }
    }
    (0..n).filter(|&i| find(&mut parent, i) == i).count()
}

/// Eigenvectors 2 and 3 of the symmetric normalised Laplacian, or `None`
/// when the graph is disconnected or too large for a dense solve.
fn spectral_init(n: usize, edges: &[(usize, usize, f64)]) -> Option<Vec<[f64; 2]>> {
    if n > SPECTRAL_MAX_N || n < 4 || connected_components(n, edges) != 1 {
        return None;
    }
    let mut deg = vec![0.0f64; n];
    for &(i, _, w) in edges {
        deg[i] += w;
    }
    let mut l = DMatrix::<f64>::identity(n, n);
    for &(i, j, w) in edges {
        l[(i, j)] -= w / (deg[i] * deg[j]).sqrt();
    }
    let eig = SymmetricEigen::new(l);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]).then(a.cmp(&b)));
    let (c0, c1) = (order[1], order[2]);
    let coords: Vec<[f64; 2]> = (0..n)
        .map(|i| [eig.eigenvectors[(i, c0)], eig.eigenvectors[(i, c1)]])
        .collect();
    coords.iter().all(|p| p[0].is_finite() && p[1].is_finite()).then_some(coords)
}

#[inline]
fn clip(v: f64) -> f64 {
    v.clamp(-4.0, 4.0)
}

/// Embeds the rows of `latents` in two dimensions.
pub fn umap_embed(latents: &LatentMatrix, params: &UmapParams) -> Result<Embedding2D> {
    embed_rows(latents.data(), latents.rows(), latents.cols(), params)
}

/// Embeds `n` points of dimension `dim` (row-major) in two dimensions.
pub fn embed_rows(data: &[f64], n: usize, dim: usize, params: &UmapParams) -> Result<Embedding2D> {
    params.validate()?;
    if data.len() != n * dim || dim == 0 {
        return shape_err("data does not have n x dim entries");
    }
    if n < params.n_neighbors + 1 {
        return arg_err(format!(
            "UMAP needs at least n_neighbors + 1 = {} points, got {n}",
            params.n_neighbors + 1
        ));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return arg_err("input contains non-finite values");
    }
    let n_epochs = params.n_epochs.unwrap_or(if n <= 10_000 { 500 } else { 200 });
    let mut edges = fuzzy_graph(data, n, dim, params.n_neighbors);
    let max_w = edges.iter().map(|e| e.2).fold(0.0, f64::max);
    edges.retain(|e| e.2 >= max_w / n_epochs as f64);

    let mut rng = rng::stream(params.seed, &[tag("umap")]);
    let mut emb: Vec<[f64; 2]> = match spectral_init(n, &edges) {
        Some(mut c) => {
            let max_abs = c.iter().flat_map(|p| p.iter()).fold(0.0f64, |m, v| m.max(v.abs()));
            let jitter = Normal::new(0.0, 1e-4).expect("valid sigma");
            for p in &mut c {
                for v in p.iter_mut() {
                    *v = *v * 10.0 / max_abs + jitter.sample(&mut rng);
                }
            }
            c
        }
        None => (0..n)
            .map(|_| [rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0)])
            .collect(),
    };
    for d in 0..2 {
        let lo = emb.iter().map(|p| p[d]).fold(f64::INFINITY, f64::min);
        let hi = emb.iter().map(|p| p[d]).fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        for p in &mut emb {
            p[d] = 10.0 * (p[d] - lo) / span;
        }
    }

    let (a, b) = find_ab_params(params.spread, params.min_dist);
    let gamma = params.repulsion_strength;
    let epochs_per_sample: Vec<f64> = edges.iter().map(|e| max_w / e.2).collect();
    let neg_rate = params.negative_sample_rate as f64;
    let epochs_per_neg: Vec<f64> = epochs_per_sample.iter().map(|e| e / neg_rate).collect();
    let mut next_sample = epochs_per_sample.clone();
    let mut next_neg = epochs_per_neg.clone();

    for epoch in 0..n_epochs {
        let alpha = params.learning_rate * (1.0 - epoch as f64 / n_epochs as f64);
        let ef = epoch as f64;
        for (e, &(j, k, _)) in edges.iter().enumerate() {
            if next_sample[e] > ef {
                continue;
            }
            let (cur, other) = (emb[j], emb[k]);
            let d2 = (cur[0] - other[0]).powi(2) + (cur[1] - other[1]).powi(2);
            let coeff = if d2 > 0.0 {
                -2.0 * a * b * d2.powf(b - 1.0) / (a * d2.powf(b) + 1.0)
            } else {
                0.0
            };
            for d in 0..2 {
                let g = clip(coeff * (cur[d] - other[d]));
                emb[j][d] += g * alpha;
                emb[k][d] -= g * alpha;
            }
            next_sample[e] += epochs_per_sample[e];

            let n_neg = ((ef - next_neg[e]) / epochs_per_neg[e]).floor().max(0.0) as usize;
            for _ in 0..n_neg {
                let s = rng.gen_range(0..n);
                if s == j {
                    continue;
                }
                let (cur, other) = (emb[j], emb[s]);
                let d2 = (cur[0] - other[0]).powi(2) + (cur[1] - other[1]).powi(2);
                let coeff = if d2 > 0.0 {
                    2.0 * gamma * b / ((0.001 + d2) * (a * d2.powf(b) + 1.0))
                } else {
                    0.0
                };
                for d in 0..2 {
                    let g = if coeff > 0.0 {
                        clip(coeff * (cur[d] - other[d]))
                    } else {
                        4.0
                    };
                    emb[j][d] += g * alpha;
                }
            }
            next_neg[e] += n_neg as f64 * epochs_per_neg[e];
        }
    }
    if emb.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
        return arg_err("embedding diverged to non-finite coordinates");
    }
    Ok(Embedding2D {
        coords: emb,
        params: params.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::silhouette;
    use rand_distr::StandardNormal;

    #[test]
    fn ab_fit_matches_reference_curve() {
        let (a, b) = find_ab_params(1.0, 0.1);
        assert!((a - 1.577).abs() < 0.01, "a = {a}");
        assert!((b - 0.895).abs() < 0.01, "b = {b}");
        let (a, b) = find_ab_params(1.0, 0.001);
        assert!((a - 1.929).abs() < 0.02, "a = {a}");
        assert!((b - 0.7915).abs() < 0.01, "b = {b}");
    }

    #[test]
    fn smooth_knn_hits_target() {
        let dist = [0.0, 1.0, 2.0, 3.0, 0.0, 0.5, 0.7, 4.0];
        let (rho, sigma) = smooth_knn_dist(&dist, 2, 4);
        assert_eq!(rho, vec![1.0, 0.5]);
        for i in 0..2 {
            let s: f64 = dist[i * 4 + 1..(i + 1) * 4]
                .iter()
                .map(|d| (-(d - rho[i]).max(0.0) / sigma[i]).exp())
                .sum();
            assert!((s - 2.0).abs() < 1e-4, "{s}");
        }
    }

    #[test]
    fn graph_is_symmetric_with_unit_nearest_edges() {
        let data: Vec<f64> = (0..20).map(|i| (i * i) as f64).collect();
        let edges = fuzzy_graph(&data, 20, 1, 4);
        let map: std::collections::HashMap<(usize, usize), f64> = edges.iter().map(|e| ((e.0, e.1), e.2)).collect();
        for (&(i, j), &w) in &map {
            assert_eq!(map.get(&(j, i)), Some(&w));
            assert!(w > 0.0 && w <= 1.0);
        }
        // The nearest neighbour of point 5 is 4, at distance rho.
        assert_eq!(map[&(5, 4)], 1.0);
    }

    fn blobs(n: usize, dim: usize, sep: f64, seed: u64) -> (Vec<f64>, Vec<Label>) {
        let mut rng = rng::stream(seed, &[]);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let l = i % 2;
            for d in 0..dim {
                let c = if d == 0 && l == 1 { sep } else { 0.0 };
                data.push(c + rng.sample::<f64, _>(StandardNormal));
            }
            labels.push(Label::from_u8(l as u8).unwrap());
        }
        (data, labels)
    }

    #[test]
    fn separated_blobs_embed_apart_and_reproducibly() {
        let (data, labels) = blobs(100, 16, 20.0, 3);
        let params = UmapParams {
            n_epochs: Some(200),
            ..Default::default()
        };
        let e = embed_rows(&data, 100, 16, &params).unwrap();
        assert_eq!(e.coords.len(), 100);
        let flat: Vec<f64> = e.coords.iter().flat_map(|p| p.iter().copied()).collect();
        // The oracle silhouette lives in analysis and is tested separately.
        assert!(silhouette(&flat, 2, &labels).unwrap() > 0.5);
        assert_eq!(embed_rows(&data, 100, 16, &params).unwrap(), e);
        let other = embed_rows(&data, 100, 16, &UmapParams { seed: 7, ..params }).unwrap();
        assert_ne!(other.coords, e.coords);
    }

    #[test]
    fn too_few_points_rejected() {
        let (data, _) = blobs(15, 2, 1.0, 1);
        assert!(embed_rows(&data, 15, 2, &UmapParams::default()).is_err());
        assert!(embed_rows(&data, 15, 2, &UmapParams { n_neighbors: 5, n_epochs: Some(10), ..Default::default() }).is_ok());
    }

    #[test]
    fn disconnected_graph_falls_back_to_random_init() {
        // Two far clusters with k smaller than either cluster are disconnected.
        let mut data = Vec::new();
        for i in 0..10 {
            data.push(i as f64 * 0.01);
        }
        for i in 0..10 {
            data.push(1000.0 + i as f64 * 0.01);
        }
        let edges = fuzzy_graph(&data, 20, 1, 3);
        assert_eq!(connected_components(20, &edges), 2);
        let e = embed_rows(&data, 20, 1, &UmapParams { n_neighbors: 3, n_epochs: Some(50), ..Default::default() }).unwrap();
        assert!(e.coords.iter().all(|p| p[0].is_finite() && p[1].is_finite()));
    }

    #[test]
    fn csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let e = Embedding2D {
            coords: vec![[0.5, -1.25], [3.0, 1e-9]],
            params: UmapParams::default(),
        };
        let ids = vec!["a".to_string(), "b".to_string()];
        let labels = vec![Label::Normal, Label::Glaucoma];
        let p = dir.path().join("e.csv");
        e.write_csv(&p, &ids, &labels).unwrap();
        assert!(std::fs::read_to_string(&p).unwrap().starts_with("id,label,u0,u1\n"));
        assert_eq!(Embedding2D::read_csv(&p).unwrap(), (e, ids, labels));
    }
}
