//! Shared helpers for the integration tests: random instances and naive
//! reference implementations written straight from the loss definitions.

#![allow(dead_code)]

use graft_core::align::GroundGroup;
use graft_core::EmbeddingVec;
use rand::Rng;
use rand_distr::StandardNormal;

pub fn random_unit<R: Rng>(rng: &mut R, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let n = norm(&v);
        if n > 1e-3 {
            return v.iter().map(|x| x / n).collect();
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn normalize(a: &[f64]) -> Vec<f64> {
    let n = norm(a);
    a.iter().map(|x| x / n).collect()
}

/// Ground embeddings for `sizes.len()` tiles, `sizes[i]` per tile.
pub fn random_groups<R: Rng>(rng: &mut R, sizes: &[usize], d: usize) -> Vec<Vec<Vec<f64>>> {
    sizes
        .iter()
        .map(|&n| (0..n).map(|_| random_unit(rng, d)).collect())
        .collect()
}

pub fn to_groups(raw: &[Vec<Vec<f64>>]) -> Vec<GroundGroup> {
    raw.iter()
        .map(|g| {
            GroundGroup::new(
                g.iter()
                    .map(|v| EmbeddingVec::normalized(v.clone()).unwrap())
                    .collect(),
            )
            .unwrap()
        })
        .collect()
}

fn all_keys(groups: &[Vec<Vec<f64>>]) -> Vec<&Vec<f64>> {
    groups.iter().flatten().collect()
}

/// Plain softmax probability of `pos` among `keys`, without max shifting.
fn prob(anchor: &[f64], pos: &[f64], keys: &[&Vec<f64>], tau: f64) -> f64 {
    let denom: f64 = keys.iter().map(|k| (dot(anchor, k) / tau).exp()).sum();
    (dot(anchor, pos) / tau).exp() / denom
}

pub fn naive_image(sat: &[Vec<f64>], groups: &[Vec<Vec<f64>>], tau: f64) -> f64 {
    let keys = all_keys(groups);
    let mut total = 0.0;
    for (s, g) in sat.iter().zip(groups) {
        let mut t = 0.0;
        for pos in g {
            t -= prob(s, pos, &keys, tau).ln();
        }
        total += t / g.len() as f64;
    }
    total / sat.len() as f64
}

pub fn naive_sum_prob(sat: &[Vec<f64>], groups: &[Vec<Vec<f64>>], tau: f64) -> f64 {
    let keys = all_keys(groups);
    let mut total = 0.0;
    for (s, g) in sat.iter().zip(groups) {
        let mean_p: f64 = g.iter().map(|pos| prob(s, pos, &keys, tau)).sum::<f64>() / g.len() as f64;
        total -= mean_p.ln();
    }
    total / sat.len() as f64
}

pub fn naive_avg_rep(sat: &[Vec<f64>], groups: &[Vec<Vec<f64>>], tau: f64) -> f64 {
    let centers: Vec<Vec<f64>> = groups
        .iter()
        .map(|g| {
            let d = g[0].len();
            let mut m = vec![0.0; d];
            for v in g {
                for (a, b) in m.iter_mut().zip(v) {
                    *a += b;
                }
            }
            normalize(&m)
        })
        .collect();
    let keys: Vec<&Vec<f64>> = centers.iter().collect();
    let mut total = 0.0;
    for (i, s) in sat.iter().enumerate() {
        total -= prob(s, &centers[i], &keys, tau).ln();
    }
    total / sat.len() as f64
}

pub fn naive_l2(sat: &[Vec<f64>], groups: &[Vec<Vec<f64>>]) -> f64 {
    let mut total = 0.0;
    for (s, g) in sat.iter().zip(groups) {
        let mut t = 0.0;
        for e in g {
            t += s.iter().zip(e).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        }
        total += t / g.len() as f64;
    }
    total / sat.len() as f64
}

/// `anchors[i][j]` is the patch embedding that ground `j` of tile `i` falls in.
pub fn naive_pixel(anchors: &[Vec<Vec<f64>>], groups: &[Vec<Vec<f64>>], tau: f64) -> f64 {
    let keys = all_keys(groups);
    let mut total = 0.0;
    for (a, g) in anchors.iter().zip(groups) {
        let mut t = 0.0;
        for (anchor, pos) in a.iter().zip(g) {
            t -= prob(anchor, pos, &keys, tau).ln();
        }
        total += t / g.len() as f64;
    }
    total / anchors.len() as f64
}

/// AP@k written as the literal sum of precision@r over relevant ranks, each
/// precision recounted from scratch.
pub fn brute_ap_at_k(rel: &[bool], k: usize) -> f64 {
    let r_total = rel.iter().filter(|&&x| x).count();
    let denom = k.min(r_total);
    if denom == 0 {
        return 0.0;
    }
    let mut sum = 0.0;
    for r in 1..=k.min(rel.len()) {
        if rel[r - 1] {
            let hits = rel[..r].iter().filter(|&&x| x).count();
            sum += hits as f64 / r as f64;
        }
    }
    sum / denom as f64
}

/// Relative error between two gradient vectors.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = norm(a).max(norm(b)).max(1e-8);
    diff / scale
}
