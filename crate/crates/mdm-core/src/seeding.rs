//! Synthetic-set initialization: joint-feature K-means (the primary method),
//! plus K-center, herding, and uniform-random alternates, and the copy step
//! that turns a selection into an optimizable synthetic set.

use serde::{Deserialize, Serialize};

use crate::dataio::EmbeddingPairSet;
use crate::distill::SyntheticSet;
use crate::error::{MdmError, Result};
use crate::numerics::{Matrix, Rng};
use crate::sphere::{dot, row_norm};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedMethod {
    KmeansJoint,
    Kcenter,
    Herding,
    Random,
}

/// K distinct row indices into the real set plus a method-specific score
/// (quantization error for K-means and random, covering radius for K-center,
/// final mean-tracking residual for herding).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedSelection {
    pub method: SeedMethod,
    pub indices: Vec<usize>,
    pub objective: f64,
}

fn d2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

fn check_k(n: usize, k: usize) -> Result<()> {
    if k == 0 {
        return Err(MdmError::Size("selection size K must be >= 1".into()));
    }
    if k > n {
        return Err(MdmError::Size(format!("K = {k} exceeds N = {n} real rows")));
    }
    Ok(())
}

/// Sum over all rows of the squared distance to the nearest selected row.
pub fn quantization_error(feats: &Matrix, indices: &[usize]) -> Result<f64> {
    if indices.is_empty() {
        return Err(MdmError::Size("empty selection".into()));
    }
    let mut total = 0.0;
    for n in 0..feats.rows() {
        let mut best = f64::INFINITY;
        for &i in indices {
            if i >= feats.rows() {
                return Err(MdmError::Data(format!("selection index {i} out of range")));
            }
            best = best.min(d2(feats.row(n), feats.row(i)));
        }
        total += best;
    }
    Ok(total)
}

fn plus_plus_init(feats: &Matrix, k: usize, rng: &mut Rng) -> Vec<usize> {
    let n = feats.rows();
    let mut chosen = Vec::with_capacity(k);
    let mut is_chosen = vec![false; n];
    let first = rng.below(n as u64) as usize;
    chosen.push(first);
    is_chosen[first] = true;
    let mut dist2: Vec<f64> = (0..n).map(|i| d2(feats.row(i), feats.row(first))).collect();
    while chosen.len() < k {
        let total: f64 = dist2.iter().sum();
        let pick = if total > 0.0 {
            let r = rng.uniform() * total;
            let mut cum = 0.0;
            let mut sel = None;
            for (i, &w) in dist2.iter().enumerate() {
                cum += w;
                if cum > r {
                    sel = Some(i);
                    break;
                }
            }
            // Numerical slack at the top of the cumulative sum: fall back to
            // the last positive-weight index.
            sel.unwrap_or_else(|| {
                dist2
                    .iter()
                    .rposition(|&w| w > 0.0)
                    .expect("total > 0 implies a positive weight")
            })
        } else {
            // All remaining points coincide with a chosen centroid.
            (0..n).find(|&i| !is_chosen[i]).expect("k <= n")
        };
        chosen.push(pick);
        is_chosen[pick] = true;
        for i in 0..n {
            dist2[i] = dist2[i].min(d2(feats.row(i), feats.row(pick)));
        }
    }
    chosen
}

fn nearest_assignment(feats: &Matrix, centroids: &Matrix) -> (Vec<usize>, Vec<f64>) {
    let mut assign = vec![0usize; feats.rows()];
    let mut best_d2 = vec![f64::INFINITY; feats.rows()];
    for i in 0..feats.rows() {
        for kidx in 0..centroids.rows() {
            let d = d2(feats.row(i), centroids.row(kidx));
            if d < best_d2[i] {
                best_d2[i] = d;
                assign[i] = kidx;
            }
        }
    }
    (assign, best_d2)
}

/// Lloyd's K-means with k-means++ initialization, returning the Eq. 4-style
/// member selection together with the per-iteration objective trace (the
/// within-cluster sum of squares after each centroid update).
pub fn kmeans_joint_detailed(
    joint_feats: &Matrix,
    k: usize,
    rng: &mut Rng,
    max_iter: usize,
    tol: f64,
) -> Result<(SeedSelection, Vec<f64>)> {
    let n = joint_feats.rows();
    check_k(n, k)?;
    let d = joint_feats.cols();
    let init = plus_plus_init(joint_feats, k, rng);
    let mut centroids = joint_feats.select_rows(&init)?;
    let mut assign = vec![0usize; n];
    let mut history = Vec::new();
    let mut prev_obj: Option<f64> = None;
    for _ in 0..max_iter.max(1) {
        let (a, mut dists) = nearest_assignment(joint_feats, &centroids);
        assign = a;
        // Reseed empty clusters with the point farthest from its assigned
        // centroid; each fixed cluster becomes a singleton, which keeps the
        // recorded objective non-increasing.
        let mut counts = vec![0usize; k];
        for &c in &assign {
            counts[c] += 1;
        }
        for kidx in 0..k {
            if counts[kidx] == 0 {
                let mut far = 0;
                let mut far_d = f64::NEG_INFINITY;
                for (i, &dv) in dists.iter().enumerate() {
                    if dv > far_d {
                        far_d = dv;
                        far = i;
                    }
                }
                counts[assign[far]] -= 1;
                assign[far] = kidx;
                counts[kidx] = 1;
                dists[far] = 0.0;
            }
        }
        // Update step: centroid = member mean.
        let mut sums = Matrix::zeros(k, d);
        for (i, &c) in assign.iter().enumerate() {
            let row = joint_feats.row(i);
            let s = sums.row_mut(c);
            for j in 0..d {
                s[j] += row[j];
            }
        }
        for kidx in 0..k {
            let inv = 1.0 / counts[kidx] as f64;
            for v in sums.row_mut(kidx) {
                *v *= inv;
            }
        }
        centroids = sums;
        let mut obj = 0.0;
        for (i, &c) in assign.iter().enumerate() {
            obj += d2(joint_feats.row(i), centroids.row(c));
        }
        history.push(obj);
        if let Some(p) = prev_obj {
            if (p - obj).abs() / p.max(1e-12) < tol {
                break;
            }
        }
        prev_obj = Some(obj);
    }
    // Member selection: per cluster, the row with the highest cosine
    // similarity to its centroid; ties broken by lowest index.
    let mut indices = Vec::with_capacity(k);
    for kidx in 0..k {
        let c = centroids.row(kidx);
        let cn = row_norm(c);
        let mut best = None;
        let mut best_cos = f64::NEG_INFINITY;
        for (i, &a) in assign.iter().enumerate() {
            if a != kidx {
                continue;
            }
            let xn = row_norm(joint_feats.row(i));
            let cos = if cn < 1e-12 || xn < 1e-12 {
                -1.0
            } else {
                dot(joint_feats.row(i), c) / (cn * xn)
            };
            if cos > best_cos {
                best_cos = cos;
                best = Some(i);
            }
        }
        indices.push(best.expect("every cluster non-empty after reseeding"));
    }
    let objective = *history.last().expect("at least one iteration");
    Ok((
        SeedSelection {
            method: SeedMethod::KmeansJoint,
            indices,
            objective,
        },
        history,
    ))
}

/// See [`kmeans_joint_detailed`]; this drops the objective trace.
pub fn kmeans_joint(
    joint_feats: &Matrix,
    k: usize,
    rng: &mut Rng,
    max_iter: usize,
    tol: f64,
) -> Result<SeedSelection> {
    kmeans_joint_detailed(joint_feats, k, rng, max_iter, tol).map(|(s, _)| s)
}

/// Farthest-first traversal: uniform-random first center, then repeatedly
/// the point with the largest distance to the selected set.
pub fn kcenter(feats: &Matrix, k: usize, rng: &mut Rng) -> Result<SeedSelection> {
    let n = feats.rows();
    check_k(n, k)?;
    let first = rng.below(n as u64) as usize;
    let mut indices = vec![first];
    let mut in_sel = vec![false; n];
    in_sel[first] = true;
    let mut min_d2: Vec<f64> = (0..n).map(|i| d2(feats.row(i), feats.row(first))).collect();
    while indices.len() < k {
        let mut far = None;
        let mut far_d = f64::NEG_INFINITY;
        for i in 0..n {
            if !in_sel[i] && min_d2[i] > far_d {
                far_d = min_d2[i];
                far = Some(i);
            }
        }
        let p = far.expect("k <= n leaves an unselected point");
        indices.push(p);
        in_sel[p] = true;
        for i in 0..n {
            min_d2[i] = min_d2[i].min(d2(feats.row(i), feats.row(p)));
        }
    }
    let radius = min_d2.iter().cloned().fold(0.0f64, f64::max).sqrt();
    Ok(SeedSelection {
        method: SeedMethod::Kcenter,
        indices,
        objective: radius,
    })
}

/// Greedy herding: at step t pick the unselected row keeping the running sum
/// of selected features closest to `(t+1) * mean`.
pub fn herding(feats: &Matrix, k: usize) -> Result<SeedSelection> {
    let n = feats.rows();
    check_k(n, k)?;
    let d = feats.cols();
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, &v) in mean.iter_mut().zip(feats.row(i)) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut sum = vec![0.0; d];
    let mut indices = Vec::with_capacity(k);
    let mut in_sel = vec![false; n];
    for t in 0..k {
        let scale = (t + 1) as f64;
        let mut best = None;
        let mut best_d = f64::INFINITY;
        for i in 0..n {
            if in_sel[i] {
                continue;
            }
            let row = feats.row(i);
            let dist: f64 = (0..d)
                .map(|j| {
                    let v = sum[j] + row[j] - scale * mean[j];
                    v * v
                })
                .sum();
            if dist < best_d {
                best_d = dist;
                best = Some(i);
            }
        }
        let p = best.expect("k <= n leaves a candidate");
        indices.push(p);
        in_sel[p] = true;
        for (s, &v) in sum.iter_mut().zip(feats.row(p)) {
            *s += v;
        }
    }
    let residual: f64 = sum
        .iter()
        .zip(&mean)
        .map(|(&s, &m)| {
            let v = s - k as f64 * m;
            v * v
        })
        .sum::<f64>()
        .sqrt();
    Ok(SeedSelection {
        method: SeedMethod::Herding,
        indices,
        objective: residual,
    })
}

/// Uniform selection of K distinct rows; scored by quantization error so it
/// is directly comparable to the K-means selection.
pub fn random_selection(feats: &Matrix, k: usize, rng: &mut Rng) -> Result<SeedSelection> {
    let n = feats.rows();
    check_k(n, k)?;
    let indices = rng.sample_distinct(n, k);
    let objective = quantization_error(feats, &indices)?;
    Ok(SeedSelection {
        method: SeedMethod::Random,
        indices,
        objective,
    })
}

/// Copy the selected real pairs into a fresh synthetic set with zeroed
/// momentum buffers.
pub fn build_synthetic(selection: &SeedSelection, data: &EmbeddingPairSet) -> Result<SyntheticSet> {
    let img = data.image.select_rows(&selection.indices)?;
    let txt = data.text.select_rows(&selection.indices)?;
    let (vi, vt) = (
        Matrix::zeros(img.rows(), img.cols()),
        Matrix::zeros(txt.rows(), txt.cols()),
    );
    Ok(SyntheticSet {
        img_params: img,
        txt_params: txt,
        vel_img: vi,
        vel_txt: vt,
        iteration: 0,
    })
}
