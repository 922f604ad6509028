//! Retrieval-based evaluation: train fresh projectors on a synthetic set,
//! then score image/text recall on a held-out real test split.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataio::EmbeddingPairSet;
use crate::distill::SyntheticSet;
use crate::error::{MdmError, Result};
use crate::experts::sgd_infonce_train;
use crate::numerics::{Matrix, Rng};
use crate::projector::{ArchSpec, Projector};

/// Recall levels reported everywhere.
pub const REPORT_KS: [usize; 3] = [1, 5, 10];

/// Training schedule for evaluation projectors.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct EvalTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Minibatch size; effectively `min(batch, K)` for a K-pair set.
    pub batch: usize,
    pub init_scale: f64,
}

impl Default for EvalTrainConfig {
    fn default() -> Self {
        EvalTrainConfig {
            epochs: 100,
            lr: 0.1,
            batch: 64,
            init_scale: 1.0,
        }
    }
}

impl EvalTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 {
            return Err(MdmError::Config("epochs and batch must be >= 1".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(MdmError::Config(format!(
                "lr must be >= 0, got {}",
                self.lr
            )));
        }
        if !(self.init_scale.is_finite() && self.init_scale > 0.0) {
            return Err(MdmError::Config(format!(
                "init_scale must be > 0, got {}",
                self.init_scale
            )));
        }
        Ok(())
    }
}

/// Recalls of a single trained projector.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedRecalls {
    pub ir: BTreeMap<usize, f64>,
    pub tr: BTreeMap<usize, f64>,
    pub mean: f64,
}

/// Mean/std recalls over independent repeats.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub repeats: usize,
    pub ir_at: BTreeMap<usize, f64>,
    pub tr_at: BTreeMap<usize, f64>,
    pub mean: f64,
    pub std_ir: BTreeMap<usize, f64>,
    pub std_tr: BTreeMap<usize, f64>,
    pub std_mean: f64,
    pub per_seed: Vec<SeedRecalls>,
}

/// Recall@K for both directions over aligned unit embeddings: `ir` retrieves
/// images from text queries, `tr` retrieves texts from image queries. The
/// true partner shares the row index; ties rank the lower candidate index
/// first; K above N is clamped to N.
pub fn recall_at_k(
    zv: &Matrix,
    zt: &Matrix,
    ks: &[usize],
) -> Result<(BTreeMap<usize, f64>, BTreeMap<usize, f64>)> {
    if zv.rows() != zt.rows() || zv.cols() != zt.cols() {
        return Err(MdmError::Shape(format!(
            "embeddings {}x{} vs {}x{}",
            zv.rows(),
            zv.cols(),
            zt.rows(),
            zt.cols()
        )));
    }
    let n = zv.rows();
    if n == 0 {
        return Err(MdmError::Size("recall needs at least one pair".into()));
    }
    if ks.is_empty() {
        return Err(MdmError::Config("recall needs at least one K level".into()));
    }
    if ks.contains(&0) {
        return Err(MdmError::Config("recall K levels must be >= 1".into()));
    }
    let scores = zv.matmul(&zt.transpose())?;

    // tr_rank[i]: rank of text i among candidates for image query i.
    let mut tr_rank = vec![0usize; n];
    let mut ir_rank = vec![0usize; n];
    for i in 0..n {
        let truth = scores.get(i, i);
        let mut ahead = 0;
        for j in 0..n {
            let s = scores.get(i, j);
            if s > truth || (s == truth && j < i) {
                ahead += 1;
            }
        }
        tr_rank[i] = ahead + 1;
    }
    for j in 0..n {
        let truth = scores.get(j, j);
        let mut ahead = 0;
        for i in 0..n {
            let s = scores.get(i, j);
            if s > truth || (s == truth && i < j) {
                ahead += 1;
            }
        }
        ir_rank[j] = ahead + 1;
    }

    let mut ir = BTreeMap::new();
    let mut tr = BTreeMap::new();
    for &k in ks {
        let k_eff = if k > n {
            log::warn!("recall@{k} clamped to N = {n}");
            n
        } else {
            k
        };
        let frac =
            |ranks: &[usize]| ranks.iter().filter(|&&r| r <= k_eff).count() as f64 / n as f64;
        ir.insert(k, frac(&ir_rank));
        tr.insert(k, frac(&tr_rank));
    }
    Ok((ir, tr))
}

fn mean_of(values: impl IntoIterator<Item = f64>, count: usize) -> f64 {
    values.into_iter().sum::<f64>() / count as f64
}

fn population_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

/// Train one fresh projector on the synthetic pairs and score it on `test`.
fn single_eval(
    syn: &SyntheticSet,
    test: &EmbeddingPairSet,
    arch: &ArchSpec,
    cfg: &EvalTrainConfig,
    rng: &mut Rng,
) -> Result<SeedRecalls> {
    let mut p = Projector::init_random(arch, rng, cfg.init_scale)?;
    let batch = cfg.batch.min(syn.len());
    sgd_infonce_train(
        &mut p,
        &syn.img_params,
        &syn.txt_params,
        cfg.epochs,
        cfg.lr,
        batch,
        rng,
        |_, _| {},
    )?;
    let (zv, zt, _) = p.forward(&test.image, &test.text)?;
    let (ir, tr) = recall_at_k(&zv, &zt, &REPORT_KS)?;
    let mean = mean_of(ir.values().chain(tr.values()).copied(), ir.len() + tr.len());
    Ok(SeedRecalls { ir, tr, mean })
}

/// Evaluate a synthetic set: `repeats` independent projectors (disjoint Rng
/// streams forked from `rng`), each trained from a fresh random init, scored
/// on the test split, aggregated as mean and population std (0 when
/// `repeats` is 1).
pub fn evaluate_synthetic(
    syn: &SyntheticSet,
    test: &EmbeddingPairSet,
    arch: &ArchSpec,
    cfg: &EvalTrainConfig,
    repeats: usize,
    rng: &mut Rng,
) -> Result<RetrievalReport> {
    cfg.validate()?;
    if repeats == 0 {
        return Err(MdmError::Config("repeats must be >= 1".into()));
    }
    if syn.is_empty() {
        return Err(MdmError::Size("synthetic set is empty".into()));
    }
    if syn.img_params.cols() != arch.image_dims[0] || syn.txt_params.cols() != arch.text_dims[0] {
        return Err(MdmError::Shape(
            "synthetic dims do not match arch inputs".into(),
        ));
    }
    if test.image.cols() != arch.image_dims[0] || test.text.cols() != arch.text_dims[0] {
        return Err(MdmError::Shape("test dims do not match arch inputs".into()));
    }
    let mut per_seed = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let mut child = rng.fork();
        per_seed.push(single_eval(syn, test, arch, cfg, &mut child)?);
    }

    let collect = |get: fn(&SeedRecalls) -> &BTreeMap<usize, f64>| {
        let mut means = BTreeMap::new();
        let mut stds = BTreeMap::new();
        for &k in REPORT_KS.iter() {
            let vals: Vec<f64> = per_seed.iter().map(|s| get(s)[&k]).collect();
            means.insert(k, mean_of(vals.iter().copied(), vals.len()));
            stds.insert(k, population_std(&vals));
        }
        (means, stds)
    };
    let (ir_at, std_ir) = collect(|s| &s.ir);
    let (tr_at, std_tr) = collect(|s| &s.tr);
    let means: Vec<f64> = per_seed.iter().map(|s| s.mean).collect();
    Ok(RetrievalReport {
        repeats,
        ir_at,
        tr_at,
        mean: mean_of(means.iter().copied(), means.len()),
        std_ir,
        std_tr,
        std_mean: population_std(&means),
        per_seed,
    })
}

/// Evaluate the same synthetic set under several downstream architectures.
pub fn cross_arch_sweep(
    syn: &SyntheticSet,
    test: &EmbeddingPairSet,
    archs: &[ArchSpec],
    cfg: &EvalTrainConfig,
    repeats: usize,
    rng: &mut Rng,
) -> Result<Vec<RetrievalReport>> {
    if archs.is_empty() {
        return Err(MdmError::Config(
            "sweep needs at least one architecture".into(),
        ));
    }
    archs
        .iter()
        .map(|arch| evaluate_synthetic(syn, test, arch, cfg, repeats, rng))
        .collect()
}

pub fn csv_header() -> &'static str {
    "IR@1,IR@5,IR@10,TR@1,TR@5,TR@10,Mean,Std-Mean"
}

pub fn csv_row(report: &RetrievalReport) -> String {
    let cell = |m: &BTreeMap<usize, f64>, k: usize| format!("{:.6}", m[&k]);
    format!(
        "{},{},{},{},{},{},{:.6},{:.6}",
        cell(&report.ir_at, 1),
        cell(&report.ir_at, 5),
        cell(&report.ir_at, 10),
        cell(&report.tr_at, 1),
        cell(&report.tr_at, 5),
        cell(&report.tr_at, 10),
        report.mean,
        report.std_mean
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::projector::Activation;
    use crate::sphere::unit_normalize;

    fn eye(n: usize) -> Matrix {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    /// Independent rank oracle: stable sort by (-score, index).
    fn brute_recalls(scores: &Matrix, k: usize, text_query: bool) -> f64 {
        let n = scores.rows();
        let mut hits = 0;
        for q in 0..n {
            let mut cand: Vec<usize> = (0..n).collect();
            cand.sort_by(|&a, &b| {
                let sa = if text_query {
                    scores.get(a, q)
                } else {
                    scores.get(q, a)
                };
                let sb = if text_query {
                    scores.get(b, q)
                } else {
                    scores.get(q, b)
                };
                sb.partial_cmp(&sa).unwrap().then(a.cmp(&b))
            });
            let pos = cand.iter().position(|&c| c == q).unwrap();
            if pos < k.min(n) {
                hits += 1;
            }
        }
        hits as f64 / n as f64
    }

    #[test]
    fn perfect_alignment_is_one() {
        let z = eye(4);
        let (ir, tr) = recall_at_k(&z, &z, &[1, 5, 10]).unwrap();
        for k in [1, 5, 10] {
            assert_eq!(ir[&k], 1.0);
            assert_eq!(tr[&k], 1.0);
        }
    }

    #[test]
    fn ties_rank_lower_index_first() {
        // All texts identical: every candidate scores the same, so ranking
        // is by index and query i finds its partner at rank i+1.
        let zv = eye(4);
        let mut zt = Matrix::zeros(4, 4);
        for i in 0..4 {
            zt.set(i, 0, 1.0);
        }
        let (_, tr) = recall_at_k(&zv, &zt, &[1, 2, 3]).unwrap();
        assert_eq!(tr[&1], 0.25);
        assert_eq!(tr[&2], 0.5);
        assert_eq!(tr[&3], 0.75);
    }

    #[test]
    fn matches_brute_force_oracle() {
        for seed in 0..20 {
            let mut rng = Rng::new(seed);
            let n = 3 + (seed % 7) as usize;
            let zv = unit_normalize(&rng.gauss_matrix(n, 5, 0.0, 1.0)).unwrap();
            let zt = unit_normalize(&rng.gauss_matrix(n, 5, 0.0, 1.0)).unwrap();
            let scores = zv.matmul(&zt.transpose()).unwrap();
            let (ir, tr) = recall_at_k(&zv, &zt, &[1, 2, 3]).unwrap();
            for k in [1, 2, 3] {
                assert_eq!(
                    tr[&k],
                    brute_recalls(&scores, k, false),
                    "tr@{k} seed {seed}"
                );
                assert_eq!(
                    ir[&k],
                    brute_recalls(&scores, k, true),
                    "ir@{k} seed {seed}"
                );
            }
        }
    }

    #[test]
    fn k_above_n_clamps() {
        let mut rng = Rng::new(5);
        let zv = unit_normalize(&rng.gauss_matrix(3, 4, 0.0, 1.0)).unwrap();
        let zt = unit_normalize(&rng.gauss_matrix(3, 4, 0.0, 1.0)).unwrap();
        let (ir, _) = recall_at_k(&zv, &zt, &[3, 10]).unwrap();
        assert_eq!(ir[&10], ir[&3]);
        assert_eq!(ir[&10], 1.0);
    }

    #[test]
    fn recall_monotone_in_k() {
        let mut rng = Rng::new(6);
        let zv = unit_normalize(&rng.gauss_matrix(10, 4, 0.0, 1.0)).unwrap();
        let zt = unit_normalize(&rng.gauss_matrix(10, 4, 0.0, 1.0)).unwrap();
        let (ir, tr) = recall_at_k(&zv, &zt, &[1, 2, 5, 10]).unwrap();
        for w in [&ir, &tr] {
            let vals: Vec<f64> = w.values().copied().collect();
            assert!(vals.windows(2).all(|p| p[0] <= p[1]));
        }
    }

    #[test]
    fn recall_argument_errors() {
        let z = eye(3);
        assert!(matches!(
            recall_at_k(&z, &eye(4), &[1]),
            Err(MdmError::Shape(_))
        ));
        assert!(matches!(recall_at_k(&z, &z, &[]), Err(MdmError::Config(_))));
        assert!(matches!(
            recall_at_k(&z, &z, &[0]),
            Err(MdmError::Config(_))
        ));
    }

    fn tiny_fixture() -> (SyntheticSet, EmbeddingPairSet, ArchSpec) {
        let mut rng = Rng::new(77);
        let syn = SyntheticSet::new(
            rng.gauss_matrix(6, 4, 0.0, 1.0),
            rng.gauss_matrix(6, 5, 0.0, 1.0),
        )
        .unwrap();
        let test = EmbeddingPairSet::from_matrices(
            "t",
            "test",
            rng.gauss_matrix(12, 4, 0.0, 1.0),
            rng.gauss_matrix(12, 5, 0.0, 1.0),
        )
        .unwrap();
        let arch = ArchSpec::new(vec![4, 3], vec![5, 3], Activation::Tanh).unwrap();
        (syn, test, arch)
    }

    #[test]
    fn evaluate_deterministic_and_std_zero_for_single_repeat() {
        let (syn, test, arch) = tiny_fixture();
        let cfg = EvalTrainConfig {
            epochs: 2,
            ..EvalTrainConfig::default()
        };
        let r1 = evaluate_synthetic(&syn, &test, &arch, &cfg, 1, &mut Rng::new(9)).unwrap();
        let r2 = evaluate_synthetic(&syn, &test, &arch, &cfg, 1, &mut Rng::new(9)).unwrap();
        assert_eq!(r1.mean, r2.mean);
        assert_eq!(r1.ir_at, r2.ir_at);
        assert_eq!(r1.std_mean, 0.0);
        assert!(r1.std_ir.values().all(|&v| v == 0.0));
    }

    #[test]
    fn evaluate_lr_zero_equals_random_init_baseline() {
        let (syn, test, arch) = tiny_fixture();
        let cfg = EvalTrainConfig {
            epochs: 3,
            lr: 0.0,
            ..EvalTrainConfig::default()
        };
        let mut outer = Rng::new(13);
        let report = evaluate_synthetic(&syn, &test, &arch, &cfg, 1, &mut outer).unwrap();
        // Mirror the contract: one fork per repeat, init drawn first.
        let mut outer2 = Rng::new(13);
        let mut child = outer2.fork();
        let p = Projector::init_random(&arch, &mut child, cfg.init_scale).unwrap();
        let (zv, zt, _) = p.forward(&test.image, &test.text).unwrap();
        let (ir, tr) = recall_at_k(&zv, &zt, &REPORT_KS).unwrap();
        assert_eq!(report.per_seed[0].ir, ir);
        assert_eq!(report.per_seed[0].tr, tr);
    }

    #[test]
    fn evaluate_aggregates_match_per_seed() {
        let (syn, test, arch) = tiny_fixture();
        let cfg = EvalTrainConfig {
            epochs: 2,
            ..EvalTrainConfig::default()
        };
        let report = evaluate_synthetic(&syn, &test, &arch, &cfg, 3, &mut Rng::new(21)).unwrap();
        assert_eq!(report.per_seed.len(), 3);
        let manual: f64 = report.per_seed.iter().map(|s| s.mean).sum::<f64>() / 3.0;
        assert!((report.mean - manual).abs() < 1e-15);
        for s in &report.per_seed {
            let m = mean_of(s.ir.values().chain(s.tr.values()).copied(), 6);
            assert!((s.mean - m).abs() < 1e-15);
        }
    }

    #[test]
    fn sweep_runs_per_arch() {
        let (syn, test, arch) = tiny_fixture();
        let wider = ArchSpec::new(vec![4, 6], vec![5, 6], Activation::Tanh).unwrap();
        let cfg = EvalTrainConfig {
            epochs: 1,
            ..EvalTrainConfig::default()
        };
        let out = cross_arch_sweep(&syn, &test, &[arch, wider], &cfg, 1, &mut Rng::new(3)).unwrap();
        assert_eq!(out.len(), 2);
    }

    #[test]
    fn csv_shape() {
        let (syn, test, arch) = tiny_fixture();
        let cfg = EvalTrainConfig {
            epochs: 1,
            ..EvalTrainConfig::default()
        };
        let report = evaluate_synthetic(&syn, &test, &arch, &cfg, 2, &mut Rng::new(4)).unwrap();
        assert_eq!(csv_header().split(',').count(), 8);
        let row = csv_row(&report);
        assert_eq!(row.split(',').count(), 8);
        for field in row.split(',') {
            field.parse::<f64>().unwrap();
        }
    }

    #[test]
    fn report_json_roundtrip() {
        let (syn, test, arch) = tiny_fixture();
        let cfg = EvalTrainConfig {
            epochs: 1,
            ..EvalTrainConfig::default()
        };
        let report = evaluate_synthetic(&syn, &test, &arch, &cfg, 2, &mut Rng::new(8)).unwrap();
        let json = serde_json::to_string(&report).unwrap();
        let back: RetrievalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.mean, report.mean);
        assert_eq!(back.ir_at, report.ir_at);
    }
}
