//! The three loss terms — bidirectional InfoNCE, geodesic kernel energy
//! (GKE), and the agreement/discrepancy pair — plus the combined objective,
//! each with analytic gradients for the synthetic side only.

use serde::{Deserialize, Serialize};

use crate::distill::MdmConfig;
use crate::error::{MdmError, Result};
use crate::numerics::Matrix;
use crate::sphere::{
    dot, kernel_grad_b_unit, kernel_on_unit, row_norm, JointBatch, KernelSpec, MIN_NORM,
};

/// Floor for the radicand when forming the sqrt-chain gradient; keeps the
/// square-root singularity at zero energy from exploding updates.
const EPS_ENERGY: f64 = 1e-12;
/// Hard cap on the sqrt-chain scale factor.
const MAX_SQRT_SCALE: f64 = 1e6;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub infonce: f64,
    pub agr: f64,
    pub dis: f64,
    pub total: f64,
    pub dropped_g_real: usize,
    pub dropped_g_syn: usize,
}

/// GKE value and its gradient with respect to the synthetic rows only; the
/// real set never receives gradients.
#[derive(Debug, Clone)]
pub struct GkeGrad {
    pub value: f64,
    pub d_syn: Matrix,
}

/// Bidirectional InfoNCE with identity targets: logits `Z = zv zt^T / tau`,
/// loss `1/(2B) * sum_j [row-CE_j + col-CE_j]`. Rows are treated as free
/// ambient vectors (callers pass unit rows; the gradients are exact for the
/// function as written).
pub fn infonce(zv: &Matrix, zt: &Matrix, tau: f64) -> Result<(f64, Matrix, Matrix)> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(MdmError::Config(format!("tau must be > 0, got {tau}")));
    }
    if zv.rows() != zt.rows() || zv.cols() != zt.cols() {
        return Err(MdmError::Shape(format!(
            "infonce {}x{} vs {}x{}",
            zv.rows(),
            zv.cols(),
            zt.rows(),
            zt.cols()
        )));
    }
    let b = zv.rows();
    if b == 0 {
        return Err(MdmError::Size("infonce needs at least one pair".into()));
    }
    let z = zv.matmul(&zt.transpose())?.scale(1.0 / tau)?;
    // Log-sum-exp per row and per column with max-shift.
    let mut lse_row = vec![0.0; b];
    let mut lse_col = vec![0.0; b];
    for j in 0..b {
        let row = z.row(j);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        lse_row[j] = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
    }
    for k in 0..b {
        let m = (0..b)
            .map(|j| z.get(j, k))
            .fold(f64::NEG_INFINITY, f64::max);
        lse_col[k] = m + (0..b).map(|j| (z.get(j, k) - m).exp()).sum::<f64>().ln();
    }
    let mut loss = 0.0;
    for j in 0..b {
        loss += (lse_row[j] - z.get(j, j)) + (lse_col[j] - z.get(j, j));
    }
    loss /= 2.0 * b as f64;

    // dL/dZ = (row-softmax - I + col-softmax - I) / (2B).
    let inv = 1.0 / (2.0 * b as f64);
    let mut dz = Matrix::zeros(b, b);
    for j in 0..b {
        for k in 0..b {
            let p = (z.get(j, k) - lse_row[j]).exp();
            let q = (z.get(j, k) - lse_col[k]).exp();
            let delta = if j == k { 2.0 } else { 0.0 };
            dz.set(j, k, inv * (p + q - delta));
        }
    }
    let d_zv = dz.matmul(zt)?.scale(1.0 / tau)?;
    let d_zt = dz.transpose().matmul(zv)?.scale(1.0 / tau)?;
    Ok((loss, d_zv, d_zt))
}

struct UnitRows {
    hat: Matrix,
    norms: Vec<f64>,
}

fn to_unit(set: &Matrix, label: &str) -> Result<UnitRows> {
    let mut hat = set.clone();
    let mut norms = Vec::with_capacity(set.rows());
    for r in 0..set.rows() {
        let n = row_norm(set.row(r));
        if n < MIN_NORM {
            log::error!("{label} row {r} is degenerate (norm {n})");
            return Err(MdmError::DegenerateRow { row: r, norm: n });
        }
        for v in hat.row_mut(r) {
            *v /= n;
        }
        norms.push(n);
    }
    Ok(UnitRows { hat, norms })
}

/// Sum of kernel values over the full Cartesian product, accumulated in a
/// fixed order (outer rows of `a`, inner rows of `b`, row partials summed in
/// index order) so identical inputs give bitwise identical sums.
fn gram_sum(spec: KernelSpec, a: &Matrix, b: &Matrix) -> f64 {
    let mut total = 0.0;
    for i in 0..a.rows() {
        let ai = a.row(i);
        let mut rs = 0.0;
        for j in 0..b.rows() {
            rs += kernel_on_unit(spec, ai, b.row(j));
        }
        total += rs;
    }
    total
}

/// Geodesic kernel energy between a real and a synthetic set:
/// `sqrt(max(E, 0))` with `E = S_AA/m^2 + S_BB/n^2 - 2 S_AB/(mn)`, plus the
/// gradient with respect to the raw synthetic rows (chained through the
/// defensive normalization, the kernel, the clamp, and the sqrt).
pub fn gke(real_set: &Matrix, syn_set: &Matrix, spec: KernelSpec) -> Result<GkeGrad> {
    let (m, n) = (real_set.rows(), syn_set.rows());
    if m == 0 || n == 0 {
        return Err(MdmError::Size(format!(
            "gke needs non-empty sets, got {m} real and {n} synthetic rows"
        )));
    }
    if real_set.cols() != syn_set.cols() {
        return Err(MdmError::Shape(format!(
            "gke dims {} vs {}",
            real_set.cols(),
            syn_set.cols()
        )));
    }
    let a = to_unit(real_set, "gke real set")?;
    let b = to_unit(syn_set, "gke synthetic set")?;
    let inv_mm = 1.0 / ((m * m) as f64);
    let inv_nn = 1.0 / ((n * n) as f64);
    let inv_mn = 1.0 / ((m * n) as f64);
    let s_aa = gram_sum(spec, &a.hat, &a.hat);
    let s_bb = gram_sum(spec, &b.hat, &b.hat);
    let s_ab = gram_sum(spec, &a.hat, &b.hat);
    let e = s_aa * inv_mm + s_bb * inv_nn - 2.0 * (s_ab * inv_mn);
    let value = e.max(0.0).sqrt();
    let scale = (1.0 / (2.0 * e.max(EPS_ENERGY).sqrt())).min(MAX_SQRT_SCALE);

    let d = syn_set.cols();
    let mut d_syn = Matrix::zeros(n, d);
    let intra_coef = 2.0 * inv_nn;
    let inter_coef = 2.0 * inv_mn;
    for p in 0..n {
        let bp = b.hat.row(p);
        let np = b.norms[p];
        let mut acc = vec![0.0; d];
        // b_p appears in both slots of every intra pair; kernel symmetry
        // folds that into twice the second-slot derivative.
        for j in 0..n {
            let other = b.hat.row(j);
            let val = kernel_on_unit(spec, other, bp);
            let g = kernel_grad_b_unit(spec, other, bp, np, val);
            for (av, gv) in acc.iter_mut().zip(&g) {
                *av += intra_coef * gv;
            }
        }
        for i in 0..m {
            let other = a.hat.row(i);
            let val = kernel_on_unit(spec, other, bp);
            let g = kernel_grad_b_unit(spec, other, bp, np, val);
            for (av, gv) in acc.iter_mut().zip(&g) {
                *av -= inter_coef * gv;
            }
        }
        let row = d_syn.row_mut(p);
        for (rv, av) in row.iter_mut().zip(&acc) {
            *rv = scale * av;
        }
    }
    if !d_syn.is_finite() {
        return Err(MdmError::Numeric("gke gradient is non-finite".into()));
    }
    Ok(GkeGrad { value, d_syn })
}

/// Add `lambda * J^T d_set` into the modality gradients, where `J` is the
/// Jacobian of `normalize(zv_i +- zt_i)` and `d_set` is the GKE gradient at
/// the corresponding agreement or discrepancy row.
fn chain_through_pairs(
    batch: &JointBatch,
    kept: &[usize],
    rows: &Matrix,
    d_set: &Matrix,
    lambda: f64,
    sign_t: f64,
    d_zv: &mut Matrix,
    d_zt: &mut Matrix,
) {
    for (k, &i) in kept.iter().enumerate() {
        let zv_i = batch.zv.row(i);
        let zt_i = batch.zt.row(i);
        let w: Vec<f64> = zv_i
            .iter()
            .zip(zt_i)
            .map(|(&a, &b)| a + sign_t * b)
            .collect();
        let nw = row_norm(&w);
        let hat = rows.row(k);
        let du = d_set.row(k);
        let proj = dot(du, hat);
        let coef = lambda / nw;
        let dv = d_zv.row_mut(i);
        for c in 0..dv.len() {
            dv[c] += coef * (du[c] - proj * hat[c]);
        }
        let dt = d_zt.row_mut(i);
        for c in 0..dt.len() {
            dt[c] += sign_t * coef * (du[c] - proj * hat[c]);
        }
    }
}

/// The full objective over one real and one synthetic joint batch:
/// InfoNCE on the synthetic pairs plus weighted GKE terms over the agreement
/// and discrepancy sets. Returns gradients with respect to the synthetic
/// `zv`/`zt` rows as free ambient vectors; distill chains them through the
/// projector, whose output normalization annihilates radial components.
pub fn mdm_loss(
    real_batch: &JointBatch,
    syn_batch: &JointBatch,
    cfg: &MdmConfig,
) -> Result<(LossBreakdown, Matrix, Matrix)> {
    if real_batch.zv.cols() != syn_batch.zv.cols() {
        return Err(MdmError::Shape(format!(
            "joint dims differ: real {} vs synthetic {}",
            real_batch.zv.cols(),
            syn_batch.zv.cols()
        )));
    }
    for (name, lambda) in [
        ("lambda_agr", cfg.lambda_agr),
        ("lambda_dis", cfg.lambda_dis),
    ] {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(MdmError::Config(format!(
                "{name} must be >= 0, got {lambda}"
            )));
        }
    }
    let (nce, mut d_zv, mut d_zt) = infonce(&syn_batch.zv, &syn_batch.zt, cfg.tau)?;

    let mut agr = 0.0;
    if cfg.lambda_agr > 0.0 {
        if real_batch.u_rows.rows() == 0 || syn_batch.u_rows.rows() == 0 {
            log::warn!("agreement set empty on one side; agr term = 0");
        } else {
            let spec = KernelSpec::new(cfg.kernel, cfg.sigma_agr)?;
            let gg = gke(&real_batch.u_rows, &syn_batch.u_rows, spec)?;
            agr = gg.value;
            chain_through_pairs(
                syn_batch,
                &syn_batch.u_kept,
                &syn_batch.u_rows,
                &gg.d_syn,
                cfg.lambda_agr,
                1.0,
                &mut d_zv,
                &mut d_zt,
            );
        }
    }

    let mut dis = 0.0;
    if cfg.lambda_dis > 0.0 {
        if real_batch.g_rows.rows() == 0 || syn_batch.g_rows.rows() == 0 {
            log::warn!("discrepancy set empty on one side; dis term = 0");
        } else {
            let spec = KernelSpec::new(cfg.kernel, cfg.sigma_dis)?;
            let gg = gke(&real_batch.g_rows, &syn_batch.g_rows, spec)?;
            dis = gg.value;
            chain_through_pairs(
                syn_batch,
                &syn_batch.g_kept,
                &syn_batch.g_rows,
                &gg.d_syn,
                cfg.lambda_dis,
                -1.0,
                &mut d_zv,
                &mut d_zt,
            );
        }
    }

    let total = nce + cfg.lambda_agr * agr + cfg.lambda_dis * dis;
    if !total.is_finite() || !d_zv.is_finite() || !d_zt.is_finite() {
        return Err(MdmError::Numeric(
            "mdm loss produced non-finite values".into(),
        ));
    }
    Ok((
        LossBreakdown {
            infonce: nce,
            agr,
            dis,
            total,
            dropped_g_real: real_batch.dropped_g(),
            dropped_g_syn: syn_batch.dropped_g(),
        },
        d_zv,
        d_zt,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, rel_err, Rng};
    use crate::sphere::{make_joint_batch, unit_normalize, KernelKind, DEFAULT_EPS_GAP};
    use proptest::prelude::*;

    // m = n = 1 orthogonal pair, geodesic sigma = 0.5, including the clamp
    // effect on the two intra terms; frozen from a pure-f64 replay.
    const GKE_ORTHOGONAL_VALUE: f64 = 1.409118672535601;

    fn unit_batch(rng: &mut Rng, b: usize, d: usize) -> Matrix {
        unit_normalize(&rng.gauss_matrix(b, d, 0.0, 1.0)).unwrap()
    }

    fn spec(kind: KernelKind, sigma: f64) -> KernelSpec {
        KernelSpec::new(kind, sigma).unwrap()
    }

    #[test]
    fn infonce_single_pair_is_zero() {
        let mut rng = Rng::new(1);
        let zv = unit_batch(&mut rng, 1, 5);
        let zt = unit_batch(&mut rng, 1, 5);
        let (loss, d_zv, d_zt) = infonce(&zv, &zt, 0.07).unwrap();
        assert!(loss.abs() <= 1e-15, "{loss}");
        assert!(d_zv.max_abs() <= 1e-12);
        assert!(d_zt.max_abs() <= 1e-12);
    }

    #[test]
    fn infonce_equal_logits_is_ln_b() {
        let mut rng = Rng::new(2);
        let row = unit_batch(&mut rng, 1, 6);
        let b = 4;
        let m = Matrix::from_rows(&vec![row.row(0).to_vec(); b]).unwrap();
        let (loss, _, _) = infonce(&m, &m, 0.07).unwrap();
        assert!((loss - (b as f64).ln()).abs() < 1e-9, "{loss}");
    }

    #[test]
    fn infonce_rejects_bad_tau() {
        let m = Matrix::from_vec(1, 2, vec![1.0, 0.0]).unwrap();
        assert!(matches!(infonce(&m, &m, 0.0), Err(MdmError::Config(_))));
        assert!(matches!(infonce(&m, &m, -1.0), Err(MdmError::Config(_))));
    }

    #[test]
    fn infonce_positive_for_distinct_rows() {
        let mut rng = Rng::new(3);
        let zv = unit_batch(&mut rng, 5, 8);
        let zt = unit_batch(&mut rng, 5, 8);
        let (loss, _, _) = infonce(&zv, &zt, 0.07).unwrap();
        assert!(loss > 0.0);
    }

    #[test]
    fn infonce_gradient_matches_fd() {
        let mut rng = Rng::new(4);
        let zv = unit_batch(&mut rng, 4, 6);
        let zt = unit_batch(&mut rng, 4, 6);
        let (_, d_zv, d_zt) = infonce(&zv, &zt, 0.07).unwrap();
        let fd_v = finite_diff_grad(|m| infonce(m, &zt, 0.07).unwrap().0, &zv, 1e-5).unwrap();
        for (a, f) in d_zv.data().iter().zip(fd_v.data()) {
            assert!(rel_err(*a, *f) < 1e-4, "{a} vs {f}");
        }
        let fd_t = finite_diff_grad(|m| infonce(&zv, m, 0.07).unwrap().0, &zt, 1e-5).unwrap();
        for (a, f) in d_zt.data().iter().zip(fd_t.data()) {
            assert!(rel_err(*a, *f) < 1e-4, "{a} vs {f}");
        }
    }

    #[test]
    fn gke_identical_sets_exactly_zero() {
        let mut rng = Rng::new(5);
        for kind in [
            KernelKind::Geodesic,
            KernelKind::Chordal,
            KernelKind::Laplacian,
        ] {
            let a = unit_batch(&mut rng, 5, 4);
            let g = gke(&a, &a, spec(kind, 0.5)).unwrap();
            assert_eq!(g.value, 0.0, "{kind:?} gave {}", g.value);
            assert!(g.d_syn.is_finite());
        }
    }

    #[test]
    fn gke_symmetry_and_permutation_invariance() {
        let mut rng = Rng::new(6);
        let a = unit_batch(&mut rng, 5, 6);
        let b = unit_batch(&mut rng, 4, 6);
        let s = spec(KernelKind::Geodesic, 0.5);
        let v_ab = gke(&a, &b, s).unwrap().value;
        let v_ba = gke(&b, &a, s).unwrap().value;
        assert!((v_ab - v_ba).abs() < 1e-12);
        let perm: Vec<usize> = vec![2, 0, 3, 1];
        let b_perm = b.select_rows(&perm).unwrap();
        let v_perm = gke(&a, &b_perm, s).unwrap().value;
        assert!((v_ab - v_perm).abs() < 1e-12);
    }

    #[test]
    fn gke_orthogonal_single_pair_frozen() {
        let a = Matrix::from_vec(1, 2, vec![1.0, 0.0]).unwrap();
        let b = Matrix::from_vec(1, 2, vec![0.0, 1.0]).unwrap();
        let g = gke(&a, &b, spec(KernelKind::Geodesic, 0.5)).unwrap();
        assert!(
            (g.value - GKE_ORTHOGONAL_VALUE).abs() < 1e-12,
            "{}",
            g.value
        );
    }

    #[test]
    fn gke_empty_set_errors() {
        let a = Matrix::zeros(0, 3);
        let b = Matrix::from_vec(1, 3, vec![1.0, 0.0, 0.0]).unwrap();
        assert!(matches!(
            gke(&a, &b, spec(KernelKind::Geodesic, 0.5)),
            Err(MdmError::Size(_))
        ));
        assert!(matches!(
            gke(&b, &a, spec(KernelKind::Geodesic, 0.5)),
            Err(MdmError::Size(_))
        ));
    }

    #[test]
    fn gke_gradient_matches_fd_all_kernels() {
        let mut rng = Rng::new(7);
        let a = unit_batch(&mut rng, 5, 8);
        let b = unit_batch(&mut rng, 4, 8);
        for kind in [
            KernelKind::Geodesic,
            KernelKind::Chordal,
            KernelKind::Laplacian,
        ] {
            let s = spec(kind, 0.5);
            let g = gke(&a, &b, s).unwrap();
            let fd = finite_diff_grad(|m| gke(&a, m, s).unwrap().value, &b, 1e-5).unwrap();
            for (x, f) in g.d_syn.data().iter().zip(fd.data()) {
                assert!(rel_err(*x, *f) < 1e-4, "{kind:?}: {x} vs {f}");
            }
        }
    }

    fn test_cfg() -> MdmConfig {
        MdmConfig::default()
    }

    #[test]
    fn mdm_lambda_zero_reduces_to_infonce() {
        let mut rng = Rng::new(8);
        let real = make_joint_batch(
            &rng.gauss_matrix(6, 5, 0.0, 1.0),
            &rng.gauss_matrix(6, 5, 0.0, 1.0),
            DEFAULT_EPS_GAP,
        )
        .unwrap();
        let syn = make_joint_batch(
            &rng.gauss_matrix(4, 5, 0.0, 1.0),
            &rng.gauss_matrix(4, 5, 0.0, 1.0),
            DEFAULT_EPS_GAP,
        )
        .unwrap();
        let mut cfg = test_cfg();
        cfg.lambda_agr = 0.0;
        cfg.lambda_dis = 0.0;
        let (bd, d_zv, d_zt) = mdm_loss(&real, &syn, &cfg).unwrap();
        let (nce, nv, nt) = infonce(&syn.zv, &syn.zt, cfg.tau).unwrap();
        assert_eq!(bd.total, nce);
        assert_eq!(bd.infonce, nce);
        assert_eq!(d_zv.data(), nv.data());
        assert_eq!(d_zt.data(), nt.data());
    }

    #[test]
    fn mdm_breakdown_additivity() {
        let mut rng = Rng::new(9);
        let real = make_joint_batch(
            &rng.gauss_matrix(6, 5, 0.0, 1.0),
            &rng.gauss_matrix(6, 5, 0.0, 1.0),
            DEFAULT_EPS_GAP,
        )
        .unwrap();
        let syn = make_joint_batch(
            &rng.gauss_matrix(4, 5, 0.0, 1.0),
            &rng.gauss_matrix(4, 5, 0.0, 1.0),
            DEFAULT_EPS_GAP,
        )
        .unwrap();
        let cfg = test_cfg();
        let (bd, _, _) = mdm_loss(&real, &syn, &cfg).unwrap();
        let recomposed = bd.infonce + cfg.lambda_agr * bd.agr + cfg.lambda_dis * bd.dis;
        assert!((bd.total - recomposed).abs() < 1e-12);
        assert!(bd.agr > 0.0 && bd.dis > 0.0);
    }

    #[test]
    fn mdm_syn_equals_real_single_pair() {
        let mut rng = Rng::new(10);
        let zv = rng.gauss_matrix(1, 5, 0.0, 1.0);
        let zt = rng.gauss_matrix(1, 5, 0.0, 1.0);
        let real = make_joint_batch(&zv, &zt, DEFAULT_EPS_GAP).unwrap();
        let syn = make_joint_batch(&zv, &zt, DEFAULT_EPS_GAP).unwrap();
        let (bd, _, _) = mdm_loss(&real, &syn, &test_cfg()).unwrap();
        assert_eq!(bd.agr, 0.0);
        assert_eq!(bd.dis, 0.0);
        assert!(bd.total.abs() <= 1e-15, "{}", bd.total);
    }

    /// Value of the full objective recomputed from public pieces as a pure
    /// function of ambient synthetic zv/zt matrices.
    fn mdm_value(real: &JointBatch, zv: &Matrix, zt: &Matrix, cfg: &MdmConfig) -> f64 {
        let sum = zv.add(zt).unwrap();
        let diff = zv.sub(zt).unwrap();
        let u = unit_normalize(&sum).unwrap();
        let g = unit_normalize(&diff).unwrap();
        let nce = infonce(zv, zt, cfg.tau).unwrap().0;
        let sa = KernelSpec::new(cfg.kernel, cfg.sigma_agr).unwrap();
        let sd = KernelSpec::new(cfg.kernel, cfg.sigma_dis).unwrap();
        let agr = gke(&real.u_rows, &u, sa).unwrap().value;
        let dis = gke(&real.g_rows, &g, sd).unwrap().value;
        nce + cfg.lambda_agr * agr + cfg.lambda_dis * dis
    }

    #[test]
    fn mdm_gradient_matches_fd_through_composition() {
        let mut rng = Rng::new(11);
        let real = make_joint_batch(
            &rng.gauss_matrix(6, 8, 0.0, 1.0),
            &rng.gauss_matrix(6, 8, 0.0, 1.0),
            DEFAULT_EPS_GAP,
        )
        .unwrap();
        let syn = make_joint_batch(
            &rng.gauss_matrix(4, 8, 0.0, 1.0),
            &rng.gauss_matrix(4, 8, 0.0, 1.0),
            DEFAULT_EPS_GAP,
        )
        .unwrap();
        // The oracle composition assumes no dropped rows.
        assert_eq!(syn.u_kept.len(), 4);
        assert_eq!(syn.g_kept.len(), 4);
        let cfg = test_cfg();
        let (_, d_zv, d_zt) = mdm_loss(&real, &syn, &cfg).unwrap();
        let fd_v = finite_diff_grad(|m| mdm_value(&real, m, &syn.zt, &cfg), &syn.zv, 1e-5).unwrap();
        for (a, f) in d_zv.data().iter().zip(fd_v.data()) {
            assert!(rel_err(*a, *f) < 1e-3, "zv {a} vs {f}");
        }
        let fd_t = finite_diff_grad(|m| mdm_value(&real, &syn.zv, m, &cfg), &syn.zt, 1e-5).unwrap();
        for (a, f) in d_zt.data().iter().zip(fd_t.data()) {
            assert!(rel_err(*a, *f) < 1e-3, "zt {a} vs {f}");
        }
    }

    #[test]
    fn mdm_handles_coincident_and_antipodal_pairs() {
        let mut rng = Rng::new(12);
        let v = unit_batch(&mut rng, 1, 4);
        let row = v.row(0).to_vec();
        let anti: Vec<f64> = row.iter().map(|x| -x).collect();
        let other = unit_batch(&mut rng, 1, 4).row(0).to_vec();
        let zv = Matrix::from_rows(&[row.clone(), row.clone(), other.clone()]).unwrap();
        let zt =
            Matrix::from_rows(&[row, anti, unit_batch(&mut rng, 1, 4).row(0).to_vec()]).unwrap();
        let syn = make_joint_batch(&zv, &zt, DEFAULT_EPS_GAP).unwrap();
        assert_eq!(syn.dropped_g(), 1);
        assert_eq!(syn.dropped_u(), 1);
        let real = make_joint_batch(
            &rng.gauss_matrix(5, 4, 0.0, 1.0),
            &rng.gauss_matrix(5, 4, 0.0, 1.0),
            DEFAULT_EPS_GAP,
        )
        .unwrap();
        let (bd, d_zv, d_zt) = mdm_loss(&real, &syn, &test_cfg()).unwrap();
        assert!(bd.total.is_finite());
        assert!(d_zv.is_finite() && d_zt.is_finite());
        assert_eq!(bd.dropped_g_syn, 1);
    }

    proptest! {
        #[test]
        fn prop_infonce_nonnegative(seed in 0u64..200) {
            let mut rng = Rng::new(seed);
            let b = 1 + (seed as usize % 6);
            let d = 2 + (seed as usize % 7);
            let zv = unit_batch(&mut rng, b, d);
            let zt = unit_batch(&mut rng, b, d);
            let (loss, _, _) = infonce(&zv, &zt, 0.07).unwrap();
            prop_assert!(loss >= -1e-12);
        }

        #[test]
        fn prop_gke_symmetric_and_finite(seed in 0u64..150) {
            let mut rng = Rng::new(seed);
            let m = 1 + (seed as usize % 5);
            let n = 1 + (seed as usize % 4);
            let d = 2 + (seed as usize % 6);
            let a = unit_batch(&mut rng, m, d);
            let b = unit_batch(&mut rng, n, d);
            for kind in [KernelKind::Geodesic, KernelKind::Chordal, KernelKind::Laplacian] {
                let s = spec(kind, 0.5);
                let v1 = gke(&a, &b, s).unwrap();
                let v2 = gke(&b, &a, s).unwrap();
                prop_assert!((v1.value - v2.value).abs() < 1e-12);
                prop_assert!(v1.value >= 0.0 && v1.value.is_finite());
                prop_assert!(v1.d_syn.is_finite());
            }
        }
    }
}
