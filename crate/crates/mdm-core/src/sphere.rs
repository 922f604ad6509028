//! Unit-hypersphere geometry: row normalization, angular distance, the three
//! RBF kernels, and cross-modal agreement/discrepancy construction.
//!
//! Embeddings live on S^{d-1}; the agreement vector of a pair is the
//! normalized sum of its two modality embeddings and the discrepancy vector
//! is the normalized difference.

use serde::{Deserialize, Serialize};

use crate::error::{MdmError, Result};
use crate::numerics::Matrix;

/// Inner products are clamped to `[-1 + CLAMP_EPS, 1 - CLAMP_EPS]` before
/// arccos: the arccos derivative diverges at +-1 and the clamp bounds kernel
/// gradients at roughly `1/sqrt(2 * CLAMP_EPS)`.
pub const CLAMP_EPS: f64 = 1e-7;

/// Rows with L2 norm below this cannot be normalized.
pub const MIN_NORM: f64 = 1e-12;

/// Default threshold under which an agreement/discrepancy vector is treated
/// as directionless and dropped from its batch set.
pub const DEFAULT_EPS_GAP: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    /// Gaussian over the arc length `arccos<a,b>`.
    Geodesic,
    /// Gaussian over the straight-line chord between unit points.
    Chordal,
    /// Exponential over the L1 distance of the unit rows.
    Laplacian,
}

impl KernelKind {
    pub fn name(self) -> &'static str {
        match self {
            KernelKind::Geodesic => "geodesic",
            KernelKind::Chordal => "chordal",
            KernelKind::Laplacian => "laplacian",
        }
    }
}

/// Kernel choice plus bandwidth. `sigma` is validated at construction and
/// stays private so the `sigma > 0` invariant holds for every value in
/// circulation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelSpec {
    kind: KernelKind,
    sigma: f64,
}

impl KernelSpec {
    pub fn new(kind: KernelKind, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(MdmError::Config(format!(
                "kernel bandwidth must be finite and > 0, got {sigma}"
            )));
        }
        Ok(KernelSpec { kind, sigma })
    }

    pub fn kind(&self) -> KernelKind {
        self.kind
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

pub(crate) fn row_norm(row: &[f64]) -> f64 {
    dot(row, row).sqrt()
}

fn normalize_slice(row: &[f64], index: usize) -> Result<Vec<f64>> {
    let n = row_norm(row);
    if n < MIN_NORM {
        return Err(MdmError::DegenerateRow {
            row: index,
            norm: n,
        });
    }
    Ok(row.iter().map(|v| v / n).collect())
}

/// Divide each row by its L2 norm. A row with norm below [`MIN_NORM`] is an
/// error carrying the row index, never a silent zero-division.
pub fn unit_normalize(rows: &Matrix) -> Result<Matrix> {
    let mut out = Vec::with_capacity(rows.rows() * rows.cols());
    for r in 0..rows.rows() {
        out.extend(normalize_slice(rows.row(r), r)?);
    }
    Matrix::from_vec(rows.rows(), rows.cols(), out)
}

fn clamped_cos(raw_dot: f64) -> f64 {
    raw_dot.clamp(-1.0 + CLAMP_EPS, 1.0 - CLAMP_EPS)
}

/// Arc length between two unit rows: `arccos<a,b>` in [0, pi], with the inner
/// product clamped before arccos.
pub fn angular_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    for (name, row) in [("a", a), ("b", b)] {
        let n = row_norm(row);
        if (n - 1.0).abs() > 1e-6 {
            return Err(MdmError::Numeric(format!(
                "angular_distance precondition: row {name} has norm {n}, expected unit"
            )));
        }
    }
    if a.len() != b.len() {
        return Err(MdmError::Shape(format!(
            "angular_distance dims {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(clamped_cos(dot(a, b)).acos())
}

/// Evaluate the kernel on two rows. All kinds defensively unit-normalize
/// their inputs first so the three kernels are always compared on identical
/// points of the sphere.
pub fn kernel_eval(spec: KernelSpec, a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(MdmError::Shape(format!(
            "kernel_eval dims {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let ah = normalize_slice(a, 0)?;
    let bh = normalize_slice(b, 1)?;
    Ok(kernel_on_unit(spec, &ah, &bh))
}

/// Kernel value for rows already on the sphere.
pub(crate) fn kernel_on_unit(spec: KernelSpec, ah: &[f64], bh: &[f64]) -> f64 {
    let sigma = spec.sigma;
    match spec.kind {
        KernelKind::Geodesic => {
            let phi = clamped_cos(dot(ah, bh)).acos();
            (-phi * phi / (2.0 * sigma * sigma)).exp()
        }
        KernelKind::Chordal => {
            let d2 = 2.0 - 2.0 * dot(ah, bh);
            (-d2 / (2.0 * sigma * sigma)).exp()
        }
        KernelKind::Laplacian => {
            let l1: f64 = ah.iter().zip(bh).map(|(&x, &y)| (x - y).abs()).sum();
            (-l1 / sigma).exp()
        }
    }
}

/// Gradient of `kernel_on_unit(spec, ah, raw_b / |raw_b|)` with respect to
/// the raw second argument, given the already-normalized rows, the raw norm
/// `nb`, and the kernel value at this pair. Includes the normalization
/// Jacobian `(I - bh bh^T)/nb`; clamped inner products contribute zero
/// gradient for the geodesic kind.
pub(crate) fn kernel_grad_b_unit(
    spec: KernelSpec,
    ah: &[f64],
    bh: &[f64],
    nb: f64,
    value: f64,
) -> Vec<f64> {
    let sigma = spec.sigma;
    match spec.kind {
        KernelKind::Geodesic | KernelKind::Chordal => {
            let raw = dot(ah, bh);
            let dk_ddot = match spec.kind {
                KernelKind::Geodesic => {
                    if raw >= 1.0 - CLAMP_EPS || raw <= -1.0 + CLAMP_EPS {
                        0.0
                    } else {
                        let phi = raw.acos();
                        value * phi / (sigma * sigma * (1.0 - raw * raw).sqrt())
                    }
                }
                KernelKind::Chordal => value / (sigma * sigma),
                KernelKind::Laplacian => unreachable!(),
            };
            // d dot / d b = (ah - dot * bh) / |b|
            ah.iter()
                .zip(bh)
                .map(|(&a, &b)| dk_ddot * (a - raw * b) / nb)
                .collect()
        }
        KernelKind::Laplacian => {
            // d k / d bh = (k / sigma) * sign(ah - bh), projected through the
            // normalization Jacobian; sign(0) contributes nothing.
            let v: Vec<f64> = ah
                .iter()
                .zip(bh)
                .map(|(&x, &y)| {
                    if x == y {
                        0.0
                    } else {
                        value / sigma * (x - y).signum()
                    }
                })
                .collect();
            let vb = dot(&v, bh);
            v.iter()
                .zip(bh)
                .map(|(&vi, &b)| (vi - vb * b) / nb)
                .collect()
        }
    }
}

/// One minibatch lifted onto the sphere: unit modality embeddings plus the
/// agreement vectors `u = normalize(zv + zt)` and discrepancy vectors
/// `g = normalize(zv - zt)` that survived the degeneracy guard.
///
/// `u_kept` / `g_kept` list the original row indices behind each emitted row;
/// a pair with `|zv - zt| < eps_gap` carries no gap direction and is dropped
/// from the g-set (and symmetrically an exactly antipodal pair from the
/// u-set).
#[derive(Debug, Clone)]
pub struct JointBatch {
    pub zv: Matrix,
    pub zt: Matrix,
    pub u_rows: Matrix,
    pub u_kept: Vec<usize>,
    pub g_rows: Matrix,
    pub g_kept: Vec<usize>,
}

impl JointBatch {
    pub fn len(&self) -> usize {
        self.zv.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.zv.rows() == 0
    }

    pub fn dropped_g(&self) -> usize {
        self.len() - self.g_kept.len()
    }

    pub fn dropped_u(&self) -> usize {
        self.len() - self.u_kept.len()
    }
}

/// Normalize both modality batches and construct agreement/discrepancy rows.
pub fn make_joint_batch(zv_raw: &Matrix, zt_raw: &Matrix, eps_gap: f64) -> Result<JointBatch> {
    if zv_raw.rows() != zt_raw.rows() || zv_raw.cols() != zt_raw.cols() {
        return Err(MdmError::Shape(format!(
            "joint batch {}x{} vs {}x{}",
            zv_raw.rows(),
            zv_raw.cols(),
            zt_raw.rows(),
            zt_raw.cols()
        )));
    }
    let zv = unit_normalize(zv_raw)?;
    let zt = unit_normalize(zt_raw)?;
    let d = zv.cols();
    let mut u_data = Vec::new();
    let mut u_kept = Vec::new();
    let mut g_data = Vec::new();
    let mut g_kept = Vec::new();
    for i in 0..zv.rows() {
        let (vr, tr) = (zv.row(i), zt.row(i));
        let sum: Vec<f64> = vr.iter().zip(tr).map(|(&a, &b)| a + b).collect();
        let diff: Vec<f64> = vr.iter().zip(tr).map(|(&a, &b)| a - b).collect();
        let ns = row_norm(&sum);
        if ns >= eps_gap {
            u_data.extend(sum.iter().map(|v| v / ns));
            u_kept.push(i);
        }
        let nd = row_norm(&diff);
        if nd >= eps_gap {
            g_data.extend(diff.iter().map(|v| v / nd));
            g_kept.push(i);
        }
    }
    Ok(JointBatch {
        zv,
        zt,
        u_rows: Matrix::from_vec(u_kept.len(), d, u_data)?,
        u_kept,
        g_rows: Matrix::from_vec(g_kept.len(), d, g_data)?,
        g_kept,
    })
}
