//! Seeded finite-difference verification of every analytic gradient: the
//! contrastive loss, the kernel energies under all kernels, the composed
//! matching loss, and the projector backward pass. A deliberate fault can
//! be injected to prove the harness detects broken derivatives.

use std::str::FromStr;

use serde::Serialize;

use crate::distill::MdmConfig;
use crate::error::{MdmError, Result};
use crate::losses::{gke, infonce};
use crate::numerics::{finite_diff_grad, Matrix, Rng};
use crate::projector::{Activation, ArchSpec, LayerParams, Projector, Wrt};
use crate::sphere::{unit_normalize, KernelKind, KernelSpec};

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
pub const DEFAULT_INSTANCES: usize = 20;

/// Deliberate derivative corruption, exercised by the robustness checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradFault {
    /// Scale the analytic kernel-energy gradient by 1.5.
    Kernel,
}

impl FromStr for GradFault {
    type Err = MdmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kernel" => Ok(GradFault::Kernel),
            other => Err(MdmError::Config(format!(
                "unknown gradient fault {other:?}; expected \"kernel\""
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub instances: usize,
    pub max_rel_err: f64,
    pub tol: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub seed: u64,
    pub checks: Vec<CheckResult>,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.checks
            .iter()
            .map(|c| c.max_rel_err)
            .fold(0.0, f64::max)
    }
}

/// Frobenius-relative discrepancy between an analytic and an FD gradient.
fn grad_rel_err(analytic: &Matrix, fd: &Matrix) -> f64 {
    let mut d2 = 0.0;
    let mut a2 = 0.0;
    let mut f2 = 0.0;
    for (a, f) in analytic.data().iter().zip(fd.data()) {
        d2 += (a - f) * (a - f);
        a2 += a * a;
        f2 += f * f;
    }
    d2.sqrt() / a2.sqrt().max(f2.sqrt()).max(1e-8)
}

fn unit_rows(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
    unit_normalize(&rng.gauss_matrix(rows, cols, 0.0, 1.0)).expect("gaussian rows are nonzero")
}

/// The L1 kernel is non-smooth where any coordinate pair coincides; keep FD
/// probes away from those kinks by requiring a minimum coordinate gap for
/// every cross-set row pair (`skip_diag` exempts a row paired with itself,
/// which moves as one and stays smooth).
fn laplacian_safe(a: &Matrix, b: &Matrix, margin: f64, skip_diag: bool) -> bool {
    for i in 0..a.rows() {
        for j in 0..b.rows() {
            if skip_diag && i == j {
                continue;
            }
            for (x, y) in a.row(i).iter().zip(b.row(j)) {
                if (x - y).abs() < margin {
                    return false;
                }
            }
        }
    }
    true
}

const KINK_MARGIN: f64 = 5e-5;

fn check_infonce(rng: &mut Rng, instances: usize) -> Result<CheckResult> {
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let b = 1 + rng.below(8) as usize;
        let d = 2 + rng.below(15) as usize;
        let tau = 0.07 + 0.5 * rng.uniform();
        let zv = unit_rows(rng, b, d);
        let zt = unit_rows(rng, b, d);
        let (_, d_zv, d_zt) = infonce(&zv, &zt, tau)?;
        let fd_v = finite_diff_grad(|m| infonce(m, &zt, tau).unwrap().0, &zv, FD_STEP)?;
        let fd_t = finite_diff_grad(|m| infonce(&zv, m, tau).unwrap().0, &zt, FD_STEP)?;
        worst = worst
            .max(grad_rel_err(&d_zv, &fd_v))
            .max(grad_rel_err(&d_zt, &fd_t));
    }
    Ok(CheckResult {
        name: "infonce".into(),
        instances,
        max_rel_err: worst,
        tol: REL_TOL,
        passed: worst < REL_TOL,
    })
}

fn check_gke(
    rng: &mut Rng,
    instances: usize,
    kind: KernelKind,
    fault: Option<GradFault>,
) -> Result<CheckResult> {
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let m = 1 + rng.below(8) as usize;
        let n = 1 + rng.below(8) as usize;
        let d = 2 + rng.below(15) as usize;
        let sigma = 0.3 + 0.9 * rng.uniform();
        let spec = KernelSpec::new(kind, sigma)?;
        let real = unit_rows(rng, m, d);
        let mut syn = rng.gauss_matrix(n, d, 0.0, 1.0);
        if kind == KernelKind::Laplacian {
            for _ in 0..50 {
                let syn_hat = unit_normalize(&syn)?;
                if laplacian_safe(&real, &syn_hat, KINK_MARGIN, false)
                    && laplacian_safe(&syn_hat, &syn_hat, KINK_MARGIN, true)
                {
                    break;
                }
                syn = rng.gauss_matrix(n, d, 0.0, 1.0);
            }
        }
        let out = gke(&real, &syn, spec)?;
        let mut d_syn = out.d_syn;
        if fault == Some(GradFault::Kernel) {
            d_syn = d_syn.scale(1.5)?;
        }
        let fd = finite_diff_grad(|s| gke(&real, s, spec).unwrap().value, &syn, FD_STEP)?;
        worst = worst.max(grad_rel_err(&d_syn, &fd));
    }
    Ok(CheckResult {
        name: format!("gke_{}", kind.name()),
        instances,
        max_rel_err: worst,
        tol: REL_TOL,
        passed: worst < REL_TOL,
    })
}

/// The composed loss as a plain function of the ambient synthetic
/// embeddings, built from public pieces only.
fn composed_value(
    zv_s: &Matrix,
    zt_s: &Matrix,
    u_real: &Matrix,
    g_real: &Matrix,
    cfg: &MdmConfig,
) -> f64 {
    let agr_spec = KernelSpec::new(cfg.kernel, cfg.sigma_agr).unwrap();
    let dis_spec = KernelSpec::new(cfg.kernel, cfg.sigma_dis).unwrap();
    let align = infonce(zv_s, zt_s, cfg.tau).unwrap().0;
    let u_syn = unit_normalize(&zv_s.add(zt_s).unwrap()).unwrap();
    let g_syn = unit_normalize(&zv_s.sub(zt_s).unwrap()).unwrap();
    align
        + cfg.lambda_agr * gke(u_real, &u_syn, agr_spec).unwrap().value
        + cfg.lambda_dis * gke(g_real, &g_syn, dis_spec).unwrap().value
}

fn check_composed(rng: &mut Rng, instances: usize) -> Result<CheckResult> {
    use crate::losses::mdm_loss;
    use crate::sphere::make_joint_batch;

    let mut worst = 0.0f64;
    for _ in 0..instances {
        let b_r = 2 + rng.below(7) as usize;
        let b_s = 2 + rng.below(7) as usize;
        let d = 2 + rng.below(15) as usize;
        let kernel = match rng.below(3) {
            0 => KernelKind::Geodesic,
            1 => KernelKind::Chordal,
            _ => KernelKind::Laplacian,
        };
        let cfg = MdmConfig {
            lambda_agr: 0.3 + rng.uniform(),
            lambda_dis: 0.3 + rng.uniform(),
            sigma_agr: 0.4 + 0.4 * rng.uniform(),
            sigma_dis: 0.4 + 0.4 * rng.uniform(),
            tau: 0.1 + 0.4 * rng.uniform(),
            kernel,
            ..MdmConfig::default()
        };
        let mut attempt = 0;
        let (real, syn) = loop {
            let real = make_joint_batch(&unit_rows(rng, b_r, d), &unit_rows(rng, b_r, d), 1e-8)?;
            let syn = make_joint_batch(&unit_rows(rng, b_s, d), &unit_rows(rng, b_s, d), 1e-8)?;
            let clean = real.dropped_u() + real.dropped_g() + syn.dropped_u() + syn.dropped_g()
                == 0
                && (kernel != KernelKind::Laplacian
                    || (laplacian_safe(&real.u_rows, &syn.u_rows, KINK_MARGIN, false)
                        && laplacian_safe(&real.g_rows, &syn.g_rows, KINK_MARGIN, false)
                        && laplacian_safe(&syn.u_rows, &syn.u_rows, KINK_MARGIN, true)
                        && laplacian_safe(&syn.g_rows, &syn.g_rows, KINK_MARGIN, true)));
            attempt += 1;
            if clean || attempt > 50 {
                break (real, syn);
            }
        };
        let (_, d_zv, d_zt) = mdm_loss(&real, &syn, &cfg)?;
        let fd_v = finite_diff_grad(
            |m| composed_value(m, &syn.zt, &real.u_rows, &real.g_rows, &cfg),
            &syn.zv,
            FD_STEP,
        )?;
        let fd_t = finite_diff_grad(
            |m| composed_value(&syn.zv, m, &real.u_rows, &real.g_rows, &cfg),
            &syn.zt,
            FD_STEP,
        )?;
        worst = worst
            .max(grad_rel_err(&d_zv, &fd_v))
            .max(grad_rel_err(&d_zt, &fd_t));
    }
    Ok(CheckResult {
        name: "mdm_composed".into(),
        instances,
        max_rel_err: worst,
        tol: REL_TOL,
        passed: worst < REL_TOL,
    })
}

fn random_arch(rng: &mut Rng) -> ArchSpec {
    let depth = 1 + rng.below(2) as usize;
    let out = 3 + rng.below(6) as usize;
    let mut image_dims = vec![3 + rng.below(8) as usize];
    let mut text_dims = vec![3 + rng.below(8) as usize];
    for _ in 0..depth.saturating_sub(1) {
        image_dims.push(3 + rng.below(8) as usize);
        text_dims.push(3 + rng.below(8) as usize);
    }
    image_dims.push(out);
    text_dims.push(out);
    let act = if rng.below(2) == 0 {
        Activation::Identity
    } else {
        Activation::Tanh
    };
    ArchSpec::new(image_dims, text_dims, act).expect("dims are valid")
}

fn probe_loss(p: &Projector, xi: &Matrix, xt: &Matrix, wv: &Matrix, wt: &Matrix) -> f64 {
    let (zv, zt, _) = p.forward(xi, xt).unwrap();
    zv.flat_dot(wv).unwrap() + zt.flat_dot(wt).unwrap()
}

fn check_projector(rng: &mut Rng, instances: usize, wrt: Wrt) -> Result<CheckResult> {
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let arch = random_arch(rng);
        let p = Projector::init_random(&arch, rng, 1.0)?;
        let b = 1 + rng.below(8) as usize;
        let xi = rng.gauss_matrix(b, arch.image_dims[0], 0.0, 1.0);
        let xt = rng.gauss_matrix(b, arch.text_dims[0], 0.0, 1.0);
        let out = arch.joint_dim();
        let wv = rng.gauss_matrix(b, out, 0.0, 1.0);
        let wt = rng.gauss_matrix(b, out, 0.0, 1.0);
        let (_, _, tape) = p.forward(&xi, &xt)?;
        let grads = p.backward(&tape, &wv, &wt, wrt)?;
        match wrt {
            Wrt::Inputs => {
                let fd_i = finite_diff_grad(|m| probe_loss(&p, m, &xt, &wv, &wt), &xi, FD_STEP)?;
                let fd_t = finite_diff_grad(|m| probe_loss(&p, &xi, m, &wv, &wt), &xt, FD_STEP)?;
                worst = worst
                    .max(grad_rel_err(grads.d_x_img.as_ref().unwrap(), &fd_i))
                    .max(grad_rel_err(grads.d_x_txt.as_ref().unwrap(), &fd_t));
            }
            Wrt::Params | Wrt::Both => {
                let branches = [
                    (grads.image_params.as_ref().unwrap(), true),
                    (grads.text_params.as_ref().unwrap(), false),
                ];
                for (layer_grads, is_image) in branches {
                    for (li, lg) in layer_grads.iter().enumerate() {
                        for which in ["weight", "bias"] {
                            let base = if is_image {
                                &p.image_layers
                            } else {
                                &p.text_layers
                            };
                            let tensor = if which == "weight" {
                                &base[li].weight
                            } else {
                                &base[li].bias
                            };
                            let fd = finite_diff_grad(
                                |t| {
                                    let mut img = p.image_layers.clone();
                                    let mut txt = p.text_layers.clone();
                                    let target: &mut Vec<LayerParams> =
                                        if is_image { &mut img } else { &mut txt };
                                    if which == "weight" {
                                        target[li].weight = t.clone();
                                    } else {
                                        target[li].bias = t.clone();
                                    }
                                    let probe =
                                        Projector::from_parts(arch.clone(), img, txt).unwrap();
                                    probe_loss(&probe, &xi, &xt, &wv, &wt)
                                },
                                tensor,
                                FD_STEP,
                            )?;
                            let analytic = if which == "weight" {
                                &lg.weight
                            } else {
                                &lg.bias
                            };
                            worst = worst.max(grad_rel_err(analytic, &fd));
                        }
                    }
                }
            }
        }
    }
    let name = match wrt {
        Wrt::Inputs => "projector_inputs",
        _ => "projector_params",
    };
    Ok(CheckResult {
        name: name.into(),
        instances,
        max_rel_err: worst,
        tol: REL_TOL,
        passed: worst < REL_TOL,
    })
}

/// Run the full seeded suite. `fault` corrupts the kernel gradient so the
/// suite's failure path can itself be verified.
pub fn run_gradcheck(
    seed: u64,
    instances: usize,
    fault: Option<GradFault>,
) -> Result<GradCheckReport> {
    if instances == 0 {
        return Err(MdmError::Config("instances must be >= 1".into()));
    }
    let mut rng = Rng::new(seed);
    let mut checks = Vec::new();
    checks.push(check_infonce(&mut rng.fork(), instances)?);
    for kind in [
        KernelKind::Geodesic,
        KernelKind::Chordal,
        KernelKind::Laplacian,
    ] {
        checks.push(check_gke(&mut rng.fork(), instances, kind, fault)?);
    }
    checks.push(check_composed(&mut rng.fork(), instances)?);
    checks.push(check_projector(&mut rng.fork(), instances, Wrt::Params)?);
    checks.push(check_projector(&mut rng.fork(), instances, Wrt::Inputs)?);
    let passed = checks.iter().all(|c| c.passed);
    Ok(GradCheckReport {
        seed,
        checks,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_clean() {
        let report = run_gradcheck(7, 4, None).unwrap();
        assert!(report.passed, "{report:?}");
        assert_eq!(report.checks.len(), 7);
        assert!(report.max_rel_err() < REL_TOL);
        for c in &report.checks {
            assert_eq!(c.instances, 4);
        }
    }

    #[test]
    fn suite_deterministic() {
        let a = run_gradcheck(11, 3, None).unwrap();
        let b = run_gradcheck(11, 3, None).unwrap();
        for (x, y) in a.checks.iter().zip(&b.checks) {
            assert_eq!(x.max_rel_err, y.max_rel_err);
        }
    }

    #[test]
    fn kernel_fault_detected() {
        let report = run_gradcheck(7, 4, Some(GradFault::Kernel)).unwrap();
        assert!(!report.passed);
        for c in &report.checks {
            let broken = c.name.starts_with("gke_");
            assert_eq!(c.passed, !broken, "{}: {}", c.name, c.max_rel_err);
        }
    }

    #[test]
    fn fault_parses() {
        assert_eq!("kernel".parse::<GradFault>().unwrap(), GradFault::Kernel);
        assert!("nope".parse::<GradFault>().is_err());
    }
}
