//! The distillation loop: per iteration, merge a fresh random pair of
//! experts, encode a real minibatch and the synthetic set, take the matching
//! loss, and push its gradient into the synthetic inputs with clipped
//! momentum SGD.

use serde::{Deserialize, Serialize};

use crate::dataio::EmbeddingPairSet;
use crate::error::{MdmError, Result};
use crate::experts::{sample_and_merge, ExpertPool, MergeConfig};
use crate::losses::{mdm_loss, LossBreakdown};
use crate::numerics::{global_l2_norm, Matrix, Rng};
use crate::projector::Wrt;
use crate::seeding::{
    build_synthetic, herding, kcenter, kmeans_joint, random_selection, SeedMethod, SeedSelection,
};
use crate::sphere::{make_joint_batch, KernelKind, DEFAULT_EPS_GAP};

/// Stop when the relative change of the total loss, averaged over this many
/// consecutive iterations, falls below [`PLATEAU_TOL`].
pub const PLATEAU_WINDOW: usize = 50;
pub const PLATEAU_TOL: f64 = 1e-6;

const KMEANS_MAX_ITER: usize = 100;
const KMEANS_TOL: f64 = 1e-4;

/// Full distillation configuration. Unknown keys in config files are errors.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct MdmConfig {
    pub lambda_agr: f64,
    pub lambda_dis: f64,
    pub sigma_agr: f64,
    pub sigma_dis: f64,
    pub tau: f64,
    pub kernel: KernelKind,
    pub batch_real: usize,
    pub lr: f64,
    pub momentum: f64,
    pub clip_norm: f64,
    pub max_iters: usize,
    pub merge: MergeConfig,
    pub seed: u64,
    pub eval_every: usize,
    pub eps_gap: f64,
}

impl Default for MdmConfig {
    fn default() -> Self {
        MdmConfig {
            lambda_agr: 0.8,
            lambda_dis: 0.8,
            sigma_agr: 0.5,
            sigma_dis: 0.5,
            tau: 0.07,
            kernel: KernelKind::Geodesic,
            batch_real: 64,
            // Tuned on the toy benchmark (scripts/tune_distill_lr.sh); large
            // steps optimize the loss as well but degrade downstream recall.
            lr: 0.005,
            momentum: 0.5,
            clip_norm: 1.0,
            max_iters: 3000,
            merge: MergeConfig::default(),
            seed: 0,
            eval_every: 0,
            eps_gap: DEFAULT_EPS_GAP,
        }
    }
}

impl MdmConfig {
    pub fn validate(&self) -> Result<()> {
        let positives = [
            ("sigma_agr", self.sigma_agr),
            ("sigma_dis", self.sigma_dis),
            ("tau", self.tau),
            ("lr", self.lr),
            ("clip_norm", self.clip_norm),
            ("eps_gap", self.eps_gap),
        ];
        for (name, v) in positives {
            if !(v.is_finite() && v > 0.0) {
                return Err(MdmError::Config(format!("{name} must be > 0, got {v}")));
            }
        }
        for (name, v) in [
            ("lambda_agr", self.lambda_agr),
            ("lambda_dis", self.lambda_dis),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(MdmError::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        if self.batch_real == 0 {
            return Err(MdmError::Config("batch_real must be >= 1".into()));
        }
        if !(self.momentum.is_finite() && (0.0..1.0).contains(&self.momentum)) {
            return Err(MdmError::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.max_iters == 0 {
            return Err(MdmError::Config("max_iters must be >= 1".into()));
        }
        self.merge.validate()
    }
}

/// The synthetic set being optimized: ambient image/text inputs plus the
/// momentum buffers and the number of optimizer steps taken so far.
#[derive(Debug, Clone)]
pub struct SyntheticSet {
    pub img_params: Matrix,
    pub txt_params: Matrix,
    pub vel_img: Matrix,
    pub vel_txt: Matrix,
    pub iteration: u64,
}

impl SyntheticSet {
    /// Fresh set with zero velocity at iteration 0.
    pub fn new(img_params: Matrix, txt_params: Matrix) -> Result<Self> {
        if img_params.rows() != txt_params.rows() {
            return Err(MdmError::Shape(format!(
                "image rows {} != text rows {}",
                img_params.rows(),
                txt_params.rows()
            )));
        }
        let vel_img = Matrix::zeros(img_params.rows(), img_params.cols());
        let vel_txt = Matrix::zeros(txt_params.rows(), txt_params.cols());
        Ok(SyntheticSet {
            img_params,
            txt_params,
            vel_img,
            vel_txt,
            iteration: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.img_params.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.img_params.rows() != self.txt_params.rows() {
            return Err(MdmError::Shape("image/text row mismatch".into()));
        }
        if self.vel_img.rows() != self.img_params.rows()
            || self.vel_img.cols() != self.img_params.cols()
            || self.vel_txt.rows() != self.txt_params.rows()
            || self.vel_txt.cols() != self.txt_params.cols()
        {
            return Err(MdmError::Shape("velocity shape mismatch".into()));
        }
        if !(self.img_params.is_finite() && self.txt_params.is_finite()) {
            return Err(MdmError::Numeric(
                "synthetic parameters are not finite".into(),
            ));
        }
        Ok(())
    }
}

/// One line of the run log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: u64,
    pub loss: LossBreakdown,
    pub grad_norm_pre_clip: f64,
    pub clipped: bool,
    pub merged_from: Vec<(u32, u32)>,
}

/// Synthetic set plus the Rng mid-stream, so a run can be split and resumed.
#[derive(Debug, Clone)]
pub struct DistillState {
    pub syn: SyntheticSet,
    pub rng: Rng,
}

/// One optimizer step. Rng order is fixed: the expert draw first, then the
/// real-batch draw. The batch is drawn without replacement unless
/// `batch_real` exceeds the number of real pairs.
pub fn distill_step(
    syn: &mut SyntheticSet,
    data: &EmbeddingPairSet,
    pool: &ExpertPool,
    cfg: &MdmConfig,
    rng: &mut Rng,
) -> Result<IterationLog> {
    syn.validate()?;
    let arch = &pool.arch;
    if syn.img_params.cols() != arch.image_dims[0] || syn.txt_params.cols() != arch.text_dims[0] {
        return Err(MdmError::Shape(format!(
            "synthetic dims {}x{} do not match pool arch inputs {}x{}",
            syn.img_params.cols(),
            syn.txt_params.cols(),
            arch.image_dims[0],
            arch.text_dims[0]
        )));
    }
    if data.image.cols() != arch.image_dims[0] || data.text.cols() != arch.text_dims[0] {
        return Err(MdmError::Shape(
            "real data dims do not match pool arch".into(),
        ));
    }
    let n_real = data.len();
    if n_real == 0 {
        return Err(MdmError::Size("real pair set is empty".into()));
    }

    let draw = sample_and_merge(pool, &cfg.merge, rng)?;
    let merged = &draw.projector;

    let batch_idx: Vec<usize> = if cfg.batch_real <= n_real {
        rng.sample_distinct(n_real, cfg.batch_real)
    } else {
        log::warn!(
            "batch_real {} exceeds {} real pairs; sampling with replacement",
            cfg.batch_real,
            n_real
        );
        (0..cfg.batch_real)
            .map(|_| rng.below(n_real as u64) as usize)
            .collect()
    };
    let real_img = data.image.select_rows(&batch_idx)?;
    let real_txt = data.text.select_rows(&batch_idx)?;

    let (rzv, rzt, _) = merged.forward(&real_img, &real_txt)?;
    let (szv, szt, tape) = merged.forward(&syn.img_params, &syn.txt_params)?;

    let real_jb = make_joint_batch(&rzv, &rzt, cfg.eps_gap)?;
    let syn_jb = make_joint_batch(&szv, &szt, cfg.eps_gap)?;

    let (breakdown, d_zv, d_zt) = mdm_loss(&real_jb, &syn_jb, cfg)?;
    let grads = merged.backward(&tape, &d_zv, &d_zt, Wrt::Inputs)?;
    let mut g_img = grads.d_x_img.expect("input grads requested");
    let mut g_txt = grads.d_x_txt.expect("input grads requested");

    let grad_norm = global_l2_norm([&g_img, &g_txt]);
    if !grad_norm.is_finite() {
        return Err(MdmError::Numeric(format!(
            "non-finite gradient at iteration {}",
            syn.iteration + 1
        )));
    }
    let clipped = grad_norm > cfg.clip_norm;
    if clipped {
        let s = cfg.clip_norm / grad_norm;
        g_img = g_img.scale(s)?;
        g_txt = g_txt.scale(s)?;
    }

    let step = |p: &mut Matrix, v: &mut Matrix, g: &Matrix| {
        for ((pv, vv), gv) in p
            .data_mut()
            .iter_mut()
            .zip(v.data_mut().iter_mut())
            .zip(g.data())
        {
            *vv = cfg.momentum * *vv + gv;
            *pv -= cfg.lr * *vv;
        }
    };
    step(&mut syn.img_params, &mut syn.vel_img, &g_img);
    step(&mut syn.txt_params, &mut syn.vel_txt, &g_txt);

    if !(syn.img_params.is_finite() && syn.txt_params.is_finite()) {
        return Err(MdmError::Numeric(format!(
            "synthetic parameters became non-finite at iteration {}",
            syn.iteration + 1
        )));
    }
    syn.iteration += 1;

    Ok(IterationLog {
        iteration: syn.iteration,
        loss: breakdown,
        grad_norm_pre_clip: grad_norm,
        clipped,
        merged_from: draw.picks,
    })
}

/// Rolling early-stop tracker over relative total-loss changes.
struct Plateau {
    changes: std::collections::VecDeque<f64>,
    prev: Option<f64>,
}

impl Plateau {
    fn new() -> Self {
        Plateau {
            changes: std::collections::VecDeque::new(),
            prev: None,
        }
    }

    /// Record a total loss; true means the run has plateaued.
    fn push(&mut self, total: f64) -> bool {
        if let Some(p) = self.prev {
            let rel = (total - p).abs() / p.abs().max(1e-12);
            if self.changes.len() == PLATEAU_WINDOW {
                self.changes.pop_front();
            }
            self.changes.push_back(rel);
        }
        self.prev = Some(total);
        if self.changes.len() < PLATEAU_WINDOW {
            return false;
        }
        let mean = self.changes.iter().sum::<f64>() / self.changes.len() as f64;
        mean < PLATEAU_TOL
    }
}

/// Run up to `iters` steps from an existing state, invoking `sink` on every
/// log line as it is produced. Stops early on plateau. The plateau history
/// starts empty, so a resumed run re-accumulates its window.
pub fn run_steps<F: FnMut(&IterationLog)>(
    state: &mut DistillState,
    data: &EmbeddingPairSet,
    pool: &ExpertPool,
    cfg: &MdmConfig,
    iters: usize,
    mut sink: F,
) -> Result<Vec<IterationLog>> {
    let mut logs = Vec::new();
    let mut plateau = Plateau::new();
    for _ in 0..iters {
        let log = distill_step(&mut state.syn, data, pool, cfg, &mut state.rng)?;
        sink(&log);
        let stop = plateau.push(log.loss.total);
        logs.push(log);
        if stop {
            log::info!(
                "plateau at iteration {}: mean relative change < {PLATEAU_TOL}",
                state.syn.iteration
            );
            break;
        }
    }
    Ok(logs)
}

/// Seed `k` synthetic pairs from the real set using the anchor's joint
/// encoding, per the requested method.
pub fn seed_synthetic(
    data: &EmbeddingPairSet,
    pool: &ExpertPool,
    method: SeedMethod,
    k: usize,
    rng: &mut Rng,
) -> Result<(SeedSelection, SyntheticSet)> {
    let (zv, zt, _) = pool.anchor.projector.forward(&data.image, &data.text)?;
    let joint = zv.hcat(&zt)?;
    let selection = match method {
        SeedMethod::KmeansJoint => kmeans_joint(&joint, k, rng, KMEANS_MAX_ITER, KMEANS_TOL)?,
        SeedMethod::Kcenter => kcenter(&joint, k, rng)?,
        SeedMethod::Herding => herding(&joint, k)?,
        SeedMethod::Random => random_selection(&joint, k, rng)?,
    };
    let syn = build_synthetic(&selection, data)?;
    Ok((selection, syn))
}

/// Full pipeline: seed, then iterate to `cfg.max_iters` or plateau.
pub fn run(
    data: &EmbeddingPairSet,
    pool: &ExpertPool,
    cfg: &MdmConfig,
    method: SeedMethod,
    k: usize,
) -> Result<(SyntheticSet, Vec<IterationLog>)> {
    cfg.validate()?;
    let mut rng = Rng::new(cfg.seed);
    let (_, syn) = seed_synthetic(data, pool, method, k, &mut rng)?;
    let mut state = DistillState { syn, rng };
    let logs = run_steps(&mut state, data, pool, cfg, cfg.max_iters, |_| {})?;
    Ok((state.syn, logs))
}
