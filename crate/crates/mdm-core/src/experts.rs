//! The finetuned-expert pool: InfoNCE training of projectors on real data
//! with per-epoch checkpoint buffering, angle-ratio weight merging of two
//! experts with the anchor, random (expert, epoch) sampling, and the pool
//! directory layout.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bytes::atomic_write;
use crate::dataio::EmbeddingPairSet;
use crate::error::{MdmError, Result};
use crate::losses::infonce;
use crate::numerics::{Matrix, Rng};
use crate::projector::{
    load_checkpoint, save_checkpoint, ArchSpec, Checkpoint, LayerParams, Projector, Wrt,
};

/// Temperature used when finetuning experts and evaluation projectors.
pub const TRAIN_TAU: f64 = 0.07;

/// Buffer of finetuned experts: the epoch-0 anchor plus, per expert id, the
/// per-epoch checkpoints (epochs contiguous from 1).
#[derive(Debug, Clone)]
pub struct ExpertPool {
    pub anchor: Checkpoint,
    pub experts: BTreeMap<u32, Vec<Checkpoint>>,
    pub arch: ArchSpec,
}

impl ExpertPool {
    pub fn new(anchor: Checkpoint, experts: BTreeMap<u32, Vec<Checkpoint>>) -> Result<Self> {
        if anchor.epoch != 0 {
            return Err(MdmError::Pool(format!(
                "anchor must be epoch 0, got {}",
                anchor.epoch
            )));
        }
        let arch = anchor.projector.arch.clone();
        for (&id, list) in &experts {
            for (i, ck) in list.iter().enumerate() {
                if ck.expert_id != id {
                    return Err(MdmError::Pool(format!(
                        "checkpoint under expert {id} claims expert {}",
                        ck.expert_id
                    )));
                }
                if ck.epoch as usize != i + 1 {
                    return Err(MdmError::Pool(format!(
                        "expert {id} epochs not contiguous from 1: slot {i} holds epoch {}",
                        ck.epoch
                    )));
                }
                if ck.projector.arch != arch {
                    return Err(MdmError::Pool(format!(
                        "expert {id} epoch {} architecture differs from anchor",
                        ck.epoch
                    )));
                }
            }
        }
        Ok(ExpertPool {
            anchor,
            experts,
            arch,
        })
    }

    /// Largest epoch count available across experts.
    pub fn max_epochs(&self) -> usize {
        self.experts.values().map(Vec::len).max().unwrap_or(0)
    }
}

/// How experts are sampled and merged each iteration.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct MergeConfig {
    pub alpha: f64,
    pub n_experts: usize,
    pub min_epoch: u32,
    pub max_epoch: u32,
}

impl Default for MergeConfig {
    fn default() -> Self {
        MergeConfig {
            alpha: 0.5,
            n_experts: 2,
            min_epoch: 1,
            max_epoch: 10,
        }
    }
}

impl MergeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(MdmError::Config(format!(
                "merge alpha must be in (0, 1], got {}",
                self.alpha
            )));
        }
        if self.n_experts < 2 {
            return Err(MdmError::Config(format!(
                "n_experts must be >= 2, got {}",
                self.n_experts
            )));
        }
        if self.min_epoch < 1 || self.min_epoch > self.max_epoch {
            return Err(MdmError::Config(format!(
                "epoch range [{}, {}] invalid",
                self.min_epoch, self.max_epoch
            )));
        }
        Ok(())
    }
}

/// Per-epoch checkpoints plus the running per-epoch mean training loss.
#[derive(Debug)]
pub struct TrainedExpert {
    pub checkpoints: Vec<Checkpoint>,
    pub epoch_losses: Vec<f64>,
}

fn apply_param_step(p: &mut Projector, g: &crate::projector::Gradients, lr: f64) {
    let image = g.image_params.as_ref().expect("params requested");
    let text = g.text_params.as_ref().expect("params requested");
    for (layer, lg) in p
        .image_layers
        .iter_mut()
        .zip(image)
        .chain(p.text_layers.iter_mut().zip(text))
    {
        for (w, gw) in layer.weight.data_mut().iter_mut().zip(lg.weight.data()) {
            *w -= lr * gw;
        }
        for (b, gb) in layer.bias.data_mut().iter_mut().zip(lg.bias.data()) {
            *b -= lr * gb;
        }
    }
}

/// Shuffled-minibatch SGD on InfoNCE over paired rows. Mutates `p` in place,
/// invokes `on_epoch` after every epoch with the epoch index (1-based), and
/// returns the per-epoch sample-weighted mean losses.
pub(crate) fn sgd_infonce_train<F: FnMut(usize, &Projector)>(
    p: &mut Projector,
    img: &Matrix,
    txt: &Matrix,
    epochs: usize,
    lr: f64,
    batch: usize,
    rng: &mut Rng,
    mut on_epoch: F,
) -> Result<Vec<f64>> {
    let n = img.rows();
    if n == 0 {
        return Err(MdmError::Size("cannot train on an empty pair set".into()));
    }
    if batch == 0 {
        return Err(MdmError::Config("batch size must be >= 1".into()));
    }
    let b = if batch > n {
        log::warn!("batch {batch} exceeds {n} pairs; clamped to {n}");
        n
    } else {
        batch
    };
    let mut losses = Vec::with_capacity(epochs);
    let mut order: Vec<usize> = (0..n).collect();
    for e in 0..epochs {
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(b) {
            let xi = img.select_rows(chunk)?;
            let xt = txt.select_rows(chunk)?;
            let (zv, zt, tape) = p.forward(&xi, &xt)?;
            let (loss, d_zv, d_zt) = infonce(&zv, &zt, TRAIN_TAU)?;
            let grads = p.backward(&tape, &d_zv, &d_zt, Wrt::Params)?;
            apply_param_step(p, &grads, lr);
            loss_sum += loss * chunk.len() as f64;
        }
        losses.push(loss_sum / n as f64);
        on_epoch(e + 1, p);
    }
    Ok(losses)
}

/// Finetune one expert from the anchor, snapshotting after every epoch.
pub fn train_expert(
    data: &EmbeddingPairSet,
    anchor: &Checkpoint,
    expert_id: u32,
    epochs: usize,
    lr: f64,
    batch: usize,
    rng: &mut Rng,
) -> Result<TrainedExpert> {
    if epochs == 0 {
        return Err(MdmError::Config("epochs must be >= 1".into()));
    }
    let arch = &anchor.projector.arch;
    if data.image.cols() != arch.image_dims[0] || data.text.cols() != arch.text_dims[0] {
        return Err(MdmError::Shape(format!(
            "data dims {}x{} do not match arch inputs {}x{}",
            data.image.cols(),
            data.text.cols(),
            arch.image_dims[0],
            arch.text_dims[0]
        )));
    }
    let mut p = anchor.projector.clone();
    let mut checkpoints = Vec::with_capacity(epochs);
    let epoch_losses = sgd_infonce_train(
        &mut p,
        &data.image,
        &data.text,
        epochs,
        lr,
        batch,
        rng,
        |epoch, proj| {
            checkpoints.push(Checkpoint {
                expert_id,
                epoch: epoch as u32,
                projector: proj.clone(),
            });
        },
    )?;
    Ok(TrainedExpert {
        checkpoints,
        epoch_losses,
    })
}

/// Full pool construction from one seed: the anchor is drawn first, then each
/// expert finetunes from it with an independent forked rng. Returns the pool
/// and per-expert epoch losses.
pub fn train_pool(
    data: &EmbeddingPairSet,
    arch: &ArchSpec,
    n_experts: u32,
    epochs: usize,
    lr: f64,
    batch: usize,
    seed: u64,
) -> Result<(ExpertPool, BTreeMap<u32, Vec<f64>>)> {
    if n_experts == 0 {
        return Err(MdmError::Config("need at least one expert".into()));
    }
    let mut rng = Rng::new(seed);
    let anchor = Checkpoint {
        expert_id: 0,
        epoch: 0,
        projector: Projector::init_random(arch, &mut rng, 1.0)?,
    };
    let mut experts = BTreeMap::new();
    let mut losses = BTreeMap::new();
    for id in 0..n_experts {
        let mut child = rng.fork();
        let trained = train_expert(data, &anchor, id, epochs, lr, batch, &mut child)?;
        losses.insert(id, trained.epoch_losses);
        experts.insert(id, trained.checkpoints);
    }
    Ok((ExpertPool::new(anchor, experts)?, losses))
}

/// Interpolation ratio from the mutual angle of two displacement tensors:
/// `t = 2<d1,d2> / (|d1||d2| + <d1,d2>)`, defaulting to the anchor (t = 0)
/// when the displacements conflict or the denominator vanishes.
pub fn merge_ratio(delta1: &Matrix, delta2: &Matrix) -> Result<f64> {
    let ip = delta1.flat_dot(delta2)?;
    let n1 = delta1.flat_dot(delta1)?.sqrt();
    let n2 = delta2.flat_dot(delta2)?.sqrt();
    let denom = n1 * n2 + ip;
    if denom <= 1e-12 {
        return Ok(0.0);
    }
    let t = 2.0 * ip / denom;
    if t < 0.0 {
        Ok(0.0)
    } else {
        Ok(t.min(1.0))
    }
}

fn merge_tensor(anchor: &Matrix, p1: &Matrix, p2: &Matrix, alpha: f64) -> Result<Matrix> {
    let d1 = p1.sub(anchor)?;
    let d2 = p2.sub(anchor)?;
    let t = merge_ratio(&d1, &d2)?;
    let coef = alpha * t * 0.5;
    let mut out = anchor.clone();
    for ((o, a), b) in out.data_mut().iter_mut().zip(d1.data()).zip(d2.data()) {
        *o += coef * (a + b);
    }
    Ok(out)
}

/// Merge exactly two expert checkpoints with the anchor, per parameter
/// tensor (each weight and each bias is one merge unit), over both branches.
pub fn merge_weights(anchor: &Checkpoint, picks: &[&Checkpoint], alpha: f64) -> Result<Projector> {
    if picks.len() != 2 {
        return Err(MdmError::Unsupported(format!(
            "merge is defined for exactly 2 experts, got {}",
            picks.len()
        )));
    }
    if !alpha.is_finite() {
        return Err(MdmError::Config(format!(
            "alpha must be finite, got {alpha}"
        )));
    }
    let arch = &anchor.projector.arch;
    for p in picks {
        if p.projector.arch != *arch {
            return Err(MdmError::Shape(
                "expert architecture differs from anchor".into(),
            ));
        }
    }
    let merge_branch = |get: fn(&Projector) -> &Vec<LayerParams>| -> Result<Vec<LayerParams>> {
        let a_layers = get(&anchor.projector);
        let l1 = get(&picks[0].projector);
        let l2 = get(&picks[1].projector);
        a_layers
            .iter()
            .zip(l1)
            .zip(l2)
            .map(|((a, p1), p2)| {
                Ok(LayerParams {
                    name: a.name.clone(),
                    weight: merge_tensor(&a.weight, &p1.weight, &p2.weight, alpha)?,
                    bias: merge_tensor(&a.bias, &p1.bias, &p2.bias, alpha)?,
                })
            })
            .collect()
    };
    let image_layers = merge_branch(|p| &p.image_layers)?;
    let text_layers = merge_branch(|p| &p.text_layers)?;
    Projector::from_parts(arch.clone(), image_layers, text_layers)
}

/// A freshly merged projector plus the (expert_id, epoch) draws behind it.
#[derive(Debug)]
pub struct MergedDraw {
    pub projector: Projector,
    pub picks: Vec<(u32, u32)>,
}

/// Draw `n_experts` distinct experts, one uniform epoch in
/// `[min_epoch, max_epoch]` each, and merge them with the anchor.
pub fn sample_and_merge(pool: &ExpertPool, cfg: &MergeConfig, rng: &mut Rng) -> Result<MergedDraw> {
    cfg.validate()?;
    let ids: Vec<u32> = pool.experts.keys().copied().collect();
    if ids.len() < cfg.n_experts {
        return Err(MdmError::Pool(format!(
            "pool has {} experts, need {}",
            ids.len(),
            cfg.n_experts
        )));
    }
    for &id in &ids {
        if pool.experts[&id].len() < cfg.max_epoch as usize {
            return Err(MdmError::Pool(format!(
                "expert {id} has {} epochs, sampling needs {}",
                pool.experts[&id].len(),
                cfg.max_epoch
            )));
        }
    }
    let span = (cfg.max_epoch - cfg.min_epoch + 1) as u64;
    let positions = rng.sample_distinct(ids.len(), cfg.n_experts);
    let mut picks = Vec::with_capacity(cfg.n_experts);
    let mut cks: Vec<&Checkpoint> = Vec::with_capacity(cfg.n_experts);
    for pos in positions {
        let id = ids[pos];
        let epoch = cfg.min_epoch + rng.below(span) as u32;
        cks.push(&pool.experts[&id][(epoch - 1) as usize]);
        picks.push((id, epoch));
    }
    let projector = merge_weights(&pool.anchor, &cks, cfg.alpha)?;
    Ok(MergedDraw { projector, picks })
}

/// `pool.json` manifest accompanying the on-disk pool layout.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolMeta {
    pub arch: ArchSpec,
    pub n_experts: usize,
    pub epochs: usize,
    pub train_seed: u64,
    pub data_fingerprint: u64,
}

/// Write `anchor.mdmc`, `expert_<id>/epoch_<e>.mdmc`, and `pool.json`.
pub fn save_pool(
    pool: &ExpertPool,
    train_seed: u64,
    data_fingerprint: u64,
    dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    save_checkpoint(&pool.anchor, &dir.join("anchor.mdmc"))?;
    for (&id, list) in &pool.experts {
        let sub = dir.join(format!("expert_{id}"));
        std::fs::create_dir_all(&sub)?;
        for ck in list {
            save_checkpoint(ck, &sub.join(format!("epoch_{}.mdmc", ck.epoch)))?;
        }
    }
    let meta = PoolMeta {
        arch: pool.arch.clone(),
        n_experts: pool.experts.len(),
        epochs: pool.max_epochs(),
        train_seed,
        data_fingerprint,
    };
    let json = serde_json::to_string_pretty(&meta)?;
    atomic_write(&dir.join("pool.json"), json.as_bytes())
}

pub fn load_pool(dir: &Path) -> Result<(ExpertPool, PoolMeta)> {
    let meta_bytes = std::fs::read_to_string(dir.join("pool.json"))?;
    let meta: PoolMeta = serde_json::from_str(&meta_bytes)
        .map_err(|e| MdmError::Format(format!("pool.json: {e}")))?;
    let anchor = load_checkpoint(&dir.join("anchor.mdmc"))?;
    let mut experts = BTreeMap::new();
    let mut ids = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(raw) = name.strip_prefix("expert_") {
            if let Ok(id) = raw.parse::<u32>() {
                ids.push(id);
            }
        }
    }
    ids.sort_unstable();
    for id in ids {
        let sub = dir.join(format!("expert_{id}"));
        let mut list = Vec::with_capacity(meta.epochs);
        for e in 1..=meta.epochs {
            list.push(load_checkpoint(&sub.join(format!("epoch_{e}.mdmc")))?);
        }
        experts.insert(id, list);
    }
    if experts.len() != meta.n_experts {
        return Err(MdmError::Pool(format!(
            "pool.json lists {} experts, found {}",
            meta.n_experts,
            experts.len()
        )));
    }
    let pool = ExpertPool::new(anchor, experts)?;
    if pool.arch != meta.arch {
        return Err(MdmError::Pool(
            "pool.json architecture differs from anchor checkpoint".into(),
        ));
    }
    Ok((pool, meta))
}
