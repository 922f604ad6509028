//! The two-branch image/text projector: stacks of affine layers with an
//! optional tanh between them, a final row-wise unit normalization, exact
//! reverse-mode gradients for both parameters and inputs, and binary
//! checkpoint serialization.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::bytes::{atomic_write, ByteReader, ByteWriter};
use crate::error::{MdmError, Result};
use crate::numerics::{Matrix, Rng};
use crate::sphere::{unit_normalize, MIN_NORM};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MDMC";
pub const CHECKPOINT_VERSION: u16 = 1;
/// Reserved checkpoint entry carrying the activation flag (0 = identity,
/// 1 = tanh) inside the ordinary named-tensor grammar.
const ACTIVATION_ENTRY: &str = "meta.activation";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Identity,
}

/// Layer widths for both branches. Each `dims` list runs from the raw input
/// width to the joint embedding dimension, one affine layer per adjacent
/// pair; `activation` sits between affine layers (never after the last).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub image_dims: Vec<usize>,
    pub text_dims: Vec<usize>,
    pub activation: Activation,
}

impl ArchSpec {
    pub fn new(
        image_dims: Vec<usize>,
        text_dims: Vec<usize>,
        activation: Activation,
    ) -> Result<Self> {
        let a = ArchSpec {
            image_dims,
            text_dims,
            activation,
        };
        a.validate()?;
        Ok(a)
    }

    pub fn validate(&self) -> Result<()> {
        for (branch, dims) in [("image", &self.image_dims), ("text", &self.text_dims)] {
            if dims.len() < 2 {
                return Err(MdmError::Config(format!(
                    "{branch} branch needs at least one affine layer (got dims {dims:?})"
                )));
            }
            if dims.iter().any(|&d| d == 0) {
                return Err(MdmError::Config(format!(
                    "{branch} branch has a zero width: {dims:?}"
                )));
            }
        }
        if self.image_dims.last() != self.text_dims.last() {
            return Err(MdmError::Config(format!(
                "branches must end at the same joint dimension: image {:?} vs text {:?}",
                self.image_dims, self.text_dims
            )));
        }
        Ok(())
    }

    pub fn joint_dim(&self) -> usize {
        *self.image_dims.last().unwrap()
    }
}

/// One affine layer: `z = x W^T + b`, weight `[out x in]`, bias `[1 x out]`.
/// Weight and bias are separate merge units.
#[derive(Debug, Clone)]
pub struct LayerParams {
    pub name: String,
    pub weight: Matrix,
    pub bias: Matrix,
}

static TOKEN_COUNTER: AtomicU64 = AtomicU64::new(1);

fn fresh_token() -> u64 {
    TOKEN_COUNTER.fetch_add(1, Ordering::Relaxed)
}

/// The full two-branch model Ψ = (θ^v, θ^t). Values are immutable after
/// construction; every constructor stamps a token that ties tapes to the
/// parameters they were recorded against.
#[derive(Debug, Clone)]
pub struct Projector {
    pub arch: ArchSpec,
    pub image_layers: Vec<LayerParams>,
    pub text_layers: Vec<LayerParams>,
    token: u64,
}

struct BranchTape {
    /// Input to each affine layer (`inputs[0]` is the raw batch; for l > 0
    /// this equals the activation of the previous pre-activation).
    inputs: Vec<Matrix>,
    /// Row norms of the final affine output, used by the normalization
    /// Jacobian.
    norms: Vec<f64>,
    out: Matrix,
}

/// Activation record from one [`Projector::forward`]; consumed by
/// [`Projector::backward`] on the same parameter set.
pub struct Tape {
    token: u64,
    image: BranchTape,
    text: BranchTape,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Wrt {
    Params,
    Inputs,
    Both,
}

/// Per-layer parameter gradients, shaped like the layer they belong to.
#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub weight: Matrix,
    pub bias: Matrix,
}

#[derive(Debug)]
pub struct Gradients {
    pub image_params: Option<Vec<LayerGrads>>,
    pub text_params: Option<Vec<LayerGrads>>,
    pub d_x_img: Option<Matrix>,
    pub d_x_txt: Option<Matrix>,
}

fn branch_forward(
    layers: &[LayerParams],
    x: &Matrix,
    activation: Activation,
) -> Result<BranchTape> {
    let mut inputs = Vec::with_capacity(layers.len());
    let mut a = x.clone();
    let last = layers.len() - 1;
    for (l, layer) in layers.iter().enumerate() {
        if a.cols() != layer.weight.cols() {
            return Err(MdmError::Shape(format!(
                "layer {} expects input width {}, got {}",
                layer.name,
                layer.weight.cols(),
                a.cols()
            )));
        }
        let mut z = a.matmul(&layer.weight.transpose())?;
        for r in 0..z.rows() {
            let row = z.row_mut(r);
            for (c, v) in row.iter_mut().enumerate() {
                *v += layer.bias.get(0, c);
            }
        }
        inputs.push(a);
        a = if l < last && activation == Activation::Tanh {
            let mut t = z;
            for v in t.data_mut() {
                *v = v.tanh();
            }
            t
        } else {
            z
        };
    }
    let norms: Vec<f64> = (0..a.rows())
        .map(|r| crate::sphere::row_norm(a.row(r)))
        .collect();
    if let Some((r, &n)) = norms.iter().enumerate().find(|(_, &n)| n < MIN_NORM) {
        return Err(MdmError::DegenerateRow { row: r, norm: n });
    }
    let out = unit_normalize(&a)?;
    Ok(BranchTape { inputs, norms, out })
}

fn branch_backward(
    layers: &[LayerParams],
    tape: &BranchTape,
    d_out: &Matrix,
    activation: Activation,
    want_params: bool,
    want_inputs: bool,
) -> Result<(Option<Vec<LayerGrads>>, Option<Matrix>)> {
    if d_out.rows() != tape.out.rows() || d_out.cols() != tape.out.cols() {
        return Err(MdmError::Shape(format!(
            "output gradient {}x{} vs forward output {}x{}",
            d_out.rows(),
            d_out.cols(),
            tape.out.rows(),
            tape.out.cols()
        )));
    }
    // Normalization Jacobian per row: d_pre = (g - <g, zh> zh) / |z|.
    let mut d = Matrix::zeros(d_out.rows(), d_out.cols());
    for r in 0..d_out.rows() {
        let g = d_out.row(r);
        let zh = tape.out.row(r);
        let proj = crate::sphere::dot(g, zh);
        let dr = d.row_mut(r);
        for c in 0..g.len() {
            dr[c] = (g[c] - proj * zh[c]) / tape.norms[r];
        }
    }
    let last = layers.len() - 1;
    let mut param_grads: Vec<LayerGrads> = Vec::with_capacity(layers.len());
    for l in (0..layers.len()).rev() {
        if l < last && activation == Activation::Tanh {
            // inputs[l+1] = tanh(z_l), so tanh'(z_l) = 1 - inputs[l+1]^2.
            let act = &tape.inputs[l + 1];
            for (v, &a) in d.data_mut().iter_mut().zip(act.data()) {
                *v *= 1.0 - a * a;
            }
        }
        if want_params {
            let w_grad = d.transpose().matmul(&tape.inputs[l])?;
            let mut b_grad = Matrix::zeros(1, layers[l].bias.cols());
            for r in 0..d.rows() {
                let row = d.row(r);
                let br = b_grad.row_mut(0);
                for c in 0..row.len() {
                    br[c] += row[c];
                }
            }
            param_grads.push(LayerGrads {
                weight: w_grad,
                bias: b_grad,
            });
        }
        if l > 0 || want_inputs {
            d = d.matmul(&layers[l].weight)?;
        }
    }
    param_grads.reverse();
    Ok((want_params.then_some(param_grads), want_inputs.then_some(d)))
}

impl Projector {
    pub fn from_parts(
        arch: ArchSpec,
        image_layers: Vec<LayerParams>,
        text_layers: Vec<LayerParams>,
    ) -> Result<Self> {
        let p = Projector {
            arch,
            image_layers,
            text_layers,
            token: fresh_token(),
        };
        p.validate()?;
        Ok(p)
    }

    /// Anchor-style initialization: weights ~ N(0, scale^2 / fan_in), biases
    /// zero. Draw order is fixed (image branch first), so a seed fully
    /// determines the model.
    pub fn init_random(arch: &ArchSpec, rng: &mut Rng, scale: f64) -> Result<Self> {
        arch.validate()?;
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(MdmError::Config(format!(
                "init scale must be > 0, got {scale}"
            )));
        }
        let build = |dims: &[usize], prefix: &str, rng: &mut Rng| -> Vec<LayerParams> {
            dims.windows(2)
                .enumerate()
                .map(|(i, w)| {
                    let (fan_in, fan_out) = (w[0], w[1]);
                    let std = scale / (fan_in as f64).sqrt();
                    LayerParams {
                        name: format!("{prefix}.{i}"),
                        weight: rng.gauss_matrix(fan_out, fan_in, 0.0, std),
                        bias: Matrix::zeros(1, fan_out),
                    }
                })
                .collect()
        };
        let image_layers = build(&arch.image_dims, "img", rng);
        let text_layers = build(&arch.text_dims, "txt", rng);
        Projector::from_parts(arch.clone(), image_layers, text_layers)
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        for (dims, layers, branch) in [
            (&self.arch.image_dims, &self.image_layers, "image"),
            (&self.arch.text_dims, &self.text_layers, "text"),
        ] {
            if layers.len() + 1 != dims.len() {
                return Err(MdmError::Shape(format!(
                    "{branch} branch has {} layers for dims {dims:?}",
                    layers.len()
                )));
            }
            for (i, layer) in layers.iter().enumerate() {
                let (fan_in, fan_out) = (dims[i], dims[i + 1]);
                if layer.weight.rows() != fan_out || layer.weight.cols() != fan_in {
                    return Err(MdmError::Shape(format!(
                        "{} weight is {}x{}, arch wants {}x{}",
                        layer.name,
                        layer.weight.rows(),
                        layer.weight.cols(),
                        fan_out,
                        fan_in
                    )));
                }
                if layer.bias.rows() != 1 || layer.bias.cols() != fan_out {
                    return Err(MdmError::Shape(format!(
                        "{} bias is {}x{}, arch wants 1x{}",
                        layer.name,
                        layer.bias.rows(),
                        layer.bias.cols(),
                        fan_out
                    )));
                }
            }
        }
        Ok(())
    }

    /// Run both branches and record everything backward needs.
    pub fn forward(&self, x_img: &Matrix, x_txt: &Matrix) -> Result<(Matrix, Matrix, Tape)> {
        let image = branch_forward(&self.image_layers, x_img, self.arch.activation)?;
        let text = branch_forward(&self.text_layers, x_txt, self.arch.activation)?;
        let (zv, zt) = (image.out.clone(), text.out.clone());
        Ok((
            zv,
            zt,
            Tape {
                token: self.token,
                image,
                text,
            },
        ))
    }

    /// Reverse-mode gradients of a scalar loss given its gradients at the
    /// normalized outputs. The tape must come from a forward on this exact
    /// parameter set.
    pub fn backward(
        &self,
        tape: &Tape,
        d_zv: &Matrix,
        d_zt: &Matrix,
        wrt: Wrt,
    ) -> Result<Gradients> {
        if tape.token != self.token {
            return Err(MdmError::State(
                "tape was recorded against different parameters".into(),
            ));
        }
        let want_params = matches!(wrt, Wrt::Params | Wrt::Both);
        let want_inputs = matches!(wrt, Wrt::Inputs | Wrt::Both);
        let (image_params, d_x_img) = branch_backward(
            &self.image_layers,
            &tape.image,
            d_zv,
            self.arch.activation,
            want_params,
            want_inputs,
        )?;
        let (text_params, d_x_txt) = branch_backward(
            &self.text_layers,
            &tape.text,
            d_zt,
            self.arch.activation,
            want_params,
            want_inputs,
        )?;
        Ok(Gradients {
            image_params,
            text_params,
            d_x_img,
            d_x_txt,
        })
    }
}

/// A persisted projector state. Epoch 0 is the pretrained anchor θ₀.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub expert_id: u32,
    pub epoch: u32,
    pub projector: Projector,
}

fn write_tensor(w: &mut ByteWriter, name: &str, dims: &[usize], data: &[f64]) {
    w.u16(name.len() as u16);
    w.str_bytes(name);
    w.u8(dims.len() as u8);
    for &d in dims {
        w.u32(d as u32);
    }
    w.f32_slice(data.iter().map(|&v| v as f32));
}

pub fn save_checkpoint(c: &Checkpoint, path: &Path) -> Result<()> {
    let mut w = ByteWriter::new();
    w.magic(CHECKPOINT_MAGIC);
    w.u16(CHECKPOINT_VERSION);
    w.u32(c.expert_id);
    w.u32(c.epoch);
    let n_layers = c.projector.image_layers.len() + c.projector.text_layers.len();
    w.u32(1 + 2 * n_layers as u32);
    let act_flag = match c.projector.arch.activation {
        Activation::Identity => 0.0,
        Activation::Tanh => 1.0,
    };
    write_tensor(&mut w, ACTIVATION_ENTRY, &[1], &[act_flag]);
    for layer in c
        .projector
        .image_layers
        .iter()
        .chain(&c.projector.text_layers)
    {
        write_tensor(
            &mut w,
            &format!("{}.weight", layer.name),
            &[layer.weight.rows(), layer.weight.cols()],
            layer.weight.data(),
        );
        write_tensor(
            &mut w,
            &format!("{}.bias", layer.name),
            &[layer.bias.cols()],
            layer.bias.data(),
        );
    }
    atomic_write(path, &w.into_bytes())
}

struct RawTensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

fn branch_from_entries(
    entries: &BTreeMap<String, RawTensor>,
    prefix: &str,
) -> Result<(Vec<usize>, Vec<LayerParams>)> {
    let mut layers = Vec::new();
    let mut dims: Vec<usize> = Vec::new();
    for i in 0.. {
        let wname = format!("{prefix}.{i}.weight");
        let bname = format!("{prefix}.{i}.bias");
        let (w, b) = match (entries.get(&wname), entries.get(&bname)) {
            (Some(w), Some(b)) => (w, b),
            (None, None) => break,
            _ => {
                return Err(MdmError::Format(format!(
                    "layer {prefix}.{i} has weight or bias but not both"
                )))
            }
        };
        if w.dims.len() != 2 {
            return Err(MdmError::Format(format!(
                "{wname} must be rank 2, got {:?}",
                w.dims
            )));
        }
        if b.dims.len() != 1 || b.dims[0] != w.dims[0] {
            return Err(MdmError::Format(format!(
                "{bname} dims {:?} do not match weight {:?}",
                b.dims, w.dims
            )));
        }
        let (out, inp) = (w.dims[0], w.dims[1]);
        if dims.is_empty() {
            dims.push(inp);
        } else if *dims.last().unwrap() != inp {
            return Err(MdmError::Format(format!(
                "{wname} input width {} breaks the shape chain ending at {}",
                inp,
                dims.last().unwrap()
            )));
        }
        dims.push(out);
        layers.push(LayerParams {
            name: format!("{prefix}.{i}"),
            weight: Matrix::from_vec(out, inp, w.data.iter().map(|&v| v as f64).collect())?,
            bias: Matrix::from_vec(1, out, b.data.iter().map(|&v| v as f64).collect())?,
        });
    }
    if layers.is_empty() {
        return Err(MdmError::Format(format!(
            "no layers found for branch {prefix}"
        )));
    }
    Ok((dims, layers))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    let mut r = ByteReader::new(&bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    let version = r.u16("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(MdmError::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let expert_id = r.u32("expert_id")?;
    let epoch = r.u32("epoch")?;
    let count = r.u32("layer count")?;
    let mut entries: BTreeMap<String, RawTensor> = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u16("name length")? as usize;
        let name = r.string(name_len, "tensor name")?;
        let ndim = r.u8("ndim")? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u32("dim")? as usize);
        }
        let numel: usize = dims.iter().product();
        let data = r.f32_vec(numel, &name)?;
        if entries
            .insert(name.clone(), RawTensor { dims, data })
            .is_some()
        {
            return Err(MdmError::Format(format!("duplicate tensor {name}")));
        }
    }
    r.finish()?;
    let act = entries
        .get(ACTIVATION_ENTRY)
        .ok_or_else(|| MdmError::Format(format!("missing {ACTIVATION_ENTRY} entry")))?;
    let activation = match act.data.first().copied() {
        Some(v) if v == 0.0 => Activation::Identity,
        Some(v) if v == 1.0 => Activation::Tanh,
        other => {
            return Err(MdmError::Format(format!(
                "unrecognized activation flag {other:?}"
            )))
        }
    };
    let (image_dims, image_layers) = branch_from_entries(&entries, "img")?;
    let (text_dims, text_layers) = branch_from_entries(&entries, "txt")?;
    let arch = ArchSpec {
        image_dims,
        text_dims,
        activation,
    };
    arch.validate()
        .map_err(|e| MdmError::Format(format!("checkpoint arch invalid: {e}")))?;
    let projector = Projector::from_parts(arch, image_layers, text_layers)
        .map_err(|e| MdmError::Format(format!("checkpoint inconsistent: {e}")))?;
    Ok(Checkpoint {
        expert_id,
        epoch,
        projector,
    })
}
