//! Datasets and on-disk formats: the clustered toy embedding generator,
//! paired-embedding files (`.mdmx` + JSON sidecar manifest), synthetic-set
//! files (`.mdms`), and strict JSON config loading.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::bytes::{atomic_write, fnv1a64, ByteReader, ByteWriter};
use crate::distill::SyntheticSet;
use crate::error::{MdmError, Result};
use crate::numerics::{Matrix, Rng, RngState};
use crate::sphere::unit_normalize;

const PAIRS_MAGIC: &[u8; 4] = b"MDMX";
const PAIRS_VERSION: u16 = 1;
const SYN_MAGIC: &[u8; 4] = b"MDMS";
const SYN_VERSION: u16 = 1;
const FLAG_RESUME: u8 = 1;

/// Parameters of the clustered toy generator.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ToySpec {
    pub n_pairs: usize,
    pub d_v: usize,
    pub d_t: usize,
    pub n_clusters: usize,
    pub intra_noise: f64,
    pub cross_noise: f64,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        ToySpec {
            n_pairs: 1000,
            d_v: 32,
            d_t: 48,
            n_clusters: 10,
            intra_noise: 0.05,
            cross_noise: 0.05,
            seed: 0,
        }
    }
}

impl ToySpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_pairs == 0 || self.d_v == 0 || self.d_t == 0 {
            return Err(MdmError::Config("n_pairs, d_v, d_t must be >= 1".into()));
        }
        if self.n_clusters == 0 || self.n_clusters > self.n_pairs {
            return Err(MdmError::Config(format!(
                "n_clusters must be in [1, n_pairs], got {} with {} pairs",
                self.n_clusters, self.n_pairs
            )));
        }
        for (name, v) in [
            ("intra_noise", self.intra_noise),
            ("cross_noise", self.cross_noise),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(MdmError::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Sidecar manifest for a paired-embedding file.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PairManifest {
    pub name: String,
    pub split: String,
    pub n: usize,
    pub d_v: usize,
    pub d_t: usize,
    /// FNV-1a over the f32 payload written to the `.mdmx` file.
    pub fingerprint: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<ToySpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cluster_labels: Option<Vec<usize>>,
}

/// N aligned (image, text) embedding rows plus their manifest.
#[derive(Debug, Clone)]
pub struct EmbeddingPairSet {
    pub image: Matrix,
    pub text: Matrix,
    pub manifest: PairManifest,
}

impl EmbeddingPairSet {
    pub fn new(image: Matrix, text: Matrix, manifest: PairManifest) -> Result<Self> {
        if image.rows() != text.rows() {
            return Err(MdmError::Shape(format!(
                "image rows {} != text rows {}",
                image.rows(),
                text.rows()
            )));
        }
        if image.rows() == 0 {
            return Err(MdmError::Size(
                "pair set must hold at least one pair".into(),
            ));
        }
        if manifest.n != image.rows() || manifest.d_v != image.cols() || manifest.d_t != text.cols()
        {
            return Err(MdmError::Format(format!(
                "manifest says {}x({} + {}), data is {}x({} + {})",
                manifest.n,
                manifest.d_v,
                manifest.d_t,
                image.rows(),
                image.cols(),
                text.cols()
            )));
        }
        if let Some(labels) = &manifest.cluster_labels {
            if labels.len() != manifest.n {
                return Err(MdmError::Format(format!(
                    "{} cluster labels for {} pairs",
                    labels.len(),
                    manifest.n
                )));
            }
        }
        if !(image.is_finite() && text.is_finite()) {
            return Err(MdmError::Data("pair set contains non-finite values".into()));
        }
        Ok(EmbeddingPairSet {
            image,
            text,
            manifest,
        })
    }

    /// Wrap raw matrices with a fresh manifest (fingerprint included).
    pub fn from_matrices(name: &str, split: &str, image: Matrix, text: Matrix) -> Result<Self> {
        let manifest = PairManifest {
            name: name.to_string(),
            split: split.to_string(),
            n: image.rows(),
            d_v: image.cols(),
            d_t: text.cols(),
            fingerprint: pair_fingerprint(&image, &text),
            generator: None,
            source: None,
            cluster_labels: None,
        };
        EmbeddingPairSet::new(image, text, manifest)
    }

    pub fn len(&self) -> usize {
        self.image.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn payload_bytes(image: &Matrix, text: &Matrix) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(image.rows() * (image.cols() + text.cols()) * 4);
    for r in 0..image.rows() {
        for &v in image.row(r) {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        for &v in text.row(r) {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    bytes
}

/// Content fingerprint of a pair set: FNV-1a over the stored f32 payload.
pub fn pair_fingerprint(image: &Matrix, text: &Matrix) -> u64 {
    fnv1a64(&payload_bytes(image, text))
}

/// Generate the clustered toy dataset. Returns (train, test); the test split
/// holds `max(n_pairs / 5, 1)` extra pairs drawn from the same clusters.
///
/// Per pair, in fixed draw order: a uniform cluster, `d_v` Gaussians for the
/// image latent `h = center_v + intra_noise * eps`, then `d_t` Gaussians for
/// the text `W h + cross_noise * eps'`; both rows are unit-normalized. `W`
/// is a fixed random linear coupling, so text rows carry per-pair identity,
/// not just the cluster label.
pub fn gen_toy(spec: &ToySpec) -> Result<(EmbeddingPairSet, EmbeddingPairSet)> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed);
    let centers_v = unit_normalize(&rng.gauss_matrix(spec.n_clusters, spec.d_v, 0.0, 1.0))?;
    let coupling = rng.gauss_matrix(spec.d_t, spec.d_v, 0.0, 1.0 / (spec.d_v as f64).sqrt());

    let mut make_split = |size: usize, split: &str| -> Result<EmbeddingPairSet> {
        let mut image = Matrix::zeros(size, spec.d_v);
        let mut text = Matrix::zeros(size, spec.d_t);
        let mut labels = Vec::with_capacity(size);
        let mut h = vec![0.0; spec.d_v];
        for r in 0..size {
            let c = rng.below(spec.n_clusters as u64) as usize;
            labels.push(c);
            let center = centers_v.row(c);
            for (hv, &cv) in h.iter_mut().zip(center) {
                *hv = cv + spec.intra_noise * rng.gauss();
            }
            image.row_mut(r).copy_from_slice(&h);
            let trow = text.row_mut(r);
            for (j, tv) in trow.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (k, &hv) in h.iter().enumerate() {
                    acc += coupling.get(j, k) * hv;
                }
                *tv = acc + spec.cross_noise * rng.gauss();
            }
        }
        let image = unit_normalize(&image)?;
        let text = unit_normalize(&text)?;
        let manifest = PairManifest {
            name: "toy".to_string(),
            split: split.to_string(),
            n: size,
            d_v: spec.d_v,
            d_t: spec.d_t,
            fingerprint: pair_fingerprint(&image, &text),
            generator: Some(spec.clone()),
            source: None,
            cluster_labels: Some(labels),
        };
        EmbeddingPairSet::new(image, text, manifest)
    };

    let train = make_split(spec.n_pairs, "train")?;
    let test = make_split((spec.n_pairs / 5).max(1), "test")?;
    Ok((train, test))
}

fn manifest_path(path: &Path) -> std::path::PathBuf {
    path.with_extension("json")
}

/// Write `<path>` (binary pairs) and the sidecar `<path with .json>`.
pub fn save_pairs(set: &EmbeddingPairSet, path: &Path) -> Result<()> {
    let mut w = ByteWriter::new();
    w.magic(PAIRS_MAGIC);
    w.u16(PAIRS_VERSION);
    w.u32(set.len() as u32);
    w.u32(set.manifest.d_v as u32);
    w.u32(set.manifest.d_t as u32);
    let payload = payload_bytes(&set.image, &set.text);
    w.raw(&payload);
    atomic_write(path, &w.into_bytes())?;
    let json = serde_json::to_string_pretty(&set.manifest)?;
    atomic_write(&manifest_path(path), json.as_bytes())
}

pub fn load_pairs(path: &Path) -> Result<EmbeddingPairSet> {
    let bytes = std::fs::read(path)?;
    let mut r = ByteReader::new(&bytes);
    r.magic(PAIRS_MAGIC)?;
    let version = r.u16("version")?;
    if version != PAIRS_VERSION {
        return Err(MdmError::Format(format!(
            "unsupported pairs version {version}"
        )));
    }
    let n = r.u32("rows")? as usize;
    let d_v = r.u32("d_v")? as usize;
    let d_t = r.u32("d_t")? as usize;
    let payload = r.bytes(n * (d_v + d_t) * 4, "payload")?.to_vec();
    r.finish()?;

    let manifest_bytes = std::fs::read_to_string(manifest_path(path))?;
    let manifest: PairManifest = serde_json::from_str(&manifest_bytes)
        .map_err(|e| MdmError::Format(format!("pair manifest: {e}")))?;
    if manifest.n != n || manifest.d_v != d_v || manifest.d_t != d_t {
        return Err(MdmError::Format(format!(
            "manifest dims {}x({} + {}) disagree with file {}x({} + {})",
            manifest.n, manifest.d_v, manifest.d_t, n, d_v, d_t
        )));
    }
    let actual = fnv1a64(&payload);
    if actual != manifest.fingerprint {
        return Err(MdmError::Format(format!(
            "fingerprint mismatch: manifest {:#018x}, payload {:#018x}",
            manifest.fingerprint, actual
        )));
    }

    let mut image = Matrix::zeros(n, d_v);
    let mut text = Matrix::zeros(n, d_t);
    let mut off = 0;
    let mut next = || {
        let v = f32::from_le_bytes(payload[off..off + 4].try_into().unwrap()) as f64;
        off += 4;
        v
    };
    for r in 0..n {
        for c in 0..d_v {
            image.set(r, c, next());
        }
        for c in 0..d_t {
            text.set(r, c, next());
        }
    }
    EmbeddingPairSet::new(image, text, manifest)
}

fn write_f64_matrix(w: &mut ByteWriter, m: &Matrix) {
    w.u32(m.rows() as u32);
    w.u32(m.cols() as u32);
    w.f64_slice(m.data().iter().copied());
}

fn read_f64_matrix(r: &mut ByteReader, what: &str) -> Result<Matrix> {
    let rows = r.u32("rows")? as usize;
    let cols = r.u32("cols")? as usize;
    let data = r.f64_vec(rows * cols, what)?;
    Matrix::from_vec(rows, cols, data)
}

/// Save a synthetic set. Parameters are stored at full f64 precision so a
/// resumed run continues bit-exactly; velocities and the Rng snapshot are
/// written only when `resume` is given.
pub fn save_synthetic(syn: &SyntheticSet, resume: Option<&RngState>, path: &Path) -> Result<()> {
    let mut w = ByteWriter::new();
    w.magic(SYN_MAGIC);
    w.u16(SYN_VERSION);
    w.u8(if resume.is_some() { FLAG_RESUME } else { 0 });
    w.u64(syn.iteration);
    write_f64_matrix(&mut w, &syn.img_params);
    write_f64_matrix(&mut w, &syn.txt_params);
    if let Some(state) = resume {
        write_f64_matrix(&mut w, &syn.vel_img);
        write_f64_matrix(&mut w, &syn.vel_txt);
        for s in state.s {
            w.u64(s);
        }
        match state.spare_gauss {
            Some(g) => {
                w.u8(1);
                w.f64_slice([g]);
            }
            None => w.u8(0),
        }
    }
    atomic_write(path, &w.into_bytes())
}

/// Load a synthetic set; absent optimizer state means zero velocities.
pub fn load_synthetic(path: &Path) -> Result<(SyntheticSet, Option<RngState>)> {
    let bytes = std::fs::read(path)?;
    let mut r = ByteReader::new(&bytes);
    r.magic(SYN_MAGIC)?;
    let version = r.u16("version")?;
    if version != SYN_VERSION {
        return Err(MdmError::Format(format!(
            "unsupported synthetic version {version}"
        )));
    }
    let flags = r.u8("flags")?;
    let iteration = r.u64("iteration")?;
    let img_params = read_f64_matrix(&mut r, "image params")?;
    let txt_params = read_f64_matrix(&mut r, "text params")?;
    let mut syn = SyntheticSet::new(img_params, txt_params)?;
    syn.iteration = iteration;
    let state = if flags & FLAG_RESUME != 0 {
        syn.vel_img = read_f64_matrix(&mut r, "image velocity")?;
        syn.vel_txt = read_f64_matrix(&mut r, "text velocity")?;
        let mut s = [0u64; 4];
        for v in &mut s {
            *v = r.u64("rng state")?;
        }
        let spare_gauss = if r.u8("rng spare flag")? != 0 {
            Some(r.f64_vec(1, "rng spare")?[0])
        } else {
            None
        };
        Some(RngState { s, spare_gauss })
    } else {
        None
    };
    r.finish()?;
    syn.validate()?;
    Ok((syn, state))
}

/// Strict JSON config loading; parse problems are config errors.
pub fn load_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| MdmError::Config(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distill::MdmConfig;
    use crate::sphere::dot;

    fn tiny_spec() -> ToySpec {
        ToySpec {
            n_pairs: 60,
            d_v: 6,
            d_t: 8,
            n_clusters: 4,
            ..ToySpec::default()
        }
    }

    #[test]
    fn toy_shapes_and_manifest() {
        let (train, test) = gen_toy(&tiny_spec()).unwrap();
        assert_eq!(train.len(), 60);
        assert_eq!(test.len(), 12);
        assert_eq!(train.image.cols(), 6);
        assert_eq!(train.text.cols(), 8);
        assert_eq!(train.manifest.split, "train");
        assert_eq!(test.manifest.split, "test");
        let labels = train.manifest.cluster_labels.as_ref().unwrap();
        assert_eq!(labels.len(), 60);
        assert!(labels.iter().all(|&c| c < 4));
        assert_eq!(train.manifest.generator.as_ref().unwrap(), &tiny_spec());
    }

    #[test]
    fn toy_rows_are_unit() {
        let (train, test) = gen_toy(&tiny_spec()).unwrap();
        for set in [&train, &test] {
            for r in 0..set.len() {
                let iv = set.image.row(r);
                let tv = set.text.row(r);
                assert!((dot(iv, iv).sqrt() - 1.0).abs() < 1e-12);
                assert!((dot(tv, tv).sqrt() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn toy_zero_noise_pairs_sit_on_centers() {
        let spec = ToySpec {
            n_pairs: 30,
            d_v: 5,
            d_t: 7,
            n_clusters: 30,
            intra_noise: 0.0,
            cross_noise: 0.0,
            seed: 3,
        };
        let (train, _) = gen_toy(&spec).unwrap();
        let labels = train.manifest.cluster_labels.clone().unwrap();
        // Zero noise: rows are functions of the cluster label alone.
        for i in 0..train.len() {
            for j in 0..train.len() {
                if labels[i] == labels[j] {
                    assert_eq!(train.image.row(i), train.image.row(j));
                    assert_eq!(train.text.row(i), train.text.row(j));
                } else {
                    assert!(train.image.row(i) != train.image.row(j));
                }
            }
        }
    }

    #[test]
    fn toy_same_seed_reproduces_fingerprint() {
        let (a, _) = gen_toy(&tiny_spec()).unwrap();
        let (b, _) = gen_toy(&tiny_spec()).unwrap();
        assert_eq!(a.manifest.fingerprint, b.manifest.fingerprint);
        assert_eq!(a.image.data(), b.image.data());
        let other = ToySpec {
            seed: 9,
            ..tiny_spec()
        };
        let (c, _) = gen_toy(&other).unwrap();
        assert_ne!(a.manifest.fingerprint, c.manifest.fingerprint);
    }

    #[test]
    fn toy_cluster_draws_balanced() {
        let spec = ToySpec {
            n_pairs: 4000,
            d_v: 4,
            d_t: 4,
            n_clusters: 8,
            ..ToySpec::default()
        };
        let (train, _) = gen_toy(&spec).unwrap();
        let labels = train.manifest.cluster_labels.unwrap();
        let mut counts = vec![0usize; 8];
        for &c in &labels {
            counts[c] += 1;
        }
        let expect = 4000.0 / 8.0;
        let sigma = (4000.0f64 * (1.0 / 8.0) * (7.0 / 8.0)).sqrt();
        for (c, &n) in counts.iter().enumerate() {
            assert!(
                (n as f64 - expect).abs() < 5.0 * sigma,
                "cluster {c}: {n} vs {expect}"
            );
        }
    }

    #[test]
    fn toy_validation_errors() {
        for bad in [
            ToySpec {
                n_clusters: 0,
                ..tiny_spec()
            },
            ToySpec {
                n_clusters: 61,
                ..tiny_spec()
            },
            ToySpec {
                intra_noise: -0.1,
                ..tiny_spec()
            },
            ToySpec {
                d_v: 0,
                ..tiny_spec()
            },
        ] {
            assert!(matches!(gen_toy(&bad), Err(MdmError::Config(_))));
        }
    }

    #[test]
    fn pairs_roundtrip_at_f32_precision() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.mdmx");
        let (train, _) = gen_toy(&tiny_spec()).unwrap();
        save_pairs(&train, &path).unwrap();
        let back = load_pairs(&path).unwrap();
        assert_eq!(back.manifest, train.manifest);
        for (a, b) in back.image.data().iter().zip(train.image.data()) {
            assert_eq!(*a, *b as f32 as f64);
        }
        // Saving the loaded set reproduces identical bytes.
        let path2 = dir.path().join("again.mdmx");
        save_pairs(&back, &path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn pairs_flipped_payload_byte_is_fingerprint_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.mdmx");
        let (train, _) = gen_toy(&tiny_spec()).unwrap();
        save_pairs(&train, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        match load_pairs(&path) {
            Err(MdmError::Format(msg)) => assert!(msg.contains("fingerprint"), "{msg}"),
            other => panic!("expected fingerprint error, got {other:?}"),
        }
    }

    #[test]
    fn pairs_truncated_file_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.mdmx");
        let (train, _) = gen_toy(&tiny_spec()).unwrap();
        save_pairs(&train, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_pairs(&path), Err(MdmError::Format(_))));
    }

    #[test]
    fn pairs_manifest_mismatch_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.mdmx");
        let (train, _) = gen_toy(&tiny_spec()).unwrap();
        save_pairs(&train, &path).unwrap();
        let mut manifest = train.manifest.clone();
        manifest.n = 59;
        atomic_write(
            &manifest_path(&path),
            serde_json::to_string(&manifest).unwrap().as_bytes(),
        )
        .unwrap();
        assert!(matches!(load_pairs(&path), Err(MdmError::Format(_))));
    }

    #[test]
    fn pairs_unknown_manifest_key_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.mdmx");
        let (train, _) = gen_toy(&tiny_spec()).unwrap();
        save_pairs(&train, &path).unwrap();
        let mut v: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(manifest_path(&path)).unwrap()).unwrap();
        v["surprise"] = serde_json::json!(true);
        atomic_write(&manifest_path(&path), v.to_string().as_bytes()).unwrap();
        assert!(matches!(load_pairs(&path), Err(MdmError::Format(_))));
    }

    #[test]
    fn synthetic_roundtrip_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.mdms");
        let mut rng = Rng::new(5);
        let mut syn = SyntheticSet::new(
            rng.gauss_matrix(4, 3, 0.0, 1.0),
            rng.gauss_matrix(4, 6, 0.0, 1.0),
        )
        .unwrap();
        syn.vel_img = rng.gauss_matrix(4, 3, 0.0, 0.1);
        syn.vel_txt = rng.gauss_matrix(4, 6, 0.0, 0.1);
        syn.iteration = 17;
        let state = rng.state();
        save_synthetic(&syn, Some(&state), &path).unwrap();
        let (back, rng_back) = load_synthetic(&path).unwrap();
        assert_eq!(back.img_params.data(), syn.img_params.data());
        assert_eq!(back.txt_params.data(), syn.txt_params.data());
        assert_eq!(back.vel_img.data(), syn.vel_img.data());
        assert_eq!(back.vel_txt.data(), syn.vel_txt.data());
        assert_eq!(back.iteration, 17);
        assert_eq!(rng_back, Some(state));
    }

    #[test]
    fn synthetic_without_state_zeroes_velocity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.mdms");
        let mut rng = Rng::new(6);
        let mut syn = SyntheticSet::new(
            rng.gauss_matrix(3, 3, 0.0, 1.0),
            rng.gauss_matrix(3, 4, 0.0, 1.0),
        )
        .unwrap();
        syn.vel_img = rng.gauss_matrix(3, 3, 0.0, 0.1);
        syn.iteration = 9;
        save_synthetic(&syn, None, &path).unwrap();
        let (back, state) = load_synthetic(&path).unwrap();
        assert!(state.is_none());
        assert_eq!(back.iteration, 9);
        assert!(back.vel_img.data().iter().all(|&v| v == 0.0));
        assert!(back.vel_txt.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn synthetic_bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.mdms");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(matches!(load_synthetic(&path), Err(MdmError::Format(_))));
    }

    #[test]
    fn config_file_loading() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"tau": 0.1, "kernel": "chordal"}"#).unwrap();
        let cfg: MdmConfig = load_config(&path).unwrap();
        assert_eq!(cfg.tau, 0.1);
        assert_eq!(cfg.kernel, crate::sphere::KernelKind::Chordal);
        std::fs::write(&path, r#"{"tau": 0.1, "nope": 1}"#).unwrap();
        assert!(matches!(
            load_config::<MdmConfig>(&path),
            Err(MdmError::Config(_))
        ));
    }

    #[test]
    fn pair_set_validation() {
        let image = Matrix::zeros(3, 2);
        let text = Matrix::zeros(4, 2);
        assert!(matches!(
            EmbeddingPairSet::from_matrices("x", "train", image, text),
            Err(MdmError::Shape(_))
        ));
        let mut image = Matrix::zeros(3, 2);
        image.data_mut()[0] = f64::INFINITY;
        let text = Matrix::zeros(3, 2);
        assert!(matches!(
            EmbeddingPairSet::from_matrices("x", "train", image, text),
            Err(MdmError::Data(_))
        ));
    }
}
