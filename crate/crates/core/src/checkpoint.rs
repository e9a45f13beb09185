//! Checkpoint container: one file holding configs, vocabulary, step, and a
//! directory of named tensors with little-endian payloads.
//!
//! ```text
//! magic "LIQCKPT1" | version u32 LE | header_len u64 LE
//! header_len bytes of JSON (meta + tensor directory)
//! payload: each tensor's elements, little-endian, at its directory offset
//! ```
//!
//! Serialization is canonical — directory order is the tensor order handed
//! in, offsets are packed with no gaps — so save → load → save reproduces
//! the file byte for byte. Writes go through a temp file and rename, so a
//! crash mid-save never corrupts an existing checkpoint. Optimizer moments
//! ride along as `opt.m.{name}` / `opt.v.{name}`.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lm::{LmConfig, LmError, LmModel};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::ParamMap;
use crate::tensor::{Scalar, Tensor, TensorError};
use crate::vocab::UnifiedVocab;
use crate::vq::{VqConfig, VqError, VqModel};

pub const CKPT_MAGIC: &[u8; 8] = b"LIQCKPT1";
pub const CKPT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CkptError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint magic mismatch")]
    BadMagic,
    #[error("checkpoint version {got}, expected {CKPT_VERSION}")]
    BadVersion { got: u32 },
    #[error("header json: {0}")]
    Header(#[from] serde_json::Error),
    #[error("payload holds {got} bytes, directory requires {need}")]
    Truncated { need: u64, got: u64 },
    #[error("directory offset for {name} is {got}, packed layout requires {want}")]
    BadOffset { name: String, want: u64, got: u64 },
    #[error("checkpoint holds {got} tensors, model requires {want}")]
    TensorCount { want: usize, got: usize },
    #[error("checkpoint is missing tensor {0}")]
    MissingTensor(String),
    #[error("tensor {name} has shape {got:?}, model requires {want:?}")]
    TensorShape { name: String, want: Vec<usize>, got: Vec<usize> },
    #[error("tensor {name} stored as {got}, requested {want}")]
    Dtype { name: String, want: &'static str, got: String },
    #[error("checkpoint kind {got:?}, expected {want:?}")]
    Kind { want: &'static str, got: String },
    #[error("checkpoint meta is missing {0}")]
    MissingMeta(&'static str),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Vq(#[from] VqError),
}

/// Everything about a run that is not a tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CkptMeta {
    pub kind: String,
    pub step: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub lm_config: Option<LmConfig>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub vq_config: Option<VqConfig>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub vocab: Option<UnifiedVocab>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub opt_config: Option<AdamWConfig>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub opt_t: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct CkptHeader {
    meta: CkptMeta,
    tensors: Vec<TensorRecord>,
}

fn write_elems<T: Scalar>(out: &mut impl Write, t: &Tensor<T>) -> std::io::Result<()> {
    match T::DTYPE {
        "f32" => {
            for &x in t.data() {
                out.write_all(&(x.as_f64() as f32).to_le_bytes())?;
            }
        }
        _ => {
            for &x in t.data() {
                out.write_all(&x.as_f64().to_le_bytes())?;
            }
        }
    }
    Ok(())
}

fn read_elems<T: Scalar>(bytes: &[u8], shape: &[usize]) -> Result<Tensor<T>, CkptError> {
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    match T::DTYPE {
        "f32" => {
            for c in bytes.chunks_exact(4).take(n) {
                data.push(T::from_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64));
            }
        }
        _ => {
            for c in bytes.chunks_exact(8).take(n) {
                data.push(T::from_f64(f64::from_le_bytes(c.try_into().unwrap())));
            }
        }
    }
    Ok(Tensor::from_vec(shape, data)?)
}

/// Writes the container atomically: temp file in the same directory, then
/// rename over the destination.
pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    meta: &CkptMeta,
    tensors: &[(String, &Tensor<T>)],
) -> Result<(), CkptError> {
    let mut dir = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, t) in tensors {
        dir.push(TensorRecord {
            name: name.clone(),
            dtype: T::DTYPE.to_string(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += (t.numel() * T::BYTES) as u64;
    }
    let header = serde_json::to_vec(&CkptHeader { meta: meta.clone(), tensors: dir })?;

    let tmp = path.with_extension("ckpt.tmp");
    {
        let mut w = BufWriter::new(fs::File::create(&tmp)?);
        w.write_all(CKPT_MAGIC)?;
        w.write_all(&CKPT_VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        for (_, t) in tensors {
            write_elems(&mut w, t)?;
        }
        w.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Reads the container back: meta plus named tensors in directory order.
pub fn load_checkpoint<T: Scalar>(
    path: &Path,
) -> Result<(CkptMeta, Vec<(String, Tensor<T>)>), CkptError> {
    let mut f = fs::File::open(path)?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic).map_err(|_| CkptError::BadMagic)?;
    if &magic != CKPT_MAGIC {
        return Err(CkptError::BadMagic);
    }
    let mut u32buf = [0u8; 4];
    f.read_exact(&mut u32buf).map_err(|_| CkptError::BadVersion { got: 0 })?;
    let version = u32::from_le_bytes(u32buf);
    if version != CKPT_VERSION {
        return Err(CkptError::BadVersion { got: version });
    }
    let mut u64buf = [0u8; 8];
    f.read_exact(&mut u64buf)
        .map_err(|_| CkptError::Truncated { need: 8, got: 0 })?;
    let header_len = u64::from_le_bytes(u64buf);
    let mut header = vec![0u8; header_len as usize];
    f.read_exact(&mut header)
        .map_err(|_| CkptError::Truncated { need: header_len, got: 0 })?;
    let header: CkptHeader = serde_json::from_slice(&header)?;

    let mut payload = Vec::new();
    f.read_to_end(&mut payload)?;
    let mut want = 0u64;
    for rec in &header.tensors {
        if rec.offset != want {
            return Err(CkptError::BadOffset {
                name: rec.name.clone(),
                want,
                got: rec.offset,
            });
        }
        if rec.dtype != T::DTYPE {
            return Err(CkptError::Dtype {
                name: rec.name.clone(),
                want: T::DTYPE,
                got: rec.dtype.clone(),
            });
        }
        want += (rec.shape.iter().product::<usize>() * T::BYTES) as u64;
    }
    if payload.len() as u64 != want {
        return Err(CkptError::Truncated { need: want, got: payload.len() as u64 });
    }

    let mut out = Vec::with_capacity(header.tensors.len());
    for rec in &header.tensors {
        let n = rec.shape.iter().product::<usize>() * T::BYTES;
        let bytes = &payload[rec.offset as usize..rec.offset as usize + n];
        out.push((rec.name.clone(), read_elems(bytes, &rec.shape)?));
    }
    Ok((header.meta, out))
}

/// Param tensors by name, then optimizer moments under `opt.m.*`/`opt.v.*`.
fn tensor_list<'a, T: Scalar>(
    params: &'a ParamMap<T>,
    opt: Option<&'a AdamW<T>>,
) -> Vec<(String, &'a Tensor<T>)> {
    let mut out: Vec<(String, &Tensor<T>)> =
        params.iter().map(|(n, t, _)| (n.to_string(), t)).collect();
    if let Some(opt) = opt {
        for i in 0..params.len() {
            out.push((format!("opt.m.{}", params.name(i)), &opt.m[i]));
        }
        for i in 0..params.len() {
            out.push((format!("opt.v.{}", params.name(i)), &opt.v[i]));
        }
    }
    out
}

/// Overwrites `params` tensors by name from the loaded list and rebuilds the
/// optimizer if its meta was present. Counts, names, and shapes must match
/// the model structure exactly.
fn restore_params<T: Scalar>(
    params: &mut ParamMap<T>,
    meta: &CkptMeta,
    loaded: Vec<(String, Tensor<T>)>,
) -> Result<Option<AdamW<T>>, CkptError> {
    let with_opt = meta.opt_config.is_some();
    let want = params.len() * if with_opt { 3 } else { 1 };
    if loaded.len() != want {
        return Err(CkptError::TensorCount { want, got: loaded.len() });
    }
    let mut opt = meta.opt_config.map(|cfg| {
        let mut o = AdamW::new(params, cfg);
        o.t = meta.opt_t.unwrap_or(0);
        o
    });
    for (name, tensor) in loaded {
        let (slot, bare) = match name.strip_prefix("opt.m.") {
            Some(b) => (1, b),
            None => match name.strip_prefix("opt.v.") {
                Some(b) => (2, b),
                None => (0, name.as_str()),
            },
        };
        let idx = params
            .index_of(bare)
            .ok_or_else(|| CkptError::MissingTensor(name.clone()))?;
        let dst_shape = params.tensor(idx).shape();
        if tensor.shape() != dst_shape {
            return Err(CkptError::TensorShape {
                name: name.clone(),
                want: dst_shape.to_vec(),
                got: tensor.shape().to_vec(),
            });
        }
        match (slot, opt.as_mut()) {
            (0, _) => *params.tensor_mut(idx) = tensor,
            (1, Some(o)) => o.m[idx] = tensor,
            (2, Some(o)) => o.v[idx] = tensor,
            _ => return Err(CkptError::MissingTensor(name)),
        }
    }
    Ok(opt)
}

pub fn save_lm_checkpoint<T: Scalar>(
    path: &Path,
    model: &LmModel<T>,
    opt: Option<&AdamW<T>>,
    vocab: &UnifiedVocab,
    step: u64,
) -> Result<(), CkptError> {
    let meta = CkptMeta {
        kind: "lm".into(),
        step,
        lm_config: Some(model.cfg),
        vq_config: None,
        vocab: Some(*vocab),
        opt_config: opt.map(|o| o.cfg),
        opt_t: opt.map(|o| o.t),
    };
    save_checkpoint(path, &meta, &tensor_list(&model.params, opt))
}

pub struct LoadedLm<T: Scalar> {
    pub model: LmModel<T>,
    pub opt: Option<AdamW<T>>,
    pub vocab: UnifiedVocab,
    pub step: u64,
}

pub fn load_lm_checkpoint<T: Scalar>(path: &Path) -> Result<LoadedLm<T>, CkptError> {
    let (meta, loaded) = load_checkpoint::<T>(path)?;
    if meta.kind != "lm" {
        return Err(CkptError::Kind { want: "lm", got: meta.kind });
    }
    let cfg = meta.lm_config.ok_or(CkptError::MissingMeta("lm_config"))?;
    let vocab = meta.vocab.ok_or(CkptError::MissingMeta("vocab"))?;
    let mut model: LmModel<T> = crate::lm::init_lm(&cfg, 0)?;
    let opt = restore_params(&mut model.params, &meta, loaded)?;
    Ok(LoadedLm { model, opt, vocab, step: meta.step })
}

pub fn save_vq_checkpoint<T: Scalar>(
    path: &Path,
    model: &VqModel<T>,
    opt: Option<&AdamW<T>>,
    step: u64,
) -> Result<(), CkptError> {
    let meta = CkptMeta {
        kind: "vq".into(),
        step,
        lm_config: None,
        vq_config: Some(model.cfg),
        vocab: None,
        opt_config: opt.map(|o| o.cfg),
        opt_t: opt.map(|o| o.t),
    };
    save_checkpoint(path, &meta, &tensor_list(&model.params, opt))
}

pub struct LoadedVq<T: Scalar> {
    pub model: VqModel<T>,
    pub opt: Option<AdamW<T>>,
    pub step: u64,
}

pub fn load_vq_checkpoint<T: Scalar>(path: &Path) -> Result<LoadedVq<T>, CkptError> {
    let (meta, loaded) = load_checkpoint::<T>(path)?;
    if meta.kind != "vq" {
        return Err(CkptError::Kind { want: "vq", got: meta.kind });
    }
    let cfg = meta.vq_config.ok_or(CkptError::MissingMeta("vq_config"))?;
    let mut model: VqModel<T> = crate::vq::init_vq(cfg, 0)?;
    let opt = restore_params(&mut model.params, &meta, loaded)?;
    Ok(LoadedVq { model, opt, step: meta.step })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{init_lm, LmConfig};
    use crate::optim::AdamWConfig;
    use crate::vq::{init_vq, VqConfig};

    fn micro_lm() -> LmModel<f32> {
        let cfg = LmConfig { vocab: 24, d_model: 8, n_layers: 1, n_heads: 2, context: 8, tied: true };
        init_lm(&cfg, 5).unwrap()
    }

    fn trained_opt(model: &LmModel<f32>) -> AdamW<f32> {
        let mut opt = AdamW::new(&model.params, AdamWConfig::default());
        // Fabricate non-zero moments so restoration is actually exercised.
        for t in opt.m.iter_mut().chain(opt.v.iter_mut()) {
            for (i, x) in t.data_mut().iter_mut().enumerate() {
                *x = (i as f32 + 1.0) * 0.01;
            }
        }
        opt.t = 17;
        opt
    }

    #[test]
    fn lm_roundtrip_restores_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = micro_lm();
        let opt = trained_opt(&model);
        let vocab = UnifiedVocab::new(512, 16).unwrap();
        save_lm_checkpoint(&path, &model, Some(&opt), &vocab, 123).unwrap();
        let back: LoadedLm<f32> = load_lm_checkpoint(&path).unwrap();
        assert_eq!(back.step, 123);
        assert_eq!(back.vocab, vocab);
        assert_eq!(back.model.cfg, model.cfg);
        for i in 0..model.params.len() {
            assert_eq!(back.model.params.tensor(i).data(), model.params.tensor(i).data());
        }
        let bopt = back.opt.unwrap();
        assert_eq!(bopt.t, 17);
        assert_eq!(bopt.cfg, opt.cfg);
        for i in 0..opt.m.len() {
            assert_eq!(bopt.m[i].data(), opt.m[i].data());
            assert_eq!(bopt.v[i].data(), opt.v[i].data());
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
        let model = micro_lm();
        let opt = trained_opt(&model);
        let vocab = UnifiedVocab::new(512, 16).unwrap();
        save_lm_checkpoint(&p1, &model, Some(&opt), &vocab, 9).unwrap();
        let back: LoadedLm<f32> = load_lm_checkpoint(&p1).unwrap();
        save_lm_checkpoint(&p2, &back.model, back.opt.as_ref(), &back.vocab, back.step).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn vq_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.ckpt");
        let cfg = VqConfig { image_size: 16, hidden: 8, code_dim: 4, codes: 8, ..VqConfig::default() };
        let model: VqModel<f64> = init_vq(cfg, 3).unwrap();
        save_vq_checkpoint(&path, &model, None, 55).unwrap();
        let back: LoadedVq<f64> = load_vq_checkpoint(&path).unwrap();
        assert_eq!(back.step, 55);
        assert_eq!(back.model.cfg, cfg);
        assert!(back.opt.is_none());
        for i in 0..model.params.len() {
            assert_eq!(back.model.params.tensor(i).data(), model.params.tensor(i).data());
        }
        assert!(matches!(
            load_lm_checkpoint::<f64>(&path),
            Err(CkptError::Kind { want: "lm", .. })
        ));
    }

    #[test]
    fn corruption_produces_distinct_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = micro_lm();
        let vocab = UnifiedVocab::new(512, 16).unwrap();
        save_lm_checkpoint(&path, &model, None, &vocab, 1).unwrap();
        let good = fs::read(&path).unwrap();

        let mut bad = good.clone();
        bad[0] ^= 0x55;
        fs::write(&path, &bad).unwrap();
        assert!(matches!(load_lm_checkpoint::<f32>(&path), Err(CkptError::BadMagic)));

        let mut bad = good.clone();
        bad[8] = 7;
        fs::write(&path, &bad).unwrap();
        assert!(matches!(
            load_lm_checkpoint::<f32>(&path),
            Err(CkptError::BadVersion { got: 7 })
        ));

        let mut bad = good.clone();
        bad.truncate(bad.len() - 3);
        fs::write(&path, &bad).unwrap();
        assert!(matches!(
            load_lm_checkpoint::<f32>(&path),
            Err(CkptError::Truncated { .. })
        ));

        fs::write(&path, &good).unwrap();
        assert!(matches!(
            load_lm_checkpoint::<f64>(&path),
            Err(CkptError::Dtype { want: "f64", .. })
        ));
    }

    #[test]
    fn tensor_count_mismatch_is_its_own_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = micro_lm();
        let meta = CkptMeta {
            kind: "lm".into(),
            step: 0,
            lm_config: Some(model.cfg),
            vq_config: None,
            vocab: Some(UnifiedVocab::new(512, 16).unwrap()),
            opt_config: None,
            opt_t: None,
        };
        let mut tensors = tensor_list(&model.params, None);
        tensors.pop();
        save_checkpoint(&path, &meta, &tensors).unwrap();
        assert!(matches!(
            load_lm_checkpoint::<f32>(&path),
            Err(CkptError::TensorCount { .. })
        ));
    }

    #[test]
    fn no_stray_temp_file_after_save() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_lm_checkpoint(&path, &micro_lm(), None, &UnifiedVocab::new(512, 16).unwrap(), 0)
            .unwrap();
        let names: Vec<_> = fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        assert_eq!(names, vec!["m.ckpt".to_string()]);
    }
}
