//! Binary checkpoints.
//!
//! Layout (all integers u64 little-endian):
//!
//! ```text
//! "TIFC0001"
//! manifest_len, manifest bytes (UTF-8 `key = value` lines)
//! per parameter: name_len, name bytes, rank, dims[rank], raw LE floats
//! ```
//!
//! The manifest records the model kind and architecture, the vocabulary
//! hash, the training step, the float width (`dtype`), and `param_count`.

use std::path::Path;

use crate::error::{ckpt_err, Result};
use crate::model::{AnyModel, InfillModel, ModelKind};
use crate::params::ParamStore;
use crate::position::{PositionConfig, PositionKind};
use crate::seq2seq::{Seq2Seq, Seq2SeqConfig};
use crate::tensor::{DType, Scalar, Tensor};
use crate::transformer::{InfillTransformer, ModelConfig};

pub const MAGIC: &[u8; 8] = b"TIFC0001";

/// Ordered `key = value` pairs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    entries: Vec<(String, String)>,
}

impl Manifest {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(e) => e.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key).ok_or_else(|| ckpt_err(key, "missing from manifest"))
    }

    pub fn parse_value<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        let raw = self.require(key)?;
        raw.parse().map_err(|_| ckpt_err(key, format!("unparsable value '{raw}'")))
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut m = Manifest::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| ckpt_err("manifest", format!("malformed line '{line}'")))?;
            m.set(k.trim(), v.trim());
        }
        Ok(m)
    }

    pub fn model_kind(&self) -> Result<ModelKind> {
        ModelKind::parse(self.require("model.kind")?).map_err(|e| ckpt_err("model.kind", e.to_string()))
    }

    pub fn dtype(&self) -> Result<DType> {
        DType::parse(self.require("dtype")?).map_err(|e| ckpt_err("dtype", e.to_string()))
    }

    /// Verifies the manifest was written against the given vocabulary.
    pub fn check_vocab_hash(&self, hash: &str) -> Result<()> {
        let stored = self.require("vocab.hash")?;
        if stored != hash {
            return Err(ckpt_err("vocab.hash", format!("checkpoint has {stored}, vocabulary has {hash}")));
        }
        Ok(())
    }

    fn position(&self) -> Result<PositionConfig> {
        Ok(PositionConfig {
            base: self.parse_value("position.base")?,
            kind: PositionKind::parse(self.require("position.kind")?)
                .map_err(|e| ckpt_err("position.kind", e.to_string()))?,
            max_segments: self.parse_value("position.max_segments")?,
        })
    }
}

/// Manifest for `model` at training `step`.
pub fn manifest_for<T: Scalar, M: InfillModel<T> + ?Sized>(model: &M, vocab_hash: &str, step: u64) -> Manifest {
    let mut m = Manifest::new();
    for (k, v) in model.config_entries() {
        m.set(&k, v);
    }
    m.set("vocab.hash", vocab_hash);
    m.set("train.step", step);
    m.set("dtype", T::DTYPE.as_str());
    m.set("param_count", model.params().len());
    m
}

pub fn to_bytes<T: Scalar>(params: &ParamStore<T>, manifest: &Manifest) -> Vec<u8> {
    let mut manifest = manifest.clone();
    manifest.set("dtype", T::DTYPE.as_str());
    manifest.set("param_count", params.len());
    let text = manifest.to_text();
    let mut out = Vec::with_capacity(16 + text.len() + params.num_scalars() * T::DTYPE.byte_width());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u64).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.data() {
            x.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(ckpt_err(what, format!("file truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<usize> {
        let b = self.take(8, what)?;
        let v = u64::from_le_bytes(b.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| ckpt_err(what, "value too large"))
    }
}

fn read_manifest(r: &mut Reader<'_>) -> Result<Manifest> {
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(ckpt_err("magic", "not a checkpoint file"));
    }
    let n = r.u64("manifest length")?;
    let text = std::str::from_utf8(r.take(n, "manifest")?).map_err(|_| ckpt_err("manifest", "invalid UTF-8"))?;
    Manifest::from_text(text)
}

pub fn manifest_from_bytes(bytes: &[u8]) -> Result<Manifest> {
    read_manifest(&mut Reader { buf: bytes, pos: 0 })
}

/// Decodes a checkpoint whose float width is `T`.
pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<(Manifest, ParamStore<T>)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let manifest = read_manifest(&mut r)?;
    let dtype = manifest.dtype()?;
    if dtype != T::DTYPE {
        return Err(ckpt_err("dtype", format!("checkpoint stores {}, expected {}", dtype.as_str(), T::DTYPE.as_str())));
    }
    let count: usize = manifest.parse_value("param_count")?;
    let width = dtype.byte_width();
    let mut params = ParamStore::new();
    for i in 0..count {
        let nl = r.u64("param name length")?;
        let name = std::str::from_utf8(r.take(nl, "param name")?)
            .map_err(|_| ckpt_err(format!("param[{i}].name"), "invalid UTF-8"))?
            .to_string();
        let rank = r.u64(&format!("{name}.rank"))?;
        if rank > 8 {
            return Err(ckpt_err(format!("{name}.rank"), format!("implausible rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u64(&format!("{name}.dims"))?);
        }
        let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| ckpt_err(format!("{name}.dims"), "overflow"))?;
        let raw = r.take(n.checked_mul(width).ok_or_else(|| ckpt_err(&name, "overflow"))?, &name)?;
        let data = raw.chunks_exact(width).map(T::read_le).collect();
        params.add(&name, Tensor::new(&dims, data)?)?;
    }
    if r.pos != bytes.len() {
        return Err(ckpt_err("trailer", format!("{} unexpected trailing bytes", bytes.len() - r.pos)));
    }
    Ok((manifest, params))
}

pub fn save_checkpoint<T: Scalar>(path: &Path, params: &ParamStore<T>, manifest: &Manifest) -> Result<()> {
    std::fs::write(path, to_bytes(params, manifest))?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(Manifest, ParamStore<T>)> {
    from_bytes(&std::fs::read(path)?)
}

pub fn read_manifest_file(path: &Path) -> Result<Manifest> {
    manifest_from_bytes(&std::fs::read(path)?)
}

/// Field-level comparison of parameter names and shapes.
pub fn check_params_match<T: Scalar>(expected: &ParamStore<T>, got: &ParamStore<T>) -> Result<()> {
    if expected.len() != got.len() {
        return Err(ckpt_err("param_count", format!("expected {} tensors, found {}", expected.len(), got.len())));
    }
    for ((en, et), (gn, gt)) in expected.iter().zip(got.iter()) {
        if en != gn {
            return Err(ckpt_err(gn, format!("expected parameter '{en}'")));
        }
        if et.shape() != gt.shape() {
            return Err(ckpt_err(
                format!("{gn}.shape"),
                format!("expected {:?}, found {:?}", et.shape(), gt.shape()),
            ));
        }
    }
    Ok(())
}

pub fn transformer_config(m: &Manifest) -> Result<ModelConfig> {
    Ok(ModelConfig {
        d_model: m.parse_value("model.d_model")?,
        num_blocks: m.parse_value("model.num_blocks")?,
        num_heads: m.parse_value("model.num_heads")?,
        ffn_dim: m.parse_value("model.ffn_dim")?,
        dropout: m.parse_value("model.dropout")?,
        vocab_size: m.parse_value("model.vocab_size")?,
        position: m.position()?,
    })
}

pub fn seq2seq_config(m: &Manifest) -> Result<Seq2SeqConfig> {
    Ok(Seq2SeqConfig {
        embedding_size: m.parse_value("model.d_model")?,
        num_units: m.parse_value("model.num_units")?,
        dropout: m.parse_value("model.dropout")?,
        vocab_size: m.parse_value("model.vocab_size")?,
        position: m.position()?,
    })
}

/// Rebuilds the model described by the manifest. `expected` rejects
/// checkpoints of another architecture.
pub fn model_from_checkpoint<T: Scalar>(
    manifest: &Manifest,
    params: ParamStore<T>,
    expected: Option<ModelKind>,
) -> Result<AnyModel<T>> {
    let kind = manifest.model_kind()?;
    if let Some(want) = expected {
        if want != kind {
            return Err(ckpt_err(
                "model.kind",
                format!("checkpoint holds a {} model, expected {}", kind.as_str(), want.as_str()),
            ));
        }
    }
    match kind {
        ModelKind::SelfAttn => Ok(AnyModel::SelfAttn(InfillTransformer::from_params(transformer_config(manifest)?, params)?)),
        ModelKind::Seq2Seq => Ok(AnyModel::Seq2Seq(Seq2Seq::from_params(seq2seq_config(manifest)?, params)?)),
    }
}

/// Loads a checkpoint file of float width `T` into a model.
pub fn load_model<T: Scalar>(path: &Path, expected: Option<ModelKind>) -> Result<(Manifest, AnyModel<T>)> {
    let (manifest, params) = load_checkpoint::<T>(path)?;
    let model = model_from_checkpoint(&manifest, params, expected)?;
    Ok((manifest, model))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.add("a", Tensor::from_f64(&[2, 3], &[1.0, -2.5, 3.25, 0.0, 1e-7, -0.0]).unwrap()).unwrap();
        s.add("b.bias", Tensor::from_f64(&[3], &[0.5, 0.25, f32::MAX as f64]).unwrap()).unwrap();
        s
    }

    fn manifest() -> Manifest {
        let mut m = Manifest::new();
        m.set("model.kind", "self_attn");
        m.set("vocab.hash", "abc");
        m.set("train.step", 7);
        m
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let bytes = to_bytes(&store(), &manifest());
        assert_eq!(&bytes[..8], MAGIC);
        let (m, p) = from_bytes::<f32>(&bytes).unwrap();
        assert_eq!(p, store());
        assert_eq!(m.get("train.step"), Some("7"));
        assert_eq!(to_bytes(&p, &m), bytes);
    }

    #[test]
    fn truncation_and_corruption_are_clean_errors() {
        let bytes = to_bytes(&store(), &manifest());
        for cut in [0, 5, 12, 40, bytes.len() - 1] {
            assert!(matches!(from_bytes::<f32>(&bytes[..cut]), Err(Error::Checkpoint { .. })), "cut {cut}");
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(from_bytes::<f32>(&extra).is_err());
        let mut bad = bytes;
        bad[0] = b'X';
        assert!(matches!(from_bytes::<f32>(&bad), Err(Error::Checkpoint { field, .. }) if field == "magic"));
    }

    #[test]
    fn dtype_is_checked() {
        let bytes = to_bytes(&store(), &manifest());
        assert!(matches!(from_bytes::<f64>(&bytes), Err(Error::Checkpoint { field, .. }) if field == "dtype"));
        let wide = to_bytes(&store().cast::<f64>(), &manifest());
        let (_, p) = from_bytes::<f64>(&wide).unwrap();
        assert_eq!(p, store().cast::<f64>());
    }

    #[test]
    fn vocab_hash_mismatch_names_the_field() {
        let err = manifest().check_vocab_hash("zzz").unwrap_err();
        assert!(err.to_string().contains("vocab.hash"));
        manifest().check_vocab_hash("abc").unwrap();
    }
}
