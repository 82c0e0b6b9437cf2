//! Binary checkpoint: magic, then `[name len u32][name][rank u32][dims u32..][f64 LE..]` records.
//!
//! Model hyperparameters travel as rank-0 `meta.*` records.

use std::io::{BufWriter, Read, Write};
use std::path::Path;

use super::{Model, ModelConfig, ParamStore};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"RGCK1";

fn meta(cfg: &ModelConfig) -> [(&'static str, usize); 9] {
    [
        ("vocab_size", cfg.vocab_size),
        ("d_model", cfg.d_model),
        ("heads", cfg.heads),
        ("policy_layers", cfg.policy_layers),
        ("value_layers", cfg.value_layers),
        ("max_len", cfg.max_len),
        ("ffn_mult", cfg.ffn_mult),
        ("tokens_per_view", cfg.tokens_per_view),
        ("feature_dim", cfg.feature_dim),
    ]
}

fn write_record<W: Write>(w: &mut W, name: &str, t: &Tensor) -> std::io::Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for x in t.data() {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    for (k, v) in meta(&model.cfg) {
        write_record(&mut w, &format!("meta.{k}"), &Tensor::scalar(v as f64))?;
    }
    for id in model.store.ids() {
        write_record(&mut w, model.store.name(id), model.store.get(id))?;
    }
    w.flush()?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Option<&[u8]> {
        let s = self.buf.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<usize> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?) as usize)
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let fail = |reason: String| Error::Checkpoint {
        path: path.to_path_buf(),
        reason,
    };
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| fail(e.to_string()))?
        .read_to_end(&mut bytes)?;
    if bytes.get(..CHECKPOINT_MAGIC.len()) != Some(&CHECKPOINT_MAGIC[..]) {
        return Err(fail("unknown magic (not a RGCK1 checkpoint)".into()));
    }
    let mut r = Reader {
        buf: &bytes,
        pos: CHECKPOINT_MAGIC.len(),
    };
    let truncated = || fail("truncated record".into());
    let mut store = ParamStore::default();
    let mut metas = std::collections::HashMap::new();
    while r.pos < bytes.len() {
        let n = r.u32().ok_or_else(truncated)?;
        let name = std::str::from_utf8(r.take(n).ok_or_else(truncated)?)
            .map_err(|_| fail("record name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32().ok_or_else(truncated)?;
        let dims = (0..rank)
            .map(|_| r.u32())
            .collect::<Option<Vec<_>>>()
            .ok_or_else(truncated)?;
        let count: usize = dims.iter().product();
        let raw = r
            .take(count.checked_mul(8).ok_or_else(truncated)?)
            .ok_or_else(truncated)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(dims, data).map_err(|e| fail(e.to_string()))?;
        if let Some(key) = name.strip_prefix("meta.") {
            metas.insert(key.to_string(), t.item() as usize);
        } else if store.find(&name).is_some() {
            return Err(fail(format!("duplicate record {name}")));
        } else {
            store.add(&name, t);
        }
    }
    let get = |k: &str| {
        metas
            .get(k)
            .copied()
            .ok_or_else(|| fail(format!("missing meta.{k}")))
    };
    let cfg = ModelConfig {
        vocab_size: get("vocab_size")?,
        d_model: get("d_model")?,
        heads: get("heads")?,
        policy_layers: get("policy_layers")?,
        value_layers: get("value_layers")?,
        max_len: get("max_len")?,
        ffn_mult: get("ffn_mult")?,
        tokens_per_view: get("tokens_per_view")?,
        feature_dim: get("feature_dim")?,
    };
    Model::from_store(cfg, store).map_err(|e| fail(e.to_string()))
}
