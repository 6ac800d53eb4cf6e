//! Checkpoint format shared by denoiser and codebook parameters.
//!
//! Layout: an 8-byte little-endian header length, a JSON header listing the
//! tensors in payload order (`name`, `shape`), then the raw payload of
//! little-endian 32-bit floats, concatenated tensor by tensor.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub tensors: Vec<TensorEntry>,
}

/// An in-memory named tensor set, order-preserving.
#[derive(Debug, Clone, Default)]
pub struct TensorSet {
    pub entries: Vec<(TensorEntry, Vec<f64>)>,
}

impl TensorSet {
    pub fn push(&mut self, name: &str, shape: &[usize], data: &[f64]) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.entries.push((
            TensorEntry { name: name.to_string(), shape: shape.to_vec() },
            data.to_vec(),
        ));
    }

    pub fn get(&self, name: &str) -> Option<(&[usize], &[f64])> {
        self.entries
            .iter()
            .find(|(e, _)| e.name == name)
            .map(|(e, d)| (e.shape.as_slice(), d.as_slice()))
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let header = CheckpointHeader {
            tensors: self.entries.iter().map(|(e, _)| e.clone()).collect(),
        };
        let header_json = serde_json::to_vec(&header)?;
        w.write_all(&(header_json.len() as u64).to_le_bytes())?;
        w.write_all(&header_json)?;
        for (_, data) in &self.entries {
            for &v in data {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut len_bytes = [0u8; 8];
        r.read_exact(&mut len_bytes)?;
        let header_len = u64::from_le_bytes(len_bytes) as usize;
        let mut header_json = vec![0u8; header_len];
        r.read_exact(&mut header_json)?;
        let header: CheckpointHeader = serde_json::from_slice(&header_json)?;
        let mut entries = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            let count: usize = entry.shape.iter().product();
            let mut buf = vec![0u8; count * 4];
            r.read_exact(&mut buf)?;
            let data: Vec<f64> = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            entries.push((entry, data));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        self.write_to(&mut f)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path)?;
        Self::read_from(&mut f)
    }
}

use crate::denoiser::model::{ModelConfig, Params, TrainableDenoiser};

/// Serialize model parameters (with the architecture descriptor embedded as a
/// zero-size tensor would be opaque; the config rides in the JSON header via
/// dedicated shape-bearing entries).
pub fn model_to_tensors(model: &TrainableDenoiser) -> TensorSet {
    let mut set = TensorSet::default();
    model.params.visit(&mut |name, shape, data| {
        set.push(name, shape, data);
    });
    set
}

/// Rebuild parameters from a tensor set; shapes must match the config.
pub fn model_from_tensors(cfg: ModelConfig, set: &TensorSet) -> Result<TrainableDenoiser> {
    cfg.validate()?;
    let mut params = Params::zeros(&cfg);
    let mut missing = Vec::new();
    {
        let mut apply = |name: &str, shape: &[usize], data: &mut Vec<f64>| {
            match set.get(name) {
                Some((s, d)) if s == shape && d.len() == data.len() => {
                    data.copy_from_slice(d);
                }
                Some(_) => missing.push(format!("{name} (shape mismatch)")),
                None => missing.push(name.to_string()),
            }
        };
        // Params::visit gives immutable views; walk the same canonical naming
        // by visiting a zero clone for names/shapes, then writing.
        let names: Vec<(String, Vec<usize>)> = {
            let mut v = Vec::new();
            params.visit(&mut |name, shape, _| v.push((name.to_string(), shape.to_vec())));
            v
        };
        let mut idx = 0;
        visit_params_mut(&mut params, &mut |data: &mut Vec<f64>| {
            let (name, shape) = &names[idx];
            apply(name, shape, data);
            idx += 1;
        });
    }
    if !missing.is_empty() {
        return Err(Error::Serde(format!("checkpoint missing tensors: {missing:?}")));
    }
    Ok(TrainableDenoiser { cfg, params })
}

fn visit_params_mut(p: &mut Params, f: &mut impl FnMut(&mut Vec<f64>)) {
    f(&mut p.tok_emb);
    f(&mut p.pos_emb);
    f(&mut p.bos);
    for b in p.blocks.iter_mut() {
        for t in [
            &mut b.ln1_g, &mut b.ln1_b, &mut b.wq, &mut b.bq, &mut b.wk, &mut b.bk,
            &mut b.wv, &mut b.bv, &mut b.wo, &mut b.bo, &mut b.ln2_g, &mut b.ln2_b,
            &mut b.w1, &mut b.b1, &mut b.w2, &mut b.b2,
        ] {
            f(t);
        }
    }
    f(&mut p.lnf_g);
    f(&mut p.lnf_b);
    f(&mut p.head_w);
    f(&mut p.head_b);
}
