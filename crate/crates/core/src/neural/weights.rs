use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LayerSpec, Mlp, Tensors};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"MECHNN01";

/// Layout of one network inside a weight file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetLayout {
    pub name: String,
    pub layers: Vec<LayerSpec>,
}

/// JSON header stored in front of the raw parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightHeader {
    pub kind: String,
    pub model: String,
    pub seed: u64,
    pub nets: Vec<NetLayout>,
    pub n_params: usize,
    #[serde(default)]
    pub metadata: serde_json::Map<String, serde_json::Value>,
}

impl WeightHeader {
    /// Header for `nets` (named in the same order); `n_params` is filled in.
    pub fn new(kind: &str, model: &str, seed: u64, nets: &[(&str, &Mlp)]) -> Self {
        WeightHeader {
            kind: kind.to_string(),
            model: model.to_string(),
            seed,
            nets: nets
                .iter()
                .map(|(name, m)| NetLayout {
                    name: name.to_string(),
                    layers: m.specs(),
                })
                .collect(),
            n_params: nets.iter().map(|(_, m)| m.n_params()).sum(),
            metadata: Default::default(),
        }
    }
}

/// Writes magic, header length (u64 LE), JSON header, then every parameter
/// as f64 LE: per layer the `inputs × outputs` weights row-major, then bias.
pub fn write_weights<W: Write>(mut w: W, header: &WeightHeader, nets: &[&Mlp]) -> Result<()> {
    if header.nets.len() != nets.len()
        || header.nets.iter().zip(nets).any(|(l, m)| l.layers != m.specs())
    {
        return Err(Error::WeightFormat("header does not describe the given networks".into()));
    }
    let total: usize = nets.iter().map(|m| m.n_params()).sum();
    if total != header.n_params {
        return Err(Error::WeightFormat(format!(
            "header declares {} parameters, networks hold {total}",
            header.n_params
        )));
    }
    let json = serde_json::to_vec(header)?;
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for m in nets {
        for t in m.tensors() {
            for v in t {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_weights<R: Read>(mut r: R) -> Result<(WeightHeader, Vec<Mlp>)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::WeightFormat("file too short".into()))?;
    if &magic != MAGIC {
        return Err(Error::WeightFormat("not a weight file".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)
        .map_err(|_| Error::WeightFormat("truncated header".into()))?;
    let len = u64::from_le_bytes(len);
    if len > 1 << 24 {
        return Err(Error::WeightFormat(format!("implausible header length {len}")));
    }
    let mut json = vec![0u8; len as usize];
    r.read_exact(&mut json)
        .map_err(|_| Error::WeightFormat("truncated header".into()))?;
    let header: WeightHeader = serde_json::from_slice(&json)
        .map_err(|e| Error::WeightFormat(format!("bad header: {e}")))?;

    let mut nets = header
        .nets
        .iter()
        .map(|l| Mlp::from_specs(&l.layers))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| Error::WeightFormat(e.to_string()))?;
    let total: usize = nets.iter().map(|m| m.n_params()).sum();
    if total != header.n_params {
        return Err(Error::WeightFormat(format!(
            "header declares {} parameters, layers hold {total}",
            header.n_params
        )));
    }
    let mut buf = [0u8; 8];
    for m in &mut nets {
        for t in m.tensors_mut() {
            for v in t.iter_mut() {
                r.read_exact(&mut buf)
                    .map_err(|_| Error::WeightFormat("truncated payload".into()))?;
                *v = f64::from_le_bytes(buf);
            }
        }
    }
    if r.read(&mut buf)? != 0 {
        return Err(Error::WeightFormat("trailing bytes after payload".into()));
    }
    if !nets.iter().all(Mlp::is_finite) {
        return Err(Error::WeightFormat("non-finite parameter".into()));
    }
    Ok((header, nets))
}

pub fn save_weights(path: &Path, header: &WeightHeader, nets: &[&Mlp]) -> Result<()> {
    write_weights(BufWriter::new(File::create(path)?), header, nets)
}

pub fn load_weights(path: &Path) -> Result<(WeightHeader, Vec<Mlp>)> {
    let file = File::open(path)
        .map_err(|e| Error::MissingArtifact(format!("{}: {e}", path.display())))?;
    read_weights(BufReader::new(file))
}
