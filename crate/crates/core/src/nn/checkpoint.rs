//! Parameter checkpoints: an 8-byte magic, a little-endian `u64` header
//! length, a JSON header describing every tensor, then the raw
//! little-endian `f64` payloads in header order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{ParamGroup, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CAMCTX01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    group: ParamGroup,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    version: u32,
    tensors: Vec<TensorHeader>,
    #[serde(default)]
    meta: serde_json::Value,
}

pub fn encode_checkpoint(store: &ParamStore, meta: &serde_json::Value) -> Result<Vec<u8>> {
    let header = Header {
        version: FORMAT_VERSION,
        tensors: store
            .entries()
            .iter()
            .map(|e| TensorHeader {
                name: e.name.clone(),
                shape: e.tensor.shape().to_vec(),
                dtype: "f64".into(),
                group: e.group,
            })
            .collect(),
        meta: meta.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + json.len() + store.num_scalars() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for e in store.entries() {
        for x in e.tensor.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(mut bytes: &[u8]) -> Result<(ParamStore, serde_json::Value)> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    let mut magic = [0u8; 8];
    bytes.read_exact(&mut magic).map_err(|_| bad("truncated magic"))?;
    if &magic != MAGIC {
        return Err(bad("bad magic string"));
    }
    let mut len = [0u8; 8];
    bytes.read_exact(&mut len).map_err(|_| bad("truncated header length"))?;
    let len = u64::from_le_bytes(len) as usize;
    if bytes.len() < len {
        return Err(bad("truncated header"));
    }
    let header: Header =
        serde_json::from_slice(&bytes[..len]).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if header.version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {}", header.version)));
    }
    bytes = &bytes[len..];
    let mut store = ParamStore::new();
    for t in header.tensors {
        if t.dtype != "f64" {
            return Err(Error::Checkpoint(format!("{}: unsupported dtype {}", t.name, t.dtype)));
        }
        let n: usize = t.shape.iter().product();
        if bytes.len() < n * 8 {
            return Err(bad("truncated payload"));
        }
        let data = bytes[..n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        bytes = &bytes[n * 8..];
        store.add(t.name, t.group, Tensor::new(t.shape, data)?);
    }
    if !bytes.is_empty() {
        return Err(bad("trailing bytes after payload"));
    }
    Ok((store, header.meta))
}

pub fn save_checkpoint(path: &Path, store: &ParamStore, meta: &serde_json::Value) -> Result<()> {
    let bytes = encode_checkpoint(store, meta)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, serde_json::Value)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(vals in proptest::collection::vec(any::<f64>().prop_filter("finite", |x| x.is_finite()), 1..40), split in 1usize..5) {
            let mut store = ParamStore::new();
            let cut = vals.len().min(split);
            store.add("a", ParamGroup::Backbone, Tensor::new(vec![cut], vals[..cut].to_vec()).unwrap());
            store.add("b.c", ParamGroup::ContextEncoder, Tensor::new(vec![vals.len() - cut], vals[cut..].to_vec()).unwrap());
            let meta = serde_json::json!({"dim": 4});
            let bytes = encode_checkpoint(&store, &meta).unwrap();
            let (back, m) = decode_checkpoint(&bytes).unwrap();
            prop_assert_eq!(back.fingerprint(None), store.fingerprint(None));
            prop_assert_eq!(m, meta);
        }
    }

    #[test]
    fn rejects_corruption() {
        let mut store = ParamStore::new();
        store.add("w", ParamGroup::Backbone, Tensor::zeros(&[2, 2]));
        let bytes = encode_checkpoint(&store, &serde_json::Value::Null).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad).is_err());
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(decode_checkpoint(&long).is_err());
    }
}
