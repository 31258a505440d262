//! Flat float64 checkpoints with a JSON header.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! bytes 0..4     magic "VFLF"
//! bytes 4..8     u32 header length H
//! bytes 8..8+H   UTF-8 JSON header
//! next 8 bytes   u64 value count N
//! next 8·N bytes f64 values, little-endian
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"VFLF";

pub fn encode<H: Serialize>(header: &H, values: &[f64]) -> Result<Vec<u8>> {
    let h = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(16 + h.len() + 8 * values.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(h.len() as u32).to_le_bytes());
    out.extend_from_slice(&h);
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode<H: DeserializeOwned>(bytes: &[u8]) -> Result<(H, Vec<f64>)> {
    let bad = |m: &str| Error::Data(format!("malformed checkpoint: {m}"));
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(bad("missing magic"));
    }
    let hlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let hend = 8 + hlen;
    if bytes.len() < hend + 8 {
        return Err(bad("truncated header"));
    }
    let header: H = serde_json::from_slice(&bytes[8..hend])?;
    let count = u64::from_le_bytes(bytes[hend..hend + 8].try_into().unwrap()) as usize;
    let body = &bytes[hend + 8..];
    if body.len() != count * 8 {
        return Err(bad("value count does not match payload"));
    }
    let values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((header, values))
}

pub fn write<H: Serialize>(path: &Path, header: &H, values: &[f64]) -> Result<()> {
    let bytes = encode(header, values)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read<H: DeserializeOwned>(path: &Path) -> Result<(H, Vec<f64>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}
