//! Binary checkpoint container.
//!
//! Layout, all integers and floats little-endian:
//!
//! | offset | size | field                                  |
//! |--------|------|----------------------------------------|
//! | 0      | 8    | magic `b"SAROSCKP"`                    |
//! | 8      | 4    | format version (`u32`, currently 1)    |
//! | 12     | 8    | embedding dimension `k` (`u64`)        |
//! | 20     | 8    | number of users `N` (`u64`)            |
//! | 28     | 8    | number of items `M` (`u64`)            |
//! | 36     | 8    | seed (`u64`)                           |
//! | 44     | 32   | config hash (opaque bytes)             |
//! | 76     | 8·N·k | user matrix, row-major `f64`          |
//! | …      | 8·M·k | item matrix, row-major `f64`          |
//!
//! Nothing follows the item matrix; trailing bytes are rejected.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::model::ModelParams;

pub const MAGIC: &[u8; 8] = b"SAROSCKP";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 76;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub config_hash: [u8; 32],
}

pub fn write_checkpoint<W: Write>(params: &ModelParams, meta: &CheckpointMeta, mut out: W) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(HEADER_LEN + 8 * (params.user_matrix().len() + params.item_matrix().len()));
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for n in [params.dim(), params.n_users(), params.n_items()] {
        buf.extend_from_slice(&(n as u64).to_le_bytes());
    }
    buf.extend_from_slice(&meta.seed.to_le_bytes());
    buf.extend_from_slice(&meta.config_hash);
    for w in params.weights() {
        buf.extend_from_slice(&w.to_le_bytes());
    }
    out.write_all(&buf)
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<(ModelParams, CheckpointMeta)> {
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    if bytes.len() < HEADER_LEN || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("missing magic header".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let version = u32_at(8);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let (dim, n_users, n_items) = (u64_at(12) as usize, u64_at(20) as usize, u64_at(28) as usize);
    let seed = u64_at(36);
    let mut config_hash = [0u8; 32];
    config_hash.copy_from_slice(&bytes[44..76]);

    let n_users_w = n_users
        .checked_mul(dim)
        .ok_or_else(|| Error::Checkpoint("dimension overflow".into()))?;
    let n_items_w = n_items
        .checked_mul(dim)
        .ok_or_else(|| Error::Checkpoint("dimension overflow".into()))?;
    let expected = (n_users_w + n_items_w)
        .checked_mul(8)
        .and_then(|b| b.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::Checkpoint("dimension overflow".into()))?;
    if bytes.len() != expected {
        return Err(Error::Checkpoint(format!(
            "expected {expected} bytes for {n_users}x{n_items}x{dim}, found {}",
            bytes.len()
        )));
    }
    let floats: Vec<f64> = bytes[HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let (users, items) = floats.split_at(n_users_w);
    let params = ModelParams::from_parts(n_users, n_items, dim, users.to_vec(), items.to_vec())?;
    Ok((params, CheckpointMeta { seed, config_hash }))
}
