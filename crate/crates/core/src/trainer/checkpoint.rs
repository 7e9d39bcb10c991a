use std::fs;
use std::io::Write;
use std::path::Path;

use super::TrainState;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SSLCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Header (magic, version, scalar name) followed by the bincode state.
pub fn checkpoint_bytes<T: Scalar>(state: &TrainState<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let name = T::NAME.as_bytes();
    out.push(name.len() as u8);
    out.extend_from_slice(name);
    bincode::serialize_into(&mut out, state).map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok(out)
}

pub fn checkpoint_from_bytes<T: Scalar>(bytes: &[u8]) -> Result<TrainState<T>> {
    let bad = |m: String| Error::Checkpoint(m);
    if bytes.len() < 13 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("checkpoint version {version}, expected {CHECKPOINT_VERSION}")));
    }
    let len = bytes[12] as usize;
    let name = bytes
        .get(13..13 + len)
        .ok_or_else(|| bad("truncated header".into()))?;
    if name != T::NAME.as_bytes() {
        return Err(bad(format!(
            "checkpoint holds {} parameters, expected {}",
            String::from_utf8_lossy(name),
            T::NAME
        )));
    }
    let state: TrainState<T> = bincode::deserialize(&bytes[13 + len..]).map_err(|e| bad(e.to_string()))?;
    state.config.validate()?;
    Ok(state)
}

/// Writes to a sibling temp file and renames over `path`.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_checkpoint<T: Scalar>(state: &TrainState<T>, path: &Path) -> Result<()> {
    write_atomic(path, &checkpoint_bytes(state)?)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<TrainState<T>> {
    if !path.is_file() {
        return Err(Error::CheckpointNotFound(path.display().to_string()));
    }
    checkpoint_from_bytes(&fs::read(path)?)
}
