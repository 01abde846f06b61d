//! Small filesystem helpers shared by the persistence code.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{MobreError, Result};

/// Writes `bytes` to a sibling temp file, syncs, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| MobreError::io(dir, e))?;
        }
    }
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = path.with_file_name(format!(".{file_name}.tmp"));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| MobreError::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| MobreError::io(&tmp, e))?;
        f.sync_all().map_err(|e| MobreError::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| MobreError::io(path, e))
}

pub fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| MobreError::io(path, e))
}

pub fn read_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| MobreError::io(path, e))
}
