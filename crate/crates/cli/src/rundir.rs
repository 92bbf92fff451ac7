use std::fs;
use std::path::Path;

use anyhow::{Context, Result};

/// Marker left in an output directory when a command fails part way.
pub const FAILED: &str = "FAILED";

/// Runs `f` for output directory `dir`. A stale marker is cleared first, and
/// a new one holding the error chain is written if `f` fails.
pub fn guarded<T>(dir: &Path, f: impl FnOnce() -> Result<T>) -> Result<T> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let marker = dir.join(FAILED);
    if marker.exists() {
        fs::remove_file(&marker)?;
    }
    f().inspect_err(|e| {
        // the original error matters more than a failure to record it
        let _ = fs::write(&marker, format!("{e:#}\n"));
    })
}

/// Writes through a temporary sibling and a rename, so readers never see a
/// half-written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("moving {} into place", path.display()))?;
    Ok(())
}
