//! Result persistence: `root/YYYY-MM-DD/req_<id>_raw.bsr` and `..._opt.bsr`.

use crate::error::Result;
use crate::protocol::{OptimizeRequest, OptimizeResponse};
use bsonet_core::image::encode_raw16_pixels;
use chrono::NaiveDate;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

/// Stored locations of one request's images.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoredPaths {
    pub raw: PathBuf,
    pub optimized: PathBuf,
}

fn names(id: u64, attempt: u32) -> (String, String) {
    if attempt == 0 {
        (format!("req_{id}_raw.bsr"), format!("req_{id}_opt.bsr"))
    } else {
        (format!("req_{id}_raw.{attempt}.bsr"), format!("req_{id}_opt.{attempt}.bsr"))
    }
}

/// Writes `bytes` to a temporary file in `dir`, then links it to `dest`
/// only if `dest` does not exist. Returns `false` on a name collision.
fn publish(dir: &Path, dest: &Path, bytes: &[u8]) -> std::io::Result<bool> {
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    match tmp.persist_noclobber(dest) {
        Ok(_) => Ok(true),
        Err(e) if e.error.kind() == std::io::ErrorKind::AlreadyExists => Ok(false),
        Err(e) => Err(e.error),
    }
}

/// Stores with the local calendar date.
pub fn store_result(
    request: &OptimizeRequest,
    response: &OptimizeResponse,
    root: impl AsRef<Path>,
) -> Result<StoredPaths> {
    store_result_on(chrono::Local::now().date_naive(), request, response, root)
}

/// Stores under the directory for `date`. Existing files are never
/// replaced: the first free suffix `.1`, `.2`, ... is used for both files.
pub fn store_result_on(
    date: NaiveDate,
    request: &OptimizeRequest,
    response: &OptimizeResponse,
    root: impl AsRef<Path>,
) -> Result<StoredPaths> {
    let dir = root.as_ref().join(date.format("%Y-%m-%d").to_string());
    fs::create_dir_all(&dir)?;
    let raw = encode_raw16_pixels(request.width as usize, request.height as usize, &request.pixels);
    let opt = encode_raw16_pixels(response.width as usize, response.height as usize, &response.pixels);
    for attempt in 0u32.. {
        let (raw_name, opt_name) = names(request.request_id, attempt);
        let raw_path = dir.join(raw_name);
        let opt_path = dir.join(opt_name);
        if opt_path.exists() || !publish(&dir, &raw_path, &raw)? {
            continue;
        }
        if publish(&dir, &opt_path, &opt)? {
            return Ok(StoredPaths { raw: raw_path, optimized: opt_path });
        }
        // Lost a race for the optimized name; give the raw name back.
        fs::remove_file(&raw_path)?;
    }
    unreachable!("suffix space exhausted")
}
