use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{CliError, CliResult};

pub const LOCK_NAME: &str = "run.lock";

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(out_dir: &Path, break_existing: bool) -> CliResult<Self> {
        std::fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
        let path = out_dir.join(LOCK_NAME);
        if break_existing {
            let _ = std::fs::remove_file(&path);
        }
        let mut f = match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => return Err(CliError::Locked { path }),
            Err(e) => return Err(CliError::io(path, e)),
        };
        writeln!(f, "{}", std::process::id()).map_err(|e| CliError::io(&path, e))?;
        Ok(Self { path })
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn second_claim_fails_until_release() {
        let dir = tempfile::tempdir().unwrap();
        let a = RunLock::acquire(dir.path(), false).unwrap();
        assert!(matches!(RunLock::acquire(dir.path(), false), Err(CliError::Locked { .. })));
        drop(a);
        let _b = RunLock::acquire(dir.path(), false).unwrap();
        assert!(RunLock::acquire(dir.path(), true).is_ok());
    }
}
