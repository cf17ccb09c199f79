//! Work directory ownership and atomic output files.

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use parvecmf::Error;

const LOCK_NAME: &str = ".lock";
pub const FAILED_MARKER: &str = "FAILED";

/// Exclusive hold on a work directory, released on drop.
#[derive(Debug)]
pub struct Workdir {
    root: PathBuf,
    lock: PathBuf,
}

impl Workdir {
    /// Creates the directory if needed and takes its lockfile. Fails when
    /// another process holds it.
    pub fn acquire(root: &Path) -> Result<Self, Error> {
        fs::create_dir_all(root)?;
        let lock = root.join(LOCK_NAME);
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Workdir { root: root.to_path_buf(), lock })
            }
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => {
                let owner = fs::read_to_string(&lock).unwrap_or_default();
                Err(Error::Config(format!(
                    "work directory {} is locked by process {} (remove {} if that process is gone)",
                    root.display(),
                    owner.trim(),
                    lock.display()
                )))
            }
            Err(e) => Err(e.into()),
        }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Records which stage failed; earlier outputs stay in place.
    pub fn mark_failed(&self, stage: &str, err: &dyn std::fmt::Display) -> Result<(), Error> {
        write_atomic(&self.path(FAILED_MARKER), |w| {
            writeln!(w, "stage = {stage}")?;
            writeln!(w, "error = {err}")?;
            Ok(())
        })
    }

    pub fn clear_failed(&self) -> Result<(), Error> {
        match fs::remove_file(self.path(FAILED_MARKER)) {
            Err(e) if e.kind() != io::ErrorKind::NotFound => Err(e.into()),
            _ => Ok(()),
        }
    }
}

impl Drop for Workdir {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}

/// Writes through a temporary sibling file and renames it over `path`, so
/// readers never observe a partial file.
pub fn write_atomic<F>(path: &Path, fill: F) -> Result<(), Error>
where
    F: FnOnce(&mut BufWriter<File>) -> Result<(), Error>,
{
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().ok_or_else(|| Error::Argument(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut w = BufWriter::new(File::create(&tmp)?);
        fill(&mut w)?;
        let file = w.into_inner().map_err(|e| e.into_error())?;
        file.sync_all()?;
        fs::rename(&tmp, path)?;
        Ok(())
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}
