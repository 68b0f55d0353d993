use std::fs;
use std::path::{Path, PathBuf};

use crate::CliError;

/// Paths a command is about to write. On failure [`Outputs::discard`]
/// removes them, along with any directory the command created.
#[derive(Debug, Default)]
pub struct Outputs {
    files: Vec<PathBuf>,
    dirs: Vec<PathBuf>,
}

impl Outputs {
    /// Creates `dir` (and parents) if missing, remembering what was new.
    pub fn dir(&mut self, dir: &Path) -> Result<(), CliError> {
        let mut missing = Vec::new();
        let mut cur = Some(dir);
        while let Some(d) = cur {
            if d.as_os_str().is_empty() || d.exists() {
                break;
            }
            missing.push(d.to_path_buf());
            cur = d.parent();
        }
        fs::create_dir_all(dir).map_err(|e| CliError::Data(loupe::Error::Io {
            path: dir.to_path_buf(),
            source: e,
        }))?;
        missing.reverse();
        self.dirs.extend(missing);
        Ok(())
    }

    /// Registers `path` and returns it.
    pub fn file(&mut self, path: PathBuf) -> PathBuf {
        self.files.push(path.clone());
        path
    }

    /// Registers the parent directory of a file output.
    pub fn parent_of(&mut self, path: &Path) -> Result<(), CliError> {
        match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => self.dir(p),
            _ => Ok(()),
        }
    }

    pub fn discard(self) {
        for f in &self.files {
            let _ = fs::remove_file(f);
        }
        for d in self.dirs.iter().rev() {
            let _ = fs::remove_dir_all(d);
        }
    }
}
