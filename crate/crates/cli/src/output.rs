use std::fs;
use std::path::{Path, PathBuf};

use crate::manifest::{sha256_hex, FileDigest};
use crate::CliError;

/// Artifact directory; refuses a non-empty directory unless forced.
pub struct OutDir {
    path: PathBuf,
    written: Vec<FileDigest>,
}

impl OutDir {
    pub fn open(path: &Path, force: bool) -> Result<Self, CliError> {
        if path.exists() {
            if !path.is_dir() {
                return Err(CliError::Input(format!("{} is not a directory", path.display())));
            }
            let occupied = fs::read_dir(path)?.next().is_some();
            if occupied && !force {
                return Err(CliError::Input(format!(
                    "{} is not empty; pass --force to overwrite",
                    path.display()
                )));
            }
        } else {
            fs::create_dir_all(path)?;
        }
        Ok(Self {
            path: path.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        fs::write(self.path.join(name), bytes)?;
        self.written.push(FileDigest {
            path: name.to_string(),
            sha256: sha256_hex(bytes),
        });
        Ok(())
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn take_written(&mut self) -> Vec<FileDigest> {
        std::mem::take(&mut self.written)
    }
}
