use std::fs;
use std::path::{Path, PathBuf};

use crate::error::Result;

/// Files written together: nothing reaches its final path until every file
/// has been written next to it under a temporary name.
#[derive(Debug, Default)]
pub struct StagedWrite {
    files: Vec<(PathBuf, Vec<u8>)>,
}

impl StagedWrite {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, path: impl Into<PathBuf>, bytes: Vec<u8>) {
        self.files.push((path.into(), bytes));
    }

    pub fn len(&self) -> usize {
        self.files.len()
    }

    pub fn is_empty(&self) -> bool {
        self.files.is_empty()
    }

    pub fn commit(self) -> Result<()> {
        let mut written: Vec<(PathBuf, &Path)> = Vec::with_capacity(self.files.len());
        let result = (|| {
            for (dst, bytes) in &self.files {
                if let Some(parent) = dst.parent().filter(|p| !p.as_os_str().is_empty()) {
                    fs::create_dir_all(parent)?;
                }
                let mut name = dst.file_name().unwrap_or_default().to_os_string();
                name.push(".partial");
                let tmp = dst.with_file_name(name);
                fs::write(&tmp, bytes)?;
                written.push((tmp, dst));
            }
            Ok(())
        })();
        if let Err(e) = result {
            for (tmp, _) in &written {
                let _ = fs::remove_file(tmp);
            }
            return Err(e);
        }
        for (tmp, dst) in written {
            fs::rename(tmp, dst)?;
        }
        Ok(())
    }
}
