use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{CliError, CliResult};

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(out: &Path) -> CliResult<Self> {
        fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
        let path = out.join(".lock");
        let mut f = fs::OpenOptions::new().write(true).create_new(true).open(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                CliError::input(format!(
                    "{} is in use by another command (remove {} if that command is gone)",
                    out.display(),
                    path.display()
                ))
            } else {
                CliError::io(&path, e)
            }
        })?;
        let _ = writeln!(f, "{}", std::process::id());
        Ok(Self { path })
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Files are written into a scratch directory next to `dest` and moved into
/// place by [`commit`](Staging::commit). Dropping without committing removes
/// the scratch directory and leaves `dest` untouched.
#[derive(Debug)]
pub struct Staging {
    dir: PathBuf,
    dest: PathBuf,
    committed: bool,
}

impl Staging {
    pub fn new(dest: &Path) -> CliResult<Self> {
        let parent = dest.parent().unwrap_or(Path::new("."));
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        let name = dest.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let dir = parent.join(format!(".staging-{name}-{}", std::process::id()));
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        }
        fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        Ok(Self {
            dir,
            dest: dest.to_path_buf(),
            committed: false,
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> CliResult<()> {
        let p = self.path(name);
        fs::write(&p, contents).map_err(|e| CliError::io(&p, e))
    }

    /// Replaces the destination directory as a whole.
    pub fn commit_replace(mut self) -> CliResult<()> {
        if self.dest.exists() {
            fs::remove_dir_all(&self.dest).map_err(|e| CliError::io(&self.dest, e))?;
        }
        fs::rename(&self.dir, &self.dest).map_err(|e| CliError::io(&self.dest, e))?;
        self.committed = true;
        Ok(())
    }

    /// Moves every staged file into the destination, replacing same-named files.
    pub fn commit(mut self) -> CliResult<()> {
        fs::create_dir_all(&self.dest).map_err(|e| CliError::io(&self.dest, e))?;
        let mut entries: Vec<_> = fs::read_dir(&self.dir)
            .map_err(|e| CliError::io(&self.dir, e))?
            .collect::<Result<_, _>>()
            .map_err(|e| CliError::io(&self.dir, e))?;
        entries.sort_by_key(|e| e.file_name());
        for e in entries {
            let to = self.dest.join(e.file_name());
            fs::rename(e.path(), &to).map_err(|err| CliError::io(&to, err))?;
        }
        self.committed = true;
        let _ = fs::remove_dir(&self.dir);
        Ok(())
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.dir);
        }
    }
}

pub fn require_file(path: &Path, what: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::input(format!("{what} not found: {}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let a = OutputLock::acquire(dir.path()).unwrap();
        assert!(OutputLock::acquire(dir.path()).is_err());
        drop(a);
        OutputLock::acquire(dir.path()).unwrap();
    }

    #[test]
    fn staging_commits_or_vanishes() {
        let dir = tempfile::tempdir().unwrap();
        let dest = dir.path().join("d");
        let s = Staging::new(&dest).unwrap();
        s.write("a.txt", "x").unwrap();
        drop(s);
        assert!(!dest.exists());
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);

        fs::create_dir(&dest).unwrap();
        fs::write(dest.join("keep.txt"), "k").unwrap();
        let s = Staging::new(&dest).unwrap();
        s.write("a.txt", "y").unwrap();
        s.commit().unwrap();
        assert_eq!(fs::read_to_string(dest.join("a.txt")).unwrap(), "y");
        assert_eq!(fs::read_to_string(dest.join("keep.txt")).unwrap(), "k");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);

        let s = Staging::new(&dest).unwrap();
        s.write("b.txt", "z").unwrap();
        s.commit_replace().unwrap();
        assert!(!dest.join("keep.txt").exists());
        assert_eq!(fs::read_to_string(dest.join("b.txt")).unwrap(), "z");
    }
}
