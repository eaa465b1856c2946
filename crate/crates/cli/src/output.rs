use std::io::Write;
use std::path::{Path, PathBuf};

use crate::failure::Failure;

fn is_stdout(out: &Path) -> bool {
    out.as_os_str() == "-"
}

fn parent_dir(out: &Path) -> PathBuf {
    match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

/// Fail early if `out` cannot be written, before any work is done.
pub fn check_destination(out: &Path) -> Result<(), Failure> {
    if is_stdout(out) {
        return Ok(());
    }
    let dir = parent_dir(out);
    if !dir.is_dir() {
        return Err(Failure::usage(format!("output directory {} does not exist", dir.display())));
    }
    if out.is_dir() {
        return Err(Failure::usage(format!("output path {} is a directory", out.display())));
    }
    Ok(())
}

pub fn require_file(path: &Path, what: &str) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::input(format!("{what} {} not found", path.display())))
    }
}

/// Write `text` to `out` through a temporary file in the same directory, so the
/// destination either keeps its old contents or holds the complete result.
pub fn write_atomic(out: &Path, text: &str) -> Result<(), Failure> {
    if is_stdout(out) {
        let mut stdout = std::io::stdout().lock();
        return writeln!(stdout, "{text}").map_err(|e| Failure::input(format!("writing to stdout: {e}")));
    }
    let io_err = |e: std::io::Error| Failure::input(format!("writing {}: {e}", out.display()));
    let mut tmp = tempfile::NamedTempFile::new_in(parent_dir(out)).map_err(io_err)?;
    writeln!(tmp, "{text}").map_err(io_err)?;
    tmp.as_file().sync_all().map_err(io_err)?;
    tmp.persist(out).map_err(|e| io_err(e.error))?;
    log::debug!("wrote {}", out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_replaces_contents() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("x.json");
        write_atomic(&out, "first").unwrap();
        write_atomic(&out, "second").unwrap();
        assert_eq!(std::fs::read_to_string(&out).unwrap(), "second\n");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn destination_checks() {
        let dir = tempfile::tempdir().unwrap();
        assert!(check_destination(Path::new("-")).is_ok());
        assert!(check_destination(&dir.path().join("a.json")).is_ok());
        assert!(check_destination(dir.path()).is_err());
        assert!(check_destination(&dir.path().join("missing/a.json")).is_err());
    }
}
