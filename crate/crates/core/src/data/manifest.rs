//! Plain-text manifests: one recording path per line, relative paths resolved
//! against the manifest's directory. Blank lines and `#` comments are skipped.

use std::fs;
use std::path::{Path, PathBuf};

use super::{read_recording, DataError, FrameGeometry, Recording, Result};

pub fn read_manifest(path: &Path) -> Result<Vec<PathBuf>> {
    let text = fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let entries: Vec<PathBuf> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            let p = PathBuf::from(l);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        })
        .collect();
    if entries.is_empty() {
        return Err(DataError::Manifest(format!("{} lists no recordings", path.display())));
    }
    Ok(entries)
}

/// Writes entries relative to the manifest's directory where possible.
pub fn write_manifest(path: &Path, entries: &[PathBuf]) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut text = String::new();
    for e in entries {
        let rel = e.strip_prefix(base).unwrap_or(e);
        text.push_str(&rel.to_string_lossy());
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

/// Reads every recording a manifest lists, requiring one shared geometry.
pub fn load_manifest(path: &Path, expected: Option<FrameGeometry>) -> Result<Vec<Recording>> {
    let mut out: Vec<Recording> = Vec::new();
    for p in read_manifest(path)? {
        let geom = expected.or_else(|| out.first().map(Recording::geometry));
        out.push(read_recording(&p, geom)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_paths_resolve_against_manifest_dir() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("train.manifest");
        let files = vec![dir.path().join("a.afr"), dir.path().join("sub/b.afr")];
        write_manifest(&m, &files).unwrap();
        let text = fs::read_to_string(&m).unwrap();
        assert_eq!(text, "a.afr\nsub/b.afr\n");
        assert_eq!(read_manifest(&m).unwrap(), files);
    }

    #[test]
    fn comments_and_empty_manifests() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("x.manifest");
        fs::write(&m, "# header\n\n/abs/r.afr\n").unwrap();
        assert_eq!(read_manifest(&m).unwrap(), vec![PathBuf::from("/abs/r.afr")]);
        fs::write(&m, "# nothing\n").unwrap();
        assert!(matches!(read_manifest(&m), Err(DataError::Manifest(_))));
    }
}
