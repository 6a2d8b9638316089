//! Workspace-relative path handling.
//!
//! Paths from configuration and from the wire are normalized lexically
//! (`.` dropped, `..` folded) and must stay inside the workspace root.

use std::path::{Component, Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("path `{0}` escapes the workspace root")]
pub struct PathEscape(pub String);

/// Normalize a workspace-relative path to its canonical `a/b/c` form.
///
/// Rejects absolute paths, drive prefixes, backslashes, NUL bytes, empty
/// paths and anything whose normalized form climbs above the root.
pub fn normalize_relative(raw: &str) -> Result<String, PathEscape> {
    let escape = || PathEscape(raw.to_owned());
    if raw.is_empty() || raw.contains('\\') || raw.contains('\0') || raw.starts_with('/') {
        return Err(escape());
    }
    // "C:foo" style prefixes
    if raw.len() >= 2 && raw.as_bytes()[1] == b':' {
        return Err(escape());
    }
    let mut parts: Vec<&str> = Vec::new();
    for part in raw.split('/') {
        match part {
            "" | "." => {}
            ".." => {
                if parts.pop().is_none() {
                    return Err(escape());
                }
            }
            other => parts.push(other),
        }
    }
    if parts.is_empty() {
        return Err(escape());
    }
    Ok(parts.join("/"))
}

/// Join a normalized relative path onto `root` and verify that no existing
/// ancestor resolves (through symlinks) outside the canonical root.
pub fn resolve_within(root: &Path, relative: &str) -> Result<PathBuf, PathEscape> {
    let normalized = normalize_relative(relative)?;
    let joined = root.join(&normalized);
    let canonical_root = root
        .canonicalize()
        .map_err(|_| PathEscape(relative.to_owned()))?;

    // Walk up to the deepest existing ancestor and canonicalize that.
    let mut probe = joined.as_path();
    loop {
        if let Ok(meta) = probe.symlink_metadata() {
            let resolved = if meta.file_type().is_symlink() || probe.exists() {
                probe.canonicalize()
            } else {
                // dangling symlink
                return Err(PathEscape(relative.to_owned()));
            };
            match resolved {
                Ok(real) if real.starts_with(&canonical_root) => break,
                _ => return Err(PathEscape(relative.to_owned())),
            }
        }
        match probe.parent() {
            Some(parent) => probe = parent,
            None => break,
        }
    }
    Ok(joined)
}

/// True if `path` contains only normal components (no root, no `..`).
pub fn is_plain_relative(path: &Path) -> bool {
    path.components().all(|c| matches!(c, Component::Normal(_)))
}
