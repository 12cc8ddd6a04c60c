//! Small file helpers shared by the registries and caches.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Writes `bytes` to a temp file next to `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Replaces every `${NAME}` with the value of environment variable `NAME`.
pub fn substitute_env(text: &str) -> Result<String> {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(start) = rest.find("${") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let end = after
            .find('}')
            .ok_or_else(|| Error::invalid("connection setting", format!("unterminated `${{` in `{text}`")))?;
        let name = &after[..end];
        let value = std::env::var(name).map_err(|_| {
            Error::invalid(
                "connection setting",
                format!("environment variable `{name}` is not set"),
            )
        })?;
        out.push_str(&value);
        rest = &after[end + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn env_substitution() {
        std::env::set_var("DIL_TEST_SUBST", "secret");
        assert_eq!(substitute_env("k=${DIL_TEST_SUBST}!").unwrap(), "k=secret!");
        assert_eq!(substitute_env("plain").unwrap(), "plain");
        assert!(substitute_env("${DIL_TEST_UNSET_VAR_XYZ}").is_err());
        assert!(substitute_env("${oops").is_err());
    }

    #[test]
    fn atomic_write_replaces_content() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub").join("f.json");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "two");
    }
}
