use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

/// Git-style content hash: files hash as `blob <len>\0<bytes>`, directories
/// as `tree` over their sorted `name hash` entries. Names in `skip` are
/// ignored at the top level.
pub fn content_hash(path: &Path, skip: &[&str]) -> std::io::Result<String> {
    let meta = std::fs::metadata(path)?;
    let mut h = Sha256::new();
    if meta.is_dir() {
        let mut entries: Vec<_> = std::fs::read_dir(path)?
            .map(|e| e.map(|e| e.file_name()))
            .collect::<std::io::Result<_>>()?;
        entries.sort();
        let mut body = Vec::new();
        for name in entries {
            let s = name.to_string_lossy();
            if skip.contains(&s.as_ref()) {
                continue;
            }
            let child = content_hash(&path.join(&name), &[])?;
            body.extend_from_slice(format!("{s} {child}\n").as_bytes());
        }
        h.update(format!("tree {}\0", body.len()));
        h.update(&body);
    } else {
        let bytes = std::fs::read(path)?;
        h.update(format!("blob {}\0", bytes.len()));
        h.update(&bytes);
    }
    Ok(hex(&h.finalize()))
}

pub fn bytes_hash(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn hex(b: &[u8]) -> String {
    b.iter().map(|x| format!("{x:02x}")).collect()
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub version: &'static str,
    pub command: String,
    pub seed: u64,
    pub config: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_matches_git() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a");
        std::fs::write(&p, b"hello\n").unwrap();
        let expect = hex(&Sha256::digest(b"blob 6\0hello\n"));
        assert_eq!(content_hash(&p, &[]).unwrap(), expect);
    }

    #[test]
    fn tree_ignores_skipped_names() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a"), b"1").unwrap();
        let before = content_hash(dir.path(), &["m"]).unwrap();
        std::fs::write(dir.path().join("m"), b"2").unwrap();
        assert_eq!(content_hash(dir.path(), &["m"]).unwrap(), before);
        assert_ne!(content_hash(dir.path(), &[]).unwrap(), before);
    }
}
