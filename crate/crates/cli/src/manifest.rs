//! Run ledger and artifact identities.
//!
//! Every subcommand that writes artifacts appends one JSON line to
//! `manifest.jsonl` in its output directory: what ran, which input
//! artifacts it read (by content hash), what it wrote, and how long it
//! took. The ledger is append-only so repeated runs into one directory
//! keep their history. Artifact ids are FNV-1a 64 content hashes — stable
//! identities for provenance fields and the run id.

use mblab_core::{Error, Result};
use std::io::Write;
use std::path::{Path, PathBuf};

/// FNV-1a 64-bit over arbitrary bytes.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Content hash of a file, rendered as 16 hex digits.
pub fn artifact_id(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(format!("{:016x}", fnv1a(&bytes)))
}

pub struct ManifestEntry {
    pub subcommand: String,
    /// (role, path, content id) per input artifact.
    pub inputs: Vec<(String, PathBuf, String)>,
    pub outputs: Vec<PathBuf>,
    pub resolved_config: String,
    pub wall_time_s: f64,
}

impl ManifestEntry {
    /// Deterministic identity for the run: everything that defines it
    /// except wall time.
    pub fn run_id(&self) -> String {
        let mut material = String::new();
        material.push_str(&self.subcommand);
        material.push('\n');
        material.push_str(&self.resolved_config);
        for (role, _, id) in &self.inputs {
            material.push_str(&format!("{role}:{id}\n"));
        }
        format!("{:016x}", fnv1a(material.as_bytes()))
    }

    pub fn append_to(&self, out_dir: &Path) -> Result<()> {
        let line = serde_json::json!({
            "run_id": self.run_id(),
            "subcommand": self.subcommand,
            "inputs": self
                .inputs
                .iter()
                .map(|(role, path, id)| {
                    serde_json::json!({"role": role, "path": path.display().to_string(), "id": id})
                })
                .collect::<Vec<_>>(),
            "outputs": self
                .outputs
                .iter()
                .map(|p| p.display().to_string())
                .collect::<Vec<_>>(),
            "wall_time_s": self.wall_time_s,
            "version": env!("CARGO_PKG_VERSION"),
        });
        let path = out_dir.join("manifest.jsonl");
        let mut file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        writeln!(file, "{line}").map_err(|e| Error::io(path.display().to_string(), e))
    }
}

/// Write a file, creating parent directories as needed.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_matches_reference_vectors() {
        // Published FNV-1a 64 test vectors.
        assert_eq!(fnv1a(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn run_id_ignores_wall_time_but_tracks_inputs() {
        let mut e = ManifestEntry {
            subcommand: "train".into(),
            inputs: vec![("corpus".into(), PathBuf::from("c.mbc"), "aa".into())],
            outputs: vec![PathBuf::from("model.ckpt")],
            resolved_config: "seed = 0\n".into(),
            wall_time_s: 1.0,
        };
        let id = e.run_id();
        e.wall_time_s = 9.0;
        assert_eq!(e.run_id(), id);
        e.inputs[0].2 = "bb".into();
        assert_ne!(e.run_id(), id);
    }
}
