//! Per-run manifest: the resolved config, the seed and content hashes of
//! every input, enough to repeat a run bit for bit.

use std::fmt::Write as _;
use std::io::Read;
use std::path::Path;

use anyhow::{Context, Result};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

/// Hex SHA-256 of a file's bytes.
pub fn sha256_file(path: &Path) -> Result<String> {
    let mut file =
        std::fs::File::open(path).with_context(|| format!("hashing {}", path.display()))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

/// Writes `manifest-<command>.txt` into the output directory.
pub fn write_manifest(cfg: &RunConfig, command: &str, inputs: &[(&str, &Path)]) -> Result<()> {
    let mut s = String::new();
    writeln!(s, "command = {command}")?;
    writeln!(s, "version = {}", env!("CARGO_PKG_VERSION"))?;
    for (k, v) in cfg.entries() {
        writeln!(s, "config.{k} = {v}")?;
    }
    for (name, path) in inputs {
        writeln!(s, "input.{name}.path = {}", path.display())?;
        writeln!(s, "input.{name}.sha256 = {}", sha256_file(path)?)?;
    }
    let out = cfg.out_dir.join(format!("manifest-{command}.txt"));
    std::fs::write(&out, s).with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}
