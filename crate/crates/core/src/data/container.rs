//! Branch-major binary dataset container.
//!
//! `<path>` holds, for each branch in order: `n_i` as a little-endian `u64`,
//! then the `n_i × covariate_dim` covariate block row-major, then the `n_i`
//! observations, all as little-endian `f64`. `<path>.dims` is a text sidecar
//! with `branches=`, `covariate_dim=`, `has_covariates=` lines.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};

use super::{BranchData, BranchDataset};
use crate::error::{Error, Result};

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".dims");
    PathBuf::from(s)
}

pub fn write_dataset(path: &Path, ds: &BranchDataset) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for b in &ds.branches {
        w.write_all(&(b.n() as u64).to_le_bytes())?;
        for v in b.x.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in b.y.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    fs::write(
        sidecar(path),
        format!(
            "branches={}\ncovariate_dim={}\nhas_covariates={}\n",
            ds.len(),
            ds.covariate_dim,
            ds.has_covariates
        ),
    )?;
    Ok(())
}

fn parse_err(path: &Path, line: u64, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_owned(),
        line,
        msg: msg.into(),
    }
}

pub fn read_dataset(path: &Path) -> Result<BranchDataset> {
    let dims_path = sidecar(path);
    let text = fs::read_to_string(&dims_path)?;
    let (mut branches, mut cov_dim, mut has_cov) = (None, None, None);
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| parse_err(&dims_path, ln as u64 + 1, "expected key=value"))?;
        let bad = || parse_err(&dims_path, ln as u64 + 1, format!("bad value for {k}"));
        match k.trim() {
            "branches" => branches = Some(v.trim().parse::<usize>().map_err(|_| bad())?),
            "covariate_dim" => cov_dim = Some(v.trim().parse::<usize>().map_err(|_| bad())?),
            "has_covariates" => has_cov = Some(v.trim().parse::<bool>().map_err(|_| bad())?),
            other => {
                return Err(parse_err(
                    &dims_path,
                    ln as u64 + 1,
                    format!("unknown key {other}"),
                ))
            }
        }
    }
    let branches = branches.ok_or_else(|| parse_err(&dims_path, 0, "missing branches"))?;
    let cov_dim = cov_dim.ok_or_else(|| parse_err(&dims_path, 0, "missing covariate_dim"))?;

    let mut r = BufReader::new(fs::File::open(path)?);
    let mut buf = [0u8; 8];
    let mut out = Vec::with_capacity(branches);
    for _ in 0..branches {
        r.read_exact(&mut buf)?;
        let n = u64::from_le_bytes(buf) as usize;
        let mut read_f64s = |count: usize| -> Result<Vec<f64>> {
            let mut v = Vec::with_capacity(count);
            for _ in 0..count {
                r.read_exact(&mut buf)?;
                v.push(f64::from_le_bytes(buf));
            }
            Ok(v)
        };
        let x = Array2::from_shape_vec((n, cov_dim), read_f64s(n * cov_dim)?)
            .map_err(|e| Error::InvalidData(e.to_string()))?;
        let y = Array1::from(read_f64s(n)?);
        out.push(BranchData::new(x, y)?);
    }
    if r.read(&mut buf)? != 0 {
        return Err(Error::InvalidData(format!(
            "trailing bytes in {}",
            path.display()
        )));
    }
    let mut ds = BranchDataset::new(out, cov_dim)?;
    if let Some(h) = has_cov {
        ds.has_covariates = h;
    }
    Ok(ds)
}
