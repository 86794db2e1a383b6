//! Named-tensor files for parameters, optimizer state and training progress.
//!
//! Layout (all integers `u64` little-endian, all values `f64` little-endian):
//!
//! ```text
//! magic   8 bytes  "HBVTNSR1"
//! count   u64
//! count × { name_len u64, name utf-8, rank u64, dims rank × u64, data Π dims × f64 }
//! ```

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::amortize::{AmortNet, AmortizedFamily, ArchConfig};
use crate::error::{Error, Result};
use crate::families::{BranchParams, Dims, FamilyKind, JointGaussianFamily, Params, Structure};
use crate::optim::AdamState;
use crate::posterior::Posterior;
use crate::train::Ema;

const MAGIC: &[u8; 8] = b"HBVTNSR1";

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn scalar(name: &str, v: f64) -> Self {
        Self::vector(name, vec![v])
    }

    pub fn vector(name: &str, data: Vec<f64>) -> Self {
        Self {
            name: name.into(),
            shape: vec![data.len()],
            data,
        }
    }
}

pub fn write_tensors(path: &Path, tensors: &[Tensor]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(tensors.len() as u64).to_le_bytes())?;
    for t in tensors {
        let expected: usize = t.shape.iter().product();
        if expected != t.data.len() {
            return Err(Error::Checkpoint(format!(
                "tensor {} has shape {:?} but {} values",
                t.name,
                t.shape,
                t.data.len()
            )));
        }
        w.write_all(&(t.name.len() as u64).to_le_bytes())?;
        w.write_all(t.name.as_bytes())?;
        w.write_all(&(t.shape.len() as u64).to_le_bytes())?;
        for &d in &t.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in &t.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|e| Error::Checkpoint(format!("truncated file: {e}")))?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_tensors(path: &Path) -> Result<Vec<Tensor>> {
    let mut r = BufReader::new(fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("file too short".into()))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("not a tensor file (bad magic)".into()));
    }
    let count = read_u64(&mut r)?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = read_u64(&mut r)? as usize;
        if len > 1 << 16 {
            return Err(Error::Checkpoint(format!("implausible name length {len}")));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|e| Error::Checkpoint(format!("truncated file: {e}")))?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Checkpoint("tensor name is not utf-8".into()))?;
        let rank = read_u64(&mut r)? as usize;
        let shape = (0..rank)
            .map(|_| read_u64(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| read_u64(&mut r).map(f64::from_bits))
            .collect::<Result<Vec<_>>>()?;
        out.push(Tensor { name, shape, data });
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
    }
    Ok(out)
}

/// Everything needed to evaluate or resume a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub posterior: Posterior,
    pub dims: Dims,
    pub num_branches: usize,
    pub adam: Option<AdamState>,
    pub iter: u64,
    pub ema: Option<Ema>,
}

fn kind_code(k: FamilyKind) -> f64 {
    match k {
        FamilyKind::Joint => 0.0,
        FamilyKind::Branch => 1.0,
        FamilyKind::Amortized => 2.0,
    }
}

fn structure_code(s: Structure) -> f64 {
    match s {
        Structure::Dense => 0.0,
        Structure::Block => 1.0,
        Structure::Diagonal => 2.0,
    }
}

fn to_usizes(v: &[f64]) -> Vec<usize> {
    v.iter().map(|&x| x as usize).collect()
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let p = &ck.posterior;
    let mut ts = vec![
        Tensor::scalar("meta/kind", kind_code(p.kind())),
        Tensor::scalar("meta/structure", structure_code(p.structure())),
        Tensor::vector(
            "meta/dims",
            vec![
                ck.dims.global as f64,
                ck.dims.local as f64,
                ck.dims.covariate as f64,
                ck.num_branches as f64,
            ],
        ),
        Tensor::scalar("train/iter", ck.iter as f64),
    ];
    if let Posterior::Amortized(a) = p {
        let arch = a.net.arch();
        ts.push(Tensor::vector(
            "meta/feat_widths",
            arch.feat_widths.iter().map(|&w| w as f64).collect(),
        ));
        ts.push(Tensor::vector(
            "meta/param_widths",
            arch.param_widths.iter().map(|&w| w as f64).collect(),
        ));
        ts.push(Tensor::scalar("meta/slope", arch.slope));
    }
    p.for_each_tensor(&mut |name, shape, data| {
        ts.push(Tensor {
            name: name.into(),
            shape: shape.to_vec(),
            data: data.to_vec(),
        })
    });
    if let Some(a) = &ck.adam {
        ts.push(Tensor::vector("adam/m", a.m.clone()));
        ts.push(Tensor::vector("adam/s", a.s.clone()));
        ts.push(Tensor::scalar("adam/t", a.t as f64));
    }
    if let Some(e) = &ck.ema {
        ts.push(Tensor::vector(
            "train/ema",
            vec![e.smoothing, e.value, e.weight],
        ));
    }
    write_tensors(path, &ts)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let tensors = read_tensors(path)?;
    let get = |name: &str| -> Result<&Tensor> {
        tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    };
    let kind = match get("meta/kind")?.data[0] as u64 {
        0 => FamilyKind::Joint,
        1 => FamilyKind::Branch,
        2 => FamilyKind::Amortized,
        k => return Err(Error::Checkpoint(format!("unknown family code {k}"))),
    };
    let structure = match get("meta/structure")?.data[0] as u64 {
        0 => Structure::Dense,
        1 => Structure::Block,
        2 => Structure::Diagonal,
        s => return Err(Error::Checkpoint(format!("unknown structure code {s}"))),
    };
    let d = to_usizes(&get("meta/dims")?.data);
    if d.len() != 4 {
        return Err(Error::Checkpoint("meta/dims must hold 4 values".into()));
    }
    let dims = Dims {
        global: d[0],
        local: d[1],
        covariate: d[2],
    };
    let num_branches = d[3];
    let mut posterior = match kind {
        FamilyKind::Joint => Posterior::Joint(JointGaussianFamily::new(
            structure,
            dims.global,
            dims.local,
            num_branches,
        )),
        FamilyKind::Branch => Posterior::Branch(BranchParams::new(
            structure,
            dims.global,
            dims.local,
            num_branches,
        )),
        FamilyKind::Amortized => {
            let arch = ArchConfig {
                feat_widths: to_usizes(&get("meta/feat_widths")?.data),
                param_widths: to_usizes(&get("meta/param_widths")?.data),
                slope: get("meta/slope")?.data[0],
                ..ArchConfig::default()
            };
            Posterior::Amortized(AmortizedFamily {
                global: structure.standard_spec(dims.global),
                net: AmortNet::zeros(&arch, structure, dims.local, dims.global, dims.covariate),
            })
        }
    };
    let mut err = None;
    posterior.for_each_tensor_mut(&mut |name, shape, data| {
        if err.is_some() {
            return;
        }
        match tensors.iter().find(|t| t.name == name) {
            Some(t) if t.shape == shape => data.copy_from_slice(&t.data),
            Some(t) => {
                err = Some(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    t.shape
                )))
            }
            None => err = Some(Error::Checkpoint(format!("missing tensor {name}"))),
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    let adam = match (get("adam/m"), get("adam/s"), get("adam/t")) {
        (Ok(m), Ok(s), Ok(t)) => {
            if m.data.len() != posterior.num_params() || s.data.len() != posterior.num_params() {
                return Err(Error::Checkpoint(
                    "optimizer state does not match parameters".into(),
                ));
            }
            Some(AdamState {
                m: m.data.clone(),
                s: s.data.clone(),
                t: t.data[0] as u64,
            })
        }
        _ => None,
    };
    let ema = get("train/ema").ok().map(|t| Ema {
        smoothing: t.data[0],
        value: t.data[1],
        weight: t.data[2],
    });
    Ok(Checkpoint {
        posterior,
        dims,
        num_branches,
        adam,
        iter: get("train/iter")?.data[0] as u64,
        ema,
    })
}
