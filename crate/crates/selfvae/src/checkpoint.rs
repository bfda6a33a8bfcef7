//! Checkpoint format: magic `SSVAE1`, a `u32` format version, the full
//! run-config text, the optimizer step counter, then length-prefixed
//! parameter records (name, shape, little-endian `f64` payload) followed
//! by the optimizer's first/infinity moment buffers in the same order.
//! Round trips are bit-exact.

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::AdaMax;
use crate::store::ParamStore;
use rand::SeedableRng;
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 6] = b"SSVAE1";
pub const VERSION: u32 = 1;

#[derive(Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub step: u64,
    /// (name, shape, values) in the store's registration order.
    pub params: Vec<(String, Vec<usize>, Vec<f64>)>,
    pub opt_m: Vec<Vec<f64>>,
    pub opt_u: Vec<Vec<f64>>,
}

fn io_err(e: std::io::Error) -> Error {
    Error::domain(format!("checkpoint i/o: {e}"))
}

fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes()).map_err(io_err)
}

fn write_f64s(w: &mut impl Write, vs: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(vs.len() * 8);
    for v in vs {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf).map_err(io_err)
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(io_err)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf).map_err(io_err)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunks of 8")))
        .collect())
}

fn read_len(r: &mut impl Read, what: &str) -> Result<usize> {
    let n = read_u64(r)?;
    if n > (1 << 33) {
        return Err(Error::domain(format!("implausible {what} length {n}")));
    }
    Ok(n as usize)
}

impl Checkpoint {
    /// Snapshot the current parameters and optimizer state.
    pub fn capture(config: &RunConfig, store: &ParamStore, opt: &AdaMax) -> Checkpoint {
        let params = store
            .ids()
            .map(|id| {
                (
                    store.name(id).to_string(),
                    store.shape(id).to_vec(),
                    store.value(id).to_vec(),
                )
            })
            .collect();
        Checkpoint {
            config: config.clone(),
            step: opt.step_count(),
            params,
            opt_m: opt.moments_m().to_vec(),
            opt_u: opt.moments_u().to_vec(),
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC).map_err(io_err)?;
        w.write_all(&VERSION.to_le_bytes()).map_err(io_err)?;
        let config = self.config.serialize();
        write_u64(w, config.len() as u64)?;
        w.write_all(config.as_bytes()).map_err(io_err)?;
        write_u64(w, self.step)?;
        write_u64(w, self.params.len() as u64)?;
        for (name, shape, values) in &self.params {
            write_u64(w, name.len() as u64)?;
            w.write_all(name.as_bytes()).map_err(io_err)?;
            write_u64(w, shape.len() as u64)?;
            for &d in shape {
                write_u64(w, d as u64)?;
            }
            write_f64s(w, values)?;
        }
        for m in &self.opt_m {
            write_f64s(w, m)?;
        }
        for u in &self.opt_u {
            write_f64s(w, u)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Checkpoint> {
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic).map_err(io_err)?;
        if &magic != MAGIC {
            return Err(Error::domain("not a checkpoint: bad magic"));
        }
        let mut ver = [0u8; 4];
        r.read_exact(&mut ver).map_err(io_err)?;
        let version = u32::from_le_bytes(ver);
        if version != VERSION {
            return Err(Error::domain(format!(
                "unsupported checkpoint version {version} (expected {VERSION})"
            )));
        }
        let config_len = read_len(r, "config")?;
        let mut config_bytes = vec![0u8; config_len];
        r.read_exact(&mut config_bytes).map_err(io_err)?;
        let config = RunConfig::parse(
            std::str::from_utf8(&config_bytes)
                .map_err(|_| Error::domain("checkpoint config is not UTF-8"))?,
        )?;
        let step = read_u64(r)?;
        let num_params = read_len(r, "parameter table")?;
        let mut params = Vec::with_capacity(num_params);
        for _ in 0..num_params {
            let name_len = read_len(r, "name")?;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name).map_err(io_err)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::domain("parameter name is not UTF-8"))?;
            let ndim = read_len(r, "shape")?;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_len(r, "dimension")?);
            }
            let numel: usize = shape.iter().product();
            let values = read_f64s(r, numel)?;
            params.push((name, shape, values));
        }
        let opt_m = params
            .iter()
            .map(|(_, _, v)| read_f64s(r, v.len()))
            .collect::<Result<Vec<_>>>()?;
        let opt_u = params
            .iter()
            .map(|(_, _, v)| read_f64s(r, v.len()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Checkpoint { config, step, params, opt_m, opt_u })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
        self.write_to(&mut file)?;
        file.flush().map_err(io_err)
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut file = std::io::BufReader::new(std::fs::File::open(path).map_err(io_err)?);
        Self::read_from(&mut file)
    }

    /// Rebuild the model from the echoed config, then overwrite every
    /// parameter and the optimizer state with the stored values.
    pub fn instantiate(&self) -> Result<(Model, ParamStore, AdaMax)> {
        let mut store = ParamStore::new();
        let mut rng = crate::SeedRng::seed_from_u64(self.config.seed);
        let model = self.config.build_model(&mut store, &mut rng)?;
        if store.len() != self.params.len() {
            return Err(Error::contract(format!(
                "checkpoint has {} parameters, the configured model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for (name, shape, values) in &self.params {
            let id = store.id(name).ok_or_else(|| {
                Error::contract(format!("checkpoint parameter {name:?} not in the model"))
            })?;
            if store.shape(id) != shape.as_slice() {
                return Err(Error::contract(format!(
                    "parameter {name:?}: checkpoint shape {:?} vs model {:?}",
                    shape,
                    store.shape(id)
                )));
            }
            store.value_mut(id).copy_from_slice(values);
        }
        let mut opt = AdaMax::new(&store, self.config.lr, self.config.beta1, self.config.beta2);
        opt.restore(self.opt_m.clone(), self.opt_u.clone(), self.step)?;
        Ok((model, store, opt))
    }
}
