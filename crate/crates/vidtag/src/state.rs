//! Named parameter storage and the "VTCK" checkpoint format.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VTCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Parameter<T: Real> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub trainable: bool,
}

/// All named parameter tensors of the trainable modules. Iteration order
/// is the sorted name order, which makes checkpoints byte-deterministic.
#[derive(Debug, Clone, Default)]
pub struct ModelState<T: Real> {
    params: BTreeMap<String, Parameter<T>>,
    grads_fresh: bool,
}

impl<T: Real> ModelState<T> {
    pub fn new() -> Self {
        ModelState {
            params: BTreeMap::new(),
            grads_fresh: false,
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>, trainable: bool) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::state(format!("duplicate parameter name {name}")));
        }
        let grad = Tensor::zeros(value.shape());
        self.params.insert(
            name.to_string(),
            Parameter {
                value,
                grad,
                trainable,
            },
        );
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Parameter<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::state(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Parameter<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::state(format!("unknown parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Parameter<T>)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Adds `delta` into the gradient buffer of `name` if that parameter is
    /// trainable; frozen parameters keep an all-zero gradient.
    pub(crate) fn accumulate_grad(&mut self, name: &str, delta: &Tensor<T>) -> Result<()> {
        let p = self.get_mut(name)?;
        if p.trainable {
            p.grad.add_assign(delta)?;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad.fill(T::ZERO);
        }
        self.grads_fresh = false;
    }

    pub(crate) fn mark_grads_fresh(&mut self) {
        self.grads_fresh = true;
    }

    pub(crate) fn take_grads_fresh(&mut self) -> bool {
        std::mem::replace(&mut self.grads_fresh, false)
    }

    /// Marks parameters trainable according to `pred(name)`.
    pub fn set_trainable(&mut self, pred: impl Fn(&str) -> bool) {
        for (name, p) in self.params.iter_mut() {
            p.trainable = pred(name);
        }
    }

    /// Euclidean norm of all gradients whose name starts with `prefix`.
    pub fn grad_norm(&self, prefix: &str) -> f64 {
        self.params
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, p)| p.grad.data().iter().map(|x| x.to_f64().powi(2)).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// FNV-1a checksum over the value bytes of parameters matching `prefix`
    /// (as f32 little-endian, i.e. the checkpoint representation).
    pub fn checksum(&self, prefix: &str) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (name, p) in &self.params {
            if !name.starts_with(prefix) {
                continue;
            }
            for b in name.as_bytes() {
                h = (h ^ *b as u64).wrapping_mul(0x0000_0100_0000_01b3);
            }
            for v in p.value.data() {
                for b in (v.to_f64() as f32).to_le_bytes() {
                    h = (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }

    /// Serializes every parameter as f32 little-endian.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut w = BufWriter::new(file);
        let io_err = |e| Error::io(path.display().to_string(), e);
        w.write_all(CHECKPOINT_MAGIC).map_err(io_err)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io_err)?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())
            .map_err(io_err)?;
        for (name, p) in &self.params {
            w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io_err)?;
            w.write_all(name.as_bytes()).map_err(io_err)?;
            let shape = p.value.shape();
            w.write_all(&(shape.len() as u32).to_le_bytes()).map_err(io_err)?;
            for &d in shape {
                w.write_all(&(d as u32).to_le_bytes()).map_err(io_err)?;
            }
            for v in p.value.data() {
                w.write_all(&(v.to_f64() as f32).to_le_bytes()).map_err(io_err)?;
            }
        }
        w.flush().map_err(io_err)
    }

    /// Loads a checkpoint. Every parameter is restored as trainable=false;
    /// callers re-apply their training phase's trainability mask.
    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut r = BufReader::new(file);
        let mut offset: u64 = 0;
        let path_str = path.display().to_string();
        let format_err = |offset: u64, message: String| Error::Format {
            path: path_str.clone(),
            offset,
            message,
        };

        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic, &mut offset, &path_str)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(format_err(0, format!("bad magic {magic:?}, expected VTCK")));
        }
        let version = read_u32(&mut r, &mut offset, &path_str)?;
        if version != CHECKPOINT_VERSION {
            return Err(format_err(4, format!("unsupported version {version}")));
        }
        let count = read_u32(&mut r, &mut offset, &path_str)?;
        let mut state = ModelState::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r, &mut offset, &path_str)? as usize;
            let mut name_bytes = vec![0u8; name_len];
            read_exact(&mut r, &mut name_bytes, &mut offset, &path_str)?;
            let name = String::from_utf8(name_bytes)
                .map_err(|e| format_err(offset, format!("non-UTF8 name: {e}")))?;
            let rank = read_u32(&mut r, &mut offset, &path_str)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u32(&mut r, &mut offset, &path_str)? as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            let mut buf = [0u8; 4];
            for _ in 0..n {
                read_exact(&mut r, &mut buf, &mut offset, &path_str)?;
                data.push(T::from_f64(f32::from_le_bytes(buf) as f64));
            }
            state.insert(&name, Tensor::from_vec(&shape, data)?, false)?;
        }
        Ok(state)
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], offset: &mut u64, path: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| Error::Format {
        path: path.to_string(),
        offset: *offset,
        message: format!("unexpected end of data: {e}"),
    })?;
    *offset += buf.len() as u64;
    Ok(())
}

fn read_u32(r: &mut impl Read, offset: &mut u64, path: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf, offset, path)?;
    Ok(u32::from_le_bytes(buf))
}
