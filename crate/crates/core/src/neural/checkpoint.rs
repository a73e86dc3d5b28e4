//! Binary checkpoint layout (all integers and floats little-endian):
//!
//! ```text
//! "NLCN" | version u32 | role u8 | layer count u32 | dims u32 × (count + 1)
//! | crc32 u32 over everything that follows
//! | seed u64 | iterations u64 | final loss f64
//! | parameters f64 (per layer: weight row-major, then bias)
//! | has_adam u8 [ | step u64 | lr, beta1, beta2, eps f64 | m f64… | v f64… ]
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamState, Gradients, MlpNet, Role};
use crate::error::{Error, Result};
use crate::io::{write_atomic, ByteReader, ByteWriter};

const MAGIC: &[u8; 4] = b"NLCN";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Training-run metadata stored alongside the parameters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RunMeta {
    pub seed: u64,
    pub iterations: u64,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub net: MlpNet,
    pub adam: Option<AdamState>,
    pub meta: RunMeta,
}

fn write_tensors<'a>(w: &mut ByteWriter, tensors: impl Iterator<Item = &'a [f64]>) {
    for t in tensors {
        w.f64s(t);
    }
}

fn read_tensors<'a>(r: &mut ByteReader<'_>, tensors: impl Iterator<Item = &'a mut [f64]>) -> Result<()> {
    for t in tensors {
        let vals = r.f64s(t.len())?;
        t.copy_from_slice(&vals);
    }
    Ok(())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let dims = self.net.layer_dims();
        let mut head = ByteWriter::default();
        head.bytes(MAGIC);
        head.u32(CHECKPOINT_VERSION);
        head.u8(self.net.role().code());
        head.u32((dims.len() - 1) as u32);
        for d in &dims {
            head.u32(*d as u32);
        }

        let mut body = ByteWriter::default();
        body.u64(self.meta.seed);
        body.u64(self.meta.iterations);
        body.f64(self.meta.final_loss);
        write_tensors(&mut body, self.net.tensors());
        match &self.adam {
            None => body.u8(0),
            Some(st) => {
                body.u8(1);
                body.u64(st.step);
                for v in [st.lr, st.beta1, st.beta2, st.eps] {
                    body.f64(v);
                }
                write_tensors(&mut body, st.first_moment.tensors());
                write_tensors(&mut body, st.second_moment.tensors());
            }
        }
        let body = body.into_inner();
        head.u32(crc32fast::hash(&body));
        head.bytes(&body);
        head.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != MAGIC {
            return Err(Error::CorruptPayload("bad checkpoint magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                expected: CHECKPOINT_VERSION,
                found: version,
            });
        }
        let role = Role::from_code(r.u8()?)
            .ok_or_else(|| Error::CorruptPayload("unknown role code".into()))?;
        let layer_count = r.u32()? as usize;
        if layer_count == 0 || layer_count > 1024 {
            return Err(Error::CorruptPayload(format!("implausible layer count {layer_count}")));
        }
        let dims = (0..=layer_count)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let crc = r.u32()?;
        let body = r.rest();
        if crc32fast::hash(body) != crc {
            return Err(Error::CorruptPayload("checksum mismatch".into()));
        }

        let mut r = ByteReader::new(body);
        let meta = RunMeta {
            seed: r.u64()?,
            iterations: r.u64()?,
            final_loss: r.f64()?,
        };
        let mut net = MlpNet::zeros(role, &dims)
            .map_err(|e| Error::CorruptPayload(format!("bad dims: {e}")))?;
        read_tensors(&mut r, net.tensors_mut())?;
        let adam = match r.u8()? {
            0 => None,
            1 => {
                let step = r.u64()?;
                let (lr, beta1, beta2, eps) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
                let mut first_moment = Gradients::zeros_like(&net);
                let mut second_moment = Gradients::zeros_like(&net);
                read_tensors(&mut r, first_moment.tensors_mut())?;
                read_tensors(&mut r, second_moment.tensors_mut())?;
                Some(AdamState {
                    step,
                    lr,
                    beta1,
                    beta2,
                    eps,
                    first_moment,
                    second_moment,
                })
            }
            flag => return Err(Error::CorruptPayload(format!("bad optimizer flag {flag}"))),
        };
        if !r.is_empty() {
            return Err(Error::CorruptPayload("trailing bytes".into()));
        }
        Ok(Self { net, adam, meta })
    }
}

pub fn save_checkpoint(
    net: &MlpNet,
    adam: Option<&AdamState>,
    meta: RunMeta,
    path: impl AsRef<Path>,
) -> Result<()> {
    let ckpt = Checkpoint {
        net: net.clone(),
        adam: adam.cloned(),
        meta,
    };
    write_atomic(path, &ckpt.to_bytes())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}
