//! `.nvsm` checkpoint encoding.
//!
//! Layout (little-endian): magic `NVSM`, `u16` version, `u64` config digest,
//! `u32` tensor count and tensor records, then a `u8` flag for the optional
//! training section: `u8` optimizer kind, `f64` lr, beta1, beta2, eps,
//! `u64` optimizer step, `u64` epochs completed, `u32` record count and the
//! moment records. A record is `u32` name length, UTF-8 name, `u32` rank,
//! `u32` dims and `f32` values.

use std::path::Path;

use super::{Model, ModelConfig, ModelError, Result};
use crate::autodiff::{AdamHyper, Optimizer, OptimizerKind, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NVSM";
pub const CHECKPOINT_VERSION: u16 = 1;
const MAX_RANK: usize = 8;

/// Optimizer state and progress saved alongside the weights.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingState {
    pub optimizer: Optimizer<f32>,
    pub epochs_completed: u64,
}

fn put_record(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    out.extend((name.len() as u32).to_le_bytes());
    out.extend(name.as_bytes());
    out.extend((t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend((d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend(v.to_le_bytes());
    }
}

pub fn checkpoint_to_bytes(model: &Model<f32>, state: Option<&TrainingState>) -> Vec<u8> {
    let store = model.store();
    let mut out =
        Vec::with_capacity(16 + store.num_scalars() * 4 * if state.is_some() { 3 } else { 1 });
    out.extend(CHECKPOINT_MAGIC);
    out.extend(CHECKPOINT_VERSION.to_le_bytes());
    out.extend(model.config().digest().to_le_bytes());
    out.extend((store.len() as u32).to_le_bytes());
    for id in store.ids() {
        put_record(&mut out, store.name(id), store.value(id));
    }
    match state {
        None => out.push(0),
        Some(s) => {
            let opt = &s.optimizer;
            out.push(1);
            out.push(match opt.kind {
                OptimizerKind::Sgd => 0,
                OptimizerKind::Adam => 1,
            });
            for v in [opt.lr, opt.adam.beta1, opt.adam.beta2, opt.adam.eps] {
                out.extend(v.to_le_bytes());
            }
            out.extend(opt.step.to_le_bytes());
            out.extend(s.epochs_completed.to_le_bytes());
            let n = opt.first_moment.len() + opt.second_moment.len();
            out.extend((n as u32).to_le_bytes());
            for (id, t) in store.ids().zip(&opt.first_moment) {
                put_record(&mut out, &format!("m:{}", store.name(id)), t);
            }
            for (id, t) in store.ids().zip(&opt.second_moment) {
                put_record(&mut out, &format!("v:{}", store.name(id)), t);
            }
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(ModelError::Truncated(what));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn array<const N: usize>(&mut self, what: &'static str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }

    fn u8(&mut self, what: &'static str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array(what)?))
    }

    fn u32(&mut self, what: &'static str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.array(what)?) as usize)
    }

    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array(what)?))
    }

    fn f64(&mut self, what: &'static str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array(what)?))
    }

    fn record(&mut self) -> Result<(String, Tensor<f32>)> {
        let len = self.u32("name length")?;
        let name = std::str::from_utf8(self.take(len, "tensor name")?)
            .map_err(|_| ModelError::Corrupt("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = self.u32("rank")?;
        if rank == 0 || rank > MAX_RANK {
            return Err(ModelError::Corrupt(format!(
                "tensor '{name}' has rank {rank}"
            )));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(self.u32("dims")?);
        }
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n > 0)
            .ok_or_else(|| {
                ModelError::Corrupt(format!("tensor '{name}' has invalid dims {dims:?}"))
            })?;
        let bytes = count
            .checked_mul(4)
            .ok_or_else(|| ModelError::Corrupt(format!("tensor '{name}' is too large")))?;
        let payload = self.take(bytes, "tensor payload")?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok((name, Tensor::new(dims, data)?))
    }
}

fn expect_tensors(
    model: &Model<f32>,
    records: Vec<(String, Tensor<f32>)>,
    prefix: &str,
) -> Result<Vec<Tensor<f32>>> {
    let store = model.store();
    if records.len() != store.len() {
        return Err(ModelError::TensorSet(format!(
            "{} {prefix}tensors stored, config has {}",
            records.len(),
            store.len()
        )));
    }
    let mut out = Vec::with_capacity(records.len());
    for (id, (name, tensor)) in store.ids().zip(records) {
        let want = format!("{prefix}{}", store.name(id));
        if name != want {
            return Err(ModelError::TensorSet(format!(
                "found '{name}' where '{want}' was expected"
            )));
        }
        let expected = store.value(id).shape();
        if tensor.shape() != expected {
            return Err(ModelError::TensorShape {
                name,
                expected: expected.to_vec(),
                found: tensor.shape().to_vec(),
            });
        }
        out.push(tensor);
    }
    Ok(out)
}

/// Decodes a checkpoint for `config`. Nothing is returned unless every
/// tensor matches the configured shapes.
pub fn checkpoint_from_bytes(
    bytes: &[u8],
    config: &ModelConfig,
) -> Result<(Model<f32>, Option<TrainingState>)> {
    let mut r = Reader { buf: bytes };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(ModelError::BadMagic);
    }
    let version = r.u16("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::Version(version));
    }
    let digest = r.u64("config digest")?;
    let n = r.u32("tensor count")?;
    let mut records = Vec::new();
    for _ in 0..n {
        records.push(r.record()?);
    }
    let state_raw = match r.u8("optimizer flag")? {
        0 => None,
        1 => {
            let kind = match r.u8("optimizer kind")? {
                0 => OptimizerKind::Sgd,
                1 => OptimizerKind::Adam,
                k => return Err(ModelError::Corrupt(format!("unknown optimizer kind {k}"))),
            };
            let lr = r.f64("learning rate")?;
            let adam = AdamHyper {
                beta1: r.f64("beta1")?,
                beta2: r.f64("beta2")?,
                eps: r.f64("eps")?,
            };
            let step = r.u64("optimizer step")?;
            let epochs = r.u64("epochs completed")?;
            let m = r.u32("moment count")?;
            let mut moments = Vec::new();
            for _ in 0..m {
                moments.push(r.record()?);
            }
            Some((kind, lr, adam, step, epochs, moments))
        }
        f => return Err(ModelError::Corrupt(format!("bad optimizer flag {f}"))),
    };
    if !r.buf.is_empty() {
        return Err(ModelError::Corrupt(format!(
            "{} trailing bytes",
            r.buf.len()
        )));
    }

    let mut model = Model::<f32>::new(config.clone(), 0)?;
    let values = expect_tensors(&model, records, "")?;
    if digest != config.digest() {
        return Err(ModelError::Digest {
            expected: config.digest(),
            found: digest,
        });
    }
    let state = match state_raw {
        None => None,
        Some((kind, lr, adam, step, epochs_completed, mut moments)) => {
            let (first_moment, second_moment) = match kind {
                OptimizerKind::Sgd if moments.is_empty() => (Vec::new(), Vec::new()),
                OptimizerKind::Sgd => {
                    return Err(ModelError::Corrupt("SGD state with moments".into()))
                }
                OptimizerKind::Adam => {
                    if moments.len() != 2 * values.len() {
                        return Err(ModelError::TensorSet(format!(
                            "{} moment tensors for {} parameters",
                            moments.len(),
                            values.len()
                        )));
                    }
                    let second = moments.split_off(values.len());
                    (
                        expect_tensors(&model, moments, "m:")?,
                        expect_tensors(&model, second, "v:")?,
                    )
                }
            };
            Some(TrainingState {
                optimizer: Optimizer {
                    kind,
                    lr,
                    adam,
                    step,
                    first_moment,
                    second_moment,
                },
                epochs_completed,
            })
        }
    };
    let store = model.store_mut();
    let ids: Vec<_> = store.ids().collect();
    for (id, v) in ids.into_iter().zip(values) {
        store.set_value(id, v)?;
    }
    Ok((model, state))
}

pub fn save_checkpoint(
    path: &Path,
    model: &Model<f32>,
    state: Option<&TrainingState>,
) -> Result<()> {
    std::fs::write(path, checkpoint_to_bytes(model, state)).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint(
    path: &Path,
    config: &ModelConfig,
) -> Result<(Model<f32>, Option<TrainingState>)> {
    let bytes = std::fs::read(path).map_err(|source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            ModelError::CheckpointNotFound(path.display().to_string())
        } else {
            ModelError::Io {
                path: path.display().to_string(),
                source,
            }
        }
    })?;
    checkpoint_from_bytes(&bytes, config)
}
