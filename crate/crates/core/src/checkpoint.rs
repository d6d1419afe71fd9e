//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "IATCKPT1"
//! u64 descriptor length, UTF-8 descriptor ("arch=…;…;seed=N")
//! per parameter, in spec order: u64 rank, rank × u64 dims, f32 data
//! optional: "UBANK", u64 class count, f32 radius, per class one tensor as above
//! ```

use std::fs;
use std::path::Path;

use crate::codec::Reader;
use crate::error::{Error, Result};
use crate::inverse::UniversalBank;
use crate::model::{NetworkSpec, NetworkState};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"IATCKPT1";
pub const BANK_TAG: &[u8; 5] = b"UBANK";

fn put_tensor(out: &mut Vec<u8>, t: &Tensor) {
    out.extend((t.rank() as u64).to_le_bytes());
    for &d in t.shape() {
        out.extend((d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend(v.to_le_bytes());
    }
}

fn get_shape(r: &mut Reader<'_>) -> Result<Vec<usize>> {
    let rank = r.u64_le("tensor rank")? as usize;
    if rank == 0 || rank > 8 {
        return Err(Error::Descriptor(format!("implausible tensor rank {rank}")));
    }
    (0..rank)
        .map(|_| r.u64_le("tensor dims").map(|d| d as usize))
        .collect()
}

fn get_data(r: &mut Reader<'_>, shape: Vec<usize>) -> Result<Tensor> {
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or(Error::Truncated("tensor data"))?;
    if n.checked_mul(4).is_none_or(|bytes| bytes > r.remaining()) {
        return Err(Error::Truncated("tensor data"));
    }
    let data = (0..n)
        .map(|_| r.f32_le("tensor data"))
        .collect::<Result<Vec<_>>>()?;
    Tensor::new(shape, data).map_err(|e| Error::Descriptor(e.to_string()))
}

pub fn encode(state: &NetworkState, bank: Option<&UniversalBank>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend(MAGIC);
    let descriptor = format!("{};seed={}", state.spec.descriptor(), state.seed);
    out.extend((descriptor.len() as u64).to_le_bytes());
    out.extend(descriptor.as_bytes());
    for p in &state.params {
        put_tensor(&mut out, p);
    }
    if let Some(bank) = bank {
        out.extend(BANK_TAG);
        out.extend((bank.classes() as u64).to_le_bytes());
        out.extend(bank.epsilon().to_le_bytes());
        for z in bank.perturbations() {
            put_tensor(&mut out, z);
        }
    }
    out
}

fn parse_seed(descriptor: &str) -> Result<u64> {
    descriptor
        .split(';')
        .find_map(|part| part.trim().strip_prefix("seed="))
        .ok_or_else(|| Error::Descriptor(format!("missing seed in {descriptor:?}")))?
        .parse()
        .map_err(|_| Error::Descriptor(format!("bad seed in {descriptor:?}")))
}

pub fn decode(bytes: &[u8]) -> Result<(NetworkState, Option<UniversalBank>)> {
    let mut r = Reader::new(bytes);
    let magic = r.take(MAGIC.len(), "magic")?;
    if magic != MAGIC {
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(MAGIC).into_owned(),
            found: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    let len = r.u64_le("descriptor length")? as usize;
    if len > r.remaining() {
        return Err(Error::Truncated("descriptor"));
    }
    let descriptor = std::str::from_utf8(r.take(len, "descriptor")?)
        .map_err(|_| Error::Descriptor("descriptor is not UTF-8".into()))?;
    let spec = NetworkSpec::parse_descriptor(descriptor)?;
    let seed = parse_seed(descriptor)?;
    let mut params = Vec::new();
    for (index, expected) in spec.param_shapes().into_iter().enumerate() {
        let found = get_shape(&mut r)?;
        if found != expected {
            return Err(Error::CheckpointShape {
                index,
                expected,
                found,
            });
        }
        params.push(get_data(&mut r, found)?);
    }
    let state = NetworkState::from_parts(spec, params, seed)?;
    if r.at_end() {
        return Ok((state, None));
    }
    let tag = r.take(BANK_TAG.len(), "bank tag")?;
    if tag != BANK_TAG {
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(BANK_TAG).into_owned(),
            found: String::from_utf8_lossy(tag).into_owned(),
        });
    }
    let classes = r.u64_le("bank class count")? as usize;
    let epsilon = r.f32_le("bank radius")?;
    if classes != state.spec.classes {
        return Err(Error::Descriptor(format!(
            "bank has {classes} classes, model has {}",
            state.spec.classes
        )));
    }
    let mut zs = Vec::with_capacity(classes);
    for index in 0..classes {
        let found = get_shape(&mut r)?;
        if found != state.spec.input_shape {
            return Err(Error::CheckpointShape {
                index,
                expected: state.spec.input_shape.clone(),
                found,
            });
        }
        zs.push(get_data(&mut r, found)?);
    }
    if !r.at_end() {
        return Err(Error::Descriptor(format!(
            "{} trailing bytes",
            r.remaining()
        )));
    }
    let bank = UniversalBank::from_parts(zs, epsilon)?;
    Ok((state, Some(bank)))
}

/// Writes through a temporary sibling file so a failed write never leaves a
/// half-written checkpoint behind.
pub fn save(state: &NetworkState, bank: Option<&UniversalBank>, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode(state, bank)).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save_checkpoint(state: &NetworkState, path: &Path) -> Result<()> {
    save(state, None, path)
}

pub fn load(path: &Path) -> Result<(NetworkState, Option<UniversalBank>)> {
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn load_checkpoint(path: &Path) -> Result<NetworkState> {
    load(path).map(|(state, _)| state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Classifier;

    fn state() -> NetworkState {
        NetworkState::init(NetworkSpec::mlp(2, &[5, 4], 3), 11).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = state();
        let bank = UniversalBank::init(3, &[2], 0.05, 2).unwrap();
        let (back, b) = decode(&encode(&s, Some(&bank))).unwrap();
        assert_eq!(back, s);
        assert_eq!(b.unwrap(), bank);
        let x = Tensor::from_rows(&[vec![0.3, -1.2]]).unwrap();
        assert!(s
            .forward(&x, false)
            .unwrap()
            .logits
            .bit_eq(&back.forward(&x, false).unwrap().logits));
    }

    #[test]
    fn every_truncation_is_reported() {
        let bytes = encode(&state(), None);
        for cut in [0, 4, 8, 12, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(
                matches!(decode(&bytes[..cut]), Err(Error::Truncated(_))),
                "cut at {cut}"
            );
        }
    }

    #[test]
    fn wrong_magic() {
        let mut bytes = encode(&state(), None);
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn shape_disagreeing_with_descriptor() {
        let s = state();
        let other = NetworkState::init(NetworkSpec::mlp(2, &[6, 4], 3), 11).unwrap();
        let mut bytes = encode(&s, None);
        let body = encode(&other, None);
        let head = 8 + 8 + format!("{};seed=11", s.spec.descriptor()).len();
        let other_head = 8 + 8 + format!("{};seed=11", other.spec.descriptor()).len();
        bytes.truncate(head);
        bytes.extend(&body[other_head..]);
        assert!(matches!(
            decode(&bytes),
            Err(Error::CheckpointShape { index: 0, .. })
        ));
    }
}
