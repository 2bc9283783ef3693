//! Bit-exact parameter checkpoints.
//!
//! Flat binary container: magic, format version, the variant letter and
//! scale profile (so evaluation can rebuild the graph), then each parameter
//! as name, shape and row-major little-endian f64 values. Round-trips are
//! bit-exact by construction.

use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{Model, ModelVariant, Param, ScaleProfile};

const MAGIC: &[u8; 4] = b"BVRD";
const VERSION: u32 = 1;

fn write_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn write_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

/// Serialize a model to the checkpoint byte format.
pub fn encode_checkpoint(model: &Model) -> Vec<u8> {
    let profile = model.profile();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    write_u32(&mut out, VERSION);
    out.push(model.variant().letter() as u8);
    write_u32(&mut out, profile.input_h as u32);
    write_u32(&mut out, profile.input_w as u32);
    for d in profile.encoder_depths {
        write_u32(&mut out, d as u32);
    }
    write_u32(&mut out, profile.dense_width as u32);
    for c in profile.convs_per_block {
        write_u32(&mut out, c as u32);
    }
    write_u32(&mut out, model.params().len() as u32);
    for p in model.params() {
        write_u32(&mut out, p.name.len() as u32);
        out.extend_from_slice(p.name.as_bytes());
        write_u32(&mut out, p.value.shape().len() as u32);
        for &d in p.value.shape() {
            write_u64(&mut out, d as u64);
        }
        for &v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::MalformedFile(
                "checkpoint truncated".into(),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Rebuild a model from checkpoint bytes, validating the parameter set
/// against the recorded architecture.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::MalformedFile(
            "not a checkpoint file (bad magic)".into(),
        ));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Incompatible(format!(
            "checkpoint format version {version}, this build reads {VERSION}"
        )));
    }
    let variant = ModelVariant::parse(&(r.take(1)?[0] as char).to_string())?;
    let profile = ScaleProfile {
        input_h: r.u32()? as usize,
        input_w: r.u32()? as usize,
        encoder_depths: [
            r.u32()? as usize,
            r.u32()? as usize,
            r.u32()? as usize,
            r.u32()? as usize,
        ],
        dense_width: r.u32()? as usize,
        convs_per_block: [
            r.u32()? as usize,
            r.u32()? as usize,
            r.u32()? as usize,
            r.u32()? as usize,
        ],
    };
    let n_params = r.u32()? as usize;
    let mut params = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::MalformedFile("checkpoint parameter name is not UTF-8".into()))?;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.push(Param {
            name,
            value: Tensor::new(shape, data)?,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::MalformedFile(format!(
            "checkpoint has {} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Model::from_parts(variant, profile, params)
}

pub fn save_checkpoint(path: &Path, model: &Model) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    file.write_all(&encode_checkpoint(model))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use crate::model::build_model;

    use super::*;

    fn tiny() -> ScaleProfile {
        ScaleProfile {
            input_h: 32,
            input_w: 16,
            encoder_depths: [2, 2, 3, 3],
            dense_width: 5,
            convs_per_block: [1, 1, 1, 1],
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let model = build_model(ModelVariant::C, &tiny(), 42).unwrap();
        let bytes = encode_checkpoint(&model);
        let loaded = decode_checkpoint(&bytes).unwrap();
        assert_eq!(loaded.variant(), model.variant());
        assert_eq!(loaded.profile(), model.profile());
        for (a, b) in model.params().iter().zip(loaded.params()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value.shape(), b.value.shape());
            let bits_a: Vec<u64> = a.value.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = b.value.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
        // Re-encoding reproduces the same bytes.
        assert_eq!(encode_checkpoint(&loaded), bytes);
    }

    #[test]
    fn rejects_bad_magic_version_and_truncation() {
        let model = build_model(ModelVariant::A, &tiny(), 0).unwrap();
        let bytes = encode_checkpoint(&model);

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(decode_checkpoint(&bad_magic).is_err());

        let mut bad_version = bytes.clone();
        bad_version[4] = 9;
        assert!(decode_checkpoint(&bad_version).is_err());

        assert!(decode_checkpoint(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = build_model(ModelVariant::F, &tiny(), 7).unwrap();
        save_checkpoint(&path, &model).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.params(), model.params());
    }
}
