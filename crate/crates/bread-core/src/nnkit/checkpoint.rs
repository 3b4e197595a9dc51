//! Checkpoint serialization.
//!
//! Wire format, all integers little-endian:
//!
//! ```text
//! magic     9 bytes  "BREADCKPT"
//! version   u8       currently 1
//! stage     u16 length + utf8 ("ian" | "ansn" | "nfm" | "can" | "can_me")
//! spec      in, out, base, max, depth as u32; final activation u8 (0 sigmoid, 1 none)
//! step      u64 training-step counter
//! records   u32 count, then per record:
//!           name u16 length + utf8, ndims u8, dims u32 each, f32 data
//! ```
//!
//! Records appear in the network's wire order, so save-then-load-then-save
//! reproduces an identical byte stream.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use super::network::{FinalActivation, NetworkSpec, UNet};
use super::tensor::Tensor;
use crate::{Error, Result};

pub const MAGIC: &[u8; 9] = b"BREADCKPT";
pub const VERSION: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum StageTag {
    Ian,
    Ansn,
    Nfm,
    Can,
    CanMe,
}

impl StageTag {
    pub fn as_str(self) -> &'static str {
        match self {
            StageTag::Ian => "ian",
            StageTag::Ansn => "ansn",
            StageTag::Nfm => "nfm",
            StageTag::Can => "can",
            StageTag::CanMe => "can_me",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "ian" => StageTag::Ian,
            "ansn" => StageTag::Ansn,
            "nfm" => StageTag::Nfm,
            "can" => StageTag::Can,
            "can_me" => StageTag::CanMe,
            other => {
                return Err(Error::Format(format!(
                    "unknown stage tag {other:?}, expected ian|ansn|nfm|can|can_me"
                )))
            }
        })
    }
}

impl std::fmt::Display for StageTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamRecord {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: StageTag,
    pub spec: NetworkSpec,
    pub step: u64,
    pub records: Vec<ParamRecord>,
}

impl Checkpoint {
    pub fn from_network(net: &UNet<f32>, stage: StageTag, step: u64) -> Self {
        let records = net
            .named_params()
            .into_iter()
            .map(|(name, dims, t)| ParamRecord {
                name,
                dims,
                data: t.data().to_vec(),
            })
            .collect();
        Checkpoint {
            stage,
            spec: *net.spec(),
            step,
            records,
        }
    }

    /// Rebuilds the network, validating record names and shapes against the
    /// stored spec's wire order.
    pub fn to_network(&self) -> Result<UNet<f32>> {
        let reference = UNet::<f32>::init(self.spec, 0)?;
        let expected = reference.named_params();
        if expected.len() != self.records.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} records, spec requires {}",
                self.records.len(),
                expected.len()
            )));
        }
        let mut params = Vec::with_capacity(self.records.len());
        for ((name, dims, carrier), rec) in expected.iter().zip(self.records.iter()) {
            if &rec.name != name {
                return Err(Error::Format(format!(
                    "record {:?} out of order, expected {:?}",
                    rec.name, name
                )));
            }
            if &rec.dims != dims {
                return Err(Error::Format(format!(
                    "record {:?} has dims {:?}, expected {:?}",
                    rec.name, rec.dims, dims
                )));
            }
            let (c, h, w) = carrier.shape();
            if rec.data.len() != c * h * w {
                return Err(Error::Format(format!(
                    "record {:?} has {} values, expected {}",
                    rec.name,
                    rec.data.len(),
                    c * h * w
                )));
            }
            params.push(Tensor::from_vec(c, h, w, rec.data.clone()));
        }
        UNet::from_params(self.spec, params)
    }
}

fn final_act_byte(a: FinalActivation) -> u8 {
    match a {
        FinalActivation::Sigmoid => 0,
        FinalActivation::None => 1,
    }
}

fn final_act_from_byte(b: u8) -> Result<FinalActivation> {
    match b {
        0 => Ok(FinalActivation::Sigmoid),
        1 => Ok(FinalActivation::None),
        other => Err(Error::Format(format!(
            "unknown final-activation byte {other}"
        ))),
    }
}

fn write_str<W: Write>(w: &mut W, s: &str) -> io::Result<()> {
    let bytes = s.as_bytes();
    w.write_all(&(bytes.len() as u16).to_le_bytes())?;
    w.write_all(bytes)
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    let io_err = |e: io::Error| Error::io(path, e);
    buf.write_all(MAGIC).map_err(io_err)?;
    buf.push(VERSION);
    write_str(&mut buf, ckpt.stage.as_str()).map_err(io_err)?;
    for v in [
        ckpt.spec.in_channels,
        ckpt.spec.out_channels,
        ckpt.spec.base_channels,
        ckpt.spec.max_channels,
        ckpt.spec.depth,
    ] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    buf.push(final_act_byte(ckpt.spec.final_activation));
    buf.extend_from_slice(&ckpt.step.to_le_bytes());
    buf.extend_from_slice(&(ckpt.records.len() as u32).to_le_bytes());
    for rec in &ckpt.records {
        write_str(&mut buf, &rec.name).map_err(io_err)?;
        buf.push(rec.dims.len() as u8);
        for &d in &rec.dims {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        let expect: usize = rec.dims.iter().product();
        if expect != rec.data.len() {
            return Err(Error::Format(format!(
                "record {:?}: dims {:?} do not match {} values",
                rec.name,
                rec.dims,
                rec.data.len()
            )));
        }
        for &v in &rec.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    // write through a temp file so a crash never leaves a torn checkpoint
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, &buf).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Format(
                "unexpected end of checkpoint file".into(),
            ));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::Format("non-utf8 string in checkpoint".into()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut data = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut data))
        .map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        data: &data,
        pos: 0,
    };
    let magic = r.take(MAGIC.len())?;
    if magic != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(MAGIC)
        )));
    }
    let version = r.u8()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}, expected {VERSION}"
        )));
    }
    let stage = StageTag::parse(&r.string()?)?;
    let in_channels = r.u32()? as usize;
    let out_channels = r.u32()? as usize;
    let base_channels = r.u32()? as usize;
    let max_channels = r.u32()? as usize;
    let depth = r.u32()? as usize;
    let final_activation = final_act_from_byte(r.u8()?)?;
    let spec = NetworkSpec {
        in_channels,
        out_channels,
        base_channels,
        max_channels,
        depth,
        final_activation,
    };
    let step = r.u64()?;
    let count = r.u32()? as usize;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.string()?;
        let ndims = r.u8()? as usize;
        let mut dims = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            dims.push(r.u32()? as usize);
        }
        let len: usize = dims.iter().product();
        let raw = r.take(len * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        records.push(ParamRecord { name, dims, data });
    }
    if r.pos != data.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after last record",
            data.len() - r.pos
        )));
    }
    Ok(Checkpoint {
        stage,
        spec,
        step,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn sample_net() -> UNet<f32> {
        UNet::init(NetworkSpec::with_io(2, 1, FinalActivation::None), 42).unwrap()
    }

    #[test]
    fn round_trip_preserves_parameters_bitwise() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("ansn.ckpt");
        let net = sample_net();
        let ckpt = Checkpoint::from_network(&net, StageTag::Ansn, 123);
        save_checkpoint(&path, &ckpt).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded, ckpt);
        let net2 = loaded.to_network().unwrap();
        assert_eq!(net.params(), net2.params());
    }

    #[test]
    fn load_then_save_is_byte_identical() {
        let dir = tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        let ckpt = Checkpoint::from_network(&sample_net(), StageTag::Ansn, 5);
        save_checkpoint(&p1, &ckpt).unwrap();
        let loaded = load_checkpoint(&p1).unwrap();
        save_checkpoint(&p2, &loaded).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        let ckpt = Checkpoint::from_network(&sample_net(), StageTag::Ian, 1);
        save_checkpoint(&path, &ckpt).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));
    }

    #[test]
    fn wrong_magic_names_the_expectation() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("w.ckpt");
        std::fs::write(&path, b"NOTACKPT!extra").unwrap();
        match load_checkpoint(&path) {
            Err(Error::Format(msg)) => assert!(msg.contains("BREADCKPT")),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn stage_tags_round_trip() {
        for tag in [
            StageTag::Ian,
            StageTag::Ansn,
            StageTag::Nfm,
            StageTag::Can,
            StageTag::CanMe,
        ] {
            assert_eq!(StageTag::parse(tag.as_str()).unwrap(), tag);
        }
        assert!(StageTag::parse("bogus").is_err());
    }
}
