//! Flat binary weight container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "UNIF"            magic
//! u32               format version (1)
//! u32 + bytes       variant name, UTF-8
//! u32 x 12          channels[3], depths[3], heads[3], resolution,
//!                   patch stride, ffn ratio
//! u32               classes
//! u64               number of scalars that follow
//! f64 x count       parameters in declaration order
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::config::UniFormConfig;
use super::model::UniFormModel;

pub const MAGIC: &[u8; 4] = b"UNIF";
pub const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// Serialises the configuration and every parameter.
pub fn to_bytes<T: Scalar>(model: &UniFormModel<T>) -> Result<Vec<u8>> {
    let cfg = model.config();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_u32(&mut out, cfg.variant.len())?;
    out.extend_from_slice(cfg.variant.as_bytes());
    for v in cfg.channels.iter().chain(&cfg.depths).chain(&cfg.heads) {
        put_u32(&mut out, *v)?;
    }
    for v in [cfg.resolution, cfg.patch_stride, cfg.ffn_ratio, cfg.num_classes] {
        put_u32(&mut out, v)?;
    }
    let params = model.named_parameters();
    let count: usize = params.iter().map(|(_, t)| t.len()).sum();
    out.extend_from_slice(&(count as u64).to_le_bytes());
    for (_, t) in params {
        for v in t.data() {
            out.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Rebuilds a model from [`to_bytes`] output.
pub fn from_bytes<T: Scalar>(buf: &[u8]) -> Result<UniFormModel<T>> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(4)? != &MAGIC[..] {
        return Err(Error::Format("missing UNIF magic".into()));
    }
    let version = c.u32()?;
    if version != VERSION as usize {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let len = c.u32()?;
    let variant = String::from_utf8(c.take(len)?.to_vec()).map_err(|e| Error::Format(e.to_string()))?;
    let mut three = || -> Result<[usize; 3]> { Ok([c.u32()?, c.u32()?, c.u32()?]) };
    let (channels, depths, heads) = (three()?, three()?, three()?);
    let cfg = UniFormConfig {
        variant,
        channels,
        depths,
        heads,
        resolution: c.u32()?,
        patch_stride: c.u32()?,
        ffn_ratio: c.u32()?,
        num_classes: c.u32()?,
    };
    let mut model = UniFormModel::build(&cfg, 0)?;
    let count = c.u64()?;
    let expected = model.count_params() as u64;
    if count != expected {
        return Err(Error::Format(format!("config implies {expected} parameters, file holds {count}")));
    }
    for t in model.parameters_mut() {
        for v in t.data_mut() {
            *v = T::of(c.f64()?);
        }
        t.ensure_finite("weights")?;
    }
    if c.pos != buf.len() {
        return Err(Error::Format(format!("{} trailing bytes", buf.len() - c.pos)));
    }
    Ok(model)
}

pub fn save<T: Scalar>(model: &UniFormModel<T>, path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&to_bytes(model)?)?;
    Ok(())
}

pub fn load<T: Scalar>(path: impl AsRef<Path>) -> Result<UniFormModel<T>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    from_bytes(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> UniFormModel<f64> {
        UniFormModel::build(&UniFormConfig::tiny().with_resolution(32).with_num_classes(7), 21).unwrap()
    }

    #[test]
    fn round_trip_through_file() {
        let m = model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tiny.unif");
        save(&m, &path).unwrap();
        let back: UniFormModel<f64> = load(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(to_bytes(&back).unwrap(), to_bytes(&m).unwrap());
    }

    #[test]
    fn header_layout() {
        let bytes = to_bytes(&model()).unwrap();
        assert_eq!(&bytes[..4], b"UNIF");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 4);
        assert_eq!(&bytes[12..16], b"tiny");
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let bytes = to_bytes(&model()).unwrap();
        assert!(matches!(from_bytes::<f64>(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(from_bytes::<f64>(&bad), Err(Error::Format(_))));
        let mut extra = bytes;
        extra.push(0);
        assert!(matches!(from_bytes::<f64>(&extra), Err(Error::Format(_))));
    }
}
