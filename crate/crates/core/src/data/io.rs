//! Dataset directory: `manifest.json` plus one raw little-endian float file
//! per sample holding PAN, low-resolution MS and ground truth, band-major.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

use super::SampleTriple;

pub const FORMAT_NAME: &str = "arnet-samples";
pub const FORMAT_VERSION: u32 = 1;
pub const SAMPLE_MAGIC: &[u8; 4] = b"ARSP";
const HEADER_LEN: usize = 8;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub count: usize,
    pub bands: usize,
    pub height: usize,
    pub width: usize,
    pub ratio: usize,
    pub dtype: String,
    pub endianness: String,
}

impl Manifest {
    fn new(count: usize, bands: usize, height: usize, width: usize) -> Self {
        Manifest {
            format: FORMAT_NAME.into(),
            version: FORMAT_VERSION,
            count,
            bands,
            height,
            width,
            ratio: 4,
            dtype: "f32".into(),
            endianness: "little".into(),
        }
    }

    fn check(&self) -> Result<()> {
        if self.format != FORMAT_NAME {
            return Err(Error::data(format!("manifest format is {:?}, expected {FORMAT_NAME:?}", self.format)));
        }
        if self.version != FORMAT_VERSION {
            return Err(Error::data(format!("manifest version {} is not supported", self.version)));
        }
        if self.dtype != "f32" || self.endianness != "little" {
            return Err(Error::data(format!("unsupported sample encoding {} {}", self.dtype, self.endianness)));
        }
        if self.ratio != 4 || self.height % 4 != 0 || self.width % 4 != 0 {
            return Err(Error::data(format!("{}x{} samples do not fit ratio {}", self.height, self.width, self.ratio)));
        }
        self.sample_floats()?;
        Ok(())
    }

    /// Floats per sample file, with overflow checking on the declared dimensions.
    fn sample_floats(&self) -> Result<usize> {
        let overflow = || Error::data(format!("manifest dimensions {}x{}x{} overflow", self.bands, self.height, self.width));
        let plane = self.height.checked_mul(self.width).ok_or_else(overflow)?;
        let hr = plane.checked_mul(self.bands).ok_or_else(overflow)?;
        let total = hr / 16 + hr + plane;
        total
            .checked_mul(4)
            .and_then(|b| b.checked_add(HEADER_LEN))
            .ok_or_else(overflow)?;
        Ok(total)
    }
}

fn sample_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("sample_{i:05}.bin"))
}

pub fn write_dataset(dir: &Path, samples: &[SampleTriple<f32>]) -> Result<Manifest> {
    let (bands, h, w) = match samples.first() {
        Some(s) => (s.bands(), s.size().0, s.size().1),
        None => (0, 0, 0),
    };
    for s in samples {
        s.validate()?;
        if (s.bands(), s.size().0, s.size().1) != (bands, h, w) {
            return Err(Error::config("all samples in a dataset must share bands and size"));
        }
    }
    fs::create_dir_all(dir)?;
    for (i, s) in samples.iter().enumerate() {
        let mut buf = Vec::with_capacity(HEADER_LEN + 4 * (s.pan.numel() + s.lrms_low.numel() + s.gt.numel()));
        buf.extend_from_slice(SAMPLE_MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        for t in [&s.pan, &s.lrms_low, &s.gt] {
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(sample_path(dir, i), buf)?;
    }
    let manifest = Manifest::new(samples.len(), bands, h, w);
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    manifest.check()?;
    Ok(manifest)
}

fn decode_sample(bytes: &[u8], m: &Manifest) -> Result<SampleTriple<f32>> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            msg: "truncated header".into(),
        });
    }
    if &bytes[..4] != SAMPLE_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad magic {:?}", &bytes[..4]),
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("four bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported sample version {version}"),
        });
    }
    let expected = HEADER_LEN + 4 * m.sample_floats()?;
    if bytes.len() < expected {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            msg: format!("truncated sample, expected {expected} bytes"),
        });
    }
    if bytes.len() > expected {
        return Err(Error::Format {
            offset: expected as u64,
            msg: format!("{} trailing bytes", bytes.len() - expected),
        });
    }
    let mut floats = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")));
    let (c, h, w) = (m.bands, m.height, m.width);
    let mut take = |shape: Shape| Tensor::from_vec(shape, floats.by_ref().take(shape.numel()).collect());
    Ok(SampleTriple {
        pan: take(Shape::new(1, 1, h, w))?,
        lrms_low: take(Shape::new(1, c, h / 4, w / 4))?,
        gt: take(Shape::new(1, c, h, w))?,
    })
}

pub fn read_dataset(dir: &Path) -> Result<(Manifest, Vec<SampleTriple<f32>>)> {
    let manifest = read_manifest(dir)?;
    let mut samples = Vec::with_capacity(manifest.count);
    for i in 0..manifest.count {
        let path = sample_path(dir, i);
        let bytes = fs::read(&path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        let s = decode_sample(&bytes, &manifest).map_err(|e| match e {
            Error::Format { offset, msg } => Error::Format {
                offset,
                msg: format!("{}: {msg}", path.display()),
            },
            other => other,
        })?;
        samples.push(s);
    }
    Ok((manifest, samples))
}
