//! Binary tensor records, weight files and PPM images.
//!
//! Tensor record (`UCTN`): magic, `u8` version, `u8` ndim, `u32` LE dims, `f32` LE payload.
//!
//! Weight file (`UCWF`): magic, `u8` version, `u8` feature-map tag, `u32` config length,
//! config text, `u32` entry count, then per entry `u16` name length, name, `u64` payload
//! offset, `u8` ndim, `u32` dims; followed by the payload of concatenated tensor records.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{bail, Error, Result};
use crate::feature_map::FeatureMapTag;
use crate::network::{ModelConfig, Params, UcanWeights};
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: &[u8; 4] = b"UCTN";
pub const WEIGHTS_MAGIC: &[u8; 4] = b"UCWF";
pub const VERSION: u8 = 1;

/// Bounds-checked little-endian reader that names the field it failed on.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            bail!(Format, "field {field}: truncated at byte {}", self.pos);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, field: &str) -> Result<u8> {
        Ok(self.take(1, field)?[0])
    }

    fn u16(&mut self, field: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, field)?.try_into().unwrap()))
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }
}

pub fn encode_tensor(shape: &[usize], data: &[f32]) -> Result<Vec<u8>> {
    if shape.len() > u8::MAX as usize || shape.iter().product::<usize>() != data.len() {
        bail!(Dimension, "shape {shape:?} does not describe {} values", data.len());
    }
    let mut out = Vec::with_capacity(6 + 4 * shape.len() + 4 * data.len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(VERSION);
    out.push(shape.len() as u8);
    for &d in shape {
        let d = u32::try_from(d).map_err(|_| Error::Dimension(format!("dimension {d} too large")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn decode_record(r: &mut Reader<'_>, what: &str) -> Result<(Vec<usize>, Vec<f32>)> {
    if r.take(4, &format!("{what} magic"))? != TENSOR_MAGIC {
        bail!(Format, "{what}: bad tensor magic");
    }
    let version = r.u8(&format!("{what} version"))?;
    if version != VERSION {
        bail!(Format, "{what}: unsupported tensor version {version}");
    }
    let ndim = r.u8(&format!("{what} ndim"))? as usize;
    let mut shape = Vec::with_capacity(ndim);
    for i in 0..ndim {
        shape.push(r.u32(&format!("{what} dim {i}"))? as usize);
    }
    let count = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
    let Some(count) = count.filter(|c| c.checked_mul(4).is_some()) else {
        bail!(Format, "{what}: shape {shape:?} overflows");
    };
    let bytes = r.take(count * 4, &format!("{what} payload"))?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((shape, data))
}

pub fn decode_tensor(bytes: &[u8]) -> Result<(Vec<usize>, Vec<f32>)> {
    let mut r = Reader::new(bytes);
    let out = decode_record(&mut r, "tensor")?;
    if r.pos != bytes.len() {
        bail!(Format, "tensor: {} trailing bytes", bytes.len() - r.pos);
    }
    Ok(out)
}

pub fn save_tensor(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, encode_tensor(&t.shape(), t.data())?)?;
    Ok(())
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let (shape, data) = decode_tensor(&fs::read(path)?)?;
    let Ok(shape4) = <[usize; 4]>::try_from(shape.as_slice()) else {
        bail!(Format, "expected a 4-d tensor, got shape {shape:?}");
    };
    Tensor::new(shape4, data)
}

pub fn encode_weights(w: &UcanWeights) -> Result<Vec<u8>> {
    let config = w.config.to_text();
    let mut entries: Vec<(String, Vec<usize>, u64)> = Vec::new();
    let mut payload = Vec::new();
    let mut err = None;
    w.visit("", &mut |name, shape, data| match encode_tensor(shape, data) {
        Ok(rec) => {
            entries.push((name.to_string(), shape.to_vec(), payload.len() as u64));
            payload.extend_from_slice(&rec);
        }
        Err(e) => err = err.take().or(Some(e)),
    });
    if let Some(e) = err {
        return Err(e);
    }
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.push(VERSION);
    out.push(FeatureMapTag::Hedgehog as u8);
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, shape, offset) in &entries {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&offset.to_le_bytes());
        out.push(shape.len() as u8);
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode_weights(bytes: &[u8]) -> Result<UcanWeights> {
    let mut r = Reader::new(bytes);
    if r.take(4, "magic")? != WEIGHTS_MAGIC {
        bail!(Format, "field magic: not a weight file");
    }
    let version = r.u8("version")?;
    if version != VERSION {
        bail!(Format, "field version: unsupported value {version}");
    }
    let tag = r.u8("feature_map")?;
    if FeatureMapTag::from_u8(tag) != Some(FeatureMapTag::Hedgehog) {
        bail!(Format, "field feature_map: unsupported tag {tag}");
    }
    let clen = r.u32("config_length")? as usize;
    let Ok(text) = std::str::from_utf8(r.take(clen, "config")?) else {
        bail!(Format, "field config: not valid UTF-8");
    };
    let config = ModelConfig::parse(text).map_err(|e| Error::Format(format!("field config: {e}")))?;
    let count = r.u32("entry_count")? as usize;
    let mut manifest: HashMap<String, (Vec<usize>, u64)> = HashMap::with_capacity(count);
    for i in 0..count {
        let nlen = r.u16(&format!("entry {i} name_length"))? as usize;
        let Ok(name) = std::str::from_utf8(r.take(nlen, &format!("entry {i} name"))?) else {
            bail!(Format, "field entry {i} name: not valid UTF-8");
        };
        let name = name.to_string();
        let offset = r.u64(&format!("{name} offset"))?;
        let ndim = r.u8(&format!("{name} ndim"))? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for d in 0..ndim {
            shape.push(r.u32(&format!("{name} dim {d}"))? as usize);
        }
        manifest.insert(name, (shape, offset));
    }
    let payload = &bytes[r.pos..];
    let mut weights = UcanWeights::zeros(&config)?;
    let mut err: Option<Error> = None;
    let mut used = 0usize;
    weights.visit_mut("", &mut |name, shape, data| {
        if err.is_some() {
            return;
        }
        let res = (|| -> Result<()> {
            let Some((mshape, offset)) = manifest.get(name) else {
                bail!(Format, "field {name}: missing from manifest");
            };
            if mshape.as_slice() != shape {
                bail!(Format, "field {name}: manifest shape {mshape:?}, model expects {shape:?}");
            }
            let Some(start) = usize::try_from(*offset).ok().filter(|&o| o <= payload.len()) else {
                bail!(Format, "field {name}: offset {offset} beyond payload");
            };
            let mut rr = Reader::new(&payload[start..]);
            let (rshape, values) = decode_record(&mut rr, name)?;
            if rshape.as_slice() != shape {
                bail!(Format, "field {name}: record shape {rshape:?}, expected {shape:?}");
            }
            data.copy_from_slice(&values);
            Ok(())
        })();
        used += 1;
        if let Err(e) = res {
            err = Some(e);
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if used != manifest.len() {
        bail!(Format, "manifest has {} entries, model uses {used}", manifest.len());
    }
    Ok(weights)
}

pub fn save_weights(path: &Path, w: &UcanWeights) -> Result<()> {
    let bytes = encode_weights(w)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_weights(path: &Path) -> Result<UcanWeights> {
    decode_weights(&fs::read(path)?)
}

/// Binary PPM (P6) to a `(1, 3, h, w)` tensor in `[0, 1]`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0;
    let mut token = |field: &str| -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            bail!(Format, "ppm: missing {field}");
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token("magic")? != "P6" {
        bail!(Format, "ppm: only binary P6 is supported");
    }
    let mut num = |field: &str| -> Result<usize> {
        let t = token(field)?;
        t.parse().map_err(|_| Error::Format(format!("ppm: invalid {field} {t:?}")))
    };
    let (w, h, maxval) = (num("width")?, num("height")?, num("maxval")?);
    if w == 0 || h == 0 || maxval == 0 || maxval > 65535 {
        bail!(Format, "ppm: invalid header {w}x{h} maxval {maxval}");
    }
    pos += 1;
    let bps = if maxval < 256 { 1 } else { 2 };
    let need = w * h * 3 * bps;
    if bytes.len() < pos + need {
        bail!(Format, "ppm: pixel data truncated ({} of {need} bytes)", bytes.len().saturating_sub(pos));
    }
    let px = &bytes[pos..pos + need];
    let mut t = Tensor::zeros([1, 3, h, w]);
    let m = maxval as f32;
    for i in 0..w * h {
        for c in 0..3 {
            let k = i * 3 + c;
            let v = if bps == 1 {
                px[k] as f32
            } else {
                u16::from_be_bytes([px[2 * k], px[2 * k + 1]]) as f32
            };
            t.set(0, c, i / w, i % w, v / m);
        }
    }
    Ok(t)
}

/// First batch item of a 3-channel tensor as an 8-bit P6 image.
pub fn encode_ppm(t: &Tensor) -> Result<Vec<u8>> {
    let [_, c, h, w] = t.shape();
    if c != 3 {
        bail!(Dimension, "ppm needs 3 channels, got {c}");
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let v = t.at(0, ch, y, x);
                let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
                out.push((v * 255.0).round() as u8);
            }
        }
    }
    Ok(out)
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    decode_ppm(&fs::read(path)?)
}

pub fn write_ppm(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, encode_ppm(t)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn small() -> ModelConfig {
        ModelConfig {
            channels: 16,
            groups: 1,
            ha_depth: 1,
            lkd_depth: 1,
            wmsa_window: 8,
            wmsa_heads: 2,
            hpa_window: 8,
            hpa_heads: 2,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn tensor_record_layout() {
        let bytes = encode_tensor(&[1, 2], &[1.0, -2.5]).unwrap();
        assert_eq!(&bytes[..6], b"UCTN\x01\x02");
        assert_eq!(&bytes[6..10], &1u32.to_le_bytes());
        assert_eq!(&bytes[14..18], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 22);
        assert!(decode_tensor(&bytes[..21]).is_err());
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(decode_tensor(&bad).is_err());
    }

    proptest! {
        #[test]
        fn tensor_round_trip(dims in proptest::collection::vec(1usize..5, 0..5), seed in 0u64..1000) {
            let n: usize = dims.iter().product();
            let mut rng = Rng::new(seed);
            let data: Vec<f32> = (0..n).map(|_| rng.normal()).collect();
            let (s, d) = decode_tensor(&encode_tensor(&dims, &data).unwrap()).unwrap();
            prop_assert_eq!(s, dims);
            prop_assert_eq!(d, data);
        }
    }

    #[test]
    fn weights_round_trip_bitwise() {
        let w = UcanWeights::init(&small()).unwrap();
        let bytes = encode_weights(&w).unwrap();
        assert_eq!(decode_weights(&bytes).unwrap(), w);
    }

    #[test]
    fn weight_errors_name_field() {
        let w = UcanWeights::init(&small()).unwrap();
        let bytes = encode_weights(&w).unwrap();
        let msg = |b: &[u8]| decode_weights(b).unwrap_err().to_string();
        assert!(msg(&bytes[..3]).contains("magic"));
        assert!(msg(&bytes[..bytes.len() - 2]).contains("recon.bias"));
        let mut renamed = bytes.clone();
        let at = bytes.windows(14).position(|s| s == b"shallow.weight").unwrap();
        renamed[at] = b'X';
        assert!(msg(&renamed).contains("shallow.weight"));
        let mut tag = bytes;
        tag[5] = 1;
        assert!(msg(&tag).contains("feature_map"));
    }

    #[test]
    fn ppm_round_trip() {
        let mut rng = Rng::new(1);
        let t = Tensor::new([1, 3, 5, 7], (0..105).map(|_| (rng.uniform(0.0, 256.0) as u32).min(255) as f32 / 255.0).collect()).unwrap();
        let bytes = encode_ppm(&t).unwrap();
        assert!(bytes.starts_with(b"P6\n7 5\n255\n"));
        assert_eq!(decode_ppm(&bytes).unwrap(), t);
        let commented = b"P6 # c\n2 1\n# x\n255\n\x00\x80\xff\x01\x02\x03";
        let d = decode_ppm(commented).unwrap();
        assert_eq!(d.shape(), [1, 3, 1, 2]);
        assert_eq!(d.at(0, 2, 0, 0), 1.0);
        assert!(decode_ppm(b"P3\n1 1\n255\n").is_err());
        assert!(decode_ppm(b"P6\n2 2\n255\n\x00").is_err());
    }
}
