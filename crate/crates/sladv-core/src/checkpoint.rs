//! SLNN binary checkpoints.
//!
//! Network checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic "SLNN" | version u32 | record count u32 | records...
//! record:  kind u8 | hyperparameter block | parameter tensors
//! tensor:  ndim u32 | dims u32 x ndim | f64 payload
//! ```
//!
//! Layer kinds use codes 0x01..=0x06. The same container also carries named
//! tensor bundles (adversarial dumps) via record kind 0xFF: name length u32,
//! UTF-8 name, one tensor. A network loader rejects bundle records and vice
//! versa, so the two flavors cannot be confused silently.

use crate::error::{Error, Result};
use crate::layer::{AvgPool2d, Layer, Residual};
use crate::tensor::Tensor;
use std::fs;
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"SLNN";
pub const VERSION: u32 = 1;

const KIND_DENSE: u8 = 0x01;
const KIND_CONV2D: u8 = 0x02;
const KIND_RELU: u8 = 0x03;
const KIND_AVGPOOL2D: u8 = 0x04;
const KIND_FLATTEN: u8 = 0x05;
const KIND_RESIDUAL: u8 = 0x06;
const KIND_TENSOR: u8 = 0xFF;

pub fn save_layers(path: &Path, layers: &[Layer]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(layers.len() as u32).to_le_bytes());
    for layer in layers {
        write_layer(&mut buf, layer);
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_layers(path: &Path) -> Result<Vec<Layer>> {
    let bytes = fs::read(path)?;
    let mut r = Reader::new(&bytes);
    let count = read_header(&mut r)?;
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        layers.push(read_layer(&mut r)?);
    }
    r.expect_end()?;
    Ok(layers)
}

/// Saves named tensors (adversarial dumps and similar artifacts).
pub fn save_tensor_bundle(path: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, tensor) in entries {
        buf.push(KIND_TENSOR);
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        write_tensor(&mut buf, tensor);
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_tensor_bundle(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path)?;
    let mut r = Reader::new(&bytes);
    let count = read_header(&mut r)?;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let at = r.offset();
        let kind = r.u8()?;
        if kind != KIND_TENSOR {
            return Err(Error::format(
                at,
                format!("expected tensor record (0xFF), found kind 0x{kind:02X}"),
            ));
        }
        let name_len = r.u32()? as usize;
        let name_at = r.offset();
        let name = String::from_utf8(r.bytes(name_len)?.to_vec())
            .map_err(|_| Error::format(name_at, "tensor name is not valid UTF-8"))?;
        entries.push((name, read_tensor(&mut r)?));
    }
    r.expect_end()?;
    Ok(entries)
}

fn read_header(r: &mut Reader) -> Result<usize> {
    let magic = r.bytes(4)?;
    if magic != MAGIC {
        return Err(Error::format(0, format!("bad magic {magic:02X?}, expected \"SLNN\"")));
    }
    let at = r.offset();
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(
            at,
            format!("unsupported format version {version}, expected {VERSION}"),
        ));
    }
    Ok(r.u32()? as usize)
}

fn write_layer(buf: &mut Vec<u8>, layer: &Layer) {
    match layer {
        Layer::Dense(d) => {
            buf.push(KIND_DENSE);
            buf.extend_from_slice(&(d.in_features as u32).to_le_bytes());
            buf.extend_from_slice(&(d.out_features as u32).to_le_bytes());
            write_tensor(buf, &d.weight);
            write_tensor(buf, &d.bias);
        }
        Layer::Conv2d(c) => {
            buf.push(KIND_CONV2D);
            for v in [c.in_channels, c.out_channels, c.kernel, c.stride, c.padding] {
                buf.extend_from_slice(&(v as u32).to_le_bytes());
            }
            write_tensor(buf, &c.weight);
            write_tensor(buf, &c.bias);
        }
        Layer::Relu => buf.push(KIND_RELU),
        Layer::AvgPool2d(p) => {
            buf.push(KIND_AVGPOOL2D);
            buf.extend_from_slice(&(p.kernel as u32).to_le_bytes());
            buf.extend_from_slice(&(p.stride as u32).to_le_bytes());
        }
        Layer::Flatten => buf.push(KIND_FLATTEN),
        Layer::Residual(res) => {
            buf.push(KIND_RESIDUAL);
            buf.extend_from_slice(&(res.body.len() as u32).to_le_bytes());
            for inner in &res.body {
                write_layer(buf, inner);
            }
        }
    }
}

fn read_layer(r: &mut Reader) -> Result<Layer> {
    let at = r.offset();
    let kind = r.u8()?;
    match kind {
        KIND_DENSE => {
            let in_features = r.u32()? as usize;
            let out_features = r.u32()? as usize;
            let weight = read_tensor(r)?;
            let bias = read_tensor(r)?;
            if weight.shape() != [out_features, in_features] {
                return Err(Error::format(
                    at,
                    format!(
                        "dense({in_features}->{out_features}) carries weight {:?}",
                        weight.shape()
                    ),
                ));
            }
            Layer::dense_with(weight, bias).map_err(|e| Error::format(at, e.to_string()))
        }
        KIND_CONV2D => {
            let in_channels = r.u32()? as usize;
            let out_channels = r.u32()? as usize;
            let kernel = r.u32()? as usize;
            let stride = r.u32()? as usize;
            let padding = r.u32()? as usize;
            let weight = read_tensor(r)?;
            let bias = read_tensor(r)?;
            if weight.shape() != [out_channels, in_channels, kernel, kernel] {
                return Err(Error::format(
                    at,
                    format!("conv2d hyperparameters disagree with weight {:?}", weight.shape()),
                ));
            }
            Layer::conv2d_with(weight, bias, stride, padding)
                .map_err(|e| Error::format(at, e.to_string()))
        }
        KIND_RELU => Ok(Layer::Relu),
        KIND_AVGPOOL2D => {
            let kernel = r.u32()? as usize;
            let stride = r.u32()? as usize;
            if kernel == 0 || stride == 0 {
                return Err(Error::format(at, "avgpool2d kernel/stride must be positive"));
            }
            Ok(Layer::AvgPool2d(AvgPool2d { kernel, stride }))
        }
        KIND_FLATTEN => Ok(Layer::Flatten),
        KIND_RESIDUAL => {
            let n = r.u32()? as usize;
            let mut body = Vec::with_capacity(n);
            for _ in 0..n {
                body.push(read_layer(r)?);
            }
            Ok(Layer::Residual(Residual { body }))
        }
        KIND_TENSOR => Err(Error::format(
            at,
            "found a tensor-bundle record in a network checkpoint",
        )),
        other => Err(Error::format(at, format!("unknown layer kind 0x{other:02X}"))),
    }
}

fn write_tensor(buf: &mut Vec<u8>, t: &Tensor) {
    buf.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_tensor(r: &mut Reader) -> Result<Tensor> {
    let at = r.offset();
    let ndim = r.u32()? as usize;
    if ndim == 0 || ndim > 8 {
        return Err(Error::format(at, format!("implausible tensor rank {ndim}")));
    }
    let mut shape = Vec::with_capacity(ndim);
    let mut len = 1usize;
    for _ in 0..ndim {
        let dim_at = r.offset();
        let d = r.u32()? as usize;
        len = len
            .checked_mul(d)
            .filter(|&l| l <= (1 << 32))
            .ok_or_else(|| Error::format(dim_at, "tensor dimensions overflow"))?;
        shape.push(d);
    }
    let mut data = Vec::with_capacity(len);
    for _ in 0..len {
        data.push(r.f64()?);
    }
    Tensor::new(shape, data).map_err(|e| Error::format(at, e.to_string()))
}

/// Byte reader that remembers its offset for error reporting.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    fn offset(&self) -> u64 {
        self.pos as u64
    }

    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(
                self.offset(),
                format!(
                    "unexpected end of file: wanted {n} bytes, {} remain",
                    self.bytes.len() - self.pos
                ),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.bytes(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f64(&mut self) -> Result<f64> {
        let b = self.bytes(8)?;
        Ok(f64::from_le_bytes([
            b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7],
        ]))
    }

    fn expect_end(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(
                self.offset(),
                format!("{} trailing bytes after final record", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_is_magic_version_count() {
        let dir = std::env::temp_dir().join("slnn_header_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("empty.slnn");
        save_layers(&path, &[]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"SLNN");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), VERSION);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 0);
        assert_eq!(bytes.len(), 12);
    }

    #[test]
    fn truncated_file_reports_offset() {
        let dir = std::env::temp_dir().join("slnn_trunc_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("trunc.slnn");
        save_layers(&path, &[Layer::dense(2, 2)]).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 5);
        std::fs::write(&path, &bytes).unwrap();
        let err = load_layers(&path).unwrap_err();
        match err {
            Error::Format { offset, .. } => assert!(offset > 0),
            other => panic!("expected format error, got {other}"),
        }
    }

    #[test]
    fn bundle_and_network_records_do_not_mix() {
        let dir = std::env::temp_dir().join("slnn_mix_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bundle.slnn");
        let t = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        save_tensor_bundle(&path, &[("delta".into(), t)]).unwrap();
        assert!(load_layers(&path).is_err());
        let back = load_tensor_bundle(&path).unwrap();
        assert_eq!(back[0].0, "delta");
        assert_eq!(back[0].1.data(), &[1.0, 2.0]);
    }
}
