//! Checkpoint file format.
//!
//! Layout: magic `MDMC`, u32 LE version=1, u32 LE header length, UTF-8 header
//! of `key = value` lines (config echo, stage cursor, rng state), then a
//! tensor table of repeated [u32 name-len, name UTF-8, u8 dtype (0=f32),
//! u32 ndim, u32 dims…, row-major little-endian payload], and a final u64 LE
//! tensor count as trailer. Save→load→save round trips byte-identically.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::compute::Tensor;
use crate::error::{err_fmt, Result};

const MAGIC: &[u8; 4] = b"MDMC";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    /// Ordered `key = value` pairs; order is part of the byte layout.
    pub header: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn header_value(&self, key: &str) -> Result<&str> {
        self.header
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| err_fmt!(Format, "checkpoint header missing '{key}'"))
    }

    pub fn header_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.header_value(key)?
            .parse()
            .map_err(|_| err_fmt!(Format, "checkpoint header '{key}' unparsable"))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<f32>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| err_fmt!(Format, "checkpoint missing tensor '{name}'"))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = String::new();
        for (k, v) in &self.header {
            header.push_str(k);
            header.push_str(" = ");
            header.push_str(v);
            header.push('\n');
        }
        let hb = header.as_bytes();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(hb.len() as u32).to_le_bytes());
        out.extend_from_slice(hb);
        for (name, tensor) in &self.tensors {
            let nb = name.as_bytes();
            out.extend_from_slice(&(nb.len() as u32).to_le_bytes());
            out.extend_from_slice(nb);
            out.push(0); // dtype f32
            out.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
            for &d in tensor.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(err_fmt!(Format, "checkpoint truncated at byte {pos}"));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        let mut pos = 0;
        if take(&mut pos, 4)? != MAGIC {
            return Err(err_fmt!(Format, "bad checkpoint magic"));
        }
        let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        if version != VERSION {
            return Err(err_fmt!(Format, "unsupported checkpoint version {version}"));
        }
        let hlen = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let htext = std::str::from_utf8(take(&mut pos, hlen)?)
            .map_err(|_| err_fmt!(Format, "header is not UTF-8"))?;
        let mut header = Vec::new();
        for line in htext.lines() {
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| err_fmt!(Format, "bad header line '{line}'"))?;
            header.push((k.to_string(), v.to_string()));
        }

        if bytes.len() < pos + 8 {
            return Err(err_fmt!(Format, "checkpoint missing trailer"));
        }
        let body_end = bytes.len() - 8;
        let count =
            u64::from_le_bytes(bytes[body_end..].try_into().unwrap()) as usize;

        let mut tensors: Vec<(String, Tensor<f32>)> = Vec::new();
        while pos < body_end {
            let nlen = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(take(&mut pos, nlen)?)
                .map_err(|_| err_fmt!(Format, "tensor name is not UTF-8"))?
                .to_string();
            let dtype = take(&mut pos, 1)?[0];
            if dtype != 0 {
                return Err(err_fmt!(Format, "unsupported dtype {dtype} for '{name}'"));
            }
            let ndim = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
            }
            let n: usize = shape.iter().product();
            if pos + n * 4 > body_end {
                return Err(err_fmt!(Format, "tensor '{name}' payload truncated"));
            }
            let data: Vec<f32> = bytes[pos..pos + n * 4]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            pos += n * 4;
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if pos != body_end {
            return Err(err_fmt!(Format, "trailing bytes in tensor table"));
        }
        if tensors.len() != count {
            return Err(err_fmt!(
                Format,
                "trailer says {count} tensors, found {}",
                tensors.len()
            ));
        }
        Ok(Checkpoint { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::File::create(path)?.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }
}
