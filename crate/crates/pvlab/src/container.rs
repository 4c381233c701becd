//! Shared on-disk container: a magic line, a plain-text `key: value` header
//! including a tensor directory (name, shape, byte offset, dtype), a blank
//! line, then raw little-endian payloads. Round trips are bit-exact.

use std::fs;
use std::io::Write;
use std::path::Path;

#[derive(Debug)]
pub(crate) struct ContainerError {
    pub offset: u64,
    pub message: String,
}

impl ContainerError {
    fn new(offset: u64, message: impl Into<String>) -> Self {
        ContainerError { offset, message: message.into() }
    }
}

pub(crate) type CResult<T> = std::result::Result<T, ContainerError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn byte_width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    fn tag(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }
}

pub(crate) enum TensorData<'a> {
    F32(&'a [f32]),
    F64(&'a [f64]),
}

impl TensorData<'_> {
    fn dtype(&self) -> Dtype {
        match self {
            TensorData::F32(_) => Dtype::F32,
            TensorData::F64(_) => Dtype::F64,
        }
    }

    fn len(&self) -> usize {
        match self {
            TensorData::F32(d) => d.len(),
            TensorData::F64(d) => d.len(),
        }
    }
}

pub(crate) struct TensorEntry<'a> {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: TensorData<'a>,
}

/// Write a container file. Tensors are laid out contiguously in order.
pub(crate) fn write_container(
    path: &Path,
    magic: &str,
    header: &[(String, String)],
    tensors: &[TensorEntry<'_>],
) -> std::io::Result<()> {
    let mut text = String::new();
    text.push_str(magic);
    text.push('\n');
    for (k, v) in header {
        text.push_str(k);
        text.push_str(": ");
        text.push_str(v);
        text.push('\n');
    }
    let mut offset = 0usize;
    for t in tensors {
        assert_eq!(t.data.len(), t.rows * t.cols, "tensor {} shape mismatch", t.name);
        text.push_str(&format!(
            "tensor: {} {}x{} {} {}\n",
            t.name,
            t.rows,
            t.cols,
            offset,
            t.data.dtype().tag()
        ));
        offset += t.data.len() * t.data.dtype().byte_width();
    }
    text.push('\n');

    let mut buf = Vec::with_capacity(text.len() + offset);
    buf.extend_from_slice(text.as_bytes());
    for t in tensors {
        match &t.data {
            TensorData::F32(d) => {
                for v in d.iter() {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
            TensorData::F64(d) => {
                for v in d.iter() {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Debug, Clone)]
pub(crate) struct ParsedTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
    pub dtype: Dtype,
}

#[derive(Debug)]
pub(crate) struct ParsedContainer {
    pub header: Vec<(String, String)>,
    pub tensors: Vec<ParsedTensor>,
    payload: Vec<u8>,
}

impl ParsedContainer {
    pub fn header_value(&self, key: &str) -> Option<&str> {
        self.header
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn tensor_f32(&self, t: &ParsedTensor) -> CResult<Vec<f32>> {
        if t.dtype != Dtype::F32 {
            return Err(ContainerError::new(
                t.offset as u64,
                format!("tensor {} is {}, expected f32", t.name, t.dtype.tag()),
            ));
        }
        let n = t.rows * t.cols;
        let end = t.offset + n * 4;
        let bytes = self.payload.get(t.offset..end).ok_or_else(|| {
            ContainerError::new(end as u64, format!("tensor {} payload truncated", t.name))
        })?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    pub fn tensor_f64(&self, t: &ParsedTensor) -> CResult<Vec<f64>> {
        if t.dtype != Dtype::F64 {
            return Err(ContainerError::new(
                t.offset as u64,
                format!("tensor {} is {}, expected f64", t.name, t.dtype.tag()),
            ));
        }
        let n = t.rows * t.cols;
        let end = t.offset + n * 8;
        let bytes = self.payload.get(t.offset..end).ok_or_else(|| {
            ContainerError::new(end as u64, format!("tensor {} payload truncated", t.name))
        })?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
            .collect())
    }
}

/// Read and structurally validate a container file.
pub(crate) fn read_container(path: &Path, magic: &str) -> CResult<ParsedContainer> {
    let bytes = fs::read(path)
        .map_err(|e| ContainerError::new(0, format!("cannot read {}: {e}", path.display())))?;
    let magic_line = magic.as_bytes();
    if bytes.len() < magic_line.len() + 1
        || &bytes[..magic_line.len()] != magic_line
        || bytes[magic_line.len()] != b'\n'
    {
        return Err(ContainerError::new(0, format!("bad magic, expected {magic}")));
    }
    // header runs until the first blank line
    let mut pos = magic_line.len() + 1;
    let mut header = Vec::new();
    let mut tensors: Vec<ParsedTensor> = Vec::new();
    loop {
        let line_end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| ContainerError::new(pos as u64, "header not terminated"))?;
        let line = std::str::from_utf8(&bytes[pos..pos + line_end])
            .map_err(|_| ContainerError::new(pos as u64, "header is not UTF-8"))?;
        pos += line_end + 1;
        if line.is_empty() {
            break;
        }
        if let Some(rest) = line.strip_prefix("tensor: ") {
            let parts: Vec<&str> = rest.split(' ').collect();
            if parts.len() != 4 {
                return Err(ContainerError::new(pos as u64, format!("bad tensor line: {line}")));
            }
            let (rows, cols) = parts[1]
                .split_once('x')
                .ok_or_else(|| ContainerError::new(pos as u64, "bad tensor shape"))?;
            let dtype = match parts[3] {
                "f32" => Dtype::F32,
                "f64" => Dtype::F64,
                other => {
                    return Err(ContainerError::new(pos as u64, format!("bad dtype {other}")))
                }
            };
            tensors.push(ParsedTensor {
                name: parts[0].to_string(),
                rows: rows
                    .parse()
                    .map_err(|_| ContainerError::new(pos as u64, "bad tensor rows"))?,
                cols: cols
                    .parse()
                    .map_err(|_| ContainerError::new(pos as u64, "bad tensor cols"))?,
                offset: parts[2]
                    .parse()
                    .map_err(|_| ContainerError::new(pos as u64, "bad tensor offset"))?,
                dtype,
            });
        } else if let Some((k, v)) = line.split_once(": ") {
            header.push((k.to_string(), v.to_string()));
        } else {
            return Err(ContainerError::new(pos as u64, format!("bad header line: {line}")));
        }
    }
    let payload = bytes[pos..].to_vec();
    // validate directory against payload size
    for t in &tensors {
        let end = t.offset + t.rows * t.cols * t.dtype.byte_width();
        if end > payload.len() {
            return Err(ContainerError::new(
                (pos + payload.len()) as u64,
                format!(
                    "payload truncated: tensor {} needs bytes up to {end}, have {}",
                    t.name,
                    payload.len()
                ),
            ));
        }
    }
    Ok(ParsedContainer { header, tensors, payload })
}
