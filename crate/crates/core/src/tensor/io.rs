//! Tensor wire format: a JSON header line `{"shape":[...],"dtype":"f64"}`
//! followed by the data as little-endian f64.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct Header {
    shape: Vec<usize>,
    dtype: String,
}

pub fn write_tensor<W: Write>(out: &mut W, tensor: &Tensor) -> Result<()> {
    let header = Header { shape: tensor.shape().to_vec(), dtype: "f64".to_string() };
    serde_json::to_writer(&mut *out, &header)?;
    out.write_all(b"\n")?;
    let mut buf = Vec::with_capacity(tensor.len() * 8);
    for v in tensor.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_tensor<R: BufRead>(input: &mut R) -> Result<Tensor> {
    let mut line = Vec::new();
    let n = input.read_until(b'\n', &mut line)?;
    if n == 0 || line.last() != Some(&b'\n') {
        return Err(Error::Load("truncated tensor header".into()));
    }
    let header: Header = serde_json::from_slice(&line[..line.len() - 1])
        .map_err(|e| Error::Load(format!("bad tensor header: {e}")))?;
    if header.dtype != "f64" {
        return Err(Error::Load(format!("unsupported dtype {:?}", header.dtype)));
    }
    let numel: usize = header.shape.iter().product();
    let mut raw = vec![0u8; numel * 8];
    input
        .read_exact(&mut raw)
        .map_err(|_| Error::Load(format!("truncated tensor body for shape {:?}", header.shape)))?;
    let data = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Tensor::new(header.shape, data).map_err(|e| Error::Load(e.to_string()))
}
