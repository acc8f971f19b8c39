//! Dataset files: one JSON header line, then the image block as little-endian
//! f64, then one little-endian u32 label per record.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, MetricKind, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Serialize, Deserialize)]
struct Header {
    name: String,
    shape: Vec<usize>,
    class_count: usize,
    metric_kind: MetricKind,
    split: Split,
    #[serde(default)]
    orientation_sensitive: bool,
}

pub fn write_dataset<W: Write>(out: &mut W, ds: &Dataset) -> Result<()> {
    let header = Header {
        name: ds.name.clone(),
        shape: ds.images.shape().to_vec(),
        class_count: ds.class_count,
        metric_kind: ds.metric_kind,
        split: ds.split,
        orientation_sensitive: ds.orientation_sensitive,
    };
    serde_json::to_writer(&mut *out, &header)?;
    out.write_all(b"\n")?;
    let mut buf = Vec::with_capacity(ds.images.len() * 8 + ds.labels.len() * 4);
    for v in ds.images.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for &y in &ds.labels {
        buf.extend_from_slice(&(y as u32).to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_dataset<R: BufRead>(input: &mut R) -> Result<Dataset> {
    let mut line = Vec::new();
    input.read_until(b'\n', &mut line)?;
    let Some(json) = line.strip_suffix(b"\n") else {
        return Err(Error::Load("missing header line".into()));
    };
    let header: Header = serde_json::from_slice(json).map_err(|e| Error::Load(format!("bad header: {e}")))?;
    if header.shape.len() != 4 || header.shape.contains(&0) {
        return Err(Error::Load(format!("header shape {:?} is not a non-empty [N,C,H,W]", header.shape)));
    }
    let n = header.shape[0];
    let per_image: usize = header.shape[1..].iter().product();
    let mut raw = vec![0u8; n * per_image * 8];
    input
        .read_exact(&mut raw)
        .map_err(|_| Error::Load(format!("image block shorter than header shape {:?}", header.shape)))?;
    let data: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    let mut raw_labels = vec![0u8; n * 4];
    input
        .read_exact(&mut raw_labels)
        .map_err(|_| Error::Load(format!("label block shorter than {n} records")))?;
    let mut extra = [0u8; 1];
    if input.read(&mut extra)? != 0 {
        return Err(Error::Load("trailing bytes after label block".into()));
    }
    let labels: Vec<usize> = raw_labels
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    for (i, &y) in labels.iter().enumerate() {
        if y >= header.class_count {
            return Err(Error::Load(format!(
                "record {i}: label {y} outside [0, {})",
                header.class_count
            )));
        }
    }
    for (i, img) in data.chunks_exact(per_image).enumerate() {
        if img.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Load(format!("record {i}: pixel value outside [0, 1]")));
        }
    }
    let images = Tensor::new(header.shape, data).map_err(|e| Error::Load(e.to_string()))?;
    let ds = Dataset::new(header.name, images, labels, header.split, header.metric_kind, header.class_count)
        .map_err(|e| Error::Load(e.to_string()))?;
    Ok(ds.with_orientation_sensitive(header.orientation_sensitive))
}

pub fn save(ds: &Dataset, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_dataset(&mut buf, ds)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.display().to_string()),
        _ => Error::Io(e),
    })?;
    read_dataset(&mut BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        let images = Tensor::from_fn(&[4, 1, 2, 2], |i| i as f64 / 16.0);
        Dataset::new("tiny", images, vec![0, 1, 2, 1], Split::Train, MetricKind::MeanPerClass, 3).unwrap()
    }

    #[test]
    fn round_trip_preserves_hash() {
        let ds = tiny();
        let mut buf = Vec::new();
        write_dataset(&mut buf, &ds).unwrap();
        let back = read_dataset(&mut buf.as_slice()).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.content_hash(), ds.content_hash());
    }

    #[test]
    fn label_equal_to_class_count_names_the_record() {
        let ds = tiny();
        let mut buf = Vec::new();
        write_dataset(&mut buf, &ds).unwrap();
        let n = buf.len();
        buf[n - 4..].copy_from_slice(&3u32.to_le_bytes());
        let err = read_dataset(&mut buf.as_slice()).unwrap_err();
        assert!(matches!(err, Error::Load(_)));
        assert!(err.to_string().contains("record 3"), "{err}");
    }

    #[test]
    fn short_body_is_a_load_error() {
        let ds = tiny();
        let mut buf = Vec::new();
        write_dataset(&mut buf, &ds).unwrap();
        buf.truncate(buf.len() - 5);
        assert!(matches!(read_dataset(&mut buf.as_slice()), Err(Error::Load(_))));
    }
}
