//! CIFAR-10 binary batches: records of one label byte followed by 3072
//! pixel bytes (red, green and blue planes of 32x32).

use std::path::Path;

use super::{byte_to_tanh, tanh_to_byte, LabeledImages, PixelRange};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

const SIDE: usize = 32;
const PIXELS: usize = 3 * SIDE * SIDE;
const RECORD: usize = 1 + PIXELS;

/// Reads one batch file.
pub fn read_cifar10_file(path: &Path) -> Result<LabeledImages<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.is_empty() || bytes.len() % RECORD != 0 {
        return Err(Error::parse(
            path,
            format!("length {} is not a positive multiple of {RECORD}", bytes.len()),
        ));
    }
    let n = bytes.len() / RECORD;
    let name = path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut pixels = Vec::with_capacity(n * PIXELS);
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(RECORD) {
        labels.push(rec[0] as u32);
        pixels.extend(rec[1..].iter().map(|&b| byte_to_tanh::<f32>(b)));
    }
    LabeledImages::new(
        Tensor::new(&[n, 3, SIDE, SIDE], pixels)?,
        labels,
        (0..n).map(|i| format!("{name}:{i}")).collect(),
        PixelRange::Tanh,
    )
}

/// Reads every `data_batch_*.bin` and `test_batch.bin` under `dir`, in
/// sorted file-name order. A path to a single file is read directly.
pub fn read_cifar10(dir: &Path) -> Result<LabeledImages<f32>> {
    if dir.is_file() {
        return read_cifar10_file(dir);
    }
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files: Vec<_> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let n = p.file_name().and_then(|s| s.to_str()).unwrap_or("");
            (n.starts_with("data_batch_") || n == "test_batch.bin") && n.ends_with(".bin")
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::parse(dir, "no data_batch_*.bin or test_batch.bin files"));
    }
    let parts = files
        .iter()
        .map(|p| read_cifar10_file(p))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&LabeledImages<f32>> = parts.iter().collect();
    LabeledImages::concat(&refs)
}

/// Writes `3 x 32 x 32` images in `[-1, 1]` as one batch file.
pub fn write_cifar10<T: Scalar>(data: &LabeledImages<T>, path: &Path) -> Result<()> {
    if data.image_dims() != (3, SIDE, SIDE) {
        return Err(Error::InvalidArgument(format!(
            "CIFAR-10 records are 3x32x32, data is {:?}",
            data.image_dims()
        )));
    }
    let mut out = Vec::with_capacity(data.len() * RECORD);
    for (i, &l) in data.labels.iter().enumerate() {
        let b = u8::try_from(l)
            .map_err(|_| Error::InvalidArgument(format!("label {l} does not fit in a byte")))?;
        out.push(b);
        out.extend(data.images.data()[i * PIXELS..(i + 1) * PIXELS].iter().map(|&v| tanh_to_byte(v)));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_record() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("data_batch_1.bin");
        let mut rec = vec![6u8];
        rec.extend((0..PIXELS).map(|i| (i % 256) as u8));
        std::fs::write(&p, &rec).unwrap();
        let d = read_cifar10(dir.path()).unwrap();
        assert_eq!(d.labels, vec![6]);
        assert_eq!(d.images.shape(), &[1, 3, 32, 32]);
        assert_eq!(d.images.data()[0], -1.0);
        assert_eq!(d.images.data()[255], 1.0);
        assert_eq!(d.images.data()[1024], -1.0);
    }

    #[test]
    fn short_file_is_a_length_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("data_batch_1.bin");
        std::fs::write(&p, vec![0u8; PIXELS]).unwrap();
        assert!(read_cifar10_file(&p).unwrap_err().to_string().contains("3073"));
    }
}
