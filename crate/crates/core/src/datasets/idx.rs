//! IDX files: a big-endian magic word, big-endian `u32` dimension sizes,
//! then unsigned bytes.

use std::path::Path;

use super::{byte_to_tanh, tanh_to_byte, LabeledImages, PixelRange};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| {
            Error::parse(
                path,
                format!("truncated header: need 4 bytes at offset {offset}, file has {}", bytes.len()),
            )
        })
}

/// Returns the dimension sizes and the payload.
fn parse<'a>(bytes: &'a [u8], magic: u32, path: &Path) -> Result<(Vec<usize>, &'a [u8])> {
    let found = be_u32(bytes, 0, path)?;
    if found != magic {
        return Err(Error::parse(
            path,
            format!("bad magic 0x{found:08X} at offset 0, expected 0x{magic:08X}"),
        ));
    }
    let rank = (magic & 0xff) as usize;
    let dims: Vec<usize> = (0..rank)
        .map(|i| be_u32(bytes, 4 + 4 * i, path).map(|d| d as usize))
        .collect::<Result<_>>()?;
    let start = 4 + 4 * rank;
    let expected = start + dims.iter().product::<usize>();
    if bytes.len() != expected {
        return Err(Error::parse(
            path,
            format!(
                "truncated or oversized payload: header implies {expected} bytes, file has {}",
                bytes.len()
            ),
        ));
    }
    Ok((dims, &bytes[start..]))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Reads an IDX image file (`N x H x W`) and its label file. Pixels are
/// scaled to `[-1, 1]`.
pub fn read_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledImages<f32>> {
    let img_bytes = read(images_path)?;
    let lab_bytes = read(labels_path)?;
    let (dims, pixels) = parse(&img_bytes, IMAGES_MAGIC, images_path)?;
    let (ldims, labels) = parse(&lab_bytes, LABELS_MAGIC, labels_path)?;
    let (n, h, w) = (dims[0], dims[1], dims[2]);
    if ldims[0] != n {
        return Err(Error::parse(
            labels_path,
            format!("label count {} does not match image count {n}", ldims[0]),
        ));
    }
    let stem = images_path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    LabeledImages::new(
        Tensor::new(&[n, 1, h, w], pixels.iter().map(|&b| byte_to_tanh(b)).collect())?,
        labels.iter().map(|&l| l as u32).collect(),
        (0..n).map(|i| format!("{stem}:{i}")).collect(),
        PixelRange::Tanh,
    )
}

/// Writes single-channel `[-1, 1]` images and labels in IDX format.
pub fn write_idx<T: Scalar>(data: &LabeledImages<T>, images_path: &Path, labels_path: &Path) -> Result<()> {
    let (c, h, w) = data.image_dims();
    if c != 1 {
        return Err(Error::InvalidArgument(format!("IDX holds one channel, data has {c}")));
    }
    let n = data.len();
    let mut img = Vec::with_capacity(16 + n * h * w);
    img.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    for d in [n, h, w] {
        img.extend_from_slice(&(d as u32).to_be_bytes());
    }
    img.extend(data.images.data().iter().map(|&v| tanh_to_byte(v)));
    let mut lab = Vec::with_capacity(8 + n);
    lab.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(n as u32).to_be_bytes());
    for &l in &data.labels {
        let b = u8::try_from(l)
            .map_err(|_| Error::InvalidArgument(format!("label {l} does not fit in a byte")))?;
        lab.push(b);
    }
    std::fs::write(images_path, img).map_err(|e| Error::io(images_path, e))?;
    std::fs::write(labels_path, lab).map_err(|e| Error::io(labels_path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture(dir: &Path, magic: u32) -> (std::path::PathBuf, std::path::PathBuf) {
        let mut img = magic.to_be_bytes().to_vec();
        for d in [2u32, 2, 2] {
            img.extend_from_slice(&d.to_be_bytes());
        }
        img.extend_from_slice(&[0, 255, 51, 204, 1, 2, 3, 4]);
        let mut lab = LABELS_MAGIC.to_be_bytes().to_vec();
        lab.extend_from_slice(&2u32.to_be_bytes());
        lab.extend_from_slice(&[7, 3]);
        let (ip, lp) = (dir.join("img.idx"), dir.join("lab.idx"));
        std::fs::write(&ip, img).unwrap();
        std::fs::write(&lp, lab).unwrap();
        (ip, lp)
    }

    #[test]
    fn hand_built_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = fixture(dir.path(), IMAGES_MAGIC);
        let d = read_idx(&ip, &lp).unwrap();
        assert_eq!(d.images.shape(), &[2, 1, 2, 2]);
        assert_eq!(d.labels, vec![7, 3]);
        let expect: Vec<f32> = [0u8, 255, 51, 204].iter().map(|&b| b as f32 / 127.5 - 1.0).collect();
        assert_eq!(&d.images.data()[..4], expect.as_slice());
    }

    #[test]
    fn bad_magic_names_offset() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = fixture(dir.path(), 0xDEAD_BEEF);
        let err = read_idx(&ip, &lp).unwrap_err().to_string();
        assert!(err.contains("offset 0") && err.contains("DEADBEEF"), "{err}");
    }

    #[test]
    fn truncation_and_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = fixture(dir.path(), IMAGES_MAGIC);
        let bytes = std::fs::read(&ip).unwrap();
        std::fs::write(&ip, &bytes[..bytes.len() - 1]).unwrap();
        assert!(read_idx(&ip, &lp).unwrap_err().to_string().contains("truncated"));
        std::fs::write(&ip, &bytes).unwrap();
        let mut lab = std::fs::read(&lp).unwrap();
        lab[7] = 3;
        lab.push(0);
        std::fs::write(&lp, lab).unwrap();
        assert!(read_idx(&ip, &lp).unwrap_err().to_string().contains("does not match"));
    }
}
