//! Dense row-major `f32` tensors plus the two bit-exact interchange formats
//! used by the tools: the `CVT1` binary container and grayscale PFM.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::{Error, Real, Result};

const CVT1_MAGIC: [u8; 4] = *b"CVT1";

/// Dense multi-dimensional array, 32-bit floats, row-major (last index
/// fastest).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::Shape(format!("zero extent in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} wants {n} elements, got {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite value in tensor".into()));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Writes a tensor in the CVT1 container: magic `CVT1`, ndim (u32 LE), each
/// extent (u32 LE), then the payload as f32 LE row-major.
pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&CVT1_MAGIC)?;
    w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
    for &e in &t.shape {
        w.write_all(&(e as u32).to_le_bytes())?;
    }
    for &v in &t.data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let mut r = BufReader::new(File::open(path)?);
    let mut offset = 0u64;
    let mut magic = [0u8; 4];
    read_exact_at(&mut r, &mut magic, &mut offset)?;
    if magic != CVT1_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad magic {magic:?}, expected \"CVT1\""),
        });
    }
    let ndim = read_u32_at(&mut r, &mut offset)? as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let e = read_u32_at(&mut r, &mut offset)? as usize;
        if e == 0 {
            return Err(Error::Format {
                offset: offset - 4,
                message: "zero extent".into(),
            });
        }
        shape.push(e);
    }
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    let mut buf = [0u8; 4];
    for _ in 0..n {
        read_exact_at(&mut r, &mut buf, &mut offset)?;
        data.push(f32::from_le_bytes(buf));
    }
    Tensor::new(shape, data)
}

fn read_exact_at(r: &mut impl Read, buf: &mut [u8], offset: &mut u64) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Format {
                offset: *offset,
                message: "truncated payload".into(),
            }
        } else {
            Error::Io(e)
        }
    })?;
    *offset += buf.len() as u64;
    Ok(())
}

fn read_u32_at(r: &mut impl Read, offset: &mut u64) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact_at(r, &mut buf, offset)?;
    Ok(u32::from_le_bytes(buf))
}

/// Writes a 2D map as grayscale PFM (`Pf`), scale -1.0 (little-endian
/// floats), rows bottom-to-top per the Middlebury convention.
pub fn write_pfm(path: impl AsRef<Path>, map: &Tensor) -> Result<()> {
    if map.shape.len() != 2 {
        return Err(Error::Shape(format!(
            "PFM wants a 2D map, got shape {:?}",
            map.shape
        )));
    }
    let (h, w) = (map.shape[0], map.shape[1]);
    let mut f = BufWriter::new(File::create(path)?);
    write!(f, "Pf\n{w} {h}\n-1.0\n")?;
    for y in (0..h).rev() {
        for x in 0..w {
            f.write_all(&map.data[y * w + x].to_le_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}

pub fn read_pfm(path: impl AsRef<Path>) -> Result<Tensor> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let kind = pfm_token(&bytes, &mut pos)?;
    if kind == "PF" {
        return Err(Error::Format {
            offset: 0,
            message: "color PFM (\"PF\") is unsupported, expected grayscale \"Pf\"".into(),
        });
    }
    if kind != "Pf" {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad PFM header {kind:?}"),
        });
    }
    let w: usize = parse_pfm_num(&bytes, &mut pos)?;
    let h: usize = parse_pfm_num(&bytes, &mut pos)?;
    let scale_tok = pfm_token(&bytes, &mut pos)?;
    let scale: f32 = scale_tok.parse().map_err(|_| Error::Format {
        offset: pos as u64,
        message: format!("bad scale {scale_tok:?}"),
    })?;
    let little_endian = scale < 0.0;
    let n = w * h;
    if bytes.len() < pos + 4 * n {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            message: "truncated payload".into(),
        });
    }
    let mut data = vec![0.0f32; n];
    for row in 0..h {
        let y = h - 1 - row; // stored bottom-to-top
        for x in 0..w {
            let b: [u8; 4] = bytes[pos..pos + 4].try_into().unwrap();
            data[y * w + x] = if little_endian {
                f32::from_le_bytes(b)
            } else {
                f32::from_be_bytes(b)
            };
            pos += 4;
        }
    }
    Tensor::new(vec![h, w], data)
}

fn pfm_token(bytes: &[u8], pos: &mut usize) -> Result<String> {
    while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Format {
            offset: start as u64,
            message: "truncated header".into(),
        });
    }
    let tok = String::from_utf8_lossy(&bytes[start..*pos]).into_owned();
    // consume the single whitespace terminating the token
    if *pos < bytes.len() {
        *pos += 1;
    }
    Ok(tok)
}

fn parse_pfm_num(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    let at = *pos as u64;
    let tok = pfm_token(bytes, pos)?;
    tok.parse().map_err(|_| Error::Format {
        offset: at,
        message: format!("bad dimension {tok:?}"),
    })
}

/// C-channel 2D feature grid for one view at one scale.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T: Real> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    data: Vec<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![T::zero(); channels * height * width],
        }
    }

    pub fn from_data(channels: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "feature map {channels}x{height}x{width} wants {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut T {
        &mut self.data[(c * self.height + y) * self.width + x]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn cast<U: Real>(&self) -> FeatureMap<U> {
        FeatureMap {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .map(|&v| U::from_f64(v.to_f64().unwrap()))
                .collect(),
        }
    }
}

impl FeatureMap<f32> {
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.channels, self.height, self.width],
            self.data.clone(),
        )
        .expect("feature map is always a valid tensor")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match *t.shape() {
            [c, h, w] => Self::from_data(c, h, w, t.data().to_vec()),
            [h, w] => Self::from_data(1, h, w, t.data().to_vec()),
            _ => Err(Error::Shape(format!(
                "feature map wants a 2D or 3D tensor, got {:?}",
                t.shape()
            ))),
        }
    }
}

/// Per-channel 2x2 mean pooling; both spatial extents must be even.
pub fn avg_pool2<T: Real>(f: &FeatureMap<T>) -> Result<FeatureMap<T>> {
    if f.height % 2 != 0 || f.width % 2 != 0 {
        return Err(Error::Shape(format!(
            "avg_pool2 wants even extents, got {}x{}",
            f.height, f.width
        )));
    }
    let (oh, ow) = (f.height / 2, f.width / 2);
    let quarter = T::from_f64(0.25);
    let mut out = FeatureMap::zeros(f.channels, oh, ow);
    for c in 0..f.channels {
        for y in 0..oh {
            for x in 0..ow {
                let s = f.at(c, 2 * y, 2 * x)
                    + f.at(c, 2 * y, 2 * x + 1)
                    + f.at(c, 2 * y + 1, 2 * x)
                    + f.at(c, 2 * y + 1, 2 * x + 1);
                *out.at_mut(c, y, x) = s * quarter;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use tempfile::tempdir;

    #[test]
    fn cvt1_round_trip() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("t.cvt1");
        let t = Tensor::new(vec![2, 3], (0..6).map(|v| v as f32).collect()).unwrap();
        write_tensor(&p, &t).unwrap();
        assert_eq!(read_tensor(&p).unwrap(), t);
    }

    #[test]
    fn cvt1_scalar_file_size() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("s.cvt1");
        let t = Tensor::new(vec![1], vec![3.5]).unwrap();
        write_tensor(&p, &t).unwrap();
        assert_eq!(std::fs::metadata(&p).unwrap().len(), 16);
    }

    #[test]
    fn cvt1_bad_magic() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("bad.cvt1");
        std::fs::write(&p, b"XXXX\x01\x00\x00\x00\x01\x00\x00\x00\x00\x00\x00\x00").unwrap();
        match read_tensor(&p) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn cvt1_truncated_names_offset() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("trunc.cvt1");
        // header claims a [2] tensor but only one float follows
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"CVT1");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        std::fs::write(&p, &bytes).unwrap();
        match read_tensor(&p) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 16),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn pfm_round_trip_1x1() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("one.pfm");
        let t = Tensor::new(vec![1, 1], vec![7.0]).unwrap();
        write_pfm(&p, &t).unwrap();
        assert_eq!(read_pfm(&p).unwrap(), t);
    }

    #[test]
    fn pfm_rows_stored_bottom_up() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("two.pfm");
        let t = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        write_pfm(&p, &t).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        let payload = &bytes[bytes.len() - 16..];
        // last written float row is the top image row
        let last_row: Vec<f32> = payload[8..]
            .chunks(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        assert_eq!(last_row, vec![1.0, 2.0]);
        assert_eq!(read_pfm(&p).unwrap(), t);
    }

    #[test]
    fn pfm_rejects_color() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("color.pfm");
        std::fs::write(&p, b"PF\n1 1\n-1.0\n\x00\x00\x00\x00").unwrap();
        assert!(matches!(read_pfm(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn avg_pool2_block_means() {
        let f = FeatureMap::from_data(1, 2, 2, vec![1.0f32, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(avg_pool2(&f).unwrap().data(), &[1.0]);

        let f = FeatureMap::from_data(1, 2, 2, vec![0.0f32, 2.0, 4.0, 6.0]).unwrap();
        assert_eq!(avg_pool2(&f).unwrap().data(), &[3.0]);

        let f = FeatureMap::from_data(1, 4, 4, (0..16).map(|v| v as f32).collect()).unwrap();
        assert_eq!(avg_pool2(&f).unwrap().data(), &[2.5, 4.5, 10.5, 12.5]);
    }

    #[test]
    fn avg_pool2_rejects_odd() {
        let f = FeatureMap::<f32>::zeros(1, 3, 4);
        assert!(matches!(avg_pool2(&f), Err(Error::Shape(_))));
    }

    proptest! {
        #[test]
        fn cvt1_round_trip_any(values in prop::collection::vec(-1e6f32..1e6, 1..64)) {
            let dir = tempdir().unwrap();
            let p = dir.path().join("prop.cvt1");
            let n = values.len();
            let t = Tensor::new(vec![n], values).unwrap();
            write_tensor(&p, &t).unwrap();
            let back = read_tensor(&p).unwrap();
            prop_assert_eq!(&back, &t);
            // byte-for-byte identical on re-write
            let p2 = dir.path().join("prop2.cvt1");
            write_tensor(&p2, &back).unwrap();
            prop_assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&p2).unwrap());
        }

        #[test]
        fn avg_pool2_preserves_mean(values in prop::collection::vec(-100.0f32..100.0, 16)) {
            let f = FeatureMap::from_data(1, 4, 4, values).unwrap();
            let pooled = avg_pool2(&f).unwrap();
            let m_in: f32 = f.data().iter().sum::<f32>() / 16.0;
            let m_out: f32 = pooled.data().iter().sum::<f32>() / 4.0;
            prop_assert!((m_in - m_out).abs() < 1e-4);
        }
    }
}
