//! Dense n-dimensional tensor and the `MMT1` binary file format.

use std::io::{Read, Write};
use std::path::Path;

use crate::elem::Element;
use crate::error::{Error, Result};

/// Dense row-major tensor of real values.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<E: Element> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Element> Tensor<E> {
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("zero extent in shape {shape:?}")));
        }
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![E::ZERO; numel],
        }
    }

    pub fn filled(shape: Vec<usize>, value: E) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: E) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_f64_slice(shape: Vec<usize>, values: &[f64]) -> Result<Self> {
        Tensor::new(shape, values.iter().map(|&v| E::from_f64(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    /// Reinterprets the tensor under a new shape with the same element count.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} ({} elements) to {:?}",
                self.shape,
                self.data.len(),
                shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row-major linear offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut off = 0;
        for (i, &ix) in index.iter().enumerate() {
            debug_assert!(ix < self.shape[i]);
            off = off * self.shape[i] + ix;
        }
        off
    }

    pub fn at(&self, index: &[usize]) -> E {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: E) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    pub fn map_to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64()).collect()
    }

    /// Casts element type, rounding through the target precision.
    pub fn cast<F: Element>(&self) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| F::from_f64(v.to_f64())).collect(),
        }
    }
}

const MMT1_MAGIC: &[u8; 4] = b"MMT1";

/// Writes a tensor in the `MMT1` format: magic, u32 LE rank, u32 LE extents,
/// then row-major f32 LE payload.
pub fn write_mmt1<E: Element, W: Write>(w: &mut W, t: &Tensor<E>) -> Result<()> {
    w.write_all(MMT1_MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&(v.to_f64() as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_mmt1<E: Element, R: Read>(r: &mut R) -> Result<Tensor<E>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MMT1_MAGIC {
        return Err(Error::Parse(format!("bad MMT1 magic {magic:?}")));
    }
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4)?;
    let rank = u32::from_le_bytes(buf4) as usize;
    if rank == 0 || rank > 8 {
        return Err(Error::Parse(format!("unreasonable MMT1 rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        r.read_exact(&mut buf4)?;
        shape.push(u32::from_le_bytes(buf4) as usize);
    }
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    for _ in 0..numel {
        r.read_exact(&mut buf4)?;
        data.push(E::from_f64(f32::from_le_bytes(buf4) as f64));
    }
    Tensor::new(shape, data)
}

pub fn save_mmt1<E: Element>(path: &Path, t: &Tensor<E>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_mmt1(&mut f, t)
}

pub fn load_mmt1<E: Element>(path: &Path) -> Result<Tensor<E>> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_mmt1(&mut f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_data_length_must_agree() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn offset_is_row_major() {
        let t = Tensor::<f64>::new(vec![2, 3, 4], (0..24).map(|i| i as f64).collect()).unwrap();
        assert_eq!(t.at(&[0, 0, 0]), 0.0);
        assert_eq!(t.at(&[1, 2, 3]), 23.0);
        assert_eq!(t.at(&[1, 0, 2]), 14.0);
    }

    #[test]
    fn mmt1_round_trip() {
        let t = Tensor::<f64>::new(vec![2, 3], vec![0.5, -1.0, 2.25, 0.0, 3.5, -0.125]).unwrap();
        let mut buf = Vec::new();
        write_mmt1(&mut buf, &t).unwrap();
        // magic + rank + 2 extents + 6 floats
        assert_eq!(buf.len(), 4 + 4 + 8 + 24);
        assert_eq!(&buf[..4], b"MMT1");
        let back: Tensor<f64> = read_mmt1(&mut buf.as_slice()).unwrap();
        assert_eq!(back.shape(), &[2, 3]);
        assert_eq!(back.data(), t.data());
    }

    #[test]
    fn mmt1_rejects_bad_magic() {
        let buf = b"XXXX\x01\x00\x00\x00\x01\x00\x00\x00\x00\x00\x80\x3f".to_vec();
        assert!(read_mmt1::<f64, _>(&mut buf.as_slice()).is_err());
    }
}
