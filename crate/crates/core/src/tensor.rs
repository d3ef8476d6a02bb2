//! Dense row-major `f64` tensors and the binary dump format.
//!
//! A [`Tensor`] is a plain value. Participation in gradient computation is
//! handled by [`crate::autodiff::Tape`], which wraps tensors into
//! [`crate::autodiff::Var`] handles.

use std::io::{Read, Write};

use crate::error::{Result, VineError};

pub const DUMP_MAGIC: &[u8; 4] = b"VINE";
pub const DUMP_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.contains(&0) || n != data.len() {
            return Err(VineError::InvalidArgument(format!(
                "shape {shape:?} does not hold {} elements",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(crate::error::shape_err("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Element at a multi-index (row-major).
    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| {
                debug_assert!(i < d);
                acc * d + i
            })
    }

    pub fn write_dump<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(DUMP_MAGIC)?;
        w.write_all(&DUMP_VERSION.to_le_bytes())?;
        let rank = u16::try_from(self.shape.len())
            .map_err(|_| VineError::InvalidArgument("tensor rank exceeds u16".into()))?;
        w.write_all(&rank.to_le_bytes())?;
        for &d in &self.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &x in &self.data {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_dump<R: Read>(r: &mut R) -> Result<Self> {
        let bad = |msg: &str| VineError::Format {
            what: "tensor dump",
            msg: msg.to_string(),
        };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != DUMP_MAGIC {
            return Err(bad("bad magic"));
        }
        let mut b2 = [0u8; 2];
        r.read_exact(&mut b2)?;
        let version = u16::from_le_bytes(b2);
        if version != DUMP_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        r.read_exact(&mut b2)?;
        let rank = u16::from_le_bytes(b2) as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut b8 = [0u8; 8];
        for _ in 0..rank {
            r.read_exact(&mut b8)?;
            let d = usize::try_from(u64::from_le_bytes(b8)).map_err(|_| bad("dimension overflow"))?;
            shape.push(d);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| bad("element count overflow"))?;
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut b8)?;
            data.push(f64::from_le_bytes(b8));
        }
        Tensor::new(&shape, data).map_err(|e| bad(&e.to_string()))
    }

    pub fn to_dump_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(8 + 8 * self.shape.len() + 8 * self.data.len());
        self.write_dump(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}
