//! Dense 64-bit tensors, their binary file format, and the small value
//! types built on top of them.
//!
//! A [`Tensor`] is an n-dimensional array of `f64` in row-major order.
//! Shapes are validated on construction: every dimension must be positive
//! and the element count must fit in memory. All public constructors that
//! accept external data also reject non-finite values, so a tensor obtained
//! from a file or a caller-supplied buffer is always finite; the numeric
//! kernels in this crate preserve finiteness on finite input.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Magic bytes opening every binary tensor file.
pub const TENSOR_MAGIC: &[u8; 8] = b"SCASTNSR";

/// An n-dimensional row-major array of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// A tensor of the given shape with every element set to `fill`.
    ///
    /// Errors if the shape is empty, any dimension is zero, the element
    /// count overflows, or `fill` is not finite.
    pub fn new(shape: &[usize], fill: f64) -> Result<Self> {
        let len = checked_len(shape)?;
        if !fill.is_finite() {
            return Err(Error::Shape(format!("non-finite fill value {fill}")));
        }
        Ok(Tensor { shape: shape.to_vec(), data: vec![fill; len] })
    }

    /// An all-zero tensor of the given shape.
    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Tensor::new(shape, 0.0)
    }

    /// An all-zero tensor with the same shape as `other`.
    pub fn zeros_like(other: &Tensor) -> Self {
        Tensor { shape: other.shape.clone(), data: vec![0.0; other.data.len()] }
    }

    /// Wraps an existing buffer. The buffer length must match the shape
    /// and every element must be finite.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let len = checked_len(shape)?;
        if data.len() != len {
            return Err(Error::Shape(format!(
                "data length {} does not match shape {:?} (expected {})",
                data.len(),
                shape,
                len
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Shape(format!("non-finite element {bad} in tensor data")));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    /// The shape as a slice of dimensions.
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// Total number of elements.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    /// True if the tensor has no elements (never, by construction).
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Read-only view of the elements in row-major order.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable view of the elements in row-major order.
    ///
    /// Callers must keep the elements finite; the numeric kernels assume it.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// The shape as `(n, c, h, w)`, erroring unless the rank is 4.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape.as_slice() {
            &[n, c, h, w] => Ok((n, c, h, w)),
            s => Err(Error::Shape(format!("expected rank-4 tensor, got shape {s:?}"))),
        }
    }

    /// The shape as `(c, h, w)`, erroring unless the rank is 3.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            &[c, h, w] => Ok((c, h, w)),
            s => Err(Error::Shape(format!("expected rank-3 tensor, got shape {s:?}"))),
        }
    }

    /// The same elements under a different shape with equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let wanted: usize = shape.iter().product();
        if wanted != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} ({} elements) to {shape:?} ({wanted} elements)",
                self.shape,
                self.data.len()
            )));
        }
        Tensor::from_vec(shape, self.data.clone())
    }

    /// Element accessor for rank-4 tensors (test/debug convenience).
    pub fn at4(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        let (_, cs, hs, ws) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        self.data[((n * cs + c) * hs + y) * ws + x]
    }

    /// True if every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Writes the tensor to `path` in the binary tensor format: the magic
    /// bytes, a little-endian `u32` rank, one little-endian `u32` per
    /// dimension, then the elements as little-endian `f64` in row-major
    /// order.
    pub fn write_file(&self, path: &Path) -> Result<()> {
        for &d in &self.shape {
            if d > u32::MAX as usize {
                return Err(Error::Shape(format!("dimension {d} exceeds format limit")));
            }
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut emit = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
        emit(TENSOR_MAGIC)?;
        emit(&(self.shape.len() as u32).to_le_bytes())?;
        for &d in &self.shape {
            emit(&(d as u32).to_le_bytes())?;
        }
        for v in &self.data {
            emit(&v.to_le_bytes())?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads a tensor written by [`Tensor::write_file`], validating the
    /// magic bytes, the shape, the payload length and finiteness.
    pub fn read_file(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);

        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic, path)?;
        if &magic != TENSOR_MAGIC {
            return Err(Error::format(path, "bad magic bytes (not a tensor file)"));
        }

        let rank = read_u32(&mut r, path)? as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::format(path, format!("unreasonable rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r, path)? as usize);
        }
        let len = checked_len(&shape).map_err(|e| Error::format(path, e.to_string()))?;

        let mut data = vec![0.0f64; len];
        let mut buf = [0u8; 8];
        for v in data.iter_mut() {
            read_exact(&mut r, &mut buf, path)?;
            *v = f64::from_le_bytes(buf);
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing).map_err(|e| Error::io(path, e))? != 0 {
            return Err(Error::format(path, "trailing bytes after tensor payload"));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::format(path, format!("non-finite element {bad}")));
        }
        Ok(Tensor { shape, data })
    }
}

/// Element count of a shape, validating positivity and overflow.
fn checked_len(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::Shape("empty shape".into()));
    }
    let mut len: usize = 1;
    for &d in shape {
        if d == 0 {
            return Err(Error::Shape(format!("zero dimension in shape {shape:?}")));
        }
        len = len
            .checked_mul(d)
            .ok_or_else(|| Error::Shape(format!("element count overflow for shape {shape:?}")))?;
    }
    Ok(len)
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], path: &Path) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::format(path, "truncated tensor file")
        } else {
            Error::io(path, e)
        }
    })
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf, path)?;
    Ok(u32::from_le_bytes(buf))
}

/// Element-wise sum of two tensors of identical shape.
pub fn elementwise_sum(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape != b.shape {
        return Err(Error::Shape(format!(
            "elementwise sum of mismatched shapes {:?} and {:?}",
            a.shape, b.shape
        )));
    }
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
    Ok(Tensor { shape: a.shape.clone(), data })
}

/// A parameter tensor paired with its gradient accumulator.
///
/// The gradient always has the same shape as the value and starts at zero;
/// backward passes add into it, so a parameter feeding several consumers
/// receives the sum of their contributions.
#[derive(Debug, Clone)]
pub struct GradPair {
    /// The parameter value.
    pub value: Tensor,
    /// Accumulated gradient of the loss with respect to `value`.
    pub grad: Tensor,
}

impl GradPair {
    /// Wraps a value with a zeroed gradient of the same shape.
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros_like(&value);
        GradPair { value, grad }
    }

    /// Adds `g` into the accumulated gradient.
    pub fn accumulate(&mut self, g: &Tensor) -> Result<()> {
        if g.shape != self.grad.shape {
            return Err(Error::Shape(format!(
                "gradient shape {:?} does not match parameter shape {:?}",
                g.shape, self.grad.shape
            )));
        }
        for (acc, v) in self.grad.data.iter_mut().zip(&g.data) {
            *acc += v;
        }
        Ok(())
    }

    /// Resets the accumulated gradient to zero.
    pub fn zero_grad(&mut self) {
        self.grad.data.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// A dense map of class indices, one `u8` per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    /// A label map filled with a single class.
    pub fn new(height: usize, width: usize, fill: u8) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("empty label map {height}x{width}")));
        }
        Ok(LabelMap { height, width, data: vec![fill; height * width] })
    }

    /// Wraps an existing row-major buffer of class indices.
    pub fn from_vec(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("empty label map {height}x{width}")));
        }
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "label data length {} does not match {height}x{width}",
                data.len()
            )));
        }
        Ok(LabelMap { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Class index at `(y, x)`.
    pub fn at(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    /// Sets the class index at `(y, x)`.
    pub fn set(&mut self, y: usize, x: usize, class: u8) {
        self.data[y * self.width + x] = class;
    }

    /// Row-major view of all class indices.
    pub fn data(&self) -> &[u8] {
        &self.data
    }

    /// Counts pixels per class index up to `classes`, erroring on any pixel
    /// whose class is out of range.
    pub fn histogram(&self, classes: usize) -> Result<Vec<u64>> {
        let mut hist = vec![0u64; classes];
        for &c in &self.data {
            let c = c as usize;
            if c >= classes {
                return Err(Error::Shape(format!(
                    "label {c} out of range for {classes} classes"
                )));
            }
            hist[c] += 1;
        }
        Ok(hist)
    }
}
