//! Dense `[batch, channels, bins, frames]` tensors and the per-item frame
//! validity mask.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::CoreError;
use crate::scalar::Scalar;

/// Shape of a 4-D tensor: `[b, c, h, w]` = `[batch, channels, mel-bins, frames]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub b: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(b: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { b, c, h, w }
    }

    pub fn len(&self) -> usize {
        self.b * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl core::fmt::Display for Shape {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "[{}, {}, {}, {}]", self.b, self.c, self.h, self.w)
    }
}

/// Row-major dense tensor. Feature maps (x0, x_t, mu, network outputs) are
/// `[B, C, F, N]`; spectrogram roles use C = 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![T::zero(); shape.len()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self, CoreError> {
        if data.len() != shape.len() {
            return Err(CoreError::ShapeMismatch {
                what: "data length does not match shape",
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn idx(&self, b: usize, c: usize, h: usize, w: usize) -> usize {
        ((b * self.shape.c + c) * self.shape.h + h) * self.shape.w + w
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.idx(b, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, c: usize, h: usize, w: usize, v: T) {
        let i = self.idx(b, c, h, w);
        self.data[i] = v;
    }

    /// Contiguous `[h, w]` plane for one (batch, channel) pair.
    pub fn plane(&self, b: usize, c: usize) -> &[T] {
        let hw = self.shape.h * self.shape.w;
        let start = (b * self.shape.c + c) * hw;
        &self.data[start..start + hw]
    }

    pub fn plane_mut(&mut self, b: usize, c: usize) -> &mut [T] {
        let hw = self.shape.h * self.shape.w;
        let start = (b * self.shape.c + c) * hw;
        &mut self.data[start..start + hw]
    }

    /// Copy of batch item `b` as a tensor with B = 1.
    pub fn item(&self, b: usize) -> Tensor<T> {
        let per = self.shape.c * self.shape.h * self.shape.w;
        let start = b * per;
        Tensor {
            shape: Shape::new(1, self.shape.c, self.shape.h, self.shape.w),
            data: self.data[start..start + per].to_vec(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// self + scale * other, elementwise.
    pub fn add_scaled(&self, other: &Tensor<T>, scale: T) -> Result<Tensor<T>, CoreError> {
        if self.shape != other.shape {
            return Err(CoreError::ShapeMismatch {
                what: "add_scaled operands",
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a + scale * b)
            .collect();
        Ok(Tensor {
            shape: self.shape,
            data,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |acc, &x| acc.max(x.abs()))
    }

    /// Widen/narrow the element type; used when moving checkpoints across
    /// precision modes is explicitly requested.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&x| U::from_f64(x.as_f64())).collect(),
        }
    }
}

/// Per-batch-item frame validity. Row `b` is valid on frames `0..lens[b]`
/// and padding after that, which encodes the prefix-of-ones mask invariant
/// by construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameMask {
    lens: Vec<usize>,
    frames: usize,
}

impl FrameMask {
    pub fn new(lens: Vec<usize>, frames: usize) -> Result<Self, CoreError> {
        if lens.is_empty() {
            return Err(CoreError::InvalidArgument("mask needs at least one row".into()));
        }
        for (b, &len) in lens.iter().enumerate() {
            if len == 0 {
                return Err(CoreError::InvalidArgument(alloc::format!(
                    "mask row {b} has no valid frames"
                )));
            }
            if len > frames {
                return Err(CoreError::InvalidArgument(alloc::format!(
                    "mask row {b} length {len} exceeds {frames} frames"
                )));
            }
        }
        Ok(FrameMask { lens, frames })
    }

    /// All frames valid for every item.
    pub fn full(batch: usize, frames: usize) -> Self {
        FrameMask {
            lens: vec![frames; batch],
            frames,
        }
    }

    pub fn batch(&self) -> usize {
        self.lens.len()
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn len_of(&self, b: usize) -> usize {
        self.lens[b]
    }

    pub fn lens(&self) -> &[usize] {
        &self.lens
    }

    /// Total number of valid frames across the batch (the mask sum).
    pub fn valid_frames(&self) -> usize {
        self.lens.iter().sum()
    }

    pub fn item(&self, b: usize) -> FrameMask {
        FrameMask {
            lens: vec![self.lens[b]],
            frames: self.frames,
        }
    }

    /// Mask at the next coarser U-Net level: frame j of the coarse grid
    /// covers fine frames 2j and 2j+1, so ceil(len/2) coarse frames touch
    /// valid input.
    pub fn downsample(&self) -> FrameMask {
        FrameMask {
            lens: self.lens.iter().map(|&l| l.div_ceil(2)).collect(),
            frames: self.frames.div_ceil(2),
        }
    }

    /// Same lengths over a wider padded frame axis.
    pub fn with_frames(&self, frames: usize) -> Result<FrameMask, CoreError> {
        FrameMask::new(self.lens.clone(), frames)
    }

    /// Binary `[B, N]` view (1 valid, 0 padding).
    pub fn to_binary<T: Scalar>(&self) -> Tensor<T> {
        let mut t = Tensor::zeros(Shape::new(self.batch(), 1, 1, self.frames));
        for (b, &len) in self.lens.iter().enumerate() {
            for j in 0..len {
                t.set(b, 0, 0, j, T::one());
            }
        }
        t
    }

    /// Zero every entry on padded frames, all channels and bins.
    pub fn zero_padding<T: Scalar>(&self, t: &mut Tensor<T>) {
        let shape = t.shape();
        debug_assert_eq!(shape.b, self.batch());
        debug_assert_eq!(shape.w, self.frames);
        for b in 0..shape.b {
            let len = self.lens[b];
            if len == shape.w {
                continue;
            }
            for c in 0..shape.c {
                for h in 0..shape.h {
                    let row = t.idx(b, c, h, 0);
                    for v in &mut t.data_mut()[row + len..row + shape.w] {
                        *v = T::zero();
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn indexing_is_row_major() {
        let mut t = Tensor::<f64>::zeros(Shape::new(2, 3, 4, 5));
        t.set(1, 2, 3, 4, 7.0);
        assert_eq!(t.data()[t.idx(1, 2, 3, 4)], 7.0);
        assert_eq!(t.idx(0, 0, 0, 1), 1);
        assert_eq!(t.idx(0, 0, 1, 0), 5);
        assert_eq!(t.idx(0, 1, 0, 0), 20);
        assert_eq!(t.idx(1, 0, 0, 0), 60);
    }

    #[test]
    fn mask_rejects_empty_rows() {
        assert!(FrameMask::new(vec![3, 0], 4).is_err());
        assert!(FrameMask::new(vec![5], 4).is_err());
        assert!(FrameMask::new(vec![], 4).is_err());
        assert!(FrameMask::new(vec![4, 1], 4).is_ok());
    }

    #[test]
    fn mask_downsample_takes_ceil() {
        let m = FrameMask::new(vec![5, 6, 1], 8).unwrap();
        let d = m.downsample();
        assert_eq!(d.lens(), &[3, 3, 1]);
        assert_eq!(d.frames(), 4);
    }

    #[test]
    fn zero_padding_clears_only_padding() {
        let m = FrameMask::new(vec![2], 4).unwrap();
        let mut t = Tensor::full(Shape::new(1, 2, 3, 4), 1.5f64);
        m.zero_padding(&mut t);
        for c in 0..2 {
            for h in 0..3 {
                assert_eq!(t.at(0, c, h, 0), 1.5);
                assert_eq!(t.at(0, c, h, 1), 1.5);
                assert_eq!(t.at(0, c, h, 2), 0.0);
                assert_eq!(t.at(0, c, h, 3), 0.0);
            }
        }
    }

    #[test]
    fn item_slices_one_batch_entry() {
        let mut t = Tensor::<f64>::zeros(Shape::new(2, 1, 2, 2));
        t.set(1, 0, 1, 1, 9.0);
        let it = t.item(1);
        assert_eq!(it.shape(), Shape::new(1, 1, 2, 2));
        assert_eq!(it.at(0, 0, 1, 1), 9.0);
    }
}
