use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense rank-5 tensor in (batch, channel, depth, height, width) order,
/// stored row-major so a single (b, c) channel is one contiguous slab.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume5<T> {
    shape: [usize; 5],
    data: Vec<T>,
}

pub fn numel(shape: [usize; 5]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Volume5<T> {
    pub fn new(shape: [usize; 5], data: Vec<T>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::shape(
                "Volume5::new",
                format!("shape {:?} holds {} elements, got {}", shape, numel(shape), data.len()),
            ));
        }
        Ok(Volume5 { shape, data })
    }

    pub fn zeros(shape: [usize; 5]) -> Self {
        Volume5 { shape, data: vec![T::ZERO; numel(shape)] }
    }

    pub fn full(shape: [usize; 5], value: T) -> Self {
        Volume5 { shape, data: vec![value; numel(shape)] }
    }

    /// Scalar wrapped as a [1,1,1,1,1] volume.
    pub fn scalar(value: T) -> Self {
        Volume5 { shape: [1, 1, 1, 1, 1], data: vec![value] }
    }

    pub fn from_fn(shape: [usize; 5], mut f: impl FnMut(usize) -> T) -> Self {
        let n = numel(shape);
        let data = (0..n).map(|i| f(i)).collect();
        Volume5 { shape, data }
    }

    pub fn shape(&self) -> [usize; 5] {
        self.shape
    }

    /// (batch, channels, depth, height, width)
    pub fn dims(&self) -> (usize, usize, usize, usize, usize) {
        let [b, c, d, h, w] = self.shape;
        (b, c, d, h, w)
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    /// Voxels per channel slab (depth * height * width).
    pub fn spatial_len(&self) -> usize {
        self.shape[2] * self.shape[3] * self.shape[4]
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    pub fn index_of(&self, b: usize, c: usize, d: usize, h: usize, w: usize) -> usize {
        debug_assert!(
            b < self.shape[0]
                && c < self.shape[1]
                && d < self.shape[2]
                && h < self.shape[3]
                && w < self.shape[4]
        );
        (((b * self.shape[1] + c) * self.shape[2] + d) * self.shape[3] + h) * self.shape[4] + w
    }

    pub fn at(&self, b: usize, c: usize, d: usize, h: usize, w: usize) -> T {
        self.data[self.index_of(b, c, d, h, w)]
    }

    pub fn at_mut(&mut self, b: usize, c: usize, d: usize, h: usize, w: usize) -> &mut T {
        let i = self.index_of(b, c, d, h, w);
        &mut self.data[i]
    }

    /// Contiguous slab of one (batch, channel) pair.
    pub fn channel(&self, b: usize, c: usize) -> &[T] {
        let n = self.spatial_len();
        let start = (b * self.shape[1] + c) * n;
        &self.data[start..start + n]
    }

    pub fn channel_mut(&mut self, b: usize, c: usize) -> &mut [T] {
        let n = self.spatial_len();
        let start = (b * self.shape[1] + c) * n;
        &mut self.data[start..start + n]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Volume5 { shape: self.shape, data: self.data.iter().map(|&x| f(x)).collect() }
    }

    /// Elementwise combination of two identically shaped volumes.
    pub fn zip_with(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "Volume5::zip_with",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Volume5 { shape: self.shape, data })
    }

    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|x| !x.is_finite())
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshaped(&self, shape: [usize; 5]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(Error::shape(
                "Volume5::reshaped",
                format!("cannot view {:?} as {:?}", self.shape, shape),
            ));
        }
        Ok(Volume5 { shape, data: self.data.clone() })
    }

    /// Lossy precision change; exact when widening f32 -> f64.
    pub fn cast<U: Scalar>(&self) -> Volume5<U> {
        Volume5 { shape: self.shape, data: self.data.iter().map(|x| U::from_f64(x.to_f64())).collect() }
    }

    /// Largest absolute elementwise difference. Shapes must match.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }
}

/// Integer class labels over a spatial grid, (batch, depth, height, width).
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVolume {
    shape: [usize; 4],
    data: Vec<u8>,
}

impl LabelVolume {
    pub fn new(shape: [usize; 4], data: Vec<u8>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "LabelVolume::new",
                format!("shape {:?} holds {} elements, got {}", shape, n, data.len()),
            ));
        }
        Ok(LabelVolume { shape, data })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        LabelVolume { shape, data: vec![0; shape.iter().product()] }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let [b, d, h, w] = self.shape;
        (b, d, h, w)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn spatial_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    /// Contiguous label slab of one batch entry.
    pub fn entry(&self, b: usize) -> &[u8] {
        let n = self.spatial_len();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn index_of(&self, b: usize, d: usize, h: usize, w: usize) -> usize {
        ((b * self.shape[1] + d) * self.shape[2] + h) * self.shape[3] + w
    }

    pub fn at(&self, b: usize, d: usize, h: usize, w: usize) -> u8 {
        self.data[self.index_of(b, d, h, w)]
    }

    pub fn max_class(&self) -> u8 {
        self.data.iter().copied().max().unwrap_or(0)
    }
}
