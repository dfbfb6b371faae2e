//! Pixel containers shared by every stage of the pipeline.
//!
//! All buffers are row-major with interleaved channels (`H x W x C`).

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense `height x width x channels` buffer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster<P> {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<P>,
}

/// 8-bit image, one or more channels.
pub type Image = Raster<u8>;

impl<P: Copy> Raster<P> {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<P>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Shape("raster needs at least one channel".into()));
        }
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "buffer of {} values does not match {height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: P) -> Self {
        Self { height, width, channels, data: vec![value; height * width * channels] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `(height, width)`
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[P] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [P] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<P> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> P {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: P) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    #[inline]
    pub fn pixel(&self, index: usize) -> &[P] {
        &self.data[index * self.channels..(index + 1) * self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, index: usize) -> &mut [P] {
        let c = self.channels;
        &mut self.data[index * c..(index + 1) * c]
    }

    pub fn same_dims<Q: Copy>(&self, other: &Raster<Q>) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn map<Q: Copy>(&self, f: impl Fn(P) -> Q) -> Raster<Q> {
        Raster {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Extracts one channel as a single-channel raster.
    pub fn channel(&self, c: usize) -> Raster<P> {
        Raster {
            height: self.height,
            width: self.width,
            channels: 1,
            data: self.data.iter().skip(c).step_by(self.channels).copied().collect(),
        }
    }

    fn remap(&self, height: usize, width: usize, src: impl Fn(usize, usize) -> (usize, usize)) -> Self {
        let c = self.channels;
        let mut data = Vec::with_capacity(self.data.len());
        for y in 0..height {
            for x in 0..width {
                let (sy, sx) = src(y, x);
                let base = (sy * self.width + sx) * c;
                data.extend_from_slice(&self.data[base..base + c]);
            }
        }
        Self { height, width, channels: c, data }
    }

    pub fn flip_horizontal(&self) -> Self {
        let w = self.width;
        self.remap(self.height, w, |y, x| (y, w - 1 - x))
    }

    pub fn flip_vertical(&self) -> Self {
        let h = self.height;
        self.remap(h, self.width, |y, x| (h - 1 - y, x))
    }

    /// Rotates clockwise by `quarter_turns` x 90 degrees.
    pub fn rotate90(&self, quarter_turns: u8) -> Self {
        let (h, w) = (self.height, self.width);
        match quarter_turns % 4 {
            0 => self.clone(),
            1 => self.remap(w, h, |y, x| (h - 1 - x, y)),
            2 => self.remap(h, w, |y, x| (h - 1 - y, w - 1 - x)),
            _ => self.remap(w, h, |y, x| (x, w - 1 - y)),
        }
    }
}

/// Geometric transforms that apply identically to images, masks and
/// probability maps.
pub trait Geometric: Sized {
    fn flip_horizontal(&self) -> Self;
    fn flip_vertical(&self) -> Self;
    fn rotate90(&self, quarter_turns: u8) -> Self;
}

impl<P: Copy> Geometric for Raster<P> {
    fn flip_horizontal(&self) -> Self {
        Raster::flip_horizontal(self)
    }
    fn flip_vertical(&self) -> Self {
        Raster::flip_vertical(self)
    }
    fn rotate90(&self, quarter_turns: u8) -> Self {
        Raster::rotate90(self, quarter_turns)
    }
}

macro_rules! geometric_newtype {
    ($ty:ident $(<$g:ident: $b:path>)?) => {
        impl$(<$g: $b>)? Geometric for $ty$(<$g>)? {
            fn flip_horizontal(&self) -> Self {
                Self(self.0.flip_horizontal())
            }
            fn flip_vertical(&self) -> Self {
                Self(self.0.flip_vertical())
            }
            fn rotate90(&self, quarter_turns: u8) -> Self {
                Self(self.0.rotate90(quarter_turns))
            }
        }
    };
}

/// Single-channel `{0, 1}` mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask(Raster<u8>);

geometric_newtype!(BinaryMask);

impl BinaryMask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self(Raster::filled(height, width, 1, 0))
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if let Some(&v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::InvalidArgument(format!("binary mask value {v} not in {{0,1}}")));
        }
        Ok(Self(Raster::new(height, width, 1, data)?))
    }

    /// Builds from a predicate evaluated at every pixel index.
    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize) -> bool) -> Self {
        Self(Raster {
            height,
            width,
            channels: 1,
            data: (0..height * width).map(|i| f(i) as u8).collect(),
        })
    }

    /// Convenience constructor from nested rows.
    pub fn from_rows<R: AsRef<[u8]>>(rows: &[R]) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        if rows.iter().any(|r| r.as_ref().len() != width) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::from_vec(height, width, rows.iter().flat_map(|r| r.as_ref().iter().copied()).collect())
    }

    pub fn raster(&self) -> &Raster<u8> {
        &self.0
    }

    pub fn dims(&self) -> (usize, usize) {
        self.0.dims()
    }

    pub fn height(&self) -> usize {
        self.0.height
    }

    pub fn width(&self) -> usize {
        self.0.width
    }

    pub fn len(&self) -> usize {
        self.0.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.count_ones() == 0
    }

    pub fn data(&self) -> &[u8] {
        &self.0.data
    }

    #[inline]
    pub fn is_set(&self, index: usize) -> bool {
        self.0.data[index] != 0
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> bool {
        self.0.data[y * self.0.width + x] != 0
    }

    pub fn set(&mut self, index: usize, on: bool) {
        self.0.data[index] = on as u8;
    }

    pub fn count_ones(&self) -> usize {
        self.0.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn complement(&self) -> Self {
        Self(self.0.map(|v| 1 - v))
    }

    pub fn and(&self, other: &Self) -> Self {
        Self::from_fn(self.height(), self.width(), |i| self.is_set(i) && other.is_set(i))
    }

    pub fn or(&self, other: &Self) -> Self {
        Self::from_fn(self.height(), self.width(), |i| self.is_set(i) || other.is_set(i))
    }

    /// True when every set pixel of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &Self) -> bool {
        self.0.data.iter().zip(&other.0.data).all(|(&a, &b)| a <= b)
    }

    /// Widens to a class mask with values 0/1.
    pub fn to_class_mask(&self) -> ClassMask {
        ClassMask(self.0.clone())
    }
}

/// Single-channel mask of class IDs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassMask(Raster<u8>);

geometric_newtype!(ClassMask);

impl ClassMask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self(Raster::filled(height, width, 1, 0))
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        Ok(Self(Raster::new(height, width, 1, data)?))
    }

    pub fn from_rows<R: AsRef<[u8]>>(rows: &[R]) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        if rows.iter().any(|r| r.as_ref().len() != width) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::from_vec(height, width, rows.iter().flat_map(|r| r.as_ref().iter().copied()).collect())
    }

    pub fn raster(&self) -> &Raster<u8> {
        &self.0
    }

    pub fn dims(&self) -> (usize, usize) {
        self.0.dims()
    }

    pub fn height(&self) -> usize {
        self.0.height
    }

    pub fn width(&self) -> usize {
        self.0.width
    }

    pub fn len(&self) -> usize {
        self.0.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.data.is_empty()
    }

    pub fn data(&self) -> &[u8] {
        &self.0.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.0.data
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> u8 {
        self.0.data[y * self.0.width + x]
    }

    pub fn max_id(&self) -> Option<u8> {
        self.0.data.iter().copied().max()
    }

    /// Fails if any ID is `>= label_count`.
    pub fn validate(&self, label_count: usize) -> Result<()> {
        match self.0.data.iter().find(|&&v| v as usize >= label_count) {
            Some(&id) => Err(Error::ClassOutOfRange { id: id as u32, classes: label_count as u32 }),
            None => Ok(()),
        }
    }

    /// Pixels equal to `class`.
    pub fn class_mask(&self, class: u8) -> BinaryMask {
        BinaryMask::from_fn(self.height(), self.width(), |i| self.0.data[i] == class)
    }

    /// Narrows a 0/1 class mask to a binary mask.
    pub fn to_binary(&self) -> Result<BinaryMask> {
        BinaryMask::from_vec(self.height(), self.width(), self.0.data.clone())
    }
}

/// Per-pixel class probabilities, `H x W x C`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap<T>(Raster<T>);

geometric_newtype!(ProbMap<T: Scalar>);

impl<T: Scalar> ProbMap<T> {
    /// Wraps a raster, checking every value lies in `[0, 1]`.
    pub fn new(raster: Raster<T>) -> Result<Self> {
        if let Some(v) = raster.data.iter().find(|v| !(**v >= T::zero() && **v <= T::one())) {
            return Err(Error::InvalidArgument(format!("probability {v} outside [0,1]")));
        }
        Ok(Self(raster))
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        Self::new(Raster::new(height, width, channels, data)?)
    }

    pub fn raster(&self) -> &Raster<T> {
        &self.0
    }

    pub fn into_raster(self) -> Raster<T> {
        self.0
    }

    pub fn dims(&self) -> (usize, usize) {
        self.0.dims()
    }

    pub fn channels(&self) -> usize {
        self.0.channels
    }

    pub fn pixel_count(&self) -> usize {
        self.0.pixel_count()
    }

    #[inline]
    pub fn pixel(&self, index: usize) -> &[T] {
        self.0.pixel(index)
    }

    /// Checks the multiclass invariant: channel sums within `1 +- 1e-3`.
    pub fn check_normalized(&self) -> Result<()> {
        let tol = T::lit(1e-3);
        for i in 0..self.pixel_count() {
            let s: T = self.pixel(i).iter().copied().sum();
            if (s - T::one()).abs() > tol {
                return Err(Error::InvalidArgument(format!("pixel {i} probabilities sum to {s}")));
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ProbMap<U> {
        ProbMap(self.0.map(|v| <U as num_traits::NumCast>::from(v).expect("finite probability")))
    }

    /// Lowest-index argmax per pixel.
    pub fn argmax(&self) -> ClassMask {
        let (h, w) = self.dims();
        let data = (0..h * w).map(|i| argmax_lowest(self.pixel(i)) as u8).collect();
        ClassMask(Raster { height: h, width: w, channels: 1, data })
    }
}

/// Index of the largest value; ties resolve to the lowest index.
pub(crate) fn argmax_lowest<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn check_same_dims(a: (usize, usize), b: (usize, usize), what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{what}: {}x{} vs {}x{}", a.0, a.1, b.0, b.1)));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Raster<u8> {
        Raster::new(2, 3, 1, vec![1, 2, 3, 4, 5, 6]).unwrap()
    }

    #[test]
    fn rotate_clockwise_quarter() {
        // 1 2 3      4 1
        // 4 5 6  ->  5 2
        //            6 3
        let r = sample().rotate90(1);
        assert_eq!(r.dims(), (3, 2));
        assert_eq!(r.data(), &[4, 1, 5, 2, 6, 3]);
        assert_eq!(sample().rotate90(3).rotate90(1), sample());
        assert_eq!(sample().rotate90(2), sample().flip_horizontal().flip_vertical());
    }

    #[test]
    fn flips() {
        assert_eq!(sample().flip_horizontal().data(), &[3, 2, 1, 6, 5, 4]);
        assert_eq!(sample().flip_vertical().data(), &[4, 5, 6, 1, 2, 3]);
    }

    #[test]
    fn binary_mask_rejects_non_binary() {
        assert!(BinaryMask::from_vec(1, 2, vec![0, 2]).is_err());
    }

    #[test]
    fn prob_map_range_checked() {
        assert!(ProbMap::<f32>::from_vec(1, 1, 1, vec![1.5]).is_err());
        assert!(ProbMap::<f32>::from_vec(1, 1, 1, vec![f32::NAN]).is_err());
    }

    #[test]
    fn argmax_tie_goes_low() {
        assert_eq!(argmax_lowest(&[0.5, 0.5]), 0);
        assert_eq!(argmax_lowest(&[0.1, 0.5, 0.5]), 1);
    }
}
