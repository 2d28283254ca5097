//! Sharpness scoring by variance of the Laplacian, and quality bins.

use image::imageops::FilterType;
use image::{DynamicImage, GenericImageView, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Document;
use crate::scalar::Real;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum QualityError {
    #[error("image has no pixels")]
    EmptyImage,
    #[error("raster is {width}x{height}, need at least 3x3")]
    TooSmall { width: usize, height: usize },
    #[error("raster data length {len} does not match {width}x{height}")]
    Shape { width: usize, height: usize, len: usize },
    #[error("cannot decode image for {doc_id}: {reason}")]
    Decode { doc_id: String, reason: String },
}

/// Row-major single-channel raster.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayRaster<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T: Real> GrayRaster<T> {
    pub fn new(width: usize, height: usize, data: Vec<T>) -> Result<Self, QualityError> {
        if data.len() != width * height {
            return Err(QualityError::Shape {
                width,
                height,
                len: data.len(),
            });
        }
        Ok(Self { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> T {
        self.data[y * self.width + x]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Rec. 601 luma, kept at floating precision.
pub fn to_grayscale<T: Real>(image: &RgbImage) -> Result<GrayRaster<T>, QualityError> {
    let (w, h) = image.dimensions();
    if w == 0 || h == 0 {
        return Err(QualityError::EmptyImage);
    }
    let (wr, wg, wb) = (T::lit(0.299), T::lit(0.587), T::lit(0.114));
    let data = image
        .pixels()
        .map(|p| {
            let [r, g, b] = p.0;
            wr * T::lit(f64::from(r)) + wg * T::lit(f64::from(g)) + wb * T::lit(f64::from(b))
        })
        .collect();
    Ok(GrayRaster {
        width: w as usize,
        height: h as usize,
        data,
    })
}

/// Population variance of the 4-neighbour Laplacian over interior pixels.
pub fn laplacian_variance<T: Real>(gray: &GrayRaster<T>) -> Result<T, QualityError> {
    let (w, h) = (gray.width, gray.height);
    if w < 3 || h < 3 {
        return Err(QualityError::TooSmall { width: w, height: h });
    }
    let four = T::lit(4.0);
    let mut response = Vec::with_capacity((w - 2) * (h - 2));
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let r = gray.get(x, y - 1) + gray.get(x - 1, y) + gray.get(x + 1, y) + gray.get(x, y + 1)
                - four * gray.get(x, y);
            response.push(r);
        }
    }
    let n = T::from_count(response.len());
    let mean = response.iter().copied().sum::<T>() / n;
    let var = response.iter().map(|&r| (r - mean) * (r - mean)).sum::<T>() / n;
    Ok(var)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum QualityBin {
    B1,
    B2,
    B3,
    B4,
    B5,
}

impl QualityBin {
    pub const ALL: [QualityBin; 5] = [Self::B1, Self::B2, Self::B3, Self::B4, Self::B5];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::B1 => "B1",
            Self::B2 => "B2",
            Self::B3 => "B3",
            Self::B4 => "B4",
            Self::B5 => "B5",
        }
    }
}

impl std::fmt::Display for QualityBin {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Lower edges of B2..B5. Each bin is left-closed, right-open.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinEdges(pub [f64; 4]);

impl Default for BinEdges {
    fn default() -> Self {
        Self([200.0, 500.0, 750.0, 1000.0])
    }
}

impl BinEdges {
    pub fn is_ascending(&self) -> bool {
        self.0.windows(2).all(|w| w[0] < w[1])
    }

    /// Anything below the first edge, including NaN and negatives, lands in B1.
    pub fn bin<T: Real>(&self, v: T) -> QualityBin {
        let v = v.to_f64().unwrap_or(f64::NAN);
        let above = self.0.iter().take_while(|&&edge| v >= edge).count();
        QualityBin::ALL[above]
    }
}

pub fn quality_bin<T: Real>(v: T) -> QualityBin {
    BinEdges::default().bin(v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityScore {
    pub doc_id: String,
    #[serde(rename = "variance")]
    pub laplacian_variance: f64,
    pub bin: QualityBin,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct QualityOptions {
    /// Downscale so the longer side is at most this many pixels before scoring.
    pub max_dimension: Option<u32>,
    pub edges: Option<BinEdges>,
}

fn prepare(image: DynamicImage, max_dimension: Option<u32>) -> RgbImage {
    let (w, h) = image.dimensions();
    match max_dimension {
        Some(limit) if limit > 0 && w.max(h) > limit => image.resize(limit, limit, FilterType::Triangle).to_rgb8(),
        _ => image.to_rgb8(),
    }
}

pub fn score_image(doc_id: &str, image: DynamicImage, opts: &QualityOptions) -> Result<QualityScore, QualityError> {
    let rgb = prepare(image, opts.max_dimension);
    let variance = laplacian_variance(&to_grayscale::<f64>(&rgb)?)?;
    Ok(QualityScore {
        doc_id: doc_id.to_string(),
        laplacian_variance: variance,
        bin: opts.edges.unwrap_or_default().bin(variance),
    })
}

pub fn score_document(doc: &Document, opts: &QualityOptions) -> Result<QualityScore, QualityError> {
    let image = doc.image.decode().map_err(|reason| QualityError::Decode {
        doc_id: doc.doc_id.clone(),
        reason,
    })?;
    score_image(&doc.doc_id, image, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    #[test]
    fn luma() {
        let white = RgbImage::from_pixel(2, 2, Rgb([255, 255, 255]));
        let g = to_grayscale::<f64>(&white).unwrap();
        assert!(g.data().iter().all(|&v| (v - 255.0).abs() < 1e-9));
        let red = RgbImage::from_pixel(1, 1, Rgb([255, 0, 0]));
        assert!((to_grayscale::<f64>(&red).unwrap().get(0, 0) - 76.245).abs() < 1e-9);
        assert_eq!(to_grayscale::<f32>(&RgbImage::new(0, 0)), Err(QualityError::EmptyImage));
    }

    #[test]
    fn constant_and_small() {
        let flat = GrayRaster::from_fn(5, 4, |_, _| 17.0f64);
        assert_eq!(laplacian_variance(&flat).unwrap(), 0.0);
        let tiny = GrayRaster::from_fn(2, 5, |_, _| 0.0f32);
        assert_eq!(
            laplacian_variance(&tiny),
            Err(QualityError::TooSmall { width: 2, height: 5 })
        );
        assert!(GrayRaster::new(2, 2, vec![0.0f64; 3]).is_err());
    }

    #[test]
    fn checkerboard_by_hand() {
        // Every interior pixel has four opposite-colour neighbours: response is
        // +1020 on dark cells and −1020 on light ones, half each, mean zero.
        let board = GrayRaster::from_fn(8, 8, |x, y| if (x + y) % 2 == 0 { 0.0f64 } else { 255.0 });
        assert_eq!(laplacian_variance(&board).unwrap(), 1020.0 * 1020.0);
    }

    #[test]
    fn bins() {
        let cases = [
            (0.0, QualityBin::B1),
            (199.99, QualityBin::B1),
            (200.0, QualityBin::B2),
            (500.0, QualityBin::B3),
            (750.0, QualityBin::B4),
            (1000.0, QualityBin::B5),
            (5000.0, QualityBin::B5),
        ];
        for (v, b) in cases {
            assert_eq!(quality_bin(v), b, "{v}");
            assert_eq!(quality_bin(v as f32), b, "{v} as f32");
        }
        assert_eq!(quality_bin(f64::NAN), QualityBin::B1);
        assert!(!BinEdges([1.0, 1.0, 2.0, 3.0]).is_ascending());
    }

    #[test]
    fn resize_caps_long_side() {
        let img = DynamicImage::ImageRgb8(RgbImage::from_fn(40, 20, |x, _| Rgb([(x * 6) as u8; 3])));
        let small = prepare(img.clone(), Some(10));
        assert_eq!(small.dimensions(), (10, 5));
        assert_eq!(prepare(img, None).dimensions(), (40, 20));
    }

    proptest::proptest! {
        #[test]
        fn bin_is_monotone(a in 0.0f64..3000.0, b in 0.0f64..3000.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            proptest::prop_assert!(quality_bin(lo) <= quality_bin(hi));
        }
    }
}
