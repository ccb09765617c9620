//! Binary PGM (P5) images: 16-bit intensities and 8-bit masks.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use image::codecs::pnm::{GraymapHeader, PnmDecoder, PnmEncoder, PnmHeader, SampleEncoding};
use image::{DynamicImage, ExtendedColorType};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Raw samples and the format's maximum value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub max_value: u16,
    pub samples: Vec<u16>,
}

impl Pgm {
    pub fn read(path: &Path) -> Result<Pgm> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let decoder = PnmDecoder::new(BufReader::new(file)).map_err(|e| Error::format(path, e.to_string()))?;
        let img = DynamicImage::from_decoder(decoder).map_err(|e| Error::format(path, e.to_string()))?;
        let (width, height) = (img.width() as usize, img.height() as usize);
        let (max_value, samples) = match img {
            DynamicImage::ImageLuma8(buf) => (255, buf.into_raw().into_iter().map(u16::from).collect()),
            DynamicImage::ImageLuma16(buf) => (65535, buf.into_raw()),
            other => return Err(Error::format(path, format!("expected a grayscale PGM, got {:?}", other.color()))),
        };
        Ok(Pgm { width, height, max_value, samples })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let (wd, ht) = (self.width as u32, self.height as u32);
        let header = GraymapHeader {
            encoding: SampleEncoding::Binary,
            height: ht,
            width: wd,
            maxwhite: u32::from(self.max_value),
        };
        let mut enc = PnmEncoder::new(&mut w).with_header(PnmHeader::from(header));
        let res = if self.max_value <= 255 {
            let bytes: Vec<u8> = self.samples.iter().map(|&s| s.min(255) as u8).collect();
            enc.encode(bytes.as_slice(), wd, ht, ExtendedColorType::L8)
        } else {
            enc.encode(self.samples.as_slice(), wd, ht, ExtendedColorType::L16)
        };
        res.map_err(|e| Error::format(path, e.to_string()))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Intensities scaled to `[0, 1]` as an `H×W` tensor.
    pub fn to_unit<T: Scalar>(&self) -> Tensor<T> {
        let m = f64::from(self.max_value);
        let data = self.samples.iter().map(|&s| T::c(f64::from(s) / m)).collect();
        Tensor::new(&[self.height, self.width], data).expect("pgm extents")
    }

    /// Quantizes an `H×W` tensor of `[0, 1]` values to `max_value` levels.
    pub fn from_unit<T: Scalar>(t: &Tensor<T>, max_value: u16) -> Result<Pgm> {
        if t.rank() != 2 {
            return Err(Error::shape(format!("PGM export needs H×W, got {:?}", t.shape())));
        }
        let m = f64::from(max_value);
        let samples = t.data().iter().map(|v| (v.as_f64().clamp(0.0, 1.0) * m).round() as u16).collect();
        Ok(Pgm { width: t.shape()[1], height: t.shape()[0], max_value, samples })
    }
}

/// Rounds `[0, 1]` intensities onto the 16-bit grid so they survive a PGM
/// round trip bitwise.
pub fn quantize16<T: Scalar>(v: f64) -> T {
    T::c((v.clamp(0.0, 1.0) * 65535.0).round() / 65535.0)
}

pub fn read_image<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    Ok(Pgm::read(path)?.to_unit())
}

pub fn write_image16<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    Pgm::from_unit(t, 65535)?.write(path)
}

/// Binary mask from any PGM: foreground where the sample is non-zero.
pub fn read_mask<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let p = Pgm::read(path)?;
    let data = p.samples.iter().map(|&s| if s > 0 { T::one() } else { T::zero() }).collect();
    Tensor::new(&[p.height, p.width], data)
}

/// 8-bit `{0, 255}` mask, or 255-scaled probabilities.
pub fn write_mask8<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    Pgm::from_unit(t, 255)?.write(path)
}
