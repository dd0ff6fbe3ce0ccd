//! `SGEO1`, u32 C, H, W, C × f64 wavelengths, C·H·W × f32 pixels, plus a
//! JSON sidecar next to each file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use spectra_core::hypernet::WavelengthSpec;
use spectra_core::numerics::Tensor;
use spectra_core::towers::MultimodalImage;

use super::{FormatError, Reader};
use crate::error::{self, Error, Result};

const MAGIC: &str = "SGEO1";

#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub lambdas: Vec<f64>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub shape: [usize; 3],
    pub wavelengths: Vec<f64>,
    pub modality: String,
}

impl Raster {
    pub fn from_image(img: &MultimodalImage) -> Self {
        Raster {
            channels: img.channels(),
            height: img.height(),
            width: img.width(),
            lambdas: img.spec().lambdas().to_vec(),
            data: img.pixels().data().iter().map(|&v| v as f32).collect(),
        }
    }

    /// A single-channel matrix, e.g. a similarity dump; λ is recorded as 0.
    pub fn matrix(rows: usize, cols: usize, values: &[f64]) -> Self {
        Raster {
            channels: 1,
            height: rows,
            width: cols,
            lambdas: vec![0.0],
            data: values.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn to_image(&self, modality: &str) -> Result<MultimodalImage> {
        let spec = WavelengthSpec::new(modality, self.lambdas.clone())?;
        let pixels = Tensor::new(
            vec![self.channels, self.height, self.width],
            self.data.iter().map(|&v| f64::from(v)).collect(),
        )?;
        Ok(MultimodalImage::new(pixels, spec)?)
    }

    pub fn encode(&self) -> Result<Vec<u8>, FormatError> {
        if self.lambdas.len() != self.channels || self.data.len() != self.channels * self.height * self.width {
            return Err(FormatError::Invalid("raster dimensions disagree with its data".into()));
        }
        let mut out = Vec::with_capacity(17 + 8 * self.channels + 4 * self.data.len());
        out.extend_from_slice(MAGIC.as_bytes());
        for d in [self.channels, self.height, self.width] {
            let d = u32::try_from(d).map_err(|_| FormatError::Invalid("raster dimension too large".into()))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for l in &self.lambdas {
            out.extend_from_slice(&l.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = Reader::new(bytes);
        r.magic(MAGIC)?;
        let channels = r.u32("channels")? as usize;
        let height = r.u32("height")? as usize;
        let width = r.u32("width")? as usize;
        let lambdas = r.f64s(channels, "wavelengths")?;
        let n = channels
            .checked_mul(height)
            .and_then(|x| x.checked_mul(width))
            .ok_or_else(|| FormatError::Invalid("raster size overflows".into()))?;
        let data = r.f32s(n, "pixels")?;
        if r.remaining() != 0 {
            return Err(FormatError::TrailingBytes { count: r.remaining() });
        }
        Ok(Raster { channels, height, width, lambdas, data })
    }

    pub fn sidecar(&self, modality: &str) -> Sidecar {
        Sidecar {
            shape: [self.channels, self.height, self.width],
            wavelengths: self.lambdas.clone(),
            modality: modality.into(),
        }
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes the raster and its `.json` sidecar.
pub fn save_raster(raster: &Raster, modality: &str, path: &Path) -> Result<()> {
    error::write(path, raster.encode().map_err(|e| Error::format(path, e))?)?;
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(&raster.sidecar(modality)).map_err(|e| Error::json(&side, e))?;
    error::write(&side, json + "\n")
}

pub fn load_raster(path: &Path) -> Result<Raster> {
    Raster::decode(&error::read(path)?).map_err(|e| Error::format(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_errors() {
        let r = Raster { channels: 2, height: 1, width: 2, lambdas: vec![0.5, 1.5], data: vec![0.0, 0.25, 0.5, 1.0] };
        let bytes = r.encode().unwrap();
        assert_eq!(Raster::decode(&bytes).unwrap(), r);
        assert!(matches!(Raster::decode(&bytes[..bytes.len() - 2]), Err(FormatError::Truncated { .. })));
        assert!(matches!(Raster::decode(b"SGEO2"), Err(FormatError::BadMagic { .. })));
        let img = r.to_image("test").unwrap();
        assert_eq!(Raster::from_image(&img), r);
    }
}
