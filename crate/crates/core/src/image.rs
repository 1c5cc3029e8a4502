use std::path::Path;

use crate::error::{Error, Result};
use crate::numcore::{io, Tensor};

/// `C x H x W` image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    tensor: Tensor,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        Self::from_tensor(Tensor::new(vec![channels, height, width], data)?)
    }

    pub fn from_tensor(tensor: Tensor) -> Result<Self> {
        if tensor.rank() != 3 {
            return Err(Error::shape(
                "Image",
                format!("expected [C, H, W], got {:?}", tensor.shape()),
            ));
        }
        if tensor.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Domain("pixel values must lie in [0, 1]".into()));
        }
        Ok(Image { tensor })
    }

    /// Clip every value into `[0, 1]`.
    pub fn clamped(tensor: Tensor, channels: usize, height: usize, width: usize) -> Result<Self> {
        let data = tensor.data().iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Self::new(channels, height, width, data)
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels(), self.height(), self.width())
    }

    pub fn pixels(&self) -> &[f64] {
        self.tensor.data()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.tensor.data()[(c * self.height() + y) * self.width() + x]
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        io::write_dgft(path, &self.tensor)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_tensor(io::read_dgft(path)?).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}
