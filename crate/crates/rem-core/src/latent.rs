use candle_core::Tensor;

use crate::error::{Error, Result};

/// Encoder output: a real tensor of shape `(frames, C_z, H/f, W/f)`.
#[derive(Debug, Clone)]
pub struct LatentTensor(Tensor);

impl LatentTensor {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.dims().len() != 4 {
            return Err(Error::Shape(format!(
                "latent tensor must be 4-d (frames, channels, h, w), got {:?}",
                values.dims()
            )));
        }
        Ok(Self(values))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn frames(&self) -> usize {
        self.0.dims()[0]
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let d = self.0.dims();
        (d[0], d[1], d[2], d[3])
    }

    /// Errors if any element is NaN or infinite.
    pub fn check_finite(&self) -> Result<()> {
        let v: Vec<f32> = self.0.to_dtype(candle_core::DType::F32)?.flatten_all()?.to_vec1()?;
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Domain("latent tensor contains non-finite values".into()));
        }
        Ok(())
    }
}

impl From<LatentTensor> for Tensor {
    fn from(l: LatentTensor) -> Tensor {
        l.0
    }
}
