//! Validated image and mask values.

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// `H × W × 3` image with finite intensities in `[0, 1]`; `H` and `W` are
/// multiples of 32.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor(Tensor<f32>);

impl ImageTensor {
    pub fn new(t: Tensor<f32>) -> Result<Self> {
        let (h, w, c) = t.dims3()?;
        if c != 3 || h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(shape_err!("image must be H×W×3 with H, W multiples of 32, got {h}×{w}×{c}"));
        }
        if t.data().iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::Numerical("image values must be finite and in [0,1]".into()));
        }
        Ok(ImageTensor(t))
    }

    pub fn height(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.0
    }
}

/// `H × W × 2` one-hot mask; channel 1 marks forged pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthMask(Tensor<f32>);

impl GroundTruthMask {
    pub fn new(t: Tensor<f32>) -> Result<Self> {
        let (_, _, c) = t.dims3()?;
        if c != 2 {
            return Err(shape_err!("mask must have 2 channels, got {c}"));
        }
        for px in t.data().chunks(2) {
            let ok = (px[0] == 0.0 && px[1] == 1.0) || (px[0] == 1.0 && px[1] == 0.0);
            if !ok {
                return Err(Error::Numerical(format!("mask pixel {px:?} is not one-hot")));
            }
        }
        Ok(GroundTruthMask(t))
    }

    /// Build from a binary forged map of `h·w` flags.
    pub fn from_forged(h: usize, w: usize, forged: &[bool]) -> Result<Self> {
        if forged.len() != h * w {
            return Err(shape_err!("mask: {} flags for {h}×{w}", forged.len()));
        }
        let data = forged
            .iter()
            .flat_map(|&f| if f { [0.0, 1.0] } else { [1.0, 0.0] })
            .collect();
        Ok(GroundTruthMask(Tensor::new(&[h, w, 2], data)?))
    }

    pub fn height(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn forged(&self) -> Vec<bool> {
        self.0.data().chunks(2).map(|px| px[1] == 1.0).collect()
    }

    pub fn forged_count(&self) -> usize {
        self.forged().iter().filter(|&&f| f).count()
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.0
    }
}
