use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VolumeDims {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl VolumeDims {
    pub fn tokens(&self) -> usize {
        self.frames * self.height * self.width
    }

    pub fn token_index(&self, t: usize, x: usize, y: usize) -> usize {
        (t * self.height + x) * self.width + y
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.frames, self.height, self.width, self.channels]
    }

    pub fn with_channels(self, channels: usize) -> Self {
        Self { channels, ..self }
    }
}

/// Tokens laid out as `[T, H, W, C]`; `x` indexes height and `y` width.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenVolume {
    dims: VolumeDims,
    values: Tensor,
}

impl TokenVolume {
    pub fn from_tensor(values: Tensor) -> Result<Self> {
        match *values.shape() {
            [frames, height, width, channels] => Ok(Self {
                dims: VolumeDims { frames, height, width, channels },
                values,
            }),
            _ => Err(Error::dimension("TokenVolume", values.shape(), &[4])),
        }
    }

    pub fn new(dims: VolumeDims, data: Vec<f64>) -> Result<Self> {
        Self::from_tensor(Tensor::new(dims.shape().to_vec(), data)?)
    }

    pub fn zeros(dims: VolumeDims) -> Self {
        Self {
            dims,
            values: Tensor::zeros(&dims.shape()),
        }
    }

    pub fn dims(&self) -> VolumeDims {
        self.dims
    }

    pub fn frames(&self) -> usize {
        self.dims.frames
    }

    pub fn height(&self) -> usize {
        self.dims.height
    }

    pub fn width(&self) -> usize {
        self.dims.width
    }

    pub fn channels(&self) -> usize {
        self.dims.channels
    }

    pub fn tokens(&self) -> usize {
        self.dims.tokens()
    }

    pub fn token(&self, t: usize, x: usize, y: usize) -> &[f64] {
        self.flat_token(self.dims.token_index(t, x, y))
    }

    pub fn flat_token(&self, index: usize) -> &[f64] {
        let c = self.dims.channels;
        &self.values.data()[index * c..(index + 1) * c]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.values
    }

    pub fn data(&self) -> &[f64] {
        self.values.data()
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        self.values.data_mut()
    }

    pub fn into_tensor(self) -> Tensor {
        self.values
    }

    pub fn same_shape(&self, other: &TokenVolume, op: &'static str) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::dimension(op, &self.dims.shape(), &other.dims.shape()));
        }
        Ok(())
    }
}
