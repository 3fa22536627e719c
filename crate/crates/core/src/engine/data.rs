use ndarray::Array4;

use crate::error::{Error, Result};

/// Raw 8-bit images in `(N, C, H, W)` order with integer labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageSet {
    pub channels: usize,
    pub side: usize,
    pub pixels: Vec<u8>,
    pub labels: Vec<usize>,
}

impl ImageSet {
    pub fn new(channels: usize, side: usize, pixels: Vec<u8>, labels: Vec<usize>) -> Result<Self> {
        let per = channels * side * side;
        if per == 0 || pixels.len() != per * labels.len() {
            return Err(Error::Input(format!(
                "{} pixel bytes do not hold {} images of {channels}x{side}x{side}",
                pixels.len(),
                labels.len()
            )));
        }
        Ok(Self { channels, side, pixels, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn bytes_per_image(&self) -> usize {
        self.channels * self.side * self.side
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let per = self.bytes_per_image();
        &self.pixels[i * per..(i + 1) * per]
    }

    /// Float batch scaled to roughly unit range: `(v/255 − 0.5) / 0.25`.
    pub fn batch(&self, indices: &[usize]) -> Array4<f32> {
        let per = self.bytes_per_image();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend(self.image(i).iter().map(|&v| (f32::from(v) / 255.0 - 0.5) * 4.0));
        }
        Array4::from_shape_vec((indices.len(), self.channels, self.side, self.side), data)
            .expect("sized batch")
    }

    pub fn indices_of_label(&self, label: usize) -> Vec<usize> {
        self.labels.iter().enumerate().filter(|(_, &l)| l == label).map(|(i, _)| i).collect()
    }
}
