use ndarray::{s, Array1, Array2, Axis};

use super::params::ParamVisitor;
use crate::error::{dim_err, Error, Result};
use crate::serialize::ArrayFile;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadRole {
    /// Classifier on the plain extractor features; feeds distillation.
    Base,
    /// Classifier over the concatenated per-task representations.
    Aggregate,
    /// Training-only head of the current task's plugin representation.
    Auxiliary,
}

/// Linear classifier, `logits = x · W + b` with `W` of shape `(input_width, classes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub weight: Array2<f32>,
    pub bias: Option<Array1<f32>>,
    pub role: HeadRole,
}

#[derive(Debug, Clone)]
pub struct HeadGrads {
    pub weight: Array2<f32>,
    pub bias: Option<Array1<f32>>,
    pub input: Array2<f32>,
}

impl ClassifierHead {
    pub fn zeros(input_width: usize, classes: usize, with_bias: bool, role: HeadRole) -> Self {
        Self {
            weight: Array2::zeros((input_width, classes)),
            bias: with_bias.then(|| Array1::zeros(classes)),
            role,
        }
    }

    pub fn input_width(&self) -> usize {
        self.weight.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, features: &Array2<f32>) -> Result<Array2<f32>> {
        if features.ncols() != self.input_width() {
            return Err(dim_err("head input width", self.input_width(), features.ncols()));
        }
        let mut out = features.dot(&self.weight);
        if let Some(b) = &self.bias {
            out += &b.view().insert_axis(Axis(0));
        }
        Ok(out)
    }

    pub fn backward(&self, features: &Array2<f32>, grad_logits: &Array2<f32>) -> HeadGrads {
        HeadGrads {
            weight: features.t().dot(grad_logits),
            bias: self.bias.as_ref().map(|_| grad_logits.sum_axis(Axis(0))),
            input: grad_logits.dot(&self.weight.t()),
        }
    }

    /// Enlarges the head, copying the existing block into the top-left corner
    /// and zero-filling everything new.
    pub fn to_array_file(&self) -> ArrayFile {
        let mut f = ArrayFile::default();
        f.push("weight", self.weight.shape(), self.weight.as_slice().expect("contiguous"));
        if let Some(b) = &self.bias {
            f.push("bias", b.shape(), b.as_slice().expect("contiguous"));
        }
        f
    }

    pub fn from_array_file(file: &ArrayFile, role: HeadRole) -> Result<Self> {
        let w = file.get("weight")?;
        if w.shape.len() != 2 {
            return Err(Error::Format(format!("head weight must be 2-d, got {:?}", w.shape)));
        }
        let bias = file.arrays.iter().any(|a| a.name == "bias");
        let mut head = Self::zeros(w.shape[0], w.shape[1], bias, role);
        file.fill("weight", &mut head.weight)?;
        if let Some(b) = head.bias.as_mut() {
            file.fill("bias", b)?;
        }
        Ok(head)
    }

    pub fn grow(&self, new_input_width: usize, new_classes: usize) -> Result<Self> {
        let (iw, nc) = self.weight.dim();
        if new_input_width < iw || new_classes < nc {
            return Err(Error::Config(format!(
                "cannot shrink head from {iw}x{nc} to {new_input_width}x{new_classes}"
            )));
        }
        let mut weight = Array2::zeros((new_input_width, new_classes));
        weight.slice_mut(s![..iw, ..nc]).assign(&self.weight);
        let bias = self.bias.as_ref().map(|b| {
            let mut nb = Array1::zeros(new_classes);
            nb.slice_mut(s![..nc]).assign(b);
            nb
        });
        Ok(Self { weight, bias, role: self.role })
    }
}

impl ParamVisitor for ClassifierHead {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f32])) {
        f("weight", self.weight.as_slice().expect("standard layout"));
        if let Some(b) = &self.bias {
            f("bias", b.as_slice().expect("standard layout"));
        }
    }

    fn param_count(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, |b| b.len())
    }
}
