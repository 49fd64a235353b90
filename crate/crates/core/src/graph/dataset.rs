use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor4};

/// Labelled single-image samples.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub inputs: Vec<Tensor4>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub seed: u64,
}

impl LabeledDataset {
    pub fn new(inputs: Vec<Tensor4>, labels: Vec<usize>, classes: usize, seed: u64) -> Result<Self> {
        let d = LabeledDataset { inputs, labels, classes, seed };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.inputs.len() != self.labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} inputs but {} labels",
                self.inputs.len(),
                self.labels.len()
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.classes) {
            return Err(Error::InvalidArgument(format!("label {bad} outside {} classes", self.classes)));
        }
        if let Some(first) = self.inputs.first() {
            let shape = first.shape();
            if shape.n != 1 {
                return Err(Error::Shape(format!("dataset samples must have batch 1, got {shape}")));
            }
            if let Some(x) = self.inputs.iter().find(|x| x.shape() != shape) {
                return Err(Error::Shape(format!("mixed sample shapes {shape} and {}", x.shape())));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn sample_shape(&self) -> Option<Shape4> {
        self.inputs.first().map(Tensor4::shape)
    }

    /// The first `n` samples.
    pub fn take(&self, n: usize) -> LabeledDataset {
        let n = n.min(self.len());
        LabeledDataset {
            inputs: self.inputs[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
            classes: self.classes,
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation() {
        let x = Tensor4::zeros(Shape4::new(1, 1, 2, 2).unwrap());
        assert!(LabeledDataset::new(vec![x.clone()], vec![0], 2, 0).is_ok());
        assert!(LabeledDataset::new(vec![x.clone()], vec![2], 2, 0).is_err());
        assert!(LabeledDataset::new(vec![x.clone()], vec![], 2, 0).is_err());
        let y = Tensor4::zeros(Shape4::new(1, 1, 3, 2).unwrap());
        assert!(LabeledDataset::new(vec![x, y], vec![0, 1], 2, 0).is_err());
    }
}
