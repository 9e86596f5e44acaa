//! A trainable affine layer, shared by the image projection, the regression
//! baseline, and the classification head.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Matrix, Tape, TensorRef};

/// weight (in_dim x out_dim) plus bias row (1 x out_dim).
#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    weight: Matrix,
    bias: Matrix,
}

/// Tape handles for one registration of a [`LinearLayer`].
#[derive(Debug, Clone, Copy)]
pub struct LinearVars {
    pub weight: TensorRef,
    pub bias: TensorRef,
}

impl LinearLayer {
    pub fn init<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        LinearLayer {
            weight: Matrix::glorot_uniform(in_dim, out_dim, rng),
            bias: Matrix::zeros(1, out_dim),
        }
    }

    pub fn from_parts(weight: Matrix, bias: Matrix) -> Result<Self> {
        if bias.shape() != (1, weight.cols()) {
            return Err(Error::Shape(format!(
                "bias {:?} does not match weight {:?}",
                bias.shape(),
                weight.shape()
            )));
        }
        Ok(LinearLayer { weight, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn weight(&self) -> &Matrix {
        &self.weight
    }

    pub fn bias(&self) -> &Matrix {
        &self.bias
    }

    /// Plain forward for one input vector.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim() {
            return Err(Error::Shape(format!(
                "linear layer input {} != expected {}",
                x.len(),
                self.in_dim()
            )));
        }
        let mut out = self.bias.row(0).to_vec();
        for (i, &xv) in x.iter().enumerate() {
            if xv != 0.0 {
                for (o, w) in out.iter_mut().zip(self.weight.row(i)) {
                    *o += xv * w;
                }
            }
        }
        Ok(out)
    }

    pub fn register(&self, tape: &mut Tape) -> LinearVars {
        LinearVars {
            weight: tape.leaf(self.weight.clone()),
            bias: tape.leaf(self.bias.clone()),
        }
    }

    pub fn register_frozen(&self, tape: &mut Tape) -> LinearVars {
        LinearVars {
            weight: tape.constant(self.weight.clone()),
            bias: tape.constant(self.bias.clone()),
        }
    }

    /// Parameter matrices in canonical order: weight, bias.
    pub fn blocks(&self) -> Vec<&Matrix> {
        vec![&self.weight, &self.bias]
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut Matrix> {
        vec![&mut self.weight, &mut self.bias]
    }

    pub fn with_blocks(&self, blocks: &[Matrix]) -> Result<Self> {
        if blocks.len() != 2
            || blocks[0].shape() != self.weight.shape()
            || blocks[1].shape() != self.bias.shape()
        {
            return Err(Error::Shape("linear layer expects [weight, bias]".into()));
        }
        Ok(LinearLayer {
            weight: blocks[0].clone(),
            bias: blocks[1].clone(),
        })
    }
}

impl LinearVars {
    pub fn from_refs(refs: &[TensorRef]) -> Self {
        assert_eq!(refs.len(), 2, "linear layer has two blocks");
        LinearVars {
            weight: refs[0],
            bias: refs[1],
        }
    }

    pub fn refs(&self) -> Vec<TensorRef> {
        vec![self.weight, self.bias]
    }

    /// x @ weight + bias on the tape.
    pub fn apply_tape(&self, tape: &mut Tape, x: TensorRef) -> TensorRef {
        tape.linear(x, self.weight, self.bias)
    }
}
