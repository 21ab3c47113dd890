//! Margin predictor: a small encoder-decoder that maps an image to a grid of
//! predicted per-label margins, one cell per patch anchor.
//!
//! Fixed shape: two stride-2 downsamplings (channels 16/32/64), nearest-
//! neighbor upsampling with skip connections, and a 1x1 projection to
//! label-count channels cropped to the `(m-n+1)` anchor grid. Inputs must
//! have spatial extents divisible by 4.

use crate::error::{Error, Result};
use crate::network::Parameter;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;

#[derive(Clone, Debug)]
pub struct MarginPredictor {
    params: Vec<Parameter>, // weight/bias pairs in layer order
    input: (usize, usize, usize),
    grid: (usize, usize),
    labels: usize,
}

const ENC1: usize = 16;
const ENC2: usize = 32;
const ENC3: usize = 64;

fn conv_param<R: Rng>(c_in: usize, c_out: usize, k: usize, rng: &mut R) -> (Parameter, Parameter) {
    let fan_in = c_in * k * k;
    (
        Parameter::new(Tensor::kaiming_uniform(&[c_out, c_in, k, k], fan_in, rng)),
        Parameter::new(Tensor::zeros(&[c_out])),
    )
}

impl MarginPredictor {
    pub fn new<R: Rng>(
        channels: usize,
        height: usize,
        width: usize,
        grid: (usize, usize),
        labels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if height % 4 != 0 || width % 4 != 0 {
            return Err(Error::Config(format!(
                "margin predictor needs spatial extents divisible by 4, got {height}x{width}"
            )));
        }
        if grid.0 > height || grid.1 > width || grid.0 == 0 || grid.1 == 0 {
            return Err(Error::Config(format!(
                "anchor grid {grid:?} does not fit inside {height}x{width}"
            )));
        }
        let mut params = Vec::new();
        for (cin, cout, k) in [
            (channels, ENC1, 3),
            (ENC1, ENC2, 3),
            (ENC2, ENC3, 3),
            (ENC3 + ENC2, ENC2, 3),
            (ENC2 + ENC1, ENC1, 3),
            (ENC1, labels, 1),
        ] {
            let (w, b) = conv_param(cin, cout, k, rng);
            params.push(w);
            params.push(b);
        }
        Ok(MarginPredictor {
            params,
            input: (channels, height, width),
            grid,
            labels,
        })
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn labels(&self) -> usize {
        self.labels
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.input
    }

    pub fn parameters(&self) -> Vec<&Parameter> {
        self.params.iter().collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        self.params.iter_mut().collect()
    }

    pub fn stage(&self, tape: &mut Tape, requires_grad: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), requires_grad))
            .collect()
    }

    /// Builds the forward graph: `[n, c, h, w] -> [n, labels, grid_h, grid_w]`.
    pub fn forward_on_tape(&self, tape: &mut Tape, x: Var, staged: &[Var]) -> Result<Var> {
        let conv_block = |tape: &mut Tape, x: Var, w: Var, b: Var, stride: usize| -> Result<Var> {
            let padded = tape.pad2d(x, 1)?;
            let y = tape.conv2d(padded, w, Some(b), stride)?;
            Ok(tape.relu(y))
        };
        let e1 = conv_block(tape, x, staged[0], staged[1], 1)?;
        let e2 = conv_block(tape, e1, staged[2], staged[3], 2)?;
        let e3 = conv_block(tape, e2, staged[4], staged[5], 2)?;
        let u = tape.upsample2x(e3)?;
        let u = tape.concat_channels(u, e2)?;
        let u = conv_block(tape, u, staged[6], staged[7], 1)?;
        let u = tape.upsample2x(u)?;
        let u = tape.concat_channels(u, e1)?;
        let u = conv_block(tape, u, staged[8], staged[9], 1)?;
        let out = tape.conv2d(u, staged[10], Some(staged[11]), 1)?;
        tape.crop2d(out, 0, 0, self.grid.0, self.grid.1)
    }

    /// Predicted margin grids without recording gradients.
    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let staged = self.stage(&mut tape, false);
        let x = tape.constant(images.clone());
        let out = self.forward_on_tape(&mut tape, x, &staged)?;
        Ok(tape.value(out).clone())
    }

    /// Copies tape gradients back into the parameters.
    pub fn absorb_grads(&mut self, tape: &Tape, staged: &[Var]) {
        for (param, &var) in self.params.iter_mut().zip(staged) {
            param.grad = match tape.grad(var) {
                Some(g) => g.clone(),
                None => Tensor::zeros(param.value.shape()),
            };
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn output_grid_matches_placement_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        // MNIST with a 2x2 patch: 27x27 anchors
        let p = MarginPredictor::new(1, 28, 28, (27, 27), 10, &mut rng).unwrap();
        let x = Tensor::zeros(&[2, 1, 28, 28]);
        let y = p.forward(&x).unwrap();
        assert_eq!(y.shape(), &[2, 10, 27, 27]);
        // CIFAR with a 5x5 patch: 28x28 anchors
        let p = MarginPredictor::new(3, 32, 32, (28, 28), 10, &mut rng).unwrap();
        let x = Tensor::zeros(&[1, 3, 32, 32]);
        let y = p.forward(&x).unwrap();
        assert_eq!(y.shape(), &[1, 10, 28, 28]);
    }

    #[test]
    fn rejects_grids_and_sizes_that_cannot_work() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(MarginPredictor::new(1, 6, 6, (5, 5), 4, &mut rng).is_err());
        assert!(MarginPredictor::new(1, 28, 28, (29, 29), 4, &mut rng).is_err());
    }
}
