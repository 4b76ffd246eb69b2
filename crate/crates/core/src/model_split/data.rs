//! Seeded synthetic training data.
//!
//! Inputs are drawn from `U[-1, 1]`. A random linear teacher labels each
//! sample: for cross-entropy the target is the one-hot argmax of the
//! teacher output (a linearly separable task), for MSE it is
//! `tanh(teacher · x)`.

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Loss, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub targets: Tensor,
}

impl Dataset {
    pub fn synthetic(
        seed: u64,
        samples: usize,
        input_width: usize,
        output_width: usize,
        loss: Loss,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let unit = Uniform::new_inclusive(-1.0, 1.0);
        let teacher: Vec<f64> = (0..input_width * output_width)
            .map(|_| unit.sample(&mut rng))
            .collect();
        let xs: Vec<f64> = (0..samples * input_width)
            .map(|_| unit.sample(&mut rng))
            .collect();
        let mut ts = vec![0.0; samples * output_width];
        for s in 0..samples {
            let x = &xs[s * input_width..(s + 1) * input_width];
            let scores: Vec<f64> = (0..output_width)
                .map(|k| {
                    let mut acc = 0.0;
                    for i in 0..input_width {
                        acc += teacher[k * input_width + i] * x[i];
                    }
                    acc
                })
                .collect();
            let row = &mut ts[s * output_width..(s + 1) * output_width];
            match loss {
                Loss::Mse => {
                    for (t, v) in row.iter_mut().zip(&scores) {
                        *t = v.tanh();
                    }
                }
                Loss::SoftmaxCrossEntropy => {
                    let best =
                        scores
                            .iter()
                            .enumerate()
                            .fold(0, |best, (k, v)| if *v > scores[best] { k } else { best });
                    row[best] = 1.0;
                }
            }
        }
        Self {
            inputs: Tensor::from_vec(samples, input_width, xs).expect("sized"),
            targets: Tensor::from_vec(samples, output_width, ts).expect("sized"),
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rows `[k*batch, (k+1)*batch)` as an (inputs, targets) pair.
    pub fn batch(&self, k: usize, batch: usize) -> (Tensor, Tensor) {
        let (start, end) = (k * batch, (k + 1) * batch);
        (
            self.inputs.slice_rows(start, end),
            self.targets.slice_rows(start, end),
        )
    }

    /// Consecutive batches covering the whole set (the last may be short).
    pub fn batches(&self, batch: usize) -> Vec<(Tensor, Tensor)> {
        (0..self.len().div_ceil(batch))
            .map(|k| {
                let end = ((k + 1) * batch).min(self.len());
                (
                    self.inputs.slice_rows(k * batch, end),
                    self.targets.slice_rows(k * batch, end),
                )
            })
            .collect()
    }
}
