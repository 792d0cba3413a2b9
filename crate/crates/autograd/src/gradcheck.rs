//! Central finite-difference checks of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub eps: f64,
    /// Coordinates probed per input tensor; all of them when the tensor is smaller.
    pub samples_per_tensor: usize,
    pub seed: u64,
    /// When set, a coordinate whose forward and backward one-sided slopes
    /// differ by more than this is treated as sitting on a kink (ReLU, `abs`,
    /// argmax switch) and left out: central differences are meaningless
    /// there. Smooth points differ by about `|f''| * eps`.
    pub kink_tol: Option<f64>,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            eps: 1e-4,
            samples_per_tensor: 16,
            seed: 0,
            kink_tol: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `||analytic - numeric|| / max(||analytic||, ||numeric||)` over all probed coordinates.
    pub rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    /// Probes left out by the kink test.
    pub skipped: usize,
    /// Same ratio restricted to each input tensor.
    pub per_input: Vec<f64>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.rel_error <= tol
    }
}

fn ratio(diff2: f64, a2: f64, n2: f64) -> f64 {
    let den = a2.max(n2).sqrt();
    if den == 0.0 {
        diff2.sqrt()
    } else {
        diff2.sqrt() / den
    }
}

impl GradCheck {
    /// `build` must construct a scalar from the given inputs (bound as
    /// trainable leaves, in order). It is re-run for every probe, so it must be
    /// deterministic.
    pub fn run<F>(&self, inputs: &[Tensor<f64>], build: F) -> Result<GradCheckReport>
    where
        F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    {
        let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
            let mut g = Graph::new();
            let vars: Vec<Var> = xs.iter().map(|t| g.parameter(t.clone())).collect();
            let l = build(&mut g, &vars)?;
            Ok(g.value(l).data()[0])
        };

        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.parameter(t.clone())).collect();
        let loss = build(&mut g, &vars)?;
        g.backward(loss)?;
        let analytic: Vec<Vec<f64>> = inputs
            .iter()
            .zip(&vars)
            .map(|(t, &v)| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
            .collect();

        let base = match self.kink_tol {
            Some(_) => eval(inputs)?,
            None => 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut work: Vec<Tensor<f64>> = inputs.to_vec();
        let (mut d2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        let mut max_abs: f64 = 0.0;
        let mut checked = 0;
        let mut skipped = 0;
        let mut per_input = Vec::with_capacity(inputs.len());
        for ti in 0..inputs.len() {
            let len = inputs[ti].len();
            let coords: Vec<usize> = if len <= self.samples_per_tensor {
                (0..len).collect()
            } else {
                let mut c = sample(&mut rng, len, self.samples_per_tensor).into_vec();
                c.sort_unstable();
                c
            };
            let (mut td2, mut ta2, mut tn2) = (0.0, 0.0, 0.0);
            for j in coords {
                let orig = inputs[ti].data()[j];
                work[ti].data_mut()[j] = orig + self.eps;
                let up = eval(&work)?;
                work[ti].data_mut()[j] = orig - self.eps;
                let down = eval(&work)?;
                work[ti].data_mut()[j] = orig;
                if let Some(tol) = self.kink_tol {
                    if ((up - base) / self.eps - (base - down) / self.eps).abs() > tol {
                        skipped += 1;
                        continue;
                    }
                }
                let numeric = (up - down) / (2.0 * self.eps);
                let a = analytic[ti][j];
                let diff = a - numeric;
                td2 += diff * diff;
                ta2 += a * a;
                tn2 += numeric * numeric;
                max_abs = max_abs.max(diff.abs());
                checked += 1;
            }
            per_input.push(ratio(td2, ta2, tn2));
            d2 += td2;
            a2 += ta2;
            n2 += tn2;
        }
        Ok(GradCheckReport {
            rel_error: ratio(d2, a2, n2),
            max_abs_error: max_abs,
            checked,
            skipped,
            per_input,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_correct_gradient() {
        let x = Tensor::new(&[3], vec![0.3, -1.2, 2.0]).unwrap();
        let rep = GradCheck::default()
            .run(&[x], |g, v| {
                let s = g.square(v[0])?;
                g.sum(s)
            })
            .unwrap();
        assert!(rep.passes(1e-8), "{rep:?}");
        assert_eq!(rep.checked, 3);
    }

    #[test]
    fn kink_probes_are_skipped() {
        // relu probed right at its kink, next to a smooth coordinate
        let x = Tensor::new(&[2], vec![0.0, 0.7]).unwrap();
        let build = |g: &mut Graph<f64>, v: &[Var]| {
            let a = g.relu(v[0])?;
            g.sum(a)
        };
        let plain = GradCheck::default().run(&[x.clone()], build).unwrap();
        assert!(!plain.passes(1e-4));
        let gc = GradCheck {
            kink_tol: Some(1e-3),
            ..GradCheck::default()
        };
        let rep = gc.run(&[x], build).unwrap();
        assert_eq!((rep.checked, rep.skipped), (1, 1));
        assert!(rep.passes(1e-8), "{rep:?}");
    }
}
