use rand::Rng;

use s2fuse_autograd::{Graph, ParamId, ParamStore, ParamVars, Real, Result, Tensor, Var};

/// How a freshly created weight tensor is filled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Fill {
    /// Uniform in `+-1/sqrt(fan_in)`; biases too.
    FanIn,
    Zero,
}

/// Zero-padded same-size convolution with optional bias.
#[derive(Clone, Debug)]
pub(crate) struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub k: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore<f32>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        bias: bool,
        fill: Fill,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / ((cin * k * k) as f64).sqrt();
        let mut make = |shape: &[usize]| match fill {
            Fill::FanIn => Tensor::uniform(shape, bound, rng),
            Fill::Zero => Tensor::zeros(shape),
        };
        let w = make(&[cout, cin, k, k]);
        let b = bias.then(|| make(&[cout]));
        Self {
            w: store.add(format!("{name}.w"), w),
            b: b.map(|b| store.add(format!("{name}.b"), b)),
            k,
        }
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<T>, vars: &ParamVars, x: Var) -> Result<Var> {
        g.conv2d(x, vars[self.w], self.b.map(|b| vars[b]), self.k / 2)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        std::iter::once(self.w).chain(self.b)
    }
}
