use rand::Rng;

use crate::error::{shape_err, Result};
use crate::real::Real;

/// Dense row-major array. Images are `[channels, height, width]`, convolution
/// weights `[out, in, kh, kw]`.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err(
                "Tensor::new",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// Uniform samples in `[-bound, bound]`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| {
            if bound > 0.0 {
                T::of(rng.gen_range(-bound..=bound))
            } else {
                T::zero()
            }
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// `(channels, height, width)` of a rank-3 tensor.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(shape_err(
                "dims3",
                format!("expected rank 3, got {:?}", self.shape),
            )),
        }
    }

    /// Plane `c` of a rank-3 tensor.
    pub fn channel(&self, c: usize) -> &[T] {
        let plane: usize = self.shape[1..].iter().product();
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let plane: usize = self.shape[1..].iter().product();
        &mut self.data[c * plane..(c + 1) * plane]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(shape_err(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::of(x.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Inner product over all elements, accumulated in f64.
    pub fn dot(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.as_f64() * b.as_f64())
            .sum()
    }

    /// Channels `start..start+len` of a rank-3 tensor.
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Self> {
        let (c, h, w) = self.dims3()?;
        if start + len > c {
            return Err(shape_err(
                "slice_channels",
                format!("channels {start}..{} of {c}", start + len),
            ));
        }
        let plane = h * w;
        Ok(Self {
            shape: vec![len, h, w],
            data: self.data[start * plane..(start + len) * plane].to_vec(),
        })
    }

    /// Stacks rank-3 tensors with equal spatial size along the channel axis.
    pub fn concat_channels(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err("concat_channels", "no inputs"))?;
        let (_, h, w) = first.dims3()?;
        let mut c = 0;
        let mut data = Vec::new();
        for p in parts {
            let (pc, ph, pw) = p.dims3()?;
            if (ph, pw) != (h, w) {
                return Err(shape_err(
                    "concat_channels",
                    format!("{ph}x{pw} vs {h}x{w}"),
                ));
            }
            c += pc;
            data.extend_from_slice(&p.data);
        }
        Ok(Self {
            shape: vec![c, h, w],
            data,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_length() {
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn slicing_and_concat_are_inverse() {
        let t = Tensor::<f64>::from_fn(&[5, 2, 3], |i| i as f64);
        let a = t.slice_channels(0, 2).unwrap();
        let b = t.slice_channels(2, 3).unwrap();
        assert_eq!(Tensor::concat_channels(&[&a, &b]).unwrap(), t);
        assert!(t.slice_channels(4, 2).is_err());
    }
}
