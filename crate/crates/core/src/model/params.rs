//! Named parameter storage shared by the forward pass, gradients and the optimizer.

use rand::Rng;

use super::tensor::Mat;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Mat<T>>,
}

pub enum Init {
    Zeros,
    Ones,
    /// Glorot/Xavier uniform over (fan_in, fan_out) = (rows, cols).
    Xavier,
    /// Uniform with the given standard deviation.
    Uniform(f64),
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add<R: Rng>(&mut self, name: String, rows: usize, cols: usize, init: Init, rng: &mut R) -> ParamId {
        let mut m = Mat::zeros(rows, cols);
        let bound = match init {
            Init::Zeros => None,
            Init::Ones => {
                m.data.iter_mut().for_each(|v| *v = T::one());
                None
            }
            Init::Xavier => Some((6.0 / (rows + cols) as f64).sqrt()),
            Init::Uniform(std) => Some(std * 3f64.sqrt()),
        };
        if let Some(b) = bound {
            for v in &mut m.data {
                *v = T::from_f64_lossy(rng.gen_range(-b..b));
            }
        }
        self.names.push(name);
        self.tensors.push(m);
        ParamId(self.tensors.len() - 1)
    }

    pub fn zeros_like(&self) -> Self {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Mat::zeros_like).collect(),
        }
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &Mat<T> {
        &self.tensors[id.0]
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat<T> {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Mat<T>> {
        self.tensors.iter_mut()
    }

    pub fn tensors(&self) -> &[Mat<T>] {
        &self.tensors
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Mat::len).sum()
    }

    pub fn add_assign(&mut self, other: &ParamSet<T>) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b);
        }
    }

    pub fn fill_zero(&mut self) {
        self.tensors.iter_mut().for_each(Mat::fill_zero);
    }

    pub fn scale(&mut self, s: T) {
        self.tensors.iter_mut().for_each(|m| m.scale(s));
    }

    pub fn global_norm(&self) -> T {
        self.tensors.iter().map(Mat::sum_sq).sum::<T>().sqrt()
    }

    /// Flat (tensor, offset) address of the `k`-th scalar.
    pub fn locate(&self, mut k: usize) -> (ParamId, usize) {
        for (i, t) in self.tensors.iter().enumerate() {
            if k < t.len() {
                return (ParamId(i), k);
            }
            k -= t.len();
        }
        panic!("scalar index out of range");
    }
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}
