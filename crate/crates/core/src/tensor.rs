use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense n-dimensional parameter tensor (conv kernels, linear maps,
/// per-channel vectors, scalars). Layout is row-major in `dims` order;
/// conv kernels use dims `[kh, kw, c_in, c_out]` so the output-channel
/// index is innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(dims: &[usize]) -> Self {
        let n = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn from_vec(dims: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if data.len() != n {
            return Err(Error::shape("Tensor::from_vec", n, data.len()));
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            data,
        })
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            dims: vec![1],
            data: vec![v],
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn byte_size(&self) -> usize {
        self.data.len() * T::BYTES
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Single-element accessor for scalar parameters.
    pub fn value(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn zero(&mut self) {
        self.fill(T::zero());
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::shape(
                "Tensor::add_assign",
                format!("{:?}", self.dims),
                format!("{:?}", other.dims),
            ));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: T) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn max_abs(&self) -> f64 {
        self.data
            .iter()
            .map(|v| v.as_f64().abs())
            .fold(0.0, f64::max)
    }

    pub fn linf_diff(&self, other: &Tensor<T>) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_and_accumulate() {
        let mut a = Tensor::<f64>::zeros(&[2, 3]);
        assert_eq!(a.numel(), 6);
        let b = Tensor::from_vec(&[2, 3], vec![1.0; 6]).unwrap();
        a.add_assign(&b).unwrap();
        a.add_assign(&b).unwrap();
        assert_eq!(a.data(), &[2.0; 6]);
        a.scale(0.5);
        assert_eq!(a.data(), &[1.0; 6]);
    }

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::<f32>::from_vec(&[2, 2], vec![0.0; 3]).is_err());
    }
}
