//! Plain dense rank-4 tensor. Gradient tracking lives in [`crate::graph`];
//! this type is the passive value used for inputs, parameters and results.

use crate::elem::Elem;
use crate::error::{Error, Result};
use crate::shape::Shape;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<E: Elem> {
    shape: Shape,
    data: Vec<E>,
}

impl<E: Elem> Tensor<E> {
    pub fn new(shape: Shape, data: Vec<E>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {} wants {} values, got {}", shape, shape.len(), data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor { shape, data: vec![E::ZERO; shape.len()] }
    }

    pub fn full(shape: Shape, value: E) -> Self {
        Tensor { shape, data: vec![value; shape.len()] }
    }

    pub fn scalar(value: E) -> Self {
        Tensor { shape: Shape::scalar(), data: vec![value] }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> E) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for h in 0..shape.h {
                    for w in 0..shape.w {
                        data.push(f(n, c, h, w));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, h: usize, w: usize) -> E {
        self.data[self.shape.at(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: E) {
        let i = self.shape.at(n, c, h, w);
        self.data[i] = v;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Lossy element-type conversion (f32 <-> f64 and identity).
    pub fn convert<F: Elem>(&self) -> Tensor<F> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| F::from_f64(v.to_f64())).collect(),
        }
    }
}
