//! Minimal N-dimensional tensor engine with reverse-mode differentiation.
//!
//! Tensors are dense row-major arrays laid out `[batch, channels, spatial...]`
//! with 1 to 3 spatial axes. Convolution kernels use `[out, in, spatial...]`
//! (`[in, out, spatial...]` for transposed convolution, so one kernel tensor
//! serves as its own adjoint). The op set is exactly what the network needs;
//! see [`graph::Graph`] for the recording tape.

pub mod elem;
pub mod gemm;
pub mod gemm_strided;
pub mod gradcheck;
pub mod graph;
pub mod kernels;

pub use elem::Element;
pub use graph::{Graph, TensorId};

use std::sync::Arc;

use crate::error::{Error, Result};

/// Dense tensor shape: explicit extents, `[batch, channels, spatial...]` by
/// convention for activations and `[out_ch, in_ch, spatial...]` for kernels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Shape {
    pub dims: Vec<usize>,
}

impl Shape {
    pub fn new(dims: Vec<usize>) -> Self {
        Shape { dims }
    }

    /// Activation shape helper.
    pub fn act(batch: usize, channels: usize, spatial: &[usize]) -> Self {
        let mut dims = Vec::with_capacity(2 + spatial.len());
        dims.push(batch);
        dims.push(channels);
        dims.extend_from_slice(spatial);
        Shape { dims }
    }

    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn batch(&self) -> usize {
        self.dims[0]
    }

    pub fn channels(&self) -> usize {
        self.dims[1]
    }

    pub fn spatial(&self) -> &[usize] {
        &self.dims[2..]
    }

    pub fn spatial_rank(&self) -> usize {
        self.dims.len() - 2
    }

    /// Number of voxels in one channel plane.
    pub fn spatial_len(&self) -> usize {
        self.spatial().iter().product()
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[")?;
        for (i, d) in self.dims.iter().enumerate() {
            if i > 0 {
                write!(f, "x")?;
            }
            write!(f, "{d}")?;
        }
        write!(f, "]")
    }
}

/// Dense tensor. Data is shared by `Arc`, so cloning a tensor or saving it
/// on the tape for the backward pass never copies the buffer.
#[derive(Clone, Debug)]
pub struct Tensor<T: Element> {
    shape: Shape,
    data: Arc<Vec<T>>,
    /// Identity on the recording graph of the current forward pass, if any.
    pub(crate) id: Option<TensorId>,
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Self> {
        if shape.numel() != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {} holds {} values, got {}", shape, shape.numel(), data.len()),
            ));
        }
        Ok(Tensor { shape, data: Arc::new(data), id: None })
    }

    pub fn zeros(shape: Shape) -> Self {
        let n = shape.numel();
        Tensor { shape, data: Arc::new(vec![T::zero(); n]), id: None }
    }

    pub fn filled(shape: Shape, value: T) -> Self {
        let n = shape.numel();
        Tensor { shape, data: Arc::new(vec![value; n]), id: None }
    }

    pub fn scalar(value: T) -> Self {
        Tensor { shape: Shape::new(vec![1]), data: Arc::new(vec![value]), id: None }
    }

    pub(crate) fn from_arc(shape: Shape, data: Arc<Vec<T>>) -> Self {
        debug_assert_eq!(shape.numel(), data.len());
        Tensor { shape, data, id: None }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<T>> {
        Arc::clone(&self.data)
    }

    pub fn numel(&self) -> usize {
        self.shape.numel()
    }

    /// Mutable access; copies only if the buffer is shared (e.g. still
    /// referenced by a live graph).
    pub fn data_mut(&mut self) -> &mut [T] {
        self.id = None;
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    pub fn item(&self) -> T {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    /// Reinterpret the buffer under a new shape with the same element count.
    pub fn reshaped(&self, shape: Shape) -> Result<Self> {
        if shape.numel() != self.numel() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {} as {}", self.shape, shape),
            ));
        }
        Ok(Tensor { shape, data: Arc::clone(&self.data), id: None })
    }

    /// Elementwise conversion, used to run f32 checkpoints in f64 test mode.
    pub fn cast<U: Element>(&self) -> Tensor<U> {
        let data = self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect();
        Tensor { shape: self.shape.clone(), data: Arc::new(data), id: None }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_accessors() {
        let s = Shape::act(2, 3, &[4, 5, 6]);
        assert_eq!(s.batch(), 2);
        assert_eq!(s.channels(), 3);
        assert_eq!(s.spatial(), &[4, 5, 6]);
        assert_eq!(s.spatial_rank(), 3);
        assert_eq!(s.numel(), 720);
        assert_eq!(s.spatial_len(), 120);
    }

    #[test]
    fn tensor_rejects_length_mismatch() {
        let err = Tensor::<f32>::new(Shape::new(vec![2, 2]), vec![0.0; 3]).unwrap_err();
        assert!(err.to_string().contains("holds 4 values"));
    }

    #[test]
    fn data_mut_does_not_disturb_shared_buffer() {
        let a = Tensor::<f32>::filled(Shape::new(vec![4]), 1.0);
        let mut b = a.clone();
        b.data_mut()[0] = 7.0;
        assert_eq!(a.data()[0], 1.0);
        assert_eq!(b.data()[0], 7.0);
    }
}
