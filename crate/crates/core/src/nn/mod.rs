//! Minimal differentiable building blocks with hand-written backward passes.
//!
//! All parameters of a model live in one flat [`Params`] buffer described by a
//! shared [`ParamLayout`]; gradients use the same layout, so optimizers,
//! checkpoints and finite-difference checks work on plain slices. Layers are
//! generic over [`Scalar`] so the same code runs in `f32` for training and
//! inference and in `f64` for gradient checking.

mod adam;
mod layers;

use std::fmt::Debug;
use std::ops::{AddAssign, MulAssign, SubAssign};
use std::sync::Arc;

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};
use rand::Rng;
use rand_distr::StandardNormal;

pub use adam::{Adam, AdamConfig};
pub use layers::{
    mse, mse_grad, sigmoid, silu, silu_grad, sinusoidal_embedding, Attention, AttentionCache,
    Backbone, BackboneCache, Block, BlockCache, FeedForward, FeedForwardCache, LayerNorm,
    LayerNormCache, Linear,
};

/// Floating-point element type accepted by the layers.
pub trait Scalar:
    LinalgScalar
    + Float
    + FromPrimitive
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + Debug
    + Send
    + Sync
    + 'static
{
    fn from_single(v: f32) -> Self;
    fn to_single(self) -> f32;
    fn from_f64_lossy(v: f64) -> Self;
}

impl Scalar for f32 {
    fn from_single(v: f32) -> Self {
        v
    }
    fn to_single(self) -> f32 {
        self
    }
    fn from_f64_lossy(v: f64) -> Self {
        v as f32
    }
}

impl Scalar for f64 {
    fn from_single(v: f32) -> Self {
        f64::from(v)
    }
    fn to_single(self) -> f32 {
        self as f32
    }
    fn from_f64_lossy(v: f64) -> Self {
        v
    }
}

/// Handle to one named tensor inside a [`ParamLayout`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

/// Names, shapes and offsets of every tensor of a model.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParamLayout {
    entries: Vec<ParamEntry>,
    total: usize,
}

impl ParamLayout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        let len = shape.iter().product();
        self.entries.push(ParamEntry {
            name,
            shape: shape.to_vec(),
            offset: self.total,
            len,
        });
        self.total += len;
        ParamId(self.entries.len() - 1)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    /// Total scalar count.
    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }
}

/// A flat parameter (or gradient) buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<S> {
    layout: Arc<ParamLayout>,
    data: Vec<S>,
}

impl<S: Scalar> Params<S> {
    pub fn zeros(layout: Arc<ParamLayout>) -> Self {
        let data = vec![S::zero(); layout.len()];
        Self { layout, data }
    }

    pub fn from_vec(layout: Arc<ParamLayout>, data: Vec<S>) -> Option<Self> {
        (data.len() == layout.len()).then_some(Self { layout, data })
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn slice(&self, id: ParamId) -> &[S] {
        let e = self.layout.entry(id);
        &self.data[e.offset..e.offset + e.len]
    }

    pub fn slice_mut(&mut self, id: ParamId) -> &mut [S] {
        let e = self.layout.entry(id);
        let (off, len) = (e.offset, e.len);
        &mut self.data[off..off + len]
    }

    pub fn mat(&self, id: ParamId) -> ArrayView2<'_, S> {
        let e = self.layout.entry(id);
        ArrayView2::from_shape((e.shape[0], e.shape[1]), self.slice(id)).expect("matrix param")
    }

    pub fn mat_mut(&mut self, id: ParamId) -> ArrayViewMut2<'_, S> {
        let e = self.layout.entry(id);
        let shape = (e.shape[0], e.shape[1]);
        ArrayViewMut2::from_shape(shape, self.slice_mut(id)).expect("matrix param")
    }

    pub fn vec(&self, id: ParamId) -> ArrayView1<'_, S> {
        ArrayView1::from(self.slice(id))
    }

    pub fn vec_mut(&mut self, id: ParamId) -> ArrayViewMut1<'_, S> {
        ArrayViewMut1::from(self.slice_mut(id))
    }

    pub fn fill(&mut self, v: S) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Euclidean norm over every tensor.
    pub fn norm(&self) -> S {
        self.data.iter().fold(S::zero(), |acc, &v| acc + v * v).sqrt()
    }

    pub fn scale(&mut self, k: S) {
        self.data.iter_mut().for_each(|v| *v *= k);
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.data.len(), other.data.len());
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, &b)| *a += b);
    }

    /// Element-type conversion, sharing the layout.
    pub fn cast<T: Scalar>(&self) -> Params<T> {
        Params {
            layout: Arc::clone(&self.layout),
            data: self
                .data
                .iter()
                .map(|&v| T::from_f64_lossy(v.to_f64().unwrap_or(f64::NAN)))
                .collect(),
        }
    }

    /// Fills tensor `id` with `N(0, std^2)` draws.
    pub fn init_normal<R: Rng + ?Sized>(&mut self, id: ParamId, std: f64, rng: &mut R) {
        for v in self.slice_mut(id) {
            *v = S::from_f64_lossy(std * rng.sample::<f64, _>(StandardNormal));
        }
    }

    pub fn init_const(&mut self, id: ParamId, value: f64) {
        let value = S::from_f64_lossy(value);
        self.slice_mut(id).iter_mut().for_each(|v| *v = value);
    }
}
