//! Low-rank adapters on frozen linear layers, and the rank-`r` projections
//! `h = A·x` they expose as a distillation signal.

use rand::Rng;

use crate::error::{Error, Result};
use crate::data::PublicSet;
use crate::model::ModelState;
use crate::tensor::Tensor2D;

/// Trainable factors of one adapted layer. The effective weight is
/// `W' + (alpha / r)·B·A`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    /// `r × d_in`
    pub a: Tensor2D,
    /// `d_out × r`
    pub b: Tensor2D,
    pub alpha: f64,
}

impl LoraAdapter {
    pub fn new(a: Tensor2D, b: Tensor2D, alpha: f64) -> Result<Self> {
        if a.rows() == 0 || a.rows() != b.cols() {
            return Err(Error::shape(
                "LoraAdapter::new",
                format!("A is {:?}, B is {:?}", a.shape(), b.shape()),
            ));
        }
        if !alpha.is_finite() {
            return Err(Error::input("LoraAdapter::new", "alpha must be finite"));
        }
        Ok(Self { a, b, alpha })
    }

    #[inline]
    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    #[inline]
    pub fn d_in(&self) -> usize {
        self.a.cols()
    }

    #[inline]
    pub fn d_out(&self) -> usize {
        self.b.rows()
    }

    /// The `alpha / r` multiplier on `B·A`.
    #[inline]
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    pub fn num_params(&self) -> usize {
        self.a.data().len() + self.b.data().len()
    }
}

/// Gaussian `A` with variance `1/r`, zero `B`.
pub fn lora_init<R: Rng + ?Sized>(
    rank: usize,
    d_in: usize,
    d_out: usize,
    alpha: f64,
    rng: &mut R,
) -> Result<LoraAdapter> {
    if rank == 0 || rank > d_in.min(d_out) {
        return Err(Error::input(
            "lora_init",
            format!("rank {rank} outside [1, min({d_in}, {d_out})]"),
        ));
    }
    let a = Tensor2D::gaussian(rank, d_in, (1.0 / rank as f64).sqrt(), rng);
    LoraAdapter::new(a, Tensor2D::zeros(d_out, rank), alpha)
}

/// `W' + (alpha/r)·B·A`; inputs are left untouched.
pub fn merge_weights(frozen: &Tensor2D, adapter: &LoraAdapter) -> Result<Tensor2D> {
    if frozen.shape() != (adapter.d_out(), adapter.d_in()) {
        return Err(Error::shape(
            "merge_weights",
            format!(
                "frozen {:?} vs adapter {}x{}",
                frozen.shape(),
                adapter.d_out(),
                adapter.d_in()
            ),
        ));
    }
    let mut merged = frozen.clone();
    merged.add_scaled(&adapter.b.matmul(&adapter.a)?, adapter.scale())?;
    Ok(merged)
}

/// `h = A·x`, unscaled.
pub fn lora_projection(adapter: &LoraAdapter, x: &[f64]) -> Result<Vec<f64>> {
    adapter.a.matvec(x).map_err(|_| {
        Error::shape(
            "lora_projection",
            format!("input length {} but d_in = {}", x.len(), adapter.d_in()),
        )
    })
}

/// Per-sample rank-`r` projections for each projection layer of a model.
/// `layers[l]` is `num_samples × rank`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionBundle {
    num_samples: usize,
    rank: usize,
    layers: Vec<Tensor2D>,
}

impl ProjectionBundle {
    pub fn new(num_samples: usize, rank: usize, layers: Vec<Tensor2D>) -> Result<Self> {
        if let Some(t) = layers.iter().find(|t| t.shape() != (num_samples, rank)) {
            return Err(Error::shape(
                "ProjectionBundle::new",
                format!("layer is {:?}, expected ({num_samples}, {rank})", t.shape()),
            ));
        }
        Ok(Self { num_samples, rank, layers })
    }

    /// A bundle carrying no layers; used when projections are not exchanged.
    pub fn empty(num_samples: usize, rank: usize) -> Self {
        Self { num_samples, rank, layers: Vec::new() }
    }

    pub fn num_samples(&self) -> usize {
        self.num_samples
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[Tensor2D] {
        &self.layers
    }

    pub fn into_layers(self) -> Vec<Tensor2D> {
        self.layers
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

/// Projections of every public sample at each of the model's projection layers,
/// taken at that layer's input activation.
pub fn extract_projections(model: &ModelState, public: &PublicSet) -> Result<ProjectionBundle> {
    if public.is_empty() {
        return Err(Error::input("extract_projections", "public set is empty"));
    }
    let out = model.forward(public.features())?;
    model.projection_bundle(&out)
}
