//! Feed-forward classifiers with a frozen backbone and trainable LoRA
//! adapters: forward, manual backward, SGD, and the checkpoint format.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledSet;
use crate::error::{Error, Result};
use crate::lora::{lora_init, LoraAdapter, ProjectionBundle};
use crate::rng::{stream_rng, Stream};
use crate::tensor::{argmax, Tensor2D};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative evaluated at the pre-activation `z`.
    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }

    fn code(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Tanh),
            _ => None,
        }
    }
}

/// Architecture of a party's model. The activation follows every linear
/// layer except the last, whose outputs are the logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// `(d_in, d_out)` per linear layer.
    pub layer_dims: Vec<(usize, usize)>,
    pub activation: Activation,
    pub num_classes: usize,
    /// Layers carrying a LoRA adapter, ascending.
    pub adapted_layers: Vec<usize>,
    /// Adapted layers whose `h = A·x` is exchanged, ascending.
    pub projection_layers: Vec<usize>,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    /// Multiply `h` by `alpha / r`. Off by default: `h = A·x` as written.
    pub scale_projection: bool,
}

impl ModelSpec {
    /// An MLP over `sizes = [d_0, d_1, ..., c]` with every layer adapted and
    /// the projection taken at the last (logit-producing) layer.
    pub fn mlp(sizes: &[usize], activation: Activation, lora_rank: usize, lora_alpha: f64) -> Self {
        let layer_dims: Vec<_> = sizes.windows(2).map(|w| (w[0], w[1])).collect();
        let n = layer_dims.len();
        Self {
            layer_dims,
            activation,
            num_classes: sizes.last().copied().unwrap_or(0),
            adapted_layers: (0..n).collect(),
            projection_layers: n.checked_sub(1).into_iter().collect(),
            lora_rank,
            lora_alpha,
            scale_projection: false,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layer_dims.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims.first().map_or(0, |d| d.0)
    }

    pub fn validate(&self) -> Result<()> {
        const OP: &str = "ModelSpec::validate";
        if self.layer_dims.is_empty() {
            return Err(Error::input(OP, "no layers"));
        }
        for (i, &(d_in, d_out)) in self.layer_dims.iter().enumerate() {
            if d_in == 0 || d_out == 0 {
                return Err(Error::input(OP, format!("layer {i} has a zero dimension")));
            }
        }
        for (i, w) in self.layer_dims.windows(2).enumerate() {
            if w[0].1 != w[1].0 {
                return Err(Error::input(
                    OP,
                    format!("layer {i} outputs {} but layer {} takes {}", w[0].1, i + 1, w[1].0),
                ));
            }
        }
        if self.layer_dims.last().map(|d| d.1) != Some(self.num_classes) {
            return Err(Error::input(OP, "last layer width must equal num_classes"));
        }
        if !strictly_increasing(&self.adapted_layers)
            || self.adapted_layers.iter().any(|&l| l >= self.num_layers())
        {
            return Err(Error::input(OP, "adapted_layers must be ascending valid layer indices"));
        }
        if !strictly_increasing(&self.projection_layers)
            || self.projection_layers.iter().any(|l| !self.adapted_layers.contains(l))
        {
            return Err(Error::input(OP, "projection_layers must be ascending adapted layers"));
        }
        if !self.lora_alpha.is_finite() {
            return Err(Error::input(OP, "lora_alpha must be finite"));
        }
        for &l in &self.adapted_layers {
            let (d_in, d_out) = self.layer_dims[l];
            if self.lora_rank == 0 || self.lora_rank > d_in.min(d_out) {
                return Err(Error::input(
                    OP,
                    format!("rank {} invalid for layer {l} ({d_in}->{d_out})", self.lora_rank),
                ));
            }
        }
        Ok(())
    }
}

fn strictly_increasing(v: &[usize]) -> bool {
    v.windows(2).all(|w| w[0] < w[1])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// L2 coefficient on adapter parameters.
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Desk-scale default of 5; a private shard holds only a few batches.
    pub local_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { learning_rate: 0.001, weight_decay: 0.001, batch_size: 32, local_epochs: 5 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::input("TrainConfig", "learning_rate must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::input("TrainConfig", "weight_decay must be nonnegative"));
        }
        if self.batch_size == 0 {
            return Err(Error::input("TrainConfig", "batch_size must be at least 1"));
        }
        Ok(())
    }
}

static NEXT_MODEL_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_MODEL_ID.fetch_add(1, Ordering::Relaxed)
}

/// Frozen backbone plus adapters. Only adapters change after construction.
#[derive(Debug)]
pub struct ModelState {
    spec: ModelSpec,
    weights: Vec<Tensor2D>,
    biases: Vec<Vec<f64>>,
    adapters: Vec<Option<LoraAdapter>>,
    // (id, generation) ties a forward cache to the exact parameters it saw.
    id: u64,
    generation: u64,
}

impl Clone for ModelState {
    fn clone(&self) -> Self {
        Self {
            spec: self.spec.clone(),
            weights: self.weights.clone(),
            biases: self.biases.clone(),
            adapters: self.adapters.clone(),
            id: fresh_id(),
            generation: 0,
        }
    }
}

impl PartialEq for ModelState {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec
            && self.weights == other.weights
            && self.biases == other.biases
            && self.adapters == other.adapters
    }
}

/// Everything backward needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    model_id: u64,
    generation: u64,
    batch: usize,
    /// Input to each layer.
    inputs: Vec<Tensor2D>,
    /// Pre-activation output of each layer.
    pre: Vec<Tensor2D>,
    /// `X·Aᵀ` for adapted layers.
    low: Vec<Option<Tensor2D>>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Tensor2D,
    /// `h` for each adapted layer, in `adapted_layers` order.
    pub projections: Vec<Tensor2D>,
    pub cache: ForwardCache,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGrad {
    pub a: Tensor2D,
    pub b: Tensor2D,
}

/// Gradients per layer; `None` for layers without an adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGrads(pub Vec<Option<AdapterGrad>>);

impl AdapterGrads {
    pub fn iter(&self) -> impl Iterator<Item = &AdapterGrad> {
        self.0.iter().flatten()
    }

    pub fn is_zero(&self) -> bool {
        self.iter().all(|g| g.a.data().iter().chain(g.b.data()).all(|&v| v == 0.0))
    }
}

impl ModelState {
    /// Backbone weights are N(0, 1/d_in) from `backbone_seed` (so every party
    /// built with the same spec and seed shares them); biases start at zero.
    /// Adapters come from `adapter_seed`.
    pub fn new(spec: ModelSpec, backbone_seed: u64, adapter_seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = stream_rng(backbone_seed, Stream::Backbone, &[]);
        let weights = spec
            .layer_dims
            .iter()
            .map(|&(d_in, d_out)| Tensor2D::gaussian(d_out, d_in, 1.0 / (d_in as f64).sqrt(), &mut rng))
            .collect();
        let biases = spec.layer_dims.iter().map(|&(_, d_out)| vec![0.0; d_out]).collect();
        let mut rng = stream_rng(adapter_seed, Stream::Adapter, &[]);
        let mut adapters = vec![None; spec.num_layers()];
        for &l in &spec.adapted_layers {
            let (d_in, d_out) = spec.layer_dims[l];
            adapters[l] = Some(lora_init(spec.lora_rank, d_in, d_out, spec.lora_alpha, &mut rng)?);
        }
        Ok(Self { spec, weights, biases, adapters, id: fresh_id(), generation: 0 })
    }

    /// Assembles a model from explicit parameters.
    pub fn from_parts(
        spec: ModelSpec,
        weights: Vec<Tensor2D>,
        biases: Vec<Vec<f64>>,
        adapters: Vec<Option<LoraAdapter>>,
    ) -> Result<Self> {
        const OP: &str = "ModelState::from_parts";
        spec.validate()?;
        let n = spec.num_layers();
        if weights.len() != n || biases.len() != n || adapters.len() != n {
            return Err(Error::shape(OP, "expected one weight, bias and adapter slot per layer"));
        }
        for (l, &(d_in, d_out)) in spec.layer_dims.iter().enumerate() {
            if weights[l].shape() != (d_out, d_in) || biases[l].len() != d_out {
                return Err(Error::shape(OP, format!("layer {l} parameters do not match spec")));
            }
            match (&adapters[l], spec.adapted_layers.contains(&l)) {
                (Some(ad), true) => {
                    if ad.rank() != spec.lora_rank || ad.d_in() != d_in || ad.d_out() != d_out {
                        return Err(Error::shape(OP, format!("adapter {l} does not match spec")));
                    }
                }
                (None, false) => {}
                _ => return Err(Error::shape(OP, format!("adapter presence mismatch at layer {l}"))),
            }
        }
        Ok(Self { spec, weights, biases, adapters, id: fresh_id(), generation: 0 })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn frozen_weight(&self, layer: usize) -> &Tensor2D {
        &self.weights[layer]
    }

    pub fn bias(&self, layer: usize) -> &[f64] {
        &self.biases[layer]
    }

    pub fn adapter(&self, layer: usize) -> Option<&LoraAdapter> {
        self.adapters.get(layer).and_then(Option::as_ref)
    }

    /// Direct adapter access. Bumps the generation so outstanding caches are
    /// rejected.
    pub fn adapter_mut(&mut self, layer: usize) -> Option<&mut LoraAdapter> {
        self.generation += 1;
        self.adapters.get_mut(layer).and_then(Option::as_mut)
    }

    pub fn forward(&self, batch: &Tensor2D) -> Result<ForwardOutput> {
        if batch.cols() != self.spec.input_dim() {
            return Err(Error::shape(
                "model_forward",
                format!("batch has {} features, model expects {}", batch.cols(), self.spec.input_dim()),
            ));
        }
        let n = self.spec.num_layers();
        let mut inputs = Vec::with_capacity(n);
        let mut pre = Vec::with_capacity(n);
        let mut low = Vec::with_capacity(n);
        let mut projections = Vec::with_capacity(self.spec.adapted_layers.len());
        let mut x = batch.clone();
        for l in 0..n {
            let mut z = x.matmul_t(&self.weights[l])?;
            for r in 0..z.rows() {
                for (v, b) in z.row_mut(r).iter_mut().zip(&self.biases[l]) {
                    *v += b;
                }
            }
            let lo = match &self.adapters[l] {
                Some(ad) => {
                    let lo = x.matmul_t(&ad.a)?;
                    z.add_scaled(&lo.matmul_t(&ad.b)?, ad.scale())?;
                    projections.push(if self.spec.scale_projection {
                        lo.scaled(ad.scale())
                    } else {
                        lo.clone()
                    });
                    Some(lo)
                }
                None => None,
            };
            let next = if l + 1 < n {
                let mut a = z.clone();
                let act = self.spec.activation;
                a.data_mut().iter_mut().for_each(|v| *v = act.apply(*v));
                Some(a)
            } else {
                None
            };
            inputs.push(x);
            pre.push(z);
            low.push(lo);
            if let Some(a) = next {
                x = a;
            } else {
                break;
            }
        }
        let logits = pre.last().cloned().expect("at least one layer");
        Ok(ForwardOutput {
            logits,
            projections,
            cache: ForwardCache {
                model_id: self.id,
                generation: self.generation,
                batch: batch.rows(),
                inputs,
                pre,
                low,
            },
        })
    }

    pub fn logits(&self, batch: &Tensor2D) -> Result<Tensor2D> {
        Ok(self.forward(batch)?.logits)
    }

    /// Selects the projection layers out of a forward pass.
    pub fn projection_bundle(&self, out: &ForwardOutput) -> Result<ProjectionBundle> {
        let layers = self
            .spec
            .projection_layers
            .iter()
            .map(|l| {
                let pos = self.spec.adapted_layers.iter().position(|a| a == l).expect("validated");
                out.projections[pos].clone()
            })
            .collect();
        ProjectionBundle::new(out.logits.rows(), self.spec.lora_rank, layers)
    }

    /// Adapter gradients given upstream gradients on the logits and,
    /// optionally, on the projections (one per `projection_layers` entry).
    pub fn backward(
        &self,
        cache: &ForwardCache,
        d_logits: &Tensor2D,
        d_projections: Option<&[Tensor2D]>,
    ) -> Result<AdapterGrads> {
        const OP: &str = "model_backward";
        if cache.model_id != self.id || cache.generation != self.generation {
            return Err(Error::contract(OP, "forward cache does not belong to the current model parameters"));
        }
        if d_logits.shape() != (cache.batch, self.spec.num_classes) {
            return Err(Error::shape(
                OP,
                format!("d_logits is {:?}, expected ({}, {})", d_logits.shape(), cache.batch, self.spec.num_classes),
            ));
        }
        if let Some(dp) = d_projections {
            if dp.len() != self.spec.projection_layers.len()
                || dp.iter().any(|t| t.shape() != (cache.batch, self.spec.lora_rank))
            {
                return Err(Error::shape(OP, "projection gradients do not match projection layers"));
            }
        }
        let n = self.spec.num_layers();
        let mut grads: Vec<Option<AdapterGrad>> = vec![None; n];
        let mut dz = d_logits.clone();
        for l in (0..n).rev() {
            let x = &cache.inputs[l];
            let mut dx = if l > 0 { Some(dz.matmul(&self.weights[l])?) } else { None };
            if let Some(ad) = &self.adapters[l] {
                let lo = cache.low[l].as_ref().expect("adapted layer has cached projection");
                let s = ad.scale();
                let mut db = dz.t_matmul(lo)?;
                db.data_mut().iter_mut().for_each(|v| *v *= s);
                let mut dlo = dz.matmul(&ad.b)?.scaled(s);
                if let (Some(dp), Some(pos)) =
                    (d_projections, self.spec.projection_layers.iter().position(|&p| p == l))
                {
                    let hs = if self.spec.scale_projection { s } else { 1.0 };
                    dlo.add_scaled(&dp[pos], hs)?;
                }
                let da = dlo.t_matmul(x)?;
                if let Some(dx) = dx.as_mut() {
                    dx.add_scaled(&dlo.matmul(&ad.a)?, 1.0)?;
                }
                grads[l] = Some(AdapterGrad { a: da, b: db });
            }
            if let Some(mut dx) = dx {
                let act = self.spec.activation;
                for (g, &z) in dx.data_mut().iter_mut().zip(cache.pre[l - 1].data()) {
                    *g *= act.derivative(z);
                }
                dz = dx;
            }
        }
        Ok(AdapterGrads(grads))
    }

    /// `p ← p − lr·(g + weight_decay·p)` on adapter parameters only.
    pub fn sgd_step(&mut self, grads: &AdapterGrads, cfg: &TrainConfig) -> Result<()> {
        if grads.0.len() != self.adapters.len() {
            return Err(Error::shape("sgd_step", "gradient layer count differs from model"));
        }
        for (ad, g) in self.adapters.iter().zip(&grads.0) {
            match (ad, g) {
                (Some(ad), Some(g)) if ad.a.shape() == g.a.shape() && ad.b.shape() == g.b.shape() => {}
                (None, None) => {}
                _ => return Err(Error::shape("sgd_step", "gradients do not match adapters")),
            }
        }
        let (lr, wd) = (cfg.learning_rate, cfg.weight_decay);
        for (ad, g) in self.adapters.iter_mut().zip(&grads.0) {
            if let (Some(ad), Some(g)) = (ad, g) {
                for (p, d) in ad.a.data_mut().iter_mut().zip(g.a.data()) {
                    *p -= lr * (d + wd * *p);
                }
                for (p, d) in ad.b.data_mut().iter_mut().zip(g.b.data()) {
                    *p -= lr * (d + wd * *p);
                }
            }
        }
        self.generation += 1;
        Ok(())
    }

    /// Argmax accuracy over a labeled set.
    pub fn accuracy(&self, data: &LabeledSet) -> Result<f64> {
        accuracy_eval(self, data)
    }

    /// Serialized frozen parameters (weights and biases) in checkpoint byte order.
    pub fn frozen_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            put_f64s(&mut out, w.data());
            put_f64s(&mut out, b);
        }
        out
    }
}

/// Mean cross-entropy over the batch and its gradient w.r.t. the logits.
pub fn cross_entropy_loss(logits: &Tensor2D, labels: &[usize]) -> Result<(f64, Tensor2D)> {
    const OP: &str = "cross_entropy_loss";
    if logits.rows() != labels.len() {
        return Err(Error::shape(OP, format!("{} logit rows, {} labels", logits.rows(), labels.len())));
    }
    if logits.rows() == 0 {
        return Err(Error::input(OP, "empty batch"));
    }
    let c = logits.cols();
    if let Some(&y) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::input(OP, format!("label {y} out of range for {c} classes")));
    }
    let n = logits.rows() as f64;
    let mut grad = Tensor2D::zeros(logits.rows(), c);
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - m).exp()).sum();
        let lse = m + sum.ln();
        loss += lse - row[y];
        for (g, v) in grad.row_mut(i).iter_mut().zip(row) {
            *g = (v - lse).exp() / n;
        }
        let g = grad.get(i, y);
        grad.set(i, y, g - 1.0 / n);
    }
    Ok((loss / n, grad))
}

pub fn accuracy_eval(model: &ModelState, data: &LabeledSet) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::input("accuracy_eval", "empty dataset"));
    }
    let logits = model.logits(data.features())?;
    let correct = logits
        .row_iter()
        .zip(data.labels())
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    Ok(correct as f64 / data.len() as f64)
}

/// Supervised local epochs with shuffled minibatches. Returns the mean batch loss.
pub fn train_supervised<R: Rng + ?Sized>(
    model: &mut ModelState,
    data: &LabeledSet,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    let (mut total, mut batches) = (0.0, 0usize);
    for _ in 0..cfg.local_epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch_size) {
            let x = data.features().select_rows(chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| data.labels()[i]).collect();
            let out = model.forward(&x)?;
            let (loss, d_logits) = cross_entropy_loss(&out.logits, &y)?;
            let grads = model.backward(&out.cache, &d_logits, None)?;
            model.sgd_step(&grads, cfg)?;
            total += loss;
            batches += 1;
        }
    }
    Ok(if batches == 0 { 0.0 } else { total / batches as f64 })
}

// ---------------------------------------------------------------------------
// Checkpoint format
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 4] = b"FDSM";
const CHECKPOINT_VERSION: u16 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes a model: magic, version, spec, then every tensor as
/// little-endian f64 (per layer weight and bias, then per adapted layer A and B).
pub fn save_checkpoint(model: &ModelState) -> Vec<u8> {
    let spec = &model.spec;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_u32(&mut out, spec.num_layers());
    for &(d_in, d_out) in &spec.layer_dims {
        put_u32(&mut out, d_in);
        put_u32(&mut out, d_out);
    }
    out.push(spec.activation.code());
    put_u32(&mut out, spec.num_classes);
    put_u32(&mut out, spec.lora_rank);
    out.extend_from_slice(&spec.lora_alpha.to_le_bytes());
    out.push(u8::from(spec.scale_projection));
    put_u32(&mut out, spec.adapted_layers.len());
    spec.adapted_layers.iter().for_each(|&l| put_u32(&mut out, l));
    put_u32(&mut out, spec.projection_layers.len());
    spec.projection_layers.iter().for_each(|&l| put_u32(&mut out, l));
    out.extend_from_slice(&model.frozen_bytes());
    for ad in model.adapters.iter().flatten() {
        put_f64s(&mut out, ad.a.data());
        put_f64s(&mut out, ad.b.data());
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated at byte {} (needed {n} more)", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn indices(&mut self) -> Result<Vec<usize>> {
        let n = self.u32()?;
        (0..n).map(|_| self.u32()).collect()
    }

    fn tensor(&mut self, rows: usize, cols: usize) -> Result<Tensor2D> {
        let data = (0..rows * cols).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Tensor2D::from_vec(rows, cols, data).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<ModelState> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let n = r.u32()?;
    let layer_dims = (0..n).map(|_| Ok((r.u32()?, r.u32()?))).collect::<Result<Vec<_>>>()?;
    let activation = Activation::from_code(r.u8()?)
        .ok_or_else(|| Error::Checkpoint("unknown activation code".into()))?;
    let spec = ModelSpec {
        layer_dims,
        activation,
        num_classes: r.u32()?,
        lora_rank: r.u32()?,
        lora_alpha: r.f64()?,
        scale_projection: r.u8()? != 0,
        adapted_layers: r.indices()?,
        projection_layers: r.indices()?,
    };
    spec.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut weights = Vec::with_capacity(n);
    let mut biases = Vec::with_capacity(n);
    for &(d_in, d_out) in &spec.layer_dims {
        weights.push(r.tensor(d_out, d_in)?);
        biases.push(r.tensor(1, d_out)?.into_data());
    }
    let mut adapters = vec![None; n];
    for &l in &spec.adapted_layers {
        let (d_in, d_out) = spec.layer_dims[l];
        let a = r.tensor(spec.lora_rank, d_in)?;
        let b = r.tensor(d_out, spec.lora_rank)?;
        adapters[l] = Some(LoraAdapter::new(a, b, spec.lora_alpha)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    ModelState::from_parts(spec, weights, biases, adapters)
}
