//! Server-side fusion of client uploads into teacher logits.
//!
//! [`adaptive_aggregate`] weights each contributor to dimension `c` of sample
//! `x` by its share of the total magnitude sent for that (x, c):
//! `w_n = |v_n| / Σ_m |v_m|`, summed only over clients that actually sent `c`.
//! Dimensions nobody sent are filled with 0 and reported with coverage 0.

use crate::error::{Error, Result};
use crate::lora::ProjectionBundle;
use crate::tensor::Tensor2D;
use crate::wire::{DenseLogits, SparsePayload};

#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedLogits {
    pub values: Tensor2D,
    /// Row-major `num_samples × dim_c` contributor counts.
    pub coverage: Vec<u32>,
}

impl AggregatedLogits {
    /// Wraps dense teacher logits, counting every dimension as covered by
    /// `contributors` parties.
    pub fn from_dense(values: Tensor2D, contributors: u32) -> Self {
        let coverage = vec![contributors; values.data().len()];
        Self { values, coverage }
    }

    pub fn num_samples(&self) -> usize {
        self.values.rows()
    }

    pub fn dim_c(&self) -> usize {
        self.values.cols()
    }

    pub fn coverage_at(&self, sample: usize, dim: usize) -> u32 {
        self.coverage[sample * self.dim_c() + dim]
    }

    pub fn coverage_row(&self, sample: usize) -> &[u32] {
        let c = self.dim_c();
        &self.coverage[sample * c..(sample + 1) * c]
    }
}

fn check_sparse(op: &'static str, payloads: &[SparsePayload]) -> Result<(usize, usize)> {
    let first = payloads.first().ok_or_else(|| Error::input(op, "no payloads"))?;
    let (s, c) = (first.num_samples(), first.dim_c());
    if let Some(p) = payloads.iter().find(|p| p.num_samples() != s || p.dim_c() != c) {
        return Err(Error::input(
            op,
            format!(
                "client {} sent {}x{}, expected {s}x{c}",
                p.client_id,
                p.num_samples(),
                p.dim_c()
            ),
        ));
    }
    Ok((s, c))
}

/// Ascending client id; ties keep input order.
fn by_client(payloads: &[SparsePayload]) -> Vec<&SparsePayload> {
    let mut v: Vec<&SparsePayload> = payloads.iter().collect();
    v.sort_by_key(|p| p.client_id);
    v
}

/// Dimension-wise, sparsity-aware weighted aggregation.
///
/// Per (x, c): no contributors → 0 with coverage 0; contributors whose
/// magnitudes are all zero → their plain mean; otherwise `Σ w_n·v_n`.
pub fn adaptive_aggregate(payloads: &[SparsePayload]) -> Result<AggregatedLogits> {
    let (samples, dim_c) = check_sparse("adaptive_aggregate", payloads)?;
    let ordered = by_client(payloads);
    let mut values = Tensor2D::zeros(samples, dim_c);
    let mut coverage = vec![0u32; samples * dim_c];
    let mut score_sum = vec![0.0f64; dim_c];
    let mut plain_sum = vec![0.0f64; dim_c];
    for x in 0..samples {
        score_sum.iter_mut().for_each(|v| *v = 0.0);
        plain_sum.iter_mut().for_each(|v| *v = 0.0);
        let cov = &mut coverage[x * dim_c..(x + 1) * dim_c];
        for p in &ordered {
            for e in &p.rows()[x] {
                let c = e.index as usize;
                score_sum[c] += e.value.abs();
                plain_sum[c] += e.value;
                cov[c] += 1;
            }
        }
        let out = values.row_mut(x);
        for p in &ordered {
            for e in &p.rows()[x] {
                let c = e.index as usize;
                if score_sum[c] > 0.0 {
                    out[c] += e.value.abs() / score_sum[c] * e.value;
                }
            }
        }
        for c in 0..dim_c {
            if cov[c] > 0 && score_sum[c] == 0.0 {
                out[c] = plain_sum[c] / f64::from(cov[c]);
            }
        }
    }
    Ok(AggregatedLogits { values, coverage })
}

/// Baseline: absent entries count as 0 and every sender is averaged in.
pub fn zero_pad_aggregate(payloads: &[SparsePayload]) -> Result<AggregatedLogits> {
    let (samples, dim_c) = check_sparse("zero_pad_aggregate", payloads)?;
    let n = payloads.len() as f64;
    let mut values = Tensor2D::zeros(samples, dim_c);
    let mut coverage = vec![0u32; samples * dim_c];
    for p in by_client(payloads) {
        for (x, row) in p.rows().iter().enumerate() {
            for e in row {
                let c = e.index as usize;
                let v = values.get(x, c);
                values.set(x, c, v + e.value);
                coverage[x * dim_c + c] += 1;
            }
        }
    }
    values.data_mut().iter_mut().for_each(|v| *v /= n);
    Ok(AggregatedLogits { values, coverage })
}

/// Plain mean of full logit matrices.
pub fn dense_mean_aggregate(logits: &[DenseLogits]) -> Result<AggregatedLogits> {
    const OP: &str = "dense_mean_aggregate";
    let first = logits.first().ok_or_else(|| Error::input(OP, "no logits"))?;
    if logits.iter().any(|l| l.shape() != first.shape()) {
        return Err(Error::input(OP, "logit matrices differ in shape"));
    }
    let mut values = Tensor2D::zeros(first.rows(), first.cols());
    for l in logits {
        values.add_scaled(l, 1.0)?;
    }
    let n = logits.len();
    values.data_mut().iter_mut().for_each(|v| *v /= n as f64);
    Ok(AggregatedLogits::from_dense(values, n as u32))
}

/// Uniform per-sample mean of projection bundles.
pub fn aggregate_projections(bundles: &[ProjectionBundle]) -> Result<ProjectionBundle> {
    const OP: &str = "aggregate_projections";
    let first = bundles.first().ok_or_else(|| Error::input(OP, "no bundles"))?;
    if let Some(b) = bundles.iter().find(|b| b.rank() != first.rank()) {
        return Err(Error::input(OP, format!("rank {} vs {}", b.rank(), first.rank())));
    }
    if bundles
        .iter()
        .any(|b| b.num_samples() != first.num_samples() || b.num_layers() != first.num_layers())
    {
        return Err(Error::input(OP, "bundles differ in sample or layer count"));
    }
    let n = bundles.len() as f64;
    let layers = (0..first.num_layers())
        .map(|l| {
            let mut acc = Tensor2D::zeros(first.num_samples(), first.rank());
            for b in bundles {
                acc.add_scaled(&b.layers()[l], 1.0)?;
            }
            acc.data_mut().iter_mut().for_each(|v| *v /= n);
            Ok(acc)
        })
        .collect::<Result<Vec<_>>>()?;
    ProjectionBundle::new(first.num_samples(), first.rank(), layers)
}
