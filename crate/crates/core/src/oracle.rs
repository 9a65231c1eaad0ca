//! Brute-force reference suites for the Top-k selector, the aggregators and
//! the distillation gradients. Each suite draws random instances from a seed
//! and compares the production path against an independent implementation.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::Serialize;

use crate::aggregation::{adaptive_aggregate, zero_pad_aggregate, AggregatedLogits};
use crate::distill::{total_distill_loss, DistillConfig};
use crate::error::Result;
use crate::lora::ProjectionBundle;
use crate::model::{Activation, ModelSpec, ModelState};
use crate::rng::{stream_rng, SimRng, Stream};
use crate::tensor::Tensor2D;
use crate::wire::{sparsify, SparsePayload};

pub const AGGREGATION_TOLERANCE: f64 = 1e-12;
pub const GRADIENT_TOLERANCE: f64 = 1e-5;
pub const FD_STEP: f64 = 1e-6;
/// Denominator floor for the relative gradient error.
pub const GRADIENT_REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    TopK,
    Aggregation,
    Gradient,
}

impl Suite {
    pub const ALL: [Suite; 3] = [Suite::TopK, Suite::Aggregation, Suite::Gradient];

    pub fn as_str(self) -> &'static str {
        match self {
            Suite::TopK => "topk",
            Suite::Aggregation => "aggregation",
            Suite::Gradient => "gradient",
        }
    }

    /// Instance count each suite runs by default.
    pub fn default_cases(self) -> usize {
        match self {
            Suite::TopK => 1000,
            Suite::Aggregation => 500,
            Suite::Gradient => 100,
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Suite {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Suite::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| format!("unknown oracle suite {s:?} (expected topk, aggregation or gradient)"))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleReport {
    pub suite: Suite,
    pub cases: usize,
    pub checks: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub first_failure: Option<String>,
}

impl OracleReport {
    fn new(suite: Suite, tolerance: f64) -> Self {
        Self { suite, cases: 0, checks: 0, max_error: 0.0, tolerance, first_failure: None }
    }

    pub fn passed(&self) -> bool {
        self.first_failure.is_none()
    }

    fn check(&mut self, err: f64, describe: impl FnOnce() -> String) {
        self.checks += 1;
        if err.is_nan() || err > self.max_error {
            self.max_error = if err.is_nan() { f64::INFINITY } else { err };
        }
        if self.first_failure.is_none() && !(err <= self.tolerance) {
            self.first_failure = Some(describe());
        }
    }
}

impl fmt::Display for OracleReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: {} ({} cases, {} checks, max error {:.3e}, tolerance {:.1e})",
            self.suite,
            if self.passed() { "pass" } else { "FAIL" },
            self.cases,
            self.checks,
            self.max_error,
            self.tolerance
        )?;
        if let Some(msg) = &self.first_failure {
            write!(f, "\n  first failure: {msg}")?;
        }
        Ok(())
    }
}

pub fn run_suite(suite: Suite, seed: u64) -> Result<OracleReport> {
    let cases = suite.default_cases();
    match suite {
        Suite::TopK => topk_suite(cases, seed),
        Suite::Aggregation => aggregation_suite(cases, seed),
        Suite::Gradient => gradient_suite(cases, seed, GRADIENT_TOLERANCE),
    }
}

fn suite_rng(seed: u64, suite: Suite) -> SimRng {
    stream_rng(seed, Stream::Data, &[0x0AC1E, suite as u64])
}

/// Values drawn from a small grid half of the time, so ties are common.
fn random_vector(rng: &mut SimRng, len: usize) -> Vec<f64> {
    if rng.random_bool(0.5) {
        let levels = rng.random_range(1..=4);
        (0..len).map(|_| f64::from(rng.random_range(0..levels)) - 1.0).collect()
    } else {
        let mut v: Vec<f64> = (0..len).map(|_| rng.random_range(-5.0..5.0)).collect();
        for _ in 0..rng.random_range(0..=len / 4) {
            let (i, j) = (rng.random_range(0..len), rng.random_range(0..len));
            v[i] = v[j];
        }
        v
    }
}

/// Full sort by (value desc, index asc), keep `k`, re-sort by index.
pub fn topk_sort_oracle(v: &[f64], k: usize) -> Vec<(u32, f64)> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].partial_cmp(&v[a]).unwrap().then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    idx.into_iter().map(|i| (i as u32, v[i])).collect()
}

pub fn topk_suite(cases: usize, seed: u64) -> Result<OracleReport> {
    let mut rng = suite_rng(seed, Suite::TopK);
    let mut report = OracleReport::new(Suite::TopK, 0.0);
    for case in 0..cases {
        let c = rng.random_range(1..=512);
        let k = rng.random_range(1..=c);
        let v = random_vector(&mut rng, c);
        let payload = sparsify(&Tensor2D::from_vec(1, c, v.clone())?, k, 0, 0)?;
        let got: Vec<(u32, f64)> = payload.rows()[0].iter().map(|e| (e.index, e.value)).collect();
        let want = topk_sort_oracle(&v, k);
        let same = got.len() == want.len()
            && got.iter().zip(&want).all(|(a, b)| a.0 == b.0 && a.1.to_bits() == b.1.to_bits());
        report.check(if same { 0.0 } else { 1.0 }, || format!("case {case}: c={c} k={k}, got {got:?}, want {want:?}"));
        report.cases += 1;
    }
    Ok(report)
}

/// Dense per-(client, sample, dimension) view: `Some(v)` when sent.
fn dense_view(payloads: &[SparsePayload]) -> Vec<Vec<Vec<Option<f64>>>> {
    let mut ordered: Vec<&SparsePayload> = payloads.iter().collect();
    ordered.sort_by_key(|p| p.client_id);
    ordered
        .iter()
        .map(|p| {
            p.rows()
                .iter()
                .map(|row| {
                    let mut d = vec![None; p.dim_c()];
                    for e in row {
                        d[e.index as usize] = Some(e.value);
                    }
                    d
                })
                .collect()
        })
        .collect()
}

/// Magnitude-weighted mean over senders, computed as `Σ|v|·v / Σ|v|`.
pub fn adaptive_dense_oracle(payloads: &[SparsePayload]) -> (Vec<Vec<f64>>, Vec<Vec<u32>>) {
    let view = dense_view(payloads);
    let (samples, dim_c) = (payloads[0].num_samples(), payloads[0].dim_c());
    let mut values = vec![vec![0.0; dim_c]; samples];
    let mut coverage = vec![vec![0u32; dim_c]; samples];
    for x in 0..samples {
        for c in 0..dim_c {
            let sent: Vec<f64> = view.iter().filter_map(|client| client[x][c]).collect();
            coverage[x][c] = sent.len() as u32;
            if sent.is_empty() {
                continue;
            }
            let s: f64 = sent.iter().map(|v| v.abs()).sum();
            values[x][c] = if s == 0.0 {
                sent.iter().sum::<f64>() / sent.len() as f64
            } else {
                sent.iter().map(|v| v.abs() * v).sum::<f64>() / s
            };
        }
    }
    (values, coverage)
}

/// Absent entries as 0, summed in client order, divided by sender count.
pub fn zero_pad_oracle(payloads: &[SparsePayload]) -> Vec<Vec<f64>> {
    let view = dense_view(payloads);
    let (samples, dim_c) = (payloads[0].num_samples(), payloads[0].dim_c());
    let n = view.len() as f64;
    (0..samples)
        .map(|x| {
            (0..dim_c)
                .map(|c| {
                    let mut s = 0.0;
                    for client in &view {
                        s += client[x][c].unwrap_or(0.0);
                    }
                    s / n
                })
                .collect()
        })
        .collect()
}

pub fn aggregation_suite(cases: usize, seed: u64) -> Result<OracleReport> {
    aggregation_suite_with(cases, seed, adaptive_aggregate)
}

/// The aggregation suite with the adaptive aggregator swapped out, so a
/// deliberately broken implementation can be shown to fail.
pub fn aggregation_suite_with<F>(cases: usize, seed: u64, adaptive: F) -> Result<OracleReport>
where
    F: Fn(&[SparsePayload]) -> Result<AggregatedLogits>,
{
    let mut rng = suite_rng(seed, Suite::Aggregation);
    let mut report = OracleReport::new(Suite::Aggregation, AGGREGATION_TOLERANCE);
    for case in 0..cases {
        let n = rng.random_range(1..=5);
        let c = rng.random_range(1..=16);
        let samples = rng.random_range(1..=8);
        let mut payloads = Vec::with_capacity(n);
        for client in 0..n {
            let k = rng.random_range(1..=c);
            let data: Vec<f64> = (0..samples).flat_map(|_| random_vector(&mut rng, c)).collect();
            payloads.push(sparsify(&Tensor2D::from_vec(samples, c, data)?, k, client as u32, 1)?);
        }
        // Arrival order must not matter.
        payloads.reverse();

        let got = adaptive(&payloads)?;
        let (want, want_cov) = adaptive_dense_oracle(&payloads);
        for x in 0..samples {
            for d in 0..c {
                let err = (got.values.get(x, d) - want[x][d]).abs();
                report.check(err, || {
                    format!("case {case}: adaptive sample {x} dim {d}: got {} want {}", got.values.get(x, d), want[x][d])
                });
                let cov_ok = got.coverage_at(x, d) == want_cov[x][d];
                report.check(if cov_ok { 0.0 } else { f64::INFINITY }, || {
                    format!("case {case}: coverage sample {x} dim {d}: got {} want {}", got.coverage_at(x, d), want_cov[x][d])
                });
            }
        }

        let zp = zero_pad_aggregate(&payloads)?;
        let want = zero_pad_oracle(&payloads);
        for x in 0..samples {
            for d in 0..c {
                let exact = zp.values.get(x, d).to_bits() == want[x][d].to_bits();
                report.check(if exact { 0.0 } else { f64::INFINITY }, || {
                    format!("case {case}: zero-pad sample {x} dim {d}: got {} want {}", zp.values.get(x, d), want[x][d])
                });
            }
        }
        report.cases += 1;
    }
    Ok(report)
}

/// `|a − b| / max(|a|, |b|, GRADIENT_REL_FLOOR)`.
pub fn gradient_rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRADIENT_REL_FLOOR)
}

struct GradientCase {
    model: ModelState,
    batch: Tensor2D,
    teacher: AggregatedLogits,
    teacher_h: ProjectionBundle,
    cfg: DistillConfig,
}

impl GradientCase {
    fn random(rng: &mut SimRng) -> Result<Self> {
        let d_in = rng.random_range(2..=6);
        let hidden = rng.random_range(2..=6);
        let c = rng.random_range(2..=6);
        let rank = rng.random_range(1..=d_in.min(hidden).min(c));
        let spec = ModelSpec::mlp(&[d_in, hidden, c], Activation::Tanh, rank, rng.random_range(1.0..16.0));
        let mut model = ModelState::new(spec, rng.random(), rng.random())?;
        for layer in 0..2 {
            let ad = model.adapter_mut(layer).expect("every layer adapted");
            let (rows, cols) = ad.b.shape();
            ad.b = Tensor2D::gaussian(rows, cols, 0.3, rng);
        }
        let samples = rng.random_range(1..=4);
        let batch = Tensor2D::gaussian(samples, d_in, 1.0, rng);
        let teacher = AggregatedLogits::from_dense(Tensor2D::gaussian(samples, c, 2.0, rng), 1);
        let layers = vec![Tensor2D::gaussian(samples, rank, 1.0, rng); 1];
        let teacher_h = ProjectionBundle::new(samples, rank, layers)?;
        let cfg = DistillConfig {
            temperature: [1.0, 2.0][rng.random_range(0..2)],
            lambda_h: [0.0, 0.03, 0.5][rng.random_range(0..3)],
            ..DistillConfig::default()
        };
        Ok(Self { model, batch, teacher, teacher_h, cfg })
    }

    fn loss(&self, model: &ModelState) -> Result<f64> {
        let out = model.forward(&self.batch)?;
        let h = model.projection_bundle(&out)?;
        Ok(total_distill_loss(&self.teacher, &self.teacher_h, &out.logits, &h, &self.cfg)?.total)
    }
}

/// Central finite differences of the combined distillation loss against the
/// analytic adapter gradients.
pub fn gradient_suite(cases: usize, seed: u64, tolerance: f64) -> Result<OracleReport> {
    let mut rng = suite_rng(seed, Suite::Gradient);
    let mut report = OracleReport::new(Suite::Gradient, tolerance);
    for case in 0..cases {
        let g = GradientCase::random(&mut rng)?;
        let out = g.model.forward(&g.batch)?;
        let h = g.model.projection_bundle(&out)?;
        let loss = total_distill_loss(&g.teacher, &g.teacher_h, &out.logits, &h, &g.cfg)?;
        let grads = g.model.backward(&out.cache, &loss.d_logits, Some(&loss.d_projections))?;
        let peak = out.logits.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut probe = g.model.clone();
        for (layer, grad) in grads.0.iter().enumerate() {
            let Some(grad) = grad else { continue };
            for (which, analytic) in [("A", &grad.a), ("B", &grad.b)] {
                for i in 0..analytic.data().len() {
                    let numeric = {
                        let mut at = |delta: f64| -> Result<f64> {
                            let ad = probe.adapter_mut(layer).expect("adapted");
                            let t = if which == "A" { &mut ad.a } else { &mut ad.b };
                            let orig = t.data()[i];
                            t.data_mut()[i] = orig + delta;
                            let l = g.loss(&probe);
                            let ad = probe.adapter_mut(layer).expect("adapted");
                            let t = if which == "A" { &mut ad.a } else { &mut ad.b };
                            t.data_mut()[i] = orig;
                            l
                        };
                        (at(FD_STEP)? - at(-FD_STEP)?) / (2.0 * FD_STEP)
                    };
                    let a = analytic.data()[i];
                    let err = gradient_rel_error(a, numeric);
                    report.check(err, || {
                        format!(
                            "case {case}: layer {layer} {which}[{i}] analytic {a:.9e} numeric {numeric:.9e} (T={}, λ={}, max |logit| {peak:.1})",
                            g.cfg.temperature, g.cfg.lambda_h
                        )
                    });
                }
            }
        }
        report.cases += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wire::SparseEntry;

    #[test]
    fn sort_oracle_tie_rule() {
        assert_eq!(topk_sort_oracle(&[1.0, 3.0, 3.0, 2.0], 2), vec![(1, 3.0), (2, 3.0)]);
        assert_eq!(topk_sort_oracle(&[5.0, 5.0, 5.0], 1), vec![(0, 5.0)]);
    }

    #[test]
    fn dense_oracle_hand_instance() {
        let p0 = SparsePayload::new(
            0,
            1,
            3,
            2,
            vec![vec![SparseEntry { index: 0, value: 2.0 }, SparseEntry { index: 1, value: 0.1 }]],
        )
        .unwrap();
        let p1 = SparsePayload::new(1, 1, 3, 1, vec![vec![SparseEntry { index: 1, value: 3.0 }]]).unwrap();
        let (v, cov) = adaptive_dense_oracle(&[p0.clone(), p1.clone()]);
        assert_eq!(v[0][0], 2.0);
        assert!((v[0][1] - 2.906452).abs() < 1e-6);
        assert_eq!(cov[0], vec![1, 2, 0]);
        assert_eq!(zero_pad_oracle(&[p0, p1])[0], vec![1.0, 1.55, 0.0]);
    }

    #[test]
    fn suites_pass_on_small_counts() {
        assert!(topk_suite(50, 3).unwrap().passed());
        assert!(aggregation_suite(50, 3).unwrap().passed());
        assert!(gradient_suite(5, 3, GRADIENT_TOLERANCE).unwrap().passed());
    }

    #[test]
    fn swapped_weights_are_caught() {
        // Weight each contributor by the other's magnitude share.
        let broken = |ps: &[SparsePayload]| -> Result<AggregatedLogits> {
            let mut agg = adaptive_aggregate(ps)?;
            let view = dense_view(ps);
            for x in 0..agg.num_samples() {
                for c in 0..agg.dim_c() {
                    let sent: Vec<f64> = view.iter().filter_map(|cl| cl[x][c]).collect();
                    let s: f64 = sent.iter().map(|v| v.abs()).sum();
                    if sent.len() == 2 && s > 0.0 {
                        agg.values.set(x, c, (sent[1].abs() * sent[0] + sent[0].abs() * sent[1]) / s);
                    }
                }
            }
            Ok(agg)
        };
        let r = aggregation_suite_with(200, 0, broken).unwrap();
        assert!(!r.passed());
        assert!(r.first_failure.unwrap().contains("adaptive"));
    }
}
