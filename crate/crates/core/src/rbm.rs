//! Binary restricted Boltzmann machine.
//!
//! Energy `E(v, h) = -aᵀv - bᵀh - vᵀWh` with `W` stored `M×K`
//! (visible × hidden). Inputs in `[0, 1]` are treated as Bernoulli means in
//! the data-dependent terms; Gibbs chains binarize by sampling.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{ensure_dim, Error, Result};
use crate::math::sigmoid;
use crate::par;

/// Rows per work unit when batch statistics are split across threads.
const ROW_CHUNK: usize = 32;

/// Parameters of one RBM.
#[derive(Debug, Clone, PartialEq)]
pub struct RbmParams {
    /// Visible biases, length `M`.
    pub a: Array1<f64>,
    /// Hidden biases, length `K`.
    pub b: Array1<f64>,
    /// Weights, `M×K`.
    pub w: Array2<f64>,
}

impl RbmParams {
    pub fn zeros(m: usize, k: usize) -> Self {
        RbmParams {
            a: Array1::zeros(m),
            b: Array1::zeros(k),
            w: Array2::zeros((m, k)),
        }
    }

    /// `W ~ N(0, 0.01²)`, zero biases.
    pub fn random<R: Rng + ?Sized>(m: usize, k: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, 0.01).expect("valid normal");
        RbmParams {
            a: Array1::zeros(m),
            b: Array1::zeros(k),
            w: Array2::from_shape_simple_fn((m, k), || normal.sample(rng)),
        }
    }

    pub fn from_parts(a: Array1<f64>, b: Array1<f64>, w: Array2<f64>) -> Result<Self> {
        let p = RbmParams { a, b, w };
        p.validate()?;
        Ok(p)
    }

    pub fn n_visible(&self) -> usize {
        self.a.len()
    }

    pub fn n_hidden(&self) -> usize {
        self.b.len()
    }

    pub fn validate(&self) -> Result<()> {
        ensure_dim(self.w.dim() == (self.a.len(), self.b.len()), || {
            format!(
                "weights {:?} vs biases ({}, {})",
                self.w.dim(),
                self.a.len(),
                self.b.len()
            )
        })?;
        let finite = self.a.iter().chain(&self.b).chain(&self.w).all(|x| x.is_finite());
        if !finite {
            return Err(Error::InvalidArgument("non-finite RBM parameter".into()));
        }
        Ok(())
    }

    fn check_visible(&self, len: usize) -> Result<()> {
        ensure_dim(len == self.n_visible(), || {
            format!("visible vector has {len} entries, model has {}", self.n_visible())
        })
    }

    fn check_hidden(&self, len: usize) -> Result<()> {
        ensure_dim(len == self.n_hidden(), || {
            format!("hidden vector has {len} entries, model has {}", self.n_hidden())
        })
    }

    /// Keep only the given hidden units, in the given order.
    pub fn select_hidden(&self, units: &[usize]) -> RbmParams {
        RbmParams {
            a: self.a.clone(),
            b: self.b.select(Axis(0), units),
            w: self.w.select(Axis(1), units),
        }
    }
}

/// CD training settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub cd_steps: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 500,
            learning_rate: 0.1,
            cd_steps: 1,
            batch_size: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.cd_steps == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument(format!(
                "learning rate, CD steps and batch size must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

pub fn energy(v: ArrayView1<f64>, h: ArrayView1<f64>, p: &RbmParams) -> Result<f64> {
    p.check_visible(v.len())?;
    p.check_hidden(h.len())?;
    Ok(-p.a.dot(&v) - p.b.dot(&h) - v.dot(&p.w.dot(&h)))
}

/// `P(h_k = 1 | v) = σ(b_k + vᵀw_{·k})`.
pub fn hidden_cond(v: ArrayView1<f64>, p: &RbmParams) -> Result<Array1<f64>> {
    p.check_visible(v.len())?;
    Ok((v.dot(&p.w) + &p.b).mapv(sigmoid))
}

/// `P(v_m = 1 | h) = σ(a_m + w_{m·}h)`.
pub fn visible_cond(h: ArrayView1<f64>, p: &RbmParams) -> Result<Array1<f64>> {
    p.check_hidden(h.len())?;
    Ok((p.w.dot(&h) + &p.a).mapv(sigmoid))
}

/// Row-wise [`hidden_cond`] for an `N×M` batch.
pub fn hidden_probs(v: ArrayView2<f64>, p: &RbmParams) -> Result<Array2<f64>> {
    p.check_visible(v.ncols())?;
    Ok((v.dot(&p.w) + &p.b).mapv_into(sigmoid))
}

/// Row-wise [`visible_cond`] for an `N×K` batch.
pub fn visible_probs(h: ArrayView2<f64>, p: &RbmParams) -> Result<Array2<f64>> {
    p.check_hidden(h.ncols())?;
    Ok((h.dot(&p.w.t()) + &p.a).mapv_into(sigmoid))
}

fn bernoulli<R: Rng + ?Sized>(probs: &Array1<f64>, rng: &mut R) -> Array1<f64> {
    probs.mapv(|q| if rng.random::<f64>() < q { 1.0 } else { 0.0 })
}

/// One Gibbs sweep: `h' ~ P(h | v)`, then `v' ~ P(v | h')`.
pub fn gibbs_step<R: Rng + ?Sized>(
    v: ArrayView1<f64>,
    p: &RbmParams,
    rng: &mut R,
) -> Result<(Array1<f64>, Array1<f64>)> {
    let h = bernoulli(&hidden_cond(v, p)?, rng);
    let v_next = bernoulli(&visible_cond(h.view(), p)?, rng);
    Ok((v_next, h))
}

/// Sufficient statistics of a block of rows for one CD update.
struct CdStats {
    v: Array1<f64>,
    h: Array1<f64>,
    vh: Array2<f64>,
    v_model: Array1<f64>,
    h_model: Array1<f64>,
    vh_model: Array2<f64>,
}

impl CdStats {
    fn add(mut self, other: &CdStats) -> CdStats {
        self.v += &other.v;
        self.h += &other.h;
        self.vh += &other.vh;
        self.v_model += &other.v_model;
        self.h_model += &other.h_model;
        self.vh_model += &other.vh_model;
        self
    }
}

fn threshold_into(probs: &mut Array2<f64>, uniforms: ArrayView2<f64>) {
    Zip::from(probs)
        .and(uniforms)
        .for_each(|q, &u| *q = if u < *q { 1.0 } else { 0.0 });
}

/// Statistics for rows `[lo, hi)` given pre-drawn uniforms for every chain step.
fn cd_stats(
    batch: ArrayView2<f64>,
    p: &RbmParams,
    steps: &[(Array2<f64>, Array2<f64>)],
    lo: usize,
    hi: usize,
) -> CdStats {
    let v0 = batch.slice(s![lo..hi, ..]);
    let h0 = (v0.dot(&p.w) + &p.b).mapv_into(sigmoid);
    let mut v = v0.to_owned();
    for (uh, uv) in steps {
        let mut h = (v.dot(&p.w) + &p.b).mapv_into(sigmoid);
        threshold_into(&mut h, uh.slice(s![lo..hi, ..]));
        v = (h.dot(&p.w.t()) + &p.a).mapv_into(sigmoid);
        threshold_into(&mut v, uv.slice(s![lo..hi, ..]));
    }
    let h_model = (v.dot(&p.w) + &p.b).mapv_into(sigmoid);
    CdStats {
        v: v0.sum_axis(Axis(0)),
        h: h0.sum_axis(Axis(0)),
        vh: v0.t().dot(&h0),
        v_model: v.sum_axis(Axis(0)),
        h_model: h_model.sum_axis(Axis(0)),
        vh_model: v.t().dot(&h_model),
    }
}

/// Apply one CD-d update in place and return the parameter change.
///
/// The chain for each row starts at the data, takes `cd_steps` sampled Gibbs
/// sweeps, and contributes its final binary visible state together with the
/// hidden probabilities given that state.
pub fn cd_step<R: Rng + ?Sized>(
    batch: ArrayView2<f64>,
    p: &mut RbmParams,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<RbmParams> {
    let n = batch.nrows();
    if n == 0 {
        return Err(Error::Empty("CD batch"));
    }
    p.check_visible(batch.ncols())?;
    let (m, k) = p.w.dim();
    // All randomness is drawn up front so the row blocks can run anywhere.
    let steps: Vec<(Array2<f64>, Array2<f64>)> = (0..cfg.cd_steps)
        .map(|_| {
            let uh = Array2::from_shape_simple_fn((n, k), || rng.random::<f64>());
            let uv = Array2::from_shape_simple_fn((n, m), || rng.random::<f64>());
            (uh, uv)
        })
        .collect();
    let blocks: Vec<(usize, usize)> = (0..n)
        .step_by(ROW_CHUNK)
        .map(|lo| (lo, (lo + ROW_CHUNK).min(n)))
        .collect();
    let params: &RbmParams = p;
    let parts = par::map(&blocks, |&(lo, hi)| cd_stats(batch, params, &steps, lo, hi));
    let mut parts = parts.into_iter();
    let first = parts.next().expect("non-empty batch");
    let total = parts.fold(first, |acc, s| acc.add(&s));

    let scale = cfg.learning_rate / n as f64;
    let delta = RbmParams {
        a: (total.v - total.v_model) * scale,
        b: (total.h - total.h_model) * scale,
        w: (total.vh - total.vh_model) * scale,
    };
    p.a += &delta.a;
    p.b += &delta.b;
    p.w += &delta.w;
    Ok(delta)
}

/// One CD-d update, returning the new parameters.
pub fn cd_update<R: Rng + ?Sized>(
    batch: ArrayView2<f64>,
    p: &RbmParams,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<RbmParams> {
    let mut next = p.clone();
    cd_step(batch, &mut next, cfg, rng)?;
    Ok(next)
}

/// Run `cfg.epochs` epochs of shuffled minibatch CD on `data`.
pub fn train<R: Rng + ?Sized>(
    data: ArrayView2<f64>,
    p: &mut RbmParams,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<()> {
    cfg.validate()?;
    if data.nrows() == 0 {
        return Err(Error::Empty("training data"));
    }
    p.check_visible(data.ncols())?;
    let mut order: Vec<usize> = (0..data.nrows()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = data.select(Axis(0), chunk);
            cd_step(batch.view(), p, cfg, rng)?;
        }
    }
    Ok(())
}

/// Mean-field reconstruction: `h_r = P(h | v)`, `v_r = P(v | h_r)`.
pub fn reconstruct(v: ArrayView1<f64>, p: &RbmParams) -> Result<(Array1<f64>, Array1<f64>)> {
    let h = hidden_cond(v, p)?;
    let vr = visible_cond(h.view(), p)?;
    Ok((vr, h))
}

/// Row-wise reconstruction of an `N×M` batch.
pub fn reconstruct_batch(v: ArrayView2<f64>, p: &RbmParams) -> Result<Array2<f64>> {
    let h = hidden_probs(v, p)?;
    visible_probs(h.view(), p)
}

/// Exact quantities by enumerating binary states. Only for tiny models.
pub mod exact {
    use super::*;
    use crate::math::{bit, softplus};

    /// Largest `M + K` accepted by [`log_partition`].
    pub const MAX_UNITS: usize = 24;

    /// Streaming log-sum-exp accumulator.
    #[derive(Debug, Clone, Copy)]
    pub struct LogSumExp {
        max: f64,
        sum: f64,
    }

    impl Default for LogSumExp {
        fn default() -> Self {
            LogSumExp {
                max: f64::NEG_INFINITY,
                sum: 0.0,
            }
        }
    }

    impl LogSumExp {
        pub fn push(&mut self, x: f64) {
            if x > self.max {
                self.sum = self.sum * (self.max - x).exp() + 1.0;
                self.max = x;
            } else {
                self.sum += (x - self.max).exp();
            }
        }

        pub fn value(&self) -> f64 {
            self.max + self.sum.ln()
        }
    }

    /// Binary vector of `width` bits for `state`, first unit = most significant bit.
    pub fn state_vector(state: u64, width: usize) -> Array1<f64> {
        Array1::from_shape_fn(width, |k| bit(state, k, width))
    }

    /// `F(v) = -aᵀv - Σ_k softplus(b_k + vᵀw_{·k})`.
    pub fn free_energy(v: ArrayView1<f64>, p: &RbmParams) -> Result<f64> {
        p.check_visible(v.len())?;
        let pre = v.dot(&p.w) + &p.b;
        Ok(-p.a.dot(&v) - pre.iter().map(|&x| softplus(x)).sum::<f64>())
    }

    /// `log Z` by summing `exp(-E)` over all `2^(M+K)` joint states.
    pub fn log_partition(p: &RbmParams) -> Result<f64> {
        let (m, k) = p.w.dim();
        if m + k > MAX_UNITS {
            return Err(Error::TooLarge { units: m + k });
        }
        let mut acc = LogSumExp::default();
        for vs in 0..(1u64 << m) {
            let v = state_vector(vs, m);
            for hs in 0..(1u64 << k) {
                let h = state_vector(hs, k);
                acc.push(-energy(v.view(), h.view(), p)?);
            }
        }
        Ok(acc.value())
    }

    /// `log Z` by summing `exp(-F(v))` over visible states only.
    pub fn log_partition_marginal(p: &RbmParams) -> Result<f64> {
        let m = p.n_visible();
        if m > MAX_UNITS {
            return Err(Error::TooLarge { units: m });
        }
        let mut acc = LogSumExp::default();
        for vs in 0..(1u64 << m) {
            acc.push(-free_energy(state_vector(vs, m).view(), p)?);
        }
        Ok(acc.value())
    }

    /// Mean log-likelihood of the rows of `data`.
    pub fn log_likelihood(data: ArrayView2<f64>, p: &RbmParams) -> Result<f64> {
        if data.nrows() == 0 {
            return Err(Error::Empty("likelihood data"));
        }
        let log_z = log_partition_marginal(p)?;
        let mut total = 0.0;
        for row in data.rows() {
            total -= free_energy(row, p)?;
        }
        Ok(total / data.nrows() as f64 - log_z)
    }

    /// Gradient of [`log_likelihood`]: data expectation minus model
    /// expectation of `-∂E/∂θ`, the model side by enumerating visible states.
    pub fn gradient(data: ArrayView2<f64>, p: &RbmParams) -> Result<RbmParams> {
        let n = data.nrows();
        if n == 0 {
            return Err(Error::Empty("gradient data"));
        }
        let (m, k) = p.w.dim();
        if m > MAX_UNITS {
            return Err(Error::TooLarge { units: m });
        }
        let mut g = RbmParams::zeros(m, k);
        for row in data.rows() {
            let h = hidden_cond(row, p)?;
            g.a += &(&row / n as f64);
            g.b += &(&h / n as f64);
            for mi in 0..m {
                for ki in 0..k {
                    g.w[[mi, ki]] += row[mi] * h[ki] / n as f64;
                }
            }
        }
        let log_z = log_partition_marginal(p)?;
        for vs in 0..(1u64 << m) {
            let v = state_vector(vs, m);
            let prob = (-free_energy(v.view(), p)? - log_z).exp();
            let h = hidden_cond(v.view(), p)?;
            g.a.scaled_add(-prob, &v);
            g.b.scaled_add(-prob, &h);
            for mi in 0..m {
                for ki in 0..k {
                    g.w[[mi, ki]] -= prob * v[mi] * h[ki];
                }
            }
        }
        Ok(g)
    }
}
