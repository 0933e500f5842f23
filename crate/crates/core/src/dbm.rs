//! Clustering-reconstruction DBM.
//!
//! Two visible ends `v1`, `v2` (both clamped to the same patch), a small
//! binary clustering layer `h1` and a wide reconstruction layer `h2`:
//!
//! ```text
//! v1 --W1-- h1 --W2-- h2 --W3-- v2
//! ```
//!
//! `W1` is `M×K1`, `W2` is `K1×K2`, `W3` is `K2×M`.

use std::collections::BTreeMap;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{ensure_dim, Error, Result};
use crate::math::{mix_seed, sigmoid};
use crate::par;
use crate::rbm::{self, RbmParams, TrainConfig};

const ROW_CHUNK: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct CrDbmParams {
    pub a1: Array1<f64>,
    pub a2: Array1<f64>,
    pub b1: Array1<f64>,
    pub b2: Array1<f64>,
    pub w1: Array2<f64>,
    pub w2: Array2<f64>,
    pub w3: Array2<f64>,
}

impl CrDbmParams {
    pub fn zeros(m: usize, k1: usize, k2: usize) -> Self {
        CrDbmParams {
            a1: Array1::zeros(m),
            a2: Array1::zeros(m),
            b1: Array1::zeros(k1),
            b2: Array1::zeros(k2),
            w1: Array2::zeros((m, k1)),
            w2: Array2::zeros((k1, k2)),
            w3: Array2::zeros((k2, m)),
        }
    }

    /// Weights `~ N(0, 0.01²)`, zero biases.
    pub fn random<R: Rng + ?Sized>(m: usize, k1: usize, k2: usize, rng: &mut R) -> Self {
        let n = Normal::new(0.0, 0.01).expect("valid normal");
        let mut p = Self::zeros(m, k1, k2);
        for w in [&mut p.w1, &mut p.w2, &mut p.w3] {
            w.mapv_inplace(|_| n.sample(rng));
        }
        p
    }

    pub fn n_visible(&self) -> usize {
        self.a1.len()
    }

    pub fn n_cluster(&self) -> usize {
        self.b1.len()
    }

    pub fn n_recon(&self) -> usize {
        self.b2.len()
    }

    pub fn validate(&self) -> Result<()> {
        let (m, k1, k2) = (self.n_visible(), self.n_cluster(), self.n_recon());
        ensure_dim(
            self.a2.len() == m
                && self.w1.dim() == (m, k1)
                && self.w2.dim() == (k1, k2)
                && self.w3.dim() == (k2, m),
            || format!("inconsistent DBM blocks for (M, K1, K2) = ({m}, {k1}, {k2})"),
        )?;
        if !self.blocks().iter().all(|b| b.iter().all(|x| x.is_finite())) {
            return Err(Error::InvalidArgument("non-finite DBM parameter".into()));
        }
        Ok(())
    }

    fn blocks(&self) -> [Vec<f64>; 7] {
        [
            self.a1.to_vec(),
            self.a2.to_vec(),
            self.b1.to_vec(),
            self.b2.to_vec(),
            self.w1.iter().copied().collect(),
            self.w2.iter().copied().collect(),
            self.w3.iter().copied().collect(),
        ]
    }

    /// Every parameter in block order `a1, a2, b1, b2, W1, W2, W3`.
    pub fn flatten(&self) -> Vec<f64> {
        self.blocks().concat()
    }

    fn check_visible(&self, len: usize) -> Result<()> {
        ensure_dim(len == self.n_visible(), || {
            format!("visible vector has {len} entries, model has {}", self.n_visible())
        })
    }

    fn axpy(&mut self, scale: f64, d: &CrDbmParams) {
        self.a1.scaled_add(scale, &d.a1);
        self.a2.scaled_add(scale, &d.a2);
        self.b1.scaled_add(scale, &d.b1);
        self.b2.scaled_add(scale, &d.b2);
        self.w1.scaled_add(scale, &d.w1);
        self.w2.scaled_add(scale, &d.w2);
        self.w3.scaled_add(scale, &d.w3);
    }

    /// The reconstruction end as an RBM over `v2` with hidden layer `h2`.
    pub fn reconstruction_rbm(&self) -> RbmParams {
        RbmParams {
            a: self.a2.clone(),
            b: self.b2.clone(),
            w: self.w3.t().to_owned(),
        }
    }
}

/// Energy of a full configuration.
pub fn mt_energy(
    v1: ArrayView1<f64>,
    v2: ArrayView1<f64>,
    h1: ArrayView1<f64>,
    h2: ArrayView1<f64>,
    p: &CrDbmParams,
) -> Result<f64> {
    p.check_visible(v1.len())?;
    p.check_visible(v2.len())?;
    ensure_dim(h1.len() == p.n_cluster() && h2.len() == p.n_recon(), || {
        format!("hidden layers ({}, {}) vs model ({}, {})", h1.len(), h2.len(), p.n_cluster(), p.n_recon())
    })?;
    Ok(-p.a1.dot(&v1)
        - p.a2.dot(&v2)
        - p.b1.dot(&h1)
        - p.b2.dot(&h2)
        - v1.dot(&p.w1.dot(&h1))
        - h1.dot(&p.w2.dot(&h2))
        - h2.dot(&p.w3.dot(&v2)))
}

/// Mean-field stopping rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanFieldConfig {
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for MeanFieldConfig {
    fn default() -> Self {
        MeanFieldConfig {
            tol: 1e-4,
            max_iters: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeanField {
    pub mu1: Array1<f64>,
    pub mu2: Array1<f64>,
    pub iterations_used: usize,
    pub converged: bool,
}

/// Fixed-point mean-field with `v` clamped on both ends.
///
/// Each iteration refreshes `μ2` from `μ1`, then computes the next `μ1`; the
/// iteration stops when that `μ1` moves less than `tol`. On convergence the
/// returned pair satisfies the `μ2` equation exactly and the `μ1` equation to
/// within `tol`.
pub fn mean_field(v: ArrayView1<f64>, p: &CrDbmParams, cfg: MeanFieldConfig) -> Result<MeanField> {
    p.check_visible(v.len())?;
    let drive1 = v.dot(&p.w1) + &p.b1;
    let drive2 = p.w3.dot(&v) + &p.b2;
    let mut mu2 = Array1::from_elem(p.n_recon(), 0.5);
    let mut mu1 = (&drive1 + &p.w2.dot(&mu2)).mapv_into(sigmoid);
    for it in 1..=cfg.max_iters {
        mu2 = (&drive2 + &mu1.dot(&p.w2)).mapv_into(sigmoid);
        let next = (&drive1 + &p.w2.dot(&mu2)).mapv_into(sigmoid);
        let change = max_abs_diff(next.view(), mu1.view());
        if change < cfg.tol {
            return Ok(MeanField {
                mu1,
                mu2,
                iterations_used: it,
                converged: true,
            });
        }
        mu1 = next;
    }
    Ok(MeanField {
        mu1,
        mu2,
        iterations_used: cfg.max_iters,
        converged: false,
    })
}

fn max_abs_diff<'a, D: ndarray::Dimension>(
    a: ndarray::ArrayView<'a, f64, D>,
    b: ndarray::ArrayView<'a, f64, D>,
) -> f64 {
    Zip::from(&a)
        .and(&b)
        .fold(0.0f64, |m, &x, &y| m.max((x - y).abs()))
}

/// Mean-field for rows `[lo, hi)` of a batch; iterates until every row in
/// the block meets the stopping rule.
fn mean_field_block(
    v: ArrayView2<f64>,
    p: &CrDbmParams,
    cfg: MeanFieldConfig,
) -> (Array2<f64>, Array2<f64>) {
    let drive1 = v.dot(&p.w1) + &p.b1;
    let drive2 = v.dot(&p.w3.t()) + &p.b2;
    let mut mu2 = Array2::from_elem((v.nrows(), p.n_recon()), 0.5);
    let mut mu1 = (&drive1 + &mu2.dot(&p.w2.t())).mapv_into(sigmoid);
    for _ in 0..cfg.max_iters {
        mu2 = (&drive2 + &mu1.dot(&p.w2)).mapv_into(sigmoid);
        let next = (&drive1 + &mu2.dot(&p.w2.t())).mapv_into(sigmoid);
        let change = max_abs_diff(next.view(), mu1.view());
        if change < cfg.tol {
            break;
        }
        mu1 = next;
    }
    (mu1, mu2)
}

/// Row-wise mean-field over an `N×M` batch, returning `(μ1, μ2)` matrices.
pub fn mean_field_batch(
    v: ArrayView2<f64>,
    p: &CrDbmParams,
    cfg: MeanFieldConfig,
) -> Result<(Array2<f64>, Array2<f64>)> {
    p.check_visible(v.ncols())?;
    let n = v.nrows();
    let blocks: Vec<(usize, usize)> = (0..n)
        .step_by(ROW_CHUNK)
        .map(|lo| (lo, (lo + ROW_CHUNK).min(n)))
        .collect();
    let parts = par::map(&blocks, |&(lo, hi)| mean_field_block(v.slice(s![lo..hi, ..]), p, cfg));
    let mut mu1 = Array2::zeros((n, p.n_cluster()));
    let mut mu2 = Array2::zeros((n, p.n_recon()));
    for (&(lo, hi), (m1, m2)) in blocks.iter().zip(parts) {
        mu1.slice_mut(s![lo..hi, ..]).assign(&m1);
        mu2.slice_mut(s![lo..hi, ..]).assign(&m2);
    }
    Ok((mu1, mu2))
}

/// Persistent chains for PCD. `h1` holds binary samples; `v1`, `h2`, `v2`
/// hold conditional probabilities used directly as unit states.
#[derive(Debug, Clone)]
pub struct PcdState {
    pub v1: Array2<f64>,
    pub h1: Array2<f64>,
    pub h2: Array2<f64>,
    pub v2: Array2<f64>,
    pub rng: ChaCha8Rng,
}

impl PcdState {
    /// `chains` chains started from Bernoulli(0.5) states.
    pub fn new(p: &CrDbmParams, chains: usize, seed: u64) -> Result<Self> {
        if chains == 0 {
            return Err(Error::Empty("PCD chains"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut coin = |shape: (usize, usize)| {
            Array2::from_shape_simple_fn(shape, || if rng.random::<bool>() { 1.0 } else { 0.0 })
        };
        let (m, k1, k2) = (p.n_visible(), p.n_cluster(), p.n_recon());
        let v1 = coin((chains, m));
        let h1 = coin((chains, k1));
        let h2 = coin((chains, k2));
        let v2 = coin((chains, m));
        Ok(PcdState {
            v1,
            h1,
            h2,
            v2,
            rng,
        })
    }

    pub fn chains(&self) -> usize {
        self.v1.nrows()
    }

    /// One alternating sweep: `(h1, v2)` given `(v1, h2)`, then `(v1, h2)`
    /// given `(h1, v2)`.
    pub fn sweep(&mut self, p: &CrDbmParams) {
        let n = self.chains();
        let k1 = p.n_cluster();
        let uniforms = Array2::from_shape_simple_fn((n, k1), || self.rng.random::<f64>());
        let mut h1 = (self.v1.dot(&p.w1) + self.h2.dot(&p.w2.t()) + &p.b1).mapv_into(sigmoid);
        Zip::from(&mut h1)
            .and(&uniforms)
            .for_each(|q, &u| *q = if u < *q { 1.0 } else { 0.0 });
        let v2 = (self.h2.dot(&p.w3) + &p.a2).mapv_into(sigmoid);
        self.v1 = (h1.dot(&p.w1.t()) + &p.a1).mapv_into(sigmoid);
        self.h2 = (h1.dot(&p.w2) + v2.dot(&p.w3.t()) + &p.b2).mapv_into(sigmoid);
        self.h1 = h1;
        self.v2 = v2;
    }
}

/// Gradient estimate for one minibatch: mean-field data statistics minus
/// statistics of the persistent chains after one sweep. Advances `state`.
pub fn pcd_gradient(
    batch: ArrayView2<f64>,
    p: &CrDbmParams,
    state: &mut PcdState,
    mf: MeanFieldConfig,
) -> Result<CrDbmParams> {
    let n = batch.nrows();
    if n == 0 {
        return Err(Error::Empty("PCD batch"));
    }
    if state.chains() == 0 {
        return Err(Error::Empty("PCD chains"));
    }
    p.check_visible(batch.ncols())?;
    let (mu1, mu2) = mean_field_batch(batch, p, mf)?;
    state.sweep(p);

    let nd = n as f64;
    let nc = state.chains() as f64;
    let data_v = batch.sum_axis(Axis(0)) / nd;
    let model = |x: &Array2<f64>| x.sum_axis(Axis(0)) / nc;
    Ok(CrDbmParams {
        a1: &data_v - &model(&state.v1),
        a2: &data_v - &model(&state.v2),
        b1: mu1.sum_axis(Axis(0)) / nd - model(&state.h1),
        b2: mu2.sum_axis(Axis(0)) / nd - model(&state.h2),
        w1: batch.t().dot(&mu1) / nd - state.v1.t().dot(&state.h1) / nc,
        w2: mu1.t().dot(&mu2) / nd - state.h1.t().dot(&state.h2) / nc,
        w3: mu2.t().dot(&batch) / nd - state.h2.t().dot(&state.v2) / nc,
    })
}

/// One PCD update in place; returns the applied change.
pub fn pcd_step(
    batch: ArrayView2<f64>,
    p: &mut CrDbmParams,
    state: &mut PcdState,
    learning_rate: f64,
    mf: MeanFieldConfig,
) -> Result<CrDbmParams> {
    let mut g = pcd_gradient(batch, p, state, mf)?;
    g.a1 *= learning_rate;
    g.a2 *= learning_rate;
    g.b1 *= learning_rate;
    g.b2 *= learning_rate;
    g.w1 *= learning_rate;
    g.w2 *= learning_rate;
    g.w3 *= learning_rate;
    p.axpy(1.0, &g);
    Ok(g)
}

/// One PCD update returning the new parameters and advanced chains.
pub fn pcd_update(
    batch: ArrayView2<f64>,
    p: &CrDbmParams,
    mut state: PcdState,
    learning_rate: f64,
    mf: MeanFieldConfig,
) -> Result<(CrDbmParams, PcdState)> {
    let mut next = p.clone();
    pcd_step(batch, &mut next, &mut state, learning_rate, mf)?;
    Ok((next, state))
}

/// DBM training settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DbmTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub chains: usize,
    pub pretrain_epochs: usize,
    pub pretrain_learning_rate: f64,
    pub mean_field: MeanFieldConfig,
    pub seed: u64,
}

impl Default for DbmTrainConfig {
    fn default() -> Self {
        DbmTrainConfig {
            epochs: 500,
            learning_rate: 0.001,
            batch_size: 100,
            chains: 100,
            pretrain_epochs: 50,
            pretrain_learning_rate: 0.001,
            mean_field: MeanFieldConfig::default(),
            seed: 0,
        }
    }
}

/// CD-1 for a pretraining RBM whose bottom-up input is multiplied by `up`.
fn pretrain_stage<R: Rng + ?Sized>(
    data: ArrayView2<f64>,
    k: usize,
    up: f64,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    rng: &mut R,
) -> RbmParams {
    let m = data.ncols();
    let mut p = RbmParams::random(m, k, rng);
    let mut order: Vec<usize> = (0..data.nrows()).collect();
    for _ in 0..epochs {
        order.shuffle(rng);
        for chunk in order.chunks(batch_size.max(1)) {
            let v0 = data.select(Axis(0), chunk);
            let n = v0.nrows() as f64;
            let h0 = (v0.dot(&p.w) * up + &p.b).mapv_into(sigmoid);
            let hs = h0.mapv(|q| if rng.random::<f64>() < q { 1.0 } else { 0.0 });
            let v1 = (hs.dot(&p.w.t()) + &p.a).mapv_into(sigmoid);
            let h1 = (v1.dot(&p.w) * up + &p.b).mapv_into(sigmoid);
            let scale = lr / n;
            p.a.scaled_add(scale, &(v0.sum_axis(Axis(0)) - v1.sum_axis(Axis(0))));
            p.b.scaled_add(scale, &(h0.sum_axis(Axis(0)) - h1.sum_axis(Axis(0))));
            p.w.scaled_add(scale, &(v0.t().dot(&h0) - v1.t().dot(&h1)));
        }
    }
    p
}

/// Greedy layer-wise initialization.
///
/// `v→h1` and `v→h2` are each trained as RBMs with doubled bottom-up input,
/// since both hidden layers receive a second input inside the DBM. The
/// middle weights come from an RBM over the `h1` posteriors and are halved.
/// With zero pretraining epochs this is the plain random initialization.
pub fn pretrain(
    data: ArrayView2<f64>,
    dims: (usize, usize, usize),
    cfg: &DbmTrainConfig,
) -> Result<CrDbmParams> {
    let (m, k1, k2) = dims;
    if data.nrows() == 0 {
        return Err(Error::Empty("pretraining data"));
    }
    ensure_dim(data.ncols() == m, || format!("data has {} columns, M = {m}", data.ncols()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, &[0x7072_6574]));
    if cfg.pretrain_epochs == 0 {
        return Ok(CrDbmParams::random(m, k1, k2, &mut rng));
    }
    let (e, lr, bs) = (cfg.pretrain_epochs, cfg.pretrain_learning_rate, cfg.batch_size);
    let lower = pretrain_stage(data, k1, 2.0, e, lr, bs, &mut rng);
    let upper = pretrain_stage(data, k2, 2.0, e, lr, bs, &mut rng);
    let h1 = (data.dot(&lower.w) * 2.0 + &lower.b).mapv_into(sigmoid);
    let middle = pretrain_stage(h1.view(), k2, 1.0, e, lr, bs, &mut rng);
    Ok(CrDbmParams {
        a1: lower.a,
        a2: upper.a,
        b1: lower.b,
        b2: upper.b,
        w1: lower.w,
        w2: middle.w * 0.5,
        w3: upper.w.t().to_owned(),
    })
}

/// Run PCD epochs over shuffled minibatches.
pub fn train(data: ArrayView2<f64>, p: &mut CrDbmParams, cfg: &DbmTrainConfig) -> Result<()> {
    if data.nrows() == 0 {
        return Err(Error::Empty("DBM training data"));
    }
    p.check_visible(data.ncols())?;
    let mut state = PcdState::new(p, cfg.chains, mix_seed(cfg.seed, &[0x6368_6169]))?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, &[0x6f72_6465]));
    let mut order: Vec<usize> = (0..data.nrows()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let batch = data.select(Axis(0), chunk);
            pcd_step(batch.view(), p, &mut state, cfg.learning_rate, cfg.mean_field)?;
        }
    }
    Ok(())
}

/// Pretrain then PCD-train a model on `data`.
pub fn fit(data: ArrayView2<f64>, k1: usize, k2: usize, cfg: &DbmTrainConfig) -> Result<CrDbmParams> {
    let mut p = pretrain(data, (data.ncols(), k1, k2), cfg)?;
    train(data, &mut p, cfg)?;
    Ok(p)
}

/// Binary cluster code `I(μ1 > 0.5)`.
pub fn cluster_code(v: ArrayView1<f64>, p: &CrDbmParams, mf: MeanFieldConfig) -> Result<Vec<bool>> {
    Ok(mean_field(v, p, mf)?.mu1.iter().map(|&m| m > 0.5).collect())
}

/// Row-wise cluster codes.
pub fn cluster_codes(v: ArrayView2<f64>, p: &CrDbmParams, mf: MeanFieldConfig) -> Result<Vec<Vec<bool>>> {
    let (mu1, _) = mean_field_batch(v, p, mf)?;
    Ok(mu1
        .rows()
        .into_iter()
        .map(|r| r.iter().map(|&m| m > 0.5).collect())
        .collect())
}

/// `v_r = σ(a2 + W3ᵀμ2)`.
pub fn reconstruct_dbm(v: ArrayView1<f64>, p: &CrDbmParams, mf: MeanFieldConfig) -> Result<Array1<f64>> {
    let field = mean_field(v, p, mf)?;
    Ok((field.mu2.dot(&p.w3) + &p.a2).mapv_into(sigmoid))
}

/// Row-wise [`reconstruct_dbm`].
pub fn reconstruct_dbm_batch(v: ArrayView2<f64>, p: &CrDbmParams, mf: MeanFieldConfig) -> Result<Array2<f64>> {
    let (_, mu2) = mean_field_batch(v, p, mf)?;
    Ok((mu2.dot(&p.w3) + &p.a2).mapv_into(sigmoid))
}

/// Mean absolute contribution `α_n` of each hidden unit of `base` on `data`.
pub fn hidden_unit_scores(base: &RbmParams, data: ArrayView2<f64>) -> Result<Array1<f64>> {
    if data.nrows() == 0 {
        return Err(Error::Empty("reduction data"));
    }
    let h = rbm::hidden_probs(data, base)?;
    let (m, n) = (base.n_visible() as f64, data.nrows() as f64);
    // h̃ ≥ 0, so Σ_i Σ_m |w_mn h̃_in| = (Σ_m |w_mn|)(Σ_i h̃_in).
    let col_abs = base.w.mapv(f64::abs).sum_axis(Axis(0));
    let act = h.sum_axis(Axis(0));
    Ok(col_abs * act / (n * m))
}

/// Indices of the `k` largest scores, ties to the lower index.
pub fn top_k(scores: ArrayView1<f64>, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
    idx.truncate(k);
    idx
}

/// Shrink the reconstruction end of `p` to the `k_keep` hidden units with the
/// largest contribution on `data`.
pub fn reduce_to_rbm(p: &CrDbmParams, data: ArrayView2<f64>, k_keep: usize) -> Result<RbmParams> {
    if k_keep == 0 || k_keep > p.n_recon() {
        return Err(Error::InvalidArgument(format!(
            "cannot keep {k_keep} of {} hidden units",
            p.n_recon()
        )));
    }
    let base = p.reconstruction_rbm();
    let scores = hidden_unit_scores(&base, data)?;
    Ok(base.select_hidden(&top_k(scores.view(), k_keep)))
}

/// Outcome of fine-tuning one region model.
#[derive(Debug, Clone, PartialEq)]
pub struct Finetuned {
    pub label: u32,
    pub params: RbmParams,
    /// Set when the region had no data and kept its reduced parameters.
    pub skipped: bool,
}

/// CD fine-tuning of each region's reduced RBM on that region's patches.
/// Each region draws from its own generator keyed by its label, so results do
/// not depend on the order regions are listed in.
pub fn finetune_region_rbms(
    regions: &[(u32, RbmParams, ArrayView2<f64>)],
    cfg: &TrainConfig,
) -> Result<Vec<Finetuned>> {
    let out = par::map(regions, |(label, params, data)| -> Result<Finetuned> {
        let mut params = params.clone();
        if data.nrows() == 0 {
            return Ok(Finetuned {
                label: *label,
                params,
                skipped: true,
            });
        }
        if cfg.epochs > 0 {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, &[*label as u64]));
            rbm::train(*data, &mut params, cfg, &mut rng)?;
        }
        Ok(Finetuned {
            label: *label,
            params,
            skipped: false,
        })
    });
    out.into_iter().collect()
}

/// Exact quantities for tiny models by enumeration.
pub mod exact {
    use super::*;
    use crate::math::softplus;
    use crate::rbm::exact::{state_vector, LogSumExp};

    pub const MAX_UNITS: usize = 24;

    fn check_size(units: usize) -> Result<()> {
        if units > MAX_UNITS {
            return Err(Error::TooLarge { units });
        }
        Ok(())
    }

    /// Sum `exp(-E)` over every `(v1, v2, h1, h2)` state directly.
    pub fn log_partition_brute(p: &CrDbmParams) -> Result<f64> {
        let (m, k1, k2) = (p.n_visible(), p.n_cluster(), p.n_recon());
        check_size(2 * m + k1 + k2)?;
        let mut acc = LogSumExp::default();
        for s1 in 0..(1u64 << m) {
            let v1 = state_vector(s1, m);
            for s2 in 0..(1u64 << m) {
                let v2 = state_vector(s2, m);
                for t1 in 0..(1u64 << k1) {
                    let h1 = state_vector(t1, k1);
                    for t2 in 0..(1u64 << k2) {
                        let h2 = state_vector(t2, k2);
                        acc.push(-mt_energy(v1.view(), v2.view(), h1.view(), h2.view(), p)?);
                    }
                }
            }
        }
        Ok(acc.value())
    }

    /// Unnormalized log-weight of `(h1, h2)` with both visible ends summed out.
    fn hidden_log_weight(h1: &Array1<f64>, h2: &Array1<f64>, p: &CrDbmParams) -> f64 {
        let v1_in = p.w1.dot(h1) + &p.a1;
        let v2_in = h2.dot(&p.w3) + &p.a2;
        p.b1.dot(h1)
            + p.b2.dot(h2)
            + h1.dot(&p.w2.dot(h2))
            + v1_in.iter().map(|&x| softplus(x)).sum::<f64>()
            + v2_in.iter().map(|&x| softplus(x)).sum::<f64>()
    }

    /// `log Z` of the untied model, summing the visible ends analytically.
    pub fn log_partition(p: &CrDbmParams) -> Result<f64> {
        let (k1, k2) = (p.n_cluster(), p.n_recon());
        check_size(k1 + k2)?;
        let mut acc = LogSumExp::default();
        for t1 in 0..(1u64 << k1) {
            let h1 = state_vector(t1, k1);
            for t2 in 0..(1u64 << k2) {
                acc.push(hidden_log_weight(&h1, &state_vector(t2, k2), p));
            }
        }
        Ok(acc.value())
    }

    /// `log Σ_{h1,h2} exp(-E(x, x, h1, h2))`.
    pub fn clamped_log_weight(x: ArrayView1<f64>, p: &CrDbmParams) -> Result<f64> {
        p.check_visible(x.len())?;
        let k1 = p.n_cluster();
        check_size(k1)?;
        let drive2 = p.w3.dot(&x) + &p.b2;
        let base = p.a1.dot(&x) + p.a2.dot(&x);
        let mut acc = LogSumExp::default();
        for t1 in 0..(1u64 << k1) {
            let h1 = state_vector(t1, k1);
            let pre2 = &drive2 + &h1.dot(&p.w2);
            acc.push(
                p.b1.dot(&h1) + x.dot(&p.w1.dot(&h1)) + pre2.iter().map(|&z| softplus(z)).sum::<f64>(),
            );
        }
        Ok(base + acc.value())
    }

    /// Mean of `log P(v1 = x, v2 = x)` over the rows of `data`.
    pub fn log_likelihood(data: ArrayView2<f64>, p: &CrDbmParams) -> Result<f64> {
        if data.nrows() == 0 {
            return Err(Error::Empty("likelihood data"));
        }
        let log_z = log_partition(p)?;
        let mut total = 0.0;
        for row in data.rows() {
            total += clamped_log_weight(row, p)?;
        }
        Ok(total / data.nrows() as f64 - log_z)
    }

    /// `log Z` of the tied model in which `v1 = v2` always.
    pub fn log_partition_tied(p: &CrDbmParams) -> Result<f64> {
        let m = p.n_visible();
        check_size(m + p.n_cluster())?;
        let mut acc = LogSumExp::default();
        for s in 0..(1u64 << m) {
            acc.push(clamped_log_weight(state_vector(s, m).view(), p)?);
        }
        Ok(acc.value())
    }

    /// `-∂E/∂θ` for one configuration, laid out as parameters.
    fn sufficient(
        v1: &Array1<f64>,
        v2: &Array1<f64>,
        h1: &Array1<f64>,
        h2: &Array1<f64>,
    ) -> CrDbmParams {
        let outer = |x: &Array1<f64>, y: &Array1<f64>| {
            Array2::from_shape_fn((x.len(), y.len()), |(i, j)| x[i] * y[j])
        };
        CrDbmParams {
            a1: v1.clone(),
            a2: v2.clone(),
            b1: h1.clone(),
            b2: h2.clone(),
            w1: outer(v1, h1),
            w2: outer(h1, h2),
            w3: outer(h2, v2),
        }
    }

    /// Gradient of [`log_likelihood`] by full enumeration.
    pub fn gradient(data: ArrayView2<f64>, p: &CrDbmParams) -> Result<CrDbmParams> {
        let (m, k1, k2) = (p.n_visible(), p.n_cluster(), p.n_recon());
        check_size(2 * m + k1 + k2)?;
        if data.nrows() == 0 {
            return Err(Error::Empty("gradient data"));
        }
        let mut g = CrDbmParams::zeros(m, k1, k2);
        let nd = data.nrows() as f64;
        for row in data.rows() {
            let x = row.to_owned();
            let log_w = clamped_log_weight(row, p)?;
            for t1 in 0..(1u64 << k1) {
                let h1 = state_vector(t1, k1);
                for t2 in 0..(1u64 << k2) {
                    let h2 = state_vector(t2, k2);
                    let e = mt_energy(x.view(), x.view(), h1.view(), h2.view(), p)?;
                    let w = (-e - log_w).exp() / nd;
                    g.axpy(w, &sufficient(&x, &x, &h1, &h2));
                }
            }
        }
        let log_z = log_partition(p)?;
        for s1 in 0..(1u64 << m) {
            let v1 = state_vector(s1, m);
            for s2 in 0..(1u64 << m) {
                let v2 = state_vector(s2, m);
                for t1 in 0..(1u64 << k1) {
                    let h1 = state_vector(t1, k1);
                    for t2 in 0..(1u64 << k2) {
                        let h2 = state_vector(t2, k2);
                        let e = mt_energy(v1.view(), v2.view(), h1.view(), h2.view(), p)?;
                        g.axpy(-(-e - log_z).exp(), &sufficient(&v1, &v2, &h1, &h2));
                    }
                }
            }
        }
        Ok(g)
    }
}

/// Group patches by region label for fine-tuning.
pub fn group_rows(data: ArrayView2<f64>, labels: &[u32]) -> BTreeMap<u32, Array2<f64>> {
    let mut idx: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (row, &l) in labels.iter().enumerate() {
        idx.entry(l).or_default().push(row);
    }
    idx.into_iter()
        .map(|(l, rows)| (l, data.select(Axis(0), &rows)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::exact::*;
    use super::*;
    use crate::rbm::exact::state_vector;
    use ndarray::array;

    fn random_dbm(m: usize, k1: usize, k2: usize, scale: f64, seed: u64) -> CrDbmParams {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, scale).unwrap();
        let mut p = CrDbmParams::zeros(m, k1, k2);
        for v in [&mut p.a1, &mut p.a2, &mut p.b1, &mut p.b2] {
            v.mapv_inplace(|_| n.sample(&mut r));
        }
        for w in [&mut p.w1, &mut p.w2, &mut p.w3] {
            w.mapv_inplace(|_| n.sample(&mut r));
        }
        p
    }

    #[test]
    fn energy_term_isolation() {
        let p = random_dbm(2, 2, 2, 1.0, 1);
        let z2 = Array1::zeros(2);
        assert_eq!(mt_energy(z2.view(), z2.view(), z2.view(), z2.view(), &p).unwrap(), 0.0);
        let e = |i: usize| {
            let mut x = Array1::zeros(2);
            x[i] = 1.0;
            x
        };
        let (v1, h1, h2, v2) = (e(0), e(1), e(0), e(1));
        let expected = -(p.a1[0] + p.a2[1] + p.b1[1] + p.b2[0] + p.w1[[0, 1]] + p.w2[[1, 0]] + p.w3[[0, 1]]);
        let got = mt_energy(v1.view(), v2.view(), h1.view(), h2.view(), &p).unwrap();
        assert!((got - expected).abs() < 1e-14);
        assert!(mt_energy(Array1::zeros(3).view(), z2.view(), z2.view(), z2.view(), &p).is_err());
    }

    #[test]
    fn analytic_partition_matches_brute_force() {
        // 2^8 states for M = 2, K1 = 2, K2 = 2.
        let p = random_dbm(2, 2, 2, 0.7, 2);
        let brute = log_partition_brute(&p).unwrap();
        let analytic = log_partition(&p).unwrap();
        assert!((brute - analytic).abs() < 1e-12);
    }

    #[test]
    fn tied_marginal_is_normalized() {
        let p = random_dbm(2, 1, 2, 0.9, 3);
        let log_z = log_partition_tied(&p).unwrap();
        let total: f64 = (0..4u64)
            .map(|s| (clamped_log_weight(state_vector(s, 2).view(), &p).unwrap() - log_z).exp())
            .sum();
        assert!((total - 1.0).abs() < 1e-10);
    }

    #[test]
    fn mean_field_zero_model() {
        let p = CrDbmParams::zeros(3, 2, 4);
        let mf = mean_field(array![1.0, 0.0, 0.5].view(), &p, MeanFieldConfig::default()).unwrap();
        assert!(mf.converged);
        assert_eq!(mf.iterations_used, 1);
        assert!(mf.mu1.iter().chain(&mf.mu2).all(|&m| m == 0.5));
    }

    #[test]
    fn mean_field_decoupled_layers() {
        let mut p = random_dbm(4, 2, 3, 1.0, 4);
        p.w2.fill(0.0);
        let v = array![0.2, 1.0, 0.0, 0.7];
        let mf = mean_field(v.view(), &p, MeanFieldConfig::default()).unwrap();
        assert!(mf.converged && mf.iterations_used <= 2);
        let mu1 = (v.dot(&p.w1) + &p.b1).mapv(sigmoid);
        let mu2 = (p.w3.dot(&v) + &p.b2).mapv(sigmoid);
        assert!(max_abs_diff(mf.mu1.view(), mu1.view()) < 1e-15);
        assert!(max_abs_diff(mf.mu2.view(), mu2.view()) < 1e-15);
    }

    #[test]
    fn mean_field_plug_back() {
        let cfg = MeanFieldConfig::default();
        for seed in 0..50 {
            let p = random_dbm(5, 3, 4, 1.0, 100 + seed);
            let v = Array1::from_shape_fn(5, |i| ((i as u64 * 7 + seed) % 5) as f64 / 4.0);
            let mf = mean_field(v.view(), &p, cfg).unwrap();
            if !mf.converged {
                continue;
            }
            let r1 = (v.dot(&p.w1) + &p.b1 + p.w2.dot(&mf.mu2)).mapv(sigmoid);
            let r2 = (mf.mu1.dot(&p.w2) + &p.b2 + p.w3.dot(&v)).mapv(sigmoid);
            assert!(max_abs_diff(r1.view(), mf.mu1.view()) < cfg.tol);
            assert!(max_abs_diff(r2.view(), mf.mu2.view()) < cfg.tol);
        }
    }

    #[test]
    fn batch_mean_field_matches_single_rows() {
        let p = random_dbm(4, 2, 5, 0.5, 5);
        let v = Array2::from_shape_fn((40, 4), |(i, j)| ((i * 3 + j) % 4) as f64 / 3.0);
        let cfg = MeanFieldConfig { tol: 1e-12, max_iters: 500 };
        let (mu1, mu2) = mean_field_batch(v.view(), &p, cfg).unwrap();
        for (i, row) in v.rows().into_iter().enumerate() {
            let mf = mean_field(row, &p, cfg).unwrap();
            assert!(max_abs_diff(mu1.row(i), mf.mu1.view()) < 1e-10);
            assert!(max_abs_diff(mu2.row(i), mf.mu2.view()) < 1e-10);
        }
    }

    #[test]
    fn pcd_equilibrium_is_stationary() {
        let p = CrDbmParams::zeros(4, 2, 3);
        let batch = Array2::from_elem((100, 4), 0.5);
        let mut state = PcdState::new(&p, 100, 7).unwrap();
        let mut mean = CrDbmParams::zeros(4, 2, 3);
        for _ in 0..100 {
            let (next, s) = pcd_update(batch.view(), &p, state, 0.1, MeanFieldConfig::default()).unwrap();
            state = s;
            mean.axpy(0.01, &next);
        }
        assert!(mean.flatten().iter().all(|d| d.abs() < 0.02));
    }

    #[test]
    fn pcd_chain_state_invariants() {
        let p = random_dbm(3, 2, 4, 2.0, 8);
        let mut state = PcdState::new(&p, 20, 9).unwrap();
        for _ in 0..10 {
            state.sweep(&p);
            assert!(state.h1.iter().all(|&x| x == 0.0 || x == 1.0));
            for layer in [&state.v1, &state.h2, &state.v2] {
                assert!(layer.iter().all(|&x| (0.0..=1.0).contains(&x)));
            }
        }
        assert!(PcdState::new(&p, 0, 1).is_err());
        let mut s = PcdState::new(&p, 5, 1).unwrap();
        assert!(pcd_gradient(Array2::zeros((0, 3)).view(), &p, &mut s, MeanFieldConfig::default()).is_err());
    }

    fn two_patterns(m: usize, copies: usize) -> Array2<f64> {
        Array2::from_shape_fn((2 * copies, m), |(i, j)| {
            if (j < m / 2) == (i % 2 == 0) { 1.0 } else { 0.0 }
        })
    }

    #[test]
    fn pcd_training_raises_likelihood() {
        let data = two_patterns(4, 10);
        let cfg = DbmTrainConfig {
            epochs: 500,
            learning_rate: 0.1,
            batch_size: 20,
            chains: 50,
            pretrain_epochs: 0,
            seed: 1,
            ..Default::default()
        };
        let mut p = pretrain(data.view(), (4, 1, 3), &cfg).unwrap();
        let before = log_likelihood(data.view(), &p).unwrap();
        train(data.view(), &mut p, &cfg).unwrap();
        let after = log_likelihood(data.view(), &p).unwrap();
        assert!(after > before + 0.5, "{before} -> {after}");
    }

    #[test]
    fn pretrain_shapes_and_zero_epochs() {
        let data = two_patterns(6, 5);
        let cfg = DbmTrainConfig { pretrain_epochs: 3, ..Default::default() };
        let p = pretrain(data.view(), (6, 2, 5), &cfg).unwrap();
        p.validate().unwrap();
        assert_eq!((p.n_visible(), p.n_cluster(), p.n_recon()), (6, 2, 5));
        let zero = DbmTrainConfig { pretrain_epochs: 0, ..cfg };
        let a = pretrain(data.view(), (6, 2, 5), &zero).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(zero.seed, &[0x7072_6574]));
        assert_eq!(a, CrDbmParams::random(6, 2, 5, &mut rng));
        assert!(pretrain(Array2::zeros((0, 6)).view(), (6, 2, 5), &cfg).is_err());
    }

    #[test]
    fn pretraining_helps_after_pcd() {
        let data = two_patterns(4, 10);
        let mut wins = 0;
        for seed in 0..10 {
            let base = DbmTrainConfig {
                epochs: 30,
                learning_rate: 0.05,
                batch_size: 20,
                chains: 50,
                pretrain_epochs: 100,
                pretrain_learning_rate: 0.1,
                seed,
                ..Default::default()
            };
            let pre = fit(data.view(), 1, 3, &base).unwrap();
            let rand = fit(data.view(), 1, 3, &DbmTrainConfig { pretrain_epochs: 0, ..base }).unwrap();
            if log_likelihood(data.view(), &pre).unwrap() > log_likelihood(data.view(), &rand).unwrap() {
                wins += 1;
            }
        }
        assert!(wins > 5, "pretraining won {wins}/10");
    }

    #[test]
    fn cluster_code_cases() {
        let mut p = random_dbm(4, 3, 5, 0.1, 10);
        p.b1.fill(-30.0);
        let v = array![1.0, 1.0, 0.0, 1.0];
        let mf = MeanFieldConfig::default();
        assert_eq!(cluster_code(v.view(), &p, mf).unwrap(), vec![false; 3]);

        let q = random_dbm(4, 3, 5, 1.0, 11);
        let perm = [3usize, 0, 4, 2, 1];
        let mut r = q.clone();
        r.w2 = q.w2.select(Axis(1), &perm);
        r.b2 = q.b2.select(Axis(0), &perm);
        r.w3 = q.w3.select(Axis(0), &perm);
        for s in 0..16u64 {
            let x = state_vector(s, 4);
            assert_eq!(cluster_code(x.view(), &q, mf).unwrap(), cluster_code(x.view(), &r, mf).unwrap());
        }
    }

    #[test]
    fn reconstruction_cases() {
        let mut p = random_dbm(4, 2, 3, 1.0, 12);
        p.w3.fill(0.0);
        let vr = reconstruct_dbm(array![1.0, 0.0, 0.3, 1.0].view(), &p, MeanFieldConfig::default()).unwrap();
        assert!(max_abs_diff(vr.view(), p.a2.mapv(sigmoid).view()) < 1e-15);
        let q = random_dbm(4, 2, 3, 5.0, 13);
        let vr = reconstruct_dbm(array![1.0, 0.0, 0.3, 1.0].view(), &q, MeanFieldConfig::default()).unwrap();
        assert!(vr.iter().all(|&x| x > 0.0 && x < 1.0));
    }

    #[test]
    fn trained_dbm_reconstructs_patterns_better() {
        let data = two_patterns(6, 10);
        let cfg = DbmTrainConfig {
            epochs: 300,
            learning_rate: 0.05,
            batch_size: 20,
            chains: 50,
            pretrain_epochs: 50,
            pretrain_learning_rate: 0.1,
            seed: 4,
            ..Default::default()
        };
        let p = fit(data.view(), 2, 8, &cfg).unwrap();
        let err = |v: ArrayView1<f64>| {
            let vr = reconstruct_dbm(v, &p, cfg.mean_field).unwrap();
            (&v - &vr).mapv(|x| x * x).sum()
        };
        let pattern = data.row(0).to_owned();
        let mixed = array![1.0, 0.0, 1.0, 0.0, 1.0, 0.0];
        assert!(err(pattern.view()) < err(mixed.view()));
    }

    #[test]
    fn two_textures_get_distinct_codes() {
        let data = two_patterns(8, 20);
        let cfg = DbmTrainConfig {
            epochs: 200,
            learning_rate: 0.05,
            batch_size: 20,
            chains: 50,
            pretrain_epochs: 50,
            pretrain_learning_rate: 0.1,
            seed: 5,
            ..Default::default()
        };
        let p = fit(data.view(), 2, 8, &cfg).unwrap();
        let c0 = cluster_code(data.row(0), &p, cfg.mean_field).unwrap();
        let c1 = cluster_code(data.row(1), &p, cfg.mean_field).unwrap();
        assert_ne!(c0, c1);
    }

    #[test]
    fn reduction_scores_match_double_loop() {
        let p = random_dbm(5, 2, 6, 1.0, 14);
        let data = Array2::from_shape_fn((7, 5), |(i, j)| ((i * 5 + j * 3) % 7) as f64 / 6.0);
        let base = p.reconstruction_rbm();
        let scores = hidden_unit_scores(&base, data.view()).unwrap();
        let (n, m, k) = (7, 5, 6);
        for unit in 0..k {
            let mut alpha = 0.0;
            for i in 0..n {
                let h = crate::rbm::hidden_cond(data.row(i), &base).unwrap();
                for mi in 0..m {
                    alpha += (base.w[[mi, unit]] * h[unit]).abs() / (n * m) as f64;
                }
            }
            assert!((alpha - scores[unit]).abs() < 1e-12);
        }
    }

    #[test]
    fn reduction_selection() {
        let mut p = random_dbm(4, 2, 5, 1.0, 15);
        p.w3.row_mut(2).fill(0.0);
        let data = Array2::from_elem((3, 4), 0.5);
        let r = reduce_to_rbm(&p, data.view(), 4).unwrap();
        let base = p.reconstruction_rbm();
        for c in r.w.columns() {
            assert!(c.iter().any(|&x| x != 0.0));
            assert!(base.w.columns().into_iter().any(|b| b == c));
        }
        let full = reduce_to_rbm(&p, data.view(), 5).unwrap();
        let mut got: Vec<Vec<u64>> = full.w.columns().into_iter().map(|c| c.iter().map(|x| x.to_bits()).collect()).collect();
        let mut want: Vec<Vec<u64>> = base.w.columns().into_iter().map(|c| c.iter().map(|x| x.to_bits()).collect()).collect();
        got.sort();
        want.sort();
        assert_eq!(got, want);
        assert!(reduce_to_rbm(&p, data.view(), 0).is_err());
        assert!(reduce_to_rbm(&p, data.view(), 6).is_err());
        assert_eq!(top_k(array![1.0, 3.0, 3.0, 0.5].view(), 2), vec![1, 2]);
    }

    #[test]
    fn finetune_cases() {
        let a = RbmParams::random(4, 3, &mut ChaCha8Rng::seed_from_u64(1));
        let b = RbmParams::random(4, 3, &mut ChaCha8Rng::seed_from_u64(2));
        let da = Array2::from_shape_fn((30, 4), |(i, j)| ((i + j) % 2) as f64);
        let db = Array2::from_shape_fn((30, 4), |(i, _)| (i % 3 == 0) as u8 as f64);
        let zero = TrainConfig { epochs: 0, ..Default::default() };
        let out = finetune_region_rbms(&[(0, a.clone(), da.view())], &zero).unwrap();
        assert_eq!(out[0].params, a);

        let cfg = TrainConfig { epochs: 20, batch_size: 10, ..Default::default() };
        let fwd = finetune_region_rbms(&[(0, a.clone(), da.view()), (1, b.clone(), db.view())], &cfg).unwrap();
        let rev = finetune_region_rbms(&[(1, b.clone(), db.view()), (0, a.clone(), da.view())], &cfg).unwrap();
        assert_eq!(fwd[0], rev[1]);
        assert_eq!(fwd[1], rev[0]);

        let empty = Array2::<f64>::zeros((0, 4));
        let out = finetune_region_rbms(&[(5, a.clone(), empty.view())], &cfg).unwrap();
        assert!(out[0].skipped && out[0].params == a);
    }

    #[test]
    fn finetune_does_not_increase_error() {
        let data = Array2::from_shape_fn((60, 6), |(i, j)| if (j < 3) == (i % 2 == 0) { 0.9 } else { 0.1 });
        let mut improved = 0;
        for seed in 0..5 {
            let p = random_dbm(6, 2, 8, 0.3, 20 + seed);
            let reduced = reduce_to_rbm(&p, data.view(), 4).unwrap();
            let cfg = TrainConfig { epochs: 30, batch_size: 20, seed, ..Default::default() };
            let tuned = finetune_region_rbms(&[(0, reduced.clone(), data.view())], &cfg).unwrap();
            let err = |q: &RbmParams| {
                let r = crate::rbm::reconstruct_batch(data.view(), q).unwrap();
                (&data - &r).mapv(|x| x * x).sum()
            };
            if err(&tuned[0].params) <= err(&reduced) {
                improved += 1;
            }
        }
        assert!(improved >= 3);
    }
}
