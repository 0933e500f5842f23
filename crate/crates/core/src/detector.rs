//! Detection: reconstruction errors, thresholding, 3D component filtering,
//! scale aggregation and streaming region updates.

use std::collections::{BTreeMap, VecDeque};

use ndarray::{Array1, Array2, Array3, ArrayView2, ArrayView3, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dbm::{self, CrDbmParams, MeanFieldConfig};
use crate::error::{ensure_dim, Error, Result};
use crate::ingest::{extract_patches, Frame, PatchGrid, PatchSpec};
use crate::math::mix_seed;
use crate::par;
use crate::rbm::{self, RbmParams, TrainConfig};
use crate::regions::RegionMap;

/// How per-scale score maps are merged.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregation {
    Max,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorConfig {
    /// Threshold on the patch average error.
    pub beta: f64,
    /// Minimum inclusive frame span of a surviving component.
    pub gamma: usize,
    pub aggregation: Aggregation,
    pub chunk_len: usize,
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) || self.gamma == 0 || self.chunk_len == 0 {
            return Err(Error::InvalidArgument(format!(
                "detector needs beta > 0, gamma >= 1, chunk length >= 1: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Patch reconstructor for one scale.
#[derive(Debug, Clone, PartialEq)]
pub enum Reconstructor {
    Regions(BTreeMap<u32, RbmParams>),
    Dbm {
        params: CrDbmParams,
        mean_field: MeanFieldConfig,
    },
}

/// Everything needed to score frames at one scale.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleModel {
    pub spec: PatchSpec,
    pub map: RegionMap,
    pub recon: Reconstructor,
}

/// `‖v − v_r‖₂ / M` per row, where `M = h·w` is the patch length.
pub fn patch_average_error(v: ArrayView2<f64>, vr: ArrayView2<f64>) -> Result<Array1<f64>> {
    ensure_dim(v.dim() == vr.dim(), || {
        format!("patches {:?} vs reconstructions {:?}", v.dim(), vr.dim())
    })?;
    let m = v.ncols() as f64;
    Ok(Zip::from(v.rows()).and(vr.rows()).map_collect(|a, b| {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt() / m
    }))
}

/// Reconstruct every patch of `grid` with the model responsible for it.
pub fn reconstruct_patches(grid: &PatchGrid, model: &ScaleModel) -> Result<Array2<f64>> {
    match &model.recon {
        Reconstructor::Dbm { params, mean_field } => {
            dbm::reconstruct_dbm_batch(grid.patches.view(), params, *mean_field)
        }
        Reconstructor::Regions(rbms) => {
            let labels = model.map.row_labels(grid)?;
            let mut rows: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
            for (r, &l) in labels.iter().enumerate() {
                rows.entry(l).or_default().push(r);
            }
            let groups: Vec<(u32, Vec<usize>)> = rows.into_iter().collect();
            let parts = par::map(&groups, |(label, idx)| {
                let p = rbms
                    .get(label)
                    .ok_or_else(|| Error::Data(format!("no model for region {label}")))?;
                rbm::reconstruct_batch(grid.patches.select(Axis(0), idx).view(), p)
            });
            let mut out = Array2::zeros(grid.patches.dim());
            for ((_, idx), part) in groups.iter().zip(parts) {
                let part = part?;
                for (k, &r) in idx.iter().enumerate() {
                    out.row_mut(r).assign(&part.row(k));
                }
            }
            Ok(out)
        }
    }
}

/// Scores of one frame at one scale.
#[derive(Debug, Clone)]
pub struct FrameScale {
    pub grid: PatchGrid,
    pub patch_avg: Vec<f64>,
    /// `|v − v_r|` composited with overlap averaging.
    pub pixel_error: Array2<f64>,
    pub flags: Vec<bool>,
}

impl FrameScale {
    /// Patch average errors painted on the frame, averaged where rects overlap.
    pub fn score_map(&self) -> Array2<f64> {
        self.grid.paint_mean(&self.patch_avg)
    }

    pub fn anomaly_mask(&self) -> Array2<u8> {
        self.grid.paint_or(&self.flags)
    }

    /// Patch average errors on the `N_h × N_w` grid.
    pub fn grid_errors(&self) -> Array2<f64> {
        let mut g = Array2::zeros((self.grid.rows, self.grid.cols));
        for (c, &e) in self.grid.coords.iter().zip(&self.patch_avg) {
            g[[c.i, c.j]] = e;
        }
        g
    }
}

/// Score one frame: patches with average error `≥ beta` are flagged.
pub fn score_frame(frame: &Frame, model: &ScaleModel, beta: f64) -> Result<FrameScale> {
    let prepared = model.spec.prepare(frame)?;
    let grid = extract_patches(&prepared, &model.spec)?;
    let vr = reconstruct_patches(&grid, model)?;
    let patch_avg = patch_average_error(grid.patches.view(), vr.view())?.to_vec();
    let abs = (&grid.patches - &vr).mapv(f64::abs);
    let pixel_error = grid.reassemble(abs.view())?;
    let flags = patch_avg.iter().map(|&e| e >= beta).collect();
    Ok(FrameScale {
        grid,
        patch_avg,
        pixel_error,
        flags,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorMaps {
    /// `L × H_s × W_s`.
    pub pixel_error: Array3<f64>,
    /// `L × N_h × N_w`.
    pub patch_avg: Array3<f64>,
}

/// Binary voxel tensor over a chunk.
#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyTensor {
    pub z: Array3<u8>,
    pub chunk_start: usize,
}

/// Per-scale output of a scored chunk, at that scale's resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleScores {
    pub errors: ErrorMaps,
    pub score_map: Array3<f64>,
    pub tensor: AnomalyTensor,
}

fn stack<T: Clone + Default>(frames: &[Array2<T>]) -> Array3<T> {
    let (h, w) = frames.first().map(|f| f.dim()).unwrap_or((0, 0));
    let mut out = Array3::from_elem((frames.len(), h, w), T::default());
    for (t, f) in frames.iter().enumerate() {
        out.index_axis_mut(Axis(0), t).assign(f);
    }
    out
}

fn collect_scale(scored: &[FrameScale], chunk_start: usize) -> ScaleScores {
    let pick = |f: &dyn Fn(&FrameScale) -> Array2<f64>| stack(&scored.iter().map(f).collect::<Vec<_>>());
    ScaleScores {
        errors: ErrorMaps {
            pixel_error: pick(&|s| s.pixel_error.clone()),
            patch_avg: pick(&|s| s.grid_errors()),
        },
        score_map: pick(&|s| s.score_map()),
        tensor: AnomalyTensor {
            z: stack(&scored.iter().map(FrameScale::anomaly_mask).collect::<Vec<_>>()),
            chunk_start,
        },
    }
}

fn chunk_start(frames: &[Frame]) -> Result<usize> {
    frames.first().map(|f| f.index).ok_or(Error::Empty("chunk"))
}

/// Score every frame of a chunk at every scale with fixed models.
pub fn score_chunk(frames: &[Frame], models: &[ScaleModel], beta: f64) -> Result<Vec<ScaleScores>> {
    let start = chunk_start(frames)?;
    models
        .iter()
        .map(|model| {
            let scored = par::map(frames, |f| score_frame(f, model, beta))
                .into_iter()
                .collect::<Result<Vec<_>>>()?;
            Ok(collect_scale(&scored, start))
        })
        .collect()
}

/// Expand `a` to `dims` by nearest-neighbour lookup; the source index of
/// output row `y` is `min(floor(y·h/H), h−1)`.
pub fn upsample_nearest<T: Copy>(a: ArrayView3<T>, dims: (usize, usize)) -> Array3<T> {
    let (l, h, w) = a.dim();
    let (oh, ow) = dims;
    let ys: Vec<usize> = (0..oh).map(|y| (y * h / oh).min(h - 1)).collect();
    let xs: Vec<usize> = (0..ow).map(|x| (x * w / ow).min(w - 1)).collect();
    Array3::from_shape_fn((l, oh, ow), |(t, y, x)| a[[t, ys[y], xs[x]]])
}

/// Merge per-scale maps and tensors at full resolution `dims`.
pub fn aggregate_scales(
    maps: &[ArrayView3<f64>],
    tensors: &[ArrayView3<u8>],
    dims: (usize, usize),
    aggregation: Aggregation,
) -> Result<(Array3<f64>, Array3<u8>)> {
    if maps.is_empty() || maps.len() != tensors.len() {
        return Err(Error::InvalidArgument(format!(
            "{} score maps for {} tensors",
            maps.len(),
            tensors.len()
        )));
    }
    let l = maps[0].dim().0;
    ensure_dim(
        maps.iter().all(|m| m.dim().0 == l) && tensors.iter().all(|z| z.dim().0 == l),
        || "scales cover different chunk lengths".into(),
    )?;
    let mut score = Array3::<f64>::zeros((l, dims.0, dims.1));
    let mut z = Array3::<u8>::zeros((l, dims.0, dims.1));
    for (m, t) in maps.iter().zip(tensors) {
        let up = upsample_nearest(*m, dims);
        match aggregation {
            Aggregation::Max => Zip::from(&mut score).and(&up).for_each(|s, &u| *s = s.max(u)),
            Aggregation::Mean => score += &up,
        }
        Zip::from(&mut z).and(&upsample_nearest(*t, dims)).for_each(|a, &b| *a |= b);
    }
    if aggregation == Aggregation::Mean {
        score /= maps.len() as f64;
    }
    Ok((score, z))
}

/// A connected set of set voxels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Component {
    /// `(t, y, x)` in ascending order.
    pub voxels: Vec<(usize, usize, usize)>,
    pub first_frame: usize,
    pub last_frame: usize,
    /// `(top, left, bottom, right)`, inclusive.
    pub bbox: (usize, usize, usize, usize),
}

impl Component {
    /// Inclusive frame span.
    pub fn span(&self) -> usize {
        self.last_frame - self.first_frame + 1
    }
}

/// Components of the set voxels under 26-connectivity over `(t, y, x)`,
/// ordered by their first voxel in scan order.
pub fn connected_components(z: ArrayView3<u8>) -> Vec<Component> {
    let (l, h, w) = z.dim();
    let mut seen = Array3::<bool>::from_elem((l, h, w), false);
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for ((t0, y0, x0), &v) in z.indexed_iter() {
        if v == 0 || seen[[t0, y0, x0]] {
            continue;
        }
        seen[[t0, y0, x0]] = true;
        queue.push_back((t0, y0, x0));
        let mut voxels = Vec::new();
        while let Some((t, y, x)) = queue.pop_front() {
            voxels.push((t, y, x));
            for nt in t.saturating_sub(1)..=(t + 1).min(l - 1) {
                for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                    for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                        if z[[nt, ny, nx]] != 0 && !seen[[nt, ny, nx]] {
                            seen[[nt, ny, nx]] = true;
                            queue.push_back((nt, ny, nx));
                        }
                    }
                }
            }
        }
        voxels.sort_unstable();
        let first_frame = voxels[0].0;
        let last_frame = voxels[voxels.len() - 1].0;
        let bbox = voxels.iter().fold((usize::MAX, usize::MAX, 0, 0), |b, &(_, y, x)| {
            (b.0.min(y), b.1.min(x), b.2.max(y), b.3.max(x))
        });
        out.push(Component {
            voxels,
            first_frame,
            last_frame,
            bbox,
        });
    }
    out
}

/// Clear every component whose span is below `gamma`.
pub fn filter_small_components(z: ArrayView3<u8>, components: &[Component], gamma: usize) -> Array3<u8> {
    let mut out = z.to_owned();
    for c in components.iter().filter(|c| c.span() < gamma) {
        for &v in &c.voxels {
            out[v] = 0;
        }
    }
    out
}

/// Per-frame maximum of the final score map.
pub fn frame_scores(score: ArrayView3<f64>) -> Vec<f64> {
    score
        .outer_iter()
        .map(|f| f.iter().copied().fold(0.0, f64::max))
        .collect()
}

/// Fully processed chunk at full resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkResult {
    pub chunk_start: usize,
    /// Aggregated score, zero outside surviving voxels.
    pub score_map: Array3<f64>,
    /// Surviving anomaly voxels.
    pub mask: Array3<u8>,
    /// Components that survived filtering.
    pub components: Vec<Component>,
    pub frame_scores: Vec<f64>,
}

/// Aggregate scales, filter components and compute final scores.
pub fn finalize_chunk(
    per_scale: &[ScaleScores],
    dims: (usize, usize),
    cfg: &DetectorConfig,
) -> Result<ChunkResult> {
    let start = per_scale
        .first()
        .map(|s| s.tensor.chunk_start)
        .ok_or(Error::Empty("scales"))?;
    let maps: Vec<_> = per_scale.iter().map(|s| s.score_map.view()).collect();
    let zs: Vec<_> = per_scale.iter().map(|s| s.tensor.z.view()).collect();
    let (score, z) = aggregate_scales(&maps, &zs, dims, cfg.aggregation)?;
    let components = connected_components(z.view());
    let mask = filter_small_components(z.view(), &components, cfg.gamma);
    let score_map = Zip::from(&score).and(&mask).map_collect(|&s, &m| if m != 0 { s } else { 0.0 });
    let frame_scores = frame_scores(score_map.view());
    Ok(ChunkResult {
        chunk_start: start,
        score_map,
        mask,
        components: components.into_iter().filter(|c| c.span() >= cfg.gamma).collect(),
        frame_scores,
    })
}

/// Offline detection on one chunk.
pub fn detect_chunk(frames: &[Frame], models: &[ScaleModel], cfg: &DetectorConfig) -> Result<ChunkResult> {
    cfg.validate()?;
    let per_scale = score_chunk(frames, models, cfg.beta)?;
    finalize_chunk(&per_scale, frames[0].dims(), cfg)
}

/// Train each region model on its patches from `grid`; regions with no
/// patches are left alone. The RNG of region `c` is seeded from
/// `mix_seed(cfg.seed, keys ++ [c])`, so results do not depend on order.
pub fn stream_update(
    grid: &PatchGrid,
    models: &mut BTreeMap<u32, RbmParams>,
    map: &RegionMap,
    cfg: &TrainConfig,
    keys: &[u64],
) -> Result<()> {
    if cfg.epochs == 0 {
        return Ok(());
    }
    let parts = crate::regions::partition_by_region(grid, map)?;
    let jobs: Vec<(u32, Array2<f64>, RbmParams)> = parts
        .into_iter()
        .filter(|(_, d)| d.nrows() > 0)
        .map(|(l, d)| {
            let p = models
                .get(&l)
                .cloned()
                .ok_or_else(|| Error::Data(format!("no model for region {l}")))?;
            Ok((l, d, p))
        })
        .collect::<Result<_>>()?;
    let updated = par::map(&jobs, |(label, data, p)| {
        let mut path = keys.to_vec();
        path.push(*label as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, &path));
        let mut next = p.clone();
        rbm::train(data.view(), &mut next, cfg, &mut rng).map(|_| (*label, next))
    });
    for r in updated {
        let (label, p) = r?;
        models.insert(label, p);
    }
    Ok(())
}

/// Streaming detection on one chunk: each frame is scored with the current
/// models, then every region model is updated on that frame's patches.
pub fn stream_chunk(
    frames: &[Frame],
    models: &mut [ScaleModel],
    cfg: &DetectorConfig,
    update: &TrainConfig,
) -> Result<ChunkResult> {
    cfg.validate()?;
    let start = chunk_start(frames)?;
    let mut scored: Vec<Vec<FrameScale>> = vec![Vec::with_capacity(frames.len()); models.len()];
    for frame in frames {
        for (s, model) in models.iter_mut().enumerate() {
            let fs = score_frame(frame, model, cfg.beta)?;
            let ScaleModel { map, recon, .. } = model;
            let Reconstructor::Regions(rbms) = recon else {
                return Err(Error::InvalidArgument("streaming needs region RBMs".into()));
            };
            stream_update(&fs.grid, rbms, map, update, &[s as u64, frame.index as u64])?;
            scored[s].push(fs);
        }
    }
    let per_scale: Vec<ScaleScores> = scored.iter().map(|s| collect_scale(s, start)).collect();
    finalize_chunk(&per_scale, frames[0].dims(), cfg)
}

/// Split `frames` into consecutive chunks of at most `len` frames.
pub fn chunks(frames: &[Frame], len: usize) -> impl Iterator<Item = &[Frame]> {
    frames.chunks(len.max(1))
}
