//! Training, detection, streaming, evaluation and cluster-map commands.
//!
//! Each `cmd_*` function is what the CLI runs; the lower-level functions
//! work on in-memory frames so tests can drive the pipeline without disk.

pub mod bundle;
pub mod config;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{concatenate, Array2, Array3, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use bundle::{Bundle, ClusterModel, ScaleBundle, StoreLock};
pub use config::{Mode, Overrides, PipelineConfig};

use crate::dbm;
use crate::detector::{self, ChunkResult, ScaleModel};
use crate::error::{Error, Result};
use crate::eval::{self, EvalReport, GroundTruth};
use crate::ingest::{self, extract_patches, Frame, PatchGrid, PatchSpec};
use crate::math::mix_seed;
use crate::par;
use crate::rbm::{self, RbmParams};
use crate::regions::{self, Clusterer, RegionMap};

// Seed stream tags; every stochastic stage draws from its own stream.
const TAG_CLUSTER: u64 = 1;
const TAG_REGION: u64 = 2;
const TAG_DBM: u64 = 3;
const TAG_FINETUNE: u64 = 4;
const TAG_STREAM: u64 = 5;

/// Factor mapping final scores to 16-bit PGM values.
pub const SCORE_SCALE: f64 = 65535.0;

/// Patch grids of every frame at one scale.
pub fn frame_grids(frames: &[Frame], spec: &PatchSpec) -> Result<Vec<PatchGrid>> {
    par::map(frames, |f| extract_patches(&spec.prepare(f)?, spec))
        .into_iter()
        .collect()
}

fn stack_rows(grids: &[PatchGrid]) -> Array2<f64> {
    let views: Vec<ArrayView2<f64>> = grids.iter().map(|g| g.patches.view()).collect();
    concatenate(Axis(0), &views).expect("grids share a patch length")
}

/// Cluster every patch of every frame, then vote a region map.
pub fn vote_map(grids: &[PatchGrid], clusterer: Clusterer<'_>, scale: f64) -> Result<RegionMap> {
    let first = grids.first().ok_or(Error::Empty("training frames"))?;
    let (rows, cols) = (first.rows, first.cols);
    let per_frame = par::map(grids, |g| regions::patch_labels(g.patches.view(), clusterer))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let mut labels = Array3::<u32>::zeros((grids.len(), rows, cols));
    for (t, (g, l)) in grids.iter().zip(&per_frame).enumerate() {
        for (c, &v) in g.coords.iter().zip(l) {
            labels[[t, c.i, c.j]] = v;
        }
    }
    regions::vote_region_map(&labels, scale)
}

/// Patches of all frames grouped by region.
pub fn region_data(grids: &[PatchGrid], map: &RegionMap) -> Result<BTreeMap<u32, Array2<f64>>> {
    let mut parts: BTreeMap<u32, Vec<Array2<f64>>> = BTreeMap::new();
    for g in grids {
        for (l, d) in regions::partition_by_region(g, map)? {
            parts.entry(l).or_default().push(d);
        }
    }
    Ok(parts
        .into_iter()
        .map(|(l, ds)| {
            let views: Vec<_> = ds.iter().map(|d| d.view()).collect();
            (l, concatenate(Axis(0), &views).expect("same patch length"))
        })
        .collect())
}

/// Merge regions with fewer than two batches of patches into their nearest
/// neighbour and regroup the data.
fn merged_regions(
    grids: &[PatchGrid],
    map: RegionMap,
    batch: usize,
) -> Result<(RegionMap, BTreeMap<u32, Array2<f64>>)> {
    let data = region_data(grids, &map)?;
    let merged = regions::merge_small_regions(&map, &data, 2 * batch);
    if merged == map {
        return Ok((map, data));
    }
    let data = region_data(grids, &merged)?;
    Ok((merged, data))
}

/// Train every model for scale index `s`.
pub fn train_scale(frames: &[Frame], s: usize, cfg: &PipelineConfig) -> Result<ScaleBundle> {
    let ratio = cfg.scales[s];
    let spec = cfg.patch_spec(ratio)?;
    let grids = frame_grids(frames, &spec)?;
    let data = stack_rows(&grids);
    let m = data.ncols();
    let key = s as u64;
    let mf = cfg.mean_field();
    match cfg.mode {
        Mode::EadRbm | Mode::SRbm => {
            let seed = mix_seed(cfg.seed, &[key, TAG_CLUSTER]);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut clus = RbmParams::random(m, cfg.cluster_hidden, &mut rng);
            rbm::train(data.view(), &mut clus, &cfg.rbm_training(seed), &mut rng)?;
            let map = vote_map(&grids, Clusterer::Rbm(&clus), ratio)?;
            let (map, parts) = merged_regions(&grids, map, cfg.batch_size)?;
            let jobs: Vec<(u32, Array2<f64>)> = parts.into_iter().collect();
            let trained = par::map(&jobs, |(label, d)| {
                let seed = mix_seed(cfg.seed, &[key, TAG_REGION, *label as u64]);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut p = RbmParams::random(m, cfg.region_hidden, &mut rng);
                rbm::train(d.view(), &mut p, &cfg.rbm_training(seed), &mut rng).map(|_| (*label, p))
            });
            Ok(ScaleBundle {
                spec,
                map,
                clusterer: ClusterModel::Rbm(clus),
                regions: trained.into_iter().collect::<Result<_>>()?,
            })
        }
        Mode::EadDbm | Mode::SDbm => {
            let dcfg = cfg.dbm_training(mix_seed(cfg.seed, &[key, TAG_DBM]));
            let p = dbm::fit(data.view(), cfg.dbm_cluster_hidden, cfg.dbm_recon_hidden, &dcfg)?;
            let map = vote_map(&grids, Clusterer::Dbm(&p, mf), ratio)?;
            let (map, regions) = if cfg.mode == Mode::SDbm {
                let (map, parts) = merged_regions(&grids, map, cfg.batch_size)?;
                let reduced = parts
                    .iter()
                    .map(|(&l, d)| Ok((l, dbm::reduce_to_rbm(&p, d.view(), cfg.reduced_hidden)?, d.view())))
                    .collect::<Result<Vec<_>>>()?;
                let tuned = dbm::finetune_region_rbms(
                    &reduced,
                    &cfg.finetune_training(mix_seed(cfg.seed, &[key, TAG_FINETUNE])),
                )?;
                (map, tuned.into_iter().map(|f| (f.label, f.params)).collect())
            } else {
                (map, BTreeMap::new())
            };
            Ok(ScaleBundle {
                spec,
                map,
                clusterer: ClusterModel::Dbm(p),
                regions,
            })
        }
    }
}

/// Train a complete bundle on `frames`.
pub fn train_bundle(frames: &[Frame], cfg: &PipelineConfig) -> Result<Bundle> {
    cfg.validate()?;
    let first = frames.first().ok_or_else(|| Error::Data("no training frames".into()))?;
    let frame_dims = first.dims();
    if frames.iter().any(|f| f.dims() != frame_dims) {
        return Err(Error::Data("training frames differ in size".into()));
    }
    let scales = (0..cfg.scales.len())
        .map(|s| train_scale(frames, s, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(Bundle {
        mode: cfg.mode,
        config_hash: cfg.model_hash(),
        seed: cfg.seed,
        frame_dims,
        scales,
    })
}

/// Detection results over consecutive chunks.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionRun {
    pub chunks: Vec<ChunkResult>,
}

impl DetectionRun {
    pub fn frame_scores(&self) -> Vec<f64> {
        self.chunks.iter().flat_map(|c| c.frame_scores.iter().copied()).collect()
    }

    pub fn score_map(&self) -> Array3<f64> {
        let views: Vec<_> = self.chunks.iter().map(|c| c.score_map.view()).collect();
        concatenate(Axis(0), &views).expect("chunks share frame size")
    }

    pub fn mask(&self) -> Array3<u8> {
        let views: Vec<_> = self.chunks.iter().map(|c| c.mask.view()).collect();
        concatenate(Axis(0), &views).expect("chunks share frame size")
    }
}

fn check_frames(frames: &[Frame], bundle: &Bundle) -> Result<()> {
    if frames.is_empty() {
        return Err(Error::Data("no frames to score".into()));
    }
    if let Some(f) = frames.iter().find(|f| f.dims() != bundle.frame_dims) {
        return Err(Error::Data(format!(
            "frame {} is {:?}, the bundle expects {:?}",
            f.index,
            f.dims(),
            bundle.frame_dims
        )));
    }
    Ok(())
}

/// Offline detection with frozen models.
pub fn detect_frames(frames: &[Frame], bundle: &Bundle, cfg: &PipelineConfig) -> Result<DetectionRun> {
    bundle.check_hash(&cfg.model_hash())?;
    check_frames(frames, bundle)?;
    let models = bundle.scale_models(cfg.mean_field())?;
    let dcfg = cfg.detector();
    let chunks = detector::chunks(frames, cfg.chunk_len)
        .map(|c| detector::detect_chunk(c, &models, &dcfg))
        .collect::<Result<_>>()?;
    Ok(DetectionRun { chunks })
}

/// Streaming detection; returns the results and the updated bundle.
pub fn stream_frames(frames: &[Frame], bundle: &Bundle, cfg: &PipelineConfig) -> Result<(DetectionRun, Bundle)> {
    bundle.check_hash(&cfg.model_hash())?;
    check_frames(frames, bundle)?;
    if bundle.scales.iter().any(|s| s.regions.is_empty()) {
        return Err(Error::BundleMismatch("streaming needs a bundle with region RBMs".into()));
    }
    let mut models: Vec<ScaleModel> = bundle.scale_models(cfg.mean_field())?;
    let dcfg = cfg.detector();
    let update = cfg.stream_training(mix_seed(cfg.seed, &[TAG_STREAM]));
    let chunks = detector::chunks(frames, cfg.chunk_len)
        .map(|c| detector::stream_chunk(c, &mut models, &dcfg, &update))
        .collect::<Result<_>>()?;
    let mut updated = bundle.clone();
    updated.set_region_models(&models);
    Ok((DetectionRun { chunks }, updated))
}

fn io_write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Write masks, 16-bit score maps and CSV summaries under `out`.
pub fn write_detection(out: &Path, run: &DetectionRun, cfg: &PipelineConfig) -> Result<()> {
    let (mdir, sdir) = (out.join("masks"), out.join("scores"));
    create_dir(&mdir)?;
    create_dir(&sdir)?;
    let mut frame_csv = String::from("frame_index,score\n");
    let mut comp_csv = String::from("id,voxels,first_frame,last_frame,span,top,left,bottom,right\n");
    let mut id = 0usize;
    for chunk in &run.chunks {
        for (t, (mask, score)) in chunk.mask.outer_iter().zip(chunk.score_map.outer_iter()).enumerate() {
            let frame = chunk.chunk_start + t;
            let (h, w) = mask.dim();
            let bytes: Vec<u8> = mask.iter().map(|&m| if m != 0 { 255 } else { 0 }).collect();
            ingest::write_pgm8(&mdir.join(format!("mask_{frame:06}.pgm")), w, h, &bytes)?;
            let levels: Vec<u16> = score
                .iter()
                .map(|&s| (s * SCORE_SCALE).round().clamp(0.0, SCORE_SCALE) as u16)
                .collect();
            ingest::write_pgm16(&sdir.join(format!("score_{frame:06}.pgm")), w, h, &levels)?;
            writeln!(frame_csv, "{frame},{}", chunk.frame_scores[t]).expect("string write");
        }
        for c in &chunk.components {
            let (top, left, bottom, right) = c.bbox;
            writeln!(
                comp_csv,
                "{id},{},{},{},{},{top},{left},{bottom},{right}",
                c.voxels.len(),
                chunk.chunk_start + c.first_frame,
                chunk.chunk_start + c.last_frame,
                c.span()
            )
            .expect("string write");
            id += 1;
        }
    }
    io_write(&out.join("frame_scores.csv"), &frame_csv)?;
    io_write(&out.join("components.csv"), &comp_csv)?;
    let info = format!(
        "mode = \"{}\"\nbeta = {}\ngamma = {}\nchunk_len = {}\nframes = {}\nscore_scale = {}\n",
        cfg.mode.name(),
        cfg.beta(),
        cfg.gamma,
        cfg.chunk_len,
        run.chunks.iter().map(|c| c.frame_scores.len()).sum::<usize>(),
        SCORE_SCALE
    );
    io_write(&out.join("detection.toml"), &info)
}

/// Read back what [`write_detection`] wrote.
pub fn read_detection(out: &Path) -> Result<(Vec<f64>, Array3<f64>)> {
    let path = out.join("frame_scores.csv");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let scores = text
        .lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.split_once(',')
                .and_then(|(_, s)| s.parse::<f64>().ok())
                .ok_or_else(|| Error::Data(format!("bad frame score row {l:?}")))
        })
        .collect::<Result<Vec<f64>>>()?;
    let maps = ingest::list_frame_files(&out.join("scores"))?
        .iter()
        .map(|f| ingest::read_gray(f))
        .collect::<Result<Vec<_>>>()?;
    if maps.len() != scores.len() {
        return Err(Error::Data(format!(
            "{} score maps for {} frame scores",
            maps.len(),
            scores.len()
        )));
    }
    let views: Vec<_> = maps.iter().map(|m| m.view().insert_axis(Axis(0))).collect();
    let map = concatenate(Axis(0), &views).map_err(|_| Error::Data("score maps differ in size".into()))?;
    Ok((scores, map))
}

/// Load binary masks (pixel > 0.5) from a directory.
pub fn load_ground_truth(dir: &Path, dims: Option<(usize, usize)>) -> Result<GroundTruth> {
    let frames = ingest::load_frames(dir, dims, false)?;
    let (h, w) = frames.first().map(Frame::dims).ok_or_else(|| Error::Data("no ground-truth masks".into()))?;
    let mut masks = Array3::<u8>::zeros((frames.len(), h, w));
    for (t, f) in frames.iter().enumerate() {
        masks
            .index_axis_mut(Axis(0), t)
            .assign(&f.pixels.mapv(|p| (p > 0.5) as u8));
    }
    Ok(GroundTruth::new(masks))
}

/// Frame, pixel and dual-pixel reports.
pub fn evaluate(scores: &[f64], map: &Array3<f64>, gt: &GroundTruth, alpha: f64) -> Result<[EvalReport; 3]> {
    if scores.len() != gt.len() {
        return Err(Error::Data(format!(
            "{} scored frames but {} ground-truth masks",
            scores.len(),
            gt.len()
        )));
    }
    Ok([
        eval::frame_level(scores, gt)?,
        eval::pixel_level(map.view(), gt)?,
        eval::dual_pixel_level(map.view(), gt, alpha)?,
    ])
}

pub fn write_reports(out: &Path, reports: &[EvalReport]) -> Result<()> {
    create_dir(out)?;
    let mut summary = String::from("level,auc,eer,alpha\n");
    for r in reports {
        let file = format!("eval_{}.csv", r.level.name().replace('-', "_"));
        io_write(&out.join(file), &r.roc_csv())?;
        summary.push_str(&r.summary_line());
        summary.push('\n');
    }
    io_write(&out.join("eval_summary.csv"), &summary)
}

fn load_input_frames(cfg: &PipelineConfig, dims: Option<(usize, usize)>) -> Result<Vec<Frame>> {
    let dir = cfg.require_path(&cfg.frames, "frames")?;
    ingest::load_frames(dir, dims, false)
}

fn load_bundle(cfg: &PipelineConfig) -> Result<(StoreLock, Bundle)> {
    let dir = cfg.require_path(&cfg.model_dir, "model_dir")?;
    let lock = StoreLock::shared(dir)?;
    let bundle = bundle::load(dir)?;
    bundle.check_hash(&cfg.model_hash())?;
    Ok((lock, bundle))
}

fn region_counts(b: &Bundle) -> String {
    b.scales
        .iter()
        .map(|s| s.map.num_regions().to_string())
        .collect::<Vec<_>>()
        .join(",")
}

/// Train and persist a bundle; returns a one-line summary.
pub fn cmd_train(cfg: &PipelineConfig) -> Result<String> {
    let dir = cfg.require_path(&cfg.model_dir, "model_dir")?;
    let frames = load_input_frames(cfg, None)?;
    let bundle = train_bundle(&frames, cfg)?;
    let _lock = StoreLock::exclusive(dir)?;
    bundle::save(dir, &bundle)?;
    Ok(format!(
        "trained {} on {} frames; regions per scale: {}",
        cfg.mode.name(),
        frames.len(),
        region_counts(&bundle)
    ))
}

fn detection_summary(run: &DetectionRun) -> String {
    let scores = run.frame_scores();
    let flagged = scores.iter().filter(|&&s| s > 0.0).count();
    let comps: usize = run.chunks.iter().map(|c| c.components.len()).sum();
    format!("{} frames scored, {flagged} flagged, {comps} components", scores.len())
}

pub fn cmd_detect(cfg: &PipelineConfig) -> Result<String> {
    let out = cfg.require_path(&cfg.output_dir, "output_dir")?;
    let (_lock, bundle) = load_bundle(cfg)?;
    let frames = load_input_frames(cfg, Some(bundle.frame_dims))?;
    let run = detect_frames(&frames, &bundle, cfg)?;
    create_dir(out)?;
    write_detection(out, &run, cfg)?;
    Ok(detection_summary(&run))
}

/// Streaming detection; the updated bundle goes to `<output_dir>/bundle`.
pub fn cmd_stream(cfg: &PipelineConfig) -> Result<String> {
    let out = cfg.require_path(&cfg.output_dir, "output_dir")?;
    let (_lock, bundle) = load_bundle(cfg)?;
    let frames = load_input_frames(cfg, Some(bundle.frame_dims))?;
    let (run, updated) = stream_frames(&frames, &bundle, cfg)?;
    create_dir(out)?;
    write_detection(out, &run, cfg)?;
    let target = out.join("bundle");
    let _out_lock = StoreLock::exclusive(&target)?;
    bundle::save(&target, &updated)?;
    Ok(format!("{}; updated bundle in {}", detection_summary(&run), target.display()))
}

pub fn cmd_eval(cfg: &PipelineConfig) -> Result<String> {
    let out = cfg.require_path(&cfg.output_dir, "output_dir")?;
    let gt_dir = cfg.require_path(&cfg.ground_truth, "ground_truth")?;
    let (scores, map) = read_detection(out)?;
    let (_, h, w) = map.dim();
    let gt = load_ground_truth(gt_dir, Some((h, w)))?;
    let reports = evaluate(&scores, &map, &gt, cfg.alpha)?;
    write_reports(out, &reports)?;
    Ok(reports.iter().map(EvalReport::summary_line).collect::<Vec<_>>().join("\n"))
}

pub fn cmd_cluster_map(cfg: &PipelineConfig) -> Result<String> {
    let out = cfg.require_path(&cfg.output_dir, "output_dir")?;
    let (_lock, bundle) = load_bundle(cfg)?;
    create_dir(out)?;
    let mut lines = Vec::new();
    for (s, sb) in bundle.scales.iter().enumerate() {
        let img = bundle::cluster_map_image(sb)?;
        regions::write_indexed(&out.join(format!("cluster_map_scale_{s}.png")), &img)?;
        lines.push(format!("scale {}: {} clusters", sb.spec.scale, sb.map.num_regions()));
    }
    Ok(lines.join("\n"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{self, SceneConfig};

    fn tiny_config(mode: Mode) -> PipelineConfig {
        PipelineConfig {
            mode,
            scales: vec![1.0, 0.5],
            patch_height: 8,
            patch_width: 8,
            stride_v: 8,
            stride_h: 8,
            region_hidden: 8,
            dbm_recon_hidden: 8,
            reduced_hidden: 4,
            epochs: 2,
            dbm_epochs: 1,
            pretrain_epochs: 1,
            finetune_epochs: 1,
            batch_size: 10,
            dbm_chains: 10,
            stream_epochs: 1,
            chunk_len: 3,
            gamma: 2,
            ..PipelineConfig::default()
        }
    }

    fn frames() -> Vec<Frame> {
        synth::render(&SceneConfig { height: 32, width: 32, ..SceneConfig::default() }, 4, &[], None).frames
    }

    #[test]
    fn every_mode_trains_and_detects() {
        let frames = frames();
        for mode in [Mode::EadRbm, Mode::EadDbm, Mode::SRbm, Mode::SDbm] {
            let cfg = tiny_config(mode);
            let b = train_bundle(&frames, &cfg).unwrap();
            assert_eq!(b.scales.len(), 2);
            for s in &b.scales {
                assert!((1..=16).contains(&s.map.num_regions()));
                assert_eq!(s.regions.is_empty(), mode == Mode::EadDbm);
            }
            let run = detect_frames(&frames, &b, &cfg).unwrap();
            assert_eq!(run.chunks.len(), 2);
            assert_eq!(run.frame_scores().len(), 4);
            if mode.has_region_rbms() {
                let (streamed, updated) = stream_frames(&frames, &b, &cfg).unwrap();
                assert_eq!(streamed.frame_scores().len(), 4);
                assert_ne!(updated, b);
            } else {
                assert_eq!(stream_frames(&frames, &b, &cfg).unwrap_err().exit_code(), 4);
            }
        }
    }

    #[test]
    fn mismatched_config_is_rejected() {
        let frames = frames();
        let cfg = tiny_config(Mode::EadRbm);
        let b = train_bundle(&frames, &cfg).unwrap();
        let other = PipelineConfig { patch_width: 4, ..cfg.clone() };
        assert_eq!(detect_frames(&frames, &b, &other).unwrap_err().exit_code(), 4);
        let small: Vec<Frame> = frames.iter().map(|f| Frame::new(f.pixels.slice(ndarray::s![..16, ..]).to_owned(), f.index)).collect();
        assert_eq!(detect_frames(&small, &b, &cfg).unwrap_err().exit_code(), 3);
    }

    #[test]
    fn detection_files_round_trip() {
        let frames = frames();
        let cfg = tiny_config(Mode::EadRbm);
        let b = train_bundle(&frames, &cfg).unwrap();
        let run = detect_frames(&frames, &b, &PipelineConfig { beta: Some(1e-6), gamma: 1, ..cfg.clone() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_detection(dir.path(), &run, &cfg).unwrap();
        let (scores, map) = read_detection(dir.path()).unwrap();
        assert_eq!(scores, run.frame_scores());
        let expect = run.score_map();
        assert_eq!(map.dim(), expect.dim());
        assert!(map.iter().zip(expect.iter()).all(|(a, b)| (a - b).abs() <= 0.5 / SCORE_SCALE + 1e-12));
    }
}
