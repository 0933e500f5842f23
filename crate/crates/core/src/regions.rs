//! Scene clustering: patch labels, voted region maps and cluster-map images.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};

use crate::dbm::{self, CrDbmParams, MeanFieldConfig};
use crate::error::{ensure_dim, Error, Result};
use crate::ingest::PatchGrid;
use crate::rbm::{self, RbmParams};

/// A model whose binarized hidden layer assigns cluster labels.
#[derive(Debug, Clone, Copy)]
pub enum Clusterer<'a> {
    Rbm(&'a RbmParams),
    Dbm(&'a CrDbmParams, MeanFieldConfig),
}

impl Clusterer<'_> {
    pub fn code_width(&self) -> usize {
        match self {
            Clusterer::Rbm(p) => p.n_hidden(),
            Clusterer::Dbm(p, _) => p.n_cluster(),
        }
    }
}

/// Decimal value of a binary code, first unit as the most significant bit.
pub fn code_to_label(bits: &[bool]) -> u32 {
    assert!(bits.len() <= 32, "cluster codes wider than 32 bits");
    bits.iter().fold(0u32, |acc, &b| (acc << 1) | b as u32)
}

pub fn patch_label(v: ArrayView1<f64>, model: Clusterer<'_>) -> Result<u32> {
    let bits: Vec<bool> = match model {
        Clusterer::Rbm(p) => rbm::hidden_cond(v, p)?.iter().map(|&q| q > 0.5).collect(),
        Clusterer::Dbm(p, mf) => dbm::cluster_code(v, p, mf)?,
    };
    Ok(code_to_label(&bits))
}

/// Labels for every row of a patch matrix.
pub fn patch_labels(patches: ArrayView2<f64>, model: Clusterer<'_>) -> Result<Vec<u32>> {
    match model {
        Clusterer::Rbm(p) => Ok(rbm::hidden_probs(patches, p)?
            .rows()
            .into_iter()
            .map(|r| code_to_label(&r.iter().map(|&q| q > 0.5).collect::<Vec<_>>()))
            .collect()),
        Clusterer::Dbm(p, mf) => Ok(dbm::cluster_codes(patches, p, mf)?
            .iter()
            .map(|c| code_to_label(c))
            .collect()),
    }
}

/// Region label `c^{i,j}` of every grid cell at one scale.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionMap {
    pub labels: Array2<u32>,
    pub scale: f64,
    pub label_values: Vec<u32>,
}

impl RegionMap {
    pub fn new(labels: Array2<u32>, scale: f64) -> Self {
        let mut label_values: Vec<u32> = labels.iter().copied().collect();
        label_values.sort_unstable();
        label_values.dedup();
        RegionMap {
            labels,
            scale,
            label_values,
        }
    }

    pub fn num_regions(&self) -> usize {
        self.label_values.len()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.labels.dim()
    }

    /// Region label of each grid row in `grid.coords` order.
    pub fn row_labels(&self, grid: &PatchGrid) -> Result<Vec<u32>> {
        ensure_dim((grid.rows, grid.cols) == self.dims(), || {
            format!(
                "patch grid {}x{} vs region map {:?}",
                grid.rows,
                grid.cols,
                self.dims()
            )
        })?;
        Ok(grid.coords.iter().map(|c| self.labels[[c.i, c.j]]).collect())
    }

    /// Integer CSV grid with a `# scale=...,C=...` header.
    pub fn to_csv(&self) -> String {
        let mut out = format!("# scale={},C={}\n", self.scale, self.num_regions());
        for row in self.labels.rows() {
            let cells: Vec<String> = row.iter().map(u32::to_string).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |msg: &str| Error::Data(format!("region map CSV: {msg}"));
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty"))?;
        let header = header.strip_prefix("# ").ok_or_else(|| bad("missing header"))?;
        let mut scale = None;
        let mut count = None;
        for field in header.split(',') {
            match field.split_once('=') {
                Some(("scale", v)) => scale = v.parse::<f64>().ok(),
                Some(("C", v)) => count = v.parse::<usize>().ok(),
                _ => return Err(bad("unknown header field")),
            }
        }
        let (scale, count) = scale.zip(count).ok_or_else(|| bad("incomplete header"))?;
        let rows: Vec<Vec<u32>> = lines
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.split(',')
                    .map(|c| c.trim().parse::<u32>().map_err(|_| bad("non-integer cell")))
                    .collect::<Result<Vec<u32>>>()
            })
            .collect::<Result<_>>()?;
        let width = rows.first().map(Vec::len).ok_or_else(|| bad("no rows"))?;
        if rows.iter().any(|r| r.len() != width) {
            return Err(bad("ragged rows"));
        }
        let labels = Array2::from_shape_vec((rows.len(), width), rows.concat())
            .map_err(|_| bad("shape"))?;
        let map = RegionMap::new(labels, scale);
        if map.num_regions() != count {
            return Err(bad("region count does not match header"));
        }
        Ok(map)
    }
}

/// Modal label per cell over frames; ties go to the smallest label.
pub fn vote_region_map(labels: &Array3<u32>, scale: f64) -> Result<RegionMap> {
    let (t, nh, nw) = labels.dim();
    if t == 0 || nh == 0 || nw == 0 {
        return Err(Error::Empty("label tensor"));
    }
    let voted = Array2::from_shape_fn((nh, nw), |(i, j)| {
        let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
        for &l in labels.slice(ndarray::s![.., i, j]) {
            *counts.entry(l).or_default() += 1;
        }
        // BTreeMap iterates in ascending label order, so max_by keeps the
        // first (smallest) label among equal counts when compared reversed.
        counts
            .into_iter()
            .max_by(|(la, ca), (lb, cb)| ca.cmp(cb).then(lb.cmp(la)))
            .map(|(l, _)| l)
            .expect("non-empty column")
    });
    Ok(RegionMap::new(voted, scale))
}

/// Route each patch row to its region's bucket.
pub fn partition_by_region(grid: &PatchGrid, map: &RegionMap) -> Result<BTreeMap<u32, Array2<f64>>> {
    let labels = map.row_labels(grid)?;
    Ok(dbm::group_rows(grid.patches.view(), &labels))
}

/// Fold regions with fewer than `min_count` training rows into the region
/// whose mean patch is closest, smallest region first, until every region is
/// large enough or only one is left.
pub fn merge_small_regions(
    map: &RegionMap,
    data: &BTreeMap<u32, Array2<f64>>,
    min_count: usize,
) -> RegionMap {
    let mut stats: BTreeMap<u32, (usize, Array1<f64>)> = data
        .iter()
        .filter(|(_, d)| d.nrows() > 0)
        .map(|(&l, d)| (l, (d.nrows(), d.sum_axis(Axis(0)))))
        .collect();
    let mut labels = map.labels.clone();
    // Map cells whose label never appeared in the data to the nearest present
    // label only if such labels exist; normally every map label has data.
    loop {
        if stats.len() <= 1 {
            break;
        }
        let smallest = stats
            .iter()
            .filter(|(_, (n, _))| *n < min_count)
            .min_by(|(la, (na, _)), (lb, (nb, _))| na.cmp(nb).then(la.cmp(lb)))
            .map(|(&l, _)| l);
        let Some(src) = smallest else { break };
        let (n_src, sum_src) = stats.remove(&src).expect("present");
        let centroid = &sum_src / n_src as f64;
        let dst = stats
            .iter()
            .map(|(&l, (n, s))| {
                let d = (&(s / *n as f64) - &centroid).mapv(|x| x * x).sum();
                (l, d)
            })
            .min_by(|(la, da), (lb, db)| da.total_cmp(db).then(la.cmp(lb)))
            .map(|(l, _)| l)
            .expect("at least one other region");
        let entry = stats.get_mut(&dst).expect("present");
        entry.0 += n_src;
        entry.1 += &sum_src;
        labels.mapv_inplace(|l| if l == src { dst } else { l });
    }
    RegionMap::new(labels, map.scale)
}

/// Palette-indexed image.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexedImage {
    pub width: usize,
    pub height: usize,
    pub indices: Vec<u8>,
    pub palette: Vec<[u8; 3]>,
}

impl IndexedImage {
    pub fn distinct_indices(&self) -> usize {
        let mut seen = [false; 256];
        self.indices.iter().for_each(|&i| seen[i as usize] = true);
        seen.iter().filter(|&&s| s).count()
    }
}

/// Evenly spaced hues, fully saturated.
pub fn default_palette(n: usize) -> Vec<[u8; 3]> {
    (0..n.max(1))
        .map(|i| {
            let h = i as f64 * 6.0 / n.max(1) as f64;
            let x = 1.0 - ((h % 2.0) - 1.0).abs();
            let (r, g, b) = match h as usize {
                0 => (1.0, x, 0.0),
                1 => (x, 1.0, 0.0),
                2 => (0.0, 1.0, x),
                3 => (0.0, x, 1.0),
                4 => (x, 0.0, 1.0),
                _ => (1.0, 0.0, x),
            };
            [(r * 255.0) as u8, (g * 255.0) as u8, (b * 255.0) as u8]
        })
        .collect()
}

/// Render `map` with one `block.0 × block.1` pixel block per grid cell; the
/// color index of a cell is the rank of its label among `label_values`.
pub fn emit_cluster_map(map: &RegionMap, palette: Option<&[[u8; 3]]>, block: (usize, usize)) -> Result<IndexedImage> {
    let c = map.num_regions();
    if c > 256 {
        return Err(Error::InvalidArgument(format!("{c} regions exceed a 256-entry palette")));
    }
    let palette = match palette {
        Some(p) if p.len() >= c => p[..c].to_vec(),
        Some(p) => {
            return Err(Error::InvalidArgument(format!(
                "palette has {} colors for {c} regions",
                p.len()
            )))
        }
        None => default_palette(c),
    };
    let (bh, bw) = (block.0.max(1), block.1.max(1));
    let (nh, nw) = map.dims();
    let (height, width) = (nh * bh, nw * bw);
    let rank: BTreeMap<u32, u8> = map
        .label_values
        .iter()
        .enumerate()
        .map(|(i, &l)| (l, i as u8))
        .collect();
    let mut indices = vec![0u8; width * height];
    for y in 0..height {
        for x in 0..width {
            indices[y * width + x] = rank[&map.labels[[y / bh, x / bw]]];
        }
    }
    Ok(IndexedImage {
        width,
        height,
        indices,
        palette,
    })
}

/// Write an indexed PNG, or a grayscale PGM of spread-out indices when the
/// extension is `.pgm`.
pub fn write_indexed(path: &Path, img: &IndexedImage) -> Result<()> {
    let is_pgm = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("pgm"));
    if is_pgm {
        let step = if img.palette.len() > 1 { 255 / (img.palette.len() - 1) } else { 0 };
        let gray: Vec<u8> = img.indices.iter().map(|&i| (i as usize * step) as u8).collect();
        return crate::ingest::write_pgm8(path, img.width, img.height, &gray);
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), img.width as u32, img.height as u32);
    enc.set_color(png::ColorType::Indexed);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_palette(img.palette.concat());
    let png_err = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
    let mut writer = enc.write_header().map_err(png_err)?;
    writer.write_image_data(&img.indices).map_err(png_err)?;
    writer.finish().map_err(png_err)?;
    Ok(())
}

/// Write `map` as CSV.
pub fn save_region_map(path: &Path, map: &RegionMap) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(map.to_csv().as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_region_map(path: &Path) -> Result<RegionMap> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    RegionMap::from_csv(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{extract_patches, Frame, PatchSpec};
    use proptest::prelude::*;

    #[test]
    fn label_conversion() {
        assert_eq!(code_to_label(&[false, true, false, true]), 5);
        assert_eq!(code_to_label(&[false; 4]), 0);
        // Oracle: Σ bit_k 2^(K-1-k).
        let all = [true; 4];
        let oracle: u32 = (0..4).map(|k| 1u32 << (3 - k)).sum();
        assert_eq!(code_to_label(&all), oracle);
        assert_eq!(oracle, 15);
    }

    #[test]
    fn rbm_patch_label_uses_threshold() {
        let mut p = RbmParams::zeros(2, 4);
        p.b = ndarray::array![-5.0, 5.0, -5.0, 5.0];
        assert_eq!(patch_label(ndarray::array![0.3, 0.9].view(), Clusterer::Rbm(&p)).unwrap(), 5);
    }

    #[test]
    fn voting() {
        let single = Array3::from_shape_fn((1, 2, 3), |(_, i, j)| (i * 3 + j) as u32);
        let m = vote_region_map(&single, 1.0).unwrap();
        assert_eq!(m.labels, single.index_axis(Axis(0), 0));

        let cell = |vals: &[u32]| {
            let t = Array3::from_shape_vec((vals.len(), 1, 1), vals.to_vec()).unwrap();
            vote_region_map(&t, 1.0).unwrap().labels[[0, 0]]
        };
        assert_eq!(cell(&[2, 2, 3]), 2);
        assert_eq!(cell(&[1, 1, 3, 3]), 1);
        assert_eq!(cell(&[3, 3, 1, 1]), 1);
        assert!(vote_region_map(&Array3::zeros((0, 2, 2)), 1.0).is_err());
    }

    proptest! {
        #[test]
        fn vote_matches_counting_oracle(vals in proptest::collection::vec(0u32..5, 1..12)) {
            let mut counts = [0usize; 5];
            vals.iter().for_each(|&v| counts[v as usize] += 1);
            let best = *counts.iter().max().unwrap();
            let oracle = counts.iter().position(|&c| c == best).unwrap() as u32;
            let t = Array3::from_shape_vec((vals.len(), 1, 1), vals.clone()).unwrap();
            prop_assert_eq!(vote_region_map(&t, 1.0).unwrap().labels[[0, 0]], oracle);
        }
    }

    fn grid() -> PatchGrid {
        let px = Array2::from_shape_fn((8, 12), |(y, x)| (y * 12 + x) as f64 / 96.0);
        extract_patches(&Frame::new(px, 0), &PatchSpec::new(4, 4, 2, 4, 1.0).unwrap()).unwrap()
    }

    #[test]
    fn partition_is_exhaustive_and_correct() {
        let g = grid();
        assert_eq!((g.rows, g.cols), (3, 3));
        let one = RegionMap::new(Array2::from_elem((3, 3), 7), 1.0);
        let parts = partition_by_region(&g, &one).unwrap();
        assert_eq!(parts.len(), 1);
        assert_eq!(parts[&7], g.patches);

        let labels = Array2::from_shape_fn((3, 3), |(i, j)| ((i + 2 * j) % 3) as u32);
        let map = RegionMap::new(labels.clone(), 1.0);
        let parts = partition_by_region(&g, &map).unwrap();
        assert_eq!(parts.values().map(|p| p.nrows()).sum::<usize>(), 9);
        let mut cursor: BTreeMap<u32, usize> = BTreeMap::new();
        for (row, c) in g.coords.iter().enumerate() {
            let l = labels[[c.i, c.j]];
            let k = cursor.entry(l).or_default();
            assert_eq!(parts[&l].row(*k), g.patches.row(row));
            *k += 1;
        }
        let wrong = RegionMap::new(Array2::zeros((2, 3)), 1.0);
        assert!(partition_by_region(&g, &wrong).is_err());
    }

    #[test]
    fn small_regions_merge_into_nearest() {
        let labels = ndarray::array![[0u32, 0, 1], [2, 2, 2]];
        let map = RegionMap::new(labels, 0.5);
        let mut data = BTreeMap::new();
        data.insert(0, Array2::from_elem((10, 2), 0.1));
        data.insert(1, Array2::from_elem((1, 2), 0.85));
        data.insert(2, Array2::from_elem((10, 2), 0.9));
        let merged = merge_small_regions(&map, &data, 5);
        assert_eq!(merged.labels, ndarray::array![[0u32, 0, 2], [2, 2, 2]]);
        assert_eq!(merged.num_regions(), 2);
        assert_eq!(merge_small_regions(&map, &data, 1), map);
    }

    #[test]
    fn cluster_map_image() {
        let constant = RegionMap::new(Array2::from_elem((3, 4), 9), 1.0);
        let img = emit_cluster_map(&constant, None, (2, 3)).unwrap();
        assert_eq!((img.width, img.height), (12, 6));
        assert!(img.indices.iter().all(|&i| i == 0));

        let map = RegionMap::new(ndarray::array![[3u32, 8], [12, 3]], 1.0);
        let img = emit_cluster_map(&map, None, (1, 1)).unwrap();
        assert_eq!(img.distinct_indices(), map.num_regions());
        assert_eq!(img.indices, vec![0, 1, 2, 0]);
    }

    #[test]
    fn csv_and_png_round_trip() {
        let map = RegionMap::new(ndarray::array![[1u32, 4, 4], [0, 1, 4]], 0.25);
        assert_eq!(RegionMap::from_csv(&map.to_csv()).unwrap(), map);
        assert!(RegionMap::from_csv("# scale=1,C=3\n1,2\n").is_err());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.png");
        write_indexed(&path, &emit_cluster_map(&map, None, (4, 4)).unwrap()).unwrap();
        let decoder = png::Decoder::new(std::io::BufReader::new(std::fs::File::open(&path).unwrap()));
        let reader = decoder.read_info().unwrap();
        assert_eq!(reader.info().color_type, png::ColorType::Indexed);
        assert_eq!(reader.info().palette.as_ref().unwrap().len(), 9);
        write_indexed(&dir.path().join("map.pgm"), &emit_cluster_map(&map, None, (1, 1)).unwrap()).unwrap();
    }
}
