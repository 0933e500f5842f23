//! Frames, rescaling and patch grids.

use std::path::{Path, PathBuf};

use image::{ColorType, DynamicImage};
use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

/// One grayscale frame with pixels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub pixels: Array2<f64>,
    pub index: usize,
}

impl Frame {
    pub fn new(pixels: Array2<f64>, index: usize) -> Self {
        Frame { pixels, index }
    }

    pub fn height(&self) -> usize {
        self.pixels.nrows()
    }

    pub fn width(&self) -> usize {
        self.pixels.ncols()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.pixels.dim()
    }
}

/// Patch geometry at one scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchSpec {
    pub h: usize,
    pub w: usize,
    pub stride_v: usize,
    pub stride_h: usize,
    pub scale: f64,
}

impl PatchSpec {
    pub fn new(h: usize, w: usize, stride_v: usize, stride_h: usize, scale: f64) -> Result<Self> {
        let spec = PatchSpec {
            h,
            w,
            stride_v,
            stride_h,
            scale,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.h == 0 || self.w == 0 {
            return Err(Error::InvalidArgument("patch size must be positive".into()));
        }
        if !(1..=self.h).contains(&self.stride_v) || !(1..=self.w).contains(&self.stride_h) {
            return Err(Error::InvalidArgument(format!(
                "strides ({}, {}) must lie in [1, patch size ({}, {})]",
                self.stride_v, self.stride_h, self.h, self.w
            )));
        }
        if !(self.scale > 0.0 && self.scale <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "scale ratio {} outside (0, 1]",
                self.scale
            )));
        }
        Ok(())
    }

    /// Number of visible units of a model trained on these patches.
    pub fn len(&self) -> usize {
        self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rescale `frame` to this spec's ratio, failing if a patch no longer fits.
    pub fn prepare(&self, frame: &Frame) -> Result<Frame> {
        let out = rescale(frame, self.scale)?;
        if out.height() < self.h || out.width() < self.w {
            return Err(Error::InvalidArgument(format!(
                "ratio {} maps {}x{} to {}x{}, smaller than the {}x{} patch",
                self.scale,
                frame.height(),
                frame.width(),
                out.height(),
                out.width(),
                self.h,
                self.w
            )));
        }
        Ok(out)
    }

    /// Size of the frame after rescaling by this spec's ratio.
    pub fn scaled_dims(&self, dims: (usize, usize)) -> (usize, usize) {
        scaled_dims(dims, self.scale)
    }
}

pub fn scaled_dims((h, w): (usize, usize), ratio: f64) -> (usize, usize) {
    ((h as f64 * ratio).round() as usize, (w as f64 * ratio).round() as usize)
}

/// Position of one patch in the grid and its pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PatchCoord {
    pub i: usize,
    pub j: usize,
    pub top: usize,
    pub left: usize,
}

/// Window starts along one axis; the last window is pulled back to end at
/// the frame edge when the strides do not tile the extent.
pub fn window_starts(extent: usize, size: usize, stride: usize) -> Vec<usize> {
    assert!(size <= extent && stride >= 1);
    let span = extent - size;
    let n = span.div_ceil(stride) + 1;
    (0..n).map(|i| (i * stride).min(span)).collect()
}

/// Row-major flattened patches of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub patches: Array2<f64>,
    pub coords: Vec<PatchCoord>,
    pub rows: usize,
    pub cols: usize,
    pub frame_dims: (usize, usize),
    pub patch_dims: (usize, usize),
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Average per-pixel values laid out like `patches` back onto the frame.
    pub fn reassemble(&self, values: ArrayView2<f64>) -> Result<Array2<f64>> {
        crate::error::ensure_dim(values.dim() == self.patches.dim(), || {
            format!(
                "values {:?} do not match patch matrix {:?}",
                values.dim(),
                self.patches.dim()
            )
        })?;
        let (ph, pw) = self.patch_dims;
        let mut sum = Array2::<f64>::zeros(self.frame_dims);
        let mut count = Array2::<f64>::zeros(self.frame_dims);
        for (row, c) in self.coords.iter().enumerate() {
            let v = values.row(row);
            for y in 0..ph {
                for x in 0..pw {
                    sum[[c.top + y, c.left + x]] += v[y * pw + x];
                    count[[c.top + y, c.left + x]] += 1.0;
                }
            }
        }
        Ok(sum / count)
    }

    /// Paint one scalar per patch, averaging where rects overlap.
    pub fn paint_mean(&self, per_patch: &[f64]) -> Array2<f64> {
        assert_eq!(per_patch.len(), self.len());
        let (ph, pw) = self.patch_dims;
        let mut sum = Array2::<f64>::zeros(self.frame_dims);
        let mut count = Array2::<f64>::zeros(self.frame_dims);
        for (c, &s) in self.coords.iter().zip(per_patch) {
            let mut sv = sum.slice_mut(ndarray::s![c.top..c.top + ph, c.left..c.left + pw]);
            sv += s;
            let mut cv = count.slice_mut(ndarray::s![c.top..c.top + ph, c.left..c.left + pw]);
            cv += 1.0;
        }
        sum / count
    }

    /// Paint one flag per patch; a pixel is set if any covering patch is.
    pub fn paint_or(&self, per_patch: &[bool]) -> Array2<u8> {
        assert_eq!(per_patch.len(), self.len());
        let (ph, pw) = self.patch_dims;
        let mut out = Array2::<u8>::zeros(self.frame_dims);
        for (c, _) in self.coords.iter().zip(per_patch).filter(|(_, &f)| f) {
            out.slice_mut(ndarray::s![c.top..c.top + ph, c.left..c.left + pw])
                .fill(1);
        }
        out
    }
}

/// Cut `frame` into the overlapping grid described by `spec` (no rescale).
pub fn extract_patches(frame: &Frame, spec: &PatchSpec) -> Result<PatchGrid> {
    spec.validate()?;
    let (fh, fw) = frame.dims();
    if fh < spec.h || fw < spec.w {
        return Err(Error::InvalidArgument(format!(
            "{fh}x{fw} frame is smaller than the {}x{} patch",
            spec.h, spec.w
        )));
    }
    let ys = window_starts(fh, spec.h, spec.stride_v);
    let xs = window_starts(fw, spec.w, spec.stride_h);
    let mut patches = Array2::<f64>::zeros((ys.len() * xs.len(), spec.len()));
    let mut coords = Vec::with_capacity(ys.len() * xs.len());
    for (i, &top) in ys.iter().enumerate() {
        for (j, &left) in xs.iter().enumerate() {
            let row = coords.len();
            let window = frame
                .pixels
                .slice(ndarray::s![top..top + spec.h, left..left + spec.w]);
            patches
                .row_mut(row)
                .iter_mut()
                .zip(window.iter())
                .for_each(|(d, &s)| *d = s);
            coords.push(PatchCoord { i, j, top, left });
        }
    }
    Ok(PatchGrid {
        patches,
        coords,
        rows: ys.len(),
        cols: xs.len(),
        frame_dims: (fh, fw),
        patch_dims: (spec.h, spec.w),
    })
}

/// Bilinear resize to `(round(H·ratio), round(W·ratio))`.
pub fn rescale(frame: &Frame, ratio: f64) -> Result<Frame> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "scale ratio {ratio} outside (0, 1]"
        )));
    }
    let (oh, ow) = scaled_dims(frame.dims(), ratio);
    if oh == 0 || ow == 0 {
        return Err(Error::InvalidArgument(format!(
            "ratio {ratio} collapses a {}x{} frame",
            frame.height(),
            frame.width()
        )));
    }
    Ok(Frame::new(resize_bilinear(frame.pixels.view(), oh, ow), frame.index))
}

/// Pixel-center aligned bilinear interpolation.
pub fn resize_bilinear(src: ArrayView2<f64>, oh: usize, ow: usize) -> Array2<f64> {
    let (ih, iw) = src.dim();
    if (ih, iw) == (oh, ow) {
        return src.to_owned();
    }
    let axis = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let lo = s.floor() as usize;
                let hi = (lo + 1).min(inp - 1);
                (lo, hi, s - lo as f64)
            })
            .collect()
    };
    let ys = axis(oh, ih);
    let xs = axis(ow, iw);
    Array2::from_shape_fn((oh, ow), |(y, x)| {
        let (y0, y1, fy) = ys[y];
        let (x0, x1, fx) = xs[x];
        let top = src[[y0, x0]] * (1.0 - fx) + src[[y0, x1]] * fx;
        let bottom = src[[y1, x0]] * (1.0 - fx) + src[[y1, x1]] * fx;
        (top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0)
    })
}

fn is_frame_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "pgm" | "png"))
        .unwrap_or(false)
}

fn trailing_number(path: &Path) -> Option<u64> {
    let stem = path.file_stem()?.to_str()?;
    let digits: String = stem
        .chars()
        .rev()
        .take_while(|c| c.is_ascii_digit())
        .collect::<Vec<_>>()
        .into_iter()
        .rev()
        .collect();
    digits.parse().ok()
}

/// Image files of a frame directory in lexicographic order; their trailing
/// numbers must increase strictly.
pub fn list_frame_files(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::Data(format!("{} is not a directory", dir.display())));
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_frame_file(p))
        .collect();
    files.sort();
    let mut last: Option<u64> = None;
    for f in &files {
        let n = trailing_number(f).ok_or_else(|| {
            Error::Data(format!("{} has no frame number", f.display()))
        })?;
        if last.is_some_and(|l| n <= l) {
            return Err(Error::Data(format!(
                "{} breaks the numeric frame order",
                f.display()
            )));
        }
        last = Some(n);
    }
    Ok(files)
}

/// Decode a grayscale image into `[0, 1]` (8-bit by /255, 16-bit by /65535).
/// Color images are converted to luma.
pub fn read_gray(path: &Path) -> Result<Array2<f64>> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.into(),
        source,
    })?;
    Ok(gray_from_image(&img))
}

fn gray_from_image(img: &DynamicImage) -> Array2<f64> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img.color() {
        ColorType::L16 | ColorType::La16 | ColorType::Rgb16 | ColorType::Rgba16 => {
            let l = img.to_luma16();
            Array2::from_shape_fn((h, w), |(y, x)| {
                l.get_pixel(x as u32, y as u32)[0] as f64 / 65535.0
            })
        }
        _ => {
            let l = img.to_luma8();
            Array2::from_shape_fn((h, w), |(y, x)| l.get_pixel(x as u32, y as u32)[0] as f64 / 255.0)
        }
    }
}

/// Load every frame of `dir`. With `expected` set, frames of another size are
/// resized bilinearly when `resize` is true and rejected otherwise.
pub fn load_frames(dir: &Path, expected: Option<(usize, usize)>, resize: bool) -> Result<Vec<Frame>> {
    let files = list_frame_files(dir)?;
    let mut frames = Vec::with_capacity(files.len());
    for (t, f) in files.iter().enumerate() {
        let mut pixels = read_gray(f)?;
        if let Some((h, w)) = expected {
            if pixels.dim() != (h, w) {
                if !resize {
                    return Err(Error::Data(format!(
                        "{} is {:?}, expected {:?}",
                        f.display(),
                        pixels.dim(),
                        (h, w)
                    )));
                }
                pixels = resize_bilinear(pixels.view(), h, w);
            }
        }
        frames.push(Frame::new(pixels, t));
    }
    Ok(frames)
}

/// Quantize `[0, 1]` values to 8 bits.
pub fn to_u8(pixels: ArrayView2<f64>) -> Vec<u8> {
    pixels
        .iter()
        .map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

/// Write a binary 8-bit PGM.
pub fn write_pgm8(path: &Path, width: usize, height: usize, data: &[u8]) -> Result<()> {
    image::save_buffer_with_format(
        path,
        data,
        width as u32,
        height as u32,
        image::ExtendedColorType::L8,
        image::ImageFormat::Pnm,
    )
    .map_err(|source| Error::Image {
        path: path.into(),
        source,
    })
}

/// Write a binary 16-bit PGM.
pub fn write_pgm16(path: &Path, width: usize, height: usize, data: &[u16]) -> Result<()> {
    let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_ne_bytes()).collect();
    image::save_buffer_with_format(
        path,
        &bytes,
        width as u32,
        height as u32,
        image::ExtendedColorType::L16,
        image::ImageFormat::Pnm,
    )
    .map_err(|source| Error::Image {
        path: path.into(),
        source,
    })
}

/// Save a `[0, 1]` frame as an 8-bit PGM.
pub fn save_frame(path: &Path, frame: &Frame) -> Result<()> {
    let (h, w) = frame.dims();
    write_pgm8(path, w, h, &to_u8(frame.pixels.view()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(h: usize, w: usize, sv: usize, sh: usize) -> PatchSpec {
        PatchSpec::new(h, w, sv, sh, 1.0).unwrap()
    }

    #[test]
    fn single_window_covers_frame() {
        let f = Frame::new(Array2::from_elem((12, 18), 0.3), 0);
        let g = extract_patches(&f, &spec(12, 18, 6, 9)).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g.patches.ncols(), 216);
    }

    #[test]
    fn clamped_grid_positions() {
        // Independent oracle: enumerate every start that fits, then add the
        // edge-aligned start if the strides leave a gap.
        fn oracle(extent: usize, size: usize, stride: usize) -> Vec<usize> {
            let mut v: Vec<usize> = (0..).map(|i| i * stride).take_while(|s| s + size <= extent).collect();
            if *v.last().unwrap() + size < extent {
                v.push(extent - size);
            }
            v
        }
        let f = Frame::new(Array2::zeros((24, 36)), 0);
        let g = extract_patches(&f, &spec(12, 18, 6, 9)).unwrap();
        assert_eq!((g.rows, g.cols), (3, 3));
        let tops: Vec<usize> = g.coords.iter().filter(|c| c.j == 0).map(|c| c.top).collect();
        let lefts: Vec<usize> = g.coords.iter().filter(|c| c.i == 0).map(|c| c.left).collect();
        assert_eq!(tops, vec![0, 6, 12]);
        assert_eq!(lefts, vec![0, 9, 18]);
        for (e, s, st) in [(24, 12, 6), (25, 12, 6), (64, 8, 3), (17, 4, 4), (9, 9, 1)] {
            assert_eq!(window_starts(e, s, st), oracle(e, s, st), "{e} {s} {st}");
        }
    }

    #[test]
    fn constant_frame_gives_constant_rows() {
        let f = Frame::new(Array2::from_elem((30, 40), 0.7), 0);
        let g = extract_patches(&f, &spec(12, 18, 6, 9)).unwrap();
        assert!(g.patches.iter().all(|&p| p == 0.7));
    }

    #[test]
    fn frame_smaller_than_patch_is_rejected() {
        let f = Frame::new(Array2::zeros((10, 40)), 0);
        assert!(extract_patches(&f, &spec(12, 18, 6, 9)).is_err());
    }

    #[test]
    fn invalid_strides_rejected() {
        assert!(PatchSpec::new(12, 18, 0, 9, 1.0).is_err());
        assert!(PatchSpec::new(12, 18, 13, 9, 1.0).is_err());
        assert!(PatchSpec::new(12, 18, 6, 9, 1.5).is_err());
    }

    #[test]
    fn rescale_identity_and_constants() {
        let px = Array2::from_shape_fn((20, 30), |(y, x)| ((y * 31 + x * 7) % 11) as f64 / 10.0);
        let f = Frame::new(px, 3);
        assert_eq!(rescale(&f, 1.0).unwrap(), f);
        let c = Frame::new(Array2::from_elem((20, 30), 0.5), 0);
        let half = rescale(&c, 0.5).unwrap();
        assert_eq!(half.dims(), (10, 15));
        assert!(half.pixels.iter().all(|&p| (p - 0.5).abs() < 1e-15));
        let big = Frame::new(Array2::zeros((240, 360)), 0);
        assert_eq!(rescale(&big, 0.25).unwrap().dims(), (60, 90));
        assert!(rescale(&big, 0.0).is_err());
        assert!(rescale(&big, 1.2).is_err());
    }

    #[test]
    fn prepare_rejects_too_small_scale() {
        let f = Frame::new(Array2::zeros((64, 64)), 0);
        let s = PatchSpec::new(12, 18, 6, 9, 0.25).unwrap();
        assert!(s.prepare(&f).is_err());
    }

    #[test]
    fn pixel_mapping_from_u8() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<u8> = vec![0, 128, 255, 0, 0, 0];
        for name in ["000.pgm", "001.pgm", "002.pgm"] {
            write_pgm8(&dir.path().join(name), 3, 2, &data).unwrap();
        }
        let frames = load_frames(dir.path(), Some((2, 3)), false).unwrap();
        assert_eq!(frames.iter().map(|f| f.index).collect::<Vec<_>>(), vec![0, 1, 2]);
        let p = &frames[0].pixels;
        assert_eq!(p[[0, 0]], 0.0);
        assert_eq!(p[[0, 1]], 128.0 / 255.0);
        assert_eq!(p[[0, 2]], 1.0);
        assert!(load_frames(dir.path(), Some((4, 4)), false).is_err());
        assert_eq!(load_frames(dir.path(), Some((4, 4)), true).unwrap()[0].dims(), (4, 4));
    }

    #[test]
    fn black_png_is_zero() {
        let dir = tempfile::tempdir().unwrap();
        image::GrayImage::new(5, 4).save(dir.path().join("frame_0.png")).unwrap();
        let frames = load_frames(dir.path(), None, false).unwrap();
        assert!(frames[0].pixels.iter().all(|&p| p == 0.0));
    }

    #[test]
    fn non_monotonic_names_rejected() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["1.pgm", "10.pgm", "2.pgm"] {
            write_pgm8(&dir.path().join(name), 1, 1, &[0]).unwrap();
        }
        assert!(matches!(load_frames(dir.path(), None, false), Err(Error::Data(_))));
        assert!(load_frames(&dir.path().join("missing"), None, false).is_err());
    }

    proptest! {
        #[test]
        fn reassembly_and_coverage(h in 4usize..40, w in 4usize..40, ph in 1usize..6, pw in 1usize..6,
                                   sv in 1usize..6, sh in 1usize..6, seed in 0u64..1000) {
            prop_assume!(sv <= ph && sh <= pw && ph <= h && pw <= w);
            let px = Array2::from_shape_fn((h, w), |(y, x)| ((y * 131 + x * 17 + seed as usize) % 256) as f64 / 255.0);
            let f = Frame::new(px, 0);
            let s = spec(ph, pw, sv, sh);
            let g = extract_patches(&f, &s).unwrap();
            let back = g.reassemble(g.patches.view()).unwrap();
            prop_assert!(back.iter().zip(f.pixels.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
            let cover = g.paint_or(&vec![true; g.len()]);
            prop_assert!(cover.iter().all(|&c| c == 1));
            prop_assert_eq!(extract_patches(&f, &s).unwrap(), g);
        }
    }
}
