//! Augmented view generation with exact geometric provenance, and the
//! distance/assignment machinery that pairs feature-map cells across two
//! views of the same image.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Image;
use crate::error::PixproError;

/// Exact geometric provenance of one augmented view: the crop box in
/// original-image pixel coordinates, the square output resolution, and
/// whether the resized crop was horizontally flipped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRecord {
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
    pub out_res: usize,
    pub flip: bool,
}

/// How the normalization diagonal is formed when the two views' feature
/// bins differ in size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum DiagNorm {
    /// Maximum of the two views' bin diagonals (conservative: a coarser
    /// view cannot manufacture spurious positives).
    #[default]
    Max,
    /// Arithmetic mean of the two bin diagonals.
    Mean,
}

/// Pairwise normalized distances between warped cell centers of two views.
#[derive(Debug, Clone)]
pub struct DistanceMatrix {
    pub values: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
    pub bin_diag_a: f64,
    pub bin_diag_b: f64,
}

impl DistanceMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }
}

/// Binary positive/negative pairing of feature cells across two views.
/// The positive set of a cell and its complement (the negatives) are
/// derived on demand, never stored separately.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentMatrix {
    pub positives: Vec<bool>,
    pub rows: usize,
    pub cols: usize,
    pub threshold_used: f64,
}

impl AssignmentMatrix {
    pub fn is_positive(&self, i: usize, j: usize) -> bool {
        self.positives[i * self.cols + j]
    }

    /// Positive-pair column indices for row `i`.
    pub fn positives_of(&self, i: usize) -> Vec<usize> {
        (0..self.cols).filter(|j| self.is_positive(i, *j)).collect()
    }

    pub fn row_mask(&self, i: usize) -> &[bool] {
        &self.positives[i * self.cols..(i + 1) * self.cols]
    }

    pub fn count_positive(&self) -> usize {
        self.positives.iter().filter(|p| **p).count()
    }

    pub fn transpose(&self) -> AssignmentMatrix {
        let mut positives = vec![false; self.positives.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                positives[j * self.rows + i] = self.positives[i * self.cols + j];
            }
        }
        AssignmentMatrix {
            positives,
            rows: self.cols,
            cols: self.rows,
            threshold_used: self.threshold_used,
        }
    }

    /// Portable binary export: magic "PXASN1", two little-endian u32
    /// dims, then row-major 0/1 bytes.
    pub fn save(&self, path: &Path) -> Result<(), PixproError> {
        let mut f = std::fs::File::create(path)
            .map_err(|e| PixproError::io(path.display().to_string(), e))?;
        let mut buf = Vec::with_capacity(14 + self.positives.len());
        buf.extend_from_slice(b"PXASN1");
        buf.extend_from_slice(&(self.rows as u32).to_le_bytes());
        buf.extend_from_slice(&(self.cols as u32).to_le_bytes());
        buf.extend(self.positives.iter().map(|p| u8::from(*p)));
        f.write_all(&buf)
            .map_err(|e| PixproError::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<AssignmentMatrix, PixproError> {
        let mut raw = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut raw))
            .map_err(|e| PixproError::io(path.display().to_string(), e))?;
        if raw.len() < 14 || &raw[..6] != b"PXASN1" {
            return Err(PixproError::Dataset(format!(
                "{} is not an assignment matrix file",
                path.display()
            )));
        }
        let rows = u32::from_le_bytes(raw[6..10].try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(raw[10..14].try_into().unwrap()) as usize;
        if raw.len() != 14 + rows * cols {
            return Err(PixproError::Dataset("truncated assignment matrix".into()));
        }
        Ok(AssignmentMatrix {
            positives: raw[14..].iter().map(|b| *b != 0).collect(),
            rows,
            cols,
            threshold_used: f64::NAN,
        })
    }
}

/// Photometric augmentation knobs; every sub-op is gated by a probability.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhotometricConfig {
    pub jitter_prob: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub grayscale_prob: f64,
    pub blur_prob: f64,
    pub solarize_prob: f64,
    pub solarize_threshold: f64,
}

impl PhotometricConfig {
    /// Recipe values for the first view (blur always on, no solarize).
    pub fn view_a_default() -> Self {
        PhotometricConfig {
            jitter_prob: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.2,
            hue: 0.1,
            grayscale_prob: 0.2,
            blur_prob: 1.0,
            solarize_prob: 0.0,
            solarize_threshold: 0.5,
        }
    }

    /// Recipe values for the second view (rare blur, occasional solarize).
    pub fn view_b_default() -> Self {
        PhotometricConfig {
            blur_prob: 0.1,
            solarize_prob: 0.2,
            ..Self::view_a_default()
        }
    }

    pub fn disabled() -> Self {
        PhotometricConfig {
            jitter_prob: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            hue: 0.0,
            grayscale_prob: 0.0,
            blur_prob: 0.0,
            solarize_prob: 0.0,
            solarize_threshold: 0.5,
        }
    }
}

/// Geometric + photometric augmentation configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AugConfig {
    pub out_res: usize,
    pub area_min: f64,
    pub area_max: f64,
    pub aspect_min: f64,
    pub aspect_max: f64,
    pub flip_prob: f64,
    pub min_crop_side: usize,
    pub photometric_a: PhotometricConfig,
    pub photometric_b: PhotometricConfig,
}

impl Default for AugConfig {
    fn default() -> Self {
        AugConfig {
            out_res: 32,
            area_min: 0.08,
            area_max: 1.0,
            aspect_min: 3.0 / 4.0,
            aspect_max: 4.0 / 3.0,
            flip_prob: 0.5,
            min_crop_side: 2,
            photometric_a: PhotometricConfig::view_a_default(),
            photometric_b: PhotometricConfig::view_b_default(),
        }
    }
}

/// Deterministic per-sample RNG stream keyed by (seed, epoch, index).
pub fn sample_rng(seed: u64, epoch: u64, index: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    // splitmix64 over the three keys
    let mut z = seed
        .wrapping_add(epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    ChaCha8Rng::seed_from_u64(z)
}

fn sample_crop(img: &Image, cfg: &AugConfig, rng: &mut ChaCha8Rng) -> CropRecord {
    let (iw, ih) = (img.width, img.height);
    for _ in 0..10 {
        let area = rng.gen_range(cfg.area_min..=cfg.area_max) * (iw * ih) as f64;
        let log_ratio = rng.gen_range(cfg.aspect_min.ln()..=cfg.aspect_max.ln());
        let ratio = log_ratio.exp();
        let w = (area * ratio).sqrt().round() as usize;
        let h = (area / ratio).sqrt().round() as usize;
        if w >= 1 && h >= 1 && w <= iw && h <= ih {
            let x0 = rng.gen_range(0..=iw - w);
            let y0 = rng.gen_range(0..=ih - h);
            return CropRecord {
                x0,
                y0,
                w,
                h,
                out_res: cfg.out_res,
                flip: false,
            };
        }
    }
    // center-crop fallback
    let side = iw.min(ih);
    CropRecord {
        x0: (iw - side) / 2,
        y0: (ih - side) / 2,
        w: side,
        h: side,
        out_res: cfg.out_res,
        flip: false,
    }
}

/// Bilinear resize of the recorded crop region to `out_res` x `out_res`,
/// using half-pixel center alignment so the warp-grid coordinate formula
/// is exact, followed by the recorded horizontal flip.
pub fn render_view(img: &Image, rec: &CropRecord) -> Image {
    let res = rec.out_res;
    let mut out = Image::new(img.channels, res, res);
    for c in 0..img.channels {
        for r in 0..res {
            let sy = rec.y0 as f64 + (r as f64 + 0.5) * rec.h as f64 / res as f64 - 0.5;
            for q in 0..res {
                let qc = if rec.flip { res - 1 - q } else { q };
                let sx = rec.x0 as f64 + (qc as f64 + 0.5) * rec.w as f64 / res as f64 - 0.5;
                out.set(c, r, q, img.sample_bilinear(c, sy, sx));
            }
        }
    }
    out
}

/// A rendered view with its exact geometric provenance.
pub type View = (Image, CropRecord);

/// Sample two independent augmented views of `img` with exact provenance.
/// Photometric distortion is applied per view with its own config.
pub fn sample_view_pair(
    img: &Image,
    cfg: &AugConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(View, View), PixproError> {
    if img.width < cfg.min_crop_side || img.height < cfg.min_crop_side {
        return Err(PixproError::ImageTooSmall {
            width: img.width,
            height: img.height,
            min_side: cfg.min_crop_side,
        });
    }
    let make_view = |photo: &PhotometricConfig, rng: &mut ChaCha8Rng| {
        let mut rec = sample_crop(img, cfg, rng);
        rec.flip = rng.gen_bool(cfg.flip_prob);
        let view = render_view(img, &rec);
        let view = apply_photometric(&view, rng, photo);
        (view, rec)
    };
    let a = make_view(&cfg.photometric_a, rng);
    let b = make_view(&cfg.photometric_b, rng);
    Ok((a, b))
}

fn luma(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        (((g - b) / d) % 6.0 + 6.0) % 6.0
    } else if max == g {
        (b - r) / d + 2.0
    } else {
        (r - g) / d + 4.0
    } / 6.0;
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = (h % 1.0 + 1.0) % 1.0 * 6.0;
    let i = h6.floor() as usize % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Apply the configured photometric pipeline. Geometry is untouched and
/// outputs stay in `[0,1]`.
pub fn apply_photometric(view: &Image, rng: &mut ChaCha8Rng, cfg: &PhotometricConfig) -> Image {
    let mut img = view.clone();
    let n = img.height * img.width;

    if cfg.jitter_prob > 0.0 && rng.gen_bool(cfg.jitter_prob) {
        // brightness
        let f = 1.0 + rng.gen_range(-cfg.brightness..=cfg.brightness);
        for v in img.data.iter_mut() {
            *v = (*v * f).clamp(0.0, 1.0);
        }
        // contrast around the mean gray level
        let mean: f64 = (0..n)
            .map(|i| luma(img.data[i], img.data[n + i], img.data[2 * n + i]))
            .sum::<f64>()
            / n as f64;
        let f = 1.0 + rng.gen_range(-cfg.contrast..=cfg.contrast);
        for v in img.data.iter_mut() {
            *v = ((*v - mean) * f + mean).clamp(0.0, 1.0);
        }
        // saturation: blend towards per-pixel gray
        let f = 1.0 + rng.gen_range(-cfg.saturation..=cfg.saturation);
        for i in 0..n {
            let gray = luma(img.data[i], img.data[n + i], img.data[2 * n + i]);
            for c in 0..3 {
                let v = img.data[c * n + i];
                img.data[c * n + i] = (gray + (v - gray) * f).clamp(0.0, 1.0);
            }
        }
        // hue rotation in HSV space
        let dh = rng.gen_range(-cfg.hue..=cfg.hue);
        if dh != 0.0 {
            for i in 0..n {
                let (h, s, v) = rgb_to_hsv(img.data[i], img.data[n + i], img.data[2 * n + i]);
                let (r, g, b) = hsv_to_rgb(h + dh, s, v);
                img.data[i] = r.clamp(0.0, 1.0);
                img.data[n + i] = g.clamp(0.0, 1.0);
                img.data[2 * n + i] = b.clamp(0.0, 1.0);
            }
        }
    }

    if cfg.grayscale_prob > 0.0 && rng.gen_bool(cfg.grayscale_prob) {
        for i in 0..n {
            let gray = luma(img.data[i], img.data[n + i], img.data[2 * n + i]);
            for c in 0..3 {
                img.data[c * n + i] = gray;
            }
        }
    }

    if cfg.blur_prob > 0.0 && rng.gen_bool(cfg.blur_prob) {
        let sigma = rng.gen_range(0.1..=2.0);
        img = gaussian_blur(&img, sigma);
    }

    if cfg.solarize_prob > 0.0 && rng.gen_bool(cfg.solarize_prob) {
        let thr = cfg.solarize_threshold;
        for v in img.data.iter_mut() {
            if *v >= thr {
                *v = 1.0 - *v;
            }
        }
    }

    img
}

/// Separable Gaussian blur with border-replicate padding, so constant
/// images are fixed points.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    let radius = (3.0 * sigma).ceil().max(1.0) as i64;
    let mut kernel = Vec::with_capacity(2 * radius as usize + 1);
    for k in -radius..=radius {
        kernel.push((-(k * k) as f64 / (2.0 * sigma * sigma)).exp());
    }
    let norm: f64 = kernel.iter().sum();
    for k in kernel.iter_mut() {
        *k /= norm;
    }
    let (h, w) = (img.height as i64, img.width as i64);
    let mut tmp = img.clone();
    for c in 0..img.channels {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let sx = (x + ki as i64 - radius).clamp(0, w - 1);
                    acc += kv * img.get(c, y as usize, sx as usize);
                }
                tmp.set(c, y as usize, x as usize, acc);
            }
        }
    }
    let mut out = tmp.clone();
    for c in 0..img.channels {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let sy = (y + ki as i64 - radius).clamp(0, h - 1);
                    acc += kv * tmp.get(c, sy as usize, x as usize);
                }
                out.set(c, y as usize, x as usize, acc.clamp(0.0, 1.0));
            }
        }
    }
    out
}

/// Warp each cell of a `feat_res` x `feat_res` feature grid back to
/// original-image coordinates (bin centers). Returns `feat_res^2`
/// `(x, y)` pairs in row-major cell order.
pub fn warp_grid(rec: &CropRecord, feat_res: usize) -> Vec<(f64, f64)> {
    let mut coords = Vec::with_capacity(feat_res * feat_res);
    for r in 0..feat_res {
        let y = rec.y0 as f64 + (r as f64 + 0.5) * rec.h as f64 / feat_res as f64;
        for c in 0..feat_res {
            let cc = if rec.flip { feat_res - 1 - c } else { c };
            let x = rec.x0 as f64 + (cc as f64 + 0.5) * rec.w as f64 / feat_res as f64;
            coords.push((x, y));
        }
    }
    coords
}

/// Bin diagonal of a view in original pixels, using the geometric mean
/// side for non-square crops.
pub fn bin_diagonal(rec: &CropRecord, feat_res: usize) -> f64 {
    let side = ((rec.w * rec.h) as f64).sqrt();
    side / feat_res as f64 * std::f64::consts::SQRT_2
}

/// Pairwise distances between warped cell centers, normalized by the
/// combined bin diagonal of the two views.
pub fn distance_matrix(
    coords_a: &[(f64, f64)],
    coords_b: &[(f64, f64)],
    rec_a: &CropRecord,
    rec_b: &CropRecord,
    feat_res: usize,
    norm: DiagNorm,
) -> DistanceMatrix {
    let bin_diag_a = bin_diagonal(rec_a, feat_res);
    let bin_diag_b = bin_diagonal(rec_b, feat_res);
    let diag = match norm {
        DiagNorm::Max => bin_diag_a.max(bin_diag_b),
        DiagNorm::Mean => 0.5 * (bin_diag_a + bin_diag_b),
    };
    let mut values = Vec::with_capacity(coords_a.len() * coords_b.len());
    for (ax, ay) in coords_a {
        for (bx, by) in coords_b {
            values.push(((ax - bx).powi(2) + (ay - by).powi(2)).sqrt() / diag);
        }
    }
    DistanceMatrix {
        values,
        rows: coords_a.len(),
        cols: coords_b.len(),
        bin_diag_a,
        bin_diag_b,
    }
}

/// Threshold normalized distances into the positive/negative assignment.
/// The boundary `dist == t` counts as positive.
pub fn assign(dist: &DistanceMatrix, t: f64) -> AssignmentMatrix {
    assert!(t > 0.0, "assignment threshold must be positive");
    AssignmentMatrix {
        positives: dist.values.iter().map(|d| *d <= t).collect(),
        rows: dist.rows,
        cols: dist.cols,
        threshold_used: t,
    }
}

/// Geometry pipeline shorthand: warp both views at `feat_res` and
/// threshold the normalized distances.
pub fn assignment_for(
    rec_a: &CropRecord,
    rec_b: &CropRecord,
    feat_res: usize,
    t: f64,
    norm: DiagNorm,
) -> AssignmentMatrix {
    let ca = warp_grid(rec_a, feat_res);
    let cb = warp_grid(rec_b, feat_res);
    assign(&distance_matrix(&ca, &cb, rec_a, rec_b, feat_res, norm), t)
}

/// True iff the two crop rectangles intersect with positive area.
pub fn overlap_check(rec_a: &CropRecord, rec_b: &CropRecord) -> bool {
    let x_overlap = rec_a.x0 < rec_b.x0 + rec_b.w && rec_b.x0 < rec_a.x0 + rec_a.w;
    let y_overlap = rec_a.y0 < rec_b.y0 + rec_b.h && rec_b.y0 < rec_a.y0 + rec_a.h;
    x_overlap && y_overlap
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_scene;

    fn rec(x0: usize, y0: usize, w: usize, h: usize) -> CropRecord {
        CropRecord {
            x0,
            y0,
            w,
            h,
            out_res: 16,
            flip: false,
        }
    }

    #[test]
    fn warp_grid_hand_case() {
        let coords = warp_grid(&rec(0, 0, 16, 16), 4);
        let expect = [2.0, 6.0, 10.0, 14.0];
        for r in 0..4 {
            for c in 0..4 {
                let (x, y) = coords[r * 4 + c];
                assert_eq!(x, expect[c]);
                assert_eq!(y, expect[r]);
            }
        }
    }

    #[test]
    fn warp_grid_flip_mirrors_x() {
        let base = warp_grid(&rec(3, 5, 12, 9), 4);
        let mut flipped_rec = rec(3, 5, 12, 9);
        flipped_rec.flip = true;
        let flipped = warp_grid(&flipped_rec, 4);
        for r in 0..4 {
            for c in 0..4 {
                let (fx, fy) = flipped[r * 4 + c];
                let (bx, by) = base[r * 4 + (3 - c)];
                assert_eq!((fx, fy), (bx, by));
            }
        }
    }

    #[test]
    fn warp_grid_single_cell_is_center() {
        let coords = warp_grid(&rec(4, 6, 10, 8), 1);
        assert_eq!(coords, vec![(9.0, 10.0)]);
    }

    #[test]
    fn distance_hand_case() {
        // identical geometry except B shifted by (8,8); bin diagonal 4*sqrt(2)
        let a = rec(0, 0, 16, 16);
        let b = rec(8, 8, 16, 16);
        let ca = warp_grid(&a, 4);
        let cb = warp_grid(&b, 4);
        let d = distance_matrix(&ca, &cb, &a, &b, 4, DiagNorm::Max);
        // A cell (3,3) center (14,14); B cell (1,1) center (14,14)
        assert_eq!(d.get(3 * 4 + 3, 4 + 1), 0.0);
        // A (14,14) vs B cell (0,0) center (10,10): raw dist 4*sqrt(2)
        let v = d.get(3 * 4 + 3, 0);
        assert!((v - 1.0).abs() < 1e-12, "{v}");
    }

    #[test]
    fn distance_scale_invariance() {
        let a1 = rec(0, 0, 10, 14);
        let b1 = rec(4, 2, 8, 8);
        let a2 = rec(0, 0, 20, 28);
        let b2 = rec(8, 4, 16, 16);
        let d1 = distance_matrix(&warp_grid(&a1, 3), &warp_grid(&b1, 3), &a1, &b1, 3, DiagNorm::Max);
        let d2 = distance_matrix(&warp_grid(&a2, 3), &warp_grid(&b2, 3), &a2, &b2, 3, DiagNorm::Max);
        for (v1, v2) in d1.values.iter().zip(&d2.values) {
            assert!((v1 - v2).abs() < 1e-12);
        }
    }

    #[test]
    fn assign_boundary_inclusive() {
        let d = DistanceMatrix {
            values: vec![0.0, 0.7, 0.7000001, 2.0],
            rows: 2,
            cols: 2,
            bin_diag_a: 1.0,
            bin_diag_b: 1.0,
        };
        let a = assign(&d, 0.7);
        assert_eq!(a.positives, vec![true, true, false, false]);
    }

    #[test]
    fn identical_records_have_positive_diagonal() {
        let r = rec(2, 3, 11, 9);
        let a = assignment_for(&r, &r, 4, 0.7, DiagNorm::Max);
        for i in 0..16 {
            assert!(a.is_positive(i, i));
        }
    }

    #[test]
    fn overlap_cases() {
        assert!(overlap_check(&rec(0, 0, 8, 8), &rec(0, 0, 8, 8)));
        assert!(!overlap_check(&rec(0, 0, 8, 8), &rec(16, 16, 8, 8)));
        // edge-touching is zero-area intersection
        assert!(!overlap_check(&rec(0, 0, 8, 8), &rec(8, 0, 8, 8)));
        assert!(overlap_check(&rec(0, 0, 8, 8), &rec(7, 0, 8, 8)));
    }

    #[test]
    fn full_image_crop_no_flip_matches_plain_resize() {
        let scene = generate_scene(24, 4, 3);
        let r = CropRecord {
            x0: 0,
            y0: 0,
            w: 24,
            h: 24,
            out_res: 12,
            flip: false,
        };
        let view = render_view(&scene.image, &r);
        // direct bilinear resize of the whole image
        for c in 0..3 {
            for y in 0..12 {
                for x in 0..12 {
                    let sy = (y as f64 + 0.5) * 2.0 - 0.5;
                    let sx = (x as f64 + 0.5) * 2.0 - 0.5;
                    let want = scene.image.sample_bilinear(c, sy, sx);
                    assert_eq!(view.get(c, y, x), want);
                }
            }
        }
    }

    #[test]
    fn view_pair_is_deterministic_for_fixed_stream() {
        let scene = generate_scene(32, 4, 5);
        let cfg = AugConfig::default();
        let mut r1 = sample_rng(9, 1, 7);
        let mut r2 = sample_rng(9, 1, 7);
        let p1 = sample_view_pair(&scene.image, &cfg, &mut r1).unwrap();
        let p2 = sample_view_pair(&scene.image, &cfg, &mut r2).unwrap();
        assert_eq!(p1.0 .0.data, p2.0 .0.data);
        assert_eq!(p1.0 .1, p2.0 .1);
        assert_eq!(p1.1 .0.data, p2.1 .0.data);
        assert_eq!(p1.1 .1, p2.1 .1);
    }

    #[test]
    fn tiny_image_rejected() {
        let img = Image::new(3, 1, 1);
        let cfg = AugConfig::default();
        let mut rng = sample_rng(0, 0, 0);
        assert!(matches!(
            sample_view_pair(&img, &cfg, &mut rng),
            Err(PixproError::ImageTooSmall { .. })
        ));
    }

    #[test]
    fn crop_areas_stay_in_configured_range() {
        let scene = generate_scene(32, 4, 1);
        let cfg = AugConfig::default();
        let mut rng = sample_rng(13, 0, 0);
        let total = (32 * 32) as f64;
        let mut fallbacks = 0;
        for _ in 0..10_000 {
            let rec = sample_crop(&scene.image, &cfg, &mut rng);
            let frac = (rec.w * rec.h) as f64 / total;
            if rec.w == rec.h && rec.x0 == 0 && rec.y0 == 0 && rec.w == 32 {
                fallbacks += 1; // center-crop fallback may exceed sampled area
            }
            // rounding to integer sides perturbs the area slightly
            assert!((0.05..=1.001).contains(&frac), "area fraction {frac}");
        }
        assert!(fallbacks < 2000, "fallback dominated sampling: {fallbacks}");
    }

    #[test]
    fn crop_area_distribution_roughly_uniform() {
        let scene = generate_scene(64, 4, 2);
        let cfg = AugConfig::default();
        let mut rng = sample_rng(17, 0, 0);
        let total = (64 * 64) as f64;
        let mut hist = [0usize; 4]; // quartiles of [0.08, 1.0]
        let n = 10_000;
        for _ in 0..n {
            let rec = sample_crop(&scene.image, &cfg, &mut rng);
            let frac = ((rec.w * rec.h) as f64 / total).clamp(0.08, 1.0);
            let bin = (((frac - 0.08) / 0.92) * 4.0).min(3.999) as usize;
            hist[bin] += 1;
        }
        for (i, count) in hist.iter().enumerate() {
            let p = *count as f64 / n as f64;
            // the retry loop rejects large-area draws whose aspect ratio
            // pushes a side past the image, thinning the top quartile
            assert!(p > 0.10 && p < 0.40, "quartile {i} frequency {p}");
        }
    }

    #[test]
    fn photometric_identity_when_disabled() {
        let scene = generate_scene(16, 4, 8);
        let mut rng = sample_rng(1, 2, 3);
        let out = apply_photometric(&scene.image, &mut rng, &PhotometricConfig::disabled());
        assert_eq!(out.data, scene.image.data);
    }

    #[test]
    fn solarize_definition() {
        let mut img = Image::new(3, 1, 2);
        img.set(0, 0, 0, 0.3);
        img.set(0, 0, 1, 0.8);
        let cfg = PhotometricConfig {
            solarize_prob: 1.0,
            ..PhotometricConfig::disabled()
        };
        let mut rng = sample_rng(0, 0, 1);
        let out = apply_photometric(&img, &mut rng, &cfg);
        assert!((out.get(0, 0, 0) - 0.3).abs() < 1e-12);
        assert!((out.get(0, 0, 1) - 0.2).abs() < 1e-12);
    }

    #[test]
    fn blur_fixes_constant_images() {
        let mut img = Image::new(3, 8, 8);
        for v in img.data.iter_mut() {
            *v = 0.42;
        }
        let out = gaussian_blur(&img, 5.0);
        for v in &out.data {
            assert!((v - 0.42).abs() < 1e-9);
        }
    }

    #[test]
    fn photometric_output_stays_in_unit_range() {
        let scene = generate_scene(16, 5, 9);
        for s in 0..30 {
            let mut rng = sample_rng(100, 0, s);
            let out = apply_photometric(&scene.image, &mut rng, &PhotometricConfig::view_b_default());
            assert!(out.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn assignment_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let a = assignment_for(&rec(0, 0, 16, 16), &rec(4, 4, 12, 12), 4, 0.7, DiagNorm::Max);
        let p = dir.path().join("a.pxasn");
        a.save(&p).unwrap();
        let back = AssignmentMatrix::load(&p).unwrap();
        assert_eq!(back.positives, a.positives);
        assert_eq!((back.rows, back.cols), (a.rows, a.cols));
    }
}
