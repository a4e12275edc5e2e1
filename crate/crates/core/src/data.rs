//! Image representation, file I/O (PPM/PNG ingest), and the synthetic
//! labeled-scene generator used for desk-scale experiments.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::PixproError;

/// A `[C,H,W]` row-major floating-point image with values in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize) -> Image {
        Image {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// Bilinear sample at continuous coordinates with half-pixel centers,
    /// clamped to the image border.
    pub fn sample_bilinear(&self, c: usize, y: f64, x: f64) -> f64 {
        let xc = x.clamp(0.0, (self.width - 1) as f64);
        let yc = y.clamp(0.0, (self.height - 1) as f64);
        let x0 = xc.floor() as usize;
        let y0 = yc.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = xc - x0 as f64;
        let fy = yc - y0 as f64;
        let v00 = self.get(c, y0, x0);
        let v01 = self.get(c, y0, x1);
        let v10 = self.get(c, y1, x0);
        let v11 = self.get(c, y1, x1);
        v00 * (1.0 - fy) * (1.0 - fx)
            + v01 * (1.0 - fy) * fx
            + v10 * fy * (1.0 - fx)
            + v11 * fy * fx
    }
}

/// Load an 8-bit PPM (P6) or PNG file into a `[0,1]` float image.
pub fn load_image(path: &Path) -> Result<Image, PixproError> {
    let img = image::open(path).map_err(|e| PixproError::ImageDecode {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut out = Image::new(3, h, w);
    for y in 0..h {
        for x in 0..w {
            let px = rgb.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                out.set(c, y, x, px[c] as f64 / 255.0);
            }
        }
    }
    Ok(out)
}

/// Write a 3-channel image as binary PPM (P6), 8 bits per sample.
pub fn save_ppm(img: &Image, path: &Path) -> Result<(), PixproError> {
    assert_eq!(img.channels, 3, "save_ppm expects a 3-channel image");
    let f = File::create(path).map_err(|e| PixproError::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(f);
    let mut buf = Vec::with_capacity(img.width * img.height * 3);
    for y in 0..img.height {
        for x in 0..img.width {
            for c in 0..3 {
                buf.push((img.get(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    write!(w, "P6\n{} {}\n255\n", img.width, img.height)
        .and_then(|_| w.write_all(&buf))
        .map_err(|e| PixproError::io(path.display().to_string(), e))
}

/// Write a per-pixel label map as binary PGM (P5); labels must fit in u8.
pub fn save_label_map(labels: &[u8], height: usize, width: usize, path: &Path) -> Result<(), PixproError> {
    assert_eq!(labels.len(), height * width);
    let f = File::create(path).map_err(|e| PixproError::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(f);
    write!(w, "P5\n{width} {height}\n255\n")
        .and_then(|_| w.write_all(labels))
        .map_err(|e| PixproError::io(path.display().to_string(), e))
}

/// Read a binary PGM (P5) label map.
pub fn load_label_map(path: &Path) -> Result<(Vec<u8>, usize, usize), PixproError> {
    let mut raw = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| PixproError::io(path.display().to_string(), e))?;
    let header_err = || PixproError::ImageDecode {
        path: path.display().to_string(),
        message: "invalid PGM header".into(),
    };
    // header: "P5\n<w> <h>\n255\n"
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 && pos < raw.len() {
        while pos < raw.len() && raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < raw.len() && !raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(std::str::from_utf8(&raw[start..pos]).map_err(|_| header_err())?);
    }
    if fields.len() != 4 || fields[0] != "P5" || fields[3] != "255" {
        return Err(header_err());
    }
    let width: usize = fields[1].parse().map_err(|_| header_err())?;
    let height: usize = fields[2].parse().map_err(|_| header_err())?;
    pos += 1; // single whitespace after maxval
    if raw.len() < pos + width * height {
        return Err(header_err());
    }
    Ok((raw[pos..pos + width * height].to_vec(), height, width))
}

/// One manifest entry of a generated dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: usize,
    pub image: String,
    pub labels: String,
    pub class: usize,
}

/// A dataset rooted at a directory with a line-delimited manifest.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
    pub n_classes: usize,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Dataset, PixproError> {
        let manifest = root.join("manifest.jsonl");
        let text = std::fs::read_to_string(&manifest)
            .map_err(|e| PixproError::io(manifest.display().to_string(), e))?;
        let mut entries = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let e: ManifestEntry = serde_json::from_str(line)
                .map_err(|e| PixproError::Dataset(format!("bad manifest line: {e}")))?;
            entries.push(e);
        }
        if entries.is_empty() {
            return Err(PixproError::Dataset(format!(
                "empty dataset at {}",
                root.display()
            )));
        }
        let n_classes = entries.iter().map(|e| e.class).max().unwrap_or(0) + 1;
        Ok(Dataset {
            root: root.to_path_buf(),
            entries,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn load_image(&self, idx: usize) -> Result<Image, PixproError> {
        load_image(&self.root.join(&self.entries[idx].image))
    }
}

/// A generated scene: image, dense labels, and an image-level class.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub image: Image,
    pub dense_labels: Vec<u8>,
    pub class: usize,
    pub seed: u64,
}

fn class_color(k: usize, n_classes: usize) -> [f64; 3] {
    // evenly spaced hues, full saturation
    let h = k as f64 / n_classes as f64 * 6.0;
    let i = h.floor() as usize % 6;
    let f = h - h.floor();
    match i {
        0 => [1.0, f, 0.0],
        1 => [1.0 - f, 1.0, 0.0],
        2 => [0.0, 1.0, f],
        3 => [0.0, 1.0 - f, 1.0],
        4 => [f, 0.0, 1.0],
        _ => [1.0, 0.0, 1.0 - f],
    }
}

/// Generate one textured-shape scene deterministically from `seed`.
pub fn generate_scene(size: usize, n_classes: usize, seed: u64) -> SyntheticScene {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut img = Image::new(3, size, size);
    let mut labels = vec![0u8; size * size];

    // noise background, class 0
    let bg_level: f64 = rng.gen_range(0.2..0.5);
    for y in 0..size {
        for x in 0..size {
            for c in 0..3 {
                let v = bg_level + rng.gen_range(-0.1..0.1);
                img.set(c, y, x, v.clamp(0.0, 1.0));
            }
        }
    }

    // 2..4 shapes, each carrying a nonzero class
    let n_shapes = rng.gen_range(2..=4);
    for _ in 0..n_shapes {
        let class = rng.gen_range(1..n_classes.max(2)).min(n_classes - 1);
        let color = class_color(class, n_classes);
        let kind = rng.gen_range(0..3);
        let cx = rng.gen_range(0.2..0.8) * size as f64;
        let cy = rng.gen_range(0.2..0.8) * size as f64;
        let rx = rng.gen_range(0.12..0.35) * size as f64;
        let ry = rng.gen_range(0.12..0.35) * size as f64;
        let stripe_period = rng.gen_range(3.0..8.0);
        for y in 0..size {
            for x in 0..size {
                let dx = (x as f64 - cx) / rx;
                let dy = (y as f64 - cy) / ry;
                let inside = match kind {
                    0 => dx.abs() <= 1.0 && dy.abs() <= 1.0, // rectangle
                    1 => dx * dx + dy * dy <= 1.0,           // ellipse
                    _ => {
                        // striped band
                        dx.abs() <= 1.0
                            && dy.abs() <= 1.0
                            && ((x + y) as f64 / stripe_period).floor() as i64 % 2 == 0
                    }
                };
                if inside {
                    let texture = 0.85 + 0.15 * ((x as f64 / stripe_period).sin() * 0.5 + 0.5);
                    for (c, col) in color.iter().enumerate() {
                        img.set(c, y, x, (col * texture).clamp(0.0, 1.0));
                    }
                    labels[y * size + x] = class as u8;
                }
            }
        }
    }

    // image-level class: most frequent nonzero label, background if none
    let mut counts = vec![0usize; n_classes];
    for l in &labels {
        counts[*l as usize] += 1;
    }
    let class = (1..n_classes)
        .max_by_key(|k| counts[*k])
        .filter(|k| counts[*k] > 0)
        .unwrap_or(0);

    SyntheticScene {
        image: img,
        dense_labels: labels,
        class,
        seed,
    }
}

/// Generate `n_images` scenes under `out_dir` with a manifest.
pub fn gen_synthetic_dataset(
    out_dir: &Path,
    n_images: usize,
    size: usize,
    n_classes: usize,
    seed: u64,
) -> Result<Dataset, PixproError> {
    assert!(n_images >= 1, "n_images must be at least 1");
    assert!(n_classes >= 2, "need at least 2 classes");
    std::fs::create_dir_all(out_dir)
        .map_err(|e| PixproError::io(out_dir.display().to_string(), e))?;
    let manifest_path = out_dir.join("manifest.jsonl");
    let f = File::create(&manifest_path)
        .map_err(|e| PixproError::io(manifest_path.display().to_string(), e))?;
    let mut w = BufWriter::new(f);
    let mut entries = Vec::with_capacity(n_images);
    for i in 0..n_images {
        let scene = generate_scene(size, n_classes, seed.wrapping_add(i as u64));
        let image_name = format!("img_{i:05}.ppm");
        let label_name = format!("lbl_{i:05}.pgm");
        save_ppm(&scene.image, &out_dir.join(&image_name))?;
        save_label_map(&scene.dense_labels, size, size, &out_dir.join(&label_name))?;
        let entry = ManifestEntry {
            id: i,
            image: image_name,
            labels: label_name,
            class: scene.class,
        };
        serde_json::to_writer(&mut w, &entry)
            .map_err(|e| PixproError::Dataset(e.to_string()))?;
        writeln!(w).map_err(|e| PixproError::io(manifest_path.display().to_string(), e))?;
        entries.push(entry);
    }
    Ok(Dataset {
        root: out_dir.to_path_buf(),
        entries,
        n_classes,
    })
}
