//! PNG I/O, in-memory image sets, training crops and a synthetic image
//! generator.
//!
//! Images are 8-bit RGB. Grayscale input is promoted to RGB; alpha channels
//! and 16-bit samples are rejected.

use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use image::{DynamicImage, ImageReader, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, Error, Result};

/// Environment variable naming the cache directory for rendered datasets.
pub const CACHE_ENV: &str = "BGVAE_CACHE";

fn ingestion(path: &Path, reason: impl Into<String>) -> Error {
    Error::Ingestion {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Reads an 8-bit RGB or grayscale PNG.
pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    let reader = ImageReader::open(path)
        .map_err(|e| ingestion(path, e.to_string()))?
        .with_guessed_format()
        .map_err(|e| ingestion(path, e.to_string()))?;
    let img = reader.decode().map_err(|e| ingestion(path, e.to_string()))?;
    match img {
        DynamicImage::ImageRgb8(rgb) => Ok(rgb),
        DynamicImage::ImageLuma8(_) => Ok(img.to_rgb8()),
        DynamicImage::ImageLumaA8(_) | DynamicImage::ImageRgba8(_) => {
            Err(ingestion(path, "images with an alpha channel are not supported"))
        }
        other => Err(ingestion(
            path,
            format!("unsupported pixel format {:?}, expected 8-bit RGB", other.color()),
        )),
    }
}

/// `(1, 3, H, W)` tensor in `[0, 1]`.
pub fn rgb_to_tensor(img: &RgbImage) -> Result<Tensor> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    let mut planar = vec![0f32; 3 * h * w];
    for (i, px) in raw.chunks_exact(3).enumerate() {
        for c in 0..3 {
            planar[c * h * w + i] = px[c] as f32 / 255.0;
        }
    }
    Ok(Tensor::from_vec(planar, (1, 3, h, w), &Device::Cpu)?)
}

/// Rounds a `(1, 3, H, W)` tensor to 8-bit RGB, clamping to `[0, 1]`.
pub fn tensor_to_rgb(x: &Tensor) -> Result<RgbImage> {
    let (b, c, h, w) = x.dims4()?;
    if b != 1 || c != 3 {
        return Err(dim_err!("expected one RGB image, got {:?}", x.dims()));
    }
    let v = x.to_dtype(candle_core::DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let mut raw = vec![0u8; 3 * h * w];
    for i in 0..h * w {
        for ch in 0..3 {
            raw[3 * i + ch] = (v[ch * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    Ok(RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer matches dimensions"))
}

pub fn load_png(path: &Path) -> Result<Tensor> {
    rgb_to_tensor(&read_rgb(path)?)
}

pub fn save_png(path: &Path, x: &Tensor) -> Result<()> {
    tensor_to_rgb(x)?
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Io(std::io::Error::other(format!("{}: {e}", path.display()))))
}

/// PNG files in `dir`, sorted by name.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| ingestion(dir, e.to_string()))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry?.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png && path.is_file() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Images held in memory for training and evaluation.
#[derive(Debug, Clone, Default)]
pub struct ImageSet {
    images: Vec<(String, RgbImage)>,
}

impl ImageSet {
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let paths = list_pngs(dir)?;
        if paths.is_empty() {
            return Err(ingestion(dir, "no PNG files found"));
        }
        let images = paths
            .iter()
            .map(|p| {
                let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                Ok((name, read_rgb(p)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { images })
    }

    pub fn from_images(images: Vec<(String, RgbImage)>) -> Self {
        Self { images }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &RgbImage)> {
        self.images.iter().map(|(n, i)| (n.as_str(), i))
    }

    /// Splits off the last `n` images.
    pub fn split_tail(mut self, n: usize) -> (Self, Self) {
        let tail = self.images.split_off(self.images.len().saturating_sub(n));
        (self, Self { images: tail })
    }

    /// Random `crop x crop` patches with random horizontal flips,
    /// `(batch, 3, crop, crop)`.
    pub fn random_batch(&self, rng: &mut impl Rng, batch: usize, crop: usize) -> Result<Tensor> {
        if self.images.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        let mut planar = vec![0f32; batch * 3 * crop * crop];
        for b in 0..batch {
            let (name, img) = &self.images[rng.random_range(0..self.images.len())];
            let (w, h) = (img.width() as usize, img.height() as usize);
            if w < crop || h < crop {
                return Err(Error::Ingestion {
                    path: PathBuf::from(name),
                    reason: format!("{w}x{h} image is smaller than the {crop}px crop"),
                });
            }
            let x0 = rng.random_range(0..=w - crop);
            let y0 = rng.random_range(0..=h - crop);
            let flip = rng.random_bool(0.5);
            let base = b * 3 * crop * crop;
            for y in 0..crop {
                for x in 0..crop {
                    let sx = if flip { x0 + crop - 1 - x } else { x0 + x };
                    let px = img.get_pixel(sx as u32, (y0 + y) as u32);
                    for c in 0..3 {
                        planar[base + c * crop * crop + y * crop + x] = px[c] as f32 / 255.0;
                    }
                }
            }
        }
        Ok(Tensor::from_vec(planar, (batch, 3, crop, crop), &Device::Cpu)?)
    }
}

/// Renders one synthetic test image: a smooth colour gradient with
/// overlapping rectangles, discs, sinusoidal textures and mild noise.
pub fn synthetic_image(rng: &mut impl Rng, width: u32, height: u32) -> RgbImage {
    let (w, h) = (width as f32, height as f32);
    let mut px: Vec<[f32; 3]> = Vec::with_capacity((width * height) as usize);
    let c0: [f32; 3] = [rng.random(), rng.random(), rng.random()];
    let c1: [f32; 3] = [rng.random(), rng.random(), rng.random()];
    let angle: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let (ca, sa) = (angle.cos(), angle.sin());
    for y in 0..height {
        for x in 0..width {
            let t = (((x as f32 / w - 0.5) * ca + (y as f32 / h - 0.5) * sa) + 0.71) / 1.42;
            px.push(std::array::from_fn(|c| c0[c] * (1.0 - t) + c1[c] * t));
        }
    }
    let shapes = rng.random_range(2..6);
    for _ in 0..shapes {
        let colour: [f32; 3] = [rng.random(), rng.random(), rng.random()];
        let cx = rng.random_range(0.0..w);
        let cy = rng.random_range(0.0..h);
        let r = rng.random_range(0.08..0.35) * w.min(h);
        let kind = rng.random_range(0..3);
        let (freq, phase) = (rng.random_range(0.2..1.2f32), rng.random_range(0.0..6.3f32));
        for y in 0..height {
            for x in 0..width {
                let (dx, dy) = (x as f32 - cx, y as f32 - cy);
                let inside = match kind {
                    0 => dx.abs() < r && dy.abs() < 0.6 * r,
                    1 => dx * dx + dy * dy < r * r,
                    _ => dx.abs() + dy.abs() < r,
                };
                if inside {
                    let p = &mut px[(y * width + x) as usize];
                    let texture = if kind == 2 {
                        0.5 + 0.5 * (freq * (x as f32 + y as f32) + phase).sin()
                    } else {
                        1.0
                    };
                    for c in 0..3 {
                        p[c] = colour[c] * texture + p[c] * (1.0 - texture) * 0.3;
                    }
                }
            }
        }
    }
    let noise = rng.random_range(0.0..0.04f32);
    let mut img = RgbImage::new(width, height);
    for (i, p) in img.pixels_mut().enumerate() {
        for c in 0..3 {
            let n = (rng.random::<f32>() - 0.5) * 2.0 * noise;
            p[c] = ((px[i][c] + n).clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    img
}

/// `count` synthetic images of `size x size` from `seed`.
pub fn synthetic_set(count: usize, size: u32, seed: u64) -> ImageSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = (0..count)
        .map(|i| (format!("synthetic_{i:04}.png"), synthetic_image(&mut rng, size, size)))
        .collect();
    ImageSet::from_images(images)
}

/// Directory for rendered datasets: `$BGVAE_CACHE`, else a folder under the
/// system temp dir.
pub fn cache_dir() -> PathBuf {
    std::env::var_os(CACHE_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("bgvae-cache"))
}

/// Writes the synthetic set as PNGs under the cache directory, reusing an
/// existing render, and returns its path.
pub fn cached_synthetic_dir(count: usize, size: u32, seed: u64) -> Result<PathBuf> {
    let dir = cache_dir().join(format!("synthetic-n{count}-s{size}-seed{seed}"));
    if dir.is_dir() && list_pngs(&dir)?.len() == count {
        return Ok(dir);
    }
    let tmp = dir.with_extension(format!("tmp{}", std::process::id()));
    std::fs::create_dir_all(&tmp)?;
    for (name, img) in synthetic_set(count, size, seed).iter() {
        img.save_with_format(tmp.join(name), image::ImageFormat::Png)
            .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    }
    if dir.exists() {
        std::fs::remove_dir_all(&dir)?;
    }
    std::fs::rename(&tmp, &dir)?;
    Ok(dir)
}
