//! Image preparation: the aperture-isolation pipeline (threshold, largest
//! component, exact Euclidean distance transform, maximal inscribed circle,
//! mask/crop/resize) and the deterministic toy renderer + splits that stand
//! in for a clinical dataset.

use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::seed_rng;
use crate::error::{Error, Result};
use crate::schedule::Image;

/// Binarization threshold on the 0..255 luma scale; a pixel is foreground
/// when its luma is >= this value (inclusive).
pub const APERTURE_THRESHOLD: f32 = 26.0;

/// Documented bounds for the class2 dark-region area, as a fraction of R^2
/// (ellipse axes 0.40R*s x 0.30R*s with s in [0.75, 1.25], soft edges).
pub const HOLE_AREA_MIN_FRAC: f64 = 0.15;
pub const HOLE_AREA_MAX_FRAC: f64 = 0.65;

pub fn luma(px: &Rgb<u8>) -> f32 {
    0.299 * px.0[0] as f32 + 0.587 * px.0[1] as f32 + 0.114 * px.0[2] as f32
}

/// Exact squared Euclidean distance transform (two-pass lower-envelope
/// algorithm). `site[i]` true marks distance-zero cells; the grid is treated
/// as surrounded by sites so distances never exceed the frame.
pub fn squared_edt(site: &[bool], width: usize, height: usize) -> Vec<f64> {
    const INF: f64 = 1e20;
    // pad with a one-pixel ring of sites
    let (w, h) = (width + 2, height + 2);
    let mut f = vec![0.0f64; w * h];
    for y in 0..h {
        for x in 0..w {
            let border = x == 0 || y == 0 || x == w - 1 || y == h - 1;
            let is_site = border || site[(y - 1) * width + (x - 1)];
            f[y * w + x] = if is_site { 0.0 } else { INF };
        }
    }

    fn transform_1d(f: &[f64], d: &mut [f64]) {
        let n = f.len();
        let mut v = vec![0usize; n];
        let mut z = vec![0.0f64; n + 1];
        let mut k = 0usize;
        v[0] = 0;
        z[0] = -INF;
        z[1] = INF;
        for q in 1..n {
            let mut s;
            loop {
                let p = v[k];
                s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64);
                if s <= z[k] {
                    if k == 0 {
                        break;
                    }
                    k -= 1;
                } else {
                    break;
                }
            }
            if s > z[k] {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = INF;
            }
        }
        let mut k = 0usize;
        for q in 0..n {
            while z[k + 1] < q as f64 {
                k += 1;
            }
            let p = v[k];
            let dq = q as f64 - p as f64;
            d[q] = dq * dq + f[p];
        }
    }

    // columns then rows
    let mut tmp = vec![0.0f64; w * h];
    let mut col_in = vec![0.0f64; h];
    let mut col_out = vec![0.0f64; h];
    for x in 0..w {
        for y in 0..h {
            col_in[y] = f[y * w + x];
        }
        transform_1d(&col_in, &mut col_out);
        for y in 0..h {
            tmp[y * w + x] = col_out[y];
        }
    }
    let mut out_padded = vec![0.0f64; w * h];
    let mut row_out = vec![0.0f64; w];
    for y in 0..h {
        transform_1d(&tmp[y * w..(y + 1) * w], &mut row_out);
        out_padded[y * w..(y + 1) * w].copy_from_slice(&row_out);
    }

    // unpad
    let mut out = vec![0.0f64; width * height];
    for y in 0..height {
        for x in 0..width {
            out[y * width + x] = out_padded[(y + 1) * w + (x + 1)];
        }
    }
    out
}

/// Largest 8-connected foreground component; ties resolved by scan order.
fn largest_component(fg: &[bool], width: usize, height: usize) -> Option<Vec<bool>> {
    let mut label = vec![0u32; width * height];
    let mut best_size = 0usize;
    let mut best_label = 0u32;
    let mut next = 1u32;
    let mut stack = Vec::new();
    for start in 0..width * height {
        if !fg[start] || label[start] != 0 {
            continue;
        }
        let cur = next;
        next += 1;
        let mut size = 0usize;
        stack.push(start);
        label[start] = cur;
        while let Some(idx) = stack.pop() {
            size += 1;
            let (x, y) = (idx % width, idx / width);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx < 0 || ny < 0 || nx >= width as i64 || ny >= height as i64 {
                        continue;
                    }
                    let nidx = ny as usize * width + nx as usize;
                    if fg[nidx] && label[nidx] == 0 {
                        label[nidx] = cur;
                        stack.push(nidx);
                    }
                }
            }
        }
        if size > best_size {
            best_size = size;
            best_label = cur;
        }
    }
    if best_size == 0 {
        return None;
    }
    Some(label.iter().map(|&l| l == best_label).collect())
}

/// Result of the aperture-isolation pipeline.
pub struct ApertureResult {
    /// Center of the maximal inscribed circle, pixel coordinates (x, y).
    pub center: (u32, u32),
    /// Radius of the maximal inscribed circle, pixels.
    pub radius: f32,
    /// Full-resolution binary mask of the filled disc (255 inside).
    pub mask: GrayImage,
    /// Masked, cropped, and resized image at the target resolution.
    pub cropped: RgbImage,
}

/// Grayscale -> threshold (>= 26) -> largest 8-connected component -> exact
/// EDT -> maximal inscribed circle -> disc mask -> crop to the disc's
/// bounding box (clipped to frame) -> resize (bilinear image, nearest mask).
pub fn isolate_aperture(img: &RgbImage, target: u32) -> Result<ApertureResult> {
    let (width, height) = (img.width() as usize, img.height() as usize);
    if width == 0 || height == 0 {
        return Err(Error::NoAperture);
    }
    let fg: Vec<bool> = img.pixels().map(|p| luma(p) >= APERTURE_THRESHOLD).collect();
    let component = largest_component(&fg, width, height).ok_or(Error::NoAperture)?;
    if component.iter().filter(|&&b| b).count() < 2 {
        return Err(Error::NoAperture);
    }

    // distance from component pixels to nearest non-component pixel
    let bg: Vec<bool> = component.iter().map(|&c| !c).collect();
    let dist2 = squared_edt(&bg, width, height);

    let mut best = 0.0f64;
    let mut center = (0usize, 0usize);
    for y in 0..height {
        for x in 0..width {
            let d = dist2[y * width + x];
            if d > best {
                best = d;
                center = (x, y);
            }
        }
    }
    if best <= 0.0 {
        return Err(Error::NoAperture);
    }
    let radius = best.sqrt() as f32;
    let (cx, cy) = (center.0 as i64, center.1 as i64);
    let r2 = best;

    let mut mask = GrayImage::new(width as u32, height as u32);
    for y in 0..height {
        for x in 0..width {
            let dx = x as i64 - cx;
            let dy = y as i64 - cy;
            if ((dx * dx + dy * dy) as f64) <= r2 {
                mask.put_pixel(x as u32, y as u32, Luma([255u8]));
            }
        }
    }

    let mut masked = RgbImage::new(width as u32, height as u32);
    for (x, y, px) in img.enumerate_pixels() {
        if mask.get_pixel(x, y).0[0] > 0 {
            masked.put_pixel(x, y, *px);
        }
    }

    let r = radius.floor() as i64;
    let x0 = (cx - r).max(0) as u32;
    let y0 = (cy - r).max(0) as u32;
    let x1 = (cx + r).min(width as i64 - 1) as u32;
    let y1 = (cy + r).min(height as i64 - 1) as u32;
    let (cw, ch) = (x1 - x0 + 1, y1 - y0 + 1);
    let crop = image::imageops::crop_imm(&masked, x0, y0, cw, ch).to_image();
    let mask_crop = image::imageops::crop_imm(&mask, x0, y0, cw, ch).to_image();

    let resized = image::imageops::resize(&crop, target, target, FilterType::Triangle);
    let mask_resized = image::imageops::resize(&mask_crop, target, target, FilterType::Nearest);
    let mut cropped = RgbImage::new(target, target);
    for (x, y, px) in resized.enumerate_pixels() {
        if mask_resized.get_pixel(x, y).0[0] > 0 {
            cropped.put_pixel(x, y, *px);
        }
    }

    Ok(ApertureResult {
        center: (center.0 as u32, center.1 as u32),
        radius,
        mask,
        cropped,
    })
}

// ---------------------------------------------------------------------------
// Toy dataset
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyClass {
    /// Plain membrane disc.
    Class0,
    /// Disc with an amber gradient blob.
    Class1,
    /// Disc with a dark elliptical hole.
    Class2,
}

impl ToyClass {
    pub fn all() -> [ToyClass; 3] {
        [ToyClass::Class0, ToyClass::Class1, ToyClass::Class2]
    }

    pub fn prompt_id(&self) -> &'static str {
        match self {
            ToyClass::Class0 => "class0",
            ToyClass::Class1 => "class1",
            ToyClass::Class2 => "class2",
        }
    }

    pub fn index(&self) -> usize {
        match self {
            ToyClass::Class0 => 0,
            ToyClass::Class1 => 1,
            ToyClass::Class2 => 2,
        }
    }

    pub fn from_index(i: usize) -> Result<ToyClass> {
        match i {
            0 => Ok(ToyClass::Class0),
            1 => Ok(ToyClass::Class1),
            2 => Ok(ToyClass::Class2),
            _ => Err(Error::config("class", format!("no class with index {i}"))),
        }
    }

    pub fn from_prompt_id(id: &str) -> Result<ToyClass> {
        match id {
            "class0" => Ok(ToyClass::Class0),
            "class1" => Ok(ToyClass::Class1),
            "class2" => Ok(ToyClass::Class2),
            _ => Err(Error::UnregisteredPrompt(id.to_string())),
        }
    }
}

/// Hidden style factors. They modulate hue, texture, and lesion placement
/// but never the class-determining geometry.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Nuisance {
    /// Warm/cool tint of the membrane, in [-0.5, 0.5].
    pub hue: f32,
    /// Phase of the fiber texture (and hole rotation), in [0, 2*pi).
    pub texture_phase: f32,
    /// Lesion center offset relative to the aperture radius, in [-0.25, 0.25].
    pub lesion_dx: f32,
    pub lesion_dy: f32,
    /// Lesion size multiplier, in [0.75, 1.25].
    pub lesion_scale: f32,
}

impl Nuisance {
    pub fn neutral() -> Self {
        Self {
            hue: 0.0,
            texture_phase: 0.0,
            lesion_dx: 0.0,
            lesion_dy: 0.0,
            lesion_scale: 1.0,
        }
    }

    pub fn sample<R: Rng>(rng: &mut R) -> Self {
        Self {
            hue: rng.gen_range(-0.5..=0.5),
            texture_phase: rng.gen_range(0.0..std::f32::consts::TAU),
            lesion_dx: rng.gen_range(-0.25..=0.25),
            lesion_dy: rng.gen_range(-0.25..=0.25),
            lesion_scale: rng.gen_range(0.75..=1.25),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("hue", self.hue, -0.5, 0.5),
            ("texture_phase", self.texture_phase, 0.0, std::f32::consts::TAU),
            ("lesion_dx", self.lesion_dx, -0.25, 0.25),
            ("lesion_dy", self.lesion_dy, -0.25, 0.25),
            ("lesion_scale", self.lesion_scale, 0.75, 1.25),
        ];
        for (name, v, lo, hi) in checks {
            if !(lo..=hi).contains(&v) {
                return Err(Error::config(
                    name,
                    format!("{v} outside [{lo}, {hi}]"),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ToySample {
    pub image: RgbImage,
    pub class_label: ToyClass,
    pub nuisance: Nuisance,
}

fn smoothstep(lo: f32, hi: f32, v: f32) -> f32 {
    let t = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Deterministic render of one toy sample: a bright circular aperture on a
/// black frame containing the class-specific primitive. 2x2 supersampled.
pub fn render_toy(class: ToyClass, nuisance: &Nuisance, resolution: u32) -> Result<ToySample> {
    nuisance.validate()?;
    if resolution < 8 {
        return Err(Error::config("resolution", "must be >= 8"));
    }
    let res = resolution as f32;
    let cx = res / 2.0;
    let cy = res / 2.0;
    let radius = 0.46 * res;

    let lesion_cx = cx + nuisance.lesion_dx * radius * 1.4;
    let lesion_cy = cy + nuisance.lesion_dy * radius * 1.4;
    let blob_r = 0.50 * radius * nuisance.lesion_scale;
    let hole_a = 0.40 * radius * nuisance.lesion_scale;
    let hole_b = 0.30 * radius * nuisance.lesion_scale;
    let hole_rot = nuisance.texture_phase;

    let shade_at = |px: f32, py: f32| -> [f32; 3] {
        let dx = px - cx;
        let dy = py - cy;
        let d = (dx * dx + dy * dy).sqrt();
        let dn = d / radius;
        if dn > 1.0 {
            return [0.0, 0.0, 0.0];
        }
        // membrane base with warm/cool tint
        let h = nuisance.hue;
        let mut r = 0.70 + 0.22 * h;
        let mut g = 0.56 + 0.06 * h;
        let mut b = 0.48 - 0.20 * h;

        // radial shading and fiber texture
        let angle = dy.atan2(dx);
        let shade = 1.0 - 0.38 * dn * dn;
        let fibers = 1.0
            + 0.05 * (6.0 * angle + nuisance.texture_phase).sin()
            + 0.03 * (14.0 * dn + 2.0 * nuisance.texture_phase).sin();
        r *= shade * fibers;
        g *= shade * fibers;
        b *= shade * fibers;

        // fixed light reflex (not a nuisance factor)
        let lx = cx - 0.30 * radius;
        let ly = cy - 0.30 * radius;
        let ld2 = ((px - lx).powi(2) + (py - ly).powi(2)) / (0.14 * radius).powi(2);
        let gleam = 0.30 * (-ld2).exp();
        r += gleam;
        g += gleam;
        b += gleam;

        match class {
            ToyClass::Class0 => {}
            ToyClass::Class1 => {
                // amber gradient blob behind the membrane
                let bd2 = ((px - lesion_cx).powi(2) + (py - lesion_cy).powi(2)) / (blob_r * blob_r);
                let alpha = 0.85 * (-2.0 * bd2).exp();
                r = r * (1.0 - alpha) + 0.88 * alpha;
                g = g * (1.0 - alpha) + 0.58 * alpha;
                b = b * (1.0 - alpha) + 0.18 * alpha;
            }
            ToyClass::Class2 => {
                // dark elliptical hole with a soft rim
                let (sin_t, cos_t) = hole_rot.sin_cos();
                let ex = (px - lesion_cx) * cos_t + (py - lesion_cy) * sin_t;
                let ey = -(px - lesion_cx) * sin_t + (py - lesion_cy) * cos_t;
                let e = (ex / hole_a).powi(2) + (ey / hole_b).powi(2);
                let alpha = 1.0 - smoothstep(0.85, 1.1, e);
                r = r * (1.0 - alpha) + 0.07 * alpha;
                g = g * (1.0 - alpha) + 0.05 * alpha;
                b = b * (1.0 - alpha) + 0.06 * alpha;
            }
        }

        // soften the aperture rim over ~1.5 px
        let rim = 1.0 - smoothstep(radius - 1.5, radius, d);
        [r * rim, g * rim, b * rim]
    };

    let mut img = RgbImage::new(resolution, resolution);
    for y in 0..resolution {
        for x in 0..resolution {
            let mut acc = [0.0f32; 3];
            for (sx, sy) in [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)] {
                let c = shade_at(x as f32 + sx, y as f32 + sy);
                acc[0] += c[0];
                acc[1] += c[1];
                acc[2] += c[2];
            }
            let px = Rgb([
                ((acc[0] / 4.0).clamp(0.0, 1.0) * 255.0).round() as u8,
                ((acc[1] / 4.0).clamp(0.0, 1.0) * 255.0).round() as u8,
                ((acc[2] / 4.0).clamp(0.0, 1.0) * 255.0).round() as u8,
            ]);
            img.put_pixel(x, y, px);
        }
    }
    Ok(ToySample {
        image: img,
        class_label: class,
        nuisance: *nuisance,
    })
}

// ---------------------------------------------------------------------------
// Model-space conversion
// ---------------------------------------------------------------------------

/// 8-bit RGB -> (3, H, W) float in [-1, 1].
pub fn rgb_to_model(img: &RgbImage) -> Image {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Image::zeros((3, h, w));
    for (x, y, px) in img.enumerate_pixels() {
        for ch in 0..3 {
            out[[ch, y as usize, x as usize]] = px.0[ch] as f32 / 255.0 * 2.0 - 1.0;
        }
    }
    out
}

/// (3, H, W) float in [-1, 1] -> 8-bit RGB (values clamped).
pub fn model_to_rgb(img: &Image) -> Result<RgbImage> {
    let (c, h, w) = img.dim();
    if c != 3 {
        return Err(Error::dimension(format!("expected 3 channels, got {c}")));
    }
    let mut out = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = Rgb([
                (((img[[0, y, x]].clamp(-1.0, 1.0) + 1.0) / 2.0) * 255.0).round() as u8,
                (((img[[1, y, x]].clamp(-1.0, 1.0) + 1.0) / 2.0) * 255.0).round() as u8,
                (((img[[2, y, x]].clamp(-1.0, 1.0) + 1.0) / 2.0) * 255.0).round() as u8,
            ]);
            out.put_pixel(x as u32, y as u32, px);
        }
    }
    Ok(out)
}

/// Standardize one rendered/generated frame: aperture isolation followed by
/// conversion to model space.
pub fn standardize(raw: &RgbImage, target: u32) -> Result<Image> {
    let res = isolate_aperture(raw, target)?;
    Ok(rgb_to_model(&res.cropped))
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Total rendered samples per class; split 3:1:1 into train/val/test.
    pub n_per_class: usize,
    /// Resolution the toy frames are rendered at, before standardization.
    pub raw_resolution: u32,
    /// Standardized (model) resolution.
    pub resolution: u32,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_per_class: 150,
            raw_resolution: 64,
            resolution: 32,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SplitItem {
    pub image: Image,
    pub class_label: ToyClass,
}

/// The three dataset splits: `train` feeds both the generative model and the
/// classifier (dataset 1A), `val` is validation only (1B), `test` is held
/// out from every kind of training (dataset 2).
#[derive(Debug, Clone, Default)]
pub struct ToySplits {
    pub train: Vec<SplitItem>,
    pub val: Vec<SplitItem>,
    pub test: Vec<SplitItem>,
}

impl ToySplits {
    pub fn of_class<'a>(items: &'a [SplitItem], class: ToyClass) -> Vec<&'a SplitItem> {
        items.iter().filter(|i| i.class_label == class).collect()
    }
}

/// Render, standardize, and split the toy dataset 3:1:1 per class.
pub fn build_splits(cfg: &DataConfig, seed: u64) -> Result<ToySplits> {
    if cfg.n_per_class == 0 || cfg.n_per_class % 5 != 0 {
        return Err(Error::config(
            "n_per_class",
            format!("{} not divisible into a 3:1:1 split", cfg.n_per_class),
        ));
    }
    let n_train = cfg.n_per_class / 5 * 3;
    let n_val = cfg.n_per_class / 5;
    let mut splits = ToySplits::default();
    for class in ToyClass::all() {
        let mut rng = seed_rng(seed, &format!("dataprep/{}", class.prompt_id()));
        let mut items = Vec::with_capacity(cfg.n_per_class);
        for _ in 0..cfg.n_per_class {
            let nuisance = Nuisance::sample(&mut rng);
            let sample = render_toy(class, &nuisance, cfg.raw_resolution)?;
            let image = standardize(&sample.image, cfg.resolution)?;
            items.push(SplitItem {
                image,
                class_label: class,
            });
        }
        // seeded shuffle, then contiguous 3:1:1 slices
        let mut order: Vec<usize> = (0..items.len()).collect();
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for (rank, &idx) in order.iter().enumerate() {
            let item = items[idx].clone();
            if rank < n_train {
                splits.train.push(item);
            } else if rank < n_train + n_val {
                splits.val.push(item);
            } else {
                splits.test.push(item);
            }
        }
    }
    Ok(splits)
}

// ---------------------------------------------------------------------------
// Disk form (used by the CLI): PNG files plus JSONL manifests
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitRecord {
    pub path: String,
    pub class: String,
    pub split: String,
}

/// Write split images and one JSONL manifest per split under `dir`.
pub fn write_splits(splits: &ToySplits, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut produced = Vec::new();
    for (name, items) in [
        ("dataset1a", &splits.train),
        ("dataset1b", &splits.val),
        ("dataset2", &splits.test),
    ] {
        let sub = dir.join(name);
        std::fs::create_dir_all(&sub)?;
        let manifest_path = dir.join(format!("{name}.jsonl"));
        let mut lines = String::new();
        for (i, item) in items.iter().enumerate() {
            let fname = format!("{}_{:05}.png", item.class_label.prompt_id(), i);
            let path = sub.join(&fname);
            model_to_rgb(&item.image)?.save(&path)?;
            let record = SplitRecord {
                path: format!("{name}/{fname}"),
                class: item.class_label.prompt_id().to_string(),
                split: name.to_string(),
            };
            lines.push_str(&serde_json::to_string(&record)?);
            lines.push('\n');
        }
        std::fs::write(&manifest_path, lines)?;
        produced.push(manifest_path);
    }
    Ok(produced)
}

/// Load a split back from its JSONL manifest.
pub fn load_split(dir: &Path, manifest: &Path) -> Result<Vec<SplitItem>> {
    let text = std::fs::read_to_string(manifest)?;
    let mut out = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let record: SplitRecord = serde_json::from_str(line)?;
        let img = image::open(dir.join(&record.path))?.to_rgb8();
        out.push(SplitItem {
            image: rgb_to_model(&img),
            class_label: ToyClass::from_prompt_id(&record.class)?,
        });
    }
    Ok(out)
}
