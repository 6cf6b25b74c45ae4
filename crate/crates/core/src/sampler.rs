//! DDIM generation conditioned on prompt + prior-sampled style: synthetic
//! dataset production, style-sweep grids, and the seeded replication
//! protocol.

use std::path::Path;

use rand_distr::Distribution;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{derive_seed, seed_rng};
use crate::dataprep::model_to_rgb;
use crate::error::{Error, Result};
use crate::model::StyleDiffusion;
use crate::schedule::{ddim_step, Image};
use crate::stylecodec::{prior_sample, StyleLatent};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationSpec {
    pub n_per_class: usize,
    /// Standard deviation of the style prior; 0 collapses style to zero.
    pub sigma_style: f64,
    pub inference_steps: usize,
    pub seed: u64,
    /// Prompt ids, one per class.
    pub classes: Vec<String>,
}

impl Default for GenerationSpec {
    fn default() -> Self {
        Self {
            n_per_class: 30,
            sigma_style: 0.5,
            inference_steps: 50,
            seed: 0,
            classes: vec![
                "class0".to_string(),
                "class1".to_string(),
                "class2".to_string(),
            ],
        }
    }
}

impl GenerationSpec {
    pub fn validate(&self, t_max: usize) -> Result<()> {
        if self.n_per_class == 0 {
            return Err(Error::config("n_per_class", "must be >= 1"));
        }
        if self.sigma_style < 0.0 {
            return Err(Error::config("sigma_style", "must be >= 0"));
        }
        if self.inference_steps == 0 || self.inference_steps > t_max {
            return Err(Error::config(
                "inference_steps",
                format!("must lie in [1, {t_max}]"),
            ));
        }
        if self.classes.is_empty() {
            return Err(Error::config("classes", "must be nonempty"));
        }
        Ok(())
    }
}

/// Per-image manifest record (JSON-lines on disk).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestRecord {
    pub path: String,
    pub class: String,
    pub seed: u64,
    pub index: usize,
    pub sigma_style: f64,
    pub style_hash: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SynthManifest {
    pub sigma_style: f64,
    pub n_per_class: usize,
    pub records: Vec<ManifestRecord>,
}

impl SynthManifest {
    /// Class counts must equal `n_per_class` exactly.
    pub fn validate_balance(&self) -> Result<()> {
        for class in self.classes() {
            let count = self.records.iter().filter(|r| r.class == class).count();
            if count != self.n_per_class {
                return Err(Error::config(
                    "manifest",
                    format!("class {class} has {count} records, expected {}", self.n_per_class),
                ));
            }
        }
        Ok(())
    }

    pub fn classes(&self) -> Vec<String> {
        let mut out = Vec::new();
        for r in &self.records {
            if !out.contains(&r.class) {
                out.push(r.class.clone());
            }
        }
        out
    }
}

/// An in-memory generated sample.
#[derive(Debug, Clone)]
pub struct GeneratedImage {
    pub image: Image,
    pub class: String,
    pub index: usize,
    pub style: StyleLatent,
}

pub fn style_hash(style: &StyleLatent) -> String {
    let mut hasher = Sha256::new();
    for v in style.0.iter() {
        hasher.update(v.to_le_bytes());
    }
    let digest = hasher.finalize();
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

pub fn image_hash(img: &Image) -> String {
    let mut hasher = Sha256::new();
    for v in img.iter() {
        hasher.update(v.to_le_bytes());
    }
    let digest = hasher.finalize();
    digest[..16].iter().map(|b| format!("{b:02x}")).collect()
}

/// Uniformly spaced descending timestep grid from T down to 0 (inclusive),
/// deduplicated when `steps` exceeds T.
pub fn ddim_grid(t_max: usize, steps: usize) -> Vec<usize> {
    let mut grid: Vec<usize> = (0..=steps).rev().map(|k| t_max * k / steps).collect();
    grid.dedup();
    grid
}

/// Run the deterministic reverse chain for a batch sharing one prompt class.
fn run_chain(
    model: &StyleDiffusion,
    mut xs: Vec<Image>,
    prompt_id: &str,
    styles: &[StyleLatent],
    steps: usize,
) -> Result<Vec<Image>> {
    let grid = ddim_grid(model.schedule().len(), steps);
    let ids: Vec<&str> = vec![prompt_id; xs.len()];
    for w in grid.windows(2) {
        let ts = vec![w[0]; xs.len()];
        let vs = model.predict_v_images(&xs, &ts, &ids, styles)?;
        let mut next = Vec::with_capacity(xs.len());
        for (x, v) in xs.iter().zip(vs.iter()) {
            next.push(ddim_step(x, v, w[0], w[1], model.schedule())?);
        }
        xs = next;
    }
    for x in xs.iter_mut() {
        x.mapv_inplace(|v| v.clamp(-1.0, 1.0));
    }
    Ok(xs)
}

/// Initial noise and style for one (seed, class, index) — the determinism
/// contract: these three values fully define the output image.
fn draw_inputs(
    model: &StyleDiffusion,
    seed: u64,
    class: &str,
    index: usize,
    sigma_style: f64,
) -> Result<(Image, StyleLatent)> {
    let cfg = &model.config().denoiser;
    let mut rng = seed_rng(seed, &format!("gen/{class}/{index}"));
    let shape = (cfg.in_channels, cfg.resolution, cfg.resolution);
    let x_t = Image::from_shape_fn(shape, |_| {
        rand_distr::StandardNormal.sample(&mut rng)
    });
    let style = prior_sample(sigma_style, cfg.d_style, &mut rng)?;
    Ok((x_t, style))
}

const CHAIN_BATCH: usize = 64;

/// Generate `n_per_class` images per class, in memory.
pub fn generate_images(spec: &GenerationSpec, model: &StyleDiffusion) -> Result<Vec<GeneratedImage>> {
    spec.validate(model.schedule().len())?;
    for class in &spec.classes {
        if !model.prompts().contains(class) {
            return Err(Error::UnregisteredPrompt(class.clone()));
        }
    }
    let mut out = Vec::with_capacity(spec.classes.len() * spec.n_per_class);
    for class in &spec.classes {
        let mut index = 0usize;
        while index < spec.n_per_class {
            let chunk = CHAIN_BATCH.min(spec.n_per_class - index);
            let mut xs = Vec::with_capacity(chunk);
            let mut styles = Vec::with_capacity(chunk);
            for i in 0..chunk {
                let (x, s) = draw_inputs(model, spec.seed, class, index + i, spec.sigma_style)?;
                xs.push(x);
                styles.push(s);
            }
            let images = run_chain(model, xs, class, &styles, spec.inference_steps)?;
            for (i, image) in images.into_iter().enumerate() {
                out.push(GeneratedImage {
                    image,
                    class: class.clone(),
                    index: index + i,
                    style: styles[i].clone(),
                });
            }
            index += chunk;
        }
    }
    Ok(out)
}

/// Generate to disk: 8-bit PNGs plus a JSONL manifest under `out_dir`.
pub fn generate(
    spec: &GenerationSpec,
    model: &StyleDiffusion,
    out_dir: &Path,
) -> Result<SynthManifest> {
    let images = generate_images(spec, model)?;
    std::fs::create_dir_all(out_dir)?;
    let mut records = Vec::with_capacity(images.len());
    for g in &images {
        let sub = out_dir.join(&g.class);
        std::fs::create_dir_all(&sub)?;
        let fname = format!("{:05}.png", g.index);
        model_to_rgb(&g.image)?.save(sub.join(&fname))?;
        records.push(ManifestRecord {
            path: format!("{}/{fname}", g.class),
            class: g.class.clone(),
            seed: spec.seed,
            index: g.index,
            sigma_style: spec.sigma_style,
            style_hash: style_hash(&g.style),
        });
    }
    let manifest = SynthManifest {
        sigma_style: spec.sigma_style,
        n_per_class: spec.n_per_class,
        records,
    };
    manifest.validate_balance()?;
    let mut lines = String::new();
    for r in &manifest.records {
        lines.push_str(&serde_json::to_string(r)?);
        lines.push('\n');
    }
    std::fs::write(out_dir.join("manifest.jsonl"), lines)?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<SynthManifest> {
    let text = std::fs::read_to_string(path)?;
    let mut records = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str::<ManifestRecord>(line)?);
    }
    if records.is_empty() {
        return Err(Error::config("manifest", "no records"));
    }
    let sigma_style = records[0].sigma_style;
    let classes: Vec<String> = {
        let mut c = Vec::new();
        for r in &records {
            if !c.contains(&r.class) {
                c.push(r.class.clone());
            }
        }
        c
    };
    let n_per_class = records.len() / classes.len();
    Ok(SynthManifest {
        sigma_style,
        n_per_class,
        records,
    })
}

/// m x m grid over two style coordinates with all other coordinates zero and
/// the initial noise held fixed. Uses the index-0 noise stream of `seed`, so
/// a single grid point at (0, 0) reproduces `generate` with sigma = 0.
pub fn style_sweep(
    model: &StyleDiffusion,
    prompt_id: &str,
    fixed_noise_seed: u64,
    dims: (usize, usize),
    grid: &[f32],
    inference_steps: usize,
) -> Result<Vec<Image>> {
    let d_style = model.d_style();
    if dims.0 == dims.1 {
        return Err(Error::config("dims", "the two swept coordinates must differ"));
    }
    if dims.0 >= d_style || dims.1 >= d_style {
        return Err(Error::config(
            "dims",
            format!("coordinates must be < d_style = {d_style}"),
        ));
    }
    if grid.is_empty() {
        return Err(Error::config("grid", "must be nonempty"));
    }
    if !model.prompts().contains(prompt_id) {
        return Err(Error::UnregisteredPrompt(prompt_id.to_string()));
    }
    let (x_t, _) = draw_inputs(model, fixed_noise_seed, prompt_id, 0, 0.0)?;

    let mut xs = Vec::with_capacity(grid.len() * grid.len());
    let mut styles = Vec::with_capacity(grid.len() * grid.len());
    for &a in grid {
        for &b in grid {
            let mut s = StyleLatent::zeros(d_style);
            s.0[dims.0] = a;
            s.0[dims.1] = b;
            styles.push(s);
            xs.push(x_t.clone());
        }
    }
    let mut out = Vec::with_capacity(xs.len());
    let mut start = 0usize;
    while start < xs.len() {
        let end = (start + CHAIN_BATCH).min(xs.len());
        let images = run_chain(
            model,
            xs[start..end].to_vec(),
            prompt_id,
            &styles[start..end],
            inference_steps,
        )?;
        out.extend(images);
        start = end;
    }
    Ok(out)
}

/// `n_runs` independently seeded generations; run r uses the stream
/// `replicate/r` derived from the base seed.
pub fn replicate_protocol(
    model: &StyleDiffusion,
    n_runs: usize,
    base: &GenerationSpec,
    out_root: &Path,
) -> Result<Vec<SynthManifest>> {
    if n_runs == 0 {
        return Err(Error::config("n_runs", "must be >= 1"));
    }
    let mut manifests = Vec::with_capacity(n_runs);
    for r in 0..n_runs {
        let spec = GenerationSpec {
            seed: derive_seed(base.seed, &format!("replicate/{r}")),
            ..base.clone()
        };
        let dir = out_root.join(format!("run{r:02}"));
        manifests.push(generate(&spec, model, &dir)?);
    }
    let total: usize = manifests.iter().map(|m| m.records.len()).sum();
    let expect = n_runs * base.classes.len() * base.n_per_class;
    if total != expect {
        return Err(Error::config(
            "replicate",
            format!("{total} records, expected {expect}"),
        ));
    }
    Ok(manifests)
}
