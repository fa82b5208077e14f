//! Dataset preparation: sketches, reference retrieval and training examples.
//!
//! A prepared dataset directory looks like
//!
//! ```text
//! images/<id>.png      resized source images
//! sketches/<id>.png    binary edge sketches (0 or 255)
//! index.json           embeddings and neighbor lists
//! ```
//!
//! Everything under it can be regenerated from the source images.

pub mod edges;
pub mod embed;
pub mod index;
pub mod toy;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use edges::{binarize, extract_sketch, EdgePlugin, GradientEdges, DEFAULT_THRESHOLD};
pub use embed::{EmbeddingPlugin, RandomProjection};
pub use index::{ReferenceIndex, DEFAULT_K};

use crate::error::{RegoError, Result};
use crate::imageio::{ImageSample, Sketch};
use crate::tensor::Tensor;

/// One training tuple. `reference_right` always comes from a different image.
#[derive(Clone, Debug)]
pub struct TrainingExample {
    pub left: Tensor,
    pub sketch_right: Sketch,
    pub reference_right: Tensor,
    pub groundtruth: ImageSample,
    pub reference_id: String,
}

/// Builds a training example, drawing the reference uniformly among the sample's stored neighbors.
pub fn make_training_example<'a>(
    sample: &ImageSample,
    sketch: &Sketch,
    index: &ReferenceIndex,
    lookup: impl Fn(&str) -> Option<&'a ImageSample>,
    rng: &mut ChaCha8Rng,
) -> Result<TrainingExample> {
    let left = sample.left_half()?;
    if sketch.height() != sample.height() || sketch.width() != sample.width() {
        return Err(RegoError::Shape(format!(
            "sketch {}x{} does not match image `{}` {}x{}",
            sketch.height(),
            sketch.width(),
            sample.id,
            sample.height(),
            sample.width()
        )));
    }
    let neighbors = index.neighbors(&sample.id)?;
    let pick = neighbors[rng.gen_range(0..neighbors.len())];
    let reference = lookup(pick).ok_or_else(|| RegoError::NotFound(format!("reference image `{pick}`")))?;
    if reference.height() != sample.height() || reference.width() != sample.width() {
        return Err(RegoError::Shape(format!(
            "reference `{pick}` size differs from `{}`",
            sample.id
        )));
    }
    Ok(TrainingExample {
        left,
        sketch_right: sketch.right_half()?,
        reference_right: reference.right_half()?,
        groundtruth: sample.clone(),
        reference_id: pick.to_string(),
    })
}

/// Drops each 8-connected stroke of the sketch independently with probability `p`.
pub fn augment_sketch(sketch: &Sketch, p: f64, rng: &mut ChaCha8Rng) -> Sketch {
    let (h, w) = (sketch.height(), sketch.width());
    let mut label = vec![usize::MAX; h * w];
    let mut out = sketch.mask().clone();
    let mut stack = Vec::new();
    for start in 0..h * w {
        if label[start] != usize::MAX || !sketch.get(start / w, start % w) {
            continue;
        }
        let mut members = Vec::new();
        label[start] = start;
        stack.push(start);
        while let Some(i) = stack.pop() {
            members.push(i);
            let (y, x) = ((i / w) as isize, (i % w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if label[j] == usize::MAX && sketch.get(ny as usize, nx as usize) {
                        label[j] = start;
                        stack.push(j);
                    }
                }
            }
        }
        if rng.gen_bool(p) {
            for i in members {
                out.data_mut()[i] = 0.0;
            }
        }
    }
    Sketch::new(out).expect("subset of a binary mask is binary")
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PrepareConfig {
    pub threshold: f64,
    pub k: usize,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
}

impl Default for PrepareConfig {
    fn default() -> Self {
        PrepareConfig {
            threshold: DEFAULT_THRESHOLD,
            k: DEFAULT_K,
            seed: 0,
            height: 64,
            width: 128,
        }
    }
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| RegoError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
                Some("png" | "jpg" | "jpeg")
            )
        })
        .collect();
    paths.sort();
    Ok(paths)
}

/// Resizes, sketches and indexes every image of `images_dir` into `out_dir`.
pub fn prepare_dataset(images_dir: &Path, out_dir: &Path, cfg: &PrepareConfig) -> Result<Dataset> {
    if cfg.width % 2 != 0 || cfg.width == 0 || cfg.height == 0 {
        return Err(RegoError::Config(format!(
            "target size {}x{} needs a positive even width",
            cfg.height, cfg.width
        )));
    }
    let paths = list_images(images_dir)?;
    if paths.is_empty() {
        return Err(RegoError::Config(format!("no PNG/JPEG images in {}", images_dir.display())));
    }
    let mut samples = Vec::with_capacity(paths.len());
    for path in &paths {
        let img = image::open(path)?.to_rgb8();
        let img = if img.dimensions() != (cfg.width as u32, cfg.height as u32) {
            image::imageops::resize(&img, cfg.width as u32, cfg.height as u32, image::imageops::FilterType::Triangle)
        } else {
            img
        };
        let id = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        samples.push(ImageSample::from_rgb(id, &img));
    }
    let detector = GradientEdges;
    let sketches = samples
        .iter()
        .map(|s| extract_sketch(s, &detector, cfg.threshold))
        .collect::<Result<Vec<_>>>()?;
    let embedder = RandomProjection::new(cfg.seed);
    let index = ReferenceIndex::build(&samples, &embedder, cfg.k)?;
    let dataset = Dataset::new(samples, sketches, index)?;
    dataset.save(out_dir)?;
    Ok(dataset)
}

/// Images, their sketches and the reference index, loaded together.
#[derive(Clone, Debug)]
pub struct Dataset {
    samples: Vec<ImageSample>,
    sketches: Vec<Sketch>,
    index: ReferenceIndex,
    by_id: BTreeMap<String, usize>,
}

impl Dataset {
    pub fn new(samples: Vec<ImageSample>, sketches: Vec<Sketch>, index: ReferenceIndex) -> Result<Self> {
        if samples.len() != sketches.len() {
            return Err(RegoError::Shape("one sketch per image is required".into()));
        }
        let by_id: BTreeMap<String, usize> = samples.iter().enumerate().map(|(i, s)| (s.id.clone(), i)).collect();
        for id in index.ids() {
            if !by_id.contains_key(id) {
                return Err(RegoError::NotFound(format!("indexed id `{id}` has no image")));
            }
        }
        Ok(Dataset {
            samples,
            sketches,
            index,
            by_id,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[ImageSample] {
        &self.samples
    }

    pub fn sketch(&self, i: usize) -> &Sketch {
        &self.sketches[i]
    }

    pub fn index(&self) -> &ReferenceIndex {
        &self.index
    }

    pub fn get(&self, id: &str) -> Option<&ImageSample> {
        self.by_id.get(id).map(|&i| &self.samples[i])
    }

    pub fn resolution(&self) -> Option<(usize, usize)> {
        self.samples.first().map(|s| (s.height(), s.width()))
    }

    pub fn example(&self, i: usize, rng: &mut ChaCha8Rng) -> Result<TrainingExample> {
        let sample = self
            .samples
            .get(i)
            .ok_or_else(|| RegoError::NotFound(format!("sample {i}")))?;
        make_training_example(sample, &self.sketches[i], &self.index, |id| self.get(id), rng)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        for sub in ["images", "sketches"] {
            let d = dir.join(sub);
            std::fs::create_dir_all(&d).map_err(|e| RegoError::io(&d, e))?;
        }
        for (s, k) in self.samples.iter().zip(&self.sketches) {
            s.to_rgb().save(dir.join("images").join(format!("{}.png", s.id)))?;
            k.to_gray().save(dir.join("sketches").join(format!("{}.png", s.id)))?;
        }
        self.index.save(&dir.join("index.json"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let index = ReferenceIndex::load(&dir.join("index.json"))?;
        let mut samples = Vec::with_capacity(index.len());
        let mut sketches = Vec::with_capacity(index.len());
        for id in index.ids() {
            let mut sample = ImageSample::load(&dir.join("images").join(format!("{id}.png")))?;
            sample.id = id.clone();
            let gray = image::open(dir.join("sketches").join(format!("{id}.png")))?.to_luma8();
            sketches.push(Sketch::from_gray(&gray, 0.5));
            samples.push(sample);
        }
        Self::new(samples, sketches, index)
    }
}
