//! Seeded generator for desk-scale corpora with planted topics.
//!
//! Each topic owns a disjoint pool of words. An image draws one or two
//! topics and, per topic, three "object" words from its pool. Captions
//! list the object words under a handful of fixed orderings. Grid cells hold
//! noisy topic + object signatures; the global feature is a noisier
//! topic-indicator embedding with a weaker object component.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::features::{write_tensor, ImageFeatures};
use super::manifest::{Annotation, CorpusManifest, ImageEntry, Split};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_images: usize,
    pub n_topics: usize,
    /// Total content words, split evenly across topic pools.
    pub vocab_size: usize,
    pub grid_n: usize,
    pub d_fc: usize,
    pub d_loc: usize,
    pub seed: u64,
    pub captions_per_image: usize,
    pub objects_per_topic: usize,
    pub fc_noise: f64,
    pub grid_noise: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_images: 50,
            n_topics: 3,
            vocab_size: 15,
            grid_n: 4,
            d_fc: 32,
            d_loc: 24,
            seed: 7,
            captions_per_image: 5,
            objects_per_topic: 3,
            fc_noise: 0.3,
            grid_noise: 0.2,
        }
    }
}

/// A generated corpus plus its ground truth.
#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub manifest: CorpusManifest,
    pub features: Vec<ImageFeatures>,
    /// Planted topic indices per image, ascending.
    pub image_topics: Vec<Vec<usize>>,
    /// Object words per image.
    pub image_objects: Vec<Vec<String>>,
    /// Word pool of each topic.
    pub pools: Vec<Vec<String>>,
}

#[derive(Serialize, Deserialize)]
struct GroundTruth {
    image_topics: Vec<Vec<usize>>,
    image_objects: Vec<Vec<String>>,
    pools: Vec<Vec<String>>,
}

const MAX_REDRAWS: usize = 200;

fn gaussian(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Deterministic split: 70% train, 10% val, 20% test by image index.
pub fn split_for(index: usize) -> Split {
    match index % 10 {
        7 => Split::Val,
        8 | 9 => Split::Test,
        _ => Split::Train,
    }
}

pub fn synth_corpus(spec: &SynthSpec) -> Result<SynthCorpus> {
    let sizes = [
        spec.n_images,
        spec.n_topics,
        spec.vocab_size,
        spec.grid_n,
        spec.d_fc,
        spec.d_loc,
        spec.captions_per_image,
        spec.objects_per_topic,
    ];
    if sizes.contains(&0) {
        return Err(Error::contract(format!("all synth sizes must be ≥ 1: {spec:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let pool_size = (spec.vocab_size / spec.n_topics).max(1);
    let pools: Vec<Vec<String>> = (0..spec.n_topics)
        .map(|k| (0..pool_size).map(|j| format!("t{k}w{j}")).collect())
        .collect();

    let topic_fc: Vec<Vec<f64>> = (0..spec.n_topics).map(|_| gaussian(&mut rng, spec.d_fc, 1.0)).collect();
    let topic_loc: Vec<Vec<f64>> = (0..spec.n_topics)
        .map(|_| gaussian(&mut rng, spec.d_loc, 1.0))
        .collect();
    let word_fc: Vec<Vec<Vec<f64>>> = pools
        .iter()
        .map(|p| p.iter().map(|_| gaussian(&mut rng, spec.d_fc, 1.0)).collect())
        .collect();
    let word_loc: Vec<Vec<Vec<f64>>> = pools
        .iter()
        .map(|p| p.iter().map(|_| gaussian(&mut rng, spec.d_loc, 1.0)).collect())
        .collect();

    let mut images = Vec::with_capacity(spec.n_images);
    let mut annotations = Vec::new();
    let mut features = Vec::with_capacity(spec.n_images);
    let mut image_topics = Vec::with_capacity(spec.n_images);
    let mut image_objects = Vec::with_capacity(spec.n_images);

    let mut seen: BTreeSet<Vec<(usize, usize)>> = BTreeSet::new();
    for i in 0..spec.n_images {
        // redraw until the object set is new, while unused sets remain
        let draw = |rng: &mut ChaCha8Rng| {
            let n_img_topics = if spec.n_topics >= 2 && rng.gen_bool(0.5) { 2 } else { 1 };
            let mut topics: Vec<usize> = (0..spec.n_topics)
                .collect::<Vec<_>>()
                .choose_multiple(rng, n_img_topics)
                .copied()
                .collect();
            topics.sort_unstable();
            // (topic, word index) pairs
            let mut objects: Vec<(usize, usize)> = Vec::new();
            for &k in &topics {
                let take = spec.objects_per_topic.min(pool_size);
                let mut picks: Vec<usize> = (0..pool_size)
                    .collect::<Vec<_>>()
                    .choose_multiple(rng, take)
                    .copied()
                    .collect();
                picks.sort_unstable();
                objects.extend(picks.into_iter().map(|j| (k, j)));
            }
            (topics, objects)
        };
        let (mut topics, mut objects) = draw(&mut rng);
        for _ in 0..MAX_REDRAWS {
            if !seen.contains(&objects) {
                break;
            }
            (topics, objects) = draw(&mut rng);
        }
        seen.insert(objects.clone());
        let words: Vec<String> = objects.iter().map(|&(k, j)| pools[k][j].clone()).collect();

        let id = format!("img{i:05}");
        for c in 0..spec.captions_per_image {
            let mut order = words.clone();
            let shift = c % order.len();
            order.rotate_left(shift);
            if c % 2 == 1 {
                order.reverse();
            }
            annotations.push(Annotation {
                image_id: id.clone(),
                caption: order.join(" "),
            });
        }

        let mut fc = gaussian(&mut rng, spec.d_fc, spec.fc_noise);
        for &k in &topics {
            fc.iter_mut().zip(&topic_fc[k]).for_each(|(f, t)| *f += t);
        }
        for &(k, j) in &objects {
            fc.iter_mut().zip(&word_fc[k][j]).for_each(|(f, w)| *f += 0.5 * w);
        }

        let mut cells: Vec<usize> = (0..spec.grid_n).collect();
        cells.shuffle(&mut rng);
        let mut grid = gaussian(&mut rng, spec.grid_n * spec.d_loc, spec.grid_noise);
        for (slot, &(k, j)) in objects.iter().enumerate() {
            let cell = cells[slot % spec.grid_n];
            let row = &mut grid[cell * spec.d_loc..(cell + 1) * spec.d_loc];
            for ((g, t), w) in row.iter_mut().zip(&topic_loc[k]).zip(&word_loc[k][j]) {
                *g += 0.5 * t + w;
            }
        }

        // stored as f32 on disk; keep the in-memory copy identical
        fc.iter_mut()
            .chain(grid.iter_mut())
            .for_each(|v| *v = f64::from(*v as f32));
        features.push(ImageFeatures::new(
            Tensor::vector(fc)?,
            Tensor::matrix(spec.grid_n, spec.d_loc, grid)?,
        )?);
        images.push(ImageEntry {
            image_id: id.clone(),
            fc: format!("features/{id}.fc.ocf"),
            spatial: format!("features/{id}.spatial.ocf"),
            split: split_for(i),
        });
        image_topics.push(topics);
        image_objects.push(words);
    }

    Ok(SynthCorpus {
        manifest: CorpusManifest::new(images, annotations)?,
        features,
        image_topics,
        image_objects,
        pools,
    })
}

impl SynthCorpus {
    /// Writes `manifest.json`, one `OCF1` file per feature tensor, and
    /// `planted.json` with the ground truth.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (img, feats) in self.manifest.images.iter().zip(&self.features) {
            write_tensor(&dir.join(&img.fc), &feats.fc)?;
            write_tensor(&dir.join(&img.spatial), &feats.spatial)?;
        }
        self.manifest.save(&dir.join("manifest.json"))?;
        let truth = GroundTruth {
            image_topics: self.image_topics.clone(),
            image_objects: self.image_objects.clone(),
            pools: self.pools.clone(),
        };
        let path = dir.join("planted.json");
        fs::write(&path, serde_json::to_string_pretty(&truth).expect("serializes")).map_err(|e| Error::io(&path, e))
    }

    /// Captions per image in manifest order.
    pub fn captions(&self) -> Vec<Vec<&str>> {
        self.manifest.captions_by_image()
    }
}
