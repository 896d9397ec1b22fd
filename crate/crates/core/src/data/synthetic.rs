//! Synthetic multimodal dialogues whose gold responses need both modalities.
//!
//! A conversation opens with a user turn naming a product keyword, may
//! continue with a system turn carrying distractor images, and ends with a
//! user query showing zero or more product images. The response is
//! `here is the <keyword> [in <attr>...]`, where the attributes are those of
//! the query images in ascending id order. The keyword only appears in the
//! oldest turn's text and the attributes only in the query's image
//! features, so a model must carry history across turns and read images.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, weighted::WeightedIndex};
use serde::{Deserialize, Serialize};

use super::corpus::{CorpusSplits, DialogueSample, Speaker, Split, Utterance};
use super::vocab::{Vocabulary, EOS, RESERVED};
use crate::error::{Error, Result};

const COLORS: [&str; 16] = [
    "red", "blue", "green", "black", "white", "yellow", "pink", "purple", "orange", "brown", "grey", "navy", "beige",
    "maroon", "teal", "olive",
];

const PRODUCTS: [&str; 32] = [
    "shirt", "shoe", "jacket", "dress", "bag", "hat", "scarf", "belt", "watch", "sandal", "boot", "skirt", "coat",
    "sweater", "jeans", "sneaker", "blazer", "vest", "glove", "sock", "tie", "hoodie", "cardigan", "legging", "loafer",
    "heel", "clutch", "wallet", "backpack", "bracelet", "necklace", "ring",
];

const TEMPLATE: [&str; 4] = ["here", "is", "the", "in"];

const MIN_FILLERS: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub vocab_size: usize,
    pub n_attributes: usize,
    pub n_keywords: usize,
    pub d_img: usize,
    /// Probability of 0, 1, 2, … context turns before the query.
    pub context_weights: Vec<f64>,
    /// Probability of 0, 1, 2, … images in the query.
    pub image_weights: Vec<f64>,
    /// Upper bound on distractor images in the system turn.
    pub max_distractors: usize,
    pub min_fillers: usize,
    pub max_fillers: usize,
    /// Standard deviation of Gaussian noise added to codebook vectors.
    pub image_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            vocab_size: 200,
            n_attributes: 16,
            n_keywords: 32,
            d_img: 64,
            context_weights: vec![0.15, 0.35, 0.5],
            image_weights: vec![0.15, 0.35, 0.3, 0.2],
            max_distractors: 2,
            min_fillers: 2,
            max_fillers: 5,
            image_noise: 0.05,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let needed = RESERVED.len() + self.n_attributes + self.n_keywords + TEMPLATE.len() + MIN_FILLERS;
        if needed > self.vocab_size {
            return Err(Error::config(format!(
                "{} attributes and {} keywords do not fit a vocabulary of {}",
                self.n_attributes, self.n_keywords, self.vocab_size
            )));
        }
        if self.n_attributes == 0 || self.n_keywords == 0 || self.d_img == 0 {
            return Err(Error::config("attributes, keywords and d_img must be positive"));
        }
        if self.image_weights.len() > self.n_attributes + 1 {
            return Err(Error::config("more query images than distinct attributes"));
        }
        for w in [&self.context_weights, &self.image_weights] {
            if w.is_empty() || w.iter().any(|&x| !(x >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
                return Err(Error::config("weights must be non-negative with a positive sum"));
            }
        }
        if self.min_fillers == 0 || self.min_fillers > self.max_fillers {
            return Err(Error::config("filler range must satisfy 1 <= min <= max"));
        }
        if !(self.image_noise >= 0.0) {
            return Err(Error::config("image noise must be non-negative"));
        }
        Ok(())
    }

    /// Longest utterance or response the generator can emit.
    pub fn max_sequence_len(&self) -> usize {
        let response = TEMPLATE.len() + self.image_weights.len() + 1;
        response.max(self.max_fillers + 1)
    }
}

/// The generator's fixed world: vocabulary layout and image codebook.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorld {
    pub spec: SyntheticSpec,
    pub vocab: Vocabulary,
    /// One `d_img` vector per attribute, in attribute-id order.
    pub codebook: Vec<Vec<f64>>,
}

impl SyntheticWorld {
    pub fn new(spec: SyntheticSpec) -> Result<Self> {
        spec.validate()?;
        let mut words: Vec<String> = Vec::new();
        words.extend((0..spec.n_attributes).map(|i| COLORS.get(i).map_or(format!("attr{i}"), |s| s.to_string())));
        words.extend((0..spec.n_keywords).map(|i| PRODUCTS.get(i).map_or(format!("item{i}"), |s| s.to_string())));
        words.extend(TEMPLATE.iter().map(|s| s.to_string()));
        let n_fill = spec.vocab_size - RESERVED.len() - words.len();
        words.extend((0..n_fill).map(|i| format!("w{i:03}")));
        let vocab = Vocabulary::new(&words)?;

        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0xC0DE_B00C);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let codebook = (0..64)
            .map(|_| {
                (0..spec.n_attributes)
                    .map(|_| (0..spec.d_img).map(|_| normal.sample(&mut rng)).collect::<Vec<f64>>())
                    .collect::<Vec<_>>()
            })
            .find(|cb| min_normalized_distance(cb) > 0.5)
            .ok_or_else(|| Error::config("could not draw a well-separated codebook; increase d_img"))?;
        Ok(SyntheticWorld { spec, vocab, codebook })
    }

    pub fn attribute_id(&self, a: usize) -> u32 {
        (RESERVED.len() + a) as u32
    }

    pub fn keyword_id(&self, k: usize) -> u32 {
        (RESERVED.len() + self.spec.n_attributes + k) as u32
    }

    fn template_id(&self, t: usize) -> u32 {
        (RESERVED.len() + self.spec.n_attributes + self.spec.n_keywords + t) as u32
    }

    fn filler_range(&self) -> std::ops::Range<u32> {
        self.template_id(TEMPLATE.len())..self.spec.vocab_size as u32
    }

    pub fn is_keyword(&self, id: u32) -> bool {
        (self.keyword_id(0)..self.keyword_id(self.spec.n_keywords)).contains(&id)
    }

    pub fn is_attribute(&self, id: u32) -> bool {
        (self.attribute_id(0)..self.attribute_id(self.spec.n_attributes)).contains(&id)
    }

    /// Codebook vector for an attribute word such as `red`.
    pub fn attribute_feature(&self, word: &str) -> Option<&[f64]> {
        let id = self.vocab.id(word)?;
        self.is_attribute(id)
            .then(|| self.codebook[(id - self.attribute_id(0)) as usize].as_slice())
    }

    /// Attribute index of the codebook entry closest to `feature`.
    pub fn nearest_attribute(&self, feature: &[f64]) -> usize {
        let dist = |c: &Vec<f64>| c.iter().zip(feature).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        (0..self.codebook.len())
            .min_by(|&a, &b| dist(&self.codebook[a]).total_cmp(&dist(&self.codebook[b])))
            .expect("non-empty codebook")
    }

    /// Gold response for a keyword and a set of attribute indices.
    pub fn response(&self, keyword: usize, attributes: &[usize]) -> Vec<u32> {
        let mut out = vec![self.template_id(0), self.template_id(1), self.template_id(2), self.keyword_id(keyword)];
        let mut attrs = attributes.to_vec();
        attrs.sort_unstable();
        attrs.dedup();
        if !attrs.is_empty() {
            out.push(self.template_id(3));
            out.extend(attrs.iter().map(|&a| self.attribute_id(a)));
        }
        out.push(EOS);
        out
    }

    fn image(&self, rng: &mut ChaCha8Rng, attribute: usize) -> Vec<f64> {
        let noise = Normal::new(0.0, self.spec.image_noise).expect("non-negative noise");
        self.codebook[attribute].iter().map(|&x| x + noise.sample(rng)).collect()
    }

    fn fillers(&self, rng: &mut ChaCha8Rng) -> Vec<u32> {
        let n = rng.random_range(self.spec.min_fillers..=self.spec.max_fillers);
        let range = self.filler_range();
        (0..n).map(|_| rng.random_range(range.clone())).collect()
    }

    /// Generates sample `id`. Each sample has its own RNG stream, so
    /// samples can be produced independently and in any order.
    pub fn sample(&self, id: u64) -> DialogueSample {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.spec.seed, id));
        let n_ctx = WeightedIndex::new(&self.spec.context_weights)
            .expect("validated weights")
            .sample(&mut rng);
        let n_img = WeightedIndex::new(&self.spec.image_weights)
            .expect("validated weights")
            .sample(&mut rng);
        let keyword = rng.random_range(0..self.spec.n_keywords);
        let attrs: Vec<usize> = rand::seq::index::sample(&mut rng, self.spec.n_attributes, n_img).into_vec();

        let with_keyword = |rng: &mut ChaCha8Rng| {
            let mut t = self.fillers(rng);
            let at = rng.random_range(0..=t.len());
            t.insert(at, self.keyword_id(keyword));
            t
        };

        let mut context = Vec::new();
        if n_ctx >= 1 {
            context.push(Utterance::new(Speaker::User, with_keyword(&mut rng), Vec::new()));
        }
        for _ in 1..n_ctx {
            let n_distract = rng.random_range(0..=self.spec.max_distractors);
            let images = (0..n_distract)
                .map(|_| {
                    let a = rng.random_range(0..self.spec.n_attributes);
                    self.image(&mut rng, a)
                })
                .collect::<Vec<_>>();
            let tokens = if !images.is_empty() && rng.random_bool(0.2) {
                Vec::new()
            } else {
                self.fillers(&mut rng)
            };
            context.push(Utterance::new(Speaker::System, tokens, images));
        }
        let query_tokens = if n_ctx == 0 {
            with_keyword(&mut rng)
        } else {
            self.fillers(&mut rng)
        };
        let mut shown = attrs.clone();
        shown.shuffle(&mut rng);
        let images = shown.iter().map(|&a| self.image(&mut rng, a)).collect();
        DialogueSample {
            id,
            context,
            query: Utterance::new(Speaker::User, query_tokens, images),
            response: self.response(keyword, &attrs),
            conversation_start: true,
        }
    }

    /// Generates `n` samples and splits them 80/10/10 by a seeded hash of
    /// the sample id.
    pub fn generate(&self, n: usize) -> Result<CorpusSplits> {
        if n == 0 {
            return Err(Error::config("n_samples must be at least 1"));
        }
        let samples = crate::parallel::Exec::default().map(&(0..n as u64).collect::<Vec<_>>(), |&id| self.sample(id));
        let mut splits = CorpusSplits::default();
        for s in samples {
            match split_of(self.spec.seed, s.id) {
                Split::Train => splits.train.push(s),
                Split::Valid => splits.valid.push(s),
                Split::Test => splits.test.push(s),
            }
        }
        Ok(splits)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

/// Rule-based responder that reads the generator's latent structure back
/// out of a sample: the keyword from the oldest turn and the attributes
/// from the nearest codebook entries of the query images.
pub struct OracleResponder<'w> {
    world: &'w SyntheticWorld,
}

impl<'w> OracleResponder<'w> {
    pub fn new(world: &'w SyntheticWorld) -> Self {
        OracleResponder { world }
    }

    pub fn respond(&self, sample: &DialogueSample) -> Vec<u32> {
        let oldest = sample.context.first().unwrap_or(&sample.query);
        let keyword = oldest
            .tokens
            .iter()
            .find(|&&t| self.world.is_keyword(t))
            .map_or(0, |&t| (t - self.world.keyword_id(0)) as usize);
        let attrs: Vec<usize> = sample
            .query
            .image_features
            .iter()
            .map(|f| self.world.nearest_attribute(f))
            .collect();
        self.world.response(keyword, &attrs)
    }
}

/// File name of the serialized world inside a corpus directory.
pub const WORLD_FILE: &str = "synthetic.json";

pub fn split_of(seed: u64, id: u64) -> Split {
    match mix(seed ^ 0x5EED_5917, id) % 10 {
        0..=7 => Split::Train,
        8 => Split::Valid,
        _ => Split::Test,
    }
}

/// splitmix64 finaliser over `seed + id`.
fn mix(seed: u64, id: u64) -> u64 {
    let mut z = seed.wrapping_add(id.wrapping_mul(0x9E37_79B9_7F4A_7C15)).wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Smallest pairwise L2 distance after scaling every vector to unit norm.
pub fn min_normalized_distance(vectors: &[Vec<f64>]) -> f64 {
    let unit: Vec<Vec<f64>> = vectors
        .iter()
        .map(|v| {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            v.iter().map(|x| x / n).collect()
        })
        .collect();
    let mut best = f64::INFINITY;
    for i in 0..unit.len() {
        for j in i + 1..unit.len() {
            let d = unit[i].iter().zip(&unit[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            best = best.min(d);
        }
    }
    best
}
