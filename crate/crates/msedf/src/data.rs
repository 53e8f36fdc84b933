//! Captions, vocabulary, dataset splits, and a synthetic dataset generator.
//!
//! The captions file is UTF-8 JSON:
//!
//! ```json
//! {"images": [{"id": "img0", "split": "train", "captions": ["...", 5 total]}]}
//! ```
//!
//! Feature files use the MSEF format from [`crate::fusion`]. The synthetic
//! generator produces a caption file plus two feature files whose captions
//! are deterministic functions of latent image attributes, so the mapping is
//! learnable at desk scale without any licensed dataset.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::FeatureStore;

pub const PAD_ID: usize = 0;
pub const START_ID: usize = 1;
pub const END_ID: usize = 2;
pub const UNK_ID: usize = 3;

pub const PAD_TOKEN: &str = "<pad>";
pub const START_TOKEN: &str = "<start>";
pub const END_TOKEN: &str = "<end>";
pub const UNK_TOKEN: &str = "<unk>";

/// Lowercase, split on whitespace, strip ASCII punctuation except hyphens
/// between word characters. Deterministic; empty input gives an empty list.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for word in text.split_whitespace() {
        let lowered = word.to_lowercase();
        let kept: String = lowered
            .chars()
            .filter(|c| !c.is_ascii_punctuation() || *c == '-')
            .collect();
        // drop hyphens that are not between word characters
        let cleaned = kept
            .split('-')
            .filter(|seg| !seg.is_empty())
            .collect::<Vec<_>>()
            .join("-");
        if !cleaned.is_empty() {
            tokens.push(cleaned);
        }
    }
    tokens
}

/// Token/id bijection with the four reserved specials at ids 0..=3.
///
/// `size()` counts every id except pad, so the model's output width is
/// `size() + 1`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocabulary {
    /// Build from non-special tokens already in their final id order.
    pub fn from_ordered_tokens(words: impl IntoIterator<Item = String>) -> Result<Vocabulary> {
        let mut tokens = vec![
            PAD_TOKEN.to_string(),
            START_TOKEN.to_string(),
            END_TOKEN.to_string(),
            UNK_TOKEN.to_string(),
        ];
        tokens.extend(words);
        let mut index = BTreeMap::new();
        for (id, tok) in tokens.iter().enumerate() {
            if index.insert(tok.clone(), id).is_some() {
                return Err(Error::InvalidConfig(format!(
                    "duplicate vocabulary token `{tok}`"
                )));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    /// Ids in use, excluding pad. The decoder output width is this plus one.
    pub fn size(&self) -> usize {
        self.tokens.len() - 1
    }

    /// All ids including pad: embedding rows and softmax width.
    pub fn total(&self) -> usize {
        self.tokens.len()
    }

    pub fn id_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token_of(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(|s| s.as_str())
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// `start + ids + end`, unk for out-of-vocabulary words, right-padded to
    /// `max_len + 2`. Overlong captions are truncated so the end token is
    /// kept.
    pub fn encode(&self, text: &str, max_len: usize) -> Result<Vec<usize>> {
        if max_len < 1 {
            return Err(Error::InvalidConfig("max_len must be at least 1".to_string()));
        }
        let words = tokenize(text);
        let mut ids = Vec::with_capacity(max_len + 2);
        ids.push(START_ID);
        for w in words.iter().take(max_len) {
            ids.push(self.id_of(w).unwrap_or(UNK_ID));
        }
        ids.push(END_ID);
        ids.resize(max_len + 2, PAD_ID);
        Ok(ids)
    }

    /// Tokens for the given ids, with pad/start/end stripped.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .filter(|&&id| id != PAD_ID && id != START_ID && id != END_ID)
            .filter_map(|&id| self.token_of(id))
            .map(|s| s.to_string())
            .collect()
    }

    /// FNV-1a over the token list, for checkpoint/dataset consistency checks.
    pub fn hash64(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for tok in &self.tokens {
            for b in tok.as_bytes() {
                h ^= *b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
            h ^= 0xff;
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Vocabulary> {
        if tokens.len() < 4
            || tokens[PAD_ID] != PAD_TOKEN
            || tokens[START_ID] != START_TOKEN
            || tokens[END_ID] != END_TOKEN
            || tokens[UNK_ID] != UNK_TOKEN
        {
            return Err(Error::InvalidConfig(
                "vocabulary must begin with the four special tokens".to_string(),
            ));
        }
        Vocabulary::from_ordered_tokens(tokens.into_iter().skip(4))
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Vec<String> {
        v.tokens
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One image's split assignment and its five reference captions.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CaptionRecord {
    #[serde(rename = "id")]
    pub image_id: String,
    pub split: Split,
    pub captions: [String; 5],
}

#[derive(Serialize, Deserialize)]
struct CaptionFile {
    images: Vec<CaptionRecord>,
}

pub fn load_captions(path: impl AsRef<Path>) -> Result<Vec<CaptionRecord>> {
    let text = std::fs::read_to_string(path)?;
    let file: CaptionFile = serde_json::from_str(&text)?;
    let mut seen = BTreeMap::new();
    for rec in &file.images {
        if seen.insert(rec.image_id.clone(), ()).is_some() {
            return Err(Error::Dataset(format!(
                "image id `{}` appears more than once in the caption file",
                rec.image_id
            )));
        }
    }
    Ok(file.images)
}

pub fn save_captions(path: impl AsRef<Path>, records: &[CaptionRecord]) -> Result<()> {
    let file = CaptionFile {
        images: records.to_vec(),
    };
    let mut text = serde_json::to_string_pretty(&file)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Tokens with training-corpus frequency >= `min_count`, ordered by
/// (frequency desc, token asc) after the specials. Only the train split
/// contributes.
pub fn build_vocab(records: &[CaptionRecord], min_count: usize) -> Result<Vocabulary> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut any_train = false;
    for rec in records.iter().filter(|r| r.split == Split::Train) {
        any_train = true;
        for caption in &rec.captions {
            for tok in tokenize(caption) {
                *counts.entry(tok).or_insert(0) += 1;
            }
        }
    }
    if !any_train {
        return Err(Error::EmptyInput("build_vocab training records"));
    }
    let mut entries: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(_, c)| *c >= min_count)
        .collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Vocabulary::from_ordered_tokens(entries.into_iter().map(|(t, _)| t))
}

/// One image with its raw captions and their encoded forms.
#[derive(Clone, Debug)]
pub struct DatasetImage {
    pub image_id: String,
    pub captions: [String; 5],
    pub encoded: Vec<Vec<usize>>,
}

/// The three aligned splits plus everything needed to train and evaluate.
#[derive(Debug)]
pub struct Dataset {
    pub vocab: Vocabulary,
    /// Token budget used for encoding; every encoded caption has length
    /// `max_len + 2`.
    pub max_len: usize,
    pub store_a: FeatureStore,
    pub store_b: FeatureStore,
    pub train: Vec<DatasetImage>,
    pub val: Vec<DatasetImage>,
    pub test: Vec<DatasetImage>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[DatasetImage] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn fused_input_dim(&self) -> usize {
        self.store_a.dim() + self.store_b.dim()
    }
}

/// Load captions and both feature stores, build the vocabulary from the train
/// split, and encode every caption to a shared padded length.
pub fn load_dataset(
    captions_path: impl AsRef<Path>,
    features_a_path: impl AsRef<Path>,
    features_b_path: impl AsRef<Path>,
    min_count: usize,
) -> Result<Dataset> {
    let records = load_captions(captions_path)?;
    let store_a = FeatureStore::load(features_a_path)?;
    let store_b = FeatureStore::load(features_b_path)?;

    let missing: Vec<String> = records
        .iter()
        .filter(|r| store_a.get(&r.image_id).is_none() || store_b.get(&r.image_id).is_none())
        .map(|r| r.image_id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Dataset(format!(
            "caption ids missing from the feature stores: {}",
            missing.join(", ")
        )));
    }

    let vocab = build_vocab(&records, min_count)?;
    let max_len = records
        .iter()
        .flat_map(|r| r.captions.iter())
        .map(|c| tokenize(c).len())
        .max()
        .unwrap_or(1)
        .max(1);

    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    for rec in records {
        let encoded = rec
            .captions
            .iter()
            .map(|c| vocab.encode(c, max_len))
            .collect::<Result<Vec<_>>>()?;
        let image = DatasetImage {
            image_id: rec.image_id,
            captions: rec.captions,
            encoded,
        };
        match rec.split {
            Split::Train => train.push(image),
            Split::Val => val.push(image),
            Split::Test => test.push(image),
        }
    }
    Ok(Dataset {
        vocab,
        max_len,
        store_a,
        store_b,
        train,
        val,
        test,
    })
}

fn default_scenes() -> Vec<String> {
    ["airport", "harbor", "forest", "meadow", "river", "city"]
        .map(String::from)
        .to_vec()
}

fn default_objects() -> Vec<String> {
    ["planes", "ships", "trees", "houses", "cars", "roads"]
        .map(String::from)
        .to_vec()
}

fn default_counts() -> Vec<String> {
    ["one", "two", "three", "many"].map(String::from).to_vec()
}

fn default_sizes() -> Vec<String> {
    ["small", "large"].map(String::from).to_vec()
}

fn default_noise() -> f64 {
    0.01
}

/// Recipe for a synthetic dataset. Each image draws latent attributes
/// (scene, object, count bucket, size); the attributes are linearly embedded
/// into both feature streams with a little noise and rendered into five
/// templated captions, so features predict captions by construction.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_train: usize,
    pub num_val: usize,
    pub num_test: usize,
    pub feature_dim_a: usize,
    pub feature_dim_b: usize,
    pub scene_words: Vec<String>,
    pub object_words: Vec<String>,
    pub count_words: Vec<String>,
    pub size_words: Vec<String>,
    /// How many of the five caption templates to use (1..=5); the remaining
    /// slots repeat the used templates. With 1, each image carries five
    /// copies of a single deterministic caption, which removes the
    /// caption-choice entropy from the teacher-forcing loss.
    pub distinct_captions: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_train: 16,
            num_val: 2,
            num_test: 2,
            feature_dim_a: 8,
            feature_dim_b: 8,
            scene_words: default_scenes(),
            object_words: default_objects(),
            count_words: default_counts(),
            size_words: default_sizes(),
            distinct_captions: 5,
            noise: default_noise(),
            seed: 7,
        }
    }
}

/// Per-image latent attributes, exposed for test oracles.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ImageAttributes {
    pub scene: usize,
    pub object: usize,
    pub count: usize,
    pub size: usize,
}

/// A generated dataset before it is written to disk.
pub struct SyntheticData {
    pub records: Vec<CaptionRecord>,
    pub store_a: FeatureStore,
    pub store_b: FeatureStore,
    pub attributes: Vec<(String, ImageAttributes)>,
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    if spec.scene_words.is_empty()
        || spec.object_words.is_empty()
        || spec.count_words.is_empty()
        || spec.size_words.is_empty()
    {
        return Err(Error::InvalidConfig(
            "synthetic word pools must be non-empty".to_string(),
        ));
    }
    if spec.feature_dim_a < 4 || spec.feature_dim_b < 4 {
        return Err(Error::InvalidConfig(
            "synthetic feature dims must be at least 4 to embed the attributes".to_string(),
        ));
    }
    if !(1..=5).contains(&spec.distinct_captions) {
        return Err(Error::InvalidConfig(
            "distinct_captions must be in 1..=5".to_string(),
        ));
    }
    let mut rng: ChaCha8Rng = rand::SeedableRng::seed_from_u64(spec.seed);

    // stream-specific linear maps from the 4 attribute codes
    let map_a: Vec<f64> = (0..spec.feature_dim_a * 4)
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    let map_b: Vec<f64> = (0..spec.feature_dim_b * 4)
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();

    let total = spec.num_train + spec.num_val + spec.num_test;
    let mut records = Vec::with_capacity(total);
    let mut store_a = FeatureStore::new("synth-a", spec.feature_dim_a);
    let mut store_b = FeatureStore::new("synth-b", spec.feature_dim_b);
    let mut attributes = Vec::with_capacity(total);

    for i in 0..total {
        let image_id = format!("img{i:04}");
        let attrs = ImageAttributes {
            scene: rng.gen_range(0..spec.scene_words.len()),
            object: rng.gen_range(0..spec.object_words.len()),
            count: rng.gen_range(0..spec.count_words.len()),
            size: rng.gen_range(0..spec.size_words.len()),
        };
        let code = [
            (attrs.scene + 1) as f64,
            (attrs.object + 1) as f64,
            (attrs.count + 1) as f64,
            (attrs.size + 1) as f64,
        ];
        let feat = |map: &[f64], dim: usize, rng: &mut ChaCha8Rng| -> Vec<f32> {
            (0..dim)
                .map(|r| {
                    let clean: f64 = (0..4).map(|c| map[r * 4 + c] * code[c]).sum();
                    (clean + rng.gen_range(-spec.noise..spec.noise)) as f32
                })
                .collect()
        };
        store_a.insert(&image_id, feat(&map_a, spec.feature_dim_a, &mut rng))?;
        store_b.insert(&image_id, feat(&map_b, spec.feature_dim_b, &mut rng))?;

        let scene = &spec.scene_words[attrs.scene];
        let object = &spec.object_words[attrs.object];
        let count = &spec.count_words[attrs.count];
        let size = &spec.size_words[attrs.size];
        let templates = [
            format!("a {size} {scene} with {count} {object}"),
            format!("the {scene} shows {count} {object}"),
            format!("{count} {object} near the {size} {scene}"),
            format!("this {scene} view has {count} {object}"),
            format!("an aerial view of the {size} {scene}"),
        ];
        let captions: [String; 5] =
            std::array::from_fn(|slot| templates[slot % spec.distinct_captions].clone());
        let split = if i < spec.num_train {
            Split::Train
        } else if i < spec.num_train + spec.num_val {
            Split::Val
        } else {
            Split::Test
        };
        records.push(CaptionRecord {
            image_id: image_id.clone(),
            split,
            captions,
        });
        attributes.push((image_id, attrs));
    }

    Ok(SyntheticData {
        records,
        store_a,
        store_b,
        attributes,
    })
}

/// Generate and write `captions.json`, `features_a.msef`, and
/// `features_b.msef` under `dir`. Returns the three paths.
pub fn write_synthetic(spec: &SyntheticSpec, dir: impl AsRef<Path>) -> Result<[PathBuf; 3]> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let data = generate_synthetic(spec)?;
    let captions = dir.join("captions.json");
    let features_a = dir.join("features_a.msef");
    let features_b = dir.join("features_b.msef");
    save_captions(&captions, &data.records)?;
    data.store_a.save(&features_a)?;
    data.store_b.save(&features_b)?;
    Ok([captions, features_a, features_b])
}
