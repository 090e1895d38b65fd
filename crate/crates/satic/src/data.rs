//! Deterministic synthetic captioning corpus.
//!
//! Each item is a scene of 2..=6 objects (category, color, size, spatial
//! slot). Its five references are fixed syntactic template paraphrases
//! describing the two objects with the smallest slots, so every image has
//! genuinely multi-modal ground truth: the content is determined, the
//! phrasing is not. Region features are a seeded random projection of the
//! per-object one-hots plus Gaussian noise, one feature row per object.
//!
//! Everything is a pure function of `(seed, config)` through [`SplitMix64`]
//! (algorithm documented in [`crate::rng`]), drawn in a fixed order per item:
//! object count, then per object category/color/size, then the slot shuffle,
//! then noise row by row. Same seed, same bytes, any platform.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::RegionFeatures;
use crate::rng::SplitMix64;

pub const CATEGORIES: [&str; 40] = [
    "apple", "ball", "banana", "bear", "bench", "bike", "bird", "boat", "book", "bottle",
    "bowl", "box", "bus", "cake", "car", "cat", "chair", "clock", "cow", "cup",
    "dog", "drum", "duck", "fish", "flag", "fox", "frog", "horse", "kite", "lamp",
    "leaf", "lion", "owl", "pig", "plane", "sheep", "shoe", "star", "tree", "truck",
];

pub const COLORS: [&str; 8] = [
    "red", "blue", "green", "yellow", "black", "white", "orange", "purple",
];

pub const SIZES: [&str; 3] = ["small", "big", "giant"];

pub const N_SLOTS: usize = 6;

/// Width of the per-object one-hot (categories + colors + sizes + slots).
pub const ONE_HOT_DIM: usize = CATEGORIES.len() + COLORS.len() + SIZES.len() + N_SLOTS;

const MIN_OBJECTS: usize = 2;
const MAX_OBJECTS: usize = 6;
const PROJECTION_TAG: u64 = u64::MAX;

/// One object in a scene, all fields as indices into the word tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneObject {
    pub category: usize,
    pub color: usize,
    pub size: usize,
    pub slot: usize,
}

impl SceneObject {
    pub fn category_word(&self) -> &'static str {
        CATEGORIES[self.category]
    }

    pub fn color_word(&self) -> &'static str {
        COLORS[self.color]
    }

    pub fn size_word(&self) -> &'static str {
        SIZES[self.size]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
}

impl Scene {
    /// The two salient objects (smallest slots), in slot order. Captions
    /// describe exactly these two.
    pub fn mentioned(&self) -> (&SceneObject, &SceneObject) {
        let mut sorted: Vec<&SceneObject> = self.objects.iter().collect();
        sorted.sort_by_key(|o| o.slot);
        (sorted[0], sorted[1])
    }
}

/// The five reference paraphrases for a scene, in fixed template order.
pub fn caption_templates(scene: &Scene) -> [String; 5] {
    let (a, b) = scene.mentioned();
    [
        format!(
            "a {} {} and a {} {}",
            a.color_word(),
            a.category_word(),
            b.color_word(),
            b.category_word()
        ),
        format!(
            "the {} {} is next to the {} {}",
            a.size_word(),
            a.category_word(),
            b.size_word(),
            b.category_word()
        ),
        format!(
            "there is a {} {} near a {} {}",
            a.color_word(),
            a.category_word(),
            b.color_word(),
            b.category_word()
        ),
        format!(
            "a {} {} {} beside a {} {} {}",
            a.size_word(),
            a.color_word(),
            a.category_word(),
            b.size_word(),
            b.color_word(),
            b.category_word()
        ),
        format!(
            "the picture shows a {} and a {}",
            a.category_word(),
            b.category_word()
        ),
    ]
}

/// One corpus item. `features` has one row (length `d_feat`) per object, in
/// object order. `orig_refs` is set only on distilled datasets, preserving
/// the original references for evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetItem {
    pub id: u64,
    pub features: Vec<Vec<f64>>,
    pub refs: Vec<String>,
    pub scene: Scene,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub orig_refs: Option<Vec<String>>,
}

impl DatasetItem {
    pub fn region_features(&self) -> Result<RegionFeatures> {
        let n = self.features.len();
        if n == 0 {
            return Err(Error::validation(format!("item {} has no regions", self.id)));
        }
        let d = self.features[0].len();
        let mut values = Vec::with_capacity(n * d);
        for row in &self.features {
            if row.len() != d {
                return Err(Error::validation(format!(
                    "item {} has ragged feature rows",
                    self.id
                )));
            }
            values.extend_from_slice(row);
        }
        RegionFeatures::new(n, d, values)
    }

    /// References to evaluate against: the original ones on a distilled
    /// dataset, otherwise `refs`.
    pub fn eval_refs(&self) -> &[String] {
        self.orig_refs.as_deref().unwrap_or(&self.refs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub n_items: usize,
    pub seed: u64,
    pub ratios: [f64; 3],
    pub d_feat: usize,
    pub noise_sigma: f64,
}

impl Default for CorpusConfig {
    fn default() -> CorpusConfig {
        CorpusConfig {
            n_items: 2000,
            seed: 7,
            ratios: [0.8, 0.1, 0.1],
            d_feat: 32,
            noise_sigma: 0.1,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_items < 10 {
            return Err(Error::validation("corpus needs at least 10 items"));
        }
        if self.d_feat == 0 {
            return Err(Error::validation("d_feat must be positive"));
        }
        if self.ratios.iter().any(|&r| r <= 0.0)
            || (self.ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(Error::validation(format!(
                "split ratios must be positive and sum to 1, got {:?}",
                self.ratios
            )));
        }
        Ok(())
    }

    /// (train, val, test) item counts.
    pub fn split_sizes(&self) -> (usize, usize, usize) {
        let n = self.n_items as f64;
        let train = (n * self.ratios[0]).round() as usize;
        let val = (n * self.ratios[1]).round() as usize;
        (train, val, self.n_items - train - val)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub train: Vec<DatasetItem>,
    pub val: Vec<DatasetItem>,
    pub test: Vec<DatasetItem>,
}

/// Generates the full corpus. Item `i` depends only on `(seed, i)` and the
/// feature projection only on `seed`, so splits are stable under resizing
/// and regeneration is byte-identical.
pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Corpus> {
    cfg.validate()?;
    let base = SplitMix64::new(cfg.seed);
    let mut proj_rng = base.derive(PROJECTION_TAG);
    let projection: Vec<f64> = (0..ONE_HOT_DIM * cfg.d_feat)
        .map(|_| proj_rng.normal())
        .collect();

    let mut items = Vec::with_capacity(cfg.n_items);
    for id in 0..cfg.n_items as u64 {
        let mut rng = base.derive(id);
        let n_objects = MIN_OBJECTS + rng.below(MAX_OBJECTS - MIN_OBJECTS + 1);
        let mut objects = Vec::with_capacity(n_objects);
        for _ in 0..n_objects {
            objects.push(SceneObject {
                category: rng.below(CATEGORIES.len()),
                color: rng.below(COLORS.len()),
                size: rng.below(SIZES.len()),
                slot: 0,
            });
        }
        let mut slots: Vec<usize> = (0..N_SLOTS).collect();
        rng.shuffle(&mut slots);
        for (obj, slot) in objects.iter_mut().zip(&slots) {
            obj.slot = *slot;
        }
        let scene = Scene { objects };

        let mut features = Vec::with_capacity(n_objects);
        for obj in &scene.objects {
            let mut one_hot = vec![0.0; ONE_HOT_DIM];
            one_hot[obj.category] = 1.0;
            one_hot[CATEGORIES.len() + obj.color] = 1.0;
            one_hot[CATEGORIES.len() + COLORS.len() + obj.size] = 1.0;
            one_hot[CATEGORIES.len() + COLORS.len() + SIZES.len() + obj.slot] = 1.0;
            let mut row = vec![0.0; cfg.d_feat];
            for (j, slot_val) in row.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (i, &x) in one_hot.iter().enumerate() {
                    if x != 0.0 {
                        acc += x * projection[i * cfg.d_feat + j];
                    }
                }
                *slot_val = acc + cfg.noise_sigma * rng.normal();
            }
            features.push(row);
        }

        let refs = caption_templates(&scene).to_vec();
        items.push(DatasetItem {
            id,
            features,
            refs,
            scene,
            orig_refs: None,
        });
    }

    let (n_train, n_val, n_test) = cfg.split_sizes();
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(Error::validation("every split must be nonempty"));
    }
    let mut iter = items.into_iter();
    let train: Vec<_> = iter.by_ref().take(n_train).collect();
    let val: Vec<_> = iter.by_ref().take(n_val).collect();
    let test: Vec<_> = iter.collect();
    Ok(Corpus { train, val, test })
}

pub fn write_jsonl(path: &Path, items: &[DatasetItem]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<DatasetItem>> {
    let file = std::fs::File::open(path)?;
    let mut items = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        items.push(serde_json::from_str(&line)?);
    }
    Ok(items)
}

/// Token/id bijection with fixed specials. Ids are assigned by descending
/// train-corpus frequency, ties broken lexicographically.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, usize>,
    min_count: usize,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    min_count: usize,
    specials: BTreeMap<String, usize>,
    /// Non-special tokens in id order; token `i` has id `4 + i`.
    tokens: Vec<String>,
}

impl Vocabulary {
    pub const PAD: usize = 0;
    pub const START: usize = 1;
    pub const END: usize = 2;
    pub const UNK: usize = 3;

    pub const PAD_TOKEN: &'static str = "<pad>";
    pub const START_TOKEN: &'static str = "<start>";
    pub const END_TOKEN: &'static str = "<end>";
    pub const UNK_TOKEN: &'static str = "<unk>";

    fn specials() -> [&'static str; 4] {
        [
            Self::PAD_TOKEN,
            Self::START_TOKEN,
            Self::END_TOKEN,
            Self::UNK_TOKEN,
        ]
    }

    fn from_tokens(tokens: Vec<String>, min_count: usize) -> Vocabulary {
        let mut id_to_token: Vec<String> =
            Self::specials().iter().map(|s| s.to_string()).collect();
        id_to_token.extend(tokens);
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary {
            id_to_token,
            token_to_id,
            min_count,
        }
    }

    /// Builds the vocabulary from training captions, keeping tokens that
    /// occur at least `min_count` times.
    pub fn build<'a>(
        captions: impl IntoIterator<Item = &'a str>,
        min_count: usize,
    ) -> Result<Vocabulary> {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        let mut any = false;
        for caption in captions {
            any = true;
            for token in caption.split_whitespace() {
                *counts.entry(token).or_insert(0) += 1;
            }
        }
        if !any {
            return Err(Error::validation("cannot build a vocabulary from no captions"));
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(_, c)| c >= min_count)
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        Ok(Self::from_tokens(
            kept.into_iter().map(|(t, _)| t.to_string()).collect(),
            min_count,
        ))
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn min_count(&self) -> usize {
        self.min_count
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = VocabFile {
            min_count: self.min_count,
            specials: Self::specials()
                .iter()
                .enumerate()
                .map(|(i, s)| (s.to_string(), i))
                .collect(),
            tokens: self.id_to_token[4..].to_vec(),
        };
        std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocabulary> {
        let file: VocabFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        for (i, s) in Self::specials().iter().enumerate() {
            if file.specials.get(*s).copied() != Some(i) {
                return Err(Error::validation(format!(
                    "vocabulary file {} has nonstandard specials",
                    path.display()
                )));
            }
        }
        Ok(Self::from_tokens(file.tokens, file.min_count))
    }
}

/// Token ids for a caption: known words (unknowns as UNK) plus a final END,
/// truncated to `max_len` ids with END always kept as the last one.
pub fn encode_caption(text: &str, vocab: &Vocabulary, max_len: usize) -> Vec<usize> {
    assert!(max_len >= 1, "max_len must allow at least END");
    let mut ids: Vec<usize> = text
        .split_whitespace()
        .map(|t| vocab.id(t).unwrap_or(Vocabulary::UNK))
        .collect();
    ids.truncate(max_len - 1);
    ids.push(Vocabulary::END);
    ids
}

/// Words for a decoded id sequence: stops at the first END, skips PAD and
/// START, renders UNK and out-of-range ids as the UNK token.
pub fn decode_caption(ids: &[usize], vocab: &Vocabulary) -> String {
    let mut words = Vec::new();
    for &id in ids {
        match id {
            Vocabulary::END => break,
            Vocabulary::PAD | Vocabulary::START => continue,
            _ => words.push(vocab.token(id).unwrap_or(Vocabulary::UNK_TOKEN)),
        }
    }
    words.join(" ")
}
