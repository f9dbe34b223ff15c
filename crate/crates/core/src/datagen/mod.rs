//! Synthetic attribute-grounded person dataset: rendered images, template
//! descriptions, identity splits and training batch composition.
//!
//! Training identities have unique (shirt, pants) combinations, so identity
//! labels alone can be fit from those two regions. Test identities come in
//! distractor groups that share shirt and pants and differ only in hat, bag
//! and shoes, which the descriptions always mention.

mod batch;
mod describe;
mod io;
mod render;

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::textpipe::{build_vocab, extract_phrases, Lexicon, Phrase, Vocab};

pub use batch::{compose_batch, BatchConfig, BatchPlan, Pair};
pub use describe::{mentioned_attributes, render_description, Attribute};
pub use io::{
    content_hash, decode_ppm, encode_ppm, read_dataset, write_dataset, DatasetDir, TupleSource, META_FILE, VOCAB_FILE,
};
pub use render::{render_image, render_with, Image, Layout, Region, RenderConfig, RenderInfo};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Black,
    White,
    Red,
    Green,
    Blue,
    Yellow,
    Purple,
    Cyan,
}

impl Color {
    pub const ALL: [Color; 8] = [
        Color::Black,
        Color::White,
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::Purple,
        Color::Cyan,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Color::Black => "black",
            Color::White => "white",
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Purple => "purple",
            Color::Cyan => "cyan",
        }
    }

    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Black => [0.0, 0.0, 0.0],
            Color::White => [1.0, 1.0, 1.0],
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Yellow => [1.0, 1.0, 0.0],
            Color::Purple => [1.0, 0.0, 1.0],
            Color::Cyan => [0.0, 1.0, 1.0],
        }
    }

    /// Palette color closest to `rgb` in Euclidean distance.
    pub fn nearest(rgb: [f32; 3]) -> Color {
        let dist = |c: Color| {
            c.rgb()
                .iter()
                .zip(rgb)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f32>()
        };
        Color::ALL
            .into_iter()
            .min_by(|a, b| dist(*a).total_cmp(&dist(*b)))
            .expect("palette is non-empty")
    }

    fn random(rng: &mut impl Rng) -> Color {
        Color::ALL[rng.gen_range(0..Color::ALL.len())]
    }
}

impl fmt::Display for Color {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Color {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Color::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown color `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Man,
    Woman,
}

impl Gender {
    pub fn noun(self) -> &'static str {
        match self {
            Gender::Man => "man",
            Gender::Woman => "woman",
        }
    }

    pub fn pronoun(self) -> &'static str {
        match self {
            Gender::Man => "he",
            Gender::Woman => "she",
        }
    }
}

/// Appearance of one identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PersonSpec {
    pub identity: usize,
    pub gender: Gender,
    pub shirt: Color,
    pub pants: Color,
    pub shoes: Color,
    pub hat: Option<Color>,
    pub bag: Option<Color>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        }
    }
}

/// One `(image, description, phrases, identity)` record.
#[derive(Debug, Clone, PartialEq)]
pub struct DataTuple {
    pub id: usize,
    pub split: Split,
    pub label: usize,
    pub image: Image,
    pub render: RenderInfo,
    pub text: String,
    pub phrases: Vec<Phrase>,
    pub spec: PersonSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub n_train_ids: usize,
    pub n_test_ids: usize,
    pub images_per_id: usize,
    pub seed: u64,
    /// Test identities per group; members differ only in shoe color.
    pub distractor_group: usize,
    /// Fraction of tuples generated without a description; those get a
    /// description of another image of the same identity.
    pub missing_text_rate: f64,
    pub render: RenderConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_train_ids: 64,
            n_test_ids: 16,
            images_per_id: 4,
            seed: 7,
            distractor_group: 4,
            missing_text_rate: 0.0,
            render: RenderConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<DataTuple>,
    pub query: Vec<DataTuple>,
    pub gallery: Vec<DataTuple>,
    pub vocab: Vocab,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[DataTuple] {
        match split {
            Split::Train => &self.train,
            Split::Query => &self.query,
            Split::Gallery => &self.gallery,
        }
    }

    pub fn all(&self) -> impl Iterator<Item = &DataTuple> {
        self.train.iter().chain(&self.query).chain(&self.gallery)
    }

    /// Number of training identities; labels of training tuples are below it.
    pub fn num_train_identities(&self) -> usize {
        self.train.iter().map(|t| t.label + 1).max().unwrap_or(0)
    }

    pub fn image_size(&self) -> (usize, usize) {
        self.all()
            .next()
            .map(|t| (t.image.height, t.image.width))
            .unwrap_or((0, 0))
    }
}

fn random_look(identity: usize, rng: &mut impl Rng, shirt: Color, pants: Color) -> PersonSpec {
    PersonSpec {
        identity,
        gender: if rng.gen_bool(0.5) { Gender::Man } else { Gender::Woman },
        shirt,
        pants,
        shoes: Color::random(rng),
        hat: rng.gen_bool(0.5).then(|| Color::random(rng)),
        bag: rng.gen_bool(0.5).then(|| Color::random(rng)),
    }
}

/// Identity appearances: training identities cycle through shuffled
/// (shirt, pants) combinations; test identities come in groups that share
/// everything except the shoe color.
pub fn person_specs(config: &DataConfig, rng: &mut impl Rng) -> Vec<PersonSpec> {
    let mut combos: Vec<(Color, Color)> = Color::ALL
        .iter()
        .flat_map(|&s| Color::ALL.iter().map(move |&p| (s, p)))
        .collect();
    combos.shuffle(rng);
    let mut specs: Vec<PersonSpec> = (0..config.n_train_ids)
        .map(|i| {
            let (s, p) = combos[i % combos.len()];
            random_look(i, rng, s, p)
        })
        .collect();

    let group = config.distractor_group.clamp(1, Color::ALL.len());
    let mut id = config.n_train_ids;
    while id < config.n_train_ids + config.n_test_ids {
        let (shirt, pants) = (Color::random(rng), Color::random(rng));
        let template = random_look(id, rng, shirt, pants);
        let mut shoes = Color::ALL.to_vec();
        shoes.shuffle(rng);
        for &shoe in shoes.iter().take(group) {
            if id == config.n_train_ids + config.n_test_ids {
                break;
            }
            specs.push(PersonSpec {
                identity: id,
                shoes: shoe,
                ..template
            });
            id += 1;
        }
    }
    specs
}

fn tuple_rng(seed: u64, tuple: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(1 + tuple as u64);
    r
}

/// Generates the full dataset. Each tuple uses its own RNG stream derived
/// from `(seed, tuple index)`.
pub fn gen_dataset(config: &DataConfig, lexicon: &Lexicon) -> Result<Dataset> {
    if config.n_train_ids == 0 || config.images_per_id == 0 {
        return Err(Error::Config("identity and image counts must be at least 1".into()));
    }
    if config.n_test_ids < 2 {
        return Err(Error::Config(format!(
            "n_test_ids must be at least 2 for retrieval, got {}",
            config.n_test_ids
        )));
    }
    if config.images_per_id < 2 {
        return Err(Error::Config(
            "images_per_id must be at least 2 (one query plus gallery)".into(),
        ));
    }
    if !(0.0..1.0).contains(&config.missing_text_rate) {
        return Err(Error::Config("missing_text_rate must be in [0, 1)".into()));
    }
    config.render.validate()?;

    let mut master = ChaCha8Rng::seed_from_u64(config.seed);
    let specs = person_specs(config, &mut master);

    let mut records = Vec::new();
    for spec in &specs {
        for k in 0..config.images_per_id {
            let id = records.len();
            let mut rng = tuple_rng(config.seed, id);
            let (image, render) = render_image(spec, &config.render, &mut rng);
            let text = render_description(spec, &mut rng);
            let missing = config.missing_text_rate > 0.0 && rng.gen_bool(config.missing_text_rate);
            let split = if spec.identity < config.n_train_ids {
                Split::Train
            } else if k == 0 {
                Split::Query
            } else {
                Split::Gallery
            };
            records.push((id, split, *spec, image, render, (!missing).then_some(text)));
        }
    }
    fill_missing_descriptions(&mut records, config.images_per_id);

    let train_texts: Vec<&str> = records
        .iter()
        .filter(|r| r.1 == Split::Train)
        .map(|r| r.5.as_deref().expect("filled"))
        .collect();
    let vocab = build_vocab(&train_texts, 1);

    let mut ds = Dataset {
        train: Vec::new(),
        query: Vec::new(),
        gallery: Vec::new(),
        vocab,
    };
    for (id, split, spec, image, render, text) in records {
        let text = text.expect("filled");
        let tuple = DataTuple {
            id,
            split,
            label: spec.identity,
            image,
            render,
            phrases: extract_phrases(&text, lexicon),
            text,
            spec,
        };
        match split {
            Split::Train => ds.train.push(tuple),
            Split::Query => ds.query.push(tuple),
            Split::Gallery => ds.gallery.push(tuple),
        }
    }
    Ok(ds)
}

type Record = (usize, Split, PersonSpec, Image, RenderInfo, Option<String>);

/// Replaces missing descriptions with the first available description of
/// the same identity; identities with none keep a fresh template text.
fn fill_missing_descriptions(records: &mut [Record], per_id: usize) {
    for chunk in records.chunks_mut(per_id) {
        let donor = chunk.iter().find_map(|r| r.5.clone());
        for r in chunk.iter_mut() {
            if r.5.is_none() {
                let fallback = || {
                    let mut rng = tuple_rng(u64::MAX, r.0);
                    render_description(&r.2, &mut rng)
                };
                r.5 = Some(donor.clone().unwrap_or_else(fallback));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn small() -> DataConfig {
        DataConfig {
            n_train_ids: 6,
            n_test_ids: 4,
            images_per_id: 3,
            ..Default::default()
        }
    }

    #[test]
    fn default_counts() {
        let ds = gen_dataset(&DataConfig::default(), &Lexicon::default()).unwrap();
        assert_eq!(ds.train.len(), 256);
        assert_eq!(ds.query.len() + ds.gallery.len(), 64);
        assert_eq!(ds.query.len(), 16);
        assert_eq!(ds.num_train_identities(), 64);
    }

    #[test]
    fn splits_are_disjoint_and_complete() {
        let ds = gen_dataset(&small(), &Lexicon::default()).unwrap();
        let train: HashSet<usize> = ds.train.iter().map(|t| t.label).collect();
        let query: HashSet<usize> = ds.query.iter().map(|t| t.label).collect();
        let gallery: HashSet<usize> = ds.gallery.iter().map(|t| t.label).collect();
        assert!(train.is_disjoint(&query) && train.is_disjoint(&gallery));
        assert_eq!(query, gallery);
        assert_eq!(query.len(), 4);
    }

    #[test]
    fn train_combos_are_unique_and_test_groups_differ_in_shoes_only() {
        let specs = person_specs(&DataConfig::default(), &mut ChaCha8Rng::seed_from_u64(1));
        let train: HashSet<(Color, Color)> = specs[..64].iter().map(|s| (s.shirt, s.pants)).collect();
        assert_eq!(train.len(), 64);
        for group in specs[64..].chunks(4) {
            let shoes: HashSet<Color> = group.iter().map(|s| s.shoes).collect();
            assert_eq!(shoes.len(), 4);
            for s in group {
                let same = PersonSpec {
                    identity: group[0].identity,
                    shoes: group[0].shoes,
                    ..*s
                };
                assert_eq!(same, group[0]);
            }
        }
    }

    #[test]
    fn phrases_match_chunker() {
        let lex = Lexicon::default();
        let ds = gen_dataset(&small(), &lex).unwrap();
        for t in ds.all() {
            assert_eq!(t.phrases, extract_phrases(&t.text, &lex));
        }
    }

    #[test]
    fn vocab_comes_from_train_only() {
        let ds = gen_dataset(&small(), &Lexicon::default()).unwrap();
        let v = build_vocab(&ds.train.iter().map(|t| t.text.clone()).collect::<Vec<_>>(), 1);
        assert_eq!(ds.vocab, v);
    }

    #[test]
    fn rejects_single_test_identity() {
        let cfg = DataConfig {
            n_test_ids: 1,
            ..small()
        };
        assert!(gen_dataset(&cfg, &Lexicon::default()).is_err());
    }

    #[test]
    fn missing_descriptions_are_substituted_within_identity() {
        let cfg = DataConfig {
            missing_text_rate: 0.5,
            ..small()
        };
        let ds = gen_dataset(&cfg, &Lexicon::default()).unwrap();
        for t in ds.all() {
            assert!(!t.text.is_empty());
            let mentioned = mentioned_attributes(&t.text);
            assert!(mentioned.iter().any(|(a, c)| *a == Attribute::Shirt && *c == t.spec.shirt));
        }
    }

    #[test]
    fn nearest_color_is_identity_on_palette() {
        for c in Color::ALL {
            assert_eq!(Color::nearest(c.rgb()), c);
            assert_eq!(c.name().parse::<Color>().unwrap(), c);
        }
    }

    fn assert_grounded(config: &DataConfig) {
        let ds = gen_dataset(config, &Lexicon::default()).unwrap();
        let (h, w) = (config.render.height, config.render.width);
        let layout = Layout::new(h, w);
        let mut checked = 0;
        for t in ds.all() {
            for (attr, color) in mentioned_attributes(&t.text) {
                for region in layout.attribute_regions(attr) {
                    let r = t.render.map(&region, h, w).expect("region stays on canvas");
                    assert_eq!(Color::nearest(t.image.region_mean(&r)), color, "tuple {} {attr:?}", t.id);
                    checked += 1;
                }
            }
        }
        assert!(checked > 1000);
    }

    #[test]
    fn mentioned_attributes_match_rendered_regions_without_noise() {
        let mut config = DataConfig::default();
        config.render.noise = 0.0;
        assert_grounded(&config);
    }

    #[test]
    fn mentioned_attributes_match_rendered_regions_at_default_noise() {
        assert_grounded(&DataConfig::default());
    }
}
