//! Synthetic game scenes: region feature grids with planted entity
//! prototypes, and grammar captions describing them.
//!
//! A scene has an agent (human or monster) performing an action, optionally
//! on an object. The agent's region carries its class and action directions;
//! the object's region carries only its class direction, so the two roles
//! stay distinguishable. Every other cell is Gaussian noise.

use std::fmt;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use rand_xoshiro::Xoshiro256PlusPlus;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::RegionGrid;
use crate::dataset::{Dataset, DatasetError};
use crate::features::FeatureRecord;
use crate::threads;
use crate::vocab::{tokenize, Vocabulary};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("split ratios {0:?} must be non-negative and sum to 1")]
    Ratios([f64; 3]),
    #[error("need at least 10 scenes, got {0}")]
    TooFew(usize),
    #[error("scene has {entities} entities but only {regions} regions")]
    TooManyEntities { entities: usize, regions: usize },
    #[error("entity cell {cell} outside a {cells}-cell grid")]
    Cell { cell: usize, cells: usize },
    #[error("two entities share region {0}")]
    SharedRegion(usize),
    #[error("feature width {dim} cannot hold {needed} prototype directions")]
    Width { dim: usize, needed: usize },
    #[error("invalid noise level {0}")]
    Noise(f64),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectClass {
    Human,
    Gun,
    Axe,
    Sword,
    Monster,
    Car,
    Motorcycle,
}

impl ObjectClass {
    pub const ALL: [ObjectClass; 7] = [
        ObjectClass::Human,
        ObjectClass::Gun,
        ObjectClass::Axe,
        ObjectClass::Sword,
        ObjectClass::Monster,
        ObjectClass::Car,
        ObjectClass::Motorcycle,
    ];

    pub const AGENTS: [ObjectClass; 2] = [ObjectClass::Human, ObjectClass::Monster];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Surface words, the first being canonical.
    pub fn words(self) -> &'static [&'static str] {
        match self {
            ObjectClass::Human => &["human", "man", "person"],
            ObjectClass::Gun => &["gun", "rifle"],
            ObjectClass::Axe => &["axe"],
            ObjectClass::Sword => &["sword", "blade"],
            ObjectClass::Monster => &["monster", "creature"],
            ObjectClass::Car => &["car", "vehicle"],
            ObjectClass::Motorcycle => &["motorcycle", "bike"],
        }
    }

    fn from_word(w: &str) -> Option<Self> {
        ObjectClass::ALL.into_iter().find(|c| c.words().contains(&w))
    }
}

impl fmt::Display for ObjectClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.words()[0])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Hold,
    Ride,
    Fight,
    Drive,
    Shoot,
    Swing,
    Chase,
}

impl Action {
    pub const ALL: [Action; 7] = [
        Action::Hold,
        Action::Ride,
        Action::Fight,
        Action::Drive,
        Action::Shoot,
        Action::Swing,
        Action::Chase,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Third-person singular and progressive forms.
    pub fn forms(self) -> (&'static str, &'static str) {
        match self {
            Action::Hold => ("holds", "holding"),
            Action::Ride => ("rides", "riding"),
            Action::Fight => ("fights", "fighting"),
            Action::Drive => ("drives", "driving"),
            Action::Shoot => ("shoots", "shooting"),
            Action::Swing => ("swings", "swinging"),
            Action::Chase => ("chases", "chasing"),
        }
    }

    pub fn objects(self) -> &'static [ObjectClass] {
        use ObjectClass::*;
        match self {
            Action::Hold => &[Gun, Axe, Sword],
            Action::Ride => &[Motorcycle],
            Action::Fight => &[Human, Monster],
            Action::Drive => &[Car, Motorcycle],
            Action::Shoot => &[Human, Monster],
            Action::Swing => &[Axe, Sword],
            Action::Chase => &[Human, Monster, Car, Motorcycle],
        }
    }

    pub fn needs_object(self) -> bool {
        matches!(self, Action::Hold | Action::Ride | Action::Drive | Action::Swing)
    }

    fn from_word(w: &str) -> Option<(Self, bool)> {
        Action::ALL.into_iter().find_map(|a| {
            let (s, ing) = a.forms();
            if w == s {
                Some((a, false))
            } else if w == ing {
                Some((a, true))
            } else {
                None
            }
        })
    }
}

/// One planted entity. Agents carry an action; objects do not.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub class: ObjectClass,
    pub action: Option<Action>,
    pub region: usize,
    pub cell: usize,
}

/// What a caption says: agent, action, optional object.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SceneContent {
    pub agent: ObjectClass,
    pub action: Action,
    pub object: Option<ObjectClass>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub entities: Vec<Entity>,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SceneSpec {
    pub fn content(&self) -> Option<SceneContent> {
        let agent = self.entities.iter().find(|e| e.action.is_some())?;
        let object = self.entities.iter().find(|e| e.action.is_none());
        Some(SceneContent {
            agent: agent.class,
            action: agent.action?,
            object: object.map(|e| e.class),
        })
    }
}

/// Feature geometry and signal strength of generated scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneDims {
    pub regions: usize,
    pub n1: usize,
    pub n2: usize,
    pub dim: usize,
    pub amplitude: f64,
    pub noise_sigma: f64,
}

impl Default for SceneDims {
    fn default() -> Self {
        Self {
            regions: 5,
            n1: 3,
            n2: 3,
            dim: 32,
            amplitude: 3.0,
            noise_sigma: 1.0,
        }
    }
}

impl SceneDims {
    fn cells(&self) -> usize {
        self.n1 * self.n2
    }
}

/// Class directions occupy the first 7 channels, action directions the next 7.
pub const PROTOTYPE_CHANNELS: usize = 14;

pub fn prototype(entity: &Entity, dim: usize, amplitude: f64) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    v[entity.class.index()] = amplitude;
    if let Some(a) = entity.action {
        v[ObjectClass::ALL.len() + a.index()] = amplitude;
    }
    v
}

/// Renders a scene's regions and paraphrase captions. Caption wording is
/// drawn from `spec.seed`.
pub fn generate_scene(
    spec: &SceneSpec,
    dims: &SceneDims,
    image_id: &str,
) -> Result<(FeatureRecord, Vec<String>), SynthError> {
    if dims.dim < PROTOTYPE_CHANNELS {
        return Err(SynthError::Width {
            dim: dims.dim,
            needed: PROTOTYPE_CHANNELS,
        });
    }
    if !(spec.noise_sigma >= 0.0 && spec.noise_sigma.is_finite()) {
        return Err(SynthError::Noise(spec.noise_sigma));
    }
    if spec.entities.len() > dims.regions {
        return Err(SynthError::TooManyEntities {
            entities: spec.entities.len(),
            regions: dims.regions,
        });
    }
    for (i, e) in spec.entities.iter().enumerate() {
        if e.cell >= dims.cells() {
            return Err(SynthError::Cell {
                cell: e.cell,
                cells: dims.cells(),
            });
        }
        if e.region >= dims.regions {
            return Err(SynthError::TooManyEntities {
                entities: e.region + 1,
                regions: dims.regions,
            });
        }
        if spec.entities[..i].iter().any(|o| o.region == e.region) {
            return Err(SynthError::SharedRegion(e.region));
        }
    }
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|_| SynthError::Noise(spec.noise_sigma))?;
    let (d, m) = (dims.dim, dims.cells());
    let mut grids = Vec::with_capacity(dims.regions);
    let mut global = vec![0.0; d];
    for r in 0..dims.regions {
        let mut data: Vec<f64> = (0..m * d).map(|_| noise.sample(&mut rng)).collect();
        if let Some(e) = spec.entities.iter().find(|e| e.region == r) {
            let p = prototype(e, d, dims.amplitude);
            for (x, v) in data[e.cell * d..(e.cell + 1) * d].iter_mut().zip(p) {
                *x += v;
            }
        }
        for cell in data.chunks(d) {
            global.iter_mut().zip(cell).for_each(|(g, v)| *g += v);
        }
        grids.push(RegionGrid::new(dims.n1, dims.n2, d, data).expect("sized"));
    }
    let total = (dims.regions * m) as f64;
    global.iter_mut().for_each(|g| *g /= total);
    let record = FeatureRecord::new(image_id, global, grids).expect("finite features");
    let captions = match spec.content() {
        Some(c) => paraphrases(&c, &mut rng),
        None => Vec::new(),
    };
    Ok((record, captions))
}

const TEMPLATES: usize = 3;

fn render(c: &SceneContent, template: usize, rng: Option<&mut impl Rng>) -> String {
    let mut rng = rng;
    let mut pick = |ws: &[&'static str]| match rng.as_mut() {
        Some(r) => *ws.choose(*r).expect("non-empty"),
        None => ws[0],
    };
    let agent = pick(c.agent.words());
    let (s, ing) = c.action.forms();
    let mut words: Vec<&str> = match template {
        0 => vec!["a", agent, s],
        1 => vec!["a", agent, "is", ing],
        _ => vec!["there", "is", "a", agent, ing],
    };
    if let Some(o) = c.object {
        words.push("a");
        words.push(pick(o.words()));
    }
    words.join(" ")
}

/// The canonical caption (first template, first synonyms) followed by up to
/// two paraphrases from the other templates with random synonyms.
fn paraphrases(c: &SceneContent, rng: &mut impl Rng) -> Vec<String> {
    let extra = rng.random_range(0..TEMPLATES);
    let mut templates: Vec<usize> = (1..TEMPLATES).collect();
    templates.shuffle(rng);
    templates.truncate(extra);
    let mut out = vec![render(c, 0, None::<&mut Xoshiro256PlusPlus>)];
    out.extend(templates.into_iter().map(|t| render(c, t, Some(&mut *rng))));
    out
}

/// Recovers the scene content a generated caption describes.
pub fn parse_caption(text: &str) -> Option<SceneContent> {
    let toks = tokenize(text);
    let t: Vec<&str> = toks.iter().map(String::as_str).collect();
    let (agent, verb, rest) = match t.as_slice() {
        ["a", agent, "is", verb, rest @ ..] => (*agent, (*verb, true), rest),
        ["there", "is", "a", agent, verb, rest @ ..] => (*agent, (*verb, true), rest),
        ["a", agent, verb, rest @ ..] => (*agent, (*verb, false), rest),
        _ => return None,
    };
    let agent = ObjectClass::from_word(agent)?;
    let (action, progressive) = Action::from_word(verb.0)?;
    if progressive != verb.1 {
        return None;
    }
    let object = match rest {
        [] => None,
        ["a", o] => Some(ObjectClass::from_word(o)?),
        _ => return None,
    };
    Some(SceneContent {
        agent,
        action,
        object,
    })
}

/// Derives the seed of record `index` from a base seed.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A random scene with one agent and, when the action allows or requires
/// it, one object.
pub fn random_scene(dims: &SceneDims, seed: u64) -> SceneSpec {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let agent = *ObjectClass::AGENTS.choose(&mut rng).expect("non-empty");
    let action = *Action::ALL.choose(&mut rng).expect("non-empty");
    let with_object = dims.regions >= 2 && (action.needs_object() || rng.random_bool(0.5));
    let mut regions: Vec<usize> = (0..dims.regions).collect();
    regions.shuffle(&mut rng);
    let cells = dims.cells();
    let mut entities = vec![Entity {
        class: agent,
        action: Some(action),
        region: regions[0],
        cell: rng.random_range(0..cells),
    }];
    if with_object {
        entities.push(Entity {
            class: *action.objects().choose(&mut rng).expect("non-empty"),
            action: None,
            region: regions[1],
            cell: rng.random_range(0..cells),
        });
    }
    SceneSpec {
        entities,
        noise_sigma: dims.noise_sigma,
        seed: rng.random(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub count: usize,
    /// Train, validation and test fractions.
    pub ratios: [f64; 3],
    pub seed: u64,
    pub scene: SceneDims,
    pub max_len: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            count: 1000,
            ratios: [0.8, 0.1, 0.1],
            seed: 0,
            scene: SceneDims::default(),
            max_len: 19,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSplit {
    pub dataset: Dataset,
    pub scenes: Vec<SceneSpec>,
    /// Raw caption strings per image, before tokenization.
    pub texts: Vec<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub train: SynthSplit,
    pub val: SynthSplit,
    pub test: SynthSplit,
}

impl SynthDataset {
    pub fn vocab(&self) -> &Vocabulary {
        &self.train.dataset.vocab
    }
}

/// Split sizes: validation and test are rounded down, train takes the rest.
pub fn split_sizes(count: usize, ratios: [f64; 3]) -> Result<[usize; 3], SynthError> {
    let sum: f64 = ratios.iter().sum();
    if ratios.iter().any(|r| !(*r >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(SynthError::Ratios(ratios));
    }
    let val = (count as f64 * ratios[1] + 1e-9).floor() as usize;
    let test = (count as f64 * ratios[2] + 1e-9).floor() as usize;
    Ok([count - val - test, val, test])
}

/// Generates `config.count` scenes, split in order into train, validation
/// and test. The vocabulary is built from training captions only.
pub fn generate_dataset(config: &SynthConfig) -> Result<SynthDataset, SynthError> {
    if config.count < 10 {
        return Err(SynthError::TooFew(config.count));
    }
    let sizes = split_sizes(config.count, config.ratios)?;
    let scenes = threads::install(|| {
        (0..config.count)
            .into_par_iter()
            .map(|i| {
                let spec = random_scene(&config.scene, derive_seed(config.seed, i as u64));
                let (record, texts) = generate_scene(&spec, &config.scene, &format!("scene{i:06}"))?;
                Ok((spec, record, texts))
            })
            .collect::<Result<Vec<_>, SynthError>>()
    })?;
    let vocab = {
        let train_tokens: Vec<Vec<String>> = scenes[..sizes[0]]
            .iter()
            .flat_map(|(_, _, texts)| texts.iter().map(|t| tokenize(t)))
            .collect();
        Vocabulary::from_corpus(train_tokens.iter().map(|t| t.as_slice()))
    };
    let mut it = scenes.into_iter();
    let mut take = |n: usize| -> Result<SynthSplit, SynthError> {
        let chunk: Vec<_> = it.by_ref().take(n).collect();
        let texts: Vec<Vec<String>> = chunk.iter().map(|(_, _, t)| t.clone()).collect();
        let specs = chunk.iter().map(|(s, _, _)| s.clone()).collect();
        let items = chunk.into_iter().map(|(_, r, t)| (r, t)).collect::<Vec<_>>();
        let dataset = if items.is_empty() {
            Dataset {
                vocab: vocab.clone(),
                max_len: config.max_len,
                examples: Vec::new(),
            }
        } else {
            Dataset::encode(vocab.clone(), config.max_len, items)?
        };
        Ok(SynthSplit {
            dataset,
            scenes: specs,
            texts,
        })
    };
    Ok(SynthDataset {
        train: take(sizes[0])?,
        val: take(sizes[1])?,
        test: take(sizes[2])?,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::vocab::UNK;

    fn one_entity(sigma: f64) -> SceneSpec {
        SceneSpec {
            entities: vec![Entity {
                class: ObjectClass::Human,
                action: Some(Action::Fight),
                region: 2,
                cell: 4,
            }],
            noise_sigma: sigma,
            seed: 7,
        }
    }

    #[test]
    fn noiseless_entity_fills_exactly_one_cell() {
        let dims = SceneDims::default();
        let (rec, caps) = generate_scene(&one_entity(0.0), &dims, "x").unwrap();
        for (r, grid) in rec.grids().iter().enumerate() {
            let nonzero: Vec<usize> = (0..grid.cell_count())
                .filter(|&c| grid.cell(c).iter().any(|v| *v != 0.0))
                .collect();
            if r == 2 {
                assert_eq!(nonzero, vec![4]);
            } else {
                assert!(nonzero.is_empty());
            }
        }
        assert!(!caps.is_empty() && caps.len() <= 3);
        for c in &caps {
            let parsed = parse_caption(c).unwrap();
            assert_eq!(parsed, one_entity(0.0).content().unwrap());
        }
    }

    #[test]
    fn same_seed_same_record() {
        let dims = SceneDims::default();
        let a = generate_scene(&one_entity(1.0), &dims, "x").unwrap();
        let b = generate_scene(&one_entity(1.0), &dims, "x").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn scene_errors() {
        let dims = SceneDims {
            regions: 1,
            ..SceneDims::default()
        };
        let mut spec = random_scene(&SceneDims::default(), 3);
        spec.entities = vec![spec.entities[0]; 2];
        spec.entities[1].region = 1;
        assert!(matches!(
            generate_scene(&spec, &dims, "x"),
            Err(SynthError::TooManyEntities { .. })
        ));
        let mut spec = one_entity(1.0);
        spec.entities[0].cell = 9;
        assert!(matches!(
            generate_scene(&spec, &SceneDims::default(), "x"),
            Err(SynthError::Cell { cell: 9, cells: 9 })
        ));
    }

    #[test]
    fn split_sizes_follow_ratios() {
        assert_eq!(split_sizes(100, [0.8, 0.1, 0.1]).unwrap(), [80, 10, 10]);
        assert!(split_sizes(100, [0.8, 0.1, 0.2]).is_err());
        assert!(matches!(
            generate_dataset(&SynthConfig {
                count: 5,
                ..SynthConfig::default()
            }),
            Err(SynthError::TooFew(5))
        ));
    }

    #[test]
    fn dataset_is_deterministic_and_closed_over_vocab() {
        let cfg = SynthConfig {
            count: 100,
            seed: 11,
            ..SynthConfig::default()
        };
        let a = generate_dataset(&cfg).unwrap();
        let b = generate_dataset(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            (a.train.dataset.len(), a.val.dataset.len(), a.test.dataset.len()),
            (80, 10, 10)
        );
        let v = a.vocab();
        assert!(v.len() >= 20 && v.len() <= 45, "{}", v.len());
        for ex in &a.train.dataset.examples {
            for r in &ex.refs {
                assert!(r.content().iter().all(|&t| t != UNK));
                assert!((2..=19).contains(&r.len()));
            }
        }
        let mean = a.train.dataset.caption_count() as f64 / 80.0;
        assert!((1.5..=2.5).contains(&mean), "{mean}");
        let ids: std::collections::HashSet<_> = [&a.train, &a.val, &a.test]
            .iter()
            .flat_map(|s| s.dataset.examples.iter().map(|e| e.features.image_id().to_string()))
            .collect();
        assert_eq!(ids.len(), 100);
    }

    #[test]
    fn first_caption_is_canonical() {
        let d = generate_dataset(&SynthConfig {
            count: 60,
            seed: 4,
            ..SynthConfig::default()
        })
        .unwrap();
        for (scene, texts) in d.train.scenes.iter().zip(&d.train.texts) {
            let c = scene.content().unwrap();
            let mut want = format!("a {} {}", c.agent.words()[0], c.action.forms().0);
            if let Some(o) = c.object {
                want += &format!(" a {}", o.words()[0]);
            }
            assert_eq!(texts[0], want);
            assert!(texts.len() <= 3 && texts[1..].iter().all(|t| t.contains(c.action.forms().1)));
        }
    }

    #[test]
    fn test_split_maps_unseen_words_to_unk() {
        let cfg = SynthConfig {
            count: 12,
            ratios: [0.5, 0.0, 0.5],
            seed: 5,
            ..SynthConfig::default()
        };
        let d = generate_dataset(&cfg).unwrap();
        for (ex, texts) in d.test.dataset.examples.iter().zip(&d.test.texts) {
            for (r, t) in ex.refs.iter().zip(texts) {
                for (&id, w) in r.content().iter().zip(tokenize(t)) {
                    match d.vocab().id(&w) {
                        Some(k) => assert_eq!(id, k),
                        None => assert_eq!(id, UNK),
                    }
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn every_caption_parses_back_to_its_scene(seed in any::<u64>()) {
            let dims = SceneDims::default();
            let spec = random_scene(&dims, seed);
            let (_, caps) = generate_scene(&spec, &dims, "p").unwrap();
            let content = spec.content().unwrap();
            for c in caps {
                prop_assert_eq!(parse_caption(&c), Some(content));
            }
        }
    }
}
