//! Deterministic synthetic conditioning world.
//!
//! A scene is one to three facts `(entity, attribute, relation)`. Its
//! canonical caption comes from a fixed template per fact count, and its
//! condition is the flat list of fact ids in a separate condition vocabulary.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::align::lev_ratio;
use crate::error::{Error, Result};
use crate::vocab::{TokenId, Vocabulary};

const ENTITIES: &[&str] = &[
    "cat", "dog", "bird", "horse", "cow", "sheep", "goat", "duck", "fox", "bear", "wolf", "deer", "rabbit",
    "mouse", "frog", "owl", "lion", "tiger", "zebra", "monkey", "pig", "boy", "girl", "man", "woman", "child",
    "chef", "farmer", "pilot", "robot", "clown", "knight", "sailor", "baker", "doctor", "artist", "student",
    "teacher", "dancer", "runner",
];

const ATTRIBUTES: &[&str] = &[
    "red", "blue", "green", "yellow", "black", "white", "brown", "gray", "pink", "purple", "orange", "golden",
    "silver", "small", "big", "tall", "short", "young", "old", "happy", "sad", "sleepy", "angry", "calm",
    "quiet", "noisy", "fast", "slow", "tiny", "huge", "fluffy", "spotted", "striped", "shiny", "dirty", "clean",
    "wet", "dry", "hungry", "brave",
];

const RELATIONS: &[&str] = &[
    "sleeping", "running", "sitting", "standing", "eating", "jumping", "swimming", "flying", "walking",
    "waiting", "playing", "hiding", "resting", "climbing", "drinking", "watching", "digging", "reading",
    "singing", "dancing", "rolling", "floating", "spinning", "falling", "smiling", "looking", "turning",
    "crawling", "barking", "laughing",
];

const FUNCTION_WORDS: &[&str] = &["there", "is", "a", "and", ","];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Fact {
    pub entity: usize,
    pub attribute: usize,
    pub relation: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Scene {
    pub scene_id: usize,
    pub facts: Vec<Fact>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorldSpec {
    pub entities: Vec<String>,
    pub attributes: Vec<String>,
    pub relations: Vec<String>,
    pub min_facts: usize,
    pub max_facts: usize,
}

impl Default for WorldSpec {
    fn default() -> Self {
        let own = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect();
        Self {
            entities: own(ENTITIES),
            attributes: own(ATTRIBUTES),
            relations: own(RELATIONS),
            min_facts: 1,
            max_facts: 3,
        }
    }
}

/// Caption length bounds of the template grammar.
pub const CAPTION_LEN_BOUNDS: (usize, usize) = (6, 12);

impl WorldSpec {
    /// Parses `key=value` lines (`entities`, `attributes`, `relations` as
    /// comma lists; `min_facts`, `max_facts`). Missing keys keep defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut spec = Self::default();
        for (key, value) in crate::config::parse_pairs(text)? {
            let list = || value.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
            let num = || {
                value.parse::<usize>().map_err(|_| Error::InvalidArgument(format!("{key}: not an integer")))
            };
            match key.as_str() {
                "entities" => spec.entities = list(),
                "attributes" => spec.attributes = list(),
                "relations" => spec.relations = list(),
                "min_facts" => spec.min_facts = num()?,
                "max_facts" => spec.max_facts = num()?,
                other => return Err(Error::InvalidArgument(format!("unknown world key `{other}`"))),
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "entities={}", self.entities.join(","));
        let _ = writeln!(s, "attributes={}", self.attributes.join(","));
        let _ = writeln!(s, "relations={}", self.relations.join(","));
        let _ = writeln!(s, "min_facts={}", self.min_facts);
        let _ = writeln!(s, "max_facts={}", self.max_facts);
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.entities.is_empty() || self.attributes.is_empty() || self.relations.is_empty() {
            return bad("world inventories must be non-empty");
        }
        if !(1..=3).contains(&self.min_facts) || !(self.min_facts..=3).contains(&self.max_facts) {
            return bad("facts per scene must lie within 1..=3");
        }
        if self.entities.len() < self.max_facts {
            return bad("not enough entities for distinct facts");
        }
        let mut seen = HashSet::new();
        for w in self.entities.iter().chain(&self.attributes).chain(&self.relations) {
            if w.split_whitespace().count() != 1 || FUNCTION_WORDS.contains(&w.as_str()) || !seen.insert(w) {
                return bad("inventory words must be distinct single words");
            }
        }
        Ok(())
    }

    pub fn vocab(&self) -> Vocabulary {
        let words = FUNCTION_WORDS
            .iter()
            .map(|s| s.to_string())
            .chain(self.entities.iter().cloned())
            .chain(self.attributes.iter().cloned())
            .chain(self.relations.iter().cloned());
        Vocabulary::build(words).expect("function words are never empty")
    }

    /// Condition vocabulary: entities, then attributes, then relations.
    pub fn cond_vocab(&self) -> Vec<String> {
        self.entities
            .iter()
            .map(|e| format!("e:{e}"))
            .chain(self.attributes.iter().map(|a| format!("a:{a}")))
            .chain(self.relations.iter().map(|r| format!("r:{r}")))
            .collect()
    }

    pub fn cond_vocab_size(&self) -> usize {
        self.entities.len() + self.attributes.len() + self.relations.len()
    }

    pub fn generate_scene<R: Rng + ?Sized>(&self, scene_id: usize, rng: &mut R) -> Scene {
        let n = rng.gen_range(self.min_facts..=self.max_facts);
        let entities: Vec<usize> = rand::seq::index::sample(rng, self.entities.len(), n).into_vec();
        let facts = entities
            .into_iter()
            .map(|entity| Fact {
                entity,
                attribute: rng.gen_range(0..self.attributes.len()),
                relation: rng.gen_range(0..self.relations.len()),
            })
            .collect();
        Scene { scene_id, facts }
    }

    fn phrase<'a>(&'a self, f: &Fact) -> [&'a str; 3] {
        [&self.attributes[f.attribute], &self.entities[f.entity], &self.relations[f.relation]]
    }

    /// Canonical caption words for a scene.
    pub fn render_words(&self, scene: &Scene) -> Vec<String> {
        let mut out: Vec<&str> = Vec::with_capacity(12);
        match scene.facts.as_slice() {
            [f] => {
                out.extend(["there", "is", "a"]);
                out.extend(self.phrase(f));
            }
            [f, g] => {
                out.push("a");
                out.extend(self.phrase(f));
                out.extend(["and", "a"]);
                out.extend(self.phrase(g));
            }
            [f, g, h] => {
                out.push("a");
                out.extend(self.phrase(f));
                out.push(",");
                out.extend(self.phrase(g));
                out.push("and");
                out.extend(self.phrase(h));
            }
            _ => unreachable!("scenes hold one to three facts"),
        }
        out.into_iter().map(str::to_string).collect()
    }

    pub fn render_caption(&self, scene: &Scene, vocab: &Vocabulary) -> Vec<TokenId> {
        self.render_words(scene)
            .iter()
            .map(|w| vocab.id(w).expect("rendered words are in the world vocabulary"))
            .collect()
    }

    pub fn condition_tokens(&self, scene: &Scene) -> Vec<TokenId> {
        let (ne, na) = (self.entities.len(), self.attributes.len());
        scene
            .facts
            .iter()
            .flat_map(|f| [f.entity, ne + f.attribute, ne + na + f.relation])
            .map(|i| i as TokenId)
            .collect()
    }
}

/// True for the template's fixed words (`there is a and ,`).
pub fn is_function_word(vocab: &Vocabulary, id: TokenId) -> bool {
    vocab.word(id).is_some_and(|w| FUNCTION_WORDS.contains(&w))
}

/// One corpus example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub scene_id: usize,
    pub facts: Vec<[String; 3]>,
    pub condition: Vec<TokenId>,
    pub caption: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub spec: WorldSpec,
    pub vocab: Vocabulary,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl Corpus {
    pub fn split(&self, split: Split) -> &[Example] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn examples(&self) -> impl Iterator<Item = &Example> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }

    pub fn find(&self, scene_id: usize) -> Option<&Example> {
        self.examples().find(|e| e.scene_id == scene_id)
    }

    pub fn split_jsonl(&self, split: Split) -> String {
        let mut out = String::new();
        for e in self.split(split) {
            out.push_str(&serde_json::to_string(e).expect("examples serialize"));
            out.push('\n');
        }
        out
    }

    /// SHA-256 over the three JSONL splits, hex encoded.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for split in [Split::Train, Split::Val, Split::Test] {
            h.update(split.name().as_bytes());
            h.update(self.split_jsonl(split).as_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Writes `train.jsonl`, `val.jsonl`, `test.jsonl`, `vocab.txt`,
    /// `cond_vocab.txt`, `world.txt` and `meta.txt` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for split in [Split::Train, Split::Val, Split::Test] {
            std::fs::write(dir.join(format!("{}.jsonl", split.name())), self.split_jsonl(split))?;
        }
        self.vocab.save(&dir.join("vocab.txt"))?;
        std::fs::write(dir.join("cond_vocab.txt"), self.spec.cond_vocab().join("\n") + "\n")?;
        std::fs::write(dir.join("world.txt"), self.spec.to_text())?;
        std::fs::write(dir.join("meta.txt"), format!("seed={}\nn={}\nhash={}\n", self.seed, self.len(), self.hash()))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let spec = WorldSpec::parse(&std::fs::read_to_string(dir.join("world.txt"))?)?;
        let vocab = Vocabulary::load(&dir.join("vocab.txt"))?;
        if vocab != spec.vocab() {
            return Err(Error::Format("vocab.txt does not match world.txt".into()));
        }
        let meta = crate::config::parse_pairs(&std::fs::read_to_string(dir.join("meta.txt"))?)?;
        let seed = meta
            .iter()
            .find(|(k, _)| k == "seed")
            .and_then(|(_, v)| v.parse().ok())
            .ok_or_else(|| Error::Format("meta.txt lacks seed".into()))?;
        let read = |split: Split| -> Result<Vec<Example>> {
            let text = std::fs::read_to_string(dir.join(format!("{}.jsonl", split.name())))?;
            text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
        };
        let corpus = Self { train: read(Split::Train)?, val: read(Split::Val)?, test: read(Split::Test)?, spec, vocab, seed };
        let cond = corpus.spec.cond_vocab_size();
        for e in corpus.examples() {
            if e.condition.iter().any(|&c| c as usize >= cond)
                || e.caption.iter().any(|&w| w as usize >= corpus.vocab.len() || Vocabulary::is_special(w))
            {
                return Err(Error::Format(format!("scene {} has ids outside the vocabularies", e.scene_id)));
            }
        }
        Ok(corpus)
    }
}

/// Generates `n` distinct scenes and splits them 80/10/10 (validation and
/// test get at least one scene each).
pub fn make_corpus(spec: &WorldSpec, n: usize, seed: u64) -> Result<Corpus> {
    spec.validate()?;
    if n < 3 {
        return Err(Error::InvalidArgument("corpus needs at least 3 scenes".into()));
    }
    let vocab = spec.vocab();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut examples = Vec::with_capacity(n);
    let mut attempts = 0usize;
    while examples.len() < n {
        attempts += 1;
        if attempts > 100 * n + 1000 {
            return Err(Error::InvalidArgument(format!(
                "could only find {} unique scenes, {n} requested",
                examples.len()
            )));
        }
        let scene = spec.generate_scene(examples.len(), &mut rng);
        if !seen.insert(scene.facts.clone()) {
            continue;
        }
        examples.push(Example {
            scene_id: scene.scene_id,
            facts: scene.facts.iter().map(|f| spec.phrase(f).map(|w| w.to_string())).map(|[a, e, r]| [e, a, r]).collect(),
            condition: spec.condition_tokens(&scene),
            caption: spec.render_caption(&scene, &vocab),
        });
    }
    let held = (n / 10).max(1);
    let test = examples.split_off(n - held);
    let val = examples.split_off(n - 2 * held);
    Ok(Corpus { spec: spec.clone(), vocab, train: examples, val, test, seed })
}

/// Replaces `round(n * (1 - ratio))` distinct positions of `x0` with random
/// words so that the Levenshtein ratio to `x0` lands on `1 - j/n`.
///
/// Replacement words are drawn from words absent from `x0` when the
/// vocabulary has any, which makes the ratio exact; otherwise draws are
/// retried until the measured ratio matches.
pub fn corrupt_to_ratio<R: Rng + ?Sized>(
    x0: &[TokenId],
    ratio: f64,
    vocab: &Vocabulary,
    rng: &mut R,
) -> Result<Vec<TokenId>> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!("ratio {ratio} outside [0, 1]")));
    }
    if x0.is_empty() {
        return Err(Error::InvalidArgument("cannot corrupt an empty caption".into()));
    }
    let n = x0.len();
    let j = (n as f64 * (1.0 - ratio)).round() as usize;
    let target = 1.0 - j as f64 / n as f64;
    let present: HashSet<TokenId> = x0.iter().copied().collect();
    let fresh: Vec<TokenId> =
        (2..vocab.len() as TokenId).filter(|w| !present.contains(w)).collect();

    let mut best: Option<(f64, Vec<TokenId>)> = None;
    for _ in 0..64 {
        let mut out = x0.to_vec();
        let mut positions: Vec<usize> = (0..n).collect();
        positions.shuffle(rng);
        for &p in &positions[..j] {
            out[p] = if fresh.is_empty() {
                loop {
                    let w = vocab.sample_random_word(rng)?;
                    if w != x0[p] || vocab.len() <= 3 {
                        break w;
                    }
                }
            } else {
                *fresh.choose(rng).unwrap()
            };
        }
        let got = lev_ratio(&out, x0);
        if (got - target).abs() < 1e-12 {
            return Ok(out);
        }
        if best.as_ref().is_none_or(|(b, _)| (got - target).abs() < (b - target).abs()) {
            best = Some((got, out));
        }
    }
    Ok(best.expect("at least one attempt").1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_world_vocabulary_size() {
        let spec = WorldSpec::default();
        spec.validate().unwrap();
        assert_eq!(spec.vocab().len(), 2 + 5 + 40 + 40 + 30);
        assert_eq!(spec.cond_vocab_size(), 110);
    }

    #[test]
    fn rendering_is_deterministic_and_bounded() {
        let spec = WorldSpec::default();
        let vocab = spec.vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for i in 0..200 {
            let scene = spec.generate_scene(i, &mut rng);
            let a = spec.render_caption(&scene, &vocab);
            assert_eq!(a, spec.render_caption(&scene, &vocab));
            assert!((6..=12).contains(&a.len()));
        }
    }

    #[test]
    fn templates() {
        let spec = WorldSpec::default();
        let f = |e, a, r| Fact { entity: e, attribute: a, relation: r };
        let one = Scene { scene_id: 0, facts: vec![f(0, 0, 0)] };
        assert_eq!(spec.render_words(&one).join(" "), "there is a red cat sleeping");
        let three = Scene { scene_id: 0, facts: vec![f(0, 0, 0), f(1, 1, 1), f(2, 2, 2)] };
        assert_eq!(
            spec.render_words(&three).join(" "),
            "a red cat sleeping , blue dog running and green bird sitting"
        );
        assert_eq!(spec.condition_tokens(&one), vec![0, 40, 80]);
    }

    #[test]
    fn distinct_scenes_have_distinct_conditions() {
        let spec = WorldSpec::default();
        let f = |e, a, r| Fact { entity: e, attribute: a, relation: r };
        let a = Scene { scene_id: 0, facts: vec![f(0, 1, 2)] };
        let b = Scene { scene_id: 1, facts: vec![f(0, 2, 1)] };
        assert_ne!(spec.condition_tokens(&a), spec.condition_tokens(&b));
    }

    #[test]
    fn corpus_splits() {
        let spec = WorldSpec::default();
        let c = make_corpus(&spec, 2000, 7).unwrap();
        assert_eq!((c.train.len(), c.val.len(), c.test.len()), (1600, 200, 200));
        let small = make_corpus(&spec, 3, 7).unwrap();
        assert_eq!((small.train.len(), small.val.len(), small.test.len()), (1, 1, 1));
        assert!(make_corpus(&spec, 2, 7).is_err());
    }

    #[test]
    fn corpus_needs_enough_unique_scenes() {
        let spec = WorldSpec {
            entities: vec!["cat".into()],
            attributes: vec!["red".into()],
            relations: vec!["sleeping".into()],
            min_facts: 1,
            max_facts: 1,
        };
        assert!(make_corpus(&spec, 3, 1).is_err());
    }

    #[test]
    fn spec_text_round_trip() {
        let spec = WorldSpec::default();
        assert_eq!(WorldSpec::parse(&spec.to_text()).unwrap(), spec);
        assert!(WorldSpec::parse("colors=red").is_err());
        assert!(WorldSpec::parse("entities=a,cat").is_err());
    }

    #[test]
    fn corruption_endpoints() {
        let vocab = WorldSpec::default().vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x0 = vocab.encode("a red cat sleeping and a blue dog running").unwrap();
        assert_eq!(corrupt_to_ratio(&x0, 1.0, &vocab, &mut rng).unwrap(), x0);
        let all = corrupt_to_ratio(&x0, 0.0, &vocab, &mut rng).unwrap();
        assert_eq!(lev_ratio(&all, &x0), 0.0);
        assert!(corrupt_to_ratio(&x0, 1.5, &vocab, &mut rng).is_err());
        assert!(corrupt_to_ratio(&x0, -0.1, &vocab, &mut rng).is_err());
    }

    #[test]
    fn corruption_half_of_ten() {
        let vocab = WorldSpec::default().vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0 = vocab.encode("a red cat sleeping , blue dog running and owl").unwrap();
        assert_eq!(x0.len(), 10);
        let out = corrupt_to_ratio(&x0, 0.5, &vocab, &mut rng).unwrap();
        assert_eq!(out.iter().zip(&x0).filter(|(a, b)| a != b).count(), 5);
        assert_eq!(lev_ratio(&out, &x0), 0.5);
    }
}
