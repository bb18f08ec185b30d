//! Edit operations, edit scripts, and the per-step noising sampler.
//!
//! An [`EditScript`] has one slot per caption token plus a leading sentinel
//! slot (slot 0) that stands for the `[START]` token. The sentinel may only
//! `KEEP` or `INSERT`, which is how a word gets placed before the first token.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{TokenId, Vocabulary};

/// The four Levenshtein edit operations.
///
/// The derived ordering (`Keep < Replace < Insert < Delete`) is the
/// tie-breaking priority used by the aligner; it also fixes the class index
/// of each op in the edit head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EditOp {
    Keep,
    Replace,
    Insert,
    Delete,
}

impl EditOp {
    pub const ALL: [EditOp; 4] = [EditOp::Keep, EditOp::Replace, EditOp::Insert, EditOp::Delete];
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// True for the ops that carry a content word.
    pub fn takes_content(self) -> bool {
        matches!(self, EditOp::Insert | EditOp::Replace)
    }

    pub fn letter(self) -> char {
        match self {
            EditOp::Keep => 'K',
            EditOp::Replace => 'R',
            EditOp::Insert => 'I',
            EditOp::Delete => 'D',
        }
    }
}

/// Where a token came from. `RandomWord` marks the absorbing state: the token
/// was touched by noising and will never be noised again.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Origin {
    Original,
    RandomWord,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Token {
    pub id: TokenId,
    pub origin: Origin,
}

impl Token {
    pub fn original(id: TokenId) -> Self {
        Self { id, origin: Origin::Original }
    }

    pub fn random(id: TokenId) -> Self {
        Self { id, origin: Origin::RandomWord }
    }
}

/// A caption at some diffusion step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptionState {
    pub tokens: Vec<Token>,
    pub step: usize,
    /// Length of the ground-truth caption, when known.
    pub gt_len_hint: Option<usize>,
}

impl CaptionState {
    /// A clean caption at step 0; every token is `Original`.
    pub fn clean(ids: &[TokenId]) -> Self {
        Self {
            tokens: ids.iter().map(|&id| Token::original(id)).collect(),
            step: 0,
            gt_len_hint: Some(ids.len()),
        }
    }

    /// An arbitrary reference caption entering the denoiser at `step`.
    pub fn reference(ids: &[TokenId], step: usize) -> Self {
        Self {
            tokens: ids.iter().map(|&id| Token::original(id)).collect(),
            step,
            gt_len_hint: None,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn ids(&self) -> Vec<TokenId> {
        self.tokens.iter().map(|t| t.id).collect()
    }

    pub fn count_origin(&self, origin: Origin) -> usize {
        self.tokens.iter().filter(|t| t.origin == origin).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Slot {
    pub op: EditOp,
    pub content: Option<TokenId>,
}

impl Slot {
    pub const KEEP: Slot = Slot { op: EditOp::Keep, content: None };
    pub const DELETE: Slot = Slot { op: EditOp::Delete, content: None };

    pub fn replace(word: TokenId) -> Self {
        Self { op: EditOp::Replace, content: Some(word) }
    }

    pub fn insert(word: TokenId) -> Self {
        Self { op: EditOp::Insert, content: Some(word) }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct EditScript {
    pub slots: Vec<Slot>,
}

impl EditScript {
    pub fn new(slots: Vec<Slot>) -> Self {
        Self { slots }
    }

    pub fn all_keep(caption_len: usize) -> Self {
        Self { slots: vec![Slot::KEEP; caption_len + 1] }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn ops(&self) -> impl Iterator<Item = EditOp> + '_ {
        self.slots.iter().map(|s| s.op)
    }

    pub fn is_identity(&self) -> bool {
        self.slots.iter().all(|s| s.op == EditOp::Keep)
    }

    /// Checks the slot invariants against a caption of `caption_len` tokens.
    pub fn validate(&self, caption_len: usize) -> Result<()> {
        if self.slots.len() != caption_len + 1 {
            return Err(Error::ScriptLength { got: self.slots.len(), len: caption_len });
        }
        for (i, s) in self.slots.iter().enumerate() {
            if i == 0 && !matches!(s.op, EditOp::Keep | EditOp::Insert) {
                return Err(Error::MalformedScript {
                    slot: 0,
                    reason: "sentinel slot only allows KEEP or INSERT",
                });
            }
            match (s.op.takes_content(), s.content) {
                (true, None) => {
                    return Err(Error::MalformedScript { slot: i, reason: "missing content word" })
                }
                (false, Some(_)) => {
                    return Err(Error::MalformedScript {
                        slot: i,
                        reason: "content word on KEEP/DELETE",
                    })
                }
                (true, Some(w)) if Vocabulary::is_special(w) => {
                    return Err(Error::MalformedScript {
                        slot: i,
                        reason: "content word is a special token",
                    })
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Renders as e.g. `K K R(dog) D I(red)`; the sentinel slot comes first.
    pub fn render(&self, vocab: &Vocabulary) -> String {
        self.slots
            .iter()
            .map(|s| match s.content {
                Some(w) => format!("{}({})", s.op.letter(), vocab.word(w).unwrap_or("<unk>")),
                None => s.op.letter().to_string(),
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

impl fmt::Display for EditScript {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, s) in self.slots.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            match s.content {
                Some(w) => write!(f, "{}({w})", s.op.letter())?,
                None => write!(f, "{}", s.op.letter())?,
            }
        }
        Ok(())
    }
}

/// Which process is applying a script. Determines the origin of content
/// words and the direction of the step counter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Content words are random words; the step counter increments.
    Noising,
    /// Content words are predictions; the step counter decrements (saturating).
    Denoising,
}

/// Applies `script` to `caption`.
pub fn apply_script(
    caption: &CaptionState,
    script: &EditScript,
    direction: Direction,
) -> Result<CaptionState> {
    apply_script_tracked(caption, script, direction).map(|(c, _)| c)
}

/// Like [`apply_script`], additionally returning where each input token ended
/// up: `Some(j)` if token `i` survives (KEEP or INSERT host) at output index
/// `j`, `None` if it was deleted or replaced.
pub fn apply_script_tracked(
    caption: &CaptionState,
    script: &EditScript,
    direction: Direction,
) -> Result<(CaptionState, Vec<Option<usize>>)> {
    script.validate(caption.len())?;
    let content_origin = match direction {
        Direction::Noising => Origin::RandomWord,
        Direction::Denoising => Origin::Original,
    };
    let mut out = Vec::with_capacity(caption.len() + script.len());
    let mut moved = Vec::with_capacity(caption.len());

    if let Some(w) = script.slots[0].content {
        out.push(Token { id: w, origin: content_origin });
    }
    for (token, slot) in caption.tokens.iter().zip(&script.slots[1..]) {
        match slot.op {
            EditOp::Keep => {
                moved.push(Some(out.len()));
                out.push(*token);
            }
            EditOp::Delete => moved.push(None),
            EditOp::Replace => {
                moved.push(None);
                out.push(Token { id: slot.content.unwrap(), origin: content_origin });
            }
            EditOp::Insert => {
                moved.push(Some(out.len()));
                out.push(*token);
                out.push(Token { id: slot.content.unwrap(), origin: content_origin });
            }
        }
    }
    let step = match direction {
        Direction::Noising => caption.step + 1,
        Direction::Denoising => caption.step.saturating_sub(1),
    };
    Ok((
        CaptionState { tokens: out, step, gt_len_hint: caption.gt_len_hint },
        moved,
    ))
}

/// Per-step transition probabilities for a non-absorbed token.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRates {
    pub replace: f64,
    pub delete: f64,
    pub insert: f64,
    pub keep: f64,
}

impl StepRates {
    /// Total absorption rate `replace + delete + insert`.
    pub fn absorb(&self) -> f64 {
        1.0 - self.keep
    }
}

/// Parameters of the noising transition matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    w_replace: f64,
    w_delete: f64,
    w_insert: f64,
    target_len: usize,
    len_gain_clamp: (f64, f64),
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            steps: 10,
            w_replace: 0.5,
            w_delete: 0.25,
            w_insert: 0.25,
            target_len: 10,
            len_gain_clamp: (0.5, 2.0),
        }
    }
}

impl NoiseSchedule {
    pub fn new(
        steps: usize,
        weights: (f64, f64, f64),
        target_len: usize,
        len_gain_clamp: (f64, f64),
    ) -> Result<Self> {
        let (r, d, i) = weights;
        let bad = |m: &str| Err(Error::InvalidSchedule(m.to_string()));
        if steps < 1 {
            return bad("T must be at least 1");
        }
        if [r, d, i].iter().any(|w| !w.is_finite() || *w < 0.0) {
            return bad("edit-type weights must be non-negative");
        }
        let sum = r + d + i;
        if sum > 1.0 + 1e-12 {
            return bad("edit-type weights must sum to at most 1");
        }
        if sum <= 0.0 {
            return bad("edit-type weights must not all be zero");
        }
        if target_len < 1 {
            return bad("target length must be at least 1");
        }
        let (lo, hi) = len_gain_clamp;
        if !(lo > 0.0 && lo <= 1.0 && 1.0 <= hi && hi.is_finite()) {
            return bad("length clamp must satisfy 0 < lo <= 1 <= hi");
        }
        Ok(Self { steps, w_replace: r, w_delete: d, w_insert: i, target_len, len_gain_clamp })
    }

    /// Replace-heavy defaults, `(0.5, 0.25, 0.25)`.
    pub fn replace_heavy(steps: usize) -> Result<Self> {
        Self::with_weights(steps, (0.5, 0.25, 0.25))
    }

    pub fn even(steps: usize) -> Result<Self> {
        Self::with_weights(steps, (1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0))
    }

    pub fn replace_only(steps: usize) -> Result<Self> {
        Self::with_weights(steps, (1.0, 0.0, 0.0))
    }

    pub fn with_weights(steps: usize, weights: (f64, f64, f64)) -> Result<Self> {
        let d = Self::default();
        Self::new(steps, weights, d.target_len, d.len_gain_clamp)
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn weights(&self) -> (f64, f64, f64) {
        (self.w_replace, self.w_delete, self.w_insert)
    }

    pub fn target_len(&self) -> usize {
        self.target_len
    }

    pub fn len_gain_clamp(&self) -> (f64, f64) {
        self.len_gain_clamp
    }

    /// Absorption rate at step `t`: `1 / (T - t + 1)`. Surviving tokens are
    /// absorbed uniformly over the steps and everything is absorbed at `T`.
    pub fn absorb_rate(&self, t: usize) -> f64 {
        1.0 / (self.steps - t + 1) as f64
    }

    /// Transition probabilities at step `t` for a caption of current length
    /// `len`. Insertions are favored when the caption is shorter than the
    /// target length and deletions when it is longer.
    ///
    /// `_gt_len` is accepted for callers that know the ground-truth length;
    /// the current law only depends on `len` and the target length.
    pub fn step_rates(&self, t: usize, len: usize, _gt_len: Option<usize>) -> Result<StepRates> {
        if t < 1 || t > self.steps {
            return Err(Error::StepOutOfRange { got: t, max: self.steps });
        }
        let nu = self.absorb_rate(t);
        let (lo, hi) = self.len_gain_clamp;
        let l = len.max(1) as f64;
        let target = self.target_len as f64;
        let ins = self.w_insert * (target / l).clamp(lo, hi);
        let del = self.w_delete * (l / target).clamp(lo, hi);
        let rep = self.w_replace;
        let z = rep + del + ins;
        Ok(StepRates {
            replace: nu * rep / z,
            delete: nu * del / z,
            insert: nu * ins / z,
            keep: 1.0 - nu,
        })
    }
}

/// Samples one forward noising step `x_{t-1} -> x_t`.
///
/// Random-word tokens always `KEEP`. Each `Original` token is absorbed with
/// probability `absorb_rate(t)`, split between REPLACE, DELETE and INSERT by
/// [`NoiseSchedule::step_rates`]. An INSERT host is absorbed too: it keeps
/// its word but is marked `RandomWord` so it is never noised again. The
/// sentinel slot always keeps.
pub fn sample_noising_step<R: Rng + ?Sized>(
    caption: &CaptionState,
    schedule: &NoiseSchedule,
    t: usize,
    vocab: &Vocabulary,
    rng: &mut R,
) -> Result<(EditScript, CaptionState)> {
    if t < 1 || t > schedule.steps() {
        return Err(Error::StepOutOfRange { got: t, max: schedule.steps() });
    }
    if caption.step + 1 != t {
        return Err(Error::StepMismatch { got: caption.step, expected: t - 1 });
    }
    let rates = schedule.step_rates(t, caption.len(), caption.gt_len_hint)?;
    let nu = schedule.absorb_rate(t);
    let cut_replace = rates.replace;
    let cut_delete = rates.replace + rates.delete;

    let mut slots = Vec::with_capacity(caption.len() + 1);
    slots.push(Slot::KEEP);
    for token in &caption.tokens {
        if token.origin == Origin::RandomWord {
            slots.push(Slot::KEEP);
            continue;
        }
        let u: f64 = rng.gen();
        let slot = if u >= nu {
            Slot::KEEP
        } else if u < cut_replace {
            Slot::replace(vocab.sample_random_word(rng)?)
        } else if u < cut_delete {
            Slot::DELETE
        } else {
            Slot::insert(vocab.sample_random_word(rng)?)
        };
        slots.push(slot);
    }
    let script = EditScript::new(slots);
    let (mut next, moved) = apply_script_tracked(caption, &script, Direction::Noising)?;
    for (slot, dest) in script.slots[1..].iter().zip(moved) {
        if let (EditOp::Insert, Some(j)) = (slot.op, dest) {
            next.tokens[j].origin = Origin::RandomWord;
        }
    }
    Ok((script, next))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vocab() -> Vocabulary {
        Vocabulary::build(["a", "cat", "sat", "mat", "dog", "red", "on"]).unwrap()
    }

    fn caption(v: &Vocabulary, s: &str) -> CaptionState {
        CaptionState::clean(&v.encode(s).unwrap())
    }

    #[test]
    fn op_ordering_matches_tie_break() {
        assert!(EditOp::Keep < EditOp::Replace);
        assert!(EditOp::Replace < EditOp::Insert);
        assert!(EditOp::Insert < EditOp::Delete);
    }

    #[test]
    fn mixed_script() {
        let v = vocab();
        let c = caption(&v, "a cat sat mat");
        let s = EditScript::new(vec![
            Slot::KEEP,
            Slot::KEEP,
            Slot::replace(v.id("dog").unwrap()),
            Slot::DELETE,
            Slot::insert(v.id("red").unwrap()),
        ]);
        let out = apply_script(&c, &s, Direction::Denoising).unwrap();
        assert_eq!(v.decode(&out.ids()), "a dog mat red");
        assert_eq!(s.render(&v), "K K R(dog) D I(red)");
    }

    #[test]
    fn sentinel_insert_prepends() {
        let v = vocab();
        let c = caption(&v, "red cat");
        let s = EditScript::new(vec![Slot::insert(v.id("a").unwrap()), Slot::KEEP, Slot::KEEP]);
        let out = apply_script(&c, &s, Direction::Denoising).unwrap();
        assert_eq!(v.decode(&out.ids()), "a red cat");
    }

    #[test]
    fn malformed_scripts_are_rejected() {
        let v = vocab();
        let c = caption(&v, "red cat");
        let short = EditScript::new(vec![Slot::KEEP, Slot::KEEP]);
        assert!(matches!(
            apply_script(&c, &short, Direction::Denoising),
            Err(Error::ScriptLength { got: 2, len: 2 })
        ));
        let missing = EditScript::new(vec![
            Slot::KEEP,
            Slot { op: EditOp::Insert, content: None },
            Slot::KEEP,
        ]);
        assert!(apply_script(&c, &missing, Direction::Denoising).is_err());
        let sentinel_delete = EditScript::new(vec![Slot::DELETE, Slot::KEEP, Slot::KEEP]);
        assert!(apply_script(&c, &sentinel_delete, Direction::Denoising).is_err());
        let sentinel_replace = EditScript::new(vec![Slot::replace(3), Slot::KEEP, Slot::KEEP]);
        assert!(apply_script(&c, &sentinel_replace, Direction::Denoising).is_err());
        let special = EditScript::new(vec![Slot::KEEP, Slot::replace(0), Slot::KEEP]);
        assert!(apply_script(&c, &special, Direction::Denoising).is_err());
    }

    #[test]
    fn step_counter_direction() {
        let v = vocab();
        let mut c = caption(&v, "a cat");
        c.step = 3;
        let s = EditScript::all_keep(2);
        assert_eq!(apply_script(&c, &s, Direction::Denoising).unwrap().step, 2);
        assert_eq!(apply_script(&c, &s, Direction::Noising).unwrap().step, 4);
        c.step = 0;
        assert_eq!(apply_script(&c, &s, Direction::Denoising).unwrap().step, 0);
    }

    #[test]
    fn schedule_validation() {
        assert!(NoiseSchedule::new(0, (0.5, 0.25, 0.25), 10, (0.5, 2.0)).is_err());
        assert!(NoiseSchedule::new(10, (0.0, 0.0, 0.0), 10, (0.5, 2.0)).is_err());
        assert!(NoiseSchedule::new(10, (0.7, 0.3, 0.3), 10, (0.5, 2.0)).is_err());
        assert!(NoiseSchedule::new(10, (-0.1, 0.3, 0.3), 10, (0.5, 2.0)).is_err());
        assert!(NoiseSchedule::new(10, (0.5, 0.25, 0.25), 10, (1.5, 2.0)).is_err());
        assert!(NoiseSchedule::even(10).is_ok());
        assert!(NoiseSchedule::replace_only(10).is_ok());
    }

    #[test]
    fn rates_at_final_step_absorb_everything() {
        let s = NoiseSchedule::default();
        for len in [0, 1, 5, 10, 30] {
            let r = s.step_rates(10, len, None).unwrap();
            assert_eq!(r.keep, 0.0);
            assert!((r.replace + r.delete + r.insert - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rates_first_step() {
        let s = NoiseSchedule::default();
        let r = s.step_rates(1, 7, None).unwrap();
        assert!((r.absorb() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn rates_at_target_length_follow_weights() {
        let s = NoiseSchedule::default();
        for t in 1..=10 {
            let r = s.step_rates(t, 10, Some(10)).unwrap();
            let nu = 1.0 / (11 - t) as f64;
            assert!((r.replace - 0.5 * nu).abs() < 1e-15);
            assert!((r.delete - 0.25 * nu).abs() < 1e-15);
            assert!((r.insert - 0.25 * nu).abs() < 1e-15);
        }
    }

    #[test]
    fn rates_out_of_range() {
        let s = NoiseSchedule::default();
        assert!(s.step_rates(0, 5, None).is_err());
        assert!(s.step_rates(11, 5, None).is_err());
    }

    #[test]
    fn replace_only_final_step_randomizes_in_place() {
        let v = vocab();
        let s = NoiseSchedule::new(4, (1.0, 0.0, 0.0), 10, (0.5, 2.0)).unwrap();
        let mut c = caption(&v, "a red cat sat on mat");
        c.step = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (script, out) = sample_noising_step(&c, &s, 4, &v, &mut rng).unwrap();
        assert_eq!(out.len(), 6);
        assert!(out.tokens.iter().all(|t| t.origin == Origin::RandomWord));
        assert!(script.slots[1..].iter().all(|s| s.op == EditOp::Replace));
        assert_eq!(script.slots[0], Slot::KEEP);
    }

    #[test]
    fn random_words_are_absorbing() {
        let v = vocab();
        let s = NoiseSchedule::default();
        let c = CaptionState {
            tokens: v.encode("a cat sat").unwrap().into_iter().map(Token::random).collect(),
            step: 9,
            gt_len_hint: Some(3),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (script, out) = sample_noising_step(&c, &s, 10, &v, &mut rng).unwrap();
        assert!(script.is_identity());
        assert_eq!(out.tokens, c.tokens);
    }

    #[test]
    fn noising_step_mismatch() {
        let v = vocab();
        let c = caption(&v, "a cat");
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(matches!(
            sample_noising_step(&c, &NoiseSchedule::default(), 2, &v, &mut rng),
            Err(Error::StepMismatch { .. })
        ));
    }
}
