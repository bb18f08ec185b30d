//! Forward trajectories, training samples, and the iterative denoising loop.

use std::collections::BTreeMap;

use rand::Rng;
use serde::Serialize;

use crate::edit::{
    apply_script_tracked, sample_noising_step, CaptionState, Direction, EditOp, EditScript,
    NoiseSchedule, Slot, Token,
};
use crate::error::{Error, Result};
use crate::vocab::{TokenId, Vocabulary};

/// Anything that proposes a denoising script for a caption at step `t`.
pub trait ScriptPredictor {
    fn predict_script(&self, condition: &[TokenId], caption: &CaptionState, t: usize) -> Result<EditScript>;
}

/// Runs the noising chain `x_0 -> x_1 -> ... -> x_T`; the returned vector has
/// `T + 1` states.
pub fn noise_trajectory<R: Rng + ?Sized>(
    x0: &[TokenId],
    schedule: &NoiseSchedule,
    vocab: &Vocabulary,
    rng: &mut R,
) -> Result<Vec<CaptionState>> {
    noise_prefix(x0, schedule, schedule.steps(), vocab, rng)
}

fn noise_prefix<R: Rng + ?Sized>(
    x0: &[TokenId],
    schedule: &NoiseSchedule,
    upto: usize,
    vocab: &Vocabulary,
    rng: &mut R,
) -> Result<Vec<CaptionState>> {
    if x0.is_empty() {
        return Err(Error::InvalidArgument("cannot noise an empty caption".into()));
    }
    let mut states = Vec::with_capacity(upto + 1);
    states.push(CaptionState::clean(x0));
    for t in 1..=upto {
        let (_, next) = sample_noising_step(states.last().unwrap(), schedule, t, vocab, rng)?;
        states.push(next);
    }
    Ok(states)
}

/// Draws `t` uniformly from `1..=T` and noises a fresh trajectory up to it.
pub fn sample_training_example<R: Rng + ?Sized>(
    x0: &[TokenId],
    schedule: &NoiseSchedule,
    vocab: &Vocabulary,
    rng: &mut R,
) -> Result<(CaptionState, usize)> {
    let t = rng.gen_range(1..=schedule.steps());
    let mut states = noise_prefix(x0, schedule, t, vocab, rng)?;
    Ok((states.pop().unwrap(), t))
}

/// `n` uniform random words, all in the absorbing state, at step `steps`.
pub fn make_random_sequence<R: Rng + ?Sized>(
    n: usize,
    steps: usize,
    vocab: &Vocabulary,
    rng: &mut R,
) -> Result<CaptionState> {
    if n < 1 {
        return Err(Error::InvalidArgument("random sequence length must be at least 1".into()));
    }
    let tokens = (0..n)
        .map(|_| vocab.sample_random_word(rng).map(Token::random))
        .collect::<Result<Vec<_>>>()?;
    Ok(CaptionState { tokens, step: steps, gt_len_hint: None })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PinMode {
    /// Pins are only measured afterwards.
    Soft,
    /// Pinned tokens are never replaced or deleted.
    Hard,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep {
    pub t: usize,
    pub script: EditScript,
    pub before: CaptionState,
    pub after: CaptionState,
}

impl TraceStep {
    /// One JSON line: `{t, ops, words, caption_before, caption_after}`.
    pub fn to_json(&self, vocab: &Vocabulary) -> serde_json::Value {
        let ops: Vec<String> = self.script.ops().map(|o| o.letter().to_string()).collect();
        let words: Vec<Option<&str>> =
            self.script.slots.iter().map(|s| s.content.and_then(|w| vocab.word(w))).collect();
        serde_json::json!({
            "t": self.t,
            "ops": ops,
            "words": words,
            "caption_before": vocab.decode(&self.before.ids()),
            "caption_after": vocab.decode(&self.after.ids()),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Denoised {
    pub caption: CaptionState,
    pub trace: Vec<TraceStep>,
    /// Final positions of the pinned tokens, in pin order.
    pub pins: Vec<Option<usize>>,
}

/// Iterates `t = steps, steps-1, ..., 1`, applying the predicted script each
/// time. In hard mode, REPLACE and DELETE at pinned positions become KEEP;
/// pinned positions are tracked as the caption changes length.
pub fn denoise_loop<P: ScriptPredictor + ?Sized>(
    model: &P,
    condition: &[TokenId],
    input: &CaptionState,
    steps: usize,
    pinned: &BTreeMap<usize, TokenId>,
    mode: PinMode,
) -> Result<Denoised> {
    if steps < 1 {
        return Err(Error::InvalidArgument("need at least one denoising step".into()));
    }
    for (&pos, &id) in pinned {
        match input.tokens.get(pos) {
            None => {
                return Err(Error::InvalidArgument(format!(
                    "pinned position {pos} outside caption of length {}",
                    input.len()
                )))
            }
            Some(tok) if tok.id != id => {
                return Err(Error::InvalidArgument(format!(
                    "pinned token {id} does not match caption token {} at position {pos}",
                    tok.id
                )))
            }
            _ => {}
        }
    }
    let mut pins: Vec<Option<usize>> = pinned.keys().map(|&p| Some(p)).collect();
    let mut caption = input.clone();
    let mut trace = Vec::with_capacity(steps);
    for t in (1..=steps).rev() {
        let mut script = model.predict_script(condition, &caption, t)?;
        if mode == PinMode::Hard {
            for pos in pins.iter().flatten() {
                let slot = &mut script.slots[pos + 1];
                if matches!(slot.op, EditOp::Replace | EditOp::Delete) {
                    *slot = Slot::KEEP;
                }
            }
        }
        let (next, moved) = apply_script_tracked(&caption, &script, Direction::Denoising)?;
        for p in pins.iter_mut() {
            *p = p.and_then(|i| moved[i]);
        }
        trace.push(TraceStep { t, script, before: caption, after: next.clone() });
        caption = next;
    }
    Ok(Denoised { caption, trace, pins })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::edit::Origin;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct KeepAll;

    impl ScriptPredictor for KeepAll {
        fn predict_script(&self, _: &[TokenId], c: &CaptionState, _: usize) -> Result<EditScript> {
            Ok(EditScript::all_keep(c.len()))
        }
    }

    /// Replaces or deletes everything it sees.
    struct Vandal(TokenId);

    impl ScriptPredictor for Vandal {
        fn predict_script(&self, _: &[TokenId], c: &CaptionState, t: usize) -> Result<EditScript> {
            let mut slots = vec![Slot::KEEP];
            for i in 0..c.len() {
                slots.push(if (i + t).is_multiple_of(2) { Slot::replace(self.0) } else { Slot::DELETE });
            }
            Ok(EditScript::new(slots))
        }
    }

    fn vocab() -> Vocabulary {
        Vocabulary::build(["a", "red", "cat", "on", "the", "bench", "dog", "sat"]).unwrap()
    }

    #[test]
    fn single_step_schedule_absorbs_everything() {
        let v = vocab();
        let s = NoiseSchedule::with_weights(1, (0.5, 0.25, 0.25)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let traj = noise_trajectory(&v.encode("a red cat").unwrap(), &s, &v, &mut rng).unwrap();
            assert_eq!(traj.len(), 2);
            assert_eq!(traj[1].count_origin(Origin::Original), 0);
        }
    }

    #[test]
    fn trajectory_bookkeeping() {
        let v = vocab();
        let s = NoiseSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0 = v.encode("a red cat on the bench").unwrap();
        let traj = noise_trajectory(&x0, &s, &v, &mut rng).unwrap();
        assert_eq!(traj.len(), 11);
        assert_eq!(traj[0].ids(), x0);
        for (t, st) in traj.iter().enumerate() {
            assert_eq!(st.step, t);
            assert_eq!(st.gt_len_hint, Some(6));
        }
        assert!(noise_trajectory(&[], &s, &v, &mut rng).is_err());
    }

    #[test]
    fn training_example_never_at_zero() {
        let v = vocab();
        let s = NoiseSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0 = v.encode("a cat").unwrap();
        for _ in 0..200 {
            let (x_t, t) = sample_training_example(&x0, &s, &v, &mut rng).unwrap();
            assert!((1..=10).contains(&t));
            assert_eq!(x_t.step, t);
            assert_eq!(x_t.gt_len_hint, Some(2));
        }
    }

    #[test]
    fn random_sequence_lengths() {
        let v = vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = make_random_sequence(10, 10, &v, &mut rng).unwrap();
        assert_eq!(c.len(), 10);
        assert_eq!(c.count_origin(Origin::RandomWord), 10);
        assert_eq!(make_random_sequence(1, 10, &v, &mut rng).unwrap().len(), 1);
        assert!(make_random_sequence(0, 10, &v, &mut rng).is_err());
    }

    #[test]
    fn keep_all_model_is_identity() {
        let v = vocab();
        let input = CaptionState::reference(&v.encode("dog sat the").unwrap(), 5);
        for steps in [1, 3, 7] {
            let out = denoise_loop(&KeepAll, &[], &input, steps, &BTreeMap::new(), PinMode::Soft).unwrap();
            assert_eq!(out.caption.ids(), input.ids());
            assert_eq!(out.trace.len(), steps);
            assert_eq!(out.caption.step, 5usize.saturating_sub(steps));
        }
    }

    #[test]
    fn hard_pins_survive_a_hostile_model() {
        let v = vocab();
        let ids = v.encode("dog red sat the bench cat").unwrap();
        let input = CaptionState::reference(&ids, 10);
        let pins = BTreeMap::from([(1, v.id("red").unwrap()), (4, v.id("bench").unwrap())]);
        let out = denoise_loop(&Vandal(v.id("on").unwrap()), &[], &input, 10, &pins, PinMode::Hard).unwrap();
        let words = v.decode(&out.caption.ids());
        let red = words.split(' ').position(|w| w == "red").unwrap();
        let bench = words.split(' ').position(|w| w == "bench").unwrap();
        assert!(red < bench, "{words}");
        assert!(out.pins.iter().all(Option::is_some));
        for step in &out.trace {
            assert_eq!(step.script.len(), step.before.len() + 1);
        }
    }

    #[test]
    fn bad_pins_are_rejected() {
        let v = vocab();
        let input = CaptionState::reference(&v.encode("dog red").unwrap(), 10);
        let out_of_range = BTreeMap::from([(5, v.id("red").unwrap())]);
        assert!(denoise_loop(&KeepAll, &[], &input, 1, &out_of_range, PinMode::Hard).is_err());
        let wrong = BTreeMap::from([(0, v.id("red").unwrap())]);
        assert!(denoise_loop(&KeepAll, &[], &input, 1, &wrong, PinMode::Hard).is_err());
        assert!(denoise_loop(&KeepAll, &[], &input, 0, &BTreeMap::new(), PinMode::Soft).is_err());
    }
}
