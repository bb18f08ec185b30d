//! Caption metrics and the evaluation harness.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::align::lev_ratio;
use crate::diffusion::{denoise_loop, make_random_sequence, sample_training_example, PinMode};
use crate::edit::{CaptionState, NoiseSchedule};
use crate::error::{Error, Result};
use crate::model::{check_vocab, DenoiserModel};
use crate::train::derive_seed;
use crate::vocab::{TokenId, Vocabulary};
use crate::world::{corrupt_to_ratio, Example};

fn need_ref(reference: &[TokenId]) -> Result<()> {
    if reference.is_empty() {
        return Err(Error::InvalidArgument("empty reference".into()));
    }
    Ok(())
}

pub fn exact_match(hyp: &[TokenId], reference: &[TokenId]) -> Result<f64> {
    need_ref(reference)?;
    Ok(if hyp == reference { 1.0 } else { 0.0 })
}

/// F1 over token multisets.
pub fn token_f1(hyp: &[TokenId], reference: &[TokenId]) -> Result<f64> {
    need_ref(reference)?;
    if hyp.is_empty() {
        return Ok(0.0);
    }
    let mut counts: HashMap<TokenId, usize> = HashMap::new();
    for &w in reference {
        *counts.entry(w).or_default() += 1;
    }
    let mut overlap = 0usize;
    for w in hyp {
        if let Some(c) = counts.get_mut(w).filter(|c| **c > 0) {
            *c -= 1;
            overlap += 1;
        }
    }
    if overlap == 0 {
        return Ok(0.0);
    }
    let p = overlap as f64 / hyp.len() as f64;
    let r = overlap as f64 / reference.len() as f64;
    Ok(2.0 * p * r / (p + r))
}

pub fn mean_ratio(pairs: &[(Vec<TokenId>, Vec<TokenId>)]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    pairs.iter().map(|(a, b)| lev_ratio(a, b)).sum::<f64>() / pairs.len() as f64
}

/// Smoothing added to zero n-gram matches.
pub const BLEU_EPSILON: f64 = 1e-9;

fn ngrams(seq: &[TokenId], n: usize) -> HashMap<&[TokenId], usize> {
    let mut out = HashMap::new();
    if seq.len() >= n {
        for g in seq.windows(n) {
            *out.entry(g).or_default() += 1;
        }
    }
    out
}

/// Sentence BLEU-N: geometric mean of clipped n-gram precisions for
/// `1..=n` times the brevity penalty. A precision with no matches becomes
/// `BLEU_EPSILON / candidates`. The effective reference length is the
/// reference length closest to the hypothesis (shorter wins ties).
pub fn bleu(hyp: &[TokenId], refs: &[&[TokenId]], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidArgument("BLEU order must be at least 1".into()));
    }
    if refs.is_empty() {
        return Err(Error::InvalidArgument("BLEU needs a reference".into()));
    }
    if hyp.is_empty() {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for k in 1..=n {
        let cand = ngrams(hyp, k);
        let total: usize = cand.values().sum();
        let ref_grams: Vec<_> = refs.iter().map(|r| ngrams(r, k)).collect();
        let clipped: usize = cand
            .iter()
            .map(|(g, &c)| c.min(ref_grams.iter().map(|rg| rg.get(g).copied().unwrap_or(0)).max().unwrap_or(0)))
            .sum();
        let p = if clipped == 0 { BLEU_EPSILON / total.max(1) as f64 } else { clipped as f64 / total as f64 };
        log_sum += p.ln();
    }
    let c = hyp.len() as f64;
    let r = refs.iter().map(|r| r.len()).min_by_key(|&l| (l.abs_diff(hyp.len()), l)).unwrap() as f64;
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    Ok(bp * (log_sum / n as f64).exp())
}

/// True when `pins` occur in `output` in order (not necessarily adjacent).
pub fn is_subsequence(pins: &[TokenId], output: &[TokenId]) -> bool {
    let mut it = output.iter();
    pins.iter().all(|p| it.any(|w| w == p))
}

/// Fraction of `(output, pins)` pairs whose pins appear in order.
pub fn retention_rate(pairs: &[(Vec<TokenId>, Vec<TokenId>)]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    pairs.iter().filter(|(out, pins)| is_subsequence(pins, out)).count() as f64 / pairs.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EvalMode {
    /// Input is the ground truth noised to a `t` drawn as in training.
    Indomain,
    /// Input is the ground truth with words replaced down to this ratio.
    OodRatio { ratio: f64 },
    /// Input is this many uniform random words.
    RandomRef { len: usize },
    /// Ten random words with ground-truth control words pinned in order.
    Control { pins: usize, pin_mode: PinMode },
}

impl EvalMode {
    /// Parses `indomain`, `ood:R`, `random:N`, `control:hard` or
    /// `control:soft` (optionally `control:hard:P` for `P` pins).
    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("unknown eval mode `{s}`"));
        let parts: Vec<&str> = s.split(':').collect();
        match parts.as_slice() {
            ["indomain"] => Ok(Self::Indomain),
            ["ood", r] => {
                let ratio: f64 = r.parse().map_err(|_| bad())?;
                if !(0.0..=1.0).contains(&ratio) {
                    return Err(bad());
                }
                Ok(Self::OodRatio { ratio })
            }
            ["random", n] => Ok(Self::RandomRef { len: n.parse().ok().filter(|&n| n > 0).ok_or_else(bad)? }),
            ["control", m, rest @ ..] => {
                let pin_mode = match *m {
                    "hard" => PinMode::Hard,
                    "soft" => PinMode::Soft,
                    _ => return Err(bad()),
                };
                let pins = match rest {
                    [] => 2,
                    [p] => p.parse().ok().filter(|&p| p > 0).ok_or_else(bad)?,
                    _ => return Err(bad()),
                };
                Ok(Self::Control { pins, pin_mode })
            }
            _ => Err(bad()),
        }
    }

    pub fn label(&self) -> String {
        match self {
            Self::Indomain => "indomain".into(),
            Self::OodRatio { ratio } => format!("ood:{ratio}"),
            Self::RandomRef { len } => format!("random:{len}"),
            Self::Control { pins, pin_mode } => {
                format!("control:{}:{pins}", if *pin_mode == PinMode::Hard { "hard" } else { "soft" })
            }
        }
    }

    fn tag(&self) -> u64 {
        match self {
            Self::Indomain => 1,
            Self::OodRatio { ratio } => 2 ^ (ratio.to_bits() << 8),
            Self::RandomRef { len } => 3 ^ ((*len as u64) << 8),
            Self::Control { .. } => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalConfig {
    pub mode: EvalMode,
    pub steps: usize,
    pub seed: u64,
    /// Evaluate at most this many examples.
    pub limit: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Row {
    pub scene_id: usize,
    pub input: String,
    pub output: String,
    pub reference: String,
    pub exact_match: f64,
    pub token_f1: f64,
    pub bleu4: f64,
    pub ratio: f64,
    pub input_ratio: f64,
    /// Pinned words, for control mode.
    pub pins: Option<Vec<String>>,
    pub retained: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregates {
    pub n: usize,
    pub exact_match: f64,
    pub token_f1: f64,
    pub bleu: [f64; 4],
    pub mean_ratio: f64,
    pub input_exact_match: f64,
    pub input_token_f1: f64,
    pub input_bleu: [f64; 4],
    pub input_mean_ratio: f64,
    pub retention: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub mode: String,
    pub config: EvalConfig,
    pub seed: u64,
    pub aggregates: Aggregates,
    pub rows: Vec<Row>,
}

struct Outcome {
    row: Row,
    input: Vec<TokenId>,
    output: Vec<TokenId>,
    pins: Option<Vec<TokenId>>,
}

/// Builds the input for one example. The generator depends on the mode and
/// the example index but not on `steps`, so step sweeps share inputs.
fn build_input(
    ex: &Example,
    mode: EvalMode,
    steps: usize,
    schedule: &NoiseSchedule,
    vocab: &Vocabulary,
    rng: &mut ChaCha8Rng,
) -> Result<(CaptionState, BTreeMap<usize, TokenId>)> {
    let none = BTreeMap::new();
    match mode {
        EvalMode::Indomain => {
            let (mut x_t, _) = sample_training_example(&ex.caption, schedule, vocab, rng)?;
            x_t.step = steps;
            Ok((x_t, none))
        }
        EvalMode::OodRatio { ratio } => {
            Ok((CaptionState::reference(&corrupt_to_ratio(&ex.caption, ratio, vocab, rng)?, steps), none))
        }
        EvalMode::RandomRef { len } => Ok((make_random_sequence(len, steps, vocab, rng)?, none)),
        EvalMode::Control { pins, .. } => {
            let len = 10;
            let mut input = make_random_sequence(len, steps, vocab, rng)?;
            let content: Vec<usize> =
                (0..ex.caption.len()).filter(|&i| !crate::world::is_function_word(vocab, ex.caption[i])).collect();
            let k = pins.min(content.len()).min(len);
            let mut chosen = sample(rng, content.len(), k).into_vec();
            chosen.sort_unstable();
            let mut slots = sample(rng, len, k).into_vec();
            slots.sort_unstable();
            let mut map = BTreeMap::new();
            for (&c, &s) in chosen.iter().zip(&slots) {
                let w = ex.caption[content[c]];
                input.tokens[s].id = w;
                map.insert(s, w);
            }
            Ok((input, map))
        }
    }
}

/// Denoises every example with `cfg.steps` steps and scores it against its
/// ground-truth caption. Examples run in parallel; rows keep dataset order.
pub fn evaluate(
    model: &DenoiserModel,
    vocab: &Vocabulary,
    schedule: &NoiseSchedule,
    dataset: &[Example],
    cfg: &EvalConfig,
) -> Result<Report> {
    check_vocab(model, vocab)?;
    if cfg.steps == 0 || cfg.steps > model.config().max_t {
        return Err(Error::StepOutOfRange { got: cfg.steps, max: model.config().max_t });
    }
    let data = &dataset[..cfg.limit.unwrap_or(dataset.len()).min(dataset.len())];
    if data.is_empty() {
        return Err(Error::InvalidArgument("nothing to evaluate".into()));
    }
    let pin_mode = match cfg.mode {
        EvalMode::Control { pin_mode, .. } => pin_mode,
        _ => PinMode::Soft,
    };
    let outcomes = data
        .par_iter()
        .enumerate()
        .map(|(i, ex)| -> Result<Outcome> {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[cfg.mode.tag(), i as u64]));
            let (input, pins) = build_input(ex, cfg.mode, cfg.steps, schedule, vocab, &mut rng)?;
            let out = denoise_loop(model, &ex.condition, &input, cfg.steps, &pins, pin_mode)?;
            let (hyp, inp) = (out.caption.ids(), input.ids());
            let pin_ids: Option<Vec<TokenId>> =
                matches!(cfg.mode, EvalMode::Control { .. }).then(|| pins.values().copied().collect());
            let row = Row {
                scene_id: ex.scene_id,
                input: vocab.decode(&inp),
                output: vocab.decode(&hyp),
                reference: vocab.decode(&ex.caption),
                exact_match: exact_match(&hyp, &ex.caption)?,
                token_f1: token_f1(&hyp, &ex.caption)?,
                bleu4: bleu(&hyp, &[&ex.caption], 4)?,
                ratio: lev_ratio(&hyp, &ex.caption),
                input_ratio: lev_ratio(&inp, &ex.caption),
                pins: pin_ids.as_ref().map(|p| p.iter().map(|&w| vocab.word(w).unwrap_or("?").to_string()).collect()),
                retained: pin_ids.as_ref().map(|p| is_subsequence(p, &hyp)),
            };
            Ok(Outcome { row, input: inp, output: hyp, pins: pin_ids })
        })
        .collect::<Result<Vec<_>>>()?;

    let n = outcomes.len() as f64;
    let mean = |f: &dyn Fn(&Outcome) -> f64| outcomes.iter().map(f).sum::<f64>() / n;
    let bleus = |pick: &dyn Fn(&Outcome) -> &[TokenId]| -> Result<[f64; 4]> {
        let mut out = [0.0; 4];
        for (k, slot) in out.iter_mut().enumerate() {
            let mut s = 0.0;
            for (o, ex) in outcomes.iter().zip(data) {
                s += bleu(pick(o), &[&ex.caption], k + 1)?;
            }
            *slot = s / n;
        }
        Ok(out)
    };
    let aggregates = Aggregates {
        n: outcomes.len(),
        exact_match: mean(&|o| o.row.exact_match),
        token_f1: mean(&|o| o.row.token_f1),
        bleu: bleus(&|o| &o.output)?,
        mean_ratio: mean(&|o| o.row.ratio),
        input_exact_match: {
            let mut s = 0.0;
            for (o, ex) in outcomes.iter().zip(data) {
                s += exact_match(&o.input, &ex.caption)?;
            }
            s / n
        },
        input_token_f1: {
            let mut s = 0.0;
            for (o, ex) in outcomes.iter().zip(data) {
                s += token_f1(&o.input, &ex.caption)?;
            }
            s / n
        },
        input_bleu: bleus(&|o| &o.input)?,
        input_mean_ratio: mean(&|o| o.row.input_ratio),
        retention: outcomes.first().and_then(|o| o.pins.as_ref()).map(|_| {
            let pairs: Vec<_> = outcomes.iter().map(|o| (o.output.clone(), o.pins.clone().unwrap_or_default())).collect();
            retention_rate(&pairs)
        }),
    };
    Ok(Report {
        mode: cfg.mode.label(),
        config: cfg.clone(),
        seed: cfg.seed,
        aggregates,
        rows: outcomes.into_iter().map(|o| o.row).collect(),
    })
}

pub const CSV_HEADER: &str = "mode,steps,n,exact_match,token_f1,bleu1,bleu2,bleu3,bleu4,mean_ratio,\
input_exact_match,input_token_f1,input_bleu4,input_mean_ratio,retention";

/// One CSV line of aggregates (no trailing newline).
pub fn csv_row(report: &Report) -> String {
    let a = &report.aggregates;
    let mut s = format!("{},{},{}", report.mode, report.config.steps, a.n);
    for v in [a.exact_match, a.token_f1, a.bleu[0], a.bleu[1], a.bleu[2], a.bleu[3], a.mean_ratio] {
        let _ = write!(s, ",{v:.6}");
    }
    for v in [a.input_exact_match, a.input_token_f1, a.input_bleu[3], a.input_mean_ratio] {
        let _ = write!(s, ",{v:.6}");
    }
    match a.retention {
        Some(r) => {
            let _ = write!(s, ",{r:.6}");
        }
        None => s.push(','),
    }
    s
}

pub fn aggregates_csv(reports: &[Report]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&csv_row(r));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_and_disjoint() {
        let a = [2, 3, 4];
        let b = [5, 6, 7];
        assert_eq!(exact_match(&a, &a).unwrap(), 1.0);
        assert_eq!(token_f1(&a, &a).unwrap(), 1.0);
        assert_eq!(mean_ratio(&[(a.to_vec(), a.to_vec())]), 1.0);
        assert_eq!(exact_match(&a, &b).unwrap(), 0.0);
        assert_eq!(token_f1(&a, &b).unwrap(), 0.0);
        assert_eq!(mean_ratio(&[(a.to_vec(), b.to_vec())]), 0.0);
        assert!(exact_match(&a, &[]).is_err());
        assert!(token_f1(&a, &[]).is_err());
    }

    #[test]
    fn f1_half() {
        assert_eq!(token_f1(&[2, 3], &[2, 4]).unwrap(), 0.5);
    }

    #[test]
    fn f1_counts_multiplicity() {
        // overlap 1: precision 1/2, recall 1/1
        assert!((token_f1(&[2, 2], &[2]).unwrap() - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn bleu_cases() {
        let r: &[TokenId] = &[2, 3, 4, 5];
        assert!((bleu(r, &[r], 4).unwrap() - 1.0).abs() < 1e-12);
        assert!(bleu(&[6, 7, 8, 9], &[r], 4).unwrap() < 1e-8);
        assert!((bleu(&[2, 3, 4], &[&[2, 3, 5]], 1).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(bleu(&[], &[r], 2).unwrap(), 0.0);
        assert!(bleu(r, &[r], 0).is_err());
    }

    #[test]
    fn bleu_brevity_penalty() {
        let r: &[TokenId] = &[2, 3, 4, 5];
        let got = bleu(&[2, 3], &[r], 1).unwrap();
        assert!((got - (1.0f64 - 2.0).exp()).abs() < 1e-12);
    }

    #[test]
    fn retention() {
        let pairs = vec![(vec![2, 5, 3, 7], vec![5, 7]), (vec![7, 5], vec![5, 7])];
        assert_eq!(retention_rate(&pairs), 0.5);
        assert!(is_subsequence(&[], &[2]));
    }

    #[test]
    fn mode_parsing() {
        assert_eq!(EvalMode::parse("indomain").unwrap(), EvalMode::Indomain);
        assert_eq!(EvalMode::parse("ood:0.5").unwrap(), EvalMode::OodRatio { ratio: 0.5 });
        assert_eq!(EvalMode::parse("random:10").unwrap(), EvalMode::RandomRef { len: 10 });
        assert_eq!(
            EvalMode::parse("control:hard").unwrap(),
            EvalMode::Control { pins: 2, pin_mode: PinMode::Hard }
        );
        for bad in ["ood:2", "random:0", "control:loose", "other"] {
            assert!(EvalMode::parse(bad).is_err(), "{bad}");
        }
        for m in ["indomain", "ood:0.3", "random:8", "control:soft:3"] {
            let mode = EvalMode::parse(m).unwrap();
            assert_eq!(EvalMode::parse(&mode.label()).unwrap(), mode);
        }
    }
}
