//! Command-line front end.
//!
//! Option values resolve as flag, then `--config` file entry (keyed by the
//! long flag name), then built-in default. The resolved set is printed to
//! stderr as `key=value` lines, which can be fed back through `--config`.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Display;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::align::lev_ratio;
use crate::checkpoint::Checkpoint;
use crate::diffusion::{denoise_loop, make_random_sequence, PinMode};
use crate::edit::{sample_noising_step, CaptionState, EditOp, NoiseSchedule};
use crate::error::{Error, Result};
use crate::metrics::{aggregates_csv, evaluate, EvalConfig, EvalMode, Report};
use crate::model::ModelConfig;
use crate::train::{derive_seed, train, TrainConfig};
use crate::vocab::{TokenId, Vocabulary};
use crate::world::{make_corpus, Corpus, Example, Split, WorldSpec};

#[derive(Debug, Parser)]
#[command(name = "editdiff", version, about = "Edit-based discrete diffusion for caption editing")]
pub struct Cli {
    /// key=value file supplying defaults for any long flag.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads (1 forces single-threaded execution).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus directory.
    Synth {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a noising trajectory with per-step edit scripts.
    NoiseDemo {
        #[arg(long)]
        caption: String,
        #[arg(long = "T", visible_alias = "steps")]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Edit weights `replace,delete,insert`.
        #[arg(long)]
        weights: Option<String>,
        #[arg(long)]
        no_color: bool,
    },
    /// Train a denoiser on a corpus.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        warmup: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        val_limit: Option<usize>,
        #[arg(long)]
        grad_clip: Option<f64>,
        #[arg(long)]
        draws: Option<usize>,
        /// Probability of training on pure random words at t = T.
        #[arg(long)]
        random_start: Option<f64>,
        /// Probability of training on the model's own one-step output.
        #[arg(long)]
        rollin: Option<f64>,
        #[arg(long = "T", visible_alias = "steps")]
        steps: Option<usize>,
        #[arg(long)]
        weights: Option<String>,
        #[arg(long)]
        embed_dim: Option<usize>,
        #[arg(long)]
        layers: Option<usize>,
        #[arg(long)]
        heads: Option<usize>,
        #[arg(long)]
        ffn_dim: Option<usize>,
        #[arg(long)]
        dropout: Option<f64>,
        #[arg(long)]
        model_seed: Option<u64>,
    },
    /// Edit a reference caption for a scene.
    Edit {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long = "ref")]
        reference: String,
        #[arg(long)]
        scene: usize,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Generate a caption for a scene from random words.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        scene: usize,
        #[arg(long)]
        len: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Generate from random words with control words pinned at positions.
    Control {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        scene: usize,
        /// Comma list of `position=word`.
        #[arg(long)]
        pins: String,
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        len: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on a corpus split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// indomain | ood:R | random:N | control:hard | control:soft
        #[arg(long)]
        mode: Option<String>,
        /// A step count, a comma list, or a range `A-B`.
        #[arg(long)]
        steps: Option<String>,
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Aggregates CSV; defaults to the report path with a `.csv` extension.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Ablation tables.
    Ablate {
        /// rw-count | edit-dist
        #[arg(long)]
        which: String,
        #[arg(long)]
        ckpt_dir: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Levenshtein ratio of two whitespace-separated sequences.
    Ratio { a: String, b: String },
}

/// Exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io(_) => 3,
        Error::Format(_) | Error::Json(_) | Error::Mismatch(_) => 4,
        Error::Numeric(_) => 5,
        _ => 2,
    }
}

/// Parses and runs; returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

struct Settings {
    file: BTreeMap<String, String>,
    effective: BTreeMap<String, String>,
}

impl Settings {
    fn load(path: Option<&Path>) -> Result<Self> {
        let file = match path {
            Some(p) => crate::config::parse_map(&std::fs::read_to_string(p)?)?,
            None => BTreeMap::new(),
        };
        Ok(Self { file, effective: BTreeMap::new() })
    }

    fn get<T: FromStr + Display + Clone>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T> {
        let value = match flag {
            Some(v) => v,
            None => match self.file.get(key) {
                Some(s) => s
                    .parse()
                    .map_err(|_| Error::InvalidArgument(format!("config `{key}`: cannot parse `{s}`")))?,
                None => default,
            },
        };
        self.effective.insert(key.to_string(), value.to_string());
        Ok(value)
    }

    fn opt<T: FromStr + Display + Clone>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>> {
        let value = match flag {
            Some(v) => Some(v),
            None => match self.file.get(key) {
                Some(s) if s.is_empty() || s == "none" => None,
                Some(s) => Some(
                    s.parse()
                        .map_err(|_| Error::InvalidArgument(format!("config `{key}`: cannot parse `{s}`")))?,
                ),
                None => None,
            },
        };
        self.effective.insert(key.to_string(), value.as_ref().map_or("none".into(), |v| v.to_string()));
        Ok(value)
    }

    fn note(&mut self, key: &str, value: impl Display) {
        self.effective.insert(key.to_string(), value.to_string());
    }

    fn print(&self) {
        eprintln!("# effective config");
        eprint!("{}", crate::config::render_map(&self.effective));
    }
}

fn parse_weights(s: &str) -> Result<(f64, f64, f64)> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::InvalidArgument(format!("weights `{s}`: expected r,d,i")))?;
    match parts.as_slice() {
        [r, d, i] => Ok((*r, *d, *i)),
        _ => Err(Error::InvalidArgument(format!("weights `{s}`: expected three values"))),
    }
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        _ => Err(Error::InvalidArgument(format!("unknown split `{s}`"))),
    }
}

/// `"3"`, `"1,5,10"` or `"1-10"`.
pub fn parse_steps(s: &str) -> Result<Vec<usize>> {
    let bad = || Error::InvalidArgument(format!("steps `{s}`: expected N, A,B,... or A-B"));
    let out: Vec<usize> = if let Some((a, b)) = s.split_once('-') {
        let (a, b): (usize, usize) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        (a..=b).collect()
    } else {
        s.split(',').map(|p| p.trim().parse().map_err(|_| bad())).collect::<Result<_>>()?
    };
    if out.is_empty() || out.contains(&0) {
        return Err(bad());
    }
    Ok(out)
}

fn format_weights(w: (f64, f64, f64)) -> String {
    format!("{},{},{}", w.0, w.1, w.2)
}

/// Loads a checkpoint and checks it was trained on this corpus vocabulary.
fn load_pair(ckpt: &Path, corpus: &Path) -> Result<(Checkpoint, Corpus)> {
    let ck = Checkpoint::load(ckpt)?;
    let corpus = Corpus::load(corpus)?;
    if ck.meta.vocab_fingerprint != corpus.vocab.fingerprint() {
        return Err(Error::Mismatch("checkpoint was trained with a different vocabulary".into()));
    }
    if ck.model.config().cond_vocab_size != corpus.spec.cond_vocab_size() {
        return Err(Error::Mismatch("checkpoint condition vocabulary differs from the corpus".into()));
    }
    Ok((ck, corpus))
}

fn scene(corpus: &Corpus, id: usize) -> Result<&Example> {
    corpus.find(id).ok_or_else(|| Error::InvalidArgument(format!("no scene {id} in corpus")))
}

fn write_trace(path: &Path, trace: &[crate::diffusion::TraceStep], vocab: &Vocabulary) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for step in trace {
        writeln!(w, "{}", step.to_json(vocab))?;
    }
    w.flush()?;
    Ok(())
}

fn print_result(input: &CaptionState, out: &crate::diffusion::Denoised, ex: &Example, vocab: &Vocabulary) {
    println!("input:  {}", vocab.decode(&input.ids()));
    for step in &out.trace {
        println!("t={:<2} {}", step.t, step.script.render(vocab));
    }
    let hyp = out.caption.ids();
    println!("output: {}", vocab.decode(&hyp));
    println!("truth:  {}", vocab.decode(&ex.caption));
    println!("ratio:  {:.4}", lev_ratio(&hyp, &ex.caption));
}

fn paint(op: EditOp, text: &str, color: bool) -> String {
    if !color {
        return text.to_string();
    }
    let code = match op {
        EditOp::Keep => return text.to_string(),
        EditOp::Replace => "33",
        EditOp::Insert => "32",
        EditOp::Delete => "31",
    };
    format!("\x1b[{code}m{text}\x1b[0m")
}

fn execute(cli: Cli) -> Result<()> {
    let mut s = Settings::load(cli.config.as_deref())?;
    let threads = s.opt("threads", cli.threads)?;
    if let Some(n) = threads {
        // Ignored when a pool already exists (repeated in-process runs).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    match cli.command {
        Command::Synth { spec, n, seed, out } => {
            let world = match spec {
                Some(p) => WorldSpec::parse(&std::fs::read_to_string(&p)?)?,
                None => WorldSpec::default(),
            };
            let n = s.get("n", n, 2000)?;
            let seed = s.get("seed", seed, 0)?;
            s.note("out", out.display());
            s.print();
            let corpus = make_corpus(&world, n, seed)?;
            corpus.save(&out)?;
            println!(
                "wrote {} scenes ({} train / {} val / {} test), vocab {} words, hash {}",
                corpus.len(),
                corpus.train.len(),
                corpus.val.len(),
                corpus.test.len(),
                corpus.vocab.len(),
                corpus.hash()
            );
        }
        Command::NoiseDemo { caption, steps, seed, weights, no_color } => {
            let steps = s.get("T", steps, 10)?;
            let seed = s.get("seed", seed, 0)?;
            let weights = parse_weights(&s.get("weights", weights, "0.5,0.25,0.25".to_string())?)?;
            s.print();
            let spec = WorldSpec::default();
            let words = spec.vocab().tokens()[2..].to_vec();
            let vocab = Vocabulary::build(words.into_iter().chain(caption.split_whitespace().map(String::from)))?;
            let sched = NoiseSchedule::with_weights(steps, weights)?;
            let x0 = vocab.encode(&caption)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let color = !no_color;
            let mut state = CaptionState::clean(&x0);
            println!("t=0  {}", vocab.decode(&x0));
            for t in 1..=steps {
                let (script, next) = sample_noising_step(&state, &sched, t, &vocab, &mut rng)?;
                let word = |id: TokenId| vocab.word(id).unwrap_or("?").to_string();
                let mut parts = Vec::new();
                for (i, slot) in script.slots.iter().enumerate() {
                    let old = (i > 0).then(|| word(state.tokens[i - 1].id));
                    let text = match (slot.op, old) {
                        (EditOp::Keep, Some(o)) | (EditOp::Delete, Some(o)) => o,
                        (EditOp::Keep, None) => continue,
                        (EditOp::Replace, Some(o)) => format!("{o}->{}", word(slot.content.unwrap_or(0))),
                        (EditOp::Insert, o) => {
                            let new = format!("+{}", word(slot.content.unwrap_or(0)));
                            o.map_or(new.clone(), |o| format!("{o} {new}"))
                        }
                        _ => continue,
                    };
                    parts.push(paint(slot.op, &text, color));
                }
                println!("t={t:<2} {}", parts.join(" "));
                println!("     script: {}", script.render(&vocab));
                state = next;
            }
            let random = state.count_origin(crate::edit::Origin::RandomWord);
            println!("final: {} ({random}/{} absorbed)", vocab.decode(&state.ids()), state.len());
        }
        Command::Train {
            corpus,
            out,
            epochs,
            lr,
            batch,
            warmup,
            seed,
            val_limit,
            grad_clip,
            draws,
            random_start,
            rollin,
            steps,
            weights,
            embed_dim,
            layers,
            heads,
            ffn_dim,
            dropout,
            model_seed,
        } => {
            let corpus_dir = corpus;
            let corpus = Corpus::load(&corpus_dir)?;
            let d = TrainConfig::default();
            let cfg = TrainConfig {
                lr: s.get("lr", lr, d.lr)?,
                epochs: s.get("epochs", epochs, d.epochs)?,
                batch: s.get("batch", batch, d.batch)?,
                warmup: s.get("warmup", warmup, d.warmup)?,
                seed: s.get("seed", seed, d.seed)?,
                val_limit: s.get("val-limit", val_limit, d.val_limit)?,
                val_len: d.val_len,
                grad_clip: s.opt("grad-clip", grad_clip)?,
                draws: s.get("draws", draws, d.draws)?,
                random_start: s.get("random-start", random_start, d.random_start)?,
                rollin: s.get("rollin", rollin, d.rollin)?,
            };
            let steps = s.get("T", steps, 10)?;
            let weights = parse_weights(&s.get("weights", weights, "0.5,0.25,0.25".to_string())?)?;
            let sched = NoiseSchedule::with_weights(steps, weights)?;
            let m = ModelConfig::small(corpus.vocab.len(), corpus.spec.cond_vocab_size());
            let mc = ModelConfig {
                embed_dim: s.get("embed-dim", embed_dim, m.embed_dim)?,
                num_layers: s.get("layers", layers, m.num_layers)?,
                num_heads: s.get("heads", heads, m.num_heads)?,
                ffn_dim: s.get("ffn-dim", ffn_dim, m.ffn_dim)?,
                dropout: s.get("dropout", dropout, m.dropout)?,
                seed: s.get("model-seed", model_seed, m.seed)?,
                max_t: steps,
                ..m
            };
            s.note("corpus", corpus_dir.display());
            s.note("corpus-hash", corpus.hash());
            s.note("out", out.display());
            s.print();
            let (ck, _) = train(&corpus, &sched, mc, &cfg, |log| {
                println!("{}", serde_json::to_string(log).expect("log rows serialize"));
            })?;
            ck.save(&out)?;
            eprintln!("saved {}", out.display());
        }
        Command::Edit { ckpt, corpus, reference, scene: id, steps, trace } => {
            let (ck, corpus) = load_pair(&ckpt, &corpus)?;
            let steps = s.get("steps", steps, ck.meta.steps)?;
            s.note("scene", id);
            s.print();
            let ex = scene(&corpus, id)?;
            let input = CaptionState::reference(&corpus.vocab.encode(&reference)?, steps);
            let out = denoise_loop(&ck.model, &ex.condition, &input, steps, &BTreeMap::new(), PinMode::Soft)?;
            if let Some(p) = trace {
                write_trace(&p, &out.trace, &corpus.vocab)?;
            }
            print_result(&input, &out, ex, &corpus.vocab);
        }
        Command::Generate { ckpt, corpus, scene: id, len, steps, seed, trace } => {
            let (ck, corpus) = load_pair(&ckpt, &corpus)?;
            let len = s.get("len", len, 10)?;
            let steps = s.get("steps", steps, ck.meta.steps)?;
            let seed = s.get("seed", seed, 0)?;
            s.note("scene", id);
            s.print();
            let ex = scene(&corpus, id)?;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[id as u64]));
            let input = make_random_sequence(len, steps, &corpus.vocab, &mut rng)?;
            let out = denoise_loop(&ck.model, &ex.condition, &input, steps, &BTreeMap::new(), PinMode::Soft)?;
            if let Some(p) = trace {
                write_trace(&p, &out.trace, &corpus.vocab)?;
            }
            print_result(&input, &out, ex, &corpus.vocab);
        }
        Command::Control { ckpt, corpus, scene: id, pins, mode, len, steps, seed } => {
            let (ck, corpus) = load_pair(&ckpt, &corpus)?;
            let mode = match s.get("mode", mode, "hard".to_string())?.as_str() {
                "hard" => PinMode::Hard,
                "soft" => PinMode::Soft,
                other => return Err(Error::InvalidArgument(format!("pin mode `{other}`: expected hard or soft"))),
            };
            let len = s.get("len", len, 10)?;
            let steps = s.get("steps", steps, ck.meta.steps)?;
            let seed = s.get("seed", seed, 0)?;
            s.note("scene", id);
            s.note("pins", &pins);
            s.print();
            let ex = scene(&corpus, id)?;
            let mut pinned = BTreeMap::new();
            for item in pins.split(',').filter(|p| !p.trim().is_empty()) {
                let (pos, word) = item
                    .split_once('=')
                    .ok_or_else(|| Error::InvalidArgument(format!("pin `{item}`: expected position=word")))?;
                let pos: usize =
                    pos.trim().parse().map_err(|_| Error::InvalidArgument(format!("pin position `{pos}`")))?;
                let id = corpus.vocab.id(word.trim()).ok_or_else(|| Error::UnknownToken(word.trim().into()))?;
                pinned.insert(pos, id);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[id as u64]));
            let mut input = make_random_sequence(len, steps, &corpus.vocab, &mut rng)?;
            for (&pos, &w) in &pinned {
                let slot = input.tokens.get_mut(pos).ok_or_else(|| {
                    Error::InvalidArgument(format!("pin position {pos} outside input of length {len}"))
                })?;
                slot.id = w;
            }
            let out = denoise_loop(&ck.model, &ex.condition, &input, steps, &pinned, mode)?;
            print_result(&input, &out, ex, &corpus.vocab);
            let pins: Vec<TokenId> = pinned.values().copied().collect();
            println!("retained: {}", crate::metrics::is_subsequence(&pins, &out.caption.ids()));
        }
        Command::Eval { ckpt, corpus, mode, steps, split, limit, seed, out, csv } => {
            let (ck, corpus) = load_pair(&ckpt, &corpus)?;
            let mode = EvalMode::parse(&s.get("mode", mode, "random:10".to_string())?)?;
            let steps = parse_steps(&s.get("steps", steps, ck.meta.steps.to_string())?)?;
            let split = parse_split(&s.get("split", split, "test".to_string())?)?;
            let limit = s.opt("limit", limit)?;
            let seed = s.get("seed", seed, 0)?;
            s.note("out", out.display());
            s.print();
            let sched = ck.meta.schedule()?;
            let reports = steps
                .iter()
                .map(|&st| {
                    let cfg = EvalConfig { mode, steps: st, seed, limit };
                    evaluate(&ck.model, &corpus.vocab, &sched, corpus.split(split), &cfg)
                })
                .collect::<Result<Vec<Report>>>()?;
            let json = if reports.len() == 1 {
                serde_json::to_string_pretty(&reports[0])?
            } else {
                serde_json::to_string_pretty(&reports)?
            };
            std::fs::write(&out, json + "\n")?;
            let table = aggregates_csv(&reports);
            std::fs::write(csv.unwrap_or_else(|| out.with_extension("csv")), &table)?;
            print!("{table}");
        }
        Command::Ablate { which, ckpt_dir, corpus, out, steps, split, limit, seed, epochs } => {
            let corpus_dir = corpus;
            let corpus = Corpus::load(&corpus_dir)?;
            let steps = s.get("steps", steps, 10)?;
            let split = parse_split(&s.get("split", split, "test".to_string())?)?;
            let limit = s.opt("limit", limit)?;
            let seed = s.get("seed", seed, 0)?;
            s.note("which", &which);
            match which.as_str() {
                "rw-count" => {
                    s.print();
                    let (ck, _) = load_pair(&ckpt_dir.join("model.ckpt"), &corpus_dir)?;
                    let sched = ck.meta.schedule()?;
                    let mut rows = String::from("length,exact_match,token_f1,bleu4,mean_ratio,input_mean_ratio\n");
                    for len in 8..=12 {
                        let cfg = EvalConfig { mode: EvalMode::RandomRef { len }, steps, seed, limit };
                        let r = evaluate(&ck.model, &corpus.vocab, &sched, corpus.split(split), &cfg)?;
                        let a = &r.aggregates;
                        rows.push_str(&format!(
                            "{len},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                            a.exact_match, a.token_f1, a.bleu[3], a.mean_ratio, a.input_mean_ratio
                        ));
                    }
                    std::fs::write(&out, &rows)?;
                    print!("{rows}");
                }
                "edit-dist" => {
                    let epochs = s.get("epochs", epochs, TrainConfig::default().epochs)?;
                    s.print();
                    std::fs::create_dir_all(&ckpt_dir)?;
                    let mut rows = String::from("distribution,weights,exact_match,token_f1,bleu4,mean_ratio\n");
                    for (name, sched) in [
                        ("replace-heavy", NoiseSchedule::replace_heavy(steps)?),
                        ("even", NoiseSchedule::even(steps)?),
                        ("replace-only", NoiseSchedule::replace_only(steps)?),
                    ] {
                        let path = ckpt_dir.join(format!("{name}.ckpt"));
                        let ck = match Checkpoint::load(&path) {
                            Ok(ck) if ck.meta.corpus_hash == corpus.hash() && ck.meta.epochs == epochs as u64 => ck,
                            _ => {
                                let mc = ModelConfig {
                                    max_t: steps,
                                    ..ModelConfig::small(corpus.vocab.len(), corpus.spec.cond_vocab_size())
                                };
                                let cfg = TrainConfig { epochs, seed, ..TrainConfig::default() };
                                eprintln!("training {name}");
                                let (ck, _) = train(&corpus, &sched, mc, &cfg, |log| {
                                    eprintln!("  {}", serde_json::to_string(log).expect("log rows serialize"));
                                })?;
                                ck.save(&path)?;
                                ck
                            }
                        };
                        let cfg = EvalConfig { mode: EvalMode::RandomRef { len: 10 }, steps, seed, limit };
                        let r = evaluate(&ck.model, &corpus.vocab, &sched, corpus.split(split), &cfg)?;
                        let a = &r.aggregates;
                        rows.push_str(&format!(
                            "{name},\"{}\",{:.6},{:.6},{:.6},{:.6}\n",
                            format_weights(sched.weights()),
                            a.exact_match,
                            a.token_f1,
                            a.bleu[3],
                            a.mean_ratio
                        ));
                    }
                    std::fs::write(&out, &rows)?;
                    print!("{rows}");
                }
                other => {
                    return Err(Error::InvalidArgument(format!("unknown ablation `{other}`: rw-count or edit-dist")))
                }
            }
        }
        Command::Ratio { a, b } => {
            let vocab = Vocabulary::build(a.split_whitespace().chain(b.split_whitespace()).map(String::from))
                .or_else(|_| Vocabulary::build(["_"]))?;
            let r = lev_ratio(&vocab.encode(&a)?, &vocab.encode(&b)?);
            println!("{r}");
        }
    }
    Ok(())
}
