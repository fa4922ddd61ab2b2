use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ctxmatch::checkpoint::{load_checkpoint, save_checkpoint};
use ctxmatch::gradcheck::{grad_check, TOLERANCE};
use ctxmatch::retrieval::{Reranker, TfIdfIndex};
use ctxmatch::text::{load_dataset, read_rows, Vocab};
use ctxmatch::train::{evaluate, train_with, TrainData};
use ctxmatch::{Config, ConversationExample, Domain, Error, Model, ModelConfig, ModelKind, Result};

#[derive(Parser)]
#[command(name = "ctxmatch", version, about = "Multi-turn question matching and reranking")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the number of rows per ranking group.
    #[arg(long)]
    group_size: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Builds the vocabulary from the training sets and writes it to `vocab`.
    BuildVocab {
        #[command(flatten)]
        common: Common,
        /// Output path; defaults to the configured `vocab`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Trains the configured model and writes a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Prints `MAP R@5 R@2 R@1` on the test set.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset to score; defaults to the configured `test`.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Compares analytic gradients with central differences on tiny models.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
    /// Indexes a question bank and prints its statistics.
    BuildIndex {
        #[command(flatten)]
        common: Common,
        /// Bank TSV; defaults to the configured `bank`.
        #[arg(long)]
        bank: Option<PathBuf>,
    },
    /// Reranks the callback candidates for one context, given as turns.
    Rerank {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[arg(required = true)]
        turns: Vec<String>,
    },
    /// Answers one JSON request per stdin line with one JSON line on stdout.
    Serve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        k: Option<usize>,
    },
}

fn config(common: &Common) -> Result<Config> {
    let mut c = match &common.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = common.seed {
        c.train.seed = s;
    }
    if let Some(g) = common.group_size {
        c.group_size = g;
    }
    c.validate()?;
    Ok(c)
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::Usage(format!("the configuration must set `{key}`")))
}

fn build_vocab(c: &Config) -> Result<Vocab> {
    let mut rows = read_rows(required(&c.train_path, "train")?)?;
    if let Some(p) = &c.source_train_path {
        rows.extend(read_rows(p)?);
    }
    let texts = rows
        .iter()
        .flat_map(|r| r.turns.iter().map(String::as_str).chain([r.candidate.as_str()]));
    Vocab::build(texts, c.min_count)
}

/// Loads the configured vocabulary, building it from the training data when
/// the file does not exist yet.
fn vocab(c: &Config) -> Result<Vocab> {
    match &c.vocab_path {
        Some(p) if p.exists() => Vocab::load(p),
        Some(p) => {
            let v = build_vocab(c)?;
            v.save(p)?;
            Ok(v)
        }
        None => build_vocab(c),
    }
}

fn eval_domain(c: &Config) -> Option<Domain> {
    (c.kind == ModelKind::Transfer).then_some(Domain::Target)
}

fn dataset(c: &Config, vocab: &Vocab, path: &Path, domain: Option<Domain>) -> Result<Vec<ConversationExample>> {
    load_dataset(path, vocab, c.model.shape(), c.group_size, domain)
}

fn cmd_train(c: &Config, checkpoint: &Path, out: &mut impl Write) -> Result<()> {
    let vocab = vocab(c)?;
    let domain = eval_domain(c);
    let train_set = dataset(c, &vocab, required(&c.train_path, "train")?, domain)?;
    let source = match (&c.source_train_path, c.kind) {
        (Some(p), ModelKind::Transfer) => dataset(c, &vocab, p, Some(Domain::Source))?,
        (None, ModelKind::Transfer) => {
            return Err(Error::Usage("transfer training needs `source_train`".into()));
        }
        _ => Vec::new(),
    };
    let valid = match &c.valid_path {
        Some(p) => dataset(c, &vocab, p, domain)?,
        None => Vec::new(),
    };
    let mut model = Model::new(c.kind, c.model.clone(), vocab.len(), c.train.seed)?;
    let data = TrainData {
        train: &train_set,
        source: &source,
        valid: &valid,
    };
    let report = train_with(&mut model, &data, &c.train, |e| {
        let _ = writeln!(out, "{e}");
    })?;
    if let Some(p) = &c.log_path {
        std::fs::write(p, report.log()).map_err(|e| Error::Data(format!("cannot write {}: {e}", p.display())))?;
    }
    save_checkpoint(&model, checkpoint, c.checkpoint_dtype)
}

fn load_model(c: &Config, checkpoint: &Path) -> Result<(Model, Vocab)> {
    let vocab = Vocab::load(required(&c.vocab_path, "vocab")?)?;
    let model = load_checkpoint(checkpoint, c.kind, &c.model)?;
    Ok((model, vocab))
}

fn cmd_eval(c: &Config, checkpoint: &Path, data: Option<&Path>, out: &mut impl Write) -> Result<()> {
    let (model, vocab) = load_model(c, checkpoint)?;
    let path = match data {
        Some(p) => p,
        None => required(&c.test_path, "test")?,
    };
    let examples = dataset(c, &vocab, path, eval_domain(c))?;
    let report = evaluate(&model, &examples, c.train.exec)?;
    writeln!(out, "{report}").map_err(|e| Error::Data(e.to_string()))
}

/// Returns whether every check passed.
fn cmd_gradcheck(common: &Common, out: &mut impl Write) -> Result<bool> {
    let kinds = match &common.config {
        Some(_) => vec![config(common)?.kind],
        None => vec![ModelKind::MtHcnn, ModelKind::MtHcnnD, ModelKind::Transfer],
    };
    let seeds: Vec<u64> = match common.seed {
        Some(s) => vec![s],
        None => (0..5).collect(),
    };
    let mut ok = true;
    for kind in kinds {
        for report in grad_check(kind, &ModelConfig::tiny(), &seeds)? {
            write!(out, "{report}").map_err(|e| Error::Data(e.to_string()))?;
            ok &= report.passed();
        }
    }
    writeln!(out, "{} (tolerance {TOLERANCE:e})", if ok { "pass" } else { "FAIL" })
        .map_err(|e| Error::Data(e.to_string()))?;
    Ok(ok)
}

fn reranker(c: &Config, checkpoint: &Path) -> Result<Reranker> {
    let (model, vocab) = load_model(c, checkpoint)?;
    Ok(Reranker {
        index: TfIdfIndex::load(required(&c.bank_path, "bank")?)?,
        model,
        vocab,
        exec: c.train.exec,
    })
}

fn run(cli: Cli) -> Result<ExitCode> {
    let stdout = io::stdout();
    let mut out = BufWriter::new(stdout.lock());
    let io_err = |e: io::Error| Error::Data(format!("cannot write output: {e}"));
    match cli.command {
        Command::BuildVocab { common, out: dest } => {
            let c = config(&common)?;
            let v = build_vocab(&c)?;
            let dest = match &dest {
                Some(p) => p.as_path(),
                None => required(&c.vocab_path, "vocab")?,
            };
            v.save(dest)?;
            writeln!(out, "tokens\t{}", v.len()).map_err(io_err)?;
        }
        Command::Train { common, checkpoint } => cmd_train(&config(&common)?, &checkpoint, &mut out)?,
        Command::Eval {
            common,
            checkpoint,
            data,
        } => cmd_eval(&config(&common)?, &checkpoint, data.as_deref(), &mut out)?,
        Command::Gradcheck { common } => {
            if !cmd_gradcheck(&common, &mut out)? {
                out.flush().map_err(io_err)?;
                return Ok(ExitCode::from(3));
            }
        }
        Command::BuildIndex { common, bank } => {
            let c = config(&common)?;
            let path = match &bank {
                Some(p) => p.as_path(),
                None => required(&c.bank_path, "bank")?,
            };
            let stats = TfIdfIndex::load(path)?.stats();
            writeln!(out, "documents\t{}\nterms\t{}", stats.documents, stats.terms).map_err(io_err)?;
        }
        Command::Rerank {
            common,
            checkpoint,
            k,
            turns,
        } => {
            let c = config(&common)?;
            let r = reranker(&c, &checkpoint)?;
            let resp = r.rerank(&turns, k.unwrap_or(c.candidate_size))?;
            let line = serde_json::to_string(&resp).map_err(|e| Error::Data(e.to_string()))?;
            writeln!(out, "{line}").map_err(io_err)?;
        }
        Command::Serve { common, checkpoint, k } => {
            let c = config(&common)?;
            let r = reranker(&c, &checkpoint)?;
            r.serve(io::stdin().lock(), &mut out, k.unwrap_or(c.candidate_size))
                .map_err(|e| Error::Data(format!("serve stream failed: {e}")))?;
        }
    }
    out.flush().map_err(io_err)?;
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
