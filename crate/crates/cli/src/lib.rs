//! The `lealla` command line.

pub mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use lealla_core::checkpoint::{load_checkpoint, save_checkpoint};
use lealla_core::corpus::{synth_corpus, write_tsv};
use lealla_core::encoder::{parameter_count, EncoderConfig};
use lealla_core::eval::{mine_pairs, p_at_1, read_gold, EmbeddingStore};
use lealla_core::train::{distill_student, reduce_dimension, train_teacher, TeacherSource, TrainReport};
use lealla_core::{Error, ErrorClass, Result};

use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "lealla", version, about = "Train, distill and evaluate lightweight sentence encoders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set train.steps=500`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        RunConfig::load(self.config.as_deref(), &self.overrides)
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train an encoder from scratch with the margin softmax.
    TrainTeacher {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Distill a student from a teacher checkpoint or teacher embedding files.
    Distill {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, conflicts_with = "teacher_emb", required_unless_present = "teacher_emb")]
        teacher: Option<PathBuf>,
        /// `SRC.emb,TGT.emb`, keyed by pair index.
        #[arg(long)]
        teacher_emb: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a dense reducer on top of a frozen teacher.
    ReduceDim {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        dim: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Embed one sentence per line.
    Embed {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// P@1 of gold pairs by exact nearest-neighbour search.
    Evaluate {
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        tgt: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        bidirectional: bool,
    },
    /// Margin-based pair mining with F1 against gold pairs.
    Mine {
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        tgt: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        #[arg(long, default_value_t = lealla_core::eval::DEFAULT_K)]
        k: usize,
        /// Also write the candidates and sweep as JSON.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Parameter counts of a preset or configured encoder.
    Params {
        #[arg(long, conflicts_with = "config")]
        preset: Option<String>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Write seeded pseudo-parallel corpora.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        pairs: usize,
        #[arg(long, default_value_t = 1)]
        langs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        vocab: usize,
    },
}

pub fn exit_code(class: ErrorClass) -> i32 {
    match class {
        ErrorClass::Config => 1,
        ErrorClass::Data => 2,
        ErrorClass::Numerical => 3,
    }
}

/// Runs the command line with `argv` (program name first) and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let first = e.to_string();
            let first = first.lines().next().unwrap_or("bad arguments");
            eprintln!("ERROR config: {}", first.trim_start_matches("error: "));
            return 1;
        }
    };
    let stdout = std::io::stdout();
    match execute(cli.command, &mut stdout.lock()) {
        Ok(()) => 0,
        Err(e) => {
            let class = e.class();
            eprintln!("ERROR {}: {}", class.as_str(), e.to_string().replace('\n', " "));
            exit_code(class)
        }
    }
}

fn write_out(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())
        .map_err(|e| Error::Data(format!("cannot write to stdout: {e}")))
}

fn emit_report(out: &mut dyn Write, report: &TrainReport) -> Result<()> {
    write_out(out, &report.to_json_lines())?;
    if let Some(p) = report.final_dev_p_at_1() {
        write_out(out, &format!("dev_p_at_1 {p:?}\n"))?;
    }
    Ok(())
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))
}

fn execute(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::TrainTeacher { config, out: path } => {
            let cfg = config.load()?;
            let corpus = cfg.corpus()?;
            let (model, report) = train_teacher(&corpus, cfg.encoder()?, &cfg.train, &cfg.loss)?;
            save_checkpoint(&path, &model)?;
            emit_report(out, &report)
        }
        Command::Distill {
            config,
            teacher,
            teacher_emb,
            out: path,
        } => {
            let cfg = config.load()?;
            let corpus = cfg.corpus()?;
            let student = cfg.encoder()?;
            let (model, report) = match (teacher, teacher_emb) {
                (Some(ckpt), _) => {
                    let teacher = load_checkpoint(ckpt)?;
                    distill_student(&corpus, student, TeacherSource::Model(&teacher), &cfg.train, &cfg.loss)?
                }
                (None, Some(files)) => {
                    let (s, t) = files
                        .split_once(',')
                        .ok_or_else(|| Error::Config("--teacher-emb expects SRC.emb,TGT.emb".into()))?;
                    let (source, target) = (EmbeddingStore::read(s)?, EmbeddingStore::read(t)?);
                    let teacher = TeacherSource::Embeddings {
                        source: &source,
                        target: &target,
                    };
                    distill_student(&corpus, student, teacher, &cfg.train, &cfg.loss)?
                }
                (None, None) => return Err(Error::Config("distill needs --teacher or --teacher-emb".into())),
            };
            save_checkpoint(&path, &model)?;
            emit_report(out, &report)
        }
        Command::ReduceDim {
            config,
            teacher,
            dim,
            out: path,
        } => {
            let cfg = config.load()?;
            let corpus = cfg.corpus()?;
            let teacher = load_checkpoint(teacher)?;
            let (model, report) = reduce_dimension(&teacher, &corpus, dim, cfg.loss.margin, &cfg.train)?;
            save_checkpoint(&path, &model)?;
            emit_report(out, &report)
        }
        Command::Embed { ckpt, input, output } => {
            let model = load_checkpoint(ckpt)?;
            let text = read_text(&input)?;
            let lines: Vec<&str> = text.lines().collect();
            let vectors = model.embed_sentences(&lines)?;
            EmbeddingStore::from_tensor(&vectors)?.write(&output)?;
            write_out(out, &format!("embedded {} sentences into {} dims\n", lines.len(), model.dim()))
        }
        Command::Evaluate {
            src,
            tgt,
            gold,
            bidirectional,
        } => {
            let (s, t) = (EmbeddingStore::read(src)?, EmbeddingStore::read(tgt)?);
            let p = p_at_1(&s, &t, &read_gold(gold)?, bidirectional)?;
            write_out(out, &format!("p_at_1 {p:?}\n"))
        }
        Command::Mine {
            src,
            tgt,
            gold,
            k,
            output,
        } => {
            let (s, t) = (EmbeddingStore::read(src)?, EmbeddingStore::read(tgt)?);
            let result = mine_pairs(&s, &t, k, &read_gold(gold)?)?;
            if let Some(path) = output {
                let json = serde_json::to_string_pretty(&result).expect("result serializes");
                fs::write(&path, json).map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))?;
            }
            let mut text = format!(
                "threshold {:?}\nprecision {:?}\nrecall {:?}\nf1 {:?}\n",
                result.threshold, result.precision, result.recall, result.f1
            );
            if result.no_gold {
                text.push_str("no_gold true\n");
            }
            write_out(out, &text)
        }
        Command::Params { preset, config } => {
            let enc = match preset {
                Some(name) => EncoderConfig::preset_named(&name)?,
                None => config.load()?.encoder()?.clone(),
            };
            let c = parameter_count(&enc);
            write_out(
                out,
                &format!(
                    "P_E {} ({:.1}M)\nP {} ({:.1}M)\n",
                    c.encoder,
                    c.encoder as f64 / 1e6,
                    c.total,
                    c.total as f64 / 1e6
                ),
            )
        }
        Command::Synth {
            out: dir,
            pairs,
            langs,
            seed,
            vocab,
        } => {
            fs::create_dir_all(&dir).map_err(|e| Error::Data(format!("cannot create {}: {e}", dir.display())))?;
            for (l, lang) in synth_corpus(pairs, vocab, langs, seed)?.iter().enumerate() {
                write_tsv(dir.join(format!("lang{l}.tsv")), &lang.corpus.all_pairs())?;
            }
            write_out(out, &format!("wrote {langs} corpora of {pairs} pairs to {}\n", dir.display()))
        }
    }
}
