use std::fs;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use asv::checkpoint;
use asv::config::TrainConfig;
use asv::corpus::{read_corpus, Vocabulary};
use asv::error::{Error, Result};
use asv::eval;
use asv::expand::{expand_vocabulary, fit_linear_map, load_pretrained_text};
use asv::trainer;

/// Sentence-vector learner: bi-GRU encoder over sentences, convolutional
/// decoder over the words that follow them.
#[derive(Parser)]
#[command(name = "asv", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a vocabulary file from a one-sentence-per-line corpus.
    BuildVocab {
        #[arg(long)]
        corpus: PathBuf,
        /// Maximum number of non-special tokens to keep.
        #[arg(long, default_value_t = 20000)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes a checkpoint and a `<out>.loss` log.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// key=value config file; unknown keys are rejected.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from an earlier checkpoint of the same run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Encode a file of sentences to vectors, one line of floats each.
    Encode {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Grow the vocabulary with pretrained vectors mapped into the learnt
    /// embedding space.
    Expand {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        pretrained: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the extended vocabulary as a token-per-line file.
        #[arg(long)]
        out_vocab: Option<PathBuf>,
    },
    /// Pearson/Spearman correlation between encoded-pair cosines and gold
    /// scores (`sent1<TAB>sent2<TAB>score` lines).
    EvalSim {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
    },
    /// Logistic-probe accuracy over frozen representations
    /// (`label<TAB>sentence` lines).
    EvalCls {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long, default_value_t = 1e-3)]
        l2: f64,
    },
    /// Nearest corpus sentences to a query, by cosine.
    Nn {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        query: String,
        #[arg(short)]
        k: usize,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli.command) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::BuildVocab { corpus, size, out } => {
            let sentences = read_corpus(&corpus)?;
            let vocab = Vocabulary::build(sentences.into_iter().flatten(), size)?;
            vocab.write(&out)?;
            println!("wrote {} tokens to {}", vocab.len(), out.display());
        }
        Command::Train {
            corpus,
            vocab,
            config,
            out,
            resume,
        } => {
            let vocab = Vocabulary::read(&vocab)?;
            let text = fs::read_to_string(&config)
                .map_err(|e| Error::io(config.display().to_string(), e))?;
            let cfg = TrainConfig::parse(&text)?;
            let log_path = loss_log_path(&out);
            let mut log_file = if resume.is_some() {
                fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&log_path)
            } else {
                fs::File::create(&log_path)
            }
            .map_err(|e| Error::io(log_path.display().to_string(), e))?;
            let mut log = Tee {
                file: &mut log_file,
            };
            trainer::train(&corpus, &vocab, &cfg, &out, resume.as_deref(), &mut log)?;
            println!("checkpoint: {}", out.display());
            println!("loss log: {}", log_path.display());
        }
        Command::Encode { ckpt, input, out } => {
            let ck = checkpoint::load(&ckpt)?;
            let vectors = eval::encode_file(&ck.model, &ck.vocab, &input)?;
            let mut text = String::new();
            for v in &vectors {
                let line: Vec<String> = v.iter().map(f32::to_string).collect();
                text.push_str(&line.join(" "));
                text.push('\n');
            }
            fs::write(&out, text).map_err(|e| Error::io(out.display().to_string(), e))?;
            println!("encoded {} sentences to {}", vectors.len(), out.display());
        }
        Command::Expand {
            ckpt,
            pretrained,
            out,
            out_vocab,
        } => {
            let mut ck = checkpoint::load(&ckpt)?;
            let pre = load_pretrained_text(&pretrained)?;
            let map = fit_linear_map(&pre, &ck.model.embedding, &ck.vocab)?;
            let added = expand_vocabulary(&map, &pre, &mut ck.vocab, &mut ck.model)?;
            checkpoint::save(&out, &ck.model, &ck.vocab, ck.step, None)?;
            if let Some(vp) = out_vocab {
                ck.vocab.write(&vp)?;
            }
            println!(
                "mapped {} shared tokens (residual {:.6}), added {} new tokens; vocabulary now {}",
                map.shared_tokens,
                map.residual,
                added,
                ck.vocab.len()
            );
        }
        Command::EvalSim { ckpt, pairs } => {
            let ck = checkpoint::load(&ckpt)?;
            let (r, rho) = eval::eval_similarity(&ck.model, &ck.vocab, &pairs)?;
            println!("pearson\t{r}");
            println!("spearman\t{rho}");
        }
        Command::EvalCls {
            ckpt,
            train,
            test,
            l2,
        } => {
            let ck = checkpoint::load(&ckpt)?;
            let acc = eval::eval_classify(&ck.model, &ck.vocab, &train, &test, l2)?;
            println!("accuracy\t{acc}");
        }
        Command::Nn {
            ckpt,
            corpus,
            query,
            k,
        } => {
            let ck = checkpoint::load(&ckpt)?;
            let hits = eval::nearest_neighbors(&ck.model, &ck.vocab, &query, &corpus, k)?;
            for (idx, sentence, cos) in hits {
                println!("{cos}\t{idx}\t{sentence}");
            }
        }
    }
    Ok(())
}

fn loss_log_path(out: &std::path::Path) -> PathBuf {
    let mut name = out
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "train".into());
    name.push_str(".loss");
    out.with_file_name(name)
}

/// Writes loss lines to the log file and echoes them to stdout.
struct Tee<'a> {
    file: &'a mut fs::File,
}

impl Write for Tee<'_> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.file.write_all(buf)?;
        std::io::stdout().write_all(buf)?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.file.flush()
    }
}
