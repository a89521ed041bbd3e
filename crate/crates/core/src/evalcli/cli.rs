use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use super::config::{init_model, load_corpus, prepare_data, RunConfig};
use super::eval::evaluate;
use super::gradsuite::{loss_suite, primitive_suite, SuiteResult, GRAD_TOLERANCE};
use super::grid::run_grid;
use super::report::{parse_report, render_report};
use crate::error::{Error, Result};
use crate::model::{EncoderKind, HeadKind, Model};
use crate::training::{train, LogRecord};

#[derive(Debug, Parser)]
#[command(name = "fewshot-ec", version, about = "Few-shot event classification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the configured synthetic corpus as JSONL
    GenData(Common),
    /// Train a model and keep the best dev checkpoint
    Train(Common),
    /// Evaluate a checkpoint on the test labels
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to <out>/checkpoint.json
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and evaluate every cell of eval.grid
    Grid(Common),
    /// Finite-difference checks of all primitives and the training loss
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 5)]
        cases: usize,
    },
    /// Render a grid JSON file as a table
    Report {
        #[command(flatten)]
        common: Common,
        /// Defaults to <out>/grid.json
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long)]
        no_references: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Args)]
pub struct Common {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long)]
    pub n_way: Option<usize>,
    #[arg(long)]
    pub k_shot: Option<usize>,
    #[arg(long)]
    pub q_aux: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub noise_rate: Option<f64>,
    #[arg(long, value_parser = parse_encoder)]
    pub encoder: Option<EncoderKind>,
    #[arg(long, value_parser = parse_head)]
    pub head: Option<HeadKind>,
    #[arg(long, value_enum)]
    pub lolos: Option<Switch>,
}

fn parse_encoder(s: &str) -> std::result::Result<EncoderKind, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| "expected cnn or transformer".into())
}

fn parse_head(s: &str) -> std::result::Result<HeadKind, String> {
    serde_json::from_value(serde_json::Value::String(s.into()))
        .map_err(|_| "expected matching, proto, proto-att or relation".into())
}

impl Common {
    /// The config file (or defaults) with command-line overrides applied.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            c.train.seed = s;
            c.eval.seed = s;
        }
        if let Some(v) = self.n_way {
            c.eval.n_way = v;
        }
        if let Some(v) = self.k_shot {
            c.eval.k_shot = v;
        }
        if let Some(v) = self.q_aux {
            c.train.q_aux = v;
        }
        if let Some(v) = self.lambda {
            c.train.lambda = v;
        }
        if let Some(v) = self.noise_rate {
            c.train.noise_rate = v;
        }
        if let Some(v) = self.encoder {
            c.encoder.kind = v;
        }
        if let Some(v) = self.head {
            c.head.kind = v;
        }
        if let Some(v) = self.lolos {
            c.train.lolos = v == Switch::On;
        }
        c.validate()?;
        Ok(c)
    }

    fn out_dir(&self) -> Result<&Path> {
        fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))?;
        Ok(&self.out)
    }
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn print_suites(results: &[SuiteResult]) -> bool {
    let mut ok = true;
    for r in results {
        println!(
            "{:<6} {:<32} cases {:>2}  coords {:>5}  kinks {:>3}  max rel err {:.3e}",
            if r.passed() { "pass" } else { "FAIL" },
            r.name,
            r.cases,
            r.checked,
            r.skipped_kinks,
            r.max_rel_error
        );
        ok &= r.passed();
    }
    ok
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(common) => {
            let config = common.resolve()?;
            let corpus = load_corpus(&config.data)?;
            let path = common.out_dir()?.join("corpus.jsonl");
            corpus.write_jsonl(&path)?;
            println!(
                "wrote {} examples over {} labels to {}",
                corpus.len(),
                corpus.labels().len(),
                path.display()
            );
        }
        Command::Train(common) => {
            let config = common.resolve()?;
            let data = prepare_data(&config.data)?;
            let spec = config.eval.spec()?;
            let model = init_model(&config, &data.vocab)?;
            let outcome = train(&data.splits.train, Some(&data.splits.dev), model, &config.train, &spec)?;
            let out = common.out_dir()?;
            outcome.best.save(out.join("checkpoint.json"))?;
            let log_path = out.join("train_log.jsonl");
            let file = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
            LogRecord::write_jsonl(&outcome.log, BufWriter::new(file))?;
            write(&out.join("config.json"), &serde_json::to_string_pretty(&config)?)?;
            match outcome.best_dev_accuracy {
                Some(acc) => println!(
                    "best dev accuracy {:.4} at episode {}; checkpoint in {}",
                    acc,
                    outcome.best_episode,
                    out.display()
                ),
                None => println!("trained {} episodes; checkpoint in {}", config.train.episodes, out.display()),
            }
        }
        Command::Eval { common, checkpoint } => {
            let config = common.resolve()?;
            let path = checkpoint.unwrap_or_else(|| common.out.join("checkpoint.json"));
            let model = Model::load(&path)?;
            let data = prepare_data(&config.data)?;
            let spec = config.eval.spec()?;
            let report = evaluate(&data.splits.test, &model, &spec, config.eval.episodes, config.eval.seed)?;
            write(
                &common.out_dir()?.join("eval_report.json"),
                &serde_json::to_string_pretty(&report)?,
            )?;
            println!(
                "{}-way {}-shot accuracy {:.4} ± {:.4} over {} episodes",
                report.n_way, report.k_shot, report.mean_accuracy, report.ci95, report.episodes_evaluated
            );
        }
        Command::Grid(common) => {
            let config = common.resolve()?;
            let data = prepare_data(&config.data)?;
            let grid = run_grid(&data, &config)?;
            let rendered = render_report(&grid, true)?;
            let out = common.out_dir()?;
            write(&out.join("grid.json"), &rendered.json)?;
            write(&out.join("grid.txt"), &rendered.text)?;
            print!("{}", rendered.text);
        }
        Command::Gradcheck { common, cases } => {
            let config = common.resolve()?;
            println!("relative error tolerance {GRAD_TOLERANCE:e}");
            let mut ok = print_suites(&primitive_suite(config.train.seed, cases)?);
            ok &= print_suites(&loss_suite(config.train.seed, cases, config.train.lambda.max(0.1), 200)?);
            if !ok {
                return Err(Error::Numerical("gradient check failed".into()));
            }
        }
        Command::Report {
            common,
            grid,
            no_references,
        } => {
            let path = grid.unwrap_or_else(|| common.out.join("grid.json"));
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let rendered = render_report(&parse_report(&text)?, !no_references)?;
            let out = common.out_dir()?;
            write(&out.join("report.json"), &rendered.json)?;
            write(&out.join("report.txt"), &rendered.text)?;
            print!("{}", rendered.text);
        }
    }
    Ok(())
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
