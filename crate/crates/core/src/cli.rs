//! Command-line front end.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::eval::sweep_csv;
use crate::fusion::TaskKind;
use crate::pipeline::{
    default_task, gen_corpus, read_config, write_file, write_json, Session, REPORT_FILE, SWEEP_FILE,
};

pub const THREADS_ENV: &str = "UNIFUSE_THREADS";

#[derive(Debug, Parser)]
#[command(name = "unifuse", version, about = "Tri-modal sign / lip / audio fusion on a synthetic corpus")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run configuration (defaults when omitted).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Debug, Args)]
struct WithCorpus {
    #[command(flatten)]
    common: Common,
    /// Corpus directory written by `gen-corpus`.
    #[arg(long)]
    corpus: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic corpus.
    GenCorpus {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the base decoder on the text-only split.
    PretrainDecoder {
        #[command(flatten)]
        data: WithCorpus,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a training stage.
    Train {
        #[command(flatten)]
        data: WithCorpus,
        /// 1, 2, joint, single:TASK, slt-sign-only, slt-sign-lip, slt-sign-lip-vsr
        #[arg(long)]
        stage: String,
        /// Checkpoint to start from (pretrained decoder or an earlier stage).
        #[arg(long)]
        init: Option<PathBuf>,
        /// Allow stage 2 without a stage-1 checkpoint.
        #[arg(long)]
        from_scratch: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on the test splits.
    Eval {
        #[command(flatten)]
        data: WithCorpus,
        /// Comma-separated tasks or `all`.
        #[arg(long, default_value = "all")]
        task: String,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode one corpus sample and print the result as JSON.
    Decode {
        #[command(flatten)]
        data: WithCorpus,
        /// Sample id.
        #[arg(long)]
        input: u32,
        /// Defaults to SLT for signed samples and AVSR for spoken ones.
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// WER of VSR, ASR and AVSR under babble noise at each SNR.
    SweepNoise {
        #[command(flatten)]
        data: WithCorpus,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "-5,-2.5,0,2.5,5,7.5,10", allow_hyphen_values = true)]
        snr_list: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_tasks(spec: &str) -> Result<Vec<TaskKind>> {
    if spec.eq_ignore_ascii_case("all") {
        return Ok(TaskKind::ALL.to_vec());
    }
    let mut tasks: Vec<TaskKind> = spec.split(',').map(|t| t.trim().parse()).collect::<Result<_>>()?;
    tasks.sort();
    tasks.dedup();
    Ok(tasks)
}

pub fn parse_snr_list(spec: &str) -> Result<Vec<f64>> {
    spec.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Argument(format!("--snr-list entry '{s}' is not a number")))
        })
        .collect()
}

fn session(data: &WithCorpus) -> Result<Session> {
    let cfg = read_config(data.common.config.as_deref())?;
    Session::open(cfg, &data.corpus, data.common.seed)
}

/// Caps rayon's worker count from `UNIFUSE_THREADS`.
fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| Error::Config(format!("{THREADS_ENV}={raw} is not a positive integer")))?;
    // a second call in the same process (tests) finds the pool already built
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    init_threads()?;
    match cli.command {
        Command::GenCorpus { common, out } => {
            let cfg = read_config(common.config.as_deref())?;
            let manifest = gen_corpus(&cfg, common.seed, &out)?;
            log::info!("corpus {} written to {}", manifest.corpus_digest(), out.display());
        }
        Command::PretrainDecoder { data, out } => {
            let report = session(&data)?.pretrain(&out)?;
            log::info!("perplexity {:.3} -> {:.3}", report.perplexity_before, report.perplexity_after);
        }
        Command::Train { data, stage, init, from_scratch, out } => {
            let s = session(&data)?;
            let report = s.train(&stage, init.as_deref(), from_scratch, &out)?;
            log::info!("stage {} done; kept the {:?} checkpoint", report.stage.name, report.chosen);
        }
        Command::Eval { data, task, checkpoint, out } => {
            let tasks = parse_tasks(&task)?;
            let (report, _) = session(&data)?.evaluate(&checkpoint, &tasks)?;
            write_json(&out.join(REPORT_FILE), &report)?;
        }
        Command::Decode { data, input, task, checkpoint } => {
            let s = session(&data)?;
            let task = match task {
                Some(t) => t.parse()?,
                None => default_task(s.find_sample(input)?),
            };
            print_json(&s.decode(&checkpoint, input, task)?)?;
        }
        Command::SweepNoise { data, checkpoint, snr_list, out } => {
            let snrs = parse_snr_list(&snr_list)?;
            let report = session(&data)?.sweep_noise(&checkpoint, &snrs)?;
            write_file(&out.join(SWEEP_FILE), sweep_csv(&report.rows).as_bytes())?;
            write_json(&out.join(REPORT_FILE), &report)?;
        }
    }
    Ok(())
}

/// Parses `argv` (including the program name), runs the command and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
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
