use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};

use agex_core::dataset::{corpus_stats, read_samples, DatasetError, TaskTag};
use agex_core::explain::BackendMode;
use agex_core::imageio::{encode_rgb_png, load_rgb, overlay};
use agex_core::kernels::reference::selftest;
use agex_core::mask::BitMask;
use agex_core::metrics::{evaluate, MetricError};
use agex_core::pipeline::{self as pl, ArtifactReport, ImageList, PipelineConfig, PipelineError, Resources, SelectionReport};

#[derive(Parser)]
#[command(name = "agex", version, about = "Artifact-grounded forgery explanation data pipeline")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON config file; defaults are used for missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory shared by all stages.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// live, mock or replay.
    #[arg(long)]
    backend: Option<String>,
}

#[derive(Args, Clone)]
struct Stage {
    #[command(flatten)]
    common: Common,
    /// Image list JSON (see make-fixture).
    #[arg(long)]
    images: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Region masks of every concept.
    DeriveMasks(Stage),
    /// Whole-image artifact mask and per-concept coverage.
    ExtractArtifacts(Stage),
    SelectConcepts(Stage),
    /// Random boxes for box-level tasks.
    AugmentBage(Stage),
    /// Explanation requests through the chat backend.
    Annotate(Stage),
    /// Builds and validates the JSONL corpus.
    Assemble(Stage),
    /// Every stage in order.
    Run(Stage),
    /// Per-split, per-task sample counts of a corpus.
    Stats {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        json: bool,
    },
    Eval {
        #[arg(long)]
        task: String,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Print only the JSON report.
        #[arg(long)]
        json: bool,
    },
    /// Checks the model kernels against their loop oracles.
    KernelsSelftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Overlay PNGs of artifact and selected concept masks.
    Render(Stage),
    /// Writes synthetic real/fake pairs and an image list.
    MakeFixture {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value_t = 4)]
        count: u64,
        #[arg(long, default_value_t = 256)]
        size: usize,
    },
}

fn effective_config(c: &Common) -> anyhow::Result<PipelineConfig> {
    let mut cfg = match &c.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(j) = c.jobs {
        cfg.jobs = j;
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(b) = &c.backend {
        cfg.backend.mode = b.parse::<BackendMode>().map_err(|e| anyhow!(e))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn stage(s: &Stage, f: impl FnOnce(&PipelineConfig, &Resources, &ImageList, &Path) -> anyhow::Result<()>) -> anyhow::Result<()> {
    let cfg = effective_config(&s.common)?;
    let res = Resources::load(&cfg)?;
    let list = ImageList::load(&s.images)?;
    fs::create_dir_all(&s.common.out)?;
    f(&cfg, &res, &list, &s.common.out)
}

fn render(cfg: &PipelineConfig, list: &ImageList, out: &Path) -> anyhow::Result<()> {
    let dir = out.join("render");
    fs::create_dir_all(&dir)?;
    fs::write(dir.join(pl::CONFIG_ECHO), cfg.provenance_json() + "\n")?;
    for r in &list.images {
        let fake = load_rgb(&r.fake).with_context(|| r.fake.display().to_string())?;
        let art: ArtifactReport = pl::read_stage(out, pl::STAGE_ARTIFACTS, &r.id)?;
        let whole = art.whole.decode()?;
        fs::write(dir.join(format!("{}_artifact.png", r.id)), encode_rgb_png(&overlay(&fake, &[&whole]))?)?;
        if let Ok(sel) = pl::read_stage::<SelectionReport>(out, pl::STAGE_SELECTION, &r.id) {
            let masks: Vec<BitMask> =
                sel.regional.iter().filter(|(k, _)| sel.atomic.contains(*k)).map(|(_, m)| m.decode()).collect::<Result<_, _>>()?;
            let refs: Vec<&BitMask> = masks.iter().collect();
            fs::write(dir.join(format!("{}_concepts.png", r.id)), encode_rgb_png(&overlay(&fake, &refs))?)?;
        }
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.cmd {
        Cmd::DeriveMasks(s) => stage(&s, |c, r, l, o| Ok(pl::run_derive_masks(c, r, l, o)?)),
        Cmd::ExtractArtifacts(s) => stage(&s, |c, r, l, o| Ok(pl::run_extract_artifacts(c, r, l, o)?)),
        Cmd::SelectConcepts(s) => stage(&s, |c, r, l, o| Ok(pl::run_select_concepts(c, r, l, o)?)),
        Cmd::AugmentBage(s) => stage(&s, |c, _, l, o| Ok(pl::run_augment_boxes(c, l, o)?)),
        Cmd::Annotate(s) => stage(&s, |c, r, l, o| {
            let client = pl::make_client(c, o)?;
            pl::run_annotate(c, r, l, o, &client)?;
            log::info!("{} network call(s), {} cache hit(s)", client.network_calls(), client.cache_hits());
            Ok(())
        }),
        Cmd::Assemble(s) => stage(&s, |c, r, l, o| {
            let summary = pl::run_assemble(c, r, l, o)?;
            print!("{}", summary.stats.render_table());
            Ok(())
        }),
        Cmd::Run(s) => stage(&s, |c, _, l, o| {
            let summary = pl::run_all(c, l, o)?;
            print!("{}", summary.stats.render_table());
            Ok(())
        }),
        Cmd::Stats { corpus, json } => {
            let stats = corpus_stats(&corpus)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&stats.to_json())?);
            } else {
                print!("{}", stats.render_table());
            }
            Ok(())
        }
        Cmd::Eval { task, pred, gt, json } => {
            let task: TaskTag = task.parse()?;
            let report = evaluate(task, &read_samples(&pred)?, &read_samples(&gt)?)?;
            if !json {
                print!("{}", report.render_table());
            }
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
        Cmd::KernelsSelftest { seed } => {
            let cases = selftest(seed);
            for c in &cases {
                println!("{:22} max_err {:.3e}  tol {:.0e}  {}", c.name, c.max_err, c.tolerance, if c.pass { "PASS" } else { "FAIL" });
            }
            let failed: Vec<&str> = cases.iter().filter(|c| !c.pass).map(|c| c.name.as_str()).collect();
            if !failed.is_empty() {
                bail!("kernel oracle mismatch: {}", failed.join(", "));
            }
            Ok(())
        }
        Cmd::Render(s) => stage(&s, |c, _, l, o| render(c, l, o)),
        Cmd::MakeFixture { dir, count, size } => {
            let seeds: Vec<u64> = (1..=count).collect();
            let list = pl::write_fixture_set(&dir, &seeds, size)?;
            println!("{}", list.display());
            Ok(())
        }
    }
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    if let Some(p) = e.downcast_ref::<PipelineError>() {
        p.kind()
    } else if e.downcast_ref::<DatasetError>().is_some() {
        "dataset"
    } else if e.downcast_ref::<MetricError>().is_some() {
        "metric"
    } else {
        "error"
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let chain: Vec<String> = e.chain().skip(1).map(|c| c.to_string()).collect();
            let v = serde_json::json!({"error": error_kind(&e), "message": e.to_string(), "causes": chain});
            eprintln!("{v}");
            ExitCode::FAILURE
        }
    }
}
