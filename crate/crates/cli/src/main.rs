//! `botsai` command-line entry point.
//!
//! Training configuration precedence, lowest first: built-in defaults, the
//! `--config` JSON file, `--set key=value` pairs, then the named flags.

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use botsai::pipeline::{self, RunRecord, Table};
use botsai::{generate, HeteroGraph, Model64, Prepared64, Split, SynthConfig, TrainConfig};
use clap::{Args, Parser, Subcommand};
use serde_json::{Map, Value};

#[derive(Parser)]
#[command(name = "botsai", version, about = "Multimodal social-bot detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled graph.
    Synth(SynthArgs),
    /// Train one model and print its validation and test metrics.
    Train(TrainArgs),
    /// Score a saved model on one split.
    Eval(EvalArgs),
    /// Compare relation subsets.
    AblateRelations(RelationArgs),
    /// Compare architecture variants and graph-layer substitutes.
    AblateVariants(VariantArgs),
    /// Compare oversampling scales.
    SweepOmega(OmegaArgs),
    /// Check analytic gradients of the training objective against finite differences.
    GradCheck(GradCheckArgs),
    /// Write the six subspace vectors of every labeled user as CSV.
    ExportHidden(ExportArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output graph JSON.
    #[arg(long)]
    out: PathBuf,
    /// Generator settings as JSON; field names follow the generator config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_users: Option<usize>,
    #[arg(long)]
    bot_fraction: Option<f64>,
}

#[derive(Args)]
struct ConfigArgs {
    /// Input graph JSON.
    #[arg(long)]
    data: PathBuf,
    /// Training config JSON with flat keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set dropout=0.2`. Values are parsed
    /// as JSON, falling back to a plain string.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    /// Oversampling scale.
    #[arg(long)]
    omega: Option<f64>,
    #[arg(long)]
    repeats: Option<usize>,
    /// Comma-separated relation subset.
    #[arg(long, value_delimiter = ',')]
    relations: Option<Vec<String>>,
    /// full, base, sf or if.
    #[arg(long)]
    variant: Option<String>,
    /// local, gcn, gat or rgt.
    #[arg(long)]
    graph_layer: Option<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut map = match &self.config {
            Some(p) => match serde_json::from_str(&read(p)?).with_context(|| format!("parsing {}", p.display()))? {
                Value::Object(m) => m,
                _ => bail!("{} must hold a JSON object", p.display()),
            },
            None => Map::new(),
        };
        for kv in &self.set {
            let Some((k, v)) = kv.split_once('=') else {
                bail!("`--set {kv}` is not KEY=VALUE");
            };
            let v = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
            map.insert(k.to_string(), v);
        }
        let mut put = |k: &str, v: Option<Value>| {
            if let Some(v) = v {
                map.insert(k.to_string(), v);
            }
        };
        put("seed", self.seed.map(Value::from));
        put("lr", self.lr.map(Value::from));
        put("batch_size", self.batch_size.map(Value::from));
        put("hidden", self.hidden.map(Value::from));
        put("heads", self.heads.map(Value::from));
        put("layers", self.layers.map(Value::from));
        put("max_epochs", self.max_epochs.map(Value::from));
        put("patience", self.patience.map(Value::from));
        put("dropout", self.dropout.map(Value::from));
        put("oversample_scale", self.omega.map(Value::from));
        put("repeats", self.repeats.map(Value::from));
        put("relations", self.relations.clone().map(Value::from));
        put("variant", self.variant.as_ref().map(|v| Value::from(v.to_ascii_lowercase())));
        put("graph_layer", self.graph_layer.as_ref().map(|v| Value::from(v.to_ascii_lowercase())));
        let cfg: TrainConfig = serde_json::from_value(Value::Object(map)).context("invalid training config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn graph(&self) -> Result<HeteroGraph> {
        HeteroGraph::load(&self.data).with_context(|| format!("loading {}", self.data.display()))
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Save the selected parameters as JSON.
    #[arg(long)]
    model_out: Option<PathBuf>,
    /// Write per-epoch losses and validation scores as JSON lines.
    #[arg(long)]
    history_out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
}

#[derive(Args)]
struct TableOut {
    /// Comparison table CSV; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-run metrics as JSON lines.
    #[arg(long)]
    records_out: Option<PathBuf>,
}

#[derive(Args)]
struct RelationArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Relation subsets separated by `;`, relations within one by `,`; an
    /// empty subset runs without the graph mode.
    #[arg(long)]
    subsets: String,
    #[command(flatten)]
    out: TableOut,
}

#[derive(Args)]
struct VariantArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Restrict to these rows, comma-separated (e.g. `BotSAI,BotSAI-IF`).
    #[arg(long, value_delimiter = ',')]
    only: Option<Vec<String>>,
    #[command(flatten)]
    out: TableOut,
}

#[derive(Args)]
struct OmegaArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long, value_delimiter = ',', default_value = "0,0.25,1.5")]
    values: Vec<f64>,
    #[command(flatten)]
    out: TableOut,
}

#[derive(Args)]
struct GradCheckArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    /// Maximum relative error.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    let f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn write_json_line<W: Write, S: serde::Serialize>(w: &mut W, value: &S) -> Result<()> {
    serde_json::to_writer(&mut *w, value)?;
    w.write_all(b"\n")?;
    Ok(())
}

fn load_model(path: &Path) -> Result<Model64> {
    serde_json::from_str(&read(path)?).with_context(|| format!("parsing model {}", path.display()))
}

fn synth(a: &SynthArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => serde_json::from_str(&read(p)?).with_context(|| format!("parsing {}", p.display()))?,
        None => SynthConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.n_users {
        cfg.n_users = n;
    }
    if let Some(f) = a.bot_fraction {
        cfg.bot_fraction = f;
    }
    let g = generate(&cfg)?;
    g.save(&a.out)?;
    eprintln!("wrote {} users, {} edges to {}", g.num_users(), g.edges().len(), a.out.display());
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    let cfg = a.cfg.resolve()?;
    let g = a.cfg.graph()?;
    let out = pipeline::train::<f64>(&g, &cfg)?;
    let mut stdout = io::stdout().lock();
    for (split, m) in [("val", out.val), ("test", out.test)] {
        let rec = RunRecord {
            run_id: format!("{}#0", cfg.variant.name()),
            seed: cfg.seed,
            split: split.into(),
            accuracy: m.accuracy,
            f1: m.f1,
            epoch_selected: out.epoch_selected,
        };
        write_json_line(&mut stdout, &rec)?;
    }
    if let Some(p) = &a.model_out {
        let mut w = create(p)?;
        serde_json::to_writer(&mut w, &out.model)?;
        w.flush()?;
    }
    if let Some(p) = &a.history_out {
        let mut w = create(p)?;
        for e in &out.history {
            write_json_line(&mut w, e)?;
        }
        w.flush()?;
    }
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let g = HeteroGraph::load(&a.data)?;
    let data = Prepared64::new(&g, &model.cfg)?;
    let m = pipeline::evaluate(&model, &data, a.split)?;
    #[derive(serde::Serialize)]
    struct EvalLine {
        split: Split,
        accuracy: f64,
        f1: f64,
        support: usize,
    }
    write_json_line(
        &mut io::stdout().lock(),
        &EvalLine {
            split: a.split,
            accuracy: m.accuracy,
            f1: m.f1,
            support: m.support,
        },
    )
}

fn emit(table: &Table, out: &TableOut) -> Result<()> {
    match &out.out {
        Some(p) => {
            let mut w = create(p)?;
            table.write_csv(&mut w)?;
            w.flush()?;
        }
        None => table.write_csv(io::stdout().lock())?,
    }
    if let Some(p) = &out.records_out {
        let mut w = create(p)?;
        table.write_records(&mut w)?;
        w.flush()?;
    }
    Ok(())
}

fn parse_subsets(s: &str) -> Vec<Vec<String>> {
    s.split(';')
        .map(|part| {
            part.split(',')
                .map(str::trim)
                .filter(|r| !r.is_empty())
                .map(String::from)
                .collect()
        })
        .collect()
}

fn ablate_relations(a: &RelationArgs) -> Result<()> {
    let cfg = a.cfg.resolve()?;
    let g = a.cfg.graph()?;
    let table = pipeline::ablate_relations::<f64>(&g, &cfg, &parse_subsets(&a.subsets))?;
    emit(&table, &a.out)
}

fn ablate_variants(a: &VariantArgs) -> Result<()> {
    let cfg = a.cfg.resolve()?;
    let g = a.cfg.graph()?;
    let table = match &a.only {
        Some(names) => {
            let names: Vec<&str> = names.iter().map(String::as_str).collect();
            pipeline::ablate_variants_subset::<f64>(&g, &cfg, &names)?
        }
        None => pipeline::ablate_variants::<f64>(&g, &cfg)?,
    };
    emit(&table, &a.out)
}

fn sweep_omega(a: &OmegaArgs) -> Result<()> {
    let cfg = a.cfg.resolve()?;
    let g = a.cfg.graph()?;
    let table = pipeline::sweep_omega::<f64>(&g, &cfg, &a.values)?;
    emit(&table, &a.out)
}

/// Returns whether the check passed.
fn grad_check(a: &GradCheckArgs) -> Result<bool> {
    let cfg = a.cfg.resolve()?;
    let g = a.cfg.graph()?;
    let report = pipeline::grad_check_model(&g, &cfg, a.step, a.tol)?;
    let mut stdout = io::stdout().lock();
    for p in &report.params {
        writeln!(
            stdout,
            "{:<6} {:<40} rel {:.3e}  abs {:.3e}",
            if p.max_rel_error < a.tol { "ok" } else { "FAIL" },
            p.name,
            p.max_rel_error,
            p.max_abs_error
        )?;
    }
    writeln!(
        stdout,
        "{} max relative error {:.3e} (tol {:.1e}, h {:.1e}, loss {:.6})",
        if report.passed { "PASS" } else { "FAIL" },
        report.max_rel_error,
        report.tol,
        report.h,
        report.loss
    )?;
    Ok(report.passed)
}

fn export_hidden(a: &ExportArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let g = HeteroGraph::load(&a.data)?;
    let data = Prepared64::new(&g, &model.cfg)?;
    let rows = pipeline::export_hidden(&model, &data, &a.out)?;
    eprintln!("wrote {rows} rows to {}", a.out.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::Synth(a) => synth(a)?,
        Command::Train(a) => train(a)?,
        Command::Eval(a) => eval(a)?,
        Command::AblateRelations(a) => ablate_relations(a)?,
        Command::AblateVariants(a) => ablate_variants(a)?,
        Command::SweepOmega(a) => sweep_omega(a)?,
        Command::GradCheck(a) => return grad_check(a),
        Command::ExportHidden(a) => export_hidden(a)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
