//! `caia`: file-driven front end for class attribute inference.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use caia_core::attribution::{relative_attribution, AttributionSample, FloatGrid, MaskGrid};
use caia_core::evaluation::{ablate, aggregate_runs, evaluate};
use caia_core::filter::{build_attack_set, check_tau, CandidateTuple, FilterMode, DEFAULT_TAU};
use caia_core::formats::{
    read_json, read_report, report_table, write_json, write_report, AttackSetManifest,
    PredictionsFile,
};
use caia_core::oracle::{HttpOracle, ImageQuery, LogitFileWriter};
use caia_core::simulator::serve;
use caia_core::space::PromptCatalog;
use caia_core::{
    run_attack, AttributeSpace, Error, ErrorClass, GroundTruth, Oracle, OracleDescriptor,
    OracleKind, Scenario, ScenarioConfig,
};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(
    name = "caia",
    version,
    about = "Class attribute inference against black-box classifiers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic target model; write its ground truth and attack set.
    Simulate(SimulateArgs),
    /// Filter candidate tuples into an attack set.
    Filter(FilterArgs),
    /// Query an oracle and predict the attribute value of every class.
    Attack(AttackArgs),
    /// Score predictions against ground truth, or aggregate reports.
    Eval(EvalArgs),
    /// Attack accuracy as a function of attack-set size.
    Ablate(AblateArgs),
    /// Mean attribution share per image region.
    Attribution(AttributionArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    ground_truth: PathBuf,
    #[arg(long)]
    attack_set: Option<PathBuf>,
    /// Write every logit row of the attack set as JSONL.
    #[arg(long)]
    export_logits: Option<PathBuf>,
    /// Serve the model over HTTP at this address until interrupted.
    #[arg(long)]
    serve: Option<String>,
}

#[derive(Args)]
struct FilterArgs {
    #[arg(long)]
    candidates: PathBuf,
    #[arg(long, default_value_t = DEFAULT_TAU)]
    tau: f64,
    /// Stop after this many accepted tuples (default: all candidates).
    #[arg(long)]
    target: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Per-candidate decisions report.
    #[arg(long)]
    decisions: Option<PathBuf>,
    /// Accept every candidate.
    #[arg(long)]
    no_filter: bool,
    /// Fetch missing scores from this attribute classifier endpoint.
    #[arg(long)]
    scores_oracle: Option<String>,
}

#[derive(Args)]
struct OracleArgs {
    /// file, http or simulator
    #[arg(long)]
    oracle_kind: OracleKind,
    /// Logit file, base URL, or scenario config.
    #[arg(long)]
    oracle: String,
    /// Expected class count; checked against the oracle.
    #[arg(long)]
    num_classes: Option<usize>,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 4)]
    max_in_flight: usize,
}

impl OracleArgs {
    fn descriptor(&self) -> OracleDescriptor {
        OracleDescriptor {
            kind: self.oracle_kind,
            locator: self.oracle.clone(),
            num_classes: self.num_classes,
            batch_size: self.batch_size,
            max_in_flight: self.max_in_flight,
        }
    }
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long)]
    attack_set: PathBuf,
    #[command(flatten)]
    oracle: OracleArgs,
    /// Use only the first N tuples by id.
    #[arg(long)]
    sample_limit: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, requires = "predictions", conflicts_with = "aggregate")]
    truth: Option<PathBuf>,
    #[arg(long, requires = "truth")]
    predictions: Option<PathBuf>,
    /// Reports to combine.
    #[arg(long, num_args = 1.., required_unless_present = "predictions")]
    aggregate: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Also print a text table to standard output.
    #[arg(long)]
    table: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    attack_set: PathBuf,
    #[command(flatten)]
    oracle: OracleArgs,
    #[arg(long)]
    truth: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,5,10,25,50,100")]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 4)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Also write the curve as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct AttributionArgs {
    /// Sample list (JSON); paths inside are relative to it.
    #[arg(long)]
    samples: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Filter(a) => filter(a),
        Command::Attack(a) => attack(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate_cmd(a),
        Command::Attribution(a) => attribution(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e
        .chain()
        .find_map(|c| c.downcast_ref::<Error>())
        .map(Error::class)
    {
        Some(ErrorClass::EmptyAttackSet) => 3,
        Some(ErrorClass::Oracle) => 4,
        _ => 2,
    }
}

/// Attach the bundled edit prompts when the space matches a catalog entry.
fn with_catalog_prompts(space: AttributeSpace) -> AttributeSpace {
    if !space.prompts().is_empty() {
        return space;
    }
    match PromptCatalog::builtin().space(space.name()) {
        Some(known) if known.values() == space.values() => known,
        _ => space,
    }
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let mut config = ScenarioConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let scenario = Arc::new(Scenario::generate(config.clone())?);
    scenario.ground_truth().write_csv(&args.ground_truth)?;
    log::info!(
        "{} classes, {} tuples; ground truth in {}",
        scenario.num_classes(),
        config.num_tuples,
        args.ground_truth.display()
    );
    let echo = json!({
        "command": "simulate",
        "scenario": config,
        "config_path": args.config,
    });
    if let Some(path) = &args.attack_set {
        AttackSetManifest {
            attribute: with_catalog_prompts(scenario.space().clone()),
            tuples: scenario.attack_set(),
            config: Some(echo.clone()),
        }
        .write(path)?;
    }
    if let Some(path) = &args.export_logits {
        let mut w = LogitFileWriter::create(path, scenario.num_classes())?;
        for t in scenario.attack_set() {
            for v in scenario.space().values() {
                w.write(&t.id, v, &scenario.simulate_logits(&t.id, v)?)?;
            }
        }
        w.finish()?;
    }
    if let Some(bind) = &args.serve {
        let server = serve(scenario, bind)?;
        log::info!("serving on {}", server.url());
        println!("{}", server.url());
        server.join();
    }
    Ok(())
}

fn filter(args: FilterArgs) -> Result<()> {
    let mode = if args.no_filter {
        FilterMode::Bypass
    } else {
        check_tau(args.tau)?;
        FilterMode::Threshold(args.tau)
    };
    let (space, mut candidates) = AttackSetManifest::read(&args.candidates)?.into_candidates();
    if let Some(url) = &args.scores_oracle {
        fill_scores(&mut candidates, &space, url)?;
    }
    let target = args.target.unwrap_or(candidates.len().max(1));
    let total = candidates.len();
    let build = build_attack_set(candidates, mode, target, &space)?;
    if build.under_target {
        log::warn!(
            "only {} of {target} requested tuples accepted",
            build.tuples.len()
        );
    }
    log::info!(
        "accepted {} of {} candidates examined ({total} offered)",
        build.tuples.len(),
        build.decisions.len()
    );
    let echo = json!({
        "command": "filter",
        "candidates": args.candidates,
        "tau": if args.no_filter { Value::Null } else { json!(args.tau) },
        "no_filter": args.no_filter,
        "target": target,
        "scores_oracle": args.scores_oracle,
    });
    AttackSetManifest {
        attribute: with_catalog_prompts(space),
        tuples: build.tuples,
        config: Some(echo.clone()),
    }
    .write(&args.out)?;
    if let Some(path) = &args.decisions {
        write_json(
            path,
            &json!({
                "format": "caia-decisions/1",
                "under_target": build.under_target,
                "decisions": build.decisions,
                "config": echo,
            }),
        )?;
    }
    Ok(())
}

fn fill_scores(candidates: &mut [CandidateTuple], space: &AttributeSpace, url: &str) -> Result<()> {
    let queries: Vec<ImageQuery> = candidates
        .iter()
        .filter(|c| c.scores.is_empty())
        .flat_map(|c| {
            c.images.iter().map(|(value, image)| ImageQuery {
                tuple_id: c.id.clone(),
                value: value.clone(),
                image: image.clone(),
            })
        })
        .collect();
    if queries.is_empty() {
        return Ok(());
    }
    let oracle = HttpOracle::connect(url, 32, 4)?;
    let rows = oracle.fetch_attribute_scores(space, &queries)?;
    let mut by_tuple: BTreeMap<String, BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    for (q, row) in queries.into_iter().zip(rows) {
        by_tuple.entry(q.tuple_id).or_default().insert(q.value, row);
    }
    for c in candidates.iter_mut() {
        if let Some(scores) = by_tuple.remove(&c.id) {
            c.scores = scores;
        }
    }
    Ok(())
}

fn open_oracle(args: &OracleArgs) -> Result<(Box<dyn Oracle>, OracleDescriptor)> {
    let mut descriptor = args.descriptor();
    let oracle = descriptor.open()?;
    Ok((oracle, descriptor))
}

fn attack(args: AttackArgs) -> Result<()> {
    let manifest = AttackSetManifest::read(&args.attack_set)?;
    let (oracle, descriptor) = open_oracle(&args.oracle)?;
    let outcome = run_attack(
        &manifest.tuples,
        oracle.as_ref(),
        &manifest.attribute,
        args.sample_limit,
    )?;
    for s in &outcome.skipped {
        log::warn!("skipped tuple {}: {}", s.tuple_id, s.reason);
    }
    log::info!(
        "{} classes scored from {} tuples",
        outcome.predictions.len(),
        outcome.used.len()
    );
    PredictionsFile {
        attribute: manifest.attribute,
        classes: outcome.predictions,
        skipped: outcome.skipped,
        config: json!({
            "command": "attack",
            "attack_set": args.attack_set,
            "oracle": descriptor,
            "sample_limit": args.sample_limit,
            "tuples_used": outcome.used,
        }),
    }
    .write(&args.out)?;
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let (report, echo) = match (&args.predictions, &args.truth) {
        (Some(pred_path), Some(truth_path)) => {
            let preds = PredictionsFile::read(pred_path)?;
            let truth = GroundTruth::read_csv(truth_path)?;
            let report = evaluate(&preds.classes, &truth, &preds.attribute)?;
            let echo = json!({"command": "eval", "predictions": pred_path, "truth": truth_path});
            (report, echo)
        }
        _ => {
            let reports = args
                .aggregate
                .iter()
                .map(read_report)
                .collect::<caia_core::Result<Vec<_>>>()?;
            let report = aggregate_runs(&reports)?;
            (
                report,
                json!({"command": "eval", "aggregate": args.aggregate}),
            )
        }
    };
    write_report(&args.out, &report, echo)?;
    if args.table {
        print!("{}", report_table(&report));
    }
    Ok(())
}

fn ablate_cmd(args: AblateArgs) -> Result<()> {
    let manifest = AttackSetManifest::read(&args.attack_set)?;
    let truth = GroundTruth::read_csv(&args.truth)?;
    let (oracle, descriptor) = open_oracle(&args.oracle)?;
    let curve = ablate(
        &manifest.tuples,
        oracle.as_ref(),
        &manifest.attribute,
        &truth,
        &args.sizes,
        args.repeats,
        args.seed,
    )?;
    write_json(
        &args.out,
        &json!({
            "format": "caia-ablation/1",
            "attribute": manifest.attribute,
            "points": curve,
            "config": {
                "command": "ablate",
                "attack_set": args.attack_set,
                "truth": args.truth,
                "oracle": descriptor,
                "sizes": args.sizes,
                "repeats": args.repeats,
                "seed": args.seed,
            },
        }),
    )?;
    if let Some(path) = &args.csv {
        let mut w =
            csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
        w.write_record(["size", "repeats", "mean_accuracy", "std", "disjoint"])?;
        for p in &curve {
            w.write_record([
                p.size.to_string(),
                p.repeats.to_string(),
                p.mean_accuracy.to_string(),
                p.std.to_string(),
                p.disjoint.to_string(),
            ])?;
        }
        w.flush()?;
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct SampleList {
    samples: Vec<SampleEntry>,
}

#[derive(Serialize, Deserialize)]
struct SampleEntry {
    /// Attribution map in the float-grid format.
    map: PathBuf,
    /// Region name to binary PNG mask.
    masks: BTreeMap<String, PathBuf>,
}

fn attribution(args: AttributionArgs) -> Result<()> {
    let list: SampleList = read_json(&args.samples)?;
    if list.samples.is_empty() {
        bail!(Error::Config(format!(
            "{}: no samples",
            args.samples.display()
        )));
    }
    let base = args.samples.parent().unwrap_or(Path::new("."));
    let samples = list
        .samples
        .iter()
        .map(|s| {
            let map = FloatGrid::read(base.join(&s.map))?;
            let masks = s
                .masks
                .iter()
                .map(|(region, p)| Ok((region.clone(), MaskGrid::read_png(base.join(p))?)))
                .collect::<caia_core::Result<BTreeMap<_, _>>>()?;
            Ok(AttributionSample { map, masks })
        })
        .collect::<caia_core::Result<Vec<_>>>()?;
    let report = relative_attribution(&samples)?;
    if report.regions.is_empty() {
        bail!(Error::Config("samples carry no masks".into()));
    }
    write_json(
        &args.out,
        &json!({
            "format": "caia-attribution/1",
            "regions": report.regions,
            "config": {"command": "attribution", "samples": args.samples},
        }),
    )?;
    Ok(())
}
