use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, Context as _, Result};
use clap::{Parser, Subcommand};
use conceptdr::cavlib::{self, Cav};
use conceptdr::cbm::{incremental_curve, rank_concepts, BottleneckModel, EvalCase, Scope};
use conceptdr::evalkit::MetricsReport;
use conceptdr::pipeline::{self, PipelineConfig, Prepared};
use conceptdr::synthgen::{self, Concept, SetMode};
use conceptdr::tinynet::{Checkpoint, Network};
use serde::{Deserialize, Serialize};

use crate::artifacts::{commit_with, write_atomic, write_json_atomic, Manifest, RunDir};
use crate::config::RunConfig;
use crate::service::{self, AppState, InterventionResponse, ServedCase};

const N_GRADES: usize = 5;

#[derive(Debug, Parser)]
#[command(name = "conceptdr", version, about = "Concept explanations for a synthetic retinopathy grader")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory; overrides `out` in the config.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset.
    GenData,
    /// Train the five-level grader.
    TrainGrader,
    /// Train a concept bottleneck from the grader.
    TrainCbm {
        #[arg(long)]
        concepts: Option<usize>,
    },
    /// Train CAV ensembles on the grader.
    Cav {
        #[arg(long, value_parser = parse_mode)]
        mode: Option<SetMode>,
    },
    /// Per-level TCAV scores with significance tests.
    Tcav {
        #[arg(long, value_parser = parse_mode)]
        mode: Option<SetMode>,
    },
    /// Correct concepts of one case and regrade it.
    Intervene {
        #[arg(long)]
        concepts: Option<usize>,
        #[arg(long)]
        case: String,
        /// Asserted concept value, e.g. `NV=true`. Repeatable.
        #[arg(long = "set", value_parser = parse_assertion)]
        set: Vec<(Concept, bool)>,
    },
    /// Order concepts by single-concept intervention gain.
    Rank {
        #[arg(long)]
        concepts: Option<usize>,
    },
    /// Incremental intervention curve.
    Curve {
        #[arg(long)]
        concepts: Option<usize>,
        #[arg(long, value_parser = parse_scope)]
        scope: Option<Scope>,
    },
    /// Collect every metrics file into one table.
    Report,
    /// Serve the intervention API over a finished run.
    Serve {
        #[arg(long)]
        concepts: Option<usize>,
        #[arg(long)]
        port: Option<u16>,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::TrainGrader => "train-grader",
            Command::TrainCbm { .. } => "train-cbm",
            Command::Cav { .. } => "cav",
            Command::Tcav { .. } => "tcav",
            Command::Intervene { .. } => "intervene",
            Command::Rank { .. } => "rank",
            Command::Curve { .. } => "curve",
            Command::Report => "report",
            Command::Serve { .. } => "serve",
        }
    }
}

fn parse_mode(s: &str) -> std::result::Result<SetMode, String> {
    s.parse().map_err(|e: conceptdr::Error| e.to_string())
}

fn parse_scope(s: &str) -> std::result::Result<Scope, String> {
    s.parse().map_err(|e: conceptdr::Error| e.to_string())
}

fn parse_assertion(s: &str) -> std::result::Result<(Concept, bool), String> {
    let (name, value) = s.split_once('=').ok_or_else(|| format!("expected CONCEPT=true|false, got `{s}`"))?;
    let concept = name.trim().parse::<Concept>().map_err(|e| e.to_string())?;
    let value = value
        .trim()
        .parse::<bool>()
        .map_err(|_| format!("`{value}` is not true or false"))?;
    Ok((concept, value))
}

/// Effective settings of one invocation.
pub struct Context {
    pub config: RunConfig,
    pub pipeline: PipelineConfig,
    pub run: RunDir,
    pub hash: String,
}

impl Context {
    pub fn from_cli(cli: &Cli) -> Result<Self> {
        let mut config = match &cli.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if cli.seed.is_some() {
            config.seed = cli.seed;
        }
        if let Some(out) = &cli.out {
            config.out = Some(out.clone());
        }
        match &cli.command {
            Command::Cav { mode } | Command::Tcav { mode } => {
                config.mode = mode.unwrap_or(config.mode);
            }
            Command::TrainCbm { concepts } | Command::Rank { concepts } | Command::Intervene { concepts, .. } => {
                config.pipeline.n_concepts = concepts.unwrap_or(config.pipeline.n_concepts);
            }
            Command::Curve { concepts, scope } => {
                config.pipeline.n_concepts = concepts.unwrap_or(config.pipeline.n_concepts);
                config.scope = scope.unwrap_or(config.scope);
            }
            Command::Serve { concepts, port, .. } => {
                config.pipeline.n_concepts = concepts.unwrap_or(config.pipeline.n_concepts);
                config.port = port.unwrap_or(config.port);
            }
            Command::GenData | Command::TrainGrader | Command::Report => {}
        }
        let pipeline = config.resolve()?;
        let run = RunDir::new(config.out.clone().unwrap_or_else(|| PathBuf::from("run")));
        let hash = config.hash();
        Ok(Self {
            config,
            pipeline,
            run,
            hash,
        })
    }

    fn seed(&self) -> u64 {
        self.pipeline.seed
    }

    fn n_concepts(&self) -> usize {
        self.pipeline.n_concepts
    }

    pub fn prepared(&self) -> Result<Prepared> {
        let dir = self.run.require(self.run.dataset(), "dataset", "gen-data")?;
        let (spec, images) = synthgen::load_dataset(&dir).with_context(|| format!("loading {}", dir.display()))?;
        if spec != self.pipeline.dataset {
            log::warn!("dataset at {} was generated with different settings than the current config", dir.display());
        }
        Ok(Prepared::new(images, &self.pipeline)?)
    }

    pub fn grader(&self) -> Result<Network> {
        let path = self.run.require(self.run.grader(), "grader checkpoint", "train-grader")?;
        Ok(Checkpoint::load(&path)?.network()?)
    }

    pub fn bottleneck(&self) -> Result<BottleneckModel> {
        let n = self.n_concepts();
        let stem = self.run.cbm(n);
        self.run.require(
            stem.with_extension("tnet"),
            &format!("{n}-concept bottleneck"),
            format!("train-cbm --concepts {n}"),
        )?;
        Ok(BottleneckModel::load(&stem)?)
    }

    /// Evaluation cases of the test split.
    pub fn test_cases(&self, model: &BottleneckModel, data: &Prepared) -> Result<Vec<EvalCase>> {
        Ok(pipeline::eval_cases(model, data, &data.split.test)?)
    }
}

/// Runs one command and records its manifest.
pub fn run(cli: Cli) -> Result<()> {
    let ctx = Context::from_cli(&cli)?;
    let start = Instant::now();
    let name = cli.command.name();
    let artifacts = match cli.command {
        Command::GenData => gen_data(&ctx)?,
        Command::TrainGrader => train_grader(&ctx)?,
        Command::TrainCbm { .. } => train_cbm(&ctx)?,
        Command::Cav { .. } => cav(&ctx).map(|(paths, _)| paths)?,
        Command::Tcav { .. } => tcav(&ctx)?,
        Command::Intervene { case, set, .. } => {
            let (path, response) = intervene(&ctx, &case, &set)?;
            println!("{}", serde_json::to_string_pretty(&response)?);
            vec![path]
        }
        Command::Rank { .. } => rank(&ctx).map(|(paths, _)| paths)?,
        Command::Curve { .. } => curve(&ctx)?,
        Command::Report => report(&ctx)?,
        Command::Serve { host, .. } => return serve(&ctx, &host),
    };
    Manifest::write(&ctx.run, name, &ctx.hash, ctx.seed(), start.elapsed(), &artifacts)?;
    for a in &artifacts {
        log::info!("wrote {}", a.display());
    }
    Ok(())
}

pub fn gen_data(ctx: &Context) -> Result<Vec<PathBuf>> {
    let spec = &ctx.pipeline.dataset;
    let images = synthgen::generate_dataset(spec)?;
    let dir = ctx.run.dataset();
    commit_with(&dir, |tmp| -> Result<()> {
        synthgen::save_dataset(tmp, spec, &images)?;
        Ok(())
    })?;
    let counts = spec.level_counts()?;
    log::info!("generated {} images, per level {counts:?}", images.len());
    Ok(vec![dir])
}

fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    commit_with(path, |tmp| -> Result<()> {
        checkpoint.save(tmp)?;
        Ok(())
    })
}

pub fn train_grader(ctx: &Context) -> Result<Vec<PathBuf>> {
    let data = ctx.prepared()?;
    let outcome = pipeline::train_grader_stage(&data, &ctx.pipeline)?;
    let path = ctx.run.grader();
    save_checkpoint(&path, &outcome.checkpoint())?;
    let metrics = pipeline::grader_metrics(&outcome.network, &data, &data.split.test)?;
    log::info!(
        "grader: best epoch {}, test accuracy {:.3}, balanced accuracy {:.3}",
        outcome.metadata.best_epoch,
        metrics.accuracy,
        metrics.balanced_accuracy
    );
    let mpath = ctx.run.metrics("grader");
    write_json_atomic(&mpath, &metrics)?;
    Ok(vec![path, mpath])
}

pub fn train_cbm(ctx: &Context) -> Result<Vec<PathBuf>> {
    let grader = ctx.grader()?;
    let data = ctx.prepared()?;
    let (outcome, model) = pipeline::train_cbm_stage(&grader, &data, &ctx.pipeline)?;
    let stem = ctx.run.cbm(ctx.n_concepts());
    let (tnet, json) = (stem.with_extension("tnet"), stem.with_extension("json"));
    save_checkpoint(&tnet, &outcome.checkpoint())?;
    write_json_atomic(&json, &model.sidecar())?;
    let cases = ctx.test_cases(&model, &data)?;
    let metrics = pipeline::cbm_metrics(&model, &cases)?;
    if let Some(acc) = &metrics.concept_accuracy {
        log::info!("concept balanced accuracy {:?}", acc.per_concept_balanced);
    }
    let mpath = ctx.run.metrics(&format!("cbm{}", ctx.n_concepts()));
    write_json_atomic(&mpath, &metrics)?;
    let presence = ctx.run.root.join(format!("presence_cbm{}.csv", ctx.n_concepts()));
    if let Some(table) = &metrics.presence_fractions {
        write_atomic(&presence, table.to_csv().as_bytes())?;
    }
    Ok(vec![tnet, json, mpath, presence])
}

fn group_cavs(cavs: Vec<Cav>) -> Result<BTreeMap<Concept, Vec<Cav>>> {
    let mut out: BTreeMap<Concept, Vec<Cav>> = BTreeMap::new();
    for c in cavs {
        out.entry(c.concept.parse()?).or_default().push(c);
    }
    Ok(out)
}

pub fn cav(ctx: &Context) -> Result<(Vec<PathBuf>, BTreeMap<Concept, Vec<Cav>>)> {
    let grader = ctx.grader()?;
    let data = ctx.prepared()?;
    let cavs = pipeline::build_cavs(&grader, &data, &Concept::ALL, ctx.config.mode, &ctx.pipeline)?;
    let flat: Vec<Cav> = cavs.values().flatten().cloned().collect();
    let path = ctx.run.cavs(ctx.config.mode);
    write_atomic(&path, cavlib::bundle_to_json(&flat)?.as_bytes())?;
    Ok((vec![path], cavs))
}

/// Uses the saved CAV bundle for the mode if it matches the configured tap,
/// otherwise trains and saves one.
pub fn tcav(ctx: &Context) -> Result<Vec<PathBuf>> {
    let mode = ctx.config.mode;
    let bundle = ctx.run.cavs(mode);
    let (mut artifacts, cavs) = if bundle.exists() {
        let cavs = cavlib::load_bundle(&bundle)?;
        if let Some(c) = cavs.iter().find(|c| c.tap != ctx.pipeline.tcav.tap) {
            bail!(
                "{} holds CAVs for tap `{}` but the config uses `{}`; rerun `conceptdr cav`",
                bundle.display(),
                c.tap,
                ctx.pipeline.tcav.tap
            );
        }
        (Vec::new(), group_cavs(cavs)?)
    } else {
        cav(ctx)?
    };
    let grader = ctx.grader()?;
    let data = ctx.prepared()?;
    let report = pipeline::tcav_stage(&grader, &data, &cavs, &ctx.pipeline)?;
    let path = ctx.run.tcav_report(mode);
    write_json_atomic(&path, &report)?;
    let csv = path.with_extension("csv");
    write_atomic(&csv, report.to_csv().as_bytes())?;
    for level in report.levels.keys() {
        log::info!("level {level}: top significant concept {:?}", report.top_significant(*level));
    }
    artifacts.extend([path, csv]);
    Ok(artifacts)
}

pub fn intervene(ctx: &Context, case_id: &str, set: &[(Concept, bool)]) -> Result<(PathBuf, InterventionResponse)> {
    let model = ctx.bottleneck()?;
    let data = ctx.prepared()?;
    let i = data
        .images
        .iter()
        .position(|img| img.id == case_id)
        .with_context(|| format!("no image with id `{case_id}` in the dataset"))?;
    let img = &data.images[i];
    let case = model.eval_case(&img.id, &data.inputs[i], &img.concepts, usize::from(img.grade))?;
    let asserted: BTreeMap<Concept, bool> = set.iter().copied().collect();
    let response = service::apply_intervention(&model, &case, &asserted)?;
    let path = ctx.run.interventions().join(format!("{case_id}.json"));
    write_json_atomic(&path, &response)?;
    Ok((path, response))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankEntry {
    pub concept: Concept,
    pub balanced_accuracy: f64,
}

pub fn rank(ctx: &Context) -> Result<(Vec<PathBuf>, Vec<RankEntry>)> {
    let model = ctx.bottleneck()?;
    let data = ctx.prepared()?;
    let cases = ctx.test_cases(&model, &data)?;
    let ranking: Vec<RankEntry> = rank_concepts(&model.head, &model.surrogates, &cases, N_GRADES)?
        .into_iter()
        .map(|(concept, balanced_accuracy)| RankEntry {
            concept,
            balanced_accuracy,
        })
        .collect();
    let path = ctx.run.ranking();
    write_json_atomic(&path, &ranking)?;
    Ok((vec![path], ranking))
}

pub fn curve(ctx: &Context) -> Result<Vec<PathBuf>> {
    let model = ctx.bottleneck()?;
    let saved: Option<Vec<RankEntry>> = match fs::read(ctx.run.ranking()) {
        Ok(bytes) => Some(serde_json::from_slice(&bytes)?),
        Err(_) => None,
    };
    let ordering: Vec<Concept> = match saved {
        Some(r) if r.len() == model.concepts.len() && r.iter().all(|e| model.concepts.contains(&e.concept)) => {
            r.into_iter().map(|e| e.concept).collect()
        }
        _ => rank(ctx)?.1.into_iter().map(|e| e.concept).collect(),
    };
    let data = ctx.prepared()?;
    let cases = ctx.test_cases(&model, &data)?;
    let curve = incremental_curve(&model.head, &model.surrogates, &cases, &ordering, ctx.config.scope, N_GRADES)?;
    let path = ctx.run.curve();
    write_json_atomic(&path, &curve)?;
    let scope = match ctx.config.scope {
        Scope::Full => "full",
        Scope::Misclassified => "misclassified",
    };
    let last = &curve.steps.last().expect("curve has k = 0").metrics;
    let mpath = ctx.run.metrics(&format!("cbm{}_tti_{scope}", ctx.n_concepts()));
    write_json_atomic(&mpath, last)?;
    Ok(vec![path, mpath])
}

/// Row label, concept count and sort key for a metrics file stem.
fn report_row(name: &str) -> Option<(String, String, (usize, usize, usize))> {
    if name == "grader" {
        return Some(("Grader".into(), "-".into(), (0, 0, 0)));
    }
    let rest = name.strip_prefix("cbm")?;
    let (n, tti) = match rest.split_once('_') {
        Some((n, t)) => (n, Some(t)),
        None => (rest, None),
    };
    let n: usize = n.parse().ok()?;
    let (label, order) = match tti {
        None => ("CBM".to_string(), 0),
        Some("tti_full") => ("CBM + TTI (full)".to_string(), 1),
        Some("tti_misclassified") => ("CBM + TTI (incorrect)".to_string(), 2),
        Some(_) => return None,
    };
    Some((label, n.to_string(), (1, n, order)))
}

pub fn report_table(metrics: &[(String, MetricsReport)]) -> String {
    let mut rows: Vec<_> = metrics
        .iter()
        .filter_map(|(name, m)| report_row(name).map(|(label, n, key)| (key, label, n, m)))
        .collect();
    rows.sort_by_key(|r| r.0);
    let mut out = String::from("model,n_concepts,accuracy,balanced_accuracy,f1,mcc,precision\n");
    for (_, label, n, m) in rows {
        out.push_str(&format!(
            "{label},{n},{:.4},{:.4},{:.4},{:.4},{:.4}\n",
            m.accuracy, m.balanced_accuracy, m.f1, m.mcc, m.precision
        ));
    }
    out
}

pub fn report(ctx: &Context) -> Result<Vec<PathBuf>> {
    let mut metrics = Vec::new();
    let entries = fs::read_dir(&ctx.run.root).with_context(|| format!("reading {}", ctx.run.root.display()))?;
    for entry in entries {
        let path = entry?.path();
        let Some(stem) = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("metrics_"))
            .and_then(|n| n.strip_suffix(".json"))
        else {
            continue;
        };
        let m: MetricsReport =
            serde_json::from_slice(&fs::read(&path)?).with_context(|| format!("parsing {}", path.display()))?;
        metrics.push((stem.to_string(), m));
    }
    if metrics.is_empty() {
        ctx.run
            .require(ctx.run.metrics("grader"), "metrics files", "train-grader")?;
    }
    let path = ctx.run.report();
    write_atomic(&path, report_table(&metrics).as_bytes())?;
    Ok(vec![path])
}

/// Loads the run once and builds the service state.
pub fn service_state(ctx: &Context) -> Result<AppState> {
    let model = ctx.bottleneck()?;
    let data = ctx.prepared()?;
    let cases = ctx.test_cases(&model, &data)?;
    let served = cases
        .into_iter()
        .zip(&data.split.test)
        .map(|(case, &i)| ServedCase {
            case,
            image: data.images[i].image.clone(),
        })
        .collect();
    let tcav = match fs::read(ctx.run.tcav_report(SetMode::Full)) {
        Ok(bytes) => Some(serde_json::from_slice(&bytes)?),
        Err(_) => None,
    };
    Ok(AppState::new(model, served, tcav, ctx.hash.clone()))
}

fn serve(ctx: &Context, host: &str) -> Result<()> {
    let state = Arc::new(service_state(ctx)?);
    let addr = format!("{host}:{}", ctx.config.port);
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .with_context(|| format!("binding {addr}"))?;
        log::info!("serving {} cases on http://{addr}", state.cases.len());
        axum::serve(listener, service::router(state)).await?;
        Ok(())
    })
}
