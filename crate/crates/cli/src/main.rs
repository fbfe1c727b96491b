//! Command-line front end for the cotforge pipelines.
//!
//! Every subcommand resolves one run configuration (file, then environment,
//! then flags), emits single-line JSON events on stderr, and writes a
//! `manifest.json` with content digests next to whatever files it produces.
//! Data goes to the paths given by `--out`/`--out-dir`; stdout carries only
//! the primary result of query-style commands (eval, simulate, stats).

mod config;
mod manifest;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use config::ResolvedConfig;
use cotforge::answers::{ExtractorConfig, VerdictGrammar};
use cotforge::backend::{toy_questions, BackendKind};
use cotforge::bridge::{nested_slices, synthesize_bridge, BridgeConfig};
use cotforge::corpus::{
    assemble_pool, emit_sft_dataset, load_questions, write_records, CorpusSchema, PoolSpec,
    Question, SamplerParams, Source, DIAGRAM_DESCRIPTION_KEY,
};
use cotforge::select::{
    evaluate, simulate_selection, EvalConfig, SelectionStrategy, SimulationSpec,
};
use cotforge::templates::{DEFAULT_BRIDGE, DEFAULT_SOLVE, DEFAULT_VERIFY, DEFAULT_VERIFY_MOCK};
use cotforge::treesearch::{run_search, Rollout, SamplingMode, SearchConfig};
use cotforge::verisynth::{
    run_stage1, run_stage2, stage2_sft_records, KeepRule, RolloutSource, Stage1Config,
    Stage2Config,
};
use manifest::Manifest;
use serde_json::json;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Parser)]
#[command(name = "cotforge", version, about = "Reasoning-data synthesis and evaluation pipelines")]
struct Cli {
    /// TOML run configuration: seed, tolerance, named backends.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Base seed; overrides the config file and COTFORGE_SEED.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Answer-comparison tolerance; overrides the config file and
    /// COTFORGE_TOLERANCE.
    #[arg(long, global = true)]
    tolerance: Option<f64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic question corpus for exercising the pipelines.
    GenToy(GenToyArgs),
    /// Draw a multi-source training pool from per-source question files.
    AssemblePool(AssemblePoolArgs),
    /// Harvest tree-search rollouts for each question.
    SynthTree(SynthTreeArgs),
    /// Stage 1: generate candidates, verify them, clean, and emit training data.
    VerifyGen(VerifyGenArgs),
    /// Stage 2: rejection-sample fresh solutions through a keep filter.
    Stage2(Stage2Args),
    /// Synthesize text-bridged reasoning from stored figure descriptions.
    Bridge(BridgeArgs),
    /// Run a benchmark with a selection strategy and write the report.
    Eval(EvalArgs),
    /// Monte Carlo model of the selection pipeline, driven by rates.
    Simulate(SimulateArgs),
    /// Corpus composition: totals and per-source shares.
    Stats(StatsArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenToy(_) => "gen-toy",
            Command::AssemblePool(_) => "assemble-pool",
            Command::SynthTree(_) => "synth-tree",
            Command::VerifyGen(_) => "verify-gen",
            Command::Stage2(_) => "stage2",
            Command::Bridge(_) => "bridge",
            Command::Eval(_) => "eval",
            Command::Simulate(_) => "simulate",
            Command::Stats(_) => "stats",
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SchemaArg {
    Native,
    MavisBridge,
}

impl From<SchemaArg> for CorpusSchema {
    fn from(value: SchemaArg) -> Self {
        match value {
            SchemaArg::Native => CorpusSchema::Native,
            SchemaArg::MavisBridge => CorpusSchema::MavisBridge,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum RolloutSourceArg {
    TreeSearch,
    DirectSampling,
}

impl From<RolloutSourceArg> for RolloutSource {
    fn from(value: RolloutSourceArg) -> Self {
        match value {
            RolloutSourceArg::TreeSearch => RolloutSource::TreeSearch,
            RolloutSourceArg::DirectSampling => RolloutSource::DirectSampling,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum KeepRuleArg {
    VerifierApproved,
    GoldMatch,
}

impl From<KeepRuleArg> for KeepRule {
    fn from(value: KeepRuleArg) -> Self {
        match value {
            KeepRuleArg::VerifierApproved => KeepRule::VerifierApproved,
            KeepRuleArg::GoldMatch => KeepRule::GoldMatch,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StrategyArg {
    Single,
    MajorityVote,
    VerifierVote,
}

impl From<StrategyArg> for SelectionStrategy {
    fn from(value: StrategyArg) -> Self {
        match value {
            StrategyArg::Single => SelectionStrategy::Single,
            StrategyArg::MajorityVote => SelectionStrategy::MajorityVote,
            StrategyArg::VerifierVote => SelectionStrategy::VerifierVote,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SamplingModeArg {
    PerCall,
    Batched,
}

impl From<SamplingModeArg> for SamplingMode {
    fn from(value: SamplingModeArg) -> Self {
        match value {
            SamplingModeArg::PerCall => SamplingMode::PerCall,
            SamplingModeArg::Batched => SamplingMode::Batched,
        }
    }
}

/// Search knobs shared by the commands that run the tree search.
#[derive(Args)]
struct SearchKnobs {
    /// Candidate next steps per expansion.
    #[arg(long)]
    k: Option<usize>,
    /// Direct completions per reward evaluation.
    #[arg(long)]
    l: Option<usize>,
    /// Search iterations.
    #[arg(long)]
    iterations: Option<usize>,
    /// Depth cutoff for forced terminals.
    #[arg(long)]
    max_depth: Option<usize>,
    /// UCT exploration constant (0 means greedy).
    #[arg(long)]
    uct_c: Option<f64>,
    /// How multi-sample draws are issued to the backend.
    #[arg(long, value_enum)]
    sampling_mode: Option<SamplingModeArg>,
}

impl SearchKnobs {
    fn apply(&self, config: &mut SearchConfig) {
        if let Some(k) = self.k {
            config.k = k;
        }
        if let Some(l) = self.l {
            config.l = l;
        }
        if let Some(iterations) = self.iterations {
            config.iterations = iterations;
        }
        if let Some(max_depth) = self.max_depth {
            config.max_depth = max_depth;
        }
        if let Some(uct_c) = self.uct_c {
            config.uct_c = uct_c;
        }
        if let Some(mode) = self.sampling_mode {
            config.sampling_mode = mode.into();
        }
    }
}

#[derive(Args)]
struct GenToyArgs {
    /// Questions to generate.
    #[arg(long, default_value_t = 20)]
    count: usize,
    /// Attach figure descriptions and image references, making the corpus
    /// usable by the bridge pipeline.
    #[arg(long)]
    describe: bool,
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(Args)]
struct AssemblePoolArgs {
    /// Question file for one source, as SOURCE=PATH. Repeatable.
    #[arg(long, value_name = "SOURCE=PATH", value_parser = parse_key_val)]
    input: Vec<(String, String)>,
    /// Questions to draw from one source, as SOURCE=COUNT. Repeatable.
    #[arg(long, value_name = "SOURCE=COUNT", value_parser = parse_key_val, conflicts_with = "reference_mix")]
    take: Vec<(String, String)>,
    /// Use the built-in five-source reference mix instead of --take.
    #[arg(long)]
    reference_mix: bool,
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(Args)]
struct SynthTreeArgs {
    #[arg(long, value_name = "FILE")]
    questions: PathBuf,
    #[arg(long, value_enum, default_value = "native")]
    schema: SchemaArg,
    /// Backend name from the config to generate and simulate with.
    #[arg(long)]
    reasoner: String,
    /// Rollouts to harvest per question.
    #[arg(long)]
    n: Option<usize>,
    #[command(flatten)]
    search: SearchKnobs,
    /// Solve prompt template file with a {question} slot.
    #[arg(long, value_name = "FILE")]
    solve_template: Option<PathBuf>,
    #[arg(long)]
    continue_on_error: bool,
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(Args)]
struct VerifyGenArgs {
    #[arg(long, value_name = "FILE")]
    questions: PathBuf,
    #[arg(long, value_enum, default_value = "native")]
    schema: SchemaArg,
    #[arg(long)]
    reasoner: String,
    #[arg(long)]
    verifier: String,
    /// Where candidate solutions come from.
    #[arg(long, value_enum, default_value = "tree-search")]
    source: RolloutSourceArg,
    /// Candidate solutions per question.
    #[arg(long, default_value_t = 8)]
    candidates: usize,
    #[command(flatten)]
    search: SearchKnobs,
    /// Solve prompt template file with a {question} slot.
    #[arg(long, value_name = "FILE")]
    solve_template: Option<PathBuf>,
    /// Verification prompt template file with {question} and {solution}
    /// slots. Defaults to the built-in template, or to its mock-tagged
    /// variant when the verifier is a stochastic mock.
    #[arg(long, value_name = "FILE")]
    verify_template: Option<PathBuf>,
    /// Checkpoint file; defaults to stage1.checkpoint.jsonl in --out-dir.
    #[arg(long, value_name = "FILE", conflicts_with = "no_checkpoint")]
    checkpoint: Option<PathBuf>,
    /// Disable checkpointing entirely.
    #[arg(long)]
    no_checkpoint: bool,
    #[arg(long)]
    continue_on_error: bool,
    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct Stage2Args {
    #[arg(long, value_name = "FILE")]
    questions: PathBuf,
    #[arg(long, value_enum, default_value = "native")]
    schema: SchemaArg,
    #[arg(long)]
    reasoner: String,
    /// Required for the verifier-approved rule, ignored otherwise.
    #[arg(long)]
    verifier: Option<String>,
    /// Fresh samples per question.
    #[arg(long, default_value_t = 8)]
    samples: usize,
    /// What a sample must pass to be kept.
    #[arg(long, value_enum, default_value = "verifier-approved")]
    rule: KeepRuleArg,
    #[arg(long, value_name = "FILE")]
    solve_template: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    verify_template: Option<PathBuf>,
    #[arg(long)]
    continue_on_error: bool,
    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct BridgeArgs {
    #[arg(long, value_name = "FILE")]
    questions: PathBuf,
    #[arg(long, value_enum, default_value = "native")]
    schema: SchemaArg,
    #[arg(long)]
    reasoner: String,
    /// Reasoning attempts per question.
    #[arg(long, default_value_t = 4)]
    attempts: usize,
    /// Bridge prompt template file with {description} and {question} slots.
    #[arg(long, value_name = "FILE")]
    bridge_template: Option<PathBuf>,
    /// Also emit a nested subset of the kept records at this fraction of the
    /// full set. Repeatable; subsets of different sizes are nested.
    #[arg(long, value_name = "FRACTION")]
    slice: Vec<f64>,
    #[arg(long)]
    continue_on_error: bool,
    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, value_name = "FILE")]
    questions: PathBuf,
    #[arg(long, value_enum, default_value = "native")]
    schema: SchemaArg,
    #[arg(long)]
    reasoner: String,
    /// Required for verifier voting, ignored otherwise.
    #[arg(long)]
    verifier: Option<String>,
    #[arg(long, value_enum, default_value = "majority-vote")]
    strategy: StrategyArg,
    /// Samples per question (N).
    #[arg(long, default_value_t = 8)]
    samples: usize,
    #[arg(long, value_name = "FILE")]
    solve_template: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    verify_template: Option<PathBuf>,
    #[arg(long)]
    continue_on_error: bool,
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    /// Probability a candidate answer is correct.
    #[arg(long, default_value_t = 0.5)]
    p_correct: f64,
    /// Distinct wrong answers.
    #[arg(long, default_value_t = 4)]
    wrong_alphabet: u32,
    /// Probability the verifier approves a correct candidate.
    #[arg(long, default_value_t = 1.0)]
    tpr: f64,
    /// Probability the verifier approves an incorrect candidate.
    #[arg(long, default_value_t = 0.0)]
    fpr: f64,
    /// Candidates per trial (N).
    #[arg(long, default_value_t = 8)]
    n: usize,
    #[arg(long, default_value_t = 10_000)]
    trials: usize,
    #[arg(long, value_enum, default_value = "verifier-vote")]
    strategy: StrategyArg,
    /// Also write the report to this file.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct StatsArgs {
    /// Question file. Repeatable.
    #[arg(long, value_name = "FILE", required = true)]
    questions: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "native")]
    schema: SchemaArg,
}

fn parse_key_val(s: &str) -> Result<(String, String), String> {
    match s.split_once('=') {
        Some((k, v)) if !k.is_empty() && !v.is_empty() => Ok((k.to_string(), v.to_string())),
        _ => Err(format!("expected KEY=VALUE, got {s:?}")),
    }
}

/// Emits one single-line JSON event on stderr.
fn event(value: serde_json::Value) {
    eprintln!("{value}");
}

fn require_file(path: &Path) -> Result<()> {
    if !path.is_file() {
        bail!("file not found: {}", path.display());
    }
    Ok(())
}

/// `<name>.manifest.json` next to a single-file output.
fn manifest_sibling(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    out.with_file_name(name)
}

fn load_corpus(
    path: &Path,
    schema: SchemaArg,
    manifest: &mut Manifest,
) -> Result<Vec<Question>> {
    require_file(path)?;
    manifest.record_input(path)?;
    let questions = load_questions(path, schema.into())?;
    if questions.is_empty() {
        bail!("no questions in {}", path.display());
    }
    Ok(questions)
}

/// Reads a template override, or falls back to the built-in default.
fn template_or(
    override_path: Option<&PathBuf>,
    default: &str,
    manifest: &mut Manifest,
) -> Result<String> {
    match override_path {
        Some(path) => {
            require_file(path)?;
            manifest.record_input(path)?;
            std::fs::read_to_string(path)
                .with_context(|| format!("cannot read template {}", path.display()))
        }
        None => Ok(default.to_string()),
    }
}

/// Picks the verification template: an explicit file wins; otherwise the
/// built-in default, switched to its mock-tagged variant when the named
/// verifier is a stochastic mock (the mock recognizes verification requests
/// by that tag).
fn verify_template_for(
    resolved: &ResolvedConfig,
    verifier: &str,
    override_path: Option<&PathBuf>,
    manifest: &mut Manifest,
) -> Result<String> {
    if override_path.is_some() {
        return template_or(override_path, DEFAULT_VERIFY, manifest);
    }
    Ok(match resolved.backend_kind(verifier)? {
        BackendKind::Stochastic => DEFAULT_VERIFY_MOCK.to_string(),
        _ => DEFAULT_VERIFY.to_string(),
    })
}

fn write_json_pretty<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let body = serde_json::to_string_pretty(value).context("report serialization")?;
    std::fs::write(path, body + "\n")
        .with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let started = Instant::now();
    if let Err(e) = run(cli, started) {
        event(json!({ "event": "error", "detail": format!("{e:#}") }));
        std::process::exit(1);
    }
}

fn run(cli: Cli, started: Instant) -> Result<()> {
    let resolved = config::resolve(cli.config.as_deref(), cli.seed, cli.tolerance, &|key| {
        std::env::var(key).ok()
    })?;
    event(json!({
        "event": "config",
        "command": cli.command.name(),
        "seed": resolved.run.seed,
        "tolerance": resolved.run.tolerance,
        "config_file": resolved.config_path,
        "backends": resolved.run.backends.keys().collect::<Vec<_>>(),
    }));
    match cli.command {
        Command::GenToy(args) => gen_toy(args, &resolved, started),
        Command::AssemblePool(args) => cmd_assemble_pool(args, &resolved, started),
        Command::SynthTree(args) => synth_tree(args, &resolved, started),
        Command::VerifyGen(args) => verify_gen(args, &resolved, started),
        Command::Stage2(args) => stage2(args, &resolved, started),
        Command::Bridge(args) => bridge(args, &resolved, started),
        Command::Eval(args) => eval(args, &resolved, started),
        Command::Simulate(args) => simulate(args, &resolved, started),
        Command::Stats(args) => stats(args, &resolved),
    }
}

fn gen_toy(args: GenToyArgs, resolved: &ResolvedConfig, started: Instant) -> Result<()> {
    if args.count == 0 {
        bail!("--count must be >= 1");
    }
    let mut manifest = Manifest::new("gen-toy", resolved);
    let mut questions = toy_questions(args.count, resolved.run.seed);
    if args.describe {
        for q in &mut questions {
            q.extra.insert(
                DIAGRAM_DESCRIPTION_KEY.to_string(),
                serde_json::Value::String(format!(
                    "The figure for {} shows labeled segments.",
                    q.id
                )),
            );
            q.image_ref = Some(format!("images/{}.png", q.id));
        }
    }
    write_records(&args.out, &questions)?;
    manifest.record_output(&args.out)?;
    manifest.write(&manifest_sibling(&args.out), started)?;
    event(json!({
        "event": "done",
        "questions": questions.len(),
        "out": args.out.display().to_string(),
    }));
    Ok(())
}

fn cmd_assemble_pool(
    args: AssemblePoolArgs,
    resolved: &ResolvedConfig,
    started: Instant,
) -> Result<()> {
    let mut manifest = Manifest::new("assemble-pool", resolved);
    let mut source_paths: BTreeMap<Source, PathBuf> = BTreeMap::new();
    for (key, value) in &args.input {
        let source: Source = key.parse().expect("source parsing is infallible");
        let path = PathBuf::from(value);
        require_file(&path)?;
        manifest.record_input(&path)?;
        source_paths.insert(source, path);
    }
    if source_paths.is_empty() {
        bail!("assemble-pool needs at least one --input SOURCE=PATH");
    }
    let spec = if args.reference_mix {
        PoolSpec::reference_mix(resolved.run.seed)
    } else {
        let mut counts = BTreeMap::new();
        for (key, value) in &args.take {
            let source: Source = key.parse().expect("source parsing is infallible");
            let count: usize = value
                .parse()
                .with_context(|| format!("--take {key}={value}: count must be an integer"))?;
            counts.insert(source, count);
        }
        if counts.is_empty() {
            bail!("assemble-pool needs --take SOURCE=COUNT entries or --reference-mix");
        }
        PoolSpec {
            counts,
            seed: resolved.run.seed,
        }
    };
    let pool = assemble_pool(&source_paths, &spec)?;
    write_records(&args.out, &pool)?;
    manifest.record_output(&args.out)?;
    manifest.write(&manifest_sibling(&args.out), started)?;
    let mut by_source: BTreeMap<&str, usize> = BTreeMap::new();
    for q in &pool {
        *by_source.entry(q.source.key()).or_default() += 1;
    }
    event(json!({
        "event": "done",
        "questions": pool.len(),
        "by_source": by_source,
        "out": args.out.display().to_string(),
    }));
    Ok(())
}

fn synth_tree(args: SynthTreeArgs, resolved: &ResolvedConfig, started: Instant) -> Result<()> {
    let mut manifest = Manifest::new("synth-tree", resolved);
    let questions = load_corpus(&args.questions, args.schema, &mut manifest)?;
    let backend = resolved.backend(&args.reasoner)?;
    let mut config = SearchConfig {
        seed: resolved.run.seed,
        tolerance: resolved.run.tolerance,
        continue_on_error: args.continue_on_error,
        ..SearchConfig::default()
    };
    args.search.apply(&mut config);
    if let Some(n) = args.n {
        config.n = n;
    }
    config.solve_template = template_or(args.solve_template.as_ref(), DEFAULT_SOLVE, &mut manifest)?;

    let extractor = ExtractorConfig::rule_based();
    let mut rollouts: Vec<Rollout> = Vec::new();
    for (i, question) in questions.iter().enumerate() {
        rollouts.extend(run_search(backend.as_ref(), question, &config, &extractor)?);
        if (i + 1) % 10 == 0 || i + 1 == questions.len() {
            event(json!({ "event": "progress", "done": i + 1, "total": questions.len() }));
        }
    }
    write_records(&args.out, &rollouts)?;
    manifest.record_output(&args.out)?;
    manifest.write(&manifest_sibling(&args.out), started)?;
    event(json!({
        "event": "done",
        "questions": questions.len(),
        "rollouts": rollouts.len(),
        "out": args.out.display().to_string(),
    }));
    Ok(())
}

fn verify_gen(args: VerifyGenArgs, resolved: &ResolvedConfig, started: Instant) -> Result<()> {
    let mut manifest = Manifest::new("verify-gen", resolved);
    let questions = load_corpus(&args.questions, args.schema, &mut manifest)?;
    let reasoner = resolved.backend(&args.reasoner)?;
    let verifier = resolved.backend(&args.verifier)?;

    let mut search = SearchConfig::default();
    args.search.apply(&mut search);
    let config = Stage1Config {
        rollout_source: args.source.into(),
        candidates_per_question: args.candidates,
        search,
        solve_template: template_or(args.solve_template.as_ref(), DEFAULT_SOLVE, &mut manifest)?,
        verify_template: verify_template_for(
            resolved,
            &args.verifier,
            args.verify_template.as_ref(),
            &mut manifest,
        )?,
        grammar: VerdictGrammar::default(),
        sampler: SamplerParams::default(),
        tolerance: resolved.run.tolerance,
        seed: resolved.run.seed,
        continue_on_error: args.continue_on_error,
    };

    std::fs::create_dir_all(&args.out_dir)
        .with_context(|| format!("cannot create {}", args.out_dir.display()))?;
    let checkpoint = if args.no_checkpoint {
        None
    } else {
        Some(
            args.checkpoint
                .clone()
                .unwrap_or_else(|| args.out_dir.join("stage1.checkpoint.jsonl")),
        )
    };
    let extractor = ExtractorConfig::rule_based();
    let result = run_stage1(
        reasoner.as_ref(),
        verifier.as_ref(),
        &questions,
        &config,
        &extractor,
        checkpoint.as_deref(),
    )?;

    let batches_path = args.out_dir.join("d_v.jsonl");
    let clean_path = args.out_dir.join("d_clean.jsonl");
    let sft_path = args.out_dir.join("sft.jsonl");
    write_records(&batches_path, &result.batches)?;
    write_records(&clean_path, &result.clean)?;
    emit_sft_dataset(&result.clean, &sft_path)?;
    for path in [&batches_path, &clean_path, &sft_path] {
        manifest.record_output(path)?;
    }
    if let Some(path) = &checkpoint {
        manifest.record_output(path)?;
    }
    manifest.write(&args.out_dir.join("manifest.json"), started)?;
    event(json!({ "event": "stats", "stage": 1, "stats": result.stats }));
    event(json!({ "event": "done", "out_dir": args.out_dir.display().to_string() }));
    Ok(())
}

fn stage2(args: Stage2Args, resolved: &ResolvedConfig, started: Instant) -> Result<()> {
    let mut manifest = Manifest::new("stage2", resolved);
    let questions = load_corpus(&args.questions, args.schema, &mut manifest)?;
    let reasoner = resolved.backend(&args.reasoner)?;
    let rule: KeepRule = args.rule.into();
    let (verifier, verify_template) = match (&args.verifier, rule) {
        (Some(name), KeepRule::VerifierApproved) => (
            Some(resolved.backend(name)?),
            verify_template_for(resolved, name, args.verify_template.as_ref(), &mut manifest)?,
        ),
        (None, KeepRule::VerifierApproved) => {
            bail!("--verifier is required for the verifier-approved rule")
        }
        (_, KeepRule::GoldMatch) => (None, DEFAULT_VERIFY.to_string()),
    };

    let solve_template =
        template_or(args.solve_template.as_ref(), DEFAULT_SOLVE, &mut manifest)?;
    let config = Stage2Config {
        samples_per_question: args.samples,
        keep_rule: rule,
        solve_template: solve_template.clone(),
        verify_template,
        grammar: VerdictGrammar::default(),
        sampler: SamplerParams::default(),
        tolerance: resolved.run.tolerance,
        seed: resolved.run.seed,
        continue_on_error: args.continue_on_error,
    };
    let extractor = ExtractorConfig::rule_based();
    let result = run_stage2(
        reasoner.as_ref(),
        verifier.as_deref(),
        &questions,
        &config,
        &extractor,
    )?;

    std::fs::create_dir_all(&args.out_dir)
        .with_context(|| format!("cannot create {}", args.out_dir.display()))?;
    let kept_path = args.out_dir.join("d_stage2.jsonl");
    let sft_path = args.out_dir.join("stage2_sft.jsonl");
    write_records(&kept_path, &result.kept)?;
    let sft = stage2_sft_records(&questions, &result.kept, &solve_template)?;
    write_records(&sft_path, &sft)?;
    manifest.record_output(&kept_path)?;
    manifest.record_output(&sft_path)?;
    manifest.write(&args.out_dir.join("manifest.json"), started)?;
    event(json!({ "event": "stats", "stage": 2, "stats": result.stats }));
    event(json!({ "event": "done", "out_dir": args.out_dir.display().to_string() }));
    Ok(())
}

fn bridge(args: BridgeArgs, resolved: &ResolvedConfig, started: Instant) -> Result<()> {
    let mut manifest = Manifest::new("bridge", resolved);
    let questions = load_corpus(&args.questions, args.schema, &mut manifest)?;
    let reasoner = resolved.backend(&args.reasoner)?;
    let config = BridgeConfig {
        attempts_per_question: args.attempts,
        bridge_template: template_or(args.bridge_template.as_ref(), DEFAULT_BRIDGE, &mut manifest)?,
        sampler: SamplerParams::default(),
        tolerance: resolved.run.tolerance,
        seed: resolved.run.seed,
        continue_on_error: args.continue_on_error,
    };
    let extractor = ExtractorConfig::rule_based();
    let result = synthesize_bridge(reasoner.as_ref(), &questions, &config, &extractor)?;

    std::fs::create_dir_all(&args.out_dir)
        .with_context(|| format!("cannot create {}", args.out_dir.display()))?;
    let kept_path = args.out_dir.join("d_r.jsonl");
    let audit_path = args.out_dir.join("bridge_audit.jsonl");
    write_records(&kept_path, &result.kept)?;
    write_records(&audit_path, &result.audit)?;
    manifest.record_output(&kept_path)?;
    manifest.record_output(&audit_path)?;
    if !args.slice.is_empty() {
        let slices = nested_slices(&result.kept, &args.slice, resolved.run.seed)?;
        for (fraction, slice) in args.slice.iter().zip(&slices) {
            let pct = (fraction * 100.0).round() as u32;
            let path = args.out_dir.join(format!("d_r_{pct}.jsonl"));
            write_records(&path, slice)?;
            manifest.record_output(&path)?;
        }
    }
    manifest.write(&args.out_dir.join("manifest.json"), started)?;
    event(json!({ "event": "stats", "stats": result.stats }));
    event(json!({ "event": "done", "out_dir": args.out_dir.display().to_string() }));
    Ok(())
}

fn eval(args: EvalArgs, resolved: &ResolvedConfig, started: Instant) -> Result<()> {
    let mut manifest = Manifest::new("eval", resolved);
    let questions = load_corpus(&args.questions, args.schema, &mut manifest)?;
    let reasoner = resolved.backend(&args.reasoner)?;
    let strategy: SelectionStrategy = args.strategy.into();
    let (verifier, verify_template) = match (&args.verifier, strategy) {
        (Some(name), SelectionStrategy::VerifierVote) => (
            Some(resolved.backend(name)?),
            verify_template_for(resolved, name, args.verify_template.as_ref(), &mut manifest)?,
        ),
        (None, SelectionStrategy::VerifierVote) => {
            bail!("--verifier is required for the verifier-vote strategy")
        }
        _ => (None, DEFAULT_VERIFY.to_string()),
    };
    let config = EvalConfig {
        strategy,
        samples_per_question: args.samples,
        solve_template: template_or(args.solve_template.as_ref(), DEFAULT_SOLVE, &mut manifest)?,
        verify_template,
        grammar: VerdictGrammar::default(),
        sampler: SamplerParams::default(),
        tolerance: resolved.run.tolerance,
        seed: resolved.run.seed,
        continue_on_error: args.continue_on_error,
    };
    let extractor = ExtractorConfig::rule_based();
    let report = evaluate(
        reasoner.as_ref(),
        verifier.as_deref(),
        &questions,
        &config,
        &extractor,
    )?;
    write_json_pretty(&args.out, &report)?;
    manifest.record_output(&args.out)?;
    manifest.write(&manifest_sibling(&args.out), started)?;
    println!(
        "{}",
        json!({
            "total": report.total,
            "correct": report.correct,
            "accuracy": report.accuracy,
            "abstentions": report.abstentions,
            "fallbacks": report.fallbacks,
        })
    );
    Ok(())
}

fn simulate(args: SimulateArgs, resolved: &ResolvedConfig, started: Instant) -> Result<()> {
    let spec = SimulationSpec {
        p_correct: args.p_correct,
        wrong_alphabet_size: args.wrong_alphabet,
        verify_tpr: args.tpr,
        verify_fpr: args.fpr,
        n: args.n,
        trials: args.trials,
        seed: resolved.run.seed,
        strategy: args.strategy.into(),
        tolerance: resolved.run.tolerance,
    };
    let report = simulate_selection(&spec)?;
    println!("{}", serde_json::to_string(&report).context("report serialization")?);
    if let Some(out) = &args.out {
        let mut manifest = Manifest::new("simulate", resolved);
        write_json_pretty(out, &report)?;
        manifest.record_output(out)?;
        manifest.write(&manifest_sibling(out), started)?;
    }
    Ok(())
}

fn stats(args: StatsArgs, _resolved: &ResolvedConfig) -> Result<()> {
    let mut total = 0usize;
    let mut sources: BTreeMap<String, usize> = BTreeMap::new();
    let mut categories: BTreeMap<String, usize> = BTreeMap::new();
    for path in &args.questions {
        require_file(path)?;
        for q in load_questions(path, args.schema.into())? {
            total += 1;
            *sources.entry(q.source.key().to_string()).or_default() += 1;
            let category = q.category.unwrap_or_else(|| "uncategorized".to_string());
            *categories.entry(category).or_default() += 1;
        }
    }
    let source_shares: serde_json::Map<String, serde_json::Value> = sources
        .iter()
        .map(|(key, &count)| {
            (
                key.clone(),
                json!({
                    "count": count,
                    "share_percent": 100.0 * count as f64 / total as f64,
                }),
            )
        })
        .collect();
    println!(
        "{}",
        serde_json::to_string_pretty(&json!({
            "total": total,
            "sources": source_shares,
            "categories": categories,
        }))
        .context("stats serialization")?
    );
    Ok(())
}
