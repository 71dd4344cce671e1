//! `modelcompose` command-line front end.
//!
//! Exit codes: 0 success, 1 usage error, 2 validation error, 3 runtime failure.

mod external;

use std::collections::BTreeMap;
use std::fmt::Display;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use modelcompose::checkpoint::{parse_header, CheckpointError};
use modelcompose::compose::{compose, diff_checkpoints, ComposeError, MergeSpec, Strategy};
use modelcompose::harness::dataset::{generate_dataset, AnswerFormat, DatasetSpec, TaskExample, TaskKind};
use modelcompose::harness::eval::{evaluate, Extraction};
use modelcompose::harness::experiment::{mean_cells, prepare_base, run_all_seeds, ExperimentConfig};
use modelcompose::harness::train::{train_toy_mllm, TrainConfig, Variant};
use modelcompose::harness::world::build_synthetic_world;
use modelcompose::harness::HarnessError;
use modelcompose::mcub::{
    generate_all, parse_jsonl, pools_by_modality, sample_and_select_groups, to_jsonl, CaptionedEntity,
    McubError, QuestionGenerator, TemplateGenerator,
};
use modelcompose::search::{enumerate_grid, search, SearchError};
use modelcompose::Checkpoint;

#[derive(Debug, Parser)]
#[command(name = "modelcompose", version, about = "Compose, inspect and evaluate modality checkpoints")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum StrategyArg {
    Naive,
    Weighted,
    ProjOnly,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum VariantArg {
    Frozen,
    Full,
    Decoupled,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ExtractArg {
    ArgmaxToken,
    OptionLetter,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum KindArg {
    Single,
    Joint,
    Commonality,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FormatArg {
    ConceptToken,
    OptionLetter,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum GeneratorArg {
    Template,
    External,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Merge checkpoints that share a base model.
    Compose {
        #[arg(long, num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "naive")]
        strategy: StrategyArg,
        /// Comma-separated coefficients, one per input (weighted strategy).
        #[arg(long, value_delimiter = ',')]
        lambda: Option<Vec<f64>>,
        /// Scale for a modality's decoupled weights, as `tag=value`; repeatable.
        #[arg(long = "modality-coeff", value_parser = parse_key_value)]
        modality_coeff: Vec<(String, f64)>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare two checkpoints parameter by parameter.
    Diff { a: PathBuf, b: PathBuf },
    /// Print a checkpoint header as JSON.
    Inspect { path: PathBuf },
    /// Score every grid coefficient vector on a validation set.
    SearchLambda {
        #[arg(long, num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        /// Validation dataset (JSON lines of task examples).
        #[arg(long)]
        val: PathBuf,
        #[arg(long, value_enum, default_value = "option-letter")]
        extract: ExtractArg,
        #[arg(long = "modality-coeff", value_parser = parse_key_value)]
        modality_coeff: Vec<(String, f64)>,
        /// Also write the full search result as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one single-modality toy model.
    TrainToy {
        #[arg(long, value_enum)]
        variant: VariantArg,
        #[arg(long)]
        modality: String,
        #[arg(long)]
        world_seed: u64,
        #[arg(long)]
        seed: u64,
        /// Experiment config supplying world, model and training settings.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Text-only base checkpoint; prepared from the config when absent.
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Write the training log as JSON.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Prepare the shared text-only base of an experiment config.
    InitBase {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "option-letter")]
        extract: ExtractArg,
    },
    /// Write a synthetic task dataset as JSON lines.
    GenData {
        #[arg(long)]
        world_seed: u64,
        #[arg(long)]
        seed: u64,
        #[arg(long, value_enum)]
        kind: KindArg,
        #[arg(long, value_delimiter = ',', required = true)]
        modalities: Vec<String>,
        #[arg(long)]
        n: usize,
        #[arg(long, value_enum, default_value = "option-letter")]
        format: FormatArg,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build multiple-choice commonality questions from captioned entity pools.
    BuildMcub {
        /// Entities as JSON lines (`modality`, `id`, `caption`, optional `tags`).
        #[arg(long)]
        pools: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        modalities: Vec<String>,
        #[arg(long, default_value_t = 500)]
        k: usize,
        #[arg(long, default_value_t = 2000)]
        n_candidates: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long, value_enum, default_value = "template")]
        generator: GeneratorArg,
        /// Chat-completions URL of the external generator.
        #[arg(long)]
        endpoint: Option<String>,
        /// Model name sent to the external generator.
        #[arg(long, default_value = "gpt-4")]
        generator_model: String,
        /// Environment variable holding the bearer token for the external generator.
        #[arg(long, default_value = external::TOKEN_ENV)]
        token_env: String,
        #[arg(long, default_value_t = 4)]
        max_concurrency: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the composition experiment described by a config.
    Experiment {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Validation(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Validation(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Validation(m) | CliError::Runtime(m) => m,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn runtime(e: impl Display) -> CliError {
    CliError::Runtime(e.to_string())
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Io(_) => runtime(e),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<ComposeError> for CliError {
    fn from(e: ComposeError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::NonFiniteLoss { .. } | HarnessError::Tensor(_) => runtime(e),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<SearchError> for CliError {
    fn from(e: SearchError) -> Self {
        match e {
            SearchError::OutOfRange(_) | SearchError::ModelCount { .. } => CliError::Validation(e.to_string()),
            _ => runtime(e),
        }
    }
}

impl From<McubError> for CliError {
    fn from(e: McubError) -> Self {
        match e {
            McubError::Generator(_) | McubError::Parse(_) => runtime(e),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

fn parse_key_value(s: &str) -> std::result::Result<(String, f64), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected tag=value, got {s:?}"))?;
    let v: f64 = v.parse().map_err(|e| format!("{v:?}: {e}"))?;
    Ok((k.to_string(), v))
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("no such file: {}", path.display())))
    }
}

fn require_out_dir(path: &Path) -> Result<()> {
    let dir = parent_dir(path);
    if dir.is_dir() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("output directory does not exist: {}", dir.display())))
    }
}

fn parent_dir(path: &Path) -> &Path {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    }
}

/// Writes through a temporary file in the target directory, then renames.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = tempfile::NamedTempFile::new_in(parent_dir(path)).map_err(runtime)?;
    tmp.write_all(bytes).map_err(runtime)?;
    tmp.as_file().sync_all().map_err(runtime)?;
    tmp.persist(path).map_err(|e| runtime(e.error))?;
    Ok(())
}

fn save(ck: &Checkpoint, path: &Path) -> Result<()> {
    write_atomic(path, &ck.to_bytes()?)
}

fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    Checkpoint::from_bytes(&bytes).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable")
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    let config = match path {
        Some(p) => serde_json::from_str(&read_text(p)?)
            .map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))?,
        None => ExperimentConfig::default(),
    };
    config.validate()?;
    Ok(config)
}

fn load_dataset(path: &Path) -> Result<Vec<TaskExample>> {
    parse_jsonl(&read_text(path)?).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

fn extraction(e: ExtractArg) -> Extraction {
    match e {
        ExtractArg::ArgmaxToken => Extraction::ArgmaxToken,
        ExtractArg::OptionLetter => Extraction::OptionLetter,
    }
}

fn merge_spec(
    strategy: StrategyArg,
    lambda: Option<Vec<f64>>,
    modality_coeff: Vec<(String, f64)>,
) -> Result<MergeSpec> {
    let mut spec = match (strategy, lambda) {
        (StrategyArg::Weighted, Some(l)) => MergeSpec::weighted(l),
        (StrategyArg::Weighted, None) => {
            return Err(CliError::Usage("--strategy weighted needs --lambda".into()))
        }
        (_, Some(_)) => return Err(CliError::Usage("--lambda only applies to --strategy weighted".into())),
        (StrategyArg::Naive, None) => MergeSpec::naive(),
        (StrategyArg::ProjOnly, None) => MergeSpec::proj_only(),
    };
    if !modality_coeff.is_empty() && spec.strategy == Strategy::ProjOnly {
        return Err(CliError::Usage("--modality-coeff does not apply to proj-only".into()));
    }
    spec.modality_coeffs = modality_coeff.into_iter().collect::<BTreeMap<_, _>>();
    Ok(spec)
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Compose {
            inputs,
            strategy,
            lambda,
            modality_coeff,
            out,
        } => {
            inputs.iter().try_for_each(|p| require_file(p))?;
            require_out_dir(&out)?;
            let spec = merge_spec(strategy, lambda, modality_coeff)?;
            let cks: Vec<Checkpoint> = inputs.iter().map(|p| load(p)).collect::<Result<_>>()?;
            let refs: Vec<&Checkpoint> = cks.iter().collect();
            let (composite, report) = compose(&refs, &spec)?;
            save(&composite, &out)?;
            println!("{}", to_json(&report));
            eprintln!(
                "composed {} checkpoints ({} unique, {} merged groups) -> {}",
                cks.len(),
                report.n_unique,
                report.n_common_groups,
                out.display()
            );
        }
        Command::Diff { a, b } => {
            require_file(&a)?;
            require_file(&b)?;
            let report = diff_checkpoints(&load(&a)?, &load(&b)?);
            println!("{}", to_json(&report));
        }
        Command::Inspect { path } => {
            require_file(&path)?;
            let bytes = std::fs::read(&path).map_err(runtime)?;
            let header = parse_header(&bytes).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
            println!("{}", to_json(&header));
        }
        Command::SearchLambda {
            inputs,
            val,
            extract,
            modality_coeff,
            out,
        } => {
            inputs.iter().try_for_each(|p| require_file(p))?;
            require_file(&val)?;
            if let Some(o) = &out {
                require_out_dir(o)?;
            }
            let cks: Vec<Checkpoint> = inputs.iter().map(|p| load(p)).collect::<Result<_>>()?;
            let refs: Vec<&Checkpoint> = cks.iter().collect();
            let data = load_dataset(&val)?;
            let grid = enumerate_grid(refs.len())?;
            let coeffs: BTreeMap<String, f64> = modality_coeff.into_iter().collect();
            // Validate once up front so a bad input set is reported as such, not per candidate.
            let mut probe = MergeSpec::weighted(grid.uniform());
            probe.modality_coeffs = coeffs.clone();
            compose(&refs, &probe)?;
            let ex = extraction(extract);
            let result = search(&grid, |lambda| -> std::result::Result<f64, HarnessError> {
                let mut spec = MergeSpec::weighted(lambda.to_vec());
                spec.modality_coeffs = coeffs.clone();
                let (c, _) = compose(&refs, &spec)?;
                Ok(evaluate(&c, &data, ex)?.accuracy)
            })?;
            for row in &result.table {
                println!("{}", serde_json::to_string(row).expect("serializable"));
            }
            eprintln!(
                "selected lambda {:?} (score {:.4}{})",
                result.best_lambda,
                result.best_score,
                if result.tie_rule_applied { ", tie broken" } else { "" }
            );
            if let Some(o) = out {
                write_atomic(&o, to_json(&result).as_bytes())?;
            }
        }
        Command::TrainToy {
            variant,
            modality,
            world_seed,
            seed,
            config,
            base,
            out,
            log,
        } => {
            if let Some(p) = &config {
                require_file(p)?;
            }
            if let Some(p) = &base {
                require_file(p)?;
            }
            require_out_dir(&out)?;
            if let Some(p) = &log {
                require_out_dir(p)?;
            }
            let config = load_config(config.as_deref())?;
            let base = match base {
                Some(p) => load(&p)?,
                None => {
                    eprintln!("preparing text-only base (seed {})", config.base_seed);
                    prepare_base(&config)?
                }
            };
            let world = build_synthetic_world(world_seed, &config.world)?;
            let single = |n: usize, label: &str, format: AnswerFormat| DatasetSpec {
                kind: TaskKind::Single,
                modalities: vec![modality.clone()],
                n,
                seed: modelcompose::mcub::fnv1a64(format!("{seed}/{label}").as_bytes()),
                format,
                max_filler: config.max_filler,
            };
            let stage1 = generate_dataset(&world, &single(config.n_stage1, "stage1", AnswerFormat::ConceptToken))?;
            let stage2 = generate_dataset(&world, &single(config.n_stage2, "stage2", config.format))?;
            let cfg = TrainConfig {
                variant: match variant {
                    VariantArg::Frozen => Variant::Frozen,
                    VariantArg::Full => Variant::Full,
                    VariantArg::Decoupled => Variant::Decoupled,
                },
                seed,
                ..config.train.clone()
            };
            let (ck, train_log) = train_toy_mllm(&base, &config.model, &modality, &stage1, &stage2, &cfg)?;
            save(&ck, &out)?;
            if let Some(p) = log {
                write_atomic(&p, to_json(&train_log).as_bytes())?;
            }
            eprintln!(
                "trained {modality} ({:?}); final stage-2 loss {:?} -> {}",
                cfg.variant,
                train_log.stage2_losses.last(),
                out.display()
            );
        }
        Command::InitBase { config, out } => {
            if let Some(p) = &config {
                require_file(p)?;
            }
            require_out_dir(&out)?;
            let config = load_config(config.as_deref())?;
            save(&prepare_base(&config)?, &out)?;
        }
        Command::Eval { model, data, extract } => {
            require_file(&model)?;
            require_file(&data)?;
            let ck = load(&model)?;
            let data = load_dataset(&data)?;
            let outcome = evaluate(&ck, &data, extraction(extract))?;
            println!("{}", to_json(&outcome));
        }
        Command::GenData {
            world_seed,
            seed,
            kind,
            modalities,
            n,
            format,
            config,
            out,
        } => {
            if let Some(p) = &config {
                require_file(p)?;
            }
            require_out_dir(&out)?;
            let config = load_config(config.as_deref())?;
            let world = build_synthetic_world(world_seed, &config.world)?;
            let spec = DatasetSpec {
                kind: match kind {
                    KindArg::Single => TaskKind::Single,
                    KindArg::Joint => TaskKind::Joint,
                    KindArg::Commonality => TaskKind::Commonality,
                },
                modalities,
                n,
                seed,
                format: match format {
                    FormatArg::ConceptToken => AnswerFormat::ConceptToken,
                    FormatArg::OptionLetter => AnswerFormat::OptionLetter,
                },
                max_filler: 0,
            };
            let data = generate_dataset(&world, &spec)?;
            write_atomic(&out, to_jsonl(&data).as_bytes())?;
            eprintln!("wrote {} examples -> {}", data.len(), out.display());
        }
        Command::BuildMcub {
            pools,
            modalities,
            k,
            n_candidates,
            seed,
            generator,
            endpoint,
            generator_model,
            token_env,
            max_concurrency,
            out,
        } => {
            require_file(&pools)?;
            require_out_dir(&out)?;
            let generator: Box<dyn QuestionGenerator> = match (generator, endpoint) {
                (GeneratorArg::Template, _) => Box::new(TemplateGenerator::default()),
                (GeneratorArg::External, Some(url)) => Box::new(external::ExternalGenerator::new(
                    url,
                    generator_model,
                    std::env::var(&token_env).ok(),
                )),
                (GeneratorArg::External, None) => {
                    return Err(CliError::Usage("--generator external needs --endpoint".into()))
                }
            };
            let entities: Vec<CaptionedEntity> = parse_jsonl(&read_text(&pools)?)?;
            let pools = pools_by_modality(entities)?;
            let groups = sample_and_select_groups(
                &pools,
                &modalities,
                n_candidates,
                k,
                seed,
                modelcompose::mcub::default_embed,
            )?;
            let items = generate_all(&groups, generator.as_ref(), seed, max_concurrency)?;
            write_atomic(&out, to_jsonl(&items).as_bytes())?;
            eprintln!("wrote {} questions from {} groups -> {}", items.len(), groups.len(), out.display());
        }
        Command::Experiment { config, out } => {
            require_file(&config)?;
            if let Some(o) = &out {
                require_out_dir(o)?;
            }
            let config = load_config(Some(&config))?;
            let reports = run_all_seeds(&config)?;
            let json = to_json(&reports);
            match out {
                Some(o) => write_atomic(&o, json.as_bytes())?,
                None => println!("{json}"),
            }
            for c in mean_cells(&reports) {
                eprintln!("mean {:?} {:?}: {:.3}", c.method, c.combo, c.accuracy);
            }
        }
    }
    Ok(())
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
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
