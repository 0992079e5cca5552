use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use qres_core::eval::{compare, write_reports_csv, LinearBaseline, OptBaseline, QueryEstimator, RegistryEstimator};
use qres_core::features::write_features_csv;
use qres_core::plan::{parse_plan, read_corpus, write_corpus};
use qres_core::registry::{QueryEstimate, Selection};
use qres_core::scaling::{fit_candidates, pick_best, ScalingChoices, ScalingKind, ScalingObservation};
use qres_core::workload::{corpus_features, fit_scaling_choices, generate_corpus, CorpusSpec, OracleSpec};
use qres_core::{extract_features, CardinalitySource, ModelRegistry, QueryPlan, RegistryConfig};
use serde::Serialize;

use crate::{CliError, RunConfig};

type CmdResult = Result<(), CliError>;

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::data(format!("{}: {e}", path.display()))
}

fn read_to_string(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(|e| io_err(path, e))
}

fn load_spec(path: Option<&Path>) -> Result<CorpusSpec, CliError> {
    let Some(path) = path else { return Ok(CorpusSpec::default()) };
    let spec: CorpusSpec = serde_json::from_str(&read_to_string(path)?).map_err(|e| io_err(path, e))?;
    spec.validate()?;
    Ok(spec)
}

fn load_corpus(path: &Path) -> Result<Vec<QueryPlan>, CliError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    read_corpus(BufReader::new(file)).map_err(|e| io_err(path, e))
}

fn load_model(path: &Path) -> Result<ModelRegistry, CliError> {
    ModelRegistry::load(path).map_err(|e| io_err(path, e))
}

/// Writes pretty JSON with a trailing newline to `out`, or to stdout.
pub(crate) fn emit_json<T: Serialize>(value: &T, out: Option<&Path>) -> CmdResult {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::data(e.to_string()))?;
    text.push('\n');
    match out {
        Some(path) => fs::write(path, text).map_err(|e| io_err(path, e)),
        None => to_stdout(|w| w.write_all(text.as_bytes())),
    }
}

/// Runs `f` against locked stdout. A reader that hangs up early (`| head`)
/// is not an error.
fn to_stdout(f: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> CmdResult {
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    match f(&mut lock).and_then(|()| lock.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(CliError::data(format!("stdout: {e}"))),
        _ => Ok(()),
    }
}

pub fn gen(spec: Option<&Path>, out: &Path, seed: Option<u64>) -> CmdResult {
    let mut spec = load_spec(spec)?;
    if let Some(seed) = seed {
        spec.seed = seed;
    }
    let corpus = generate_corpus(&spec)?;
    write_corpus(create(out)?, &corpus).map_err(|e| io_err(out, e))?;
    println!("wrote {} queries to {} (seed {})", corpus.len(), out.display(), spec.seed);
    Ok(())
}

pub enum ScalingSource {
    Disabled,
    Choices(PathBuf),
    Experiments(Option<PathBuf>),
}

pub fn train(corpus_path: &Path, out: &Path, scaling: &ScalingSource, cfg: &RunConfig) -> CmdResult {
    let corpus = load_corpus(corpus_path)?;
    if corpus.is_empty() {
        return Err(CliError::data(format!("{}: corpus is empty", corpus_path.display())));
    }
    let choices = match scaling {
        ScalingSource::Disabled => ScalingChoices::new(),
        ScalingSource::Choices(path) => serde_json::from_str(&read_to_string(path)?).map_err(|e| io_err(path, e))?,
        ScalingSource::Experiments(spec) => {
            let oracle = load_spec(spec.as_deref())?.oracle();
            fit_scaling_choices(&oracle, &corpus_features(&corpus)?, &cfg.resources)
        }
    };
    let reg_cfg = RegistryConfig {
        train: cfg.train.clone(),
        combined_models: !matches!(scaling, ScalingSource::Disabled),
        choices,
    };
    let registry = ModelRegistry::train(&corpus, &cfg.resources, cfg.source, &reg_cfg)?;
    registry.save(out).map_err(|e| io_err(out, e))?;

    println!("{:<16} {:<10} {:>6} {:>16} {:>12}", "operator", "resource", "models", "default", "train_err");
    for fam in registry.families() {
        let default = &fam.models[fam.default];
        let scale: Vec<&str> = default.model.scale_features().iter().map(|f| f.name()).collect();
        let label = if scale.is_empty() { "mart".to_string() } else { scale.join("+") };
        println!(
            "{:<16} {:<10} {:>6} {:>16} {:>12.6}",
            fam.op.name(),
            fam.resource.key(),
            fam.models.len(),
            label,
            default.training_error
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

/// Reads either one plan document or a line-delimited corpus.
fn load_plans(path: &Path) -> Result<Vec<QueryPlan>, CliError> {
    let text = read_to_string(path)?;
    match parse_plan(&text) {
        Ok(plan) => Ok(vec![plan]),
        Err(single) => match read_corpus(text.as_bytes()) {
            Ok(plans) if !plans.is_empty() => Ok(plans),
            Ok(_) => Err(CliError::data(format!("{}: no plans found", path.display()))),
            // A one-line file fails both ways with the same cause; report the plan error.
            Err(_) if text.trim().lines().count() <= 1 => Err(io_err(path, single)),
            Err(e) => Err(io_err(path, e)),
        },
    }
}

pub fn estimate(model: &Path, plan: &Path, out: Option<&Path>, mart_only: bool, cfg: &RunConfig) -> CmdResult {
    let registry = load_model(model)?;
    let plans = load_plans(plan)?;
    let selection = if mart_only { Selection::MartOnly } else { Selection::Heuristic };
    let mut estimates: Vec<QueryEstimate> = Vec::new();
    for p in &plans {
        for &resource in &cfg.resources {
            estimates.push(registry.estimate_query_with(p, resource, cfg.source, selection)?);
        }
    }
    emit_json(&estimates, out)
}

pub fn eval(
    model: &Path,
    test_path: &Path,
    train_path: Option<&Path>,
    baselines: &[String],
    out_dir: &Path,
    cfg: &RunConfig,
) -> CmdResult {
    let registry = load_model(model)?;
    let test = load_corpus(test_path)?;
    if test.is_empty() {
        return Err(CliError::data(format!("{}: test corpus is empty", test_path.display())));
    }
    let train = train_path.map(load_corpus).transpose()?;
    let wants = |name: &str| baselines.iter().any(|b| b == name);

    let mut reports = Vec::new();
    for &resource in &cfg.resources {
        let scaling = RegistryEstimator::scaling(&registry, resource, cfg.source);
        let mart = RegistryEstimator::mart(&registry, resource, cfg.source);
        let mut estimators: Vec<Box<dyn QueryEstimator + '_>> = vec![Box::new(scaling), Box::new(mart)];
        if let Some(train) = &train {
            if wants("linear") {
                estimators.push(Box::new(LinearBaseline::fit(train, resource, cfg.source, cfg.seed)?));
            }
            if wants("opt") {
                estimators.push(Box::new(OptBaseline::fit(train, resource)?));
            }
        }
        let refs: Vec<&dyn QueryEstimator> = estimators.iter().map(|e| e.as_ref()).collect();
        reports.extend(compare(&refs, &test)?);
    }

    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let csv_path = out_dir.join("report.csv");
    write_reports_csv(create(&csv_path)?, &reports).map_err(|e| io_err(&csv_path, e))?;
    emit_json(&reports, Some(&out_dir.join("report.json")))?;

    println!("{:<8} {:<10} {:>8} {:>8} {:>8} {:>8}", "tech", "resource", "l1_err", "r<1.5", "1.5-2", "r>2");
    for r in &reports {
        println!(
            "{:<8} {:<10} {:>8.4} {:>8.3} {:>8.3} {:>8.3}",
            r.technique,
            r.resource.key(),
            r.l1_err,
            r.r_below_1_5,
            r.r_1_5_to_2,
            r.r_above_2
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct CandidateFit {
    kind: ScalingKind,
    alpha: f64,
    beta: f64,
    swapped: bool,
    sse: f64,
}

#[derive(Serialize)]
struct FitReport {
    features: Vec<String>,
    observations: usize,
    selected: CandidateFit,
    candidates: Vec<CandidateFit>,
}

pub fn fit_observations(path: &Path, out: Option<&Path>) -> CmdResult {
    let mut reader = csv::Reader::from_path(path).map_err(|e| io_err(path, e))?;
    let header: Vec<String> = reader.headers().map_err(|e| io_err(path, e))?.iter().map(String::from).collect();
    let arity = header.len().checked_sub(1).filter(|a| (1..=2).contains(a)).ok_or_else(|| {
        CliError::data(format!("{}: expected 1 or 2 feature columns plus a usage column", path.display()))
    })?;
    let mut obs = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row.map_err(|e| io_err(path, e))?;
        let nums = row
            .iter()
            .map(|s| s.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| CliError::data(format!("{}: row {}: {e}", path.display(), i + 2)))?;
        obs.push(ScalingObservation::new(&nums[..arity], nums[arity]));
    }
    let kinds: Vec<ScalingKind> = ScalingKind::ALL.into_iter().filter(|k| k.arity() == arity).collect();
    let fits = fit_candidates(&kinds, &obs);
    let best = pick_best(&fits)
        .ok_or_else(|| CliError::data(format!("{}: no candidate form fits these observations", path.display())))?;
    let view = |r: &qres_core::scaling::FitResult| CandidateFit {
        kind: r.form.kind,
        alpha: r.form.alpha,
        beta: r.form.beta,
        swapped: r.form.swapped,
        sse: r.sse,
    };
    let report = FitReport {
        features: header[..arity].to_vec(),
        observations: obs.len(),
        selected: view(&best),
        candidates: fits.iter().map(view).collect(),
    };
    emit_json(&report, out)
}

pub fn fit_corpus(corpus: &Path, spec: Option<&Path>, out: Option<&Path>) -> CmdResult {
    let oracle: OracleSpec = load_spec(spec)?.oracle();
    let corpus = load_corpus(corpus)?;
    let choices = fit_scaling_choices(&oracle, &corpus_features(&corpus)?, &qres_core::ResourceKind::ALL);
    emit_json(&choices, out)
}

pub fn dump_features(path: &Path, source: CardinalitySource, out: Option<&Path>) -> CmdResult {
    let corpus = load_corpus(path)?;
    let mut rows = Vec::new();
    for plan in &corpus {
        let nodes = plan.nodes();
        for r in &nodes {
            let parent = r.parent.map(|p| nodes[p].node.op);
            rows.push((plan.query_id.clone(), r.id, extract_features(r.node, parent, source)?));
        }
    }
    match out {
        Some(p) => write_features_csv(create(p)?, &rows).map_err(|e| io_err(p, e)),
        None => {
            let mut buf = Vec::new();
            write_features_csv(&mut buf, &rows)?;
            to_stdout(|w| w.write_all(&buf))
        }
    }
}
