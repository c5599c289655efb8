use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use rrank::data::{
    flip_share, gen_counting_nli, gen_multidoc, read_jsonl, standard_vocab, write_jsonl, CandidateSet, NliOptions,
    RuleInverter, RuleLabeler, Task,
};
use rrank::eval::{evaluate, EvalOptions, Report};
use rrank::model::{init_model, load_checkpoint, save_checkpoint, ModelParams};
use rrank::objectives::Mode;
use rrank::ordering::{Orderer, Strategy};
use rrank::par::Exec;
use rrank::scoring::{write_score_csv, LambdaTable, ScoredResponse, SourceTag};
use rrank::train::{fit_sequences, prepare_pairs, train, MetricsLog};
use rrank::vocab::{TokenSequence, Vocab};
use rrank::Error;

use crate::config::{ModelShape, Preset, RunConfig};

pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long, value_enum)]
    pub task: TaskArg,
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Probability that a model candidate asserts a wrong label (nli).
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    /// Model candidates use the longest wording (nli).
    #[arg(long)]
    pub verbose: bool,
    /// Share of model candidates to pass through the flipping pipeline (nli).
    #[arg(long)]
    pub flip: Option<f64>,
    /// Documents per prompt (multidoc).
    #[arg(long, default_value_t = 5)]
    pub k_docs: usize,
    /// Gold document positions, assigned round-robin (multidoc).
    #[arg(long, value_delimiter = ',', default_value = "0,2,4")]
    pub positions: Vec<usize>,
    /// Defaults to `<out>.manifest.json`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum TaskArg {
    Nli,
    Multidoc,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Task {
        match t {
            TaskArg::Nli => Task::Nli,
            TaskArg::Multidoc => Task::Multidoc,
        }
    }
}

#[derive(Serialize)]
struct Manifest {
    generator_version: &'static str,
    task: Task,
    seed: u64,
    n: usize,
    noise: f64,
    verbose: bool,
    flip: Option<f64>,
    k_docs: Option<usize>,
    positions: Option<Vec<usize>>,
    sets: usize,
    candidates: usize,
    by_source: BTreeMap<&'static str, usize>,
}

pub fn gen_data(a: &GenDataArgs) -> Result<()> {
    let vocab = standard_vocab();
    let task = Task::from(a.task);
    if !(0.0..=1.0).contains(&a.noise) {
        return Err(Error::Config(format!("--noise must be in [0, 1], got {}", a.noise)).into());
    }
    if task == Task::Multidoc && (a.noise > 0.0 || a.verbose || a.flip.is_some()) {
        return Err(Error::Config("--noise, --verbose and --flip apply to nli only".into()).into());
    }
    let mut sets = match task {
        Task::Nli => gen_counting_nli(
            a.n,
            NliOptions {
                noise: a.noise,
                verbose: a.verbose,
            },
            a.seed,
            &vocab,
        ),
        Task::Multidoc => gen_multidoc(a.n, a.k_docs, &a.positions, a.seed, &vocab)?,
    };
    if let Some(f) = a.flip {
        let flip_seed = a.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        flip_share(&mut sets, f, flip_seed, &RuleInverter, &RuleLabeler, &vocab)?;
    }
    ensure_parent(&a.out)?;
    write_jsonl(&a.out, &sets).with_context(|| format!("writing {}", a.out.display()))?;

    let mut by_source: BTreeMap<&'static str, usize> = SourceTag::ALL.iter().map(|t| (t.as_str(), 0)).collect();
    for c in sets.iter().flat_map(|s| &s.candidates) {
        *by_source.entry(c.source.as_str()).or_default() += 1;
    }
    let md = task == Task::Multidoc;
    let manifest = Manifest {
        generator_version: env!("CARGO_PKG_VERSION"),
        task,
        seed: a.seed,
        n: a.n,
        noise: a.noise,
        verbose: a.verbose,
        flip: a.flip,
        k_docs: md.then_some(a.k_docs),
        positions: md.then(|| a.positions.clone()),
        sets: sets.len(),
        candidates: sets.iter().map(|s| s.candidates.len()).sum(),
        by_source,
    };
    let path = a.manifest.clone().unwrap_or_else(|| suffixed(&a.out, ".manifest.json"));
    write_json(&path, &manifest)?;
    println!("wrote {} sets to {}", sets.len(), a.out.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct InitArgs {
    /// Data used to size the context window.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Writes a freshly initialised checkpoint, the untrained baseline.
pub fn init(a: &InitArgs) -> Result<()> {
    let vocab = standard_vocab();
    let sets = load_sets(&a.data, &vocab)?;
    let params = fresh_model(&ModelShape::default(), &vocab, &sets, a.seed)?;
    ensure_parent(&a.out)?;
    save_checkpoint(&params, &a.out)?;
    println!("wrote {} ({} parameters)", a.out.display(), params.num_params());
    Ok(())
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    pub preset: Preset,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

/// Likelihood training on one uniformly drawn candidate per set. This
/// teaches a fresh model the response format without preferring the
/// correct candidate, giving ranking-only runs a base to start from.
pub fn pretrain(a: &PretrainArgs) -> Result<()> {
    let vocab = standard_vocab();
    let sets = load_sets(&a.data, &vocab)?;
    let mut cfg = a.preset.train_config();
    cfg.seed = a.seed;
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.lr_peak = lr;
    }
    cfg.validate()?;
    let mut params = fresh_model(&ModelShape::default(), &vocab, &sets, a.seed)?;
    let examples = format_examples(&sets, a.seed);
    let log = fit_sequences(&mut params, &examples, &cfg, Exec::default())?;
    fs::create_dir_all(&a.out)?;
    save_checkpoint(&params, a.out.join(CHECKPOINT_FILE))?;
    write_metrics(&a.out.join(METRICS_FILE), &log)?;
    println!("pretrained {} steps, final loss {:.4}", log.steps.len(), log.final_loss().unwrap_or(f64::NAN));
    Ok(())
}

/// One (prompt, candidate) pair per set, the candidate drawn uniformly.
pub fn format_examples(sets: &[CandidateSet], seed: u64) -> Vec<(TokenSequence, TokenSequence)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sets.iter()
        .map(|s| {
            let c = &s.candidates[rng.random_range(0..s.candidates.len())];
            (s.prompt_tokens.clone(), c.target())
        })
        .collect()
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Start from a snapshot written by an earlier run; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    #[arg(long, value_enum)]
    pub task: Option<TaskArg>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Checkpoint to fine-tune instead of a fresh model.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long, value_parser = parse_strategy)]
    pub strategy: Option<Strategy>,
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub margin: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Length-normalization exponent for every model source tag.
    #[arg(long)]
    pub lambda_model: Option<f64>,
}

fn parse_strategy(s: &str) -> std::result::Result<Strategy, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_mode(s: &str) -> std::result::Result<Mode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Merges snapshot, preset and flags into the config a run will use.
pub fn resolve_train_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut c = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::from_preset(a.preset.unwrap_or(Preset::Desk)),
    };
    if let (Some(_), Some(p)) = (&a.config, a.preset) {
        let seed = c.train.seed;
        let lambdas = c.train.lambda_table;
        c.train = p.train_config();
        c.train.seed = seed;
        c.train.lambda_table = lambdas;
    }
    if let Some(t) = a.task {
        c.task = t.into();
    }
    if let Some(d) = &a.data {
        c.data = d.clone();
    }
    if let Some(o) = &a.out {
        c.out_dir = o.clone();
    }
    if let Some(i) = &a.init {
        c.init = Some(i.clone());
    }
    if let Some(s) = a.strategy {
        c.strategy = s;
    }
    if let Some(m) = a.mode {
        c.objective.mode = m;
    }
    if let Some(x) = a.alpha {
        c.objective.alpha = x;
    }
    if let Some(x) = a.margin {
        c.objective.margin = x;
    }
    if let Some(s) = a.seed {
        c.train.seed = s;
    }
    if let Some(e) = a.epochs {
        c.train.epochs = e;
    }
    if let Some(lr) = a.lr {
        c.train.lr_peak = lr;
    }
    if let Some(l) = a.lambda_model {
        c.train.lambda_table = LambdaTable::new(c.train.lambda_table.human, l)?;
    }
    if c.data.as_os_str().is_empty() {
        return Err(Error::Config("no training data given (--data or --config)".into()).into());
    }
    c.resolve(a.mode)?;
    Ok(c)
}

pub fn train_cmd(a: &TrainArgs) -> Result<()> {
    let cfg = resolve_train_config(a)?;
    let vocab = standard_vocab();
    let sets = load_sets(&cfg.data, &vocab)?;
    if let Some(s) = sets.iter().find(|s| s.task != cfg.task) {
        return Err(Error::Config(format!(
            "--task {} but {} is a {} instance",
            cfg.task.as_str(),
            s.instance_id,
            s.task.as_str()
        ))
        .into());
    }
    let mut params: ModelParams<f32> = match &cfg.init {
        Some(p) => load_model(p, &vocab)?,
        None => fresh_model(&cfg.model, &vocab, &sets, cfg.train.seed)?,
    };
    let orderer = Orderer::with_defaults(cfg.strategy, &vocab);
    let pairs = prepare_pairs(&orderer, &sets)?;
    let log = train(&mut params, &sets, &pairs, &cfg.train, &cfg.objective, Exec::default())?;

    fs::create_dir_all(&cfg.out_dir)?;
    save_checkpoint(&params, cfg.out_dir.join(CHECKPOINT_FILE))?;
    write_metrics(&cfg.out_dir.join(METRICS_FILE), &log)?;
    fs::write(cfg.out_dir.join(CONFIG_FILE), cfg.to_toml()?)?;
    let skipped = pairs.iter().filter(|p| p.is_none()).count();
    println!(
        "trained {} steps ({} mode, {} instances skipped), final loss {:.4}",
        log.steps.len(),
        cfg.objective.mode.as_str(),
        skipped,
        log.final_loss().unwrap_or(f64::NAN)
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Score CSV path; defaults to `<out>.scores.csv`.
    #[arg(long)]
    pub scores: Option<PathBuf>,
    /// Ordering used for the margin-violation rate. Defaults to the one in
    /// the checkpoint's config snapshot, if present.
    #[arg(long, value_parser = parse_strategy)]
    pub strategy: Option<Strategy>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lambda_model: Option<f64>,
    #[arg(long)]
    pub margin: Option<f64>,
}

pub fn eval_cmd(a: &EvalArgs) -> Result<()> {
    let vocab = standard_vocab();
    let sets = load_sets(&a.data, &vocab)?;
    let params: ModelParams<f32> = load_model(&a.checkpoint, &vocab)?;
    let snapshot = a
        .checkpoint
        .parent()
        .map(|d| d.join(CONFIG_FILE))
        .filter(|p| p.is_file())
        .map(|p| RunConfig::load(&p))
        .transpose()?;
    let strategy = a.strategy.or(snapshot.as_ref().map(|c| c.strategy));
    let seed = a.seed.or(snapshot.as_ref().map(|c| c.train.seed));
    let mut lambdas = snapshot.as_ref().map(|c| c.train.lambda_table).unwrap_or_default();
    if let Some(l) = a.lambda_model {
        lambdas = LambdaTable::new(lambdas.human, l)?;
    }
    lambdas.validate()?;
    let margin = a.margin.or(snapshot.as_ref().map(|c| c.objective.margin)).unwrap_or(0.1);

    let task = sets.first().map(|s| s.task).unwrap_or(Task::Nli);
    let orderer = strategy
        .filter(|s| !(task == Task::Multidoc && s.needs_human()))
        .map(|s| Orderer::with_defaults(s, &vocab));
    let opts = EvalOptions {
        orderer: orderer.as_ref(),
        lambdas,
        margin,
        exec: Exec::default(),
    };
    let mut ev = evaluate(&params, &vocab, &sets, &opts)?;
    ev.report.strategy = strategy.map(|s| s.as_str().to_string());
    ev.report.seed = seed;

    let scores_path = a.scores.clone().unwrap_or_else(|| suffixed(&a.out, ".scores.csv"));
    ensure_parent(&scores_path)?;
    let rows: Vec<(&CandidateSet, &[ScoredResponse])> =
        sets.iter().zip(&ev.scores).map(|(s, r)| (s, r.as_slice())).collect();
    write_score_csv(BufWriter::new(File::create(&scores_path)?), &rows)?;
    ev.report.score_csv_path = Some(scores_path.display().to_string());
    write_json(&a.out, &ev.report)?;
    println!("accuracy {:.4} on {} instances", ev.report.accuracy, ev.report.n_instances);
    Ok(())
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    #[arg(required = true)]
    pub reports: Vec<PathBuf>,
    /// Also write the summary as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Per-strategy aggregate over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyRow {
    pub strategy: String,
    pub n: usize,
    pub mean: f64,
    pub stddev: f64,
    /// (seed, accuracy) per report, in input order.
    pub runs: Vec<(Option<u64>, f64)>,
    /// Mean accuracy per gold-document position, multidoc only.
    pub positions: Option<BTreeMap<usize, f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub task: Task,
    pub rows: Vec<StrategyRow>,
}

/// Mean and sample standard deviation; a single value has deviation 0.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn summarize(reports: &[Report]) -> rrank::Result<Summary> {
    let first = reports.first().ok_or_else(|| Error::Config("no reports to aggregate".into()))?;
    if let Some(r) = reports.iter().find(|r| r.task != first.task) {
        return Err(Error::Config(format!(
            "cannot aggregate {} and {} reports together",
            first.task.as_str(),
            r.task.as_str()
        )));
    }
    let mut groups: BTreeMap<String, Vec<&Report>> = BTreeMap::new();
    for r in reports {
        groups.entry(r.strategy.clone().unwrap_or_else(|| "none".into())).or_default().push(r);
    }
    let rows = groups
        .into_iter()
        .map(|(strategy, rs)| {
            let accs: Vec<f64> = rs.iter().map(|r| r.accuracy).collect();
            let (mean, stddev) = mean_std(&accs);
            let positions = rs.iter().all(|r| r.position_table.is_some()).then(|| {
                let mut sums: BTreeMap<usize, f64> = BTreeMap::new();
                for t in rs.iter().filter_map(|r| r.position_table.as_ref()) {
                    for (&p, &a) in &t.positions {
                        *sums.entry(p).or_default() += a;
                    }
                }
                sums.into_iter().map(|(p, s)| (p, s / rs.len() as f64)).collect()
            });
            StrategyRow {
                strategy,
                n: rs.len(),
                mean,
                stddev,
                runs: rs.iter().map(|r| (r.seed, r.accuracy)).collect(),
                positions,
            }
        })
        .collect();
    Ok(Summary { task: first.task, rows })
}

impl Summary {
    pub fn render(&self) -> String {
        let mut s = format!("task {}\n", self.task.as_str());
        s.push_str(&format!("{:<16}{:>3}  {:<18}", "strategy", "n", "accuracy"));
        let positions: Vec<usize> = self
            .rows
            .iter()
            .filter_map(|r| r.positions.as_ref())
            .flat_map(|p| p.keys().copied())
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        for p in &positions {
            s.push_str(&format!("{:>8}", format!("pos{p}")));
        }
        s.push_str("  runs (seed:accuracy)\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{:<16}{:>3}  {:<18}",
                r.strategy,
                r.n,
                format!("{:.4} ± {:.4}", r.mean, r.stddev)
            ));
            for p in &positions {
                let v = r.positions.as_ref().and_then(|m| m.get(p));
                s.push_str(&match v {
                    Some(v) => format!("{v:>8.4}"),
                    None => format!("{:>8}", "-"),
                });
            }
            let runs: Vec<String> = r
                .runs
                .iter()
                .map(|(seed, a)| match seed {
                    Some(sd) => format!("{sd}:{a:.4}"),
                    None => format!("-:{a:.4}"),
                })
                .collect();
            s.push_str("  ");
            s.push_str(&runs.join(" "));
            s.push('\n');
        }
        s
    }
}

pub fn report_cmd(a: &ReportArgs) -> Result<()> {
    let reports = a
        .reports
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Parse { line: e.line(), message: format!("{}: {e}", p.display()) }.into())
        })
        .collect::<Result<Vec<Report>>>()?;
    let summary = summarize(&reports)?;
    print!("{}", summary.render());
    if let Some(out) = &a.out {
        write_json(out, &summary)?;
    }
    Ok(())
}

fn load_sets(path: &Path, vocab: &Vocab) -> Result<Vec<CandidateSet>> {
    let sets = read_jsonl(path, vocab).with_context(|| format!("reading {}", path.display()))?;
    if sets.is_empty() {
        return Err(Error::Domain(format!("{} holds no candidate sets", path.display())).into());
    }
    Ok(sets)
}

fn load_model(path: &Path, vocab: &Vocab) -> Result<ModelParams<f32>> {
    let p: ModelParams<f32> = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    if p.config().vocab_size != vocab.len() {
        return Err(Error::Checkpoint(format!(
            "{} was built for a {}-token vocabulary, expected {}",
            path.display(),
            p.config().vocab_size,
            vocab.len()
        ))
        .into());
    }
    Ok(p)
}

/// Smallest multiple of 8 that holds every prompt plus its longest
/// candidate, so greedy decoding always has room for a full answer.
pub fn context_for(sets: &[CandidateSet]) -> usize {
    let need = sets
        .iter()
        .map(|s| s.prompt_tokens.len() + s.candidates.iter().map(|c| c.tokens.len() + 1).max().unwrap_or(0))
        .max()
        .unwrap_or(1);
    need.div_ceil(8) * 8
}

pub fn fresh_model(shape: &ModelShape, vocab: &Vocab, sets: &[CandidateSet], seed: u64) -> Result<ModelParams<f32>> {
    let mc = shape.model_config(vocab.len(), context_for(sets), seed);
    Ok(init_model(&mc)?)
}

fn write_metrics(path: &Path, log: &MetricsLog) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    log.write_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(d) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(d)?;
    }
    Ok(())
}

fn suffixed(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}
