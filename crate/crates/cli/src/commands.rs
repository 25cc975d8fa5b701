use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Args;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Map, Value};

use seqflow::eval::{
    compare_reports, error_rate, run_hallucination_benchmark, SyntheticTask, TerminalTable, DEFAULT_BUDGET,
};
use seqflow::io::{
    load_checkpoint, parse_corpus, save_checkpoint, write_corpus, Ablation, Checkpoint, CorpusEntry, MetricsRecord,
    MetricsWriter, RunConfig,
};
use seqflow::policy::mix_seed;
use seqflow::sampling::{generate_logged, SamplerConfig, Strategy};
use seqflow::trainer::Trainer;
use seqflow::uncertainty::{
    chunk_spans, linreg, permutation_p_value, utterance_uncertainty, uur, word_uncertainty,
    Statistic,
};
use seqflow::{
    Error, ParametricPolicy, Prompt, ReferenceModel, Result, RewardModel, RowInit, TemperatureSchedule, TokenId,
    Vocabulary,
};

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// JSON config; keys not given fall back to the preset it names.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Preset used when no config file is given.
    #[arg(long, default_value = "lro1500")]
    preset: String,
    /// Dotted override, e.g. `--set train.total_steps=500`. Values are JSON,
    /// falling back to a plain string.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut user = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| config_err(format!("cannot read config {}: {e}", path.display())))?;
                match serde_json::from_str::<Value>(&text) {
                    Ok(Value::Object(m)) => m,
                    Ok(_) => return Err(config_err("config must be a JSON object")),
                    Err(e) => return Err(config_err(format!("invalid JSON in {}: {e}", path.display()))),
                }
            }
            None => {
                let mut m = Map::new();
                m.insert("preset".into(), Value::String(self.preset.clone()));
                m
            }
        };
        for s in &self.sets {
            let (key, raw) = s.split_once('=').ok_or_else(|| config_err(format!("override {s:?} lacks '='")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut user, key, value)?;
        }
        RunConfig::from_overrides(user)
    }
}

fn set_path(map: &mut Map<String, Value>, key: &str, value: Value) -> Result<()> {
    let mut parts = key.split('.').peekable();
    let mut cur = map;
    while let Some(part) = parts.next() {
        if part.is_empty() {
            return Err(config_err(format!("bad override key {key:?}")));
        }
        if parts.peek().is_none() {
            cur.insert(part.to_string(), value);
            return Ok(());
        }
        let slot = cur.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
        cur = slot.as_object_mut().ok_or_else(|| config_err(format!("override {key:?} descends into a non-object")))?;
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Training prompts; defaults to `paths.corpus`, then to one empty prompt.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Output directory for metrics.jsonl, final.ckpt and config.json.
    #[arg(long)]
    out: PathBuf,
    /// Skip training and checkpoint the untrained reference clone (a baseline).
    #[arg(long)]
    init_only: bool,
}

fn load_prompts(path: Option<&Path>, vocab: &Vocabulary) -> Result<Vec<Prompt>> {
    match path {
        Some(p) => {
            let entries = parse_corpus(p, vocab)?;
            if entries.is_empty() {
                return Err(Error::Parse { line: 1, column: 1, message: "corpus has no entries".into() });
            }
            Ok(entries.into_iter().map(|e| e.prompt).collect())
        }
        None => Ok(vec![Prompt::unconditional()]),
    }
}

pub fn train(args: TrainArgs, ablation: Option<Ablation>) -> Result<()> {
    let mut cfg = args.cfg.resolve()?;
    if let Some(mode) = ablation {
        cfg.apply_ablation(mode);
        cfg.validate()?;
    }
    let vocab = cfg.vocab()?;
    let corpus_path = args.corpus.clone().or_else(|| cfg.paths.corpus.clone());
    let prompts = load_prompts(corpus_path.as_deref(), &vocab)?;

    fs::create_dir_all(&args.out)?;
    let metrics_path = cfg.paths.metrics.clone().unwrap_or_else(|| args.out.join("metrics.jsonl"));
    let ckpt_path = cfg.paths.checkpoint.clone().unwrap_or_else(|| args.out.join("final.ckpt"));
    fs::write(args.out.join("config.json"), cfg.to_json_pretty() + "\n")?;

    let rm = cfg.reward_model()?;
    let mut trainer = Trainer::new(cfg.train_plan()?, rm.reference().clone_reference(), rm, prompts)?;
    let mut writer = MetricsWriter::new(BufWriter::new(File::create(&metrics_path)?));
    let start = Instant::now();
    let mut last = start;
    let mut halted = None;
    let mut last_loss = f64::NAN;
    while !args.init_only && !trainer.is_done() {
        let m = trainer.train_step()?;
        let timing = cfg.log_timing.then(|| {
            let now = Instant::now();
            let t = (now.duration_since(start).as_secs_f64(), now.duration_since(last).as_secs_f64());
            last = now;
            t
        });
        writer.write(&MetricsRecord::from_step(&m, timing))?;
        last_loss = m.loss;
        if m.collapse && cfg.halt_on_collapse {
            halted = Some(m.step);
            break;
        }
    }
    writer.flush()?;
    save_checkpoint(&ckpt_path, &Checkpoint::from_trainer(&trainer, cfg.to_json()))?;
    if let Some(step) = halted {
        eprintln!("seqflow: length collapse detected at step {step}; training halted");
    }
    println!(
        "{}",
        json!({
            "steps": trainer.step_count(),
            "final_loss": last_loss,
            "halted": halted.is_some(),
            "checkpoint": ckpt_path,
            "metrics": metrics_path,
        })
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    train: TrainArgs,
    /// One of `tb`, `no-rtd`, `no-lro`.
    #[arg(long)]
    mode: String,
}

pub fn ablate(args: AblateArgs) -> Result<()> {
    let mode: Ablation = args.mode.parse()?;
    train(args.train, Some(mode))
}

/// Config stored in a checkpoint, when it parses.
fn ckpt_config(ckpt: &Checkpoint) -> Option<RunConfig> {
    RunConfig::from_json_str(&ckpt.config_json).ok()
}

fn parse_ids(text: &str, vocab: &Vocabulary) -> Result<Vec<TokenId>> {
    text.split_whitespace()
        .map(|w| {
            let id: TokenId = w.parse().map_err(|_| config_err(format!("bad token id {w:?}")))?;
            if !vocab.is_ordinary(id) {
                return Err(config_err(format!("token {id} outside vocabulary of size {}", vocab.size())));
            }
            Ok(id)
        })
        .collect()
}

fn join_ids(ids: &[TokenId]) -> String {
    ids.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Args)]
pub struct PromptArgs {
    /// Prompt token ids, space separated.
    #[arg(long, default_value = "")]
    prompt: String,
    #[arg(long, default_value_t = 0)]
    prompt_id: u32,
}

impl PromptArgs {
    fn build(&self, vocab: &Vocabulary) -> Result<Prompt> {
        Prompt::new(vocab, self.prompt_id, parse_ids(&self.prompt, vocab)?)
    }
}

#[derive(Debug, Args)]
pub struct SamplerArgs {
    /// rms, lt-rms, topk, topp or ras; defaults to the checkpoint's sampler.
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    temp: Option<f64>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    top_p: Option<f64>,
}

impl SamplerArgs {
    fn build(&self, base: SamplerConfig) -> Result<SamplerConfig> {
        let mut s = base;
        if let Some(name) = &self.strategy {
            s.strategy = name.parse::<Strategy>().map_err(|e| config_err(e.to_string()))?;
        }
        if let Some(t) = self.temp {
            s.decode_temperature = t;
        }
        if let Some(k) = self.top_k {
            s.k = k;
        }
        if let Some(p) = self.top_p {
            s.p = p;
        }
        s.validate().map_err(|e| config_err(e.to_string()))?;
        Ok(s)
    }
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    sampler: SamplerArgs,
    #[command(flatten)]
    prompt: PromptArgs,
    #[arg(long, default_value_t = 1)]
    n: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

pub fn sample(args: SampleArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.ckpt)?;
    let base = ckpt_config(&ckpt).map(|c| c.sampler).unwrap_or_default();
    let sampler = args.sampler.build(base)?;
    let vocab = *ckpt.policy.vocab();
    let prompt = args.prompt.build(&vocab)?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for i in 0..args.n {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[args.seed, i as u64]));
        let (seq, _) = generate_logged(&ckpt.policy, &prompt, &sampler, &mut rng)?;
        writeln!(out, "{}", join_ids(seq.tokens()))?;
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Reward temperature of the target distribution.
    #[arg(long)]
    temp: f64,
    #[command(flatten)]
    prompt: PromptArgs,
}

/// The frozen reference is the checkpoint's row initializer: rows that
/// training never touched still hold their reference values.
fn reference_of(policy: &ParametricPolicy) -> ReferenceModel {
    ReferenceModel::new(policy.without_rows())
}

pub fn oracle(args: OracleArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.ckpt)?;
    let budget = ckpt_config(&ckpt).map(|c| c.budget()).unwrap_or(DEFAULT_BUDGET);
    let vocab = *ckpt.policy.vocab();
    let prompt = args.prompt.build(&vocab)?;
    let rm = RewardModel::new(reference_of(&ckpt.policy), TemperatureSchedule::constant(args.temp))
        .map_err(|e| config_err(e.to_string()))?;
    let table = TerminalTable::build(&ckpt.policy, &rm, &prompt, args.temp, budget)?;
    println!(
        "{}",
        json!({
            "temperature": args.temp,
            "terminals": table.terminals.len(),
            "tv": table.tv(),
            "kl": table.kl(),
        })
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Trained model.
    #[arg(long)]
    ckpt: PathBuf,
    /// Baseline (reference) model.
    #[arg(long)]
    baseline: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    sampler: SamplerArgs,
    #[arg(long, default_value_t = 10)]
    samples: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Width of the fixed chunks used as word spans.
    #[arg(long, default_value_t = 3)]
    word_width: usize,
    #[arg(long, default_value_t = 1000)]
    permutations: usize,
}

struct Utterance {
    prompt_id: u32,
    sample: u32,
    model: &'static str,
    output: Vec<TokenId>,
    uncertainty: f64,
    max_word_uncertainty: f64,
    error_rate: Option<f64>,
}

fn utterances(
    policy: &ParametricPolicy,
    model: &'static str,
    entries: &[CorpusEntry],
    sampler: &SamplerConfig,
    n: u32,
    seed: u64,
    word_width: usize,
) -> Result<Vec<Utterance>> {
    let idx: Vec<(usize, u32)> = (0..entries.len()).flat_map(|i| (0..n).map(move |s| (i, s))).collect();
    seqflow::par::map_slice(&idx, |&(i, s)| {
        let e = &entries[i];
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, e.prompt.id as u64, s as u64]));
        let (seq, log) = generate_logged(policy, &e.prompt, sampler, &mut rng)?;
        let mut max_word = 0.0f64;
        for span in chunk_spans(log.len(), word_width) {
            max_word = max_word.max(word_uncertainty(&log, span)?);
        }
        Ok(Utterance {
            prompt_id: e.prompt.id,
            sample: s,
            model,
            output: seq.tokens().to_vec(),
            uncertainty: utterance_uncertainty(&log)?,
            max_word_uncertainty: max_word,
            error_rate: e.target.as_ref().map(|t| error_rate(&seq, t)).transpose()?,
        })
    })
    .into_iter()
    .collect()
}

fn per_prompt_means(us: &[Utterance], n: u32) -> Vec<f64> {
    us.chunks(n as usize).map(|c| c.iter().map(|u| u.uncertainty).sum::<f64>() / c.len() as f64).collect()
}

/// Uncertainty/error association for utterances that have a target.
fn correlation(us: &[Utterance], permutations: usize, seed: u64) -> Result<Value> {
    let (u, e): (Vec<f64>, Vec<f64>) = us.iter().filter_map(|x| x.error_rate.map(|e| (x.uncertainty, e))).unzip();
    if u.len() < 2 {
        return Ok(Value::Null);
    }
    let stat = |s: Statistic| -> Result<Value> {
        let r = s.compute(&u, &e)?;
        if !r.is_finite() {
            return Ok(json!({ "r": null, "p": null }));
        }
        Ok(json!({ "r": r, "p": permutation_p_value(&u, &e, s, permutations, seed)? }))
    };
    let fit = linreg(&u, &e).ok().map(|(slope, intercept)| json!({ "slope": slope, "intercept": intercept }));
    Ok(json!({
        "n": u.len(),
        "pearson": stat(Statistic::Pearson)?,
        "spearman": stat(Statistic::Spearman)?,
        "linreg": fit,
    }))
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

pub fn analyze(args: AnalyzeArgs) -> Result<()> {
    if args.samples == 0 {
        return Err(config_err("--samples must be positive"));
    }
    if args.permutations < 100 {
        return Err(config_err("--permutations must be at least 100"));
    }
    let trained = load_checkpoint(&args.ckpt)?;
    let baseline = load_checkpoint(&args.baseline)?;
    let vocab = *trained.policy.vocab();
    if baseline.policy.vocab() != &vocab {
        return Err(config_err("trained and baseline checkpoints use different vocabularies"));
    }
    let sampler = args.sampler.build(ckpt_config(&trained).map(|c| c.sampler).unwrap_or_default())?;
    let entries = parse_corpus(&args.corpus, &vocab)?;
    if entries.is_empty() {
        return Err(Error::Parse { line: 1, column: 1, message: "corpus has no entries".into() });
    }

    let t = utterances(&trained.policy, "trained", &entries, &sampler, args.samples, args.seed, args.word_width)?;
    let b = utterances(&baseline.policy, "baseline", &entries, &sampler, args.samples, args.seed, args.word_width)?;
    let ratio = uur(&per_prompt_means(&t, args.samples), &per_prompt_means(&b, args.samples))?;

    fs::create_dir_all(&args.out)?;
    let mut csv = String::from("prompt_id,sample,model,length,uncertainty,max_word_uncertainty,error_rate,output\n");
    let mut jsonl = String::new();
    for u in t.iter().chain(&b) {
        let out = join_ids(&u.output);
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            u.prompt_id,
            u.sample,
            u.model,
            u.output.len(),
            u.uncertainty,
            u.max_word_uncertainty,
            fmt_opt(u.error_rate),
            out
        )
        .expect("writing to a String");
        let row = json!({
            "prompt_id": u.prompt_id,
            "sample": u.sample,
            "model": u.model,
            "output": u.output,
            "uncertainty": u.uncertainty,
            "max_word_uncertainty": u.max_word_uncertainty,
            "error_rate": u.error_rate,
        });
        writeln!(jsonl, "{row}").expect("writing to a String");
    }
    fs::write(args.out.join("utterances.csv"), csv)?;
    fs::write(args.out.join("utterances.jsonl"), jsonl)?;

    let mean = |us: &[Utterance]| us.iter().map(|u| u.uncertainty).sum::<f64>() / us.len() as f64;
    let summary = json!({
        "uur": ratio,
        "prompts": entries.len(),
        "samples_per_prompt": args.samples,
        "trained_mean_uncertainty": mean(&t),
        "baseline_mean_uncertainty": mean(&b),
        "trained_correlation": correlation(&t, args.permutations, args.seed)?,
        "baseline_correlation": correlation(&b, args.permutations, args.seed)?,
    });
    fs::write(args.out.join("summary.json"), serde_json::to_string_pretty(&summary).expect("json") + "\n")?;
    println!("{summary}");
    Ok(())
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Aligned model.
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    baseline: PathBuf,
    /// Only `noisy-copy` is available.
    #[arg(long, default_value = "noisy-copy")]
    task: String,
    #[arg(long)]
    eps: f64,
    #[arg(long, default_value_t = 0.9)]
    spread: f64,
    #[arg(long, default_value_t = 200)]
    n_prompts: usize,
    #[arg(long, default_value_t = 8)]
    prompt_len: usize,
    /// Seed of the prompt generator.
    #[arg(long, default_value_t = 2)]
    task_seed: u64,
    #[arg(long, default_value_t = 100_000)]
    id_offset: u32,
    #[arg(long, default_value_t = 20)]
    samples: u32,
    #[arg(long, default_value_t = 5)]
    seed: u64,
    #[command(flatten)]
    sampler: SamplerArgs,
    /// Write the full report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn bench(args: BenchArgs) -> Result<()> {
    if args.task != "noisy-copy" {
        return Err(config_err(format!("unknown task {:?}", args.task)));
    }
    let aligned = load_checkpoint(&args.ckpt)?;
    let baseline = load_checkpoint(&args.baseline)?;
    let vocab = *aligned.policy.vocab();
    let task = SyntheticTask::noisy_copy(
        vocab,
        args.n_prompts,
        args.prompt_len,
        args.eps,
        args.spread,
        args.task_seed,
        args.id_offset,
    )
    .map_err(|e| config_err(e.to_string()))?;
    if baseline.policy.init() != &RowInit::noisy_copy(&vocab, args.eps, args.spread)? {
        return Err(config_err(format!(
            "baseline reference does not match a noisy-copy reference with eps {} and spread {}",
            args.eps, args.spread
        )));
    }
    let sampler = args.sampler.build(ckpt_config(&aligned).map(|c| c.sampler).unwrap_or_default())?;
    let ra = run_hallucination_benchmark(&aligned.policy, &task, &sampler, args.samples, args.seed)?;
    let rb = run_hallucination_benchmark(&baseline.policy, &task, &sampler, args.samples, args.seed)?;
    let cmp = compare_reports(&ra, &rb)?;
    let max_len = baseline.policy.max_len();
    let expected = (0..task.len()).map(|i| task.expected_exact_match(i, max_len)).sum::<f64>() / task.len() as f64;
    let report = json!({
        "task": "noisy-copy",
        "eps": args.eps,
        "spread": args.spread,
        "comparison": cmp,
        "error_rate_ratio": ra.mean_error_rate / rb.mean_error_rate,
        "expected_baseline_exact_match": expected,
        "aligned": ra,
        "baseline": rb,
    });
    match &args.out {
        Some(path) => {
            fs::write(path, serde_json::to_string_pretty(&report).expect("json") + "\n")?;
            println!("{}", json!({ "comparison": report["comparison"], "error_rate_ratio": report["error_rate_ratio"] }));
        }
        None => println!("{report}"),
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct GenCorpusArgs {
    /// `noisy-copy` (prompts with copy targets) or `unconditional` (empty prompts).
    #[arg(long)]
    kind: String,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 16)]
    vocab: u32,
    #[arg(long, default_value_t = 8)]
    prompt_len: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn gen_corpus(args: GenCorpusArgs) -> Result<()> {
    let vocab = Vocabulary::new(args.vocab).map_err(|e| config_err(e.to_string()))?;
    let entries: Vec<CorpusEntry> = match args.kind.as_str() {
        "noisy-copy" => {
            // Prompt generation does not depend on the noise level.
            let task = SyntheticTask::noisy_copy(vocab, args.n, args.prompt_len, 0.0, 0.0, args.seed, 0)
                .map_err(|e| config_err(e.to_string()))?;
            task.prompts()
                .iter()
                .enumerate()
                .map(|(i, p)| CorpusEntry { prompt: p.clone(), target: Some(task.target(i).clone()) })
                .collect()
        }
        "unconditional" => (0..args.n)
            .map(|i| CorpusEntry { prompt: Prompt { id: i as u32, tokens: Vec::new() }, target: None })
            .collect(),
        other => return Err(config_err(format!("unknown corpus kind {other:?}"))),
    };
    let text = write_corpus(&entries, &vocab);
    match &args.out {
        Some(path) => fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

pub fn show_config(config: Option<PathBuf>, preset: &str) -> Result<()> {
    let cfg = ConfigArgs { config, preset: preset.to_string(), sets: Vec::new() }.resolve()?;
    println!("{}", cfg.to_json_pretty());
    Ok(())
}
