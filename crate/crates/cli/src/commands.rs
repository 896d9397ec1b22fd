use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use log::info;
use mmdial::data::{CorpusSplits, DialogueSample, OracleResponder, Split, SyntheticSpec, SyntheticWorld, Vocabulary, WORLD_FILE};
use mmdial::metrics::EvalReport;
use mmdial::model::DropoutGranularity;
use mmdial::parallel::Exec;
use mmdial::train::{
    self, peek_precision, Checkpoint, HistoryMode, Precision, TrainConfig, Trainer, BEST_CHECKPOINT, PNET_GRID,
};
use mmdial::{ModelConfig, Scalar};
use serde::{Deserialize, Serialize};

use crate::{
    AblateHistoryArgs, AblatePnetArgs, EvalArgs, GenDataArgs, GenerateArgs, GradcheckArgs, GranularityArg,
    HistoryArg, TrainArgs, TrainOpts,
};

/// Overlays `top` onto `base`, table by table.
fn merge(base: &mut toml::Value, top: toml::Value) {
    match (base, top) {
        (toml::Value::Table(b), toml::Value::Table(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, t) => *b = t,
    }
}

fn layered<T: Serialize + for<'de> Deserialize<'de>>(base: T, file: Option<&Path>) -> Result<T> {
    let Some(path) = file else { return Ok(base) };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let top: toml::Value = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let mut value = toml::Value::try_from(base)?;
    merge(&mut value, top);
    Ok(value.try_into().with_context(|| format!("invalid settings in {}", path.display()))?)
}

/// Builds the training config: profile, then config file, then flags.
fn train_config(opts: &TrainOpts, base: Option<TrainConfig>) -> Result<TrainConfig> {
    let base = base.unwrap_or_else(|| {
        if opts.paper_scale {
            TrainConfig::paper_scale()
        } else {
            TrainConfig::default()
        }
    });
    let mut c = layered(base, opts.config.as_deref())?;
    let m = &mut c.model;
    macro_rules! set {
        ($flag:expr, $field:expr) => {
            if let Some(v) = $flag {
                $field = v;
            }
        };
    }
    set!(opts.epochs, c.epochs);
    set!(opts.lr, c.lr);
    set!(opts.batch_size, c.batch_size);
    set!(opts.seed, c.seed);
    set!(opts.warmup_steps, c.warmup_steps);
    set!(opts.p_net, m.p_net);
    set!(opts.d_model, m.d_model);
    set!(opts.n_heads, m.n_heads);
    set!(opts.d_ff, m.d_ff);
    set!(opts.n_layers, m.n_layers);
    set!(opts.context_size, m.context_size);
    if opts.untied_output {
        m.tie_output = false;
    }
    if let Some(g) = opts.dropout_granularity {
        m.dropout_granularity = match g {
            GranularityArg::Step => DropoutGranularity::Step,
            GranularityArg::Example => DropoutGranularity::Example,
        };
    }
    if let Some(h) = opts.history_mode {
        c.history_mode = match h {
            HistoryArg::Trained => HistoryMode::Trained,
            HistoryArg::Fixed => HistoryMode::Fixed,
        };
    }
    if let Some(bits) = opts.precision {
        c.precision = Precision::try_from(bits)?;
    }
    if opts.target_bleu4.is_some() {
        c.target_bleu4 = opts.target_bleu4;
    }
    if opts.eval_samples.is_some() {
        c.eval_samples = opts.eval_samples;
    }
    if opts.sequential {
        c.exec = Exec::Sequential;
    }
    Ok(c)
}

fn load_world(data: &Path) -> Result<Option<SyntheticWorld>> {
    let path = data.join(WORLD_FILE);
    if !path.exists() {
        return Ok(None);
    }
    Ok(Some(SyntheticWorld::load(&path).with_context(|| format!("reading {}", path.display()))?))
}

/// Sizes the model's vocabulary and image width to the corpus.
fn fit_to_world(c: &mut ModelConfig, world: Option<&SyntheticWorld>) {
    if let Some(w) = world {
        if c.vocab_size != w.vocab.len() || c.d_img != w.spec.d_img {
            info!(
                "sizing model to the corpus: vocab {} -> {}, d_img {} -> {}",
                c.vocab_size,
                w.vocab.len(),
                c.d_img,
                w.spec.d_img
            );
        }
        c.vocab_size = w.vocab.len();
        c.d_img = w.spec.d_img;
    }
}

fn load_splits(data: &Path) -> Result<CorpusSplits> {
    CorpusSplits::load_dir(data).with_context(|| format!("loading corpus from {}", data.display()))
}

fn parse_split(s: &str) -> Result<Split> {
    s.parse::<Split>().map_err(|e| anyhow::anyhow!("{e}"))
}

pub fn gen_data(a: GenDataArgs) -> Result<ExitCode> {
    let mut spec = layered(SyntheticSpec::default(), a.config.as_deref())?;
    if let Some(v) = a.seed {
        spec.seed = v;
    }
    if let Some(v) = a.vocab_size {
        spec.vocab_size = v;
    }
    if let Some(v) = a.d_img {
        spec.d_img = v;
    }
    if let Some(v) = a.n_attributes {
        spec.n_attributes = v;
    }
    if let Some(v) = a.n_keywords {
        spec.n_keywords = v;
    }
    if let Some(v) = a.image_noise {
        spec.image_noise = v;
    }
    let world = SyntheticWorld::new(spec)?;
    let splits = world.generate(a.samples)?;
    splits.save_dir(&a.out)?;
    world.save(a.out.join(WORLD_FILE))?;
    println!(
        "wrote {} train / {} valid / {} test samples to {}",
        splits.train.len(),
        splits.valid.len(),
        splits.test.len(),
        a.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

pub fn train(a: TrainArgs) -> Result<ExitCode> {
    let splits = load_splits(&a.data)?;
    let world = load_world(&a.data)?;
    let resume = a.resume.as_deref().map(|p| -> Result<_> {
        let bits = peek_precision(p)?;
        Ok((p.to_path_buf(), bits))
    });
    let resume = resume.transpose()?;
    let base = match &resume {
        Some((p, Precision::F64)) => Some(Checkpoint::<f64>::load(p)?.meta.config),
        Some((p, Precision::F32)) => Some(Checkpoint::<f32>::load(p)?.meta.config),
        None => None,
    };
    let mut config = train_config(&a.opts, base)?;
    if resume.is_none() {
        fit_to_world(&mut config.model, world.as_ref());
    }
    match config.precision {
        Precision::F32 => train_typed::<f32>(config, &splits, world, &a.out, resume.map(|r| r.0)),
        Precision::F64 => train_typed::<f64>(config, &splits, world, &a.out, resume.map(|r| r.0)),
    }
}

fn train_typed<T: Scalar>(
    config: TrainConfig,
    splits: &CorpusSplits,
    world: Option<SyntheticWorld>,
    out: &Path,
    resume: Option<PathBuf>,
) -> Result<ExitCode> {
    let mut trainer = match resume {
        Some(path) => {
            let mut ckpt = Checkpoint::<T>::load(&path)?;
            ckpt.meta.config = config;
            info!("resuming from {} at epoch {}", path.display(), ckpt.meta.epoch);
            Trainer::from_checkpoint(ckpt)?
        }
        None => {
            let t = Trainer::<T>::new(config)?;
            match world {
                Some(w) => t.with_vocab(w.vocab),
                None => t,
            }
        }
    };
    fs::create_dir_all(out)?;
    fs::write(out.join("config.toml"), toml::to_string(trainer.config())?)?;
    info!(
        "training {} parameters on {} samples",
        trainer.model().params().numel(),
        splits.train.len()
    );
    let start = Instant::now();
    let report = trainer.fit(splits, Some(out))?;
    let counts = trainer.branch_counts();
    info!(
        "finished in {:.1}s; fusion branches text/image/mean = {}/{}/{}",
        start.elapsed().as_secs_f64(),
        counts.text,
        counts.image,
        counts.mean
    );
    if let Some(reason) = report.halted {
        eprintln!("training halted: {reason}; last good state saved");
        return Ok(ExitCode::FAILURE);
    }
    trainer.restore_best();
    if !splits.test.is_empty() {
        println!("test split, best validation checkpoint:");
        println!("{}", trainer.evaluate(&splits.test)?);
    }
    println!("checkpoint: {}", out.join(BEST_CHECKPOINT).display());
    Ok(ExitCode::SUCCESS)
}

/// One line of a responses file.
#[derive(Debug, Serialize, Deserialize)]
struct ResponseLine {
    id: u64,
    tokens: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text: Option<String>,
}

fn with_precision<R>(path: &Path, f64_fn: impl FnOnce(Trainer<f64>) -> Result<R>, f32_fn: impl FnOnce(Trainer<f32>) -> Result<R>) -> Result<R> {
    match peek_precision(path)? {
        Precision::F64 => f64_fn(Trainer::load(path)?),
        Precision::F32 => f32_fn(Trainer::load(path)?),
    }
}

fn sequential<T: Scalar>(mut t: Trainer<T>, yes: bool) -> Result<Trainer<T>> {
    if yes {
        let mut ckpt = t.to_checkpoint();
        ckpt.meta.config.exec = Exec::Sequential;
        t = Trainer::from_checkpoint(ckpt)?;
    }
    Ok(t)
}

pub fn eval(a: EvalArgs) -> Result<ExitCode> {
    let splits = load_splits(&a.data)?;
    let samples = splits.get(parse_split(&a.split)?);
    let report = match (&a.checkpoint, &a.responses) {
        (Some(ckpt), _) => with_precision(
            ckpt,
            |t| Ok(sequential(t, a.sequential)?.evaluate(samples)?),
            |t| Ok(sequential(t, a.sequential)?.evaluate(samples)?),
        )?,
        (None, Some(path)) => score_responses(path, samples)?,
        (None, None) => bail!("either --checkpoint or --responses is required"),
    };
    println!("{report}");
    Ok(ExitCode::SUCCESS)
}

fn score_responses(path: &Path, samples: &[DialogueSample]) -> Result<EvalReport> {
    let mut by_id: HashMap<u64, Vec<u32>> = HashMap::new();
    let reader = BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?);
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: ResponseLine =
            serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?;
        by_id.insert(r.id, r.tokens);
    }
    let mut hyps = Vec::with_capacity(samples.len());
    for s in samples {
        match by_id.remove(&s.id) {
            Some(t) => hyps.push(t),
            None => bail!("no response for sample {}", s.id),
        }
    }
    let refs: Vec<Vec<u32>> = samples.iter().map(|s| s.response.clone()).collect();
    Ok(EvalReport::compute(&hyps, &refs)?)
}

pub fn generate(a: GenerateArgs) -> Result<ExitCode> {
    let splits = load_splits(&a.data)?;
    let samples = splits.get(parse_split(&a.split)?);
    let world = load_world(&a.data)?;
    let (responses, vocab): (Vec<Vec<u32>>, Option<Vocabulary>) = if a.oracle {
        let Some(world) = world else {
            bail!("--oracle needs the generator world ({WORLD_FILE}) in the data directory");
        };
        let oracle = OracleResponder::new(&world);
        (samples.iter().map(|s| oracle.respond(s)).collect(), Some(world.vocab.clone()))
    } else {
        let ckpt = a.checkpoint.as_deref().expect("clap enforces one source");
        let fallback = world.map(|w| w.vocab);
        with_precision(
            ckpt,
            |t| {
                let t = sequential(t, a.sequential)?;
                Ok((t.generate(samples)?, t.vocab().cloned().or(fallback.clone())))
            },
            |t| {
                let t = sequential(t, a.sequential)?;
                Ok((t.generate(samples)?, t.vocab().cloned().or(fallback.clone())))
            },
        )?
    };
    let mut w = BufWriter::new(File::create(&a.out)?);
    for (s, tokens) in samples.iter().zip(responses) {
        let text = vocab.as_ref().map(|v| v.decode(&tokens));
        serde_json::to_writer(&mut w, &ResponseLine { id: s.id, tokens, text })?;
        writeln!(w)?;
    }
    w.flush()?;
    println!("wrote {} responses to {}", samples.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

pub fn gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let start = Instant::now();
    let report = train::grad_check(&ModelConfig::tiny(), a.seed)?;
    println!("{report}");
    println!("elapsed {:.1}s", start.elapsed().as_secs_f64());
    Ok(if report.passed() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn ablation_setup(opts: &TrainOpts, data: &Path) -> Result<(TrainConfig, CorpusSplits)> {
    let splits = load_splits(data)?;
    let world = load_world(data)?;
    let mut config = train_config(opts, None)?;
    fit_to_world(&mut config.model, world.as_ref());
    Ok((config, splits))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    println!("{text}");
    if let Some(p) = out {
        fs::write(p, format!("{text}\n"))?;
    }
    Ok(())
}

pub fn ablate_pnet(a: AblatePnetArgs) -> Result<ExitCode> {
    let (config, splits) = ablation_setup(&a.opts, &a.data)?;
    let grid = a.grid.unwrap_or_else(|| PNET_GRID.to_vec());
    let table = train::ablate_pnet(&config, &splits, &grid, &a.seeds)?;
    let best = table.best().map_or(f64::NAN, |r| r.p_net);
    let verdict = if table.full_dropout_uniquely_best() {
        "p_net = 1.0 is the unique best rate"
    } else if table.interior_at_least_endpoints() {
        "an interior rate matches or beats both endpoints"
    } else {
        "no interior rate matches both endpoints"
    };
    emit(
        a.out.as_deref(),
        &format!("test BLEU-4 by modality dropout rate\n{table}\nbest median at p_net = {best:.1}; {verdict}"),
    )?;
    Ok(ExitCode::SUCCESS)
}

pub fn ablate_history(a: AblateHistoryArgs) -> Result<ExitCode> {
    let (config, splits) = ablation_setup(&a.opts, &a.data)?;
    let table = train::ablate_history(&config, &splits, &a.seeds)?;
    emit(a.out.as_deref(), &format!("test BLEU-4, trained vs fixed initial history\n{table}"))?;
    Ok(ExitCode::SUCCESS)
}
