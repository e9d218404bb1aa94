//! Subcommands of the `promptseg` binary.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use promptseg_core::backbone::Backbone;
use promptseg_core::datasets::{
    affordance_subsets, build_phrasecut_plus, filter_unseen_classes, read_jsonl, synth_affordance_mapping,
    synth_dataset, synth_folds, vendored_hyponyms, write_jsonl, AffordanceMapping, ClassRemovalList, PascalSplits,
    SampleRecord, SynthConfig,
};
use promptseg_core::evalharness::{
    breakdown, build_episodes, eval_generalized, eval_one_shot, eval_referring, eval_zero_shot_multilabel,
    multilabel_images, run_ablation, AblationConfig, BreakdownKey, EpisodeKey, EvalConfig, OneShotMode, Threshold,
};
use promptseg_core::imaging::{load_mask, load_rgb};
use promptseg_core::model::SegmentationModel;
use promptseg_core::training::{load_data, run_experiment, BackboneChoice, DataSpec, ExperimentConfig, SyntheticData};
use promptseg_core::visual_prompts::{
    load_bench_samples, run_prompt_benchmark, BenchmarkConfig, PromptVariant, RecipeRegistry, DEFAULT_RECIPE,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::inference::{png_bytes, predict, Support, UserPrompt};
use crate::service::{serve, AppState, ServiceConfig};

/// A problem with how the command was invoked, found after parsing.
/// Reported like a clap usage error (exit code 2).
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Debug, Parser)]
#[command(name = "promptseg", version, about = "Segment images from text or example prompts")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a decoder from a YAML experiment file.
    Train(TrainArgs),
    /// Score a checkpoint with one of the evaluation protocols.
    Eval(EvalArgs),
    /// Segment one image.
    Predict(PredictArgs),
    /// Write a dataset index with supports and negatives added.
    BuildDataset(BuildArgs),
    /// Rank visual prompt recipes by how much they raise image-text alignment.
    PromptBench(BenchArgs),
    /// Run the HTTP inference service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the output directory of the config.
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub iterations: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Protocol {
    Referring,
    Zeroshot,
    Oneshot,
    Generalized,
    Ablation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Conditioning {
    Visual,
    Text,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_enum)]
    pub protocol: Protocol,
    #[arg(long, env = "PROMPTSEG_CHECKPOINT")]
    pub checkpoint: Option<PathBuf>,
    /// JSON-lines index; paths inside are relative to `--root` or the
    /// index's directory.
    #[arg(long, conflicts_with = "synthetic")]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub root: Option<PathBuf>,
    /// Evaluate on N generated shape images instead of `--data`.
    #[arg(long)]
    pub synthetic: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// A value on the decile grid, or "best".
    #[arg(long, default_value = "0.5")]
    pub threshold: String,
    #[arg(long)]
    pub image_size: Option<u32>,
    #[arg(long, default_value = "{}")]
    pub template: String,
    /// Unseen classes for zero-shot, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub unseen: Vec<String>,
    /// Generalized prompt mapping (JSON); built-in mapping otherwise.
    #[arg(long)]
    pub mapping: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Conditioning::Visual)]
    pub mode: Conditioning,
    #[arg(long, default_value = DEFAULT_RECIPE)]
    pub recipe: String,
    /// Pair one-shot episodes by category or by phrase.
    #[arg(long, default_value = "category")]
    pub episodes_by: String,
    /// Add a per-group breakdown to a referring report: size, template or class.
    #[arg(long)]
    pub breakdown: Option<String>,
    /// Ablation config (YAML) for `--protocol ablation`.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long, env = "PROMPTSEG_CHECKPOINT")]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long, required_unless_present = "support_image")]
    pub text: Option<String>,
    #[arg(long, requires = "support_mask")]
    pub support_image: Option<PathBuf>,
    #[arg(long, requires = "support_image")]
    pub support_mask: Option<PathBuf>,
    #[arg(long, default_value = DEFAULT_RECIPE)]
    pub recipe: String,
    /// Visual weight when both text and support are given.
    #[arg(long)]
    pub a: Option<f64>,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// Single-channel PNG, 0 or 255 per pixel.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the 16-bit probability map.
    #[arg(long)]
    pub prob_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    /// Records to extend.
    #[arg(long, conflicts_with = "synthetic", required_unless_present = "synthetic")]
    pub input: Option<PathBuf>,
    /// Generate N shape images instead of reading `--input`.
    #[arg(long)]
    pub synthetic: Option<usize>,
    /// Output directory; the index is written to `records.jsonl` inside it.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.2)]
    pub q_neg: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Drop phrases naming the zero-shot unseen classes or their hyponyms.
    #[arg(long)]
    pub remove_unseen: bool,
    /// Drop phrases naming these classes or their hyponyms.
    #[arg(long, value_delimiter = ',')]
    pub remove: Vec<String>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// JSON lines of {image, mask, target, distractors}.
    #[arg(long)]
    pub samples: PathBuf,
    /// "all", or comma separated recipe ids and expressions.
    #[arg(long, default_value = "all")]
    pub recipes: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Backbone preset; ignored when `--checkpoint` is given.
    #[arg(long, default_value = "vit-b16")]
    pub backbone: String,
    /// Take the backbone from this checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub input_size: Option<u32>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// YAML service config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub host: Option<String>,
    #[arg(long)]
    pub port: Option<u16>,
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict_cmd(a),
        Command::BuildDataset(a) => build_dataset(a),
        Command::PromptBench(a) => prompt_bench(a),
        Command::Serve(a) => serve_cmd(a),
    }
}

fn train(args: TrainArgs) -> anyhow::Result<()> {
    let mut cfg = ExperimentConfig::from_file(&args.config)?;
    if let Some(o) = args.output {
        cfg.output = o;
    }
    if let Some(n) = args.iterations {
        cfg.train.iterations = n;
    }
    cfg.validate()?;
    let out = run_experiment(&cfg)?;
    let last = out.outcome.losses.last().map(|p| p.loss);
    println!("checkpoint: {}", out.checkpoint.display());
    println!("losses:     {}", out.loss_csv.display());
    if let Some(l) = last {
        println!("final loss: {l:.5}");
    }
    Ok(())
}

fn write_json(path: &Path, value: &Value) -> anyhow::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| path.display().to_string())
}

fn eval_data(args: &EvalArgs) -> anyhow::Result<DataSpec> {
    match (&args.data, args.synthetic) {
        (Some(index), None) => Ok(DataSpec {
            index: Some(index.clone()),
            root: args.root.clone(),
            synthetic: None,
            q_neg: 0.0,
            build: false,
        }),
        (None, Some(n)) => Ok(DataSpec {
            index: None,
            root: None,
            synthetic: Some(SyntheticData {
                seed: args.seed,
                n,
                config: SynthConfig::default(),
            }),
            q_neg: 0.0,
            build: false,
        }),
        _ => Err(usage("one of --data or --synthetic is required")),
    }
}

fn categories(records: &[SampleRecord]) -> BTreeSet<String> {
    records.iter().filter_map(|r| r.category.clone()).collect()
}

fn eval(args: EvalArgs) -> anyhow::Result<()> {
    if args.protocol == Protocol::Ablation {
        let path = args.config.as_ref().ok_or_else(|| usage("--protocol ablation needs --config"))?;
        let text = std::fs::read_to_string(path).with_context(|| path.display().to_string())?;
        let cfg: AblationConfig = serde_yaml::from_str(&text)?;
        let table = run_ablation(&cfg)?;
        print!("{}", table.to_text());
        return write_json(&args.out, &json!({ "protocol": "ablation", "rows": table.rows }));
    }
    let ckpt = args
        .checkpoint
        .as_ref()
        .ok_or_else(|| usage("--checkpoint is required (or set PROMPTSEG_CHECKPOINT)"))?;
    let model = SegmentationModel::load(ckpt)?;
    let spec = eval_data(&args)?;
    let (records, store) = load_data(&spec)?;
    let cfg = EvalConfig {
        threshold: Threshold::from_str(&args.threshold).map_err(|e| usage(e.to_string()))?,
        image_size: Some(
            args.image_size
                .unwrap_or(model.backbone.config().native_size() as u32),
        ),
        template: args.template.clone(),
    };
    let synthetic = args.synthetic.is_some();
    let mut report = match args.protocol {
        Protocol::Referring => {
            let rep = eval_referring(&model, store.as_ref(), &records, &cfg)?;
            let mut v = serde_json::to_value(&rep)?;
            if let Some(key) = &args.breakdown {
                let key = BreakdownKey::from_str(key).map_err(|e| usage(e.to_string()))?;
                v["breakdown"] = serde_json::to_value(breakdown(&rep.samples, key))?;
            }
            v
        }
        Protocol::Zeroshot => {
            let classes: Vec<String> = categories(&records).into_iter().collect();
            let splits = PascalSplits::vendored();
            let unseen: BTreeSet<String> = if !args.unseen.is_empty() {
                args.unseen.iter().cloned().collect()
            } else if synthetic {
                synth_folds(&SynthConfig::default()).into_iter().next().unwrap_or_default().into_iter().collect()
            } else {
                splits.zero_shot_unseen.iter().cloned().collect()
            };
            if let Some(c) = unseen.iter().find(|c| !classes.contains(c)) {
                bail!("unseen class {c:?} does not occur in the data");
            }
            let names: BTreeMap<String, String> = classes
                .iter()
                .map(|c| (c.clone(), splits.display_name(c).to_string()))
                .collect();
            let images = multilabel_images(&records);
            serde_json::to_value(eval_zero_shot_multilabel(
                &model,
                store.as_ref(),
                &images,
                &classes,
                &unseen,
                &names,
                &cfg,
            )?)?
        }
        Protocol::Oneshot => {
            let by = match args.episodes_by.as_str() {
                "category" | "class" => EpisodeKey::Category,
                "phrase" => EpisodeKey::Phrase,
                other => return Err(usage(format!("--episodes-by {other:?}: expected category or phrase"))),
            };
            let episodes = build_episodes(&records, by, &mut ChaCha8Rng::seed_from_u64(args.seed));
            let mode = match args.mode {
                Conditioning::Visual => OneShotMode::Visual {
                    recipe: args.recipe.clone(),
                },
                Conditioning::Text => OneShotMode::Text,
            };
            serde_json::to_value(eval_one_shot(&model, store.as_ref(), &episodes, &mode, &cfg)?)?
        }
        Protocol::Generalized => {
            let mapping = match &args.mapping {
                Some(p) => AffordanceMapping::from_file(p)?,
                None if synthetic => synth_affordance_mapping(),
                None => AffordanceMapping::vendored(),
            };
            let subsets = affordance_subsets(&records, &mapping, &categories(&records))?;
            json!({ "rows": eval_generalized(&model, store.as_ref(), &subsets, &mapping, &cfg)? })
        }
        Protocol::Ablation => unreachable!("handled above"),
    };
    report["protocol"] = json!(format!("{:?}", args.protocol).to_lowercase());
    report["checkpoint"] = json!(ckpt.display().to_string());
    write_json(&args.out, &report)?;
    println!("{}", args.out.display());
    Ok(())
}

fn predict_cmd(args: PredictArgs) -> anyhow::Result<()> {
    if !(args.threshold > 0.0 && args.threshold < 1.0) {
        return Err(usage(format!("--threshold {} outside (0, 1)", args.threshold)));
    }
    if let Some(a) = args.a.filter(|a| !(0.0..=1.0).contains(a)) {
        return Err(usage(format!("--a {a} outside [0, 1]")));
    }
    let model = SegmentationModel::load(&args.checkpoint)?;
    let image = load_rgb(&args.image)?;
    let support = match (&args.support_image, &args.support_mask) {
        (Some(i), Some(m)) => Some(Support {
            image: load_rgb(i)?,
            mask: load_mask(m)?,
            recipe: RecipeRegistry::default().resolve(&args.recipe)?,
        }),
        _ => None,
    };
    let pred = predict(
        &model,
        &image,
        UserPrompt {
            text: args.text,
            support,
            a: args.a,
        },
        args.threshold,
    )?;
    std::fs::write(&args.out, png_bytes(&pred.mask)?).with_context(|| args.out.display().to_string())?;
    if let Some(p) = &args.prob_out {
        std::fs::write(p, png_bytes(&pred.quantized)?).with_context(|| p.display().to_string())?;
    }
    let fg = pred.mask.pixels().filter(|p| p[0] > 0).count();
    println!("{}: {fg} foreground pixels", args.out.display());
    Ok(())
}

/// Make record paths valid relative to `to` when they were relative to `from`.
fn rebase(records: &mut [SampleRecord], from: &Path, to: &Path) -> anyhow::Result<()> {
    let from = std::fs::canonicalize(from)?;
    let to = std::fs::canonicalize(to)?;
    if from == to {
        return Ok(());
    }
    let fix = |p: &mut PathBuf| {
        if p.is_relative() {
            *p = from.join(&*p);
        }
    };
    for r in records {
        fix(&mut r.image);
        fix(&mut r.mask);
        if let Some(s) = r.support_image.as_mut() {
            fix(s);
        }
        if let Some(s) = r.support_mask.as_mut() {
            fix(s);
        }
    }
    Ok(())
}

fn build_dataset(args: BuildArgs) -> anyhow::Result<()> {
    std::fs::create_dir_all(&args.out)?;
    let mut records = match (&args.input, args.synthetic) {
        (Some(input), _) => {
            let mut r = read_jsonl(input)?;
            let base = input.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
            rebase(&mut r, base, &args.out)?;
            r
        }
        (None, Some(n)) => {
            let d = synth_dataset(args.seed, n, &SynthConfig::default())?;
            d.store.write_to_dir(&args.out)?;
            d.records
        }
        (None, None) => return Err(usage("one of --input or --synthetic is required")),
    };
    let before = records.len();
    let mut seeds = args.remove.clone();
    if args.remove_unseen {
        seeds.extend(PascalSplits::vendored().zero_shot_unseen);
    }
    if !seeds.is_empty() {
        let removal = if args.remove_unseen {
            ClassRemovalList::pascal(&seeds)
        } else {
            ClassRemovalList::new(&seeds, &vendored_hyponyms())
        };
        records = filter_unseen_classes(&records, &removal);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let built = build_phrasecut_plus(&records, args.q_neg, &mut rng)?;
    let index = args.out.join("records.jsonl");
    write_jsonl(&index, &built)?;
    let negatives = built.iter().filter(|r| r.negative).count();
    let supported = built.iter().filter(|r| r.has_support()).count();
    println!(
        "{}: {} records ({} removed), {negatives} negatives, {supported} with support",
        index.display(),
        built.len(),
        before - records.len()
    );
    Ok(())
}

fn prompt_bench(args: BenchArgs) -> anyhow::Result<()> {
    let backbone = match &args.checkpoint {
        Some(ckpt) => {
            let m = SegmentationModel::load(ckpt)?;
            std::sync::Arc::try_unwrap(m.backbone).map_err(|_| anyhow::anyhow!("backbone is shared"))?
        }
        None => Backbone::new(
            BackboneChoice::Preset {
                preset: args.backbone.clone(),
                seed: 0,
            }
            .resolve()?,
        )?,
    };
    let registry = RecipeRegistry::default();
    let variants: Vec<PromptVariant> = if args.recipes.trim() == "all" {
        let mut v: Vec<PromptVariant> = registry.all().cloned().map(PromptVariant::Recipe).collect();
        v.extend(PromptVariant::attention_variants(backbone.config().vision_layers));
        v
    } else {
        args.recipes
            .split(',')
            .map(|r| registry.resolve(r.trim()).map(PromptVariant::Recipe))
            .collect::<Result<_, _>>()?
    };
    let samples = load_bench_samples(&args.samples)?;
    let cfg = BenchmarkConfig {
        input_size: args.input_size,
        ..BenchmarkConfig::default()
    };
    let table = run_prompt_benchmark(&backbone, &samples, &variants, &cfg)?;
    std::fs::write(&args.out, table.to_csv()).with_context(|| args.out.display().to_string())?;
    print!("{}", table.to_pretty());
    Ok(())
}

fn serve_cmd(args: ServeArgs) -> anyhow::Result<()> {
    let mut cfg = match &args.config {
        Some(p) => ServiceConfig::from_file(p)?,
        None => ServiceConfig::default(),
    }
    .with_env()?;
    if let Some(c) = args.checkpoint {
        cfg.checkpoint = Some(c);
    }
    if let Some(h) = args.host {
        cfg.host = h;
    }
    if let Some(p) = args.port {
        cfg.port = p;
    }
    let state = AppState::load(cfg)?;
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?
        .block_on(serve(state))
}
