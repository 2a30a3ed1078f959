//! `harmnet` — command-line front end for the harmonic convolution
//! toolkit: basis inspection, cost accounting, model conversion and
//! compression, toy-scale training, and block benchmarks.
//!
//! Exit codes: 0 success, 2 usage or invalid request, 3 unreadable or
//! malformed data, 4 numerical failure.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use serde_json::json;

use harmnet_core::bench::{aggregate_ratio, run_bench, wrn_16_8_catalog};
use harmnet_core::compress::{account, plan, FirstLayerRule, Strategy};
use harmnet_core::convert::convert_model;
use harmnet_core::data::{synth_shapes, AugmentConfig, ShapesConfig};
use harmnet_core::dct::{make_basis, BasisNorm, ShiftSpec, SpectrumSelection};
use harmnet_core::model::{preset_with, ModelSpec, PresetOptions};
use harmnet_core::modelfile::{load_model, read_manifest, save_model};
use harmnet_core::nn::{apply_plan, evaluate, train, Model, TrainConfig};
use harmnet_core::rng::SeedRng;
use harmnet_core::{Dtype, Error, Result, Scalar};

#[derive(Parser)]
#[command(name = "harmnet", version, about = "Harmonic convolution toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Seed for anything stochastic (initialization, data, timing inputs).
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,
    /// Element type for new models (files carry their own).
    #[arg(long, global = true, value_enum, default_value_t = DtypeArg::F32)]
    dtype: DtypeArg,
    /// Write the primary output here instead of stdout (model files
    /// always need this).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// JSON file of defaults for the subcommand's own options; explicit
    /// flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum DtypeArg {
    F32,
    F64,
}

#[derive(Subcommand)]
enum Command {
    /// Print a filter bank as JSON.
    Basis(BasisArgs),
    /// Check the sine/cosine transform shift identity for (n, k, z).
    ShiftCheck(ShiftArgs),
    /// Parameter and MAC accounting for an architecture.
    Account(AccountArgs),
    /// Rewrite a saved model's convolutions as harmonic blocks.
    Convert(ConvertArgs),
    /// Drop frequencies from a saved harmonic model.
    Compress(CompressArgs),
    /// Train a preset on the synthetic shapes set.
    Train(TrainArgs),
    /// Score a saved model on the synthetic shapes set.
    Eval(EvalArgs),
    /// Time the two block formulations over a layer catalog.
    Bench(BenchArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                "invalid" | "shape" => 2u8,
                "io" | "format" => 3,
                "numeric" => 4,
                _ => 1,
            })
        }
    }
}

/// Fill a subcommand's unset options from the `--config` JSON file.
fn merge_config<A: for<'de> Deserialize<'de>>(
    path: &Option<PathBuf>,
    merge: impl FnOnce(A),
) -> Result<()> {
    if let Some(path) = path {
        let text = fs::read_to_string(path)?;
        let parsed: A = serde_json::from_str(&text)
            .map_err(|e| Error::invalid(format!("config file does not parse: {e}")))?;
        merge(parsed);
    }
    Ok(())
}

/// Like [`merge_config`], for subcommands that also take strategy options.
///
/// The config file stays flat: strategy keys sit next to the subcommand's own
/// keys. serde cannot reject unknown keys through a `flatten` field, so the
/// map is split by hand and each half is deserialized strictly.
fn merge_config_with_strategy<A: for<'de> Deserialize<'de>>(
    path: &Option<PathBuf>,
    merge: impl FnOnce(A, StrategyArgs),
) -> Result<()> {
    const STRATEGY_KEYS: [&str; 7] = [
        "strategy",
        "lambda",
        "alpha",
        "t",
        "threshold",
        "first",
        "overrides",
    ];
    if let Some(path) = path {
        let text = fs::read_to_string(path)?;
        let bad = |e: serde_json::Error| Error::invalid(format!("config file does not parse: {e}"));
        let mut map: serde_json::Map<String, serde_json::Value> =
            serde_json::from_str(&text).map_err(bad)?;
        let mut strategy = serde_json::Map::new();
        for key in STRATEGY_KEYS {
            if let Some(value) = map.remove(key) {
                strategy.insert(key.to_owned(), value);
            }
        }
        let own: A = serde_json::from_value(serde_json::Value::Object(map)).map_err(bad)?;
        let strategy: StrategyArgs =
            serde_json::from_value(serde_json::Value::Object(strategy)).map_err(bad)?;
        merge(own, strategy);
    }
    Ok(())
}

fn emit(out: &Option<PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(path) => fs::write(path, text).map_err(Into::into),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Basis(mut a) => {
            merge_config(&cli.config, |c: BasisArgs| a.fill(c))?;
            cmd_basis(a, &cli.out)
        }
        Command::ShiftCheck(mut a) => {
            merge_config(&cli.config, |c: ShiftArgs| a.fill(c))?;
            cmd_shift(a, cli.seed, &cli.out)
        }
        Command::Account(mut a) => {
            merge_config_with_strategy(&cli.config, |c: AccountArgs, s| {
                a.fill(c);
                a.strategy.fill(s);
            })?;
            cmd_account(a, &cli.out)
        }
        Command::Convert(mut a) => {
            merge_config_with_strategy(&cli.config, |c: ConvertArgs, s| {
                a.fill(c);
                a.strategy.fill(s);
            })?;
            cmd_convert(a, &cli.out)
        }
        Command::Compress(mut a) => {
            merge_config_with_strategy(&cli.config, |c: CompressArgs, s| {
                a.fill(c);
                a.strategy.fill(s);
            })?;
            cmd_compress(a, &cli.out)
        }
        Command::Train(mut a) => {
            merge_config(&cli.config, |c: TrainArgs| a.fill(c))?;
            match cli.dtype {
                DtypeArg::F32 => cmd_train::<f32>(a, cli.seed, &cli.out),
                DtypeArg::F64 => cmd_train::<f64>(a, cli.seed, &cli.out),
            }
        }
        Command::Eval(mut a) => {
            merge_config(&cli.config, |c: EvalArgs| a.fill(c))?;
            cmd_eval(a, cli.seed, &cli.out)
        }
        Command::Bench(mut a) => {
            merge_config(&cli.config, |c: BenchArgs| a.fill(c))?;
            cmd_bench(a, cli.seed, &cli.out)
        }
    }
}

// ---------------------------------------------------------------------------
// basis
// ---------------------------------------------------------------------------

#[derive(Args, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct BasisArgs {
    /// Kernel size K.
    #[arg(long)]
    size: Option<usize>,
    /// orthonormal | l1
    #[arg(long)]
    norm: Option<String>,
    /// Restrict to the first lambda diagonals.
    #[arg(long)]
    lambda: Option<usize>,
}

impl BasisArgs {
    fn fill(&mut self, c: BasisArgs) {
        self.size = self.size.take().or(c.size);
        self.norm = self.norm.take().or(c.norm);
        self.lambda = self.lambda.take().or(c.lambda);
    }
}

fn parse_norm(s: Option<&str>) -> Result<BasisNorm> {
    match s.unwrap_or("orthonormal") {
        "orthonormal" => Ok(BasisNorm::Orthonormal),
        "l1" => Ok(BasisNorm::L1),
        other => Err(Error::invalid(format!(
            "unknown normalization {other:?} (use orthonormal or l1)"
        ))),
    }
}

fn cmd_basis(a: BasisArgs, out: &Option<PathBuf>) -> Result<()> {
    let k = a
        .size
        .ok_or_else(|| Error::invalid("basis needs --size"))?;
    let norm = parse_norm(a.norm.as_deref())?;
    let basis = make_basis(k, norm)?;
    let selection = match a.lambda {
        Some(l) => SpectrumSelection::from_lambda(k, l)?,
        None => SpectrumSelection::full(k)?,
    };
    let filters: Vec<_> = selection
        .pairs()
        .iter()
        .map(|&(u, v)| {
            json!({
                "u": u,
                "v": v,
                "l1_norm": basis.l1_norm(u, v),
                "values": basis.filter(u, v),
            })
        })
        .collect();
    let rows: Vec<_> = (0..k).map(|u| basis.row(u).to_vec()).collect();
    let doc = json!({
        "k": k,
        "norm": match norm { BasisNorm::Orthonormal => "orthonormal", BasisNorm::L1 => "l1" },
        "pairs": selection.pairs(),
        "rows": rows,
        "filters": filters,
    });
    emit(out, &serde_json::to_string_pretty(&doc).unwrap())
}

// ---------------------------------------------------------------------------
// shift-check
// ---------------------------------------------------------------------------

#[derive(Args, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct ShiftArgs {
    /// Window length n.
    #[arg(long)]
    n: Option<usize>,
    /// Frequency index k.
    #[arg(long)]
    k: Option<usize>,
    /// Shift multiplier z (delta = n(1+4z)/(2k)).
    #[arg(long)]
    z: Option<usize>,
}

impl ShiftArgs {
    fn fill(&mut self, c: ShiftArgs) {
        self.n = self.n.take().or(c.n);
        self.k = self.k.take().or(c.k);
        self.z = self.z.take().or(c.z);
    }
}

fn cmd_shift(a: ShiftArgs, seed: u64, out: &Option<PathBuf>) -> Result<()> {
    let (n, k) = match (a.n, a.k) {
        (Some(n), Some(k)) => (n, k),
        _ => return Err(Error::invalid("shift-check needs --n and --k")),
    };
    let spec = ShiftSpec::new(n, k, a.z.unwrap_or(0))?;
    let delta = spec.delta().ok_or_else(|| {
        Error::invalid(format!(
            "delta = {n}(1+4z)/(2k) is not an integer for n={n} k={k} z={}",
            spec.z
        ))
    })?;
    let mut rng = SeedRng::new(seed);
    let signal = harmnet_core::dct::parity_matched_signal(spec, n + delta, &mut rng);
    let check = harmnet_core::dct::verify_shift_equivalence(&signal, spec)?;
    let doc = json!({
        "n": n,
        "k": k,
        "z": spec.z,
        "delta": check.delta,
        "sine_value": check.sine_value,
        "shifted_cosine_value": check.shifted_cosine_value,
        "residual": check.residual,
    });
    emit(out, &serde_json::to_string_pretty(&doc).unwrap())
}

// ---------------------------------------------------------------------------
// strategy options (shared by account / convert / compress)
// ---------------------------------------------------------------------------

#[derive(Args, Deserialize, Default, Clone)]
#[serde(deny_unknown_fields)]
struct StrategyArgs {
    /// uniform | progressive | adaptive
    #[arg(long)]
    strategy: Option<String>,
    /// Level for uniform truncation.
    #[arg(long)]
    lambda: Option<usize>,
    /// Floor level for progressive truncation (1 or 2).
    #[arg(long)]
    alpha: Option<usize>,
    /// Budget for progressive truncation (level ~ t / depth).
    #[arg(long)]
    t: Option<f64>,
    /// Energy-share cutoff for adaptive truncation, in (0, 1).
    #[arg(long)]
    threshold: Option<f64>,
    /// First-layer rule: exempt | same | +<d>
    #[arg(long)]
    first: Option<String>,
    /// Per-resolution overrides for progressive, e.g. "32=5,16=3".
    #[arg(long)]
    overrides: Option<String>,
}

impl StrategyArgs {
    fn fill(&mut self, c: StrategyArgs) {
        self.strategy = self.strategy.take().or(c.strategy);
        self.lambda = self.lambda.take().or(c.lambda);
        self.alpha = self.alpha.take().or(c.alpha);
        self.t = self.t.take().or(c.t);
        self.threshold = self.threshold.take().or(c.threshold);
        self.first = self.first.take().or(c.first);
        self.overrides = self.overrides.take().or(c.overrides);
    }

    fn first_rule(&self) -> Result<FirstLayerRule> {
        match self.first.as_deref() {
            None | Some("exempt") => Ok(FirstLayerRule::Exempt),
            Some("same") => Ok(FirstLayerRule::Same),
            Some(s) => match s.strip_prefix('+').and_then(|d| d.parse().ok()) {
                Some(d) => Ok(FirstLayerRule::LambdaPlus(d)),
                None => Err(Error::invalid(format!(
                    "unknown first-layer rule {s:?} (use exempt, same, or +<d>)"
                ))),
            },
        }
    }

    fn build(&self) -> Result<Option<(Strategy, FirstLayerRule)>> {
        let strategy = match self.strategy.as_deref() {
            None => return Ok(None),
            Some("uniform") => Strategy::Uniform {
                lambda: self
                    .lambda
                    .ok_or_else(|| Error::invalid("uniform needs --lambda"))?,
            },
            Some("progressive") => Strategy::Progressive {
                alpha: self
                    .alpha
                    .ok_or_else(|| Error::invalid("progressive needs --alpha"))?,
                t: self
                    .t
                    .ok_or_else(|| Error::invalid("progressive needs --t"))?,
                overrides: parse_overrides(self.overrides.as_deref())?,
            },
            Some("adaptive") => Strategy::Adaptive {
                threshold: self
                    .threshold
                    .ok_or_else(|| Error::invalid("adaptive needs --threshold"))?,
            },
            Some(other) => {
                return Err(Error::invalid(format!(
                    "unknown strategy {other:?} (use uniform, progressive, or adaptive)"
                )))
            }
        };
        Ok(Some((strategy, self.first_rule()?)))
    }
}

fn parse_overrides(s: Option<&str>) -> Result<Vec<(usize, usize)>> {
    let Some(s) = s else { return Ok(Vec::new()) };
    s.split(',')
        .filter(|part| !part.is_empty())
        .map(|part| {
            let (res, lam) = part
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("override {part:?} is not RES=LAMBDA")))?;
            let parse = |x: &str| {
                x.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::invalid(format!("override {part:?} is not numeric")))
            };
            Ok((parse(res)?, parse(lam)?))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// account
// ---------------------------------------------------------------------------

#[derive(Args, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct AccountArgs {
    /// Architecture preset name (e.g. wrn-28-10, harm-net4, cnn3).
    #[arg(long)]
    arch: Option<String>,
    /// Penultimate stage width for the block presets.
    #[arg(long)]
    fc_width: Option<usize>,
    /// Input channels override.
    #[arg(long)]
    in_channels: Option<usize>,
    /// Class count override.
    #[arg(long)]
    classes: Option<usize>,
    /// Input spatial size override.
    #[arg(long)]
    input_hw: Option<usize>,
    /// table | json
    #[arg(long)]
    format: Option<String>,
    #[command(flatten)]
    #[serde(skip)]
    strategy: StrategyArgs,
}

impl AccountArgs {
    fn fill(&mut self, c: AccountArgs) {
        self.arch = self.arch.take().or(c.arch);
        self.fc_width = self.fc_width.take().or(c.fc_width);
        self.in_channels = self.in_channels.take().or(c.in_channels);
        self.classes = self.classes.take().or(c.classes);
        self.input_hw = self.input_hw.take().or(c.input_hw);
        self.format = self.format.take().or(c.format);
        self.strategy.fill(c.strategy);
    }

    fn spec(&self) -> Result<ModelSpec> {
        let name = self
            .arch
            .as_deref()
            .ok_or_else(|| Error::invalid("account needs --arch"))?;
        preset_with(
            name,
            &PresetOptions {
                in_channels: self.in_channels,
                classes: self.classes,
                fc_width: self.fc_width,
                input_hw: self.input_hw,
            },
        )
    }
}

fn cmd_account(a: AccountArgs, out: &Option<PathBuf>) -> Result<()> {
    let spec = a.spec()?;
    let planned = match a.strategy.build()? {
        Some((strategy, first)) => {
            if matches!(strategy, Strategy::Adaptive { .. }) {
                return Err(Error::invalid(
                    "adaptive planning needs trained weights; account works on shapes only",
                ));
            }
            Some(plan(&spec, &strategy, first, None)?)
        }
        None => None,
    };
    let report = account(&spec, planned.as_ref())?;
    let text = match a.format.as_deref().unwrap_or("table") {
        "table" => report.render_table(),
        "json" => serde_json::to_string_pretty(&report).unwrap(),
        other => return Err(Error::invalid(format!("unknown format {other:?}"))),
    };
    emit(out, &text)
}

// ---------------------------------------------------------------------------
// convert / compress
// ---------------------------------------------------------------------------

#[derive(Args, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct ConvertArgs {
    /// Source model container.
    #[arg(long)]
    model: Option<PathBuf>,
    #[command(flatten)]
    #[serde(skip)]
    strategy: StrategyArgs,
}

impl ConvertArgs {
    fn fill(&mut self, c: ConvertArgs) {
        self.model = self.model.take().or(c.model);
        self.strategy.fill(c.strategy);
    }
}

/// Read a container's element type so the typed path can be chosen.
fn file_dtype(path: &PathBuf) -> Result<Dtype> {
    let bytes = fs::read(path)?;
    let manifest = read_manifest(&bytes)?;
    match manifest.tensors.first() {
        Some(t) => Dtype::from_name(&t.dtype),
        None => Ok(Dtype::F32),
    }
}

fn cmd_convert(a: ConvertArgs, out: &Option<PathBuf>) -> Result<()> {
    let model_path = a
        .model
        .clone()
        .ok_or_else(|| Error::invalid("convert needs --model"))?;
    let out_path = out
        .clone()
        .ok_or_else(|| Error::invalid("convert needs --out for the converted model"))?;
    match file_dtype(&model_path)? {
        Dtype::F32 => convert_typed::<f32>(&a, &model_path, &out_path),
        Dtype::F64 => convert_typed::<f64>(&a, &model_path, &out_path),
    }
}

fn convert_typed<T: Scalar>(a: &ConvertArgs, path: &PathBuf, out_path: &PathBuf) -> Result<()> {
    let source: Model<T> = load_model(path)?;
    let built = a.strategy.build()?;
    let doc = match built {
        // Adaptive needs combination weights, which only exist after the
        // conversion itself: convert fully, then plan and truncate.
        Some((strategy @ Strategy::Adaptive { .. }, first)) => {
            let (full, conv_report) = convert_model(&source, None)?;
            let p = plan(&full.spec, &strategy, first, Some(&full.combination_weights()))?;
            let (truncated, trunc_report) = apply_plan(&full, &p)?;
            save_model(&truncated, out_path)?;
            json!({
                "model": truncated.spec.name,
                "layers": conv_report.layers.iter().map(|l| json!({
                    "layer": l.layer, "kept": l.kept, "dropped_rss": l.dropped_rss,
                })).collect::<Vec<_>>(),
                "truncation": trunc_report.layers.iter().map(|l| json!({
                    "layer": l.layer, "kept": l.kept, "dropped_rss": l.dropped_rss,
                })).collect::<Vec<_>>(),
                "total_rss": trunc_report.total_rss,
            })
        }
        other => {
            let planned = match other {
                Some((strategy, first)) => Some(plan(&source.spec, &strategy, first, None)?),
                None => None,
            };
            let (converted, report) = convert_model(&source, planned.as_ref())?;
            save_model(&converted, out_path)?;
            json!({
                "model": converted.spec.name,
                "layers": report.layers.iter().map(|l| json!({
                    "layer": l.layer, "kept": l.kept, "dropped_rss": l.dropped_rss,
                })).collect::<Vec<_>>(),
                "total_rss": report.total_rss,
            })
        }
    };
    println!("{}", serde_json::to_string_pretty(&doc).unwrap());
    Ok(())
}

#[derive(Args, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct CompressArgs {
    /// Harmonic model container to truncate.
    #[arg(long)]
    model: Option<PathBuf>,
    #[command(flatten)]
    #[serde(skip)]
    strategy: StrategyArgs,
}

impl CompressArgs {
    fn fill(&mut self, c: CompressArgs) {
        self.model = self.model.take().or(c.model);
        self.strategy.fill(c.strategy);
    }
}

fn cmd_compress(a: CompressArgs, out: &Option<PathBuf>) -> Result<()> {
    let model_path = a
        .model
        .clone()
        .ok_or_else(|| Error::invalid("compress needs --model"))?;
    let out_path = out
        .clone()
        .ok_or_else(|| Error::invalid("compress needs --out for the truncated model"))?;
    match file_dtype(&model_path)? {
        Dtype::F32 => compress_typed::<f32>(&a, &model_path, &out_path),
        Dtype::F64 => compress_typed::<f64>(&a, &model_path, &out_path),
    }
}

fn compress_typed<T: Scalar>(a: &CompressArgs, path: &PathBuf, out_path: &PathBuf) -> Result<()> {
    let model: Model<T> = load_model(path)?;
    let (strategy, first) = a
        .strategy
        .build()?
        .ok_or_else(|| Error::invalid("compress needs --strategy"))?;
    let weights = matches!(strategy, Strategy::Adaptive { .. })
        .then(|| model.combination_weights());
    let p = plan(&model.spec, &strategy, first, weights.as_ref())?;
    let (truncated, report) = apply_plan(&model, &p)?;
    save_model(&truncated, out_path)?;
    let doc = json!({
        "model": truncated.spec.name,
        "layers": report.layers.iter().map(|l| json!({
            "layer": l.layer, "kept": l.kept, "dropped_rss": l.dropped_rss,
        })).collect::<Vec<_>>(),
        "total_rss": report.total_rss,
    });
    println!("{}", serde_json::to_string_pretty(&doc).unwrap());
    Ok(())
}

// ---------------------------------------------------------------------------
// train / eval
// ---------------------------------------------------------------------------

#[derive(Args, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct TrainArgs {
    /// Architecture preset to train (toy presets fit the shapes data).
    #[arg(long)]
    arch: Option<String>,
    /// Training samples per class.
    #[arg(long)]
    per_class: Option<usize>,
    /// Held-out samples per class.
    #[arg(long)]
    test_per_class: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Learning-rate multiplier at each step epoch.
    #[arg(long)]
    lr_decay: Option<f64>,
    /// Comma-separated 1-based epochs at which the rate decays.
    #[arg(long)]
    lr_steps: Option<String>,
    /// Stop once test accuracy reaches this.
    #[arg(long)]
    early_stop: Option<f64>,
    /// Random crop padding (pixels).
    #[arg(long)]
    augment_crop: Option<usize>,
    /// Mirror images horizontally at random.
    #[arg(long)]
    augment_flip: Option<bool>,
    /// Additive brightness jitter range.
    #[arg(long)]
    augment_brightness: Option<f64>,
    /// Contrast jitter range.
    #[arg(long)]
    augment_contrast: Option<f64>,
    /// Upper end of the brightness offsets baked into the data.
    #[arg(long)]
    brightness_max: Option<f64>,
}

impl TrainArgs {
    fn fill(&mut self, c: TrainArgs) {
        self.arch = self.arch.take().or(c.arch);
        self.per_class = self.per_class.take().or(c.per_class);
        self.test_per_class = self.test_per_class.take().or(c.test_per_class);
        self.epochs = self.epochs.take().or(c.epochs);
        self.batch = self.batch.take().or(c.batch);
        self.lr = self.lr.take().or(c.lr);
        self.momentum = self.momentum.take().or(c.momentum);
        self.weight_decay = self.weight_decay.take().or(c.weight_decay);
        self.lr_decay = self.lr_decay.take().or(c.lr_decay);
        self.lr_steps = self.lr_steps.take().or(c.lr_steps);
        self.early_stop = self.early_stop.take().or(c.early_stop);
        self.augment_crop = self.augment_crop.take().or(c.augment_crop);
        self.augment_flip = self.augment_flip.take().or(c.augment_flip);
        self.augment_brightness = self.augment_brightness.take().or(c.augment_brightness);
        self.augment_contrast = self.augment_contrast.take().or(c.augment_contrast);
        self.brightness_max = self.brightness_max.take().or(c.brightness_max);
    }
}

fn shapes_for_spec(spec: &ModelSpec, per_class: usize, brightness_max: f64, seed: u64) -> ShapesConfig {
    ShapesConfig {
        per_class,
        size: spec.input[1],
        channels: spec.input[0],
        brightness: (0.0, brightness_max),
        seed,
    }
}

fn cmd_train<T: Scalar>(a: TrainArgs, seed: u64, out: &Option<PathBuf>) -> Result<()> {
    let name = a
        .arch
        .as_deref()
        .ok_or_else(|| Error::invalid("train needs --arch"))?;
    let spec = preset_with(name, &PresetOptions::default())?;
    let brightness_max = a.brightness_max.unwrap_or(0.3);
    let train_cfgd = shapes_for_spec(&spec, a.per_class.unwrap_or(80), brightness_max, seed);
    let test_cfgd = shapes_for_spec(
        &spec,
        a.test_per_class.unwrap_or(40),
        brightness_max,
        seed.wrapping_add(1),
    );
    let train_set = synth_shapes::<T>(&train_cfgd)?;
    let test_set = synth_shapes::<T>(&test_cfgd)?;

    let defaults = TrainConfig::default();
    let lr_steps = match a.lr_steps.as_deref() {
        Some(s) => s
            .split(',')
            .filter(|p| !p.is_empty())
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::invalid(format!("bad epoch in --lr-steps: {p:?}")))
            })
            .collect::<Result<Vec<usize>>>()?,
        None => Vec::new(),
    };
    let augment = (a.augment_crop.unwrap_or(0) > 0
        || a.augment_flip.unwrap_or(false)
        || a.augment_brightness.unwrap_or(0.0) > 0.0
        || a.augment_contrast.unwrap_or(0.0) > 0.0)
        .then(|| AugmentConfig {
            pad_crop: a.augment_crop.unwrap_or(0),
            flip: a.augment_flip.unwrap_or(false),
            brightness: a.augment_brightness.unwrap_or(0.0),
            contrast: a.augment_contrast.unwrap_or(0.0),
        });
    let cfg = TrainConfig {
        lr: a.lr.unwrap_or(defaults.lr),
        momentum: a.momentum.unwrap_or(defaults.momentum),
        weight_decay: a.weight_decay.unwrap_or(defaults.weight_decay),
        batch_size: a.batch.unwrap_or(defaults.batch_size),
        epochs: a.epochs.unwrap_or(defaults.epochs),
        lr_decay: a.lr_decay.unwrap_or(defaults.lr_decay),
        lr_steps,
        seed,
        augment,
        early_stop_acc: a.early_stop,
    };

    let mut model: Model<T> = Model::init(&spec, seed)?;
    let history = train(&mut model, &train_set, &test_set, &cfg)?;
    if let Some(path) = out {
        save_model(&model, path)?;
    }
    let doc = json!({
        "arch": spec.name,
        "epochs": history.iter().map(|e| json!({
            "epoch": e.epoch,
            "lr": e.lr,
            "train_loss": e.train_loss,
            "train_acc": e.train_acc,
            "test_loss": e.test_loss,
            "test_acc": e.test_acc,
        })).collect::<Vec<_>>(),
        "final_test_acc": history.last().map(|e| e.test_acc),
        "model_file": out.as_ref().map(|p| p.display().to_string()),
    });
    println!("{}", serde_json::to_string_pretty(&doc).unwrap());
    Ok(())
}

#[derive(Args, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct EvalArgs {
    /// Saved model container.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Held-out samples per class.
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    /// Upper end of the brightness offsets baked into the data.
    #[arg(long)]
    brightness_max: Option<f64>,
}

impl EvalArgs {
    fn fill(&mut self, c: EvalArgs) {
        self.model = self.model.take().or(c.model);
        self.per_class = self.per_class.take().or(c.per_class);
        self.batch = self.batch.take().or(c.batch);
        self.brightness_max = self.brightness_max.take().or(c.brightness_max);
    }
}

fn cmd_eval(a: EvalArgs, seed: u64, out: &Option<PathBuf>) -> Result<()> {
    let model_path = a
        .model
        .clone()
        .ok_or_else(|| Error::invalid("eval needs --model"))?;
    match file_dtype(&model_path)? {
        Dtype::F32 => eval_typed::<f32>(&a, &model_path, seed, out),
        Dtype::F64 => eval_typed::<f64>(&a, &model_path, seed, out),
    }
}

fn eval_typed<T: Scalar>(
    a: &EvalArgs,
    path: &PathBuf,
    seed: u64,
    out: &Option<PathBuf>,
) -> Result<()> {
    let model: Model<T> = load_model(path)?;
    let cfgd = shapes_for_spec(
        &model.spec,
        a.per_class.unwrap_or(40),
        a.brightness_max.unwrap_or(0.3),
        seed.wrapping_add(1),
    );
    let ds = synth_shapes::<T>(&cfgd)?;
    let report = evaluate(&model, &ds, a.batch.unwrap_or(64))?;
    let doc = json!({
        "model": model.spec.name,
        "samples": ds.len(),
        "accuracy": report.accuracy,
        "mean_loss": report.mean_loss,
        "confusion": report.confusion,
    });
    emit(out, &serde_json::to_string_pretty(&doc).unwrap())
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

#[derive(Args, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct BenchArgs {
    /// Samples per timed forward pass.
    #[arg(long)]
    batch: Option<usize>,
    /// Timed repetitions per case (median reported).
    #[arg(long)]
    reps: Option<usize>,
    /// Untimed repetitions before the clock starts.
    #[arg(long)]
    warmup: Option<usize>,
    /// Truncation level applied to every case.
    #[arg(long)]
    lambda: Option<usize>,
    /// table | json
    #[arg(long)]
    format: Option<String>,
}

impl BenchArgs {
    fn fill(&mut self, c: BenchArgs) {
        self.batch = self.batch.take().or(c.batch);
        self.reps = self.reps.take().or(c.reps);
        self.warmup = self.warmup.take().or(c.warmup);
        self.lambda = self.lambda.take().or(c.lambda);
        self.format = self.format.take().or(c.format);
    }
}

fn cmd_bench(a: BenchArgs, seed: u64, out: &Option<PathBuf>) -> Result<()> {
    let mut cases = wrn_16_8_catalog(a.batch.unwrap_or(2));
    if let Some(l) = a.lambda {
        for c in &mut cases {
            c.lambda = Some(l);
        }
    }
    let results = run_bench(&cases, a.reps.unwrap_or(5), a.warmup.unwrap_or(1), seed)?;
    let ratio = aggregate_ratio(&results);
    let text = match a.format.as_deref().unwrap_or("table") {
        "json" => {
            let doc = json!({
                "cases": results.iter().map(|r| json!({
                    "name": r.name,
                    "mult": r.mult,
                    "twostage_s": r.twostage_s,
                    "merged_s": r.merged_s,
                    "macs_twostage": r.macs_twostage,
                    "macs_merged": r.macs_merged,
                    "bytes_twostage": r.bytes_twostage,
                    "bytes_merged": r.bytes_merged,
                    "max_diff": r.max_diff,
                })).collect::<Vec<_>>(),
                "aggregate_ratio": ratio,
            });
            serde_json::to_string_pretty(&doc).unwrap()
        }
        "table" => {
            let mut s = format!(
                "{:<16} {:>4} {:>12} {:>12} {:>7} {:>14} {:>14}\n",
                "case", "mult", "twostage(s)", "merged(s)", "ratio", "macs(2stage)", "macs(merged)"
            );
            for r in &results {
                s.push_str(&format!(
                    "{:<16} {:>4} {:>12.5} {:>12.5} {:>7.3} {:>14} {:>14}\n",
                    r.name,
                    r.mult,
                    r.twostage_s,
                    r.merged_s,
                    r.merged_s / r.twostage_s,
                    r.macs_twostage,
                    r.macs_merged,
                ));
            }
            s.push_str(&format!("aggregate ratio (mult-weighted): {ratio:.4}\n"));
            s
        }
        other => return Err(Error::invalid(format!("unknown format {other:?}"))),
    };
    emit(out, &text)
}
