//! `segkit`: train, tune, predict, evaluate, and ensemble the segmentation
//! networks, plus the built-in gradient and shape verification suites.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use segkit::data::{generate_synthetic_dataset, Dataset, SynthConfig, PATCH_SIZE, PATCH_STRIDE};
use segkit::ensemble::{
    average_arith, average_geo, train_stacking, AveragingMode, EnsembleMode, EnsembleSpec,
    StackSample, StackTrainConfig, StackingModel,
};
use segkit::io;
use segkit::labelling::{confusion, tune_thresholds, LabelRule};
use segkit::tensor::Tensor;
use segkit::topology::{Network, TopologySpec, NAMED_IDS};
use segkit::train::{
    evaluate_samples, fold_split, make_folds, predict_features, predict_scores, train_model,
    EvalReport, OptimizerKind, SampleEvaluation, TrainConfig,
};
use segkit::verify;

#[derive(Parser)]
#[command(
    name = "segkit",
    version,
    about = "Semantic segmentation networks for spine MRI slices: training, inference, ensembling, and self-checks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labelled dataset and write it with a manifest.
    SynthData(SynthDataArgs),
    /// Train one network topology on a manifest dataset.
    Train(TrainArgs),
    /// Tune per-class acceptance thresholds on a dataset split.
    TuneThresholds(TuneArgs),
    /// Predict label maps (and optionally score/feature maps) for images.
    Predict(PredictArgs),
    /// Evaluate a trained model and write the per-class IoU CSV.
    Evaluate(EvaluateArgs),
    /// Combine member predictions by averaging or a trained stacking model.
    Ensemble(EnsembleArgs),
    /// Run the finite-difference gradient check suite over all block types.
    Gradcheck,
    /// Validate topology output shapes and score normalization.
    Shapes(ShapesArgs),
}

#[derive(Args)]
struct SynthDataArgs {
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    images: usize,
    #[arg(long, default_value_t = 32)]
    height: usize,
    #[arg(long, default_value_t = 32)]
    width: usize,
    #[arg(long, default_value_t = 5)]
    classes: usize,
    #[arg(long, default_value_t = 5)]
    patients: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset manifest (JSON).
    #[arg(long)]
    manifest: PathBuf,
    /// Topology id (U1, UA, UD, UAD, UMD, UAMD, UVMD, UVDD, UQD, UDD, UMDD, UDD2).
    #[arg(long)]
    topology: String,
    /// Output directory for model.tsr1, model.json, history.csv.
    #[arg(long)]
    out: PathBuf,
    /// Base channel width override (named topologies default to 64).
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    /// Training seed (env SEGKIT_SEED overrides).
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Cross-validation fold index (0..3).
    #[arg(long, default_value_t = 0)]
    fold: usize,
    /// Seed for the patient shuffle behind the folds (defaults to --seed).
    #[arg(long)]
    folds_seed: Option<u64>,
    /// Train on every sample with no held-out patients (overfit runs).
    #[arg(long, conflicts_with_all = ["fold", "folds_seed"])]
    all_data: bool,
    /// Optimizer override (topologies carry their own defaults).
    #[arg(long, value_enum)]
    optimizer: Option<OptChoice>,
    /// Learning-rate override.
    #[arg(long)]
    lr: Option<f64>,
    /// Enable random augmentation of training samples.
    #[arg(long)]
    augment: bool,
}

#[derive(Args)]
struct TuneArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Model directory (holding model.tsr1 + model.json).
    #[arg(long)]
    model: PathBuf,
    /// Output thresholds JSON.
    #[arg(long)]
    out: PathBuf,
    /// Only use manifest records with this split tag.
    #[arg(long)]
    split: Option<String>,
    #[arg(long, default_value_t = PATCH_SIZE)]
    patch: usize,
    #[arg(long, default_value_t = PATCH_STRIDE)]
    stride: usize,
}

#[derive(Args)]
struct PredictArgs {
    /// Model directory (holding model.tsr1 + model.json).
    #[arg(long)]
    model: PathBuf,
    /// Predict one TSR1 image; --out is then the output PGM file.
    #[arg(long, conflicts_with_all = ["manifest", "split"])]
    image: Option<PathBuf>,
    /// Predict every record of a manifest; --out is then a directory.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Only predict manifest records with this split tag.
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = LabelChoice::Map)]
    label: LabelChoice,
    /// Thresholds JSON (required with --label th).
    #[arg(long)]
    thresholds: Option<PathBuf>,
    #[arg(long, default_value_t = PATCH_SIZE)]
    patch: usize,
    #[arg(long, default_value_t = PATCH_STRIDE)]
    stride: usize,
    /// Also write per-image score maps as TSR1 under this directory.
    #[arg(long)]
    save_scores: Option<PathBuf>,
    /// Also write per-image head-input feature tensors under this directory.
    #[arg(long)]
    save_features: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Output metrics CSV.
    #[arg(long)]
    out: PathBuf,
    /// Only evaluate manifest records with this split tag.
    #[arg(long)]
    split: Option<String>,
    /// Restrict to the patients of one subset of a saved fold plan.
    #[arg(long, requires = "subset")]
    fold_file: Option<PathBuf>,
    #[arg(long, value_enum)]
    subset: Option<SubsetChoice>,
    #[arg(long, value_enum, default_value_t = LabelChoice::Map)]
    label: LabelChoice,
    #[arg(long)]
    thresholds: Option<PathBuf>,
    #[arg(long, default_value_t = PATCH_SIZE)]
    patch: usize,
    #[arg(long, default_value_t = PATCH_STRIDE)]
    stride: usize,
}

#[derive(Args)]
struct EnsembleArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Directory holding one subdirectory of member outputs per member id.
    #[arg(long)]
    scores_dir: PathBuf,
    /// Output metrics CSV.
    #[arg(long)]
    out: PathBuf,
    /// Named roster (E4..E13).
    #[arg(long, group = "who")]
    spec: Option<String>,
    /// Custom comma-separated member list.
    #[arg(long, group = "who")]
    members: Option<String>,
    #[arg(long, value_enum, default_value_t = EnsModeChoice::Mean)]
    mode: EnsModeChoice,
    /// Hidden width of the stacking meta-learner.
    #[arg(long)]
    hidden: Option<usize>,
    /// Split tag whose records are combined and evaluated.
    #[arg(long)]
    split: Option<String>,
    /// Split tag the stacking combiner trains on (required for stacking).
    #[arg(long)]
    train_split: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = LabelChoice::Map)]
    label: LabelChoice,
    #[arg(long)]
    thresholds: Option<PathBuf>,
}

#[derive(Args)]
struct ShapesArgs {
    /// Check every named topology.
    #[arg(long, conflicts_with = "topology")]
    all: bool,
    /// Check one topology id.
    #[arg(long)]
    topology: Option<String>,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 64)]
    m: usize,
    #[arg(long, default_value_t = 12)]
    classes: usize,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum LabelChoice {
    Map,
    Th,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum SubsetChoice {
    Train,
    Val,
    Test,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum OptChoice {
    Adam,
    Rmsprop,
    Adadelta,
}

impl From<OptChoice> for OptimizerKind {
    fn from(c: OptChoice) -> Self {
        match c {
            OptChoice::Adam => OptimizerKind::Adam,
            OptChoice::Rmsprop => OptimizerKind::Rmsprop,
            OptChoice::Adadelta => OptimizerKind::Adadelta,
        }
    }
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum EnsModeChoice {
    /// Arithmetic mean of member score maps.
    Mean,
    /// Renormalized geometric mean of member score maps.
    Geo,
    /// Stacking over normalized score maps (average merge, dense layers).
    StackingNad,
    /// Stacking over head-input tensors (concat merge, dense layers).
    StackingTcd,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::SynthData(args) => cmd_synth_data(args),
        Command::Train(args) => cmd_train(args),
        Command::TuneThresholds(args) => cmd_tune(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Ensemble(args) => cmd_ensemble(args),
        Command::Gradcheck => cmd_gradcheck(),
        Command::Shapes(args) => cmd_shapes(args),
    }
}

/// SEGKIT_SEED overrides any --seed flag.
fn effective_seed(flag: u64) -> Result<u64> {
    match std::env::var("SEGKIT_SEED") {
        Ok(v) => v
            .trim()
            .parse::<u64>()
            .map_err(|_| anyhow!("SEGKIT_SEED must be an unsigned integer, got '{v}'")),
        Err(_) => Ok(flag),
    }
}

/// Loads a model directory written by `train` back into a runnable network.
fn load_network(dir: &Path) -> Result<Network<f32>> {
    let (params, index) = io::weights_read(&dir.join("model.tsr1"), &dir.join("model.json"))
        .with_context(|| format!("loading model from {}", dir.display()))?;
    let mut net = Network::build(&index.topology, index.in_channels, 0)?;
    net.params.copy_values_from(&params)?;
    Ok(net)
}

/// Loads the dataset, keeping only records with the given split tag (all
/// records when `split` is None).
fn load_split(manifest: &Path, split: Option<&str>) -> Result<Dataset> {
    let mut dataset = io::load_dataset(manifest)?;
    if let Some(tag) = split {
        let records = io::manifest_read(manifest)?.records;
        let keep: Vec<String> = records
            .iter()
            .filter(|r| r.split.as_deref() == Some(tag))
            .map(|r| r.id.clone())
            .collect();
        dataset.samples.retain(|s| keep.contains(&s.id));
        if dataset.samples.is_empty() {
            bail!("no manifest records carry split tag '{tag}'");
        }
    }
    Ok(dataset)
}

fn label_rule(
    choice: LabelChoice,
    thresholds: Option<&Path>,
    num_classes: usize,
) -> Result<LabelRule> {
    match choice {
        LabelChoice::Map => Ok(LabelRule::Map),
        LabelChoice::Th => {
            let path = thresholds.ok_or_else(|| anyhow!("--label th requires --thresholds"))?;
            let th = io::thresholds_read(path)?;
            if th.num_classes != num_classes {
                bail!(
                    "thresholds cover {} classes, dataset has {num_classes}",
                    th.num_classes
                );
            }
            Ok(LabelRule::Th(th))
        }
    }
}

fn write_history(path: &Path, outcome: &segkit::train::TrainOutcome) -> Result<()> {
    let mut csv = String::from("epoch,train_loss,val_accuracy\n");
    for e in &outcome.history {
        csv.push_str(&format!("{},{},{}\n", e.epoch, e.train_loss, e.val_accuracy));
    }
    fs::write(path, csv)?;
    Ok(())
}

fn cmd_synth_data(args: SynthDataArgs) -> Result<()> {
    let config = SynthConfig {
        num_images: args.images,
        height: args.height,
        width: args.width,
        num_classes: args.classes,
        num_patients: args.patients,
        seed: effective_seed(args.seed)?,
    };
    let dataset = generate_synthetic_dataset(&config)?;
    let manifest = io::save_dataset(&dataset, &args.out)?;
    println!(
        "wrote {} images ({} classes, {} patients) -> {}",
        dataset.samples.len(),
        dataset.num_classes,
        dataset.patients().len(),
        manifest.display()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let dataset = io::load_dataset(&args.manifest)?;
    let seed = effective_seed(args.seed)?;

    let mut spec = TopologySpec::named(&args.topology)?.with_classes(dataset.num_classes);
    if let Some(m) = args.m {
        spec = spec.with_m(m);
    }

    let mut config = TrainConfig::for_topology(&args.topology);
    config.seed = seed;
    if let Some(e) = args.epochs {
        config.epochs = e;
    }
    if let Some(b) = args.batch {
        config.batch_size = b;
    }
    if let Some(o) = args.optimizer {
        config.optimizer = o.into();
    }
    if let Some(lr) = args.lr {
        config.learning_rate = lr;
    }
    config.augmentation = args.augment;

    fs::create_dir_all(&args.out)?;
    let (train, val) = if args.all_data {
        (dataset.samples.clone(), Vec::new())
    } else {
        if args.fold >= 3 {
            bail!("--fold must be 0, 1, or 2");
        }
        let folds = make_folds(&dataset.patients(), args.folds_seed.unwrap_or(seed))?;
        let plan = &folds[args.fold];
        io::fold_plan_write(plan, &args.out.join("fold.json"))?;
        let (train, val, _test) = fold_split(&dataset, plan);
        (train, val)
    };
    let in_channels = train
        .first()
        .map(|s| s.image.channels())
        .ok_or_else(|| anyhow!("training split is empty"))?;

    let mut net = Network::build(&spec, in_channels, seed)?;
    let outcome = train_model(&mut net, &train, &val, &config)?;

    io::weights_write(
        &net.params,
        &spec,
        in_channels,
        &args.out.join("model.tsr1"),
        &args.out.join("model.json"),
    )?;
    write_history(&args.out.join("history.csv"), &outcome)?;

    let last = outcome.history.last();
    println!(
        "trained {} ({:?} lr {}) for {} epochs on {} images; best epoch {}; final val accuracy {}",
        spec.id,
        config.optimizer,
        config.learning_rate,
        outcome.history.len(),
        train.len(),
        outcome.best_epoch.map_or_else(|| "-".into(), |e| e.to_string()),
        last.map_or_else(|| "-".into(), |e| e.val_accuracy.to_string()),
    );
    println!("model written to {}", args.out.display());
    Ok(())
}

fn cmd_tune(args: TuneArgs) -> Result<()> {
    let dataset = load_split(&args.manifest, args.split.as_deref())?;
    let mut net = load_network(&args.model)?;
    let num_classes = net.spec().num_classes;
    if num_classes != dataset.num_classes {
        bail!(
            "model predicts {num_classes} classes, dataset has {}",
            dataset.num_classes
        );
    }
    let mut pairs = Vec::with_capacity(dataset.samples.len());
    for s in &dataset.samples {
        let scores = predict_scores(&mut net, &s.image, args.patch, args.stride)?;
        pairs.push((scores, s.mask.clone()));
    }
    let th = tune_thresholds(&pairs, num_classes)?;
    io::thresholds_write(&th, &args.out)?;
    for c in 1..num_classes {
        println!("class {c}: threshold {}", th.get(c));
    }
    println!("thresholds written to {}", args.out.display());
    Ok(())
}

fn cmd_predict(args: PredictArgs) -> Result<()> {
    let mut net = load_network(&args.model)?;
    let num_classes = net.spec().num_classes;
    let rule = label_rule(args.label, args.thresholds.as_deref(), num_classes)?;

    // Assemble (id, image) work items from either input mode.
    let items: Vec<(String, Tensor<f32>)> = if let Some(image_path) = &args.image {
        let id = image_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "image".into());
        vec![(id, io::tsr_read(image_path)?)]
    } else if let Some(manifest) = &args.manifest {
        let dataset = load_split(manifest, args.split.as_deref())?;
        dataset.samples.into_iter().map(|s| (s.id, s.image)).collect()
    } else {
        bail!("predict needs --image or --manifest");
    };

    let single = args.image.is_some();
    if !single {
        fs::create_dir_all(&args.out)?;
    }
    for dir in [&args.save_scores, &args.save_features].into_iter().flatten() {
        fs::create_dir_all(dir)?;
    }

    for (id, image) in &items {
        let scores = predict_scores(&mut net, image, args.patch, args.stride)?;
        if let Some(dir) = &args.save_scores {
            io::tsr_write(&scores, &dir.join(format!("{id}.tsr1")))?;
        }
        if let Some(dir) = &args.save_features {
            let features = predict_features(&mut net, image, args.patch, args.stride)?;
            io::tsr_write(&features, &dir.join(format!("{id}_features.tsr1")))?;
        }
        let pred = rule.apply(&scores)?;
        let out = if single { args.out.clone() } else { args.out.join(format!("{id}.pgm")) };
        io::pgm_write(&pred, &out)?;
    }
    println!("predicted {} image(s)", items.len());
    Ok(())
}

fn eval_subset(args: &EvaluateArgs) -> Result<Dataset> {
    let mut dataset = load_split(&args.manifest, args.split.as_deref())?;
    if let Some(fold_file) = &args.fold_file {
        let plan = io::fold_plan_read(fold_file)?;
        let patients = match args.subset.expect("clap enforces --subset") {
            SubsetChoice::Train => plan.train_patients,
            SubsetChoice::Val => plan.val_patients,
            SubsetChoice::Test => plan.test_patients,
        };
        dataset.samples.retain(|s| patients.contains(&s.patient_id));
        if dataset.samples.is_empty() {
            bail!("no samples belong to the requested fold subset");
        }
    }
    Ok(dataset)
}

fn print_report(report: &EvalReport) {
    println!("mean IoU without background: {}", report.mean_iou_no_bg);
    println!("mean IoU with background:    {}", report.mean_iou_with_bg);
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let dataset = eval_subset(&args)?;
    let mut net = load_network(&args.model)?;
    if net.spec().num_classes != dataset.num_classes {
        bail!(
            "model predicts {} classes, dataset has {}",
            net.spec().num_classes,
            dataset.num_classes
        );
    }
    let rule = label_rule(args.label, args.thresholds.as_deref(), dataset.num_classes)?;
    let report = evaluate_samples(&mut net, &dataset.samples, &rule, args.patch, args.stride)?;
    io::metrics_csv_file(&report, &args.out)?;
    print_report(&report);
    println!("metrics written to {}", args.out.display());
    Ok(())
}

/// Reads one member's saved output for one image. Members without a saved
/// output (e.g. externally produced rosters slots) must be provided as
/// TSR1 drop-ins under `scores_dir/<member>/`.
fn member_output(scores_dir: &Path, member: &str, id: &str, features: bool) -> Result<Tensor<f32>> {
    let file = if features { format!("{id}_features.tsr1") } else { format!("{id}.tsr1") };
    let path = scores_dir.join(member).join(&file);
    io::tsr_read(&path).with_context(|| {
        format!(
            "missing output of member '{member}' for image '{id}' ({}); \
             run `segkit predict --save-{}` for trained members or drop in \
             externally produced TSR1 files",
            path.display(),
            if features { "features" } else { "scores" },
        )
    })
}

fn stack_samples(
    dataset: &Dataset,
    member_ids: &[String],
    scores_dir: &Path,
    features: bool,
) -> Result<Vec<StackSample>> {
    let mut out = Vec::with_capacity(dataset.samples.len());
    for s in &dataset.samples {
        let members: Vec<Tensor<f32>> = member_ids
            .iter()
            .map(|m| member_output(scores_dir, m, &s.id, features))
            .collect::<Result<_>>()?;
        out.push((members, s.mask.clone()));
    }
    Ok(out)
}

fn cmd_ensemble(args: EnsembleArgs) -> Result<()> {
    let seed = effective_seed(args.seed)?;
    let mut mode = match args.mode {
        EnsModeChoice::Mean => EnsembleMode::Averaging { mean: AveragingMode::Arith },
        EnsModeChoice::Geo => EnsembleMode::Averaging { mean: AveragingMode::Geo },
        EnsModeChoice::StackingNad => EnsembleMode::nad(),
        EnsModeChoice::StackingTcd => EnsembleMode::tcd(),
    };
    if let (Some(h), EnsembleMode::Stacking { hidden_width, .. }) = (args.hidden, &mut mode) {
        *hidden_width = h;
    }
    let spec = match (&args.spec, &args.members) {
        (Some(id), None) => EnsembleSpec::named(id, mode)?,
        (None, Some(list)) => {
            let member_ids: Vec<String> =
                list.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
            let spec = EnsembleSpec { id: "custom".into(), member_ids, mode };
            spec.validate()?;
            spec
        }
        _ => bail!("ensemble needs exactly one of --spec or --members"),
    };

    let eval_set = load_split(&args.manifest, args.split.as_deref())?;
    let num_classes = eval_set.num_classes;
    let rule = label_rule(args.label, args.thresholds.as_deref(), num_classes)?;

    let report = match &spec.mode {
        EnsembleMode::Averaging { mean } => {
            let mut per_image = Vec::with_capacity(eval_set.samples.len());
            for s in &eval_set.samples {
                let members: Vec<Tensor<f32>> = spec
                    .member_ids
                    .iter()
                    .map(|m| member_output(&args.scores_dir, m, &s.id, false))
                    .collect::<Result<_>>()?;
                let avg = match mean {
                    AveragingMode::Arith => average_arith(&members)?,
                    AveragingMode::Geo => average_geo(&members)?,
                };
                let pred = rule.apply(&avg)?;
                per_image.push(SampleEvaluation {
                    id: s.id.clone(),
                    counts: confusion(&pred, &s.mask, num_classes)?,
                });
            }
            EvalReport::from_counts(per_image, num_classes)
        }
        EnsembleMode::Stacking { input, .. } => {
            let features = *input == segkit::ensemble::StackInput::Tensor;
            let train_split = args
                .train_split
                .as_deref()
                .ok_or_else(|| anyhow!("stacking modes require --train-split"))?;
            let train_set = load_split(&args.manifest, Some(train_split))?;
            let train = stack_samples(&train_set, &spec.member_ids, &args.scores_dir, features)?;
            let mut model = StackingModel::for_spec(&spec, num_classes, seed)?;
            let mut config = StackTrainConfig { seed, ..Default::default() };
            if let Some(e) = args.epochs {
                config.epochs = e;
            }
            if let Some(lr) = args.lr {
                config.learning_rate = lr;
            }
            let outcome = train_stacking(&mut model, &train, &[], &config)?;
            println!(
                "stacking combiner trained for {} epochs on {} samples (best epoch {})",
                outcome.history.len(),
                train.len(),
                outcome.best_epoch.map_or_else(|| "-".into(), |e| e.to_string()),
            );
            let mut per_image = Vec::with_capacity(eval_set.samples.len());
            for s in &eval_set.samples {
                let members: Vec<Tensor<f32>> = spec
                    .member_ids
                    .iter()
                    .map(|m| member_output(&args.scores_dir, m, &s.id, features))
                    .collect::<Result<_>>()?;
                let scores = model.predict(&members)?;
                let pred = rule.apply(&scores)?;
                per_image.push(SampleEvaluation {
                    id: s.id.clone(),
                    counts: confusion(&pred, &s.mask, num_classes)?,
                });
            }
            EvalReport::from_counts(per_image, num_classes)
        }
    };

    io::metrics_csv_file(&report, &args.out)?;
    println!("ensemble {} ({} members)", spec.id, spec.member_ids.len());
    print_report(&report);
    println!("metrics written to {}", args.out.display());
    Ok(())
}

fn finish_checks(results: &[verify::CheckOutcome]) -> Result<()> {
    for r in results {
        println!("{r}");
    }
    let failed = results.iter().filter(|r| !r.pass).count();
    if failed > 0 {
        bail!("{failed} check(s) failed");
    }
    Ok(())
}

fn cmd_gradcheck() -> Result<()> {
    finish_checks(&verify::gradient_suite()?)
}

fn cmd_shapes(args: ShapesArgs) -> Result<()> {
    let results = if args.all {
        verify::shape_suite(args.height, args.width, args.m, args.classes)?
    } else {
        let id = args
            .topology
            .as_deref()
            .ok_or_else(|| anyhow!("shapes needs --all or --topology <ID>; ids: {NAMED_IDS:?}"))?;
        vec![verify::shape_check(id, args.height, args.width, args.m, args.classes)?]
    };
    finish_checks(&results)
}
