//! `tileseg` command-line driver. Every run is fully described by its flags
//! and config files; results go to files and stdout tables.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tileseg::error::Error;
use tileseg::evaluation::{dsc_record, wilcoxon_signed_rank, write_metrics_csv, DscKind, DscRecord};
use tileseg::nnet::{load_checkpoint, save_checkpoint};
use tileseg::phantom::{generate_cohort, CohortSpec, PresetFile};
use tileseg::transfer::{
    evaluate_model, load_experiment_spec, pretrain_from_spec, render_markdown, run_experiment,
    segment_volume, transfer_from_spec, write_experiment_outputs, write_panel_csvs, ExperimentReport,
    ExperimentSpec, MixMode, TrainedModel,
};
use tileseg::volio::{load_manifest, read_label_map, read_volume, write_label_map, CohortTag, LabelMap};

mod exit {
    pub const USAGE: u8 = 2;
    pub const IO: u8 = 3;
    pub const NUMERICAL: u8 = 4;
}

#[derive(Parser)]
#[command(name = "tileseg", version, about = "Tile-based segmentation with augmented transfer learning")]
struct Cli {
    /// Worker threads for tile and fold parallelism (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
    Md,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Adult,
    Pediatric,
    Contrast,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    NewOnly,
    Augmented,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Pdsc,
    Rdsc,
    Plain,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort: volumes, label maps and manifest.json.
    Phantom(PhantomArgs),
    /// Train the baseline tile networks on an experiment's pretraining cohort.
    Pretrain(PretrainArgs),
    /// Fine-tune a baseline on one fold of an experiment's new cohort.
    Transfer(TransferArgs),
    /// Segment one image with a checkpoint.
    Segment(SegmentArgs),
    /// Score segmentations against reference label maps.
    Eval(EvalArgs),
    /// Paired Wilcoxon signed-rank test on two CSV columns.
    Stats(StatsArgs),
    /// Run a full experiment and write its report.
    Experiment(ExperimentArgs),
    /// Render a saved report as tables or plot data.
    Report(ReportArgs),
}

#[derive(Args)]
struct PhantomArgs {
    /// Cohort spec (JSON: phantom, n, cohort, id_prefix).
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    spec: Option<PathBuf>,
    /// Built-in preset instead of a spec file.
    #[arg(long)]
    preset: Option<Preset>,
    /// Cohort size when using --preset.
    #[arg(long, default_value_t = 10)]
    n: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PretrainArgs {
    /// Experiment spec.
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TransferArgs {
    /// Experiment spec.
    #[arg(long)]
    spec: PathBuf,
    /// Baseline checkpoint.
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 0)]
    fold: usize,
    #[arg(long, value_enum, default_value = "augmented")]
    mode: Mode,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SegmentArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Output label file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Predicted label map (pair mode).
    #[arg(long, requires = "truth", conflicts_with_all = ["model", "manifest"])]
    pred: Option<PathBuf>,
    /// Reference label map (pair mode).
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Checkpoint to evaluate on every subject of --manifest.
    #[arg(long, requires = "manifest")]
    model: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "plain")]
    kind: Kind,
    #[arg(long, value_enum, default_value = "md")]
    format: Format,
    /// Write the table to this file instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct StatsArgs {
    /// CSV file with a header row.
    #[arg(long)]
    input: PathBuf,
    /// First column of each pair.
    #[arg(long)]
    x: String,
    /// Second column of each pair.
    #[arg(long)]
    y: String,
    /// Bonferroni family size.
    #[arg(long, default_value_t = 1)]
    comparisons: usize,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, value_enum, default_value = "md")]
    format: Format,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    spec: PathBuf,
    /// Output directory; defaults to the spec's output_dir or results/<name>.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ReportArgs {
    /// report.json written by `experiment`.
    #[arg(long)]
    report: PathBuf,
    #[arg(long, value_enum, default_value = "md")]
    format: Format,
    /// Where csv panel files go (default: next to the report).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(exit::USAGE);
        }
    }
    let result = match cli.command {
        Command::Phantom(a) => cmd_phantom(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Transfer(a) => cmd_transfer(a),
        Command::Segment(a) => cmd_segment(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Stats(a) => cmd_stats(a),
        Command::Experiment(a) => cmd_experiment(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() {
                exit::IO
            } else if e.is_numerical() {
                exit::NUMERICAL
            } else {
                exit::USAGE
            })
        }
    }
}

type Result<T = ()> = tileseg::error::Result<T>;

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

fn write_text(path: &Path, text: &str) -> Result {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create_dir(dir: &Path) -> Result {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn load_spec(path: &Path, seed: Option<u64>) -> Result<ExperimentSpec> {
    let mut spec = load_experiment_spec(path)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    Ok(spec)
}

fn cmd_phantom(a: PhantomArgs) -> Result {
    let mut cohort = match (&a.spec, a.preset) {
        (Some(path), _) => serde_json::from_str::<CohortSpec>(&read_text(path)?)?,
        (None, Some(p)) => {
            let presets = PresetFile::builtin();
            let (phantom, tag, prefix) = match p {
                Preset::Adult => (presets.adult, CohortTag::Original, "adult-"),
                Preset::Pediatric => (presets.pediatric, CohortTag::New, "ped-"),
                Preset::Contrast => (presets.contrast, CohortTag::ContrastPair, "con-"),
            };
            CohortSpec {
                phantom,
                n: a.n,
                cohort: tag,
                id_prefix: prefix.into(),
            }
        }
        (None, None) => unreachable!("clap requires --spec or --preset"),
    };
    if let Some(s) = a.seed {
        cohort.phantom.seed = s;
    }
    let (subjects, _) = generate_cohort(&cohort, Some(&a.out))?;
    println!(
        "wrote {} subjects (seed {}) to {}",
        subjects.len(),
        cohort.phantom.seed,
        a.out.display()
    );
    Ok(())
}

fn log_csv(model: &TrainedModel, path: &Path) -> Result {
    let mut s = String::from("epoch,train_loss,val_dsc\n");
    for (e, (l, v)) in model.train_loss.iter().zip(&model.validation_curve).enumerate() {
        let _ = writeln!(s, "{},{l},{v}", e + 1);
    }
    write_text(path, &s)
}

fn cmd_pretrain(a: PretrainArgs) -> Result {
    let spec = load_spec(&a.spec, a.seed)?;
    let model = pretrain_from_spec(&spec)?;
    create_dir(&a.out)?;
    let ck = a.out.join("pretrain_baseline.tbnn");
    save_checkpoint(&model.to_checkpoint(), &ck)?;
    log_csv(&model, &a.out.join("pretrain_log.csv"))?;
    println!(
        "selected epoch {} (validation DSC {:.4}); wrote {}",
        model.selected_epoch,
        best_val(&model),
        ck.display()
    );
    Ok(())
}

fn best_val(m: &TrainedModel) -> f64 {
    m.selected_epoch
        .checked_sub(1)
        .and_then(|i| m.validation_curve.get(i))
        .copied()
        .unwrap_or(f64::NAN)
}

fn cmd_transfer(a: TransferArgs) -> Result {
    let spec = load_spec(&a.spec, a.seed)?;
    let base = TrainedModel::from_checkpoint(load_checkpoint(&a.model)?)?;
    let mode = match a.mode {
        Mode::NewOnly => MixMode::NewOnly,
        Mode::Augmented => MixMode::Augmented,
    };
    let model = transfer_from_spec(&spec, &base, a.fold, mode)?;
    create_dir(&a.out)?;
    let name = format!("fold{}_{}", a.fold, model.regime.as_str());
    let ck = a.out.join(format!("{name}.tbnn"));
    save_checkpoint(&model.to_checkpoint(), &ck)?;
    log_csv(&model, &a.out.join(format!("{name}_log.csv")))?;
    println!(
        "selected epoch {} (validation DSC {:.4}); wrote {}",
        model.selected_epoch,
        best_val(&model),
        ck.display()
    );
    Ok(())
}

fn cmd_segment(a: SegmentArgs) -> Result {
    let model = TrainedModel::from_checkpoint(load_checkpoint(&a.model)?)?;
    let image = read_volume(&a.image)?;
    let seg = segment_volume(&model, &image)?;
    write_label_map(&seg, &a.out)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn dsc_kind(k: Kind) -> DscKind {
    match k {
        Kind::Pdsc => DscKind::Performance,
        Kind::Rdsc => DscKind::Reproducibility,
        Kind::Plain => DscKind::Plain,
    }
}

/// Reads both maps and makes the reference's vocabulary the common one.
fn aligned_pair(pred: &Path, truth: &Path) -> Result<(LabelMap, LabelMap)> {
    let t = read_label_map(truth)?;
    let p = read_label_map(pred)?;
    let mut ids = t.vocabulary().to_vec();
    for e in p.vocabulary() {
        if !ids.iter().any(|x| x.id == e.id) {
            ids.push(e.clone());
        }
    }
    ids.sort_by_key(|e| e.id);
    let bg = t.background_id();
    Ok((
        p.with_vocabulary(ids.clone())?.with_background(bg),
        t.with_vocabulary(ids)?.with_background(bg),
    ))
}

fn cmd_eval(a: EvalArgs) -> Result {
    let kind = dsc_kind(a.kind);
    let records: Vec<DscRecord> = if let (Some(pred), Some(truth)) = (&a.pred, &a.truth) {
        let (p, t) = aligned_pair(pred, truth)?;
        let id = pred.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        vec![dsc_record(&id, &p, &t, kind)?]
    } else if let (Some(model), Some(manifest)) = (&a.model, &a.manifest) {
        let model = TrainedModel::from_checkpoint(load_checkpoint(model)?)?;
        let manifest = load_manifest(manifest)?;
        let mut subjects = Vec::with_capacity(manifest.subjects.len());
        for rec in &manifest.subjects {
            let label = rec
                .label_path
                .as_ref()
                .ok_or_else(|| Error::Manifest(format!("subject {} has no label file", rec.subject_id)))?;
            subjects.push(tileseg::transfer::CohortSubject {
                id: rec.subject_id.clone(),
                image: read_volume(&rec.image_path)?,
                post_image: None,
                truth: read_label_map(label)?,
            });
        }
        evaluate_model(&model, &subjects)?
            .into_iter()
            .map(|r| DscRecord { kind, ..r })
            .collect()
    } else {
        return Err(Error::Invalid("give --pred and --truth, or --model and --manifest".into()));
    };
    let text = match a.format {
        Format::Csv => {
            let mut buf = Vec::new();
            write_metrics_csv(&mut buf, &records)?;
            String::from_utf8(buf).expect("csv output is utf-8")
        }
        Format::Json => serde_json::to_string_pretty(&records)? + "\n",
        Format::Md => {
            let mut s = String::from("| subject | kind | mean DSC | per label |\n|---|---|---|---|\n");
            for r in &records {
                let labels: Vec<String> = r
                    .per_label
                    .iter()
                    .map(|(l, d)| match d {
                        Some(d) => format!("{l}: {d:.4}"),
                        None => format!("{l}: -"),
                    })
                    .collect();
                let _ = writeln!(
                    s,
                    "| {} | {} | {:.4} | {} |",
                    r.subject_id,
                    r.kind.as_str(),
                    r.mean_dsc,
                    labels.join(", ")
                );
            }
            s
        }
    };
    emit(&text, a.out.as_deref())
}

fn emit(text: &str, out: Option<&Path>) -> Result {
    match out {
        Some(p) => write_text(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn csv_columns(path: &Path, x: &str, y: &str) -> Result<(Vec<f64>, Vec<f64>)> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut rdr = csv::Reader::from_reader(file);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Invalid(format!("column {name:?} not in {}", path.display())))
    };
    let (ix, iy) = (col(x)?, col(y)?);
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let parse = |i: usize| -> Result<f64> {
            let cell = rec.get(i).unwrap_or("");
            cell.trim()
                .parse()
                .map_err(|_| Error::Invalid(format!("row {}: {cell:?} is not a number", row + 1)))
        };
        xs.push(parse(ix)?);
        ys.push(parse(iy)?);
    }
    Ok((xs, ys))
}

fn cmd_stats(a: StatsArgs) -> Result {
    let (x, y) = csv_columns(&a.input, &a.x, &a.y)?;
    let r = wilcoxon_signed_rank(&x, &y)?.with_comparisons(a.alpha, a.comparisons)?;
    let text = match a.format {
        Format::Json => serde_json::to_string_pretty(&r)? + "\n",
        Format::Csv => format!(
            "x,y,n_pairs,W,p,exact,threshold,significant\n{},{},{},{},{},{},{},{}\n",
            a.x, a.y, r.n_pairs, r.w_plus, r.p_two_sided, r.exact, r.bonferroni_alpha, r.significant
        ),
        Format::Md => format!(
            "| comparison | n | W | p | threshold | significant |\n|---|---|---|---|---|---|\n| {} vs {} | {} | {} | {:.4} | {:.4} | {} |\n",
            a.x,
            a.y,
            r.n_pairs,
            r.w_plus,
            r.p_two_sided,
            r.bonferroni_alpha,
            if r.significant { "*" } else { "" }
        ),
    };
    print!("{text}");
    Ok(())
}

fn cmd_experiment(a: ExperimentArgs) -> Result {
    let spec = load_spec(&a.spec, a.seed)?;
    let out = a
        .out
        .or_else(|| spec.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("results").join(&spec.name));
    let output = run_experiment(&spec)?;
    write_experiment_outputs(&output, &out)?;
    print!("{}", render_markdown(&output.report)?);
    println!("\nwrote {}", out.display());
    Ok(())
}

fn cmd_report(a: ReportArgs) -> Result {
    let report = ExperimentReport::from_json(&read_text(&a.report)?)?;
    match a.format {
        Format::Md => {
            let md = render_markdown(&report)?;
            emit(&md, a.out.as_ref().map(|d| d.join("report.md")).as_deref())
        }
        Format::Json => {
            let json = report.to_json()?;
            emit(&json, a.out.as_ref().map(|d| d.join("report.json")).as_deref())
        }
        Format::Csv => {
            let dir = a
                .out
                .unwrap_or_else(|| a.report.parent().map(Path::to_path_buf).unwrap_or_default());
            for p in write_panel_csvs(&report, &dir)? {
                println!("wrote {}", p.display());
            }
            Ok(())
        }
    }
}
