use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use scalesiam::checkpoint::{load_checkpoint, save_checkpoint};
use scalesiam::error::{Result, TrackError};
use scalesiam::eval::{
    bench_conv, config_hash, ope_eval, translation_diagnostic, write_bench_csv, write_report, BenchSize, ModelTracker,
};
use scalesiam::experiment::precision_threshold;
use scalesiam::tracker::Tracker;
use scalesiam::trainer::{initial_model, train, write_loss_csv, TrainConfig};
use scalesiam_core::init_transfer::transfer_model;
use scalesiam_core::network::{ModelConfig, ModelKind, SiameseModel};
use scalesiam_core::scale_ops::PaddingPolicy;
use scalesiam_sim::{
    dataset_checksum, generate_dataset, read_dataset, render_sequence, write_dataset, BackgroundSource, DatasetSpec,
    GlyphSource, Mode, Sequence, SequenceSpec,
};

#[derive(Parser)]
#[command(name = "scalesiam", version, about = "Scale-equivariant Siamese tracking on synthetic digits")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Baseline,
    Se,
}

impl From<KindArg> for ModelKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Baseline => ModelKind::Baseline,
            KindArg::Se => ModelKind::ScaleEquivariant,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    T,
    S,
}

#[derive(Clone, Copy, ValueEnum)]
enum PadArg {
    Same,
    Circular,
    Zero,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a T- or S-mode dataset.
    GenData {
        #[arg(long, default_value = "desk")]
        preset: String,
        #[arg(long, value_enum, default_value = "s")]
        mode: ModeArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Dataset spec JSON; replaces the preset.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        train: Option<usize>,
        #[arg(long)]
        val: Option<usize>,
        /// MNIST IDX3 image file; procedural digits otherwise.
        #[arg(long)]
        mnist: Option<PathBuf>,
        /// Directory of .pgm backgrounds; value noise otherwise.
        #[arg(long)]
        backgrounds: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a tracker and write model.json and loss.csv.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "baseline")]
        kind: KindArg,
        /// Training config JSON.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Model config JSON; the desk preset otherwise.
        #[arg(long)]
        model_config: Option<PathBuf>,
        /// Starting checkpoint; a conventional one is transferred into an SE model.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        pairs_per_epoch: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Track one sequence and write per-frame boxes as JSON lines.
    Track {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        sequence: String,
        #[arg(long, default_value = "val")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// One-pass evaluation: report.json, curves.csv, scale_trace.csv.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        /// Centre-error threshold in pixels; 20 px per 256 px of frame otherwise.
        #[arg(long)]
        precision_px: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Heatmap shift against circular input shift.
    DiagTranslation {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value = "circular")]
        padding: PadArg,
        #[arg(long, default_value_t = 16)]
        max_shift: usize,
        #[arg(long, default_value_t = 96)]
        image_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fast 1x1 layer against the general scale-convolution.
    BenchConv {
        #[arg(long, default_value_t = 10)]
        warmup: usize,
        #[arg(long, default_value_t = 100)]
        runs: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Initialize an SE model from a conventional checkpoint.
    TransferInit {
        #[arg(long)]
        source: PathBuf,
        /// SE model config JSON; the source config with kind switched otherwise.
        #[arg(long)]
        model_config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| TrackError::Config(format!("{}: {}", path.display(), e)))?;
    serde_json::from_str(&text).map_err(|e| TrackError::Config(format!("{}: {}", path.display(), e)))
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, text).map_err(|e| TrackError::Io { path: path.to_path_buf(), source: e })
}

fn mkdir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| TrackError::Io { path: path.to_path_buf(), source: e })
}

fn split<'a>(ds: &'a scalesiam_sim::Dataset, name: &str) -> Result<&'a [Sequence]> {
    match name {
        "train" => Ok(&ds.train),
        "val" => Ok(&ds.val),
        _ => Err(TrackError::Config(format!("unknown split {:?}", name))),
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenData { preset, mode, seed, config, train, val, mnist, backgrounds, out } => {
            let mode = match mode {
                ModeArg::T => Mode::Translation,
                ModeArg::S => Mode::Scale,
            };
            let mut spec = match config {
                Some(p) => read_json::<DatasetSpec>(&p)?,
                None => DatasetSpec::preset(&preset, mode, seed)?,
            };
            spec.train = train.unwrap_or(spec.train);
            spec.val = val.unwrap_or(spec.val);
            let glyphs = match mnist {
                Some(p) => GlyphSource::from_idx(&p)?,
                None => GlyphSource::Procedural,
            };
            let bg = match backgrounds {
                Some(d) => BackgroundSource::from_dir(&d)?,
                None => BackgroundSource::ValueNoise,
            };
            let ds = generate_dataset(&spec, &glyphs, &bg)?;
            write_dataset(&out, &ds)?;
            println!("checksum {}", dataset_checksum(&out)?);
        }
        Cmd::Train { data, kind, config, model_config, init, epochs, seed, pairs_per_epoch, out } => {
            let kind: ModelKind = kind.into();
            let mut tc = match config {
                Some(p) => read_json::<TrainConfig>(&p)?,
                None => TrainConfig::default(),
            };
            tc.epochs = epochs.unwrap_or(tc.epochs);
            tc.seed = seed.unwrap_or(tc.seed);
            tc.pairs_per_epoch = pairs_per_epoch.or(tc.pairs_per_epoch);
            let mut mc = match model_config {
                Some(p) => read_json::<ModelConfig>(&p)?,
                None => ModelConfig::desk(kind),
            };
            mc.kind = kind;
            let ds = read_dataset(&data)?;
            let model: SiameseModel<f32> = match init {
                None => initial_model(kind, &mc, tc.seed)?,
                Some(p) => {
                    let src = load_checkpoint::<f32>(&p, None)?;
                    if src.config.kind == kind {
                        src
                    } else if kind == ModelKind::ScaleEquivariant {
                        let mut se = SiameseModel::build(&mc)?;
                        transfer_model(&src, &mut se)?;
                        se
                    } else {
                        return Err(TrackError::Checkpoint("a scale-equivariant checkpoint cannot initialize a baseline".into()));
                    }
                }
            };
            mkdir(&out)?;
            let outcome = train(model, &ds.train, &tc, |r| {
                if r.step == 0 {
                    eprintln!("epoch {} loss {:.5}", r.epoch, r.loss);
                }
            })?;
            save_checkpoint(&out.join("model.json"), &outcome.model)?;
            write_loss_csv(&out.join("loss.csv"), &outcome.losses)?;
            write(&out.join("train_config.json"), serde_json::to_string_pretty(&tc).expect("serializable"))?;
        }
        Cmd::Track { model, data, sequence, split: sp, out } => {
            let m = load_checkpoint::<f32>(&model, None)?;
            let ds = read_dataset(&data)?;
            let seq = split(&ds, &sp)?
                .iter()
                .find(|s| s.name == sequence)
                .ok_or_else(|| TrackError::Config(format!("no sequence {} in split {}", sequence, sp)))?;
            let (tracker, mut state) = Tracker::init(m, &seq.frames[0].to_tensor(), seq.target(0).bbox)?;
            let mut lines = String::new();
            let mut push = |t: usize, s: &scalesiam::TrackState| {
                lines.push_str(&serde_json::json!({ "frame": t, "box": s.bbox, "scale": s.scale }).to_string());
                lines.push('\n');
            };
            push(0, &state);
            for (t, f) in seq.frames.iter().enumerate().skip(1) {
                state = tracker.step(&state, &f.to_tensor())?.0;
                push(t, &state);
            }
            mkdir(&out)?;
            write(&out.join("boxes.jsonl"), lines)?;
        }
        Cmd::Eval { model, data, split: sp, precision_px, out } => {
            let m = load_checkpoint::<f32>(&model, None)?;
            let ds = read_dataset(&data)?;
            let px = precision_px.unwrap_or_else(|| precision_threshold(ds.spec.sequence.frame_size));
            let hash = config_hash(&m.config);
            let report = ope_eval(&mut ModelTracker { model: m }, split(&ds, &sp)?, px, hash, ds.spec.sequence.seed)?;
            write_report(&out, &report)?;
            println!("auc {:.4} precision {:.4}", report.auc, report.precision);
        }
        Cmd::DiagTranslation { model, padding, max_shift, image_size, seed, out } => {
            let m = load_checkpoint::<f32>(&model, None)?;
            let mut spec = SequenceSpec::desk(Mode::Translation, seed);
            spec.frame_size = image_size;
            spec.length = 1;
            let seq = render_sequence("diag", &spec, &GlyphSource::Procedural, &BackgroundSource::ValueNoise)?;
            let policy = match padding {
                PadArg::Same => PaddingPolicy::Same,
                PadArg::Circular => PaddingPolicy::Circular,
                PadArg::Zero => PaddingPolicy::Zero,
            };
            let d = translation_diagnostic(&m, &seq.frames[0].to_tensor::<f32>(), policy, max_shift)?;
            mkdir(&out)?;
            let mut csv = String::from("input_shift,heatmap_shift\n");
            for (a, b) in &d.table {
                csv.push_str(&format!("{},{}\n", a, b));
            }
            write(&out.join("diag.csv"), csv)?;
            write(&out.join("diag.json"), serde_json::to_string_pretty(&d).expect("serializable"))?;
            println!("slope {:.4} max_residual {:.3} flagged {}", d.slope, d.max_residual, d.flagged);
        }
        Cmd::BenchConv { warmup, runs, out } => {
            mkdir(&out)?;
            let mut rows = Vec::new();
            for size in [BenchSize::mid(), BenchSize::tiny()] {
                let r = bench_conv(&size, warmup, runs)?;
                println!("{} speedup {:.2}", size.label(), r.speedup);
                rows.extend(r.rows);
            }
            write_bench_csv(&out.join("bench.csv"), &rows)?;
        }
        Cmd::TransferInit { source, model_config, out } => {
            let src = load_checkpoint::<f64>(&source, Some(ModelKind::Baseline))?;
            let mut mc = match model_config {
                Some(p) => read_json::<ModelConfig>(&p)?,
                None => src.config.clone(),
            };
            mc.kind = ModelKind::ScaleEquivariant;
            let mut se = SiameseModel::<f64>::build(&mc)?;
            transfer_model(&src, &mut se)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                mkdir(dir)?;
            }
            save_checkpoint(&out, &se)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("error: {}", first);
            return ExitCode::from(2);
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
