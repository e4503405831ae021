//! `flsn` — command-line entry point for the sonar perception toolkit.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 training
//! divergence.

use clap::{Args, Parser, Subcommand, ValueEnum};
use std::path::PathBuf;
use std::process::ExitCode;

use flsn_core::pipelines::{
    eval_proposals, run_classification, run_detector, run_matching, run_proposals, run_tracker,
    run_transfer, ExperimentSpec, NetChoice, PipelineKind, ScorerKind,
};
use flsn_core::synth::{generate_frames, save_dataset, SceneConfig, SequenceConfig};
use flsn_core::zoo::{MatcherHead, MatcherKind, ObjectnessKind, Reg};

#[derive(Parser)]
#[command(
    name = "flsn",
    about = "CPU-only sonar image perception toolkit: synthetic scenes, CNN training, detection proposals, and tracking",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Master seed for data generation, initialization, and shuffling
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for reports, curves, and models
    #[arg(long, default_value = "runs/out")]
    out: PathBuf,
    /// JSON spec file (scene config for `gen`, experiment spec otherwise);
    /// command-line flags override its fields
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Cap the worker thread count (SONARP_THREADS is honored when unset)
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum NetKind {
    Classic,
    Tiny,
    Fire,
}

#[derive(Clone, Copy, ValueEnum)]
enum RegChoice {
    Bn,
    Dropout,
    None,
}

#[derive(Clone, Copy, ValueEnum)]
enum MatcherChoice {
    TwoChannel,
    Siamese,
}

#[derive(Clone, Copy, ValueEnum)]
enum HeadChoice {
    Class,
    Score,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitChoice {
    Shared,
    Disjoint,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScorerChoice {
    Patch,
    Fcn,
    Tm,
}

#[derive(Clone, Copy, ValueEnum)]
enum ObjChoice {
    Classic,
    Tiny,
}

#[derive(Args, Clone)]
struct TrainFlags {
    /// Training epochs (0 picks the per-pipeline default)
    #[arg(long, default_value_t = 0)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 0.001)]
    lr: f32,
    /// Seed replications to average over
    #[arg(long, default_value_t = 3)]
    seeds: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic sonar dataset directory
    Gen {
        #[command(flatten)]
        common: Common,
        /// Number of frames to render
        #[arg(long, default_value_t = 16)]
        frames: usize,
    },
    /// Train and evaluate an image classifier
    TrainCls {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainFlags,
        #[arg(long, value_enum, default_value_t = NetKind::Classic)]
        net: NetKind,
        #[arg(long, default_value_t = 2)]
        modules: usize,
        #[arg(long, default_value_t = 16)]
        filters: usize,
        #[arg(long, value_enum, default_value_t = RegChoice::Bn)]
        reg: RegChoice,
        /// Training samples per class
        #[arg(long, default_value_t = 30)]
        spc: usize,
        /// Samples-per-class sweep grid (comma separated)
        #[arg(long, value_delimiter = ',')]
        spc_grid: Vec<usize>,
        /// Input image size sweep grid (comma separated)
        #[arg(long, value_delimiter = ',')]
        sizes: Vec<usize>,
    },
    /// Train and evaluate a patch matcher (ROC/AUC)
    TrainMatch {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainFlags,
        #[arg(long, value_enum, default_value_t = MatcherChoice::TwoChannel)]
        matcher: MatcherChoice,
        #[arg(long, value_enum, default_value_t = HeadChoice::Class)]
        head: HeadChoice,
        /// Object instances per class in the pair pool
        #[arg(long, default_value_t = 6)]
        ipc: usize,
        #[arg(long, value_enum, default_value_t = SplitChoice::Shared)]
        split: SplitChoice,
    },
    /// Train the patch objectness regressor (and its FCN conversion)
    TrainObj {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainFlags,
        #[arg(long, value_enum, default_value_t = ObjChoice::Tiny)]
        obj: ObjChoice,
        /// Training frames to synthesize
        #[arg(long, default_value_t = 8)]
        frames: usize,
        /// Window stride when building the training set
        #[arg(long, default_value_t = 32)]
        data_stride: usize,
        /// Objectness squash epsilon
        #[arg(long, default_value_t = 0.2)]
        eps: f64,
    },
    /// Frozen-feature transfer learning with a linear SVM per layer
    Transfer {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainFlags,
        /// Layer names to evaluate (default: every tapped layer)
        #[arg(long, value_delimiter = ',')]
        layers: Vec<String>,
        #[arg(long, default_value_t = 30)]
        spc: usize,
    },
    /// Generate and evaluate detection proposals (threshold, top-k, NMS sweeps)
    Propose {
        #[command(flatten)]
        common: Common,
        /// Trained objectness model (.flsn); trains one when omitted
        #[arg(long)]
        model: Option<PathBuf>,
        /// Saved dataset directory to evaluate on (synthetic when omitted)
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = ScorerChoice::Fcn)]
        scorer: ScorerChoice,
        /// Objectness threshold T_o for the exported proposals
        #[arg(long, default_value_t = 0.5)]
        to: f32,
        /// NMS overlap threshold S_t
        #[arg(long, default_value_t = 0.7)]
        st: f64,
        /// Window stride of the proposal grid
        #[arg(long, default_value_t = 8)]
        stride: usize,
        /// Templates for the TM baseline scorer
        #[arg(long, default_value_t = 25)]
        tm_templates: usize,
    },
    /// Train and evaluate the dual-head detector
    Detect {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainFlags,
        /// Multi-task loss weight sweep
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.5f32, 1.0, 2.0, 3.0, 4.0])]
        gamma: Vec<f32>,
        /// Replace the class head with a frozen-feature linear SVM
        #[arg(long, default_value_t = false)]
        svm_head: bool,
        /// Window stride for evaluation
        #[arg(long, default_value_t = 16)]
        stride: usize,
    },
    /// Track a drifting object through a synthetic sequence
    Track {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        obj_model: Option<PathBuf>,
        #[arg(long)]
        match_model: Option<PathBuf>,
        #[arg(long, default_value_t = 12)]
        frames: usize,
        /// Object class of the tracked target
        #[arg(long, default_value_t = 8)]
        class: usize,
        #[arg(long, default_value_t = 7)]
        drift_x: i64,
        #[arg(long, default_value_t = 3)]
        drift_y: i64,
    },
    /// Evaluate stored proposals against a dataset's ground truth
    Eval {
        #[command(flatten)]
        common: Common,
        /// Proposals CSV (image_id,x,y,w,h,score[,class])
        #[arg(long)]
        proposals: PathBuf,
        /// Dataset directory with annotations
        #[arg(long)]
        data: PathBuf,
        /// IoU overlap threshold O_t
        #[arg(long, default_value_t = 0.5)]
        ot: f64,
    },
    /// Wall-clock micro-benchmarks of the core operations
    Bench {
        #[command(flatten)]
        common: Common,
        /// Model to time single-patch inference for
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        reps: usize,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                flsn_core::Error::Diverged { .. } => 3,
                _ => 2,
            };
            ExitCode::from(code)
        }
    }
}

fn setup_threads(common: &Common) {
    let count = common.threads.or_else(|| {
        std::env::var("SONARP_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    if let Some(n) = count {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn base_spec(common: &Common, kind: PipelineKind) -> flsn_core::Result<ExperimentSpec> {
    let mut spec = match &common.spec {
        Some(path) => ExperimentSpec::from_json_file(path)?,
        None => ExperimentSpec::default(),
    };
    spec.kind = kind;
    spec.seed = common.seed;
    spec.out_dir = common.out.clone();
    Ok(spec)
}

fn apply_train(spec: &mut ExperimentSpec, train: &TrainFlags) {
    spec.epochs = train.epochs;
    spec.batch_size = train.batch;
    spec.learning_rate = train.lr;
    spec.seeds = train.seeds;
}

fn execute(cli: Cli) -> flsn_core::Result<()> {
    match cli.command {
        Command::Gen { common, frames } => {
            setup_threads(&common);
            let mut scene = match &common.spec {
                Some(path) => {
                    let text = std::fs::read_to_string(path)?;
                    serde_json::from_str::<SceneConfig>(&text)?
                }
                None => SceneConfig::default(),
            };
            scene.seed = common.seed;
            let rendered = generate_frames(&scene, frames)?;
            save_dataset(&rendered, &scene, &common.out)?;
            println!("gen: {frames} frames -> {}", common.out.display());
        }
        Command::TrainCls {
            common,
            train,
            net,
            modules,
            filters,
            reg,
            spc,
            spc_grid,
            sizes,
        } => {
            setup_threads(&common);
            let mut spec = base_spec(&common, PipelineKind::Classification)?;
            apply_train(&mut spec, &train);
            let reg = match reg {
                RegChoice::Bn => Reg::BatchNorm,
                RegChoice::Dropout => Reg::Dropout,
                RegChoice::None => Reg::None,
            };
            spec.network = match net {
                NetKind::Classic => NetChoice::Classic { modules, filters, reg },
                NetKind::Tiny => NetChoice::Tiny { modules, filters },
                NetKind::Fire => NetChoice::Fire { modules, filters },
            };
            spec.spc = spc;
            spec.spc_grid = spc_grid;
            spec.image_sizes = sizes;
            let report = run_classification(&spec)?;
            let last = report.rows.last().expect("at least one row");
            println!(
                "train-cls: mean accuracy {:.4} (std {:.4}) over {} runs -> {}",
                last[2],
                last[3],
                last[1],
                spec.out_dir.display()
            );
        }
        Command::TrainMatch {
            common,
            train,
            matcher,
            head,
            ipc,
            split,
        } => {
            setup_threads(&common);
            let mut spec = base_spec(&common, PipelineKind::Matching)?;
            apply_train(&mut spec, &train);
            spec.batch_size = if train.batch == 64 { 128 } else { train.batch };
            spec.matcher_kind = match matcher {
                MatcherChoice::TwoChannel => MatcherKind::TwoChannel,
                MatcherChoice::Siamese => MatcherKind::Siamese,
            };
            spec.matcher_head = match head {
                HeadChoice::Class => MatcherHead::Class2Softmax,
                HeadChoice::Score => MatcherHead::ScoreSigmoid,
            };
            spec.instances_per_class = ipc;
            spec.split_mode = match split {
                SplitChoice::Shared => flsn_core::synth::SplitMode::Shared,
                SplitChoice::Disjoint => flsn_core::synth::SplitMode::Disjoint,
            };
            let (curve, _) = run_matching(&spec)?;
            println!("train-match: AUC {:.4} -> {}", curve.auc, spec.out_dir.display());
        }
        Command::TrainObj {
            common,
            train,
            obj,
            frames,
            data_stride,
            eps,
        } => {
            setup_threads(&common);
            let mut spec = base_spec(&common, PipelineKind::Proposals)?;
            apply_train(&mut spec, &train);
            spec.objectness_kind = match obj {
                ObjChoice::Classic => ObjectnessKind::Classic,
                ObjChoice::Tiny => ObjectnessKind::Tiny,
            };
            spec.train_frames = frames;
            spec.data_stride = data_stride;
            spec.eps = eps;
            spec.prepare_dirs()?;
            let mut scene = spec.scene.clone();
            scene.seed = flsn_core::synth::frame_seed(spec.seed, 0xF0A);
            let train_frames = flsn_core::synth::generate_frames(&scene, spec.train_frames)?;
            let net = flsn_core::pipelines::train_objectness_net(&spec, &train_frames)?;
            let model_path = spec.out_dir.join("models/objectness.flsn");
            flsn_core::zoo::save_model(&net, &model_path)?;
            let mut fcn_note = String::new();
            if matches!(spec.objectness_kind, ObjectnessKind::Tiny) {
                let fcn = flsn_core::zoo::to_fcn(&net)?;
                let fcn_path = spec.out_dir.join("models/objectness_fcn.flsn");
                flsn_core::zoo::save_model(&fcn, &fcn_path)?;
                fcn_note = format!(" (+ FCN {})", fcn_path.display());
            }
            println!("train-obj: model {}{}", model_path.display(), fcn_note);
        }
        Command::Transfer {
            common,
            train,
            layers,
            spc,
        } => {
            setup_threads(&common);
            let mut spec = base_spec(&common, PipelineKind::Transfer)?;
            apply_train(&mut spec, &train);
            spec.transfer_layers = layers;
            spec.spc = spc;
            let report = run_transfer(&spec)?;
            let best = report
                .rows
                .iter()
                .map(|r| r[1])
                .fold(f64::NEG_INFINITY, f64::max);
            println!(
                "transfer: best layer accuracy {:.4} over {} layers -> {}",
                best,
                report.rows.len(),
                spec.out_dir.display()
            );
        }
        Command::Propose {
            common,
            model,
            data,
            scorer,
            to,
            st,
            stride,
            tm_templates,
        } => {
            setup_threads(&common);
            let mut spec = base_spec(&common, PipelineKind::Proposals)?;
            spec.obj_model = model;
            spec.data_dir = data;
            spec.scorer = match scorer {
                ScorerChoice::Patch => ScorerKind::Patch,
                ScorerChoice::Fcn => ScorerKind::Fcn,
                ScorerChoice::Tm => ScorerKind::Tm,
            };
            spec.st = st;
            spec.window_stride = stride;
            spec.tm_templates = tm_templates;
            let report = run_proposals(&spec)?;
            // the report row closest to the requested T_o
            let row = report
                .rows
                .iter()
                .min_by(|a, b| {
                    (a[0] - to as f64)
                        .abs()
                        .partial_cmp(&(b[0] - to as f64).abs())
                        .unwrap()
                })
                .expect("nonempty sweep");
            println!(
                "propose: recall {:.4} with {:.1} proposals/frame at T_o={:.2} -> {}",
                row[1],
                row[2],
                row[0],
                spec.out_dir.display()
            );
        }
        Command::Detect {
            common,
            train,
            gamma,
            svm_head,
            stride,
        } => {
            setup_threads(&common);
            let mut spec = base_spec(&common, PipelineKind::Detector)?;
            apply_train(&mut spec, &train);
            spec.gamma_grid = gamma;
            spec.svm_head = svm_head;
            spec.window_stride = stride;
            let report = run_detector(&spec)?;
            // best accuracy row at T_o = 0.5
            let best = report
                .rows
                .iter()
                .filter(|r| (r[1] - 0.5).abs() < 1e-6)
                .max_by(|a, b| a[3].partial_cmp(&b[3]).unwrap());
            if let Some(row) = best {
                println!(
                    "detect: gamma {:.1} recall {:.4} accuracy {:.4} at T_o=0.5 -> {}",
                    row[0],
                    row[2],
                    row[3],
                    spec.out_dir.display()
                );
            }
        }
        Command::Track {
            common,
            obj_model,
            match_model,
            frames,
            class,
            drift_x,
            drift_y,
        } => {
            setup_threads(&common);
            let mut spec = base_spec(&common, PipelineKind::Tracker)?;
            spec.obj_model = obj_model;
            spec.match_model = match_model;
            if spec.sequence.is_none() {
                spec.sequence = Some(SequenceConfig {
                    scene: SceneConfig {
                        seed: flsn_core::synth::frame_seed(spec.seed, 0x5E0),
                        ..spec.scene.clone()
                    },
                    frames,
                    class,
                    start_x: spec.scene.width as i64 / 2 - 110,
                    start_y: 40,
                    drift_x,
                    drift_y,
                });
            }
            let report = run_tracker(&spec)?;
            let at_half = report
                .rows
                .iter()
                .find(|r| (r[0] - 0.5).abs() < 1e-9)
                .expect("O_t = 0.5 row");
            println!(
                "track: CTF at O_t=0.5 matcher {:.3} cc-baseline {:.3} -> {}",
                at_half[1],
                at_half[2],
                spec.out_dir.display()
            );
        }
        Command::Eval {
            common,
            proposals,
            data,
            ot,
        } => {
            setup_threads(&common);
            let report = eval_proposals(&data, &proposals, ot)?;
            std::fs::create_dir_all(&common.out)?;
            report.save(common.out.join("report.csv"))?;
            let aggregate = report.rows.last().expect("aggregate row");
            println!(
                "eval: recall {:.4} abo {:.4} over {} frames -> {}",
                aggregate[1],
                aggregate[3],
                report.rows.len() - 1,
                common.out.display()
            );
        }
        Command::Bench { common, model, reps } => {
            setup_threads(&common);
            use flsn_core::metrics::bench;
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(common.seed);
            let patch = flsn_core::Tensor::new(
                vec![1, 96, 96],
                (0..96 * 96).map(|_| rng.gen_range(0.0..1.0)).collect(),
            )?;
            let mut report = flsn_core::metrics::EvalReport::new(&["op", "mean_ms", "std_ms"]);
            let mut print_row = |op: usize, name: &str, stats: (f64, f64)| {
                println!("bench {name}: {:.3} ms (std {:.3})", stats.0, stats.1);
                report.push(vec![op as f64, stats.0, stats.1]);
            };

            let w = flsn_core::layers::init_weights(
                &flsn_core::layers::WeightInit::Glorot,
                &[16, 1, 5, 5],
                &mut rng,
            )?;
            let b = flsn_core::Tensor::zeros(&[16]);
            print_row(
                0,
                "conv2d 16f 5x5 on 96x96",
                bench(|| {
                    let _ = flsn_core::layers::conv2d_forward(&patch, &w, &b, 1, 2).unwrap();
                }, reps)?,
            );

            let t = flsn_core::Tensor::new(
                vec![1, 96, 96],
                (0..96 * 96).map(|_| rng.gen_range(0.0..1.0)).collect(),
            )?;
            print_row(
                1,
                "cc similarity 96x96",
                bench(|| {
                    let _ = flsn_core::tmatch::cc_similarity(&t, &patch).unwrap();
                }, reps)?,
            );

            let boxes: Vec<flsn_core::geometry::BoundingBox> = (0..300)
                .map(|_| {
                    flsn_core::geometry::BoundingBox::new(
                        rng.gen_range(0..400),
                        rng.gen_range(0..250),
                        96,
                        96,
                    )
                    .with_score(rng.gen_range(0.0..1.0))
                })
                .collect();
            print_row(
                2,
                "nms over 300 windows",
                bench(|| {
                    let _ = flsn_core::geometry::nms(&boxes, 0.7).unwrap();
                }, reps)?,
            );

            let scene = SceneConfig { seed: common.seed, ..SceneConfig::default() };
            print_row(
                3,
                "scene generation 480x320",
                bench(|| {
                    let _ = flsn_core::synth::generate_scene(&scene, 0).unwrap();
                }, reps.min(20).max(2))?,
            );

            if let Some(path) = model {
                let net = flsn_core::zoo::load_model(path)?;
                print_row(
                    4,
                    "model inference (96x96 patch)",
                    bench(|| {
                        let _ = net.infer_single(&patch).unwrap();
                    }, reps)?,
                );
            }
            std::fs::create_dir_all(&common.out)?;
            report.save(common.out.join("bench.csv"))?;
        }
    }
    Ok(())
}
