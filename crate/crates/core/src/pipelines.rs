//! End-to-end experiment drivers: classifier training/eval, transfer
//! learning, matcher training/eval, proposal generation/eval, the dual-head
//! detector, and tracking-by-matching.
//!
//! Every pipeline is a pure function of its [`ExperimentSpec`]: datasets,
//! initialization, shuffling, and sweeps all derive from the spec seed, so a
//! rerun writes byte-identical artifacts under the output directory
//! (`report.csv`, `curves/*.csv`, `models/*.flsn`).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geometry::{
    nms, score_windows, select_by_threshold, select_top_k, sliding_windows, BoundingBox, FcnScorer,
    PatchNetScorer, WindowScorer,
};
use crate::graph::{BatchInput, BatchOutput, NetworkGraph, OutputContract};
use crate::metrics::{
    average_best_overlap, ctf, detection_recall, mean_std, roc_auc, EvalReport, RocCurve,
};
use crate::optim::{train, LossKind, SampleInput, Target, TrainConfig, TrainSet};
use crate::synth::{
    crop_centered, frame_seed, generate_scene, generate_sequence, make_classification_set,
    make_matching_set, make_objectness_set, MatchPair, PairKind, SceneConfig, SequenceConfig,
    SonarFrame, SplitMode, BACKGROUND_CLASS, OBJECT_CLASSES, PATCH,
};
use crate::tensor::Tensor;
use crate::tmatch::{cc_similarity, TmScorer};
use crate::zoo::{
    build_classic_net, build_detector, build_fire_net, build_matcher, build_objectness_net,
    build_tiny_net, load_model, save_model, to_fcn, MatcherHead, MatcherKind, ObjectnessKind, Reg,
};

// ---------------------------------------------------------------------------
// Experiment specification
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PipelineKind {
    Classification,
    Transfer,
    Matching,
    Proposals,
    Detector,
    Tracker,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NetChoice {
    Classic { modules: usize, filters: usize, reg: Reg },
    Tiny { modules: usize, filters: usize },
    Fire { modules: usize, filters: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScorerKind {
    /// Per-window forward passes through the patch objectness network.
    Patch,
    /// Dense fully-convolutional map, bilinear reads at window centers.
    Fcn,
    /// Sliding cross-correlation against sampled templates.
    Tm,
}

fn default_to_grid() -> Vec<f32> {
    (1..=20).map(|i| i as f32 * 0.05).collect()
}

fn default_k_grid() -> Vec<usize> {
    let mut grid: Vec<usize> = (1..=10).collect();
    grid.extend((2..=10).map(|i| i * 10));
    grid
}

fn default_st_grid() -> Vec<f64> {
    vec![0.5, 0.6, 0.7, 0.8, 0.9]
}

fn default_gamma_grid() -> Vec<f32> {
    vec![0.5, 1.0, 2.0, 3.0, 4.0]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    pub kind: PipelineKind,
    pub scene: SceneConfig,
    pub out_dir: PathBuf,
    pub seed: u64,
    /// Replications with different init/shuffle seeds (thesis-scale 10).
    pub seeds: usize,
    pub network: NetChoice,
    pub spc: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    /// 0 picks the per-pipeline default.
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub spc_grid: Vec<usize>,
    pub image_sizes: Vec<usize>,
    pub matcher_kind: MatcherKind,
    pub matcher_head: MatcherHead,
    pub instances_per_class: usize,
    pub split_mode: SplitMode,
    pub scorer: ScorerKind,
    pub objectness_kind: ObjectnessKind,
    pub train_frames: usize,
    pub test_frames: usize,
    /// Window stride when building the objectness training set.
    pub data_stride: usize,
    /// Window stride of the proposal grid.
    pub window_stride: usize,
    pub eps: f64,
    pub o_t: f64,
    pub to_grid: Vec<f32>,
    pub k_grid: Vec<usize>,
    pub st_grid: Vec<f64>,
    /// Fixed NMS threshold for the T_o and top-k sweeps.
    pub st: f64,
    pub gamma: f32,
    pub gamma_grid: Vec<f32>,
    pub tm_templates: usize,
    pub svm_head: bool,
    pub svm_c: f64,
    pub transfer_layers: Vec<String>,
    pub sequence: Option<SequenceConfig>,
    pub obj_model: Option<PathBuf>,
    pub match_model: Option<PathBuf>,
    /// When set, evaluation frames come from this saved dataset directory
    /// instead of freshly generated scenes.
    pub data_dir: Option<PathBuf>,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            kind: PipelineKind::Classification,
            scene: SceneConfig::default(),
            out_dir: PathBuf::from("runs/out"),
            seed: 0,
            seeds: 3,
            network: NetChoice::Classic {
                modules: 2,
                filters: 16,
                reg: Reg::BatchNorm,
            },
            spc: 30,
            val_per_class: 6,
            test_per_class: 10,
            epochs: 0,
            batch_size: 64,
            learning_rate: 0.001,
            spc_grid: Vec::new(),
            image_sizes: Vec::new(),
            matcher_kind: MatcherKind::TwoChannel,
            matcher_head: MatcherHead::Class2Softmax,
            instances_per_class: 6,
            split_mode: SplitMode::Shared,
            scorer: ScorerKind::Fcn,
            objectness_kind: ObjectnessKind::Tiny,
            train_frames: 8,
            test_frames: 4,
            data_stride: 32,
            window_stride: 8,
            eps: 0.2,
            o_t: 0.5,
            to_grid: default_to_grid(),
            k_grid: default_k_grid(),
            st_grid: default_st_grid(),
            st: 0.7,
            gamma: 3.0,
            gamma_grid: default_gamma_grid(),
            tm_templates: 25,
            svm_head: false,
            svm_c: 1.0,
            transfer_layers: Vec::new(),
            sequence: None,
            obj_model: None,
            match_model: None,
            data_dir: None,
        }
    }
}

impl ExperimentSpec {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    fn curves_dir(&self) -> PathBuf {
        self.out_dir.join("curves")
    }

    fn models_dir(&self) -> PathBuf {
        self.out_dir.join("models")
    }

    pub fn prepare_dirs(&self) -> Result<()> {
        std::fs::create_dir_all(self.curves_dir())?;
        std::fs::create_dir_all(self.models_dir())?;
        Ok(())
    }

    fn epochs_or(&self, default: usize) -> usize {
        if self.epochs == 0 {
            default
        } else {
            self.epochs
        }
    }
}

/// Run the pipeline selected by `spec.kind` and return its report (which is
/// also written to `out_dir/report.csv`).
pub fn run(spec: &ExperimentSpec) -> Result<EvalReport> {
    match spec.kind {
        PipelineKind::Classification => run_classification(spec),
        PipelineKind::Transfer => run_transfer(spec),
        PipelineKind::Matching => run_matching(spec).map(|(_, r)| r),
        PipelineKind::Proposals => run_proposals(spec),
        PipelineKind::Detector => run_detector(spec),
        PipelineKind::Tracker => run_tracker(spec),
    }
}

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

fn to_train_set(patches: &[(Tensor, usize)]) -> TrainSet {
    let mut set = TrainSet::default();
    for (p, l) in patches {
        set.push(SampleInput::Single(p.clone()), Target::Class(*l));
    }
    set
}

fn build_network(choice: NetChoice, classes: usize, input: usize, rng: &mut ChaCha8Rng) -> Result<NetworkGraph> {
    match choice {
        NetChoice::Classic { modules, filters, reg } => build_classic_net(modules, filters, reg, classes, input, rng),
        NetChoice::Tiny { modules, filters } => build_tiny_net(modules, filters, classes, input, rng),
        NetChoice::Fire { modules, filters } => build_fire_net(modules, filters, classes, input, rng),
    }
}

fn classify_batch(net: &NetworkGraph, patches: &[(Tensor, usize)]) -> Result<(Vec<usize>, Vec<usize>)> {
    let inputs: Vec<Tensor> = patches.iter().map(|(p, _)| p.clone()).collect();
    let out = net.infer_batch(&BatchInput::Single(&inputs))?;
    let preds = match out {
        BatchOutput::Single(v) => v.iter().map(crate::tensor::argmax_all).collect(),
        _ => return Err(Error::Config("classifier expected".into())),
    };
    let labels = patches.iter().map(|(_, l)| *l).collect();
    Ok((preds, labels))
}

/// Two patches stacked along the channel axis for the two-channel matcher.
pub fn stack_pair(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() || a.rank() != 3 {
        return Err(Error::shape_mismatch(a.shape(), b.shape(), "pair stack"));
    }
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Tensor::new(vec![2, a.shape()[1], a.shape()[2]], data)
}

/// Match score in [0, 1] from either matcher head.
pub fn matcher_score(net: &NetworkGraph, a: &Tensor, b: &Tensor) -> Result<f32> {
    let out = match net.input_shape[0] {
        2 => net.infer_single(&stack_pair(a, b)?)?,
        _ => net.infer_pair(a, b)?,
    };
    Ok(match net.output {
        OutputContract::ClassProbs { classes: 2 } => out.data()[1],
        OutputContract::Score => out.data()[0],
        _ => return Err(Error::Config("matcher output contract expected".into())),
    })
}

/// The class decision from a match probability: `argmax{1 - p, p}`.
pub fn score_to_class(p: f32) -> usize {
    usize::from(p >= 0.5)
}

// ---------------------------------------------------------------------------
// Classification
// ---------------------------------------------------------------------------

/// Train the chosen classifier and report test accuracy over seed
/// replications; sweeps over samples-per-class or input image size when the
/// corresponding grids are set.
pub fn run_classification(spec: &ExperimentSpec) -> Result<EvalReport> {
    spec.prepare_dirs()?;
    let default_epochs = match spec.network {
        NetChoice::Classic { .. } => 20,
        _ => 30,
    };
    let epochs = spec.epochs_or(default_epochs);

    let mut report = EvalReport::new(&["axis", "runs", "mean_accuracy", "std_accuracy"]);
    let mut run_curve = EvalReport::new(&["axis", "seed", "accuracy"]);

    // axis values: SPC grid, image-size grid, or the single default run
    enum Axis {
        Plain,
        Spc(Vec<usize>),
        Size(Vec<usize>),
    }
    let axis = if !spec.spc_grid.is_empty() {
        Axis::Spc(spec.spc_grid.clone())
    } else if !spec.image_sizes.is_empty() {
        Axis::Size(spec.image_sizes.clone())
    } else {
        Axis::Plain
    };
    let points: Vec<(f64, usize, usize)> = match &axis {
        Axis::Plain => vec![(0.0, spec.spc, PATCH)],
        Axis::Spc(grid) => grid.iter().map(|&s| (s as f64, s, PATCH)).collect(),
        Axis::Size(grid) => grid.iter().map(|&s| (s as f64, spec.spc, s)).collect(),
    };

    for (axis_value, spc, size) in points {
        let mut scene = spec.scene.clone();
        scene.seed = frame_seed(spec.seed, 0xDA7A);
        let full = make_classification_set(&scene, spc, spec.val_per_class, spec.test_per_class)?;
        let data = if size == PATCH { full } else { full.downscaled(size)? };
        let train_set = to_train_set(&data.train);
        let val_set = to_train_set(&data.val);

        let mut accuracies = Vec::new();
        for replica in 0..spec.seeds.max(1) {
            let mut rng = ChaCha8Rng::seed_from_u64(frame_seed(spec.seed, 0x1717 + replica as u64));
            let mut net = build_network(spec.network, OBJECT_CLASSES + 1, size, &mut rng)?;
            let cfg = TrainConfig::new(spec.batch_size, epochs, LossKind::CategoricalCe)
                .with_seed(frame_seed(spec.seed, 0x5EED + replica as u64))
                .with_lr(spec.learning_rate);
            let log = train(&mut net, &train_set, Some(&val_set), &cfg)?;
            let mut csv = Vec::new();
            log.write_csv(&mut csv)?;
            std::fs::write(
                spec.curves_dir().join(format!("train_axis{axis_value}_seed{replica}.csv")),
                csv,
            )?;
            let (preds, labels) = classify_batch(&net, &data.test)?;
            let acc = crate::metrics::accuracy(&preds, &labels)?;
            accuracies.push(acc);
            run_curve.push(vec![axis_value, replica as f64, acc]);
            if replica == 0 {
                save_model(&net, spec.models_dir().join(format!("classifier_axis{axis_value}.flsn")))?;
            }
        }
        let (mean, std) = mean_std(&accuracies);
        report.push(vec![axis_value, accuracies.len() as f64, mean, std]);
    }

    run_curve.save(spec.curves_dir().join("accuracy_runs.csv"))?;
    report.save(spec.out_dir.join("report.csv"))?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// Linear SVM (one-vs-one, L2-regularized hinge, subgradient descent)
// ---------------------------------------------------------------------------

/// Multi-class linear SVM trained with Pegasos-style subgradient descent on
/// the L2-regularized hinge loss, one binary machine per class pair, with
/// one-versus-one majority voting.
#[derive(Debug, Clone)]
pub struct LinearSvm {
    pairs: Vec<(usize, usize)>,
    machines: Vec<(Vec<f32>, f32)>,
}

impl LinearSvm {
    pub fn train(
        features: &[Vec<f32>],
        labels: &[usize],
        classes: usize,
        c: f64,
        epochs: usize,
        seed: u64,
    ) -> Result<Self> {
        if features.is_empty() || features.len() != labels.len() {
            return Err(Error::Degenerate("svm needs matching nonempty inputs".into()));
        }
        let dim = features[0].len();
        let mut pairs = Vec::new();
        let mut machines = Vec::new();
        for a in 0..classes {
            for b in a + 1..classes {
                let idx: Vec<usize> = (0..labels.len())
                    .filter(|&i| labels[i] == a || labels[i] == b)
                    .collect();
                if idx.is_empty() {
                    continue;
                }
                let lambda = 1.0 / (c * idx.len() as f64);
                let mut w = vec![0.0f32; dim];
                let mut bias = 0.0f32;
                let mut order = idx.clone();
                let mut rng = ChaCha8Rng::seed_from_u64(frame_seed(seed, (a * classes + b) as u64));
                let mut t = 0usize;
                for _ in 0..epochs {
                    use rand::seq::SliceRandom;
                    order.shuffle(&mut rng);
                    for &i in &order {
                        t += 1;
                        let eta = (1.0 / (lambda * (t as f64 + 1.0))) as f32;
                        let y = if labels[i] == a { 1.0f32 } else { -1.0 };
                        let margin = y * (crate::layers::dot_lanes(&w, &features[i]) + bias);
                        let shrink = 1.0 - eta * lambda as f32;
                        for wv in w.iter_mut() {
                            *wv *= shrink;
                        }
                        if margin < 1.0 {
                            for (wv, &x) in w.iter_mut().zip(&features[i]) {
                                *wv += eta * y * x;
                            }
                            bias += eta * y;
                        }
                    }
                }
                pairs.push((a, b));
                machines.push((w, bias));
            }
        }
        Ok(LinearSvm { pairs, machines })
    }

    /// One-versus-one majority vote; ties break to the lowest class id.
    pub fn predict(&self, feature: &[f32]) -> usize {
        let mut votes = std::collections::BTreeMap::new();
        for ((a, b), (w, bias)) in self.pairs.iter().zip(&self.machines) {
            let score = crate::layers::dot_lanes(w, feature) + bias;
            let winner = if score >= 0.0 { *a } else { *b };
            *votes.entry(winner).or_insert(0usize) += 1;
        }
        votes
            .into_iter()
            .max_by(|(ca, va), (cb, vb)| va.cmp(vb).then(cb.cmp(ca)))
            .map(|(c, _)| c)
            .unwrap_or(0)
    }
}

/// L2-normalize a feature vector in place (unit norm; zero vectors stay).
pub fn l2_normalize(v: &mut [f32]) {
    let norm = crate::layers::dot_lanes(v, v).sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
}

// ---------------------------------------------------------------------------
// Transfer learning
// ---------------------------------------------------------------------------

/// Learn features on one set of classes, then train a linear SVM on frozen,
/// L2-normalized features of the remaining classes, per tapped layer.
pub fn run_transfer(spec: &ExperimentSpec) -> Result<EvalReport> {
    spec.prepare_dirs()?;
    let mut scene = spec.scene.clone();
    scene.seed = frame_seed(spec.seed, 0xDA7A);
    let data = make_classification_set(&scene, spec.spc, spec.val_per_class, spec.test_per_class)?;

    // class-disjoint split: features learn on |F| classes, the SVM is
    // evaluated on the held-out classes
    let mut rng = ChaCha8Rng::seed_from_u64(frame_seed(spec.seed, 0xF117));
    let mut classes: Vec<usize> = (0..=OBJECT_CLASSES).collect();
    use rand::seq::SliceRandom;
    classes.shuffle(&mut rng);
    let split = classes.len() / 2 + 1;
    let feature_classes: Vec<usize> = classes[..split].to_vec();
    let target_classes: Vec<usize> = classes[split..].to_vec();

    let remap = |patches: &[(Tensor, usize)], keep: &[usize]| -> Vec<(Tensor, usize)> {
        patches
            .iter()
            .filter(|(_, l)| keep.contains(l))
            .map(|(p, l)| (p.clone(), keep.iter().position(|k| k == l).unwrap()))
            .collect()
    };
    let f_train = remap(&data.train, &feature_classes);
    let t_train = remap(&data.train, &target_classes);
    let t_test = remap(&data.test, &target_classes);

    // feature network trained on F
    let mut net = build_network(spec.network, feature_classes.len(), PATCH, &mut rng)?;
    let cfg = TrainConfig::new(spec.batch_size, spec.epochs_or(15), LossKind::CategoricalCe)
        .with_seed(frame_seed(spec.seed, 0xFEED))
        .with_lr(spec.learning_rate);
    train(&mut net, &to_train_set(&f_train), None, &cfg)?;

    let layers = if spec.transfer_layers.is_empty() {
        net.layer_names()
            .into_iter()
            .filter(|n| n.starts_with("bn") || n.starts_with("module") || n.starts_with("mp") || n == "fc1")
            .collect()
    } else {
        spec.transfer_layers.clone()
    };
    if layers.is_empty() {
        return Err(Error::Config("no feature layers to evaluate".into()));
    }

    let mut report = EvalReport::new(&["layer", "accuracy"]);
    let mut names_file = String::new();
    for (li, layer) in layers.iter().enumerate() {
        let extract = |patches: &[(Tensor, usize)]| -> Result<(Vec<Vec<f32>>, Vec<usize>)> {
            let mut feats = Vec::with_capacity(patches.len());
            let mut labels = Vec::with_capacity(patches.len());
            for (p, l) in patches {
                let mut f = net.features_at(layer, p)?.into_data();
                l2_normalize(&mut f);
                feats.push(f);
                labels.push(*l);
            }
            Ok((feats, labels))
        };
        let (train_feats, train_labels) = extract(&t_train)?;
        let (test_feats, test_labels) = extract(&t_test)?;
        let svm = LinearSvm::train(
            &train_feats,
            &train_labels,
            target_classes.len(),
            spec.svm_c,
            10,
            frame_seed(spec.seed, 0x57A + li as u64),
        )?;
        let preds: Vec<usize> = test_feats.iter().map(|f| svm.predict(f)).collect();
        let acc = crate::metrics::accuracy(&preds, &test_labels)?;
        report.push(vec![li as f64, acc]);
        names_file.push_str(&format!("{li},{layer}\n"));
    }
    std::fs::write(spec.curves_dir().join("transfer_layers.txt"), names_file)?;
    report.save(spec.out_dir.join("report.csv"))?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// Matching
// ---------------------------------------------------------------------------

fn pair_input(spec: &ExperimentSpec, pair: &MatchPair) -> Result<SampleInput> {
    Ok(match spec.matcher_kind {
        MatcherKind::TwoChannel => SampleInput::Single(stack_pair(&pair.a, &pair.b)?),
        MatcherKind::Siamese => SampleInput::Pair(pair.a.clone(), pair.b.clone()),
    })
}

fn pair_target(spec: &ExperimentSpec, pair: &MatchPair) -> Target {
    match spec.matcher_head {
        MatcherHead::Class2Softmax => Target::Class(pair.label as usize),
        MatcherHead::ScoreSigmoid => Target::Score(pair.label as u8 as f32),
    }
}

fn pair_scores(spec: &ExperimentSpec, net: &NetworkGraph, pairs: &[MatchPair]) -> Result<Vec<f64>> {
    let out = match spec.matcher_kind {
        MatcherKind::TwoChannel => {
            let inputs: Vec<Tensor> = pairs
                .iter()
                .map(|p| stack_pair(&p.a, &p.b))
                .collect::<Result<_>>()?;
            net.infer_batch(&BatchInput::Single(&inputs))?
        }
        MatcherKind::Siamese => {
            let inputs: Vec<(Tensor, Tensor)> = pairs.iter().map(|p| (p.a.clone(), p.b.clone())).collect();
            net.infer_batch(&BatchInput::Pair(&inputs))?
        }
    };
    let scores = match (out, spec.matcher_head) {
        (BatchOutput::Single(v), MatcherHead::Class2Softmax) => v.iter().map(|t| t.data()[1] as f64).collect(),
        (BatchOutput::Single(v), MatcherHead::ScoreSigmoid) => v.iter().map(|t| t.data()[0] as f64).collect(),
        _ => return Err(Error::Config("matcher output contract mismatch".into())),
    };
    Ok(scores)
}

/// Train a patch matcher and evaluate ROC/AUC plus per-pair-type accuracy
/// on the held-out pairs.
pub fn run_matching(spec: &ExperimentSpec) -> Result<(RocCurve, EvalReport)> {
    spec.prepare_dirs()?;
    let mut scene = spec.scene.clone();
    scene.seed = frame_seed(spec.seed, 0xDA7A);
    let set = make_matching_set(&scene, spec.instances_per_class, spec.split_mode)?;

    let mut rng = ChaCha8Rng::seed_from_u64(frame_seed(spec.seed, 0x3A7C));
    let mut net = build_matcher(spec.matcher_kind, spec.matcher_head, &mut rng)?;
    let loss = match spec.matcher_head {
        MatcherHead::Class2Softmax => LossKind::CategoricalCe,
        MatcherHead::ScoreSigmoid => LossKind::BinaryCe,
    };
    let default_epochs = match spec.matcher_kind {
        MatcherKind::TwoChannel => 5,
        MatcherKind::Siamese => 15,
    };
    let mut train_set = TrainSet::default();
    for pair in &set.train {
        train_set.push(pair_input(spec, pair)?, pair_target(spec, pair));
    }
    let cfg = TrainConfig::new(spec.batch_size.max(1), spec.epochs_or(default_epochs), loss)
        .with_seed(frame_seed(spec.seed, 0x10CC))
        .with_lr(spec.learning_rate);
    let log = train(&mut net, &train_set, None, &cfg)?;
    let mut csv = Vec::new();
    log.write_csv(&mut csv)?;
    std::fs::write(spec.curves_dir().join("matcher_train.csv"), csv)?;
    save_model(&net, spec.models_dir().join("matcher.flsn"))?;

    let scores = pair_scores(spec, &net, &set.test)?;
    let labels: Vec<bool> = set.test.iter().map(|p| p.label).collect();
    if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
        return Err(Error::Degenerate("single-class matching evaluation set".into()));
    }
    let curve = roc_auc(&scores, &labels)?;
    let file = std::fs::File::create(spec.curves_dir().join("roc.csv"))?;
    curve.write_csv(std::io::BufWriter::new(file))?;

    // accuracy per pair type under the argmax{1 - p, p} rule
    let acc_for = |kind: PairKind| -> f64 {
        let mut total = 0usize;
        let mut correct = 0usize;
        for (pair, &score) in set.test.iter().zip(&scores) {
            if pair.kind != kind {
                continue;
            }
            total += 1;
            if score_to_class(score as f32) == pair.label as usize {
                correct += 1;
            }
        }
        if total == 0 {
            f64::NAN
        } else {
            correct as f64 / total as f64
        }
    };
    let acc_pos = acc_for(PairKind::PositiveObjObj);
    let acc_neg = acc_for(PairKind::NegativeObjObj);
    let acc_bg = acc_for(PairKind::NegativeObjBg);
    let mean_acc = {
        let preds: Vec<usize> = scores.iter().map(|&s| score_to_class(s as f32)).collect();
        let truth: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
        crate::metrics::accuracy(&preds, &truth)?
    };

    let mut report = EvalReport::new(&["auc", "mean_acc", "pos_objobj_acc", "neg_objobj_acc", "neg_objbg_acc"]);
    report.push(vec![curve.auc, mean_acc, acc_pos, acc_neg, acc_bg]);
    report.save(spec.out_dir.join("report.csv"))?;
    Ok((curve, report))
}

// ---------------------------------------------------------------------------
// Objectness training and proposal sweeps
// ---------------------------------------------------------------------------

/// Training frames and held-out evaluation frames: generated from the spec
/// scene, or, when `data_dir` is set, evaluation frames read from the saved
/// dataset.
fn proposal_frames(spec: &ExperimentSpec) -> Result<(Vec<SonarFrame>, Vec<SonarFrame>)> {
    let mut scene = spec.scene.clone();
    scene.seed = frame_seed(spec.seed, 0xF0A);
    let train: Vec<SonarFrame> = (0..spec.train_frames as u64)
        .map(|i| generate_scene(&scene, i))
        .collect::<Result<_>>()?;
    let test: Vec<SonarFrame> = match &spec.data_dir {
        Some(dir) => crate::synth::load_dataset(dir)?.0,
        None => (0..spec.test_frames as u64)
            .map(|i| generate_scene(&scene, 0x7E57 + i))
            .collect::<Result<_>>()?,
    };
    Ok((train, test))
}

/// Score stored proposals (`image_id,x,y,w,h,score[,class]`) against the
/// ground truth of a saved dataset: per-frame and aggregate recall, ABO,
/// and proposal counts.
pub fn eval_proposals(
    data_dir: impl AsRef<Path>,
    proposals_csv: impl AsRef<Path>,
    overlap_threshold: f64,
) -> Result<EvalReport> {
    let (frames, _) = crate::synth::load_dataset(data_dir)?;
    let text = std::fs::read_to_string(proposals_csv)?;
    let mut by_frame: std::collections::BTreeMap<String, Vec<BoundingBox>> = Default::default();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue; // header
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() < 6 {
            return Err(Error::Config(format!("proposals line {} malformed", i + 1)));
        }
        let parse = |s: &str| -> Result<i64> {
            s.trim()
                .parse()
                .map_err(|_| Error::Config(format!("proposals line {}: bad integer {s:?}", i + 1)))
        };
        let score: f32 = cells[5]
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("proposals line {}: bad score", i + 1)))?;
        let mut bbox = BoundingBox::new(parse(cells[1])?, parse(cells[2])?, parse(cells[3])?, parse(cells[4])?)
            .with_score(score);
        if cells.len() >= 7 {
            if let Ok(label) = cells[6].trim().parse::<i64>() {
                if label >= 0 {
                    bbox = bbox.with_label(label as usize);
                }
            }
        }
        by_frame.entry(cells[0].to_string()).or_default().push(bbox);
    }

    let mut report = EvalReport::new(&["frame", "recall", "proposals", "abo"]);
    let empty = Vec::new();
    let mut detected = 0usize;
    let mut gt_total = 0usize;
    let mut counts = Vec::new();
    let mut abo_sum = 0.0f64;
    let mut abo_frames = 0usize;
    for (index, frame) in frames.iter().enumerate() {
        let proposals = by_frame.get(&frame.id).unwrap_or(&empty);
        let result = detection_recall(proposals, &frame.annotations, overlap_threshold);
        detected += result.matches.iter().filter(|m| m.is_some()).count();
        gt_total += frame.annotations.len();
        counts.push(proposals.len() as f64);
        // frames without ground truth contribute recall 1 and are excluded
        // from the ABO aggregate
        let abo = if frame.annotations.is_empty() {
            0.0
        } else {
            let v = average_best_overlap(&frame.annotations, proposals)?;
            abo_sum += v;
            abo_frames += 1;
            v
        };
        report.push(vec![index as f64, result.recall, proposals.len() as f64, abo]);
    }
    let aggregate_recall = if gt_total == 0 { 1.0 } else { detected as f64 / gt_total as f64 };
    let (mean_count, _) = mean_std(&counts);
    let aggregate_abo = if abo_frames == 0 { 0.0 } else { abo_sum / abo_frames as f64 };
    report.push(vec![-1.0, aggregate_recall, mean_count, aggregate_abo]);
    Ok(report)
}

/// Train the patch objectness regressor on labeled windows. Backgrounds
/// vastly outnumber object windows at any stride, so zero-label windows are
/// subsampled to match the positives.
pub fn train_objectness_net(spec: &ExperimentSpec, frames: &[SonarFrame]) -> Result<NetworkGraph> {
    let samples = make_objectness_set(frames, spec.data_stride, spec.eps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(frame_seed(spec.seed, 0x0B7));
    let positives: Vec<&(Tensor, f32)> = samples.iter().filter(|(_, l)| *l > 0.0).collect();
    let zeros: Vec<&(Tensor, f32)> = samples.iter().filter(|(_, l)| *l == 0.0).collect();
    let keep_zeros = positives.len().max(32).min(zeros.len());
    let chosen = rand::seq::index::sample(&mut rng, zeros.len(), keep_zeros);
    let mut train_set = TrainSet::default();
    for (p, l) in &positives {
        train_set.push(SampleInput::Single(p.clone()), Target::Score(*l));
    }
    for pick in chosen {
        let (p, l) = zeros[pick];
        train_set.push(SampleInput::Single(p.clone()), Target::Score(*l));
    }

    let mut net_rng = ChaCha8Rng::seed_from_u64(frame_seed(spec.seed, 0x0B8));
    let mut net = build_objectness_net(spec.objectness_kind, &mut net_rng)?;
    let default_epochs = match spec.objectness_kind {
        ObjectnessKind::Classic => 5,
        ObjectnessKind::Tiny => 15,
    };
    let cfg = TrainConfig::new(spec.batch_size, spec.epochs_or(default_epochs), LossKind::Mse)
        .with_seed(frame_seed(spec.seed, 0x0B9))
        .with_lr(spec.learning_rate);
    train(&mut net, &train_set, None, &cfg)?;
    Ok(net)
}

/// Object-centered template patches for the TM baseline, sampled from
/// training frames.
pub fn sample_templates(spec: &ExperimentSpec, frames: &[SonarFrame]) -> Result<Vec<Tensor>> {
    let mut pool = Vec::new();
    for frame in frames {
        for annotation in &frame.annotations {
            pool.push(crop_centered(frame, annotation)?);
        }
    }
    if pool.is_empty() {
        return Err(Error::Degenerate("no objects in the training frames".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(frame_seed(spec.seed, 0x7E3));
    let count = spec.tm_templates.min(pool.len());
    let idx = rand::seq::index::sample(&mut rng, pool.len(), count);
    Ok(idx.into_iter().map(|i| pool[i].clone()).collect())
}

/// Scored windows of every evaluation frame.
fn score_frames(
    spec: &ExperimentSpec,
    frames: &[SonarFrame],
    scorer: &dyn WindowScorer,
) -> Result<Vec<Vec<BoundingBox>>> {
    frames
        .iter()
        .map(|frame| {
            let (h, w) = (frame.image.shape()[1], frame.image.shape()[2]);
            let windows = sliding_windows(w, h, &frame.fov, PATCH, spec.window_stride)?;
            score_windows(&frame.image, &windows, scorer)
        })
        .collect()
}

struct SweepPoint {
    recall: f64,
    proposals_mean: f64,
    proposals_std: f64,
    abo: f64,
}

fn measure(
    frames: &[SonarFrame],
    selections: &[Vec<BoundingBox>],
    overlap_threshold: f64,
) -> Result<SweepPoint> {
    let mut detected = 0usize;
    let mut gt_total = 0usize;
    let mut abo_total = 0.0f64;
    let mut abo_frames = 0usize;
    let mut counts = Vec::with_capacity(frames.len());
    for (frame, proposals) in frames.iter().zip(selections) {
        counts.push(proposals.len() as f64);
        let result = detection_recall(proposals, &frame.annotations, overlap_threshold);
        detected += result.matches.iter().filter(|m| m.is_some()).count();
        gt_total += frame.annotations.len();
        if !frame.annotations.is_empty() {
            abo_total += average_best_overlap(&frame.annotations, proposals)?;
            abo_frames += 1;
        }
    }
    let recall = if gt_total == 0 {
        1.0
    } else {
        detected as f64 / gt_total as f64
    };
    let (proposals_mean, proposals_std) = mean_std(&counts);
    Ok(SweepPoint {
        recall,
        proposals_mean,
        proposals_std,
        abo: if abo_frames > 0 { abo_total / abo_frames as f64 } else { f64::NAN },
    })
}

/// Build the configured scorer, score held-out frames, and sweep the
/// objectness threshold, top-k, and NMS grids.
pub fn run_proposals(spec: &ExperimentSpec) -> Result<EvalReport> {
    spec.prepare_dirs()?;
    let (train_frames, test_frames) = proposal_frames(spec)?;

    let boxed: Box<dyn WindowScorer>;
    match spec.scorer {
        ScorerKind::Tm => {
            let templates = sample_templates(spec, &train_frames)?;
            boxed = Box::new(TmScorer::new(&templates)?);
        }
        ScorerKind::Patch => {
            let net = match &spec.obj_model {
                Some(path) => load_model(path)?,
                None => train_objectness_net(spec, &train_frames)?,
            };
            save_model(&net, spec.models_dir().join("objectness.flsn"))?;
            boxed = Box::new(OwnedPatchScorer { net });
        }
        ScorerKind::Fcn => {
            let net = match &spec.obj_model {
                Some(path) => load_model(path)?,
                None => train_objectness_net(spec, &train_frames)?,
            };
            save_model(&net, spec.models_dir().join("objectness.flsn"))?;
            let fcn = if matches!(net.output, OutputContract::ObjectnessMap) {
                net
            } else {
                to_fcn(&net)?
            };
            save_model(&fcn, spec.models_dir().join("objectness_fcn.flsn"))?;
            boxed = Box::new(OwnedFcnScorer { net: fcn });
        }
    }
    let scored = score_frames(spec, &test_frames, boxed.as_ref())?;

    // objectness thresholding sweep
    let mut threshold_report = EvalReport::new(&["to", "recall", "proposals_mean", "proposals_std", "abo"]);
    for &to in &spec.to_grid {
        let selections: Vec<Vec<BoundingBox>> = scored
            .iter()
            .map(|windows| nms(&select_by_threshold(windows, to), spec.st))
            .collect::<Result<_>>()?;
        let point = measure(&test_frames, &selections, spec.o_t)?;
        threshold_report.push(vec![
            to as f64,
            point.recall,
            point.proposals_mean,
            point.proposals_std,
            point.abo,
        ]);
    }
    threshold_report.save(spec.curves_dir().join("threshold.csv"))?;

    // top-k ranking sweep
    let mut topk_report = EvalReport::new(&["k", "recall", "proposals_mean", "proposals_std", "abo"]);
    for &k in &spec.k_grid {
        let selections: Vec<Vec<BoundingBox>> = scored
            .iter()
            .map(|windows| nms(&select_top_k(windows, k), spec.st))
            .collect::<Result<_>>()?;
        let point = measure(&test_frames, &selections, spec.o_t)?;
        topk_report.push(vec![
            k as f64,
            point.recall,
            point.proposals_mean,
            point.proposals_std,
            point.abo,
        ]);
    }
    topk_report.save(spec.curves_dir().join("topk.csv"))?;

    // NMS threshold sweep at the middle objectness threshold
    let mut nms_report = EvalReport::new(&["st", "recall", "proposals_mean", "proposals_std", "abo"]);
    for &st in &spec.st_grid {
        let selections: Vec<Vec<BoundingBox>> = scored
            .iter()
            .map(|windows| nms(&select_by_threshold(windows, 0.5), st))
            .collect::<Result<_>>()?;
        let point = measure(&test_frames, &selections, spec.o_t)?;
        nms_report.push(vec![
            st,
            point.recall,
            point.proposals_mean,
            point.proposals_std,
            point.abo,
        ]);
    }
    nms_report.save(spec.curves_dir().join("nms.csv"))?;

    // proposals of the middle operating point, exported for inspection
    let mut rows = Vec::new();
    for (frame, windows) in test_frames.iter().zip(&scored) {
        for b in nms(&select_by_threshold(windows, 0.5), spec.st)? {
            rows.push((frame.id.clone(), b));
        }
    }
    let file = std::fs::File::create(spec.out_dir.join("proposals.csv"))?;
    crate::geometry::write_proposals_csv(std::io::BufWriter::new(file), &rows, false)?;

    threshold_report.save(spec.out_dir.join("report.csv"))?;
    Ok(threshold_report)
}

struct OwnedPatchScorer {
    net: NetworkGraph,
}

impl WindowScorer for OwnedPatchScorer {
    fn score_windows(&self, image: &Tensor, windows: &[BoundingBox]) -> Result<Vec<f32>> {
        PatchNetScorer { net: &self.net }.score_windows(image, windows)
    }
}

struct OwnedFcnScorer {
    net: NetworkGraph,
}

impl WindowScorer for OwnedFcnScorer {
    fn score_windows(&self, image: &Tensor, windows: &[BoundingBox]) -> Result<Vec<f32>> {
        FcnScorer {
            net: &self.net,
            window: PATCH,
        }
        .score_windows(image, windows)
    }
}

// ---------------------------------------------------------------------------
// Dual-head detector
// ---------------------------------------------------------------------------

fn detector_train_set(spec: &ExperimentSpec, frames: &[SonarFrame]) -> Result<TrainSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(frame_seed(spec.seed, 0xDE7));
    let mut positives = Vec::new();
    let mut zeros = Vec::new();
    for frame in frames {
        let (h, w) = (frame.image.shape()[1], frame.image.shape()[2]);
        let windows = sliding_windows(w, h, &frame.fov, PATCH, spec.data_stride)?;
        let labeled = crate::geometry::label_windows(&windows, &frame.annotations, spec.eps)?;
        for (window, objectness) in labeled {
            let patch = crate::geometry::crop_window(&frame.image, &window)?;
            // class of the best-overlapping object, background otherwise
            let best = frame
                .annotations
                .iter()
                .map(|g| (crate::geometry::iou(&window, g), g.label.unwrap_or(BACKGROUND_CLASS)))
                .max_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            let class = match best {
                Some((overlap, label)) if overlap > spec.eps => label,
                _ => BACKGROUND_CLASS,
            };
            let sample = (
                SampleInput::Single(patch),
                Target::Dual {
                    objectness: objectness as f32,
                    class,
                },
            );
            if objectness > 0.0 {
                positives.push(sample);
            } else {
                zeros.push(sample);
            }
        }
    }
    let keep = positives.len().max(32).min(zeros.len());
    let chosen = rand::seq::index::sample(&mut rng, zeros.len(), keep);
    let mut set = TrainSet::default();
    for (input, target) in positives {
        set.push(input, target);
    }
    for pick in chosen {
        let (input, target) = zeros[pick].clone();
        set.push(input, target);
    }
    Ok(set)
}

/// Train the dual-head detector per multi-task weight and evaluate recall
/// plus classification accuracy across the objectness-threshold grid.
pub fn run_detector(spec: &ExperimentSpec) -> Result<EvalReport> {
    spec.prepare_dirs()?;
    let (train_frames, test_frames) = proposal_frames(spec)?;
    let train_set = detector_train_set(spec, &train_frames)?;

    let mut report = EvalReport::new(&[
        "gamma",
        "to",
        "recall",
        "fc_accuracy",
        "svm_accuracy",
        "proposals_mean",
    ]);
    let gammas = if spec.gamma_grid.is_empty() {
        vec![spec.gamma]
    } else {
        spec.gamma_grid.clone()
    };
    for (gi, &gamma) in gammas.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(frame_seed(spec.seed, 0xD00 + gi as u64));
        let mut net = build_detector(OBJECT_CLASSES + 1, &mut rng)?;
        let cfg = TrainConfig::new(spec.batch_size, spec.epochs_or(6), LossKind::CategoricalCe)
            .with_seed(frame_seed(spec.seed, 0xD50 + gi as u64))
            .with_lr(spec.learning_rate)
            .with_gamma(gamma);
        train(&mut net, &train_set, None, &cfg)?;
        if gi == 0 {
            save_model(&net, spec.models_dir().join("detector.flsn"))?;
        }

        // optional SVM replacement head on frozen trunk features
        let svm = if spec.svm_head {
            let mut feats = Vec::new();
            let mut labels = Vec::new();
            for (input, target) in train_set.inputs.iter().zip(&train_set.targets) {
                if let (SampleInput::Single(p), Target::Dual { class, .. }) = (input, target) {
                    let mut f = net.trunk_features(p)?.into_data();
                    l2_normalize(&mut f);
                    feats.push(f);
                    labels.push(*class);
                }
            }
            Some(LinearSvm::train(
                &feats,
                &labels,
                OBJECT_CLASSES + 1,
                spec.svm_c,
                5,
                frame_seed(spec.seed, 0x57A0 + gi as u64),
            )?)
        } else {
            None
        };

        // score and classify the evaluation windows once per frame
        let mut frame_windows = Vec::new();
        for frame in &test_frames {
            let (h, w) = (frame.image.shape()[1], frame.image.shape()[2]);
            let windows = sliding_windows(w, h, &frame.fov, PATCH, spec.window_stride)?;
            let patches: Vec<Tensor> = windows
                .iter()
                .map(|b| crate::geometry::crop_window(&frame.image, b))
                .collect::<Result<_>>()?;
            let out = net.infer_batch(&BatchInput::Single(&patches))?;
            let (obj, cls) = match out {
                BatchOutput::Dual { objectness, classes } => (objectness, classes),
                _ => unreachable!("detector is dual-head"),
            };
            let scored: Vec<BoundingBox> = windows
                .iter()
                .enumerate()
                .map(|(i, b)| {
                    let fc_class = crate::tensor::argmax_all(&cls[i]);
                    let class = match &svm {
                        Some(svm) => {
                            let mut f = net.trunk_features(&patches[i])?.into_data();
                            l2_normalize(&mut f);
                            svm.predict(&f)
                        }
                        None => fc_class,
                    };
                    Ok(b.with_score(obj[i].data()[0]).with_label(class))
                })
                .collect::<Result<_>>()?;
            // keep the plain FC decision too for the comparison column
            let fc_scored: Vec<BoundingBox> = windows
                .iter()
                .enumerate()
                .map(|(i, b)| b.with_score(obj[i].data()[0]).with_label(crate::tensor::argmax_all(&cls[i])))
                .collect();
            frame_windows.push((fc_scored, scored));
        }

        for &to in &spec.to_grid {
            let mut detected = 0usize;
            let mut gt_total = 0usize;
            let mut fc_correct = 0usize;
            let mut svm_correct = 0usize;
            let mut counts = Vec::new();
            for (frame, (fc_scored, svm_scored)) in test_frames.iter().zip(&frame_windows) {
                let fc_proposals = nms(&select_by_threshold(fc_scored, to), spec.st)?;
                let svm_proposals = nms(&select_by_threshold(svm_scored, to), spec.st)?;
                counts.push(fc_proposals.len() as f64);
                gt_total += frame.annotations.len();
                let matched = detection_recall(&fc_proposals, &frame.annotations, spec.o_t);
                detected += matched.matches.iter().filter(|m| m.is_some()).count();
                for (gt_idx, m) in matched.matches.iter().enumerate() {
                    if let Some(pi) = m {
                        if fc_proposals[*pi].label == frame.annotations[gt_idx].label {
                            fc_correct += 1;
                        }
                    }
                }
                let matched = detection_recall(&svm_proposals, &frame.annotations, spec.o_t);
                for (gt_idx, m) in matched.matches.iter().enumerate() {
                    if let Some(pi) = m {
                        if svm_proposals[*pi].label == frame.annotations[gt_idx].label {
                            svm_correct += 1;
                        }
                    }
                }
            }
            let recall = if gt_total == 0 { 1.0 } else { detected as f64 / gt_total as f64 };
            let fc_accuracy = if gt_total == 0 { 1.0 } else { fc_correct as f64 / gt_total as f64 };
            let svm_accuracy = if spec.svm_head {
                if gt_total == 0 {
                    1.0
                } else {
                    svm_correct as f64 / gt_total as f64
                }
            } else {
                fc_accuracy
            };
            let (proposals_mean, _) = mean_std(&counts);
            report.push(vec![
                gamma as f64,
                to as f64,
                recall,
                fc_accuracy,
                svm_accuracy,
                proposals_mean,
            ]);
        }
    }
    report.save(spec.out_dir.join("report.csv"))?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// Tracking by matching
// ---------------------------------------------------------------------------

/// How the tracker matches proposals against the first-frame template.
pub enum TrackMatcher<'a> {
    /// Trained matching network.
    Net(&'a NetworkGraph),
    /// Cross-correlation baseline with the fixed acceptance floor.
    CrossCorrelation,
}

/// Run the two-stage tracker over a frame sequence: top-10 objectness
/// proposals per frame, matched against the template cropped at
/// initialization. Returns the emitted box per frame.
pub fn track_sequence(
    frames: &[SonarFrame],
    scorer: &dyn WindowScorer,
    matcher: &TrackMatcher,
    window_stride: usize,
) -> Result<Vec<Option<BoundingBox>>> {
    if frames.is_empty() {
        return Err(Error::Degenerate("empty sequence".into()));
    }
    let mut template: Option<Tensor> = None;
    let mut outputs = Vec::with_capacity(frames.len());
    for frame in frames {
        let (h, w) = (frame.image.shape()[1], frame.image.shape()[2]);
        let windows = sliding_windows(w, h, &frame.fov, PATCH, window_stride)?;
        let scored = score_windows(&frame.image, &windows, scorer)?;
        let top = select_top_k(&scored, 10);
        if top.is_empty() {
            outputs.push(None);
            continue;
        }
        match &template {
            None => {
                // initialization: the highest-objectness proposal becomes
                // the template, cropped once and never updated
                let first = top[0];
                template = Some(crate::geometry::crop_window(&frame.image, &first)?);
                outputs.push(Some(first));
            }
            Some(tmpl) => {
                let mut best: Option<(f32, BoundingBox)> = None;
                for proposal in &top {
                    let crop = crate::geometry::crop_window(&frame.image, proposal)?;
                    let score = match matcher {
                        TrackMatcher::Net(net) => matcher_score(net, tmpl, &crop)?,
                        TrackMatcher::CrossCorrelation => match cc_similarity(tmpl, &crop) {
                            Ok(s) if s > 0.01 => s as f32,
                            _ => continue,
                        },
                    };
                    // ties keep the earlier (higher-objectness) proposal
                    if best.map_or(true, |(b, _)| score > b) {
                        best = Some((score, *proposal));
                    }
                }
                outputs.push(best.map(|(_, b)| b));
            }
        }
    }
    Ok(outputs)
}

/// Tracker pipeline: synthesize a drifting-object sequence, track it with
/// the matching network and the cross-correlation baseline, and report the
/// correctly-tracked-frames curve over the overlap threshold grid.
pub fn run_tracker(spec: &ExperimentSpec) -> Result<EvalReport> {
    spec.prepare_dirs()?;
    let sequence_cfg = spec.sequence.clone().unwrap_or_else(|| SequenceConfig {
        scene: SceneConfig {
            seed: frame_seed(spec.seed, 0x5E0),
            ..spec.scene.clone()
        },
        frames: 12,
        class: 8,
        start_x: spec.scene.width as i64 / 2 - 110,
        start_y: 40,
        drift_x: 7,
        drift_y: 3,
    });
    let frames = generate_sequence(&sequence_cfg)?;

    // objectness scorer: trained net or the TM baseline
    let (train_frames, _) = proposal_frames(spec)?;
    let scorer: Box<dyn WindowScorer> = match spec.scorer {
        ScorerKind::Tm => Box::new(TmScorer::new(&sample_templates(spec, &train_frames)?)?),
        _ => {
            let net = match &spec.obj_model {
                Some(path) => load_model(path)?,
                None => train_objectness_net(spec, &train_frames)?,
            };
            let fcn = if matches!(net.output, OutputContract::ObjectnessMap) {
                net
            } else {
                to_fcn(&net)?
            };
            Box::new(OwnedFcnScorer { net: fcn })
        }
    };

    let matcher_net = match &spec.match_model {
        Some(path) => Some(load_model(path)?),
        None => None,
    };

    let gt: Vec<BoundingBox> = frames.iter().map(|f| f.annotations[0]).collect();
    let cc_tracks = track_sequence(&frames, scorer.as_ref(), &TrackMatcher::CrossCorrelation, spec.window_stride)?;
    let net_tracks = matcher_net
        .as_ref()
        .map(|net| track_sequence(&frames, scorer.as_ref(), &TrackMatcher::Net(net), spec.window_stride))
        .transpose()?;

    let mut report = EvalReport::new(&["o_t", "ctf_matcher", "ctf_cc"]);
    for ot10 in 1..=9 {
        let ot = ot10 as f64 / 10.0;
        let cc = ctf(&cc_tracks, &gt, ot)?;
        let net = match &net_tracks {
            Some(tracks) => ctf(tracks, &gt, ot)?,
            None => f64::NAN,
        };
        report.push(vec![ot, if net.is_nan() { cc } else { net }, cc]);
    }
    report.save(spec.out_dir.join("report.csv"))?;
    report.save(spec.curves_dir().join("ctf.csv"))?;
    Ok(report)
}
