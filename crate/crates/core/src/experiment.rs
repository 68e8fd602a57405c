//! Declarative experiment runs: config parsing, training loop, records and summaries.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::credit::{Engine, LossSpec, SignalOptions};
use crate::data::{
    epoch_order, load_mnist, make_batch, normalize, read_pbf, synthetic_clusters, synthetic_events, synthetic_shapes, Augment, Dataset,
    EncoderSpec, NormMode, Split,
};
use crate::metrics::{EfficiencyAccumulator, EfficiencyReport, VarianceAccumulator};
use crate::network::{parse_arch, preset_arch, ModelSpec, Network};
use crate::neuron::{LifConfig, SpikeMode, SurrogateConfig};
use crate::numerics::RngState;
use crate::online::{FeedbackConfig, LocalConfig, NoiseConfig, OptimConfig, StepReport, Trainer, TrainerConfig};
use crate::{Error, Result};

/// Environment variable naming the MNIST directory.
pub const DATA_DIR_ENV: &str = "OPZO_DATA_DIR";
pub const DEFAULT_DATA_DIR: &str = "data/mnist";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum DatasetConfig {
    /// IDX files; `dir` falls back to `$OPZO_DATA_DIR`, then `data/mnist`.
    Mnist {
        #[serde(default)]
        dir: Option<PathBuf>,
    },
    /// Pre-binned frame files for train and test.
    Pbf { train: PathBuf, test: PathBuf, classes: usize },
    /// Gaussian clusters around random prototypes.
    Clusters {
        train: usize,
        test: usize,
        dim: usize,
        classes: usize,
        noise: f64,
        #[serde(default)]
        data_seed: u64,
    },
    /// Ten-class shape images.
    Shapes {
        train: usize,
        test: usize,
        side: usize,
        noise: f64,
        #[serde(default)]
        data_seed: u64,
    },
    /// Moving-blob event frames; the frame count is the run's `time_steps`.
    Events {
        train: usize,
        test: usize,
        side: usize,
        classes: usize,
        #[serde(default)]
        data_seed: u64,
    },
}

impl DatasetConfig {
    pub fn name(&self) -> &'static str {
        match self {
            DatasetConfig::Mnist { .. } => "mnist",
            DatasetConfig::Pbf { .. } => "pbf",
            DatasetConfig::Clusters { .. } => "clusters",
            DatasetConfig::Shapes { .. } => "shapes",
            DatasetConfig::Events { .. } => "events",
        }
    }

    /// `(train, test)` with the test split normalized by train statistics
    /// where the data are real-valued images.
    pub fn load(&self, time_steps: usize, norm: Option<NormMode>) -> Result<(Dataset, Dataset)> {
        let (mut train, mut test) = match self {
            DatasetConfig::Mnist { dir } => {
                let dir = dir.clone().unwrap_or_else(default_data_dir);
                (load_mnist(&dir, Split::Train)?, load_mnist(&dir, Split::Test)?)
            }
            DatasetConfig::Pbf { train, test, classes } => (read_pbf(train, *classes)?, read_pbf(test, *classes)?),
            DatasetConfig::Clusters { train, test, dim, classes, noise, data_seed } => {
                // Both splits share prototypes, so draw them as one set.
                let all = synthetic_clusters(train + test, *dim, *classes, *noise, &mut RngState::new(*data_seed))?;
                let idx: Vec<usize> = (0..train + test).collect();
                (all.subset(&idx[..*train]), all.subset(&idx[*train..]))
            }
            DatasetConfig::Shapes { train, test, side, noise, data_seed } => {
                let rng = RngState::new(*data_seed);
                (synthetic_shapes(*train, *side, *noise, &mut rng.fork(0))?, synthetic_shapes(*test, *side, *noise, &mut rng.fork(1))?)
            }
            DatasetConfig::Events { train, test, side, classes, data_seed } => {
                let rng = RngState::new(*data_seed);
                (
                    synthetic_events(*train, time_steps, *side, *classes, &mut rng.fork(0))?,
                    synthetic_events(*test, time_steps, *side, *classes, &mut rng.fork(1))?,
                )
            }
        };
        if let Some(mode) = norm {
            normalize(&mut train, &mut test, mode)?;
        }
        Ok((train, test))
    }

    /// Sample shape, when it is known without reading any files.
    pub fn input_shape(&self) -> Option<[usize; 3]> {
        match *self {
            DatasetConfig::Mnist { .. } => Some([1, 28, 28]),
            DatasetConfig::Pbf { .. } => None,
            DatasetConfig::Clusters { dim, .. } => Some([dim, 1, 1]),
            DatasetConfig::Shapes { side, .. } => Some([1, side, side]),
            DatasetConfig::Events { side, .. } => Some([2, side, side]),
        }
    }

    pub fn classes(&self) -> Option<usize> {
        match *self {
            DatasetConfig::Mnist { .. } | DatasetConfig::Shapes { .. } => Some(10),
            DatasetConfig::Pbf { classes, .. } | DatasetConfig::Clusters { classes, .. } | DatasetConfig::Events { classes, .. } => {
                Some(classes)
            }
        }
    }

    fn resolved(&self) -> Self {
        match self {
            DatasetConfig::Mnist { dir: None } => DatasetConfig::Mnist { dir: Some(default_data_dir()) },
            other => other.clone(),
        }
    }
}

pub fn default_data_dir() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(DEFAULT_DATA_DIR))
}

/// Model fields of a run; input shape and class count come from the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Preset name (`fc300-desk`, ...) or architecture string.
    pub arch: String,
    #[serde(default)]
    pub lif: LifConfig,
    #[serde(default)]
    pub surrogate: SurrogateConfig,
    #[serde(default)]
    pub weight_standardization: bool,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default)]
    pub spike_mode: SpikeMode,
    #[serde(default = "one")]
    pub init_scale: f64,
}

fn one() -> f64 {
    1.0
}

impl ModelConfig {
    pub fn new(arch: &str) -> Self {
        Self {
            arch: arch.to_string(),
            lif: LifConfig::default(),
            surrogate: SurrogateConfig::default(),
            weight_standardization: false,
            dropout: 0.0,
            spike_mode: SpikeMode::Deterministic,
            init_scale: 1.0,
        }
    }

    pub fn spec(&self, input: [usize; 3], classes: usize) -> ModelSpec {
        ModelSpec {
            arch: preset_arch(&self.arch).map(str::to_string).unwrap_or_else(|| self.arch.clone()),
            input,
            classes,
            lif: self.lif,
            surrogate: self.surrogate,
            weight_standardization: self.weight_standardization,
            dropout: self.dropout,
            spike_mode: self.spike_mode,
            init_scale: self.init_scale,
        }
    }
}

/// One experiment, fully described.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub name: Option<String>,
    pub dataset: DatasetConfig,
    /// Keep only the first `n` training samples.
    #[serde(default)]
    pub train_limit: Option<usize>,
    #[serde(default)]
    pub test_limit: Option<usize>,
    #[serde(default = "default_norm")]
    pub normalize: Option<NormMode>,
    #[serde(default)]
    pub encoder: EncoderSpec,
    #[serde(default)]
    pub augment: Augment,
    pub model: ModelConfig,
    pub engine: Engine,
    pub epochs: usize,
    pub batch_size: usize,
    pub time_steps: usize,
    pub seed: u64,
    #[serde(default)]
    pub loss: LossSpec,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default)]
    pub feedback: FeedbackConfig,
    #[serde(default)]
    pub signal: SignalOptions,
    #[serde(default)]
    pub local: LocalConfig,
    /// Track per-layer batch-gradient variance for every epoch.
    #[serde(default)]
    pub record_variance: bool,
    #[serde(default = "default_eval_batch")]
    pub eval_batch_size: usize,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

fn default_norm() -> Option<NormMode> {
    Some(NormMode::Global)
}

fn default_eval_batch() -> usize {
    500
}

/// Named run presets.
pub const RUN_PRESETS: [&str; 4] = ["mnist-fc300-desk", "mnist-fc800", "shapes-conv-desk", "clusters-smoke"];

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// A preset run for `engine`, with the per-engine learning rate and dropout
    /// the full-scale experiments use (no dropout and a 10x smaller rate for ZO_sp).
    pub fn preset(name: &str, engine: Engine, seed: u64) -> Result<Self> {
        let zo = engine == Engine::ZoSp;
        let mut cfg = Self {
            name: Some(name.to_string()),
            dataset: DatasetConfig::Mnist { dir: None },
            train_limit: None,
            test_limit: None,
            normalize: Some(NormMode::Global),
            encoder: EncoderSpec::ConstantCurrent,
            augment: Augment::default(),
            model: ModelConfig::new("fc300-desk"),
            engine,
            epochs: 10,
            batch_size: 128,
            time_steps: 6,
            seed,
            loss: LossSpec::default(),
            optim: OptimConfig::default(),
            noise: NoiseConfig::default(),
            feedback: FeedbackConfig::default(),
            signal: SignalOptions::default(),
            local: LocalConfig::default(),
            record_variance: false,
            eval_batch_size: default_eval_batch(),
            out_dir: None,
        };
        if zo {
            cfg.optim.lr = 2e-5;
        }
        match name {
            "mnist-fc300-desk" => {
                // Ten epochs on a narrower net want a larger step than the fc800 schedule.
                cfg.model.dropout = if zo { 0.0 } else { 0.2 };
                cfg.optim.lr = if zo { 1e-4 } else { 1e-3 };
            }
            "mnist-fc800" => {
                cfg.model = ModelConfig::new("fc800");
                cfg.model.dropout = if zo { 0.0 } else { 0.2 };
                cfg.epochs = 50;
            }
            "shapes-conv-desk" => {
                cfg.dataset = DatasetConfig::Shapes { train: 6000, test: 2000, side: 16, noise: 0.15, data_seed: 7 };
                cfg.model = ModelConfig::new("conv-desk");
                cfg.model.weight_standardization = true;
                cfg.epochs = 15;
                cfg.batch_size = 64;
                cfg.time_steps = 4;
                cfg.optim.lr = if zo { 2e-4 } else { 2e-3 };
            }
            "clusters-smoke" => {
                cfg.dataset = DatasetConfig::Clusters { train: 512, test: 256, dim: 20, classes: 4, noise: 0.6, data_seed: 3 };
                cfg.model = ModelConfig::new("FC64-FC");
                cfg.epochs = 3;
                cfg.batch_size = 32;
                cfg.time_steps = 4;
                cfg.optim.lr = 2e-3;
                cfg.normalize = None;
            }
            other => return Err(Error::InvalidArgument(format!("unknown run preset `{other}` (known: {})", RUN_PRESETS.join(", ")))),
        }
        Ok(cfg)
    }

    pub fn trainer_config(&self) -> TrainerConfig {
        TrainerConfig {
            engine: self.engine,
            time_steps: self.time_steps,
            loss: self.loss,
            optim: self.optim,
            noise: self.noise,
            feedback: self.feedback,
            signal: self.signal,
            local: self.local,
        }
    }

    /// Field checks that need no data; model shape checks run once the data are loaded.
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [("epochs", self.epochs), ("batch_size", self.batch_size), ("eval_batch_size", self.eval_batch_size)] {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.train_limit == Some(0) || self.test_limit == Some(0) {
            return Err(Error::config("train_limit", "limits must be positive"));
        }
        if let EncoderSpec::PoissonSynthetic { rate } = self.encoder {
            if !(rate >= 0.0 && rate.is_finite()) {
                return Err(Error::config("encoder.rate", "must be finite and >= 0"));
            }
        }
        let events = matches!(self.dataset, DatasetConfig::Events { .. } | DatasetConfig::Pbf { .. });
        if events && self.encoder == EncoderSpec::ConstantCurrent {
            return Err(Error::config("encoder", "frame datasets need the pre_binned_frames encoder"));
        }
        self.trainer_config().validate()?;
        match self.dataset.input_shape() {
            Some(shape) => self.model.spec(shape, self.dataset.classes().unwrap_or(2)).validate(),
            None => parse_arch(&self.model.spec([1, 1, 1], 2).arch).map(|_| ()),
        }
    }

    /// The explicit form recorded with results: preset names and defaulted
    /// paths replaced by what was actually used.
    pub fn resolved(&self) -> Self {
        let mut out = self.clone();
        if let Some(arch) = preset_arch(&self.model.arch) {
            out.model.arch = arch.to_string();
        }
        out.dataset = self.dataset.resolved();
        out
    }
}

/// Metrics after one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub alpha: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_loss: f64,
    pub test_acc: f64,
    pub firing_rates: Vec<f64>,
    /// Per weight layer, when variance tracking is on.
    #[serde(default)]
    pub grad_variance: Option<Vec<f64>>,
}

impl EpochMetrics {
    fn csv_header(layers: usize, hidden: usize, variance: bool) -> String {
        let mut cols: Vec<String> =
            ["epoch", "alpha", "train_loss", "train_acc", "test_loss", "test_acc"].iter().map(|s| s.to_string()).collect();
        cols.extend((0..hidden).map(|l| format!("firing_rate_{l}")));
        if variance {
            cols.extend((0..layers).map(|l| format!("grad_variance_{l}")));
        }
        cols.join(",")
    }

    fn csv_line(&self) -> String {
        let mut cols = vec![
            self.epoch.to_string(),
            self.alpha.to_string(),
            self.train_loss.to_string(),
            self.train_acc.to_string(),
            self.test_loss.to_string(),
            self.test_acc.to_string(),
        ];
        cols.extend(self.firing_rates.iter().map(f64::to_string));
        if let Some(v) = &self.grad_variance {
            cols.extend(v.iter().map(f64::to_string));
        }
        cols.join(",")
    }
}

/// Everything produced by a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    /// The resolved config; re-running it reproduces the metrics exactly.
    pub config: RunConfig,
    pub seed: u64,
    pub param_count: usize,
    pub epochs: Vec<EpochMetrics>,
    pub final_test_acc: f64,
    pub efficiency: EfficiencyReport,
    pub wall_seconds: f64,
}

impl RunRecord {
    pub fn label(&self) -> String {
        self.config.name.clone().unwrap_or_else(|| format!("{}-{}", self.config.dataset.name(), self.config.model.arch))
    }
}

/// A finished run with its telemetry.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub record: RunRecord,
    /// One line per optimizer step.
    pub metrics_csv: String,
    /// One line per epoch.
    pub epochs_csv: String,
}

impl RunOutput {
    /// Writes `record.json`, `config.json`, `metrics.csv` and `epochs.csv`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let put = |name: &str, text: &str| -> Result<()> {
            let p = dir.join(name);
            fs::write(&p, text).map_err(|e| Error::io(p, e))
        };
        put("record.json", &serde_json::to_string_pretty(&self.record)?)?;
        put("config.json", &self.record.config.to_json()?)?;
        put("metrics.csv", &self.metrics_csv)?;
        put("epochs.csv", &self.epochs_csv)
    }
}

pub fn run(config: &RunConfig) -> Result<RunOutput> {
    run_with_progress(config, |_| {})
}

/// Trains and evaluates per `config`, calling `progress` after every epoch.
/// Aborts on the first non-finite loss or gradient.
pub fn run_with_progress(config: &RunConfig, mut progress: impl FnMut(&EpochMetrics)) -> Result<RunOutput> {
    let start = Instant::now();
    config.validate()?;
    let config = config.resolved();
    let (mut train, mut test) = config.dataset.load(config.time_steps, config.normalize)?;
    if let Some(n) = config.train_limit {
        train.truncate(n);
    }
    if let Some(n) = config.test_limit {
        test.truncate(n);
    }
    if train.is_empty() || test.is_empty() {
        return Err(Error::Missing("dataset split is empty".into()));
    }
    let spec = config.model.spec(train.shape, train.classes);
    spec.validate()?;

    let root = RngState::new(config.seed);
    let net = spec.build(&mut root.fork(1))?;
    let param_count = net.param_count();
    let steps_per_epoch = train.len().div_ceil(config.batch_size);
    let total_steps = (steps_per_epoch * config.epochs) as u64;
    let mut trainer = Trainer::new(net, config.trainer_config(), total_steps, &root.fork(2))?;
    let mut order_rng = root.fork(3);
    let mut batch_rng = root.fork(4);
    let mut eval_rng = root.fork(5);

    let hidden = trainer.net.hidden.len();
    let layers = hidden + 1;
    let mut metrics_csv = StepReport::csv_header(layers, hidden);
    metrics_csv.push('\n');
    let mut epochs_csv = EpochMetrics::csv_header(layers, hidden, config.record_variance);
    epochs_csv.push('\n');
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut efficiency = None;

    for epoch in 0..config.epochs {
        let alpha = config.noise.alpha(epoch, config.epochs);
        let order = epoch_order(train.len(), &mut order_rng);
        let mut variance = config.record_variance.then(VarianceAccumulator::default);
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0.0, 0usize);
        for (k, idx) in order.chunks(config.batch_size).enumerate() {
            let batch = make_batch(&train, idx, config.encoder, config.time_steps, config.augment, &mut batch_rng)?;
            let report = trainer.train_step(&batch, alpha).map_err(|e| match e {
                Error::NonFinite(what) => Error::NonFinite(format!("{what} (epoch {epoch}, batch {k}); run aborted")),
                other => other,
            })?;
            if let (Some(acc), Some(g)) = (variance.as_mut(), trainer.last_grads()) {
                let mut g = g.clone();
                g.layers.truncate(layers);
                acc.push(&g)?;
            }
            loss_sum += report.loss * idx.len() as f64;
            correct += report.acc * idx.len() as f64;
            seen += idx.len();
            metrics_csv.push_str(&report.csv_line());
            metrics_csv.push('\n');
        }

        let mut eff = EfficiencyAccumulator::new(&trainer.net.fan_outs());
        let (mut test_loss, mut test_correct) = (0.0, 0usize);
        let all: Vec<usize> = (0..test.len()).collect();
        for idx in all.chunks(config.eval_batch_size) {
            let batch = make_batch(&test, idx, config.encoder, config.time_steps, Augment::default(), &mut eval_rng)?;
            let out = trainer.evaluate(&batch)?;
            test_loss += out.loss * idx.len() as f64;
            test_correct += out.correct;
            eff.add_counts(&out.tape_spikes, &out.neuron_steps, idx.len())?;
        }
        let report = eff.finish()?;
        let m = EpochMetrics {
            epoch,
            alpha,
            train_loss: loss_sum / seen as f64,
            train_acc: correct / seen as f64,
            test_loss: test_loss / test.len() as f64,
            test_acc: test_correct as f64 / test.len() as f64,
            firing_rates: report.layer_rates.clone(),
            grad_variance: variance.map(|v| v.finish()).transpose()?,
        };
        epochs_csv.push_str(&m.csv_line());
        epochs_csv.push('\n');
        progress(&m);
        epochs.push(m);
        efficiency = Some(report);
    }

    let record = RunRecord {
        seed: config.seed,
        param_count,
        final_test_acc: epochs.last().map_or(0.0, |e| e.test_acc),
        efficiency: efficiency.ok_or_else(|| Error::Missing("no epochs were run".into()))?,
        epochs,
        config,
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    Ok(RunOutput { record, metrics_csv, epochs_csv })
}

/// Builds the network a config would train, without training it.
pub fn build_network(config: &RunConfig, input: [usize; 3], classes: usize) -> Result<Network> {
    config.model.spec(input, classes).build(&mut RngState::new(config.seed).fork(1))
}

pub fn read_record(path: &Path) -> Result<RunRecord> {
    let file = if path.is_dir() { path.join("record.json") } else { path.to_path_buf() };
    let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// One row of a comparison: every seed of one (dataset, model, engine) setting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub dataset: String,
    pub arch: String,
    pub engine: Engine,
    pub runs: usize,
    pub acc_mean: f64,
    pub acc_std: f64,
    pub acc_median: f64,
    pub total_firing_rate: f64,
    pub synops_per_sample: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
}

/// Groups runs by setting and sorts by mean accuracy, best first.
pub fn compare(records: &[RunRecord]) -> Result<Summary> {
    if records.is_empty() {
        return Err(Error::Missing("no run records to compare".into()));
    }
    let mut groups: BTreeMap<(String, String, &'static str), Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        let key = (r.config.dataset.name().to_string(), r.config.model.arch.clone(), r.config.engine.as_str());
        groups.entry(key).or_default().push(r);
    }
    let mut rows: Vec<SummaryRow> = groups
        .into_values()
        .map(|rs| {
            let accs: Vec<f64> = rs.iter().map(|r| r.final_test_acc).collect();
            let (acc_mean, acc_std) = mean_std(&accs);
            let fr: Vec<f64> = rs.iter().map(|r| r.efficiency.total_rate).collect();
            let so: Vec<f64> = rs.iter().map(|r| r.efficiency.synops_per_sample).collect();
            SummaryRow {
                dataset: rs[0].config.dataset.name().to_string(),
                arch: rs[0].config.model.arch.clone(),
                engine: rs[0].config.engine,
                runs: rs.len(),
                acc_mean,
                acc_std,
                acc_median: median(&accs),
                total_firing_rate: mean_std(&fr).0,
                synops_per_sample: mean_std(&so).0,
            }
        })
        .collect();
    rows.sort_by(|a, b| b.acc_mean.total_cmp(&a.acc_mean).then_with(|| a.engine.as_str().cmp(b.engine.as_str())));
    Ok(Summary { rows })
}

impl Summary {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("dataset,arch,engine,runs,acc_mean,acc_std,acc_median,total_firing_rate,synops_per_sample\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.dataset, r.arch, r.engine, r.runs, r.acc_mean, r.acc_std, r.acc_median, r.total_firing_rate, r.synops_per_sample
            );
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out =
            format!("{:<10} {:<28} {:<7} {:>4} {:>16} {:>8} {:>12}\n", "dataset", "arch", "engine", "runs", "accuracy (%)", "fr", "synops");
        for r in &self.rows {
            let acc = format!("{:.2} ± {:.2}", 100.0 * r.acc_mean, 100.0 * r.acc_std);
            let _ = writeln!(
                out,
                "{:<10} {:<28} {:<7} {:>4} {:>16} {:>8.4} {:>12.0}",
                r.dataset, r.arch, r.engine, r.runs, acc, r.total_firing_rate, r.synops_per_sample
            );
        }
        out
    }
}

/// Per-layer variance of each engine's batch gradients over one epoch, with
/// ratios against the first engine listed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceComparison {
    pub engines: Vec<Engine>,
    /// `variances[i][l]`: engine `i`, weight layer `l`.
    pub variances: Vec<Vec<f64>>,
}

impl VarianceComparison {
    pub fn get(&self, engine: Engine) -> Option<&[f64]> {
        self.engines.iter().position(|&e| e == engine).map(|i| self.variances[i].as_slice())
    }

    /// Layer-wise `Var(num) / Var(den)`.
    pub fn ratio(&self, num: Engine, den: Engine) -> Option<Vec<f64>> {
        let (a, b) = (self.get(num)?, self.get(den)?);
        Some(a.iter().zip(b).map(|(x, y)| x / y).collect())
    }

    pub fn to_table(&self) -> String {
        let layers = self.variances.first().map_or(0, Vec::len);
        let mut out = format!("{:<8}", "engine");
        for l in 0..layers {
            let _ = write!(out, " {:>12}", format!("L{}", l + 1));
        }
        out.push('\n');
        for (e, v) in self.engines.iter().zip(&self.variances) {
            let _ = write!(out, "{:<8}", e.as_str());
            for x in v {
                let _ = write!(out, " {x:>12.4e}");
            }
            out.push('\n');
        }
        out
    }
}

/// Trains one epoch per engine from the same config and records the
/// batch-gradient variance.
pub fn variance_study(base: &RunConfig, engines: &[Engine], mut progress: impl FnMut(Engine, &RunRecord)) -> Result<VarianceComparison> {
    if engines.is_empty() {
        return Err(Error::InvalidArgument("no engines given".into()));
    }
    let mut variances = Vec::new();
    for &engine in engines {
        let mut cfg = base.clone();
        cfg.engine = engine;
        cfg.epochs = 1;
        cfg.record_variance = true;
        let out = run(&cfg)?;
        let v = out.record.epochs[0].grad_variance.clone().ok_or_else(|| Error::Missing("variance".into()))?;
        progress(engine, &out.record);
        variances.push(v);
    }
    Ok(VarianceComparison { engines: engines.to_vec(), variances })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trip() {
        for name in RUN_PRESETS {
            for engine in Engine::ALL {
                let cfg = RunConfig::preset(name, engine, 2022).unwrap();
                let text = cfg.to_json().unwrap();
                let back = RunConfig::from_json(&text).unwrap();
                assert_eq!(back, cfg);
                assert_eq!(back.to_json().unwrap(), text);
                cfg.validate().unwrap();
            }
        }
    }

    #[test]
    fn shape_errors_surface_before_loading() {
        let mut cfg = RunConfig::preset("shapes-conv-desk", Engine::Opzo, 0).unwrap();
        cfg.dataset = DatasetConfig::Shapes { train: 10, test: 10, side: 9, noise: 0.0, data_seed: 0 };
        assert!(cfg.validate().unwrap_err().to_string().contains("arch"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let cfg = RunConfig::preset("clusters-smoke", Engine::Opzo, 0).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&cfg.to_json().unwrap()).unwrap();
        v["learning_rate"] = serde_json::json!(0.1);
        assert!(RunConfig::from_json(&v.to_string()).is_err());
        let mut v: serde_json::Value = serde_json::from_str(&cfg.to_json().unwrap()).unwrap();
        v["noise"]["sigma"] = serde_json::json!(0.1);
        assert!(RunConfig::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn minimal_config_fills_defaults() {
        let text = r#"{
            "dataset": {"kind": "clusters", "train": 64, "test": 32, "dim": 5, "classes": 3, "noise": 0.5},
            "model": {"arch": "FC16-FC"},
            "engine": "opzo", "epochs": 1, "batch_size": 16, "time_steps": 2, "seed": 1
        }"#;
        let cfg = RunConfig::from_json(text).unwrap();
        assert_eq!(cfg.feedback.momentum, 0.99999);
        assert_eq!(cfg.optim.lr, 2e-4);
        assert!(cfg.noise.antithetic);
        cfg.validate().unwrap();
    }

    #[test]
    fn invalid_fields_are_named() {
        let mut cfg = RunConfig::preset("clusters-smoke", Engine::Dfa, 0).unwrap();
        cfg.batch_size = 0;
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("batch_size"), "{err}");
        let mut cfg = RunConfig::preset("clusters-smoke", Engine::Dfa, 0).unwrap();
        cfg.local.igl_split = Some(1);
        assert!(cfg.validate().unwrap_err().to_string().contains("igl_split"));
        let mut cfg = RunConfig::preset("clusters-smoke", Engine::Dfa, 0).unwrap();
        cfg.model.dropout = 1.5;
        assert!(cfg.validate().unwrap_err().to_string().contains("dropout"));
    }

    #[test]
    fn presets_expand_to_explicit_arch() {
        let cfg = RunConfig::preset("mnist-fc300-desk", Engine::Opzo, 0).unwrap();
        let r = cfg.resolved();
        assert_eq!(r.model.arch, "FC300-FC300-FC");
        assert!(matches!(r.dataset, DatasetConfig::Mnist { dir: Some(_) }));
        assert_eq!(r.resolved(), r);
        assert!(RunConfig::preset("imagenet", Engine::Opzo, 0).is_err());
    }

    #[test]
    fn zo_presets_use_smaller_rate_without_dropout() {
        let zo = RunConfig::preset("mnist-fc300-desk", Engine::ZoSp, 0).unwrap();
        let bp = RunConfig::preset("mnist-fc300-desk", Engine::BpSg, 0).unwrap();
        assert_eq!(zo.optim.lr, 1e-4);
        assert_eq!(zo.model.dropout, 0.0);
        assert_eq!(bp.optim.lr, 1e-3);
        assert_eq!(bp.model.dropout, 0.2);
        let zo = RunConfig::preset("mnist-fc800", Engine::ZoSp, 0).unwrap();
        let bp = RunConfig::preset("mnist-fc800", Engine::BpSg, 0).unwrap();
        assert_eq!((zo.optim.lr, bp.optim.lr), (2e-5, 2e-4));
    }

    #[test]
    fn compare_rejects_empty_input() {
        assert!(compare(&[]).is_err());
    }

    #[test]
    fn statistics_helpers() {
        assert_eq!(mean_std(&[1.0, 3.0]), (2.0, 2f64.sqrt()));
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
