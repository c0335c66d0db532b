//! Command-line pipeline: phantom datasets, training, evaluation, 3D maps and plots.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use densecine::eval::{classical_ft, comparison_table, evaluate, oracle_dense, FtConfig};
use densecine::io::{load_model, load_split, prepare_output_dir, read_manifest, write_dataset, write_json, write_text};
use densecine::joint::{train_joint, JointModel, LossWeights, ModelConfig, TrainConfig};
use densecine::phantom::{PhantomCase, PhantomSpec};
use densecine::recon3d::{export_surface, phantom_study, reconstruct_surface, study_from_cases};
use densecine::strain::{StrainMatrix, TosCurve, LMA_THRESHOLD_MS};

pub mod plot;

pub const OUT_ENV: &str = "DENSECINE_OUT";

#[derive(Parser, Debug)]
#[command(name = "densecine", version, about = "Strain and late-activation estimation on synthetic cardiac sequences")]
pub struct Cli {
    /// JSON run configuration; missing fields take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (the DENSECINE_OUT environment variable takes precedence).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Seed for dataset generation and training.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Allow writing into non-empty output directories.
    #[arg(long, global = true)]
    pub force: bool,
    /// Override a config field, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a phantom dataset with train/val/test splits.
    Phantom {
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train the joint model on the dataset's train split.
    Train,
    /// Evaluate methods on the test split.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated methods (gt, oracle, joint, ft).
        #[arg(long)]
        methods: Option<String>,
    },
    /// Write one PLY activation map per method for a 4-slice phantom study.
    Render3d {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        methods: Option<String>,
    },
    /// Plot a strain matrix with TOS curves overlaid.
    Plot {
        /// Case directory name inside the dataset, e.g. case_000060.
        #[arg(long)]
        case: String,
        #[arg(long, default_value = "gt")]
        method: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Ground-truth TOS labels.
    Gt,
    /// TOS extracted from the ground-truth DENSE strain.
    Oracle,
    Joint,
    /// Classical per-pair registration of the cine frames.
    Ft,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Gt => "gt",
            Method::Oracle => "oracle",
            Method::Joint => "joint",
            Method::Ft => "ft",
        }
    }
}

impl FromStr for Method {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "gt" => Method::Gt,
            "oracle" | "oracle-dense" => Method::Oracle,
            "joint" => Method::Joint,
            "ft" | "cine-ft" => Method::Ft,
            other => bail!("unknown method {other:?} (expected gt, oracle, joint or ft)"),
        })
    }
}

pub fn parse_methods(s: &str) -> Result<Vec<Method>> {
    let methods = s.split(',').filter(|m| !m.trim().is_empty()).map(Method::from_str).collect::<Result<Vec<_>>>()?;
    if methods.is_empty() {
        bail!("no methods given");
    }
    Ok(methods)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub count: usize,
    pub seed: u64,
    /// Defaults to `<out>/dataset`.
    pub dir: Option<PathBuf>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig { count: 91, seed: 0, dir: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub threshold_ms: f64,
    pub methods: Vec<Method>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { threshold_ms: LMA_THRESHOLD_MS, methods: vec![Method::Oracle, Method::Joint, Method::Ft] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub methods: Vec<Method>,
    pub slices: usize,
    pub slice_gap_mm: f64,
    pub pixel_spacing_mm: f64,
    /// Sectors the activation pattern turns by from one slice to the next.
    pub twist_sectors: usize,
    pub angular_samples: usize,
    pub z_samples: usize,
    pub study_seed: u64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            methods: vec![Method::Gt, Method::Joint],
            slices: 4,
            slice_gap_mm: 10.0,
            pixel_spacing_mm: 1.5,
            twist_sectors: 4,
            angular_samples: 256,
            z_samples: 31,
            study_seed: 1_000_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlotConfig {
    pub width: u32,
    pub height: u32,
}

impl Default for PlotConfig {
    fn default() -> Self {
        PlotConfig { width: 640, height: 480 }
    }
}

/// Everything a run needs, as one JSON document.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    pub phantom: PhantomSpec,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub train: TrainConfig,
    pub ft: FtConfig,
    pub eval: EvalConfig,
    pub render: RenderConfig,
    pub plot: PlotConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// Applies one `a.b.c=value` override. The value is read as JSON when it
    /// parses, otherwise as a string. The key must already exist.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment.split_once('=').ok_or_else(|| anyhow!("--set expects KEY=VALUE, got {assignment:?}"))?;
        let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut doc = serde_json::to_value(&*self)?;
        let mut slot = &mut doc;
        for part in key.split('.') {
            slot = match slot {
                Value::Object(map) => map.get_mut(part),
                Value::Array(items) => part.parse::<usize>().ok().and_then(|i| items.get_mut(i)),
                _ => None,
            }
            .ok_or_else(|| anyhow!("unknown config key {key:?}"))?;
        }
        *slot = value;
        *self = serde_json::from_value(doc).with_context(|| format!("invalid value for {key}"))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.model.validate()?;
        self.weights.validate(self.model.n_sectors, self.model.t_dense)?;
        self.train.validate()?;
        self.ft.reg.validate()?;
        let p = &self.phantom;
        let m = &self.model;
        if (p.grid_size, p.n_sectors, p.t_dense) != (m.grid_size, m.n_sectors, m.t_dense) || p.dense_dt_ms != m.dense_dt_ms {
            bail!(
                "model shape (grid {}, sectors {}, frames {}, dt {}) does not match the phantom (grid {}, sectors {}, frames {}, dt {})",
                m.grid_size, m.n_sectors, m.t_dense, m.dense_dt_ms, p.grid_size, p.n_sectors, p.t_dense, p.dense_dt_ms
            );
        }
        if !(self.eval.threshold_ms.is_finite()) {
            bail!("eval.threshold_ms must be finite");
        }
        if self.plot.width < 16 || self.plot.height < 16 {
            bail!("plot size must be at least 16 x 16");
        }
        Ok(())
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.dataset.dir.clone().unwrap_or_else(|| self.out_dir.join("dataset"))
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.train.checkpoint_dir.clone().unwrap_or_else(|| self.out_dir.join("checkpoint"))
    }
}

/// Builds the effective config: file, then `--set`, then `--seed`, `--out` and the environment.
pub fn resolve_config(cli: &Cli, env_out: Option<PathBuf>) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig { out_dir: PathBuf::from("out"), ..RunConfig::default() },
    };
    for s in &cli.set {
        cfg.apply_override(s)?;
    }
    if let Some(seed) = cli.seed {
        cfg.dataset.seed = seed;
        cfg.train.seed = seed;
    }
    if let Some(out) = env_out.or_else(|| cli.out.clone()) {
        cfg.out_dir = out;
    }
    if cfg.out_dir.as_os_str().is_empty() {
        cfg.out_dir = PathBuf::from("out");
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<()> {
    let env_out = std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()).map(PathBuf::from);
    let cfg = resolve_config(&cli, env_out)?;
    match &cli.command {
        Command::Phantom { count } => cmd_phantom(&cfg, count.unwrap_or(cfg.dataset.count), cli.force).map(|_| ()),
        Command::Train => cmd_train(&cfg, cli.force).map(|_| ()),
        Command::Eval { checkpoint, methods } => {
            let methods = methods.as_deref().map(parse_methods).transpose()?.unwrap_or_else(|| cfg.eval.methods.clone());
            cmd_eval(&cfg, checkpoint.as_deref(), &methods, cli.force).map(|_| ())
        }
        Command::Render3d { checkpoint, methods } => {
            let methods = methods.as_deref().map(parse_methods).transpose()?.unwrap_or_else(|| cfg.render.methods.clone());
            cmd_render3d(&cfg, checkpoint.as_deref(), &methods, cli.force).map(|_| ())
        }
        Command::Plot { case, method, checkpoint } => {
            cmd_plot(&cfg, case, method.parse()?, checkpoint.as_deref(), cli.force).map(|_| ())
        }
    }
}

pub fn cmd_phantom(cfg: &RunConfig, count: usize, force: bool) -> Result<PathBuf> {
    if count == 0 {
        bail!("count must be at least 1");
    }
    let dir = prepare_output_dir(cfg.dataset_dir(), force)?;
    let manifest = write_dataset(&dir, &cfg.phantom, count, cfg.dataset.seed)?;
    println!(
        "wrote {count} cases to {} (train {}, val {}, test {})",
        dir.display(),
        manifest.train.len(),
        manifest.val.len(),
        manifest.test.len()
    );
    Ok(dir)
}

fn load_dataset_split(cfg: &RunConfig, which: &str) -> Result<Vec<PhantomCase>> {
    let dir = cfg.dataset_dir();
    let manifest = read_manifest(&dir).with_context(|| format!("no dataset at {} (run `densecine phantom` first)", dir.display()))?;
    let names = match which {
        "train" => &manifest.train,
        "val" => &manifest.val,
        _ => &manifest.test,
    };
    Ok(load_split(&dir, names)?)
}

pub fn cmd_train(cfg: &RunConfig, force: bool) -> Result<PathBuf> {
    let train = load_dataset_split(cfg, "train")?;
    let val = load_dataset_split(cfg, "val")?;
    if train.is_empty() {
        bail!("the dataset has no training cases");
    }
    let dir = prepare_output_dir(cfg.checkpoint_dir(), force)?;
    let tc = TrainConfig { checkpoint_dir: Some(dir.clone()), ..cfg.train.clone() };
    let start = Instant::now();
    let mut log = String::new();
    let result = train_joint(&train, &val, &cfg.model, &cfg.weights, &tc, |e| {
        println!(
            "epoch {:>3}  loss {:.5}  val tos mse {:.1}  val lma acc {:.3}",
            e.epoch, e.train.total, e.val_tos_mse, e.val_lma_accuracy
        );
        let _ = writeln!(log, "epoch {} done after {:.1} s", e.epoch, start.elapsed().as_secs_f64());
    })?;
    let _ = writeln!(log, "best epoch {}", result.best_epoch);
    write_text(dir.join("train.log"), &log)?;
    write_text(dir.join("run_config.json"), &cfg.to_json())?;
    println!("best epoch {} saved to {}", result.best_epoch, dir.display());
    Ok(dir)
}

fn load_checkpoint(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<JointModel<f32>> {
    let dir = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| cfg.checkpoint_dir());
    load_model(&dir).with_context(|| format!("loading checkpoint {}", dir.display()))
}

/// Strain matrix and TOS of one method on one case.
pub fn run_method(method: Method, case: &PhantomCase, model: Option<&JointModel<f32>>, cfg: &RunConfig) -> Result<(StrainMatrix, TosCurve)> {
    Ok(match method {
        Method::Gt => (case.gt_strain.clone(), case.gt_tos.clone()),
        Method::Oracle => (case.gt_strain.clone(), oracle_dense(case)),
        Method::Joint => {
            let model = model.ok_or_else(|| anyhow!("the joint method needs a checkpoint"))?;
            let p = model.predict_case(case, cfg.weights.svd_rank)?;
            (p.strain, p.tos)
        }
        Method::Ft => {
            let r = classical_ft(case, &cfg.ft)?;
            (r.strain, r.tos)
        }
    })
}

fn maybe_model(methods: &[Method], cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<Option<JointModel<f32>>> {
    methods.contains(&Method::Joint).then(|| load_checkpoint(cfg, checkpoint)).transpose()
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: Option<&Path>, methods: &[Method], force: bool) -> Result<PathBuf> {
    let test = load_dataset_split(cfg, "test")?;
    if test.is_empty() {
        bail!("the dataset has no test cases");
    }
    let model = maybe_model(methods, cfg, checkpoint)?;
    let dir = prepare_output_dir(cfg.out_dir.join("eval"), force)?;
    let ids: Vec<String> = test.iter().map(|c| densecine::io::case_name(c.seed)).collect();
    let gts: Vec<TosCurve> = test.iter().map(|c| c.gt_tos.clone()).collect();
    let mut reports = Vec::new();
    for &m in methods {
        let preds = test
            .iter()
            .map(|c| run_method(m, c, model.as_ref(), cfg).map(|r| r.1))
            .collect::<Result<Vec<_>>>()?;
        let report = evaluate(m.name(), &ids, &preds, &gts, cfg.eval.threshold_ms)?;
        write_text(dir.join(format!("{}.json", m.name())), &report.to_json())?;
        write_text(dir.join(format!("{}.csv", m.name())), &report.to_csv())?;
        reports.push(report);
    }
    let table = comparison_table(&reports);
    write_text(dir.join("comparison.txt"), &table)?;
    print!("{table}");
    Ok(dir)
}

pub fn cmd_render3d(cfg: &RunConfig, checkpoint: Option<&Path>, methods: &[Method], force: bool) -> Result<Vec<PathBuf>> {
    let r = &cfg.render;
    let model = maybe_model(methods, cfg, checkpoint)?;
    let study = phantom_study(&cfg.phantom, r.study_seed, r.slices, r.slice_gap_mm, r.twist_sectors)?;
    let dir = prepare_output_dir(cfg.out_dir.join("render3d"), force)?;
    let mut written = Vec::new();
    for &m in methods {
        let tos = study
            .iter()
            .map(|(_, c)| run_method(m, c, model.as_ref(), cfg).map(|r| r.1))
            .collect::<Result<Vec<_>>>()?;
        let surface = reconstruct_surface(&study_from_cases(&study, tos, r.pixel_spacing_mm)?, r.angular_samples, r.z_samples)?;
        let path = dir.join(format!("{}.ply", m.name()));
        export_surface(&surface, &path)?;
        println!("wrote {} ({} vertices, {} faces)", path.display(), surface.points.len(), surface.faces.len());
        written.push(path);
    }
    Ok(written)
}

pub fn cmd_plot(cfg: &RunConfig, case_name: &str, method: Method, checkpoint: Option<&Path>, force: bool) -> Result<PathBuf> {
    let case_dir = cfg.dataset_dir().join(case_name);
    let case = densecine::io::load_case(&case_dir).with_context(|| format!("loading case {}", case_dir.display()))?;
    let model = maybe_model(&[method], cfg, checkpoint)?;
    let (strain, tos) = run_method(method, &case, model.as_ref(), cfg)?;
    let mut curves = vec![(tos, plot::method_color(method))];
    if method != Method::Gt {
        curves.push((case.gt_tos.clone(), plot::method_color(Method::Gt)));
    }
    let img = plot::strain_plot(&strain, &curves, cfg.plot.width, cfg.plot.height);
    let dir = prepare_output_dir(cfg.out_dir.join("plots"), true)?;
    let path = dir.join(format!("{case_name}_{}.png", method.name()));
    if path.exists() && !force {
        bail!("{} exists (use --force)", path.display());
    }
    img.save(&path).with_context(|| format!("writing {}", path.display()))?;
    write_json(dir.join(format!("{case_name}_{}.json", method.name())), &serde_json::json!({
        "case": case_name,
        "method": method.name(),
        "tos_ms": curves[0].0.values,
    }))?;
    println!("wrote {}", path.display());
    Ok(path)
}
