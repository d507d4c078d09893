use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::Args;
use pdefm::datapipe::{split_range, Split, StreamFile};
use pdefm::eval::{evaluate as eval_split, rollout_csv, rollout_trajectory, MetricReport, Persistence};
use pdefm::model::{load_checkpoint, Model};
use pdefm::pdegen::{write_dataset, GenSpec, Pde};
use pdefm::train::{apply_finetune_level, FinetuneLevel, TrainDataset, Trainer};
use pdefm::uptf::{compute_revin_stats, from_uptf, Container};
use serde_json::json;

use crate::config::{default_data_dir, parse_override, resolve_gen, RunConfig};
use crate::run::RunDir;
use crate::ConfigArgs;

#[derive(Args)]
pub struct GenArgs {
    #[arg(long)]
    pub pde: Pde,
    /// Trajectories.
    #[arg(long)]
    pub n: Option<usize>,
    /// Saved frames per trajectory.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Grid such as `128`, `32x32` or `16x16x16`.
    #[arg(long)]
    pub grid: Option<String>,
    #[arg(long)]
    pub nu: Option<f64>,
    #[arg(long)]
    pub t_end: Option<f64>,
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Any other generator key, e.g. `--set rho=2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Container directory; defaults to `$PDEFM_DATA_DIR/<pde>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct StatsArgs {
    /// Container directory.
    pub container: PathBuf,
}

#[derive(Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Continue from a `last.ckpt`.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Pretrained checkpoint; defaults to `finetune.checkpoint`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub level: Option<u8>,
    #[arg(long)]
    pub lora_r_attn: Option<usize>,
    #[arg(long)]
    pub lora_r_mlp: Option<usize>,
    /// Continue an interrupted fine-tuning run from its `last.ckpt`.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Container directories; defaults to the config's datasets.
    #[arg(long = "data")]
    pub data: Vec<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long, default_value_t = 1)]
    pub ar_order: usize,
    #[arg(long, default_value = "runs/evaluate")]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct RolloutArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Trajectory index within the split.
    #[arg(long, default_value_t = 0)]
    pub traj: usize,
    #[arg(long, default_value_t = 10)]
    pub steps: usize,
    #[arg(long, default_value_t = 1)]
    pub ar_order: usize,
    #[arg(long, default_value = "runs/rollout")]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct InspectArgs {
    /// Container directory or checkpoint file.
    pub path: PathBuf,
}

/// `128` / `32x32` / `16x16x16` to `(D, H, W)` for a `dims`-D problem.
pub fn parse_grid(s: &str, dims: usize) -> Result<[usize; 3]> {
    let parts: Vec<usize> = s.split(['x', 'X']).map(|p| p.trim().parse::<usize>()).collect::<Result<_, _>>().with_context(|| format!("bad grid '{s}'"))?;
    if parts.len() != dims {
        bail!("grid '{s}' has {} axes, the PDE needs {dims}", parts.len());
    }
    let mut g = [1; 3];
    g[3 - dims..].copy_from_slice(&parts);
    Ok(g)
}

fn describe_container(c: &Container) -> String {
    let d = c.descriptor();
    let mut s = format!(
        "dataset {}\n  layout {:?}\n  fields {}\n  dims {} spatial {:?}\n  trajectories {} steps {}\n  uptf {}\n",
        d.name,
        d.layout,
        d.fields.iter().map(|f| format!("{}[{}]", f.name, f.components)).collect::<Vec<_>>().join(", "),
        d.dims,
        d.spatial,
        c.trajectories(),
        c.steps(),
        d.shape_string()
    );
    match c.stats() {
        Some(st) => {
            s.push_str("  stats (train split)\n");
            for r in st.records(d) {
                s.push_str(&format!("    {}[{}] mean {:.6e} std {:.6e}\n", r.field, r.component, r.mean, r.std));
            }
        }
        None => s.push_str("  stats missing\n"),
    }
    s
}

fn train_stats(c: &mut Container) -> Result<()> {
    let n = c.trajectories();
    let train = split_range(n, Split::Train);
    let range = if train.is_empty() { 0..n } else { train };
    let stats = compute_revin_stats([c.read_uptf(range)?], c.descriptor())?;
    c.write_stats(&stats)?;
    Ok(())
}

pub fn gen_data(a: GenArgs) -> Result<()> {
    let mut spec = GenSpec::desk(a.pde);
    if let Some(v) = a.n {
        spec.n = v;
    }
    if let Some(v) = a.steps {
        spec.steps = v;
    }
    if let Some(g) = &a.grid {
        spec.grid = parse_grid(g, a.pde.dims())?;
    }
    if let Some(v) = a.nu {
        spec.nu = v;
    }
    if let Some(v) = a.t_end {
        spec.t_end = v;
    }
    if a.dt.is_some() {
        spec.dt = a.dt;
    }
    if let Some(v) = a.seed {
        spec.seed = v;
    }
    if !a.set.is_empty() {
        let mut t = toml::Table::try_from(&spec)?;
        for o in &a.set {
            let (k, v) = parse_override(o)?;
            t.insert(k, v);
        }
        spec = resolve_gen(t, None)?;
    }
    spec.validate()?;
    let out = a.out.unwrap_or_else(|| default_data_dir().join(a.pde.name()));
    eprintln!("gen-data seed={} spec {}", spec.seed, serde_json::to_string(&spec)?);
    let c = write_dataset(&spec, &out)?;
    fs::write(out.join("genspec.json"), serde_json::to_string_pretty(&spec)?)?;
    print!("{}", describe_container(&c));
    println!("wrote {}", out.display());
    Ok(())
}

pub fn stats(a: StatsArgs) -> Result<()> {
    let mut c = Container::open(&a.container)?;
    train_stats(&mut c)?;
    print!("{}", describe_container(&c));
    Ok(())
}

/// Opens (or generates) every configured dataset.
fn open_datasets(cfg: &RunConfig, run: &mut RunDir) -> Result<Vec<TrainDataset>> {
    if cfg.datasets.is_empty() {
        bail!("no [[datasets]] configured");
    }
    let mut out = Vec::new();
    for d in &cfg.datasets {
        let mut c = if d.dir.join("meta.json").exists() {
            Container::open(&d.dir)?
        } else if let Some(spec) = &d.generate {
            run.log(&format!("generating {} into {}", d.name, d.dir.display()));
            write_dataset(spec, &d.dir)?
        } else {
            bail!("dataset '{}': no container at {} and no generate table", d.name, d.dir.display());
        };
        if c.stats().is_none() {
            run.log(&format!("computing stats for {}", d.name));
            train_stats(&mut c)?;
        }
        out.push(TrainDataset::from_container(&d.name, c)?);
    }
    Ok(out)
}

fn load_run_config(a: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(a.config.as_deref(), &a.set)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
        cfg.train.seed = s;
    }
    Ok(cfg)
}

fn train_loop(run: &mut RunDir, trainer: Trainer<'_>) -> Result<serde_json::Value> {
    let log_path = run.dir.join("run.log");
    let mut trainer = trainer.with_output(&run.dir).on_epoch(move |l| {
        let line = format!(
            "epoch {:>4} train {:.6e} val {:.6e} lr {:.3e} steps {}{}",
            l.epoch,
            l.train_loss,
            l.val_loss,
            l.lr,
            l.steps,
            if l.improved { " *" } else { "" }
        );
        eprintln!("{line}");
        if let Ok(mut f) = fs::OpenOptions::new().append(true).open(&log_path) {
            let _ = writeln!(f, "{line}");
        }
    });
    let outcome = trainer.run()?;
    for f in ["best.ckpt", "last.ckpt", "curves.csv"] {
        run.path(f);
    }
    let p = trainer.model().params();
    Ok(json!({
        "epochs": outcome.epochs,
        "steps": outcome.steps,
        "best_val": outcome.best_val,
        "stopped_early": outcome.stopped_early,
        "total_params": p.total_count(),
        "trainable_params": p.trainable_count(),
    }))
}

pub fn pretrain(a: PretrainArgs) -> Result<()> {
    let cfg = load_run_config(&a.cfg)?;
    let dir = a.cfg.out.clone().or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from("runs/pretrain"));
    let mut run = RunDir::create(&dir, "pretrain", cfg.seed)?;
    run.record_config(&cfg.to_toml()?)?;
    let datasets = open_datasets(&cfg, &mut run)?;
    let trainer = match &a.resume {
        Some(p) => {
            let ck = load_checkpoint(p)?;
            if ck.model.config() != &cfg.model {
                bail!("checkpoint {} was trained with a different model configuration", p.display());
            }
            run.log(&format!("resuming from {} after epoch {}", p.display(), ck.meta.epoch));
            Trainer::resume(ck, &datasets, cfg.train.clone())?
        }
        None => Trainer::new(Model::new(cfg.model.clone(), cfg.seed)?, &datasets, cfg.train.clone())?,
    };
    run.log(&format!(
        "model {} parameters; sampler weights {:?}; {} steps per epoch",
        trainer.model().params().total_count(),
        trainer.sampler_weights().weights(),
        trainer.steps_per_epoch()
    ));
    let summary = train_loop(&mut run, trainer)?;
    println!("pretrain finished: {summary}");
    println!("run directory {}", dir.display());
    run.finish(summary)
}

pub fn finetune(a: FinetuneArgs) -> Result<()> {
    let mut cfg = load_run_config(&a.cfg)?;
    let section = cfg.finetune.clone();
    let level_n = a.level.or(section.as_ref().map(|s| s.level)).ok_or_else(|| anyhow!("fine-tuning level missing (--level or [finetune].level)"))?;
    let level = FinetuneLevel::new(level_n)?;
    let r_attn = a.lora_r_attn.or(section.as_ref().map(|s| s.r_attn)).unwrap_or(16);
    let r_mlp = a.lora_r_mlp.or(section.as_ref().map(|s| s.r_mlp)).unwrap_or(12);
    let (lr, wd) = level.default_hparams();
    if !cfg.explicit_lr {
        cfg.train.lr = lr;
    }
    if !cfg.explicit_wd {
        cfg.train.weight_decay = wd;
    }
    let dir = a.cfg.out.clone().or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from("runs/finetune"));
    let mut run = RunDir::create(&dir, "finetune", cfg.seed)?;
    run.record_config(&cfg.to_toml()?)?;
    run.log(&format!("{level} r_attn={r_attn} r_mlp={r_mlp} lr={} weight_decay={}", cfg.train.lr, cfg.train.weight_decay));
    let datasets = open_datasets(&cfg, &mut run)?;
    let trainer = match &a.resume {
        Some(p) => {
            let ck = load_checkpoint(p)?;
            run.log(&format!("resuming from {} after epoch {}", p.display(), ck.meta.epoch));
            Trainer::resume(ck, &datasets, cfg.train.clone())?
        }
        None => {
            let path = a
                .checkpoint
                .clone()
                .or(section.and_then(|s| s.checkpoint))
                .ok_or_else(|| anyhow!("pretrained checkpoint missing (--checkpoint or [finetune].checkpoint)"))?;
            let mut model = load_checkpoint(&path)?.model;
            apply_finetune_level(&mut model, level, r_attn, r_mlp, cfg.seed);
            Trainer::new(model, &datasets, cfg.train.clone())?
        }
    };
    let p = trainer.model().params();
    let counts = format!("trainable {} / total {} parameters", p.trainable_count(), p.total_count());
    println!("{counts}");
    run.log(&counts);
    let summary = train_loop(&mut run, trainer)?;
    println!("finetune finished: {summary}");
    run.finish(summary)
}

fn dataset_name(c: &Container, dir: &Path) -> String {
    let n = &c.descriptor().name;
    if n.is_empty() {
        dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
    } else {
        n.clone()
    }
}

pub fn evaluate(a: EvalArgs) -> Result<()> {
    let model = load_checkpoint(&a.checkpoint)?.model;
    let dirs: Vec<(Option<String>, PathBuf)> = if a.data.is_empty() {
        let cfg = RunConfig::load(a.config.as_deref(), &[])?;
        if cfg.datasets.is_empty() {
            bail!("nothing to evaluate: pass --data or a --config with datasets");
        }
        cfg.datasets.into_iter().map(|d| (Some(d.name), d.dir)).collect()
    } else {
        a.data.iter().map(|d| (None, d.clone())).collect()
    };
    let mut run = RunDir::create(&a.out, "evaluate", 0)?;
    let mut model_report = MetricReport { predictor: "model".into(), rows: Vec::new() };
    let mut base_report = MetricReport { predictor: "persistence".into(), rows: Vec::new() };
    for (name, dir) in dirs {
        let c = Container::open(&dir)?;
        if c.stats().is_none() {
            bail!("{}: normalization stats missing (run `pdefm stats`)", dir.display());
        }
        let name = name.unwrap_or_else(|| dataset_name(&c, &dir));
        let files = vec![StreamFile::split(c, a.split)?];
        model_report.extend(eval_split(&model, &name, &files, a.ar_order, a.batch)?);
        base_report.extend(eval_split(&Persistence, &name, &files, a.ar_order, a.batch)?);
    }
    print!("{}", model_report.to_text());
    print!("{}", base_report.to_text());
    let mut summary = serde_json::Map::new();
    for d in model_report.datasets() {
        let (m, p) = (model_report.dataset_nrmse(&d), base_report.dataset_nrmse(&d));
        println!("{d}: nrmse {m:.6e} (persistence {p:.6e}, ratio {:.4})", m / p);
        summary.insert(
            d.clone(),
            json!({"nrmse": m, "vrmse": model_report.dataset_vrmse(&d), "persistence_nrmse": p, "persistence_vrmse": base_report.dataset_vrmse(&d)}),
        );
    }
    let mut csv = model_report.to_csv();
    csv.push_str(base_report.to_csv().split_once('\n').map(|x| x.1).unwrap_or(""));
    fs::write(run.path("metrics.csv"), csv)?;
    run.finish(serde_json::Value::Object(summary))
}

pub fn rollout(a: RolloutArgs) -> Result<()> {
    let model = load_checkpoint(&a.checkpoint)?.model;
    let c = Container::open(&a.data)?;
    let stats = c.stats().cloned().ok_or_else(|| anyhow!("{}: normalization stats missing", a.data.display()))?;
    let mut desc = c.descriptor().clone();
    let name = dataset_name(&c, &a.data);
    let file = StreamFile::split(c, a.split)?;
    if a.traj >= file.trajectories() {
        bail!("trajectory {} outside the {} of the {:?} split", a.traj, file.trajectories(), a.split);
    }
    let mut run = RunDir::create(&a.out, "rollout", 0)?;
    run.log(&format!("rollout {name} traj {} of {:?}, {} steps", a.traj, a.split, a.steps));
    println!("step,nrmse,vrmse");
    let r = rollout_trajectory(&model, &file, a.traj, a.ar_order, a.steps, |m| {
        println!("{},{:.10e},{:.10e}", m.step, m.nrmse, m.vrmse);
        let _ = std::io::stdout().flush();
    })?;
    fs::write(run.path("rollout.csv"), rollout_csv(&r.metrics))?;
    desc.name = format!("{name}-rollout");
    desc.trajectories = 1;
    let native = from_uptf(&r.frames, &desc)?;
    Container::write(&run.path("frames"), &desc, &native, Some(&stats))?;
    let last = r.metrics.last().copied();
    run.finish(json!({"dataset": name, "steps": a.steps, "final_nrmse": last.map(|m| m.nrmse), "final_vrmse": last.map(|m| m.vrmse)}))
}

pub fn inspect(a: InspectArgs) -> Result<()> {
    if a.path.is_dir() {
        let c = Container::open(&a.path)?;
        print!("{}", describe_container(&c));
        return Ok(());
    }
    let ck = load_checkpoint(&a.path)?;
    let p = ck.model.params();
    println!("checkpoint {}", a.path.display());
    println!("parameters {} (trainable {})", p.total_count(), p.trainable_count());
    let mut groups = std::collections::BTreeMap::new();
    for (_, e) in p.iter() {
        *groups.entry(format!("{:?}", e.group)).or_insert(0usize) += e.value.len();
    }
    for (g, n) in groups {
        println!("  {g:<12} {n}");
    }
    println!("epoch {} steps {} best_val {:?}", ck.meta.epoch, ck.meta.steps, ck.meta.best_val);
    println!("optimizer state {}", if ck.optim.is_some() { "present" } else { "absent" });
    println!("--- model config ---\n{}", toml::to_string_pretty(ck.model.config())?);
    Ok(())
}
