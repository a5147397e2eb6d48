use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use dragsdf_core::augment::{apply_policy_traced, AugOp, AugPolicy};
use dragsdf_core::config::RunConfig;
use dragsdf_core::evaluation::{build_report, render_report, ReportFiles, Unit};
use dragsdf_core::geometry::{load_mesh, write_stl, DomainSpec};
use dragsdf_core::manifest::{Manifest, Split};
use dragsdf_core::pipeline::{baseline_refs, eval_pairs, train_samples};
use dragsdf_core::surrogate::{
    fit_scalers, load_checkpoint, save_checkpoint, train, SurrogateModel, TrainingMeta,
};
use dragsdf_core::synthfleet::{generate_fleet, FleetSpec};
use dragsdf_core::voxelizer::{generate_sdf_with_threads, read_vsdf, write_vsdf, SdfGrid};

#[derive(Parser)]
#[command(name = "dragsdf", version, about = "Mesh -> signed distance field -> drag coefficient surrogate")]
struct Cli {
    /// Print progress messages.
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic fleet of car-like meshes with pseudo-drag labels.
    Synth(SynthArgs),
    /// Sample a mesh (or every mesh of a manifest) onto an SDF grid.
    Voxelize(VoxelizeArgs),
    /// Apply one augmentation operator to a grid for inspection.
    AugmentPreview(AugmentArgs),
    /// Train the surrogate on the train split of a manifest.
    Train(TrainArgs),
    /// Predict drag for a mesh, a grid, or every sample of a manifest.
    Predict(PredictArgs),
    /// Score predictions on the test split and write report files.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Fleet spec file (TOML). Defaults to the built-in five-project fleet.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Add Gaussian label noise of 0.5 drag counts.
    #[arg(long)]
    label_noise: bool,
}

#[derive(Args)]
struct DomainArgs {
    /// Run config (TOML) whose domain is used.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Grid dimensions as nx,ny,nz; overrides the config.
    #[arg(long, value_parser = parse_dims)]
    dims: Option<[usize; 3]>,
}

impl DomainArgs {
    fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(d) = self.dims {
            cfg = cfg.with_dims(d);
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct VoxelizeArgs {
    /// Single mesh (STL or OBJ).
    #[arg(long, conflicts_with = "manifest", required_unless_present = "manifest")]
    mesh: Option<PathBuf>,
    /// Output grid for --mesh.
    #[arg(long, requires = "mesh")]
    out: Option<PathBuf>,
    /// Manifest whose mesh_path entries are voxelized.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Directory for grids in manifest mode.
    #[arg(long, requires = "manifest")]
    out_dir: Option<PathBuf>,
    /// Where the manifest with sdf_path filled in is written
    /// (default: <out-dir>/manifest.jsonl).
    #[arg(long, requires = "manifest")]
    out_manifest: Option<PathBuf>,
    #[command(flatten)]
    domain: DomainArgs,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Drop degenerate triangles instead of failing.
    #[arg(long)]
    fix_degenerate: bool,
}

#[derive(Args)]
struct AugmentArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// clamp, translate, noise, elastic, resample or dropout
    #[arg(long)]
    op: AugOp,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0)]
    epoch: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    domain: DomainArgs,
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of epochs (overrides the config).
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, conflicts_with_all = ["vsdf", "manifest"])]
    mesh: Option<PathBuf>,
    #[arg(long, conflicts_with = "manifest")]
    vsdf: Option<PathBuf>,
    /// Predict every sample with an sdf_path; requires --out.
    #[arg(long, requires = "out")]
    manifest: Option<PathBuf>,
    /// Predictions CSV for --manifest.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    fix_degenerate: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, conflicts_with = "predictions", required_unless_present = "predictions")]
    checkpoint: Option<PathBuf>,
    /// Predictions CSV (sample_id,cd_pred) instead of a checkpoint.
    #[arg(long)]
    predictions: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// counts or raw
    #[arg(long, default_value = "counts")]
    unit: Unit,
    /// Smallest test group listed in the trend export.
    #[arg(long, default_value_t = 3)]
    min_group_size: usize,
}

fn parse_dims(s: &str) -> std::result::Result<[usize; 3], String> {
    let parts: Vec<usize> = s
        .split(|c| c == ',' || c == 'x')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    match parts.as_slice() {
        &[x, y, z] if x > 0 && y > 0 && z > 0 => Ok([x, y, z]),
        _ => Err(format!("expected three positive integers nx,ny,nz, got {s:?}")),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { log::LevelFilter::Info } else { log::LevelFilter::Warn };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Voxelize(a) => cmd_voxelize(a),
        Command::AugmentPreview(a) => cmd_augment_preview(a),
        Command::Train(a) => cmd_train(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Evaluate(a) => cmd_evaluate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn secs(t: Instant) -> f64 {
    t.elapsed().as_secs_f64()
}

fn run_pool<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build()?;
            Ok(pool.install(f))
        }
    }
}

#[derive(Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct FleetFile {
    version: u32,
    #[serde(flatten)]
    fleet: FleetSpec,
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let t0 = Instant::now();
    let mut spec = match &a.spec {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))?;
            let file: FleetFile = toml::from_str(&text).with_context(|| format!("invalid fleet spec {}", p.display()))?;
            if file.version != 1 {
                bail!("fleet spec version {} is not supported (expected 1)", file.version);
            }
            file.fleet
        }
        None => FleetSpec::default(),
    };
    spec.seed = a.seed;
    if a.label_noise {
        spec.label_noise_counts = 0.5;
    }
    let fleet = generate_fleet(&spec)?;
    let meshes = fleet.meshes()?;
    let mesh_dir = a.out.join("meshes");
    create_dir(&mesh_dir)?;
    let mut records = fleet.records();
    for (r, m) in records.iter_mut().zip(&meshes) {
        let rel = PathBuf::from("meshes").join(format!("{}.stl", r.sample_id));
        write_stl(m, a.out.join(&rel))?;
        r.mesh_path = Some(rel);
    }
    let manifest = Manifest::new(records)?;
    manifest.save(a.out.join("manifest.jsonl"))?;
    let (train, test) = spec.total();
    println!(
        "wrote {} meshes ({train} train, {test} test) and manifest.jsonl to {} in {:.2} s",
        meshes.len(),
        a.out.display(),
        secs(t0)
    );
    Ok(())
}

fn cmd_voxelize(a: VoxelizeArgs) -> Result<()> {
    let cfg = a.domain.run_config()?;
    let domain = cfg.domain;
    domain.validate()?;
    let threads = a.threads.unwrap_or(0);
    let voxelize = |mesh_path: &Path| -> Result<(SdfGrid, f64, f64)> {
        let t = Instant::now();
        let mesh = load_mesh(mesh_path, a.fix_degenerate).with_context(|| format!("loading {}", mesh_path.display()))?;
        let load = secs(t);
        let t = Instant::now();
        let centered = dragsdf_core::geometry::center_in_domain(&mesh, &domain)
            .with_context(|| format!("placing {}", mesh_path.display()))?;
        let grid = if threads == 0 {
            dragsdf_core::voxelizer::generate_sdf(&centered, &domain)?
        } else {
            generate_sdf_with_threads(&centered, &domain, threads)?
        };
        Ok((grid, load, secs(t)))
    };

    if let Some(mesh) = &a.mesh {
        let out = a.out.clone().unwrap_or_else(|| mesh.with_extension("vsdf"));
        let (grid, load, sdf) = voxelize(mesh)?;
        write_vsdf(&grid, &out)?;
        println!(
            "wrote {} ({}x{}x{}); load {load:.3} s, voxelize {sdf:.3} s",
            out.display(),
            grid.dims[0],
            grid.dims[1],
            grid.dims[2]
        );
        return Ok(());
    }

    let manifest_path = a.manifest.as_ref().expect("clap requires mesh or manifest");
    let out_dir = a
        .out_dir
        .clone()
        .ok_or_else(|| anyhow!("--out-dir is required with --manifest"))?;
    create_dir(&out_dir)?;
    let out_manifest = a.out_manifest.clone().unwrap_or_else(|| out_dir.join("manifest.jsonl"));
    let mut manifest = Manifest::load(manifest_path)?;
    let t0 = Instant::now();
    let (mut load_total, mut sdf_total) = (0.0, 0.0);
    let out_base = out_manifest.parent().unwrap_or(Path::new("")).to_path_buf();
    for r in &mut manifest.records {
        let mesh = r
            .mesh_path
            .clone()
            .ok_or_else(|| anyhow!("sample {} has no mesh_path", r.sample_id))?;
        let (grid, load, sdf) = voxelize(&mesh)?;
        load_total += load;
        sdf_total += sdf;
        let out = out_dir.join(format!("{}.vsdf", r.sample_id));
        write_vsdf(&grid, &out)?;
        log::info!("{} -> {} ({sdf:.3} s)", r.sample_id, out.display());
        r.sdf_path = Some(relative_to(&out, &out_base));
        r.mesh_path = Some(relative_to(&mesh, &out_base));
    }
    manifest.save(&out_manifest)?;
    println!(
        "voxelized {} meshes into {}; manifest {}; load {load_total:.2} s, voxelize {sdf_total:.2} s, total {:.2} s",
        manifest.records.len(),
        out_dir.display(),
        out_manifest.display(),
        secs(t0)
    );
    Ok(())
}

/// `path` relative to `base` when it lies below it, absolute otherwise.
fn relative_to(path: &Path, base: &Path) -> PathBuf {
    let abs = |p: &Path| fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf());
    let (p, b) = (abs(path), abs(base));
    p.strip_prefix(&b).map(Path::to_path_buf).unwrap_or(p)
}

fn cmd_augment_preview(a: AugmentArgs) -> Result<()> {
    let grid = read_vsdf(&a.input)?;
    let policy = AugPolicy::only(a.op, a.seed);
    let (out, applied) = apply_policy_traced(&grid, &policy, 0, a.epoch);
    write_vsdf(&out, &a.out)?;
    let names: Vec<&str> = applied.iter().map(|o| o.name()).collect();
    println!("applied [{}] -> {}", names.join(", "), a.out.display());
    Ok(())
}

fn load_grids(manifest: &Manifest, dims: [usize; 3], split: Option<Split>) -> Result<Vec<(usize, SdfGrid)>> {
    manifest
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| split.map_or(true, |s| r.split == s))
        .map(|(i, r)| {
            let path = r
                .sdf_path
                .as_ref()
                .ok_or_else(|| anyhow!("sample {} has no sdf_path", r.sample_id))?;
            let g = read_vsdf(path).with_context(|| format!("sample {}", r.sample_id))?;
            if g.dims != dims {
                bail!(
                    "sample {}: grid dims {:?} do not match expected {:?}",
                    r.sample_id,
                    g.dims,
                    dims
                );
            }
            Ok((i, g))
        })
        .collect()
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let t0 = Instant::now();
    let mut cfg = a.domain.run_config()?.with_seed(a.seed);
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(o) = &a.out {
        cfg.output_dir = o.clone();
    }
    cfg.validate()?;

    // every data problem surfaces before the first epoch
    let manifest = Manifest::load(&a.manifest)?;
    manifest.check_train_labels()?;
    for g in manifest.orphan_groups() {
        log::warn!("test group {g} has no training baseline");
    }
    let loaded = load_grids(&manifest, cfg.domain.dims, Some(Split::Train))?;
    if loaded.len() < 2 {
        bail!("need at least 2 training samples, found {}", loaded.len());
    }
    let records: Vec<_> = loaded.iter().map(|(i, _)| manifest.records[*i].clone()).collect();
    let grids: Vec<SdfGrid> = loaded.into_iter().map(|(_, g)| g).collect();
    let samples = train_samples(&records, &grids);
    let load_time = secs(t0);

    let refs: Vec<&SdfGrid> = grids.iter().collect();
    let cds: Vec<f64> = samples.iter().map(|s| s.cd).collect();
    let mut model = SurrogateModel::build(cfg.model.clone(), cfg.seed)?;
    model.set_scaler(fit_scalers(&refs, &cds)?);
    println!(
        "training {} parameters on {} samples for {} epochs",
        model.num_parameters(),
        samples.len(),
        cfg.train.epochs
    );
    let t1 = Instant::now();
    let report = train(&mut model, &samples, &cfg.train_config(), |e| {
        log::info!(
            "epoch {:>4}  loss {:.5}  lr {:.2e}{}",
            e.epoch,
            e.train_loss,
            e.lr,
            e.val_mae.map_or(String::new(), |v| format!("  val {v:.5}"))
        );
    })?;
    let train_time = secs(t1);

    create_dir(&cfg.output_dir)?;
    let ckpt = cfg.output_dir.join("model.ckpt");
    let meta = TrainingMeta {
        seed: cfg.seed,
        epochs_run: report.epochs.len(),
        final_train_loss: report.final_train_loss(),
        selected_epoch: report.selected_epoch,
    };
    save_checkpoint(&model, Some(cfg.domain), Some(meta), &ckpt)?;
    let curve = cfg.output_dir.join("loss_curve.csv");
    fs::write(&curve, report.loss_curve_csv()).with_context(|| format!("writing {}", curve.display()))?;
    let used = cfg.output_dir.join("config.toml");
    fs::write(&used, cfg.to_toml()).with_context(|| format!("writing {}", used.display()))?;
    println!(
        "final loss {:.5} (first epoch {:.5}); wrote {}, {}; load {load_time:.2} s, train {train_time:.2} s",
        report.final_train_loss(),
        report.epochs.first().map_or(f64::NAN, |e| e.train_loss),
        ckpt.display(),
        curve.display()
    );
    Ok(())
}

fn cmd_predict(a: PredictArgs) -> Result<()> {
    let t0 = Instant::now();
    let ck = load_checkpoint(&a.checkpoint)?;
    let model = ck.model;
    let dims = model.config().input_dims;
    let load = secs(t0);

    if let Some(manifest_path) = &a.manifest {
        let manifest = Manifest::load(manifest_path)?;
        let loaded = load_grids(&manifest, dims, None)?;
        let t1 = Instant::now();
        let refs: Vec<&SdfGrid> = loaded.iter().map(|(_, g)| g).collect();
        let preds = run_pool(a.threads, || {
            refs.chunks(16).map(|c| model.predict_batch(c)).collect::<Vec<_>>()
        })?;
        let out = a.out.as_ref().expect("clap requires out");
        let mut w = csv::Writer::from_path(out).with_context(|| format!("writing {}", out.display()))?;
        w.write_record(["sample_id", "cd_pred"])?;
        let mut n = 0;
        for (chunk, p) in loaded.chunks(16).zip(preds) {
            for ((i, _), v) in chunk.iter().zip(p?) {
                w.write_record([manifest.records[*i].sample_id.clone(), format!("{v}")])?;
                n += 1;
            }
        }
        w.flush()?;
        println!(
            "wrote {n} predictions to {}; load {load:.3} s, predict {:.3} s",
            out.display(),
            secs(t1)
        );
        return Ok(());
    }

    let t1 = Instant::now();
    let grid = match (&a.mesh, &a.vsdf) {
        (Some(mesh), _) => {
            let domain: DomainSpec = ck
                .meta
                .domain
                .ok_or_else(|| anyhow!("checkpoint has no voxelization domain; voxelize the mesh first"))?;
            let m = load_mesh(mesh, a.fix_degenerate)?;
            let centered = dragsdf_core::geometry::center_in_domain(&m, &domain)?;
            match a.threads {
                Some(n) => generate_sdf_with_threads(&centered, &domain, n)?,
                None => dragsdf_core::voxelizer::generate_sdf(&centered, &domain)?,
            }
        }
        (None, Some(v)) => read_vsdf(v)?,
        (None, None) => bail!("one of --mesh, --vsdf or --manifest is required"),
    };
    let prep = secs(t1);
    if grid.dims != dims {
        bail!("grid dims {:?} do not match checkpoint input dims {:?}", grid.dims, dims);
    }
    let t2 = Instant::now();
    let cd = run_pool(a.threads, || model.predict(&grid))??;
    let pred = secs(t2);
    println!("cd = {cd:.6}");
    println!(
        "load {load:.3} s, preprocess {prep:.3} s, predict {pred:.3} s, total {:.3} s",
        secs(t0)
    );
    Ok(())
}

#[derive(Deserialize)]
struct PredictionRow {
    sample_id: String,
    cd_pred: f64,
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let t0 = Instant::now();
    let manifest = Manifest::load(&a.manifest)?;
    let predictions: HashMap<String, f64> = match (&a.checkpoint, &a.predictions) {
        (Some(ck), _) => {
            let model = load_checkpoint(ck)?.model;
            let loaded = load_grids(&manifest, model.config().input_dims, Some(Split::Test))?;
            let mut out = HashMap::new();
            for chunk in loaded.chunks(16) {
                let refs: Vec<&SdfGrid> = chunk.iter().map(|(_, g)| g).collect();
                for ((i, _), p) in chunk.iter().zip(model.predict_batch(&refs)?) {
                    out.insert(manifest.records[*i].sample_id.clone(), p);
                }
            }
            out
        }
        (None, Some(p)) => {
            let mut r = csv::Reader::from_path(p).with_context(|| format!("reading {}", p.display()))?;
            let mut out = HashMap::new();
            for row in r.deserialize() {
                let row: PredictionRow = row.with_context(|| format!("parsing {}", p.display()))?;
                out.insert(row.sample_id, row.cd_pred);
            }
            out
        }
        (None, None) => bail!("one of --checkpoint or --predictions is required"),
    };
    let unlabeled = manifest.split(Split::Test).filter(|r| r.cd.is_none()).count();
    if unlabeled > 0 {
        log::warn!("{unlabeled} test samples have no cd label and are skipped");
    }
    let missing: Vec<&str> = manifest
        .split(Split::Test)
        .filter(|r| r.cd.is_some() && !predictions.contains_key(&r.sample_id))
        .map(|r| r.sample_id.as_str())
        .collect();
    if !missing.is_empty() {
        bail!("no prediction for test samples: {}", missing.join(", "));
    }
    let pairs = eval_pairs(&manifest.records, &predictions);
    if pairs.is_empty() {
        bail!("test split is empty (no labeled test samples)");
    }
    let report = build_report(&pairs, &baseline_refs(&manifest), a.min_group_size)?;
    create_dir(&a.out)?;
    let files = ReportFiles::in_dir(&a.out);
    let text = render_report(&report, a.unit, &files)?;
    print!("{text}");
    println!("wrote report to {} in {:.2} s", a.out.display(), secs(t0));
    Ok(())
}
