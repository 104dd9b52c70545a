//! One function per subcommand. Each writes its outputs and returns a
//! short human-readable summary.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use flowstep_core::bespoke::BespokeTransform;
use flowstep_core::blob::Blob;
use flowstep_core::models::{ConditionalModel, Head};
use flowstep_core::samplers::{
    bespoke_euler_sample, consistency_sample, ddim_sample, edm_euler_sample, fm_euler_sample, SampleRequest,
};
use flowstep_core::schedules::karras_sigma_grid;
use flowstep_core::toydata::{generate, Dataset, DatasetKind, DatasetSpec};
use flowstep_core::train::{
    content_hash, distill_cd, fit_bespoke_run, load_data, reflow_retrain, train, Method, RunConfig, RunManifest,
    TrainOutcome,
};
use flowstep_core::Tensor;
use serde::Serialize;

use crate::args::{Global, ReportFormat};
use crate::report::{markdown_table, svg_plot};
use crate::sweep::{read_csv, run_sweep, SweepConfig};
use crate::CliError;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn require_out(g: &Global) -> Result<&Path, CliError> {
    g.out.as_deref().ok_or_else(|| usage("--out is required"))
}

/// `path` with `suffix` appended to the file name.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn check_writable(path: &Path, force: bool) -> anyhow::Result<()> {
    if path.exists() && !force {
        bail!("{} exists; pass --force to overwrite", path.display());
    }
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8], force: bool) -> anyhow::Result<()> {
    check_writable(path, force)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn write_blob(path: &Path, blob: &Blob, force: bool) -> anyhow::Result<()> {
    write_file(path, &blob.to_bytes()?, force)
}

pub fn load_run_config(g: &Global) -> anyhow::Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            let mut cfg = RunConfig::from_toml(&text).with_context(|| format!("in {}", p.display()))?;
            if let (Some(data), Some(dir)) = (cfg.data.path.as_mut(), p.parent()) {
                if data.is_relative() {
                    *data = dir.join(&*data);
                }
            }
            cfg
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_model(path: &Path) -> anyhow::Result<ConditionalModel> {
    let blob = Blob::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    Ok(ConditionalModel::from_blob(blob)?)
}

fn input_hash(cfg: &RunConfig, data_hash: &str, extra: &[&Path]) -> anyhow::Result<String> {
    let cfg_json = serde_json::to_vec(cfg)?;
    let mut parts: Vec<Vec<u8>> = vec![cfg_json, data_hash.as_bytes().to_vec()];
    for p in extra {
        parts.push(std::fs::read(p).with_context(|| format!("reading {}", p.display()))?);
    }
    let refs: Vec<&[u8]> = parts.iter().map(Vec::as_slice).collect();
    Ok(content_hash(&refs))
}

fn save_outcome(out: &Path, mut outcome: TrainOutcome, g: &Global, started: Instant) -> anyhow::Result<RunManifest> {
    if g.timing {
        outcome.manifest.wall_clock_ms = Some(started.elapsed().as_secs_f64() * 1e3);
    }
    let manifest_path = sibling(out, ".manifest.json");
    check_writable(&manifest_path, g.force)?;
    if !outcome.manifest.failed() {
        for (it, m) in &outcome.milestones {
            let p = sibling(out, &format!(".iter{it}"));
            write_blob(&p, &m.to_blob()?, g.force)?;
            outcome.manifest.milestone_checkpoints.push(p.display().to_string());
        }
        write_blob(out, &outcome.model.to_blob()?, g.force)?;
        outcome.manifest.checkpoint = Some(out.display().to_string());
    }
    write_file(&manifest_path, outcome.manifest.to_json()?.as_bytes(), true)?;
    if let flowstep_core::train::RunStatus::Failed { iteration, reason } = &outcome.manifest.status {
        bail!("training failed at iteration {iteration}: {reason}");
    }
    Ok(outcome.manifest)
}

fn summary(m: &RunManifest) -> String {
    let last = m.loss_curve.iter().rev().find(|l| l.is_finite()).copied().unwrap_or(f64::NAN);
    format!(
        "{} {}: {} iterations, last loss {last:.5}, status {:?}",
        m.stage,
        m.method,
        m.loss_curve.len(),
        m.status
    )
}

pub fn gen_data(g: &Global, kind: &str, n: usize) -> Result<String, CliError> {
    let out = require_out(g)?;
    let kind = DatasetKind::from_name(kind).map_err(|e| usage(e.to_string()))?;
    let spec = DatasetSpec {
        kind,
        n,
        seed: g.seed.unwrap_or(0),
    };
    let data = generate(&spec)?;
    write_blob(out, &data.to_blob()?, g.force)?;
    Ok(format!("wrote {} {} samples to {}", n, kind.name(), out.display()))
}

pub fn cmd_train(g: &Global, method: Option<&str>) -> Result<String, CliError> {
    let out = require_out(g)?;
    check_writable(out, g.force)?;
    let mut cfg = load_run_config(g)?;
    if let Some(m) = method {
        cfg.method =
            parse_method(m).ok_or_else(|| usage(format!("unknown method {m:?}; valid methods: ddpm, edm, fm, multiflow")))?;
    }
    let started = Instant::now();
    let data = load_data(&cfg.data)?;
    let hash = input_hash(&cfg, &data.hash, &[])?;
    let outcome = train(&cfg, &data.train, &hash)?;
    Ok(summary(&save_outcome(out, outcome, g, started)?))
}

pub fn cmd_distill(g: &Global, teacher: &Path) -> Result<String, CliError> {
    let out = require_out(g)?;
    check_writable(out, g.force)?;
    let cfg = load_run_config(g)?;
    let started = Instant::now();
    let teacher_model = load_model(teacher)?;
    let data = load_data(&cfg.data)?;
    let hash = input_hash(&cfg, &data.hash, &[teacher])?;
    let outcome = distill_cd(&teacher_model, &cfg, &data.train, &hash)?;
    Ok(summary(&save_outcome(out, outcome, g, started)?))
}

pub fn cmd_reflow(g: &Global, base: &Path) -> Result<String, CliError> {
    let out = require_out(g)?;
    check_writable(out, g.force)?;
    let pairs_path = sibling(out, ".pairs");
    check_writable(&pairs_path, g.force)?;
    let cfg = load_run_config(g)?;
    let started = Instant::now();
    let base_model = load_model(base)?;
    let data = load_data(&cfg.data)?;
    let hash = input_hash(&cfg, &data.hash, &[base])?;
    let result = reflow_retrain(&base_model, &cfg, &data.train, &hash)?;
    write_blob(&pairs_path, &result.pairs.to_blob()?, g.force)?;
    if let Some(w) = &result.pairs.warning {
        log::warn!("{w}");
    }
    Ok(summary(&save_outcome(out, result.outcome, g, started)?))
}

pub fn cmd_fit_bespoke(g: &Global, base: &Path, n: Option<usize>) -> Result<String, CliError> {
    let out = require_out(g)?;
    check_writable(out, g.force)?;
    let mut cfg = load_run_config(g)?;
    if let Some(n) = n {
        cfg.bespoke.n = n;
    }
    let started = Instant::now();
    let base_model = load_model(base)?;
    let data = load_data(&cfg.data)?;
    let hash = input_hash(&cfg, &data.hash, &[base])?;
    let mut result = fit_bespoke_run(&base_model, &cfg, &data.train, &hash)?;
    if g.timing {
        result.manifest.wall_clock_ms = Some(started.elapsed().as_secs_f64() * 1e3);
    }
    write_blob(out, &result.fit.transform.to_blob()?, g.force)?;
    result.manifest.checkpoint = Some(out.display().to_string());
    write_file(&sibling(out, ".manifest.json"), result.manifest.to_json()?.as_bytes(), true)?;
    let f = &result.fit;
    Ok(format!(
        "bespoke n={}: train loss {:.5} (identity {:.5}), validation loss {:.5} (identity {:.5})",
        cfg.bespoke.n, f.train_loss, f.identity_train_loss, f.val_loss, f.identity_val_loss
    ))
}

#[derive(Serialize)]
struct SampleHeader<'a> {
    model: &'a str,
    nfe: usize,
    seed: u64,
}

/// Sample with the sampler matching the checkpoint's head.
pub fn sample_model(
    model: &ConditionalModel,
    transform: Option<&BespokeTransform>,
    req: &SampleRequest,
) -> anyhow::Result<flowstep_core::samplers::Sampled> {
    Ok(match (model.head(), transform) {
        (Head::VectorField, Some(t)) => bespoke_euler_sample(model, t, req)?,
        (_, Some(_)) => bail!("bespoke transforms apply to flow models only"),
        (Head::VectorField, None) => fm_euler_sample(model, req)?,
        (Head::NoisePred, None) => ddim_sample(model, &model.ddpm_schedule()?, req)?,
        (Head::EdmDenoiser, None) => {
            let (edm, _) = model.edm_params().context("edm parameters")?;
            if model.is_consistency() {
                consistency_sample(model, req, &karras_sigma_grid(req.nfe + 1, edm.sigma_min, edm.sigma_max, edm.rho)?)?
            } else {
                let grid = karras_sigma_grid(req.nfe, edm.sigma_min, edm.sigma_max, edm.rho)?;
                edm_euler_sample(model, req, &grid.with_terminal_zero())?
            }
        }
    })
}

pub fn cmd_sample(
    g: &Global,
    model_path: &Path,
    nfe: usize,
    n: usize,
    transform: Option<&Path>,
    data: Option<&Path>,
) -> Result<String, CliError> {
    let out = require_out(g)?;
    check_writable(out, g.force)?;
    let model = load_model(model_path)?;
    let transform = transform
        .map(|p| -> anyhow::Result<_> { Ok(BespokeTransform::from_blob(Blob::read(p)?)?) })
        .transpose()?;
    let cond = match data {
        Some(p) => {
            let d = Dataset::from_blob(Blob::read(p)?)?;
            let idx: Vec<usize> = (0..n).map(|i| i % d.len()).collect();
            d.cond.gather_rows(&idx)
        }
        None => Tensor::zeros(&[n, model.config.cond_dim]),
    };
    if cond.cols() != model.config.cond_dim {
        return Err(usage(format!(
            "model expects {} condition columns, dataset has {}",
            model.config.cond_dim,
            cond.cols()
        )));
    }
    let seed = g.seed.unwrap_or(0);
    let req = SampleRequest { nfe, cond, seed };
    let out_s = sample_model(&model, transform.as_ref(), &req)?;
    let mut blob = Blob::new("samples").with_method(model.method.clone()).with_hyperparameters(&SampleHeader {
        model: &model.method,
        nfe,
        seed,
    })?;
    blob.insert("start", out_s.start);
    blob.insert("samples", out_s.samples);
    blob.insert("cond", req.cond);
    write_blob(out, &blob, g.force)?;
    Ok(format!("wrote {n} samples ({} at nfe {nfe}) to {}", model.method, out.display()))
}

pub fn load_sweep_config(g: &Global) -> anyhow::Result<SweepConfig> {
    let path = g.config.as_deref().context("sweep needs --config")?;
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut cfg = SweepConfig::from_toml(&text)?;
    cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

pub fn cmd_sweep(g: &Global) -> Result<String, CliError> {
    let out = require_out(g)?;
    if g.config.is_none() {
        return Err(usage("sweep needs --config"));
    }
    check_writable(out, g.force)?;
    let cfg = load_sweep_config(g)?;
    let result = run_sweep(&cfg, g.jobs, g.timing)?;
    write_file(out, &result.to_csv()?, g.force)?;
    write_file(
        &sibling(out, ".provenance.json"),
        serde_json::to_string_pretty(&result.provenance).map_err(anyhow::Error::from)?.as_bytes(),
        true,
    )?;
    let ok = result.rows.iter().filter(|r| r.is_ok()).count();
    let msg = format!("{} cells ({ok} ok) written to {}", result.rows.len(), out.display());
    if result.all_failed() {
        return Err(CliError::Runtime(anyhow::anyhow!("every sweep cell failed or was skipped; {msg}")));
    }
    Ok(msg)
}

pub fn cmd_report(g: &Global, csv: &Path, format: ReportFormat, metric: &str, log_scale: bool) -> Result<String, CliError> {
    let out = require_out(g)?;
    let bytes = std::fs::read(csv).with_context(|| format!("reading {}", csv.display()))?;
    let table = read_csv(&bytes).with_context(|| format!("in {}", csv.display()))?;
    let mut written = Vec::new();
    if matches!(format, ReportFormat::Markdown | ReportFormat::Both) {
        let p = sibling(out, ".md");
        write_file(&p, markdown_table(&table, metric)?.as_bytes(), g.force)?;
        written.push(p);
    }
    if matches!(format, ReportFormat::Svg | ReportFormat::Both) {
        let p = sibling(out, ".svg");
        write_file(&p, svg_plot(&table, metric, log_scale)?.as_bytes(), g.force)?;
        written.push(p);
    }
    Ok(format!(
        "wrote {}",
        written.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", ")
    ))
}

/// Parse `--method` values the same way config files do.
pub fn parse_method(s: &str) -> Option<Method> {
    serde_json::from_value(serde_json::Value::String(s.into())).ok()
}
