//! NFE sweeps: every requested (method, nfe) cell becomes one CSV row,
//! either with metrics or with an explicit skip/failure status.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use flowstep_core::bespoke::BespokeTransform;
use flowstep_core::blob::Blob;
use flowstep_core::metrics::{frechet_distance, similarity_score, straightness, transport_cost};
use flowstep_core::models::{ConditionalModel, Head};
use flowstep_core::rng::{derive_seed, index, stream};
use flowstep_core::samplers::{
    bespoke_euler_sample, consistency_sample, ddim_sample, edm_euler_sample, fm_euler_sample, Counted,
    SampleRequest, Sampled,
};
use flowstep_core::schedules::karras_sigma_grid;
use flowstep_core::train::{load_data, DataSection};
use flowstep_core::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub const METHODS: [&str; 7] = ["flow", "reflow", "multiflow", "bespoke", "ddpm_ddim", "edm", "cd"];
pub const METRICS: [&str; 4] = ["frechet", "similarity", "transport_cost", "straightness"];
pub const CSV_HEADER: [&str; 10] = [
    "method",
    "nfe",
    "frechet",
    "similarity",
    "transport_cost",
    "straightness",
    "wall_clock_ms",
    "n_samples",
    "seed",
    "status",
];
/// Dense Euler steps used by the straightness metric.
pub const STRAIGHTNESS_STEPS: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub seed: u64,
    pub methods: Vec<String>,
    pub nfe_list: Vec<usize>,
    pub metrics: Vec<String>,
    pub n_eval_samples: usize,
    pub straightness_trajectories: usize,
    pub data: DataSection,
    /// Checkpoint per method. `bespoke` names the flow model the transforms
    /// were fitted for.
    pub checkpoints: BTreeMap<String, PathBuf>,
    pub bespoke_transforms: Vec<PathBuf>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            methods: METHODS.iter().map(|s| s.to_string()).collect(),
            nfe_list: vec![1, 2, 3, 4, 5, 6, 8, 10, 20, 30, 40, 50, 60, 80, 100],
            metrics: METRICS.iter().map(|s| s.to_string()).collect(),
            n_eval_samples: 10_000,
            straightness_trajectories: 1000,
            data: DataSection::default(),
            checkpoints: BTreeMap::new(),
            bespoke_transforms: Vec::new(),
        }
    }
}

impl SweepConfig {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        let cfg: SweepConfig = toml::from_str(text).map_err(|e| {
            let line = e.span().map(|s| text[..s.start].matches('\n').count() + 1);
            match line {
                Some(l) => anyhow::anyhow!("sweep config line {l}: {}", e.message()),
                None => anyhow::anyhow!("sweep config: {}", e.message()),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if let Some(m) = self.methods.iter().find(|m| !METHODS.contains(&m.as_str())) {
            bail!("unknown method {m:?}; valid methods: {}", METHODS.join(", "));
        }
        if let Some(m) = self.metrics.iter().find(|m| !METRICS.contains(&m.as_str())) {
            bail!("unknown metric {m:?}; valid metrics: {}", METRICS.join(", "));
        }
        if self.nfe_list.is_empty() || self.nfe_list[0] < 1 || self.nfe_list.windows(2).any(|w| w[1] <= w[0]) {
            bail!("nfe_list must be non-empty, positive and strictly ascending");
        }
        if self.n_eval_samples < 2 {
            bail!("n_eval_samples must be at least 2");
        }
        Ok(())
    }

    /// Resolve relative paths against `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        self.checkpoints.values_mut().for_each(fix);
        self.bespoke_transforms.iter_mut().for_each(fix);
        if let Some(p) = self.data.path.as_mut() {
            fix(p);
        }
    }

    fn wants(&self, metric: &str) -> bool {
        self.metrics.iter().any(|m| m == metric)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellRecord {
    pub method: String,
    pub nfe: usize,
    pub frechet: Option<f64>,
    pub similarity: Option<f64>,
    pub transport_cost: Option<f64>,
    pub straightness: Option<f64>,
    pub wall_clock_ms: Option<f64>,
    pub n_samples: usize,
    pub seed: u64,
    /// `ok`, `skipped: <reason>` or `failed: <reason>`.
    pub status: String,
}

impl CellRecord {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }

    fn empty(method: &str, nfe: usize, seed: u64, status: String) -> Self {
        Self {
            method: method.into(),
            nfe,
            frechet: None,
            similarity: None,
            transport_cost: None,
            straightness: None,
            wall_clock_ms: None,
            n_samples: 0,
            seed,
            status,
        }
    }

    fn fields(&self) -> Vec<String> {
        let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        vec![
            self.method.clone(),
            self.nfe.to_string(),
            f(self.frechet),
            f(self.similarity),
            f(self.transport_cost),
            f(self.straightness),
            f(self.wall_clock_ms),
            self.n_samples.to_string(),
            self.seed.to_string(),
            self.status.clone(),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<CellRecord>,
    /// Training manifests of the models used, keyed by method.
    pub provenance: BTreeMap<String, serde_json::Value>,
}

impl SweepResult {
    pub fn all_failed(&self) -> bool {
        !self.rows.iter().any(CellRecord::is_ok)
    }

    pub fn to_csv(&self) -> anyhow::Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(CSV_HEADER)?;
        for r in &self.rows {
            w.write_record(r.fields())?;
        }
        Ok(w.into_inner().context("flushing CSV")?)
    }
}

enum Loaded {
    Model(ConditionalModel),
    Bespoke(ConditionalModel, BTreeMap<usize, BespokeTransform>),
    Missing(String),
}

fn load_model(path: &Path) -> anyhow::Result<ConditionalModel> {
    let blob = Blob::read(path)?;
    Ok(ConditionalModel::from_blob(blob)?)
}

fn expected_head(method: &str) -> Head {
    match method {
        "ddpm_ddim" => Head::NoisePred,
        "edm" | "cd" => Head::EdmDenoiser,
        _ => Head::VectorField,
    }
}

fn load_method(cfg: &SweepConfig, method: &str) -> Loaded {
    let Some(path) = cfg.checkpoints.get(method) else {
        return Loaded::Missing(format!("no checkpoint configured for {method}"));
    };
    let model = match load_model(path) {
        Ok(m) => m,
        Err(e) => return Loaded::Missing(format!("missing checkpoint {}: {e:#}", path.display())),
    };
    if let Err(e) = model.expect_head(expected_head(method)) {
        return Loaded::Missing(format!("{}: {e}", path.display()));
    }
    if method == "cd" && !model.is_consistency() {
        return Loaded::Missing(format!("{} is not a consistency model", path.display()));
    }
    if method != "bespoke" {
        return Loaded::Model(model);
    }
    let mut transforms = BTreeMap::new();
    for p in &cfg.bespoke_transforms {
        match Blob::read(p).map_err(anyhow::Error::from).and_then(|b| Ok(BespokeTransform::from_blob(b)?)) {
            Ok(t) => {
                transforms.insert(t.n, t);
            }
            Err(e) => log::warn!("skipping bespoke transform {}: {e:#}", p.display()),
        }
    }
    Loaded::Bespoke(model, transforms)
}

fn manifest_for(path: &Path) -> Option<serde_json::Value> {
    let mut p = path.as_os_str().to_owned();
    p.push(".manifest.json");
    let text = std::fs::read_to_string(PathBuf::from(p)).ok()?;
    serde_json::from_str(&text).ok()
}

/// Run one cell and audit that the sampler made exactly `nfe` model calls.
fn sample_cell<'a>(method: &str, loaded: &'a Loaded, req: &SampleRequest) -> anyhow::Result<(Sampled, Option<&'a ConditionalModel>)> {
    let nfe = req.nfe;
    let (out, calls, flow) = match loaded {
        Loaded::Missing(reason) => bail!("{reason}"),
        Loaded::Bespoke(model, transforms) => {
            let t = transforms
                .get(&nfe)
                .with_context(|| format!("no bespoke transform fitted for nfe {nfe}"))?;
            let c = Counted::new(model);
            let out = bespoke_euler_sample(&c, t, req)?;
            (out, c.calls(), Some(model))
        }
        Loaded::Model(model) => match method {
            "ddpm_ddim" => {
                let c = Counted::new(model);
                let out = ddim_sample(&c, &model.ddpm_schedule()?, req)?;
                (out, c.calls(), None)
            }
            "edm" => {
                let (edm, _) = model.edm_params().context("edm parameters")?;
                let grid = karras_sigma_grid(nfe, edm.sigma_min, edm.sigma_max, edm.rho)?;
                let c = Counted::new(model);
                let out = edm_euler_sample(&c, req, &grid.with_terminal_zero())?;
                (out, c.calls(), None)
            }
            "cd" => {
                let (edm, _) = model.edm_params().context("edm parameters")?;
                // nfe + 1 levels down to sigma_min; the last one is never used
                // because denoising at sigma_min is the identity.
                let grid = karras_sigma_grid(nfe + 1, edm.sigma_min, edm.sigma_max, edm.rho)?;
                let c = Counted::new(model);
                let out = consistency_sample(&c, req, &grid)?;
                (out, c.calls(), None)
            }
            _ => {
                let c = Counted::new(model);
                let out = fm_euler_sample(&c, req)?;
                (out, c.calls(), Some(model))
            }
        },
    };
    if calls != nfe {
        bail!("NFE audit failed: {calls} model calls for nfe {nfe}");
    }
    Ok((out, flow))
}

fn run_cell(cfg: &SweepConfig, test_y: &Tensor, test_cond: &Tensor, method: &str, nfe: usize, loaded: &Loaded, timing: bool) -> CellRecord {
    let seed = derive_seed(cfg.seed, &[method, &nfe.to_string()]);
    if let Loaded::Bespoke(_, transforms) = loaded {
        if !transforms.contains_key(&nfe) {
            return CellRecord::empty(method, nfe, seed, format!("skipped: no bespoke transform fitted for nfe {nfe}"));
        }
    }
    if let Loaded::Missing(reason) = loaded {
        return CellRecord::empty(method, nfe, seed, format!("skipped: {reason}"));
    }
    let started = Instant::now();
    let mut rng = stream(seed, &["conditions"]);
    let idx: Vec<usize> = (0..cfg.n_eval_samples).map(|_| index(&mut rng, test_y.rows())).collect();
    let req = SampleRequest {
        nfe,
        cond: test_cond.gather_rows(&idx),
        seed: derive_seed(seed, &["sample"]),
    };
    let result = (|| -> anyhow::Result<CellRecord> {
        let (out, flow_model) = sample_cell(method, loaded, &req)?;
        let mut rec = CellRecord::empty(method, nfe, seed, "ok".into());
        rec.n_samples = cfg.n_eval_samples;
        if cfg.wants("frechet") {
            rec.frechet = Some(frechet_distance(&out.samples, test_y)?);
        }
        if cfg.wants("similarity") {
            rec.similarity = Some(similarity_score(&out.samples, &test_y.gather_rows(&idx))?.mean);
        }
        if cfg.wants("transport_cost") {
            rec.transport_cost = Some(transport_cost(&out.start, &out.samples)?);
        }
        if let (true, Some(model)) = (cfg.wants("straightness"), flow_model) {
            let n = cfg.straightness_trajectories.max(1);
            let mut srng = stream(seed, &["straightness"]);
            rec.straightness = Some(straightness(model, test_cond, n, STRAIGHTNESS_STEPS, &mut srng)?);
        }
        Ok(rec)
    })();
    match result {
        Ok(mut rec) => {
            if timing {
                rec.wall_clock_ms = Some(started.elapsed().as_secs_f64() * 1e3);
            }
            rec
        }
        Err(e) => CellRecord::empty(method, nfe, seed, format!("failed: {e:#}")),
    }
}

/// Evaluate every (method, nfe) cell. Rows come back in config order
/// regardless of `jobs`.
pub fn run_sweep(cfg: &SweepConfig, jobs: usize, timing: bool) -> anyhow::Result<SweepResult> {
    cfg.validate()?;
    let splits = load_data(&cfg.data).context("loading evaluation data")?;
    let test = splits.test;
    let loaded: Vec<(String, Loaded)> = cfg.methods.iter().map(|m| (m.clone(), load_method(cfg, m))).collect();
    let mut provenance = BTreeMap::new();
    for (m, l) in &loaded {
        if !matches!(l, Loaded::Missing(_)) {
            if let Some(v) = cfg.checkpoints.get(m).and_then(|p| manifest_for(p)) {
                provenance.insert(m.clone(), v);
            }
        }
    }
    let cells: Vec<(&str, &Loaded, usize)> = loaded
        .iter()
        .flat_map(|(m, l)| cfg.nfe_list.iter().map(move |&n| (m.as_str(), l, n)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .context("building worker pool")?;
    let rows: Vec<CellRecord> = pool.install(|| {
        cells
            .par_iter()
            .map(|&(m, l, n)| run_cell(cfg, &test.y, &test.cond, m, n, l, timing))
            .collect()
    });
    Ok(SweepResult { rows, provenance })
}

/// Parsed CSV rows with every cell kept verbatim.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }
}

pub fn read_csv(bytes: &[u8]) -> anyhow::Result<CsvTable> {
    let mut r = csv::ReaderBuilder::new().flexible(true).from_reader(bytes);
    let header: Vec<String> = r.headers().context("reading CSV header")?.iter().map(String::from).collect();
    for required in ["method", "nfe"] {
        if !header.iter().any(|h| h == required) {
            bail!("CSV header lacks a {required:?} column");
        }
    }
    let nfe_col = header.iter().position(|h| h == "nfe").expect("checked above");
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let row_no = i + 1;
        let rec = rec.with_context(|| format!("CSV row {row_no} is unreadable"))?;
        if rec.len() != header.len() {
            bail!("CSV row {row_no} has {} fields, header has {}", rec.len(), header.len());
        }
        let nfe = &rec[nfe_col];
        if nfe.parse::<usize>().is_err() {
            bail!("CSV row {row_no}: nfe {nfe:?} is not a positive integer");
        }
        rows.push(rec.iter().map(String::from).collect());
    }
    Ok(CsvTable { header, rows })
}
