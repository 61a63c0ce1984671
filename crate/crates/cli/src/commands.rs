use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use lazymaps::greedy::{layers_of_lazy_maps_from, Diagnostics, GreedyStatus, IterationRecord};
use lazymaps::lazy::Pullback;
use lazymaps::mcmc::{debias, sample as run_chain, summarize};
use lazymaps::seed::derive_seed;
use lazymaps::targets::{
    simulate_beam_data, simulate_log_cox_data, BeamGeometry, LogCoxParams, DEFAULT_N_ELEMENTS, PAPER_E_TRUE_GPA,
};
use lazymaps::{log_reference, ComposedMap, TargetDensity};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::config::{self, RunConfig, SCHEMA_VERSION};
use crate::UsageError;

#[derive(Serialize, Deserialize)]
pub struct TraceLine {
    pub schema_version: u32,
    #[serde(flatten)]
    pub record: IterationRecord,
}

#[derive(Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub threads: usize,
    pub target_dim: usize,
    pub status: Option<GreedyStatus>,
    pub error: Option<String>,
    pub layers: usize,
    pub wall_times_s: Vec<f64>,
    pub outputs: Vec<String>,
    pub config: RunConfig,
}

#[derive(Serialize)]
struct DiagnosticsFile<'a> {
    schema_version: u32,
    /// Entry `ℓ` describes the map with `ℓ` layers.
    diagnostics: &'a [Diagnostics],
}

fn load_config(path: Option<PathBuf>, builtin: Option<String>) -> anyhow::Result<RunConfig> {
    match (path, builtin) {
        (Some(p), _) => config::load(&p),
        (None, Some(name)) => config::load_builtin(&name),
        (None, None) => bail!(UsageError("either --config or --builtin is required".into())),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))
}

pub fn run(
    config_path: Option<PathBuf>,
    builtin: Option<String>,
    out: Option<PathBuf>,
    seed: Option<u64>,
    _threads: Option<usize>,
) -> anyhow::Result<()> {
    let mut cfg = load_config(config_path, builtin)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.output_dir = o;
    }
    let target = cfg.validate()?;
    let dir = cfg.output_dir.clone();
    create_dir(&dir)?;

    let trace_path = dir.join("trace.jsonl");
    let mut trace_file = File::create(&trace_path).with_context(|| format!("creating {}", trace_path.display()))?;
    let mut write_err: Option<std::io::Error> = None;
    let greedy = cfg.greedy_config();
    let outcome = layers_of_lazy_maps_from(&target, &greedy, ComposedMap::identity(target.dim()), |record| {
        let line = TraceLine { schema_version: SCHEMA_VERSION, record: record.clone() };
        let text = serde_json::to_string(&line).expect("trace records serialize");
        if let Err(e) = writeln!(trace_file, "{text}").and_then(|_| trace_file.flush()) {
            write_err.get_or_insert(e);
        }
    });

    let mut manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        command: "run".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        seed: cfg.seed,
        threads: rayon::current_num_threads(),
        target_dim: target.dim(),
        status: None,
        error: None,
        layers: 0,
        wall_times_s: Vec::new(),
        outputs: vec!["trace.jsonl".into()],
        config: cfg.clone(),
    };
    let result = match outcome {
        Ok(r) => r,
        Err(e) => {
            manifest.status = Some(GreedyStatus::Failed);
            manifest.error = Some(e.to_string());
            write_json(&dir.join("manifest.json"), &manifest)?;
            return Err(anyhow!(e).context("greedy construction failed"));
        }
    };
    if let Some(e) = write_err {
        return Err(anyhow!(e).context(format!("writing {}", trace_path.display())));
    }
    fs::write(dir.join("map.json"), result.map.to_json()?).context("writing map.json")?;
    write_json(
        &dir.join("diagnostics.json"),
        &DiagnosticsFile { schema_version: SCHEMA_VERSION, diagnostics: &result.diagnostics },
    )?;
    manifest.status = Some(result.status);
    manifest.error = result.error.as_ref().map(|e| e.to_string());
    manifest.layers = result.map.len();
    manifest.wall_times_s = result.wall_times_s.clone();
    manifest.outputs.extend(["map.json".into(), "diagnostics.json".into(), "manifest.json".into()]);
    write_json(&dir.join("manifest.json"), &manifest)?;
    log::info!(
        "{} layers ({:?}), final ½tr H̃ {:.4e}, variance diagnostic {:.4e}; outputs in {}",
        result.map.len(),
        result.status,
        result.last().trace_bound,
        result.last().variance_diagnostic,
        dir.display()
    );
    if let Some(e) = result.error {
        return Err(anyhow!(e).context("greedy construction stopped early"));
    }
    Ok(())
}

fn load_map(path: &Path) -> anyhow::Result<ComposedMap> {
    let text = fs::read_to_string(path).map_err(|e| UsageError(format!("cannot read map file {}: {e}", path.display())))?;
    ComposedMap::from_json(&text).map_err(|e| UsageError(format!("{}: {e}", path.display())).into())
}

pub fn sample(
    config_path: Option<PathBuf>,
    builtin: Option<String>,
    map_path: PathBuf,
    out: Option<PathBuf>,
    seed: Option<u64>,
) -> anyhow::Result<()> {
    let mut cfg = load_config(config_path, builtin)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let target = cfg.validate()?;
    let mcmc = cfg
        .mcmc
        .clone()
        .ok_or_else(|| UsageError("config has no `mcmc` section".into()))?;
    let map = load_map(&map_path)?;
    if map.dim() != target.dim() {
        bail!(UsageError(format!(
            "map {} has dimension {} but the target has dimension {}",
            map_path.display(),
            map.dim(),
            target.dim()
        )));
    }
    let dir = out.unwrap_or_else(|| cfg.output_dir.clone());
    create_dir(&dir)?;
    let chain_seed = mcmc.seed.unwrap_or_else(|| derive_seed(cfg.seed, "mcmc", 0));
    let pullback = Pullback::new(&map, &target);
    let chain = run_chain(&pullback, &mcmc, chain_seed)?;
    let pushed = debias(&chain, &map)?;
    fs::write(dir.join("chain.csv"), chain.to_csv("z")).context("writing chain.csv")?;
    fs::write(dir.join("pushed_chain.csv"), pushed.to_csv("x")).context("writing pushed_chain.csv")?;
    let summary = summarize(&chain, mcmc.sampler)?;
    write_json(&dir.join("mcmc_summary.json"), &summary)?;
    log::info!(
        "acceptance {:.3}, ESS worst/best/mean {:.1}% / {:.1}% / {:.1}%",
        summary.acceptance_rate,
        summary.worst_ess_percent,
        summary.best_ess_percent,
        summary.mean_ess_percent
    );
    Ok(())
}

fn read_params<T: for<'de> Deserialize<'de> + Default>(path: Option<PathBuf>) -> anyhow::Result<T> {
    let Some(p) = path else { return Ok(T::default()) };
    let text = fs::read_to_string(&p).map_err(|e| UsageError(format!("cannot read params file {}: {e}", p.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| UsageError(format!("{}:{}:{}: {e}", p.display(), e.line(), e.column())).into())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct BeamSimParams {
    e_true_gpa: Vec<f64>,
    n_elements: usize,
    geometry: BeamGeometry,
}

impl Default for BeamSimParams {
    fn default() -> Self {
        BeamSimParams {
            e_true_gpa: PAPER_E_TRUE_GPA.to_vec(),
            n_elements: DEFAULT_N_ELEMENTS,
            geometry: BeamGeometry::default(),
        }
    }
}

pub fn simulate_beam(params: Option<PathBuf>, seed: u64, out: &Path) -> anyhow::Result<()> {
    let p: BeamSimParams = read_params(params)?;
    let data = simulate_beam_data(&p.e_true_gpa, Some(seed), p.n_elements, &p.geometry)
        .map_err(|e| UsageError(format!("beam parameters: {e}")))?;
    write_json(out, &data)?;
    log::info!("{} observations written to {}", data.observations_m.len(), out.display());
    Ok(())
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct LogCoxSimParams {
    grid_n: Option<usize>,
    n_obs: Option<usize>,
    beta: Option<f64>,
    sigma2: Option<f64>,
    mu: Option<f64>,
}

pub fn simulate_log_cox(params: Option<PathBuf>, seed: u64, out: &Path) -> anyhow::Result<()> {
    let p: LogCoxSimParams = read_params(params)?;
    let mut lp = LogCoxParams::reference_values(p.grid_n.unwrap_or(16));
    if let Some(sigma2) = p.sigma2 {
        lp.sigma2 = sigma2;
        lp.mu = 126f64.ln() - sigma2 / 2.0;
    }
    if let Some(beta) = p.beta {
        lp.beta = beta;
    }
    if let Some(mu) = p.mu {
        lp.mu = mu;
    }
    let data = simulate_log_cox_data(lp, p.n_obs.unwrap_or(30), seed)
        .map_err(|e| UsageError(format!("log-cox parameters: {e}")))?;
    write_json(out, &data)?;
    log::info!("{} observed cells written to {}", data.obs_cells.len(), out.display());
    Ok(())
}

fn read_trace(path: &Path) -> anyhow::Result<Vec<IterationRecord>> {
    let file = File::open(path).map_err(|e| UsageError(format!("cannot open trace {}: {e}", path.display())))?;
    let mut records = Vec::new();
    for (k, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: TraceLine = serde_json::from_str(&line)
            .map_err(|e| UsageError(format!("{}:{}: {e}", path.display(), k + 1)))?;
        records.push(parsed.record);
    }
    Ok(records)
}

pub fn plotdata(run_dir: &Path, out: Option<PathBuf>, grid: usize, half_width: f64, axes: (usize, usize)) -> anyhow::Result<()> {
    let records = read_trace(&run_dir.join("trace.jsonl"))?;
    let map = load_map(&run_dir.join("map.json"))?;
    let manifest_path = run_dir.join("manifest.json");
    let manifest: Manifest = serde_json::from_str(
        &fs::read_to_string(&manifest_path)
            .map_err(|e| UsageError(format!("cannot read {}: {e}", manifest_path.display())))?,
    )
    .with_context(|| format!("parsing {}", manifest_path.display()))?;
    let d = map.dim();
    let (a, b) = axes;
    if a == b || a == 0 || b == 0 || a > d || b > d {
        bail!(UsageError(format!("--axes must be two distinct coordinates in 1..={d}, got {a} {b}")));
    }
    if grid < 2 || !(half_width > 0.0) {
        bail!(UsageError("--grid must be at least 2 and --half-width positive".into()));
    }
    let target = config::build_target(&manifest.config.target)?;
    let dir = out.unwrap_or_else(|| run_dir.to_path_buf());
    create_dir(&dir)?;

    let mut conv = String::from("layer,trace_bound_before,trace_bound,variance_diagnostic,variance_std_error\n");
    for r in &records {
        conv += &format!(
            "{},{:e},{:e},{:e},{:e}\n",
            r.iteration, r.trace_bound_before, r.trace_bound, r.variance_diagnostic, r.variance_std_error
        );
    }
    fs::write(dir.join("convergence.csv"), conv).context("writing convergence.csv")?;

    let mut spectra = String::from("layer");
    for j in 1..=d {
        spectra += &format!(",eigenvalue_{j}");
    }
    spectra.push('\n');
    for r in &records {
        spectra += &r.iteration.to_string();
        for v in &r.eigenvalues {
            spectra += &format!(",{v:e}");
        }
        spectra.push('\n');
    }
    fs::write(dir.join("spectra.csv"), spectra).context("writing spectra.csv")?;

    let mut slices = format!("layers,z{a},z{b},log_pullback,log_reference\n");
    let step = 2.0 * half_width / (grid - 1) as f64;
    for l in 0..=map.len() {
        let prefix = map.prefix(l);
        for i in 0..grid {
            for j in 0..grid {
                let mut z = DVector::zeros(d);
                z[a - 1] = -half_width + i as f64 * step;
                z[b - 1] = -half_width + j as f64 * step;
                let lp = prefix.pullback_log_density(&target, &z).unwrap_or(f64::NAN);
                slices += &format!("{l},{:e},{:e},{lp:e},{:e}\n", z[a - 1], z[b - 1], log_reference(&z));
            }
        }
    }
    fs::write(dir.join("slices.csv"), slices).context("writing slices.csv")?;
    log::info!("convergence.csv, spectra.csv and slices.csv written to {}", dir.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trace_line_round_trips() {
        let text = r#"{"schema_version":1,"iteration":1,"rank":1,"degree":3,"quadrature_nodes":121,
            "eigenvalues":[2.0,1.0],"trace_bound_before":1.5,"trace_bound":0.5,"variance_diagnostic":0.1,
            "variance_std_error":0.01,"optimizer":{"status":"converged","iterations":3,"evaluations":4,
            "objective":1.0,"grad_norm":1e-5}}"#;
        let line: TraceLine = serde_json::from_str(text).unwrap();
        assert_eq!(line.record.eigenvalues, vec![2.0, 1.0]);
        let again: TraceLine = serde_json::from_str(&serde_json::to_string(&line).unwrap()).unwrap();
        assert_eq!(again.record, line.record);
    }
}
