//! One function per subcommand. Each returns the process exit code on
//! success paths that still need a non-zero status.

use std::path::Path;

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scalelab::archcalc::{bundled_table, read_table_file, table_check};
use scalelab::fitter::{fit_two_stage, scaled_design, synth_runs, write_residuals_csv, FitConfig};
use scalelab::frontier::{
    crossover_table, extrapolate_curves, fit_crit_powerlaw, fmt9, heatmap_grid, repetition_tradeoff, write_crossover_csv,
    write_curves_csv, DEFAULT_C_HI, DEFAULT_C_LO,
};
use scalelab::runstore::{ingest_runs, pareto_frontier_from, to_jsonl_string, Format, FrontierSource};
use scalelab::toytrain::{corrupt, grad_check, sweep, write_metrics_csv, AttnMode, Batch, MarkovChain, SweepConfig, ToyModel, ToyModelConfig};
use scalelab::{Error, Family, Result, RunRecord};
use serde::{Deserialize, Serialize};

use crate::io::{announce, load_config, read_law, OutDir};
use crate::{Common, LawPair, OutFormat};

fn families_in(runs: &[RunRecord], only: Option<Family>) -> Result<Vec<Family>> {
    match only {
        Some(f) if runs.iter().any(|r| r.family == f) => Ok(vec![f]),
        Some(f) => Err(Error::Data(format!("no {f} runs in input"))),
        None => {
            let fams: Vec<Family> = [Family::Ar, Family::Diffusion].into_iter().filter(|f| runs.iter().any(|r| r.family == *f)).collect();
            if fams.is_empty() {
                Err(Error::Data("input holds no runs".into()))
            } else {
                Ok(fams)
            }
        }
    }
}

#[derive(Serialize)]
struct FitOutput<'a> {
    family: Family,
    #[serde(flatten)]
    fit: &'a scalelab::TwoStageFit<f64>,
}

pub fn fit(runs_path: &Path, family: Option<Family>, common: &Common) -> Result<u8> {
    let mut cfg: FitConfig<f64> = load_config(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    announce("fit", cfg.seed, &cfg)?;
    let runs = ingest_runs(runs_path, Format::from_path(runs_path))?;
    let out = OutDir::create(&common.out, cfg.seed)?;
    let mut code = 0;
    for fam in families_in(&runs, family)? {
        let subset: Vec<RunRecord> = runs.iter().filter(|r| r.family == fam).cloned().collect();
        let fit = fit_two_stage(&subset, &cfg).map_err(|e| match e {
            Error::Fit(msg) => Error::Fit(format!("{fam}: {msg}")),
            other => other,
        })?;
        let rep = &fit.report;
        info!("{fam}: {:?}; stage-1 R^2 {:.4}, stage-2 R^2 {:.4}", fit.law, rep.stage1.r_squared, rep.stage2.r_squared);
        if rep.stage2.weak_identification {
            warn!("{fam}: R_D*/R_N* weakly identified (few epochs or estimate at a bound)");
        }
        if !(rep.stage1.converged && rep.stage2.converged) {
            warn!("{fam}: best start did not converge");
            code = 3;
        }
        out.write_json(&format!("fit_{fam}.json"), &FitOutput { family: fam, fit: &fit })?;
        let mut buf = Vec::new();
        write_residuals_csv(&mut buf, &subset, &rep.stage2.residuals)?;
        out.write_text(&format!("residuals_{fam}.csv"), &buf)?;
    }
    Ok(code)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CrossoverConfig {
    pub u_values: Vec<f64>,
    pub c_lo: f64,
    pub c_hi: f64,
    pub seed: u64,
}

impl Default for CrossoverConfig {
    fn default() -> Self {
        Self { u_values: vec![1e8, 1e9, 1e10, 1e11], c_lo: DEFAULT_C_LO, c_hi: DEFAULT_C_HI, seed: 0 }
    }
}

pub fn crossover(laws: &LawPair, u: Option<Vec<f64>>, c_lo: Option<f64>, c_hi: Option<f64>, common: &Common) -> Result<u8> {
    let mut cfg: CrossoverConfig = load_config(common.config.as_deref())?;
    cfg.u_values = u.unwrap_or(cfg.u_values);
    cfg.c_lo = c_lo.unwrap_or(cfg.c_lo);
    cfg.c_hi = c_hi.unwrap_or(cfg.c_hi);
    cfg.seed = common.seed.unwrap_or(cfg.seed);
    announce("crossover", cfg.seed, &cfg)?;
    let (law_diff, law_ar) = (read_law(&laws.law_a)?, read_law(&laws.law_b)?);
    let rows = crossover_table(&law_diff, &law_ar, &cfg.u_values, cfg.c_lo, cfg.c_hi)?;
    let out = OutDir::create(&common.out, cfg.seed)?;
    let mut buf = Vec::new();
    write_crossover_csv(&mut buf, &rows)?;
    out.write_text("crossover.csv", &buf)?;

    let points: Vec<(f64, f64)> = rows.iter().filter_map(|r| r.c_crit.map(|c| (r.unique, c))).collect();
    if points.len() < 2 {
        warn!("power-law fit skipped: {} crossover point(s), need at least 2", points.len());
        return Ok(0);
    }
    match fit_crit_powerlaw(&points) {
        Ok(fit) => {
            info!("C_crit = {} * U^{}", fmt9(fit.coefficient), fmt9(fit.exponent));
            out.write_json("crit_fit.json", &fit)?;
        }
        Err(e) => warn!("power-law fit skipped: {e}"),
    }
    Ok(0)
}

#[derive(Serialize)]
struct ParetoRow {
    family: Family,
    flops: f64,
    best_loss: f64,
    run_index: usize,
}

pub fn pareto(runs_path: &Path, family: Option<Family>, from_curves: bool, format: OutFormat, common: &Common) -> Result<u8> {
    let seed = common.seed.unwrap_or(0);
    announce("pareto", seed, &serde_json::json!({ "runs": runs_path, "family": family, "from_curves": from_curves }))?;
    let runs = ingest_runs(runs_path, Format::from_path(runs_path))?;
    let source = if from_curves { FrontierSource::LossCurve } else { FrontierSource::FinalLoss };
    let mut rows = Vec::new();
    for fam in families_in(&runs, family)? {
        for p in pareto_frontier_from(&runs, fam, source)? {
            rows.push(ParetoRow { family: fam, flops: p.flops, best_loss: p.best_loss, run_index: p.run_index });
        }
    }
    let out = OutDir::create(&common.out, seed)?;
    match format {
        OutFormat::Json => {
            out.write_json("pareto.json", &serde_json::json!({ "frontier": rows }))?;
        }
        OutFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["family", "flops", "best_loss", "run_index"])?;
            for r in &rows {
                w.write_record([r.family.to_string(), fmt9(r.flops), fmt9(r.best_loss), r.run_index.to_string()])?;
            }
            out.write_text("pareto.csv", &w.into_inner().map_err(|e| Error::Io(e.into_error()))?)?;
        }
    }
    Ok(0)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct HeatmapConfig {
    pub u_values: Vec<f64>,
    pub c_values: Vec<f64>,
    pub seed: u64,
}

impl Default for HeatmapConfig {
    fn default() -> Self {
        let logspace = |a: f64, b: f64, n: usize| (0..n).map(|i| 10f64.powf(a + (b - a) * i as f64 / (n - 1) as f64)).collect();
        Self { u_values: logspace(8.0, 11.0, 7), c_values: logspace(18.0, 24.0, 13), seed: 0 }
    }
}

pub fn heatmap(laws: &LawPair, grid_u: Option<Vec<f64>>, grid_c: Option<Vec<f64>>, common: &Common) -> Result<u8> {
    let mut cfg: HeatmapConfig = load_config(common.config.as_deref())?;
    cfg.u_values = grid_u.unwrap_or(cfg.u_values);
    cfg.c_values = grid_c.unwrap_or(cfg.c_values);
    cfg.seed = common.seed.unwrap_or(cfg.seed);
    announce("heatmap", cfg.seed, &cfg)?;
    let (law_diff, law_ar) = (read_law(&laws.law_a)?, read_law(&laws.law_b)?);
    let grid = heatmap_grid(&law_diff, &law_ar, &cfg.u_values, &cfg.c_values)?;
    let empty = grid.cells.iter().flatten().filter(|c| c.is_none()).count();
    if empty > 0 {
        warn!("{empty} infeasible cell(s) left empty (budget below one epoch)");
    }
    let mut buf = Vec::new();
    grid.write_csv(&mut buf)?;
    OutDir::create(&common.out, cfg.seed)?.write_text("heatmap.csv", &buf)?;
    Ok(0)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CurvesConfig {
    pub budgets: Vec<f64>,
    pub max_epochs: u32,
    /// Unique-data fractions for the fixed-compute repetition table.
    pub fractions: Vec<f64>,
    pub seed: u64,
}

impl Default for CurvesConfig {
    fn default() -> Self {
        Self { budgets: vec![1e19, 1e20, 1e21], max_epochs: 100, fractions: vec![1.0, 0.5, 0.25, 0.1, 0.04, 0.01], seed: 0 }
    }
}

pub fn curves(law_path: &Path, grid_c: Option<Vec<f64>>, max_epochs: Option<u32>, common: &Common) -> Result<u8> {
    let mut cfg: CurvesConfig = load_config(common.config.as_deref())?;
    cfg.budgets = grid_c.unwrap_or(cfg.budgets);
    cfg.max_epochs = max_epochs.unwrap_or(cfg.max_epochs);
    cfg.seed = common.seed.unwrap_or(cfg.seed);
    announce("curves", cfg.seed, &cfg)?;
    let law = read_law(law_path)?;
    let out = OutDir::create(&common.out, cfg.seed)?;
    let mut buf = Vec::new();
    write_curves_csv(&mut buf, &extrapolate_curves(&law, &cfg.budgets, cfg.max_epochs)?)?;
    out.write_text("curves.csv", &buf)?;

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["budget", "fraction", "epochs", "loss"])?;
    for &c in &cfg.budgets {
        for p in repetition_tradeoff(&law, c, &cfg.fractions)? {
            w.write_record([fmt9(c), fmt9(p.fraction), fmt9(p.epochs), fmt9(p.loss)])?;
        }
    }
    out.write_text("repetition.csv", &w.into_inner().map_err(|e| Error::Io(e.into_error()))?)?;
    Ok(0)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub family: Family,
    pub unique_tokens: Vec<f64>,
    /// Model sizes as fractions of the base size for `U * E` tokens.
    pub size_fractions: Vec<f64>,
    pub epochs: Vec<f64>,
    /// Standard deviation of the multiplicative log-normal loss noise.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            family: Family::Ar,
            unique_tokens: vec![1e5, 1e6, 1e7, 1e8],
            size_fractions: vec![1.0 / 256.0, 1.0 / 64.0, 1.0 / 16.0, 0.25, 1.0],
            epochs: vec![1.0, 8.0, 64.0, 512.0, 4096.0, 32768.0],
            noise_sigma: 0.01,
            seed: 0,
        }
    }
}

pub fn synth(law_path: &Path, family: Option<Family>, u: Option<Vec<f64>>, common: &Common) -> Result<u8> {
    let mut cfg: SynthConfig = load_config(common.config.as_deref())?;
    cfg.family = family.unwrap_or(cfg.family);
    cfg.unique_tokens = u.unwrap_or(cfg.unique_tokens);
    cfg.seed = common.seed.unwrap_or(cfg.seed);
    announce("synth", cfg.seed, &cfg)?;
    let law = read_law(law_path)?;
    let grid = scaled_design(&law, &cfg.unique_tokens, &cfg.size_fractions, &cfg.epochs)?;
    let runs = synth_runs(&law, &grid, cfg.noise_sigma, cfg.seed, cfg.family)?;
    OutDir::create(&common.out, cfg.seed)?.write_text("runs.jsonl", to_jsonl_string(&runs)?.as_bytes())?;
    Ok(0)
}

pub fn train_toy(common: &Common) -> Result<u8> {
    let mut cfg: SweepConfig = load_config(common.config.as_deref())?;
    cfg.seed = common.seed.unwrap_or(cfg.seed);
    announce("train-toy", cfg.seed, &cfg)?;
    let runs = sweep::<f64>(&cfg)?;
    let out = OutDir::create(&common.out, cfg.seed)?;
    for r in &runs {
        let rec = &r.record;
        let name = format!("metrics/{}_d{}_u{}_e{}.csv", rec.family, rec.tags["d_model"], rec.unique_tokens, rec.epochs);
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &r.metrics)?;
        out.write_text(&name, &buf)?;
    }
    let records: Vec<RunRecord> = runs.into_iter().map(|r| r.record).collect();
    out.write_text("runs.jsonl", to_jsonl_string(&records)?.as_bytes())?;
    Ok(0)
}

pub fn arch(table: Option<&Path>, format: OutFormat, common: &Common) -> Result<u8> {
    let seed = common.seed.unwrap_or(0);
    announce("arch", seed, &serde_json::json!({ "table": table.map(|p| p.display().to_string()).unwrap_or_else(|| "bundled".into()) }))?;
    let rows = match table {
        Some(p) => read_table_file(p)?,
        None => bundled_table(),
    };
    let checks = table_check(&rows)?;
    let flagged = checks.iter().filter(|c| c.flagged).count();
    if flagged > 0 {
        warn!("{flagged} of {} rows disagree with the parameter formula", checks.len());
    }
    for c in checks.iter().filter(|c| c.violation.is_some()) {
        warn!("row {}: {}", c.name, c.violation.as_deref().unwrap_or_default());
    }
    let out = OutDir::create(&common.out, seed)?;
    match format {
        OutFormat::Json => {
            out.write_json("arch.json", &serde_json::json!({ "flagged": flagged, "rows": checks }))?;
        }
        OutFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["name", "computed", "reported_millions", "rel_error", "ffw_matches", "flagged", "violation"])?;
            for c in &checks {
                w.write_record([
                    c.name.clone(),
                    c.computed.to_string(),
                    c.reported_millions.to_string(),
                    fmt9(c.rel_error),
                    c.ffw_matches.to_string(),
                    c.flagged.to_string(),
                    c.violation.clone().unwrap_or_default(),
                ])?;
            }
            out.write_text("arch.csv", &w.into_inner().map_err(|e| Error::Io(e.into_error()))?)?;
        }
    }
    Ok(0)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckConfig {
    pub model: ToyModelConfig,
    pub batch_size: usize,
    pub eps: f64,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            model: ToyModelConfig { vocab: 11, seq_len: 8, d_model: 8, d_ff: 32, n_layers: 1, init_std: 0.3, ..ToyModelConfig::default() },
            batch_size: 3,
            eps: 1e-4,
            tolerance: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Serialize)]
struct GradcheckResult {
    objective: &'static str,
    n_params: usize,
    max_rel_error: f64,
    passed: bool,
}

pub fn gradcheck(common: &Common) -> Result<u8> {
    let mut cfg: GradcheckConfig = load_config(common.config.as_deref())?;
    cfg.seed = common.seed.unwrap_or(cfg.seed);
    cfg.model.seed = cfg.seed;
    announce("gradcheck", cfg.seed, &cfg)?;
    let (v, l) = (cfg.model.vocab, cfg.model.seq_len);
    let chain = MarkovChain::new(v, 3.min(v), cfg.seed)?;
    let seqs: Vec<Vec<u32>> = chain.sample(cfg.batch_size * l, cfg.seed.wrapping_add(1)).chunks(l).map(<[u32]>::to_vec).collect();
    let mut results = Vec::new();
    for (objective, mode) in [("ar", AttnMode::Causal), ("diffusion", AttnMode::Bidirectional)] {
        let model = ToyModel::<f64>::new(ToyModelConfig { attn_mode: mode, ..cfg.model.clone() })?;
        let batch = match mode {
            AttnMode::Causal => Batch::Clean(seqs.clone()),
            AttnMode::Bidirectional => {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
                Batch::Corrupted(corrupt(&seqs, model.cfg.mask_id(), &mut rng)?)
            }
        };
        let err = grad_check(&model, &batch, cfg.eps)?;
        info!("{objective}: max relative error {err:.3e} over {} parameters", model.n_params());
        results.push(GradcheckResult { objective, n_params: model.n_params(), max_rel_error: err, passed: err < cfg.tolerance });
    }
    let passed = results.iter().all(|r| r.passed);
    OutDir::create(&common.out, cfg.seed)?.write_json("gradcheck.json", &serde_json::json!({ "tolerance": cfg.tolerance, "results": results }))?;
    if passed {
        Ok(0)
    } else {
        eprintln!("error: gradient check exceeded tolerance {}", cfg.tolerance);
        Ok(3)
    }
}
