//! Pipeline stages. Each reads its inputs from the run directory, writes
//! its artifacts plus sidecars, and is byte-reproducible for a fixed
//! config and seed.

use std::path::Path;

use dsk_core::baselines::{bcsd, cubic_upsample_samples, QuantileTable};
use dsk_core::conditioning::{downscale, DownscaleConfig};
use dsk_core::dataset::{DatasetMeta, SnapshotDataset};
use dsk_core::field::Samples;
use dsk_core::metrics::{evaluate as evaluate_metrics, LowResView, MetricsReport};
use dsk_core::net::DenoiserModel;
use dsk_core::ot::{sinkhorn_fit, EntropicTransport};
use dsk_core::pde::{lf_dataset_to_y, select_dataset, simulate, Fidelity};
use dsk_core::train::train;
use serde::{Deserialize, Serialize};

use crate::artifacts::{check_input, ensure_parent, read_sidecar, require, write_sidecar, Layout, Method, METHODS};
use crate::config::RunConfig;
use crate::error::{CliError, Context};

fn save_dataset(ds: &SnapshotDataset, path: &Path, stage: &str, hash: &str) -> Result<(), CliError> {
    ensure_parent(path)?;
    ds.save(path).context(|| format!("writing {}", path.display()))?;
    write_sidecar(path, stage, hash)
}

fn load_dataset(path: &Path, stage: &'static str, hash: &str) -> Result<SnapshotDataset, CliError> {
    require(path, stage)?;
    check_input(path, hash);
    SnapshotDataset::load(path).context(|| format!("reading {}", path.display()))
}

fn load_transport(layout: &Layout, hash: &str) -> Result<EntropicTransport, CliError> {
    let path = layout.transport();
    require(&path, "fit-ot")?;
    check_input(&path, hash);
    EntropicTransport::load(&path).context(|| format!("reading {}", path.display()))
}

fn derived(samples: Samples, fidelity: &str, cfg: &RunConfig, provenance: serde_json::Value) -> SnapshotDataset {
    let mut meta = DatasetMeta::new(fidelity, cfg.hf.length, cfg.seed, serde_json::Value::Null);
    meta.provenance = Some(provenance);
    SnapshotDataset { samples, meta }
}

/// Rows of the first `n_traj − holdout` trajectories, and the rest.
fn split(samples: &Samples, per_traj: usize, n_traj: usize, holdout: usize) -> (Samples, Samples) {
    let cut = (n_traj - holdout) * per_traj;
    (samples.slice(0, cut), samples.slice(cut, samples.len() - cut))
}

pub fn gen_data(cfg: &RunConfig, layout: &Layout) -> Result<(), CliError> {
    let hash = cfg.hash();
    let mask = cfg.mask().context(|| "coarsening mask".into())?;
    log::info!("simulating {} HF trajectories", cfg.hf.n_trajectories);
    let hf = simulate(&cfg.hf_ks(), Fidelity::Hf).context(|| "HF simulation".into())?;
    log::info!("simulating {} LF trajectories", cfg.lf.n_trajectories);
    let lf = simulate(&cfg.lf_ks(), Fidelity::Lf).context(|| "LF simulation".into())?;
    let hflr = select_dataset(&hf, &mask).context(|| "coarsening HF".into())?;
    let lflr = lf_dataset_to_y(&lf, cfg.data.coarse_points).context(|| "subsampling LF".into())?;
    save_dataset(&hf, &layout.hf(), "gen-data", &hash)?;
    save_dataset(&lf, &layout.lf(), "gen-data", &hash)?;
    let note = |from: &str| serde_json::json!({ "from": from, "coarse_points": cfg.data.coarse_points });
    save_dataset(&derived(hflr, "hflr", cfg, note("hf")), &layout.hflr(), "gen-data", &hash)?;
    save_dataset(&derived(lflr, "lflr", cfg, note("lf")), &layout.lflr(), "gen-data", &hash)?;
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OtSummary {
    pub epsilon: f64,
    pub samples: usize,
    pub iterations_run: usize,
    pub marginal_error: f64,
}

pub fn fit_ot(cfg: &RunConfig, layout: &Layout) -> Result<(), CliError> {
    let hash = cfg.hash();
    let lflr = load_dataset(&layout.lflr(), "gen-data", &hash)?;
    let hflr = load_dataset(&layout.hflr(), "gen-data", &hash)?;
    let h = cfg.data.holdout_trajectories;
    let (src, _) = split(&lflr.samples, cfg.lf.n_snapshots_per_traj, cfg.lf.n_trajectories, h);
    let (tgt, _) = split(&hflr.samples, cfg.hf.n_snapshots_per_traj, cfg.hf.n_trajectories, h);
    let n = cfg.ot.samples;
    if src.len() < n || tgt.len() < n {
        return Err(CliError::Config(format!(
            "at `ot.samples`: {n} requested but only {} LF / {} HF training snapshots exist",
            src.len(),
            tgt.len()
        )));
    }
    log::info!("Sinkhorn on {n} x {n} samples, epsilon {}", cfg.ot.epsilon);
    let t = sinkhorn_fit(&src.slice(0, n), &tgt.slice(0, n), &cfg.ot.sinkhorn()).context(|| "Sinkhorn fit".into())?;
    log::info!("{} iterations, marginal violation {:.3e}", t.iterations_run, t.marginal_error);
    let path = layout.transport();
    ensure_parent(&path)?;
    t.save(&path).context(|| format!("writing {}", path.display()))?;
    write_sidecar(&path, "fit-ot", &hash)?;
    let summary = OtSummary {
        epsilon: t.epsilon,
        samples: n,
        iterations_run: t.iterations_run,
        marginal_error: t.marginal_error,
    };
    let spath = path.with_extension("json");
    std::fs::write(&spath, serde_json::to_string_pretty(&summary).expect("summary serializes"))
        .context(|| format!("writing {}", spath.display()))
}

pub fn train_denoiser(cfg: &RunConfig, layout: &Layout) -> Result<(), CliError> {
    let hash = cfg.hash();
    let hf = load_dataset(&layout.hf(), "gen-data", &hash)?;
    let (data, _) = split(&hf.samples, cfg.hf.n_snapshots_per_traj, cfg.hf.n_trajectories, cfg.data.holdout_trajectories);
    let sd = data.global_std();
    let standardized =
        Samples::new(data.dim(), data.data().iter().map(|v| v / sd).collect()).context(|| "standardizing".into())?;
    let mut model =
        DenoiserModel::new(cfg.model.clone(), sd, cfg.stage_seed("init")).context(|| "model init".into())?;
    log::info!("training {} parameters for {} steps", model.param_count(), cfg.train.steps);
    let report = train(&mut model, &standardized, &cfg.schedule(), &cfg.train.train_config(cfg.stage_seed("train")))
        .context(|| "training".into())?;
    let path = layout.model();
    ensure_parent(&path)?;
    model.save(&path).context(|| format!("writing {}", path.display()))?;
    write_sidecar(&path, "train-denoiser", &hash)?;
    let rpath = layout.train_report();
    std::fs::write(&rpath, serde_json::to_string_pretty(&report).expect("report serializes"))
        .context(|| format!("writing {}", rpath.display()))?;
    write_sidecar(&rpath, "train-denoiser", &hash)
}

/// Evaluation conditions: evenly spaced rows of the held-out LF set.
pub fn conditions(cfg: &RunConfig, layout: &Layout) -> Result<Samples, CliError> {
    let lflr = load_dataset(&layout.lflr(), "gen-data", &cfg.hash())?;
    let (_, held) = split(&lflr.samples, cfg.lf.n_snapshots_per_traj, cfg.lf.n_trajectories, cfg.data.holdout_trajectories);
    let n = cfg.sampling.conditions;
    if n > held.len() {
        return Err(CliError::Config(format!(
            "at `sampling.conditions`: {n} requested but the LF holdout has {} snapshots",
            held.len()
        )));
    }
    Samples::from_rows(held.dim(), (0..n).map(|i| held.row(i * held.len() / n))).context(|| "conditions".into())
}

fn save_method(cfg: &RunConfig, layout: &Layout, m: Method, samples: Samples, hash: &str) -> Result<(), CliError> {
    let prov = serde_json::json!({ "method": m.label() });
    save_dataset(&derived(samples, "samples", cfg, prov), &layout.samples(m), m.stage(), hash)
}

pub fn sample(cfg: &RunConfig, layout: &Layout) -> Result<(), CliError> {
    let hash = cfg.hash();
    let cond = conditions(cfg, layout)?;
    let t = load_transport(layout, &hash)?;
    let path = layout.model();
    require(&path, "train-denoiser")?;
    check_input(&path, &hash);
    let model = DenoiserModel::load(&path).context(|| format!("reading {}", path.display()))?;
    let mask = cfg.mask().context(|| "coarsening mask".into())?;
    let dcfg = DownscaleConfig {
        alpha_tilde: cfg.sampling.alpha_tilde,
        samples_per_condition: cfg.sampling.samples_per_condition,
        sampler: cfg.sampling.sampler(),
    };
    let debiased = t.map_samples(&cond).context(|| "applying transport".into())?;
    save_method(cfg, layout, Method::Lflr, cond.clone(), &hash)?;
    save_method(cfg, layout, Method::Ot, debiased, &hash)?;
    let schedule = cfg.schedule();
    for (m, transport, stage) in [(Method::RawCdfn, None, "sample-raw"), (Method::OtCdfn, Some(&t), "sample-ot")] {
        log::info!("{}: {} x {} samples", m.label(), cond.len(), dcfg.samples_per_condition);
        let out = downscale(&model, transport, &cond, mask, &schedule, &dcfg, cfg.stage_seed(stage))
            .context(|| format!("{} sampling", m.label()))?;
        save_method(cfg, layout, m, out, &hash)?;
    }
    Ok(())
}

pub fn baseline(cfg: &RunConfig, layout: &Layout) -> Result<(), CliError> {
    let hash = cfg.hash();
    let cond = conditions(cfg, layout)?;
    let t = load_transport(layout, &hash)?;
    let factor = cfg.hf.n_grid / cfg.data.coarse_points;
    let debiased = t.map_samples(&cond).context(|| "applying transport".into())?;
    let ot_cubic = cubic_upsample_samples(&debiased, factor).context(|| "cubic upsampling".into())?;
    save_method(cfg, layout, Method::OtCubic, ot_cubic, &hash)?;

    let lflr = load_dataset(&layout.lflr(), "gen-data", &hash)?;
    let hf = load_dataset(&layout.hf(), "gen-data", &hash)?;
    let h = cfg.data.holdout_trajectories;
    let (lf_train, _) = split(&lflr.samples, cfg.lf.n_snapshots_per_traj, cfg.lf.n_trajectories, h);
    let (hf_train, _) = split(&hf.samples, cfg.hf.n_snapshots_per_traj, cfg.hf.n_trajectories, h);
    let source = cubic_upsample_samples(&lf_train, factor).context(|| "cubic upsampling".into())?;
    let table = QuantileTable::fit(&source, &hf_train, cfg.baseline.quantiles).context(|| "quantile fit".into())?;
    let qpath = layout.quantiles();
    ensure_parent(&qpath)?;
    table.save(&qpath).context(|| format!("writing {}", qpath.display()))?;
    write_sidecar(&qpath, "baseline", &hash)?;
    let matched = bcsd(&cond, &table, factor).context(|| "BCSD".into())?;
    log::info!("BCSD clamped {} values", matched.clamped);
    save_method(cfg, layout, Method::Bcsd, matched.samples, &hash)
}

/// Metrics for every method whose samples exist.
pub fn evaluate(cfg: &RunConfig, layout: &Layout) -> Result<Vec<Method>, CliError> {
    let hash = cfg.hash();
    let hf = load_dataset(&layout.hf(), "gen-data", &hash)?;
    let (_, reference) = split(&hf.samples, cfg.hf.n_snapshots_per_traj, cfg.hf.n_trajectories, cfg.data.holdout_trajectories);
    let mask = cfg.mask().context(|| "coarsening mask".into())?;
    let reference_lr = reference.map_rows(mask.d_prime, |r| mask.apply(r)).context(|| "coarsening".into())?;
    let cond = conditions(cfg, layout)?;
    let debiased = load_transport(layout, &hash)?.map_samples(&cond).context(|| "applying transport".into())?;
    let mut done = Vec::new();
    for m in METHODS {
        let path = layout.samples(m);
        if !path.exists() {
            continue;
        }
        let pred = load_dataset(&path, m.stage(), &hash)?.samples;
        let per = if m.is_diffusion() { cfg.sampling.samples_per_condition } else { 1 };
        let view = LowResView {
            mask: (!m.is_low_res()).then_some(&mask),
            lflr: &cond,
            imposed: if m.is_debiased() { &debiased } else { &cond },
        };
        let r = if m.is_low_res() { &reference_lr } else { &reference };
        log::info!("evaluating {}", m.label());
        let report = evaluate_metrics(&pred, r, per, &view, &cfg.metrics).context(|| format!("{} metrics", m.label()))?;
        write_metrics(layout, m, &report, &hash)?;
        done.push(m);
    }
    if done.is_empty() {
        return Err(CliError::MissingArtifact {
            path: layout.samples(Method::Lflr),
            stage: "sample",
        });
    }
    Ok(done)
}

fn write_metrics(layout: &Layout, m: Method, report: &MetricsReport, hash: &str) -> Result<(), CliError> {
    let path = layout.metrics(m);
    ensure_parent(&path)?;
    std::fs::write(&path, serde_json::to_string_pretty(report).expect("metrics serialize"))
        .context(|| format!("writing {}", path.display()))?;
    write_sidecar(&path, "evaluate", hash)?;
    let csv = layout.energy_csv(m);
    std::fs::write(&csv, report.energy_ratio_csv()).context(|| format!("writing {}", csv.display()))
}

/// Distributional metrics of one sample file against another.
pub fn evaluate_files(cfg: &RunConfig, pred: &Path, reference: &Path) -> Result<MetricsReport, CliError> {
    let load = |p: &Path| {
        require(p, "sample")?;
        SnapshotDataset::load(p).context(|| format!("reading {}", p.display()))
    };
    let (p, r) = (load(pred)?.samples, load(reference)?.samples);
    let view = LowResView {
        mask: None,
        lflr: &p,
        imposed: &p,
    };
    evaluate_metrics(&p, &r, 1, &view, &cfg.metrics).context(|| "metrics".into())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub config_hash: String,
    pub metrics: MetricsReport,
}

pub fn report(layout: &Layout, force: bool) -> Result<Vec<ReportRow>, CliError> {
    let mut rows = Vec::new();
    for m in METHODS {
        let path = layout.metrics(m);
        if !path.exists() {
            if force {
                log::warn!("no metrics for {}, skipping", m.label());
                continue;
            }
            return Err(CliError::MissingArtifact { path, stage: "evaluate" });
        }
        let text = std::fs::read_to_string(&path).context(|| format!("reading {}", path.display()))?;
        let metrics: MetricsReport = serde_json::from_str(&text)
            .map_err(|e| CliError::Mismatch(format!("malformed metrics {}: {e}", path.display())))?;
        rows.push(ReportRow {
            method: m.label().into(),
            config_hash: read_sidecar(&path)?.config_hash,
            metrics,
        });
    }
    let mut hashes: Vec<&str> = rows.iter().map(|r| r.config_hash.as_str()).collect();
    hashes.sort_unstable();
    hashes.dedup();
    if hashes.len() > 1 && !force {
        return Err(CliError::Mismatch(format!(
            "metrics come from {} different configs; rerun the stages or pass --force",
            hashes.len()
        )));
    }
    let jpath = layout.report_json();
    std::fs::write(&jpath, serde_json::to_string_pretty(&rows).expect("report serializes"))
        .context(|| format!("writing {}", jpath.display()))?;
    let cpath = layout.report_csv();
    let mut w = csv::Writer::from_path(&cpath).map_err(|e| CliError::Mismatch(format!("{}: {e}", cpath.display())))?;
    let header = ["method", "Var", "covRMSE", "MELRu", "MELRw", "KLD", "Wass1", "MMD", "constraintRMSE", "sMAPE"];
    let io = |e: csv::Error| CliError::Mismatch(format!("{}: {e}", cpath.display()));
    w.write_record(header).map_err(io)?;
    for r in &rows {
        let m = &r.metrics;
        let vals = [m.variability, m.cov_rmse, m.melr_u, m.melr_w, m.kld, m.wass1, m.mmd, m.constraint_rmse, m.smape];
        let mut rec = vec![r.method.clone()];
        rec.extend(vals.iter().map(|v| format!("{v:.6e}")));
        w.write_record(&rec).map_err(io)?;
    }
    w.flush().context(|| format!("writing {}", cpath.display()))?;
    Ok(rows)
}

/// Plain-text table of a report.
pub fn format_table(rows: &[ReportRow]) -> String {
    let mut s = format!(
        "{:<10} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9} {:>10} {:>11} {:>9}\n",
        "method", "Var", "covRMSE", "MELRu", "MELRw", "KLD", "Wass1", "MMD", "constrRMSE", "sMAPE"
    );
    for r in rows {
        let m = &r.metrics;
        s.push_str(&format!(
            "{:<10} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>10.3e} {:>11.3e} {:>9.4}\n",
            r.method, m.variability, m.cov_rmse, m.melr_u, m.melr_w, m.kld, m.wass1, m.mmd, m.constraint_rmse, m.smape
        ));
    }
    s
}
