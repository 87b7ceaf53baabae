use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use causalkit::bayes::{fit_bcf, fit_gp, fit_hlm, BcfConfig, GpConfig, HlmPriors, McmcConfig};
use causalkit::data::{ingest_csv, overlap_diagnostic, OverlapReport};
use causalkit::heterogeneity::{
    importance_from_bootstrap, subgroup_contrast, ImportanceConfig, ImportanceReport, SplitRule,
    SubgroupContrast,
};
use causalkit::inference::{
    bootstrap_effect, reference_estimators, BootstrapConfig, EffectEstimator, Interval,
    ReferenceEstimates,
};
use causalkit::learners::{CvPlan, LearnerClass, LearnerGrid, Scoring};
use causalkit::meta::{fit_propensity, PropensityModel};
use causalkit::rng::derive_seed;
use causalkit::screening::screen_top_k;
use causalkit::synthetic::{generate, DgpKind, DgpSpec};
use causalkit::{ColumnKind, Dataset};
use clap::Args;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::RunConfig;
use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// DGP-NULL, DGP-CONST, DGP-CONF, DGP-CONF-DYN, DGP-NL or DGP-HET.
    #[arg(long)]
    dgp: String,
    #[arg(long)]
    n: usize,
    /// Number of features.
    #[arg(long, default_value_t = 5)]
    d: usize,
    #[arg(long, default_value_t = 1.0)]
    noise: f64,
    /// Selection strength for the confounded processes.
    #[arg(long, default_value_t = 1.0)]
    selection: f64,
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>, CliError> {
    Ok(csv::Writer::from_writer(BufWriter::new(File::create(
        path,
    )?)))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

pub fn simulate(args: &SimulateArgs, cfg: &RunConfig, outdir: &Path) -> Result<(), CliError> {
    let kind: DgpKind = args
        .dgp
        .parse()
        .map_err(|e: causalkit::Error| CliError::Usage(e.to_string()))?;
    let spec = DgpSpec::new(kind, args.n, cfg.seed)
        .with_d(args.d)
        .with_noise(args.noise)
        .with_selection(args.selection);
    let (ds, truth) = generate(&spec)?;

    let mut w = csv_writer(&outdir.join("data.csv"))?;
    let mut header = vec!["y".to_string(), "t".to_string()];
    header.extend(ds.schema().iter().map(|c| c.name.clone()));
    w.write_record(&header)?;
    for i in 0..ds.n() {
        let mut row = vec![ds.y()[i].to_string(), ds.t()[i].to_string()];
        row.extend((0..ds.d()).map(|j| ds.x()[(i, j)].to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;

    let mut w = csv_writer(&outdir.join("truth.csv"))?;
    w.write_record(["unit", "tau", "propensity", "prognostic"])?;
    for i in 0..ds.n() {
        w.write_record([
            i.to_string(),
            truth.tau[i].to_string(),
            truth.propensity[i].to_string(),
            truth.prognostic[i].to_string(),
        ])?;
    }
    w.flush()?;

    write_json(
        &outdir.join("truth.json"),
        &serde_json::json!({
            "schema_version": SCHEMA_VERSION,
            "spec": spec,
            "ate": truth.ate,
            "population_ate": truth.population_ate,
            "naive_bias": truth.naive_bias,
        }),
    )
}

fn headers(path: &str) -> Result<Vec<String>, CliError> {
    let mut rdr = csv::Reader::from_path(path)
        .map_err(|e| causalkit::Error::Ingestion(format!("cannot open {path}: {e}")))?;
    Ok(rdr
        .headers()?
        .iter()
        .map(|h| h.trim().to_string())
        .collect())
}

#[derive(Serialize)]
struct ScreenRow<'a> {
    rank: usize,
    column: &'a str,
    coefficient: f64,
}

pub fn screen(cfg: &RunConfig, outdir: &Path) -> Result<(), CliError> {
    let input = cfg.input()?;
    let aux = match &cfg.auxiliary {
        Some(a) => a.clone(),
        None => {
            log::warn!(
                "no auxiliary target given; screening on the estimation outcome '{}'",
                cfg.outcome
            );
            cfg.outcome.clone()
        }
    };
    let mut roles = cfg.roles()?;
    if roles.features.is_empty() {
        roles.features = headers(input)?
            .into_iter()
            .filter(|h| *h != cfg.outcome && *h != cfg.treatment && *h != aux)
            .collect();
    }
    roles.outcome = aux.clone();
    let ds = ingest_csv(input, &roles)?;
    let result = screen_top_k(ds.x(), ds.y(), cfg.screen_k)?;

    let mut w = csv_writer(&outdir.join("screening.csv"))?;
    for (r, (&j, &c)) in result.selected.iter().zip(&result.coefficients).enumerate() {
        w.serialize(ScreenRow {
            rank: r + 1,
            column: &ds.schema()[j].name,
            coefficient: c,
        })?;
    }
    w.flush()?;
    write_json(
        &outdir.join("screening.json"),
        &serde_json::json!({
            "schema_version": SCHEMA_VERSION,
            "auxiliary": aux,
            "lambda": result.lambda,
            "target_k": result.target_k,
            "achieved_k": result.achieved_k,
            "selected": result.selected.iter().map(|&j| ds.schema()[j].name.clone()).collect::<Vec<_>>(),
        }),
    )
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimateRecord {
    pub estimator: String,
    pub model: String,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "ATE")]
    pub ate: f64,
    #[serde(rename = "CI")]
    pub ci: Option<Interval>,
    /// Full-sample estimate; equals ATE for the Bayesian models.
    pub point_estimate: f64,
    pub seed: u64,
    pub config_hash: String,
    pub diagnostics: Value,
    pub runtime_seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitReport {
    pub schema_version: u32,
    pub command: String,
    pub config: RunConfig,
    pub config_hash: String,
    pub seed: u64,
    #[serde(rename = "N")]
    pub n: usize,
    pub features: Vec<String>,
    pub reference: ReferenceEstimates,
    pub overlap: OverlapReport,
    pub propensity_auc: Option<f64>,
    pub estimates: Vec<EstimateRecord>,
    pub runtime_seconds: f64,
}

fn model_name(e: &str) -> String {
    let class = |c: &str| match c {
        "lasso" => "LASSO",
        "ridge" => "Ridge",
        _ => "GBR",
    };
    if let Some(c) = e.strip_prefix("t-") {
        format!("T-learner ({})", class(c))
    } else if let Some(c) = e.strip_prefix("dr-") {
        format!("DR ({})", class(c))
    } else {
        match e {
            "hlm" => "Bayes HLM".into(),
            "gp" => "Bayes GP".into(),
            _ => "BCF".into(),
        }
    }
}

fn load(cfg: &RunConfig) -> Result<Dataset, CliError> {
    Ok(ingest_csv(cfg.input()?, &cfg.roles()?)?)
}

fn propensity(ds: &Dataset, cfg: &RunConfig) -> Result<PropensityModel, CliError> {
    let plan = CvPlan::stratified(
        ds.t(),
        cfg.folds,
        Scoring::LogLoss,
        derive_seed(cfg.seed, "propensity", 0),
    )?;
    Ok(fit_propensity(ds, &[], &plan, cfg.epsilon)?)
}

fn meta_estimator(name: &str, cfg: &RunConfig, rho: &PropensityModel) -> Option<EffectEstimator> {
    let (dr, class) = match name.split_once('-') {
        Some(("t", c)) => (false, c),
        Some(("dr", c)) => (true, c),
        _ => return None,
    };
    let class: LearnerClass = class.parse().ok()?;
    Some(if dr {
        EffectEstimator::Dr {
            grid: LearnerGrid::new(class),
            epsilon: cfg.epsilon,
            fixed_propensity: cfg.fixed_propensity.then(|| rho.clone()),
        }
    } else {
        EffectEstimator::t_learner(class)
    })
}

fn write_ate_draws(path: &Path, label: &str, draws: &[f64]) -> Result<(), CliError> {
    let mut w = csv_writer(path)?;
    w.write_record([label, "ate"])?;
    for (s, a) in draws.iter().enumerate() {
        w.write_record([s.to_string(), a.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn write_cate_draws(path: &Path, draws: &[Vec<f64>]) -> Result<(), CliError> {
    let mut w = csv_writer(path)?;
    w.write_record(["sweep", "unit", "tau"])?;
    for (s, row) in draws.iter().enumerate() {
        for (i, v) in row.iter().enumerate() {
            w.write_record([s.to_string(), i.to_string(), v.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn run_estimator(
    name: &str,
    ds: &Dataset,
    cfg: &RunConfig,
    rho: &PropensityModel,
    outdir: &Path,
    cate_draws: bool,
    hash: &str,
) -> Result<EstimateRecord, CliError> {
    let started = Instant::now();
    let seed = derive_seed(cfg.seed, name, 0);
    let level = cfg.ci_level;
    let draws_path = outdir.join(format!("draws_{name}.csv"));
    let (ate, ci, point, diagnostics) = if let Some(est) = meta_estimator(name, cfg, rho) {
        let point = est.fit_cate(ds, cfg.folds, seed)?;
        let point = point.iter().sum::<f64>() / point.len() as f64;
        if cfg.bootstrap >= 2 {
            let boot = bootstrap_effect(
                ds,
                &est,
                &BootstrapConfig {
                    replicates: cfg.bootstrap,
                    ci_level: level,
                    k: cfg.folds,
                    seed,
                },
            )?;
            write_ate_draws(&draws_path, "replicate", &boot.ate_draws)?;
            let diag = serde_json::json!({
                "replicates": boot.ate_draws.len(),
                "redraws": boot.redraws,
            });
            (boot.grand_mean, Some(boot.ci), point, diag)
        } else {
            (point, None, point, serde_json::json!({ "replicates": 0 }))
        }
    } else {
        let (post, diag) = match name {
            "hlm" => {
                let mcmc = if cfg.paper_faithful {
                    McmcConfig::paper_faithful(seed)
                } else {
                    McmcConfig::desk(seed)
                };
                let (post, params) = fit_hlm(ds, rho, &mcmc, &HlmPriors::default())?;
                let diag = serde_json::json!({
                    "burn_in": mcmc.burn_in,
                    "kept": mcmc.kept,
                    "posterior_mean": params,
                });
                (post, diag)
            }
            "gp" => {
                let fit = fit_gp(ds, rho, &GpConfig::new(seed))?;
                let diag = serde_json::json!({
                    "kernel": fit.kernel,
                    "initial_log_likelihood": fit.initial_log_likelihood,
                    "log_likelihood": fit.log_likelihood,
                    "optimization_rows": fit.optimization_rows,
                });
                (fit.effect, diag)
            }
            "bcf" => {
                let bcf = BcfConfig::default();
                let post = fit_bcf(ds, rho, &bcf, seed)?;
                (post, serde_json::json!({ "config": bcf }))
            }
            other => return Err(CliError::Usage(format!("unknown estimator '{other}'"))),
        };
        if !post.converged {
            log::warn!(
                "{name}: chain did not pass the convergence check (R-hat {:?})",
                post.rhat
            );
        }
        write_ate_draws(&draws_path, "sweep", &post.ate_draws)?;
        if cate_draws {
            write_cate_draws(&outdir.join(format!("cate_draws_{name}.csv")), &post.draws)?;
        }
        let (low, high) = post.credible_interval(level);
        let mut diag = diag;
        diag["rhat"] = serde_json::json!(post.rhat);
        diag["converged"] = serde_json::json!(post.converged);
        diag["draws"] = serde_json::json!(post.ate_draws.len());
        let ate = post.ate();
        (ate, Some(Interval { level, low, high }), ate, diag)
    };
    Ok(EstimateRecord {
        estimator: name.to_string(),
        model: model_name(name),
        n: ds.n(),
        ate,
        ci,
        point_estimate: point,
        seed,
        config_hash: hash.to_string(),
        diagnostics,
        runtime_seconds: started.elapsed().as_secs_f64(),
    })
}

pub fn fit(cfg: &RunConfig, outdir: &Path, cate_draws: bool) -> Result<(), CliError> {
    let started = Instant::now();
    let ds = load(cfg)?;
    let hash = cfg.hash();
    let rho = propensity(&ds, cfg)?;
    let overlap = overlap_diagnostic(&ds, &rho, cfg.epsilon)?;
    if overlap.violated {
        log::warn!(
            "{} units have propensity outside [{}, {}]; they are clipped",
            overlap.outside,
            cfg.epsilon,
            1.0 - cfg.epsilon
        );
    }
    let reference = reference_estimators(&ds)?;
    let mut estimates = Vec::new();
    for name in cfg.estimators() {
        log::info!("fitting {name}");
        estimates.push(run_estimator(
            name, &ds, cfg, &rho, outdir, cate_draws, &hash,
        )?);
    }
    let report = FitReport {
        schema_version: SCHEMA_VERSION,
        command: "fit".into(),
        config: cfg.clone(),
        config_hash: hash,
        seed: cfg.seed,
        n: ds.n(),
        features: ds.schema().iter().map(|c| c.name.clone()).collect(),
        reference,
        overlap,
        propensity_auc: rho.holdout_auc,
        estimates,
        runtime_seconds: started.elapsed().as_secs_f64(),
    };
    std::fs::write(outdir.join("run.conf"), cfg.to_flat())?;
    write_json(&outdir.join("fit_report.json"), &report)
}

#[derive(Debug, Serialize, Deserialize)]
struct ImportanceOutput {
    schema_version: u32,
    config: RunConfig,
    config_hash: String,
    estimator: String,
    #[serde(rename = "ATE")]
    ate: f64,
    #[serde(rename = "CI")]
    ci: Interval,
    report: ImportanceReport,
    subgroups: Vec<SubgroupContrast>,
}

pub fn importance(cfg: &RunConfig, outdir: &Path) -> Result<(), CliError> {
    let ds = load(cfg)?;
    let rho = propensity(&ds, cfg)?;
    let est = meta_estimator(&cfg.estimator, cfg, &rho).ok_or_else(|| {
        CliError::Usage("importance needs one meta-learner estimator (t-lasso ... dr-gbr)".into())
    })?;
    if cfg.bootstrap < 2 {
        return Err(CliError::Usage(
            "importance needs a bootstrap of at least 2 replicates".into(),
        ));
    }
    let seed = derive_seed(cfg.seed, &cfg.estimator, 0);
    let boot = bootstrap_effect(
        &ds,
        &est,
        &BootstrapConfig {
            replicates: cfg.bootstrap,
            ci_level: cfg.ci_level,
            k: cfg.folds,
            seed,
        },
    )?;
    let mut icfg = ImportanceConfig::new(derive_seed(cfg.seed, "importance", 0));
    icfg.k = cfg.folds;
    icfg.max_replicates = cfg.importance_replicates;
    let report = importance_from_bootstrap(&ds, &boot, &icfg)?;
    let mut subgroups = Vec::new();
    for feature in &cfg.subgroups {
        let j = ds
            .column_index(feature)
            .ok_or_else(|| CliError::Usage(format!("unknown subgroup feature '{feature}'")))?;
        let rule = match ds.schema()[j].kind {
            ColumnKind::Continuous => SplitRule::Median,
            _ => SplitRule::Binary,
        };
        let c = subgroup_contrast(&ds, &boot, feature, rule)?;
        for w in &c.warnings {
            log::warn!("{w}");
        }
        subgroups.push(c);
    }

    std::fs::write(outdir.join("importance.csv"), report.to_csv())?;
    let mut w = csv_writer(&outdir.join("subgroups.csv"))?;
    w.write_record(["feature", "group", "size", "ate", "ci_low", "ci_high"])?;
    for c in &subgroups {
        for (label, g) in [("low", &c.low), ("high", &c.high)] {
            w.write_record([
                c.feature.clone(),
                label.to_string(),
                g.size.to_string(),
                g.ate.to_string(),
                g.ci.low.to_string(),
                g.ci.high.to_string(),
            ])?;
        }
        w.write_record([
            c.feature.clone(),
            "difference".to_string(),
            String::new(),
            c.difference.to_string(),
            c.difference_ci.low.to_string(),
            c.difference_ci.high.to_string(),
        ])?;
    }
    w.flush()?;
    write_json(
        &outdir.join("importance_top10.json"),
        &serde_json::json!({
            "schema_version": SCHEMA_VERSION,
            "top": report.top,
            "residual_share": report.residual_share,
        }),
    )?;
    write_json(
        &outdir.join("importance_report.json"),
        &ImportanceOutput {
            schema_version: SCHEMA_VERSION,
            config: cfg.clone(),
            config_hash: cfg.hash(),
            estimator: cfg.estimator.clone(),
            ate: boot.grand_mean,
            ci: boot.ci,
            report,
            subgroups,
        },
    )
}

fn read_json(path: &Path) -> Result<Option<Value>, CliError> {
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(path)?;
    Ok(Some(serde_json::from_str(&text)?))
}

pub fn report(outdir: &Path) -> Result<(), CliError> {
    let fit = read_json(&outdir.join("fit_report.json"))?;
    let imp = read_json(&outdir.join("importance_report.json"))?;
    let screening = read_json(&outdir.join("screening.json"))?;
    if fit.is_none() && imp.is_none() && screening.is_none() {
        return Err(CliError::Core(causalkit::Error::Ingestion(format!(
            "no fit, importance or screening output in {}",
            outdir.display()
        ))));
    }

    let mut w = csv_writer(&outdir.join("ate_comparison.csv"))?;
    w.write_record(["model", "N", "ATE", "ci_low", "ci_high"])?;
    if let Some(f) = &fit {
        let report: FitReport = serde_json::from_value(f.clone())?;
        let n = report.n.to_string();
        for (label, v) in [
            ("OLS (no controls)", report.reference.difference_in_means),
            ("OLS (with controls)", report.reference.ols_with_controls),
        ] {
            w.write_record([label, &n, &v.to_string(), "", ""])?;
        }
        for e in &report.estimates {
            let (lo, hi) =
                e.ci.map(|c| (c.low.to_string(), c.high.to_string()))
                    .unwrap_or_default();
            w.write_record([e.model.clone(), n.clone(), e.ate.to_string(), lo, hi])?;
        }
    }
    w.flush()?;

    if let Some(i) = &imp {
        let mut w = csv_writer(&outdir.join("importance_shares.csv"))?;
        w.write_record(["feature", "share"])?;
        if let Some(top) = i["report"]["top"].as_array() {
            for s in top {
                w.write_record([
                    s["feature"].as_str().unwrap_or_default().to_string(),
                    s["share"].to_string(),
                ])?;
            }
        }
        w.write_record([
            "other".to_string(),
            i["report"]["residual_share"].to_string(),
        ])?;
        w.flush()?;
    }

    write_json(
        &outdir.join("summary.json"),
        &serde_json::json!({
            "schema_version": SCHEMA_VERSION,
            "fit": fit,
            "importance": imp,
            "screening": screening,
        }),
    )
}
