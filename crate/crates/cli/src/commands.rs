use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use gpbart::evaluate::{
    cross_validate, derive_seed, fit_dataset, grid_design, median, predict_raw, write_acceptance_rows,
    CvConfig, FittedModel,
};
use gpbart::io::{format_float, load_csv, load_csv_with_schema, load_draws, Dataset, SavedModel};
use gpbart::sampler::{ColumnRoles, RunOptions, Variant};
use gpbart::simdata::{benchmark_mean, gen_benchmark, gen_friedman, BenchmarkSpec, FriedmanSpec, SimData};
use gpbart::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::config::Settings;

/// `# seed=..` and `# config_hash=..` lines opening every CSV output.
fn preamble<W: Write>(w: &mut W, seed: u64, hash: &str) -> Result<()> {
    writeln!(w, "# seed={seed}")?;
    writeln!(w, "# config_hash={hash}")?;
    Ok(())
}

/// Buffered file holding `body`, written only once all output is ready.
struct Output {
    path: PathBuf,
    body: Vec<u8>,
}

impl Output {
    fn new(path: PathBuf, seed: u64, hash: &str) -> Result<Self> {
        let mut body = Vec::new();
        preamble(&mut body, seed, hash)?;
        Ok(Output { path, body })
    }

    fn bare(path: PathBuf) -> Self {
        Output { path, body: Vec::new() }
    }
}

fn write_all(outputs: &[Output]) -> Result<()> {
    for o in outputs {
        if let Some(dir) = o.path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let mut f = BufWriter::new(File::create(&o.path)?);
        f.write_all(&o.body)?;
        f.flush()?;
    }
    Ok(())
}

fn warn_rejections(path: &Path, rejected: &[gpbart::io::Rejection]) {
    if rejected.is_empty() {
        return;
    }
    eprintln!("{}: {} row(s) rejected", path.display(), rejected.len());
    for r in rejected.iter().take(5) {
        eprintln!("  line {}: {}", r.line, r.message);
    }
}

/// Load the input CSV named by the settings and drop ignored columns.
fn load_input(s: &Settings) -> Result<Dataset> {
    let path = s.path("input")?;
    let target = s.required("target")?;
    let categorical = s.list("categorical").unwrap_or_default();
    let data = load_csv(path, target, &categorical)?;
    warn_rejections(path, &data.rejected);
    match s.list("ignore") {
        Some(drop) if !drop.is_empty() => data.without_columns(&drop),
        _ => Ok(data),
    }
}

fn column_indices(data: &Dataset, names: &[String], role: &str) -> Result<Vec<usize>> {
    names
        .iter()
        .map(|name| {
            let j = data
                .names
                .iter()
                .position(|c| c == name)
                .ok_or_else(|| Error::InvalidInput(format!("{role} column '{name}' not found")))?;
            if !data.design.kind(j).is_continuous() {
                return Err(Error::InvalidInput(format!(
                    "{role} column '{name}' is categorical"
                )));
            }
            Ok(j)
        })
        .collect()
}

fn roles(s: &Settings, data: &Dataset, variant: Option<Variant>) -> Result<ColumnRoles> {
    let mut r = ColumnRoles::defaults(&data.design);
    if let Some(cols) = s.list("gp-columns") {
        r.gp = column_indices(data, &cols, "kernel")?;
    }
    if let Some(cols) = s.list("rotation-columns") {
        r.rotation = column_indices(data, &cols, "rotation")?;
    }
    let variants = match variant {
        Some(v) => vec![v],
        None => s.variants()?,
    };
    for v in variants {
        r.validate(&data.design, v)?;
    }
    Ok(r)
}

pub fn fit(s: &Settings) -> Result<()> {
    let hp = s.hyperparams()?;
    let variant = s.variant()?;
    let seed = s.seed()?;
    let out_dir = s.path("out-dir")?.to_path_buf();
    let data = load_input(s)?;
    let roles = roles(s, &data, Some(variant))?;
    let hash = s.config_hash();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = RunOptions {
        verbose: s.verbose()?,
        check_invariants: false,
    };
    let model = fit_dataset(&data, &hp, variant, Some(&roles), &opts, &mut rng)?;

    let mut trace = Output::new(out_dir.join("tau_trace.csv"), seed, &hash)?;
    writeln!(trace.body, "iteration,tau,sigma")?;
    let range = model.transform.y_range();
    for (i, t) in model.posterior.tau_trace.iter().enumerate() {
        writeln!(
            trace.body,
            "{},{},{}",
            i + 1,
            format_float(*t),
            format_float(range / t.sqrt())
        )?;
    }

    let mut acc = Output::new(out_dir.join("acceptance.csv"), seed, &hash)?;
    writeln!(acc.body, "variant,move,proposed,accepted,rate")?;
    write_acceptance_rows(&mut acc.body, &variant.to_string(), &model.posterior.acceptance)?;

    let summary = fit_summary(&model, seed, &hash, out_dir.join("summary.csv"))?;

    let mut post = Output::bare(out_dir.join("posterior.jsonl"));
    gpbart::io::write_draws(
        &SavedModel {
            seed: Some(seed),
            config_hash: Some(hash.clone()),
            transform: model.transform.clone(),
            schema: model.schema.clone(),
            posterior: model.posterior.clone(),
        },
        &mut post.body,
    )?;
    write_all(&[post, trace, acc, summary])?;
    eprintln!(
        "fit {} rows, variant {variant}, {} draws -> {}",
        data.n_rows(),
        model.posterior.draws.len(),
        out_dir.display()
    );
    Ok(())
}

/// Medians of the residual precision and a histogram of tree depths over
/// retained draws.
fn fit_summary(model: &FittedModel, seed: u64, hash: &str, path: PathBuf) -> Result<Output> {
    let post = &model.posterior;
    let burn = post.hyperparams.n_burnin.min(post.tau_trace.len());
    let retained = &post.tau_trace[burn..];
    let tau_med = median(retained);
    let mut depth_counts: Vec<u64> = Vec::new();
    for d in &post.draws {
        for t in &d.trees {
            let depth = t.nodes.iter().map(|n| n.depth).max().unwrap_or(0);
            if depth_counts.len() <= depth {
                depth_counts.resize(depth + 1, 0);
            }
            depth_counts[depth] += 1;
        }
    }
    let mut out = Output::new(path, seed, hash)?;
    let w = &mut out.body;
    writeln!(w, "statistic,value")?;
    writeln!(w, "variant,{}", post.variant)?;
    writeln!(w, "rows,{}", post.design.n_rows())?;
    writeln!(w, "retained_draws,{}", post.draws.len())?;
    writeln!(w, "median_tau,{}", format_float(tau_med))?;
    writeln!(
        w,
        "median_sigma,{}",
        format_float(model.transform.y_range() / tau_med.sqrt())
    )?;
    writeln!(w, "tau_ols,{}", format_float(model.calibration.tau_ols))?;
    writeln!(w, "d_tau,{}", format_float(post.hyperparams.d_tau))?;
    for (depth, count) in depth_counts.iter().enumerate() {
        writeln!(w, "trees_depth_{depth},{count}")?;
    }
    Ok(out)
}

pub fn predict(s: &Settings) -> Result<()> {
    let post_path = s.path("posterior")?;
    let input = s.path("input")?;
    let output = s.path("output")?.to_path_buf();
    let level: f64 = s.or("level", 0.95)?;
    if !(0.0..1.0).contains(&level) {
        return Err(Error::InvalidInput(format!("level {level} not in [0, 1)")));
    }
    let seed = s.seed()?;
    if !post_path.exists() {
        return Err(Error::InvalidInput(format!(
            "posterior file {} does not exist",
            post_path.display()
        )));
    }
    let model = load_draws(post_path)?;
    let q: usize = s.or("q", model.posterior.hyperparams.q_replicates)?;
    if q == 0 {
        return Err(Error::InvalidInput("q must be positive".into()));
    }
    let features = load_csv_with_schema(input, &model.schema)?;
    warn_rejections(input, &features.rejected);
    let hash = s.config_hash();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pred = predict_raw(&model.posterior, &model.transform, &features.design, q, &mut rng)?;
    let intervals = pred.intervals(level)?;

    let mut out = Output::new(output, seed, &hash)?;
    let w = &mut out.body;
    let with_y = features.y.is_some();
    write!(w, "row,mean,lower,upper,unknown_level")?;
    if with_y {
        write!(w, ",{}", model.schema.target)?;
    }
    writeln!(w)?;
    for i in 0..pred.n_rows() {
        let (lo, hi) = intervals[i];
        write!(
            w,
            "{},{},{},{},{}",
            i,
            format_float(pred.mean[i]),
            format_float(lo),
            format_float(hi),
            pred.unknown_level[i]
        )?;
        if let Some(y) = &features.y {
            write!(w, ",{}", format_float(y[i]))?;
        }
        writeln!(w)?;
    }
    write_all(&[out])
}

enum Source {
    Benchmark(BenchmarkSpec),
    Friedman(FriedmanSpec),
}

fn source(s: &Settings, for_benchmark: bool) -> Result<Source> {
    match s.required("generator")? {
        "benchmark" => {
            let n: usize = s.or("n", 100)?;
            if for_benchmark && ![100, 500, 1000].contains(&n) {
                return Err(Error::InvalidInput(format!(
                    "benchmark n must be 100, 500 or 1000, got {n}"
                )));
            }
            if n < 2 {
                return Err(Error::InvalidInput("n must be at least 2".into()));
            }
            Ok(Source::Benchmark(BenchmarkSpec::new(n)))
        }
        "friedman" => {
            let n: usize = s.or("n", 500)?;
            let p: usize = s.or("p", 10)?;
            if p != 5 && p != 10 {
                return Err(Error::InvalidInput(format!("friedman p must be 5 or 10, got {p}")));
            }
            if n < 2 {
                return Err(Error::InvalidInput("n must be at least 2".into()));
            }
            Ok(Source::Friedman(FriedmanSpec::new(n, p)))
        }
        other => Err(Error::InvalidInput(format!(
            "unknown generator '{other}' (benchmark or friedman)"
        ))),
    }
}

fn generate(src: &Source, seed: u64) -> Result<SimData> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match src {
        Source::Benchmark(spec) => gen_benchmark(spec, &mut rng),
        Source::Friedman(spec) => gen_friedman(spec, &mut rng),
    }
}

fn sim_csv(sim: &SimData, seed: u64, hash: &str, path: PathBuf) -> Result<Output> {
    let mut out = Output::new(path, seed, hash)?;
    let w = &mut out.body;
    let p = sim.design.n_cols();
    let names: Vec<String> = (1..=p).map(|j| format!("x{j}")).collect();
    writeln!(w, "{},y,truth", names.join(","))?;
    for i in 0..sim.y.len() {
        for v in sim.design.row(i) {
            write!(w, "{},", format_float(*v))?;
        }
        writeln!(w, "{},{}", format_float(sim.y[i]), format_float(sim.truth[i]))?;
    }
    Ok(out)
}

pub fn simulate(s: &Settings) -> Result<()> {
    let src = source(s, false)?;
    let output = s.path("output")?.to_path_buf();
    let seed = s.seed()?;
    let hash = s.config_hash();
    let sim = generate(&src, seed)?;
    let csv = sim_csv(&sim, seed, &hash, output.clone())?;
    let spec = match &src {
        Source::Benchmark(spec) => json!({"generator": "benchmark", "spec": spec}),
        Source::Friedman(spec) => json!({"generator": "friedman", "spec": spec}),
    };
    let meta = json!({
        "seed": seed,
        "config_hash": hash,
        "data": output.file_name().map(|f| f.to_string_lossy().into_owned()),
        "columns": (1..=sim.design.n_cols()).map(|j| format!("x{j}")).chain(["y".into(), "truth".into()]).collect::<Vec<String>>(),
        "generator": spec["generator"],
        "spec": spec["spec"],
    });
    let mut meta_path = output.clone().into_os_string();
    meta_path.push(".meta.json");
    let mut side = Output::bare(PathBuf::from(meta_path));
    serde_json::to_writer_pretty(&mut side.body, &meta)
        .map_err(|e| Error::Format(e.to_string()))?;
    writeln!(side.body)?;
    write_all(&[csv, side])
}

pub fn benchmark(s: &Settings) -> Result<()> {
    let hp = s.hyperparams()?;
    let seed = s.seed()?;
    let out_dir = s.path("out-dir")?.to_path_buf();
    let hash = s.config_hash();
    let variants = s.variants()?;
    let resolution: usize = s.or("grid-resolution", 50)?;
    if resolution == 1 {
        return Err(Error::InvalidInput("grid-resolution must be 0 or at least 2".into()));
    }
    let (data, src) = if s.raw("generator").is_some() {
        let src = source(s, true)?;
        let sim = generate(&src, derive_seed(seed, &[0xDA7A]))?;
        (sim.to_dataset(), Some((src, sim)))
    } else {
        (load_input(s)?, None)
    };
    let roles = roles(s, &data, None)?;
    let mut cfg = CvConfig::new(variants.clone(), hp.clone(), seed);
    cfg.repetitions = s.or("repetitions", 5)?;
    cfg.folds = s.or("folds", 5)?;
    cfg.workers = s.workers()?;
    cfg.roles = Some(roles.clone());
    cfg.verbose = s.verbose()?;
    let friedman = matches!(src, Some((Source::Friedman(_), _)));
    cfg.keep_min_phi = friedman;
    if cfg.folds < 2 || cfg.folds > data.n_rows() {
        return Err(Error::InvalidInput(format!(
            "folds must be between 2 and {}",
            data.n_rows()
        )));
    }

    let report = cross_validate(&data, &cfg)?;
    let mut outputs = Vec::new();
    let mut long = Output::new(out_dir.join("cv_records.csv"), seed, &hash)?;
    report.write_long_csv(&mut long.body)?;
    outputs.push(long);
    let mut summary = Output::new(out_dir.join("cv_summary.csv"), seed, &hash)?;
    report.write_summary_csv(&mut summary.body)?;
    outputs.push(summary);
    let mut acc = Output::new(out_dir.join("cv_acceptance.csv"), seed, &hash)?;
    report.write_acceptance_csv(&mut acc.body)?;
    outputs.push(acc);
    if friedman {
        let names: Vec<String> = roles.gp.iter().map(|&j| data.names[j].clone()).collect();
        let mut phi = Output::new(out_dir.join("min_phi.csv"), seed, &hash)?;
        report.write_min_phi_csv(&mut phi.body, &names)?;
        outputs.push(phi);
    }
    if let Some((src, sim)) = &src {
        outputs.push(sim_csv(sim, seed, &hash, out_dir.join("data.csv"))?);
        if let (Source::Benchmark(spec), true) = (src, resolution >= 2) {
            outputs.push(surface(&data, spec, &cfg, resolution, &hash, out_dir.join("surface.csv"))?);
        }
    }
    write_all(&outputs)?;
    for &v in &variants {
        eprintln!(
            "variant {v}: median rmse {:.4}, median crps {:.4}",
            report.median(v, gpbart::evaluate::Metric::Rmse),
            report.median(v, gpbart::evaluate::Metric::Crps)
        );
    }
    Ok(())
}

/// Posterior-mean surface of every variant over `[-1, 1]^2`, fitted to the
/// full data set. One row per grid point, one column per variant.
fn surface(
    data: &Dataset,
    spec: &BenchmarkSpec,
    cfg: &CvConfig,
    resolution: usize,
    hash: &str,
    path: PathBuf,
) -> Result<Output> {
    let grid = grid_design(resolution, -1.0, 1.0)?;
    let mut columns = Vec::new();
    for (vi, &v) in cfg.variants.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0x5EF, vi as u64]));
        let model = fit_dataset(data, &cfg.hyperparams, v, cfg.roles.as_ref(), &RunOptions::default(), &mut rng)?;
        columns.push(model.predict(&grid, 1, &mut rng)?.mean);
    }
    let mut out = Output::new(path, cfg.seed, hash)?;
    let w = &mut out.body;
    write!(w, "x1,x2,region_mean")?;
    for v in &cfg.variants {
        write!(w, ",{v}")?;
    }
    writeln!(w)?;
    for i in 0..grid.n_rows() {
        let (a, b) = (grid.get(i, 0), grid.get(i, 1));
        write!(w, "{},{},{}", format_float(a), format_float(b), format_float(benchmark_mean(spec, a, b)))?;
        for c in &columns {
            write!(w, ",{}", format_float(c[i]))?;
        }
        writeln!(w)?;
    }
    Ok(out)
}
