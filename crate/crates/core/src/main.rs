use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use resm::diagnostics::{
    conflict_mc, load_delta_sets, outlier_profile, rank_profile, sparsity_profile,
    ConflictEstimate, DEFAULT_CONFLICT_EPSILON,
};
use resm::fixtures::{write_fixtures, FixtureSpec};
use resm::store::validate_compat;
use resm::{run_merge, Dtype, Error, LazyCheckpoint, MergePlan, Result, TensorSource};

#[derive(Parser)]
#[command(
    name = "resm",
    version,
    about = "Merge fine-tuned checkpoints that share a base model"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the merge described by a JSON plan.
    Merge {
        plan: PathBuf,
        /// Layer worker count; overrides the plan.
        #[arg(long)]
        threads: Option<usize>,
        /// Also print the merge report.
        #[arg(long)]
        stdout: bool,
    },
    /// Rank, outlier and sparsity profiles of task vectors.
    Inspect {
        /// Base checkpoint followed by one or more fine-tuned checkpoints.
        #[arg(required = true, num_args = 2..)]
        paths: Vec<PathBuf>,
        #[arg(long)]
        ranks: bool,
        #[arg(long, default_value_t = 0.95)]
        energy: f64,
        #[arg(long)]
        outliers: bool,
        #[arg(long, default_value_t = 3.0)]
        sigma: f64,
        /// Also report singular values above mean + sigma·std of each spectrum.
        #[arg(long)]
        mask_singular_outliers: bool,
        #[arg(long)]
        sparsity: bool,
        #[arg(long, default_value_t = 0.1)]
        epsilon: f64,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Monte-Carlo estimate of alignment between random unit directions.
    SimulateConflict {
        /// Comma-separated dimensions.
        #[arg(long, value_delimiter = ',', required = true)]
        k: Vec<usize>,
        /// Conflict threshold, or `inv-sqrt-k` for 1/sqrt(k) per row.
        #[arg(long, default_value_t = DEFAULT_CONFLICT_EPSILON.to_string())]
        epsilon: String,
        #[arg(long, default_value_t = 100_000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Write a synthetic base checkpoint and fine-tuned variants.
    GenFixtures {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 3)]
        models: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        rank: usize,
        #[arg(long)]
        orthogonal: bool,
        #[arg(long, default_value_t = 3.0)]
        delta_scale: f64,
        #[arg(long, default_value_t = 0.0)]
        sparsity: f64,
        #[arg(long, default_value_t = 0.002)]
        outlier_fraction: f64,
        #[arg(long, default_value_t = 20.0)]
        outlier_scale: f64,
        #[arg(long, default_value = "F32")]
        dtype: String,
    },
}

#[derive(Args)]
struct OutputArgs {
    /// Write the JSON report to this file.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the JSON report to standard output.
    #[arg(long)]
    stdout: bool,
    /// Also write a CSV table.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Also write whitespace-separated (x, y) series into this directory.
    #[arg(long)]
    plot_data: Option<PathBuf>,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    let text =
        serde_json::to_string_pretty(value).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut out = std::io::stdout().lock();
    writeln!(out, "{text}").map_err(|e| Error::Io {
        path: PathBuf::from("<stdout>"),
        source: e,
    })
}

fn emit_json(value: &Value, output: &OutputArgs) -> Result<()> {
    if let Some(path) = &output.out {
        let mut text =
            serde_json::to_vec_pretty(value).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        text.push(b'\n');
        write_file(path, &text)?;
    }
    if output.stdout {
        print_json(value)?;
    }
    Ok(())
}

fn csv_bytes(header: &[&str], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let to_err = |e: csv::Error| Error::InvalidArgument(e.to_string());
    w.write_record(header).map_err(to_err)?;
    for row in rows {
        w.write_record(row).map_err(to_err)?;
    }
    w.into_inner()
        .map_err(|e| Error::InvalidArgument(e.to_string()))
}

fn write_series(dir: &Path, name: &str, points: &[(String, f64)]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let text: String = points.iter().map(|(x, y)| format!("{x} {y}\n")).collect();
    write_file(&dir.join(name), text.as_bytes())
}

fn cmd_merge(plan_path: &Path, threads: Option<usize>, stdout: bool) -> Result<()> {
    let mut plan = MergePlan::load(plan_path)?;
    if threads.is_some() {
        plan.threads = threads;
        plan.validate()?;
    }
    let report = run_merge(&plan)?;
    if stdout {
        print_json(&report)?;
    }
    Ok(())
}

struct InspectArgs<'a> {
    paths: &'a [PathBuf],
    ranks: bool,
    energy: f64,
    outliers: bool,
    sigma: f64,
    mask_singular_outliers: bool,
    sparsity: bool,
    epsilon: f64,
    output: &'a OutputArgs,
}

fn cmd_inspect(args: InspectArgs<'_>) -> Result<()> {
    let all = !(args.ranks || args.outliers || args.sparsity);
    let sources = args
        .paths
        .iter()
        .map(LazyCheckpoint::open)
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&dyn TensorSource> = sources.iter().map(|s| s as &dyn TensorSource).collect();
    validate_compat(&refs)?;
    let deltas = load_delta_sets(refs[0], &refs[1..])?;

    let mut report = serde_json::Map::new();
    let mut rows = Vec::new();
    let mut series = Vec::new();
    if all || args.ranks {
        let profile = rank_profile(&deltas, args.energy)?;
        for (layer, p) in &profile {
            rows.push(vec![
                layer.clone(),
                "mean".into(),
                "effective_rank".into(),
                p.mean.to_string(),
            ]);
            for (i, r) in p.per_model.iter().enumerate() {
                rows.push(vec![
                    layer.clone(),
                    (i + 1).to_string(),
                    "effective_rank".into(),
                    r.to_string(),
                ]);
            }
        }
        series.push((
            "ranks.dat",
            profile
                .iter()
                .map(|(l, p)| (l.clone(), p.mean as f64))
                .collect::<Vec<_>>(),
        ));
        report.insert("energy".into(), json!(args.energy));
        report.insert("ranks".into(), json!(profile));
    }
    if all || args.outliers {
        let profiles = deltas
            .values()
            .map(|set| outlier_profile(set, args.sigma, args.mask_singular_outliers))
            .collect::<Result<Vec<_>>>()?;
        for p in &profiles {
            for (i, m) in p.models.iter().enumerate() {
                let model = (i + 1).to_string();
                rows.push(vec![
                    p.layer.clone(),
                    model.clone(),
                    "outlier_fraction".into(),
                    m.fraction.to_string(),
                ]);
                rows.push(vec![
                    p.layer.clone(),
                    model.clone(),
                    "outlier_mass".into(),
                    m.mass.to_string(),
                ]);
                rows.push(vec![
                    p.layer.clone(),
                    model,
                    "alpha".into(),
                    m.alpha.to_string(),
                ]);
            }
        }
        let by_layer: BTreeMap<_, _> = profiles
            .into_iter()
            .map(|p| (p.layer.clone(), p.models))
            .collect();
        report.insert("sigma".into(), json!(args.sigma));
        report.insert("outliers".into(), json!(by_layer));
    }
    if all || args.sparsity {
        let omega = sparsity_profile(&deltas, args.epsilon)?;
        for (layer, w) in &omega {
            rows.push(vec![
                layer.clone(),
                "all".into(),
                "omega".into(),
                w.to_string(),
            ]);
        }
        series.push((
            "sparsity.dat",
            omega.iter().map(|(l, w)| (l.clone(), *w)).collect(),
        ));
        report.insert("epsilon".into(), json!(args.epsilon));
        report.insert("sparsity".into(), json!(omega));
    }

    let output = args.output;
    if output.out.is_none() && !output.stdout {
        print_json(&report)?;
    } else {
        emit_json(&Value::Object(report), output)?;
    }
    if let Some(path) = &output.csv {
        write_file(
            path,
            &csv_bytes(&["layer", "model", "metric", "value"], &rows)?,
        )?;
    }
    if let Some(dir) = &output.plot_data {
        for (name, points) in series {
            write_series(dir, name, &points)?;
        }
    }
    Ok(())
}

fn parse_epsilon(text: &str, k: usize) -> Result<f64> {
    if text == "inv-sqrt-k" {
        return Ok(1.0 / (k as f64).sqrt());
    }
    text.parse::<f64>().map_err(|_| {
        Error::InvalidArgument(format!(
            "epsilon `{text}` is neither a number nor `inv-sqrt-k`"
        ))
    })
}

fn conflict_table(rows: &[ConflictEstimate]) -> String {
    let mut out = format!(
        "{:>6} {:>9} {:>9} {:>12} {:>9} {:>5} {:>5}\n",
        "k", "epsilon", "p_hat", "E|u.v|", "bound", "abs", "p"
    );
    let verdict = |ok: bool| if ok { "pass" } else { "FAIL" };
    for r in rows {
        out.push_str(&format!(
            "{:>6} {:>9.5} {:>9.5} {:>12.6} {:>9.5} {:>5} {:>5}\n",
            r.k,
            r.epsilon_conflict,
            r.p_hat,
            r.expected_abs_dot,
            r.bound,
            verdict(r.abs_pass),
            verdict(r.p_pass)
        ));
    }
    out
}

fn cmd_simulate(
    ks: &[usize],
    epsilon: &str,
    trials: usize,
    seed: u64,
    output: &OutputArgs,
) -> Result<()> {
    if ks.is_empty() {
        return Err(Error::InvalidArgument(
            "--k needs at least one dimension".to_string(),
        ));
    }
    let rows = ks
        .iter()
        .map(|&k| conflict_mc(k, parse_epsilon(epsilon, k)?, trials, seed))
        .collect::<Result<Vec<_>>>()?;
    if output.out.is_none() && !output.stdout {
        print!("{}", conflict_table(&rows));
    } else {
        emit_json(
            &json!({ "trials": trials, "seed": seed, "rows": rows }),
            output,
        )?;
    }
    if let Some(path) = &output.csv {
        let header = [
            "k",
            "epsilon",
            "trials",
            "p_hat",
            "p_se",
            "expected_abs_dot",
            "abs_se",
            "bound",
            "abs_pass",
            "p_pass",
        ];
        let table: Vec<Vec<String>> = rows
            .iter()
            .map(|r| {
                vec![
                    r.k.to_string(),
                    r.epsilon_conflict.to_string(),
                    r.trials.to_string(),
                    r.p_hat.to_string(),
                    r.p_se.to_string(),
                    r.expected_abs_dot.to_string(),
                    r.abs_se.to_string(),
                    r.bound.to_string(),
                    r.abs_pass.to_string(),
                    r.p_pass.to_string(),
                ]
            })
            .collect();
        write_file(path, &csv_bytes(&header, &table)?)?;
    }
    if let Some(dir) = &output.plot_data {
        let series = |f: fn(&ConflictEstimate) -> f64| -> Vec<(String, f64)> {
            rows.iter().map(|r| (r.k.to_string(), f(r))).collect()
        };
        write_series(dir, "expected_abs_dot.dat", &series(|r| r.expected_abs_dot))?;
        write_series(dir, "p_hat.dat", &series(|r| r.p_hat))?;
        write_series(dir, "bound.dat", &series(|r| r.bound))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Merge {
            plan,
            threads,
            stdout,
        } => cmd_merge(&plan, threads, stdout),
        Command::Inspect {
            paths,
            ranks,
            energy,
            outliers,
            sigma,
            mask_singular_outliers,
            sparsity,
            epsilon,
            output,
        } => cmd_inspect(InspectArgs {
            paths: &paths,
            ranks,
            energy,
            outliers,
            sigma,
            mask_singular_outliers,
            sparsity,
            epsilon,
            output: &output,
        }),
        Command::SimulateConflict {
            k,
            epsilon,
            trials,
            seed,
            output,
        } => cmd_simulate(&k, &epsilon, trials, seed, &output),
        Command::GenFixtures {
            out_dir,
            models,
            seed,
            rank,
            orthogonal,
            delta_scale,
            sparsity,
            outlier_fraction,
            outlier_scale,
            dtype,
        } => {
            let spec = FixtureSpec {
                n_models: models,
                seed,
                rank,
                orthogonal_deltas: orthogonal,
                delta_scale,
                sparsity,
                outlier_fraction,
                outlier_scale,
                dtype: Dtype::parse(&dtype.to_uppercase())
                    .map_err(|_| Error::InvalidArgument(format!("unknown dtype `{dtype}`")))?,
            };
            write_fixtures(&out_dir, &spec).map(|_| ())
        }
    }
}

fn error_line(err: &Error) -> String {
    let mut obj = json!({
        "error": err.kind(),
        "exit_code": err.exit_code(),
        "message": err.to_string(),
    });
    if let Error::Layer { layer, .. } = err {
        obj["layer"] = json!(layer);
    }
    obj.to_string()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MERGE_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let line = json!({
                "error": "usage",
                "exit_code": 2,
                "message": e.to_string().lines().next().unwrap_or_default(),
            });
            eprintln!("{line}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{}", error_line(&err));
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
