//! Command-line front end: configuration loading, subcommand dispatch,
//! CSV emission and deterministic run manifests.
//!
//! Exit codes: 0 on success (and PASS for verification runs), 1 when a
//! verification verdict is FAIL, 2 on configuration or usage errors.
//! Outputs are byte-identical across runs and worker counts for a
//! fixed `(config, seed)`: paths are indexed, per-path work is pure,
//! and reductions happen in ascending path order.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};

use mildsde::coefficients::CoeffTarget;
use mildsde::config::{RunConfig, TargetSpec};
use mildsde::faadibruno;
use mildsde::norms;
use mildsde::solver::SolveContext;
use mildsde::verify::{self, plan, Problem};

pub const COLUMNS_VERSION: &str = "v1";

#[derive(Parser, Debug)]
#[command(
    name = "mildsde",
    version,
    about = "Spectral jump-diffusion simulator with pathwise sensitivities"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum VerifyKind {
    Gateaux,
    Frechet,
    Higher,
    Lipschitz,
    Contraction,
    Chainrule,
    Plan,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate the state equation over a path ensemble.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Override the configured path count.
        #[arg(long)]
        paths: Option<u64>,
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Stream every grid point instead of only the final state.
        #[arg(long)]
        full_paths: bool,
    },
    /// Solve the sensitivity system and report the derivative paths.
    Derivative {
        #[arg(long)]
        config: PathBuf,
        /// Sensitivity order (number of directions).
        #[arg(long)]
        order: Option<usize>,
        #[arg(long)]
        paths: Option<u64>,
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one of the regularity checks; exits 0 iff it passes.
    Verify {
        #[arg(value_enum)]
        which: VerifyKind,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        paths: Option<u64>,
        /// Comma-separated ε ladder, overriding the config.
        #[arg(long)]
        epsilons: Option<String>,
        #[arg(long)]
        order: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Dump the set-partition term table for one order.
    Partitions {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Estimate the norm battery over a solved ensemble.
    Norms {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        paths: Option<u64>,
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Environment variable consulted for the default seed when neither
/// `--seed` nor the config provide one.
pub const SEED_ENV: &str = "MILDSDE_SEED";

fn env_seed() -> Option<u64> {
    std::env::var(SEED_ENV).ok().and_then(|s| s.parse().ok())
}

struct LoadedConfig {
    config: RunConfig,
    sha256: String,
    effective_seed: u64,
}

fn load_config(path: &Path, seed_flag: Option<u64>) -> Result<LoadedConfig, String> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
    let config = RunConfig::parse(&text).map_err(|e| format!("config error: {e}"))?;
    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    let sha256 = hex_string(&hasher.finalize());
    let effective_seed = seed_flag.or(config.seed).or_else(env_seed).unwrap_or(1);
    Ok(LoadedConfig {
        config,
        sha256,
        effective_seed,
    })
}

fn hex_string(bytes: &[u8]) -> String {
    let mut out = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        let _ = write!(out, "{b:02x}");
    }
    out
}

fn write_outputs(
    out: &Path,
    csv: &str,
    subcommand: &str,
    config_sha: &str,
    seed: u64,
) -> Result<(), String> {
    std::fs::write(out, csv).map_err(|e| format!("cannot write {}: {e}", out.display()))?;
    let manifest = format!(
        "tool=mildsde {}\nsubcommand={}\nconfig_sha256={}\nseed={}\ncolumns={}\n",
        env!("CARGO_PKG_VERSION"),
        subcommand,
        config_sha,
        seed,
        COLUMNS_VERSION
    );
    let manifest_path = manifest_path(out);
    std::fs::write(&manifest_path, manifest)
        .map_err(|e| format!("cannot write {}: {e}", manifest_path.display()))?;
    Ok(())
}

pub fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest");
    out.with_file_name(name)
}

fn in_pool<F: FnOnce() -> R + Send, R: Send>(threads: Option<usize>, job: F) -> Result<R, String> {
    match threads {
        None => Ok(job()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| format!("cannot build thread pool: {e}"))?;
            Ok(pool.install(job))
        }
    }
}

fn format_components(prefix: &str, values: &[f64]) -> String {
    let mut row = String::from(prefix);
    for v in values {
        let _ = write!(row, ",{v}");
    }
    row
}

fn simulate_csv(problem: &Problem, paths: u64, full: bool) -> Result<String, String> {
    use rayon::prelude::*;
    let d = problem.dim();
    let mut header = String::from("path_index,t,blowup");
    for k in 0..d {
        let _ = write!(header, ",c{k}");
    }
    header.push('\n');
    let rows: Vec<String> = (0..paths)
        .into_par_iter()
        .map(|path| -> Result<String, String> {
            let noise = problem.noise_for(path).map_err(|e| e.to_string())?;
            let ctx = SolveContext::new(&problem.op, &problem.set, &problem.marks, &noise)
                .map_err(|e| e.to_string())?;
            let sample = ctx.solve_mild(&problem.u0).map_err(|e| e.to_string())?;
            let blow = sample.is_blowup() as u8;
            let mut out = String::new();
            if full {
                for (i, &t) in sample.times().iter().enumerate() {
                    out.push_str(&format_components(
                        &format!("{path},{t},{blow}"),
                        sample.value(i).coeffs(),
                    ));
                    out.push('\n');
                }
            } else {
                let t = *sample.times().last().unwrap();
                out.push_str(&format_components(
                    &format!("{path},{t},{blow}"),
                    sample.final_value().coeffs(),
                ));
                out.push('\n');
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut csv = header;
    for row in rows {
        csv.push_str(&row);
    }
    Ok(csv)
}

fn subset_label(mask: u32) -> String {
    let elems: Vec<String> = (0..32)
        .filter(|b| mask & (1 << b) != 0)
        .map(|b| (b + 1).to_string())
        .collect();
    elems.join("+")
}

fn derivative_csv(problem: &Problem, order: usize, paths: u64) -> Result<String, String> {
    use rayon::prelude::*;
    let d = problem.dim();
    let dirs = verify::unit_directions(d, order, problem.seed, false);
    let mut header = String::from("path_index,subset,t");
    for k in 0..d {
        let _ = write!(header, ",c{k}");
    }
    header.push('\n');
    let rows: Vec<String> = (0..paths)
        .into_par_iter()
        .map(|path| -> Result<String, String> {
            let noise = problem.noise_for(path).map_err(|e| e.to_string())?;
            let ctx = SolveContext::new(&problem.op, &problem.set, &problem.marks, &noise)
                .map_err(|e| e.to_string())?;
            let system = ctx
                .solve_system(&problem.u0, &dirs)
                .map_err(|e| e.to_string())?;
            let t = *system.base().times().last().unwrap();
            let mut out = format_components(
                &format!("{path},base,{t}"),
                system.base().final_value().coeffs(),
            );
            out.push('\n');
            for mask in 1u32..(1 << order) {
                let p = system.path(mask).expect("all subsets solved");
                out.push_str(&format_components(
                    &format!("{path},{},{t}", subset_label(mask)),
                    p.final_value().coeffs(),
                ));
                out.push('\n');
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut csv = header;
    for row in rows {
        csv.push_str(&row);
    }
    Ok(csv)
}

fn partitions_csv(n: usize) -> Result<String, String> {
    let parts = faadibruno::set_partitions(n).map_err(|e| e.to_string())?;
    // multiplicity of each block-size multiset, for the grouped view
    use std::collections::BTreeMap;
    let mut multiplicity: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
    for p in &parts {
        let mut sizes = p.block_sizes();
        sizes.sort_unstable();
        *multiplicity.entry(sizes).or_insert(0) += 1;
    }
    let mut csv = String::from("n,index,partition,block_sizes,blocks,grouped_multiplicity\n");
    for (idx, p) in parts.iter().enumerate() {
        let mut sizes = p.block_sizes();
        sizes.sort_unstable();
        let mult = multiplicity[&sizes];
        let sizes_str = sizes
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join("|");
        let _ = writeln!(
            csv,
            "{n},{idx},{},{sizes_str},{},{mult}",
            p.display_one_based(),
            p.block_count()
        );
    }
    Ok(csv)
}

fn norms_csv(config: &RunConfig, problem: &Problem, paths: u64) -> Result<String, String> {
    use rayon::prelude::*;
    let window = config.effective_window();
    let p = config.p;
    let q = config.q;

    struct PerPath {
        sup: f64,
        /// inner ν integrals of |G(u_-)| at exponents q, 2 and p
        inner_q: f64,
        inner_l2: f64,
        inner_lp: f64,
        /// split inners (g1 at exponent 2, g2 at exponent p)
        split: Option<(f64, f64)>,
    }

    let quad: Vec<(f64, f64)> = problem.marks.quadrature().to_vec();
    let lambda = problem.marks.intensity;
    let per_path: Vec<PerPath> = (0..paths)
        .into_par_iter()
        .map(|path| -> Result<PerPath, String> {
            let noise = problem.noise_for(path).map_err(|e| e.to_string())?;
            let ctx = SolveContext::new(&problem.op, &problem.set, &problem.marks, &noise)
                .map_err(|e| e.to_string())?;
            let sample = ctx.solve_mild(&problem.u0).map_err(|e| e.to_string())?;
            let sup = sample.sup_norm_window(window.0, window.1);
            // one pass over (cell, mark node): accumulate the ν
            // integrals of |G(u_-)| at every needed exponent and, when
            // configured, of the split components
            let split_jumps = problem.set.jump_split();
            let mut acc_q = 0.0;
            let mut acc_l2 = 0.0;
            let mut acc_lp = 0.0;
            let mut acc_split = split_jumps.map(|_| (0.0f64, 0.0f64));
            for i in 0..sample.times().len() - 1 {
                let t = sample.times()[i];
                if t < window.0 || t >= window.1 {
                    continue;
                }
                let cell = lambda * (sample.times()[i + 1] - t);
                let state = sample.left_limit(i);
                for &(z, w) in &quad {
                    let g = problem.set.g(t, z, state).norm();
                    acc_q += cell * w * g.powf(q);
                    acc_l2 += cell * w * g * g;
                    acc_lp += cell * w * g.powf(p);
                    if let (Some((a1, a2)), Some((g1, g2))) = (acc_split.as_mut(), split_jumps)
                    {
                        let n1 = g1.eval(t, z, state).norm();
                        let n2 = g2.eval(t, z, state).norm();
                        *a1 += cell * w * n1 * n1;
                        *a2 += cell * w * n2.powf(p);
                    }
                }
            }
            Ok(PerPath {
                sup,
                inner_q: acc_q.powf(1.0 / q),
                inner_l2: acc_l2.sqrt(),
                inner_lp: acc_lp.powf(1.0 / p),
                split: acc_split.map(|(a1, a2)| (a1.sqrt(), a2.powf(1.0 / p))),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;

    let sups: Vec<f64> = per_path.iter().map(|pp| pp.sup).collect();
    let mut csv = String::from("name,p,window_t0,window_t1,estimate,std_error,paths\n");

    let sp = norms::sp_norm_from_sups(&sups, p, problem.seed).map_err(|e| e.to_string())?;
    csv.push_str(&sp.csv_row("sp_u", window));
    csv.push('\n');

    let inner_q: Vec<f64> = per_path.iter().map(|pp| pp.inner_q).collect();
    let lpq = norms::sp_norm_from_sups(&inner_q, p, problem.seed ^ 1).map_err(|e| e.to_string())?;
    csv.push_str(&lpq.csv_row("lpq_g", window));
    csv.push('\n');

    // G^p of the jump field; for p in (1,2) this needs the configured
    // split and is an upper bound for the infimum over splits
    let has_split = per_path.first().map_or(false, |pp| pp.split.is_some());
    let gp = if p > 1.0 && p < 2.0 {
        if has_split {
            let a: Vec<f64> = per_path.iter().map(|pp| pp.split.unwrap().0).collect();
            let b: Vec<f64> = per_path.iter().map(|pp| pp.split.unwrap().1).collect();
            Some(norms::gp_norm_from_inners(&a, &b, true, p, problem.seed ^ 2))
        } else {
            eprintln!(
                "norms: skipping gp_g (p = {p} in (1,2) and no g_split configured)"
            );
            None
        }
    } else {
        let a: Vec<f64> = per_path.iter().map(|pp| pp.inner_l2).collect();
        let b: Vec<f64> = per_path.iter().map(|pp| pp.inner_lp).collect();
        Some(norms::gp_norm_from_inners(&a, &b, false, p, problem.seed ^ 2))
    };
    if let Some(gp) = gp {
        let (stat, branch) = gp.map_err(|e| e.to_string())?;
        csv.push_str(&stat.csv_row(&format!("gp_g[{}]", branch.label()), window));
        csv.push('\n');
    }

    // kappa audit of the deterministic bound pair (explicit split
    // bounds when configured, canonical halves otherwise)
    let deltas: Vec<f64> = (0..4)
        .map(|k| problem.t_final / 2f64.powi(k + 1))
        .collect();
    let set = &problem.set;
    let rows = norms::kappa_audit(
        |t, z| set.g_split_bounds(t, z).0,
        |t, z| set.g_split_bounds(t, z).1,
        lambda,
        &quad,
        problem.t_final,
        &deltas,
        p,
        16,
    );
    for r in rows {
        let _ = writeln!(csv, "kappa_delta,{p},{},{},{},0,1", 0.0, r.delta, r.measured);
    }
    Ok(csv)
}

fn parse_epsilons(spec: &str) -> Result<Vec<f64>, String> {
    spec.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .map_err(|_| format!("bad epsilon '{s}' in --epsilons"))
        })
        .collect()
}

fn run_verify(
    which: VerifyKind,
    loaded: &LoadedConfig,
    paths_flag: Option<u64>,
    epsilons_flag: Option<String>,
    order_flag: Option<usize>,
    out: &Path,
) -> Result<(bool, String), String> {
    let config = &loaded.config;
    if which == VerifyKind::Plan {
        let spec = config
            .plan
            .as_ref()
            .ok_or("config has no [verify] plan_* keys")?;
        let parse =
            |s: &str| plan::parse_rational(s).map_err(|e| format!("plan exponent: {e}"));
        let plan = plan::ExponentPlan {
            n: spec.n,
            m: spec.m,
            p: parse(&spec.p)?,
            q: parse(&spec.q)?,
            p0: match &spec.p0 {
                None => None,
                Some(s) => Some(parse(s)?),
            },
            chain: match &spec.chain {
                None => None,
                Some(items) => Some(
                    items
                        .iter()
                        .map(|s| parse(s))
                        .collect::<Result<Vec<_>, _>>()?,
                ),
            },
        };
        let check = plan::exponent_plan_check(&plan).map_err(|e| e.to_string())?;
        let pass = check.pass;
        let summary = check.binding.clone();
        return Ok((pass, format!("{}# {}\n", check.csv(), summary)));
    }

    let problem = config
        .build_problem(Some(loaded.effective_seed))
        .map_err(|e| format!("config error: {e}"))?;
    let paths = paths_flag.unwrap_or(config.paths);
    let epsilons = match epsilons_flag {
        Some(spec) => parse_epsilons(&spec)?,
        None => config.epsilons.clone(),
    };
    let order = order_flag.unwrap_or(config.order);
    let p = config.p;
    let q = config.q;
    let tol = config.tol_abs;
    let dir_seed = config.direction_seed.unwrap_or(problem.seed ^ 0xd17);

    let (pass, csv) = match which {
        VerifyKind::Gateaux => {
            let h = verify::unit_directions(problem.dim(), 1, dir_seed, false)
                .pop()
                .unwrap();
            let table = verify::gateaux_test(&problem, &h, &epsilons, p, paths, tol)
                .map_err(|e| e.to_string())?;
            (table.pass, table.csv())
        }
        VerifyKind::Frechet => {
            let dirs =
                verify::unit_directions(problem.dim(), config.directions, dir_seed, true);
            let table = verify::frechet_test(&problem, &dirs, &epsilons, p, q, paths, tol)
                .map_err(|e| e.to_string())?;
            (table.pass, table.csv())
        }
        VerifyKind::Higher => {
            let dirs = verify::unit_directions(problem.dim(), order, dir_seed, false);
            let table = verify::higher_order_test(&problem, &dirs, &epsilons, p, q, paths, tol)
                .map_err(|e| e.to_string())?;
            (table.pass, table.csv())
        }
        VerifyKind::Lipschitz => {
            let table =
                verify::lipschitz_test(&problem, 1, &config.magnitudes, p, paths)
                    .map_err(|e| e.to_string())?;
            (table.pass, table.csv())
        }
        VerifyKind::Contraction => {
            let table = verify::contraction_diagnostic(&problem, &config.t0_ladder, p)
                .map_err(|e| e.to_string())?;
            (table.pass, table.csv())
        }
        VerifyKind::Chainrule => {
            let dirs = verify::unit_directions(problem.dim(), order + 1, dir_seed, false);
            let target = match config.target {
                TargetSpec::Drift => CoeffTarget::Drift,
                TargetSpec::Diffusion => CoeffTarget::Diffusion,
                TargetSpec::Jump => CoeffTarget::Jump,
            };
            let table =
                verify::chainrule_test(&problem, &dirs, &epsilons, target, p, paths, tol)
                    .map_err(|e| e.to_string())?;
            (table.pass, table.csv())
        }
        VerifyKind::Plan => unreachable!(),
    };
    let _ = out;
    Ok((pass, csv))
}

/// Execute the CLI; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // clap handles --help/--version with success exit codes
            let code = if e.exit_code() == 0 { 0 } else { 2 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(msg) => {
            eprintln!("error: {msg}");
            2
        }
    }
}

fn dispatch(cli: Cli) -> Result<i32, String> {
    match cli.command {
        Command::Simulate {
            config,
            paths,
            threads,
            seed,
            out,
            full_paths,
        } => {
            let loaded = load_config(&config, seed)?;
            let problem = loaded
                .config
                .build_problem(Some(loaded.effective_seed))
                .map_err(|e| format!("config error: {e}"))?;
            let m = paths.unwrap_or(loaded.config.paths);
            let csv = in_pool(threads, || simulate_csv(&problem, m, full_paths))??;
            let out = out.unwrap_or_else(|| default_out(&loaded.config, "simulate"));
            write_outputs(&out, &csv, "simulate", &loaded.sha256, loaded.effective_seed)?;
            println!("simulate: {m} paths -> {}", out.display());
            Ok(0)
        }
        Command::Derivative {
            config,
            order,
            paths,
            threads,
            seed,
            out,
        } => {
            let loaded = load_config(&config, seed)?;
            let problem = loaded
                .config
                .build_problem(Some(loaded.effective_seed))
                .map_err(|e| format!("config error: {e}"))?;
            let n = order.unwrap_or(loaded.config.order);
            let m = paths.unwrap_or(loaded.config.paths);
            let csv = in_pool(threads, || derivative_csv(&problem, n, m))??;
            let out = out.unwrap_or_else(|| default_out(&loaded.config, "derivative"));
            write_outputs(
                &out,
                &csv,
                "derivative",
                &loaded.sha256,
                loaded.effective_seed,
            )?;
            println!("derivative: order {n}, {m} paths -> {}", out.display());
            Ok(0)
        }
        Command::Verify {
            which,
            config,
            seed,
            paths,
            epsilons,
            order,
            out,
            threads,
        } => {
            let loaded = load_config(&config, seed)?;
            let out = out.unwrap_or_else(|| default_out(&loaded.config, "verify"));
            let (pass, csv) = in_pool(threads, || {
                run_verify(which, &loaded, paths, epsilons, order, &out)
            })??;
            let name = format!("verify {}", verify_name(which));
            write_outputs(&out, &csv, &name, &loaded.sha256, loaded.effective_seed)?;
            println!(
                "{name}: {} -> {}",
                if pass { "PASS" } else { "FAIL" },
                out.display()
            );
            Ok(if pass { 0 } else { 1 })
        }
        Command::Partitions { n, out } => {
            let csv = partitions_csv(n)?;
            let out = out.unwrap_or_else(|| PathBuf::from("mildsde_partitions.csv"));
            write_outputs(&out, &csv, "partitions", "none", 0)?;
            println!("partitions: n = {n} -> {}", out.display());
            Ok(0)
        }
        Command::Norms {
            config,
            paths,
            threads,
            seed,
            out,
        } => {
            let loaded = load_config(&config, seed)?;
            let problem = loaded
                .config
                .build_problem(Some(loaded.effective_seed))
                .map_err(|e| format!("config error: {e}"))?;
            let m = paths.unwrap_or(loaded.config.paths);
            let csv = in_pool(threads, || norms_csv(&loaded.config, &problem, m))??;
            let out = out.unwrap_or_else(|| default_out(&loaded.config, "norms"));
            write_outputs(&out, &csv, "norms", &loaded.sha256, loaded.effective_seed)?;
            println!("norms: {m} paths -> {}", out.display());
            Ok(0)
        }
    }
}

fn verify_name(which: VerifyKind) -> &'static str {
    match which {
        VerifyKind::Gateaux => "gateaux",
        VerifyKind::Frechet => "frechet",
        VerifyKind::Higher => "higher",
        VerifyKind::Lipschitz => "lipschitz",
        VerifyKind::Contraction => "contraction",
        VerifyKind::Chainrule => "chainrule",
        VerifyKind::Plan => "plan",
    }
}

fn default_out(config: &RunConfig, sub: &str) -> PathBuf {
    config
        .out
        .clone()
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(format!("mildsde_{sub}.csv")))
}

