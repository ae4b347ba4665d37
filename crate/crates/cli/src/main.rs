use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand};
use serde_json::{json, Value};
use syncgame::discounted::{solve_ne_on, trace_equilibrium_curve};
use syncgame::dynamics::energy;
use syncgame::ergodic::{self, lens, periodic_orbit, solve_finite_horizon, turnpike_fraction};
use syncgame::integrate::{integrate, IntegrateOptions};
use syncgame::io::{self, RunManifest, Table};
use syncgame::mfc::{constant_control_cost, suboptimality_thresholds};
use syncgame::model::{critical_coupling, stationary_equilibria};
use syncgame::nplayer::{deviation_gain, simulate_nplayer, SimConfig, DEFAULT_SEED};
use syncgame::nstate::{solve_nstate, NStateModel};
use syncgame::value::{flows_from_trajectory, ControlFlow};
use syncgame::{Error, ModelParams, PhasePoint};

#[derive(Parser, Debug)]
#[command(name = "syncgame", version, about = "Two-state synchronization game solver")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug)]
struct Global {
    /// Discount rate; 0 selects the ergodic problem.
    #[arg(long, global = true, allow_hyphen_values = true)]
    beta: Option<f64>,
    /// Noise rate.
    #[arg(long, global = true, allow_hyphen_values = true)]
    sigma2: Option<f64>,
    /// Coupling strength.
    #[arg(long, global = true, allow_hyphen_values = true)]
    kappa: Option<f64>,
    /// Directory for output files.
    #[arg(long, global = true, env = "SYNCGAME_OUT_DIR")]
    out_dir: Option<PathBuf>,
    /// Print machine-readable JSON on stdout.
    #[arg(long, global = true)]
    json: bool,
    /// Master seed for stochastic runs.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// key=value file read before explicit flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Also write gnuplot scripts next to the data.
    #[arg(long, global = true)]
    plots: bool,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Regime and stationary points.
    Equilibria,
    /// Vector field sampled on a grid.
    PhaseDiagram {
        #[arg(long, default_value = "41x41", value_parser = parse_grid)]
        grid: (usize, usize),
        /// Half-width of the gap axis.
        #[arg(long)]
        a_max: Option<f64>,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Forward or backward integration from one point.
    Trajectory {
        #[arg(long, allow_hyphen_values = true)]
        a0: f64,
        #[arg(long, allow_hyphen_values = true)]
        q0: f64,
        /// Final time; negative values integrate backward.
        #[arg(long, default_value_t = 50.0, allow_hyphen_values = true)]
        t_end: f64,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Stable-manifold branches of the discounted problem.
    Curve,
    /// Discounted equilibria from an initial law.
    Ne {
        #[arg(long, allow_hyphen_values = true)]
        q0: f64,
    },
    /// Periodic equilibria of the ergodic problem.
    Ergodic {
        #[command(subcommand)]
        what: ErgodicCmd,
    },
    /// Finite-horizon ergodic equilibria with zero terminal value.
    FiniteHorizon {
        #[arg(long, allow_hyphen_values = true)]
        q0: f64,
        #[arg(long)]
        horizon: f64,
        /// Radius used for the turnpike fraction.
        #[arg(long, default_value_t = 0.05)]
        delta: f64,
    },
    /// Control-problem thresholds and constant-control costs.
    Mfc {
        /// Constant gap to price.
        #[arg(long, allow_hyphen_values = true)]
        a: Option<f64>,
    },
    /// Finite-population simulation under the equilibrium control.
    Nplayer {
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, allow_hyphen_values = true)]
        q0: f64,
        #[arg(long)]
        horizon: Option<f64>,
        /// Replicas for the unilateral deviation gain; 0 skips it.
        #[arg(long, default_value_t = 0)]
        gain_replicas: usize,
    },
    /// N-state circle model.
    Nstate {
        #[arg(long, default_value_t = 2)]
        states: usize,
        #[arg(long, default_value_t = 20.0)]
        horizon: f64,
        #[arg(long, default_value_t = 0.5)]
        theta: f64,
        /// Comma-separated initial law; defaults to a cosine bump.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        p0: Option<Vec<f64>>,
    },
}

#[derive(Subcommand, Debug)]
enum ErgodicCmd {
    Orbit {
        #[arg(long, allow_hyphen_values = true)]
        a0: f64,
    },
    Lens,
    Lambda {
        #[arg(long, allow_hyphen_values = true)]
        a0: f64,
    },
}

fn parse_grid(s: &str) -> Result<(usize, usize), String> {
    let (a, q) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected NAxNQ, got {s}"))?;
    let a: usize = a.trim().parse().map_err(|e| format!("{a}: {e}"))?;
    let q: usize = q.trim().parse().map_err(|e| format!("{q}: {e}"))?;
    if a == 0 || q == 0 {
        return Err("grid sizes must be positive".into());
    }
    Ok((a, q))
}

enum Failure {
    Usage(String),
    Solver(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Solver(e)
    }
}

type Out = Result<Value, Failure>;

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::ParamDomain(_) => "PARAM_DOMAIN",
        Error::Domain(_) => "DOMAIN",
        Error::ModelMismatch(_) => "MODEL_MISMATCH",
        Error::Regime(_) => "REGIME",
        Error::Precondition(_) => "PRECONDITION",
        Error::Stiffness { .. } => "STIFFNESS",
        Error::Numerical(_) => "NUMERICAL",
        Error::SearchFailure(_) => "SEARCH_FAILURE",
        Error::NotPeriodic(_) => "NOT_PERIODIC",
        Error::Io(_) => "IO",
        Error::Csv(_) => "CSV",
        Error::Json(_) => "JSON",
    }
}

/// Parses `key = value` lines; `#` starts a comment.
fn read_config(path: &Path) -> Result<BTreeMap<String, String>, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Usage(format!("config {}: {e}", path.display())))?;
    let mut map = BTreeMap::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("config line {}: expected key=value", no + 1)))?;
        let k = k.trim().replace('_', "-");
        if !["beta", "sigma2", "kappa", "seed", "out-dir"].contains(&k.as_str()) {
            return Err(Failure::Usage(format!(
                "config line {}: unknown key {k}; valid keys are beta, sigma2, kappa, seed, out-dir",
                no + 1
            )));
        }
        map.insert(k, v.trim().to_string());
    }
    Ok(map)
}

struct Ctx {
    params: ModelParams,
    out_dir: PathBuf,
    seed: u64,
    plots: bool,
    manifest: RunManifest,
}

impl Ctx {
    fn from_global(g: &Global, argv: Vec<String>, stochastic: bool) -> Result<Self, Failure> {
        let cfg = match &g.config {
            Some(p) => read_config(p)?,
            None => BTreeMap::new(),
        };
        let num = |flag: Option<f64>, key: &str, default: f64| -> Result<f64, Failure> {
            match (flag, cfg.get(key)) {
                (Some(x), _) => Ok(x),
                (None, Some(s)) => s.parse().map_err(|e| Failure::Usage(format!("config {key}={s}: {e}"))),
                (None, None) => Ok(default),
            }
        };
        let params = ModelParams {
            beta: num(g.beta, "beta", 1.0)?,
            sigma2: num(g.sigma2, "sigma2", 1.0)?,
            kappa: num(g.kappa, "kappa", 1.0)?,
        };
        params.validate()?;
        let seed = match (g.seed, cfg.get("seed")) {
            (Some(s), _) => s,
            (None, Some(s)) => s.parse().map_err(|e| Failure::Usage(format!("config seed={s}: {e}")))?,
            (None, None) => DEFAULT_SEED,
        };
        let out_dir = g
            .out_dir
            .clone()
            .or_else(|| cfg.get("out-dir").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("."));
        let manifest = RunManifest::new(argv, params, stochastic.then_some(seed));
        Ok(Self { params, out_dir, seed, plots: g.plots, manifest })
    }

    fn path(&self, name: &Path) -> PathBuf {
        if name.is_absolute() {
            name.to_path_buf()
        } else {
            self.out_dir.join(name)
        }
    }

    fn table(&mut self, name: impl AsRef<Path>, table: &Table, plot: Option<&str>) -> Result<String, Failure> {
        let path = self.path(name.as_ref());
        table.write(&path)?;
        self.manifest.record(path.clone());
        if let (true, Some(using)) = (self.plots, plot) {
            let gp = path.with_extension("gp");
            let file = path.file_name().unwrap().to_string_lossy();
            let script = format!("set datafile separator ','\nset key autotitle columnhead\nplot '{file}' {using}\n");
            io::write_atomic(&gp, script.as_bytes())?;
            self.manifest.record(gp);
        }
        Ok(path.display().to_string())
    }

    fn json(&mut self, name: &str, value: &Value) -> Result<(), Failure> {
        let path = self.path(Path::new(name));
        io::write_json(&path, value)?;
        self.manifest.record(path);
        Ok(())
    }

    fn finish(mut self, name: &str, started: Instant) -> Result<(), Failure> {
        if self.manifest.outputs.is_empty() {
            return Ok(());
        }
        self.manifest.wall_clock_secs = started.elapsed().as_secs_f64();
        let path = self.out_dir.join(format!("{name}.manifest.json"));
        io::write_json(&path, &self.manifest)?;
        Ok(())
    }
}

const PHASE_PLOT: &str = "using 2:3 with lines";

fn cmd_name(cmd: &Cmd) -> &'static str {
    match cmd {
        Cmd::Equilibria => "equilibria",
        Cmd::PhaseDiagram { .. } => "phase-diagram",
        Cmd::Trajectory { .. } => "trajectory",
        Cmd::Curve => "curve",
        Cmd::Ne { .. } => "ne",
        Cmd::Ergodic { what: ErgodicCmd::Orbit { .. } } => "ergodic-orbit",
        Cmd::Ergodic { what: ErgodicCmd::Lens } => "ergodic-lens",
        Cmd::Ergodic { what: ErgodicCmd::Lambda { .. } } => "ergodic-lambda",
        Cmd::FiniteHorizon { .. } => "finite-horizon",
        Cmd::Mfc { .. } => "mfc",
        Cmd::Nplayer { .. } => "nplayer",
        Cmd::Nstate { .. } => "nstate",
    }
}

fn run(cmd: &Cmd, ctx: &mut Ctx) -> Out {
    let p = ctx.params;
    match cmd {
        Cmd::Equilibria => {
            let reg = critical_coupling(&p)?;
            let pts = stationary_equilibria(&p)?;
            Ok(json!({
                "kappa_c": reg.kappa_c,
                "kappa_spiral": reg.kappa_spiral,
                "kappa_tilde": reg.kappa_tilde,
                "regime": reg.regime,
                "boundary": reg.boundary,
                "points": pts,
            }))
        }
        Cmd::PhaseDiagram { grid, a_max, output } => {
            let a_max = a_max.unwrap_or_else(|| (1.5 * p.a_crit()).max(2.0));
            let t = io::phase_grid_table(&p, a_max, grid.0, grid.1);
            let name = output.clone().unwrap_or_else(|| "phase_diagram.csv".into());
            let file = ctx.table(&name, &t, Some("using 1:2:($3/50):($4/50) with vectors"))?;
            Ok(json!({ "rows": t.rows.len(), "a_max": a_max, "file": file }))
        }
        Cmd::Trajectory { a0, q0, t_end, output } => {
            let tr = integrate(&p, PhasePoint::new(*a0, *q0), (0.0, *t_end), &IntegrateOptions::default())?;
            let name = output.clone().unwrap_or_else(|| "trajectory.csv".into());
            let file = ctx.table(&name, &io::trajectory_table(&p, &tr), Some(PHASE_PLOT))?;
            let last = tr.last();
            Ok(json!({ "stop": tr.stop, "t_end": tr.t_end(), "a_end": last.a, "q_end": last.q, "energy_drift": tr.energy_drift, "file": file }))
        }
        Cmd::Curve => {
            let c = trace_equilibrium_curve(&p)?;
            let mut branches = Vec::new();
            for (k, b) in c.branches.iter().enumerate() {
                let file = ctx.table(format!("curve_branch_{k}.csv"), &io::trajectory_table(&p, &b.trajectory), Some(PHASE_PLOT))?;
                branches.push(json!({ "saddle": b.saddle, "direction": b.direction, "end": b.end, "file": file }));
            }
            let summary = json!({
                "regime": c.regime,
                "branches": branches,
                "monotone": c.monotone,
                "winding_count": c.winding_count,
                "uniqueness_threshold": c.uniqueness_threshold,
                "seed_sensitivity": c.seed_sensitivity,
            });
            ctx.json("curve.json", &summary)?;
            Ok(summary)
        }
        Cmd::Ne { q0 } => {
            let c = trace_equilibrium_curve(&p)?;
            let sols = solve_ne_on(&p, &c, *q0)?;
            let mut list = Vec::new();
            for (k, s) in sols.iter().enumerate() {
                let file = ctx.table(format!("ne_{k}.csv"), &io::trajectory_table(&p, &s.trajectory), Some(PHASE_PLOT))?;
                list.push(json!({ "a_star": s.a_star, "limit": s.limit, "windings": s.windings, "a_star_shooting": s.a_star_shooting, "file": file }));
            }
            let summary = json!({
                "regime": c.regime,
                "branches": c.branches.len(),
                "count": sols.len(),
                "a_star": sols.iter().map(|s| s.a_star).collect::<Vec<_>>(),
                "limits": sols.iter().map(|s| s.limit).collect::<Vec<_>>(),
                "solutions": list,
            });
            ctx.json("ne.json", &summary)?;
            Ok(summary)
        }
        Cmd::Ergodic { what } => ergodic_cmd(what, ctx),
        Cmd::FiniteHorizon { q0, horizon, delta } => {
            let sols = solve_finite_horizon(&p, *q0, *horizon)?;
            let mut list = Vec::new();
            for (k, s) in sols.iter().enumerate() {
                let file = ctx.table(format!("finite_horizon_{k}.csv"), &io::trajectory_table(&p, &s.trajectory), Some(PHASE_PLOT))?;
                list.push(json!({
                    "a0": s.a0,
                    "terminal_a": s.terminal_a,
                    "max_defect": s.max_defect,
                    "turnpike_fraction": turnpike_fraction(&p, &s.trajectory, *delta),
                    "file": file,
                }));
            }
            let summary = json!({ "horizon": horizon, "count": sols.len(), "solutions": list });
            ctx.json("finite_horizon.json", &summary)?;
            Ok(summary)
        }
        Cmd::Mfc { a } => {
            let th = suboptimality_thresholds(&p)?;
            let priced = match a {
                Some(a) => Some(constant_control_cost(&p, *a)?),
                None => None,
            };
            Ok(json!({
                "kappa_c": th.kappa_c,
                "kappa_tilde": th.kappa_tilde,
                "verdict": th.verdict,
                "witness": th.witness,
                "witness_cost": th.witness_cost,
                "a": a,
                "constant_control_cost": priced,
            }))
        }
        Cmd::Nplayer { n, q0, horizon, gain_replicas } => {
            let c = trace_equilibrium_curve(&p)?;
            let sols = solve_ne_on(&p, &c, *q0)?;
            let ne = sols.first().ok_or_else(|| Error::SearchFailure(format!("no equilibrium from q0 = {q0}")))?;
            let dt = 0.01;
            let (control, _) = flows_from_trajectory(&p, &ne.trajectory, dt)?;
            let horizon = horizon.unwrap_or(control.t_end());
            let control = extend_control(control, horizon)?;
            let cfg = SimConfig { n: *n, seed: ctx.seed, horizon, control, record_dt: dt, p0: (1.0 + q0) / 2.0 };
            let flow = simulate_nplayer(&cfg, &p)?;
            let file = ctx.table("nplayer.csv", &io::empirical_table(&flow), Some("using 1:2 with lines"))?;
            let sup_dev = flow
                .times
                .iter()
                .zip(&flow.fraction)
                .map(|(&t, &f)| (f - (1.0 + ne.trajectory.eval(t).q) / 2.0).abs())
                .fold(0.0, f64::max);
            let gain = if *gain_replicas > 0 { Some(deviation_gain(&p, ne, *n, ctx.seed, *gain_replicas)?) } else { None };
            let summary = json!({
                "seed": ctx.seed,
                "n": n,
                "params": p,
                "a_star": ne.a_star,
                "horizon": horizon,
                "sup_deviation": sup_dev,
                "gain": gain.map(|g| json!({ "mean": g.mean, "std_err": g.std_err, "ci_low": g.ci_low, "ci_high": g.ci_high })),
                "file": file,
            });
            ctx.json("nplayer.json", &summary)?;
            Ok(summary)
        }
        Cmd::Nstate { states, horizon, theta, p0 } => {
            let model = NStateModel::new(*states, p)?;
            let p0 = match p0 {
                Some(v) => v.clone(),
                None => {
                    let w: Vec<f64> = model.grid.iter().map(|x| 1.0 + 0.5 * x.cos()).collect();
                    let s: f64 = w.iter().sum();
                    w.iter().map(|x| x / s).collect()
                }
            };
            let (flow, rep) = solve_nstate(&model, &p0, *horizon, *theta)?;
            let file = ctx.table("nstate.csv", &io::nstate_table(&flow), Some(&nstate_plot(*states)))?;
            ctx.json("nstate.json", &json!({ "states": states, "params": p, "report": rep }))?;
            Ok(json!({
                "states": states,
                "converged": rep.converged,
                "iterations": rep.iterations,
                "last_change": rep.history.last(),
                "residual_p": rep.residual_p,
                "residual_a": rep.residual_a,
                "file": file,
            }))
        }
    }
}

fn nstate_plot(n: usize) -> String {
    (0..n).map(|i| format!("using 1:{} with lines", i + 2)).collect::<Vec<_>>().join(", '' ")
}

/// Holds the last gap beyond the end of the equilibrium path.
fn extend_control(c: ControlFlow, horizon: f64) -> Result<ControlFlow, Error> {
    if horizon <= c.t_end() {
        return Ok(c);
    }
    let (mut times, mut a) = (c.times.clone(), c.a.clone());
    times.push(horizon);
    a.push(*a.last().unwrap());
    let out = ControlFlow::new(times, a)?;
    match c.da {
        Some(mut d) => {
            d.push(0.0);
            out.with_derivative(d)
        }
        None => Ok(out),
    }
}

fn ergodic_cmd(what: &ErgodicCmd, ctx: &mut Ctx) -> Out {
    let p = ctx.params;
    if !p.is_ergodic() {
        return Err(Error::ModelMismatch("ergodic subcommands need --beta 0".into()).into());
    }
    match what {
        ErgodicCmd::Orbit { a0 } | ErgodicCmd::Lambda { a0 } => {
            let o = periodic_orbit(&p, *a0)?;
            let (a, pf) = flows_from_trajectory(&p, &o.orbit, 0.002)?;
            let pf = syncgame::dynamics::ProbabilityFlow { period: Some(o.period), ..pf };
            let lambda = ergodic::ergodic_lambda(&a, &pf, &p)?;
            let mut summary = json!({ "a0": a0, "period": o.period, "energy": o.energy, "lambda": lambda, "closure": o.closure, "mean_q": o.mean_q() });
            if matches!(what, ErgodicCmd::Orbit { .. }) {
                let file = ctx.table("orbit.csv", &io::trajectory_table(&p, &o.orbit), Some(PHASE_PLOT))?;
                summary["file"] = json!(file);
                ctx.json("orbit.json", &summary)?;
            }
            Ok(summary)
        }
        ErgodicCmd::Lens => {
            let l = lens(&p)?;
            let mut files = Vec::new();
            for (name, pts) in [("lens_upper.csv", &l.upper), ("lens_lower.csv", &l.lower)] {
                files.push(ctx.table(name, &point_table(&p, pts), Some("using 1:2 with lines"))?);
            }
            let summary = json!({
                "energy_level": l.energy_level,
                "saddles": l.saddles,
                "level_defect": l.level_defect,
                "end_gap": l.end_gap,
                "files": files,
            });
            ctx.json("lens.json", &summary)?;
            Ok(summary)
        }
    }
}

fn point_table(p: &ModelParams, pts: &[PhasePoint]) -> Table {
    let mut t = Table::new(&["a", "q", "p", "E"]);
    for pt in pts {
        t.push(vec![Some(pt.a), Some(pt.q), Some(pt.p()), energy(p, *pt).ok()]);
    }
    t
}

fn render_human(v: &Value) -> String {
    let mut out = String::new();
    match v {
        Value::Object(m) => {
            let w = m.keys().map(String::len).max().unwrap_or(0);
            for (k, x) in m {
                match x {
                    Value::Array(items) if items.iter().any(|i| i.is_object()) => {
                        out.push_str(&format!("{k}:\n"));
                        for i in items {
                            out.push_str(&format!("  {i}\n"));
                        }
                    }
                    Value::String(s) => out.push_str(&format!("{k:<w$}  {s}\n")),
                    _ => out.push_str(&format!("{k:<w$}  {x}\n")),
                }
            }
        }
        _ => out.push_str(&format!("{v}\n")),
    }
    out
}

/// Long flags accepted by the subcommand named in `argv`.
fn valid_flags(argv: &[String]) -> Vec<String> {
    let root = Cli::command();
    let mut cmd = &root;
    for a in argv.iter().skip(1) {
        if let Some(sub) = cmd.find_subcommand(a) {
            cmd = sub;
        }
    }
    let mut flags: Vec<String> = cmd.get_arguments().chain(root.get_arguments()).filter_map(|a| a.get_long()).map(|l| format!("--{l}")).collect();
    flags.sort();
    flags.dedup();
    flags
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            if e.kind() == ErrorKind::UnknownArgument {
                eprintln!("valid flags: {}", valid_flags(&argv).join(" "));
            }
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let started = Instant::now();
    let name = cmd_name(&cli.cmd);
    let stochastic = matches!(cli.cmd, Cmd::Nplayer { .. });
    let result = Ctx::from_global(&cli.global, argv[1..].to_vec(), stochastic).and_then(|mut ctx| {
        let v = run(&cli.cmd, &mut ctx)?;
        ctx.finish(name, started)?;
        Ok(v)
    });
    match result {
        Ok(v) => {
            let text = if cli.global.json { serde_json::to_string_pretty(&v).unwrap() + "\n" } else { render_human(&v) };
            // a closed pipe downstream is not a failure of the run
            let _ = std::io::stdout().write_all(text.as_bytes());
            ExitCode::SUCCESS
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Solver(e)) => {
            let diag = json!({ "error": error_kind(&e), "message": e.to_string(), "command": name });
            eprintln!("{diag}");
            let usage = matches!(e, Error::ParamDomain(_) | Error::Domain(_));
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}
