use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use num_complex::Complex64;
use serde::Serialize;
use serde_json::json;

use edubal::analysis::{self, DEFAULT_LOCUS_POINTS, DEFAULT_LOCUS_RANGE};
use edubal::identification::{self, FirstOrderFit, TimeSeries};
use edubal::model::{RationalTF, RobotParams};
use edubal::schema::{self, Versioned};
use edubal::service::{Server, ServerConfig, DEFAULT_PORT};
use edubal::simulation::{frames_to_csv, run_experiment, SimConfig};
use edubal::synthesis::{self, LQRWeights};
use edubal::{fixtures, reproduction};

/// Digital twin of a two-wheeled balancing robot.
#[derive(Parser, Debug)]
#[command(name = "edubal", version, about)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Fit a first-order motor model to a `t,u,y` step record.
    Identify {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Predicted-vs-measured CSV; defaults to `<out>.pred.csv`.
        #[arg(long)]
        pred: Option<PathBuf>,
    },
    /// Write a synthetic motor step record.
    GenStep {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2.6)]
        gain: f64,
        #[arg(long, default_value_t = 0.038)]
        tau: f64,
        #[arg(long, default_value_t = 1e-3)]
        dt: f64,
        #[arg(long, default_value_t = 1.0)]
        horizon: f64,
        /// Output noise standard deviation.
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Design PI or LQR gains.
    Synthesize {
        #[arg(long, value_enum)]
        mode: SynthMode,
        /// `key = value` robot parameters; bundled values if omitted.
        #[arg(long)]
        params: Option<PathBuf>,
        /// LQR weights JSON; bundled weights for the mode if omitted.
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Motor fit JSON for `pi`; bundled motor model if omitted.
        #[arg(long)]
        fit: Option<PathBuf>,
        /// PI settling time [s].
        #[arg(long)]
        settle: Option<f64>,
        /// PI upper natural-frequency factor.
        #[arg(long)]
        fmax: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Poles and zeros, root locus, Nyquist data, step response or
    /// critical gain of a position-loop transfer function.
    Analyze {
        /// `published`, `derived` (from --params and the published
        /// pitch gains) or a transfer-function JSON file.
        #[arg(long, default_value = "published")]
        tf: String,
        #[arg(long, value_enum)]
        what: Artifact,
        #[arg(long)]
        params: Option<PathBuf>,
        /// Loop gain for `step`.
        #[arg(long)]
        kp: Option<f64>,
        #[arg(long, default_value_t = 5.0)]
        horizon: f64,
        /// Directory for `<what>.csv` and `<what>_summary.json`.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Run a batch experiment and write the telemetry log.
    Simulate {
        /// Experiment JSON, or `recovery` for the bundled one.
        #[arg(long)]
        config: String,
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve live sessions over TCP (NDJSON or WebSocket).
    Serve {
        /// 0 picks a free port.
        #[arg(long, env = "EDUBAL_PORT", default_value_t = DEFAULT_PORT)]
        port: u16,
        #[arg(long, env = "EDUBAL_ADDR", default_value = "127.0.0.1")]
        addr: String,
        /// Directory of static UI files served over HTTP.
        #[arg(long)]
        ui: Option<PathBuf>,
        /// Append every broadcast message to this NDJSON file.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long, default_value_t = edubal::service::DEFAULT_MAX_SESSIONS)]
        max_sessions: usize,
    },
    /// Run the reproduction battery and print computed against published
    /// values. Exits 1 if any check fails.
    PaperSuite {
        #[arg(long)]
        params: Option<PathBuf>,
        /// Override one parameter, e.g. `l=0.10284`. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SynthMode {
    Pi,
    Lqr3,
    Lqr4,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Artifact {
    Pz,
    Locus,
    Nyquist,
    Step,
    Critical,
}

impl Artifact {
    fn name(self) -> &'static str {
        match self {
            Artifact::Pz => "pz",
            Artifact::Locus => "locus",
            Artifact::Nyquist => "nyquist",
            Artifact::Step => "step",
            Artifact::Critical => "critical",
        }
    }
}

type CliResult<T> = Result<T, String>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match dispatch(cli.cmd) {
        Ok(code) => code,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(cmd: Cmd) -> CliResult<ExitCode> {
    match cmd {
        Cmd::Identify { input, out, pred } => identify(&input, &out, pred),
        Cmd::GenStep {
            out,
            gain,
            tau,
            dt,
            horizon,
            noise,
            seed,
        } => {
            let plant = FirstOrderFit::new(gain, tau);
            let steps = identification::default_step_sequence(horizon);
            let data =
                identification::generate_step_experiment(&plant, &steps, dt, horizon, noise, seed)
                    .map_err(|e| e.to_string())?;
            write(&out, &data.to_csv_string())?;
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Synthesize {
            mode,
            params,
            weights,
            fit,
            settle,
            fmax,
            out,
        } => synthesize(mode, params, weights, fit, settle, fmax, &out),
        Cmd::Analyze {
            tf,
            what,
            params,
            kp,
            horizon,
            out,
        } => analyze(&tf, what, params, kp, horizon, &out),
        Cmd::Simulate {
            config,
            params,
            out,
        } => {
            let cfg = if config == "recovery" {
                fixtures::recovery_config()
            } else {
                schema::from_json::<SimConfig>(&read(Path::new(&config))?)
                    .map_err(|e| format!("{config}: {e}"))?
            };
            let params = load_params(params)?;
            let frames = run_experiment(&cfg, &params).map_err(|e| e.to_string())?;
            write(&out, &frames_to_csv(&frames))?;
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Serve {
            port,
            addr,
            ui,
            log,
            max_sessions,
        } => {
            let server = Server::bind(ServerConfig {
                addr,
                port,
                ui_dir: ui,
                log_path: log,
                max_sessions,
                ..ServerConfig::default()
            })
            .map_err(|e| e.to_string())?;
            let bound = server.local_addr().map_err(|e| e.to_string())?;
            println!("listening on {bound}");
            println!("port {}", bound.port());
            use std::io::Write;
            let _ = std::io::stdout().flush();
            server.run().map_err(|e| e.to_string())?;
            Ok(ExitCode::SUCCESS)
        }
        Cmd::PaperSuite {
            params,
            overrides,
            json,
        } => {
            let mut p = load_params(params)?;
            if !overrides.is_empty() {
                let mut lines: Vec<String> = p.to_kv_string().lines().map(str::to_string).collect();
                for o in &overrides {
                    let (key, _) = o
                        .split_once('=')
                        .ok_or_else(|| format!("override `{o}` is not KEY=VALUE"))?;
                    let key = key.trim();
                    lines.retain(|l| l.split('=').next().map(str::trim) != Some(key));
                    lines.push(o.clone());
                }
                p = RobotParams::from_kv_str(&lines.join("\n")).map_err(|e| e.to_string())?;
            }
            let report = reproduction::run(&p);
            if json {
                print!("{}", schema::to_json_pretty(&report));
            } else {
                print!("{}", report.table());
                let failed = report.failures().count();
                println!("{} checks, {} failed", report.checks.len(), failed);
            }
            Ok(if report.all_passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            })
        }
    }
}

fn read(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn write(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| format!("{}: {e}", path.display()))
}

fn load_params(path: Option<PathBuf>) -> CliResult<RobotParams> {
    match path {
        Some(p) => RobotParams::load(&p).map_err(|e| format!("{}: {e}", p.display())),
        None => Ok(fixtures::robot_params()),
    }
}

fn identify(input: &Path, out: &Path, pred: Option<PathBuf>) -> CliResult<ExitCode> {
    let data = TimeSeries::load_csv(input).map_err(|e| format!("{}: {e}", input.display()))?;
    let fit = identification::fit_first_order(&data).map_err(|e| e.to_string())?;
    write(out, &schema::to_json_pretty(&fit))?;
    let pred_path = pred.unwrap_or_else(|| out.with_extension("pred.csv"));
    let y_hat = fit.predict(&data);
    let mut csv = String::from("t,u,y,y_pred\n");
    for (i, yp) in y_hat.iter().enumerate() {
        let _ = writeln!(csv, "{},{},{},{}", data.t[i], data.u[i], data.y[i], yp);
    }
    write(&pred_path, &csv)?;
    println!(
        "K_m = {}, tau = {}, residual_rms = {:.3e}",
        fit.gain, fit.tau, fit.residual_rms
    );
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct LqrOut {
    mode: &'static str,
    k: Vec<f64>,
    convention: String,
    weights: LQRWeights,
    care_residual: f64,
    closed_loop_poles: Vec<[f64; 2]>,
}

fn pairs(v: &[Complex64]) -> Vec<[f64; 2]> {
    v.iter().map(|z| [z.re, z.im]).collect()
}

fn synthesize(
    mode: SynthMode,
    params: Option<PathBuf>,
    weights: Option<PathBuf>,
    fit: Option<PathBuf>,
    settle: Option<f64>,
    fmax: Option<f64>,
    out: &Path,
) -> CliResult<ExitCode> {
    let published = fixtures::reference_values();
    let doc = match mode {
        SynthMode::Pi => {
            let plant = match fit {
                Some(p) => schema::from_json::<FirstOrderFit>(&read(&p)?)
                    .map_err(|e| format!("{}: {e}", p.display()))?,
                None => FirstOrderFit::new(published.motor_gain, published.motor_tau),
            };
            let gains = synthesis::pi_pole_placement(
                &plant,
                settle.unwrap_or(published.pi_settle_time),
                fmax.unwrap_or(published.pi_max_natural_freq),
            )
            .map_err(|e| e.to_string())?;
            let cl = synthesis::pi_closed_loop(&plant, &gains).map_err(|e| e.to_string())?;
            let poles = cl.poles().map_err(|e| e.to_string())?;
            let tau = synthesis::dominant_time_constant(&cl).map_err(|e| e.to_string())?;
            schema::to_json_pretty(&json!({
                "mode": "pi",
                "Kp": gains.kp,
                "Ki": gains.ki,
                "plant": plant,
                "closed_loop_poles": pairs(&poles),
                "dominant_time_constant": tau,
            }))
        }
        SynthMode::Lqr3 | SynthMode::Lqr4 => {
            let p = load_params(params)?;
            let w = match weights {
                Some(path) => schema::from_json::<LQRWeights>(&read(&path)?)
                    .map_err(|e| format!("{}: {e}", path.display()))?,
                None if matches!(mode, SynthMode::Lqr3) => fixtures::lqr3_weights(),
                None => fixtures::lqr4_weights(),
            };
            let (name, design) = if matches!(mode, SynthMode::Lqr3) {
                ("lqr3", synthesis::lqr3(&p, &w))
            } else {
                ("lqr4", synthesis::lqr4(&p, &w))
            };
            let d = design.map_err(|e| e.to_string())?;
            schema::to_json_pretty(&LqrOut {
                mode: name,
                k: d.gains.k.clone(),
                convention: d.gains.convention.clone(),
                weights: w,
                care_residual: d.residual,
                closed_loop_poles: pairs(&d.closed_loop_poles),
            })
        }
    };
    write(out, &doc)?;
    Ok(ExitCode::SUCCESS)
}

fn load_tf(spec: &str, params: Option<PathBuf>) -> CliResult<RationalTF> {
    match spec {
        "published" => Ok(fixtures::position_tf()),
        "derived" => {
            let p = load_params(params)?;
            let sys = edubal::model::linearize(&p).map_err(|e| e.to_string())?;
            analysis::closed_loop_siso(&sys, &fixtures::reference_values().lqr3_gains())
                .map_err(|e| e.to_string())
        }
        path => schema::from_json::<RationalTF>(&read(Path::new(path))?)
            .map_err(|e| format!("{path}: {e}")),
    }
}

fn finite_or_null(v: f64) -> serde_json::Value {
    if v.is_finite() {
        json!(v)
    } else {
        serde_json::Value::Null
    }
}

fn analyze(
    tf_spec: &str,
    what: Artifact,
    params: Option<PathBuf>,
    kp: Option<f64>,
    horizon: f64,
    out: &Path,
) -> CliResult<ExitCode> {
    let g = load_tf(tf_spec, params)?;
    let poles = g.poles().map_err(|e| e.to_string())?;
    let zeros = g.zeros().map_err(|e| e.to_string())?;
    let fr = analysis::nyquist(&g, &analysis::default_omega_grid()).map_err(|e| e.to_string())?;
    let k_crit = analysis::critical_gain(&g).ok();
    let kp = kp.unwrap_or(fixtures::reference_values().kp_pos_stable);

    let mut csv = String::new();
    let mut extra = serde_json::Map::new();
    match what {
        Artifact::Pz => {
            csv.push_str("kind,re,im\n");
            for (kind, set) in [("pole", &poles), ("zero", &zeros)] {
                for z in set.iter() {
                    let _ = writeln!(csv, "{kind},{},{}", z.re, z.im);
                }
            }
        }
        Artifact::Locus => {
            let (lo, hi) = DEFAULT_LOCUS_RANGE;
            let locus = analysis::root_locus(&g, lo, hi, DEFAULT_LOCUS_POINTS)
                .map_err(|e| e.to_string())?;
            csv.push_str("k,branch,re,im\n");
            for (k, track) in locus.gains.iter().zip(&locus.pole_tracks) {
                for (j, z) in track.iter().enumerate() {
                    let _ = writeln!(csv, "{k},{j},{},{}", z.re, z.im);
                }
            }
            extra.insert("branch_count".into(), json!(locus.branch_count()));
        }
        Artifact::Nyquist => {
            csv.push_str("omega,re,im,mag,phase_deg\n");
            for ((w, z), ph) in fr.omega.iter().zip(&fr.value).zip(&fr.phase_deg) {
                let _ = writeln!(csv, "{w},{},{},{},{ph}", z.re, z.im, z.norm());
            }
        }
        Artifact::Step => {
            let cl = g.feedback(kp).map_err(|e| e.to_string())?;
            let step = analysis::step_response(&cl, horizon, 1e-3).map_err(|e| e.to_string())?;
            csv.push_str("t,y\n");
            for (t, y) in step.t.iter().zip(&step.y) {
                let _ = writeln!(csv, "{t},{y}");
            }
            extra.insert("kp".into(), json!(kp));
            extra.insert("min".into(), json!(step.min()));
            extra.insert("final_value".into(), json!(step.final_value()));
        }
        Artifact::Critical => {
            let k = analysis::critical_gain(&g).map_err(|e| e.to_string())?;
            csv.push_str("k_crit\n");
            let _ = writeln!(csv, "{k}");
        }
    }
    let m = &fr.margins;
    let mut summary = serde_json::Map::new();
    summary.insert(
        "tf".into(),
        json!({"num": g.num().coeffs(), "den": g.den().coeffs()}),
    );
    summary.insert("poles".into(), json!(pairs(&poles)));
    summary.insert("zeros".into(), json!(pairs(&zeros)));
    summary.insert(
        "margins".into(),
        json!({
            "gain_margin": finite_or_null(m.gain_margin),
            "gain_margin_db": finite_or_null(m.gain_margin_db),
            "phase_margin_deg": finite_or_null(m.phase_margin_deg),
            "phase_crossover": m.phase_crossover,
            "gain_crossover": m.gain_crossover,
        }),
    );
    summary.insert("k_crit".into(), json!(k_crit));
    summary.extend(extra);

    fs::create_dir_all(out).map_err(|e| format!("{}: {e}", out.display()))?;
    let name = what.name();
    write(&out.join(format!("{name}.csv")), &csv)?;
    let doc =
        serde_json::to_string_pretty(&Versioned::new(summary)).expect("summary serialises") + "\n";
    write(&out.join(format!("{name}_summary.json")), &doc)?;
    Ok(ExitCode::SUCCESS)
}
