// SPDX-License-Identifier: MIT OR Apache-2.0

//! `qcd`: streaming detection, Monte Carlo campaigns, design cards and
//! oracle validation for transient change detection.
//!
//! Exit codes: 0 ok, 2 input error, 3 no stop, 4 validation failure,
//! 5 certification or property failure.

use std::fs;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use transient_qcd::design::{DesignCard, DesignInput, RegimeVector};
use transient_qcd::detectors::{Detector, DetectorConfig, DetectorKind};
use transient_qcd::models::{AlphaOutcome, PhaseModel};
use transient_qcd::simulate::{
    evolution_path, oc_sweep, OcReport, OcSweepSpec, ScenarioSpec, DEFAULT_WADD_MAX_STEPS,
};
use transient_qcd::validation::{
    check_cusum_reduction, check_martingale, check_oracle_equality, check_ordering, PropertyCheck,
};

#[derive(Debug)]
enum Failure {
    Io(String),
    Input(String),
    NoStop(String),
    Invalid(String),
    Certification(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Io(_) => 1,
            Failure::Input(_) => 2,
            Failure::NoStop(_) => 3,
            Failure::Invalid(_) => 4,
            Failure::Certification(_) => 5,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Io(m)
            | Failure::Input(m)
            | Failure::NoStop(m)
            | Failure::Invalid(m)
            | Failure::Certification(m) => m,
        }
    }
}

type CmdResult = Result<(), Failure>;

fn invalid(e: impl std::fmt::Display) -> Failure {
    Failure::Invalid(e.to_string())
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::Io(format!("{}: {e}", path.display()))
}

#[derive(Parser)]
#[command(
    name = "qcd",
    version,
    about = "Change detection under transient dynamics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a detector over a stream of observations until it stops.
    Detect(DetectArgs),
    /// Estimate ARL and WADD over a threshold sweep.
    Simulate(SimulateArgs),
    /// Print thresholds, the rho_1 range and delay predictions.
    Design(DesignArgs),
    /// Check the detectors against brute-force enumeration on a model.
    Validate(ValidateArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Kind {
    Dcusum,
    Wdcusum,
    Cusum,
}

#[derive(Args, Clone)]
struct DetectorArgs {
    /// Detector family.
    #[arg(long, value_enum, default_value = "dcusum")]
    kind: Kind,
    /// Transition weights rho_1..rho_(L-1) for wdcusum.
    #[arg(long, value_delimiter = ',')]
    rho: Vec<f64>,
}

impl DetectorArgs {
    fn kind(&self) -> DetectorKind {
        match self.kind {
            Kind::Dcusum => DetectorKind::DCusum,
            Kind::Wdcusum => DetectorKind::WdCusum {
                rho: self.rho.clone(),
            },
            Kind::Cusum => DetectorKind::Cusum,
        }
    }
}

#[derive(Args)]
struct DetectArgs {
    /// Model file (JSON).
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    detector: DetectorArgs,
    /// Threshold b.
    #[arg(long)]
    threshold: f64,
    /// Read observations from FILE instead of standard input.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Treat the input as CSV with a header and read column NAME.
    #[arg(long)]
    csv_column: Option<String>,
    /// Print `k,statistic,regenerated` for every sample.
    #[arg(long)]
    trace: bool,
}

#[derive(Args)]
struct SimulateArgs {
    /// Run manifest (JSON); replaces the flags below.
    #[arg(long, conflicts_with_all = ["model", "threshold", "scenario"])]
    manifest: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[command(flatten)]
    detector: DetectorArgs,
    /// Ascending thresholds.
    #[arg(long, value_delimiter = ',')]
    threshold: Vec<f64>,
    /// `v1=INT|inf;d=INT|inf[,...]`; repeatable.
    #[arg(long)]
    scenario: Vec<String>,
    /// Trials per estimate; sets both ARL and WADD counts.
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long, default_value_t = 2000)]
    arl_trials: usize,
    #[arg(long, default_value_t = 10_000)]
    wadd_trials: usize,
    /// Censoring horizon for WADD runs.
    #[arg(long, default_value_t = DEFAULT_WADD_MAX_STEPS)]
    max_steps: u64,
    /// Censoring horizon for ARL runs [default: 50 e^b within 1e4..1e8].
    #[arg(long)]
    arl_max_steps: Option<u64>,
    #[arg(long, env = "QCD_SEED", default_value_t = 0)]
    seed: u64,
    /// Output prefix for PREFIX.csv, PREFIX.json and PREFIX.manifest.json.
    #[arg(long, default_value = "oc")]
    out: String,
    /// Print the JSON report instead of the summary table.
    #[arg(long)]
    json: bool,
    /// Instead of a sweep, print the statistic path over N samples of the
    /// first scenario as `k,statistic`.
    #[arg(long, value_name = "N")]
    path: Option<u64>,
}

#[derive(Args)]
struct DesignArgs {
    /// Target ARL gamma > 1.
    #[arg(long)]
    gamma: f64,
    /// Certified Chernoff exponent.
    #[arg(long)]
    alpha: Option<f64>,
    /// Model file; supplies L and KL values and, without --alpha, an
    /// estimate of alpha.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Number of post-change phases L.
    #[arg(long)]
    phases: Option<usize>,
    /// KL divergences I_1..I_L.
    #[arg(long, value_delimiter = ',')]
    kl: Vec<f64>,
    /// delta1,delta2 for the rho_1 range.
    #[arg(long, value_delimiter = ',')]
    deltas: Vec<f64>,
    /// Regime vector c_1..c_(L-1) (`inf` allowed); repeatable.
    #[arg(long = "c")]
    regimes: Vec<String>,
    #[arg(long, env = "QCD_SEED", default_value_t = 0)]
    seed: u64,
    /// Samples for the alpha estimate.
    #[arg(long, default_value_t = 100_000)]
    alpha_samples: usize,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, env = "QCD_SEED", default_value_t = 0)]
    seed: u64,
    /// Weights for the wdcusum checks [default: 0.05 each].
    #[arg(long, value_delimiter = ',')]
    rho: Vec<f64>,
    /// Random streams per check.
    #[arg(long, default_value_t = 200)]
    streams: usize,
    /// Stream length k (at most 30).
    #[arg(long, default_value_t = 20)]
    window: usize,
    /// Streams for the martingale check.
    #[arg(long, default_value_t = 20_000)]
    martingale_streams: usize,
    #[arg(long)]
    json: bool,
}

fn load_model(path: &Path) -> Result<PhaseModel, Failure> {
    PhaseModel::load(path).map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))
}

fn open_input(path: Option<&Path>) -> Result<Box<dyn Read>, Failure> {
    match path {
        Some(p) => {
            Ok(Box::new(fs::File::open(p).map_err(|e| {
                Failure::Input(format!("{}: {e}", p.display()))
            })?))
        }
        None => Ok(Box::new(io::stdin().lock())),
    }
}

fn parse_observation(raw: &str, line: u64) -> Result<f64, Failure> {
    match raw.trim().parse::<f64>() {
        Ok(x) if x.is_finite() => Ok(x),
        _ => Err(Failure::Input(format!(
            "line {line}: expected a finite number, got {:?}",
            raw.trim()
        ))),
    }
}

struct Session<'m, W> {
    detector: Detector<'m>,
    trace: bool,
    out: W,
}

impl<W: Write> Session<'_, W> {
    /// Returns true once the detector stops.
    fn feed(&mut self, x: f64, line: u64) -> Result<bool, Failure> {
        let step = self
            .detector
            .step(x)
            .map_err(|e| Failure::Input(format!("line {line}: {e}")))?;
        let k = self.detector.state().k;
        let w = |r: io::Result<()>| r.map_err(|e| Failure::Io(e.to_string()));
        if self.trace {
            w(writeln!(
                self.out,
                "{k},{},{}",
                step.statistic, step.regenerated
            ))?;
        }
        if step.crossed {
            w(writeln!(
                self.out,
                "STOP k={k} statistic={}",
                step.statistic
            ))?;
        }
        Ok(step.crossed)
    }
}

fn cmd_detect(args: DetectArgs) -> CmdResult {
    let model = load_model(&args.model)?;
    let config = DetectorConfig::new(args.detector.kind(), args.threshold);
    let detector = Detector::new(&model, config).map_err(invalid)?;
    let stdout = io::stdout();
    let mut session = Session {
        detector,
        trace: args.trace,
        out: io::BufWriter::new(stdout.lock()),
    };
    if args.trace {
        writeln!(session.out, "k,statistic,regenerated").map_err(|e| Failure::Io(e.to_string()))?;
    }
    let source = open_input(args.input.as_deref())?;
    let stopped = match &args.csv_column {
        Some(name) => {
            let mut reader = csv::ReaderBuilder::new()
                .has_headers(true)
                .from_reader(source);
            let headers = reader
                .headers()
                .map_err(|e| Failure::Input(format!("line 1: {e}")))?
                .clone();
            let column = headers
                .iter()
                .position(|h| h.trim() == name)
                .ok_or_else(|| Failure::Input(format!("line 1: no column named {name:?}")))?;
            let mut stopped = false;
            for record in reader.records() {
                let record = record.map_err(|e| {
                    let line = e.position().map_or(0, |p| p.line());
                    Failure::Input(format!("line {line}: {e}"))
                })?;
                let line = record.position().map_or(0, |p| p.line());
                let field = record.get(column).ok_or_else(|| {
                    Failure::Input(format!("line {line}: missing column {name:?}"))
                })?;
                if session.feed(parse_observation(field, line)?, line)? {
                    stopped = true;
                    break;
                }
            }
            stopped
        }
        None => {
            let mut stopped = false;
            for (i, line) in BufReader::new(source).lines().enumerate() {
                let n = i as u64 + 1;
                let line = line.map_err(|e| Failure::Input(format!("line {n}: {e}")))?;
                if line.trim().is_empty() {
                    continue;
                }
                if session.feed(parse_observation(&line, n)?, n)? {
                    stopped = true;
                    break;
                }
            }
            stopped
        }
    };
    session
        .out
        .flush()
        .map_err(|e| Failure::Io(e.to_string()))?;
    if stopped {
        Ok(())
    } else {
        let state = session.detector.state();
        Err(Failure::NoStop(format!(
            "no stop: input ended after k={} statistic={}",
            state.k,
            state.statistic()
        )))
    }
}

/// Everything needed to rerun a sweep; written next to its outputs.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct RunManifest {
    model: PathBuf,
    #[serde(flatten)]
    kind: DetectorKind,
    thresholds: Vec<f64>,
    scenarios: Vec<String>,
    seed: u64,
    arl_trials: usize,
    wadd_trials: usize,
    #[serde(default)]
    arl_max_steps: Option<u64>,
    wadd_max_steps: u64,
    out: String,
}

impl RunManifest {
    fn from_args(args: &SimulateArgs) -> Result<Self, Failure> {
        let model = args
            .model
            .clone()
            .ok_or_else(|| Failure::Invalid("--model or --manifest is required".into()))?;
        Ok(Self {
            model,
            kind: args.detector.kind(),
            thresholds: args.threshold.clone(),
            scenarios: args.scenario.clone(),
            seed: args.seed,
            arl_trials: args.trials.unwrap_or(args.arl_trials),
            wadd_trials: args.trials.unwrap_or(args.wadd_trials),
            arl_max_steps: args.arl_max_steps,
            wadd_max_steps: args.max_steps,
            out: args.out.clone(),
        })
    }

    /// Relative model paths are taken relative to the manifest's directory.
    fn load(path: &Path) -> Result<Self, Failure> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let mut m: RunManifest = serde_json::from_str(&text)
            .map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))?;
        if m.model.is_relative() {
            if let Some(dir) = path.parent() {
                m.model = dir.join(&m.model);
            }
        }
        Ok(m)
    }

    fn scenarios(&self) -> Result<Vec<ScenarioSpec>, Failure> {
        self.scenarios
            .iter()
            .map(|s| {
                s.parse()
                    .map_err(|e| Failure::Invalid(format!("scenario {s:?}: {e}")))
            })
            .collect()
    }
}

fn write_file(path: &Path, contents: &str) -> CmdResult {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn summary_table(report: &OcReport) -> String {
    let mut out = format!(
        "{:>10} {:>14} {:>10}  scenario  {:>12} {:>9}\n",
        "b", "arl", "arl_se", "wadd", "wadd_se"
    );
    for row in &report.rows {
        let censored = if row.arl.n_censored > 0 {
            format!(" (>=, {} censored)", row.arl.n_censored)
        } else {
            String::new()
        };
        if row.cells.is_empty() {
            out.push_str(&format!(
                "{:>10.4} {:>14.2} {:>10.2}{censored}\n",
                row.b, row.arl.mean, row.arl.stderr
            ));
        }
        for cell in &row.cells {
            out.push_str(&format!(
                "{:>10.4} {:>14.2} {:>10.2}  {:<8}  {:>12.3} {:>9.3}{censored}\n",
                row.b,
                row.arl.mean,
                row.arl.stderr,
                cell.scenario,
                cell.wadd.mean,
                cell.wadd.stderr
            ));
        }
    }
    out
}

/// Rows whose ARL contradicts `ARL >= e^b / 2` beyond three standard errors.
fn wdcusum_bound_violations(report: &OcReport) -> Vec<String> {
    if !matches!(report.kind, DetectorKind::WdCusum { .. }) {
        return Vec::new();
    }
    report
        .rows
        .iter()
        .filter(|r| r.arl.mean + 3.0 * r.arl.stderr < r.b.exp() / 2.0)
        .map(|r| {
            format!(
                "b={}: ARL {:.2} + 3 x {:.2} < e^b/2 = {:.2}",
                r.b,
                r.arl.mean,
                r.arl.stderr,
                r.b.exp() / 2.0
            )
        })
        .collect()
}

fn cmd_simulate(args: SimulateArgs) -> CmdResult {
    let manifest = match &args.manifest {
        Some(p) => RunManifest::load(p)?,
        None => RunManifest::from_args(&args)?,
    };
    let model = load_model(&manifest.model)?;
    let scenarios = manifest.scenarios()?;
    if manifest.thresholds.is_empty() {
        return Err(Failure::Invalid(
            "at least one --threshold is required".into(),
        ));
    }
    for &b in &manifest.thresholds {
        DetectorConfig::new(manifest.kind.clone(), b)
            .validate(&model)
            .map_err(invalid)?;
    }

    if let Some(n) = args.path {
        let scenario = scenarios
            .first()
            .cloned()
            .unwrap_or_else(|| ScenarioSpec::pre_change(model.num_phases()));
        let config = DetectorConfig::new(manifest.kind.clone(), manifest.thresholds[0]);
        let path =
            evolution_path(&model, &[config], &scenario, n, manifest.seed).map_err(invalid)?;
        let mut out = String::from("k,statistic\n");
        for (k, row) in path.iter().enumerate() {
            out.push_str(&format!("{},{}\n", k + 1, row[0]));
        }
        print!("{out}");
        return Ok(());
    }

    let spec = OcSweepSpec {
        thresholds: manifest.thresholds.clone(),
        scenarios,
        arl_trials: manifest.arl_trials,
        wadd_trials: manifest.wadd_trials,
        arl_max_steps: manifest.arl_max_steps,
        wadd_max_steps: manifest.wadd_max_steps,
        master_seed: manifest.seed,
    };
    let report = oc_sweep(&model, &manifest.kind, &spec).map_err(invalid)?;

    let prefix = PathBuf::from(&manifest.out);
    let with_ext = |ext: &str| PathBuf::from(format!("{}.{ext}", prefix.display()));
    write_file(&with_ext("csv"), &report.to_csv())?;
    write_file(&with_ext("json"), &report.to_json())?;
    let mut recorded = manifest.clone();
    recorded.model = fs::canonicalize(&manifest.model).unwrap_or(manifest.model.clone());
    let manifest_json =
        serde_json::to_string_pretty(&recorded).map_err(|e| Failure::Io(e.to_string()))?;
    write_file(&with_ext("manifest.json"), &manifest_json)?;

    if args.json {
        println!("{}", report.to_json());
    } else {
        print!("{}", summary_table(&report));
    }
    let violations = wdcusum_bound_violations(&report);
    if violations.is_empty() {
        Ok(())
    } else {
        Err(Failure::Certification(format!(
            "ARL bound not certified:\n{}",
            violations.join("\n")
        )))
    }
}

fn parse_regime(s: &str) -> Result<RegimeVector, Failure> {
    let values = s
        .split(',')
        .map(|v| match v.trim() {
            "inf" | "infinity" => Ok(f64::INFINITY),
            t => t
                .parse::<f64>()
                .map_err(|_| Failure::Invalid(format!("regime value {t:?} is not a number"))),
        })
        .collect::<Result<Vec<_>, _>>()?;
    RegimeVector::new(values).map_err(invalid)
}

fn cmd_design(args: DesignArgs) -> CmdResult {
    let model = args.model.as_deref().map(load_model).transpose()?;
    let mut notes = Vec::new();
    let kl = match (&model, args.kl.is_empty()) {
        (Some(m), true) => m.kl_all().to_vec(),
        _ => args.kl.clone(),
    };
    let num_phases = args
        .phases
        .or(model.as_ref().map(|m| m.num_phases()))
        .or((!kl.is_empty()).then_some(kl.len()))
        .ok_or_else(|| Failure::Invalid("give --phases, --kl or --model".into()))?;
    let alpha = match (args.alpha, &model) {
        (Some(a), _) => Some(a),
        (None, Some(m)) => match m
            .estimate_alpha(args.alpha_samples, args.seed)
            .map_err(invalid)?
        {
            AlphaOutcome::Certified(est) => {
                notes.push(format!(
                    "note: alpha = {:.6} estimated from the model (E[Phi] = {:.4} +- {:.4})",
                    est.alpha, est.mean_phi, est.stderr
                ));
                Some(est.alpha)
            }
            AlphaOutcome::NotApplicable { mean_phi, stderr } => {
                notes.push(format!(
                    "note: E[Phi] = {mean_phi:.4} +- {stderr:.4} is not certified negative"
                ));
                None
            }
        },
        (None, None) => None,
    };
    let deltas = match args.deltas.as_slice() {
        [] => None,
        [d1, d2] => Some((*d1, *d2)),
        other => {
            return Err(Failure::Invalid(format!(
                "--deltas takes two values; got {}",
                other.len()
            )))
        }
    };
    let regimes = args
        .regimes
        .iter()
        .map(|s| parse_regime(s))
        .collect::<Result<Vec<_>, _>>()?;
    let input = DesignInput {
        gamma: args.gamma,
        alpha,
        num_phases,
        kl,
        deltas,
        regimes,
    };
    let mut card = DesignCard::compute(&input).map_err(invalid)?;
    card.notes.extend(notes);
    if args.json {
        println!(
            "{}",
            serde_json::to_string_pretty(&card).map_err(|e| Failure::Io(e.to_string()))?
        );
    } else {
        print!("{}", card.render());
    }
    Ok(())
}

/// Largest window `k <= 20` with `max_i E0[(f_i/f0)^2]^k <= 100`, keeping
/// the variance of `R[k]` within reach of a desk-scale Monte Carlo mean.
fn martingale_window(model: &PhaseModel) -> Option<usize> {
    let mut m = 1.0f64;
    for i in 1..=model.num_phases() {
        m = m.max(model.ratio_second_moment(i).ok()?);
    }
    if !m.is_finite() {
        return None;
    }
    if m <= 1.0 {
        return Some(20);
    }
    Some(((100f64.ln() / m.ln()).floor() as usize).clamp(1, 20))
}

fn cmd_validate(args: ValidateArgs) -> CmdResult {
    let model = load_model(&args.model)?;
    let l = model.num_phases();
    if args.window == 0 || args.window > transient_qcd::oracle::MAX_WINDOW {
        return Err(Failure::Invalid(format!(
            "--window must lie in 1..={}",
            transient_qcd::oracle::MAX_WINDOW
        )));
    }
    if l > transient_qcd::oracle::MAX_PHASES {
        return Err(Failure::Invalid(format!(
            "enumeration supports L <= {}; model has L = {l}",
            transient_qcd::oracle::MAX_PHASES
        )));
    }
    let rho = if args.rho.is_empty() {
        vec![0.05; l - 1]
    } else {
        args.rho.clone()
    };
    DetectorConfig::wdcusum(rho.clone(), 1.0)
        .validate(&model)
        .map_err(invalid)?;

    let mut checks: Vec<PropertyCheck> = Vec::new();
    checks.extend(
        check_oracle_equality(&model, &rho, args.streams, args.window, args.seed)
            .map_err(invalid)?,
    );
    checks.extend(
        check_ordering(&model, &rho, args.streams, args.window, args.seed).map_err(invalid)?,
    );
    if l == 1 {
        checks.push(check_cusum_reduction(&model, 100_000, args.seed).map_err(invalid)?);
    }
    let mut skipped = Vec::new();
    if l == 2 {
        match martingale_window(&model) {
            Some(k) => checks.push(
                check_martingale(&model, rho[0], k, args.martingale_streams, args.seed, 3.0)
                    .map_err(invalid)?,
            ),
            None => skipped.push("SKIP martingale: E0[(f_i/f0)^2] is infinite".to_string()),
        }
    }

    if args.json {
        println!(
            "{}",
            serde_json::to_string_pretty(&checks).map_err(|e| Failure::Io(e.to_string()))?
        );
    } else {
        for c in &checks {
            println!("{}", c.line());
        }
        for s in &skipped {
            println!("{s}");
        }
    }
    match checks.iter().find(|c| !c.passed) {
        None => Ok(()),
        Some(c) => Err(Failure::Certification(match c.failing_stream {
            Some(i) => format!("{} failed; replay with seed {} stream {i}", c.name, c.seed),
            None => format!("{} failed with seed {}", c.name, c.seed),
        })),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Detect(a) => cmd_detect(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Design(a) => cmd_design(a),
        Command::Validate(a) => cmd_validate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("qcd: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
