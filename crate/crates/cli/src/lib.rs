//! Command implementations for the `hyperspawn` tool. Every command returns
//! an [`Output`] so the binary and the tests share one code path.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use hyperspawn_core::costmodel::{
    calibrate, CostConstants, CostModel, Formula, MeasuredModel, Measurement, SeqCostMode,
};
use hyperspawn_core::programs::{
    calibration_measurements, run_distribute, run_msort, ProgramConfig, ProgramError, Threshold,
};
use hyperspawn_core::topology::{Hypercube, LinkCosts, TopologyError};
use hyperspawn_core::Word;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("property failed: {0}")]
    Property(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    /// 1 for a failed property, 2 for anything wrong with the invocation.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Property(_) => 1,
            _ => 2,
        }
    }
}

impl From<hyperspawn_core::CostModelError> for CliError {
    fn from(e: hyperspawn_core::CostModelError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<TopologyError> for CliError {
    fn from(e: TopologyError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<ProgramError> for CliError {
    fn from(e: ProgramError) -> Self {
        match e {
            ProgramError::NonNeighbourSpawn { .. }
            | ProgramError::Conservation(_)
            | ProgramError::Coverage(_) => CliError::Property(e.to_string()),
            other => CliError::Usage(other.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "hyperspawn",
    version,
    about = "Simulate remote process creation on a hypercube and evaluate its cost model"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one simulation.
    Sim(SimArgs),
    /// Simulate across a range of processor counts next to the model.
    Sweep(SweepArgs),
    /// Evaluate a model formula without simulating.
    Predict(PredictArgs),
    /// Fit constants from measurements.
    Calibrate(CalibrateArgs),
    /// Run the property checks.
    Verify(VerifyArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Program {
    Distribute,
    Msort,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SeqCost {
    Closed,
    Recurrence,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// Constants file of `key=value` lines; missing keys keep defaults.
    #[arg(long, value_name = "FILE")]
    pub constants: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "closed")]
    pub seq_cost: SeqCost,
    /// Single-element sort time used by the recurrence, in ns.
    #[arg(long, default_value_t = 0.0, value_name = "NS")]
    pub seq_base: f64,
}

impl ModelArgs {
    fn constants(&self) -> Result<CostConstants, CliError> {
        match &self.constants {
            None => Ok(CostConstants::default()),
            Some(p) => Ok(CostConstants::parse(&read(p)?)?),
        }
    }

    fn mode(&self) -> SeqCostMode {
        match self.seq_cost {
            SeqCost::Closed => SeqCostMode::Closed,
            SeqCost::Recurrence => SeqCostMode::Recurrence {
                base_ns: self.seq_base,
            },
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct TopoArgs {
    /// Intra-chip dimensions: `default` for the two highest, `none` for
    /// uniform links, or a comma list such as `4,5`.
    #[arg(long, default_value = "default", value_name = "LIST")]
    pub chip_dims: String,
    /// Cost multiplier of an on-chip hop.
    #[arg(long, default_value_t = hyperspawn_core::topology::DEFAULT_ON_CHIP_MULTIPLIER)]
    pub on_chip: f64,
}

impl TopoArgs {
    pub fn build(&self, d: u32) -> Result<Hypercube, CliError> {
        match self.chip_dims.trim() {
            "none" => Ok(Hypercube::uniform(d)?),
            list => {
                let dims: BTreeSet<u32> = if list == "default" {
                    Hypercube::default_chip_dims(d)
                } else {
                    list.split(',')
                        .map(|s| {
                            s.trim()
                                .parse()
                                .map_err(|_| CliError::Usage(format!("bad chip dimension {s:?}")))
                        })
                        .collect::<Result<_, _>>()?
                };
                Ok(Hypercube::with_chip_dims(
                    d,
                    dims,
                    LinkCosts::with_on_chip(self.on_chip)?,
                )?)
            }
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct OutputArgs {
    #[arg(long, value_enum, default_value = "csv")]
    pub format: Format,
    /// Write the table here instead of stdout.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
    /// Also write a gnuplot script next to `--out` (as `FILE.gp`).
    #[arg(long, requires = "out")]
    pub gnuplot: bool,
}

fn parse_threshold(s: &str) -> Result<Threshold, String> {
    if s == "auto" {
        return Ok(Threshold::Auto);
    }
    match s.parse::<usize>() {
        Ok(0) | Err(_) => Err(format!(
            "threshold must be `auto` or a positive word count, got {s:?}"
        )),
        Ok(w) => Ok(Threshold::Words(w)),
    }
}

/// Processor counts: powers of two from `LO..HI` inclusive, or one value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PRange(pub Vec<u64>);

fn parse_p_range(s: &str) -> Result<PRange, String> {
    let (lo, hi) = match s.split_once("..") {
        Some((a, b)) => (a, b),
        None => (s, s),
    };
    let parse = |t: &str| -> Result<u64, String> {
        let v: u64 = t
            .trim()
            .parse()
            .map_err(|_| format!("bad processor count {t:?}"))?;
        if v == 0 || !v.is_power_of_two() {
            return Err(format!("processor count {v} is not a power of two"));
        }
        Ok(v)
    };
    let (lo, hi) = (parse(lo)?, parse(hi)?);
    if lo > hi {
        return Err(format!("empty range {lo}..{hi}"));
    }
    Ok(PRange(
        std::iter::successors(Some(lo), |p| Some(p * 2))
            .take_while(|p| *p <= hi)
            .collect(),
    ))
}

#[derive(Debug, Clone, Args)]
pub struct SimArgs {
    #[arg(long, value_enum)]
    pub program: Program,
    /// Hypercube dimension.
    #[arg(long, conflicts_with = "p")]
    pub d: Option<u32>,
    /// Processor count (a power of two).
    #[arg(long)]
    pub p: Option<u64>,
    /// Input words for msort.
    #[arg(long, default_value_t = 64)]
    pub n: usize,
    /// Leaf size in words: `auto` for n/p, or a positive count.
    #[arg(long, default_value = "auto", value_parser = parse_threshold)]
    pub threshold: Threshold,
    /// Seed for the random sort input.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Print the event and protocol trace to stderr.
    #[arg(long)]
    pub trace: bool,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub topo: TopoArgs,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[arg(long, value_enum, default_value = "msort")]
    pub program: Program,
    /// Processor counts, `LO..HI` over powers of two.
    #[arg(long, default_value = "1..64", value_parser = parse_p_range)]
    pub p: PRange,
    #[arg(long, default_value_t = 64)]
    pub n: usize,
    /// Leaf size in words: `auto` for n/p, or a positive count.
    #[arg(long, default_value = "auto", value_parser = parse_threshold)]
    pub threshold: Threshold,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub topo: TopoArgs,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Args)]
pub struct PredictArgs {
    /// One of t_d, t_snp, t_min, t_min_nodata.
    #[arg(long)]
    pub formula: String,
    /// Input sizes in words, comma separated.
    #[arg(long, default_value = "64", value_delimiter = ',')]
    pub n: Vec<u64>,
    /// Processor counts, a power of two or `LO..HI` over powers of two.
    #[arg(long, default_value = "1..64", value_parser = parse_p_range)]
    pub p: PRange,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Args)]
pub struct CalibrateArgs {
    /// Measurement CSV with columns `model,x,time_ns`; measured in
    /// simulation when absent.
    #[arg(long, value_name = "FILE")]
    pub input: Option<PathBuf>,
    /// Starting constants for anything not measured.
    #[arg(long, value_name = "FILE")]
    pub constants: Option<PathBuf>,
    /// Write the fitted constants file here instead of stdout.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
    /// Also save the measurements used as CSV.
    #[arg(long, value_name = "FILE")]
    pub save_measurements: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct VerifyArgs {
    /// Largest hypercube dimension exercised.
    #[arg(long, default_value_t = 6)]
    pub max_d: u32,
    /// Random sort inputs per check.
    #[arg(long, default_value_t = 50)]
    pub cases: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub topo: TopoArgs,
    #[command(flatten)]
    pub output: OutputArgs,
}

/// A value in an output table.
#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Int(i64),
    Text(String),
    Bool(bool),
    Empty,
}

impl Cell {
    fn ns(v: f64) -> Cell {
        Cell::Int(v.round() as i64)
    }

    fn text(s: impl Into<String>) -> Cell {
        Cell::Text(s.into())
    }

    fn render(&self) -> String {
        match self {
            Cell::Int(v) => v.to_string(),
            Cell::Text(s) => s.clone(),
            Cell::Bool(b) => b.to_string(),
            Cell::Empty => String::new(),
        }
    }

    fn json(&self) -> serde_json::Value {
        match self {
            Cell::Int(v) => (*v).into(),
            Cell::Text(s) => s.clone().into(),
            Cell::Bool(b) => (*b).into(),
            Cell::Empty => serde_json::Value::Null,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub columns: Vec<&'static str>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    fn new(columns: &[&'static str]) -> Self {
        Table {
            columns: columns.to_vec(),
            rows: Vec::new(),
        }
    }

    fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.columns).expect("in-memory write");
        for r in &self.rows {
            w.write_record(r.iter().map(Cell::render))
                .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
    }

    pub fn to_json(&self) -> String {
        let rows: Vec<serde_json::Value> = self
            .rows
            .iter()
            .map(|r| {
                serde_json::Value::Object(
                    self.columns
                        .iter()
                        .zip(r)
                        .map(|(c, v)| (c.to_string(), v.json()))
                        .collect(),
                )
            })
            .collect();
        let mut s = serde_json::to_string_pretty(&rows).expect("json");
        s.push('\n');
        s
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| *c == name)
    }
}

/// What gnuplot should draw from the table.
#[derive(Debug, Clone, PartialEq)]
pub struct Plot {
    pub title: String,
    pub x: &'static str,
    pub ys: Vec<&'static str>,
    pub log_x: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Output {
    pub table: Table,
    /// Main output when it is not a table (the constants file).
    pub text: Option<String>,
    /// Human-readable lines for stderr.
    pub messages: Vec<String>,
    pub plot: Option<Plot>,
    /// Names of failed properties.
    pub failures: Vec<String>,
}

impl Output {
    pub fn render(&self, format: Format) -> String {
        match (&self.text, format) {
            (Some(t), _) => t.clone(),
            (None, Format::Csv) => self.table.to_csv(),
            (None, Format::Json) => self.table.to_json(),
        }
    }
}

/// `µs` with two decimals.
pub fn micros(ns: f64) -> String {
    format!("{:.2}µs", ns / 1000.0)
}

fn read(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn random_words(n: usize, seed: u64) -> Vec<Word> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen()).collect()
}

fn program_config(topology: Hypercube, model: &ModelArgs) -> Result<ProgramConfig, CliError> {
    let mut cfg = ProgramConfig::new(topology);
    cfg.constants = model.constants()?;
    cfg.seq_mode = model.mode();
    Ok(cfg)
}

fn dimension(d: Option<u32>, p: Option<u64>) -> Result<u32, CliError> {
    match (d, p) {
        (Some(d), _) => Ok(d),
        (None, Some(p)) => Ok(Hypercube::dimension_for(p)?),
        (None, None) => Err(CliError::Usage("one of --d or --p is required".into())),
    }
}

const SIM_COLUMNS: [&str; 8] = [
    "program",
    "n",
    "p",
    "level",
    "time_ns",
    "spawns",
    "sorted",
    "trace_hash",
];

pub fn cmd_sim(a: &SimArgs) -> Result<Output, CliError> {
    let d = dimension(a.d, a.p)?;
    let mut cfg = program_config(a.topo.build(d)?, &a.model)?;
    cfg.keep_trace = a.trace;
    let mut out = Output {
        table: Table::new(&SIM_COLUMNS),
        ..Output::default()
    };
    match a.program {
        Program::Distribute => {
            let r = run_distribute(&cfg)?;
            out.table.push(vec![
                Cell::text("distribute"),
                Cell::Int(r.p.into()),
                Cell::Int(r.p.into()),
                Cell::text("total"),
                Cell::Int(r.time.as_ns() as i64),
                Cell::Int(r.spawns.len() as i64),
                Cell::Empty,
                Cell::text(r.trace_hash.clone()),
            ]);
            for l in &r.levels {
                out.table.push(vec![
                    Cell::text("distribute"),
                    Cell::Int(r.p.into()),
                    Cell::Int(r.p.into()),
                    Cell::Int(l.level.into()),
                    Cell::Int(l.level_time.as_ns() as i64),
                    Cell::Empty,
                    Cell::Empty,
                    Cell::Empty,
                ]);
            }
            let model = CostModel::new(cfg.constants);
            out.messages.push(format!(
                "distribute p={}: {} over {} levels, {} spawns (model {})",
                r.p,
                micros(r.time.as_ns() as f64),
                r.levels.len(),
                r.spawns.len(),
                micros(model.t_d(r.p.into())?)
            ));
            for l in &r.levels {
                out.messages.push(format!(
                    "  level {}: {}",
                    l.level,
                    micros(l.level_time.as_ns() as f64)
                ));
            }
            out.messages.extend(r.trace);
            out.plot = Some(Plot {
                title: format!("distribute, p = {}", r.p),
                x: "level",
                ys: vec!["time_ns"],
                log_x: false,
            });
        }
        Program::Msort => {
            let r = run_msort(&cfg, random_words(a.n, a.seed), a.threshold)?;
            out.table.push(vec![
                Cell::text("msort"),
                Cell::Int(r.n as i64),
                Cell::Int(r.cores_used as i64),
                Cell::text("total"),
                Cell::Int(r.time.as_ns() as i64),
                Cell::Int(r.spawns.len() as i64),
                Cell::Bool(r.sorted && r.permutation),
                Cell::text(r.trace_hash.clone()),
            ]);
            let model = CostModel::new(cfg.constants);
            out.messages.push(format!(
                "msort n={} p={} threshold={}: {}, {} spawns, sorted={}",
                r.n,
                r.p,
                r.threshold,
                micros(r.time.as_ns() as f64),
                r.spawns.len(),
                r.sorted && r.permutation
            ));
            if let Ok(t) = model.predict(Formula::ParallelSort, r.n as u64, r.p.into(), cfg.seq_mode) {
                out.messages.push(format!("  model t_snp: {}", micros(t.time_ns)));
            }
            out.messages.extend(r.trace);
            if !(r.sorted && r.permutation) {
                out.failures.push("sorted".into());
            }
        }
    }
    Ok(out)
}

pub fn cmd_sweep(a: &SweepArgs) -> Result<Output, CliError> {
    let constants = a.model.constants()?;
    let model = CostModel::new(constants);
    let mode = a.model.mode();
    let mut out = Output::default();
    match a.program {
        Program::Msort => {
            out.table = Table::new(&[
                "n",
                "p",
                "sim_time_ns",
                "t_snp_ns",
                "t_min_ns",
                "t_min_nodata_ns",
                "spawns",
            ]);
            let data = random_words(a.n, a.seed);
            for &p in &a.p.0 {
                if (a.n as u64) < p {
                    return Err(CliError::Usage(format!("n = {} is smaller than p = {p}", a.n)));
                }
                let cfg = program_config(a.topo.build(Hypercube::dimension_for(p)?)?, &a.model)?;
                let r = run_msort(&cfg, data.clone(), a.threshold)?;
                let n = a.n as u64;
                let snp = model.predict(Formula::ParallelSort, n, p, mode)?.time_ns;
                out.table.push(vec![
                    Cell::Int(n as i64),
                    Cell::Int(p as i64),
                    Cell::Int(r.time.as_ns() as i64),
                    Cell::ns(snp),
                    Cell::ns(model.t_min(n, p)?),
                    Cell::ns(model.t_min(0, p)?),
                    Cell::Int(r.spawns.len() as i64),
                ]);
                out.messages.push(format!(
                    "p={p}: sim {} model {}",
                    micros(r.time.as_ns() as f64),
                    micros(snp)
                ));
            }
            if let Some(best) = out.table.rows.iter().min_by_key(|r| match r[2] {
                Cell::Int(t) => t,
                _ => i64::MAX,
            }) {
                out.messages
                    .push(format!("fastest simulated: p={}", best[1].render()));
            }
            out.plot = Some(Plot {
                title: format!("msort, n = {}", a.n),
                x: "p",
                ys: vec!["sim_time_ns", "t_snp_ns", "t_min_ns", "t_min_nodata_ns"],
                log_x: true,
            });
        }
        Program::Distribute => {
            out.table = Table::new(&["p", "sim_time_ns", "t_d_ns", "spawns"]);
            for &p in &a.p.0 {
                let cfg = program_config(a.topo.build(Hypercube::dimension_for(p)?)?, &a.model)?;
                let r = run_distribute(&cfg)?;
                out.table.push(vec![
                    Cell::Int(p as i64),
                    Cell::Int(r.time.as_ns() as i64),
                    Cell::ns(model.t_d(p)?),
                    Cell::Int(r.spawns.len() as i64),
                ]);
            }
            out.plot = Some(Plot {
                title: "distribute".into(),
                x: "p",
                ys: vec!["sim_time_ns", "t_d_ns"],
                log_x: true,
            });
        }
    }
    Ok(out)
}

pub fn cmd_predict(a: &PredictArgs) -> Result<Output, CliError> {
    let formula: Formula = a.formula.parse()?;
    let model = CostModel::new(a.model.constants()?);
    let mode = a.model.mode();
    let mut out = Output {
        table: Table::new(&["n", "p", "formula", "time_ns"]),
        ..Output::default()
    };
    for &n in &a.n {
        for &p in &a.p.0 {
            if formula == Formula::ParallelSort && n < p {
                continue;
            }
            let pr = model.predict(formula, n, p, mode)?;
            out.table.push(vec![
                Cell::Int(n as i64),
                Cell::Int(p as i64),
                Cell::text(formula.name()),
                Cell::ns(pr.time_ns),
            ]);
            out.messages
                .push(format!("{formula}(n={n}, p={p}) = {}", micros(pr.time_ns)));
        }
    }
    if formula == Formula::ParallelSort {
        for &n in &a.n {
            if let Ok(best) = model.argmin_p(n) {
                out.messages.push(format!("n={n}: minimum at p={best}"));
            }
        }
    }
    out.plot = Some(Plot {
        title: formula.name().into(),
        x: "p",
        ys: vec!["time_ns"],
        log_x: true,
    });
    Ok(out)
}

#[derive(Debug, Deserialize)]
struct MeasurementRow {
    model: String,
    x: f64,
    time_ns: f64,
}

/// Parses measurement CSV; errors carry the line number.
pub fn parse_measurements(text: &str) -> Result<Vec<Measurement>, CliError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for rec in rdr.deserialize::<MeasurementRow>() {
        let row = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            CliError::Usage(format!("measurements line {line}: {e}"))
        })?;
        let model: MeasuredModel = row
            .model
            .parse()
            .map_err(|e| CliError::Usage(format!("measurements line {}: {e}", rows.len() + 2)))?;
        rows.push(Measurement {
            model,
            x: row.x,
            time_ns: row.time_ns,
        });
    }
    Ok(rows)
}

pub fn measurements_csv(rows: &[Measurement]) -> String {
    let mut t = Table::new(&["model", "x", "time_ns"]);
    for r in rows {
        t.push(vec![
            Cell::text(r.model.name()),
            Cell::ns(r.x),
            Cell::ns(r.time_ns),
        ]);
    }
    t.to_csv()
}

pub fn cmd_calibrate(a: &CalibrateArgs) -> Result<Output, CliError> {
    let base = match &a.constants {
        None => CostConstants::default(),
        Some(p) => CostConstants::parse(&read(p)?)?,
    };
    let rows = match &a.input {
        Some(p) => parse_measurements(&read(p)?)?,
        None => calibration_measurements(&ProgramConfig {
            constants: base,
            ..ProgramConfig::new(Hypercube::uniform(0)?)
        })?,
    };
    if let Some(p) = &a.save_measurements {
        write(p, &measurements_csv(&rows))?;
    }
    let cal = calibrate(base, &rows)?;
    let mut out = Output {
        text: Some(cal.constants.to_file_string()),
        ..Output::default()
    };
    let mut t = Table::new(&["model", "slope", "intercept", "residual_norm"]);
    for (m, fit) in &cal.fits {
        out.messages.push(format!(
            "{m}: slope {:.4} intercept {:.4} residual {:.4}",
            fit.slope, fit.intercept, fit.residual_norm
        ));
        t.push(vec![
            Cell::text(m.name()),
            Cell::text(format!("{}", fit.slope)),
            Cell::text(format!("{}", fit.intercept)),
            Cell::text(format!("{}", fit.residual_norm)),
        ]);
    }
    let c = cal.constants;
    out.messages.push(format!(
        "C_a {:.2}ns, C_b {:.2}ns, C_j {}, C_c {:.2}ns, C_d {:.2}ns",
        c.merge_word_ns,
        c.merge_call_ns,
        micros(c.distribute_init_ns),
        c.sort_word_log_ns,
        c.sort_word_ns
    ));
    out.table = t;
    Ok(out)
}

type Check = Result<String, String>;

fn check_single_hop(a: &VerifyArgs, rng: &mut ChaCha8Rng) -> Check {
    let mut spawns = 0usize;
    for d in 0..=a.max_d {
        let cfg = program_config(a.topo.build(d).map_err(|e| e.to_string())?, &a.model)
            .map_err(|e| e.to_string())?;
        let r = run_distribute(&cfg).map_err(|e| e.to_string())?;
        spawns += r.spawns.len();
        for _ in 0..3 {
            let p = 1usize << d;
            let n = rng.gen_range(p..=4 * p + 64);
            let r =
                run_msort(&cfg, random_words(n, rng.gen()), Threshold::Auto).map_err(|e| e.to_string())?;
            spawns += r.spawns.len();
        }
    }
    Ok(format!("{spawns} spawns, all to neighbours"))
}

fn check_reduction(a: &VerifyArgs, rng: &mut ChaCha8Rng) -> Check {
    let constants = a.model.constants().map_err(|e| e.to_string())?;
    let model = CostModel::new(constants);
    for n in 1..=4096u64 {
        let (x, y) = (
            model.t_snp(n, 1).map_err(|e| e.to_string())?,
            model.t_s1(n as f64),
        );
        if x != y {
            return Err(format!("t_snp({n}, 1) = {x} but t_s1({n}) = {y}"));
        }
    }
    let cfg = program_config(Hypercube::uniform(0).map_err(|e| e.to_string())?, &a.model)
        .map_err(|e| e.to_string())?;
    for _ in 0..a.cases.min(20) {
        let n = rng.gen_range(1..=512);
        let r = run_msort(&cfg, random_words(n, rng.gen()), Threshold::Auto).map_err(|e| e.to_string())?;
        let want = model.t_seq(n as u64, cfg.seq_mode);
        if !r.spawns.is_empty() || (r.time.as_ns() as f64 - want).abs() > 10.0 {
            return Err(format!(
                "p=1, n={n}: {} spawns, {}ns vs {want}ns",
                r.spawns.len(),
                r.time.as_ns()
            ));
        }
    }
    Ok("p=1 is the sequential sort".into())
}

fn check_sorted(a: &VerifyArgs, rng: &mut ChaCha8Rng) -> Check {
    let mut runs = 0;
    for i in 0..a.cases {
        let d = (i as u32) % (a.max_d + 1);
        let p = 1usize << d;
        let n = rng.gen_range(p..=p * 8 + 32);
        let cfg = program_config(a.topo.build(d).map_err(|e| e.to_string())?, &a.model)
            .map_err(|e| e.to_string())?;
        for th in [Threshold::Auto, Threshold::Words(1), Threshold::Words(n)] {
            let r = run_msort(&cfg, random_words(n, rng.gen()), th).map_err(|e| e.to_string())?;
            runs += 1;
            if !(r.sorted && r.permutation) {
                return Err(format!("n={n} p={p} {th:?}: output not a sorted permutation"));
            }
            if th == Threshold::Words(n) && !r.spawns.is_empty() {
                return Err(format!("n={n} p={p}: threshold n still spawned"));
            }
        }
    }
    Ok(format!("{runs} sorts"))
}

fn check_determinism(a: &VerifyArgs) -> Check {
    let cfg = program_config(a.topo.build(a.max_d).map_err(|e| e.to_string())?, &a.model)
        .map_err(|e| e.to_string())?;
    let data = random_words((1usize << a.max_d) * 16, a.seed);
    let once = || -> Result<(String, String), String> {
        let d = run_distribute(&cfg).map_err(|e| e.to_string())?;
        let s = run_msort(&cfg, data.clone(), Threshold::Auto).map_err(|e| e.to_string())?;
        Ok((d.trace_hash, s.trace_hash))
    };
    let (x, y) = (once()?, once()?);
    if x != y {
        return Err(format!("trace hashes differ: {x:?} vs {y:?}"));
    }
    Ok(format!("trace {}", &x.1[..16]))
}

fn check_conservation(a: &VerifyArgs) -> Check {
    // Every run checks threads, memory and jump tables on exit.
    for d in 0..=a.max_d {
        let cfg = program_config(a.topo.build(d).map_err(|e| e.to_string())?, &a.model)
            .map_err(|e| e.to_string())?;
        run_distribute(&cfg).map_err(|e| e.to_string())?;
        run_msort(&cfg, random_words((1 << d) * 8, a.seed), Threshold::Words(1))
            .map_err(|e| e.to_string())?;
    }
    Ok("threads, memory and jump tables restored".into())
}

pub fn cmd_verify(a: &VerifyArgs) -> Result<Output, CliError> {
    // Surface configuration problems as usage errors before any property runs.
    a.topo.build(a.max_d)?;
    a.model.constants()?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let checks: Vec<(&str, Check)> = vec![
        ("single-hop", check_single_hop(a, &mut rng)),
        ("reduction", check_reduction(a, &mut rng)),
        ("sorted", check_sorted(a, &mut rng)),
        ("determinism", check_determinism(a)),
        ("conservation", check_conservation(a)),
    ];
    let mut out = Output {
        table: Table::new(&["property", "status", "detail"]),
        ..Output::default()
    };
    for (name, r) in checks {
        let (status, detail) = match r {
            Ok(d) => ("pass", d),
            Err(d) => {
                out.failures.push(name.to_string());
                ("FAIL", d)
            }
        };
        out.messages.push(format!("{status} {name}: {detail}"));
        out.table
            .push(vec![Cell::text(name), Cell::text(status), Cell::text(detail)]);
    }
    Ok(out)
}

pub fn gnuplot_script(plot: &Plot, table: &Table, data: &Path) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "set datafile separator ','");
    let _ = writeln!(s, "set key autotitle columnhead");
    let _ = writeln!(s, "set title \"{}\"", plot.title);
    let _ = writeln!(s, "set xlabel \"{}\"", plot.x);
    let _ = writeln!(s, "set ylabel \"ns\"");
    if plot.log_x {
        let _ = writeln!(s, "set logscale x 2");
    }
    let x = table.column(plot.x).map_or(1, |i| i + 1);
    let series: Vec<String> = plot
        .ys
        .iter()
        .filter_map(|y| table.column(y))
        .map(|i| format!("\"{}\" using {x}:{} with linespoints", data.display(), i + 1))
        .collect();
    let _ = writeln!(s, "plot {}", series.join(", \\\n     "));
    s
}

/// Result of a whole invocation.
#[derive(Debug)]
pub struct Invocation {
    pub output: Output,
    pub format: Format,
    pub out: Option<PathBuf>,
    pub gnuplot: bool,
}

pub fn dispatch(cli: &Cli) -> Result<Invocation, CliError> {
    let (output, opts) = match &cli.command {
        Command::Sim(a) => (cmd_sim(a)?, Some(&a.output)),
        Command::Sweep(a) => (cmd_sweep(a)?, Some(&a.output)),
        Command::Predict(a) => (cmd_predict(a)?, Some(&a.output)),
        Command::Verify(a) => (cmd_verify(a)?, Some(&a.output)),
        Command::Calibrate(a) => {
            return Ok(Invocation {
                output: cmd_calibrate(a)?,
                format: Format::Csv,
                out: a.out.clone(),
                gnuplot: false,
            })
        }
    };
    let opts = opts.expect("table commands carry output options");
    Ok(Invocation {
        output,
        format: opts.format,
        out: opts.out.clone(),
        gnuplot: opts.gnuplot,
    })
}

/// Parses `args` (including the program name) and runs the command.
pub fn execute<I, T>(args: I) -> Result<Invocation, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| CliError::Usage(e.to_string()))?;
    dispatch(&cli)
}

impl Invocation {
    /// Writes the rendered output to `--out` (plus the gnuplot script) or
    /// returns it for stdout.
    pub fn emit(&self) -> Result<Option<String>, CliError> {
        let body = self.output.render(self.format);
        match &self.out {
            None => Ok(Some(body)),
            Some(path) => {
                write(path, &body)?;
                if self.gnuplot {
                    if let Some(plot) = &self.output.plot {
                        let mut gp = path.clone().into_os_string();
                        gp.push(".gp");
                        write(Path::new(&gp), &gnuplot_script(plot, &self.output.table, path))?;
                    }
                }
                Ok(None)
            }
        }
    }
}
