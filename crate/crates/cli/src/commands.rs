use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::{BufReader, Write};
use std::net::Ipv4Addr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use chrono::TimeDelta;
use clap::{Args, ValueEnum};

use revelio_core::aggregator::{
    addressing_realms, cgn_hop_distance, evaluate_device, gra_stability, per_isp_report, render_csv, render_text,
    DeviceResult,
};
use revelio_core::classifier::{analyze_run, evaluate_run, ClassifierConfig, DeviceMeta};
use revelio_core::interchange::{partition, read_records, to_line, Record};
use revelio_core::par::Exec;
use revelio_core::pathchar::{DelayRange, PathProfile};
use revelio_core::probing::{even_sizes, run_revelio_session, LiveNetwork, ProbeConfig, ProbeError, RawRunRecord};
use revelio_core::simulator::{
    generate_corpus_with, parse_topologies, simulate_session, write_topologies, CorpusOptions, SimOptions,
    SyntheticTopology, DEFAULT_JITTER_US,
};
use revelio_core::types::{AccessTechnology, VerdictKind};

use crate::config::{usage, FileConfig};

/// Where machine-readable output goes, plus flags shared by every command.
pub struct Env {
    pub out: Box<dyn Write>,
    pub file: FileConfig,
    pub deterministic: bool,
    pub exec: Exec,
}

impl Env {
    fn line(&mut self, s: &str) -> anyhow::Result<()> {
        writeln!(self.out, "{s}").context("writing output")
    }

    fn record(&mut self, r: &Record) -> anyhow::Result<()> {
        self.line(&to_line(r))
    }

    fn raw_run(&mut self, run: &RawRunRecord) -> anyhow::Result<()> {
        let run = if self.deterministic { run.without_timestamps() } else { run.clone() };
        self.record(&Record::RawRun(run))
    }

    fn verdict(&mut self, device_id: &str, verdict: &revelio_core::types::Verdict) -> anyhow::Result<()> {
        self.record(&Record::Verdict { device_id: device_id.to_owned(), verdict: verdict.clone() })
    }
}

#[derive(Debug, Args, Default)]
pub struct ProbeArgs {
    /// STUN server as host:port
    #[arg(long)]
    pub stun_server: Option<String>,
    /// External traceroute target
    #[arg(long)]
    pub target: Option<Ipv4Addr>,
    /// Probe sizes: a comma list, or FIRST:LAST:COUNT evenly spaced
    #[arg(long)]
    pub sizes: Option<String>,
    /// Repetitions per probe size
    #[arg(long)]
    pub reps: Option<u32>,
    #[arg(long)]
    pub max_ttl: Option<u8>,
    /// Per-probe timeout
    #[arg(long)]
    pub timeout_ms: Option<u64>,
    /// Pause between probes
    #[arg(long)]
    pub gap_ms: Option<u64>,
}

fn parse_sizes(s: &str) -> anyhow::Result<Vec<u16>> {
    let bad = |e: std::num::ParseIntError| usage(format!("sizes {s:?}: {e}"));
    let parts: Vec<&str> = s.split(':').collect();
    if let [first, last, count] = parts[..] {
        let (first, last) = (first.trim().parse().map_err(bad)?, last.trim().parse().map_err(bad)?);
        if last < first {
            return Err(usage(format!("sizes {s:?}: last below first")));
        }
        return Ok(even_sizes(first, last, count.trim().parse().map_err(bad)?));
    }
    s.split(',').map(|p| p.trim().parse().map_err(bad)).collect()
}

impl ProbeArgs {
    pub fn config(&self, file: &FileConfig) -> anyhow::Result<ProbeConfig> {
        let mut cfg = ProbeConfig::default();
        if let Some(v) = file.or(self.stun_server.clone(), "stun-server")? {
            cfg.stun_server = v;
        }
        if let Some(v) = file.or(self.target, "target")? {
            cfg.external_target = v;
        }
        if let Some(v) = file.or(self.sizes.clone(), "sizes")? {
            cfg.packet_sizes = parse_sizes(&v)?;
        }
        if let Some(v) = file.or(self.reps, "reps")? {
            cfg.repetitions_per_size = v;
        }
        if let Some(v) = file.or(self.max_ttl, "max-ttl")? {
            cfg.max_ttl = v;
        }
        if let Some(v) = file.or(self.timeout_ms, "timeout-ms")? {
            cfg.per_probe_timeout_ms = v;
        }
        if let Some(v) = file.or(self.gap_ms, "gap-ms")? {
            cfg.inter_probe_gap_ms = v;
        }
        cfg.validate().map_err(|e| usage(e.to_string()))?;
        Ok(cfg)
    }
}

#[derive(Debug, Args, Default)]
pub struct ClassifierArgs {
    /// Disable the spurious-link and expected-range corrections
    #[arg(long)]
    pub naive: bool,
    /// Print per-run link fits and delays to stderr
    #[arg(long)]
    pub dump_pathchar: bool,
    /// Expected access-link delay, TECH=MIN_US:MAX_US; repeatable
    #[arg(long, value_name = "TECH=MIN:MAX")]
    pub range: Vec<String>,
    /// ISP name for devices without metadata
    #[arg(long)]
    pub isp: Option<String>,
    /// Country code for devices without metadata
    #[arg(long)]
    pub country: Option<String>,
    /// Access technology for devices without metadata
    #[arg(long)]
    pub tech: Option<AccessTechnology>,
}

fn parse_range(spec: &str) -> anyhow::Result<(AccessTechnology, DelayRange)> {
    let err = || usage(format!("range {spec:?}: expected TECH=MIN_US:MAX_US"));
    let (tech, bounds) = spec.split_once('=').ok_or_else(err)?;
    let (lo, hi) = bounds.split_once(':').ok_or_else(err)?;
    let tech: AccessTechnology = tech.trim().parse().map_err(|e| usage(format!("range {spec:?}: {e}")))?;
    let lo: f64 = lo.trim().parse().map_err(|_| err())?;
    let hi: f64 = hi.trim().parse().map_err(|_| err())?;
    let range = DelayRange::new(lo, hi).map_err(|e| usage(format!("range {spec:?}: {e}")))?;
    Ok((tech, range))
}

impl ClassifierArgs {
    pub fn config(&self, file: &FileConfig) -> anyhow::Result<ClassifierConfig> {
        let mut cfg =
            if file.or_flag(self.naive, "naive")? { ClassifierConfig::naive() } else { ClassifierConfig::default() };
        let mut specs = self.range.clone();
        if specs.is_empty() {
            if let Some(v) = file.get::<String>("range")? {
                specs = v.split(',').map(str::to_owned).collect();
            }
        }
        for spec in specs {
            let (tech, range) = parse_range(&spec)?;
            cfg.ranges.set(tech, range).map_err(|e| usage(format!("range {spec:?}: {e}")))?;
        }
        Ok(cfg)
    }

    fn default_meta(&self, file: &FileConfig) -> anyhow::Result<DeviceMeta> {
        Ok(DeviceMeta {
            isp: file.or(self.isp.clone(), "isp")?.unwrap_or_default(),
            country: file.or(self.country.clone(), "country")?.unwrap_or_default(),
            technology: file.or(self.tech, "tech")?.unwrap_or_default(),
        })
    }

    fn dump(&self, file: &FileConfig) -> anyhow::Result<bool> {
        file.or_flag(self.dump_pathchar, "dump-pathchar")
    }
}

fn dump_profile(label: &str, p: &PathProfile) -> String {
    let mut s = format!("# {label}\n# ttl responder intercept_us slope_us_per_byte sizes rms_us\n");
    for f in &p.fits {
        let responder = f.responder.map_or_else(|| "-".to_owned(), |r| r.to_string());
        let _ = writeln!(
            s,
            "fit {} {responder} {:.3} {:.6} {} {:.3}",
            f.ttl, f.intercept_us, f.slope_us_per_byte, f.sample_count, f.residual_rms_us
        );
    }
    for d in &p.delays {
        let _ = writeln!(s, "link {} {:.3} {:?}", d.link_index, d.delay_us, d.confidence);
    }
    s
}

fn dump_pathchar(run: &RawRunRecord, meta: &DeviceMeta, cfg: &ClassifierConfig) {
    let input = analyze_run(run, meta, cfg);
    eprintln!(
        "{}{}# access link {:?} (naive {:?})",
        dump_profile(&format!("{} external", run.device_id), &input.external_profile),
        dump_profile(&format!("{} gra", run.device_id), &input.gra_profile),
        input.access_link.link_index,
        input.naive_access_link.link_index
    );
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub probe: ProbeArgs,
    #[command(flatten)]
    pub classifier: ClassifierArgs,
    /// Identifier recorded with the run
    #[arg(long)]
    pub device_id: Option<String>,
    /// Also emit the state and verdict for this run
    #[arg(long)]
    pub classify: bool,
}

pub fn run(ctx: &mut Env, args: &RunArgs) -> anyhow::Result<()> {
    let cfg = args.probe.config(&ctx.file)?;
    let ccfg = args.classifier.config(&ctx.file)?;
    let device = ctx.file.or(args.device_id.clone(), "device-id")?.unwrap_or_else(|| "local".into());
    let mut net = match LiveNetwork::open() {
        Ok(n) => n,
        Err(ProbeError::PermissionDenied(msg)) => {
            bail!("live probing needs raw socket privileges (run as root or grant CAP_NET_RAW): {msg}")
        }
        Err(e) => return Err(e.into()),
    };
    let record = run_revelio_session(&mut net, &device, &cfg)?;
    ctx.raw_run(&record)?;
    if args.classify {
        let meta = args.classifier.default_meta(&ctx.file)?;
        if args.classifier.dump(&ctx.file)? {
            dump_pathchar(&record, &meta, &ccfg);
        }
        let result = evaluate_device(std::slice::from_ref(&record), &meta, &ccfg)?;
        ctx.record(&Record::State(result.state))?;
        ctx.verdict(&device, &result.verdict)?;
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Topology file; several topologies separated by `---` lines
    #[arg(long)]
    pub topology: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Sessions per topology, an hour apart
    #[arg(long)]
    pub runs: Option<u32>,
    /// Upper bound of the uniform per-probe jitter
    #[arg(long)]
    pub jitter_us: Option<f64>,
    /// Print one verdict per topology instead of the raw runs
    #[arg(long)]
    pub classify: bool,
    #[command(flatten)]
    pub probe: ProbeArgs,
    #[command(flatten)]
    pub classifier: ClassifierArgs,
}

fn read_text(path: &Path) -> anyhow::Result<String> {
    if path == Path::new("-") {
        return std::io::read_to_string(std::io::stdin()).context("reading stdin");
    }
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn jitter(file: &FileConfig, cli: Option<f64>) -> anyhow::Result<f64> {
    let j = file.or(cli, "jitter-us")?.unwrap_or(DEFAULT_JITTER_US);
    if !(j >= 0.0 && j.is_finite()) {
        return Err(usage(format!("jitter must be a non-negative number, got {j}")));
    }
    Ok(j)
}

/// Seed of run `run` of topology `index`.
fn session_seed(seed: u64, index: usize, run: u32) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(((index as u64) << 16) | u64::from(run))
}

fn simulate_runs(
    t: &SyntheticTopology,
    index: usize,
    runs: u32,
    seed: u64,
    jitter_us: f64,
    cfg: &ProbeConfig,
) -> Result<Vec<RawRunRecord>, ProbeError> {
    (0..runs)
        .map(|r| {
            let opts = SimOptions {
                jitter_max_us: jitter_us,
                start: SimOptions::default().start + TimeDelta::hours(i64::from(r)),
                device_id: None,
            };
            simulate_session(t, cfg, session_seed(seed, index, r), &opts)
        })
        .collect()
}

fn topology_meta(t: &SyntheticTopology, defaults: &DeviceMeta) -> DeviceMeta {
    DeviceMeta { technology: t.technology, ..defaults.clone() }
}

pub fn simulate(ctx: &mut Env, args: &SimulateArgs) -> anyhow::Result<()> {
    let topologies = parse_topologies(&read_text(&args.topology)?)
        .with_context(|| format!("parsing {}", args.topology.display()))?;
    let cfg = args.probe.config(&ctx.file)?;
    let ccfg = args.classifier.config(&ctx.file)?;
    let seed = ctx.file.or(args.seed, "seed")?.unwrap_or(0);
    let runs = ctx.file.or(args.runs, "runs")?.unwrap_or(1);
    if runs == 0 {
        return Err(usage("--runs must be at least 1"));
    }
    let jitter_us = jitter(&ctx.file, args.jitter_us)?;
    let defaults = args.classifier.default_meta(&ctx.file)?;
    let dump = args.classifier.dump(&ctx.file)?;

    let all = ctx.exec.map_range(topologies.len(), |i| simulate_runs(&topologies[i], i, runs, seed, jitter_us, &cfg));
    for (t, records) in topologies.iter().zip(all) {
        let records = records.with_context(|| format!("simulating {}", t.name))?;
        if !args.classify {
            for r in &records {
                ctx.raw_run(r)?;
            }
            continue;
        }
        let meta = topology_meta(t, &defaults);
        if dump {
            records.iter().for_each(|r| dump_pathchar(r, &meta, &ccfg));
        }
        let result = evaluate_device(&records, &meta, &ccfg)?;
        ctx.verdict(&t.name, &result.verdict)?;
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    /// Raw-run records, one JSON object per line; `-` for stdin
    #[arg(default_value = "-")]
    pub input: PathBuf,
    /// Device metadata CSV: device_id,isp,cc,tech
    #[arg(long)]
    pub meta: Option<PathBuf>,
    #[command(flatten)]
    pub classifier: ClassifierArgs,
}

fn read_input(path: &Path) -> anyhow::Result<Vec<Record>> {
    let records = if path == Path::new("-") {
        read_records(std::io::stdin().lock())
    } else {
        let f = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
        read_records(BufReader::new(f))
    };
    records.with_context(|| format!("reading records from {}", path.display()))
}

/// Per-device metadata; a header line starting with `device_id` is skipped.
pub fn parse_meta(text: &str) -> anyhow::Result<BTreeMap<String, DeviceMeta>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || (i == 0 && line.starts_with("device_id")) {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        let [device, isp, cc, tech] = cells[..] else {
            bail!("metadata line {}: expected device_id,isp,cc,tech", i + 1);
        };
        let technology = tech.parse().with_context(|| format!("metadata line {}", i + 1))?;
        out.insert(device.to_owned(), DeviceMeta { isp: isp.to_owned(), country: cc.to_owned(), technology });
    }
    Ok(out)
}

pub fn classify(ctx: &mut Env, args: &ClassifyArgs) -> anyhow::Result<()> {
    let ccfg = args.classifier.config(&ctx.file)?;
    let defaults = args.classifier.default_meta(&ctx.file)?;
    let meta_path = ctx.file.or(args.meta.clone(), "meta")?;
    let metas = match meta_path {
        Some(p) => parse_meta(&read_text(&p)?)?,
        None => BTreeMap::new(),
    };
    let parts = partition(read_input(&args.input)?);
    if !parts.states.is_empty() || !parts.verdicts.is_empty() {
        log::warn!("ignoring {} state and verdict records in classify input", parts.states.len() + parts.verdicts.len());
    }
    let mut devices: BTreeMap<String, Vec<RawRunRecord>> = BTreeMap::new();
    for r in parts.raw_runs {
        devices.entry(r.device_id.clone()).or_default().push(r);
    }
    let fleet: Vec<(DeviceMeta, Vec<RawRunRecord>)> = devices
        .into_iter()
        .map(|(id, runs)| (metas.get(&id).cloned().unwrap_or_else(|| defaults.clone()), runs))
        .collect();
    if args.classifier.dump(&ctx.file)? {
        for (meta, runs) in &fleet {
            runs.iter().for_each(|r| dump_pathchar(r, meta, &ccfg));
        }
    }
    let results = revelio_core::aggregator::evaluate_fleet(&fleet, &ccfg, ctx.exec)?;
    for r in results {
        ctx.record(&Record::State(r.state.clone()))?;
        ctx.verdict(&r.state.device_id, &r.verdict)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Analysis {
    /// Verdict counts per ISP
    Isp,
    /// ISP hops between CPE and CGN
    Hops,
    /// Private and shared addresses seen on CGN paths
    Realms,
    /// GRAs per probe and GRAs shared between probes
    Gra,
    All,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// State and verdict records (raw runs too for the GRA analysis); `-` for stdin
    #[arg(default_value = "-")]
    pub input: PathBuf,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
    #[arg(long, value_enum)]
    pub analysis: Option<Analysis>,
    /// Count no-home-NAT probes as simple home NAT (three verdict columns)
    #[arg(long)]
    pub table1_compat: bool,
}

fn value_enum<T: ValueEnum>(file: &FileConfig, cli: Option<T>, key: &str) -> anyhow::Result<Option<T>> {
    if cli.is_some() {
        return Ok(cli);
    }
    file.get::<String>(key)?
        .map(|v| T::from_str(&v, true).map_err(|e| usage(format!("config {key} = {v:?}: {e}"))))
        .transpose()
}

/// Joins states with their verdicts; a state without one counts as inconclusive.
pub fn join_verdicts(
    states: Vec<revelio_core::types::RevelioState>,
    verdicts: Vec<(String, revelio_core::types::Verdict)>,
) -> Vec<DeviceResult> {
    let mut by_device: BTreeMap<String, revelio_core::types::Verdict> = verdicts.into_iter().collect();
    let mut out: Vec<DeviceResult> = states
        .into_iter()
        .map(|state| {
            let verdict = by_device.remove(&state.device_id).unwrap_or_else(|| {
                log::warn!("{} has no verdict; counted as inconclusive", state.device_id);
                revelio_core::types::Verdict {
                    kind: VerdictKind::Inconclusive,
                    evidence: vec![],
                    corrections_applied: BTreeSet::new(),
                }
            });
            DeviceResult { state, verdict }
        })
        .collect();
    for device in by_device.keys() {
        log::warn!("verdict for {device} has no state; ignored");
    }
    out.sort_by(|a, b| a.state.device_id.cmp(&b.state.device_id));
    out
}

fn hops_text(results: &[DeviceResult]) -> String {
    let h = cgn_hop_distance(results);
    let mut s = String::from("isp_id,distance,probes\n");
    for (isp, hist) in &h.per_isp {
        for (d, n) in hist {
            let _ = writeln!(s, "{isp},{d},{n}");
        }
    }
    let _ = writeln!(s, "# skipped {}", h.skipped);
    s
}

fn realms_text(results: &[DeviceResult]) -> String {
    let mut s = String::from("isp_id,cgn_probes,with_shared,with_private,with_both\n");
    for (isp, r) in addressing_realms(results) {
        let _ = writeln!(s, "{isp},{},{},{},{}", r.cgn_probes, r.with_shared, r.with_private, r.with_both);
    }
    s
}

fn gra_text(g: &revelio_core::aggregator::GraStability) -> String {
    let mut s = format!(
        "probes {}\nmean_gras_all {:.3}\nmean_gras_cgn {}\n",
        g.per_probe.len(),
        g.mean_all,
        g.mean_cgn.map_or_else(|| "-".to_owned(), |m| format!("{m:.3}"))
    );
    let _ = writeln!(s, "shared_gra_events {}", g.shared_gra_events.len());
    for e in &g.shared_gra_events {
        let _ = writeln!(
            s,
            "shared {} {} {} {} {} {}h",
            e.gra,
            e.devices.0,
            e.devices.1,
            e.overlap_start.to_rfc3339(),
            e.overlap_end.to_rfc3339(),
            e.overlap().num_hours()
        );
    }
    let _ = writeln!(s, "household_exclusions {}", g.excluded_household.len());
    s
}

pub fn report(ctx: &mut Env, args: &ReportArgs) -> anyhow::Result<()> {
    let format = value_enum(&ctx.file, args.format, "format")?.unwrap_or(Format::Text);
    let analysis = value_enum(&ctx.file, args.analysis, "analysis")?.unwrap_or(Analysis::Isp);
    let compat = ctx.file.or_flag(args.table1_compat, "table1-compat")?;
    let parts = partition(read_input(&args.input)?);
    let kinds: BTreeMap<String, VerdictKind> = parts.verdicts.iter().map(|(d, v)| (d.clone(), v.kind)).collect();
    let results = join_verdicts(parts.states, parts.verdicts);
    let wants = |a: Analysis| analysis == a || analysis == Analysis::All;

    if format == Format::Json {
        let mut doc = serde_json::Map::new();
        if wants(Analysis::Isp) {
            doc.insert("isp".into(), serde_json::to_value(per_isp_report(&results, compat))?);
        }
        if wants(Analysis::Hops) {
            doc.insert("hops".into(), serde_json::to_value(cgn_hop_distance(&results))?);
        }
        if wants(Analysis::Realms) {
            doc.insert("realms".into(), serde_json::to_value(addressing_realms(&results))?);
        }
        if wants(Analysis::Gra) {
            doc.insert("gra".into(), serde_json::to_value(gra_stability(&parts.raw_runs, &kinds))?);
        }
        return ctx.line(&serde_json::to_string_pretty(&doc)?);
    }

    let mut sections = Vec::new();
    if wants(Analysis::Isp) {
        let rows = per_isp_report(&results, compat);
        sections.push(if format == Format::Csv { render_csv(&rows, compat) } else { render_text(&rows, compat) });
    }
    if wants(Analysis::Hops) {
        sections.push(hops_text(&results));
    }
    if wants(Analysis::Realms) {
        sections.push(realms_text(&results));
    }
    if wants(Analysis::Gra) {
        if parts.raw_runs.is_empty() {
            log::warn!("GRA analysis needs raw-run records; none in input");
        }
        sections.push(gra_text(&gra_stability(&parts.raw_runs, &kinds)));
    }
    let text = sections.join("\n");
    write!(ctx.out, "{text}").context("writing output")
}

#[derive(Debug, Args)]
pub struct CorpusArgs {
    /// Number of topologies
    #[arg(short = 'n', long = "count")]
    pub count: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Sprinkle ICMP filtering, blocked STUN, silent and rate-limited hops
    #[arg(long)]
    pub faults: bool,
    /// Simulate one session per topology and print the raw runs
    #[arg(long)]
    pub run: bool,
    /// Classify the runs and print accuracy against the labels
    #[arg(long)]
    pub score: bool,
    #[arg(long)]
    pub jitter_us: Option<f64>,
    #[command(flatten)]
    pub probe: ProbeArgs,
    #[command(flatten)]
    pub classifier: ClassifierArgs,
}

const KINDS: [VerdictKind; 4] =
    [VerdictKind::Inconclusive, VerdictKind::NoHomeNat, VerdictKind::SimpleHomeNat, VerdictKind::CarrierGradeNat];

pub fn score_summary(outcomes: &[(&SyntheticTopology, VerdictKind)]) -> String {
    let total = outcomes.len();
    let correct = outcomes.iter().filter(|(t, k)| t.truth == *k).count();
    let inconclusive = outcomes.iter().filter(|(t, k)| *k == VerdictKind::Inconclusive && t.truth != *k).count();
    let wrong = total - correct - inconclusive;
    let pct = |n: usize| if total == 0 { 0.0 } else { 100.0 * n as f64 / total as f64 };
    let mut s = format!(
        "topologies {total}\ncorrect {correct} ({:.2}%)\ninconclusive {inconclusive} ({:.2}%)\nwrong {wrong} ({:.2}%)\n",
        pct(correct),
        pct(inconclusive),
        pct(wrong)
    );
    let _ = writeln!(s, "\ntruth \\ verdict,{}", KINDS.map(|k| k.as_str()).join(","));
    for truth in KINDS {
        let row: Vec<String> = KINDS
            .iter()
            .map(|k| outcomes.iter().filter(|(t, v)| t.truth == truth && v == k).count().to_string())
            .collect();
        let _ = writeln!(s, "{},{}", truth.as_str(), row.join(","));
    }
    for (t, k) in outcomes.iter().filter(|(t, k)| t.truth != *k) {
        let _ = writeln!(s, "miss {} truth {} verdict {}", t.name, t.truth, k);
    }
    s
}

pub fn corpus(ctx: &mut Env, args: &CorpusArgs) -> anyhow::Result<()> {
    let n = ctx.file.or(args.count, "count")?.unwrap_or(200);
    let seed = ctx.file.or(args.seed, "seed")?.unwrap_or(0);
    let faults = ctx.file.or_flag(args.faults, "faults")?;
    let topologies = generate_corpus_with(n, seed, &CorpusOptions { faults }, ctx.exec);
    if !args.run && !args.score {
        return write!(ctx.out, "{}", write_topologies(&topologies)).context("writing output");
    }

    let cfg = args.probe.config(&ctx.file)?;
    let ccfg = args.classifier.config(&ctx.file)?;
    let jitter_us = jitter(&ctx.file, args.jitter_us)?;
    let defaults = args.classifier.default_meta(&ctx.file)?;
    let runs = ctx.exec.map_range(topologies.len(), |i| simulate_runs(&topologies[i], i, 1, seed, jitter_us, &cfg));
    let mut records = Vec::with_capacity(runs.len());
    for (t, r) in topologies.iter().zip(runs) {
        records.push(r.with_context(|| format!("simulating {}", t.name))?.remove(0));
    }
    if !args.score {
        for r in &records {
            ctx.raw_run(r)?;
        }
        return Ok(());
    }
    let kinds = ctx.exec.map_range(topologies.len(), |i| {
        evaluate_run(&records[i], &topology_meta(&topologies[i], &defaults), &ccfg).1.kind
    });
    let outcomes: Vec<_> = topologies.iter().zip(kinds).collect();
    write!(ctx.out, "{}", score_summary(&outcomes)).context("writing output")
}
