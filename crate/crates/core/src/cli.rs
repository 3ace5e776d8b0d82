//! Command-line front end. Every command writes its artifacts, a
//! `config.json` echo and an `ifl.log` into the output directory.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{IflError, Result};
use crate::eval::{evaluate, write_metrics_json, MetricsReport};
use crate::logging;
use crate::model::{mask_report, ModelState};
use crate::plot::{plot_file, render, PlotKind, Table};
use crate::schema::{write_dataset, Dataset, Side, Split};
use crate::syndata::{shift_report, write_ground_truth, GroundTruth};
use crate::train::{sweep, train, Selection, SweepParam, SweepTable, Variant};

pub const CONFIG_FILE: &str = "config.json";
pub const LOG_FILE: &str = "ifl.log";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";

#[derive(Debug, Parser)]
#[command(name = "ifl", version, about = "Invariant feature learning for two-tower recommendation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON config with `data`, `model`, `train` and `eval` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// `key=value` override; `a.b=c` or a bare key unique across sections.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Args)]
struct FromRun {
    /// Directory written by `train`.
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset with planted spurious fields.
    GenData(Common),
    /// Train one model and evaluate it on every held-out split.
    Train(Common),
    /// Re-evaluate a trained checkpoint.
    Eval(FromRun),
    /// Train every ablation variant with a shared seed.
    Ablate(Common),
    /// One training run per value of a hyper-parameter.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_sweep_param)]
        param: SweepParam,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Eval-mode mask value of every field of a trained checkpoint.
    MaskReport(FromRun),
    /// P(y=1 | field value) per split.
    ShiftReport {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        side: Option<Side>,
        /// Field index or name; defaults to the planted spurious fields.
        #[arg(long)]
        field: Option<String>,
    },
    /// Render a CSV table as an SVG chart.
    Plot {
        #[arg(long)]
        table: PathBuf,
        #[arg(long, value_enum)]
        kind: PlotKind,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_sweep_param(s: &str) -> std::result::Result<SweepParam, String> {
    s.parse::<SweepParam>().map_err(|e| e.to_string())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub fingerprint: String,
    /// Epoch whose parameters are stored; 0 is the initialization.
    pub epoch: usize,
    pub state: ModelState<f64>,
}

fn prepare(out: &Path, cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(out)?;
    logging::attach_file(&out.join(LOG_FILE))?;
    cfg.write(&out.join(CONFIG_FILE))
}

fn load_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| IflError::Config(format!("cannot read {}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_masks(path: &Path, state: &ModelState<f64>, truth: Option<&GroundTruth>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["side", "field", "value", "planted"])?;
    let mut index = BTreeMap::<Side, usize>::new();
    for row in mask_report(state) {
        let i = index.entry(row.side).or_default();
        let planted = match truth {
            Some(t) if t.spurious(row.side).contains(i) => "spurious",
            Some(t) if t.invariant(row.side).contains(i) => "invariant",
            _ => "",
        };
        *i += 1;
        w.write_record([row.side.as_str(), &row.field, &format!("{:.6}", row.value), planted])?;
    }
    w.flush()?;
    Ok(())
}

fn masks_chart(state: &ModelState<f64>) -> Result<String> {
    let rows = mask_report(state);
    let t = Table {
        x_name: "field".into(),
        labels: rows.iter().map(|r| format!("{}:{}", r.side, r.field)).collect(),
        series: vec!["mask".into()],
        cells: rows.iter().map(|r| vec![Some(r.value)]).collect(),
    };
    render(&t, PlotKind::Bar, "eval-mode mask values")
}

fn evaluate_all(state: &ModelState<f64>, d: &Dataset, cfg: &RunConfig, hash: &str) -> Result<Vec<MetricsReport>> {
    [Split::Val, Split::TestIid, Split::TestOod]
        .into_iter()
        .filter(|s| d.interactions.iter().any(|r| r.split == *s && r.is_positive()))
        .map(|s| {
            let mut r = evaluate(state, d, s, &cfg.ks())?;
            r.config_hash = hash.to_string();
            Ok(r)
        })
        .collect()
}

/// Trains with `cfg` and writes the run directory. Returns the metrics.
fn train_into(out: &Path, cfg: &RunConfig, d: &Dataset, truth: Option<&GroundTruth>) -> Result<Vec<MetricsReport>> {
    std::fs::create_dir_all(out)?;
    cfg.write(&out.join(CONFIG_FILE))?;
    let o = train::<f64>(d, &cfg.model, &cfg.train)?;
    o.history.write_csv(&out.join("history.csv"))?;
    let epoch = match cfg.train.selection {
        Selection::Best => o.history.best_epoch,
        Selection::Last => o.history.epochs.last().map_or(0, |e| e.epoch),
    };
    let ck = Checkpoint {
        fingerprint: o.fingerprint.clone(),
        epoch,
        state: o.state,
    };
    std::fs::write(out.join(CHECKPOINT_FILE), serde_json::to_string(&ck)? + "\n")?;
    write_masks(&out.join("mask_report.csv"), &ck.state, truth)?;
    let reports = evaluate_all(&ck.state, d, cfg, &o.fingerprint)?;
    write_metrics_json(&out.join("metrics.json"), &reports)?;
    for r in &reports {
        log::info!(
            "{}: recall@{k} {:.4}, ndcg@{k} {:.4} over {} users",
            r.split.as_str(),
            r.recall(cfg.train.eval_k).unwrap_or(f64::NAN),
            r.ndcg(cfg.train.eval_k).unwrap_or(f64::NAN),
            r.n_users,
            k = cfg.train.eval_k
        );
    }
    Ok(reports)
}

fn gen_data(c: &Common) -> Result<()> {
    let cfg = RunConfig::load(c.config.as_deref(), &c.set)?;
    prepare(&c.out, &cfg)?;
    let (d, truth) = crate::syndata::generate(&cfg.data.synthetic)?;
    write_dataset(&d, &c.out)?;
    write_ground_truth(&c.out.join("ground_truth.json"), &truth, &cfg.data.synthetic)?;
    log::info!(
        "wrote {} users, {} items, {} interactions to {}",
        d.n_users(),
        d.n_items(),
        d.interactions.len(),
        c.out.display()
    );
    Ok(())
}

fn train_cmd(c: &Common) -> Result<()> {
    let cfg = RunConfig::load(c.config.as_deref(), &c.set)?;
    prepare(&c.out, &cfg)?;
    let (d, truth) = cfg.data.dataset()?;
    train_into(&c.out, &cfg, &d, truth.as_ref())?;
    Ok(())
}

fn load_run(r: &FromRun) -> Result<(RunConfig, Checkpoint)> {
    let config = r.run.join(CONFIG_FILE);
    if !config.exists() {
        return Err(IflError::Config(format!("{} is not a run directory (no {CONFIG_FILE})", r.run.display())));
    }
    let cfg = RunConfig::load(Some(&config), &r.set)?;
    let ck: Checkpoint = load_json(&r.run.join(CHECKPOINT_FILE))?;
    Ok((cfg, ck))
}

fn eval_cmd(r: &FromRun) -> Result<()> {
    let (cfg, ck) = load_run(r)?;
    prepare(&r.out, &cfg)?;
    let (d, _) = cfg.data.dataset()?;
    if d.schema != ck.state.schema {
        return Err(IflError::Invalid("dataset schema differs from the checkpoint's".into()));
    }
    let reports = evaluate_all(&ck.state, &d, &cfg, &ck.fingerprint)?;
    write_metrics_json(&r.out.join("metrics.json"), &reports)
}

fn mask_report_cmd(r: &FromRun) -> Result<()> {
    let (cfg, ck) = load_run(r)?;
    prepare(&r.out, &cfg)?;
    let truth = match cfg.data.dir {
        None => Some(crate::syndata::generate(&cfg.data.synthetic)?.1),
        Some(_) => None,
    };
    write_masks(&r.out.join("mask_report.csv"), &ck.state, truth.as_ref())?;
    std::fs::write(r.out.join("mask_report.svg"), masks_chart(&ck.state)?)?;
    for m in mask_report(&ck.state) {
        log::info!("{} {}: {:.4}", m.side, m.field, m.value);
    }
    Ok(())
}

fn metric_cells(r: &MetricsReport, ks: &[usize], out: &mut String) {
    for k in ks {
        let _ = write!(
            out,
            ",{},{}",
            r.recall(*k).map(|v| format!("{v:.6}")).unwrap_or_default(),
            r.ndcg(*k).map(|v| format!("{v:.6}")).unwrap_or_default()
        );
    }
}

fn ablate_cmd(c: &Common) -> Result<()> {
    let cfg = RunConfig::load(c.config.as_deref(), &c.set)?;
    prepare(&c.out, &cfg)?;
    let (d, truth) = cfg.data.dataset()?;
    let ks = cfg.ks();
    let mut table = String::from("variant");
    for split in ["iid", "ood"] {
        for k in &ks {
            let _ = write!(table, ",{split}_recall@{k},{split}_ndcg@{k}");
        }
    }
    table.push('\n');
    let mut chart = String::from("variant,iid_recall,ood_recall\n");
    for v in Variant::ALL {
        log::info!("ablation variant {v}");
        let mut vc = cfg.clone();
        vc.train = cfg.train.with_variant(v);
        let reports = train_into(&c.out.join(v.as_str()), &vc, &d, truth.as_ref())?;
        let get = |s: Split| reports.iter().find(|r| r.split == s);
        let (iid, ood) = match (get(Split::TestIid), get(Split::TestOod)) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(IflError::Invalid("ablation needs test_iid and test_ood positives".into())),
        };
        table.push_str(v.as_str());
        metric_cells(iid, &ks, &mut table);
        metric_cells(ood, &ks, &mut table);
        table.push('\n');
        let k = cfg.train.eval_k;
        let _ = writeln!(
            chart,
            "{v},{:.6},{:.6}",
            iid.recall(k).unwrap_or(f64::NAN),
            ood.recall(k).unwrap_or(f64::NAN)
        );
    }
    std::fs::write(c.out.join("ablation.csv"), table)?;
    let chart_csv = c.out.join("ablation_recall.csv");
    std::fs::write(&chart_csv, chart)?;
    plot_file(&chart_csv, PlotKind::Bar, &c.out.join("ablation_recall.svg"))
}

fn sweep_cmd(c: &Common, param: SweepParam, values: &[f64]) -> Result<()> {
    let cfg = RunConfig::load(c.config.as_deref(), &c.set)?;
    prepare(&c.out, &cfg)?;
    let (d, _) = cfg.data.dataset()?;
    let table: SweepTable = sweep::<f64>(&d, &cfg.model, &cfg.train, param, values, &cfg.ks())?;
    let path = c.out.join("sweep.csv");
    std::fs::write(&path, table.to_csv())?;
    let t = Table::read(&path)?;
    for (name, series) in SweepTable::METRIC_COLUMNS.iter().zip(t.series.clone()) {
        let col = t.column(&series).expect("column from header");
        std::fs::write(c.out.join(format!("sweep_{name}.svg")), render(&col, PlotKind::Line, &series)?)?;
    }
    Ok(())
}

fn resolve_field(d: &Dataset, side: Side, field: &str) -> Result<usize> {
    let fields = d.schema.fields(side);
    field
        .parse::<usize>()
        .ok()
        .filter(|i| *i < fields.len())
        .or_else(|| fields.iter().position(|f| f.name == field))
        .ok_or_else(|| IflError::Config(format!("unknown {side} field `{field}`")))
}

fn shift_cmd(c: &Common, side: Option<Side>, field: Option<&str>) -> Result<()> {
    let cfg = RunConfig::load(c.config.as_deref(), &c.set)?;
    prepare(&c.out, &cfg)?;
    let (d, truth) = cfg.data.dataset()?;
    let targets: Vec<(Side, usize)> = match (side, field, &truth) {
        (Some(s), Some(f), _) => vec![(s, resolve_field(&d, s, f)?)],
        (None, Some(_), _) => return Err(IflError::Config("--field needs --side".into())),
        (s, None, Some(t)) => Side::BOTH
            .into_iter()
            .filter(|x| s.is_none_or(|s| s == *x))
            .flat_map(|x| t.spurious(x).iter().map(move |f| (x, *f)))
            .collect(),
        (_, None, None) => return Err(IflError::Config("--side and --field are required for loaded data".into())),
    };
    for (s, f) in targets {
        let rep = shift_report(&d, s, f)?;
        let stem = format!("shift_{s}_{}", rep.field_name);
        let csv = c.out.join(format!("{stem}.csv"));
        rep.write_csv(&csv)?;
        let t = Table::read(&csv)?;
        let probs: Vec<String> = t.series.iter().filter(|n| n.ends_with("_p")).cloned().collect();
        let chart = Table {
            series: probs.clone(),
            cells: t
                .cells
                .iter()
                .map(|row| probs.iter().map(|p| row[t.series.iter().position(|n| n == p).expect("series")]).collect())
                .collect(),
            ..t.clone()
        };
        std::fs::write(c.out.join(format!("{stem}.svg")), render(&chart, PlotKind::Bar, &stem)?)?;
        match rep.max_abs_shift(Split::Train, Split::TestOod) {
            Some(m) => log::info!("{s} field {}: max |P_train - P_ood| = {m:.4}", rep.field_name),
            None => log::warn!("{s} field {}: no value present in both train and test_ood", rep.field_name),
        }
    }
    Ok(())
}

fn dispatch(cmd: &Command) -> Result<()> {
    match cmd {
        Command::GenData(c) => gen_data(c),
        Command::Train(c) => train_cmd(c),
        Command::Eval(r) => eval_cmd(r),
        Command::Ablate(c) => ablate_cmd(c),
        Command::Sweep { common, param, values } => sweep_cmd(common, *param, values),
        Command::MaskReport(r) => mask_report_cmd(r),
        Command::ShiftReport { common, side, field } => shift_cmd(common, *side, field.as_deref()),
        Command::Plot { table, kind, out } => {
            if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            plot_file(table, *kind, out)
        }
    }
}

/// Runs one command and returns the process exit code: 0 on success, 1 on a
/// usage or configuration error, 2 on a runtime failure.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    logging::init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = dispatch(&cli.command);
    if let Err(e) = &result {
        log::error!("{e}");
    }
    logging::detach_file();
    result.map_or_else(|e| e.exit_code(), |_| 0)
}
