//! Command-line front end: build, estimate, select, adapt, eval.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::diversity::{Bandwidth, KernelConfig, KernelKind};
use crate::ensemble_adapt::{adapt, ensemble_forward, write_history_csv, AdaptConfig, EnsembleModel, ImVariant};
use crate::error::{Error, Result};
use crate::selection::{select_scored, SelectionConfig, SelectionResult};
use crate::sute::{score_zoo, SuteConfig, TransferabilityReport, REPORT_HEADER};
use crate::synthzoo::{
    accuracy, build_zoo, generate_scenario, read_labels, reference_archs, reference_grid, spearman, ArchSpec,
    ScenarioSpec, TrainConfig,
};
use crate::tensorio::{load_zoo, read_head, resolve, write_head, ModelRecord, TargetBundle, ZooManifest};

pub const THREADS_ENV: &str = "ZOOADAPT_THREADS";
pub const ADAPTED_SUFFIX: &str = ".adapted";

#[derive(Debug, Parser)]
#[command(name = "zooadapt", version, about = "Transferability estimation, selection and adaptation over model zoos")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a preset scenario spec as JSON.
    Scenario(ScenarioArgs),
    /// Generate a scenario and train a zoo into OUT_DIR.
    Build(BuildArgs),
    /// Score every zoo member and write the transferability CSV.
    Estimate(EstimateArgs),
    /// Greedy transferable set plus diversity set, as JSON.
    Select(SelectArgs),
    /// Adapt the inlier heads; writes `.adapted` tensors and a loss history.
    Adapt(AdaptArgs),
    /// Accuracy and rank-correlation report against evaluation labels.
    Eval(EvalArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Preset {
    Reference,
    Poisoned,
}

#[derive(Debug, Args)]
pub struct ScenarioArgs {
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "reference")]
    pub preset: Preset,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    pub scenario: PathBuf,
    pub out_dir: PathBuf,
    /// JSON array of arch specs; the six reference maps when absent.
    #[arg(long)]
    pub archs: Option<PathBuf>,
    /// JSON array of training configs; the two reference configs when absent.
    #[arg(long)]
    pub grid: Option<PathBuf>,
    /// Overrides the scenario's seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct SuteArgs {
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    /// Defaults to 0.9 ln C.
    #[arg(long)]
    pub tau_h: Option<f64>,
    /// Defaults to 0.1 ln C.
    #[arg(long)]
    pub tau_l: Option<f64>,
}

impl SuteArgs {
    fn precheck(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("tau-h", self.tau_h), ("tau-l", self.tau_l)] {
            if let Some(v) = v {
                if !v.is_finite() {
                    return Err(Error::InvalidInput(format!("--{name} must be finite")));
                }
            }
        }
        if let (Some(h), Some(l)) = (self.tau_h, self.tau_l) {
            if l > h {
                return Err(Error::InvalidInput(format!("--tau-l {l} exceeds --tau-h {h}")));
            }
        }
        Ok(())
    }

    fn config(&self, classes: usize) -> Result<SuteConfig> {
        let d = SuteConfig::for_classes(classes);
        let cfg = SuteConfig {
            lambda1: self.lambda1.unwrap_or(d.lambda1),
            lambda2: self.lambda2.unwrap_or(d.lambda2),
            tau_h: self.tau_h.unwrap_or(d.tau_h),
            tau_l: self.tau_l.unwrap_or(d.tau_l),
        };
        cfg.validate(classes)?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    pub manifest: PathBuf,
    #[command(flatten)]
    pub sute: SuteArgs,
    /// Output CSV; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum KernelArg {
    Rbf,
    Linear,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    pub manifest: PathBuf,
    #[command(flatten)]
    pub sute: SuteArgs,
    #[arg(long, default_value_t = 2)]
    pub q: usize,
    #[arg(long, value_enum, default_value = "rbf")]
    pub kernel: KernelArg,
    /// Fixed RBF bandwidth; median heuristic when absent.
    #[arg(long)]
    pub bandwidth: Option<f64>,
    /// Take the highest-Div candidates instead of the lowest.
    #[arg(long)]
    pub flip_diversity: bool,
    /// Output JSON; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ImArg {
    Separate,
    Collaborative,
}

#[derive(Debug, Args)]
pub struct AdaptArgs {
    pub manifest: PathBuf,
    pub selection: PathBuf,
    #[arg(long, default_value_t = 0.3)]
    pub gamma1: f64,
    #[arg(long, default_value_t = 0.3)]
    pub gamma2: f64,
    #[arg(long, default_value_t = 0.95)]
    pub tau_recycle: f64,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "separate")]
    pub im: ImArg,
    /// Loss history CSV; `adapt_history.csv` beside the manifest when absent.
    #[arg(long)]
    pub history: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    pub manifest: PathBuf,
    /// Evaluation labels; the manifest's label file (if present on disk) when absent.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub selection: Option<PathBuf>,
    /// Also evaluate the selected ensemble with its `.adapted` heads.
    #[arg(long, requires = "selection")]
    pub adapted: bool,
    #[command(flatten)]
    pub sute: SuteArgs,
    #[arg(long)]
    pub out_dir: PathBuf,
}

fn write_output(out: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(p) => fs::write(p, bytes).map_err(|e| Error::io(p, e)),
        None => std::io::stdout().write_all(bytes).map_err(|e| Error::io("<stdout>", e)),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json { path: path.to_path_buf(), source })
}

fn manifest_dir(manifest: &Path) -> &Path {
    manifest.parent().unwrap_or(Path::new("."))
}

fn cmd_scenario(a: &ScenarioArgs) -> Result<()> {
    let spec = match a.preset {
        Preset::Reference => ScenarioSpec::reference(a.seed),
        Preset::Poisoned => ScenarioSpec::poisoned(a.seed),
    };
    fs::write(&a.out, spec.to_json()).map_err(|e| Error::io(&a.out, e))
}

fn cmd_build(a: &BuildArgs) -> Result<()> {
    let text = fs::read_to_string(&a.scenario).map_err(|e| Error::io(&a.scenario, e))?;
    let mut spec = ScenarioSpec::from_json(&text)?;
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    let archs: Vec<ArchSpec> = match &a.archs {
        Some(p) => read_json(p)?,
        None => reference_archs(),
    };
    let grid: Vec<TrainConfig> = match &a.grid {
        Some(p) => read_json(p)?,
        None => reference_grid(),
    };
    let scenario = generate_scenario(&spec)?;
    let (manifest, _) = build_zoo(&scenario, &archs, &grid, &a.out_dir)?;
    if manifest.models.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    Ok(())
}

fn cmd_estimate(a: &EstimateArgs) -> Result<()> {
    a.sute.precheck()?;
    let (models, target) = load_zoo(&a.manifest)?;
    let cfg = a.sute.config(target.classes)?;
    let scored = score_zoo(&models, &cfg)?;
    let mut buf = Vec::new();
    TransferabilityReport::new(&models, &scored).write_csv(&mut buf)?;
    write_output(a.out.as_deref(), &buf)
}

fn cmd_select(a: &SelectArgs) -> Result<()> {
    a.sute.precheck()?;
    let kernel = match a.kernel {
        KernelArg::Linear if a.bandwidth.is_some() => {
            return Err(Error::InvalidInput("--bandwidth only applies to --kernel rbf".into()))
        }
        KernelArg::Linear => KernelConfig::linear(),
        KernelArg::Rbf => KernelConfig {
            kind: KernelKind::Rbf,
            bandwidth: a.bandwidth.map_or(Bandwidth::Median, Bandwidth::Fixed),
        },
    };
    kernel.validate()?;
    let (models, target) = load_zoo(&a.manifest)?;
    let mut cfg = SelectionConfig::new(a.sute.config(target.classes)?);
    cfg.q = a.q;
    cfg.kernel = kernel;
    cfg.flip_diversity = a.flip_diversity;
    let scored = score_zoo(&models, &cfg.sute)?;
    let sel = select_scored(&models, &scored, &cfg)?;
    write_output(a.out.as_deref(), sel.to_json().as_bytes())
}

fn same_file(a: &Path, b: &Path) -> bool {
    match (fs::canonicalize(a), fs::canonicalize(b)) {
        (Ok(x), Ok(y)) => x == y,
        _ => a == b,
    }
}

fn adapted_path(p: &Path) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(ADAPTED_SUFFIX);
    PathBuf::from(s)
}

/// Head tensor paths of every model, keyed by id.
fn head_paths(manifest_path: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    let manifest = ZooManifest::read(manifest_path)?;
    let base = manifest_dir(manifest_path);
    Ok(manifest
        .models
        .iter()
        .map(|e| (e.id.clone(), resolve(base, &e.weights), resolve(base, &e.bias)))
        .collect())
}

fn labels_guard(a: &AdaptArgs, history: &Path) -> Result<()> {
    let manifest = ZooManifest::read(&a.manifest)?;
    let Some(rel) = manifest.target.labels.as_deref() else {
        return Ok(());
    };
    let labels = resolve(manifest_dir(&a.manifest), rel);
    for p in [a.manifest.as_path(), a.selection.as_path(), history] {
        if same_file(p, &labels) {
            return Err(Error::InvalidInput(format!(
                "refusing to adapt: {} is the evaluation label file",
                p.display()
            )));
        }
    }
    Ok(())
}

fn cmd_adapt(a: &AdaptArgs) -> Result<()> {
    let cfg = AdaptConfig {
        gamma1: a.gamma1,
        gamma2: a.gamma2,
        tau_recycle: a.tau_recycle,
        epochs: a.epochs,
        lr: a.lr,
        momentum: a.momentum,
        seed: a.seed,
        im_variant: match a.im {
            ImArg::Separate => ImVariant::Separate,
            ImArg::Collaborative => ImVariant::Collaborative,
        },
        ..AdaptConfig::default()
    };
    cfg.validate()?;
    let history_path = a
        .history
        .clone()
        .unwrap_or_else(|| manifest_dir(&a.manifest).join("adapt_history.csv"));
    labels_guard(a, &history_path)?;

    let (models, _) = load_zoo(&a.manifest)?;
    let sel = SelectionResult::read(&a.selection)?;
    let inliers = sel.inlier_records(&models)?;
    let outliers = sel.outlier_records(&models)?;
    let e = EnsembleModel::from_sutes(&inliers, &sel.inlier_sutes()?, sel.config.weight_temperature)?;
    let (adapted, history) = adapt(&e, &outliers, &cfg)?;

    let paths = head_paths(&a.manifest)?;
    for m in &adapted.members {
        let (_, w, b) = paths.iter().find(|(id, _, _)| *id == m.record.id).expect("inlier is in the manifest");
        write_head(&m.head, &adapted_path(w), &adapted_path(b))?;
    }
    let mut buf = Vec::new();
    write_history_csv(&history, &mut buf)?;
    fs::write(&history_path, buf).map_err(|e| Error::io(&history_path, e))
}

fn labels_for_eval(a: &EvalArgs, target: &TargetBundle) -> Result<Option<Vec<usize>>> {
    match (&a.labels, &target.labels_path) {
        (Some(p), _) => read_labels(p, target.classes).map(Some),
        (None, Some(p)) if p.exists() => read_labels(p, target.classes).map(Some),
        _ => Ok(None),
    }
}

fn fmt_spearman(x: &[f64], y: &[f64]) -> (String, String) {
    match spearman(x, y) {
        Ok(s) => (s.rho.to_string(), s.p_value.to_string()),
        Err(Error::Degenerate(_)) => ("degenerate".into(), "degenerate".into()),
        Err(_) => ("undefined".into(), "undefined".into()),
    }
}

fn adapted_ensemble<'a>(
    manifest: &Path,
    inliers: &[&'a ModelRecord],
    sutes: &[f64],
    temperature: f64,
) -> Result<EnsembleModel<'a>> {
    let paths = head_paths(manifest)?;
    let mut e = EnsembleModel::from_sutes(inliers, sutes, temperature)?;
    for m in &mut e.members {
        let (_, w, b) = paths.iter().find(|(id, _, _)| *id == m.record.id).expect("inlier is in the manifest");
        m.head = read_head(&adapted_path(w), &adapted_path(b))?;
    }
    Ok(e)
}

fn csv_writer(buf: &mut Vec<u8>) -> csv::Writer<&mut Vec<u8>> {
    csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(buf)
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    a.sute.precheck()?;
    let (models, target) = load_zoo(&a.manifest)?;
    let selection = a.selection.as_ref().map(SelectionResult::read).transpose()?;
    let cfg = match &selection {
        Some(s) => s.config.sute,
        None => a.sute.config(target.classes)?,
    };
    let labels = labels_for_eval(a, &target)?;
    let scored = score_zoo(&models, &cfg)?;
    let report = TransferabilityReport::new(&models, &scored);
    fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;

    let accs: Option<Vec<f64>> = labels
        .as_ref()
        .map(|l| scored.iter().map(|s| accuracy(&s.outputs.probs, l)).collect::<Result<_>>())
        .transpose()?;

    let mut buf = Vec::new();
    {
        let mut w = csv_writer(&mut buf);
        let mut header: Vec<&str> = REPORT_HEADER.to_vec();
        if accs.is_some() {
            header.push("accuracy");
        }
        w.write_record(&header)?;
        for (i, r) in report.rows.iter().enumerate() {
            let mut rec = vec![
                r.model_id.clone(),
                r.domain.clone(),
                r.arch.clone(),
                r.ic.to_string(),
                r.sc.to_string(),
                r.gd.to_string(),
                r.phi_gd.to_string(),
                r.sute.to_string(),
                r.ane.to_string(),
                r.nmi.to_string(),
                r.rank.to_string(),
            ];
            if let Some(acc) = &accs {
                rec.push(acc[i].to_string());
            }
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
    }
    let report_path = a.out_dir.join("report.csv");
    fs::write(&report_path, &buf).map_err(|e| Error::io(&report_path, e))?;

    let (Some(labels), Some(accs)) = (labels, accs) else {
        return Ok(());
    };

    let sutes: Vec<f64> = scored.iter().map(|s| s.components.sute.as_f64()).collect();
    let anes: Vec<f64> = scored.iter().map(|s| s.ane).collect();
    let nmis: Vec<f64> = scored.iter().map(|s| s.nmi).collect();
    let mut rows: Vec<(String, String)> = vec![("models".into(), models.len().to_string())];
    for (name, x) in [("sute", &sutes), ("ane", &anes), ("nmi", &nmis)] {
        let (rho, p) = fmt_spearman(x, &accs);
        rows.push((format!("spearman_{name}_rho"), rho));
        rows.push((format!("spearman_{name}_p"), p));
    }
    let best = accs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    rows.push(("best_single_accuracy".into(), best.to_string()));
    let all: Vec<&ModelRecord> = models.iter().collect();
    let uniform = EnsembleModel::new(&all, &vec![1.0 / all.len() as f64; all.len()])?;
    rows.push(("uniform_ensemble_accuracy".into(), accuracy(&ensemble_forward(&uniform)?, &labels)?.to_string()));
    if let Some(sel) = &selection {
        let inliers = sel.inlier_records(&models)?;
        let s = sel.inlier_sutes()?;
        let e = EnsembleModel::from_sutes(&inliers, &s, sel.config.weight_temperature)?;
        rows.push(("selected_ensemble_accuracy".into(), accuracy(&ensemble_forward(&e)?, &labels)?.to_string()));
        if a.adapted {
            let e = adapted_ensemble(&a.manifest, &inliers, &s, sel.config.weight_temperature)?;
            rows.push(("adapted_ensemble_accuracy".into(), accuracy(&ensemble_forward(&e)?, &labels)?.to_string()));
        }
    }
    let mut buf = Vec::new();
    {
        let mut w = csv_writer(&mut buf);
        w.write_record(["metric", "value"])?;
        for (k, v) in &rows {
            w.write_record([k, v])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
    }
    let summary_path = a.out_dir.join("summary.csv");
    fs::write(&summary_path, &buf).map_err(|e| Error::io(&summary_path, e))?;

    let mut pairs: Vec<(usize, f64)> = report.rows.iter().zip(&accs).map(|(r, &acc)| (r.rank, acc)).collect();
    pairs.sort_by_key(|p| p.0);
    let mut buf = Vec::new();
    {
        let mut w = csv_writer(&mut buf);
        w.write_record(["sute_rank", "accuracy"])?;
        for (r, acc) in pairs {
            w.write_record([r.to_string(), acc.to_string()])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
    }
    let plot_path = a.out_dir.join("plot_data.csv");
    fs::write(&plot_path, &buf).map_err(|e| Error::io(&plot_path, e))
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Scenario(a) => cmd_scenario(a),
        Command::Build(a) => cmd_build(a),
        Command::Estimate(a) => cmd_estimate(a),
        Command::Select(a) => cmd_select(a),
        Command::Adapt(a) => cmd_adapt(a),
        Command::Eval(a) => cmd_eval(a),
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::InvalidInput(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
    // A pool may already exist when called twice in one process; keep it.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Parse, run and report. Errors go to stderr as a single
/// `error[<kind>]: <message>` line; the return value is the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand) {
                let _ = e.print();
                return 0;
            }
            let text = e.to_string();
            let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("usage error");
            let msg = first.trim_start_matches("error: ");
            eprintln!("error[usage]: {}", one_line(msg));
            return 2;
        }
    };
    match configure_threads().and_then(|_| run(&cli)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {}", e.kind(), one_line(&e.to_string()));
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_flags() {
        let cli = Cli::try_parse_from(["zooadapt", "select", "m.json", "--q", "3", "--kernel", "linear", "--flip-diversity"]).unwrap();
        match cli.command {
            Command::Select(a) => {
                assert_eq!(a.q, 3);
                assert!(matches!(a.kernel, KernelArg::Linear));
                assert!(a.flip_diversity);
            }
            _ => panic!("wrong subcommand"),
        }
    }

    #[test]
    fn unknown_flag_is_a_usage_error() {
        assert_eq!(main_with_args(["zooadapt", "estimate", "m.json", "--bogus"]), 2);
    }

    #[test]
    fn adapted_requires_selection() {
        assert!(Cli::try_parse_from(["zooadapt", "eval", "m.json", "--adapted", "--out-dir", "x"]).is_err());
    }

    #[test]
    fn tau_order_checked_before_io() {
        let a = SuteArgs { lambda1: None, lambda2: None, tau_h: Some(0.1), tau_l: Some(0.5) };
        assert!(a.precheck().is_err());
    }

    #[test]
    fn adapted_suffix() {
        assert_eq!(adapted_path(Path::new("models/a.weights.ztf")), PathBuf::from("models/a.weights.ztf.adapted"));
    }
}
