use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use psa_core::config::{EstimatorKind, MaskKind, SimSetting};
use psa_core::pipeline::schedule_dump;
use psa_core::synth::{duplicate_rows, gaussian, LocalQkv};
use psa_core::{
    adjacent_key_similarity, hilbert_order, run_pipeline, ErrorKind, Matrix, Preset, RunConfig, TensorFile,
};

#[derive(Parser)]
#[command(name = "psa", version, about = "Pyramid sparse attention experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic q.psat, k.psat and v.psat.
    Gen(GenArgs),
    /// Run the sparse pipeline on tensors and emit a JSON report.
    Run(Box<RunArgs>),
    /// Pretty-print a report, or flatten it to CSV.
    Report(ReportArgs),
    /// Adjacent-key cosine similarity by token stride, as CSV.
    Diag(DiagArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    /// Independent standard normal entries.
    Gaussian,
    /// Smooth random-walk fields over a 2D grid.
    Local,
    /// Keys and values with every row repeated `--factor` times.
    Duplicated,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, value_enum)]
    kind: Kind,
    #[arg(long)]
    seq_len: usize,
    #[arg(long)]
    head_dim: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    heads: usize,
    /// Grid `rows,cols` for the local generator.
    #[arg(long, value_delimiter = ',')]
    grid: Option<Vec<usize>>,
    #[arg(long, default_value_t = 2)]
    factor: usize,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// JSON config; flags below override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    q: PathBuf,
    #[arg(long)]
    k: PathBuf,
    #[arg(long)]
    v: PathBuf,
    /// Report path; stdout when absent.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Sparse attention output, `[heads, N, d]`.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Tile schedules as JSON.
    #[arg(long)]
    schedule_out: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args, Default)]
struct Overrides {
    #[arg(long)]
    q_block: Option<usize>,
    #[arg(long)]
    kv_block: Option<usize>,
    #[arg(long)]
    levels: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    grid: Option<Vec<usize>>,
    #[arg(long, value_parser = parse_estimator)]
    estimator: Option<EstimatorKind>,
    #[arg(long)]
    s_q: Option<usize>,
    #[arg(long)]
    s_k: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_mask)]
    mask: Option<MaskKind>,
    #[arg(long, value_delimiter = ',')]
    thresholds: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    cutpoints: Option<Vec<f64>>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    preset: Option<Preset>,
    /// `off` or comma-separated thresholds.
    #[arg(long, value_parser = parse_sim)]
    sim_thresholds: Option<SimSetting>,
    #[arg(long)]
    causal: bool,
    #[arg(long)]
    tile_len: Option<usize>,
    #[arg(long)]
    dense_prefix: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    unpermute: bool,
}

fn parse_estimator(s: &str) -> Result<EstimatorKind, String> {
    match s {
        "sampled-max" => Ok(EstimatorKind::SampledMax),
        "sampled-mean" => Ok(EstimatorKind::SampledMean),
        "antidiagonal" => Ok(EstimatorKind::Antidiagonal),
        _ => Err("expected sampled-max, sampled-mean or antidiagonal".into()),
    }
}

fn parse_mask(s: &str) -> Result<MaskKind, String> {
    match s {
        "threshold" => Ok(MaskKind::Threshold),
        "quantile" => Ok(MaskKind::Quantile),
        "binary" => Ok(MaskKind::Binary),
        "preset" => Ok(MaskKind::Preset),
        _ => Err("expected threshold, quantile, binary or preset".into()),
    }
}

fn parse_sim(s: &str) -> Result<SimSetting, String> {
    if s.eq_ignore_ascii_case("off") {
        return Ok(SimSetting::Keyword("off".into()));
    }
    s.split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| format!("{t:?}: {e}")))
        .collect::<Result<_, _>>()
        .map(SimSetting::Thresholds)
}

impl Overrides {
    fn apply(self, c: &mut RunConfig) {
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(x) = self.$f { c.$f = x; })* };
        }
        macro_rules! set_opt {
            ($($f:ident),*) => { $(if self.$f.is_some() { c.$f = self.$f; })* };
        }
        set!(
            q_block,
            kv_block,
            levels,
            estimator,
            s_q,
            s_k,
            stride,
            mask,
            sim_thresholds,
            tile_len,
            dense_prefix,
            steps
        );
        set_opt!(grid, seed, thresholds, cutpoints, tau, preset);
        c.causal |= self.causal;
        c.unpermute |= self.unpermute;
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Pretty,
    Csv,
}

#[derive(Args)]
struct ReportArgs {
    report: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Pretty)]
    format: Format,
}

#[derive(Args)]
struct DiagArgs {
    #[arg(long)]
    keys: PathBuf,
    /// Also measure the keys after a Hilbert reordering of this grid.
    #[arg(long, value_delimiter = ',')]
    grid: Option<Vec<usize>>,
    #[arg(long, default_value_t = 64)]
    max_stride: usize,
    /// Head to analyse in a multi-head file.
    #[arg(long, default_value_t = 0)]
    head: usize,
}

fn write_heads(path: &Path, heads: &[Matrix]) -> anyhow::Result<()> {
    TensorFile::from_heads(heads)?
        .write(path)
        .with_context(|| format!("writing {}", path.display()))
}

fn read_heads(path: &Path) -> anyhow::Result<Vec<Matrix>> {
    let t = TensorFile::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(t.to_heads()?)
}

fn gen(a: GenArgs) -> anyhow::Result<()> {
    let (n, d) = (a.seq_len, a.head_dim);
    let mut qs = Vec::new();
    let mut ks = Vec::new();
    let mut vs = Vec::new();
    for h in 0..a.heads {
        let seed = a.seed.wrapping_add(1000 * h as u64);
        let (q, k, v) = match a.kind {
            Kind::Gaussian => (gaussian(n, d, seed), gaussian(n, d, seed + 1), gaussian(n, d, seed + 2)),
            Kind::Local => {
                let Some([rows, cols]) = a.grid.as_deref().and_then(|g| <[usize; 2]>::try_from(g).ok()) else {
                    bail!(psa_core::Error::Config("--kind local needs --grid rows,cols".into()));
                };
                if rows * cols != n {
                    bail!(psa_core::Error::Config(format!(
                        "grid {rows}x{cols} does not cover N={n}"
                    )));
                }
                LocalQkv::new(rows, cols, d).generate(seed)
            }
            Kind::Duplicated => {
                if a.factor == 0 || n % a.factor != 0 {
                    bail!(psa_core::Error::Config(format!(
                        "--factor {} must divide N={n}",
                        a.factor
                    )));
                }
                let m = n / a.factor;
                (
                    gaussian(n, d, seed),
                    duplicate_rows(&gaussian(m, d, seed + 1), a.factor),
                    duplicate_rows(&gaussian(m, d, seed + 2), a.factor),
                )
            }
        };
        qs.push(q);
        ks.push(k);
        vs.push(v);
    }
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    for (name, heads) in [("q", &qs), ("k", &ks), ("v", &vs)] {
        write_heads(&a.out_dir.join(format!("{name}.psat")), heads)?;
    }
    Ok(())
}

fn run(a: RunArgs) -> anyhow::Result<()> {
    let mut config = match &a.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => RunConfig::default(),
    };
    a.overrides.apply(&mut config);
    let (q, k, v) = (read_heads(&a.q)?, read_heads(&a.k)?, read_heads(&a.v)?);
    let run = run_pipeline(&config, &q, &k, &v)?;

    let json = run.report.to_json();
    match &a.report {
        Some(p) => fs::write(p, json + "\n").with_context(|| format!("writing {}", p.display()))?,
        None => println!("{json}"),
    }
    if let Some(p) = &a.output {
        let outs: Vec<Matrix> = run.heads.iter().map(|h| h.output.clone()).collect();
        write_heads(p, &outs)?;
    }
    if let Some(p) = &a.schedule_out {
        fs::write(p, schedule_dump(&run) + "\n").with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn report(a: ReportArgs) -> anyhow::Result<()> {
    let text = fs::read_to_string(&a.report).with_context(|| format!("reading {}", a.report.display()))?;
    let r: serde_json::Value = serde_json::from_str(&text).map_err(psa_core::Error::from)?;
    let heads = r["heads"]
        .as_array()
        .ok_or_else(|| psa_core::Error::Malformed("report has no `heads` array".into()))?;
    let mut out = std::io::stdout().lock();
    match a.format {
        Format::Csv => {
            let levels = heads
                .first()
                .and_then(|h| h["level_histogram"].as_array())
                .map_or(0, Vec::len);
            let hist: Vec<String> = (0..levels).map(|h| format!("level_{h}")).collect();
            writeln!(
                out,
                "head,rho_bar,sparsity,kv_coverage,relative_error,schedule_deviation,utilization,naive_utilization,skipped_rows,{}",
                hist.join(",")
            )?;
            for h in heads {
                let hist: Vec<String> = h["level_histogram"]
                    .as_array()
                    .map(|a| a.iter().map(|x| x.to_string()).collect())
                    .unwrap_or_default();
                writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{},{}",
                    h["head"],
                    h["rho_bar"],
                    h["sparsity"],
                    h["kv_coverage"],
                    h["relative_error"],
                    h["schedule_deviation"],
                    h["utilization"]["utilization"],
                    h["naive_utilization"]["utilization"],
                    h["skipped_rows"],
                    hist.join(",")
                )?;
            }
        }
        Format::Pretty => {
            let l = &r["layout"];
            writeln!(
                out,
                "layout   N={} d={} b_q={} b_k={} H={}  ({}x{} blocks)",
                l["seq_len"], l["head_dim"], l["q_block"], l["kv_block"], l["levels"], l["n_q"], l["n_k"]
            )?;
            writeln!(
                out,
                "mask     {}  estimator {}  permuted {}",
                r["config"]["mask"], r["config"]["estimator"], r["permuted"]
            )?;
            for h in heads {
                let hist: Vec<String> = h["level_histogram"]
                    .as_array()
                    .map(|a| {
                        a.iter()
                            .map(|x| format!("{:.3}", x.as_f64().unwrap_or(f64::NAN)))
                            .collect()
                    })
                    .unwrap_or_default();
                let f = |v: &serde_json::Value| v.as_f64().unwrap_or(f64::NAN);
                writeln!(
                    out,
                    "head {}   rho_bar {:.4}  sparsity {:.4}  coverage {:.4}  rel.err {:.3e}  util {:.3} (naive {:.3})  skipped {}",
                    h["head"],
                    f(&h["rho_bar"]),
                    f(&h["sparsity"]),
                    f(&h["kv_coverage"]),
                    f(&h["relative_error"]),
                    f(&h["utilization"]["utilization"]),
                    f(&h["naive_utilization"]["utilization"]),
                    h["skipped_rows"]
                )?;
                writeln!(out, "         levels 0..H  [{}]", hist.join(" "))?;
            }
            let p = &r["step_plan"];
            writeln!(
                out,
                "mean     rel.err {:.3e}  rho_bar {:.4}  steps {} dense + {} sparse (effective rho_bar {:.4})",
                r["mean_relative_error"].as_f64().unwrap_or(f64::NAN),
                r["mean_rho_bar"].as_f64().unwrap_or(f64::NAN),
                p["dense_steps"],
                p["sparse_steps"],
                p["effective_rho_bar"].as_f64().unwrap_or(f64::NAN)
            )?;
            writeln!(out, "time     {:.1} ms", r["wall_time_ms"].as_f64().unwrap_or(f64::NAN))?;
        }
    }
    Ok(())
}

fn diag(a: DiagArgs) -> anyhow::Result<()> {
    let heads = read_heads(&a.keys)?;
    let Some(k) = heads.get(a.head) else {
        bail!(psa_core::Error::InvalidArgument(format!(
            "head {} not in a {}-head file",
            a.head,
            heads.len()
        )));
    };
    let hilbert = match &a.grid {
        Some(g) => Some(hilbert_order(g)?.apply(k)?),
        None => None,
    };
    let max = a.max_stride.min(k.rows().saturating_sub(1));
    let mut out = std::io::stdout().lock();
    let header = if hilbert.is_some() {
        "stride,row_major,hilbert"
    } else {
        "stride,row_major"
    };
    writeln!(out, "{header}")?;
    let fmt = |m: Option<f64>| m.map_or_else(String::new, |x| x.to_string());
    for s in 1..=max {
        let base = adjacent_key_similarity(k, s)?.mean;
        match &hilbert {
            Some(hk) => writeln!(out, "{s},{},{}", fmt(base), fmt(adjacent_key_similarity(hk, s)?.mean))?,
            None => writeln!(out, "{s},{}", fmt(base))?,
        }
    }
    Ok(())
}

/// 3 for I/O, 4 for invalid input or configuration, 5 for numeric failures.
/// Usage errors exit with clap's code 2.
fn exit_code(e: &anyhow::Error) -> u8 {
    let kind = e
        .chain()
        .find_map(|c| c.downcast_ref::<psa_core::Error>().map(psa_core::Error::kind))
        .or_else(|| e.chain().any(|c| c.is::<std::io::Error>()).then_some(ErrorKind::Io));
    match kind {
        Some(ErrorKind::Io) => 3,
        Some(ErrorKind::Numeric) => 5,
        Some(ErrorKind::Validation) | None => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => gen(a),
        Command::Run(a) => run(*a),
        Command::Report(a) => report(a),
        Command::Diag(a) => diag(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
