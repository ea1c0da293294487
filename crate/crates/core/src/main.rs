use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

use gscodec::codec::{self, CodecError, PrepareConfig, PreparedScene, DEFAULT_BLOCKS, DEFAULT_DEPTH};
use gscodec::container;
use gscodec::model::{self, GaussianCloud};
use gscodec::quant::{BitWidthMatrix, NormKind, MAX_BITS};
use gscodec::search::{self, SearchConfig, SearchError};
use gscodec::splat::{self, Camera, DEFAULT_BETA};
use gscodec::synth::{self, SynthConfig};
use gscodec::transform::{TransformPlan, CHANNEL_COUNT};
use gscodec::vq::KMeansConfig;

const MIB: u64 = 1 << 20;

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Parse(String),
    #[error("{0}")]
    Infeasible(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("container: {0}")]
    Container(CodecError),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Parse(_) => 2,
            CliError::Infeasible(_) => 3,
            CliError::Io { .. } => 4,
            CliError::Container(_) => 5,
            CliError::Other(_) => 1,
        }
    }
}

impl From<SearchError> for CliError {
    fn from(e: SearchError) -> Self {
        match e {
            SearchError::Infeasible { .. } => CliError::Infeasible(e.to_string()),
            SearchError::Config(_) => CliError::Parse(e.to_string()),
            SearchError::Codec(c) => CliError::Other(c.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum NormArg {
    L1,
    L2,
    Linf,
}

impl From<NormArg> for NormKind {
    fn from(n: NormArg) -> Self {
        match n {
            NormArg::L1 => NormKind::L1,
            NormArg::L2 => NormKind::L2,
            NormArg::Linf => NormKind::Linf,
        }
    }
}

/// Parses a byte count such as `8MB`, `512KB`, `1.5MB` or `123456`.
/// `KB` and `MB` are powers of two.
fn parse_budget(s: &str) -> Result<u64, String> {
    let t = s.trim();
    let upper = t.to_ascii_uppercase();
    let (num, mult) = if let Some(n) = upper.strip_suffix("MB").or_else(|| upper.strip_suffix("MIB")) {
        (n.to_string(), MIB as f64)
    } else if let Some(n) = upper.strip_suffix("KB").or_else(|| upper.strip_suffix("KIB")) {
        (n.to_string(), 1024.0)
    } else if let Some(n) = upper.strip_suffix('B') {
        (n.to_string(), 1.0)
    } else {
        (upper.clone(), 1.0)
    };
    let v: f64 = num.trim().parse().map_err(|_| format!("invalid budget `{s}`"))?;
    let bytes = (v * mult).round();
    if !(bytes >= 1.0 && bytes < 2f64.powi(63)) {
        return Err(format!("budget `{s}` out of range"));
    }
    Ok(bytes as u64)
}

fn parse_tau(s: &str) -> Result<f64, String> {
    let v: f64 = s.trim().parse().map_err(|_| format!("invalid tau `{s}`"))?;
    if v > 0.0 && v <= 1.0 {
        Ok(v)
    } else {
        Err(format!("tau must be in (0, 1], got {v}"))
    }
}

#[derive(Debug, Parser)]
#[command(name = "gscodec", version, about = "Size-targeted compression of 3D Gaussian Splatting models")]
struct Cli {
    /// Worker threads; 0 uses every available core. Output does not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct CodecArgs {
    /// Octree depth (1..=21).
    #[arg(long, default_value_t = DEFAULT_DEPTH, value_parser = clap::value_parser!(u8).range(1..=21))]
    depth: u8,
    /// Quantization groups per channel.
    #[arg(long, default_value_t = DEFAULT_BLOCKS)]
    blocks: usize,
    /// SH codebook size.
    #[arg(long, default_value_t = 4096)]
    codebook: usize,
    /// Exponent on the volume score.
    #[arg(long, default_value_t = DEFAULT_BETA)]
    beta: f64,
    #[arg(long, value_enum, default_value = "l2")]
    norm: NormArg,
    /// Seed for codebook initialization and mini-batch order.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Camera list (JSON). Without it pruning uses the volume score alone.
    #[arg(long)]
    cameras: Option<PathBuf>,
}

impl CodecArgs {
    fn prepare(&self) -> PrepareConfig {
        PrepareConfig {
            depth: self.depth,
            blocks: self.blocks,
            norm: self.norm.into(),
            kmeans: KMeansConfig {
                k: self.codebook,
                seed: self.seed,
                ..KMeansConfig::default()
            },
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Encode with a fixed reserve ratio and bit-width matrix.
    Encode {
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long, default_value = "1", value_parser = parse_tau)]
        tau: f64,
        /// JSON bit-width matrix: 10 rows of `blocks` widths.
        #[arg(long)]
        q: Option<PathBuf>,
        /// Uniform width used when no matrix is given.
        #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u8).range(0..=16))]
        bits: u8,
        /// Fill the remaining budget with losslessly kept SH rows; fail if the
        /// container alone exceeds it.
        #[arg(long, value_parser = parse_budget)]
        budget: Option<u64>,
        #[command(flatten)]
        codec: CodecArgs,
    },
    /// Decode a container to a PLY file.
    Decode {
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// Original PLY; prints per-channel reconstruction error.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "linf")]
        norm: NormArg,
    },
    /// Search reserve ratio and bit-widths for a byte budget.
    Search {
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// Target size, e.g. `8MB` (2^20 bytes per MB).
        #[arg(long, value_parser = parse_budget)]
        budget: u64,
        /// Comma-separated reserve ratios.
        #[arg(long, value_delimiter = ',', value_parser = parse_tau)]
        tau_grid: Option<Vec<f64>>,
        /// Search a single reserve ratio.
        #[arg(long, value_parser = parse_tau, conflicts_with = "tau_grid")]
        tau: Option<f64>,
        /// Also write the report here.
        #[arg(long)]
        report: Option<PathBuf>,
        #[command(flatten)]
        codec: CodecArgs,
    },
    /// Print container metadata and section sizes.
    Info { input: PathBuf },
    /// Render a model and a container (or second PLY) and print PSNR per view.
    RenderEval {
        model: PathBuf,
        candidate: PathBuf,
        cameras: PathBuf,
    },
    /// Write a synthetic scene (`scene.ply` and `cameras.json`).
    Synth {
        #[arg(long, default_value_t = 100_000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u8).range(0..=3))]
        sh_degree: u8,
        #[arg(short, long, default_value = ".")]
        output: PathBuf,
    },
}

fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn load_cloud(path: &Path) -> Result<GaussianCloud, CliError> {
    model::load_ply(&read(path)?).map_err(|e| CliError::Parse(format!("{}: {e}", path.display())))
}

fn load_cameras(path: &Path) -> Result<Vec<Camera>, CliError> {
    let text = String::from_utf8(read(path)?).map_err(|_| CliError::Parse(format!("{}: not UTF-8", path.display())))?;
    splat::parse_cameras(&text).map_err(|e| CliError::Parse(format!("{}: {e}", path.display())))
}

fn optional_cameras(path: Option<&PathBuf>) -> Result<Vec<Camera>, CliError> {
    match path {
        Some(p) => load_cameras(p),
        None => {
            eprintln!("no cameras given; pruning by volume score only");
            Ok(Vec::new())
        }
    }
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable")
}

/// JSON has no infinity; identical renders are reported as the string "inf".
fn psnr_value(p: f64) -> Value {
    if p.is_infinite() {
        json!("inf")
    } else {
        json!(p)
    }
}

fn other(e: impl std::fmt::Display) -> CliError {
    CliError::Other(e.to_string())
}

fn cmd_encode(
    input: &Path,
    output: &Path,
    tau: f64,
    q_path: Option<&PathBuf>,
    bits: u8,
    budget: Option<u64>,
    args: &CodecArgs,
) -> Result<String, CliError> {
    let cloud = load_cloud(input)?;
    let cams = optional_cameras(args.cameras.as_ref())?;
    let cfg = args.prepare();
    let q = match q_path {
        Some(p) => {
            let rows: Vec<Vec<u8>> = serde_json::from_slice(&read(p)?)
                .map_err(|e| CliError::Parse(format!("{}: {e}", p.display())))?;
            let q = BitWidthMatrix { rows };
            q.check_shape(CHANNEL_COUNT, cfg.blocks)
                .map_err(|e| CliError::Parse(format!("{}: {e}", p.display())))?;
            if q.rows.iter().flatten().any(|&b| b > MAX_BITS) {
                return Err(CliError::Parse(format!("{}: widths must be at most {MAX_BITS}", p.display())));
            }
            q
        }
        None => BitWidthMatrix::uniform(CHANNEL_COUNT, cfg.blocks, bits),
    };
    let scores = splat::importance(&cloud, &cams, args.beta).i_g;
    eprintln!("preparing {} Gaussians at tau {tau}", cloud.len());
    let prep = PreparedScene::new(&cloud, &scores, tau, &cfg, None).map_err(other)?;
    let widths: [u8; CHANNEL_COUNT] = q.channel_max().try_into().expect("shape checked");
    let plan = TransformPlan::from_channel_bits(&widths);
    let mut encoded = prep.encode(&plan, &q, 0).map_err(other)?;
    if let Some(b) = budget {
        if encoded.sizes.total as u64 > b {
            return Err(CliError::Infeasible(format!(
                "container needs {} bytes before retention, budget is {b}",
                encoded.sizes.total
            )));
        }
        encoded = prep.fill_retention(encoded, b).map_err(other)?;
    }
    write(output, &encoded.bytes)?;
    Ok(to_json(&json!({
        "leaf_count": prep.leaf_count(),
        "tau": tau,
        "retained": encoded.retained,
        "transform_mask": encoded.plan.to_mask(),
        "sizes": encoded.sizes,
    })))
}

fn cmd_decode(input: &Path, output: &Path, reference: Option<&PathBuf>, norm: NormKind) -> Result<String, CliError> {
    let bytes = read(input)?;
    let decoded = codec::decode(&bytes).map_err(CliError::Container)?;
    write(output, &model::save_ply(&decoded.cloud))?;
    let stats = match reference {
        Some(p) => {
            let r = load_cloud(p)?;
            Some(codec::reference_stats(&r, &decoded, norm).map_err(other)?)
        }
        None => None,
    };
    Ok(to_json(&json!({
        "count": decoded.cloud.len(),
        "info": decoded.info,
        "reference": stats,
    })))
}

fn cmd_search(
    input: &Path,
    output: &Path,
    cfg: SearchConfig,
    report_path: Option<&PathBuf>,
    args: &CodecArgs,
) -> Result<String, CliError> {
    let cloud = load_cloud(input)?;
    let cams = optional_cameras(args.cameras.as_ref())?;
    eprintln!("searching {} Gaussians for {} bytes", cloud.len(), cfg.budget);
    let outcome = search::search(&cloud, &cams, &cfg)?;
    write(output, &outcome.encoded.bytes)?;
    let report = to_json(&outcome.report);
    if let Some(p) = report_path {
        write(p, report.as_bytes())?;
    }
    Ok(report)
}

fn cmd_info(input: &Path) -> Result<String, CliError> {
    let bytes = read(input)?;
    let info = codec::inspect(&bytes).map_err(CliError::Container)?;
    let lengths = container::section_lengths(&bytes).map_err(|e| CliError::Container(e.into()))?;
    let sections: serde_json::Map<String, Value> = lengths.into_iter().map(|(k, v)| (k.to_string(), json!(v))).collect();
    Ok(to_json(&json!({ "bytes": bytes.len(), "info": info, "sections": sections })))
}

fn load_candidate(path: &Path) -> Result<GaussianCloud, CliError> {
    let bytes = read(path)?;
    if bytes.starts_with(b"ply") {
        model::load_ply(&bytes).map_err(|e| CliError::Parse(format!("{}: {e}", path.display())))
    } else {
        Ok(codec::decode(&bytes).map_err(CliError::Container)?.cloud)
    }
}

fn cmd_render_eval(model_path: &Path, candidate: &Path, cameras: &Path) -> Result<String, CliError> {
    let reference = load_cloud(model_path)?;
    let other_cloud = load_candidate(candidate)?;
    let cams = load_cameras(cameras)?;
    if cams.is_empty() {
        return Err(CliError::Parse("camera list is empty".into()));
    }
    let mut views = Vec::with_capacity(cams.len());
    for cam in &cams {
        let (a, _) = splat::render(&reference, cam);
        let (b, _) = splat::render(&other_cloud, cam);
        views.push(splat::psnr(&a, &b).map_err(other)?);
    }
    let mean = views.iter().sum::<f64>() / views.len() as f64;
    Ok(to_json(&json!({
        "views": views.iter().map(|&p| psnr_value(p)).collect::<Vec<_>>(),
        "mean": psnr_value(mean),
    })))
}

fn cmd_synth(n: usize, seed: u64, sh_degree: u8, dir: &Path) -> Result<String, CliError> {
    if n == 0 {
        return Err(CliError::Parse("--n must be at least 1".into()));
    }
    std::fs::create_dir_all(dir).map_err(|source| CliError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let s = synth::scene(&SynthConfig {
        n,
        seed,
        sh_degree,
        ..SynthConfig::default()
    });
    let ply = dir.join("scene.ply");
    let cams = dir.join("cameras.json");
    write(&ply, &model::save_ply(&s.cloud))?;
    write(&cams, splat::cameras_to_json(&s.cameras).as_bytes())?;
    Ok(to_json(&json!({
        "n": n,
        "seed": seed,
        "sh_degree": sh_degree,
        "cameras": s.cameras.len(),
        "ply": ply,
        "cameras_json": cams,
    })))
}

fn run(cli: Cli) -> Result<String, CliError> {
    match cli.command {
        Command::Encode {
            input,
            output,
            tau,
            q,
            bits,
            budget,
            codec,
        } => cmd_encode(&input, &output, tau, q.as_ref(), bits, budget, &codec),
        Command::Decode {
            input,
            output,
            reference,
            norm,
        } => cmd_decode(&input, &output, reference.as_ref(), norm.into()),
        Command::Search {
            input,
            output,
            budget,
            tau_grid,
            tau,
            report,
            codec,
        } => {
            let mut cfg = SearchConfig::new(budget);
            if let Some(g) = tau_grid {
                cfg.tau_grid = g;
            }
            if let Some(t) = tau {
                cfg.tau_grid = vec![t];
            }
            cfg.beta = codec.beta;
            cfg.prepare = codec.prepare();
            cmd_search(&input, &output, cfg, report.as_ref(), &codec)
        }
        Command::Info { input } => cmd_info(&input),
        Command::RenderEval {
            model,
            candidate,
            cameras,
        } => cmd_render_eval(&model, &candidate, &cameras),
        Command::Synth {
            n,
            seed,
            sh_degree,
            output,
        } => cmd_synth(n, seed, sh_degree, &output),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli) {
        Ok(json) => {
            use std::io::Write;
            // a closed pipe on stdout is not an error worth reporting
            let _ = writeln!(std::io::stdout().lock(), "{json}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn budgets() {
        assert_eq!(parse_budget("8MB"), Ok(8 * MIB));
        assert_eq!(parse_budget("8mb"), Ok(8 * MIB));
        assert_eq!(parse_budget("1.5MB"), Ok(3 * MIB / 2));
        assert_eq!(parse_budget("512KB"), Ok(512 * 1024));
        assert_eq!(parse_budget("1000"), Ok(1000));
        assert_eq!(parse_budget("1000B"), Ok(1000));
        assert!(parse_budget("MB").is_err());
        assert!(parse_budget("-3MB").is_err());
        assert!(parse_budget("0").is_err());
    }

    #[test]
    fn taus() {
        assert_eq!(parse_tau("0.5"), Ok(0.5));
        assert!(parse_tau("0").is_err());
        assert!(parse_tau("1.01").is_err());
    }

    #[test]
    fn cli_shape() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
