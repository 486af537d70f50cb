use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use vovc_core::adapt::{AdaptedNet, OneVector};
use vovc_core::codec::{
    decode, decode_vector, encode, encode_from_stage1, fit_stage1, initial_noise, Bitstream,
    CodecConfig, ScaleOptions,
};
use vovc_core::corpus::toy_image;
use vovc_core::dynamics::VectorField;
use vovc_core::eval::{
    bound_check, csv_string, dp_sweep, is_kernel_check, marginal_check, psnr, BoundConfig,
    BoundReport, KernelStats, MomentRow,
};
use vovc_core::io::{hex, parse_pgm, short_digest, write_atomic, Signal};
use vovc_core::net::{BaseRecipe, VectorFieldNet};
use vovc_core::prng::{derive_seed, Domain, PrngStream};

const RATE_LAMBDAS: [f64; 3] = [1.5e-3, 3e-3, 6e-3];
const IS_CANDIDATES: [u32; 6] = [1, 4, 16, 64, 256, 1024];

#[derive(Parser)]
#[command(
    name = "vovc",
    version,
    about = "One-vector adaptation codec for toy flow-matching models"
)]
struct Cli {
    /// Codec config for encode/decode/eval, base recipe for train-base.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed; per-job seeds derive from it and the input index.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file or directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write seeded toy images as VSIG files.
    GenCorpus {
        #[arg(long)]
        count: usize,
        /// Image side length.
        #[arg(long, default_value_t = 16)]
        dim: usize,
    },
    /// Fit the prior and train the base vector field on a corpus directory.
    TrainBase {
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Compress signals (VSIG or PGM) into VOVB streams.
    Encode {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "signal", required = true, num_args = 1..)]
        signals: Vec<PathBuf>,
        /// Add an encoding-time scaling block with N steps and M candidates.
        #[arg(long, num_args = 3, value_names = ["N", "M", "SEED"])]
        scale: Option<Vec<u64>>,
    },
    /// Reconstruct signals from VOVB streams.
    Decode {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "stream", required = true, num_args = 1..)]
        streams: Vec<PathBuf>,
        /// Print PSNR against this signal (single stream only).
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Run evaluation oracles and write CSVs.
    Eval {
        #[arg(long = "mode", value_enum, required = true, num_args = 1..)]
        modes: Vec<Mode>,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long = "signal", num_args = 1..)]
        signals: Vec<PathBuf>,
        /// Evaluate the adapted field decoded from this stream instead of the base.
        #[arg(long)]
        stream: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        cases: usize,
        #[arg(long, default_value_t = 10_000)]
        particles: usize,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    SweepTau,
    Bound,
    IsCheck,
    Marginal,
    RateCurve,
}

/// Bad invocation; maps to exit code 1.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow!(Usage(msg.into()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match configure_threads().and_then(|_| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(if e.downcast_ref::<Usage>().is_some() {
                1
            } else {
                2
            })
        }
    }
}

/// Error chain joined with ": ", skipping causes the parent already printed.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !out.ends_with(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("VOVC_THREADS") else {
        return Ok(());
    };
    let n: usize = v.parse().ok().filter(|&n| n >= 1).ok_or_else(|| {
        usage(format!(
            "VOVC_THREADS must be a positive integer, got {v:?}"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring thread pool")
}

fn run(cli: Cli) -> Result<()> {
    let started = Instant::now();
    let mut m = Manifest::default();
    let manifest_path = match &cli.command {
        Command::GenCorpus { count, dim } => gen_corpus(&cli, *count, *dim, &mut m)?,
        Command::TrainBase { corpus } => train_base(&cli, corpus, &mut m)?,
        Command::Encode {
            ckpt,
            signals,
            scale,
        } => cmd_encode(&cli, ckpt, signals, scale.as_deref(), &mut m)?,
        Command::Decode {
            ckpt,
            streams,
            reference,
        } => cmd_decode(&cli, ckpt, streams, reference.as_deref(), &mut m)?,
        Command::Eval {
            modes,
            ckpt,
            signals,
            stream,
            cases,
            particles,
            trials,
        } => {
            let opts = EvalOpts {
                ckpt: ckpt.as_deref(),
                signals,
                stream: stream.as_deref(),
                cases: *cases,
                particles: *particles,
                trials: *trials,
            };
            cmd_eval(&cli, modes, &opts, &mut m)?
        }
    };
    m.write(&manifest_path, started)
}

/// Provenance record written beside every output.
#[derive(Default)]
struct Manifest {
    digest: String,
    seeds: Vec<(String, u64)>,
    outputs: Vec<PathBuf>,
}

impl Manifest {
    fn write(&self, path: &Path, started: Instant) -> Result<()> {
        let mut s = String::new();
        let args: Vec<String> = std::env::args().skip(1).collect();
        let _ = writeln!(
            s,
            "command = {}",
            args.first().map(String::as_str).unwrap_or("")
        );
        let _ = writeln!(s, "args = {}", args.join(" "));
        let _ = writeln!(s, "tool_version = {}", env!("CARGO_PKG_VERSION"));
        let _ = writeln!(s, "config_digest = {}", self.digest);
        for (name, v) in &self.seeds {
            let _ = writeln!(s, "seed.{name} = {v}");
        }
        for (i, o) in self.outputs.iter().enumerate() {
            let _ = writeln!(s, "output.{i} = {}", o.display());
        }
        let _ = writeln!(s, "wall_clock_s = {:.3}", started.elapsed().as_secs_f64());
        write_atomic(path, s.as_bytes())?;
        Ok(())
    }
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn load_signal(path: &Path) -> Result<Signal> {
    if path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("pgm"))
    {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        return parse_pgm(&bytes).with_context(|| format!("parsing {}", path.display()));
    }
    Signal::load(path).with_context(|| format!("loading {}", path.display()))
}

fn load_net(path: &Path) -> Result<VectorFieldNet> {
    VectorFieldNet::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn load_codec_config(cli: &Cli) -> Result<CodecConfig> {
    match &cli.config {
        None => Ok(CodecConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            CodecConfig::from_text(&text).map_err(|e| usage(format!("{}: {e}", p.display())))
        }
    }
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "signal".into())
}

/// Output path for input `i` of `n`: the `--out` file for a single input,
/// otherwise `<out dir>/<stem>.<ext>`.
fn job_output(cli: &Cli, input: &Path, n: usize, ext: &str, default_dir: &str) -> PathBuf {
    match (&cli.out, n) {
        (Some(o), 1) => o.clone(),
        (None, 1) => input.with_extension(ext),
        (o, _) => o
            .clone()
            .unwrap_or_else(|| default_dir.into())
            .join(format!("{}.{ext}", stem(input))),
    }
}

fn manifest_for(outputs: &[PathBuf], cli: &Cli, default_dir: &str) -> PathBuf {
    match outputs {
        [one] if cli.out.as_ref().is_none_or(|o| o == one) => sidecar(one, ".manifest"),
        _ => cli
            .out
            .clone()
            .unwrap_or_else(|| default_dir.into())
            .join("manifest.txt"),
    }
}

/// Codec config for job `i`: with `--seed`, all three seeds derive from
/// `(seed, i)`.
fn job_config(base: &CodecConfig, seed: Option<u64>, i: usize) -> CodecConfig {
    let Some(root) = seed else {
        return base.clone();
    };
    let job = derive_seed(root, i as u64);
    CodecConfig {
        proj_seed: derive_seed(job, 0),
        sampler_seed: derive_seed(job, 1),
        train_seed: derive_seed(job, 2),
        ..base.clone()
    }
}

fn gen_corpus(cli: &Cli, count: usize, dim: usize, m: &mut Manifest) -> Result<PathBuf> {
    if count == 0 {
        return Err(usage("--count must be >= 1"));
    }
    if dim == 0 {
        return Err(usage("--dim must be >= 1"));
    }
    let seed = cli.seed.unwrap_or(1);
    let dir = cli.out.clone().unwrap_or_else(|| "corpus".into());
    let outputs = (0..count as u32)
        .into_par_iter()
        .map(|i| {
            let path = dir.join(format!("sig_{i:05}.vsig"));
            toy_image(seed, i, dim)?.save(&path)?;
            Ok(path)
        })
        .collect::<Result<Vec<_>>>()?;
    println!("wrote {count} signals of {dim}x{dim} to {}", dir.display());
    m.digest = hex(&short_digest(
        format!("count={count}\ndim={dim}\n").as_bytes(),
    ));
    m.seeds.push(("corpus".into(), seed));
    m.outputs = outputs;
    Ok(dir.join("manifest.txt"))
}

fn read_corpus(dir: &Path) -> Result<Vec<Vec<f64>>> {
    let entries = std::fs::read_dir(dir)
        .with_context(|| format!("reading corpus directory {}", dir.display()))?;
    let mut paths: Vec<PathBuf> = entries
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()
        .with_context(|| format!("listing {}", dir.display()))?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "vsig" || e == "pgm"));
    paths.sort();
    if paths.is_empty() {
        return Err(anyhow!("no .vsig or .pgm signals in {}", dir.display()));
    }
    paths
        .iter()
        .map(|p| load_signal(p).map(|s| s.data))
        .collect()
}

fn train_base(cli: &Cli, corpus_dir: &Path, m: &mut Manifest) -> Result<PathBuf> {
    let mut recipe = match &cli.config {
        None => BaseRecipe::default(),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading recipe {}", p.display()))?;
            BaseRecipe::from_text(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?
        }
    };
    if let Some(s) = cli.seed {
        recipe.net_seed = derive_seed(s, 0);
        recipe.train.seed = derive_seed(s, 1);
    }
    let corpus = read_corpus(corpus_dir)?;
    let (net, losses) = recipe.train(&corpus).context("training base model")?;
    let out = cli.out.clone().unwrap_or_else(|| "base.vfnn".into());
    net.save(&out)?;
    let window = 50;
    let rows: Vec<Vec<String>> = losses
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let lo = (i + 1).saturating_sub(window);
            let ma = losses[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64;
            vec![i.to_string(), l.to_string(), ma.to_string()]
        })
        .collect();
    let loss_path = sidecar(&out, ".loss.csv");
    write_atomic(
        &loss_path,
        csv_string(&["step", "loss", "loss_ma50"], &rows)?.as_bytes(),
    )?;
    let tail = rows.last().map(|r| r[2].clone()).unwrap_or_default();
    println!(
        "trained on {} signals for {} steps, final loss (ma50) {tail}; wrote {}",
        corpus.len(),
        recipe.train.steps,
        out.display()
    );
    m.digest = hex(&short_digest(recipe.to_text().as_bytes()));
    m.seeds = vec![
        ("net".into(), recipe.net_seed),
        ("train".into(), recipe.train.seed),
    ];
    m.outputs = vec![out.clone(), loss_path];
    Ok(sidecar(&out, ".manifest"))
}

fn cmd_encode(
    cli: &Cli,
    ckpt: &Path,
    signals: &[PathBuf],
    scale: Option<&[u64]>,
    m: &mut Manifest,
) -> Result<PathBuf> {
    let cfg = load_codec_config(cli)?;
    let scale = scale
        .map(|v| -> Result<ScaleOptions> {
            let (n, mm) = (v[0], v[1]);
            if n == 0 || mm == 0 || n > u32::MAX as u64 || mm > u32::MAX as u64 {
                return Err(usage("--scale needs N >= 1 and M >= 1 (32-bit)"));
            }
            Ok(ScaleOptions {
                steps: n as u32,
                candidates: mm as u32,
                seed: v[2],
            })
        })
        .transpose()?;
    let net = load_net(ckpt)?;
    let n = signals.len();
    let results = signals
        .par_iter()
        .enumerate()
        .map(|(i, path)| -> Result<(PathBuf, String, CodecConfig)> {
            let sig = load_signal(path)?;
            let jc = job_config(&cfg, cli.seed, i);
            let enc = encode(&net, &sig.data, &jc, scale).with_context(|| format!("encoding {}", path.display()))?;
            let out = job_output(cli, path, n, "vovb", "streams");
            write_atomic(&out, &enc.bytes)?;
            let a = enc.accounting;
            let line = format!(
                "{}: total {} bits = header {} + payload {} + scaling {} (indices {}); {:.6} bits/dim; PSNR {:.6} dB",
                out.display(),
                a.total_bits,
                a.header_bits,
                a.payload_bits,
                a.scaling_bits,
                a.index_bits,
                a.bits_per_dim,
                psnr(&sig.data, &enc.reconstruction, 1.0)?
            );
            Ok((out, line, jc))
        })
        .collect::<Result<Vec<_>>>()?;
    m.digest = hex(&cfg.digest());
    for (i, (out, line, jc)) in results.iter().enumerate() {
        println!("{line}");
        if n == 1 || cli.seed.is_some() || i == 0 {
            m.seeds.push((format!("{i}.proj"), jc.proj_seed));
            m.seeds.push((format!("{i}.sampler"), jc.sampler_seed));
            m.seeds.push((format!("{i}.train"), jc.train_seed));
        }
        m.outputs.push(out.clone());
    }
    if let Some(s) = scale {
        m.seeds.push(("scaling".into(), s.seed));
    }
    Ok(manifest_for(&m.outputs, cli, "streams"))
}

/// Square images come back as `side x side`, anything else as a vector.
fn shape_for(len: usize) -> Vec<usize> {
    let side = (len as f64).sqrt().round() as usize;
    if side * side == len {
        vec![side, side]
    } else {
        vec![len]
    }
}

fn cmd_decode(
    cli: &Cli,
    ckpt: &Path,
    streams: &[PathBuf],
    reference: Option<&Path>,
    m: &mut Manifest,
) -> Result<PathBuf> {
    if reference.is_some() && streams.len() != 1 {
        return Err(usage("--reference needs exactly one --stream"));
    }
    let cfg = load_codec_config(cli)?;
    let net = load_net(ckpt)?;
    let n = streams.len();
    let results = streams
        .par_iter()
        .map(|path| -> Result<(PathBuf, Vec<f64>, Bitstream)> {
            let bytes =
                std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
            let b =
                Bitstream::parse(&bytes).with_context(|| format!("parsing {}", path.display()))?;
            let x =
                decode(&net, &b, &cfg).with_context(|| format!("decoding {}", path.display()))?;
            let out = job_output(cli, path, n, "vsig", "decoded");
            Signal::new(shape_for(x.len()), x.clone())?.save(&out)?;
            Ok((out, x, b))
        })
        .collect::<Result<Vec<_>>>()?;
    m.digest = hex(&cfg.digest());
    for (i, (out, x, b)) in results.iter().enumerate() {
        let mut line = format!("{}: decoded {} samples", out.display(), x.len());
        if let Some(r) = reference {
            let sig = load_signal(r)?;
            let _ = write!(line, ", PSNR {:.6} dB", psnr(&sig.data, x, 1.0)?);
        }
        println!("{line}");
        m.seeds.push((format!("{i}.proj"), b.proj_seed));
        m.seeds.push((format!("{i}.sampler"), b.sampler_seed));
        m.outputs.push(out.clone());
    }
    Ok(manifest_for(&m.outputs, cli, "decoded"))
}

struct EvalOpts<'a> {
    ckpt: Option<&'a Path>,
    signals: &'a [PathBuf],
    stream: Option<&'a Path>,
    cases: usize,
    particles: usize,
    trials: usize,
}

fn cmd_eval(cli: &Cli, modes: &[Mode], o: &EvalOpts, m: &mut Manifest) -> Result<PathBuf> {
    let cfg = load_codec_config(cli)?;
    let seed = cli.seed.unwrap_or(0);
    let dir = cli.out.clone().unwrap_or_else(|| "eval".into());
    let needs_net = modes
        .iter()
        .any(|m| matches!(m, Mode::SweepTau | Mode::Bound | Mode::RateCurve));
    let net = match (needs_net, o.ckpt) {
        (false, _) => None,
        (true, Some(p)) => Some(load_net(p)?),
        (true, None) => return Err(usage("this mode needs --ckpt")),
    };
    if needs_net && o.signals.is_empty() {
        return Err(usage("this mode needs at least one --signal"));
    }
    let signals = o
        .signals
        .iter()
        .map(|p| load_signal(p))
        .collect::<Result<Vec<_>>>()?;
    let adapted = match (&net, o.stream) {
        (Some(net), Some(p)) => {
            let b = Bitstream::parse(
                &std::fs::read(p).with_context(|| format!("reading {}", p.display()))?,
            )?;
            Some(decode_vector(net, &b, &cfg)?)
        }
        _ => None,
    };
    m.digest = hex(&cfg.digest());
    m.seeds.push(("eval".into(), seed));
    for &mode in modes {
        let path = match mode {
            Mode::SweepTau => sweep_tau(
                net.as_ref().unwrap(),
                adapted.as_ref(),
                &signals,
                o,
                &cfg,
                &dir,
            )?,
            Mode::Bound => bound(
                net.as_ref().unwrap(),
                adapted.as_ref(),
                &signals,
                o,
                &cfg,
                seed,
                &dir,
            )?,
            Mode::IsCheck => is_check(o, seed, &dir)?,
            Mode::Marginal => marginal(o, seed, &dir)?,
            Mode::RateCurve => rate_curve(net.as_ref().unwrap(), &signals, o, &cfg, &dir)?,
        };
        m.outputs.push(path);
    }
    Ok(dir.join("manifest.txt"))
}

fn with_field<T>(
    net: &VectorFieldNet,
    adapted: Option<&OneVector>,
    f: impl FnOnce(&dyn VectorField) -> Result<T>,
) -> Result<T> {
    match adapted {
        Some(ov) => f(&AdaptedNet::new(net, ov)?),
        None => f(&net.field(None)),
    }
}

fn sweep_tau(
    net: &VectorFieldNet,
    adapted: Option<&OneVector>,
    signals: &[Signal],
    o: &EvalOpts,
    cfg: &CodecConfig,
    dir: &Path,
) -> Result<PathBuf> {
    let grid = cfg.grid()?;
    let mut rows = Vec::new();
    for (path, sig) in o.signals.iter().zip(signals) {
        let x1 = initial_noise(cfg.sampler_seed, sig.len());
        let r = with_field(net, adapted, |f| Ok(dp_sweep(f, &sig.data, &x1, &grid)?))?;
        let b = r.best_index();
        println!(
            "sweep-tau {}: best tau {:.4} at {:.4} dB, full decode {:.4} dB",
            path.display(),
            r.taus[b],
            r.psnr[b],
            r.psnr[0]
        );
        for i in 0..r.taus.len() {
            rows.push(vec![
                stem(path),
                i.to_string(),
                r.taus[i].to_string(),
                r.mse[i].to_string(),
                r.psnr[i].to_string(),
            ]);
        }
    }
    let out = dir.join("sweep_tau.csv");
    write_atomic(
        &out,
        csv_string(&["signal", "index", "tau", "mse", "psnr_db"], &rows)?.as_bytes(),
    )?;
    Ok(out)
}

fn bound(
    net: &VectorFieldNet,
    adapted: Option<&OneVector>,
    signals: &[Signal],
    o: &EvalOpts,
    cfg: &CodecConfig,
    seed: u64,
    dir: &Path,
) -> Result<PathBuf> {
    let grid = cfg.grid()?;
    let pick = PrngStream::new(seed, Domain::Eval);
    let reports = (0..o.cases)
        .into_par_iter()
        .map(|c| -> Result<(usize, BoundReport)> {
            let s = c % signals.len();
            let x = &signals[s].data;
            let x1 =
                PrngStream::new(derive_seed(seed, c as u64), Domain::Init).normals(0, 0, x.len());
            let tau_index = 1 + pick.below(c as u32, 0, (grid.steps() - 1) as u32) as usize;
            let bc = BoundConfig {
                seed: derive_seed(seed, c as u64),
                ..Default::default()
            };
            let r = with_field(net, adapted, |f| {
                Ok(bound_check(f, x, &x1, &grid, tau_index, &bc)?)
            })?;
            Ok((s, r))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut header = vec!["case", "signal"];
    header.extend(BoundReport::CSV_HEADER);
    let rows: Vec<Vec<String>> = reports
        .iter()
        .enumerate()
        .map(|(c, (s, r))| {
            let mut row = vec![c.to_string(), stem(&o.signals[*s])];
            row.extend(r.csv_row());
            row
        })
        .collect();
    let certified = reports.iter().filter(|(_, r)| r.certified).count();
    let violations = reports
        .iter()
        .filter(|(_, r)| r.certified && !r.holds())
        .count();
    println!(
        "bound: {} cases, {certified} certified, {violations} certified violations",
        reports.len()
    );
    let out = dir.join("bound.csv");
    write_atomic(&out, csv_string(&header, &rows)?.as_bytes())?;
    Ok(out)
}

fn is_check(o: &EvalOpts, seed: u64, dir: &Path) -> Result<PathBuf> {
    let stats = IS_CANDIDATES
        .iter()
        .map(|&m| is_kernel_check(1.0, 0.5, 0.1, 0.0, m, o.trials, seed).map_err(Into::into))
        .collect::<Result<Vec<KernelStats>>>()?;
    for s in &stats {
        println!(
            "is-check M={}: mean {:.4} (target {:.4}, z {:.2}), var ratio {:.3}",
            s.candidates,
            s.mean,
            s.target_mean,
            s.z_target(),
            s.var_ratio()
        );
    }
    let rows: Vec<Vec<String>> = stats.iter().map(|s| s.csv_row()).collect();
    let out = dir.join("is_check.csv");
    write_atomic(
        &out,
        csv_string(&KernelStats::CSV_HEADER, &rows)?.as_bytes(),
    )?;
    Ok(out)
}

fn marginal(o: &EvalOpts, seed: u64, dir: &Path) -> Result<PathBuf> {
    let rows = marginal_check(&[2.0], o.particles, &[1.0, 0.75, 0.5, 0.25], 100, seed)?;
    for r in &rows {
        println!(
            "marginal t={:.3}: mean z {:.2}, variance rel. err {:.3}",
            r.t,
            r.z_mean(),
            r.var_rel_err()
        );
    }
    let csv_rows: Vec<Vec<String>> = rows.iter().map(MomentRow::csv_row).collect();
    let out = dir.join("marginal.csv");
    write_atomic(
        &out,
        csv_string(&MomentRow::CSV_HEADER, &csv_rows)?.as_bytes(),
    )?;
    Ok(out)
}

fn rate_curve(
    net: &VectorFieldNet,
    signals: &[Signal],
    o: &EvalOpts,
    cfg: &CodecConfig,
    dir: &Path,
) -> Result<PathBuf> {
    let per_signal = signals
        .par_iter()
        .map(|sig| -> Result<Vec<(u64, u64, f64)>> {
            let ov = fit_stage1(net, &sig.data, cfg)?;
            RATE_LAMBDAS
                .iter()
                .map(|&lambda| {
                    let c = CodecConfig {
                        lambda,
                        ..cfg.clone()
                    };
                    let e = encode_from_stage1(net, &sig.data, &ov, &c, None)?;
                    Ok((
                        e.accounting.payload_bits,
                        e.accounting.total_bits,
                        psnr(&sig.data, &e.reconstruction, 1.0)?,
                    ))
                })
                .collect()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for (path, res) in o.signals.iter().zip(&per_signal) {
        for (&lambda, &(payload, total, p)) in RATE_LAMBDAS.iter().zip(res) {
            rows.push(vec![
                stem(path),
                lambda.to_string(),
                payload.to_string(),
                total.to_string(),
                (payload as f64 / cfg.k as f64).to_string(),
                p.to_string(),
            ]);
        }
    }
    for (j, lambda) in RATE_LAMBDAS.iter().enumerate() {
        let n = per_signal.len() as f64;
        let bits = per_signal.iter().map(|r| r[j].1 as f64).sum::<f64>() / n;
        let db = per_signal.iter().map(|r| r[j].2).sum::<f64>() / n;
        println!("rate-curve lambda={lambda}: mean {bits:.1} bits, {db:.3} dB");
    }
    let out = dir.join("rate_curve.csv");
    let header = [
        "signal",
        "lambda",
        "payload_bits",
        "total_bits",
        "bits_per_param",
        "psnr_db",
    ];
    write_atomic(&out, csv_string(&header, &rows)?.as_bytes())?;
    Ok(out)
}
