use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;

use seqrot::io;
use seqrot::lab::{
    self, calibration_inputs, gen_corpus, r4_ablation, run_comparison, AblationConfig, BaseDist,
    ComparisonConfig, CorpusSpec, Metric, Quantizer, Variant,
};
use seqrot::quant::{
    gptq_quantize, hessian_from_calibration, quant_error, rtn_quantize, Clip, ErrorMetric,
    GroupSize, QuantSpec,
};
use seqrot::rotation::{
    build_toy_block, fuse_rotations, toy_input, R4Mode, Role, RotationAssignment, RotationChoice,
    ToyBlockConfig,
};
use seqrot::transform::{
    gsr, hadamard_sylvester, randomize_signs, sequency_profile, walsh, BlockBase, OrthoMatrix,
    SignRandomization,
};

#[derive(Parser, Debug)]
#[command(name = "seqrot", version, about = "Walsh/Hadamard rotations and low-bit quantization error experiments")]
struct Cli {
    /// Seed for every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output file (tensor or CSV, depending on the command).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Arithmetic precision for forward passes and corpus values.
    #[arg(long, global = true, value_enum, default_value_t = Precision::F64)]
    precision: Precision,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Precision {
    F32,
    F64,
}

impl Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a rotation matrix, print its residual and sequencies.
    MakeRotation(MakeRotation),
    /// Describe a tensor file.
    Inspect(Inspect),
    /// Quantize a 2-D tensor file and report the error.
    Quantize(QuantizeCmd),
    /// Compare R1 variants on a synthetic corpus.
    Compare(Compare),
    /// Check that fused rotations leave the toy block output unchanged.
    Invariance(Invariance),
    /// R4 global vs local ablation on the toy block.
    R4Ablation(Ablation),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Kind {
    Gh,
    Gw,
    Lh,
    Gsr,
}

#[derive(Args, Debug)]
struct MakeRotation {
    #[arg(long, value_enum)]
    kind: Kind,
    #[arg(long)]
    n: usize,
    /// Block size; required for lh and gsr.
    #[arg(long)]
    group: Option<usize>,
    /// Random signs for gw and gsr (gh and lh are always randomized).
    #[arg(long)]
    randomize: bool,
}

#[derive(Args, Debug)]
struct Inspect {
    #[arg(long)]
    file: PathBuf,
    /// Group size for the sequency profile of a rotation.
    #[arg(long)]
    group: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Scheme {
    Rtn,
    Gptq,
}

#[derive(Args, Debug, Clone)]
struct QuantArgs {
    #[arg(long, default_value_t = 2)]
    bits: u8,
    /// Group length along each row; omit for one group per row.
    #[arg(long)]
    group: Option<usize>,
    #[arg(long, value_enum, default_value_t = Scheme::Rtn)]
    scheme: Scheme,
    /// none, mse, or ratio:R
    #[arg(long, default_value = "mse", value_parser = parse_clip)]
    clip: ClipArg,
    #[arg(long)]
    symmetric: bool,
}

#[derive(Debug, Clone, PartialEq)]
struct ClipArg(Clip, String);

fn parse_clip(s: &str) -> Result<ClipArg, String> {
    let clip = match s {
        "none" => Clip::None,
        "mse" => Clip::mse_default(),
        _ => match s.strip_prefix("ratio:").map(str::parse::<f64>) {
            Some(Ok(r)) => Clip::FixedRatio(r),
            _ => return Err(format!("expected none, mse or ratio:R, got `{s}`")),
        },
    };
    Ok(ClipArg(clip, s.to_string()))
}

impl QuantArgs {
    fn spec(&self) -> Result<QuantSpec, CliError> {
        let group = match self.group {
            Some(g) => GroupSize::Fixed(g),
            None => GroupSize::PerChannel,
        };
        QuantSpec::new(self.bits, group, self.symmetric, self.clip.0.clone()).map_err(usage)
    }

    fn echo(&self) -> String {
        let mut s = format!("--bits {}", self.bits);
        if let Some(g) = self.group {
            s += &format!(" --group {g}");
        }
        s += &format!(" --scheme {} --clip {}", scheme_name(self.scheme), self.clip.1);
        if self.symmetric {
            s += " --symmetric";
        }
        s
    }
}

fn scheme_name(s: Scheme) -> &'static str {
    match s {
        Scheme::Rtn => "rtn",
        Scheme::Gptq => "gptq",
    }
}

#[derive(Args, Debug)]
struct QuantizeCmd {
    #[arg(long)]
    file: PathBuf,
    #[command(flatten)]
    q: QuantArgs,
    /// Calibration activations (samples × cols) for gptq; seeded Gaussian if omitted.
    #[arg(long)]
    calib: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Compare {
    #[arg(long, default_value_t = 100)]
    count: usize,
    #[arg(long, default_value_t = 512)]
    rows: usize,
    #[arg(long, default_value_t = 512)]
    cols: usize,
    /// gaussian or student-t:NU
    #[arg(long, default_value = "student-t:4", value_parser = parse_base)]
    base: BaseDist,
    #[arg(long, default_value_t = 4)]
    outliers: usize,
    #[arg(long, default_value_t = 20.0)]
    gain: f64,
    #[arg(long, default_value_t = 0.3)]
    smooth: f64,
    /// Comma-separated R1 variants: identity, gh, gw, lh, gsr.
    #[arg(long, default_value = "gh,gw,lh,gsr", value_delimiter = ',', value_parser = parse_choice)]
    variants: Vec<ChoiceArg>,
    #[arg(long, default_value_t = 2)]
    bits: u8,
    #[arg(long, default_value_t = 64)]
    group: usize,
    /// Block size of lh and gsr; defaults to the quantization group.
    #[arg(long)]
    rotation_group: Option<usize>,
    #[arg(long, value_enum, default_value_t = Scheme::Rtn)]
    scheme: Scheme,
    /// none, mse, or ratio:R
    #[arg(long, default_value = "mse", value_parser = parse_clip)]
    clip: ClipArg,
    /// Weight type deciding whether R1 is the front or rear rotation.
    #[arg(long, default_value = "wq", value_parser = parse_role)]
    role: Role,
    #[arg(long, default_value_t = 256)]
    calib_samples: usize,
}

fn parse_base(s: &str) -> Result<BaseDist, String> {
    if s == "gaussian" {
        return Ok(BaseDist::Gaussian);
    }
    match s.strip_prefix("student-t:").map(str::parse::<f64>) {
        Some(Ok(nu)) => Ok(BaseDist::StudentT(nu)),
        _ => Err(format!("expected gaussian or student-t:NU, got `{s}`")),
    }
}

fn base_name(b: BaseDist) -> String {
    match b {
        BaseDist::Gaussian => "gaussian".into(),
        BaseDist::StudentT(nu) => format!("student-t:{nu}"),
    }
}

/// A rotation flag and the text it was parsed from.
#[derive(Debug, Clone, PartialEq)]
struct ChoiceArg(RotationChoice, String);

fn parse_choice(s: &str) -> Result<ChoiceArg, String> {
    if let Some(path) = s.strip_prefix("file:") {
        let m = io::read_dense_rotation(path).map_err(|e| format!("{path}: {e}"))?;
        return Ok(ChoiceArg(RotationChoice::External(Arc::new(m)), s.to_string()));
    }
    let c = RotationChoice::parse(s).ok_or_else(|| format!("unknown rotation `{s}`"))?;
    Ok(ChoiceArg(c.clone(), c.name().to_string()))
}

fn parse_role(s: &str) -> Result<Role, String> {
    Role::parse(s).ok_or_else(|| format!("unknown weight role `{s}`"))
}

#[derive(Args, Debug, Clone)]
struct BlockArgs {
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 128)]
    ffn: usize,
    /// Block size of local rotations.
    #[arg(long, default_value_t = 16)]
    group: usize,
    #[arg(long, default_value_t = 8)]
    seq_len: usize,
}

impl BlockArgs {
    fn config(&self, seed: u64) -> ToyBlockConfig {
        ToyBlockConfig {
            hidden: self.hidden,
            heads: self.heads,
            ffn: self.ffn,
            group: self.group,
            seq_len: self.seq_len,
            seed,
        }
    }

    fn echo(&self) -> String {
        format!(
            "--hidden {} --heads {} --ffn {} --group {} --seq-len {}",
            self.hidden, self.heads, self.ffn, self.group, self.seq_len
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Global,
    Local,
}

#[derive(Args, Debug)]
struct Invariance {
    #[arg(long, default_value = "identity", value_parser = parse_choice)]
    r1: ChoiceArg,
    #[arg(long, default_value = "identity", value_parser = parse_choice)]
    r2: ChoiceArg,
    #[arg(long, default_value = "identity", value_parser = parse_choice)]
    r3: ChoiceArg,
    #[arg(long, default_value = "identity", value_parser = parse_choice)]
    r4: ChoiceArg,
    #[arg(long, value_enum, default_value_t = ModeArg::Global)]
    r4_mode: ModeArg,
    #[command(flatten)]
    block: BlockArgs,
    #[arg(long, default_value_t = 20)]
    seeds: usize,
    /// Pass threshold; 1e-10 for f64 and 1e-4 for f32 by default.
    #[arg(long)]
    tol: Option<f64>,
}

#[derive(Args, Debug)]
struct Ablation {
    #[command(flatten)]
    block: BlockArgs,
    #[arg(long, default_value_t = 50)]
    seeds: usize,
    #[arg(long, default_value = "gsr", value_parser = parse_choice)]
    r1: ChoiceArg,
    #[arg(long, default_value_t = 2)]
    wbits: u8,
    #[arg(long, default_value_t = 4)]
    abits: u8,
    #[arg(long, default_value_t = 2000)]
    resamples: usize,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Compute(String),
}

fn usage(e: impl Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn compute(e: impl Display) -> CliError {
    CliError::Compute(e.to_string())
}

/// Deletes an output file created by a run that did not finish.
struct OutputGuard {
    path: Option<PathBuf>,
    keep: bool,
}

impl OutputGuard {
    fn new(path: Option<&Path>) -> Self {
        OutputGuard {
            path: path.filter(|p| !p.exists()).map(Path::to_path_buf),
            keep: false,
        }
    }
}

impl Drop for OutputGuard {
    fn drop(&mut self) {
        if let (Some(p), false) = (&self.path, self.keep) {
            let _ = fs::remove_file(p);
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let mut guard = OutputGuard::new(cli.out.as_deref());
    match run(&cli) {
        Ok(()) => {
            guard.keep = true;
            ExitCode::SUCCESS
        }
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(CliError::Compute(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}

fn global_echo(cli: &Cli) -> String {
    let mut s = format!("seqrot --seed {} --precision {}", cli.seed, cli.precision);
    if let Some(out) = &cli.out {
        s += &format!(" --out {}", out.display());
    }
    s
}

fn choice_echo(c: &ChoiceArg) -> &str {
    &c.1
}

fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.cmd {
        Command::MakeRotation(a) => make_rotation(cli, a),
        Command::Inspect(a) => inspect(a),
        Command::Quantize(a) => quantize(cli, a),
        Command::Compare(a) => compare(cli, a),
        Command::Invariance(a) => invariance(cli, a),
        Command::R4Ablation(a) => ablation(cli, a),
    }
}

fn print_sequencies(m: &OrthoMatrix, group: usize) -> Result<(), CliError> {
    let profile = sequency_profile(m, group).map_err(usage)?;
    let seqs = &profile.per_row_sequency;
    let shown: Vec<String> = seqs.iter().take(64).map(usize::to_string).collect();
    let more = if seqs.len() > 64 { " ..." } else { "" };
    println!("row sequency: {}{more}", shown.join(" "));
    let vars: Vec<String> = profile
        .per_group_variance
        .iter()
        .take(16)
        .map(|v| format!("{v:.4}"))
        .collect();
    println!("group {group} sequency variance: {}", vars.join(" "));
    println!("mean group sequency variance: {:.6}", profile.mean_group_variance());
    Ok(())
}

fn make_rotation(cli: &Cli, a: &MakeRotation) -> Result<(), CliError> {
    let n = a.n;
    if n < 1 || !n.is_power_of_two() {
        return Err(usage(format!("n must be a power of two, got {n}")));
    }
    let local = matches!(a.kind, Kind::Lh | Kind::Gsr);
    let group = match (a.group, local) {
        (Some(g), _) if g == 0 || !g.is_power_of_two() || g > n || n % g != 0 => {
            return Err(usage(format!("group must be a power of two dividing n (n={n}, group={g})")));
        }
        (None, true) => return Err(usage("--group is required for lh and gsr")),
        (g, _) => g,
    };
    let mut echo = format!("{} make-rotation --kind {:?} --n {n}", global_echo(cli), a.kind)
        .to_ascii_lowercase();
    if let Some(g) = group {
        echo += &format!(" --group {g}");
    }
    if a.randomize {
        echo += " --randomize";
    }
    println!("config: {echo}");

    let shared = SignRandomization {
        seed: cli.seed,
        per_block: false,
    };
    let m = match a.kind {
        Kind::Gh => hadamard_sylvester(n).map(|h| randomize_signs(&h, cli.seed)),
        Kind::Gw => walsh(n).map(|w| if a.randomize { randomize_signs(&w, cli.seed) } else { w }),
        Kind::Lh => gsr(n, group.unwrap_or(n), BlockBase::HadamardNatural, Some(shared)),
        Kind::Gsr => gsr(n, group.unwrap_or(n), BlockBase::Walsh, a.randomize.then_some(shared)),
    }
    .map_err(compute)?;
    println!("order: {n}, block order: {}", m.block_order());
    println!("orthogonality residual: {:.3e}", m.orthogonality_residual());
    print_sequencies(&m, group.unwrap_or(m.block_order()))?;
    if let Some(out) = &cli.out {
        io::write_rotation(out, &m).map_err(compute)?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

fn inspect(a: &Inspect) -> Result<(), CliError> {
    let (t, meta) = io::read_tensor(&a.file).map_err(compute)?;
    println!("file: {}", a.file.display());
    println!("dtype: {:?}, dims: {:?}", t.dtype(), t.dims());
    if meta.get("matrix").is_some() {
        let m = io::rotation_from_tensor(&t, &meta).map_err(compute)?;
        println!("matrix: {}", meta["matrix"]);
        println!("scale: {:e}", m.scale());
        println!("orthogonality residual: {:.3e}", m.orthogonality_residual());
        println!("identical blocks: {}", m.blocks_identical());
        print_sequencies(&m, a.group.unwrap_or(m.block_order()))?;
    } else if meta.get("quantized").is_some() {
        let q = io::quantized_from_tensor(&t, &meta).map_err(compute)?;
        println!("quant spec: {}", meta["quantized"]["spec"]);
        println!("groups per row: {}", q.groups_per_row());
        println!("codes in range: {}", q.codes_in_range());
    } else {
        let v = t.data().to_f64();
        let n = v.len().max(1) as f64;
        let min = v.iter().copied().fold(f64::INFINITY, f64::min);
        let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = v.iter().sum::<f64>() / n;
        let rms = (v.iter().map(|x| x * x).sum::<f64>() / n).sqrt();
        println!("min {min:e}, max {max:e}, mean {mean:e}, rms {rms:e}");
    }
    if let Some(obj) = meta.as_object() {
        let keys: Vec<&str> = obj.keys().map(String::as_str).collect();
        println!("metadata keys: {}", keys.join(", "));
    }
    Ok(())
}

fn quantize(cli: &Cli, a: &QuantizeCmd) -> Result<(), CliError> {
    let spec = a.q.spec()?;
    let mut echo = format!("{} quantize --file {} {}", global_echo(cli), a.file.display(), a.q.echo());
    if let Some(c) = &a.calib {
        echo += &format!(" --calib {}", c.display());
    }
    println!("config: {echo}");
    let (t, _) = io::read_tensor(&a.file).map_err(compute)?;
    let w = t.to_matrix().map_err(compute)?;
    let q = match a.q.scheme {
        Scheme::Rtn => rtn_quantize(&w, &spec),
        Scheme::Gptq => {
            let x = match &a.calib {
                Some(p) => io::read_tensor(p)
                    .and_then(|(t, _)| t.to_matrix())
                    .map_err(compute)?,
                None => seeded_calibration(cli.seed, w.ncols()),
            };
            let h = hessian_from_calibration(&x).map_err(compute)?;
            gptq_quantize(&w, &h, &spec)
        }
    }
    .map_err(compute)?;
    let back = q.dequantize();
    println!("mse: {:e}", quant_error(&w, &back, ErrorMetric::Mse).map_err(compute)?);
    println!("max_abs: {:e}", quant_error(&w, &back, ErrorMetric::MaxAbs).map_err(compute)?);
    if let Some(out) = &cli.out {
        io::write_quantized(out, &q).map_err(compute)?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

fn seeded_calibration(seed: u64, cols: usize) -> DMatrix<f64> {
    let spec = CorpusSpec {
        count: 1,
        rows: 1,
        cols,
        outlier_channels: 0,
        outlier_gain: 1.0,
        seed,
        ..CorpusSpec::default()
    };
    calibration_inputs(&spec, 4 * cols)
}

fn compare(cli: &Cli, a: &Compare) -> Result<(), CliError> {
    let corpus_spec = CorpusSpec {
        count: a.count,
        rows: a.rows,
        cols: a.cols,
        base: a.base,
        outlier_channels: a.outliers,
        outlier_gain: a.gain,
        smooth_weight: a.smooth,
        seed: cli.seed,
    };
    corpus_spec.validate().map_err(usage)?;
    let wspec = QuantSpec::new(a.bits, GroupSize::Fixed(a.group), false, a.clip.0.clone())
        .map_err(usage)?;
    wspec.group_len(a.rows.min(a.cols)).map_err(usage)?;
    let rotation_group = a.rotation_group.unwrap_or(a.group);
    if !rotation_group.is_power_of_two() {
        return Err(usage(format!("rotation group {rotation_group} must be a power of two")));
    }
    if a.variants.is_empty() {
        return Err(usage("at least one variant is required"));
    }
    let variants: Vec<Variant> = a.variants.iter().map(|c| Variant::new(c.0.clone())).collect();
    let names: Vec<String> = a.variants.iter().map(|c| c.1.clone()).collect();
    println!(
        "config: {} compare --count {} --rows {} --cols {} --base {} --outliers {} --gain {} --smooth {} --variants {} --bits {} --group {} --rotation-group {} --scheme {} --clip {} --role {} --calib-samples {}",
        global_echo(cli),
        a.count,
        a.rows,
        a.cols,
        base_name(a.base),
        a.outliers,
        a.gain,
        a.smooth,
        names.join(","),
        a.bits,
        a.group,
        rotation_group,
        scheme_name(a.scheme),
        a.clip.1,
        a.role.name(),
        a.calib_samples,
    );

    let mut corpus = gen_corpus(&corpus_spec).map_err(compute)?;
    if cli.precision == Precision::F32 {
        for t in corpus.tensors.iter_mut() {
            t.apply(|v| *v = *v as f32 as f64);
        }
    }
    let cfg = ComparisonConfig {
        wspec,
        quantizer: match a.scheme {
            Scheme::Rtn => Quantizer::Rtn,
            Scheme::Gptq => Quantizer::Gptq,
        },
        role: a.role,
        rotation_group,
        rotation_seed: cli.seed,
        calibration_samples: a.calib_samples,
    };
    let report = run_comparison(&corpus, &variants, &cfg).map_err(compute)?;
    println!("corpus sha256: {}", report.corpus_hash);
    for v in &report.variants {
        println!("input sha256 [{}]: {}", v.name, v.input_hash);
    }
    println!(
        "fairness: {}",
        if report.fairness_ok() { "identical inputs" } else { "MISMATCH" }
    );
    print!("{}", report.text_table());
    for (lo, hi) in [("gw", "gh"), ("gsr", "lh"), ("gsr", "gh")] {
        if let Some(t) = report.compare(lo, hi, Metric::Mse) {
            let holds = lab::median(report.variant(lo).map_or(&[][..], |v| &v.mse))
                < lab::median(report.variant(hi).map_or(&[][..], |v| &v.mse));
            println!(
                "sign test mse {lo} < {hi}: {} wins, {} losses, p = {:.3e}: {}",
                t.wins,
                t.losses,
                t.p_value,
                if holds && t.significant(0.05) { "HOLDS" } else { "DOES NOT HOLD" }
            );
        }
    }
    if let Some(out) = &cli.out {
        io::write_report(out, &report).map_err(compute)?;
        println!("wrote {}", out.display());
    }
    if !report.fairness_ok() {
        return Err(compute("variants consumed different inputs"));
    }
    Ok(())
}

fn assignment(a: &Invariance, seed: u64) -> RotationAssignment {
    RotationAssignment {
        r1: a.r1.0.clone(),
        r2: a.r2.0.clone(),
        r3: a.r3.0.clone(),
        r4: a.r4.0.clone(),
        r4_mode: match a.r4_mode {
            ModeArg::Global => R4Mode::Global,
            ModeArg::Local => R4Mode::Local,
        },
        seed,
    }
}

fn invariance(cli: &Cli, a: &Invariance) -> Result<(), CliError> {
    a.block.config(cli.seed).validate().map_err(usage)?;
    let tol = a.tol.unwrap_or(match cli.precision {
        Precision::F64 => 1e-10,
        Precision::F32 => 1e-4,
    });
    println!(
        "config: {} invariance --r1 {} --r2 {} --r3 {} --r4 {} --r4-mode {} {} --seeds {} --tol {tol:e}",
        global_echo(cli),
        choice_echo(&a.r1),
        choice_echo(&a.r2),
        choice_echo(&a.r3),
        choice_echo(&a.r4),
        format!("{:?}", a.r4_mode).to_ascii_lowercase(),
        a.block.echo(),
        a.seeds,
    );
    let mut worst = 0.0f64;
    for s in 0..a.seeds as u64 {
        let cfg = a.block.config(cli.seed.wrapping_add(s));
        let block = build_toy_block(cfg).map_err(compute)?;
        let fused = fuse_rotations(&block, &assignment(a, cfg.seed)).map_err(compute)?;
        let x = toy_input(&cfg, cfg.seed);
        let diff = match cli.precision {
            Precision::F64 => {
                let y0 = block.forward(&x, None).map_err(compute)?;
                let y1 = fused.forward(&x, None).map_err(compute)?;
                (y0 - y1).amax()
            }
            Precision::F32 => {
                let x32 = x.map(|v| v as f32);
                let y0 = block.forward_in(&x32, None).map_err(compute)?;
                let y1 = fused.forward_in(&x32, None).map_err(compute)?;
                f64::from((y0 - y1).amax())
            }
        };
        worst = worst.max(diff);
    }
    if worst < tol {
        println!("max abs diff < {tol:e}: PASS (observed {worst:.3e} over {} seeds)", a.seeds);
        Ok(())
    } else {
        println!("max abs diff < {tol:e}: FAIL (observed {worst:.3e})");
        Err(compute(format!("output changed by {worst:e}")))
    }
}

fn ablation(cli: &Cli, a: &Ablation) -> Result<(), CliError> {
    let block = a.block.config(cli.seed);
    block.validate().map_err(usage)?;
    QuantSpec::weight(a.wbits, a.block.group).map_err(usage)?;
    QuantSpec::activation(a.abits, a.block.group).map_err(usage)?;
    println!(
        "config: {} r4-ablation {} --seeds {} --r1 {} --wbits {} --abits {} --resamples {}",
        global_echo(cli),
        a.block.echo(),
        a.seeds,
        choice_echo(&a.r1),
        a.wbits,
        a.abits,
        a.resamples,
    );
    let report = r4_ablation(&AblationConfig {
        block,
        seeds: a.seeds,
        r1: a.r1.0.clone(),
        weight_bits: a.wbits,
        act_bits: a.abits,
        bootstrap_resamples: a.resamples,
    })
    .map_err(compute)?;
    print!("{}", report.text_table());
    if let Some(out) = &cli.out {
        fs::write(out, io::ablation_to_csv(&report).map_err(compute)?).map_err(compute)?;
        println!("wrote {}", out.display());
    }
    Ok(())
}
