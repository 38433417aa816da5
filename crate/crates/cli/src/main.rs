//! `hylo`: command-line front end for converting a GQA teacher into a hybrid
//! MLA + Gated DeltaNet student, checking it, and training it.

use std::io::IsTerminal;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use hylo_core::checkpoint::{gen_toy_teacher, load_teacher, save_teacher, TransformerConfig};
use hylo_core::gdn::GdnConfig;
use hylo_core::hybrid::{
    assemble_hybrid, format_bytes_approx, kv_cache_report, load_hybrid, memory_plan, save_hybrid, Donor,
    HybridLayout, HybridModel, LinearKind, MemTechnique,
};
use hylo_core::mla::MlaConfig;
use hylo_core::teacher::TeacherCheckpoint;
use hylo_core::train::{
    niah_eval, niah_generate, recall_curriculum, train_niah, train_stage1_ild, train_stage2_sft, BigramCorpus,
    LossPath, TrainConfig, TrainReport,
};
use hylo_core::verify::verify_suite;
use hylo_core::rng::SeededRng;
use hylo_core::Error;

#[derive(Parser)]
#[command(name = "hylo", version, about = "Convert GQA transformers into hybrid MLA + Gated DeltaNet models")]
struct Cli {
    /// Print one JSON document on stdout instead of text.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a randomly initialized teacher checkpoint.
    GenTeacher {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert every teacher layer to latent attention by truncated SVD.
    ConvertMla {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        mla_config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert every teacher layer to Gated DeltaNet.
    ConvertGdn {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// GDN heads; defaults to the teacher's key/value head count.
        #[arg(long)]
        heads: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Combine pure MLA and pure GDN checkpoints layer by layer.
    Assemble {
        #[arg(long)]
        mla: PathBuf,
        #[arg(long)]
        gdn: PathBuf,
        #[arg(long)]
        layout: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Which checkpoint supplies embeddings, final norm and LM head.
        #[arg(long, value_enum, default_value_t = DonorArg::Mla)]
        donor: DonorArg,
    },
    /// Run the invariant suite on a hybrid and its teacher.
    Verify {
        #[arg(long)]
        hybrid: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Per-token KV cache of a layout relative to the teacher.
    KvReport {
        #[arg(long)]
        layout: PathBuf,
        #[arg(long)]
        teacher_config: PathBuf,
        #[arg(long)]
        mla_config: PathBuf,
    },
    /// Loss-side activation memory for a token count and vocabulary.
    MemPlan {
        #[arg(long)]
        tokens: u64,
        #[arg(long)]
        vocab: u64,
        /// Comma-separated: fused-ce (alias chunked-ce), chunked-kl, fused-kl, hidden-kl.
        #[arg(long, value_delimiter = ',')]
        techniques: Vec<String>,
    },
    /// Train a student (stage 1: layer alignment, stage 2: distillation).
    Train(TrainArgs),
    /// Needle-in-a-haystack accuracy of a hybrid.
    EvalNiah {
        #[arg(long)]
        hybrid: PathBuf,
        #[arg(long, default_value_t = 128)]
        len: usize,
        #[arg(long, default_value_t = 1)]
        needles: usize,
        #[arg(long, default_value_t = 200)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum DonorArg {
    Mla,
    Gdn,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Task {
    /// Synthetic bigram text distilled from the teacher.
    Distill,
    /// Key/value retrieval practice (stage 2 only, no teacher).
    Niah,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_parser = ["1", "2"])]
    stage: String,
    #[arg(long)]
    student: PathBuf,
    #[arg(long)]
    teacher: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Task::Distill)]
    task: Task,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    context: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup_ratio: Option<f64>,
    #[arg(long)]
    clip: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// naive, chunked, online or hidden.
    #[arg(long)]
    loss_path: Option<String>,
    /// Update every parameter, not only the token mixers.
    #[arg(long)]
    train_all: bool,
    /// Key/value pairs per retrieval training sequence.
    #[arg(long, default_value_t = 2)]
    pairs: usize,
    /// Held-out sequences for evaluation.
    #[arg(long, default_value_t = 8)]
    heldout: usize,
    /// Write one JSON record per step here.
    #[arg(long)]
    report: Option<PathBuf>,
}

/// An error tagged with its exit code: 1 for bad input, 2 for failures
/// while running.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn validation(message: impl Into<String>) -> Self {
        Self { code: 1, message: message.into() }
    }

    fn runtime(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::NonFinite(_) | Error::PositionOverflow { .. } => Self::runtime(e.to_string()),
            Error::Io(ref io) if io.kind() != std::io::ErrorKind::NotFound => Self::runtime(e.to_string()),
            _ => Self::validation(e.to_string()),
        }
    }
}

type CmdResult = Result<Output, Failure>;

/// What a command prints: the text form and the `--json` form.
struct Output {
    text: String,
    json: Value,
    /// Set when the command ran but reported a failed check.
    failed: bool,
}

impl Output {
    fn ok(text: String, json: Value) -> Self {
        Self { text, json, failed: false }
    }
}

/// Attaches the flag name to errors from reading an input file.
fn input<R>(flag: &str, path: &Path, r: hylo_core::Result<R>) -> Result<R, Failure> {
    if !path.exists() {
        return Err(Failure::validation(format!("{flag}: file not found: {}", path.display())));
    }
    r.map_err(|e| {
        let f = Failure::from(e);
        Failure { code: f.code, message: format!("{flag} {}: {}", path.display(), f.message) }
    })
}

fn warn_extra(flag: &str, extra: &[String]) {
    if !extra.is_empty() {
        eprintln!("warning: {flag}: ignored {} unexpected tensor(s): {}", extra.len(), extra.join(", "));
    }
}

fn read_teacher(flag: &str, path: &Path) -> Result<TeacherCheckpoint<f64>, Failure> {
    let (t, extra) = input(flag, path, load_teacher::<f64>(path))?;
    warn_extra(flag, &extra);
    Ok(t)
}

fn read_hybrid(flag: &str, path: &Path) -> Result<HybridModel<f64>, Failure> {
    let (m, extra) = input(flag, path, load_hybrid::<f64>(path))?;
    warn_extra(flag, &extra);
    Ok(m)
}

/// Reads an MLA config: either every field, or `{"cache_per_token": N}`
/// which derives the rest from the teacher.
fn read_mla_config(flag: &str, path: &Path, teacher: &TransformerConfig) -> Result<MlaConfig, Failure> {
    let parsed = std::fs::read(path)
        .map_err(Error::from)
        .and_then(|b| serde_json::from_slice::<Value>(&b).map_err(Error::from));
    let value = input(flag, path, parsed)?;
    let cfg = match value.get("cache_per_token").and_then(Value::as_u64) {
        Some(budget) if value.as_object().is_some_and(|o| o.len() == 1) => {
            MlaConfig::for_teacher(teacher, budget as usize)
        }
        _ => serde_json::from_value::<MlaConfig>(value).map_err(Error::from),
    };
    input(flag, path, cfg.and_then(|c| c.validate().map(|_| c)))
}

fn write<R>(flag: &str, path: &Path, r: hylo_core::Result<R>) -> Result<R, Failure> {
    r.map_err(|e| Failure::runtime(format!("{flag} {}: {e}", path.display())))
}

fn placeholder_mla(cfg: &TransformerConfig) -> Result<MlaConfig, Failure> {
    Ok(MlaConfig::for_teacher(cfg, cfg.head_dim)?)
}

fn run(cli: Cli, color: bool) -> CmdResult {
    match cli.command {
        Command::GenTeacher { config, seed, out } => {
            let cfg = input("--config", &config, TransformerConfig::from_json_file(&config))?;
            let teacher = gen_toy_teacher::<f64>(&cfg, seed)?;
            write("--out", &out, save_teacher(&teacher, &out))?;
            let params = hylo_core::params::Params::param_count(&teacher);
            Ok(Output::ok(
                format!("wrote teacher ({params} parameters) to {}", out.display()),
                json!({ "out": out, "parameters": params, "config": cfg }),
            ))
        }
        Command::ConvertMla { teacher, mla_config, out } => {
            let t = read_teacher("--teacher", &teacher)?;
            let mla = read_mla_config("--mla-config", &mla_config, &t.config)?;
            let gdn = GdnConfig::new(t.config.d_model, t.config.n_kv_heads)?;
            let layout = HybridLayout::all_mla(t.config.n_layers);
            let model = HybridModel::from_teacher(&t, &layout, &mla, &gdn, 0)?;
            write("--out", &out, save_hybrid(&model, &out))?;
            Ok(Output::ok(
                format!(
                    "converted {} layers to latent attention (r_kv {}, rope {}) -> {}",
                    layout.n_layers,
                    mla.r_kv,
                    mla.d_qk_rope,
                    out.display()
                ),
                json!({ "out": out, "layers": layout.n_layers, "mla_config": mla }),
            ))
        }
        Command::ConvertGdn { teacher, out, heads, seed } => {
            let t = read_teacher("--teacher", &teacher)?;
            let gdn = GdnConfig::new(t.config.d_model, heads.unwrap_or(t.config.n_kv_heads))
                .map_err(|e| Failure::validation(format!("--heads: {e}")))?;
            let layout = HybridLayout::all_linear(t.config.n_layers, LinearKind::Gdn);
            let model = HybridModel::from_teacher(&t, &layout, &placeholder_mla(&t.config)?, &gdn, seed)?;
            write("--out", &out, save_hybrid(&model, &out))?;
            Ok(Output::ok(
                format!("converted {} layers to gated deltanet ({} heads) -> {}", layout.n_layers, gdn.n_heads, out.display()),
                json!({ "out": out, "layers": layout.n_layers, "gdn_config": gdn }),
            ))
        }
        Command::Assemble { mla, gdn, layout, out, donor } => {
            let pure_mla = read_hybrid("--mla", &mla)?;
            let pure_gdn = read_hybrid("--gdn", &gdn)?;
            let layout = input("--layout", &layout, HybridLayout::from_json_file(&layout))?;
            let donor = match donor {
                DonorArg::Mla => Donor::Mla,
                DonorArg::Gdn => Donor::Gdn,
            };
            let model = assemble_hybrid(&pure_mla, &pure_gdn, &layout, donor)?;
            write("--out", &out, save_hybrid(&model, &out))?;
            Ok(Output::ok(
                format!("assembled hybrid with mla layers {:?} -> {}", layout.mla_indices, out.display()),
                json!({ "out": out, "layout": layout }),
            ))
        }
        Command::Verify { hybrid, teacher, seed } => {
            let model = read_hybrid("--hybrid", &hybrid)?;
            let t = read_teacher("--teacher", &teacher)?;
            let report = verify_suite(&model, &t, seed)?;
            let mut text = report.to_string();
            if color {
                text = text.replace(" pass", " \x1b[32mpass\x1b[0m").replace(" FAIL", " \x1b[31mFAIL\x1b[0m");
            }
            Ok(Output {
                failed: !report.all_passed(),
                json: json!({ "passed": report.all_passed(), "checks": report.checks }),
                text,
            })
        }
        Command::KvReport { layout, teacher_config, mla_config } => {
            let layout = input("--layout", &layout, HybridLayout::from_json_file(&layout))?;
            let tc = input("--teacher-config", &teacher_config, TransformerConfig::from_json_file(&teacher_config))?;
            let mla = read_mla_config("--mla-config", &mla_config, &tc)?;
            let r = kv_cache_report(&layout, &tc, &mla)?;
            Ok(Output::ok(r.to_string(), json!({ "report": r, "percent": r.percent() })))
        }
        Command::MemPlan { tokens, vocab, techniques } => {
            let techniques = techniques
                .iter()
                .filter(|s| !s.is_empty())
                .map(|s| MemTechnique::parse(s.trim()))
                .collect::<hylo_core::Result<Vec<_>>>()
                .map_err(|e| Failure::validation(format!("--techniques: {e}")))?;
            let plan = memory_plan(tokens, vocab, &techniques)?;
            let approx = format_bytes_approx(plan.logit_tensor_bytes);
            Ok(Output::ok(plan.to_string(), json!({ "plan": plan, "logit_tensor_approx": approx })))
        }
        Command::Train(args) => train(args),
        Command::EvalNiah { hybrid, len, needles, count, seed } => {
            let model = read_hybrid("--hybrid", &hybrid)?;
            let samples = niah_generate(len, needles, count, seed)?;
            let acc = niah_eval(&model, &samples)?;
            Ok(Output::ok(
                format!("needle-in-a-haystack accuracy at {len} tokens: {:.1}% ({count} samples)", acc * 100.0),
                json!({ "len": len, "needles": needles, "count": count, "accuracy": acc }),
            ))
        }
    }
}

fn train(a: TrainArgs) -> CmdResult {
    let mut model = read_hybrid("--student", &a.student)?;
    let mut cfg = if a.stage == "1" { TrainConfig::stage1() } else { TrainConfig::stage2() };
    cfg.seed = a.seed;
    if let Some(v) = a.steps {
        cfg.steps = v;
    }
    if let Some(v) = a.context {
        cfg.context_len = v;
    }
    if let Some(v) = a.batch {
        cfg.batch = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.warmup_ratio {
        cfg.warmup_ratio = v;
    }
    if let Some(p) = &a.loss_path {
        cfg.loss_path = LossPath::parse(p).map_err(|e| Failure::validation(format!("--loss-path: {e}")))?;
    }
    cfg.clip = a.clip;
    cfg.train_all = cfg.train_all || a.train_all;
    cfg.validate().map_err(|e| Failure::validation(e.to_string()))?;

    let report: TrainReport = match a.task {
        Task::Niah => {
            if a.stage != "2" {
                return Err(Failure::validation("--task niah requires --stage 2"));
            }
            let data = recall_curriculum(cfg.context_len, a.pairs, cfg.steps.max(1), cfg.batch, cfg.seed)?;
            let heldout = niah_generate(cfg.context_len, 1, a.heldout, cfg.seed.wrapping_add(1))?;
            train_niah(&mut model, &data, &heldout, &cfg)?
        }
        Task::Distill => {
            let path = a.teacher.as_ref().ok_or_else(|| Failure::validation("--teacher is required for distillation"))?;
            let teacher = read_teacher("--teacher", path)?;
            let corpus = BigramCorpus::new(teacher.config.vocab, cfg.seed)?;
            let mut rng = SeededRng::derive(cfg.seed, 0x7472);
            let data: Vec<Vec<u32>> =
                (0..cfg.steps.max(1) * cfg.batch).map(|_| corpus.sample(cfg.context_len, &mut rng)).collect();
            if a.stage == "1" {
                train_stage1_ild(&mut model, &teacher, &data, &cfg)?
            } else {
                let heldout: Vec<Vec<u32>> = (0..a.heldout).map(|_| corpus.sample(cfg.context_len, &mut rng)).collect();
                train_stage2_sft(&mut model, &teacher, &data, &heldout, &cfg)?
            }
        }
    };
    write("--out", &a.out, save_hybrid(&model, &a.out))?;
    if let Some(path) = &a.report {
        write("--report", path, std::fs::write(path, report.to_jsonl() + "\n").map_err(Error::from))?;
    }
    let summary = report.summary();
    let mut text = format!("stage {} finished {} steps in {:.1}s", a.stage, report.steps.len(), report.wall_clock_s);
    if let (Some(s), Some(e)) = (report.start_loss(), report.end_loss()) {
        text += &format!("\nloss {s:.4} -> {e:.4}");
    }
    for (k, v) in &report.metrics {
        text += &format!("\n{k:<20} {v:.4}");
    }
    text += &format!("\nwrote {}", a.out.display());
    Ok(Output::ok(text, summary))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let json_mode = cli.json;
    let color = std::env::var_os("NO_COLOR").is_none() && std::io::stdout().is_terminal() && !json_mode;
    match run(cli, color) {
        Ok(out) => {
            if json_mode {
                println!("{}", out.json);
            } else {
                println!("{}", out.text);
            }
            if out.failed {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(f) => {
            if json_mode {
                println!("{}", json!({ "error": f.message, "exit_code": f.code }));
            }
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
