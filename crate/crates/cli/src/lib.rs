//! Command-line entry points. `run` returns the process exit code:
//! 0 ok, 1 usage or runtime error, 2 invalid spec/fixture/transcript, 3 metric below threshold.

use clap::{Args, Parser, Subcommand};
use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use service::config::Config;
use worksheet::engine::Engine;
use worksheet::eval::{
    build_report, engine_for, load_fixture, load_knowledge, parse_transcript, replay_transcript, score_transcript, write_transcript,
    ConversationReport, Report, Thresholds, Transcript,
};
use worksheet::kb::LlmTranslator;
use worksheet::llm::LlmClient;
use worksheet::respond::{LlmResponder, ResponderBackend, TemplateResponder};
use worksheet::semparse::{LlmParser, ParserBackend, ScriptedBackend};
use worksheet::spec::{import_sheet, load_spec, load_spec_file, TaskSpec};

#[derive(Debug, Parser)]
#[command(name = "worksheet", version, about = "Worksheet-driven task dialogue agent", arg_required_else_help = true)]
struct Cli {
    /// Service/LLM config file (TOML); `WORKSHEET_*` variables override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Load a spec (.json or .csv) and report its size.
    Validate {
        spec: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Convert a spreadsheet export (CSV) into a JSON spec.
    ImportSheet {
        sheet: PathBuf,
        /// Write here instead of stdout.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Talk to an agent on stdin/stdout. `/quit` or end of input stops.
    Chat {
        #[arg(long)]
        spec: PathBuf,
        #[command(flatten)]
        run: RunFlags,
        /// Print one JSON object per turn instead of plain replies.
        #[arg(long)]
        json: bool,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long)]
        bind: Option<String>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
    /// Replay fixture directories (or transcripts with --spec) and score them.
    Replay {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        spec: Option<PathBuf>,
        #[command(flatten)]
        run: RunFlags,
        #[command(flatten)]
        min: MinFlags,
        #[arg(long)]
        json: bool,
        /// Also write each replayed transcript, with predictions, into this directory.
        #[arg(long)]
        save: Option<PathBuf>,
    },
    /// Score transcripts that already carry predictions.
    Score {
        #[arg(required = true)]
        transcripts: Vec<PathBuf>,
        #[command(flatten)]
        min: MinFlags,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Debug, Clone, Args)]
struct RunFlags {
    #[arg(long)]
    kb_dir: Option<PathBuf>,
    /// `scripted:FILE` (a transcript .jsonl or a {"turn": parse} .json) or `llm`.
    #[arg(long)]
    parser: Option<String>,
    /// `template` or `llm`.
    #[arg(long, default_value = "template")]
    responder: String,
    /// `table` (kb-dir/translations.json) or `llm`.
    #[arg(long, default_value = "table")]
    translator: String,
    /// Seed for the stub api results.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct MinFlags {
    #[arg(long)]
    min_sp: Option<f64>,
    #[arg(long)]
    min_ex: Option<f64>,
    #[arg(long)]
    min_da: Option<f64>,
    #[arg(long)]
    min_goal: Option<f64>,
}

impl MinFlags {
    fn thresholds(&self) -> Option<Thresholds> {
        let t = Thresholds { sp: self.min_sp, ex: self.min_ex, da: self.min_da, goal: self.min_goal };
        (t != Thresholds::default()).then_some(t)
    }
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Invalid(String),
    Threshold(Vec<String>),
    Runtime(anyhow::Error),
}

impl Failure {
    fn code(&self) -> i32 {
        match self {
            Failure::Usage(_) | Failure::Runtime(_) => 1,
            Failure::Invalid(_) => 2,
            Failure::Threshold(_) => 3,
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

fn invalid(e: impl std::fmt::Display) -> Failure {
    Failure::Invalid(e.to_string())
}

type Out<'a> = &'a mut dyn Write;

pub fn run<I, T>(args: I, stdin: &mut dyn BufRead, stdout: Out, stderr: Out) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(stderr, "{}", e.render());
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    let _ = write!(stdout, "{}", e.render());
                    0
                }
                _ => 1,
            };
        }
    };
    match dispatch(cli, stdin, stdout) {
        Ok(()) => 0,
        Err(f) => {
            let _ = match &f {
                Failure::Usage(m) => writeln!(stderr, "usage error: {m}"),
                Failure::Invalid(m) => writeln!(stderr, "error: {m}"),
                Failure::Threshold(v) => writeln!(stderr, "below threshold: {}", v.join("; ")),
                Failure::Runtime(e) => writeln!(stderr, "error: {e:#}"),
            };
            f.code()
        }
    }
}

fn dispatch(cli: Cli, stdin: &mut dyn BufRead, out: Out) -> Result<(), Failure> {
    let config = Config::load(cli.config.as_deref()).map_err(|e| Failure::Usage(e.to_string()))?;
    match cli.cmd {
        Command::Validate { spec, json } => validate(&spec, json, out),
        Command::ImportSheet { sheet, out: dest } => {
            let text = std::fs::read(&sheet).map_err(|e| invalid(format!("{}: {e}", sheet.display())))?;
            let doc = import_sheet(text.as_slice()).map_err(|e| invalid(format!("{}: {e}", sheet.display())))?;
            load_spec(&doc).map_err(|e| invalid(format!("{}: {e}", sheet.display())))?;
            let body = serde_json::to_string_pretty(&doc).expect("spec serializes") + "\n";
            match dest {
                Some(p) => std::fs::write(p, body)?,
                None => out.write_all(body.as_bytes())?,
            }
            Ok(())
        }
        Command::Chat { spec, run, json } => chat(&config, &spec, &run, json, stdin, out),
        Command::Serve { bind, data_dir } => serve(config, bind, data_dir),
        Command::Replay { inputs, spec, run, min, json, save } => replay(&config, &inputs, spec.as_deref(), &run, &min, json, save.as_deref(), out),
        Command::Score { transcripts, min, json } => score(&transcripts, &min, json, out),
    }
}

fn validate(path: &Path, json: bool, out: Out) -> Result<(), Failure> {
    let spec = load_spec_file(path).map_err(invalid)?;
    let s = spec.stats();
    if json {
        let v = serde_json::json!({
            "name": spec.name, "worksheets": s.worksheets, "fields": s.fields, "dbs": s.dbs,
            "predicates": s.predicates, "actions": s.actions,
        });
        writeln!(out, "{v}")?;
    } else {
        writeln!(
            out,
            "{}: ok ({} worksheets, {} fields, {} dbs, {} predicates, {} actions)",
            spec.name, s.worksheets, s.fields, s.dbs, s.predicates, s.actions
        )?;
    }
    Ok(())
}

/// Parser outputs keyed by turn number.
fn load_script(path: &Path) -> Result<BTreeMap<u32, String>, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    if path.extension().is_some_and(|e| e == "jsonl") {
        let t = parse_transcript(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        return Ok(t.turns.iter().enumerate().map(|(i, l)| (i as u32 + 1, l.parse.clone().unwrap_or_default())).collect());
    }
    let raw: BTreeMap<String, String> = serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    raw.into_iter()
        .map(|(k, v)| k.parse().map(|k| (k, v)).map_err(|_| invalid(format!("{}: key `{k}` is not a turn number", path.display()))))
        .collect()
}

/// Swap in the backends named by the flags.
fn configure(engine: &mut Engine, config: &Config, run: &RunFlags) -> Result<(), Failure> {
    let llm = || LlmClient::http(config.llm.clone());
    if let Some(p) = &run.parser {
        engine.parser = match p.as_str() {
            "llm" => Arc::new(LlmParser { client: llm() }) as Arc<dyn ParserBackend>,
            s => match s.strip_prefix("scripted:") {
                Some(file) => Arc::new(ScriptedBackend::new(load_script(Path::new(file))?)),
                None => return Err(Failure::Usage(format!("--parser expects scripted:FILE or llm, got `{s}`"))),
            },
        };
    }
    engine.responder = match run.responder.as_str() {
        "template" => Arc::new(TemplateResponder) as Arc<dyn ResponderBackend>,
        "llm" => Arc::new(LlmResponder { client: llm() }),
        s => return Err(Failure::Usage(format!("--responder expects template or llm, got `{s}`"))),
    };
    match run.translator.as_str() {
        "table" => {}
        "llm" => engine.kb.translator = Arc::new(LlmTranslator { client: llm() }),
        s => return Err(Failure::Usage(format!("--translator expects table or llm, got `{s}`"))),
    }
    if let Some(seed) = run.seed {
        engine.apis = worksheet::apis::ApiRuntime::new(seed);
    }
    Ok(())
}

fn translations_in(kb_dir: Option<&Path>) -> Option<PathBuf> {
    kb_dir.map(|d| d.join("translations.json")).filter(|p| p.is_file())
}

fn engine_from_flags(config: &Config, spec: TaskSpec, run: &RunFlags, meta: &worksheet::eval::Meta) -> Result<Engine, Failure> {
    let kb = load_knowledge(&spec, run.kb_dir.as_deref(), translations_in(run.kb_dir.as_deref()).as_deref()).map_err(invalid)?;
    let mut engine = engine_for(Arc::new(spec), kb, meta);
    if let Some(d) = config.clock {
        engine.clock.date = d;
    }
    configure(&mut engine, config, run)?;
    Ok(engine)
}

fn chat(config: &Config, spec: &Path, run: &RunFlags, json: bool, stdin: &mut dyn BufRead, out: Out) -> Result<(), Failure> {
    let spec = load_spec_file(spec).map_err(invalid)?;
    let meta = worksheet::eval::Meta {
        clock: Some(config.clock.unwrap_or_else(|| chrono::Local::now().date_naive())),
        seed: Some(config.seed),
        ..Default::default()
    };
    let flags = RunFlags { parser: run.parser.clone().or(Some("llm".into())), ..run.clone() };
    let engine = engine_from_flags(config, spec, &flags, &meta)?;
    let (mut state, _) = engine.start();
    if let Some(g) = &engine.spec.greeting {
        if json {
            writeln!(out, "{}", serde_json::json!({ "greeting": g }))?;
        } else {
            writeln!(out, "agent> {g}")?;
        }
    }
    let mut line = String::new();
    loop {
        if !json {
            write!(out, "you> ")?;
            out.flush()?;
        }
        line.clear();
        if stdin.read_line(&mut line)? == 0 {
            break;
        }
        let utterance = line.trim_end_matches(['\n', '\r']);
        if utterance.trim() == "/quit" {
            break;
        }
        let (r, _) = engine.take_turn(&mut state, utterance);
        if json {
            let v = serde_json::json!({
                "turn": state.turn_index,
                "reply": r.reply,
                "acts": r.canonical_acts(),
                "executions": r.executions,
                "backend_error": r.backend_error,
            });
            writeln!(out, "{v}")?;
        } else {
            writeln!(out, "agent> {}", r.reply)?;
        }
    }
    Ok(())
}

fn serve(mut config: Config, bind: Option<String>, data_dir: Option<PathBuf>) -> Result<(), Failure> {
    if let Some(b) = bind {
        config.bind = b;
    }
    if let Some(d) = data_dir {
        config.data_dir = d;
    }
    let _ = tracing_subscriber::fmt().with_env_filter(tracing_subscriber::EnvFilter::from_default_env()).try_init();
    let store = Arc::new(service::Store::open(config).map_err(|e| Failure::Runtime(e.into()))?);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(service::serve(store))?;
    Ok(())
}

fn emit(report: &Report, json: bool, out: Out) -> Result<(), Failure> {
    let text = if json { report.to_json() } else { report.to_table() };
    out.write_all(text.as_bytes())?;
    Ok(())
}

fn check(report: &Report, per_input: &[(String, Thresholds, ConversationReport)], cli: Option<Thresholds>) -> Result<(), Failure> {
    let mut bad = Vec::new();
    match cli {
        Some(t) => bad.extend(t.violations(report)),
        None => {
            for (name, t, conv) in per_input {
                bad.extend(t.violations(&build_report(vec![conv.clone()])).into_iter().map(|v| format!("{name}: {v}")));
            }
        }
    }
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Failure::Threshold(bad))
    }
}

#[allow(clippy::too_many_arguments)]
fn replay(
    config: &Config,
    inputs: &[PathBuf],
    spec: Option<&Path>,
    run: &RunFlags,
    min: &MinFlags,
    json: bool,
    save: Option<&Path>,
    out: Out,
) -> Result<(), Failure> {
    let scripted = !matches!(run.parser.as_deref(), Some("llm"));
    if run.parser.as_deref().is_some_and(|p| p.starts_with("scripted:")) {
        return Err(Failure::Usage("replay scripts each turn from the transcript; use --parser llm or omit it".into()));
    }
    let mut per_input = Vec::new();
    for input in inputs {
        let (name, mut engine, transcript, thresholds) = if input.is_dir() {
            let fx = load_fixture(input).map_err(invalid)?;
            let mut engine = engine_for(fx.spec.clone(), fx.kb.clone(), &fx.transcript.meta);
            if let Some(d) = &run.kb_dir {
                engine.kb = load_knowledge(&fx.spec, Some(d), translations_in(Some(d)).as_deref()).map_err(invalid)?;
            }
            (fx.name, engine, fx.transcript, fx.thresholds)
        } else {
            let spec = spec.ok_or_else(|| Failure::Usage(format!("{} is a transcript file; pass --spec", input.display())))?;
            let text = std::fs::read_to_string(input).map_err(|e| invalid(format!("{}: {e}", input.display())))?;
            let t = parse_transcript(&text).map_err(|e| invalid(format!("{}: {e}", input.display())))?;
            let spec = load_spec_file(spec).map_err(invalid)?;
            let engine = engine_from_flags(config, spec, &RunFlags { parser: None, ..run.clone() }, &t.meta)?;
            let name = t.meta.name.clone().unwrap_or_else(|| stem(input));
            (name, engine, t, config.thresholds)
        };
        configure(&mut engine, config, run)?;
        let replayed = replay_transcript(&engine, &transcript, scripted);
        if let Some(dir) = save {
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join(format!("{name}.jsonl")), write_transcript(&replayed.transcript))?;
        }
        let conv = score_transcript(&name, &replayed.transcript).map_err(invalid)?;
        per_input.push((name, thresholds, conv));
    }
    let report = build_report(per_input.iter().map(|(_, _, c)| c.clone()).collect());
    emit(&report, json, out)?;
    check(&report, &per_input, min.thresholds())
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "transcript".into())
}

/// Score recorded transcripts; the output is exactly the eval report.
pub fn score_files(paths: &[PathBuf]) -> Result<Report, String> {
    let mut convs = Vec::new();
    for p in paths {
        let text = std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
        let t: Transcript = parse_transcript(&text).map_err(|e| format!("{}: {e}", p.display()))?;
        let name = t.meta.name.clone().unwrap_or_else(|| stem(p));
        convs.push(score_transcript(&name, &t).map_err(|e| format!("{}: {e}", p.display()))?);
    }
    Ok(build_report(convs))
}

fn score(paths: &[PathBuf], min: &MinFlags, json: bool, out: Out) -> Result<(), Failure> {
    let report = score_files(paths).map_err(Failure::Invalid)?;
    emit(&report, json, out)?;
    match min.thresholds() {
        Some(t) => check(&report, &[], Some(t)),
        None => Ok(()),
    }
}
