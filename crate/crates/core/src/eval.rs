//! Annotated transcripts, the four conversation metrics, and fixture replay.

use chrono::NaiveDate;
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::acts::canonicalize_act_str;
use crate::apis::{json_to_value, ApiRuntime};
use crate::engine::{Engine, TurnResult};
use crate::kb::{parse_query, KbStore, TableTranslator};
use crate::llm::BackendError;
use crate::policy::{ExecKind, ExecutionRecord, KnowledgeBackend};
use crate::respond::{ResponderBackend, TemplateResponder};
use crate::semparse::{default_few_shots, Clock, ParseRequest, ParserBackend};
use crate::spec::{load_spec_file, TaskSpec, WorksheetKind};
use crate::state::{DialogueState, SlotValue};

#[derive(Debug, thiserror::Error)]
pub enum FixtureError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("transcript line {line}: {message}")]
    Transcript { line: usize, message: String },
    #[error("turn {0} has no recorded prediction; replay it first")]
    MissingRecord(usize),
    #[error(transparent)]
    Spec(#[from] crate::spec::SpecFileError),
    #[error("knowledge base: {0}")]
    Kb(#[from] crate::kb::KbError),
}

// ---------------------------------------------------------------- transcript format

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Goal {
    pub api: String,
    #[serde(default)]
    pub params: IndexMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Meta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub goal: Option<Goal>,
    /// Canonical act string to the domain labels it may stand for.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub aliases: BTreeMap<String, Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clock: Option<NaiveDate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct GoldTurn {
    #[serde(default)]
    pub apis: Vec<String>,
    #[serde(default)]
    pub dbs: Vec<String>,
    /// `[var, field, value]` triples.
    #[serde(default)]
    pub fields: Vec<(String, String, serde_json::Value)>,
    #[serde(default)]
    pub acts: Vec<String>,
    /// Canonical forms of the executions that should happen this turn.
    #[serde(default)]
    pub executions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TurnRecord {
    pub statements: String,
    pub sp_items: Vec<String>,
    pub executions: Vec<ExecutionRecord>,
    pub acts: Vec<String>,
    pub reply: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnLine {
    pub user: String,
    /// Scripted parser output for this turn.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parse: Option<String>,
    #[serde(default)]
    pub gold: GoldTurn,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record: Option<TurnRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum Line {
    Meta(Meta),
    Turn(TurnLine),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Transcript {
    pub meta: Meta,
    pub turns: Vec<TurnLine>,
}

pub fn parse_transcript(text: &str) -> Result<Transcript, FixtureError> {
    let mut t = Transcript::default();
    for (i, l) in text.lines().enumerate() {
        if l.trim().is_empty() {
            continue;
        }
        let line: Line = serde_json::from_str(l).map_err(|e| FixtureError::Transcript { line: i + 1, message: e.to_string() })?;
        match line {
            Line::Meta(m) => t.meta = m,
            Line::Turn(turn) => t.turns.push(turn),
        }
    }
    Ok(t)
}

pub fn write_transcript(t: &Transcript) -> String {
    let mut out = String::new();
    let lines = std::iter::once(Line::Meta(t.meta.clone())).chain(t.turns.iter().cloned().map(Line::Turn));
    for l in lines {
        out.push_str(&serde_json::to_string(&l).expect("transcript serializes"));
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------- metrics

/// A fraction kept as counts so it can be pooled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Ratio {
    pub num: usize,
    pub den: usize,
}

impl Ratio {
    /// `None` when the denominator is empty.
    pub fn value(self) -> Option<f64> {
        (self.den > 0).then(|| self.num as f64 / self.den as f64)
    }

    fn add(self, o: Ratio) -> Ratio {
        Ratio { num: self.num + o.num, den: self.den + o.den }
    }
}

fn canonical_query(q: &str) -> String {
    parse_query(q).map(|q| q.to_string()).unwrap_or_else(|_| q.trim().to_string())
}

pub fn field_item(var: &str, field: &str, norm: &str) -> String {
    format!("F|{var}|{field}|{norm}")
}

/// Gold SP choices as item strings: `A|api`, `D|query`, `F|var|field|value`.
pub fn gold_items(g: &GoldTurn) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    out.extend(g.apis.iter().map(|a| format!("A|{}", a.trim())));
    out.extend(g.dbs.iter().map(|d| format!("D|{}", canonical_query(d))));
    out.extend(g.fields.iter().map(|(v, f, x)| field_item(v, f, &json_to_value(x).norm())));
    out
}

/// SP choices made by the parser on one turn, read off the apply report and the post-policy state.
pub fn predicted_items(spec: &TaskSpec, r: &TurnResult, state: &DialogueState) -> Vec<String> {
    let mut out = BTreeSet::new();
    for ws in &r.worksheets {
        if spec.worksheet(ws).is_some_and(|w| w.kind == WorksheetKind::Task) {
            out.insert(format!("A|{ws}"));
        }
    }
    for (var, question) in &r.report.queries {
        let q = state.instance(var).and_then(|i| i.value("structured_query")).map(|v| canonical_query(&v.to_string()));
        out.insert(format!("D|{}", q.unwrap_or_else(|| format!("answer({question})"))));
    }
    for a in &r.report.applied {
        match &a.value {
            SlotValue::Filled(v) => out.insert(field_item(&a.var, &a.field, &v.norm())),
            SlotValue::Refused => out.insert(field_item(&a.var, &a.field, "na")),
            SlotValue::Empty => false,
        };
    }
    out.into_iter().collect()
}

/// |pred ∩ gold| over |gold|.
pub fn sp_counts(gold: &BTreeSet<String>, pred: &[String]) -> Ratio {
    let pred: BTreeSet<&String> = pred.iter().collect();
    Ratio { num: gold.iter().filter(|g| pred.contains(g)).count(), den: gold.len() }
}

/// Executions judged against the gold multiset: an ok execution that consumes an unmatched gold
/// entry is a true positive; everything else is a false positive.
pub fn ex_counts(gold: &[String], pred: &[(String, bool)]) -> Ratio {
    let mut left: BTreeMap<String, usize> = BTreeMap::new();
    for g in gold {
        *left.entry(g.trim().to_string()).or_default() += 1;
    }
    let mut tp = 0;
    for (p, ok) in pred {
        if !ok {
            continue;
        }
        if let Some(n) = left.get_mut(p.trim()).filter(|n| **n > 0) {
            *n -= 1;
            tp += 1;
        }
    }
    Ratio { num: tp, den: pred.len() }
}

fn act_matches(gold: &str, emitted: &str, aliases: &BTreeMap<String, Vec<String>>) -> bool {
    let g = canonicalize_act_str(gold);
    g == emitted || aliases.get(emitted).is_some_and(|ls| ls.iter().any(|l| l.trim() == gold.trim()))
}

/// Alias table with keys in canonical form.
pub fn canonical_aliases(raw: &BTreeMap<String, Vec<String>>) -> BTreeMap<String, Vec<String>> {
    let mut out: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (k, v) in raw {
        out.entry(canonicalize_act_str(k)).or_default().extend(v.iter().cloned());
    }
    out
}

/// Largest one-to-one matching of gold acts to emitted acts, over |gold|.
pub fn da_counts(gold: &[String], emitted: &[String], aliases: &BTreeMap<String, Vec<String>>) -> Ratio {
    let adj: Vec<Vec<usize>> =
        gold.iter().map(|g| (0..emitted.len()).filter(|&j| act_matches(g, &emitted[j], aliases)).collect()).collect();
    let mut owner: Vec<Option<usize>> = vec![None; emitted.len()];
    fn augment(i: usize, adj: &[Vec<usize>], seen: &mut [bool], owner: &mut [Option<usize>]) -> bool {
        for &j in &adj[i] {
            if seen[j] {
                continue;
            }
            seen[j] = true;
            if owner[j].is_none_or(|k| augment(k, adj, seen, owner)) {
                owner[j] = Some(i);
                return true;
            }
        }
        false
    }
    let mut matched = 0;
    for i in 0..gold.len() {
        let mut seen = vec![false; emitted.len()];
        if augment(i, &adj, &mut seen, &mut owner) {
            matched += 1;
        }
    }
    Ratio { num: matched, den: gold.len() }
}

/// Some successful call of the goal api carries every expected parameter value.
pub fn goal_completed(goal: &Goal, executions: &[ExecutionRecord]) -> bool {
    executions.iter().any(|e| {
        e.kind == ExecKind::Api
            && e.ok
            && e.name == goal.api
            && goal.params.iter().all(|(k, want)| e.args.get(k).is_some_and(|got| got.norm() == json_to_value(want).norm()))
    })
}

// ---------------------------------------------------------------- reports

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    /// Pooled counts.
    pub micro: Option<f64>,
    /// Mean of the defined per-unit values.
    #[serde(rename = "macro")]
    pub macro_avg: Option<f64>,
    pub num: usize,
    pub den: usize,
}

fn summarize(parts: &[Ratio]) -> Summary {
    let pooled = parts.iter().fold(Ratio::default(), |a, &b| a.add(b));
    Summary { micro: pooled.value(), macro_avg: mean(parts.iter().filter_map(|r| r.value())), num: pooled.num, den: pooled.den }
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let xs: Vec<f64> = xs.collect();
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnScore {
    pub turn: usize,
    pub sp: Ratio,
    pub ex: Ratio,
    pub da: Ratio,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversationReport {
    pub name: String,
    pub turns: Vec<TurnScore>,
    /// Micro pools the turns; macro averages them.
    pub sp: Summary,
    pub ex: Summary,
    pub da: Summary,
    /// `None` when the transcript declares no goal.
    pub goal: Option<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Overall {
    /// Micro pools every turn; macro averages the per-conversation micro values.
    pub sp: Summary,
    pub ex: Summary,
    pub da: Summary,
    pub goal: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub conversations: Vec<ConversationReport>,
    pub overall: Overall,
}

/// Score a transcript whose turns carry recorded predictions.
pub fn score_transcript(name: &str, t: &Transcript) -> Result<ConversationReport, FixtureError> {
    let aliases = canonical_aliases(&t.meta.aliases);
    let mut turns = Vec::new();
    let mut all_execs = Vec::new();
    for (i, line) in t.turns.iter().enumerate() {
        let rec = line.record.as_ref().ok_or(FixtureError::MissingRecord(i + 1))?;
        let preds: Vec<(String, bool)> = rec.executions.iter().map(|e| (e.canonical(), e.ok)).collect();
        turns.push(TurnScore {
            turn: i + 1,
            sp: sp_counts(&gold_items(&line.gold), &rec.sp_items),
            ex: ex_counts(&line.gold.executions, &preds),
            da: da_counts(&line.gold.acts, &rec.acts, &aliases),
        });
        all_execs.extend(rec.executions.iter().cloned());
    }
    let pick = |f: fn(&TurnScore) -> Ratio| summarize(&turns.iter().map(f).collect::<Vec<_>>());
    Ok(ConversationReport {
        name: name.to_string(),
        sp: pick(|s| s.sp),
        ex: pick(|s| s.ex),
        da: pick(|s| s.da),
        goal: t.meta.goal.as_ref().map(|g| goal_completed(g, &all_execs) as u8),
        turns,
    })
}

fn overall_summary(convs: &[ConversationReport], f: fn(&ConversationReport) -> &Summary) -> Summary {
    let pooled = convs.iter().fold(Ratio::default(), |a, c| a.add(Ratio { num: f(c).num, den: f(c).den }));
    Summary { micro: pooled.value(), macro_avg: mean(convs.iter().filter_map(|c| f(c).micro)), num: pooled.num, den: pooled.den }
}

pub fn build_report(conversations: Vec<ConversationReport>) -> Report {
    let overall = Overall {
        sp: overall_summary(&conversations, |c| &c.sp),
        ex: overall_summary(&conversations, |c| &c.ex),
        da: overall_summary(&conversations, |c| &c.da),
        goal: mean(conversations.iter().filter_map(|c| c.goal.map(f64::from))),
    };
    Report { conversations, overall }
}

fn cell(s: &Summary) -> String {
    let f = |x: Option<f64>| x.map(|v| format!("{v:.3}")).unwrap_or_else(|| "n/a".into());
    format!("{}/{}", f(s.micro), f(s.macro_avg))
}

impl Report {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<24} {:>5}  {:>11}  {:>11}  {:>11}  {:>5}", "conversation", "turns", "SP", "Ex", "DA", "Goal");
        for c in &self.conversations {
            let goal = c.goal.map(|g| g.to_string()).unwrap_or_else(|| "n/a".into());
            let _ = writeln!(out, "{:<24} {:>5}  {:>11}  {:>11}  {:>11}  {:>5}", c.name, c.turns.len(), cell(&c.sp), cell(&c.ex), cell(&c.da), goal);
        }
        let o = &self.overall;
        let goal = o.goal.map(|g| format!("{g:.3}")).unwrap_or_else(|| "n/a".into());
        let turns: usize = self.conversations.iter().map(|c| c.turns.len()).sum();
        let _ = writeln!(out, "{:<24} {:>5}  {:>11}  {:>11}  {:>11}  {:>5}", "overall", turns, cell(&o.sp), cell(&o.ex), cell(&o.da), goal);
        out.push_str("cells are micro/macro; n/a marks an empty denominator\n");
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    pub sp: Option<f64>,
    pub ex: Option<f64>,
    pub da: Option<f64>,
    pub goal: Option<f64>,
}

impl Thresholds {
    /// Overall micro values (and the goal rate) under their threshold; undefined metrics pass.
    pub fn violations(&self, r: &Report) -> Vec<String> {
        let o = &r.overall;
        let checks = [("SP", self.sp, o.sp.micro), ("Ex", self.ex, o.ex.micro), ("DA", self.da, o.da.micro), ("Goal", self.goal, o.goal)];
        checks
            .iter()
            .filter_map(|(n, min, got)| match (min, got) {
                (Some(min), Some(got)) if got < min => Some(format!("{n} {got:.3} < {min:.3}")),
                _ => None,
            })
            .collect()
    }
}

// ---------------------------------------------------------------- replay

struct FixedParse(String);

impl ParserBackend for FixedParse {
    fn complete(&self, _req: &ParseRequest<'_>) -> Result<String, BackendError> {
        Ok(self.0.clone())
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct FixtureDoc {
    #[serde(default)]
    name: Option<String>,
    spec: PathBuf,
    #[serde(default)]
    kb_dir: Option<PathBuf>,
    #[serde(default)]
    translations: Option<PathBuf>,
    transcript: PathBuf,
    #[serde(default)]
    thresholds: Thresholds,
}

#[derive(Clone)]
pub struct Fixture {
    pub name: String,
    pub spec: Arc<TaskSpec>,
    pub kb: KnowledgeBackend,
    pub transcript: Transcript,
    pub thresholds: Thresholds,
}

fn read(path: &Path) -> Result<String, FixtureError> {
    std::fs::read_to_string(path).map_err(|e| FixtureError::Io { path: path.display().to_string(), message: e.to_string() })
}

pub fn load_knowledge(spec: &TaskSpec, kb_dir: Option<&Path>, translations: Option<&Path>) -> Result<KnowledgeBackend, FixtureError> {
    let store = match kb_dir {
        Some(d) => KbStore::load_dir(spec, d)?,
        None => KbStore::new(),
    };
    let translator = match translations {
        Some(p) => TableTranslator::from_json(&read(p)?)
            .map_err(|e| FixtureError::Io { path: p.display().to_string(), message: e.to_string() })?,
        None => TableTranslator::default(),
    };
    Ok(KnowledgeBackend { store: Arc::new(store), translator: Arc::new(translator) })
}

/// Load `fixture.json` from a fixture directory; paths inside it are relative to that directory.
pub fn load_fixture(dir: &Path) -> Result<Fixture, FixtureError> {
    let path = dir.join("fixture.json");
    let doc: FixtureDoc =
        serde_json::from_str(&read(&path)?).map_err(|e| FixtureError::Io { path: path.display().to_string(), message: e.to_string() })?;
    let spec = load_spec_file(&dir.join(&doc.spec))?;
    let kb = load_knowledge(&spec, doc.kb_dir.map(|d| dir.join(d)).as_deref(), doc.translations.map(|p| dir.join(p)).as_deref())?;
    let transcript = parse_transcript(&read(&dir.join(&doc.transcript))?)?;
    let name = doc
        .name
        .or_else(|| transcript.meta.name.clone())
        .or_else(|| dir.file_name().map(|n| n.to_string_lossy().into_owned()))
        .unwrap_or_else(|| "fixture".into());
    Ok(Fixture { name, spec: Arc::new(spec), kb, transcript, thresholds: doc.thresholds })
}

pub const DEFAULT_CLOCK: (i32, u32, u32) = (2024, 1, 1);

/// Engine for a transcript: clock and seed from its meta line, scripted parsing, template replies.
pub fn engine_for(spec: Arc<TaskSpec>, kb: KnowledgeBackend, meta: &Meta) -> Engine {
    let (y, m, d) = DEFAULT_CLOCK;
    Engine {
        spec,
        kb,
        apis: ApiRuntime::new(meta.seed.unwrap_or(0)),
        parser: Arc::new(FixedParse(String::new())),
        responder: Arc::new(TemplateResponder) as Arc<dyn ResponderBackend>,
        clock: Clock { date: meta.clock.unwrap_or_else(|| NaiveDate::from_ymd_opt(y, m, d).expect("valid date")) },
        few_shots: default_few_shots(),
    }
}

pub struct ReplayRun {
    /// The input transcript with every turn's record filled in.
    pub transcript: Transcript,
    pub state: DialogueState,
    pub results: Vec<TurnResult>,
}

/// Drive the engine through the transcript. With `scripted`, each turn's `parse` stands in for
/// the parser; otherwise the engine's own parser runs.
pub fn replay_transcript(engine: &Engine, t: &Transcript, scripted: bool) -> ReplayRun {
    let (mut state, _) = engine.start();
    let mut out = t.clone();
    let mut results = Vec::new();
    for line in out.turns.iter_mut() {
        let mut e = engine.clone();
        if scripted {
            e.parser = Arc::new(FixedParse(line.parse.clone().unwrap_or_default()));
        }
        let (r, _) = e.take_turn(&mut state, &line.user);
        line.record = Some(TurnRecord {
            statements: r.statements.clone(),
            sp_items: predicted_items(&engine.spec, &r, &state),
            executions: r.executions.clone(),
            acts: r.canonical_acts(),
            reply: r.reply.clone(),
        });
        results.push(r);
    }
    ReplayRun { transcript: out, state, results }
}

pub fn replay_fixture(fx: &Fixture) -> (ReplayRun, ConversationReport) {
    let engine = engine_for(fx.spec.clone(), fx.kb.clone(), &fx.transcript.meta);
    let run = replay_transcript(&engine, &fx.transcript, true);
    let report = score_transcript(&fx.name, &run.transcript).expect("replay records every turn");
    (run, report)
}
