//! Statement language of the semantic parser, prompt assembly and parser backends.

use chrono::NaiveDate;
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::acts::{repr, DialogueAct};
use crate::lexer::{quote, tokenize, Spanned, Tok};
use crate::llm::{BackendError, LlmClient};
use crate::spec::{render_for_prompt, TaskSpec, WorksheetKind};
use crate::state::{apply_updates, snapshot_for_prompt, ApplyMode, ApplyReport, DialogueState, UpdateStatement, ValueExpr};
use crate::value::{parse_date, parse_time, Value};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineError {
    /// 1-based line number of the first physical line of the statement.
    pub line: usize,
    pub text: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParseReport {
    pub statements: Vec<UpdateStatement>,
    pub errors: Vec<LineError>,
}

/// Nested form before flattening.
#[derive(Debug, Clone, PartialEq)]
pub enum PValue {
    Lit(Value),
    Null,
    Var(String),
    Ctor { ws: String, args: Vec<(String, PValue)> },
    Query(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum PStmt {
    Assign { var: String, field: String, value: PValue },
    Bind { var: String, value: PValue },
    Bare(PValue),
}

struct P {
    toks: Vec<Spanned>,
    i: usize,
}

type PResult<T> = Result<T, String>;

impl P {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.i).map(|t| &t.tok)
    }
    fn peek2(&self) -> Option<&Tok> {
        self.toks.get(self.i + 1).map(|t| &t.tok)
    }
    fn next(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.i).map(|t| t.tok.clone());
        self.i += 1;
        t
    }
    fn expect(&mut self, want: Tok) -> PResult<()> {
        match self.next() {
            Some(t) if t == want => Ok(()),
            Some(t) => Err(format!("expected {want}, found {t}")),
            None => Err(format!("expected {want}, found end of line")),
        }
    }
    fn ident(&mut self) -> PResult<String> {
        match self.next() {
            Some(Tok::Ident(s)) => Ok(s),
            Some(t) => Err(format!("expected identifier, found {t}")),
            None => Err("expected identifier, found end of line".into()),
        }
    }

    fn stmt(&mut self) -> PResult<PStmt> {
        let Some(Tok::Ident(first)) = self.peek().cloned() else {
            return Err("statement must start with an identifier".into());
        };
        match self.peek2() {
            Some(Tok::Dot) => {
                self.next();
                self.next();
                let field = self.ident()?;
                self.expect(Tok::Assign)?;
                let value = self.value()?;
                Ok(PStmt::Assign { var: first, field, value })
            }
            Some(Tok::Assign) => {
                self.next();
                self.next();
                let value = self.value()?;
                match value {
                    PValue::Ctor { .. } | PValue::Query(_) => Ok(PStmt::Bind { var: first, value }),
                    _ => Err(format!("`{first} = ...` must bind a constructor or answer(...); use var.field = value")),
                }
            }
            Some(Tok::LParen) => {
                let v = self.value()?;
                Ok(PStmt::Bare(v))
            }
            _ => Err(format!("unexpected statement starting with `{first}`")),
        }
    }

    fn value(&mut self) -> PResult<PValue> {
        match self.next() {
            Some(Tok::Str(s)) => Ok(PValue::Lit(Value::Str(s))),
            Some(Tok::Int(i)) => i64::try_from(i).map(|i| PValue::Lit(Value::Int(i))).map_err(|_| "integer out of range".into()),
            Some(Tok::Float(x)) => Ok(PValue::Lit(Value::Float(x))),
            Some(Tok::Minus) => match self.next() {
                Some(Tok::Int(i)) => {
                    i64::try_from(-i).map(|i| PValue::Lit(Value::Int(i))).map_err(|_| "integer out of range".into())
                }
                Some(Tok::Float(x)) => Ok(PValue::Lit(Value::Float(-x))),
                _ => Err("expected number after `-`".into()),
            },
            Some(Tok::LBracket) => {
                let mut items = Vec::new();
                while self.peek() != Some(&Tok::RBracket) {
                    items.push(self.literal()?);
                    if self.peek() == Some(&Tok::Comma) {
                        self.next();
                    } else {
                        break;
                    }
                }
                self.expect(Tok::RBracket)?;
                Ok(PValue::Lit(Value::List(items)))
            }
            Some(Tok::LBrace) => {
                let mut map = IndexMap::new();
                while self.peek() != Some(&Tok::RBrace) {
                    let key = match self.next() {
                        Some(Tok::Str(s)) => s,
                        _ => return Err("record keys must be strings".into()),
                    };
                    self.expect(Tok::Colon)?;
                    map.insert(key, self.literal()?);
                    if self.peek() == Some(&Tok::Comma) {
                        self.next();
                    } else {
                        break;
                    }
                }
                self.expect(Tok::RBrace)?;
                Ok(PValue::Lit(Value::Record(map)))
            }
            Some(Tok::Ident(name)) => match name.as_str() {
                "True" | "true" => Ok(PValue::Lit(Value::Bool(true))),
                "False" | "false" => Ok(PValue::Lit(Value::Bool(false))),
                "None" | "null" => Ok(PValue::Null),
                _ if self.peek() == Some(&Tok::LParen) => self.call(name),
                _ if self.peek() == Some(&Tok::Dot) => Err(format!("dotted values like `{name}.…` are not supported")),
                _ => Ok(PValue::Var(name)),
            },
            Some(t) => Err(format!("unexpected {t}")),
            None => Err("expected a value, found end of line".into()),
        }
    }

    fn literal(&mut self) -> PResult<Value> {
        match self.value()? {
            PValue::Lit(v) => Ok(v),
            _ => Err("lists and records may only contain literals".into()),
        }
    }

    fn call(&mut self, name: String) -> PResult<PValue> {
        self.expect(Tok::LParen)?;
        if name == "answer" || name == "date" || name == "time" {
            let s = match self.next() {
                Some(Tok::Str(s)) => s,
                _ => return Err(format!("{name}() takes one string")),
            };
            self.expect(Tok::RParen)?;
            return match name.as_str() {
                "answer" => Ok(PValue::Query(s)),
                "date" => parse_date(&s).map(|d| PValue::Lit(Value::Date(d))).ok_or_else(|| format!("bad date {s:?}")),
                _ => parse_time(&s).map(|t| PValue::Lit(Value::Time(t))).ok_or_else(|| format!("bad time {s:?}")),
            };
        }
        let mut args = Vec::new();
        while self.peek() != Some(&Tok::RParen) {
            let k = self.ident()?;
            if self.peek() != Some(&Tok::Assign) {
                return Err(format!("constructor {name}() takes keyword arguments only"));
            }
            self.next();
            args.push((k, self.value()?));
            if self.peek() == Some(&Tok::Comma) {
                self.next();
            } else {
                break;
            }
        }
        self.expect(Tok::RParen)?;
        Ok(PValue::Ctor { ws: name, args })
    }
}

/// Keep only fenced code if the text has fences.
fn unfence(raw: &str) -> String {
    if !raw.contains("```") {
        return raw.to_string();
    }
    let mut out = Vec::new();
    let mut inside = false;
    for line in raw.lines() {
        if line.trim_start().starts_with("```") {
            inside = !inside;
            out.push(String::new());
            continue;
        }
        out.push(if inside { line.to_string() } else { String::new() });
    }
    out.join("\n")
}

/// Bracket depth change of one physical line, ignoring quoted text.
fn depth_delta(line: &str) -> i32 {
    let mut d = 0;
    let mut quote: Option<char> = None;
    let mut chars = line.chars();
    while let Some(c) = chars.next() {
        match quote {
            Some(q) => {
                if c == '\\' {
                    chars.next();
                } else if c == q {
                    quote = None;
                }
            }
            None => match c {
                '\'' | '"' => quote = Some(c),
                '(' | '[' | '{' => d += 1,
                ')' | ']' | '}' => d -= 1,
                '#' => break,
                _ => {}
            },
        }
    }
    d
}

pub fn parse_nested_line(text: &str) -> PResult<PStmt> {
    let toks = tokenize(text, false).map_err(|e| e.to_string())?;
    let mut p = P { toks, i: 0 };
    let s = p.stmt()?;
    if p.peek() == Some(&Tok::Semi) {
        p.next();
    }
    if let Some(t) = p.peek() {
        return Err(format!("trailing input: {t}"));
    }
    Ok(s)
}

fn flatten_value(v: PValue, out: &mut Vec<UpdateStatement>) -> ValueExpr {
    match v {
        PValue::Lit(v) => ValueExpr::Lit(v),
        PValue::Null => ValueExpr::Null,
        PValue::Var(v) => ValueExpr::Var(v),
        PValue::Query(q) => {
            out.push(UpdateStatement::Query { var: None, question: q });
            ValueExpr::Nested(out.len() - 1)
        }
        PValue::Ctor { ws, args } => {
            let args = args.into_iter().map(|(k, v)| (k, flatten_value(v, out))).collect();
            out.push(UpdateStatement::Construct { var: None, ws, args });
            ValueExpr::Nested(out.len() - 1)
        }
    }
}

pub fn flatten(stmts: Vec<PStmt>) -> Vec<UpdateStatement> {
    let mut out = Vec::new();
    for s in stmts {
        match s {
            PStmt::Assign { var, field, value } => {
                let value = flatten_value(value, &mut out);
                out.push(UpdateStatement::Assign { var, field, value });
            }
            PStmt::Bind { var, value: PValue::Query(q) } => out.push(UpdateStatement::Query { var: Some(var), question: q }),
            PStmt::Bind { var, value: PValue::Ctor { ws, args } } => {
                let args = args.into_iter().map(|(k, v)| (k, flatten_value(v, &mut out))).collect();
                out.push(UpdateStatement::Construct { var: Some(var), ws, args });
            }
            PStmt::Bind { .. } => unreachable!("parser only binds constructors and queries"),
            PStmt::Bare(v) => {
                flatten_value(v, &mut out);
            }
        }
    }
    out
}

/// Parse raw backend output. Unparseable statements are reported; the rest still apply.
pub fn parse_statements(raw: &str) -> ParseReport {
    let text = unfence(raw);
    let mut parsed = Vec::new();
    let mut errors = Vec::new();
    let mut buf = String::new();
    let mut start = 0;
    let mut depth = 0;
    let lines: Vec<&str> = text.lines().collect();
    for (i, line) in lines.iter().enumerate() {
        if buf.is_empty() {
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            start = i + 1;
        } else {
            buf.push('\n');
        }
        buf.push_str(line);
        depth += depth_delta(line);
        if depth > 0 && i + 1 < lines.len() {
            continue;
        }
        let stmt_text = std::mem::take(&mut buf);
        depth = 0;
        for piece in split_semicolons(&stmt_text) {
            match parse_nested_line(piece.trim()) {
                Ok(s) => parsed.push(s),
                Err(message) => errors.push(LineError { line: start, text: piece.trim().to_string(), message }),
            }
        }
    }
    ParseReport { statements: flatten(parsed), errors }
}

fn split_semicolons(s: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut quote: Option<char> = None;
    let mut depth = 0;
    let mut last = 0;
    let mut escaped = false;
    for (i, c) in s.char_indices() {
        if let Some(q) = quote {
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == q {
                quote = None;
            }
            continue;
        }
        match c {
            '\'' | '"' => quote = Some(c),
            '(' | '[' | '{' => depth += 1,
            ')' | ']' | '}' => depth -= 1,
            ';' if depth == 0 => {
                out.push(&s[last..i]);
                last = i + 1;
            }
            _ => {}
        }
    }
    out.push(&s[last..]);
    out.into_iter().filter(|p| !p.trim().is_empty()).collect()
}

fn print_value(v: &ValueExpr, stmts: &[UpdateStatement], inlined: &mut [bool]) -> String {
    match v {
        ValueExpr::Lit(v) => repr(v),
        ValueExpr::Null => "None".into(),
        ValueExpr::Var(v) => v.clone(),
        ValueExpr::Nested(k) => {
            inlined[*k] = true;
            print_inline(*k, stmts, inlined)
        }
    }
}

fn print_args(args: &[(String, ValueExpr)], stmts: &[UpdateStatement], inlined: &mut [bool]) -> String {
    args.iter().map(|(k, v)| format!("{k}={}", print_value(v, stmts, inlined))).collect::<Vec<_>>().join(", ")
}

fn print_inline(k: usize, stmts: &[UpdateStatement], inlined: &mut [bool]) -> String {
    match &stmts[k] {
        UpdateStatement::Query { question, .. } => format!("answer({})", quote(question, '"')),
        UpdateStatement::Construct { ws, args, .. } => format!("{ws}({})", print_args(args, stmts, inlined)),
        UpdateStatement::Assign { .. } => "None".into(),
    }
}

/// Print flattened statements, re-nesting anonymous constructs into their referencing value.
pub fn print_statements(stmts: &[UpdateStatement]) -> String {
    let mut referenced = vec![false; stmts.len()];
    let mark = |v: &ValueExpr, r: &mut Vec<bool>| {
        if let ValueExpr::Nested(k) = v {
            if *k < r.len() {
                r[*k] = true;
            }
        }
    };
    for s in stmts {
        match s {
            UpdateStatement::Assign { value, .. } => mark(value, &mut referenced),
            UpdateStatement::Construct { args, .. } => args.iter().for_each(|(_, v)| mark(v, &mut referenced)),
            UpdateStatement::Query { .. } => {}
        }
    }
    let mut inlined = vec![false; stmts.len()];
    let mut lines = Vec::new();
    for (i, s) in stmts.iter().enumerate() {
        let anonymous = matches!(s, UpdateStatement::Construct { var: None, .. } | UpdateStatement::Query { var: None, .. });
        if anonymous && referenced[i] {
            continue;
        }
        let line = match s {
            UpdateStatement::Assign { var, field, value } => {
                format!("{var}.{field} = {}", print_value(value, stmts, &mut inlined))
            }
            UpdateStatement::Construct { var, ws, args } => {
                let body = format!("{ws}({})", print_args(args, stmts, &mut inlined));
                match var {
                    Some(v) => format!("{v} = {body}"),
                    None => body,
                }
            }
            UpdateStatement::Query { var, question } => {
                let body = format!("answer({})", quote(question, '"'));
                match var {
                    Some(v) => format!("{v} = {body}"),
                    None => body,
                }
            }
        };
        lines.push(line);
    }
    lines.join("\n")
}

/// Drop constructors of unknown worksheets; references to them become unresolvable.
pub fn bind(stmts: Vec<UpdateStatement>, spec: &TaskSpec) -> (Vec<UpdateStatement>, Vec<String>) {
    let mut errors = Vec::new();
    let mut keep = vec![true; stmts.len()];
    for (i, s) in stmts.iter().enumerate() {
        if let UpdateStatement::Construct { ws, .. } = s {
            if !spec.worksheet(ws).is_some_and(|w| w.kind == WorksheetKind::Task) {
                errors.push(format!("unknown constructor `{ws}`"));
                keep[i] = false;
            }
        }
    }
    let mut remap = vec![usize::MAX; stmts.len()];
    let mut n = 0;
    for (i, k) in keep.iter().enumerate() {
        if *k {
            remap[i] = n;
            n += 1;
        }
    }
    let fix = |v: ValueExpr| match v {
        ValueExpr::Nested(k) => ValueExpr::Nested(remap[k]),
        other => other,
    };
    let out = stmts
        .into_iter()
        .enumerate()
        .filter(|(i, _)| keep[*i])
        .map(|(_, s)| match s {
            UpdateStatement::Assign { var, field, value } => UpdateStatement::Assign { var, field, value: fix(value) },
            UpdateStatement::Construct { var, ws, args } => {
                UpdateStatement::Construct { var, ws, args: args.into_iter().map(|(k, v)| (k, fix(v))).collect() }
            }
            q => q,
        })
        .collect();
    (out, errors)
}

/// Rebuild instances from a prompt snapshot.
pub fn restore_snapshot(text: &str, spec: &TaskSpec) -> (DialogueState, ApplyReport, Vec<LineError>) {
    let report = parse_statements(text);
    let mut st = DialogueState::new();
    let ap = apply_updates(&mut st, spec, &report.statements, ApplyMode::Restore);
    (st, ap, report.errors)
}

// ---------------------------------------------------------------- prompts

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShot {
    pub instruction: String,
    pub state: String,
    pub acts: String,
    pub agent: String,
    pub user: String,
    pub target: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PromptBundle {
    pub system_text: String,
    pub user_text: String,
    pub few_shot_examples: Vec<FewShot>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Clock {
    pub date: NaiveDate,
}

impl Clock {
    pub fn day(&self) -> String {
        self.date.format("%A").to_string()
    }
}

pub fn default_few_shots() -> Vec<FewShot> {
    serde_json::from_str(include_str!("prompts/course_few_shots.json")).expect("bundled few-shots parse")
}

pub fn render_few_shot(f: &FewShot) -> String {
    format!(
        "Example: {}\nState:\n```\n{}\n```\nAgent Action:\n```\n{}\n```\n\nLast-turn Conversation:\nAgent: {}\nUser: {}\n\nUser Target:\n```\n{}\n```",
        f.instruction,
        f.state.trim_end_matches('\n'),
        f.acts,
        f.agent,
        f.user,
        f.target
    )
}

pub fn render_agent_actions(acts: &[DialogueAct]) -> String {
    let forms: Vec<String> = acts.iter().map(DialogueAct::prompt_form).collect();
    serde_json::to_string(&forms).expect("strings serialize")
}

pub fn build_prompt(spec: &TaskSpec, state: &DialogueState, acts: &[DialogueAct], clock: Clock, few_shots: &[FewShot]) -> PromptBundle {
    let examples: Vec<String> = few_shots.iter().map(render_few_shot).collect();
    let system_text = format!(
        "You are a semantic parser. Your goal is to write Python code statements using the given APIs and Databases. Plan your response\n\
first, then write the code.\n\
\n\
Today's date is {} and the day is {}.\n\
\n\
These are the APIs available to you:\n\
{}\n\
\n\
DO NOT ASSUME ANY FIELD. Always use the new information provided by the user.\n\
DO NOT create lists for creating multiple answer instances. Write them in separate lines.\n\
\n\
Here are some examples:\n\
{}\n",
        clock.date.format("%Y-%m-%d"),
        clock.day(),
        render_for_prompt(spec).trim_end(),
        examples.join("\n--\n")
    );
    let user_text = format!(
        "State:\n```\n{}\n```\nAgent Action:\n```\n{}\n```\n\nLast-turn Conversation:\nAgent: {}\nUser: {}\n\nUser Target:\n",
        snapshot_for_prompt(state),
        render_agent_actions(acts),
        state.last_agent_utterance,
        state.last_user_utterance
    );
    PromptBundle { system_text, user_text, few_shot_examples: few_shots.to_vec() }
}

// ---------------------------------------------------------------- backends

pub struct ParseRequest<'a> {
    /// 1-based index of the user turn being parsed.
    pub turn: u32,
    pub prompt: &'a PromptBundle,
}

pub trait ParserBackend: Send + Sync {
    fn complete(&self, req: &ParseRequest<'_>) -> Result<String, BackendError>;
}

#[derive(Debug, Clone, Default)]
pub struct ScriptedBackend {
    pub script: BTreeMap<u32, String>,
}

impl ScriptedBackend {
    pub fn new(script: BTreeMap<u32, String>) -> Self {
        ScriptedBackend { script }
    }
}

impl ParserBackend for ScriptedBackend {
    fn complete(&self, req: &ParseRequest<'_>) -> Result<String, BackendError> {
        self.script.get(&req.turn).cloned().ok_or(BackendError::ScriptExhausted(req.turn))
    }
}

pub struct LlmParser {
    pub client: LlmClient,
}

impl ParserBackend for LlmParser {
    fn complete(&self, req: &ParseRequest<'_>) -> Result<String, BackendError> {
        self.client.chat(&req.prompt.system_text, &req.prompt.user_text)
    }
}
