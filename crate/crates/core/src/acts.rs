//! Dialogue acts emitted by the policy and their canonical string forms.

use serde::{Deserialize, Serialize};

use crate::value::Value;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "act", rename_all = "snake_case")]
pub enum DialogueAct {
    Ask { var: String, field: String, description: String },
    Report { var: String, result: Value },
    Confirm { var: String, pairs: Vec<(String, Value)> },
    Say { text: String },
    Propose { ws: String, pairs: Vec<(String, Value)> },
}

/// Literal form shared by acts, state snapshots and the statement language.
pub fn repr(v: &Value) -> String {
    match v {
        Value::Str(s) => crate::lexer::quote(s, '\''),
        Value::Int(i) => i.to_string(),
        Value::Float(x) => crate::lexer::float_text(*x),
        Value::Bool(true) => "True".into(),
        Value::Bool(false) => "False".into(),
        Value::Date(d) => format!("date('{}')", d.format("%Y-%m-%d")),
        Value::Time(t) => format!("time('{}')", t.format("%H:%M:%S")),
        Value::List(items) => format!("[{}]", items.iter().map(repr).collect::<Vec<_>>().join(", ")),
        Value::Record(m) => {
            let parts: Vec<String> = m.iter().map(|(k, v)| format!("{}: {}", crate::lexer::quote(k, '\''), repr(v))).collect();
            format!("{{{}}}", parts.join(", "))
        }
        Value::Ref(var) => var.clone(),
    }
}

fn pairs_text(pairs: &[(String, Value)]) -> String {
    pairs.iter().map(|(k, v)| format!(", {k}={}", repr(v))).collect()
}

impl DialogueAct {
    /// Canonical string used for comparison against gold labels.
    pub fn canonical(&self) -> String {
        match self {
            DialogueAct::Ask { var, field, .. } => format!("AskField({var}, {field})"),
            DialogueAct::Report { var, .. } => format!("Report({var}, {var}.result)"),
            DialogueAct::Confirm { var, pairs } => format!("Confirm({var}{})", pairs_text(pairs)),
            DialogueAct::Say { text } => {
                format!("Say({})", serde_json::to_string(text).expect("string serializes"))
            }
            DialogueAct::Propose { ws, pairs } => format!("Propose({ws}{})", pairs_text(pairs)),
        }
    }

    /// Form shown to the parser in the Agent Action block.
    pub fn prompt_form(&self) -> String {
        match self {
            DialogueAct::Ask { var, field, description } => format!("AskField({var}, {field}, {description})"),
            other => other.canonical(),
        }
    }

    pub fn is_ask(&self) -> bool {
        matches!(self, DialogueAct::Ask { .. })
    }

    /// Emission rank: reports, says, proposals, confirmations, then the ask.
    pub fn rank(&self) -> u8 {
        match self {
            DialogueAct::Report { .. } => 0,
            DialogueAct::Say { .. } => 1,
            DialogueAct::Propose { .. } => 2,
            DialogueAct::Confirm { .. } => 3,
            DialogueAct::Ask { .. } => 4,
        }
    }
}

/// Split `Name(a, b, ...)` at top-level commas; `None` if `s` is not call-shaped.
fn split_call(s: &str) -> Option<(&str, Vec<String>)> {
    let s = s.trim();
    let open = s.find('(')?;
    if !s.ends_with(')') {
        return None;
    }
    let name = s[..open].trim();
    if name.is_empty() || !name.chars().all(|c| c.is_alphanumeric() || c == '_') {
        return None;
    }
    let body = &s[open + 1..s.len() - 1];
    let mut args = Vec::new();
    let mut depth = 0i32;
    let mut quote: Option<char> = None;
    let mut cur = String::new();
    let mut chars = body.chars().peekable();
    while let Some(c) = chars.next() {
        if let Some(q) = quote {
            cur.push(c);
            if c == '\\' {
                if let Some(n) = chars.next() {
                    cur.push(n);
                }
            } else if c == q {
                quote = None;
            }
            continue;
        }
        match c {
            '\'' | '"' => {
                quote = Some(c);
                cur.push(c);
            }
            '(' | '[' | '{' => {
                depth += 1;
                cur.push(c);
            }
            ')' | ']' | '}' => {
                depth -= 1;
                cur.push(c);
            }
            ',' if depth == 0 => {
                args.push(cur.trim().to_string());
                cur.clear();
            }
            _ => cur.push(c),
        }
    }
    args.push(cur.trim().to_string());
    if args.len() == 1 && args[0].is_empty() {
        args.clear();
    }
    Some((name, args))
}

/// Normalize an act string: trims arguments, drops trailing empty ones, and keeps only
/// `(var, field)` for `AskField`. Strings that are not call-shaped are only trimmed.
pub fn canonicalize_act_str(s: &str) -> String {
    let Some((name, mut args)) = split_call(s) else {
        return s.trim().to_string();
    };
    while args.last().is_some_and(|a| a.is_empty()) {
        args.pop();
    }
    if name == "AskField" {
        args.truncate(2);
    }
    format!("{name}({})", args.join(", "))
}
