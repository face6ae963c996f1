//! Turning dialogue acts into the agent's utterance.

use crate::acts::DialogueAct;
use crate::llm::LlmClient;
use crate::state::{snapshot_for_prompt, DialogueState};
use crate::value::Value;

pub trait ResponderBackend: Send + Sync {
    fn respond(&self, acts: &[DialogueAct], state: &DialogueState, user: &str) -> String;
}

fn lower_first(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_lowercase().chain(c).collect(),
        None => String::new(),
    }
}

fn row_label(v: &Value) -> String {
    match v {
        Value::Record(m) => match m.get("name").or_else(|| m.values().next()) {
            Some(x) => x.to_string(),
            None => String::new(),
        },
        other => other.to_string(),
    }
}

/// One act rendered on its own.
pub fn render_act(act: &DialogueAct) -> String {
    match act {
        DialogueAct::Ask { field, description, .. } => {
            let (desc, options) = match description.split_once("Options are: ") {
                Some((d, o)) => (d.trim(), Some(o.trim())),
                None => (description.trim(), None),
            };
            let what = if desc.is_empty() { field.replace('_', " ") } else { lower_first(desc.trim_end_matches('.')) };
            match options {
                Some(o) => format!("What is {what}? Options are: {o}."),
                None => format!("What is {what}?"),
            }
        }
        DialogueAct::Confirm { pairs, .. } => {
            let mut s = String::from("Please confirm the following details:");
            for (k, v) in pairs {
                s.push_str(&format!("\n- {}: {}", k.replace('_', " "), v));
            }
            s.push_str("\nCan you confirm these details?");
            s
        }
        DialogueAct::Report { result, .. } => match result {
            Value::List(rows) if rows.is_empty() => "I couldn't find any results.".into(),
            Value::List(rows) => {
                let mut s = format!("I found {} result{}:", rows.len(), if rows.len() == 1 { "" } else { "s" });
                for (i, r) in rows.iter().enumerate() {
                    s.push_str(&format!("\n{}. {}", i + 1, row_label(r)));
                }
                s
            }
            other => format!("Here is the result: {other}."),
        },
        DialogueAct::Say { text } => text.clone(),
        DialogueAct::Propose { ws, pairs } => {
            let detail: Vec<String> = pairs.iter().map(|(k, v)| format!("{}: {v}", k.replace('_', " "))).collect();
            if detail.is_empty() {
                format!("Would you like to start {ws}?")
            } else {
                format!("Would you like to start {ws} with {}?", detail.join(", "))
            }
        }
    }
}

/// Per-act templates joined by blank lines, in act order.
pub fn render_template(acts: &[DialogueAct]) -> String {
    acts.iter().map(render_act).collect::<Vec<_>>().join("\n\n")
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TemplateResponder;

impl ResponderBackend for TemplateResponder {
    fn respond(&self, acts: &[DialogueAct], _state: &DialogueState, _user: &str) -> String {
        render_template(acts)
    }
}

pub struct LlmResponder {
    pub client: LlmClient,
}

pub const RESPONDER_SYSTEM: &str = "You are a helpful assistant. Write the agent's next reply to the user. \
Realize every dialogue act listed under Agent Acts, in order, and do not add requests that are not in the acts.";

pub fn responder_user_prompt(acts: &[DialogueAct], state: &DialogueState, user: &str) -> String {
    let forms: Vec<String> = acts.iter().map(DialogueAct::canonical).collect();
    format!(
        "State:\n```\n{}\n```\nAgent Acts:\n{}\n\nUser: {}\nAgent:",
        snapshot_for_prompt(state),
        serde_json::to_string(&forms).expect("strings serialize"),
        user
    )
}

impl ResponderBackend for LlmResponder {
    fn respond(&self, acts: &[DialogueAct], state: &DialogueState, user: &str) -> String {
        if acts.is_empty() {
            return String::new();
        }
        match self.client.chat(RESPONDER_SYSTEM, &responder_user_prompt(acts, state, user)) {
            Ok(text) => text.trim().to_string(),
            Err(_) => render_template(acts),
        }
    }
}
