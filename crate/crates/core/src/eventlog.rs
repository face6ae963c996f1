//! Append-only JSONL session log. State deltas in the log rebuild the dialogue state.

use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};

use crate::acts::DialogueAct;
use crate::policy::ExecutionRecord;
use crate::semparse::LineError;
use crate::state::{DialogueState, SlotValue, WorksheetInstance};
use crate::value::Value;

/// Changes to the state made by one step: created or modified instances plus the scalars.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct StateDelta {
    pub upserts: Vec<WorksheetInstance>,
    pub turn_index: u32,
    pub last_agent_utterance: String,
    pub last_user_utterance: String,
    pub pending_acts: Vec<DialogueAct>,
    pub exec_counter: u64,
}

pub fn compute_delta(before: &DialogueState, after: &DialogueState) -> StateDelta {
    let upserts = after
        .instances
        .iter()
        .filter(|i| before.instance(&i.var) != Some(*i))
        .cloned()
        .collect();
    StateDelta {
        upserts,
        turn_index: after.turn_index,
        last_agent_utterance: after.last_agent_utterance.clone(),
        last_user_utterance: after.last_user_utterance.clone(),
        pending_acts: after.pending_acts.clone(),
        exec_counter: after.exec_counter,
    }
}

pub fn apply_delta(state: &mut DialogueState, d: &StateDelta) {
    for inst in &d.upserts {
        match state.index_of(&inst.var) {
            Some(i) => state.instances[i] = inst.clone(),
            None => state.instances.push(inst.clone()),
        }
    }
    state.turn_index = d.turn_index;
    state.last_agent_utterance = d.last_agent_utterance.clone();
    state.last_user_utterance = d.last_user_utterance.clone();
    state.pending_acts = d.pending_acts.clone();
    state.exec_counter = d.exec_counter;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Event {
    SessionStarted { spec: String, greeting: Option<String> },
    UserTurn { turn: u32, utterance: String },
    Parsed { raw: String, statements: String, errors: Vec<LineError>, rejections: Vec<String> },
    Execution { record: ExecutionRecord },
    Act { canonical: String, act: DialogueAct },
    Reply { text: String },
    BackendError { message: String },
    StateDelta { delta: StateDelta },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogLine {
    pub seq: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ts: Option<String>,
    #[serde(flatten)]
    pub event: Event,
}

pub struct EventWriter<W: Write> {
    out: W,
    seq: u64,
}

impl<W: Write> EventWriter<W> {
    pub fn new(out: W) -> Self {
        EventWriter { out, seq: 0 }
    }

    /// Continue numbering after `seq` existing lines.
    pub fn resume(out: W, seq: u64) -> Self {
        EventWriter { out, seq }
    }

    pub fn append(&mut self, event: Event, ts: Option<String>) -> std::io::Result<()> {
        let line = LogLine { seq: self.seq, ts, event };
        self.seq += 1;
        let text = serde_json::to_string(&line).map_err(std::io::Error::other)?;
        writeln!(self.out, "{text}")?;
        self.out.flush()
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

/// Read a log. A torn final line (crash during a write) is dropped; corruption elsewhere is an error.
pub fn read_log<R: BufRead>(r: R) -> std::io::Result<Vec<LogLine>> {
    let lines: Vec<String> = r.lines().collect::<Result<_, _>>()?;
    let mut out = Vec::new();
    let n = lines.len();
    for (i, l) in lines.iter().enumerate() {
        if l.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(l) {
            Ok(x) => out.push(x),
            Err(_) if i + 1 == n => break,
            Err(e) => return Err(std::io::Error::new(std::io::ErrorKind::InvalidData, format!("line {}: {e}", i + 1))),
        }
    }
    Ok(out)
}

/// Read a log file and cut a torn final line off the file so appends can resume after it.
pub fn recover_log(path: &std::path::Path) -> std::io::Result<Vec<LogLine>> {
    let bytes = std::fs::read(path)?;
    let text = String::from_utf8_lossy(&bytes);
    let mut good_end = 0;
    let mut out = Vec::new();
    let mut pos = 0;
    let pieces: Vec<&str> = text.split_inclusive('\n').collect();
    for (i, piece) in pieces.iter().enumerate() {
        pos += piece.len();
        let l = piece.trim();
        if l.is_empty() {
            good_end = pos;
            continue;
        }
        match serde_json::from_str(l) {
            Ok(x) if piece.ends_with('\n') => {
                out.push(x);
                good_end = pos;
            }
            Ok(_) | Err(_) if i + 1 == pieces.len() => break,
            Err(e) => return Err(std::io::Error::new(std::io::ErrorKind::InvalidData, format!("line {}: {e}", i + 1))),
            Ok(_) => unreachable!("only the last piece lacks a newline"),
        }
    }
    if good_end < bytes.len() {
        std::fs::OpenOptions::new().write(true).open(path)?.set_len(good_end as u64)?;
    }
    Ok(out)
}

pub fn replay(lines: &[LogLine]) -> DialogueState {
    let mut st = DialogueState::new();
    for l in lines {
        if let Event::StateDelta { delta } = &l.event {
            apply_delta(&mut st, delta);
        }
    }
    st
}

// ---------------------------------------------------------------- redaction

const MASK: &str = "[REDACTED]";

fn mask_text(text: &str, secrets: &[String]) -> String {
    let mut out = text.to_string();
    for s in secrets.iter().filter(|s| s.len() >= 2) {
        out = out.replace(s.as_str(), MASK);
    }
    out
}

fn mask_value(v: &mut Value, fields: &[String], secrets: &mut Vec<String>) {
    match v {
        Value::Record(m) => {
            for (k, x) in m.iter_mut() {
                if fields.contains(k) {
                    secrets.push(x.to_string());
                    *x = Value::str(MASK);
                } else {
                    mask_value(x, fields, secrets);
                }
            }
        }
        Value::List(xs) => xs.iter_mut().for_each(|x| mask_value(x, fields, secrets)),
        _ => {}
    }
}

fn mask_pairs(pairs: &mut [(String, Value)], fields: &[String], secrets: &mut Vec<String>) {
    for (k, v) in pairs.iter_mut() {
        if fields.contains(k) {
            secrets.push(v.to_string());
            *v = Value::str(MASK);
        } else {
            mask_value(v, fields, secrets);
        }
    }
}

fn mask_act(a: &mut DialogueAct, fields: &[String], secrets: &mut Vec<String>) {
    match a {
        DialogueAct::Confirm { pairs, .. } | DialogueAct::Propose { pairs, .. } => mask_pairs(pairs, fields, secrets),
        DialogueAct::Report { result, .. } => mask_value(result, fields, secrets),
        _ => {}
    }
}

fn scrub_say(a: &mut DialogueAct, secrets: &[String]) {
    if let DialogueAct::Say { text } = a {
        *text = mask_text(text, secrets);
    }
}

/// Values of the named fields anywhere in the state; used to scrub free text.
pub fn secrets_in(state: &DialogueState, fields: &[String]) -> Vec<String> {
    let mut out = Vec::new();
    for inst in &state.instances {
        for (k, s) in &inst.slots {
            if let SlotValue::Filled(v) = &s.value {
                if fields.contains(k) {
                    out.push(v.to_string());
                } else {
                    let mut v = v.clone();
                    mask_value(&mut v, fields, &mut out);
                }
            }
        }
    }
    out
}

/// Remove the configured fields' values from an event. `known` holds values already known to be
/// sensitive (e.g. from the current state) so free text can be scrubbed too.
pub fn redact(event: &Event, fields: &[String], known: &[String]) -> Event {
    if fields.is_empty() {
        return event.clone();
    }
    let mut secrets: Vec<String> = known.to_vec();
    let mut e = event.clone();
    match &mut e {
        Event::Execution { record } => {
            for (k, v) in record.args.iter_mut() {
                if fields.contains(k) {
                    secrets.push(v.to_string());
                    *v = Value::str(MASK);
                }
            }
            if let Some(r) = &mut record.result {
                mask_value(r, fields, &mut secrets);
            }
        }
        Event::Act { canonical, act } => {
            mask_act(act, fields, &mut secrets);
            scrub_say(act, &secrets);
            *canonical = act.canonical();
        }
        Event::StateDelta { delta } => {
            for inst in &mut delta.upserts {
                for (k, s) in inst.slots.iter_mut() {
                    if let SlotValue::Filled(v) = &mut s.value {
                        if fields.contains(k) {
                            *v = Value::str(MASK);
                        } else {
                            mask_value(v, fields, &mut secrets);
                        }
                    }
                }
                if let SlotValue::Filled(v) = &mut inst.result {
                    mask_value(v, fields, &mut secrets);
                }
            }
            for a in &mut delta.pending_acts {
                mask_act(a, fields, &mut secrets);
            }
            for a in &mut delta.pending_acts {
                scrub_say(a, &secrets);
            }
            delta.last_user_utterance = mask_text(&delta.last_user_utterance, &secrets);
            delta.last_agent_utterance = mask_text(&delta.last_agent_utterance, &secrets);
        }
        _ => {}
    }
    match &mut e {
        Event::UserTurn { utterance, .. } => *utterance = mask_text(utterance, &secrets),
        Event::Parsed { raw, statements, .. } => {
            *raw = mask_text(raw, &secrets);
            *statements = mask_text(statements, &secrets);
        }
        Event::Reply { text } => *text = mask_text(text, &secrets),
        _ => {}
    }
    e
}
