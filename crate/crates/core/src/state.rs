//! Dialogue state: worksheet instances, slot status, and application of parser updates.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::acts::{repr, DialogueAct};
use crate::exprlang::{ExprError, Scope, Slot};
use crate::spec::{FieldSpec, FieldType, TaskSpec, WorksheetKind, KB_FIELDS};
use crate::value::{parse_date, parse_time, Value};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "state", content = "value", rename_all = "snake_case")]
pub enum SlotValue {
    #[default]
    Empty,
    Refused,
    Filled(Value),
}

impl SlotValue {
    pub fn filled(&self) -> Option<&Value> {
        match self {
            SlotValue::Filled(v) => Some(v),
            _ => None,
        }
    }

    pub fn is_empty(&self) -> bool {
        matches!(self, SlotValue::Empty)
    }

    pub fn to_slot(&self) -> Slot {
        match self {
            SlotValue::Empty => Slot::Empty,
            SlotValue::Refused => Slot::Refused,
            SlotValue::Filled(v) => Slot::Value(v.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Confirmation {
    #[default]
    NotNeeded,
    Pending,
    Granted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    #[default]
    User,
    Computed,
    Composed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct FieldSlot {
    pub value: SlotValue,
    pub newly_filled: bool,
    pub confirmed: Confirmation,
    pub action_done: bool,
    pub provenance: Provenance,
    /// Instance whose result was composed into this slot.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorksheetInstance {
    pub var: String,
    /// Worksheet name; for an unbound knowledge query this is `answer`.
    pub worksheet: String,
    pub kind: WorksheetKind,
    pub slots: IndexMap<String, FieldSlot>,
    pub result: SlotValue,
    pub completed: bool,
    pub created_turn: u32,
}

impl WorksheetInstance {
    pub fn slot(&self, field: &str) -> Option<&FieldSlot> {
        self.slots.get(field)
    }

    pub fn value(&self, field: &str) -> Option<&Value> {
        self.slots.get(field).and_then(|s| s.value.filled())
    }

    pub fn has_pending(&self) -> bool {
        self.slots.values().any(|s| s.confirmed == Confirmation::Pending)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct DialogueState {
    pub instances: Vec<WorksheetInstance>,
    pub turn_index: u32,
    pub last_agent_utterance: String,
    pub last_user_utterance: String,
    pub pending_acts: Vec<DialogueAct>,
    /// Monotone counter of api executions; seeds stub results.
    pub exec_counter: u64,
}

impl DialogueState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn instance(&self, var: &str) -> Option<&WorksheetInstance> {
        self.instances.iter().find(|i| i.var == var)
    }

    pub fn instance_mut(&mut self, var: &str) -> Option<&mut WorksheetInstance> {
        self.instances.iter_mut().find(|i| i.var == var)
    }

    pub fn index_of(&self, var: &str) -> Option<usize> {
        self.instances.iter().position(|i| i.var == var)
    }

    /// `base`, else `base_1`, `base_2`, ... whichever is first unused.
    pub fn fresh_var(&self, base: &str) -> String {
        if self.instance(base).is_none() {
            return base.to_string();
        }
        (1..).map(|n| format!("{base}_{n}")).find(|v| self.instance(v).is_none()).expect("unbounded")
    }

    /// Instance that embeds `var` through a reference or a composed slot.
    pub fn parent_of(&self, var: &str) -> Option<&WorksheetInstance> {
        self.instances.iter().find(|i| {
            i.var != var
                && i.slots.values().any(|s| {
                    s.value.filled().and_then(Value::as_ref_var) == Some(var) || s.source.as_deref() == Some(var)
                })
        })
    }

    /// Create a task instance with all slots empty.
    pub fn create_task(&mut self, spec: &TaskSpec, ws: &str, var: Option<&str>) -> String {
        let w = spec.worksheet(ws).expect("caller checked worksheet exists");
        let var = match var {
            Some(v) if self.instance(v).is_none() => v.to_string(),
            _ => self.fresh_var(&lower_snake(ws)),
        };
        let slots = w.fields.iter().map(|f| (f.name.clone(), FieldSlot::default())).collect();
        self.instances.push(WorksheetInstance {
            var: var.clone(),
            worksheet: ws.to_string(),
            kind: WorksheetKind::Task,
            slots,
            result: SlotValue::Empty,
            completed: false,
            created_turn: self.turn_index,
        });
        var
    }

    /// Create a knowledge-query instance with its question filled.
    pub fn create_query(&mut self, question: &str, var: Option<&str>) -> String {
        let var = match var {
            Some(v) if self.instance(v).is_none() => v.to_string(),
            _ => self.fresh_var("answer"),
        };
        let mut slots: IndexMap<String, FieldSlot> = KB_FIELDS.iter().map(|f| (f.to_string(), FieldSlot::default())).collect();
        let q = slots.get_mut("nl_query").expect("kb field");
        q.value = SlotValue::Filled(Value::str(question));
        q.newly_filled = true;
        self.instances.push(WorksheetInstance {
            var: var.clone(),
            worksheet: "answer".into(),
            kind: WorksheetKind::Kb,
            slots,
            result: SlotValue::Empty,
            completed: false,
            created_turn: self.turn_index,
        });
        var
    }
}

pub fn lower_snake(name: &str) -> String {
    let mut out = String::new();
    let chars: Vec<char> = name.chars().collect();
    for (i, &c) in chars.iter().enumerate() {
        if c.is_uppercase() {
            let prev_lower = i > 0 && (chars[i - 1].is_lowercase() || chars[i - 1].is_ascii_digit());
            let next_lower = chars.get(i + 1).is_some_and(|n| n.is_lowercase());
            let prev_upper = i > 0 && chars[i - 1].is_uppercase();
            if i > 0 && (prev_lower || (prev_upper && next_lower)) && !out.ends_with('_') {
                out.push('_');
            }
            out.extend(c.to_lowercase());
        } else {
            out.push(c);
        }
    }
    out
}

// ---------------------------------------------------------------- update statements

#[derive(Debug, Clone, PartialEq)]
pub enum ValueExpr {
    Lit(Value),
    /// `None`: clears the slot.
    Null,
    /// Bare identifier: a reference to an instance variable.
    Var(String),
    /// Reference to the instance created by the flattened statement at this index.
    Nested(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub enum UpdateStatement {
    Assign { var: String, field: String, value: ValueExpr },
    Construct { var: Option<String>, ws: String, args: Vec<(String, ValueExpr)> },
    Query { var: Option<String>, question: String },
}

#[derive(Debug, Clone, PartialEq, thiserror::Error, Serialize, Deserialize)]
pub enum StateError {
    #[error("type error on {var}.{field}: {message}")]
    TypeError { var: String, field: String, message: String },
    #[error("unknown variable `{0}`")]
    UnknownVar(String),
    #[error("unknown field `{var}.{field}`")]
    UnknownField { var: String, field: String },
    #[error("unknown worksheet `{0}`")]
    UnknownWorksheet(String),
    #[error("`{0}` is a knowledge query; its fields are set by the engine")]
    KbAssignment(String),
    #[error("`{0}` is already completed")]
    Completed(String),
    #[error("`{0}.result` is set by the engine")]
    ResultAssignment(String),
    #[error("`{var}` is already a {existing}")]
    VarConflict { var: String, existing: String },
    #[error("dangling reference to `{0}`")]
    DanglingReference(String),
    #[error("nested statement {0} was rejected")]
    NestedRejected(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Applied {
    pub var: String,
    pub field: String,
    pub value: SlotValue,
    pub changed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ApplyReport {
    pub applied: Vec<Applied>,
    /// (var, worksheet) for every instance created by a constructor.
    pub created: Vec<(String, String)>,
    /// (var, question) for every knowledge query.
    pub queries: Vec<(String, String)>,
    pub granted: Vec<String>,
    pub rejections: Vec<(usize, StateError)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ApplyMode {
    Live,
    /// Snapshot restore: results may be assigned and no turn is counted.
    Restore,
}

pub fn coerce(v: Value, ty: &FieldType, state: &DialogueState, spec: &TaskSpec) -> Result<Value, String> {
    let bad = |v: &Value| Err(format!("{} value `{}` does not fit {ty}", v.type_name(), v));
    match ty {
        FieldType::Str => match v {
            Value::Str(_) => Ok(v),
            Value::Int(_) | Value::Float(_) | Value::Bool(_) | Value::Date(_) | Value::Time(_) => Ok(Value::Str(v.to_string())),
            other => bad(&other),
        },
        FieldType::Int => match v {
            Value::Int(_) => Ok(v),
            Value::Float(x) if x.fract() == 0.0 && x.abs() < 9e15 => Ok(Value::Int(x as i64)),
            Value::Str(ref s) => s.trim().parse::<i64>().map(Value::Int).or_else(|_| bad(&v)),
            other => bad(&other),
        },
        FieldType::Float => match v {
            Value::Float(_) => Ok(v),
            Value::Int(i) => Ok(Value::Float(i as f64)),
            Value::Str(ref s) => s.trim().parse::<f64>().map(Value::Float).or_else(|_| bad(&v)),
            other => bad(&other),
        },
        FieldType::Bool => match v {
            Value::Bool(_) => Ok(v),
            Value::Str(ref s) => match s.trim().to_lowercase().as_str() {
                "true" | "yes" => Ok(Value::Bool(true)),
                "false" | "no" => Ok(Value::Bool(false)),
                _ => bad(&v),
            },
            other => bad(&other),
        },
        FieldType::Date => match v {
            Value::Date(_) => Ok(v),
            Value::Str(ref s) => parse_date(s).map(Value::Date).map_or_else(|| bad(&v), Ok),
            other => bad(&other),
        },
        FieldType::Time => match v {
            Value::Time(_) => Ok(v),
            Value::Str(ref s) => parse_time(s).map(Value::Time).map_or_else(|| bad(&v), Ok),
            other => bad(&other),
        },
        FieldType::Enum(d) => {
            let domain = spec.enum_domains.get(d).map(Vec::as_slice).unwrap_or(&[]);
            match &v {
                Value::Str(s) | Value::Ref(s) => domain
                    .iter()
                    .find(|opt| opt.eq_ignore_ascii_case(s.trim()))
                    .map(|opt| Value::Str(opt.clone()))
                    .ok_or_else(|| format!("`{s}` is not one of: {}", domain.join(", "))),
                other => bad(other),
            }
        }
        FieldType::Ws(name) => match v {
            Value::Ref(ref var) => match state.instance(var) {
                Some(i) if i.kind == WorksheetKind::Task && &i.worksheet == name => Ok(v),
                Some(i) => Err(format!("`{var}` is a {}, expected {name}", i.worksheet)),
                None => Err(format!("unknown variable `{var}`")),
            },
            Value::Record(_) => Ok(v),
            other => bad(&other),
        },
        FieldType::Kb(_) => match v {
            Value::Ref(ref var) => match state.instance(var) {
                Some(i) if i.kind == WorksheetKind::Kb => Ok(v),
                Some(i) => Err(format!("`{var}` is a {}, expected a knowledge query", i.worksheet)),
                None => Err(format!("unknown variable `{var}`")),
            },
            Value::Str(_) | Value::Record(_) | Value::List(_) => Ok(v),
            other => bad(&other),
        },
    }
}

/// Set a slot value with the confirmation bookkeeping. Returns whether anything changed.
pub fn set_slot(inst: &mut WorksheetInstance, field: &FieldSpec, value: SlotValue, provenance: Provenance, source: Option<String>) -> bool {
    let slot = inst.slots.entry(field.name.clone()).or_default();
    if slot.value == value {
        return false;
    }
    let is_value = matches!(&value, SlotValue::Filled(v) if !matches!(v, Value::Ref(_)));
    slot.newly_filled = !value.is_empty();
    slot.action_done = false;
    slot.provenance = provenance;
    slot.source = source;
    slot.confirmed = if field.confirm && is_value { Confirmation::Pending } else { Confirmation::NotNeeded };
    let reopened = slot.confirmed == Confirmation::Pending;
    slot.value = value;
    if reopened && field.name != "confirm" {
        if let Some(flag) = inst.slots.get_mut("confirm") {
            if flag.value != SlotValue::Empty {
                flag.value = SlotValue::Empty;
                flag.newly_filled = false;
                flag.action_done = false;
            }
        }
    }
    true
}

fn grant_all(inst: &mut WorksheetInstance) -> bool {
    let mut any = false;
    for s in inst.slots.values_mut() {
        if s.confirmed == Confirmation::Pending {
            s.confirmed = Confirmation::Granted;
            any = true;
        }
    }
    any
}

struct Applier<'a> {
    state: &'a mut DialogueState,
    spec: &'a TaskSpec,
    mode: ApplyMode,
    nested: Vec<Option<String>>,
    report: ApplyReport,
}

impl Applier<'_> {
    fn resolve(&self, e: &ValueExpr) -> Result<SlotValue, StateError> {
        Ok(match e {
            ValueExpr::Null => SlotValue::Empty,
            ValueExpr::Lit(Value::Str(s)) if s == "NA" => SlotValue::Refused,
            ValueExpr::Lit(v) => SlotValue::Filled(v.clone()),
            ValueExpr::Var(v) => {
                if self.state.instance(v).is_none() {
                    return Err(StateError::UnknownVar(v.clone()));
                }
                SlotValue::Filled(Value::Ref(v.clone()))
            }
            ValueExpr::Nested(k) => match self.nested.get(*k).cloned().flatten() {
                Some(var) => SlotValue::Filled(Value::Ref(var)),
                None => return Err(StateError::NestedRejected(*k)),
            },
        })
    }

    fn assign(&mut self, var: &str, field: &str, value: &ValueExpr) -> Result<(), StateError> {
        let spec = self.spec;
        let Some(idx) = self.state.index_of(var) else {
            return Err(StateError::UnknownVar(var.to_string()));
        };
        let resolved = self.resolve(value)?;
        let kind = self.state.instances[idx].kind;

        if field == "result" {
            if self.mode == ApplyMode::Live {
                return Err(StateError::ResultAssignment(var.to_string()));
            }
            let inst = &mut self.state.instances[idx];
            if kind == WorksheetKind::Kb {
                if let Some(s) = inst.slots.get_mut("kb_result") {
                    s.value = resolved.clone();
                }
            }
            inst.completed = !resolved.is_empty();
            inst.result = resolved;
            return Ok(());
        }
        if kind == WorksheetKind::Kb {
            if self.mode == ApplyMode::Restore && KB_FIELDS.contains(&field) {
                let inst = &mut self.state.instances[idx];
                inst.slots.get_mut(field).expect("kb field").value = resolved;
                return Ok(());
            }
            return Err(StateError::KbAssignment(var.to_string()));
        }
        let inst_ws = self.state.instances[idx].worksheet.clone();
        let w = spec.worksheet(&inst_ws).expect("instance worksheet exists");
        let declared = w.field(field);
        if self.state.instances[idx].completed && self.mode == ApplyMode::Live {
            return Err(StateError::Completed(var.to_string()));
        }

        // Grant signal: the reserved `confirm` pseudo-field or a declared bool `confirm`.
        if field == "confirm" && declared.is_none_or(|f| f.is_confirm_flag()) {
            let granted = match &resolved {
                SlotValue::Filled(v) => coerce(v.clone(), &FieldType::Bool, self.state, spec)
                    .map_err(|message| StateError::TypeError { var: var.into(), field: field.into(), message })?
                    == Value::Bool(true),
                _ => false,
            };
            let inst = &mut self.state.instances[idx];
            if let Some(f) = declared {
                let changed = set_slot(inst, f, resolved.clone(), Provenance::User, None);
                self.report.applied.push(Applied { var: var.into(), field: field.into(), value: resolved, changed });
            } else {
                self.report.applied.push(Applied { var: var.into(), field: field.into(), value: resolved, changed: false });
            }
            if granted && grant_all(inst) {
                self.report.granted.push(var.to_string());
            }
            return Ok(());
        }

        let Some(f) = declared else {
            return Err(StateError::UnknownField { var: var.into(), field: field.into() });
        };
        let value = match resolved {
            SlotValue::Filled(v) => SlotValue::Filled(
                coerce(v, &f.field_type, self.state, spec)
                    .map_err(|message| StateError::TypeError { var: var.into(), field: field.into(), message })?,
            ),
            other => other,
        };
        let inst = &mut self.state.instances[idx];
        let changed = set_slot(inst, f, value.clone(), Provenance::User, None);
        self.report.applied.push(Applied { var: var.into(), field: field.into(), value, changed });
        Ok(())
    }

    fn statement(&mut self, i: usize, stmt: &UpdateStatement) {
        match stmt {
            UpdateStatement::Query { var, question } => {
                let v = self.state.create_query(question, var.as_deref());
                self.report.queries.push((v.clone(), question.clone()));
                self.nested[i] = Some(v);
            }
            UpdateStatement::Construct { var, ws, args } => {
                let is_task = self.spec.worksheet(ws).is_some_and(|w| w.kind == WorksheetKind::Task);
                if !is_task {
                    self.report.rejections.push((i, StateError::UnknownWorksheet(ws.clone())));
                    return;
                }
                let target = match var.as_deref().and_then(|v| self.state.instance(v)) {
                    Some(existing) if existing.worksheet == *ws && existing.kind == WorksheetKind::Task => existing.var.clone(),
                    Some(existing) => {
                        let err = StateError::VarConflict { var: existing.var.clone(), existing: existing.worksheet.clone() };
                        self.report.rejections.push((i, err));
                        return;
                    }
                    None => {
                        let v = self.state.create_task(self.spec, ws, var.as_deref());
                        self.report.created.push((v.clone(), ws.clone()));
                        v
                    }
                };
                self.nested[i] = Some(target.clone());
                for (field, value) in args {
                    if let Err(e) = self.assign(&target, field, value) {
                        self.report.rejections.push((i, e));
                    }
                }
            }
            UpdateStatement::Assign { var, field, value } => {
                if let Err(e) = self.assign(var, field, value) {
                    self.report.rejections.push((i, e));
                }
            }
        }
    }
}

/// Apply parser statements in order. Rejected statements are recorded and skipped.
pub fn apply_updates(state: &mut DialogueState, spec: &TaskSpec, stmts: &[UpdateStatement], mode: ApplyMode) -> ApplyReport {
    if mode == ApplyMode::Live {
        state.turn_index += 1;
        for inst in &mut state.instances {
            for s in inst.slots.values_mut() {
                s.newly_filled = false;
            }
        }
    }
    let mut ap = Applier { state, spec, mode, nested: vec![None; stmts.len()], report: ApplyReport::default() };
    for (i, s) in stmts.iter().enumerate() {
        ap.statement(i, s);
    }
    ap.report
}

// ---------------------------------------------------------------- scope for predicates

/// Evaluation scope for one worksheet instance. `var` is `None` when evaluating a worksheet
/// predicate before the instance exists; names then resolve against `parent` and its ancestors.
pub struct InstanceScope<'a> {
    pub state: &'a DialogueState,
    pub spec: &'a TaskSpec,
    pub ws: &'a str,
    pub var: Option<&'a str>,
    pub parent: Option<&'a str>,
}

impl<'a> InstanceScope<'a> {
    pub fn of(state: &'a DialogueState, spec: &'a TaskSpec, inst: &'a WorksheetInstance) -> Self {
        InstanceScope { state, spec, ws: &inst.worksheet, var: Some(&inst.var), parent: None }
    }

    fn follow(&self, mut cur: SlotValue, rest: &[String]) -> Slot {
        for seg in rest {
            cur = match cur {
                SlotValue::Filled(Value::Ref(v)) => match self.state.instance(&v) {
                    Some(i) if seg == "result" => i.result.clone(),
                    Some(i) => i.slots.get(seg).map(|s| s.value.clone()).unwrap_or_default(),
                    None => SlotValue::Empty,
                },
                SlotValue::Filled(Value::Record(m)) => {
                    m.get(seg).cloned().map(SlotValue::Filled).unwrap_or_default()
                }
                _ => SlotValue::Empty,
            };
        }
        cur.to_slot()
    }
}

impl Scope for InstanceScope<'_> {
    fn resolve(&self, path: &[String]) -> Result<Slot, ExprError> {
        let first = &path[0];
        let own_spec = self.spec.worksheet(self.ws);
        // The enclosing instance, then its ancestors.
        let mut cur_var: Option<String> = self.var.map(str::to_string);
        if cur_var.is_none() && own_spec.is_some_and(|w| w.field(first).is_some()) {
            return Ok(self.follow(SlotValue::Empty, &path[1..]));
        }
        let mut next_parent: Option<String> = self.parent.map(str::to_string);
        let mut guard = 0;
        loop {
            let var = match cur_var.take() {
                Some(v) => v,
                None => match next_parent.take() {
                    Some(p) => p,
                    None => break,
                },
            };
            let Some(inst) = self.state.instance(&var) else { break };
            if first == "result" && self.var == Some(var.as_str()) {
                return Ok(self.follow(inst.result.clone(), &path[1..]));
            }
            if let Some(slot) = inst.slots.get(first) {
                return Ok(self.follow(slot.value.clone(), &path[1..]));
            }
            next_parent = self.state.parent_of(&var).map(|p| p.var.clone());
            guard += 1;
            if guard > self.state.instances.len() + 1 {
                break;
            }
        }
        if self.state.instance(first).is_some() {
            return Ok(self.follow(SlotValue::Filled(Value::Ref(first.clone())), &path[1..]));
        }
        // Declared but not instantiated anywhere in the chain: treat as unfilled.
        if self.spec.worksheets.iter().any(|w| w.field(first).is_some()) {
            return Ok(Slot::Empty);
        }
        Err(ExprError::UnknownReference(path.join(".")))
    }
}

// ---------------------------------------------------------------- composition

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Composition {
    pub target: String,
    pub field: String,
    pub source: String,
}

/// Instance vars ordered so that referenced instances precede the ones referencing them.
pub fn topo_order(state: &DialogueState) -> Vec<String> {
    fn visit(state: &DialogueState, var: &str, seen: &mut Vec<String>, out: &mut Vec<String>) {
        if seen.iter().any(|s| s == var) {
            return;
        }
        seen.push(var.to_string());
        if let Some(inst) = state.instance(var) {
            for s in inst.slots.values() {
                if let Some(Value::Ref(child)) = s.value.filled() {
                    visit(state, child, seen, out);
                }
            }
        }
        if state.instance(var).is_some() {
            out.push(var.to_string());
        }
    }
    let mut seen = Vec::new();
    let mut out = Vec::new();
    for inst in &state.instances {
        visit(state, &inst.var, &mut seen, &mut out);
    }
    out
}

/// Every ws/kb-typed slot holding a reference whose source has a result.
pub fn resolve_composition(state: &DialogueState, spec: &TaskSpec) -> Result<Vec<Composition>, StateError> {
    let mut out = Vec::new();
    for var in topo_order(state) {
        let inst = state.instance(&var).expect("topo order lists existing vars");
        if inst.kind != WorksheetKind::Task {
            continue;
        }
        let Some(w) = spec.worksheet(&inst.worksheet) else { continue };
        for f in &w.fields {
            if !f.field_type.is_composite() {
                continue;
            }
            if let Some(Value::Ref(src)) = inst.value(&f.name) {
                let Some(source) = state.instance(src) else {
                    return Err(StateError::DanglingReference(src.clone()));
                };
                if !source.result.is_empty() {
                    out.push(Composition { target: var.clone(), field: f.name.clone(), source: src.clone() });
                }
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------- prompt snapshot

fn slot_repr(v: &SlotValue) -> Option<String> {
    match v {
        SlotValue::Empty => None,
        SlotValue::Refused => Some("'NA'".into()),
        SlotValue::Filled(v) => Some(repr(v)),
    }
}

/// Constructor-style rendering of all instances; referenced instances come first.
pub fn snapshot_for_prompt(state: &DialogueState) -> String {
    let mut lines = Vec::new();
    for var in topo_order(state) {
        let inst = state.instance(&var).expect("listed");
        match inst.kind {
            WorksheetKind::Kb => {
                let q = inst.value("nl_query").map(|v| v.to_string()).unwrap_or_default();
                lines.push(format!("{var} = answer({})", crate::lexer::quote(&q, '"')));
            }
            WorksheetKind::Task => {
                let args: Vec<String> = inst
                    .slots
                    .iter()
                    .filter_map(|(k, s)| slot_repr(&s.value).map(|r| format!("{k} = {r}")))
                    .collect();
                lines.push(format!("{var} = {}({})", inst.worksheet, args.join(", ")));
            }
        }
        if let Some(r) = slot_repr(&inst.result) {
            lines.push(format!("{var}.result = {r}"));
        }
    }
    lines.join("\n")
}
