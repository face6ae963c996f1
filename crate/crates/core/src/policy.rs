//! The agent policy: turns the dialogue state into dialogue acts, running queries, actions
//! and worksheet completion along the way.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::sync::Arc;

use crate::acts::{repr, DialogueAct};
use crate::apis::ApiRuntime;
use crate::exprlang::{eval_predicate, exec_actions, ActionBlock, ActionHost, Effect, ExprError, Scope, Slot};
use crate::kb::{translate, KbStore, Translation, Translator};
use crate::spec::{FieldSpec, FieldType, TaskSpec, WorksheetKind};
use crate::state::{
    coerce, lower_snake, resolve_composition, set_slot, topo_order, ApplyReport, Confirmation, DialogueState, InstanceScope,
    Provenance, SlotValue, WorksheetInstance,
};
use crate::value::Value;

#[derive(Clone)]
pub struct KnowledgeBackend {
    pub store: Arc<KbStore>,
    pub translator: Arc<dyn Translator>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecKind {
    Api,
    Db,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionRecord {
    pub kind: ExecKind,
    /// Instance on whose behalf the execution ran.
    pub var: String,
    /// Api name, or table name for queries.
    pub name: String,
    #[serde(default, skip_serializing_if = "IndexMap::is_empty")]
    pub args: IndexMap<String, Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query: Option<String>,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Confirm-flagged fields holding a value that was not granted when the call was made.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ungranted: Vec<String>,
}

impl ExecutionRecord {
    /// Comparison key: `api(k=v, ...)` with sorted keys, or the query text.
    pub fn canonical(&self) -> String {
        match self.kind {
            ExecKind::Db => self.query.clone().unwrap_or_default(),
            ExecKind::Api => {
                let mut args: Vec<(&String, &Value)> = self.args.iter().collect();
                args.sort_by(|a, b| a.0.cmp(b.0));
                let parts: Vec<String> = args.iter().map(|(k, v)| format!("{k}={}", repr(v))).collect();
                format!("{}({})", self.name, parts.join(", "))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PolicyOutcome {
    pub acts: Vec<DialogueAct>,
    pub executions: Vec<ExecutionRecord>,
}

pub struct PolicyContext<'a> {
    pub spec: &'a TaskSpec,
    pub kb: &'a KnowledgeBackend,
    pub apis: &'a ApiRuntime,
}

// ---------------------------------------------------------------- activity

pub fn field_active(state: &DialogueState, spec: &TaskSpec, inst: &WorksheetInstance, f: &FieldSpec) -> bool {
    eval_predicate(f.predicate.as_ref(), &InstanceScope::of(state, spec, inst)).unwrap_or(false)
}

/// An instance is active when its worksheet predicate holds and, if it is embedded in
/// another instance, that instance and the embedding field are active.
pub fn instance_active(state: &DialogueState, spec: &TaskSpec, var: &str) -> bool {
    fn go(state: &DialogueState, spec: &TaskSpec, var: &str, depth: usize) -> bool {
        let Some(inst) = state.instance(var) else { return false };
        if depth > state.instances.len() {
            return false;
        }
        let Some(w) = spec.worksheet(&inst.worksheet) else { return inst.kind == WorksheetKind::Kb };
        if !eval_predicate(w.predicate.as_ref(), &InstanceScope::of(state, spec, inst)).unwrap_or(false) {
            return false;
        }
        let Some(parent) = state.parent_of(var) else { return true };
        if !go(state, spec, &parent.var, depth + 1) {
            return false;
        }
        let Some(pw) = spec.worksheet(&parent.worksheet) else { return true };
        pw.fields.iter().any(|f| {
            parent.slots.get(&f.name).is_some_and(|s| {
                s.value.filled().and_then(Value::as_ref_var) == Some(var) || s.source.as_deref() == Some(var)
            }) && field_active(state, spec, parent, f)
        })
    }
    go(state, spec, var, 0)
}

/// What step 4 can do with one field.
#[derive(Debug, Clone, PartialEq)]
enum FieldNeed {
    Ask,
    Descend(String),
    Instantiate(String),
    Nothing,
}

fn kb_needs_selection(state: &DialogueState, src: &str) -> bool {
    match state.instance(src) {
        Some(k) if k.kind == WorksheetKind::Kb => !matches!(k.result.filled(), Some(Value::List(rows)) if rows.len() == 1),
        _ => false,
    }
}

fn field_need(state: &DialogueState, spec: &TaskSpec, inst: &WorksheetInstance, f: &FieldSpec) -> FieldNeed {
    if !f.solicitable() || !f.required || !field_active(state, spec, inst, f) {
        return FieldNeed::Nothing;
    }
    let slot = inst.slots.get(&f.name).map(|s| &s.value).cloned().unwrap_or_default();
    match (&slot, &f.field_type) {
        (SlotValue::Refused, _) => FieldNeed::Nothing,
        (SlotValue::Empty, FieldType::Ws(child)) => {
            let w = spec.worksheet(child).expect("validated");
            let scope = InstanceScope { state, spec, ws: child, var: None, parent: Some(&inst.var) };
            if eval_predicate(w.predicate.as_ref(), &scope).unwrap_or(false) {
                FieldNeed::Instantiate(child.clone())
            } else {
                FieldNeed::Nothing
            }
        }
        (SlotValue::Empty, _) => FieldNeed::Ask,
        (SlotValue::Filled(Value::Ref(src)), FieldType::Kb(_)) if kb_needs_selection(state, src) => FieldNeed::Ask,
        (SlotValue::Filled(Value::Ref(src)), FieldType::Ws(_)) => match state.instance(src) {
            Some(c) if c.kind == WorksheetKind::Task && !c.completed => FieldNeed::Descend(src.clone()),
            _ => FieldNeed::Nothing,
        },
        _ => FieldNeed::Nothing,
    }
}

fn has_incomplete_child(state: &DialogueState, inst: &WorksheetInstance) -> bool {
    inst.slots.values().any(|s| match s.value.filled() {
        Some(Value::Ref(c)) => state.instance(c).is_some_and(|c| c.kind == WorksheetKind::Task && !c.completed),
        _ => false,
    })
}

/// All-slot view: one act per instance with pending confirmations, in creation order.
pub fn pending_confirmations(state: &DialogueState) -> Vec<DialogueAct> {
    state
        .instances
        .iter()
        .filter(|i| i.has_pending())
        .map(|i| DialogueAct::Confirm {
            var: i.var.clone(),
            pairs: i
                .slots
                .iter()
                .filter(|(_, s)| s.confirmed == Confirmation::Pending)
                .filter_map(|(k, s)| s.value.filled().map(|v| (k.clone(), v.clone())))
                .collect(),
        })
        .collect()
}

/// True iff every active required field holds a plain value, nothing awaits confirmation,
/// and no field action is outstanding.
pub fn completion_check(state: &DialogueState, spec: &TaskSpec, inst: &WorksheetInstance) -> bool {
    if inst.kind != WorksheetKind::Task || inst.completed || inst.has_pending() {
        return false;
    }
    let Some(w) = spec.worksheet(&inst.worksheet) else { return false };
    w.fields.iter().all(|f| {
        let slot = inst.slots.get(&f.name);
        let value = slot.and_then(|s| s.value.filled());
        let active = field_active(state, spec, inst, f);
        let filled_ok = !f.required || !active || matches!(value, Some(v) if !matches!(v, Value::Ref(_)));
        let action_ok = f.actions.is_none() || value.is_none() || slot.is_some_and(|s| s.action_done) || !active;
        filled_ok && action_ok
    })
}

// ---------------------------------------------------------------- action host

struct Host<'a, 'b> {
    state: &'a mut DialogueState,
    ctx: &'a PolicyContext<'b>,
    var: String,
    execs: &'a mut Vec<ExecutionRecord>,
}

impl Scope for Host<'_, '_> {
    fn resolve(&self, path: &[String]) -> Result<Slot, ExprError> {
        let inst = self.state.instance(&self.var).expect("host instance exists");
        InstanceScope::of(self.state, self.ctx.spec, inst).resolve(path)
    }
}

impl ActionHost for Host<'_, '_> {
    fn assign(&mut self, field: &str, value: Value) -> Result<(), ExprError> {
        let spec = self.ctx.spec;
        let ws = self.state.instance(&self.var).expect("host instance").worksheet.clone();
        if field == "result" {
            self.state.instance_mut(&self.var).expect("host instance").result = SlotValue::Filled(value);
            return Ok(());
        }
        let f = spec
            .worksheet(&ws)
            .and_then(|w| w.field(field))
            .ok_or_else(|| ExprError::BadAssignment(format!("{ws} has no field `{field}`")))?;
        let v = coerce(value, &f.field_type, self.state, spec).map_err(ExprError::BadAssignment)?;
        let inst = self.state.instance_mut(&self.var).expect("host instance");
        set_slot(inst, f, SlotValue::Filled(v), Provenance::Computed, None);
        Ok(())
    }

    fn call(&mut self, api: &str, args: &IndexMap<String, Value>) -> Result<Value, String> {
        let decl = self.ctx.spec.api(api).ok_or_else(|| format!("unknown api `{api}`"))?;
        let inst = self.state.instance(&self.var).expect("host instance");
        let w = self.ctx.spec.worksheet(&inst.worksheet);
        let ungranted = inst
            .slots
            .iter()
            .filter(|(k, s)| {
                w.and_then(|w| w.field(k)).is_some_and(|f| f.confirm)
                    && matches!(s.value.filled(), Some(v) if !matches!(v, Value::Ref(_)))
                    && s.confirmed != Confirmation::Granted
            })
            .map(|(k, _)| k.clone())
            .collect();
        let counter = self.state.exec_counter;
        self.state.exec_counter += 1;
        let res = self.ctx.apis.invoke(decl, args, counter);
        self.execs.push(ExecutionRecord {
            kind: crate::policy::ExecKind::Api,
            var: self.var.clone(),
            name: api.to_string(),
            args: args.clone(),
            query: None,
            ok: res.is_ok(),
            result: res.as_ref().ok().cloned(),
            error: res.as_ref().err().cloned(),
            ungranted,
        });
        res
    }
}

// ---------------------------------------------------------------- the policy

struct Run<'a, 'b> {
    ctx: &'a PolicyContext<'b>,
    acts: Vec<DialogueAct>,
    execs: Vec<ExecutionRecord>,
    attempted_actions: BTreeSet<(String, String)>,
    attempted_completion: BTreeSet<String>,
}

fn humanize(s: &str) -> String {
    lower_snake(s).replace('_', " ")
}

impl Run<'_, '_> {
    fn run_block(&mut self, state: &mut DialogueState, var: &str, block: &ActionBlock) -> bool {
        let mut host = Host { state, ctx: self.ctx, var: var.to_string(), execs: &mut self.execs };
        match exec_actions(block, &mut host) {
            Ok(out) => {
                for e in out.effects {
                    match e {
                        Effect::Say(text) => self.acts.push(DialogueAct::Say { text }),
                        Effect::Propose { ws, args } => self.acts.push(DialogueAct::Propose { ws, pairs: args }),
                        Effect::Call { result, .. } => self.acts.push(DialogueAct::Report { var: var.to_string(), result }),
                    }
                }
                match out.failure {
                    None => true,
                    Some(f) => {
                        self.acts.push(DialogueAct::Say { text: format!("Sorry, {} failed: {}. I will try again.", f.api, f.message) });
                        false
                    }
                }
            }
            Err(e) => {
                self.acts.push(DialogueAct::Say { text: format!("Sorry, something went wrong: {e}.") });
                false
            }
        }
    }

    /// Step 1 and 2: translate and execute new queries, report their results.
    fn queries(&mut self, state: &mut DialogueState) -> Option<DialogueAct> {
        let mut ask = None;
        for idx in 0..state.instances.len() {
            let inst = &state.instances[idx];
            if inst.kind != WorksheetKind::Kb
                || !inst.slots.get("structured_query").is_some_and(|s| s.value.is_empty())
                || !inst.slots.get("kb_result").is_some_and(|s| s.value.is_empty())
            {
                continue;
            }
            let var = inst.var.clone();
            let question = inst.value("nl_query").map(|v| v.to_string()).unwrap_or_default();
            let created_now = inst.created_turn == state.turn_index;
            match translate(&question, self.ctx.spec, self.ctx.kb.translator.as_ref()) {
                Ok(Translation::NoAnswer) => {
                    let inst = &mut state.instances[idx];
                    inst.slots.get_mut("kb_result").expect("kb slot").value = SlotValue::Filled(Value::List(vec![]));
                    inst.result = SlotValue::Filled(Value::List(vec![]));
                    inst.completed = true;
                    self.acts.push(DialogueAct::Report { var, result: Value::List(vec![]) });
                }
                Ok(Translation::Query { query, missing }) if !missing.is_empty() => {
                    let inst = &mut state.instances[idx];
                    inst.slots.get_mut("structured_query").expect("kb slot").value = SlotValue::Filled(Value::Str(query.to_string()));
                    inst.worksheet = query.table.clone();
                    if created_now && ask.is_none() {
                        ask = Some(DialogueAct::Ask {
                            var,
                            field: missing[0].clone(),
                            description: format!("The {} to search for", humanize(&missing[0])),
                        });
                    }
                }
                Ok(Translation::Query { query, .. }) => {
                    let text = query.to_string();
                    match self.ctx.kb.store.execute(&query) {
                        Ok(rows) => {
                            let inst = &mut state.instances[idx];
                            let result = Value::List(rows);
                            inst.worksheet = query.table.clone();
                            inst.slots.get_mut("structured_query").expect("kb slot").value = SlotValue::Filled(Value::Str(text.clone()));
                            inst.slots.get_mut("kb_result").expect("kb slot").value = SlotValue::Filled(result.clone());
                            inst.result = SlotValue::Filled(result.clone());
                            inst.completed = true;
                            self.execs.push(ExecutionRecord {
                                kind: ExecKind::Db,
                                var: var.clone(),
                                name: query.table.clone(),
                                args: IndexMap::new(),
                                query: Some(text),
                                ok: true,
                                result: Some(result.clone()),
                                error: None,
                                ungranted: vec![],
                            });
                            self.acts.push(DialogueAct::Report { var, result });
                        }
                        Err(e) => {
                            self.execs.push(ExecutionRecord {
                                kind: ExecKind::Db,
                                var,
                                name: query.table.clone(),
                                args: IndexMap::new(),
                                query: Some(text),
                                ok: false,
                                result: None,
                                error: Some(e.to_string()),
                                ungranted: vec![],
                            });
                            self.acts.push(DialogueAct::Say { text: format!("Sorry, I couldn't look that up: {e}.") });
                        }
                    }
                }
                Err(e) => self.acts.push(DialogueAct::Say { text: format!("Sorry, I couldn't look that up: {e}.") }),
            }
        }
        ask
    }

    /// Step 3: field actions for filled fields, each at most once per turn.
    fn field_actions(&mut self, state: &mut DialogueState) -> bool {
        let spec = self.ctx.spec;
        let mut ran = false;
        for var in state.instances.iter().map(|i| i.var.clone()).collect::<Vec<_>>() {
            let inst = state.instance(&var).expect("listed");
            if inst.kind != WorksheetKind::Task || inst.completed || !instance_active(state, spec, &var) {
                continue;
            }
            let w = spec.worksheet(&inst.worksheet).expect("validated");
            for f in &w.fields {
                let Some(block) = &f.actions else { continue };
                let inst = state.instance(&var).expect("listed");
                let Some(slot) = inst.slots.get(&f.name) else { continue };
                let ready = matches!(slot.value.filled(), Some(v) if !matches!(v, Value::Ref(_)))
                    && !slot.action_done
                    && slot.confirmed != Confirmation::Pending
                    && !(block.contains_call() && inst.has_pending())
                    && field_active(state, spec, inst, f);
                if !ready || !self.attempted_actions.insert((var.clone(), f.name.clone())) {
                    continue;
                }
                ran = true;
                if self.run_block(state, &var, block) {
                    if let Some(s) = state.instance_mut(&var).and_then(|i| i.slots.get_mut(&f.name)) {
                        if !s.value.is_empty() {
                            s.action_done = true;
                        }
                    }
                }
            }
        }
        ran
    }

    /// Step 5: worksheet actions for instances whose required fields are all settled.
    fn completions(&mut self, state: &mut DialogueState) -> bool {
        let spec = self.ctx.spec;
        let mut ran = false;
        for var in topo_order(state) {
            let inst = state.instance(&var).expect("listed");
            if !completion_check(state, spec, inst) || !instance_active(state, spec, &var) {
                continue;
            }
            if !self.attempted_completion.insert(var.clone()) {
                continue;
            }
            ran = true;
            let w = spec.worksheet(&inst.worksheet).expect("validated");
            let ok = match &w.ws_action {
                Some(block) => self.run_block(state, &var, block),
                None => true,
            };
            if ok {
                let inst = state.instance_mut(&var).expect("listed");
                if inst.result.is_empty() {
                    let rec = inst
                        .slots
                        .iter()
                        .filter_map(|(k, s)| s.value.filled().filter(|v| !matches!(v, Value::Ref(_))).map(|v| (k.clone(), v.clone())))
                        .collect();
                    inst.result = SlotValue::Filled(Value::Record(rec));
                }
                inst.completed = true;
            }
        }
        ran
    }

    /// Step 6: move finished results into the fields that reference them.
    fn compositions(&mut self, state: &mut DialogueState) -> bool {
        let spec = self.ctx.spec;
        let Ok(comps) = resolve_composition(state, spec) else { return false };
        let mut changed = false;
        for c in comps {
            let Some(source) = state.instance(&c.source) else { continue };
            let value = match (source.kind, source.result.filled()) {
                (WorksheetKind::Task, Some(v)) => v.clone(),
                (WorksheetKind::Kb, Some(Value::List(rows))) if rows.len() == 1 => rows[0].clone(),
                _ => continue,
            };
            let target = state.instance(&c.target).expect("composition target");
            if target.completed {
                continue;
            }
            let f = spec.worksheet(&target.worksheet).and_then(|w| w.field(&c.field)).expect("validated").clone();
            let inst = state.instance_mut(&c.target).expect("composition target");
            changed |= set_slot(inst, &f, SlotValue::Filled(value), Provenance::Composed, Some(c.source.clone()));
        }
        changed
    }

    /// Step 4: depth-first search for the next field to ask, instantiating embedded worksheets.
    fn next_ask(&mut self, state: &mut DialogueState) -> Option<DialogueAct> {
        let spec = self.ctx.spec;
        let mut visited = BTreeSet::new();
        let roots: Vec<String> = state
            .instances
            .iter()
            .filter(|i| i.kind == WorksheetKind::Task && !i.completed)
            .map(|i| i.var.clone())
            .collect();
        for root in roots {
            if !instance_active(state, spec, &root) {
                continue;
            }
            if let Some(a) = self.dfs(state, &root, &mut visited) {
                return Some(a);
            }
        }
        None
    }

    fn dfs(&mut self, state: &mut DialogueState, var: &str, visited: &mut BTreeSet<String>) -> Option<DialogueAct> {
        if !visited.insert(var.to_string()) {
            return None;
        }
        let spec = self.ctx.spec;
        let ws = state.instance(var)?.worksheet.clone();
        let w = spec.worksheet(&ws)?;
        for f in &w.fields {
            let need = field_need(state, spec, state.instance(var)?, f);
            match need {
                FieldNeed::Ask => {
                    return Some(DialogueAct::Ask { var: var.to_string(), field: f.name.clone(), description: spec.field_prompt_desc(f) })
                }
                FieldNeed::Descend(child) => {
                    if let Some(a) = self.dfs(state, &child, visited) {
                        return Some(a);
                    }
                }
                FieldNeed::Instantiate(child_ws) => {
                    let child = state.create_task(spec, &child_ws, None);
                    let inst = state.instance_mut(var)?;
                    set_slot(inst, f, SlotValue::Filled(Value::Ref(child.clone())), Provenance::Computed, None);
                    if let Some(a) = self.dfs(state, &child, visited) {
                        return Some(a);
                    }
                }
                FieldNeed::Nothing => {}
            }
        }
        None
    }

    fn confirmations(&mut self, state: &DialogueState) {
        let spec = self.ctx.spec;
        for act in pending_confirmations(state) {
            let DialogueAct::Confirm { var, .. } = &act else { continue };
            let inst = state.instance(var).expect("listed");
            if inst.kind != WorksheetKind::Task || inst.completed || !instance_active(state, spec, var) || has_incomplete_child(state, inst) {
                continue;
            }
            let w = spec.worksheet(&inst.worksheet).expect("validated");
            if w.fields.iter().any(|f| matches!(field_need(state, spec, inst, f), FieldNeed::Ask | FieldNeed::Instantiate(_))) {
                continue;
            }
            self.acts.push(act);
        }
    }

    fn refused_fields(&self, state: &DialogueState) -> Vec<(String, String, String)> {
        let spec = self.ctx.spec;
        let mut out = Vec::new();
        for inst in &state.instances {
            if inst.kind != WorksheetKind::Task || inst.completed || !instance_active(state, spec, &inst.var) {
                continue;
            }
            let w = spec.worksheet(&inst.worksheet).expect("validated");
            for f in &w.fields {
                if f.required
                    && inst.slots.get(&f.name).is_some_and(|s| s.value == SlotValue::Refused)
                    && field_active(state, spec, inst, f)
                {
                    out.push((inst.var.clone(), inst.worksheet.clone(), f.name.clone()));
                }
            }
        }
        out
    }
}

fn refusal_text(ws: &str, field: &str) -> String {
    format!("I'm sorry, I can't complete the {} request without your {}.", humanize(ws), field.replace('_', " "))
}

/// Run one turn of the policy over a state that already has this turn's updates applied.
pub fn run_policy(state: &mut DialogueState, ctx: &PolicyContext<'_>, report: &ApplyReport) -> PolicyOutcome {
    let spec = ctx.spec;
    let top = spec.top_level();
    if !state.instances.iter().any(|i| i.worksheet == top.name && i.kind == WorksheetKind::Task) {
        state.create_task(spec, &top.name, None);
    }
    let mut run = Run {
        ctx,
        acts: Vec::new(),
        execs: Vec::new(),
        attempted_actions: BTreeSet::new(),
        attempted_completion: BTreeSet::new(),
    };

    let kb_ask = run.queries(state);

    for _ in 0..=state.instances.len() * 4 + 8 {
        let a = run.field_actions(state);
        let c = run.completions(state);
        let m = run.compositions(state);
        if !(a || c || m) {
            break;
        }
    }

    let ask = match kb_ask {
        Some(a) => Some(a),
        None => run.next_ask(state),
    };
    run.confirmations(state);

    let refused = run.refused_fields(state);
    let mut said = BTreeSet::new();
    for ap in &report.applied {
        if ap.value == SlotValue::Refused && ap.changed {
            if let Some((var, ws, field)) = refused.iter().find(|(v, _, f)| *v == ap.var && *f == ap.field) {
                said.insert((var.clone(), field.clone()));
                run.acts.push(DialogueAct::Say { text: refusal_text(ws, field) });
            }
        }
    }
    if ask.is_none() {
        for (var, ws, field) in &refused {
            if said.insert((var.clone(), field.clone())) {
                run.acts.push(DialogueAct::Say { text: refusal_text(ws, field) });
            }
        }
    }
    if let Some(a) = ask {
        run.acts.push(a);
    }
    run.acts.sort_by_key(DialogueAct::rank);
    PolicyOutcome { acts: run.acts, executions: run.execs }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kb::{load_table, TableTranslator, TranslationEntry};
    use crate::semparse::{bind, parse_statements};
    use crate::spec::load_spec_str;
    use crate::state::{apply_updates, ApplyMode};

    struct World {
        spec: TaskSpec,
        kb: KnowledgeBackend,
        apis: ApiRuntime,
        state: DialogueState,
    }

    impl World {
        fn new(spec_json: &str, kb: KnowledgeBackend) -> World {
            let spec = load_spec_str(spec_json).unwrap();
            let mut state = DialogueState::new();
            state.create_task(&spec, &spec.top_level().name.clone(), None);
            World { spec, kb, apis: ApiRuntime::new(0), state }
        }

        fn turn(&mut self, stmts: &str) -> PolicyOutcome {
            let parsed = parse_statements(stmts);
            assert!(parsed.errors.is_empty(), "{:?}", parsed.errors);
            let (stmts, errs) = bind(parsed.statements, &self.spec);
            assert!(errs.is_empty());
            let report = apply_updates(&mut self.state, &self.spec, &stmts, ApplyMode::Live);
            assert!(report.rejections.is_empty(), "{:?}", report.rejections);
            let ctx = PolicyContext { spec: &self.spec, kb: &self.kb, apis: &self.apis };
            run_policy(&mut self.state, &ctx, &report)
        }
    }

    fn no_kb() -> KnowledgeBackend {
        KnowledgeBackend { store: Arc::new(KbStore::new()), translator: Arc::new(TableTranslator::default()) }
    }

    fn canon(o: &PolicyOutcome) -> Vec<String> {
        o.acts.iter().map(DialogueAct::canonical).collect()
    }

    #[test]
    fn single_required_field_empty_state_asks_it() {
        let mut w = World::new(r#"{"name":"t","worksheets":[{"name":"Main","fields":[{"name":"f","type":"str","required":true}]}]}"#, no_kb());
        assert_eq!(canon(&w.turn("")), vec!["AskField(main, f)"]);
    }

    const CONFIRM_SPEC: &str = r#"{"name":"t","worksheets":[{"name":"Main",
        "fields":[{"name":"a","type":"str","required":true,"confirm":true},
                  {"name":"b","type":"int","required":true,"confirm":true},
                  {"name":"c","type":"str","required":true}],
        "actions":"call submit(a=a, b=b) -> result"}],
        "apis":[{"name":"submit","params":[{"name":"a","type":"str"},{"name":"b","type":"int"}],"returns":"record",
                 "binding":{"kind":"stub","result":{"id":"{id}"}}}]}"#;

    #[test]
    fn confirmation_waits_for_asks_then_gates_the_call() {
        let mut w = World::new(CONFIRM_SPEC, no_kb());
        assert_eq!(canon(&w.turn("main.a = 'x'\nmain.b = 2")), vec!["AskField(main, c)"]);
        let o = w.turn("main.c = 'z'");
        assert_eq!(canon(&o), vec!["Confirm(main, a='x', b=2)"]);
        assert!(o.executions.is_empty());
        let o = w.turn("main.confirm = True");
        assert_eq!(canon(&o), vec!["Report(main, main.result)"]);
        assert_eq!(o.executions.len(), 1);
        assert_eq!(o.executions[0].canonical(), "submit(a='x', b=2)");
        assert!(o.executions[0].ungranted.is_empty());
        assert!(w.state.instance("main").unwrap().completed);
    }

    #[test]
    fn failing_call_says_and_retries_next_turn() {
        let spec = CONFIRM_SPEC.replace(r#""binding":{"kind":"stub","result":{"id":"{id}"}}"#, r#""binding":{"kind":"stub","result":"down","fail":true}"#);
        let mut w = World::new(&spec, no_kb());
        w.turn("main.a = 'x'\nmain.b = 2\nmain.c = 'z'");
        let o = w.turn("main.confirm = True");
        assert_eq!(o.executions.len(), 1);
        assert!(matches!(&o.acts[0], DialogueAct::Say { text } if text.contains("down")));
        let o = w.turn("");
        assert_eq!(o.executions.len(), 1, "retried on the next turn");
    }

    #[test]
    fn pending_confirmations_batches_per_instance_in_creation_order() {
        let spec = load_spec_str(CONFIRM_SPEC).unwrap();
        let mut st = DialogueState::new();
        let stmts = parse_statements("main = Main(a='x', b=1)\nother = Main(b=3)").statements;
        apply_updates(&mut st, &spec, &stmts, ApplyMode::Live);
        let acts: Vec<String> = pending_confirmations(&st).iter().map(DialogueAct::canonical).collect();
        assert_eq!(acts, vec!["Confirm(main, a='x', b=1)", "Confirm(other, b=3)"]);
        assert!(pending_confirmations(&DialogueState::new()).is_empty());
    }

    #[test]
    fn inactive_required_field_does_not_block_completion() {
        let spec = load_spec_str(
            r#"{"name":"t","worksheets":[{"name":"Main","fields":[
                {"name":"x","type":"bool","required":true},
                {"name":"y","type":"str","required":true,"predicate":"x == true"}]}]}"#,
        )
        .unwrap();
        let mut st = DialogueState::new();
        apply_updates(&mut st, &spec, &parse_statements("main = Main(x=False)").statements, ApplyMode::Live);
        assert!(completion_check(&st, &spec, st.instance("main").unwrap()));
        apply_updates(&mut st, &spec, &parse_statements("main.x = True").statements, ApplyMode::Live);
        assert!(!completion_check(&st, &spec, st.instance("main").unwrap()));
    }

    #[test]
    fn refused_required_field_is_not_asked_and_says_once() {
        let mut w = World::new(
            r#"{"name":"t","worksheets":[{"name":"Main","fields":[
                {"name":"a","type":"str","required":true},{"name":"b","type":"str","required":true}]}]}"#,
            no_kb(),
        );
        let o = w.turn("main.a = 'NA'");
        assert_eq!(canon(&o), vec![r#"Say("I'm sorry, I can't complete the main request without your a.")"#, "AskField(main, b)"]);
        let o = w.turn("main.b = 'q'");
        assert_eq!(canon(&o), vec![r#"Say("I'm sorry, I can't complete the main request without your a.")"#]);
        assert!(!w.state.instance("main").unwrap().completed);
    }

    #[test]
    fn embedded_worksheet_is_instantiated_and_composed() {
        let mut w = World::new(
            r#"{"name":"t","worksheets":[
                {"name":"Main","fields":[{"name":"who","type":"ws(Person)","required":true},{"name":"z","type":"str","required":true}]},
                {"name":"Person","fields":[{"name":"name","type":"str","required":true}],"actions":"say(\"Hi {name}\")"}]}"#,
            no_kb(),
        );
        assert_eq!(canon(&w.turn("")), vec!["AskField(person, name)"]);
        let o = w.turn("person.name = 'Ann'");
        assert_eq!(canon(&o), vec![r#"Say("Hi Ann")"#, "AskField(main, z)"]);
        let main = w.state.instance("main").unwrap();
        assert_eq!(main.slot("who").unwrap().provenance, Provenance::Composed);
        assert_eq!(main.value("who"), Some(&Value::Record([("name".to_string(), Value::str("Ann"))].into_iter().collect())));
    }

    fn restaurant_kb() -> KnowledgeBackend {
        let schema = crate::spec::KbSchema {
            name: "restaurants".into(),
            columns: vec![
                ("name".into(), crate::spec::ColumnType::Str),
                ("cuisines".into(), crate::spec::ColumnType::ListOfStr),
                ("location".into(), crate::spec::ColumnType::Str),
            ],
            source: "restaurants.csv".into(),
        };
        let t = load_table(&schema, "name:str,cuisines:list_of_str,location:str\nDa Mario,Italian,NYC\nRagazza,Italian,NYC\nChez,French,NYC\n".as_bytes()).unwrap();
        let mut store = KbStore::new();
        store.insert(t);
        let tr = TableTranslator::new(vec![
            TranslationEntry {
                question: "Italian restaurant in NYC".into(),
                query: Some("SELECT * FROM restaurants WHERE 'italian' = ANY (cuisines) AND location = 'NYC'".into()),
                missing: vec![],
            },
            TranslationEntry {
                question: "French restaurant in NYC".into(),
                query: Some("SELECT * FROM restaurants WHERE 'french' = ANY (cuisines) AND location = 'NYC'".into()),
                missing: vec![],
            },
            TranslationEntry {
                question: "Italian restaurant".into(),
                query: Some("SELECT * FROM restaurants WHERE 'italian' = ANY (cuisines)".into()),
                missing: vec!["location".into()],
            },
        ]);
        KnowledgeBackend { store: Arc::new(store), translator: Arc::new(tr) }
    }

    const KB_SPEC: &str = r#"{"name":"r","worksheets":[{"name":"Book","fields":[
          {"name":"restaurant","type":"kb(restaurants)","required":true},{"name":"n","type":"int","required":true}]}],
        "kb_schemas":[{"name":"restaurants","source":"restaurants.csv","columns":[
          {"name":"name","type":"str"},{"name":"cuisines","type":"list_of_str"},{"name":"location","type":"str"}]}]}"#;

    #[test]
    fn query_reports_then_asks_selection_when_several_rows() {
        let mut w = World::new(KB_SPEC, restaurant_kb());
        let o = w.turn("book = Book(restaurant=answer(\"Italian restaurant in NYC\"), n=2)");
        assert_eq!(canon(&o), vec!["Report(answer, answer.result)", "AskField(book, restaurant)"]);
        assert_eq!(o.executions[0].canonical(), "SELECT * FROM restaurants WHERE 'italian' = ANY (cuisines) AND location = 'NYC'");
        let a = w.state.instance("answer").unwrap();
        assert_eq!(a.worksheet, "restaurants");
        assert!(matches!(a.value("kb_result"), Some(Value::List(r)) if r.len() == 2));
    }

    #[test]
    fn single_row_is_composed() {
        let mut w = World::new(KB_SPEC, restaurant_kb());
        let o = w.turn("book = Book(restaurant=answer(\"French restaurant in NYC\"), n=2)");
        assert_eq!(canon(&o)[0], "Report(answer, answer.result)");
        assert!(w.state.instance("book").unwrap().completed);
    }

    #[test]
    fn missing_query_parameter_is_asked_once() {
        let mut w = World::new(KB_SPEC, restaurant_kb());
        let o = w.turn("book = Book(restaurant=answer(\"Italian restaurant\"))");
        assert_eq!(canon(&o), vec!["AskField(answer, location)"]);
        assert!(o.executions.is_empty());
        let o = w.turn("");
        assert_eq!(canon(&o), vec!["AskField(book, restaurant)"]);
    }

    #[test]
    fn unmapped_question_reports_empty_result() {
        let mut w = World::new(KB_SPEC, restaurant_kb());
        let o = w.turn("answer(\"what is the weather\")");
        assert_eq!(o.acts[0], DialogueAct::Report { var: "answer".into(), result: Value::List(vec![]) });
    }

    #[test]
    fn call_in_field_action_waits_for_grant() {
        let spec = r#"{"name":"t","worksheets":[{"name":"Main","fields":[
            {"name":"a","type":"str","required":true,"confirm":true},
            {"name":"b","type":"str","required":true,"actions":"call ping(x=b)"}]}],
          "apis":[{"name":"ping","params":[{"name":"x","type":"str"}],"returns":"record","binding":{"kind":"stub","result":{"ok":true}}}]}"#;
        let mut w = World::new(spec, no_kb());
        let o = w.turn("main.a = 'q'\nmain.b = 'r'");
        assert!(o.executions.is_empty());
        assert_eq!(canon(&o), vec!["Confirm(main, a='q')"]);
        let o = w.turn("main.confirm = True");
        assert_eq!(o.executions.len(), 1);
        assert!(o.executions[0].ungranted.is_empty());
    }
}
