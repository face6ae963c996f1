//! Generators and independent oracles shared by the acceptance harness and property tests.
#![allow(dead_code)]

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use worksheet::acts::{canonicalize_act_str, DialogueAct};
use worksheet::apis::{json_to_value, ApiRuntime};
use worksheet::engine::Engine;
use worksheet::eval::{field_item, Goal, GoldTurn, Meta, Transcript, TurnLine, TurnRecord};
use worksheet::eventlog::{read_log, recover_log, replay, EventWriter};
use worksheet::exprlang::eval_predicate;
use worksheet::kb::{Filter, FilterOp, KbStore, StructuredQuery, Table, TableTranslator};
use worksheet::policy::{run_policy, ExecKind, ExecutionRecord, KnowledgeBackend, PolicyContext};
use worksheet::respond::TemplateResponder;
use worksheet::semparse::{bind, parse_statements, Clock, ScriptedBackend};
use worksheet::spec::{load_spec_str, ColumnType, FieldType, KbSchema, TaskSpec, WorksheetKind};
use worksheet::state::{apply_updates, ApplyMode, Confirmation, DialogueState, InstanceScope, SlotValue, WorksheetInstance};
use worksheet::value::Value;

pub fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------- random specs

#[derive(Clone, Copy, PartialEq)]
enum Ty {
    Str,
    Int,
    Bool,
}

impl Ty {
    fn name(self) -> &'static str {
        match self {
            Ty::Str => "str",
            Ty::Int => "int",
            Ty::Bool => "bool",
        }
    }
}

fn scalar_predicate(rng: &mut ChaCha8Rng, earlier: &[(String, Ty)]) -> Option<String> {
    if earlier.is_empty() || !rng.random_bool(0.3) {
        return None;
    }
    let (name, ty) = &earlier[rng.random_range(0..earlier.len())];
    Some(match (ty, rng.random_range(0..3)) {
        (Ty::Int, 0) => format!("{name} > 1"),
        (Ty::Bool, 0) => format!("{name} == true"),
        (_, 1) => format!("not is_refused({name})"),
        _ => format!("is_filled({name})"),
    })
}

/// A random valid spec: up to three worksheets of up to six fields, `Main` on top, each
/// sub-worksheet embedded through a ws-typed field of an earlier one. Predicates only look at
/// earlier fields of the same worksheet or at scalar fields of the embedding worksheet.
pub fn random_spec(rng: &mut ChaCha8Rng) -> TaskSpec {
    let n_ws = rng.random_range(1..=3usize);
    let names: Vec<String> = (0..n_ws).map(|i| if i == 0 { "Main".to_string() } else { format!("Sub{i}") }).collect();
    let mut scalars: Vec<Vec<(String, Ty)>> = Vec::new();
    let mut fields: Vec<Vec<serde_json::Value>> = Vec::new();
    let mut log_used = false;
    for (i, _) in names.iter().enumerate() {
        let k = rng.random_range(1..=4usize);
        let mut mine: Vec<(String, Ty)> = Vec::new();
        let mut docs = Vec::new();
        for j in 0..k {
            let name = format!("w{i}f{j}");
            let ty = [Ty::Str, Ty::Int, Ty::Bool][rng.random_range(0..3)];
            let dont_ask = rng.random_bool(0.1);
            let mut d = json!({"name": name, "type": ty.name(), "description": format!("value {j}")});
            d["required"] = json!(!dont_ask && rng.random_bool(0.75));
            d["dont_ask"] = json!(dont_ask);
            d["confirm"] = json!(rng.random_bool(0.3));
            if let Some(p) = scalar_predicate(rng, &mine) {
                d["predicate"] = json!(p);
            }
            if rng.random_bool(0.25) {
                let action = match ty {
                    Ty::Int if rng.random_bool(0.5) => format!("if {name} > 2 {{ say(\"{name} is large\") }}"),
                    Ty::Str if rng.random_bool(0.4) => {
                        log_used = true;
                        format!("call log_value(v={name})")
                    }
                    _ => format!("say(\"noted {{{name}}}\")"),
                };
                d["actions"] = json!(action);
            }
            docs.push(d);
            mine.push((name, ty));
        }
        scalars.push(mine);
        fields.push(docs);
    }
    let mut ws_preds: Vec<Option<String>> = vec![None; n_ws];
    for i in 1..n_ws {
        let p = rng.random_range(0..i);
        let name = format!("w{p}sub{i}");
        let mut d = json!({"name": name, "type": format!("ws({})", names[i]), "description": format!("details {i}")});
        d["required"] = json!(rng.random_bool(0.8));
        d["confirm"] = json!(rng.random_bool(0.1));
        if let Some(pr) = scalar_predicate(rng, &scalars[p]) {
            d["predicate"] = json!(pr);
        }
        fields[p].push(d);
        ws_preds[i] = scalar_predicate(rng, &scalars[p]);
    }
    let mut apis = Vec::new();
    let mut worksheets = Vec::new();
    for i in 0..n_ws {
        let mut w = json!({"name": names[i], "fields": fields[i]});
        if let Some(p) = &ws_preds[i] {
            w["predicate"] = json!(p);
        }
        if i == 0 && rng.random_bool(0.8) {
            let args: Vec<&(String, Ty)> = scalars[0].iter().filter(|_| rng.random_bool(0.7)).collect();
            let call_args: Vec<String> = args.iter().map(|(n, _)| format!("{n}={n}")).collect();
            w["actions"] = json!(format!("call submit({}) -> result", call_args.join(", ")));
            let params: Vec<serde_json::Value> = args.iter().map(|(n, t)| json!({"name": n, "type": t.name()})).collect();
            apis.push(json!({
                "name": "submit", "params": params, "returns": "record",
                "binding": {"kind": "stub", "result": {"id": "S-{id}"}, "fail": rng.random_bool(0.15)}
            }));
        } else if rng.random_bool(0.3) {
            w["actions"] = json!(format!("say(\"{} done\")", names[i]));
        }
        worksheets.push(w);
    }
    if log_used {
        apis.push(json!({"name": "log_value", "params": [{"name": "v", "type": "str"}], "returns": "record",
            "binding": {"kind": "stub", "result": {"logged": "{v}"}}}));
    }
    let doc = json!({"name": "fuzz", "greeting": "Hi.", "worksheets": worksheets, "apis": apis});
    load_spec_str(&doc.to_string()).unwrap_or_else(|e| panic!("generated spec is invalid: {e}\n{doc:#}"))
}

fn literal(rng: &mut ChaCha8Rng, ty: &FieldType) -> String {
    match ty {
        FieldType::Int => rng.random_range(0..5).to_string(),
        FieldType::Bool => if rng.random_bool(0.5) { "True" } else { "False" }.to_string(),
        _ => format!("'s{}'", rng.random_range(0..4)),
    }
}

/// Parser output for one turn, drawn from the statement forms the parser may produce.
pub fn random_script(rng: &mut ChaCha8Rng, spec: &TaskSpec, state: &DialogueState, step: usize) -> String {
    let tasks: Vec<&WorksheetInstance> = state.instances.iter().filter(|i| i.kind == WorksheetKind::Task).collect();
    if tasks.is_empty() || rng.random_bool(0.08) {
        return String::new();
    }
    let mut lines = Vec::new();
    for _ in 0..rng.random_range(1..=3) {
        let pending: Vec<&&WorksheetInstance> = tasks.iter().filter(|i| i.has_pending()).collect();
        let open: Vec<&&WorksheetInstance> = tasks.iter().filter(|i| !i.completed).collect();
        let inst = if !open.is_empty() && rng.random_bool(0.85) { open[rng.random_range(0..open.len())] } else { &tasks[rng.random_range(0..tasks.len())] };
        let w = spec.worksheet(&inst.worksheet).expect("task worksheet");
        let f = &w.fields[rng.random_range(0..w.fields.len())];
        let r: f64 = rng.random();
        let line = if r < 0.45 {
            match &f.field_type {
                FieldType::Ws(_) => format!("{}.{} = 'NA'", inst.var, f.name),
                ty => format!("{}.{} = {}", inst.var, f.name, literal(rng, ty)),
            }
        } else if r < 0.53 {
            format!("{}.{} = 'NA'", inst.var, f.name)
        } else if r < 0.60 {
            format!("{}.{} = None", inst.var, f.name)
        } else if r < 0.80 {
            let target = if pending.is_empty() { inst } else { pending[rng.random_range(0..pending.len())] };
            format!("{}.confirm = True", target.var)
        } else if r < 0.88 {
            let ws = &spec.task_worksheets().nth(rng.random_range(0..spec.task_worksheets().count())).expect("some").clone();
            let scalar = ws.fields.iter().find(|f| !matches!(f.field_type, FieldType::Ws(_)));
            match scalar {
                Some(sf) => format!("n{step} = {}({}={})", ws.name, sf.name, literal(rng, &sf.field_type)),
                None => format!("n{step} = {}()", ws.name),
            }
        } else if r < 0.94 {
            match &f.field_type {
                FieldType::Int | FieldType::Bool => format!("{}.{} = 'not a value'", inst.var, f.name),
                _ => format!("{}.{} = [1, 2]", inst.var, f.name),
            }
        } else {
            format!("{}.no_such_field = 1", inst.var)
        };
        lines.push(line);
    }
    lines.join("\n")
}

// ---------------------------------------------------------------- ask oracle

fn embedding_parent<'a>(state: &'a DialogueState, var: &str) -> Option<&'a WorksheetInstance> {
    state.instances.iter().find(|i| {
        i.var != var
            && i.slots.values().any(|s| matches!(&s.value, SlotValue::Filled(Value::Ref(v)) if v == var) || s.source.as_deref() == Some(var))
    })
}

fn pred_holds(state: &DialogueState, spec: &TaskSpec, inst: &WorksheetInstance, pred: Option<&worksheet::exprlang::Expr>) -> bool {
    eval_predicate(pred, &InstanceScope::of(state, spec, inst)).unwrap_or(false)
}

fn oracle_active(state: &DialogueState, spec: &TaskSpec, var: &str, depth: usize) -> bool {
    if depth > state.instances.len() {
        return false;
    }
    let Some(inst) = state.instance(var) else { return false };
    let Some(w) = spec.worksheet(&inst.worksheet) else { return false };
    if !pred_holds(state, spec, inst, w.predicate.as_ref()) {
        return false;
    }
    let Some(parent) = embedding_parent(state, var) else { return true };
    if !oracle_active(state, spec, &parent.var, depth + 1) {
        return false;
    }
    let pw = spec.worksheet(&parent.worksheet).expect("parent worksheet");
    pw.fields.iter().any(|f| {
        let s = &parent.slots[&f.name];
        let embeds = matches!(&s.value, SlotValue::Filled(Value::Ref(v)) if v == var) || s.source.as_deref() == Some(var);
        embeds && pred_holds(state, spec, parent, f.predicate.as_ref())
    })
}

/// The field the agent should ask next on a post-turn state, found by a fresh depth-first walk.
/// `Err` when the walk meets an embedded worksheet that should already have been created.
pub fn oracle_next_ask(state: &DialogueState, spec: &TaskSpec) -> Result<Option<(String, String)>, String> {
    fn walk(state: &DialogueState, spec: &TaskSpec, var: &str, seen: &mut BTreeSet<String>) -> Result<Option<(String, String)>, String> {
        if !seen.insert(var.to_string()) {
            return Ok(None);
        }
        let inst = state.instance(var).expect("walked instance");
        let w = spec.worksheet(&inst.worksheet).expect("task worksheet");
        for f in &w.fields {
            if !f.is_input || f.dont_ask || !f.required || !pred_holds(state, spec, inst, f.predicate.as_ref()) {
                continue;
            }
            match (&inst.slots[&f.name].value, &f.field_type) {
                (SlotValue::Refused, _) => {}
                (SlotValue::Empty, FieldType::Ws(child)) => {
                    let cw = spec.worksheet(child).expect("child worksheet");
                    let scope = InstanceScope { state, spec, ws: child, var: None, parent: Some(var) };
                    if eval_predicate(cw.predicate.as_ref(), &scope).unwrap_or(false) {
                        return Err(format!("{var}.{} should hold a new {child}", f.name));
                    }
                }
                (SlotValue::Empty, _) => return Ok(Some((var.to_string(), f.name.clone()))),
                (SlotValue::Filled(Value::Ref(c)), FieldType::Ws(_)) => {
                    let open = state.instance(c).is_some_and(|ci| ci.kind == WorksheetKind::Task && !ci.completed);
                    if open {
                        if let Some(a) = walk(state, spec, c, seen)? {
                            return Ok(Some(a));
                        }
                    }
                }
                _ => {}
            }
        }
        Ok(None)
    }
    let mut seen = BTreeSet::new();
    for inst in &state.instances {
        if inst.kind != WorksheetKind::Task || inst.completed || !oracle_active(state, spec, &inst.var, 0) {
            continue;
        }
        if let Some(a) = walk(state, spec, &inst.var, &mut seen)? {
            return Ok(Some(a));
        }
    }
    Ok(None)
}

// ---------------------------------------------------------------- policy fuzz

#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace {
    pub script: String,
    pub acts: Vec<String>,
    pub executions: Vec<String>,
}

pub struct Episode {
    pub spec: TaskSpec,
    pub steps: Vec<StepTrace>,
    pub state: DialogueState,
    pub api_calls: usize,
    pub asks: usize,
}

fn no_kb() -> KnowledgeBackend {
    KnowledgeBackend { store: Arc::new(KbStore::new()), translator: Arc::new(TableTranslator::default()) }
}

/// Drive one random spec through `steps` scripted turns, checking the policy invariants after each.
pub fn run_episode(seed: u64, steps: usize) -> Result<Episode, String> {
    let mut r = rng(seed);
    let spec = random_spec(&mut r);
    let kb = no_kb();
    let apis = ApiRuntime::new(seed);
    let ctx = PolicyContext { spec: &spec, kb: &kb, apis: &apis };
    let mut state = DialogueState::new();
    state.create_task(&spec, &spec.top_level().name.clone(), None);
    let mut trace = Vec::new();
    let (mut api_calls, mut asks) = (0, 0);
    for step in 0..steps {
        let script = random_script(&mut r, &spec, &state, step);
        let (stmts, _) = bind(parse_statements(&script).statements, &spec);
        let report = apply_updates(&mut state, &spec, &stmts, ApplyMode::Live);
        let out = run_policy(&mut state, &ctx, &report);
        let ctx_msg = |m: String| format!("seed {seed} step {step}: {m}\nscript:\n{script}\nacts: {:?}", out.acts.iter().map(DialogueAct::canonical).collect::<Vec<_>>());

        let ask_acts: Vec<&DialogueAct> = out.acts.iter().filter(|a| a.is_ask()).collect();
        if ask_acts.len() > 1 {
            return Err(ctx_msg(format!("{} asks in one turn", ask_acts.len())));
        }
        if out.acts.windows(2).any(|w| w[0].rank() > w[1].rank()) {
            return Err(ctx_msg("acts out of order".into()));
        }
        for e in &out.executions {
            if e.kind == ExecKind::Api && !e.ungranted.is_empty() {
                return Err(ctx_msg(format!("{} ran with ungranted {:?}", e.name, e.ungranted)));
            }
        }
        api_calls += out.executions.iter().filter(|e| e.kind == ExecKind::Api).count();
        for inst in state.instances.iter().filter(|i| i.completed && i.kind == WorksheetKind::Task) {
            let w = spec.worksheet(&inst.worksheet).expect("task worksheet");
            for f in w.fields.iter().filter(|f| f.confirm) {
                let s = &inst.slots[&f.name];
                let plain = matches!(s.value.filled(), Some(v) if !matches!(v, Value::Ref(_)));
                if plain && s.confirmed != Confirmation::Granted {
                    return Err(ctx_msg(format!("{} completed with {} not confirmed", inst.var, f.name)));
                }
            }
        }
        let expected = oracle_next_ask(&state, &spec).map_err(ctx_msg)?;
        let got = ask_acts.first().map(|a| match a {
            DialogueAct::Ask { var, field, .. } => (var.clone(), field.clone()),
            _ => unreachable!(),
        });
        if got != expected {
            return Err(ctx_msg(format!("ask {got:?}, oracle {expected:?}")));
        }
        if let Some((var, field)) = &got {
            asks += 1;
            let v = &state.instance(var).expect("asked instance").slots[field].value;
            if *v != SlotValue::Empty {
                return Err(ctx_msg(format!("asked {var}.{field} which holds {v:?}")));
            }
        }
        trace.push(StepTrace {
            script,
            acts: out.acts.iter().map(DialogueAct::canonical).collect(),
            executions: out.executions.iter().map(ExecutionRecord::canonical).collect(),
        });
    }
    Ok(Episode { spec, steps: trace, state, api_calls, asks })
}

/// Run the episode twice and require identical traces and final states.
pub fn check_episode(seed: u64, steps: usize) -> Result<Episode, String> {
    let a = run_episode(seed, steps)?;
    let b = run_episode(seed, steps)?;
    if a.steps != b.steps || a.state != b.state {
        return Err(format!("seed {seed}: two runs diverged"));
    }
    Ok(a)
}

// ---------------------------------------------------------------- query oracle

pub fn random_table(rng: &mut ChaCha8Rng) -> Table {
    let columns = vec![
        ("s".to_string(), ColumnType::Str),
        ("n".to_string(), ColumnType::Int),
        ("x".to_string(), ColumnType::Float),
        ("b".to_string(), ColumnType::Bool),
        ("d".to_string(), ColumnType::Date),
        ("l".to_string(), ColumnType::ListOfStr),
    ];
    let n_rows = rng.random_range(0..=100usize);
    let words = ["alpha", "Beta", "gamma", "ALPHA", "delta"];
    let mut rows = Vec::new();
    for _ in 0..n_rows {
        let mut row = Vec::new();
        for (_, ty) in &columns {
            if rng.random_bool(0.1) {
                row.push(None);
                continue;
            }
            row.push(Some(match ty {
                ColumnType::Str => Value::str(words[rng.random_range(0..words.len())]),
                ColumnType::Int => Value::Int(rng.random_range(-3..6)),
                ColumnType::Float => Value::Float(rng.random_range(0..8) as f64 / 2.0),
                ColumnType::Bool => Value::Bool(rng.random_bool(0.5)),
                ColumnType::Date => Value::Date(chrono::NaiveDate::from_ymd_opt(2024, 1, rng.random_range(1..8)).unwrap()),
                _ => Value::List((0..rng.random_range(0..3)).map(|_| Value::str(words[rng.random_range(0..words.len())])).collect()),
            }));
        }
        rows.push(row);
    }
    Table { schema: KbSchema { name: "t".into(), columns, source: "t.csv".into() }, rows }
}

pub fn random_query(rng: &mut ChaCha8Rng) -> StructuredQuery {
    let words = ["alpha", "beta", "Gamma", "delta", "omega"];
    let mut filters = Vec::new();
    for _ in 0..rng.random_range(0..=3) {
        let ord = [FilterOp::Eq, FilterOp::Ne, FilterOp::Lt, FilterOp::Le, FilterOp::Gt, FilterOp::Ge];
        let (column, op, value) = match rng.random_range(0..6) {
            0 => ("s", [FilterOp::Eq, FilterOp::Ne][rng.random_range(0..2)], Value::str(words[rng.random_range(0..words.len())])),
            1 => ("n", ord[rng.random_range(0..6)], if rng.random_bool(0.3) { Value::Float(rng.random_range(-2..5) as f64) } else { Value::Int(rng.random_range(-3..6)) }),
            2 => ("x", ord[rng.random_range(0..6)], Value::Float(rng.random_range(0..8) as f64 / 2.0)),
            3 => ("b", [FilterOp::Eq, FilterOp::Ne][rng.random_range(0..2)], Value::Bool(rng.random_bool(0.5))),
            4 => ("d", ord[rng.random_range(0..6)], Value::str(format!("2024-01-0{}", rng.random_range(1..8)))),
            _ => ("l", FilterOp::AnyContains, Value::str(words[rng.random_range(0..words.len())])),
        };
        filters.push(Filter { column: column.into(), op, value });
    }
    let all = ["s", "n", "x", "b", "d", "l"];
    let projection = rng.random_bool(0.5).then(|| {
        let mut p: Vec<String> = all.iter().filter(|_| rng.random_bool(0.5)).map(|c| c.to_string()).collect();
        if p.is_empty() {
            p.push("s".into());
        }
        p
    });
    let limit = rng.random_bool(0.3).then(|| rng.random_range(0..6usize));
    StructuredQuery { table: "t".into(), projection, filters, limit }
}

fn as_f64(v: &Value) -> Option<f64> {
    match v {
        Value::Int(i) => Some(*i as f64),
        Value::Float(x) => Some(*x),
        _ => None,
    }
}

fn oracle_cell_eq(cell: &Value, lit: &Value) -> bool {
    match (cell, lit) {
        (Value::Str(a), Value::Str(b)) => a.eq_ignore_ascii_case(b),
        (Value::Date(a), Value::Str(b)) => a.format("%Y-%m-%d").to_string() == *b,
        _ => match (as_f64(cell), as_f64(lit)) {
            (Some(a), Some(b)) => a == b,
            _ => cell == lit,
        },
    }
}

fn oracle_order(cell: &Value, lit: &Value) -> Option<std::cmp::Ordering> {
    match (cell, lit) {
        (Value::Date(a), Value::Str(b)) => Some(a.format("%Y-%m-%d").to_string().cmp(b)),
        _ => as_f64(cell)?.partial_cmp(&as_f64(lit)?),
    }
}

/// Row scan written directly from the query semantics: every filter must hold on a present cell.
pub fn oracle_execute(t: &Table, q: &StructuredQuery) -> Vec<Value> {
    let names: Vec<&str> = t.schema.columns.iter().map(|(n, _)| n.as_str()).collect();
    let mut hits = Vec::new();
    for row in &t.rows {
        let cell = |c: &str| row[names.iter().position(|n| *n == c).unwrap()].as_ref();
        let ok = q.filters.iter().all(|f| {
            let Some(v) = cell(&f.column) else { return false };
            match f.op {
                FilterOp::Eq => oracle_cell_eq(v, &f.value),
                FilterOp::Ne => !oracle_cell_eq(v, &f.value),
                FilterOp::AnyContains => matches!(v, Value::List(xs) if xs.iter().any(|x| oracle_cell_eq(x, &f.value))),
                FilterOp::Lt => oracle_order(v, &f.value).is_some_and(|o| o.is_lt()),
                FilterOp::Le => oracle_order(v, &f.value).is_some_and(|o| o.is_le()),
                FilterOp::Gt => oracle_order(v, &f.value).is_some_and(|o| o.is_gt()),
                FilterOp::Ge => oracle_order(v, &f.value).is_some_and(|o| o.is_ge()),
            }
        });
        if ok {
            let cols: Vec<&str> = match &q.projection {
                Some(p) => p.iter().map(String::as_str).collect(),
                None => names.clone(),
            };
            let rec: IndexMap<String, Value> = cols.iter().filter_map(|c| cell(c).map(|v| (c.to_string(), v.clone()))).collect();
            hits.push(Value::Record(rec));
        }
    }
    if let Some(n) = q.limit {
        hits.truncate(n);
    }
    hits
}

// ---------------------------------------------------------------- metric oracles

pub fn oracle_sp(gold: &BTreeSet<String>, pred: &[String]) -> (usize, usize) {
    (gold.iter().filter(|g| pred.contains(g)).count(), gold.len())
}

pub fn oracle_ex(gold: &[String], pred: &[(String, bool)]) -> (usize, usize) {
    let keys: BTreeSet<&str> = gold.iter().map(|g| g.trim()).collect();
    let tp = keys
        .iter()
        .map(|k| {
            let g = gold.iter().filter(|x| x.trim() == *k).count();
            let p = pred.iter().filter(|(x, ok)| *ok && x.trim() == *k).count();
            g.min(p)
        })
        .sum();
    (tp, pred.len())
}

/// Maximum matching by exhaustive search over which emitted act each gold act takes, memoized
/// on the set of emitted acts already taken.
pub fn oracle_da(gold: &[String], emitted: &[String], aliases: &BTreeMap<String, Vec<String>>) -> (usize, usize) {
    let ok: Vec<Vec<bool>> = gold
        .iter()
        .map(|g| {
            emitted
                .iter()
                .map(|e| {
                    canonicalize_act_str(g) == *e
                        || aliases.iter().any(|(k, ls)| canonicalize_act_str(k) == *e && ls.iter().any(|l| l.trim() == g.trim()))
                })
                .collect()
        })
        .collect();
    fn best(i: usize, used: u32, ok: &[Vec<bool>], memo: &mut BTreeMap<(usize, u32), usize>) -> usize {
        if i == ok.len() {
            return 0;
        }
        if let Some(&v) = memo.get(&(i, used)) {
            return v;
        }
        let mut top = best(i + 1, used, ok, memo);
        for (j, &m) in ok[i].iter().enumerate() {
            if m && used & (1 << j) == 0 {
                top = top.max(1 + best(i + 1, used | (1 << j), ok, memo));
            }
        }
        memo.insert((i, used), top);
        top
    }
    assert!(emitted.len() < 32);
    (best(0, 0, &ok, &mut BTreeMap::new()), gold.len())
}

pub fn oracle_goal(goal: &Goal, execs: &[ExecutionRecord]) -> bool {
    execs.iter().any(|e| {
        e.kind == ExecKind::Api
            && e.ok
            && e.name == goal.api
            && goal.params.iter().all(|(k, v)| e.args.get(k).map(Value::norm) == Some(json_to_value(v).norm()))
    })
}

fn api_exec(name: &str, args: &[(&str, Value)], ok: bool) -> ExecutionRecord {
    ExecutionRecord {
        kind: ExecKind::Api,
        var: "main".into(),
        name: name.into(),
        args: args.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
        query: None,
        ok,
        result: None,
        error: None,
        ungranted: vec![],
    }
}

/// A random scored transcript of one to three turns, at most ten items per list.
pub fn random_transcript(rng: &mut ChaCha8Rng) -> Transcript {
    let fields = ["a", "b", "c"];
    let acts = ["AskField(main, a)", "AskField(main, b)", "Report(q, q.result)", "Say(\"ok\")", "ask_a", "AskField(main, a, the a)", "greet"];
    let calls = ["f(x=1)", "f(x=2)", "g()"];
    let mut meta = Meta::default();
    if rng.random_bool(0.6) {
        meta.goal = Some(Goal { api: "f".into(), params: [("x".to_string(), json!(rng.random_range(1..3)))].into_iter().collect() });
    }
    if rng.random_bool(0.5) {
        meta.aliases.insert("AskField(main, a)".into(), vec!["ask_a".into()]);
    }
    let mut turns = Vec::new();
    for _ in 0..rng.random_range(1..=3) {
        let mut gold = GoldTurn::default();
        let mut rec = TurnRecord::default();
        for _ in 0..rng.random_range(0..=10) {
            match rng.random_range(0..3) {
                0 => gold.apis.push(format!("Ws{}", rng.random_range(0..3))),
                1 => gold.dbs.push(format!("SELECT * FROM t{} WHERE n = {}", rng.random_range(0..2), rng.random_range(0..2))),
                _ => gold.fields.push(("main".into(), fields[rng.random_range(0..3)].into(), json!(rng.random_range(0..3)))),
            }
        }
        for _ in 0..rng.random_range(0..=10) {
            rec.sp_items.push(match rng.random_range(0..3) {
                0 => format!("A|Ws{}", rng.random_range(0..3)),
                1 => format!("D|SELECT * FROM t{} WHERE n = {}", rng.random_range(0..2), rng.random_range(0..2)),
                _ => field_item("main", fields[rng.random_range(0..3)], &rng.random_range(0..3).to_string()),
            });
        }
        for _ in 0..rng.random_range(0..=10) {
            gold.acts.push(acts[rng.random_range(0..acts.len())].into());
        }
        for _ in 0..rng.random_range(0..=10) {
            rec.acts.push(canonicalize_act_str(acts[rng.random_range(0..4)]));
        }
        for _ in 0..rng.random_range(0..=10) {
            gold.executions.push(calls[rng.random_range(0..3)].into());
        }
        for _ in 0..rng.random_range(0..=10) {
            let e = if rng.random_bool(0.6) { api_exec("f", &[("x", Value::Int(rng.random_range(1..3)))], rng.random_bool(0.8)) } else { api_exec("g", &[], rng.random_bool(0.8)) };
            rec.executions.push(e);
        }
        turns.push(TurnLine { user: "u".into(), parse: None, gold, record: Some(rec) });
    }
    Transcript { meta, turns }
}

/// Gold SP items in the documented `A|`, `D|`, `F|` forms, rebuilt without the scorer's helpers.
pub fn oracle_gold_items(g: &GoldTurn) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    for a in &g.apis {
        out.insert(format!("A|{a}"));
    }
    for d in &g.dbs {
        out.insert(format!("D|{d}"));
    }
    for (v, f, x) in &g.fields {
        out.insert(format!("F|{v}|{f}|{}", json_to_value(x).norm()));
    }
    out
}

// ---------------------------------------------------------------- persistence

pub struct SessionRun {
    pub state: DialogueState,
    pub turns: usize,
}

fn fuzz_engine(spec: Arc<TaskSpec>, seed: u64) -> Engine {
    Engine {
        spec,
        kb: no_kb(),
        apis: ApiRuntime::new(seed),
        parser: Arc::new(ScriptedBackend::default()),
        responder: Arc::new(TemplateResponder),
        clock: Clock { date: chrono::NaiveDate::from_ymd_opt(2024, 1, 1).unwrap() },
        few_shots: vec![],
    }
}

/// Run `turns` engine turns from `state`, appending events to `log`. A few turns have no parser
/// output so the backend-error path is logged too.
fn drive(engine: &mut Engine, state: &mut DialogueState, r: &mut ChaCha8Rng, turns: usize, log: &mut EventWriter<std::fs::File>) {
    for _ in 0..turns {
        let turn = state.turn_index + 1;
        let script = random_script(r, &engine.spec, state, turn as usize);
        let entries: BTreeMap<u32, String> = if r.random_bool(0.05) { BTreeMap::new() } else { [(turn, script)].into_iter().collect() };
        engine.parser = Arc::new(ScriptedBackend::new(entries));
        let (_, events) = engine.take_turn(state, &format!("utterance {turn}"));
        for e in events {
            log.append(e, None).expect("log write");
        }
    }
}

/// One session with a crash after `cut` of `total` turns: the log gets a torn tail, is read back,
/// replayed, truncated to its valid prefix and resumed by a fresh engine. The result must match an
/// uninterrupted run.
pub fn crash_and_resume(seed: u64, dir: &Path) -> Result<(), String> {
    let mut r = rng(seed);
    let spec = Arc::new(random_spec(&mut r));
    let total = r.random_range(1..=12usize);
    let cut = r.random_range(0..=total);
    let mut crash = rng(seed ^ 0xdead_beef);

    // Uninterrupted reference run.
    let ref_path = dir.join(format!("ref-{seed}.jsonl"));
    let mut engine = fuzz_engine(spec.clone(), seed);
    let mut script_rng = r.clone();
    let (mut expected, events) = engine.start();
    let mut w = EventWriter::new(std::fs::File::create(&ref_path).map_err(|e| e.to_string())?);
    for e in events {
        w.append(e, None).map_err(|e| e.to_string())?;
    }
    drive(&mut engine, &mut expected, &mut script_rng, total, &mut w);

    // Interrupted run.
    let path = dir.join(format!("s-{seed}.jsonl"));
    let mut engine = fuzz_engine(spec.clone(), seed);
    let mut script_rng = r.clone();
    let (mut live, events) = engine.start();
    let mut w = EventWriter::new(std::fs::File::create(&path).map_err(|e| e.to_string())?);
    for e in events {
        w.append(e, None).map_err(|e| e.to_string())?;
    }
    drive(&mut engine, &mut live, &mut script_rng, cut, &mut w);
    drop(w);
    if crash.random_bool(0.7) {
        let partial = "{\"seq\":999,\"type\":\"state_delta\",\"delta\":{\"upserts\":[";
        let n = crash.random_range(1..partial.len());
        let mut f = std::fs::OpenOptions::new().append(true).open(&path).map_err(|e| e.to_string())?;
        std::io::Write::write_all(&mut f, &partial.as_bytes()[..n]).map_err(|e| e.to_string())?;
    }

    let lines = recover_log(&path).map_err(|e| format!("seed {seed}: {e}"))?;
    let mut recovered = replay(&lines);
    if recovered != live {
        return Err(format!("seed {seed}: replay after {cut} turns differs from the live state"));
    }
    let f = std::fs::OpenOptions::new().append(true).open(&path).map_err(|e| e.to_string())?;
    let mut w = EventWriter::resume(f, lines.len() as u64);
    let mut engine = fuzz_engine(spec, seed);
    drive(&mut engine, &mut recovered, &mut script_rng, total - cut, &mut w);
    drop(w);
    if recovered != expected {
        return Err(format!("seed {seed}: resumed session ends differently from an uninterrupted one"));
    }
    let again = read_log(std::fs::read(&path).map_err(|e| e.to_string())?.as_slice()).map_err(|e| format!("seed {seed}: {e}"))?;
    if replay(&again) != expected {
        return Err(format!("seed {seed}: full log does not replay to the final state"));
    }
    if again.iter().enumerate().any(|(i, l)| l.seq != i as u64) {
        return Err(format!("seed {seed}: sequence numbers are not contiguous after resume"));
    }
    Ok(())
}
