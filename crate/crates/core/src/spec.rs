//! Task specification: worksheets, fields, knowledge-base schemas and the api registry.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, HashMap};
use std::fmt;

use crate::exprlang::{check_actions, check_predicate, parse_actions, parse_expr, ActionBlock, Expr, ExprError, TypeEnv};

#[derive(Debug, thiserror::Error)]
pub enum SpecError {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("reference cycle: {0}")]
    Cycle(String),
    #[error("duplicate name: {0}")]
    DuplicateName(String),
    #[error("bad expression in {location}: {source}")]
    BadExpression { location: String, source: ExprError },
    #[error("malformed document: {0}")]
    Json(String),
}

#[derive(Debug, thiserror::Error)]
pub enum SheetError {
    #[error("header mismatch: expected `{expected}`, found `{found}`")]
    HeaderMismatch { expected: String, found: String },
    #[error("unknown type `{ty}` on line {line}")]
    UnknownType { line: usize, ty: String },
    #[error("malformed row on line {line}: {message}")]
    BadRow { line: usize, message: String },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum FieldType {
    Str,
    Int,
    Float,
    Bool,
    Date,
    Time,
    Enum(String),
    Ws(String),
    Kb(String),
}

impl FieldType {
    pub fn parse(s: &str) -> Option<FieldType> {
        let s = s.trim();
        let inner = |prefix: &str| {
            s.strip_prefix(prefix)
                .and_then(|r| r.strip_suffix(')'))
                .map(|r| r.trim().to_string())
                .filter(|r| !r.is_empty())
        };
        Some(match s {
            "str" => FieldType::Str,
            "int" => FieldType::Int,
            "float" => FieldType::Float,
            "bool" => FieldType::Bool,
            "date" => FieldType::Date,
            "time" => FieldType::Time,
            _ => {
                if let Some(d) = inner("enum(") {
                    FieldType::Enum(d)
                } else if let Some(w) = inner("ws(") {
                    FieldType::Ws(w)
                } else {
                    FieldType::Kb(inner("kb(")?)
                }
            }
        })
    }

    pub fn is_composite(&self) -> bool {
        matches!(self, FieldType::Ws(_) | FieldType::Kb(_))
    }
}

impl fmt::Display for FieldType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FieldType::Str => write!(f, "str"),
            FieldType::Int => write!(f, "int"),
            FieldType::Float => write!(f, "float"),
            FieldType::Bool => write!(f, "bool"),
            FieldType::Date => write!(f, "date"),
            FieldType::Time => write!(f, "time"),
            FieldType::Enum(d) => write!(f, "enum({d})"),
            FieldType::Ws(w) => write!(f, "ws({w})"),
            FieldType::Kb(k) => write!(f, "kb({k})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnType {
    Str,
    Int,
    Float,
    Bool,
    Date,
    ListOfStr,
    FreeText,
}

impl ColumnType {
    pub fn parse(s: &str) -> Option<ColumnType> {
        Some(match s.trim() {
            "str" => ColumnType::Str,
            "int" => ColumnType::Int,
            "float" => ColumnType::Float,
            "bool" => ColumnType::Bool,
            "date" => ColumnType::Date,
            "list_of_str" => ColumnType::ListOfStr,
            "free_text" => ColumnType::FreeText,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            ColumnType::Str => "str",
            ColumnType::Int => "int",
            ColumnType::Float => "float",
            ColumnType::Bool => "bool",
            ColumnType::Date => "date",
            ColumnType::ListOfStr => "list_of_str",
            ColumnType::FreeText => "free_text",
        }
    }
}

// ---------------------------------------------------------------- document form

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldDoc {
    pub name: String,
    #[serde(rename = "type")]
    pub ty: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicate: Option<String>,
    #[serde(default = "yes")]
    pub input: bool,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub dont_ask: bool,
    #[serde(default)]
    pub required: bool,
    #[serde(default)]
    pub confirm: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub actions: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorksheetDoc {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicate: Option<String>,
    #[serde(default)]
    pub fields: Vec<FieldDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub actions: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnDoc {
    pub name: String,
    #[serde(rename = "type")]
    pub ty: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KbSchemaDoc {
    pub name: String,
    pub columns: Vec<ColumnDoc>,
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Binding {
    Host { function: String },
    Stub {
        result: serde_json::Value,
        #[serde(default, skip_serializing_if = "std::ops::Not::not")]
        fail: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamDoc {
    pub name: String,
    #[serde(rename = "type")]
    pub ty: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApiDoc {
    pub name: String,
    #[serde(default)]
    pub params: Vec<ParamDoc>,
    pub returns: String,
    pub binding: Binding,
}

/// Canonical JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct SpecDoc {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub greeting: Option<String>,
    #[serde(default)]
    pub worksheets: Vec<WorksheetDoc>,
    #[serde(default)]
    pub kb_schemas: Vec<KbSchemaDoc>,
    #[serde(default)]
    pub apis: Vec<ApiDoc>,
    #[serde(default)]
    pub enums: IndexMap<String, Vec<String>>,
}

// ---------------------------------------------------------------- validated form

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorksheetKind {
    Task,
    Kb,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldSpec {
    pub name: String,
    pub predicate: Option<Expr>,
    pub predicate_src: Option<String>,
    pub is_input: bool,
    pub field_type: FieldType,
    pub description: String,
    pub dont_ask: bool,
    pub required: bool,
    pub confirm: bool,
    pub actions: Option<ActionBlock>,
    pub actions_src: Option<String>,
}

impl FieldSpec {
    /// Whether the policy may solicit this field.
    pub fn solicitable(&self) -> bool {
        self.is_input && !self.dont_ask
    }

    /// A declared boolean `confirm` field doubles as the grant signal.
    pub fn is_confirm_flag(&self) -> bool {
        self.name == "confirm" && self.field_type == FieldType::Bool
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorksheetSpec {
    pub name: String,
    pub predicate: Option<Expr>,
    pub predicate_src: Option<String>,
    pub fields: Vec<FieldSpec>,
    pub ws_action: Option<ActionBlock>,
    pub ws_action_src: Option<String>,
    pub kind: WorksheetKind,
}

impl WorksheetSpec {
    pub fn field(&self, name: &str) -> Option<&FieldSpec> {
        self.fields.iter().find(|f| f.name == name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KbSchema {
    pub name: String,
    pub columns: Vec<(String, ColumnType)>,
    pub source: String,
}

impl KbSchema {
    pub fn column(&self, name: &str) -> Option<ColumnType> {
        self.columns.iter().find(|(c, _)| c == name).map(|(_, t)| *t)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApiDecl {
    pub name: String,
    pub params: Vec<(String, FieldType)>,
    /// `record`, `list` or a field type.
    pub returns: String,
    pub binding: Binding,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub name: String,
    pub greeting: Option<String>,
    /// Task worksheets in declaration order, followed by the synthesized KB worksheets.
    pub worksheets: Vec<WorksheetSpec>,
    pub kb_schemas: Vec<KbSchema>,
    pub api_registry: Vec<ApiDecl>,
    pub enum_domains: IndexMap<String, Vec<String>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SpecStats {
    pub worksheets: usize,
    pub fields: usize,
    pub dbs: usize,
    pub predicates: usize,
    pub actions: usize,
}

pub const KB_FIELDS: [&str; 3] = ["nl_query", "structured_query", "kb_result"];

/// KB worksheet for one schema: the three-field lifecycle of a query.
pub fn synthesize_kb_worksheet(schema: &KbSchema) -> WorksheetSpec {
    let field = |name: &str, ty: FieldType, input: bool, desc: &str| FieldSpec {
        name: name.to_string(),
        predicate: None,
        predicate_src: None,
        is_input: input,
        field_type: ty,
        description: desc.to_string(),
        dont_ask: true,
        required: false,
        confirm: false,
        actions: None,
        actions_src: None,
    };
    WorksheetSpec {
        name: schema.name.clone(),
        predicate: None,
        predicate_src: None,
        fields: vec![
            field("nl_query", FieldType::Str, true, "Self-contained natural language question"),
            field("structured_query", FieldType::Str, false, "Structured query derived from the question"),
            field("kb_result", FieldType::Kb(schema.name.clone()), false, "Rows returned by the query"),
        ],
        ws_action: None,
        ws_action_src: None,
        kind: WorksheetKind::Kb,
    }
}

impl TaskSpec {
    pub fn worksheet(&self, name: &str) -> Option<&WorksheetSpec> {
        self.worksheets.iter().find(|w| w.name == name)
    }

    pub fn task_worksheets(&self) -> impl Iterator<Item = &WorksheetSpec> {
        self.worksheets.iter().filter(|w| w.kind == WorksheetKind::Task)
    }

    pub fn kb_schema(&self, name: &str) -> Option<&KbSchema> {
        self.kb_schemas.iter().find(|k| k.name == name)
    }

    pub fn api(&self, name: &str) -> Option<&ApiDecl> {
        self.api_registry.iter().find(|a| a.name == name)
    }

    /// Worksheets that are referenced through a ws-typed field of another worksheet.
    fn referenced(&self) -> BTreeSet<String> {
        self.task_worksheets()
            .flat_map(|w| w.fields.iter())
            .filter_map(|f| match &f.field_type {
                FieldType::Ws(n) => Some(n.clone()),
                _ => None,
            })
            .collect()
    }

    /// The worksheet that is unconditionally active: no predicate and not nested in another.
    pub fn top_level(&self) -> &WorksheetSpec {
        let refd = self.referenced();
        self.task_worksheets()
            .find(|w| w.predicate.is_none() && !refd.contains(&w.name))
            .expect("validated spec has a top-level worksheet")
    }

    pub fn stats(&self) -> SpecStats {
        let mut s = SpecStats { worksheets: 0, fields: 0, dbs: self.kb_schemas.len(), predicates: 0, actions: 0 };
        for w in self.task_worksheets() {
            s.worksheets += 1;
            s.fields += w.fields.len();
            s.predicates += w.predicate.is_some() as usize;
            s.actions += w.ws_action.is_some() as usize;
            for f in &w.fields {
                s.predicates += f.predicate.is_some() as usize;
                s.actions += f.actions.is_some() as usize;
            }
        }
        s
    }

    /// Description used in prompts and asks, with enum options appended.
    pub fn field_prompt_desc(&self, f: &FieldSpec) -> String {
        match &f.field_type {
            FieldType::Enum(d) => {
                let opts = self.enum_domains.get(d).map(|v| v.join(", ")).unwrap_or_default();
                if f.description.is_empty() {
                    format!("Options are: {opts}")
                } else {
                    format!("{} Options are: {opts}", f.description)
                }
            }
            _ => f.description.clone(),
        }
    }

    /// Canonical document for this spec.
    pub fn emit(&self) -> SpecDoc {
        SpecDoc {
            name: self.name.clone(),
            greeting: self.greeting.clone(),
            worksheets: self
                .task_worksheets()
                .map(|w| WorksheetDoc {
                    name: w.name.clone(),
                    predicate: w.predicate_src.clone(),
                    fields: w
                        .fields
                        .iter()
                        .map(|f| FieldDoc {
                            name: f.name.clone(),
                            ty: f.field_type.to_string(),
                            predicate: f.predicate_src.clone(),
                            input: f.is_input,
                            description: f.description.clone(),
                            dont_ask: f.dont_ask,
                            required: f.required,
                            confirm: f.confirm,
                            actions: f.actions_src.clone(),
                        })
                        .collect(),
                    actions: w.ws_action_src.clone(),
                })
                .collect(),
            kb_schemas: self
                .kb_schemas
                .iter()
                .map(|k| KbSchemaDoc {
                    name: k.name.clone(),
                    columns: k
                        .columns
                        .iter()
                        .map(|(n, t)| ColumnDoc { name: n.clone(), ty: t.name().to_string() })
                        .collect(),
                    source: k.source.clone(),
                })
                .collect(),
            apis: self
                .api_registry
                .iter()
                .map(|a| ApiDoc {
                    name: a.name.clone(),
                    params: a.params.iter().map(|(n, t)| ParamDoc { name: n.clone(), ty: t.to_string() }).collect(),
                    returns: a.returns.clone(),
                    binding: a.binding.clone(),
                })
                .collect(),
            enums: self.enum_domains.clone(),
        }
    }
}

// ---------------------------------------------------------------- loading

struct Env<'a> {
    ws: &'a WorksheetSpec,
    ancestors: Vec<&'a WorksheetSpec>,
    all: &'a [WorksheetSpec],
    enums: &'a IndexMap<String, Vec<String>>,
    apis: &'a [ApiDecl],
}

impl TypeEnv for Env<'_> {
    fn lookup(&self, name: &str) -> Option<FieldType> {
        std::iter::once(self.ws)
            .chain(self.ancestors.iter().copied())
            .find_map(|w| w.field(name).map(|f| f.field_type.clone()))
    }
    fn member(&self, ws: &str, field: &str) -> Option<FieldType> {
        self.all.iter().find(|w| w.name == ws)?.field(field).map(|f| f.field_type.clone())
    }
    fn enum_domain(&self, domain: &str) -> Option<Vec<String>> {
        self.enums.get(domain).cloned()
    }
    fn own_field(&self, name: &str) -> bool {
        self.ws.field(name).is_some()
    }
    fn api_params(&self, api: &str) -> Option<Vec<String>> {
        self.apis.iter().find(|a| a.name == api).map(|a| a.params.iter().map(|(n, _)| n.clone()).collect())
    }
    fn worksheet_fields(&self, ws: &str) -> Option<Vec<String>> {
        self.all
            .iter()
            .find(|w| w.name == ws && w.kind == WorksheetKind::Task)
            .map(|w| w.fields.iter().map(|f| f.name.clone()).collect())
    }
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_alphabetic() || c == '_') && chars.all(|c| c.is_alphanumeric() || c == '_')
}

fn opt_src(s: &Option<String>) -> Option<String> {
    s.as_ref().map(|s| s.trim().to_string()).filter(|s| !s.is_empty())
}

pub fn load_spec_str(json: &str) -> Result<TaskSpec, SpecError> {
    let doc: SpecDoc = serde_json::from_str(json).map_err(|e| SpecError::Json(e.to_string()))?;
    load_spec(&doc)
}

pub fn load_spec(doc: &SpecDoc) -> Result<TaskSpec, SpecError> {
    if !is_ident(&doc.name) {
        return Err(SpecError::Schema(format!("spec name `{}` is not an identifier", doc.name)));
    }
    if doc.worksheets.is_empty() {
        return Err(SpecError::Schema("spec declares no worksheets".into()));
    }
    let mut names = BTreeSet::new();
    for n in doc.worksheets.iter().map(|w| &w.name).chain(doc.kb_schemas.iter().map(|k| &k.name)) {
        if !is_ident(n) {
            return Err(SpecError::Schema(format!("`{n}` is not an identifier")));
        }
        if n == "answer" {
            return Err(SpecError::Schema("`answer` is reserved for knowledge queries".into()));
        }
        if !names.insert(n.clone()) {
            return Err(SpecError::DuplicateName(n.clone()));
        }
    }

    for (name, values) in &doc.enums {
        if values.is_empty() {
            return Err(SpecError::Schema(format!("enum `{name}` has no values")));
        }
        let set: BTreeSet<&String> = values.iter().collect();
        if set.len() != values.len() {
            return Err(SpecError::DuplicateName(format!("value in enum `{name}`")));
        }
    }

    let mut kb_schemas = Vec::new();
    for k in &doc.kb_schemas {
        let mut cols = Vec::new();
        let mut seen = BTreeSet::new();
        for c in &k.columns {
            let t = ColumnType::parse(&c.ty)
                .ok_or_else(|| SpecError::Schema(format!("column {}.{} has unknown type `{}`", k.name, c.name, c.ty)))?;
            if !seen.insert(c.name.clone()) {
                return Err(SpecError::DuplicateName(format!("column {}.{}", k.name, c.name)));
            }
            cols.push((c.name.clone(), t));
        }
        if cols.is_empty() {
            return Err(SpecError::Schema(format!("kb schema `{}` has no columns", k.name)));
        }
        if k.source.trim().is_empty() {
            return Err(SpecError::Schema(format!("kb schema `{}` has no source", k.name)));
        }
        kb_schemas.push(KbSchema { name: k.name.clone(), columns: cols, source: k.source.clone() });
    }

    let ws_names: BTreeSet<&str> = doc.worksheets.iter().map(|w| w.name.as_str()).collect();
    let check_type = |t: &FieldType, loc: &str| -> Result<(), SpecError> {
        match t {
            FieldType::Enum(d) if !doc.enums.contains_key(d) => {
                Err(SpecError::Schema(format!("{loc}: unknown enum domain `{d}`")))
            }
            FieldType::Ws(w) if !ws_names.contains(w.as_str()) => {
                Err(SpecError::Schema(format!("{loc}: unknown worksheet `{w}`")))
            }
            FieldType::Kb(k) if !doc.kb_schemas.iter().any(|s| &s.name == k) => {
                Err(SpecError::Schema(format!("{loc}: unknown kb schema `{k}`")))
            }
            _ => Ok(()),
        }
    };

    let mut apis = Vec::new();
    let mut api_names = BTreeSet::new();
    for a in &doc.apis {
        if !is_ident(&a.name) {
            return Err(SpecError::Schema(format!("api name `{}` is not an identifier", a.name)));
        }
        if !api_names.insert(a.name.clone()) {
            return Err(SpecError::DuplicateName(format!("api `{}`", a.name)));
        }
        let mut params = Vec::new();
        let mut seen = BTreeSet::new();
        for p in &a.params {
            let t = FieldType::parse(&p.ty)
                .ok_or_else(|| SpecError::Schema(format!("api {}.{}: unknown type `{}`", a.name, p.name, p.ty)))?;
            check_type(&t, &format!("api {}", a.name))?;
            if !seen.insert(p.name.clone()) {
                return Err(SpecError::DuplicateName(format!("param {}.{}", a.name, p.name)));
            }
            params.push((p.name.clone(), t));
        }
        if a.returns != "record" && a.returns != "list" && FieldType::parse(&a.returns).is_none() {
            return Err(SpecError::Schema(format!("api {}: unknown return type `{}`", a.name, a.returns)));
        }
        if let Binding::Stub { result, .. } = &a.binding {
            if result.is_null() {
                return Err(SpecError::Schema(format!("api {}: stub binding needs a result template", a.name)));
            }
        }
        apis.push(ApiDecl { name: a.name.clone(), params, returns: a.returns.clone(), binding: a.binding.clone() });
    }

    // Structural pass: types and flags, expressions parsed but not yet checked.
    let mut worksheets = Vec::new();
    for w in &doc.worksheets {
        let mut fields = Vec::new();
        let mut seen = BTreeSet::new();
        for f in &w.fields {
            let loc = format!("{}.{}", w.name, f.name);
            if !is_ident(&f.name) {
                return Err(SpecError::Schema(format!("{loc}: field name is not an identifier")));
            }
            if f.name == "result" {
                return Err(SpecError::Schema(format!("{loc}: `result` is reserved")));
            }
            if !seen.insert(f.name.clone()) {
                return Err(SpecError::DuplicateName(format!("field {loc}")));
            }
            let ty = FieldType::parse(&f.ty).ok_or_else(|| SpecError::Schema(format!("{loc}: unknown type `{}`", f.ty)))?;
            check_type(&ty, &loc)?;
            if f.dont_ask && f.required {
                return Err(SpecError::Schema(format!("{loc}: a field cannot be both dont_ask and required")));
            }
            if f.name == "confirm" && ty != FieldType::Bool {
                return Err(SpecError::Schema(format!("{loc}: a field named `confirm` must be bool")));
            }
            let predicate_src = opt_src(&f.predicate);
            let predicate = predicate_src
                .as_deref()
                .map(parse_expr)
                .transpose()
                .map_err(|e| SpecError::BadExpression { location: format!("{loc} predicate"), source: e })?;
            let actions_src = opt_src(&f.actions);
            let actions = actions_src
                .as_deref()
                .map(parse_actions)
                .transpose()
                .map_err(|e| SpecError::BadExpression { location: format!("{loc} actions"), source: e })?;
            fields.push(FieldSpec {
                name: f.name.clone(),
                predicate,
                predicate_src,
                is_input: f.input,
                field_type: ty,
                description: f.description.clone(),
                dont_ask: f.dont_ask,
                required: f.required,
                confirm: f.confirm,
                actions,
                actions_src,
            });
        }
        let predicate_src = opt_src(&w.predicate);
        let predicate = predicate_src
            .as_deref()
            .map(parse_expr)
            .transpose()
            .map_err(|e| SpecError::BadExpression { location: format!("{} predicate", w.name), source: e })?;
        let ws_action_src = opt_src(&w.actions);
        let ws_action = ws_action_src
            .as_deref()
            .map(parse_actions)
            .transpose()
            .map_err(|e| SpecError::BadExpression { location: format!("{} actions", w.name), source: e })?;
        worksheets.push(WorksheetSpec {
            name: w.name.clone(),
            predicate,
            predicate_src,
            fields,
            ws_action,
            ws_action_src,
            kind: WorksheetKind::Task,
        });
    }

    // Acyclic ws references.
    let edges: HashMap<&str, Vec<&str>> = worksheets
        .iter()
        .map(|w| {
            let out = w
                .fields
                .iter()
                .filter_map(|f| match &f.field_type {
                    FieldType::Ws(n) => Some(n.as_str()),
                    _ => None,
                })
                .collect();
            (w.name.as_str(), out)
        })
        .collect();
    fn visit<'a>(
        n: &'a str,
        edges: &HashMap<&'a str, Vec<&'a str>>,
        color: &mut HashMap<&'a str, u8>,
        stack: &mut Vec<&'a str>,
    ) -> Result<(), SpecError> {
        match color.get(n) {
            Some(2) => return Ok(()),
            Some(1) => {
                let start = stack.iter().position(|s| *s == n).unwrap_or(0);
                let mut cyc: Vec<&str> = stack[start..].to_vec();
                cyc.push(n);
                return Err(SpecError::Cycle(cyc.join(" -> ")));
            }
            _ => {}
        }
        color.insert(n, 1);
        stack.push(n);
        for m in edges.get(n).into_iter().flatten() {
            visit(m, edges, color, stack)?;
        }
        stack.pop();
        color.insert(n, 2);
        Ok(())
    }
    let mut color = HashMap::new();
    for w in &worksheets {
        visit(&w.name, &edges, &mut color, &mut Vec::new())?;
    }

    let refd: BTreeSet<&str> = edges.values().flatten().copied().collect();
    let tops: Vec<&str> = worksheets
        .iter()
        .filter(|w| w.predicate.is_none() && !refd.contains(w.name.as_str()))
        .map(|w| w.name.as_str())
        .collect();
    if tops.len() != 1 {
        return Err(SpecError::Schema(format!(
            "exactly one top-level worksheet (no predicate, not nested) is required, found {}: [{}]",
            tops.len(),
            tops.join(", ")
        )));
    }

    let mut all = worksheets.clone();
    all.extend(kb_schemas.iter().map(synthesize_kb_worksheet));

    // Semantic pass over expressions.
    for w in &worksheets {
        let ancestors = ancestors_of(&w.name, &worksheets);
        let env = Env { ws: w, ancestors, all: &all, enums: &doc.enums, apis: &apis };
        let bad = |location: String| move |e| SpecError::BadExpression { location, source: e };
        if let Some(p) = &w.predicate {
            check_predicate(p, &env).map_err(bad(format!("{} predicate", w.name)))?;
        }
        if let Some(a) = &w.ws_action {
            check_actions(a, &env).map_err(bad(format!("{} actions", w.name)))?;
        }
        for f in &w.fields {
            if let Some(p) = &f.predicate {
                check_predicate(p, &env).map_err(bad(format!("{}.{} predicate", w.name, f.name)))?;
            }
            if let Some(a) = &f.actions {
                check_actions(a, &env).map_err(bad(format!("{}.{} actions", w.name, f.name)))?;
            }
        }
    }

    Ok(TaskSpec {
        name: doc.name.clone(),
        greeting: doc.greeting.clone().filter(|g| !g.trim().is_empty()),
        worksheets: all,
        kb_schemas,
        api_registry: apis,
        enum_domains: doc.enums.clone(),
    })
}

/// Worksheets that (transitively) embed `name` through ws-typed fields, nearest first.
fn ancestors_of<'a>(name: &str, worksheets: &'a [WorksheetSpec]) -> Vec<&'a WorksheetSpec> {
    let mut out: Vec<&WorksheetSpec> = Vec::new();
    let mut frontier = vec![name.to_string()];
    while let Some(n) = frontier.pop() {
        for w in worksheets {
            let embeds = w.fields.iter().any(|f| f.field_type == FieldType::Ws(n.clone()));
            if embeds && !out.iter().any(|o| o.name == w.name) {
                out.push(w);
                frontier.insert(0, w.name.clone());
            }
        }
    }
    out
}

// ---------------------------------------------------------------- prompt rendering

pub fn render_for_prompt(spec: &TaskSpec) -> String {
    let mut out = String::new();
    for w in spec.task_worksheets() {
        let sig: Vec<String> = w.fields.iter().map(|f| format!("{}: {}", f.name, signature_type(&f.field_type))).collect();
        out.push_str(&format!("{}({})\n", w.name, sig.join(", ")));
        for f in &w.fields {
            let desc = spec.field_prompt_desc(f);
            if desc.is_empty() {
                out.push_str(&format!("    {}\n", f.name));
            } else {
                out.push_str(&format!("    {}: {}\n", f.name, desc));
            }
        }
    }
    if !spec.kb_schemas.is_empty() {
        out.push_str("answer(query: str)\n");
        out.push_str("    query: A self-contained question over the databases below\n");
        out.push_str("Databases:\n");
        for k in &spec.kb_schemas {
            let cols: Vec<String> = k.columns.iter().map(|(n, t)| format!("{n}: {}", t.name())).collect();
            out.push_str(&format!("    {}({})\n", k.name, cols.join(", ")));
        }
    }
    out
}

fn signature_type(t: &FieldType) -> String {
    match t {
        FieldType::Ws(w) => w.clone(),
        FieldType::Kb(k) => format!("answer over {k}"),
        FieldType::Enum(d) => format!("Enum[{d}]"),
        other => other.to_string(),
    }
}

// ---------------------------------------------------------------- sheet import

pub const SHEET_HEADER: [&str; 9] =
    ["predicate", "input", "type", "name", "description", "dont_ask", "required", "confirmation", "actions"];

fn sheet_bool(cell: &str, default: bool, line: usize) -> Result<bool, SheetError> {
    match cell.trim().to_lowercase().as_str() {
        "" => Ok(default),
        "true" | "yes" | "1" | "y" => Ok(true),
        "false" | "no" | "0" | "n" => Ok(false),
        other => Err(SheetError::BadRow { line, message: format!("expected boolean, found `{other}`") }),
    }
}

fn norm_ws_name(s: &str) -> String {
    s.to_lowercase().replace('_', "")
}

/// Field name to worksheet-name key: drop `_details` and a trailing `_<digits>`.
fn field_to_ws_key(field: &str) -> String {
    let mut f = field.to_string();
    if let Some(s) = f.strip_suffix("_details") {
        f = s.to_string();
    }
    if let Some((head, tail)) = f.rsplit_once('_') {
        if !tail.is_empty() && tail.chars().all(|c| c.is_ascii_digit()) {
            f = head.to_string();
        }
    }
    norm_ws_name(&f)
}

enum Section {
    None,
    Ws(usize),
    Kb(usize),
    Api(usize),
}

/// Convert sheet rows (CSV with the column header) into a canonical document.
pub fn import_sheet<R: std::io::Read>(reader: R) -> Result<SpecDoc, SheetError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if header != SHEET_HEADER {
        return Err(SheetError::HeaderMismatch { expected: SHEET_HEADER.join(","), found: header.join(",") });
    }
    let mut doc = SpecDoc::default();
    let mut section = Section::None;
    // (worksheet index, field index, raw type, line) for types resolved after all worksheets are known.
    let mut pending: Vec<(usize, usize, String, usize)> = Vec::new();

    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let cell = |k: usize| rec.get(k).unwrap_or("").trim().to_string();
        if rec.iter().all(|c| c.trim().is_empty()) {
            continue;
        }
        let first = cell(0);
        let err = |m: &str| SheetError::BadRow { line, message: m.to_string() };
        if let Some(name) = first.strip_prefix("SPEC:") {
            doc.name = name.trim().to_string();
            section = Section::None;
        } else if let Some(text) = first.strip_prefix("GREETING:") {
            doc.greeting = Some(text.trim().to_string());
        } else if let Some(name) = first.strip_prefix("ENUM:") {
            let values: Vec<String> =
                cell(1).split('|').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
            doc.enums.insert(name.trim().to_string(), values);
            section = Section::None;
        } else if let Some(name) = first.strip_prefix("WS:") {
            doc.worksheets.push(WorksheetDoc {
                name: name.trim().to_string(),
                predicate: Some(cell(1)).filter(|s| !s.is_empty()),
                fields: Vec::new(),
                actions: Some(cell(2)).filter(|s| !s.is_empty()),
            });
            section = Section::Ws(doc.worksheets.len() - 1);
        } else if let Some(name) = first.strip_prefix("KB:") {
            doc.kb_schemas.push(KbSchemaDoc { name: name.trim().to_string(), columns: Vec::new(), source: cell(1) });
            section = Section::Kb(doc.kb_schemas.len() - 1);
        } else if let Some(name) = first.strip_prefix("API:") {
            let binding_cell = cell(1);
            let binding = if let Some(f) = binding_cell.strip_prefix("host:") {
                Binding::Host { function: f.trim().to_string() }
            } else {
                let (fail, json) = if let Some(j) = binding_cell.strip_prefix("stub-fail:") {
                    (true, j)
                } else if let Some(j) = binding_cell.strip_prefix("stub:") {
                    (false, j)
                } else {
                    return Err(err("api binding must be `host:<fn>`, `stub:<json>` or `stub-fail:<json>`"));
                };
                let result = serde_json::from_str(json).map_err(|e| err(&format!("stub template: {e}")))?;
                Binding::Stub { result, fail }
            };
            let returns = Some(cell(2)).filter(|s| !s.is_empty()).unwrap_or_else(|| "record".into());
            doc.apis.push(ApiDoc { name: name.trim().to_string(), params: Vec::new(), returns, binding });
            section = Section::Api(doc.apis.len() - 1);
        } else {
            match section {
                Section::None => return Err(err("field row outside any WS/KB/API section")),
                Section::Kb(k) => doc.kb_schemas[k].columns.push(ColumnDoc { name: cell(3), ty: cell(2) }),
                Section::Api(a) => {
                    let ty = cell(2);
                    let canon = sheet_scalar_type(&ty).ok_or(SheetError::UnknownType { line, ty: ty.clone() })?;
                    doc.apis[a].params.push(ParamDoc { name: cell(3), ty: canon });
                }
                Section::Ws(w) => {
                    let raw_ty = cell(2);
                    let field = FieldDoc {
                        name: cell(3),
                        ty: String::new(),
                        predicate: Some(first.clone()).filter(|s| !s.is_empty()),
                        input: sheet_bool(&cell(1), true, line)?,
                        description: cell(4),
                        dont_ask: sheet_bool(&cell(5), false, line)?,
                        required: sheet_bool(&cell(6), false, line)?,
                        confirm: sheet_bool(&cell(7), false, line)?,
                        actions: Some(cell(8)).filter(|s| !s.is_empty()),
                    };
                    doc.worksheets[w].fields.push(field);
                    pending.push((w, doc.worksheets[w].fields.len() - 1, raw_ty, line));
                }
            }
        }
    }

    let ws_keys: HashMap<String, String> =
        doc.worksheets.iter().map(|w| (norm_ws_name(&w.name), w.name.clone())).collect();
    for (w, f, raw, line) in pending {
        let field_name = doc.worksheets[w].fields[f].name.clone();
        let ty = sheet_field_type(&raw, &field_name, &ws_keys).ok_or(SheetError::UnknownType { line, ty: raw })?;
        doc.worksheets[w].fields[f].ty = ty;
    }
    Ok(doc)
}

fn sheet_scalar_type(raw: &str) -> Option<String> {
    let t = raw.trim();
    let lower = t.to_lowercase();
    let simple = match lower.as_str() {
        "str" | "string" | "text" => Some("str"),
        "int" | "integer" => Some("int"),
        "float" | "number" => Some("float"),
        "bool" | "boolean" => Some("bool"),
        "date" => Some("date"),
        "time" => Some("time"),
        _ => None,
    };
    if let Some(s) = simple {
        return Some(s.to_string());
    }
    for (prefix, canon) in [("enum:", "enum"), ("kb:", "kb")] {
        if lower.starts_with(prefix) {
            let arg = t[prefix.len()..].trim();
            return is_ident(arg).then(|| format!("{canon}({arg})"));
        }
    }
    FieldType::parse(t).filter(|ft| !matches!(ft, FieldType::Ws(_))).map(|ft| ft.to_string())
}

fn sheet_field_type(raw: &str, field: &str, ws_keys: &HashMap<String, String>) -> Option<String> {
    let t = raw.trim();
    if t.eq_ignore_ascii_case("ws") {
        return ws_keys.get(&field_to_ws_key(field)).map(|w| format!("ws({w})"));
    }
    if t.len() > 3 && t[..3].eq_ignore_ascii_case("ws:") {
        let arg = t[3..].trim();
        return is_ident(arg).then(|| format!("ws({arg})"));
    }
    if let Some(FieldType::Ws(w)) = FieldType::parse(t) {
        return Some(format!("ws({w})"));
    }
    sheet_scalar_type(t)
}

#[derive(Debug, thiserror::Error)]
pub enum SpecFileError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Sheet { path: String, source: SheetError },
    #[error("{path}: {source}")]
    Spec { path: String, source: SpecError },
}

/// Load a spec from a `.json` document or a `.csv` sheet.
pub fn load_spec_file(path: &std::path::Path) -> Result<TaskSpec, SpecFileError> {
    let p = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|source| SpecFileError::Io { path: p.clone(), source })?;
    let is_csv = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    let doc = if is_csv {
        import_sheet(text.as_bytes()).map_err(|source| SpecFileError::Sheet { path: p.clone(), source })?
    } else {
        serde_json::from_str(&text).map_err(|e| SpecFileError::Spec { path: p.clone(), source: SpecError::Json(e.to_string()) })?
    };
    load_spec(&doc).map_err(|source| SpecFileError::Spec { path: p, source })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal(fields: &str) -> String {
        format!(r#"{{"name":"t","worksheets":[{{"name":"Main","fields":[{fields}]}}]}}"#)
    }

    #[test]
    fn zero_worksheets_is_schema_error() {
        let e = load_spec_str(r#"{"name":"t","worksheets":[]}"#).unwrap_err();
        assert!(matches!(e, SpecError::Schema(_)), "{e}");
    }

    #[test]
    fn self_reference_is_cycle() {
        let json = r#"{"name":"t","worksheets":[
            {"name":"Main","fields":[{"name":"b","type":"ws(B)"}]},
            {"name":"B","predicate":"true","fields":[{"name":"a","type":"ws(B)"}]}]}"#;
        let e = load_spec_str(json).unwrap_err();
        assert!(matches!(e, SpecError::Cycle(ref c) if c.contains("B -> B")), "{e}");
    }

    #[test]
    fn dont_ask_required_rejected() {
        let e = load_spec_str(&minimal(r#"{"name":"x","type":"str","dont_ask":true,"required":true}"#)).unwrap_err();
        assert!(matches!(e, SpecError::Schema(_)));
    }

    #[test]
    fn duplicate_field_rejected() {
        let e = load_spec_str(&minimal(r#"{"name":"x","type":"str"},{"name":"x","type":"int"}"#)).unwrap_err();
        assert!(matches!(e, SpecError::DuplicateName(_)));
    }

    #[test]
    fn bad_predicate_is_bad_expression() {
        let e = load_spec_str(&minimal(r#"{"name":"x","type":"str","predicate":"y =="}"#)).unwrap_err();
        assert!(matches!(e, SpecError::BadExpression { .. }));
        let e = load_spec_str(&minimal(r#"{"name":"x","type":"str","predicate":"nope == 1"}"#)).unwrap_err();
        assert!(matches!(e, SpecError::BadExpression { source: ExprError::UnknownReference(_), .. }));
        let e = load_spec_str(&minimal(r#"{"name":"x","type":"int","predicate":"x == \"a\""}"#)).unwrap_err();
        assert!(matches!(e, SpecError::BadExpression { source: ExprError::TypeMismatch(_), .. }));
    }

    #[test]
    fn empty_enum_rejected() {
        let json = r#"{"name":"t","worksheets":[{"name":"Main","fields":[{"name":"x","type":"enum(e)"}]}],"enums":{"e":[]}}"#;
        assert!(matches!(load_spec_str(json).unwrap_err(), SpecError::Schema(_)));
    }

    #[test]
    fn enum_literal_outside_domain_rejected() {
        let json = r#"{"name":"t","worksheets":[{"name":"Main","fields":[
            {"name":"x","type":"enum(e)"},{"name":"y","type":"str","predicate":"x == \"C\""}]}],"enums":{"e":["A","B"]}}"#;
        let e = load_spec_str(json).unwrap_err();
        assert!(matches!(e, SpecError::BadExpression { source: ExprError::TypeMismatch(_), .. }), "{e}");
    }

    #[test]
    fn kb_worksheets_have_three_fields_and_synthesis_is_idempotent() {
        let json = r#"{"name":"t","worksheets":[{"name":"Main","fields":[{"name":"r","type":"kb(rest)"}]}],
            "kb_schemas":[{"name":"rest","columns":[{"name":"name","type":"str"}],"source":"rest.csv"}]}"#;
        let spec = load_spec_str(json).unwrap();
        let kb = spec.worksheet("rest").unwrap();
        assert_eq!(kb.kind, WorksheetKind::Kb);
        let names: Vec<&str> = kb.fields.iter().map(|f| f.name.as_str()).collect();
        assert_eq!(names, KB_FIELDS);
        assert_eq!(synthesize_kb_worksheet(&spec.kb_schemas[0]), *kb);
    }

    #[test]
    fn ancestor_references_resolve() {
        let json = r#"{"name":"t","worksheets":[
            {"name":"Main","fields":[{"name":"r","type":"str"},{"name":"info","type":"ws(Info)"}]},
            {"name":"Info","predicate":"is_filled(r)","fields":[{"name":"n","type":"str"}]}]}"#;
        let spec = load_spec_str(json).unwrap();
        assert_eq!(spec.top_level().name, "Main");
        assert_eq!(spec.stats().predicates, 1);
    }

    #[test]
    fn assignment_outside_enclosing_worksheet_rejected() {
        let json = r#"{"name":"t","worksheets":[
            {"name":"Main","fields":[{"name":"r","type":"str"},{"name":"info","type":"ws(Info)"}]},
            {"name":"Info","fields":[{"name":"n","type":"str","actions":"r = \"x\""}]}]}"#;
        let e = load_spec_str(json).unwrap_err();
        assert!(matches!(e, SpecError::BadExpression { source: ExprError::BadAssignment(_), .. }), "{e}");
    }

    #[test]
    fn unknown_api_and_arity() {
        let base = |act: &str| {
            format!(
                r#"{{"name":"t","worksheets":[{{"name":"Main","fields":[{{"name":"x","type":"str"}}],"actions":"{act}"}}],
                "apis":[{{"name":"go","params":[{{"name":"x","type":"str"}}],"returns":"record","binding":{{"kind":"stub","result":{{"ok":true}}}}}}]}}"#
            )
        };
        assert!(load_spec_str(&base("call go(x=x)")).is_ok());
        let e = load_spec_str(&base("call nope(x=x)")).unwrap_err();
        assert!(matches!(e, SpecError::BadExpression { source: ExprError::UnknownApi(_), .. }));
        let e = load_spec_str(&base("call go()")).unwrap_err();
        assert!(matches!(e, SpecError::BadExpression { source: ExprError::ArityMismatch { .. }, .. }));
    }

    #[test]
    fn two_top_levels_rejected() {
        let json = r#"{"name":"t","worksheets":[{"name":"A","fields":[]},{"name":"B","fields":[]}]}"#;
        assert!(matches!(load_spec_str(json).unwrap_err(), SpecError::Schema(_)));
    }

    #[test]
    fn one_empty_worksheet_renders_one_signature() {
        let spec = load_spec_str(r#"{"name":"t","worksheets":[{"name":"Main"}]}"#).unwrap();
        assert_eq!(render_for_prompt(&spec), "Main()\n");
    }

    #[test]
    fn header_mismatch() {
        let e = import_sheet("predicate,input,type\n".as_bytes()).unwrap_err();
        assert!(matches!(e, SheetError::HeaderMismatch { .. }));
    }

    #[test]
    fn empty_sheet_yields_no_worksheets_then_schema_error() {
        let doc = import_sheet(format!("{}\nSPEC:t\n", SHEET_HEADER.join(",")).as_bytes()).unwrap();
        assert!(doc.worksheets.is_empty());
        assert!(matches!(load_spec(&doc).unwrap_err(), SpecError::Schema(_)));
    }

    #[test]
    fn ws_type_resolves_by_field_name() {
        let csv = format!(
            "{}\nSPEC:t\nWS:Main,,\n,,WS,course_0_details,,,,,\n,,ws:Course,other,,,,,\nWS:Course,,\n,,str,course_name,,,,,\n",
            SHEET_HEADER.join(",")
        );
        let doc = import_sheet(csv.as_bytes()).unwrap();
        assert_eq!(doc.worksheets[0].fields[0].ty, "ws(Course)");
        assert_eq!(doc.worksheets[0].fields[1].ty, "ws(Course)");
    }

    #[test]
    fn unknown_sheet_type() {
        let csv = format!("{}\nSPEC:t\nWS:Main,,\n,,blob,x,,,,,\n", SHEET_HEADER.join(","));
        assert!(matches!(import_sheet(csv.as_bytes()).unwrap_err(), SheetError::UnknownType { line: 4, .. }));
        let csv = format!("{}\nSPEC:t\nWS:Main,,\n,,WS,nothing,,,,,\n", SHEET_HEADER.join(","));
        assert!(matches!(import_sheet(csv.as_bytes()).unwrap_err(), SheetError::UnknownType { .. }));
    }

    #[test]
    fn field_type_display_round_trips() {
        for s in ["str", "int", "float", "bool", "date", "time", "enum(e)", "ws(A)", "kb(r)"] {
            assert_eq!(FieldType::parse(s).unwrap().to_string(), s);
        }
        assert_eq!(FieldType::parse("ws()"), None);
    }
}
