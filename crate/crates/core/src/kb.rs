//! Knowledge backend: typed tables loaded from CSV, a small structured query language,
//! and translators from natural-language questions to queries.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::io::Read;
use std::path::Path;

use crate::lexer::{float_text, quote, tokenize, Tok};
use crate::llm::{BackendError, LlmClient};
use crate::spec::{ColumnType, KbSchema, TaskSpec};
use crate::value::{parse_date, Value};

#[derive(Debug, Clone, PartialEq, thiserror::Error, Serialize, Deserialize)]
pub enum KbError {
    #[error("unknown table `{0}`")]
    UnknownTable(String),
    #[error("unknown column `{column}` in table `{table}`")]
    UnknownColumn { table: String, column: String },
    #[error("type error on column `{column}`: {message}")]
    TypeError { column: String, message: String },
    #[error("line {line}, column `{column}`: {message}")]
    Parse { line: usize, column: String, message: String },
    #[error("header mismatch: {0}")]
    Header(String),
    #[error("query syntax: {0}")]
    Syntax(String),
    #[error("{0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FilterOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
    /// `'v' = ANY (col)` over a list column.
    AnyContains,
}

impl FilterOp {
    fn sql(self) -> &'static str {
        match self {
            FilterOp::Eq | FilterOp::AnyContains => "=",
            FilterOp::Ne => "!=",
            FilterOp::Lt => "<",
            FilterOp::Le => "<=",
            FilterOp::Gt => ">",
            FilterOp::Ge => ">=",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Filter {
    pub column: String,
    pub op: FilterOp,
    pub value: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuredQuery {
    pub table: String,
    /// `None` selects every column.
    pub projection: Option<Vec<String>>,
    pub filters: Vec<Filter>,
    pub limit: Option<usize>,
}

fn sql_literal(v: &Value) -> String {
    match v {
        Value::Str(s) => quote(s, '\''),
        Value::Int(i) => i.to_string(),
        Value::Float(x) => float_text(*x),
        Value::Bool(b) => if *b { "TRUE" } else { "FALSE" }.into(),
        Value::Date(d) => format!("'{}'", d.format("%Y-%m-%d")),
        other => quote(&other.to_string(), '\''),
    }
}

impl fmt::Display for StructuredQuery {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let cols = match &self.projection {
            None => "*".to_string(),
            Some(c) => c.join(", "),
        };
        write!(f, "SELECT {cols} FROM {}", self.table)?;
        for (i, flt) in self.filters.iter().enumerate() {
            f.write_str(if i == 0 { " WHERE " } else { " AND " })?;
            match flt.op {
                FilterOp::AnyContains => write!(f, "{} = ANY ({})", sql_literal(&flt.value), flt.column)?,
                op => write!(f, "{} {} {}", flt.column, op.sql(), sql_literal(&flt.value))?,
            }
        }
        if let Some(n) = self.limit {
            write!(f, " LIMIT {n}")?;
        }
        Ok(())
    }
}

struct QP {
    toks: Vec<Tok>,
    i: usize,
}

impl QP {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.i)
    }
    fn next(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.i).cloned();
        self.i += 1;
        t
    }
    fn keyword(&mut self, kw: &str) -> bool {
        if matches!(self.peek(), Some(Tok::Ident(s)) if s.eq_ignore_ascii_case(kw)) {
            self.i += 1;
            true
        } else {
            false
        }
    }
    fn ident(&mut self) -> Result<String, KbError> {
        match self.next() {
            Some(Tok::Ident(s)) => Ok(s),
            t => Err(KbError::Syntax(format!("expected a name, found {}", show(t.as_ref())))),
        }
    }
    fn expect(&mut self, t: Tok) -> Result<(), KbError> {
        match self.next() {
            Some(x) if x == t => Ok(()),
            x => Err(KbError::Syntax(format!("expected {t}, found {}", show(x.as_ref())))),
        }
    }
    fn literal(&mut self) -> Result<Value, KbError> {
        match self.next() {
            Some(Tok::Str(s)) => Ok(Value::Str(s)),
            Some(Tok::Int(i)) => i64::try_from(i).map(Value::Int).map_err(|_| KbError::Syntax("integer out of range".into())),
            Some(Tok::Float(x)) => Ok(Value::Float(x)),
            Some(Tok::Minus) => match self.next() {
                Some(Tok::Int(i)) => i64::try_from(-i).map(Value::Int).map_err(|_| KbError::Syntax("integer out of range".into())),
                Some(Tok::Float(x)) => Ok(Value::Float(-x)),
                t => Err(KbError::Syntax(format!("expected a number, found {}", show(t.as_ref())))),
            },
            Some(Tok::Ident(s)) if s.eq_ignore_ascii_case("true") => Ok(Value::Bool(true)),
            Some(Tok::Ident(s)) if s.eq_ignore_ascii_case("false") => Ok(Value::Bool(false)),
            t => Err(KbError::Syntax(format!("expected a literal, found {}", show(t.as_ref())))),
        }
    }
    fn op(&mut self) -> Result<FilterOp, KbError> {
        Ok(match self.next() {
            Some(Tok::Assign) | Some(Tok::Eq) => FilterOp::Eq,
            Some(Tok::Ne) => FilterOp::Ne,
            Some(Tok::Lt) => FilterOp::Lt,
            Some(Tok::Le) => FilterOp::Le,
            Some(Tok::Gt) => FilterOp::Gt,
            Some(Tok::Ge) => FilterOp::Ge,
            t => return Err(KbError::Syntax(format!("expected a comparison, found {}", show(t.as_ref())))),
        })
    }
    fn filter(&mut self) -> Result<Filter, KbError> {
        if matches!(self.peek(), Some(Tok::Ident(s)) if !s.eq_ignore_ascii_case("true") && !s.eq_ignore_ascii_case("false")) {
            let column = self.ident()?;
            let op = self.op()?;
            let value = self.literal()?;
            return Ok(Filter { column, op, value });
        }
        let value = self.literal()?;
        match self.op()? {
            FilterOp::Eq => {}
            _ => return Err(KbError::Syntax("only `=` may precede ANY".into())),
        }
        if !self.keyword("ANY") {
            return Err(KbError::Syntax("a literal on the left must be followed by `= ANY (column)`".into()));
        }
        self.expect(Tok::LParen)?;
        let column = self.ident()?;
        self.expect(Tok::RParen)?;
        Ok(Filter { column, op: FilterOp::AnyContains, value })
    }
}

fn show(t: Option<&Tok>) -> String {
    t.map_or_else(|| "end of query".into(), |t| t.to_string())
}

/// Parse the SQL-like surface form produced by `Display`.
pub fn parse_query(text: &str) -> Result<StructuredQuery, KbError> {
    let toks = tokenize(text.trim(), false).map_err(|e| KbError::Syntax(e.to_string()))?;
    let mut p = QP { toks: toks.into_iter().map(|s| s.tok).collect(), i: 0 };
    if !p.keyword("SELECT") {
        return Err(KbError::Syntax("query must start with SELECT".into()));
    }
    let projection = if p.peek() == Some(&Tok::Star) {
        p.next();
        None
    } else {
        let mut cols = vec![p.ident()?];
        while p.peek() == Some(&Tok::Comma) {
            p.next();
            cols.push(p.ident()?);
        }
        Some(cols)
    };
    if !p.keyword("FROM") {
        return Err(KbError::Syntax("expected FROM".into()));
    }
    let table = p.ident()?;
    let mut filters = Vec::new();
    if p.keyword("WHERE") {
        filters.push(p.filter()?);
        while p.keyword("AND") {
            filters.push(p.filter()?);
        }
    }
    let mut limit = None;
    if p.keyword("LIMIT") {
        match p.next() {
            Some(Tok::Int(n)) if n >= 0 => limit = Some(usize::try_from(n).map_err(|_| KbError::Syntax("limit too large".into()))?),
            t => return Err(KbError::Syntax(format!("expected a limit, found {}", show(t.as_ref())))),
        }
    }
    if p.peek() == Some(&Tok::Semi) {
        p.next();
    }
    if let Some(t) = p.peek() {
        return Err(KbError::Syntax(format!("unexpected {t}")));
    }
    Ok(StructuredQuery { table, projection, filters, limit })
}

fn type_err(column: &str, message: String) -> KbError {
    KbError::TypeError { column: column.to_string(), message }
}

/// Check a filter against its column type, coercing the literal where unambiguous.
fn check_filter(f: &Filter, ty: ColumnType) -> Result<Filter, KbError> {
    use ColumnType as C;
    let ordered = matches!(f.op, FilterOp::Lt | FilterOp::Le | FilterOp::Gt | FilterOp::Ge);
    if f.op == FilterOp::AnyContains {
        if ty != C::ListOfStr {
            return Err(type_err(&f.column, format!("ANY needs a list column, `{}` is {}", f.column, ty.name())));
        }
        return match &f.value {
            Value::Str(_) => Ok(f.clone()),
            v => Err(type_err(&f.column, format!("ANY needs a string, got {}", v.type_name()))),
        };
    }
    if ty == C::ListOfStr {
        return Err(type_err(&f.column, "list columns only support `'v' = ANY (column)`".into()));
    }
    if ordered && !matches!(ty, C::Int | C::Float | C::Date) {
        return Err(type_err(&f.column, format!("ordering is not defined on {}", ty.name())));
    }
    let value = match (ty, &f.value) {
        (C::Str | C::FreeText, Value::Str(_)) => f.value.clone(),
        (C::Int, Value::Int(_)) => f.value.clone(),
        (C::Int, Value::Float(x)) if x.fract() == 0.0 => Value::Int(*x as i64),
        (C::Float, Value::Float(_)) => f.value.clone(),
        (C::Float, Value::Int(i)) => Value::Float(*i as f64),
        (C::Bool, Value::Bool(_)) => f.value.clone(),
        (C::Date, Value::Date(_)) => f.value.clone(),
        (C::Date, Value::Str(s)) => {
            Value::Date(parse_date(s).ok_or_else(|| type_err(&f.column, format!("`{s}` is not a date")))?)
        }
        (ty, v) => return Err(type_err(&f.column, format!("{} literal against {} column", v.type_name(), ty.name()))),
    };
    Ok(Filter { column: f.column.clone(), op: f.op, value })
}

impl StructuredQuery {
    /// Validate against a schema; literal values come back coerced to column types.
    pub fn validate(&self, schema: &KbSchema) -> Result<StructuredQuery, KbError> {
        if schema.name != self.table {
            return Err(KbError::UnknownTable(self.table.clone()));
        }
        let col = |c: &str| {
            schema.column(c).ok_or_else(|| KbError::UnknownColumn { table: self.table.clone(), column: c.to_string() })
        };
        if let Some(p) = &self.projection {
            for c in p {
                col(c)?;
            }
        }
        let filters = self.filters.iter().map(|f| check_filter(f, col(&f.column)?)).collect::<Result<_, _>>()?;
        Ok(StructuredQuery { filters, ..self.clone() })
    }
}

// ---------------------------------------------------------------- tables

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub schema: KbSchema,
    /// `None` marks an empty cell.
    pub rows: Vec<Vec<Option<Value>>>,
}

fn parse_cell(raw: &str, ty: ColumnType) -> Result<Option<Value>, String> {
    if raw.is_empty() {
        return Ok(None);
    }
    let v = match ty {
        ColumnType::Str | ColumnType::FreeText => Value::Str(raw.to_string()),
        ColumnType::Int => Value::Int(raw.trim().parse().map_err(|_| format!("`{raw}` is not an integer"))?),
        ColumnType::Float => Value::Float(raw.trim().parse().map_err(|_| format!("`{raw}` is not a number"))?),
        ColumnType::Bool => match raw.trim().to_ascii_lowercase().as_str() {
            "true" => Value::Bool(true),
            "false" => Value::Bool(false),
            _ => return Err(format!("`{raw}` is not true/false")),
        },
        ColumnType::Date => Value::Date(parse_date(raw).ok_or_else(|| format!("`{raw}` is not a date"))?),
        ColumnType::ListOfStr => Value::List(
            raw.split('|').map(str::trim).filter(|s| !s.is_empty()).map(Value::str).collect(),
        ),
    };
    Ok(Some(v))
}

/// Load a CSV with a typed `name:type` header that must match the schema column for column.
pub fn load_table<R: Read>(schema: &KbSchema, source: R) -> Result<Table, KbError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(source);
    let header = rdr.headers().map_err(|e| KbError::Io(e.to_string()))?.clone();
    let expected: Vec<String> = schema.columns.iter().map(|(n, t)| format!("{n}:{}", t.name())).collect();
    let got: Vec<String> = header.iter().map(|h| h.trim().to_string()).collect();
    if got != expected {
        return Err(KbError::Header(format!("expected [{}], found [{}]", expected.join(", "), got.join(", "))));
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| KbError::Parse { line, column: String::new(), message: e.to_string() })?;
        if rec.len() != schema.columns.len() {
            return Err(KbError::Parse {
                line,
                column: String::new(),
                message: format!("expected {} cells, found {}", schema.columns.len(), rec.len()),
            });
        }
        let row = rec
            .iter()
            .zip(&schema.columns)
            .map(|(cell, (name, ty))| parse_cell(cell, *ty).map_err(|message| KbError::Parse { line, column: name.clone(), message }))
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(row);
    }
    Ok(Table { schema: schema.clone(), rows })
}

fn cell_eq(cell: &Value, lit: &Value) -> bool {
    match (cell, lit) {
        (Value::Str(a), Value::Str(b)) => a.to_lowercase() == b.to_lowercase(),
        (Value::Int(a), Value::Float(b)) | (Value::Float(b), Value::Int(a)) => (*a as f64) == *b,
        _ => cell == lit,
    }
}

fn matches(cell: Option<&Value>, f: &Filter) -> bool {
    let Some(cell) = cell else { return false };
    match f.op {
        FilterOp::Eq => cell_eq(cell, &f.value),
        FilterOp::Ne => !cell_eq(cell, &f.value),
        FilterOp::AnyContains => match cell {
            Value::List(items) => items.iter().any(|x| cell_eq(x, &f.value)),
            _ => false,
        },
        op => match crate::value::compare(cell, &f.value) {
            Some(o) => match op {
                FilterOp::Lt => o.is_lt(),
                FilterOp::Le => o.is_le(),
                FilterOp::Gt => o.is_gt(),
                FilterOp::Ge => o.is_ge(),
                _ => unreachable!(),
            },
            None => false,
        },
    }
}

impl Table {
    /// Rows matching every filter, in source order, projected and limited.
    pub fn execute(&self, q: &StructuredQuery) -> Result<Vec<Value>, KbError> {
        let q = q.validate(&self.schema)?;
        let idx = |c: &str| self.schema.columns.iter().position(|(n, _)| n == c).expect("validated");
        let filters: Vec<(usize, &Filter)> = q.filters.iter().map(|f| (idx(&f.column), f)).collect();
        let cols: Vec<usize> = match &q.projection {
            None => (0..self.schema.columns.len()).collect(),
            Some(p) => p.iter().map(|c| idx(c)).collect(),
        };
        let mut out = Vec::new();
        for row in &self.rows {
            if q.limit.is_some_and(|n| out.len() >= n) {
                break;
            }
            if filters.iter().all(|(i, f)| matches(row[*i].as_ref(), f)) {
                let rec = cols
                    .iter()
                    .filter_map(|&i| row[i].clone().map(|v| (self.schema.columns[i].0.clone(), v)))
                    .collect();
                out.push(Value::Record(rec));
            }
        }
        Ok(out)
    }
}

/// Immutable set of loaded tables.
#[derive(Debug, Clone, Default)]
pub struct KbStore {
    pub tables: BTreeMap<String, Table>,
}

impl KbStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, t: Table) {
        self.tables.insert(t.schema.name.clone(), t);
    }

    /// Load every schema of the spec from `dir`; sources are relative file names.
    pub fn load_dir(spec: &TaskSpec, dir: &Path) -> Result<KbStore, KbError> {
        let mut store = KbStore::new();
        for schema in &spec.kb_schemas {
            let path = dir.join(&schema.source);
            let f = std::fs::File::open(&path).map_err(|e| KbError::Io(format!("{}: {e}", path.display())))?;
            let t = load_table(schema, f).map_err(|e| match e {
                KbError::Parse { line, column, message } => {
                    KbError::Parse { line, column, message: format!("{}: {message}", path.display()) }
                }
                other => other,
            })?;
            store.insert(t);
        }
        Ok(store)
    }

    pub fn execute(&self, q: &StructuredQuery) -> Result<Vec<Value>, KbError> {
        self.tables.get(&q.table).ok_or_else(|| KbError::UnknownTable(q.table.clone()))?.execute(q)
    }
}

// ---------------------------------------------------------------- translation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Translation {
    /// `missing` lists parameters the question leaves open; execution waits for them.
    Query { query: StructuredQuery, missing: Vec<String> },
    NoAnswer,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error, Serialize, Deserialize)]
pub enum TranslateError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("translator produced an invalid query: {0}")]
    Invalid(String),
}

pub trait Translator: Send + Sync {
    /// Raw translation; callers validate via [`translate`].
    fn translate_raw(&self, question: &str, spec: &TaskSpec) -> Result<Translation, TranslateError>;
}

/// Translate and validate against the schemas of `spec`.
pub fn translate(question: &str, spec: &TaskSpec, t: &dyn Translator) -> Result<Translation, TranslateError> {
    match t.translate_raw(question, spec)? {
        Translation::NoAnswer => Ok(Translation::NoAnswer),
        Translation::Query { query, missing } => {
            let schema = spec.kb_schema(&query.table).ok_or_else(|| TranslateError::Invalid(format!("unknown table `{}`", query.table)))?;
            let query = query.validate(schema).map_err(|e| TranslateError::Invalid(e.to_string()))?;
            Ok(Translation::Query { query, missing })
        }
    }
}

/// Lookup key for questions: lowercase, single spaces, no trailing punctuation.
pub fn normalize_question(q: &str) -> String {
    let words: Vec<&str> = q.split_whitespace().collect();
    words.join(" ").to_lowercase().trim_end_matches(['?', '.', '!']).trim_end().to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranslationEntry {
    pub question: String,
    /// `None` means the question cannot be grounded.
    pub query: Option<String>,
    #[serde(default)]
    pub missing: Vec<String>,
}

/// Exact-match (after normalization) lookup table.
#[derive(Debug, Clone, Default)]
pub struct TableTranslator {
    entries: BTreeMap<String, (Option<String>, Vec<String>)>,
}

impl TableTranslator {
    pub fn new(entries: Vec<TranslationEntry>) -> Self {
        let entries = entries.into_iter().map(|e| (normalize_question(&e.question), (e.query, e.missing))).collect();
        TableTranslator { entries }
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        Ok(Self::new(serde_json::from_str(text)?))
    }
}

impl Translator for TableTranslator {
    fn translate_raw(&self, question: &str, _spec: &TaskSpec) -> Result<Translation, TranslateError> {
        match self.entries.get(&normalize_question(question)) {
            Some((Some(q), missing)) => {
                let query = parse_query(q).map_err(|e| TranslateError::Invalid(e.to_string()))?;
                Ok(Translation::Query { query, missing: missing.clone() })
            }
            _ => Ok(Translation::NoAnswer),
        }
    }
}

pub struct LlmTranslator {
    pub client: LlmClient,
}

pub fn translator_system_prompt(spec: &TaskSpec) -> String {
    let mut s = String::from(
        "Translate the user's question into one SQL query over the tables below.\n\
Use only: SELECT <columns or *> FROM <table> WHERE <col> <op> <literal> AND ... LIMIT <n>.\n\
For list columns write '<value>' = ANY (<column>).\n\
Reply with the query only. If the question cannot be answered from these tables, reply NONE.\n\nTables:\n",
    );
    for k in &spec.kb_schemas {
        let cols: Vec<String> = k.columns.iter().map(|(n, t)| format!("{n} {}", t.name())).collect();
        s.push_str(&format!("{}({})\n", k.name, cols.join(", ")));
    }
    s
}

impl Translator for LlmTranslator {
    fn translate_raw(&self, question: &str, spec: &TaskSpec) -> Result<Translation, TranslateError> {
        let raw = self.client.chat(&translator_system_prompt(spec), question)?;
        let text: String = raw.lines().filter(|l| !l.trim_start().starts_with("```")).collect::<Vec<_>>().join(" ");
        let text = text.trim();
        if text.eq_ignore_ascii_case("none") {
            return Ok(Translation::NoAnswer);
        }
        let query = parse_query(text).map_err(|e| TranslateError::Invalid(e.to_string()))?;
        Ok(Translation::Query { query, missing: vec![] })
    }
}
