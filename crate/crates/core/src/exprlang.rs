//! Predicate and action mini-language: parser, printer, checker and evaluator.

use chrono::{NaiveDate, NaiveTime};
use indexmap::IndexMap;
use std::fmt::Write as _;

use crate::lexer::{float_text, quote, tokenize, Spanned, Tok};
use crate::spec::FieldType;
use crate::value::{compare, parse_date, parse_time, values_equal, Value};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ExprError {
    #[error("syntax error at offset {pos}: {message}")]
    Syntax { pos: usize, message: String },
    #[error("unknown reference `{0}`")]
    UnknownReference(String),
    #[error("type mismatch: {0}")]
    TypeMismatch(String),
    #[error("unknown api `{0}`")]
    UnknownApi(String),
    #[error("api `{api}` expects parameters ({expected}), got ({got})")]
    ArityMismatch { api: String, expected: String, got: String },
    #[error("unknown worksheet `{0}`")]
    UnknownWorksheet(String),
    #[error("cannot assign `{0}`: not a field of the enclosing worksheet")]
    BadAssignment(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Literal {
    Str(String),
    Int(i64),
    Float(f64),
    Bool(bool),
    Date(NaiveDate),
    Time(NaiveTime),
}

impl Literal {
    pub fn to_value(&self) -> Value {
        match self {
            Literal::Str(s) => Value::Str(s.clone()),
            Literal::Int(i) => Value::Int(*i),
            Literal::Float(x) => Value::Float(*x),
            Literal::Bool(b) => Value::Bool(*b),
            Literal::Date(d) => Value::Date(*d),
            Literal::Time(t) => Value::Time(*t),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl CmpOp {
    pub fn symbol(self) -> &'static str {
        match self {
            CmpOp::Eq => "==",
            CmpOp::Ne => "!=",
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Builtin {
    IsFilled,
    IsRefused,
    Len,
    Contains,
}

impl Builtin {
    pub fn name(self) -> &'static str {
        match self {
            Builtin::IsFilled => "is_filled",
            Builtin::IsRefused => "is_refused",
            Builtin::Len => "len",
            Builtin::Contains => "contains",
        }
    }

    fn from_name(s: &str) -> Option<Builtin> {
        Some(match s {
            "is_filled" => Builtin::IsFilled,
            "is_refused" => Builtin::IsRefused,
            "len" => Builtin::Len,
            "contains" => Builtin::Contains,
            _ => return None,
        })
    }

    fn arity(self) -> usize {
        match self {
            Builtin::Contains => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Lit(Literal),
    Path(Vec<String>),
    Not(Box<Expr>),
    And(Box<Expr>, Box<Expr>),
    Or(Box<Expr>, Box<Expr>),
    Cmp(CmpOp, Box<Expr>, Box<Expr>),
    Call(Builtin, Vec<Expr>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Stmt {
    Say(Expr),
    Propose { ws: String, args: Vec<(String, Expr)> },
    Call { api: String, args: Vec<(String, Expr)>, target: Option<String> },
    Assign { field: String, value: Expr },
    If { cond: Expr, then: Vec<Stmt>, els: Vec<Stmt> },
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ActionBlock {
    pub stmts: Vec<Stmt>,
}

impl ActionBlock {
    pub fn is_empty(&self) -> bool {
        self.stmts.is_empty()
    }

    pub fn contains_call(&self) -> bool {
        fn any(stmts: &[Stmt]) -> bool {
            stmts.iter().any(|s| match s {
                Stmt::Call { .. } => true,
                Stmt::If { then, els, .. } => any(then) || any(els),
                _ => false,
            })
        }
        any(&self.stmts)
    }
}

// ---------------------------------------------------------------- parsing

struct Parser {
    toks: Vec<Spanned>,
    i: usize,
    depth: usize,
    end: usize,
}

impl Parser {
    fn new(toks: Vec<Spanned>, end: usize) -> Self {
        Parser { toks, i: 0, depth: 0, end }
    }

    fn skip_nl(&mut self) {
        while self.depth > 0 && matches!(self.toks.get(self.i).map(|t| &t.tok), Some(Tok::Newline)) {
            self.i += 1;
        }
    }

    fn peek(&mut self) -> Option<&Tok> {
        self.skip_nl();
        self.toks.get(self.i).map(|t| &t.tok)
    }

    fn pos(&self) -> usize {
        self.toks.get(self.i).map(|t| t.pos).unwrap_or(self.end)
    }

    fn next(&mut self) -> Option<Tok> {
        self.skip_nl();
        let t = self.toks.get(self.i).map(|t| t.tok.clone());
        if t.is_some() {
            self.i += 1;
        }
        t
    }

    fn err<T>(&self, message: impl Into<String>) -> Result<T, ExprError> {
        Err(ExprError::Syntax { pos: self.pos(), message: message.into() })
    }

    fn expect(&mut self, want: Tok) -> Result<(), ExprError> {
        match self.peek() {
            Some(t) if *t == want => {
                self.next();
                Ok(())
            }
            Some(t) => {
                let msg = format!("expected {want}, found {t}");
                self.err(msg)
            }
            None => self.err(format!("expected {want}, found end of input")),
        }
    }

    fn ident(&mut self) -> Result<String, ExprError> {
        match self.peek() {
            Some(Tok::Ident(_)) => match self.next() {
                Some(Tok::Ident(s)) => Ok(s),
                _ => unreachable!(),
            },
            Some(t) => {
                let msg = format!("expected identifier, found {t}");
                self.err(msg)
            }
            None => self.err("expected identifier, found end of input"),
        }
    }

    fn open(&mut self, t: Tok) -> Result<(), ExprError> {
        self.expect(t)?;
        self.depth += 1;
        Ok(())
    }

    fn close(&mut self, t: Tok) -> Result<(), ExprError> {
        self.expect(t)?;
        self.depth -= 1;
        Ok(())
    }

    fn at_kw(&mut self, kw: &str) -> bool {
        matches!(self.peek(), Some(Tok::Ident(s)) if s == kw)
    }

    fn expr(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.and_expr()?;
        while self.at_kw("or") {
            self.next();
            let rhs = self.and_expr()?;
            lhs = Expr::Or(Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn and_expr(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.not_expr()?;
        while self.at_kw("and") {
            self.next();
            let rhs = self.not_expr()?;
            lhs = Expr::And(Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn not_expr(&mut self) -> Result<Expr, ExprError> {
        if self.at_kw("not") {
            self.next();
            return Ok(Expr::Not(Box::new(self.not_expr()?)));
        }
        self.cmp_expr()
    }

    fn cmp_expr(&mut self) -> Result<Expr, ExprError> {
        let lhs = self.primary()?;
        let op = match self.peek() {
            Some(Tok::Eq) => CmpOp::Eq,
            Some(Tok::Ne) => CmpOp::Ne,
            Some(Tok::Lt) => CmpOp::Lt,
            Some(Tok::Le) => CmpOp::Le,
            Some(Tok::Gt) => CmpOp::Gt,
            Some(Tok::Ge) => CmpOp::Ge,
            _ => return Ok(lhs),
        };
        self.next();
        let rhs = self.primary()?;
        if matches!(self.peek(), Some(Tok::Eq | Tok::Ne | Tok::Lt | Tok::Le | Tok::Gt | Tok::Ge)) {
            return self.err("comparisons do not chain; add parentheses");
        }
        Ok(Expr::Cmp(op, Box::new(lhs), Box::new(rhs)))
    }

    fn primary(&mut self) -> Result<Expr, ExprError> {
        match self.peek().cloned() {
            Some(Tok::LParen) => {
                self.open(Tok::LParen)?;
                let e = self.expr()?;
                self.close(Tok::RParen)?;
                Ok(e)
            }
            Some(Tok::Str(s)) => {
                self.next();
                Ok(Expr::Lit(Literal::Str(s)))
            }
            Some(Tok::Int(_)) | Some(Tok::Float(_)) | Some(Tok::Minus) => self.number(),
            Some(Tok::Ident(name)) => {
                let pos = self.pos();
                self.next();
                match name.as_str() {
                    "true" | "True" => return Ok(Expr::Lit(Literal::Bool(true))),
                    "false" | "False" => return Ok(Expr::Lit(Literal::Bool(false))),
                    "and" | "or" | "not" | "if" | "else" => {
                        return Err(ExprError::Syntax { pos, message: format!("unexpected keyword `{name}`") })
                    }
                    _ => {}
                }
                if matches!(self.peek(), Some(Tok::LParen)) {
                    return self.call(&name, pos);
                }
                let mut path = vec![name];
                while matches!(self.peek(), Some(Tok::Dot)) {
                    self.next();
                    path.push(self.ident()?);
                }
                Ok(Expr::Path(path))
            }
            Some(t) => self.err(format!("unexpected {t}")),
            None => self.err("unexpected end of input"),
        }
    }

    fn number(&mut self) -> Result<Expr, ExprError> {
        let neg = if matches!(self.peek(), Some(Tok::Minus)) {
            self.next();
            true
        } else {
            false
        };
        match self.next() {
            Some(Tok::Int(i)) => {
                let v = if neg { -i } else { i };
                match i64::try_from(v) {
                    Ok(v) => Ok(Expr::Lit(Literal::Int(v))),
                    Err(_) => self.err("integer out of range"),
                }
            }
            Some(Tok::Float(x)) => Ok(Expr::Lit(Literal::Float(if neg { -x } else { x }))),
            _ => self.err("expected number"),
        }
    }

    fn call(&mut self, name: &str, pos: usize) -> Result<Expr, ExprError> {
        self.open(Tok::LParen)?;
        let mut args = Vec::new();
        if !matches!(self.peek(), Some(Tok::RParen)) {
            loop {
                args.push(self.expr()?);
                if matches!(self.peek(), Some(Tok::Comma)) {
                    self.next();
                } else {
                    break;
                }
            }
        }
        self.close(Tok::RParen)?;
        match name {
            "date" | "time" => {
                let [Expr::Lit(Literal::Str(s))] = args.as_slice() else {
                    return Err(ExprError::Syntax { pos, message: format!("{name}() takes one string literal") });
                };
                let lit = if name == "date" {
                    parse_date(s).map(Literal::Date)
                } else {
                    parse_time(s).map(Literal::Time)
                };
                lit.map(Expr::Lit)
                    .ok_or_else(|| ExprError::Syntax { pos, message: format!("invalid {name} literal {s:?}") })
            }
            _ => {
                let Some(b) = Builtin::from_name(name) else {
                    return Err(ExprError::Syntax { pos, message: format!("unknown function `{name}`") });
                };
                if args.len() != b.arity() {
                    return Err(ExprError::Syntax {
                        pos,
                        message: format!("{name}() takes {} argument(s), got {}", b.arity(), args.len()),
                    });
                }
                if matches!(b, Builtin::IsFilled | Builtin::IsRefused) && !matches!(args[0], Expr::Path(_)) {
                    return Err(ExprError::Syntax { pos, message: format!("{name}() takes a field reference") });
                }
                Ok(Expr::Call(b, args))
            }
        }
    }

    fn at_stmt_end(&mut self) -> bool {
        matches!(self.peek(), None | Some(Tok::Newline | Tok::Semi | Tok::RBrace))
    }

    fn block(&mut self, braced: bool) -> Result<Vec<Stmt>, ExprError> {
        let mut out = Vec::new();
        loop {
            while matches!(self.peek(), Some(Tok::Newline | Tok::Semi)) {
                self.next();
            }
            match self.peek() {
                None if braced => return self.err("unclosed `{`"),
                None => return Ok(out),
                Some(Tok::RBrace) if braced => return Ok(out),
                _ => {}
            }
            out.push(self.stmt()?);
            if !self.at_stmt_end() {
                let msg = match self.peek() {
                    Some(t) => format!("expected end of statement, found {t}"),
                    None => "expected end of statement".into(),
                };
                return self.err(msg);
            }
        }
    }

    fn kwargs(&mut self) -> Result<Vec<(String, Expr)>, ExprError> {
        let mut args = Vec::new();
        while !matches!(self.peek(), Some(Tok::RParen)) {
            let k = self.ident()?;
            self.expect(Tok::Assign)?;
            args.push((k, self.expr()?));
            if matches!(self.peek(), Some(Tok::Comma)) {
                self.next();
            } else {
                break;
            }
        }
        Ok(args)
    }

    fn braced(&mut self) -> Result<Vec<Stmt>, ExprError> {
        self.expect(Tok::LBrace)?;
        let body = self.block(true)?;
        self.expect(Tok::RBrace)?;
        Ok(body)
    }

    fn stmt(&mut self) -> Result<Stmt, ExprError> {
        let pos = self.pos();
        let kw = self.ident()?;
        match kw.as_str() {
            "say" => {
                self.open(Tok::LParen)?;
                let e = self.expr()?;
                self.close(Tok::RParen)?;
                Ok(Stmt::Say(e))
            }
            "propose" => {
                self.open(Tok::LParen)?;
                let ws = self.ident()?;
                let mut args = Vec::new();
                if matches!(self.peek(), Some(Tok::Comma)) {
                    self.next();
                    args = self.kwargs()?;
                }
                self.close(Tok::RParen)?;
                Ok(Stmt::Propose { ws, args })
            }
            "call" => {
                let api = self.ident()?;
                self.open(Tok::LParen)?;
                let args = self.kwargs()?;
                self.close(Tok::RParen)?;
                let target = if matches!(self.peek(), Some(Tok::Arrow)) {
                    self.next();
                    Some(self.ident()?)
                } else {
                    None
                };
                Ok(Stmt::Call { api, args, target })
            }
            "if" => {
                let cond = self.expr()?;
                let then = self.braced()?;
                let mut els = Vec::new();
                if self.at_kw("else") {
                    self.next();
                    if self.at_kw("if") {
                        els.push(self.stmt()?);
                    } else {
                        els = self.braced()?;
                    }
                }
                Ok(Stmt::If { cond, then, els })
            }
            _ => {
                if !matches!(self.peek(), Some(Tok::Assign)) {
                    return Err(ExprError::Syntax { pos, message: format!("unknown statement `{kw}`") });
                }
                self.next();
                Ok(Stmt::Assign { field: kw, value: self.expr()? })
            }
        }
    }
}

pub fn parse_expr(src: &str) -> Result<Expr, ExprError> {
    let toks = tokenize(src, false).map_err(|e| ExprError::Syntax { pos: e.pos, message: e.message })?;
    let mut p = Parser::new(toks, src.len());
    let e = p.expr()?;
    if let Some(t) = p.peek() {
        let msg = format!("trailing input: {t}");
        return p.err(msg);
    }
    Ok(e)
}

pub fn parse_actions(src: &str) -> Result<ActionBlock, ExprError> {
    let toks = tokenize(src, true).map_err(|e| ExprError::Syntax { pos: e.pos, message: e.message })?;
    let mut p = Parser::new(toks, src.len());
    let stmts = p.block(false)?;
    Ok(ActionBlock { stmts })
}

// ---------------------------------------------------------------- printing

fn prec(e: &Expr) -> u8 {
    match e {
        Expr::Or(..) => 1,
        Expr::And(..) => 2,
        Expr::Not(_) => 3,
        Expr::Cmp(..) => 4,
        _ => 5,
    }
}

fn lit_text(l: &Literal) -> String {
    match l {
        Literal::Str(s) => quote(s, '"'),
        Literal::Int(i) => i.to_string(),
        Literal::Float(x) => float_text(*x),
        Literal::Bool(b) => b.to_string(),
        Literal::Date(d) => format!("date(\"{}\")", d.format("%Y-%m-%d")),
        Literal::Time(t) => format!("time(\"{}\")", t.format("%H:%M:%S")),
    }
}

fn wrap(e: &Expr, min: u8) -> String {
    let s = print_expr(e);
    if prec(e) < min {
        format!("({s})")
    } else {
        s
    }
}

pub fn print_expr(e: &Expr) -> String {
    match e {
        Expr::Lit(l) => lit_text(l),
        Expr::Path(p) => p.join("."),
        Expr::Not(x) => format!("not {}", wrap(x, 3)),
        Expr::And(a, b) => format!("{} and {}", wrap(a, 2), wrap(b, 3)),
        Expr::Or(a, b) => format!("{} or {}", wrap(a, 1), wrap(b, 2)),
        Expr::Cmp(op, a, b) => format!("{} {} {}", wrap(a, 5), op.symbol(), wrap(b, 5)),
        Expr::Call(b, args) => {
            let parts: Vec<String> = args.iter().map(print_expr).collect();
            format!("{}({})", b.name(), parts.join(", "))
        }
    }
}

fn print_kwargs(args: &[(String, Expr)]) -> String {
    args.iter().map(|(k, v)| format!("{k}={}", print_expr(v))).collect::<Vec<_>>().join(", ")
}

fn print_stmts(stmts: &[Stmt]) -> String {
    stmts.iter().map(print_stmt).collect::<Vec<_>>().join("; ")
}

pub fn print_stmt(s: &Stmt) -> String {
    match s {
        Stmt::Say(e) => format!("say({})", print_expr(e)),
        Stmt::Propose { ws, args } if args.is_empty() => format!("propose({ws})"),
        Stmt::Propose { ws, args } => format!("propose({ws}, {})", print_kwargs(args)),
        Stmt::Call { api, args, target } => {
            let mut out = format!("call {api}({})", print_kwargs(args));
            if let Some(t) = target {
                let _ = write!(out, " -> {t}");
            }
            out
        }
        Stmt::Assign { field, value } => format!("{field} = {}", print_expr(value)),
        Stmt::If { cond, then, els } => {
            let mut out = format!("if {} {{ {} }}", print_expr(cond), print_stmts(then));
            if !els.is_empty() {
                let _ = write!(out, " else {{ {} }}", print_stmts(els));
            }
            out
        }
    }
}

pub fn print_actions(b: &ActionBlock) -> String {
    print_stmts(&b.stmts)
}

/// S-expression dump used by golden tests.
pub fn sexpr(e: &Expr) -> String {
    match e {
        Expr::Lit(Literal::Date(d)) => format!("(date \"{}\")", d.format("%Y-%m-%d")),
        Expr::Lit(Literal::Time(t)) => format!("(time \"{}\")", t.format("%H:%M:%S")),
        Expr::Lit(l) => lit_text(l),
        Expr::Path(p) => format!("(ref {})", p.join(".")),
        Expr::Not(x) => format!("(not {})", sexpr(x)),
        Expr::And(a, b) => format!("(and {} {})", sexpr(a), sexpr(b)),
        Expr::Or(a, b) => format!("(or {} {})", sexpr(a), sexpr(b)),
        Expr::Cmp(op, a, b) => format!("({} {} {})", op.symbol(), sexpr(a), sexpr(b)),
        Expr::Call(b, args) => {
            let mut out = format!("({}", b.name());
            for a in args {
                out.push(' ');
                out.push_str(&sexpr(a));
            }
            out.push(')');
            out
        }
    }
}

pub fn sexpr_actions(b: &ActionBlock) -> String {
    fn kw(args: &[(String, Expr)]) -> String {
        args.iter().map(|(k, v)| format!(" ({k} {})", sexpr(v))).collect()
    }
    fn stmt(s: &Stmt) -> String {
        match s {
            Stmt::Say(e) => format!("(say {})", sexpr(e)),
            Stmt::Propose { ws, args } => format!("(propose {ws}{})", kw(args)),
            Stmt::Call { api, args, target } => {
                let t = target.as_ref().map(|t| format!(" -> {t}")).unwrap_or_default();
                format!("(call {api}{}{t})", kw(args))
            }
            Stmt::Assign { field, value } => format!("(set {field} {})", sexpr(value)),
            Stmt::If { cond, then, els } => {
                let th: Vec<String> = then.iter().map(stmt).collect();
                let el: Vec<String> = els.iter().map(stmt).collect();
                format!("(if {} (then {}) (else {}))", sexpr(cond), th.join(" "), el.join(" "))
            }
        }
    }
    let parts: Vec<String> = b.stmts.iter().map(stmt).collect();
    format!("(block {})", parts.join(" "))
}

// ---------------------------------------------------------------- checking

/// Name environment for static checks.
pub trait TypeEnv {
    /// Type of a bare name visible from the enclosing worksheet or its ancestors.
    fn lookup(&self, name: &str) -> Option<FieldType>;
    /// Field type of `field` inside worksheet `ws`.
    fn member(&self, ws: &str, field: &str) -> Option<FieldType>;
    fn enum_domain(&self, domain: &str) -> Option<Vec<String>>;
    /// Whether `name` is a field of the enclosing worksheet itself.
    fn own_field(&self, name: &str) -> bool;
    fn api_params(&self, api: &str) -> Option<Vec<String>>;
    fn worksheet_fields(&self, ws: &str) -> Option<Vec<String>>;
}

#[derive(Debug, Clone, PartialEq)]
pub enum Ty {
    Bool,
    Str,
    Num,
    Date,
    Time,
    List,
    Enum(String),
    Any,
}

impl Ty {
    fn from_field(t: &FieldType) -> Ty {
        match t {
            FieldType::Str => Ty::Str,
            FieldType::Int | FieldType::Float => Ty::Num,
            FieldType::Bool => Ty::Bool,
            FieldType::Date => Ty::Date,
            FieldType::Time => Ty::Time,
            FieldType::Enum(d) => Ty::Enum(d.clone()),
            FieldType::Ws(_) | FieldType::Kb(_) => Ty::Any,
        }
    }

    fn name(&self) -> String {
        match self {
            Ty::Enum(d) => format!("enum({d})"),
            other => format!("{other:?}").to_lowercase(),
        }
    }
}

fn path_type(path: &[String], env: &dyn TypeEnv) -> Result<Ty, ExprError> {
    let Some(mut t) = env.lookup(&path[0]) else {
        return Err(ExprError::UnknownReference(path[0].clone()));
    };
    for seg in &path[1..] {
        t = match &t {
            FieldType::Ws(ws) => env
                .member(ws, seg)
                .ok_or_else(|| ExprError::UnknownReference(path.join(".")))?,
            FieldType::Kb(_) => return Ok(Ty::Any),
            _ => return Err(ExprError::UnknownReference(path.join("."))),
        };
    }
    Ok(Ty::from_field(&t))
}

fn comparable(op: CmpOp, a: &Ty, b: &Ty, ea: &Expr, eb: &Expr, env: &dyn TypeEnv) -> Result<(), ExprError> {
    let mismatch = || {
        Err(ExprError::TypeMismatch(format!(
            "cannot compare {} {} {}",
            a.name(),
            op.symbol(),
            b.name()
        )))
    };
    let check_enum = |d: &str, e: &Expr| -> Result<(), ExprError> {
        if let Expr::Lit(Literal::Str(s)) = e {
            let dom = env.enum_domain(d).unwrap_or_default();
            if !dom.iter().any(|v| v == s) {
                return Err(ExprError::TypeMismatch(format!("{s:?} is not a value of enum {d}")));
            }
        }
        Ok(())
    };
    let ordering = !matches!(op, CmpOp::Eq | CmpOp::Ne);
    match (a, b) {
        (Ty::Any, _) | (_, Ty::Any) => Ok(()),
        (Ty::Num, Ty::Num) | (Ty::Date, Ty::Date) | (Ty::Time, Ty::Time) => Ok(()),
        (Ty::Date, Ty::Str) | (Ty::Str, Ty::Date) if matches!((ea, eb), (_, Expr::Lit(Literal::Str(_))) | (Expr::Lit(Literal::Str(_)), _)) => Ok(()),
        _ if ordering => mismatch(),
        (Ty::Str, Ty::Str) | (Ty::Bool, Ty::Bool) => Ok(()),
        (Ty::Enum(d), Ty::Str) => check_enum(d, eb),
        (Ty::Str, Ty::Enum(d)) => check_enum(d, ea),
        (Ty::Enum(x), Ty::Enum(y)) if x == y => Ok(()),
        _ => mismatch(),
    }
}

pub fn infer(e: &Expr, env: &dyn TypeEnv) -> Result<Ty, ExprError> {
    Ok(match e {
        Expr::Lit(l) => match l {
            Literal::Str(_) => Ty::Str,
            Literal::Int(_) | Literal::Float(_) => Ty::Num,
            Literal::Bool(_) => Ty::Bool,
            Literal::Date(_) => Ty::Date,
            Literal::Time(_) => Ty::Time,
        },
        Expr::Path(p) => path_type(p, env)?,
        Expr::Not(x) => {
            expect_bool(x, env)?;
            Ty::Bool
        }
        Expr::And(a, b) | Expr::Or(a, b) => {
            expect_bool(a, env)?;
            expect_bool(b, env)?;
            Ty::Bool
        }
        Expr::Cmp(op, a, b) => {
            let ta = infer(a, env)?;
            let tb = infer(b, env)?;
            comparable(*op, &ta, &tb, a, b, env)?;
            Ty::Bool
        }
        Expr::Call(b, args) => {
            let tys = args.iter().map(|a| infer(a, env)).collect::<Result<Vec<_>, _>>()?;
            match b {
                Builtin::IsFilled | Builtin::IsRefused => Ty::Bool,
                Builtin::Len => {
                    if !matches!(tys[0], Ty::Str | Ty::List | Ty::Any) {
                        return Err(ExprError::TypeMismatch(format!("len() of {}", tys[0].name())));
                    }
                    Ty::Num
                }
                Builtin::Contains => {
                    if !matches!(tys[0], Ty::Str | Ty::List | Ty::Any) {
                        return Err(ExprError::TypeMismatch(format!("contains() on {}", tys[0].name())));
                    }
                    Ty::Bool
                }
            }
        }
    })
}

fn expect_bool(e: &Expr, env: &dyn TypeEnv) -> Result<(), ExprError> {
    match infer(e, env)? {
        Ty::Bool | Ty::Any => Ok(()),
        t => Err(ExprError::TypeMismatch(format!("expected bool, found {} in `{}`", t.name(), print_expr(e)))),
    }
}

pub fn check_predicate(e: &Expr, env: &dyn TypeEnv) -> Result<(), ExprError> {
    expect_bool(e, env)
}

fn placeholders(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut rest = s;
    while let Some(i) = rest.find('{') {
        if rest[i..].starts_with("{{") {
            rest = &rest[i + 2..];
            continue;
        }
        let Some(j) = rest[i..].find('}') else { break };
        out.push(rest[i + 1..i + j].trim().to_string());
        rest = &rest[i + j + 1..];
    }
    out
}

pub fn check_actions(b: &ActionBlock, env: &dyn TypeEnv) -> Result<(), ExprError> {
    fn check_args(args: &[(String, Expr)], env: &dyn TypeEnv) -> Result<(), ExprError> {
        for (_, e) in args {
            infer(e, env)?;
        }
        Ok(())
    }
    for s in &b.stmts {
        match s {
            Stmt::Say(e) => {
                infer(e, env)?;
                if let Expr::Lit(Literal::Str(text)) = e {
                    for ph in placeholders(text) {
                        let path: Vec<String> = ph.split('.').map(|s| s.to_string()).collect();
                        path_type(&path, env)?;
                    }
                }
            }
            Stmt::Propose { ws, args } => {
                let fields = env.worksheet_fields(ws).ok_or_else(|| ExprError::UnknownWorksheet(ws.clone()))?;
                for (k, _) in args {
                    if !fields.contains(k) {
                        return Err(ExprError::UnknownReference(format!("{ws}.{k}")));
                    }
                }
                check_args(args, env)?;
            }
            Stmt::Call { api, args, target } => {
                let params = env.api_params(api).ok_or_else(|| ExprError::UnknownApi(api.clone()))?;
                let got: Vec<String> = args.iter().map(|(k, _)| k.clone()).collect();
                let mut a = params.clone();
                let mut g = got.clone();
                a.sort();
                g.sort();
                if a != g {
                    return Err(ExprError::ArityMismatch {
                        api: api.clone(),
                        expected: params.join(", "),
                        got: got.join(", "),
                    });
                }
                check_args(args, env)?;
                if let Some(t) = target {
                    if t != "result" && !env.own_field(t) {
                        return Err(ExprError::BadAssignment(t.clone()));
                    }
                }
            }
            Stmt::Assign { field, value } => {
                if !env.own_field(field) {
                    return Err(ExprError::BadAssignment(field.clone()));
                }
                infer(value, env)?;
            }
            Stmt::If { cond, then, els } => {
                check_predicate(cond, env)?;
                check_actions(&ActionBlock { stmts: then.clone() }, env)?;
                check_actions(&ActionBlock { stmts: els.clone() }, env)?;
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- evaluation

/// A slot as seen by the evaluator.
#[derive(Debug, Clone, PartialEq)]
pub enum Slot {
    Empty,
    Refused,
    Value(Value),
}

pub trait Scope {
    fn resolve(&self, path: &[String]) -> Result<Slot, ExprError>;
}

pub fn eval(e: &Expr, scope: &dyn Scope) -> Result<Slot, ExprError> {
    Ok(match e {
        Expr::Lit(l) => Slot::Value(l.to_value()),
        Expr::Path(p) => scope.resolve(p)?,
        Expr::Not(x) => Slot::Value(Value::Bool(!truthy(&eval(x, scope)?))),
        Expr::And(a, b) => {
            let v = truthy(&eval(a, scope)?) && truthy(&eval(b, scope)?);
            Slot::Value(Value::Bool(v))
        }
        Expr::Or(a, b) => {
            let v = truthy(&eval(a, scope)?) || truthy(&eval(b, scope)?);
            Slot::Value(Value::Bool(v))
        }
        Expr::Cmp(op, a, b) => {
            let (Slot::Value(x), Slot::Value(y)) = (eval(a, scope)?, eval(b, scope)?) else {
                return Ok(Slot::Value(Value::Bool(false)));
            };
            let r = match op {
                CmpOp::Eq => values_equal(&x, &y),
                CmpOp::Ne => !values_equal(&x, &y),
                _ => match compare(&x, &y) {
                    Some(o) => match op {
                        CmpOp::Lt => o.is_lt(),
                        CmpOp::Le => o.is_le(),
                        CmpOp::Gt => o.is_gt(),
                        CmpOp::Ge => o.is_ge(),
                        _ => unreachable!(),
                    },
                    None => false,
                },
            };
            Slot::Value(Value::Bool(r))
        }
        Expr::Call(b, args) => {
            let a0 = eval(&args[0], scope)?;
            match b {
                Builtin::IsFilled => Slot::Value(Value::Bool(matches!(a0, Slot::Value(_)))),
                Builtin::IsRefused => Slot::Value(Value::Bool(matches!(a0, Slot::Refused))),
                Builtin::Len => match a0 {
                    Slot::Value(Value::List(l)) => Slot::Value(Value::Int(l.len() as i64)),
                    Slot::Value(Value::Str(s)) => Slot::Value(Value::Int(s.chars().count() as i64)),
                    _ => Slot::Empty,
                },
                Builtin::Contains => {
                    let a1 = eval(&args[1], scope)?;
                    let r = match (a0, a1) {
                        (Slot::Value(Value::List(l)), Slot::Value(item)) => l.iter().any(|v| values_equal(v, &item)),
                        (Slot::Value(Value::Str(s)), Slot::Value(Value::Str(sub))) => s.contains(&sub),
                        _ => false,
                    };
                    Slot::Value(Value::Bool(r))
                }
            }
        }
    })
}

fn truthy(s: &Slot) -> bool {
    matches!(s, Slot::Value(Value::Bool(true)))
}

pub fn eval_predicate(e: Option<&Expr>, scope: &dyn Scope) -> Result<bool, ExprError> {
    match e {
        None => Ok(true),
        Some(e) => Ok(truthy(&eval(e, scope)?)),
    }
}

/// Fill `{path}` placeholders from scope. `{{` yields a literal brace.
pub fn interpolate(text: &str, scope: &dyn Scope) -> Result<String, ExprError> {
    let mut out = String::new();
    let mut rest = text;
    while let Some(i) = rest.find('{') {
        out.push_str(&rest[..i]);
        if rest[i..].starts_with("{{") {
            out.push('{');
            rest = &rest[i + 2..];
            continue;
        }
        let Some(j) = rest[i..].find('}') else {
            out.push_str(&rest[i..]);
            return Ok(out);
        };
        let path: Vec<String> = rest[i + 1..i + j].trim().split('.').map(|s| s.to_string()).collect();
        if let Slot::Value(v) = scope.resolve(&path)? {
            out.push_str(&v.to_string());
        }
        rest = &rest[i + j + 1..];
    }
    out.push_str(&rest.replace("}}", "}"));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Effect {
    Say(String),
    Propose { ws: String, args: Vec<(String, Value)> },
    Call { api: String, args: IndexMap<String, Value>, result: Value, target: Option<String> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CallFailure {
    pub api: String,
    pub args: IndexMap<String, Value>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExecOutcome {
    pub effects: Vec<Effect>,
    /// Set when a call failed; statements after it were not executed.
    pub failure: Option<CallFailure>,
}

pub trait ActionHost: Scope {
    fn assign(&mut self, field: &str, value: Value) -> Result<(), ExprError>;
    fn call(&mut self, api: &str, args: &IndexMap<String, Value>) -> Result<Value, String>;
}

fn eval_args(args: &[(String, Expr)], host: &dyn ActionHost) -> Result<Vec<(String, Value)>, ExprError> {
    let mut out = Vec::new();
    for (k, e) in args {
        if let Slot::Value(v) = eval(e, host)? {
            out.push((k.clone(), v));
        }
    }
    Ok(out)
}

pub fn exec_actions(block: &ActionBlock, host: &mut dyn ActionHost) -> Result<ExecOutcome, ExprError> {
    let mut out = ExecOutcome::default();
    exec_stmts(&block.stmts, host, &mut out)?;
    Ok(out)
}

fn exec_stmts(stmts: &[Stmt], host: &mut dyn ActionHost, out: &mut ExecOutcome) -> Result<(), ExprError> {
    for s in stmts {
        if out.failure.is_some() {
            return Ok(());
        }
        match s {
            Stmt::Say(e) => {
                let text = match e {
                    Expr::Lit(Literal::Str(t)) => interpolate(t, host)?,
                    other => match eval(other, host)? {
                        Slot::Value(v) => v.to_string(),
                        _ => String::new(),
                    },
                };
                out.effects.push(Effect::Say(text));
            }
            Stmt::Propose { ws, args } => {
                let args = eval_args(args, host)?;
                out.effects.push(Effect::Propose { ws: ws.clone(), args });
            }
            Stmt::Call { api, args, target } => {
                let args: IndexMap<String, Value> = eval_args(args, host)?.into_iter().collect();
                match host.call(api, &args) {
                    Ok(result) => {
                        if let Some(t) = target {
                            host.assign(t, result.clone())?;
                        }
                        out.effects.push(Effect::Call { api: api.clone(), args, result, target: target.clone() });
                    }
                    Err(message) => {
                        out.failure = Some(CallFailure { api: api.clone(), args, message });
                    }
                }
            }
            Stmt::Assign { field, value } => {
                if let Slot::Value(v) = eval(value, host)? {
                    host.assign(field, v)?;
                }
            }
            Stmt::If { cond, then, els } => {
                let branch = if truthy(&eval(cond, host)?) { then } else { els };
                exec_stmts(branch, host, out)?;
            }
        }
    }
    Ok(())
}
