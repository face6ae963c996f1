//! Runtime values held in worksheet slots, query rows and api results.

use chrono::{NaiveDate, NaiveTime};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::fmt;

use crate::lexer::float_text;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "t", content = "v", rename_all = "snake_case")]
pub enum Value {
    Str(String),
    Int(i64),
    Float(f64),
    Bool(bool),
    Date(NaiveDate),
    Time(NaiveTime),
    List(Vec<Value>),
    Record(IndexMap<String, Value>),
    /// Reference to another worksheet instance by variable name.
    Ref(String),
}

impl Value {
    pub fn str(s: impl Into<String>) -> Value {
        Value::Str(s.into())
    }

    pub fn type_name(&self) -> &'static str {
        match self {
            Value::Str(_) => "str",
            Value::Int(_) => "int",
            Value::Float(_) => "float",
            Value::Bool(_) => "bool",
            Value::Date(_) => "date",
            Value::Time(_) => "time",
            Value::List(_) => "list",
            Value::Record(_) => "record",
            Value::Ref(_) => "ref",
        }
    }

    pub fn as_ref_var(&self) -> Option<&str> {
        match self {
            Value::Ref(v) => Some(v),
            _ => None,
        }
    }

    /// Normalized text used when comparing values across sources (gold labels, api params).
    pub fn norm(&self) -> String {
        match self {
            Value::Float(x) if x.fract() == 0.0 && x.abs() < 1e15 => format!("{}", *x as i64),
            Value::List(items) => {
                let parts: Vec<String> = items.iter().map(|v| v.norm()).collect();
                format!("[{}]", parts.join(","))
            }
            Value::Record(map) => {
                let parts: Vec<String> = map.iter().map(|(k, v)| format!("{k}:{}", v.norm())).collect();
                format!("{{{}}}", parts.join(","))
            }
            other => other.to_string().trim().to_lowercase(),
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Str(s) => write!(f, "{s}"),
            Value::Int(i) => write!(f, "{i}"),
            Value::Float(x) => write!(f, "{}", float_text(*x)),
            Value::Bool(b) => write!(f, "{b}"),
            Value::Date(d) => write!(f, "{}", d.format("%Y-%m-%d")),
            Value::Time(t) => write!(f, "{}", t.format("%H:%M")),
            Value::List(items) => {
                let parts: Vec<String> = items.iter().map(|v| v.to_string()).collect();
                write!(f, "{}", parts.join(", "))
            }
            Value::Record(map) => {
                let parts: Vec<String> = map.iter().map(|(k, v)| format!("{k}: {v}")).collect();
                write!(f, "{}", parts.join(", "))
            }
            Value::Ref(v) => write!(f, "{v}"),
        }
    }
}

pub fn parse_date(s: &str) -> Option<NaiveDate> {
    let s = s.trim();
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .or_else(|_| NaiveDate::parse_from_str(s, "%m/%d/%Y"))
        .ok()
}

pub fn parse_time(s: &str) -> Option<NaiveTime> {
    let s = s.trim().to_lowercase();
    if let Ok(t) = NaiveTime::parse_from_str(&s, "%H:%M") {
        return Some(t);
    }
    if let Ok(t) = NaiveTime::parse_from_str(&s, "%H:%M:%S") {
        return Some(t);
    }
    // "7 pm", "7:30pm"
    let (body, pm) = if let Some(b) = s.strip_suffix("pm") {
        (b.trim(), true)
    } else {
        (s.strip_suffix("am")?.trim(), false)
    };
    let (h, m) = match body.split_once(':') {
        Some((h, m)) => (h.parse::<u32>().ok()?, m.parse::<u32>().ok()?),
        None => (body.parse::<u32>().ok()?, 0),
    };
    if !(1..=12).contains(&h) {
        return None;
    }
    let h24 = match (h, pm) {
        (12, false) => 0,
        (12, true) => 12,
        (h, true) => h + 12,
        (h, false) => h,
    };
    NaiveTime::from_hms_opt(h24, m, 0)
}

/// Ordering between comparable values; `None` when the pair is not comparable.
pub fn compare(a: &Value, b: &Value) -> Option<Ordering> {
    match (a, b) {
        (Value::Int(x), Value::Int(y)) => Some(x.cmp(y)),
        (Value::Int(x), Value::Float(y)) => (*x as f64).partial_cmp(y),
        (Value::Float(x), Value::Int(y)) => x.partial_cmp(&(*y as f64)),
        (Value::Float(x), Value::Float(y)) => x.partial_cmp(y),
        (Value::Str(x), Value::Str(y)) => Some(x.cmp(y)),
        (Value::Date(x), Value::Date(y)) => Some(x.cmp(y)),
        (Value::Date(x), Value::Str(s)) => parse_date(s).map(|y| x.cmp(&y)),
        (Value::Str(s), Value::Date(y)) => parse_date(s).map(|x| x.cmp(y)),
        (Value::Time(x), Value::Time(y)) => Some(x.cmp(y)),
        (Value::Time(x), Value::Str(s)) => parse_time(s).map(|y| x.cmp(&y)),
        (Value::Str(s), Value::Time(y)) => parse_time(s).map(|x| x.cmp(y)),
        (Value::Bool(x), Value::Bool(y)) => Some(x.cmp(y)),
        _ => None,
    }
}

pub fn values_equal(a: &Value, b: &Value) -> bool {
    match compare(a, b) {
        Some(o) => o == Ordering::Equal,
        None => a == b,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dates_accept_iso_and_us_forms() {
        assert_eq!(parse_date("2024-02-14"), NaiveDate::from_ymd_opt(2024, 2, 14));
        assert_eq!(parse_date("02/14/2024"), NaiveDate::from_ymd_opt(2024, 2, 14));
        assert_eq!(parse_date("Feb 14"), None);
    }

    #[test]
    fn times_accept_clock_and_meridiem() {
        assert_eq!(parse_time("19:00"), NaiveTime::from_hms_opt(19, 0, 0));
        assert_eq!(parse_time("7 pm"), NaiveTime::from_hms_opt(19, 0, 0));
        assert_eq!(parse_time("7:30PM"), NaiveTime::from_hms_opt(19, 30, 0));
        assert_eq!(parse_time("12 am"), NaiveTime::from_hms_opt(0, 0, 0));
        assert_eq!(parse_time("13 pm"), None);
    }

    #[test]
    fn numeric_comparison_crosses_int_and_float() {
        assert!(values_equal(&Value::Int(2), &Value::Float(2.0)));
        assert_eq!(compare(&Value::Int(3), &Value::Float(2.5)), Some(Ordering::Greater));
        assert_eq!(compare(&Value::Int(3), &Value::str("3")), None);
    }

    #[test]
    fn norm_collapses_integral_floats() {
        assert_eq!(Value::Float(2.0).norm(), Value::Int(2).norm());
        assert_eq!(Value::str(" Da Mario ").norm(), "da mario");
    }

    #[test]
    fn serde_shape_is_tagged() {
        let v = Value::Date(NaiveDate::from_ymd_opt(2024, 2, 14).unwrap());
        let j = serde_json::to_string(&v).unwrap();
        assert_eq!(j, r#"{"t":"date","v":"2024-02-14"}"#);
        assert_eq!(serde_json::from_str::<Value>(&j).unwrap(), v);
    }
}
