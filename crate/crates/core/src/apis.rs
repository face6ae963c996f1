//! Invocation of developer APIs: host functions registered in code, or stubs declared in the spec.

use indexmap::IndexMap;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::sync::Arc;

use crate::spec::{ApiDecl, Binding};
use crate::value::Value;

pub type HostFn = Arc<dyn Fn(&IndexMap<String, Value>) -> Result<Value, String> + Send + Sync>;

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

pub fn json_to_value(j: &serde_json::Value) -> Value {
    match j {
        serde_json::Value::Null => Value::str(""),
        serde_json::Value::Bool(b) => Value::Bool(*b),
        serde_json::Value::Number(n) => match n.as_i64() {
            Some(i) => Value::Int(i),
            None => Value::Float(n.as_f64().unwrap_or(0.0)),
        },
        serde_json::Value::String(s) => Value::Str(s.clone()),
        serde_json::Value::Array(a) => Value::List(a.iter().map(json_to_value).collect()),
        serde_json::Value::Object(o) => Value::Record(o.iter().map(|(k, v)| (k.clone(), json_to_value(v))).collect()),
    }
}

#[derive(Clone)]
pub struct ApiRuntime {
    pub seed: u64,
    hosts: BTreeMap<String, HostFn>,
}

impl ApiRuntime {
    /// Runtime with the built-in `echo` host function, which returns its arguments as a record.
    pub fn new(seed: u64) -> Self {
        let mut rt = ApiRuntime { seed, hosts: BTreeMap::new() };
        rt.register("echo", Arc::new(|args| Ok(Value::Record(args.clone()))));
        rt
    }

    pub fn register(&mut self, name: &str, f: HostFn) {
        self.hosts.insert(name.to_string(), f);
    }

    /// Deterministic id for the `counter`-th execution of `api`.
    pub fn stub_id(&self, api: &str, counter: u64) -> String {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(api) ^ counter);
        format!("{:08X}", rng.next_u32())
    }

    fn fill(&self, t: &serde_json::Value, args: &IndexMap<String, Value>, id: &str) -> Value {
        match t {
            serde_json::Value::String(s) => {
                let inner = s.strip_prefix('{').and_then(|r| r.strip_suffix('}'));
                if let Some(name) = inner.filter(|n| !n.contains(['{', '}'])) {
                    if let Some(v) = args.get(name) {
                        return v.clone();
                    }
                }
                let mut out = s.replace("{id}", id);
                for (k, v) in args {
                    out = out.replace(&format!("{{{k}}}"), &v.to_string());
                }
                Value::Str(out)
            }
            serde_json::Value::Array(a) => Value::List(a.iter().map(|x| self.fill(x, args, id)).collect()),
            serde_json::Value::Object(o) => Value::Record(o.iter().map(|(k, v)| (k.clone(), self.fill(v, args, id))).collect()),
            other => json_to_value(other),
        }
    }

    pub fn invoke(&self, decl: &ApiDecl, args: &IndexMap<String, Value>, counter: u64) -> Result<Value, String> {
        if let Some(k) = args.keys().find(|k| !decl.params.iter().any(|(p, _)| p == *k)) {
            return Err(format!("{} has no parameter `{k}`", decl.name));
        }
        match &decl.binding {
            Binding::Stub { fail: true, result } => {
                let msg = result.as_str().map(str::to_string).unwrap_or_else(|| format!("{} failed", decl.name));
                Err(msg)
            }
            Binding::Stub { result, .. } => Ok(self.fill(result, args, &self.stub_id(&decl.name, counter))),
            Binding::Host { function } => match self.hosts.get(function) {
                Some(f) => f(args),
                None => Err(format!("no host function `{function}` is registered")),
            },
        }
    }
}
