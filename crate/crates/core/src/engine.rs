//! The turn loop: parse, apply updates, run the policy, respond.

use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::acts::DialogueAct;
use crate::apis::ApiRuntime;
use crate::eventlog::{compute_delta, Event};
use crate::policy::{run_policy, ExecutionRecord, KnowledgeBackend, PolicyContext};
use crate::respond::ResponderBackend;
use crate::semparse::{bind, build_prompt, parse_statements, print_statements, Clock, FewShot, LineError, ParseRequest, ParserBackend};
use crate::spec::TaskSpec;
use crate::state::{apply_updates, ApplyMode, ApplyReport, DialogueState, StateError, UpdateStatement};

pub const FALLBACK_REPLY: &str = "Is there anything else I can help you with?";

#[derive(Clone)]
pub struct Engine {
    pub spec: Arc<TaskSpec>,
    pub kb: KnowledgeBackend,
    pub apis: ApiRuntime,
    pub parser: Arc<dyn ParserBackend>,
    pub responder: Arc<dyn ResponderBackend>,
    pub clock: Clock,
    pub few_shots: Vec<FewShot>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnResult {
    pub reply: String,
    pub acts: Vec<DialogueAct>,
    pub executions: Vec<ExecutionRecord>,
    /// Printed form of the statements the parser produced.
    pub statements: String,
    pub parse_errors: Vec<LineError>,
    pub rejections: Vec<String>,
    /// Task worksheets the parser constructed or re-targeted this turn.
    #[serde(default)]
    pub worksheets: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backend_error: Option<String>,
    #[serde(skip)]
    pub report: ApplyReport,
}

impl TurnResult {
    pub fn canonical_acts(&self) -> Vec<String> {
        self.acts.iter().map(DialogueAct::canonical).collect()
    }
}

fn constructed_worksheets(stmts: &[UpdateStatement], report: &ApplyReport) -> Vec<String> {
    let mut out = Vec::new();
    for (i, s) in stmts.iter().enumerate() {
        let UpdateStatement::Construct { ws, .. } = s else { continue };
        let refused = report
            .rejections
            .iter()
            .any(|(j, e)| *j == i && matches!(e, StateError::UnknownWorksheet(_) | StateError::VarConflict { .. }));
        if !refused && !out.contains(ws) {
            out.push(ws.clone());
        }
    }
    out
}

impl Engine {
    /// Fresh state with the top-level instance and the greeting, plus the events to log.
    pub fn start(&self) -> (DialogueState, Vec<Event>) {
        let mut st = DialogueState::new();
        let top = self.spec.top_level().name.clone();
        st.create_task(&self.spec, &top, None);
        if let Some(g) = &self.spec.greeting {
            st.last_agent_utterance = g.clone();
            st.pending_acts = vec![DialogueAct::Say { text: g.clone() }];
        }
        let events = vec![
            Event::SessionStarted { spec: self.spec.name.clone(), greeting: self.spec.greeting.clone() },
            Event::StateDelta { delta: compute_delta(&DialogueState::new(), &st) },
        ];
        (st, events)
    }

    pub fn take_turn(&self, state: &mut DialogueState, utterance: &str) -> (TurnResult, Vec<Event>) {
        let before = state.clone();
        let turn = state.turn_index + 1;
        let mut events = vec![Event::UserTurn { turn, utterance: utterance.to_string() }];
        state.last_user_utterance = utterance.to_string();
        let prompt = build_prompt(&self.spec, state, &state.pending_acts, self.clock, &self.few_shots);

        let raw = match self.parser.complete(&ParseRequest { turn, prompt: &prompt }) {
            Ok(raw) => raw,
            Err(e) => {
                let message = e.to_string();
                let act = DialogueAct::Say { text: "Sorry, I ran into a problem understanding that. Could you say it again?".into() };
                let reply = crate::respond::render_template(std::slice::from_ref(&act));
                state.last_agent_utterance = reply.clone();
                state.pending_acts = vec![act.clone()];
                events.push(Event::BackendError { message: message.clone() });
                events.push(Event::Act { canonical: act.canonical(), act: act.clone() });
                events.push(Event::Reply { text: reply.clone() });
                events.push(Event::StateDelta { delta: compute_delta(&before, state) });
                let r = TurnResult {
                    reply,
                    acts: vec![act],
                    executions: vec![],
                    statements: String::new(),
                    parse_errors: vec![],
                    rejections: vec![],
                    worksheets: vec![],
                    backend_error: Some(message),
                    report: ApplyReport::default(),
                };
                return (r, events);
            }
        };

        let parsed = parse_statements(&raw);
        let (stmts, bind_errors) = bind(parsed.statements, &self.spec);
        let statements = print_statements(&stmts);
        let report = apply_updates(state, &self.spec, &stmts, ApplyMode::Live);
        let worksheets = constructed_worksheets(&stmts, &report);
        let mut rejections = bind_errors;
        rejections.extend(report.rejections.iter().map(|(_, e)| e.to_string()));
        events.push(Event::Parsed { raw, statements: statements.clone(), errors: parsed.errors.clone(), rejections: rejections.clone() });

        let ctx = PolicyContext { spec: &self.spec, kb: &self.kb, apis: &self.apis };
        let outcome = run_policy(state, &ctx, &report);
        let mut reply = self.responder.respond(&outcome.acts, state, utterance);
        if reply.trim().is_empty() {
            reply = FALLBACK_REPLY.to_string();
        }
        state.last_agent_utterance = reply.clone();
        state.pending_acts = outcome.acts.clone();

        events.extend(outcome.executions.iter().map(|r| Event::Execution { record: r.clone() }));
        events.extend(outcome.acts.iter().map(|a| Event::Act { canonical: a.canonical(), act: a.clone() }));
        events.push(Event::Reply { text: reply.clone() });
        events.push(Event::StateDelta { delta: compute_delta(&before, state) });

        let r = TurnResult {
            reply,
            acts: outcome.acts,
            executions: outcome.executions,
            statements,
            parse_errors: parsed.errors,
            rejections,
            worksheets,
            backend_error: None,
            report,
        };
        (r, events)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eventlog::replay;
    use crate::eventlog::LogLine;
    use crate::kb::{KbStore, TableTranslator};
    use crate::respond::TemplateResponder;
    use crate::semparse::ScriptedBackend;
    use crate::spec::load_spec_str;
    use chrono::NaiveDate;
    use std::collections::BTreeMap;

    fn engine(script: &[(u32, &str)]) -> Engine {
        let spec = load_spec_str(
            r#"{"name":"t","greeting":"Hello!","worksheets":[{"name":"Main","fields":[
                {"name":"a","type":"str","required":true},{"name":"b","type":"int","required":true}]}]}"#,
        )
        .unwrap();
        Engine {
            spec: Arc::new(spec),
            kb: KnowledgeBackend { store: Arc::new(KbStore::new()), translator: Arc::new(TableTranslator::default()) },
            apis: ApiRuntime::new(0),
            parser: Arc::new(ScriptedBackend::new(script.iter().map(|(k, v)| (*k, v.to_string())).collect::<BTreeMap<_, _>>())),
            responder: Arc::new(TemplateResponder),
            clock: Clock { date: NaiveDate::from_ymd_opt(2024, 2, 1).unwrap() },
            few_shots: vec![],
        }
    }

    fn log(events: &[Event]) -> Vec<LogLine> {
        events.iter().enumerate().map(|(i, e)| LogLine { seq: i as u64, ts: None, event: e.clone() }).collect()
    }

    #[test]
    fn greeting_then_turns_and_log_replays() {
        let e = engine(&[(1, "main.a = 'x'"), (2, "main.b = 3")]);
        let (mut st, mut events) = e.start();
        assert_eq!(st.last_agent_utterance, "Hello!");
        let (r, ev) = e.take_turn(&mut st, "x");
        events.extend(ev);
        assert_eq!(r.canonical_acts(), vec!["AskField(main, b)"]);
        let (r, ev) = e.take_turn(&mut st, "3");
        events.extend(ev);
        assert!(r.acts.is_empty());
        assert_eq!(r.reply, FALLBACK_REPLY);
        assert!(st.instance("main").unwrap().completed);
        assert_eq!(replay(&log(&events)), st);
    }

    #[test]
    fn backend_failure_apologizes_and_session_continues() {
        let e = engine(&[(1, "main.a = 'x'")]);
        let (mut st, _) = e.start();
        let (r, _) = e.take_turn(&mut st, "x");
        assert!(r.backend_error.is_none());
        let (r, _) = e.take_turn(&mut st, "y");
        assert_eq!(r.backend_error.as_deref(), Some("script has no entry for turn 2"));
        assert_eq!(r.acts.len(), 1);
        assert_eq!(st.turn_index, 1);
    }

    #[test]
    fn parse_errors_and_rejections_surface() {
        let e = engine(&[(1, "main.a = = 1\nmain.b = 'seven'\nmain.zz = 1")]);
        let (mut st, _) = e.start();
        let (r, _) = e.take_turn(&mut st, "x");
        assert_eq!(r.parse_errors.len(), 1);
        assert_eq!(r.rejections.len(), 2);
        assert_eq!(r.canonical_acts(), vec!["AskField(main, a)"]);
    }
}
