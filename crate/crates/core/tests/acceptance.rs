//! Acceptance suite: one PASS/FAIL line per criterion; exits nonzero if any fails.
//! Run with `cargo test -p worksheet-core --test acceptance`.

mod common;

use std::time::{Duration, Instant};

use worksheet::acts::DialogueAct;
use worksheet::eval::{
    build_report, canonical_aliases, da_counts, ex_counts, gold_items, goal_completed, load_fixture, replay_fixture, score_transcript,
    sp_counts,
};
use worksheet::kb::parse_query;
use worksheet::policy::ExecKind;
use worksheet::spec::load_spec_file;
use worksheet::spec::WorksheetKind;
use worksheet::value::Value;

type Outcome = Result<String, String>;
type Check = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(start: Instant, limit: Duration) -> Result<(), String> {
    let took = start.elapsed();
    ensure(took < limit, || format!("took {took:?}, limit {limit:?}"))
}

fn composition() -> Outcome {
    let start = Instant::now();
    let fx = load_fixture(&common::repo_root().join("fixtures/restaurant")).map_err(|e| e.to_string())?;
    let (run, conv) = replay_fixture(&fx);
    let kb = run
        .state
        .instances
        .iter()
        .find(|i| i.kind == WorksheetKind::Kb)
        .ok_or("no knowledge query instance")?;
    let q = kb.value("structured_query").ok_or("query has no structured form")?.to_string();
    let q = parse_query(&q).map_err(|e| e.to_string())?.to_string();
    ensure(q.contains("'italian' = ANY (cuisines)") && q.contains("location = 'NYC'"), || format!("query was {q}"))?;
    let book = run.state.instances.iter().find(|i| i.worksheet == "BookRestaurant").ok_or("no BookRestaurant instance")?;
    let d = chrono::NaiveDate::from_ymd_opt(2024, 2, 14).unwrap();
    ensure(book.value("date") == Some(&Value::Date(d)), || format!("date {:?}", book.value("date")))?;
    ensure(book.value("num_people") == Some(&Value::Int(2)), || format!("num_people {:?}", book.value("num_people")))?;
    let calls: Vec<_> = run.results.iter().flat_map(|r| &r.executions).filter(|e| e.kind == ExecKind::Api && e.ok).collect();
    ensure(calls.iter().any(|e| e.name == "book_restaurant"), || "book_restaurant never ran".into())?;
    ensure(conv.ex.micro == Some(1.0) && conv.da.micro == Some(1.0) && conv.goal == Some(1), || {
        format!("ex {:?} da {:?} goal {:?}", conv.ex.micro, conv.da.micro, conv.goal)
    })?;
    within(start, Duration::from_secs(5))?;
    Ok(format!("query `{q}`; ex=da=goal=1.0 in {:?}", start.elapsed()))
}

fn banking() -> Outcome {
    let fx = load_fixture(&common::repo_root().join("fixtures/banking")).map_err(|e| e.to_string())?;
    let (run, conv) = replay_fixture(&fx);
    let aliases = canonical_aliases(&fx.transcript.meta.aliases);
    let asks: Vec<Vec<String>> = run
        .results
        .iter()
        .map(|r| r.acts.iter().filter(|a| a.is_ask()).map(DialogueAct::canonical).collect())
        .collect();
    let labels: Vec<String> = asks
        .iter()
        .flatten()
        .map(|a| aliases.get(a).and_then(|ls| ls.first()).cloned().unwrap_or_else(|| a.clone()))
        .collect();
    let want = ["ask_name", "bank_ask_account_number", "bank_ask_dob"];
    ensure(labels.len() >= 3 && labels[..3] == want, || format!("first asks mapped to {labels:?}"))?;
    let fourth = asks.get(3).ok_or("no fourth turn")?;
    ensure(fourth.iter().any(|a| a.ends_with("date_of_birth)")), || format!("turn 4 asked {fourth:?}"))?;
    ensure(conv.da.micro == Some(1.0), || format!("DA {:?}", conv.da.micro))?;
    Ok(format!("asks {:?}; DA 1.0", &labels[..4.min(labels.len())]))
}

fn spec_counts() -> Outcome {
    let root = common::repo_root().join("specs");
    let want = [
        ("restaurant.json", (2, 8, 2, 2, 3)),
        ("restaurant.csv", (2, 8, 2, 2, 3)),
        ("course.json", (4, 20, 4, 3, 1)),
        ("ticket.csv", (7, 28, 1, 18, 2)),
    ];
    let mut seen = Vec::new();
    for (file, w) in want {
        let s = load_spec_file(&root.join(file)).map_err(|e| format!("{file}: {e}"))?.stats();
        let got = (s.worksheets, s.fields, s.dbs, s.predicates, s.actions);
        ensure(got == w, || format!("{file}: {got:?}, expected {w:?}"))?;
        seen.push(format!("{file} {got:?}"));
    }
    load_spec_file(&root.join("banking.json")).map_err(|e| format!("banking.json: {e}"))?;
    Ok(seen.join(", "))
}

fn metric_oracle() -> Outcome {
    let start = Instant::now();
    let mut r = common::rng(0xacce);
    let mut convs = Vec::new();
    let mut pooled = [(0usize, 0usize); 3];
    for case in 0..1000 {
        let t = common::random_transcript(&mut r);
        let conv = score_transcript(&format!("c{case}"), &t).map_err(|e| e.to_string())?;
        let mut execs = Vec::new();
        for (line, score) in t.turns.iter().zip(&conv.turns) {
            let rec = line.record.as_ref().expect("generated with records");
            let preds: Vec<(String, bool)> = rec.executions.iter().map(|e| (e.canonical(), e.ok)).collect();
            let sp = common::oracle_sp(&common::oracle_gold_items(&line.gold), &rec.sp_items);
            let ex = common::oracle_ex(&line.gold.executions, &preds);
            let da = common::oracle_da(&line.gold.acts, &rec.acts, &t.meta.aliases);
            let got = [(score.sp.num, score.sp.den), (score.ex.num, score.ex.den), (score.da.num, score.da.den)];
            ensure(got == [sp, ex, da], || format!("case {case} turn {}: {got:?} vs oracle {:?}", score.turn, [sp, ex, da]))?;
            for (k, v) in [sp, ex, da].into_iter().enumerate() {
                pooled[k].0 += v.0;
                pooled[k].1 += v.1;
            }
            // Direct calls agree with the scorer.
            ensure(sp_counts(&gold_items(&line.gold), &rec.sp_items) == score.sp, || "sp_counts".into())?;
            ensure(ex_counts(&line.gold.executions, &preds) == score.ex, || "ex_counts".into())?;
            let al = canonical_aliases(&t.meta.aliases);
            ensure(da_counts(&line.gold.acts, &rec.acts, &al) == score.da, || "da_counts".into())?;
            execs.extend(rec.executions.iter().cloned());
        }
        let goal = t.meta.goal.as_ref().map(|g| common::oracle_goal(g, &execs) as u8);
        ensure(conv.goal == goal, || format!("case {case}: goal {:?} vs oracle {goal:?}", conv.goal))?;
        if let Some(g) = &t.meta.goal {
            ensure(goal_completed(g, &execs) == (goal == Some(1)), || "goal_completed".into())?;
        }
        convs.push(conv);
    }
    let report = build_report(convs);
    let o = &report.overall;
    for (k, s) in [&o.sp, &o.ex, &o.da].into_iter().enumerate() {
        let (n, d) = pooled[k];
        let micro = (d > 0).then(|| n as f64 / d as f64);
        ensure(s.num == n && s.den == d && s.micro == micro, || format!("overall metric {k}: {}/{} vs oracle {n}/{d}", s.num, s.den))?;
    }
    within(start, Duration::from_secs(10))?;
    Ok(format!("1000 cases match in {:?}", start.elapsed()))
}

fn query_oracle() -> Outcome {
    let mut r = common::rng(0x9e7);
    let mut nonempty = 0;
    for case in 0..500 {
        let t = common::random_table(&mut r);
        let q = common::random_query(&mut r);
        let got = t.execute(&q).map_err(|e| format!("case {case}: {e} for {q}"))?;
        let want = common::oracle_execute(&t, &q);
        ensure(got == want, || format!("case {case}: {q}\n got {} rows, oracle {} rows", got.len(), want.len()))?;
        nonempty += usize::from(!got.is_empty());
    }
    Ok(format!("500 pairs match ({nonempty} with rows)"))
}

fn policy_fuzz() -> Outcome {
    let (episodes, steps) = (500u64, 20usize);
    let (mut calls, mut asks) = (0, 0);
    for seed in 0..episodes {
        let ep = common::check_episode(seed, steps)?;
        calls += ep.api_calls;
        asks += ep.asks;
    }
    Ok(format!("{} steps, {asks} asks, {calls} api calls, no violations", episodes as usize * steps))
}

fn persistence() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    for seed in 0..100 {
        common::crash_and_resume(seed, dir.path())?;
    }
    Ok("100 sessions replay and resume exactly".into())
}

fn refusal() -> Outcome {
    let fx = load_fixture(&common::repo_root().join("fixtures/refusal")).map_err(|e| e.to_string())?;
    let (run, conv) = replay_fixture(&fx);
    let at = run
        .transcript
        .turns
        .iter()
        .position(|t| t.parse.as_deref().is_some_and(|p| p.contains("'NA'")))
        .ok_or("fixture has no NA answer")?;
    let later: Vec<String> = run.results[at..].iter().flat_map(|r| r.canonical_acts()).collect();
    ensure(!later.iter().any(|a| a == "AskField(user_info, user_name)"), || format!("asked again: {later:?}"))?;
    let says: Vec<&String> = later.iter().filter(|a| a.starts_with("Say(") && a.contains("without your user name")).collect();
    ensure(!says.is_empty(), || format!("no explanation in {later:?}"))?;
    ensure(conv.goal == Some(0), || format!("goal {:?}", conv.goal))?;
    Ok(format!("{} explanation(s), goal 0", says.len()))
}

fn main() {
    let checks: Vec<Check> = vec![
        ("composition fixture", composition),
        ("banking fixture", banking),
        ("spec counts", spec_counts),
        ("metric oracle", metric_oracle),
        ("query oracle", query_oracle),
        ("policy fuzz", policy_fuzz),
        ("persistence", persistence),
        ("refusal handling", refusal),
    ];
    let mut failed = 0;
    for (name, f) in checks {
        match std::panic::catch_unwind(f) {
            Ok(Ok(detail)) => println!("PASS  {name}: {detail}"),
            Ok(Err(why)) => {
                failed += 1;
                println!("FAIL  {name}: {why}");
            }
            Err(_) => {
                failed += 1;
                println!("FAIL  {name}: panicked");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
