//! Release acceptance run. Prints one line per criterion and fails the
//! target if any criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use rand_chacha::ChaCha20Rng;
use rand_core::SeedableRng;
use tower::ServiceExt;

use rrpoll_core::accuracy::{alpha_from, beta_from, epsilon_from, lambda_of, n_from};
use rrpoll_core::aggregator::{clamp_renormalize, denoise};
use rrpoll_core::mechanism::{build_matrix, poll_epsilon, BudgetState, GateReason};
use rrpoll_core::poll::{flatten, parse_poll, validate_poll, Poll};
use rrpoll_core::rational::{format_rational, ratio, to_f64};
use rrpoll_core::respondent::{
    begin_session, observable_trace, LogicalClock, LoopbackTransport, MessageKind, RecordingTransport, Session,
    SessionState, StepCounter,
};
use rrpoll_server::{router, ActivePoll, AppState, ResponseLog};
use rrpoll_sim::{accuracy_backtest, sample_mechanism, Execution};

type Outcome = Result<String, String>;
type Answers<'a> = Vec<(&'a str, Vec<String>)>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    };
}

fn symmetric(truth_ratio: &str, k: usize) -> Poll {
    let answers: Vec<String> = (0..k)
        .map(|i| format!(r#"{{"id":"a{i}","text":"A{i}","weight":"1/1"}}"#))
        .collect();
    parse_poll(&format!(
        r#"{{"title":"sym","truth_ratio":"{truth_ratio}","questions":[{{"id":"q","text":"?","answers":[{}]}}]}}"#,
        answers.join(",")
    ))
    .unwrap()
}

const PURCHASE: &str = r#"{
  "title": "purchase", "truth_ratio": "1/2", "timeout_ms": 9000,
  "questions": [
    {"id": "Q1", "text": "How do you feel about your purchase?", "answers": [
      {"id": "Happy", "text": "Happy", "weight": "1/1"},
      {"id": "Neutral", "text": "Neutral", "weight": "1/1"},
      {"id": "Unhappy", "text": "Unhappy", "weight": "1/1", "follow_up":
        {"id": "F1", "text": "What's the reason you feel unhappy?", "answers": [
          {"id": "Expectations", "text": "Expectations", "weight": "1/1"},
          {"id": "Damaged", "text": "Damaged", "weight": "1/1"},
          {"id": "Other", "text": "Other", "weight": "1/1"}]}}]},
    {"id": "Q2", "text": "Would you buy again?", "answers": [
      {"id": "Yes", "text": "Yes", "weight": "1/1"},
      {"id": "No", "text": "No", "weight": "1/1"}]},
    {"id": "Q3", "text": "How did you find us?", "answers": [
      {"id": "Search", "text": "Search", "weight": "1/1"},
      {"id": "Friend", "text": "Friend", "weight": "1/1"},
      {"id": "Ad", "text": "Ad", "weight": "1/1"},
      {"id": "Other", "text": "Other", "weight": "1/1"}]}]
}"#;

fn epsilon_exactness() -> Outcome {
    let eps = poll_epsilon(&symmetric("1/2", 3)).map_err(|e| e.to_string())?;
    let exact = eps.exact_ratio.clone().ok_or("no exact ratio")?;
    ensure!(exact == ratio(4, 1), "exact ratio {}", format_rational(&exact));
    ensure!((eps.value - 4f64.ln()).abs() <= 1e-12, "epsilon {}", eps.value);
    Ok(format!("ratio {}, epsilon {:.15}", format_rational(&exact), eps.value))
}

fn non_uniform_epsilon() -> Outcome {
    let poll = parse_poll(
        r#"{"title":"w","truth_ratio":"1/2","questions":[{"id":"q","text":"?","answers":[
            {"id":"a","text":"A","weight":"1/1"},{"id":"b","text":"B","weight":"1/2"}]}]}"#,
    )
    .unwrap();
    let eps = poll_epsilon(&poll).map_err(|e| e.to_string())?;
    ensure!(eps.exact_ratio == Some(ratio(5, 2)), "exact ratio {:?}", eps.exact_ratio.map(|r| format_rational(&r)));
    ensure!((eps.value - 2.5f64.ln()).abs() <= 1e-12, "epsilon {}", eps.value);
    Ok(format!("epsilon {:.15}", eps.value))
}

fn flattening() -> Outcome {
    let poll = parse_poll(PURCHASE).unwrap();
    let leaves: Vec<String> = flatten(&poll.questions[0]).iter().map(|l| l.path.join("/")).collect();
    let expected = ["Happy", "Neutral", "Unhappy/Expectations", "Unhappy/Damaged", "Unhappy/Other"];
    ensure!(leaves == expected, "leaves {leaves:?}");
    Ok(leaves.join(", "))
}

fn chernoff_round_trips() -> Outcome {
    let mut checked = 0;
    for eps in [2f64.ln(), 4f64.ln(), 2.0] {
        for beta in [0.01, 0.05, 0.1] {
            for n in [100u64, 1000, 100_000] {
                let alpha = alpha_from(eps, beta, n).map_err(|e| e.to_string())?;
                let back = beta_from(eps, alpha, n).map_err(|e| e.to_string())?.value;
                ensure!((back - beta).abs() <= 1e-9, "beta {beta} -> {back} at eps {eps}, n {n}");
                let n_back = n_from(eps, alpha, beta).map_err(|e| e.to_string())?;
                ensure!(n_back == n || n_back == n + 1, "n {n} -> {n_back} at eps {eps}, beta {beta}");
                let lambda = lambda_of(beta, n).map_err(|e| e.to_string())?;
                let eps_back = epsilon_from(alpha, lambda).map_err(|e| e.to_string())?;
                ensure!((eps_back - eps).abs() <= 1e-9, "eps {eps} -> {eps_back} at beta {beta}, n {n}");
                checked += 1;
            }
        }
    }
    Ok(format!("{checked} grid points"))
}

fn sampling_fidelity() -> Outcome {
    let m = build_matrix(&symmetric("1/2", 3).questions[0], &ratio(1, 2)).map_err(|e| e.to_string())?;
    let empirical = sample_mechanism(&m, 1_000_000, 20_240_601, Execution::Parallel);
    let freqs = empirical.frequencies();
    let mut worst = 0.0f64;
    for (a, row) in freqs.iter().enumerate() {
        for (b, f) in row.iter().enumerate() {
            worst = worst.max((f - to_f64(m.entry(a, b))).abs());
        }
    }
    ensure!(worst <= 0.005, "largest cell deviation {worst}");
    let ratio = empirical.max_ratio().ok_or("unbounded column ratio")?;
    ensure!(ratio <= 4.2, "max column ratio {ratio}");
    Ok(format!("max cell deviation {worst:.5}, max column ratio {ratio:.4}"))
}

fn denoising() -> Outcome {
    let m = build_matrix(&symmetric("1/2", 3).questions[0], &ratio(1, 2)).map_err(|e| e.to_string())?;
    let raw = denoise(&[600, 250, 150], &m).map_err(|e| e.to_string())?;
    let expected = [ratio(2600, 3), ratio(500, 3), ratio(-100, 3)];
    ensure!(raw == expected, "raw {:?}", raw.iter().map(format_rational).collect::<Vec<_>>());
    let approx: Vec<f64> = raw.iter().map(to_f64).collect();
    let clamped = clamp_renormalize(&approx, 1000);
    for (c, e) in clamped.iter().zip([838.71, 161.29, 0.0]) {
        ensure!((c - e).abs() <= 0.01, "clamped {clamped:?}");
    }
    Ok(format!(
        "raw ({}), clamped ({:.2}, {:.2}, {:.2})",
        raw.iter().map(format_rational).collect::<Vec<_>>().join(", "),
        clamped[0],
        clamped[1],
        clamped[2]
    ))
}

fn accuracy_backtest_coverage() -> Outcome {
    let poll = symmetric("1/2", 3);
    let dist = BTreeMap::from([(
        "q".to_owned(),
        BTreeMap::from([
            ("a0".to_owned(), "1/2".to_owned()),
            ("a1".to_owned(), "3/10".to_owned()),
            ("a2".to_owned(), "1/5".to_owned()),
        ]),
    )]);
    let bt = accuracy_backtest(&poll, &dist, 1000, 200, 42, Execution::Parallel).map_err(|e| e.to_string())?;
    let alpha = bt.alpha.first().copied().flatten().ok_or("no alpha")?;
    ensure!((alpha - 0.0716).abs() < 1e-4, "alpha {alpha}");
    ensure!(bt.coverage >= 0.92, "coverage {} ({} of {})", bt.coverage, bt.covered, bt.trials);
    Ok(format!("coverage {:.3} ({} of {}), alpha {alpha:.4}", bt.coverage, bt.covered, bt.trials))
}

fn side_channel_suite() -> Outcome {
    let poll = parse_poll(PURCHASE).unwrap();
    let document = rrpoll_core::poll::serialize_poll(&poll);
    let path = |p: &[&str]| p.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    let some: Answers = vec![("Q1", path(&["Unhappy", "Damaged"]))];
    let all: Answers = vec![
        ("Q1", path(&["Happy"])),
        ("Q2", path(&["No"])),
        ("Q3", path(&["Friend"])),
    ];
    let personas: Vec<(&str, Answers, bool)> = vec![
        ("none/fast", vec![], false),
        ("none/slow", vec![], true),
        ("some/fast", some.clone(), false),
        ("some/slow", some, true),
        ("all/fast", all.clone(), false),
        ("all/slow", all, true),
    ];
    let ids: BTreeSet<String> = poll.subtree_ids().map(str::to_owned).collect();
    let mut step_counts = Vec::new();
    for (seed, (name, answers, slow)) in personas.into_iter().enumerate() {
        let clock = LogicalClock::new(1_000);
        let mut transport = RecordingTransport::new(LoopbackTransport::new(document.as_str()), clock.clone());
        let mut rng = ChaCha20Rng::seed_from_u64(seed as u64);
        let mut session = Session::fetch(&mut transport, BudgetState::new(100.0), &mut rng, clock.clone())
            .map_err(|e| format!("{name}: {e}"))?;
        ensure!(session.state() == SessionState::Open, "{name}: session not open");
        let deadline = session.deadline_ms();
        if slow {
            clock.set(deadline - 1);
        }
        for (subtree, leaf) in &answers {
            session.record_answer(subtree, leaf).map_err(|e| format!("{name}: {e}"))?;
        }
        let early = session.tick(&mut rng, &mut transport).map_err(|e| e.to_string())?;
        ensure!(early.is_none(), "{name}: emitted before the deadline");
        clock.set(deadline);
        let mut probe = StepCounter::default();
        session
            .finalize_probed(&mut rng, &mut transport, &mut probe)
            .map_err(|e| format!("{name}: {e}"))?;
        let trace = observable_trace(transport.messages());
        ensure!(
            trace.message_kinds == [MessageKind::PollRequest, MessageKind::Submission],
            "{name}: messages {:?}",
            trace.message_kinds
        );
        ensure!(trace.payload_keys[1] == ids, "{name}: keys {:?}", trace.payload_keys[1]);
        ensure!(trace.emission_offset_ms == Some(poll.timeout_ms), "{name}: offset {:?}", trace.emission_offset_ms);
        step_counts.push((name, probe.0));
    }
    let first = &step_counts[0].1;
    for (name, counts) in &step_counts {
        ensure!(counts == first, "{name}: step counts {counts:?} differ from {first:?}");
    }
    Ok(format!("6 personas, 2 messages each, emitted at +{} ms, steps {:?}", poll.timeout_ms, first))
}

fn gate_suite() -> Outcome {
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    let certain = symmetric("1/1", 3);
    ensure!(validate_poll(&certain).iter().any(|v| v.is_gate()), "truth ratio 1 not flagged");
    let session = begin_session(certain, BudgetState::new(100.0), &mut rng, LogicalClock::new(0)).map_err(|e| e.to_string())?;
    ensure!(session.state() == SessionState::Refused, "truth ratio 1 admitted");
    ensure!(
        session.admission().reasons.contains(&GateReason::TruthThreshold),
        "reasons {:?}",
        session.admission().reasons
    );

    let poll = parse_poll(PURCHASE).unwrap();
    let eps = poll_epsilon(&poll).map_err(|e| e.to_string())?.value;
    let session = begin_session(poll.clone(), BudgetState::new(eps - 1e-9), &mut rng, LogicalClock::new(0)).map_err(|e| e.to_string())?;
    ensure!(session.state() == SessionState::Refused, "over-budget poll admitted");
    ensure!(session.admission().reasons == [GateReason::OverBudget], "reasons {:?}", session.admission().reasons);
    ensure!(session.budget().spent == 0.0, "refusal debited {}", session.budget().spent);

    let session = begin_session(poll, BudgetState::new(10.0), &mut rng, LogicalClock::new(0)).map_err(|e| e.to_string())?;
    ensure!(session.state() == SessionState::Open, "affordable poll refused");
    ensure!(session.budget().spent == eps, "debited {} for epsilon {eps}", session.budget().spent);
    Ok(format!("refused at t=1 and over budget; admitted poll debited {eps:.6}"))
}

fn protocol_conformance() -> Outcome {
    let runtime = tokio::runtime::Builder::new_current_thread().build().map_err(|e| e.to_string())?;
    runtime.block_on(async {
        let state = AppState::new(Some(ActivePoll::parse(PURCHASE).map_err(|e| e.to_string())?), ResponseLog::in_memory(), 0.05);
        let app = router(state.clone());
        let send = |req: Request<Body>| {
            let app = app.clone();
            async move {
                let resp = app.oneshot(req).await.unwrap();
                let status = resp.status();
                let body = resp.into_body().collect().await.unwrap().to_bytes();
                (status, body)
            }
        };
        let get = |uri: &str| Request::get(uri).body(Body::empty()).unwrap();
        let post = |body: String| {
            Request::post("/submit")
                .header("content-type", "application/json")
                .body(Body::from(body))
                .unwrap()
        };

        let (s1, p1) = send(get("/poll")).await;
        let (_, p2) = send(get("/poll")).await;
        let (_, p3) = send(get("/poll?who=42")).await;
        ensure!(s1 == StatusCode::OK && p1 == p2 && p1 == p3, "/poll responses differ");

        let (status, _) = send(post(r#"{"responses":{"Q1":["Happy"],"Q2":["Yes"]}}"#.into())).await;
        ensure!(status == StatusCode::BAD_REQUEST, "missing subtree answered {status}");
        ensure!(state.snapshot().is_empty(), "rejected submission was stored");

        for seed in 0..40u64 {
            let clock = LogicalClock::new(0);
            let mut transport = LoopbackTransport::new(String::from_utf8(p1.to_vec()).unwrap());
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let mut session = Session::fetch(&mut transport, BudgetState::new(100.0), &mut rng, clock.clone())
                .map_err(|e| e.to_string())?;
            clock.set(session.deadline_ms());
            session.tick(&mut rng, &mut transport).map_err(|e| e.to_string())?;
            let (status, _) = send(post(transport.submissions.pop().unwrap())).await;
            ensure!(status == StatusCode::OK, "valid submission answered {status}");
        }
        let (_, r1) = send(get("/results")).await;
        let (_, r2) = send(get("/results")).await;
        ensure!(r1 == r2, "/results differ on the same snapshot");
        Ok(format!("/poll stable ({} bytes), missing subtree -> 400, /results stable over 40 responses", p1.len()))
    })
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("epsilon exactness", epsilon_exactness),
        ("non-uniform epsilon", non_uniform_epsilon),
        ("flattening", flattening),
        ("Chernoff round-trips", chernoff_round_trips),
        ("sampling fidelity", sampling_fidelity),
        ("denoising", denoising),
        ("accuracy backtest", accuracy_backtest_coverage),
        ("side-channel structure", side_channel_suite),
        ("gates", gate_suite),
        ("protocol conformance", protocol_conformance),
    ];
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, check) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|panic| {
            let message = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {message}"))
        });
        let elapsed = fmt_elapsed(start.elapsed());
        match outcome {
            Ok(detail) => println!("PASS  {name:<24} {elapsed:>8}  {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name:<24} {elapsed:>8}  {detail}");
            }
        }
    }
    println!("\nacceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn fmt_elapsed(d: Duration) -> String {
    format!("{:.2}s", d.as_secs_f64())
}

