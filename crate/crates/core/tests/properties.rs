use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde_json::Value;

use rrpoll_core::aggregator::denoise;
use rrpoll_core::mechanism::{build_matrix, epsilon_of_matrix, poll_epsilon, randomize};
use rrpoll_core::poll::{flatten, parse_poll, serialize_poll, AnswerOption, Poll, Question};
use rrpoll_core::rational::{ratio, to_f64, Rational};
use rrpoll_core::sampling::ExactSampler;

fn weight() -> impl Strategy<Value = Rational> {
    (1i64..=12).prop_flat_map(|d| (1i64..=d, Just(d))).prop_map(|(n, d)| ratio(n, d))
}

fn question(depth: u32) -> BoxedStrategy<Question> {
    let leafy = prop::collection::vec((weight(), Just(None)), 2..=5).boxed();
    let answers = if depth == 0 {
        leafy
    } else {
        prop::collection::vec((weight(), prop::option::weighted(0.3, question(depth - 1))), 2..=5).boxed()
    };
    answers
        .prop_map(|answers| Question {
            id: String::new(),
            text: "Which?".into(),
            answers: answers
                .into_iter()
                .map(|(weight, follow_up)| AnswerOption {
                    id: String::new(),
                    text: String::new(),
                    weight,
                    follow_up: follow_up.map(Box::new),
                })
                .collect(),
        })
        .boxed()
}

// Gives every node a document-unique id so the poll validates.
fn number(q: &mut Question, next: &mut usize) {
    q.id = format!("q{next}");
    *next += 1;
    for (i, a) in q.answers.iter_mut().enumerate() {
        a.id = format!("a{i}");
        a.text = format!("Answer {i}");
        if let Some(f) = &mut a.follow_up {
            number(f, next);
        }
    }
}

fn arb_poll() -> impl Strategy<Value = Poll> {
    (prop::collection::vec(question(3), 1..=3), 1i64..=9).prop_map(|(mut questions, t)| {
        let mut next = 0;
        for q in &mut questions {
            number(q, &mut next);
        }
        Poll {
            title: "generated".into(),
            truth_ratio: ratio(t, 10),
            truth_threshold: ratio(99, 100),
            budget: ratio(1000, 1),
            timeout_ms: 5000,
            questions,
        }
    })
}

/// Leaf count straight from the JSON document.
fn json_leaves(question: &Value) -> usize {
    question["answers"]
        .as_array()
        .unwrap()
        .iter()
        .map(|a| match a.get("follow_up") {
            Some(f) => json_leaves(f),
            None => 1,
        })
        .sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn canonical_json_round_trips(poll in arb_poll()) {
        let text = serialize_poll(&poll);
        let back = parse_poll(&text).unwrap();
        prop_assert_eq!(&back, &poll);
        prop_assert_eq!(serialize_poll(&back), text);
    }

    #[test]
    fn flattening_matches_leaf_count_oracle(poll in arb_poll()) {
        let doc: Value = serde_json::from_str(&serialize_poll(&poll)).unwrap();
        for (q, qdoc) in poll.questions.iter().zip(doc["questions"].as_array().unwrap()) {
            let leaves = flatten(q);
            prop_assert_eq!(leaves.len(), json_leaves(qdoc));
            let mut paths: Vec<_> = leaves.iter().map(|l| l.path.clone()).collect();
            paths.dedup();
            prop_assert_eq!(paths.len(), leaves.len());
            for leaf in &leaves {
                prop_assert_eq!(q.leaf_index(&leaf.path).map(|i| &leaves[i].path), Some(&leaf.path));
            }
        }
    }

    #[test]
    fn poll_epsilon_is_sum_of_subtree_epsilons(poll in arb_poll()) {
        let total = poll_epsilon(&poll).unwrap();
        let parts: f64 = poll
            .questions
            .iter()
            .map(|q| epsilon_of_matrix(&build_matrix(q, &poll.truth_ratio).unwrap()).unwrap().value)
            .sum();
        prop_assert!((total.value - parts).abs() < 1e-9);
    }

    #[test]
    fn symmetric_epsilon_has_closed_form(k in 2i64..9, n in 1i64..20) {
        let q = Question {
            id: "q".into(),
            text: "?".into(),
            answers: (0..k)
                .map(|i| AnswerOption { id: format!("a{i}"), text: "A".into(), weight: ratio(1, 1), follow_up: None })
                .collect(),
        };
        let t = ratio(n, 20);
        let eps = epsilon_of_matrix(&build_matrix(&q, &t).unwrap()).unwrap();
        // (t + r) / r with r = (1 - t) / k
        let expected = ratio(1, 1) + &t * ratio(k, 1) / (ratio(1, 1) - &t);
        prop_assert_eq!(eps.exact_ratio.unwrap(), expected);
    }

    #[test]
    fn epsilon_matches_float_brute_force(poll in arb_poll()) {
        for q in &poll.questions {
            let m = build_matrix(q, &poll.truth_ratio).unwrap();
            let mut worst = 1.0f64;
            for b in 0..m.len() {
                let col: Vec<f64> = (0..m.len()).map(|a| to_f64(m.entry(a, b))).collect();
                let max = col.iter().cloned().fold(f64::MIN, f64::max);
                let min = col.iter().cloned().fold(f64::MAX, f64::min);
                worst = worst.max(max / min);
            }
            let eps = epsilon_of_matrix(&m).unwrap().value;
            prop_assert!((eps - worst.ln()).abs() < 1e-9);
        }
    }
}

#[test]
fn exact_sampler_passes_chi_squared() {
    // critical values at p = 0.001 for 1..=5 degrees of freedom
    const CRITICAL: [f64; 5] = [10.83, 13.82, 16.27, 18.47, 20.52];
    let cases = [
        vec![ratio(1, 2), ratio(1, 2)],
        vec![ratio(1, 3), ratio(1, 6), ratio(1, 2)],
        vec![ratio(1, 7), ratio(2, 7), ratio(4, 7)],
        vec![ratio(1, 10), ratio(1, 5), ratio(3, 10), ratio(2, 5)],
        vec![ratio(1, 12), ratio(1, 12), ratio(1, 6), ratio(1, 4), ratio(5, 12)],
        vec![ratio(1, 11), ratio(2, 11), ratio(3, 11), ratio(1, 11), ratio(2, 11), ratio(2, 11)],
    ];
    let draws = 60_000u64;
    for (i, dist) in cases.iter().enumerate() {
        let sampler = ExactSampler::new(dist).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(100 + i as u64);
        let mut counts = vec![0u64; dist.len()];
        for _ in 0..draws {
            counts[sampler.sample(&mut rng)] += 1;
        }
        let chi2: f64 = counts
            .iter()
            .zip(dist)
            .map(|(&c, p)| {
                let e = to_f64(p) * draws as f64;
                (c as f64 - e).powi(2) / e
            })
            .sum();
        assert!(chi2 < CRITICAL[dist.len() - 2], "case {i}: chi2 {chi2}, counts {counts:?}");
    }
}

#[test]
fn denoised_estimates_are_unbiased() {
    let q = parse_poll(
        r#"{"title":"u","truth_ratio":"1/2","questions":[{"id":"q","text":"?","answers":[
            {"id":"a","text":"A","weight":"1/1"},
            {"id":"b","text":"B","weight":"1/2"},
            {"id":"c","text":"C","weight":"1/1"}]}]}"#,
    )
    .unwrap();
    let m = build_matrix(&q.questions[0], &q.truth_ratio).unwrap();
    let truth = [500u64, 300, 200];
    let trials = 200;
    let mut rng = ChaCha20Rng::seed_from_u64(77);
    let mut sums = [0.0f64; 3];
    for _ in 0..trials {
        let mut counts = vec![0u64; 3];
        for (leaf, &n) in truth.iter().enumerate() {
            for _ in 0..n {
                counts[randomize(leaf, &m, &mut rng)] += 1;
            }
        }
        for (s, raw) in sums.iter_mut().zip(denoise(&counts, &m).unwrap()) {
            *s += to_f64(&raw);
        }
    }
    for (s, &t) in sums.iter().zip(&truth) {
        let mean = s / trials as f64;
        // per-trial sd is about 40 here, so the mean's sd is under 3
        assert!((mean - t as f64).abs() < 10.0, "mean {mean} for truth {t}");
    }
}
