//! Acceptance suite. Prints one PASS/FAIL line per criterion, then fails
//! the test if any criterion failed.

mod common;

use std::io::Write;
use std::sync::Arc;
use std::time::{Duration, Instant};

use apc_core::judge::{
    ChatMessage, ChatRequest, ChatResponse, Exchange, ReplayTransport, RetryPolicy,
    RETRY_INSTRUCTION,
};
use apc_core::pipeline::{
    apc_dpo_loss, assign_preference, build_nli_dataset, build_relevance_dataset, dpo_pair_loss,
    DistillParams, PerStatementDpoTerm,
};
use apc_core::scoring::{
    boolean_apc, boolean_apc_global, decompose, delta_v_apc, delta_v_apc_of, p_apc, v_apc,
    BooleanJudgment,
};
use apc_core::types::DpoPairTerms;
use apc_core::{
    evaluate_constraint, validate_persona, ApcReport, ChatBackend, ConstraintEval,
    GenerationRequest, Generator, Judge, JudgeError, NliDist, NliLabel, PersonaStatement,
    PromptTemplates, RelevanceDist, ViolationKind,
};
use common::{apc, fixture, stderr, MockChat};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome, Duration);
type ScoredPair = (f64, f64, Option<(usize, usize)>);

fn check(cond: bool, what: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(what.into())
    }
}

fn random_nli(rng: &mut ChaCha8Rng) -> NliDist {
    let a: f64 = rng.random();
    let b: f64 = rng.random();
    let (lo, hi) = (a.min(b), a.max(b));
    NliDist::new(lo, hi - lo, (1.0 - hi).max(0.0)).unwrap()
}

fn random_evals(rng: &mut ChaCha8Rng, max: usize) -> Vec<ConstraintEval> {
    let n = rng.random_range(0..=max);
    (0..n)
        .map(|i| {
            let rel = RelevanceDist::new(rng.random()).unwrap();
            evaluate_constraint(i as u64, rel, random_nli(rng))
        })
        .collect()
}

fn c1_boolean_equivalence() -> Outcome {
    let mut cases = 0;
    for n in 0..=4u32 {
        for code in 0..6usize.pow(n) {
            let mut c = code;
            let mut judgments = Vec::new();
            for _ in 0..n {
                judgments.push(BooleanJudgment {
                    relevant: c % 2 == 1,
                    nli_label: NliLabel::ALL[(c / 2) % 3],
                });
                c /= 6;
            }
            let evals: Vec<ConstraintEval> = judgments
                .iter()
                .enumerate()
                .map(|(i, j)| {
                    let rel = if j.relevant {
                        RelevanceDist::relevant()
                    } else {
                        RelevanceDist::irrelevant()
                    };
                    evaluate_constraint(i as u64, rel, NliDist::one_hot(j.nli_label))
                })
                .collect();
            let satisfied = judgments.iter().filter(|j| boolean_apc(**j)).count() as f64;
            let v = v_apc(&evals);
            check(
                v == satisfied,
                format!("v_apc {v} != {satisfied} at {judgments:?}"),
            )?;
            check(
                boolean_apc_global(&judgments) == (v == n as f64),
                format!("global mismatch at {judgments:?}"),
            )?;
            cases += 1;
        }
    }
    Ok(format!("{cases} assignments"))
}

fn c2_neutral_baseline() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.random_range(1..=50);
        let evals: Vec<ConstraintEval> = (0..n)
            .map(|i| {
                let rel = RelevanceDist::new(rng.random()).unwrap();
                evaluate_constraint(i, rel, NliDist::neutral())
            })
            .collect();
        worst = worst.max(delta_v_apc_of(&evals).abs());
    }
    check(worst <= 1e-9, format!("max |ΔV| = {worst:e}"))?;
    Ok(format!("1000 personas, max |ΔV| = {worst:e}"))
}

fn c3_decomposition() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let evals = random_evals(&mut rng, 50);
        let d = decompose(&evals);
        worst = worst.max((delta_v_apc_of(&evals) - (d.active_reward - d.passive_penalty)).abs());
    }
    check(worst <= 1e-9, format!("max error {worst:e}"))?;
    Ok(format!("10000 sets, max error {worst:e}"))
}

fn c4_range_and_monotonicity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..10_000 {
        let evals = random_evals(&mut rng, 30);
        let n = evals.len() as f64;
        let v = v_apc(&evals);
        check(
            (0.0..=n + 1e-9).contains(&v),
            format!("v_apc {v} outside [0, {n}]"),
        )?;
        let rels: Vec<RelevanceDist> = evals.iter().map(|e| e.relevance()).collect();
        let d = delta_v_apc(v, &rels);
        let lo: f64 = rels.iter().map(|r| r.p_irrelevant()).sum();
        let hi: f64 = rels.iter().map(|r| r.p_relevant()).sum();
        check(
            d >= -lo - 1e-9 && d <= hi + 1e-9,
            format!("ΔV {d} outside [-{lo}, {hi}]"),
        )?;
        for e in &evals {
            check((0.0..=1.0).contains(&e.p_apc()), "p_apc outside [0, 1]")?;
        }

        let rel = RelevanceDist::new(rng.random()).unwrap();
        let nli = random_nli(&mut rng);
        let moved = nli.p_neutral() * rng.random::<f64>();
        let base = p_apc(rel, nli);
        if let Ok(more_e) = NliDist::new(
            nli.p_entailed() + moved,
            nli.p_neutral() - moved,
            nli.p_contradicted(),
        ) {
            check(
                p_apc(rel, more_e) >= base - 1e-12,
                "more entailment lowered p_apc",
            )?;
        }
        if let Ok(more_c) = NliDist::new(
            nli.p_entailed(),
            nli.p_neutral() - moved,
            nli.p_contradicted() + moved,
        ) {
            check(
                p_apc(rel, more_c) <= base + 1e-12,
                "more contradiction raised p_apc",
            )?;
        }
    }
    Ok("10000 instances".into())
}

fn terms(beta: f64, pw: f64, pl: f64, rw: f64, rl: f64) -> DpoPairTerms {
    DpoPairTerms {
        beta,
        policy_logp_w: pw,
        policy_logp_l: pl,
        ref_logp_w: rw,
        ref_logp_l: rl,
    }
}

fn c5_dpo() -> Outcome {
    let ln2 = std::f64::consts::LN_2;
    let equal = dpo_pair_loss(&terms(0.7, -4.0, -9.0, -3.0, -8.0)).unwrap();
    check(
        (equal - ln2).abs() <= 1e-12,
        format!("equal ratios gave {equal}"),
    )?;
    let l3 = dpo_pair_loss(&terms(1.0, 3f64.ln(), 0.0, 0.0, 0.0)).unwrap();
    check(
        (l3 + 0.75f64.ln()).abs() <= 1e-12,
        format!("ln 3 margin gave {l3}"),
    )?;

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let h = 1e-4;
    for _ in 0..100 {
        let t = terms(
            rng.random_range(0.05..4.0),
            rng.random_range(-30.0..0.0),
            rng.random_range(-30.0..0.0),
            rng.random_range(-30.0..0.0),
            rng.random_range(-30.0..0.0),
        );
        let f = |t: DpoPairTerms| dpo_pair_loss(&t).unwrap();
        let dw = f(DpoPairTerms {
            policy_logp_w: t.policy_logp_w + h,
            ..t
        }) - f(DpoPairTerms {
            policy_logp_w: t.policy_logp_w - h,
            ..t
        });
        let dl = f(DpoPairTerms {
            policy_logp_l: t.policy_logp_l + h,
            ..t
        }) - f(DpoPairTerms {
            policy_logp_l: t.policy_logp_l - h,
            ..t
        });
        check(dw <= 0.0 && dl >= 0.0, format!("wrong slope sign at {t:?}"))?;
    }

    // dyadic terms keep every sum exact
    let make = |r: f64, a: f64, p: f64| PerStatementDpoTerm::new(r, a, p).unwrap();
    let a = vec![
        make(0.25, 0.5, 1.5),
        make(1.0, 0.125, 3.0),
        make(0.0, 2.0, 0.75),
    ];
    let b = vec![make(0.5, 1.0, 1.0), make(0.875, 0.25, 0.5)];
    let joined: Vec<_> = a.iter().chain(&b).copied().collect();
    check(
        apc_dpo_loss(&joined) == apc_dpo_loss(&a) + apc_dpo_loss(&b),
        "not additive",
    )?;
    let mut rev = joined.clone();
    rev.reverse();
    check(
        apc_dpo_loss(&rev) == apc_dpo_loss(&joined),
        "order dependent",
    )?;
    check(
        (apc_dpo_loss(&[make(0.5, 0.4, 0.8)]) - 0.6).abs() < 1e-12,
        "weighting",
    )?;
    check(
        apc_dpo_loss(&[make(1.0, ln2, 5.0)]) == ln2,
        "fully relevant term",
    )?;
    Ok("ln 2, -ln 0.75, 100 slope checks, linearity".into())
}

fn c6_preference_filter() -> Outcome {
    // (score_a, score_b, expected at margin 0.2), hand-checked
    let fixture: [ScoredPair; 10] = [
        (0.9, 0.1, Some((0, 1))),
        (0.1, 0.9, Some((1, 0))),
        (0.5, 0.3, None), // gap equals the margin
        (0.3, 0.3, None),
        (1.25, 1.0, Some((0, 1))),
        (-0.5, -0.25, Some((1, 0))),
        (2.0, 1.85, None),
        (0.0, 0.21, Some((1, 0))),
        (-1.0, 1.0, Some((1, 0))),
        (0.6, 0.45, None),
    ];
    for (a, b, want) in fixture {
        check(
            assign_preference(a, b, 0.2) == want,
            format!("({a}, {b}) at 0.2"),
        )?;
    }
    let kept0 = fixture
        .iter()
        .filter(|(a, b, _)| assign_preference(*a, *b, 0.0).is_some())
        .count();
    check(kept0 == 9, format!("margin 0 kept {kept0}, want 9"))?;
    let kept_huge = fixture
        .iter()
        .filter(|(a, b, _)| assign_preference(*a, *b, 1e9).is_some())
        .count();
    check(kept_huge == 0, "huge margin kept pairs")?;
    Ok("10 pairs: 6 kept at 0.2, 9 at 0, 0 at 1e9".into())
}

struct EchoGenerator;

impl Generator for EchoGenerator {
    fn identity(&self) -> String {
        "echo".into()
    }
    fn max_in_flight(&self) -> usize {
        4
    }
    fn generate_text(&self, r: &GenerationRequest) -> Result<Vec<String>, JudgeError> {
        let tag = r.prompt.lines().nth(1).unwrap_or("").to_owned();
        Ok((0..r.n).map(|i| format!("{tag} #{i}/{}", r.draw)).collect())
    }
}

struct IrrelevantJudge;

impl Judge for IrrelevantJudge {
    fn identity(&self) -> String {
        "irrelevant".into()
    }
    fn max_in_flight(&self) -> usize {
        4
    }
    fn judge_relevance(
        &self,
        _: &str,
        _: &PersonaStatement,
        _: &str,
    ) -> Result<RelevanceDist, JudgeError> {
        Ok(RelevanceDist::irrelevant())
    }
    fn judge_nli(
        &self,
        _: &str,
        s: &PersonaStatement,
        _: &str,
        response: &str,
    ) -> Result<NliDist, JudgeError> {
        let label = NliLabel::ALL[(s.id() as usize + response.len()) % 3];
        Ok(NliDist::one_hot(label))
    }
}

fn distill_bytes(size: usize, seed: u64) -> Result<(String, usize, usize, DistillParams), String> {
    let raw: Vec<String> = (0..size).map(|i| format!("Fact number {i}.")).collect();
    let persona = validate_persona("Stub", &raw).unwrap();
    let params = DistillParams {
        relevance_negatives_per_query: 5.min(size - 1),
        nli_distractors_per_pair: 3.min(size - 1),
        rng_seed: seed,
        ..Default::default()
    };
    let prompts = PromptTemplates::default();
    let rel = build_relevance_dataset(
        &persona,
        &EchoGenerator,
        &IrrelevantJudge,
        &prompts,
        &params,
    )
    .map_err(|e| e.to_string())?;
    let nli = build_nli_dataset(
        &persona,
        &rel,
        &EchoGenerator,
        &IrrelevantJudge,
        &prompts,
        &params,
    )
    .map_err(|e| e.to_string())?;
    let bytes = format!(
        "{}{}{}{}",
        rel.to_jsonl(),
        serde_json::to_string(&rel.metadata).unwrap(),
        nli.to_jsonl(),
        serde_json::to_string(&nli.metadata).unwrap()
    );
    Ok((bytes, rel.records.len(), nli.records.len(), params))
}

fn c7_pipeline_counts() -> Outcome {
    let mut summary = Vec::new();
    for size in [2usize, 3, 8] {
        let (a, rel, nli, p) = distill_bytes(size, 7)?;
        let (b, ..) = distill_bytes(size, 7)?;
        check(a == b, format!("|S|={size}: runs differ"))?;
        let q = p.queries_per_statement;
        let want_rel = size * q * (1 + p.relevance_negatives_per_query);
        let want_nli = size * q * 3 * (1 + p.nli_distractors_per_pair);
        check(
            rel == want_rel,
            format!("|S|={size}: {rel} relevance records, want {want_rel}"),
        )?;
        check(
            nli == want_nli,
            format!("|S|={size}: {nli} NLI records, want {want_nli}"),
        )?;
        summary.push(format!("|S|={size}: {rel}/{nli}"));
    }
    Ok(summary.join(", "))
}

fn c8_end_to_end_cli() -> Outcome {
    let persona = fixture("persona.jsonl");
    let interactions = fixture("interactions.jsonl");
    let oracle = fixture("oracle.json");
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("cache");
    let base = [
        "score",
        persona.to_str().unwrap(),
        interactions.to_str().unwrap(),
        "--oracle-file",
        oracle.to_str().unwrap(),
        "--cache-dir",
        cache.to_str().unwrap(),
    ];
    let first = apc(&base);
    check(first.status.success(), stderr(&first))?;
    let report: ApcReport = serde_json::from_slice(&first.stdout).map_err(|e| e.to_string())?;
    let row = &report.per_interaction[0];
    // hand-evaluated on the fixture
    check(row.v_apc == 1.3125, format!("V = {}", row.v_apc))?;
    check(
        row.delta_v_apc == -0.4375,
        format!("ΔV = {}", row.delta_v_apc),
    )?;
    check(
        row.active_reward == 0.234375,
        format!("active = {}", row.active_reward),
    )?;
    check(
        row.passive_penalty == 0.671875,
        format!("passive = {}", row.passive_penalty),
    )?;
    let kinds: Vec<_> = row
        .violations
        .iter()
        .map(|v| (v.statement_id, v.kind))
        .collect();
    check(
        kinds
            == [
                (1, ViolationKind::ActiveMiss),
                (2, ViolationKind::PassiveContradiction),
            ],
        format!("violations {kinds:?}"),
    )?;
    check(
        report.aggregates.mean_delta_v_apc == 0.109375,
        "aggregate ΔV",
    )?;

    let second = apc(&base);
    check(
        stderr(&second).contains(" 0 misses"),
        format!("oracle rerun: {}", stderr(&second)),
    )?;
    check(first.stdout == second.stdout, "rerun output differs")?;

    // same contract against a live HTTP backend
    let server = MockChat::start();
    let chat_cache = dir.path().join("chat-cache");
    let chat = [
        "score",
        persona.to_str().unwrap(),
        interactions.to_str().unwrap(),
        "--backend",
        "cached-chat",
        "--endpoint",
        &server.url,
        "--model",
        "mock",
        "--cache-dir",
        chat_cache.to_str().unwrap(),
    ];
    check(apc(&chat).status.success(), "chat run failed")?;
    let live = server.hits();
    check(apc(&chat).status.success(), "chat rerun failed")?;
    check(
        server.hits() == live,
        format!("rerun made {} live calls", server.hits() - live),
    )?;
    Ok(format!(
        "report exact; reruns made 0 live calls ({live} on first chat run)"
    ))
}

fn request(prompt: &str, n: usize) -> ChatRequest {
    ChatRequest {
        model: "recorded".into(),
        messages: vec![ChatMessage::user(prompt)],
        temperature: 0.0,
        n,
    }
}

fn replay_backend(exchanges: Vec<Exchange>, votes: u32) -> (ChatBackend, Arc<ReplayTransport>) {
    let transport = Arc::new(ReplayTransport::new(exchanges));
    let backend = ChatBackend::new(transport.clone(), "http://recorded", "recorded")
        .with_votes(votes)
        .with_retry(RetryPolicy::immediate(3));
    (backend, transport)
}

fn c9_chat_contract() -> Outcome {
    let prompts = PromptTemplates::default();
    let statement = PersonaStatement::new(0, "Mira Okafor is a marine biologist.").unwrap();
    let query = "What do you do for work?";
    let response = "I study coral reefs.";
    let rel_prompt = prompts.relevance_prompt("Mira", statement.text(), query);
    let nli_prompt = prompts.nli_prompt("Mira", statement.text(), query, response);

    // prose before the payload, odd casing and padding
    let (backend, _) = replay_backend(
        vec![
            Exchange::ok(
                request(&rel_prompt, 1),
                ChatResponse::from_contents(["Sure! My answer:\n{\"label\": \"RELEVANT\"}"]),
            ),
            Exchange::ok(
                request(&nli_prompt, 1),
                ChatResponse::from_contents(["Verdict -> {\"label\": \"  Entailed \"}"]),
            ),
        ],
        1,
    );
    let rel = backend
        .judge_relevance("Mira", &statement, query)
        .map_err(|e| e.to_string())?;
    check(rel.p_relevant() == 1.0, "prefixed relevance payload")?;
    let nli = backend
        .judge_nli("Mira", &statement, query, response)
        .map_err(|e| e.to_string())?;
    check(
        nli == NliDist::one_hot(NliLabel::Entailed),
        "prefixed NLI payload",
    )?;

    // malformed payload triggers a re-prompt with the formatting reminder
    let retry_prompt = format!("{rel_prompt}{RETRY_INSTRUCTION}");
    let (backend, transport) = replay_backend(
        vec![
            Exchange::ok(
                request(&rel_prompt, 1),
                ChatResponse::from_contents(["I would say it is relevant."]),
            ),
            Exchange::ok(
                request(&retry_prompt, 1),
                ChatResponse::from_contents(["{\"label\": \"irrelevant\"}"]),
            ),
        ],
        1,
    );
    let rel = backend
        .judge_relevance("Mira", &statement, query)
        .map_err(|e| e.to_string())?;
    check(rel.p_relevant() == 0.0, "retry result")?;
    check(
        transport.call_count() == 2,
        format!("{} calls", transport.call_count()),
    )?;

    // four recorded votes
    let (backend, _) = replay_backend(
        vec![
            Exchange::ok(
                request(&rel_prompt, 4),
                ChatResponse::from_contents([
                    "{\"label\": \"relevant\"}",
                    "{\"label\": \"Relevant\"}",
                    "{\"label\": \"irrelevant\"}",
                    "Answer: {\"label\": \"relevant\"}",
                ]),
            ),
            Exchange::ok(
                request(&nli_prompt, 4),
                ChatResponse::from_contents([
                    "{\"label\": \"entailed\"}",
                    "{\"label\": \"neutral\"}",
                    "{\"label\": \"entailed\"}",
                    "{\"label\": \"contradicted\"}",
                ]),
            ),
        ],
        4,
    );
    let rel = backend
        .judge_relevance("Mira", &statement, query)
        .map_err(|e| e.to_string())?;
    check(
        rel.p_relevant() == 0.75,
        format!("relevance votes gave {}", rel.p_relevant()),
    )?;
    let nli = backend
        .judge_nli("Mira", &statement, query, response)
        .map_err(|e| e.to_string())?;
    check(
        nli.as_array() == [0.5, 0.25, 0.25],
        format!("NLI votes gave {:?}", nli.as_array()),
    )?;
    Ok("prefix/case tolerant, 1 retry, 3/4 from 4 votes".into())
}

#[test]
fn acceptance_criteria() {
    let criteria: [Criterion; 9] = [
        (
            "boolean-oracle equivalence",
            c1_boolean_equivalence,
            Duration::from_secs(5),
        ),
        (
            "neutral-baseline zero",
            c2_neutral_baseline,
            Duration::from_secs(2),
        ),
        (
            "decomposition identity",
            c3_decomposition,
            Duration::from_secs(2),
        ),
        (
            "range and monotonicity",
            c4_range_and_monotonicity,
            Duration::from_secs(5),
        ),
        ("DPO math", c5_dpo, Duration::from_secs(5)),
        (
            "preference filter",
            c6_preference_filter,
            Duration::from_secs(1),
        ),
        (
            "pipeline determinism and counts",
            c7_pipeline_counts,
            Duration::from_secs(5),
        ),
        ("end-to-end CLI", c8_end_to_end_cli, Duration::from_secs(2)),
        (
            "chat-backend contract",
            c9_chat_contract,
            Duration::from_secs(2),
        ),
    ];
    let mut failed = Vec::new();
    let mut err = std::io::stderr().lock();
    for (i, (name, run, budget)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let outcome = run();
        let took = start.elapsed();
        let (status, detail) = match &outcome {
            Ok(d) if took <= budget => ("PASS", d.clone()),
            Ok(d) => ("FAIL", format!("{d}; over the {budget:?} budget")),
            Err(e) => ("FAIL", e.clone()),
        };
        if status == "FAIL" {
            failed.push(i + 1);
        }
        // written to the raw handle so the lines show without --nocapture
        writeln!(
            err,
            "criterion {}: {status} {name} ({:.3}s) {detail}",
            i + 1,
            took.as_secs_f64()
        )
        .unwrap();
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
