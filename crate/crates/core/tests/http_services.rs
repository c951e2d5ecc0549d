mod common;

use std::sync::Arc;
use std::time::Duration;

use serde_json::{json, Value};

use sguq_core::baselines::{cluster, Answers, HttpNli, PairwiseJudge};
use sguq_core::embedder::{embed_records, EncoderEndpoint};
use sguq_core::http::RetryPolicy;
use sguq_core::judge::{judge_answer, label_dataset, render_prompt, HttpChat, JudgeEndpoint};
use sguq_core::records::{Generation, GenerationRecord};
use sguq_core::Error;

fn record(id: &str, answers: &[&str]) -> GenerationRecord {
    GenerationRecord {
        id: id.into(),
        question: "What is shown?".into(),
        image_ref: None,
        reference_answer: "a cat".into(),
        generations: answers
            .iter()
            .map(|t| Generation {
                text: t.to_string(),
                token_logprobs: vec![-0.2, -0.4],
                judge_label: None,
            })
            .collect(),
        label: None,
    }
}

fn fast_retry() -> RetryPolicy {
    RetryPolicy {
        max_retries: 2,
        base_delay: Duration::from_millis(1),
    }
}

/// Deterministic 4-dim vector derived from the text.
fn vector_for(text: &str) -> Vec<f64> {
    let b = text.as_bytes();
    (0..4).map(|k| 1.0 + (b[k % b.len()] as f64) * (k as f64 + 1.0)).collect()
}

fn encoder_reply(body: &Value) -> String {
    let input = body["input"].as_array().unwrap();
    // Reply in reverse order so matching must use `index`.
    let data: Vec<Value> = input
        .iter()
        .enumerate()
        .rev()
        .map(|(i, t)| json!({"index": i, "embedding": vector_for(t.as_str().unwrap())}))
        .collect();
    json!({ "data": data }).to_string()
}

fn encoder_endpoint(url: &str, token_env: &str) -> EncoderEndpoint {
    let mut e = EncoderEndpoint::new(url, "mini-encoder");
    e.auth_token_env = token_env.into();
    e.max_batch = 3;
    e.retry = fast_retry();
    e
}

#[test]
fn encoder_wire_format_batches_and_bearer_token() {
    std::env::set_var("SGUQ_TEST_ENCODER_TOKEN", "secret-1");
    let stub = common::serve(|body, _| (200, encoder_reply(body)));
    let recs = vec![record("a", &["one", "two", "three", "four"]), record("b", &["x", "yy", "zzz", "w"])];
    let sets = embed_records(&recs, &encoder_endpoint(&stub.url, "SGUQ_TEST_ENCODER_TOKEN")).unwrap();

    assert_eq!(sets.len(), 2);
    assert_eq!(sets[1].record_id, "b");
    for (r, s) in recs.iter().zip(&sets) {
        assert_eq!(s.encoder_id, "mini-encoder");
        for (j, g) in r.generations.iter().enumerate() {
            let raw = vector_for(&g.text);
            let n = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
            for (got, want) in s.matrix.row(j).iter().zip(&raw) {
                assert!((got - want / n).abs() < 1e-12);
            }
        }
    }
    let reqs = stub.requests();
    assert_eq!(reqs.len(), 3, "8 texts in batches of at most 3");
    for r in &reqs {
        assert_eq!(r.body["model"], "mini-encoder");
        assert!(r.body["input"].as_array().unwrap().len() <= 3);
        assert_eq!(r.authorization.as_deref(), Some("Bearer secret-1"));
        assert_eq!(r.path, "/v1/endpoint");
    }
}

#[test]
fn encoder_zero_vector_names_record() {
    let stub = common::serve(|body, _| {
        let input = body["input"].as_array().unwrap();
        let data: Vec<Value> = input
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let v = if t == "void" { vec![0.0; 4] } else { vector_for(t.as_str().unwrap()) };
                json!({"index": i, "embedding": v})
            })
            .collect();
        (200, json!({ "data": data }).to_string())
    });
    let recs = vec![record("fine", &["p", "q"]), record("broken", &["r", "void"])];
    let err = embed_records(&recs, &encoder_endpoint(&stub.url, "SGUQ_TEST_UNSET")).unwrap_err();
    assert!(matches!(err, Error::Validation(_)), "{err:?}");
    assert!(err.to_string().contains("broken"), "{err}");
}

#[test]
fn encoder_dimension_mismatch_is_rejected() {
    let stub = common::serve(|body, _| {
        let input = body["input"].as_array().unwrap();
        let data: Vec<Value> = input
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let dim = if t == "wide" { 6 } else { 4 };
                json!({"index": i, "embedding": vec![0.5; dim]})
            })
            .collect();
        (200, json!({ "data": data }).to_string())
    });
    let recs = vec![record("a", &["p", "q"]), record("b", &["wide", "q"])];
    let err = embed_records(&recs, &encoder_endpoint(&stub.url, "SGUQ_TEST_UNSET")).unwrap_err();
    assert!(err.to_string().contains("dimension") || matches!(err, Error::Dimension(_)), "{err}");
}

#[test]
fn encoder_retries_transient_failures() {
    let stub = common::serve(|body, n| {
        if n == 0 {
            (503, "{}".into())
        } else {
            (200, encoder_reply(body))
        }
    });
    let recs = vec![record("a", &["one", "two"])];
    let sets = embed_records(&recs, &encoder_endpoint(&stub.url, "SGUQ_TEST_UNSET")).unwrap();
    assert_eq!(sets.len(), 1);
    assert_eq!(stub.requests().len(), 2);
}

#[test]
fn encoder_exhausted_retries_name_records() {
    let stub = common::serve(|_, _| (500, "{}".into()));
    let recs = vec![record("r-17", &["one", "two"])];
    let err = embed_records(&recs, &encoder_endpoint(&stub.url, "SGUQ_TEST_UNSET")).unwrap_err();
    assert!(err.is_retryable(), "{err:?}");
    assert!(err.to_string().contains("r-17"), "{err}");
    assert_eq!(stub.requests().len(), 3, "one try plus two retries");
}

#[test]
fn nli_wire_format_drives_clustering() {
    // Entailment holds only between answers sharing a first letter.
    let stub = common::serve(|body, _| {
        let p = body["premise"].as_str().unwrap();
        let h = body["hypothesis"].as_str().unwrap();
        let prob = if p[..1] == h[..1] { 0.9 } else { 0.1 };
        (200, json!({ "entailment_prob": prob }).to_string())
    });
    let nli = HttpNli::new(&stub.url, "SGUQ_TEST_UNSET", Duration::from_secs(5), fast_retry());
    let judge = PairwiseJudge::ExternalNli(Arc::new(nli));
    let texts = ["cat", "car", "dog", "cow", "duck"];
    let c = cluster("r", &Answers { texts: &texts, embeddings: None }, &judge).unwrap();
    assert_eq!(c.assignment, vec![0, 0, 1, 0, 1]);
    let reqs = stub.requests();
    assert!(reqs.iter().all(|r| r.body.get("premise").is_some() && r.body.get("hypothesis").is_some()));
}

fn chat_reply(content: &str) -> String {
    json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string()
}

fn judge_endpoint(url: &str) -> JudgeEndpoint {
    let mut e = JudgeEndpoint::new(url, "judge-model");
    e.auth_token_env = "SGUQ_TEST_JUDGE_TOKEN".into();
    e.max_retries = 1;
    e
}

#[test]
fn chat_wire_format_and_verdicts() {
    std::env::set_var("SGUQ_TEST_JUDGE_TOKEN", "judge-secret");
    let stub = common::serve(|body, _| {
        let prompt = body["messages"][0]["content"].as_str().unwrap();
        let verdict = if prompt.contains("proposed answer is: a cat.") { "Yes, it matches." } else { " no." };
        (200, chat_reply(verdict))
    });
    let chat = HttpChat::new(&judge_endpoint(&stub.url));
    assert_eq!(judge_answer(&chat, "What is shown?", "a cat", "a cat").unwrap(), 1);
    assert_eq!(judge_answer(&chat, "What is shown?", "a cat", "a dog").unwrap(), 0);

    let reqs = stub.requests();
    let body = &reqs[0].body;
    assert_eq!(body["model"], "judge-model");
    assert_eq!(body["temperature"], 0.0);
    assert_eq!(body["messages"].as_array().unwrap().len(), 1);
    assert_eq!(body["messages"][0]["role"], "user");
    assert_eq!(
        body["messages"][0]["content"],
        render_prompt("What is shown?", "a cat", "a cat").unwrap()
    );
    assert_eq!(reqs[0].authorization.as_deref(), Some("Bearer judge-secret"));
}

#[test]
fn unparseable_verdict_twice_is_a_labeling_error() {
    let stub = common::serve(|_, _| (200, chat_reply("maybe")));
    let chat = HttpChat::new(&judge_endpoint(&stub.url));
    let err = judge_answer(&chat, "q", "r", "c").unwrap_err();
    match err {
        Error::Labeling { raw, .. } => assert_eq!(raw, "maybe"),
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(stub.requests().len(), 2);
}

#[test]
fn label_dataset_over_http_resumes_from_checkpoint() {
    let stub = common::serve(|body, _| {
        let prompt = body["messages"][0]["content"].as_str().unwrap();
        let yes = prompt.contains("proposed answer is: a cat.");
        (200, chat_reply(if yes { "yes" } else { "no" }))
    });
    let dir = tempfile::tempdir().unwrap();
    let checkpoint = dir.path().join("records.jsonl.judge-checkpoint");
    let chat = HttpChat::new(&judge_endpoint(&stub.url));

    let mut recs = vec![
        record("a", &["a cat", "a cat", "a dog"]),
        record("b", &["a dog", "a cat", "a dog", "a cat"]),
    ];
    let calls = label_dataset(&mut recs, &chat, Some(&checkpoint), 3).unwrap();
    assert_eq!(calls, 7);
    assert_eq!(recs[0].label, Some(1));
    assert_eq!(recs[1].label, Some(0), "2-2 tie resolves to 0");

    let mut fresh = vec![
        record("a", &["a cat", "a cat", "a dog"]),
        record("b", &["a dog", "a cat", "a dog", "a cat"]),
    ];
    let calls = label_dataset(&mut fresh, &chat, Some(&checkpoint), 1).unwrap();
    assert_eq!(calls, 0, "every verdict comes from the checkpoint");
    assert_eq!(fresh, recs);
    assert_eq!(stub.requests().len(), 7);
}
