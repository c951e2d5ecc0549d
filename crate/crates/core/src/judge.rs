//! LLM-as-judge truthfulness labels: every sampled answer is compared with
//! the reference answer through a yes/no prompt, and the record label is
//! the majority vote over its answers.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::http::{token_from_env, JsonClient, RetryPolicy};
use crate::records::{majority_label, GenerationRecord};

#[derive(Debug, Clone)]
pub struct JudgeEndpoint {
    pub base_url: String,
    pub model_name: String,
    pub auth_token_env: String,
    pub timeout: Duration,
    pub max_retries: u32,
    /// Concurrent requests.
    pub in_flight: usize,
}

impl JudgeEndpoint {
    /// Decoding temperature; judging is deterministic.
    pub const TEMPERATURE: f64 = 0.0;

    pub fn new(base_url: &str, model_name: &str) -> Self {
        Self {
            base_url: base_url.to_string(),
            model_name: model_name.to_string(),
            auth_token_env: "SGUQ_JUDGE_TOKEN".to_string(),
            timeout: Duration::from_secs(60),
            max_retries: 3,
            in_flight: 1,
        }
    }
}

/// A chat model answering one user message.
pub trait ChatModel: Sync {
    fn complete(&self, prompt: &str) -> Result<String>;
}

#[derive(Debug, Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Debug, Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    temperature: f64,
    messages: [ChatMessage<'a>; 1],
}

#[derive(Debug, Deserialize)]
struct ChatResponseMessage {
    content: String,
}

#[derive(Debug, Deserialize)]
struct ChatChoice {
    message: ChatResponseMessage,
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

pub struct HttpChat {
    client: JsonClient,
    model: String,
}

impl HttpChat {
    pub fn new(endpoint: &JudgeEndpoint) -> Self {
        Self {
            client: JsonClient::new(
                &endpoint.base_url,
                token_from_env(&endpoint.auth_token_env),
                endpoint.timeout,
                RetryPolicy {
                    max_retries: endpoint.max_retries,
                    ..RetryPolicy::default()
                },
            ),
            model: endpoint.model_name.clone(),
        }
    }
}

impl ChatModel for HttpChat {
    fn complete(&self, prompt: &str) -> Result<String> {
        let req = ChatRequest {
            model: &self.model,
            temperature: JudgeEndpoint::TEMPERATURE,
            messages: [ChatMessage {
                role: "user",
                content: prompt,
            }],
        };
        let resp: ChatResponse = self.client.post(&req, "judge")?;
        resp.choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| Error::Validation("judge response has no choices".into()))
    }
}

/// The yes/no correctness prompt with the three fields substituted verbatim.
pub fn render_prompt(question: &str, reference: &str, candidate: &str) -> Result<String> {
    for (name, value) in [
        ("question", question),
        ("reference", reference),
        ("candidate", candidate),
    ] {
        if value.is_empty() {
            return Err(Error::Argument(format!("judge prompt field {name} is empty")));
        }
    }
    Ok(format!(
        "We are assessing the quality of answers to the following question: {question}.\n\
         The expected answer is: {reference}.\n\
         The proposed answer is: {candidate}.\n\
         Within the context of the question, does the proposed answer mean the same as the expected answer?\n\
         Respond only with yes or no.\n\
         Response:"
    ))
}

/// Leading-token verdict: `yes` → 1, `no` → 0, anything else → `None`.
pub fn parse_verdict(text: &str) -> Option<u8> {
    let lowered = text.trim().to_lowercase();
    let token: String = lowered
        .chars()
        .take_while(|c| c.is_alphanumeric())
        .collect();
    match token.as_str() {
        "yes" => Some(1),
        "no" => Some(0),
        _ => None,
    }
}

/// Judges one answer, re-asking once on an unparseable verdict.
pub fn judge_answer(
    model: &dyn ChatModel,
    question: &str,
    reference: &str,
    candidate: &str,
) -> Result<u8> {
    let prompt = render_prompt(question, reference, candidate)?;
    let mut raw = String::new();
    for _ in 0..2 {
        raw = model.complete(&prompt)?;
        if let Some(v) = parse_verdict(&raw) {
            return Ok(v);
        }
    }
    Err(Error::Labeling {
        context: "answer".into(),
        raw,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointLine {
    id: String,
    answer: usize,
    label: u8,
}

fn read_checkpoint(path: &Path) -> Result<HashMap<(String, usize), u8>> {
    let mut out = HashMap::new();
    if !path.exists() {
        return Ok(out);
    }
    for (idx, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        // A torn final line from an interrupted run is ignored.
        match serde_json::from_str::<CheckpointLine>(&line) {
            Ok(c) if c.label <= 1 => {
                out.insert((c.id, c.answer), c.label);
            }
            Ok(_) => return Err(Error::parse(idx + 1, "checkpoint label must be 0 or 1")),
            Err(_) => continue,
        }
    }
    Ok(out)
}

/// Default checkpoint location next to a records file.
pub fn checkpoint_path_for(records_path: &Path) -> std::path::PathBuf {
    let mut name = records_path
        .file_name()
        .map(|s| s.to_os_string())
        .unwrap_or_default();
    name.push(".judge-checkpoint");
    records_path.with_file_name(name)
}

/// Fills every missing `judge_label`, then sets each record's `label` by
/// majority vote. Answers that already carry a label are never re-judged,
/// and every fresh verdict is appended to `checkpoint` before moving on.
/// Returns the number of judge calls made.
pub fn label_dataset(
    records: &mut [GenerationRecord],
    model: &dyn ChatModel,
    checkpoint: Option<&Path>,
    in_flight: usize,
) -> Result<usize> {
    if let Some(path) = checkpoint {
        let saved = read_checkpoint(path)?;
        for r in records.iter_mut() {
            for (j, g) in r.generations.iter_mut().enumerate() {
                if g.judge_label.is_none() {
                    g.judge_label = saved.get(&(r.id.clone(), j)).copied();
                }
            }
        }
    }

    let tasks: Vec<(usize, usize)> = records
        .iter()
        .enumerate()
        .flat_map(|(ri, r)| {
            r.generations
                .iter()
                .enumerate()
                .filter(|(_, g)| g.judge_label.is_none())
                .map(move |(j, _)| (ri, j))
        })
        .collect();

    let mut writer = match checkpoint {
        Some(p) if !tasks.is_empty() => Some(OpenOptions::new().create(true).append(true).open(p)?),
        _ => None,
    };
    let mut calls = 0usize;
    for wave in tasks.chunks(in_flight.max(1)) {
        let snapshot: &[GenerationRecord] = records;
        let results: Vec<Result<u8>> = std::thread::scope(|s| {
            let handles: Vec<_> = wave
                .iter()
                .map(|&(ri, j)| {
                    let r = &snapshot[ri];
                    s.spawn(move || {
                        judge_answer(model, &r.question, &r.reference_answer, &r.generations[j].text)
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| {
                    h.join().unwrap_or_else(|_| {
                        Err(Error::Transport {
                            context: "judge".into(),
                            message: "worker panicked".into(),
                        })
                    })
                })
                .collect()
        });
        calls += wave.len();
        let mut first_err = None;
        for (&(ri, j), res) in wave.iter().zip(results) {
            let coords = format!("record {:?}, answer {j}", records[ri].id);
            match res {
                Ok(label) => {
                    records[ri].generations[j].judge_label = Some(label);
                    if let Some(w) = writer.as_mut() {
                        let line = CheckpointLine {
                            id: records[ri].id.clone(),
                            answer: j,
                            label,
                        };
                        writeln!(w, "{}", serde_json::to_string(&line).expect("serializes"))?;
                    }
                }
                Err(e) if first_err.is_none() => {
                    first_err = Some(match e {
                        Error::Labeling { raw, .. } => Error::Labeling {
                            context: coords,
                            raw,
                        },
                        Error::Transport { message, .. } => Error::Transport {
                            context: coords,
                            message,
                        },
                        other => other,
                    });
                }
                Err(_) => {}
            }
        }
        if let Some(w) = writer.as_mut() {
            w.flush()?;
        }
        if let Some(e) = first_err {
            return Err(e);
        }
    }

    for r in records.iter_mut() {
        r.label = Some(majority_label(r)?);
    }
    Ok(calls)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::records::Generation;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Mutex;

    struct Scripted {
        replies: Mutex<Vec<String>>,
        calls: AtomicUsize,
    }

    impl Scripted {
        fn new(replies: &[&str]) -> Self {
            Self {
                replies: Mutex::new(replies.iter().rev().map(|s| s.to_string()).collect()),
                calls: AtomicUsize::new(0),
            }
        }
    }

    impl ChatModel for Scripted {
        fn complete(&self, _prompt: &str) -> Result<String> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            Ok(self.replies.lock().unwrap().pop().unwrap_or_default())
        }
    }

    /// Says yes iff the candidate text ends in an even digit.
    struct ByIndex {
        calls: AtomicUsize,
    }

    impl ChatModel for ByIndex {
        fn complete(&self, prompt: &str) -> Result<String> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            let cand = prompt
                .split("The proposed answer is: ")
                .nth(1)
                .and_then(|s| s.split(".\n").next())
                .unwrap();
            let d: u32 = cand.chars().last().unwrap().to_digit(10).unwrap();
            Ok(if d % 2 == 0 { "Yes" } else { "No." }.to_string())
        }
    }

    fn record(id: &str, n: usize) -> GenerationRecord {
        GenerationRecord {
            id: id.into(),
            question: "What animal is this?".into(),
            image_ref: Some("img.png".into()),
            reference_answer: "a cat".into(),
            generations: (0..n)
                .map(|j| Generation {
                    text: format!("guess {j}"),
                    token_logprobs: vec![-0.2],
                    judge_label: None,
                })
                .collect(),
            label: None,
        }
    }

    #[test]
    fn prompt_template() {
        let p = render_prompt("2+2?", "4", "four").unwrap();
        assert_eq!(
            p,
            "We are assessing the quality of answers to the following question: 2+2?.\n\
             The expected answer is: 4.\n\
             The proposed answer is: four.\n\
             Within the context of the question, does the proposed answer mean the same as the expected answer?\n\
             Respond only with yes or no.\n\
             Response:"
        );
        let p = render_prompt("line one\nline two", "4", "four").unwrap();
        assert!(p.contains("line one\nline two"));
        assert!(render_prompt("q", "", "c").is_err());
    }

    #[test]
    fn verdict_parsing() {
        assert_eq!(parse_verdict("Yes"), Some(1));
        assert_eq!(parse_verdict(" no."), Some(0));
        assert_eq!(parse_verdict("NO, it differs"), Some(0));
        assert_eq!(parse_verdict("maybe"), None);
        assert_eq!(parse_verdict("nonsense"), None);
        assert_eq!(parse_verdict(""), None);
    }

    #[test]
    fn judge_answer_examples() {
        assert_eq!(judge_answer(&Scripted::new(&["Yes"]), "q", "r", "c").unwrap(), 1);
        assert_eq!(judge_answer(&Scripted::new(&[" no."]), "q", "r", "c").unwrap(), 0);
        let twice = Scripted::new(&["maybe", "maybe"]);
        match judge_answer(&twice, "q", "r", "c") {
            Err(Error::Labeling { raw, .. }) => assert_eq!(raw, "maybe"),
            other => panic!("{other:?}"),
        }
        assert_eq!(twice.calls.load(Ordering::SeqCst), 2);
        assert_eq!(judge_answer(&Scripted::new(&["hmm", "yes"]), "q", "r", "c").unwrap(), 1);
    }

    #[test]
    fn label_dataset_majority_and_idempotence() {
        let mut recs = vec![record("a", 20)];
        let yes = Scripted::new(&["yes"; 20]);
        assert_eq!(label_dataset(&mut recs, &yes, None, 4).unwrap(), 20);
        assert_eq!(recs[0].label, Some(1));

        let before = recs.clone();
        let again = ByIndex {
            calls: AtomicUsize::new(0),
        };
        assert_eq!(label_dataset(&mut recs, &again, None, 4).unwrap(), 0);
        assert_eq!(again.calls.load(Ordering::SeqCst), 0);
        assert_eq!(recs, before);
    }

    #[test]
    fn alternating_verdicts_tie_to_zero() {
        let mut recs = vec![record("a", 20)];
        let judge = ByIndex {
            calls: AtomicUsize::new(0),
        };
        label_dataset(&mut recs, &judge, None, 3).unwrap();
        assert_eq!(recs[0].label, Some(0));
        let ones = recs[0]
            .generations
            .iter()
            .filter(|g| g.judge_label == Some(1))
            .count();
        assert_eq!(ones, 10);
        // Labels attach by index regardless of concurrency.
        for (j, g) in recs[0].generations.iter().enumerate() {
            assert_eq!(g.judge_label, Some(u8::from(j % 2 == 0)));
        }
    }

    #[test]
    fn checkpoint_resumes_without_rejudging() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("ds.jsonl.judge-checkpoint");
        let mut recs = vec![record("a", 4), record("b", 4)];
        // First run dies on the 6th answer.
        let flaky = Scripted::new(&["yes", "no", "yes", "yes", "no", "??", "??"]);
        let err = label_dataset(&mut recs, &flaky, Some(&ckpt), 1).unwrap_err();
        assert!(err.to_string().contains("\"b\", answer 1"), "{err}");

        let mut fresh = vec![record("a", 4), record("b", 4)];
        let rest = ByIndex {
            calls: AtomicUsize::new(0),
        };
        let calls = label_dataset(&mut fresh, &rest, Some(&ckpt), 2).unwrap();
        assert_eq!(calls, 3);
        assert_eq!(fresh[0].generations[1].judge_label, Some(0));
        assert_eq!(fresh[0].label, Some(1));
    }

    #[test]
    fn checkpoint_path_is_colocated() {
        let p = checkpoint_path_for(Path::new("/data/run/ds.jsonl"));
        assert_eq!(p, Path::new("/data/run/ds.jsonl.judge-checkpoint"));
    }
}
