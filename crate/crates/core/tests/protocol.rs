//! Conversation protocol: wire formats against a local HTTP server, rate
//! limiting, persona sampling, condition purity, alternation, and crash
//! safety of persisted transcripts.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use delusim_core::corpus::{Cohort, Post, UserRecord};
use delusim_core::features::{Embedder, EmbeddingProviderConfig, ProviderKind};
use delusim_core::net::TransportError;
use delusim_core::scorer::{train_scorer, Scorer, ScorerModel, ScorerParams};
use delusim_core::simulate::{
    build_persona, parse_mock_script, run_batch, run_conversation, score_transcripts, seed_post, ChatBackend,
    ChatClient, ChatRequest, Condition, ConversationJob, InterventionConfig, LlmEndpoint, MockChatBackend, MockRole,
    Role, SimulationSettings, Speaker, Transcript, TranscriptStatus, DEFAULT_EXEMPLARS,
};
use delusim_core::synth::{labeled_corpus, mock_script, TREATMENT_TIC};
use serde_json::Value;

/// One captured HTTP request.
#[derive(Debug, Clone)]
struct Seen {
    path: String,
    authorization: Option<String>,
    body: Value,
}

/// A minimal HTTP/1.1 server: one request per connection, responses chosen
/// by `respond(path, body, request_number)`.
struct TestServer {
    addr: String,
    seen: Arc<Mutex<Vec<Seen>>>,
}

impl TestServer {
    fn start(respond: impl Fn(&str, &Value, usize) -> (u16, String) + Send + Sync + 'static) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = format!("http://{}", listener.local_addr().unwrap());
        let seen: Arc<Mutex<Vec<Seen>>> = Arc::default();
        let log = seen.clone();
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(stream) = stream else { break };
                let req = read_request(&stream);
                let n = {
                    let mut log = log.lock().unwrap();
                    log.push(req.clone());
                    log.len() - 1
                };
                let (status, body) = respond(&req.path, &req.body, n);
                let mut stream = stream;
                let _ = write!(
                    stream,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                );
            }
        });
        TestServer { addr, seen }
    }

    fn seen(&self) -> Vec<Seen> {
        self.seen.lock().unwrap().clone()
    }
}

fn read_request(stream: &TcpStream) -> Seen {
    let mut reader = BufReader::new(stream);
    let mut line = String::new();
    reader.read_line(&mut line).unwrap();
    let path = line.split_whitespace().nth(1).unwrap_or("").to_string();
    let mut length = 0;
    let mut authorization = None;
    loop {
        let mut h = String::new();
        reader.read_line(&mut h).unwrap();
        let h = h.trim_end();
        if h.is_empty() {
            break;
        }
        let (name, value) = h.split_once(':').unwrap();
        match name.to_ascii_lowercase().as_str() {
            "content-length" => length = value.trim().parse().unwrap(),
            "authorization" => authorization = Some(value.trim().to_string()),
            _ => {}
        }
    }
    let mut body = vec![0; length];
    reader.read_exact(&mut body).unwrap();
    Seen { path, authorization, body: serde_json::from_slice(&body).unwrap_or(Value::Null) }
}

fn chat_ok(content: &str) -> String {
    serde_json::json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string()
}

fn endpoint(base_url: &str, token_var: Option<&str>) -> LlmEndpoint {
    LlmEndpoint {
        base_url: base_url.to_string(),
        model_name: "test-model".into(),
        auth_env_var: token_var.map(String::from),
        max_retries: 3,
        backoff_base_ms: 1,
        backoff_cap_ms: 5,
        rate_limit_per_minute: 60_000.0,
        timeout_secs: 5.0,
    }
}

fn msg(role: Role, content: &str) -> delusim_core::ChatMessage {
    delusim_core::ChatMessage { role, content: content.into() }
}

#[test]
fn chat_requests_carry_only_model_and_messages() {
    let server = TestServer::start(|_, _, _| (200, chat_ok("hello back")));
    std::env::set_var("DELUSIM_PROTOCOL_TEST_TOKEN", "s3cret");
    let client = endpoint(&format!("{}/v1", server.addr), Some("DELUSIM_PROTOCOL_TEST_TOKEN"))
        .connect(MockRole::Assistant)
        .unwrap();
    let reply = client.complete(vec![msg(Role::System, "be brief"), msg(Role::User, "hi")]).unwrap();
    assert_eq!(reply, "hello back");
    let seen = server.seen();
    assert_eq!(seen.len(), 1);
    assert_eq!(seen[0].path, "/v1/chat/completions");
    assert_eq!(seen[0].authorization.as_deref(), Some("Bearer s3cret"));
    let body = seen[0].body.as_object().unwrap();
    let keys: Vec<&str> = body.keys().map(String::as_str).collect();
    assert_eq!(keys, ["messages", "model"]);
    assert_eq!(body["model"], "test-model");
    assert_eq!(body["messages"][0]["role"], "system");
    assert_eq!(body["messages"][1]["content"], "hi");
}

#[test]
fn server_errors_are_retried_and_client_errors_are_not() {
    let server = TestServer::start(|_, _, n| if n < 2 { (503, "{}".into()) } else { (200, chat_ok("finally")) });
    let client = endpoint(&server.addr, None).connect(MockRole::Assistant).unwrap();
    assert_eq!(client.complete(vec![msg(Role::User, "x")]).unwrap(), "finally");
    assert_eq!(server.seen().len(), 3);

    let server = TestServer::start(|_, _, _| (400, r#"{"error":"bad"}"#.into()));
    let client = endpoint(&server.addr, None).connect(MockRole::Assistant).unwrap();
    let err = client.complete(vec![msg(Role::User, "x")]).unwrap_err();
    assert!(matches!(err, TransportError::Status { status: 400, .. }));
    assert_eq!(server.seen().len(), 1);
}

#[test]
fn embeddings_wire_format_and_index_order() {
    let server = TestServer::start(|_, body, _| {
        let inputs = body["input"].as_array().unwrap();
        // answer in reverse order; vectors encode the input position
        let data: Vec<Value> = (0..inputs.len())
            .rev()
            .map(|i| serde_json::json!({"index": i, "embedding": [i as f64 + 1.0, 0.0, 1.0]}))
            .collect();
        (200, serde_json::json!({"data": data}).to_string())
    });
    let cfg = EmbeddingProviderConfig {
        kind: ProviderKind::Remote,
        endpoint_url: Some(format!("{}/v1/embeddings", server.addr)),
        model_name: Some("embed-small".into()),
        dimension: 3,
        cache_path: None,
        request_timeout_secs: 5.0,
        max_batch: 2,
        max_retries: 0,
    };
    let embedder = Embedder::from_config(&cfg).unwrap();
    let out = embedder.embed(&["zero", "one", "two"]).unwrap();
    let seen = server.seen();
    assert_eq!(seen.len(), 2, "batches of at most two");
    assert_eq!(seen[0].path, "/v1/embeddings");
    assert_eq!(seen[0].body["model"], "embed-small");
    assert_eq!(seen[0].body["input"], serde_json::json!(["zero", "one"]));
    assert_eq!(seen[1].body["input"], serde_json::json!(["two"]));
    for (i, v) in out.iter().enumerate() {
        let raw = [if i < 2 { i as f64 + 1.0 } else { 1.0 }, 0.0, 1.0];
        let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
        for (a, b) in v.iter().zip(raw) {
            assert!((a - b / norm).abs() < 1e-12);
        }
    }
    // cached texts are not sent again
    embedder.embed(&["one"]).unwrap();
    assert_eq!(server.seen().len(), 2);
}

/// Records when each request arrives.
struct Clock {
    stamps: Mutex<Vec<Instant>>,
}

impl ChatBackend for Clock {
    fn send(&self, _: &ChatRequest) -> Result<String, TransportError> {
        self.stamps.lock().unwrap().push(Instant::now());
        Ok("ok".into())
    }
}

#[test]
fn request_rate_stays_within_limit() {
    let clock = Arc::new(Clock { stamps: Mutex::default() });
    let rpm = 600.0; // ten per second
    let client = Arc::new(ChatClient::new(clock.clone(), "m", Default::default(), rpm));
    let start = Instant::now();
    let workers: Vec<_> = (0..4)
        .map(|_| {
            let c = client.clone();
            thread::spawn(move || {
                for _ in 0..6 {
                    c.complete(vec![msg(Role::User, "x")]).unwrap();
                }
            })
        })
        .collect();
    for w in workers {
        w.join().unwrap();
    }
    let mut stamps = clock.stamps.lock().unwrap().clone();
    stamps.sort();
    assert_eq!(stamps.len(), 24);
    // any one-second window holds at most rpm/60 requests, plus one
    for (i, &t) in stamps.iter().enumerate() {
        let in_window = stamps[i..].iter().take_while(|&&s| s.duration_since(t) < Duration::from_secs(1)).count();
        assert!(in_window <= 11, "{in_window} requests within one second");
    }
    assert!(start.elapsed() >= Duration::from_millis(2200));
}

fn user(n: usize, tic: &str) -> UserRecord {
    UserRecord {
        user_id: "u7".into(),
        posts: (0..n)
            .map(|i| Post {
                post_id: format!("p{i:03}"),
                author_id: "u7".into(),
                community: "c".into(),
                created_at: i as i64,
                body: format!("Post {i} about hidden signals and the weekend garden {tic}"),
            })
            .collect(),
        cohort: Cohort::Treatment,
    }
}

#[test]
fn exemplar_sets_vary_with_the_seed() {
    let u = user(100, "");
    let mut differ = 0;
    for trial in 0..100u64 {
        let a = build_persona(&u, DEFAULT_EXEMPLARS, 2 * trial).unwrap();
        let b = build_persona(&u, DEFAULT_EXEMPLARS, 2 * trial + 1).unwrap();
        assert_eq!(a.exemplars.len(), 5);
        assert_eq!(a.system_prompt().matches("<post ").count(), 5);
        if a.exemplar_post_ids != b.exemplar_post_ids {
            differ += 1;
        }
    }
    assert!(differ >= 99, "{differ}/100");
}

struct Fixture {
    embedder: Embedder,
    model: ScorerModel,
}

fn fixture() -> Fixture {
    let embedder = Embedder::from_config(&EmbeddingProviderConfig::hashing(384)).unwrap();
    let model = train_scorer(&labeled_corpus(300, 1), &embedder, &ScorerParams::default()).unwrap();
    Fixture { embedder, model }
}

fn job(condition: Condition, tic: &str) -> ConversationJob {
    let u = user(40, tic);
    let persona = build_persona(&u, DEFAULT_EXEMPLARS, 3).unwrap();
    let seed = seed_post(&u, &persona).unwrap();
    ConversationJob {
        conversation_id: format!("u7-{}", condition.as_str()),
        persona,
        seed_post: seed,
        cohort: Cohort::Treatment,
        stratum: Some(0),
        condition,
        assistant_model: "mock-assistant".into(),
    }
}

fn plain_rules() -> Vec<delusim_core::simulate::MockRule> {
    let assistant: Vec<String> = (0..40).map(|i| format!("\"Reply number {i}.\"")).collect();
    let simuser: Vec<String> = (0..40).map(|i| format!("\"I keep seeing signals {i}.\"")).collect();
    parse_mock_script(&format!(
        "{{\"role\":\"assistant\",\"replies\":[{}]}}\n{{\"role\":\"simuser\",\"replies\":[{}]}}",
        assistant.join(","),
        simuser.join(",")
    ))
    .unwrap()
}

#[test]
fn conditions_differ_only_by_the_rendered_score() {
    let fx = fixture();
    let scorer = Scorer::new(&fx.model, &fx.embedder).unwrap();
    let mut captured = BTreeMap::new();
    let mut transcripts = BTreeMap::new();
    for condition in [Condition::Standard, Condition::Intervention] {
        let a = Arc::new(MockChatBackend::new(MockRole::Assistant, plain_rules()));
        let s = Arc::new(MockChatBackend::new(MockRole::Simuser, plain_rules()));
        let ac = ChatClient::new(a.clone(), "mock-assistant", Default::default(), 1e7);
        let sc = ChatClient::new(s.clone(), "mock-simuser", Default::default(), 1e7);
        let settings = SimulationSettings {
            rounds: 34,
            base_prompt: String::new(),
            intervention: InterventionConfig::default(),
            scorer: Some(scorer.clone()),
            simuser: &sc,
        };
        let t = run_conversation(&job(condition, ""), &ac, &settings, None).unwrap();
        assert_eq!(t.status, TranscriptStatus::Complete);
        assert_eq!(t.turns.len(), 68);
        assert!(t.alternates());
        assert_eq!(t.turns[0].speaker, Speaker::Assistant);
        for sim in s.captured() {
            assert!(sim.messages[0].content.contains("<post 5>") && !sim.messages[0].content.contains("<post 6>"));
            let json = serde_json::to_value(&sim).unwrap();
            assert!(json.as_object().unwrap().keys().all(|k| k == "model" || k == "messages"));
        }
        captured.insert(condition, a.captured());
        transcripts.insert(condition, t);
    }
    let std_reqs = &captured[&Condition::Standard];
    let int_reqs = &captured[&Condition::Intervention];
    let int_t = &transcripts[&Condition::Intervention];
    assert_eq!(std_reqs.len(), int_reqs.len());
    let template = InterventionConfig::enabled();
    for (round, (s, i)) in std_reqs.iter().zip(int_reqs).enumerate() {
        assert!(s.messages.iter().all(|m| m.role != Role::System), "standard has no system prompt");
        let non_system: Vec<_> = i.messages.iter().filter(|m| m.role != Role::System).cloned().collect();
        assert_eq!(non_system, s.messages, "round {round}");
        if round == 0 {
            assert_eq!(i.messages, s.messages);
        } else {
            let score = int_t.turns[2 * round - 1].score.unwrap();
            assert_eq!(i.messages[0].role, Role::System);
            assert_eq!(i.messages[0].content, template.render(score));
        }
    }
}

#[test]
fn intervention_with_cautious_mock_declines() {
    let fx = fixture();
    let scorer = Scorer::new(&fx.model, &fx.embedder).unwrap();
    let rules = mock_script(34);
    let ac = ChatClient::new(Arc::new(MockChatBackend::new(MockRole::Assistant, rules.clone())), "mock-assistant", Default::default(), 1e7);
    let sc = ChatClient::new(Arc::new(MockChatBackend::new(MockRole::Simuser, rules)), "mock-simuser", Default::default(), 1e7);
    let settings = SimulationSettings {
        rounds: 34,
        base_prompt: String::new(),
        intervention: InterventionConfig::default(),
        scorer: Some(scorer.clone()),
        simuser: &sc,
    };
    let t = run_conversation(&job(Condition::Intervention, TREATMENT_TIC), &ac, &settings, None).unwrap();
    let scores: Vec<f64> = t.simuser_turns().map(|x| x.score.unwrap()).collect();
    assert_eq!(scores.len(), 34);
    for w in scores[3..].windows(2) {
        assert!(w[1] <= w[0] + 1e-12, "{scores:?}");
    }
    assert!(scores[33] < scores[3]);

    // the same persona without the intervention keeps escalating
    let mut standard = run_conversation(&job(Condition::Standard, TREATMENT_TIC), &ac, &settings, None).unwrap();
    assert_eq!(score_transcripts(std::slice::from_mut(&mut standard), &scorer).unwrap(), 34);
    let rising: Vec<f64> = standard.simuser_turns().map(|x| x.score.unwrap()).collect();
    assert!(rising[33] > rising[0]);
}

/// Fails every request after `ok` successes; before failing, checks that the
/// transcript on disk is already a parseable Truncated record.
struct Dies {
    inner: MockChatBackend,
    ok: usize,
    calls: Mutex<usize>,
    watch: PathBuf,
}

impl ChatBackend for Dies {
    fn send(&self, r: &ChatRequest) -> Result<String, TransportError> {
        let mut calls = self.calls.lock().unwrap();
        *calls += 1;
        let on_disk = Transcript::load(&self.watch).expect("transcript on disk parses mid-run");
        assert_eq!(on_disk.status, TranscriptStatus::Truncated);
        assert_eq!(on_disk.turns.len(), 2 * (*calls - 1) + 1);
        if *calls > self.ok {
            return Err(TransportError::Decode { url: "mock".into(), message: "simulated crash".into() });
        }
        self.inner.send(r)
    }
}

#[test]
fn failures_leave_parseable_truncated_transcripts() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    let ac = ChatClient::new(Arc::new(MockChatBackend::new(MockRole::Assistant, plain_rules())), "mock-assistant", Default::default(), 1e7);
    let dies = Dies { inner: MockChatBackend::new(MockRole::Simuser, plain_rules()), ok: 5, calls: Mutex::new(0), watch: path.clone() };
    let sc = ChatClient::new(Arc::new(dies), "mock-simuser", Default::default(), 1e7);
    let settings =
        SimulationSettings { rounds: 34, base_prompt: String::new(), intervention: InterventionConfig::default(), scorer: None, simuser: &sc };
    let t = run_conversation(&job(Condition::Standard, ""), &ac, &settings, Some(&path)).unwrap();
    assert_eq!(t.status, TranscriptStatus::Truncated);
    assert_eq!(t.turns.len(), 11);
    let disk = Transcript::load(&path).unwrap();
    assert_eq!(disk, t);
    assert!(disk.error.unwrap().contains("simulated crash"));
}

fn batch(dir: &Path, jobs: &[ConversationJob]) -> Vec<Transcript> {
    let mut assistants = BTreeMap::new();
    assistants.insert(
        "mock-assistant".to_string(),
        ChatClient::new(Arc::new(MockChatBackend::new(MockRole::Assistant, plain_rules())), "mock-assistant", Default::default(), 1e7),
    );
    let sc = ChatClient::new(Arc::new(MockChatBackend::new(MockRole::Simuser, plain_rules())), "mock-simuser", Default::default(), 1e7);
    let settings =
        SimulationSettings { rounds: 6, base_prompt: String::new(), intervention: InterventionConfig::default(), scorer: None, simuser: &sc };
    run_batch(jobs, &assistants, &settings, dir, 3).unwrap()
}

#[test]
fn batches_score_every_simuser_turn_and_reuse_complete_runs() {
    let fx = fixture();
    let scorer = Scorer::new(&fx.model, &fx.embedder).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let jobs: Vec<ConversationJob> = (0..5)
        .map(|i| ConversationJob { conversation_id: format!("conv/{i}"), ..job(Condition::Standard, "") })
        .collect();
    let mut out = batch(dir.path(), &jobs);
    assert_eq!(out.iter().map(|t| t.conversation_id.as_str()).collect::<Vec<_>>(), ["conv/0", "conv/1", "conv/2", "conv/3", "conv/4"]);
    assert_eq!(score_transcripts(&mut out, &scorer).unwrap(), 5 * 6);
    assert_eq!(score_transcripts(&mut out, &scorer).unwrap(), 0);

    let again = batch(dir.path(), &jobs);
    assert_eq!(again.len(), 5);
    let log = std::fs::read_to_string(dir.path().join("runs.jsonl")).unwrap();
    let records: Vec<Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 10);
    assert_eq!(records.iter().filter(|r| r["reused"] == true).count(), 5);
    assert!(dir.path().join("conv_0.json").exists());
}
