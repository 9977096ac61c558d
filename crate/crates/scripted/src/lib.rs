//! A rule-based stand-in for the chat models, served over the
//! OpenAI-compatible `POST /chat/completions` route.
//!
//! Replies depend only on the request messages, so recording against this
//! server yields a deterministic replay cache. The rules cover the bundled
//! Game-of-24 micro-set and the brain-scan VQA set: which tool scripts the
//! teacher writes (including a broken one it then repairs, and a run that ends
//! with a wrong answer), how the builder abstracts, groups and merges them,
//! and how a student answers with and without the distilled tools.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use serde_json::{json, Value};

const RAW_SOLVER: &str = include_str!("../../../fixtures/tools/game24_raw_solver.py");
const RAW_BROKEN: &str = include_str!("../../../fixtures/tools/game24_raw_broken.py");
const RAW_SEARCH: &str = include_str!("../../../fixtures/tools/game24_raw_search.py");
const RAW_EVALUATOR: &str = include_str!("../../../fixtures/tools/game24_raw_evaluator.py");
const ABSTRACT_SOLVER: &str = include_str!("../../../fixtures/tools/game24_abstract_solver.py");
const ABSTRACT_SEARCH: &str = include_str!("../../../fixtures/tools/game24_abstract_search.py");
const GAME24_SOLVER: &str = include_str!("../../../fixtures/tools/game24_solver.py");
const BRAIN_RAW_BRIGHT: &str = include_str!("../../../fixtures/tools/brain_raw_bright_spot.py");
const BRAIN_RAW_LEFT: &str = include_str!("../../../fixtures/tools/brain_raw_left_hemisphere.py");
const BRAIN_ABSTRACT_BRIGHT: &str = include_str!("../../../fixtures/tools/brain_abstract_bright.py");
const BRAIN_ABSTRACT_REGION: &str = include_str!("../../../fixtures/tools/brain_abstract_region.py");
const BRAIN_ANALYZER: &str = include_str!("../../../fixtures/tools/brain_region_analyzer.py");

fn text_of(content: &Value) -> String {
    match content {
        Value::String(s) => s.clone(),
        Value::Array(parts) => parts
            .iter()
            .filter_map(|p| p.get("text").and_then(Value::as_str))
            .collect::<Vec<_>>()
            .join("\n"),
        _ => String::new(),
    }
}

fn has_image(content: &Value) -> bool {
    content
        .as_array()
        .is_some_and(|parts| parts.iter().any(|p| p.get("type").and_then(Value::as_str) == Some("image_url")))
}

struct Conversation {
    /// (role, text) in order.
    turns: Vec<(String, String)>,
    image: bool,
}

impl Conversation {
    fn parse(body: &Value) -> Self {
        let messages = body.get("messages").and_then(Value::as_array).cloned().unwrap_or_default();
        let image = messages.iter().any(|m| has_image(&m["content"]));
        let turns = messages
            .iter()
            .map(|m| (m["role"].as_str().unwrap_or("").to_string(), text_of(&m["content"])))
            .collect();
        Self { turns, image }
    }

    fn first_line(&self) -> &str {
        self.turns.first().map(|(_, t)| t.lines().next().unwrap_or("")).unwrap_or("")
    }

    fn system(&self) -> &str {
        self.turns.first().map(|(_, t)| t.as_str()).unwrap_or("")
    }

    /// The task statement: the first user turn.
    fn task(&self) -> &str {
        self.turns.iter().find(|(r, _)| r == "user").map(|(_, t)| t.as_str()).unwrap_or("")
    }

    fn assistant_turns(&self) -> usize {
        self.turns.iter().filter(|(r, _)| r == "assistant").count()
    }

    /// The latest user turn after an assistant turn (an observation).
    fn last_observation(&self) -> Option<&str> {
        match self.turns.last() {
            Some((r, t)) if r == "user" && self.assistant_turns() > 0 => Some(t),
            _ => None,
        }
    }
}

/// Reply text for an OpenAI-style chat request body.
pub fn respond(body: &Value) -> String {
    let conv = Conversation::parse(body);
    if conv.image {
        return "A single axial brain MRI slice.".into();
    }
    match conv.first_line().trim() {
        "# Teacher agent" => teacher(&conv),
        "# Student agent" => student(&conv),
        "# Tool abstraction" => abstraction(&conv),
        "# Tool clustering" => clustering(&conv),
        "# Tool consolidation" => consolidation(&conv),
        _ => "I can only help with the bundled fixture tasks.".into(),
    }
}

fn numbers_of(task: &str) -> Option<Vec<i64>> {
    let line = task.lines().find_map(|l| l.strip_prefix("Numbers:"))?;
    line.split_whitespace().map(|n| n.parse().ok()).collect()
}

fn question_of(task: &str) -> String {
    task.lines()
        .find_map(|l| l.strip_prefix("Question:"))
        .unwrap_or("")
        .trim()
        .to_lowercase()
}

fn mcp_block(intro: &str, script: &str) -> String {
    format!("{intro}\n<mcp>\n{}\n</mcp>\n", script.trim_end())
}

fn tool_call(intro: &str, tool: &str, arguments: Value) -> String {
    format!("{intro}\n```tool_call\n{}\n```\n", json!({"tool": tool, "arguments": arguments}))
}

/// Text of an observation after its header line.
fn observation_body(obs: &str) -> &str {
    obs.split_once('\n').map(|(_, b)| b.trim()).unwrap_or("")
}

fn validated_tool(obs: &str) -> Option<&str> {
    obs.lines()
        .find_map(|l| l.split_once("valid; tools: ").map(|(_, t)| t.split(',').next().unwrap_or("").trim()))
}

fn teacher(conv: &Conversation) -> String {
    let task = conv.task();
    match numbers_of(task) {
        Some(nums) => teacher_game24(conv, &nums),
        None => teacher_vqa(conv, &question_of(task)),
    }
}

fn teacher_game24(conv: &Conversation, nums: &[i64]) -> String {
    let key: Vec<String> = nums.iter().map(i64::to_string).collect();
    let key = key.join(" ");
    if key == "6 6 6 6" {
        return "Adding all four sixes gives 24 directly.\nanswer: 6+6+6+6".into();
    }
    let Some(obs) = conv.last_observation() else {
        return match key.as_str() {
            "3 3 8 8" => mcp_block("Subtask: search all expressions exactly. I will write a solver tool.", RAW_BROKEN),
            "1 5 5 5" => mcp_block("Subtask: check candidate expressions. I will write an evaluator tool.", RAW_EVALUATOR),
            "2 3 5 12" => mcp_block("Subtask: enumerate expressions. I will write a search tool.", RAW_SEARCH),
            _ => mcp_block("Subtask: search all expressions exactly. I will write a solver tool.", RAW_SOLVER),
        };
    };
    if obs.starts_with("MCP validation results:") {
        return match validated_tool(obs) {
            Some("evaluate_expression") => {
                tool_call("Check 5*5-1 with the evaluator.", "evaluate_expression", json!({"expression": "5*5-1"}))
            }
            Some(tool) => tool_call("The tool validated; call it.", tool, json!({"numbers": nums})),
            None => mcp_block("The script failed; here is a corrected version.", RAW_SOLVER),
        };
    }
    if obs.starts_with("Observation (tool evaluate_expression") {
        return "The evaluator confirms the value is 24.\nanswer: 5*5-1".into();
    }
    if obs.starts_with("Observation (tool") && !obs.contains(", error)") {
        return format!("The tool found an expression.\nanswer: {}", observation_body(obs));
    }
    "I could not find an expression.\nanswer: unknown".into()
}

fn teacher_vqa(conv: &Conversation, question: &str) -> String {
    let (script, tool) = if question.contains("bright") {
        (BRAIN_RAW_BRIGHT, "detect_bright_spots")
    } else if question.contains("left") {
        (BRAIN_RAW_LEFT, "analyze_left_hemisphere")
    } else {
        return "The description shows no abnormal finding.\nanswer: no".into();
    };
    match conv.last_observation() {
        None => mcp_block("Subtask: measure intensity in the scan. I will write an analysis tool.", script),
        Some(obs) if obs.starts_with("MCP validation results:") => match validated_tool(obs) {
            Some(t) => tool_call("Run the analysis.", t, json!({})),
            None => mcp_block("Retrying the analysis tool.", script),
        },
        Some(obs) if obs.starts_with(&format!("Observation (tool {tool})")) => {
            "The analysis reports a finding.\nanswer: yes".into()
        }
        Some(_) => "answer: no".into(),
    }
}

fn student(conv: &Conversation) -> String {
    let system = conv.system();
    let offers = |tool: &str| system.contains(&format!("- {tool} ("));
    let task = conv.task();
    if let Some(nums) = numbers_of(task) {
        if let Some(obs) = conv.last_observation() {
            let body = observation_body(obs);
            if !obs.contains(", error)") && body != "no solution" {
                return format!("answer: {body}");
            }
        } else if offers("solve_24") {
            return tool_call("I will use the solver tool.", "solve_24", json!({"numbers": nums, "target": 24}));
        } else if offers("find_expression") {
            return tool_call("I will use the search tool.", "find_expression", json!({"numbers": nums}));
        }
        let sum: Vec<String> = nums.iter().map(i64::to_string).collect();
        return format!("Adding them up.\nanswer: {}", sum.join("+"));
    }
    let question = question_of(task);
    if let Some(obs) = conv.last_observation() {
        let found = obs.contains("bright areas") || obs.contains("lesion candidate");
        return format!("answer: {}", if found && !obs.contains(", error)") { "yes" } else { "no" });
    }
    let asks_finding = question.contains("bright") || question.contains("lesion");
    if asks_finding && offers("analyze_brain_region") {
        let region = ["left", "right"].into_iter().find(|r| question.contains(r)).unwrap_or("whole");
        let mode = if question.contains("bright") { "detect" } else { "describe" };
        return tool_call(
            "I will analyze the region.",
            "analyze_brain_region",
            json!({"region": region, "analysis_mode": mode}),
        );
    }
    "answer: no".into()
}

fn abstraction(conv: &Conversation) -> String {
    let prompt = conv.task();
    let (summary, params, script): (&str, Value, &str) = if prompt.contains("\"solve_24\"") {
        (
            "Find an arithmetic expression over the given numbers that reaches a target value.",
            json!([{"name": "numbers", "description": "integers to combine"}, {"name": "target", "description": "value to reach, default 24"}]),
            ABSTRACT_SOLVER,
        )
    } else if prompt.contains("\"find_expression\"") {
        (
            "Enumerate expressions over four numbers to hit a target value.",
            json!([{"name": "numbers", "description": "four integers"}, {"name": "target", "description": "value to reach, default 24"}]),
            ABSTRACT_SEARCH,
        )
    } else if prompt.contains("\"detect_bright_spots\"") {
        (
            "Detect bright areas in a chosen brain region above a threshold.",
            json!([{"name": "region", "description": "left, right or whole"}, {"name": "threshold_multiplier", "description": "multiple of mean intensity"}]),
            BRAIN_ABSTRACT_BRIGHT,
        )
    } else if prompt.contains("\"analyze_left_hemisphere\"") {
        (
            "Analyze one brain region in a chosen mode.",
            json!([{"name": "region", "description": "left, right or whole"}, {"name": "analysis_mode", "description": "detect or describe"}]),
            BRAIN_ABSTRACT_REGION,
        )
    } else {
        // Unknown script: hand it back unchanged.
        let original = prompt
            .split_once("```python\n")
            .and_then(|(_, rest)| rest.rsplit_once("\n```"))
            .map(|(s, _)| s)
            .unwrap_or("");
        return format!(
            "```json\n{}\n```\n```python\n{original}\n```\n",
            json!({"summary": "General-purpose tool.", "parameters": []})
        );
    };
    format!(
        "```json\n{}\n```\n```python\n{}\n```\n",
        json!({"summary": summary, "parameters": params}),
        script.trim_end()
    )
}

fn is_image_tool(name: &str) -> bool {
    ["bright", "hemisphere", "region", "image", "brain"].iter().any(|k| name.contains(k))
}

fn clustering(conv: &Conversation) -> String {
    let prompt = conv.task();
    let mut groups: Vec<(&str, Vec<u64>)> = Vec::new();
    let mut number = 0u64;
    for line in prompt.lines() {
        if let Some(n) = line.strip_prefix("### Tool ") {
            number = n.trim().parse().unwrap_or(0);
        } else if let Some(tools) = line.strip_prefix("Tools: ") {
            let label = if tools.split(", ").any(is_image_tool) {
                "image utils"
            } else if tools.split(", ").any(|t| ["24", "expression", "solve", "evaluate"].iter().any(|k| t.contains(k))) {
                "numeric analysis"
            } else {
                "general utils"
            };
            match groups.iter_mut().find(|(l, _)| *l == label) {
                Some((_, members)) => members.push(number),
                None => groups.push((label, vec![number])),
            }
        }
    }
    let clusters: Vec<Value> = groups.into_iter().map(|(name, members)| json!({"name": name, "members": members})).collect();
    format!("```json\n{}\n```\n", json!({"clusters": clusters}))
}

fn consolidation(conv: &Conversation) -> String {
    let prompt = conv.task();
    let name = prompt
        .split_once("grouped as \"")
        .and_then(|(_, rest)| rest.split_once('"'))
        .map(|(n, _)| n)
        .unwrap_or("");
    let script = match name {
        "numeric analysis" => GAME24_SOLVER.trim_end(),
        "image utils" => BRAIN_ANALYZER.trim_end(),
        _ => prompt
            .split_once("```python\n")
            .and_then(|(_, rest)| rest.split_once("\n```"))
            .map(|(s, _)| s)
            .unwrap_or(""),
    };
    format!("Merged tool:\n```python\n{script}\n```\n")
}

/// The scripted model behind a local HTTP listener.
pub struct ScriptedServer {
    addr: SocketAddr,
    server: Arc<tiny_http::Server>,
    requests: Arc<AtomicU64>,
    worker: Option<JoinHandle<()>>,
}

impl ScriptedServer {
    /// Listen on an ephemeral port on 127.0.0.1.
    pub fn start() -> std::io::Result<Self> {
        Self::start_on(0)
    }

    pub fn start_on(port: u16) -> std::io::Result<Self> {
        let server = tiny_http::Server::http(("127.0.0.1", port)).map_err(std::io::Error::other)?;
        let addr = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| std::io::Error::other("listener has no IP address"))?;
        let server = Arc::new(server);
        let requests = Arc::new(AtomicU64::new(0));
        let worker = {
            let server = Arc::clone(&server);
            let requests = Arc::clone(&requests);
            std::thread::spawn(move || {
                for request in server.incoming_requests() {
                    requests.fetch_add(1, Ordering::SeqCst);
                    handle(request);
                }
            })
        };
        Ok(Self { addr, server, requests, worker: Some(worker) })
    }

    /// Base URL to configure as the transport endpoint.
    pub fn endpoint(&self) -> String {
        format!("http://{}/v1", self.addr)
    }

    /// Requests received so far.
    pub fn requests(&self) -> u64 {
        self.requests.load(Ordering::SeqCst)
    }

    /// Block serving requests until the process is killed.
    pub fn wait(mut self) {
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}

impl Drop for ScriptedServer {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}

fn handle(mut request: tiny_http::Request) {
    let json_header = tiny_http::Header::from_bytes("Content-Type", "application/json").expect("static header");
    let reply = |status: u16, body: Value| tiny_http::Response::from_string(body.to_string()).with_status_code(status).with_header(json_header.clone());
    let path = request.url().split('?').next().unwrap_or("");
    if request.method() != &tiny_http::Method::Post || !matches!(path, "/v1/chat/completions" | "/chat/completions") {
        let _ = request.respond(reply(404, json!({"error": {"message": "not found"}})));
        return;
    }
    let mut raw = String::new();
    if request.as_reader().read_to_string(&mut raw).is_err() {
        let _ = request.respond(reply(400, json!({"error": {"message": "unreadable body"}})));
        return;
    }
    let body: Value = match serde_json::from_str(&raw) {
        Ok(v) => v,
        Err(e) => {
            let _ = request.respond(reply(400, json!({"error": {"message": e.to_string()}})));
            return;
        }
    };
    let content = respond(&body);
    let completion = json!({
        "id": "chatcmpl-scripted",
        "object": "chat.completion",
        "created": 0,
        "model": body.get("model").cloned().unwrap_or(Value::Null),
        "choices": [{"index": 0, "message": {"role": "assistant", "content": content}, "finish_reason": "stop"}],
        "usage": {"prompt_tokens": 0, "completion_tokens": 0, "total_tokens": 0},
    });
    let _ = request.respond(reply(200, completion));
}
