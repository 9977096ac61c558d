//! Retry, repair and fallback paths of the box stages, driven by canned
//! backends, plus manifest persistence errors.

use std::path::Path;
use std::sync::{Arc, Mutex};

use mcpbox::boxer::{
    abstract_mcp, assemble_box, cluster_mcps_detailed, consolidate_cluster, load_box, save_box, AbstractedMcp,
    BoxError, BuildContext, ClusterMethod, ConsolidatedMcp, McpCluster,
};
use mcpbox::gateway::{ChatRequest, Completion, Gateway, Mode};
use mcpbox::model::Provenance;
use mcpbox::sandbox::SandboxConfig;
use mcpbox::McpCandidate;

fn echo_script() -> String {
    std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/tools/echo.py")).unwrap()
}

/// Backend replying with `replies` in turn (the last one repeats) and
/// keeping every request.
fn canned(replies: Vec<String>) -> (Gateway, Arc<Mutex<Vec<ChatRequest>>>) {
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    let backend = move |req: &ChatRequest| {
        let mut log = log.lock().unwrap();
        log.push(req.clone());
        let reply = replies[(log.len() - 1).min(replies.len() - 1)].clone();
        Ok(Completion { content: reply, finish_reason: "stop".into() })
    };
    (Gateway::with_backend(Mode::Live, None, backend).unwrap(), seen)
}

fn abstraction_reply(params: &[&str], script: &str) -> String {
    let params: Vec<_> = params.iter().map(|p| serde_json::json!({"name": p, "description": ""})).collect();
    format!(
        "```json\n{}\n```\n```python\n{script}\n```\n",
        serde_json::json!({"summary": "Echo text.", "parameters": params})
    )
}

fn ctx<'a>(gateway: &'a Gateway, sandbox: &'a SandboxConfig) -> BuildContext<'a> {
    BuildContext { gateway, model_id: "builder", sandbox, retry_budget: 2 }
}

#[test]
fn prose_replies_exhaust_the_budget() {
    let (g, seen) = canned(vec!["I would rewrite it to be more general.".into()]);
    let sandbox = SandboxConfig::default();
    let err = abstract_mcp(&McpCandidate::new("t", 1, echo_script()), &ctx(&g, &sandbox)).unwrap_err();
    assert!(matches!(err, BoxError::AbstractionFailed { attempts: 3, .. }), "{err}");
    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 3);
    // Each retry carries the feedback for the previous reply.
    assert_eq!(seen[2].messages.len(), 5);
    assert!(seen[1].messages[2].content.contains("python"));
}

#[test]
fn invalid_rewrite_is_retried_with_feedback() {
    let broken = echo_script().replace("def call_tool(name, args):", "def call_tool(name, args)");
    let (g, seen) = canned(vec![abstraction_reply(&["text"], &broken), abstraction_reply(&["text"], &echo_script())]);
    let sandbox = SandboxConfig::default();
    let a = abstract_mcp(&McpCandidate::new("t", 1, echo_script()), &ctx(&g, &sandbox)).unwrap();
    assert_eq!(a.summary, "Echo text.");
    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 2);
    assert!(seen[1].messages[2].content.contains("syntax_error"), "{}", seen[1].messages[2].content);
}

#[test]
fn too_many_parameters_costs_one_retry_then_flags() {
    let four = abstraction_reply(&["a", "b", "c", "d"], &echo_script());
    let (g, seen) = canned(vec![four.clone(), four]);
    let sandbox = SandboxConfig::default();
    let a = abstract_mcp(&McpCandidate::new("t", 1, echo_script()), &ctx(&g, &sandbox)).unwrap();
    assert!(a.over_parameter_bound);
    assert_eq!(a.exposed_parameters.len(), 4);
    assert_eq!(seen.lock().unwrap().len(), 2);

    let (g, seen) = canned(vec![abstraction_reply(&["a", "b", "c", "d"], &echo_script()), abstraction_reply(&["a", "b"], &echo_script())]);
    let a = abstract_mcp(&McpCandidate::new("t", 1, echo_script()), &ctx(&g, &sandbox)).unwrap();
    assert!(!a.over_parameter_bound);
    assert_eq!(a.exposed_parameters.len(), 2);
    assert_eq!(seen.lock().unwrap().len(), 2);
}

fn abstracted(tool: &str) -> AbstractedMcp {
    AbstractedMcp {
        origin_digest: tool.into(),
        script_text: String::new(),
        exposed_parameters: vec![],
        summary: String::new(),
        tools: vec![mcpbox::ToolSchema { name: tool.into(), description: String::new(), parameters: vec![] }],
        over_parameter_bound: false,
    }
}

#[test]
fn clustering_repair_then_fallback() {
    let items = vec![abstracted("detect_bright_spots"), abstracted("solve_24"), abstracted("detect_bright_spot")];
    let sandbox = SandboxConfig::default();

    let ok = "```json\n{\"clusters\": [{\"name\": \"image\", \"members\": [3, 1]}, {\"name\": \"math\", \"members\": [2]}]}\n```";
    let (g, _) = canned(vec!["{\"clusters\": [{\"name\": \"all\", \"members\": [1, 2]}]}".into(), ok.into()]);
    let (clusters, method) = cluster_mcps_detailed(&items, &ctx(&g, &sandbox)).unwrap();
    assert_eq!(method, ClusterMethod::Repaired);
    let names: Vec<&str> = clusters.iter().map(|c| c.cluster_name.as_str()).collect();
    assert_eq!(names, ["image", "math"]);
    let image: Vec<&str> = clusters[0].members.iter().map(|m| m.origin_digest.as_str()).collect();
    assert_eq!(image, ["detect_bright_spots", "detect_bright_spot"]);

    let (g, seen) = canned(vec!["no idea".into()]);
    let (clusters, method) = cluster_mcps_detailed(&items, &ctx(&g, &sandbox)).unwrap();
    assert_eq!(method, ClusterMethod::Fallback);
    assert_eq!(seen.lock().unwrap().len(), 2);
    // Stemming puts spot/spots together.
    let sizes: Vec<usize> = clusters.iter().map(|c| c.members.len()).collect();
    assert_eq!(sizes, [2, 1]);
    let total: usize = clusters.iter().map(|c| c.members.len()).sum();
    assert_eq!(total, items.len());

    let (g, seen) = canned(vec![]);
    let (clusters, method) = cluster_mcps_detailed(&[], &ctx(&g, &sandbox)).unwrap();
    assert!(clusters.is_empty());
    assert_eq!(method, ClusterMethod::None);
    assert!(seen.lock().unwrap().is_empty());
}

#[test]
fn consolidation_gives_up_after_budget() {
    let (g, seen) = canned(vec!["```python\nthis is not python(\n```".into()]);
    let sandbox = SandboxConfig::default();
    let cluster = McpCluster { cluster_name: "echo".into(), members: vec![abstracted("echo")] };
    let err = consolidate_cluster(&cluster, &ctx(&g, &sandbox)).unwrap_err();
    assert!(matches!(err, BoxError::ConsolidationFailed { attempts: 3, .. }), "{err}");
    assert_eq!(seen.lock().unwrap().len(), 3);

    let (g, _) = canned(vec![format!("```python\n{}\n```", echo_script())]);
    let merged = consolidate_cluster(&cluster, &ctx(&g, &sandbox)).unwrap();
    assert_eq!(merged.tool_schemas[0].name, "echo");
    assert_eq!(merged.member_digests, ["echo"]);
}

fn provenance() -> Provenance {
    Provenance { source_log_digest: "s".into(), created_at: "2025-01-01T00:00:00Z".into(), pipeline_config_digest: "p".into() }
}

fn consolidated(name: &str) -> ConsolidatedMcp {
    ConsolidatedMcp { cluster_name: name.into(), script_text: echo_script(), tool_schemas: vec![], member_digests: vec![] }
}

#[test]
fn assembled_boxes_round_trip_and_disambiguate() {
    let dir = tempfile::tempdir().unwrap();
    let b = assemble_box(&[consolidated("Image Utils"), consolidated("image-utils"), consolidated("Image Utils")], provenance(), dir.path())
        .unwrap();
    let names: Vec<(&str, &str)> = b.entries.iter().map(|e| (e.cluster_name.as_str(), e.tool_script_path.as_str())).collect();
    assert_eq!(
        names,
        [
            ("Image Utils", "tools/image-utils.tool"),
            ("Image Utils-2", "tools/image-utils-2-2.tool"),
            ("image-utils", "tools/image-utils-2.tool"),
        ]
    );
    assert_eq!(load_box(dir.path()).unwrap(), b);
}

#[test]
fn load_rejects_bad_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let good = assemble_box(&[consolidated("echo")], provenance(), root).unwrap();

    let mut v2 = good.clone();
    v2.schema_version = "2".into();
    save_box(&v2, root).unwrap();
    assert!(matches!(load_box(root), Err(BoxError::UnsupportedSchema { found }) if found == "2"));

    let mut missing = good.clone();
    missing.entries[0].tool_script_path = "tools/gone.tool".into();
    save_box(&missing, root).unwrap();
    assert!(matches!(load_box(root), Err(BoxError::MissingTool { .. })));

    let mut escaping = good.clone();
    escaping.entries[0].tool_script_path = "../echo.tool".into();
    save_box(&escaping, root).unwrap();
    assert!(matches!(load_box(root), Err(BoxError::Parse { .. })));

    let mut dup = good.clone();
    dup.entries.push(dup.entries[0].clone());
    save_box(&dup, root).unwrap();
    assert!(matches!(load_box(root), Err(BoxError::Parse { .. })));

    std::fs::write(root.join("box.json"), "{not json").unwrap();
    assert!(matches!(load_box(root), Err(BoxError::Parse { .. })));

    let empty = tempfile::tempdir().unwrap();
    assert!(matches!(load_box(empty.path()), Err(BoxError::Io { .. })));
}
