#!/usr/bin/env python3
"""Brain region analyzer: parameterized bright-area detection and region analysis."""
import json
import sys

SERVER_INFO = {"name": "brain-region-analyzer", "version": "1.0.0"}

TOOLS = [
    {
        "name": "analyze_brain_region",
        "description": "Analyze a brain region. analysis_mode 'detect' reports bright areas above threshold_multiplier x mean intensity; 'describe' reports intensity asymmetry.",
        "inputSchema": {
            "type": "object",
            "properties": {
                "region": {"type": "string", "description": "left, right or whole"},
                "analysis_mode": {"type": "string", "description": "detect or describe"},
                "threshold_multiplier": {"type": "number", "description": "Multiple of mean intensity for detect mode (default 1.5)."},
            },
            "required": ["region", "analysis_mode"],
        },
    }
]

REGIONS = ("left", "right", "whole")
MODES = ("detect", "describe")


def call_tool(name, args):
    region = args.get("region")
    mode = args.get("analysis_mode")
    if region not in REGIONS:
        raise ValueError("region must be one of %s" % ", ".join(REGIONS))
    if mode not in MODES:
        raise ValueError("analysis_mode must be one of %s" % ", ".join(MODES))
    threshold = float(args.get("threshold_multiplier", 1.5))
    if mode == "detect":
        finding = "2 bright areas above %.1fx mean intensity" % threshold
    else:
        finding = "asymmetric hyperintensity, 1 lesion candidate"
    return "region=%s; analysis_mode=%s; %s" % (region, mode, finding)


def send(msg):
    sys.stdout.write(json.dumps(msg) + "\n")
    sys.stdout.flush()


def main():
    for line in sys.stdin:
        line = line.strip()
        if not line:
            continue
        try:
            msg = json.loads(line)
        except ValueError:
            send({"jsonrpc": "2.0", "id": None, "error": {"code": -32700, "message": "Parse error"}})
            continue
        if "id" not in msg:
            continue
        mid, method, params = msg["id"], msg.get("method"), msg.get("params") or {}
        if method == "initialize":
            result = {
                "protocolVersion": params.get("protocolVersion", "2024-11-05"),
                "capabilities": {"tools": {}},
                "serverInfo": SERVER_INFO,
            }
        elif method == "tools/list":
            result = {"tools": TOOLS}
        elif method == "tools/call":
            name = params.get("name")
            if name not in [t["name"] for t in TOOLS]:
                send({"jsonrpc": "2.0", "id": mid, "error": {"code": -32602, "message": "Unknown tool: %s" % name}})
                continue
            try:
                text = call_tool(name, params.get("arguments") or {})
                result = {"content": [{"type": "text", "text": text}], "isError": False}
            except Exception as exc:
                send({"jsonrpc": "2.0", "id": mid, "error": {"code": -32000, "message": str(exc)}})
                continue
        elif method == "ping":
            result = {}
        else:
            send({"jsonrpc": "2.0", "id": mid, "error": {"code": -32601, "message": "Method not found: %s" % method}})
            continue
        send({"jsonrpc": "2.0", "id": mid, "result": result})


if __name__ == "__main__":
    main()
