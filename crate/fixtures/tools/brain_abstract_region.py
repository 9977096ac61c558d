#!/usr/bin/env python3
"""Configurable hemisphere/region analysis for brain MRI slices."""
import json
import sys

SERVER_INFO = {"name": "region-analysis", "version": "1.0.0"}

TOOLS = [
    {
        "name": "analyze_region",
        "description": "Crop a region and run the selected analysis.",
        "inputSchema": {
            "type": "object",
            "properties": {
                "region": {"type": "string", "description": "left, right or whole"},
                "analysis_mode": {"type": "string", "description": "detect or describe"},
            },
            "required": ["region", "analysis_mode"],
        },
    }
]


def call_tool(name, args):
    return "%s region, %s: asymmetric hyperintensity, 1 lesion candidate" % (args["region"], args["analysis_mode"])


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
