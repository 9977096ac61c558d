#!/usr/bin/env python3
"""Detect bright spots in the current brain MRI slice."""
import json
import sys

SERVER_INFO = {"name": "bright-spots", "version": "1.0.0"}

TOOLS = [
    {
        "name": "detect_bright_spots",
        "description": "Find areas brighter than 1.5x the mean intensity in the whole brain.",
        "inputSchema": {"type": "object", "properties": {}, "required": []},
    }
]


def call_tool(name, args):
    threshold = 1.5
    return "bright spots: 2 areas above %.1fx mean intensity (whole brain)" % threshold


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
