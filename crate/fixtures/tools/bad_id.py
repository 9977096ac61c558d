#!/usr/bin/env python3
"""Fault injection: answers every request with a response id that does not match."""
import json
import sys

for line in sys.stdin:
    line = line.strip()
    if not line:
        continue
    msg = json.loads(line)
    if "id" not in msg:
        continue
    wrong = msg["id"] + 1000 if isinstance(msg["id"], int) else "wrong-id"
    sys.stdout.write(json.dumps({"jsonrpc": "2.0", "id": wrong, "result": {}}) + "\n")
    sys.stdout.flush()
