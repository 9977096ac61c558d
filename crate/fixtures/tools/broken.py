#!/usr/bin/env python3
"""Tool server with a syntax error; fails before the handshake."""
import json
import sys

TOOLS = [
    {"name": "broken", "description": "never loads", "inputSchema": {"type": "object", "properties": {}}
]

def main(:
    pass
