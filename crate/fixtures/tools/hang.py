#!/usr/bin/env python3
"""Tool server that never answers anything."""
import time

while True:
    time.sleep(3600)
