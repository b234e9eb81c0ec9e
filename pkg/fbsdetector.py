#!/usr/bin/env python3
"""
FBS / multi-step attack detector

Generates synthetic NAS/RRC traces, trains the packet, trace and graph models,
and runs detection over trace JSONL.

Usage:
    python fbsdetector.py gen --scenario fbs --level 2 --traces 10 --seed 42 --out data/fbs.jsonl
    python fbsdetector.py train fbs-packet --data data/train.jsonl --layer nas
    python fbsdetector.py detect --models ./models < data/test.jsonl > verdicts.jsonl

Run `python fbsdetector.py <command> --help` for the flags of each command.
"""

import sys

from app.cli import main

if __name__ == "__main__":
    sys.exit(main())
