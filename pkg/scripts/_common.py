"""Shared argument handling for the study scripts."""

import argparse
import json
import logging
import sys
from pathlib import Path

import torch


def parser(description: str) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--out", type=Path, help="write the result JSON here as well as to stdout")
    p.add_argument("--threads", type=int, default=1)
    return p


def setup(args) -> None:
    torch.set_num_threads(args.threads)
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)


def emit(result: dict, out: Path | None) -> None:
    text = json.dumps(result, indent=2, sort_keys=True, default=float)
    if out is not None:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text + "\n")
    print(text)
