"""Utility functions shared across the toolkit."""

import hashlib
import json
import os
import random
import time
from datetime import datetime
from typing import Any, Dict, Iterable, List

import numpy as np
import torch


def ensure_dir(path: str) -> None:
    """Create directory if it doesn't exist."""
    os.makedirs(path, exist_ok=True)


def now_ts() -> str:
    """Return current timestamp as string."""
    return datetime.now().strftime("%Y-%m-%d %H:%M:%S")


def calculate_elapsed_time(start_time: float) -> float:
    """Calculate elapsed time in seconds."""
    return round(time.time() - start_time, 2)


def seed_everything(seed: int) -> None:
    """Seed python, numpy and torch generators."""
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)


def tensor_fingerprint(tensors: Iterable[torch.Tensor]) -> str:
    """Digest of the raw bytes of a sequence of tensors."""
    digest = hashlib.sha256()
    for t in tensors:
        digest.update(t.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def read_jsonl(path: str) -> List[Dict[str, Any]]:
    """Read a JSON-lines file, skipping blank lines."""
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def append_jsonl(path: str, record: Dict[str, Any]) -> None:
    with open(path, "a", encoding="utf-8") as f:
        f.write(json.dumps(record, sort_keys=True) + "\n")


def parse_size(text: str) -> tuple:
    """Parse 'HxW' into (height, width)."""
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError as e:
        raise ValueError(f"Expected size as HxW, got '{text}'") from e
