# services/helpers.py: logging, file I/O and small utilities shared by the stages.

import hashlib
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Callable, Dict, Iterable, Iterator, List, Sequence, TypeVar

BASE_DIR = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
LOGGER_NAME = "ActivityChains"
LOG_FORMAT = "%(asctime)s [%(levelname)s] %(message)s"

T = TypeVar("T")
R = TypeVar("R")


# ---------------------------
# Logging setup
# ---------------------------
def get_logger(name: str = "") -> logging.Logger:
    return logging.getLogger(f"{LOGGER_NAME}.{name}" if name else LOGGER_NAME)


def setup_logging(log_dir: str = None, level: int = logging.INFO) -> logging.Logger:
    """
    Attach a stderr handler and, when log_dir is given, a file handler to the
    project logger. Safe to call more than once.
    """
    logger = get_logger()
    logger.setLevel(level)
    formatter = logging.Formatter(LOG_FORMAT)

    if not any(type(h) is logging.StreamHandler for h in logger.handlers):
        ch = logging.StreamHandler()  # stderr; stdout is for summaries
        ch.setFormatter(formatter)
        logger.addHandler(ch)

    if log_dir:
        os.makedirs(log_dir, exist_ok=True)
        log_file = os.path.abspath(os.path.join(log_dir, "pipeline.log"))
        for h in list(logger.handlers):
            if isinstance(h, logging.FileHandler) and h.baseFilename != log_file:
                logger.removeHandler(h)
                h.close()
        if not any(isinstance(h, logging.FileHandler) for h in logger.handlers):
            fh = logging.FileHandler(log_file, encoding="utf-8")
            fh.setFormatter(formatter)
            logger.addHandler(fh)
    return logger


# ---------------------------
# Paths
# ---------------------------
def resolve_data_path(path: str) -> str:
    """Relative paths resolve against the cwd first, then the repo root."""
    if os.path.isabs(path) or os.path.exists(path):
        return path
    candidate = os.path.join(BASE_DIR, path)
    return candidate if os.path.exists(candidate) else path


# ---------------------------
# JSON / JSONL
# ---------------------------
def write_json(path: str, payload: Any) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True, ensure_ascii=False)
        f.write("\n")


def read_json(path: str) -> Any:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def write_jsonl(path: str, rows: Iterable[Dict[str, Any]]) -> int:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    n = 0
    with open(path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True, ensure_ascii=False))
            f.write("\n")
            n += 1
    return n


def read_jsonl(path: str) -> Iterator[Dict[str, Any]]:
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                yield json.loads(line)


# ---------------------------
# Hashing / manifest
# ---------------------------
def file_sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def build_manifest(inputs: Sequence[str], artifacts: Sequence[str], root: str) -> Dict[str, Any]:
    def entry(p):
        return {"path": os.path.relpath(p, root), "sha256": file_sha256(p)}

    return {
        "inputs": [entry(p) for p in sorted(set(inputs)) if os.path.exists(p)],
        "artifacts": [entry(p) for p in sorted(set(artifacts)) if os.path.exists(p)],
    }


# ---------------------------
# Concurrency
# ---------------------------
def parallel_map(fn: Callable[[T], R], items: Sequence[T], threads: int = 1) -> List[R]:
    """Map fn over items, results in input order whatever the thread count."""
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))
