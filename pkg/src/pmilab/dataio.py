"""On-disk dataset and run-directory formats.

Embedded datasets are line-delimited JSON, one record per pair:

    {"vector": [...], "label": "positive", "target_pmi": 0.59,
     "i": 0, "j": 0, "dialogue_id": "d12"}

with the optional fields omitted when absent. All JSON emitted here is
byte-stable (sorted keys, fixed formatting, no timestamps), so reruns with
the same seed produce identical files.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .core import DataError, EmbeddedPair

SPLITS = ("train", "val", "test")


def pair_to_record(pair: EmbeddedPair) -> dict:
    record: dict = {
        "vector": [float(v) for v in pair.vector],
        "label": pair.label,
    }
    if pair.target_pmi is not None:
        record["target_pmi"] = float(pair.target_pmi)
    if pair.ctx_index is not None:
        record["i"] = int(pair.ctx_index)
        record["j"] = int(pair.resp_index)
    if pair.group_id is not None:
        record["dialogue_id"] = pair.group_id
    return record


def record_to_pair(record: dict) -> EmbeddedPair:
    return EmbeddedPair(
        vector=np.asarray(record["vector"], dtype=np.float64),
        label=record.get("label", "positive"),
        target_pmi=record.get("target_pmi"),
        ctx_index=record.get("i"),
        resp_index=record.get("j"),
        group_id=record.get("dialogue_id"),
    )


def write_embedded(path: str | Path, pairs: list[EmbeddedPair]) -> None:
    lines = [json.dumps(pair_to_record(p), sort_keys=True) for p in pairs]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_embedded(path: str | Path) -> list[EmbeddedPair]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset file not found: {path}")
    pairs = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                pairs.append(record_to_pair(json.loads(line)))
            except (json.JSONDecodeError, KeyError) as exc:
                raise DataError(f"{path}:{lineno}: bad record ({exc})") from exc
    return pairs


def write_json(path: str | Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def read_json(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise DataError(f"file not found: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from exc


def write_jsonl(path: str | Path, rows: list[dict]) -> None:
    lines = [json.dumps(row, sort_keys=True) for row in rows]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_jsonl(path: str | Path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"file not found: {path}")
    rows = []
    with path.open(encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rows.append(json.loads(line))
    return rows


def dataset_meta(dataset_dir: str | Path) -> dict:
    return read_json(Path(dataset_dir) / "meta.json")


def read_split(dataset_dir: str | Path, split: str) -> list[EmbeddedPair]:
    if split not in SPLITS:
        raise DataError(f"unknown split {split!r}")
    return read_embedded(Path(dataset_dir) / f"{split}.jsonl")
