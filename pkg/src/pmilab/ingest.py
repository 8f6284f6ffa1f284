"""Corpus loading, pair construction, prompt rendering, and embeddings.

The corpus loader normalizes common JSON/CSV field variants: context-like
fields (context / history / dialog) and response-like fields (response /
reference / answer). List values are treated as turn sequences, strings are
split on newlines; empty lines are removed, whitespace trimmed, and short
"NAME:" speaker prefixes stripped from turn starts.

Embeddings come from an HTTP provider (request: {"model": ..., "input":
[texts]}; response: {"embeddings": [[floats]]}) or from the deterministic
offline stub, always through a content-addressed on-disk cache keyed by
(model name, prompt bytes).
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import re
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import requests

from .core import DataError, PairSample, POSITIVE, child_rng

logger = logging.getLogger(__name__)

ENV_ENDPOINT = "PMILAB_EMBED_ENDPOINT"
ENV_MODEL = "PMILAB_EMBED_MODEL"

CONTEXT_KEYS = ("context", "history", "dialog")
RESPONSE_KEYS = ("response", "reference", "answer")
ANNOTATION_KEY = "annot_relevant_mean"

# A short leading token followed by ": " (or colon at end) is a speaker tag.
_SPEAKER_RE = re.compile(r"^\s*[A-Za-z][\w .\-]{0,19}:(\s+|$)")


@dataclass
class Dialogue:
    """An ordered multi-turn conversation."""

    id: str
    turns: list[str]


def strip_speaker_prefix(turn: str) -> str:
    """Drop a leading "NAME:" tag; colons later in the utterance are kept."""
    return _SPEAKER_RE.sub("", turn, count=1).strip()


def _clean_turns(value) -> list[str]:
    if isinstance(value, str):
        raw = value.split("\n")
    elif isinstance(value, (list, tuple)):
        raw = [str(v) for v in value]
    else:
        raise DataError(f"cannot interpret turn value of type {type(value).__name__}")
    turns = [strip_speaker_prefix(t) for t in raw]
    return [t for t in turns if t]


def _record_to_dialogue(record: dict, index: int) -> Dialogue:
    ctx_key = next((k for k in CONTEXT_KEYS if k in record), None)
    resp_key = next((k for k in RESPONSE_KEYS if k in record), None)
    if ctx_key is None and resp_key is None:
        raise DataError(
            f"record {index} has no recognized fields "
            f"(expected one of {CONTEXT_KEYS + RESPONSE_KEYS})"
        )
    turns: list[str] = []
    if ctx_key is not None:
        turns.extend(_clean_turns(record[ctx_key]))
    if resp_key is not None:
        turns.extend(_clean_turns(record[resp_key]))
    if not turns:
        raise DataError(f"record {index} contains no non-empty turns")
    dialogue_id = str(record.get("id", record.get("dialogue_id", f"d{index}")))
    return Dialogue(id=dialogue_id, turns=turns)


def load_corpus(path: str | Path, fmt: str | None = None) -> list[Dialogue]:
    """Load dialogues from a JSONL or CSV file.

    Records with no recognized schema raise; individually malformed lines
    are skipped and counted in one summary warning.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"corpus file not found: {path}")
    if fmt is None:
        fmt = "csv" if path.suffix.lower() == ".csv" else "jsonl"
    if fmt not in ("jsonl", "csv"):
        raise DataError(f"unknown corpus format {fmt!r}")

    dialogues = []
    skipped = 0
    if fmt == "jsonl":
        with path.open(encoding="utf-8") as fh:
            for index, line in enumerate(fh):
                if not line.strip():
                    continue
                try:
                    record = json.loads(line)
                except json.JSONDecodeError:
                    skipped += 1
                    continue
                dialogues.append(_record_to_dialogue(record, index))
    else:
        with path.open(encoding="utf-8", newline="") as fh:
            for index, record in enumerate(csv.DictReader(fh)):
                try:
                    cleaned = {k: v for k, v in record.items() if k and v}
                    dialogues.append(_record_to_dialogue(cleaned, index))
                except DataError:
                    if any(k in (record or {}) for k in CONTEXT_KEYS + RESPONSE_KEYS):
                        skipped += 1
                    else:
                        raise
    if skipped:
        logger.warning("skipped %d malformed record(s) in %s", skipped, path)
    return dialogues


def build_pairs(dialogue: Dialogue) -> list[PairSample]:
    """One positive per turn t >= 2: context = turns[:t-1] newline-joined,
    response = turn t. Dialogues with fewer than 2 turns yield nothing."""
    out = []
    for i in range(1, len(dialogue.turns)):
        out.append(
            PairSample(
                context="\n".join(dialogue.turns[:i]),
                response=dialogue.turns[i],
                label=POSITIVE,
                dialogue_id=dialogue.id,
            )
        )
    return out


PROMPT_TEMPLATE = (
    "You are an assistant skilled at evaluating the relevance of a response "
    "to a given context.\n"
    "Task: Evaluate the relevance of the following response to the context.\n"
    "Context: {context_text}\n"
    "Response: {response_text}\n"
    "Result:"
)


def render_prompt(context: str, response: str, template: str = PROMPT_TEMPLATE) -> str:
    """Fill the pair-level scoring prompt; byte-stable for cache keys."""
    return template.format(context_text=context, response_text=response)


@dataclass
class ProviderConfig:
    """Connection settings for an embedding endpoint."""

    endpoint: str = "stub"
    model_name: str = "stub-gaussian-64"
    batch_size: int = 32
    timeout: float = 30.0
    max_retries: int = 3
    cache_dir: str | Path | None = None
    stub_dim: int = 64

    def __post_init__(self):
        if self.batch_size < 1:
            raise DataError("batch_size must be >= 1")
        if self.max_retries < 0:
            raise DataError("max_retries must be >= 0")

    @property
    def is_stub(self) -> bool:
        return self.endpoint == "stub" or self.endpoint.startswith("stub:")

    def to_dict(self) -> dict:
        return {
            "endpoint": self.endpoint,
            "model_name": self.model_name,
            "batch_size": self.batch_size,
            "timeout": self.timeout,
            "max_retries": self.max_retries,
            "stub_dim": self.stub_dim,
        }


class StubEmbedder:
    """Deterministic offline embedder: one hash-seeded Gaussian vector per
    (model name, prompt), independent of call order."""

    def __init__(self, dim: int = 64, model_name: str = "stub-gaussian-64"):
        if dim < 1:
            raise DataError("stub dimension must be >= 1")
        self.dim = dim
        self.model_name = model_name

    def embed(self, prompts: list[str]) -> list[np.ndarray]:
        out = []
        for prompt in prompts:
            digest = hashlib.sha256(
                self.model_name.encode("utf-8") + b"\x00" + prompt.encode("utf-8")
            ).digest()
            seed = int.from_bytes(digest[:8], "big")
            rng = np.random.Generator(np.random.PCG64(seed))
            out.append(rng.standard_normal(self.dim))
        return out


def embed_remote(
    cfg: ProviderConfig,
    prompts: list[str],
    session: requests.Session | None = None,
) -> list[np.ndarray]:
    """Embed prompts via the HTTP provider, batched and order-preserving.

    Transient failures are retried per batch with exponential backoff up to
    cfg.max_retries; a dimension change mid-dataset is an error.
    """
    if cfg.is_stub:
        dim = cfg.stub_dim
        if ":" in cfg.endpoint:
            dim = int(cfg.endpoint.split(":", 1)[1])
        return StubEmbedder(dim=dim, model_name=cfg.model_name).embed(prompts)
    sess = session or requests.Session()
    vectors: list[np.ndarray] = []
    dim: int | None = None
    for start in range(0, len(prompts), cfg.batch_size):
        batch = prompts[start : start + cfg.batch_size]
        payload = {"model": cfg.model_name, "input": batch}
        last_error: Exception | None = None
        for attempt in range(cfg.max_retries + 1):
            try:
                resp = sess.post(cfg.endpoint, json=payload, timeout=cfg.timeout)
                resp.raise_for_status()
                data = resp.json()
                break
            except (requests.RequestException, ValueError) as exc:
                last_error = exc
                if attempt < cfg.max_retries:
                    time.sleep(min(2.0**attempt * 0.1, 5.0))
        else:
            raise DataError(
                f"embedding provider failed after {cfg.max_retries + 1} attempts: "
                f"{last_error}"
            )
        embeddings = data.get("embeddings")
        if embeddings is None or len(embeddings) != len(batch):
            raise DataError("provider returned a malformed embeddings payload")
        for vec in embeddings:
            arr = np.asarray(vec, dtype=np.float64)
            if dim is None:
                dim = arr.size
            elif arr.size != dim:
                raise DataError(
                    f"embedding dimension drifted mid-dataset: {arr.size} != {dim}"
                )
            vectors.append(arr)
    return vectors


def cache_key(model_name: str, prompt: str) -> str:
    """Content address of one (model, prompt) embedding."""
    digest = hashlib.sha256(
        model_name.encode("utf-8") + b"\x00" + prompt.encode("utf-8")
    )
    return digest.hexdigest()


def cache_get(cache_dir: str | Path, key: str) -> np.ndarray | None:
    path = Path(cache_dir) / f"{key}.json"
    if not path.exists():
        return None
    try:
        data = json.loads(path.read_text())
        arr = np.asarray(data["vector"], dtype=np.float64)
        if arr.ndim != 1 or arr.size == 0 or not np.all(np.isfinite(arr)):
            return None
        return arr
    except (OSError, ValueError, KeyError, json.JSONDecodeError):
        return None  # corrupt entries are misses


def cache_put(cache_dir: str | Path, key: str, vector: np.ndarray) -> None:
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    tmp = cache_dir / f"{key}.json.tmp"
    tmp.write_text(json.dumps({"vector": np.asarray(vector).tolist()}))
    tmp.replace(cache_dir / f"{key}.json")


class EmbeddingClient:
    """Cache-aware embedding frontend over the stub or a remote provider."""

    def __init__(self, cfg: ProviderConfig, session: requests.Session | None = None):
        self.cfg = cfg
        self.session = session
        self.provider_requests = 0
        if cfg.cache_dir is not None:
            cache_dir = Path(cfg.cache_dir)
            try:
                cache_dir.mkdir(parents=True, exist_ok=True)
                probe = cache_dir / ".write-probe"
                probe.write_text("")
                probe.unlink()
            except OSError as exc:
                raise DataError(f"cache directory not writable: {exc}") from exc

    def embed(self, prompts: list[str]) -> np.ndarray:
        """Embed prompts, consulting the cache first.

        Misses go to the provider one batch at a time and are cached as each
        batch succeeds, so an interrupted run keeps its partial progress.
        ``provider_requests`` counts the issued (non-cached) requests.
        """
        vectors: list[np.ndarray | None] = [None] * len(prompts)
        misses: list[int] = []
        if self.cfg.cache_dir is not None:
            for i, prompt in enumerate(prompts):
                hit = cache_get(self.cfg.cache_dir, cache_key(self.cfg.model_name, prompt))
                if hit is not None:
                    vectors[i] = hit
                else:
                    misses.append(i)
        else:
            misses = list(range(len(prompts)))
        for start in range(0, len(misses), self.cfg.batch_size):
            chunk = misses[start : start + self.cfg.batch_size]
            fresh = embed_remote(
                self.cfg, [prompts[i] for i in chunk], session=self.session
            )
            self.provider_requests += 1
            for i, vec in zip(chunk, fresh):
                vectors[i] = vec
                if self.cfg.cache_dir is not None:
                    cache_put(
                        self.cfg.cache_dir,
                        cache_key(self.cfg.model_name, prompts[i]),
                        vec,
                    )
        dims = {v.size for v in vectors}
        if len(dims) > 1:
            raise DataError(f"inconsistent embedding dimensions: {sorted(dims)}")
        return np.stack(vectors)  # type: ignore[arg-type]


def split_dataset(
    items: list,
    fractions: tuple[float, float, float],
    seed: int,
    group_of=None,
) -> tuple[list, list, list]:
    """Shuffle and partition items into train/val/test.

    When ``group_of`` is given (e.g. the dialogue id), whole groups are
    assigned to a single split so no dialogue leaks across splits.
    """
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise DataError("split fractions must sum to 1")
    if any(f < 0 for f in fractions):
        raise DataError("split fractions must be non-negative")
    groups: dict = {}
    order = []
    for idx, item in enumerate(items):
        key = group_of(item) if group_of is not None else idx
        if key not in groups:
            groups[key] = []
            order.append(key)
        groups[key].append(item)
    rng = child_rng(seed, "split")
    perm = rng.permutation(len(order))
    shuffled = [order[i] for i in perm]

    total = len(items)
    targets = (
        round(fractions[0] * total),
        round((fractions[0] + fractions[1]) * total),
    )
    splits: tuple[list, list, list] = ([], [], [])
    assigned = 0
    for key in shuffled:
        members = groups[key]
        if assigned < targets[0]:
            dest = 0
        elif assigned < targets[1]:
            dest = 1
        else:
            dest = 2
        splits[dest].extend(members)
        assigned += len(members)
    return splits


def load_annotated_pairs(path: str | Path) -> list[tuple[PairSample, float | None]]:
    """Read a pair-level file: JSONL/CSV rows with context, response, and an
    optional human relevance column."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"pairs file not found: {path}")
    rows: list[dict] = []
    if path.suffix.lower() == ".csv":
        with path.open(encoding="utf-8", newline="") as fh:
            rows = list(csv.DictReader(fh))
    else:
        with path.open(encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    rows.append(json.loads(line))
    out = []
    for index, row in enumerate(rows):
        context = row.get("context")
        response = row.get("response")
        if not context or not response:
            raise DataError(f"pairs record {index} lacks context/response")
        annot = row.get(ANNOTATION_KEY)
        annot_val = float(annot) if annot not in (None, "") else None
        out.append(
            (
                PairSample(
                    context=str(context),
                    response=str(response),
                    dialogue_id=str(row["dialogue_id"]) if row.get("dialogue_id") else None,
                ),
                annot_val,
            )
        )
    return out
