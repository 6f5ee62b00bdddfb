"""Datasets: feature/label classification sets and windowed token sets.

Token records are expanded into ``(context window, next token)`` examples.
The window is left-padded with token id 0 and embedded by concatenating one
one-hot block per position, so a token model's first layer is an ordinary
affine map over ``window * vocab`` inputs.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

PAD = 0


class DataError(ValueError):
    pass


@dataclass
class TokenRecord:
    """One token sequence; the optional fields define a truth-ratio question.

    ``tokens[:prompt_len]`` is the question and the rest the correct answer;
    ``perturbed`` lists alternative (wrong) answers for the same question.
    """

    tokens: list[int]
    prompt_len: int | None = None
    perturbed: list[list[int]] = field(default_factory=list)
    qid: str | None = None

    def to_json(self) -> dict:
        out: dict = {"tokens": list(map(int, self.tokens))}
        if self.prompt_len is not None:
            out["prompt_len"] = int(self.prompt_len)
        if self.perturbed:
            out["perturbed"] = [list(map(int, p)) for p in self.perturbed]
        if self.qid is not None:
            out["id"] = self.qid
        return out


@dataclass
class Dataset:
    """Examples as dense arrays.

    ``inputs`` is ``(n, d)`` float64 (already one-hot embedded for token
    data), ``labels`` is ``(n,)`` int64 and ``groups`` maps every example to
    the record it came from (identity for classification).
    """

    inputs: np.ndarray
    labels: np.ndarray
    n_classes: int
    groups: np.ndarray | None = None
    kind: str = "classify"
    window: int | None = None
    vocab: int | None = None
    records: list[TokenRecord] | None = None

    def __post_init__(self):
        self.inputs = np.ascontiguousarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or self.labels.shape != (self.inputs.shape[0],):
            raise DataError(
                f"inputs {self.inputs.shape} and labels {self.labels.shape} disagree"
            )
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise DataError(f"labels must lie in [0, {self.n_classes})")
        if self.groups is None:
            self.groups = np.arange(len(self.labels))
        self.groups = np.asarray(self.groups, dtype=np.int64)

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def n_features(self) -> int:
        return self.inputs.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(
            self.inputs[idx], self.labels[idx], self.n_classes, self.groups[idx],
            self.kind, self.window, self.vocab, None,
        )

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(self.inputs.astype("<f8").tobytes())
        h.update(self.labels.astype("<i8").tobytes())
        return h.hexdigest()

    @classmethod
    def classification(cls, x, y, n_classes: int | None = None) -> "Dataset":
        y = np.asarray(y, dtype=np.int64)
        if n_classes is None:
            n_classes = int(y.max()) + 1 if y.size else 1
        return cls(np.asarray(x, dtype=np.float64), y, n_classes)

    @classmethod
    def from_token_records(
        cls, records: Sequence[TokenRecord], window: int, vocab: int, start: int = 1
    ) -> "Dataset":
        """Expand each record into one example per predicted position.

        Positions ``start .. len(tokens)-1`` are predicted from the ``window``
        preceding tokens; records with a ``prompt_len`` only supervise their
        answer tokens.
        """
        contexts, labels, groups = [], [], []
        for gi, rec in enumerate(records):
            toks = list(rec.tokens)
            if any(t < 0 or t >= vocab for t in toks):
                raise DataError(f"record {gi}: token ids must lie in [0, {vocab})")
            first = rec.prompt_len if rec.prompt_len is not None else start
            for pos in range(max(first, 1), len(toks)):
                contexts.append(window_before(toks, pos, window))
                labels.append(toks[pos])
                groups.append(gi)
        ctx = np.asarray(contexts, dtype=np.int64).reshape(-1, window)
        return cls(
            one_hot_windows(ctx, vocab), np.asarray(labels, dtype=np.int64), vocab,
            np.asarray(groups, dtype=np.int64), "lm", window, vocab, list(records),
        )


def window_before(tokens: Sequence[int], pos: int, window: int) -> list[int]:
    ctx = list(tokens[max(0, pos - window) : pos])
    return [PAD] * (window - len(ctx)) + ctx


def one_hot_windows(contexts: np.ndarray, vocab: int) -> np.ndarray:
    contexts = np.atleast_2d(np.asarray(contexts, dtype=np.int64))
    n, w = contexts.shape
    out = np.zeros((n, w * vocab))
    cols = contexts + vocab * np.arange(w)[None, :]
    out[np.arange(n)[:, None], cols] = 1.0
    return out


def concat(*parts: Dataset) -> Dataset:
    first = parts[0]
    offset, groups = 0, []
    for p in parts:
        groups.append(p.groups + offset)
        offset += int(p.groups.max()) + 1 if len(p) else 0
    records = None
    if all(p.records is not None for p in parts):
        records = [r for p in parts for r in p.records]
    return Dataset(
        np.concatenate([p.inputs for p in parts]),
        np.concatenate([p.labels for p in parts]),
        first.n_classes, np.concatenate(groups), first.kind, first.window, first.vocab,
        records,
    )


# ---------------------------------------------------------------------------
# JSON Lines


def read_jsonl(path: str | Path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
    return rows


def write_jsonl(path: str | Path, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def load_dataset(
    path: str | Path,
    task: str = "classify",
    n_classes: int | None = None,
    window: int | None = None,
    vocab: int | None = None,
) -> Dataset:
    rows = read_jsonl(path)
    if task == "classify":
        if not rows:
            return Dataset(np.zeros((0, 0)), np.zeros(0, dtype=np.int64), n_classes or 1)
        try:
            x = [r["x"] for r in rows]
            y = [r["y"] for r in rows]
        except KeyError as exc:
            raise DataError(f"{path}: classification records need 'x' and 'y'") from exc
        return Dataset.classification(x, y, n_classes)
    if task == "lm":
        if window is None or vocab is None:
            raise DataError("token datasets need window and vocab")
        records = []
        for r in rows:
            if "tokens" not in r:
                raise DataError(f"{path}: token records need 'tokens'")
            records.append(
                TokenRecord(r["tokens"], r.get("prompt_len"), r.get("perturbed", []), r.get("id"))
            )
        return Dataset.from_token_records(records, window, vocab)
    raise DataError(f"unknown task {task!r}")


def save_classification(path: str | Path, data: Dataset) -> None:
    write_jsonl(
        path,
        ({"x": [float(v) for v in x], "y": int(y)} for x, y in zip(data.inputs, data.labels)),
    )


def save_token_records(path: str | Path, records: Sequence[TokenRecord]) -> None:
    write_jsonl(path, (r.to_json() for r in records))
