"""Dataset files and atomic writes.

A dataset file is JSON lines.  The first line is ``{"meta": {...}}`` with
at least ``T`` and ``D``; every following line is one sequence::

    {"id": "seq-0", "values": [[x, y], ...], "mask": [1, 0, ...]}

``mask`` is optional.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class DataError(ValueError):
    pass


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass
class DatasetFile:
    values: np.ndarray  # (N, T, D)
    ids: list[str]
    masks: np.ndarray | None = None  # (N, T) bool
    meta: dict = field(default_factory=dict)

    @property
    def T(self) -> int:
        return int(self.meta.get("T", self.values.shape[1] if self.values.ndim == 3 else 0))

    @property
    def D(self) -> int:
        return int(self.meta.get("D", self.values.shape[2] if self.values.ndim == 3 else 0))

    def __len__(self) -> int:
        return len(self.ids)

    def dumps(self) -> str:
        meta = dict(self.meta)
        meta.setdefault("T", self.T)
        meta.setdefault("D", self.D)
        lines = [json.dumps({"meta": meta}, sort_keys=True)]
        for k, sid in enumerate(self.ids):
            row = {"id": sid, "values": self.values[k].tolist()}
            if self.masks is not None:
                row["mask"] = [int(b) for b in self.masks[k]]
            lines.append(json.dumps(row))
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        atomic_write_text(path, self.dumps())

    @classmethod
    def loads(cls, text: str) -> "DatasetFile":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines:
            raise DataError("empty dataset file")
        try:
            head = json.loads(lines[0])
        except json.JSONDecodeError as e:
            raise DataError(f"line 1: invalid JSON ({e})") from None
        if not isinstance(head, dict) or "meta" not in head:
            raise DataError('first line must be a {"meta": {...}} object')
        meta = head["meta"]
        try:
            T, D = int(meta["T"]), int(meta["D"])
        except (KeyError, TypeError, ValueError):
            raise DataError("metadata must give integer T and D") from None
        ids, values, masks = [], [], []
        for n, line in enumerate(lines[1:], start=2):
            try:
                row = json.loads(line)
                vals = np.asarray(row["values"], dtype=np.float64)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise DataError(f"line {n}: malformed sequence ({e})") from None
            if vals.shape != (T, D):
                raise DataError(f"line {n}: values shape {vals.shape}, expected {(T, D)}")
            ids.append(str(row.get("id", n - 2)))
            values.append(vals)
            if "mask" in row:
                m = np.asarray(row["mask"])
                if m.shape != (T,) or not np.isin(m, (0, 1)).all():
                    raise DataError(f"line {n}: mask must be {T} zeros/ones")
                masks.append(m.astype(bool))
        if masks and len(masks) != len(values):
            raise DataError("either every sequence carries a mask or none does")
        arr = np.stack(values) if values else np.zeros((0, T, D))
        return cls(arr, ids, np.stack(masks) if masks else None, meta)

    @classmethod
    def load(cls, path) -> "DatasetFile":
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise DataError(f"cannot read {path}: {e.strerror}") from None
        return cls.loads(text)
