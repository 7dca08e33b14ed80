"""Mask prior: random-count masks, the forward-prediction prefix mask, and
explicit masks.  1 marks an observed step, 0 a missing one."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

RANDOM_COUNT = "random_count"
FORWARD_PREDICTION = "forward_prediction"
EXPLICIT = "explicit"

FORWARD_PREFIX = 5


class MaskError(ValueError):
    pass


@dataclass
class MaskSpec:
    """How to draw masks.

    ``min_missing``/``max_missing`` count missing steps among the maskable
    ones; kept endpoints are never masked.
    """

    kind: str = RANDOM_COUNT
    min_missing: int = 0
    max_missing: int = 0
    keep_first: bool = True
    keep_last: bool = False
    seed: int | None = None
    explicit: np.ndarray | None = None

    def maskable(self, T: int) -> np.ndarray:
        idx = np.arange(T)
        keep = np.zeros(T, dtype=bool)
        if self.keep_first and T:
            keep[0] = True
        if self.keep_last and T:
            keep[-1] = True
        return idx[~keep]

    def validate(self, T: int) -> None:
        if self.kind == RANDOM_COUNT:
            n = self.maskable(T).size
            if not 0 <= self.min_missing <= self.max_missing <= n:
                raise MaskError(
                    f"infeasible mask spec: need 0 <= min_missing ({self.min_missing}) <= "
                    f"max_missing ({self.max_missing}) <= maskable steps ({n}) for T={T}")
        elif self.kind == FORWARD_PREDICTION:
            if T < FORWARD_PREFIX:
                raise MaskError(f"forward-prediction masks need T >= {FORWARD_PREFIX}, got {T}")
        elif self.kind == EXPLICIT:
            if self.explicit is None or len(self.explicit) != T:
                raise MaskError(f"explicit mask must have length {T}")
        else:
            raise MaskError(f"unknown mask kind {self.kind!r}")


def sample_mask(spec: MaskSpec, T: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """Draw one boolean mask of length ``T``.

    Randomness comes from ``rng`` when given, else from ``spec.seed``.
    """
    spec.validate(T)
    if spec.kind == FORWARD_PREDICTION:
        mask = np.zeros(T, dtype=bool)
        mask[:FORWARD_PREFIX] = True
        return mask
    if spec.kind == EXPLICIT:
        return np.asarray(spec.explicit).astype(bool).copy()
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    candidates = spec.maskable(T)
    k = int(rng.integers(spec.min_missing, spec.max_missing + 1))
    mask = np.ones(T, dtype=bool)
    mask[rng.choice(candidates, size=k, replace=False)] = False
    return mask


def sample_masks(spec: MaskSpec, T: int, n: int, rng: np.random.Generator) -> np.ndarray:
    return np.stack([sample_mask(spec, T, rng) for _ in range(n)]) if n else np.zeros((0, T), bool)


def parse_mask_spec(text: str, T: int | None = None) -> MaskSpec:
    """``random:MIN:MAX`` (optionally ``:keep_last``), ``forward``, or a 0/1 string."""
    text = text.strip()
    if text in ("forward", FORWARD_PREDICTION):
        return MaskSpec(kind=FORWARD_PREDICTION)
    if text.startswith("random:") or text.startswith(RANDOM_COUNT + ":"):
        parts = text.split(":")[1:]
        try:
            lo, hi = int(parts[0]), int(parts[1])
        except (IndexError, ValueError):
            raise MaskError(f"bad random mask spec {text!r}; expected random:MIN:MAX") from None
        flags = set(parts[2:])
        unknown = flags - {"keep_last", "no_keep_first"}
        if unknown:
            raise MaskError(f"unknown mask flags {sorted(unknown)}")
        return MaskSpec(kind=RANDOM_COUNT, min_missing=lo, max_missing=hi,
                        keep_first="no_keep_first" not in flags, keep_last="keep_last" in flags)
    if text and set(text) <= {"0", "1"}:
        return MaskSpec(kind=EXPLICIT, explicit=np.array([c == "1" for c in text]))
    raise MaskError(f"unrecognised mask spec {text!r}")


def mask_to_string(mask) -> str:
    return "".join("1" if b else "0" for b in np.asarray(mask).astype(bool))


def mask_from_string(text: str) -> np.ndarray:
    text = text.strip()
    if not text or set(text) - {"0", "1"}:
        raise MaskError(f"mask line must be a non-empty 0/1 string, got {text[:40]!r}")
    return np.array([c == "1" for c in text], dtype=bool)


def read_mask_file(path) -> list[np.ndarray]:
    lines = Path(path).read_text().splitlines()
    return [mask_from_string(line) for line in lines if line.strip()]


def write_mask_file(path, masks) -> None:
    from .io import atomic_write_text

    atomic_write_text(path, "".join(mask_to_string(m) + "\n" for m in masks))


def gap_widths(mask) -> list[int]:
    """Pivot-to-pivot distances of every gap (trailing gaps end at T)."""
    m = mask_from_string(mask) if isinstance(mask, str) else np.asarray(mask).astype(bool)
    widths = []
    t, T = 0, m.size
    while t < T:
        if m[t]:
            t += 1
            continue
        start = t
        while t < T and not m[t]:
            t += 1
        widths.append(t - start + 1)
    return widths


def default_resolutions(masks) -> int:
    """R such that 2**R is the power of two nearest the mean gap width."""
    widths = [w for m in masks for w in gap_widths(m)]
    if not widths:
        return 1
    return max(1, int(round(np.log2(np.mean(widths)))))
