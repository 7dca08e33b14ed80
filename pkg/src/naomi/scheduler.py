"""Multiresolution decode order and lazy hidden-state bookkeeping.

Indices are 0-based.  A gap is bounded by a left pivot ``i`` (observed or
already imputed) and a right pivot ``j``; a gap running off the end of the
sequence has ``j = VIRTUAL_END`` and is treated as if the pivot sat at
position ``T``, its backward state being the learned boundary state.

With ``R`` resolutions, head ``r`` predicts ``n_r = 2**(R - r)`` steps
ahead of the left pivot.  The chosen head is the coarsest one that fits
twice into the gap, falling back to the finest head (``n_R = 1``).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

VIRTUAL_END = None

STANDARD = "standard"
FORWARD_PREDICTION = "forward_prediction"
MODES = (STANDARD, FORWARD_PREDICTION)


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class ScheduleStep:
    i: int
    j: int | None
    r: int
    t_star: int

    @property
    def virtual_end(self) -> bool:
        return self.j is VIRTUAL_END


def as_mask(mask) -> np.ndarray:
    if isinstance(mask, str):
        if set(mask) - {"0", "1"}:
            raise ScheduleError(f"mask string may contain only 0/1, got {mask!r}")
        return np.array([c == "1" for c in mask], dtype=bool)
    arr = np.asarray(mask)
    if arr.ndim != 1:
        raise ScheduleError(f"mask must be one-dimensional, got shape {arr.shape}")
    if not np.isin(arr, (0, 1)).all():
        raise ScheduleError("mask entries must be 0 or 1")
    return arr.astype(bool)


def resolution_for_gap(width: int, resolutions: int) -> int:
    """Smallest r with 2**(R - r) <= width / 2, else R."""
    for r in range(1, resolutions + 1):
        if 2 * 2 ** (resolutions - r) <= width:
            return r
    return resolutions


def _check_mode(mode: str) -> None:
    if mode not in MODES:
        raise ScheduleError(f"unknown mode {mode!r}; expected one of {MODES}")


def next_step(mask, resolutions: int, mode: str = STANDARD) -> ScheduleStep | None:
    """Next decode action for ``mask``, or ``None`` when nothing is missing."""
    _check_mode(mode)
    if resolutions < 1:
        raise ScheduleError(f"resolution count must be >= 1, got {resolutions}")
    m = as_mask(mask)
    missing = np.flatnonzero(~m)
    if missing.size == 0:
        return None
    first = int(missing[0])
    if first == 0:
        raise ScheduleError(
            "the first step is missing, so the leading gap has no left pivot; "
            "observe step 0 (e.g. use forward-prediction masks, which keep a "
            "leading prefix) or fix the data")
    i = first - 1
    later = np.flatnonzero(m[first:])
    if later.size:
        j = first + int(later[0])
        width = j - i
    else:
        j = VIRTUAL_END
        width = m.size - i
    r = resolution_for_gap(width, resolutions)
    return ScheduleStep(i, j, r, i + 2 ** (resolutions - r))


def run_schedule(mask, resolutions: int, mode: str = STANDARD) -> list[ScheduleStep]:
    m = as_mask(mask).copy()
    steps = []
    while (step := next_step(m, resolutions, mode)) is not None:
        steps.append(step)
        m[step.t_star] = True
    return steps


def format_schedule(steps: Sequence[ScheduleStep], one_based: bool = True) -> str:
    off = 1 if one_based else 0
    lines = []
    for k, s in enumerate(steps, start=1):
        j = "end" if s.virtual_end else str(s.j + off)
        lines.append(f"step {k}: {s.i + off} {j} {s.r} {s.t_star + off}")
    return "\n".join(lines)


class StateCache:
    """Forward/backward hidden states per index with validity flags.

    ``forward[t]`` summarizes inputs ``0..t`` and ``backward[t]`` inputs
    ``t..T-1``.  Writing a new input at ``t`` stales forward entries at
    ``>= t`` and backward entries at ``<= t``; stale entries are rebuilt
    from the nearest valid neighbour only when a pivot needs them.
    """

    def __init__(self, encoder, inputs: list, batch: int):
        self.encoder = encoder
        self.inputs = list(inputs)
        self.T = len(inputs)
        self.batch = batch
        self.forward: list = [None] * self.T
        self.backward: list = [None] * self.T
        self.forward_valid = np.zeros(self.T, dtype=bool)
        self.backward_valid = np.zeros(self.T, dtype=bool)
        self.forward_evals = np.zeros(self.T, dtype=int)
        self.backward_evals = np.zeros(self.T, dtype=int)
        self._h0_forward = None
        self._h0_backward = None

    @property
    def h0_forward(self):
        if self._h0_forward is None:
            self._h0_forward = self.encoder.initial_forward(self.batch)
        return self._h0_forward

    @property
    def h0_backward(self):
        if self._h0_backward is None:
            self._h0_backward = self.encoder.initial_backward(self.batch)
        return self._h0_backward

    def initialize(self) -> None:
        for t in range(self.T):
            self._forward_at(t)
        for t in range(self.T - 1, -1, -1):
            self._backward_at(t)

    def _forward_at(self, t: int) -> None:
        h = self.forward[t - 1] if t > 0 else self.h0_forward
        self.forward[t] = self.encoder.step_forward(h, self.inputs[t])
        self.forward_valid[t] = True
        self.forward_evals[t] += 1

    def _backward_at(self, t: int) -> None:
        h = self.backward[t + 1] if t < self.T - 1 else self.h0_backward
        self.backward[t] = self.encoder.step_backward(h, self.inputs[t])
        self.backward_valid[t] = True
        self.backward_evals[t] += 1

    def write(self, t: int, new_input) -> None:
        self.inputs[t] = new_input
        self.forward_valid[t:] = False
        self.backward_valid[: t + 1] = False

    def forward_state(self, i: int):
        k = i
        while k >= 0 and not self.forward_valid[k]:
            k -= 1
        for t in range(k + 1, i + 1):
            self._forward_at(t)
        return self.forward[i]

    def backward_state(self, j: int | None):
        if j is VIRTUAL_END:
            return self.h0_backward
        k = j
        while k < self.T and not self.backward_valid[k]:
            k += 1
        for t in range(k - 1, j - 1, -1):
            self._backward_at(t)
        return self.backward[j]

    @property
    def total_forward_evals(self) -> int:
        return int(self.forward_evals.sum())

    @property
    def total_backward_evals(self) -> int:
        return int(self.backward_evals.sum())


def ensure_states(cache: StateCache, step: ScheduleStep):
    """Valid (forward state at i, backward state at j) for ``step``."""
    return cache.forward_state(step.i), cache.backward_state(step.j)


EpsSource = Callable[[tuple], np.ndarray]


def _eps_source(eps_source) -> EpsSource | None:
    if eps_source is None:
        return None
    if isinstance(eps_source, np.random.Generator):
        return lambda shape: eps_source.standard_normal(shape)
    return eps_source


@dataclass
class Imputation:
    """Result of one batched imputation.

    ``steps[t]`` is a (B, D) tensor: the original values at observed
    indices and the decoder output (a graph node when grad is on)
    elsewhere.
    """

    steps: list
    mask: np.ndarray
    schedule: list[ScheduleStep]
    cache: StateCache
    eps: dict = field(default_factory=dict)

    @property
    def values(self) -> np.ndarray:
        return np.stack([s.data for s in self.steps], axis=1)

    @property
    def decode_count(self) -> int:
        return len(self.schedule)


def _step_input(x: np.ndarray | Tensor, observed: bool, data_dim: int, batch: int):
    ones = np.ones((batch, data_dim)) if observed else np.zeros((batch, data_dim))
    if isinstance(x, Tensor):
        return ad.concat([x, ones])
    return Tensor(np.concatenate([x, ones], axis=-1))


def run_imputation(sequence, mask, model, mode: str = STANDARD, eps_source=None) -> Imputation:
    """Impute a batch sharing one mask.

    ``sequence`` is (T, D) or (B, T, D); values at missing indices are
    ignored (zero-filled before encoding).
    """
    _check_mode(mode)
    seq = np.asarray(sequence, dtype=np.float64)
    if seq.ndim == 2:
        seq = seq[None]
    if seq.ndim != 3:
        raise ValueError(f"sequence must be (T, D) or (B, T, D), got shape {seq.shape}")
    batch, T, D = seq.shape
    m = as_mask(mask)
    if m.size != T:
        raise ValueError(f"mask length {m.size} does not match sequence length {T}")
    if D != model.data_dim:
        raise ValueError(f"sequence has {D} dims, model expects {model.data_dim}")
    if np.any(~np.isfinite(seq[:, m])):
        raise ValueError("observed values must be finite")
    draw = _eps_source(eps_source)
    if not model.deterministic and draw is None:
        raise ValueError("stochastic model needs an eps source")

    filled = np.where(m[None, :, None], seq, 0.0)
    steps: list = [Tensor(filled[:, t]) for t in range(T)]
    inputs = [_step_input(filled[:, t], bool(m[t]), D, batch) for t in range(T)]

    encoder, decoder = model.encoder, model.decoder
    cache = StateCache(encoder, inputs, batch)
    cache.initialize()
    current = m.copy()
    schedule = []
    eps_used = {}
    while (step := next_step(current, decoder.resolutions, mode)) is not None:
        h_f, h_b = ensure_states(cache, step)
        eps = None
        if not decoder.deterministic:
            eps = draw((batch, D))
            eps_used[step.t_star] = eps
        x_hat = decoder(step.r, h_f, h_b, eps)
        steps[step.t_star] = x_hat
        cache.write(step.t_star, _step_input(x_hat, True, D, batch))
        current[step.t_star] = True
        schedule.append(step)
    return Imputation(steps, m, schedule, cache, eps_used)


def impute(sequence, mask, model, mode: str = STANDARD, eps_source=None) -> np.ndarray:
    """Completed copy of ``sequence``; observed entries are returned untouched."""
    seq = np.asarray(sequence, dtype=np.float64)
    with ad.no_grad():
        result = run_imputation(seq, mask, model, mode, eps_source)
    out = seq.copy()
    values = result.values if seq.ndim == 3 else result.values[0]
    missing = ~result.mask
    if seq.ndim == 3:
        out[:, missing] = values[:, missing]
    else:
        out[missing] = values[missing]
    return out
