"""Reference imputers: linear interpolation, k-nearest sequences, and the
single-resolution variant of the multiresolution model."""

from __future__ import annotations

import dataclasses

import numpy as np


def _check(sequence, mask):
    seq = np.asarray(sequence, dtype=np.float64)
    m = np.asarray(mask).astype(bool)
    if seq.ndim != 2 or m.shape != (seq.shape[0],):
        raise ValueError(f"expected (T, D) sequence and length-T mask, got {seq.shape}, {m.shape}")
    if not m.any():
        raise ValueError("cannot impute a sequence with no observed step")
    return seq, m


def linear_impute(sequence, mask) -> np.ndarray:
    """Interpolate each gap between its two nearest observations.

    Leading and trailing gaps repeat the nearest observed value.
    """
    seq, m = _check(sequence, mask)
    out = seq.copy()
    obs = np.flatnonzero(m)
    for t in np.flatnonzero(~m):
        k = np.searchsorted(obs, t)
        if k == 0:
            out[t] = seq[obs[0]]
        elif k == obs.size:
            out[t] = seq[obs[-1]]
        else:
            a, b = obs[k - 1], obs[k]
            out[t] = seq[a] + (t - a) / (b - a) * (seq[b] - seq[a])
    return out


class KnnIndex:
    def __init__(self, sequences, k: int = 5):
        self.sequences = np.asarray(sequences, dtype=np.float64)
        if self.sequences.ndim != 3 or len(self.sequences) == 0:
            raise ValueError("KNN index needs a non-empty (N, T, D) corpus")
        if not 1 <= k <= len(self.sequences):
            raise ValueError(f"k must lie in 1..{len(self.sequences)}, got {k}")
        self.k = k

    def neighbours(self, sequence, mask) -> np.ndarray:
        seq, m = _check(sequence, mask)
        diff = self.sequences[:, m] - seq[m]
        dist = np.mean(diff ** 2, axis=(1, 2))
        # stable sort: ties resolve to the lower corpus index
        return np.argsort(dist, kind="stable")[: self.k]


def knn_impute(index: KnnIndex, sequence, mask) -> np.ndarray:
    """Fill missing steps with the mean of the k closest corpus sequences,
    distance being mean squared difference over observed steps."""
    seq, m = _check(sequence, mask)
    near = index.neighbours(seq, m)
    out = seq.copy()
    out[~m] = index.sequences[near][:, ~m].mean(axis=0)
    return out


def single_res_variant(config):
    """The same training configuration decoding at one resolution (R = 1)."""
    return dataclasses.replace(config, resolutions=1)
