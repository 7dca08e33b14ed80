"""Imputation objectives shared by training and evaluation."""

from __future__ import annotations

import warnings

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

PROB_CLAMP = 1e-7


class AllObservedWarning(UserWarning):
    pass


def _as_batch(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    return arr[None] if arr.ndim == 2 else arr


def mse_loss(imputed, truth, mask) -> Tensor:
    """Mean squared Euclidean error per missing step.

    ``imputed`` is a (T, D) / (B, T, D) array or a list of T tensors of
    shape (B, D); ``truth`` matches.  Observed steps are excluded.  An
    all-observed mask gives 0 and an :class:`AllObservedWarning`.
    """
    m = np.asarray(mask).astype(bool)
    truth = _as_batch(truth)
    missing = np.flatnonzero(~m)
    if missing.size == 0:
        warnings.warn("mask has no missing steps; loss is 0", AllObservedWarning, stacklevel=2)
        return Tensor(0.0)
    if isinstance(imputed, (list, tuple)):
        if len(imputed) != m.size:
            raise ValueError(f"mse_loss: {len(imputed)} steps for a mask of length {m.size}")
        pred = ad.stack([imputed[t] for t in missing])  # (n, B, D)
    else:
        arr = _as_batch(imputed)
        if arr.shape != truth.shape:
            raise ValueError(f"mse_loss: shapes {arr.shape} and {truth.shape} differ")
        pred = Tensor(np.moveaxis(arr[:, missing], 1, 0))
    target = np.moveaxis(truth[:, missing], 1, 0)
    if pred.shape != target.shape:
        raise ValueError(f"mse_loss: shapes {pred.shape} and {target.shape} differ")
    d = target.shape[-1]
    return ad.scale(ad.mean(ad.square(ad.sub(pred, target))), d)


def _log_clamped(p: Tensor) -> Tensor:
    return ad.log(ad.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP))


def _log_one_minus(p: Tensor) -> Tensor:
    return ad.log(ad.clip(ad.sub(1.0, p), PROB_CLAMP, 1.0 - PROB_CLAMP))


def _sum_steps(terms) -> Tensor:
    """Sum over steps of per-sequence terms, averaged over the batch."""
    stacked = ad.stack(terms)  # (T, B, 1)
    batch = stacked.shape[1]
    return ad.scale(ad.sum(stacked), 1.0 / batch)


def adversarial_losses(real, fake, disc) -> tuple[Tensor, Tensor]:
    """(generator loss, discriminator loss) for per-step discrimination.

    generator = sum_t log(1 - D(fake_t));
    discriminator = -[sum_t log D(real_t) + sum_t log(1 - D(fake_t))].
    Sums run over steps and are averaged over the batch.  ``real`` and
    ``fake`` are lists of (B, D) steps or (B, T, D) / (T, D) arrays.
    """
    real_steps = _steps(real)
    fake_steps = _steps(fake)
    for s in (*real_steps, *fake_steps):
        if np.isnan(s.data).any():
            raise FloatingPointError("adversarial_losses: NaN in input sequence")
    p_real = disc(real_steps)
    p_fake = disc(fake_steps)
    gen = _sum_steps([_log_one_minus(p) for p in p_fake])
    real_term = _sum_steps([_log_clamped(p) for p in p_real])
    disc_loss = ad.scale(ad.add(real_term, gen), -1.0)
    return gen, disc_loss


def _steps(x) -> list:
    if isinstance(x, (list, tuple)):
        return [ad.as_tensor(s) for s in x]
    arr = _as_batch(x)
    return [Tensor(arr[:, t]) for t in range(arr.shape[1])]
