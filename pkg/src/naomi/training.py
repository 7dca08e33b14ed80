"""Training loops for the squared-error and adversarial objectives."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .losses import adversarial_losses, mse_loss
from .masking import MaskSpec, RANDOM_COUNT, default_resolutions, sample_mask, sample_masks
from .model import ModelConfig, NaomiModel
from .scheduler import STANDARD, impute, run_imputation

log = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e6
OBJECTIVES = ("mse", "adversarial")


class ConfigError(ValueError):
    pass


class TrainingDiverged(FloatingPointError):
    """Loss blew up; ``state`` holds the last good checkpoint."""

    def __init__(self, message: str, state: dict, history: list):
        super().__init__(message)
        self.state = state
        self.history = history


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    lr_generator: float = 1e-3
    lr_discriminator: float = 1e-3
    lr_generator_final: float | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    objective: str = "mse"
    mask_kind: str = RANDOM_COUNT
    min_missing: int = 0
    max_missing: int = 0
    keep_first: bool = True
    keep_last: bool = False
    seed: int = 0
    resolutions: int | None = None
    hidden_size: int = 64
    mlp_size: int = 64
    disc_hidden_size: int = 64
    grad_clip: float = 0.0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr_generator < 0 or self.lr_discriminator < 0:
            raise ConfigError("learning rates must be non-negative")
        if self.lr_generator_final is not None and (self.lr_generator_final <= 0) != (self.lr_generator <= 0):
            raise ConfigError("lr_generator_final must be positive when lr_generator is")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.adam_eps > 0):
            raise ConfigError("invalid optimizer moment settings")
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.resolutions is not None and self.resolutions < 1:
            raise ConfigError("resolutions must be >= 1")
        if self.hidden_size < 1 or self.mlp_size < 1 or self.disc_hidden_size < 1:
            raise ConfigError("layer sizes must be >= 1")

    @property
    def mask_spec(self) -> MaskSpec:
        return MaskSpec(kind=self.mask_kind, min_missing=self.min_missing,
                        max_missing=self.max_missing, keep_first=self.keep_first,
                        keep_last=self.keep_last, seed=self.seed)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


_BOOL_WORDS = {"true": True, "yes": True, "1": True, "false": False, "no": False, "0": False}


def _coerce(name: str, raw: str):
    types = {f.name: f.type for f in fields(TrainConfig)}
    kind = str(types[name])
    raw = raw.strip()
    try:
        if name == "resolutions":
            return None if raw.lower() in ("", "auto", "none") else int(raw)
        if name == "lr_generator_final":
            return None if raw.lower() in ("", "none") else float(raw)
        if kind == "bool":
            return _BOOL_WORDS[raw.lower()]
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except (KeyError, ValueError):
        raise ConfigError(f"bad value for {name}: {raw!r}") from None
    return raw


def parse_config_text(text: str) -> dict:
    """``key = value`` lines; ``#`` starts a comment."""
    known = {f.name for f in fields(TrainConfig)}
    values = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _coerce(key, raw)
    return values


def load_config(path=None, overrides: dict | None = None) -> TrainConfig:
    values = parse_config_text(Path(path).read_text()) if path else {}
    for key, raw in (overrides or {}).items():
        if key not in {f.name for f in fields(TrainConfig)}:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _coerce(key, raw) if isinstance(raw, str) else raw
    return TrainConfig(**values)


@dataclass
class Dataset:
    """Complete sequences plus per-dimension standardisation."""

    sequences: np.ndarray  # (N, T, D), raw units
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def from_sequences(cls, sequences) -> "Dataset":
        seq = np.asarray(sequences, dtype=np.float64)
        if seq.ndim != 3 or len(seq) == 0:
            raise ValueError("dataset needs a non-empty (N, T, D) array")
        mean = seq.mean(axis=(0, 1))
        scale = seq.std(axis=(0, 1))
        scale = np.where(scale > 0, scale, 1.0)
        return cls(seq, mean, scale)

    @classmethod
    def from_stats(cls, sequences, stats: dict) -> "Dataset":
        return cls(np.asarray(sequences, dtype=np.float64),
                   np.asarray(stats["mean"], dtype=np.float64),
                   np.asarray(stats["scale"], dtype=np.float64))

    def normalize(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.scale

    def denormalize(self, x) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) * self.scale + self.mean

    @property
    def normalized(self) -> np.ndarray:
        return self.normalize(self.sequences)

    @property
    def stats(self) -> dict:
        return {"mean": self.mean.tolist(), "scale": self.scale.tolist()}


class Adam:
    """Adaptive moment estimation.

    Only entries with a nonzero gradient move, and their moments are the
    only ones updated (so untouched parameters stay bit-identical).
    """

    def __init__(self, params: dict, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def zero_grad(self) -> None:
        ad.zero_grad(self.params.values())

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            live = g != 0
            if not live.any():
                continue
            m = np.where(live, b1 * self.m[k] + (1 - b1) * g, self.m[k])
            v = np.where(live, b2 * self.v[k] + (1 - b2) * g * g, self.v[k])
            self.m[k], self.v[k] = m, v
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = np.where(live, p.data - update, p.data)


def clip_gradients(params: dict, max_norm: float) -> float:
    grads = [p.grad for p in params.values() if p.grad is not None]
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if max_norm > 0 and norm > max_norm:
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * (max_norm / norm)
    return norm


def build_model(config: TrainConfig, data_dim: int, resolutions: int, seed: int) -> NaomiModel:
    adversarial = config.objective == "adversarial"
    mc = ModelConfig(data_dim=data_dim, hidden_dim=config.hidden_size, resolutions=resolutions,
                     mlp_dim=config.mlp_size, deterministic=not adversarial,
                     disc_hidden_dim=config.disc_hidden_size, with_discriminator=adversarial)
    return NaomiModel(mc, seed=seed)


@dataclass
class TrainResult:
    model: NaomiModel
    history: list[dict] = field(default_factory=list)


class Trainer:
    """Holds model, optimizers and the single seeded generator for a run.

    ``data`` is already normalized, shape (N, T, D).
    """

    def __init__(self, data, config: TrainConfig, model: NaomiModel | None = None,
                 rng: np.random.Generator | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.config = config
        self.rng = rng if rng is not None else np.random.default_rng(config.seed)
        N, T, D = self.data.shape
        self.T = T
        config.mask_spec.validate(T)
        if model is None:
            R = config.resolutions
            if R is None:
                R = default_resolutions(sample_masks(config.mask_spec, T, 256, self.rng))
            model = build_model(config, D, R, int(self.rng.integers(2 ** 31)))
        self.model = model
        self.gen_params = model.generator_parameters()
        self.disc_params = model.discriminator_parameters()
        self.opt_g = Adam(self.gen_params, config.lr_generator, config.beta1, config.beta2,
                          config.adam_eps)
        self.opt_d = Adam(self.disc_params, config.lr_discriminator, config.beta1, config.beta2,
                          config.adam_eps)
        self.epoch = 0

    @property
    def adversarial(self) -> bool:
        return self.config.objective == "adversarial"

    def sample_mask(self) -> np.ndarray:
        return sample_mask(self.config.mask_spec, self.T, self.rng)

    def batches(self):
        perm = self.rng.permutation(len(self.data))
        bs = self.config.batch_size
        for start in range(0, len(perm), bs):
            yield self.data[perm[start:start + bs]]

    def _eps(self):
        return None if self.model.deterministic else self.rng

    def generator_step(self, batch, mask=None, update: bool = True):
        """One generator update; returns (loss value, imputation)."""
        mask = self.sample_mask() if mask is None else mask
        self.opt_g.zero_grad()
        if not (~mask).any():
            return 0.0, None
        imp = run_imputation(batch, mask, self.model, STANDARD, self._eps())
        if self.adversarial:
            loss, _ = adversarial_losses(batch, imp.steps, self.model.discriminator)
        else:
            loss = mse_loss(imp.steps, batch, mask)
        value = float(loss.data)
        if not math.isfinite(value) or value > DIVERGENCE_LIMIT:
            raise FloatingPointError(f"generator loss diverged ({value})")
        if update:
            ad.backward(loss)
            if self.config.grad_clip > 0:
                clip_gradients(self.gen_params, self.config.grad_clip)
            self.opt_g.step()
        return value, imp

    def discriminator_step(self, batch, fake=None, mask=None) -> float:
        """One discriminator update on real ``batch`` against imputed fakes."""
        if fake is None:
            mask = self.sample_mask() if mask is None else mask
            with ad.no_grad():
                fake = run_imputation(batch, mask, self.model, STANDARD, self._eps()).values
        self.opt_d.zero_grad()
        _, loss = adversarial_losses(batch, np.asarray(fake), self.model.discriminator)
        value = float(loss.data)
        if not math.isfinite(value):
            raise FloatingPointError(f"discriminator loss is {value}")
        ad.backward(loss)
        self.opt_d.step()
        return value

    def generator_lr(self, epoch: int) -> float:
        """Exponential decay from lr_generator to lr_generator_final over the run."""
        cfg = self.config
        if cfg.lr_generator_final is None or cfg.lr_generator == 0 or cfg.epochs < 2:
            return cfg.lr_generator
        frac = min(epoch, cfg.epochs - 1) / (cfg.epochs - 1)
        return cfg.lr_generator * (cfg.lr_generator_final / cfg.lr_generator) ** frac

    def run_epoch(self) -> dict:
        self.opt_g.lr = self.generator_lr(self.epoch)
        self.epoch += 1
        gen_losses, disc_losses = [], []
        for batch in self.batches():
            value, imp = self.generator_step(batch)
            gen_losses.append(value)
            if self.adversarial and imp is not None:
                disc_losses.append(self.discriminator_step(batch, fake=imp.values))
        entry = {"loss": float(np.mean(gen_losses)) if gen_losses else 0.0}
        if self.adversarial:
            entry["disc_loss"] = float(np.mean(disc_losses)) if disc_losses else 0.0
        return entry


def train(dataset: Dataset, config: TrainConfig, model: NaomiModel | None = None,
          progress=None) -> TrainResult:
    """Train on ``dataset`` (normalized internally); deterministic given the seed."""
    trainer = Trainer(dataset.normalized, config, model)
    trainer.model.normalization = dataset.stats
    history: list[dict] = []
    good = trainer.model.state_dict()
    for epoch in range(config.epochs):
        try:
            entry = trainer.run_epoch()
        except FloatingPointError as e:
            raise TrainingDiverged(f"epoch {epoch + 1}: {e}", good, history) from e
        entry["epoch"] = epoch + 1
        history.append(entry)
        good = trainer.model.state_dict()
        log.info("epoch %d: %s", epoch + 1, entry)
        if progress is not None:
            progress(entry)
    return TrainResult(trainer.model, history)


def impute_dataset(model: NaomiModel, sequences, masks, mode: str = STANDARD,
                   rng: np.random.Generator | None = None) -> np.ndarray:
    """Impute raw-unit sequences, each under its own mask.

    Sequences sharing a mask are imputed as one batch.  Observed values
    come back bit-identical.
    """
    seqs = np.asarray(sequences, dtype=np.float64)
    masks = np.asarray(masks).astype(bool)
    stats = model.normalization or {"mean": np.zeros(seqs.shape[-1]),
                                    "scale": np.ones(seqs.shape[-1])}
    ds = Dataset.from_stats(seqs, stats)
    normed = ds.normalize(seqs)
    out = seqs.copy()
    groups: dict[bytes, list[int]] = {}
    for n, m in enumerate(masks):
        groups.setdefault(m.tobytes(), []).append(n)
    eps = None if model.deterministic else (rng if rng is not None else np.random.default_rng(0))
    for idx in groups.values():
        m = masks[idx[0]]
        if m.all():
            continue
        filled = impute(normed[idx], m, model, mode, eps)
        out[np.ix_(idx, ~m)] = ds.denormalize(filled[:, ~m])
    return out
