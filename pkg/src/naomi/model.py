"""Forward/backward GRU encoders, resolution-indexed decoder heads and the
per-step discriminator.  Checkpoints are plain JSON."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

SIGMA_FLOOR = ad.SIGMA_FLOOR


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


class GruCell:
    """h' = (1 - z) * h + z * n with reset-gated candidate n.

    Each gate matrix is (hidden_dim, input_dim + hidden_dim) and acts on
    the concatenation [x, h] (or [x, r * h] for the candidate).
    """

    def __init__(self, input_dim: int, hidden_dim: int, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        fan_in = input_dim + hidden_dim
        shape = (hidden_dim, fan_in)
        self.w_update = _uniform(rng, shape, fan_in)
        self.w_reset = _uniform(rng, shape, fan_in)
        self.w_cand = _uniform(rng, shape, fan_in)
        self.b_update = _uniform(rng, (hidden_dim,), fan_in)
        self.b_reset = _uniform(rng, (hidden_dim,), fan_in)
        self.b_cand = _uniform(rng, (hidden_dim,), fan_in)

    def parameters(self) -> dict[str, Tensor]:
        return {
            "w_update": self.w_update, "w_reset": self.w_reset, "w_cand": self.w_cand,
            "b_update": self.b_update, "b_reset": self.b_reset, "b_cand": self.b_cand,
        }

    def __call__(self, h: Tensor, x: Tensor) -> Tensor:
        if x.shape[-1] != self.input_dim or h.shape[-1] != self.hidden_dim:
            raise ValueError(
                f"gru: expected input dim {self.input_dim} and hidden dim {self.hidden_dim}, "
                f"got {x.shape} and {h.shape}")
        return ad.gru_cell(h, x, self.w_update, self.w_reset, self.w_cand,
                           self.b_update, self.b_reset, self.b_cand)


class Encoder:
    """Forward and backward GRUs over I = [X, M] with learned boundary states."""

    def __init__(self, data_dim: int, hidden_dim: int, rng: np.random.Generator):
        self.data_dim = data_dim
        self.hidden_dim = hidden_dim
        self.forward_cell = GruCell(2 * data_dim, hidden_dim, rng)
        self.backward_cell = GruCell(2 * data_dim, hidden_dim, rng)
        self.h0_forward = _zeros((hidden_dim,))
        self.h0_backward = _zeros((hidden_dim,))

    def parameters(self) -> dict[str, Tensor]:
        params = {f"forward.{k}": v for k, v in self.forward_cell.parameters().items()}
        params.update({f"backward.{k}": v for k, v in self.backward_cell.parameters().items()})
        params["h0_forward"] = self.h0_forward
        params["h0_backward"] = self.h0_backward
        return params

    def initial_forward(self, batch: int) -> Tensor:
        return ad.add(np.zeros((batch, self.hidden_dim)), self.h0_forward)

    def initial_backward(self, batch: int) -> Tensor:
        return ad.add(np.zeros((batch, self.hidden_dim)), self.h0_backward)

    def step_forward(self, h_prev: Tensor, input_t) -> Tensor:
        return self.forward_cell(h_prev, ad.as_tensor(input_t))

    def step_backward(self, h_next: Tensor, input_t) -> Tensor:
        return self.backward_cell(h_next, ad.as_tensor(input_t))


def encode_step_forward(encoder: Encoder, h_prev: Tensor, input_t) -> Tensor:
    return encoder.step_forward(h_prev, input_t)


def encode_step_backward(encoder: Encoder, h_next: Tensor, input_t) -> Tensor:
    return encoder.step_backward(h_next, input_t)


class DecoderHead:
    """Two-layer tanh MLP from [h_f, h_b] to (mu, raw_sigma)."""

    def __init__(self, hidden_dim: int, mlp_dim: int, data_dim: int, rng: np.random.Generator):
        self.data_dim = data_dim
        self.w1 = _uniform(rng, (2 * hidden_dim, mlp_dim), 2 * hidden_dim)
        self.b1 = _uniform(rng, (mlp_dim,), 2 * hidden_dim)
        self.w2 = _uniform(rng, (mlp_dim, 2 * data_dim), mlp_dim)
        self.b2 = _uniform(rng, (2 * data_dim,), mlp_dim)

    def parameters(self) -> dict[str, Tensor]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def __call__(self, h_f: Tensor, h_b: Tensor) -> tuple[Tensor, Tensor]:
        hidden = ad.tanh(ad.add(ad.matmul(ad.concat([h_f, h_b]), self.w1), self.b1))
        out = ad.add(ad.matmul(hidden, self.w2), self.b2)
        d = self.data_dim
        return ad.slice_last(out, 0, d), ad.slice_last(out, d, 2 * d)


class Decoder:
    def __init__(self, resolutions: int, hidden_dim: int, mlp_dim: int, data_dim: int,
                 rng: np.random.Generator, deterministic: bool = True):
        if resolutions < 1:
            raise ValueError(f"resolution count must be >= 1, got {resolutions}")
        self.resolutions = resolutions
        self.deterministic = deterministic
        self.heads = [DecoderHead(hidden_dim, mlp_dim, data_dim, rng) for _ in range(resolutions)]

    def parameters(self) -> dict[str, Tensor]:
        params = {}
        for r, head in enumerate(self.heads, start=1):
            params.update({f"head{r}.{k}": v for k, v in head.parameters().items()})
        return params

    def step_size(self, r: int) -> int:
        return 2 ** (self.resolutions - r)

    def __call__(self, r: int, h_f: Tensor, h_b: Tensor, eps=None) -> Tensor:
        if not 1 <= r <= self.resolutions:
            raise ValueError(f"resolution {r} outside 1..{self.resolutions}")
        mu, raw_sigma = self.heads[r - 1](h_f, h_b)
        if self.deterministic:
            return mu
        if eps is None:
            raise ValueError("stochastic decoder needs eps")
        sigma = ad.add(ad.softplus(raw_sigma), SIGMA_FLOOR)
        return ad.gaussian_sample(mu, sigma, eps)


def decode_head(decoder: Decoder, r: int, h_f: Tensor, h_b: Tensor, eps=None) -> Tensor:
    return decoder(r, h_f, h_b, eps)


class Discriminator:
    """Forward GRU over the sequence with a sigmoid probability per step."""

    def __init__(self, data_dim: int, hidden_dim: int, rng: np.random.Generator):
        self.data_dim = data_dim
        self.hidden_dim = hidden_dim
        self.cell = GruCell(data_dim, hidden_dim, rng)
        self.h0 = _zeros((hidden_dim,))
        self.w_out = _uniform(rng, (hidden_dim, 1), hidden_dim)
        self.b_out = _uniform(rng, (1,), hidden_dim)

    def parameters(self) -> dict[str, Tensor]:
        params = {f"cell.{k}": v for k, v in self.cell.parameters().items()}
        params.update({"h0": self.h0, "w_out": self.w_out, "b_out": self.b_out})
        return params

    def __call__(self, steps) -> list[Tensor]:
        """``steps``: T tensors of shape (B, D).  Returns T tensors of shape (B, 1)."""
        steps = [ad.as_tensor(s) for s in steps]
        for s in steps:
            if not np.all(np.isfinite(s.data)):
                raise ValueError("discriminator: non-finite input")
        batch = steps[0].shape[0]
        h = ad.add(np.zeros((batch, self.hidden_dim)), self.h0)
        probs = []
        for s in steps:
            h = self.cell(h, s)
            probs.append(ad.sigmoid(ad.add(ad.matmul(h, self.w_out), self.b_out)))
        return probs


def discriminate(disc: Discriminator, sequence) -> np.ndarray | list[Tensor]:
    """Per-step probabilities for a single (T, D) array, or tensors for step lists."""
    if isinstance(sequence, np.ndarray) and sequence.ndim == 2:
        if np.isnan(sequence).any():
            raise ValueError("discriminator: NaN input")
        probs = disc([Tensor(row[None, :]) for row in sequence])
        return np.array([p.data[0, 0] for p in probs])
    return disc(sequence)


@dataclass
class ModelConfig:
    data_dim: int
    hidden_dim: int = 64
    resolutions: int = 3
    mlp_dim: int = 64
    deterministic: bool = True
    disc_hidden_dim: int = 64
    with_discriminator: bool = False


class NaomiModel:
    """Generator (encoder + multiresolution decoder) and optional discriminator."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        self.encoder = Encoder(config.data_dim, config.hidden_dim, rng)
        self.decoder = Decoder(config.resolutions, config.hidden_dim, config.mlp_dim,
                               config.data_dim, rng, config.deterministic)
        self.discriminator = (Discriminator(config.data_dim, config.disc_hidden_dim, rng)
                              if config.with_discriminator else None)
        self.normalization: dict | None = None

    @property
    def resolutions(self) -> int:
        return self.config.resolutions

    @property
    def data_dim(self) -> int:
        return self.config.data_dim

    @property
    def deterministic(self) -> bool:
        return self.decoder.deterministic

    @deterministic.setter
    def deterministic(self, value: bool) -> None:
        self.decoder.deterministic = value
        self.config.deterministic = value

    def generator_parameters(self) -> dict[str, Tensor]:
        params = {f"encoder.{k}": v for k, v in self.encoder.parameters().items()}
        params.update({f"decoder.{k}": v for k, v in self.decoder.parameters().items()})
        return params

    def discriminator_parameters(self) -> dict[str, Tensor]:
        if self.discriminator is None:
            return {}
        return {f"discriminator.{k}": v for k, v in self.discriminator.parameters().items()}

    def parameters(self) -> dict[str, Tensor]:
        return {**self.generator_parameters(), **self.discriminator_parameters()}

    # --- checkpoints ------------------------------------------------------

    def state_dict(self) -> dict:
        def pack(params):
            return {name: {"shape": list(p.shape), "data": p.data.ravel().tolist()}
                    for name, p in params.items()}

        state = {
            "hyperparameters": {
                "D": self.config.data_dim,
                "hidden_size": self.config.hidden_dim,
                "R": self.config.resolutions,
                "mlp_size": self.config.mlp_dim,
                "deterministic_mode": self.config.deterministic,
                "disc_hidden_size": self.config.disc_hidden_dim,
            },
            "generator": pack(self.generator_parameters()),
        }
        if self.discriminator is not None:
            state["discriminator"] = pack(self.discriminator_parameters())
        if self.normalization is not None:
            state["normalization"] = self.normalization
        return state

    @classmethod
    def from_state_dict(cls, state: dict) -> "NaomiModel":
        hp = state["hyperparameters"]
        config = ModelConfig(
            data_dim=hp["D"], hidden_dim=hp["hidden_size"], resolutions=hp["R"],
            mlp_dim=hp.get("mlp_size", 64), deterministic=hp["deterministic_mode"],
            disc_hidden_dim=hp.get("disc_hidden_size", 64),
            with_discriminator="discriminator" in state)
        model = cls(config)
        stored = {**state["generator"], **state.get("discriminator", {})}
        params = model.parameters()
        missing = set(params) - set(stored)
        if missing:
            raise ValueError(f"checkpoint lacks parameters: {sorted(missing)}")
        for name, p in params.items():
            entry = stored[name]
            if tuple(entry["shape"]) != p.shape:
                raise ValueError(f"checkpoint shape mismatch for {name}: "
                                 f"{entry['shape']} vs {list(p.shape)}")
            p.data = np.array(entry["data"], dtype=np.float64).reshape(p.shape)
        model.normalization = state.get("normalization")
        return model

    def to_json(self) -> str:
        return json.dumps(self.state_dict())

    @classmethod
    def from_json(cls, text: str) -> "NaomiModel":
        return cls.from_state_dict(json.loads(text))
