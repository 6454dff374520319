"""Two-headed MLP encoder producing a mean direction and a concentration per input."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from . import diff as D
from .special import softplus


class DegenerateDirection(ValueError):
    """The mean-direction head produced an all-zero row."""


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int
    trunk_widths: tuple[int, ...] = (256,)
    embed_dim: int = 128
    head_width: int = 64
    dropout: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "trunk_widths", tuple(int(w) for w in self.trunk_widths))
        if self.embed_dim < 2:
            raise ValueError("embed_dim must be >= 2")
        if not self.trunk_widths:
            raise ValueError("trunk_widths must be nonempty")
        if self.input_dim < 1 or self.head_width < 1 or min(self.trunk_widths) < 1:
            raise ValueError("layer widths must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["trunk_widths"] = list(self.trunk_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**{**d, "trunk_widths": tuple(d["trunk_widths"])})


@dataclass(frozen=True)
class ProbEmbedding:
    mu: np.ndarray
    kappa: float


class EmbeddingBatch(NamedTuple):
    """Differentiable encoder output: ``mu`` is ``(n, d)``, ``kappa`` is ``(n,)``."""

    mu: D.Tensor
    kappa: D.Tensor


def layer_shapes(config: EncoderConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Parameter names and shapes in declaration (and checkpoint) order."""
    shapes = []
    fan_in = config.input_dim
    for i, width in enumerate(config.trunk_widths):
        shapes += [(f"trunk.{i}.weight", (fan_in, width)), (f"trunk.{i}.bias", (width,))]
        fan_in = width
    for head, out in (("mu_head", config.embed_dim), ("kappa_head", 1)):
        shapes += [
            (f"{head}.0.weight", (fan_in, config.head_width)),
            (f"{head}.0.bias", (config.head_width,)),
            (f"{head}.1.weight", (config.head_width, out)),
            (f"{head}.1.bias", (out,)),
        ]
    return shapes


def parameter_count(config: EncoderConfig) -> int:
    widths = [config.input_dim, *config.trunk_widths]
    trunk = sum(a * b + b for a, b in zip(widths[:-1], widths[1:]))
    t, h = widths[-1], config.head_width
    return trunk + (t * h + h + h * config.embed_dim + config.embed_dim) + (t * h + h + h + 1)


@dataclass
class Encoder:
    config: EncoderConfig
    params: list[np.ndarray] = field(default_factory=list)

    @property
    def names(self) -> list[str]:
        return [name for name, _ in layer_shapes(self.config)]

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params])

    def set_flat(self, flat: np.ndarray) -> None:
        out, offset = [], 0
        for _, shape in layer_shapes(self.config):
            size = int(np.prod(shape))
            out.append(np.array(flat[offset : offset + size], dtype=np.float64).reshape(shape))
            offset += size
        if offset != flat.size:
            raise D.ShapeError(f"expected {offset} parameters, got {flat.size}")
        self.params = out

    def copy(self) -> "Encoder":
        return Encoder(self.config, [p.copy() for p in self.params])

    def forward(self, x: D.Tensor, params: list[D.Tensor], dropout_rng=None) -> EmbeddingBatch:
        """Tape forward pass; ``params`` are tensors in declaration order.

        Dropout is applied after every trunk activation only when a
        ``dropout_rng`` is supplied and the config enables it.
        """
        n_trunk = len(self.config.trunk_widths)
        h = x
        for i in range(n_trunk):
            h = D.relu(D.add(D.matmul(h, params[2 * i]), params[2 * i + 1]))
            if dropout_rng is not None and self.config.dropout > 0:
                keep = 1.0 - self.config.dropout
                mask = (dropout_rng.uniform(size=h.shape) < keep) / keep
                h = D.mul(h, h.tape.constant(mask))
        base = 2 * n_trunk
        mu_raw = _head(h, params[base : base + 4])
        kappa_raw = _head(h, params[base + 4 : base + 8])
        if np.any(np.all(mu_raw.data == 0.0, axis=1)):
            raise DegenerateDirection("mean-direction head produced a zero row")
        mu = D.l2_normalize_rows(mu_raw)
        kappa = D.softplus(D.sum(kappa_raw, axis=1))
        return EmbeddingBatch(mu, kappa)


def _head(h: D.Tensor, p: list[D.Tensor]) -> D.Tensor:
    hidden = D.relu(D.add(D.matmul(h, p[0]), p[1]))
    return D.add(D.matmul(hidden, p[2]), p[3])


def init(config: EncoderConfig) -> Encoder:
    """Seeded fan-in uniform initialization, ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``."""
    rng = np.random.default_rng(config.seed)
    params = []
    fan_in = None
    for name, shape in layer_shapes(config):
        if name.endswith("weight"):
            fan_in = shape[0]
        bound = 1.0 / np.sqrt(fan_in)
        params.append(rng.uniform(-bound, bound, size=shape))
    return Encoder(config, params)


def _as_matrix(batch, config: EncoderConfig) -> np.ndarray:
    x = np.asarray(batch, dtype=np.float64)
    x = x.reshape(x.shape[0], -1) if x.ndim > 2 else np.atleast_2d(x)
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    if x.shape[1] != config.input_dim:
        raise D.ShapeError(f"encoder expects {config.input_dim} inputs, got {x.shape[1]}")
    return x


def embed(encoder: Encoder, batch, dropout_rng=None, chunk: int = 512):
    """Numpy forward pass returning ``(mu, kappa, trunk_features)`` arrays.

    Same arithmetic as :meth:`Encoder.forward`, without recording a tape.
    """
    x = _as_matrix(batch, encoder.config)
    n_trunk = len(encoder.config.trunk_widths)
    p = encoder.params
    mus, kappas, feats = [], [], []
    for start in range(0, x.shape[0], chunk):
        h = x[start : start + chunk]
        for i in range(n_trunk):
            h = np.maximum(h @ p[2 * i] + p[2 * i + 1], 0.0)
            if dropout_rng is not None and encoder.config.dropout > 0:
                keep = 1.0 - encoder.config.dropout
                h = h * ((dropout_rng.uniform(size=h.shape) < keep) / keep)
        b = 2 * n_trunk
        mu_raw = np.maximum(h @ p[b] + p[b + 1], 0.0) @ p[b + 2] + p[b + 3]
        k_raw = np.maximum(h @ p[b + 4] + p[b + 5], 0.0) @ p[b + 6] + p[b + 7]
        norms = np.linalg.norm(mu_raw, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise DegenerateDirection("mean-direction head produced a zero row")
        mus.append(mu_raw / norms)
        kappas.append(softplus(k_raw[:, 0]))
        feats.append(h)
    return np.concatenate(mus), np.concatenate(kappas), np.concatenate(feats)


def encode(encoder: Encoder, batch) -> list[ProbEmbedding]:
    mu, kappa, _ = embed(encoder, batch)
    return [ProbEmbedding(m, float(k)) for m, k in zip(mu, kappa)]
