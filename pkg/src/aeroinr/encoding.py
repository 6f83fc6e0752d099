"""Gaussian Fourier-feature encodings, single and multi-scale."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

TWO_PI = 2.0 * np.pi


class EncodingError(ValueError):
    pass


@dataclass(frozen=True)
class FreqMatrix:
    """Frequency matrix ``B`` (n x d) drawn i.i.d. from N(0, sigma^2).

    ``identity`` marks a passthrough scale: the raw coordinates are emitted,
    zero-padded to the common width ``2n``. Its ``sigma`` is stored as 0.
    """

    B: np.ndarray
    sigma: float
    seed: int
    identity: bool = False

    @property
    def n(self) -> int:
        return self.B.shape[0]

    @property
    def d(self) -> int:
        return self.B.shape[1]

    @property
    def out_dim(self) -> int:
        return 2 * self.n


def sample_freq_matrix(n: int, d: int, sigma: float, seed: int) -> FreqMatrix:
    if n < 1 or d < 1:
        raise EncodingError(f"need n >= 1 and d >= 1, got n={n}, d={d}")
    if not sigma > 0:
        raise EncodingError(f"sigma must be > 0 (got {sigma}); use identity_scale() for passthrough")
    rng = np.random.default_rng(seed)
    B = rng.normal(0.0, sigma, size=(n, d))
    B.flags.writeable = False
    return FreqMatrix(B, float(sigma), int(seed))


def identity_scale(n: int, d: int) -> FreqMatrix:
    if d > 2 * n:
        raise EncodingError(f"identity scale needs d <= 2n (d={d}, n={n})")
    B = np.zeros((n, d))
    B.flags.writeable = False
    return FreqMatrix(B, 0.0, 0, identity=True)


def encode(x, fm: FreqMatrix) -> np.ndarray:
    """``[sin(2 pi B x), cos(2 pi B x)]`` over the trailing axis of ``x``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != fm.d:
        raise EncodingError(f"point dim {x.shape[-1]} != encoder dim {fm.d}")
    if fm.identity:
        pad = np.zeros(x.shape[:-1] + (fm.out_dim - fm.d,))
        return np.concatenate([x, pad], axis=-1)
    proj = TWO_PI * (x @ fm.B.T)
    return np.concatenate([np.sin(proj), np.cos(proj)], axis=-1)


@dataclass(frozen=True)
class MultiscaleEncoder:
    scales: tuple[FreqMatrix, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if not self.scales:
            raise EncodingError("a multiscale encoder needs at least one scale")
        n, d = self.scales[0].n, self.scales[0].d
        for s in self.scales:
            if (s.n, s.d) != (n, d):
                raise EncodingError("all scales must share (n, d)")

    @classmethod
    def from_sigmas(cls, n: int, d: int, sigmas: Sequence[float], seed: int) -> "MultiscaleEncoder":
        """One scale per sigma; sigma == 0 requests an identity scale."""
        scales = []
        for i, s in enumerate(sigmas):
            if s == 0:
                scales.append(identity_scale(n, d))
            else:
                scales.append(sample_freq_matrix(n, d, s, seed + 7919 * i))
        return cls(tuple(scales))

    @property
    def M(self) -> int:
        return len(self.scales)

    @property
    def n(self) -> int:
        return self.scales[0].n

    @property
    def d(self) -> int:
        return self.scales[0].d

    @property
    def out_dim(self) -> int:
        return 2 * self.n

    @property
    def sigmas(self) -> list[float]:
        return [s.sigma for s in self.scales]


def encoder_state(enc: MultiscaleEncoder) -> tuple[dict, dict[str, np.ndarray]]:
    """Config plus raw B matrices, so a reload does not depend on the RNG."""
    cfg = {"n": enc.n, "d": enc.d, "sigmas": enc.sigmas,
           "seeds": [s.seed for s in enc.scales], "identity": [s.identity for s in enc.scales]}
    return cfg, {f"B{i}": s.B for i, s in enumerate(enc.scales)}


def encoder_from_state(cfg: dict, arrays: dict[str, np.ndarray]) -> MultiscaleEncoder:
    scales = []
    for i, (sig, seed, ident) in enumerate(zip(cfg["sigmas"], cfg["seeds"], cfg["identity"])):
        B = np.array(arrays[f"B{i}"], dtype=np.float64).reshape(cfg["n"], cfg["d"])
        B.flags.writeable = False
        scales.append(FreqMatrix(B, float(sig), int(seed), bool(ident)))
    return MultiscaleEncoder(tuple(scales))


def encode_multiscale(x, enc: MultiscaleEncoder) -> list[np.ndarray]:
    return [encode(x, fm) for fm in enc.scales]
