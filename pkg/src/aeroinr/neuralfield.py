"""Shift-modulated multiscale neural fields, hypernetworks and residual MLPs.

Training paths build :class:`~aeroinr.tensorcore.Tensor` graphs through the
``apply`` methods; inference (:func:`query_field`) goes through the
row-independent kernels in :mod:`aeroinr.kernels`, so values at a point never
depend on which other points are queried alongside it.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import kernels
from .encoding import MultiscaleEncoder, encode_multiscale, encoder_from_state, encoder_state
from .tensorcore import Tensor, concat, const


class WidthError(ValueError):
    pass


def _uniform(rng, fan_in: int, shape, gain: float = 1.0) -> np.ndarray:
    bound = gain * np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class _HasParams:
    params: dict[str, np.ndarray]

    def param_names(self) -> list[str]:
        return list(self.params)

    def param_list(self) -> list[np.ndarray]:
        return list(self.params.values())

    def with_params(self, arrays: Sequence[np.ndarray]):
        if len(arrays) != len(self.params):
            raise WidthError("parameter count mismatch")
        new = {}
        for (k, old), a in zip(self.params.items(), arrays):
            a = np.asarray(a, dtype=np.float64)
            if a.shape != old.shape:
                raise WidthError(f"{k}: shape {a.shape} != {old.shape}")
            new[k] = a
        return dataclasses.replace(self, params=new)

    def tensors(self, ts: Sequence[Tensor]) -> dict[str, Tensor]:
        return dict(zip(self.params, ts))

    def const_tensors(self) -> dict[str, Tensor]:
        return {k: const(v) for k, v in self.params.items()}

    @property
    def n_params(self) -> int:
        return int(sum(a.size for a in self.params.values()))

    def _config(self) -> dict:
        raise NotImplementedError

    def state(self) -> tuple[dict, dict[str, np.ndarray]]:
        return self._config(), {f"p.{k}": v for k, v in self.params.items()}

    @staticmethod
    def _params_from(arrays) -> dict[str, np.ndarray]:
        return {k[2:]: np.asarray(v, dtype=np.float64) for k, v in arrays.items() if k.startswith("p.")}


@dataclass(frozen=True)
class NeuralField(_HasParams):
    """Multiscale Fourier-feature MLP with shared hidden layers.

    Every hidden layer is modulated: ``relu(W_l h + b_l + phi_l)``. The M
    per-scale outputs of the last hidden layer are concatenated and mapped
    by ``W_out`` ((M*h) x d_u) plus ``b_out``.
    """

    encoder: MultiscaleEncoder
    widths: tuple[int, ...]
    d_u: int
    params: dict[str, np.ndarray]

    @classmethod
    def init(cls, encoder: MultiscaleEncoder, widths: Sequence[int], d_u: int = 1,
             seed: int = 0) -> "NeuralField":
        widths = tuple(int(w) for w in widths)
        if not widths or d_u < 1:
            raise WidthError("need at least one hidden layer and d_u >= 1")
        rng = np.random.default_rng(seed)
        params: dict[str, np.ndarray] = {}
        fan = encoder.out_dim
        for l, w in enumerate(widths):
            params[f"W{l}"] = _uniform(rng, fan, (fan, w))
            params[f"b{l}"] = np.zeros(w)
            fan = w
        fan_out = encoder.M * widths[-1]
        params["W_out"] = _uniform(rng, fan_out, (fan_out, d_u), gain=0.1)
        params["b_out"] = np.zeros(d_u)
        return cls(encoder, widths, int(d_u), params)

    @property
    def L(self) -> int:
        return len(self.widths)

    @property
    def d(self) -> int:
        return self.encoder.d

    def encode(self, x) -> list[np.ndarray]:
        return encode_multiscale(x, self.encoder)

    def apply(self, p: dict[str, Tensor], enc_inputs: Sequence[np.ndarray],
              phis: Sequence[Tensor] | None = None) -> Tensor:
        """Differentiable forward on pre-encoded inputs.

        ``enc_inputs`` holds one (..., P, 2n) array per scale; each ``phis[l]``
        must broadcast against (..., P, h_l), e.g. shape (B, 1, h_l).
        """
        if len(enc_inputs) != self.encoder.M:
            raise WidthError(f"expected {self.encoder.M} encoded scales, got {len(enc_inputs)}")
        if phis is not None and len(phis) != self.L:
            raise WidthError(f"expected {self.L} modulation vectors, got {len(phis)}")
        outs = []
        for e in enc_inputs:
            h = const(e)
            for l in range(self.L):
                a = h @ p[f"W{l}"] + p[f"b{l}"]
                if phis is not None:
                    a = a + phis[l]
                h = a.relu()
            outs.append(h)
        H = outs[0] if len(outs) == 1 else concat(outs, axis=-1)
        return H @ p["W_out"] + p["b_out"]

    def _config(self) -> dict:
        cfg, _ = encoder_state(self.encoder)
        return {"widths": list(self.widths), "d_u": self.d_u, "encoder": cfg,
                "order": list(self.params)}

    def state(self):
        cfg, arrays = super().state()
        _, enc_arrays = encoder_state(self.encoder)
        arrays.update({f"enc.{k}": v for k, v in enc_arrays.items()})
        return cfg, arrays

    @classmethod
    def from_state(cls, cfg, arrays) -> "NeuralField":
        enc = encoder_from_state(cfg["encoder"], {k[4:]: v for k, v in arrays.items() if k.startswith("enc.")})
        p = cls._params_from(arrays)
        return cls(enc, tuple(cfg["widths"]), int(cfg["d_u"]), {k: p[k] for k in cfg["order"]})

    def kernel_args(self):
        B = np.stack([s.B for s in self.encoder.scales])
        ident = np.array([s.identity for s in self.encoder.scales], dtype=np.uint8)
        Ws = [self.params[f"W{l}"] for l in range(self.L)]
        bs = [self.params[f"b{l}"] for l in range(self.L)]
        return B, ident, Ws, bs


@dataclass(frozen=True)
class Hypernetwork(_HasParams):
    """MLP mapping a conditioning vector to per-layer shift modulations.

    ``dims`` lists ``[d_in, *hidden]``; a final linear layer emits
    ``sum(out_widths)`` values that are split into one vector per layer.
    """

    dims: tuple[int, ...]
    out_widths: tuple[int, ...]
    activation: str
    params: dict[str, np.ndarray]

    @classmethod
    def init(cls, d_in: int, out_widths: Sequence[int], hidden: Sequence[int] = (),
             activation: str = "relu", seed: int = 0) -> "Hypernetwork":
        if activation not in ("relu", "silu"):
            raise ValueError(f"unknown activation {activation!r}")
        dims = (int(d_in), *[int(h) for h in hidden])
        out_widths = tuple(int(w) for w in out_widths)
        rng = np.random.default_rng(seed)
        params = {}
        for i in range(len(dims) - 1):
            params[f"W{i}"] = _uniform(rng, dims[i], (dims[i], dims[i + 1]))
            params[f"b{i}"] = np.zeros(dims[i + 1])
        params["W_out"] = _uniform(rng, dims[-1], (dims[-1], sum(out_widths)), gain=0.5)
        params["b_out"] = np.zeros(sum(out_widths))
        return cls(dims, out_widths, activation, params)

    @property
    def d_in(self) -> int:
        return self.dims[0]

    def _config(self) -> dict:
        return {"dims": list(self.dims), "out_widths": list(self.out_widths),
                "activation": self.activation, "order": list(self.params)}

    @classmethod
    def from_state(cls, cfg, arrays) -> "Hypernetwork":
        p = cls._params_from(arrays)
        return cls(tuple(cfg["dims"]), tuple(cfg["out_widths"]), cfg["activation"],
                   {k: p[k] for k in cfg["order"]})

    def apply(self, p: dict[str, Tensor], cond: Tensor) -> list[Tensor]:
        """Modulations for a (B, d_in) batch, each of shape (B, 1, h_l)."""
        if cond.shape[-1] != self.d_in:
            raise WidthError(f"conditioning dim {cond.shape[-1]} != hypernetwork input {self.d_in}")
        h = cond
        for i in range(len(self.dims) - 1):
            h = h @ p[f"W{i}"] + p[f"b{i}"]
            h = h.relu() if self.activation == "relu" else h.silu()
        out = h @ p["W_out"] + p["b_out"]
        phis, start = [], 0
        for w in self.out_widths:
            part = out.slice(-1, start, start + w)
            phis.append(part.reshape(part.shape[0], 1, w))
            start += w
        return phis


def modulations(h: Hypernetwork, conditioning) -> list[np.ndarray]:
    """Per-layer modulation vectors for one conditioning vector."""
    c = np.asarray(conditioning, dtype=np.float64)
    if c.ndim != 1 or c.shape[0] != h.d_in:
        raise WidthError(f"conditioning shape {c.shape} does not match input dim {h.d_in}")
    phis = h.apply(h.const_tensors(), const(c[None, :]))
    return [p.data.reshape(-1) for p in phis]


def query_field(nf: NeuralField, X, phi: Sequence[np.ndarray] | None = None) -> np.ndarray:
    """Field values at every row of ``X`` (N x d); returns (N, d_u)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise WidthError("X must be a 2-D point array")
    if X.shape[0] == 0:
        return np.zeros((0, nf.d_u))
    if X.shape[1] != nf.d:
        raise WidthError(f"point dim {X.shape[1]} != field input dim {nf.d}")
    if phi is None:
        phi_arr = np.zeros((nf.L, max(nf.widths)))
    else:
        if len(phi) != nf.L or any(np.shape(p) != (w,) for p, w in zip(phi, nf.widths)):
            raise WidthError("modulation widths do not match hidden widths")
        phi_arr = np.zeros((nf.L, max(nf.widths)))
        for l, p in enumerate(phi):
            phi_arr[l, : len(p)] = p
    B, ident, Ws, bs = nf.kernel_args()
    return kernels.field_forward(X, B, ident, Ws, bs, phi_arr,
                                 nf.params["W_out"], nf.params["b_out"])


def forward(nf: NeuralField, x, phi: Sequence[np.ndarray] | None = None) -> np.ndarray:
    """Field value at a single point; shape (d_u,)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise WidthError("forward takes a single point; use query_field for sets")
    return query_field(nf, x[None, :], phi)[0]


@dataclass(frozen=True)
class ResidualMLP(_HasParams):
    """``[in, w, ..., w, out]`` MLP with residual hidden blocks.

    The first layer maps ``in -> w`` with an activation, each middle layer is
    a residual block ``h + act(W h + b)``, the last layer is linear.
    """

    dims: tuple[int, ...]
    activation: str
    params: dict[str, np.ndarray]

    @classmethod
    def init(cls, dims: Sequence[int], activation: str = "relu", seed: int = 0,
             out_gain: float = 1.0) -> "ResidualMLP":
        dims = tuple(int(d) for d in dims)
        if len(dims) < 2:
            raise WidthError("need at least input and output dims")
        if activation not in ("relu", "silu"):
            raise ValueError(f"unknown activation {activation!r}")
        for w in dims[2:-1]:
            if w != dims[1]:
                raise WidthError("residual blocks need equal hidden widths")
        rng = np.random.default_rng(seed)
        params = {}
        for i in range(len(dims) - 1):
            gain = out_gain if i == len(dims) - 2 else 1.0
            if 0 < i < len(dims) - 2:
                gain = 0.5  # keeps residual sums from growing with depth
            params[f"W{i}"] = _uniform(rng, dims[i], (dims[i], dims[i + 1]), gain=gain)
            params[f"b{i}"] = np.zeros(dims[i + 1])
        return cls(dims, activation, params)

    @property
    def d_in(self) -> int:
        return self.dims[0]

    def _config(self) -> dict:
        return {"dims": list(self.dims), "activation": self.activation, "order": list(self.params)}

    @classmethod
    def from_state(cls, cfg, arrays) -> "ResidualMLP":
        p = cls._params_from(arrays)
        return cls(tuple(cfg["dims"]), cfg["activation"], {k: p[k] for k in cfg["order"]})

    def _act(self, t: Tensor) -> Tensor:
        return t.relu() if self.activation == "relu" else t.silu()

    def apply(self, p: dict[str, Tensor], x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise WidthError(f"input dim {x.shape[-1]} != {self.d_in}")
        n = len(self.dims) - 1
        if n == 1:
            return x @ p["W0"] + p["b0"]
        h = self._act(x @ p["W0"] + p["b0"])
        for i in range(1, n - 1):
            h = h + self._act(h @ p[f"W{i}"] + p[f"b{i}"])
        return h @ p[f"W{n - 1}"] + p[f"b{n - 1}"]

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return self.apply(self.const_tensors(), const(x)).data


def vanilla_forward(mlp: ResidualMLP, x) -> np.ndarray:
    """Unencoded, unmodulated baseline on concatenated coordinates and parameters."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != mlp.d_in:
        raise WidthError(f"input dim {x.shape[-1]} != {mlp.d_in}")
    return mlp(x)
