"""Training and inference for the two surrogate frameworks.

End-to-end
    A hypernetwork maps the (normalized) flight parameters straight to the
    modulations of a neural field; trained on pointwise squared error with
    the point set re-subsampled at the start of every epoch.

Encode-process-decode
    Two modulated fields are trained with CAVIA: per-sample latent codes start
    at zero and take ``K`` plain gradient steps in an inner loop, and the
    shared weights are updated through that loop. The geometry encoder fits
    signed-distance samples, the field encoder fits surface values. A residual
    MLP then maps ``(z_in, mu)`` to ``z_out``; decoding the predicted code
    gives the field anywhere on the surface.

All losses are computed on standardized features. A sample's loss is the mean
squared error over its points; a batch loss is the sum over its samples.
"""
from __future__ import annotations

import hashlib
import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .data import (DataError, Dataset, FeatureStats, FieldSample, Normalizer, compose_state,
                   decompose_state, fit_field_normalizer, fit_sdf_normalizer, json_tensor,
                   read_container, register_kind, tensor_json, write_container)
from .encoding import MultiscaleEncoder
from .geometry import Mesh, SdfCloud
from .neuralfield import Hypernetwork, NeuralField, ResidualMLP, query_field
from .tensorcore import (AdamState, AutodiffError, NonFiniteError, Tensor, adam_update, concat,
                         const, grad_through_inner_loop, value_and_grad)

log = logging.getLogger(__name__)


class PipelineError(RuntimeError):
    def __init__(self, msg: str, stage: str | None = None, sample_id: str | None = None,
                 epoch: int | None = None):
        self.stage, self.sample_id, self.epoch = stage, sample_id, epoch
        tags = []
        if stage:
            tags.append(stage)
        if epoch is not None:
            tags.append(f"epoch {epoch}")
        if sample_id:
            tags.append(f"sample {sample_id}")
        super().__init__(f"[{', '.join(tags)}] {msg}" if tags else msg)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    """Optimization settings shared by all training loops.

    ``lr`` is the outer learning rate for the field weights, ``lr_hyper`` the
    one for the hypernetwork (``None`` means same as ``lr``). ``train_res`` is
    the number of points drawn per sample each epoch (``None``: all points).
    """

    epochs: int = 5000
    batch_size: int = 16
    lr: float = 2e-5
    lr_hyper: float | None = None
    inner_lr: float = 0.01
    inner_steps: int = 3
    train_res: int | None = 5000
    seed: int = 0
    patience: int | None = None
    first_order: bool = False
    schedule: str = "constant"
    eval_every: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.lr <= 0 or (self.lr_hyper is not None and self.lr_hyper <= 0):
            raise ValueError("learning rates must be positive")
        if self.inner_lr <= 0 or self.inner_steps < 0:
            raise ValueError("inner_lr must be > 0 and inner_steps >= 0")
        if self.train_res is not None and self.train_res < 1:
            raise ValueError("train_res must be positive")
        if self.patience is not None and self.patience < 1:
            raise ValueError("patience must be positive")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown schedule {self.schedule!r}")

    @classmethod
    def end_to_end(cls, **kw) -> "TrainConfig":
        base = dict(epochs=5000, batch_size=16, lr=2e-5, train_res=5000)
        return cls(**{**base, **kw})

    @classmethod
    def encoder(cls, role: str = "output", **kw) -> "TrainConfig":
        base = dict(epochs=7500 if role == "input" else 1000, batch_size=32, lr=3e-5,
                    inner_lr=0.01, inner_steps=3, train_res=5000)
        return cls(**{**base, **kw})

    @classmethod
    def processor(cls, **kw) -> "TrainConfig":
        base = dict(epochs=1000, batch_size=128, lr=5e-6, patience=200, train_res=None)
        return cls(**{**base, **kw})

    def lr_at(self, base: float, epoch: int) -> float:
        if self.schedule == "cosine":
            return base * (0.01 + 0.99 * 0.5 * (1.0 + math.cos(math.pi * epoch / self.epochs)))
        return base


class _Optim:
    """Adam with one learning rate per parameter group."""

    def __init__(self, groups: Sequence[Sequence[np.ndarray]]):
        self.sizes = [len(g) for g in groups]
        self.states = [AdamState.zeros_like(g) for g in groups]

    def step(self, groups, grads, lrs):
        out, k = [], 0
        for i, (g, lr) in enumerate(zip(groups, lrs)):
            n = self.sizes[i]
            new, self.states[i] = adam_update(g, grads[k:k + n], self.states[i], lr)
            out.append(new)
            k += n
        return out


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


# ---------------------------------------------------------------------------
# point subsampling
# ---------------------------------------------------------------------------

def subsample_indices(n_total: int, n_points: int, rng: np.random.Generator) -> np.ndarray:
    """Sorted uniform draw of ``n_points`` distinct indices from ``range(n_total)``."""
    if n_points > n_total:
        raise PipelineError(f"cannot draw {n_points} points from {n_total}")
    if n_points < 1:
        raise PipelineError("n_points must be positive")
    return np.sort(rng.permutation(n_total)[:n_points])


def dynamic_subsample(sample: FieldSample, n_points: int, rng: np.random.Generator) -> FieldSample:
    """Random point subset of a sample with coordinates, normals and values aligned."""
    if n_points > sample.mesh.n_vertices:
        raise PipelineError(f"requested {n_points} points but sample has {sample.mesh.n_vertices}",
                            sample_id=sample.id)
    idx = subsample_indices(sample.mesh.n_vertices, n_points, rng)
    m = sample.mesh
    sub = Mesh.from_arrays(m.vertices[idx], None, None if m.normals is None else m.normals[idx])
    return FieldSample(sample.id, sample.shape_id, sub, sample.mu, sample.values[idx], sample.sdf,
                       {"indices": idx})


# ---------------------------------------------------------------------------
# regression targets
# ---------------------------------------------------------------------------

@dataclass
class Target:
    """Standardized inputs ``X`` (N, d) and outputs ``U`` (N, d_u) of one fit."""

    id: str
    X: np.ndarray
    U: np.ndarray
    cond: np.ndarray | None = None


def field_features(normalizer: Normalizer, coords, normals=None, use_normals: bool = False) -> np.ndarray:
    Xn = normalizer.normalize("coords", coords)
    if use_normals:
        if normals is None:
            raise PipelineError("this model needs surface normals")
        Xn = np.concatenate([Xn, normalizer.normalize("normals", normals)], axis=-1)
    return Xn


def field_target(sample: FieldSample, normalizer: Normalizer, use_normals: bool = False,
                 with_mu: bool = False) -> Target:
    X = field_features(normalizer, sample.coords, sample.mesh.normals, use_normals)
    U = normalizer.normalize("fields", sample.values)
    cond = normalizer.normalize("mu", sample.mu) if with_mu else None
    return Target(sample.id, X, U, cond)


def sdf_target(cloud: SdfCloud, normalizer: Normalizer) -> Target:
    return Target(cloud.shape_id, normalizer.normalize("points", cloud.points),
                  normalizer.normalize("sdf", cloud.sdf[:, None]))


def _draw(targets: Sequence[Target], res: int | None, rng) -> tuple[list[np.ndarray], list[np.ndarray]]:
    Xs, Us = [], []
    for t in targets:
        if res is None or res >= len(t.X):
            Xs.append(t.X)
            Us.append(t.U)
        else:
            idx = subsample_indices(len(t.X), res, rng)
            Xs.append(t.X[idx])
            Us.append(t.U[idx])
    return Xs, Us


def _groups(Xs: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Indices of equal-length point sets, so each group can be stacked."""
    sizes = np.array([len(x) for x in Xs])
    return [np.flatnonzero(sizes == s) for s in np.unique(sizes)]


def _field_sq_loss(nf: NeuralField, fp: dict[str, Tensor], enc: list[np.ndarray], U: np.ndarray,
                   phis) -> Tensor:
    d = nf.apply(fp, enc, phis) - U
    return d.sum_sq().scale(1.0 / (U.shape[-2] * U.shape[-1]))


def _modulated_loss(nf: NeuralField, hyper: Hypernetwork, Xs, Us,
                    cond_fn: Callable[[np.ndarray], Tensor]):
    """Build ``loss(*theta, *psi)`` summing per-sample MSE over the batch."""
    groups = _groups(Xs)
    encoded = [(g, nf.encode(np.stack([Xs[i] for i in g])), np.stack([Us[i] for i in g])) for g in groups]
    n_theta = len(nf.params)

    def loss(*ts):
        fp = nf.tensors(ts[:n_theta])
        hp = hyper.tensors(ts[n_theta:])
        total = None
        for g, enc, U in encoded:
            phis = hyper.apply(hp, cond_fn(g))
            part = _field_sq_loss(nf, fp, enc, U, phis)
            total = part if total is None else total + part
        return total

    return loss


# ---------------------------------------------------------------------------
# single-signal fitting
# ---------------------------------------------------------------------------

def fit_signal(nf: NeuralField, X, u, steps: int = 2000, lr: float = 1e-3,
               schedule: str = "cosine") -> tuple[NeuralField, list[float]]:
    """Full-batch Adam fit of an unmodulated field to one signal."""
    X = np.asarray(X, dtype=np.float64)
    U = np.asarray(u, dtype=np.float64).reshape(len(X), -1)
    enc = nf.encode(X)
    cfg = TrainConfig(epochs=steps, lr=lr, schedule=schedule, train_res=None)

    def f(*ts):
        return _field_sq_loss(nf, nf.tensors(ts), enc, U, None)

    params = nf.param_list()
    state = AdamState.zeros_like(params)
    history = []
    for i in range(steps):
        val, grads = value_and_grad(f, params)
        if not math.isfinite(val):
            raise PipelineError("non-finite loss", stage="fit", epoch=i)
        params, state = adam_update(params, grads, state, cfg.lr_at(lr, i))
        history.append(val)
    return nf.with_params(params), history


# ---------------------------------------------------------------------------
# end-to-end framework
# ---------------------------------------------------------------------------

@register_kind
@dataclass(frozen=True)
class EndToEndModel:
    field: NeuralField
    hyper: Hypernetwork
    normalizer: Normalizer | None = None
    use_normals: bool = False

    def __post_init__(self):
        if self.hyper.out_widths != self.field.widths:
            raise PipelineError("hypernetwork output widths must match field hidden widths")

    @classmethod
    def init(cls, d_x: int, d_mu: int, d_u: int = 1, widths: Sequence[int] = (128,) * 4,
             n_freqs: int = 64, sigmas: Sequence[float] = (1.0, 5.0),
             hyper_hidden: Sequence[int] = (128, 128), use_normals: bool = False,
             normalizer: Normalizer | None = None, seed: int = 0) -> "EndToEndModel":
        d_in = d_x * (2 if use_normals else 1)
        enc = MultiscaleEncoder.from_sigmas(n_freqs, d_in, sigmas, seed)
        nf = NeuralField.init(enc, widths, d_u, seed=seed + 1)
        hyper = Hypernetwork.init(d_mu, nf.widths, hyper_hidden, seed=seed + 2)
        return cls(nf, hyper, normalizer, use_normals)

    @property
    def d_mu(self) -> int:
        return self.hyper.d_in

    def predict(self, mu, coords, normals=None, normalized: bool = False) -> np.ndarray:
        """Field at ``coords`` for parameters ``mu`` (physical units unless ``normalized``)."""
        if self.normalizer is None:
            raise PipelineError("model has no normalizer; train it first", stage="predict")
        mu_n = self.normalizer.normalize("mu", mu)
        phi = self.hyper.apply(self.hyper.const_tensors(), const(np.atleast_2d(mu_n)))
        X = field_features(self.normalizer, coords, normals, self.use_normals)
        out = query_field(self.field, X, [p.data.reshape(-1) for p in phi])
        return out if normalized else self.normalizer.denormalize("fields", out)

    def state(self):
        return compose_state({"field": self.field, "hyper": self.hyper, "normalizer": self.normalizer},
                             use_normals=self.use_normals)

    @classmethod
    def from_state(cls, cfg, arrays) -> "EndToEndModel":
        p = decompose_state(cfg, arrays)
        return cls(p["field"], p["hyper"], p.get("normalizer"), bool(cfg["use_normals"]))


def e2e_sample_mse(model: EndToEndModel, sample: FieldSample, indices=None) -> float:
    """Normalized-unit MSE of one sample, optionally on a node subset."""
    coords, vals = sample.coords, sample.values
    normals = sample.mesh.normals
    if indices is not None:
        coords, vals = coords[indices], vals[indices]
        normals = None if normals is None else normals[indices]
    pred = model.predict(sample.mu, coords, normals, normalized=True)
    d = pred - model.normalizer.normalize("fields", vals)
    return float(np.mean(d * d))


def train_end_to_end(train: Dataset, model: EndToEndModel, cfg: TrainConfig,
                     val: Dataset | None = None,
                     callback: Callable[[int, float], None] | None = None
                     ) -> tuple[EndToEndModel, dict[str, list]]:
    """Fit field and hypernetwork jointly on all training samples."""
    if len(train) == 0:
        raise PipelineError("empty training set", stage="train-e2e")
    if train.d_p != model.d_mu:
        raise PipelineError(f"dataset has {train.d_p} parameters, hypernetwork expects {model.d_mu}",
                            stage="train-e2e")
    if model.normalizer is None:
        model = replace(model, normalizer=fit_field_normalizer(train, with_normals=model.use_normals))
    norm = model.normalizer
    targets = [field_target(s, norm, model.use_normals, with_mu=True) for s in train]
    conds = np.stack([t.cond for t in targets])
    rng = np.random.default_rng(cfg.seed)
    theta, psi = model.field.param_list(), model.hyper.param_list()
    opt = _Optim([theta, psi])
    lr_h = cfg.lr_hyper or cfg.lr
    history: dict[str, list] = {"epoch": [], "train": [], "val": []}
    eval_every = cfg.eval_every or max(1, cfg.epochs // 50)
    for epoch in range(cfg.epochs):
        total = 0.0
        for b in _batches(len(targets), cfg.batch_size, rng):
            batch = [targets[i] for i in b]
            Xs, Us = _draw(batch, cfg.train_res, rng)
            loss = _modulated_loss(model.field, model.hyper, Xs, Us,
                                   lambda g, c=conds[b]: const(c[g]))
            try:
                val_b, grads = value_and_grad(loss, theta + psi)
            except NonFiniteError as exc:
                raise PipelineError(f"non-finite value ({exc})", "train-e2e",
                                    ",".join(t.id for t in batch), epoch) from exc
            if not math.isfinite(val_b):
                raise PipelineError("non-finite loss", "train-e2e", ",".join(t.id for t in batch), epoch)
            theta, psi = opt.step([theta, psi], grads, [cfg.lr_at(cfg.lr, epoch), cfg.lr_at(lr_h, epoch)])
            total += val_b
        model = replace(model, field=model.field.with_params(theta), hyper=model.hyper.with_params(psi))
        mean_loss = total / len(targets)
        if callback:
            callback(epoch, mean_loss)
        if epoch % eval_every == 0 or epoch == cfg.epochs - 1:
            history["epoch"].append(epoch)
            history["train"].append(mean_loss)
            if val is not None and len(val):
                history["val"].append(float(np.mean([e2e_sample_mse(model, s) for s in val])))
            log.info("e2e epoch %d loss %.6g", epoch, mean_loss)
    return model, history


# ---------------------------------------------------------------------------
# CAVIA encoders
# ---------------------------------------------------------------------------

@register_kind
@dataclass(frozen=True)
class EncoderModel:
    """Modulated field whose modulations come from a per-sample latent code."""

    field: NeuralField
    hyper: Hypernetwork
    role: str = "output"
    inner_steps: int = 3
    inner_lr: float = 0.01
    normalizer: Normalizer | None = None
    use_normals: bool = True

    def __post_init__(self):
        if self.role not in ("input", "output"):
            raise PipelineError(f"role must be 'input' or 'output', got {self.role!r}")
        if self.inner_steps < 1 or not self.inner_lr > 0:
            raise PipelineError("need inner_steps >= 1 and inner_lr > 0")
        if self.hyper.out_widths != self.field.widths:
            raise PipelineError("hypernetwork output widths must match field hidden widths")

    @classmethod
    def init(cls, role: str, d_z: int | None = None, widths: Sequence[int] | None = None,
             sigmas: Sequence[float] | None = None, n_freqs: int = 64, d_x: int = 3,
             hyper_hidden: Sequence[int] = (), inner_steps: int = 3, inner_lr: float = 0.01,
             use_normals: bool = True, seed: int = 0) -> "EncoderModel":
        """Geometry (``input``) or field (``output``) encoder with role defaults."""
        if role == "input":
            d_z = d_z or 64
            widths = widths or (128,) * 5
            sigmas = sigmas or (1.0,)
            d_in = d_x
            use_normals = False
        else:
            d_z = d_z or 128
            widths = widths or (256,) * 5
            sigmas = sigmas or (1.0, 5.0)
            d_in = d_x * (2 if use_normals else 1)
        enc = MultiscaleEncoder.from_sigmas(n_freqs, d_in, sigmas, seed)
        nf = NeuralField.init(enc, widths, 1, seed=seed + 1)
        hyper = Hypernetwork.init(d_z, nf.widths, hyper_hidden, seed=seed + 2)
        return cls(nf, hyper, role, inner_steps, inner_lr, None, use_normals)

    @property
    def d_z(self) -> int:
        return self.hyper.d_in

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(repr((self.role, self.inner_steps, self.inner_lr, self.field.widths,
                       self.field.encoder.sigmas, self.hyper.dims)).encode())
        for p in (self.field, self.hyper):
            for k, v in p.params.items():
                h.update(k.encode())
                h.update(np.ascontiguousarray(v).tobytes())
        for s in self.field.encoder.scales:
            h.update(s.B.tobytes())
        if self.normalizer is not None:
            for k, st in self.normalizer.stats.items():
                h.update(k.encode() + st.mean.tobytes() + st.std.tobytes())
        return h.hexdigest()[:16]

    def fit_normalizer(self, data) -> "EncoderModel":
        if self.role == "input":
            norm = fit_sdf_normalizer(data)
        else:
            norm = fit_field_normalizer(data, with_normals=self.use_normals)
        return replace(self, normalizer=norm)

    def target(self, item) -> Target:
        if self.normalizer is None:
            raise PipelineError("encoder has no normalizer; train it first")
        if self.role == "input":
            if not isinstance(item, SdfCloud):
                raise PipelineError("geometry encoder expects an SdfCloud")
            return sdf_target(item, self.normalizer)
        return field_target(item, self.normalizer, self.use_normals)

    def decode(self, z, X) -> np.ndarray:
        """Standardized field values at standardized inputs ``X`` for code ``z``."""
        z = np.asarray(z, dtype=np.float64).reshape(1, self.d_z)
        phi = self.hyper.apply(self.hyper.const_tensors(), const(z))
        return query_field(self.field, X, [p.data.reshape(-1) for p in phi])

    def state(self):
        return compose_state({"field": self.field, "hyper": self.hyper, "normalizer": self.normalizer},
                             role=self.role, inner_steps=self.inner_steps, inner_lr=self.inner_lr,
                             use_normals=self.use_normals)

    @classmethod
    def from_state(cls, cfg, arrays) -> "EncoderModel":
        p = decompose_state(cfg, arrays)
        return cls(p["field"], p["hyper"], cfg["role"], int(cfg["inner_steps"]),
                   float(cfg["inner_lr"]), p.get("normalizer"), bool(cfg["use_normals"]))


@dataclass
class EncoderOptState:
    optim: _Optim
    epoch: int = 0


def _latent_loss(enc: EncoderModel, Xs, Us):
    """``loss(*theta, *psi, z)`` with ``z`` of shape (B, d_z), summed over samples."""
    groups = _groups(Xs)
    encoded = [(g, enc.field.encode(np.stack([Xs[i] for i in g])), np.stack([Us[i] for i in g]))
               for g in groups]
    n_theta = len(enc.field.params)
    single = len(groups) == 1

    def loss(*ts):
        fp = enc.field.tensors(ts[:n_theta])
        hp = enc.hyper.tensors(ts[n_theta:-1])
        z = ts[-1]
        total = None
        for g, e, U in encoded:
            zg = z if single else concat_rows(z, g)
            part = _field_sq_loss(enc.field, fp, e, U, enc.hyper.apply(hp, zg))
            total = part if total is None else total + part
        return total

    return loss


def concat_rows(z: Tensor, rows: np.ndarray) -> Tensor:
    return concat([z.slice(0, int(r), int(r) + 1) for r in rows], axis=0)


def cavia_fit_epoch(enc: EncoderModel, batch: Sequence[Target], cfg: TrainConfig,
                    opt: EncoderOptState | None = None, rng: np.random.Generator | None = None,
                    epoch: int = 0) -> tuple[EncoderModel, float, EncoderOptState]:
    """One outer update on ``batch``: z from 0, K inner steps, then Adam on (theta, psi).

    Returns the updated encoder, the batch loss (sum of per-sample losses after
    adaptation) and the optimizer state. The adapted codes are discarded.
    """
    if not batch:
        raise PipelineError("empty batch", stage=f"encoder-{enc.role}")
    rng = rng or np.random.default_rng(cfg.seed)
    theta, psi = enc.field.param_list(), enc.hyper.param_list()
    opt = opt or EncoderOptState(_Optim([theta, psi]))
    Xs, Us = _draw(batch, cfg.train_res, rng)
    loss = _latent_loss(enc, Xs, Us)
    z0 = np.zeros((len(batch), enc.d_z))
    try:
        val, grads, _ = grad_through_inner_loop(loss, enc.inner_steps, enc.inner_lr, theta + psi, z0,
                                                first_order=cfg.first_order)
    except (NonFiniteError, AutodiffError) as exc:
        bad = _first_bad_sample(enc, Xs, Us, batch)
        raise PipelineError(f"non-finite inner-loop value ({exc})", f"encoder-{enc.role}", bad, epoch) from exc
    if not math.isfinite(val):
        raise PipelineError("non-finite loss", f"encoder-{enc.role}", _first_bad_sample(enc, Xs, Us, batch), epoch)
    lr_h = cfg.lr_hyper or cfg.lr
    theta, psi = opt.optim.step([theta, psi], grads, [cfg.lr_at(cfg.lr, epoch), cfg.lr_at(lr_h, epoch)])
    enc = replace(enc, field=enc.field.with_params(theta), hyper=enc.hyper.with_params(psi))
    return enc, val, opt


def _first_bad_sample(enc, Xs, Us, batch) -> str | None:
    params = enc.field.param_list() + enc.hyper.param_list()
    for i, t in enumerate(batch):
        try:
            v, _, _ = grad_through_inner_loop(_latent_loss(enc, [Xs[i]], [Us[i]]), enc.inner_steps,
                                              enc.inner_lr, params, np.zeros((1, enc.d_z)), True)
            if not math.isfinite(v):
                return t.id
        except AutodiffError:
            return t.id
    return None


def train_encoder(items, enc: EncoderModel, cfg: TrainConfig,
                  callback: Callable[[int, float], None] | None = None
                  ) -> tuple[EncoderModel, dict[str, list]]:
    """CAVIA training over all items (SdfClouds for ``input``, a Dataset for ``output``)."""
    items = list(items)
    if not items:
        raise PipelineError("nothing to train on", stage=f"encoder-{enc.role}")
    if enc.normalizer is None:
        enc = enc.fit_normalizer(items if enc.role == "input" else Dataset(items, [], []))
    targets = [enc.target(it) for it in items]
    rng = np.random.default_rng(cfg.seed)
    opt = None
    history: dict[str, list] = {"epoch": [], "train": []}
    eval_every = cfg.eval_every or max(1, cfg.epochs // 50)
    for epoch in range(cfg.epochs):
        total = 0.0
        for b in _batches(len(targets), cfg.batch_size, rng):
            enc, val, opt = cavia_fit_epoch(enc, [targets[i] for i in b], cfg, opt, rng, epoch)
            total += val
        mean_loss = total / len(targets)
        if callback:
            callback(epoch, mean_loss)
        if epoch % eval_every == 0 or epoch == cfg.epochs - 1:
            history["epoch"].append(epoch)
            history["train"].append(mean_loss)
            log.info("encoder-%s epoch %d loss %.6g", enc.role, epoch, mean_loss)
    return enc, history


def infer_latent_trace(enc: EncoderModel, target: Target, steps: int | None = None,
                       lr: float | None = None) -> tuple[np.ndarray, list[float]]:
    """Codes from ``steps`` gradient steps at frozen weights, with the loss before each step
    and after the last one."""
    steps = enc.inner_steps if steps is None else steps
    lr = enc.inner_lr if lr is None else lr
    fp = enc.field.const_tensors()
    hp = enc.hyper.const_tensors()
    e = enc.field.encode(target.X[None])
    U = target.U[None]

    def f(zt):
        return _field_sq_loss(enc.field, fp, e, U, enc.hyper.apply(hp, zt))

    z = np.zeros((1, enc.d_z))
    losses = []
    for _ in range(steps):
        try:
            val, (g,) = value_and_grad(f, [z])
        except NonFiniteError as exc:
            raise PipelineError(f"non-finite inner gradient ({exc})", "encode", target.id) from exc
        losses.append(val)
        z = z - lr * g
    losses.append(float(f(const(z)).data))
    return z[0], losses


def infer_latent(enc: EncoderModel, item, steps: int | None = None) -> np.ndarray:
    """Latent code of a sample (or SdfCloud) with frozen encoder weights.

    ``steps`` overrides the encoder's inner step count; 0 gives the zero
    (mean-shape) code.
    """
    target = item if isinstance(item, Target) else enc.target(item)
    z, _ = infer_latent_trace(enc, target, steps)
    return z


# ---------------------------------------------------------------------------
# latent dataset and processor
# ---------------------------------------------------------------------------

@dataclass
class LatentDataset:
    ids: list[str]
    shape_ids: list[str]
    z_in: np.ndarray
    mu: np.ndarray
    z_out: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, ids: Sequence[str]) -> "LatentDataset":
        pos = {i: k for k, i in enumerate(self.ids)}
        idx = np.array([pos[i] for i in ids], dtype=np.int64)
        return LatentDataset([self.ids[k] for k in idx], [self.shape_ids[k] for k in idx],
                             self.z_in[idx], self.mu[idx], self.z_out[idx])

    def save(self, path) -> None:
        write_container(path, {"ids": json_tensor({"ids": self.ids, "shape_ids": self.shape_ids}),
                               "z_in": self.z_in, "mu": self.mu, "z_out": self.z_out})

    @classmethod
    def load(cls, path) -> "LatentDataset":
        t = read_container(path)
        meta = tensor_json(t["ids"])
        n = len(meta["ids"])
        return cls(meta["ids"], meta["shape_ids"], t["z_in"].reshape(n, -1), t["mu"].reshape(n, -1),
                   t["z_out"].reshape(n, -1))


class GeometryLatentCache:
    """Geometry codes keyed by shape id and the encoder's fingerprint.

    A different encoder (new weights) never sees another encoder's entries.
    """

    def __init__(self):
        self._store: dict[tuple[str, str], np.ndarray] = {}
        self.hits = 0
        self.misses = 0

    def get(self, enc: EncoderModel, cloud: SdfCloud) -> np.ndarray:
        key = (cloud.shape_id, enc.fingerprint())
        if key in self._store:
            self.hits += 1
            return self._store[key].copy()
        self.misses += 1
        z = infer_latent(enc, cloud)
        self._store[key] = z.copy()
        return z

    def invalidate(self, shape_id: str | None = None) -> None:
        if shape_id is None:
            self._store.clear()
        else:
            self._store = {k: v for k, v in self._store.items() if k[0] != shape_id}

    def __len__(self) -> int:
        return len(self._store)

    def save(self, path) -> None:
        keys = sorted(self._store)
        tensors = {"keys": json_tensor([list(k) for k in keys])}
        tensors.update({f"z{i}": self._store[k] for i, k in enumerate(keys)})
        write_container(path, tensors)

    @classmethod
    def load(cls, path) -> "GeometryLatentCache":
        t = read_container(path)
        cache = cls()
        for i, k in enumerate(tensor_json(t["keys"])):
            cache._store[tuple(k)] = t[f"z{i}"]
        return cache


def encode_dataset(enc_in: EncoderModel, enc_out: EncoderModel, dataset: Dataset,
                   cache: GeometryLatentCache | None = None) -> LatentDataset:
    """``(z_in, mu) -> z_out`` pairs; one geometry code per shape, fresh field codes."""
    cache = cache if cache is not None else GeometryLatentCache()
    z_in, z_out = [], []
    for s in dataset:
        if s.sdf is None:
            raise PipelineError(f"no SDF cloud for shape {s.shape_id!r}", stage="encode", sample_id=s.id)
        z_in.append(cache.get(enc_in, s.sdf))
        z_out.append(infer_latent(enc_out, s))
    return LatentDataset([s.id for s in dataset], [s.shape_id for s in dataset],
                         np.array(z_in).reshape(len(dataset), enc_in.d_z),
                         np.array([s.mu for s in dataset]).reshape(len(dataset), -1),
                         np.array(z_out).reshape(len(dataset), enc_out.d_z))


@register_kind
@dataclass(frozen=True)
class Processor:
    """Residual SiLU MLP on standardized ``[z_in, mu]`` predicting ``z_out``."""

    mlp: ResidualMLP
    d_latent_in: int
    in_stats: FeatureStats | None = None
    out_stats: FeatureStats | None = None

    @classmethod
    def init(cls, d_in: int, d_mu: int, d_out: int, hidden: Sequence[int] = (128, 128, 128),
             seed: int = 0) -> "Processor":
        mlp = ResidualMLP.init((d_in + d_mu, *hidden, d_out), "silu", seed=seed)
        return cls(mlp, d_in)

    @property
    def d_mu(self) -> int:
        return self.mlp.dims[0] - self.d_latent_in

    def _inputs(self, z_in, mu) -> np.ndarray:
        x = np.concatenate([np.atleast_2d(z_in), np.atleast_2d(mu)], axis=-1)
        if x.shape[-1] != self.mlp.dims[0]:
            raise PipelineError(f"processor expects {self.mlp.dims[0]} inputs, got {x.shape[-1]}",
                                stage="process")
        return x

    def __call__(self, z_in, mu) -> np.ndarray:
        if self.in_stats is None:
            raise PipelineError("processor is untrained", stage="process")
        single = np.ndim(z_in) == 1
        y = self.mlp(self.in_stats.normalize(self._inputs(z_in, mu)))
        out = self.out_stats.denormalize(y)
        return out[0] if single else out

    def state(self):
        return compose_state({"mlp": self.mlp, "in_stats": self.in_stats, "out_stats": self.out_stats},
                             d_latent_in=self.d_latent_in)

    @classmethod
    def from_state(cls, cfg, arrays) -> "Processor":
        p = decompose_state(cfg, arrays)
        return cls(p["mlp"], int(cfg["d_latent_in"]), p.get("in_stats"), p.get("out_stats"))


def train_processor(train: LatentDataset, proc: Processor, cfg: TrainConfig,
                    val: LatentDataset | None = None) -> tuple[Processor, dict[str, list]]:
    """MSE regression in standardized latent space with early stopping.

    The returned processor carries the parameters of the best epoch (validation
    loss if ``val`` is given, otherwise training loss).
    """
    if len(train) == 0:
        raise PipelineError("empty latent training set", stage="train-processor")
    X = proc._inputs(train.z_in, train.mu)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # constant inputs such as a fixed Reynolds number
        in_stats = proc.in_stats or FeatureStats.fit(X, "processor inputs")
        out_stats = proc.out_stats or FeatureStats.fit(train.z_out, "processor outputs")
    proc = replace(proc, in_stats=in_stats, out_stats=out_stats)
    Xn, Yn = in_stats.normalize(X), out_stats.normalize(train.z_out)
    if val is not None and len(val):
        Xv = in_stats.normalize(proc._inputs(val.z_in, val.mu))
        Yv = out_stats.normalize(val.z_out)
    else:
        Xv = Yv = None
    mlp = proc.mlp
    params = mlp.param_list()
    state = AdamState.zeros_like(params)
    rng = np.random.default_rng(cfg.seed)
    best = (math.inf, params, -1)
    history: dict[str, list] = {"epoch": [], "train": [], "val": []}
    for epoch in range(cfg.epochs):
        total = 0.0
        for b in _batches(len(Xn), cfg.batch_size, rng):
            xb, yb = Xn[b], Yn[b]

            def f(*ts, xb=xb, yb=yb):
                d = mlp.apply(mlp.tensors(ts), const(xb)) - yb
                return d.sum_sq().scale(1.0 / yb.size)

            v, g = value_and_grad(f, params)
            if not math.isfinite(v):
                raise PipelineError("non-finite loss", "train-processor", epoch=epoch)
            params, state = adam_update(params, g, state, cfg.lr_at(cfg.lr, epoch))
            total += v * len(b)
        cur = mlp.with_params(params)
        train_loss = total / len(Xn)
        if Xv is not None:
            d = cur(Xv) - Yv
            score = float(np.mean(d * d))
        else:
            d = cur(Xn) - Yn
            score = float(np.mean(d * d))
        history["epoch"].append(epoch)
        history["train"].append(train_loss)
        history["val"].append(score)
        if score < best[0]:
            best = (score, params, epoch)
        elif cfg.patience is not None and epoch - best[2] > cfg.patience:
            log.info("early stop at epoch %d (best %d)", epoch, best[2])
            break
    history["best_epoch"] = [best[2]]
    return replace(proc, mlp=mlp.with_params(best[1])), history


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

def predict(enc_in: EncoderModel, proc: Processor, enc_out: EncoderModel, geometry, mu,
            X_query, normals=None, cache: GeometryLatentCache | None = None,
            normalized: bool = False) -> np.ndarray:
    """Field at ``X_query`` for a shape (SdfCloud or precomputed code) and parameters ``mu``."""
    try:
        if isinstance(geometry, SdfCloud):
            z_in = cache.get(enc_in, geometry) if cache is not None else infer_latent(enc_in, geometry)
        else:
            z_in = np.asarray(geometry, dtype=np.float64)
            if z_in.shape != (enc_in.d_z,):
                raise PipelineError(f"geometry code must have shape ({enc_in.d_z},)")
    except (PipelineError, DataError, AutodiffError, ValueError) as exc:
        raise PipelineError(str(exc), stage="encode") from exc
    try:
        z_out = proc(z_in, np.asarray(mu, dtype=np.float64))
    except (PipelineError, ValueError) as exc:
        raise PipelineError(str(exc), stage="process") from exc
    try:
        X = field_features(enc_out.normalizer, X_query, normals, enc_out.use_normals)
        out = enc_out.decode(z_out, X)
        return out if normalized else enc_out.normalizer.denormalize("fields", out)
    except (PipelineError, ValueError) as exc:
        raise PipelineError(str(exc), stage="decode") from exc


@register_kind
@dataclass(frozen=True)
class EncodeProcessDecode:
    enc_in: EncoderModel
    enc_out: EncoderModel
    proc: Processor
    cache: GeometryLatentCache = field(default_factory=GeometryLatentCache, compare=False, repr=False)

    def predict(self, geometry, mu, X_query, normals=None, normalized: bool = False) -> np.ndarray:
        return predict(self.enc_in, self.proc, self.enc_out, geometry, mu, X_query, normals,
                       self.cache, normalized)

    def sample_mse(self, sample: FieldSample) -> float:
        pred = self.predict(sample.sdf, sample.mu, sample.coords, sample.mesh.normals, normalized=True)
        d = pred - self.enc_out.normalizer.normalize("fields", sample.values)
        return float(np.mean(d * d))

    def state(self):
        return compose_state({"enc_in": self.enc_in, "enc_out": self.enc_out, "proc": self.proc})

    @classmethod
    def from_state(cls, cfg, arrays) -> "EncodeProcessDecode":
        p = decompose_state(cfg, arrays)
        return cls(p["enc_in"], p["enc_out"], p["proc"])
