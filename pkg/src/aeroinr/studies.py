"""Reproducible experiment protocols built on the library.

``sigma``
    Fit one broadband 1-D signal with single-scale and multiscale Fourier
    encodings and compare held-out MSE and the residual energy above the
    signal's top frequency.
``discretization``
    Train end-to-end models on nested node subsets of the synthetic airfoil
    set and evaluate every model at every resolution.

Every study returns plain rows; :func:`write_rows` formats floats with
``repr`` so identical runs give byte-identical CSV files.
"""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Dataset, FeatureStats, FieldSample, fit_field_normalizer, split_dataset
from .encoding import MultiscaleEncoder, identity_scale, sample_freq_matrix
from .geometry import Mesh
from .neuralfield import NeuralField, query_field
from .pipelines import EndToEndModel, TrainConfig, e2e_sample_mse, fit_signal, train_end_to_end
from .synth import Airfoil2DConfig, Broadband1DConfig, broadband_signal, gen_airfoil_2d, gen_broadband_1d

log = logging.getLogger(__name__)


def write_rows(path, rows: Sequence[dict]) -> None:
    """CSV with floats printed via ``repr`` (shortest round-trip form)."""
    if not rows:
        raise ValueError("no rows to write")
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: repr(float(v)) if isinstance(v, (float, np.floating)) else v for k, v in r.items()})
    Path(path).write_text(buf.getvalue())


def _label(sigmas: Sequence[float]) -> str:
    return "+".join(f"{s:g}" for s in sigmas)


# ---------------------------------------------------------------------------
# sigma study
# ---------------------------------------------------------------------------

@dataclass
class SigmaStudyConfig:
    """Single-signal fitting with different encodings.

    All models in one replicate share their frequency matrices: the matrix
    for a given sigma is drawn once (seed ``seed + r + 7919 * i`` for the
    i-th distinct sigma) and reused by every model containing that sigma,
    so the multiscale model differs from the single-scale ones only in how
    the scales are combined.
    """

    sigma_sets: tuple[tuple[float, ...], ...] = ((1.0,), (5.0,), (1.0, 5.0))
    n_freqs: int = 64
    widths: tuple[int, ...] = (128, 128)
    steps: int = 2000
    lr: float = 1e-3
    schedule: str = "cosine"
    replicates: int = 5
    seed: int = 0
    dense_points: int = 4096
    signal: Broadband1DConfig = field(default_factory=Broadband1DConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SigmaStudyConfig":
        d = dict(d)
        sig = Broadband1DConfig(**{k: tuple(v) if isinstance(v, list) else v
                                   for k, v in d.pop("signal", {}).items()})
        if "sigma_sets" in d:
            d["sigma_sets"] = tuple(tuple(float(x) for x in s) for s in d["sigma_sets"])
        if "widths" in d:
            d["widths"] = tuple(d["widths"])
        return cls(**d, signal=sig)


def high_freq_energy(residual: np.ndarray, cutoff: float) -> float:
    """Energy of a uniformly sampled residual on [0, 1) above ``cutoff`` cycles.

    Uses ``|rfft|^2 / N^2`` so the value is independent of the grid size for
    band-limited residuals.
    """
    r = np.asarray(residual, dtype=np.float64).ravel()
    F = np.abs(np.fft.rfft(r)) ** 2 / len(r) ** 2
    k = np.arange(len(F))
    return float(F[k > cutoff].sum())


def _encoders_for(cfg: SigmaStudyConfig, rep_seed: int) -> dict[float, object]:
    distinct: list[float] = []
    for s in cfg.sigma_sets:
        for v in s:
            if v not in distinct:
                distinct.append(v)
    out = {}
    for i, v in enumerate(distinct):
        out[v] = identity_scale(cfg.n_freqs, 1) if v == 0 else \
            sample_freq_matrix(cfg.n_freqs, 1, v, rep_seed + 7919 * i)
    return out


def run_sigma_study(cfg: SigmaStudyConfig) -> tuple[list[dict], dict]:
    """Per-model rows plus a summary comparing the last set against the others.

    The summary uses medians over replicates; the last entry of
    ``sigma_sets`` is the multiscale candidate.
    """
    if len(cfg.sigma_sets) < 2:
        raise ValueError("need at least two sigma sets to compare")
    sample = gen_broadband_1d(cfg.signal).samples[0]
    mask = sample.extras["train_mask"].astype(bool)
    phases = sample.extras["phases"]
    stats = FeatureStats.fit(sample.coords[mask], "x")
    X = stats.normalize(sample.coords)
    u = sample.values
    xd = np.arange(cfg.dense_points, dtype=np.float64)[:, None] / cfg.dense_points
    ud = broadband_signal(xd[:, 0], cfg.signal, phases)
    Xd = stats.normalize(xd)
    cutoff = max(cfg.signal.freqs)
    rows = []
    for r in range(cfg.replicates):
        rep_seed = cfg.seed + r
        fms = _encoders_for(cfg, rep_seed)
        for sigmas in cfg.sigma_sets:
            enc = MultiscaleEncoder(tuple(fms[s] for s in sigmas))
            nf = NeuralField.init(enc, cfg.widths, 1, seed=rep_seed)
            nf, hist = fit_signal(nf, X[mask], u[mask], cfg.steps, cfg.lr, cfg.schedule)
            pred = query_field(nf, X)
            res = pred[~mask, 0] - u[~mask, 0]
            dense_res = query_field(nf, Xd)[:, 0] - ud
            rows.append({
                "replicate": r,
                "sigmas": _label(sigmas),
                "train_mse": float(np.mean((pred[mask, 0] - u[mask, 0]) ** 2)),
                "test_mse": float(np.mean(res ** 2)),
                "hf_energy": high_freq_energy(dense_res, cutoff),
                "final_loss": float(hist[-1]),
            })
            log.info("sigma %s rep %d: test mse %.4g", _label(sigmas), r, rows[-1]["test_mse"])
    return rows, summarize_sigma(rows, cfg.sigma_sets)


def summarize_sigma(rows: Sequence[dict], sigma_sets) -> dict:
    labels = [_label(s) for s in sigma_sets]
    multi, singles = labels[-1], labels[:-1]

    def med(label, key):
        return float(np.median([r[key] for r in rows if r["sigmas"] == label]))

    mse = {l: med(l, "test_mse") for l in labels}
    hf = {l: med(l, "hf_energy") for l in labels}
    widest = max(singles, key=lambda l: max(float(v) for v in l.split("+")))
    per_rep = {}
    for r in sorted({row["replicate"] for row in rows}):
        by = {row["sigmas"]: row for row in rows if row["replicate"] == r}
        per_rep[r] = {
            "mse_ratio": by[multi]["test_mse"] / min(by[l]["test_mse"] for l in singles),
            "hf_ratio": by[widest]["hf_energy"] / by[multi]["hf_energy"],
        }
    return {
        "median_test_mse": mse,
        "median_hf_energy": hf,
        "mse_ratio": mse[multi] / min(mse[l] for l in singles),
        "hf_ratio": hf[widest] / hf[multi],
        "multiscale": multi,
        "widest_single": widest,
        "per_replicate": per_rep,
    }


# ---------------------------------------------------------------------------
# discretization study
# ---------------------------------------------------------------------------

@dataclass
class DiscretizationStudyConfig:
    """Cross-resolution evaluation of end-to-end models.

    Resolutions are node counts or ``"full"``. In ``dynamic`` mode a model
    trained at resolution ``r`` sees ``r`` freshly drawn nodes per sample
    every epoch; in ``static`` mode it only ever sees one fixed subset.
    Evaluation subsets are nested: the first ``r`` entries of one seeded
    permutation of the node set, so every lower resolution is contained in
    every higher one.
    """

    train_resolutions: tuple = (300, 1500, "full")
    eval_resolutions: tuple = (300, 1500, "full")
    widths: tuple[int, ...] = (64, 64, 64)
    n_freqs: int = 32
    sigmas: tuple[float, ...] = (1.0, 5.0)
    hyper_hidden: tuple[int, ...] = (64, 64)
    epochs: int = 300
    batch_size: int = 16
    lr: float = 1e-3
    schedule: str = "cosine"
    mode: str = "dynamic"
    split: tuple[float, float, float] = (0.7, 0.1, 0.2)
    seed: int = 0
    data: Airfoil2DConfig = field(default_factory=Airfoil2DConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DiscretizationStudyConfig":
        d = dict(d)
        dat = Airfoil2DConfig(**{k: tuple(v) if isinstance(v, list) else v
                                 for k, v in d.pop("data", {}).items()})
        for k in ("train_resolutions", "eval_resolutions", "widths", "sigmas", "hyper_hidden", "split"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d, data=dat)


def parse_resolution(r, n_nodes: int) -> int:
    if isinstance(r, str):
        if r.lower() == "full":
            return n_nodes
        r = int(r)
    r = int(r)
    if not 1 <= r <= n_nodes:
        raise ValueError(f"resolution {r} outside [1, {n_nodes}]")
    return r


def restrict(ds: Dataset, idx: np.ndarray) -> Dataset:
    """Same samples on a node subset (meshes shared between samples stay shared)."""
    meshes: dict[int, Mesh] = {}
    out = []
    for s in ds:
        key = id(s.mesh)
        if key not in meshes:
            m = s.mesh
            meshes[key] = Mesh.from_arrays(m.vertices[idx], None, None if m.normals is None else m.normals[idx])
        out.append(FieldSample(s.id, s.shape_id, meshes[key], s.mu, s.values[idx], s.sdf))
    return Dataset(out, ds.field_names, ds.param_names)


def run_discretization_study(cfg: DiscretizationStudyConfig) -> tuple[list[dict], dict]:
    ds = gen_airfoil_2d(cfg.data)
    n_nodes = ds.samples[0].mesh.n_vertices
    train, _val, test = split_dataset(ds, cfg.split, seed=cfg.seed)
    order = np.random.default_rng(cfg.seed + 17).permutation(n_nodes)
    subsets = {}
    for r in (*cfg.train_resolutions, *cfg.eval_resolutions):
        n = parse_resolution(r, n_nodes)
        subsets[str(r)] = np.sort(order[:n])
    rows, models = [], {}
    if cfg.mode not in ("dynamic", "static"):
        raise ValueError(f"unknown mode {cfg.mode!r}")
    for tr in cfg.train_resolutions:
        n_tr = len(subsets[str(tr)])
        tr_ds = train if cfg.mode == "dynamic" else restrict(train, subsets[str(tr)])
        model = EndToEndModel.init(2, ds.d_p, ds.d_u, cfg.widths, cfg.n_freqs, cfg.sigmas, cfg.hyper_hidden,
                                   normalizer=fit_field_normalizer(tr_ds), seed=cfg.seed)
        tcfg = TrainConfig.end_to_end(epochs=cfg.epochs, batch_size=cfg.batch_size, lr=cfg.lr,
                                      train_res=n_tr, seed=cfg.seed, schedule=cfg.schedule)
        model, hist = train_end_to_end(tr_ds, model, tcfg)
        models[str(tr)] = model
        for er in cfg.eval_resolutions:
            idx = subsets[str(er)]
            errs = [e2e_sample_mse(model, s, idx) for s in test]
            rows.append({"train_resolution": str(tr), "eval_resolution": str(er),
                         "n_train_nodes": n_tr, "n_eval_nodes": len(idx),
                         "test_mse": float(np.mean(errs)), "final_train_loss": float(hist["train"][-1])})
            log.info("train %s eval %s: mse %.4g", tr, er, rows[-1]["test_mse"])
    summary = {"shared_points_identical": _shared_points_identical(models, subsets, test, cfg),
               "ratios": {}}
    for tr in cfg.train_resolutions:
        own = next(r["test_mse"] for r in rows if r["train_resolution"] == str(tr) and r["eval_resolution"] == str(tr)) \
            if str(tr) in map(str, cfg.eval_resolutions) else None
        full = next((r["test_mse"] for r in rows if r["train_resolution"] == str(tr)
                     and parse_resolution(r["eval_resolution"], n_nodes) == n_nodes), None)
        if own is not None and full is not None:
            summary["ratios"][str(tr)] = full / own
    return rows, summary


def _shared_points_identical(models, subsets, test, cfg) -> bool:
    """Predictions at low-resolution nodes equal those extracted from a full-set query."""
    n_nodes = test.samples[0].mesh.n_vertices
    full = np.arange(n_nodes)
    for model in models.values():
        for s in test.samples[:4]:
            dense = model.predict(s.mu, s.coords[full])
            for er in cfg.eval_resolutions:
                idx = subsets[str(er)]
                if not np.array_equal(model.predict(s.mu, s.coords[idx]), dense[idx]):
                    return False
    return True
