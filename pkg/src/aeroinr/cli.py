"""Command-line interface.

Every command writes a ``run_record.json`` (command, fully resolved config,
seed, per-stage wall-clock timings, metrics) next to its main output, or to
``--record``. Relative data paths are resolved against ``$AEROINR_DATA_ROOT``
when that variable is set.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import platform
import sys
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .data import (DataError, Dataset, load_checkpoint, load_dataset, load_manifest, save_checkpoint,
                   save_sdf, split_dataset, write_dataset, fit_field_normalizer, Normalizer)
from .geometry import GeometryError, load_obj, normalize_to_unit_sphere, sample_sdf_cloud, vertex_normals
from .neuralfield import WidthError
from .pipelines import (EncodeProcessDecode, EncoderModel, EndToEndModel, GeometryLatentCache, LatentDataset,
                        PipelineError, Processor, TrainConfig, encode_dataset, train_encoder,
                        train_end_to_end, train_processor)
from .podgpr import GprError, PodError, PodGprModel, fit_pod_gpr, pod_gpr_predict
from .studies import (DiscretizationStudyConfig, SigmaStudyConfig, run_discretization_study,
                      run_sigma_study, write_rows)
from .synth import (Airfoil2DConfig, Broadband1DConfig, SynthError, Wing3DConfig, gen_airfoil_2d,
                    gen_broadband_1d, gen_wing_3d)
from .tensorcore import AutodiffError

log = logging.getLogger("aeroinr")

DATA_ROOT_ENV = "AEROINR_DATA_ROOT"


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# run record
# ---------------------------------------------------------------------------

@dataclass
class RunRecord:
    command: str
    config: dict
    seed: int
    timings: dict[str, float] = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    outputs: list[str] = field(default_factory=list)

    @contextmanager
    def stage(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.timings[name] = self.timings.get(name, 0.0) + time.perf_counter() - t0

    def to_json(self) -> dict:
        return {"command": self.command, "config": self.config, "seed": self.seed,
                "timings_s": self.timings, "metrics": self.metrics, "outputs": self.outputs,
                "environment": {"aeroinr": __version__, "python": platform.python_version(),
                                "numpy": np.__version__}}

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_json(), indent=2, default=_jsonable) + "\n")


def _jsonable(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


# ---------------------------------------------------------------------------
# argument helpers
# ---------------------------------------------------------------------------

def _floats(s: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in s.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {s!r}")


def _ints(s: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in s.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {s!r}")


def _resolutions(s: str) -> tuple:
    out = []
    for v in s.split(","):
        v = v.strip()
        if v.lower() == "full":
            out.append("full")
        else:
            try:
                out.append(int(v))
            except ValueError:
                raise argparse.ArgumentTypeError(f"resolution must be an integer or 'full', got {v!r}")
    return tuple(out)


def data_path(p) -> Path:
    p = Path(p)
    root = os.environ.get(DATA_ROOT_ENV)
    if root and not p.is_absolute() and not p.exists():
        return Path(root) / p
    return p


def _add_common(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("run options")
    g.add_argument("--seed", type=int, default=0, help="seed for every stochastic stage")
    g.add_argument("--threads", type=int, default=None, help="BLAS/OpenMP thread limit")
    g.add_argument("--config", type=Path, default=None, help="JSON file of option values")
    g.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    g.add_argument("--record", type=Path, default=None, help="where to write run_record.json")
    g.add_argument("-v", "--verbose", action="count", default=0)


_RUN_KEYS = {"seed", "threads", "config", "print_config", "record", "verbose", "func", "cmd", "sub"}


def _split_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--split", type=Path, default=None, help="split JSON from 'data split'")
    p.add_argument("--fractions", type=_floats, default=(0.7, 0.1, 0.2))
    p.add_argument("--split-mode", choices=["by-sample", "by-shape"], default="by-sample")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="aeroinr", description=__doc__.split("\n")[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="cmd", required=True)

    # synth
    sp = sub.add_parser("synth", help="generate synthetic datasets")
    ssub = sp.add_subparsers(dest="sub", required=True)
    p = ssub.add_parser("broadband1d")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--freqs", type=_floats, default=Broadband1DConfig.freqs)
    p.add_argument("--amps", type=_floats, default=Broadband1DConfig().amps)
    p.add_argument("--n-points", type=int, default=1024)
    p.add_argument("--train-fraction", type=float, default=0.25)
    _add_common(p)
    p.set_defaults(func=cmd_synth_broadband)
    p = ssub.add_parser("airfoil2d")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--n-nodes", type=int, default=3000)
    p.add_argument("--n-samples", type=int, default=120)
    p.add_argument("--shock-width", type=float, default=0.02)
    _add_common(p)
    p.set_defaults(func=cmd_synth_airfoil)
    p = ssub.add_parser("wing3d")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--n-shapes", type=int, default=12)
    p.add_argument("--n-conditions", type=int, default=16)
    p.add_argument("--sdf-points", type=int, default=60000)
    p.add_argument("--mesh-format", choices=["nfsb", "obj"], default="nfsb")
    _add_common(p)
    p.set_defaults(func=cmd_synth_wing)

    # data
    sp = sub.add_parser("data", help="validate manifests and make splits")
    dsub = sp.add_subparsers(dest="sub", required=True)
    p = dsub.add_parser("check")
    p.add_argument("manifest", type=Path)
    _add_common(p)
    p.set_defaults(func=cmd_data_check)
    p = dsub.add_parser("split")
    p.add_argument("manifest", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--fractions", type=_floats, default=(0.7, 0.1, 0.2))
    p.add_argument("--mode", choices=["by-sample", "by-shape"], default="by-sample")
    _add_common(p)
    p.set_defaults(func=cmd_data_split)

    # sdf
    sp = sub.add_parser("sdf", help="signed-distance sampling")
    fsub = sp.add_subparsers(dest="sub", required=True)
    p = fsub.add_parser("prepare")
    p.add_argument("meshes", type=Path, nargs="+", help="OBJ or container meshes")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--n-total", type=int, default=60000)
    p.add_argument("--uniform-fraction", type=float, default=0.10)
    p.add_argument("--sigmas", type=_floats, default=(0.005, 0.0005))
    _add_common(p)
    p.set_defaults(func=cmd_sdf_prepare)

    # train
    sp = sub.add_parser("train", help="train models")
    tsub = sp.add_subparsers(dest="sub", required=True)
    p = tsub.add_parser("e2e", help="end-to-end model")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--epochs", type=int, default=5000)
    p.add_argument("--lr", type=float, default=2e-5)
    p.add_argument("--lr-hyper", type=float, default=None)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--sigmas", type=_floats, default=(1.0, 5.0))
    p.add_argument("--freqs", type=int, default=64)
    p.add_argument("--widths", type=_ints, default=(128, 128, 128, 128))
    p.add_argument("--hyper-hidden", type=_ints, default=(128, 128))
    p.add_argument("--train-res", type=int, default=5000)
    p.add_argument("--normals", action="store_true", help="feed surface normals as extra inputs")
    p.add_argument("--schedule", choices=["constant", "cosine"], default="constant")
    _split_args(p)
    _add_common(p)
    p.set_defaults(func=cmd_train_e2e)
    p = tsub.add_parser("encoder", help="CAVIA encoder")
    p.add_argument("--role", choices=["input", "output"], required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--epochs", type=int, default=None, help="default 7500 (input) / 1000 (output)")
    p.add_argument("--lr", type=float, default=3e-5)
    p.add_argument("--lr-hyper", type=float, default=None)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--inner-steps", type=int, default=3)
    p.add_argument("--inner-lr", type=float, default=0.01)
    p.add_argument("--latent-dim", type=int, default=None, help="default 64 (input) / 128 (output)")
    p.add_argument("--widths", type=_ints, default=None, help="default 128x5 (input) / 256x5 (output)")
    p.add_argument("--sigmas", type=_floats, default=None, help="default 1 (input) / 1,5 (output)")
    p.add_argument("--freqs", type=int, default=64)
    p.add_argument("--hyper-hidden", type=_ints, default=())
    p.add_argument("--train-res", type=int, default=5000)
    p.add_argument("--first-order", action="store_true")
    p.add_argument("--no-normals", action="store_true", help="output role: coordinates only")
    p.add_argument("--schedule", choices=["constant", "cosine"], default="constant")
    _split_args(p)
    _add_common(p)
    p.set_defaults(func=cmd_train_encoder)
    p = tsub.add_parser("processor", help="latent processor")
    p.add_argument("--latents", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--epochs", type=int, default=1000)
    p.add_argument("--lr", type=float, default=5e-6)
    p.add_argument("--batch", type=int, default=128)
    p.add_argument("--patience", type=int, default=200)
    p.add_argument("--hidden", type=_ints, default=(128, 128, 128))
    p.add_argument("--schedule", choices=["constant", "cosine"], default="constant")
    _split_args(p)
    _add_common(p)
    p.set_defaults(func=cmd_train_processor)

    # encode
    sp = sub.add_parser("encode", help="latent codes")
    esub = sp.add_subparsers(dest="sub", required=True)
    p = esub.add_parser("latents")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--encoder-in", type=Path, required=True)
    p.add_argument("--encoder-out", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    _add_common(p)
    p.set_defaults(func=cmd_encode_latents)

    # predict / eval
    p = sub.add_parser("predict", help="field values at query points")
    _model_args(p)
    p.add_argument("--mu", type=_floats, required=True)
    p.add_argument("--data", type=Path, default=None, help="manifest providing --sample")
    p.add_argument("--sample", default=None, help="sample id whose mesh is queried")
    p.add_argument("--shape", type=Path, default=None, help="mesh file of a (possibly unseen) shape")
    p.add_argument("--resolution", type=int, default=None, help="query this many seeded random nodes")
    p.add_argument("--latent-cache", type=Path, default=None, help="persistent geometry-code cache")
    p.add_argument("--sdf-points", type=int, default=60000)
    p.add_argument("--out", type=Path, required=True, help="CSV of coordinates and values")
    _add_common(p)
    p.set_defaults(func=cmd_predict)
    p = sub.add_parser("eval", help="per-sample and aggregate MSE")
    _model_args(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--subset", choices=["train", "val", "test", "all"], default="test")
    p.add_argument("--resolution", type=int, default=None)
    p.add_argument("--physical-units", action="store_true")
    p.add_argument("--out-dir", type=Path, required=True)
    _split_args(p)
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    # podgpr
    sp = sub.add_parser("podgpr", help="POD + Gaussian-process baseline")
    psub = sp.add_subparsers(dest="sub", required=True)
    p = psub.add_parser("fit")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--rank", type=int, default=50)
    p.add_argument("--restarts", type=int, default=5)
    p.add_argument("--noise", type=float, default=None, help="fixed noise variance (default: fitted)")
    _split_args(p)
    _add_common(p)
    p.set_defaults(func=cmd_podgpr_fit)
    p = psub.add_parser("predict")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--mu", type=_floats, required=True)
    p.add_argument("--variance", action="store_true")
    p.add_argument("--out", type=Path, required=True)
    _add_common(p)
    p.set_defaults(func=cmd_podgpr_predict)

    # studies
    sp = sub.add_parser("study", help="experiment protocols")
    stsub = sp.add_subparsers(dest="sub", required=True)
    p = stsub.add_parser("discretization")
    d = DiscretizationStudyConfig()
    p.add_argument("--resolutions", type=_resolutions, default=d.train_resolutions,
                   help="training resolutions, e.g. 500,5000,full")
    p.add_argument("--eval-resolutions", type=_resolutions, default=None,
                   help="evaluation resolutions (default: same as --resolutions)")
    p.add_argument("--epochs", type=int, default=d.epochs)
    p.add_argument("--lr", type=float, default=d.lr)
    p.add_argument("--batch", type=int, default=d.batch_size)
    p.add_argument("--widths", type=_ints, default=d.widths)
    p.add_argument("--hyper-hidden", type=_ints, default=d.hyper_hidden)
    p.add_argument("--freqs", type=int, default=d.n_freqs)
    p.add_argument("--sigmas", type=_floats, default=d.sigmas)
    p.add_argument("--mode", choices=["dynamic", "static"], default=d.mode)
    p.add_argument("--n-nodes", type=int, default=d.data.n_nodes)
    p.add_argument("--n-samples", type=int, default=d.data.n_samples)
    p.add_argument("--out-dir", type=Path, required=True)
    _add_common(p)
    p.set_defaults(func=cmd_study_discretization)
    p = stsub.add_parser("sigma")
    s = SigmaStudyConfig()
    p.add_argument("--steps", type=int, default=s.steps)
    p.add_argument("--lr", type=float, default=s.lr)
    p.add_argument("--widths", type=_ints, default=s.widths)
    p.add_argument("--freqs", type=int, default=s.n_freqs)
    p.add_argument("--replicates", type=int, default=s.replicates)
    p.add_argument("--sigma-sets", default="1;5;1,5", help="';'-separated sigma lists, multiscale last")
    p.add_argument("--out-dir", type=Path, required=True)
    _add_common(p)
    p.set_defaults(func=cmd_study_sigma)
    return ap


def _model_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model (either --model or the three encode-process-decode parts)")
    g.add_argument("--model", type=Path, default=None, help="end-to-end or POD+GPR checkpoint")
    g.add_argument("--encoder-in", type=Path, default=None)
    g.add_argument("--processor", type=Path, default=None)
    g.add_argument("--encoder-out", type=Path, default=None)


# ---------------------------------------------------------------------------
# config resolution
# ---------------------------------------------------------------------------

def _explicit_dests(parser: argparse.ArgumentParser, argv: list[str], ns) -> set[str]:
    """Destinations of options that appear literally on the command line."""
    tokens = {a.split("=", 1)[0] for a in argv if a.startswith("-")}
    found = set()

    def walk(p):
        for act in p._actions:
            if isinstance(act, argparse._SubParsersAction):
                for sp in act.choices.values():
                    walk(sp)
            elif any(o in tokens for o in act.option_strings):
                found.add(act.dest)
    walk(parser)
    return found


def resolve_config(parser, argv: list[str], ns) -> dict:
    """Merge ``--config`` JSON into the parsed options.

    Config values replace defaults; a key that is also given explicitly on
    the command line with a different value is a usage error.
    """
    cfg = {k: v for k, v in vars(ns).items() if k not in _RUN_KEYS}
    if ns.config is None:
        return cfg
    try:
        file_cfg = json.loads(Path(ns.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read --config {ns.config}: {exc}")
    if not isinstance(file_cfg, dict):
        raise UsageError("--config must hold a JSON object")
    file_cfg = {k.replace("-", "_"): v for k, v in file_cfg.items()}
    if "seed" in file_cfg:
        if "seed" in _explicit_dests(parser, argv, ns) and file_cfg["seed"] != ns.seed:
            raise UsageError(f"conflicting flags: --seed={ns.seed} vs config seed={file_cfg['seed']}")
        ns.seed = int(file_cfg.pop("seed"))
    for k in ("threads",):
        if k in file_cfg:
            setattr(ns, k, file_cfg.pop(k))
    unknown = sorted(set(file_cfg) - set(cfg))
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    explicit = _explicit_dests(parser, argv, ns)
    conflicts = []
    for k, v in file_cfg.items():
        cur = cfg[k]
        v = _coerce(v, cur)
        if k in explicit and v != cur:
            conflicts.append(f"--{k.replace('_', '-')}={_show(cur)} vs config {k}={_show(v)}")
        cfg[k] = v
        setattr(ns, k, v)
    if conflicts:
        raise UsageError("conflicting flags: " + "; ".join(conflicts))
    return cfg


def _coerce(v, like):
    if isinstance(like, tuple) and isinstance(v, list):
        return tuple(v)
    if isinstance(like, Path) and isinstance(v, str):
        return Path(v)
    return v


def _show(v):
    return ",".join(map(str, v)) if isinstance(v, tuple) else v


def _check_conflicts(ns) -> None:
    """Mutually exclusive flag combinations, reported together."""
    bad = []
    if hasattr(ns, "model") and hasattr(ns, "encoder_in"):
        epd = [n for n in ("encoder_in", "processor", "encoder_out") if getattr(ns, n) is not None]
        if ns.model is not None and epd:
            bad.append("--model with " + ", ".join("--" + n.replace("_", "-") for n in epd))
        elif ns.model is None and len(epd) != 3:
            missing = [n for n in ("encoder_in", "processor", "encoder_out") if getattr(ns, n) is None]
            if epd:
                bad.append("encode-process-decode needs all of --encoder-in, --processor, --encoder-out; missing "
                           + ", ".join("--" + n.replace("_", "-") for n in missing))
            else:
                bad.append("no model: give --model or --encoder-in/--processor/--encoder-out")
    if getattr(ns, "sample", None) is not None and getattr(ns, "shape", None) is not None:
        bad.append("--sample with --shape")
    if getattr(ns, "sample", None) is not None and getattr(ns, "data", None) is None:
        bad.append("--sample without --data")
    if getattr(ns, "split", None) is not None and getattr(ns, "fractions", (0.7, 0.1, 0.2)) != (0.7, 0.1, 0.2):
        bad.append("--split with --fractions")
    if getattr(ns, "cmd", None) == "train" and getattr(ns, "sub", None) == "encoder":
        if ns.role == "input" and ns.no_normals:
            bad.append("--no-normals with --role input")
    if bad:
        raise UsageError("conflicting flags: " + "; ".join(bad))


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------

def _load_ds(path) -> Dataset:
    return load_dataset(data_path(path))


def _splits(ns, ds: Dataset) -> tuple[Dataset, Dataset, Dataset]:
    if ns.split is not None:
        info = json.loads(data_path(ns.split).read_text())
        known = {s.id for s in ds}
        for part in ("train", "val", "test"):
            missing = [i for i in info[part] if i not in known]
            if missing:
                raise DataError(f"split file refers to unknown samples {missing[:5]}")
        return ds.subset(info["train"]), ds.subset(info["val"]), ds.subset(info["test"])
    return split_dataset(ds, ns.fractions, seed=ns.seed, mode=ns.split_mode)


def _record_path(ns, default_dir: Path | None) -> Path:
    if ns.record is not None:
        return ns.record
    return (default_dir or Path(".")) / "run_record.json"


def _out_dir(p: Path) -> Path:
    return p if p.suffix == "" else p.parent


def _write_csv(path: Path, header: list[str], rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


def _save(path: Path, components: dict, meta: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(path, components, meta)


def _mu(ns, d_mu: int) -> np.ndarray:
    mu = np.asarray(ns.mu, dtype=np.float64)
    if len(mu) != d_mu:
        raise UsageError(f"--mu has {len(mu)} values, model expects {d_mu}")
    return mu


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth_broadband(ns, rec: RunRecord):
    cfg = Broadband1DConfig(tuple(ns.freqs), tuple(ns.amps), ns.n_points, ns.train_fraction, ns.seed)
    with rec.stage("generate"):
        ds = gen_broadband_1d(cfg)
    with rec.stage("write"):
        write_dataset(ds, ns.out)
    rec.outputs.append(str(ns.out / "manifest.json"))
    return _out_dir(ns.out)


def cmd_synth_airfoil(ns, rec: RunRecord):
    cfg = Airfoil2DConfig(n_nodes=ns.n_nodes, n_samples=ns.n_samples, shock_width=ns.shock_width, seed=ns.seed)
    with rec.stage("generate"):
        ds = gen_airfoil_2d(cfg)
    with rec.stage("write"):
        write_dataset(ds, ns.out)
    rec.metrics["n_samples"] = len(ds)
    rec.outputs.append(str(ns.out / "manifest.json"))
    return ns.out


def cmd_synth_wing(ns, rec: RunRecord):
    cfg = Wing3DConfig(n_shapes=ns.n_shapes, n_conditions=ns.n_conditions, sdf_points=ns.sdf_points, seed=ns.seed)
    with rec.stage("generate"):
        ds = gen_wing_3d(cfg)
    with rec.stage("write"):
        write_dataset(ds, ns.out, mesh_format=ns.mesh_format)
    rec.metrics.update(n_samples=len(ds), n_shapes=len(ds.shape_ids()))
    rec.outputs.append(str(ns.out / "manifest.json"))
    return ns.out


def cmd_data_check(ns, rec: RunRecord):
    with rec.stage("check"):
        m = load_manifest(data_path(ns.manifest))
        ds = load_dataset(data_path(ns.manifest))
    rec.metrics.update(n_samples=len(ds), n_shapes=len(ds.shape_ids()), d_u=ds.d_u, d_p=ds.d_p,
                       schema_version=m.schema_version)
    print(f"ok: {len(ds)} samples, {len(ds.shape_ids())} shapes, d_u={ds.d_u}, d_p={ds.d_p}")
    return None


def cmd_data_split(ns, rec: RunRecord):
    ds = _load_ds(ns.manifest)
    with rec.stage("split"):
        parts = split_dataset(ds, ns.fractions, seed=ns.seed, mode=ns.mode)
    info = {"mode": ns.mode, "seed": ns.seed, "fractions": list(ns.fractions)}
    for name, part in zip(("train", "val", "test"), parts):
        info[name] = [s.id for s in part]
        rec.metrics[f"n_{name}"] = len(part)
    ns.out.parent.mkdir(parents=True, exist_ok=True)
    ns.out.write_text(json.dumps(info, indent=1) + "\n")
    rec.outputs.append(str(ns.out))
    return ns.out.parent


def _read_mesh(path):
    from .data import load_mesh
    return load_mesh(data_path(path))


def cmd_sdf_prepare(ns, rec: RunRecord):
    ns.out.mkdir(parents=True, exist_ok=True)
    for i, mp in enumerate(ns.meshes):
        with rec.stage("sample"):
            mesh, _ = normalize_to_unit_sphere(_read_mesh(mp))
            cloud = sample_sdf_cloud(mesh, ns.n_total, ns.uniform_fraction, ns.sigmas, ns.seed + i, Path(mp).stem)
        out = ns.out / f"{Path(mp).stem}.nfsb"
        save_sdf(cloud, out)
        rec.outputs.append(str(out))
    rec.metrics["n_shapes"] = len(ns.meshes)
    return ns.out


def cmd_train_e2e(ns, rec: RunRecord):
    ds = _load_ds(ns.data)
    train, val, _ = _splits(ns, ds)
    d_x = train.samples[0].coords.shape[1]
    train_res = min(ns.train_res, min(s.mesh.n_vertices for s in train)) if ns.train_res else None
    model = EndToEndModel.init(d_x, ds.d_p, ds.d_u, ns.widths, ns.freqs, ns.sigmas, ns.hyper_hidden,
                               use_normals=ns.normals, seed=ns.seed)
    cfg = TrainConfig.end_to_end(epochs=ns.epochs, lr=ns.lr, lr_hyper=ns.lr_hyper, batch_size=ns.batch,
                                 train_res=train_res, seed=ns.seed, schedule=ns.schedule)
    with rec.stage("train"):
        model, hist = train_end_to_end(train, model, cfg, val)
    _save(ns.out, {"model": model}, {"command": "train e2e", "train_ids": [s.id for s in train]})
    rec.metrics.update(final_train_loss=hist["train"][-1], val_mse=hist["val"][-1] if hist["val"] else None)
    _write_csv(_out_dir(ns.out) / f"{ns.out.stem}_history.csv", ["epoch", "train_loss", "val_mse"],
               [(e, t, hist["val"][i] if hist["val"] else "") for i, (e, t) in enumerate(zip(hist["epoch"], hist["train"]))])
    rec.outputs.append(str(ns.out))
    return _out_dir(ns.out)


def cmd_train_encoder(ns, rec: RunRecord):
    ds = _load_ds(ns.data)
    train, _, _ = _splits(ns, ds)
    enc = EncoderModel.init(ns.role, ns.latent_dim, ns.widths, ns.sigmas, ns.freqs,
                            d_x=train.samples[0].coords.shape[1], hyper_hidden=ns.hyper_hidden,
                            inner_steps=ns.inner_steps, inner_lr=ns.inner_lr,
                            use_normals=not ns.no_normals, seed=ns.seed)
    if ns.role == "input":
        clouds = train.sdf_by_shape()
        missing = [sid for sid in train.shape_ids() if sid not in clouds]
        if missing:
            raise PipelineError(f"no SDF cloud for shapes {missing}", stage="encoder-input")
        items = [clouds[k] for k in sorted(clouds)]
        n_min = min(len(c.points) for c in items)
    else:
        items = train.samples
        n_min = min(s.mesh.n_vertices for s in items)
    cfg = TrainConfig.encoder(ns.role, lr=ns.lr, lr_hyper=ns.lr_hyper, batch_size=ns.batch,
                              inner_steps=ns.inner_steps, inner_lr=ns.inner_lr,
                              train_res=min(ns.train_res, n_min) if ns.train_res else None,
                              seed=ns.seed, first_order=ns.first_order, schedule=ns.schedule,
                              **({"epochs": ns.epochs} if ns.epochs else {}))
    rec.config["epochs"] = cfg.epochs
    with rec.stage(f"encoder-{ns.role}"):
        enc, hist = train_encoder(items, enc, cfg)
    _save(ns.out, {"encoder": enc}, {"command": "train encoder", "role": ns.role})
    rec.metrics.update(final_train_loss=hist["train"][-1], fingerprint=enc.fingerprint())
    rec.outputs.append(str(ns.out))
    return _out_dir(ns.out)


def _load_component(path, kinds: tuple[type, ...], name: str):
    comps, _ = load_checkpoint(data_path(path))
    for obj in comps.values():
        if isinstance(obj, kinds):
            return obj
    raise UsageError(f"{path}: no {name} in checkpoint")


def cmd_encode_latents(ns, rec: RunRecord):
    ds = _load_ds(ns.data)
    enc_in = _load_component(ns.encoder_in, (EncoderModel,), "encoder")
    enc_out = _load_component(ns.encoder_out, (EncoderModel,), "encoder")
    if enc_in.role != "input" or enc_out.role != "output":
        raise UsageError("--encoder-in must be an input-role encoder and --encoder-out an output-role one")
    cache = GeometryLatentCache()
    with rec.stage("encode"):
        lat = encode_dataset(enc_in, enc_out, ds, cache)
    ns.out.parent.mkdir(parents=True, exist_ok=True)
    lat.save(ns.out)
    rec.metrics.update(n_pairs=len(lat), n_geometry_codes=len(cache), d_in=lat.z_in.shape[1], d_out=lat.z_out.shape[1])
    rec.outputs.append(str(ns.out))
    return _out_dir(ns.out)


def cmd_train_processor(ns, rec: RunRecord):
    lat = LatentDataset.load(data_path(ns.latents))
    if ns.split is not None:
        info = json.loads(data_path(ns.split).read_text())
        train, val = lat.subset(info["train"]), lat.subset(info["val"])
    else:
        ids_ds = Dataset([_Stub(i, s) for i, s in zip(lat.ids, lat.shape_ids)], [], [])
        tr, va, _ = split_dataset(ids_ds, ns.fractions, seed=ns.seed, mode=ns.split_mode)
        train, val = lat.subset([s.id for s in tr]), lat.subset([s.id for s in va])
    proc = Processor.init(lat.z_in.shape[1], lat.mu.shape[1], lat.z_out.shape[1], ns.hidden, seed=ns.seed)
    cfg = TrainConfig.processor(epochs=ns.epochs, lr=ns.lr, batch_size=ns.batch, patience=ns.patience,
                                seed=ns.seed, schedule=ns.schedule)
    with rec.stage("processor"):
        proc, hist = train_processor(train, proc, cfg, val)
    _save(ns.out, {"processor": proc}, {"command": "train processor"})
    rec.metrics.update(best_epoch=hist["best_epoch"][0], best_val=min(hist["val"]),
                       epochs_run=len(hist["epoch"]))
    rec.outputs.append(str(ns.out))
    return _out_dir(ns.out)


@dataclass
class _Stub:
    id: str
    shape_id: str


def _load_model(ns):
    if ns.model is not None:
        comps, _ = load_checkpoint(data_path(ns.model))
        for obj in comps.values():
            if isinstance(obj, (EndToEndModel, PodGprModel, EncodeProcessDecode)):
                return obj, comps
        raise UsageError(f"{ns.model}: no end-to-end, POD+GPR or encode-process-decode model")
    enc_in = _load_component(ns.encoder_in, (EncoderModel,), "encoder")
    proc = _load_component(ns.processor, (Processor,), "processor")
    enc_out = _load_component(ns.encoder_out, (EncoderModel,), "encoder")
    return EncodeProcessDecode(enc_in, enc_out, proc), {}


def cmd_predict(ns, rec: RunRecord):
    model, comps = _load_model(ns)
    rng = np.random.default_rng(ns.seed)
    sdf = None
    if ns.sample is not None:
        ds = _load_ds(ns.data)
        s = {x.id: x for x in ds}.get(ns.sample)
        if s is None:
            raise DataError(f"unknown sample {ns.sample!r}")
        mesh, sdf = s.mesh, s.sdf
    elif ns.shape is not None:
        with rec.stage("geometry"):
            mesh, _ = normalize_to_unit_sphere(_read_mesh(ns.shape))
            normals, _ = vertex_normals(mesh)
            from dataclasses import replace
            mesh = replace(mesh, normals=normals)
            if isinstance(model, EncodeProcessDecode):
                sdf = sample_sdf_cloud(mesh, ns.sdf_points, seed=ns.seed, shape_id=f"file:{Path(ns.shape).resolve()}")
    else:
        raise UsageError("give --sample (with --data) or --shape")
    idx = np.arange(mesh.n_vertices)
    if ns.resolution is not None:
        if ns.resolution > mesh.n_vertices:
            raise UsageError(f"--resolution {ns.resolution} exceeds {mesh.n_vertices} mesh nodes")
        idx = np.sort(rng.permutation(mesh.n_vertices)[:ns.resolution])
    X = mesh.vertices[idx]
    normals = None if mesh.normals is None else mesh.normals[idx]
    with rec.stage("predict"):
        if isinstance(model, EndToEndModel):
            out = model.predict(_mu(ns, model.d_mu), X, normals)
        elif isinstance(model, PodGprModel):
            if ns.resolution is not None or ns.shape is not None:
                raise UsageError("POD+GPR predicts on its training mesh only; drop --resolution/--shape")
            out = pod_gpr_predict(model.basis, model.gpr, _mu(ns, model.gpr.X.shape[1]))[0]
            out = comps["normalizer"].denormalize("fields", out.reshape(len(X), -1)) if "normalizer" in comps else out
            out = out.reshape(len(X), -1)
        else:
            if ns.latent_cache is not None and ns.latent_cache.exists():
                cache = GeometryLatentCache.load(ns.latent_cache)
            else:
                cache = GeometryLatentCache()
            model = EncodeProcessDecode(model.enc_in, model.enc_out, model.proc, cache)
            out = model.predict(sdf, _mu(ns, model.proc.d_mu), X, normals)
            rec.metrics.update(cache_hits=cache.hits, cache_misses=cache.misses)
            if ns.latent_cache is not None:
                cache.save(ns.latent_cache)
    cols = ["x", "y", "z"][:X.shape[1]] + [f"u{j}" for j in range(out.shape[1])]
    _write_csv(ns.out, ["node"] + cols, ([int(i), *X[k], *out[k]] for k, i in enumerate(idx)))
    rec.metrics["n_points"] = len(idx)
    rec.outputs.append(str(ns.out))
    return _out_dir(ns.out)


def cmd_eval(ns, rec: RunRecord):
    model, comps = _load_model(ns)
    ds = _load_ds(ns.data)
    parts = dict(zip(("train", "val", "test"), _splits(ns, ds)))
    subset = ds if ns.subset == "all" else parts[ns.subset]
    rng = np.random.default_rng(ns.seed)
    rows, errs = [], []
    norm = _field_normalizer(model, comps, parts["train"])
    with rec.stage("inference"):
        for s in subset:
            idx = np.arange(s.mesh.n_vertices)
            if ns.resolution is not None and ns.resolution < len(idx):
                idx = np.sort(rng.permutation(len(idx))[:ns.resolution])
            X = s.coords[idx]
            nrm = None if s.mesh.normals is None else s.mesh.normals[idx]
            if isinstance(model, EndToEndModel):
                pred = model.predict(s.mu, X, nrm)
            elif isinstance(model, PodGprModel):
                pred = norm.denormalize("fields", pod_gpr_predict(model.basis, model.gpr, s.mu)[0]
                                       .reshape(s.mesh.n_vertices, -1))[idx]
            else:
                pred = model.predict(s.sdf, s.mu, X, nrm)
            true = s.values[idx]
            if not ns.physical_units:
                pred, true = norm.normalize("fields", pred), norm.normalize("fields", true)
            e = float(np.mean((pred - true) ** 2))
            errs.append(e)
            rows.append((s.id, s.shape_id, len(idx), e))
    ns.out_dir.mkdir(parents=True, exist_ok=True)
    _write_csv(ns.out_dir / "per_sample.csv", ["id", "shape_id", "n_points", "mse"], rows)
    rec.metrics.update(mse_mean=float(np.mean(errs)), mse_median=float(np.median(errs)),
                       mse_max=float(np.max(errs)), n_samples=len(errs),
                       units="physical" if ns.physical_units else "standardized",
                       inference_s_per_sample=rec.timings["inference"] / len(errs))
    (ns.out_dir / "metrics.json").write_text(json.dumps(rec.metrics, indent=2) + "\n")
    rec.outputs += [str(ns.out_dir / "per_sample.csv"), str(ns.out_dir / "metrics.json")]
    return ns.out_dir


def _field_normalizer(model, comps, train) -> Normalizer:
    if isinstance(model, EndToEndModel):
        return model.normalizer
    if isinstance(model, EncodeProcessDecode):
        return model.enc_out.normalizer
    if "normalizer" in comps:
        return comps["normalizer"]
    return fit_field_normalizer(train)


def cmd_podgpr_fit(ns, rec: RunRecord):
    ds = _load_ds(ns.data)
    train, val, _ = _splits(ns, ds)
    if len({id(s.mesh) for s in train}) != 1:
        raise PodError("POD needs every sample on one shared mesh")
    norm = fit_field_normalizer(train)
    snaps = np.stack([norm.normalize("fields", s.values).ravel() for s in train])
    mu = np.stack([s.mu for s in train])
    with rec.stage("fit"):
        model = fit_pod_gpr(mu, snaps, min(ns.rank, len(train)), ns.restarts, ns.noise, ns.seed)
    _save(ns.out, {"model": model, "normalizer": norm}, {"command": "podgpr fit"})
    if len(val):
        e = [float(np.mean((pod_gpr_predict(model.basis, model.gpr, s.mu)[0]
                            - norm.normalize("fields", s.values).ravel()) ** 2)) for s in val]
        rec.metrics["val_mse"] = float(np.mean(e))
    rec.metrics["rank"] = model.basis.r
    rec.outputs.append(str(ns.out))
    return _out_dir(ns.out)


def cmd_podgpr_predict(ns, rec: RunRecord):
    comps, _ = load_checkpoint(data_path(ns.model))
    model = comps.get("model")
    if not isinstance(model, PodGprModel):
        raise UsageError(f"{ns.model}: not a POD+GPR checkpoint")
    mu = _mu(ns, model.gpr.X.shape[1])
    with rec.stage("predict"):
        if ns.variance:
            mean, var = pod_gpr_predict(model.basis, model.gpr, mu, return_var=True)
        else:
            mean, var = pod_gpr_predict(model.basis, model.gpr, mu), None
    norm = comps.get("normalizer")
    mean = mean[0]
    if norm is not None:
        d_u = len(norm["fields"].mean)
        mean = norm.denormalize("fields", mean.reshape(-1, d_u)).ravel()
        if var is not None:
            var = (var[0].reshape(-1, d_u) * norm["fields"].std ** 2).ravel()
    elif var is not None:
        var = var[0]
    header = ["index", "value"] + (["variance"] if var is not None else [])
    _write_csv(ns.out, header, ([i, m] + ([var[i]] if var is not None else []) for i, m in enumerate(mean)))
    rec.outputs.append(str(ns.out))
    return _out_dir(ns.out)


def cmd_study_discretization(ns, rec: RunRecord):
    base = DiscretizationStudyConfig()
    cfg = DiscretizationStudyConfig(
        train_resolutions=ns.resolutions, eval_resolutions=ns.eval_resolutions or ns.resolutions,
        widths=ns.widths, n_freqs=ns.freqs, sigmas=ns.sigmas, hyper_hidden=ns.hyper_hidden,
        epochs=ns.epochs, batch_size=ns.batch, lr=ns.lr, schedule=base.schedule, mode=ns.mode,
        split=base.split, seed=ns.seed,
        data=Airfoil2DConfig(n_nodes=ns.n_nodes, n_samples=ns.n_samples, seed=ns.seed))
    rec.config["study"] = cfg.to_dict()
    with rec.stage("study"):
        rows, summary = run_discretization_study(cfg)
    ns.out_dir.mkdir(parents=True, exist_ok=True)
    write_rows(ns.out_dir / "discretization.csv", rows)
    rec.metrics.update(summary)
    rec.outputs.append(str(ns.out_dir / "discretization.csv"))
    return ns.out_dir


def cmd_study_sigma(ns, rec: RunRecord):
    try:
        sets = tuple(_floats(s) for s in ns.sigma_sets.split(";") if s.strip())
    except argparse.ArgumentTypeError as exc:
        raise UsageError(str(exc))
    cfg = SigmaStudyConfig(sigma_sets=sets, n_freqs=ns.freqs, widths=ns.widths, steps=ns.steps, lr=ns.lr,
                           replicates=ns.replicates, seed=ns.seed)
    rec.config["study"] = cfg.to_dict()
    with rec.stage("study"):
        rows, summary = run_sigma_study(cfg)
    ns.out_dir.mkdir(parents=True, exist_ok=True)
    write_rows(ns.out_dir / "sigma.csv", rows)
    rec.metrics.update(summary)
    rec.outputs.append(str(ns.out_dir / "sigma.csv"))
    return ns.out_dir


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

_ERRORS = (DataError, PipelineError, GeometryError, PodError, GprError, SynthError, AutodiffError,
           WidthError, OSError)


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    ns = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(ns.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    command = " ".join(x for x in (ns.cmd, getattr(ns, "sub", None)) if x)
    try:
        cfg = resolve_config(parser, argv, ns)
        _check_conflicts(ns)
    except UsageError as exc:
        parser.error(str(exc))
    if ns.print_config:
        print(json.dumps({"command": command, "seed": ns.seed, "threads": ns.threads, **cfg},
                         indent=2, sort_keys=True, default=_jsonable))
        return 0
    rec = RunRecord(command, cfg, ns.seed)
    from threadpoolctl import threadpool_limits
    try:
        with threadpool_limits(limits=ns.threads):
            out_dir = ns.func(ns, rec)
    except UsageError as exc:
        parser.error(str(exc))
    except _ERRORS as exc:
        stage = getattr(exc, "stage", None) or command
        print(f"aeroinr: error [{stage}]: {exc}", file=sys.stderr)
        return 1
    rec.save(_record_path(ns, out_dir))
    return 0


if __name__ == "__main__":
    sys.exit(main())
