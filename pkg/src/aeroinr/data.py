"""Dataset manifests, the NFSB binary container, normalization, splits, metrics.

NFSB layout (all little-endian)::

    b"NFSB" | u32 version | u32 tensor count
    per tensor: u32 name length | UTF-8 name | u8 dtype (0=f64, 1=u32)
                | u8 rank | u64 dim * rank | payload

Checkpoints are NFSB files whose tensors are namespaced ``component/key``
plus a ``__meta__`` tensor holding UTF-8 JSON bytes (as u32 values) that
records each component's kind and configuration.
"""
from __future__ import annotations

import json
import logging
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .geometry import Mesh, SdfCloud, load_obj
from .neuralfield import Hypernetwork, NeuralField, ResidualMLP
from .podgpr import GprModel, PodBasis, PodGprModel

log = logging.getLogger(__name__)

MAGIC = b"NFSB"
CONTAINER_VERSION = 1
SCHEMA_VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<u4")}


class DataError(ValueError):
    def __init__(self, msg: str, sample_id: str | None = None):
        self.sample_id = sample_id
        super().__init__(f"[sample {sample_id}] {msg}" if sample_id else msg)


# ---------------------------------------------------------------------------
# container
# ---------------------------------------------------------------------------

def write_container(path, tensors: dict[str, np.ndarray]) -> None:
    chunks = [MAGIC, struct.pack("<II", CONTAINER_VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype.kind == "f":
            tag, data = 0, arr.astype("<f8")
        elif arr.dtype.kind in "uib":
            if arr.size and (arr.min() < 0 or arr.max() > 0xFFFFFFFF):
                raise DataError(f"tensor {name!r} does not fit in u32")
            tag, data = 1, arr.astype("<u4")
        else:
            raise DataError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<BB", tag, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(data).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_container(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise DataError(f"{path}: not an NFSB container")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != CONTAINER_VERSION:
        raise DataError(f"{path}: unsupported container version {version}")
    off = 12
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", buf, off)
            off += 4
            name = buf[off: off + nlen].decode("utf-8")
            off += nlen
            tag, rank = struct.unpack_from("<BB", buf, off)
            off += 2
            dims = struct.unpack_from(f"<{rank}Q", buf, off)
            off += 8 * rank
            dt = _DTYPES[tag]
            nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
            if off + nbytes > len(buf):
                raise DataError(f"{path}: truncated payload for {name!r}")
            arr = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=off).reshape(dims)
            out[name] = arr.astype(np.float64 if tag == 0 else np.uint32)
            off += nbytes
    except (struct.error, KeyError) as exc:
        raise DataError(f"{path}: malformed container ({exc})") from exc
    if off != len(buf):
        raise DataError(f"{path}: {len(buf) - off} trailing bytes")
    return out


def json_tensor(obj: Any) -> np.ndarray:
    return np.frombuffer(json.dumps(obj, sort_keys=True).encode("utf-8"), dtype=np.uint8).astype(np.uint32)


def tensor_json(arr: np.ndarray) -> Any:
    return json.loads(np.asarray(arr, dtype=np.uint8).tobytes().decode("utf-8"))


# ---------------------------------------------------------------------------
# mesh / field / sdf files
# ---------------------------------------------------------------------------

def save_mesh(mesh: Mesh, path) -> None:
    t = {"vertices": mesh.vertices, "triangles": mesh.triangles.astype(np.uint32)}
    if mesh.normals is not None:
        t["normals"] = mesh.normals
    write_container(path, t)


def load_mesh(path) -> Mesh:
    path = Path(path)
    if path.suffix.lower() == ".obj":
        return load_obj(path)
    t = read_container(path)
    tri = t.get("triangles", np.zeros((0, 3), np.uint32)).astype(np.int64)
    return Mesh.from_arrays(t["vertices"], tri.reshape(-1, 3), t.get("normals"))


def save_sdf(cloud: SdfCloud, path) -> None:
    write_container(path, {
        "points": cloud.points,
        "sdf": cloud.sdf,
        "tiers": (cloud.tiers + 1).astype(np.uint32),
        "sigmas": np.asarray(cloud.sigmas, dtype=np.float64),
        "uniform_fraction": np.asarray(cloud.uniform_fraction),
        "seed": np.array([cloud.seed & 0xFFFFFFFF, (cloud.seed >> 32) & 0xFFFFFFFF], dtype=np.uint32),
        "shape_id": json_tensor(cloud.shape_id),
    })


def load_sdf(path) -> SdfCloud:
    t = read_container(path)
    seed = int(t["seed"][0]) | (int(t["seed"][1]) << 32)
    return SdfCloud(t["points"], t["sdf"], tensor_json(t["shape_id"]), float(t["uniform_fraction"]),
                    tuple(float(s) for s in t["sigmas"]), seed, t["tiers"].astype(np.int64) - 1)


# ---------------------------------------------------------------------------
# manifest and dataset
# ---------------------------------------------------------------------------

@dataclass
class SampleEntry:
    id: str
    shape_id: str
    mesh: str
    field: str
    mu: list[float]
    sdf: str | None = None


@dataclass
class DatasetManifest:
    field_names: list[str]
    param_names: list[str]
    samples: list[SampleEntry]
    schema_version: int = SCHEMA_VERSION
    root: Path = field(default=Path("."), repr=False)

    @property
    def d_u(self) -> int:
        return len(self.field_names)

    @property
    def d_p(self) -> int:
        return len(self.param_names)

    def to_json(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "field_names": self.field_names,
            "param_names": self.param_names,
            "samples": [{k: v for k, v in vars(s).items() if v is not None} for s in self.samples],
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        raw = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    if raw.get("schema_version") != SCHEMA_VERSION:
        raise DataError(f"unsupported schema version {raw.get('schema_version')!r}")
    for key in ("field_names", "param_names", "samples"):
        if key not in raw:
            raise DataError(f"manifest missing {key!r}")
    samples = []
    for s in raw["samples"]:
        try:
            samples.append(SampleEntry(str(s["id"]), str(s["shape_id"]), s["mesh"], s["field"],
                                       [float(m) for m in s["mu"]], s.get("sdf")))
        except KeyError as exc:
            raise DataError(f"sample missing field {exc}", s.get("id")) from exc
    m = DatasetManifest(list(raw["field_names"]), list(raw["param_names"]), samples, root=path.parent)
    validate_manifest(m)
    return m


def validate_manifest(m: DatasetManifest) -> None:
    seen = set()
    for s in m.samples:
        if s.id in seen:
            raise DataError("duplicate sample id", s.id)
        seen.add(s.id)
        if len(s.mu) != m.d_p:
            raise DataError(f"mu has {len(s.mu)} entries, expected {m.d_p}", s.id)
        for key in ("mesh", "field", "sdf"):
            rel = getattr(s, key)
            if rel is not None and not (m.root / rel).exists():
                raise DataError(f"{key} file not found: {rel}", s.id)


@dataclass
class FieldSample:
    id: str
    shape_id: str
    mesh: Mesh
    mu: np.ndarray
    values: np.ndarray
    sdf: SdfCloud | None = None
    extras: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    @property
    def coords(self) -> np.ndarray:
        return self.mesh.vertices


@dataclass
class Dataset:
    samples: list[FieldSample]
    field_names: list[str]
    param_names: list[str]

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    @property
    def d_u(self) -> int:
        return len(self.field_names)

    @property
    def d_p(self) -> int:
        return len(self.param_names)

    def shape_ids(self) -> list[str]:
        return sorted({s.shape_id for s in self.samples})

    def subset(self, ids: Iterable[str]) -> "Dataset":
        by_id = {s.id: s for s in self.samples}
        return Dataset([by_id[i] for i in ids], self.field_names, self.param_names)

    def sdf_by_shape(self) -> dict[str, SdfCloud]:
        out = {}
        for s in self.samples:
            if s.sdf is not None:
                out.setdefault(s.shape_id, s.sdf)
        return out


def load_dataset(manifest_path) -> Dataset:
    m = load_manifest(manifest_path)
    meshes: dict[str, Mesh] = {}
    sdfs: dict[str, SdfCloud] = {}
    samples = []
    for e in m.samples:
        if e.mesh not in meshes:
            meshes[e.mesh] = load_mesh(m.root / e.mesh)
        mesh = meshes[e.mesh]
        f = read_container(m.root / e.field)
        if "values" not in f:
            raise DataError("field file has no 'values' tensor", e.id)
        values = f.pop("values").reshape(len(mesh.vertices), -1)
        if values.shape[1] != m.d_u:
            raise DataError(f"field has {values.shape[1]} components, expected {m.d_u}", e.id)
        if not np.isfinite(values).all():
            raise DataError("non-finite field values", e.id)
        sdf = None
        if e.sdf is not None:
            if e.sdf not in sdfs:
                sdfs[e.sdf] = load_sdf(m.root / e.sdf)
            sdf = sdfs[e.sdf]
        samples.append(FieldSample(e.id, e.shape_id, mesh, np.array(e.mu), values, sdf, f))
    return Dataset(samples, m.field_names, m.param_names)


def write_dataset(ds: Dataset, root, mesh_format: str = "nfsb") -> DatasetManifest:
    """Write meshes, fields, SDF clouds and a manifest under ``root``."""
    root = Path(root)
    for sub in ("meshes", "fields", "sdf"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    entries, written = [], {}
    for s in ds.samples:
        key = id(s.mesh)
        if key not in written:
            name = f"meshes/{s.shape_id}.{mesh_format}"
            if mesh_format == "obj":
                from .geometry import save_obj
                save_obj(s.mesh, root / name)
            else:
                save_mesh(s.mesh, root / name)
            written[key] = name
        fpath = f"fields/{s.id}.nfsb"
        write_container(root / fpath, {"values": s.values, **s.extras})
        spath = None
        if s.sdf is not None:
            spath = f"sdf/{s.shape_id}.nfsb"
            if not (root / spath).exists():
                save_sdf(s.sdf, root / spath)
        entries.append(SampleEntry(s.id, s.shape_id, written[key], fpath, [float(x) for x in s.mu], spath))
    m = DatasetManifest(ds.field_names, ds.param_names, entries, root=root)
    m.save(root / "manifest.json")
    return m


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

@dataclass
class FeatureStats:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x, name: str = "feature") -> "FeatureStats":
        x = np.asarray(x, dtype=np.float64).reshape(-1, np.shape(x)[-1])
        mean = x.mean(axis=0)
        std = x.std(axis=0)
        const = std <= 1e-12 * np.maximum(1.0, np.abs(mean))
        if const.any():
            warnings.warn(f"{name}: constant feature(s) {np.flatnonzero(const).tolist()}; std set to 1")
            std = np.where(const, 1.0, std)
        return cls(mean, std)

    def state(self):
        return {}, {"mean": self.mean, "std": self.std}

    @classmethod
    def from_state(cls, cfg, arrays) -> "FeatureStats":
        return cls(arrays["mean"], arrays["std"])

    def normalize(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def denormalize(self, y):
        return np.asarray(y, dtype=np.float64) * self.std + self.mean


@dataclass
class Normalizer:
    """Per-feature standardization, one :class:`FeatureStats` per group."""

    stats: dict[str, FeatureStats] = field(default_factory=dict)

    def __getitem__(self, key: str) -> FeatureStats:
        return self.stats[key]

    def __contains__(self, key: str) -> bool:
        return key in self.stats

    def normalize(self, key: str, x):
        return self.stats[key].normalize(x)

    def denormalize(self, key: str, y):
        return self.stats[key].denormalize(y)

    def state(self):
        arrays = {}
        for k, s in self.stats.items():
            arrays[f"{k}.mean"] = s.mean
            arrays[f"{k}.std"] = s.std
        return {"groups": list(self.stats)}, arrays

    @classmethod
    def from_state(cls, config, arrays) -> "Normalizer":
        return cls({k: FeatureStats(arrays[f"{k}.mean"], arrays[f"{k}.std"]) for k in config["groups"]})


def fit_field_normalizer(train: Dataset, with_normals: bool = False) -> Normalizer:
    """Statistics for coordinates, normals, parameters and fields: TRAIN split only."""
    if len(train) == 0:
        raise DataError("cannot fit normalization on an empty split")
    meshes = {id(s.mesh): s.mesh for s in train}
    coords = np.concatenate([m.vertices for m in meshes.values()])
    stats = {
        "coords": FeatureStats.fit(coords, "coords"),
        "mu": FeatureStats.fit(np.stack([s.mu for s in train]), "mu"),
        "fields": FeatureStats.fit(np.concatenate([s.values for s in train]), "fields"),
    }
    if with_normals:
        normals = []
        for m in meshes.values():
            if m.normals is None:
                raise DataError("normals requested but mesh has none")
            normals.append(m.normals)
        stats["normals"] = FeatureStats.fit(np.concatenate(normals), "normals")
    return Normalizer(stats)


def fit_sdf_normalizer(clouds: Iterable[SdfCloud]) -> Normalizer:
    clouds = list(clouds)
    if not clouds:
        raise DataError("no SDF clouds to fit")
    return Normalizer({
        "points": FeatureStats.fit(np.concatenate([c.points for c in clouds]), "points"),
        "sdf": FeatureStats.fit(np.concatenate([c.sdf for c in clouds])[:, None], "sdf"),
    })


# ---------------------------------------------------------------------------
# splits and metrics
# ---------------------------------------------------------------------------

def _split_counts(n: int, fractions: Sequence[float]) -> tuple[int, int, int]:
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return n_train, n_val, n - n_train - n_val


def split_dataset(ds: Dataset, fractions=(0.7, 0.1, 0.2), seed: int = 0,
                  mode: str = "by-sample") -> tuple[Dataset, Dataset, Dataset]:
    """Seeded disjoint train/val/test split, by sample or by shape id."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise DataError(f"fractions must be three non-negatives summing to 1, got {fractions}")
    rng = np.random.default_rng(seed)
    if mode == "by-sample":
        units = [s.id for s in ds.samples]
    elif mode == "by-shape":
        units = ds.shape_ids()
    else:
        raise DataError(f"unknown split mode {mode!r}")
    order = [units[i] for i in rng.permutation(len(units))]
    a, b, _ = _split_counts(len(units), fractions)
    groups = [set(order[:a]), set(order[a:a + b]), set(order[a + b:])]
    key = (lambda s: s.id) if mode == "by-sample" else (lambda s: s.shape_id)
    parts = []
    for name, g in zip(("train", "val", "test"), groups):
        part = Dataset([s for s in ds.samples if key(s) in g], ds.field_names, ds.param_names)
        if len(part) == 0:
            raise DataError(f"{name} split is empty ({len(units)} units, fractions {fractions})")
        parts.append(part)
    return tuple(parts)


def mse(pred, true) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    true = np.asarray(true, dtype=np.float64)
    if pred.shape != true.shape:
        raise DataError(f"shape mismatch {pred.shape} vs {true.shape}")
    d = pred - true
    return float(np.mean(d * d))


def mse_per_sample(preds: Sequence, trues: Sequence) -> np.ndarray:
    if len(preds) != len(trues):
        raise DataError("prediction and target counts differ")
    return np.array([mse(p, t) for p, t in zip(preds, trues)])


def dataset_mse(preds: Sequence, trues: Sequence) -> float:
    return float(mse_per_sample(preds, trues).mean())


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_KINDS: dict[str, type] = {}


def register_kind(cls):
    """Class decorator: make ``cls`` storable in checkpoints via state()/from_state()."""
    _KINDS[cls.__name__] = cls
    return cls


for _cls in (FeatureStats, Normalizer, NeuralField, Hypernetwork, ResidualMLP, PodBasis, GprModel, PodGprModel):
    register_kind(_cls)


def _kind(name: str) -> type:
    if name not in _KINDS:
        from . import pipelines  # noqa: F401  registers model bundles
    if name not in _KINDS:
        raise DataError(f"unknown component kind {name!r}")
    return _KINDS[name]


def compose_state(parts: dict[str, Any], **extra) -> tuple[dict, dict[str, np.ndarray]]:
    """Merge the states of several checkpointable parts into one (config, arrays)."""
    cfg: dict = {"parts": {}, **extra}
    arrays: dict[str, np.ndarray] = {}
    for name, obj in parts.items():
        if obj is None:
            continue
        c, a = obj.state()
        cfg["parts"][name] = {"kind": type(obj).__name__, "config": c}
        arrays.update({f"{name}:{k}": v for k, v in a.items()})
    return cfg, arrays


def decompose_state(cfg: dict, arrays: dict[str, np.ndarray]) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for name, c in cfg["parts"].items():
        pre = name + ":"
        sub = {k[len(pre):]: v for k, v in arrays.items() if k.startswith(pre)}
        out[name] = _kind(c["kind"]).from_state(c["config"], sub)
    return out


def save_checkpoint(path, components: dict[str, Any], meta: dict | None = None) -> None:
    tensors: dict[str, np.ndarray] = {}
    info = {"version": 1, "meta": meta or {}, "components": {}}
    for name, obj in components.items():
        kind = type(obj).__name__
        if kind not in _KINDS:
            raise DataError(f"component {name!r} of type {kind} is not checkpointable")
        cfg, arrays = obj.state()
        info["components"][name] = {"kind": kind, "config": cfg}
        for k, v in arrays.items():
            tensors[f"{name}/{k}"] = v
    tensors["__meta__"] = json_tensor(info)
    write_container(path, tensors)


def load_checkpoint(path) -> tuple[dict[str, Any], dict]:
    t = read_container(path)
    if "__meta__" not in t:
        raise DataError(f"{path}: not a checkpoint (no __meta__)")
    info = tensor_json(t.pop("__meta__"))
    if info.get("version") != 1:
        raise DataError(f"{path}: unsupported checkpoint version {info.get('version')}")
    out = {}
    for name, c in info["components"].items():
        prefix = name + "/"
        arrays = {k[len(prefix):]: v for k, v in t.items() if k.startswith(prefix)}
        out[name] = _kind(c["kind"]).from_state(c["config"], arrays)
    return out, info["meta"]
