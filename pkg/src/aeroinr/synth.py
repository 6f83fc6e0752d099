"""Deterministic synthetic datasets with closed-form ground truth.

* ``broadband1d``: one multi-tone signal on the unit interval, for the
  Fourier-scale study.
* ``airfoil2d``: a fixed 2-D node set with a smooth field plus a moving tanh
  front whose position depends on a Mach-like parameter.
* ``wing3d``: a family of swept, tapered wings (triangle meshes, SDF clouds)
  carrying a surface field with a shape- and condition-dependent front.

Every field is an analytic function, so the exact value is known at any
query point.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .data import Dataset, FieldSample
from .geometry import Mesh, normalize_to_unit_sphere, sample_sdf_cloud, signed_volume, vertex_normals


class SynthError(ValueError):
    pass


# ---------------------------------------------------------------------------
# 1-D broadband signal
# ---------------------------------------------------------------------------

_BB_FREQS = (1.0, 3.0, 7.0, 13.0, 22.0, 35.0, 50.0)


@dataclass
class Broadband1DConfig:
    """Sum of sines on the unit interval.

    Amplitudes decay as ``f**-0.6`` by default: the top band still carries
    enough energy that an under-resolving encoding shows up in the error,
    while the low band dominates the signal.
    """

    freqs: tuple[float, ...] = _BB_FREQS
    amps: tuple[float, ...] = tuple(f ** -0.6 for f in _BB_FREQS)
    n_points: int = 1024
    train_fraction: float = 0.25
    seed: int = 0


def broadband_signal(x, cfg: Broadband1DConfig, phases: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros_like(x)
    for f, a, ph in zip(cfg.freqs, cfg.amps, phases):
        out += a * np.sin(2.0 * np.pi * f * x + ph)
    return out


def broadband_phases(cfg: Broadband1DConfig) -> np.ndarray:
    return np.random.default_rng(cfg.seed).uniform(0.0, 2.0 * np.pi, len(cfg.freqs))


def gen_broadband_1d(cfg: Broadband1DConfig | None = None) -> Dataset:
    """Signal sampled on a uniform grid of ``[0, 1)`` with a random train mask."""
    cfg = cfg or Broadband1DConfig()
    if len(cfg.freqs) != len(cfg.amps):
        raise SynthError("freqs and amps must have equal length")
    x = np.arange(cfg.n_points) / cfg.n_points
    phases = broadband_phases(cfg)
    u = broadband_signal(x, cfg, phases)
    rng = np.random.default_rng(cfg.seed + 1)
    n_train = int(round(cfg.train_fraction * cfg.n_points))
    mask = np.zeros(cfg.n_points, dtype=np.uint32)
    mask[rng.choice(cfg.n_points, n_train, replace=False)] = 1
    mesh = Mesh.from_arrays(x[:, None], np.zeros((0, 3), dtype=np.int64))
    sample = FieldSample("signal", "line", mesh, np.zeros(0), u[:, None],
                         extras={"train_mask": mask, "phases": phases})
    return Dataset([sample], ["u"], [])


# ---------------------------------------------------------------------------
# 2-D airfoil-like field
# ---------------------------------------------------------------------------

@dataclass
class Airfoil2DConfig:
    n_nodes: int = 3000
    n_samples: int = 120
    shock_width: float = 0.02
    alpha_range: tuple[float, float] = (0.0, 9.0)
    mach_range: tuple[float, float] = (0.3, 0.9)
    seed: int = 0


def airfoil_nodes(cfg: Airfoil2DConfig) -> np.ndarray:
    """Fixed node set on the unit square, clustered around the chord line."""
    rng = np.random.default_rng(cfg.seed)
    n_near = int(0.6 * cfg.n_nodes)
    near = np.column_stack([rng.uniform(0.0, 1.0, n_near),
                            np.clip(0.5 + 0.12 * rng.standard_normal(n_near), 0.0, 1.0)])
    far = rng.uniform(0.0, 1.0, (cfg.n_nodes - n_near, 2))
    return np.concatenate([near, far])


def _unit(v, lo_hi):
    lo, hi = lo_hi
    return (np.asarray(v, dtype=np.float64) - lo) / (hi - lo)


def front_position(mu, cfg: Airfoil2DConfig) -> float:
    """Chordwise location of the front; increasing in the Mach-like parameter."""
    a, m = _unit(mu[0], cfg.alpha_range), _unit(mu[1], cfg.mach_range)
    return 0.3 + 0.4 * m + 0.05 * a


def airfoil_field(X, mu, cfg: Airfoil2DConfig) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    x, y = X[..., 0], X[..., 1]
    a, m = _unit(mu[0], cfg.alpha_range), _unit(mu[1], cfg.mach_range)
    band = np.exp(-((y - 0.5) / 0.25) ** 2)
    smooth = (0.6 + 0.4 * a) * band * np.sin(np.pi * x) + 0.3 * m * x - 0.2 * a * (y - 0.5)
    xs = front_position(mu, cfg)
    amp = 0.5 + m
    front = amp * 0.5 * (1.0 + np.tanh((xs - x) / cfg.shock_width)) * np.exp(-((y - 0.5) / 0.3) ** 2)
    return smooth + front


def gen_airfoil_2d(cfg: Airfoil2DConfig | None = None) -> Dataset:
    cfg = cfg or Airfoil2DConfig()
    if not 0.01 <= cfg.shock_width <= 0.05:
        raise SynthError("shock_width must lie in [0.01, 0.05]")
    nodes = airfoil_nodes(cfg)
    mesh = Mesh.from_arrays(nodes, np.zeros((0, 3), dtype=np.int64))
    rng = np.random.default_rng(cfg.seed + 1)
    samples = []
    for i in range(cfg.n_samples):
        mu = np.array([rng.uniform(*cfg.alpha_range), rng.uniform(*cfg.mach_range)])
        u = airfoil_field(nodes, mu, cfg)
        samples.append(FieldSample(f"a{i:04d}", "airfoil", mesh, mu, u[:, None]))
    return Dataset(samples, ["u"], ["alpha", "mach"])


# ---------------------------------------------------------------------------
# 3-D wing family
# ---------------------------------------------------------------------------

@dataclass
class WingShape:
    span: float
    thickness: float
    sweep: float       # leading-edge sweep angle, degrees
    taper: float = 0.6
    root_chord: float = 1.0


@dataclass
class Wing3DConfig:
    n_shapes: int = 12
    n_conditions: int = 16
    span_range: tuple[float, float] = (2.0, 4.0)
    thickness_range: tuple[float, float] = (0.08, 0.16)
    sweep_range: tuple[float, float] = (10.0, 35.0)
    mach_range: tuple[float, float] = (0.7, 0.9)
    alpha_range: tuple[float, float] = (0.0, 4.0)
    aileron_range: tuple[float, float] = (-5.0, 5.0)
    reynolds: float = 3.0e7
    n_section: int = 40
    n_span: int = 16
    sdf_points: int = 60000
    sdf_uniform_fraction: float = 0.10
    sdf_sigmas: tuple[float, ...] = (0.005, 0.0005)
    front_width: float = 0.05
    seed: int = 0
    shapes: list[WingShape] = field(default_factory=list)


def _naca_half_thickness(x, t):
    # closed trailing edge variant of the 4-digit thickness law
    return 5.0 * t * (0.2969 * np.sqrt(x) - 0.1260 * x - 0.3516 * x ** 2 + 0.2843 * x ** 3 - 0.1036 * x ** 4)


def wing_mesh(shape: WingShape, n_section: int = 40, n_span: int = 16) -> Mesh:
    """Closed, outward-oriented triangle mesh of a straight-tapered swept wing.

    Chord along x, thickness along y, span along z (root at z = 0).
    """
    if min(shape.span, shape.thickness, shape.taper, shape.root_chord) <= 0 or n_section < 8 or n_span < 1:
        raise SynthError(f"degenerate wing parameters {asdict(shape)}")
    theta = 2.0 * np.pi * np.arange(n_section) / n_section
    xc = 0.5 * (1.0 + np.cos(theta))
    yc = _naca_half_thickness(xc, shape.thickness) * np.sign(np.sin(theta))
    tan_sw = np.tan(np.radians(shape.sweep))
    rings = []
    for eta in np.linspace(0.0, 1.0, n_span + 1):
        c = shape.root_chord * (1.0 - (1.0 - shape.taper) * eta)
        z = eta * shape.span
        rings.append(np.column_stack([eta * shape.span * tan_sw + c * xc, c * yc, np.full(n_section, z)]))
    V = np.concatenate(rings)
    P = n_section
    tris = []
    for k in range(n_span):
        a0, b0 = k * P, (k + 1) * P
        for j in range(P):
            j1 = (j + 1) % P
            tris.append((a0 + j, a0 + j1, b0 + j1))
            tris.append((a0 + j, b0 + j1, b0 + j))
    root_c, tip_c = len(V), len(V) + 1
    V = np.concatenate([V, rings[0].mean(0)[None], rings[-1].mean(0)[None]])
    tip0 = n_span * P
    for j in range(P):
        j1 = (j + 1) % P
        tris.append((root_c, j1, j))
        tris.append((tip_c, tip0 + j, tip0 + j1))
    mesh = Mesh.from_arrays(V, np.array(tris, dtype=np.int64))
    if mesh.dropped:
        raise SynthError(f"wing mesh has {mesh.dropped} degenerate triangles for {asdict(shape)}")
    if signed_volume(mesh) < 0:
        mesh = Mesh.from_arrays(V, np.array(tris, dtype=np.int64)[:, ::-1])
    return mesh


def wing_shapes(cfg: Wing3DConfig) -> list[WingShape]:
    """Shapes on a stratified design over (span, thickness, sweep)."""
    if cfg.shapes:
        return list(cfg.shapes)
    if cfg.n_shapes < 8:
        raise SynthError("wing3d needs at least 8 shapes")
    rng = np.random.default_rng(cfg.seed)
    n = cfg.n_shapes
    cols = [(rng.permutation(n) + rng.uniform(size=n)) / n for _ in range(3)]
    return [WingShape(cfg.span_range[0] + cols[0][i] * (cfg.span_range[1] - cfg.span_range[0]),
                      cfg.thickness_range[0] + cols[1][i] * (cfg.thickness_range[1] - cfg.thickness_range[0]),
                      cfg.sweep_range[0] + cols[2][i] * (cfg.sweep_range[1] - cfg.sweep_range[0]))
            for i in range(n)]


def wing_surface_coords(mesh: Mesh, shape: WingShape) -> tuple[np.ndarray, np.ndarray]:
    """Normalized chordwise position xi in [0, 1] and span fraction eta."""
    V = mesh.vertices
    eta = np.clip(V[:, 2] / shape.span, 0.0, 1.0)
    c = shape.root_chord * (1.0 - (1.0 - shape.taper) * eta)
    x_le = eta * shape.span * np.tan(np.radians(shape.sweep))
    xi = np.clip((V[:, 0] - x_le) / c, 0.0, 1.0)
    return xi, eta


def wing_field(mesh: Mesh, normals: np.ndarray, shape: WingShape, mu, cfg: Wing3DConfig) -> np.ndarray:
    """Pressure-like surface field; front on the upper surface moves with Mach and shape."""
    xi, eta = wing_surface_coords(mesh, shape)
    m = _unit(mu[0], cfg.mach_range)
    a = _unit(mu[1], cfg.alpha_range)
    dl = mu[2] / max(abs(cfg.aileron_range[0]), abs(cfg.aileron_range[1]))
    t = _unit(shape.thickness, cfg.thickness_range)
    sw = _unit(shape.sweep, cfg.sweep_range)
    ny = normals[:, 1]
    upper = 0.5 * (1.0 + np.tanh(ny / 0.1))
    base = -(0.4 + 0.6 * a) * (1.0 - xi) * ny - 0.3 * np.exp(-xi / 0.05)
    xs = 0.25 + 0.35 * m + 0.15 * t - 0.15 * sw + 0.1 * eta
    front = -(0.6 + 0.6 * m) * upper * 0.5 * (1.0 + np.tanh((xs - xi) / cfg.front_width))
    aileron = 0.4 * dl * ny * np.clip((eta - 0.6) / 0.4, 0.0, 1.0) * np.clip((xi - 0.7) / 0.3, 0.0, 1.0)
    return base + front + aileron


def gen_wing_3d(cfg: Wing3DConfig | None = None) -> Dataset:
    """``n_shapes x n_conditions`` samples; meshes are unit-sphere normalized."""
    cfg = cfg or Wing3DConfig()
    shapes = wing_shapes(cfg)
    rng = np.random.default_rng(cfg.seed + 1)
    samples = []
    for s_idx, shape in enumerate(shapes):
        sid = f"w{s_idx:03d}"
        raw = wing_mesh(shape, cfg.n_section, cfg.n_span)
        normals, _ = vertex_normals(raw)
        mesh_n, _ = normalize_to_unit_sphere(raw)
        mesh_n = replace(mesh_n, normals=normals)
        cloud = sample_sdf_cloud(mesh_n, cfg.sdf_points, cfg.sdf_uniform_fraction, cfg.sdf_sigmas,
                                 seed=cfg.seed * 1000 + s_idx, shape_id=sid)
        for c in range(cfg.n_conditions):
            mu = np.array([rng.uniform(*cfg.mach_range), rng.uniform(*cfg.alpha_range),
                           rng.uniform(*cfg.aileron_range), cfg.reynolds])
            u = wing_field(raw, normals, shape, mu, cfg)
            samples.append(FieldSample(f"{sid}_c{c:02d}", sid, mesh_n, mu, u[:, None], cloud))
    return Dataset(samples, ["cp"], ["mach", "alpha", "aileron", "reynolds"])
