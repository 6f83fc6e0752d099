"""Acceptance criteria, one test each.

Every test prints a single ``PASS``/``FAIL`` line with its measured values
and runtime straight to the terminal, then asserts.
"""
from __future__ import annotations

import time

import numpy as np
import pytest

from aeroinr import cli, synth
from aeroinr import pipelines as P
from aeroinr.data import split_dataset
from aeroinr.encoding import MultiscaleEncoder
from aeroinr.geometry import MeshQuery, icosphere
from aeroinr.neuralfield import Hypernetwork, NeuralField
from aeroinr.podgpr import fit_gpr, fit_pod, fit_pod_gpr, pod_gpr_predict, project, reconstruct
from aeroinr.studies import (DiscretizationStudyConfig, SigmaStudyConfig, run_discretization_study,
                             run_sigma_study)
from aeroinr.tensorcore import const, grad_through_inner_loop, value_and_grad


@pytest.fixture
def report(capsys):
    def emit(n: int, ok: bool, detail: str, t0: float):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {detail} [{time.perf_counter() - t0:.1f}s]")
        return ok
    return emit


def _fd(f, arrays, eps):
    out = []
    for a in arrays:
        g = np.zeros_like(a)
        for i in np.ndindex(a.shape):
            old = a[i]
            a[i] = old + eps
            fp = f()
            a[i] = old - eps
            fm = f()
            a[i] = old
            g[i] = (fp - fm) / (2 * eps)
        out.append(g)
    return out


def _rel(g, fd):
    # max error relative to the array's gradient scale; all-zero gradients must match exactly
    scale = np.max(np.abs(fd))
    err = np.max(np.abs(g - fd))
    return err / scale if scale > 0 else err


def _random_modulated(rng):
    L, h, M = int(rng.integers(1, 4)), int(rng.integers(2, 9)), int(rng.integers(1, 3))
    d, d_z = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    enc = MultiscaleEncoder.from_sigmas(int(rng.integers(1, 4)), d, [1.0, 3.0][:M], int(rng.integers(1e6)))
    nf = NeuralField.init(enc, (h,) * L, d_u=int(rng.integers(1, 3)), seed=int(rng.integers(1e6)))
    nf = nf.with_params([rng.normal(scale=0.6, size=a.shape) for a in nf.param_list()])
    hyper = Hypernetwork.init(d_z, nf.widths, hidden=(int(rng.integers(2, 6)),), seed=int(rng.integers(1e6)))
    hyper = hyper.with_params([rng.normal(scale=0.6, size=a.shape) for a in hyper.param_list()])
    X = rng.uniform(-1, 1, size=(6, d))
    U = rng.normal(size=(6, nf.d_u))
    z = rng.normal(size=(1, d_z))
    return nf, hyper, X, U, z


def test_criterion_1_gradients_match_finite_differences(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(50):
        nf, hyper, X, U, z = _random_modulated(rng)
        enc = nf.encode(X)
        n_t, n_h = len(nf.params), len(hyper.params)

        def loss(*ts):
            phis = hyper.apply(hyper.tensors(ts[n_t:n_t + n_h]), ts[-1])
            return (nf.apply(nf.tensors(ts[:n_t]), enc, phis) - U).sum_sq()

        arrays = [a.copy() for a in nf.param_list() + hyper.param_list()] + [z]
        _, grads = value_and_grad(loss, arrays)
        fd = _fd(lambda: float(loss(*map(const, arrays)).data), arrays, 1e-6)
        worst = max(worst, max(_rel(g, f) for g, f in zip(grads, fd)))
    ok = worst < 1e-6 and time.perf_counter() - t0 < 30
    report(1, ok, f"50 networks, max rel err {worst:.2e} (< 1e-6)", t0)
    assert ok


def test_criterion_2_second_order_inner_loop(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    enc_m = P.EncoderModel.init("output", d_z=3, widths=(8,), n_freqs=3, sigmas=(1.0, 3.0), d_x=2,
                                use_normals=False, inner_steps=3, inner_lr=0.3, seed=3)
    X, U = [rng.uniform(-1, 1, size=(10, 2)) for _ in range(2)], [rng.normal(size=(10, 1)) for _ in range(2)]
    loss = P._latent_loss(enc_m, X, U)
    params = [a.copy() for a in enc_m.field.param_list() + enc_m.hyper.param_list()]
    z0 = np.zeros((2, 3))
    _, g2, _ = grad_through_inner_loop(loss, 3, 0.3, params, z0)
    _, g1, _ = grad_through_inner_loop(loss, 3, 0.3, params, z0, first_order=True)

    def unrolled():
        z = z0.copy()
        for _ in range(3):
            _, (gz,) = value_and_grad(lambda zt: loss(*map(const, params), zt), [z])
            z = z - 0.3 * gz
        return float(loss(*map(const, params), const(z)).data)

    fd = _fd(unrolled, params, 1e-6)
    flat = lambda gs: np.concatenate([g.ravel() for g in gs])
    err2 = np.max(np.abs(flat(g2) - flat(fd))) / np.max(np.abs(flat(fd)))
    err1 = np.max(np.abs(flat(g1) - flat(fd))) / np.max(np.abs(flat(fd)))
    ok = err2 < 1e-4 and err1 > 1e-3 and time.perf_counter() - t0 < 60
    report(2, ok, f"second-order rel err {err2:.2e} (< 1e-4), first-order {err1:.2e} (> 1e-3)", t0)
    assert ok


@pytest.mark.slow
def test_criterion_3_multiscale_sigma_study(report):
    t0 = time.perf_counter()
    rows, s = run_sigma_study(SigmaStudyConfig())
    per = s["per_replicate"]
    wins = sum(1 for v in per.values() if v["mse_ratio"] <= 1.1 and v["hf_ratio"] >= 2.0)
    ok = s["mse_ratio"] <= 1.1 and s["hf_ratio"] >= 2.0 and time.perf_counter() - t0 < 600
    report(3, ok, f"median MSE ratio {s['mse_ratio']:.3f} (<= 1.1), median HF ratio {s['hf_ratio']:.2f} "
                  f"(>= 2); both hold in {wins}/{len(per)} replicates", t0)
    assert ok


@pytest.mark.slow
def test_criterion_4_discretization_invariance(report):
    t0 = time.perf_counter()
    cfg = DiscretizationStudyConfig(train_resolutions=(300,), eval_resolutions=(300, "full"), epochs=100)
    rows, s = run_discretization_study(cfg)
    ratio = s["ratios"]["300"]
    ok = abs(ratio - 1.0) <= 0.25 and s["shared_points_identical"] and time.perf_counter() - t0 < 1200
    mse = {r["eval_resolution"]: r["test_mse"] for r in rows}
    report(4, ok, f"trained at 300/3000 nodes: MSE {mse['300']:.4g} at 300, {mse['full']:.4g} at full, "
                  f"ratio {ratio:.3f} (within 25%); shared points identical: {s['shared_points_identical']}", t0)
    assert ok


# Desk-scale encode-process-decode setup. Coordinates are standardized per axis, which
# stretches the thin thickness direction of the wings roughly tenfold, so the Fourier
# scales sit well below the full-size defaults.
EPD = dict(n_shapes=24, n_conditions=8, d_z_in=16, d_z_out=32, widths=(64,) * 3, n_freqs=32,
           sigmas_in=(0.25,), sigmas_out=(0.1,), epochs_in=200, epochs_out=150, epochs_proc=1000,
           lr=1e-3, lr_proc=1e-3, res_in=1000, res_out=300)


@pytest.mark.slow
def test_criterion_5_encode_process_decode(report):
    t0 = time.perf_counter()
    c = EPD
    n = c["n_shapes"]
    ds = synth.gen_wing_3d(synth.Wing3DConfig(n_shapes=n, n_conditions=c["n_conditions"],
                                              sdf_points=20000))
    tr, va, te = split_dataset(ds, ((n - 6) / n, 2 / n, 4 / n), seed=0, mode="by-shape")
    ei = P.EncoderModel.init("input", d_z=c["d_z_in"], widths=c["widths"], n_freqs=c["n_freqs"],
                             sigmas=c["sigmas_in"], seed=0)
    eo = P.EncoderModel.init("output", d_z=c["d_z_out"], widths=c["widths"], n_freqs=c["n_freqs"],
                             sigmas=c["sigmas_out"], seed=1)
    clouds = [cl for _, cl in sorted(tr.sdf_by_shape().items())]
    ei, _ = P.train_encoder(clouds, ei, P.TrainConfig.encoder(
        "input", epochs=c["epochs_in"], lr=c["lr"], train_res=c["res_in"], batch_size=8, schedule="cosine"))
    eo, _ = P.train_encoder(tr.samples, eo, P.TrainConfig.encoder(
        "output", epochs=c["epochs_out"], lr=c["lr"], train_res=c["res_out"], batch_size=16, schedule="cosine"))
    cache = P.GeometryLatentCache()
    lt, lv = P.encode_dataset(ei, eo, tr, cache), P.encode_dataset(ei, eo, va, cache)
    pr = P.Processor.init(ei.d_z, ds.d_p, eo.d_z, hidden=(64, 64, 64))
    pr, _ = P.train_processor(lt, pr, P.TrainConfig.processor(
        epochs=c["epochs_proc"], lr=c["lr_proc"], batch_size=32, patience=200), lv)
    model = P.EncodeProcessDecode(ei, eo, pr, cache)
    m_tr = float(np.mean([model.sample_mse(s) for s in tr]))
    m_te = float(np.mean([model.sample_mse(s) for s in te]))
    # standardized target variance on the test shapes (1 by construction on train)
    var_te = float(np.var(np.concatenate([eo.normalizer.normalize("fields", s.values) for s in te])))
    s = te.samples[0]
    cached = model.predict(s.sdf, s.mu, s.coords, s.mesh.normals)
    fresh = P.predict(ei, pr, eo, s.sdf, s.mu, s.coords, s.mesh.normals)
    same = bool(np.array_equal(cached, fresh)) and cache.hits > 0
    elapsed = time.perf_counter() - t0
    ok = m_te <= 3 * m_tr and m_te <= 0.5 * var_te and same and elapsed < 45 * 60
    report(5, ok, f"{len(te.shape_ids())} unseen shapes: test MSE {m_te:.4f}, train MSE {m_tr:.4f} "
                  f"(ratio {m_te / m_tr:.2f} <= 3), target variance {var_te:.3f} (test <= half); "
                  f"cache equals fresh inference: {same}", t0)
    assert ok


def test_criterion_6_sdf_oracle(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(6)
    q = MeshQuery(icosphere(4))
    p = rng.uniform(-1.5, 1.5, size=(10_000, 3))
    err = float(np.max(np.abs(q.signed(p) - (np.linalg.norm(p, axis=1) - 1.0))))

    def shell(r_lo, r_hi, n):
        d = rng.normal(size=(n, 3))
        return d / np.linalg.norm(d, axis=1, keepdims=True) * rng.uniform(r_lo, r_hi, size=(n, 1))

    inside = q.signed(shell(0.0, 0.95, 1000)) < 0
    outside = q.signed(shell(1.05, 3.0, 1000)) > 0
    agree = (inside.sum() + outside.sum()) / 2000
    ok = err < 2e-3 and agree == 1.0 and time.perf_counter() - t0 < 60
    report(6, ok, f"max |sdf error| {err:.2e} (< 2e-3), sign agreement {agree:.1%}", t0)
    assert ok


@pytest.mark.slow
def test_criterion_7_pod_gpr(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(8)
    S = rng.normal(size=(20, 5)) @ rng.normal(size=(5, 400)) + rng.normal(size=400)
    b = fit_pod(S, r=5)
    rec_err = float(np.max(np.abs(reconstruct(b, project(b, S)) - S)))
    S2 = rng.normal(size=(25, 300))
    b2 = fit_pod(S2, r=10)
    U, sv, _ = np.linalg.svd((S2 - S2.mean(0)).T, full_matrices=False)
    svd_err = max(float(np.max(np.abs(b2.modes @ b2.modes.T - U[:, :10] @ U[:, :10].T))),
                  float(np.max(np.abs(b2.singular_values - sv[:10]) / sv[0])))
    mu = rng.uniform(-1, 1, size=(20, 2))
    y = np.sin(2 * mu[:, 0]) * np.cos(mu[:, 1])
    gp_err = float(np.max(np.abs(fit_gpr(mu, y, restarts=3, noise=1e-10).predict(mu)[:, 0] - y)))

    cfg = synth.Airfoil2DConfig()
    ds = synth.gen_airfoil_2d(cfg)
    tr, _, te = split_dataset(ds, (0.7, 0.1, 0.2), seed=0)
    model = fit_pod_gpr(np.stack([s.mu for s in tr]), np.stack([s.values[:, 0] for s in tr]), r=20, restarts=3)
    x = ds.samples[0].coords[:, 0]
    near = []
    for s in te:
        pred = pod_gpr_predict(model.basis, model.gpr, s.mu)[0]
        worst = int(np.argmax(np.abs(pred - s.values[:, 0])))
        near.append(abs(x[worst] - synth.front_position(s.mu, cfg)) <= 2 * cfg.shock_width)
    frac = float(np.mean(near))
    ok = rec_err < 1e-10 and svd_err < 1e-9 and gp_err < 1e-6 and frac >= 0.8 and time.perf_counter() - t0 < 600
    report(7, ok, f"POD reconstruction {rec_err:.1e} (< 1e-10), vs dense SVD {svd_err:.1e} (< 1e-9), "
                  f"GP at training inputs {gp_err:.1e} (< 1e-6), max error near the front in "
                  f"{frac:.0%} of {len(te)} test samples (>= 80%)", t0)
    assert ok


@pytest.mark.slow
def test_criterion_8_study_reproducibility(report, tmp_path):
    t0 = time.perf_counter()
    commands = {
        "sigma": ["study", "sigma", "--steps", "200", "--replicates", "2"],
        "discretization": ["study", "discretization", "--resolutions", "300,full", "--epochs", "5",
                           "--n-samples", "40"],
    }
    same = {}
    for name, args in commands.items():
        outs = []
        for k in range(2):
            d = tmp_path / f"{name}{k}"
            assert cli.main(args + ["--threads", "1", "--out-dir", str(d)]) == 0
            outs.append((d / f"{name}.csv").read_bytes())
        same[name] = outs[0] == outs[1]
    ok = all(same.values())
    report(8, ok, "bitwise-identical reruns: " + ", ".join(f"{k} {v}" for k, v in same.items()), t0)
    assert ok
