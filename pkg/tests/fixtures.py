"""Seeded fixtures shared by the training and acceptance tests.

Desk-scale training runs are cached per session so the acceptance
criteria and the training tests reuse the same measured runs.
"""

import functools
import time

import numpy as np

from hdrsplat.evalgen import SyntheticSpec, baseline_report, evaluate_model, generate
from hdrsplat.imaging import CurveDatabase, ResponseCurve, select_crf
from hdrsplat.renderer import Camera
from hdrsplat.scene import ColorDomain, GaussianSet
from hdrsplat.training import TrainConfig, View, batch_loss_and_grads, init_model, train

PROBE_INDEX = 0


@functools.lru_cache(maxsize=None)
def desk_data(spec: SyntheticSpec = SyntheticSpec()):
    """Synthetic captures, training views and the curve picked from the probe view."""
    syn = generate(spec)
    views = [View(syn.cameras[i], syn.ldr[i], spec.exposure, syn.hdr[i]) for i in spec.train_indices]
    curve = select_crf(CurveDatabase.builtin(), views[PROBE_INDEX].ldr)
    return syn, views, curve


@functools.lru_cache(maxsize=None)
def desk_run(beta: float = 0.5, iterations: int = 2000, spec: SyntheticSpec = SyntheticSpec()):
    """Train on the desk fixture and score the held-out views; returns a dict of measurements."""
    syn, views, curve = desk_data(spec)
    config = TrainConfig(iterations=iterations, beta=beta, seed=spec.seed)
    rows = []
    t0 = time.perf_counter()
    ck = train(config, views, syn.scene, curve, log_rows=rows)
    seconds = time.perf_counter() - t0
    cams = [syn.cameras[i] for i in spec.test_indices]
    refs = [syn.hdr[i] for i in spec.test_indices]
    report = evaluate_model(ck.model, cams, refs, views=spec.test_indices)
    base = baseline_report(ck.model, cams, refs, views=spec.test_indices)
    init = init_model(syn.scene, curve, spec.exposure, config, views)
    ldr_init = batch_loss_and_grads(init, views, config, need_grad=False)[0].ldr
    ldr_final = batch_loss_and_grads(ck.model, views, config, need_grad=False)[0].ldr
    return {
        "checkpoint": ck,
        "rows": rows,
        "seconds": seconds,
        "psnr": report.mean_psnr,
        "ssim": report.mean_ssim,
        "baseline_psnr": base.mean_psnr,
        "ldr_init": ldr_init,
        "ldr_final": ldr_final,
        "curve": curve.name,
    }


# the sampled curve is dense so that a +-1e-4 step never straddles one of its knots
SMOOTH_CURVE_SAMPLES = 2**20 + 1


@functools.lru_cache(maxsize=None)
def smooth_curve(samples: int = SMOOTH_CURVE_SAMPLES) -> ResponseCurve:
    return ResponseCurve.from_function("sigmoid-6", lambda x: 1 / (1 + np.exp(-6 * (x - 0.5))), samples)


def gradient_fixture(seed: int = 0, curve: ResponseCurve | None = None, detach_hdr: bool = False, beta: float = 0.5):
    """5 Gaussians, 3 exposures, one 16x16 view.

    Base DC radiance is drawn above the fused range so the linear term's
    L1 sign is fixed; opacity logits span partial to high coverage.
    """
    rng = np.random.default_rng(seed)
    n = 5
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    geo = GaussianSet(rng.uniform(-0.5, 0.5, (n, 3)), rng.uniform(0.2, 0.4, (n, 3)), q, np.zeros(n),
                      np.ones((n, 4, 3)), 1, ColorDomain.LINEAR_HDR, 0.0)
    cam = Camera.look_at([0, 0, -3], [0, 0, 0], [0, 1, 0], 24, 16, 16)
    config = TrainConfig(detach_hdr=detach_hdr, beta=beta, seed=seed)
    model = init_model(geo, curve or smooth_curve(), 1.0, config)
    lin = np.empty(model.log_radiance.shape)
    lin[:, 0] = rng.uniform(1.6, 2.8, (n, 3))
    lin[:, 1:] = rng.uniform(0.02, 0.08, (n, 3, 3))
    model.log_radiance[:] = np.log(lin)
    model.geometry.opacity_logits[:] = rng.uniform(-1, 2, n)
    view = View(cam, rng.uniform(0, 1, (16, 16, 3)), 1.0)
    return model, view, config


def finite_difference_errors(model, view, config, loss_fn, h=1e-4, floor=1e-6):
    """Max relative error per parameter array between ``loss_fn`` gradients and central differences.

    ``floor`` bounds the denominator for entries whose gradient is near zero.
    """
    _, grads = loss_fn(model, view, config)
    worst = []
    for arr, grad in zip(model.param_arrays(), grads.arrays()):
        err = 0.0
        for i in np.ndindex(arr.shape):
            old = arr[i]
            arr[i] = old + h
            up = loss_fn(model, view, config, need_grad=False)[0].total
            arr[i] = old - h
            down = loss_fn(model, view, config, need_grad=False)[0].total
            arr[i] = old
            num = (up - down) / (2 * h)
            err = max(err, abs(num - grad[i]) / max(abs(num), abs(grad[i]), floor))
        worst.append(err)
    return worst
