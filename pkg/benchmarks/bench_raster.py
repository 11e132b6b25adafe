"""Time the compiled and numpy blending kernels on the same splats.

    python benchmarks/bench_raster.py [--gaussians 200] [--size 64] [--repeat 5]

Reports the best-of-N wall time of forward and backward for each backend
and checks that both produce the same image and gradients.
"""

import argparse
import time

import numpy as np

from hdrsplat import renderer
from hdrsplat.evalgen import SyntheticSpec, random_scene, ring_cameras


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def run(n_gaussians, size, repeat):
    spec = SyntheticSpec(n_gaussians=n_gaussians, width=size, height=size, focal=size * 1.25)
    scene = random_scene(spec, np.random.default_rng(0))
    cam = ring_cameras(spec)[0]
    g_image = np.random.default_rng(1).normal(size=(size, size, 3))
    results = {}
    for backend in renderer.AVAILABLE_BACKENDS:
        splats = renderer.project(scene, cam)

        def fwd():
            return renderer.rasterize(splats, cam, backend=backend)

        image = fwd()
        t_fwd = best_of(fwd, repeat)
        fwd()
        grads = renderer.rasterize_backward(splats, cam, g_image)
        t_bwd = best_of(lambda: renderer.rasterize_backward(splats, cam, g_image), repeat)
        results[backend] = (t_fwd, t_bwd, image, grads)
    print(f"{n_gaussians} Gaussians, {size}x{size} pixels, best of {repeat}")
    print(f"{'backend':<10}{'forward ms':>12}{'backward ms':>13}")
    for backend, (t_fwd, t_bwd, _, _) in results.items():
        print(f"{backend:<10}{t_fwd * 1e3:>12.2f}{t_bwd * 1e3:>13.2f}")
    if "compiled" in results:
        py, cc = results["python"], results["compiled"]
        print(f"speedup   {py[0] / cc[0]:>12.1f}x{py[1] / cc[1]:>12.1f}x")
        img_err = float(np.max(np.abs(py[2] - cc[2])))
        grad_err = float(np.max(np.abs(py[3].color - cc[3].color)))
        print(f"max |image diff| {img_err:.2e}, max |color grad diff| {grad_err:.2e}")
    else:
        print("compiled kernels not built; only the numpy fallback was timed")
    return results


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--gaussians", type=int, default=200)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--repeat", type=int, default=5)
    a = p.parse_args()
    run(a.gaussians, a.size, a.repeat)


if __name__ == "__main__":
    main()
