"""Executable verification: independent oracles and named invariant checks.

The naive evaluator below restates the operator as a straight-line
triple loop with its own inline weight formulas. It shares only type
definitions with the fast path, never helper code, so agreement between
the two is meaningful evidence.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .geometry import PointSet, build_index, farthest_point_sample
from .interpconv import InterpConvParams, dense_grid_conv_oracle, plan, query_radius
from .interpconv import backward as op_backward
from .interpconv import forward as op_forward
from .kernel import (
    BY_COUNT,
    BY_WEIGHT_SUM,
    GAUSSIAN,
    TRILINEAR,
    build_layout,
    gaussian_weight,
)
from .tensor import Tensor


def naive_interpconv(
    inputs: PointSet, output_coords: np.ndarray, params: InterpConvParams
) -> Tensor:
    """Unoptimized restatement of the operator over all points.

    O(outputs * sites * points); no spatial index, no cached plan.
    """
    coords = inputs.coords
    features = inputs.features.values
    layout = params.layout
    w = params.weights.values
    c_out = w.shape[0]
    output_coords = np.atleast_2d(np.asarray(output_coords, dtype=np.float64))
    out = np.zeros((len(output_coords), c_out), dtype=np.float64)
    for m, center in enumerate(output_coords):
        for s, site in enumerate(layout.coords):
            num = np.zeros(features.shape[1], dtype=np.float64)
            weight_sum = 0.0
            count = 0
            for i in range(len(coords)):
                delta = coords[i] - center
                if layout.interpolation == TRILINEAR:
                    t = 1.0
                    for axis in range(3):
                        t *= max(0.0, 1.0 - abs(delta[axis] - site[axis]) / layout.spacing)
                else:
                    d2 = 0.0
                    for axis in range(3):
                        d2 += (delta[axis] - site[axis]) ** 2
                    if d2 > (3.0 * layout.sigma) ** 2:
                        t = 0.0
                    else:
                        t = math.exp(-d2 / (2.0 * layout.sigma**2))
                if t > 0.0:
                    num += t * features[i]
                    weight_sum += t
                    count += 1
            if count == 0:
                continue
            denom = float(count) if layout.normalization == BY_COUNT else weight_sum
            if denom == 0.0:
                continue
            out[m] += w[:, s, :] @ (num / denom)
    if params.bias is not None:
        out += params.bias.values
    return Tensor(out)


def finite_difference_gradient(
    f: Callable[[np.ndarray], float], x: np.ndarray, step: float = 1e-4
) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat array."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + step
        fp = f(x)
        flat[j] = orig - step
        fm = f(x)
        flat[j] = orig
        gflat[j] = (fp - fm) / (2.0 * step)
    return grad


def relative_error(actual: np.ndarray, expected: np.ndarray) -> float:
    """max |a - e| / max(1, |e|), elementwise."""
    actual = np.asarray(actual, dtype=np.float64)
    expected = np.asarray(expected, dtype=np.float64)
    return float(np.max(np.abs(actual - expected) / np.maximum(1.0, np.abs(expected))))


# ---------------------------------------------------------------------------
# Named invariant checks
# ---------------------------------------------------------------------------


@dataclass
class CheckReport:
    name: str
    status: str  # "pass" | "fail"
    measured: float
    tolerance: float
    seed: int
    seconds: float
    detail: str = ""

    @property
    def passed(self) -> bool:
        return self.status == "pass"


def _random_instance(rng: np.random.Generator, n_points=24, c_in=3, c_out=4,
                     size=3, interpolation=GAUSSIAN, normalization=BY_WEIGHT_SUM,
                     spacing=0.25, with_bias=True):
    coords = rng.uniform(-1, 1, size=(n_points, 3))
    features = Tensor(rng.standard_normal((n_points, c_in)), requires_grad=True)
    cloud = PointSet(coords, features)
    sigma = spacing / 2.0 if interpolation == GAUSSIAN else None
    layout = build_layout(size, spacing, interpolation, normalization, sigma=sigma)
    weights = Tensor(rng.standard_normal((c_out, layout.n_sites, c_in)), requires_grad=True)
    bias = Tensor(rng.standard_normal(c_out), requires_grad=True) if with_bias else None
    params = InterpConvParams(layout, weights, bias)
    n_out = max(1, n_points // 2)
    out_coords = coords[rng.choice(n_points, size=n_out, replace=False)]
    return cloud, out_coords, params


def _planned(cloud, out_coords, params):
    index = build_index(cloud, query_radius(params.layout))
    return plan(cloud, out_coords, params, index)


def _check(name, fn, seed, tolerance):
    start = time.perf_counter()
    try:
        measured = float(fn())
        status = "pass" if measured <= tolerance else "fail"
        detail = "" if status == "pass" else f"measured {measured:.3e} > tolerance {tolerance:.1e}"
    except Exception as exc:  # a crash is a failure, not an abort
        measured = float("nan")
        status = "fail"
        detail = f"{type(exc).__name__}: {exc}"
    return CheckReport(name, status, measured, tolerance, seed, time.perf_counter() - start, detail)


def check_forward_vs_naive(seed: int = 0, instances: int = 20) -> CheckReport:
    def run():
        rng = np.random.default_rng(seed)
        worst = 0.0
        for k in range(instances):
            interp = TRILINEAR if k % 2 == 0 else GAUSSIAN
            norm = BY_COUNT if k % 4 < 2 else BY_WEIGHT_SUM
            size = (1, 3, 5)[k % 3]
            cloud, out_coords, params = _random_instance(
                rng, n_points=int(rng.integers(4, 40)), c_in=int(rng.integers(1, 5)),
                c_out=int(rng.integers(1, 5)), size=size,
                interpolation=interp, normalization=norm,
                spacing=float(rng.uniform(0.15, 0.5)))
            fast = op_forward(cloud, out_coords, params, _planned(cloud, out_coords, params))
            slow = naive_interpconv(cloud, out_coords, params)
            worst = max(worst, float(np.max(np.abs(fast.values - slow.values))))
        return worst

    return _check("forward_vs_naive", run, seed, 1e-12)


def check_permutation_invariance(seed: int = 1) -> CheckReport:
    def run():
        rng = np.random.default_rng(seed)
        cloud, out_coords, params = _random_instance(rng, n_points=40)
        base = op_forward(cloud, out_coords, params, _planned(cloud, out_coords, params)).values
        worst = 0.0
        for _ in range(5):
            perm = rng.permutation(len(cloud))
            shuffled = PointSet(cloud.coords[perm], Tensor(cloud.features.values[perm]))
            got = op_forward(shuffled, out_coords, params,
                             _planned(shuffled, out_coords, params)).values
            worst = max(worst, float(np.max(np.abs(got - base))))
        return worst

    return _check("permutation_invariance", run, seed, 1e-12)


def check_duplication_invariance(normalization: str, seed: int = 2) -> CheckReport:
    def run():
        rng = np.random.default_rng(seed)
        worst = 0.0
        for dup in (2, 4):
            cloud, out_coords, params = _random_instance(
                rng, n_points=24, normalization=normalization)
            base = op_forward(cloud, out_coords, params,
                              _planned(cloud, out_coords, params)).values
            coords = np.repeat(cloud.coords, dup, axis=0)
            feats = Tensor(np.repeat(cloud.features.values, dup, axis=0))
            doubled = PointSet(coords, feats)
            got = op_forward(doubled, out_coords, params,
                             _planned(doubled, out_coords, params)).values
            worst = max(worst, float(np.max(np.abs(got - base))))
        return worst

    return _check(f"duplication_invariance_{normalization}", run, seed, 1e-10)


def check_translation_equivariance(seed: int = 3) -> CheckReport:
    def run():
        rng = np.random.default_rng(seed)
        cloud, out_coords, params = _random_instance(rng)
        base = op_forward(cloud, out_coords, params, _planned(cloud, out_coords, params)).values
        shift = rng.uniform(-5, 5, size=3)
        moved = PointSet(cloud.coords + shift, cloud.features)
        got = op_forward(moved, out_coords + shift, params,
                         _planned(moved, out_coords + shift, params)).values
        return float(np.max(np.abs(got - base)))

    return _check("translation_equivariance", run, seed, 1e-12)


def check_linearity(seed: int = 4) -> CheckReport:
    def run():
        rng = np.random.default_rng(seed)
        cloud, out_coords, params = _random_instance(rng, with_bias=False)
        f1 = cloud.features.values
        f2 = rng.standard_normal(f1.shape)
        a, b = 0.7, -1.3
        plan_ = _planned(cloud, out_coords, params)

        def ev(f):
            return op_forward(PointSet(cloud.coords, Tensor(f)), out_coords, params, plan_).values

        lhs = ev(a * f1 + b * f2)
        rhs = a * ev(f1) + b * ev(f2)
        return float(np.max(np.abs(lhs - rhs)))

    return _check("linearity_in_features", run, seed, 1e-10)


def check_trilinear_partition_of_unity(seed: int = 5, samples: int = 10_000) -> CheckReport:
    def run():
        rng = np.random.default_rng(seed)
        layout = build_layout(3, 0.3, TRILINEAR, BY_WEIGHT_SUM)
        half = (layout.size - 1) / 2 * layout.spacing
        pts = rng.uniform(-half * 0.999, half * 0.999, size=(samples, 3))
        worst = 0.0
        for chunk in np.array_split(pts, 20):
            offs = chunk[:, None, :] - layout.coords[None, :, :]
            w = np.prod(np.maximum(0.0, 1.0 - np.abs(offs) / layout.spacing), axis=-1)
            worst = max(worst, float(np.max(np.abs(w.sum(axis=1) - 1.0))))
        return worst

    return _check("trilinear_partition_of_unity", run, seed, 1e-12)


def check_gaussian_truncation(seed: int = 6) -> CheckReport:
    def run():
        sigma = 0.1
        at_sigma = gaussian_weight((sigma, 0, 0), (0, 0, 0), sigma)
        err = abs(at_sigma - math.exp(-0.5))
        beyond = gaussian_weight((3.0001 * sigma, 0, 0), (0, 0, 0), sigma)
        err = max(err, abs(beyond))
        inside = gaussian_weight((2.999 * sigma, 0, 0), (0, 0, 0), sigma)
        err = max(err, 0.0 if inside > 0 else 1.0)
        return err

    return _check("gaussian_truncation", run, seed, 1e-12)


def check_grid_equivalence(seed: int = 7, dim: int = 6) -> CheckReport:
    def run():
        rng = np.random.default_rng(seed)
        spacing = 0.2
        c_in, c_out = 2, 3
        layout = build_layout(3, spacing, TRILINEAR, BY_WEIGHT_SUM)
        grid_feats = rng.standard_normal((dim, dim, dim, c_in))
        axes = np.arange(dim, dtype=np.float64) * spacing
        coords = np.array([(x, y, z) for x in axes for y in axes for z in axes])
        feats = grid_feats.reshape(-1, c_in)
        cloud = PointSet(coords, Tensor(feats))
        weights = Tensor(rng.standard_normal((c_out, layout.n_sites, c_in)))
        params = InterpConvParams(layout, weights, None)
        got = op_forward(cloud, coords, params, _planned(cloud, coords, params)).values
        expected = dense_grid_conv_oracle(grid_feats, weights).reshape(-1, c_out)
        interior = np.all((coords >= spacing * 0.5) & (coords <= axes[-1] - spacing * 0.5), axis=1)
        return float(np.max(np.abs(got[interior] - expected[interior])))

    return _check("grid_equivalence", run, seed, 1e-10)


def check_op_gradients(which: str, seed: int = 8, instances: int = 3) -> CheckReport:
    def run():
        rng = np.random.default_rng(seed)
        worst = 0.0
        for k in range(instances):
            interp = TRILINEAR if k % 2 == 0 else GAUSSIAN
            cloud, out_coords, params = _random_instance(
                rng, n_points=10, c_in=2, c_out=2, interpolation=interp, spacing=0.4)
            plan_ = _planned(cloud, out_coords, params)
            proj = rng.standard_normal((len(out_coords), params.c_out))

            def loss_from(features_arr, weights_arr, bias_arr):
                p = InterpConvParams(params.layout, Tensor(weights_arr), Tensor(bias_arr))
                c = PointSet(cloud.coords, Tensor(features_arr))
                return float(np.sum(op_forward(c, out_coords, p, plan_).values * proj))

            grads = op_backward(proj, {"inputs": cloud, "plan": plan_, "params": params})
            f0 = cloud.features.values
            w0 = params.weights.values
            b0 = params.bias.values
            if which == "features":
                fd = finite_difference_gradient(lambda f: loss_from(f, w0, b0), f0.copy())
                worst = max(worst, relative_error(grads["grad_features"].values, fd))
            elif which == "weights":
                fd = finite_difference_gradient(lambda w: loss_from(f0, w, b0), w0.copy())
                worst = max(worst, relative_error(grads["grad_weights"].values, fd))
            else:
                fd = finite_difference_gradient(lambda b: loss_from(f0, w0, b), b0.copy())
                worst = max(worst, relative_error(grads["grad_bias"].values, fd))
        return worst

    return _check(f"grad_{which}_finite_difference", run, seed, 1e-4)


def check_resampling_robustness(seed: int = 13) -> CheckReport:
    """Regression metric, not a hard invariant: the perturbation from
    halving the sampling density of a smooth surface must shrink as the
    density grows. Reports the ratio of mean perturbations at 4x vs 1x
    density; below 1 means the expected trend holds."""

    def halving_delta(rng, n, params, layout):
        directions = rng.standard_normal((n, 3))
        coords = directions / np.linalg.norm(directions, axis=1, keepdims=True)
        features = np.ones((n, 1))
        out_coords = coords[: n // 8]
        dense = PointSet(coords, Tensor(features))
        sparse = PointSet(coords[::2], Tensor(features[::2]))
        full = op_forward(dense, out_coords, params, _planned(dense, out_coords, params))
        half = op_forward(sparse, out_coords, params, _planned(sparse, out_coords, params))
        return float(np.mean(np.abs(full.values - half.values)))

    def run():
        rng = np.random.default_rng(seed)
        layout = build_layout(3, 0.4, TRILINEAR, BY_WEIGHT_SUM)
        weights = Tensor(rng.standard_normal((2, layout.n_sites, 1)))
        params = InterpConvParams(layout, weights, None)
        coarse = np.mean([halving_delta(rng, 512, params, layout) for _ in range(2)])
        fine = np.mean([halving_delta(rng, 2048, params, layout) for _ in range(2)])
        return fine / coarse

    return _check("resampling_robustness", run, seed, 1.0)


def check_radius_query_brute_force(seed: int = 9, n_points: int = 2000,
                                   queries: int = 50) -> CheckReport:
    def run():
        rng = np.random.default_rng(seed)
        coords = rng.uniform(0, 1, size=(n_points, 3))
        radius = 0.15
        index = build_index(coords, radius)
        for _ in range(queries):
            q = rng.uniform(0, 1, size=3)
            idx, _ = index.radius_query(q, radius)
            dist = np.linalg.norm(coords - q, axis=1)
            expected = np.nonzero(dist <= radius)[0]
            if set(idx.tolist()) != set(expected.tolist()):
                return 1.0
        return 0.0

    return _check("radius_query_brute_force", run, seed, 0.0)


def check_fps_greedy_replay(seed: int = 10, n_points: int = 200, m: int = 24) -> CheckReport:
    def run():
        rng = np.random.default_rng(seed)
        coords = rng.uniform(-1, 1, size=(n_points, 3))
        picked = farthest_point_sample(coords, m, seed=seed)
        if len(set(picked.tolist())) != m:
            return 1.0
        # replay the greedy rule with brute-force distances
        chosen = [int(picked[0])]
        for step in range(1, m):
            d2 = np.min(
                ((coords[:, None, :] - coords[chosen][None, :, :]) ** 2).sum(axis=2), axis=1
            )
            d2[chosen] = -1.0
            best = int(np.argmax(d2))
            if best != int(picked[step]):
                return 1.0
            chosen.append(best)
        return 0.0

    return _check("fps_greedy_replay", run, seed, 0.0)


def check_batchnorm_gradient(seed: int = 11) -> CheckReport:
    from .layers import batchnorm_train_values

    def run():
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((12, 3))
        scale = rng.standard_normal(3)
        shift = rng.standard_normal(3)
        proj = rng.standard_normal((12, 3))

        def loss(arr):
            y, _, _, _ = batchnorm_train_values(arr, scale, shift)
            return float(np.sum(y * proj))

        y, x_hat, inv_std, _ = batchnorm_train_values(x, scale, shift)
        n = x.shape[0]
        g = proj * scale
        dx = (inv_std / n) * (n * g - g.sum(axis=0) - x_hat * (g * x_hat).sum(axis=0))
        fd = finite_difference_gradient(loss, x.copy())
        return relative_error(dx, fd)

    return _check("batchnorm_gradient", run, seed, 1e-4)


def check_cross_entropy_gradient(seed: int = 12) -> CheckReport:
    from .training import cross_entropy
    from .tensor import backward as tensor_backward, reset_tape

    def run():
        rng = np.random.default_rng(seed)
        logits = rng.standard_normal((8, 4))
        labels = rng.integers(0, 4, size=8)

        def loss(arr):
            reset_tape()
            return cross_entropy(Tensor(arr), labels).item()

        reset_tape()
        t = Tensor(logits, requires_grad=True)
        tensor_backward(cross_entropy(t, labels))
        analytic = t.grad.copy()
        reset_tape()
        fd = finite_difference_gradient(loss, logits.copy())
        return relative_error(analytic, fd)

    return _check("cross_entropy_gradient", run, seed, 1e-4)


SUITE: list[tuple[str, Callable[[], CheckReport]]] = [
    ("forward_vs_naive", check_forward_vs_naive),
    ("permutation_invariance", check_permutation_invariance),
    ("duplication_invariance_count", lambda: check_duplication_invariance(BY_COUNT)),
    ("duplication_invariance_weight_sum", lambda: check_duplication_invariance(BY_WEIGHT_SUM)),
    ("translation_equivariance", check_translation_equivariance),
    ("linearity_in_features", check_linearity),
    ("trilinear_partition_of_unity", check_trilinear_partition_of_unity),
    ("gaussian_truncation", check_gaussian_truncation),
    ("grid_equivalence", check_grid_equivalence),
    ("grad_features_finite_difference", lambda: check_op_gradients("features")),
    ("grad_weights_finite_difference", lambda: check_op_gradients("weights")),
    ("grad_bias_finite_difference", lambda: check_op_gradients("bias")),
    ("radius_query_brute_force", check_radius_query_brute_force),
    ("fps_greedy_replay", check_fps_greedy_replay),
    ("batchnorm_gradient", check_batchnorm_gradient),
    ("cross_entropy_gradient", check_cross_entropy_gradient),
    ("resampling_robustness", check_resampling_robustness),
]


def check_names() -> list[str]:
    return [name for name, _ in SUITE]


def run_invariant_suite(name_filter: str | None = None) -> list[CheckReport]:
    """Run the named checks; failures are reported, never raised."""
    reports = []
    for name, fn in SUITE:
        if name_filter and name_filter not in name:
            continue
        reports.append(fn())
    return reports


def write_report_csv(reports: list[CheckReport], path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["check", "status", "measured", "tolerance", "seed", "seconds", "detail"])
        for r in reports:
            writer.writerow(
                [r.name, r.status, f"{r.measured:.6e}", f"{r.tolerance:.1e}", r.seed,
                 f"{r.seconds:.3f}", r.detail]
            )


def format_summary(reports: list[CheckReport]) -> str:
    lines = []
    width = max((len(r.name) for r in reports), default=10)
    for r in reports:
        mark = "PASS" if r.passed else "FAIL"
        lines.append(
            f"{mark}  {r.name:<{width}}  measured={r.measured:.3e}  "
            f"tol={r.tolerance:.1e}  {r.seconds:.2f}s"
            + (f"  [{r.detail}]" if r.detail else "")
        )
    n_fail = sum(not r.passed for r in reports)
    lines.append(f"{len(reports) - n_fail}/{len(reports)} checks passed")
    return "\n".join(lines)
