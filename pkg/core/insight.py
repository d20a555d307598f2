"""Numerical checks of the likelihood factorisation behind the joint objective.

Everything here runs on a tiny analytic model in float64 numpy:

* target pixels are scalars with generative mean ``g_r = w * s_r + b0`` given the
  source value ``s_r`` and unit noise variance;
* the latent ``z`` summarising the other target pixels of an image is the mean of
  those pixels, so ``z | X_S ~ N(mean_{r != k} g_r, 1 / (N - 1))``;
* the pixel classifier is ``softmax_y(a_y * x_k + b_y * z + c_y)``.

The identities checked are the log-marginal gradient "trick", the dynamic class
weight (Bayes posterior equals the expected classifier output) and the gradient
decomposition of the unlabelled-pixel term.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import logsumexp, softmax

from core.errors import QuadratureGridError, VanishingLikelihoodError
from core.logs import get_logger

logger = get_logger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
MIN_RESOLUTION = 256
MIN_COVER_STD = 6.0
MAX_TAIL_MASS = 1e-8
MAX_PIXELS = 4
MAX_CLASSES = 3


def log_normal(x, mean, var: float = 1.0):
    return -0.5 * ((np.asarray(x) - mean) ** 2 / var + LOG_2PI + math.log(var))


def central_difference(fn, theta: np.ndarray, step: float) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    grads = []
    for j in range(theta.size):
        e = np.zeros_like(theta)
        e[j] = step
        grads.append((np.asarray(fn(theta + e)) - np.asarray(fn(theta - e))) / (2.0 * step))
    return np.stack(grads)


@dataclass
class ToyJointModel:
    class_count: int
    theta: np.ndarray = field(repr=False)
    theta_dependent: bool = True

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64).copy()
        if self.class_count < 1:
            raise ValueError("class_count must be >= 1")
        if self.theta.shape != (self.n_params,):
            raise ValueError(f"theta must have {self.n_params} entries, got {self.theta.shape}")

    @classmethod
    def random(cls, class_count: int, seed: int, scale: float = 0.5) -> "ToyJointModel":
        rng = np.random.default_rng(seed)
        return cls(class_count, rng.normal(0.0, scale, size=2 + 3 * class_count))

    @property
    def n_params(self) -> int:
        return 2 + 3 * self.class_count

    def unpack(self, theta=None):
        t = self.theta if theta is None or not self.theta_dependent else np.asarray(theta, dtype=np.float64)
        k = self.class_count
        return t[0], t[1], t[2:2 + k], t[2 + k:2 + 2 * k], t[2 + 2 * k:2 + 3 * k]

    # mixture view: P(x, y) = softmax(c)_y * N(x; a_y, 1)
    def log_joint(self, x, theta=None) -> np.ndarray:
        _, _, a, _, c = self.unpack(theta)
        x = np.atleast_1d(np.asarray(x, dtype=np.float64))
        log_prior = c - logsumexp(c)
        return log_prior[None, :] + log_normal(x[:, None], a[None, :])

    def log_marginal(self, x, theta=None) -> float:
        return float(logsumexp(self.log_joint(x, theta), axis=1).sum())

    def posterior(self, x, theta=None) -> np.ndarray:
        return softmax(self.log_joint(x, theta), axis=1)

    # generative / classifier view
    def generative_mean(self, source, theta=None) -> np.ndarray:
        w, b0, _, _, _ = self.unpack(theta)
        return w * np.asarray(source, dtype=np.float64) + b0

    def classifier(self, x_k: float, z, theta=None) -> np.ndarray:
        _, _, a, b, c = self.unpack(theta)
        z = np.atleast_1d(np.asarray(z, dtype=np.float64))
        return softmax(a[None, :] * x_k + b[None, :] * z[:, None] + c[None, :], axis=1)

    def latent(self, source, k: int, theta=None) -> tuple[float, float]:
        g = self.generative_mean(source, theta)
        if g.size < 2:
            raise ValueError("need at least 2 target pixels for a latent")
        others = np.delete(g, k)
        return float(others.mean()), 1.0 / others.size

    def latent_grid(self, source, k: int, resolution: int = 1024, half_width: float = 8.0,
                    theta=None) -> "QuadratureGrid":
        mean, var = self.latent(source, k, theta)
        return QuadratureGrid.around(mean, math.sqrt(var), half_width, resolution)


@dataclass(frozen=True)
class QuadratureGrid:
    lower: float
    upper: float
    resolution: int

    def __post_init__(self):
        if not self.upper > self.lower or self.resolution < 2:
            raise QuadratureGridError(f"degenerate grid [{self.lower}, {self.upper}] x {self.resolution}")

    @classmethod
    def around(cls, mean: float, std: float, half_width: float = 8.0, resolution: int = 1024) -> "QuadratureGrid":
        return cls(mean - half_width * std, mean + half_width * std, resolution)

    @property
    def points(self) -> np.ndarray:
        return np.linspace(self.lower, self.upper, self.resolution)

    @property
    def weights(self) -> np.ndarray:
        dx = (self.upper - self.lower) / (self.resolution - 1)
        w = np.full(self.resolution, dx)
        w[0] = w[-1] = dx / 2.0
        return w

    def tail_mass(self, mean: float, std: float) -> float:
        s = std * math.sqrt(2.0)
        return 0.5 * math.erfc((mean - self.lower) / s) + 0.5 * math.erfc((self.upper - mean) / s)

    def check(self, mean: float, std: float, min_resolution: int = MIN_RESOLUTION) -> None:
        if self.resolution < min_resolution:
            raise QuadratureGridError(f"grid resolution {self.resolution} below {min_resolution}")
        if self.lower > mean - MIN_COVER_STD * std or self.upper < mean + MIN_COVER_STD * std:
            raise QuadratureGridError(f"grid [{self.lower:.3g}, {self.upper:.3g}] covers less than "
                                      f"{MIN_COVER_STD:g} std around {mean:.3g}")
        tail = self.tail_mass(mean, std)
        if tail > MAX_TAIL_MASS:
            raise QuadratureGridError(f"grid too narrow: tail mass {tail:.3g} outside bounds")


def expected_classifier(model: ToyJointModel, x_k: float, source, k: int, grid: QuadratureGrid,
                        theta=None) -> np.ndarray:
    """E_{z ~ P(z | X_S)} [h(x_k, z)] per class, by quadrature on the analytic density."""
    mean, var = model.latent(source, k, theta)
    z = grid.points
    density = np.exp(log_normal(z, mean, var))
    h = model.classifier(x_k, z, theta)
    return (grid.weights[:, None] * density[:, None] * h).sum(axis=0)


def bayes_class_weights(model: ToyJointModel, x_k: float, source, k: int, grid: QuadratureGrid,
                        theta=None) -> np.ndarray:
    """P(y | x_k, X_S) from the joint P(z | X_S) P(x_k | X_S) h(x_k, z)_y integrated over z."""
    mean, var = model.latent(source, k, theta)
    g_k = model.generative_mean(source, theta)[k]
    z = grid.points
    joint = (np.exp(log_normal(z, mean, var))[:, None]
             * math.exp(float(log_normal(x_k, g_k)))
             * model.classifier(x_k, z, theta))
    marginal = (grid.weights[:, None] * joint).sum(axis=0)
    total = marginal.sum()
    if not total > 0:
        raise VanishingLikelihoodError(f"P(x_k | X_S) vanishes at x_k={x_k}")
    return marginal / total


@dataclass
class DynamicWeightCheck:
    bayes: np.ndarray
    expectation: np.ndarray

    @property
    def gap(self) -> np.ndarray:
        return np.abs(self.bayes - self.expectation)

    @property
    def max_gap(self) -> float:
        return float(self.gap.max())

    def rows(self) -> list[tuple[float, float, float]]:
        return [(float(b), float(e), float(g)) for b, e, g in zip(self.bayes, self.expectation, self.gap)]


def _dynamic_weight(model, x_k, source, k, grid, min_resolution) -> DynamicWeightCheck:
    mean, var = model.latent(source, k)
    grid.check(mean, math.sqrt(var), min_resolution)
    return DynamicWeightCheck(
        bayes=bayes_class_weights(model, x_k, source, k, grid),
        expectation=expected_classifier(model, x_k, source, k, grid),
    )


def verify_dynamic_weight(model: ToyJointModel, x_k: float, source, grid: QuadratureGrid | None = None,
                          k: int = 0) -> DynamicWeightCheck:
    """Bayes posterior vs. expected classifier output for pixel ``k``, per class."""
    grid = grid or model.latent_grid(source, k)
    return _dynamic_weight(model, x_k, source, k, grid, MIN_RESOLUTION)


def quadrature_convergence(model: ToyJointModel, x_k: float, source, k: int = 0,
                           resolutions=(128, 256, 512, 1024), half_width: float = 8.0) -> list[tuple[int, float]]:
    out = []
    for n in resolutions:
        grid = model.latent_grid(source, k, n, half_width)
        out.append((n, _dynamic_weight(model, x_k, source, k, grid, min(resolutions)).max_gap))
    return out


def verify_trick(model: ToyJointModel, x, theta=None, fd_step: float = 1e-5) -> float:
    """max_j |d/dθ_j log P(x|θ) - Σ_y P(y|x,θ) d/dθ_j log P(x,y|θ)|, both by central differences."""
    theta = model.theta if theta is None else np.asarray(theta, dtype=np.float64)
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    per_sample = logsumexp(model.log_joint(x, theta), axis=1)
    if np.any(np.exp(per_sample) == 0.0):
        raise VanishingLikelihoodError(f"P(x|θ) vanishes on the query point(s) {x[np.exp(per_sample) == 0.0]}")
    weights = model.posterior(x, theta)
    lhs = central_difference(lambda t: model.log_marginal(x, t), theta, fd_step)
    inner = central_difference(lambda t: model.log_joint(x, t), theta, fd_step)
    rhs = (weights[None, :, :] * inner).sum(axis=(1, 2))
    return float(np.max(np.abs(lhs - rhs)))


def _check_instance(model: ToyJointModel, x, source) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    source = np.asarray(source, dtype=np.float64)
    if x.shape != source.shape or x.ndim != 1:
        raise ValueError("x and source must be 1-D and of equal length")
    if not 2 <= x.size <= MAX_PIXELS or model.class_count > MAX_CLASSES:
        raise ValueError(f"instance must have 2..{MAX_PIXELS} pixels and at most {MAX_CLASSES} classes")
    return x, source


def _log_phi2(model, x, source, grids, theta) -> np.ndarray:
    g = model.generative_mean(source, theta)
    rows = []
    for k in range(x.size):
        phi1 = expected_classifier(model, x[k], source, k, grids[k], theta)
        rows.append(np.log(phi1) + log_normal(x[k], g[k]))
    return np.stack(rows)


def unlabeled_gradient(model: ToyJointModel, x, source, theta=None, fd_step: float = 1e-5,
                       resolution: int = 1024, half_width: float = 8.0) -> np.ndarray:
    x, source = _check_instance(model, x, source)
    theta = model.theta if theta is None else np.asarray(theta, dtype=np.float64)
    grids = [model.latent_grid(source, k, resolution, half_width, theta) for k in range(x.size)]
    return central_difference(
        lambda t: float(logsumexp(_log_phi2(model, x, source, grids, t), axis=1).sum()), theta, fd_step)


def verify_gradient_decomposition(model: ToyJointModel, x, source, theta=None, fd_step: float = 1e-5,
                                  resolution: int = 1024, half_width: float = 8.0) -> float:
    """Unlabelled-term gradient vs. Σ_k Σ_y φ₁ d/dθ log φ₂, max absolute discrepancy."""
    x, source = _check_instance(model, x, source)
    theta = model.theta if theta is None else np.asarray(theta, dtype=np.float64)
    grids = [model.latent_grid(source, k, resolution, half_width, theta) for k in range(x.size)]
    base = _log_phi2(model, x, source, grids, theta)
    if not np.all(np.isfinite(base)):
        raise VanishingLikelihoodError("joint likelihood vanishes on the query instance")
    phi1 = softmax(base, axis=1)
    lhs = central_difference(lambda t: float(logsumexp(_log_phi2(model, x, source, grids, t), axis=1).sum()),
                             theta, fd_step)
    inner = central_difference(lambda t: _log_phi2(model, x, source, grids, t), theta, fd_step)
    rhs = (phi1[None, :, :] * inner).sum(axis=(1, 2))
    return float(np.max(np.abs(lhs - rhs)))


def weight_monotonicity(model: ToyJointModel, x_k: float, source, k: int = 0,
                        boosts=(0.0, 0.5, 1.0, 2.0, 4.0)) -> tuple[int, list[float]]:
    grid = model.latent_grid(source, k)
    base = expected_classifier(model, x_k, source, k, grid)
    top = int(np.argmax(base))
    values = []
    for boost in boosts:
        theta = model.theta.copy()
        theta[2 + 2 * model.class_count + top] += boost
        shifted = replace(model, theta=theta, theta_dependent=True)
        values.append(float(expected_classifier(shifted, x_k, source, k, grid)[top]))
    return top, values


@dataclass
class CheckResult:
    name: str
    value: float
    tolerance: float
    passed: bool


def run_all(seed: int = 0, trick_models: int = 20) -> list[CheckResult]:
    results = []
    worst = 0.0
    for s in range(seed, seed + trick_models):
        model = ToyJointModel.random(2 + s % 2, s)
        x = np.random.default_rng([s, 5]).normal(size=3)
        worst = max(worst, verify_trick(model, x))
    results.append(CheckResult("trick", worst, 1e-6, worst < 1e-6))

    rng = np.random.default_rng([seed, 6])
    model = ToyJointModel.random(3, seed)
    source = rng.normal(size=4)
    x_k = float(model.generative_mean(source)[0] + rng.normal())
    dw = verify_dynamic_weight(model, x_k, source)
    results.append(CheckResult("dynamic_weight_gap", dw.max_gap, 1e-4, dw.max_gap < 1e-4))
    norm = max(abs(dw.bayes.sum() - 1.0), abs(dw.expectation.sum() - 1.0))
    results.append(CheckResult("dynamic_weight_normalisation", norm, 1e-8, norm < 1e-8))

    gaps = quadrature_convergence(model, x_k, source)
    converging = all(g2 <= max(g1 / 2.0, 1e-12) for (_, g1), (_, g2) in zip(gaps, gaps[1:]))
    results.append(CheckResult("quadrature_convergence", gaps[-1][1], 1e-4, converging))

    small = ToyJointModel.random(2, seed + 1)
    pix_rng = np.random.default_rng([seed, 7])
    src2 = pix_rng.normal(size=2)
    x2 = small.generative_mean(src2) + pix_rng.normal(size=2)
    gd = verify_gradient_decomposition(small, x2, src2)
    results.append(CheckResult("gradient_decomposition", gd, 1e-5, gd < 1e-5))

    _, values = weight_monotonicity(model, x_k, source)
    increasing = all(b > a for a, b in zip(values, values[1:]))
    results.append(CheckResult("weight_monotonicity", values[-1] - values[0], 0.0, increasing))
    for r in results:
        logger.info("%s: %.3e (tol %.0e) %s", r.name, r.value, r.tolerance, "pass" if r.passed else "FAIL")
    return results


def format_report(results: list[CheckResult]) -> str:
    lines = [f"{'check':<30} {'value':>12} {'tolerance':>10}  result"]
    for r in results:
        lines.append(f"{r.name:<30} {r.value:>12.3e} {r.tolerance:>10.0e}  {'PASS' if r.passed else 'FAIL'}")
    lines.append(f"overall: {'PASS' if all(r.passed for r in results) else 'FAIL'}")
    return "\n".join(lines) + "\n"
