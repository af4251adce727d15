"""Coefficient data model and numerical checks of the structural conditions.

Evaluator conventions (all vectorized over a batch of ``n`` particle states
that share one common-factor value ``y`` and one measure ``nu``)::

    drift_b(x[n,d], y[m], nu)                 -> [n,d]
    drift_b0(y[m], nu)                        -> [m]
    jump_rate_d(x[n,d], y[m], nu, h[n,d])     -> [n]
    jump_rate_d0(k[n,m])                      -> [n]

    b2(x, y, nu)                              -> [n,d,m]
    b3(x, y, nu, xt[p,d])                     -> [n,p,d]
    b02(y, nu)                                -> [m,m]
    b03(y, nu, xt[p,d])                       -> [p,m]
    d2(x, y, h[n,d], nu)                      -> [n,m]
    d3(x, y, h[n,d], nu, xt[p,d])             -> [n,p]

``b3_mean``/``b03_mean``/``d3_mean`` optionally give the ``nu``-average of the
last argument in closed form; otherwise it is taken over ``nu.points``.
"""

from dataclasses import dataclass, field, asdict
import json
from typing import Callable, Optional

import numpy as np
from scipy.special import ndtri

from .noise import StreamKey, numpy_generator


class ModelError(ValueError):
    pass


# ------------------------------------------------------------------ measures


@dataclass(frozen=True)
class SampleableMeasure:
    """Finite measure on R^dim sampled by transforming uniforms.

    ``transform`` maps ``[..., n_uniforms]`` uniforms to ``[..., dim]`` draws
    from the normalized measure. ``atoms`` (points, weights) is set for
    finitely supported measures; the weights sum to ``total_mass``.
    """

    dim: int
    total_mass: float
    n_uniforms: int
    transform: Callable
    second_moment: float
    atoms: Optional[tuple] = None
    label: str = ""

    def sample(self, u):
        return self.transform(np.asarray(u))

    @property
    def is_atomic(self):
        return self.atoms is not None

    @classmethod
    def zero(cls, dim):
        def transform(u):
            return np.zeros(u.shape[:-1] + (dim,))

        return cls(dim, 0.0, 1, transform, 0.0, (np.zeros((0, dim)), np.zeros(0)), "zero")

    @classmethod
    def atomic(cls, points, weights):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        w = np.asarray(weights, dtype=float)
        if pts.shape[0] != w.shape[0]:
            raise ModelError("atoms and weights differ in length")
        if np.any(w < 0):
            raise ModelError("atom weights must be non-negative")
        mass = float(w.sum())
        cum = np.cumsum(w) / mass if mass > 0 else np.ones_like(w)

        def transform(u):
            idx = np.searchsorted(cum, u[..., 0], side="right")
            return pts[np.minimum(idx, len(w) - 1)]

        m2 = float((w * (pts**2).sum(axis=1)).sum())
        return cls(pts.shape[1], mass, 1, transform, m2, (pts, w), "atomic")

    @classmethod
    def gaussian(cls, mean, std, mass=1.0):
        """Product Gaussian with independent coordinates (``std`` may contain 0)."""
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        std = np.broadcast_to(np.asarray(std, dtype=float), mean.shape).copy()
        dim = mean.shape[0]

        def transform(u):
            uu = np.clip(u, 2.0**-60, 1.0 - 2.0**-53)
            return mean + std * ndtri(uu)

        m2 = float(mass * ((mean**2).sum() + (std**2).sum()))
        return cls(dim, float(mass), dim, transform, m2, None, "gaussian")

    @classmethod
    def point(cls, x):
        return cls.atomic(np.atleast_2d(np.asarray(x, dtype=float)), [1.0])

    def quadrature(self, uniforms=None):
        """Nodes and weights integrating against the (unnormalized) measure.

        Atomic measures are integrated exactly; otherwise ``uniforms`` of shape
        ``[Q, n_uniforms]`` give an equal-weight Monte Carlo rule.
        """
        if self.atoms is not None:
            return self.atoms
        if uniforms is None:
            raise ModelError("non-atomic measure needs quadrature uniforms")
        nodes = self.transform(uniforms)
        return nodes, np.full(nodes.shape[0], self.total_mass / nodes.shape[0])


# ------------------------------------------------------------------ measure view


def _ordered_mean(values):
    # sorting first makes the result invariant under permutations of the cloud
    return np.sort(values, axis=0).sum(axis=0) / values.shape[0]


class MeasureView:
    """Empirical measure of a particle cloud, or a bag of precomputed summaries.

    Presets call :meth:`expect` with a cache key so that functionals such as
    ``<f, nu>`` are computed once per measure and reused by every evaluator.
    """

    __slots__ = ("points", "_cache")

    def __init__(self, points=None, summaries=None):
        if points is not None:
            points = np.asarray(points, dtype=float)
            if points.ndim == 1:
                points = points[:, None]
            if points.shape[0] < 1:
                raise ModelError("a measure view needs at least one point")
        elif not summaries:
            raise ModelError("a measure view needs points or summaries")
        self.points = points
        self._cache = dict(summaries or {})

    @property
    def size(self):
        return 0 if self.points is None else self.points.shape[0]

    @property
    def weights(self):
        return np.full(self.size, 1.0 / self.size)

    def expect(self, key, fn):
        try:
            return self._cache[key]
        except KeyError:
            pass
        if self.points is None:
            raise KeyError(f"summary {key!r} not available without points")
        val = _ordered_mean(np.asarray(fn(self.points), dtype=float))
        self._cache[key] = val
        return val

    def sorted_column(self, j):
        """Coordinate ``j`` of the cloud in ascending order (cached).

        Pairwise kernels sum over this so that results do not depend on the
        order of the particles.
        """
        key = ("__sorted__", j)
        if key not in self._cache:
            self._cache[key] = np.ascontiguousarray(np.sort(self.points[:, j]))
        return self._cache[key]

    def __repr__(self):
        return f"MeasureView(size={self.size}, cached={sorted(map(str, self._cache))})"


# ------------------------------------------------------------------ spec


DERIVATIVE_NAMES = ("b2", "b3", "b02", "b03", "d2", "d3")


@dataclass(frozen=True)
class ModelDerivatives:
    b2: Callable
    b3: Callable
    b02: Callable
    b03: Callable
    d2: Callable
    d3: Callable
    b3_mean: Optional[Callable] = None
    b03_mean: Optional[Callable] = None
    d3_mean: Optional[Callable] = None
    vanishing: frozenset = frozenset()  # names of derivatives that are identically zero

    def b3c(self, x, y, nu, xt):
        v = self.b3(x, y, nu, xt)
        if self.b3_mean is not None:
            mean = self.b3_mean(x, y, nu)
        else:
            mean = _chunked_mean(lambda pts: self.b3(x, y, nu, pts), nu.points, axis=1)
        return v - mean[:, None, :]

    def b03c(self, y, nu, xt):
        v = self.b03(y, nu, xt)
        if self.b03_mean is not None:
            mean = self.b03_mean(y, nu)
        else:
            mean = nu.expect(("b03_mean", id(self), tuple(np.atleast_1d(y))), lambda pts: self.b03(y, nu, pts))
        return v - mean[None, :]

    def d3c(self, x, y, h, nu, xt):
        v = self.d3(x, y, h, nu, xt)
        if self.d3_mean is not None:
            mean = self.d3_mean(x, y, h, nu)
        else:
            mean = _chunked_mean(lambda pts: self.d3(x, y, h, nu, pts), nu.points, axis=1)
        return v - mean[:, None]


def _chunked_mean(fn, pts, axis, chunk=4096):
    total = None
    for s in range(0, pts.shape[0], chunk):
        part = fn(pts[s:s + chunk]).sum(axis=axis)
        total = part if total is None else total + part
    return total / pts.shape[0]


@dataclass(frozen=True)
class ModelSpec:
    name: str
    dim_x: int
    dim_y: int
    drift_b: Callable
    drift_b0: Callable
    diffusion_sigma: np.ndarray
    diffusion_sigma0: np.ndarray
    jump_rate_d: Callable
    jump_rate_d0: Callable
    gamma: SampleableMeasure
    gamma0: SampleableMeasure
    rate_lower: float
    rate_upper: float
    derivatives: ModelDerivatives
    init_mu0: SampleableMeasure
    init_rho0: SampleableMeasure
    # Functionals f(z, .) bounding the measure part of the Taylor remainders:
    # functionals(x[n,d], y[m], pts[p,d]) -> [n,p,q]
    functionals: Optional[Callable] = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        sig = np.atleast_2d(np.asarray(self.diffusion_sigma, dtype=float))
        sig0 = np.atleast_2d(np.asarray(self.diffusion_sigma0, dtype=float))
        if sig.shape != (self.dim_x, self.dim_x):
            raise ModelError(f"diffusion_sigma must be {self.dim_x}x{self.dim_x}")
        if sig0.shape != (self.dim_y, self.dim_y):
            raise ModelError(f"diffusion_sigma0 must be {self.dim_y}x{self.dim_y}")
        if not self.rate_lower > 0:
            raise ModelError("rate_lower (epsilon) must be positive")
        if not self.rate_upper >= self.rate_lower:
            raise ModelError("rate_upper (K) must be at least rate_lower")
        object.__setattr__(self, "diffusion_sigma", sig)
        object.__setattr__(self, "diffusion_sigma0", sig0)
        object.__setattr__(self, "_sigma_pinv", np.linalg.pinv(sig))

    @property
    def sigma_pinv(self):
        return self._sigma_pinv

    @property
    def sigma_is_identity(self):
        return np.array_equal(self.diffusion_sigma, np.eye(self.dim_x))


# ------------------------------------------------------------------ validation


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: Optional[float] = None
    message: str = ""


@dataclass
class ValidationReport:
    model: str
    probes: int
    checks: list

    @property
    def passed(self):
        return all(c.passed for c in self.checks)

    def failures(self):
        return [c for c in self.checks if not c.passed]

    def __getitem__(self, name):
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_dict(self):
        return {"model": self.model, "probes": self.probes, "passed": self.passed, "checks": [asdict(c) for c in self.checks]}

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)


def _guard(name, fn):
    try:
        return fn()
    except Exception as exc:  # evaluator failures become report entries
        return CheckResult(name, False, None, f"evaluator raised {exc!r}")


def _probe_setup(spec, probes, rng, cloud_size=48):
    d, m = spec.dim_x, spec.dim_y
    x = spec.init_mu0.sample(rng.random((probes, spec.init_mu0.n_uniforms))) + rng.normal(0, 1.5, (probes, d))
    y = spec.init_rho0.sample(rng.random((probes, spec.init_rho0.n_uniforms))) + rng.normal(0, 1.5, (probes, m))
    clouds = []
    for _ in range(probes):
        base = spec.init_mu0.sample(rng.random((cloud_size, spec.init_mu0.n_uniforms)))
        clouds.append(base + rng.normal(0, 1.0, d) + rng.normal(0, 0.5, (cloud_size, d)))
    if spec.gamma.total_mass > 0:
        h = spec.gamma.sample(rng.random((probes, spec.gamma.n_uniforms)))
    else:
        h = np.zeros((probes, d))
    if spec.gamma0.total_mass > 0:
        k = spec.gamma0.sample(rng.random((probes, spec.gamma0.n_uniforms)))
    else:
        k = np.zeros((probes, m))
    return x, y, clouds, h, k


def _measure_gap(spec, x, y, cloud, cloud2):
    if spec.functionals is None:
        return 0.0
    f1 = spec.functionals(x[None, :], y, cloud)[0].mean(axis=0)
    f2 = spec.functionals(x[None, :], y, cloud2)[0].mean(axis=0)
    return float(np.max(np.abs(f2 - f1))) if f1.size else 0.0


def _remainder_ratios(spec, x, y, clouds, h, rng, delta, which):
    der = spec.derivatives
    ratios = []
    for i in range(x.shape[0]):
        xi = x[i:i + 1]
        yi = y[i]
        nu_pts = clouds[i]
        dy = delta * rng.normal(size=spec.dim_y)
        nu2_pts = nu_pts + delta * rng.normal(size=nu_pts.shape)
        nu, nu2 = MeasureView(nu_pts), MeasureView(nu2_pts)
        y2 = yi + dy
        if which == "b":
            lin = der.b2(xi, yi, nu)[0] @ dy
            lin = lin + der.b3(xi, yi, nu, nu2_pts)[0].mean(axis=0) - der.b3(xi, yi, nu, nu_pts)[0].mean(axis=0)
            theta = spec.drift_b(xi, y2, nu2)[0] - spec.drift_b(xi, yi, nu)[0] - lin
        elif which == "b0":
            lin = der.b02(yi, nu) @ dy + der.b03(yi, nu, nu2_pts).mean(axis=0) - der.b03(yi, nu, nu_pts).mean(axis=0)
            theta = spec.drift_b0(y2, nu2) - spec.drift_b0(yi, nu) - lin
        else:
            hi = h[i:i + 1]
            lin = float(dy @ der.d2(xi, yi, hi, nu)[0])
            lin += der.d3(xi, yi, hi, nu, nu2_pts)[0].mean() - der.d3(xi, yi, hi, nu, nu_pts)[0].mean()
            theta = np.atleast_1d(spec.jump_rate_d(xi, y2, nu2, hi)[0] - spec.jump_rate_d(xi, yi, nu, hi)[0] - lin)
        denom = float(dy @ dy) + _measure_gap(spec, xi[0], yi, nu_pts, nu2_pts) ** 2
        tn = float(np.linalg.norm(theta))
        if tn <= 1e-13:
            ratios.append(0.0)
        elif denom == 0.0:
            ratios.append(np.inf)
        else:
            ratios.append(tn / denom)
    return float(np.max(ratios)) if ratios else 0.0


def _remainder_check(spec, x, y, clouds, h, key, which):
    def run():
        coarse = _remainder_ratios(spec, x, y, clouds, h, numpy_generator(key.child(which, "coarse")), 0.1, which)
        fine = _remainder_ratios(spec, x, y, clouds, h, numpy_generator(key.child(which, "fine")), 0.01, which)
        ok = np.isfinite(coarse) and np.isfinite(fine) and fine <= 5.0 * coarse + 1e-6
        msg = f"fitted remainder constant {max(coarse, fine):.4g} (delta=0.1: {coarse:.4g}, delta=0.01: {fine:.4g})"
        if not ok:
            msg = "remainder not quadratic: " + msg
        return CheckResult(f"remainder_{which}", bool(ok), max(coarse, fine), msg)

    return _guard(f"remainder_{which}", run)


def validate_model(spec, probes=200, stream=0):
    """Probe the structural conditions on random states, clouds and marks.

    ``stream`` is a :class:`StreamKey` or an integer seed; the report is a
    deterministic function of ``(spec, probes, stream)``. Failures are recorded
    in the report, never raised.
    """
    if probes < 1:
        raise ValueError("probes must be >= 1")
    key = stream if isinstance(stream, StreamKey) else StreamKey(int(stream), ("validate",))
    rng = numpy_generator(key)
    x, y, clouds, h, k = _probe_setup(spec, probes, rng)
    eps, K = spec.rate_lower, spec.rate_upper
    checks = []

    def rate_bounds():
        vals = np.concatenate(
            [np.atleast_1d(spec.jump_rate_d(x[i:i + 1], y[i], MeasureView(clouds[i]), h[i:i + 1])) for i in range(probes)]
        )
        lo, hi = float(vals.min()), float(vals.max())
        msgs = []
        if not np.all(np.isfinite(vals)):
            msgs.append("non-finite rate")
        if lo < eps:
            msgs.append(f"rate_lower violated (min {lo:.4g} < {eps:.4g})")
        if hi > K:
            msgs.append(f"rate_upper violated (max {hi:.4g} > {K:.4g})")
        return CheckResult("rate_bounds_d", not msgs, lo, "; ".join(msgs) or f"rates in [{lo:.4g}, {hi:.4g}]")

    def rate0_bounds():
        vals = np.atleast_1d(spec.jump_rate_d0(k))
        lo, hi = float(vals.min()), float(vals.max())
        ok = lo >= 0 and hi < K
        msg = f"d0 in [{lo:.4g}, {hi:.4g}]" if ok else f"d0 outside [0, K): [{lo:.4g}, {hi:.4g}]"
        return CheckResult("rate_bounds_d0", ok, hi, msg)

    def moments():
        m = max(spec.gamma.second_moment, spec.gamma0.second_moment)
        ok = m <= K * K
        return CheckResult("jump_second_moments", ok, m, f"max second moment {m:.4g} vs K^2 = {K * K:.4g}")

    def drift_bounds():
        vb = max(float(np.abs(spec.drift_b(x[i:i + 1], y[i], MeasureView(clouds[i]))).max()) for i in range(probes))
        vb0 = max(float(np.abs(spec.drift_b0(y[i], MeasureView(clouds[i]))).max()) for i in range(probes))
        vs = max(np.linalg.norm(spec.diffusion_sigma, 2), np.linalg.norm(spec.diffusion_sigma0, 2))
        m = max(vb, vb0, vs)
        return CheckResult("coefficient_bounds", m <= K, m, f"max |b|, |b0|, |sigma| = {m:.4g} vs K = {K:.4g}")

    def lipschitz(which):
        def run():
            ratios = []
            for i in range(probes):
                nu = MeasureView(clouds[i])
                dz = rng.normal(0, 0.05, spec.dim_x + spec.dim_y)
                x2 = x[i:i + 1] + dz[: spec.dim_x]
                y2 = y[i] + dz[spec.dim_x:]
                if which == "b":
                    diff = spec.drift_b(x2, y2, nu)[0] - spec.drift_b(x[i:i + 1], y[i], nu)[0]
                    step = np.linalg.norm(dz)
                else:
                    diff = spec.drift_b0(y2, nu) - spec.drift_b0(y[i], nu)
                    step = np.linalg.norm(dz[spec.dim_x:])
                ratios.append(np.linalg.norm(diff) / step)
            r = float(max(ratios))
            return CheckResult(f"lipschitz_{which}", r <= K, r, f"max observed state ratio {r:.4g} (probabilistic)")

        return run

    def sigma_range():
        # Girsanov weights use sigma^+ (b' - b); drift changes must lie in range(sigma).
        P = spec.diffusion_sigma @ spec.sigma_pinv
        worst = 0.0
        for i in range(min(probes, 50)):
            nu, nu2 = MeasureView(clouds[i]), MeasureView(clouds[(i + 1) % probes])
            diff = spec.drift_b(x[i:i + 1], y[(i + 1) % probes], nu2)[0] - spec.drift_b(x[i:i + 1], y[i], nu)[0]
            worst = max(worst, float(np.linalg.norm(diff - P @ diff)))
        return CheckResult("drift_in_sigma_range", worst < 1e-10, worst, f"max off-range drift component {worst:.3g}")

    def commute():
        worst = 0.0
        for i in range(min(probes, 50)):
            j = (i + 1) % probes
            A = np.atleast_2d(spec.derivatives.b02(y[i], MeasureView(clouds[i])))
            B = np.atleast_2d(spec.derivatives.b02(y[j], MeasureView(clouds[j])))
            worst = max(worst, float(np.abs(A @ B - B @ A).max()))
        return CheckResult("b02_commute", worst < 1e-12, worst, f"max commutator entry {worst:.3g}")

    checks.append(_guard("rate_bounds_d", rate_bounds))
    checks.append(_guard("rate_bounds_d0", rate0_bounds))
    checks.append(_guard("jump_second_moments", moments))
    checks.append(_guard("coefficient_bounds", drift_bounds))
    checks.append(_guard("lipschitz_b", lipschitz("b")))
    checks.append(_guard("lipschitz_b0", lipschitz("b0")))
    checks.append(_guard("drift_in_sigma_range", sigma_range))
    checks.append(_guard("b02_commute", commute))
    n_rem = min(probes, 200)
    for which in ("b", "b0", "d"):
        checks.append(_remainder_check(spec, x[:n_rem], y[:n_rem], clouds[:n_rem], h[:n_rem], key, which))
    return ValidationReport(spec.name, probes, checks)
