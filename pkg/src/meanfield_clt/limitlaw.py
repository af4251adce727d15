"""Prediction of the Gaussian-mixture limit law.

Given one common-factor realization, ``M`` conditionally independent paths
with retained noise discretize the law of a particle. On these nodes the
integral operator ``A = A1 + A2`` becomes the matrix ``A_hat[j, i] =
G(w_i, w_j) / M`` with

    G(w1, w2) = sum_l sigma^+ f_l(X(w1), X(w2)) . dB_l(w1)
              + sum over accepted jumps of w1 of [d3c + s0(w2) . d2] / d
              - sum_l dt * int [d3c + s0(w2) . d2] gamma(dh)

where ``f_l = b3c(X(w1), ., X(w2)) + b2(X(w1)) s0_l(w2)`` and ``s0`` solves the
linearized common-factor response. The limit standard deviation on this
common path is the empirical L2 norm of ``(I - A_hat)^{-1} Phi``.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.linalg import lapack, lu_factor, lu_solve

from . import kernels
from .fluctuation import estimate_m_phi
from .girsanov import MissingNoise, gamma_nodes
from .noise import StreamKey, uniforms
from .simulate import GridMismatch, simulate_common_and_law, simulate_iid_given_common


class SingularResolvent(ArithmeticError):
    def __init__(self, message, condition_number):
        super().__init__(message)
        self.condition_number = condition_number


# ------------------------------------------------------------------ s0


def compute_s0_path(spec, common, paths):
    """Linearized response of the common factor to one path, per node.

    ``paths`` is a :class:`ParticleBatch` (or an ``(n, L+1, d)`` array);
    returns ``(n, L+1, m)`` with trapezoidal quadrature in time.
    """
    states = paths.states if hasattr(paths, "states") else np.asarray(paths, dtype=float)
    n, nodes, _ = states.shape
    if nodes != common.grid.shape[0]:
        raise GridMismatch("path and common realization use different grids")
    m = spec.dim_y
    out = np.zeros((n, nodes, m))
    if "b03" in spec.derivatives.vanishing:
        return out
    E = common.exp_integrator
    E_inv = np.linalg.inv(E)
    dts = np.diff(common.grid)
    prev = None
    acc = np.zeros((n, m))
    for s in range(nodes):
        c = spec.derivatives.b03c(common.y_path[s], common.law_view(s), states[:, s])  # (n, m)
        g = c @ E_inv[s].T
        if prev is not None:
            acc = acc + 0.5 * dts[s - 1] * (prev + g)
        out[:, s] = acc @ E[s].T
        prev = g
    return out


# ------------------------------------------------------------------ kernel matrix


@dataclass
class KernelMatrix:
    """Nystrom discretization; ``A = A1 + A2`` with the Brownian part ``A1``
    and the compensated-jump part ``A2`` kept separately."""

    A1: np.ndarray
    A2: np.ndarray
    common_path_id: int

    @property
    def A(self):
        return self.A1 + self.A2

    @property
    def size(self):
        return self.A1.shape[0]

    @property
    def entries(self):
        return self.A


def build_kernel_matrix(spec, cfg, common, paths, s0=None, quad_samples=8):
    """Assemble the Nystrom matrix from ``M`` paths with retained noise."""
    if not paths.retained:
        raise MissingNoise("kernel paths must be simulated with retained noise")
    M = len(paths)
    L = paths.states.shape[1] - 1
    if L != cfg.steps or L != common.steps:
        raise GridMismatch("paths, configuration and common realization disagree on the grid")
    der = spec.derivatives
    van = der.vanishing
    if s0 is None:
        s0 = compute_s0_path(spec, common, paths)
    dt = cfg.dt
    G1 = np.zeros((M, M))
    G2 = np.zeros((M, M))
    brownian_on = not ({"b3", "b2"} <= van)
    jump_on = spec.gamma.total_mass > 0 and not ({"d3", "d2"} <= van)
    s0_on = "b03" not in van
    pinv_t = spec.sigma_pinv.T
    identity_sigma = spec.sigma_is_identity

    if jump_on:
        ev = paths.events
        acc = ev.accepted
        e_step, e_pid, e_mark, e_rate = ev.step[acc], ev.pid[acc], ev.mark[acc], ev.rate[acc]
        order = np.argsort(e_step, kind="stable")
        e_step, e_pid, e_mark, e_rate = e_step[order], e_pid[order], e_mark[order], e_rate[order]
        offs = np.searchsorted(e_step, np.arange(L + 1))
        qkey = StreamKey(cfg.seed, ("kernel-quad", common.common_rep))

    for s in range(L):
        x = paths.states[:, s]
        y = common.y_path[s]
        nu = common.law_view(s)
        s0_s = s0[:, s]
        if brownian_on:
            F = np.zeros((M, M, spec.dim_x))
            if "b3" not in van:
                F += der.b3c(x, y, nu, x)
            if "b2" not in van and s0_on:
                F += np.einsum("idm,jm->ijd", der.b2(x, y, nu), s0_s)
            if not identity_sigma:
                F = F @ pinv_t
            kernels.accumulate_drift(G1, np.ascontiguousarray(F), np.ascontiguousarray(paths.brownian[:, s]))
        if jump_on:
            lo, hi = offs[s], offs[s + 1]
            if hi > lo:
                pid, mark = e_pid[lo:hi], e_mark[lo:hi]
                xe = x[pid]
                rows = np.zeros((hi - lo, M))
                if "d3" not in van:
                    rows += der.d3c(xe, y, mark, nu, x)
                if "d2" not in van and s0_on:
                    rows += der.d2(xe, y, mark, nu) @ s0_s.T
                np.add.at(G2, pid, rows / e_rate[lo:hi, None])
            nodes, w = gamma_nodes(spec, qkey, s, quad_samples)
            for h, wq in zip(nodes, w):
                hh = np.broadcast_to(h, (M, spec.dim_x))
                comp = np.zeros((M, M))
                if "d3" not in van:
                    comp += der.d3c(x, y, hh, nu, x)
                if "d2" not in van and s0_on:
                    comp += der.d2(x, y, hh, nu) @ s0_s.T
                G2 -= (dt * wq) * comp
    if not (np.all(np.isfinite(G1)) and np.all(np.isfinite(G2))):
        raise ArithmeticError("non-finite kernel matrix entries")
    return KernelMatrix(G1.T / M, G2.T / M, common.common_rep)


# ------------------------------------------------------------------ resolvent


@dataclass
class ResolventSolution:
    g: np.ndarray
    sigma: float
    condition_number: float


RCOND_FLOOR = 1e-12


def solve_resolvent(matrix, phi_values, rcond_floor=RCOND_FLOOR):
    """Solve ``(I - A_hat) g = Phi`` by LU; ``sigma = sqrt(mean g^2)``.

    ``phi_values`` must already be centered. A reciprocal condition estimate
    below ``rcond_floor`` raises :class:`SingularResolvent`; the system is
    never regularized.
    """
    A = matrix.A if isinstance(matrix, KernelMatrix) else np.asarray(matrix, dtype=float)
    phi = np.asarray(phi_values, dtype=float)
    M = A.shape[0]
    if A.shape != (M, M) or phi.shape != (M,):
        raise ValueError("matrix must be square and match phi_values")
    scale = max(1.0, float(np.abs(phi).max())) if M else 1.0
    if M and abs(phi.mean()) > 1e-9 * scale:
        raise ValueError("phi_values must be centered (mean subtracted)")
    I_A = np.eye(M) - A
    if not np.all(np.isfinite(I_A)):
        raise SingularResolvent("non-finite matrix", float("inf"))
    anorm = float(np.abs(I_A).sum(axis=0).max())
    lu, piv = lu_factor(I_A, check_finite=False)
    rcond, info = lapack.dgecon(lu, anorm, norm="1")
    cond = float("inf") if rcond == 0 else 1.0 / rcond
    if info != 0 or not rcond > rcond_floor or np.any(np.diag(lu) == 0):
        raise SingularResolvent(f"I - A is singular to working precision (condition number {cond:.3g})", cond)
    g = lu_solve((lu, piv), phi, check_finite=False)
    return ResolventSolution(g, float(np.sqrt(np.mean(g * g))), cond)


# ------------------------------------------------------------------ traces


@dataclass
class TraceDiagnostics:
    trace_A: float
    trace_A2: float
    trace_cross: float
    frobenius_sq: float  # ||A||_F^2 bounds |tr A^2|
    frobenius_cross: float  # ||A1||_F ||A2||_F bounds |tr A1 A2^*|
    size: int

    def __iter__(self):
        return iter((self.trace_A, self.trace_A2, self.trace_cross))


def trace_diagnostics(matrix):
    A1, A2 = matrix.A1, matrix.A2
    A = A1 + A2
    return TraceDiagnostics(
        trace_A=float(np.trace(A)),
        trace_A2=float(np.sum(A * A.T)),
        trace_cross=float(np.sum(A1 * A2)),
        frobenius_sq=float(np.sum(A * A)),
        frobenius_cross=float(np.linalg.norm(A1) * np.linalg.norm(A2)),
        size=A.shape[0],
    )


# ------------------------------------------------------------------ mixture


@dataclass
class PathEstimate:
    common_path_id: int
    sigma: float
    M: int
    m_hat: float
    m_hat_se: float
    phi_centered_norm: float
    condition_number: float
    trace_A: float
    trace_A2: float
    trace_cross: float
    frobenius_sq: float
    bootstrap_se: float = float("nan")
    sigma_half_delta: float = float("nan")  # sigma(M) - sigma(M/2)

    def to_dict(self):
        return asdict(self)


@dataclass
class LimitLawEstimate:
    paths: list = field(default_factory=list)

    @property
    def sigmas(self):
        return np.array([p.sigma for p in self.paths])

    @property
    def weights(self):
        return np.full(len(self.paths), 1.0 / len(self.paths))

    def cdf(self, x):
        from .stats import gaussian_mixture_cdf

        return gaussian_mixture_cdf(self.sigmas, self.weights, x)

    def to_dict(self):
        return {"paths": [p.to_dict() for p in self.paths]}


def bootstrap_sigma(matrix, phi_values, n_boot, key):
    """Standard error of ``sigma`` from resampling the Nystrom nodes."""
    A = matrix.A
    M = A.shape[0]
    idx_all = np.floor(uniforms(key, n_boot * M + (n_boot * M) % 2)[0][: n_boot * M] * M).astype(np.int64)
    out = []
    for b in range(n_boot):
        idx = idx_all[b * M:(b + 1) * M]
        Ab = A[np.ix_(idx, idx)]
        pb = phi_values[idx] - phi_values[idx].mean()
        out.append(solve_resolvent(Ab, pb).sigma)
    return float(np.std(out, ddof=1)) if n_boot > 1 else float("nan")


def predict_path(spec, cfg, phi, common, M, m2=None, n_boot=0, quad_samples=8, with_matrix=False):
    paths = simulate_iid_given_common(spec, cfg, common, M, tag="kernel")
    vals = phi(paths.states, paths.grid)
    center = vals.mean()
    phic = vals - center
    if m2:
        m_hat, m_se = estimate_m_phi(spec, cfg, phi, common, mc_size=m2, tag=f"mphi-{phi.id}")
    else:
        m_hat, m_se = float(center), float(vals.std(ddof=1) / np.sqrt(M))
    km = build_kernel_matrix(spec, cfg, common, paths, quad_samples=quad_samples)
    sol = solve_resolvent(km, phic)
    tr = trace_diagnostics(km)
    half_delta = float("nan")
    if M >= 4:
        # the first M/2 nodes are themselves a Nystrom sample; A = G^T / M rescales by 2
        h = M // 2
        sub = vals[:h] - vals[:h].mean()
        try:
            half_delta = sol.sigma - solve_resolvent((M / h) * km.A[:h, :h], sub).sigma
        except SingularResolvent:
            pass
    bse = float("nan")
    if n_boot > 1:
        bse = bootstrap_sigma(km, vals, n_boot, StreamKey(cfg.seed, ("bootstrap", common.common_rep)))
    est = PathEstimate(
        common.common_rep, sol.sigma, M, float(m_hat), float(m_se), float(np.sqrt(np.mean(phic**2))),
        sol.condition_number, tr.trace_A, tr.trace_A2, tr.trace_cross, tr.frobenius_sq, bse, half_delta,
    )
    return (est, km, phic) if with_matrix else est


def predict_limit_mixture(spec, cfg, phi, R, M, m2=None, n_boot=0, first_common=0, threads=1, quad_samples=8):
    """Per-common-path limit standard deviations defining the mixture
    ``(1/R) sum_r N(0, sigma_r^2)``."""
    if R < 1:
        raise ValueError("R must be >= 1")

    def one(r):
        common = simulate_common_and_law(spec, cfg, r)
        return predict_path(spec, cfg, phi, common, M, m2, n_boot, quad_samples)

    reps = range(first_common, first_common + R)
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            ests = list(pool.map(one, reps))
    else:
        ests = [one(r) for r in reps]
    return LimitLawEstimate(ests)
