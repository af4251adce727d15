"""Built-in models with analytic derivative families.

* ``decoupled``: no interaction, no common dependence (closed-form laws).
* ``example1``: coefficients depend on the measure through finitely many
  averages ``u_i = <tanh(. - c_i), nu>``.
* ``example2``: pairwise interaction ``b = int btilde(x, y, x') nu(dx')``.
* ``finance``: default-contagion model with state ``(x, count)`` and a common
  macro factor; the intensity is floored away from zero.
"""

import numpy as np
from scipy.special import expit

from . import kernels
from .model import ModelDerivatives, ModelError, ModelSpec, SampleableMeasure

PRESETS = ("decoupled", "example1", "example2", "finance")


class PresetError(ModelError):
    pass


def _sech2(v):
    c = np.cosh(np.clip(v, -350, 350))
    return 1.0 / (c * c)


def _dexpit(s):
    e = expit(s)
    return e * (1.0 - e)


def _merge(defaults, params, name):
    params = dict(params or {})
    unknown = sorted(set(params) - set(defaults))
    if unknown:
        raise PresetError(f"unknown parameters for preset {name!r}: {unknown}")
    out = dict(defaults)
    out.update(params)
    return out


def _vec(v, n=None, name="parameter"):
    a = np.atleast_1d(np.asarray(v, dtype=float))
    if n is not None and a.shape != (n,):
        raise PresetError(f"{name} must have length {n}")
    return a


def build_preset(name, params=None):
    try:
        builder = _BUILDERS[name]
    except KeyError:
        raise PresetError(f"unknown preset {name!r}; choose from {PRESETS}") from None
    return builder(params)


# ------------------------------------------------------------------ decoupled


def _decoupled(params):
    p = _merge(
        {"dim_x": 1, "dim_y": 1, "drift": 0.0, "rate": 1.0, "jump_mass": 0.0, "jump_size": 0.5,
         "x0_mean": 0.0, "x0_std": 1.0, "y0_std": 1.0, "rate_upper": 2.0},
        params, "decoupled",
    )
    d, m = int(p["dim_x"]), int(p["dim_y"])
    if d < 1 or m < 1:
        raise PresetError("dimensions must be >= 1")
    drift = np.broadcast_to(_vec(p["drift"]), (d,)).astype(float)
    rate, K = float(p["rate"]), float(p["rate_upper"])
    if not 0 < rate <= K:
        raise PresetError("rate must lie in (0, rate_upper]")

    def b(x, y, nu):
        return np.broadcast_to(drift, (x.shape[0], d)).copy()

    def b0(y, nu):
        return np.zeros(m)

    def dd(x, y, nu, h):
        return np.full(x.shape[0], rate)

    def d0(k):
        return np.zeros(np.atleast_2d(k).shape[0])

    zero_der = ModelDerivatives(
        b2=lambda x, y, nu: np.zeros((x.shape[0], d, m)),
        b3=lambda x, y, nu, xt: np.zeros((x.shape[0], xt.shape[0], d)),
        b02=lambda y, nu: np.zeros((m, m)),
        b03=lambda y, nu, xt: np.zeros((xt.shape[0], m)),
        d2=lambda x, y, h, nu: np.zeros((x.shape[0], m)),
        d3=lambda x, y, h, nu, xt: np.zeros((x.shape[0], xt.shape[0])),
        b3_mean=lambda x, y, nu: np.zeros((x.shape[0], d)),
        b03_mean=lambda y, nu: np.zeros(m),
        d3_mean=lambda x, y, h, nu: np.zeros(x.shape[0]),
        vanishing=frozenset({"b2", "b3", "b02", "b03", "d2", "d3"}),
    )
    js = float(p["jump_size"])
    if p["jump_mass"] > 0:
        pts = np.zeros((2, d))
        pts[:, 0] = [js, -js]
        gamma = SampleableMeasure.atomic(pts, [p["jump_mass"] / 2] * 2)
    else:
        gamma = SampleableMeasure.zero(d)
    return ModelSpec(
        name="decoupled", dim_x=d, dim_y=m, drift_b=b, drift_b0=b0,
        diffusion_sigma=np.eye(d), diffusion_sigma0=np.eye(m),
        jump_rate_d=dd, jump_rate_d0=d0, gamma=gamma, gamma0=SampleableMeasure.zero(m),
        rate_lower=min(rate, 0.5 * K), rate_upper=K, derivatives=zero_der,
        init_mu0=SampleableMeasure.gaussian(np.full(d, p["x0_mean"]), np.full(d, p["x0_std"])),
        init_rho0=SampleableMeasure.gaussian(np.zeros(m), np.full(m, p["y0_std"])),
        functionals=None, params=p,
    )


# ------------------------------------------------------------------ example 1


def _example1(params):
    p = _merge(
        {"k": 1, "centers": None, "kappa": 1.0, "a": 0.5, "coupling": None, "gy": 0.5,
         "kappa0": 1.0, "coupling0": None, "eps": 0.2, "rate_max": 2.5, "alpha_x": 0.5,
         "alpha_y": 1.5, "alpha_u": None, "jump_size": 0.7, "jump_mass": 1.0,
         "rate0": 0.5, "jump0": 0.5, "x0_mean": 0.0, "x0_std": 0.5, "y0_mean": 0.0, "y0_std": 1.0,
         "rate_upper": 3.0},
        params, "example1",
    )
    k = int(p["k"])
    if k < 1:
        raise PresetError("k must be >= 1")
    centers = _vec(p["centers"] if p["centers"] is not None else np.linspace(-0.5, 0.5, k) if k > 1 else [0.0], k, "centers")
    c = _vec(p["coupling"] if p["coupling"] is not None else np.full(k, 0.8 / k), k, "coupling")
    c0 = _vec(p["coupling0"] if p["coupling0"] is not None else np.full(k, 0.5 / k), k, "coupling0")
    au = _vec(p["alpha_u"] if p["alpha_u"] is not None else np.full(k, 1.0 / k), k, "alpha_u")
    kappa, a, gy, kappa0 = (float(p[q]) for q in ("kappa", "a", "gy", "kappa0"))
    eps, rmax, ax, ay = (float(p[q]) for q in ("eps", "rate_max", "alpha_x", "alpha_y"))
    K = float(p["rate_upper"])
    if not 0 < eps < rmax <= K:
        raise PresetError("need 0 < eps < rate_max <= rate_upper")
    if not 0 <= p["rate0"] < K:
        raise PresetError("rate0 must lie in [0, rate_upper)")
    span = rmax - eps

    def feats(pts):
        return np.tanh(pts[:, :1] - centers[None, :])  # (p, k)

    def u_of(nu):
        return nu.expect("ex1_u", feats)

    def b(x, y, nu):
        u = u_of(nu)
        ty = np.tanh(y[0])
        return -kappa * np.tanh(x) + a * ty + (1.0 + gy * ty) * float(c @ u)

    def b0(y, nu):
        return np.array([-kappa0 * np.tanh(y[0]) + float(c0 @ u_of(nu))])

    def score(x, y, nu):
        return ax * np.tanh(x[:, 0]) + ay * y[0] + float(au @ u_of(nu))

    def dd(x, y, nu, h):
        return eps + span * expit(score(x, y, nu))

    def d0(kk):
        return np.full(np.atleast_2d(kk).shape[0], float(p["rate0"]))

    def b2(x, y, nu):
        s = _sech2(y[0])
        return np.full((x.shape[0], 1, 1), a * s + gy * s * float(c @ u_of(nu)))

    def b3(x, y, nu, xt):
        row = (1.0 + gy * np.tanh(y[0])) * (feats(xt) @ c)  # (p,)
        return np.broadcast_to(row[None, :, None], (x.shape[0], xt.shape[0], 1)).copy()

    def b3_mean(x, y, nu):
        return np.full((x.shape[0], 1), (1.0 + gy * np.tanh(y[0])) * float(c @ u_of(nu)))

    def b02(y, nu):
        return np.array([[-kappa0 * _sech2(y[0])]])

    def b03(y, nu, xt):
        return (feats(xt) @ c0)[:, None]

    def b03_mean(y, nu):
        return np.array([float(c0 @ u_of(nu))])

    def d2(x, y, h, nu):
        return (span * _dexpit(score(x, y, nu)) * ay)[:, None]

    def d3(x, y, h, nu, xt):
        return span * _dexpit(score(x, y, nu))[:, None] * (feats(xt) @ au)[None, :]

    def d3_mean(x, y, h, nu):
        return span * _dexpit(score(x, y, nu)) * float(au @ u_of(nu))

    def functionals(x, y, pts):
        f = feats(pts)
        return np.broadcast_to(f[None], (x.shape[0],) + f.shape)

    js, jm = float(p["jump_size"]), float(p["jump_mass"])
    gamma = SampleableMeasure.atomic([[js], [-js]], [jm / 2, jm / 2]) if jm > 0 else SampleableMeasure.zero(1)
    j0 = float(p["jump0"])
    gamma0 = SampleableMeasure.atomic([[j0], [-j0]], [0.5, 0.5]) if p["rate0"] > 0 else SampleableMeasure.zero(1)
    der = ModelDerivatives(b2, b3, b02, b03, d2, d3, b3_mean, b03_mean, d3_mean)
    return ModelSpec(
        name="example1", dim_x=1, dim_y=1, drift_b=b, drift_b0=b0,
        diffusion_sigma=np.eye(1), diffusion_sigma0=np.eye(1),
        jump_rate_d=dd, jump_rate_d0=d0, gamma=gamma, gamma0=gamma0,
        rate_lower=eps, rate_upper=K, derivatives=der,
        init_mu0=SampleableMeasure.gaussian([p["x0_mean"]], [p["x0_std"]]),
        init_rho0=SampleableMeasure.gaussian([p["y0_mean"]], [p["y0_std"]]),
        functionals=functionals, params=p,
    )


# ------------------------------------------------------------------ example 2


def _pairwise_mean(fn, x, pts, chunk=2048):
    # mean over pts of fn(x[:, None], pts[None, :]) without an (n, p) blow-up
    out = np.zeros(x.shape[0])
    for s in range(0, pts.shape[0], chunk):
        out += fn(x[:, None], pts[None, s:s + chunk]).sum(axis=1)
    return out / pts.shape[0]


def _example2(params):
    p = _merge(
        {"pairwise": False, "kappa": 1.0, "a": 0.5, "c": 0.8, "kappa0": 1.0, "c0": 0.5,
         "eps": 0.2, "rate_max": 2.5, "alpha_y": 1.0, "alpha_c": 1.0, "jump_size": 0.7,
         "jump_mass": 1.0, "rate0": 0.5, "jump0": 0.5, "x0_mean": 0.0, "x0_std": 0.5,
         "y0_mean": 0.0, "y0_std": 1.0, "rate_upper": 3.0},
        params, "example2",
    )
    if not p["pairwise"]:
        raise PresetError("example2 evaluates a general pairwise kernel at O(N^2) cost per step; set pairwise=true to allow it")
    kappa, a, c, kappa0, c0 = (float(p[q]) for q in ("kappa", "a", "c", "kappa0", "c0"))
    eps, rmax, ay, ac = (float(p[q]) for q in ("eps", "rate_max", "alpha_y", "alpha_c"))
    K = float(p["rate_upper"])
    if not 0 < eps < rmax <= K:
        raise PresetError("need 0 < eps < rate_max <= rate_upper")
    if not 0 <= p["rate0"] < K:
        raise PresetError("rate0 must lie in [0, rate_upper)")
    span = rmax - eps

    def mean_tanh(nu):
        return float(nu.expect("ex2_tanh", lambda pts: np.tanh(pts[:, 0])))

    def inter(x, nu):
        return kernels.pairwise_tanh_mean(x[:, 0], nu.sorted_column(0))

    def b(x, y, nu):
        return (-kappa * np.tanh(x[:, 0]) + a * np.tanh(y[0]) + c * inter(x, nu))[:, None]

    def b0(y, nu):
        return np.array([-kappa0 * np.tanh(y[0]) + c0 * mean_tanh(nu)])

    def dd(x, y, nu, h):
        off = np.full(x.shape[0], ay * y[0])
        return eps + span * kernels.pairwise_sigmoid_tanh_mean(x[:, 0], nu.sorted_column(0), off, ac)

    def d0(kk):
        return np.full(np.atleast_2d(kk).shape[0], float(p["rate0"]))

    def b2(x, y, nu):
        return np.full((x.shape[0], 1, 1), a * _sech2(y[0]))

    def b3(x, y, nu, xt):
        return (c * np.tanh(xt[None, :, 0] - x[:, None, 0]))[:, :, None]

    def b3_mean(x, y, nu):
        return (c * inter(x, nu))[:, None]

    def b02(y, nu):
        return np.array([[-kappa0 * _sech2(y[0])]])

    def b03(y, nu, xt):
        return c0 * np.tanh(xt[:, :1])

    def b03_mean(y, nu):
        return np.array([c0 * mean_tanh(nu)])

    def d2(x, y, h, nu):
        off = ay * y[0]
        return (span * ay * _pairwise_mean(lambda xi, xj: _dexpit(off + ac * np.tanh(xj - xi)), x[:, 0], nu.sorted_column(0)))[:, None]

    def d3(x, y, h, nu, xt):
        return span * expit(ay * y[0] + ac * np.tanh(xt[None, :, 0] - x[:, None, 0]))

    def d3_mean(x, y, h, nu):
        return dd(x, y, nu, h) - eps

    def functionals(x, y, pts):
        diff = pts[None, :, 0] - x[:, None, 0]
        s = ay * y[0] + ac * np.tanh(diff)
        return np.stack([np.tanh(diff), expit(s), 4.0 * _dexpit(s)], axis=-1)

    js, jm = float(p["jump_size"]), float(p["jump_mass"])
    gamma = SampleableMeasure.atomic([[js], [-js]], [jm / 2, jm / 2]) if jm > 0 else SampleableMeasure.zero(1)
    j0 = float(p["jump0"])
    gamma0 = SampleableMeasure.atomic([[j0], [-j0]], [0.5, 0.5]) if p["rate0"] > 0 else SampleableMeasure.zero(1)
    der = ModelDerivatives(b2, b3, b02, b03, d2, d3, b3_mean, b03_mean, d3_mean)
    return ModelSpec(
        name="example2", dim_x=1, dim_y=1, drift_b=b, drift_b0=b0,
        diffusion_sigma=np.eye(1), diffusion_sigma0=np.eye(1),
        jump_rate_d=dd, jump_rate_d0=d0, gamma=gamma, gamma0=gamma0,
        rate_lower=eps, rate_upper=K, derivatives=der,
        init_mu0=SampleableMeasure.gaussian([p["x0_mean"]], [p["x0_std"]]),
        init_rho0=SampleableMeasure.gaussian([p["y0_mean"]], [p["y0_std"]]),
        functionals=functionals, params=p,
    )


# ------------------------------------------------------------------ finance

_ZETAS = {
    "min_abs_one": lambda v: np.minimum(np.abs(v), 1.0),
    "tanh_abs": lambda v: np.tanh(np.abs(v)),
}


def _finance(params):
    p = _merge(
        {"kappa": 1.0, "cu": 0.5, "cl": 0.5, "kappa0": 1.0, "c0": 0.5, "lam_min": 0.1,
         "lam_max": 1.5, "bias": -0.5, "ax": 0.5, "au": 1.0, "al": 1.0, "zeta": "min_abs_one",
         "x0_mean": 0.0, "x0_std": 0.5, "u0_mean": 0.0, "u0_std": 1.0, "rate_upper": 2.0},
        params, "finance",
    )
    kappa, cu, cl, kappa0, c0 = (float(p[q]) for q in ("kappa", "cu", "cl", "kappa0", "c0"))
    lam_min, lam_max, bias = float(p["lam_min"]), float(p["lam_max"]), float(p["bias"])
    ax, au, al, K = float(p["ax"]), float(p["au"]), float(p["al"]), float(p["rate_upper"])
    if not lam_min > 0:
        raise PresetError("intensity must be bounded away from 0 (lam_min > 0)")
    if not lam_min < lam_max <= K:
        raise PresetError("need lam_min < lam_max <= rate_upper")
    if p["zeta"] not in _ZETAS:
        raise PresetError(f"zeta must be one of {sorted(_ZETAS)}")
    zeta = _ZETAS[p["zeta"]]
    span = lam_max - lam_min

    def zmean(nu):
        return float(nu.expect("fin_l", lambda pts: zeta(pts[:, 1])))

    def b(z, y, nu):
        out = np.zeros_like(z)
        out[:, 0] = -kappa * np.tanh(z[:, 0]) + cu * np.tanh(y[0]) + cl * zmean(nu)
        return out

    def b0(y, nu):
        return np.array([-kappa0 * np.tanh(y[0]) - c0 * zmean(nu)])

    def score(z, y, nu):
        return bias + ax * np.tanh(z[:, 0]) + au * np.tanh(y[0]) + al * zmean(nu)

    def dd(z, y, nu, h):
        return lam_min + span * expit(score(z, y, nu))

    def d0(kk):
        return np.zeros(np.atleast_2d(kk).shape[0])

    def b2(z, y, nu):
        out = np.zeros((z.shape[0], 2, 1))
        out[:, 0, 0] = cu * _sech2(y[0])
        return out

    def b3(z, y, nu, zt):
        out = np.zeros((z.shape[0], zt.shape[0], 2))
        out[:, :, 0] = cl * zeta(zt[:, 1])[None, :]
        return out

    def b3_mean(z, y, nu):
        out = np.zeros((z.shape[0], 2))
        out[:, 0] = cl * zmean(nu)
        return out

    def b02(y, nu):
        return np.array([[-kappa0 * _sech2(y[0])]])

    def b03(y, nu, zt):
        return -c0 * zeta(zt[:, 1:2])

    def b03_mean(y, nu):
        return np.array([-c0 * zmean(nu)])

    def d2(z, y, h, nu):
        return (span * _dexpit(score(z, y, nu)) * au * _sech2(y[0]))[:, None]

    def d3(z, y, h, nu, zt):
        return span * _dexpit(score(z, y, nu))[:, None] * (al * zeta(zt[:, 1]))[None, :]

    def d3_mean(z, y, h, nu):
        return span * _dexpit(score(z, y, nu)) * al * zmean(nu)

    def functionals(z, y, pts):
        f = zeta(pts[:, 1])[:, None]
        return np.broadcast_to(f[None], (z.shape[0],) + f.shape)

    der = ModelDerivatives(b2, b3, b02, b03, d2, d3, b3_mean, b03_mean, d3_mean)
    return ModelSpec(
        name="finance", dim_x=2, dim_y=1, drift_b=b, drift_b0=b0,
        diffusion_sigma=np.diag([1.0, 0.0]), diffusion_sigma0=np.eye(1),
        jump_rate_d=dd, jump_rate_d0=d0,
        gamma=SampleableMeasure.atomic([[0.0, 1.0]], [1.0]), gamma0=SampleableMeasure.zero(1),
        rate_lower=lam_min, rate_upper=K, derivatives=der,
        init_mu0=SampleableMeasure.gaussian([p["x0_mean"], 0.0], [p["x0_std"], 0.0]),
        init_rho0=SampleableMeasure.gaussian([p["u0_mean"]], [p["u0_std"]]),
        functionals=functionals, params=p,
    )


_BUILDERS = {"decoupled": _decoupled, "example1": _example1, "example2": _example2, "finance": _finance}
