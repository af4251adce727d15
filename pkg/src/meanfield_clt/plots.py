"""Self-contained matplotlib scripts for the report figures.

Scripts read CSV/JSON files relative to their own location, so a bundle can
be moved as a whole. Rendering is left to the user; nothing here imports
matplotlib.
"""

from pathlib import Path


class MissingArtifacts(FileNotFoundError):
    def __init__(self, missing):
        super().__init__("missing bundle files: " + ", ".join(missing))
        self.missing = list(missing)


_HEAD = '''"""Generated plot script; run with `python {name}` inside the bundle."""
import csv
import json
import math
from pathlib import Path

import matplotlib.pyplot as plt

HERE = Path(__file__).resolve().parent


def column(fname, col):
    with open(HERE / fname, newline="") as fh:
        return [float(r[col]) for r in csv.DictReader(fh)]

'''

_HIST = _HEAD + '''
values = column("fluctuation.csv", "value")
fig, ax = plt.subplots(figsize=(6, 4))
ax.hist(values, bins=60, density=True, alpha=0.6, label="fluctuation samples")
if (HERE / "limit.csv").exists():
    sigmas = column("limit.csv", "sigma")
    lo, hi = min(values), max(values)
    xs = [lo + (hi - lo) * i / 400 for i in range(401)]
    dens = [sum(math.exp(-0.5 * (x / s) ** 2) / (s * math.sqrt(2 * math.pi)) for s in sigmas if s > 0) / len(sigmas) for x in xs]
    ax.plot(xs, dens, "k-", label="predicted mixture")
ax.set_xlabel("scaled fluctuation")
ax.set_ylabel("density")
ax.legend()
fig.tight_layout()
fig.savefig(HERE / "histogram.png", dpi=150)
'''

_QQ = _HEAD + '''
theo = column("qq.csv", "theoretical_quantile")
emp = column("qq.csv", "empirical_quantile")
fig, ax = plt.subplots(figsize=(5, 5))
ax.plot(theo, emp, ".", ms=2)
lo, hi = min(theo + emp), max(theo + emp)
ax.plot([lo, hi], [lo, hi], "k--", lw=1)
ax.set_xlabel("predicted quantile")
ax.set_ylabel("empirical quantile")
fig.tight_layout()
fig.savefig(HERE / "qq.png", dpi=150)
'''

_RATES = _HEAD + '''
ns = column("rates.csv", "N")
err = column("rates.csv", "mean_sq_error")
fit = json.loads((HERE / "rates.json").read_text())
fig, ax = plt.subplots(figsize=(5, 4))
ax.loglog(ns, err, "o", label="E|Y^N_T - Y_T|^2")
ax.loglog(ns, [math.exp(fit["intercept"]) * n ** fit["slope"] for n in ns], "k-",
          label="fit slope {:.3f} (r2 {:.3f})".format(fit["slope"], fit["r2"]))
ax.set_xlabel("N")
ax.legend()
fig.tight_layout()
fig.savefig(HERE / "rates.png", dpi=150)
'''

TEMPLATES = {
    "plot_histogram.py": (("fluctuation.csv",), _HIST),
    "plot_qq.py": (("qq.csv",), _QQ),
    "plot_rates.py": (("rates.csv", "rates.json"), _RATES),
}


def emit_plots(bundle_dir):
    """Write every plot script whose inputs exist in ``bundle_dir``.

    Raises :class:`MissingArtifacts` naming all expected inputs when the
    bundle supports none of the figures.
    """
    bundle = Path(bundle_dir)
    if not bundle.is_dir():
        raise MissingArtifacts(sorted({f for req, _ in TEMPLATES.values() for f in req}))
    written = []
    for name, (required, body) in TEMPLATES.items():
        if all((bundle / f).exists() for f in required):
            target = bundle / name
            target.write_text(body.replace("{name}", name), encoding="utf-8")
            written.append(target)
    if not written:
        raise MissingArtifacts(sorted({f for req, _ in TEMPLATES.values() for f in req}))
    return written
