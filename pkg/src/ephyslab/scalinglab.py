"""Data-constrained scaling laws: effective data/parameters, loss prediction,
robust fitting, IsoLoss grids, the compute-optimal frontier, and the
bookkeeping formulas used to compare prior models.

Loss model::

    L(N, U_D, epochs) = A / N'**alpha + B / D'**beta + E
    D' = U_D + U_D * R_D* * (1 - exp(-R_D / R_D*)),      R_D = epochs - 1
    N' = U_N + U_N * R_N* * (1 - exp(-R_N / R_N*)),      R_N = N / U_N - 1
    U_N = min(N, N_opt(U_D))

N_opt(U_D) is the Chinchilla compute-optimal size for U_D tokens. Minimizing
A/N**alpha + B/D**beta subject to C = 6*N*D gives
N_opt = G * (C/6)**(beta/(alpha+beta)) and D_opt = (C/6)**(alpha/(alpha+beta)) / G
with G = (alpha*A / (beta*B))**(1/(alpha+beta)). Eliminating C/6 between the
two yields N_opt(D) = G * (G*D)**(beta/alpha).
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from scipy.optimize import least_squares, minimize

log = logging.getLogger(__name__)

REFERENCE_CHANNEL_HOURS = 352_035.0
TOKENS_PER_SAMPLE = 32 * 30 * 0.75 * 0.75  # 540
IEEG_SAMPLES = 636_480
IEEG_UNIQUE_TOKENS = IEEG_SAMPLES * TOKENS_PER_SAMPLE

# 1 s iEEG model family sizes
MODEL_GRID_1S = (13.03e6, 51.36e6, 115.00e6, 203.95e6, 812.85e6, 1.83e9)
EPOCH_GRID = (1, 2, 4, 8, 16, 32, 64)


@dataclass
class FittedLaw:
    A: float
    B: float
    E: float
    alpha: float
    beta: float
    R_D_star: float
    R_N_star: float
    r2_linear: float = float("nan")
    r2_log: float = float("nan")

    def __post_init__(self):
        if not (self.A > 0 and self.B > 0 and self.E >= 0 and self.alpha > 0 and self.beta > 0
                and self.R_D_star > 0 and self.R_N_star > 0):
            raise ValueError(f"invalid scaling-law parameters: {self}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FittedLaw":
        keys = ("A", "B", "E", "alpha", "beta", "R_D_star", "R_N_star", "r2_linear", "r2_log")
        return cls(**{k: float(d[k]) for k in keys if k in d})


# Reference fits for the iEEG 1 s and 0.1 s families.
LAW_IEEG_1S = FittedLaw(A=19.217, B=57.065, E=0.0092, alpha=0.3773, beta=0.3504,
                        R_D_star=9.5372, R_N_star=3.3850, r2_linear=0.7858, r2_log=0.8152)
LAW_IEEG_01S = FittedLaw(A=101.52, B=1.1550, E=0.0030, alpha=0.5248, beta=0.1246,
                         R_D_star=19.705, R_N_star=0.7191, r2_linear=0.7575, r2_log=0.7718)


@dataclass
class ScalingObservation:
    params: float
    unique_tokens: float
    epochs: float
    loss: float

    def __post_init__(self):
        if not (self.params > 0 and self.unique_tokens > 0 and self.epochs >= 1 and self.loss > 0):
            raise ValueError(f"invalid observation: {self}")


# -- effective terms -----------------------------------------------------------

def effective_data(U_D, R_D, R_D_star):
    """Repeated data decays with half-life R_D*; bounded by U_D * (1 + R_D*)."""
    U_D, R_D = np.asarray(U_D, dtype=float), np.asarray(R_D, dtype=float)
    if np.isinf(R_D).any():
        return U_D + U_D * R_D_star * np.where(np.isinf(R_D), 1.0, -np.expm1(-R_D / R_D_star))
    return U_D + U_D * R_D_star * -np.expm1(-R_D / R_D_star)


def optimal_params(U_D, law: FittedLaw):
    """Chinchilla compute-optimal parameter count for U_D tokens."""
    a, b = law.alpha, law.beta
    g = (a * law.A / (b * law.B)) ** (1.0 / (a + b))
    return g * (g * np.asarray(U_D, dtype=float)) ** (b / a)


def effective_params(N, U_D, law: FittedLaw):
    N = np.asarray(N, dtype=float)
    u_n = np.minimum(N, optimal_params(U_D, law))
    r_n = N / u_n - 1.0
    if np.isinf(r_n).any():
        return u_n + u_n * law.R_N_star * np.where(np.isinf(r_n), 1.0, -np.expm1(-r_n / law.R_N_star))
    return u_n + u_n * law.R_N_star * -np.expm1(-r_n / law.R_N_star)


def loss_from_effective(law: FittedLaw, n_eff, d_eff):
    return law.A / np.asarray(n_eff, dtype=float) ** law.alpha + law.B / np.asarray(d_eff, dtype=float) ** law.beta + law.E


def predict_loss(law: FittedLaw, N, U_D, epochs):
    epochs = np.asarray(epochs, dtype=float)
    if np.any(epochs < 1):
        raise ValueError("epochs must be >= 1")
    return loss_from_effective(law, effective_params(N, U_D, law),
                               effective_data(U_D, epochs - 1.0, law.R_D_star))


# -- fitting -------------------------------------------------------------------

HUBER_DELTA = 1e-3
_BOUNDS = [(-20.0, 30.0), (-20.0, 30.0), (-30.0, 5.0), (1e-3, 5.0), (1e-3, 5.0), (1e-3, 1e3), (1e-3, 1e3)]


def default_init_grid() -> list[tuple]:
    """Starts over (log A, log B, log E, alpha, beta, R_D*, R_N*)."""
    return list(itertools.product([0.0, 2.5, 5.0], [0.0, 2.5, 5.0], [-6.0, -3.0, -1.0],
                                  [0.1, 0.4, 0.7, 1.0], [0.1, 0.4, 0.7, 1.0],
                                  [0.5, 5.0, 30.0], [0.5, 5.0, 30.0]))


def _log_pred_torch(theta, n, u, ep):
    """theta is (7,) or (G, 7, 1) for batched scoring against (M,) observations."""
    log_a, log_b, log_e, a, b, rd, rn = theta.unbind(-2 if theta.dim() == 3 else 0)
    A, B = torch.exp(log_a), torch.exp(log_b)
    g = (a * A / (b * B)) ** (1.0 / (a + b))
    u_n = torch.minimum(n, g * (g * u) ** (b / a))
    n_eff = u_n + u_n * rn * -torch.expm1(-(n / u_n - 1.0) / rn)
    d_eff = u + u * rd * -torch.expm1(-(ep - 1.0) / rd)
    return torch.log(A / n_eff ** a + B / d_eff ** b + torch.exp(log_e))


def _huber(r, delta):
    a = r.abs()
    return torch.where(a <= delta, 0.5 * r * r, delta * (a - 0.5 * delta)).sum()


def _r2(pred, obs):
    return float(1.0 - np.sum((pred - obs) ** 2) / np.sum((obs - obs.mean()) ** 2))


def fit_law(observations: list[ScalingObservation], init_grid=None, n_refine: int = 20,
            delta: float = HUBER_DELTA) -> tuple[FittedLaw, dict]:
    """Robust fit of all seven law parameters to observed losses.

    Minimizes sum(huber(log L_pred - log L_obs)). Every grid start is scored,
    the best ``n_refine`` are refined with L-BFGS-B, and the winner is polished
    by a trust-region solve of the same Huber objective. Observations are
    sorted first, so the result does not depend on their order.

    Returns (law with r2 diagnostics, info dict with residuals and objective).
    """
    obs = sorted(observations, key=lambda o: (o.params, o.unique_tokens, o.epochs, o.loss))
    if len(obs) < 8:
        warnings.warn(f"only {len(obs)} observations; fit is under-determined", RuntimeWarning, stacklevel=2)
    if len({o.params for o in obs}) < 2 or len({o.epochs for o in obs}) < 2:
        warnings.warn("observations need >= 2 parameter counts and >= 2 epoch values; fit is "
                      "under-determined", RuntimeWarning, stacklevel=2)
    n = torch.tensor([o.params for o in obs])
    u = torch.tensor([o.unique_tokens for o in obs])
    ep = torch.tensor([o.epochs for o in obs])
    log_obs = torch.log(torch.tensor([o.loss for o in obs]))

    def objective(x):
        th = torch.tensor(x, requires_grad=True)
        val = _huber(_log_pred_torch(th, n, u, ep) - log_obs, delta)
        if not torch.isfinite(val):
            return 1e30, np.zeros_like(x)
        val.backward()
        g = th.grad.numpy().copy()
        return val.item(), np.where(np.isfinite(g), g, 0.0)

    grid = np.asarray(init_grid if init_grid is not None else default_init_grid(), dtype=float)
    with torch.no_grad():
        r = _log_pred_torch(torch.tensor(grid)[:, :, None], n, u, ep) - log_obs
        a = r.abs()
        scores = torch.where(a <= delta, 0.5 * r * r, delta * (a - 0.5 * delta)).sum(-1).numpy()
        scores = np.where(np.isfinite(scores), scores, np.inf)
    starts = grid[np.argsort(scores, kind="stable")[:n_refine]]

    best = None
    for x0 in starts:
        res = minimize(objective, x0, jac=True, method="L-BFGS-B", bounds=_BOUNDS,
                       options={"maxiter": 5000, "ftol": 1e-16, "gtol": 1e-14})
        if best is None or res.fun < best.fun:
            best = res

    def residuals(x):
        with torch.no_grad():
            return (_log_pred_torch(torch.tensor(x), n, u, ep) - log_obs).numpy()

    lo, hi = np.array(_BOUNDS).T
    x0 = np.clip(best.x, lo + 1e-12, hi - 1e-12)
    polished = least_squares(residuals, x0, bounds=(lo, hi), loss="huber", f_scale=delta,
                             x_scale="jac", xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=20000)
    x = polished.x if objective(polished.x)[0] <= best.fun else best.x
    fun = min(objective(polished.x)[0], best.fun)

    log_pred = residuals(x) + log_obs.numpy()
    law = FittedLaw(A=math.exp(x[0]), B=math.exp(x[1]), E=math.exp(x[2]), alpha=float(x[3]), beta=float(x[4]),
                    R_D_star=float(x[5]), R_N_star=float(x[6]))
    law.r2_log = _r2(log_pred, log_obs.numpy())
    law.r2_linear = _r2(np.exp(log_pred), np.exp(log_obs.numpy()))
    info = {"objective": fun, "residuals_log": (log_pred - log_obs.numpy()).tolist(),
            "n_observations": len(obs), "n_starts": len(grid), "n_refined": len(starts)}
    return law, info


def synthetic_observations(law: FittedLaw, params=MODEL_GRID_1S, epochs=EPOCH_GRID,
                           unique_tokens: float = IEEG_UNIQUE_TOKENS, noise: float = 0.0,
                           rng: np.random.Generator | None = None) -> list[ScalingObservation]:
    """Losses predicted by ``law`` on a (params x epochs) grid, with optional multiplicative noise."""
    out = []
    for n in params:
        for e in epochs:
            loss = float(predict_loss(law, n, unique_tokens, e))
            if noise:
                loss *= 1.0 + noise * rng.standard_normal()
            out.append(ScalingObservation(n, unique_tokens, e, loss))
    return out


# -- compute grids and frontier ------------------------------------------------

def flops_per_epoch(N, tokens_per_epoch, k: float = 6.0):
    if k <= 0:
        raise ValueError("FLOPs constant must be positive")
    return k * np.asarray(N, dtype=float) * np.asarray(tokens_per_epoch, dtype=float)


@dataclass
class ComputeGrid:
    params: np.ndarray  # (P,)
    epochs: np.ndarray  # (E,)
    loss: np.ndarray  # (P, E)
    flops: np.ndarray  # (P, E), total training FLOPs

    def rows(self):
        for i, n in enumerate(self.params):
            for j, e in enumerate(self.epochs):
                yield float(n), float(e), float(self.loss[i, j]), float(self.flops[i, j])


def isoloss_grid(law: FittedLaw, U_D: float, param_axis, epoch_axis, k: float = 6.0) -> ComputeGrid:
    """Predicted loss and total FLOPs (flops_per_epoch * epochs) over params x epochs."""
    p = np.asarray(param_axis, dtype=float)
    e = np.asarray(epoch_axis, dtype=float)
    if p.size == 0 or e.size == 0 or (p <= 0).any() or (e <= 0).any():
        raise ValueError("grid axes must be nonempty and positive")
    if (np.diff(p) <= 0).any() or (np.diff(e) <= 0).any():
        raise ValueError("grid axes must be strictly increasing")
    pp, ee = np.meshgrid(p, e, indexing="ij")
    return ComputeGrid(p, e, predict_loss(law, pp, U_D, ee), flops_per_epoch(pp, U_D, k) * ee)


@dataclass
class FrontierPoint:
    budget: float
    params: float | None
    epochs: float | None
    loss: float | None

    @property
    def feasible(self) -> bool:
        return self.params is not None


def compute_frontier(grid: ComputeGrid, budgets) -> list[FrontierPoint]:
    """Lowest-loss cell with FLOPs <= budget for each budget; ties go to the smaller model.

    Budgets below the cheapest cell come back as infeasible points (params None).
    """
    out = []
    for b in budgets:
        if b <= 0:
            raise ValueError("budgets must be positive")
        best = None
        for i in range(len(grid.params)):  # ascending params, so strict < keeps the smaller N on ties
            for j in range(len(grid.epochs)):
                if grid.flops[i, j] <= b and (best is None or grid.loss[i, j] < grid.loss[best]):
                    best = (i, j)
        if best is None:
            out.append(FrontierPoint(float(b), None, None, None))
        else:
            out.append(FrontierPoint(float(b), float(grid.params[best[0]]), float(grid.epochs[best[1]]),
                                     float(grid.loss[best])))
    return out


# -- bookkeeping formulas ------------------------------------------------------

def scaled_epochs(src_channel_hours, src_epochs, ref_channel_hours=REFERENCE_CHANNEL_HOURS):
    return src_channel_hours * src_epochs / ref_channel_hours


def transformer_param_estimate(d: int, r: int, L: int, extra: float = 0.0) -> float:
    """extra + L * (4d^2 + 2dr + r + 9d): QKV/out, FFN, two norms + biases per layer."""
    return extra + L * (4 * d * d + 2 * d * r + r + 9 * d)


def estimate_epochs(updates, batch, accum, n_samples):
    return updates * batch * accum / n_samples


def channel_hours(trials, channels, seconds):
    return trials * channels * seconds / 3600.0


# Prior models: (name, channel-hours, training epochs). LaBraM uses the midpoint of 76.8-83.7k.
PRIOR_MODELS = (
    ("BrainBERT", 4_500.0, 39.0),
    ("Brant", 281_000.0, 32.0),
    ("BIOT", 312_000.0, 100.0),
    ("Neuro-GPT", 541_000.0, 135.0),
    ("LaBraM", 80_250.0, 50.0),
    ("EEGPT", 11_100.0, 200.0),
    ("CBraMod", 175_700.0, 40.0),
)


def scaled_epochs_table(models=PRIOR_MODELS, ref_channel_hours=REFERENCE_CHANNEL_HOURS) -> list[dict]:
    return [{"model": name, "channel_hours": ch, "epochs": ep,
             "scaled_epochs": scaled_epochs(ch, ep, ref_channel_hours)} for name, ch, ep in models]


# -- CSV / JSON I/O ------------------------------------------------------------

OBS_COLUMNS = ("params", "unique_tokens", "epochs", "loss")


class CSVFormatError(ValueError):
    pass


def read_observations(text: str) -> list[ScalingObservation]:
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None or set(OBS_COLUMNS) - set(reader.fieldnames):
        raise CSVFormatError(f"header must contain {', '.join(OBS_COLUMNS)}")
    out = []
    for lineno, row in enumerate(reader, start=2):
        try:
            out.append(ScalingObservation(*(float(row[c]) for c in OBS_COLUMNS)))
        except (TypeError, ValueError) as e:
            raise CSVFormatError(f"row {lineno}: {e}") from e
    return out


def write_observations(obs: list[ScalingObservation]) -> str:
    return _csv(OBS_COLUMNS, [(o.params, o.unique_tokens, o.epochs, o.loss) for o in obs])


def _fmt(x) -> str:
    return "" if x is None else f"{x:.9g}"


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) if not isinstance(v, str) else v for v in r])
    return buf.getvalue()


def contour_csv(grid: ComputeGrid) -> str:
    return _csv(("params", "epochs", "loss", "flops"), grid.rows())


def frontier_csv(points: list[FrontierPoint]) -> str:
    pts = sorted(points, key=lambda p: p.budget)
    return _csv(("budget", "params", "epochs", "loss"), [(p.budget, p.params, p.epochs, p.loss) for p in pts])


def fit_report(law: FittedLaw, info: dict) -> str:
    return json.dumps({"law": law.to_dict(), **info}, indent=2)
