"""Path simulation under volatility uncertainty.

Each admissible volatility control (a process valued in the uncertainty
interval) induces one ordinary diffusion; the worst-case expectation is
the supremum over controls.  This module samples controls as
piecewise-constant-per-step laws, tracks the quadratic variation, fills
the forward state by Euler steps, and estimates upper expectations both
by Monte Carlo over a finite policy set (a certified lower bound on the
sup) and exactly through the degenerate parabolic solve.

Randomness is counter-based: each batch of paths draws from a Philox
stream keyed by (seed, batch start), so ensembles are byte-identical
across runs and across batch-parallel execution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import pde
from .envelope import Modulus, ScalarGenerator
from .expr import Expr, Num, evaluate, free_vars
from .gfunction import GParams, worst_case_q

_BATCH = 5000  # fixed so outputs do not depend on ensemble size chunking


class ConstantPolicy:
    """Constant instantaneous variance; must lie inside the interval."""

    def __init__(self, variance: float, gparams: GParams):
        if not (gparams.sigma_low_sq - 1e-12 <= variance <= gparams.sigma_high_sq + 1e-12):
            raise ValueError(
                f"variance {variance} outside "
                f"[{gparams.sigma_low_sq}, {gparams.sigma_high_sq}]"
            )
        self.var = float(variance)
        self.gparams = gparams

    def variance(self, t, state):
        return np.full_like(np.asarray(state, dtype=float), self.var)

    def describe(self) -> str:
        return f"constant({self.var:g})"


class FeedbackPolicy:
    """Worst-case feedback law read off a solved value function.

    At (t, x) the instantaneous variance is the maximizer of G applied to
    the Hamiltonian assembled from finite differences of u.  States
    outside the solver domain are clamped to it; the emitted variance is
    always admissible.
    """

    def __init__(self, sol: "pde.PdeSolution", problem: "pde.PdeProblem"):
        self.sol = sol
        self.problem = problem
        self.gparams = problem.gparams

    def variance(self, t, state):
        x = np.asarray(state, dtype=float)
        sol, problem = self.sol, self.problem
        t = min(t, float(sol.times[-1]))
        xc = np.clip(x, sol.grid.x_min + sol.grid.dx, sol.grid.x_max - sol.grid.dx)
        u = pde.eval_u_batch(sol, t, xc)
        p = pde.grad_x_batch(sol, t, xc)
        d2 = pde.second_diff_batch(sol, t, xc)
        b, h, sigma = pde._coef_fields(problem, t, xc)
        gval = np.asarray(
            problem.g.eval_grid(t, xc, u, sigma * p), dtype=float
        )
        ham = sigma**2 * d2 + 2.0 * h * p + 2.0 * gval
        ham = np.broadcast_to(ham, xc.shape)
        # sub-rounding curvature is a tie, resolved like the exact tie at 0
        ham = np.where(np.abs(ham) < 1e-9, 0.0, ham)
        return worst_case_q(self.gparams, ham)

    def describe(self) -> str:
        return "feedback"


@dataclass
class PathEnsemble:
    """Simulated driving paths and, once filled, the forward state.

    B and QV have shape (n_paths, n_steps+1) with B[:,0]=0, QV[:,0]=0;
    control has shape (n_paths, n_steps) and records the variance used on
    each step.  X is None until euler_forward runs.
    """

    n_paths: int
    n_steps: int
    dt: float
    t0: float
    seed: int
    policy_name: str
    B: np.ndarray
    QV: np.ndarray
    control: np.ndarray
    X: np.ndarray | None = None

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_steps + 1)


def simulate_paths(policy, gparams: GParams, t0, T, dt, n_paths, seed) -> PathEnsemble:
    """Sample (B, QV) on [t0, T] under one volatility control.

    dt must divide T - t0 within rounding; increments are Gaussian
    conditional on the control, dB = sqrt(var*dt)*xi, dQV = var*dt.
    """
    span = T - t0
    n_steps = int(round(span / dt))
    if n_steps < 1 or abs(n_steps * dt - span) > 1e-9 * max(1.0, span):
        raise ValueError(f"dt={dt} does not divide the horizon {span}")
    if n_paths < 1:
        raise ValueError("n_paths must be at least 1")
    B = np.empty((n_paths, n_steps + 1))
    QV = np.empty((n_paths, n_steps + 1))
    control = np.empty((n_paths, n_steps))
    lo, hi = gparams.sigma_low_sq, gparams.sigma_high_sq
    for start in range(0, n_paths, _BATCH):
        nb = min(_BATCH, n_paths - start)
        rng = np.random.Generator(np.random.Philox(key=[seed, start]))
        xi = rng.standard_normal((nb, n_steps))
        b = np.zeros(nb)
        qv = np.zeros(nb)
        B[start : start + nb, 0] = 0.0
        QV[start : start + nb, 0] = 0.0
        for k in range(n_steps):
            var = np.asarray(policy.variance(t0 + k * dt, b), dtype=float)
            var = np.broadcast_to(var, b.shape)
            if np.any(var < lo - 1e-12) or np.any(var > hi + 1e-12):
                raise ValueError("policy emitted an inadmissible variance")
            b = b + np.sqrt(var * dt) * xi[:, k]
            qv = qv + var * dt
            B[start : start + nb, k + 1] = b
            QV[start : start + nb, k + 1] = qv
            control[start : start + nb, k] = var
    return PathEnsemble(
        n_paths, n_steps, float(dt), float(t0), int(seed),
        policy.describe() if hasattr(policy, "describe") else "custom",
        B, QV, control,
    )


def euler_forward(coeffs: "pde.CoefficientSet", ensemble: PathEnsemble, x0, t0=None):
    """Fill the forward state: dX = b dt + h dQV + sigma dB, X[:,0]=x0."""
    if t0 is None:
        t0 = ensemble.t0
    n, m = ensemble.n_paths, ensemble.n_steps
    X = np.empty((n, m + 1))
    X[:, 0] = x0
    dt = ensemble.dt
    for k in range(m):
        t = t0 + k * dt
        xk = X[:, k]
        b = np.broadcast_to(np.asarray(coeffs.eval_b(t, xk), dtype=float), xk.shape)
        h = np.broadcast_to(np.asarray(coeffs.eval_h(t, xk), dtype=float), xk.shape)
        s = np.broadcast_to(np.asarray(coeffs.eval_sigma(t, xk), dtype=float), xk.shape)
        dqv = ensemble.QV[:, k + 1] - ensemble.QV[:, k]
        db = ensemble.B[:, k + 1] - ensemble.B[:, k]
        X[:, k + 1] = xk + b * dt + h * dqv + s * db
    ensemble.X = X
    return ensemble


@dataclass(frozen=True)
class McEstimate:
    """Per-policy means with standard errors; value is the max mean."""

    value: float
    se: float  # standard error of the maximizing policy
    per_policy: tuple  # of (name, mean, se)


def upper_expectation_mc(payoff: Expr, ensembles) -> McEstimate:
    """Max over policies of the Monte-Carlo mean of payoff at the final
    state (X if filled, else B).  A lower bound on the worst-case
    expectation up to sampling error."""
    if not ensembles:
        raise ValueError("need at least one ensemble")
    if free_vars(payoff) - {"x"}:
        raise ValueError("payoff must be an expression in x only")
    rows = []
    for ens in ensembles:
        terminal = (ens.X if ens.X is not None else ens.B)[:, -1]
        vals = np.broadcast_to(
            np.asarray(evaluate(payoff, {"x": terminal}), dtype=float),
            terminal.shape,
        )
        mean = float(np.mean(vals))
        se = float(np.std(vals, ddof=1) / np.sqrt(len(vals))) if len(vals) > 1 else 0.0
        rows.append((ens.policy_name, mean, se))
    best = max(range(len(rows)), key=lambda i: rows[i][1])
    return McEstimate(rows[best][1], rows[best][2], tuple(rows))


def upper_expectation_pde(
    payoff: Expr, gparams: GParams, T, x_min=-8.0, x_max=8.0, nx=1601
) -> float:
    """Worst-case expectation of payoff(B_T) via the degenerate parabolic
    solve with b=h=0, sigma=1 and no generators; value read at (0, 0)."""
    zero = ScalarGenerator.from_text("0", 0.0, Modulus("linear", c=1.0, growth_L=1.0))
    coeffs = pde.CoefficientSet(b=Num(0.0), h=Num(0.0), sigma=Num(1.0), Phi=payoff)
    problem = pde.PdeProblem(coeffs, zero, zero, gparams, float(T), 0.0)
    grid = pde.build_grid(problem, x_min, x_max, nx)
    sol = pde.solve(problem, grid)
    return pde.eval_u(sol, 0.0, 0.0)


def ensemble_to_csv(ensemble: PathEnsemble, path, max_paths: int = 100) -> None:
    """CSV dump of the first paths (one row per path per recorded time)."""
    n = min(ensemble.n_paths, max_paths)
    times = ensemble.times
    with open(path, "w") as fh:
        fh.write("# g-bsde-lab schema v1\n")
        fh.write("path,t,B,QV" + (",X" if ensemble.X is not None else "") + "\n")
        for i in range(n):
            for k, t in enumerate(times):
                row = f"{i},{t:.17g},{ensemble.B[i, k]:.17g},{ensemble.QV[i, k]:.17g}"
                if ensemble.X is not None:
                    row += f",{ensemble.X[i, k]:.17g}"
                fh.write(row + "\n")
