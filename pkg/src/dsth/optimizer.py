"""Discrete augmented-Lagrangian solver for semantic transfer hashing.

The solver minimises

    ||X - U Z||^2 + beta ||W Z - Y||^2 + alpha Tr(Z Lap Z^T)

over codes ``Z`` in {-1, +1}^{L x N} with uncorrelated (``Z Z^T = N I``) and
balanced (``Z 1 = 0``) bits.  Slack variables ``A_x = X - U Z``,
``A_y = Y - W Z`` and a binary copy ``B`` of ``Z`` split the constraints;
each sweep updates ``A``, the bases ``U, W``, ``B``, ``Z`` and then the
multipliers ``E`` with a geometrically growing penalty ``mu``.

``Lap = I - V diag(1/degree) V^T`` is the anchor-graph Laplacian and is
only ever applied through :func:`dsth.anchors.apply_laplacian`.
"""

from __future__ import annotations

import csv
import enum
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, NamedTuple

import numpy as np

from .anchors import AnchorModel, apply_laplacian
from .linalg import NumericalError, center_columns, orthonormal_complement, solve_spd, thin_svd

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class Variant(str, enum.Enum):
    """Optimizer modes; the ``dsth-*`` names are the ablations."""

    FULL = "full"
    RELAXED_ROUNDING = "dsth-i"  # continuous Z, mean-thresholded at the end
    NO_BALANCE = "dsth-ii"
    NO_UNCORRELATION = "dsth-iii"
    VISUAL_ONLY = "dsth-iv"  # graph term only, no factorisation or transfer

    @property
    def balanced(self) -> bool:
        return self is not Variant.NO_BALANCE

    @property
    def uncorrelated(self) -> bool:
        return self is not Variant.NO_UNCORRELATION


@dataclass(frozen=True)
class DsthConfig:
    code_length: int = 16
    alpha: float = 1e-4
    beta: float = 1e2
    mu0: float = 1e-2
    rho: float = 2.0
    mu_max: float = 1e6
    max_iter: int = 50
    rel_tol: float = 1e-4
    variant: Variant = Variant.FULL
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        if self.code_length < 2:
            raise ConfigError("code_length must be >= 2")
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("alpha and beta must be non-negative")
        if self.mu0 <= 0:
            raise ConfigError("mu0 must be positive")
        if self.rho <= 1:
            raise ConfigError("rho must exceed 1")
        if self.mu_max < self.mu0:
            raise ConfigError("mu_max must be >= mu0")
        if self.max_iter < 0:
            raise ConfigError("max_iter must be non-negative")

    def check_shapes(self, d_x: int, n: int) -> None:
        L = self.code_length
        if L > d_x:
            raise ConfigError(f"code_length {L} exceeds visual dimension {d_x}")
        if n < L:
            raise ConfigError(f"need at least L={L} samples, got N={n}")
        if self.variant.balanced and n < L + 1:
            # Z 1 = 0 leaves an (N-1)-dimensional row space for L orthogonal rows
            raise ConfigError(f"balanced, uncorrelated codes need N > L (got N={n}, L={L})")


@dataclass
class TrainState:
    z: np.ndarray
    b: np.ndarray
    u: np.ndarray
    w: np.ndarray
    a_x: np.ndarray
    a_y: np.ndarray
    e_x: np.ndarray
    e_y: np.ndarray
    e_z: np.ndarray
    mu: float
    iter: int = 0


@dataclass
class FitTrace:
    """Per-iteration diagnostics; ``initial_objective`` is taken before the first sweep."""

    initial_objective: float = math.nan
    objective: list = field(default_factory=list)
    objective_z: list = field(default_factory=list)
    aug_lagrangian: list = field(default_factory=list)
    res_x: list = field(default_factory=list)
    res_y: list = field(default_factory=list)
    res_zb: list = field(default_factory=list)
    mu: list = field(default_factory=list)

    COLUMNS = ("iter", "objective", "aug_lagrangian", "res_x", "res_y", "res_zb", "mu")

    def __len__(self):
        return len(self.objective)

    def rows(self):
        for i in range(len(self)):
            yield (
                i,
                self.objective[i],
                self.aug_lagrangian[i],
                self.res_x[i],
                self.res_y[i],
                self.res_zb[i],
                self.mu[i],
            )

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.COLUMNS)
            for row in self.rows():
                writer.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


class FitResult(NamedTuple):
    codes: np.ndarray  # L x N in {0, 1}
    u: np.ndarray
    w: np.ndarray
    trace: FitTrace
    state: TrainState


def sgn(m: np.ndarray) -> np.ndarray:
    """Elementwise sign with ``sgn(0) = +1``."""
    return np.where(m >= 0, 1.0, -1.0)


def mean_threshold(z: np.ndarray) -> np.ndarray:
    """Binarise each bit (row) at its mean, returning +-1 codes."""
    return np.where(z >= z.mean(axis=1, keepdims=True), 1.0, -1.0)


def _rng_seed(cfg_seed: int, *tags: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(cfg_seed) & 0xFFFFFFFFFFFFFFFF, *tags])


def feasible_from_target(c: np.ndarray, balanced: bool = True, seed=0, rank_tol: float = 1e-10) -> np.ndarray:
    """Maximise ``Tr(Z^T c)`` subject to ``Z Z^T = N I`` (and ``Z 1 = 0``).

    With ``c`` (column-centred when ``balanced``) = ``P Theta Q^T`` the
    optimum is ``sqrt(N) [P, P_c] [Q, Q_c]^T`` where ``P_c``, ``Q_c``
    complete the bases when ``c`` is rank deficient; ``Q_c`` is also kept
    orthogonal to the ones vector so the rows of ``Z`` stay balanced.
    """
    L, n = c.shape
    if balanced:
        c = center_columns(c)
    svd = thin_svd(c, rank_tol)
    missing = L - svd.rank
    p, q = svd.left, svd.right
    if missing:
        ss = np.random.SeedSequence(seed) if not isinstance(seed, np.random.SeedSequence) else seed
        sp_, sq_ = ss.spawn(2)
        try:
            p_c = orthonormal_complement(p, None, missing, seed=sp_)
            q_c = orthonormal_complement(q, np.ones(n) if balanced else None, missing, seed=sq_)
        except ValueError as exc:
            raise ConfigError(f"cannot complete code basis with N={n}, L={L}: {exc}") from exc
        p = np.hstack([p, p_c])
        q = np.hstack([q, q_c])
    return math.sqrt(n) * (p @ q.T)


def initialize_state(x, y, cfg: DsthConfig) -> TrainState:
    """Feasible random start: ``Z`` from a centred Gaussian, ``B = sgn(Z)``, zero slacks."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    d_x, n = x.shape
    if y.shape[1] != n:
        raise ConfigError(f"visual and text sample counts differ: {n} vs {y.shape[1]}")
    cfg.check_shapes(d_x, n)
    L = cfg.code_length
    rng = np.random.default_rng(_rng_seed(cfg.seed, 1))
    g = center_columns(rng.standard_normal((L, n)))
    z = feasible_from_target(g, balanced=cfg.variant.balanced, seed=_rng_seed(cfg.seed, 1, 1))
    state = TrainState(
        z=z,
        b=sgn(z),
        u=np.zeros((d_x, L)),
        w=np.zeros((y.shape[0], L)),
        a_x=np.zeros_like(x),
        a_y=np.zeros_like(y),
        e_x=np.zeros_like(x),
        e_y=np.zeros_like(y),
        e_z=np.zeros((L, n)),
        mu=float(cfg.mu0),
    )
    if cfg.variant is Variant.RELAXED_ROUNDING:
        state.b = mean_threshold(z)
    state.u, state.w = update_bases(state, x, y, cfg)
    return state


def update_auxiliary(state: TrainState, x, y):
    """Closed-form minimisers ``A = (mu (X - U Z) + E) / (2 + mu)``."""
    mu = state.mu
    a_x = (mu * (x - state.u @ state.z) + state.e_x) / (2.0 + mu)
    a_y = (mu * (y - state.w @ state.z) + state.e_y) / (2.0 + mu)
    return a_x, a_y


def update_bases(state: TrainState, x, y, cfg: DsthConfig | None = None):
    """Least-squares bases ``U = (1/N) (X - A_x + E_x/mu) Z^T`` (and ``W``).

    The ``1/N`` form relies on ``Z Z^T = N I``; without the uncorrelation
    constraint the normal equations are solved with a tiny ridge instead.
    """
    n = state.z.shape[1]
    m_x = x - state.a_x + state.e_x / state.mu
    m_y = y - state.a_y + state.e_y / state.mu
    if cfg is not None and not cfg.variant.uncorrelated:
        gram = state.z @ state.z.T + 1e-8 * np.eye(state.z.shape[0])
        u = solve_spd(gram, state.z @ m_x.T).T
        w = solve_spd(gram, state.z @ m_y.T).T
        return u, w
    return (m_x @ state.z.T) / n, (m_y @ state.z.T) / n


def update_codes_b(state: TrainState, anchor_model: AnchorModel, cfg: DsthConfig) -> np.ndarray:
    """``B = sgn(Z + E_z/mu - (alpha/mu) Z Lap)``."""
    if cfg.variant is Variant.RELAXED_ROUNDING:
        return mean_threshold(state.z)
    mu = state.mu
    arg = state.z + state.e_z / mu - (cfg.alpha / mu) * apply_laplacian(state.z, anchor_model)
    return sgn(arg)


def assemble_c(state: TrainState, x, y, anchor_model: AnchorModel, cfg: DsthConfig) -> np.ndarray:
    """Target matrix ``C`` of the Z-step, which maximises ``Tr(Z^T C)``."""
    mu = state.mu
    a = cfg.alpha / mu
    v = cfg.variant
    if v is Variant.RELAXED_ROUNDING:
        c = -a * apply_laplacian(state.z, anchor_model)
    else:
        c = state.b - state.e_z / mu - a * apply_laplacian(state.b, anchor_model)
    if v is not Variant.VISUAL_ONLY:
        c += state.u.T @ (x - state.a_x + state.e_x / mu)
        c += cfg.beta * (state.w.T @ (y - state.a_y + state.e_y / mu))
    return c


def z_from_c(c: np.ndarray, state: TrainState, cfg: DsthConfig) -> np.ndarray:
    """Solve the Z-step for an assembled ``C``."""
    seed = _rng_seed(cfg.seed, 2, state.iter)
    if not cfg.variant.uncorrelated:
        # unconstrained stationarity, then re-balance
        L = c.shape[0]
        lhs = state.u.T @ state.u + cfg.beta * (state.w.T @ state.w) + np.eye(L)
        return center_columns(solve_spd(lhs, c))
    return feasible_from_target(c, balanced=cfg.variant.balanced, seed=seed)


def update_codes_z(state: TrainState, x, y, anchor_model: AnchorModel, cfg: DsthConfig) -> np.ndarray:
    return z_from_c(assemble_c(state, x, y, anchor_model, cfg), state, cfg)


def update_multipliers(state: TrainState, x, y, cfg: DsthConfig):
    """Dual ascent on the three couplings and ``mu <- min(rho mu, mu_max)``."""
    mu = state.mu
    e_x, e_y, e_z = state.e_x, state.e_y, state.e_z
    if cfg.variant is not Variant.VISUAL_ONLY:
        e_x = e_x + mu * (x - state.u @ state.z - state.a_x)
        e_y = e_y + mu * (y - state.w @ state.z - state.a_y)
    if cfg.variant is not Variant.RELAXED_ROUNDING:
        e_z = e_z + mu * (state.z - state.b)
    return e_x, e_y, e_z, min(cfg.rho * mu, cfg.mu_max)


def graph_energy(codes, anchor_model: AnchorModel) -> float:
    """``Tr(codes Lap codes^T)``."""
    codes = np.asarray(codes, dtype=np.float64)
    return float(np.sum(codes * apply_laplacian(codes, anchor_model)))


def objective_value(codes, x, y, u, w, anchor_model: AnchorModel, cfg: DsthConfig) -> float:
    """Hashing objective at the given codes (feature terms dropped for VisualOnly)."""
    codes = np.asarray(codes, dtype=np.float64)
    value = cfg.alpha * graph_energy(codes, anchor_model)
    if cfg.variant is not Variant.VISUAL_ONLY:
        value += float(np.sum((x - u @ codes) ** 2))
        value += cfg.beta * float(np.sum((w @ codes - y) ** 2))
    return value


def augmented_lagrangian(state: TrainState, x, y, anchor_model: AnchorModel, cfg: DsthConfig) -> float:
    mu = state.mu
    lap_b = apply_laplacian(state.b, anchor_model)
    value = cfg.alpha * float(np.sum(state.z * lap_b))
    value += 0.5 * mu * float(np.sum((state.z - state.b + state.e_z / mu) ** 2))
    if cfg.variant is not Variant.VISUAL_ONLY:
        value += float(np.sum(state.a_x**2) + np.sum(state.a_y**2))
        r_x = x - state.u @ state.z - state.a_x + state.e_x / mu
        r_y = y - state.w @ state.z - state.a_y + state.e_y / mu
        value += 0.5 * mu * (float(np.sum(r_x**2)) + cfg.beta * float(np.sum(r_y**2)))
    return value


def to_bits(codes: np.ndarray) -> np.ndarray:
    """Map +-1 codes to {0, 1}."""
    return ((np.asarray(codes) + 1) // 2).astype(np.uint8)


def fit(
    x,
    y,
    anchor_model: AnchorModel,
    cfg: DsthConfig,
    callback: Callable[[int, TrainState, np.ndarray], None] | None = None,
) -> FitResult:
    """Run the alternating solver and return {0,1} codes, bases and trace.

    Stops after ``max_iter`` sweeps or once the objective at ``B`` changed
    by less than ``rel_tol`` (relative) across the last three sweeps.
    ``callback(iteration, state, C)`` is invoked right after each Z-step.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if anchor_model.n != x.shape[1]:
        raise ConfigError(f"anchor model covers {anchor_model.n} samples, data has {x.shape[1]}")
    if cfg.variant is Variant.VISUAL_ONLY and cfg.beta != 0:
        cfg = replace(cfg, beta=0.0)
    state = initialize_state(x, y, cfg)
    trace = FitTrace()
    trace.initial_objective = objective_value(state.b, x, y, state.u, state.w, anchor_model, cfg)
    v = cfg.variant
    for it in range(cfg.max_iter):
        state.iter = it
        if v is not Variant.VISUAL_ONLY:
            state.a_x, state.a_y = update_auxiliary(state, x, y)
            state.u, state.w = update_bases(state, x, y, cfg)
        if v is not Variant.RELAXED_ROUNDING:
            state.b = update_codes_b(state, anchor_model, cfg)
        c = assemble_c(state, x, y, anchor_model, cfg)
        state.z = z_from_c(c, state, cfg)
        if v is Variant.RELAXED_ROUNDING:
            state.b = mean_threshold(state.z)
        if callback is not None:
            callback(it, state, c)

        obj = objective_value(state.b, x, y, state.u, state.w, anchor_model, cfg)
        if not math.isfinite(obj):
            raise NumericalError(f"non-finite objective at iteration {it}")
        trace.objective.append(obj)
        trace.objective_z.append(objective_value(state.z, x, y, state.u, state.w, anchor_model, cfg))
        trace.aug_lagrangian.append(augmented_lagrangian(state, x, y, anchor_model, cfg))
        trace.res_x.append(float(np.linalg.norm(x - state.u @ state.z - state.a_x)))
        trace.res_y.append(float(np.linalg.norm(y - state.w @ state.z - state.a_y)))
        trace.res_zb.append(float(np.linalg.norm(state.z - state.b)))
        trace.mu.append(state.mu)
        log.debug("iter %d objective %.6g mu %.3g", it, obj, state.mu)

        state.e_x, state.e_y, state.e_z, state.mu = update_multipliers(state, x, y, cfg)
        if len(trace.objective) >= 4:
            prev = trace.objective[-4]
            if abs(obj - prev) <= cfg.rel_tol * max(abs(prev), 1e-300):
                break
    return FitResult(to_bits(state.b), state.u, state.w, trace, state)

