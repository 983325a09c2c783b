"""Forward models, terminal conditions and drivers, plus the rate predictor.

Conventions for callbacks (all vectorized over a leading sample axis n):
- model.b(t, x)                 x: (n, d) -> (n, d)
- model.sigma(t, x)             x: (n, d) -> (n, d, q)
- model.grad_b(t, x)            -> (n, d, d)
- model.grad_sigma_col(j, t, x) -> (n, d, d), the Jacobian of column j of sigma
- terminal.phi(x)               x: (n, d) -> (n,)
- driver.f(t, x, y, z)          x: (n, d), y: (n,), z: (n, q) -> (n,)

Regularity exponents are declared metadata. `spot_check_driver` and `spot_check_ellipticity`
sample random tuples to catch declarations that are plainly wrong; they prove nothing.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Optional

import numpy as np

from bsdegrid.errors import (
    IllConditionedVolatilityError,
    InvalidParameterError,
    MissingThetaPhiError,
    ProviderUndefinedError,
)
from bsdegrid.settings import AppConfig, get_config
from bsdegrid.utils.rng import TAG_SPOT_CHECK, block_normals

logger = logging.getLogger(__name__)

Array = np.ndarray
CoefficientFn = Callable[[float, Array], Array]
DriverFn = Callable[[float, Array, Array, Array], Array]
VProvider = Callable[[float, Array], tuple[Array, Array]]


def _in_unit_interval(name: str, value: float) -> None:
    if not (0.0 < float(value) <= 1.0):
        raise InvalidParameterError(f"{name} must lie in (0, 1], got {value!r}")


# --------------------------------------------------------------------------------------------
# Forward SDE
# --------------------------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SdeModel:
    name: str
    dim_d: int
    dim_q: int
    x0: Array
    b: CoefficientFn
    sigma: CoefficientFn
    grad_b: CoefficientFn
    grad_sigma_col: Callable[[int, float, Array], Array]
    ellipticity_lb: float
    constant_coefficients: bool = False
    params: dict[str, Any] = field(default_factory=dict)

    def normalized(self) -> "SdeModel":
        if self.dim_d < 1 or self.dim_q < self.dim_d:
            raise InvalidParameterError(f"need 1 <= d <= q, got d={self.dim_d} q={self.dim_q}")
        x0 = np.asarray(self.x0, dtype=float).reshape(self.dim_d)
        if self.ellipticity_lb <= 0:
            raise InvalidParameterError("ellipticity lower bound must be positive")
        return replace(self, x0=x0)

    def drift_vector(self) -> Array:
        """Drift of a constant-coefficient model, shape (d,)."""

        return np.asarray(self.b(0.0, self.x0[None, :])[0], dtype=float)

    def sigma_matrix(self) -> Array:
        """Volatility of a constant-coefficient model, shape (d, q)."""

        return np.asarray(self.sigma(0.0, self.x0[None, :])[0], dtype=float)

    def scalar_volatility(self) -> float:
        """Standard deviation rate of a one-dimensional state (norm of the sigma row)."""

        if self.dim_d != 1:
            raise InvalidParameterError("scalar volatility needs d = 1")
        return float(np.linalg.norm(self.sigma_matrix()[0]))


def constant_model(
    x0: Any,
    drift: Any,
    sigma: Any,
    name: str = "brownian",
) -> SdeModel:
    """Brownian motion with constant drift vector and volatility matrix."""

    drift_arr = np.atleast_1d(np.asarray(drift, dtype=float))
    sigma_arr = np.asarray(sigma, dtype=float)
    if sigma_arr.ndim == 0:
        sigma_arr = sigma_arr.reshape(1, 1)
    elif sigma_arr.ndim == 1:
        sigma_arr = sigma_arr.reshape(1, -1)
    d, q = sigma_arr.shape
    if drift_arr.shape != (d,):
        drift_arr = np.broadcast_to(drift_arr, (d,)).copy()
    x0_arr = np.broadcast_to(np.atleast_1d(np.asarray(x0, dtype=float)), (d,)).copy()
    lam = float(np.min(np.linalg.eigvalsh(sigma_arr @ sigma_arr.T)))
    zeros_dd = np.zeros((d, d))

    def b(t: float, x: Array) -> Array:
        return np.broadcast_to(drift_arr, x.shape)

    def sig(t: float, x: Array) -> Array:
        return np.broadcast_to(sigma_arr, (x.shape[0], d, q))

    def grad_b(t: float, x: Array) -> Array:
        return np.broadcast_to(zeros_dd, (x.shape[0], d, d))

    def grad_sigma_col(j: int, t: float, x: Array) -> Array:
        return np.broadcast_to(zeros_dd, (x.shape[0], d, d))

    return SdeModel(
        name=name,
        dim_d=d,
        dim_q=q,
        x0=x0_arr,
        b=b,
        sigma=sig,
        grad_b=grad_b,
        grad_sigma_col=grad_sigma_col,
        ellipticity_lb=lam if lam > 0 else 0.0,
        constant_coefficients=True,
        params={"x0": x0_arr.tolist(), "drift": drift_arr.tolist(), "sigma": sigma_arr.tolist()},
    ).normalized()


def standard_brownian(x0: float = 0.0, sigma: float = 1.0, drift: float = 0.0) -> SdeModel:
    return constant_model(x0, drift, sigma, name="standard-brownian")


def tanh_model(x0: float = 0.0, b0: float = 0.2, s0: float = 1.0, s1: float = 0.3) -> SdeModel:
    """dX = b0 tanh(X) dt + (s0 + s1 tanh(X)) dW, uniformly elliptic when s0 > |s1|."""

    if not (s0 > abs(s1) > 0):
        raise InvalidParameterError("tanh model needs s0 > |s1| > 0")

    def b(t: float, x: Array) -> Array:
        return b0 * np.tanh(x)

    def sig(t: float, x: Array) -> Array:
        return (s0 + s1 * np.tanh(x))[:, :, None]

    def grad_b(t: float, x: Array) -> Array:
        return (b0 / np.cosh(x) ** 2)[:, :, None]

    def grad_sigma_col(j: int, t: float, x: Array) -> Array:
        return (s1 / np.cosh(x) ** 2)[:, :, None]

    return SdeModel(
        name="tanh",
        dim_d=1,
        dim_q=1,
        x0=np.array([x0], dtype=float),
        b=b,
        sigma=sig,
        grad_b=grad_b,
        grad_sigma_col=grad_sigma_col,
        ellipticity_lb=(s0 - abs(s1)) ** 2,
        constant_coefficients=False,
        params={"x0": x0, "b0": b0, "s0": s0, "s1": s1},
    ).normalized()


def pseudo_inverse(sigma: Array, condition_threshold: float = 1e8) -> Array:
    """sigma^T (sigma sigma^T)^-1 for a stack of (d, q) matrices."""

    sigma = np.asarray(sigma, dtype=float)
    stacked = sigma if sigma.ndim == 3 else sigma[None, :, :]
    gram = stacked @ np.swapaxes(stacked, -1, -2)
    cond = np.linalg.cond(gram)
    worst = float(np.max(cond)) if cond.size else 0.0
    if not np.isfinite(worst) or worst > condition_threshold:
        raise IllConditionedVolatilityError(
            f"volatility Gram matrix condition number {worst:.3g} exceeds {condition_threshold:.3g}"
        )
    inverse = np.swapaxes(stacked, -1, -2) @ np.linalg.inv(gram)
    return inverse if sigma.ndim == 3 else inverse[0]


def sigma_right_inverse(
    model: SdeModel, t: float, x: Array, condition_threshold: Optional[float] = None
) -> Array:
    """Right inverse of sigma(t, x); shape (n, q, d) for x of shape (n, d)."""

    if condition_threshold is None:
        condition_threshold = get_config().models.gram_condition_threshold
    x = np.atleast_2d(np.asarray(x, dtype=float))
    return pseudo_inverse(model.sigma(t, x), condition_threshold)


# --------------------------------------------------------------------------------------------
# Terminal conditions
# --------------------------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TerminalCondition:
    name: str
    phi: Callable[[Array], Array]
    alpha: float
    theta_phi: Optional[float] = None
    holder_const: Optional[float] = None
    bound: Optional[float] = None
    # Kinks and jumps of phi in the first state coordinate; quadrature splits there.
    breakpoints: tuple[float, ...] = ()
    params: dict[str, Any] = field(default_factory=dict)

    @property
    def bounded(self) -> bool:
        return self.bound is not None

    def normalized(self) -> "TerminalCondition":
        _in_unit_interval("alpha", self.alpha)
        if self.theta_phi is not None:
            _in_unit_interval("theta_phi", self.theta_phi)
        return self

    def __call__(self, x: Array) -> Array:
        return self.phi(x)


def identity_terminal() -> TerminalCondition:
    return TerminalCondition(
        name="identity", phi=lambda x: np.array(x[:, 0], dtype=float), alpha=1.0,
        theta_phi=1.0, holder_const=1.0,
    ).normalized()


def constant_terminal(value: float = 1.0) -> TerminalCondition:
    return TerminalCondition(
        name="constant",
        phi=lambda x: np.full(x.shape[0], float(value)),
        alpha=1.0,
        theta_phi=1.0,
        holder_const=0.0,
        bound=abs(float(value)),
        params={"value": value},
    ).normalized()


def call_terminal(strike: float = 0.0) -> TerminalCondition:
    return TerminalCondition(
        name="call",
        phi=lambda x: np.maximum(x[:, 0] - strike, 0.0),
        alpha=1.0,
        theta_phi=1.0,
        holder_const=1.0,
        breakpoints=(float(strike),),
        params={"strike": strike},
    ).normalized()


def capped_call_terminal(strike: float = 0.0, cap: float = 1.0) -> TerminalCondition:
    if cap <= 0:
        raise InvalidParameterError("cap must be positive")
    return TerminalCondition(
        name="capped-call",
        phi=lambda x: np.minimum(np.maximum(x[:, 0] - strike, 0.0), cap),
        alpha=1.0,
        theta_phi=1.0,
        holder_const=1.0,
        bound=float(cap),
        breakpoints=(float(strike), float(strike + cap)),
        params={"strike": strike, "cap": cap},
    ).normalized()


def holder_terminal(strike: float = 0.0, theta: float = 0.5, cap: float = 1.0) -> TerminalCondition:
    _in_unit_interval("theta", theta)
    reach = cap ** (1.0 / theta)
    return TerminalCondition(
        name="holder",
        phi=lambda x: np.minimum(np.abs(x[:, 0] - strike) ** theta, cap),
        alpha=float(theta),
        theta_phi=float(theta),
        holder_const=1.0,
        bound=float(cap),
        breakpoints=(float(strike - reach), float(strike), float(strike + reach)),
        params={"strike": strike, "theta": theta, "cap": cap},
    ).normalized()


def indicator_terminal(strike: float = 0.0) -> TerminalCondition:
    return TerminalCondition(
        name="indicator",
        phi=lambda x: (x[:, 0] >= strike).astype(float),
        alpha=0.5,
        bound=1.0,
        breakpoints=(float(strike),),
        params={"strike": strike},
    ).normalized()


# --------------------------------------------------------------------------------------------
# Drivers
# --------------------------------------------------------------------------------------------


@dataclass(frozen=True)
class AffineCoefficients:
    """f = a*y + z.b + c."""

    a: float
    b: tuple[float, ...]
    c: float


@dataclass(frozen=True, eq=False)
class Driver:
    name: str
    f: DriverFn
    horizon: float
    theta_L: float = 1.0
    theta_c: float = 1.0
    theta_X: float = 1.0
    L_f: float = 0.0
    L_X: float = 0.0
    C_f: float = 0.0
    t_holder_half: bool = True
    affine: Optional[AffineCoefficients] = None
    params: dict[str, Any] = field(default_factory=dict)

    def normalized(self) -> "Driver":
        _in_unit_interval("theta_L", self.theta_L)
        _in_unit_interval("theta_c", self.theta_c)
        _in_unit_interval("theta_X", self.theta_X)
        if min(self.L_f, self.L_X, self.C_f) < 0:
            raise InvalidParameterError("driver constants must be non-negative")
        if self.horizon <= 0:
            raise InvalidParameterError("driver horizon must be positive")
        return self

    @property
    def is_zero(self) -> bool:
        return self.name == "zero"

    def __call__(self, t: float, x: Array, y: Array, z: Array) -> Array:
        return self.f(t, x, y, z)


def zero_driver(horizon: float = 1.0) -> Driver:
    return Driver(
        name="zero",
        f=lambda t, x, y, z: np.zeros(np.shape(y), dtype=float),
        horizon=horizon,
        affine=AffineCoefficients(0.0, (), 0.0),
    ).normalized()


def affine_driver(
    horizon: float = 1.0, a: float = 0.0, b: Any = 0.0, c: float = 0.0, dim_q: int = 1
) -> Driver:
    b_vec = np.broadcast_to(np.atleast_1d(np.asarray(b, dtype=float)), (dim_q,)).copy()

    def f(t: float, x: Array, y: Array, z: Array) -> Array:
        return a * y + z @ b_vec + c

    return Driver(
        name="affine",
        f=f,
        horizon=horizon,
        L_f=max(abs(a), float(np.linalg.norm(b_vec))),
        C_f=abs(c),
        affine=AffineCoefficients(float(a), tuple(b_vec.tolist()), float(c)),
        params={"a": a, "b": b_vec.tolist(), "c": c},
    ).normalized()


def truncate(z: Array, level: Any) -> Array:
    """Componentwise clamp of z to [-level, level]."""

    level = np.asarray(level, dtype=float)
    return np.clip(z, -level, level)


def synthetic_driver(
    horizon: float = 1.0,
    c_f: float = 0.5,
    lipschitz: float = 0.5,
    theta_c: float = 0.75,
    theta_L: float = 0.75,
    dim_q: int = 1,
) -> Driver:
    """C_f (T-t)^(theta_c-1) cos(x_1) + L (T-t)^((theta_L-1)/2) (sin(y) + sum(T_1(z)))."""

    T = float(horizon)

    def f(t: float, x: Array, y: Array, z: Array) -> Array:
        tau = T - t
        growth = c_f * tau ** (theta_c - 1.0) * np.cos(x[:, 0])
        local = lipschitz * tau ** ((theta_L - 1.0) / 2.0)
        return growth + local * (np.sin(y) + np.sum(truncate(z, 1.0), axis=-1))

    return Driver(
        name="synthetic",
        f=f,
        horizon=T,
        theta_L=theta_L,
        theta_c=theta_c,
        L_f=lipschitz * math.sqrt(dim_q),
        C_f=c_f,
        params={"c_f": c_f, "lipschitz": lipschitz, "theta_c": theta_c, "theta_L": theta_L},
    ).normalized()


def quadratic_truncated_driver(
    c: float, C_u: float, theta: float, horizon: float = 1.0, dim_d: int = 1
) -> Driver:
    """c (1 + |y| + |T_L(z)|^2) with the clamp level L = C_u (T - t)^((theta - 1)/2)."""

    if c <= 0 or C_u <= 0:
        raise InvalidParameterError("quadratic driver needs c > 0 and C_u > 0")
    _in_unit_interval("theta", theta)
    T = float(horizon)

    def f(t: float, x: Array, y: Array, z: Array) -> Array:
        level = C_u * (T - t) ** ((theta - 1.0) / 2.0)
        clamped = truncate(z, level)
        return c * (1.0 + np.abs(y) + np.sum(clamped**2, axis=-1))

    return Driver(
        name="quadratic",
        f=f,
        horizon=T,
        theta_L=theta,
        theta_c=1.0,
        L_f=c * (T ** ((1.0 - theta) / 2.0) + 2.0 * math.sqrt(dim_d) * C_u),
        C_f=c,
        params={"c": c, "C_u": C_u, "theta": theta},
    ).normalized()


def cut_driver(driver: Driver, eps: float) -> Driver:
    """Driver switched off on [T - eps, T]."""

    T = driver.horizon
    if not (0.0 < eps < T):
        raise InvalidParameterError(f"cut width must lie in (0, T), got {eps!r}")
    cutoff = T - eps
    base = driver.f

    def f(t: float, x: Array, y: Array, z: Array) -> Array:
        if t >= cutoff:
            return np.zeros(np.shape(y), dtype=float)
        return base(t, x, y, z)

    params = dict(driver.params)
    params["cut"] = max(float(eps), float(params.get("cut", 0.0)))
    return replace(driver, f=f, affine=None, params=params)


def proxy_driver(base: Driver, v_provider: VProvider, model: SdeModel) -> Driver:
    """Translated driver F(t, x, v + y, grad(v) sigma + z) of the simple proxy."""

    T = base.horizon
    base_f = base.f

    def f(t: float, x: Array, y: Array, z: Array) -> Array:
        if t >= T:
            raise ProviderUndefinedError(f"proxy value undefined at t={t} >= T={T}")
        v, grad_v = v_provider(t, x)
        shift = np.einsum("nd,ndq->nq", grad_v, model.sigma(t, x))
        return base_f(t, x, v + y, shift + z)

    return replace(base, name=f"proxy({base.name})", f=f, affine=None)


# --------------------------------------------------------------------------------------------
# Spot checks
# --------------------------------------------------------------------------------------------


@dataclass(frozen=True)
class SpotCheckSpec:
    samples: int = 10_000
    slack: float = 1.05
    # Relative distance from the horizon of the latest sampled time.
    horizon_margin: float = 1e-3
    # Distinct sampled times; the samples are spread over them round-robin.
    time_levels: int = 64

    def normalized(self) -> "SpotCheckSpec":
        if self.samples < 1 or self.time_levels < 1:
            raise InvalidParameterError("spot checks need at least one sample and one time level")
        if self.slack < 1.0:
            raise InvalidParameterError("slack factor must be >= 1")
        return self


def spot_check_spec_from_config(config: Optional[AppConfig] = None) -> SpotCheckSpec:
    config = config or get_config()
    return SpotCheckSpec(
        samples=config.models.spot_check_samples, slack=config.models.spot_check_slack
    ).normalized()


@dataclass(frozen=True)
class SpotCheckReport:
    check: str
    samples: int
    violations: int
    worst_ratio: float

    @property
    def passed(self) -> bool:
        return self.violations == 0


def _sample_block(seed: int, counter: int, n: int, width: int) -> Array:
    return block_normals(seed, TAG_SPOT_CHECK, (counter,), 0, n, width)


def _time_levels(n: int, spec: SpotCheckSpec) -> tuple[int, Array]:
    """Sample m is evaluated at time level m % K; drivers take a scalar time."""

    levels = min(n, spec.time_levels)
    return levels, np.arange(n) % levels


def spot_check_driver(
    driver: Driver, model: SdeModel, spec: Optional[SpotCheckSpec] = None, seed: int = 0
) -> SpotCheckReport:
    """Sample the local Lipschitz and growth inequalities of a driver."""

    spec = (spec or spot_check_spec_from_config()).normalized()
    T = driver.horizon
    n = spec.samples
    d, q = model.dim_d, model.dim_q
    levels, level_of = _time_levels(n, spec)
    u = _sample_block(seed, 0, levels, 1)[:, 0]
    times = T * (1.0 - spec.horizon_margin) * (0.5 + 0.5 * np.tanh(u))
    x = model.x0[None, :] + _sample_block(seed, 1, n, d)
    y1, y2 = _sample_block(seed, 2, n, 2).T
    z1 = _sample_block(seed, 3, n, q)
    z2 = _sample_block(seed, 4, n, q)

    values = np.empty((2, n))
    limits = np.empty((2, n))
    dist = np.abs(y1 - y2) + np.linalg.norm(z1 - z2, axis=1)
    for k in range(levels):
        rows = level_of == k
        t = float(times[k])
        tau = T - t
        xs = x[rows]
        values[0, rows] = np.abs(driver(t, xs, y1[rows], z1[rows]) - driver(t, xs, y2[rows], z2[rows]))
        limits[0, rows] = driver.L_f * dist[rows] / tau ** ((1.0 - driver.theta_L) / 2.0)
        values[1, rows] = np.abs(driver(t, xs, np.zeros(xs.shape[0]), np.zeros((xs.shape[0], q))))
        limits[1, rows] = driver.C_f / tau ** (1.0 - driver.theta_c)

    checked = values > 1e-12
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(limits > 0, values / limits, np.inf)
    ratio = ratio[checked]
    worst = float(np.max(ratio)) if ratio.size else 0.0
    violations = int(np.sum(ratio > spec.slack))
    return SpotCheckReport("driver", n, violations, worst)


def spot_check_ellipticity(
    model: SdeModel,
    spec: Optional[SpotCheckSpec] = None,
    seed: int = 0,
    horizon: float = 1.0,
) -> SpotCheckReport:
    """Sample zeta^T sigma sigma^T zeta >= lambda |zeta|^2 over random states and unit vectors."""

    spec = (spec or spot_check_spec_from_config()).normalized()
    n = spec.samples
    d = model.dim_d
    levels, level_of = _time_levels(n, spec)
    u = _sample_block(seed, 10, levels, 1)[:, 0]
    times = horizon * (0.5 + 0.5 * np.tanh(u))
    x = model.x0[None, :] + 3.0 * _sample_block(seed, 11, n, d)
    zeta = _sample_block(seed, 12, n, d)
    zeta /= np.linalg.norm(zeta, axis=1, keepdims=True)

    quad = np.empty(n)
    for k in range(levels):
        rows = level_of == k
        sig = model.sigma(float(times[k]), x[rows])  # (n_k, d, q)
        projected = np.einsum("nd,ndq->nq", zeta[rows], sig)
        quad[rows] = np.sum(projected**2, axis=1)
    ratio = model.ellipticity_lb / np.maximum(quad, 1e-300)
    violations = int(np.sum(ratio > spec.slack))
    return SpotCheckReport("ellipticity", n, violations, float(np.max(ratio)))


# --------------------------------------------------------------------------------------------
# Rate prediction
# --------------------------------------------------------------------------------------------


@dataclass(frozen=True)
class RateInputs:
    alpha: float
    theta_L: float
    theta_c: float
    beta: float
    theta_phi: Optional[float] = None

    def normalized(self) -> "RateInputs":
        for name in ("alpha", "theta_L", "theta_c", "beta"):
            _in_unit_interval(name, getattr(self, name))
        if self.theta_phi is not None:
            _in_unit_interval("theta_phi", self.theta_phi)
        return self


@dataclass(frozen=True)
class RatePrediction:
    scheme: str
    exponent: float
    grid_constraint_ok: bool
    log_factor: bool
    gamma: float
    # Argument of the rate's case switch and whether it fell inside [1, 3].
    indicator_argument: float
    indicator_in_set: bool
    # Exponent of the L2 error of Y: half the squared-error exponent for the Euler family.
    y_exponent: float


def gamma_exponent(alpha: float, theta_L: float, theta_c: float) -> float:
    _in_unit_interval("alpha", alpha)
    _in_unit_interval("theta_L", theta_L)
    _in_unit_interval("theta_c", theta_c)
    return min(min(theta_c, alpha / 2.0) + theta_L / 2.0, theta_c)


def predicted_rate(scheme: str, inputs: RateInputs) -> RatePrediction:
    inputs = inputs.normalized()
    alpha, theta_L, theta_c, beta = inputs.alpha, inputs.theta_L, inputs.theta_c, inputs.beta
    gamma = gamma_exponent(alpha, theta_L, theta_c)

    if scheme == "euler":
        exponent = 1.0 if alpha + theta_L >= 1.0 else 2.0 * gamma
        ok = beta < min(2.0 * gamma, alpha)
        arg = alpha + theta_L
        return RatePrediction(scheme, exponent, ok, False, gamma, arg, True, exponent / 2.0)

    if scheme == "euler-holder":
        if inputs.theta_phi is None:
            raise MissingThetaPhiError("euler-holder rate needs theta_phi")
        arg = inputs.theta_phi + beta + 2.0 * gamma
        in_set = 1.0 <= arg <= 3.0
        if arg > 3.0:
            logger.warning(
                "Hoelder Euler indicator argument %.6g lies in (3, 4]; outside the set [1, 3]", arg
            )
        exponent = 1.0 if arg >= 1.0 else 2.0 * gamma
        ok = beta < min(2.0 * gamma, alpha, theta_L)
        return RatePrediction(scheme, exponent, ok, False, gamma, arg, in_set, exponent / 2.0)

    if scheme == "malliavin":
        ok = beta < min(gamma, alpha, theta_L)
        arg_exp = beta + 2.0 * gamma
        if inputs.theta_phi is not None:
            arg = beta + inputs.theta_phi + 2.0 * gamma
            if 1.0 <= arg <= 3.0:
                return RatePrediction(scheme, 0.5, ok, False, gamma, arg, True, 0.5)
            if arg < 1.0:
                return RatePrediction(scheme, gamma, ok, False, gamma, arg, True, gamma)
            logger.warning(
                "Malliavin Hoelder indicator argument %.6g outside [1, 3]; "
                "using the exponential-moments branch",
                arg,
            )
            in_set = False
        else:
            in_set = 0.0 < arg_exp <= 3.0
        if arg_exp >= 1.0:
            return RatePrediction(
                scheme, 0.5, ok, True, gamma, arg_exp if inputs.theta_phi is None else arg,
                in_set, 0.5,
            )
        return RatePrediction(
            scheme, gamma, ok, False, gamma, arg_exp if inputs.theta_phi is None else arg,
            in_set, gamma,
        )

    raise InvalidParameterError(f"unknown scheme {scheme!r}")
