"""Gaussian and discrete Gaussian mechanisms with a moments accountant.

Moments are tracked on the integer grid ``lambda = 1..64`` by default. For a
noise multiplier ``xi`` (noise std divided by L2 sensitivity) and per-round
client sampling probability ``C`` the per-round log moment is

    alpha(lambda) = log max(E1, E2)

with ``E1 = int eta0 (eta0/eta1)^lambda`` and ``E2 = int eta1 (eta1/eta0)^lambda``,
``eta0 = N(0, xi^2)`` and ``eta1 = (1 - C) N(0, xi^2) + C N(1, xi^2)``.
The discrete and distributed-discrete mechanisms add nonnegative corrections on
top of it.
"""

import functools
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate
from scipy.special import logsumexp

from signfed.errors import (
    CalibrationError,
    ConfigError,
    DomainError,
    NumericError,
    SamplerError,
)

MECHANISMS = ("continuous", "discrete", "discrete-distributed")
DEFAULT_LAMBDAS = tuple(range(1, 65))
MAX_PROPOSALS = 10_000


# --- samplers ----------------------------------------------------------------

def sample_discrete_gaussian(mu, xi, rng, size=None):
    """Draw from the discrete Gaussian ``P(x) ~ exp(-(x - mu)^2 / 2 xi^2)`` on the integers.

    Exact rejection sampling: propose ``y`` from a two-sided geometric (discrete
    Laplace) law of scale ``xi`` centred at ``round(mu)`` and accept with
    probability proportional to the target/proposal ratio.

    Args:
        mu: real mean, scalar or array.
        xi: scale, > 0.
        rng: numpy Generator.
        size: output shape when ``mu`` is a scalar.

    Returns:
        int64 array (or Python int for scalar input without ``size``).
    """
    if not xi > 0:
        raise DomainError(f"xi must be > 0, got {xi}")
    mu_arr = np.asarray(mu, dtype=np.float64)
    scalar = mu_arr.ndim == 0 and size is None
    if size is not None:
        mu_arr = np.broadcast_to(mu_arr, size)
    mu_flat = mu_arr.ravel()
    centre = np.rint(mu_flat)
    t = float(xi)
    log_bound = _log_ratio_max(mu_flat - centre, xi, t)
    p_geo = -math.expm1(-1.0 / t)

    out = np.empty(mu_flat.shape, dtype=np.int64)
    todo = np.arange(mu_flat.size)
    for _ in range(MAX_PROPOSALS):
        if todo.size == 0:
            break
        k = todo.size
        step = rng.geometric(p_geo, k) - rng.geometric(p_geo, k)
        y = centre[todo] + step
        d = y - mu_flat[todo]
        log_acc = -d * d / (2 * xi * xi) + np.abs(step) / t - log_bound[todo]
        ok = np.log(rng.random(k)) < log_acc
        out[todo[ok]] = y[ok].astype(np.int64)
        todo = todo[~ok]
    else:
        if todo.size:
            raise SamplerError(f"{todo.size} draws unresolved after {MAX_PROPOSALS} proposals")
    if scalar:
        return int(out[0])
    return out.reshape(mu_arr.shape)


def _log_ratio_max(delta, xi, t):
    """Max over integer steps s of ``-(s - delta)^2 / 2 xi^2 + |s| / t``.

    The function is concave on s >= 0 and on s <= 0, so the integer maximum
    sits next to one of the two continuous maximisers (or at 0).
    """
    def f(s):
        return -(s - delta) ** 2 / (2 * xi * xi) + np.abs(s) / t

    reach = xi * xi / t
    best = f(np.zeros_like(delta))
    for cand in (delta + reach, delta - reach):
        for s in (np.floor(cand), np.ceil(cand)):
            best = np.maximum(best, f(s))
    return best


def sample_gaussian(mu, std, rng):
    mu = np.asarray(mu, dtype=np.float64)
    return mu + std * rng.standard_normal(mu.shape)


def discrete_gaussian_pmf(support, mu, xi, pad=None):
    """pmf of the discrete Gaussian on ``support`` via a truncated normalising series."""
    support = np.asarray(support, dtype=np.float64)
    pad = pad if pad is not None else int(math.ceil(40 * xi)) + 10
    c = int(round(mu))
    grid = np.arange(c - pad, c + pad + 1, dtype=np.float64)
    log_z = logsumexp(-(grid - mu) ** 2 / (2 * xi * xi))
    return np.exp(-(support - mu) ** 2 / (2 * xi * xi) - log_z)


# --- discretisation bounds -----------------------------------------------------

def kappa(xi):
    """Bound on ``|pdf_G / pmf_DG - 1|``: ``2 e^{-2 pi^2 xi^2} / (1 - e^{-6 pi^2 xi^2})``."""
    if not xi > 0:
        raise DomainError(f"xi must be > 0, got {xi}")
    a = 2 * math.pi ** 2 * xi * xi
    return 2 * math.exp(-a) / -math.expm1(-3 * a)


def nu_min_scale(nu):
    """Smallest per-share scale for the sum-of-discrete-Gaussians closeness bound."""
    return math.sqrt(math.log(2 + 2 / nu)) / math.pi


def concentration_min_scale(nu):
    """Smallest scale for the discrete Gaussian tail bound."""
    return math.sqrt(math.log(2 + 2 / nu) / (2 * math.pi ** 2))


def concentration_bound(t, xi, nu):
    """Upper bound on ``P(|x - mu| >= t xi)`` for ``x ~ DG(mu, xi)``."""
    if not 0 < nu < 1:
        raise DomainError("nu must lie in (0, 1)")
    if not xi > concentration_min_scale(nu):
        raise DomainError(f"xi={xi} below {concentration_min_scale(nu):.4f} required for nu={nu}")
    return 2 * math.exp(-t * t / 2) * (1 + nu) / (1 - nu)


# --- moments -------------------------------------------------------------------

def _log_eta(x, xi, C):
    """log eta0 and log eta1 at ``x`` (the common 1/(sqrt(2 pi) xi) factor dropped)."""
    l0 = -x * x / (2 * xi * xi)
    l_shift = -(x - 1) ** 2 / (2 * xi * xi)
    if C >= 1:
        return l0, l_shift
    l1 = np.logaddexp(math.log1p(-C) + l0, math.log(C) + l_shift)
    return l0, l1


def _log_moment_integral(lam, xi, C, which):
    """log of E1 (which=1) or E2 (which=2) by adaptive quadrature in a shifted log domain."""
    norm = -math.log(math.sqrt(2 * math.pi) * xi)

    def logf(x):
        l0, l1 = _log_eta(x, xi, C)
        if which == 1:
            return (lam + 1) * l0 - lam * l1
        return (lam + 1) * l1 - lam * l0

    # modes lie within [-lam, lam + 1]; each has width ~xi
    bound = lam + 1 + 20 * xi
    h = xi / 4
    grid = np.linspace(-bound, bound, max(2001, int(2 * bound / h) + 1))
    vals = logf(grid)
    shift = float(vals.max())
    keep = vals > shift - 60
    peaks = [i for i in range(1, len(grid) - 1)
             if keep[i] and vals[i] >= vals[i - 1] and vals[i] >= vals[i + 1]]
    if not peaks:
        peaks = [int(np.argmax(vals))]
    spans = sorted((grid[i] - 40 * xi, grid[i] + 40 * xi) for i in peaks)
    merged = [list(spans[0])]
    for lo, hi in spans[1:]:
        if lo <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], hi)
        else:
            merged.append([lo, hi])

    total = 0.0
    for lo, hi in merged:
        pts = [grid[i] for i in peaks if lo < grid[i] < hi]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", integrate.IntegrationWarning)
            val, err = integrate.quad(lambda x: math.exp(float(logf(x)) - shift), lo, hi,
                                      points=pts or None, limit=500, epsabs=1e-12, epsrel=1e-11)
        if not np.isfinite(val) or err > 1e-6 * max(val, 1e-300) + 1e-12:
            raise NumericError(f"moment integral did not converge (lambda={lam}, xi={xi}, C={C})")
        total += val
    if total <= 0:
        raise NumericError("moment integral vanished")
    return shift + norm + math.log(total)


@functools.lru_cache(maxsize=65536)
def alpha_continuous(lam, xi, C):
    """Per-round log moment of the sampled Gaussian mechanism.

    ``lam`` is a positive integer, ``xi`` the noise multiplier and ``C`` the
    sampling probability.
    """
    if lam < 1 or int(lam) != lam:
        raise DomainError("lambda must be a positive integer")
    if not xi > 0:
        raise DomainError("xi must be > 0")
    if not 0 <= C <= 1:
        raise DomainError("C must lie in [0, 1]")
    if C == 0:
        return 0.0
    e1 = _log_moment_integral(int(lam), float(xi), float(C), 1)
    e2 = _log_moment_integral(int(lam), float(xi), float(C), 2)
    return max(e1, e2, 0.0)


def alpha_discrete_correction(lam, xi):
    """``log((1 + kappa)^lam / (1 - kappa)^(lam + 1))`` at discrete noise scale ``xi``."""
    k = kappa(xi)
    if k >= 1:
        raise DomainError(f"kappa({xi}) = {k} >= 1; scale too small")
    return lam * math.log1p(k) - (lam + 1) * math.log1p(-k)


def alpha_distributed_correction(lam, xi, nu, k_size=None):
    """Discrete correction plus ``3 log((1 + nu) / (1 - nu))`` for noise split over clients.

    ``xi`` is the scale of the summed noise. When ``k_size`` is given, the
    per-share scale ``xi / sqrt(k_size)`` is checked against the closeness
    condition.
    """
    if not 0 < nu < 1:
        raise DomainError("nu must lie in (0, 1)")
    if k_size is not None and xi / math.sqrt(k_size) < nu_min_scale(nu):
        raise DomainError(
            f"per-share scale {xi / math.sqrt(k_size):.4f} below {nu_min_scale(nu):.4f} for nu={nu}")
    return alpha_discrete_correction(lam, xi) + 3 * math.log((1 + nu) / (1 - nu))


# --- accountant ----------------------------------------------------------------

@dataclass
class PrivacyAccountant:
    """Accumulates per-lambda log moments over rounds.

    ``sigma`` is the noise multiplier. For the discrete mechanisms the integer
    noise scale is ``sqrt(n) * sigma`` (the sign vector has L2 sensitivity
    ``sqrt(n)``).
    """

    sigma: float
    C: float
    mechanism: str = "continuous"
    n: int = 1
    k_size: int = 1
    nu: float = 1e-4
    lambda_grid: tuple = DEFAULT_LAMBDAS
    accumulated_alpha: np.ndarray = field(default=None, repr=False)
    rounds: int = 0

    def __post_init__(self):
        if self.mechanism not in MECHANISMS:
            raise ConfigError(f"unknown mechanism {self.mechanism!r}", field="privacy.mechanism")
        if len(self.lambda_grid) == 0:
            raise ConfigError("empty lambda grid", field="privacy.lambda_max")
        self.lambda_grid = tuple(int(l) for l in self.lambda_grid)
        if self.accumulated_alpha is None:
            self.accumulated_alpha = np.zeros(len(self.lambda_grid))
        self._per_round = None

    @property
    def per_round(self):
        if self._per_round is None:
            self._per_round = np.array([self.round_moment(l) for l in self.lambda_grid])
        return self._per_round

    def round_moment(self, lam):
        a = alpha_continuous(lam, self.sigma, self.C)
        if self.mechanism == "continuous":
            return a
        xi = math.sqrt(self.n) * self.sigma
        if self.mechanism == "discrete":
            return a + alpha_discrete_correction(lam, xi)
        return a + alpha_distributed_correction(lam, xi, self.nu, self.k_size)

    def compose(self, rounds=1):
        self.accumulated_alpha = self.accumulated_alpha + rounds * self.per_round
        self.rounds += rounds

    def epsilon(self, delta):
        """(epsilon, minimising lambda) for the rounds composed so far."""
        return _eps_from_moments(self.accumulated_alpha, self.lambda_grid, delta)


def _eps_from_moments(moments, lambdas, delta):
    if not 0 < delta < 1:
        raise DomainError("delta must lie in (0, 1)")
    if len(lambdas) == 0:
        raise ConfigError("empty lambda grid")
    eps = (np.asarray(moments) - math.log(delta)) / np.asarray(lambdas, dtype=np.float64)
    i = int(np.argmin(eps))
    return float(eps[i]), lambdas[i]


def epsilon_from_accountant(accountant, T_rounds, delta):
    """epsilon after ``T_rounds`` rounds of the accountant's per-round mechanism."""
    eps, _ = _eps_from_moments(T_rounds * accountant.per_round, accountant.lambda_grid, delta)
    return eps


def epsilon_for_sigma(sigma, delta, C, T_rounds, n=1, k_size=1, mechanism="continuous",
                      nu=1e-4, lambda_grid=DEFAULT_LAMBDAS):
    acc = PrivacyAccountant(sigma, C, mechanism, n, k_size, nu, tuple(lambda_grid))
    return epsilon_from_accountant(acc, T_rounds, delta)


def calibrate_sigma(target_epsilon, delta, C, T_rounds, n=1, k_size=1, mechanism="continuous",
                    nu=1e-4, lambda_grid=DEFAULT_LAMBDAS, lo=1e-2, hi=1e3, rtol=1e-3):
    """Smallest noise multiplier (to relative tolerance ``rtol``) meeting ``target_epsilon``.

    Raises:
        CalibrationError: the target is not met even at ``hi``.
    """
    if not target_epsilon > 0:
        raise DomainError("target epsilon must be > 0")

    def eps(s):
        try:
            return epsilon_for_sigma(s, delta, C, T_rounds, n, k_size, mechanism, nu, lambda_grid)
        except DomainError:
            return math.inf

    if eps(hi) > target_epsilon:
        raise CalibrationError(f"epsilon={target_epsilon} unreachable for sigma <= {hi}")
    if eps(lo) <= target_epsilon:
        return lo
    while hi / lo > 1 + rtol:
        mid = math.sqrt(lo * hi)
        if eps(mid) <= target_epsilon:
            hi = mid
        else:
            lo = mid
    return hi


# --- clipping and failure inflation ------------------------------------------

def clip_l2(v, S):
    """``v / max(1, ||v||_2 / S)``."""
    if not S > 0:
        raise DomainError("clip norm must be > 0")
    v = np.asarray(v, dtype=np.float64)
    return v / max(1.0, float(np.linalg.norm(v)) / S)


def share_scale(n, sigma, k_size, failures=0):
    """Per-client discrete noise scale ``sqrt(n) sigma / sqrt(k_size - failures)``."""
    if failures < 0 or failures >= k_size:
        raise DomainError("tolerated failures must lie in [0, k_size)")
    return math.sqrt(n) * sigma / math.sqrt(k_size - failures)


def median_clip_norm(norms):
    """Clipping bound from a calibration round: the median client update norm."""
    norms = np.asarray(norms, dtype=np.float64)
    if norms.size == 0:
        raise ConfigError("no update norms to calibrate from")
    return float(np.median(norms))

