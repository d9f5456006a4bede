"""Convergence-bound and bandwidth calculators.

The bounds are reporting tools. They assume one local step per round, a batch
size equal to the number of rounds and the step size
``gamma = sqrt(gap / (L_l1 * T_cl))``; :func:`hypothesis_flags` lists which of
these an experiment config violates.
"""

import math
from dataclasses import dataclass

import numpy as np

from signfed.errors import DomainError

BITS_PER_FLOAT = 32
PROTOCOLS = ("stdfed", "signfed", "dp-signfed", "dp-stdfed")


@dataclass(frozen=True)
class BoundParams:
    tau_l1: float
    L_l1: float
    f0_minus_fstar: float
    T_cl: int
    C: float
    N: int
    alpha_frac: float = 0.0
    n: int = 1
    sigma: float = 0.0

    def __post_init__(self):
        for name in ("tau_l1", "L_l1", "f0_minus_fstar", "alpha_frac", "sigma"):
            if getattr(self, name) < 0:
                raise DomainError(f"{name} must be nonnegative")
        if self.T_cl < 1 or self.N < 1 or self.n < 1:
            raise DomainError("T_cl, N and n must be >= 1")
        if not 0 < self.C <= 1:
            raise DomainError("C must lie in (0, 1]")

    @property
    def clients(self):
        return self.C * self.N

    @property
    def step_size(self):
        """The gamma the bounds assume."""
        return math.sqrt(self.f0_minus_fstar / (self.L_l1 * self.T_cl))


def _smooth_term(p):
    return math.sqrt(p.L_l1 * p.f0_minus_fstar)


def bound_random_attack(p):
    """Bound on the average gradient L1 norm for SignFed with random-update attackers."""
    if p.alpha_frac >= 1:
        raise DomainError("alpha_frac must be < 1")
    noise = math.sqrt(2.0) * p.tau_l1 / ((1.0 - p.alpha_frac) * math.sqrt(p.clients))
    return 2.0 / math.sqrt(p.T_cl) * (noise + _smooth_term(p))


def privacy_cost_term(p):
    """The part of :func:`bound_dp` contributed by the privacy noise (before the 2/sqrt(T) factor)."""
    return math.sqrt(3.0 * p.n) * p.sigma * p.tau_l1 / p.clients


def bound_dp(p):
    """Bound on the average gradient L1 norm for DP-SignFed."""
    inner = p.tau_l1 / math.sqrt(p.clients) + privacy_cost_term(p) + _smooth_term(p)
    return 2.0 / math.sqrt(p.T_cl) * inner


def gradient_ascent_rate(p):
    """Rate shape ``1 / ((1 - 2 alpha) sqrt(CN) T_cl)``; constants are unknown.

    Infinite once half the clients are malicious.
    """
    if p.alpha_frac >= 0.5:
        return math.inf
    return 1.0 / ((1.0 - 2.0 * p.alpha_frac) * math.sqrt(p.clients) * p.T_cl)


def bandwidth_bits(protocol, C, round_, n, modulus_bits=None):
    """Expected upstream bits per client after ``round_`` rounds."""
    if round_ < 1:
        raise DomainError("round must be >= 1")
    if protocol == "signfed":
        per = 1
    elif protocol in ("stdfed", "dp-stdfed"):
        per = BITS_PER_FLOAT
    elif protocol == "dp-signfed":
        if modulus_bits is None:
            raise DomainError("dp-signfed bandwidth needs modulus_bits")
        per = modulus_bits
    else:
        raise DomainError(f"unknown protocol {protocol!r}")
    return per * C * round_ * n


def bits_to_mb(bits):
    """Bits to megabytes, 1 MB = 10**6 bytes."""
    return bits / 8e6


def hypothesis_flags(T_gd, batch_size, T_cl, gamma=None, params=None, rel_tol=1e-6):
    """Names of the bound hypotheses the given run violates."""
    flags = []
    if T_gd != 1:
        flags.append("local_iters != 1")
    if batch_size != T_cl:
        flags.append("batch_size != T_cl")
    if gamma is not None and params is not None:
        if not math.isclose(gamma, params.step_size, rel_tol=rel_tol):
            flags.append("gamma != sqrt(gap / (L_l1 * T_cl))")
    return flags


@dataclass(frozen=True)
class Quadratic:
    """``f(w) = 0.5 * sum(L_i w_i^2)`` with Gaussian gradient noise of std ``tau_i`` per sample.

    Meets the smoothness and variance assumptions of the bounds with
    ``L_l1 = sum(L)``, ``tau_l1 = sum(tau)`` and ``f* = 0``.
    """

    L: tuple
    tau: tuple
    w0: tuple

    def params(self, T_cl, C, N, alpha_frac=0.0):
        L, w0 = np.asarray(self.L), np.asarray(self.w0)
        return BoundParams(float(np.sum(self.tau)), float(np.sum(L)), float(0.5 * np.sum(L * w0 ** 2)),
                           T_cl, C, N, alpha_frac, n=len(L))

    def run_signfed(self, T_cl, C, N, alpha_frac, seed):
        """SignFed with one local step, batch size ``T_cl`` and the bound's step size.

        ``round(alpha_frac * |K|)`` of each round's clients send uniform random
        signs. Returns the average gradient L1 norm over the ``T_cl`` rounds.
        """
        from signfed.protocols import sample_clients, sign, signfed_aggregate
        from signfed.rng import Purpose, client_stream, stream

        L, tau = np.asarray(self.L, dtype=float), np.asarray(self.tau, dtype=float)
        p = self.params(T_cl, C, N, alpha_frac)
        gamma = p.step_size
        w = np.array(self.w0, dtype=float)
        total = 0.0
        for t in range(1, T_cl + 1):
            grad = L * w
            total += float(np.abs(grad).sum())
            ids = sample_clients(N, C, stream(seed, Purpose.SAMPLE, t))
            bad = int(round(alpha_frac * len(ids)))
            msgs = []
            for j, k in enumerate(ids):
                rng = client_stream(seed, Purpose.SGD, t, int(k))
                if j < bad:
                    msgs.append(sign(rng.standard_normal(w.size), rng))
                else:
                    noisy = grad + tau / math.sqrt(T_cl) * rng.standard_normal(w.size)
                    msgs.append(sign(-noisy, rng))
            w = w + signfed_aggregate(msgs, gamma, stream(seed, Purpose.SERVER_TIE, t))
        return total / T_cl
