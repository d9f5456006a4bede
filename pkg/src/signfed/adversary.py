"""Malicious client behaviours.

Attacks only replace what a malicious client sends; honest clients run the same
code with the same random streams whether or not attackers are present.
"""

from dataclasses import dataclass

import numpy as np

from signfed import model as mc
from signfed.errors import ConfigError

KINDS = ("none", "random-update", "gradient-ascent", "sign-inversion",
         "in-backdoor", "out-backdoor")


@dataclass
class AdversaryConfig:
    kind: str = "none"
    fraction: float = 0.0
    per_round: bool = False
    sigma_adv: float = 200.0
    eta_adv: float = 1.0
    source_class: int = 5
    target_class: int = 7
    collude: bool = True
    omit_dp_noise: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown attack {self.kind!r}", field="adversary.kind")
        if not 0 <= self.fraction < 1:
            raise ConfigError("must lie in [0, 1)", field="adversary.fraction")
        if self.kind == "random-update" and not self.sigma_adv > 0:
            raise ConfigError("must be > 0", field="adversary.sigma_adv")
        if not self.eta_adv > 0:
            raise ConfigError("must be > 0", field="adversary.eta_adv")

    @property
    def active(self):
        return (self.kind != "none" or self.omit_dp_noise) and self.fraction > 0


def choose_malicious(N, fraction, rng):
    """Fixed malicious set of size ``round(fraction * N)``."""
    m = int(round(fraction * N))
    return frozenset(int(k) for k in rng.choice(N, size=m, replace=False))


def random_update(n, sigma_adv, rng):
    """Isotropic Gaussian update with per-coordinate std ``sigma_adv``."""
    if not sigma_adv > 0:
        raise ConfigError("must be > 0", field="adversary.sigma_adv")
    return sigma_adv * rng.standard_normal(n)


def gradient_ascent_update(spec, w, features, labels, T_gd, batch_size, eta, eta_adv, rng):
    """Boosted delta of ``T_gd`` ascent steps on the colluders' pooled data.

    Returns ``eta_adv * (w_ascended - w)``. Colluders call this once per round
    and all send the result.
    """
    if len(labels) == 0:
        raise ConfigError("malicious clients hold no data to pool")
    w_up = mc.local_sgd(spec, w, features, labels, T_gd, batch_size, eta, rng, ascent=True)
    return eta_adv * (w_up - w)


def sign_inversion(s):
    return -np.asarray(s)


def backdoor_update(spec, w, shard, T_gd, batch_size, eta, eta_adv, rng):
    """Honest-style training on a poisoned shard, delta scaled by ``eta_adv``."""
    w_up = mc.local_sgd(spec, w, shard.features, shard.labels, T_gd, batch_size, eta, rng)
    return eta_adv * (w_up - w)


def boosted_sign_message(s, eta_adv):
    """Noiseless integer message of a DP-protocol attacker: ``round(eta_adv) * s``."""
    return int(round(eta_adv)) * np.asarray(s, dtype=np.int64)


def attack_accuracy(spec, w, features, labels, target_class):
    """Share of ``features`` classified as ``target_class`` (nan when empty)."""
    if len(labels) == 0:
        return float("nan")
    return float(np.mean(mc.predict(spec, w, features) == target_class))
