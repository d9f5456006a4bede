"""Round-driven federated protocols: StdFed, SignFed, DP-SignFed and DP-StdFed.

A :class:`Simulation` holds the global model and runs one round at a time.
Every random draw comes from a stream keyed by (seed, purpose, round, client),
so the order in which worker threads finish never changes a result.

Honest clients always run the same code. Attacks only replace the outbound
message of a malicious client.
"""

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from signfed import adversary as adv
from signfed import data as ds
from signfed import dp, secagg, theory
from signfed import model as mc
from signfed.errors import ConfigError, DomainError, NumericError
from signfed.rng import SERVER, Purpose, client_stream, round_seed, stream

DIVERGENCE_FACTOR = 10.0
DIVERGENCE_PATIENCE = 10
SIGN_PROTOCOLS = ("signfed", "dp-signfed")


# --- aggregation primitives --------------------------------------------------

def sample_clients(N, C, rng):
    """Sorted ids of ``max(1, round(C * N))`` clients drawn without replacement."""
    if N < 1:
        raise ConfigError("must be >= 1", field="protocol.N")
    if not 0 < C <= 1:
        raise ConfigError("must lie in (0, 1]", field="protocol.C")
    K = max(1, int(round(C * N)))
    return np.sort(rng.choice(N, size=K, replace=False))


def sign(v, rng):
    """Coordinatewise sign in {-1, +1}; zeros become a fair coin flip."""
    v = np.asarray(v)
    if np.isnan(v).any():
        raise NumericError("sign of a vector containing NaN")
    s = np.sign(v).astype(np.int64)
    zeros = np.flatnonzero(s == 0)
    if zeros.size:
        s[zeros] = 2 * rng.integers(0, 2, size=zeros.size) - 1
    return s


def _check_lengths(vectors):
    if len({np.shape(v) for v in vectors}) != 1 or np.ndim(vectors[0]) != 1:
        raise ConfigError("client vectors must be 1-D with equal lengths")


def stdfed_aggregate(updates, sizes):
    """Data-size weighted sum of client deltas."""
    if len(updates) == 0 or len(updates) != len(sizes):
        raise ConfigError("need one size per update")
    _check_lengths(updates)
    U = np.asarray(updates, dtype=np.float64)
    sizes = np.asarray(sizes, dtype=np.float64)
    if (sizes <= 0).any():
        raise ConfigError("client data sizes must be > 0")
    return (sizes / sizes.sum()) @ U


def sign_step(total, gamma, rng):
    """``gamma * sign(total)`` with random tie-break."""
    return gamma * sign(total, rng).astype(np.float64)


def signfed_aggregate(sign_vectors, gamma, rng):
    """``gamma * sign(sum of sign vectors)``, ties broken by ``rng``."""
    if len(sign_vectors) == 0:
        raise ConfigError("need at least one sign vector")
    _check_lengths(sign_vectors)
    S = np.asarray(sign_vectors, dtype=np.int64)
    return sign_step(S.sum(axis=0), gamma, rng)


# --- records -----------------------------------------------------------------

@dataclass
class RoundRecord:
    t: int
    accuracy: float
    per_class: np.ndarray
    attack_accuracy: float
    bits: float
    test_loss: float
    diverged: bool = False
    wall_time: float = 0.0


@dataclass
class RunSummary:
    protocol: str
    rounds: int
    num_params: int
    best_accuracy: float
    best_round: int
    final_accuracy: float
    bandwidth_bits: float
    bandwidth_mb: float
    diverged: bool
    divergence_round: int = None
    best_attack_accuracy: float = None
    final_attack_accuracy: float = None
    epsilon: float = None
    delta: float = None
    epsilon_lambda: int = None
    epsilon_note: str = None
    modulus_bits: int = None
    clip_norm: float = None
    malicious_clients: int = 0
    bound_hypotheses_violated: list = field(default_factory=list)

    def to_dict(self):
        out = dict(self.__dict__)
        for k, v in out.items():
            if isinstance(v, float) and not math.isfinite(v):
                out[k] = None if math.isnan(v) else ("inf" if v > 0 else "-inf")
        return out


# --- simulation ----------------------------------------------------------------

class Simulation:
    """Global state of one federated run.

    Args:
        spec: model architecture.
        train: training pool; ``part`` says which rows each client holds.
        test: held-out evaluation set.
        proto, privacy, attack: config sections (see :mod:`signfed.config`).
        seed: master seed.
        workers: threads for client-side work.
    """

    def __init__(self, spec, train, part, test, proto, privacy, attack, seed, workers=1):
        self.spec = spec
        self.proto = proto
        self.privacy = privacy
        self.attack = attack
        self.seed = int(seed)
        self.workers = int(workers)
        self.n = spec.num_params
        N = part.num_clients
        if N != proto.N:
            raise ConfigError(f"partition has {N} clients", field="protocol.N")
        self.K = proto.clients_per_round

        self.malicious = frozenset()
        if attack.active and not attack.per_round:
            self.malicious = adv.choose_malicious(N, attack.fraction, stream(self.seed, Purpose.MALICIOUS))

        self.shards = [train.subset(ix) for ix in part.client_indices]
        self.eval_set = test
        self.attack_set = None
        if attack.kind == "in-backdoor" and attack.active:
            src, tgt = attack.source_class, attack.target_class
            self.poisoned = {k: ds.relabel_in_backdoor(self.shards[k], src, tgt) for k in range(N)}
            self.attack_set = test.subset(np.flatnonzero(test.labels == src))
        elif attack.kind == "out-backdoor" and attack.active:
            if attack.per_round:
                raise ConfigError("out-backdoor needs a fixed malicious set", field="adversary.per_round")
            self.shards, _ = ds.build_out_backdoor(train, part, attack.source_class,
                                                   attack.target_class, self.malicious)
            self.poisoned = {k: self.shards[k] for k in self.malicious}
            self.eval_set = test.subset(np.flatnonzero(test.labels != attack.source_class))
            self.attack_set = test.subset(np.flatnonzero(test.labels == attack.source_class))
        else:
            self.poisoned = {}
        for k, shard in enumerate(self.shards):
            if len(shard) == 0:
                raise ConfigError(f"client {k} holds no data", field="partition.per_client")

        self.w = mc.init_params(spec, stream(self.seed, Purpose.INIT))
        self.initial_loss = self._eval_loss(self.w)
        self.t = 0
        self.dead = False
        self.diverged = False
        self.divergence_round = None
        self._over = 0
        self.ring_bits = None
        self.clip_norm = privacy.clip if proto.name == "dp-stdfed" else None
        if proto.name == "dp-signfed":
            mu = max(1, int(round(attack.eta_adv))) if attack.omit_dp_noise and attack.active else 1
            self.ring_bits = secagg.ring_bits(self.n, privacy.sigma, self.K, mu, privacy.t)
        if proto.name == "dp-stdfed" and privacy.clip_mode == "median":
            self.clip_norm = self._calibrate_clip()

    # -- helpers --

    def _map(self, fn, items):
        if self.workers == 1 or len(items) <= 1:
            return [fn(x) for x in items]
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            return list(pool.map(fn, items))

    def _eval_loss(self, w):
        ev = self.eval_set
        return mc.forward_loss(self.spec, w, mc.Batch(ev.features, ev.labels))

    def _train(self, w, shard, rng, ascent=False):
        p = self.proto
        return mc.local_sgd(self.spec, w, shard.features, shard.labels, p.local_iters,
                            p.batch_size, p.lr, rng, ascent=ascent)

    def honest_delta(self, t, k, w):
        rng = client_stream(self.seed, Purpose.SGD, t, k)
        return self._train(w, self.shards[k], rng) - w

    def _calibrate_clip(self):
        ids = sample_clients(self.proto.N, self.proto.C, stream(self.seed, Purpose.SAMPLE, 0))
        deltas = self._map(lambda k: self.honest_delta(0, int(k), self.w), list(ids))
        return dp.median_clip_norm([np.linalg.norm(d) for d in deltas])

    def malicious_in_round(self, t, ids):
        if not self.attack.active:
            return frozenset()
        if not self.attack.per_round:
            return frozenset(int(k) for k in ids if int(k) in self.malicious)
        m = int(round(self.attack.fraction * len(ids)))
        rng = stream(self.seed, Purpose.MALICIOUS, t)
        return frozenset(int(k) for k in rng.choice(ids, size=m, replace=False))

    def _pooled_ascent(self, t, w, bad):
        """One shared ascent run on the union of the colluders' data."""
        members = sorted(self.malicious if not self.attack.per_round else bad)
        feats = np.vstack([self.shards[k].features for k in members])
        labels = np.concatenate([self.shards[k].labels for k in members])
        p = self.proto
        return adv.gradient_ascent_update(self.spec, w, feats, labels, p.local_iters, p.batch_size,
                                          p.lr, self.attack.eta_adv,
                                          stream(self.seed, Purpose.ATTACK, t))

    def _malicious_vector(self, t, k, w, shared):
        """Pre-sign update of a malicious client (``None`` means sign inversion)."""
        a, p = self.attack, self.proto
        if a.kind == "random-update":
            return adv.random_update(self.n, a.sigma_adv, client_stream(self.seed, Purpose.ATTACK, t, k))
        if a.kind == "gradient-ascent":
            if a.collude:
                return shared["ascent"]
            rng = client_stream(self.seed, Purpose.ATTACK, t, k)
            sh = self.shards[k]
            return adv.gradient_ascent_update(self.spec, w, sh.features, sh.labels, p.local_iters,
                                              p.batch_size, p.lr, a.eta_adv, rng)
        if a.kind in ("in-backdoor", "out-backdoor"):
            rng = client_stream(self.seed, Purpose.SGD, t, k)
            return adv.backdoor_update(self.spec, w, self.poisoned[k], p.local_iters, p.batch_size,
                                       p.lr, a.eta_adv, rng)
        return self.honest_delta(t, k, w)

    # -- client messages --

    def client_message(self, t, k, w, bad, shared):
        """Outbound message of client ``k``: float delta or integer sign vector."""
        is_bad = k in bad
        signs = self.proto.name in SIGN_PROTOCOLS
        kind = self.attack.kind if is_bad else "none"

        if kind == "gradient-ascent" and self.attack.collude and signs:
            s = shared["ascent_sign"]
        elif is_bad:
            v = self._malicious_vector(t, k, w, shared)
            if kind == "sign-inversion" and not signs:
                v = -v
            s = sign(v, client_stream(self.seed, Purpose.SIGN, t, k)) if signs else v
            if kind == "sign-inversion" and signs:
                s = adv.sign_inversion(s)
        else:
            v = self.honest_delta(t, k, w)
            s = sign(v, client_stream(self.seed, Purpose.SIGN, t, k)) if signs else v

        name = self.proto.name
        omit = is_bad and self.attack.omit_dp_noise
        if name == "dp-signfed":
            if omit:
                z = adv.boosted_sign_message(s, self.attack.eta_adv)
            elif self.privacy.sigma > 0:
                xi = dp.share_scale(self.n, self.privacy.sigma, self.K, self.privacy.failures)
                noise = dp.sample_discrete_gaussian(0, xi, client_stream(self.seed, Purpose.NOISE, t, k),
                                                    size=self.n)
                z = s + noise
            else:
                z = s
            return np.asarray(z, dtype=np.int64)
        if name == "dp-stdfed":
            clipped = dp.clip_l2(s, self.clip_norm)
            if omit:
                return self.attack.eta_adv * clipped
            std = self.clip_norm * self.privacy.sigma / math.sqrt(self.K - self.privacy.failures)
            if std == 0:
                return clipped
            return clipped + std * client_stream(self.seed, Purpose.NOISE, t, k).standard_normal(self.n)
        return s

    # -- round --

    def run_round(self):
        """Execute the next round and return its :class:`RoundRecord`."""
        t = self.t + 1
        start = time.perf_counter()
        name, p = self.proto.name, self.proto
        if self.dead:
            self.t = t
            return self._record(t, start, dead=True)

        w = self.w
        ids = [int(k) for k in sample_clients(p.N, p.C, stream(self.seed, Purpose.SAMPLE, t))]
        bad = self.malicious_in_round(t, ids)
        shared = {}
        if bad and self.attack.kind == "gradient-ascent" and self.attack.collude:
            shared["ascent"] = self._pooled_ascent(t, w, bad)
            if name in SIGN_PROTOCOLS:
                shared["ascent_sign"] = sign(shared["ascent"], stream(self.seed, Purpose.SIGN, t, SERVER))

        msgs = self._map(lambda k: self.client_message(t, k, w, bad, shared), ids)
        tie = stream(self.seed, Purpose.SERVER_TIE, t)
        if name == "stdfed":
            step = stdfed_aggregate(msgs, [len(self.shards[k]) for k in ids])
        elif name == "signfed":
            step = signfed_aggregate(msgs, p.gamma, tie)
        elif name == "dp-signfed":
            bits = self.ring_bits
            masks = secagg.gen_masks(ids, self.n, bits, round_seed(self.seed, t))
            masked = [secagg.enc(z, masks[k], bits) for k, z in zip(ids, msgs)]
            total = secagg.decode_sum(secagg.aggregate(masked), bits)
            step = sign_step(total, p.gamma, tie)
        else:
            step = np.sum(msgs, axis=0) / len(ids)

        with np.errstate(over="ignore", invalid="ignore"):
            self.w = w + step
        self.t = t
        return self._record(t, start)

    def _record(self, t, start, dead=False):
        nc = self.spec.num_classes
        if not dead and not np.all(np.isfinite(self.w)):
            dead = True
        if dead:
            if not self.diverged:
                self.diverged, self.divergence_round = True, t
            self.dead = True
            return RoundRecord(t, 0.0, np.zeros(nc), 0.0 if self.attack_set is not None else math.nan,
                               self.bits(t), math.inf, True, time.perf_counter() - start)

        ev = self.eval_set
        with np.errstate(over="ignore", invalid="ignore"):
            loss = self._eval_loss(self.w)
        self._over = self._over + 1 if not loss <= DIVERGENCE_FACTOR * self.initial_loss else 0
        if self._over >= DIVERGENCE_PATIENCE and not self.diverged:
            self.diverged, self.divergence_round = True, t
        acc = mc.accuracy(self.spec, self.w, ev.features, ev.labels)
        per = mc.per_class_accuracy(self.spec, self.w, ev.features, ev.labels)
        att = math.nan
        if self.attack_set is not None:
            att = adv.attack_accuracy(self.spec, self.w, self.attack_set.features,
                                      self.attack_set.labels, self.attack.target_class)
        return RoundRecord(t, acc, per, att, self.bits(t), loss, self.diverged,
                           time.perf_counter() - start)

    def bits(self, t):
        return theory.bandwidth_bits(self.proto.name, self.proto.C, t, self.n, self.ring_bits)

    # -- privacy --

    def accountant(self):
        """Accountant for this run's mechanism, or ``None`` for non-DP protocols."""
        name, pr = self.proto.name, self.privacy
        if name == "dp-signfed":
            return dp.PrivacyAccountant(pr.sigma, self.proto.C, "discrete-distributed", n=self.n,
                                        k_size=self.K - pr.failures, nu=pr.nu)
        if name == "dp-stdfed":
            return dp.PrivacyAccountant(pr.sigma, self.proto.C, "continuous")
        return None


# --- experiments ---------------------------------------------------------------

def _int_seed(seed, purpose, round_=0):
    return int(stream(seed, purpose, round_).integers(2**63 - 1))


def load_data(cfg):
    """(train, test) datasets for a config."""
    d = cfg.data
    if d.source == "mnist":
        try:
            return ds.load_mnist(d.path)
        except FileNotFoundError as exc:
            raise ConfigError(f"missing file {exc.args[0]}", field="data.path") from exc
    full = ds.make_synthetic(d.num_classes, d.dim, d.per_class, d.separation,
                             _int_seed(cfg.seed, Purpose.DATA))
    return ds.train_test_split(full, d.test_fraction, _int_seed(cfg.seed, Purpose.DATA, 1))


def build_simulation(cfg, data=None):
    cfg.validate()
    train, test = data if data is not None else load_data(cfg)
    spec = mc.ModelSpec(cfg.model.kind, train.features.shape[1], train.num_classes,
                        cfg.model.hidden_dim)
    part = ds.partition(train, cfg.protocol.N, cfg.partition.per_client, cfg.partition.mode,
                        _int_seed(cfg.seed, Purpose.PARTITION))
    return Simulation(spec, train, part, test, cfg.protocol, cfg.privacy, cfg.adversary,
                      cfg.seed, cfg.workers)


def summarize(sim, records):
    if not records:
        return None
    p = sim.proto
    acc = np.array([r.accuracy for r in records])
    best = int(np.nanargmax(acc)) if np.isfinite(acc).any() else 0
    rec = records[best]
    out = RunSummary(
        protocol=p.name, rounds=len(records), num_params=sim.n,
        best_accuracy=float(rec.accuracy), best_round=rec.t,
        final_accuracy=float(records[-1].accuracy),
        bandwidth_bits=rec.bits, bandwidth_mb=theory.bits_to_mb(rec.bits),
        diverged=sim.diverged, divergence_round=sim.divergence_round,
        modulus_bits=sim.ring_bits, clip_norm=sim.clip_norm,
        malicious_clients=len(sim.malicious),
    )
    if sim.attack_set is not None:
        out.best_attack_accuracy = float(rec.attack_accuracy)
        out.final_attack_accuracy = float(records[-1].attack_accuracy)
    if p.name in SIGN_PROTOCOLS:
        out.bound_hypotheses_violated = theory.hypothesis_flags(p.local_iters, p.batch_size, p.rounds)
    acct = sim.accountant()
    if acct is not None:
        out.delta = sim.privacy.delta
        if sim.privacy.sigma == 0:
            out.epsilon, out.epsilon_note = math.inf, "no noise"
        else:
            try:
                acct.compose(len(records))
                out.epsilon, out.epsilon_lambda = acct.epsilon(sim.privacy.delta)
            except DomainError as exc:
                out.epsilon_note = f"accountant not applicable: {exc}"
    return out


def run_experiment(cfg, data=None, on_round=None):
    """Run every round of ``cfg``; returns ``(records, summary)``.

    ``summary`` is ``None`` when the config asks for zero rounds.
    """
    sim = build_simulation(cfg, data)
    records = []
    for _ in range(cfg.protocol.rounds):
        r = sim.run_round()
        records.append(r)
        if on_round is not None:
            on_round(r)
    return records, summarize(sim, records)
