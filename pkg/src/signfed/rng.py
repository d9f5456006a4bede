"""Counter-based random streams.

Every random draw in a run comes from a generator keyed by
``(master_seed, purpose, round, client)``. The key is fed to
:class:`numpy.random.SeedSequence`, so streams are independent and the draw a
client sees never depends on the order in which clients are processed. This is
what makes a run reproducible regardless of the worker count.

``client`` is ``SERVER`` (0) for server-side draws; client ``k`` uses ``k + 1``.
"""

from enum import IntEnum

import numpy as np

SERVER = 0


class Purpose(IntEnum):
    INIT = 1
    DATA = 2
    PARTITION = 3
    MALICIOUS = 4
    SAMPLE = 5
    SGD = 6
    SIGN = 7
    NOISE = 8
    ATTACK = 9
    SERVER_TIE = 10
    MASK = 11
    EVAL = 12


def stream(seed, purpose, round_=0, client=SERVER):
    """Return the generator for one (purpose, round, client) cell."""
    if seed < 0 or round_ < 0 or client < 0:
        raise ValueError("stream key components must be non-negative")
    ss = np.random.SeedSequence([int(seed), int(purpose), int(round_), int(client)])
    return np.random.Generator(np.random.PCG64(ss))


def client_stream(seed, purpose, round_, client_id):
    """Generator for client ``client_id`` (0-based) in round ``round_``."""
    return stream(seed, purpose, round_, client_id + 1)


def round_seed(seed, round_):
    """64-bit integer seed for the per-round mask setup."""
    ss = np.random.SeedSequence([int(seed), int(Purpose.MASK), int(round_)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])
