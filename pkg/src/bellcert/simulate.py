"""Random two-qubit devices and finite-round Bell-test sampling.

A device is a pure state in Schmidt form, cos(theta)|00> + sin(theta)|11>
with theta uniform on [0, pi/4], measured by rank-1 projectors whose Bloch
vectors are uniform on the sphere.  Round data is drawn in aggregate: a
multinomial over input pairs followed by per-input multinomials over the
outcome cells, which has exactly the law of a round-by-round loop.

The uniform Schmidt-angle choice is one reading of "random pure state";
ensemble-level statistics (such as the fraction of devices where one method
beats another) can shift under a different state measure.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass

import numpy as np

from .behaviour import Behaviour, CountTable, bell_value, chsh_family

ACCEPT_MARGIN = 1e-9


@dataclass(frozen=True)
class SeededStream:
    """Deterministic RNG address: (master seed, index path, counter).

    Identical instances produce bit-identical draws; children and bumped
    counters are statistically independent streams.
    """

    master_seed: int
    index: tuple[int, ...] = ()
    counter: int = 0

    def rng(self) -> np.random.Generator:
        key = self.index + (self.counter,)
        return np.random.default_rng(
            np.random.SeedSequence(entropy=self.master_seed, spawn_key=key))

    def child(self, *path: int) -> "SeededStream":
        return SeededStream(self.master_seed, self.index + tuple(path), 0)

    def bump(self) -> "SeededStream":
        return SeededStream(self.master_seed, self.index, self.counter + 1)


@dataclass(frozen=True)
class DeviceModel:
    """Schmidt angle plus four measurement directions (unit Bloch vectors,
    outcome-0 projectors)."""

    theta: float
    bloch_a: np.ndarray  # (2, 3): directions for x = 0, 1
    bloch_b: np.ndarray  # (2, 3): directions for y = 0, 1

    def __post_init__(self):
        ba = np.asarray(self.bloch_a, dtype=float)
        bb = np.asarray(self.bloch_b, dtype=float)
        if ba.shape != (2, 3) or bb.shape != (2, 3):
            raise ValueError("Bloch vectors must be two 3-vectors per party")
        for v in (*ba, *bb):
            if abs(np.linalg.norm(v) - 1.0) > 1e-12:
                raise ValueError("Bloch vectors must be unit norm")
        if not 0.0 <= self.theta <= math.pi / 4 + 1e-12:
            raise ValueError("Schmidt angle outside [0, pi/4]")
        ba = ba.copy()
        bb = bb.copy()
        ba.setflags(write=False)
        bb.setflags(write=False)
        object.__setattr__(self, "bloch_a", ba)
        object.__setattr__(self, "bloch_b", bb)

    def to_json(self) -> str:
        return json.dumps({
            "theta": self.theta,
            "blochA": self.bloch_a.tolist(),
            "blochB": self.bloch_b.tolist(),
        })

    @staticmethod
    def from_json(text: str) -> "DeviceModel":
        d = json.loads(text)
        return DeviceModel(d["theta"], np.array(d["blochA"]), np.array(d["blochB"]))


def _unit_sphere(rng: np.random.Generator) -> np.ndarray:
    while True:
        v = rng.normal(size=3)
        norm = np.linalg.norm(v)
        if norm > 1e-12:
            return v / norm


def random_device(stream: SeededStream) -> DeviceModel:
    """Schmidt angle uniform on [0, pi/4]; each Bloch vector a normalised
    triple of independent standard normals (exactly uniform on the sphere)."""
    rng = stream.rng()
    theta = rng.uniform(0.0, math.pi / 4)
    bloch_a = np.array([_unit_sphere(rng) for _ in range(2)])
    bloch_b = np.array([_unit_sphere(rng) for _ in range(2)])
    return DeviceModel(theta, bloch_a, bloch_b)


def chsh_optimal_device(theta: float = math.pi / 4) -> DeviceModel:
    """Device maximising CHSH for the given Schmidt angle: Alice measures
    Z and X, Bob measures in the Z-X plane at the angle adapted to theta.
    Attains 2 sqrt(1 + sin(2 theta)^2)."""
    phi = math.atan(math.sin(2.0 * theta))
    bloch_a = np.array([[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]])
    bloch_b = np.array([
        [math.sin(phi), 0.0, math.cos(phi)],
        [-math.sin(phi), 0.0, math.cos(phi)],
    ])
    return DeviceModel(theta, bloch_a, bloch_b)


_PAULI = np.array([
    [[0.0 + 0.0j, 1.0], [1.0, 0.0]],
    [[0.0, -1.0j], [1.0j, 0.0]],
    [[1.0, 0.0], [0.0, -1.0]],
])


def _projector(direction: np.ndarray, outcome: int) -> np.ndarray:
    sign = 1.0 if outcome == 0 else -1.0
    return 0.5 * (np.eye(2, dtype=complex) + sign * np.einsum("i,ijk->jk", direction, _PAULI))


def behaviour_from(device: DeviceModel) -> Behaviour:
    """Born-rule behaviour of the device: P(ab|xy) = <psi| Pi_a Pi_b |psi>."""
    c, s = math.cos(device.theta), math.sin(device.theta)
    psi = np.array([c, 0.0, 0.0, s], dtype=complex)  # cos|00> + sin|11>
    p = np.empty((2, 2, 2, 2))
    for a, b, x, y in itertools.product(range(2), repeat=4):
        op = np.kron(_projector(device.bloch_a[x], a),
                     _projector(device.bloch_b[y], b))
        p[a, b, x, y] = float(np.real(psi.conj() @ op @ psi))
    return Behaviour(p)


def accept_device(device: DeviceModel) -> bool:
    """True iff some CHSH representative is strictly violated."""
    return best_chsh(device)[0] > 2.0 + ACCEPT_MARGIN


def best_chsh(device: DeviceModel) -> tuple[float, int]:
    """Largest CHSH-family value of the device's behaviour and the index of
    the representative attaining it."""
    P = behaviour_from(device)
    values = [bell_value(expr, P) for expr in chsh_family()]
    best = int(np.argmax(values))
    return float(values[best]), best


def accepted_device(stream: SeededStream, max_tries: int = 1000) -> tuple[DeviceModel, SeededStream]:
    """Sample devices until one violates CHSH; returns the device and the
    stream state after the accepted draw."""
    current = stream
    for _ in range(max_tries):
        device = random_device(current)
        if accept_device(device):
            return device, current
        current = current.bump()
    raise RuntimeError("no CHSH-violating device found within the retry budget")


def sample_counts(P: Behaviour, pi, n: int, stream: SeededStream) -> CountTable:
    """Aggregate i.i.d. sampling: input-pair tallies from multinomial(n, pi),
    then outcome cells from per-input multinomials.  Identical in law to a
    per-round loop; the tally needed for the outside-chi count is the
    input marginal of the table."""
    pi = np.asarray(pi, dtype=float)
    rng = stream.rng()
    counts = np.zeros((2, 2, 2, 2), dtype=np.int64)
    tally = rng.multinomial(n, pi.ravel()).reshape(2, 2)
    for x, y in itertools.product(range(2), repeat=2):
        if tally[x, y] == 0:
            continue
        cells = rng.multinomial(tally[x, y], P.p[:, :, x, y].ravel()).reshape(2, 2)
        counts[:, :, x, y] = cells
    return CountTable(counts, n, pi)
