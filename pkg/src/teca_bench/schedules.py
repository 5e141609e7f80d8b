"""Evaluation stream construction: the four protocols.

A schedule is an ordered list of segments, each naming a suite cell
(corruption kind, severity) and the presentation order of its samples.
Schedules are immutable after construction, fully determined by (seed,
suite manifest), and serialize to JSON so a run can be replayed from its
manifest alone.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corruptions import CorruptedSuite
from .errors import ConfigError, ValidationError
from .seeding import component_seed

# Fixed evaluation order for the standard protocol (noise, blur, digital).
CANONICAL_KIND_ORDER = (
    "gaussian_noise",
    "shot_noise",
    "impulse_noise",
    "defocus_blur",
    "motion_blur",
    "brightness",
    "contrast",
    "elastic_like",
    "pixelate",
    "jpeg_like",
)

GRADUAL_SEVERITY_SEQUENCE = (1, 2, 3, 4, 5, 4, 3, 2, 1)

PROTOCOLS = ("standard", "gradual", "diverse", "ptta")


@dataclass(frozen=True)
class StreamSegment:
    kind: str
    severity: int
    indices: np.ndarray  # presentation order, each cell index exactly once
    batch_size: int

    def batches(self):
        for start in range(0, len(self.indices), self.batch_size):
            yield self.indices[start : start + self.batch_size]

    @property
    def n_batches(self) -> int:
        return (len(self.indices) + self.batch_size - 1) // self.batch_size


@dataclass(frozen=True)
class Schedule:
    segments: tuple[StreamSegment, ...]
    protocol: str
    seed: int
    suite_hash: str = ""
    trial: int | None = None

    def manifest(self) -> dict:
        return {
            "protocol": self.protocol,
            "seed": self.seed,
            "suite_hash": self.suite_hash,
            "trial": self.trial,
            "segments": [
                {
                    "kind": s.kind,
                    "severity": s.severity,
                    "batch_size": s.batch_size,
                    "indices": [int(i) for i in s.indices],
                }
                for s in self.segments
            ],
        }

    def manifest_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.manifest(), sort_keys=True).encode()).hexdigest()

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.manifest(), indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "Schedule":
        m = json.loads(Path(path).read_text())
        segments = tuple(
            StreamSegment(
                kind=s["kind"],
                severity=int(s["severity"]),
                indices=np.asarray(s["indices"], dtype=np.int64),
                batch_size=int(s["batch_size"]),
            )
            for s in m["segments"]
        )
        return cls(
            segments=segments,
            protocol=m["protocol"],
            seed=int(m["seed"]),
            suite_hash=m.get("suite_hash", ""),
            trial=m.get("trial"),
        )


def _suite_hash(suite: CorruptedSuite) -> str:
    return hashlib.sha256(json.dumps(suite.manifest, sort_keys=True).encode()).hexdigest()


def _ordered_kinds(kinds) -> list[str]:
    unknown = [k for k in kinds if k not in CANONICAL_KIND_ORDER]
    if unknown:
        raise ValidationError(f"kinds not in the canonical order table: {unknown}")
    return [k for k in CANONICAL_KIND_ORDER if k in set(kinds)]


def _require_cell(suite: CorruptedSuite, kind: str, severity: int) -> int:
    if (kind, severity) not in suite.cells:
        raise ConfigError(f"suite is missing cell ({kind}, {severity})")
    return len(suite.cells[(kind, severity)])


def _segment(suite, kind, severity, batch_size, seed) -> StreamSegment:
    n = _require_cell(suite, kind, severity)
    rng = np.random.default_rng(seed)
    return StreamSegment(kind, severity, rng.permutation(n).astype(np.int64), batch_size)


def build_standard(
    kinds, severity: int, suite: CorruptedSuite, batch_size: int, seed: int = 0
) -> Schedule:
    """One segment per kind at a fixed severity, canonical kind order,
    shuffled sample order per seed."""
    segments = tuple(
        _segment(suite, kind, severity, batch_size, component_seed(seed, f"standard:{kind}"))
        for kind in _ordered_kinds(kinds)
    )
    return Schedule(segments, "standard", seed, _suite_hash(suite))


def build_gradual(kinds, suite: CorruptedSuite, batch_size: int, seed: int = 0) -> Schedule:
    """Per kind, nine sub-segments ramping severity 1..5 and back down."""
    segments = []
    for kind in _ordered_kinds(kinds):
        for pos, severity in enumerate(GRADUAL_SEVERITY_SEQUENCE):
            segments.append(
                _segment(
                    suite, kind, severity, batch_size,
                    component_seed(seed, f"gradual:{kind}:{pos}"),
                )
            )
    return Schedule(tuple(segments), "gradual", seed, _suite_hash(suite))


def build_diverse(
    kinds, severity: int, suite: CorruptedSuite, batch_size: int, n_trials: int = 10, seed: int = 0
) -> list[Schedule]:
    """n_trials schedules, each a seeded uniform permutation of the kinds."""
    if n_trials < 1:
        raise ValidationError("n_trials must be >= 1")
    ordered = _ordered_kinds(kinds)
    schedules = []
    for trial in range(n_trials):
        rng = np.random.default_rng(component_seed(seed, f"diverse-order:{trial}"))
        order = [ordered[i] for i in rng.permutation(len(ordered))]
        segments = tuple(
            _segment(
                suite, kind, severity, batch_size,
                component_seed(seed, f"diverse:{trial}:{kind}"),
            )
            for kind in order
        )
        schedules.append(
            Schedule(segments, "diverse", seed, _suite_hash(suite), trial=trial)
        )
    return schedules


def _largest_remainder(fractions: np.ndarray, total: int) -> np.ndarray:
    raw = fractions * total
    counts = np.floor(raw).astype(np.int64)
    short = total - counts.sum()
    if short > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def label_correlated_order(
    labels: np.ndarray, batch_size: int, delta: float, rng: np.random.Generator
) -> np.ndarray:
    """Permutation of sample indices with label-correlated runs.

    Samples are partitioned into batch-sized slots; each slot draws a class
    distribution from Dirichlet(delta) (via per-slot gamma weights), class
    quotas are apportioned by largest remainder, then rebalanced to exact
    slot capacities. Small delta concentrates each slot on few classes;
    large delta recovers near class-balanced slots.
    """
    n = len(labels)
    classes = np.unique(labels)
    n_slots = (n + batch_size - 1) // batch_size
    caps = np.full(n_slots, batch_size, dtype=np.int64)
    caps[-1] = n - batch_size * (n_slots - 1)

    weights = rng.gamma(delta, 1.0, size=(n_slots, len(classes))) + 1e-300
    quotas = np.zeros((n_slots, len(classes)), dtype=np.int64)
    for j, cls in enumerate(classes):
        count = int((labels == cls).sum())
        fractions = weights[:, j] / weights[:, j].sum()
        quotas[:, j] = _largest_remainder(fractions, count)

    loads = quotas.sum(axis=1)
    while True:  # move one unit at a time from the most-over to the most-under slot
        over = int(np.argmax(loads - caps))
        if loads[over] <= caps[over]:
            break
        under = int(np.argmin(loads - caps))
        donor_class = int(np.argmax(quotas[over]))
        quotas[over, donor_class] -= 1
        quotas[under, donor_class] += 1
        loads[over] -= 1
        loads[under] += 1

    stacks = {}
    for j, cls in enumerate(classes):
        idx = np.flatnonzero(labels == cls)
        stacks[j] = list(rng.permutation(idx))
    order = []
    for s in range(n_slots):
        slot: list[int] = []
        for j in range(len(classes)):
            for _ in range(quotas[s, j]):
                slot.append(int(stacks[j].pop()))
        rng.shuffle(slot)
        order.extend(slot)
    return np.asarray(order, dtype=np.int64)


def build_ptta(
    kinds, severity: int, suite: CorruptedSuite, batch_size: int, delta: float = 0.1, seed: int = 0
) -> Schedule:
    """Canonical kind order with label-correlated sample order per segment."""
    if delta <= 0:
        raise ValidationError("delta must be positive")
    segments = []
    for kind in _ordered_kinds(kinds):
        _require_cell(suite, kind, severity)
        cell = suite.cells[(kind, severity)]
        rng = np.random.default_rng(component_seed(seed, f"ptta:{kind}"))
        order = label_correlated_order(cell.labels, batch_size, delta, rng)
        segments.append(StreamSegment(kind, severity, order, batch_size))
    return Schedule(tuple(segments), "ptta", seed, _suite_hash(suite))
