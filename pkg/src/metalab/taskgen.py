"""Synthetic regression task families, task pools and episode sampling.

Two families:

* Gaussian-sampled FCNN targets. Parameters of the representation layers
  (1..L-1) are drawn from N(mu1, sigma1^2) and the final layer from
  N(mu2, sigma2^2). A large sigma1 relative to sigma2 makes tasks differ
  mostly in their features rather than in their readout.
* Sinusoids y = A sin(x + phase).

Every generator takes explicit seeds, so pools and episodes are reproducible.
"""

from __future__ import annotations

import hashlib
import json
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from metalab.diffnet import NetParams, NetSpec, flatten, forward, unflatten

DEFAULT_WIDTHS = (1, 40, 40, 40, 1)
POOL_MAGIC = b"MLPOOL\x00\x01"
POOL_FORMAT_VERSION = 1


class BenchmarkWarning(UserWarning):
    pass


def derive_seed(*keys: int) -> int:
    """Deterministic 63-bit child seed from a tuple of integer keys."""
    ss = np.random.SeedSequence([int(k) & 0xFFFFFFFFFFFFFFFF for k in keys])
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


@dataclass(frozen=True)
class BenchmarkParams:
    mu1: float = 0.0
    sigma1: float = 1.0
    mu2: float = 0.0
    sigma2: float = 1.0
    target_spec: NetSpec = field(default_factory=lambda: NetSpec(DEFAULT_WIDTHS, "relu"))
    input_low: float = -1.0
    input_high: float = 1.0

    def __post_init__(self):
        if self.sigma1 < 0 or self.sigma2 < 0:
            raise ValueError("benchmark standard deviations must be nonnegative")
        if not self.input_low < self.input_high:
            raise ValueError("input_low must be below input_high")

    @property
    def representation_dominates(self) -> bool:
        return self.sigma1 > self.sigma2

    def check(self) -> bool:
        """Warn (non-fatally) when sigma1 <= sigma2; returns whether the warning fired."""
        if not self.representation_dominates:
            warnings.warn(
                f"sigma1={self.sigma1} <= sigma2={self.sigma2}: task variation is not dominated "
                "by the representation layers",
                BenchmarkWarning,
                stacklevel=2,
            )
            return True
        return False

    def to_dict(self) -> dict:
        return {
            "mu1": self.mu1,
            "sigma1": self.sigma1,
            "mu2": self.mu2,
            "sigma2": self.sigma2,
            "target_spec": self.target_spec.to_dict(),
            "input_low": self.input_low,
            "input_high": self.input_high,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BenchmarkParams":
        d = dict(d)
        d["target_spec"] = NetSpec.from_dict(d["target_spec"])
        return cls(**d)


@dataclass(frozen=True, eq=False)
class TargetFunction:
    task_id: int
    spec: NetSpec
    params: NetParams
    seed: int

    def __post_init__(self):
        for a in self.params.weights + self.params.biases:
            a.setflags(write=False)

    @property
    def input_dim(self) -> int:
        return self.spec.input_dim

    @property
    def output_dim(self) -> int:
        return self.spec.output_dim

    def __call__(self, x) -> np.ndarray:
        return forward(self.spec, self.params, x)[0]


@dataclass(frozen=True)
class SinusoidParams:
    amplitude_range: tuple[float, float] = (0.1, 5.0)
    phase_range: tuple[float, float] = (0.0, np.pi)
    input_range: tuple[float, float] = (-5.0, 5.0)

    def __post_init__(self):
        a_min, a_max = self.amplitude_range
        if not 0 < a_min <= a_max:
            raise ValueError("amplitude range must satisfy 0 < a_min <= a_max")
        if self.phase_range[0] > self.phase_range[1]:
            raise ValueError("empty phase range")
        if not self.input_range[0] < self.input_range[1]:
            raise ValueError("empty input range")

    @property
    def input_low(self) -> float:
        return self.input_range[0]

    @property
    def input_high(self) -> float:
        return self.input_range[1]

    def to_dict(self) -> dict:
        return {
            "amplitude_range": list(self.amplitude_range),
            "phase_range": list(self.phase_range),
            "input_range": list(self.input_range),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SinusoidParams":
        return cls(*(tuple(d[k]) for k in ("amplitude_range", "phase_range", "input_range")))


@dataclass(frozen=True)
class SinusoidTask:
    task_id: int
    amplitude: float
    phase: float
    seed: int
    input_dim: int = 1
    output_dim: int = 1

    def __call__(self, x) -> np.ndarray:
        return self.amplitude * np.sin(np.asarray(x, dtype=np.float64) + self.phase)


@dataclass(frozen=True, eq=False)
class Episode:
    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    task_id: int


@dataclass(frozen=True, eq=False)
class TaskPool:
    """A finite, index-stable list of tasks, or an unbounded task stream.

    ``source`` is the BenchmarkParams or SinusoidParams the tasks come from.
    Infinite pools hold no tasks; ``next_task`` samples fresh ones.
    """

    source: BenchmarkParams | SinusoidParams
    tasks: tuple = ()
    seed: int = 0
    infinite: bool = False

    def __len__(self) -> int:
        if self.infinite:
            raise TypeError("an infinite pool has no length")
        return len(self.tasks)

    @property
    def kind(self) -> str:
        return "sinusoid" if isinstance(self.source, SinusoidParams) else "fcnn"

    @property
    def input_range(self) -> tuple[float, float]:
        return self.source.input_low, self.source.input_high


def sample_task(bench: BenchmarkParams, seed: int, task_id: int = 0) -> TargetFunction:
    rng = np.random.default_rng(seed)
    spec = bench.target_spec
    weights, biases = [], []
    last = spec.n_layers - 1
    for l, (o, i) in enumerate(spec.layer_shapes):
        mu, sigma = (bench.mu2, bench.sigma2) if l == last else (bench.mu1, bench.sigma1)
        weights.append(rng.normal(mu, sigma, size=(o, i)))
        biases.append(rng.normal(mu, sigma, size=o))
    return TargetFunction(task_id, spec, NetParams(tuple(weights), tuple(biases)), int(seed))


def sample_sinusoid_task(sp: SinusoidParams, seed: int, task_id: int = 0) -> SinusoidTask:
    rng = np.random.default_rng(seed)
    amplitude = rng.uniform(*sp.amplitude_range)
    phase = rng.uniform(*sp.phase_range)
    return SinusoidTask(task_id, float(amplitude), float(phase), int(seed))


def _sample(source, seed: int, task_id: int):
    if isinstance(source, SinusoidParams):
        return sample_sinusoid_task(source, seed, task_id)
    return sample_task(source, seed, task_id)


def build_finite_pool(source: BenchmarkParams | SinusoidParams, n_tasks: int, seed: int) -> TaskPool:
    if n_tasks < 1:
        raise ValueError("a finite pool needs at least one task")
    tasks = tuple(_sample(source, derive_seed(seed, i), i) for i in range(n_tasks))
    return TaskPool(source, tasks, seed, infinite=False)


def infinite_pool(source: BenchmarkParams | SinusoidParams, seed: int) -> TaskPool:
    return TaskPool(source, (), seed, infinite=True)


class TaskStream:
    """Draws tasks from a pool: uniform over a finite pool, fresh samples otherwise.

    Infinite streams advance a counter, so a task seed is never reused.
    """

    def __init__(self, pool: TaskPool, seed: int):
        self.pool = pool
        self.rng = np.random.default_rng(seed)
        self.seed = seed
        self.counter = 0

    def next_task(self):
        if not self.pool.infinite:
            return self.pool.tasks[int(self.rng.integers(len(self.pool.tasks)))]
        i = self.counter
        self.counter += 1
        return _sample(self.pool.source, derive_seed(self.pool.seed, self.seed, i), i)


def next_task(pool: TaskPool, rng: np.random.Generator):
    """One draw from ``pool``; ``rng`` is advanced in place and returned.

    For infinite pools a fresh task seed is pulled from ``rng``.
    """
    if not pool.infinite:
        return pool.tasks[int(rng.integers(len(pool.tasks)))], rng
    task_seed = int(rng.integers(2**63 - 1))
    return _sample(pool.source, derive_seed(pool.seed, task_seed), -1), rng


def sample_inputs(rng: np.random.Generator, n: int, dim: int, low: float, high: float) -> np.ndarray:
    return rng.uniform(low, high, size=(n, dim))


def sample_episode(task, n_support: int, n_query: int, input_range: tuple[float, float], seed: int) -> Episode:
    if n_support < 1 or n_query < 1:
        raise ValueError("support and query sizes must be positive")
    low, high = input_range
    rng = np.random.default_rng(seed)
    sx = sample_inputs(rng, n_support, task.input_dim, low, high)
    qx = sample_inputs(rng, n_query, task.input_dim, low, high)
    return Episode(sx, task(sx), qx, task(qx), task.task_id)


@dataclass(frozen=True, eq=False)
class EpisodeBatch:
    """Episodes stacked along a leading axis, shape (B, n, d)."""

    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    task_ids: tuple

    def __len__(self) -> int:
        return self.support_x.shape[0]

    @classmethod
    def stack(cls, episodes) -> "EpisodeBatch":
        episodes = list(episodes)
        if not episodes:
            raise ValueError("cannot stack an empty episode list")
        return cls(
            np.stack([e.support_x for e in episodes]),
            np.stack([e.support_y for e in episodes]),
            np.stack([e.query_x for e in episodes]),
            np.stack([e.query_y for e in episodes]),
            tuple(e.task_id for e in episodes),
        )

    def episode(self, i: int) -> Episode:
        return Episode(self.support_x[i], self.support_y[i], self.query_x[i], self.query_y[i], self.task_ids[i])


# ---------------------------------------------------------------------------
# persistence


def _task_vector(task) -> np.ndarray:
    if isinstance(task, SinusoidTask):
        return np.array([task.amplitude, task.phase])
    return flatten(task.params)


def save_pool(pool: TaskPool, path) -> str:
    """Write a finite pool; returns the sha256 of the file."""
    if pool.infinite:
        raise ValueError("only finite pools can be persisted")
    header = {
        "format_version": POOL_FORMAT_VERSION,
        "kind": pool.kind,
        "source": pool.source.to_dict(),
        "n_tasks": len(pool.tasks),
        "seed": pool.seed,
        "task_seeds": [t.seed for t in pool.tasks],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    body = np.concatenate([_task_vector(t) for t in pool.tasks]).astype("<f8").tobytes()
    data = POOL_MAGIC + struct.pack("<Q", len(blob)) + blob + body
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_pool(path) -> TaskPool:
    data = Path(path).read_bytes()
    if not data.startswith(POOL_MAGIC):
        raise ValueError(f"{path} is not a task pool file")
    off = len(POOL_MAGIC)
    (hlen,) = struct.unpack("<Q", data[off : off + 8])
    off += 8
    header = json.loads(data[off : off + hlen])
    if header["format_version"] != POOL_FORMAT_VERSION:
        raise ValueError(f"unsupported pool format version {header['format_version']}")
    body = np.frombuffer(data[off + hlen :], dtype="<f8").astype(np.float64)
    n = header["n_tasks"]
    seeds = header["task_seeds"]
    if header["kind"] == "sinusoid":
        source = SinusoidParams.from_dict(header["source"])
        vecs = body.reshape(n, 2)
        tasks = tuple(SinusoidTask(i, float(a), float(p), seeds[i]) for i, (a, p) in enumerate(vecs))
    else:
        source = BenchmarkParams.from_dict(header["source"])
        vecs = body.reshape(n, source.target_spec.n_params)
        tasks = tuple(
            TargetFunction(i, source.target_spec, unflatten(source.target_spec, v), seeds[i]) for i, v in enumerate(vecs)
        )
    return TaskPool(source, tasks, header["seed"], infinite=False)


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
