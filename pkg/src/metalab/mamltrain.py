"""Episodic MAML training with exact second-order meta-gradients.

The meta-gradient for k inner steps is built by walking back through the
inner trajectory theta_0 .. theta_k:

    g <- grad L_query(theta_k)
    g <- g - lr * H_support(theta_j) g      for j = k-1, ..., 0

Each Hessian-vector product is exact (see ``diffnet.hvp_params``). All
episodes of a meta-batch are processed together along a leading batch axis.
"""

from __future__ import annotations

import csv
import json
import math
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from metalab.diffnet import (
    BatchNormState,
    NetParams,
    NetSpec,
    flatten,
    forward,
    hvp_params,
    init_params,
    loss_grad,
    unflatten,
)
from metalab.taskgen import Episode, EpisodeBatch, TargetFunction, TaskPool, TaskStream, derive_seed

CHECKPOINT_MAGIC = b"MLCKPT\x00\x01"
CHECKPOINT_FORMAT_VERSION = 1
CURVE_COLUMNS = ("epoch", "meta_train_loss", "meta_val_loss", "wall_time_s")


@dataclass(frozen=True)
class InnerConfig:
    steps: int = 1
    lr: float = 0.1
    first_order: bool = False

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("inner steps must be nonnegative")
        if self.lr < 0:
            raise ValueError("inner learning rate must be nonnegative")


@dataclass(frozen=True)
class OuterConfig:
    adam_lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    meta_batch_size: int = 75

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if self.adam_lr <= 0:
            raise ValueError("Adam learning rate must be positive")
        if self.meta_batch_size < 1:
            raise ValueError("meta-batch size must be at least 1")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1000
    eval_every: int = 10
    n_support: int = 5
    n_query: int = 15
    val_episodes: int = 100
    record_wall_time: bool = True

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        if self.eval_every < 1:
            raise ValueError("eval cadence must be at least 1")
        if self.n_support < 1 or self.n_query < 1 or self.val_episodes < 1:
            raise ValueError("episode sizes and validation budget must be positive")


@dataclass(frozen=True, eq=False)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n_params: int) -> "AdamState":
        return cls(np.zeros(n_params), np.zeros(n_params), 0)


@dataclass(frozen=True, eq=False)
class Checkpoint:
    spec: NetSpec
    params: NetParams
    bn: BatchNormState | None
    adam: AdamState
    epoch: int
    meta_val_loss: float
    format_version: int = CHECKPOINT_FORMAT_VERSION
    meta: dict = field(default_factory=dict)


@dataclass
class TrainingRun:
    curve: list = field(default_factory=list)  # (epoch, train, val, wall_time_s)
    checkpoint_best: Checkpoint | None = None
    checkpoint_last: Checkpoint | None = None
    config: dict = field(default_factory=dict)
    seed: int = 0
    initial_train_loss: float = math.nan
    initial_val_loss: float = math.nan

    @property
    def epochs(self) -> np.ndarray:
        return np.array([r[0] for r in self.curve], dtype=int)

    @property
    def train_losses(self) -> np.ndarray:
        return np.array([r[1] for r in self.curve])

    @property
    def val_losses(self) -> np.ndarray:
        return np.array([r[2] for r in self.curve])

    def write_curves(self, path) -> None:
        write_curves_csv(self.curve, path)


# ---------------------------------------------------------------------------
# inner loop and meta-gradient


def _as_batch(episodes) -> EpisodeBatch:
    if isinstance(episodes, EpisodeBatch):
        return episodes
    if isinstance(episodes, Episode):
        return EpisodeBatch.stack([episodes])
    return EpisodeBatch.stack(episodes)


def inner_adapt(spec: NetSpec, params: NetParams, support_x, support_y, cfg: InnerConfig, bn=None) -> NetParams:
    """Full-batch gradient descent on the support MSE; returns a new parameter set.

    Batched support sets of shape (B, n, d) give batched adapted parameters.
    """
    theta = params
    for _ in range(cfg.steps):
        _, g = loss_grad(spec, theta, support_x, support_y, bn)
        theta = theta.add_scaled(g, -cfg.lr)
    return theta if cfg.steps else params.copy()


def episode_losses(spec: NetSpec, params: NetParams, episodes, cfg: InnerConfig, bn=None) -> np.ndarray:
    """Post-adaptation query MSE of each episode."""
    batch = _as_batch(episodes)
    adapted = inner_adapt(spec, params, batch.support_x, batch.support_y, cfg, bn)
    _, trace = forward(spec, adapted, batch.query_x, bn)
    resid = trace.hidden[-1] - batch.query_y
    return np.mean(resid**2, axis=(-2, -1))


def episode_meta_loss(spec: NetSpec, params: NetParams, episode: Episode, cfg: InnerConfig, bn=None) -> float:
    return float(episode_losses(spec, params, episode, cfg, bn)[0])


def meta_gradient(spec: NetSpec, params: NetParams, episodes, cfg: InnerConfig, bn=None):
    """Mean post-adaptation query loss over ``episodes`` and its exact gradient.

    Returns ``(mean_loss, gradient, per_episode_losses)``.
    """
    batch = _as_batch(episodes)
    if len(batch) == 0:
        raise ValueError("meta_gradient needs at least one episode")
    trajectory = [params]
    theta = params
    for _ in range(cfg.steps):
        _, g = loss_grad(spec, theta, batch.support_x, batch.support_y, bn)
        theta = theta.add_scaled(g, -cfg.lr)
        trajectory.append(theta)
    losses, g = loss_grad(spec, theta, batch.query_x, batch.query_y, bn)
    if not cfg.first_order:
        for theta_j in reversed(trajectory[:-1]):
            hv = hvp_params(spec, theta_j, batch.support_x, batch.support_y, g, bn)
            g = g.add_scaled(hv, -cfg.lr)
    losses = np.atleast_1d(losses)
    return float(losses.mean()), g.mean_over_batch(), losses


# ---------------------------------------------------------------------------
# outer optimizer


def adam_step(state: AdamState, params: NetParams, grad: NetParams, cfg: OuterConfig):
    theta = flatten(params)
    g = flatten(grad)
    if g.shape != theta.shape or state.m.shape != theta.shape:
        raise ValueError("Adam state, parameters and gradient must have matching shapes")
    t = state.t + 1
    m = cfg.beta1 * state.m + (1 - cfg.beta1) * g
    v = cfg.beta2 * state.v + (1 - cfg.beta2) * g * g
    m_hat = m / (1 - cfg.beta1**t)
    v_hat = v / (1 - cfg.beta2**t)
    theta = theta - cfg.adam_lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
    return _unflatten_like(params, theta), AdamState(m, v, t)


def _unflatten_like(params: NetParams, flat: np.ndarray) -> NetParams:
    weights, biases, pos = [], [], 0
    for W, b in zip(params.weights, params.biases):
        weights.append(flat[pos : pos + W.size].reshape(W.shape))
        pos += W.size
        biases.append(flat[pos : pos + b.size].reshape(b.shape))
        pos += b.size
    return NetParams(tuple(weights), tuple(biases))


# ---------------------------------------------------------------------------
# episodes, evaluation


def sample_episodes(tasks, n_support: int, n_query: int, input_range, seed: int) -> EpisodeBatch:
    """One episode per task with inputs drawn from a single generator seeded by ``seed``.

    Targets sharing one architecture are evaluated together as a batched network.
    """
    tasks = list(tasks)
    if not tasks:
        raise ValueError("no tasks to sample episodes from")
    low, high = input_range
    rng = np.random.default_rng(seed)
    d = tasks[0].input_dim
    sx = rng.uniform(low, high, size=(len(tasks), n_support, d))
    qx = rng.uniform(low, high, size=(len(tasks), n_query, d))
    if all(isinstance(t, TargetFunction) and t.spec == tasks[0].spec for t in tasks):
        stacked = NetParams(
            tuple(np.stack(ws) for ws in zip(*(t.params.weights for t in tasks))),
            tuple(np.stack(bs) for bs in zip(*(t.params.biases for t in tasks))),
        )
        sy = forward(tasks[0].spec, stacked, sx)[0]
        qy = forward(tasks[0].spec, stacked, qx)[0]
    else:
        sy = np.stack([t(x) for t, x in zip(tasks, sx)])
        qy = np.stack([t(x) for t, x in zip(tasks, qx)])
    return EpisodeBatch(sx, sy, qx, qy, tuple(t.task_id for t in tasks))


def draw_episodes(pool: TaskPool, n_episodes: int, n_support: int, n_query: int, seed: int) -> EpisodeBatch:
    """``n_episodes`` episodes, deterministic in ``seed``."""
    stream = TaskStream(pool, derive_seed(seed, 1))
    tasks = [stream.next_task() for _ in range(n_episodes)]
    return sample_episodes(tasks, n_support, n_query, pool.input_range, derive_seed(seed, 2))


def evaluate(
    spec: NetSpec,
    params: NetParams,
    pool: TaskPool,
    n_episodes: int,
    inner: InnerConfig,
    seed: int,
    n_support: int = 5,
    n_query: int = 15,
    bn: BatchNormState | None = None,
):
    """Mean and std of the post-adaptation query loss over sampled episodes."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be positive")
    batch = draw_episodes(pool, n_episodes, n_support, n_query, seed)
    return evaluate_batch(spec, params, batch, inner, bn)


def evaluate_batch(spec: NetSpec, params: NetParams, batch: EpisodeBatch, inner: InnerConfig, bn=None):
    # a diverging inner loop yields inf/nan losses, reported as such
    with np.errstate(over="ignore", invalid="ignore"):
        losses = episode_losses(spec, params, batch, inner, _batch_mode(bn))
    return float(losses.mean()), float(losses.std())


def _batch_mode(bn):
    return None if bn is None else bn.with_mode("batch")


def head_only_adapt(spec: NetSpec, params: NetParams, support_x, support_y, ridge: float = 1e-6, bn=None) -> NetParams:
    """Refit the final layer by ridge least squares; earlier layers stay frozen."""
    support_x = np.asarray(support_x, dtype=np.float64)
    support_y = np.asarray(support_y, dtype=np.float64)
    if support_x.shape[0] < 1:
        raise ValueError("empty support set")
    _, trace = forward(spec, params, support_x, bn)
    feats = trace.hidden[-2]
    A = np.hstack([feats, np.ones((feats.shape[0], 1))])
    gram = A.T @ A + ridge * np.eye(A.shape[1])
    sol = np.linalg.solve(gram, A.T @ support_y)  # (d_{L-1} + 1, d_L)
    weights = params.weights[:-1] + (sol[:-1].T.copy(),)
    biases = params.biases[:-1] + (sol[-1].copy(),)
    return NetParams(weights, biases)


# ---------------------------------------------------------------------------
# training loop


def _meta_batches(pool: TaskPool, rng: np.random.Generator, meta_batch_size: int, stream: TaskStream):
    if pool.infinite:
        return [[stream.next_task() for _ in range(meta_batch_size)]]
    order = rng.permutation(len(pool.tasks))
    return [[pool.tasks[i] for i in order[s : s + meta_batch_size]] for s in range(0, len(order), meta_batch_size)]


def batches_per_epoch(pool: TaskPool, meta_batch_size: int) -> int:
    return 1 if pool.infinite else math.ceil(len(pool.tasks) / meta_batch_size)


def train_maml(
    spec: NetSpec,
    train_pool: TaskPool,
    val_pool: TaskPool,
    inner: InnerConfig = InnerConfig(),
    outer: OuterConfig = OuterConfig(),
    train: TrainConfig = TrainConfig(),
    seed: int = 0,
    init: NetParams | None = None,
    progress=None,
) -> TrainingRun:
    """Meta-train an initialization.

    Finite pools are swept once per meta-epoch in meta-batches; infinite
    pools take one meta-batch of fresh tasks per meta-iteration (counted as an
    epoch). Every ``train.eval_every`` epochs the mean meta-train loss since
    the previous row and the meta-validation loss are recorded. The
    validation episodes are fixed for the whole run.
    """
    params = init if init is not None else init_params(spec, derive_seed(seed, 0))
    bn = BatchNormState.fresh(spec) if spec.use_batchnorm else None
    adam = AdamState.zeros(spec.n_params)
    rng = np.random.default_rng(derive_seed(seed, 3))
    stream = TaskStream(train_pool, derive_seed(seed, 4))
    val_seed = derive_seed(seed, 5)
    episode_seed = derive_seed(seed, 6)

    val_batch = draw_episodes(val_pool, train.val_episodes, train.n_support, train.n_query, val_seed)

    def val_loss(p, state):
        return evaluate_batch(spec, p, val_batch, inner, state)[0]

    config = {
        "spec": spec.to_dict(),
        "inner": asdict(inner),
        "outer": asdict(outer),
        "train": asdict(train),
        "seed": seed,
    }
    run = TrainingRun(config=config, seed=seed)
    run.initial_val_loss = val_loss(params, bn)
    run.initial_train_loss = evaluate(
        spec, params, train_pool, train.val_episodes, inner, derive_seed(seed, 7), train.n_support, train.n_query, bn
    )[0]

    def snapshot(epoch, loss):
        return Checkpoint(spec, params, bn, adam, epoch, float(loss), meta={"config": config})

    run.checkpoint_best = snapshot(0, run.initial_val_loss)
    run.checkpoint_last = run.checkpoint_best

    start = time.perf_counter()
    pending = []
    batch_counter = 0
    for epoch in range(1, train.epochs + 1):
        for tasks in _meta_batches(train_pool, rng, outer.meta_batch_size, stream):
            episodes = sample_episodes(
                tasks, train.n_support, train.n_query, train_pool.input_range, derive_seed(episode_seed, batch_counter)
            )
            batch_counter += 1
            loss, grad, _ = meta_gradient(spec, params, episodes, inner, bn)
            if bn is not None:
                _, trace = forward(spec, params, episodes.support_x, bn)
                bn = bn.updated(trace)
            params, adam = adam_step(adam, params, grad, outer)
            pending.append(loss)
        if epoch % train.eval_every == 0 or epoch == train.epochs:
            v = val_loss(params, bn)
            wall = time.perf_counter() - start if train.record_wall_time else 0.0
            row = (epoch, float(np.mean(pending)), v, wall)
            pending = []
            run.curve.append(row)
            if v < run.checkpoint_best.meta_val_loss:
                run.checkpoint_best = snapshot(epoch, v)
            if progress is not None:
                progress(row)
    if train.epochs:
        last_val = run.curve[-1][2]
        run.checkpoint_last = snapshot(train.epochs, last_val)
    return run


# ---------------------------------------------------------------------------
# persistence


def write_curves_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_COLUMNS)
        for epoch, tr, va, wall in rows:
            w.writerow([int(epoch), repr(float(tr)), repr(float(va)), f"{wall:.3f}"])


def read_curves_csv(path) -> list:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(CURVE_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"curves file {path} lacks columns {sorted(missing)}")
        for line in reader:
            try:
                rows.append(
                    (
                        int(line["epoch"]),
                        float(line["meta_train_loss"]),
                        float(line["meta_val_loss"]),
                        float(line["wall_time_s"]),
                    )
                )
            except (TypeError, ValueError) as exc:
                raise ValueError(f"malformed row in {path}: {line}") from exc
    return rows


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    blocks = [("params", flatten(ckpt.params)), ("adam_m", ckpt.adam.m), ("adam_v", ckpt.adam.v)]
    if ckpt.bn is not None:
        blocks.append(("bn_mean", np.concatenate(ckpt.bn.running_mean)))
        blocks.append(("bn_var", np.concatenate(ckpt.bn.running_var)))
    header = {
        "format_version": ckpt.format_version,
        "spec": ckpt.spec.to_dict(),
        "epoch": ckpt.epoch,
        "meta_val_loss": ckpt.meta_val_loss,
        "adam_t": ckpt.adam.t,
        "bn_momentum": ckpt.bn.momentum if ckpt.bn is not None else None,
        "bn_mode": ckpt.bn.mode if ckpt.bn is not None else None,
        "blocks": [[name, int(arr.size)] for name, arr in blocks],
        "meta": ckpt.meta,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    body = b"".join(np.ascontiguousarray(arr, dtype="<f8").tobytes() for _, arr in blocks)
    Path(path).write_bytes(CHECKPOINT_MAGIC + struct.pack("<Q", len(blob)) + blob + body)


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path} is not a checkpoint file")
    off = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack("<Q", data[off : off + 8])
    off += 8
    header = json.loads(data[off : off + hlen])
    if header["format_version"] != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format version {header['format_version']}")
    body = np.frombuffer(data[off + hlen :], dtype="<f8")
    blocks, pos = {}, 0
    for name, size in header["blocks"]:
        blocks[name] = body[pos : pos + size].astype(np.float64)
        pos += size
    spec = NetSpec.from_dict(header["spec"])
    bn = None
    if "bn_mean" in blocks:
        splits = np.cumsum(spec.layer_widths[1:-2])
        bn = BatchNormState(
            tuple(np.split(blocks["bn_mean"], splits)),
            tuple(np.split(blocks["bn_var"], splits)),
            header["bn_momentum"],
            header["bn_mode"],
        )
    adam = AdamState(blocks["adam_m"], blocks["adam_v"], header["adam_t"])
    return Checkpoint(
        spec,
        unflatten(spec, blocks["params"]),
        bn,
        adam,
        header["epoch"],
        header["meta_val_loss"],
        header["format_version"],
        header["meta"],
    )
