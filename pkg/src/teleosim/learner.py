"""Behavior cloning on low-dimensional observations, with closed-loop
rollout evaluation and Table-style success reporting.

The policy is a small dense network trained by mini-batch gradient descent
with momentum to regress recorded delta actions from observations. At
evaluation time the deltas are integrated back into absolute commands (with
a per-step translation clamp to bound compounding error) and rolled out in
the simulator on reset seeds that are disjoint from every collection seed by
construction.
"""
from __future__ import annotations

import math
import statistics
from dataclasses import dataclass

import numpy as np

from .fileio import CorruptFile, read_framed, write_framed
from .messages import SimState
from .recorder import ACTION_DIM, ActionIntegrator, Dataset, observation_dim, observation_vector
from .sim import SimModel, World, reset

POLICY_MAGIC = b"DS4P"
POLICY_VERSION = 1
HIDDEN = (64, 64)
STD_FLOOR = 1e-8
ROLLOUT_TRANSLATION_CLAMP = 0.02  # meters per step
EVAL_SEED_BASE = 1 << 32  # collection seeds live below this; eval seeds above


class LearnerError(Exception):
    pass


class EmptyDataset(LearnerError):
    pass


class DimMismatch(LearnerError):
    pass


@dataclass
class MlpPolicy:
    """Dense tanh network plus the normalizers it was fit with.

    Observations are z-scored on the way in; the network regresses z-scored
    actions, de-normalized on the way out. Normalizing the targets keeps the
    millimeter-scale position deltas from being drowned out by the much
    larger jaw-width channel in the squared-error loss.
    """

    sizes: tuple[int, ...]
    weights: list[np.ndarray]  # weights[i]: (sizes[i+1], sizes[i])
    biases: list[np.ndarray]
    obs_mean: np.ndarray
    obs_std: np.ndarray  # clamped to STD_FLOOR
    act_mean: np.ndarray
    act_std: np.ndarray  # clamped to STD_FLOOR

    def __post_init__(self):
        if len(self.weights) != len(self.sizes) - 1 or len(self.biases) != len(self.sizes) - 1:
            raise LearnerError("layer count mismatch")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.sizes[i + 1], self.sizes[i]) or b.shape != (self.sizes[i + 1],):
                raise LearnerError(f"layer {i} shape mismatch")
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise LearnerError(f"layer {i} has non-finite parameters")
        for name, mean, std, dim in (
            ("obs", self.obs_mean, self.obs_std, self.sizes[0]),
            ("act", self.act_mean, self.act_std, self.sizes[-1]),
        ):
            if mean.shape != (dim,) or std.shape != (dim,):
                raise LearnerError(f"{name} normalizer shape mismatch")
            if not (np.isfinite(mean).all() and np.isfinite(std).all()):
                raise LearnerError(f"non-finite {name} normalizer")
            if (std < STD_FLOOR).any():
                raise LearnerError(f"{name} normalizer std below {STD_FLOOR}")

    @property
    def obs_dim(self) -> int:
        return self.sizes[0]

    @property
    def action_dim(self) -> int:
        return self.sizes[-1]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 64
    learning_rate: float = 1e-3
    momentum: float = 0.9
    seed: int = 0
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise LearnerError("epochs and batch_size must be positive")
        # learning_rate 0 is allowed: it freezes the weights, useful as a control
        if not (self.learning_rate >= 0 and math.isfinite(self.learning_rate)):
            raise LearnerError(f"learning_rate {self.learning_rate} invalid")
        if not (0 <= self.momentum < 1):
            raise LearnerError(f"momentum {self.momentum} out of [0, 1)")
        if not (0 <= self.val_fraction <= 0.5):
            raise LearnerError(f"val_fraction {self.val_fraction} out of [0, 0.5]")


@dataclass(frozen=True)
class EpochLoss:
    train: float
    val: float | None


# ---------------------------------------------------------------------------
# Forward / backward

def _normalize(policy: MlpPolicy, X: np.ndarray) -> np.ndarray:
    return (X - policy.obs_mean) / policy.obs_std


def _forward_batch(policy: MlpPolicy, X: np.ndarray) -> list[np.ndarray]:
    """Activations per layer, input first; hidden tanh, output identity."""
    acts = [_normalize(policy, X)]
    last = len(policy.weights) - 1
    for i, (w, b) in enumerate(zip(policy.weights, policy.biases)):
        pre = acts[-1] @ w.T + b
        acts.append(pre if i == last else np.tanh(pre))
    return acts


def forward_policy(policy: MlpPolicy, obs) -> np.ndarray:
    obs = np.asarray(obs, dtype=np.float64)
    if obs.shape != (policy.obs_dim,):
        raise DimMismatch(f"obs shape {obs.shape}, expected ({policy.obs_dim},)")
    y_norm = _forward_batch(policy, obs[None, :])[-1][0]
    return y_norm * policy.act_std + policy.act_mean


def loss_and_grad(
    policy: MlpPolicy, X: np.ndarray, Y: np.ndarray
) -> tuple[float, list[np.ndarray], list[np.ndarray]]:
    """Mean-squared error over all elements and its parameter gradients.

    Y is expected in the network's output space, i.e. already normalized
    with the policy's action normalizer (as train_bc does)."""
    acts = _forward_batch(policy, X)
    pred = acts[-1]
    diff = pred - Y
    loss = float(np.mean(diff * diff))
    d = 2.0 * diff / diff.size
    grads_w: list[np.ndarray] = [None] * len(policy.weights)
    grads_b: list[np.ndarray] = [None] * len(policy.biases)
    for i in range(len(policy.weights) - 1, -1, -1):
        grads_w[i] = d.T @ acts[i]
        grads_b[i] = d.sum(axis=0)
        if i > 0:
            d = (d @ policy.weights[i]) * (1.0 - acts[i] * acts[i])
    return loss, grads_w, grads_b


def batch_loss(policy: MlpPolicy, X: np.ndarray, Y: np.ndarray) -> float:
    pred = _forward_batch(policy, X)[-1]
    return float(np.mean((pred - Y) ** 2))


def grad_check(
    policy: MlpPolicy,
    X: np.ndarray,
    Y: np.ndarray,
    n_params: int = 200,
    h: float = 1e-6,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients
    over n_params randomly chosen parameters."""
    if len(X) == 0:
        raise LearnerError("grad_check needs a non-empty batch")
    _, grads_w, grads_b = loss_and_grad(policy, X, Y)
    analytic = np.concatenate(
        [g.ravel() for g in grads_w] + [g.ravel() for g in grads_b]
    )
    arrays = policy.weights + policy.biases
    sizes = [a.size for a in arrays]
    offsets = np.cumsum([0] + sizes)
    rng = np.random.Generator(np.random.Philox(key=seed))
    total = int(offsets[-1])
    picks = rng.choice(total, size=min(n_params, total), replace=False)
    worst = 0.0
    for flat_idx in picks:
        ai = int(np.searchsorted(offsets, flat_idx, side="right") - 1)
        local = int(flat_idx - offsets[ai])
        arr = arrays[ai]
        idx = np.unravel_index(local, arr.shape)
        orig = arr[idx]
        arr[idx] = orig + h
        up = batch_loss(policy, X, Y)
        arr[idx] = orig - h
        down = batch_loss(policy, X, Y)
        arr[idx] = orig
        numeric = (up - down) / (2 * h)
        a = float(analytic[flat_idx])
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
        worst = max(worst, rel)
    return worst


# ---------------------------------------------------------------------------
# Training

def dataset_to_arrays(
    dataset: Dataset, successful_only: bool = True
) -> tuple[np.ndarray, np.ndarray]:
    rows_x, rows_y = [], []
    for demo in dataset.demonstrations:
        if successful_only and not demo.success:
            continue
        for step in demo.steps:
            rows_x.append(step.obs)
            rows_y.append(step.action)
    if not rows_x:
        raise EmptyDataset("no training pairs (after success filtering)")
    return np.array(rows_x, dtype=np.float64), np.array(rows_y, dtype=np.float64)


def _init_policy(
    obs_dim: int,
    action_dim: int,
    rng,
    obs_mean=None,
    obs_std=None,
    act_mean=None,
    act_std=None,
) -> MlpPolicy:
    sizes = (obs_dim, *HIDDEN, action_dim)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))

    def arr(v, dim, fill):
        return (np.full(dim, fill) if v is None else np.asarray(v, dtype=np.float64))

    return MlpPolicy(
        sizes=sizes,
        weights=weights,
        biases=biases,
        obs_mean=arr(obs_mean, obs_dim, 0.0),
        obs_std=arr(obs_std, obs_dim, 1.0),
        act_mean=arr(act_mean, action_dim, 0.0),
        act_std=arr(act_std, action_dim, 1.0),
    )


def train_bc(
    dataset: Dataset,
    cfg: TrainConfig = TrainConfig(),
    successful_only: bool = True,
) -> tuple[MlpPolicy, list[EpochLoss]]:
    """Behavior cloning: regress recorded actions from observations.

    Deterministic in cfg.seed: the same dataset and config always produce
    byte-identical weights. The observation normalizer is fit on the
    training split only.
    """
    X, Y = dataset_to_arrays(dataset, successful_only=successful_only)
    if X.shape[1] != dataset.obs_dim or Y.shape[1] != dataset.action_dim:
        raise DimMismatch("dataset dims disagree with its header")
    rng = np.random.Generator(np.random.Philox(key=cfg.seed))
    order = rng.permutation(len(X))
    n_val = int(len(X) * cfg.val_fraction)
    val_idx, train_idx = order[:n_val], order[n_val:]
    if len(train_idx) == 0:
        raise EmptyDataset("validation split consumed every pair")
    Xt, Yt = X[train_idx], Y[train_idx]
    Xv, Yv = X[val_idx], Y[val_idx]

    policy = _init_policy(
        dataset.obs_dim,
        dataset.action_dim,
        rng,
        obs_mean=Xt.mean(axis=0),
        obs_std=np.maximum(Xt.std(axis=0), STD_FLOOR),
        act_mean=Yt.mean(axis=0),
        act_std=np.maximum(Yt.std(axis=0), STD_FLOOR),
    )
    Yt = (Yt - policy.act_mean) / policy.act_std
    Yv = (Yv - policy.act_mean) / policy.act_std if len(Yv) else Yv

    vel_w = [np.zeros_like(w) for w in policy.weights]
    vel_b = [np.zeros_like(b) for b in policy.biases]
    curve: list[EpochLoss] = []
    for _ in range(cfg.epochs):
        perm = rng.permutation(len(Xt))
        total, seen = 0.0, 0
        for start in range(0, len(perm), cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            loss, grads_w, grads_b = loss_and_grad(policy, Xt[idx], Yt[idx])
            total += loss * len(idx)
            seen += len(idx)
            for i in range(len(policy.weights)):
                vel_w[i] = cfg.momentum * vel_w[i] - cfg.learning_rate * grads_w[i]
                vel_b[i] = cfg.momentum * vel_b[i] - cfg.learning_rate * grads_b[i]
                policy.weights[i] = policy.weights[i] + vel_w[i]
                policy.biases[i] = policy.biases[i] + vel_b[i]
        val = batch_loss(policy, Xv, Yv) if len(Xv) else None
        curve.append(EpochLoss(train=total / seen, val=val))
    return policy, curve


# ---------------------------------------------------------------------------
# Evaluation

@dataclass(frozen=True)
class EvalReport:
    task: str
    per_seed: tuple[tuple[int, float], ...]  # (eval seed, success rate)
    episodes: int

    @property
    def mean(self) -> float:
        return statistics.fmean(r for _, r in self.per_seed)

    @property
    def std(self) -> float:
        rates = [r for _, r in self.per_seed]
        return statistics.stdev(rates) if len(rates) > 1 else 0.0

    def formatted(self) -> str:
        """Success percentage in the 'mean ± std' report style."""
        return f"{100 * self.mean:.1f} ± {100 * self.std:.1f}"


def rollout_episode(
    policy: MlpPolicy,
    model: SimModel,
    task_name: str,
    reset_seed: int,
    max_ticks: int = 2000,
) -> SimState:
    """Closed-loop rollout: integrate predicted deltas into commands."""
    world: World = reset(model, model.tasks[task_name], reset_seed)
    integ = ActionIntegrator(world.ee_pose)
    state = world.state()
    for _ in range(max_ticks):
        action = forward_policy(policy, observation_vector(state))
        cmd = integ.apply(action, max_translation=ROLLOUT_TRANSLATION_CLAMP)
        state = world.step(cmd, model.dt)
        if state.task_success:
            break
    return state


def eval_reset_seed(eval_seed: int, episode: int) -> int:
    """Reset seeds for evaluation, disjoint from collection seeds.

    Collection uses small integers; evaluation derives seeds at or above
    EVAL_SEED_BASE, so the two ranges can never overlap.
    """
    seed = EVAL_SEED_BASE * (eval_seed + 1) + episode
    assert seed >= EVAL_SEED_BASE
    return seed


def evaluate(
    policy: MlpPolicy,
    model: SimModel,
    task_name: str,
    episodes: int,
    seeds,
    max_ticks: int = 2000,
) -> EvalReport:
    task = model.tasks[task_name]
    if policy.obs_dim != observation_dim(task) or policy.action_dim != ACTION_DIM:
        raise DimMismatch(
            f"policy dims ({policy.obs_dim}, {policy.action_dim}) do not match "
            f"task {task_name} ({observation_dim(task)}, {ACTION_DIM})"
        )
    per_seed = []
    for s in seeds:
        wins = sum(
            rollout_episode(policy, model, task_name, eval_reset_seed(s, e), max_ticks).task_success
            for e in range(episodes)
        )
        per_seed.append((int(s), wins / episodes))
    return EvalReport(task=task_name, per_seed=tuple(per_seed), episodes=episodes)


# ---------------------------------------------------------------------------
# Policy files

def save_policy(policy: MlpPolicy, path) -> None:
    header = {
        "format": "mlp policy",
        "version": POLICY_VERSION,
        "sizes": list(policy.sizes),
        "obs_mean": policy.obs_mean.tolist(),
        "obs_std": policy.obs_std.tolist(),
        "act_mean": policy.act_mean.tolist(),
        "act_std": policy.act_std.tolist(),
    }
    blob = b"".join(
        a.astype("<f8").tobytes() for a in (*policy.weights, *policy.biases)
    )
    write_framed(path, POLICY_MAGIC, POLICY_VERSION, header, [blob])


def load_policy(path) -> MlpPolicy:
    header, blocks = read_framed(path, POLICY_MAGIC, POLICY_VERSION)
    if len(blocks) != 1:
        raise CorruptFile(f"{path}: expected one weight blob, found {len(blocks)}")
    try:
        sizes = tuple(int(v) for v in header["sizes"])
        norms = {
            k: np.array(header[k], dtype=np.float64)
            for k in ("obs_mean", "obs_std", "act_mean", "act_std")
        }
    except (KeyError, TypeError, ValueError) as e:
        raise CorruptFile(f"{path}: malformed header ({e})") from e
    counts = [(sizes[i + 1], sizes[i]) for i in range(len(sizes) - 1)]
    need = sum(r * c for r, c in counts) + sum(r for r, _ in counts)
    flat = np.frombuffer(blocks[0], dtype="<f8")
    if flat.size != need:
        raise CorruptFile(f"{path}: weight blob has {flat.size} values, expected {need}")
    weights, biases = [], []
    pos = 0
    for r, c in counts:
        weights.append(flat[pos : pos + r * c].reshape(r, c).copy())
        pos += r * c
    for r, _ in counts:
        biases.append(flat[pos : pos + r].copy())
        pos += r
    try:
        return MlpPolicy(sizes=sizes, weights=weights, biases=biases, **norms)
    except LearnerError as e:
        raise CorruptFile(f"{path}: {e}") from e
