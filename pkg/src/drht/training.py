"""Losses, ADAM with clipping, and the pretrain / joint hierarchical training loops."""

from dataclasses import dataclass, field
import json
import math
import time

import numpy as np

from . import numerics as nx
from .model import (
    DomainTransferParams,
    build_network,
    domain_transfer,
    forward_f1,
    forward_f2,
    gamma_compress,
)


class TrainingDiverged(RuntimeError):
    """Raised on a non-finite loss; carries the last good parameters."""

    def __init__(self, message, networks, step):
        super().__init__(message)
        self.networks = networks
        self.step = step


@dataclass(frozen=True)
class LossConfig:
    epsilon: float = 1.0
    transfer: DomainTransferParams = field(default_factory=DomainTransferParams)

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")


def hdr_target(y, p):
    y = np.asarray(y)
    if np.any(y < 0):
        raise ValueError("ground-truth radiance must be non-negative")
    return gamma_compress(y, p).astype(nx.default_dtype())


def loss_hdr(s_hat, y, p=None):
    """Halved MSE between the prediction and the gamma-compressed ground truth."""
    p = DomainTransferParams() if p is None else p
    return nx.mse(s_hat, hdr_target(y, p))


def loss_ldr_terms(i_ldr, i_gt, s_hat, y, cfg=None):
    """(total, ldr term, hdr term); the two terms are computed separately and then combined."""
    cfg = LossConfig() if cfg is None else cfg
    ldr = nx.mse(i_ldr, np.asarray(i_gt, dtype=nx.default_dtype()))
    hdr = loss_hdr(s_hat, y, cfg.transfer)
    return nx.add(ldr, nx.scale(hdr, cfg.epsilon)), ldr, hdr


def loss_ldr(i_ldr, i_gt, s_hat, y, cfg=None):
    return loss_ldr_terms(i_ldr, i_gt, s_hat, y, cfg)[0]


# ---------------------------------------------------------------- optimizer


@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.998
    eps: float = 1e-8
    clip_norm: float = 5.0
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    # per-parameter update counts drive bias correction, so a group that
    # stays frozen for a while starts with properly corrected moments
    updates: dict = field(default_factory=dict)


def global_norm(grads):
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))


def clip_gradients(grads, max_norm):
    """Scale every gradient by max_norm / norm when the global L2 norm exceeds max_norm."""
    if not max_norm > 0:
        raise ValueError("max_norm must be > 0")
    norm = global_norm(grads)
    if norm <= max_norm:
        return dict(grads)
    factor = max_norm / norm
    return {k: g * g.dtype.type(factor) for k, g in grads.items()}


def adam_step(params, grads, state, lr, lr_multipliers=None):
    """One bias-corrected ADAM update in place.

    ``params`` maps name -> Tensor, ``grads`` name -> array. A multiplier of
    0 freezes the parameter: neither it nor its moments change.
    """
    lr_multipliers = lr_multipliers or {}
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise nx.NonFiniteError(f"non-finite gradient in {name}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    for name, g in grads.items():
        mult = lr_multipliers.get(name, 1.0)
        if mult == 0:
            continue
        p = params[name]
        dt = p.data.dtype
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = (b1 * m + (1 - b1) * g).astype(dt)
        v = (b2 * v + (1 - b2) * g * g).astype(dt)
        n = state.updates.get(name, 0) + 1
        m_hat = m / (1 - b1 ** n)
        v_hat = v / (1 - b2 ** n)
        step = (lr * mult) * m_hat / (np.sqrt(v_hat) + state.eps)
        p.data = (p.data - step).astype(dt)
        state.m[name], state.v[name], state.updates[name] = m, v, n
    return params, state


# ---------------------------------------------------------------- schedule


@dataclass(frozen=True)
class Schedule:
    """Learning-rate phases (lr, fraction of steps) and hierarchical stage settings.

    With ``restart_per_stage`` the phase list is replayed inside every
    hierarchical stage of joint training, so each newly unlocked decoder
    layer starts at the high rate; otherwise the phases span the whole run.
    """

    lr_phases: tuple = ((1e-2, 0.75), (5e-5, 0.25))
    n_stages: int = 4
    stage_decay: float = 0.1
    restart_per_stage: bool = False

    def __post_init__(self):
        if not self.lr_phases:
            raise ValueError("at least one lr phase is required")
        for lr, frac in self.lr_phases:
            if not lr > 0 or not frac > 0:
                raise ValueError("lr phases need lr > 0 and fraction > 0")
        if self.n_stages < 1:
            raise ValueError("n_stages must be >= 1")

    def lr_at(self, step, total):
        """Learning rate for 0-based ``step`` out of ``total`` (phases span the whole run)."""
        fracs = np.array([f for _, f in self.lr_phases], dtype=np.float64)
        bounds = np.cumsum(fracs / fracs.sum()) * total
        for (lr, _), b in zip(self.lr_phases, bounds):
            if step < b:
                return lr
        return self.lr_phases[-1][0]

    def stage_bounds(self, stage, total):
        """[start, end) steps of 1-based ``stage``."""
        start = -(-(stage - 1) * total // self.n_stages)
        end = -(-stage * total // self.n_stages)
        return start, end

    def joint_lr_at(self, step, total):
        if not self.restart_per_stage:
            return self.lr_at(step, total)
        start, end = self.stage_bounds(self.stage_at(step, total), total)
        return self.lr_at(step - start, end - start)

    def stage_at(self, step, total):
        """1-based stage; stages split the run into equal shares."""
        if total <= 0:
            return 1
        return min(self.n_stages, step * self.n_stages // total + 1)


def joint_groups(theta1, theta2):
    """Parameter groups for hierarchical supervision, keyed 'f1/...' and 'f2/...'."""
    groups = {"f1": [f"f1/{n}" for n in theta1.names()], "f2.enc": []}
    for name in theta2.names():
        layer = theta2.layer_of(name)
        key = "f2.enc" if layer.startswith("enc") else f"f2.{layer}"
        groups.setdefault(key, []).append(f"f2/{name}")
    return groups


def group_unlock_stage(group):
    """Stage at which a group starts training; dec j unlocks at stage j+1."""
    if group.startswith("f2.dec"):
        return int(group[len("f2.dec"):]) + 1
    return 1


def stage_multipliers(groups, stage, decay):
    """Frozen groups get 0; each unlocked group decays once per stage since its unlock."""
    out = {}
    for g in groups:
        first = group_unlock_stage(g)
        out[g] = 0.0 if stage < first else decay ** (stage - first)
    return out


# ---------------------------------------------------------------- loops


@dataclass
class TrainSettings:
    steps: int = 300
    batch_size: int = 4
    seed: int = 0
    schedule: Schedule = field(default_factory=Schedule)
    loss: LossConfig = field(default_factory=LossConfig)
    beta1: float = 0.9
    beta2: float = 0.998
    adam_eps: float = 1e-8
    clip_norm: float = 5.0


class BatchSampler:
    """Deterministic reshuffled epochs of fixed-size batches."""

    def __init__(self, n, batch_size, seed):
        if n <= 0:
            raise ValueError("dataset is empty")
        self.n = n
        self.batch = min(batch_size, n)
        self.rng = np.random.default_rng(seed)
        self.queue = []

    def next(self):
        if len(self.queue) < self.batch:
            self.queue = self.queue + list(self.rng.permutation(self.n))
        idx, self.queue = self.queue[:self.batch], self.queue[self.batch:]
        return np.array(idx)


class JsonlLog:
    """Append-only JSON-lines training log; ``wall_ms`` is null when timing is disabled."""

    def __init__(self, path=None, timing=True, truncate=False):
        self.path = path
        self.timing = timing
        self.records = []
        if path:
            with open(path, "w" if truncate else "a"):
                pass

    def write(self, record, wall_ms):
        record = dict(record, wall_ms=round(wall_ms, 3) if self.timing else None)
        self.records.append(record)
        if self.path:
            with open(self.path, "a") as f:
                f.write(json.dumps(record, sort_keys=True) + "\n")


def _collect(prefix, params):
    return {f"{prefix}/{n}": params[n] for n in params.names()}


def _finite(x):
    return x if math.isfinite(x) else None


def pretrain_f1(inputs, hdr, settings, theta1=None, spec=None, init_seed=0,
                log=None, on_step=None, start_step=0, opt_state=None):
    """Minimize the HDR loss alone. Returns (theta1, optimizer state, per-step losses)."""
    if len(inputs) == 0:
        raise ValueError("pretraining needs a non-empty dataset")
    if theta1 is None:
        theta1 = build_network(spec, init_seed)
    state = opt_state or OptimizerState(settings.beta1, settings.beta2, settings.adam_eps,
                                        settings.clip_norm)
    sampler = BatchSampler(len(inputs), settings.batch_size, settings.seed)
    for _ in range(start_step):
        sampler.next()
    log = log or JsonlLog(timing=False)
    p = settings.loss.transfer
    params = _collect("f1", theta1)
    losses = []
    last_good = theta1.copy()
    for step in range(start_step, settings.steps):
        t0 = time.perf_counter()
        idx = sampler.next()
        x = nx.Tensor(inputs[idx])
        theta1.zero_grad()
        s_hat = forward_f1(theta1, x, train=True)
        loss = loss_hdr(s_hat, hdr[idx], p)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDiverged(f"non-finite HDR loss at step {step}", {"f1": last_good}, step)
        loss.backward()
        grads = {k: t.grad for k, t in params.items()}
        norm = global_norm(grads)
        grads = clip_gradients(grads, settings.clip_norm)
        lr = settings.schedule.lr_at(step, settings.steps)
        adam_step(params, grads, state, lr)
        losses.append(value)
        log.write({"phase": "pretrain", "step": step, "stage": 0, "lr": lr, "loss_ldr": None, "loss_hdr": value,
                   "grad_norm": _finite(norm), "lr_multipliers": {"f1": 1.0}},
                  (time.perf_counter() - t0) * 1e3)
        last_good = theta1.copy()
        if on_step:
            on_step(step, {"f1": theta1}, state)
    return theta1, state, losses


def train_joint(inputs, hdr, ldr, theta1, settings, theta2=None, init_seed=1,
                log=None, on_step=None, start_step=0, opt_state=None):
    """End-to-end training of both networks with staged decoder unlocking.

    Returns (theta1, theta2, optimizer state, per-step total losses).
    """
    if len(inputs) == 0:
        raise ValueError("joint training needs a non-empty dataset")
    if theta2 is None:
        theta2 = build_network(theta1.spec, init_seed)
    state = opt_state or OptimizerState(settings.beta1, settings.beta2, settings.adam_eps,
                                        settings.clip_norm)
    sampler = BatchSampler(len(inputs), settings.batch_size, settings.seed + 1)
    for _ in range(start_step):
        sampler.next()
    log = log or JsonlLog(timing=False)
    cfg = settings.loss
    sched = settings.schedule
    params = {**_collect("f1", theta1), **_collect("f2", theta2)}
    groups = joint_groups(theta1, theta2)
    losses = []
    last_good = (theta1.copy(), theta2.copy())
    for step in range(start_step, settings.steps):
        t0 = time.perf_counter()
        stage = sched.stage_at(step, settings.steps)
        group_mult = stage_multipliers(groups, stage, sched.stage_decay)
        mults = {name: group_mult[g] for g, names in groups.items() for name in names}

        idx = sampler.next()
        x = nx.Tensor(inputs[idx])
        theta1.zero_grad()
        theta2.zero_grad()
        s_hat = forward_f1(theta1, x, train=True)
        i_ldr = forward_f2(theta2, domain_transfer(s_hat, cfg.transfer), train=True)
        total, ldr_term, hdr_term = loss_ldr_terms(i_ldr, ldr[idx], s_hat, hdr[idx], cfg)
        value = total.item()
        if not math.isfinite(value):
            raise TrainingDiverged(f"non-finite LDR loss at step {step}",
                                   {"f1": last_good[0], "f2": last_good[1]}, step)
        total.backward()
        active = {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
                  for k, t in params.items() if mults[k] != 0}
        norm = global_norm(active)
        active = clip_gradients(active, settings.clip_norm)
        lr = sched.joint_lr_at(step, settings.steps)
        adam_step(params, active, state, lr, mults)
        losses.append(value)
        log.write({"phase": "joint", "step": step, "stage": stage, "lr": lr, "loss_ldr": value,
                   "loss_hdr": hdr_term.item(), "grad_norm": _finite(norm),
                   "lr_multipliers": group_mult}, (time.perf_counter() - t0) * 1e3)
        last_good = (theta1.copy(), theta2.copy())
        if on_step:
            on_step(step, {"f1": theta1, "f2": theta2}, state)
    return theta1, theta2, state, losses
