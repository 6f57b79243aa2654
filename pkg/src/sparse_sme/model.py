"""Dual-branch sparse multi-expert network.

Input fusion concatenates precomputed image/text features with a learnable
region embedding and a projected POI count vector.  Each branch owns a pool
of feed-forward experts tagged specific / dual / shared plus one router per
task over that task's eligible experts; gates below the threshold are
zeroed without renormalization and the zeroed experts are never evaluated.
Per-task heads consume the concatenated branch representations.

The forward pass is batched (records are dispatched to experts MoE-style);
the single-record operations are thin wrappers over the batched engine so
both paths cannot drift apart.  `backward` is a hand-derived reverse pass
that accumulates into the model's parameter tape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .data import DEFAULT_TASK_NAMES, RegionRecord, poi_featurize
from .errors import (
    ConfigError,
    NumericError,
    ShapeError,
    UnknownRegionError,
    UnknownTaskError,
)
from .numcore import (
    ParamTape,
    Rng,
    activation,
    activation_backward,
    affine_backward,
    affine_forward,
    layer_norm,
    layer_norm_backward,
    softmax,
    softmax_backward,
)

_LN_EPS = 1e-5
_ACTIVATIONS = ("relu", "tanh", "gelu")
_SIGMAS = ("layer_norm", "identity")
_FALLBACKS = ("top1", "literal")
BRANCH_LABELS = ("image", "text")


@dataclass
class ModelConfig:
    d_e: int
    d_r: int = 6
    d_p: int = 15
    poi_categories: int = 15
    tasks: list[str] = field(default_factory=lambda: list(DEFAULT_TASK_NAMES))
    n_specific: int = 8
    n_dual: int = 2
    n_shared: int = 4
    expert_hidden: int = 64
    expert_out: int = 32
    head_hidden: int = 64
    epsilon: float = 0.01
    activation: str = "relu"
    sigma: str = "layer_norm"
    fallback: str = "top1"
    mode: str = "multi_task"

    @property
    def d_in(self) -> int:
        return self.d_e + self.d_r + self.d_p

    @property
    def active_tasks(self) -> list[str]:
        if self.mode == "multi_task":
            return list(self.tasks)
        return [self.mode.split(":", 1)[1]]

    def validate(self) -> "ModelConfig":
        if min(self.d_e, self.d_r, self.d_p, self.poi_categories) < 1:
            raise ConfigError("d_e, d_r, d_p, and poi_categories must be >= 1")
        if min(self.expert_hidden, self.expert_out, self.head_hidden) < 1:
            raise ConfigError("hidden and output widths must be >= 1")
        if min(self.n_specific, self.n_dual, self.n_shared) < 0:
            raise ConfigError("expert counts must be >= 0")
        if not self.tasks or len(set(self.tasks)) != len(self.tasks):
            raise ConfigError("tasks must be a nonempty list of unique names")
        if not 0.0 <= self.epsilon < 1.0:
            raise ConfigError(f"epsilon must lie in [0, 1), got {self.epsilon}")
        if self.activation not in _ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.sigma not in _SIGMAS:
            raise ConfigError(f"unknown output normalization {self.sigma!r}")
        if self.fallback not in _FALLBACKS:
            raise ConfigError(f"unknown fallback policy {self.fallback!r}")
        if self.mode != "multi_task":
            if not self.mode.startswith("single_task:"):
                raise ConfigError(f"unknown mode {self.mode!r}")
            task = self.mode.split(":", 1)[1]
            if task not in self.tasks:
                raise ConfigError(f"single-task mode names unknown task {task!r}")
        if self.sigma == "layer_norm" and self.expert_out < 2:
            raise ConfigError("layer_norm output normalization needs expert_out >= 2")
        return self

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, payload: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(payload) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        if "d_e" not in payload:
            raise ConfigError("model config requires d_e")
        return cls(**payload).validate()


def single_task_config(config: ModelConfig, task: str) -> ModelConfig:
    """Fold the full per-task expert budget into specific experts for one
    task, giving the single-task variant (one pool, one router, one head)."""
    if task not in config.tasks:
        raise UnknownTaskError(task)
    budget = eligible_count(config)
    return replace(
        config,
        tasks=[task],
        n_specific=budget,
        n_dual=0,
        n_shared=0,
        mode=f"single_task:{task}",
    )


def eligible_count(config: ModelConfig) -> int:
    """Eligible experts per task: N_sp + (T-1)*N_dt + N_sh."""
    return config.n_specific + (len(config.tasks) - 1) * config.n_dual + config.n_shared


def pool_size(config: ModelConfig) -> int:
    """Pool size per branch: T*N_sp + (T*(T-1)/2)*N_dt + N_sh."""
    t = len(config.tasks)
    return t * config.n_specific + (t * (t - 1) // 2) * config.n_dual + config.n_shared


@dataclass(frozen=True)
class ExpertKind:
    group: str  # "specific" | "dual" | "shared"
    tasks: tuple[str, ...]  # (task,) / unordered pair in task order / ()

    def serves(self, task: str) -> bool:
        return self.group == "shared" or task in self.tasks

    def label(self) -> str:
        if self.group == "shared":
            return "shared"
        return f"{self.group}:{'+'.join(self.tasks)}"


def expert_pool_kinds(config: ModelConfig) -> list[ExpertKind]:
    """Canonical pool order: specific by task order, dual by pair order,
    shared last."""
    kinds = []
    tasks = config.tasks
    for task in tasks:
        kinds.extend(ExpertKind("specific", (task,)) for _ in range(config.n_specific))
    for i in range(len(tasks)):
        for j in range(i + 1, len(tasks)):
            kinds.extend(
                ExpertKind("dual", (tasks[i], tasks[j])) for _ in range(config.n_dual)
            )
    kinds.extend(ExpertKind("shared", ()) for _ in range(config.n_shared))
    return kinds


@dataclass
class Expert:
    kind: ExpertKind
    name: str
    activation: str
    sigma: str
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray


@dataclass
class Branch:
    label: str
    experts: list[Expert]
    routers: dict[str, tuple[np.ndarray, np.ndarray]]
    eligible: dict[str, list[int]]


@dataclass
class GateVector:
    task: str
    branch: str
    raw: np.ndarray
    masked: np.ndarray

    @property
    def active_count(self) -> int:
        return int(np.count_nonzero(self.masked))


@dataclass
class Model:
    config: ModelConfig
    n_regions: int
    region_embeddings: np.ndarray
    poi_w: np.ndarray
    poi_b: np.ndarray
    image_branch: Branch
    text_branch: Branch
    heads: dict[str, dict[str, np.ndarray]]
    tape: ParamTape

    @property
    def branches(self) -> tuple[Branch, Branch]:
        return (self.image_branch, self.text_branch)

    def branch(self, label: str) -> Branch:
        if label == "image":
            return self.image_branch
        if label == "text":
            return self.text_branch
        raise ValueError(f"unknown branch {label!r}")


def _glorot(rng: Rng, shape) -> np.ndarray:
    fan_out, fan_in = shape
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def build_model(config: ModelConfig, n_regions: int, rng: Rng) -> Model:
    """Allocate every parameter in canonical order on a fresh tape.

    Weights are Glorot-uniform, biases zero, embeddings Normal(0, 0.02);
    the layout is a pure function of (config, n_regions), so equal seeds
    give bit-identical parameter buffers.
    """
    config.validate()
    if n_regions < 1:
        raise ValueError(f"need at least one region, got {n_regions}")
    kinds = expert_pool_kinds(config)
    eligible = {
        task: [i for i, k in enumerate(kinds) if k.serves(task)]
        for task in config.active_tasks
    }
    for task, idx in eligible.items():
        if not idx:
            raise ConfigError(f"no experts eligible for task {task!r}")

    d_in, d_u = config.d_in, config.expert_out
    tape = ParamTape()
    tape.alloc("embed.region", rng.normal(std=0.02, size=(n_regions, config.d_r)))
    tape.alloc("embed.poi.W", _glorot(rng, (config.d_p, config.poi_categories)))
    tape.alloc("embed.poi.b", np.zeros(config.d_p))
    for label in BRANCH_LABELS:
        for i in range(len(kinds)):
            prefix = f"{label}.expert{i:02d}"
            tape.alloc(prefix + ".W1", _glorot(rng, (config.expert_hidden, d_in)))
            tape.alloc(prefix + ".b1", np.zeros(config.expert_hidden))
            tape.alloc(prefix + ".W2", _glorot(rng, (d_u, config.expert_hidden)))
            tape.alloc(prefix + ".b2", np.zeros(d_u))
        for task in config.active_tasks:
            m = len(eligible[task])
            tape.alloc(f"{label}.router.{task}.W", _glorot(rng, (m, d_in)))
            tape.alloc(f"{label}.router.{task}.b", np.zeros(m))
    for task in config.active_tasks:
        tape.alloc(f"head.{task}.W1", _glorot(rng, (config.head_hidden, 2 * d_u)))
        tape.alloc(f"head.{task}.b1", np.zeros(config.head_hidden))
        tape.alloc(f"head.{task}.W2", _glorot(rng, (1, config.head_hidden)))
        tape.alloc(f"head.{task}.b2", np.zeros(1))
    tape.freeze()

    def make_branch(label: str) -> Branch:
        experts = [
            Expert(
                kind=kinds[i],
                name=f"{label}.expert{i:02d}",
                activation=config.activation,
                sigma=config.sigma,
                W1=tape.view(f"{label}.expert{i:02d}.W1"),
                b1=tape.view(f"{label}.expert{i:02d}.b1"),
                W2=tape.view(f"{label}.expert{i:02d}.W2"),
                b2=tape.view(f"{label}.expert{i:02d}.b2"),
            )
            for i in range(len(kinds))
        ]
        routers = {
            task: (
                tape.view(f"{label}.router.{task}.W"),
                tape.view(f"{label}.router.{task}.b"),
            )
            for task in config.active_tasks
        }
        return Branch(
            label=label,
            experts=experts,
            routers=routers,
            eligible={t: list(v) for t, v in eligible.items()},
        )

    heads = {
        task: {name: tape.view(f"head.{task}.{name}") for name in ("W1", "b1", "W2", "b2")}
        for task in config.active_tasks
    }
    return Model(
        config=config,
        n_regions=n_regions,
        region_embeddings=tape.view("embed.region"),
        poi_w=tape.view("embed.poi.W"),
        poi_b=tape.view("embed.poi.b"),
        image_branch=make_branch("image"),
        text_branch=make_branch("text"),
        heads=heads,
        tape=tape,
    )


def eligible_experts(model: Model, task: str) -> list[int]:
    """Pool indices of the experts task may route to, in pool order."""
    if task not in model.image_branch.eligible:
        raise UnknownTaskError(task)
    return list(model.image_branch.eligible[task])


def count_parameters(model: Model) -> dict[str, int]:
    """Parameter counts by group; 'total' equals the tape length."""
    groups = {"embeddings": 0, "experts": 0, "routers": 0, "heads": 0}
    for name in model.tape.slice_names():
        lo, hi = model.tape.slice_range(name)
        size = hi - lo
        if name.startswith("embed."):
            groups["embeddings"] += size
        elif ".router." in name:
            groups["routers"] += size
        elif name.startswith("head."):
            groups["heads"] += size
        else:
            groups["experts"] += size
    groups["total"] = len(model.tape)
    return groups


# ---------------------------------------------------------------------------
# forward pass


@dataclass
class _ExpertCache:
    rows: np.ndarray  # batch rows this expert was evaluated on, ascending
    z: np.ndarray
    h1: np.ndarray
    a1: np.ndarray
    s: np.ndarray
    y: np.ndarray


@dataclass
class _BranchState:
    z: np.ndarray  # (B, d_in)
    raw: dict[str, np.ndarray]
    masked: dict[str, np.ndarray]
    experts: dict[int, _ExpertCache]
    fused: dict[str, np.ndarray]


@dataclass
class ForwardState:
    region_rows: np.ndarray
    log_counts: np.ndarray
    branches: dict[str, _BranchState]
    head_in: dict[str, np.ndarray]
    head_h1: dict[str, np.ndarray]
    head_a1: dict[str, np.ndarray]
    predictions: np.ndarray  # (B, n_active_tasks)


def _check_record(model: Model, rec: RegionRecord) -> None:
    cfg = model.config
    if not 0 <= rec.region_index < model.n_regions:
        raise UnknownRegionError(
            f"region {rec.region_index} outside the model's 0..{model.n_regions - 1} table"
        )
    if rec.image_feat.shape != (cfg.d_e,) or rec.text_feat.shape != (cfg.d_e,):
        raise ShapeError(
            f"region {rec.region_index}: feature length "
            f"{rec.image_feat.size}/{rec.text_feat.size}, expected d_e={cfg.d_e}"
        )
    if rec.poi_counts.shape != (cfg.poi_categories,):
        raise ShapeError(
            f"region {rec.region_index}: {rec.poi_counts.size} poi counts, "
            f"expected {cfg.poi_categories}"
        )


def fuse_batch(model: Model, records) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Returns (z_image, z_text, region_rows, log_counts)."""
    for rec in records:
        _check_record(model, rec)
    rows = np.array([rec.region_index for rec in records], dtype=np.intp)
    img = np.stack([rec.image_feat for rec in records])
    txt = np.stack([rec.text_feat for rec in records])
    log_counts = poi_featurize(np.stack([rec.poi_counts for rec in records]))
    p = affine_forward(log_counts, model.poi_w, model.poi_b)
    r = model.region_embeddings[rows]
    z_img = np.hstack([img, r, p])
    z_txt = np.hstack([txt, r, p])
    return z_img, z_txt, rows, log_counts


def fuse_inputs(model: Model, record: RegionRecord) -> tuple[np.ndarray, np.ndarray]:
    """Single-record fusion: (z_image, z_text), both of length d_in."""
    z_img, z_txt, _, _ = fuse_batch(model, [record])
    return z_img[0], z_txt[0]


def expert_forward(expert: Expert, z) -> np.ndarray:
    """sigma(W2 phi(W1 z + b1) + b2)."""
    h1 = affine_forward(z, expert.W1, expert.b1)
    a1 = activation(h1, expert.activation)
    s = affine_forward(a1, expert.W2, expert.b2)
    return layer_norm(s, _LN_EPS) if expert.sigma == "layer_norm" else s


def _route_batch(branch: Branch, task: str, z2: np.ndarray, epsilon: float, fallback: str):
    if task not in branch.routers:
        raise UnknownTaskError(task)
    if fallback not in _FALLBACKS:
        raise ConfigError(f"unknown fallback policy {fallback!r}")
    w, b = branch.routers[task]
    raw = softmax(affine_forward(z2, w, b))
    if raw.ndim == 1:
        raw = raw[None, :]
    masked = np.where(raw > epsilon, raw, 0.0)
    if fallback == "top1":
        dead = ~masked.any(axis=1)
        if dead.any():
            rows = np.flatnonzero(dead)
            top = raw[rows].argmax(axis=1)  # first index on ties
            masked[rows, top] = raw[rows, top]
    return raw, masked


def route(branch: Branch, task: str, z, epsilon: float, fallback: str = "top1") -> GateVector:
    """Gate one input for one task: softmax over the eligible experts, then
    zero every weight at or below the threshold (no renormalization)."""
    raw, masked = _route_batch(branch, task, np.asarray(z, dtype=np.float64)[None, :], epsilon, fallback)
    return GateVector(task=task, branch=branch.label, raw=raw[0], masked=masked[0])


def _branch_forward(branch: Branch, z2: np.ndarray, tasks, epsilon: float, fallback: str) -> _BranchState:
    n = z2.shape[0]
    raw_g: dict[str, np.ndarray] = {}
    masked_g: dict[str, np.ndarray] = {}
    need: dict[int, np.ndarray] = {}
    for task in tasks:
        raw, masked = _route_batch(branch, task, z2, epsilon, fallback)
        raw_g[task], masked_g[task] = raw, masked
        active = masked > 0.0
        for j, pool_idx in enumerate(branch.eligible[task]):
            col = active[:, j]
            if col.any():
                if pool_idx in need:
                    need[pool_idx] |= col
                else:
                    need[pool_idx] = col.copy()

    caches: dict[int, _ExpertCache] = {}
    for pool_idx in sorted(need):
        rows = np.flatnonzero(need[pool_idx])
        expert = branch.experts[pool_idx]
        z_sub = z2[rows]
        h1 = affine_forward(z_sub, expert.W1, expert.b1)
        a1 = activation(h1, expert.activation)
        s = affine_forward(a1, expert.W2, expert.b2)
        y = layer_norm(s, _LN_EPS) if expert.sigma == "layer_norm" else s
        caches[pool_idx] = _ExpertCache(rows=rows, z=z_sub, h1=h1, a1=a1, s=s, y=y)

    fused: dict[str, np.ndarray] = {}
    d_u = branch.experts[0].W2.shape[0]
    for task in tasks:
        u = np.zeros((n, d_u))
        masked = masked_g[task]
        for j, pool_idx in enumerate(branch.eligible[task]):
            col = masked[:, j]
            rows = np.flatnonzero(col)
            if rows.size == 0:
                continue
            cache = caches[pool_idx]
            local = np.searchsorted(cache.rows, rows)
            u[rows] += col[rows, None] * cache.y[local]
        fused[task] = u
    return _BranchState(z=z2, raw=raw_g, masked=masked_g, experts=caches, fused=fused)


def sme_forward(branch: Branch, task: str, z, epsilon: float, fallback: str = "top1"):
    """One branch, one task, one input: returns the gate-weighted expert
    mix, the gate, and {pool index: expert output} for the evaluated
    experts (zero-gated experts are never run)."""
    state = _branch_forward(branch, np.asarray(z, dtype=np.float64)[None, :], [task], epsilon, fallback)
    gate = GateVector(task=task, branch=branch.label, raw=state.raw[task][0], masked=state.masked[task][0])
    outputs = {idx: cache.y[0] for idx, cache in state.experts.items()}
    return state.fused[task][0], gate, outputs


def forward_batch(model: Model, records) -> ForwardState:
    cfg = model.config
    z_img, z_txt, rows, log_counts = fuse_batch(model, records)
    tasks = cfg.active_tasks
    branches = {
        "image": _branch_forward(model.image_branch, z_img, tasks, cfg.epsilon, cfg.fallback),
        "text": _branch_forward(model.text_branch, z_txt, tasks, cfg.epsilon, cfg.fallback),
    }
    head_in, head_h1, head_a1 = {}, {}, {}
    preds = np.zeros((len(records), len(tasks)))
    for t, task in enumerate(tasks):
        x = np.hstack([branches["image"].fused[task], branches["text"].fused[task]])
        h = model.heads[task]
        h1 = affine_forward(x, h["W1"], h["b1"])
        a1 = activation(h1, cfg.activation)
        y = affine_forward(a1, h["W2"], h["b2"])
        head_in[task], head_h1[task], head_a1[task] = x, h1, a1
        preds[:, t] = y[:, 0]
    return ForwardState(
        region_rows=rows,
        log_counts=log_counts,
        branches=branches,
        head_in=head_in,
        head_h1=head_h1,
        head_a1=head_a1,
        predictions=preds,
    )


def predict(model: Model, record: RegionRecord, return_gates: bool = False):
    """Per-task predictions for one record, in active-task order."""
    state = forward_batch(model, [record])
    y = state.predictions[0].copy()
    if not return_gates:
        return y
    gates = [
        GateVector(task=task, branch=label, raw=bs.raw[task][0], masked=bs.masked[task][0])
        for label, bs in state.branches.items()
        for task in model.config.active_tasks
    ]
    return y, gates


def predict_batch(model: Model, records) -> np.ndarray:
    return forward_batch(model, records).predictions


# ---------------------------------------------------------------------------
# backward pass


def _branch_backward(model: Model, branch: Branch, state: _BranchState, d_fused: dict[str, np.ndarray]) -> np.ndarray:
    """Propagate per-task cotangents on the fused outputs down to the
    branch's experts and routers; returns the cotangent on the fused input."""
    tape = model.tape
    n, d_in = state.z.shape
    dz = np.zeros((n, d_in))
    d_y: dict[int, np.ndarray] = {
        idx: np.zeros_like(cache.y) for idx, cache in state.experts.items()
    }
    for task, du in d_fused.items():
        masked = state.masked[task]
        d_gate = np.zeros_like(masked)
        for j, pool_idx in enumerate(branch.eligible[task]):
            col = masked[:, j]
            rows = np.flatnonzero(col)
            if rows.size == 0:
                continue  # zeroed gates are a hard stop
            cache = state.experts[pool_idx]
            local = np.searchsorted(cache.rows, rows)
            d_gate[rows, j] = (du[rows] * cache.y[local]).sum(axis=1)
            d_y[pool_idx][local] += col[rows, None] * du[rows]
        # retained entries backpropagate through the full-M softmax
        d_logits = softmax_backward(state.raw[task], d_gate)
        w, _ = branch.routers[task]
        dz_r, d_w, d_b = affine_backward(state.z, w, d_logits)
        tape.grad_view(f"{branch.label}.router.{task}.W")[:] += d_w
        tape.grad_view(f"{branch.label}.router.{task}.b")[:] += d_b
        dz += dz_r

    for pool_idx, cache in state.experts.items():
        dy = d_y[pool_idx]
        expert = branch.experts[pool_idx]
        if expert.sigma == "layer_norm":
            ds = layer_norm_backward(cache.s, dy, _LN_EPS)
        else:
            ds = dy
        da1, d_w2, d_b2 = affine_backward(cache.a1, expert.W2, ds)
        dh1 = activation_backward(cache.h1, expert.activation, da1)
        dz_e, d_w1, d_b1 = affine_backward(cache.z, expert.W1, dh1)
        tape.grad_view(expert.name + ".W1")[:] += d_w1
        tape.grad_view(expert.name + ".b1")[:] += d_b1
        tape.grad_view(expert.name + ".W2")[:] += d_w2
        tape.grad_view(expert.name + ".b2")[:] += d_b2
        dz[cache.rows] += dz_e
    return dz


def backward(model: Model, records, targets, loss_weights) -> float:
    """Weighted multi-task MSE over the batch; fills model.tape.grads.

    `targets` is (batch, n_active_tasks) in active-task order and
    `loss_weights` maps each active task to its coefficient.
    """
    if len(records) == 0:
        raise ValueError("backward needs a nonempty batch")
    cfg = model.config
    tasks = cfg.active_tasks
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != (len(records), len(tasks)):
        raise ShapeError(
            f"targets shape {targets.shape}, expected ({len(records)}, {len(tasks)})"
        )
    lam = np.array([float(loss_weights[t]) for t in tasks])
    if (lam < 0).any():
        raise ValueError("loss weights must be nonnegative")

    model.tape.zero_grad()
    state = forward_batch(model, records)
    n = len(records)
    err = state.predictions - targets
    loss = float((lam * (err * err).mean(axis=0)).sum())
    if not math.isfinite(loss):
        raise NumericError("non-finite training loss")

    d_fused = {label: {} for label in BRANCH_LABELS}
    d_u = cfg.expert_out
    for t, task in enumerate(tasks):
        if lam[t] == 0.0:
            continue
        dy = (2.0 * lam[t] / n) * err[:, t]
        h = model.heads[task]
        da1, d_w2, d_b2 = affine_backward(state.head_a1[task], h["W2"], dy[:, None])
        dh1 = activation_backward(state.head_h1[task], cfg.activation, da1)
        dx, d_w1, d_b1 = affine_backward(state.head_in[task], h["W1"], dh1)
        tape = model.tape
        tape.grad_view(f"head.{task}.W1")[:] += d_w1
        tape.grad_view(f"head.{task}.b1")[:] += d_b1
        tape.grad_view(f"head.{task}.W2")[:] += d_w2
        tape.grad_view(f"head.{task}.b2")[:] += d_b2
        d_fused["image"][task] = dx[:, :d_u]
        d_fused["text"][task] = dx[:, d_u:]

    dz_img = _branch_backward(model, model.image_branch, state.branches["image"], d_fused["image"])
    dz_txt = _branch_backward(model, model.text_branch, state.branches["text"], d_fused["text"])

    # fusion backward: region and poi slices appear in both branches
    d_r = dz_img[:, cfg.d_e : cfg.d_e + cfg.d_r] + dz_txt[:, cfg.d_e : cfg.d_e + cfg.d_r]
    d_p = dz_img[:, cfg.d_e + cfg.d_r :] + dz_txt[:, cfg.d_e + cfg.d_r :]
    np.add.at(model.tape.grad_view("embed.region"), state.region_rows, d_r)
    model.tape.grad_view("embed.poi.W")[:] += d_p.T @ state.log_counts
    model.tape.grad_view("embed.poi.b")[:] += d_p.sum(axis=0)
    return loss
