"""Three ways of compressing a dataset into a small synthetic one.

* ``dd`` -- direct bilevel: unroll a few inner training steps on the
  synthetic set, evaluate the real-set loss, and descend its gradient with
  respect to the synthetic pixels.
* ``dc`` -- condensation: match per-layer loss gradients between the
  synthetic and real sets at freshly sampled model states.
* ``tm`` -- trajectory matching: make short student runs on the synthetic
  set land where an expert trained on the real set landed.

All three return a synthetic dataset of exactly ipc * C samples with pixels
clipped to [0, 1] plus a manifest recording the (algorithm, architecture)
ground truth, which is what the architecture-inference stage later tries to
recover.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import modelzoo
from .dataforge import LabDataset
from .losses import cross_entropy
from .optim import NonFiniteGradient
from .tape import Value, backward, sqrt

ALGORITHMS = ("dd", "dc", "tm")

_DENOM_FLOOR = 1e-12
_MAX_RESAMPLES = 20


@dataclass
class DistillConfig:
    algorithm: str
    ipc: int = 10
    outer_iters: int = 60
    inner_steps: int = 3  # unrolled student steps per outer iteration (capped small)
    lr_data: float = 20.0
    lr_model: float = 0.1
    tm_expert_span: int = 3  # expert epochs a student run must catch up to
    tm_student_steps: int = 2
    metric: str = "euclidean"  # or "cosine", for the condensation distance
    seed: int = 0

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown distillation algorithm {self.algorithm!r}")
        if self.ipc < 1:
            raise ValueError("ipc must be at least 1")
        if self.inner_steps < 1:
            raise ValueError("inner_steps must be at least 1")
        if self.inner_steps > 5:
            raise ValueError("inner_steps capped at 5 to bound the unrolled tape")
        if self.algorithm == "tm" and not self.tm_expert_span >= self.tm_student_steps >= 1:
            raise ValueError("need tm_expert_span >= tm_student_steps >= 1")
        if self.metric not in ("euclidean", "cosine"):
            raise ValueError(f"unknown gradient metric {self.metric!r}")


def default_config(algorithm: str, **overrides) -> DistillConfig:
    """Per-algorithm desk-scale defaults; keyword overrides win."""
    tuned = {
        "dd": dict(outer_iters=60, inner_steps=3, lr_data=20.0, lr_model=0.1),
        "dc": dict(outer_iters=60, lr_data=1.0, lr_model=0.1),
        "tm": dict(outer_iters=80, lr_data=10.0, lr_model=0.1, tm_expert_span=3, tm_student_steps=2),
    }[algorithm]
    tuned.update(overrides)
    return DistillConfig(algorithm=algorithm, **tuned)


@dataclass
class SynManifest:
    """Ground truth of a synthetic dataset: the attack's label."""

    algorithm: str
    arch_id: str
    ipc: int
    classes: int
    seed: int

    @property
    def algorithm_index(self) -> int:
        return ALGORITHMS.index(self.algorithm)

    @property
    def arch_index(self) -> int:
        return modelzoo.ARCHITECTURES.index(self.arch_id)


@dataclass
class ExpertTrajectory:
    """End-of-epoch weight checkpoints of a teacher trained on the real set."""

    checkpoints: np.ndarray  # (epochs + 1, m)
    arch_id: str
    seed: int

    @property
    def epochs(self) -> int:
        return self.checkpoints.shape[0] - 1


def init_synthetic(d_real: LabDataset, ipc: int, seed: int) -> tuple:
    """Per-class means of disjoint random sample groups, plus fixed labels."""
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for c in range(d_real.classes):
        idx = rng.permutation(np.flatnonzero(d_real.labels == c))
        if len(idx) < ipc:
            raise ValueError(f"class {c} has {len(idx)} samples, fewer than ipc={ipc}")
        for group in np.array_split(idx, ipc):
            images.append(d_real.samples[group].mean(axis=0))
            labels.append(c)
    return np.array(images), np.array(labels, dtype=np.int64)


def _syn_dataset(images: np.ndarray, labels: np.ndarray, d_real: LabDataset) -> LabDataset:
    return LabDataset(np.clip(images, 0.0, 1.0), labels, d_real.classes, d_real.dims, "synthetic")


def unrolled_sgd(spec, params, x_syn: Value, y_syn: np.ndarray, steps: int, lr: float) -> list:
    """Differentiable inner training: each step stays on the tape."""
    for _ in range(steps):
        loss = cross_entropy(modelzoo.forward(spec, params, x_syn), y_syn)
        grads = backward(loss)
        params = [p - grads[p] * lr if p in grads else p for p in params]
    return params


def _check_meta_grad(g: np.ndarray, algorithm: str, iteration: int) -> None:
    if not np.all(np.isfinite(g)):
        raise NonFiniteGradient(
            f"{algorithm}: non-finite synthetic-data gradient at outer iteration {iteration}"
        )


def distill_dd(d_real: LabDataset, arch_id: str, cfg: DistillConfig) -> tuple:
    """Bilevel distillation with an unrolled inner loop."""
    spec = modelzoo.make_spec(arch_id, d_real.dims, d_real.classes)
    rng = np.random.default_rng(cfg.seed)
    images, labels = init_synthetic(d_real, cfg.ipc, cfg.seed)
    x_real, y_real = d_real.samples, d_real.labels
    for it in range(cfg.outer_iters):
        syn = Value(images)
        params = modelzoo.as_values(modelzoo.init_params(spec, int(rng.integers(2**63))))
        params = unrolled_sgd(spec, params, syn, labels, cfg.inner_steps, cfg.lr_model)
        outer = cross_entropy(modelzoo.forward(spec, params, x_real), y_real)
        grads = backward(outer)
        g = grads[syn].data
        _check_meta_grad(g, "dd", it)
        images = np.clip(images - cfg.lr_data * g, 0.0, 1.0)
    return _syn_dataset(images, labels, d_real), SynManifest("dd", arch_id, cfg.ipc, d_real.classes, cfg.seed)


def grad_distance(spec, params, x_syn, y_syn, x_real, y_real, metric: str = "euclidean") -> Value:
    """Layer-wise distance between synthetic and real loss gradients.

    The synthetic-side gradients stay on the tape so the distance can be
    differentiated with respect to the synthetic pixels; the real-side
    gradients are constants.
    """
    params = modelzoo.as_values(params)
    syn_grads = backward(cross_entropy(modelzoo.forward(spec, params, x_syn), y_syn))
    real_params = [Value(p.data) for p in params]
    backward(cross_entropy(modelzoo.forward(spec, real_params, x_real), y_real))
    total = Value(0.0)
    for layer_idx in range(len(spec.layers)):
        pair = params[2 * layer_idx : 2 * layer_idx + 2]
        real_pair = real_params[2 * layer_idx : 2 * layer_idx + 2]
        g_syn = [syn_grads[p].reshape((-1,)) for p in pair]
        g_real = [Value(rp.grad.reshape(-1)) for rp in real_pair]
        if metric == "euclidean":
            sq = Value(0.0)
            for gs, gr in zip(g_syn, g_real):
                sq = sq + ((gs - gr) ** 2.0).sum()
            # at an exact match the sqrt subgradient is taken as zero
            if float(sq.data) > 0.0:
                total = total + sqrt(sq)
        else:  # cosine distance per layer
            dot, ns, nr = Value(0.0), Value(0.0), 0.0
            for gs, gr in zip(g_syn, g_real):
                dot = dot + (gs * gr).sum()
                ns = ns + (gs ** 2.0).sum()
                nr += float((gr.data ** 2).sum())
            total = total + (1.0 - dot / (sqrt(ns + 1e-24) * (np.sqrt(nr) + 1e-12)))
    return total


def distill_dc(d_real: LabDataset, arch_id: str, cfg: DistillConfig) -> tuple:
    """Condensation by per-layer gradient matching at sampled model states."""
    spec = modelzoo.make_spec(arch_id, d_real.dims, d_real.classes)
    rng = np.random.default_rng(cfg.seed)
    images, labels = init_synthetic(d_real, cfg.ipc, cfg.seed)
    for it in range(cfg.outer_iters):
        syn = Value(images)
        params = modelzoo.init_params(spec, int(rng.integers(2**63)))
        dist = grad_distance(spec, params, syn, labels, d_real.samples, d_real.labels, cfg.metric)
        g = backward(dist)[syn].data
        _check_meta_grad(g, "dc", it)
        images = np.clip(images - cfg.lr_data * g, 0.0, 1.0)
    return _syn_dataset(images, labels, d_real), SynManifest("dc", arch_id, cfg.ipc, d_real.classes, cfg.seed)


def record_expert(d_real: LabDataset, arch_id: str, epochs: int, seed: int, lr: float = 0.2) -> ExpertTrajectory:
    """Full-batch teacher training on the real set, checkpointing each epoch."""
    if epochs < 1:
        raise ValueError("an expert trajectory needs at least one epoch")
    spec = modelzoo.make_spec(arch_id, d_real.dims, d_real.classes)
    params = modelzoo.as_values(modelzoo.init_params(spec, seed))
    checkpoints = [modelzoo.flatten(params)]
    for epoch in range(epochs):
        loss = cross_entropy(modelzoo.forward(spec, params, d_real.samples), d_real.labels)
        if not np.isfinite(loss.data):
            raise NonFiniteGradient(f"expert training diverged at epoch {epoch}")
        grads = backward(loss)
        for p in params:
            p.data = p.data - lr * grads[p].data
        checkpoints.append(modelzoo.flatten(params))
    return ExpertTrajectory(np.array(checkpoints), arch_id, seed)


def match_loss(spec, expert: ExpertTrajectory, start: int, x_syn, y_syn, cfg: DistillConfig) -> Value:
    """Normalized trajectory-matching loss for a student run from one start.

    Ratio of the squared distance between the student's endpoint and the
    expert's target checkpoint to the squared distance the expert itself
    covered, so it is invariant to rescaling both gaps together.
    """
    span, steps = cfg.tm_expert_span, cfg.tm_student_steps
    theta_start = modelzoo.unflatten(spec, expert.checkpoints[start])
    target = expert.checkpoints[start + span]
    denom = float(((expert.checkpoints[start] - target) ** 2).sum())
    if denom < _DENOM_FLOOR:
        raise ZeroDivisionError(f"expert stalled between epochs {start} and {start + span}")
    params = modelzoo.as_values(theta_start)
    params = unrolled_sgd(spec, params, x_syn, y_syn, steps, cfg.lr_model)
    target_parts = modelzoo.unflatten(spec, target)
    num = Value(0.0)
    for p, t in zip(params, target_parts):
        num = num + ((p - Value(t)) ** 2.0).sum()
    return num * (1.0 / denom)


def distill_tm(d_real: LabDataset, arch_id: str, cfg: DistillConfig, experts) -> tuple:
    """Trajectory-matching distillation against recorded expert runs."""
    experts = list(experts)
    if not experts:
        raise ValueError("trajectory matching needs at least one expert trajectory")
    for exp in experts:
        if exp.arch_id != arch_id:
            raise ValueError(f"expert arch {exp.arch_id} does not match {arch_id}")
        if exp.epochs < cfg.tm_expert_span:
            raise ValueError("expert trajectory shorter than the matching span")
    spec = modelzoo.make_spec(arch_id, d_real.dims, d_real.classes)
    rng = np.random.default_rng(cfg.seed)
    images, labels = init_synthetic(d_real, cfg.ipc, cfg.seed)
    for it in range(cfg.outer_iters):
        syn = Value(images)
        loss = None
        for _ in range(_MAX_RESAMPLES):
            expert = experts[int(rng.integers(len(experts)))]
            start = int(rng.integers(expert.epochs - cfg.tm_expert_span + 1))
            try:
                loss = match_loss(spec, expert, start, syn, labels, cfg)
                break
            except ZeroDivisionError:
                continue
        if loss is None:
            raise NonFiniteGradient("tm: every sampled expert segment had stalled; aborting")
        g = backward(loss)[syn].data
        _check_meta_grad(g, "tm", it)
        images = np.clip(images - cfg.lr_data * g, 0.0, 1.0)
    return _syn_dataset(images, labels, d_real), SynManifest("tm", arch_id, cfg.ipc, d_real.classes, cfg.seed)


def distill(d_real: LabDataset, arch_id: str, cfg: DistillConfig, experts=None) -> tuple:
    """Dispatch to the configured algorithm; returns (dataset, manifest)."""
    if cfg.algorithm == "dd":
        return distill_dd(d_real, arch_id, cfg)
    if cfg.algorithm == "dc":
        return distill_dc(d_real, arch_id, cfg)
    if experts is None:
        raise ValueError("trajectory matching requires expert trajectories")
    return distill_tm(d_real, arch_id, cfg, experts)


def save_manifest(manifest: SynManifest, path) -> None:
    with open(path, "w") as fh:
        json.dump(asdict(manifest), fh, indent=2, sort_keys=True)


def load_manifest(path) -> SynManifest:
    with open(path) as fh:
        return SynManifest(**json.load(fh))
