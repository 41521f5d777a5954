"""Loss/weight trajectory recording and the labeled trajectory corpus.

A trajectory is the sequence of end-of-epoch training losses (plus weight
checkpoints) of a fresh model trained on a synthetic dataset. The corpus
pairs trajectories with their (algorithm, architecture) ground truth taken
from the synthetic datasets' manifests: the training material for the
architecture-inference classifier. The adversary distills from its
auxiliary data, so that is what corpus generation consumes.

Corpus file layout (little endian): magic "DLKT", u u8, v u8, l u16,
E u16; per record algorithm u8, arch u8, seed u64, E float64 losses.
Weight checkpoints, when kept, live in separate model checkpoint files.
"""

from __future__ import annotations

import os
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import distiller, modelzoo
from .dataforge import LabDataset
from .distiller import ALGORITHMS, DistillConfig
from .losses import cross_entropy
from .optim import NonFiniteGradient
from .tape import backward

_HEADER = struct.Struct("<4sBBHH")
_RECORD = struct.Struct("<BBQ")

SPLIT_RATIO = (4, 1)  # train : test, per corpus cell


@dataclass
class TrajectoryRecord:
    losses: np.ndarray  # (E,) end-of-epoch training losses
    checkpoints: np.ndarray | None  # (E + 1, m) flat weights, or None if dropped
    label: tuple | None  # (algorithm index, arch index)
    arch_id: str
    seed: int

    def __post_init__(self):
        self.losses = np.asarray(self.losses, dtype=np.float64)
        if not np.all(np.isfinite(self.losses)) or self.losses.min() < 0:
            raise ValueError("loss trajectory must be finite and non-negative")


@dataclass
class TrajectoryCorpus:
    records: list
    algorithms: tuple
    archs: tuple
    per_cell: int
    epochs: int
    train_idx: np.ndarray
    test_idx: np.ndarray
    mean: np.ndarray  # per-epoch standardization statistics from the train split
    std: np.ndarray

    @property
    def n_classes(self) -> int:
        return len(self.algorithms) * len(self.archs)

    def cell_index(self, label: tuple) -> int:
        return label[0] * len(self.archs) + label[1]

    def standardize(self, losses: np.ndarray) -> np.ndarray:
        return (np.asarray(losses, dtype=np.float64) - self.mean) / self.std


def train_and_record(
    d_syn: LabDataset,
    arch_id: str,
    epochs: int,
    seed: int,
    lr: float = 0.2,
    label: tuple | None = None,
    keep_checkpoints: bool = True,
) -> TrajectoryRecord:
    """Train a fresh model on the synthetic set, logging loss and weights per epoch."""
    if epochs < 1:
        raise ValueError("need at least one epoch")
    spec = modelzoo.make_spec(arch_id, d_syn.dims, d_syn.classes)
    params = modelzoo.as_values(modelzoo.init_params(spec, seed))
    checkpoints = [modelzoo.flatten(params)] if keep_checkpoints else None
    losses = np.empty(epochs)
    x, y = d_syn.samples, d_syn.labels
    for epoch in range(epochs):
        grads = backward(cross_entropy(modelzoo.forward(spec, params, x), y))
        for p in params:
            p.data = p.data - lr * grads[p].data
        end_loss = float(cross_entropy(modelzoo.forward(spec, params, x), y).data)
        if not np.isfinite(end_loss):
            raise NonFiniteGradient(f"training diverged at epoch {epoch}")
        losses[epoch] = end_loss
        if checkpoints is not None:
            checkpoints.append(modelzoo.flatten(params))
    return TrajectoryRecord(
        losses=losses,
        checkpoints=np.array(checkpoints) if checkpoints is not None else None,
        label=label,
        arch_id=arch_id,
        seed=seed,
    )


def model_from_record(record: TrajectoryRecord, d_syn: LabDataset) -> modelzoo.ModelState:
    """The trained model at the final checkpoint of a record."""
    if record.checkpoints is None:
        raise ValueError("record was built without checkpoints")
    spec = modelzoo.make_spec(record.arch_id, d_syn.dims, d_syn.classes)
    return modelzoo.ModelState(spec, record.checkpoints[-1].copy(), record.seed)


def accuracy(state: modelzoo.ModelState, ds: LabDataset) -> float:
    logits = modelzoo.state_forward(state, ds.samples)
    return float(np.mean(np.argmax(logits, axis=1) == ds.labels))


def _corpus_cell(args):
    (d_aux, algorithm, arch_id, label, cell_seeds, epochs, base_cfg, expert_pack, lr) = args
    records = []
    for distill_seed, train_seed in cell_seeds:
        cfg = replace(base_cfg, seed=distill_seed)
        d_syn, _ = distiller.distill(d_aux, arch_id, cfg, experts=expert_pack)
        records.append(
            train_and_record(
                d_syn, arch_id, epochs, train_seed, lr=lr, label=label, keep_checkpoints=False
            )
        )
    return records


def build_corpus(
    d_aux: LabDataset,
    per_cell: int,
    epochs: int,
    seed: int,
    algorithms=ALGORITHMS,
    archs=modelzoo.ARCHITECTURES,
    ipc: int = 10,
    distill_cfgs: dict | None = None,
    train_lr: float = 0.2,
    expert_epochs: int = 8,
    workers: int | None = None,
) -> TrajectoryCorpus:
    """Distill per_cell synthetic sets per (algorithm, arch) pair and record them.

    Set workers > 1 (or DISTILEAK_THREADS) to spread cells over processes;
    results are merged in a fixed order either way.
    """
    if per_cell < 2:
        raise ValueError("need at least two trajectories per cell to split 4:1")
    cfgs = distill_cfgs or {alg: distiller.default_config(alg, ipc=ipc) for alg in algorithms}
    rng = np.random.default_rng(seed)
    tasks = []
    for i, algorithm in enumerate(algorithms):
        for j, arch_id in enumerate(archs):
            expert_pack = None
            if algorithm == "tm":
                expert_pack = [
                    distiller.record_expert(d_aux, arch_id, expert_epochs, int(rng.integers(2**63)))
                    for _ in range(2)
                ]
            cell_seeds = [(int(rng.integers(2**63)), int(rng.integers(2**63))) for _ in range(per_cell)]
            tasks.append((d_aux, algorithm, arch_id, (i, j), cell_seeds, epochs, cfgs[algorithm], expert_pack, train_lr))

    if workers is None:
        workers = int(os.environ.get("DISTILEAK_THREADS", "1"))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            per_task = list(pool.map(_corpus_cell, tasks))
    else:
        per_task = [_corpus_cell(t) for t in tasks]
    records = [rec for cell in per_task for rec in cell]
    return _corpus_from_records(records, tuple(algorithms), tuple(archs), per_cell, epochs, seed)


def save_corpus(corpus: TrajectoryCorpus, path) -> None:
    with open(path, "wb") as fh:
        fh.write(
            _HEADER.pack(
                b"DLKT", len(corpus.algorithms), len(corpus.archs), corpus.per_cell, corpus.epochs
            )
        )
        for rec in corpus.records:
            fh.write(_RECORD.pack(rec.label[0], rec.label[1], rec.seed))
            fh.write(rec.losses.astype("<f8").tobytes())


def load_corpus(path, algorithms=ALGORITHMS, archs=modelzoo.ARCHITECTURES, seed: int = 0) -> TrajectoryCorpus:
    """Rebuild a corpus (records and split) from its trajectory file."""
    with open(path, "rb") as fh:
        magic, u, v, per_cell, epochs = _HEADER.unpack(fh.read(_HEADER.size))
        if magic != b"DLKT":
            raise ValueError(f"not a corpus file: bad magic {magic!r}")
        records = []
        for _ in range(u * v * per_cell):
            i, j, rec_seed = _RECORD.unpack(fh.read(_RECORD.size))
            losses = np.frombuffer(fh.read(epochs * 8), dtype="<f8").astype(np.float64)
            records.append(
                TrajectoryRecord(losses, None, (i, j), archs[j], rec_seed)
            )
    return _corpus_from_records(records, tuple(algorithms)[:u], tuple(archs)[:v], per_cell, epochs, seed)


def _corpus_from_records(records, algorithms, archs, per_cell, epochs, seed) -> TrajectoryCorpus:
    split_rng = np.random.default_rng(seed + 1)
    n_test = max(1, per_cell * SPLIT_RATIO[1] // sum(SPLIT_RATIO))
    train_idx, test_idx = [], []
    for cell in range(len(algorithms) * len(archs)):
        base = cell * per_cell
        order = split_rng.permutation(per_cell)
        test_idx.extend(base + order[:n_test])
        train_idx.extend(base + order[n_test:])
    train_idx = np.sort(np.array(train_idx))
    test_idx = np.sort(np.array(test_idx))
    train_losses = np.array([records[k].losses for k in train_idx])
    mean = train_losses.mean(axis=0)
    std = train_losses.std(axis=0)
    std[std < 1e-12] = 1.0
    return TrajectoryCorpus(records, algorithms, archs, per_cell, epochs, train_idx, test_idx, mean, std)
