"""Procedural toy image datasets, the real/auxiliary split, and file IO.

Each class renders a parametric glyph (oriented bar, blob, ring, checker,
cycling with a variant parameter for larger class counts) plus Gaussian
pixel noise, clipped to [0, 1]. No downloads, runs in milliseconds, and the
class structure is real enough for distillation to compress.

Dataset file layout (little endian): magic "DLK1", C u16, n_total u32,
H u16, W u16, Cin u16, provenance u8; then per sample label u16,
membership u8 (255 = untagged), M float64 pixels.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

PROVENANCES = ("real", "auxiliary", "synthetic", "inverted")
UNTAGGED = 255

_HEADER = struct.Struct("<4sHIHHHB")


@dataclass
class LabDataset:
    samples: np.ndarray  # (N, M) float64 in [0, 1]
    labels: np.ndarray  # (N,) int64 in [0, C)
    classes: int
    dims: tuple  # (H, W, Cin)
    provenance: str
    membership: np.ndarray | None = None  # (N,) uint8 in {0, 1}
    ids: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")
        if self.samples.ndim != 2 or self.samples.shape[0] != self.labels.shape[0]:
            raise ValueError("samples and labels disagree on sample count")
        if self.samples.size and (self.samples.min() < 0.0 or self.samples.max() > 1.0):
            raise ValueError("pixels must lie in [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise ValueError("labels out of range")
        has_tags = self.membership is not None
        if has_tags != (self.provenance == "auxiliary"):
            raise ValueError("membership tags are present iff provenance is auxiliary")
        if has_tags:
            self.membership = np.asarray(self.membership, dtype=np.uint8)
            if self.membership.shape != self.labels.shape:
                raise ValueError("membership tags disagree on sample count")
        if self.ids is None:
            self.ids = np.arange(len(self.labels), dtype=np.int64)
        else:
            self.ids = np.asarray(self.ids, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, index: np.ndarray, provenance: str, membership=None) -> "LabDataset":
        return LabDataset(
            self.samples[index].copy(),
            self.labels[index].copy(),
            self.classes,
            self.dims,
            provenance,
            membership=membership,
            ids=self.ids[index].copy(),
        )


@dataclass
class SplitPlan:
    real_fraction: float = 0.8
    member_leak: float = 0.15  # fraction of the real set exposed to the adversary
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.real_fraction < 1.0:
            raise ValueError("real_fraction must lie in (0, 1)")
        if not 0.0 <= self.member_leak < 1.0:
            raise ValueError("member_leak must lie in [0, 1)")


@dataclass
class SplitResult:
    d_real: LabDataset
    d_aux: LabDataset
    eval_members: LabDataset
    eval_nonmembers: LabDataset


def _glyph(cls: int, h: int, w: int) -> np.ndarray:
    """Deterministic base image for a class; kind cycles, variant shifts it."""
    kind, variant = cls % 4, cls // 4
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    bg, fg = 0.1, 0.9
    img = np.full((h, w), bg)
    if kind == 0:  # oriented bar through the center
        angle = (30.0 * variant) * np.pi / 180.0
        dist = np.abs(-(xx - cx) * np.sin(angle) + (yy - cy) * np.cos(angle))
        img += (fg - bg) * np.exp(-(dist ** 2) / (2 * 0.8 ** 2))
    elif kind == 1:  # blob offset by variant
        oy, ox = 0.8 * variant, -0.8 * variant
        d2 = (yy - cy - oy) ** 2 + (xx - cx - ox) ** 2
        img += (fg - bg) * np.exp(-d2 / (2 * 1.6 ** 2))
    elif kind == 2:  # ring
        r0 = min(h, w) * 0.33 + 0.4 * variant
        d = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        img += (fg - bg) * np.exp(-((d - r0) ** 2) / (2 * 0.6 ** 2))
    else:  # checker with variant phase
        img += (fg - bg) * (((yy // 2) + (xx // 2) + variant) % 2)
    return np.clip(img, 0.0, 1.0)


def generate(classes: int, per_class: int, dims=(8, 8, 1), noise: float = 0.2, seed: int = 0) -> LabDataset:
    """Balanced glyph dataset; with noise 0 all samples of a class coincide."""
    if classes < 2:
        raise ValueError("need at least two classes")
    if per_class < 1:
        raise ValueError("need at least one sample per class")
    h, w, cin = dims
    if h < 4 or w < 4:
        raise ValueError(f"dims {dims} too small for glyphs (minimum 4x4)")
    rng = np.random.default_rng(seed)
    m = h * w * cin
    samples = np.empty((classes * per_class, m))
    labels = np.empty(classes * per_class, dtype=np.int64)
    for cls in range(classes):
        base = np.repeat(_glyph(cls, h, w)[:, :, None], cin, axis=2).reshape(-1)
        block = base[None, :] + rng.normal(0.0, noise, size=(per_class, m)) if noise > 0 else np.tile(base, (per_class, 1))
        samples[cls * per_class : (cls + 1) * per_class] = np.clip(block, 0.0, 1.0)
        labels[cls * per_class : (cls + 1) * per_class] = cls
    return LabDataset(samples, labels, classes, tuple(dims), "real")


def _per_class_indices(ds: LabDataset, rng: np.random.Generator) -> list:
    return [rng.permutation(np.flatnonzero(ds.labels == c)) for c in range(ds.classes)]


def split(full: LabDataset, plan: SplitPlan) -> SplitResult:
    """Carve out the distillation set, the tagged auxiliary set, and eval pools.

    The auxiliary set holds a leaked subset of the real set (members, b=1)
    plus an equal count of held-out same-distribution samples (b=0). Eval
    members/non-members are disjoint from everything the attacker trains on
    and from each other, class balanced and equal sized.
    """
    rng = np.random.default_rng(plan.seed)
    counts = np.bincount(full.labels, minlength=full.classes)
    if counts.min() != counts.max():
        raise ValueError("split requires a class-balanced input dataset")
    n_class = int(counts[0])
    n_real = int(round(plan.real_fraction * n_class))
    n_hold = n_class - n_real
    leak = int(np.floor(plan.member_leak * n_real))
    if leak < 1:
        raise ValueError("member_leak leaves fewer than one member per class; the attack model cannot be trained")
    if n_hold < leak + 1:
        raise ValueError("holdout pool too small for auxiliary non-members plus evaluation")
    n_eval = min(n_hold - leak, n_real - leak)
    if n_eval < 1:
        raise ValueError("no samples left for evaluation pools")

    real_idx, aux_m, aux_n, eval_m, eval_n = [], [], [], [], []
    for order in _per_class_indices(full, rng):
        real_c, hold_c = order[:n_real], order[n_real:]
        real_idx.append(real_c)
        leak_order = rng.permutation(real_c)
        aux_m.append(leak_order[:leak])
        eval_m.append(leak_order[leak : leak + n_eval])
        aux_n.append(hold_c[:leak])
        eval_n.append(hold_c[leak : leak + n_eval])

    def cat(parts):
        return np.sort(np.concatenate(parts))

    aux_idx = np.concatenate([np.concatenate(aux_m), np.concatenate(aux_n)])
    aux_tags = np.concatenate(
        [np.ones(leak * full.classes, dtype=np.uint8), np.zeros(leak * full.classes, dtype=np.uint8)]
    )
    order = np.argsort(aux_idx, kind="stable")
    return SplitResult(
        d_real=full.take(cat(real_idx), "real"),
        d_aux=full.take(aux_idx[order], "auxiliary", membership=aux_tags[order]),
        eval_members=full.take(cat(eval_m), "auxiliary", membership=np.ones(n_eval * full.classes, dtype=np.uint8)),
        eval_nonmembers=full.take(cat(eval_n), "auxiliary", membership=np.zeros(n_eval * full.classes, dtype=np.uint8)),
    )


def save_dataset(ds: LabDataset, path) -> None:
    h, w, cin = ds.dims
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(b"DLK1", ds.classes, len(ds), h, w, cin, PROVENANCES.index(ds.provenance)))
        tags = ds.membership if ds.membership is not None else np.full(len(ds), UNTAGGED, dtype=np.uint8)
        for i in range(len(ds)):
            fh.write(struct.pack("<HB", int(ds.labels[i]), int(tags[i])))
            fh.write(ds.samples[i].astype("<f8").tobytes())


def load_dataset(path) -> LabDataset:
    with open(path, "rb") as fh:
        magic, classes, n_total, h, w, cin, prov = _HEADER.unpack(fh.read(_HEADER.size))
        if magic != b"DLK1":
            raise ValueError(f"not a dataset file: bad magic {magic!r}")
        m = h * w * cin
        samples = np.empty((n_total, m))
        labels = np.empty(n_total, dtype=np.int64)
        tags = np.empty(n_total, dtype=np.uint8)
        for i in range(n_total):
            labels[i], tags[i] = struct.unpack("<HB", fh.read(3))
            samples[i] = np.frombuffer(fh.read(m * 8), dtype="<f8")
    provenance = PROVENANCES[prov]
    membership = tags if provenance == "auxiliary" else None
    return LabDataset(samples, labels, classes, (h, w, cin), provenance, membership=membership)
