"""Anchor memory bank and normalized class prototypes.

The anchor bank is a frozen, condition-stratified subset of the offline
labeled samples. Prototypes are per-class means of L2-normalized latent
features of those anchors; they are recomputed ("re-projected") whenever
the extractor drifts, always from the same static bank.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import extract_features, normalize_rows

PROTO_NORM_FLOOR = 1e-9


@dataclass
class AnchorBank:
    """Per-class anchor inputs plus the indices they came from.

    ``inputs[k]`` is an (n_k, d) array of raw windowed samples for class k.
    Arrays are write-protected after construction.
    """

    inputs: list
    source_indices: list

    def __post_init__(self):
        if not self.inputs:
            raise ValueError("anchor bank needs at least one class")
        for k, x in enumerate(self.inputs):
            if x.shape[0] == 0:
                raise ValueError(f"anchor bank class {k} is empty")
            x.setflags(write=False)
            self.source_indices[k].setflags(write=False)

    @property
    def n_classes(self) -> int:
        return len(self.inputs)

    def __len__(self) -> int:
        return sum(x.shape[0] for x in self.inputs)


@dataclass
class PrototypeSet:
    """Class prototypes mu (means of unit vectors) and their unit versions."""

    mu: np.ndarray       # (K, latent_dim)
    mu_bar: np.ndarray   # (K, latent_dim), rows have unit norm
    version: int = 0

    @property
    def n_classes(self) -> int:
        return self.mu.shape[0]

    def check_nondegenerate(self) -> None:
        norms = np.linalg.norm(self.mu, axis=1)
        bad = np.nonzero(norms < PROTO_NORM_FLOOR)[0]
        if bad.size:
            raise ValueError(f"degenerate prototypes for classes {bad.tolist()}")


def build_anchor_bank(x: np.ndarray, y: np.ndarray, c: np.ndarray,
                      anchors_per_class: int, seed: int) -> AnchorBank:
    """Select up to ``anchors_per_class`` samples per class, stratified by condition.

    The per-class quota is split as evenly as possible across the conditions
    present for that class; a condition holding fewer samples than its share
    contributes everything it has. Selection within a condition is a seeded
    draw without replacement, so the same seed reproduces the same bank.
    """
    y = np.asarray(y)
    c = np.asarray(c)
    classes = np.unique(y)
    n_classes = int(classes.max()) + 1
    if set(classes.tolist()) != set(range(n_classes)):
        raise ValueError(f"class ids must be contiguous from 0, got {classes.tolist()}")
    rng = np.random.default_rng(seed)
    inputs = []
    indices = []
    for k in range(n_classes):
        class_idx = np.nonzero(y == k)[0]
        if class_idx.size == 0:
            raise ValueError(f"no offline samples for class {k}")
        conds = np.unique(c[class_idx])
        quota = anchors_per_class // len(conds)
        remainder = anchors_per_class % len(conds)
        chosen = []
        for j, cond in enumerate(conds):
            pool = class_idx[c[class_idx] == cond]
            want = quota + (1 if j < remainder else 0)
            if pool.size <= want:
                chosen.append(pool)
            else:
                chosen.append(np.sort(rng.choice(pool, size=want, replace=False)))
        idx = np.sort(np.concatenate(chosen))
        inputs.append(np.ascontiguousarray(x[idx]))
        indices.append(idx)
    return AnchorBank(inputs=inputs, source_indices=indices)


def compute_prototypes(bank: AnchorBank, params: dict, version: int = 0) -> PrototypeSet:
    """Push all anchors through the extractor (eval mode) and average unit features.

        mu_k = (1/n_k) * sum over anchors of  G_f(x) / ||G_f(x)||

    Raises if any class collapses to a near-zero prototype.
    """
    mus = []
    for k in range(bank.n_classes):
        z, _ = extract_features(bank.inputs[k], params, mode="eval")
        mus.append(normalize_rows(z).mean(axis=0))
    mu = np.stack(mus)
    norms = np.linalg.norm(mu, axis=1)
    bad = np.nonzero(norms < PROTO_NORM_FLOOR)[0]
    if bad.size:
        raise ValueError(f"degenerate prototypes for classes {bad.tolist()}")
    mu_bar = mu / norms[:, None]
    return PrototypeSet(mu=mu, mu_bar=mu_bar, version=version)
