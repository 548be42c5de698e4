"""Streaming adaptation: prototype-guided updates with asymmetric rates.

Three interchangeable adapters share the ``process_block(x)`` interface:

* ``ProposedAdapter`` — per block, runs a few gradient steps on the
  cross-entropy between the classifier's distribution and a geometric
  target built from cosine similarity to class prototypes, with the
  extractor stepping more slowly than the classifier. Prototypes are
  re-projected from a frozen anchor bank at a fixed block cadence.
* ``NaiveAdapter`` — hard argmax self-labels, one shared learning rate.
* ``BaselineAdapter`` — no adaptation; the deployed model stays frozen.

Predictions returned for a block are always computed before that block's
updates, so reported accuracy is honest about what the deployed model knew
at prediction time. Under the default ``bn_policy="frozen"`` batch-norm
stays in eval mode throughout: running statistics are part of the frozen
deployment, only gamma/beta move. ``bn_policy="batch"`` is the ablation
where adapting forwards normalize by current block statistics instead
(running stats then drift with the stream and re-projection sees them).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import model, nn, protobank


@dataclass(frozen=True)
class OnlineConfig:
    tau: float = 0.1
    eta_f: float = 1e-5          # extractor group (weights, biases, bn scale/shift)
    eta_y: float = 1e-4          # classifier group
    n_steps: int = 3
    refresh_every: int = 10      # prototype re-projection cadence
    refresh_unit: str = "blocks"  # count blocks, or individual inner steps
    bn_policy: str = "frozen"    # frozen deployment stats, or batch stats
    optimizer: str = "sgd"

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if self.refresh_every < 1:
            raise ValueError("refresh_every must be >= 1")
        if self.refresh_unit not in ("blocks", "steps"):
            raise ValueError(f"unknown refresh unit {self.refresh_unit!r}")
        if self.bn_policy not in ("frozen", "batch"):
            raise ValueError(f"unknown bn policy {self.bn_policy!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.eta_f < 0 or self.eta_y < 0:
            raise ValueError("learning rates must be non-negative")
        zero = self.eta_f == 0.0 and self.eta_y == 0.0
        if not zero and self.eta_f >= self.eta_y:
            raise ValueError(
                "the extractor rate must stay below the classifier rate "
                f"(got eta_f={self.eta_f}, eta_y={self.eta_y}); "
                "set both to zero to disable adaptation"
            )


@dataclass
class BlockResult:
    index: int
    predictions: np.ndarray      # argmax class ids, pre-update
    geo_labels: np.ndarray       # argmax of the geometric target, pre-update
    confidence: np.ndarray       # max classifier probability per sample
    losses: tuple                # adaptation loss after each inner step
    proto_version: int
    agreement: float             # fraction of samples where geo == classifier


def classifier_distribution(x: np.ndarray, params: dict, mode: str = "eval"):
    """Class probabilities with the caches needed for backprop."""
    z, cache_f = model.extract_features(x, params, mode=mode)
    logits, cache_y = model.classify(z, params)
    return nn.softmax(logits), z, cache_f, cache_y


def geometric_distribution(z: np.ndarray, protos: protobank.PrototypeSet,
                           tau: float) -> np.ndarray:
    """Soft assignment of latents to classes by cosine similarity.

    Rows of z are projected to the unit sphere and compared against the
    normalized prototypes; the similarities are sharpened by 1/tau. This is
    a constant target: no gradient flows through it.
    """
    zbar = model.normalize_rows(z)
    scores = zbar @ protos.mu_bar.T
    return nn.softmax(scores / tau)


def adaptation_loss(q: np.ndarray, p: np.ndarray) -> float:
    """Mean cross-entropy between a fixed target q and the classifier's p."""
    return nn.cross_entropy_soft(q, p)


def _check_finite(label: str, block: int, step: int, loss: float, grads: dict):
    bad = []
    if not np.isfinite(loss):
        bad.append(f"loss={loss!r}")
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad.append(f"grad[{k}] max|.|={np.abs(g).max():.3e}")
            if len(bad) > 4:
                break
    if bad:
        raise FloatingPointError(
            f"{label}: non-finite values at block {block}, inner step {step}: "
            + "; ".join(bad)
        )


class _TraceWriter:
    def __init__(self, path):
        self._f = open(path, "w") if path is not None else None

    def write(self, record: dict):
        if self._f is not None:
            self._f.write(json.dumps(record) + "\n")
            self._f.flush()

    def close(self):
        if self._f is not None:
            self._f.close()
            self._f = None


def _split_grads(grads: dict):
    g_f = {k: v for k, v in grads.items() if k.startswith("ext.")}
    g_y = {k: v for k, v in grads.items() if k.startswith("cls.")}
    return g_f, g_y


class BaselineAdapter:
    """Deployment without adaptation: parameters never change."""

    name = "baseline"

    def __init__(self, params: dict, prototypes: protobank.PrototypeSet,
                 config: OnlineConfig = OnlineConfig(), trace_path=None):
        self.params = model.clone_params(model.deployment_params(params))
        self.prototypes = prototypes
        self.config = config
        self._trace = _TraceWriter(trace_path)
        self._t = 0

    def process_block(self, x: np.ndarray) -> BlockResult:
        self._t += 1
        p, z, _, _ = classifier_distribution(x, self.params)
        q = geometric_distribution(z, self.prototypes, self.config.tau)
        pred = np.argmax(p, axis=1)
        geo = np.argmax(q, axis=1)
        result = BlockResult(
            index=self._t, predictions=pred, geo_labels=geo,
            confidence=p.max(axis=1), losses=(),
            proto_version=self.prototypes.version,
            agreement=float((pred == geo).mean()),
        )
        self._trace.write({"adapter": self.name, "block": self._t,
                           "n": int(x.shape[0]), "losses": [],
                           "proto_version": self.prototypes.version,
                           "mean_confidence": float(p.max(axis=1).mean()),
                           "agreement": result.agreement})
        return result

    def close(self):
        self._trace.close()


class ProposedAdapter:
    """Prototype-guided adaptation with asymmetric learning rates."""

    name = "proposed"

    def __init__(self, params: dict, prototypes: protobank.PrototypeSet,
                 anchor_bank: protobank.AnchorBank,
                 config: OnlineConfig = OnlineConfig(), trace_path=None):
        self.params = model.clone_params(model.deployment_params(params))
        self.prototypes = prototypes
        self.anchor_bank = anchor_bank
        self.config = config
        self._trace = _TraceWriter(trace_path)
        self._t = 0
        self._steps = 0
        if config.optimizer == "adam":
            self._opt_f = nn.AdamState()
            self._opt_y = nn.AdamState()

    def _refresh_due(self) -> bool:
        n = self.config.refresh_every
        if self.config.refresh_unit == "blocks":
            return self._t % n == 0
        # steps: refresh whenever this block's inner loop crossed a multiple
        return (self._steps // n) > ((self._steps - self.config.n_steps) // n)

    def _apply(self, g_f: dict, g_y: dict):
        cfg = self.config
        if cfg.eta_f == 0.0 and cfg.eta_y == 0.0:
            return
        if cfg.optimizer == "sgd":
            nn.sgd_update(self.params, g_f, cfg.eta_f)
            nn.sgd_update(self.params, g_y, cfg.eta_y)
        else:
            nn.adam_update(self.params, g_f, self._opt_f, cfg.eta_f)
            nn.adam_update(self.params, g_y, self._opt_y, cfg.eta_y)

    def process_block(self, x: np.ndarray) -> BlockResult:
        self._t += 1
        cfg = self.config
        n = x.shape[0]
        bn = "train" if cfg.bn_policy == "batch" else "eval"

        # score first: predictions reflect the model before this block's updates
        p0, z0, cache_f, cache_y = classifier_distribution(x, self.params, bn)
        q0 = geometric_distribution(z0, self.prototypes, cfg.tau)
        pred = np.argmax(p0, axis=1)
        geo = np.argmax(q0, axis=1)

        losses = []
        p, q = p0, q0
        for step in range(cfg.n_steps):
            if step > 0:  # step 0 reuses the scoring pass: params unchanged
                p, z, cache_f, cache_y = classifier_distribution(x, self.params, bn)
                q = geometric_distribution(z, self.prototypes, cfg.tau)
            loss = adaptation_loss(q, p)
            d_logits = nn.softmax_cross_entropy_grad(p, q)
            d_z, grads_y = model.classifier_backward(d_logits, cache_y)
            _, grads_f = model.extractor_backward(d_z, cache_f)
            _check_finite(self.name, self._t, step, loss, {**grads_f, **grads_y})
            self._apply(grads_f, grads_y)
            losses.append(float(loss))
        self._steps += cfg.n_steps

        if self._refresh_due():
            self.prototypes = protobank.compute_prototypes(
                self.anchor_bank, self.params,
                version=self.prototypes.version + 1)

        result = BlockResult(
            index=self._t, predictions=pred, geo_labels=geo,
            confidence=p0.max(axis=1), losses=tuple(losses),
            proto_version=self.prototypes.version,
            agreement=float((pred == geo).mean()),
        )
        self._trace.write({"adapter": self.name, "block": self._t, "n": n,
                           "losses": losses,
                           "proto_version": self.prototypes.version,
                           "mean_confidence": float(p0.max(axis=1).mean()),
                           "agreement": result.agreement})
        return result

    def close(self):
        self._trace.close()


class NaiveAdapter:
    """Self-training on hard argmax labels with one shared learning rate.

    The rate is the classifier rate from the config; extractor and
    classifier both use it, which is exactly the asymmetry the proposed
    adapter avoids.
    """

    name = "naive"

    def __init__(self, params: dict, prototypes: protobank.PrototypeSet,
                 config: OnlineConfig = OnlineConfig(), trace_path=None):
        self.params = model.clone_params(model.deployment_params(params))
        self.prototypes = prototypes
        self.config = config
        self._trace = _TraceWriter(trace_path)
        self._t = 0
        if config.optimizer == "adam":
            self._opt = nn.AdamState()

    def process_block(self, x: np.ndarray) -> BlockResult:
        self._t += 1
        cfg = self.config
        p0, z0, cache_f, cache_y = classifier_distribution(x, self.params)
        q0 = geometric_distribution(z0, self.prototypes, cfg.tau)
        pred = np.argmax(p0, axis=1)
        geo = np.argmax(q0, axis=1)

        losses = []
        p = p0
        for step in range(cfg.n_steps):
            if step > 0:  # step 0 reuses the scoring pass: params unchanged
                p, z, cache_f, cache_y = classifier_distribution(x, self.params)
            labels = np.argmax(p, axis=1)
            q = np.zeros_like(p)
            q[np.arange(labels.shape[0]), labels] = 1.0
            loss = adaptation_loss(q, p)
            d_logits = nn.softmax_cross_entropy_grad(p, q)
            d_z, grads_y = model.classifier_backward(d_logits, cache_y)
            _, grads_f = model.extractor_backward(d_z, cache_f)
            _check_finite(self.name, self._t, step, loss, {**grads_f, **grads_y})
            if cfg.eta_y > 0.0:
                if cfg.optimizer == "sgd":
                    nn.sgd_update(self.params, {**grads_f, **grads_y}, cfg.eta_y)
                else:
                    nn.adam_update(self.params, {**grads_f, **grads_y}, self._opt, cfg.eta_y)
            losses.append(float(loss))

        result = BlockResult(
            index=self._t, predictions=pred, geo_labels=geo,
            confidence=p0.max(axis=1), losses=tuple(losses),
            proto_version=self.prototypes.version,
            agreement=float((pred == geo).mean()),
        )
        self._trace.write({"adapter": self.name, "block": self._t,
                           "n": int(x.shape[0]), "losses": losses,
                           "proto_version": self.prototypes.version,
                           "mean_confidence": float(p0.max(axis=1).mean()),
                           "agreement": result.agreement})
        return result

    def close(self):
        self._trace.close()


def make_adapter(kind: str, offline_result, config: OnlineConfig,
                 trace_path=None):
    """Construct an adapter by name from an offline training result."""
    if kind == "proposed":
        return ProposedAdapter(offline_result.params, offline_result.prototypes,
                               offline_result.anchor_bank, config, trace_path)
    if kind == "naive":
        return NaiveAdapter(offline_result.params, offline_result.prototypes,
                            config, trace_path)
    if kind == "baseline":
        return BaselineAdapter(offline_result.params, offline_result.prototypes,
                               config, trace_path)
    raise ValueError(f"unknown adapter {kind!r}")
