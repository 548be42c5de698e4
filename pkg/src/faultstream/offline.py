"""Offline training: fault classification with an adversarial condition head.

The extractor and classifier minimize class cross-entropy while the
condition discriminator, attached through the gradient-reversal layer,
pushes the extractor toward condition-invariant features. All parameters
update together with Adam; the reversal strength lambda ramps from 0 to 1
over the first third of the epochs unless a constant override is given.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import model, nn, protobank


@dataclass(frozen=True)
class OfflineConfig:
    epochs: int = 30
    batch_size: int = 128
    lr: float = 1e-3
    lambda_const: float | None = None   # None -> warm-up schedule
    anchors_per_class: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batch statistics need it)")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.lambda_const is not None and self.lambda_const < 0:
            raise ValueError("lambda_const must be >= 0")
        if self.anchors_per_class < 1:
            raise ValueError("anchors_per_class must be >= 1")

    def lambda_at(self, epoch: int) -> float:
        """Reversal strength for a 0-based epoch index."""
        if self.lambda_const is not None:
            return float(self.lambda_const)
        warm = max(1, -(-self.epochs // 3))  # ceil(epochs / 3)
        return float(min(1.0, epoch / warm))


@dataclass
class OfflineResult:
    params: dict
    spec: model.NetworkSpec
    prototypes: protobank.PrototypeSet
    anchor_bank: protobank.AnchorBank
    history: list = field(default_factory=list)

    def deployment_params(self) -> dict:
        return model.deployment_params(self.params)


def _one_hot(labels: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((labels.shape[0], n))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def _validate_labels(y: np.ndarray, c: np.ndarray, n_classes: int, n_domains: int):
    present_y = set(np.unique(y).tolist())
    if present_y != set(range(n_classes)):
        missing = sorted(set(range(n_classes)) - present_y)
        raise ValueError(f"offline data is missing class ids {missing}")
    present_c = set(np.unique(c).tolist())
    if present_c != set(range(n_domains)):
        raise ValueError(
            f"condition ids must cover 0..{n_domains - 1}, got {sorted(present_c)}"
        )
    if n_domains < 2:
        raise ValueError(
            "adversarial training needs at least two source conditions; "
            "got a single condition"
        )


def _stratified_batches(y_cond: np.ndarray, batch_size: int, rng) -> list:
    """Round-robin merge of per-condition shuffles, cut into batches.

    Keeps every batch's condition mix close to the global proportions so the
    discriminator never sees a degenerate batch.
    """
    per_cond = [rng.permutation(np.nonzero(y_cond == m)[0])
                for m in np.unique(y_cond)]
    order = np.empty(y_cond.shape[0], dtype=np.int64)
    pos = 0
    i = 0
    while pos < order.shape[0]:
        for stack in per_cond:
            if i < stack.shape[0]:
                order[pos] = stack[i]
                pos += 1
        i += 1
    batches = [order[s: s + batch_size] for s in range(0, order.shape[0], batch_size)]
    if len(batches) > 1 and batches[-1].shape[0] < 2:
        batches[-2] = np.concatenate([batches[-2], batches[-1]])
        batches.pop()
    return batches


def train_offline(x: np.ndarray, y: np.ndarray, c: np.ndarray,
                  config: OfflineConfig = OfflineConfig(),
                  spec: model.NetworkSpec | None = None) -> OfflineResult:
    """Train extractor, classifier, and discriminator on labeled source data.

    x: (n, 6144) windows; y: (n,) class ids; c: (n,) condition ids.
    Returns trained parameters plus the frozen anchor bank and the
    prototypes computed with the final extractor.
    """
    n_classes = int(y.max()) + 1 if y.size else 0
    n_domains = int(c.max()) + 1 if c.size else 0
    _validate_labels(y, c, n_classes, n_domains)
    if spec is None:
        spec = model.NetworkSpec(n_classes=n_classes, n_domains=n_domains,
                                 input_dim=x.shape[1])
    if spec.n_classes != n_classes or spec.n_domains != n_domains:
        raise ValueError("network spec disagrees with the label ranges in the data")

    params = model.init_params(spec, seed=config.seed)
    opt = nn.AdamState()
    rng = np.random.default_rng(config.seed + 1)
    history = []

    for epoch in range(config.epochs):
        lam = config.lambda_at(epoch)
        batches = _stratified_batches(c, config.batch_size, rng)
        tot_cls = tot_dom = 0.0
        hit_cls = hit_dom = 0
        seen = 0
        for idx in batches:
            xb, yb, cb = x[idx], y[idx], c[idx]
            z, cache_f = model.extract_features(xb, params, mode="train")
            logits_y, cache_y = model.classify(z, params)
            p_y = nn.softmax(logits_y)
            q_y = _one_hot(yb, spec.n_classes)
            loss_cls = nn.cross_entropy_soft(q_y, p_y)

            logits_d, cache_d = model.discriminate(z, params, lam, mode="train")
            p_d = nn.softmax(logits_d)
            q_d = _one_hot(cb, spec.n_domains)
            loss_dom = nn.cross_entropy_soft(q_d, p_d)

            d_z_cls, grads_cls = model.classifier_backward(
                nn.softmax_cross_entropy_grad(p_y, q_y), cache_y)
            d_z_dom, grads_dom = model.discriminator_backward(
                nn.softmax_cross_entropy_grad(p_d, q_d), cache_d)
            _, grads_f = model.extractor_backward(d_z_cls + d_z_dom, cache_f)

            grads = {**grads_f, **grads_cls, **grads_dom}
            nn.adam_update(params, grads, opt, lr=config.lr)

            b = xb.shape[0]
            seen += b
            tot_cls += loss_cls * b
            tot_dom += loss_dom * b
            hit_cls += int((np.argmax(p_y, axis=1) == yb).sum())
            hit_dom += int((np.argmax(p_d, axis=1) == cb).sum())
        history.append({
            "epoch": epoch,
            "lambda": lam,
            "loss_cls": tot_cls / seen,
            "loss_dom": tot_dom / seen,
            "acc_cls": hit_cls / seen,
            "acc_dom": hit_dom / seen,
        })

    bank = protobank.build_anchor_bank(x, y, c, config.anchors_per_class,
                                       seed=config.seed)
    protos = protobank.compute_prototypes(bank, params, version=0)
    return OfflineResult(params=params, spec=spec, prototypes=protos,
                         anchor_bank=bank, history=history)


def classification_accuracy(params: dict, x: np.ndarray, y: np.ndarray,
                            batch: int = 512) -> float:
    """Eval-mode accuracy of the extractor+classifier pair."""
    hits = 0
    for s in range(0, x.shape[0], batch):
        z, _ = model.extract_features(x[s: s + batch], params, mode="eval")
        logits, _ = model.classify(z, params)
        hits += int((np.argmax(logits, axis=1) == y[s: s + batch]).sum())
    return hits / x.shape[0]
