"""DANN architecture: feature extractor, fault classifier, condition discriminator.

Parameters live in a flat ``dict[str, np.ndarray]`` keyed by tensor name:

    ext.{i}.W / ext.{i}.b            linear weights of extractor stage i
    ext.{i}.bn.{gamma,beta,mean,var} batch-norm params and running stats
    cls.{i}.W / cls.{i}.b            classifier linears (no batch norm)
    dom.{i}.W / dom.{i}.b            discriminator linears
    dom.2.bn.{gamma,beta,mean,var}   batch norm on the discriminator's third layer

Running statistics (``.bn.mean`` / ``.bn.var``) are state, not trainable
parameters; gradient dicts never contain them. The discriminator keys
(``dom.*``) are stripped from the deployed parameter set after offline
training.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import nn

NORM_FLOOR = 1e-12

CHECKPOINT_FORMAT = "faultstream-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NetworkSpec:
    """Layer widths and head sizes. Defaults match the reference architecture."""

    n_classes: int
    n_domains: int
    input_dim: int = 6144
    extractor_widths: tuple = (1024, 512, 256, 64)
    classifier_hidden: int = 32
    discriminator_widths: tuple = (128, 128, 64)
    discriminator_bn_layer: int = 2  # zero-based; BN on the third layer only

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("need at least 2 fault classes")
        if self.n_domains < 2:
            raise ValueError("need at least 2 source conditions")
        if not self.extractor_widths:
            raise ValueError("extractor needs at least one stage")
        if not 0 <= self.discriminator_bn_layer < len(self.discriminator_widths):
            raise ValueError("discriminator batch-norm layer index out of range")

    @property
    def latent_dim(self) -> int:
        return self.extractor_widths[-1]

    def to_dict(self) -> dict:
        return {
            "n_classes": self.n_classes,
            "n_domains": self.n_domains,
            "input_dim": self.input_dim,
            "extractor_widths": list(self.extractor_widths),
            "classifier_hidden": self.classifier_hidden,
            "discriminator_widths": list(self.discriminator_widths),
            "discriminator_bn_layer": self.discriminator_bn_layer,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(
            n_classes=int(d["n_classes"]),
            n_domains=int(d["n_domains"]),
            input_dim=int(d["input_dim"]),
            extractor_widths=tuple(d["extractor_widths"]),
            classifier_hidden=int(d["classifier_hidden"]),
            discriminator_widths=tuple(d["discriminator_widths"]),
            discriminator_bn_layer=int(d["discriminator_bn_layer"]),
        )


def _kaiming_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_params(spec: NetworkSpec, seed: int) -> dict:
    """Kaiming-uniform linear weights, zero biases, identity batch norms.

    Tensors are drawn in a fixed key order so a seed fully determines the
    initialization.
    """
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}

    dims = [spec.input_dim, *spec.extractor_widths]
    for i in range(len(spec.extractor_widths)):
        din, dout = dims[i], dims[i + 1]
        params[f"ext.{i}.W"] = _kaiming_uniform(rng, din, dout)
        params[f"ext.{i}.b"] = np.zeros(dout)
        params[f"ext.{i}.bn.gamma"] = np.ones(dout)
        params[f"ext.{i}.bn.beta"] = np.zeros(dout)
        params[f"ext.{i}.bn.mean"] = np.zeros(dout)
        params[f"ext.{i}.bn.var"] = np.ones(dout)

    latent = spec.latent_dim
    params["cls.0.W"] = _kaiming_uniform(rng, latent, spec.classifier_hidden)
    params["cls.0.b"] = np.zeros(spec.classifier_hidden)
    params["cls.1.W"] = _kaiming_uniform(rng, spec.classifier_hidden, spec.n_classes)
    params["cls.1.b"] = np.zeros(spec.n_classes)

    ddims = [latent, *spec.discriminator_widths, spec.n_domains]
    for i in range(len(ddims) - 1):
        din, dout = ddims[i], ddims[i + 1]
        params[f"dom.{i}.W"] = _kaiming_uniform(rng, din, dout)
        params[f"dom.{i}.b"] = np.zeros(dout)
        if i == spec.discriminator_bn_layer:
            params[f"dom.{i}.bn.gamma"] = np.ones(dout)
            params[f"dom.{i}.bn.beta"] = np.zeros(dout)
            params[f"dom.{i}.bn.mean"] = np.zeros(dout)
            params[f"dom.{i}.bn.var"] = np.ones(dout)
    return params


def _check_mode(mode: str) -> bool:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    return mode == "train"


def _n_stages(params: dict, prefix: str) -> int:
    n = 0
    while f"{prefix}.{n}.W" in params:
        n += 1
    return n


def extract_features(x: np.ndarray, params: dict, mode: str = "eval"):
    """Run the extractor: per stage, linear -> batch norm -> ReLU.

    Returns ``(z, cache)``; the latent is the post-BN+ReLU output of the
    final stage (non-negative by construction). Train mode mutates the
    running batch-norm statistics.
    """
    train = _check_mode(mode)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params["ext.0.W"].shape[0]:
        raise ValueError(
            f"extractor expects input of shape (B, {params['ext.0.W'].shape[0]}), got {x.shape}"
        )
    h = x
    cache = []
    for i in range(_n_stages(params, "ext")):
        h, lin_c = nn.linear_forward(h, params[f"ext.{i}.W"], params[f"ext.{i}.b"])
        h, bn_c = nn.batchnorm_forward(
            h,
            params[f"ext.{i}.bn.gamma"],
            params[f"ext.{i}.bn.beta"],
            params[f"ext.{i}.bn.mean"],
            params[f"ext.{i}.bn.var"],
            train,
        )
        h, relu_c = nn.relu_forward(h)
        cache.append((lin_c, bn_c, relu_c))
    return h, cache


def extractor_backward(d_z: np.ndarray, cache):
    """Backpropagate through the extractor; returns (dx, grads by key)."""
    grads: dict[str, np.ndarray] = {}
    d = d_z
    for i in reversed(range(len(cache))):
        lin_c, bn_c, relu_c = cache[i]
        d = nn.relu_backward(d, relu_c)
        d, dgamma, dbeta = nn.batchnorm_backward(d, bn_c)
        grads[f"ext.{i}.bn.gamma"] = dgamma
        grads[f"ext.{i}.bn.beta"] = dbeta
        d, dW, db = nn.linear_backward(d, lin_c)
        grads[f"ext.{i}.W"] = dW
        grads[f"ext.{i}.b"] = db
    return d, grads


def classify(z: np.ndarray, params: dict):
    """Classifier head: linear -> ReLU -> linear. Returns raw logits."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != params["cls.0.W"].shape[0]:
        raise ValueError(
            f"classifier expects latent of shape (B, {params['cls.0.W'].shape[0]}), got {z.shape}"
        )
    h, lin0 = nn.linear_forward(z, params["cls.0.W"], params["cls.0.b"])
    h, relu_c = nn.relu_forward(h)
    logits, lin1 = nn.linear_forward(h, params["cls.1.W"], params["cls.1.b"])
    return logits, (lin0, relu_c, lin1)


def classifier_backward(d_logits: np.ndarray, cache):
    lin0, relu_c, lin1 = cache
    grads: dict[str, np.ndarray] = {}
    d, grads["cls.1.W"], grads["cls.1.b"] = nn.linear_backward(d_logits, lin1)
    d = nn.relu_backward(d, relu_c)
    d, grads["cls.0.W"], grads["cls.0.b"] = nn.linear_backward(d, lin0)
    return d, grads


def discriminate(z: np.ndarray, params: dict, lam: float, mode: str = "train"):
    """Condition discriminator behind a gradient-reversal layer.

    Forward is plain inference (the reversal is an identity map and ignores
    lam); the backward pass scales the gradient flowing back into the latent
    by ``-lam``. ReLU follows every hidden layer; BN sits on the configured
    layer only, between its linear and ReLU.
    """
    train = _check_mode(mode)
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != params["dom.0.W"].shape[0]:
        raise ValueError(
            f"discriminator expects latent of shape (B, {params['dom.0.W'].shape[0]}), got {z.shape}"
        )
    h = nn.grad_reverse_forward(z)
    n = _n_stages(params, "dom")
    stages = []
    for i in range(n):
        h, lin_c = nn.linear_forward(h, params[f"dom.{i}.W"], params[f"dom.{i}.b"])
        bn_c = None
        relu_c = None
        if i < n - 1:  # hidden layers get activations; the last emits logits
            if f"dom.{i}.bn.gamma" in params:
                h, bn_c = nn.batchnorm_forward(
                    h,
                    params[f"dom.{i}.bn.gamma"],
                    params[f"dom.{i}.bn.beta"],
                    params[f"dom.{i}.bn.mean"],
                    params[f"dom.{i}.bn.var"],
                    train,
                )
            h, relu_c = nn.relu_forward(h)
        stages.append((lin_c, bn_c, relu_c))
    return h, (stages, lam)


def discriminator_backward(d_logits: np.ndarray, cache):
    """Backward through the discriminator and its reversal layer.

    Returns ``(d_z, grads)`` where d_z is already reversed (scaled by -lam),
    ready to be added to the extractor's upstream gradient.
    """
    stages, lam = cache
    grads: dict[str, np.ndarray] = {}
    d = d_logits
    for i in reversed(range(len(stages))):
        lin_c, bn_c, relu_c = stages[i]
        if relu_c is not None:
            d = nn.relu_backward(d, relu_c)
        if bn_c is not None:
            d, dgamma, dbeta = nn.batchnorm_backward(d, bn_c)
            grads[f"dom.{i}.bn.gamma"] = dgamma
            grads[f"dom.{i}.bn.beta"] = dbeta
        d, dW, db = nn.linear_backward(d, lin_c)
        grads[f"dom.{i}.W"] = dW
        grads[f"dom.{i}.b"] = db
    return nn.grad_reverse_backward(d, lam), grads


# --- latent normalization ---------------------------------------------------

class DegenerateCounter:
    """Counts near-zero vectors handed to the normalizers (single-writer)."""

    def __init__(self):
        self.count = 0

    def reset(self):
        self.count = 0


degenerate_normalizations = DegenerateCounter()


def normalize_latent(z: np.ndarray) -> np.ndarray:
    """L2-normalize one latent vector: ``z / max(||z||, 1e-12)``.

    A vector with norm below the floor is returned unchanged and counted as
    degenerate instead of being blown up by the division.
    """
    z = np.asarray(z, dtype=np.float64)
    norm = float(np.linalg.norm(z))
    if norm < NORM_FLOOR:
        degenerate_normalizations.count += 1
        return z.copy()
    return z / norm


def normalize_rows(z: np.ndarray) -> np.ndarray:
    """Row-wise L2 normalization with the same degenerate handling."""
    z = np.asarray(z, dtype=np.float64)
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    degenerate = norms[:, 0] < NORM_FLOOR
    n_bad = int(degenerate.sum())
    if n_bad:
        degenerate_normalizations.count += n_bad
    safe = np.where(degenerate[:, None], 1.0, norms)
    out = z / safe
    return out


# --- parameter plumbing ------------------------------------------------------

def clone_params(params: dict) -> dict:
    return {k: v.copy() for k, v in params.items()}


def params_equal(a: dict, b: dict) -> bool:
    """Bit-exact equality of two parameter sets (keys and bytes)."""
    if a.keys() != b.keys():
        return False
    return all(a[k].shape == b[k].shape and a[k].tobytes() == b[k].tobytes() for k in a)


def trainable_keys(params: dict, prefix: str = "") -> list:
    """Keys the optimizer may touch: everything except running BN statistics."""
    return [
        k
        for k in params
        if k.startswith(prefix) and not (k.endswith(".bn.mean") or k.endswith(".bn.var"))
    ]


def deployment_params(params: dict) -> dict:
    """Copy of the parameter set with every discriminator tensor removed."""
    return {k: v.copy() for k, v in params.items() if not k.startswith("dom.")}


# --- checkpoint container ----------------------------------------------------

@dataclass
class Checkpoint:
    params: dict
    spec: NetworkSpec
    prototypes: object = None  # protobank.PrototypeSet
    anchor_bank: object = None  # protobank.AnchorBank
    meta: dict = field(default_factory=dict)


def save_checkpoint(path, params: dict, spec: NetworkSpec, prototypes=None,
                    anchor_bank=None, meta: dict | None = None) -> None:
    """Write a versioned .npz container with named tensors and a JSON header.

    Layout: ``meta`` holds the JSON header (format name, version, network
    spec, caller metadata); each parameter is stored under ``param/<name>``;
    prototypes under ``proto/*``; anchor inputs and their source indices
    under ``anchor/<k>/x`` and ``anchor/<k>/idx``.
    """
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "spec": spec.to_dict(),
        "meta": meta or {},
    }
    arrays: dict[str, np.ndarray] = {"meta": np.array(json.dumps(header))}
    for k, v in params.items():
        arrays[f"param/{k}"] = v
    if prototypes is not None:
        arrays["proto/mu"] = prototypes.mu
        arrays["proto/mu_bar"] = prototypes.mu_bar
        arrays["proto/version"] = np.array(prototypes.version)
    if anchor_bank is not None:
        for k in range(anchor_bank.n_classes):
            arrays[f"anchor/{k}/x"] = anchor_bank.inputs[k]
            arrays[f"anchor/{k}/idx"] = anchor_bank.source_indices[k]
    np.savez(path, **arrays)


def load_checkpoint(path) -> Checkpoint:
    from .protobank import AnchorBank, PrototypeSet  # lazy: avoids import cycle

    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["meta"]))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
        spec = NetworkSpec.from_dict(header["spec"])
        params = {
            k[len("param/"):]: data[k].copy() for k in data.files if k.startswith("param/")
        }
        prototypes = None
        if "proto/mu" in data.files:
            prototypes = PrototypeSet(
                mu=data["proto/mu"].copy(),
                mu_bar=data["proto/mu_bar"].copy(),
                version=int(data["proto/version"]),
            )
        bank = None
        ks = sorted(
            int(k.split("/")[1]) for k in data.files
            if k.startswith("anchor/") and k.endswith("/x")
        )
        if ks:
            bank = AnchorBank(
                inputs=[data[f"anchor/{k}/x"].copy() for k in ks],
                source_indices=[data[f"anchor/{k}/idx"].copy() for k in ks],
            )
    return Checkpoint(params=params, spec=spec, prototypes=prototypes,
                      anchor_bank=bank, meta=header.get("meta", {}))
