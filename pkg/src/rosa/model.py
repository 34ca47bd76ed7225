"""Desk-scale pre-norm decoder stack with dense and sparsified forward modes.

Weights follow the ``Y = X @ W.T`` convention: every projection ``W`` has
shape ``(d_out, d_in)``. The embedding is ``(vocab, hidden)`` and the head is
``(hidden, vocab)`` so that ``logits = rmsnorm(x) @ head``.

Attention is causal softmax attention with grouped key/value heads and no
positional encoding; positions enter only through the causal mask.
"""

from dataclasses import dataclass, field, replace
import enum
import math

import numpy as np

from rosa.errors import InputError
from rosa.numeric import rmsnorm
from rosa.sparsify import SITES, SparsityPlan, ThresholdTable, magnitude_rows, topk_rows


class Mode(str, enum.Enum):
    DENSE = "dense"
    LAROSA = "larosa"
    TEAL = "teal"
    CATS = "cats"


@dataclass(frozen=True)
class ModelConfig:
    hidden: int = 64
    layers: int = 4
    heads: int = 4
    kv_groups: int = 2
    mlp_ratio: float = 2.6875
    vocab: int = 256
    norm_eps: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if min(self.hidden, self.layers, self.heads, self.kv_groups, self.vocab) < 1:
            raise InputError(f"all model dimensions must be positive: {self}")
        if self.hidden % self.heads:
            raise InputError(f"hidden={self.hidden} not divisible by heads={self.heads}")
        if self.heads % self.kv_groups:
            raise InputError(f"kv_groups={self.kv_groups} must divide heads={self.heads}")
        if self.mlp_ratio <= 0 or self.intermediate < 1:
            raise InputError(f"invalid MLP ratio {self.mlp_ratio}")

    @property
    def head_dim(self):
        return self.hidden // self.heads

    @property
    def kv_dim(self):
        return self.kv_groups * self.head_dim

    @property
    def intermediate(self):
        return int(math.floor(self.mlp_ratio * self.hidden + 0.5))

    def site_dims(self):
        return {"h1": self.hidden, "h2": self.hidden, "h3": self.hidden, "h4": self.intermediate}

    def to_dict(self):
        return {
            "hidden": self.hidden,
            "layers": self.layers,
            "heads": self.heads,
            "kv_groups": self.kv_groups,
            "mlp_ratio": self.mlp_ratio,
            "vocab": self.vocab,
            "norm_eps": self.norm_eps,
            "seed": self.seed,
        }


@dataclass
class LayerWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w_up: np.ndarray
    w_gate: np.ndarray
    w_down: np.ndarray
    attn_norm: np.ndarray
    mlp_norm: np.ndarray

    MATRICES = ("wq", "wk", "wv", "wo", "w_up", "w_gate", "w_down")
    GAINS = ("attn_norm", "mlp_norm")

    @staticmethod
    def expected_shapes(cfg):
        d, kv, i = cfg.hidden, cfg.kv_dim, cfg.intermediate
        return {
            "wq": (d, d), "wk": (kv, d), "wv": (kv, d), "wo": (d, d),
            "w_up": (i, d), "w_gate": (i, d), "w_down": (d, i),
            "attn_norm": (d,), "mlp_norm": (d,),
        }

    def validate(self, cfg):
        for name, shape in self.expected_shapes(cfg).items():
            got = getattr(self, name).shape
            if got != shape:
                raise InputError(f"{name} has shape {got}, expected {shape}")

    def copy(self):
        return LayerWeights(**{n: getattr(self, n).copy() for n in self.MATRICES + self.GAINS})


@dataclass
class Model:
    config: ModelConfig
    embed: np.ndarray
    layers: list
    final_norm: np.ndarray
    head: np.ndarray

    def __post_init__(self):
        cfg = self.config
        if self.embed.shape != (cfg.vocab, cfg.hidden):
            raise InputError(f"embed has shape {self.embed.shape}")
        if self.head.shape != (cfg.hidden, cfg.vocab):
            raise InputError(f"head has shape {self.head.shape}")
        if self.final_norm.shape != (cfg.hidden,):
            raise InputError(f"final_norm has shape {self.final_norm.shape}")
        if len(self.layers) != cfg.layers:
            raise InputError(f"expected {cfg.layers} layers, got {len(self.layers)}")
        for lw in self.layers:
            lw.validate(cfg)

    @property
    def adapters(self):
        return []


def synth_model(config, seed=None):
    """Gaussian model with weights drawn from ``N(0, 1/D)`` (std ``1/sqrt(D)``).

    Generator: ``numpy.random.Generator(PCG64(seed))``, tensors drawn in the
    fixed order embed, per-layer (wq, wk, wv, wo, w_up, w_gate, w_down,
    attn_norm, mlp_norm), final_norm, head. Norm gains are ``1 + 0.1*z`` so the
    gain-folding path is exercised.
    """
    if seed is not None:
        config = replace(config, seed=seed)
    rng = np.random.Generator(np.random.PCG64(config.seed))
    d = config.hidden
    std = 1.0 / math.sqrt(d)
    embed = rng.standard_normal((config.vocab, d))
    layers = []
    for _ in range(config.layers):
        proto = LayerWeights.expected_shapes(config)
        tensors = {}
        for name in LayerWeights.MATRICES:
            tensors[name] = rng.standard_normal(proto[name]) * std
        for name in LayerWeights.GAINS:
            tensors[name] = 1.0 + 0.1 * rng.standard_normal(d)
        layers.append(LayerWeights(**tensors))
    final_norm = 1.0 + 0.1 * rng.standard_normal(d)
    head = rng.standard_normal((d, config.vocab)) * std
    return Model(config, embed, layers, final_norm, head)


def synth_tokens(n_seqs, length, vocab, seed, exponent=1.1, shuffle_seed=None):
    """Zipf-distributed synthetic token streams.

    Token ranks follow ``P(r) ~ r**-exponent``; the rank-to-id map is a
    permutation drawn from ``shuffle_seed`` (defaults to 0), so two calls with
    different ``shuffle_seed`` or ``exponent`` yield different distributions.
    """
    if n_seqs < 1 or length < 1:
        raise InputError("need at least one sequence of one token")
    ranks = np.arange(1, vocab + 1, dtype=np.float64)
    probs = ranks ** (-exponent)
    probs /= probs.sum()
    perm = np.random.default_rng(0 if shuffle_seed is None else shuffle_seed).permutation(vocab)
    rng = np.random.default_rng(seed)
    draws = rng.choice(vocab, size=(n_seqs, length), p=probs)
    return [perm[row] for row in draws]


def _silu(x):
    return x / (1.0 + np.exp(-x))


def causal_attention(q, k, v, cfg):
    n = q.shape[0]
    hd = cfg.head_dim
    per_group = cfg.heads // cfg.kv_groups
    q = q.reshape(n, cfg.heads, hd).transpose(1, 0, 2)
    k = k.reshape(n, cfg.kv_groups, hd).transpose(1, 0, 2)
    v = v.reshape(n, cfg.kv_groups, hd).transpose(1, 0, 2)
    k = np.repeat(k, per_group, axis=0)
    v = np.repeat(v, per_group, axis=0)
    scores = q @ k.transpose(0, 2, 1) / math.sqrt(hd)
    mask = np.triu(np.ones((n, n), dtype=bool), 1)
    scores = np.where(mask, -np.inf, scores)
    scores -= scores.max(axis=-1, keepdims=True)
    probs = np.exp(scores)
    probs /= probs.sum(axis=-1, keepdims=True)
    out = probs @ v
    return out.transpose(1, 0, 2).reshape(n, cfg.hidden)


class SiteSparsifier:
    """Applies the configured sparsification to one site's activations."""

    def __init__(self, mode, sparsity=None, config=None):
        self.mode = Mode(mode)
        self.sparsity = sparsity
        if self.mode is Mode.LAROSA:
            if not isinstance(sparsity, SparsityPlan):
                raise InputError("larosa mode needs a SparsityPlan")
            self.k = sparsity.k_per_site(config.site_dims())
        elif self.mode in (Mode.TEAL, Mode.CATS):
            if not isinstance(sparsity, ThresholdTable):
                raise InputError(f"{self.mode.value} mode needs a ThresholdTable")

    def __call__(self, h, layer, site):
        if self.mode is Mode.DENSE:
            return h
        if self.mode is Mode.LAROSA:
            return topk_rows(h, self.k[site])
        if self.mode is Mode.CATS and site != "h4":
            return h
        eps = self.sparsity.get(layer, site)
        if eps is None:
            raise InputError(f"no threshold for layer {layer} site {site}")
        return magnitude_rows(h, eps)


def layer_forward(x, lw, config, sparsify=None, layer=0, adapter=None, record=None):
    """One decoder layer on a single sequence ``x`` of shape ``(tokens, hidden)``.

    ``sparsify(h, layer, site)`` transforms each site input before its
    projections. With an ``adapter`` the residual output is multiplied by it.
    ``record``, if given, is a dict collecting ``(input, sparsified)`` pairs
    per ``(layer, site)``.
    """
    if x.ndim != 2 or x.shape[1] != config.hidden:
        raise InputError(f"state has shape {x.shape}, expected (*, {config.hidden})")
    if sparsify is None:
        sparsify = SiteSparsifier(Mode.DENSE)

    def site(h, name):
        s = sparsify(h, layer, name)
        if record is not None:
            record.setdefault((layer, name), []).append((h, s))
        return s

    h1 = site(rmsnorm(x, lw.attn_norm, config.norm_eps), "h1")
    attn = causal_attention(h1 @ lw.wq.T, h1 @ lw.wk.T, h1 @ lw.wv.T, config)
    h2 = site(attn, "h2")
    x = x + h2 @ lw.wo.T
    h3 = site(rmsnorm(x, lw.mlp_norm, config.norm_eps), "h3")
    h4 = site(_silu(h3 @ lw.w_gate.T) * (h3 @ lw.w_up.T), "h4")
    x = x + h4 @ lw.w_down.T
    if adapter is not None:
        x = x @ adapter
    return x


def forward(model, tokens, mode=Mode.DENSE, sparsity=None, record=None, layer_inputs=None):
    """Logits for one token sequence.

    ``layer_inputs``, if given, is a list receiving each layer's residual input.
    """
    cfg = model.config
    tokens = np.asarray(tokens)
    if tokens.ndim != 1 or tokens.size == 0:
        raise InputError("token sequence must be a non-empty 1-D array")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab:
        raise InputError("token id out of range")
    sparsify = mode if isinstance(mode, SiteSparsifier) else SiteSparsifier(mode, sparsity, cfg)
    adapters = model.adapters
    x = model.embed[tokens]
    for l, lw in enumerate(model.layers):
        if layer_inputs is not None:
            layer_inputs.append(x)
        adapter = adapters[l] if l < len(adapters) else None
        x = layer_forward(x, lw, cfg, sparsify, layer=l, adapter=adapter, record=record)
    return rmsnorm(x, model.final_norm, cfg.norm_eps) @ model.head


def forward_batch(model, seqs, mode=Mode.DENSE, sparsity=None, record=None):
    sparsify = mode if isinstance(mode, SiteSparsifier) else SiteSparsifier(mode, sparsity, model.config)
    return [forward(model, s, sparsify, record=record) for s in seqs]


def calibration_pass(model, seqs):
    """Per-layer covariance accumulators of the residual input of every layer."""
    from rosa.rotation import CovarianceAccumulator

    if not seqs:
        raise InputError("calibration needs at least one sequence")
    accs = [CovarianceAccumulator(model.config.hidden) for _ in model.layers]
    for seq in seqs:
        inputs = []
        forward(model, seq, Mode.DENSE, layer_inputs=inputs)
        for acc, x in zip(accs, inputs):
            acc.accumulate(x)
    return accs


def calibrate_thresholds(model, seqs, p, sites=SITES):
    """Magnitude cutoffs per (layer, site) from a dense pass over ``seqs``."""
    from rosa.sparsify import calibrate_magnitude_threshold

    if not seqs:
        raise InputError("calibration needs at least one sequence")
    record = {}
    forward_batch(model, seqs, Mode.DENSE, record=record)
    eps = {}
    for (layer, site), pairs in record.items():
        if site in sites:
            eps[(layer, site)] = calibrate_magnitude_threshold([h for h, _ in pairs], p)
    return ThresholdTable(p=p, eps=eps)


@dataclass
class OutputError:
    mean: float
    max: float
    per_token: np.ndarray = field(repr=False)

    def to_dict(self):
        return {"mean": self.mean, "max": self.max}


def model_output_error(sparse_out, dense_out):
    """Per-token relative L2 error ``||dense - sparse|| / ||dense||`` with mean and max.

    Accepts single arrays or lists of per-sequence arrays.
    """
    if isinstance(sparse_out, (list, tuple)):
        if len(sparse_out) != len(dense_out):
            raise InputError("different number of sequences")
        sparse_out = np.concatenate(sparse_out, axis=0)
        dense_out = np.concatenate(dense_out, axis=0)
    sparse_out = np.asarray(sparse_out, dtype=np.float64)
    dense_out = np.asarray(dense_out, dtype=np.float64)
    if sparse_out.shape != dense_out.shape:
        raise InputError(f"shape mismatch {sparse_out.shape} vs {dense_out.shape}")
    if dense_out.ndim == 1:
        dense_out, sparse_out = dense_out[None], sparse_out[None]
    num = np.linalg.norm(dense_out - sparse_out, axis=-1)
    den = np.linalg.norm(dense_out, axis=-1)
    per_token = num / den
    return OutputError(float(per_token.mean()), float(per_token.max()), per_token)
