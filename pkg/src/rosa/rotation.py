"""Layerwise PCA rotations and their absorption into model weights.

Each layer ``l`` gets an orthogonal ``Q_l`` whose columns are the eigenvectors
of the (uncentered) second-moment matrix of that layer's residual input.
Inside layer ``l`` the residual stream is carried in the rotated basis
``x @ Q_l``; between layers the adapter ``Q_l^T Q_{l+1}`` switches bases.
"""

from dataclasses import dataclass, field

import numpy as np

from rosa.errors import InputError
from rosa.model import LayerWeights, Model
from rosa.numeric import as_matrix, jacobi_eigh, orthogonality_error

ORTHO_TOL = 1e-8


class CovarianceAccumulator:
    """Running sum of per-sequence ``X^T X`` (feature-by-feature), averaged over sequences."""

    def __init__(self, dim):
        self.dim = int(dim)
        self.sum = np.zeros((self.dim, self.dim))
        self.sequences_seen = 0

    def accumulate(self, x):
        x = as_matrix(x, "activation batch")
        if x.shape[1] != self.dim:
            raise InputError(f"batch has {x.shape[1]} features, accumulator expects {self.dim}")
        gram = x.T @ x
        # keep the running sum exactly symmetric
        self.sum += 0.5 * (gram + gram.T)
        self.sequences_seen += 1
        return self

    def merge(self, other):
        """Fold another accumulator in; merge in sequence-index order for reproducible sums."""
        if other.dim != self.dim:
            raise InputError("accumulator dimensions differ")
        self.sum += other.sum
        self.sequences_seen += other.sequences_seen
        return self

    def finalize(self):
        if self.sequences_seen < 1:
            raise InputError("no sequences accumulated")
        return self.sum / self.sequences_seen


@dataclass(frozen=True)
class RotationMatrix:
    q: np.ndarray
    eigvals: np.ndarray = None

    def __post_init__(self):
        q = as_matrix(self.q, "Q")
        if q.shape[0] != q.shape[1]:
            raise InputError(f"rotation must be square, got {q.shape}")
        err = orthogonality_error(q)
        if err > ORTHO_TOL:
            raise InputError(f"rotation is not orthogonal (||Q^T Q - I||_F = {err:.2e})")

    @property
    def dim(self):
        return self.q.shape[0]

    @classmethod
    def identity(cls, dim):
        return cls(np.eye(dim), np.ones(dim))


def build_rotation(cov):
    """PCA rotation: eigenvectors of ``cov`` as columns, by descending eigenvalue.

    Slightly negative eigenvalues (down to ``-1e-8 * trace``) are clamped to 0;
    rank-deficient inputs still yield a full orthonormal basis.
    """
    cov = as_matrix(cov, "covariance")
    eigvals, eigvecs = jacobi_eigh(cov)
    floor = -1e-8 * max(float(np.trace(cov)), 0.0)
    if eigvals.size and eigvals[-1] < floor:
        raise InputError(f"covariance is not positive semidefinite (min eigenvalue {eigvals[-1]:.3e})")
    return RotationMatrix(eigvecs, np.maximum(eigvals, 0.0))


def residual_adapter(q_l, q_next):
    """``Q_l^T Q_{l+1}``: maps the layer-``l`` basis to the layer-``l+1`` basis."""
    a = q_l.q if isinstance(q_l, RotationMatrix) else as_matrix(q_l)
    b = q_next.q if isinstance(q_next, RotationMatrix) else as_matrix(q_next)
    if a.shape != b.shape:
        raise InputError(f"rotation shapes differ: {a.shape} vs {b.shape}")
    return a.T @ b


def fold_norm_gains(model):
    """Move RMSNorm gains into the following projections and set the gains to one."""
    layers = []
    for lw in model.layers:
        g_attn = lw.attn_norm[None, :]
        g_mlp = lw.mlp_norm[None, :]
        layers.append(LayerWeights(
            wq=lw.wq * g_attn, wk=lw.wk * g_attn, wv=lw.wv * g_attn, wo=lw.wo.copy(),
            w_up=lw.w_up * g_mlp, w_gate=lw.w_gate * g_mlp, w_down=lw.w_down.copy(),
            attn_norm=np.ones_like(lw.attn_norm), mlp_norm=np.ones_like(lw.mlp_norm),
        ))
    return Model(
        model.config, model.embed.copy(), layers,
        np.ones_like(model.final_norm), model.final_norm[:, None] * model.head,
    )


@dataclass
class RotatedModel(Model):
    """Model with rotations absorbed into its weights plus inter-layer adapters."""

    rotations: list = field(default_factory=list)
    residual_adapters: list = field(default_factory=list)
    embed_rotation_applied: bool = False
    head_rotation_applied: bool = False
    gains_folded: bool = False

    @property
    def adapters(self):
        return self.residual_adapters


def merge_rotations(model, rotations):
    """Absorb one rotation per layer into ``model``.

    After folding the norm gains, for each layer ``l``:

    * ``Wq, Wk, Wv, W_up, W_gate`` become ``W @ Q_l`` (they read the rotated stream);
    * ``Wo, W_down`` become ``Q_l^T @ W`` (they write into the rotated stream);
    * the embedding becomes ``E @ Q_0`` and the head ``Q_{L-1}^T @ H``.

    The ``L - 1`` adapters ``Q_l^T Q_{l+1}`` follow each layer but the last.
    """
    cfg = model.config
    if len(rotations) != cfg.layers:
        raise InputError(f"need {cfg.layers} rotations, got {len(rotations)}")
    qs = []
    for r in rotations:
        q = r.q if isinstance(r, RotationMatrix) else as_matrix(r)
        if q.shape != (cfg.hidden, cfg.hidden):
            raise InputError(f"rotation shape {q.shape} does not match hidden size {cfg.hidden}")
        qs.append(q)

    folded = fold_norm_gains(model)
    layers = []
    for lw, q in zip(folded.layers, qs):
        layers.append(LayerWeights(
            wq=lw.wq @ q, wk=lw.wk @ q, wv=lw.wv @ q, wo=q.T @ lw.wo,
            w_up=lw.w_up @ q, w_gate=lw.w_gate @ q, w_down=q.T @ lw.w_down,
            attn_norm=lw.attn_norm, mlp_norm=lw.mlp_norm,
        ))
    adapters = [residual_adapter(qs[l], qs[l + 1]) for l in range(len(qs) - 1)]
    return RotatedModel(
        config=cfg,
        embed=folded.embed @ qs[0],
        layers=layers,
        final_norm=folded.final_norm,
        head=qs[-1].T @ folded.head,
        rotations=[r if isinstance(r, RotationMatrix) else RotationMatrix(r) for r in rotations],
        residual_adapters=adapters,
        embed_rotation_applied=True,
        head_rotation_applied=True,
        gains_folded=True,
    )


def layer_rotations(model, seqs):
    """One PCA rotation per layer from a single dense calibration pass."""
    from rosa.model import calibration_pass

    return [build_rotation(acc.finalize()) for acc in calibration_pass(model, seqs)]


def rotate_model(model, seqs):
    """Calibrate rotations on ``seqs`` and return the merged model."""
    return merge_rotations(model, layer_rotations(model, seqs))
