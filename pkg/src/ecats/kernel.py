"""Monte-Carlo STL kernel over mu0, Gram matrices and kernel PCA embeddings.

Two formulae are compared through their robustness on a fixed sample of
mu0 trajectories (the *basis*): the kernel is the sample mean of the
product of robustness values, and the normalized kernel its cosine.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .stl import Formula, max_var, robustness_signal
from .trajectory import Mu0Params, Trajectory, sample_mu0_batch

DEFAULT_CLAMP = 200.0
DEFAULT_BASIS_SIZE = 5000
EIG_FLOOR = 1e-10


class KernelError(ValueError):
    pass


@dataclass
class SignatureBasis:
    """Monte-Carlo sample realizing the integral over mu0.

    ``values`` has shape (B, T, n). ``offset`` and ``scale`` record an affine
    map applied to raw mu0 draws so the basis can live on a dataset's scale.
    """
    values: np.ndarray
    seed: int
    params: Mu0Params = field(default_factory=Mu0Params)
    offset: tuple = (0.0,)
    scale: tuple = (1.0,)

    @classmethod
    def sample(cls, size: int, params: Mu0Params | None = None, seed: int = 0,
               offset=None, scale=None) -> "SignatureBasis":
        if size < 1:
            raise KernelError("basis needs at least one trajectory")
        params = params or Mu0Params()
        raw = sample_mu0_batch(params, seed, size)
        off = np.zeros(params.n_dims) if offset is None else np.broadcast_to(np.asarray(offset, float), (params.n_dims,))
        sc = np.ones(params.n_dims) if scale is None else np.broadcast_to(np.asarray(scale, float), (params.n_dims,))
        return cls(off + sc * raw, seed, params, tuple(map(float, off)), tuple(map(float, sc)))

    @property
    def size(self) -> int:
        return self.values.shape[0]

    @property
    def n_dims(self) -> int:
        return self.values.shape[2]

    @property
    def trajectories(self) -> list[Trajectory]:
        return [Trajectory(v, dt=self.params.delta, t0=self.params.a) for v in self.values]

    def metadata(self) -> dict:
        return {"seed": self.seed, "B": self.size, "T": int(self.values.shape[1]),
                "mu0": asdict(self.params), "offset": list(self.offset), "scale": list(self.scale)}


def robustness_vector(phi: Formula, basis: SignatureBasis, clamp: float = DEFAULT_CLAMP,
                      cache: dict | None = None) -> np.ndarray:
    """Robustness of ``phi`` at t=0 on every basis trajectory, clipped to [-clamp, clamp]."""
    if max_var(phi) >= basis.n_dims:
        raise KernelError(f"formula uses x_{max_var(phi)} but the basis has {basis.n_dims} dimensions")
    r = robustness_signal(phi, basis.values, cache)[:, 0]
    return np.clip(r, -clamp, clamp)


def robustness_matrix(formulas, basis: SignatureBasis, clamp: float = DEFAULT_CLAMP) -> np.ndarray:
    """(C, B) matrix of clipped robustness vectors."""
    return np.stack([robustness_vector(phi, basis, clamp) for phi in formulas])


def _cosine_from_raw(K: np.ndarray) -> np.ndarray:
    diag = np.diag(K).copy()
    if np.any(diag <= 0):
        bad = np.flatnonzero(diag <= 0).tolist()
        raise KernelError(f"zero self-kernel (constant-zero robustness) for formulae {bad}; cannot normalize")
    # sqrt(a*a) == a exactly, which keeps k(phi, not phi) at exactly -1
    out = K / np.sqrt(diag[:, None] * diag[None, :])
    np.fill_diagonal(out, 1.0)
    return out


def kernel_from_vectors(r1: np.ndarray, r2: np.ndarray, normalized: bool = True) -> float:
    B = r1.shape[0]
    k12 = float(r1 @ r2) / B
    if not normalized:
        return k12
    k11 = float(r1 @ r1) / B
    k22 = float(r2 @ r2) / B
    if k11 <= 0 or k22 <= 0:
        raise KernelError("zero self-kernel (constant-zero robustness); cannot normalize")
    return k12 / np.sqrt(k11 * k22)


def kernel(phi: Formula, psi: Formula, basis: SignatureBasis, normalized: bool = True,
           clamp: float = DEFAULT_CLAMP) -> float:
    """Monte-Carlo estimate of the STL kernel between two formulae."""
    return kernel_from_vectors(robustness_vector(phi, basis, clamp), robustness_vector(psi, basis, clamp), normalized)


@dataclass
class GramMatrix:
    matrix: np.ndarray
    normalized: bool
    formulas: list = field(default_factory=list)


def gram_from_vectors(R: np.ndarray, normalized: bool = True) -> np.ndarray:
    B = R.shape[1]
    K = (R @ R.T) / B
    # exact symmetry: mirror the upper triangle
    K = np.triu(K) + np.triu(K, 1).T
    return _cosine_from_raw(K) if normalized else K


def gram(formulas, basis: SignatureBasis, normalized: bool = True, clamp: float = DEFAULT_CLAMP) -> GramMatrix:
    R = robustness_matrix(list(formulas), basis, clamp)
    return GramMatrix(gram_from_vectors(R, normalized), normalized, list(formulas))


@dataclass
class KpcaModel:
    eigvecs: np.ndarray       # (C, d)
    eigvals: np.ndarray       # (d,), non-increasing
    spectrum: np.ndarray      # all eigenvalues of the centered Gram, non-increasing
    col_means: np.ndarray     # (C,) column means of the uncentered Gram
    grand_mean: float
    train_robustness: np.ndarray | None = None  # (C, B); needed for out-of-sample embedding
    clamp: float = DEFAULT_CLAMP

    @property
    def embed_dim(self) -> int:
        return self.eigvals.shape[0]

    @property
    def rank(self) -> int:
        return int(np.sum(self.spectrum > EIG_FLOOR))

    def training_embeddings(self) -> np.ndarray:
        return self.eigvecs * np.sqrt(self.eigvals)

    def spectral_mass(self, d: int | None = None) -> float:
        pos = self.spectrum[self.spectrum > EIG_FLOOR]
        d = self.embed_dim if d is None else d
        return float(pos[:d].sum() / pos.sum())


def center_gram(K: np.ndarray) -> np.ndarray:
    col = K.mean(axis=0)
    row = K.mean(axis=1)
    Kc = K - col[None, :] - row[:, None] + K.mean()
    return 0.5 * (Kc + Kc.T)


def kpca_fit(g: GramMatrix, d: int, train_robustness: np.ndarray | None = None,
             clamp: float = DEFAULT_CLAMP) -> KpcaModel:
    if not g.normalized:
        raise KernelError("kernel PCA expects a normalized Gram matrix")
    K = np.asarray(g.matrix, dtype=float)
    Kc = center_gram(K)
    w, U = np.linalg.eigh(Kc)
    order = np.argsort(w)[::-1]
    w, U = w[order], U[:, order]
    rank = int(np.sum(w > EIG_FLOOR))
    if d < 1 or d > rank:
        raise KernelError(f"embedding dimension {d} exceeds the usable rank {rank} of the centered Gram matrix")
    return KpcaModel(U[:, :d].copy(), w[:d].copy(), w, K.mean(axis=0), float(K.mean()), train_robustness, clamp)


def kpca_embed_vectors(model: KpcaModel, r: np.ndarray) -> np.ndarray:
    """Embed formulae given their basis robustness vectors (rows of ``r``)."""
    if model.train_robustness is None:
        raise KernelError("model was fitted without training robustness vectors")
    R = model.train_robustness
    B = R.shape[1]
    r = np.atleast_2d(r)
    k_raw = (r @ R.T) / B
    self_new = np.einsum("ij,ij->i", r, r) / B
    self_train = np.einsum("ij,ij->i", R, R) / B
    if np.any(self_new <= 0):
        raise KernelError("zero self-kernel (constant-zero robustness); cannot normalize")
    k = k_raw / np.sqrt(self_new[:, None] * self_train[None, :])
    kc = k - k.mean(axis=1, keepdims=True) - model.col_means[None, :] + model.grand_mean
    return kc @ model.eigvecs / np.sqrt(model.eigvals)


def kpca_embed(model: KpcaModel, phi: Formula, basis: SignatureBasis) -> np.ndarray:
    return kpca_embed_vectors(model, robustness_vector(phi, basis, model.clamp))[0]


def kernel_similarity(e1, e2) -> float:
    """Cosine similarity of two embedding vectors."""
    e1 = np.asarray(e1, dtype=float)
    e2 = np.asarray(e2, dtype=float)
    n1, n2 = np.linalg.norm(e1), np.linalg.norm(e2)
    if n1 == 0 or n2 == 0:
        raise KernelError("kernel similarity undefined for a zero embedding")
    return float(np.clip(e1 @ e2 / (n1 * n2), -1.0, 1.0))


def similarity_matrix(E: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(E, axis=1)
    if np.any(norms == 0):
        raise KernelError("kernel similarity undefined for a zero embedding")
    U = E / norms[:, None]
    return np.clip(U @ U.T, -1.0, 1.0)


# ---------------------------------------------------------------------------
# Persistence: plain CSV matrices plus a JSON sidecar

def save_matrix(path, M: np.ndarray, meta: dict | None = None) -> None:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for row in np.atleast_2d(M):
            w.writerow([repr(float(v)) for v in row])
    if meta is not None:
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_matrix(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = [[float(v) for v in row] for row in csv.reader(fh) if row]
    return np.asarray(rows, dtype=float)
