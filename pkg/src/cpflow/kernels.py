"""Flow and embedding kernels, diagonal-corrected column softmax, the
cross-pixel similarity loss and its analytic gradients.

All arithmetic here is float64. Kernel matrices are plain ``(n, n)`` arrays;
stochastic matrices are column-normalized ``(n, n)`` arrays.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

EMBED_SCALE = 0.25
# diagonal log-similarity = kernel maximum - 1
FLOW_DIAG = 1.0 - 1.0
EMBED_DIAG = EMBED_SCALE - 1.0
INIT_SIGMA_SQ = 0.25
MIN_NORM = 1e-12


class DegenerateKernelWarning(RuntimeWarning):
    """All off-diagonal flow-kernel entries underflowed to zero."""


@dataclass(frozen=True)
class KernelParams:
    rho: float = 0.5 * math.log(INIT_SIGMA_SQ)

    @property
    def sigma(self) -> float:
        return math.exp(self.rho)

    @property
    def sigma_sq(self) -> float:
        return math.exp(2.0 * self.rho)

    @classmethod
    def from_sigma_sq(cls, sigma_sq: float) -> "KernelParams":
        return cls(0.5 * math.log(sigma_sq))


@dataclass
class LossGradients:
    loss: float
    d_embeddings: np.ndarray
    d_rho: float


def _rho(params) -> float:
    return params.rho if isinstance(params, KernelParams) else float(params)


def squared_distances(flows: np.ndarray) -> np.ndarray:
    flows = np.asarray(flows, dtype=np.float64)
    diff = flows[:, None, :] - flows[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def flow_kernel_matrix(flows: np.ndarray, params) -> np.ndarray:
    """RBF kernel ``exp(-|f_p - f_q|^2 / (2 sigma^2))`` with ``sigma = exp(rho)``."""
    flows = np.asarray(flows, dtype=np.float64)
    if flows.ndim != 2 or flows.shape[1] != 2 or len(flows) < 1:
        raise ValueError(f"flows must have shape (n, 2) with n >= 1, got {flows.shape}")
    if not np.all(np.isfinite(flows)):
        raise ValueError("flows must be finite")
    rho = _rho(params)
    K = np.exp(-0.5 * squared_distances(flows) * math.exp(-2.0 * rho))
    n = len(K)
    if n > 1:
        off = K[~np.eye(n, dtype=bool)]
        if not np.any(off > 0):
            warnings.warn(
                f"flow kernel degenerate at sigma^2={math.exp(2 * rho):.3g}: "
                "all off-diagonal entries are 0",
                DegenerateKernelWarning,
                stacklevel=2,
            )
    return K


def unit_rows(emb: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    emb = np.asarray(emb, dtype=np.float64)
    if emb.ndim != 2:
        raise ValueError(f"embeddings must be 2-D, got shape {emb.shape}")
    norms = np.linalg.norm(emb, axis=1)
    small = np.flatnonzero(norms < MIN_NORM)
    if len(small):
        raise ValueError(f"embedding row {small[0]} has zero norm")
    return emb / norms[:, None], norms


def embedding_kernel_matrix(emb: np.ndarray) -> np.ndarray:
    """Scaled cosine kernel ``0.25 * cos(phi_p, phi_q)``."""
    U, _ = unit_rows(emb)
    K = EMBED_SCALE * (U @ U.T)
    # symmetrize away matmul rounding; pin the diagonal and range
    K = 0.5 * (K + K.T)
    np.fill_diagonal(K, EMBED_SCALE)
    return np.clip(K, -EMBED_SCALE, EMBED_SCALE)


def column_softmax(K: np.ndarray, diag_log_value: float) -> np.ndarray:
    """Softmax over each column with the diagonal logit replaced by ``diag_log_value``."""
    K = np.asarray(K, dtype=np.float64)
    if K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise ValueError(f"kernel must be square, got shape {K.shape}")
    if not np.all(np.isfinite(K)):
        raise ValueError("kernel must be finite")
    logits = K.copy()
    np.fill_diagonal(logits, diag_log_value)
    logits -= logits.max(axis=0, keepdims=True)
    E = np.exp(logits)
    return E / E.sum(axis=0, keepdims=True)


def _log_column_softmax(K: np.ndarray, diag_log_value: float) -> np.ndarray:
    logits = np.array(K, dtype=np.float64)
    np.fill_diagonal(logits, diag_log_value)
    m = logits.max(axis=0, keepdims=True)
    return logits - m - np.log(np.exp(logits - m).sum(axis=0, keepdims=True))


def flow_stochastic(flows, params) -> np.ndarray:
    return column_softmax(flow_kernel_matrix(flows, params), FLOW_DIAG)


def embedding_stochastic(emb) -> np.ndarray:
    return column_softmax(embedding_kernel_matrix(emb), EMBED_DIAG)


def cross_entropy_columns(S_target: np.ndarray, S_pred: np.ndarray) -> float:
    """``-sum_q sum_p S_target(p, q) log S_pred(p, q)``."""
    return float(-np.sum(S_target * np.log(S_pred)))


def column_entropy(S: np.ndarray) -> float:
    """Shannon entropy of every column, summed over columns."""
    return cross_entropy_columns(S, S)


def _check_pair(flows, emb) -> tuple[np.ndarray, np.ndarray]:
    flows = np.asarray(flows, dtype=np.float64)
    emb = np.asarray(emb, dtype=np.float64)
    if len(flows) != len(emb):
        raise ValueError(f"pixel count mismatch: {len(flows)} flows vs {len(emb)} embeddings")
    return flows, emb


def cross_pixel_loss(flows, emb, params) -> float:
    flows, emb = _check_pair(flows, emb)
    S_f = flow_stochastic(flows, params)
    log_S_phi = _log_column_softmax(embedding_kernel_matrix(emb), EMBED_DIAG)
    return float(-np.sum(S_f * log_S_phi))


def loss_gradients(flows, emb, params) -> LossGradients:
    """Loss plus dL/d(embeddings) and dL/d(rho)."""
    flows, emb = _check_pair(flows, emb)
    rho = _rho(params)
    n = len(flows)

    d2 = squared_distances(flows)
    K_f = np.exp(-0.5 * d2 * math.exp(-2.0 * rho))
    S_f = column_softmax(K_f, FLOW_DIAG)

    U, norms = unit_rows(emb)
    K_phi = EMBED_SCALE * (U @ U.T)
    log_S_phi = _log_column_softmax(K_phi, EMBED_DIAG)
    S_phi = np.exp(log_S_phi)
    loss = float(-np.sum(S_f * log_S_phi))

    off = ~np.eye(n, dtype=bool)

    # embedding side: softmax-CE gradient w.r.t. off-diagonal logits
    G = np.where(off, S_phi - S_f, 0.0)
    dU = EMBED_SCALE * (G + G.T) @ U
    radial = np.sum(dU * U, axis=1, keepdims=True)
    d_emb = (dU - U * radial) / norms[:, None]

    # flow side: L depends on S_f linearly with coefficient -log S_phi
    C = -log_S_phi
    dB = S_f * (C - np.sum(S_f * C, axis=0, keepdims=True))
    dK_drho = K_f * d2 * math.exp(-2.0 * rho)
    d_rho = float(np.sum(np.where(off, dB * dK_drho, 0.0)))

    return LossGradients(loss, d_emb, d_rho)


def kta(K: np.ndarray, K2: np.ndarray) -> float:
    """Kernel target alignment ``<K, K2>_F / (|K|_F |K2|_F)``."""
    K = np.asarray(K, dtype=np.float64)
    K2 = np.asarray(K2, dtype=np.float64)
    if K.shape != K2.shape:
        raise ValueError(f"kernel shapes differ: {K.shape} vs {K2.shape}")
    a = np.sum(K * K)
    b = np.sum(K2 * K2)
    if a == 0 or b == 0:
        raise ValueError("kta undefined for an all-zero kernel")
    return float(np.sum(K * K2) / math.sqrt(a * b))
