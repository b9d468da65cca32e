"""Exact softmax attention, kernel-estimator attention and linearized attention."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from rfattn.component_functions import SOFTMAX, FeatureBatch, FeatureMap, Role
from rfattn.errors import ContractError, DegenerateRowError, ShapeError, ValidationError


@dataclass(frozen=True)
class AttentionBatch:
    """Queries, keys and values; ``d_k`` defaults to the key width."""

    Q: np.ndarray
    K: np.ndarray
    V: np.ndarray
    d_k: int | None = None

    def __post_init__(self):
        Q, K, V = (np.atleast_2d(np.asarray(a, dtype=np.float64)) for a in (self.Q, self.K, self.V))
        if Q.shape[1] != K.shape[1]:
            raise ShapeError(f"queries have width {Q.shape[1]}, keys {K.shape[1]}")
        if V.shape[0] != K.shape[0]:
            raise ShapeError(f"{K.shape[0]} keys but {V.shape[0]} values")
        for name, a in (("Q", Q), ("K", K), ("V", V)):
            if not np.all(np.isfinite(a)):
                raise ValidationError(f"{name} has non-finite entries")
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "V", V)
        d_k = Q.shape[1] if self.d_k is None else int(self.d_k)
        if d_k < 1:
            raise ValidationError("d_k must be >= 1")
        object.__setattr__(self, "d_k", d_k)

    @property
    def n(self) -> int:
        return self.Q.shape[0]

    @property
    def temperature_scale(self) -> float:
        """Factor applied to both q and k so that q.k absorbs the 1/sqrt(d_k)."""
        return self.d_k ** -0.25


@dataclass(frozen=True)
class AttentionOutput:
    """Attention rows and their log normalizers.

    Rows listed in ``degenerate_rows`` had a non-positive normalizer; they are
    NaN in ``A`` and ``row_normalizers``.
    """

    A: np.ndarray
    row_normalizers: np.ndarray
    degenerate_rows: tuple = ()


def softmax_weights(batch: AttentionBatch) -> np.ndarray:
    scores = batch.Q @ batch.K.T / math.sqrt(batch.d_k)
    w = np.exp(scores - scores.max(axis=1, keepdims=True))
    return w / w.sum(axis=1, keepdims=True)


def exact_softmax_attention(batch: AttentionBatch) -> AttentionOutput:
    """O(N^2 d) reference: ``softmax(Q K^T / sqrt(d_k)) V`` with row-max shift."""
    scores = batch.Q @ batch.K.T / math.sqrt(batch.d_k)
    top = scores.max(axis=1, keepdims=True)
    w = np.exp(scores - top)
    z = w.sum(axis=1)
    return AttentionOutput((w / z[:, None]) @ batch.V, top[:, 0] + np.log(z))


def _finish(num, den, log_offset, strict):
    bad = ~(den > 0)
    if np.any(bad):
        rows = np.flatnonzero(bad)
        if strict:
            raise DegenerateRowError(rows)
        den = np.where(bad, np.nan, den)
        num = np.where(bad[:, None], np.nan, num)
    with np.errstate(invalid="ignore"):
        A = num / den[:, None]
        log_norm = np.log(den) + log_offset
    return AttentionOutput(A, log_norm, tuple(int(r) for r in np.flatnonzero(bad)))


def nadaraya_watson(gram, V, strict: bool = True) -> AttentionOutput:
    """Weighted average of ``V`` rows with weights ``gram[i, j] / sum_l gram[i, l]``."""
    gram = np.asarray(gram, dtype=np.float64)
    V = np.atleast_2d(np.asarray(V, dtype=np.float64))
    if gram.shape[1] != V.shape[0]:
        raise ShapeError(f"gram has {gram.shape[1]} columns, V has {V.shape[0]} rows")
    return _finish(gram @ V, gram.sum(axis=1), 0.0, strict)


def kernel_estimator_attention(batch: AttentionBatch, kernel=None, gram=None, strict: bool = True):
    """Attention with weights ``K(q_i, k_j) / sum_l K(q_i, k_l)``.

    ``kernel`` is a pairwise callable on two vectors; alternatively pass the
    precomputed ``gram`` matrix. No floor is applied to the normalizer.
    """
    if (kernel is None) == (gram is None):
        raise ContractError("pass exactly one of kernel or gram")
    if gram is None:
        gram = np.array([[kernel(q, k) for k in batch.K] for q in batch.Q], dtype=np.float64)
    return nadaraya_watson(gram, batch.V, strict)


def linearized_attention(phi_q, phi_k, V, log_q=None, log_k=None, strict: bool = True) -> AttentionOutput:
    """Linear-time attention from query and key features.

    Precomputes ``sum_j phi(k_j) (x) v_j`` (m x d_v) and ``sum_j phi(k_j)``
    once, then each query row costs O(m d_v). ``phi_q``/``phi_k`` may be
    :class:`FeatureBatch` objects or plain arrays with optional per-row log
    scales; key scales are folded in relative to their maximum so the result
    is the unstabilized ratio. A non-positive normalizer raises
    :class:`DegenerateRowError` (or yields a NaN row with ``strict=False``).
    """
    if isinstance(phi_q, FeatureBatch):
        phi_q, log_q = phi_q.values, phi_q.log_scale
    if isinstance(phi_k, FeatureBatch):
        phi_k, log_k = phi_k.values, phi_k.log_scale
    phi_q = np.atleast_2d(np.asarray(phi_q, dtype=np.float64))
    phi_k = np.atleast_2d(np.asarray(phi_k, dtype=np.float64))
    V = np.atleast_2d(np.asarray(V, dtype=np.float64))
    if phi_q.shape[1] != phi_k.shape[1]:
        raise ShapeError("query and key features have different widths")
    if phi_k.shape[0] != V.shape[0]:
        raise ShapeError(f"{phi_k.shape[0]} key features but {V.shape[0]} values")
    log_q = np.zeros(phi_q.shape[0]) if log_q is None else np.asarray(log_q, dtype=np.float64)
    log_k = np.zeros(phi_k.shape[0]) if log_k is None else np.asarray(log_k, dtype=np.float64)
    shift = float(log_k.max())
    wk = np.exp(log_k - shift)
    kv = (phi_k * wk[:, None]).T @ V
    ksum = phi_k.T @ wk
    return _finish(phi_q @ kv, phi_q @ ksum, log_q + shift, strict)


def _softmax_map(batch: AttentionBatch, fm: FeatureMap, calibrate: bool):
    if fm.target != SOFTMAX:
        fm = replace(fm, target=SOFTMAX)
    c = batch.temperature_scale
    Qs, Ks = batch.Q * c, batch.K * c
    if calibrate:
        fm = fm.calibrate(Qs, Ks)
    return fm, Qs, Ks


def batch_features(batch: AttentionBatch, fm: FeatureMap, calibrate: bool = True, stabilize: bool = True):
    """Query and key features for softmax attention.

    Inputs are scaled by ``d_k ** -0.25`` so the estimated kernel is
    ``exp(q.k / sqrt(d_k))``; RBF-native maps get the ``exp(|x|^2 / 2)``
    row factors folded in. OPRF/SADERF are calibrated on the scaled batch.
    """
    fm, Qs, Ks = _softmax_map(batch, fm, calibrate)
    return fm.apply(Qs, Role.QUERY, stabilize), fm.apply(Ks, Role.KEY, stabilize), fm


def feature_attention(batch: AttentionBatch, fm: FeatureMap, strict: bool = True,
                      calibrate: bool = True, stabilize: bool = True) -> AttentionOutput:
    fq, fk, _ = batch_features(batch, fm, calibrate, stabilize)
    return linearized_attention(fq, fk, batch.V, strict=strict)


def feature_gram(batch: AttentionBatch, fm: FeatureMap, calibrate: bool = True) -> np.ndarray:
    """Dense ``<phi(q_i), phi(k_j)>`` using the same features as :func:`feature_attention`."""
    fq, fk, _ = batch_features(batch, fm, calibrate)
    return (fq.values @ fk.values.T) * np.exp(fq.log_scale[:, None] + fk.log_scale[None, :])


@dataclass(frozen=True)
class AttentionError:
    max_row_l2: float
    mean_row_l2: float
    rel_frobenius: float
    compared_rows: int


def attention_error(approx: AttentionOutput, exact: AttentionOutput) -> AttentionError:
    """Row-wise L2 errors and relative Frobenius error, over non-degenerate rows."""
    a, e = np.asarray(approx.A), np.asarray(exact.A)
    if a.shape != e.shape:
        raise ContractError(f"shape mismatch: {a.shape} vs {e.shape}")
    ok = np.all(np.isfinite(a), axis=1)
    if not np.any(ok):
        nan = float("nan")
        return AttentionError(nan, nan, nan, 0)
    diff = a[ok] - e[ok]
    row = np.linalg.norm(diff, axis=1)
    ref = np.linalg.norm(e[ok])
    rel = float(np.linalg.norm(diff) / ref) if ref > 0 else float(np.linalg.norm(diff))
    return AttentionError(float(row.max()), float(row.mean()), rel, int(ok.sum()))
