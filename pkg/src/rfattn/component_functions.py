"""Component functions and the composed random-feature map.

A :class:`FeatureMap` pairs a :class:`~rfattn.weight_matrices.WeightMatrix`
with a component function and produces ``phi(x)`` of length ``l * s``:

    phi(x) = (l * s) ** -0.5 * [f_1(w_1, x), ..., f_1(w_s, x), ..., f_l(w_s, x)]

with every component weight fixed at 1. The normalization counts all ``l * s``
entries so that ``<phi(x), phi(y)>`` is an unbiased kernel estimate for the
two-branch maps (trigonometric and hyperbolic) as well as the one-branch maps.

Each kind has a native target kernel. ``"rbf"`` is ``exp(-|x - y|^2 / 2)``,
``"softmax"`` is ``exp(x.y)``; the two differ by the row factors
``exp(|x|^2 / 2) exp(|y|^2 / 2)``, which a map folds into its log scale when
asked for the non-native target.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum
from functools import cached_property

import numpy as np

from rfattn.errors import (
    ContractError,
    DomainError,
    NumericalFailure,
    ShapeError,
    UnsupportedParametersError,
    ValidationError,
)
from rfattn.numerics import RngStream
from rfattn.weight_matrices import SORFParams, WeightMatrix

NORM_STAT_FLOOR = 1e-8
PSI_SUM_FLOOR = 1e-12


class Kind(str, Enum):
    TRIGRF = "trigrf"
    POSRF = "posrf"
    POSRF_HYP = "posrf_hyp"
    GERF = "gerf"
    OPRF = "oprf"
    SADERF = "saderf"

    def __str__(self):
        return self.value


class Role(str, Enum):
    QUERY = "query"
    KEY = "key"


RBF = "rbf"
SOFTMAX = "softmax"

GERF_KINDS = frozenset({Kind.GERF, Kind.OPRF, Kind.SADERF})
POSITIVE_KINDS = frozenset({Kind.POSRF, Kind.POSRF_HYP, Kind.GERF, Kind.OPRF, Kind.SADERF})
NATIVE_TARGET = {
    Kind.TRIGRF: RBF,
    Kind.POSRF: SOFTMAX,
    Kind.POSRF_HYP: RBF,
    Kind.GERF: RBF,
    Kind.OPRF: RBF,
    Kind.SADERF: RBF,
}
# What each kind is used to estimate unless told otherwise.
DEFAULT_TARGET = {**NATIVE_TARGET, Kind.OPRF: SOFTMAX, Kind.SADERF: SOFTMAX}


# ------------------------------------------------------------ exact kernels


def _rows(x):
    return np.atleast_2d(np.asarray(x, dtype=np.float64))


def _unwrap(out, *inputs):
    return float(out[0]) if all(np.ndim(v) == 1 for v in inputs) else out


def rbf_kernel(x, y, sigma: float = 1.0):
    """``exp(-|x - y|^2 / (2 sigma^2))`` for a pair or matched rows."""
    X, Y = _rows(x), _rows(y)
    return _unwrap(np.exp(-np.sum((X - Y) ** 2, axis=-1) / (2.0 * sigma**2)), x, y)


def softmax_kernel(x, y, d_k: int = 1):
    """``exp(x.y / sqrt(d_k))`` for a pair or matched rows."""
    X, Y = _rows(x), _rows(y)
    return _unwrap(np.exp(np.sum(X * Y, axis=-1) / math.sqrt(d_k)), x, y)


# ---------------------------------------------------------- specification


@dataclass(frozen=True)
class ComponentFunctionSpec:
    """Which component function, with its parameters.

    ``gerf_A`` is the scalar ``A`` of the generalized exponential family
    (``None`` means 0 for GERF and "not yet calibrated" for OPRF/SADERF).
    ``trig_offsets`` are the TrigRF phases ``b``; ``psi`` is the SADERF
    diagonal.
    """

    kind: Kind
    gerf_A: float | None = None
    gerf_sign: int = 1
    trig_offsets: np.ndarray | None = None
    psi: np.ndarray | None = None

    def __post_init__(self):
        try:
            object.__setattr__(self, "kind", Kind(self.kind))
        except ValueError:
            raise ValidationError(f"unknown component kind {self.kind!r}") from None
        if self.gerf_sign not in (-1, 1):
            raise ValidationError(f"gerf_sign must be -1 or +1, got {self.gerf_sign}")
        if self.gerf_A is not None:
            if not math.isfinite(self.gerf_A) or 1.0 - 4.0 * self.gerf_A <= 0:
                raise ValidationError(f"GERF needs 1 - 4A > 0, got A={self.gerf_A}")
        if self.trig_offsets is not None:
            b = np.asarray(self.trig_offsets, dtype=np.float64)
            if b.ndim != 1 or np.any(b < 0) or np.any(b >= 2 * math.pi):
                raise ValidationError("trig_offsets must be a vector with entries in [0, 2pi)")
            object.__setattr__(self, "trig_offsets", b)
        if self.psi is not None:
            psi = np.asarray(self.psi, dtype=np.float64)
            if psi.ndim != 1 or not np.all(np.isfinite(psi)) or np.any(psi <= 0):
                raise ValidationError("psi must be a vector of positive finite reals")
            object.__setattr__(self, "psi", psi)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "gerf_A": None if self.gerf_A is None else float(self.gerf_A),
            "gerf_sign": int(self.gerf_sign),
            "psi": None if self.psi is None else [float(v) for v in self.psi],
        }


# ------------------------------------------------------ OPRF / SADERF stats


def derive_oprf_A(norm_stat: float, d: int) -> float:
    """Variance-optimal GERF parameter ``A = (1 - 1/p*) / 8``.

    ``norm_stat`` stands for ``|x + y|^2``. ``p*`` is evaluated in the
    rationalized form ``2d / (sqrt((2n + d)^2 + 8dn) + 2n + d)``, which equals
    the textbook expression but does not cancel catastrophically for large
    ``n``. Always returns ``A < 1/8``.
    """
    if not (norm_stat > 0) or not math.isfinite(norm_stat):
        raise DomainError(f"norm statistic must be a positive finite number, got {norm_stat}")
    if d < 1:
        raise DomainError(f"dimension must be >= 1, got {d}")
    n = float(norm_stat)
    p_star = 2.0 * d / (math.sqrt((2.0 * n + d) ** 2 + 8.0 * d * n) + 2.0 * n + d)
    return (1.0 - 1.0 / p_star) / 8.0


def estimate_norm_stat(Q, K) -> float:
    """Mean of ``|q_i + k_j|^2`` over all (i, j) pairs, in linear time.

    Expands to ``mean|q|^2 + mean|k|^2 + 2 mean(q).mean(k)``; floored at 1e-8.
    """
    Q, K = _rows(Q), _rows(K)
    stat = (
        np.mean(np.sum(Q * Q, axis=1))
        + np.mean(np.sum(K * K, axis=1))
        + 2.0 * float(Q.mean(axis=0) @ K.mean(axis=0))
    )
    return max(float(stat), NORM_STAT_FLOOR)


def estimate_psi(Q, K) -> np.ndarray:
    """Per-coordinate SADERF rescaling ``(sum_i K_il^2 / sum_i Q_il^2) ** 0.25``."""
    Q, K = _rows(Q), _rows(K)
    kk = np.maximum(np.sum(K * K, axis=0), PSI_SUM_FLOOR)
    qq = np.maximum(np.sum(Q * Q, axis=0), PSI_SUM_FLOOR)
    return (kk / qq) ** 0.25


# --------------------------------------------------------------- raw math


def _weight_rows_sq(W) -> np.ndarray:
    if isinstance(W, WeightMatrix):
        if isinstance(W.implicit, SORFParams):
            return np.full(W.num_features, W.in_dim / W.spec.sigma**2)
        return np.sum(W.rows**2, axis=1)
    W = np.asarray(W, dtype=np.float64)
    return np.sum(W * W, axis=1)


def _omega_dim(W) -> int:
    return W.in_dim if isinstance(W, WeightMatrix) else np.asarray(W).shape[1]


def _project(W, X) -> np.ndarray:
    if isinstance(W, WeightMatrix):
        return W.project(X)
    W = np.asarray(W, dtype=np.float64)
    if X.shape[1] != W.shape[1]:
        raise ShapeError(f"inputs have {X.shape[1]} columns, W has {W.shape[1]}")
    return X @ W.T


def _gerf_constants(A: float, sign: int, d_omega: int):
    if sign != 1:
        raise UnsupportedParametersError(
            "sign=-1 with real A needs a complex B; only the real branch is implemented"
        )
    if not (1.0 - 4.0 * A > 0):
        raise ValidationError(f"GERF needs 1 - 4A > 0, got A={A}")
    B = math.sqrt(1.0 - 4.0 * A)
    C = -(sign + 1) / 2.0
    log_D = 0.25 * d_omega * math.log(1.0 - 4.0 * A)
    return B, C, log_D


def _gerf_exponent(W, X, A, sign, role):
    """Exponent of ``D exp(A|w|^2 + B w.x + C|x|^2)``; keys get ``sign * B``."""
    B, C, log_D = _gerf_constants(A, sign, _omega_dim(W))
    if Role(role) is Role.KEY:
        B = sign * B
    proj = _project(W, X)
    sq = np.sum(X * X, axis=1, keepdims=True)
    return log_D + A * _weight_rows_sq(W)[None, :] + B * proj + C * sq


def _psi_transform(X, psi, role):
    psi = np.asarray(psi, dtype=np.float64)
    if psi.shape != (X.shape[1],):
        raise ShapeError(f"psi has shape {psi.shape}, inputs have {X.shape[1]} columns")
    return X * psi if Role(role) is Role.QUERY else X / psi


def trigrf(W, b, x) -> np.ndarray:
    """``(2s)^-1/2 [sqrt2 cos(Wx + b); sqrt2 sin(Wx + b)]``; rows of ``x`` map independently."""
    X = _rows(x)
    arg = _project(W, X) + np.asarray(b, dtype=np.float64)
    s = arg.shape[1]
    out = math.sqrt(2.0) * np.concatenate([np.cos(arg), np.sin(arg)], axis=1) / math.sqrt(2 * s)
    return out[0] if np.ndim(x) == 1 else out


def posrf_b(W, x) -> np.ndarray:
    """``s^-1/2 exp(Wx - |x|^2 / 2)``."""
    X = _rows(x)
    E = _project(W, X) - 0.5 * np.sum(X * X, axis=1, keepdims=True)
    out = np.exp(E) / math.sqrt(E.shape[1])
    return out[0] if np.ndim(x) == 1 else out


def posrf_hyp(W, x) -> np.ndarray:
    """``(2s)^-1/2 [exp(Wx - |x|^2); exp(-Wx - |x|^2)]``."""
    X = _rows(x)
    P = _project(W, X)
    sq = np.sum(X * X, axis=1, keepdims=True)
    E = np.concatenate([P - sq, -P - sq], axis=1)
    out = np.exp(E) / math.sqrt(E.shape[1])
    return out[0] if np.ndim(x) == 1 else out


def gerf(W, x, A: float, sign: int = 1, role=Role.QUERY) -> np.ndarray:
    X = _rows(x)
    E = _gerf_exponent(W, X, A, sign, role)
    out = np.exp(E) / math.sqrt(E.shape[1])
    return out[0] if np.ndim(x) == 1 else out


def saderf(W, x, psi, role, A: float, sign: int = 1) -> np.ndarray:
    """GERF on ``psi * x`` for queries and ``x / psi`` for keys."""
    X = _psi_transform(_rows(x), psi, role)
    E = _gerf_exponent(W, X, A, sign, role)
    out = np.exp(E) / math.sqrt(E.shape[1])
    return out[0] if np.ndim(x) == 1 else out


# ------------------------------------------------------------- feature map


@dataclass(frozen=True)
class FeatureBatch:
    """Feature rows in log-scale form: ``phi(x_i) = values[i] * exp(log_scale[i])``."""

    values: np.ndarray
    log_scale: np.ndarray

    def dense(self) -> np.ndarray:
        return self.values * np.exp(self.log_scale)[:, None]

    def __len__(self):
        return self.values.shape[0]


@dataclass(frozen=True)
class FeatureMap:
    weight_matrix: WeightMatrix
    component: ComponentFunctionSpec
    target: str | None = None

    def __post_init__(self):
        target = DEFAULT_TARGET[self.component.kind] if self.target is None else self.target
        if target not in (RBF, SOFTMAX):
            raise ValidationError(f"target must be 'rbf' or 'softmax', got {target!r}")
        if self.component.kind is Kind.SADERF and target != SOFTMAX:
            raise ValidationError("SADERF only estimates the softmax kernel")
        object.__setattr__(self, "target", target)
        kind = self.component.kind
        if kind is Kind.TRIGRF:
            b = self.component.trig_offsets
            if b is None or b.shape != (self.weight_matrix.num_features,):
                raise ValidationError("TrigRF needs one offset per weight-matrix row")
        if kind in GERF_KINDS and self.component.gerf_sign != 1:
            raise UnsupportedParametersError("only gerf_sign=+1 (real branch) is implemented")
        if kind is Kind.SADERF and self.component.psi is not None:
            if self.component.psi.shape != (self.weight_matrix.spec.dim,):
                raise ValidationError("psi length must equal the input dimension")

    @property
    def kind(self) -> Kind:
        return self.component.kind

    @property
    def num_components(self) -> int:
        return 2 if self.kind in (Kind.TRIGRF, Kind.POSRF_HYP) else 1

    @property
    def component_weight(self) -> float:
        return 1.0

    @property
    def output_dim(self) -> int:
        return self.num_components * self.weight_matrix.num_features

    @property
    def dim(self) -> int:
        return self.weight_matrix.spec.dim

    @cached_property
    def _bridge_sign(self) -> float:
        native = NATIVE_TARGET[self.kind]
        if native == self.target:
            return 0.0
        return 0.5 if self.target == SOFTMAX else -0.5

    def _resolved_A(self) -> float:
        A = self.component.gerf_A
        if A is None:
            if self.kind is Kind.GERF:
                return 0.0
            raise ContractError(f"{self.kind.value} needs gerf_A; call calibrate() on the batch first")
        return A

    def _inputs(self, X, role):
        if self.kind is Kind.SADERF:
            if self.component.psi is None:
                raise ContractError("saderf needs psi; call calibrate() on the batch first")
            return _psi_transform(X, self.component.psi, role)
        return X

    def apply(self, X, role=Role.QUERY, stabilize: bool = True) -> FeatureBatch:
        """Feature rows for ``X`` (N x d).

        Exponential kinds subtract each row's largest exponent before
        exponentiating and return it in ``log_scale`` (together with the
        ``1/sqrt(m)`` normalization). With ``stabilize=False`` the features
        are exponentiated directly and ``log_scale`` is zero.
        """
        X = _rows(X)
        if X.shape[1] != self.dim:
            raise ShapeError(f"inputs have {X.shape[1]} columns, feature map expects {self.dim}")
        role = Role(role)
        Xt = self._inputs(X, role)
        # Overflow / inf inputs are reported below as NumericalFailure, not warnings.
        with np.errstate(over="ignore", invalid="ignore"):
            bridge = self._bridge_sign * np.sum(Xt * Xt, axis=1)
            m = self.output_dim
            if self.kind is Kind.TRIGRF:
                values = trigrf(self.weight_matrix, self.component.trig_offsets, Xt)
                log_scale = bridge
                if not stabilize:
                    values, log_scale = values * np.exp(bridge)[:, None], np.zeros(len(X))
            else:
                E = self._exponent(Xt, role) + bridge[:, None]
                if stabilize:
                    top = E.max(axis=1)
                    values = np.exp(E - top[:, None])
                    log_scale = top - 0.5 * math.log(m)
                else:
                    values = np.exp(E) / math.sqrt(m)
                    log_scale = np.zeros(len(X))
        bad = ~(np.all(np.isfinite(values), axis=1) & np.isfinite(log_scale))
        if np.any(bad):
            row = int(np.flatnonzero(bad)[0])
            raise NumericalFailure(f"non-finite feature values in input row {row}", row=row)
        return FeatureBatch(values, log_scale)

    def _exponent(self, Xt, role):
        W = self.weight_matrix
        if self.kind is Kind.POSRF:
            return _project(W, Xt) - 0.5 * np.sum(Xt * Xt, axis=1, keepdims=True)
        if self.kind is Kind.POSRF_HYP:
            P = _project(W, Xt)
            sq = np.sum(Xt * Xt, axis=1, keepdims=True)
            return np.concatenate([P - sq, -P - sq], axis=1)
        return _gerf_exponent(W, Xt, self._resolved_A(), self.component.gerf_sign, role)

    def __call__(self, X, role=Role.QUERY) -> np.ndarray:
        return self.apply(X, role).dense()

    def estimate(self, X, Y) -> np.ndarray:
        """``<phi_q(x_i), phi_k(y_i)>`` for matched rows of X and Y."""
        fq, fk = self.apply(X, Role.QUERY), self.apply(Y, Role.KEY)
        return np.sum(fq.values * fk.values, axis=1) * np.exp(fq.log_scale + fk.log_scale)

    def gram(self, X, Y) -> np.ndarray:
        """Matrix of ``<phi_q(x_i), phi_k(y_j)>``."""
        fq, fk = self.apply(X, Role.QUERY), self.apply(Y, Role.KEY)
        return (fq.values @ fk.values.T) * np.exp(fq.log_scale[:, None] + fk.log_scale[None, :])

    def target_kernel(self, x, y):
        """Closed-form mean of :meth:`estimate` when the rows of W are N(0, I/sigma^2).

        With ``sigma = 1`` this is the RBF or softmax kernel (per ``target``);
        for SADERF it is the softmax kernel of the original inputs.
        """
        X, Y = _rows(x), _rows(y)
        sigma2 = self.weight_matrix.spec.sigma ** 2
        kind = self.kind
        if kind is Kind.SADERF:
            psi = self.component.psi
            if psi is None:
                raise ContractError("saderf needs psi; call calibrate() on the batch first")
            X, Y = X * psi, Y / psi
        xx, yy = np.sum(X * X, axis=1), np.sum(Y * Y, axis=1)
        ss = np.sum((X + Y) ** 2, axis=1)
        if kind is Kind.TRIGRF:
            log_k = -np.sum((X - Y) ** 2, axis=1) / (2 * sigma2)
        elif kind is Kind.POSRF:
            log_k = ss / (2 * sigma2) - 0.5 * (xx + yy)
        elif kind is Kind.POSRF_HYP:
            log_k = ss / (2 * sigma2) - (xx + yy)
        else:
            A = self._resolved_A()
            d = _omega_dim(self.weight_matrix)
            shrink = 1.0 - 4.0 * A / sigma2
            if shrink <= 0:
                return _unwrap(np.full(len(X), np.inf), x, y)
            log_k = (
                0.5 * d * (math.log(1.0 - 4.0 * A) - math.log(shrink))
                + (1.0 - 4.0 * A) * ss / (2.0 * sigma2 * shrink)
                - (xx + yy)
            )
        log_k = log_k + self._bridge_sign * (xx + yy)
        return _unwrap(np.exp(log_k), x, y)

    def calibrate(self, Q, K) -> "FeatureMap":
        """Fix the batch-level OPRF ``A`` and SADERF ``psi`` from queries and keys.

        ``Q`` and ``K`` must be the inputs the map will see (already scaled for
        temperature). Other kinds are returned unchanged.
        """
        if self.kind not in (Kind.OPRF, Kind.SADERF):
            return self
        Q, K = _rows(Q), _rows(K)
        d = _omega_dim(self.weight_matrix)
        if self.kind is Kind.OPRF:
            A = derive_oprf_A(estimate_norm_stat(Q, K), d)
            return replace(self, component=replace(self.component, gerf_A=A))
        psi = estimate_psi(Q, K)
        A = derive_oprf_A(estimate_norm_stat(Q * psi, K / psi), d)
        return replace(self, component=replace(self.component, gerf_A=A, psi=psi))


def draw_trig_offsets(seed: int, s: int) -> np.ndarray:
    gen = RngStream(seed).substream("trig_offsets").generator()
    return gen.uniform(0.0, 2.0 * math.pi, size=s)


def build_feature_map(weight_matrix: WeightMatrix, kind, target=None, **params) -> FeatureMap:
    """Compose ``weight_matrix`` with a component function of the given kind.

    TrigRF offsets are drawn from the weight matrix's seed unless given.
    """
    kind = Kind(kind)
    if kind is Kind.TRIGRF and params.get("trig_offsets") is None:
        params["trig_offsets"] = draw_trig_offsets(weight_matrix.spec.seed, weight_matrix.num_features)
    return FeatureMap(weight_matrix, ComponentFunctionSpec(kind, **params), target)


def apply_feature_map(fm: FeatureMap, X, role=Role.QUERY, stabilize: bool = True) -> FeatureBatch:
    return fm.apply(X, role, stabilize)
