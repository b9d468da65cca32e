"""Frequency matrices ``W`` (s x d) for random-feature maps.

Each family is built from a :class:`WeightMatrixSpec`. Block-structured
families (ORF, SORF, FastFood) stack independent square blocks, each drawn
from its own substream (ORF: its own rows of the Gaussian stream it shares
with Base) of ``WeightMatrixSpec.seed``, and truncate the last block; with a
fixed seed, growing ``s`` keeps the earlier rows unchanged. SORF and FastFood
work in the next power of two ``d'`` and zero-pad inputs, and keep an implicit
O(d' log d') form alongside the lazily materialized dense rows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import cached_property

import numpy as np
from scipy.linalg import solve_triangular

from rfattn.errors import ContractError, ShapeError, ValidationError
from rfattn.numerics import (
    RngStream,
    chi_sample,
    fwht_normalized,
    gaussian,
    hadamard_matrix,
    halton_points,
    inverse_normal_cdf,
    next_power_of_two,
    orthonormalize_rows,
    rademacher,
    random_permutation,
)

S_FLOOR = 1e-8
MM_RIDGE = 1e-10


class Family(str, Enum):
    BASE = "base"
    ORF = "orf"
    SORF = "sorf"
    QMC = "qmc"
    MM = "mm"
    SGQ = "sgq"
    FASTFOOD_F = "fastfood_f"
    FASTFOOD_L = "fastfood_l"

    def __str__(self):
        return self.value


PADDED_FAMILIES = frozenset({Family.SORF, Family.FASTFOOD_F, Family.FASTFOOD_L})
# Fixed point sets: the seed does not change the rows (SGQ only reorders them).
DETERMINISTIC_FAMILIES = frozenset({Family.QMC, Family.MM, Family.SGQ})


@dataclass(frozen=True)
class WeightMatrixSpec:
    family: Family
    num_features: int
    dim: int
    sigma: float = 1.0
    seed: int = 0

    def __post_init__(self):
        try:
            object.__setattr__(self, "family", Family(self.family))
        except ValueError:
            raise ValidationError(f"unknown weight-matrix family {self.family!r}") from None
        if int(self.num_features) < 1:
            raise ValidationError(f"num_features must be >= 1, got {self.num_features}")
        if int(self.dim) < 1:
            raise ValidationError(f"dim must be >= 1, got {self.dim}")
        if not (math.isfinite(self.sigma) and self.sigma > 0):
            raise ValidationError(f"sigma must be a positive finite number, got {self.sigma}")
        if not (0 <= int(self.seed) < 1 << 64):
            raise ValidationError("seed must be an unsigned 64-bit integer")

    @property
    def padded_dim(self) -> int:
        if self.family in PADDED_FAMILIES:
            return next_power_of_two(self.dim)
        return self.dim

    def to_dict(self) -> dict:
        return {
            "family": self.family.value,
            "num_features": int(self.num_features),
            "dim": int(self.dim),
            "sigma": float(self.sigma),
            "seed": int(self.seed),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "WeightMatrixSpec":
        return cls(d["family"], d["num_features"], d["dim"], d.get("sigma", 1.0), d.get("seed", 0))


@dataclass(frozen=True)
class SGQConfig:
    """Third-degree symmetric Gauss rule for N(0, 1).

    Nodes ``{-p1, 0, p1}`` with weights ``(a1, a0, a1)``. The weights are kept
    as metadata; the feature map uses unit component weights.
    """

    p1_hat: float = math.sqrt(3.0)
    a0_hat: float = 2.0 / 3.0
    a1_hat: float = 1.0 / 6.0

    def nodes(self) -> np.ndarray:
        return np.array([-self.p1_hat, 0.0, self.p1_hat])

    def weights(self) -> np.ndarray:
        return np.array([self.a1_hat, self.a0_hat, self.a1_hat])


@dataclass(frozen=True)
class SORFParams:
    # (n_blocks, 3, d'): rows are D1, D2, D3 in W = sqrt(d')/sigma * H D1 H D2 H D3
    diagonals: np.ndarray

    @property
    def padded_dim(self) -> int:
        return self.diagonals.shape[-1]


@dataclass(frozen=True)
class FastFoodParams:
    """Diagonals of ``W = sqrt(d')/sigma * S H G Pi H B`` for every block.

    All arrays are ``(n_blocks, d')``; ``perm[b, i]`` is the source index of
    output coordinate ``i`` under ``Pi``. ``S`` is initialized to
    ``s_i / ||G||_F`` with ``s_i ~ chi_{d'}``, which with orthonormal ``H``
    and the ``sqrt(d')`` prefactor makes each row norm exactly ``s_i / sigma``.
    """

    S: np.ndarray
    G: np.ndarray
    B: np.ndarray
    perm: np.ndarray
    learnable: frozenset = frozenset()

    @property
    def padded_dim(self) -> int:
        return self.S.shape[-1]

    @property
    def n_blocks(self) -> int:
        return self.S.shape[0]


@dataclass(frozen=True)
class WeightMatrix:
    spec: WeightMatrixSpec
    implicit: SORFParams | FastFoodParams | None = None
    metadata: dict = field(default_factory=dict)
    explicit: np.ndarray | None = field(default=None, repr=False)

    @property
    def num_features(self) -> int:
        return self.spec.num_features

    @property
    def in_dim(self) -> int:
        """Column count of ``rows``: ``d`` or the padded ``d'``."""
        return self.spec.padded_dim

    @cached_property
    def rows(self) -> np.ndarray:
        if self.explicit is not None:
            return self.explicit
        if isinstance(self.implicit, SORFParams):
            return _sorf_dense(self.implicit, self.spec)
        if isinstance(self.implicit, FastFoodParams):
            return _fastfood_dense(self.implicit, self.spec)
        raise AssertionError("weight matrix has neither rows nor implicit form")

    def pad(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[-1] != self.spec.dim:
            raise ShapeError(f"inputs have {X.shape[-1]} columns, weight matrix expects {self.spec.dim}")
        if self.in_dim == self.spec.dim:
            return X
        out = np.zeros(X.shape[:-1] + (self.in_dim,))
        out[..., : self.spec.dim] = X
        return out

    def project(self, X, implicit: bool | None = None) -> np.ndarray:
        """``X @ W.T`` for ``X`` of shape (N, d) or (d,); returns (N, s) or (s,)."""
        single = np.ndim(X) == 1
        Xp = self.pad(X)
        use_implicit = self.implicit is not None if implicit is None else implicit
        if use_implicit:
            if self.implicit is None:
                raise ContractError(f"{self.spec.family.value} has no implicit form")
            out = _implicit_project(self.implicit, self.spec, Xp)
        else:
            out = Xp @ self.rows.T
        return out[0] if single else out

    def with_fastfood_params(self, params: FastFoodParams) -> "WeightMatrix":
        if not isinstance(self.implicit, FastFoodParams):
            raise ContractError("only FastFood matrices carry FastFood parameters")
        return replace(self, implicit=params)


# ------------------------------------------------------------------ builders


def _block_stream(spec: WeightMatrixSpec, block: int) -> RngStream:
    return RngStream(spec.seed).substream(spec.family.value, "block", block)


def _require(spec, *families):
    if spec.family not in families:
        names = ", ".join(f.value for f in families)
        raise ValidationError(f"spec family {spec.family.value!r} is not one of: {names}")


def _shared_gaussian(spec: WeightMatrixSpec, rows: int) -> np.ndarray:
    # Base and ORF read the same stream, so equal seeds give paired draws:
    # ORF row i has Base row i's norm, and ORF row 0 of a block is Base's row.
    return gaussian(RngStream(spec.seed).substream("gaussian"), (rows, spec.dim))


def build_base(spec: WeightMatrixSpec) -> WeightMatrix:
    _require(spec, Family.BASE)
    g = _shared_gaussian(spec, spec.num_features)
    return WeightMatrix(spec, explicit=g / spec.sigma)


def build_orf(spec: WeightMatrixSpec) -> WeightMatrix:
    """Stacked blocks ``diag(|g_i|) Q`` with ``Q`` the Gram-Schmidt of the block's Gaussian rows.

    The norms are chi_d and independent of the Haar-distributed ``Q``.
    """
    _require(spec, Family.ORF)
    d, s = spec.dim, spec.num_features
    n_blocks = math.ceil(s / d)
    g = _shared_gaussian(spec, n_blocks * d)
    blocks = []
    for b in range(n_blocks):
        G = g[b * d:(b + 1) * d]
        blocks.append(np.linalg.norm(G, axis=1)[:, None] * orthonormalize_rows(G))
    rows = np.concatenate(blocks, axis=0)[:s] / spec.sigma
    return WeightMatrix(spec, explicit=rows)


def build_sorf(spec: WeightMatrixSpec) -> WeightMatrix:
    _require(spec, Family.SORF)
    dp = spec.padded_dim
    n_blocks = math.ceil(spec.num_features / dp)
    diags = np.stack([rademacher(_block_stream(spec, b), (3, dp)) for b in range(n_blocks)])
    return WeightMatrix(spec, implicit=SORFParams(diags), metadata={"padded_dim": dp})


def qmc_points(s: int, d: int) -> np.ndarray:
    """Gaussian quasi-random points: inverse CDF of Halton points 1..s."""
    return inverse_normal_cdf(halton_points(s, d))


def build_qmc(spec: WeightMatrixSpec) -> WeightMatrix:
    _require(spec, Family.QMC)
    rows = qmc_points(spec.num_features, spec.dim) / spec.sigma
    return WeightMatrix(spec, explicit=rows, metadata={"sequence": "halton", "deterministic": True})


def build_mm(spec: WeightMatrixSpec) -> WeightMatrix:
    _require(spec, Family.MM)
    s, d = spec.num_features, spec.dim
    if s < d + 1:
        raise ValidationError(f"moment matching needs num_features >= dim + 1 ({d + 1}), got {s}")
    r = qmc_points(s, d)
    centered = r - r.mean(axis=0)
    cov = np.atleast_2d(np.cov(centered, rowvar=False))
    regularized = False
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        chol = np.linalg.cholesky(cov + MM_RIDGE * np.eye(d))
        regularized = True
    rows = solve_triangular(chol, centered.T, lower=True).T / spec.sigma
    meta = {"sequence": "halton", "deterministic": True, "regularized": regularized}
    return WeightMatrix(spec, explicit=rows, metadata=meta)


def build_sgq(spec: WeightMatrixSpec) -> WeightMatrix:
    _require(spec, Family.SGQ)
    cfg = SGQConfig()
    s, d = spec.num_features, spec.dim
    eye = np.eye(d)
    base = np.vstack([np.zeros((1, d)), cfg.p1_hat * eye, -cfg.p1_hat * eye])
    if s == 2 * d + 1:
        rows = base
    else:
        copies = []
        for c in range(math.ceil(s / (2 * d + 1))):
            gen = RngStream(spec.seed).substream("sgq", "copy", c).generator()
            signs = rademacher(gen, d)
            perm = random_permutation(gen, d)
            copies.append(base[:, perm] * signs)
        rows = np.concatenate(copies, axis=0)[:s]
    meta = {
        "deterministic": True,
        "sgq": {"p1_hat": cfg.p1_hat, "a0_hat": cfg.a0_hat, "a1_hat": cfg.a1_hat},
    }
    return WeightMatrix(spec, explicit=rows / spec.sigma, metadata=meta)


LEARNABLE_S = frozenset({"S"})
LEARNABLE_SGB = frozenset({"S", "G", "B"})


def build_fastfood(spec: WeightMatrixSpec, learnable=None) -> WeightMatrix:
    """FastFood matrix; ``learnable`` defaults to {} for FastFoodF and {"S"} for FastFoodL."""
    _require(spec, Family.FASTFOOD_F, Family.FASTFOOD_L)
    if spec.family is Family.FASTFOOD_F:
        learnable = frozenset(learnable or ())
        if learnable:
            raise ValidationError("FastFoodF has no learnable diagonals")
    else:
        learnable = LEARNABLE_S if learnable is None else frozenset(learnable)
        if learnable not in (LEARNABLE_S, LEARNABLE_SGB):
            raise ValidationError(f"FastFoodL learnable set must be {{S}} or {{S, G, B}}, got {sorted(learnable)}")
    dp = spec.padded_dim
    S, G, B, P = [], [], [], []
    for b in range(math.ceil(spec.num_features / dp)):
        gen = _block_stream(spec, b).generator()
        B.append(rademacher(gen, dp))
        P.append(random_permutation(gen, dp))
        g = gaussian(gen, dp)
        G.append(g)
        S.append(chi_sample(gen, dp, size=dp) / np.linalg.norm(g))
    params = FastFoodParams(np.array(S), np.array(G), np.array(B), np.array(P), learnable)
    return WeightMatrix(spec, implicit=params, metadata={"padded_dim": dp, "learnable": sorted(learnable)})


_BUILDERS = {
    Family.BASE: build_base,
    Family.ORF: build_orf,
    Family.SORF: build_sorf,
    Family.QMC: build_qmc,
    Family.MM: build_mm,
    Family.SGQ: build_sgq,
    Family.FASTFOOD_F: build_fastfood,
    Family.FASTFOOD_L: build_fastfood,
}


def build_weight_matrix(spec: WeightMatrixSpec, learnable=None) -> WeightMatrix:
    if learnable is not None:
        return build_fastfood(spec, learnable)
    return _BUILDERS[spec.family](spec)


def fastfood_update(params: FastFoodParams, grads: dict, step: float) -> FastFoodParams:
    """One gradient-descent step on the learnable FastFood diagonals.

    ``grads`` maps diagonal names to arrays shaped like the diagonal. A
    gradient for a frozen diagonal is a caller error. ``S`` is floored at
    1e-8; a learnable ``B`` is updated as an unconstrained real vector.
    """
    if step < 0:
        raise ContractError("step must be non-negative")
    frozen = set(grads) - set(params.learnable)
    if frozen:
        raise ContractError(f"gradient supplied for frozen diagonal(s) {sorted(frozen)}")
    updated = {}
    for name, g in grads.items():
        current = getattr(params, name)
        g = np.asarray(g, dtype=np.float64)
        if g.shape != current.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, expected {current.shape}")
        updated[name] = current - step * g
    if "S" in updated:
        updated["S"] = np.maximum(updated["S"], S_FLOOR)
    return replace(params, **updated)


# ---------------------------------------------------------- structured forms


def _sorf_dense(p: SORFParams, spec: WeightMatrixSpec) -> np.ndarray:
    dp = p.padded_dim
    H = hadamard_matrix(dp)
    scale = math.sqrt(dp) / spec.sigma
    blocks = [scale * (H * d1) @ (H * d2) @ (H * d3) for d1, d2, d3 in p.diagonals]
    return np.concatenate(blocks, axis=0)[: spec.num_features]


def _fastfood_dense(p: FastFoodParams, spec: WeightMatrixSpec) -> np.ndarray:
    dp = p.padded_dim
    H = hadamard_matrix(dp)
    scale = math.sqrt(dp) / spec.sigma
    blocks = []
    for S, G, B, perm in zip(p.S, p.G, p.B, p.perm):
        Pi = np.zeros((dp, dp))
        Pi[np.arange(dp), perm] = 1.0
        blocks.append(scale * (S[:, None] * H) @ (G[:, None] * Pi) @ (H * B))
    return np.concatenate(blocks, axis=0)[: spec.num_features]


def _implicit_project(p, spec: WeightMatrixSpec, Xp: np.ndarray) -> np.ndarray:
    n, dp = Xp.shape
    scale = math.sqrt(dp) / spec.sigma
    if isinstance(p, SORFParams):
        D1, D2, D3 = (p.diagonals[:, k][None] for k in range(3))
        y = fwht_normalized(Xp[:, None, :] * D3)
        y = fwht_normalized(y * D2)
        y = fwht_normalized(y * D1)
    else:
        y = fwht_normalized(Xp[:, None, :] * p.B[None])
        y = np.take_along_axis(y, np.broadcast_to(p.perm[None], y.shape), axis=2)
        y = fwht_normalized(y * p.G[None]) * p.S[None]
    return (scale * y).reshape(n, -1)[:, : spec.num_features]
