"""Run component x weight-matrix combinations on synthetic data and score them."""

from __future__ import annotations

import math
import time
import tracemalloc
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from rfattn.attention import (
    AttentionBatch,
    attention_error,
    exact_softmax_attention,
    feature_attention,
)
from rfattn.component_functions import RBF, FeatureMap, Kind, build_feature_map, rbf_kernel
from rfattn.errors import RFAttnError, ValidationError
from rfattn.numerics import RngStream, derive_seed
from rfattn.weight_matrices import (
    DETERMINISTIC_FAMILIES,
    LEARNABLE_S,
    LEARNABLE_SGB,
    Family,
    WeightMatrixSpec,
    build_fastfood,
    build_weight_matrix,
    fastfood_update,
)

COMPONENTS = tuple(k.value for k in Kind)
MATRICES = tuple(f.value for f in Family)
GRID_COMPONENTS = ("posrf", "oprf", "saderf")
GRID_MATRICES = ("orf", "sorf", "qmc", "mm", "sgq", "fastfood_l")


@dataclass(frozen=True)
class RunConfig:
    """Knobs for one benchmark cell.

    Attention rows are drawn so that after the ``d_k ** -0.25`` temperature
    scaling their norms are about ``input_scale``; kernel pairs are drawn
    directly at norm about ``input_scale``.
    """

    component: str = "posrf"
    matrix: str = "orf"
    s: int = 128
    d: int = 16
    d_v: int = 16
    N: int = 64
    sigma: float = 1.0
    d_k: int | None = None
    num_pairs: int = 20
    num_rebuilds: int = 50
    seed: int = 0
    input_scale: float = 1.0
    output_path: str = ""

    def __post_init__(self):
        if self.component not in COMPONENTS:
            raise ValidationError(f"unknown component {self.component!r}; choose from {', '.join(COMPONENTS)}")
        if self.matrix not in MATRICES:
            raise ValidationError(f"unknown matrix {self.matrix!r}; choose from {', '.join(MATRICES)}")
        if self.d_k is None:
            object.__setattr__(self, "d_k", self.d)
        for name in ("s", "d", "d_v", "N", "d_k", "num_pairs", "num_rebuilds"):
            if int(getattr(self, name)) < 1:
                raise ValidationError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not (self.sigma > 0 and math.isfinite(self.sigma)):
            raise ValidationError("sigma must be positive")
        if not (self.input_scale > 0 and math.isfinite(self.input_scale)):
            raise ValidationError("input_scale must be positive")
        if not (0 <= self.seed < 1 << 64):
            raise ValidationError("seed must be an unsigned 64-bit integer")
        if self.matrix == "mm" and self.s < self.d + 1:
            raise ValidationError(f"mm needs s >= d + 1, got s={self.s}, d={self.d}")

    @property
    def deterministic(self) -> bool:
        return Family(self.matrix) in DETERMINISTIC_FAMILIES

    def weight_spec(self, rebuild: int = 0) -> WeightMatrixSpec:
        return WeightMatrixSpec(self.matrix, self.s, self.d, self.sigma, derive_seed(self.seed, "weights", rebuild))

    def to_dict(self) -> dict:
        return asdict(self)


TIMING_FIELDS = ("wall_time_s", "peak_bytes")


@dataclass
class BenchReport:
    config: dict
    kernel_mse: float
    kernel_bias: float
    estimator_variance: float
    attention_max_row_l2: float | None
    attention_mean_rel: float | None
    wall_time_s: float
    peak_bytes: int
    degenerate_rows: int
    build_metadata: dict = field(default_factory=dict)

    def to_dict(self, timing: bool = True) -> dict:
        out = asdict(self)
        if not timing:
            for name in TIMING_FIELDS:
                out.pop(name)
        return out

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


# ------------------------------------------------------------ synthetic data


def kernel_pairs(config: RunConfig) -> tuple[np.ndarray, np.ndarray]:
    gen = RngStream(config.seed).substream("data", "pairs").generator()
    c = config.input_scale / math.sqrt(config.d)
    return c * gen.standard_normal((config.num_pairs, config.d)), c * gen.standard_normal((config.num_pairs, config.d))


def attention_batch(config: RunConfig) -> AttentionBatch:
    gen = RngStream(config.seed).substream("data", "attention").generator()
    c = config.input_scale * config.d_k**0.25 / math.sqrt(config.d)
    Q = c * gen.standard_normal((config.N, config.d))
    K = c * gen.standard_normal((config.N, config.d))
    V = gen.standard_normal((config.N, config.d_v))
    return AttentionBatch(Q, K, V, config.d_k)


def build_map(config: RunConfig, rebuild: int = 0) -> FeatureMap:
    return build_feature_map(build_weight_matrix(config.weight_spec(rebuild)), config.component)


# -------------------------------------------------------------- single cell


class _PeakMemory:
    def __enter__(self):
        self.started = not tracemalloc.is_tracing()
        if self.started:
            tracemalloc.start()
        tracemalloc.reset_peak()
        self.base = tracemalloc.get_traced_memory()[0]
        return self

    def __exit__(self, *exc):
        self.peak = max(0, tracemalloc.get_traced_memory()[1] - self.base)
        if self.started:
            tracemalloc.stop()
        return False


def _clean(x):
    x = float(x)
    return None if math.isnan(x) else x


def run_combination(config: RunConfig) -> BenchReport:
    """Score one (component, matrix) cell.

    Kernel statistics come from ``num_rebuilds`` independent weight matrices
    (one for deterministic families) evaluated on a fixed pair set; attention
    error comes from the first rebuild on one synthetic batch.
    """
    t0 = time.perf_counter()
    with _PeakMemory() as mem:
        X, Y = kernel_pairs(config)
        rebuilds = 1 if config.deterministic else config.num_rebuilds
        est = np.empty((rebuilds, config.num_pairs))
        target = None
        fm0 = None
        for r in range(rebuilds):
            fm = build_map(config, r).calibrate(X, Y)
            est[r] = fm.estimate(X, Y)
            if r == 0:
                fm0, target = fm, fm.target_kernel(X, Y)
        err = est - target
        bias_per_pair = err.mean(axis=0)

        batch = attention_batch(config)
        approx = feature_attention(batch, build_map(config, 0), strict=False)
        errors = attention_error(approx, exact_softmax_attention(batch))

        meta = dict(fm0.weight_matrix.metadata)
        meta.update(
            deterministic=config.deterministic,
            effective_rebuilds=rebuilds,
            kernel_target=fm0.target,
            pair_gerf_A=fm0.component.gerf_A,
        )
    return BenchReport(
        config=config.to_dict(),
        kernel_mse=float(np.mean(err**2)),
        kernel_bias=float(bias_per_pair.mean()),
        estimator_variance=0.0 if rebuilds == 1 else float(np.mean(est.var(axis=0))),
        attention_max_row_l2=_clean(errors.max_row_l2),
        attention_mean_rel=_clean(errors.rel_frobenius),
        wall_time_s=time.perf_counter() - t0,
        peak_bytes=int(mem.peak),
        degenerate_rows=len(approx.degenerate_rows),
        build_metadata=meta,
    )


# --------------------------------------------------------------------- grid


@dataclass
class GridResult:
    reports: list  # BenchReport per successful cell, in grid order
    cells: list  # (component, matrix) per grid cell
    failures: dict  # (component, matrix) -> error message
    summary: list  # one dict per cell, see summary_rows

    def report_for(self, component, matrix):
        for r in self.reports:
            if r.config["component"] == component and r.config["matrix"] == matrix:
                return r
        return None


def _run_cell(base_config, component, matrix):
    try:
        return run_combination(replace(base_config, component=component, matrix=matrix)), None
    except (RFAttnError, ArithmeticError) as exc:
        return None, f"{type(exc).__name__}: {exc}"


def _ranks(values):
    order = sorted((v, i) for i, v in enumerate(values) if v is not None)
    ranks = [None] * len(values)
    for rank, (_, i) in enumerate(order, start=1):
        ranks[i] = rank
    return ranks


def run_grid(base_config: RunConfig, components=GRID_COMPONENTS, matrices=GRID_MATRICES, workers: int = 1) -> GridResult:
    """Run every (component, matrix) cell sharing the base config's data seed.

    Cells run in a thread pool when ``workers > 1``; results are collected in
    grid order. A failing cell is recorded in ``failures`` and marked in the
    summary instead of aborting the grid.
    """
    cells = [(c, m) for c in components for m in matrices]
    # Invalid cells (e.g. mm with s <= d) fail inside _run_cell, like numeric failures.
    run = lambda cell: _run_cell(base_config, *cell)  # noqa: E731
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(run, cells))
    else:
        outcomes = [run(cell) for cell in cells]
    reports = [rep for rep, _ in outcomes if rep is not None]
    failures = {cell: msg for cell, (_, msg) in zip(cells, outcomes) if msg is not None}
    mse = [rep.kernel_mse if rep else None for rep, _ in outcomes]
    att = [rep.attention_mean_rel if rep else None for rep, _ in outcomes]
    summary = []
    for (c, m), (rep, msg), rk, ra in zip(cells, outcomes, _ranks(mse), _ranks(att)):
        summary.append({
            "component": c,
            "matrix": m,
            "status": "ok" if rep else "failed",
            "kernel_mse": rep.kernel_mse if rep else None,
            "estimator_variance": rep.estimator_variance if rep else None,
            "attention_mean_rel": rep.attention_mean_rel if rep else None,
            "rank_kernel_mse": rk,
            "rank_attention_mean_rel": ra,
            "error": msg or "",
        })
    return GridResult(reports, cells, failures, summary)


# ----------------------------------------------------------- FastFood learner


@dataclass
class FitTrace:
    losses: list
    learnable: list
    failed: bool
    final_params: object = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {"losses": [float(v) for v in self.losses], "learnable": self.learnable, "failed": self.failed}


def fit_fastfood_learner(config: RunConfig, target_sigma: float, steps: int, step_size: float,
                         learnable=LEARNABLE_S, eps: float = 1e-5) -> FitTrace:
    """Fit FastFoodL diagonals so the map's kernel matches an RBF of bandwidth ``target_sigma``.

    Plain gradient descent on the mean squared error over the config's fixed
    pair set, with central-difference gradients (step ``eps``) for every
    learnable scalar. The map is evaluated against its RBF target.
    """
    if config.matrix != Family.FASTFOOD_L.value:
        raise ValidationError("fit_fastfood_learner needs matrix=fastfood_l")
    if not target_sigma > 0:
        raise ValidationError("target_sigma must be positive")
    if steps < 0 or step_size < 0:
        raise ValidationError("steps and step_size must be non-negative")
    learnable = frozenset(learnable)
    if learnable not in (LEARNABLE_S, LEARNABLE_SGB):
        raise ValidationError("learnable must be {S} or {S, G, B}")
    if config.component == Kind.SADERF.value:
        raise ValidationError("saderf has no RBF target to fit")

    wm = build_fastfood(config.weight_spec(0), learnable)
    fm = build_feature_map(wm, config.component, target=RBF)
    X, Y = kernel_pairs(config)
    fm = fm.calibrate(X, Y)
    goal = rbf_kernel(X, Y, target_sigma)

    def loss(params):
        f = replace(fm, weight_matrix=wm.with_fastfood_params(params))
        return float(np.mean((f.estimate(X, Y) - goal) ** 2))

    names = sorted(learnable)
    params = wm.implicit
    losses = [loss(params)]
    for _ in range(steps):
        grads = {}
        for name in names:
            base = getattr(params, name)
            g = np.empty_like(base)
            for idx in np.ndindex(base.shape):
                up, down = base.copy(), base.copy()
                up[idx] += eps
                down[idx] -= eps
                g[idx] = (loss(replace(params, **{name: up})) - loss(replace(params, **{name: down}))) / (2 * eps)
            grads[name] = g
        params = fastfood_update(params, grads, step_size)
        losses.append(loss(params))
    failed = steps > 0 and losses[-1] >= losses[0]
    return FitTrace(losses, names, failed, params)
