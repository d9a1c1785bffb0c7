"""Low-rank compression of parameter deltas.

Each weight matrix is first split at rank ``r`` into two balanced factors
(``P x r`` and ``r x Q``). Each factor is then decomposed again and only
its leading singular triplets are kept. The count is the smallest one whose
explained variance exceeds ``alpha``, optionally pushed up within a small
window when that improves the AIC-style score ``K - log-likelihood`` on a
calibration batch.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from ..errors import CompressionError, ConfigurationError, CorruptUpdateError
from ..nncore import ModelParams, forward, svd

MODES = ("full", "variance_only", "aic_variance")
LIKELIHOOD_EPS = 1e-12


@dataclass
class DpdConfig:
    alpha: float = 0.98
    aic_window: int = 4
    calib_size: int = 32
    min_compress_elems: int = 1024
    mode: str = "aic_variance"

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ConfigurationError(f"alpha must lie in (0, 1], got {self.alpha}", key="alpha")
        if self.aic_window < 0:
            raise ConfigurationError("aic_window must be >= 0", key="aic_window")
        if self.calib_size < 1:
            raise ConfigurationError("calib_size must be >= 1", key="calib_size")
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}", key="mode")


@dataclass
class CompressedMatrix:
    name: str
    orig_dims: tuple
    P: int
    Q: int
    r: int = 0
    kind: str = "raw"
    raw: Optional[np.ndarray] = None
    u_p: Optional[np.ndarray] = None
    s_p: Optional[np.ndarray] = None
    v_p: Optional[np.ndarray] = None
    u_n: Optional[np.ndarray] = None
    s_n: Optional[np.ndarray] = None
    v_n: Optional[np.ndarray] = None

    @property
    def k_p(self) -> int:
        return 0 if self.s_p is None else len(self.s_p)

    @property
    def k_n(self) -> int:
        return 0 if self.s_n is None else len(self.s_n)

    @property
    def full_floats(self) -> int:
        return int(np.prod(self.orig_dims))

    @property
    def payload_floats(self) -> int:
        if self.kind == "raw":
            return self.full_floats
        return lowrank_floats(self.P, self.Q, self.r, self.k_p, self.k_n)

    def arrays(self) -> list[np.ndarray]:
        if self.kind == "raw":
            return [self.raw]
        return [self.u_p, self.s_p, self.v_p, self.u_n, self.s_n, self.v_n]


@dataclass
class CompressedUpdate:
    client_id: int
    sample_count: int
    matrices: list[CompressedMatrix] = field(default_factory=list)

    @property
    def uploaded_float_count(self) -> int:
        return sum(m.payload_floats for m in self.matrices)

    @property
    def full_float_count(self) -> int:
        return sum(m.full_floats for m in self.matrices)


def lowrank_floats(P: int, Q: int, r: int, k_p: int, k_n: int) -> int:
    return P * k_p + k_p + k_p * r + r * k_n + k_n + k_n * Q


def reshape_to_matrix(t: np.ndarray):
    t = np.asarray(t, dtype=np.float64)
    dims = tuple(t.shape)
    if t.ndim == 0:
        raise ValueError("scalar tensors are not supported")
    if t.ndim == 1:
        return t.reshape(1, -1), dims
    return t.reshape(dims[0], -1), dims


def split_rank(P: int, Q: int) -> int:
    lo, hi = min(P, Q), max(P, Q)
    return max(1, min(hi // lo, lo))


def factor_split(m: np.ndarray, r: Optional[int] = None):
    """Balanced rank-``r`` factors ``g_p`` (P x r) and ``g_n`` (r x Q)."""
    m = np.asarray(m, dtype=np.float64)
    if r is None:
        r = split_rank(*m.shape)
    u, s, vt = svd(m)
    root = np.sqrt(s[:r])
    return u[:, :r] * root, root[:, None] * vt[:r]


def variance_k(singulars, alpha: float) -> int:
    """Smallest K whose explained-variance ratio exceeds ``alpha``."""
    s2 = np.asarray(singulars, dtype=np.float64) ** 2
    total = s2.sum()
    if total <= 0:
        return 1
    ratio = np.cumsum(s2) / total
    above = np.nonzero(ratio > alpha)[0]
    return int(above[0]) + 1 if above.size else len(s2)


def select_k(singulars, cfg: DpdConfig, likelihood: Optional[Callable[[int], float]] = None) -> int:
    n = len(singulars)
    if n == 0:
        raise ValueError("empty spectrum")
    if cfg.mode == "full":
        return n
    k_star = variance_k(singulars, cfg.alpha)
    if cfg.mode == "variance_only":
        return k_star
    if likelihood is None:
        raise CompressionError("aic_variance selection needs a likelihood")
    best_k, best = k_star, None
    for k in range(k_star, min(k_star + cfg.aic_window, n) + 1):
        score = k - likelihood(k)
        if best is None or score < best:
            best_k, best = k, score
    return best_k


def aic(k: int, log_likelihood: float) -> float:
    return 2.0 * k - 2.0 * log_likelihood


class LikelihoodEvaluator:
    """Sum of clamped log-probabilities of the true labels under ``base + delta``."""

    def __init__(self, base: ModelParams, x: np.ndarray, y: np.ndarray):
        self.base = base
        self.x = x
        self.y = np.asarray(y, dtype=np.int64)

    def __call__(self, delta: dict[str, np.ndarray]) -> float:
        probs = forward(self.base.add(delta), self.x).probs
        picked = probs[np.arange(len(self.y)), self.y]
        return float(np.log(np.maximum(picked, LIKELIHOOD_EPS)).sum())


def _reconstruct(u, s, v):
    return (u * s) @ v


def _lowrank_or_raw(name, t, cfg, delta, evaluator) -> CompressedMatrix:
    m, dims = reshape_to_matrix(t)
    P, Q = m.shape
    raw = CompressedMatrix(name, dims, P, Q, raw=np.array(t, dtype=np.float64))
    if cfg.mode == "full" or m.size < cfg.min_compress_elems or min(P, Q) == 1:
        return raw
    r = split_rank(P, Q)
    g_p, g_n = factor_split(m, r)
    up, sp, vp = svd(g_p)
    un, sn, vn = svd(g_n)
    gp_full, gn_full = _reconstruct(up, sp, vp), _reconstruct(un, sn, vn)

    def lik(which):
        def f(k):
            if which == "p":
                rec = _reconstruct(up[:, :k], sp[:k], vp[:k]) @ gn_full
            else:
                rec = gp_full @ _reconstruct(un[:, :k], sn[:k], vn[:k])
            trial = dict(delta)
            trial[name] = rec.reshape(dims)
            try:
                return evaluator(trial)
            except Exception as exc:  # evaluator is user-supplied
                raise CompressionError(f"likelihood evaluation failed for {name}: {exc}") from exc
        return f

    need = cfg.mode == "aic_variance"
    k_p = select_k(sp, cfg, lik("p") if need else None)
    k_n = select_k(sn, cfg, lik("n") if need else None)
    if lowrank_floats(P, Q, r, k_p, k_n) >= P * Q:
        return raw
    return CompressedMatrix(
        name, dims, P, Q, r, "lowrank",
        u_p=up[:, :k_p], s_p=sp[:k_p], v_p=vp[:k_p],
        u_n=un[:, :k_n], s_n=sn[:k_n], v_n=vn[:k_n],
    )


def compress_update(delta: dict[str, np.ndarray], cfg: DpdConfig,
                    model_eval: Optional[Callable] = None,
                    client_id: int = 0, sample_count: int = 0) -> CompressedUpdate:
    """Compress every tensor of ``delta`` independently.

    ``model_eval(delta) -> log-likelihood`` is only consulted in
    ``aic_variance`` mode; ``delta`` order is preserved in the output.
    """
    if cfg.mode == "aic_variance" and model_eval is None:
        raise CompressionError("aic_variance mode needs a calibration evaluator")
    mats = [_lowrank_or_raw(name, t, cfg, delta, model_eval) for name, t in delta.items()]
    return CompressedUpdate(client_id, sample_count, mats)


def reconstruct_matrix(c: CompressedMatrix) -> np.ndarray:
    if c.kind == "raw":
        out = np.asarray(c.raw, dtype=np.float64)
        if out.size != c.full_floats:
            raise CorruptUpdateError(f"{c.name}: raw payload has {out.size} values, dims {c.orig_dims}")
        return out.reshape(c.orig_dims)
    try:
        left = _reconstruct(c.u_p, c.s_p, c.v_p)
        right = _reconstruct(c.u_n, c.s_n, c.v_n)
        m = left @ right
    except (ValueError, TypeError) as exc:
        raise CorruptUpdateError(f"{c.name}: inconsistent factor shapes") from exc
    if m.shape != (c.P, c.Q) or c.P * c.Q != c.full_floats:
        raise CorruptUpdateError(f"{c.name}: reconstruction {m.shape} does not match {c.orig_dims}")
    return m.reshape(c.orig_dims)


def decompress_update(c: CompressedUpdate) -> dict[str, np.ndarray]:
    return {m.name: reconstruct_matrix(m) for m in c.matrices}
