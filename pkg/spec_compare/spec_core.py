"""
SPEC pipeline: differential covariance -> Gamma -> eigenpairs -> sample-space
eigenvectors -> cluster reports.

Gamma = [[C1, C12], [-C12^T, -C2]] shares the non-zero eigenvalues of the
n x n difference kernel Lambda = (K1 - K2) / n, so everything after the single
accumulation pass costs O((d1 + d2)^3) regardless of n.
"""

import logging
from contextlib import contextmanager
from dataclasses import dataclass, field
from functools import cmp_to_key
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg
from tqdm import tqdm

from spec_compare.config import SpecConfig
from spec_compare.errors import NumericalError, SpecError, StageError, ValidationError
from spec_compare.io_model import EmbeddingSet, PairedDataset, load_embedding_set, pair
from spec_compare.kernels import FeatureMap, build_feature_map, kernel_matrix, select_bandwidth

logger = logging.getLogger(__name__)

IMAGINARY_TOL = 1e-8
NULL_U_TOL = 1e-12
# |lambda| <= ZERO_EIGENVALUE_TOL * tr(G) is null space; tr(G) scales with the data
ZERO_EIGENVALUE_TOL = 1e-10
# smallest squared Cholesky pivot accepted, relative to tr(G)
CHOLESKY_PIVOT_TOL = 1e-10


@dataclass(frozen=True)
class DifferentialCovariance:
    C1: np.ndarray
    C2: np.ndarray
    C12: np.ndarray
    n_seen: int

    @property
    def d1(self) -> int:
        return self.C1.shape[0]

    @property
    def d2(self) -> int:
        return self.C2.shape[0]


@dataclass(frozen=True)
class GammaMatrix:
    dense: np.ndarray
    d1: int
    d2: int

    @property
    def size(self) -> int:
        return self.d1 + self.d2

    @property
    def signs(self) -> np.ndarray:
        return np.concatenate([np.ones(self.d1), -np.ones(self.d2)])

    def gram(self) -> np.ndarray:
        """G = S Gamma = [[C1, C12], [C12^T, C2]], symmetric PSD."""
        G = self.signs[:, None] * self.dense
        return 0.5 * (G + G.T)

    def frobenius(self) -> float:
        return float(np.linalg.norm(self.dense))

    def null_tol(self) -> float:
        """Eigenvalue magnitude at or below which a pair counts as null space."""
        return ZERO_EIGENVALUE_TOL * float(np.sum(self.signs * np.diag(self.dense)))


@dataclass(frozen=True)
class SpecEigenpair:
    lam: float
    v: np.ndarray
    u: np.ndarray


@dataclass(frozen=True)
class ClusterReport:
    rank: int
    eigenvalue: float
    side: str
    sample_ids: Tuple[str, ...]
    weights: Tuple[float, ...]
    indices: Tuple[int, ...] = ()


@dataclass
class SpecResult:
    eigenpairs: List[SpecEigenpair]
    clusters: List[ClusterReport]
    spec_diff: float
    config: Dict[str, Any]
    eigenvalues: Optional[np.ndarray] = None  # retained non-null Gamma spectrum, descending
    diagnostics: Dict[str, Any] = field(default_factory=dict)

    def side(self, side: str) -> List[ClusterReport]:
        return [c for c in self.clusters if c.side == side]


# --------------------------------------------------------------------------
# Accumulation
# --------------------------------------------------------------------------

def _chunk_features(fmap: FeatureMap, rows: np.ndarray, ids: Sequence[str], start: int) -> np.ndarray:
    if fmap.spec.kind == "cosine":
        zero = np.flatnonzero(np.linalg.norm(rows, axis=1) == 0)
        if zero.size:
            raise ValidationError(f"zero vector under cosine kernel for sample '{ids[start + zero[0]]}'")
    features = fmap.transform(rows)
    bad = np.flatnonzero(~np.isfinite(features).all(axis=1))
    if bad.size:
        raise ValidationError(f"non-finite feature for sample '{ids[start + bad[0]]}'")
    return features


def _accumulate_blocks(chunks, n: int, d1: int, d2: int) -> DifferentialCovariance:
    C1 = np.zeros((d1, d1))
    C2 = np.zeros((d2, d2))
    C12 = np.zeros((d1, d2))
    seen = 0
    # fixed chunk order keeps the sums reproducible
    for F1, F2 in chunks:
        C1 += F1.T @ F1
        C2 += F2.T @ F2
        C12 += F1.T @ F2
        seen += F1.shape[0]
    if seen != n:
        raise NumericalError(f"accumulated {seen} samples, expected {n}")
    C1 = 0.5 * (C1 + C1.T) / n
    C2 = 0.5 * (C2 + C2.T) / n
    C12 /= n
    return DifferentialCovariance(C1=C1, C2=C2, C12=C12, n_seen=n)


def accumulate(
    paired: PairedDataset,
    map1: FeatureMap,
    map2: FeatureMap,
    chunk_size: int = 4096,
    progress: bool = False,
) -> DifferentialCovariance:
    """
    Single pass over the samples, summing (1/n) phi phi^T blocks.

    Memory stays O(d1^2 + d2^2 + d1*d2 + chunk_size*max(d1, d2)).
    """
    if map1.input_dim != paired.a.d or map2.input_dim != paired.b.d:
        raise ValidationError(
            f"feature maps expect widths ({map1.input_dim}, {map2.input_dim}), "
            f"embeddings have ({paired.a.d}, {paired.b.d})"
        )
    if chunk_size < 1:
        raise ValidationError("chunk_size must be >= 1")

    n = paired.n
    ids = paired.ids
    starts = range(0, n, chunk_size)

    def chunks():
        for start in tqdm(starts, desc="Accumulating", disable=not progress, leave=False):
            stop = min(start + chunk_size, n)
            F1 = _chunk_features(map1, paired.a.data[start:stop], ids, start)
            F2 = _chunk_features(map2, paired.b.data[start:stop], ids, start)
            yield F1, F2

    cov = _accumulate_blocks(chunks(), n, map1.output_dim, map2.output_dim)
    logger.info(f"Accumulated differential covariance over {n} samples (d1={cov.d1}, d2={cov.d2})")
    return cov


def covariance_from_features(F1: np.ndarray, F2: np.ndarray, chunk_size: Optional[int] = None) -> DifferentialCovariance:
    F1 = np.asarray(F1, dtype=np.float64)
    F2 = np.asarray(F2, dtype=np.float64)
    if F1.shape[0] != F2.shape[0]:
        raise ValidationError(f"sample count mismatch: {F1.shape[0]} vs {F2.shape[0]}")
    n = F1.shape[0]
    chunk_size = chunk_size or n
    chunks = ((F1[s:s + chunk_size], F2[s:s + chunk_size]) for s in range(0, n, chunk_size))
    return _accumulate_blocks(chunks, n, F1.shape[1], F2.shape[1])


# --------------------------------------------------------------------------
# Gamma and its eigendecomposition
# --------------------------------------------------------------------------

def build_gamma(cov: DifferentialCovariance) -> GammaMatrix:
    d1, d2 = cov.d1, cov.d2
    dense = np.block([[cov.C1, cov.C12], [-cov.C12.T, -cov.C2]])

    if not (
        np.array_equal(dense[:d1, :d1], cov.C1)
        and np.array_equal(dense[:d1, d1:], cov.C12)
        and np.array_equal(dense[d1:, :d1], -cov.C12.T)
        and np.array_equal(dense[d1:, d1:], -cov.C2)
    ):
        raise NumericalError("Gamma block assembly does not match the covariance blocks")
    return GammaMatrix(dense=dense, d1=d1, d2=d2)


def _gram_factor(G: np.ndarray) -> np.ndarray:
    """
    L with G = L L^T.

    Cholesky when every pivot is safely positive, otherwise the spectral factor
    Q sqrt(w) over the numerically non-zero eigenvalues of G.
    """
    scale = max(float(np.trace(G)), np.finfo(float).tiny)
    try:
        L = linalg.cholesky(G, lower=True)
        if np.min(np.diag(L)) ** 2 > CHOLESKY_PIVOT_TOL * scale:
            return L
        reason = "small pivot"
    except linalg.LinAlgError:
        reason = "not positive definite"

    logger.warning(f"Cholesky of G rejected ({reason}), using rank-revealing spectral factor")
    w, Q = linalg.eigh(G)
    keep = w > CHOLESKY_PIVOT_TOL * scale
    return Q[:, keep] * np.sqrt(w[keep])


def _symmetric_reduction(gamma: GammaMatrix) -> Tuple[np.ndarray, np.ndarray]:
    # Gamma = S G and G = L L^T, so Gamma is similar (on range(L)) to L^T S L,
    # and an eigenvector w of L^T S L maps to the Gamma eigenvector S L w.
    s = gamma.signs
    L = _gram_factor(gamma.gram())
    M = L.T @ (s[:, None] * L)
    M = 0.5 * (M + M.T)
    if M.size == 0:
        return np.zeros(0), np.zeros((gamma.size, 0))
    w, Wv = linalg.eigh(M)
    V = s[:, None] * (L @ Wv)
    return w, V


def _general(gamma: GammaMatrix) -> Tuple[np.ndarray, np.ndarray]:
    try:
        w, V = linalg.eig(gamma.dense)
    except linalg.LinAlgError as e:
        raise NumericalError(f"dense eigensolver failed: {e}")
    limit = IMAGINARY_TOL * max(gamma.frobenius(), 1.0)
    worst = float(np.max(np.abs(w.imag))) if w.size else 0.0
    if worst > limit:
        raise NumericalError(
            f"Gamma produced eigenvalues with imaginary part {worst:.3g} > {limit:.3g}; block assembly is broken"
        )
    return w.real, V.real


def eigendecompose_gamma(gamma: GammaMatrix, strategy: str = "symmetric_reduction") -> List[Tuple[float, np.ndarray]]:
    """Real eigenpairs (lambda, v) of Gamma, v unit norm, sorted by descending lambda."""
    if not np.all(np.isfinite(gamma.dense)):
        raise NumericalError("Gamma contains non-finite entries")
    if strategy == "symmetric_reduction":
        w, V = _symmetric_reduction(gamma)
    elif strategy == "general":
        w, V = _general(gamma)
    else:
        raise ValidationError(f"unknown strategy '{strategy}'")

    norms = np.linalg.norm(V, axis=0)
    norms[norms == 0] = 1.0
    V = V / norms
    order = np.argsort(-w, kind="stable")
    return [(float(w[i]), V[:, i].copy()) for i in order]


def retain_pairs(pairs: Sequence[Tuple[float, np.ndarray]], limit: int) -> List[Tuple[float, np.ndarray]]:
    """The `limit` pairs of largest |lambda|, back in descending lambda order."""
    if len(pairs) <= limit:
        return list(pairs)
    by_magnitude = sorted(range(len(pairs)), key=lambda i: -abs(pairs[i][0]))
    return [pairs[i] for i in sorted(by_magnitude[:limit])]


# --------------------------------------------------------------------------
# Sample-space eigenvectors and clusters
# --------------------------------------------------------------------------

def _orient(u: np.ndarray) -> float:
    """+1 or -1 so that the largest-|entry| of u becomes positive."""
    return -1.0 if u[np.argmax(np.abs(u))] < 0 else 1.0


def _pair_order(p: SpecEigenpair, q: SpecEigenpair) -> int:
    if p.lam != q.lam:
        return -1 if p.lam > q.lam else 1
    diff = np.flatnonzero(p.u != q.u)
    if diff.size == 0:
        return 0
    i = diff[0]
    return -1 if p.u[i] > q.u[i] else 1


def map_eigenvectors(
    paired: PairedDataset,
    map1: FeatureMap,
    map2: FeatureMap,
    pairs: Sequence[Tuple[float, np.ndarray]],
    chunk_size: int = 4096,
    progress: bool = False,
    zero_tol: Optional[float] = None,
) -> List[SpecEigenpair]:
    """
    u_i = [Phi1 Phi2] v_i, streamed over the samples.

    Pairs whose u vanishes (||u|| < 1e-12) or whose |lambda| is at most
    `zero_tol` are null-space artifacts and are dropped. `zero_tol` defaults to
    ZERO_EIGENVALUE_TOL * tr(G), with tr(G) measured in the same pass.
    """
    if not pairs:
        return []
    width = map1.output_dim + map2.output_dim
    V = np.column_stack([np.asarray(v, dtype=np.float64) for _, v in pairs])
    if V.shape[0] != width:
        raise ValidationError(f"dimension mismatch: eigenvectors have length {V.shape[0]}, feature width is {width}")
    V = V / np.linalg.norm(V, axis=0)
    lams = np.array([lam for lam, _ in pairs])

    n = paired.n
    U = np.empty((n, V.shape[1]))
    energy = 0.0
    for start in tqdm(range(0, n, chunk_size), desc="Mapping eigenvectors", disable=not progress, leave=False):
        stop = min(start + chunk_size, n)
        F = np.hstack([
            _chunk_features(map1, paired.a.data[start:stop], paired.ids, start),
            _chunk_features(map2, paired.b.data[start:stop], paired.ids, start),
        ])
        U[start:stop] = F @ V
        energy += float(np.sum(F * F))

    if zero_tol is None:
        zero_tol = ZERO_EIGENVALUE_TOL * energy / n
    norms = np.linalg.norm(U, axis=0)

    result = []
    for i, lam in enumerate(lams):
        if norms[i] < NULL_U_TOL or abs(lam) <= zero_tol:
            continue
        u = U[:, i] / norms[i]
        sign = _orient(u)
        result.append(SpecEigenpair(lam=float(lam), v=sign * V[:, i], u=sign * u))

    dropped = len(lams) - len(result)
    if dropped:
        logger.debug(f"Null filter dropped {dropped} of {len(lams)} eigenpairs")
    return sorted(result, key=cmp_to_key(_pair_order))


def extract_clusters(
    pairs: Sequence[SpecEigenpair],
    top_k: int,
    top_r: int,
    ids: Sequence[str],
    zero_tol: float = 0.0,
) -> List[ClusterReport]:
    """
    Top-r samples of the top-k eigenvectors on each side (A: lambda > zero_tol,
    B: lambda < -zero_tol). Pass the tolerance used by map_eigenvectors.
    """
    if top_k < 1 or top_r < 1:
        raise ValidationError(f"top_k and top_r must be >= 1, got {top_k}, {top_r}")

    positive = sorted((p for p in pairs if p.lam > zero_tol), key=lambda p: -p.lam)
    negative = sorted((p for p in pairs if p.lam < -zero_tol), key=lambda p: p.lam)

    clusters = []
    for side, chosen in (("A", positive[:top_k]), ("B", negative[:top_k])):
        for rank, p in enumerate(chosen, start=1):
            order = np.argsort(-p.u, kind="stable")[: min(top_r, p.u.size)]
            clusters.append(ClusterReport(
                rank=rank,
                eigenvalue=p.lam,
                side=side,
                sample_ids=tuple(ids[i] for i in order),
                weights=tuple(float(p.u[i]) for i in order),
                indices=tuple(int(i) for i in order),
            ))
    return clusters


# --------------------------------------------------------------------------
# Direct n x n path
# --------------------------------------------------------------------------

def difference_kernel_matrix(paired: PairedDataset, map1: FeatureMap, map2: FeatureMap, cap: int = 2000) -> np.ndarray:
    if paired.n > cap:
        raise ValidationError(f"n={paired.n} exceeds the direct-path cap of {cap}")
    Lam = (kernel_matrix(paired.a, map1) - kernel_matrix(paired.b, map2)) / paired.n
    return 0.5 * (Lam + Lam.T)


def spec_direct_oracle(paired: PairedDataset, map1: FeatureMap, map2: FeatureMap, cap: int = 2000) -> List[Tuple[float, np.ndarray]]:
    """Every eigenpair of Lambda, descending, sign-oriented. O(n^3)."""
    Lam = difference_kernel_matrix(paired, map1, map2, cap=cap)
    w, U = linalg.eigh(Lam)
    pairs = []
    for i in np.argsort(-w, kind="stable"):
        u = U[:, i]
        pairs.append((float(w[i]), _orient(u) * u))
    return pairs


# --------------------------------------------------------------------------
# End to end
# --------------------------------------------------------------------------

@contextmanager
def _stage(name: str):
    try:
        yield
    except StageError:
        raise
    except SpecError as e:
        raise StageError(name, e) from e
    except OSError as e:
        raise StageError(name, ValidationError(str(e))) from e


def resolve_feature_maps(paired: PairedDataset, config: SpecConfig) -> Tuple[FeatureMap, FeatureMap, Dict[str, float]]:
    """Feature maps for both sides, selecting missing Gaussian bandwidths first."""
    maps = []
    selected = {}
    for side, emb in (("a", paired.a), ("b", paired.b)):
        kind = getattr(config, f"kernel_{side}")
        sigma = getattr(config, f"sigma_{side}")
        if kind == "gaussian_rff" and sigma is None:
            if config.bandwidth_target is None:
                raise ValidationError(f"gaussian_rff on side {side.upper()} needs sigma_{side} or bandwidth_target")
            sigma = select_bandwidth(emb, config.bandwidth_target, config.bandwidth_tol, m=config.rff_dim, seed=config.seed)
            selected[f"sigma_{side}"] = sigma
        maps.append(build_feature_map(config.kernel_spec(side, sigma), emb.d))
    return maps[0], maps[1], selected


def run_spec_paired(paired: PairedDataset, config: SpecConfig) -> SpecResult:
    with _stage("kernels"):
        map1, map2, selected = resolve_feature_maps(paired, config)
    with _stage("accumulate"):
        cov = accumulate(paired, map1, map2, chunk_size=config.chunk_size, progress=config.progress)
    with _stage("gamma"):
        gamma = build_gamma(cov)
    with _stage("eigendecompose"):
        spectrum = eigendecompose_gamma(gamma, strategy=config.strategy)
        zero_tol = gamma.null_tol()
        pairs = retain_pairs(spectrum, min(paired.n, gamma.size))
    with _stage("map"):
        eigenpairs = map_eigenvectors(paired, map1, map2, pairs, chunk_size=config.chunk_size,
                                      progress=config.progress, zero_tol=zero_tol)
    with _stage("clusters"):
        clusters = extract_clusters(eigenpairs, config.top_k, config.top_r, paired.ids, zero_tol=zero_tol)

    spec_diff = max((abs(lam) for lam, _ in spectrum), default=0.0)
    eigenvalues = np.array([lam for lam, _ in pairs if abs(lam) > zero_tol])
    result = SpecResult(
        eigenpairs=eigenpairs,
        clusters=clusters,
        spec_diff=spec_diff,
        config=config.to_dict(),
        eigenvalues=eigenvalues,
    )
    if selected:
        result.diagnostics["bandwidth"] = selected
    logger.info(
        f"✓ SPEC done: spec_diff={spec_diff:.6g}, {len(eigenpairs)} eigenpairs, "
        f"{len(result.side('A'))} A / {len(result.side('B'))} B clusters"
    )
    return result


def load_pair(config: SpecConfig) -> PairedDataset:
    with _stage("load"):
        if not config.emb_a or not config.emb_b:
            raise ValidationError("both emb_a and emb_b are required")
        a: EmbeddingSet = load_embedding_set(config.emb_a, header=config.header)
        b: EmbeddingSet = load_embedding_set(config.emb_b, header=config.header)
        return pair(a, b)


def run_spec(config: SpecConfig) -> SpecResult:
    return run_spec_paired(load_pair(config), config)
