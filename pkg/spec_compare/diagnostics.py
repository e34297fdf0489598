"""
Numerical certificates and cluster validation.

The separation certificate and its corollary hold unconditionally once the
coupling terms eps1/eps2 are measured from the kernels themselves, so a
failing certificate is a bug signal rather than a data property. The RFF
residual bound is probabilistic (holds with probability >= 1 - delta).
"""

import logging
import warnings
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy import linalg
from scipy.spatial.distance import pdist
from sklearn.cluster import KMeans
from sklearn.exceptions import ConvergenceWarning
from sklearn.metrics import adjusted_mutual_info_score, normalized_mutual_info_score
from tqdm import tqdm

from spec_compare.errors import ValidationError
from spec_compare.io_model import LabelVector, PairedDataset
from spec_compare.kernels import KernelSpec, build_feature_map, exact_gaussian_kernel_matrix
from spec_compare.spec_core import ClusterReport, SpecResult, spec_direct_oracle

logger = logging.getLogger(__name__)

PSD_TOL = 1e-8
DIAGONAL_TOL = 1e-8
CERTIFICATE_SLACK = 1e-12


@dataclass(frozen=True)
class SeparationCertificate:
    index_set: tuple
    eps1: float
    eps2: float
    xi: float
    lhs: float
    satisfied: bool

    def to_dict(self):
        d = asdict(self)
        d["index_set"] = list(self.index_set)
        return d


@dataclass(frozen=True)
class CorollaryCheck:
    eigen_index: int
    eigenvalue: float
    gap: float
    bound: Optional[float]
    actual_tail_norm: float
    applicable: bool
    satisfied: Optional[bool]

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class RffResidualReport:
    m: int
    delta: float
    residual_sum: float
    bound: float
    satisfied: bool

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class ClusterValidation:
    ami_a: float
    ami_b: float
    nmi_a: float
    nmi_b: float
    runs: int
    k: int
    similarity: Dict = field(default_factory=dict)
    distances: Dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


# --------------------------------------------------------------------------
# Kernel-block certificates
# --------------------------------------------------------------------------

def _check_kernel(K: np.ndarray, name: str) -> np.ndarray:
    K = np.asarray(K, dtype=np.float64)
    if K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise ValidationError(f"{name} must be square, got shape {K.shape}")
    K = 0.5 * (K + K.T)
    if np.max(np.abs(np.diag(K) - 1.0)) > DIAGONAL_TOL:
        raise ValidationError(f"{name} must have a unit diagonal (normalized kernel)")
    w = linalg.eigvalsh(K)
    if w[0] < -PSD_TOL * max(1.0, w[-1]):
        raise ValidationError(f"{name} is not PSD (smallest eigenvalue {w[0]:.3g})")
    return K


def _split(index_set: Sequence[int], n: int):
    I = np.unique(np.asarray(list(index_set), dtype=np.int64))
    if I.size == 0 or I.size >= n or I[0] < 0 or I[-1] >= n:
        raise ValidationError(f"index set must be a nonempty proper subset of 0..{n - 1}")
    mask = np.zeros(n, dtype=bool)
    mask[I] = True
    return I, np.flatnonzero(~mask)


def _coupling(K1: np.ndarray, K2: np.ndarray, I: np.ndarray, Ic: np.ndarray):
    n = K1.shape[0]
    eps1 = float(np.linalg.norm(K1[np.ix_(I, Ic)]) / n)
    eps2 = float(max(linalg.eigvalsh(K2[np.ix_(I, I)] / n)[-1], 0.0))
    return eps1, eps2


def _closest(values: np.ndarray, target: float) -> float:
    # values ascending, so argmin resolves exact ties to the smaller eigenvalue
    return float(values[np.argmin(np.abs(values - target))])


def theorem1_certificate(K1, K2, index_set: Sequence[int]) -> SeparationCertificate:
    K1 = _check_kernel(K1, "K1")
    K2 = _check_kernel(K2, "K2")
    if K1.shape != K2.shape:
        raise ValidationError(f"kernel shapes differ: {K1.shape} vs {K2.shape}")
    n = K1.shape[0]
    I, Ic = _split(index_set, n)

    eps1, eps2 = _coupling(K1, K2, I, Ic)
    xi = 4.0 * (eps1 ** 2 + eps2)

    Lam = (K1 - K2) / n
    w, V = linalg.eigh(Lam)
    w_I = linalg.eigvalsh(Lam[np.ix_(I, I)])
    w_Ic = linalg.eigvalsh(Lam[np.ix_(Ic, Ic)])

    tail_I = np.sum(V[I] ** 2, axis=0)
    tail_Ic = np.sum(V[Ic] ** 2, axis=0)
    lhs = 0.0
    for i, lam in enumerate(w):
        lhs += (lam - _closest(w_I, lam)) ** 2 * tail_I[i]
        lhs += (lam - _closest(w_Ic, lam)) ** 2 * tail_Ic[i]

    satisfied = bool(lhs <= xi + CERTIFICATE_SLACK * max(1.0, xi))
    if not satisfied:
        logger.error(f"Separation certificate FAILED: lhs={lhs:.6g} > xi={xi:.6g}")
    return SeparationCertificate(
        index_set=tuple(int(i) for i in I), eps1=eps1, eps2=eps2, xi=xi, lhs=float(lhs), satisfied=satisfied
    )


def corollary_bound(eps1: float, eps2: float, gap: float) -> float:
    return 2.0 * np.sqrt(eps1 ** 2 + eps2) / gap


def corollary1_check(K1, K2, index_set: Sequence[int], eigen_index: int = 0) -> CorollaryCheck:
    """Tail mass of eigenvector `eigen_index` (descending order) outside the index set vs its bound."""
    K1 = _check_kernel(K1, "K1")
    K2 = _check_kernel(K2, "K2")
    n = K1.shape[0]
    I, Ic = _split(index_set, n)
    if not 0 <= eigen_index < n:
        raise ValidationError(f"eigen_index must lie in [0, {n}), got {eigen_index}")

    eps1, eps2 = _coupling(K1, K2, I, Ic)
    Lam = (K1 - K2) / n
    w, V = linalg.eigh(Lam)
    order = np.argsort(-w, kind="stable")
    lam = float(w[order[eigen_index]])
    v = V[:, order[eigen_index]]

    gap = lam - float(linalg.eigvalsh(Lam[np.ix_(Ic, Ic)])[-1])
    actual = float(np.linalg.norm(v[Ic]))
    if gap <= 0:
        logger.info(f"SKIPPING corollary check: non-positive gap {gap:.3g}")
        return CorollaryCheck(eigen_index, lam, gap, None, actual, applicable=False, satisfied=None)

    bound = float(corollary_bound(eps1, eps2, gap))
    satisfied = bool(actual <= bound * (1.0 + CERTIFICATE_SLACK) + CERTIFICATE_SLACK)
    if not satisfied:
        logger.error(f"Corollary check FAILED: ||v[I^c]||={actual:.6g} > bound={bound:.6g}")
    return CorollaryCheck(eigen_index, lam, gap, bound, actual, applicable=True, satisfied=satisfied)


# --------------------------------------------------------------------------
# Random Fourier feature residual
# --------------------------------------------------------------------------

def rff_bound(m: int, delta: float) -> float:
    return 128.0 * np.log(2.0 / delta) / m


def rff_residual(
    paired: PairedDataset,
    sigma1: float,
    sigma2: float,
    m: int = 2000,
    delta: float = 0.05,
    seed: int = 0,
    cap: int = 2000,
) -> RffResidualReport:
    """
    Sum over the proxy eigenbasis of ||Lambda v_i - lambda_i v_i||^2, with
    Lambda built from exact Gaussian kernels and (lambda_i, v_i) from the
    m-feature proxy. Both proxy maps share `seed`.
    """
    if paired.n > cap:
        raise ValidationError(f"n={paired.n} exceeds the exact-kernel cap of {cap}")
    if m < 1:
        raise ValidationError(f"m must be >= 1, got {m}")
    if not 0 < delta < 1:
        raise ValidationError(f"delta must lie in (0, 1), got {delta}")

    n = paired.n
    Lam = (exact_gaussian_kernel_matrix(paired.a.data, sigma1) - exact_gaussian_kernel_matrix(paired.b.data, sigma2)) / n

    map1 = build_feature_map(KernelSpec(kind="gaussian_rff", sigma=sigma1, rff_dim=m, seed=seed), paired.a.d)
    map2 = build_feature_map(KernelSpec(kind="gaussian_rff", sigma=sigma2, rff_dim=m, seed=seed), paired.b.d)
    proxy = spec_direct_oracle(paired, map1, map2, cap=cap)

    lams = np.array([lam for lam, _ in proxy])
    V = np.column_stack([v for _, v in proxy])
    residual_sum = float(np.sum((Lam @ V - V * lams) ** 2))

    bound = float(rff_bound(m, delta))
    return RffResidualReport(m=int(m), delta=float(delta), residual_sum=residual_sum, bound=bound,
                             satisfied=bool(residual_sum <= bound))


# --------------------------------------------------------------------------
# Clustering agreement
# --------------------------------------------------------------------------

def kmeans(features, k: int, runs: int = 50, seed: int = 0, progress: bool = False) -> List[np.ndarray]:
    """`runs` independent k-means++ / Lloyd labelings; run r is seeded from (seed, r)."""
    X = np.asarray(features, dtype=np.float64)
    n = X.shape[0]
    if k < 2:
        raise ValidationError(f"k must be >= 2, got {k}")
    if k > n:
        raise ValidationError(f"k={k} exceeds the number of samples n={n}")
    if runs < 1:
        raise ValidationError(f"runs must be >= 1, got {runs}")

    labelings = []
    for run in tqdm(range(runs), desc="k-means", disable=not progress, leave=False):
        run_seed = int(np.random.SeedSequence([seed, run]).generate_state(1)[0])
        model = KMeans(n_clusters=k, init="k-means++", n_init=1, max_iter=300, tol=1e-6, random_state=run_seed)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", ConvergenceWarning)
            labels = model.fit_predict(X)
        for w in caught:
            if issubclass(w.category, ConvergenceWarning):
                logger.warning(f"k-means run {run}: {w.message}")
        labelings.append(labels.astype(np.int64))
    return labelings


def _label_pair(labels_a, labels_b):
    a = np.asarray(labels_a).ravel()
    b = np.asarray(labels_b).ravel()
    if a.size != b.size:
        raise ValidationError(f"label length mismatch: {a.size} vs {b.size}")
    return a, b


def _degenerate_score(a: np.ndarray, b: np.ndarray) -> Optional[float]:
    single_a = np.unique(a).size <= 1
    single_b = np.unique(b).size <= 1
    if single_a and single_b:
        return 1.0
    if single_a or single_b:
        return 0.0
    return None


def ami(labels_a, labels_b) -> float:
    a, b = _label_pair(labels_a, labels_b)
    fixed = _degenerate_score(a, b)
    if fixed is not None:
        return fixed
    return float(adjusted_mutual_info_score(a, b, average_method="arithmetic"))


def nmi(labels_a, labels_b) -> float:
    a, b = _label_pair(labels_a, labels_b)
    fixed = _degenerate_score(a, b)
    if fixed is not None:
        return fixed
    return float(normalized_mutual_info_score(a, b, average_method="arithmetic"))


def spec_labels(spec_result: SpecResult, n: int, side: str = "A") -> np.ndarray:
    """Cluster rank per selected sample, 0 for the rest; higher-ranked clusters win overlaps."""
    labels = np.zeros(n, dtype=np.int64)
    for cluster in sorted(spec_result.side(side), key=lambda c: c.rank, reverse=True):
        labels[list(cluster.indices)] = cluster.rank
    return labels


def similarity_ranking(cluster: ClusterReport, paired: PairedDataset, n_center: int = 4, n_compare: int = 4,
                       seed: int = 0) -> Dict:
    """
    Cosine similarity of held-out cluster members and random outsiders to the
    centroid of the cluster's strongest samples, per embedding.
    """
    members = list(cluster.indices)
    center = members[:n_center]
    inside = members[n_center:n_center + n_compare]
    rng = np.random.default_rng(seed)
    outsiders = np.setdiff1d(np.arange(paired.n), members)
    outside = rng.choice(outsiders, size=min(n_compare, outsiders.size), replace=False) if outsiders.size else []

    report = {}
    for side, emb in (("A", paired.a), ("B", paired.b)):
        X = emb.data / np.maximum(np.linalg.norm(emb.data, axis=1, keepdims=True), np.finfo(float).tiny)
        centroid = X[center].mean(axis=0)
        centroid /= max(np.linalg.norm(centroid), np.finfo(float).tiny)
        sims_in = [float(s) for s in X[inside] @ centroid]
        sims_out = [float(s) for s in X[list(outside)] @ centroid]
        margin = (np.mean(sims_in) if sims_in else 0.0) - (np.mean(sims_out) if sims_out else 0.0)
        report[side] = {"in": sims_in, "out": sims_out, "margin": float(margin)}
    return report


def within_cluster_distances(cluster: ClusterReport, paired: PairedDataset, reference_rows: int = 1000,
                             seed: int = 0) -> Dict[str, float]:
    """Mean pairwise distance inside the cluster over the dataset-wide mean, per embedding."""
    members = list(cluster.indices)
    rng = np.random.default_rng(seed)
    rows = np.arange(paired.n) if paired.n <= reference_rows else rng.choice(paired.n, reference_rows, replace=False)

    ratios = {}
    for side, emb in (("A", paired.a), ("B", paired.b)):
        overall = float(np.mean(pdist(emb.data[rows])))
        inside = float(np.mean(pdist(emb.data[members]))) if len(members) > 1 else 0.0
        ratios[side] = inside / overall if overall > 0 else 0.0
    return ratios


def validate_clusters(spec_result: SpecResult, paired: PairedDataset, k: Optional[int] = None, runs: int = 50,
                      seed: int = 0, progress: bool = False) -> ClusterValidation:
    """Mean AMI/NMI of the side-A SPEC labels against k-means on each embedding's raw features."""
    clusters = spec_result.side("A")
    if not clusters:
        raise ValidationError("no side-A clusters to validate (the embeddings do not differ on this data)")

    labels = spec_labels(spec_result, paired.n, side="A")
    if k is None:
        k = max(2, int(np.unique(labels).size))

    scores = {}
    for side, emb in (("a", paired.a), ("b", paired.b)):
        runs_labels = kmeans(emb.data, k, runs=runs, seed=seed, progress=progress)
        scores[f"ami_{side}"] = float(np.mean([ami(labels, km) for km in runs_labels]))
        scores[f"nmi_{side}"] = float(np.mean([nmi(labels, km) for km in runs_labels]))

    top = min(clusters, key=lambda c: c.rank)
    validation = ClusterValidation(
        runs=int(runs),
        k=int(k),
        similarity=similarity_ranking(top, paired, seed=seed),
        distances=within_cluster_distances(top, paired, seed=seed),
        **scores,
    )
    logger.info(f"✓ Cluster validation: AMI A={validation.ami_a:.3f} B={validation.ami_b:.3f} over {runs} runs")
    return validation


def label_agreement(spec_result: SpecResult, labels: LabelVector) -> Dict[str, float]:
    spec = spec_labels(spec_result, len(labels), side="A")
    return {"ami": ami(spec, labels.labels), "nmi": nmi(spec, labels.labels)}
