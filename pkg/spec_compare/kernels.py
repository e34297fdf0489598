"""
Kernel feature maps phi_1 / phi_2.

Three kernels are supported, each with an explicit finite feature map so the
differential covariance can be accumulated sample by sample:
    - linear:        phi(x) = x
    - cosine:        phi(x) = x / ||x||
    - gaussian_rff:  phi(x) = (1/sqrt(m)) [cos(w_1.x), sin(w_1.x), ..., cos(w_m.x), sin(w_m.x)]
                     with w_j ~ N(0, sigma^-2 I)
"""

import logging
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from scipy import linalg
from scipy.spatial.distance import cdist

from spec_compare.errors import ValidationError

logger = logging.getLogger(__name__)

KERNEL_KINDS = ("linear", "cosine", "gaussian_rff")

SIGMA_RANGE = (1e-6, 1e6)
MAX_BISECTION_STEPS = 100


@dataclass(frozen=True)
class KernelSpec:
    kind: str = "cosine"
    sigma: Optional[float] = None
    rff_dim: int = 2000
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise ValidationError(f"unknown kernel kind '{self.kind}', expected one of {KERNEL_KINDS}")
        if self.kind == "gaussian_rff":
            if self.sigma is None or not np.isfinite(self.sigma) or self.sigma <= 0:
                raise ValidationError(f"gaussian_rff needs sigma > 0, got {self.sigma}")
            if int(self.rff_dim) < 1:
                raise ValidationError(f"gaussian_rff needs rff_dim >= 1, got {self.rff_dim}")
        if int(self.seed) < 0:
            raise ValidationError(f"seed must be unsigned, got {self.seed}")

    @property
    def normalized(self) -> bool:
        # k(x, x) = 1 for every x
        return self.kind in ("cosine", "gaussian_rff")

    def to_dict(self):
        return {"kind": self.kind, "sigma": self.sigma, "rff_dim": int(self.rff_dim), "seed": int(self.seed)}


@dataclass(frozen=True)
class RffBasis:
    omegas: np.ndarray  # (m, d)
    sigma: float
    seed: int

    @classmethod
    def sample(cls, input_dim: int, m: int, sigma: float, seed: int) -> "RffBasis":
        """Draw m frequencies for a d-dimensional Gaussian kernel, reproducible from (seed, m, d, sigma)."""
        rng = np.random.default_rng(seed)
        omegas = rng.standard_normal((m, input_dim)) / sigma
        omegas.setflags(write=False)
        return cls(omegas=omegas, sigma=float(sigma), seed=int(seed))

    @property
    def m(self) -> int:
        return self.omegas.shape[0]

    @property
    def input_dim(self) -> int:
        return self.omegas.shape[1]

    def rotated(self, Q: np.ndarray) -> "RffBasis":
        """Basis with every frequency replaced by Q w_j, so phi'(Qx) == phi(x)."""
        omegas = self.omegas @ np.asarray(Q, dtype=np.float64).T
        omegas.setflags(write=False)
        return RffBasis(omegas=omegas, sigma=self.sigma, seed=self.seed)

    def save(self, path) -> None:
        from spec_compare.io_model import write_matrix_binary

        write_matrix_binary(self.omegas, path)


@dataclass(frozen=True)
class FeatureMap:
    spec: KernelSpec
    input_dim: int
    basis: Optional[RffBasis] = field(default=None, repr=False)

    @property
    def output_dim(self) -> int:
        if self.spec.kind == "gaussian_rff":
            return 2 * self.basis.m
        return self.input_dim

    def transform(self, X: np.ndarray) -> np.ndarray:
        """Map a batch of rows (n, d_in) to features (n, d_out)."""
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.input_dim:
            raise ValidationError(f"feature map expects width {self.input_dim}, got {X.shape[1]}")

        kind = self.spec.kind
        if kind == "linear":
            return X.copy()

        if kind == "cosine":
            norms = np.linalg.norm(X, axis=1)
            zero = np.flatnonzero(norms == 0)
            if zero.size:
                raise ValidationError(f"zero vector under cosine kernel at row {int(zero[0])}")
            return X / norms[:, None]

        Z = X @ self.basis.omegas.T
        out = np.empty((X.shape[0], 2 * self.basis.m))
        out[:, 0::2] = np.cos(Z)
        out[:, 1::2] = np.sin(Z)
        out /= np.sqrt(self.basis.m)
        return out

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 1:
            raise ValidationError("apply expects a single vector")
        if not np.all(np.isfinite(x)):
            raise ValidationError("non-finite input vector")
        return self.transform(x)[0]


def build_feature_map(spec: KernelSpec, input_dim: int) -> FeatureMap:
    if int(input_dim) < 1:
        raise ValidationError(f"input_dim must be >= 1, got {input_dim}")
    basis = None
    if spec.kind == "gaussian_rff":
        basis = RffBasis.sample(int(input_dim), int(spec.rff_dim), float(spec.sigma), int(spec.seed))
    return FeatureMap(spec=spec, input_dim=int(input_dim), basis=basis)


def kernel_value(x: np.ndarray, y: np.ndarray, fmap: FeatureMap) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValidationError(f"dimension mismatch: {x.shape} vs {y.shape}")
    return float(fmap.apply(x) @ fmap.apply(y))


def exact_gaussian_kernel(x: np.ndarray, y: np.ndarray, sigma: float) -> float:
    diff = np.asarray(x, dtype=np.float64) - np.asarray(y, dtype=np.float64)
    return float(np.exp(-(diff @ diff) / (2.0 * sigma ** 2)))


def exact_gaussian_kernel_matrix(X: np.ndarray, sigma: float) -> np.ndarray:
    sq = cdist(X, X, metric="sqeuclidean")
    return np.exp(-sq / (2.0 * sigma ** 2))


def kernel_matrix(emb, fmap: FeatureMap) -> np.ndarray:
    """K = Phi Phi^T for an EmbeddingSet. n x n, oracle-sized inputs only."""
    features = fmap.transform(emb.data)
    return features @ features.T


def top_kernel_eigenvalue(emb, fmap: FeatureMap) -> float:
    """
    Top eigenvalue of C_psi = (1/n) Phi^T Phi.

    (1/n) Phi Phi^T has the same non-zero spectrum, so whichever of the two is
    smaller gets decomposed.
    """
    features = fmap.transform(emb.data)
    n, d = features.shape
    gram = features.T @ features if d <= n else features @ features.T
    gram /= n
    size = gram.shape[0]
    top = linalg.eigh(gram, eigvals_only=True, subset_by_index=[size - 1, size - 1])
    return float(top[0])


def select_bandwidth(emb, target_top_eigenvalue: float, tol: float, m: int = 2000, seed: int = 0) -> float:
    """
    Bisection on log(sigma) until the top eigenvalue of C_psi is within tol of the target.

    The top eigenvalue grows with sigma (all kernel values tend to 1), which is
    what makes bisection safe.
    """
    if not 0 < target_top_eigenvalue < 1:
        raise ValidationError(f"target top eigenvalue must lie in (0, 1), got {target_top_eigenvalue}")
    if tol <= 0:
        raise ValidationError(f"tol must be positive, got {tol}")

    def top_at(log_sigma):
        spec = KernelSpec(kind="gaussian_rff", sigma=float(np.exp(log_sigma)), rff_dim=m, seed=seed)
        return top_kernel_eigenvalue(emb, build_feature_map(spec, emb.d))

    lo, hi = np.log(SIGMA_RANGE[0]), np.log(SIGMA_RANGE[1])
    value_lo, value_hi = top_at(lo), top_at(hi)
    for log_sigma, value in ((lo, value_lo), (hi, value_hi)):
        if abs(value - target_top_eigenvalue) <= tol:
            return float(np.exp(log_sigma))
    if value_hi < target_top_eigenvalue - tol or value_lo > target_top_eigenvalue + tol:
        raise ValidationError(
            f"top eigenvalue {target_top_eigenvalue} unreachable for sigma in {SIGMA_RANGE}"
        )

    for step in range(MAX_BISECTION_STEPS):
        mid = 0.5 * (lo + hi)
        value = top_at(mid)
        logger.debug(f"bandwidth step {step}: sigma={np.exp(mid):.6g} top={value:.6f}")
        if abs(value - target_top_eigenvalue) <= tol:
            logger.info(f"Selected sigma={np.exp(mid):.6g} (top eigenvalue {value:.4f}) after {step + 1} steps")
            return float(np.exp(mid))
        if value < target_top_eigenvalue:
            lo = mid
        else:
            hi = mid

    raise ValidationError(
        f"top eigenvalue {target_top_eigenvalue} not reached within tol={tol} after {MAX_BISECTION_STEPS} steps"
    )


def match_bandwidths(a, b, target: float, tol: float, m: int = 2000, seed: int = 0) -> Tuple[float, float]:
    """Tune both embeddings to one target so their top eigenvalues differ by less than 2*tol."""
    sigma_a = select_bandwidth(a, target, tol, m=m, seed=seed)
    sigma_b = select_bandwidth(b, target, tol, m=m, seed=seed)
    return sigma_a, sigma_b
