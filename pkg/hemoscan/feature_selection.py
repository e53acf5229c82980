"""
Feature selection between the slice encoder and the scan model: keep the k
embedding dimensions with the largest standard deviation, the k with the
largest or smallest classifier-head weights, or project onto the top k
principal components.
"""
import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError, ShapeError, ValidationError

logger = logging.getLogger(__name__)

# ============================================================================
# CONSTANTS
# ============================================================================

METHODS = ("std_topk", "head_weight", "pca")
MODES = ("largest", "smallest")
DEFAULT_K = 120
PCA_FIT_SAMPLES = 30000
JACOBI_TOLERANCE = 1e-12  # off-diagonal Frobenius norm, relative to max(1, ||A||)
JACOBI_MAX_SWEEPS = 100
ARRAY_PREFIX = "selector/"


@dataclass(frozen=True)
class SelectorSpec:
    method: str = "pca"
    k: int = DEFAULT_K
    mode: str = "largest"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValidationError(f"selector method must be one of {', '.join(METHODS)}, got {self.method!r}")
        if self.mode not in MODES:
            raise ValidationError(f"selector mode must be one of {', '.join(MODES)}, got {self.mode!r}")
        if self.k < 1:
            raise ValidationError(f"selector k must be at least 1, got {self.k}")


@dataclass
class FittedSelector:
    """Either a sorted index set or a PCA mean and basis mapping D -> k"""

    method: str
    input_dim: int
    indices: np.ndarray = None
    mean: np.ndarray = None
    basis: np.ndarray = None
    eigenvalues: np.ndarray = None
    total_variance: float = None

    @property
    def output_dim(self):
        return int(self.basis.shape[0] if self.method == "pca" else self.indices.size)

    def explained_variance_ratio(self):
        if self.method != "pca":
            raise ValidationError("explained variance is only defined for PCA selectors")
        if not self.total_variance > 0:
            return np.zeros_like(self.eigenvalues)
        return self.eigenvalues / self.total_variance

    def to_arrays(self):
        arrays = [
            (ARRAY_PREFIX + "method", np.array([METHODS.index(self.method)])),
            (ARRAY_PREFIX + "input_dim", np.array([self.input_dim])),
        ]
        if self.method == "pca":
            arrays += [
                (ARRAY_PREFIX + "mean", self.mean),
                (ARRAY_PREFIX + "basis", self.basis),
                (ARRAY_PREFIX + "eigenvalues", self.eigenvalues),
                (ARRAY_PREFIX + "total_variance", np.array([self.total_variance])),
            ]
        else:
            arrays.append((ARRAY_PREFIX + "indices", self.indices))
        return arrays

    @classmethod
    def from_arrays(cls, arrays):
        try:
            method = METHODS[int(arrays[ARRAY_PREFIX + "method"][0])]
            input_dim = int(arrays[ARRAY_PREFIX + "input_dim"][0])
            if method == "pca":
                return cls(
                    method=method,
                    input_dim=input_dim,
                    mean=np.asarray(arrays[ARRAY_PREFIX + "mean"], dtype=np.float64),
                    basis=np.asarray(arrays[ARRAY_PREFIX + "basis"], dtype=np.float64),
                    eigenvalues=np.asarray(arrays[ARRAY_PREFIX + "eigenvalues"], dtype=np.float64),
                    total_variance=float(arrays[ARRAY_PREFIX + "total_variance"][0]),
                )
            return cls(method=method, input_dim=input_dim,
                       indices=np.asarray(arrays[ARRAY_PREFIX + "indices"]).astype(np.int64))
        except (KeyError, IndexError) as exc:
            raise ValidationError(f"selector checkpoint is missing entry {exc}") from None


def _check_k(k, limit, what):
    if not 1 <= k <= limit:
        raise ValidationError(f"k={k} out of range: must be between 1 and {limit} ({what})")


def _ranked(scores, k, largest=True):
    """Indices of the k best scores, lowest index first among ties, returned ascending"""
    order = np.argsort(-scores if largest else scores, kind="stable")
    return np.sort(order[:k])


# ============================================================================
# INDEX SELECTORS
# ============================================================================

def fit_std(features, k):
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise ShapeError("fit_std", features.shape, detail="expected (samples, features)")
    n, d = features.shape
    if n < 2:
        raise ValidationError(f"fit_std needs at least 2 samples, got {n}")
    _check_k(k, d, "feature dimension")
    return FittedSelector("std_topk", d, indices=_ranked(features.std(axis=0, ddof=1), k))


def fit_head_weight(head_weight, k, mode="largest"):
    """Score feature j by max over classes of |H[t, j]|"""
    head_weight = np.asarray(head_weight, dtype=np.float64)
    if head_weight.ndim != 2 or head_weight.shape[0] != 6:
        raise ShapeError("fit_head_weight", head_weight.shape, detail="expected a 6 x D head weight")
    if mode not in MODES:
        raise ValidationError(f"mode must be one of {', '.join(MODES)}, got {mode!r}")
    d = head_weight.shape[1]
    _check_k(k, d, "feature dimension")
    scores = np.abs(head_weight).max(axis=0)
    return FittedSelector("head_weight", d, indices=_ranked(scores, k, largest=(mode == "largest")))


# ============================================================================
# PCA BY CYCLIC JACOBI
# ============================================================================

def jacobi_eigh(matrix, tol=JACOBI_TOLERANCE, max_sweeps=JACOBI_MAX_SWEEPS):
    """
    Full eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
    Returns (eigenvalues, eigenvectors as columns), in no particular order.
    """
    a = np.array(matrix, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError("jacobi_eigh", a.shape, detail="expected a square matrix")
    d = a.shape[0]
    v = np.eye(d)
    threshold = tol * max(1.0, float(np.linalg.norm(a)))

    def off_norm():
        return math.sqrt(2.0 * float(np.sum(np.triu(a, 1) ** 2)))

    for sweep in range(max_sweeps):
        if off_norm() <= threshold:
            logger.debug(f"jacobi converged after {sweep} sweeps")
            return np.diag(a).copy(), v
        for p in range(d - 1):
            for q in range(p + 1, d):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                scaled = 100.0 * abs(apq)
                negligible = abs(a[p, p]) + scaled == abs(a[p, p]) and abs(a[q, q]) + scaled == abs(a[q, q])
                if negligible or abs(apq) < threshold * 1e-6:
                    a[p, q] = a[q, p] = 0.0
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 1.0 / (2.0 * theta)
                else:
                    t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c

                col_p, col_q = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                row_p, row_q = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
                a[p, q] = a[q, p] = 0.0

                vec_p, vec_q = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vec_p - s * vec_q
                v[:, q] = s * vec_p + c * vec_q

    residual = off_norm()
    if residual <= threshold:
        return np.diag(a).copy(), v
    raise ConvergenceError(f"Jacobi eigensolver did not converge in {max_sweeps} sweeps", residual)


def fit_pca(features, k, fit_samples=PCA_FIT_SAMPLES):
    """
    Top-k principal components of the first min(N, fit_samples) rows. Basis rows
    are unit eigenvectors ordered by decreasing eigenvalue, each signed so its
    largest-magnitude entry is positive.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise ShapeError("fit_pca", features.shape, detail="expected (samples, features)")
    if fit_samples < 2:
        raise ValidationError(f"PCA fit sample size must be at least 2, got {fit_samples}")
    if features.shape[0] > fit_samples:
        logger.warning(f"fitting PCA on the first {fit_samples} of {features.shape[0]} feature vectors")
        features = features[:fit_samples]
    n, d = features.shape
    if n < 2:
        raise ValidationError(f"fit_pca needs at least 2 samples, got {n}")
    _check_k(k, min(n - 1, d), f"min(samples - 1, features) with {n} samples and {d} features")

    mean = features.mean(axis=0)
    centered = features - mean
    covariance = centered.T @ centered / (n - 1)
    covariance = (covariance + covariance.T) / 2.0

    eigenvalues, vectors = jacobi_eigh(covariance)
    order = np.argsort(-eigenvalues, kind="stable")[:k]
    basis = vectors[:, order].T.copy()
    for row in basis:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    return FittedSelector(
        method="pca",
        input_dim=d,
        mean=mean,
        basis=basis,
        eigenvalues=eigenvalues[order].copy(),
        total_variance=float(np.trace(covariance)),
    )


# ============================================================================
# DISPATCH AND TRANSFORM
# ============================================================================

def fit_selector(spec, features, head_weight=None, fit_samples=PCA_FIT_SAMPLES):
    if spec.method == "std_topk":
        return fit_std(features, spec.k)
    if spec.method == "head_weight":
        if head_weight is None:
            raise ValidationError("head_weight selection needs the encoder's classifier weights")
        return fit_head_weight(head_weight, spec.k, spec.mode)
    return fit_pca(features, spec.k, fit_samples)


def transform(selector, embedding):
    """Map a D-vector (or a (T, D) stack of them) to k dims"""
    embedding = np.asarray(embedding, dtype=np.float64)
    if embedding.shape[-1] != selector.input_dim:
        raise ShapeError("transform", embedding.shape, (selector.input_dim,),
                         detail="embedding length differs from the fitted dimension")
    if selector.method == "pca":
        return (embedding - selector.mean) @ selector.basis.T
    return embedding[..., selector.indices]
