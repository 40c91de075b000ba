"""Lossy coding-rate estimates for token features and their variational forms.

Conventions used throughout the module:

* A token matrix ``Z`` is ``d x n`` with one token per *column* (the math
  convention). Row-major ``(token, channel)`` layouts used at the package
  boundary are converted before calling in here.
* A membership ``Pi`` is ``K x n``: row ``k`` holds the weights assigning
  each token to group ``k``. Rows need not be normalized; the group mass
  ``n_k`` is the row sum.
* All rate math runs in double precision and returns values in nats.

The total rate ``R(Z)`` measures the volume of the whole token set under a
Gaussian codebook at precision ``epsilon``; the segmented rate measures it
after splitting tokens into groups; the variational forms replace the
log-determinant with a sum of scalar ``f(x) = log(1 + (d/eps^2) x)`` terms
over per-direction second moments, which is what the attention operator
differentiates.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import InvalidInput, NotPSD
from .functional import sigmoid, softmax_columns

logger = logging.getLogger(__name__)

# Groups whose total mass falls below this are treated as empty: they
# contribute neither rate nor gradient.
ZERO_MASS = 1e-12

# Token matrices are plain float64 arrays in the d x n column convention.
TokenMatrix = np.ndarray


def check_tokens(Z: np.ndarray, name: str = "Z") -> TokenMatrix:
    """Validate and coerce a token matrix to float64 ``d x n``."""
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2:
        raise InvalidInput(f"{name} must be a 2-d token matrix, got ndim={Z.ndim}")
    if not np.all(np.isfinite(Z)):
        raise InvalidInput(f"{name} contains non-finite entries")
    return Z


@dataclass(frozen=True)
class CodingRateConfig:
    """Precision and coefficient settings for the rate family.

    ``epsilon`` is the codebook precision; ``subspace_coeff_beta`` is the
    fixed coefficient of the subspace-restricted upper bound. The data
    dependent coefficients ``alpha = d / (n eps^2)`` and
    ``gamma_k = d / (n_k eps^2)`` are derived per call.
    """

    epsilon: float = 1.0
    subspace_coeff_beta: float = 1.0

    def __post_init__(self) -> None:
        if not (np.isfinite(self.epsilon) and self.epsilon > 0):
            raise InvalidInput(f"epsilon must be finite and positive, got {self.epsilon}")
        if not (np.isfinite(self.subspace_coeff_beta) and self.subspace_coeff_beta > 0):
            raise InvalidInput(
                f"subspace_coeff_beta must be finite and positive, got {self.subspace_coeff_beta}"
            )

    def alpha(self, d: int, n: int) -> float:
        return d / (n * self.epsilon**2)

    def gamma(self, d: int, mass: float) -> float:
        return d / (mass * self.epsilon**2)

    def f_coeff(self, d: int) -> float:
        """Coefficient of the scalar surrogate ``f(x) = log(1 + (d/eps^2) x)``."""
        return d / self.epsilon**2


@dataclass(frozen=True)
class Membership:
    """Soft assignment of ``n`` tokens to ``K`` groups, one group per row."""

    data: np.ndarray

    def __post_init__(self) -> None:
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2:
            raise InvalidInput(f"membership must be K x n, got ndim={data.ndim}")
        if not np.all(np.isfinite(data)):
            raise InvalidInput("membership contains non-finite entries")
        object.__setattr__(self, "data", data)

    @property
    def groups(self) -> int:
        return self.data.shape[0]

    @property
    def tokens(self) -> int:
        return self.data.shape[1]

    @property
    def group_mass(self) -> np.ndarray:
        """Row sums ``n_k``, the effective token count of each group."""
        return self.data.sum(axis=1)


@dataclass(frozen=True)
class SubspaceBank:
    """A family of ``K`` subspace bases, each ``d x p`` with columns as directions."""

    bases: tuple[np.ndarray, ...]
    orthonormal: bool = False

    def __post_init__(self) -> None:
        if len(self.bases) == 0:
            raise InvalidInput("subspace bank must hold at least one basis")
        bases = tuple(np.asarray(b, dtype=np.float64) for b in self.bases)
        d = bases[0].shape[0] if bases[0].ndim == 2 else -1
        for idx, b in enumerate(bases):
            if b.ndim != 2 or b.shape[0] != d:
                raise InvalidInput(f"basis {idx} is not d x p with shared d")
            if not np.all(np.isfinite(b)):
                raise InvalidInput(f"basis {idx} contains non-finite entries")
            if self.orthonormal:
                gram = b.T @ b
                if np.max(np.abs(gram - np.eye(b.shape[1]))) > 1e-8:
                    raise InvalidInput(f"basis {idx} is not orthonormal within 1e-8")
        object.__setattr__(self, "bases", bases)

    @property
    def count(self) -> int:
        return len(self.bases)

    @property
    def ambient_dim(self) -> int:
        return self.bases[0].shape[0]

    def scaled(self, gates: Sequence[float]) -> "SubspaceBank":
        """Return a bank with basis ``k`` multiplied by ``gates[k]``."""
        gates = np.asarray(gates, dtype=np.float64)
        if gates.shape != (self.count,):
            raise InvalidInput(f"expected {self.count} gates, got shape {gates.shape}")
        return SubspaceBank(tuple(g * b for g, b in zip(gates, self.bases)), orthonormal=False)


@dataclass(frozen=True)
class RateBreakdown:
    """Total rate, its compressed counterpart, and their difference."""

    total_rate: float
    segmented_rate: float
    per_subspace: np.ndarray = field(repr=False)

    @property
    def reduction(self) -> float:
        """Rate reduction, exactly ``total_rate - segmented_rate`` by construction."""
        return self.total_rate - self.segmented_rate


def logdet_psd(M: np.ndarray) -> float:
    """Log-determinant of a symmetric PSD matrix via factorization.

    Tries a Cholesky factorization first and falls back to an
    eigendecomposition for semi-definite inputs. Raises ``NotPSD`` when an
    eigenvalue dips below ``-1e-8``; eigenvalues in ``[-1e-8, 0)`` are
    treated as exact zeros.
    """
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise InvalidInput(f"logdet_psd expects a square matrix, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise InvalidInput("logdet_psd received non-finite entries")
    if M.size and np.max(np.abs(M - M.T)) > 1e-10:
        raise InvalidInput("logdet_psd expects a symmetric matrix (within 1e-10)")
    try:
        chol = np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        eigs = np.linalg.eigvalsh(M)
        if eigs.size and eigs[0] < -1e-8:
            raise NotPSD(f"matrix has negative eigenvalue {eigs[0]:.3e}")
        eigs = np.clip(eigs, 0.0, None)
        with np.errstate(divide="ignore"):
            return float(np.sum(np.log(eigs)))
    return float(2.0 * np.sum(np.log(np.diag(chol))))


def _gram_rate(A: np.ndarray, coeff: float) -> float:
    """``0.5 * logdet(I + coeff * A A^T)`` evaluated on the smaller Gram side.

    ``logdet(I_d + c A A^T) = logdet(I_n + c A^T A)`` for any ``d x n`` A, so
    the factorization always runs on a ``min(d, n)`` square matrix.
    """
    d, n = A.shape
    if d <= n:
        gram = np.eye(d) + coeff * (A @ A.T)
    else:
        gram = np.eye(n) + coeff * (A.T @ A)
    # Blocked matmul can leave asymmetry at rounding level; symmetrize before
    # the strict symmetry check inside logdet_psd.
    gram = 0.5 * (gram + gram.T)
    return 0.5 * logdet_psd(gram)


def rate_total(Z: TokenMatrix, cfg: CodingRateConfig) -> float:
    """Rate of the whole token set, ``0.5 logdet(I + alpha Z Z^T)``."""
    Z = check_tokens(Z)
    d, n = Z.shape
    if n == 0:
        raise InvalidInput("rate_total needs at least one token")
    return _gram_rate(Z, cfg.alpha(d, n))


def _check_membership(Z: TokenMatrix, Pi: Membership) -> np.ndarray:
    if Pi.tokens != Z.shape[1]:
        raise InvalidInput(
            f"membership covers {Pi.tokens} tokens but Z has {Z.shape[1]}"
        )
    data = Pi.data
    if np.min(data) < -ZERO_MASS:
        raise InvalidInput(f"membership weights must be nonnegative, min={np.min(data):.3e}")
    return np.clip(data, 0.0, None)


def rate_segmented(Z: TokenMatrix, Pi: Membership, cfg: CodingRateConfig) -> float:
    """Rate after segmenting tokens by ``Pi``.

    Sums ``0.5 logdet(I + gamma_k Z diag(pi_k) Z^T)`` over groups. Groups
    with mass at or below ``ZERO_MASS`` contribute zero.
    """
    Z = check_tokens(Z)
    weights = _check_membership(Z, Pi)
    d = Z.shape[0]
    total = 0.0
    for pik in weights:
        mass = float(pik.sum())
        if mass <= ZERO_MASS:
            continue
        weighted = Z * np.sqrt(pik)[None, :]
        total += _gram_rate(weighted, cfg.gamma(d, mass))
    return total


def _check_bank(Z: TokenMatrix, U: SubspaceBank) -> None:
    if U.ambient_dim != Z.shape[0]:
        raise InvalidInput(
            f"subspace bank lives in dimension {U.ambient_dim} but Z has d={Z.shape[0]}"
        )


def rate_subspace_bound(Z: TokenMatrix, U: SubspaceBank, cfg: CodingRateConfig) -> float:
    """Upper-bound rate of ``Z`` restricted to the bank's subspaces.

    Sums ``0.5 logdet(I + beta (U_k^T Z)^T (U_k^T Z))`` over the bank.
    """
    Z = check_tokens(Z)
    _check_bank(Z, U)
    beta = cfg.subspace_coeff_beta
    return float(sum(_gram_rate(Uk.T @ Z, beta) for Uk in U.bases))


def membership_from_subspaces(Z: TokenMatrix, U: SubspaceBank, eta: float) -> Membership:
    """Softmax membership from projection energies.

    Token ``i`` is assigned to group ``k`` with weight proportional to
    ``exp(||U_k^T z_i||^2 / (2 eta))``; columns sum to one.
    """
    Z = check_tokens(Z)
    _check_bank(Z, U)
    if not (np.isfinite(eta) and eta > 0):
        raise InvalidInput(f"eta must be finite and positive, got {eta}")
    energy = np.stack([np.sum((Uk.T @ Z) ** 2, axis=0) for Uk in U.bases])
    return Membership(softmax_columns(energy / (2.0 * eta)))


def _variational_terms(
    Z: TokenMatrix, Pi: Membership, U: SubspaceBank, cfg: CodingRateConfig
) -> np.ndarray:
    """Per-group terms of the variational rate; zero for empty groups."""
    Z = check_tokens(Z)
    _check_bank(Z, U)
    weights = _check_membership(Z, Pi)
    if Pi.groups != U.count:
        raise InvalidInput(f"membership has {Pi.groups} groups but bank has {U.count}")
    d, n = Z.shape
    coeff = cfg.f_coeff(d)
    terms = np.zeros(U.count)
    for k, (pik, Uk) in enumerate(zip(weights, U.bases)):
        mass = float(pik.sum())
        if mass <= ZERO_MASS:
            continue
        proj = Uk.T @ Z
        args = (proj * proj) @ pik / mass
        if np.min(args) < -ZERO_MASS:
            raise InvalidInput(
                f"variational rate argument went negative ({np.min(args):.3e}) in group {k}"
            )
        args = np.clip(args, 0.0, None)
        terms[k] = 0.5 * (mass / n) * float(np.sum(np.log1p(coeff * args)))
    return terms


def rate_variational_decoupled(
    Z: TokenMatrix, Pi: Membership, U_S: SubspaceBank, cfg: CodingRateConfig
) -> float:
    """Variational rate with externally supplied membership and (possibly sparse) bases.

    ``0.5 sum_k (n_k/n) sum_i f((1/n_k) (U_k^T Z diag(pi_k) Z^T U_k)_ii)``
    where ``f(x) = log(1 + (d/eps^2) x)``. The membership is taken as given;
    it is not recomputed from the bases.
    """
    return float(np.sum(_variational_terms(Z, Pi, U_S, cfg)))


def rate_variational_coupled(
    Z: TokenMatrix, U: SubspaceBank, eta: float, cfg: CodingRateConfig
) -> float:
    """Variational rate with membership coupled to the (orthonormal) bases.

    Computes the softmax membership from projection energies onto ``U`` and
    evaluates the same sum as the decoupled form, so the two agree exactly
    when the decoupled form is handed that membership and the same bank.
    """
    if not U.orthonormal:
        raise InvalidInput("coupled variational rate requires an orthonormal bank")
    Pi = membership_from_subspaces(Z, U, eta)
    return rate_variational_decoupled(Z, Pi, U, cfg)


def rate_reduction(
    Z: TokenMatrix, Pi: Membership, U_S: SubspaceBank, cfg: CodingRateConfig
) -> RateBreakdown:
    """Total rate minus the variational segmented rate, with per-group terms."""
    terms = _variational_terms(Z, Pi, U_S, cfg)
    total = rate_total(Z, cfg)
    return RateBreakdown(
        total_rate=total,
        segmented_rate=float(np.sum(terms)),
        per_subspace=terms,
    )


def grad_rate_wrt_tokens(
    Z: TokenMatrix, Pi: Membership, U_S: SubspaceBank, cfg: CodingRateConfig
) -> np.ndarray:
    """Gradient of the decoupled variational rate with respect to the tokens.

    The membership is treated as a constant. Returns a ``d x n`` matrix
    ``(1/n) sum_k U_k D_k U_k^T Z diag(pi_k)`` where ``D_k`` is the diagonal
    of ``f'`` evaluated at the per-direction second moments of group ``k``.
    Empty groups are skipped with a diagnostic.
    """
    Z = check_tokens(Z)
    _check_bank(Z, U_S)
    weights = _check_membership(Z, Pi)
    if Pi.groups != U_S.count:
        raise InvalidInput(f"membership has {Pi.groups} groups but bank has {U_S.count}")
    d, n = Z.shape
    coeff = cfg.f_coeff(d)
    grad = np.zeros_like(Z)
    for k, (pik, Uk) in enumerate(zip(weights, U_S.bases)):
        mass = float(pik.sum())
        if mass <= ZERO_MASS:
            logger.debug("grad_rate_wrt_tokens: group %d has zero mass, skipped", k)
            continue
        proj = Uk.T @ Z
        args = (proj * proj) @ pik / mass
        if np.min(args) < -ZERO_MASS:
            raise InvalidInput(
                f"variational rate argument went negative ({np.min(args):.3e}) in group {k}"
            )
        args = np.clip(args, 0.0, None)
        dvec = coeff / (1.0 + coeff * args)
        grad += Uk @ (dvec[:, None] * proj * pik[None, :])
    return grad / n


def grad_rate_variational_decoupled(
    Z: TokenMatrix,
    w: np.ndarray,
    U_S: SubspaceBank,
    cfg: CodingRateConfig,
    activation: Callable[[np.ndarray], np.ndarray] = sigmoid,
) -> np.ndarray:
    """Gradient of the decoupled rate with membership produced by a projection.

    Row ``k`` of ``w`` maps tokens to raw membership scores ``w_k Z``; the
    scores pass through ``activation`` (sigmoid by default) and the result is
    then held fixed while differentiating with respect to ``Z``.
    """
    Z = check_tokens(Z)
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2 or w.shape[1] != Z.shape[0]:
        raise InvalidInput(f"membership projection must be K x d, got shape {w.shape}")
    Pi = Membership(activation(w @ Z))
    return grad_rate_wrt_tokens(Z, Pi, U_S, cfg)
