"""Loss functions and models: RBF-kernel classifier, a small tanh MLP,
and numerical oracles (finite differences, smoothness and noise probes).

Every objective is a finite sum over examples exposed through a common
interface: ``value(x, batch)``, ``stochastic_grad(x, batch)``, and
``full_grad(x)``, where ``batch`` is an array of example indices and
``None`` means the whole dataset.  Objectives are immutable after
construction except for write-once kernel caches.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.special import expit

from .data import SparseDataset, SparseExample, _seed_entropy
from .errors import ValidationError


class Objective:
    """Finite-sum objective over a dense parameter vector."""

    dimension: int
    n_examples: int

    def value(self, x: np.ndarray, batch: np.ndarray | None = None) -> float:
        raise NotImplementedError

    def stochastic_grad(
        self, x: np.ndarray, batch: np.ndarray | None = None
    ) -> np.ndarray:
        raise NotImplementedError

    def full_grad(self, x: np.ndarray) -> np.ndarray:
        return self.stochastic_grad(x, None)

    def initial_point(self, seed: int | None = None) -> np.ndarray:
        raise NotImplementedError

    def _check_x(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.dimension,):
            raise ValidationError(
                f"parameter vector must have shape ({self.dimension},), got {x.shape}"
            )
        return x


def _binary_cross_entropy(margins: np.ndarray, labels: np.ndarray) -> float:
    """Mean logistic loss at the given logits, in overflow-safe form."""
    return float(np.mean(np.logaddexp(0.0, margins) - labels * margins))


# ---------------------------------------------------------------------------
# RBF kernel machinery


def rbf_kernel(x: SparseExample, y: SparseExample, sigma: float) -> float:
    """``exp(-||x - y||^2 / (2 sigma^2))`` over the union of sparse indices."""
    if not (sigma > 0.0 and math.isfinite(sigma)):
        raise ValidationError(f"sigma must be positive and finite, got {sigma}")
    d2 = 0.0
    i = j = 0
    xi, xv, yi, yv = x.indices, x.values, y.indices, y.values
    while i < len(xi) and j < len(yi):
        if xi[i] == yi[j]:
            diff = xv[i] - yv[j]
            d2 += diff * diff
            i += 1
            j += 1
        elif xi[i] < yi[j]:
            d2 += xv[i] * xv[i]
            i += 1
        else:
            d2 += yv[j] * yv[j]
            j += 1
    while i < len(xi):
        d2 += xv[i] * xv[i]
        i += 1
    while j < len(yi):
        d2 += yv[j] * yv[j]
        j += 1
    return math.exp(-d2 / (2.0 * sigma * sigma))


def _row_sq_norms(X: sparse.csr_matrix) -> np.ndarray:
    return np.asarray(X.multiply(X).sum(axis=1)).ravel()


def _rbf_block(
    Xa: sparse.csr_matrix,
    Xb: sparse.csr_matrix,
    sigma: float,
    sq_a: np.ndarray | None = None,
    sq_b: np.ndarray | None = None,
) -> np.ndarray:
    """Dense kernel block K[i, j] = k(Xa[i], Xb[j])."""
    if sq_a is None:
        sq_a = _row_sq_norms(Xa)
    if sq_b is None:
        sq_b = _row_sq_norms(Xb)
    cross = (Xa @ Xb.T).toarray()
    d2 = sq_a[:, None] + sq_b[None, :] - 2.0 * cross
    np.maximum(d2, 0.0, out=d2)
    return np.exp(-d2 / (2.0 * sigma * sigma))


@dataclass
class KernelClassifier:
    """Binary classifier with one dual weight per training point.

    The decision margin at a point ``z`` is ``sum_j w_j k(x_j, z)`` with an
    RBF kernel of bandwidth ``sigma``; class probabilities come from the
    logistic link, with no regularization term.
    """

    dual_weights: np.ndarray
    bandwidth: float
    train_ref: SparseDataset

    def __post_init__(self) -> None:
        self.dual_weights = np.asarray(self.dual_weights, dtype=np.float64)
        if self.dual_weights.shape != (self.train_ref.n_examples,):
            raise ValidationError(
                "dual_weights length must equal the training-set size"
            )
        if not (self.bandwidth > 0.0 and math.isfinite(self.bandwidth)):
            raise ValidationError(f"bandwidth must be > 0, got {self.bandwidth}")


def kernel_loss_and_grad(
    model: KernelClassifier,
    batch: np.ndarray,
    labels: np.ndarray | None = None,
) -> tuple[float, np.ndarray]:
    """Mean logistic loss on a batch and its gradient in the dual weights.

    ``labels`` defaults to the training labels at the batch indices and
    must lie in {0, 1}.  The gradient is dense over all dual weights.
    """
    batch = np.asarray(batch, dtype=np.int64)
    train = model.train_ref
    if labels is None:
        labels = train.y[batch]
    labels = np.asarray(labels, dtype=np.float64)
    block = _rbf_block(train.X, train.X[batch], model.bandwidth)
    margins = block.T @ model.dual_weights
    loss = _binary_cross_entropy(margins, labels)
    if not math.isfinite(loss):
        raise ValidationError("non-finite kernel loss")
    residual = (expit(margins) - labels) / len(batch)
    return loss, block @ residual


class KernelObjective(Objective):
    """Kernel classifier bound to a training set, over the dual weights.

    The train-by-train kernel matrix is precomputed when it fits the
    ``cache_mb`` budget (written once, then read-only); otherwise kernel
    columns are formed on demand per batch.
    """

    def __init__(
        self, train: SparseDataset, bandwidth: float, cache_mb: float = 512.0
    ):
        if not (bandwidth > 0.0 and math.isfinite(bandwidth)):
            raise ValidationError(f"bandwidth must be > 0, got {bandwidth}")
        if set(np.unique(train.y)) - {0.0, 1.0}:
            raise ValidationError("kernel objective requires labels in {0, 1}")
        self.train = train
        self.bandwidth = float(bandwidth)
        self.cache_mb = float(cache_mb)
        self.dimension = train.n_examples
        self.n_examples = train.n_examples
        self._sq = _row_sq_norms(train.X)
        self._gram: np.ndarray | None = None
        n = train.n_examples
        self._gram_fits = n * n * 8 <= cache_mb * 2**20

    def _gram_matrix(self) -> np.ndarray | None:
        if self._gram is None and self._gram_fits:
            self._gram = _rbf_block(
                self.train.X, self.train.X, self.bandwidth, self._sq, self._sq
            )
        return self._gram

    def _columns(self, batch: np.ndarray) -> np.ndarray:
        gram = self._gram_matrix()
        if gram is not None:
            return gram[:, batch]
        return _rbf_block(
            self.train.X, self.train.X[batch], self.bandwidth,
            self._sq, self._sq[batch],
        )

    def _batch(self, batch: np.ndarray | None) -> np.ndarray:
        if batch is None:
            return np.arange(self.n_examples)
        return np.asarray(batch, dtype=np.int64)

    def value(self, x: np.ndarray, batch: np.ndarray | None = None) -> float:
        x = self._check_x(x)
        batch = self._batch(batch)
        margins = self._columns(batch).T @ x
        return _binary_cross_entropy(margins, self.train.y[batch])

    def stochastic_grad(
        self, x: np.ndarray, batch: np.ndarray | None = None
    ) -> np.ndarray:
        x = self._check_x(x)
        batch = self._batch(batch)
        block = self._columns(batch)
        margins = block.T @ x
        residual = (expit(margins) - self.train.y[batch]) / len(batch)
        return block @ residual

    def initial_point(self, seed: int | None = None) -> np.ndarray:
        # dual weights start at zero: the uninformative model with loss ln 2
        return np.zeros(self.dimension)

    def margins(self, x: np.ndarray, X_other: sparse.csr_matrix) -> np.ndarray:
        """Decision margins for rows of ``X_other``, in evaluation blocks."""
        x = self._check_x(x)
        out = np.empty(X_other.shape[0])
        block_cols = max(1, int(self.cache_mb * 2**20 / (8 * self.n_examples)))
        for lo in range(0, X_other.shape[0], block_cols):
            chunk = X_other[lo : lo + block_cols]
            block = _rbf_block(self.train.X, chunk, self.bandwidth, self._sq)
            out[lo : lo + chunk.shape[0]] = block.T @ x
        return out


class KernelScorer:
    """Caches the train-by-test kernel block for repeated evaluation."""

    def __init__(self, objective: KernelObjective, test: SparseDataset):
        self.objective = objective
        self.test = test
        n_cells = objective.n_examples * test.n_examples
        self._block: np.ndarray | None = None
        if n_cells * 8 <= objective.cache_mb * 2**20:
            self._block = _rbf_block(
                objective.train.X, test.X, objective.bandwidth, objective._sq
            )

    def test_margins(self, x: np.ndarray) -> np.ndarray:
        if self._block is not None:
            return self._block.T @ x
        return self.objective.margins(x, self.test.X)

    def test_accuracy(self, x: np.ndarray) -> float:
        pred = self.test_margins(x) >= 0.0
        return float(np.mean(pred == (self.test.y > 0.5)))


# ---------------------------------------------------------------------------
# Small tanh MLP


@dataclass(frozen=True)
class SmallMlp:
    """Architecture of a d -> h -> 1 network with tanh hidden units.

    Smooth everywhere (unlike ReLU) and nonconvex in its parameters, which
    is exactly what the convergence monitors need.  Parameters live in one
    flat vector ordered (W1, b1, w2, b2).
    """

    n_inputs: int
    n_hidden: int = 16

    @property
    def dimension(self) -> int:
        return self.n_hidden * (self.n_inputs + 2) + 1

    def unpack(
        self, x: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray, float]:
        d, h = self.n_inputs, self.n_hidden
        W1 = x[: h * d].reshape(h, d)
        b1 = x[h * d : h * d + h]
        w2 = x[h * d + h : h * d + 2 * h]
        b2 = x[-1]
        return W1, b1, w2, float(b2)


def mlp_forward(arch: SmallMlp, x: np.ndarray, features: np.ndarray) -> np.ndarray:
    """Logits for a (batch, n_inputs) feature matrix."""
    W1, b1, w2, b2 = arch.unpack(x)
    hidden = np.tanh(features @ W1.T + b1)
    return hidden @ w2 + b2


def mlp_loss_and_grad(
    arch: SmallMlp, x: np.ndarray, features: np.ndarray, labels: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean logistic loss and its exact backpropagation gradient."""
    W1, b1, w2, b2 = arch.unpack(x)
    hidden = np.tanh(features @ W1.T + b1)
    logits = hidden @ w2 + b2
    loss = _binary_cross_entropy(logits, labels)
    d_logits = (expit(logits) - labels) / len(labels)
    g_w2 = hidden.T @ d_logits
    g_b2 = float(np.sum(d_logits))
    d_hidden = np.outer(d_logits, w2) * (1.0 - hidden * hidden)
    g_W1 = d_hidden.T @ features
    g_b1 = d_hidden.sum(axis=0)
    grad = np.concatenate([g_W1.ravel(), g_b1, g_w2, [g_b2]])
    return loss, grad


class MlpObjective(Objective):
    """Small MLP bound to a dataset (densified at construction)."""

    def __init__(
        self,
        dataset: SparseDataset,
        n_hidden: int = 16,
        init_scale: float = 0.1,
        init_seed: int = 0,
    ):
        if set(np.unique(dataset.y)) - {0.0, 1.0}:
            raise ValidationError("MLP objective requires labels in {0, 1}")
        self.dataset = dataset
        self.features = dataset.X.toarray()
        self.labels = dataset.y
        self.arch = SmallMlp(n_inputs=dataset.n_features, n_hidden=n_hidden)
        self.dimension = self.arch.dimension
        self.n_examples = dataset.n_examples
        self.init_scale = float(init_scale)
        self.init_seed = int(init_seed)

    def _rows(self, batch: np.ndarray | None) -> tuple[np.ndarray, np.ndarray]:
        if batch is None:
            return self.features, self.labels
        batch = np.asarray(batch, dtype=np.int64)
        return self.features[batch], self.labels[batch]

    def value(self, x: np.ndarray, batch: np.ndarray | None = None) -> float:
        x = self._check_x(x)
        feats, labs = self._rows(batch)
        logits = mlp_forward(self.arch, x, feats)
        return _binary_cross_entropy(logits, labs)

    def stochastic_grad(
        self, x: np.ndarray, batch: np.ndarray | None = None
    ) -> np.ndarray:
        x = self._check_x(x)
        feats, labs = self._rows(batch)
        return mlp_loss_and_grad(self.arch, x, feats, labs)[1]

    def initial_point(self, seed: int | None = None) -> np.ndarray:
        entropy = [_seed_entropy(self.init_seed)]
        if seed is not None:
            entropy.append(_seed_entropy(seed))
        rng = np.random.default_rng(entropy)
        return rng.normal(0.0, self.init_scale, self.dimension)

    def accuracy(self, x: np.ndarray, dataset: SparseDataset) -> float:
        logits = mlp_forward(self.arch, self._check_x(x), dataset.X.toarray())
        return float(np.mean((logits >= 0.0) == (dataset.y > 0.5)))


class QuadraticBowl(Objective):
    """``f(x) = ||x||^2 / 2`` posed as a one-example finite sum.

    The gradient is exactly ``x``, which makes closed-form checks of the
    optimizers and the finite-difference oracle trivial.
    """

    def __init__(self, dimension: int, n_examples: int = 1):
        self.dimension = int(dimension)
        self.n_examples = int(n_examples)

    def value(self, x: np.ndarray, batch: np.ndarray | None = None) -> float:
        x = self._check_x(x)
        return 0.5 * float(x @ x)

    def stochastic_grad(
        self, x: np.ndarray, batch: np.ndarray | None = None
    ) -> np.ndarray:
        return self._check_x(x).copy()

    def initial_point(self, seed: int | None = None) -> np.ndarray:
        return np.ones(self.dimension)


# ---------------------------------------------------------------------------
# Numerical oracles


def finite_diff_check(objective: Objective, x: np.ndarray, eps: float = 1e-5) -> float:
    """Max relative error of the analytic full gradient vs central differences.

    Per-coordinate relative error uses denominator
    ``max(1, |analytic|, |numeric|)``.
    """
    if eps <= 0.0:
        raise ValidationError(f"eps must be > 0, got {eps}")
    x = np.asarray(x, dtype=np.float64)
    analytic = objective.full_grad(x)
    worst = 0.0
    probe = x.copy()
    for i in range(x.size):
        probe[i] = x[i] + eps
        f_plus = objective.value(probe)
        probe[i] = x[i] - eps
        f_minus = objective.value(probe)
        probe[i] = x[i]
        numeric = (f_plus - f_minus) / (2.0 * eps)
        denom = max(1.0, abs(analytic[i]), abs(numeric))
        worst = max(worst, abs(numeric - analytic[i]) / denom)
    return worst


def grad_norm_sq(objective: Objective, x: np.ndarray) -> float:
    """Squared Euclidean norm of the full gradient at ``x``."""
    g = objective.full_grad(np.asarray(x, dtype=np.float64))
    return float(g @ g)


def estimate_smoothness(
    objective: Objective,
    x0: np.ndarray,
    n_pairs: int = 40,
    radius: float = 0.5,
    seed: int = 0,
) -> float:
    """Empirical gradient-Lipschitz constant near ``x0``.

    Maximum of ``||g(a) - g(b)|| / ||a - b||`` over seeded random pairs in
    a ball of the given radius.  A lower bound on the true constant, used
    to size step lengths as ``1 / (c * L)``.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    rng = np.random.default_rng(_seed_entropy(seed))
    worst = 0.0
    for _ in range(n_pairs):
        a = x0 + radius * rng.standard_normal(x0.size)
        b = x0 + radius * rng.standard_normal(x0.size)
        gap = float(np.linalg.norm(a - b))
        if gap < 1e-12:
            continue
        g_gap = float(np.linalg.norm(objective.full_grad(a) - objective.full_grad(b)))
        worst = max(worst, g_gap / gap)
    return worst


def estimate_noise(
    objective: Objective,
    points: list[np.ndarray],
    sample_cap: int | None = None,
    seed: int = 0,
) -> float:
    """Empirical bound on the per-sample gradient noise second moment.

    For each probe point, computes the mean over single-example gradients
    of ``||g_i - full_grad||^2`` and returns the max across probes.
    ``sample_cap`` subsamples examples on large datasets.
    """
    rng = np.random.default_rng(_seed_entropy(seed))
    worst = 0.0
    for x in points:
        x = np.asarray(x, dtype=np.float64)
        full = objective.full_grad(x)
        idx = np.arange(objective.n_examples)
        if sample_cap is not None and objective.n_examples > sample_cap:
            idx = rng.choice(objective.n_examples, size=sample_cap, replace=False)
        dev = 0.0
        for i in idx:
            gi = objective.stochastic_grad(x, np.array([i]))
            diff = gi - full
            dev += float(diff @ diff)
        worst = max(worst, dev / len(idx))
    return worst
