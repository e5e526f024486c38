"""Desk-scale training problems: noisy quadratic, logistic, and a tiny CNN.

All three expose the same interface (see ``TrainingProblem``): batch
sampling with replacement, mean-over-batch gradients, and noise-free
``full_loss``/``full_grad`` for traces.  Everything is deterministic per
construction seed; the sampling RNG is passed in by the caller.
"""

from __future__ import annotations

from typing import Any, Optional

import numpy as np

from .sgd import TrainingProblem
from .tensors import ConvSpec, Tensor4, conv_lowered


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(key)))


class QuadraticProblem(TrainingProblem):
    """loss(W) = 0.5 * W' diag(a) W with log-spaced eigenvalues in [1, condition].

    Per-example gradients are diag(a) W plus Gaussian noise, so a batch is
    simply the matrix of noise draws; the minimizer is W = 0 with loss 0.
    """

    reference_loss = 0.0

    def __init__(self, dim: int, condition: float, noise: float, seed: int = 0):
        if dim < 1:
            raise ValueError("dim must be >= 1")
        if condition < 1:
            raise ValueError("condition must be >= 1")
        self._dim = dim
        self.noise = float(noise)
        self.seed = seed
        if dim == 1:
            self.eigs = np.array([float(condition)])
        else:
            self.eigs = np.geomspace(1.0, float(condition), dim)

    @property
    def dim(self) -> int:
        return self._dim

    def initial_weights(self) -> np.ndarray:
        return _rng(self.seed, 0).standard_normal(self._dim)

    def sample_batch(self, rng: np.random.Generator, b: int) -> np.ndarray:
        return self.noise * rng.standard_normal((b, self._dim))

    def loss(self, W: np.ndarray, batch: np.ndarray) -> float:
        # linear noise term keeps the batch loss consistent with grad()
        return float(0.5 * W @ (self.eigs * W) + batch.mean(axis=0) @ W)

    def grad(self, W: np.ndarray, batch: np.ndarray) -> np.ndarray:
        return self.eigs * W + batch.mean(axis=0)

    def full_loss(self, W: np.ndarray) -> float:
        return float(0.5 * W @ (self.eigs * W))

    def full_grad(self, W: np.ndarray) -> np.ndarray:
        return self.eigs * W


def make_quadratic(dim: int, condition: float, noise: float, seed: int = 0) -> QuadraticProblem:
    return QuadraticProblem(dim, condition, noise, seed)


class LogisticProblem(TrainingProblem):
    """Two-class logistic regression on synthetic near-separable data.

    Labels are the sign of a random ground-truth margin plus Gaussian margin
    noise, which keeps the unregularized optimum finite.  loss(0) = ln 2.
    """

    def __init__(self, n_examples: int, dim: int, seed: int = 0, margin_noise: float = 0.5):
        if n_examples < 2 or dim < 1:
            raise ValueError("need n_examples >= 2 and dim >= 1")
        self._dim = dim
        self.seed = seed
        rng = _rng(seed, 0)
        w_star = rng.standard_normal(dim)
        w_star /= np.linalg.norm(w_star)
        self.X = rng.standard_normal((n_examples, dim))
        margins = self.X @ w_star + margin_noise * rng.standard_normal(n_examples)
        self.y = np.where(margins >= 0, 1.0, -1.0)
        self._reference: Optional[float] = None

    @property
    def dim(self) -> int:
        return self._dim

    @property
    def n_examples(self) -> int:
        return self.X.shape[0]

    def initial_weights(self) -> np.ndarray:
        return np.zeros(self._dim)

    def sample_batch(self, rng: np.random.Generator, b: int) -> tuple[np.ndarray, np.ndarray]:
        idx = rng.integers(0, self.n_examples, size=b)
        return self.X[idx], self.y[idx]

    @staticmethod
    def _mean_logloss(W: np.ndarray, X: np.ndarray, y: np.ndarray) -> float:
        return float(np.mean(np.logaddexp(0.0, -y * (X @ W))))

    @staticmethod
    def _mean_grad(W: np.ndarray, X: np.ndarray, y: np.ndarray) -> np.ndarray:
        s = 1.0 / (1.0 + np.exp(np.clip(y * (X @ W), -500, 500)))
        return X.T @ (-y * s) / len(y)

    def loss(self, W: np.ndarray, batch) -> float:
        return self._mean_logloss(W, *batch)

    def grad(self, W: np.ndarray, batch) -> np.ndarray:
        return self._mean_grad(W, *batch)

    def full_loss(self, W: np.ndarray) -> float:
        return self._mean_logloss(W, self.X, self.y)

    def full_grad(self, W: np.ndarray) -> np.ndarray:
        return self._mean_grad(W, self.X, self.y)

    @property
    def reference_loss(self) -> float:  # type: ignore[override]
        """Optimal full-data loss, solved by Newton iteration on first access."""
        if self._reference is None:
            W = np.zeros(self._dim)
            for _ in range(100):
                z = self.y * (self.X @ W)
                s = 1.0 / (1.0 + np.exp(np.clip(z, -500, 500)))
                g = self.X.T @ (-self.y * s) / self.n_examples
                h = (self.X * (s * (1 - s))[:, None]).T @ self.X / self.n_examples
                h += 1e-9 * np.eye(self._dim)
                step = np.linalg.solve(h, g)
                W = W - step
                if np.linalg.norm(g) < 1e-12:
                    break
            self._reference = self.full_loss(W)
        return self._reference


def make_logistic(n_examples: int, dim: int, seed: int = 0, margin_noise: float = 0.5) -> LogisticProblem:
    return LogisticProblem(n_examples, dim, seed, margin_noise)


class TinyCNNProblem(TrainingProblem):
    """conv(3x3, 4 ch) -> ReLU -> 2x2 max-pool -> linear -> softmax cross-entropy.

    The convolution forward runs through the lowering/GEMM pipeline.  The
    backward pass is the reverse cascade: softmax-loss gradient, linear layer,
    max-pool routing to the argmax positions, ReLU mask, then correlation of
    the padded input with the pre-activation gradient for the kernel.

    The model vector packs the conv kernel first, then the linear weights,
    all initialized from a zero-mean Gaussian with standard deviation 0.01.
    Images are synthetic Gaussians labelled by a fixed random linear teacher.
    """

    D_OUT = 4
    K = 3

    def __init__(self, image_size: int, classes: int, seed: int = 0, n_examples: int = 128):
        if image_size < 4 or image_size > 16 or image_size % 2 != 0:
            raise ValueError("image_size must be even and in [4, 16]")
        if not 2 <= classes <= 10:
            raise ValueError("classes must be in [2, 10]")
        self.image_size = image_size
        self.classes = classes
        self.seed = seed
        s = image_size
        self.spec = ConvSpec(n=s, k=self.K, d_in=1, d_out=self.D_OUT, stride=1, pad=1)
        self.feat = self.D_OUT * (s // 2) * (s // 2)
        self.k_size = self.D_OUT * 1 * self.K * self.K

        rng = _rng(seed, 0)
        self.images = rng.standard_normal((n_examples, 1, s, s))
        teacher = rng.standard_normal((classes, s * s))
        self.labels = np.argmax(teacher @ self.images.reshape(n_examples, -1).T, axis=0)

    @property
    def dim(self) -> int:
        return self.k_size + self.feat * self.classes

    @property
    def n_examples(self) -> int:
        return self.images.shape[0]

    def initial_weights(self) -> np.ndarray:
        return 0.01 * _rng(self.seed, 1).standard_normal(self.dim)

    def sample_batch(self, rng: np.random.Generator, b: int) -> tuple[np.ndarray, np.ndarray]:
        idx = rng.integers(0, self.n_examples, size=b)
        return self.images[idx], self.labels[idx]

    def _unpack(self, W: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        kernel = W[: self.k_size].reshape(self.D_OUT, 1, self.K, self.K)
        linear = W[self.k_size :].reshape(self.feat, self.classes)
        return kernel, linear

    def _forward(self, W: np.ndarray, X: np.ndarray):
        kernel, linear = self._unpack(W)
        b, s = X.shape[0], self.image_size
        h = s // 2
        z1 = conv_lowered(Tensor4(X), Tensor4(kernel), self.spec, b_p=b).values
        a1 = np.maximum(z1, 0.0)
        # 2x2 windows flattened on the last axis; argmax gives the pool routing
        windows = a1.reshape(b, self.D_OUT, h, 2, h, 2).transpose(0, 1, 2, 4, 3, 5)
        windows = windows.reshape(b, self.D_OUT, h, h, 4)
        pool_idx = np.argmax(windows, axis=-1)
        pooled = np.take_along_axis(windows, pool_idx[..., None], axis=-1)[..., 0]
        flat = pooled.reshape(b, self.feat)
        logits = flat @ linear
        return z1, windows, pool_idx, flat, logits

    @staticmethod
    def _softmax(logits: np.ndarray) -> np.ndarray:
        shifted = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=1, keepdims=True)

    def predict_proba(self, W: np.ndarray, X: np.ndarray) -> np.ndarray:
        return self._softmax(self._forward(W, X)[-1])

    def _loss_from_logits(self, logits: np.ndarray, y: np.ndarray) -> float:
        shifted = logits - logits.max(axis=1, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=1)) + logits.max(axis=1)
        return float(np.mean(lse - logits[np.arange(len(y)), y]))

    def loss(self, W: np.ndarray, batch) -> float:
        X, y = batch
        return self._loss_from_logits(self._forward(W, X)[-1], y)

    def grad(self, W: np.ndarray, batch) -> np.ndarray:
        X, y = batch
        b, s = X.shape[0], self.image_size
        h = s // 2
        z1, windows, pool_idx, flat, logits = self._forward(W, X)
        _, linear = self._unpack(W)

        p = self._softmax(logits)
        p[np.arange(b), y] -= 1.0
        dlogits = p / b

        dlinear = flat.T @ dlogits
        dflat = dlogits @ linear.T
        dpool = dflat.reshape(b, self.D_OUT, h, h)

        dwindows = np.zeros_like(windows)
        np.put_along_axis(dwindows, pool_idx[..., None], dpool[..., None], axis=-1)
        da1 = (
            dwindows.reshape(b, self.D_OUT, h, h, 2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(b, self.D_OUT, s, s)
        )
        dz1 = da1 * (z1 > 0)

        padded = np.pad(X, ((0, 0), (0, 0), (1, 1), (1, 1)))
        from numpy.lib.stride_tricks import sliding_window_view

        win = sliding_window_view(padded, (self.K, self.K), axis=(2, 3))
        dkernel = np.einsum("bcxykl,boxy->ockl", win, dz1)

        return np.concatenate([dkernel.ravel(), dlinear.ravel()])

    def full_loss(self, W: np.ndarray) -> float:
        return self.loss(W, (self.images, self.labels))

    def full_grad(self, W: np.ndarray) -> np.ndarray:
        return self.grad(W, (self.images, self.labels))


def make_tiny_cnn(image_size: int, classes: int, seed: int = 0, n_examples: int = 128) -> TinyCNNProblem:
    return TinyCNNProblem(image_size, classes, seed, n_examples)
