"""Dense 4-D convolution kernels: direct evaluation and lowering/GEMM/lifting.

A convolution consumes a data tensor D (n x n x d_in x b) and a kernel
tensor K (k x k x d_in x d_out) and produces R (m x m x d_out x b) with
m = (n + 2*pad - k)/stride + 1. Out-of-range input indices read as zero.

Two routes are provided:

* ``conv_direct``   -- sliding-window accumulation, the correctness oracle.
* ``conv_lowered``  -- im2col-style lowering into a (m^2*b_p x k^2*d_in)
  matrix, a deterministic blocked GEMM, and a lifting step that is a pure
  index remap.  ``b_p`` controls how many images share one GEMM and
  ``workers`` data-parallel partitions of the batch; neither may change
  the numerical result.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

# Fixed inner-dimension block for the GEMM. Accumulation order is a fixed
# function of this constant only, which keeps results bit-reproducible no
# matter how callers partition the batch.
_GEMM_BLOCK = 128


@dataclass(frozen=True)
class ConvSpec:
    """Shape parameters of one convolution."""

    n: int
    k: int
    d_in: int
    d_out: int
    stride: int = 1
    pad: int = 0

    def __post_init__(self) -> None:
        if min(self.n, self.k, self.d_in, self.d_out, self.stride) < 1:
            raise ValueError("n, k, d_in, d_out, stride must be positive")
        if self.pad < 0:
            raise ValueError("pad must be non-negative")
        if self.k > self.n + 2 * self.pad:
            raise ValueError(f"kernel {self.k} exceeds padded input {self.n + 2 * self.pad}")
        span = self.n + 2 * self.pad - self.k
        if span % self.stride != 0:
            raise ValueError(
                f"output size not integral: (n + 2*pad - k) = {span} "
                f"is not divisible by stride {self.stride}"
            )

    @property
    def m(self) -> int:
        """Output spatial size."""
        return (self.n + 2 * self.pad - self.k) // self.stride + 1


@dataclass(frozen=True)
class Tensor4:
    """4-D tensor stored as a C-ordered (batch, channels, n1, n2) array.

    Raveling ``values`` yields the flat row-major layout with batch slowest.
    """

    values: np.ndarray

    def __post_init__(self) -> None:
        arr = np.ascontiguousarray(self.values, dtype=np.float64)
        if arr.ndim != 4:
            raise ValueError(f"expected 4 dims, got {arr.ndim}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor contains non-finite values")
        object.__setattr__(self, "values", arr)

    @property
    def n1(self) -> int:
        return self.values.shape[2]

    @property
    def n2(self) -> int:
        return self.values.shape[3]

    @property
    def channels(self) -> int:
        return self.values.shape[1]

    @property
    def batch(self) -> int:
        return self.values.shape[0]

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return (self.n1, self.n2, self.channels, self.batch)

    @property
    def data(self) -> np.ndarray:
        """Flat view, row-major with batch slowest."""
        return self.values.ravel()

    @classmethod
    def from_flat(cls, dims: tuple[int, int, int, int], data) -> "Tensor4":
        n1, n2, channels, batch = dims
        arr = np.asarray(data, dtype=np.float64)
        if arr.size != n1 * n2 * channels * batch:
            raise ValueError(
                f"data length {arr.size} != n1*n2*channels*batch = {n1 * n2 * channels * batch}"
            )
        return cls(arr.reshape(batch, channels, n1, n2))


@dataclass(frozen=True)
class LoweredMatrix:
    """Lowered data matrix D-hat: one row per (image, output position)."""

    matrix: np.ndarray
    b_p: int

    @property
    def rows(self) -> int:
        return self.matrix.shape[0]

    @property
    def cols(self) -> int:
        return self.matrix.shape[1]

    @property
    def data(self) -> np.ndarray:
        return self.matrix.ravel()


def _check_conv_inputs(D: Tensor4, K: Tensor4, spec: ConvSpec) -> None:
    if D.dims != (spec.n, spec.n, spec.d_in, D.batch):
        raise ValueError(f"data dims {D.dims} do not match spec (n={spec.n}, d_in={spec.d_in})")
    if K.dims != (spec.k, spec.k, spec.d_in, K.batch) or K.batch != spec.d_out:
        raise ValueError(
            f"kernel dims {K.dims} do not match spec (k={spec.k}, d_in={spec.d_in}, d_out={spec.d_out})"
        )


def conv_direct(D: Tensor4, K: Tensor4, spec: ConvSpec) -> Tensor4:
    """Convolution by sliding-window accumulation (the oracle route).

    Output entry (x, y, z, w) is the triple sum over (x', y', d') of
    D[x*stride - pad + x', y*stride - pad + y', d', w] * K[x', y', d', z],
    with zero for out-of-range data indices.
    """
    _check_conv_inputs(D, K, spec)
    m, s, p, k = spec.m, spec.stride, spec.pad, spec.k
    padded = np.pad(D.values, ((0, 0), (0, 0), (p, p), (p, p)))
    out = np.zeros((D.batch, spec.d_out, m, m))
    hi = s * (m - 1) + 1
    for kx in range(k):
        for ky in range(k):
            window = padded[:, :, kx : kx + hi : s, ky : ky + hi : s]
            # K stored (d_out, d_in, k, k); sum over input channels
            out += np.einsum("bcxy,oc->boxy", window, K.values[:, :, kx, ky])
    return Tensor4(out)


def lower(D: Tensor4, spec: ConvSpec, b_p: int, start: int = 0) -> LoweredMatrix:
    """Lower images [start, start + b_p) into a (b_p*m^2, k^2*d_in) matrix.

    Row i = image*m^2 + (x*m + y); column = (d'*k + x')*k + y'.  This layout
    makes the lift of the GEMM output a pure reshape.  Callers processing a
    full batch in chunks pass successive ``start`` offsets.
    """
    if not 1 <= b_p <= D.batch:
        raise ValueError(f"b_p={b_p} out of range [1, {D.batch}]")
    if not 0 <= start <= D.batch - b_p:
        raise ValueError(f"start={start} leaves fewer than b_p={b_p} images")
    m, s, p, k = spec.m, spec.stride, spec.pad, spec.k
    chunk = D.values[start : start + b_p]
    padded = np.pad(chunk, ((0, 0), (0, 0), (p, p), (p, p)))
    # (b_p, c, m, m, k, k) sliding windows, then group (c, kx, ky) per row
    windows = sliding_window_view(padded, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    mat = windows.transpose(0, 2, 3, 1, 4, 5).reshape(b_p * m * m, spec.d_in * k * k)
    return LoweredMatrix(matrix=np.ascontiguousarray(mat), b_p=b_p)


def lower_kernel(K: Tensor4, spec: ConvSpec) -> np.ndarray:
    """Reshape the kernel tensor into the (k^2*d_in, d_out) matrix K-hat."""
    if K.dims != (spec.k, spec.k, spec.d_in, spec.d_out):
        raise ValueError(f"kernel dims {K.dims} do not match spec")
    return np.ascontiguousarray(
        K.values.transpose(1, 2, 3, 0).reshape(spec.d_in * spec.k * spec.k, spec.d_out)
    )


def gemm(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Dense product with a fixed summation order.

    The inner dimension is consumed in fixed blocks of ascending index, so
    identical inputs give bit-identical outputs regardless of how the caller
    partitioned surrounding work.  Not tuned for peak FLOPS.
    """
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.ndim != 2 or B.ndim != 2:
        raise ValueError("gemm expects 2-D operands")
    if A.shape[1] != B.shape[0]:
        raise ValueError(f"inner dimensions disagree: {A.shape} x {B.shape}")
    out = np.zeros((A.shape[0], B.shape[1]))
    for j0 in range(0, A.shape[1], _GEMM_BLOCK):
        j1 = min(j0 + _GEMM_BLOCK, A.shape[1])
        out += np.einsum("ik,kj->ij", A[:, j0:j1], B[j0:j1, :])
    return out


def lift(Rhat: np.ndarray, spec: ConvSpec, b: int) -> Tensor4:
    """Remap the GEMM output (b*m^2, d_out) back to a tensor; no arithmetic."""
    Rhat = np.asarray(Rhat, dtype=np.float64)
    m = spec.m
    if Rhat.shape != (b * m * m, spec.d_out):
        raise ValueError(f"result shape {Rhat.shape} != ({b * m * m}, {spec.d_out})")
    return Tensor4(Rhat.reshape(b, m, m, spec.d_out).transpose(0, 3, 1, 2))


def conv_lowered(
    D: Tensor4, K: Tensor4, spec: ConvSpec, b_p: int = 1, workers: int = 1
) -> Tensor4:
    """Convolution via lowering + GEMM + lifting.

    The batch is split into ``workers`` contiguous partitions which are
    lowered and multiplied independently (in threads when workers > 1);
    within a partition, ``b_p`` images share one GEMM, with a final smaller
    chunk when b_p does not divide the partition.  Output rows from
    different chunks never mix, so the result is independent of both knobs.
    """
    _check_conv_inputs(D, K, spec)
    if not 1 <= b_p <= D.batch:
        raise ValueError(f"b_p={b_p} out of range [1, {D.batch}]")
    if workers < 1:
        raise ValueError("workers must be >= 1")
    m = spec.m
    Khat = lower_kernel(K, spec)
    Rhat = np.empty((D.batch * m * m, spec.d_out))

    bounds = np.linspace(0, D.batch, num=min(workers, D.batch) + 1, dtype=int)

    def run_partition(lo: int, hi: int) -> None:
        for c0 in range(lo, hi, b_p):
            size = min(b_p, hi - c0)
            Dhat = lower(D, spec, size, start=c0)
            Rhat[c0 * m * m : (c0 + size) * m * m] = gemm(Dhat.matrix, Khat)

    parts = [(int(lo), int(hi)) for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]
    if len(parts) == 1:
        run_partition(*parts[0])
    else:
        with ThreadPoolExecutor(max_workers=len(parts)) as pool:
            list(pool.map(lambda ab: run_partition(*ab), parts))
    return lift(Rhat, spec, D.batch)


def blowup_ratio(spec: ConvSpec) -> float:
    """Replication factor of lowering: lowered elements / original elements."""
    return (spec.m**2 * spec.k**2) / spec.n**2
