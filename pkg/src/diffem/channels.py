"""Linear corruption channels: y = A x + noise, with samplers for A.

Supported kinds: a fixed explicit matrix, random per-pixel masking, 2-D
Gaussian blur (constant matrix), and random projections with rows uniform
on the unit sphere.  Mask matrices are stored as compact bit vectors and
materialized to dense only on demand.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def blur_matrix(sigma_kernel: float, height: int, width: int) -> np.ndarray:
    """Dense (H*W) x (H*W) matrix of 2-D Gaussian blur with std sigma_kernel.

    The kernel is truncated at radius ceil(3*sigma_kernel) and renormalized
    per output pixel at the borders, so every row sums to 1.
    """
    if sigma_kernel <= 0:
        raise ValueError("sigma_kernel must be positive")
    if height < 1 or width < 1:
        raise ValueError(f"image {height}x{width} too small for any kernel support")
    radius = int(np.ceil(3.0 * sigma_kernel))
    offsets = np.arange(-radius, radius + 1)
    logw = -(offsets**2) / (2.0 * sigma_kernel**2)
    kernel1d = np.exp(logw)
    out = np.zeros((height * width, height * width))
    for i in range(height):
        for j in range(width):
            row = np.zeros((height, width))
            for di, wi in zip(offsets, kernel1d):
                ii = i + di
                if ii < 0 or ii >= height:
                    continue
                for dj, wj in zip(offsets, kernel1d):
                    jj = j + dj
                    if jj < 0 or jj >= width:
                        continue
                    row[ii, jj] = wi * wj
            out[i * width + j] = row.ravel() / row.sum()
    return out


@dataclass
class MatrixDescriptor:
    """Compact description of one sampled corruption matrix A.

    kind "dense" carries the matrix itself; "mask" a 0/1 bit vector over the
    diagonal; "blur" just the (constant) kernel parameters; "fixed" a
    constant matrix that is implied by the channel and not re-encoded.
    """

    kind: str
    matrix: np.ndarray | None = None
    mask_bits: np.ndarray | None = None
    blur_params: tuple[float, int, int] | None = None

    def as_dense(self) -> np.ndarray:
        if self.kind in ("dense", "fixed"):
            return self.matrix
        if self.kind == "mask":
            return np.diag(self.mask_bits.astype(np.float64))
        if self.kind == "blur":
            return _cached_blur(self.blur_params)
        raise ValueError(f"unknown descriptor kind '{self.kind}'")

    def apply(self, x: np.ndarray) -> np.ndarray:
        if self.kind == "mask":
            return self.mask_bits * x
        if self.kind == "blur":
            return _cached_blur(self.blur_params) @ x
        return self.matrix @ x

    def encoding(self) -> np.ndarray:
        """Conditioning features for the denoiser (empty when A is constant)."""
        if self.kind == "mask":
            return self.mask_bits.astype(np.float64)
        if self.kind == "dense":
            return self.matrix.ravel().astype(np.float64)
        # blur and fixed matrices are constant across observations
        return np.zeros(0)


_BLUR_CACHE: dict[tuple, np.ndarray] = {}


def _cached_blur(params):
    if params not in _BLUR_CACHE:
        _BLUR_CACHE[params] = blur_matrix(*params)
    return _BLUR_CACHE[params]


@dataclass
class Observation:
    """One corrupted measurement y together with the matrix that produced it."""

    y: np.ndarray
    desc: MatrixDescriptor

    def __post_init__(self):
        dy = len(self.y)
        if self.desc.kind == "mask" and dy != len(self.desc.mask_bits):
            raise ValueError("observation length does not match mask length")
        if self.desc.kind == "dense" and dy != self.desc.matrix.shape[0]:
            raise ValueError("observation length does not match matrix rows")


class CorruptionChannel:
    """Sampler for corruption matrices plus the additive noise level sigma_y.

    Parameters
    ----------
    kind : "fixed" | "mask" | "blur" | "sphere"
    dim_x : ambient (clean) dimension
    sigma_y : noise standard deviation, >= 0
    rho : mask probability (deleted fraction), for kind "mask"
    sigma_kernel, height, width : blur parameters, for kind "blur"
    rows : number of projection rows r, for kind "sphere"
    matrix : explicit matrix, for kind "fixed"
    """

    def __init__(self, kind, dim_x, sigma_y, rho=None, sigma_kernel=None,
                 height=None, width=None, rows=None, matrix=None):
        if sigma_y < 0:
            raise ValueError("sigma_y must be >= 0")
        self.kind = kind
        self.dim_x = int(dim_x)
        self.sigma_y = float(sigma_y)
        if kind == "mask":
            if rho is None or not 0.0 <= rho <= 1.0:
                raise ValueError("mask channel needs rho in [0, 1]")
            self.rho = float(rho)
            self.dim_y = self.dim_x
        elif kind == "blur":
            if sigma_kernel is None or sigma_kernel <= 0:
                raise ValueError("blur channel needs sigma_kernel > 0")
            if height is None or width is None or height * width != dim_x:
                raise ValueError("blur channel needs height * width == dim_x")
            self.blur_params = (float(sigma_kernel), int(height), int(width))
            blur_matrix(*self.blur_params)  # validate support early
            self.dim_y = self.dim_x
        elif kind == "sphere":
            if rows is None or not 1 <= rows <= dim_x:
                raise ValueError("sphere channel needs 1 <= rows <= dim_x")
            self.rows = int(rows)
            self.dim_y = self.rows
        elif kind == "fixed":
            if matrix is None:
                raise ValueError("fixed channel needs an explicit matrix")
            self.matrix = np.asarray(matrix, dtype=np.float64)
            if self.matrix.shape[1] != dim_x:
                raise ValueError("fixed matrix column count must equal dim_x")
            self.dim_y = self.matrix.shape[0]
        else:
            raise ValueError(f"unknown channel kind '{kind}'")

    @property
    def desc_width(self) -> int:
        """Width of the per-observation conditioning encoding of A."""
        if self.kind == "mask":
            return self.dim_x
        if self.kind == "sphere":
            return self.rows * self.dim_x
        return 0  # blur and fixed matrices are constant, A is implied

    def constant_matrix(self) -> np.ndarray:
        """Dense A for kinds where A does not vary per observation."""
        if self.kind == "blur":
            return _cached_blur(self.blur_params)
        if self.kind == "fixed":
            return self.matrix
        raise ValueError(f"channel kind '{self.kind}' has per-item matrices")

    def sample_matrix(self, rng) -> MatrixDescriptor:
        if self.kind == "mask":
            bits = (rng.random(self.dim_x) >= self.rho).astype(np.uint8)
            return MatrixDescriptor("mask", mask_bits=bits)
        if self.kind == "blur":
            return MatrixDescriptor("blur", blur_params=self.blur_params)
        if self.kind == "sphere":
            rows = rng.standard_normal((self.rows, self.dim_x))
            rows /= np.linalg.norm(rows, axis=1, keepdims=True)
            return MatrixDescriptor("dense", matrix=rows)
        return MatrixDescriptor("fixed", matrix=self.matrix)

    def corrupt(self, x, desc: MatrixDescriptor, rng) -> Observation:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.dim_x,):
            raise ValueError(
                f"clean vector has shape {x.shape}, channel expects ({self.dim_x},)"
            )
        y = desc.apply(x)
        if self.sigma_y > 0:
            y = y + self.sigma_y * rng.standard_normal(y.shape)
        return Observation(y=y, desc=desc)

    def observe(self, x, rng) -> Observation:
        """Sample a fresh matrix and corrupt x with it."""
        return self.corrupt(x, self.sample_matrix(rng), rng)


def channel_log_likelihood(y, x, desc: MatrixDescriptor, sigma_y: float) -> float:
    """log N(y; A x, sigma_y^2 I), including the normalization constant."""
    if sigma_y <= 0:
        raise ValueError("sigma_y must be positive: density undefined at 0")
    y = np.asarray(y, dtype=np.float64)
    resid = y - desc.apply(np.asarray(x, dtype=np.float64))
    d = resid.size
    return float(
        -0.5 * d * np.log(2.0 * np.pi * sigma_y**2)
        - 0.5 * np.dot(resid, resid) / sigma_y**2
    )


def pack_mask(bits: np.ndarray) -> np.ndarray:
    """Lossless compact storage of a 0/1 mask vector."""
    return np.packbits(bits.astype(np.uint8))


def unpack_mask(packed: np.ndarray, length: int) -> np.ndarray:
    return np.unpackbits(packed, count=length).astype(np.uint8)
