#!/usr/bin/env python3
"""
Tensor-network classifiers built from matrix product state (MPS) blocks.

Contains the local feature maps, the squeeze / rearrange spatial transforms,
the MPS block with a log-scale stabilised contraction and its hand-written
reverse pass, batch normalisation, and the model families compared in the
experiments: the multi-layered tensor network (MLTN), the single-chain
Tenet-X classifier, the patch-based LoTeNet baseline and a dense MLP.
"""

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from errors import CacheMismatch, ConfigError, DomainError, NumericalError, ShapeMismatch, SizeLimit
from tensor_core import ArrayLike, Tensor, as_array, contract_axes, contract_index, einsum, outer, transpose

# --- Configuration ---
ORACLE_CAP = 2 ** 20
DEFAULT_INIT_NOISE = 1e-2
BN_MOMENTUM = 0.1
BN_EPS = 1e-5
BN_SHIFT_INIT = 1.0


# --- Feature maps ---

class FeatureMap(str, Enum):
    SQUEEZE = "squeeze"          # no per-pixel lift; squeeze supplies the feature dim
    SINUSOIDAL = "sinusoidal"    # [cos(pi x / 2), sin(pi x / 2)]
    LINEAR = "linear"            # [1 - x, x]

    @property
    def local_dim(self) -> int:
        return 1 if self is FeatureMap.SQUEEZE else 2


def _check_unit_interval(x: np.ndarray, fmap: FeatureMap) -> None:
    if not np.all(np.isfinite(x)) or np.any(x < 0.0) or np.any(x > 1.0):
        raise DomainError(f"{fmap.value} feature map needs pixel values in [0, 1]")


def local_feature_map(pixels: ArrayLike, fmap: FeatureMap = FeatureMap.SINUSOIDAL) -> np.ndarray:
    """Append a feature axis of extent fmap.local_dim to every pixel."""
    x = as_array(pixels)
    fmap = FeatureMap(fmap)
    if fmap is FeatureMap.SQUEEZE:
        return np.array(x[..., None], dtype=np.float64)
    _check_unit_interval(x, fmap)
    if fmap is FeatureMap.SINUSOIDAL:
        angle = 0.5 * math.pi * x
        return np.stack([np.cos(angle), np.sin(angle)], axis=-1)
    return np.stack([1.0 - x, x], axis=-1)


def local_feature_map_grad(pixels: ArrayLike, fmap: FeatureMap) -> np.ndarray:
    """Elementwise derivative of local_feature_map with respect to the pixel."""
    x = as_array(pixels)
    fmap = FeatureMap(fmap)
    if fmap is FeatureMap.SQUEEZE:
        return np.ones(x.shape + (1,))
    if fmap is FeatureMap.SINUSOIDAL:
        angle = 0.5 * math.pi * x
        return 0.5 * math.pi * np.stack([-np.sin(angle), np.cos(angle)], axis=-1)
    return np.stack([-np.ones_like(x), np.ones_like(x)], axis=-1)


def joint_feature_map_oracle(site_vectors: Sequence[ArrayLike]) -> Tensor:
    """Explicit order-S tensor product of the site vectors (small inputs only)."""
    vectors = [Tensor(as_array(v).reshape(-1)) for v in site_vectors]
    if not vectors:
        raise ShapeMismatch("joint feature map needs at least one site vector")
    extents = {v.shape[0] for v in vectors}
    if len(extents) != 1:
        raise ShapeMismatch(f"site vectors must share one extent, got {sorted(extents)}")
    if extents.pop() ** len(vectors) > ORACLE_CAP:
        raise SizeLimit(f"joint feature map of {len(vectors)} sites exceeds {ORACLE_CAP} entries")
    phi = vectors[0]
    for v in vectors[1:]:
        phi = outer(phi, v)
    return phi


# --- Squeeze / rearrange ---

@dataclass(frozen=True)
class SqueezeSpec:
    stride: int
    height: int
    width: int

    def __post_init__(self) -> None:
        if self.stride < 1 or self.height < 1 or self.width < 1:
            raise ShapeMismatch(f"invalid squeeze spec {self}")
        if self.height % self.stride or self.width % self.stride:
            raise ShapeMismatch(f"stride {self.stride} does not divide a {self.height}x{self.width} image")

    @property
    def grid_height(self) -> int:
        return self.height // self.stride

    @property
    def grid_width(self) -> int:
        return self.width // self.stride

    @property
    def n_sites(self) -> int:
        return self.grid_height * self.grid_width

    @property
    def feature_dim(self) -> int:
        return self.stride * self.stride


def _fold(images: np.ndarray, k: int) -> np.ndarray:
    """[B, H, W, C] -> [B, S, k*k*C]; sites row-major over blocks, features row-major in a block, channel fastest."""
    b, h, w, c = images.shape
    gh, gw = h // k, w // k
    blocks = images.reshape(b, gh, k, gw, k, c).transpose(0, 1, 3, 2, 4, 5)
    return blocks.reshape(b, gh * gw, k * k * c)


def _unfold(sites: np.ndarray, k: int, h: int, w: int, c: int) -> np.ndarray:
    b = sites.shape[0]
    blocks = sites.reshape(b, h // k, w // k, k, k, c).transpose(0, 1, 3, 2, 4, 5)
    return blocks.reshape(b, h, w, c)


def squeeze(image: ArrayLike, spec: SqueezeSpec) -> np.ndarray:
    """Fold every k x k block into the feature axis: [H, W] -> [S, k^2] (batch axis optional)."""
    x = as_array(image)
    if x.ndim not in (2, 3) or x.shape[-2:] != (spec.height, spec.width):
        raise ShapeMismatch(f"image of shape {x.shape} does not match {spec}")
    sites = _fold(x.reshape((-1, spec.height, spec.width, 1)), spec.stride)
    return sites if x.ndim == 3 else sites[0]


def unsqueeze(sites: ArrayLike, spec: SqueezeSpec) -> np.ndarray:
    """Exact inverse of squeeze."""
    x = as_array(sites)
    if x.ndim not in (2, 3) or x.shape[-2:] != (spec.n_sites, spec.feature_dim):
        raise ShapeMismatch(f"sites of shape {x.shape} do not match {spec}")
    image = _unfold(x.reshape((-1, spec.n_sites, spec.feature_dim)), spec.stride, spec.height, spec.width, 1)
    image = image[..., 0]
    return image if x.ndim == 3 else image[0]


def rearrange(vector: ArrayLike, side: int) -> np.ndarray:
    """Row-major fold of an MPS output vector back into a side x side image."""
    x = as_array(vector)
    if x.ndim < 1 or x.shape[-1] != side * side:
        raise ShapeMismatch(f"{x.shape[-1] if x.ndim else 0} outputs cannot fill a {side}x{side} image")
    return x.reshape(x.shape[:-1] + (side, side))


# --- MPS block ---

class MpsBlock:
    """Open-boundary chain of site tensors with one output-bearing site.

    Site shapes: [d, beta] at either boundary, [d, beta, beta] in the interior,
    and the output site carries a trailing axis of extent m.
    """

    def __init__(
        self,
        n_sites: int,
        feature_dim: int,
        bond_dim: int,
        output_dim: int,
        output_site: Optional[int] = None,
        site_tensors: Optional[Sequence[np.ndarray]] = None,
    ) -> None:
        if n_sites < 2 or feature_dim < 1 or bond_dim < 1 or output_dim < 1:
            raise ConfigError(
                f"invalid MPS block: sites={n_sites}, d={feature_dim}, bond={bond_dim}, m={output_dim}"
            )
        self.n_sites = int(n_sites)
        self.feature_dim = int(feature_dim)
        self.bond_dim = int(bond_dim)
        self.output_dim = int(output_dim)
        self.output_site = self.n_sites // 2 if output_site is None else int(output_site)
        if not 0 <= self.output_site < self.n_sites:
            raise ConfigError(f"output site {self.output_site} outside a {self.n_sites}-site chain")

        if site_tensors is None:
            self.site_tensors = [np.zeros(self.site_shape(j)) for j in range(self.n_sites)]
        else:
            if len(site_tensors) != self.n_sites:
                raise ShapeMismatch(f"expected {self.n_sites} site tensors, got {len(site_tensors)}")
            self.site_tensors = []
            for j, tensor in enumerate(site_tensors):
                arr = np.array(as_array(tensor), dtype=np.float64, order="C", copy=True)
                if arr.shape != self.site_shape(j):
                    raise ShapeMismatch(f"site {j}: expected {self.site_shape(j)}, got {arr.shape}")
                self.site_tensors.append(arr)

    @classmethod
    def initialize(
        cls,
        n_sites: int,
        feature_dim: int,
        bond_dim: int,
        output_dim: int,
        output_site: Optional[int] = None,
        noise: float = DEFAULT_INIT_NOISE,
        gain: float = 1.0,
        rng: Optional[np.random.Generator] = None,
    ) -> "MpsBlock":
        """Identity slices plus Gaussian noise, all scaled by gain.

        Boundary slices start as the first basis vector and the output site
        repeats the identity across m, so the chain starts near unit scale.
        """
        rng = rng if rng is not None else np.random.default_rng()
        block = cls(n_sites, feature_dim, bond_dim, output_dim, output_site)
        eye = np.eye(bond_dim)
        for j in range(block.n_sites):
            core = block.core(j)
            base = eye[: core.shape[1], : core.shape[2]]
            if j == block.output_site:
                base = np.repeat(base[:, :, None], block.output_dim, axis=2)
            core[...] = gain * (base[None] + noise * rng.standard_normal(core.shape))
        return block

    def site_shape(self, j: int) -> Tuple[int, ...]:
        shape = [self.feature_dim]
        if j > 0:
            shape.append(self.bond_dim)
        if j < self.n_sites - 1:
            shape.append(self.bond_dim)
        if j == self.output_site:
            shape.append(self.output_dim)
        return tuple(shape)

    def core(self, j: int) -> np.ndarray:
        """View of site j as [d, left, right] (+ [m]) with unit bonds at the boundaries."""
        left = 1 if j == 0 else self.bond_dim
        right = 1 if j == self.n_sites - 1 else self.bond_dim
        shape = (self.feature_dim, left, right)
        if j == self.output_site:
            shape += (self.output_dim,)
        return self.site_tensors[j].reshape(shape)

    def signature(self) -> Tuple[Tuple[int, ...], ...]:
        return tuple(t.shape for t in self.site_tensors) + ((self.output_site,),)

    def param_count(self) -> int:
        return sum(t.size for t in self.site_tensors)

    def copy(self) -> "MpsBlock":
        return MpsBlock(
            self.n_sites, self.feature_dim, self.bond_dim, self.output_dim, self.output_site, self.site_tensors
        )

    def __repr__(self) -> str:
        return (
            f"MpsBlock(sites={self.n_sites}, d={self.feature_dim}, bond={self.bond_dim}, "
            f"m={self.output_dim}, output_site={self.output_site})"
        )


@dataclass
class ContractionCache:
    sites: np.ndarray
    transfer: List[np.ndarray]
    # left[j]: scaled product of sites < j and its log scale; right[j]: sites >= j
    left: List[Optional[Tuple[np.ndarray, np.ndarray]]]
    right: List[Optional[Tuple[np.ndarray, np.ndarray]]]
    batched: bool
    stabilize: bool
    signature: Tuple[Tuple[int, ...], ...]


def _rescale(vec: np.ndarray, log: np.ndarray, stabilize: bool, where: str) -> Tuple[np.ndarray, np.ndarray]:
    if not np.all(np.isfinite(vec)):
        raise NumericalError(f"partial product overflowed at {where}")
    if not stabilize:
        return vec, log
    scale = np.max(np.abs(vec), axis=1)
    if np.any(scale == 0.0):
        raise NumericalError(
            f"partial product vanished at {where}; an all-zero input block under the squeeze feature map "
            "zeroes the chain, use --feature-map linear or sinusoidal"
        )
    return vec / scale[:, None], log + np.log(scale)


def _rescale_grad(vec: np.ndarray, log: np.ndarray, stabilize: bool) -> Tuple[np.ndarray, np.ndarray]:
    if not stabilize:
        return vec, log
    scale = np.max(np.abs(vec), axis=1)
    scale = np.where(scale > 0.0, scale, 1.0)
    return vec / scale[:, None], log + np.log(scale)


def mps_forward(block: MpsBlock, sites: ArrayLike, stabilize: bool = True) -> Tuple[np.ndarray, ContractionCache]:
    """Contract the chain against per-site feature vectors.

    sites is [S, d] or [B, S, d]; logits are [m] or [B, m]. Partial products
    are divided by their max-abs entry and the log factors re-applied at the
    output site.
    """
    x = as_array(sites)
    batched = x.ndim == 3
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[1:] != (block.n_sites, block.feature_dim):
        raise ShapeMismatch(
            f"sites of shape {as_array(sites).shape} do not fit ({block.n_sites}, {block.feature_dim})"
        )
    n_batch, n_sites, c = x.shape[0], block.n_sites, block.output_site

    transfer = []
    for j in range(n_sites):
        if j == c:
            transfer.append(einsum("bi,ilrm->blrm", x[:, j, :], block.core(j)))
        else:
            transfer.append(einsum("bi,ilr->blr", x[:, j, :], block.core(j)))

    left: List[Optional[Tuple[np.ndarray, np.ndarray]]] = [None] * (n_sites + 1)
    vec, log = np.ones((n_batch, 1)), np.zeros(n_batch)
    left[0] = (vec, log)
    for j in range(c):
        vec = einsum("ba,bar->br", vec, transfer[j])
        vec, log = _rescale(vec, log, stabilize, f"site {j}")
        left[j + 1] = (vec, log)

    right: List[Optional[Tuple[np.ndarray, np.ndarray]]] = [None] * (n_sites + 1)
    vec, log = np.ones((n_batch, 1)), np.zeros(n_batch)
    right[n_sites] = (vec, log)
    for j in range(n_sites - 1, c, -1):
        vec = einsum("bar,br->ba", transfer[j], vec)
        vec, log = _rescale(vec, log, stabilize, f"site {j}")
        right[j] = (vec, log)

    lvec, llog = left[c]
    rvec, rlog = right[c + 1]
    logits = einsum("ba,barm,br->bm", lvec, transfer[c], rvec) * np.exp(llog + rlog)[:, None]

    cache = ContractionCache(x, transfer, left, right, batched, stabilize, block.signature())
    return (logits if batched else logits[0]), cache


def mps_backward(
    block: MpsBlock, cache: ContractionCache, grad_logits: ArrayLike
) -> Tuple[List[np.ndarray], np.ndarray]:
    """Gradients of sum(grad_logits * logits) w.r.t. every site tensor and the input features."""
    if cache.signature != block.signature():
        raise CacheMismatch("cache was produced by a block of a different shape")
    g_out = as_array(grad_logits)
    if not cache.batched:
        g_out = g_out[None]
    x, transfer, stabilize = cache.sites, cache.transfer, cache.stabilize
    n_batch, n_sites, c = x.shape[0], block.n_sites, block.output_site
    if g_out.shape != (n_batch, block.output_dim):
        raise CacheMismatch(f"grad_logits of shape {g_out.shape}, expected ({n_batch}, {block.output_dim})")

    lvec, llog = cache.left[c]
    rvec, rlog = cache.right[c + 1]
    grad_transfer: List[Optional[np.ndarray]] = [None] * n_sites
    grad_transfer[c] = einsum("bm,ba,br->barm", g_out, lvec, rvec) * np.exp(llog + rlog)[:, None, None, None]

    g, glog = _rescale_grad(einsum("bm,barm,br->ba", g_out, transfer[c], rvec), rlog, stabilize)
    for j in range(c - 1, -1, -1):
        pvec, plog = cache.left[j]
        grad_transfer[j] = einsum("ba,br->bar", pvec, g) * np.exp(plog + glog)[:, None, None]
        if j > 0:
            g, glog = _rescale_grad(einsum("bar,br->ba", transfer[j], g), glog, stabilize)

    g, glog = _rescale_grad(einsum("bm,ba,barm->br", g_out, lvec, transfer[c]), llog, stabilize)
    for j in range(c + 1, n_sites):
        nvec, nlog = cache.right[j + 1]
        grad_transfer[j] = einsum("ba,br->bar", g, nvec) * np.exp(glog + nlog)[:, None, None]
        if j < n_sites - 1:
            g, glog = _rescale_grad(einsum("ba,bar->br", g, transfer[j]), glog, stabilize)

    grad_sites = []
    grad_input = np.empty_like(x)
    for j in range(n_sites):
        core = block.core(j)
        if j == c:
            grad_core = einsum("bi,blrm->ilrm", x[:, j, :], grad_transfer[j])
            grad_input[:, j, :] = einsum("blrm,ilrm->bi", grad_transfer[j], core)
        else:
            grad_core = einsum("bi,blr->ilr", x[:, j, :], grad_transfer[j])
            grad_input[:, j, :] = einsum("blr,ilr->bi", grad_transfer[j], core)
        grad_sites.append(grad_core.reshape(block.site_shape(j)))
    return grad_sites, (grad_input if cache.batched else grad_input[0])


def mps_to_full_tensor(block: MpsBlock) -> Tensor:
    """Assemble the full weight tensor [d]*S + [m] by summing over every bond index."""
    if block.feature_dim ** block.n_sites * block.output_dim > ORACLE_CAP:
        raise SizeLimit(f"full tensor of {block} exceeds {ORACLE_CAP} entries")
    theta = Tensor(np.ones(1))
    has_output = False
    for j in range(block.n_sites):
        bond_axis = theta.rank - (2 if has_output else 1)
        theta = contract_index(theta, bond_axis, Tensor(block.core(j)), 1)
        if has_output:
            n = theta.rank
            theta = transpose(theta, list(range(n - 3)) + [n - 2, n - 1, n - 3])
        elif j == block.output_site:
            has_output = True
    full_shape = (block.feature_dim,) * block.n_sites + (block.output_dim,)
    return Tensor(theta.array.reshape(full_shape))


def contract_full_tensor(theta: Tensor, phi: Tensor) -> Tensor:
    """Inner product of the weight tensor with a joint feature map, leaving the output axis."""
    axes = list(range(phi.rank))
    return contract_axes(theta, axes, phi, axes)


def mps_param_count(block: MpsBlock) -> int:
    return block.param_count()


# --- Batch normalisation ---

@dataclass
class BatchNormCache:
    x_hat: np.ndarray
    inv_std: np.ndarray
    training: bool


class BatchNorm:
    """Normalises over every axis but the trailing channel axis."""

    def __init__(
        self, channels: int = 1, momentum: float = BN_MOMENTUM, eps: float = BN_EPS, shift_init: float = BN_SHIFT_INIT
    ) -> None:
        if not 0.0 < momentum < 1.0 or eps <= 0.0:
            raise ConfigError(f"batch norm needs momentum in (0, 1) and eps > 0, got {momentum}, {eps}")
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.scale = np.ones(channels)
        self.shift = np.full(channels, float(shift_init))
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def forward(self, x: np.ndarray, training: bool) -> Tuple[np.ndarray, BatchNormCache]:
        if x.shape[-1] != self.channels:
            raise ShapeMismatch(f"batch norm over {self.channels} channels got input {x.shape}")
        axes = tuple(range(x.ndim - 1))
        if training:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            n = x.size // self.channels
            unbiased = var * n / (n - 1) if n > 1 else var
            self.running_mean *= 1.0 - self.momentum
            self.running_mean += self.momentum * mean
            self.running_var *= 1.0 - self.momentum
            self.running_var += self.momentum * unbiased
        else:
            mean, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        x_hat = (x - mean) * inv_std
        return x_hat * self.scale + self.shift, BatchNormCache(x_hat, inv_std, training)

    def calibrate(self, x: np.ndarray) -> np.ndarray:
        """Adopt the batch statistics of x as running statistics and return the eval-mode output."""
        axes = tuple(range(x.ndim - 1))
        self.running_mean[...] = x.mean(axis=axes)
        self.running_var[...] = x.var(axis=axes)
        return self.forward(x, training=False)[0]

    def backward(self, cache: BatchNormCache, grad_y: np.ndarray) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
        axes = tuple(range(grad_y.ndim - 1))
        grads = {
            "scale": np.sum(grad_y * cache.x_hat, axis=axes),
            "shift": np.sum(grad_y, axis=axes),
        }
        g_hat = grad_y * self.scale
        if not cache.training:
            return g_hat * cache.inv_std, grads
        n = grad_y.size // self.channels
        grad_x = (cache.inv_std / n) * (
            n * g_hat - g_hat.sum(axis=axes) - cache.x_hat * np.sum(g_hat * cache.x_hat, axis=axes)
        )
        return grad_x, grads


# --- Dimension chain ---

@dataclass(frozen=True)
class LayerPlan:
    index: int
    in_height: int
    in_width: int
    channels: int
    stride: int
    grid_height: int
    grid_width: int
    n_sites: int
    feature_dim: int
    output_dim: int
    n_blocks: int = 1

    @property
    def output_side(self) -> int:
        return math.isqrt(self.output_dim)


def plan_mltn(height: int, width: int, strides: Sequence[int], class_count: int, local_dim: int = 1) -> List[LayerPlan]:
    """Per-layer site counts and feature dims; raises ConfigError when the chain breaks."""
    if not strides:
        raise ConfigError("at least one stride is required")
    if class_count < 2:
        raise ConfigError(f"class_count must be >= 2, got {class_count}")
    plans = []
    h, w, channels = height, width, local_dim
    for l, k in enumerate(strides):
        if k < 1:
            raise ConfigError(f"layer {l + 1}: stride must be >= 1, got {k}")
        if h % k or w % k:
            raise ConfigError(f"layer {l + 1}: stride {k} does not divide the {h}x{w} input")
        gh, gw = h // k, w // k
        n_sites = gh * gw
        if n_sites < 2:
            raise ConfigError(f"layer {l + 1}: {n_sites} site(s) left; an MPS needs at least 2")
        last = l == len(strides) - 1
        output_dim = class_count if last else n_sites
        if not last and math.isqrt(n_sites) ** 2 != n_sites:
            raise ConfigError(f"layer {l + 1}: {n_sites} outputs cannot be rearranged into a square image")
        plans.append(LayerPlan(l, h, w, channels, k, gh, gw, n_sites, k * k * channels, output_dim))
        h = w = math.isqrt(n_sites)
        channels = 1
    return plans


def plan_lotenet(
    height: int, width: int, strides: Sequence[int], class_count: int, local_dim: int, channels: int
) -> List[LayerPlan]:
    """Patch layers for every stride but the last, then one MLTN-style final layer."""
    if not strides:
        raise ConfigError("at least one stride is required")
    if channels < 1:
        raise ConfigError(f"lotenet channels must be >= 1, got {channels}")
    plans = []
    h, w, ch = height, width, local_dim
    for l, k in enumerate(strides[:-1]):
        if k < 2:
            raise ConfigError(f"layer {l + 1}: patch stride must be >= 2, got {k}")
        if h % k or w % k:
            raise ConfigError(f"layer {l + 1}: stride {k} does not divide the {h}x{w} input")
        gh, gw = h // k, w // k
        plans.append(LayerPlan(l, h, w, ch, k, gh, gw, k * k, ch, channels, n_blocks=gh * gw))
        h, w, ch = gh, gw, channels
    final = plan_mltn(h, w, strides[-1:], class_count, ch)[0]
    plans.append(
        LayerPlan(
            len(strides) - 1, final.in_height, final.in_width, ch, final.stride,
            final.grid_height, final.grid_width, final.n_sites, final.feature_dim, final.output_dim,
        )
    )
    return plans


def _calibrated_gain(sites: np.ndarray) -> float:
    mean_abs = float(np.mean(np.abs(sites.sum(axis=-1))))
    return 1.0 / mean_abs if mean_abs > 0.0 and math.isfinite(mean_abs) else 1.0


def _require_finite(values: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(values)):
        raise NumericalError(
            f"non-finite values in {where} (exploding activations; lower the learning rate or enable clipping)"
        )


def _check_batch(batch: ArrayLike, height: int, width: int) -> np.ndarray:
    x = as_array(batch)
    if x.ndim != 3 or x.shape[1:] != (height, width):
        raise ShapeMismatch(f"expected a batch of {height}x{width} images, got {x.shape}")
    return x


@dataclass
class ParamGrads:
    params: Dict[str, np.ndarray]
    input: Optional[np.ndarray] = None


# --- MLTN / Tenet-X ---

@dataclass
class MltnLayer:
    plan: LayerPlan
    mps: MpsBlock
    norm: Optional[BatchNorm] = None


@dataclass
class _LayerCache:
    mps: List[ContractionCache]
    norm: Optional[BatchNormCache] = None


@dataclass
class ModelCache:
    inputs: np.ndarray
    layers: List[_LayerCache] = field(default_factory=list)


class MltnModel:
    """L repetitions of squeeze -> one MPS -> rearrange + batch norm, ending in class logits."""

    def __init__(
        self,
        layers: List[MltnLayer],
        class_count: int,
        feature_map: FeatureMap = FeatureMap.SQUEEZE,
        kind: str = "mltn",
    ) -> None:
        self.layers = layers
        self.class_count = class_count
        self.feature_map = FeatureMap(feature_map)
        self.kind = kind
        first = layers[0].plan
        self.height, self.width = first.in_height, first.in_width
        expected = plan_mltn(
            self.height, self.width, [layer.plan.stride for layer in layers], class_count, self.feature_map.local_dim
        )
        for plan, layer in zip(expected, layers):
            mps = layer.mps
            if (mps.n_sites, mps.feature_dim, mps.output_dim) != (plan.n_sites, plan.feature_dim, plan.output_dim):
                raise ConfigError(f"layer {plan.index + 1}: block {mps} breaks the dimension chain")
            if (layer.norm is None) != (plan.index == len(layers) - 1):
                raise ConfigError(f"layer {plan.index + 1}: batch norm belongs between layers only")

    @classmethod
    def build(
        cls,
        height: int,
        width: int,
        strides: Sequence[int],
        bond_dim: int,
        class_count: int,
        feature_map: FeatureMap = FeatureMap.SQUEEZE,
        output_site: Optional[int] = None,
        noise: float = DEFAULT_INIT_NOISE,
        rng: Optional[np.random.Generator] = None,
        calibration: Optional[np.ndarray] = None,
        bn_momentum: float = BN_MOMENTUM,
        bn_eps: float = BN_EPS,
        kind: str = "mltn",
    ) -> "MltnModel":
        """Initialise every layer; with a calibration batch the identity gain is fitted layer by layer."""
        feature_map = FeatureMap(feature_map)
        rng = rng if rng is not None else np.random.default_rng()
        plans = plan_mltn(height, width, strides, class_count, feature_map.local_dim)
        features = None
        if calibration is not None:
            features = local_feature_map(_check_batch(calibration, height, width), feature_map)

        layers = []
        for plan in plans:
            sites = _fold(features, plan.stride) if features is not None else None
            gain = _calibrated_gain(sites) if sites is not None else 1.0
            mps = MpsBlock.initialize(
                plan.n_sites, plan.feature_dim, bond_dim, plan.output_dim, output_site, noise, gain, rng
            )
            last = plan.index == len(plans) - 1
            norm = None if last else BatchNorm(1, bn_momentum, bn_eps)
            layers.append(MltnLayer(plan, mps, norm))
            if sites is not None and not last:
                out, _ = mps_forward(mps, sites)
                image = rearrange(out, plan.output_side)[..., None]
                features = norm.calibrate(image)
        return cls(layers, class_count, feature_map, kind)

    def forward(self, batch: ArrayLike, training: bool = False) -> Tuple[np.ndarray, ModelCache]:
        x = _check_batch(batch, self.height, self.width)
        features = local_feature_map(x, self.feature_map)
        cache = ModelCache(x)
        out = features
        for layer in self.layers:
            where = f"layer {layer.plan.index + 1}"
            out, mps_cache = mps_forward(layer.mps, _fold(features, layer.plan.stride))
            _require_finite(out, where)
            layer_cache = _LayerCache([mps_cache])
            if layer.norm is not None:
                image = rearrange(out, layer.plan.output_side)[..., None]
                features, layer_cache.norm = layer.norm.forward(image, training)
                _require_finite(features, f"{where} batch norm")
            cache.layers.append(layer_cache)
        return out, cache

    def backward(self, cache: ModelCache, grad_logits: ArrayLike, want_input_grad: bool = False) -> ParamGrads:
        if len(cache.layers) != len(self.layers):
            raise CacheMismatch(f"cache holds {len(cache.layers)} layers, model has {len(self.layers)}")
        g = as_array(grad_logits)
        n_batch = cache.inputs.shape[0]
        grads: Dict[str, np.ndarray] = {}
        for layer, layer_cache in zip(reversed(self.layers), reversed(cache.layers)):
            l, plan = layer.plan.index, layer.plan
            if layer.norm is not None:
                g_image, g_norm = layer.norm.backward(layer_cache.norm, g)
                grads[f"layer{l}.norm.scale"] = g_norm["scale"]
                grads[f"layer{l}.norm.shift"] = g_norm["shift"]
                g = g_image.reshape(n_batch, plan.output_dim)
            grad_sites, grad_in = mps_backward(layer.mps, layer_cache.mps[0], g)
            for j, grad_site in enumerate(grad_sites):
                grads[f"layer{l}.site{j}"] = grad_site
            g = _unfold(grad_in, plan.stride, plan.in_height, plan.in_width, plan.channels)
        result = ParamGrads({name: grads[name] for name in self.parameters()})
        if want_input_grad:
            result.input = np.sum(g * local_feature_map_grad(cache.inputs, self.feature_map), axis=-1)
        return result

    def parameters(self) -> Dict[str, np.ndarray]:
        params: Dict[str, np.ndarray] = {}
        for layer in self.layers:
            l = layer.plan.index
            for j, tensor in enumerate(layer.mps.site_tensors):
                params[f"layer{l}.site{j}"] = tensor
            if layer.norm is not None:
                params[f"layer{l}.norm.scale"] = layer.norm.scale
                params[f"layer{l}.norm.shift"] = layer.norm.shift
        return params

    def buffers(self) -> Dict[str, np.ndarray]:
        buffers: Dict[str, np.ndarray] = {}
        for layer in self.layers:
            if layer.norm is not None:
                buffers[f"layer{layer.plan.index}.norm.running_mean"] = layer.norm.running_mean
                buffers[f"layer{layer.plan.index}.norm.running_var"] = layer.norm.running_var
        return buffers

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def describe(self) -> List[str]:
        lines = []
        for layer in self.layers:
            p = layer.plan
            target = f"{p.output_side}x{p.output_side} image" if layer.norm is not None else f"{p.output_dim} logits"
            lines.append(
                f"layer {p.index + 1}: {p.in_height}x{p.in_width} -> squeeze k={p.stride} -> "
                f"{p.grid_height}x{p.grid_width} sites, d={p.feature_dim} -> {target} "
                f"({layer.mps.param_count():,} params)"
            )
        return lines


def build_tenetx(
    height: int,
    width: int,
    bond_dim: int,
    class_count: int,
    feature_map: FeatureMap = FeatureMap.SINUSOIDAL,
    **kwargs,
) -> MltnModel:
    """Single MPS over the flattened, feature-mapped image."""
    return MltnModel.build(height, width, [1], bond_dim, class_count, feature_map, kind="tenetx", **kwargs)


# --- LoTeNet ---

@dataclass
class PatchLayer:
    plan: LayerPlan
    blocks: List[MpsBlock]
    norm: BatchNorm


class LotenetModel:
    """Patch-based baseline: one unshared MPS per k x k patch per layer, then a final MPS."""

    kind = "lotenet"

    def __init__(
        self,
        patch_layers: List[PatchLayer],
        final: MltnLayer,
        class_count: int,
        feature_map: FeatureMap = FeatureMap.SINUSOIDAL,
    ) -> None:
        self.patch_layers = patch_layers
        self.final = final
        self.class_count = class_count
        self.feature_map = FeatureMap(feature_map)
        first = patch_layers[0].plan if patch_layers else final.plan
        self.height, self.width = first.in_height, first.in_width

    @classmethod
    def build(
        cls,
        height: int,
        width: int,
        strides: Sequence[int],
        bond_dim: int,
        class_count: int,
        feature_map: FeatureMap = FeatureMap.SINUSOIDAL,
        channels: int = 4,
        output_site: Optional[int] = None,
        noise: float = DEFAULT_INIT_NOISE,
        rng: Optional[np.random.Generator] = None,
        calibration: Optional[np.ndarray] = None,
        bn_momentum: float = BN_MOMENTUM,
        bn_eps: float = BN_EPS,
    ) -> "LotenetModel":
        feature_map = FeatureMap(feature_map)
        rng = rng if rng is not None else np.random.default_rng()
        plans = plan_lotenet(height, width, strides, class_count, feature_map.local_dim, channels)
        features = None
        if calibration is not None:
            features = local_feature_map(_check_batch(calibration, height, width), feature_map)

        patch_layers = []
        for plan in plans[:-1]:
            patches = None
            gain = 1.0
            if features is not None:
                patches = _patches(features, plan)
                gain = _calibrated_gain(patches)
            blocks = [
                MpsBlock.initialize(
                    plan.n_sites, plan.feature_dim, bond_dim, plan.output_dim, output_site, noise, gain, rng
                )
                for _ in range(plan.n_blocks)
            ]
            norm = BatchNorm(plan.output_dim, bn_momentum, bn_eps)
            patch_layers.append(PatchLayer(plan, blocks, norm))
            if patches is not None:
                out = np.stack([mps_forward(block, patches[:, p])[0] for p, block in enumerate(blocks)], axis=1)
                image = out.reshape(out.shape[0], plan.grid_height, plan.grid_width, plan.output_dim)
                features = norm.calibrate(image)

        plan = plans[-1]
        gain = _calibrated_gain(_fold(features, plan.stride)) if features is not None else 1.0
        mps = MpsBlock.initialize(
            plan.n_sites, plan.feature_dim, bond_dim, plan.output_dim, output_site, noise, gain, rng
        )
        return cls(patch_layers, MltnLayer(plan, mps), class_count, feature_map)

    def forward(self, batch: ArrayLike, training: bool = False) -> Tuple[np.ndarray, ModelCache]:
        x = _check_batch(batch, self.height, self.width)
        features = local_feature_map(x, self.feature_map)
        cache = ModelCache(x)
        for layer in self.patch_layers:
            plan = layer.plan
            patches = _patches(features, plan)
            outputs, caches = [], []
            for p, block in enumerate(layer.blocks):
                out, mps_cache = mps_forward(block, patches[:, p])
                outputs.append(out)
                caches.append(mps_cache)
            out = np.stack(outputs, axis=1)
            _require_finite(out, f"layer {plan.index + 1}")
            image = out.reshape(out.shape[0], plan.grid_height, plan.grid_width, plan.output_dim)
            features, norm_cache = layer.norm.forward(image, training)
            _require_finite(features, f"layer {plan.index + 1} batch norm")
            cache.layers.append(_LayerCache(caches, norm_cache))
        logits, mps_cache = mps_forward(self.final.mps, _fold(features, self.final.plan.stride))
        _require_finite(logits, f"layer {self.final.plan.index + 1}")
        cache.layers.append(_LayerCache([mps_cache]))
        return logits, cache

    def backward(self, cache: ModelCache, grad_logits: ArrayLike, want_input_grad: bool = False) -> ParamGrads:
        if len(cache.layers) != len(self.patch_layers) + 1:
            raise CacheMismatch("cache does not match this model's layer count")
        grads: Dict[str, np.ndarray] = {}
        plan = self.final.plan
        grad_sites, grad_in = mps_backward(self.final.mps, cache.layers[-1].mps[0], as_array(grad_logits))
        for j, grad_site in enumerate(grad_sites):
            grads[f"layer{plan.index}.site{j}"] = grad_site
        g = _unfold(grad_in, plan.stride, plan.in_height, plan.in_width, plan.channels)

        for layer, layer_cache in zip(reversed(self.patch_layers), reversed(cache.layers[:-1])):
            plan, l = layer.plan, layer.plan.index
            g_image, g_norm = layer.norm.backward(layer_cache.norm, g)
            grads[f"layer{l}.norm.scale"] = g_norm["scale"]
            grads[f"layer{l}.norm.shift"] = g_norm["shift"]
            g_out = g_image.reshape(g_image.shape[0], plan.n_blocks, plan.output_dim)
            g_patches = np.empty((g_out.shape[0], plan.n_blocks, plan.n_sites, plan.feature_dim))
            for p, block in enumerate(layer.blocks):
                grad_sites, g_patches[:, p] = mps_backward(block, layer_cache.mps[p], g_out[:, p])
                for j, grad_site in enumerate(grad_sites):
                    grads[f"layer{l}.patch{p}.site{j}"] = grad_site
            g = _unfold(
                g_patches.reshape(g_out.shape[0], plan.n_blocks, -1),
                plan.stride, plan.in_height, plan.in_width, plan.channels,
            )

        result = ParamGrads({name: grads[name] for name in self.parameters()})
        if want_input_grad:
            result.input = np.sum(g * local_feature_map_grad(cache.inputs, self.feature_map), axis=-1)
        return result

    def parameters(self) -> Dict[str, np.ndarray]:
        params: Dict[str, np.ndarray] = {}
        for layer in self.patch_layers:
            l = layer.plan.index
            for p, block in enumerate(layer.blocks):
                for j, tensor in enumerate(block.site_tensors):
                    params[f"layer{l}.patch{p}.site{j}"] = tensor
            params[f"layer{l}.norm.scale"] = layer.norm.scale
            params[f"layer{l}.norm.shift"] = layer.norm.shift
        for j, tensor in enumerate(self.final.mps.site_tensors):
            params[f"layer{self.final.plan.index}.site{j}"] = tensor
        return params

    def buffers(self) -> Dict[str, np.ndarray]:
        buffers: Dict[str, np.ndarray] = {}
        for layer in self.patch_layers:
            buffers[f"layer{layer.plan.index}.norm.running_mean"] = layer.norm.running_mean
            buffers[f"layer{layer.plan.index}.norm.running_var"] = layer.norm.running_var
        return buffers

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def describe(self) -> List[str]:
        lines = []
        for layer in self.patch_layers:
            p = layer.plan
            per_block = layer.blocks[0].param_count()
            lines.append(
                f"layer {p.index + 1}: {p.in_height}x{p.in_width}x{p.channels} -> {p.n_blocks} patches of "
                f"{p.stride}x{p.stride}, one MPS each (d={p.feature_dim}) -> "
                f"{p.grid_height}x{p.grid_width}x{p.output_dim} ({per_block * p.n_blocks:,} params)"
            )
        p = self.final.plan
        lines.append(
            f"layer {p.index + 1}: {p.in_height}x{p.in_width}x{p.channels} -> squeeze k={p.stride} -> "
            f"{p.grid_height}x{p.grid_width} sites, d={p.feature_dim} -> {p.output_dim} logits "
            f"({self.final.mps.param_count():,} params)"
        )
        return lines


def _patches(features: np.ndarray, plan: LayerPlan) -> np.ndarray:
    """[B, H, W, C] -> [B, patches, k*k sites, C]."""
    folded = _fold(features, plan.stride)
    return folded.reshape(folded.shape[0], plan.n_blocks, plan.n_sites, plan.feature_dim)


# --- MLP ---

@dataclass
class _MlpCache:
    activations: List[np.ndarray]
    pre_activations: List[np.ndarray]
    input_shape: Tuple[int, ...]


class MlpModel:
    """Fully connected baseline with ReLU between layers."""

    kind = "mlp"

    def __init__(self, weights: Sequence[np.ndarray], biases: Sequence[np.ndarray]) -> None:
        if not weights or len(weights) != len(biases):
            raise ConfigError("an MLP needs one bias per weight matrix")
        self.weights = [np.array(w, dtype=np.float64) for w in weights]
        self.biases = [np.array(b, dtype=np.float64) for b in biases]
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ShapeMismatch(f"layer {l}: weight {w.shape} and bias {b.shape} disagree")
            if l > 0 and w.shape[0] != self.weights[l - 1].shape[1]:
                raise ShapeMismatch(f"layer {l}: expects {w.shape[0]} inputs, previous layer emits {self.weights[l - 1].shape[1]}")
        self.n_inputs = self.weights[0].shape[0]
        self.class_count = self.weights[-1].shape[1]

    @classmethod
    def build(cls, n_inputs: int, widths: Sequence[int], rng: Optional[np.random.Generator] = None) -> "MlpModel":
        """He-initialised layers; widths lists every layer's output size, the last being the class count."""
        rng = rng if rng is not None else np.random.default_rng()
        sizes = [n_inputs] + list(widths)
        if any(s < 1 for s in sizes):
            raise ConfigError(f"layer widths must be positive, got {sizes}")
        weights = [rng.standard_normal((i, o)) * math.sqrt(2.0 / i) for i, o in zip(sizes[:-1], sizes[1:])]
        biases = [np.zeros(o) for o in sizes[1:]]
        return cls(weights, biases)

    def forward(self, batch: ArrayLike, training: bool = False) -> Tuple[np.ndarray, _MlpCache]:
        x = as_array(batch)
        a = x.reshape(x.shape[0], -1)
        if a.shape[1] != self.n_inputs:
            raise ShapeMismatch(f"expected {self.n_inputs} inputs per sample, got {a.shape[1]}")
        activations, pre = [a], []
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = einsum("bi,io->bo", a, w) + b
            pre.append(z)
            a = z if l == len(self.weights) - 1 else np.maximum(z, 0.0)
            activations.append(a)
        _require_finite(a, "mlp output")
        return a, _MlpCache(activations, pre, x.shape)

    def backward(self, cache: _MlpCache, grad_logits: ArrayLike, want_input_grad: bool = False) -> ParamGrads:
        g = as_array(grad_logits)
        if g.shape != cache.activations[-1].shape:
            raise CacheMismatch(f"grad_logits of shape {g.shape} do not match logits {cache.activations[-1].shape}")
        grads: Dict[str, np.ndarray] = {}
        for l in range(len(self.weights) - 1, -1, -1):
            if l < len(self.weights) - 1:
                g = g * (cache.pre_activations[l] > 0.0)
            grads[f"layer{l}.weight"] = einsum("bi,bo->io", cache.activations[l], g)
            grads[f"layer{l}.bias"] = g.sum(axis=0)
            g = einsum("bo,io->bi", g, self.weights[l])
        result = ParamGrads({name: grads[name] for name in self.parameters()})
        if want_input_grad:
            result.input = g.reshape(cache.input_shape)
        return result

    def parameters(self) -> Dict[str, np.ndarray]:
        params: Dict[str, np.ndarray] = {}
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            params[f"layer{l}.weight"] = w
            params[f"layer{l}.bias"] = b
        return params

    def buffers(self) -> Dict[str, np.ndarray]:
        return {}

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def describe(self) -> List[str]:
        return [
            f"layer {l + 1}: dense {w.shape[0]} -> {w.shape[1]}{' + relu' if l < len(self.weights) - 1 else ''} "
            f"({w.size + b.size:,} params)"
            for l, (w, b) in enumerate(zip(self.weights, self.biases))
        ]


# --- Module-level entry points ---

def mltn_forward(model: MltnModel, batch: ArrayLike, training: bool = False) -> Tuple[np.ndarray, ModelCache]:
    return model.forward(batch, training)


def mltn_backward(model: MltnModel, caches: ModelCache, grad_logits: ArrayLike, want_input_grad: bool = False) -> ParamGrads:
    return model.backward(caches, grad_logits, want_input_grad)


def lotenet_forward(model: LotenetModel, batch: ArrayLike, training: bool = False) -> Tuple[np.ndarray, ModelCache]:
    return model.forward(batch, training)


def lotenet_backward(model: LotenetModel, caches: ModelCache, grad_logits: ArrayLike, want_input_grad: bool = False) -> ParamGrads:
    return model.backward(caches, grad_logits, want_input_grad)


def mlp_forward(model: MlpModel, batch: ArrayLike) -> np.ndarray:
    return model.forward(batch)[0]


def mlp_backward(model: MlpModel, batch: ArrayLike, grad_logits: ArrayLike) -> ParamGrads:
    _, cache = model.forward(batch)
    return model.backward(cache, grad_logits, want_input_grad=True)


def assign_state(model, params: Dict[str, np.ndarray], buffers: Optional[Dict[str, np.ndarray]] = None) -> None:
    """Copy values into the model's live parameter and buffer arrays."""
    for group, values in ((model.parameters(), params), (model.buffers(), buffers or {})):
        missing = set(group) - set(values)
        if missing:
            raise ShapeMismatch(f"missing tensors: {sorted(missing)[:5]}")
        for name, target in group.items():
            source = np.asarray(values[name], dtype=np.float64)
            if source.shape != target.shape:
                raise ShapeMismatch(f"{name}: expected {target.shape}, got {source.shape}")
            target[...] = source
