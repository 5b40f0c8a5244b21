"""Class-aware cross-volume voxel pools and the Siamese similarity objective.

Per training batch the bottleneck code is interpolated back to voxel
resolution, every voxel embedding is routed into the neuron pool or the
background pool by its ground-truth label, anchors are drawn from each pool,
and each anchor is compared with a pair (another pool member or the pool's
momentum descriptor) through a projector/predictor head with stop-gradient
on the target branch.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .autodiff import (
    Tensor,
    bce_loss,
    cosine_similarity,
    detach,
    linear,
    permute,
    relu,
    reshape,
    take_rows,
    upsample_trilinear,
)


class VcvrlWarning(UserWarning):
    """A sampling or descriptor fallback happened."""


class PoolClass(str, Enum):
    NEURON = "N"
    BACKGROUND = "B"


class Strategy(str, Enum):
    RANDOM = "random"
    HARD = "PH"
    HYBRID = "hybrid"


class PairMode(str, Enum):
    POOL = "pool_sample"
    RELAXED = "descriptor_relaxed"
    STRICT = "descriptor_strict"

    @property
    def descriptor_mode(self) -> Optional[str]:
        return {PairMode.RELAXED: "relaxed", PairMode.STRICT: "strict"}.get(self)


@dataclass
class VcvrlConfig:
    anchors: int = 512
    strategy: Strategy = Strategy.HYBRID
    pair_mode: PairMode = PairMode.STRICT
    momentum: bool = True
    alpha_base: float = 1.0
    total_iterations: int = 1
    # reverse term with the descriptor acting as anchor
    symmetric_descriptor: bool = True
    projector_hidden: int = 512
    projector_dim: int = 512
    predictor_hidden: int = 128

    def __post_init__(self):
        self.strategy = Strategy(self.strategy)
        self.pair_mode = PairMode(self.pair_mode)
        if self.anchors < 2:
            raise ValueError(f"need at least 2 anchors per pool, got {self.anchors}")
        if self.total_iterations < 1:
            raise ValueError(f"total_iterations must be >= 1, got {self.total_iterations}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["strategy"] = self.strategy.value
        d["pair_mode"] = self.pair_mode.value
        return d


# -- Siamese head ----------------------------------------------------------------


class MLP:
    """Linear layers with ReLU between them (none after the last)."""

    def __init__(self, widths: Sequence[int], rng: np.random.Generator):
        self.widths = list(widths)
        self.layers: List[Tuple[Tensor, Tensor]] = []
        for din, dout in zip(widths, widths[1:]):
            bound = math.sqrt(6.0 / din)
            w = rng.uniform(-bound, bound, size=(dout, din)).astype(np.float32)
            self.layers.append((Tensor(w, requires_grad=True), Tensor(np.zeros(dout, np.float32), requires_grad=True)))

    def parameters(self) -> List[Tensor]:
        return [t for layer in self.layers for t in layer]

    def __call__(self, x: Tensor) -> Tensor:
        for i, (w, b) in enumerate(self.layers):
            x = linear(x, w, b)
            if i < len(self.layers) - 1:
                x = relu(x)
        return x


class SiamHead:
    """Projector f (3 layers) and predictor h (2 layers).

    ``SiamHead.invocations`` counts projector/predictor calls across all
    instances so callers can verify the head never runs on a given path.
    """

    invocations = 0

    def __init__(self, projector: Callable[[Tensor], Tensor], predictor: Callable[[Tensor], Tensor]):
        self.projector = projector
        self.predictor = predictor

    @classmethod
    def create(cls, latent_dim: int, config: VcvrlConfig, seed: int) -> "SiamHead":
        rng = np.random.default_rng(seed)
        f = MLP([latent_dim, config.projector_hidden, config.projector_hidden, config.projector_dim], rng)
        h = MLP([config.projector_dim, config.predictor_hidden, config.projector_dim], rng)
        return cls(f, h)

    @classmethod
    def identity(cls) -> "SiamHead":
        """Head whose projector and predictor are identity maps (for testing)."""
        return cls(lambda x: x, lambda x: x)

    def parameters(self) -> List[Tensor]:
        params = []
        for part in (self.projector, self.predictor):
            if isinstance(part, MLP):
                params.extend(part.parameters())
        return params

    def project(self, x: Tensor) -> Tensor:
        SiamHead.invocations += 1
        return self.projector(x)

    def predict(self, z: Tensor) -> Tensor:
        SiamHead.invocations += 1
        return self.predictor(z)


# -- pools -----------------------------------------------------------------------


@dataclass
class VoxelPool:
    """Rows of a shared ``(voxels, d)`` embedding matrix that carry one label."""

    class_id: PoolClass
    embeddings: Tensor
    index: np.ndarray
    misclassified: np.ndarray
    volume: np.ndarray

    def __len__(self) -> int:
        return int(self.index.size)

    def vectors(self) -> np.ndarray:
        return self.embeddings.data[self.index]

    def hard_members(self) -> np.ndarray:
        return np.flatnonzero(self.misclassified)


def interpolate_latent(bottleneck: Tensor, target: Sequence[int]) -> Tensor:
    return upsample_trilinear(bottleneck, target)


def voxel_embeddings(latent: Tensor) -> Tensor:
    """``(M, d, D, H, W)`` -> ``(M*D*H*W, d)`` rows in volume-major order."""
    m, d = latent.shape[:2]
    return reshape(permute(latent, (0, 2, 3, 4, 1)), (-1, d))


def build_pools(latent: Tensor, labels, probs, threshold: float = 0.5) -> Tuple[VoxelPool, VoxelPool]:
    """Split voxel embeddings of the whole batch into neuron and background pools."""
    labels = np.asarray(labels.data if isinstance(labels, Tensor) else labels)
    probs = np.asarray(probs.data if isinstance(probs, Tensor) else probs)
    m = latent.shape[0]
    spatial = latent.shape[2:]
    if labels.shape != (m, 1) + spatial or probs.shape != labels.shape:
        raise ValueError(f"labels {labels.shape} / probs {probs.shape} do not match latent {latent.shape}")
    emb = voxel_embeddings(latent)
    y = labels.reshape(-1) > 0.5
    wrong = (probs.reshape(-1) >= threshold) != y
    vol = np.repeat(np.arange(m), int(np.prod(spatial)))
    pools = []
    for cls, mask in ((PoolClass.NEURON, y), (PoolClass.BACKGROUND, ~y)):
        idx = np.flatnonzero(mask)
        pools.append(VoxelPool(cls, emb, idx, wrong[idx], vol[idx]))
    return pools[0], pools[1]


# -- anchor sampling ---------------------------------------------------------------


@dataclass
class AnchorDraw:
    indices: np.ndarray  # positions within the pool
    hard: np.ndarray  # True where drawn from the misclassified subset
    fallback: bool = False


def _draw(rng: np.random.Generator, population: int, n: int) -> np.ndarray:
    return rng.choice(population, size=n, replace=population < n)


def sample_anchors(pool: VoxelPool, n: int, strategy, rng: np.random.Generator) -> AnchorDraw:
    """Draw ``n`` anchor positions from ``pool``.

    Draws are without replacement unless the source is smaller than the
    request.  An empty misclassified subset makes the hard part fall back to
    the whole pool.
    """
    strategy = Strategy(strategy)
    size = len(pool)
    if size == 0:
        raise ValueError(f"cannot sample anchors from empty pool {pool.class_id.value}")
    hard = pool.hard_members()
    if strategy is Strategy.RANDOM:
        return AnchorDraw(_draw(rng, size, n), np.zeros(n, bool))
    if strategy is Strategy.HARD:
        if hard.size == 0:
            warnings.warn(f"pool {pool.class_id.value}: no misclassified voxels, hard sampling falls back to random", VcvrlWarning)
            return AnchorDraw(_draw(rng, size, n), np.zeros(n, bool), fallback=True)
        return AnchorDraw(hard[_draw(rng, hard.size, n)], np.ones(n, bool))
    n_rand = (n + 1) // 2
    n_hard = n // 2
    rand = _draw(rng, size, n_rand)
    if hard.size == 0:
        warnings.warn(f"pool {pool.class_id.value}: no misclassified voxels, hybrid hard half falls back to random", VcvrlWarning)
        return AnchorDraw(np.concatenate([rand, _draw(rng, size, n_hard)]), np.zeros(n, bool), fallback=True)
    picked = hard[_draw(rng, hard.size, n_hard)]
    flags = np.concatenate([np.zeros(n_rand, bool), np.ones(n_hard, bool)])
    return AnchorDraw(np.concatenate([rand, picked]), flags)


def sample_pairs(pool: VoxelPool, config: VcvrlConfig, rng: np.random.Generator) -> Tuple[AnchorDraw, Optional[np.ndarray]]:
    """Anchors plus, in pool-sample mode, uniform pair positions (with replacement)."""
    draw = sample_anchors(pool, config.anchors, config.strategy, rng)
    if config.pair_mode is PairMode.POOL:
        return draw, rng.integers(0, len(pool), size=config.anchors)
    return draw, None


# -- descriptors -------------------------------------------------------------------


def compute_descriptor(pool: VoxelPool, mode: str) -> np.ndarray:
    """Mean embedding of the pool (relaxed) or of its correctly classified members (strict)."""
    if len(pool) == 0:
        raise ValueError(f"cannot describe empty pool {pool.class_id.value}")
    vecs = pool.vectors().astype(np.float64)
    if mode == "strict":
        ok = ~pool.misclassified
        if not ok.any():
            warnings.warn(f"pool {pool.class_id.value}: no correctly classified voxels, strict descriptor falls back to relaxed", VcvrlWarning)
        else:
            vecs = vecs[ok]
    elif mode != "relaxed":
        raise ValueError(f"unknown descriptor mode {mode!r}")
    return vecs.mean(axis=0).astype(np.float32)


def momentum_coefficient(k: int, K: int, alpha_base: float = 1.0) -> float:
    """Cosine-annealed momentum, ``alpha_base`` at k=0 down to 0 at k=K."""
    if K <= 0:
        raise ValueError(f"total iterations must be positive, got {K}")
    if not 0 <= k <= K:
        raise ValueError(f"iteration {k} outside [0, {K}]")
    return alpha_base * (math.cos(math.pi * k / K) + 1.0) / 2.0


@dataclass(frozen=True)
class PoolDescriptor:
    class_id: PoolClass
    mode: str
    vector: Optional[np.ndarray] = None
    iteration: int = 0

    def to_dict(self) -> dict:
        return {
            "class_id": self.class_id.value,
            "mode": self.mode,
            "vector": None if self.vector is None else [float(v) for v in self.vector],
            "iteration": self.iteration,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PoolDescriptor":
        vec = None if d["vector"] is None else np.asarray(d["vector"], dtype=np.float32)
        return cls(PoolClass(d["class_id"]), d["mode"], vec, int(d["iteration"]))


def update_descriptor(current: np.ndarray, descriptor: PoolDescriptor, k: int, K: int, alpha_base: float = 1.0) -> PoolDescriptor:
    """Blend the batch descriptor with the stored one; the first update just stores it."""
    current = np.asarray(current, dtype=np.float32)
    if k <= descriptor.iteration:
        raise ValueError(f"iteration {k} is not after the last update {descriptor.iteration}")
    if descriptor.vector is None:
        return replace(descriptor, vector=current.copy(), iteration=k)
    if current.shape != descriptor.vector.shape:
        raise ValueError(f"descriptor dimension mismatch: {current.shape} vs {descriptor.vector.shape}")
    alpha = momentum_coefficient(k, K, alpha_base)
    vec = ((1.0 - alpha) * current.astype(np.float64) + alpha * descriptor.vector.astype(np.float64)).astype(np.float32)
    return replace(descriptor, vector=vec, iteration=k)


def refresh_descriptors(
    pools: Sequence[VoxelPool],
    descriptors: Mapping[PoolClass, PoolDescriptor],
    config: VcvrlConfig,
    k: int,
) -> Dict[PoolClass, PoolDescriptor]:
    """Recompute descriptors from the current batch, with or without momentum."""
    mode = config.pair_mode.descriptor_mode
    out = dict(descriptors)
    for pool in pools:
        if len(pool) == 0:
            continue
        current = compute_descriptor(pool, mode)
        prev = out.get(pool.class_id) or PoolDescriptor(pool.class_id, mode)
        if config.momentum:
            out[pool.class_id] = update_descriptor(current, prev, k, config.total_iterations, config.alpha_base)
        else:
            out[pool.class_id] = PoolDescriptor(pool.class_id, mode, current, k)
    return out


# -- losses ----------------------------------------------------------------------


def pair_losses(anchor: Tensor, pair: Tensor, head: SiamHead) -> Tensor:
    """Row-wise ``0.5 * (1 - cos(h(f(anchor)), sg(f(pair))))``."""
    p = head.predict(head.project(anchor))
    z = detach(head.project(pair))
    return 0.5 * (1.0 - cosine_similarity(p, z))


def simsiam_pair_loss(anchor, pair, head: SiamHead) -> Tensor:
    """Scalar loss between one anchor vector and one pair vector."""
    a = anchor if isinstance(anchor, Tensor) else Tensor(anchor)
    b = pair if isinstance(pair, Tensor) else Tensor(pair)
    return reshape(pair_losses(reshape(a, (1, -1)), reshape(b, (1, -1)), head), ())


def _symmetric_term(anchor: Tensor, pair: Tensor, head: SiamHead, symmetric: bool = True) -> Tensor:
    """Mean over rows of ``0.5 L(a, p) + 0.5 L(p, a)``; ``pair`` may be a single row."""
    n = anchor.shape[0]
    za = head.project(anchor)
    zp = head.project(pair)
    pa = head.predict(za)
    if zp.shape[0] != n:
        zp_rows = take_rows(zp, np.zeros(n, dtype=np.intp))
    else:
        zp_rows = zp
    forward = 0.5 * (1.0 - cosine_similarity(pa, detach(zp_rows)))
    if not symmetric:
        return forward.mean()
    pp = head.predict(zp)
    if pp.shape[0] != n:
        pp = take_rows(pp, np.zeros(n, dtype=np.intp))
    reverse = 0.5 * (1.0 - cosine_similarity(pp, detach(za)))
    return (0.5 * forward + 0.5 * reverse).mean()


def total_sim_loss(
    pool_n: VoxelPool,
    pool_b: VoxelPool,
    config: VcvrlConfig,
    head: SiamHead,
    descriptors: Optional[Mapping[PoolClass, PoolDescriptor]],
    rng: np.random.Generator,
) -> Tensor:
    """Symmetrised similarity loss summed over the neuron and background pools."""
    if len(pool_n) == 0 and len(pool_b) == 0:
        raise ValueError("both voxel pools are empty")
    total: Optional[Tensor] = None
    for pool in (pool_n, pool_b):
        if len(pool) == 0:
            warnings.warn(f"pool {pool.class_id.value} is empty and contributes no similarity loss", VcvrlWarning)
            continue
        draw, pair_pos = sample_pairs(pool, config, rng)
        anchor = take_rows(pool.embeddings, pool.index[draw.indices])
        if pair_pos is not None:
            pair = take_rows(pool.embeddings, pool.index[pair_pos])
            term = _symmetric_term(anchor, pair, head)
        else:
            desc = (descriptors or {}).get(pool.class_id)
            if desc is None or desc.vector is None:
                raise ValueError(f"descriptor mode needs a descriptor for pool {pool.class_id.value}")
            pair = Tensor(desc.vector.reshape(1, -1), dtype=anchor.dtype)
            term = _symmetric_term(anchor, pair, head, symmetric=config.symmetric_descriptor)
        total = term if total is None else total + term
    return total


def seg_loss(probs: Tensor, labels, sim_loss) -> Tensor:
    """Cross-entropy plus similarity loss, equal weights."""
    return bce_loss(probs, labels) + sim_loss


@dataclass
class VcvrlStep:
    loss: Tensor
    descriptors: Dict[PoolClass, PoolDescriptor]
    pool_sizes: Dict[str, int] = field(default_factory=dict)


def vcvrl_step(
    bottleneck: Tensor,
    labels: np.ndarray,
    probs: Tensor,
    head: SiamHead,
    config: VcvrlConfig,
    descriptors: Mapping[PoolClass, PoolDescriptor],
    k: int,
    rng: np.random.Generator,
) -> VcvrlStep:
    """Interpolate, pool, refresh descriptors and compute the similarity loss for one batch."""
    latent = interpolate_latent(bottleneck, labels.shape[2:])
    pool_n, pool_b = build_pools(latent, labels, probs)
    if config.pair_mode.descriptor_mode is not None:
        descriptors = refresh_descriptors((pool_n, pool_b), descriptors, config, k)
    loss = total_sim_loss(pool_n, pool_b, config, head, descriptors, rng)
    sizes = {"N": len(pool_n), "B": len(pool_b)}
    return VcvrlStep(loss, dict(descriptors), sizes)
