"""Cross-sensor dynamic message propagation.

Point nodes live on the image plane at their projected positions.  For every
node ``i`` and neighbour slot ``j`` the engine

1. predicts a walk from the node latent (point graph) and from the point-wise
   image feature (image graph): ``walk = W h + b``;
2. samples the point graph (latents scattered onto the level grid) and the
   image level map at ``anchor + base_offset[j] + walk``;
3. predicts an affinity ``A`` and a per-edge filter ``w`` from the sampled
   image node with another affine map;
4. sums ``beta_l * A * h_hat * w`` over neighbours and levels into a message,
   then updates ``h`` residually or by channel concatenation.

Sampling coordinates at level ``l`` are in that level's texel units; full
resolution positions map to them with the half-texel convention
``(p + 0.5) / stride - 0.5``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import numerics as nx
from .geometry import bilinear_sample
from .numerics import ContractError, DiffArray, DimensionError


def to_level(coords: np.ndarray, stride: float) -> np.ndarray:
    return (np.asarray(coords, dtype=np.float64) + 0.5) / stride - 0.5


def base_offsets(k: int) -> np.ndarray:
    """The ``k`` lattice offsets nearest the origin, as (du, dv) rows.

    Ordered by radius, then row, then column, so ``k = 9`` is the 3 x 3 grid
    at one-texel pitch and ``k = 1`` is the origin alone.
    """
    if k < 1:
        raise ContractError(f"neighbour count must be >= 1, got {k}")
    r = int(np.ceil(np.sqrt(k))) + 1
    grid = [(du, dv) for dv in range(-r, r + 1) for du in range(-r, r + 1)]
    grid.sort(key=lambda p: (p[0] ** 2 + p[1] ** 2, p[1], p[0]))
    return np.array(grid[:k], dtype=np.float64)


@dataclass
class FeatureGraph:
    """Nodes with latent rows and image-plane positions, plus optional level maps.

    A point graph has no level maps: its per-level grids are built by
    scattering latents at the nodes' positions.  An image graph carries the
    per-level feature maps and uses level-0 texels as its nodes.
    """

    latents: DiffArray
    positions: np.ndarray
    level_maps: list[DiffArray] = field(default_factory=list)
    strides: list[float] = field(default_factory=list)

    def __post_init__(self):
        self.latents = nx.as_diff(self.latents)
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 2)
        if self.latents.ndim != 2 or self.latents.shape[0] != len(self.positions):
            raise DimensionError(
                f"latents {self.latents.shape} do not match {len(self.positions)} positions"
            )
        self.level_maps = [nx.as_diff(m) for m in self.level_maps]
        for m in self.level_maps:
            if m.ndim != 3 or m.shape[0] < 1 or m.shape[1] < 1:
                raise DimensionError(f"level map must be H x W x C with positive H, W; got {m.shape}")
        if not self.strides:
            self.strides = [float(2**lvl) for lvl in range(len(self.level_maps))]
        if len(self.strides) != len(self.level_maps):
            raise DimensionError("one stride per level map is required")

    @property
    def num_nodes(self) -> int:
        return self.latents.shape[0]

    @property
    def channels(self) -> int:
        return self.latents.shape[1]

    @classmethod
    def from_image(cls, level_maps: Sequence, strides: Sequence[float] | None = None) -> FeatureGraph:
        maps = [nx.as_diff(m) for m in level_maps]
        if not maps:
            raise ContractError("an image graph needs at least one level map")
        H, W, C = maps[0].shape
        vv, uu = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
        return cls(
            latents=nx.reshape(maps[0], (H * W, C)),
            positions=np.column_stack([uu.ravel(), vv.ravel()]).astype(np.float64),
            level_maps=maps,
            strides=list(strides) if strides is not None else [],
        )

    def with_latents(self, latents: DiffArray) -> FeatureGraph:
        return replace(self, latents=latents)


def scatter_to_grid(latents: DiffArray, positions: np.ndarray, shape_hw: tuple[int, int], stride: float) -> DiffArray:
    """Nearest-texel binning of node latents onto an H x W grid, mean on collisions."""
    H, W = shape_hw
    lv = to_level(positions, stride)
    cu = np.floor(lv[:, 0] + 0.5).astype(np.intp)
    cv = np.floor(lv[:, 1] + 0.5).astype(np.intp)
    inside = (cu >= 0) & (cu < W) & (cv >= 0) & (cv < H)
    cell = np.where(inside, cv * W + cu, -1)
    flat = nx.scatter_mean(latents, cell, H * W)
    return nx.reshape(flat, (H, W, latents.shape[1]))


@dataclass
class NeighborSampling:
    k: int
    base: np.ndarray
    walks: DiffArray  # N x K x 2, point graph
    image_walks: list[DiffArray]  # per level, N x K x 2

    def __post_init__(self):
        if self.walks.shape[-1] != 2 or any(w.shape[-1] != 2 for w in self.image_walks):
            raise DimensionError("walks must have exactly two spatial components")
        if self.k > self.walks.shape[0]:
            raise ContractError(f"K={self.k} exceeds node count {self.walks.shape[0]}")


@dataclass
class PropagationParams:
    """Learnable pieces of one propagation module.

    ``affinity_W[l]`` maps a C_l image latent to ``1 + F`` outputs: the
    affinity followed by the flattened filter (F = C for diagonal filters,
    C * C_out for dense ones).  ``alpha`` has one entry per node or a single
    shared entry.  ``mix_W``/``mix_b`` are only used by the four-level variant.
    """

    k: int
    walk_W: DiffArray
    walk_b: DiffArray
    image_walk_W: list[DiffArray]
    image_walk_b: list[DiffArray]
    affinity_W: list[DiffArray]
    affinity_b: list[DiffArray]
    alpha: DiffArray
    beta: DiffArray
    steps: int = 1
    filter_mode: str = "diagonal"
    update_mode: str = "residual"
    mix_W: DiffArray | None = None
    mix_b: DiffArray | None = None

    def __post_init__(self):
        if self.steps < 1:
            raise ContractError(f"iteration count must be >= 1, got {self.steps}")
        if self.filter_mode not in ("diagonal", "dense"):
            raise ContractError(f"unknown filter mode {self.filter_mode!r}")
        if self.update_mode not in ("residual", "concat"):
            raise ContractError(f"unknown update mode {self.update_mode!r}")
        n_lv = len(self.affinity_W)
        if not (len(self.image_walk_W) == len(self.image_walk_b) == len(self.affinity_b) == n_lv):
            raise DimensionError("per-level parameter lists have different lengths")
        if self.beta.shape != (n_lv,):
            raise DimensionError(f"beta must have one weight per level ({n_lv}), got {self.beta.shape}")
        if not np.all(np.isfinite(self.beta.data)):
            raise ContractError("beta must be finite")

    @property
    def levels(self) -> int:
        return len(self.affinity_W)

    @classmethod
    def build(
        cls,
        point_channels: int,
        level_channels: Sequence[int],
        k: int = 9,
        *,
        rng: np.random.Generator | None = None,
        weight_scale: float = 0.1,
        filter_mode: str = "diagonal",
        out_channels: int | None = None,
        update_mode: str = "residual",
        steps: int = 1,
        alpha: float | np.ndarray = 1.0,
        beta: Sequence[float] | None = None,
        mix_channels: int | None = None,
        tape: nx.Tape | None = None,
    ) -> PropagationParams:
        """Random parameters around the identity configuration.

        With ``weight_scale = 0`` and no ``rng`` this is the identity setup:
        zero walks, unit affinity, identity filters.
        """
        C = point_channels
        c_out = C if filter_mode == "diagonal" else (out_channels or C)
        F = C if filter_mode == "diagonal" else C * c_out
        n_lv = len(level_channels)

        def rand(*shape):
            if rng is None or weight_scale == 0.0:
                return np.zeros(shape)
            return weight_scale * rng.standard_normal(shape)

        ident = np.ones(C) if filter_mode == "diagonal" else np.eye(C, c_out).reshape(-1)
        aff_bias = np.concatenate([[1.0], ident])
        wrap = tape.variable if tape is not None else nx.const
        beta_v = np.full(n_lv, 1.0 / n_lv) if beta is None else np.asarray(beta, dtype=np.float64)
        alpha_v = np.atleast_1d(np.asarray(alpha, dtype=np.float64))
        mix_W = mix_b = None
        if mix_channels is not None:
            mix_W = wrap(np.vstack([np.eye(c_out, mix_channels)] * n_lv) / n_lv + rand(n_lv * c_out, mix_channels))
            mix_b = wrap(rand(mix_channels))
        return cls(
            k=k,
            walk_W=wrap(rand(C, 2 * k)),
            walk_b=wrap(rand(2 * k)),
            image_walk_W=[wrap(rand(c, 2 * k)) for c in level_channels],
            image_walk_b=[wrap(rand(2 * k)) for _ in level_channels],
            affinity_W=[wrap(rand(c, 1 + F)) for c in level_channels],
            affinity_b=[wrap(aff_bias + rand(1 + F)) for _ in level_channels],
            alpha=wrap(alpha_v),
            beta=wrap(beta_v),
            steps=steps,
            filter_mode=filter_mode,
            update_mode=update_mode,
            mix_W=mix_W,
            mix_b=mix_b,
        )


# -- operations ----------------------------------------------------------------


def predict_walks(latents, W, b, k: int | None = None) -> DiffArray:
    """Affine walk prediction: N x C latents -> N x K x 2 offsets."""
    h, W, b = nx.as_diff(latents), nx.as_diff(W), nx.as_diff(b)
    if W.ndim != 2 or W.shape[1] % 2 or b.shape != (W.shape[1],):
        raise DimensionError(f"walk parameters {W.shape}, {b.shape} are not C x 2K and 2K")
    kk = W.shape[1] // 2
    if k is not None and k != kk:
        raise DimensionError(f"walk parameters produce K={kk}, expected {k}")
    out = nx.bias_add(nx.matmul(h, W), b)
    return nx.reshape(out, (h.shape[0], kk, 2))


def sample_nodes(
    graph: FeatureGraph,
    level: int,
    anchors: np.ndarray,
    walks: DiffArray,
    offsets: np.ndarray,
    grid_shape: tuple[int, int] | None = None,
    stride: float | None = None,
) -> DiffArray:
    """Bilinearly sample N x K latents at ``level(anchor) + offset[j] + walk[i, j]``.

    Image graphs sample their level map; point graphs scatter their latents
    onto a grid of ``grid_shape`` at ``stride`` first.
    """
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 2)
    walks = nx.as_diff(walks)
    n, k = anchors.shape[0], offsets.shape[0]
    if walks.shape != (n, k, 2):
        raise DimensionError(f"walks {walks.shape} do not match {n} anchors x {k} offsets")
    if graph.level_maps:
        if not 0 <= level < len(graph.level_maps):
            raise ContractError(f"level {level} not in graph with {len(graph.level_maps)} levels")
        grid, s = graph.level_maps[level], graph.strides[level]
    else:
        if grid_shape is None or stride is None:
            raise ContractError("a point graph needs grid_shape and stride to be sampled")
        grid, s = scatter_to_grid(graph.latents, graph.positions, grid_shape, stride), stride
    base = to_level(anchors, s)[:, None, :] + offsets[None, :, :]
    coords = nx.add(nx.const(base), walks)
    sampled = bilinear_sample(grid, nx.reshape(coords, (n * k, 2)))
    return nx.reshape(sampled, (n, k, grid.shape[2]))


def predict_affinity_filters(
    sampled_image_nodes, W, b, filter_mode: str = "diagonal", channels: int | None = None
) -> tuple[DiffArray, DiffArray]:
    """Affine prediction of per-edge affinity (N x K) and filter from image samples.

    Diagonal filters come back as N x K x C; dense ones as N x K x C x C_out.
    """
    v, W, b = nx.as_diff(sampled_image_nodes), nx.as_diff(W), nx.as_diff(b)
    if v.ndim != 3:
        raise DimensionError(f"sampled image nodes must be N x K x C, got {v.shape}")
    n, k, c_img = v.shape
    if W.ndim != 2 or W.shape[0] != c_img or b.shape != (W.shape[1],):
        raise DimensionError(f"affinity parameters {W.shape}, {b.shape} do not fit C={c_img}")
    F = W.shape[1] - 1
    out = nx.bias_add(nx.matmul(nx.reshape(v, (n * k, c_img)), W), b)
    A = nx.reshape(nx.take(out, [0], axis=1), (n, k))
    w = nx.take(out, np.arange(1, F + 1), axis=1)
    if filter_mode == "diagonal":
        return A, nx.reshape(w, (n, k, F))
    if channels is None or F % channels:
        raise DimensionError(f"dense filter of size {F} does not factor by C={channels}")
    return A, nx.reshape(w, (n, k, channels, F // channels))


def neighbor_sampling(point_graph: FeatureGraph, image_graph: FeatureGraph, params: PropagationParams) -> NeighborSampling:
    offsets = base_offsets(params.k)
    walks = predict_walks(point_graph.latents, params.walk_W, params.walk_b, params.k)
    image_walks = []
    for lvl in range(params.levels):
        zero = nx.const(np.zeros((point_graph.num_nodes, 1, 2)))
        pointwise = sample_nodes(image_graph, lvl, point_graph.positions, zero, np.zeros((1, 2)))
        pointwise = nx.reshape(pointwise, (point_graph.num_nodes, pointwise.shape[2]))
        image_walks.append(predict_walks(pointwise, params.image_walk_W[lvl], params.image_walk_b[lvl], params.k))
    return NeighborSampling(params.k, offsets, walks, image_walks)


def level_messages(
    point_graph: FeatureGraph,
    image_graph: FeatureGraph,
    params: PropagationParams,
    sampling: NeighborSampling | None = None,
) -> list[DiffArray]:
    """Per-level ``beta_l * sum_j A_ij h_hat_j w_ij``, each N x C_out."""
    if params.levels == 0:
        raise ContractError("message calculation needs at least one level")
    if len(image_graph.level_maps) != params.levels:
        raise ContractError(
            f"image graph has {len(image_graph.level_maps)} levels, parameters expect {params.levels}"
        )
    if sampling is None:
        sampling = neighbor_sampling(point_graph, image_graph, params)
    C = point_graph.channels
    out = []
    for lvl in range(params.levels):
        fmap = image_graph.level_maps[lvl]
        stride = image_graph.strides[lvl]
        h_hat = sample_nodes(
            point_graph, lvl, point_graph.positions, sampling.walks, sampling.base,
            grid_shape=fmap.shape[:2], stride=stride,
        )
        v_bar = sample_nodes(image_graph, lvl, point_graph.positions, sampling.image_walks[lvl], sampling.base)
        A, w = predict_affinity_filters(
            v_bar, params.affinity_W[lvl], params.affinity_b[lvl], params.filter_mode, C
        )
        weighted = nx.scale_by(h_hat, A)
        if params.filter_mode == "diagonal":
            if w.shape != weighted.shape:
                raise DimensionError(f"diagonal filter {w.shape} does not match samples {weighted.shape}")
            edge = nx.mul(weighted, w)
        else:
            edge = nx.batched_vecmat(weighted, w)
        beta_l = nx.take(params.beta, [lvl])
        out.append(nx.scale(nx.sum_(edge, axis=1), beta_l))
    return out


def calculate_message(
    point_graph: FeatureGraph,
    image_graph: FeatureGraph,
    params: PropagationParams,
    sampling: NeighborSampling | None = None,
) -> DiffArray:
    """Message summed over all levels and neighbours: N x C_out."""
    msgs = level_messages(point_graph, image_graph, params, sampling)
    total = msgs[0]
    for m in msgs[1:]:
        total = nx.add(total, m)
    return total


def update_latents(h, m, alpha, mode: str = "residual") -> DiffArray:
    """``relu(h + alpha*m)`` (residual) or ``relu(h || alpha*m)`` (concat)."""
    h, m, alpha = nx.as_diff(h), nx.as_diff(m), nx.as_diff(alpha)
    n = h.shape[0]
    if m.ndim != 2 or m.shape[0] != n:
        raise DimensionError(f"message {m.shape} does not match latents {h.shape}")
    if alpha.shape == (1,) and n != 1:
        alpha = nx.take(alpha, np.zeros(n, dtype=np.intp))
    if alpha.shape != (n,):
        raise DimensionError(f"alpha must be per-node ({n},) or shared (1,), got {alpha.shape}")
    scaled = nx.scale_by(m, alpha)
    if mode == "residual":
        if m.shape != h.shape:
            raise DimensionError(f"residual update needs equal channels, got {h.shape} and {m.shape}")
        return nx.relu(nx.add(h, scaled))
    if mode == "concat":
        return nx.relu(nx.concat_channels(h, scaled))
    raise ContractError(f"unknown update mode {mode!r}")


VARIANT_LEVELS = {"cdmp_1x1": 1, "cdmp_1x4": 4}


def propagate(
    point_graph: FeatureGraph,
    image_graph: FeatureGraph,
    params: PropagationParams,
    variant: str = "cdmp_1x1",
) -> DiffArray:
    """Run ``params.steps`` message/update rounds and return refined point latents.

    The four-level variant keeps the per-level messages apart, concatenates
    them, mixes channels with ``mix_W``/``mix_b`` and then applies the update.
    """
    try:
        need = VARIANT_LEVELS[variant]
    except KeyError:
        raise ContractError(f"unknown variant {variant!r}") from None
    if len(image_graph.level_maps) != need or params.levels != need:
        raise ContractError(
            f"{variant} needs {need} level maps; got {len(image_graph.level_maps)} maps "
            f"and {params.levels} parameter levels"
        )
    if variant == "cdmp_1x4" and (params.mix_W is None or params.mix_b is None):
        raise ContractError("cdmp_1x4 needs channel-mixing parameters")
    if params.update_mode == "concat" and params.steps > 1:
        # the walk predictor expects C channels but a concat update returns C + C_out
        raise DimensionError("concat update widens the latents; it supports a single step only")
    graph = point_graph
    h = graph.latents
    for _ in range(params.steps):
        if variant == "cdmp_1x1":
            m = calculate_message(graph, image_graph, params)
        else:
            grouped = nx.concat(level_messages(graph, image_graph, params), axis=-1)
            m = nx.bias_add(nx.matmul(grouped, params.mix_W), params.mix_b)
        h = update_latents(h, m, params.alpha, params.update_mode)
        graph = graph.with_latents(h)
    return h
