"""GMViT forward pipeline with every distillation tap exposed.

Tap names (stable, used to pair teacher and student):
f_cnn, f_view, view_cls, grouping.tokens, f_group, group_cls, f_global,
f_retrieval, logits.
"""

from __future__ import annotations

import time
from collections import defaultdict
from contextlib import contextmanager, nullcontext
from dataclasses import dataclass

import numpy as np

from ..autodiff import Tensor, concat, where
from ..autodiff.tensor import clip
from ..autodiff import functional as F
from .config import ModelConfig
from .layers import (Backbone, BatchNorm, Linear, Module, PosEmbed, TransformerEncoder,
                     prepend_token)

TOKEN_EPS = 1e-7
STAGES = ("cnn", "view_encoder", "grouping", "group_encoder", "heads")


class StageTimer:
    """Accumulates wall time per named pipeline stage."""

    def __init__(self):
        self.seconds: dict[str, float] = defaultdict(float)

    @contextmanager
    def stage(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.seconds[name] += time.perf_counter() - t0


@dataclass
class GroupingResult:
    tokens: Tensor  # (B, N) in (0, 1), clamped
    assignment: np.ndarray  # (B, N) group ids in [1, M]
    group_features: Tensor  # (B, M, D), zero rows where invalid
    valid: np.ndarray  # (B, M) bool
    centroids: np.ndarray  # (B, M, 3), zero rows where invalid
    member_lists: list[list[list[int]]]  # [b][m] -> view indices


@dataclass
class ModelOutputs:
    f_cnn: Tensor  # (B, N, D)
    f_view: Tensor  # (B, N, D)
    view_cls: Tensor | None  # (B, D); None for the MLP-encoder variant
    grouping: GroupingResult
    f_group: Tensor  # (B, M, D), masked
    group_cls: Tensor | None
    f_global: Tensor  # (B, D)
    f_retrieval: Tensor  # (B, retrieval_width)
    logits: Tensor  # (B, C)

    @property
    def tokens(self) -> Tensor:
        return self.grouping.tokens


def assign_groups(tokens: np.ndarray, M: int) -> np.ndarray:
    """1-based bin m with (m-1)/M <= t < m/M, after clamping t into (0, 1)."""
    t = np.clip(np.asarray(tokens, dtype=np.float64), TOKEN_EPS, 1.0 - TOKEN_EPS)
    return np.minimum(np.floor(t * M).astype(np.int64), M - 1) + 1


def centroids_of(assignment: np.ndarray, positions: np.ndarray, M: int) -> tuple[np.ndarray, np.ndarray]:
    """Mean camera position per group. assignment (B, N) 1-based, positions (B, N, 3)."""
    onehot = (assignment[:, :, None] == np.arange(1, M + 1)).astype(np.float64)  # (B, N, M)
    counts = onehot.sum(axis=1)  # (B, M)
    sums = np.einsum("bnm,bnk->bmk", onehot, positions)
    cent = np.divide(sums, np.maximum(counts, 1.0)[..., None])
    return cent, counts > 0


class GMViT(Module):
    def __init__(self, config: ModelConfig, rng: np.random.Generator | None = None):
        super().__init__()
        self.config = config
        cfg = config
        rng = rng if rng is not None else np.random.default_rng(0)
        dt = np.dtype(cfg.dtype)
        self.dtype = dt
        D = cfg.D
        self.backbone = Backbone(cfg.input_channels, cfg.cnn_widths, D, rng, dt,
                                 double=cfg.variant == "teacher")
        self.view_pe = PosEmbed(D, rng, dt)
        if cfg.has_tokens:
            self.view_cls_token = Tensor(rng.normal(0, 0.02, D).astype(dt), requires_grad=True)
            self.view_cls_pos = Tensor(rng.normal(0, 0.02, D).astype(dt), requires_grad=True)
            self.view_encoder = TransformerEncoder(D, cfg.L, cfg.heads, cfg.expansion, rng, dt)
        else:
            self.view_encoder = Linear(D, D, rng, dt)
        self.grouping = Linear(D, 1, rng, dt)
        self.group_pe = PosEmbed(D, rng, dt)
        if cfg.has_tokens:
            self.group_cls_token = Tensor(rng.normal(0, 0.02, D).astype(dt), requires_grad=True)
            self.group_cls_pos = Tensor(rng.normal(0, 0.02, D).astype(dt), requires_grad=True)
            self.group_encoder = TransformerEncoder(D, cfg.K, cfg.heads, cfg.expansion, rng, dt)
        else:
            self.group_encoder = Linear(D, D, rng, dt)
        self.head = Linear(2 * D if cfg.has_tokens else D, D, rng, dt)
        W2 = cfg.retrieval_width
        self.cls_fc1 = Linear(D, D, rng, dt)
        self.cls_bn1 = BatchNorm(D, dt)
        self.cls_fc2 = Linear(D, W2, rng, dt)
        self.cls_bn2 = BatchNorm(W2, dt)
        self.cls_fc3 = Linear(W2, cfg.C, rng, dt)
        # dropout draws come from their own stream; the trainer may replace it
        self.dropout_rng = np.random.default_rng(np.random.SeedSequence(0, spawn_key=(7,)))

    # ------------------------------------------------------------ stages
    def _check_inputs(self, images, positions):
        cfg = self.config
        x = np.asarray(images.data if isinstance(images, Tensor) else images)
        if x.ndim == 4:
            x = x[:, :, None]
        if x.ndim != 5:
            raise ValueError(f"images must be (B, N, H, W) or (B, N, C, H, W), got {x.shape}")
        B, N, Cin, H, W = x.shape
        if N != cfg.N:
            raise ValueError(f"got {N} views, config expects N={cfg.N}")
        if (H, W) != (cfg.H, cfg.W):
            raise ValueError(f"got {H}x{W} images, config expects {cfg.H}x{cfg.W}")
        if Cin != cfg.input_channels:
            if Cin == 1:
                x = np.repeat(x, cfg.input_channels, axis=2)
            else:
                raise ValueError(f"got {Cin} channels, config expects {cfg.input_channels}")
        pos = np.asarray(positions, dtype=np.float64)
        if pos.ndim == 2:
            pos = np.broadcast_to(pos, (B,) + pos.shape)
        if pos.shape != (B, N, 3):
            raise ValueError(f"camera positions must be (N, 3) or (B, N, 3), got {pos.shape}")
        if not np.isfinite(pos).all():
            raise ValueError("camera positions must be finite")
        return x.astype(self.dtype, copy=False), pos

    def spatial_pos_embed(self, pos: np.ndarray, group: bool = False) -> Tensor:
        pe = self.group_pe if group else self.view_pe
        return pe(Tensor(np.asarray(pos, dtype=self.dtype)))

    def encode_views(self, f_cnn: Tensor, p_v: Tensor) -> tuple[Tensor, Tensor | None]:
        seq = f_cnn + p_v
        if not self.config.has_tokens:
            return self.view_encoder(seq), None
        out = self.view_encoder(prepend_token(seq, self.view_cls_token + self.view_cls_pos))
        return out[:, 1:], out[:, 0]

    def group_assign(self, f_view: Tensor) -> tuple[Tensor, np.ndarray]:
        B, N, _ = f_view.shape
        t = clip(F.sigmoid(self.grouping(f_view)).reshape(B, N), TOKEN_EPS, 1.0 - TOKEN_EPS)
        return t, assign_groups(t.data, self.config.M)

    def group_pool(self, f_view: Tensor, tokens: Tensor, assignment: np.ndarray,
                   pos: np.ndarray) -> GroupingResult:
        M = self.config.M
        B, N, _ = f_view.shape
        pooled, valid = F.segment_max(f_view, assignment - 1, M)
        if self.config.token_weighting:
            onehot = (assignment[:, :, None] == np.arange(1, M + 1)).astype(self.dtype)
            counts = np.maximum(onehot.sum(axis=1), 1.0)  # (B, M)
            mean_t = (tokens.reshape(B, 1, N) @ Tensor(onehot)).reshape(B, M) / counts
            pooled = pooled * mean_t.reshape(B, M, 1)
        cent, _ = centroids_of(assignment, pos, M)
        members = [[list(np.flatnonzero(assignment[b] == m)) for m in range(1, M + 1)]
                   for b in range(B)]
        return GroupingResult(tokens, assignment, pooled, valid, cent, members)

    def encode_groups(self, grouping: GroupingResult) -> tuple[Tensor, Tensor | None]:
        valid = grouping.valid
        if not valid.any(axis=1).all():
            raise ValueError("every sample needs at least one non-empty group")
        vmask = valid[..., None]
        g_in = where(vmask, grouping.group_features + self.spatial_pos_embed(grouping.centroids, True), 0.0)
        if not self.config.has_tokens:
            return where(vmask, self.group_encoder(g_in), 0.0), None
        B = valid.shape[0]
        # empty slots are excluded as attention keys, so the valid rows see
        # exactly the sequence [cls; non-empty groups]
        key_mask = np.concatenate([np.ones((B, 1), bool), valid], axis=1)
        out = self.group_encoder(prepend_token(g_in, self.group_cls_token + self.group_cls_pos), key_mask)
        return where(vmask, out[:, 1:], 0.0), out[:, 0]

    def descriptor_head(self, f_group: Tensor, valid: np.ndarray, group_cls: Tensor | None) -> Tensor:
        gmax = F.max_over_set(f_group, axis=1, mask=valid)
        if group_cls is not None:
            gmax = concat([group_cls, gmax], axis=-1)
        return self.head(gmax)

    def classifier_head(self, f_global: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        h1 = F.relu(self.cls_bn1(self.cls_fc1(f_global)))
        h1 = F.dropout(h1, self.config.dropout, self.training, self.dropout_rng)
        h2 = F.relu(self.cls_bn2(self.cls_fc2(h1)))
        return h1, h2, self.cls_fc3(h2)

    # ----------------------------------------------------------- forward
    def forward(self, images, positions, timer: StageTimer | None = None) -> ModelOutputs:
        x, pos = self._check_inputs(images, positions)
        B, N = x.shape[:2]
        cfg = self.config

        def st(name):
            return timer.stage(name) if timer is not None else nullcontext()

        with st("cnn"):
            f_cnn = self.backbone(Tensor(x.reshape((B * N,) + x.shape[2:]))).reshape(B, N, cfg.D)
        with st("view_encoder"):
            f_view, view_cls = self.encode_views(f_cnn, self.spatial_pos_embed(pos))
        with st("grouping"):
            tokens, assignment = self.group_assign(f_view)
            grouping = self.group_pool(f_view, tokens, assignment, pos)
        with st("group_encoder"):
            f_group, group_cls = self.encode_groups(grouping)
        with st("heads"):
            f_global = self.descriptor_head(f_group, grouping.valid, group_cls)
            _, f_retrieval, logits = self.classifier_head(f_global)
        return ModelOutputs(f_cnn, f_view, view_cls, grouping, f_group, group_cls, f_global,
                            f_retrieval, logits)

    __call__ = forward


def build_model(config: ModelConfig, seed: int = 0) -> GMViT:
    """Model with weights drawn from the ``init`` substream of ``seed``."""
    from ..seeding import substream

    model = GMViT(config, substream(seed, "init"))
    model.dropout_rng = substream(seed, "dropout")
    return model


def param_count(config: ModelConfig) -> int:
    return GMViT(config, np.random.default_rng(0)).num_parameters()
