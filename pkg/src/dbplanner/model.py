"""The dual-branch planner at desk scale.

A shared-raster pseudo-sensor observation replaces the camera stack. The
scene branch encodes the BEV without any ego-status injection, decodes
agents/map elements, and plans by attending along its own decoded preliminary
trajectories. The planning-only ego branch encodes an ego-enhanced BEV and
anchors its reference points on a constant-velocity rollout of the ego state.
A scene-aware fusion stack aligns the two decision contexts with self
attention and lets fused mode queries cross-attend to them. Every component
sits behind an ablation switch mirroring the experiment ladder.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from functools import lru_cache

import numpy as np

from .autodiff import (Linear, Module, Tensor, add, as_tensor, concat,
                       layer_norm, matmul, mul, relu, reshape, softmax, stack,
                       tmean, transpose)
from .attention import (MultiHeadCrossAttention, MultiHeadSelfAttention,
                        PathAttentionParams, deformable_attention_multi,
                        path_attention_multi)
from .geometry import BevSpec, world_to_grid_tensor
from .losses import AGENT_CLASSES, AgentPredictions, MapPredictions
from .scene import COMMANDS, EgoStatus
from .world import OBS_CHANNELS

DISPLACEMENT_SCALE = 5.0   # meters per head unit per step
KINEMATIC_SCALE = np.array([0.1, 0.1, 0.1, 1.0])  # vx, vy, accel, yaw_rate


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    """Desk-scale defaults; paper-scale reference values are C=256,
    N_agent=300, N_map=100 with 6+6 layers."""

    width: int = 32
    n_agent: int = 8
    n_map: int = 8
    n_map_points: int = 20
    n_mode: int = 3
    horizon_steps: int = 6
    dt: float = 0.5
    samples_per_head: int = 4
    n_heads: int = 4
    interaction_layers: int = 2
    fusion_layers: int = 2
    max_offset_cells: float = 4.0
    bev: BevSpec = field(default_factory=BevSpec)
    dual_branch: bool = True
    distill: bool = True
    scene_aware_init: bool = True
    autoregressive_map: bool = True
    ego_enhancement: bool = True
    path_attention: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.distill and not self.dual_branch:
            raise ConfigError("distill requires dual_branch")
        if self.dual_branch and not self.ego_enhancement:
            raise ConfigError("dual_branch requires ego_enhancement on the teacher branch")
        if abs(self.horizon_steps * self.dt - 3.0) > 1e-9:
            raise ConfigError(f"horizon_steps*dt must be 3.0 s, got "
                              f"{self.horizon_steps * self.dt}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bev"] = {"x_range": list(self.bev.x_range),
                    "y_range": list(self.bev.y_range),
                    "resolution": self.bev.resolution}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        bev = d.pop("bev", None)
        spec = BevSpec(x_range=tuple(bev["x_range"]), y_range=tuple(bev["y_range"]),
                       resolution=bev["resolution"]) if bev else BevSpec()
        return cls(bev=spec, **d)


@dataclass
class ForwardOutputs:
    b_woes: Tensor
    b_wes: Tensor | None
    agents: AgentPredictions
    maps: MapPredictions
    e_woes: Tensor
    e_wes: Tensor | None
    e_fusion: Tensor | None
    scene_trajectories: Tensor
    scene_scores: Tensor
    ego_trajectories: Tensor | None
    ego_scores: Tensor | None
    trajectories: Tensor      # (N_mode, T, 2) final plan candidates, meters
    scores: Tensor            # (N_mode,)
    selected_index: int

    @property
    def selected_plan(self) -> np.ndarray:
        return self.trajectories.data[self.selected_index]


_CONV_OFFSETS = tuple((dr, dc) for dr in (0, 1, 2) for dc in (0, 1, 2))


def _im2col3x3(x: Tensor) -> Tensor:
    """Zero-padded 3x3 neighborhoods of a (C, H, W) grid as (H*W, 9*C) rows.

    Forward and backward are pure shifted-slice copies, which keeps the
    encoder cheap on large grids.
    """
    from .autodiff import _accum, _make
    data = x.data
    c, h, w = data.shape
    padded = np.zeros((c, h + 2, w + 2))
    padded[:, 1:-1, 1:-1] = data
    cols = np.empty((h * w, 9 * c))
    for j, (dr, dc) in enumerate(_CONV_OFFSETS):
        cols[:, j * c:(j + 1) * c] = padded[:, dr:dr + h, dc:dc + w].reshape(c, h * w).T

    def bw(g):
        gx = np.zeros((c, h + 2, w + 2))
        for j, (dr, dc) in enumerate(_CONV_OFFSETS):
            gx[:, dr:dr + h, dc:dc + w] += g[:, j * c:(j + 1) * c].T.reshape(c, h, w)
        _accum(x, gx[:, 1:-1, 1:-1])

    return _make(cols, (x,), bw)


@lru_cache(maxsize=16)
def _positional_encoding(h: int, w: int, width: int) -> np.ndarray:
    """Fixed 2D sinusoidal position code for flattened BEV tokens, (H*W, width)."""
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    xs = (xs / max(w - 1, 1)).ravel()
    ys = (ys / max(h - 1, 1)).ravel()
    out = np.zeros((h * w, width))
    quarter = max(width // 4, 1)
    freqs = np.pi * (2.0 ** np.arange(quarter))
    out[:, 0:quarter] = np.sin(xs[:, None] * freqs)
    out[:, quarter:2 * quarter] = np.cos(xs[:, None] * freqs)
    out[:, 2 * quarter:3 * quarter] = np.sin(ys[:, None] * freqs)
    out[:, 3 * quarter:4 * quarter] = np.cos(ys[:, None] * freqs)
    return 0.5 * out


@lru_cache(maxsize=8)
def _cumsum_matrix(t: int) -> np.ndarray:
    return np.tril(np.ones((t, t)))


class Conv3x3(Module):
    """3x3 local mixing as im2col + linear over the flattened grid."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator):
        super().__init__()
        self.c_in = c_in
        self.lin = Linear(9 * c_in, c_out, rng)

    def __call__(self, x: Tensor) -> Tensor:
        _, h, w = x.shape
        out = self.lin(_im2col3x3(x))                                  # (HW, C_out)
        return reshape(transpose(out), (out.shape[1], h, w))


class BevEncoder(Module):
    """Three stages of local mixing; the optional ego injection is a learned
    projection of the kinematic state broadcast-added before the final stage.
    An encoder built without the projection has no parameters touching ego
    status at all, so it provably cannot enter the features."""

    def __init__(self, obs_channels: int, width: int, rng: np.random.Generator,
                 ego_projection: bool = True):
        super().__init__()
        self.stage1 = Conv3x3(obs_channels, width, rng)
        self.stage2 = Conv3x3(width, width, rng)
        self.ego_proj = Linear(4, width, rng) if ego_projection else None
        self.stage3 = Conv3x3(width, width, rng)
        self.width = width

    def __call__(self, obs: Tensor, ego_vec: np.ndarray | None) -> Tensor:
        if obs.shape[0] != self.stage1.c_in:
            raise ConfigError(f"observation has {obs.shape[0]} channels, "
                              f"encoder expects {self.stage1.c_in}")
        if ego_vec is not None and self.ego_proj is None:
            raise ConfigError("this encoder was built without an ego projection")
        x = relu(self.stage1(obs))
        x = relu(self.stage2(x))
        if ego_vec is not None:
            inj = self.ego_proj(as_tensor(np.asarray(ego_vec) * KINEMATIC_SCALE))
            x = add(x, reshape(inj, (self.width, 1, 1)))
        return self.stage3(x)


class SceneDecoder(Module):
    """Learned agent/map queries cross-attend to flattened BEV tokens, then
    linear heads decode boxes, futures and polylines."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        c = cfg.width
        self.cfg = cfg
        self.agent_queries = Tensor(rng.normal(0.0, 0.5, (cfg.n_agent, c)),
                                    requires_grad=True)
        self.map_queries = Tensor(rng.normal(0.0, 0.5, (cfg.n_map, c)),
                                  requires_grad=True)
        self.layers = [MultiHeadCrossAttention(c, cfg.n_heads, rng) for _ in range(2)]
        self.agent_box_head = Linear(c, 5, rng)
        self.agent_cls_head = Linear(c, len(AGENT_CLASSES) + 1, rng)
        self.agent_motion_head = Linear(c, cfg.horizon_steps * 2, rng)
        self.map_point_head = Linear(c, cfg.n_map_points * 2, rng)
        self.map_cls_head = Linear(c, 4, rng)
        hx = (cfg.bev.x_range[1] - cfg.bev.x_range[0]) / 2.0
        hy = (cfg.bev.y_range[1] - cfg.bev.y_range[0]) / 2.0
        self._box_scale = np.array([hx, hy, 3.0, 1.5, 1.0])
        self._xy_scale = np.array([hx, hy])

    def __call__(self, bev: Tensor) -> tuple[AgentPredictions, MapPredictions]:
        cfg = self.cfg
        c, h, w = bev.shape
        tokens = add(transpose(reshape(bev, (c, h * w))),
                     as_tensor(_positional_encoding(h, w, c)))
        q = concat([self.agent_queries, self.map_queries], axis=0)
        for ca in self.layers:
            q = layer_norm(add(q, ca(q, tokens)), axis=-1)
        aq = q[: cfg.n_agent]
        mq = q[cfg.n_agent:]
        agents = AgentPredictions(
            boxes=mul(self.agent_box_head(aq), as_tensor(self._box_scale)),
            class_logits=self.agent_cls_head(aq),
            motion=mul(reshape(self.agent_motion_head(aq),
                               (cfg.n_agent, cfg.horizon_steps, 2)),
                       as_tensor(self._xy_scale)),
            queries=aq)
        maps = MapPredictions(
            points=mul(reshape(self.map_point_head(mq),
                               (cfg.n_map, cfg.n_map_points, 2)),
                       as_tensor(self._xy_scale)),
            class_logits=self.map_cls_head(mq),
            queries=mq)
        return agents, maps


def _decode_waypoints(query: Tensor, head: Linear, steps: int) -> Tensor:
    """Per-step displacements -> waypoints by prefix sum, in meters."""
    disp = reshape(mul(head(query), as_tensor(DISPLACEMENT_SCALE)), (steps, 2))
    return matmul(as_tensor(_cumsum_matrix(steps)), disp)


def _decode_waypoints_multi(queries: Tensor, head: Linear, steps: int) -> Tensor:
    """Batched prefix-sum decode for M mode queries -> (M, steps, 2)."""
    m = queries.shape[0]
    disp = reshape(mul(head(queries), as_tensor(DISPLACEMENT_SCALE)), (m, steps, 2))
    flat = reshape(transpose(disp, (1, 0, 2)), (steps, m * 2))
    summed = matmul(as_tensor(_cumsum_matrix(steps)), flat)
    return transpose(reshape(summed, (steps, m, 2)), (1, 0, 2))


class SceneBranch(Module):
    """Planning from scene context only: mode queries interact with agent
    queries, map queries and the BEV via path attention along a preliminary
    trajectory re-decoded at every layer. EgoStatus never appears here."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        c = cfg.width
        self.cfg = cfg
        self.mode_emb = Tensor(rng.normal(0.0, 0.5, (cfg.n_mode, c)), requires_grad=True)
        self.command_emb = Tensor(rng.normal(0.0, 0.5, (len(COMMANDS), c)),
                                  requires_grad=True)
        self.agent_attn = [MultiHeadCrossAttention(c, cfg.n_heads, rng)
                           for _ in range(cfg.interaction_layers)]
        self.map_attn = [MultiHeadCrossAttention(c, cfg.n_heads, rng)
                         for _ in range(cfg.interaction_layers)]
        self.bev_attn = [PathAttentionParams(c, cfg.horizon_steps, cfg.samples_per_head,
                                             rng, max_offset_cells=cfg.max_offset_cells)
                         for _ in range(cfg.interaction_layers)]
        self.traj_head = Linear(c, cfg.horizon_steps * 2, rng)
        self.score_head = Linear(c, 1, rng)

    def _bev_rows(self, e: Tensor, bev: Tensor, params: PathAttentionParams) -> Tensor:
        cfg = self.cfg
        wps = _decode_waypoints_multi(e, self.traj_head, cfg.horizon_steps)
        pts = world_to_grid_tensor(cfg.bev, wps)
        if cfg.path_attention:
            return path_attention_multi(e, pts, bev, params)
        return deformable_attention_multi(e, tmean(pts, axis=1), bev, params)

    def __call__(self, bev: Tensor, agent_q: Tensor, map_q: Tensor,
                 command_idx: int) -> tuple[Tensor, Tensor, Tensor]:
        cfg = self.cfg
        e = add(self.mode_emb, self.command_emb[command_idx])
        for layer in range(cfg.interaction_layers):
            e = layer_norm(add(e, self.agent_attn[layer](e, agent_q)), axis=-1)
            e = layer_norm(add(e, self.map_attn[layer](e, map_q)), axis=-1)
            e = layer_norm(add(e, self._bev_rows(e, bev, self.bev_attn[layer])), axis=-1)
        trajs = _decode_waypoints_multi(e, self.traj_head, cfg.horizon_steps)
        scores = reshape(self.score_head(e), (cfg.n_mode,))
        return e, trajs, scores


class EgoBranch(Module):
    """Planning-only branch: no scene decoder; reference points anchor on a
    constant-velocity rollout of the ego state plus a zero-initialized
    learned delta, and the final trajectories keep the rollout as a prior."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        c = cfg.width
        self.cfg = cfg
        self.mode_emb = Tensor(rng.normal(0.0, 0.5, (cfg.n_mode, c)), requires_grad=True)
        self.command_emb = Tensor(rng.normal(0.0, 0.5, (len(COMMANDS), c)),
                                  requires_grad=True)
        self.bev_attn = [PathAttentionParams(c, cfg.horizon_steps, cfg.samples_per_head,
                                             rng, max_offset_cells=cfg.max_offset_cells)
                         for _ in range(cfg.interaction_layers)]
        self.delta_head = Linear(c, cfg.horizon_steps * 2, rng, zero_init=True)
        self.traj_head = Linear(c, cfg.horizon_steps * 2, rng)
        self.score_head = Linear(c, 1, rng)

    def rollout(self, ego: EgoStatus) -> np.ndarray:
        steps = self.cfg.dt * np.arange(1, self.cfg.horizon_steps + 1)
        return np.stack([ego.velocity[0] * steps, ego.velocity[1] * steps], axis=1)

    def reference_points(self, query: Tensor, ego: EgoStatus) -> Tensor:
        """Constant-velocity rollout plus the learned delta, in meters."""
        delta = reshape(self.delta_head(query), (self.cfg.horizon_steps, 2))
        return add(as_tensor(self.rollout(ego)), delta)

    def __call__(self, bev: Tensor, ego: EgoStatus,
                 command_idx: int) -> tuple[Tensor, Tensor, Tensor]:
        cfg = self.cfg
        cv = self.rollout(ego)
        e = add(self.mode_emb, self.command_emb[command_idx])
        for layer in range(cfg.interaction_layers):
            delta = reshape(self.delta_head(e), (cfg.n_mode, cfg.horizon_steps, 2))
            refs = add(as_tensor(cv), delta)
            pts = world_to_grid_tensor(cfg.bev, refs)
            if cfg.path_attention:
                att = path_attention_multi(e, pts, bev, self.bev_attn[layer])
            else:
                att = deformable_attention_multi(e, tmean(pts, axis=1),
                                                 bev, self.bev_attn[layer])
            e = layer_norm(add(e, att), axis=-1)
        trajs = add(as_tensor(cv),
                    _decode_waypoints_multi(e, self.traj_head, cfg.horizon_steps))
        scores = reshape(self.score_head(e), (cfg.n_mode,))
        return e, trajs, scores


class FusionStack(Module):
    """Multi-context decision fusion: per layer, project and concatenate the
    two contexts (scene rows first), align with MHSA + residual layer norm,
    then let the fused queries cross-attend to the aligned representation."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        c = cfg.width
        self.cfg = cfg
        self.mode_emb = Tensor(rng.normal(0.0, 0.5, (cfg.n_mode, c)), requires_grad=True)
        self.command_emb = Tensor(rng.normal(0.0, 0.5, (len(COMMANDS), c)),
                                  requires_grad=True)
        self.gap_proj = Linear(c, c, rng)
        self.proj_woes = [Linear(c, c, rng) for _ in range(cfg.fusion_layers)]
        self.proj_wes = [Linear(c, c, rng) for _ in range(cfg.fusion_layers)]
        self.self_attn = [MultiHeadSelfAttention(c, cfg.n_heads, rng)
                          for _ in range(cfg.fusion_layers)]
        self.cross_attn = [MultiHeadCrossAttention(c, cfg.n_heads, rng)
                           for _ in range(cfg.fusion_layers)]
        self.traj_head = Linear(c, cfg.horizon_steps * 2, rng)
        self.score_head = Linear(c, 1, rng)

    def init_queries(self, bev: Tensor | None) -> Tensor:
        """Scene-aware initialization: global average pooled BEV feature,
        projected, shared across modes, plus modality embeddings. With
        bev=None the pooled term is replaced by zeros."""
        if bev is None:
            return self.mode_emb
        c, h, w = bev.shape
        pooled = tmean(reshape(bev, (c, h * w)), axis=1)
        return add(self.mode_emb, self.gap_proj(pooled))

    def fuse(self, e_fusion: Tensor, e_woes: Tensor, e_wes: Tensor) -> Tensor:
        for layer in range(self.cfg.fusion_layers):
            e_multi = concat([self.proj_woes[layer](e_woes),
                              self.proj_wes[layer](e_wes)], axis=0)
            aligned = layer_norm(add(e_multi, self.self_attn[layer](e_multi)), axis=-1)
            e_fusion = layer_norm(add(e_fusion, self.cross_attn[layer](e_fusion, aligned)),
                                  axis=-1)
        return e_fusion

    def decode_plan(self, e_fusion: Tensor, command_idx: int) -> tuple[Tensor, Tensor]:
        cfg = self.cfg
        e = add(e_fusion, self.command_emb[command_idx])
        trajs = _decode_waypoints_multi(e, self.traj_head, cfg.horizon_steps)
        scores = reshape(self.score_head(e), (cfg.n_mode,))
        return trajs, scores


class DualBranchPlanner(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0,
                 obs_channels: int = OBS_CHANNELS):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        # the scene encoder carries an ego projection only in single-branch
        # mode (the ego-enhanced baseline); in dual-branch mode the teacher
        # encoder owns the enhancement and the scene encoder stays ego-free
        scene_has_ego = not cfg.dual_branch and cfg.ego_enhancement
        self.scene_encoder = BevEncoder(obs_channels, cfg.width, rng,
                                        ego_projection=scene_has_ego)
        self.scene_decoder = SceneDecoder(cfg, rng)
        self.scene_branch = SceneBranch(cfg, rng)
        if cfg.dual_branch:
            self.ego_encoder = BevEncoder(obs_channels, cfg.width, rng)
            self.ego_branch = EgoBranch(cfg, rng)
            self.fusion = FusionStack(cfg, rng)

    def teacher_parameters(self) -> list[tuple[str, Tensor]]:
        """Parameters of the ego-enhanced (teacher) BEV encoder."""
        if not self.cfg.dual_branch:
            return []
        return list(self.ego_encoder.named_parameters("ego_encoder."))

    def forward(self, obs: np.ndarray, ego: EgoStatus, command: str,
                scene_only: bool = False) -> ForwardOutputs:
        """Full forward pass. ``scene_only`` severs the ego branch at
        evaluation time: the ego encoder is never invoked and the fusion
        stack receives zeros for the ego context."""
        cfg = self.cfg
        cmd = COMMANDS.index(command)
        obs_t = as_tensor(obs)

        if not cfg.dual_branch:
            ego_vec = ego.kinematics() if cfg.ego_enhancement else None
            bev = self.scene_encoder(obs_t, ego_vec)
            agents, maps = self.scene_decoder(bev)
            e_woes, trajs, scores = self.scene_branch(bev, agents.queries,
                                                      maps.queries, cmd)
            selected = int(np.argmax(scores.data))
            return ForwardOutputs(b_woes=bev, b_wes=None, agents=agents, maps=maps,
                                  e_woes=e_woes, e_wes=None, e_fusion=None,
                                  scene_trajectories=trajs, scene_scores=scores,
                                  ego_trajectories=None, ego_scores=None,
                                  trajectories=trajs, scores=scores,
                                  selected_index=selected)

        b_woes = self.scene_encoder(obs_t, None)
        agents, maps = self.scene_decoder(b_woes)
        e_woes, scene_trajs, scene_scores = self.scene_branch(
            b_woes, agents.queries, maps.queries, cmd)
        if scene_only:
            b_wes = None
            e_wes = as_tensor(np.zeros((cfg.n_mode, cfg.width)))
            ego_trajs = ego_scores = None
        else:
            b_wes = self.ego_encoder(obs_t, ego.kinematics())
            e_wes, ego_trajs, ego_scores = self.ego_branch(b_wes, ego, cmd)
        e_fusion = self.fusion.init_queries(b_woes if cfg.scene_aware_init else None)
        e_fusion = self.fusion.fuse(e_fusion, e_woes, e_wes)
        trajs, scores = self.fusion.decode_plan(e_fusion, cmd)
        selected = int(np.argmax(scores.data))
        return ForwardOutputs(b_woes=b_woes, b_wes=b_wes, agents=agents, maps=maps,
                              e_woes=e_woes, e_wes=e_wes, e_fusion=e_fusion,
                              scene_trajectories=scene_trajs, scene_scores=scene_scores,
                              ego_trajectories=ego_trajs, ego_scores=ego_scores,
                              trajectories=trajs, scores=scores,
                              selected_index=selected)

    __call__ = forward


def mode_probabilities(scores: Tensor) -> np.ndarray:
    return softmax(scores, axis=0).data
