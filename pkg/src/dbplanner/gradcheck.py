"""Finite-difference gradient checking for every differentiable operation.

Each registry entry builds (leaf tensors, forward closure) at a randomized
generic point (inputs bounded in [-2, 2], jittered off non-smooth sets). The
runner scalarizes the output with a fixed random projection, compares
analytic gradients against central differences (step 1e-4), and reports the
max relative error per op with denominator floor 1."""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor
from .attention import (MultiHeadCrossAttention, MultiHeadSelfAttention,
                        PathAttentionParams, deformable_attention_baseline,
                        path_attention)
from .geometry import BevSpec, OrientedRect, bilinear_sample_many, gwd_rect_tensor
from .losses import (AgentPredictions, LossWeights, MapPredictions,
                     autoregressive_gwd_loss, autoregressive_map_loss,
                     distill_df, distill_ic, distill_ik, distill_total,
                     agent_keypoints, perception_losses, planning_loss,
                     total_loss)
from .scene import AgentBox, MapInstanceSet

DEFAULT_TOL = 1e-5
FD_STEP = 1e-4

Builder = Callable[[np.random.Generator], tuple[dict[str, Tensor], Callable[[], Tensor]]]


@dataclass
class OpReport:
    op: str
    max_rel_err: float
    worst_leaf: str

    def passed(self, tol: float = DEFAULT_TOL) -> bool:
        return self.max_rel_err <= tol


def _t(rng, *shape, lo=-2.0, hi=2.0, grad=True) -> Tensor:
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=grad)


def _away_from(x: np.ndarray, gap: float) -> np.ndarray:
    """Push entries at least ``gap`` away from zero, preserving sign."""
    s = np.where(x >= 0, 1.0, -1.0)
    return x + s * gap


# -- primitive builders ------------------------------------------------------

def _b_add(rng):
    a, b = _t(rng, 3, 4), _t(rng, 4)
    return {"a": a, "b": b}, lambda: ad.add(a, b)


def _b_mul(rng):
    a, b = _t(rng, 3, 4), _t(rng, 4)
    return {"a": a, "b": b}, lambda: ad.mul(a, b)


def _b_div(rng):
    a = _t(rng, 3, 4)
    b = Tensor(_away_from(rng.uniform(-2, 2, size=4), 0.5), requires_grad=True)
    return {"a": a, "b": b}, lambda: ad.div(a, b)


def _b_matmul(rng):
    a, b = _t(rng, 3, 4), _t(rng, 4, 2)
    return {"a": a, "b": b}, lambda: ad.matmul(a, b)


def _b_bmm(rng):
    a, b = _t(rng, 2, 3, 4), _t(rng, 2, 4, 2)
    return {"a": a, "b": b}, lambda: ad.bmm(a, b)


def _b_reshape(rng):
    a = _t(rng, 3, 4)
    return {"a": a}, lambda: ad.reshape(ad.mul(a, a), (2, 6))


def _b_transpose(rng):
    a = _t(rng, 2, 3, 4)
    return {"a": a}, lambda: ad.transpose(ad.mul(a, a), (2, 0, 1))


def _b_concat(rng):
    a, b = _t(rng, 2, 3), _t(rng, 4, 3)
    return {"a": a, "b": b}, lambda: ad.concat([ad.mul(a, a), b], axis=0)


def _b_slice(rng):
    a = _t(rng, 4, 5)
    return {"a": a}, lambda: ad.mul(a, a)[1:3, ::2]


def _b_take(rng):
    a = _t(rng, 5, 3)
    idx = np.array([0, 2, 2, 4, 1])
    return {"a": a}, lambda: ad.take(ad.mul(a, a), idx, axis=0)


def _b_sum(rng):
    a = _t(rng, 3, 4, 2)
    return {"a": a}, lambda: ad.tsum(ad.mul(a, a), axis=(1, 2))


def _b_mean(rng):
    a = _t(rng, 3, 4)
    return {"a": a}, lambda: ad.tmean(ad.mul(a, a), axis=1)


def _b_relu(rng):
    a = Tensor(_away_from(rng.uniform(-2, 2, size=(3, 4)), 0.05), requires_grad=True)
    return {"a": a}, lambda: ad.relu(a)


def _b_abs(rng):
    a = Tensor(_away_from(rng.uniform(-2, 2, size=(3, 4)), 0.05), requires_grad=True)
    return {"a": a}, lambda: ad.tabs(a)


def _b_exp(rng):
    a = _t(rng, 3, 4)
    return {"a": a}, lambda: ad.texp(a)


def _b_log(rng):
    a = _t(rng, 3, 4, lo=0.2, hi=2.0)
    return {"a": a}, lambda: ad.tlog(a)


def _b_sqrt(rng):
    a = _t(rng, 3, 4, lo=0.2, hi=2.0)
    return {"a": a}, lambda: ad.tsqrt(a)


def _b_tanh(rng):
    a = _t(rng, 3, 4)
    return {"a": a}, lambda: ad.ttanh(a)


def _b_cos(rng):
    a = _t(rng, 3, 4)
    return {"a": a}, lambda: ad.tcos(a)


def _b_sin(rng):
    a = _t(rng, 3, 4)
    return {"a": a}, lambda: ad.tsin(a)


def _b_softmax(rng):
    a = _t(rng, 3, 5)
    return {"a": a}, lambda: ad.softmax(a, axis=1)


def _b_log_softmax(rng):
    a = _t(rng, 3, 5)
    return {"a": a}, lambda: ad.log_softmax(a, axis=1)


def _b_layer_norm(rng):
    a = _t(rng, 3, 6)
    return {"a": a}, lambda: ad.layer_norm(a, axis=-1)


# -- geometry / attention builders -------------------------------------------

def _interior_points(rng, n, h, w):
    """Generic sampling points: strictly interior, fractional part in [.2, .8]."""
    cx = rng.integers(1, w - 2, size=n)
    cy = rng.integers(1, h - 2, size=n)
    fx = rng.uniform(0.2, 0.8, size=n)
    fy = rng.uniform(0.2, 0.8, size=n)
    return np.stack([cx + fx, cy + fy], axis=1)


def _b_bilinear(rng):
    grid = _t(rng, 3, 6, 7)
    pts = Tensor(_interior_points(rng, 4, 6, 7), requires_grad=True)
    return {"grid": grid, "pts": pts}, lambda: bilinear_sample_many(grid, pts)


def _randomized_path_params(rng, width, heads, samples) -> PathAttentionParams:
    params = PathAttentionParams(width, heads, samples, rng, max_offset_cells=1.0)
    params.offset_head.weight.data = rng.uniform(-0.3, 0.3,
                                                 params.offset_head.weight.shape)
    params.offset_head.bias.data = rng.uniform(-0.3, 0.3, params.offset_head.bias.shape)
    params.weight_head.weight.data = rng.uniform(-0.5, 0.5,
                                                 params.weight_head.weight.shape)
    params.weight_head.bias.data = rng.uniform(-0.5, 0.5, params.weight_head.bias.shape)
    return params


def _path_leaves(params: PathAttentionParams, query, grid, pts) -> dict[str, Tensor]:
    leaves = {"query": query, "grid": grid, "pts": pts}
    leaves.update({f"p.{n}": p for n, p in params.named_parameters()})
    return leaves


def _b_path_attention(rng):
    width, heads, samples = 6, 2, 3
    params = _randomized_path_params(rng, width, heads, samples)
    grid = _t(rng, width, 8, 9)
    query = _t(rng, width)
    pts = Tensor(_interior_points(rng, heads, 8, 9), requires_grad=True)
    fwd = lambda: path_attention(query, pts, grid, params)
    return _path_leaves(params, query, grid, pts), fwd


def _b_deformable(rng):
    width, heads, samples = 6, 2, 3
    params = _randomized_path_params(rng, width, heads, samples)
    grid = _t(rng, width, 8, 9)
    query = _t(rng, width)
    anchor = Tensor(_interior_points(rng, 1, 8, 9)[0], requires_grad=True)
    fwd = lambda: deformable_attention_baseline(query, anchor, grid, params)
    return _path_leaves(params, query, grid, anchor), fwd


def _b_mhsa(rng):
    block = MultiHeadSelfAttention(6, 2, rng)
    x = _t(rng, 4, 6)
    leaves = {"x": x}
    leaves.update({f"p.{n}": p for n, p in block.named_parameters()})
    return leaves, lambda: block(x)


def _b_cross_attention(rng):
    block = MultiHeadCrossAttention(6, 2, rng)
    q, kv = _t(rng, 3, 6), _t(rng, 5, 6)
    leaves = {"q": q, "kv": kv}
    leaves.update({f"p.{n}": p for n, p in block.named_parameters()})
    return leaves, lambda: block(q, kv)


# -- loss builders ------------------------------------------------------------

_SPEC_SMALL = BevSpec(x_range=(-4.0, 4.0), y_range=(-3.0, 3.0), resolution=1.0)


def _b_gwd(rng):
    leaves = {
        "cx": Tensor(rng.uniform(-2, 2), requires_grad=True),
        "cy": Tensor(rng.uniform(-2, 2), requires_grad=True),
        "hl": Tensor(rng.uniform(0.8, 2.0), requires_grad=True),
        "hw": Tensor(rng.uniform(0.4, 0.7), requires_grad=True),
        "heading": Tensor(rng.uniform(0.2, 1.2), requires_grad=True),
    }
    other = OrientedRect((rng.uniform(-2, 2), rng.uniform(-2, 2)),
                         (rng.uniform(0.8, 2.0), rng.uniform(0.4, 0.7)),
                         rng.uniform(-1.2, -0.2))
    placeholder = OrientedRect((0.0, 0.0), (1.0, 1.0), 0.0)
    fwd = lambda: gwd_rect_tensor(placeholder, other, params_a=leaves)
    return leaves, fwd


def _distill_fixture(rng):
    student = _t(rng, 3, _SPEC_SMALL.height, _SPEC_SMALL.width)
    teacher = _t(rng, 3, _SPEC_SMALL.height, _SPEC_SMALL.width, grad=False)
    rects = [OrientedRect((0.5, 0.3), (1.5, 0.8), 0.4),
             OrientedRect((-2.0, -1.0), (1.0, 0.6), -0.3)]
    return student, teacher, rects


def _b_distill_df(rng):
    student, teacher, rects = _distill_fixture(rng)
    fwd = lambda: distill_df(student, teacher, rects, _SPEC_SMALL)
    return {"student": student}, fwd


def _b_distill_ik(rng):
    student, teacher, rects = _distill_fixture(rng)
    kps = agent_keypoints(rects, _SPEC_SMALL)
    fwd = lambda: distill_ik(student, teacher, kps)
    return {"student": student}, fwd


def _b_distill_ic(rng):
    student, teacher, rects = _distill_fixture(rng)
    fwd = lambda: distill_ic(student, teacher, rects, _SPEC_SMALL)
    return {"student": student}, fwd


def _b_distill_total(rng):
    student, teacher, rects = _distill_fixture(rng)
    w = LossWeights()
    fwd = lambda: distill_total(student, teacher, rects, _SPEC_SMALL, w)
    return {"student": student}, fwd


def _map_fixture(rng, n=3, p=4):
    pts = rng.uniform(-3, 3, size=(n, p, 2))
    return MapInstanceSet(points=pts, classes=rng.integers(0, 3, size=n),
                          valid=np.ones(n, dtype=bool))


def _b_autoregressive_map_loss(rng):
    gt_map = _map_fixture(rng)
    pred_pts = Tensor(gt_map.points + rng.uniform(-0.5, 0.5, gt_map.points.shape),
                      requires_grad=True)
    gt_traj = np.cumsum(rng.uniform(0.3, 0.8, size=(6, 2)), axis=0)
    pred_traj = gt_traj + rng.uniform(-0.4, 0.4, size=(6, 2))
    fwd = lambda: autoregressive_map_loss(pred_traj, gt_traj, pred_pts,
                                          gt_map, _SPEC_SMALL)
    return {"pred_points": pred_pts}, fwd


def _b_autoregressive_gwd_loss(rng):
    gt_traj = np.cumsum(rng.uniform(0.3, 0.8, size=(6, 2)), axis=0)
    pred = Tensor(gt_traj + rng.uniform(-0.4, 0.4, size=(6, 2)), requires_grad=True)
    fwd = lambda: autoregressive_gwd_loss(pred, gt_traj, _SPEC_SMALL)
    return {"pred_traj": pred}, fwd


def _b_planning_loss(rng):
    gt = np.cumsum(rng.uniform(0.3, 0.8, size=(5, 2)) * [[1.0, 0.2]], axis=0)
    modes = np.stack([gt + 0.05 * rng.standard_normal(gt.shape),
                      gt + 2.0 + rng.standard_normal(gt.shape),
                      gt - 3.0 + rng.standard_normal(gt.shape)])
    trajs = Tensor(modes, requires_grad=True)
    scores = _t(rng, 3)
    fwd = lambda: planning_loss(trajs, gt, scores)[0]
    return {"trajs": trajs, "scores": scores}, fwd


def _b_perception_losses(rng):
    gt_agents = [
        AgentBox(rect=OrientedRect((1.5, 0.8), (1.2, 0.6), 0.3), cls=0,
                 future=rng.uniform(-2, 2, size=(4, 2))),
        AgentBox(rect=OrientedRect((-2.0, -1.2), (1.0, 0.5), -0.4), cls=0,
                 future=rng.uniform(-2, 2, size=(4, 2))),
    ]
    boxes = Tensor(np.array([[1.4, 0.9, 1.1, 0.5, 0.2],
                             [-2.1, -1.0, 0.9, 0.6, -0.5],
                             [3.5, 2.5, 1.0, 0.5, 0.0]]), requires_grad=True)
    cls_logits = _t(rng, 3, 2)
    motion = _t(rng, 3, 4, 2)
    queries = _t(rng, 3, 4, grad=False)
    agents = AgentPredictions(boxes=boxes, class_logits=cls_logits,
                              motion=motion, queries=queries)
    gt_map = _map_fixture(rng, n=2, p=3)
    map_pts = Tensor(gt_map.points + rng.uniform(-0.3, 0.3, gt_map.points.shape),
                     requires_grad=True)
    map_logits = _t(rng, 2, 4)
    maps = MapPredictions(points=map_pts, class_logits=map_logits,
                          queries=_t(rng, 2, 4, grad=False))

    def fwd():
        l_det, l_map = perception_losses(agents, gt_agents, maps, gt_map)
        return ad.add(l_det, l_map)

    return {"boxes": boxes, "cls_logits": cls_logits, "map_points": map_pts,
            "map_logits": map_logits}, fwd


def _b_total_loss(rng):
    parts = {n: Tensor(rng.uniform(0.1, 2.0), requires_grad=True)
             for n in ("det", "map", "mot", "plan", "distill", "autoreg")}
    w = LossWeights()
    fwd = lambda: total_loss(dict(parts), w)
    return dict(parts), fwd


REGISTRY: dict[str, Builder] = {
    "add": _b_add, "mul": _b_mul, "div": _b_div,
    "matmul": _b_matmul, "bmm": _b_bmm,
    "reshape": _b_reshape, "transpose": _b_transpose, "concat": _b_concat,
    "slice": _b_slice, "take": _b_take,
    "sum": _b_sum, "mean": _b_mean,
    "relu": _b_relu, "abs": _b_abs,
    "exp": _b_exp, "log": _b_log, "sqrt": _b_sqrt,
    "tanh": _b_tanh, "cos": _b_cos, "sin": _b_sin,
    "softmax": _b_softmax, "log_softmax": _b_log_softmax,
    "layer_norm": _b_layer_norm,
    "bilinear_sample": _b_bilinear,
    "path_attention": _b_path_attention,
    "deformable_attention": _b_deformable,
    "mhsa": _b_mhsa,
    "cross_attention": _b_cross_attention,
    "gwd": _b_gwd,
    "distill_df": _b_distill_df, "distill_ik": _b_distill_ik,
    "distill_ic": _b_distill_ic, "distill_total": _b_distill_total,
    "autoregressive_map_loss": _b_autoregressive_map_loss,
    "autoregressive_gwd_loss": _b_autoregressive_gwd_loss,
    "planning_loss": _b_planning_loss,
    "perception_losses": _b_perception_losses,
    "total_loss": _b_total_loss,
}


def check_op(name: str, builder: Builder, seed: int = 0,
             step: float = FD_STEP) -> OpReport:
    rng = np.random.default_rng((seed, zlib.crc32(name.encode())))
    leaves, forward = builder(rng)
    probe = forward()
    proj = np.random.default_rng((seed, 77)).standard_normal(probe.shape)

    def loss_fn() -> ad.Tensor:
        return ad.tsum(ad.mul(forward(), as_tensor(proj)))

    for t in leaves.values():
        t.grad = None
    ad.backward(loss_fn())

    worst = 0.0
    worst_leaf = ""
    for lname, leaf in leaves.items():
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        flat = leaf.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = loss_fn().item()
            flat[i] = orig - step
            down = loss_fn().item()
            flat[i] = orig
            fd = (up - down) / (2.0 * step)
            an = analytic.reshape(-1)[i]
            rel = abs(an - fd) / max(abs(an), abs(fd), 1.0)
            if rel > worst:
                worst = rel
                worst_leaf = f"{lname}[{i}]"
    return OpReport(op=name, max_rel_err=worst, worst_leaf=worst_leaf)


def run_gradcheck(seed: int = 0, tol: float = DEFAULT_TOL,
                  registry: dict[str, Builder] | None = None) -> list[OpReport]:
    registry = REGISTRY if registry is None else registry
    return [check_op(name, builder, seed) for name, builder in registry.items()]


def format_report(reports: list[OpReport], tol: float = DEFAULT_TOL) -> str:
    lines = []
    for r in reports:
        status = "PASS" if r.passed(tol) else f"FAIL ({r.worst_leaf})"
        lines.append(f"{r.op:<28s} max_rel_err={r.max_rel_err:.3e}  {status}")
    n_fail = sum(0 if r.passed(tol) else 1 for r in reports)
    lines.append(f"{len(reports)} ops checked, {n_fail} failure(s), tol={tol:g}")
    return "\n".join(lines)
