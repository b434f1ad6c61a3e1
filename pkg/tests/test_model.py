import numpy as np
import pytest

from dbplanner import autodiff as ad
from dbplanner.autodiff import Tensor
from dbplanner.losses import LossWeights, distill_total, total_loss
from dbplanner.model import (ConfigError, DualBranchPlanner, ModelConfig,
                             _decode_waypoints_multi)
from dbplanner.optim import AdamW
from dbplanner.scene import EgoStatus
from dbplanner.train import scenario_losses
from dbplanner.world import perturb_ego

from conftest import compact_config, make_scenarios


@pytest.fixture(scope="module")
def scenario():
    cfg = compact_config()
    return make_scenarios([42], cfg, difficulty=0.8)[0]


def fresh(cfg=None, seed=1):
    return DualBranchPlanner(cfg or compact_config(), seed=seed)


# -- encoder --------------------------------------------------------------------

def test_encoder_without_ego_is_ego_independent(scenario):
    # ego enhancement off and no ego branch: bit-identical plans under the
    # whole perturbation noise set
    cfg = compact_config(dual_branch=False, distill=False, scene_aware_init=False,
                         autoregressive_map=False, ego_enhancement=False)
    model = fresh(cfg)
    base = model.forward(scenario.obs, scenario.ego_status, scenario.command)
    for mode in ("x0.0", "x0.5", "x1.5", "abs100"):
        out = model.forward(scenario.obs, perturb_ego(scenario.ego_status, mode),
                            scenario.command)
        assert np.array_equal(base.trajectories.data, out.trajectories.data)
        assert np.array_equal(base.scores.data, out.scores.data)


def test_encoder_zero_injection_equals_no_injection(scenario):
    model = fresh()
    enc = model.ego_encoder
    enc.ego_proj.weight.data[:] = 0.0
    enc.ego_proj.bias.data[:] = 0.0
    obs_t = ad.as_tensor(scenario.obs)
    with_ego = enc(obs_t, np.array([5.0, 0.0, 0.0, 0.0]))
    without = enc(obs_t, None)
    assert np.array_equal(with_ego.data, without.data)


def test_scene_encoder_has_no_ego_parameters_in_dual_mode(scenario):
    model = fresh()
    assert model.scene_encoder.ego_proj is None
    names = [n for n, _ in model.scene_encoder.named_parameters()]
    assert not any("ego" in n for n in names)


def test_encoder_velocity_sensitivity(scenario):
    model = fresh()
    enc = model.ego_encoder
    obs_t = ad.as_tensor(scenario.obs)
    a = enc(obs_t, np.array([5.0, 0.0, 0.0, 0.0]))
    b = enc(obs_t, np.array([6.0, 0.0, 0.0, 0.0]))
    assert np.abs(a.data - b.data).max() > 0.0


def test_encoder_rejects_wrong_channel_count(scenario):
    model = fresh()
    with pytest.raises(ConfigError):
        model.scene_encoder(ad.as_tensor(scenario.obs[:3]), None)


# -- scene decoder ----------------------------------------------------------------

def test_scene_decoder_zero_bev_zero_heads_decode_to_bias(scenario):
    cfg = compact_config()
    model = fresh(cfg)
    dec = model.scene_decoder
    for head in (dec.agent_box_head, dec.agent_motion_head, dec.map_point_head):
        head.weight.data[:] = 0.0
        head.bias.data[:] = 0.0
    zero_bev = Tensor(np.zeros((cfg.width, cfg.bev.height, cfg.bev.width)))
    agents, maps = dec(zero_bev)
    assert np.array_equal(agents.boxes.data, np.zeros((cfg.n_agent, 5)))
    assert np.array_equal(maps.points.data,
                          np.zeros((cfg.n_map, cfg.n_map_points, 2)))


def test_scene_decoder_output_shapes(scenario):
    cfg = compact_config()
    model = fresh(cfg)
    out = model.forward(scenario.obs, scenario.ego_status, scenario.command)
    assert out.agents.boxes.shape == (cfg.n_agent, 5)
    assert out.agents.motion.shape == (cfg.n_agent, cfg.horizon_steps, 2)
    assert out.maps.points.shape == (cfg.n_map, cfg.n_map_points, 2)
    assert out.maps.class_logits.shape == (cfg.n_map, 4)


def test_forward_deterministic_across_runs(scenario):
    a = fresh(seed=5).forward(scenario.obs, scenario.ego_status, scenario.command)
    b = fresh(seed=5).forward(scenario.obs, scenario.ego_status, scenario.command)
    assert np.array_equal(a.trajectories.data, b.trajectories.data)
    assert np.array_equal(a.b_woes.data, b.b_woes.data)


# -- branches ------------------------------------------------------------------------

def test_ego_branch_constant_velocity_reference_points():
    cfg = compact_config()
    model = fresh(cfg)
    ego = EgoStatus(velocity=(5.0, 0.0))
    q = Tensor(np.zeros(cfg.width))
    pts = model.ego_branch.reference_points(q, ego)
    assert np.allclose(pts.data[:, 0], [2.5, 5.0, 7.5, 10.0, 12.5, 15.0], atol=1e-12)
    assert np.array_equal(pts.data[:, 1], np.zeros(6))


def test_ego_branch_zero_velocity_reference_points_at_origin():
    cfg = compact_config()
    model = fresh(cfg)
    pts = model.ego_branch.reference_points(Tensor(np.zeros(cfg.width)),
                                            EgoStatus(velocity=(0.0, 0.0)))
    assert np.array_equal(pts.data, np.zeros((6, 2)))


def test_branch_outputs_finite_and_shaped(scenario):
    cfg = compact_config()
    out = fresh(cfg).forward(scenario.obs, scenario.ego_status, scenario.command)
    for trajs, scores in ((out.scene_trajectories, out.scene_scores),
                          (out.ego_trajectories, out.ego_scores),
                          (out.trajectories, out.scores)):
        assert trajs.shape == (cfg.n_mode, cfg.horizon_steps, 2)
        assert np.isfinite(trajs.data).all()
        assert np.isfinite(scores.data).all()


def test_deformable_switch_changes_interaction(scenario):
    base = fresh(compact_config(), seed=3)
    swapped = fresh(compact_config(path_attention=False), seed=3)
    a = base.forward(scenario.obs, scenario.ego_status, scenario.command)
    b = swapped.forward(scenario.obs, scenario.ego_status, scenario.command)
    assert not np.array_equal(a.trajectories.data, b.trajectories.data)


# -- fusion -------------------------------------------------------------------------

def test_scene_aware_init_pools_constant_grid():
    cfg = compact_config()
    model = fresh(cfg)
    fusion = model.fusion
    fusion.gap_proj.weight.data = np.eye(cfg.width)
    fusion.gap_proj.bias.data[:] = 0.0
    const = Tensor(np.full((cfg.width, 4, 4), 2.5))
    q = fusion.init_queries(const)
    assert np.allclose(q.data - fusion.mode_emb.data, 2.5, atol=1e-12)


def test_scene_aware_init_modes_differ_only_by_embeddings(scenario):
    cfg = compact_config()
    model = fresh(cfg)
    bev = Tensor(np.random.default_rng(0).uniform(-1, 1, (cfg.width, 4, 4)))
    q = model.fusion.init_queries(bev)
    shared = q.data - model.fusion.mode_emb.data
    assert np.allclose(shared, shared[0], atol=1e-12)


def test_scene_aware_init_2x2_mean():
    cfg = compact_config()
    model = fresh(cfg)
    model.fusion.gap_proj.weight.data = np.eye(cfg.width)
    model.fusion.gap_proj.bias.data[:] = 0.0
    grid = np.zeros((cfg.width, 2, 2))
    grid[0] = [[1.0, 2.0], [3.0, 4.0]]
    q = model.fusion.init_queries(Tensor(grid))
    assert (q.data[:, 0] - model.fusion.mode_emb.data[:, 0])[0] == pytest.approx(2.5)


def test_fusion_concat_order_scene_rows_first():
    cfg = compact_config()
    model = fresh(cfg)
    fusion = model.fusion
    layer = 0
    fusion.proj_woes[layer].weight.data = np.eye(cfg.width)
    fusion.proj_woes[layer].bias.data[:] = 0.0
    fusion.proj_wes[layer].weight.data[:] = 0.0
    fusion.proj_wes[layer].bias.data[:] = 0.0
    e_woes = Tensor(np.random.default_rng(1).uniform(-1, 1, (cfg.n_mode, cfg.width)))
    e_wes = Tensor(np.random.default_rng(2).uniform(-1, 1, (cfg.n_mode, cfg.width)))
    e_multi = ad.concat([fusion.proj_woes[layer](e_woes),
                         fusion.proj_wes[layer](e_wes)], axis=0)
    assert np.array_equal(e_multi.data[:cfg.n_mode], e_woes.data)
    assert np.array_equal(e_multi.data[cfg.n_mode:], np.zeros((cfg.n_mode, cfg.width)))


def test_fusion_zero_attention_reduces_to_layer_norm():
    cfg = compact_config(fusion_layers=1)
    model = fresh(cfg)
    fusion = model.fusion
    for blk in (fusion.self_attn[0], fusion.cross_attn[0]):
        blk.v_proj.weight.data[:] = 0.0
        blk.v_proj.bias.data[:] = 0.0
        blk.o_proj.weight.data[:] = 0.0
        blk.o_proj.bias.data[:] = 0.0
    rng = np.random.default_rng(3)
    e_f = Tensor(rng.uniform(-1, 1, (cfg.n_mode, cfg.width)))
    e_woes = Tensor(rng.uniform(-1, 1, (cfg.n_mode, cfg.width)))
    e_wes = Tensor(rng.uniform(-1, 1, (cfg.n_mode, cfg.width)))
    fused = fusion.fuse(e_f, e_woes, e_wes)
    expected = ad.layer_norm(e_f, axis=-1)
    assert np.allclose(fused.data, expected.data, atol=1e-15)
    e_multi = ad.concat([fusion.proj_woes[0](e_woes), fusion.proj_wes[0](e_wes)], axis=0)
    aligned = ad.layer_norm(ad.add(e_multi, fusion.self_attn[0](e_multi)), axis=-1)
    assert np.allclose(aligned.data, ad.layer_norm(e_multi, axis=-1).data, atol=1e-15)


def test_decode_plan_zero_heads(scenario):
    cfg = compact_config()
    model = fresh(cfg)
    fusion = model.fusion
    fusion.traj_head.weight.data[:] = 0.0
    fusion.traj_head.bias.data[:] = 0.0
    fusion.score_head.weight.data[:] = 0.0
    fusion.score_head.bias.data[:] = 0.0
    trajs, scores = fusion.decode_plan(Tensor(np.ones((cfg.n_mode, cfg.width))), 0)
    assert np.array_equal(trajs.data, np.zeros((cfg.n_mode, cfg.horizon_steps, 2)))
    assert np.array_equal(scores.data, np.zeros(cfg.n_mode))
    probs = np.exp(scores.data) / np.exp(scores.data).sum()
    assert np.allclose(probs, 1 / cfg.n_mode)
    assert int(np.argmax(scores.data)) == 0  # ties break to mode 0


def test_decode_prefix_sum_parameterization(rng):
    from dbplanner.autodiff import Linear
    from dbplanner.model import DISPLACEMENT_SCALE
    head = Linear(4, 12, np.random.default_rng(0), zero_init=True)
    d = np.array([0.4, -0.2])
    head.bias.data = np.tile(d / DISPLACEMENT_SCALE, 6)
    wps = _decode_waypoints_multi(Tensor(np.zeros((2, 4))), head, 6)
    for k in range(6):
        assert np.allclose(wps.data[:, k], (k + 1) * d, atol=1e-12)


# -- forward_full flags ---------------------------------------------------------------

def test_single_branch_baseline_is_ego_sensitive(scenario):
    cfg = compact_config(dual_branch=False, distill=False, scene_aware_init=False,
                         autoregressive_map=False)
    model = fresh(cfg)
    out_a = model.forward(scenario.obs, scenario.ego_status, scenario.command)
    perturbed = perturb_ego(scenario.ego_status, "x0.0")
    out_b = model.forward(scenario.obs, perturbed, scenario.command)
    assert out_a.b_wes is None and out_a.e_fusion is None
    assert not np.array_equal(out_a.trajectories.data, out_b.trajectories.data)


def test_full_model_runs_all_losses(scenario):
    cfg = compact_config()
    model = fresh(cfg)
    out = model.forward(scenario.obs, scenario.ego_status, scenario.command)
    parts = scenario_losses(out, scenario, LossWeights(), cfg)
    assert all(np.isfinite(p.item() if isinstance(p, Tensor) else p)
               for p in parts.values())
    assert isinstance(parts["distill"], Tensor)
    assert isinstance(parts["autoreg"], Tensor)


def test_scene_only_eval_is_ego_invariant(scenario):
    model = fresh(compact_config())
    plans = []
    for mode in ("none", "x0.0", "x0.5", "x1.5", "abs100"):
        ego = perturb_ego(scenario.ego_status, mode)
        out = model.forward(scenario.obs, ego, scenario.command, scene_only=True)
        plans.append(out.trajectories.data[out.selected_index])
        assert out.b_wes is None
        assert np.array_equal(out.e_wes.data, np.zeros_like(out.e_wes.data))
    for p in plans[1:]:
        assert np.array_equal(p, plans[0])


def test_inconsistent_flags_rejected():
    with pytest.raises(ConfigError):
        compact_config(dual_branch=False, distill=True)
    with pytest.raises(ConfigError):
        compact_config(dual_branch=True, ego_enhancement=False)


def test_horizon_must_be_three_seconds():
    with pytest.raises(ConfigError):
        compact_config(horizon_steps=4)


def test_config_roundtrip_through_dict():
    cfg = compact_config(path_attention=False)
    again = ModelConfig.from_dict(cfg.to_dict())
    assert again == cfg


# -- gradient flow and stop-gradient --------------------------------------------------

def test_full_training_step_reaches_every_parameter(scenario):
    cfg = compact_config()
    model = fresh(cfg)
    out = model.forward(scenario.obs, scenario.ego_status, scenario.command)
    parts = scenario_losses(out, scenario, LossWeights(), cfg)
    loss = total_loss(parts, LossWeights())
    model.zero_grad()
    ad.backward(loss)
    for name, p in model.named_parameters():
        assert p.grad is not None, f"{name} received no gradient"
        assert np.isfinite(p.grad).all(), f"{name} gradient non-finite"


def test_distill_only_loss_leaves_teacher_untouched(scenario):
    cfg = compact_config()
    model = fresh(cfg)
    out = model.forward(scenario.obs, scenario.ego_status, scenario.command)
    rects = [a.rect for a in scenario.agents]
    loss = distill_total(out.b_woes, out.b_wes, rects, cfg.bev, LossWeights())
    model.zero_grad()
    ad.backward(loss)
    for name, p in model.teacher_parameters():
        assert p.grad is None or not p.grad.any(), name
    scene_grads = [p.grad for _, p in model.scene_encoder.named_parameters()]
    assert any(g is not None and g.any() for g in scene_grads)


def test_mode_scores_softmax_normalized(scenario):
    model = fresh(compact_config())
    out = model.forward(scenario.obs, scenario.ego_status, scenario.command)
    probs = np.exp(out.scores.data - out.scores.data.max())
    probs /= probs.sum()
    assert abs(probs.sum() - 1.0) < 1e-12


def test_training_step_updates_parameters(scenario):
    cfg = compact_config()
    model = fresh(cfg)
    opt = AdamW(list(model.named_parameters()), lr=1e-3)
    before = {n: p.data.copy() for n, p in model.named_parameters()}
    out = model.forward(scenario.obs, scenario.ego_status, scenario.command)
    loss = total_loss(scenario_losses(out, scenario, LossWeights(), cfg), LossWeights())
    ad.backward(loss)
    opt.step()
    changed = [n for n, p in model.named_parameters()
               if not np.array_equal(before[n], p.data)]
    assert changed
