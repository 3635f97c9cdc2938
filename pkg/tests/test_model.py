import numpy as np
import pytest

from cpdistill import tensor as T
from cpdistill.model import (
    ExpansionConfig,
    GatingStats,
    MaskScheduleError,
    ModelConfig,
    SequenceLengthError,
    StudentModel,
    apply_mask_schedule,
    aux_loss,
    expand_experts,
    moe_route,
)
from cpdistill.optim import eval_with_gradients, finite_difference_grads
from cpdistill.tensor import Tensor


def tiny_config(**over):
    base = dict(
        obs_dim=3,
        action_dim=2,
        hidden_dim=8,
        depth=1,
        experts_per_layer=2,
        mlp_multiplier=2,
        top_k=1,
        seq_len=4,
        task_embed_dim=4,
        n_heads=2,
        stats_chunks=2,
        encoder_hidden=4,
    )
    base.update(over)
    return ModelConfig(**base)


def probe(cfg, batch=3, t=None, seed=0):
    rng = np.random.default_rng(seed)
    t = t if t is not None else cfg.seq_len
    windows = rng.normal(size=(batch, t, cfg.obs_dim))
    z = rng.normal(size=(batch, cfg.task_embed_dim))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    return windows, z


def test_input_width_matches_benchmark_shape():
    assert ModelConfig(obs_dim=39, action_dim=4).input_width == 55
    assert ModelConfig(obs_dim=4, action_dim=2).input_width == 20


def test_embed_produces_one_token_per_state():
    cfg = tiny_config(seq_len=10)
    model = StudentModel(cfg, seed=1)
    windows, z = probe(cfg, batch=2, t=7)
    tokens = model.embed_input(windows, z)
    assert tokens.shape == (2, 7, cfg.hidden_dim)
    with pytest.raises(SequenceLengthError):
        model.embed_input(np.zeros((1, 11, cfg.obs_dim)), z[:1])


def test_config_validation():
    with pytest.raises(ValueError):
        tiny_config(top_k=3)  # exceeds 2 experts
    with pytest.raises(ValueError):
        tiny_config(hidden_dim=9)  # not divisible by heads
    with pytest.raises(ValueError):
        tiny_config(depth=0)


def test_paper_scale_defaults():
    cfg = ModelConfig(obs_dim=39, action_dim=4)
    assert (cfg.hidden_dim, cfg.depth, cfg.experts_per_layer) == (256, 5, 8)
    assert (cfg.mlp_multiplier, cfg.seq_len, cfg.task_embed_dim) == (4, 20, 16)
    assert cfg.causal and cfg.use_aux


def zero_sublayers(model):
    for name, g in model.params.items():
        if ".attn." in name or ".experts." in name or ".gate." in name:
            g.tensor.data = np.zeros_like(g.tensor.data)


def test_residual_identity_with_zero_sublayers():
    cfg = tiny_config(depth=2)
    model = StudentModel(cfg, seed=3)
    zero_sublayers(model)
    windows, z = probe(cfg, batch=2)
    h = model.embed_input(windows, z)
    out = h
    for l in range(cfg.depth):
        out, _ = model.block_forward(out, l)
    assert np.array_equal(out.data, h.data)


def test_causality_perturbation():
    cfg = tiny_config(depth=2, seq_len=6)
    model = StudentModel(cfg, seed=5)
    windows, z = probe(cfg, batch=1, t=6, seed=9)

    def tokens_out(w):
        h = model.embed_input(w, z)
        for l in range(cfg.depth):
            h, _ = model.block_forward(h, l)
        return h.data

    base = tokens_out(windows)
    for t_perturb in (2, 4):
        bumped = windows.copy()
        bumped[0, t_perturb, :] += 0.5
        changed = tokens_out(bumped)
        assert np.array_equal(changed[0, :t_perturb], base[0, :t_perturb])
        assert not np.allclose(changed[0, t_perturb:], base[0, t_perturb:])


def test_single_token_attention_is_value_projection():
    cfg = tiny_config()
    model = StudentModel(cfg, seed=7)
    x = Tensor(np.random.default_rng(0).normal(size=(1, 1, cfg.hidden_dim)))
    got = model._attention(x, 0)
    p = model._attn[0]
    expected = (x @ p["wv"].tensor + p["bv"].tensor) @ p["wo"].tensor + p["bo"].tensor
    assert np.allclose(got.data, expected.data, atol=1e-12)


def route_probe(n_experts, logits_row, k, d=4, tokens=1):
    """MoE layer whose gate reproduces the given logits for a zero token."""
    cfg = tiny_config(hidden_dim=d, experts_per_layer=n_experts, top_k=k, n_heads=2)
    model = StudentModel(cfg, seed=11)
    layer = model.layers[0]
    layer.gate_w.tensor.data = np.zeros((d, n_experts))
    layer.gate_b.tensor.data = np.asarray(logits_row, dtype=np.float64)
    x = Tensor(np.zeros((tokens, d)))
    return moe_route(x, layer, k)


def test_route_saturated_softmax():
    _, stats = route_probe(2, [10.0, -10.0], k=1)
    assert stats.loads.tolist() == [1.0, 0.0]
    assert abs(stats.importance.data[0] - 1.0) < 1e-8


def test_route_tie_breaks_low_index():
    _, stats = route_probe(2, [0.0, 0.0], k=1)
    assert stats.loads.tolist() == [1.0, 0.0]


def test_route_top2_renormalized_probabilities():
    _, stats = route_probe(2, [1.0, 0.0], k=2)
    p = stats.importance.data
    assert p[0] == pytest.approx(0.7311, abs=5e-5)
    assert p[1] == pytest.approx(0.2689, abs=5e-5)
    assert stats.loads.tolist() == [1.0, 1.0]


def test_route_load_invariant():
    cfg = tiny_config(hidden_dim=8, experts_per_layer=4, top_k=2)
    model = StudentModel(cfg, seed=13)
    x = Tensor(np.random.default_rng(1).normal(size=(10, 8)))
    _, stats = moe_route(x, model.layers[0], 2)
    assert stats.loads.sum() == 2 * 10


def test_aux_loss_values():
    uniform = GatingStats(loads=np.full(4, 5.0), importance=Tensor(np.full(4, 2.0)), tokens=20)
    assert aux_loss(uniform).item() == pytest.approx(0.0, abs=1e-12)

    skewed = GatingStats(loads=np.array([2.0, 0.0]), importance=Tensor(np.array([1.0, 0.0])), tokens=2)
    assert aux_loss(skewed, eps=1e-15).item() == pytest.approx(2.0, abs=1e-9)

    single = GatingStats(loads=np.array([7.0]), importance=Tensor(np.array([3.0])), tokens=7)
    assert aux_loss(single).item() == pytest.approx(0.0, abs=1e-12)


def test_aux_loss_zero_iff_uniform():
    rng = np.random.default_rng(2)
    for _ in range(20):
        loads = rng.integers(0, 5, size=4).astype(float)
        imp = rng.uniform(0.1, 2.0, size=4)
        stats = GatingStats(loads=loads, importance=Tensor(imp), tokens=int(loads.sum()))
        val = aux_loss(stats).item()
        if np.allclose(loads, loads.mean()) and np.allclose(imp, imp.mean()):
            assert val == pytest.approx(0.0, abs=1e-12)
        else:
            assert val > 0.0


def test_predict_action_contract():
    cfg = tiny_config()
    model = StudentModel(cfg, seed=17)
    windows, z = probe(cfg, batch=1)
    model.params["head.w"].tensor.data = np.zeros_like(model.params["head.w"].tensor.data)
    model.params["head.b"].tensor.data = np.zeros_like(model.params["head.b"].tensor.data)
    a = model.predict_action(windows[0], z[0])
    assert np.all(a == 0.0)

    cfg4 = tiny_config(action_dim=4)
    model4 = StudentModel(cfg4, seed=17)
    w4, z4 = probe(cfg4, batch=1)
    out = model4.predict_action(w4[0], z4[0])
    assert out.shape == (4,)
    assert np.array_equal(out, model4.predict_action(w4[0], z4[0]))
    with pytest.raises(SequenceLengthError):
        model4.predict_action(np.zeros((0, cfg4.obs_dim)), z4[0])


def test_expansion_preserves_actions_with_masked_gate():
    cfg = tiny_config(hidden_dim=8, depth=2, experts_per_layer=2)
    model = StudentModel(cfg, seed=19)
    windows, z = probe(cfg, batch=16, seed=3)
    before = model.predict_batch(windows, z)
    new = expand_experts(
        model,
        ExpansionConfig(experts_added=1, init_noise_std=0.0, cold_start_bias=-np.inf,
                        gate_col_noise_std=0.0),
        seed=7,
    )
    assert model.expert_counts == [3, 3]
    assert len(new) == 2 * 4
    after = model.predict_batch(windows, z)
    assert np.array_equal(before, after)


def test_expansion_small_perturbation_with_cold_start():
    cfg = tiny_config(hidden_dim=8, depth=2, experts_per_layer=2)
    model = StudentModel(cfg, seed=19)
    windows, z = probe(cfg, batch=32, seed=4)
    before = model.predict_batch(windows, z)
    expand_experts(model, ExpansionConfig(), seed=7)
    after = model.predict_batch(windows, z)
    assert np.max(np.abs(after - before)) < 1e-2


def test_expansion_counting_and_noop():
    cfg = tiny_config(depth=5)
    model = StudentModel(cfg, seed=23)
    total_before = sum(model.expert_counts)
    expand_experts(model, ExpansionConfig(experts_added=1), seed=1)
    assert sum(model.expert_counts) == total_before + 5
    same = expand_experts(model, ExpansionConfig(experts_added=0), seed=1)
    assert same == []
    with pytest.raises(ValueError):
        ExpansionConfig(cold_start_bias=0.5)


def test_expansion_cold_start_probability():
    # eight equal-logit experts plus one new expert biased to -5
    cfg = tiny_config(hidden_dim=8, experts_per_layer=8, n_heads=2)
    model = StudentModel(cfg, seed=29)
    layer = model.layers[0]
    layer.gate_w.tensor.data = np.zeros_like(layer.gate_w.tensor.data)
    layer.gate_b.tensor.data = np.zeros_like(layer.gate_b.tensor.data)
    expand_experts(
        model,
        ExpansionConfig(experts_added=1, init_noise_std=0.0, gate_col_noise_std=0.0),
        seed=31,
    )
    _, stats = moe_route(Tensor(np.zeros((1, 8))), layer, 1)
    p_new = stats.importance.data[-1]
    expected = np.exp(-5.0) / (8.0 + np.exp(-5.0))
    assert p_new == pytest.approx(expected, rel=1e-9)
    assert p_new == pytest.approx(8.42e-4, abs=5e-7)


def trainable_names(model):
    return {n for n, g in model.params.items() if g.trainable}


def test_mask_schedule():
    cfg = tiny_config(depth=2, experts_per_layer=2)
    model = StudentModel(cfg, seed=37)
    apply_mask_schedule(model, stage=1, phase=1)
    assert trainable_names(model) == set(model.params)

    expand_experts(model, ExpansionConfig(), seed=2)
    apply_mask_schedule(model, stage=2, phase=1)
    names = trainable_names(model)
    assert not any(".attn." in n or n.startswith(("embed.", "pos", "head.")) for n in names)
    assert not any(".ln" in n for n in names)
    assert "blocks.0.gate.w" in names
    assert "blocks.0.experts.2.w1" in names  # the new expert
    assert "blocks.0.experts.0.w1" not in names  # old expert frozen
    assert "taskenc.w1" in names

    apply_mask_schedule(model, stage=3, phase=2)
    names = trainable_names(model)
    assert "blocks.0.gate.w" not in names
    assert "blocks.0.experts.0.w1" in names and "blocks.0.experts.2.w1" in names
    assert not any(".attn." in n for n in names)

    with pytest.raises(MaskScheduleError):
        apply_mask_schedule(model, stage=1, phase=2)
    with pytest.raises(MaskScheduleError):
        apply_mask_schedule(model, stage=0, phase=1)
    with pytest.raises(MaskScheduleError):
        apply_mask_schedule(model, stage=2, phase=3)


def test_model_gradients_match_finite_differences():
    cfg = tiny_config()
    model = StudentModel(cfg, seed=41)
    windows, z = probe(cfg, batch=3, seed=6)
    targets = np.random.default_rng(8).normal(size=(3, cfg.action_dim))
    lam = 0.01

    def build():
        actions, aux, _ = model.forward(windows, z)
        diff = actions - Tensor(targets)
        mse_term = T.tmean(T.tsum(diff * diff, axis=1))
        return mse_term + Tensor(lam) * aux

    groups = [g for g in model.groups() if not g.name.startswith("taskenc.")]
    _, grads = eval_with_gradients(build, groups)
    fd = finite_difference_grads(build, groups)
    worst_name, worst = None, 0.0
    for name, f in fd.items():
        a = grads[name]
        err = np.abs(a - f) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(f)))
        if err.max() > worst:
            worst_name, worst = name, err.max()
    assert worst < 1e-4, f"worst gradient mismatch {worst} at {worst_name}"


def test_save_load_clone_round_trip(tmp_path):
    cfg = tiny_config(depth=2)
    model = StudentModel(cfg, seed=43)
    expand_experts(model, ExpansionConfig(), seed=3)
    apply_mask_schedule(model, stage=2, phase=1)
    model.save(tmp_path / "m", stage=2)
    restored, header = StudentModel.load(tmp_path / "m")
    assert header["stage"] == 2
    assert restored.expert_counts == model.expert_counts
    windows, z = probe(cfg, batch=4, seed=12)
    assert np.array_equal(model.predict_batch(windows, z), restored.predict_batch(windows, z))
    assert trainable_names(restored) == trainable_names(model)

    twin = model.clone()
    assert np.array_equal(model.predict_batch(windows, z), twin.predict_batch(windows, z))
    twin.params["head.w"].tensor.data += 1.0
    assert not np.array_equal(model.predict_batch(windows, z), twin.predict_batch(windows, z))
