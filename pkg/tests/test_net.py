import timeit

import numpy as np
import pytest

from embens.blob import BlobFormatError, load_params, save_params
from embens.net import (DivergenceError, EnsembleParams, Grads, LLDGrads, accuracy, check_lld,
                        forward, forward_batch, grads, init_params, lld_fused_inference,
                        lld_fused_train_loss, lld_sgd_step, loss_and_grads, per_model_loss,
                        sgd_step, train)
from embens.numerics import Seed
from embens.specs import ArchSpec, LayerSpec, ModulationSpec, TrainConfig, gamma_value

from oracles import fd_grads, loop_forward, random_arch, random_batch, relative_errors

G01 = ModulationSpec.gaussian(0.0, 1.0)


def small_arch(**kw):
    base = dict(input_dim=3, widths=[5, 4], output_dim=2, pre=G01, post=G01, n_models=3)
    base.update(kw)
    return ArchSpec.uniform(base.pop("input_dim"), base.pop("widths"), base.pop("output_dim"),
                            **base)


# ---------------------------------------------------------------------------
# specs


def test_modulation_spec_validation():
    with pytest.raises(ValueError):
        ModulationSpec.gaussian(0.0, -1.0)
    with pytest.raises(ValueError):
        ModulationSpec.discrete([0, 1], [0.3, 0.3])
    with pytest.raises(ValueError):
        ModulationSpec.discrete([0, 1], [1.2, -0.2])
    with pytest.raises(ValueError):
        ModulationSpec("uniform")
    assert ModulationSpec.shifted(1.0).is_constant
    assert ModulationSpec.discrete([2, 3], [1.0, 0.0]).is_constant


def test_arch_and_train_config_validation():
    with pytest.raises(ValueError):
        ArchSpec(2, (), 1)
    with pytest.raises(ValueError):
        ArchSpec.uniform(2, [3], activation="tanh")
    with pytest.raises(ValueError):
        ArchSpec.uniform(2, [3], n_models=0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(eta_w=-1)
    with pytest.raises(ValueError):
        TrainConfig(gamma_mode="half")
    assert gamma_value("one", 7) == 1.0
    assert gamma_value("m", 7) == 7.0
    assert gamma_value(2.5, 7) == 2.5


def test_arch_dict_round_trip():
    arch = ArchSpec((2), (LayerSpec(4, ModulationSpec.shifted(0.3), None),
                          LayerSpec(3, None, ModulationSpec.discrete([0, 2], [0.5, 0.5]))),
                    2, "erf", "standard", 5, input_mod=ModulationSpec.gaussian(1, 0.1))
    assert ArchSpec.from_dict(arch.to_dict()) == arch


# ---------------------------------------------------------------------------
# init


def test_init_deterministic_mods_are_ones():
    arch = ArchSpec.uniform(3, [6, 6], 2, n_models=4)
    p = init_params(arch, Seed(0))
    for u, v in zip(p.u, p.v):
        np.testing.assert_array_equal(u, np.ones((4, 6)))
        np.testing.assert_array_equal(v, np.ones((4, 6)))


def test_init_same_seed_bit_identical():
    arch = small_arch()
    a, b = init_params(arch, Seed(5)), init_params(arch, Seed(5))
    for k, x in a.arrays().items():
        np.testing.assert_array_equal(x, b.arrays()[k])
    c = init_params(arch, Seed(6))
    assert not np.array_equal(a.W[0], c.W[0])


def test_init_gaussian_mods_mean():
    arch = ArchSpec.uniform(2, [10_000], 1, post=G01, n_models=2)
    u = init_params(arch, Seed(1)).u[0]
    for row in u:
        assert abs(row.mean()) < 4 / np.sqrt(10_000)


def test_init_weight_scales():
    ntk = init_params(ArchSpec.uniform(400, [300], 1), Seed(2))
    std = init_params(ArchSpec.uniform(400, [300], 1, parametrization="standard"), Seed(2))
    assert ntk.W[0].var() == pytest.approx(1.0, rel=0.02)
    assert std.W[0].var() == pytest.approx(1 / 400, rel=0.02)


def test_shared_weights_independent_of_model_count():
    a = init_params(small_arch(n_models=1), Seed(3))
    b = init_params(small_arch(n_models=4), Seed(3))
    for wa, wb in zip(a.W, b.W):
        np.testing.assert_array_equal(wa, wb)
    np.testing.assert_array_equal(a.u[0], b.u[0][:1])


# ---------------------------------------------------------------------------
# forward


def test_forward_zero_weights():
    arch = small_arch()
    p = init_params(arch, Seed(0))
    p.W = [np.zeros_like(w) for w in p.W]
    np.testing.assert_array_equal(forward(p, arch, np.ones(3)), 0.0)


def test_forward_hand_computation():
    arch = ArchSpec.uniform(2, [1], 1)
    p = EnsembleParams(W=[np.ones((2, 1)), np.ones((1, 1))], u=[np.array([[2.0]])],
                       v=[np.array([[0.5]])], u_in=np.ones((1, 2)), v_out=np.ones((1, 1)))
    assert forward(p, arch, np.array([1.0, 1.0]))[0, 0] == pytest.approx(np.sqrt(2), abs=1e-15)


def test_forward_identity_models_agree():
    arch = ArchSpec.uniform(3, [5, 5], 2, activation="identity", n_models=4)
    p = init_params(arch, Seed(1))
    out = forward_batch(p, arch, np.random.default_rng(0).standard_normal((6, 3)))
    for a in range(1, 4):
        np.testing.assert_array_equal(out[a], out[0])


@pytest.mark.parametrize("seed", range(5))
def test_forward_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    arch = random_arch(rng, max_width=6)
    p = init_params(arch, Seed(seed))
    X = rng.standard_normal((3, arch.input_dim))
    out = forward_batch(p, arch, X)
    for b in range(3):
        np.testing.assert_allclose(out[:, b], loop_forward(p, arch, X[b]), rtol=1e-12, atol=1e-13)


def test_forward_dimension_errors():
    arch = small_arch()
    p = init_params(arch, Seed(0))
    with pytest.raises(ValueError):
        forward(p, arch, np.ones(4))
    with pytest.raises(ValueError):
        forward(p, arch, np.ones((2, 3)))
    with pytest.raises(ValueError):
        forward_batch(p, arch, np.ones((2, 5)))


# ---------------------------------------------------------------------------
# losses


def test_mse_perfect_fit_zero():
    arch = small_arch()
    p = init_params(arch, Seed(0))
    X = np.random.default_rng(0).standard_normal((4, 3))
    y = forward_batch(p, arch, X)[0]
    p1 = EnsembleParams(p.W, [u[:1] for u in p.u], [v[:1] for v in p.v], p.u_in[:1], p.v_out[:1])
    assert per_model_loss(p1, arch.with_models(1), (X, y), "mse")[0] == 0.0
    g = grads(p1, arch.with_models(1), (X, y), "mse")
    assert all(np.all(gw == 0) for gw in g.W)
    assert all(np.all(gu == 0) for _, gu in g.modulation_items())


def test_ce_uniform_softmax_is_log_c():
    arch = small_arch()
    p = init_params(arch, Seed(0))
    p.W[-1] = np.zeros_like(p.W[-1])
    losses = per_model_loss(p, arch, (np.ones((5, 3)), np.array([0, 1, 0, 1, 1])), "cross_entropy")
    np.testing.assert_allclose(losses, np.log(2), rtol=1e-14)


@pytest.mark.parametrize("loss_kind", ["mse", "cross_entropy"])
def test_per_model_loss_matches_loop(loss_kind):
    rng = np.random.default_rng(11)
    arch = random_arch(rng, max_width=6)
    p = init_params(arch, Seed(1))
    X, y = random_batch(rng, arch, 4, loss_kind)
    got = per_model_loss(p, arch, (X, y), loss_kind)
    ref = np.zeros(arch.n_models)
    for b in range(4):
        f = loop_forward(p, arch, X[b])
        for a in range(arch.n_models):
            if loss_kind == "mse":
                ref[a] += 0.5 * sum((f[a, c] - y[b, c]) ** 2 for c in range(arch.output_dim)) / 4
            else:
                ref[a] += (np.log(sum(np.exp(f[a, c]) for c in range(arch.output_dim)))
                           - f[a, y[b]]) / 4
    np.testing.assert_allclose(got, ref, rtol=1e-12, atol=1e-15)


def test_loss_rejects_bad_targets():
    arch = small_arch()
    p = init_params(arch, Seed(0))
    with pytest.raises(ValueError):
        per_model_loss(p, arch, (np.ones((2, 3)), np.array([0, 2])), "cross_entropy")
    with pytest.raises(ValueError):
        per_model_loss(p, arch, (np.ones((2, 3)), np.ones((2, 3))), "mse")
    with pytest.raises(ValueError):
        per_model_loss(p, arch, (np.ones((0, 3)), np.ones((0, 2))), "mse")


# ---------------------------------------------------------------------------
# gradients


@pytest.mark.parametrize("case", range(8))
def test_gradients_match_finite_differences(case):
    rng = np.random.default_rng(100 + case)
    arch = random_arch(rng)
    loss_kind = ("mse", "cross_entropy")[case % 2]
    p = init_params(arch, Seed(case))
    batch = random_batch(rng, arch, 3, loss_kind)
    g = grads(p, arch, batch, loss_kind)
    assert relative_errors(fd_grads(p, arch, g, batch, loss_kind)).max() < 1e-5


def test_mc_dropout_has_no_modulation_grads():
    mask = ModulationSpec.discrete([0.0, 2.0], [0.5, 0.5])
    arch = ArchSpec.uniform(3, [6, 6], 2, post=mask, n_models=3)
    p = init_params(arch, Seed(0))
    g = grads(p, arch, (np.ones((2, 3)), np.array([0, 1])), "cross_entropy")
    assert list(g.modulation_items()) == []


def test_model_permutation_equivariance():
    arch = small_arch(n_models=4)
    p = init_params(arch, Seed(4))
    rng = np.random.default_rng(0)
    batch = (rng.standard_normal((5, 3)), rng.integers(2, size=5))
    perm = np.array([2, 0, 3, 1])
    q = EnsembleParams(p.W, [u[perm] for u in p.u], [v[perm] for v in p.v], p.u_in[perm],
                       p.v_out[perm])
    lp, gp = loss_and_grads(p, arch, batch, "cross_entropy")
    lq, gq = loss_and_grads(q, arch, batch, "cross_entropy")
    np.testing.assert_allclose(lq, lp[perm], rtol=1e-13)
    np.testing.assert_allclose(forward_batch(q, arch, batch[0]),
                               forward_batch(p, arch, batch[0])[perm], rtol=1e-13)
    for k in gp.u:
        np.testing.assert_allclose(gq.u[k], gp.u[k][perm], rtol=1e-13)
    for a, b in zip(gp.W, gq.W):
        np.testing.assert_allclose(a.sum(axis=0), b.sum(axis=0), rtol=1e-12, atol=1e-14)


# ---------------------------------------------------------------------------
# sgd


def _fake_grads(p, fill):
    return Grads([np.full((p.n_models,) + w.shape, fill) for w in p.W],
                 u={0: np.full(p.u[0].shape, fill)})


def test_sgd_zero_grads_noop():
    arch = small_arch()
    p = init_params(arch, Seed(0))
    new = sgd_step(p, _fake_grads(p, 0.0), TrainConfig(eta_w=0.3))
    for k, x in p.arrays().items():
        np.testing.assert_array_equal(new.arrays()[k], x)


@pytest.mark.parametrize("mode, factor", [("m", 1.0), ("one", 0.5)])
def test_sgd_gamma_scaling(mode, factor):
    arch = small_arch(n_models=2)
    p = init_params(arch, Seed(0))
    g = _fake_grads(p, 0.0)
    g.W[0][0] = 1.0
    g.W[0][1] = 3.0
    new = sgd_step(p, g, TrainConfig(eta_w=0.1, eta_u=0.2, gamma_mode=mode))
    np.testing.assert_allclose(new.W[0], p.W[0] - 0.1 * factor * 4.0, rtol=1e-15)
    g.u[0][:] = 1.0
    new = sgd_step(p, g, TrainConfig(eta_w=0.1, eta_u=0.2, gamma_mode=mode))
    np.testing.assert_allclose(new.u[0], p.u[0] - 0.2, rtol=1e-15)


def test_untrainable_mods_unchanged_by_training():
    mask = ModulationSpec.discrete([0.0, 2.0], [0.5, 0.5])
    arch = ArchSpec.uniform(3, [8, 8], 2, post=mask, pre=ModulationSpec.gaussian(1, 0.2, False),
                            n_models=3)
    p0 = init_params(arch, Seed(1))
    rng = np.random.default_rng(0)
    data = (rng.standard_normal((20, 3)), rng.integers(2, size=20))
    res = train(p0, arch, data, TrainConfig(eta_w=0.2, epochs=3, batch_size=5), Seed(2))
    for a, b in zip(p0.u + p0.v, res.params.u + res.params.v):
        np.testing.assert_array_equal(a, b)
    assert not np.array_equal(p0.W[0], res.params.W[0])


def test_unmodulated_ensemble_matches_single_model_bit_equal():
    rng = np.random.default_rng(0)
    data = (rng.standard_normal((24, 3)), rng.integers(2, size=24))
    cfg = TrainConfig(eta_w=0.3, gamma_mode="one", epochs=3, batch_size=8)
    single = ArchSpec.uniform(3, [7, 5], 2, n_models=1)
    multi = single.with_models(4)
    r1 = train(init_params(single, Seed(9)), single, data, cfg, Seed(1))
    r4 = train(init_params(multi, Seed(9)), multi, data, cfg, Seed(1))
    for a, b in zip(r1.params.W, r4.params.W):
        np.testing.assert_array_equal(a, b)


# ---------------------------------------------------------------------------
# training loop


def test_zero_lr_history_constant():
    arch = small_arch()
    rng = np.random.default_rng(0)
    data = (rng.standard_normal((10, 3)), rng.integers(2, size=10))
    res = train(init_params(arch, Seed(0)), arch, data, TrainConfig(eta_w=0.0, epochs=3), Seed(0))
    for rec in res.history[1:]:
        np.testing.assert_array_equal(rec["loss"], res.history[0]["loss"])


def test_separable_toy_reaches_full_accuracy():
    rng = np.random.default_rng(3)
    x = np.concatenate([rng.uniform(-2, -0.2, 20), rng.uniform(0.2, 2, 20)])[:, None]
    y = (x[:, 0] > 0).astype(int)
    arch = ArchSpec.uniform(1, [16], 2)
    res = train(init_params(arch, Seed(0)), arch, (x, y),
                TrainConfig(eta_w=0.5, epochs=200, batch_size=8), Seed(0))
    assert res.history[-1]["acc"][0] == 1.0


def test_individual_accuracy_drops_with_m_independent_regime():
    rng = np.random.default_rng(1)
    n = 120
    X = rng.standard_normal((n, 2))
    y = ((X[:, 0] * X[:, 1]) > 0).astype(int)
    accs = []
    for m in (1, 4):
        arch = ArchSpec.uniform(2, [32], 2, post=G01, n_models=m)
        vals = []
        for s in range(3):
            res = train(init_params(arch, Seed(s)), arch, (X, y),
                        TrainConfig(eta_w=0.5, gamma_mode="m", epochs=30, batch_size=20), Seed(s))
            vals.append(res.history[-1]["acc"].mean())
        accs.append(np.mean(vals))
    assert accs[1] <= accs[0] + 0.02


def test_divergence_is_recorded():
    arch = ArchSpec.uniform(2, [16, 16], 1, activation="identity", n_models=2)
    rng = np.random.default_rng(0)
    data = (10 * rng.standard_normal((8, 2)), rng.standard_normal((8, 1)))
    with np.errstate(all="ignore"):
        res = train(init_params(arch, Seed(0)), arch, data,
                    TrainConfig(eta_w=50.0, epochs=50, loss_kind="mse", batch_size=8), Seed(0))
    assert res.diverged
    assert {"epoch", "step", "loss"} <= set(res.diagnostic)
    assert issubclass(DivergenceError, FloatingPointError)


def test_dropout_resample_changes_masks_and_is_deterministic():
    mask = ModulationSpec.discrete([0.0, 2.0], [0.5, 0.5])
    arch = ArchSpec.uniform(2, [16], 2, post=mask, n_models=2)
    rng = np.random.default_rng(0)
    data = (rng.standard_normal((16, 2)), rng.integers(2, size=16))
    cfg = TrainConfig(eta_w=0.1, epochs=2, batch_size=4, dropout_resample=True)
    p0 = init_params(arch, Seed(0))
    a = train(p0, arch, data, cfg, Seed(1))
    b = train(p0, arch, data, cfg, Seed(1))
    np.testing.assert_array_equal(a.params.u[0], b.params.u[0])
    assert not np.array_equal(a.params.u[0], p0.u[0])
    assert set(np.unique(a.params.u[0])) <= {0.0, 2.0}


def test_accuracy_regression_is_nan():
    assert np.isnan(accuracy(np.zeros((2, 3, 1)), np.zeros(3), "mse")).all()


# ---------------------------------------------------------------------------
# last-layer dropout


def lld_arch(m, depth=2, width=12, c=3, act="relu", trainable=False):
    mask = ModulationSpec.discrete([0.0, 2.0], [0.5, 0.5], trainable=trainable)
    layers = [LayerSpec(width) for _ in range(depth - 1)] + [LayerSpec(width, None, mask)]
    return ArchSpec(4, tuple(layers), c, act, n_models=m)


@pytest.mark.parametrize("seed", range(4))
def test_lld_inference_equals_model_mean(seed):
    arch = lld_arch(8, depth=1 + seed % 3)
    p = init_params(arch, Seed(seed))
    X = np.random.default_rng(seed).standard_normal((5, 4))
    np.testing.assert_allclose(lld_fused_inference(p, arch, X),
                               forward_batch(p, arch, X).mean(axis=0), rtol=1e-12, atol=1e-12)


def test_lld_single_model_and_unmasked():
    arch = lld_arch(1)
    p = init_params(arch, Seed(0))
    x = np.ones(4)
    np.testing.assert_allclose(lld_fused_inference(p, arch, x), forward(p, arch, x)[0], rtol=1e-13)
    plain = ArchSpec.uniform(4, [12, 12], 3, n_models=5)
    q = init_params(plain, Seed(0))
    np.testing.assert_allclose(lld_fused_inference(q, plain, x), forward(q, plain, x)[0],
                               rtol=1e-13)


def test_lld_rejects_other_modulations():
    with pytest.raises(ValueError):
        check_lld(small_arch())
    with pytest.raises(ValueError):
        lld_fused_inference(init_params(small_arch(), Seed(0)), small_arch(), np.ones(3))


@pytest.mark.parametrize("loss_kind, gamma", [("cross_entropy", "m"), ("mse", "one")])
def test_lld_train_loss_and_step_match_per_model_path(loss_kind, gamma):
    arch = lld_arch(6, trainable=True)
    p = init_params(arch, Seed(2))
    rng = np.random.default_rng(0)
    batch = random_batch(rng, arch, 7, loss_kind)
    cfg = TrainConfig(eta_w=0.1, eta_u=0.05, gamma_mode=gamma, loss_kind=loss_kind)
    total, lg = lld_fused_train_loss(p, arch, batch, cfg)
    losses, g = loss_and_grads(p, arch, batch, loss_kind)
    coef = gamma_value(gamma, 6) / 6
    assert total == pytest.approx(coef * losses.sum(), rel=1e-12)
    for a, b in zip(lg.W, g.W):
        np.testing.assert_allclose(a, coef * b.sum(axis=0), rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(lg.u_last, g.u[arch.depth - 1], rtol=1e-12, atol=1e-14)
    fused = lld_sgd_step(p, lg, cfg)
    ref = sgd_step(p, g, cfg)
    for k, x in ref.arrays().items():
        np.testing.assert_allclose(fused.arrays()[k], x, rtol=1e-12, atol=1e-14)


def test_lld_train_grad_finite_differences():
    arch = lld_arch(3, width=6, act="sigmoid")
    p = init_params(arch, Seed(1))
    batch = random_batch(np.random.default_rng(1), arch, 4, "cross_entropy")
    cfg = TrainConfig(gamma_mode="one")
    _, lg = lld_fused_train_loss(p, arch, batch, cfg)
    h = 1e-5
    pairs = []
    for l, W in enumerate(p.W):
        for idx in np.ndindex(W.shape):
            q = p.copy()
            q.W[l][idx] += h
            lp = lld_fused_train_loss(q, arch, batch, cfg)[0]
            q.W[l][idx] -= 2 * h
            lm = lld_fused_train_loss(q, arch, batch, cfg)[0]
            pairs.append((lg.W[l][idx], (lp - lm) / (2 * h)))
    assert relative_errors(np.array(pairs)).max() < 1e-5
    assert isinstance(lg, LLDGrads)


def test_lld_fused_cost_nearly_independent_of_m():
    # wide feature layers dominate; the per-model work is one narrow product
    rng = np.random.default_rng(0)
    batch = (rng.standard_normal((128, 64)), rng.integers(2, size=128))
    cfg = TrainConfig()
    mask = ModulationSpec.discrete([0.0, 2.0], [0.5, 0.5])
    calls = {}
    for m in (1, 50):
        arch = ArchSpec(64, (LayerSpec(512), LayerSpec(512), LayerSpec(512, None, mask)), 2,
                        n_models=m)
        p = init_params(arch, Seed(0))
        calls[m] = (lambda p=p, arch=arch: lld_fused_train_loss(p, arch, batch, cfg))
    # interleave the two sizes so machine-load drift hits both equally
    cost = {1: np.inf, 50: np.inf}
    for _ in range(15):
        for m, f in calls.items():
            cost[m] = min(cost[m], timeit.timeit(f, number=5))
    assert cost[50] <= 1.3 * cost[1], cost


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip(tmp_path):
    arch = ArchSpec((3), (LayerSpec(5, G01, ModulationSpec.shifted(0.4)),), 2, "erf",
                    n_models=3, output_mod=ModulationSpec.gaussian(1, 0.1))
    p = init_params(arch, Seed(4))
    save_params(tmp_path / "p.bin", p, arch, seed=4)
    q, arch2, meta = load_params(tmp_path / "p.bin")
    assert arch2 == arch
    assert meta["seed"] == 4
    for k, x in p.arrays().items():
        np.testing.assert_array_equal(q.arrays()[k], x)


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "bad.bin").write_bytes(b"not a blob at all")
    with pytest.raises(BlobFormatError):
        load_params(tmp_path / "bad.bin")
