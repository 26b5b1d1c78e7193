import math

import numpy as np
import pytest

from nco_scaling.instances import build_dataset
from nco_scaling.model import ConstructionState, Model, ModelConfig, ModelParams, load_checkpoint
from nco_scaling.training import (
    DataExhausted, NumericalError, OptimizerState, TrainConfig, adamw_update, batch_from_states,
    batch_indices, decays, load_training_state, loss, lr_at, make_batch, run_training,
    sample_partial, train_step,
)


@pytest.fixture(scope="module")
def small_ds():
    return build_dataset("uniform", 8, 256, 21, "heldkarp")


def test_table10_defaults():
    cfg = TrainConfig()
    assert (cfg.batch_size, cfg.total_steps, cfg.lr0, cfg.decay_gamma, cfg.decay_every, cfg.weight_decay) == (
        1024, 60000, 1.25e-4, 0.997, 100, 0.01)
    assert (cfg.beta1, cfg.beta2, cfg.eps) == (0.9, 0.999, 1e-8)
    desk = TrainConfig.desk()
    assert desk.batch_size == 64 and desk.total_steps == 5000
    assert TrainConfig.from_dict(desk.to_dict()) == desk


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr0=0)
    with pytest.raises(ValueError):
        TrainConfig(decay_gamma=1.5)
    with pytest.raises(ValueError):
        TrainConfig(mode="forever")


def test_lr_schedule():
    assert lr_at(0) == 1.25e-4
    assert lr_at(99) == 1.25e-4
    assert lr_at(100) == 1.25e-4 * 0.997
    with pytest.raises(ValueError):
        lr_at(-1)


def test_sample_partial_contract(rng):
    tour = rng.permutation(12)
    for _ in range(200):
        st, target = sample_partial(tour, rng)
        assert not st.visited[target]
        assert st.visited[st.start] and st.visited[st.current]
        assert st.visited.sum() == st.t + 1
        # target follows current along the cycle in one of the two directions
        pos = {int(v): i for i, v in enumerate(tour)}
        step = (pos[target] - pos[st.current]) % 12
        assert step in (1, 11)


def test_sample_partial_full_length_forces_last_node(rng):
    tour = np.arange(7)
    st, target = sample_partial(tour, rng, length=7)
    assert list(st.available()) == [target]


def test_sample_partial_coverage_and_lengths(rng):
    tour = rng.permutation(9)
    targets, lengths = np.zeros(9, int), set()
    for _ in range(10_000):
        st, target = sample_partial(tour, rng)
        targets[target] += 1
        lengths.add(st.t + 2)
    assert np.all(targets > 0)
    assert lengths == set(range(4, 10))


def test_sample_partial_small_tour(rng):
    with pytest.raises(ValueError):
        sample_partial(np.arange(4), rng)


def test_make_batch_targets_are_available(small_ds):
    rng = np.random.default_rng(0)
    for _ in range(20):
        b = make_batch(small_ds.coords[:16], small_ds.tours[:16], rng)
        a = b.avail_xy.shape[1]
        assert np.all((b.target_pos >= 0) & (b.target_pos < a))
        assert b.start_xy.shape == (16, 2) and b.current_xy.shape == (16, 2)


def test_loss_uniform_symmetric_is_log_k():
    model = Model.create(ModelConfig.tiny(), 6, seed=2)
    coords = np.array([[0.1, 0.2], [0.5, 0.5], [0.5, 0.5], [0.5, 0.5], [0.9, 0.1], [0.5, 0.5]])
    visited = np.array([True, False, False, False, True, False])
    st = ConstructionState(0, 4, visited, 1)
    batch = batch_from_states(coords, [st], [3])
    assert abs(loss(model.params, batch).item() - math.log(4)) < 1e-12


def test_loss_zero_when_target_certain():
    model = Model.create(ModelConfig.tiny(), 5, seed=0)
    coords = np.random.default_rng(0).random((5, 2))
    visited = np.array([True, True, True, True, False])
    st = ConstructionState(0, 3, visited, 3)
    assert loss(model.params, batch_from_states(coords, [st], [4])).item() == 0.0


def test_loss_rejects_masked_target():
    coords = np.zeros((5, 2))
    st = ConstructionState.initial(5)
    with pytest.raises(ValueError):
        batch_from_states(coords, [st], [0])


def test_loss_gradient(small_ds):
    from nco_scaling import autodiff as ad

    cfg = ModelConfig(2, 16, 2, 8, 64)
    params = ModelParams.init(cfg, 3)
    for name, t in params:
        if name.endswith(("alpha1", "alpha2")):
            t.values = np.asarray(0.5)
    batch = make_batch(small_ds.coords[:6], small_ds.tours[:6], np.random.default_rng(1))
    rng = np.random.default_rng(2)
    for name in ("layers.0.q.W", "layers.1.ffn1.W", "embed_all.W", "layers.1.alpha2", "head.b"):
        t = params[name]

        def f(x, name=name):
            saved = params.tensors[name]
            params.tensors[name] = x
            try:
                return loss(params, batch)
            finally:
                params.tensors[name] = saved

        idx = rng.choice(t.values.size, size=min(4, t.values.size), replace=False)
        assert ad.finite_difference_check(f, t, coords=idx) < 1e-4


def test_decay_selection():
    assert decays("layers.0.q.W") and decays("head.W")
    assert not decays("layers.0.q.b") and not decays("layers.0.alpha1")


def test_adamw_matches_torch(rng):
    torch = pytest.importorskip("torch")
    cfg = ModelConfig(1, 8, 2, 4, 16)
    params = ModelParams.init(cfg, 5)
    tcfg = TrainConfig(weight_decay=0.05)
    tp = {k: torch.tensor(t.values.copy(), dtype=torch.float64, requires_grad=True) for k, t in params}
    groups = [{"params": [tp[k] for k in tp if decays(k)], "weight_decay": 0.05},
              {"params": [tp[k] for k in tp if not decays(k)], "weight_decay": 0.0}]
    opt_t = torch.optim.AdamW(groups, lr=1e-2, betas=(0.9, 0.999), eps=1e-8)
    opt = OptimizerState.zeros(params)
    for _ in range(5):
        grads = {k: rng.normal(size=t.values.shape) for k, t in params}
        for k, t in params:
            t.grad = grads[k]
            tp[k].grad = torch.tensor(grads[k])
        adamw_update(params, opt, tcfg, 1e-2)
        opt_t.step()
    for k, t in params:
        np.testing.assert_allclose(t.values, tp[k].detach().numpy(), rtol=1e-12, atol=1e-14)
    assert opt.step == 5


def test_zero_grad_no_decay_is_fixed_point():
    params = ModelParams.init(ModelConfig.tiny(), 0)
    before = params.flat().copy()
    adamw_update(params, OptimizerState.zeros(params), TrainConfig(weight_decay=0.0), 1e-2)
    assert np.array_equal(params.flat(), before)


def test_grad_clip_limits_update():
    params = ModelParams.init(ModelConfig.tiny(), 0)
    for _, t in params:
        t.grad = np.full(t.values.shape, 1e6)
    opt = OptimizerState.zeros(params)
    adamw_update(params, opt, TrainConfig(grad_clip=1.0, weight_decay=0.0), 1e-3)
    # first moment after one step is (1 - beta1) * clipped grad
    norm = math.sqrt(sum(float(((m / 0.1) ** 2).sum()) for m in opt.m.values()))
    assert abs(norm - 1.0) < 1e-9


def test_every_parameter_moves(small_ds):
    # with alpha = 0 the sublayers get no gradient on the first step, so take a few
    from nco_scaling import autodiff as ad

    model = Model.create(ModelConfig.tiny(), 8, seed=0)
    before = {k: t.values.copy() for k, t in model.params}
    opt = OptimizerState.zeros(model.params)
    rng = np.random.default_rng(0)
    for _ in range(3):
        batch = make_batch(small_ds.coords[:32], small_ds.tours[:32], rng, length=5)
        model.params.zero_grad()
        ad.backward(loss(model.params, batch))
        # the head bias shifts every candidate logit equally, so softmax cancels it
        assert np.abs(model.params["head.b"].grad).max() < 1e-12
        train_step(model, opt, batch, TrainConfig.desk())
    assert opt.step == 3
    for k, t in model.params:
        if k != "head.b":
            assert not np.array_equal(t.values, before[k]), k


def test_forced_step_has_zero_loss(small_ds):
    batch = make_batch(small_ds.coords[:8], small_ds.tours[:8], np.random.default_rng(0), length=8)
    assert batch.avail_xy.shape[1] == 1
    assert loss(Model.create(ModelConfig.tiny(), 8).params, batch).item() == 0.0


def test_train_step_non_finite_loss_aborts(small_ds):
    model = Model.create(ModelConfig.tiny(), 8, seed=0)
    model.params["head.W"].values = np.full_like(model.params["head.W"].values, np.nan)
    batch = make_batch(small_ds.coords[:4], small_ds.tours[:4], np.random.default_rng(0))
    with pytest.raises(NumericalError):
        train_step(model, OptimizerState.zeros(model.params), batch, TrainConfig.desk())


def test_single_pass_indices_and_exhaustion():
    cfg = TrainConfig(batch_size=4, total_steps=3)
    seen = np.concatenate([batch_indices(cfg, 12, s) for s in range(3)])
    assert sorted(seen) == list(range(12))
    with pytest.raises(DataExhausted):
        batch_indices(cfg, 11, 2)


def test_epoch_mode_permutes_each_epoch():
    cfg = TrainConfig(batch_size=4, mode="epochs", epochs=2)
    e0 = np.concatenate([batch_indices(cfg, 12, s) for s in range(3)])
    e1 = np.concatenate([batch_indices(cfg, 12, s) for s in range(3, 6)])
    assert sorted(e0) == sorted(e1) == list(range(12))
    assert cfg.steps_for(12) == 6


def test_run_training_requires_enough_data(small_ds):
    cfg = TrainConfig.desk(batch_size=64, total_steps=5)
    with pytest.raises(DataExhausted):
        run_training(cfg, small_ds, Model.create(ModelConfig.tiny(), 8))


def test_training_deterministic_and_outputs(small_ds, tmp_path):
    cfg = TrainConfig.desk(batch_size=16, total_steps=10)
    a = run_training(cfg, small_ds, Model.create(ModelConfig.tiny(), 8, seed=1), tmp_path / "a")
    b = run_training(cfg, small_ds, Model.create(ModelConfig.tiny(), 8, seed=1), tmp_path / "b", threads=3)
    assert np.array_equal(a.model.params.flat(), b.model.params.flat())
    for name in ("final.ckpt", "final_state.ckpt", "loss.csv", "train_config.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    lines = (tmp_path / "a" / "loss.csv").read_text().splitlines()
    assert lines[0] == "step,lr,loss" and len(lines) == 11
    assert load_checkpoint(tmp_path / "a" / "final.ckpt").config == ModelConfig.tiny()


def test_resume_is_bit_exact(small_ds, tmp_path):
    ds = build_dataset("uniform", 8, 64, 3, "heldkarp")
    cfg = TrainConfig.desk(batch_size=16, total_steps=200, mode="epochs", epochs=50, checkpoint_every=100)
    full = run_training(cfg, ds, Model.create(ModelConfig.tiny(), 8, seed=2), tmp_path / "full")
    model, opt, saved = load_training_state(tmp_path / "full" / "step_000100.ckpt")
    assert opt.step == 100 and saved == cfg
    resumed = run_training(saved, ds, model, tmp_path / "resumed", opt=opt)
    assert np.array_equal(resumed.model.params.flat(), full.model.params.flat())
    assert [c[2] for c in resumed.curve] == [c[2] for c in full.curve[100:]]


@pytest.mark.slow
def test_loss_drops_on_small_dataset():
    ds = build_dataset("uniform", 10, 2000, 8, "heldkarp")
    cfg = TrainConfig.desk(total_steps=500, mode="epochs", epochs=16)
    res = run_training(cfg, ds, Model.create(ModelConfig.tiny(), 10, seed=0), stop_at=500)
    losses = np.array([c[2] for c in res.curve])
    early = losses[5:16].mean()
    late = losses[-11:].mean()
    assert late < 0.7 * early
