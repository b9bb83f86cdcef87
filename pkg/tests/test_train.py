import math

import numpy as np
import pytest

from depthvla import checkpoint, train
from depthvla.model import Policy, checksum, module_of
from depthvla.tensor import Tensor
from depthvla.train import OptimConfig, OptimizerState, StageConfig, TrainingError

from conftest import tiny_model


def test_stage_definitions():
    s = [StageConfig(n, 5) for n in train.STAGE_NAMES]
    assert [st.trainable for st in s] == [
        {"SEM", "EXPERT"}, {"IDEM", "SEM", "EXPERT"}, {"VLB", "IDEM", "SEM", "EXPERT"}]
    with pytest.raises(ValueError):
        StageConfig("joint", 5, {"DECODER"})
    with pytest.raises(ValueError):
        StageConfig("joint", 0)


def test_pipeline_variants():
    assert [s.name for s in train.pipeline_stages(3, [1, 2, 3])] == list(train.STAGE_NAMES)
    one = train.pipeline_stages(1, [9])
    assert len(one) == 1 and one[0].trainable == train.ALL_MODULES
    two = train.pipeline_stages(2, [3, 6])
    assert [s.steps for s in two] == [3, 6]
    with pytest.raises(ValueError):
        train.pipeline_stages(4, [1, 1, 1, 1])


def test_lr_schedule():
    assert train.lr_at(0, 1000, 5000, 1e-5) == 0.0
    assert train.lr_at(1000, 1000, 5000, 1e-5) == pytest.approx(1e-5, abs=1e-15)
    assert train.lr_at(5000, 1000, 5000, 1e-5) == pytest.approx(0.0, abs=1e-20)
    below = 1e-5 * (1000 - 1e-9) / 1000
    assert abs(train.lr_at(1000, 1000, 5000, 1e-5) - below) < 1e-12
    assert all(train.lr_at(s, 100, 1000, 1e-3) >= 0 for s in range(1001))
    with pytest.raises(ValueError):
        train.lr_at(0, 100, 100, 1e-3)
    with pytest.raises(ValueError):
        train.lr_at(101, 10, 100, 1e-3)


def test_clip_examples():
    g, n = train.clip_grad_norm({"a": np.array([0.3, 0.4])}, 1.0)
    assert n == pytest.approx(0.5)
    np.testing.assert_array_equal(g["a"], [0.3, 0.4])
    g, n = train.clip_grad_norm({"a": np.array([3.0, 4.0])}, 1.0)
    assert n == pytest.approx(5.0)
    np.testing.assert_allclose(g["a"], [0.6, 0.8])


def test_clip_bounds_global_norm(rng):
    for _ in range(20):
        grads = {f"p{i}": rng.standard_normal(rng.integers(1, 6, 2)) * 10 for i in range(4)}
        clipped, _ = train.clip_grad_norm(grads, 1.0)
        assert train.global_norm(clipped) <= 1.0 + 1e-6


def test_clip_names_nan_parameter():
    with pytest.raises(TrainingError, match="bad"):
        train.clip_grad_norm({"ok": np.ones(2), "bad": np.array([np.nan])}, 1.0)


def _params(**arrays):
    return {k: Tensor(np.asarray(v, np.float32), grad_enabled=True) for k, v in arrays.items()}


def test_adamw_zero_grad_no_decay():
    p = _params(w=[1.0, -2.0])
    cfg = OptimConfig(weight_decay=0.0)
    train.adamw_step(p, {"w": np.zeros(2, np.float32)}, OptimizerState(), 0.1, cfg)
    np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])


def test_adamw_zero_lr_ignores_decay():
    p = _params(w=[1.0, -2.0])
    train.adamw_step(p, {"w": np.ones(2, np.float32)}, OptimizerState(), 0.0, OptimConfig(weight_decay=0.5))
    np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])


def test_adamw_descends_quadratic():
    p = _params(x=[3.0])
    before = float(p["x"].data[0] ** 2)
    train.adamw_step(p, {"x": 2 * p["x"].data}, OptimizerState(), 0.1, OptimConfig())
    assert float(p["x"].data[0] ** 2) < before


def test_adamw_first_step_magnitude():
    p = _params(x=[1.0])
    train.adamw_step(p, {"x": np.array([0.3], np.float32)}, OptimizerState(), 0.01,
                     OptimConfig(weight_decay=0.0))
    assert p["x"].data[0] == pytest.approx(1.0 - 0.01, rel=1e-5)


def test_adamw_decoupled_decay_skips_norms():
    p = _params(**{"l.w": [1.0], "l.b": [1.0], "ln.g": [1.0]})
    zero = {k: np.zeros(1, np.float32) for k in p}
    train.adamw_step(p, zero, OptimizerState(), 0.1, OptimConfig(weight_decay=0.5))
    assert p["l.w"].data[0] == pytest.approx(0.95)
    assert p["l.b"].data[0] == 1.0 and p["ln.g"].data[0] == 1.0


def test_adamw_shape_mismatch():
    with pytest.raises(ValueError):
        train.adamw_step(_params(w=[1.0]), {"w": np.zeros(2)}, OptimizerState(), 0.1, OptimConfig())


def test_data_stream_cycles_deterministically(tiny_data):
    a = train.DataStream(tiny_data, 10, 3)
    b = train.DataStream(tiny_data, 10, 3)
    seq_a = np.concatenate([a.next_indices() for _ in range(6)])
    seq_b = np.concatenate([b.next_indices() for _ in range(6)])
    np.testing.assert_array_equal(seq_a, seq_b)
    assert sorted(seq_a[:24]) == list(range(24))


def _policy(tiny_data, **kw):
    pol = Policy.init(tiny_model(**kw), 0)
    pol.set_action_stats(tiny_data.actions)
    return pol


def _by_module(policy, module):
    return {k: v for k, v in checksum(policy.params).items() if module_of(k) == module}


@pytest.mark.parametrize("name, frozen", [("initial_alignment", ("VLB", "IDEM")), ("spatial_alignment", ("VLB",))])
def test_freeze_contract(tiny_data, name, frozen):
    pol = _policy(tiny_data)
    before = {m: _by_module(pol, m) for m in train.ALL_MODULES}
    state, recs = train.run_stage(StageConfig(name, 6), pol, tiny_data, OptimConfig(batch_size=4, warmup_steps=2), 0)
    for m in train.ALL_MODULES:
        after = _by_module(pol, m)
        if m in frozen:
            assert after == before[m], m
        else:
            assert after != before[m], m
    allocated = {module_of(k) for k in state.m}
    assert allocated == set(train.STAGE_TRAINABLE[name])
    assert len(recs) == 6 and all(math.isfinite(r.loss) for r in recs)


def test_freeze_contract_without_cache(tiny_data):
    pol = _policy(tiny_data)
    before = _by_module(pol, "IDEM")
    train.run_stage(StageConfig("initial_alignment", 3), pol, tiny_data, OptimConfig(batch_size=4, warmup_steps=1),
                    0, cache_frozen=False)
    assert _by_module(pol, "IDEM") == before


def test_cache_does_not_change_training(tiny_data):
    runs = []
    for cache in (True, False):
        pol = _policy(tiny_data)
        _, recs = train.run_stage(StageConfig("initial_alignment", 4), pol, tiny_data,
                                  OptimConfig(batch_size=4, warmup_steps=1), 0, cache_frozen=cache)
        runs.append([r.loss for r in recs])
    np.testing.assert_allclose(runs[0], runs[1], rtol=1e-5)


def test_step0_loss_equals_no_depth_baseline(tiny_data):
    pol = _policy(tiny_data)
    base = Policy(tiny_model(enable_idem=False, fusion="none"),
                  {k: v for k, v in pol.params.items() if module_of(k) in ("VLB", "EXPERT")},
                  pol.action_mean, pol.action_std)
    batch = train.batch_from(tiny_data, np.arange(8))
    a = float(pol.loss(batch, np.random.default_rng(1), training=False).data)
    b = float(base.loss(batch, np.random.default_rng(1), training=False).data)
    assert a == pytest.approx(b, abs=1e-6)


def test_metrics_deterministic(tiny_data, tmp_path):
    logs = []
    for i in range(2):
        pol = _policy(tiny_data)
        _, recs = train.run_stage(StageConfig("joint", 4), pol, tiny_data, OptimConfig(batch_size=4, warmup_steps=1), 5)
        train.write_metrics(tmp_path / f"m{i}.csv", recs)
        logs.append((tmp_path / f"m{i}.csv").read_text())
    assert logs[0] == logs[1]
    assert logs[0].splitlines()[0] == "step,stage,loss,lr,grad_norm"


def test_metrics_header_comment(tmp_path):
    rec = [train.StepRecord(0, "joint", 1.0, 0.0, 2.0)]
    train.write_metrics(tmp_path / "m.csv", rec, header_comment="written now")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "# written now" and lines[1].startswith("step,")


def test_nan_loss_aborts(tiny_data):
    pol = _policy(tiny_data)
    pol.params["expert.out.b"].data[:] = np.nan
    with pytest.raises(TrainingError):
        train.run_stage(StageConfig("joint", 2), pol, tiny_data, OptimConfig(batch_size=4, warmup_steps=1), 0)


def test_checkpoint_roundtrip_with_moments(tiny_data, tmp_path):
    pol = _policy(tiny_data)
    state, _ = train.run_stage(StageConfig("joint", 3), pol, tiny_data, OptimConfig(batch_size=4, warmup_steps=1), 0)
    path = train.save_checkpoint(tmp_path / "c.ckpt", pol, state)
    back, st2 = train.load_checkpoint(path, pol.config)
    assert checksum(back.params) == checksum(pol.params)
    assert st2.step == state.step
    for k in state.m:
        assert st2.m[k].tobytes() == state.m[k].tobytes()
        assert st2.v[k].tobytes() == state.v[k].tobytes()
    assert back.action_std.tobytes() == pol.action_std.tobytes()


def test_load_checkpoint_names_bad_tensor(tiny_data, tmp_path):
    pol = _policy(tiny_data)
    path = train.save_checkpoint(tmp_path / "c.ckpt", pol)
    other = tiny_model(expert=tiny_model().expert.__class__(num_layers=1, hidden_dim=8, num_heads=2, cond_dim=8))
    with pytest.raises(checkpoint.CheckpointError, match="expert"):
        train.load_checkpoint(path, other)


def test_pipeline_handoff_reproduces_next_stage_loss(tiny_data, tmp_path):
    stages = train.pipeline_stages(3, [3, 3, 3])
    optim = OptimConfig(batch_size=4, warmup_steps=1)
    res = train.run_pipeline(stages, _policy(tiny_data), tiny_data, optim, 0, tmp_path)
    assert [p.name for p in res.checkpoints] == ["stage1.ckpt", "stage2.ckpt", "stage3.ckpt"]
    assert len(res.records) == 9 and [r.step for r in res.records] == list(range(9))
    resumed, _ = train.load_checkpoint(tmp_path / "stage1.ckpt", tiny_model())
    _, recs = train.run_stage(stages[1], resumed, tiny_data, optim, 0 + 2)
    assert recs[0].loss == res.records[3].loss
