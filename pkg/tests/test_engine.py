import numpy as np
import pytest

from diloco import engine, tasks
from diloco.errors import ConfigError, DilocoError
from diloco.tensor import PseudoGradient

SPEC = tasks.TaskSpec("mlp_classifier", input_dim=6, hidden_dim=5, output_dim=3, depth=2, seed=1,
                      dataset_size=512)


def config(**kw):
    base = dict(local_steps=5, num_workers=1, total_inner_steps=20, batch_size=8, inner_lr=1e-2)
    base.update(kw)
    return engine.DilocoConfig(**base)


def run_window(cfg, state, worker=0):
    sh = tasks.shard(SPEC, worker, cfg.num_workers)
    for _ in range(cfg.local_steps):
        batch = tasks.make_batch(SPEC, sh, state.inner_step * cfg.batch_size, cfg.batch_size)
        state, _ = engine.inner_step(state, cfg, SPEC, batch)
    return state


def test_config_validation():
    with pytest.raises(ConfigError):
        config(total_inner_steps=21)
    with pytest.raises(ConfigError):
        config(reduce_precision="bf16")
    with pytest.raises(ConfigError):
        config(outer_momentum=1.0)
    assert config().rounds == 4


def test_pseudo_gradient_is_exact_difference():
    cfg = config()
    st = run_window(cfg, engine.init_engine(cfg, tasks.init_params(SPEC)))
    pg = engine.compute_pseudo_gradient(st, cfg)
    back = st.theta_t.data.astype(np.float64) - pg.data
    assert np.array_equal(back, st.theta_local.data.astype(np.float64))
    assert pg.outer_epoch == 0


def test_pseudo_gradient_mid_window_is_an_error():
    cfg = config()
    st = engine.init_engine(cfg, tasks.init_params(SPEC))
    sh = tasks.shard(SPEC, 0, 1)
    st, _ = engine.inner_step(st, cfg, SPEC, tasks.make_batch(SPEC, sh, 0, 8))
    with pytest.raises(DilocoError):
        engine.compute_pseudo_gradient(st, cfg)


def test_outer_step_checks_epoch_and_skips_non_finite():
    cfg = config()
    st = run_window(cfg, engine.init_engine(cfg, tasks.init_params(SPEC)))
    pg = engine.compute_pseudo_gradient(st, cfg)
    with pytest.raises(DilocoError):
        engine.outer_step(st, PseudoGradient(pg.data, pg.layout, outer_epoch=3))
    bad = pg.data.copy()
    bad[0] = np.nan
    nxt, applied = engine.outer_step(st, PseudoGradient(bad, pg.layout))
    assert not applied and nxt.theta_t == st.theta_t and nxt.theta_local == st.theta_t
    assert nxt.outer_epoch == 1


def test_manual_two_worker_average():
    cfg = config(num_workers=2, outer_lr=1.0, outer_momentum=0.0)
    init = tasks.init_params(SPEC)
    states = [run_window(cfg, engine.init_engine(cfg, init), w) for w in range(2)]
    pgs = [engine.compute_pseudo_gradient(s, cfg) for s in states]
    avg = PseudoGradient((pgs[0].data + pgs[1].data) / 2, pgs[0].layout)
    nxt, applied = engine.outer_step(states[0], avg)
    expect = (states[0].theta_local.data.astype(np.float64) + states[1].theta_local.data) / 2
    assert applied
    np.testing.assert_allclose(nxt.theta_t.data, expect, rtol=1e-6)


def test_amp_overflow_skips_update_but_advances():
    cfg = config(amp=True, loss_scale=2.0 ** 40)
    st = engine.init_engine(cfg, tasks.init_params(SPEC))
    batch = tasks.make_batch(SPEC, tasks.shard(SPEC, 0, 1), 0, 8)
    nxt, m = engine.inner_step(st, cfg, SPEC, batch)
    assert m.skipped and nxt.inner_step == 1
    assert nxt.theta_local == st.theta_local
    assert nxt.scaler.scale == 2.0 ** 39


def test_amp_without_overflow_trains():
    cfg = config(amp=True, loss_scale=2.0 ** 8)
    st = engine.init_engine(cfg, tasks.init_params(SPEC))
    out = engine.drive(engine.training_loop(st, engine.LoopContext(cfg, SPEC, tasks.shard(SPEC, 0, 1),
                                                                   evaluate=False)))
    assert out.inner_step == 20 and out.outer_epoch == 4
    assert tasks.evaluate(SPEC, out.theta_t) < tasks.evaluate(SPEC, st.theta_t)


def test_training_loop_records():
    cfg = config()
    records = []
    st = engine.init_engine(cfg, tasks.init_params(SPEC))
    ctx = engine.LoopContext(cfg, SPEC, tasks.shard(SPEC, 0, 1), emit=records.append,
                             step_seconds=lambda s: 0.5)
    engine.drive(engine.training_loop(st, ctx))
    inner = [r for r in records if r["kind"] == "inner"]
    outer = [r for r in records if r["kind"] == "outer"]
    assert [r["inner_step"] for r in inner] == list(range(1, 21))
    assert [r["outer_epoch"] for r in outer] == [1, 2, 3, 4]
    assert all(r["compute_ms"] == 500.0 and r["bytes_sent"] == 0 for r in inner)
    assert all(r["contributors"] == 1 for r in outer)


def test_facade_matches_training_loop():
    cfg = config()
    init = tasks.init_params(SPEC)
    opt = engine.DilocoOptimizer(init, cfg)
    sh = tasks.shard(SPEC, 0, 1)
    for step in range(cfg.total_inner_steps):
        opt.zero_grad()
        opt.step(SPEC, tasks.make_batch(SPEC, sh, step * cfg.batch_size, cfg.batch_size))
    ref = engine.drive(engine.training_loop(engine.init_engine(cfg, init),
                                            engine.LoopContext(cfg, SPEC, sh, evaluate=False)))
    assert opt.state.theta_t == ref.theta_t


def test_checkpoint_round_trip(tmp_path):
    cfg = config(amp=True, loss_scale=2.0 ** 10)
    st = run_window(cfg, engine.init_engine(cfg, tasks.init_params(SPEC)))
    path = tmp_path / "w.ckpt"
    engine.save_checkpoint(path, st, "abc123")
    back, digest = engine.load_checkpoint(path)
    assert digest == "abc123"
    assert back == st


def test_checkpoint_rejects_foreign_file(tmp_path):
    path = tmp_path / "x.ckpt"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(ConfigError):
        engine.load_checkpoint(path)
