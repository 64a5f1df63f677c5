import math

import numpy as np
import pytest

from driftforge.cgan import (
    LOG_HEADER,
    Discriminator,
    DriftModel,
    Generator,
    TrainConfig,
    Trainer,
    TrainingAborted,
    discriminator_score,
    generate_sequence,
    generator_sample,
    rollout,
    sample_real_subsequences,
    train,
)
from driftforge.nn import CheckpointError, bce_grad, load_checkpoint, sigmoid
from driftforge.normalization import NormStats, Normalizer
from fdcheck import max_rel_error, numeric_grad

SMALL = dict(embed_hidden=(8, 8), gen_hidden=(16, 16), disc_hidden=(16, 16),
             disc_comb_hidden=(16,), batch=8, steps_per_epoch=3, d_max_d=20)


def small_cfg(**kw):
    return TrainConfig(**{**SMALL, **kw})


def zero_head(g: Generator) -> Generator:
    g.comb_net.layers[-1].W[...] = 0
    g.comb_net.layers[-1].b[...] = 0
    return g


@pytest.fixture
def gen(rng):
    return Generator.build(small_cfg(), rng)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(d_max_dd=50)
    with pytest.raises(ValueError):
        TrainConfig(q_max=1)
    with pytest.raises(ValueError):
        TrainConfig(batch=7, n_pack=2)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"bogus": 1})
    with pytest.raises(ValueError):
        TrainConfig(r_init_space="linear")
    with pytest.raises(ValueError):
        TrainConfig(delay_init_scale=0.0)
    cfg = TrainConfig(seed=3)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_config_defaults():
    c = TrainConfig()
    assert (c.lr, c.epochs, c.steps_per_epoch, c.s_main, c.s_dd, c.q_max) == (1e-4, 1000, 500, 10, 2, 20)
    assert (c.d_min_d, c.d_max_d, c.d_min_dd, c.d_max_dd, c.n_pack, c.z_dim) == (1, 90, 1, 500, 2, 20)
    # rms of U[1, 90]: sqrt((1 + 90 + 8100) / 3)
    assert c.delay_scale() == pytest.approx(52.2526, abs=1e-4)
    assert TrainConfig(delay_init_scale=3.0).delay_scale() == 3.0
    assert c.r_init_space == "ohms"


def test_residual_identity(gen, small_stats, rng):
    zero_head(gen)
    rbar = rng.normal(size=50)
    out = generator_sample(rbar, rng.uniform(0.1, 500, 50), rng.normal(size=(50, 20)), gen, small_stats)
    assert np.array_equal(out, rbar)
    s = generate_sequence(2e5, 10, 5, gen, small_stats, rng)
    assert np.allclose(s.values, s.values[0], rtol=1e-12)


def test_generator_deterministic(gen, small_stats):
    z = np.linspace(-1, 1, 20)
    a = generator_sample([0.3], 12.5, z, gen, small_stats)
    b = generator_sample([0.3], 12.5, z, gen, small_stats)
    assert a.tobytes() == b.tobytes()


def test_rollout_gradient_wrt_initial_resistance(gen, small_stats, rng):
    rbar0 = rng.normal(size=4)
    d = np.array([3.0, 40.0, 120.0, 450.0])
    zs = rng.normal(size=(3, 4, 20))

    def final(x):
        r = x
        caches = []
        for z in zs:
            r, c = gen.forward_cached(r, d, z, small_stats.sigma_Dbar)
            caches.append(c)
        return r, caches

    r, caches = final(rbar0)
    g = np.ones(4)
    for c in reversed(caches):
        _, g = gen.backward(c, g)
    x = rbar0.copy()
    num = numeric_grad(lambda: float(final(x)[0].sum()), x)
    assert max_rel_error(g, num) < 1e-4


def test_generator_param_gradients(gen, small_stats, rng):
    rbar, d, z = rng.normal(size=5), rng.uniform(1, 500, 5), rng.normal(size=(5, 20))
    u = rng.normal(size=5)
    out, cache = gen.forward_cached(rbar, d, z, small_stats.sigma_Dbar)
    grads, _ = gen.backward(cache, u)
    f = lambda: float(gen.forward(rbar, d, z, small_stats.sigma_Dbar) @ u)
    for p, gp in zip(gen.params(), grads):
        assert max_rel_error(gp, numeric_grad(f, p)) < 1e-4


def test_discriminator_gradients(small_stats, rng):
    D = Discriminator.build(4, small_cfg(), rng)
    rbar = rng.normal(size=(6, 4))
    d = rng.uniform(1, 90, 6)
    u = rng.normal(size=3)
    logit, cache = D.logits_cached(rbar, d, small_stats.sigma_Dbar)
    grads, g_in = D.backward(cache, u)
    f = lambda: float(D.logits_cached(rbar, d, small_stats.sigma_Dbar)[0] @ u)
    for p, gp in zip(D.params(), grads):
        assert max_rel_error(gp, numeric_grad(f, p)) < 1e-4
    assert max_rel_error(g_in, numeric_grad(f, rbar)) < 1e-4


def test_discriminator_score_range_and_order(small_stats, rng):
    D = Discriminator.build(3, small_cfg(), rng)
    rbar = rng.normal(size=(2, 3))
    p = discriminator_score(D, rbar, 5.0, small_stats)
    assert p.shape == (1,) and 0 < p[0] < 1
    extreme = discriminator_score(D, 1e6 * rbar, 5.0, small_stats)
    assert 0 < extreme[0] < 1
    a, _ = D.features(rbar, 5.0, small_stats.sigma_Dbar)
    b, _ = D.features(rbar[::-1], 5.0, small_stats.sigma_Dbar)
    assert not np.array_equal(a, b)
    with pytest.raises(ValueError):
        D.score(rng.normal(size=(2, 4)), 5.0, small_stats.sigma_Dbar)
    with pytest.raises(ValueError):
        D.score(rng.normal(size=(3, 3)), 5.0, small_stats.sigma_Dbar)


def test_sample_real_subsequences(rng):
    data = np.arange(3 * 1001, dtype=float).reshape(3, 1001)
    w = sample_real_subsequences(data, 90, 10, 50, rng)
    assert w.shape == (50, 10) and np.all(np.diff(w, axis=1) == 90)
    one = sample_real_subsequences(data, 1, 1001, 6, rng)
    assert np.all(one[:, 0] % 1001 == 0)
    with pytest.raises(ValueError):
        sample_real_subsequences(data, 200, 10, 1, rng)
    with pytest.raises(ValueError):
        sample_real_subsequences(data, 2.5, 3, 1, rng)


def test_chained_split_is_equal_calls(gen, small_stats):
    model = DriftModel(gen, small_stats)
    a = model.sample_normalized(np.array([0.1, -0.4]), 2.0, np.random.default_rng(0), steps=2)
    rng = np.random.default_rng(0)
    r = np.array([0.1, -0.4])
    for _ in range(2):
        r = generator_sample(r, 1.0, rng.standard_normal((2, 20)), gen, small_stats)
    assert np.array_equal(a, r)


def _trainer(ds, stats, **kw):
    return Trainer(ds, stats, small_cfg(**kw))


def test_trainer_rejects_long_windows(small_dataset, small_stats):
    with pytest.raises(ValueError):
        _trainer(small_dataset, small_stats, d_max_d=90)


def test_main_step_against_even_discriminator(small_dataset, small_stats):
    tr = _trainer(small_dataset, small_stats)
    last = tr.D.comb_net.layers[-1]
    last.W[...] = 0
    last.b[...] = 0
    tr.opt_D.lr = 0.0
    loss_D, loss_G, grads = tr.main_step()
    assert loss_G == pytest.approx(math.log(2), abs=1e-12)
    assert loss_D == pytest.approx(2 * math.log(2), abs=1e-12)
    assert bce_grad(1.0, 0.5) == pytest.approx(-2.0)
    assert len(grads) == len(tr.G.params())


def test_delay_step_identity_generator_is_inseparable(small_dataset, small_stats):
    tr = _trainer(small_dataset, small_stats, lr=1e-2)
    zero_head(tr.G)
    losses = [tr.delay_step()[0] for _ in range(200)]
    assert min(losses) >= 2 * math.log(2) - 1e-12
    assert losses[-1] == pytest.approx(2 * math.log(2), abs=0.02)


def _auc(pos, neg):
    pos, neg = np.asarray(pos), np.asarray(neg)
    return float(np.mean(pos[:, None] > neg[None, :]) + 0.5 * np.mean(pos[:, None] == neg[None, :]))


def test_discriminator_learns_identity_fakes(small_dataset, small_stats):
    tr = _trainer(small_dataset, small_stats, batch=32, lr=1e-3)
    zero_head(tr.G)
    for _ in range(150):
        tr.main_step()
    rng = np.random.default_rng(99)
    d = rng.integers(1, 20, size=200)
    real = sample_real_subsequences(tr.data, d, 10, 200, rng)
    fake, _ = rollout(tr.G, real[:, 0], d.astype(float), 9, small_stats, rng)
    assert _auc(tr.D.score(real, d, tr.sigma), tr.D.score(fake, d, tr.sigma)) > 0.5


def test_discriminator_separates_shuffled_tails(small_dataset, small_stats):
    tr = _trainer(small_dataset, small_stats, batch=32, lr=1e-3)
    rng = np.random.default_rng(5)
    losses = []
    for _ in range(300):
        d = rng.integers(1, 20, size=32)
        real = sample_real_subsequences(tr.data, d, 10, 32, rng)
        shuf = real.copy()
        for row in shuf:
            row[1:] = rng.permutation(row[1:])
        lr_, cr = tr.D.logits_cached(real, d, tr.sigma)
        lf, cf = tr.D.logits_cached(shuf, d, tr.sigma)
        g1, _ = tr.D.backward(cr, (sigmoid(lr_) - 1) / lr_.size, need_input_grad=False)
        g0, _ = tr.D.backward(cf, sigmoid(lf) / lf.size, need_input_grad=False)
        tr.opt_D.step([a + b for a, b in zip(g1, g0)])
        losses.append(float(np.mean(-np.log(sigmoid(lr_))) + np.mean(-np.log1p(-sigmoid(lf)))))
    assert np.mean(losses[-20:]) < 2 * math.log(2)


def test_train_zero_epochs(tmp_path, small_dataset, small_stats):
    ck = tmp_path / "m.json"
    tr = train(small_dataset, small_cfg(epochs=0), small_stats, checkpoint_path=ck)
    assert tr.log_rows == [] and tr.step_count == 0
    nets, meta = load_checkpoint(ck)
    assert set(nets) >= {"gen_delay", "gen_res", "gen_comb", "disc_comb", "ddisc_comb"}
    assert meta["stats_hash"] == small_stats.content_hash()


def test_train_log_and_ablation(tmp_path, small_dataset, small_stats):
    log = tmp_path / "log.csv"
    tr = train(small_dataset, small_cfg(epochs=2), small_stats, log_path=log)
    assert log.read_text().splitlines()[0] == ",".join(LOG_HEADER)
    assert len(tr.log_rows) == 2 and tr.log_rows[-1]["step"] == 6
    ab = train(small_dataset, small_cfg(epochs=1, delay_discriminator=False), small_stats)
    assert "loss_Ddd" not in ab.log_rows[0] and "loss_G_dd" not in ab.log_rows[0]


def test_train_rejects_foreign_stats(small_dataset, small_stats):
    other = NormStats(small_stats.mu_R, small_stats.sigma_R, small_stats.mu_Dbar,
                      small_stats.sigma_Dbar, "0" * 64)
    with pytest.raises(ValueError):
        train(small_dataset, small_cfg(epochs=0), other)


def test_training_is_reproducible(small_dataset, small_stats):
    a = train(small_dataset, small_cfg(epochs=2, seed=4), small_stats)
    b = train(small_dataset, small_cfg(epochs=2, seed=4), small_stats)
    for name, net in a.nets().items():
        assert net.flat().tobytes() == b.nets()[name].flat().tobytes()
    assert a.log_rows == b.log_rows


def test_resume_matches_uninterrupted(tmp_path, small_dataset, small_stats):
    full = train(small_dataset, small_cfg(epochs=2, seed=2), small_stats)
    ck = tmp_path / "half.json"
    train(small_dataset, small_cfg(epochs=1, seed=2), small_stats, checkpoint_path=ck)
    tr = Trainer.resume(ck, small_dataset, small_stats)
    assert tr.step_count == 3
    tr.run(1)
    assert tr.step_count == 6
    for name, net in full.nets().items():
        assert net.flat().tobytes() == tr.nets()[name].flat().tobytes()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_aborts_with_diagnostic(tmp_path, small_dataset, small_stats):
    tr = _trainer(small_dataset, small_stats)
    tr.G.comb_net.layers[0].W[0, 0] = np.nan
    ck = tmp_path / "m.json"
    with pytest.raises(TrainingAborted):
        tr.run(1, checkpoint_path=ck)
    assert (tmp_path / "m.aborted.json").exists()


def test_model_load_refuses_other_stats(tmp_path, small_dataset, small_stats):
    ck = tmp_path / "m.json"
    train(small_dataset, small_cfg(epochs=0), small_stats, checkpoint_path=ck)
    m = DriftModel.load(ck)
    assert m.stats == small_stats
    other = NormStats(small_stats.mu_R + 1, small_stats.sigma_R, small_stats.mu_Dbar,
                      small_stats.sigma_Dbar, small_stats.dataset_hash)
    with pytest.raises(CheckpointError, match="refusing"):
        DriftModel.load(ck, other)


def test_model_sample_shapes(gen, small_stats, rng):
    m = DriftModel(zero_head(gen), small_stats)
    out = m.sample([1e4, 2e5], 100.0, rng, steps=3)
    assert out == pytest.approx([1e4, 2e5], rel=1e-12)
    seq = m.generate_sequence(1e5, 10, 100, rng)
    assert seq.values.size == 101
