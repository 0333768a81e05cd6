import numpy as np
import pytest

from atlasgan import io, synthdata
from atlasgan import objectives as O
from atlasgan.tensor import Tensor
from atlasgan.trainer import AdamState, CheckpointMismatch, NumericFailure, Trainer, adam_step, load_model
from atlasgan.layers import param

TINY = dict(size=32, n_samples=50, r0=5.0, k=0.2, hole_r0=1.5, hole_k=0.05, age_max=20.0)


@pytest.fixture(scope="module")
def tiny_ds():
    return synthdata.generate_dataset(synthdata.SynthConfig(**TINY))


@pytest.fixture(scope="module")
def flat_ds():
    return synthdata.generate_dataset(synthdata.SynthConfig(**TINY, warp_max=0.0))


def _cfg(**kw):
    base = {"image_size": 32, "widths": 4, "batch": 4, "age_max": 20, "lncc_window": 5}
    base.update(kw)
    return io.parse_config("".join(f"{k} = {v}\n" for k, v in base.items()))


def _losses(tr):
    return [(r["loss_d"], r["loss_g"], r["lncc"], r["reg"], r["gan_g"]) for r in tr.log_rows]


# -- Adam -----------------------------------------------------------------------

def test_adam_zero_gradient_leaves_parameters():
    p = {"w": param(np.array([1.0, -2.0]))}
    st = AdamState(0.1, 0.9, 0.999)
    for _ in range(3):
        assert adam_step(p, {"w": np.zeros(2, np.float32)}, st)
    np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])


def test_adam_sign_sgd_limit():
    p = {"w": param(np.array([0.0]))}
    st = AdamState(0.1, 0.0, 0.0)
    for t in range(1, 6):
        adam_step(p, {"w": np.ones(1)}, st)
        assert p["w"].data[0] == pytest.approx(-0.1 * t, rel=1e-6)


def test_adam_skips_nonfinite_and_decays_only_named():
    p = {"a": param(np.ones(2)), "b": param(np.ones(2))}
    st = AdamState(0.1, 0.0, 0.9)
    assert not adam_step(p, {"a": np.array([np.nan, 0.0]), "b": np.zeros(2)}, st)
    assert st.incidents == 1 and st.step == 0 and not st.m
    adam_step(p, {"a": np.zeros(2), "b": np.zeros(2)}, st, decay={"a": 0.5})
    np.testing.assert_allclose(p["a"].data, 1 - 0.1 * 0.5)
    np.testing.assert_array_equal(p["b"].data, 1.0)
    with pytest.raises(ValueError):
        adam_step(p, {"a": np.zeros(3)}, st)


def test_optimizer_presets_and_ttur(tiny_ds):
    tr = Trainer(_cfg(), tiny_ds)
    assert (tr.opt_g.eta, tr.opt_d.eta, tr.opt_g.beta1, tr.opt_g.beta2) == (1e-4, 3e-4, 0.0, 0.9)
    assert tr.opt_d.eta > tr.opt_g.eta


# -- training loop ---------------------------------------------------------------

def test_identical_seeds_identical_losses(tiny_ds):
    a, b = Trainer(_cfg(), tiny_ds), Trainer(_cfg(), tiny_ds)
    a.run(8)
    b.run(8)
    assert _losses(a) == _losses(b)
    c = Trainer(_cfg(seed=1), tiny_ds)
    c.run(8)
    assert _losses(c) != _losses(a)


def test_noadv_generator_trajectory_independent_of_discriminator(tiny_ds):
    frozen = Trainer(_cfg(lambda_gan=0), tiny_ds, freeze=("disc.",))
    frozen.run(6)
    trained = Trainer(_cfg(lambda_gan=0), tiny_ds)
    for p in trained.model.params("disc").values():
        p.data = p.data * 3.0
    trained.run(6)
    g = lambda tr: [(r["loss_g"], r["lncc"], r["reg"]) for r in tr.log_rows]  # noqa: E731
    assert g(frozen) == g(trained)
    assert all(r["loss_d"] == 0.0 for r in frozen.log_rows)
    assert any(r["loss_d"] != 0.0 for r in trained.log_rows)


def test_gradient_isolation(tiny_ds):
    tr = Trainer(_cfg(), tiny_ds)
    _, grads_d, params_d, _ = tr._d_step()
    assert grads_d and all(n.startswith("disc.") for n in grads_d)
    assert set(grads_d) == set(params_d)
    _, grads_g, params_g, _, _ = tr._g_step()
    assert grads_g and all(n.startswith(("gen.", "reg.")) for n in grads_g)
    assert any(n.startswith("gen.film.") for n in grads_g)
    before = {n: p.data.copy() for n, p in tr.model.params("disc").items()}
    gen_before = {n: p.data.copy() for n, p in tr.model.generator_params().items()}
    tr.train_iteration()
    assert any(not np.array_equal(p.data, before[n]) for n, p in tr.model.params("disc").items())
    assert any(not np.array_equal(p.data, gen_before[n]) for n, p in tr.model.generator_params().items())


def test_background_stays_zero_and_history_bounded(tiny_ds):
    tr = Trainer(_cfg(batch=2), tiny_ds)
    outside = tr.model.gen.mask[0, 0] == 0
    assert outside.any()
    tr.run(105)
    assert len(tr.history) == 100 and tr.history.count == 105 * 2
    for a in (0.0, 10.0, 20.0):
        for c in ("A", "B"):
            assert np.all(tr.model.sample_template(a, c)[outside] == 0.0)


def test_nonfinite_loss_rolls_back_and_stops(tiny_ds):
    tr = Trainer(_cfg(), tiny_ds)
    tr.run(2)
    params = {n: p.data.copy() for n, p in tr.model.generator_params().items()}
    tr._images[:] = np.nan
    for _ in range(9):
        assert tr.train_iteration() is None
    assert tr.incidents == 9
    for n, p in tr.model.generator_params().items():
        np.testing.assert_array_equal(p.data, params[n])
    with pytest.raises(NumericFailure):
        tr.train_iteration()


# Fixed evaluation batch (first 16 training images) before and after
# training, rather than single noisy training-batch losses.
def _eval_lncc(tr, recs):
    vals = []
    for r in recs:
        t = tr.model.sample_template(r.age, r.cohort)
        _, _, moved = tr.model.register(t[None, None], r.image[None, None])
        vals.append(float(O.lncc_loss(moved, Tensor(r.image[None, None]), tr.cfg.lncc_window).data))
    return float(np.mean(vals))


def test_lncc_decreases_in_smoke_runs(flat_ds):
    better = 0
    for seed in range(10):
        tr = Trainer(_cfg(seed=seed), flat_ds)
        recs = tr.train_set[:16]
        before = _eval_lncc(tr, recs)
        tr.run(200)
        better += _eval_lncc(tr, recs) < before
    assert better >= 9


# -- checkpoints -------------------------------------------------------------------

def test_checkpoint_save_load_is_bitwise(tiny_ds, tmp_path):
    tr = Trainer(_cfg(), tiny_ds)
    tr.run(5)
    tr.save(tmp_path / "a.atgc")
    fresh = Trainer(_cfg(), tiny_ds)
    fresh.load(tmp_path / "a.atgc")
    fresh.save(tmp_path / "b.atgc")
    assert (tmp_path / "a.atgc").read_bytes() == (tmp_path / "b.atgc").read_bytes()
    assert fresh.iteration == 5


def test_resume_matches_uninterrupted(tiny_ds, tmp_path):
    full = Trainer(_cfg(), tiny_ds)
    full.run(100)
    first = Trainer(_cfg(), tiny_ds)
    first.run(50)
    first.save(tmp_path / "k50.atgc")
    resumed = Trainer(_cfg(), tiny_ds)
    resumed.load(tmp_path / "k50.atgc")
    resumed.run(100)
    a = np.array(_losses(full)[50:])
    b = np.array(_losses(resumed))
    assert a.shape == b.shape
    assert np.max(np.abs(a - b)) <= 1e-6


def test_mismatched_architecture_rejected(tiny_ds, tmp_path):
    tr = Trainer(_cfg(), tiny_ds)
    tr.save(tmp_path / "w4.atgc")
    other = Trainer(_cfg(widths=8), tiny_ds)
    with pytest.raises(CheckpointMismatch) as e:
        other.load(tmp_path / "w4.atgc")
    assert e.value.name == "param/gen.P"


def test_load_model_rebuilds_inference_model(tiny_ds, tmp_path):
    tr = Trainer(_cfg(), tiny_ds)
    tr.run(3)
    tr.save(tmp_path / "m.atgc")
    m = load_model(tmp_path / "m.atgc")
    np.testing.assert_array_equal(m.sample_template(7.0, "B"), tr.model.sample_template(7.0, "B"))
