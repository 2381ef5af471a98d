import csv
import math

import numpy as np
import pytest

from afno.model import AfnoConfig, AfnoParams, decode, encode
from afno.pde import GridSpec, SolveConfig, generate
from afno.tensor import ContractError, Tape, ops
from afno.tensor.gradcheck import numeric_grads, relative_error
from afno.training import (AdamState, DivergenceError, LossWeights, TrainConfig, WindowBatch,
                           adam_step, batch_loss, clip_by_global_norm, cosine_lr, euler_step,
                           latent_rollout, load_model, loss_flow, loss_rec, loss_roll, sample_batches,
                           save_model, stage_weights, total_loss, train, write_history_csv)
from synthetic_models import identity_codec, linear_field, tiny_config

LENGTH = 2 * np.pi
tiny = tiny_config


# -- latent stepping ------------------------------------------------------------

def test_zero_field_leaves_state_unchanged():
    z = np.random.default_rng(0).normal(size=(3, 16))
    p = AfnoParams.zeros(tiny())
    assert np.array_equal(euler_step(z, 0.01, 0.1, p).value, z)
    traj = latent_rollout(z, 0.01, 0.1, 4, p)
    assert traj.shape == (5, 3, 16) and np.all(traj == z)


def test_constant_field_step():
    p = AfnoParams.zeros(tiny())
    c = np.array([0.5, -1.0, 2.0])
    p.arrays["field.out.bias"] = c
    z = np.random.default_rng(1).normal(size=(3, 16))
    np.testing.assert_allclose(euler_step(z, 0.01, 0.2, p).value, z + 0.2 * c[:, None], atol=1e-15)


def test_linear_field_closed_form():
    rate, dt = -0.7, 0.05
    p = linear_field(rate)
    z = np.random.default_rng(2).normal(size=(2, 3, 16))
    assert np.max(np.abs(euler_step(z, 0.01, dt, p).value - (1 + dt * rate) * z)) < 1e-12
    traj = latent_rollout(z, 0.01, dt, 7, p)
    for n in range(8):
        assert np.max(np.abs(traj[n] - (1 + dt * rate) ** n * z)) < 1e-12
    np.testing.assert_array_equal(latent_rollout(z, 0.01, dt, 1, p)[1], euler_step(z, 0.01, dt, p).value)


def test_stepping_contracts():
    p = AfnoParams.zeros(tiny())
    z = np.zeros((3, 8))
    with pytest.raises(ContractError):
        euler_step(z, 0.01, 0.0, p)
    with pytest.raises(ContractError):
        latent_rollout(z, 0.01, 0.1, 0, p)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_rollout_divergence_reports_step():
    p = linear_field(1e300)
    with pytest.raises(DivergenceError) as info:
        latent_rollout(np.ones((3, 8)), 0.01, 1.0, 5, p)
    assert info.value.step == 2


# -- losses ----------------------------------------------------------------------

def test_loss_rec_values():
    rng = np.random.default_rng(3)
    u = rng.normal(size=(2, 1, 32))
    assert loss_rec(u, u, 0.1, (LENGTH,)).value == 0
    c = 1.5
    # a constant has zero gradient, so the H1 weight is irrelevant
    for lam in (0.0, 0.1, 3.0):
        got = loss_rec(np.zeros((1, 32)), np.full((1, 32), c), lam, (LENGTH,)).value
        assert got == pytest.approx(c * c * LENGTH, rel=1e-14)
    v = rng.normal(size=u.shape)
    at = {lam: float(loss_rec(u, v, lam, (LENGTH,)).value) for lam in (0.0, 1.0, 2.0)}
    assert at[2.0] - at[0.0] == pytest.approx(2 * (at[1.0] - at[0.0]), rel=1e-12)
    with pytest.raises(ContractError):
        loss_rec(u, u[..., :16], 0.1, (LENGTH,))


def test_loss_rec_gradient_term_on_a_sine():
    n, lam = 64, 0.5
    x = LENGTH * np.arange(n) / n
    h = LENGTH / n
    u = np.sin(x)[None]
    # central difference of sin(x) is sin(h)/h cos(x); squared integral of cos over a period is pi
    expected = lam * (np.sin(h) / h) ** 2 * np.pi + np.pi
    assert loss_rec(np.zeros_like(u), u, lam, (LENGTH,)).value == pytest.approx(expected, rel=1e-12)


def test_loss_flow_values():
    dt = 0.1
    z = np.random.default_rng(4).normal(size=(3, 16))
    zero = AfnoParams.zeros(tiny())
    assert loss_flow(z, z, 0.01, dt, zero, (LENGTH,)).value == 0
    c = np.array([1.0, -2.0, 0.5])
    got = loss_flow(z, z + dt * c[:, None], 0.01, dt, zero, (LENGTH,)).value
    assert got == pytest.approx(np.sum(c ** 2) * LENGTH, rel=1e-12)
    rate = 0.3
    lin = linear_field(rate)
    assert loss_flow(z, (1 + dt * rate) * z, 0.01, dt, lin, (LENGTH,)).value < 1e-25
    with pytest.raises(ContractError):
        loss_flow(z, z, 0.01, dt, AfnoParams.zeros(tiny(autoregressive=True)), (LENGTH,))


def test_loss_roll_fixed_point_is_zero():
    p = AfnoParams.zeros(tiny())
    p.arrays["dec.1.bias"][:] = 0.8
    frames = np.full((4, 1, 16), 0.8)
    assert loss_roll(frames, np.random.default_rng(5).normal(size=(3, 16)), 0.01, 0.1, 3, p,
                     (LENGTH,)).value == 0


def test_loss_roll_hand_summation():
    rate, dt, n = -0.4, 0.25, 8
    p = identity_codec(rate)
    rng = np.random.default_rng(6)
    frames = rng.normal(size=(3, 1, n))
    z0 = frames[0]
    a = 1 + dt * rate
    h = LENGTH / n
    expected = sum(np.sum((a ** s * z0 - frames[s]) ** 2) * h for s in (1, 2))
    assert loss_roll(frames, z0, 0.01, dt, 2, p, (LENGTH,)).value == pytest.approx(expected, rel=1e-12)
    one = float(np.sum((a * z0 - frames[1]) ** 2) * h)
    assert loss_roll(frames, z0, 0.01, dt, 1, p, (LENGTH,)).value == pytest.approx(one, rel=1e-12)
    with pytest.raises(ContractError):
        loss_roll(frames, z0, 0.01, dt, 3, p, (LENGTH,))


def test_total_loss_follows_stage_schedule():
    cfg = TrainConfig(epochs=10)
    rec, flow, roll = 2.0, 3.0, 5.0
    for epoch in range(3):
        assert total_loss(stage_weights(epoch, cfg), rec, flow, roll).value == rec
    for epoch in range(3, 10):
        assert total_loss(stage_weights(epoch, cfg), rec, flow, roll).value == pytest.approx(0.5 * flow + 0.1 * roll)
    assert total_loss(LossWeights(1, 1, 1)).value == 0


# -- optimizer ---------------------------------------------------------------------

def test_adam_first_step_closed_form():
    params = {"a": np.array([1.0, 2.0]), "b": np.array([1.0])}
    state = AdamState.for_params(params)
    adam_step(params, {"a": np.array([1.0, 0.0]), "b": np.array([1.0])}, state, 1e-3)
    step = 1e-3 / (1 + 1e-8)
    assert params["a"][0] == pytest.approx(1 - step, abs=1e-16)
    assert params["a"][1] == 2.0                              # zero gradient
    assert params["b"][0] == params["a"][0]                   # equal gradients, equal moves
    assert state.step == 1 and state.m["a"].shape == (2,)


def test_cosine_schedule():
    assert cosine_lr(0, 100, 1e-3) == 1e-3
    assert cosine_lr(100, 100, 1e-3) == pytest.approx(0.0, abs=1e-20)
    assert cosine_lr(50, 100, 1e-3) == pytest.approx(5e-4, rel=1e-14)


def test_clip_by_global_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert clip_by_global_norm(g, 1.0) == 5.0
    assert math.hypot(g["a"][0], g["b"][0]) == pytest.approx(1.0)
    small = {"a": np.array([0.1])}
    clip_by_global_norm(small, 1.0)
    assert small["a"][0] == 0.1


# -- batch objective ---------------------------------------------------------------

def toy_batch(prefix, n=8, k=3, seed=7):
    rng = np.random.default_rng(seed)
    b = len(prefix)
    return WindowBatch(rng.normal(size=(b, k + 1, 1, n)), np.array(prefix),
                       np.full(b, 0.01), np.full(b, 0.1))


@pytest.mark.parametrize("roll_all", [False, True])
def test_batch_loss_gradients_match_finite_differences(roll_all):
    cfg = tiny()
    base = AfnoParams.create(cfg, seed=8)
    rng = np.random.default_rng(9)
    for name, v in base.arrays.items():
        if v.ndim == 1:
            base.arrays[name] = 0.1 * rng.normal(size=v.shape)
    batch = toy_batch([0, 0])
    tc = TrainConfig(horizon=3, roll_all_steps=roll_all)
    weights = LossWeights(1.0, 0.5, 0.1)
    names = list(base.arrays)

    def fn(*arrays):
        return batch_loss(AfnoParams(cfg, dict(zip(names, arrays))), batch, weights, tc, (LENGTH,))[0]

    tape = Tape()
    leaves = [tape.leaf(base.arrays[k]) for k in names]
    tape.backward(fn(*leaves))
    numeric = numeric_grads(fn, [base.arrays[k] for k in names])
    for name, leaf, g in zip(names, leaves, numeric):
        assert relative_error(leaf.grad, g) < 1e-4, name


def test_severed_prefix_carries_no_gradient():
    cfg = tiny()
    p = AfnoParams.create(cfg, seed=10)
    batch = toy_batch([2, 1, 2])
    tc = TrainConfig(horizon=3)
    weights = LossWeights(0.0, 0.0, 1.0)
    tape = Tape()
    tracked = p.on_tape(tape)
    loss, _ = batch_loss(tracked, batch, weights, tc, (LENGTH,))
    tape.backward(loss)

    # same objective with the prefix states supplied as constants
    z = encode(batch.frames[:, 0], p).value
    states = []
    for i, steps in enumerate(batch.prefix):
        zi = z[i]
        for _ in range(steps):
            zi = euler_step(zi, 0.01, 0.1, p).value
        states.append(zi)
    idx = np.arange(3)
    target = batch.frames[idx, batch.prefix + 1]
    ref_tape = Tape()
    ref = p.on_tape(ref_tape)
    nxt = euler_step(np.stack(states), batch.nu, batch.dt, ref)
    e = ops.sub(decode(nxt, ref), target)
    ref_loss = ops.scale(ops.mean(ops.sum(ops.square(e), axis=(1, 2))), LENGTH / 8)
    ref_tape.backward(ref_loss)
    assert float(loss.value) == pytest.approx(float(ref_loss.value), rel=1e-12)
    for k in p.arrays:
        np.testing.assert_allclose(tracked.arrays[k].grad, ref.arrays[k].grad, rtol=1e-10, atol=1e-14)
    # the encoder only sees severed prefix inputs here
    assert all(np.all(tracked.arrays[k].grad == 0) for k in p.arrays if k.startswith("enc."))


def test_batch_loss_is_linear_in_weights():
    p = AfnoParams.create(tiny(), seed=11)
    batch = toy_batch([0, 1, 2])
    tc = TrainConfig(horizon=3)
    parts = batch_loss(p, batch, LossWeights(1, 1, 1), tc, (LENGTH,))[1]
    for w in [(0.3, 0.5, 0.1), (2.0, 0.0, 1.5), (0.0, 4.0, 0.0)]:
        total = float(batch_loss(p, batch, LossWeights(*w), tc, (LENGTH,))[0].value)
        expected = w[0] * parts["rec"] + w[1] * parts["flow"] + w[2] * parts["roll"]
        assert total == pytest.approx(expected, rel=1e-12)


def test_sample_batches_respect_window_and_prefix_range():
    grid = GridSpec.for_pde("burgers", 16)
    trajs = generate(SolveConfig("burgers", t_end=0.1, n_frames=8), grid, 5)
    tc = TrainConfig(horizon=3, batch_size=2, windows_per_trajectory=2)
    batches = sample_batches(trajs, tc, np.random.default_rng(0))
    assert [len(b.prefix) for b in batches] == [2, 2, 2, 2, 2]
    for b in batches:
        assert b.frames.shape[1:] == (4, 1, 16)
        assert np.all((b.prefix >= 0) & (b.prefix < 3))
        np.testing.assert_allclose(b.nu, 0.01)
    with pytest.raises(ContractError):
        sample_batches(trajs, TrainConfig(horizon=8), np.random.default_rng(0))


# -- training loop -----------------------------------------------------------------

@pytest.fixture(scope="module")
def toy_burgers():
    grid = GridSpec.for_pde("burgers", 32)
    return generate(SolveConfig("burgers", t_end=0.5, n_frames=11), grid, 32)


def quick(**kw):
    base = dict(epochs=6, batch_size=16, horizon=3, lr=3e-3, seed=1)
    base.update(kw)
    return TrainConfig(**base)


def test_training_reduces_loss(toy_burgers):
    res = train(toy_burgers, tiny(), quick(epochs=12, stage_fraction=1.0))
    assert res.history[-1]["total"] < res.history[0]["total"]
    res2 = train(toy_burgers, tiny(), quick(epochs=8))
    assert res2.history[-1]["stage"] == 2 and res2.history[-1]["roll"] > 0


def test_training_is_deterministic(toy_burgers, tmp_path):
    blobs = []
    for name in ("a", "b"):
        res = train(toy_burgers, tiny(), quick())
        save_model(tmp_path / name, res.params, res.optimizer, quick(), res.epochs_done)
        blobs.append((tmp_path / name).read_bytes())
    assert blobs[0] == blobs[1]
    params, opt, meta = load_model(tmp_path / "a")
    assert meta["epoch"] == 6 and opt.step == res.optimizer.step
    assert all(np.array_equal(params[k], res.params[k]) for k in res.params.arrays)


def test_resume_matches_uninterrupted_run(toy_burgers):
    full = train(toy_burgers, tiny(), quick())
    first = train(toy_burgers, tiny(), quick(), end_epoch=3)
    assert first.epochs_done == 3 and len(first.history) == 3
    rest = train(toy_burgers, tiny(), quick(), params=first.params.copy(), optimizer=first.optimizer,
                 start_epoch=3, history=first.history)
    for k in full.params.arrays:
        np.testing.assert_array_equal(rest.params[k], full.params[k])
    assert [r["total"] for r in rest.history] == [r["total"] for r in full.history]


def test_autoregressive_ablation_trains_without_flow(toy_burgers):
    res = train(toy_burgers, tiny(autoregressive=True), quick(epochs=4))
    assert all(r["flow"] == 0 for r in res.history)
    assert res.history[-1]["roll"] > 0


def test_divergence_reports_epoch_and_batch(toy_burgers):
    p = AfnoParams.create(tiny(), seed=0)
    p.arrays["enc.0.bias"][0] = np.nan
    with pytest.raises(DivergenceError) as info:
        train(toy_burgers, tiny(), quick(), params=p)
    assert info.value.epoch == 0 and info.value.batch == 0


def test_history_csv(toy_burgers, tmp_path):
    res = train(toy_burgers, tiny(), quick(epochs=2))
    path = tmp_path / "h.csv"
    write_history_csv(path, res.history)
    rows = list(csv.DictReader(open(path)))
    assert len(rows) == 2
    assert {"epoch", "lr", "rec", "flow", "roll", "total"} <= set(rows[0])
