"""Engine tests: loss oracle, ledger accounting, reversible/store-everything
equivalence, masked sweeps, reconstruction-failure detection, optimizer."""

import numpy as np
import pytest

from revspike.engine import (
    MASKS,
    ActivationLedger,
    ReconstructionError,
    backward_masked,
    backward_reversible,
    backward_stbp,
    loss_cross_entropy,
    optimizer_step,
    reconstruct_bundles,
)
from revspike.network import (
    NetworkConfig,
    StageConfig,
    forward_full,
    init_weights,
    named_parameters,
)
from revspike.neuron import NeuronParams

RNG = np.random.default_rng(23)


def boundary_config(timesteps=2, seed=0):
    return NetworkConfig(
        timesteps=timesteps,
        stages=[StageConfig(1, 8), StageConfig(1, 16)],
        num_classes=4,
        seed=seed,
        input_hw=(8, 8),
    )


def random_batch(cfg, n=2, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, cfg.in_channels, *cfg.input_hw)).astype(np.float32)
    y = rng.integers(0, cfg.num_classes, size=n)
    return x, y


# -- loss -------------------------------------------------------------------


def test_cross_entropy_matches_manual_softmax():
    logits = RNG.standard_normal((4, 5)).astype(np.float32)
    labels = np.array([0, 2, 4, 1])
    loss, dlogits = loss_cross_entropy(logits, labels)
    z = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    want = -np.mean(np.log(p[np.arange(4), labels]))
    assert loss == pytest.approx(want, rel=1e-5)
    np.testing.assert_allclose(dlogits.sum(axis=1), 0.0, atol=1e-6)


def test_cross_entropy_uniform_logits():
    logits = np.zeros((3, 4), dtype=np.float32)
    loss, _ = loss_cross_entropy(logits, np.array([0, 1, 2]))
    assert loss == pytest.approx(np.log(4.0), rel=1e-6)


def test_label_smoothing_shifts_target():
    logits = RNG.standard_normal((2, 3)).astype(np.float32)
    labels = np.array([0, 1])
    _, d0 = loss_cross_entropy(logits, labels, 0.0)
    _, d1 = loss_cross_entropy(logits, labels, 0.3)
    assert not np.allclose(d0, d1)


def test_cross_entropy_gradient_finite_difference():
    from revspike import tensor as T

    logits = RNG.standard_normal((3, 4))
    labels = np.array([1, 3, 0])
    with T.precision(np.float64):
        _test_ce_fd(logits, labels)


def _test_ce_fd(logits, labels):
    _, d = loss_cross_entropy(logits, labels, 0.1)
    h = 1e-6
    fd = np.zeros_like(logits)
    for i in range(logits.size):
        orig = logits.ravel()[i]
        logits.ravel()[i] = orig + h
        lp, _ = loss_cross_entropy(logits, labels, 0.1)
        logits.ravel()[i] = orig - h
        lm, _ = loss_cross_entropy(logits, labels, 0.1)
        logits.ravel()[i] = orig
        fd.ravel()[i] = (lp - lm) / (2 * h)
    np.testing.assert_allclose(d, fd, rtol=1e-4, atol=1e-8)


# -- ledger -----------------------------------------------------------------


def test_ledger_peak_and_release():
    led = ActivationLedger()
    a = np.zeros((10, 10), dtype=np.float32)
    e1 = led.retain("l1", 0, "spike", a)
    e2 = led.retain("l2", 0, "membrane", a)
    assert led.peak_bytes == 2 * a.nbytes
    led.release(e1)
    led.release(e2)
    assert led.peak_bytes == 2 * a.nbytes  # peak is sticky
    assert sum(led.live_bytes_by_timestep().values()) == 0


def test_ledger_overflow_raises():
    led = ActivationLedger(overflow_bytes=100)
    with pytest.raises(MemoryError):
        led.retain("big", 0, "spike", np.zeros((100, 100), dtype=np.float32))


def test_stbp_ledger_grows_with_timesteps():
    peaks = []
    for t in (2, 4):
        cfg = boundary_config(timesteps=t)
        w = init_weights(cfg)
        x, y = random_batch(cfg)
        led = ActivationLedger()
        backward_stbp(x, y, w, cfg, led)
        peaks.append(led.peak_bytes)
    assert peaks[1] >= 1.8 * peaks[0]


# -- reversible vs store-everything ----------------------------------------


@pytest.mark.parametrize("seed", range(5))
def test_reversible_matches_stbp(seed):
    cfg = boundary_config(timesteps=3, seed=seed)
    w = init_weights(cfg)
    x, y = random_batch(cfg, seed=seed)
    g_ref, aux_ref = backward_stbp(x, y, w, cfg, ActivationLedger())
    g_rev, aux_rev = backward_reversible(x, y, w, cfg, ActivationLedger())
    assert aux_rev["loss"] == pytest.approx(aux_ref["loss"], rel=1e-6)
    for name in g_ref.grads:
        np.testing.assert_allclose(g_rev.grads[name], g_ref.grads[name],
                                   rtol=1e-4, atol=1e-6, err_msg=name)


def test_reversible_single_timestep():
    cfg = boundary_config(timesteps=1)
    w = init_weights(cfg)
    x, y = random_batch(cfg)
    g_ref, _ = backward_stbp(x, y, w, cfg)
    g_rev, _ = backward_reversible(x, y, w, cfg)
    for name in g_ref.grads:
        np.testing.assert_allclose(g_rev.grads[name], g_ref.grads[name], atol=1e-6)


def test_reconstruct_bundles_matches_forward():
    cfg = boundary_config(timesteps=4)
    w = init_weights(cfg)
    x, _ = random_batch(cfg)
    _, trace = forward_full(x, w, cfg, keep_traces=True)
    bundles, _, max_err = reconstruct_bundles(x, w, cfg)
    assert max_err < 1e-4
    for t in range(cfg.timesteps):
        for s in range(len(cfg.stages)):
            np.testing.assert_allclose(bundles[t].v[s], trace.steps[t].stages[s].v,
                                       atol=1e-5)


def test_reconstruction_bound_violation_raises():
    cfg = boundary_config(timesteps=2)
    w = init_weights(cfg)
    x, y = random_batch(cfg)
    with pytest.raises(ReconstructionError):
        backward_reversible(x, y, w, cfg, reconstruction_bound=1e-12)


def test_reversible_ledger_holds_one_timestep():
    cfg = boundary_config(timesteps=4)
    w = init_weights(cfg)
    x, y = random_batch(cfg)
    led_rev = ActivationLedger()
    backward_reversible(x, y, w, cfg, led_rev)
    led_stbp = ActivationLedger()
    backward_stbp(x, y, w, cfg, led_stbp)
    assert led_rev.peak_bytes < led_stbp.peak_bytes / 2


# -- masked sweeps ----------------------------------------------------------


def full_config(seed=0):
    return NetworkConfig(
        timesteps=3,
        stages=[StageConfig(1, 8), StageConfig(1, 16)],
        num_classes=4,
        seed=seed,
        input_hw=(8, 8),
        temporal_mode="full",
        grouped_encoding=False,
    )


def test_masks_cover_the_two_cases():
    assert MASKS["baseline"].boundary and MASKS["baseline"].interior
    assert MASKS["case1"].boundary and not MASKS["case1"].interior
    assert not MASKS["case2"].boundary and MASKS["case2"].interior


def test_masked_backwards_differ_from_baseline_and_each_other():
    cfg = full_config()
    w = init_weights(cfg)
    # open the residual gates so interior temporal chains carry signal
    for name, p in named_parameters(w).items():
        if name.endswith(".alpha"):
            p[...] = 0.5
    x, y = random_batch(cfg, n=4)
    g_base, _ = backward_stbp(x, y, w, cfg)
    g_c1, _ = backward_masked(x, y, w, cfg, "case1")
    g_c2, _ = backward_masked(x, y, w, cfg, "case2")
    base = np.concatenate([g_base.grads[n].ravel() for n in sorted(g_base.grads)])
    c1 = np.concatenate([g_c1.grads[n].ravel() for n in sorted(g_c1.grads)])
    c2 = np.concatenate([g_c2.grads[n].ravel() for n in sorted(g_c2.grads)])
    assert not np.allclose(base, c1)
    assert not np.allclose(base, c2)
    assert not np.allclose(c1, c2)


def test_masked_mode_validation():
    cfg = full_config()
    w = init_weights(cfg)
    x, y = random_batch(cfg)
    with pytest.raises(ValueError):
        backward_masked(x, y, w, cfg, "case3")


# -- optimizer --------------------------------------------------------------


def test_optimizer_step_oracle():
    from revspike.engine import GradientSet

    params = {"w": np.array([1.0, 2.0], dtype=np.float32)}
    grads = GradientSet({"w": np.array([0.5, -1.0], dtype=np.float32)})
    vel = optimizer_step(params, grads, lr=0.1, momentum=0.9)
    np.testing.assert_allclose(params["w"], [0.95, 2.1])
    # second step accumulates momentum: v = 0.9*g + g = 0.95, -1.9
    optimizer_step(params, grads, lr=0.1, momentum=0.9, velocity=vel)
    np.testing.assert_allclose(params["w"], [0.95 - 0.1 * 0.95, 2.1 + 0.1 * 1.9],
                               rtol=1e-6)


def test_zero_lr_is_identity():
    from revspike.engine import GradientSet

    params = {"w": np.array([1.0, 2.0], dtype=np.float32)}
    grads = GradientSet({"w": np.array([0.5, -1.0], dtype=np.float32)})
    optimizer_step(params, grads, lr=0.0, momentum=0.9)
    np.testing.assert_array_equal(params["w"], [1.0, 2.0])


def test_non_finite_gradients_rejected():
    from revspike.engine import GradientSet

    gs = GradientSet({"w": np.array([np.inf], dtype=np.float32)})
    with pytest.raises(FloatingPointError):
        gs.check_finite()
