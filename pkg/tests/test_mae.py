import math

import numpy as np
import pytest

from latentlab import Mask
from latentlab.mae import (
    MaskSampler,
    TrainConfig,
    TrainingDiverged,
    active_masked_nodes,
    decode,
    encode,
    grad_check,
    init_mae_model,
    load_model,
    loss,
    reconstruction_metrics,
    sample_mask,
    save_model,
    train,
)
from latentlab.scm import Dataset, build_scm, sample


def unit_layout(n):
    return tuple(f"o{i}" for i in range(n))


def unit_model(n=6, d_c=2, d_sm=1, hidden=(8,), seed=0):
    layout = unit_layout(n)
    return init_mae_model(layout, {v: 1 for v in layout}, d_c, d_sm, hidden=hidden, seed=seed)


def constant_dataset(n_rows=64, row=(0.3, -0.7, 1.1, 0.2)):
    layout = unit_layout(len(row))
    spans = {v: (i, 1) for i, v in enumerate(layout)}
    return Dataset(values=np.tile(np.array([row]), (n_rows, 1)), column_spans=spans, layout=layout)


# -- mask sampling ----------------------------------------------------------------


def test_sample_mask_half_of_four_patches():
    sampler = MaskSampler(0.5, 2, unit_layout(8))
    mask = sample_mask(sampler, np.random.default_rng(0))
    assert len(mask.masked) == 4


def test_sample_mask_ninety_percent():
    sampler = MaskSampler(0.9, 1, unit_layout(10))
    mask = sample_mask(sampler, np.random.default_rng(0))
    assert len(mask.masked) == 9


def test_sample_mask_clamps_to_one_patch():
    sampler = MaskSampler(0.05, 2, unit_layout(4))
    mask = sample_mask(sampler, np.random.default_rng(0))
    assert len(mask.masked) == 2  # one patch of two pixels


def test_sampler_rejects_degenerate_layout():
    with pytest.raises(ValueError, match="two patches"):
        MaskSampler(0.5, 4, unit_layout(4))


@pytest.mark.parametrize("r", [round(0.1 * k, 1) for k in range(1, 10)])
@pytest.mark.parametrize("s", [1, 2, 4])
def test_empirical_mask_ratio(r, s):
    layout = unit_layout(40)
    sampler = MaskSampler(r, s, layout)
    rng = np.random.default_rng(123)
    bound = 1.0 / sampler.num_patches
    counts = [len(sample_mask(sampler, rng).masked) for _ in range(10_000)]
    for count in counts:
        assert abs(count / len(layout) - r) <= bound + 1e-12


# -- encode / decode ----------------------------------------------------------------


def test_encode_zero_final_layer_gives_zero_code():
    model = unit_model()
    model.encoder.weights[-1][...] = 0.0
    model.encoder.biases[-1][...] = 0.0
    mask = Mask({"o0", "o1"})
    assert np.allclose(encode(model, np.zeros(4), mask), 0.0)


def test_encode_deterministic_and_coordinate_sensitive():
    model = unit_model()
    mask = Mask({"o0", "o1"})
    x = np.random.default_rng(1).standard_normal(4)
    assert np.array_equal(encode(model, x, mask), encode(model, x, mask))
    swapped = x.copy()
    swapped[[0, 1]] = swapped[[1, 0]]
    assert not np.allclose(encode(model, x, mask), encode(model, swapped, mask))


def test_encode_width_mismatch():
    model = unit_model()
    with pytest.raises(ValueError, match="visible width"):
        encode(model, np.zeros(3), Mask({"o0", "o1"}))


def test_decode_deterministic_and_degenerate_noise():
    model = unit_model(d_sm=0)
    mask = Mask({"o0"})
    chat = np.array([0.3, -0.2])
    out1 = decode(model, chat, np.empty(0), mask)
    out2 = decode(model, chat, np.empty(0), mask)
    assert np.array_equal(out1, out2)
    assert out1.shape == (6,)


def test_decode_width_mismatch():
    model = unit_model()
    with pytest.raises(ValueError, match="code width"):
        decode(model, np.zeros(5), np.zeros(1), Mask({"o0"}))


# -- loss ---------------------------------------------------------------------------


def test_loss_zero_on_exact_reconstruction():
    # all-zero model reconstructs an all-zero target exactly
    model = unit_model(d_sm=0)
    for p in model.params():
        p[...] = 0.0
    assert loss(model, np.zeros((4, 6)), Mask({"o0", "o1"}), np.random.default_rng(0)) == 0.0


def test_loss_constant_offset():
    model = unit_model(d_sm=0)
    for p in model.params():
        p[...] = 0.0
    delta = 0.37
    model.decoder.biases[-1][...] = delta
    value = loss(model, np.zeros((4, 6)), Mask({"o0", "o1"}), np.random.default_rng(0))
    assert value == pytest.approx(delta ** 2)


def test_loss_permutation_equivariant():
    model = unit_model(d_sm=0)
    mask = Mask({"o0", "o1"})
    batch = np.random.default_rng(3).standard_normal((8, 6))
    rng = np.random.default_rng
    value = loss(model, batch, mask, rng(0))
    shuffled = batch[np.random.default_rng(4).permutation(8)]
    assert loss(model, shuffled, mask, rng(0)) == pytest.approx(value)


def test_boundary_exclusion_rule():
    model = unit_model(n=6)
    layout = model.layout
    mask = Mask(set(layout[:3]))
    assert active_masked_nodes(model, mask, boundary_exclusion=False) == list(layout[:3])
    assert active_masked_nodes(model, mask, boundary_exclusion=True) == list(layout[:2])


def test_boundary_exclusion_can_empty_the_mask():
    model = unit_model(n=4)
    mask = Mask({model.layout[1]})  # lone interior pixel, both neighbors visible
    with pytest.raises(ValueError, match="removed every masked"):
        active_masked_nodes(model, mask, boundary_exclusion=True)


# -- training -----------------------------------------------------------------------


def test_train_learns_constant_target():
    cfg = TrainConfig(epochs=200, batch_size=16, seed=5)
    _, curve = train(constant_dataset(), Mask({"o0", "o1"}), d_c=1, d_sm=0, cfg=cfg, hidden=(8,))
    assert curve[-1] <= 1e-6


def test_train_deterministic():
    cfg = TrainConfig(epochs=30, batch_size=16, seed=5)
    ds = constant_dataset()
    _, a = train(ds, Mask({"o0", "o1"}), d_c=1, d_sm=2, cfg=cfg, hidden=(8,))
    _, b = train(ds, Mask({"o0", "o1"}), d_c=1, d_sm=2, cfg=cfg, hidden=(8,))
    assert a == b


def test_train_resampled_mode_needs_sampler():
    cfg = TrainConfig(epochs=1, mask_mode="resampled", seed=0)
    with pytest.raises(ValueError, match="MaskSampler"):
        train(constant_dataset(), Mask({"o0"}), d_c=1, d_sm=0, cfg=cfg)


def test_train_resampled_mode_runs(fig4):
    spec = build_scm(fig4, seed=1)
    ds = sample(spec, 256, seed=2)
    sampler = MaskSampler(0.5, 2, ds.layout)
    cfg = TrainConfig(epochs=2, batch_size=64, seed=3, mask_mode="resampled")
    _, curve = train(ds, sampler, d_c=2, d_sm=2, cfg=cfg, hidden=(16,))
    assert len(curve) == 2 and all(np.isfinite(curve))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_divergence_detected():
    cfg = TrainConfig(epochs=5, batch_size=16, step_size=1e200, seed=0)
    with pytest.raises(TrainingDiverged):
        train(constant_dataset(), Mask({"o0", "o1"}), d_c=1, d_sm=0, cfg=cfg, hidden=(8,))


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(beta1=1.0)
    with pytest.raises(ValueError):
        TrainConfig(mask_mode="sometimes")


# -- gradient check -----------------------------------------------------------------


def test_grad_check_small_models():
    rng = np.random.default_rng(0)
    worst = 0.0
    for trial in range(20):
        n = int(rng.integers(4, 7))
        model = unit_model(n=n, d_c=int(rng.integers(1, 3)), d_sm=int(rng.integers(0, 3)),
                           hidden=(int(rng.integers(4, 9)),), seed=trial)
        batch = rng.standard_normal((int(rng.integers(2, 6)), n))
        k = int(rng.integers(1, n))
        mask = Mask(set(model.layout[:k]))
        worst = max(worst, grad_check(model, batch, mask, rng=np.random.default_rng(trial)))
    assert worst <= 1e-4


def test_grad_check_detects_corruption():
    model = unit_model()
    batch = np.random.default_rng(1).standard_normal((4, 6))
    mask = Mask({"o0", "o1"})

    import latentlab.mae as mae_module

    original = mae_module._loss_and_grads

    def corrupted(*args, **kwargs):
        value, grads = original(*args, **kwargs)
        return value, [-g for g in grads]

    mae_module._loss_and_grads = corrupted
    try:
        deviation = grad_check(model, batch, mask)
    finally:
        mae_module._loss_and_grads = original
    assert deviation > 1e-2


def test_grad_check_rejects_large_models():
    model = unit_model(n=6, hidden=(128, 128))
    with pytest.raises(ValueError, match="parameters"):
        grad_check(model, np.zeros((2, 6)), Mask({"o0"}))


# -- metrics and checkpoints ----------------------------------------------------------


def test_reconstruction_metrics_examples():
    assert reconstruction_metrics(np.full(10, 0.1), np.zeros(10), peak=1.0)["psnr"] == pytest.approx(20.0)
    perfect = reconstruction_metrics(np.ones(5), np.ones(5), peak=1.0)
    assert perfect["mse"] == 0.0 and perfect["psnr"] == math.inf


def test_psnr_monotone_in_mse():
    target = np.zeros(100)
    values = [
        reconstruction_metrics(np.full(100, eps), target, peak=1.0)["psnr"]
        for eps in (0.01, 0.1, 0.5)
    ]
    assert values[0] > values[1] > values[2]


def test_checkpoint_round_trip(tmp_path):
    model = unit_model(seed=9)
    save_model(model, tmp_path / "ckpt")
    back = load_model(tmp_path / "ckpt")
    for a, b in zip(model.params(), back.params()):
        assert np.array_equal(a, b)
    assert back.layout == model.layout and back.d_c == model.d_c
