import csv
import logging

import numpy as np
import pytest

from octsr.acquisition import Factors, degrade, skip_spatial, spectral_image
from octsr.mssmn import MSSMN, ExtractorConfig, MetaConfig
from octsr.phantom import PhantomConfig, generate_phantom
from octsr.training import (
    OctDataset,
    Sample,
    TrainConfig,
    TrainingDiverged,
    adam_step,
    common_crop,
    evaluate_factor,
    l1_loss,
    learning_rate,
    sample_batch,
    train,
)
from octsr import numerics as nx
from oracles import l1_naive


def small_phantoms(n, seed0=0, **kw):
    out = []
    kw = {"n_k": 256, "w_lines": 96, **kw}
    for i in range(n):
        frame, ref = generate_phantom(PhantomConfig(seed=seed0 + i, **kw))
        out.append(Sample(frame, ref, f"p{i}"))
    return out


@pytest.fixture(scope="module")
def small_ds():
    s = small_phantoms(5)
    return OctDataset({"train": s[:3], "val": s[3:4], "test": s[4:]})


def small_cfg(**kw):
    base = dict(patch_size=24, factor_set=[(2, 2), (3, 3)], epochs=2, steps_per_epoch=3,
                val_max_images=1, seed=4)
    base.update(kw)
    return TrainConfig(**base)


def small_model(seed=0):
    return MSSMN(ExtractorConfig(fC=4, n_groups=1, n_blocks_per_group=1, attention_reduction=2),
                 MetaConfig(16, 16), seed=seed)


# -- config and schedule ---------------------------------------------------------


def test_learning_rate_schedule_exact():
    cfg = TrainConfig(lr0=1e-4, lr_half_every=8)
    assert [learning_rate(cfg, e) for e in (0, 7, 8, 15, 16, 39)] == \
        [1e-4, 1e-4, 5e-5, 5e-5, 2.5e-5, 1e-4 * 2.0 ** -4]


@pytest.mark.parametrize("kw", [
    {"patch_size": 50},                       # not divisible by 3 or 4
    {"factor_set": [(2, 2.5)]},               # non-integer m
    {"factor_set": []},
    {"lr0": 0.0},
    {"factor_set": [(0.5, 2)]},
])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw).validate()


def test_default_config_is_valid():
    TrainConfig().validate()


# -- batches ---------------------------------------------------------------------


def test_batch_shapes(small_ds):
    rng = np.random.default_rng(0)
    lr, hr = sample_batch(small_ds, Factors(2, 2), small_cfg(), rng)
    assert lr.shape == (16, 1, 12, 12) and hr.shape == (16, 1, 24, 24)
    assert lr.dtype == hr.dtype == np.float32


def test_batch_patch_64_scale_2():
    s = small_phantoms(1, n_k=512)
    ds = OctDataset({"train": [*s]})
    cfg = TrainConfig(patch_size=64, patches_per_batch=4, factor_set=[(2, 2)])
    lr, hr = sample_batch(ds, Factors(2, 2), cfg, np.random.default_rng(0))
    assert lr.shape == (4, 1, 32, 32) and hr.shape == (4, 1, 64, 64)


def _flip(x, fr, fc):
    return x[::-1 if fr else 1, ::-1 if fc else 1]


def _locate(ref, patch):
    """Grid cell and flips that produce ``patch`` from ``ref``."""
    p = patch.shape[0]
    H, W = ref.shape
    for r in range(0, H - p + 1, p):
        for c in range(0, W - p + 1, p):
            for fr in (False, True):
                for fc in (False, True):
                    if np.array_equal(_flip(ref[r:r + p, c:c + p], fr, fc), patch):
                        return r, c, fr, fc
    raise AssertionError("patch not found on the grid")


@pytest.mark.parametrize("m", [2, 3])
def test_batch_crops_disjoint_and_paired(small_ds, m):
    cfg = small_cfg(flip_augment=True)
    lr, hr = sample_batch(small_ds, Factors(m, m), cfg, np.random.default_rng(m), index=0)
    sample = small_ds.split("train")[0]
    degraded = spectral_image(sample.frame, m).pixels
    spots, flips = [], set()
    for b in range(hr.shape[0]):
        r, c, fr, fc = _locate(sample.reference.pixels, hr[b, 0])
        spots.append((r, c))
        flips.add((fr, fc))
        # the LR partner is the same crop of the degraded image, flipped alike, then skipped
        crop = np.ascontiguousarray(_flip(degraded[r:r + 24, c:c + 24], fr, fc))
        assert np.array_equal(skip_spatial(crop, m).pixels, lr[b, 0])
    assert len(set(spots)) == len(spots)
    assert len(flips) > 1


def test_batches_deterministic_without_flips(small_ds):
    cfg = small_cfg(flip_augment=False)
    a = sample_batch(small_ds, Factors(2, 2), cfg, np.random.default_rng(5))
    b = sample_batch(small_ds, Factors(2, 2), cfg, np.random.default_rng(5))
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_small_images_skipped_with_warning(small_ds, caplog):
    tiny = small_phantoms(1, n_k=64)[0]
    ds = OctDataset({"train": [tiny, *small_ds.split("train")]})
    with caplog.at_level(logging.WARNING):
        lr, hr = sample_batch(ds, Factors(2, 2), small_cfg(), np.random.default_rng(0), index=0)
    assert "too small" in caplog.text
    assert hr.shape[0] == 16


def test_empty_dataset_rejected():
    with pytest.raises(ValueError, match="no 'train'"):
        sample_batch(OctDataset({}), Factors(2, 2), small_cfg(), np.random.default_rng(0))


# -- loss and optimiser ------------------------------------------------------------


def test_l1_values():
    a = np.random.default_rng(0).random((2, 1, 4, 4))
    assert l1_loss(a, a).item() == 0.0
    assert l1_loss(a + 0.5, a).item() == pytest.approx(0.5, abs=1e-12)
    with pytest.raises(ValueError):
        l1_loss(a, a[:, :, :3])


def test_l1_matches_loop_oracle():
    rng = np.random.default_rng(1)
    for _ in range(20):
        a, b = rng.random((2, 3, 1, 5, 4))
        assert abs(l1_loss(a, b).item() - l1_naive(a, b)) <= 1e-7


def test_adam_zero_grad_keeps_params():
    p = nx.Parameter("w", np.array([1.0, -2.0]))
    adam_step([p], 1, 0.1)
    assert np.array_equal(p.data, [1.0, -2.0])
    assert not p.m.any() and not p.v.any()


def test_adam_zero_grad_decays_moments():
    p = nx.Parameter("w", np.array([1.0, -2.0]))
    p.m[...] = 0.5
    p.v[...] = 0.25
    adam_step([p], 3, 0.1)
    assert np.array_equal(p.m, [0.9 * 0.5] * 2) and np.array_equal(p.v, [0.999 * 0.25] * 2)


def test_adam_first_step_magnitude():
    p = nx.Parameter("w", np.array([0.0]))
    p.grad = np.array([1.0])
    adam_step([p], 1, 0.1)
    assert abs(abs(p.data[0]) - 0.1) <= 1e-6


def test_adam_deterministic():
    def run():
        p = nx.Parameter("w", np.linspace(-1, 1, 5))
        for step in range(1, 6):
            p.grad = np.sin(p.data * step)
            adam_step([p], step, 0.05)
        return p.data
    assert np.array_equal(run(), run())


# -- training loop -----------------------------------------------------------------


def test_zero_epochs_leaves_model_unchanged(small_ds):
    model = small_model()
    before = {k: v[0].copy() for k, v in model.state_dict().items()}
    out, tlog = train(small_ds, small_cfg(epochs=0), model)
    assert all(np.array_equal(before[k], p.data) for k, p in out.params.items())
    assert tlog.steps == [] and tlog.epochs == []


def test_training_log_is_reproducible(small_ds, tmp_path):
    _, a = train(small_ds, small_cfg(), small_model(), tmp_path / "a")
    _, b = train(small_ds, small_cfg(), small_model(), tmp_path / "b")
    assert a.steps == b.steps and a.epochs == b.epochs
    for name in ("steps.csv", "epochs.csv", "last.mssm", "best.mssm"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_training_log_records(small_ds, tmp_path):
    cfg = small_cfg(epochs=2, steps_per_epoch=4)
    _, tlog = train(small_ds, cfg, small_model(), tmp_path)
    assert [s[0] for s in tlog.steps] == list(range(8))
    assert all((l, m) in {(2.0, 2.0), (3.0, 3.0)} for _, _, l, m, _ in tlog.steps)
    keys = [(e, l, m) for e, l, m, _, _ in tlog.epochs]
    assert len(keys) == len(set(keys)) == 2 * 2
    with open(tmp_path / "steps.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["step", "epoch", "l", "m", "loss"] and len(rows) == 9
    with open(tmp_path / "epochs.csv") as fh:
        assert next(csv.reader(fh)) == ["epoch", "l", "m", "val_psnr", "val_ssim"]
    assert tlog.best_epoch in (0, 1) and tlog.best_state is not None


def test_training_only_uses_configured_factors(small_ds):
    model = small_model()
    seen = []
    original = model.forward

    def spy(image, lhat, mhat):
        seen.append((lhat, mhat))
        return original(image, lhat, mhat)

    model.forward = spy
    train(small_ds, small_cfg(factor_set=[(3, 3)]), model)
    assert seen and set(seen) == {(3.0, 3.0)}


def test_nan_loss_aborts_with_diagnostic(small_ds):
    model = small_model()
    model.params["head.bias"].data[...] = np.nan
    with pytest.raises(TrainingDiverged, match=r"step 0.*factor.*lr"):
        train(small_ds, small_cfg(), model)


def test_train_needs_training_images():
    with pytest.raises(ValueError, match="training"):
        train(OctDataset({"val": small_phantoms(1)}), small_cfg(), small_model())


def test_loss_halves_on_single_factor():
    samples = [Sample(*generate_phantom(PhantomConfig(seed=100 + i)), f"s{i}") for i in range(16)]
    ds = OctDataset({"train": samples})
    cfg = TrainConfig(factor_set=[(2, 2)], epochs=10, steps_per_epoch=20, lr_half_every=100, seed=1)
    _, tlog = train(ds, cfg, MSSMN(seed=1))
    losses = [s[-1] for s in tlog.steps]
    assert len(losses) == 200
    assert np.mean(losses[-10:]) < 0.5 * losses[0]


# -- evaluation --------------------------------------------------------------------


def test_common_crop():
    a, b = common_crop(np.zeros((10, 7)), np.ones((8, 9)))
    assert a.shape == b.shape == (8, 7)


def test_evaluate_factor_with_callable(small_ds):
    from octsr.baseline import upsample_nearest
    samples = small_ds.split("test")
    p, s = evaluate_factor(lambda img, lh, mh: upsample_nearest(img, mh), samples, 1, 1)
    p2, _ = evaluate_factor(lambda img, lh, mh: upsample_nearest(img, mh), samples, 2, 2)
    assert p > p2 and 0 < s <= 1
    ref = samples[0].reference
    lr = degrade(samples[0].frame, Factors(2, 2))
    assert np.isfinite(p2) and upsample_nearest(lr, 2).shape == ref.shape
