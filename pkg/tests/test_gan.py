import math

import numpy as np
import pytest

from fedsynth import busgen, gan
from fedsynth.busgen import ClientShard
from fedsynth.gradcheck import numeric_grad_at, rel_error


def small_pair(seed=0):
    pair = gan.GanPair.create(0, seed)
    pair.generator = pair.generator.astype(np.float64)
    pair.discriminator = pair.discriminator.astype(np.float64)
    return pair


def test_discriminator_loss_at_half():
    p = np.full((8, 1), 0.5)
    value, *_ = gan.discriminator_loss(p, p)
    assert math.isclose(value, 2 * math.log(2), rel_tol=1e-9)


def test_perfect_discriminator_loss():
    value, *_ = gan.discriminator_loss(np.full((4, 1), 1 - 1e-7), np.full((4, 1), 1e-7))
    assert math.isclose(value, 2e-7, rel_tol=1e-3)


def test_generator_loss_at_half():
    value, _ = gan.generator_loss(np.full((5, 1), 0.5))
    assert math.isclose(value, math.log(2), rel_tol=1e-9)


def test_smoothed_real_target():
    p = np.full((3, 1), 0.9)
    value, *_ = gan.discriminator_loss(p, np.full((3, 1), 1e-7), smoothing=0.1)
    expected = -(0.9 * math.log(0.9) + 0.1 * math.log(0.1)) + -math.log(1 - 1e-7)
    assert math.isclose(value, expected, rel_tol=1e-9)


def test_d_step_leaves_generator_untouched():
    pair = gan.GanPair.create(0, 1)
    before = pair.generator.params().copy()
    rng = np.random.default_rng(0)
    real = rng.random((4, 1, 32, 32), dtype=np.float32)
    z = rng.standard_normal((4, gan.LATENT_DIM)).astype(np.float32)
    d_before = pair.discriminator.params().copy()
    gan.d_step(pair, real, z)
    assert pair.generator.params().equal(before)
    assert not pair.discriminator.params().equal(d_before)


def test_g_step_leaves_discriminator_untouched():
    pair = gan.GanPair.create(0, 1)
    before = pair.discriminator.params().copy()
    z = np.random.default_rng(0).standard_normal((4, gan.LATENT_DIM)).astype(np.float32)
    gan.g_step(pair, z)
    assert pair.discriminator.params().equal(before)


@pytest.mark.parametrize("which", ["generator", "discriminator"])
def test_objective_gradients_match_finite_differences(which):
    pair = small_pair()
    rng = np.random.default_rng(3)
    real = rng.random((2, 1, 32, 32))
    z = rng.standard_normal((2, gan.LATENT_DIM))
    if which == "generator":
        grads = gan.g_grads(pair, z)[1]
        params = pair.generator.params()

        def f():
            return gan.g_grads(pair, z)[0]
    else:
        grads = gan.d_grads(pair, real, z, 0.1)[1]
        params = pair.discriminator.params()

        def f():
            return gan.discriminator_loss(
                pair.discriminator(real), pair.discriminator(pair.generate(z)), 0.1
            )[0]

    # first-layer biases move thousands of leaky-relu inputs; a 1e-7 stencil rarely straddles a kink
    pick = np.random.default_rng(0)
    for name, arr in params.items():
        idx = pick.choice(arr.size, size=min(arr.size, 6), replace=False)
        num = numeric_grad_at(f, arr, idx, eps=1e-7)
        ana = grads[name].reshape(-1)[idx]
        if max(np.abs(ana).max(), np.abs(num).max()) < 1e-7:
            continue  # bias ahead of a norm layer: true gradient is zero
        assert rel_error(ana, num) < 1e-3, name


def test_nonfinite_loss_names_the_term():
    with pytest.raises(gan.GanDiverged, match="fake"):
        gan._check(float("nan"), {"real": 1.0, "fake": float("nan")}, "discriminator")


def test_test_split_images_are_refused():
    img = np.zeros((32, 32), np.float32)
    data = ClientShard(0, [img, img], [0, 0], ["train", "test"])
    with pytest.raises(gan.LeakageError):
        gan.train_gan(0, data, gan.GanTrainConfig(epochs=1))


class Poisoned(np.ndarray):
    def __array_finalize__(self, obj):
        pass

    def __array__(self, *a, **k):
        raise AssertionError("test image was read")


def test_pooling_never_reads_test_images():
    shards = busgen.build_federation(0, 0.1)
    poison = np.zeros((32, 32), np.float32).view(Poisoned)
    for s in shards:
        for i in s.indices("test"):
            s.images[i] = poison
    pooled = gan.pooled_training_set(shards)
    assert "test" not in pooled.splits
    assert len(pooled.images) == sum(len(s.indices("train", "val")) for s in shards)
    gan.class_images(pooled, 0)


def test_training_is_deterministic():
    shards = busgen.build_federation(0, 0.1)
    pooled = gan.pooled_training_set(shards)
    cfg = gan.GanTrainConfig(epochs=1, seed=4)
    a, ha = gan.train_gan(1, pooled, cfg)
    b, hb = gan.train_gan(1, pooled, cfg)
    assert a.params().equal(b.params())
    assert ha.rows == hb.rows
    sa = gan.gan_sample(a, 70, 9)
    sb = gan.gan_sample(b, 70, 9)
    assert all(np.array_equal(x, y) for (x, _), (y, _) in zip(sa, sb))
    assert ha.to_csv().startswith("epoch,d_loss,g_loss\n1,")


def test_samples_are_valid_images():
    pair = gan.GanPair.create(1, 0)
    out = gan.gan_sample(pair, 5, 0)
    assert len(out) == 5 and all(lbl == 1 for _, lbl in out)
    for img, _ in out:
        assert img.shape == (32, 32) and img.dtype == np.float32
        assert img.min() >= 0 and img.max() <= 1
    assert gan.gan_sample(pair, 0, 0) == []


@pytest.mark.slow
def test_trained_gan_equilibrium_and_moments():
    rng = np.random.default_rng(11)
    imgs = [
        busgen.generate_image(busgen.sample_spec(0, busgen.PROFILES[i % 3], rng), 1000 + i)
        for i in range(400)
    ]
    train = ClientShard(0, imgs[:300], [0] * 300, ["train"] * 300)
    pair, history = gan.train_gan(0, train, gan.GanTrainConfig(epochs=200, seed=0))
    assert len(history.rows) == 200
    held = np.stack(imgs[300:])[:, None]
    d_mean = float(pair.discriminator(held).mean())
    assert 0.3 <= d_mean <= 0.7
    samples = np.stack([x for x, _ in gan.gan_sample(pair, 1000, 5)])
    real_mean = float(np.stack(imgs[:300]).mean())
    assert abs(float(samples.mean()) - real_mean) <= 0.15
