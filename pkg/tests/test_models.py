import struct
import zlib

import numpy as np
import pytest

from amdefect import tensor as T
from amdefect.dataset import ImageTile, SurrogateConfig, load_arrays, surrogate_generate
from amdefect.models import (CheckpointChecksumError, CheckpointError, CheckpointFormatError,
                             CheckpointShapeError, CheckpointTruncatedError, CheckpointVersionError, GanConfig,
                             ModelSpec, Network, build_cnn, build_dae, build_gan, checkpoint_bytes,
                             checkpoint_from_bytes, dae_decode, dae_encode, denoise, gan_sample, load_checkpoint,
                             model_id, predict, save_checkpoint, train_gan)
from amdefect.training import AdamConfig


def _cnn(shape=(32, 32, 3), k=4, filters=(8, 16, 32), seed=0):
    return Network(build_cnn(shape, k, filters=filters, label_set="hr1" if k == 4 else None,
                             class_names=["no-defect", "seeded_1", "seeded_2", "seeded_3"] if k == 4 else None),
                   seed=seed)


class TestCnn:
    def test_output_rows(self, rng):
        probs = _cnn().forward(rng.random((5, 32, 32, 3))).data
        assert probs.shape == (5, 4)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-5)

    def test_hidden_128(self):
        dense = [l for l in build_cnn((400, 400, 3), 4).layers if l["kind"] == "dense"]
        assert dense[0]["units"] == 128
        assert dense[-1]["units"] == 4

    @pytest.mark.parametrize("shape,filters,k", [((400, 400, 3), (16, 32, 64), 4), ((64, 64, 3), (8, 16, 32), 7),
                                                 ((32, 48, 1), (4, 4, 4), 2)])
    def test_param_count_closed_form(self, shape, filters, k):
        h, w, c = shape
        f1, f2, f3 = filters
        convs = (9 * c * f1 + f1) + (9 * f1 * f2 + f2) + (9 * f2 * f3 + f3)
        flat = (h // 8) * (w // 8) * f3
        expected = convs + flat * 128 + 128 + 128 * k + k
        assert build_cnn(shape, k, filters=filters).param_count() == expected

    def test_stage_shapes_400(self):
        shapes = build_cnn((400, 400, 3), 4).shapes()
        assert (50, 50, 64) in shapes and (160000,) in shapes

    def test_indivisible_input(self):
        with pytest.raises(ValueError):
            build_cnn((30, 32, 3))

    def test_8bit_input_range(self, rng):
        x = rng.random((2, 16, 16, 3))
        unit = Network(build_cnn((16, 16, 3), 4, filters=(4, 4, 4)), seed=1)
        eight = Network(build_cnn((16, 16, 3), 4, filters=(4, 4, 4), input_range="8bit"), seed=1)
        np.testing.assert_allclose(unit.forward(x).data, eight.forward(x * 255).data, atol=1e-5)


class TestPredict:
    def test_batch_invariance(self, rng):
        net = _cnn()
        x = rng.random((9, 32, 32, 3)).astype(np.float32)
        probs, labels = predict(net, x, batch_size=4)
        one, _ = predict(net, x[3:4])
        np.testing.assert_allclose(one[0], probs[3], atol=1e-5)
        assert labels.tolist() == probs.argmax(axis=1).tolist()

    def test_untrained_near_uniform(self, rng):
        # symmetry holds over the init distribution: average over init seeds
        x = rng.random((100, 32, 32, 3))
        means = np.array([predict(_cnn(seed=s), x)[0].mean(axis=0) for s in range(10)])
        np.testing.assert_allclose(means.mean(axis=0), 0.25, atol=0.05)
        assert np.abs(means - 0.25).max() < 0.2

    def test_shape_error_names_tile(self, rng):
        tiles = [ImageTile(rng.random((32, 32, 3)), "a"), ImageTile(rng.random((16, 32, 3)), "bad_tile")]
        with pytest.raises(T.ShapeError, match="bad_tile"):
            predict(_cnn(), tiles)

    def test_empty(self):
        probs, labels = predict(_cnn(), [])
        assert probs.shape == (0, 4) and labels.shape == (0,)


class TestDae:
    def test_bottleneck_400(self):
        spec = build_dae((400, 400, 3))
        assert spec.shapes()[spec.meta["bottleneck_layer"] - 1] == (100, 100, 32)
        dae = Network(spec, seed=0)
        with T.no_grad():
            code = dae_encode(dae, np.zeros((1, 400, 400, 3), np.float32))
        assert code.shape == (1, 100, 100, 32)

    def test_output_range_and_shape(self, rng):
        dae = Network(build_dae((32, 32, 3), filters=8), seed=0)
        x = rng.random((3, 32, 32, 3))
        out = denoise(dae, x)
        assert out.shape == x.shape
        assert out.min() > 0.0 and out.max() < 1.0

    def test_encode_decode_composes(self, rng):
        dae = Network(build_dae((16, 16, 3), filters=4), seed=0)
        x = rng.random((2, 16, 16, 3)).astype(np.float32)
        with T.no_grad():
            np.testing.assert_array_equal(dae_decode(dae, dae_encode(dae, x)).data, dae.forward(x).data)


class TestGanShapes:
    def test_generator(self):
        gspec, dspec = build_gan(16, (16, 16, 3), seed_channels=8, gen_filters=(8, 4), disc_filters=(4, 8, 8))
        gen = Network(gspec, seed=0)
        z = np.random.default_rng(0).standard_normal((8, 16))
        out = gen.forward(z).data
        assert out.shape == (8, 16, 16, 3)
        assert out.min() > 0 and out.max() < 1
        np.testing.assert_array_equal(out, gen.forward(z).data)

    def test_discriminator(self, rng):
        _, dspec = build_gan(16, (16, 16, 3), disc_filters=(4, 8, 8))
        out = Network(dspec, seed=0).forward(rng.random((5, 16, 16, 3))).data
        assert out.shape == (5, 1)
        assert np.all((out > 0) & (out < 1))

    def test_sample_reproducible_and_empty(self):
        gspec, _ = build_gan(16, (16, 16, 3), seed_channels=8, gen_filters=(8, 4))
        gen = Network(gspec, seed=0)
        a = gan_sample(gen, 5, seed=3, label="seeded_1")
        b = gan_sample(gen, 5, seed=3, label="seeded_1")
        assert all(np.array_equal(x.pixels, y.pixels) for x, y in zip(a, b))
        assert {t.label for t in a} == {"seeded_1"}
        assert gan_sample(gen, 0) == []


def _small_gan(real, steps, seed=0):
    cfg = GanConfig(steps=steps, batch_size=8, latent_dim=32, adam=AdamConfig(lr=1e-3, beta1=0.5), seed=seed)
    gspec, dspec = build_gan(32, real.shape[1:], seed_channels=32, gen_filters=(32, 16), disc_filters=(8, 16, 32))
    return train_gan(real, cfg, label="seeded_1", gen=Network(gspec, seed=seed), disc=Network(dspec, seed=seed + 1))


@pytest.fixture(scope="module")
def gan_real(tmp_path_factory):
    cfg = SurrogateConfig(tile_size=32, counts={"seeded_1": 64}, seed=11)
    m, _ = surrogate_generate(cfg, tmp_path_factory.mktemp("gan"))
    x, _ = load_arrays(m)
    return x[:48], x[48:]


class TestGanTraining:
    def test_one_step_moves_both(self, gan_real):
        real, _ = gan_real
        gspec, dspec = build_gan(32, real.shape[1:], seed_channels=32, gen_filters=(32, 16),
                                 disc_filters=(8, 16, 32))
        g0, d0 = Network(gspec, seed=0), Network(dspec, seed=1)
        g_init = {k: v.copy() for k, v in g0.params.items()}
        d_init = {k: v.copy() for k, v in d0.params.items()}
        gen, disc, hist = train_gan(real, GanConfig(steps=1, batch_size=8, latent_dim=32), gen=g0, disc=d0)
        assert sum(np.abs(gen.params[k] - g_init[k]).sum() for k in g_init) > 0
        assert sum(np.abs(disc.params[k] - d_init[k]).sum() for k in d_init) > 0
        assert len(hist.d_loss) == len(hist.g_loss) == 1

    def test_bitwise_reproducible(self, gan_real):
        real, _ = gan_real
        a, _, _ = _small_gan(real, 3, seed=4)
        b, _, _ = _small_gan(real, 3, seed=4)
        assert checkpoint_bytes(a) == checkpoint_bytes(b)

    def test_too_few_tiles(self, gan_real):
        with pytest.raises(ValueError):
            train_gan(gan_real[0][:3], GanConfig(batch_size=8))

    def test_trained_sanity_bands(self, gan_real):
        real, held_out = gan_real
        gen, disc, _ = _small_gan(real, 150, seed=0)
        fake = np.stack([t.pixels for t in gan_sample(gen, len(held_out), seed=99)])
        with T.no_grad():
            d_real = disc.forward(held_out).data.ravel()
            d_fake = disc.forward(fake).data.ravel()
        acc = (np.sum(d_real > 0.5) + np.sum(d_fake <= 0.5)) / (len(d_real) + len(d_fake))
        assert 0.05 < acc < 0.99
        assert abs(fake.mean() - real.mean()) <= 0.2


class TestCheckpoint:
    def _net(self):
        net = Network(build_gan(8, (8, 8, 3), seed_channels=4, gen_filters=(4, 4))[0], seed=3)
        net.bn["02"].running_mean[:] = np.arange(net.bn["02"].running_mean.size)
        net.metadata = {"label": "seeded_2"}
        return net

    def test_round_trip_bitwise(self, tmp_path):
        net = self._net()
        save_checkpoint(net, tmp_path / "m.fgs")
        back = load_checkpoint(tmp_path / "m.fgs")
        assert checkpoint_bytes(back) == (tmp_path / "m.fgs").read_bytes()
        for k in net.params:
            assert net.params[k].tobytes() == back.params[k].tobytes()
        for k, v in net.buffers().items():
            assert v.tobytes() == back.buffers()[k].tobytes()
        assert back.metadata == {"label": "seeded_2"}
        assert model_id(back) == model_id(net)

    def test_predictions_identical(self, tmp_path, rng):
        net = _cnn(filters=(4, 8, 8))
        save_checkpoint(net, tmp_path / "c.fgs")
        x = rng.random((6, 32, 32, 3))
        assert predict(net, x)[0].tobytes() == predict(load_checkpoint(tmp_path / "c.fgs"), x)[0].tobytes()

    def test_layout(self):
        buf = checkpoint_bytes(self._net())
        assert buf[:4] == b"FGS1"
        assert struct.unpack("<I", buf[4:8])[0] == 1
        n = struct.unpack("<I", buf[8:12])[0]
        assert buf[12:12 + n].startswith(b"{")
        assert struct.unpack("<I", buf[-4:])[0] == zlib.crc32(buf[:-4])

    def test_bad_magic(self):
        buf = bytearray(checkpoint_bytes(self._net()))
        buf[0:4] = b"XXXX"
        with pytest.raises(CheckpointFormatError):
            checkpoint_from_bytes(bytes(buf))

    def test_bad_version(self):
        buf = bytearray(checkpoint_bytes(self._net()))
        buf[4:8] = struct.pack("<I", 9)
        with pytest.raises(CheckpointVersionError):
            checkpoint_from_bytes(bytes(buf))

    def test_every_truncation_is_typed(self):
        buf = checkpoint_bytes(self._net())
        for n in range(0, len(buf), 7):
            with pytest.raises(CheckpointError):
                checkpoint_from_bytes(buf[:n])
        with pytest.raises(CheckpointTruncatedError):
            checkpoint_from_bytes(buf[:-1])

    def test_byte_flips_never_load(self):
        buf = checkpoint_bytes(self._net())
        rng = np.random.default_rng(0)
        for pos in rng.choice(len(buf), size=300, replace=False):
            bad = bytearray(buf)
            bad[pos] ^= 1 << int(rng.integers(8))
            with pytest.raises(CheckpointError):
                checkpoint_from_bytes(bytes(bad))

    def test_data_flip_is_checksum_error(self):
        buf = bytearray(checkpoint_bytes(self._net()))
        buf[-10] ^= 0xFF
        with pytest.raises(CheckpointChecksumError):
            checkpoint_from_bytes(bytes(buf))

    def test_shape_mismatch(self):
        net = self._net()
        bigger = Network(ModelSpec.from_dict(net.spec.to_dict()), seed=0)
        bigger.params["00.bias"] = np.zeros(net.params["00.bias"].size + 1, np.float32)
        with pytest.raises(CheckpointShapeError):
            checkpoint_from_bytes(checkpoint_bytes(bigger))
        fewer = Network(ModelSpec.from_dict(net.spec.to_dict()), seed=0)
        del fewer.params["00.bias"]
        with pytest.raises(CheckpointShapeError):
            checkpoint_from_bytes(checkpoint_bytes(fewer))
