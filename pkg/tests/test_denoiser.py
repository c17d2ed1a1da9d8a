"""MLP denoiser: preconditioning, handwritten gradients, training, checkpoints."""

import numpy as np
import pytest

from famelab.denoiser import (
    MlpDenoiser,
    TrainConfig,
    load_checkpoint,
    loss_and_grad,
    save_checkpoint,
    train,
)
from famelab.errors import (
    InvalidArgumentError,
    MalformedFileError,
    NotFoundError,
    TrainingDivergedError,
)
from famelab.gmm import GmmComponent, GmmSpec, ideal_denoiser
from famelab.schedule import Rng
from tests.test_gmm import two_mode_1d


def small_spec():
    return GmmSpec(
        {
            1: [GmmComponent(np.array([-1.5, 0.0]), 0.2 * np.eye(2), 1.0, 2.6)],
            2: [GmmComponent(np.array([1.5, 0.5]), 0.2 * np.eye(2), 1.0, 2.6)],
        },
        {1: 0.5, 2: 0.5},
    )


class TestForward:
    def test_init_is_pure_skip_connection(self):
        """Zero-initialized output layer: D(x; sigma) = x / (sigma^2 + 1)."""
        model = MlpDenoiser(dim=2, n_classes=4, seed=0)
        x = np.array([[1.0, -2.0], [0.5, 3.0]])
        for sigma in (0.05, 1.0, 10.0):
            np.testing.assert_allclose(
                model.forward(x, sigma), x / (sigma**2 + 1.0), atol=1e-14
            )

    def test_single_matches_batch(self):
        model = train(small_spec(), TrainConfig(steps=30, batch_size=32, seed=1))
        x = Rng(0).standard_normal((5, 2))
        batch = model.forward(x, 0.7, 2)
        # matmul accumulation order varies with batch shape, so agreement is
        # to rounding, not bitwise (the sampler pads to fixed shapes instead)
        for i in range(5):
            np.testing.assert_allclose(batch[i], model.forward(x[i], 0.7, 2), rtol=1e-12)

    def test_conditioning_changes_output_after_training(self):
        model = train(small_spec(), TrainConfig(steps=200, batch_size=64, seed=2))
        x = np.array([[0.0, 0.0]])
        d1 = model.forward(x, 1.0, 1)
        d2 = model.forward(x, 1.0, 2)
        d0 = model.forward(x, 1.0, None)
        assert not np.allclose(d1, d2)
        assert not np.allclose(d1, d0)

    def test_per_sample_sigma_and_tokens(self):
        model = MlpDenoiser(dim=2, n_classes=3, seed=3)
        x = Rng(1).standard_normal((4, 2))
        sig = np.array([0.1, 0.5, 1.0, 2.0])
        tokens = np.array([0, 1, 2, 3])
        out = model.forward(x, sig, tokens)
        for i in range(4):
            np.testing.assert_array_equal(
                out[i], model.forward(x[i], sig[i], int(tokens[i]))
            )

    def test_validation(self):
        model = MlpDenoiser(dim=2, n_classes=3, seed=0)
        x = np.zeros((2, 2))
        with pytest.raises(InvalidArgumentError):
            model.forward(np.zeros((2, 3)), 1.0)
        with pytest.raises(InvalidArgumentError):
            model.forward(x, 0.0)
        with pytest.raises(NotFoundError):
            model.forward(x, 1.0, 4)
        with pytest.raises(NotFoundError):
            model.forward(x, 1.0, -1)


class TestGradients:
    def test_matches_finite_differences_on_every_tensor(self):
        """Central differences on at least 32 parameters spread over all
        tensors; relative error under 1e-4."""
        model = MlpDenoiser(dim=2, n_classes=3, seed=7)
        # give the zero output layer something to backprop through
        model.params["w3"] = Rng(8).standard_normal((128, 2)) * 0.1
        rng = Rng(9)
        B = 8
        x0 = rng.standard_normal((B, 2))
        sigma = np.exp(rng.uniform(np.log(0.1), np.log(3.0), B))
        tokens = rng.integers(0, 4, B)
        eps = rng.standard_normal((B, 2))

        _, grads = loss_and_grad(model, x0, sigma, tokens, eps)
        pick = np.random.default_rng(10)
        checked = 0
        for key in sorted(model.params):
            flat = model.params[key].ravel()
            gflat = grads[key].ravel()
            idx = pick.choice(flat.size, size=min(4, flat.size), replace=False)
            for i in idx:
                h = 1e-5 * max(1.0, abs(flat[i]))
                orig = flat[i]
                flat[i] = orig + h
                lp, _ = loss_and_grad(model, x0, sigma, tokens, eps)
                flat[i] = orig - h
                lm, _ = loss_and_grad(model, x0, sigma, tokens, eps)
                flat[i] = orig
                fd = (lp - lm) / (2 * h)
                denom = max(1e-8, abs(fd) + abs(gflat[i]))
                assert abs(fd - gflat[i]) / denom < 1e-4, (key, i, fd, gflat[i])
                checked += 1
        assert checked >= 32

    def test_embedding_rows_untouched_by_batch_have_zero_grad(self):
        model = MlpDenoiser(dim=2, n_classes=3, seed=1)
        model.params["w3"] = Rng(2).standard_normal((128, 2)) * 0.1
        rng = Rng(3)
        x0 = rng.standard_normal((6, 2))
        tokens = np.array([1, 1, 3, 3, 1, 3])
        _, grads = loss_and_grad(model, x0, np.full(6, 0.5), tokens, rng.standard_normal((6, 2)))
        assert np.all(grads["emb"][0] == 0)
        assert np.all(grads["emb"][2] == 0)
        assert np.any(grads["emb"][1] != 0)
        assert np.any(grads["emb"][3] != 0)

    def test_non_finite_loss_raises(self):
        model = MlpDenoiser(dim=2, n_classes=2, seed=0)
        model.params["b3"][:] = np.inf
        with pytest.raises(TrainingDivergedError):
            loss_and_grad(
                model, np.zeros((2, 2)), np.ones(2), np.zeros(2, dtype=int), np.zeros((2, 2))
            )


class TestTraining:
    def test_loss_decreases_and_model_approaches_ideal(self):
        spec = small_spec()
        model = train(spec, TrainConfig(steps=800, batch_size=128, seed=4))
        init = MlpDenoiser(2, 2, seed=999)
        rng = Rng(5)
        x = rng.standard_normal((64, 2)) * 2.0
        for sigma in (0.3, 1.0):
            want = ideal_denoiser(spec, x, sigma, 1)
            err_trained = np.abs(model.forward(x, sigma, 1) - want).mean()
            err_init = np.abs(init.forward(x, sigma, 1) - want).mean()
            assert err_trained < 0.5 * err_init

    def test_deterministic(self):
        spec = two_mode_1d()
        cfg = TrainConfig(steps=50, batch_size=32, seed=11)
        a = train(spec, cfg)
        b = train(spec, cfg)
        np.testing.assert_array_equal(a.flat_params(), b.flat_params())
        assert a.fingerprint() == b.fingerprint()

    def test_seed_changes_model(self):
        spec = two_mode_1d()
        a = train(spec, TrainConfig(steps=50, batch_size=32, seed=11))
        b = train(spec, TrainConfig(steps=50, batch_size=32, seed=12))
        assert not np.array_equal(a.flat_params(), b.flat_params())

    def test_divergence_reports_step(self):
        """Adam steps scale with lr, so an absurd rate overflows the forward
        pass within a few steps and must raise with the step recorded."""
        spec = two_mode_1d()
        with pytest.raises(TrainingDivergedError) as exc:
            train(spec, TrainConfig(steps=400, batch_size=8, lr=1e60, seed=0))
        assert exc.value.step is not None

    def test_config_validation(self):
        with pytest.raises(InvalidArgumentError):
            TrainConfig(steps=0)
        with pytest.raises(InvalidArgumentError):
            TrainConfig(sigma_lo=2.0, sigma_hi=1.0)
        with pytest.raises(InvalidArgumentError):
            TrainConfig(label_dropout=1.0)
        with pytest.raises(InvalidArgumentError):
            TrainConfig(lr=0.0)


class TestCheckpoint:
    def test_round_trip_bytes_exact(self, tmp_path):
        model = train(small_spec(), TrainConfig(steps=40, batch_size=32, seed=6))
        p1 = tmp_path / "a.ckpt"
        p2 = tmp_path / "b.ckpt"
        save_checkpoint(model, p1)
        back = load_checkpoint(p1)
        save_checkpoint(back, p2)
        assert p1.read_bytes() == p2.read_bytes()
        assert back.dim == model.dim and back.n_classes == model.n_classes

    def test_loaded_model_matches_to_float32(self, tmp_path):
        model = train(small_spec(), TrainConfig(steps=40, batch_size=32, seed=6))
        p = tmp_path / "m.ckpt"
        save_checkpoint(model, p)
        back = load_checkpoint(p)
        x = Rng(7).standard_normal((8, 2))
        np.testing.assert_allclose(
            back.forward(x, 0.8, 1), model.forward(x, 0.8, 1), atol=1e-4
        )

    def test_malformed(self, tmp_path):
        model = MlpDenoiser(2, 2, seed=0)
        p = tmp_path / "m.ckpt"
        save_checkpoint(model, p)
        blob = p.read_bytes()
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"XXXX" + blob[4:])
        with pytest.raises(MalformedFileError):
            load_checkpoint(bad)
        bad.write_bytes(blob[:-10])
        with pytest.raises(MalformedFileError):
            load_checkpoint(bad)
        bad.write_bytes(blob + b"\x00\x00")
        with pytest.raises(MalformedFileError):
            load_checkpoint(bad)
