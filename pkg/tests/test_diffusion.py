import math

import numpy as np
import pytest

from recon_ood.datasets import render_class
from recon_ood.diffusion import (
    DenoiserNet,
    ReconstructionConfig,
    forward_noise,
    invert_forward_noise,
    make_schedule,
    reconstruct,
    reconstruct_batch,
    reconstruction_error,
    reverse_timesteps,
    timestep_embedding,
    train_denoiser,
)
from recon_ood import autograd as ag
from recon_ood.errors import ContractError, DimensionError, DomainError

from gradcheck import check_store_gradients
from oracles import running_product


def small_denoiser(dtype=np.float32, n_pixels=16, cond_dim=4, seed=0):
    return DenoiserNet(n_pixels, cond_dim, (12, 12),
                       np.random.default_rng(seed), time_dim=8, dtype=dtype)


@pytest.fixture(scope="module")
def schedule():
    return make_schedule(100, 1e-4, 0.06)


class TestSchedule:
    def test_two_step_hand_values(self):
        with pytest.warns(UserWarning, match="terminal alpha_bar"):
            s = make_schedule(2, 0.1, 0.2)
        assert np.allclose(s.beta, [0.1, 0.2])
        assert np.allclose(s.alpha, [0.9, 0.8])
        assert np.allclose(s.alpha_bar, [0.9, 0.72])

    def test_alpha_bar_strictly_decreasing(self, schedule):
        assert np.all(np.diff(schedule.alpha_bar) < 0)

    def test_default_matches_running_product_oracle(self, schedule):
        oracle = running_product(1.0 - schedule.beta)
        assert abs(schedule.alpha_bar[-1] - oracle[-1]) < 1e-9
        assert np.max(np.abs(schedule.alpha_bar - np.array(oracle))) < 1e-9

    def test_legacy_range_matches_oracle_too(self):
        with pytest.warns(UserWarning):
            s = make_schedule(100, 1e-4, 0.02)
        oracle = running_product(1.0 - s.beta)
        assert abs(s.alpha_bar[-1] - oracle[-1]) < 1e-9

    def test_default_terminal_signal_below_five_percent(self, schedule):
        assert schedule.alpha_bar[-1] < 0.05

    def test_invalid_ranges(self):
        with pytest.raises(DomainError):
            make_schedule(1, 0.1, 0.2)
        with pytest.raises(DomainError):
            make_schedule(10, 0.0, 0.2)
        with pytest.raises(DomainError):
            make_schedule(10, 0.3, 0.2)
        with pytest.raises(DomainError):
            make_schedule(10, 0.3, 1.0)

    def test_coefficient_identity(self, schedule):
        for s in range(1, schedule.n_steps + 1):
            ab = schedule.alpha_bar_at(s)
            total = math.sqrt(ab) ** 2 + math.sqrt(1.0 - ab) ** 2
            assert abs(total - 1.0) < 1e-6

    def test_timestep_bounds(self, schedule):
        with pytest.raises(DomainError):
            schedule.alpha_bar_at(0)
        with pytest.raises(DomainError):
            schedule.alpha_bar_at(101)


class TestForwardNoise:
    def test_zero_noise_scales_signal(self, schedule, rng):
        z0 = rng.uniform(-1, 1, size=(16,)).astype(np.float32)
        out = forward_noise(schedule, z0, 30, np.zeros_like(z0))
        expected = np.float32(math.sqrt(schedule.alpha_bar_at(30))) * z0
        assert np.allclose(out, expected, atol=1e-7)

    def test_zero_signal_scales_noise(self, schedule, rng):
        eps = rng.standard_normal(16).astype(np.float32)
        out = forward_noise(schedule, np.zeros(16, dtype=np.float32), 70, eps)
        expected = np.float32(math.sqrt(1 - schedule.alpha_bar_at(70))) * eps
        assert np.allclose(out, expected, atol=1e-7)

    def test_shape_mismatch(self, schedule):
        with pytest.raises(DimensionError):
            forward_noise(schedule, np.zeros(4), 10, np.zeros(5))

    def test_monte_carlo_moments(self, schedule):
        rng = np.random.default_rng(77)
        z0 = render_class(0, 123).reshape(-1).astype(np.float64)
        s = 50
        n = 10_000
        draws = forward_noise(schedule, np.tile(z0, (n, 1)), s,
                              rng.standard_normal((n, 256)))
        ab = schedule.alpha_bar_at(s)
        expected_mean = math.sqrt(ab) * z0
        expected_var = 1.0 - ab
        stderr = math.sqrt(expected_var / n)
        mean_err = np.abs(draws.mean(axis=0) - expected_mean)
        assert np.all(mean_err <= 3.0 * stderr + 1e-12)
        var = draws.var(axis=0)
        assert np.all(np.abs(var - expected_var) <= 0.05 * expected_var)

    def test_inversion_recovers_noise(self, schedule):
        rng = np.random.default_rng(5)
        for s in (1, 17, 50, 99, 100):
            z0 = rng.uniform(-1, 1, size=256)
            eps = rng.standard_normal(256)
            z_s = forward_noise(schedule, z0, s, eps)
            eps_hat = invert_forward_noise(schedule, z_s, z0, s)
            assert np.max(np.abs(eps_hat - eps)) < 1e-5


class TestTimestepEmbedding:
    def test_shape_and_range(self):
        emb = timestep_embedding([1, 50, 100], dim=32)
        assert emb.shape == (3, 32)
        assert np.all(np.abs(emb) <= 1.0)

    def test_distinct_steps_distinct_embeddings(self):
        emb = timestep_embedding(np.arange(1, 101), dim=32)
        assert np.unique(emb, axis=0).shape[0] == 100


class TestDenoiser:
    def test_predict_deterministic(self, rng):
        net = small_denoiser()
        z = rng.standard_normal((3, 16)).astype(np.float32)
        cond = rng.standard_normal((3, 4)).astype(np.float32)
        a = net.predict_x0(z, 5, cond)
        b = net.predict_x0(z, 5, cond)
        assert np.array_equal(a, b)

    def test_output_inside_band(self, rng):
        net = small_denoiser()
        z = rng.uniform(-50, 50, size=(20, 16)).astype(np.float32)
        cond = rng.uniform(-5, 5, size=(20, 4)).astype(np.float32)
        out = net.predict_x0(z, 3, cond)
        assert np.all(np.abs(out) <= 1.5)

    def test_condition_shape_checked(self, rng):
        net = small_denoiser()
        with pytest.raises(DimensionError):
            net.predict_x0(np.zeros((2, 16), dtype=np.float32), 1,
                           np.zeros((2, 5), dtype=np.float32))

    def test_training_loss_gradient_finite_differences(self, rng):
        net = small_denoiser(dtype=np.float64)
        schedule = make_schedule(10, 1e-3, 0.55)
        z0 = rng.uniform(-1, 1, size=(4, 16))
        eps = rng.standard_normal((4, 16))
        s = np.array([1, 4, 7, 10])
        cond = rng.standard_normal((4, 4))

        checked = check_store_gradients(
            lambda: net.training_loss(z0, s, eps, cond, schedule),
            net.store, rng, max_coords_per_param=20,
        )
        assert checked >= 100


class TestTrainDenoiser:
    def test_rejects_ood_tags(self, schedule, rng):
        images = rng.uniform(-1, 1, size=(8, 16)).astype(np.float32)
        cond = rng.standard_normal((8, 4)).astype(np.float32)
        tags = ["id"] * 7 + ["ood:ring"]
        with pytest.raises(ContractError, match="ood:ring"):
            train_denoiser(images, tags, cond, schedule, epochs=1,
                           hidden_sizes=(8,))

    def test_deterministic_checkpoints(self, tmp_path, rng):
        images = rng.uniform(-1, 1, size=(12, 16)).astype(np.float32)
        cond = rng.standard_normal((12, 4)).astype(np.float32)
        sched = make_schedule(10, 1e-3, 0.55)
        kw = dict(epochs=2, batch_size=4, hidden_sizes=(8, 8), seed=11)
        a, _ = train_denoiser(images, ["id"] * 12, cond, sched, **kw)
        b, _ = train_denoiser(images, ["id"] * 12, cond, sched, **kw)
        a.save(tmp_path / "a.ckpt", sched, 5)
        b.save(tmp_path / "b.ckpt", sched, 5)
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_loss_decreases(self, default_run):
        _, run_dir, _ = default_run
        lines = (run_dir / "denoiser_loss.csv").read_text().strip().splitlines()
        losses = [float(line.split(",")[1]) for line in lines[1:]]
        assert losses[-1] < losses[0]


class TestReverseTimesteps:
    def test_single_step(self):
        assert reverse_timesteps(50, 1).tolist() == [50]

    def test_endpoints_and_monotone(self):
        for s_star, n in ((50, 10), (100, 10), (7, 7), (9, 3), (2, 2)):
            steps = reverse_timesteps(s_star, n)
            assert steps[0] == s_star
            assert steps[-1] == 1
            assert len(steps) == n
            assert np.all(np.diff(steps) < 0)


class TestReconstruct:
    def test_single_step_collapses_to_prediction(self, schedule, rng):
        net = small_denoiser(n_pixels=16)
        image = rng.uniform(-1, 1, size=16).astype(np.float32)
        cond = rng.standard_normal(4).astype(np.float32)
        cfg = ReconstructionConfig(s_star=40, n_steps=1, seed=99)
        out = reconstruct(net, schedule, image, cond, cfg)

        eps = np.random.default_rng(99).standard_normal(16).astype(np.float32)
        z = forward_noise(schedule, image.reshape(1, -1), 40, eps.reshape(1, -1))
        expected = np.clip(net.predict_x0(z, 40, cond.reshape(1, -1)), -1, 1)
        assert np.array_equal(out, expected[0])

    def test_bitwise_deterministic(self, schedule, rng):
        net = small_denoiser(n_pixels=16)
        image = rng.uniform(-1, 1, size=16).astype(np.float32)
        cond = rng.standard_normal(4).astype(np.float32)
        cfg = ReconstructionConfig(s_star=30, n_steps=5, seed=7)
        a = reconstruct(net, schedule, image, cond, cfg)
        b = reconstruct(net, schedule, image, cond, cfg)
        assert a.tobytes() == b.tobytes()

    def test_output_in_unit_range(self, schedule, rng):
        net = small_denoiser(n_pixels=16)
        images = rng.uniform(-1, 1, size=(6, 16)).astype(np.float32)
        cond = rng.standard_normal((6, 4)).astype(np.float32)
        cfg = ReconstructionConfig(s_star=50, n_steps=10)
        out = reconstruct_batch(net, schedule, images, cond, cfg, range(6))
        assert np.all(out >= -1.0) and np.all(out <= 1.0)

    def test_invalid_config(self, schedule):
        with pytest.raises(DomainError):
            ReconstructionConfig(s_star=0, n_steps=1).validate(schedule)
        with pytest.raises(DomainError):
            ReconstructionConfig(s_star=101, n_steps=1).validate(schedule)
        with pytest.raises(DomainError):
            ReconstructionConfig(s_star=10, n_steps=11).validate(schedule)

    def test_batching_independent_scores(self, schedule, rng):
        # per-sample seeds: scoring one-by-one equals scoring as a batch
        net = small_denoiser(n_pixels=16)
        images = rng.uniform(-1, 1, size=(4, 16)).astype(np.float32)
        cond = rng.standard_normal((4, 4)).astype(np.float32)
        cfg = ReconstructionConfig(s_star=20, n_steps=4)
        batch = reconstruct_batch(net, schedule, images, cond, cfg,
                                  [10, 11, 12, 13])
        for k in range(4):
            single = reconstruct_batch(net, schedule, images[k:k+1],
                                       cond[k:k+1], cfg, [10 + k])
            assert np.allclose(single[0], batch[k], atol=1e-6)


class TestReconstructionError:
    def test_identical_zero(self, rng):
        img = rng.uniform(-1, 1, size=(16, 16))
        assert reconstruction_error(img, img) == 0.0

    def test_opposite_extremes(self):
        a = -np.ones((16, 16))
        b = np.ones((16, 16))
        assert reconstruction_error(a, b) == pytest.approx(4.0)

    def test_matches_mse_loss(self, rng):
        a = rng.uniform(-1, 1, size=(16, 16)).astype(np.float32)
        b = rng.uniform(-1, 1, size=(16, 16)).astype(np.float32)
        loss = ag.mse_loss(ag.Tensor(a), ag.Tensor(b)).item()
        assert abs(reconstruction_error(a, b) - loss) < 1e-7

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            reconstruction_error(np.zeros(4), np.zeros(5))


class TestTrainedSeparation:
    def test_id_reconstructs_better_than_ood_at_midpoint(self, default_run,
                                                         trained_encoder,
                                                         trained_denoiser):
        from recon_ood.datasets import load_dataset

        _, run_dir, _ = default_run
        enc, _ = trained_encoder
        den, schedule, s_star = trained_denoiser
        ds = load_dataset(run_dir / "dataset.rds")
        rng = np.random.default_rng(4242)

        def median_error(split):
            _, images, _, _ = ds.split(split)
            images = images[:50]
            cond = enc.embed_images(images)
            s = schedule.n_steps // 2
            eps = rng.standard_normal(images.shape).astype(np.float32)
            z = forward_noise(schedule, images, s, eps)
            pred = den.predict_x0(z, s, cond)
            return float(np.median(np.mean((pred - images) ** 2, axis=1)))

        id_median = median_error("test-id")
        for family in ds.manifest.families:
            assert id_median < median_error(f"ood:{family}")
