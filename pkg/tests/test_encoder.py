import math

import numpy as np
import pytest
from sklearn.base import clone

from recon_ood import autograd as ag
from recon_ood.datasets import ID_CLASSES, render_class
from recon_ood.encoder import ContrastiveEncoder, EncoderNet, zero_shot_classify
from recon_ood.errors import ContractError, DomainError, TrainingFloorError

from gradcheck import check_store_gradients


def make_net(dtype=np.float32, n_classes=4, seed=0):
    return EncoderNet(256, (32, 16), 8, n_classes, 0.07,
                      np.random.default_rng(seed), dtype=dtype)


def id_batch(n_per_class, seed=0):
    images, labels = [], []
    for c in range(len(ID_CLASSES)):
        for i in range(n_per_class):
            images.append(render_class(c, seed * 100003 + c * 1000 + i).reshape(-1))
            labels.append(c)
    return np.stack(images), np.array(labels)


class TestEmbeddings:
    def test_unit_norm(self, rng):
        net = make_net()
        images = rng.uniform(-1, 1, size=(10, 256)).astype(np.float32)
        emb = net.embed_images(images)
        assert np.allclose(np.linalg.norm(emb, axis=1), 1.0, atol=1e-5)

    def test_deterministic(self, rng):
        net = make_net()
        image = rng.uniform(-1, 1, size=(1, 256)).astype(np.float32)
        assert np.array_equal(net.embed_images(image), net.embed_images(image))

    def test_class_embeddings_unit_norm_untrained(self):
        net = make_net()
        emb = net.class_embeddings()
        assert np.allclose(np.linalg.norm(emb, axis=1), 1.0, atol=1e-5)

    def test_class_embedding_identical_twice(self):
        net = make_net()
        assert np.array_equal(net.class_embedding(0), net.class_embedding(0))

    def test_class_embedding_out_of_range(self):
        net = make_net()
        with pytest.raises(DomainError):
            net.class_embedding(4)


class TestContrastiveLoss:
    @pytest.mark.parametrize("temperature", [0.5, 1.0, 2.0])
    def test_hand_oracle_two_orthogonal_samples(self, temperature):
        # image embeddings equal to their own class prototypes, orthogonal
        # across classes: the logit matrix is (1/t) I and each row/column
        # cross-entropy is -log(e^{1/t} / (e^{1/t} + 1))
        net = make_net()
        d = net.embed_dim
        table = np.zeros((net.n_classes, d), dtype=np.float32)
        table[0, 0] = 1.0
        table[1, 1] = 1.0
        net.store["class_table"].data = table.copy()
        net.store["log_temperature"].data = np.array(
            [math.log(temperature)], dtype=np.float32)

        emb = ag.Tensor(table[:2].copy())
        prototypes = ag.gather_rows(
            ag.l2_normalize_rows(net.store["class_table"]), [0, 1])
        inv_t = 1.0 / net.temperature
        logits = ag.scale(ag.matmul(emb, ag.transpose(prototypes)), inv_t)
        loss = ag.cross_entropy_mean(logits, [0, 1]).item()

        expected = -math.log(math.exp(inv_t) / (math.exp(inv_t) + 1.0))
        assert loss == pytest.approx(expected, rel=1e-5)

    def test_uniform_logits_give_log_batch_size(self):
        # identical images and identical prototypes produce an all-equal
        # logit matrix; the loss collapses to log(B)
        net = make_net()
        net.store["class_table"].data = np.tile(
            net.store["class_table"].data[0], (net.n_classes, 1))
        image = render_class(0, 5).reshape(-1)
        for batch_size in (2, 4, 8):
            images = np.tile(image, (batch_size, 1))
            labels = np.arange(batch_size) % 2
            loss = net.batch_loss(images, labels).item()
            assert loss == pytest.approx(math.log(batch_size), rel=1e-4)

    def test_permutation_invariance(self, rng):
        net = make_net()
        images, labels = id_batch(3)
        base = net.batch_loss(images, labels).item()
        perm = rng.permutation(len(labels))
        permuted = net.batch_loss(images[perm], labels[perm]).item()
        assert permuted == pytest.approx(base, rel=1e-5)

    def test_degenerate_batch_rejected(self):
        net = make_net()
        images = np.zeros((4, 256), dtype=np.float32)
        with pytest.raises(ContractError):
            net.batch_loss(images, np.zeros(4, dtype=int))
        with pytest.raises(ContractError):
            net.batch_loss(images[:1], np.array([0]))

    def test_gradient_matches_finite_differences(self, rng):
        # 4-sample batch through the full loss, float64 for the stencil
        net = make_net(dtype=np.float64)
        images, labels = id_batch(1)

        checked = check_store_gradients(
            lambda: net.batch_loss(images, labels), net.store, rng,
            max_coords_per_param=16,
        )
        assert checked >= 100


class TestZeroShot:
    def test_argmax_and_scores(self):
        net = make_net()
        image = render_class(1, 3)
        class_id, scores = zero_shot_classify(net, image)
        assert scores.shape == (net.n_classes,)
        assert class_id == int(np.argmax(scores))

    def test_tie_breaks_to_lowest_class(self):
        scores = np.array([0.2, 0.9, 0.9, 0.0])
        assert int(np.argmax(scores)) == 1

    def test_argmax_cases(self):
        assert int(np.argmax(np.array([0.2, 0.9, 0.1, 0.0]))) == 1

    def test_positive_rescaling_preserves_argmax(self, rng):
        net = make_net()
        images = rng.uniform(-1, 1, size=(5, 256)).astype(np.float32)
        scores = net.similarity_scores(images)
        base = np.argmax(scores, axis=1)
        for factor in (0.5, 3.0, 1e4):
            assert np.array_equal(np.argmax(scores * factor, axis=1), base)
        assert np.array_equal(np.argmax(scores**3, axis=1), base)


class TestTraining:
    def test_identical_seeds_identical_checkpoints(self, tmp_path):
        images, labels = id_batch(8)
        kw = dict(embed_dim=16, hidden_sizes=(32, 16), epochs=2,
                  batch_size=16, random_state=9, accuracy_floor=None)
        a = ContrastiveEncoder(**kw).fit(images, labels)
        b = ContrastiveEncoder(**kw).fit(images, labels)
        a.net_.save(tmp_path / "a.ckpt")
        b.net_.save(tmp_path / "b.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_loss_decreases(self):
        images, labels = id_batch(16)
        enc = ContrastiveEncoder(epochs=5, accuracy_floor=None,
                                 random_state=3).fit(images, labels)
        assert enc.history_[-1] < enc.history_[0]

    def test_floor_miss_raises(self):
        images, labels = id_batch(4)
        val_x, val_y = id_batch(4, seed=1)
        with pytest.raises(TrainingFloorError, match="accuracy"):
            # one tiny epoch at lr ~ 0 cannot reach a 0.999 floor
            ContrastiveEncoder(epochs=1, learning_rate=1e-9,
                               accuracy_floor=0.999, random_state=0).fit(
                images, labels, X_val=val_x, y_val=val_y)

    def test_sklearn_params_round_trip(self):
        enc = ContrastiveEncoder(epochs=3, learning_rate=1e-2)
        params = enc.get_params()
        assert params["epochs"] == 3
        cloned = clone(enc)
        assert cloned.get_params() == params

    def test_not_fitted_errors(self):
        from sklearn.exceptions import NotFittedError

        with pytest.raises(NotFittedError):
            ContrastiveEncoder().transform(np.zeros((1, 256)))

    def test_non_contiguous_class_ids_rejected(self):
        images, _ = id_batch(2)
        labels = np.array([0, 0, 2, 2, 5, 5, 7, 7])
        with pytest.raises(DomainError):
            ContrastiveEncoder(accuracy_floor=None).fit(images, labels)


class TestTrainedProperties:
    def test_zero_shot_accuracy_floor(self, trained_encoder):
        net, accuracy = trained_encoder
        assert accuracy >= 0.95

    def test_same_class_cosine_high_cross_class_low(self, trained_encoder):
        net, _ = trained_encoder
        per_class = []
        for c in range(len(ID_CLASSES)):
            imgs = np.stack([render_class(c, 900000 + c * 37 + i).reshape(-1)
                             for i in range(20)])
            per_class.append(net.embed_images(imgs))
        same, cross = [], []
        for a in range(len(per_class)):
            emb_a = per_class[a]
            sims = emb_a @ emb_a.T
            same.extend(sims[np.triu_indices(len(emb_a), k=1)])
            for b in range(a + 1, len(per_class)):
                cross.extend((emb_a @ per_class[b].T).reshape(-1))
        assert np.mean(same) >= 0.8
        assert np.mean(cross) <= 0.5

    def test_class_prototypes_pairwise_distinct(self, trained_encoder):
        net, _ = trained_encoder
        emb = net.class_embeddings()
        sims = emb @ emb.T
        off_diag = sims[~np.eye(len(emb), dtype=bool)]
        assert np.all(off_diag < 0.99)

    def test_checkpoint_metadata(self, trained_encoder):
        net, accuracy = trained_encoder
        assert net.embed_dim == 32
        assert net.n_classes == 4
        assert net.temperature > 0
        assert 0.0 <= accuracy <= 1.0

    def test_msp_scores_in_unit_interval(self, trained_encoder, rng):
        net, _ = trained_encoder
        images = rng.uniform(-1, 1, size=(10, 256)).astype(np.float32)
        scores = net.msp_scores(images)
        assert np.all((scores >= 0) & (scores <= 1))
