"""Contrastively trained dual encoder: an image MLP tower aligned with a
learnable per-class prototype table.

The trained encoder serves two roles downstream: its unit-norm image
embeddings condition the diffusion denoiser, and cosine similarity against
the class prototypes gives zero-shot classification (argmax of the
similarity vector, ties to the lowest class id).
"""

from __future__ import annotations

import math

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from . import autograd as ag
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ContractError, DomainError, TrainingFloorError
from .optim import AdamConfig, ParamStore
from .validation import check_images, check_labels

EMBED_DIM = 32


class EncoderNet:
    """Parameter owner for the dual encoder; all arrays live in one store."""

    def __init__(self, n_pixels: int, hidden_sizes: tuple, embed_dim: int,
                 n_classes: int, temperature_init: float, rng: np.random.Generator,
                 dtype=np.float32):
        if temperature_init <= 0:
            raise DomainError(f"temperature_init must be positive, got {temperature_init}")
        self.n_pixels = n_pixels
        self.hidden_sizes = tuple(hidden_sizes)
        self.embed_dim = embed_dim
        self.n_classes = n_classes
        self.store = ParamStore(dtype=dtype)
        sizes = (n_pixels, *self.hidden_sizes, embed_dim)
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            w = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
            self.store.add(f"img.w{i}", w)
            self.store.add(f"img.b{i}", np.zeros(fan_out))
        self.store.add("class_table",
                       rng.normal(0.0, 1.0, size=(n_classes, embed_dim)))
        self.store.add("log_temperature", np.array([math.log(temperature_init)]))
        self.n_layers = len(self.hidden_sizes) + 1

    @property
    def temperature(self) -> float:
        return float(np.exp(self.store["log_temperature"].data[0]))

    def _tower(self, x: ag.Tensor) -> ag.Tensor:
        h = x
        for i in range(self.n_layers):
            h = ag.add(ag.matmul(h, self.store[f"img.w{i}"]), self.store[f"img.b{i}"])
            if i < self.n_layers - 1:
                h = ag.silu(h)
        return ag.l2_normalize_rows(h)

    def embed_images(self, images: np.ndarray) -> np.ndarray:
        """Unit-norm embeddings for a (n, n_pixels) float32 batch."""
        with ag.no_grad():
            return self._tower(ag.Tensor(images)).data

    def class_embeddings(self) -> np.ndarray:
        """Unit-norm prototype rows, one per class."""
        with ag.no_grad():
            return ag.l2_normalize_rows(self.store["class_table"]).data

    def class_embedding(self, class_id: int) -> np.ndarray:
        if not 0 <= class_id < self.n_classes:
            raise DomainError(f"class_id must be in [0, {self.n_classes}), got {class_id}")
        return self.class_embeddings()[class_id]

    def batch_loss(self, images: np.ndarray, class_ids: np.ndarray) -> ag.Tensor:
        """Symmetric contrastive loss over the in-batch image/class pairs.

        Builds the B x B cosine logit matrix between image embeddings and
        the prototypes of each sample's class, scaled by 1/temperature,
        and averages cross-entropy along rows and columns with the
        diagonal as target.
        """
        class_ids = np.asarray(class_ids)
        if images.shape[0] < 2 or np.unique(class_ids).size < 2:
            raise ContractError(
                "contrastive batch needs >= 2 samples spanning >= 2 classes"
            )
        img_emb = self._tower(ag.Tensor(images))
        table = ag.l2_normalize_rows(self.store["class_table"])
        prototypes = ag.gather_rows(table, class_ids)
        cos = ag.matmul(img_emb, ag.transpose(prototypes))
        inv_temp = ag.exp(ag.scale(self.store["log_temperature"], -1.0))
        logits = ag.mul(cos, inv_temp)
        targets = np.arange(images.shape[0])
        per_image = ag.cross_entropy_mean(logits, targets)
        per_class = ag.cross_entropy_mean(ag.transpose(logits), targets)
        return ag.scale(ag.add(per_image, per_class), 0.5)

    def similarity_scores(self, images: np.ndarray) -> np.ndarray:
        """Cosine similarities against every class prototype, shape (n, K)."""
        return self.embed_images(images) @ self.class_embeddings().T

    def zero_shot(self, images: np.ndarray) -> np.ndarray:
        """Predicted class per image: argmax similarity, ties to lowest id."""
        return np.argmax(self.similarity_scores(images), axis=1)

    def msp_scores(self, images: np.ndarray) -> np.ndarray:
        """Max-softmax-probability baseline OOD score (higher = more OOD).

        Softmax is taken over the temperature-scaled similarities; the
        score is one minus the winning probability.
        """
        logits = self.similarity_scores(images) / self.temperature
        z = logits - logits.max(axis=1, keepdims=True)
        ez = np.exp(z)
        probs = ez / ez.sum(axis=1, keepdims=True)
        return 1.0 - probs.max(axis=1)

    def save(self, path, zero_shot_accuracy: float = -1.0) -> None:
        arrays = dict(self.store.named_arrays())
        arrays["meta/encoder"] = np.array(
            [self.n_pixels, *self.hidden_sizes, self.embed_dim,
             self.n_classes, zero_shot_accuracy],
            dtype=np.float32,
        )
        save_checkpoint(path, arrays)

    @classmethod
    def load(cls, path) -> tuple["EncoderNet", float]:
        """Rebuild a net from a checkpoint; returns (net, stored accuracy)."""
        arrays = load_checkpoint(path)
        if "meta/encoder" not in arrays:
            raise ContractError(f"{path}: not an encoder checkpoint (no metadata record)")
        meta = arrays["meta/encoder"]
        n_pixels = int(meta[0])
        hidden = tuple(int(v) for v in meta[1:-3])
        embed_dim = int(meta[-3])
        n_classes = int(meta[-2])
        accuracy = float(meta[-1])
        net = cls(n_pixels, hidden, embed_dim, n_classes, 0.07,
                  np.random.default_rng(0))
        net.store.load_arrays({k: v for k, v in arrays.items() if not k.startswith("meta/")})
        return net, accuracy


def zero_shot_classify(net: EncoderNet, image: np.ndarray) -> tuple[int, np.ndarray]:
    """Classify one image; returns (class_id, per-class similarity scores)."""
    flat = check_images(image, image_size=int(math.isqrt(net.n_pixels)))
    scores = net.similarity_scores(flat)[0]
    return int(np.argmax(scores)), scores


class ContrastiveEncoder(BaseEstimator, TransformerMixin):
    """Dual image/class-prototype encoder with a scikit-learn face.

    ``fit(X, y)`` trains the tower and prototype table contrastively on
    labeled in-distribution images; ``transform`` returns unit-norm
    embeddings and ``predict`` zero-shot class ids.

    Attributes set by fit:
        net_: the trained EncoderNet.
        classes_: sorted class ids seen in y.
        history_: per-epoch mean training loss.
        temperature_: learned softmax temperature.
        zero_shot_accuracy_: held-out accuracy, when validation data given.
    """

    def __init__(self, image_size: int = 16, embed_dim: int = EMBED_DIM,
                 hidden_sizes: tuple = (128, 64), batch_size: int = 64,
                 epochs: int = 10, learning_rate: float = 3e-3,
                 temperature_init: float = 0.07, accuracy_floor: float | None = 0.95,
                 random_state: int = 0):
        self.image_size = image_size
        self.embed_dim = embed_dim
        self.hidden_sizes = hidden_sizes
        self.batch_size = batch_size
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.temperature_init = temperature_init
        self.accuracy_floor = accuracy_floor
        self.random_state = random_state

    def _check_fitted(self):
        if not hasattr(self, "net_"):
            raise NotFittedError("ContrastiveEncoder is not fitted; call fit first.")

    def fit(self, X, y, X_val=None, y_val=None):
        """Train on labeled ID images; optionally gate on held-out accuracy.

        When validation data is supplied and ``accuracy_floor`` is set,
        raises TrainingFloorError if zero-shot accuracy lands below the
        floor, so a bad run cannot pass silently.
        """
        X = check_images(X, self.image_size)
        y = check_labels(y, X.shape[0])
        classes = np.unique(y)
        if classes.size < 2:
            raise ContractError("contrastive training needs >= 2 classes")
        if not np.array_equal(classes, np.arange(classes.size)):
            raise DomainError(f"class ids must be 0..K-1, got {classes.tolist()}")
        rng = np.random.default_rng(self.random_state)
        net = EncoderNet(X.shape[1], self.hidden_sizes, self.embed_dim,
                         classes.size, self.temperature_init, rng)
        adam = AdamConfig(learning_rate=self.learning_rate)
        history = []
        for _ in range(self.epochs):
            order = rng.permutation(X.shape[0])
            losses = []
            for start in range(0, X.shape[0], self.batch_size):
                idx = order[start : start + self.batch_size]
                if idx.size < 2 or np.unique(y[idx]).size < 2:
                    continue
                loss = net.batch_loss(X[idx], y[idx])
                net.store.zero_grad()
                loss.backward()
                net.store.adam_step(adam)
                losses.append(loss.item())
            history.append(float(np.mean(losses)))
        self.net_ = net
        self.classes_ = classes
        self.history_ = history
        self.temperature_ = net.temperature
        self.zero_shot_accuracy_ = None
        if X_val is not None:
            X_val = check_images(X_val, self.image_size)
            y_val = check_labels(y_val, X_val.shape[0])
            acc = float(np.mean(net.zero_shot(X_val) == y_val))
            self.zero_shot_accuracy_ = acc
            if self.accuracy_floor is not None and acc < self.accuracy_floor:
                raise TrainingFloorError(
                    f"zero-shot accuracy {acc:.3f} below floor {self.accuracy_floor:.3f} "
                    f"(epochs={self.epochs}, lr={self.learning_rate}, "
                    f"final loss={history[-1]:.4f})"
                )
        return self

    def transform(self, X) -> np.ndarray:
        """Unit-norm embeddings, shape (n, embed_dim)."""
        self._check_fitted()
        return self.net_.embed_images(check_images(X, self.image_size))

    def predict(self, X) -> np.ndarray:
        """Zero-shot class ids via max cosine similarity."""
        self._check_fitted()
        return self.net_.zero_shot(check_images(X, self.image_size))

    def similarity_scores(self, X) -> np.ndarray:
        self._check_fitted()
        return self.net_.similarity_scores(check_images(X, self.image_size))

    def msp_scores(self, X) -> np.ndarray:
        self._check_fitted()
        return self.net_.msp_scores(check_images(X, self.image_size))
