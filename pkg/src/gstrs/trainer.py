"""Training loop wrapped as a scikit-learn style estimator.

``GsTrsEmbedder.fit`` runs the full pipeline: within-class grouping (on
optionally PCA-reduced inputs), seeded weight init, group-sensitive batch
sampling, the selected loss, manual backpropagation, and momentum SGD.
``transform`` returns retrieval features; ``predict`` uses the softmax
head. Everything is deterministic given ``seed``.

Loss modes mirror the comparison ladder:

    "softmax"         softmax cross-entropy only
    "triplet"         random-anchor triplet hinge only (margin alpha)
    "triplet+softmax" random-anchor triplet fused with softmax
    "gstrs_womean"    inter + intra-group hinges, random anchors, fused
    "gstrs_wmean"     inter + intra-group hinges, mean-valued anchors, fused
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from ._validation import as_feature_matrix
from .grouping import WithinClassKMeans
from .losses import icv_triplet_loss, mean_valued_triplet_loss, softmax_cross_entropy
from .model import backprop_embedding, embed, embed_with_cache, init_embedding, init_head, sgd_step
from .numerics import PcaReducer
from .sampling import BatchSpec, build_contexts, epoch_batches

__all__ = ["GsTrsEmbedder", "LOSS_MODES"]

LOSS_MODES = ("softmax", "triplet", "triplet+softmax", "gstrs_womean", "gstrs_wmean")

# loss_mode -> (anchor_mode, with_intra, with_softmax)
_MODE_TABLE = {
    "softmax": (None, False, True),
    "triplet": ("sample", False, False),
    "triplet+softmax": ("sample", False, True),
    "gstrs_womean": ("sample", True, True),
    "gstrs_wmean": ("mean", True, True),
}


class GsTrsEmbedder(BaseEstimator, TransformerMixin):
    """Trainable embedding with group-sensitive triplet objectives.

    Parameters
    ----------
    embed_dim : output dimension of the embedding.
    hidden_dim : width of an optional tanh hidden layer (0 = pure affine).
    normalize : L2-normalize embedding outputs (the retrieval features).
    loss_mode : one of LOSS_MODES.
    alpha : margin of the plain triplet modes.
    alpha1, alpha2 : inter-class / inter-group margins of the ICV modes.
    omega : softmax weight in fused modes.
    learning_rate, momentum, epochs : SGD schedule.
    classes_per_batch, groups_per_class, samples_per_group : batch shape.
    negative_pool_per_class : optional cap on context negatives.
    n_groups : groups per class for the internal clustering.
    pca_dim : dimension reduction before clustering (capped at input dim;
        None disables).
    kmeans_restarts, kmeans_max_iters : clustering budget.
    regroup_every_n_epochs : recluster on current embeddings every n epochs
        (0 = group once before training and freeze).
    normalize_before_loss : compute losses on unit-norm embeddings even if
        ``normalize`` is off.
    frozen_centers : ablation; stop gradients at mean anchors.
    seed : master seed; fixes grouping, init, sampling, and anchor draws.
    """

    def __init__(
        self,
        embed_dim: int = 16,
        hidden_dim: int = 0,
        normalize: bool = True,
        loss_mode: str = "gstrs_wmean",
        alpha: float = 1.0,
        alpha1: float = 1.0,
        alpha2: float = 0.3,
        omega: float = 0.5,
        learning_rate: float = 0.05,
        momentum: float = 0.9,
        epochs: int = 50,
        classes_per_batch: int = 4,
        groups_per_class: int = 2,
        samples_per_group: int = 4,
        negative_pool_per_class: int | None = None,
        n_groups: int = 5,
        pca_dim: int | None = 64,
        kmeans_restarts: int = 5,
        kmeans_max_iters: int = 100,
        regroup_every_n_epochs: int = 0,
        normalize_before_loss: bool = True,
        frozen_centers: bool = False,
        seed: int = 0,
    ):
        self.embed_dim = embed_dim
        self.hidden_dim = hidden_dim
        self.normalize = normalize
        self.loss_mode = loss_mode
        self.alpha = alpha
        self.alpha1 = alpha1
        self.alpha2 = alpha2
        self.omega = omega
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.epochs = epochs
        self.classes_per_batch = classes_per_batch
        self.groups_per_class = groups_per_class
        self.samples_per_group = samples_per_group
        self.negative_pool_per_class = negative_pool_per_class
        self.n_groups = n_groups
        self.pca_dim = pca_dim
        self.kmeans_restarts = kmeans_restarts
        self.kmeans_max_iters = kmeans_max_iters
        self.regroup_every_n_epochs = regroup_every_n_epochs
        self.normalize_before_loss = normalize_before_loss
        self.frozen_centers = frozen_centers
        self.seed = seed

    # ------------------------------------------------------------------

    def _cluster(self, features, y) -> np.ndarray:
        reduced = features
        if self.pca_dim is not None:
            k = min(self.pca_dim, features.shape[1])
            reduced = PcaReducer(n_components=k).fit(features).transform(features)
        km = WithinClassKMeans(
            n_groups=self.n_groups,
            max_iters=self.kmeans_max_iters,
            restarts=self.kmeans_restarts,
            seed=self.seed,
        )
        return km.fit(reduced, y).labels_

    def fit(self, X, y, groups=None):
        X = as_feature_matrix(X, "X")
        y = np.asarray(y)
        if y.shape[0] != X.shape[0]:
            raise ValueError("X and y have mismatched lengths")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"unknown loss_mode {self.loss_mode!r}; choose from {LOSS_MODES}")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        anchor_mode, with_intra, with_softmax = _MODE_TABLE[self.loss_mode]

        classes, y_idx = np.unique(y, return_inverse=True)
        if classes.size < 2:
            raise ValueError("need at least 2 classes")
        if classes.size < self.classes_per_batch:
            raise ValueError(
                f"classes_per_batch={self.classes_per_batch} exceeds the "
                f"{classes.size} classes present"
            )
        self.classes_ = classes
        self.n_features_in_ = X.shape[1]

        y_str = classes.astype(str)[y_idx]
        if groups is not None:
            groups = np.asarray(groups, dtype=np.int64)
            if groups.shape[0] != X.shape[0]:
                raise ValueError("groups and X have mismatched lengths")
            if np.any(groups < 0):
                raise ValueError("groups must be assigned (>= 0); run grouping first")
        else:
            groups = self._cluster(X, y_str)
        self.groups_ = groups

        rng = np.random.default_rng([self.seed, 0x1A17])
        model = init_embedding(
            X.shape[1], self.embed_dim, rng, hidden=self.hidden_dim, normalize=self.normalize
        )
        head = init_head(self.embed_dim, classes.size, rng)
        self.model_ = model
        self.head_ = head

        spec = BatchSpec(
            classes_per_batch=self.classes_per_batch,
            groups_per_class=self.groups_per_class,
            samples_per_group=self.samples_per_group,
            negative_pool_per_class=self.negative_pool_per_class,
        )
        use_norm = model.normalize or self.normalize_before_loss
        train_view = replace(model, normalize=use_norm)
        params = {**model.params(), **head.params()}
        velocity: dict[str, np.ndarray] = {}
        inter_margin = self.alpha1 if with_intra else self.alpha

        self.history_ = []
        for epoch in range(self.epochs):
            if (
                self.regroup_every_n_epochs > 0
                and epoch > 0
                and epoch % self.regroup_every_n_epochs == 0
            ):
                groups = self._cluster(embed(train_view, X), y_str)
                self.groups_ = groups
            sums = {"L_softmax": 0.0, "L_inter": 0.0, "L_intra": 0.0, "L_total": 0.0}
            batches = epoch_batches(y_idx, groups, spec, self.seed, epoch)
            for b_idx, batch in enumerate(batches):
                Xb = X[batch.rows]
                out, cache = embed_with_cache(train_view, Xb)
                grad_out = np.zeros_like(out)
                l_soft = l_inter = l_intra = 0.0
                head_grads = None
                if with_softmax:
                    sm, head_grads = softmax_cross_entropy(head, out, y_idx[batch.rows])
                    l_soft = sm.value
                    for k, g in sm.grads.items():
                        grad_out[k] += g
                triplet_weight = 0.0
                if anchor_mode is not None:
                    anchor_rng = np.random.default_rng([self.seed, 0xA7C4, epoch, b_idx])
                    contexts = build_contexts(
                        batch,
                        out,
                        anchor_mode=anchor_mode,
                        rng=anchor_rng,
                        negative_cap=self.negative_pool_per_class,
                    )
                    tgrads = np.zeros_like(out)
                    for ctx in contexts:
                        if with_intra:
                            res = icv_triplet_loss(
                                ctx, self.alpha1, self.alpha2, frozen_centers=self.frozen_centers
                            )
                            l_intra += res.parts["intra"]
                            l_inter += res.parts["inter"]
                        else:
                            res = mean_valued_triplet_loss(
                                ctx, inter_margin, frozen_centers=self.frozen_centers
                            )
                            l_inter += res.value
                        for k, g in res.grads.items():
                            tgrads[k] += g
                    n_ctx = len(contexts)
                    l_inter /= n_ctx
                    l_intra /= n_ctx
                    # fuse: omega softmax + (1 - omega) triplet; pure-triplet
                    # modes take the triplet term at full weight
                    triplet_weight = (1.0 - self.omega) if with_softmax else 1.0
                    grad_out *= self.omega if with_softmax else 0.0
                    grad_out += (triplet_weight / n_ctx) * tgrads
                l_triplet = l_inter + l_intra
                if with_softmax and anchor_mode is not None:
                    l_total = self.omega * l_soft + (1.0 - self.omega) * l_triplet
                    head_grads = {k: self.omega * g for k, g in head_grads.items()}
                elif with_softmax:
                    l_total = l_soft
                else:
                    l_total = l_triplet
                grads = backprop_embedding(train_view, cache, grad_out)
                if head_grads is not None:
                    grads.update(head_grads)
                sgd_step(params, grads, velocity, self.learning_rate, self.momentum)
                sums["L_softmax"] += l_soft
                sums["L_inter"] += l_inter
                sums["L_intra"] += l_intra
                sums["L_total"] += l_total
            n_b = max(1, len(batches))
            self.history_.append(
                {"epoch": epoch, **{k: v / n_b for k, v in sums.items()}}
            )
        return self

    # ------------------------------------------------------------------

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("GsTrsEmbedder is not fitted")

    def transform(self, X) -> np.ndarray:
        """Retrieval features for X (unit-norm when ``normalize``)."""
        self._check_fitted()
        return embed(self.model_, X)

    def predict(self, X) -> np.ndarray:
        """Classifier-head predictions in the original label space."""
        self._check_fitted()
        logits = self.head_.logits(self.transform(X))
        return self.classes_[np.argmax(logits, axis=1)]
