"""Incremental-session objectives.

total = cls + gamma1 * cls_old + gamma2 * (feat + logit)

``cls`` trains the composed head on the few-shot images and on the stored
prototypes, ``cls_old`` keeps phi_old discriminative on the prototypes, and
``feat``/``logit`` distil the frozen previous model on amplified images.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import ConfigurationError, DataError
from .model import Extractor, cross_entropy, cosine_logits, extract
from .numerics import Tensor


@dataclass
class LossWeights:
    gamma1: float = 1.2
    gamma2: float = 10.0

    def __post_init__(self):
        if self.gamma1 < 0 or self.gamma2 < 0:
            raise ConfigurationError("loss weights must be non-negative")


@dataclass
class LossParts:
    cls: Tensor | float
    cls_old: Tensor | float = 0.0
    feat: Tensor | float = 0.0
    logit: Tensor | float = 0.0


def loss_cls(phi, features, labels, prototypes: np.ndarray | None, proto_labels: np.ndarray | None,
             scale: float = 16.0) -> Tensor:
    """CE of the composed head on image features plus CE on buffer prototypes.

    Prototypes feed the head directly, bypassing the extractor.
    """
    loss = cross_entropy(cosine_logits(phi, features, scale), labels)
    if prototypes is not None and len(prototypes):
        loss = nx.add(loss, cross_entropy(cosine_logits(phi, prototypes, scale), proto_labels))
    return loss


def loss_cls_old(phi_old, prototypes: np.ndarray, proto_labels: np.ndarray, scale: float = 16.0) -> Tensor:
    n_prev = nx.as_tensor(phi_old).shape[1]
    labels = np.asarray(proto_labels)
    if labels.size != n_prev or not np.array_equal(np.sort(labels), np.arange(n_prev)):
        raise ConfigurationError(f"buffer must hold exactly one prototype for each of classes 0..{n_prev - 1}")
    return cross_entropy(cosine_logits(phi_old, prototypes, scale), labels)


def feature_kd(student_features: Tensor, teacher_features) -> Tensor:
    """Mean over samples of the Euclidean distance between feature rows."""
    diff = nx.sub(student_features, nx.as_tensor(teacher_features))
    return nx.mean(nx.norm(diff, axis=1))


def loss_feat(theta_prev: Extractor, theta_cur: Extractor, images: np.ndarray) -> Tensor:
    with nx.no_grad():
        teacher = extract(theta_prev, images)
    return feature_kd(extract(theta_cur, images), teacher)


def teacher_distribution(prev_extractor: Extractor, prev_phi: np.ndarray, images: np.ndarray,
                         scale: float = 16.0) -> np.ndarray:
    with nx.no_grad():
        return nx.softmax(cosine_logits(prev_phi, extract(prev_extractor, images), scale)).data


def logit_kd(teacher_probs: np.ndarray, student_features: Tensor, phi, n_prev: int,
             scale: float = 16.0) -> Tensor:
    """Mean soft CE between teacher probabilities and the student's first n_prev classes."""
    phi = nx.as_tensor(phi)
    if n_prev > phi.shape[1]:
        raise ConfigurationError(f"n_prev={n_prev} exceeds current head width {phi.shape[1]}")
    if teacher_probs.shape != (student_features.shape[0], n_prev):
        raise ConfigurationError(f"teacher probabilities {teacher_probs.shape} vs ({student_features.shape[0]}, {n_prev})")
    logq = nx.log_softmax(cosine_logits(nx.columns(phi, 0, n_prev), student_features, scale))
    return nx.scale(nx.mean(nx.sum(nx.mul(logq, teacher_probs), axis=1)), -1.0)


def loss_logit(prev_extractor: Extractor, prev_phi: np.ndarray, cur_extractor: Extractor, phi,
               images: np.ndarray, n_prev: int, scale: float = 16.0) -> Tensor:
    if np.asarray(prev_phi).shape[1] != n_prev:
        raise ConfigurationError("previous head must have exactly n_prev columns")
    p = teacher_distribution(prev_extractor, prev_phi, images, scale)
    return logit_kd(p, extract(cur_extractor, images), phi, n_prev, scale)


def loss_total(parts: LossParts, weights: LossWeights) -> Tensor:
    adkd = nx.add(parts.feat, parts.logit)
    return nx.add(nx.add(parts.cls, nx.scale(parts.cls_old, weights.gamma1)), nx.scale(adkd, weights.gamma2))


def check_labels(labels: np.ndarray, n_total: int) -> None:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= n_total):
        raise DataError(f"labels must lie in [0, {n_total})")
