"""Prototype matching for episodic few-shot classification."""
from __future__ import annotations

import numpy as np

from .errors import ConfigurationError, ContractError, DimensionError
from .ops import otam
from .tensor import Tensor, as_tensor, getitem, log_softmax, sqrt, tmin


def class_prototype(support_features) -> Tensor:
    """Frame-wise mean over ``K`` support sequences ``(K, T, d)``."""
    feats = as_tensor(support_features)
    if feats.ndim < 3 or feats.shape[0] == 0:
        raise ContractError(f"need a non-empty (K, T, d) support stack, got {feats.shape}")
    return feats.mean(axis=0)


def frame_distance_matrix(fq, fc) -> Tensor:
    """``D[..., i, j] = ||fq[..., i, :] - fc[..., j, :]||_2``."""
    fq, fc = as_tensor(fq), as_tensor(fc)
    if fq.shape[-1] != fc.shape[-1]:
        raise DimensionError(f"feature sizes differ: {fq.shape} vs {fc.shape}")
    a = fq.reshape(fq.shape[:-1] + (1, fq.shape[-1]))
    b = fc.reshape(fc.shape[:-2] + (1,) + fc.shape[-2:])
    diff = a - b
    return sqrt((diff * diff).sum(axis=-1))


def bimhm_distance(dist) -> Tensor:
    """Mean of row minima and column minima, each weighted by one half."""
    dist = as_tensor(dist)
    if dist.ndim < 2 or dist.shape[-1] == 0 or dist.shape[-2] == 0:
        raise ContractError(f"bimhm needs a non-empty matrix, got {dist.shape}")
    rows = tmin(dist, axis=-1).mean(axis=-1)
    cols = tmin(dist, axis=-2).mean(axis=-1)
    return (rows + cols) * 0.5


def otam_distance(dist) -> Tensor:
    return otam(dist)


METRICS = {"bimhm": bimhm_distance, "otam": otam_distance}


def get_metric(name: str):
    try:
        return METRICS[name]
    except KeyError:
        raise ConfigurationError(f"unknown matching metric {name!r}; choose from {sorted(METRICS)}") from None


def classify_query(query_features, prototypes, metric: str = "bimhm", temperature: float = 1.0) -> Tensor:
    """Logits ``-distance / temperature`` of queries ``(..., T, d)`` against
    prototypes ``(N, T, d)``; output ``(..., N)``."""
    fn = get_metric(metric)
    q = as_tensor(query_features)
    protos = as_tensor(prototypes)
    q = q.reshape(q.shape[:-2] + (1,) + q.shape[-2:])
    return fn(frame_distance_matrix(q, protos)) * (-1.0 / temperature)


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    logp = log_softmax(logits)
    picked = getitem(logp, (np.arange(labels.shape[0]), labels))
    return -picked.mean()


def prototypes_from_support(support_feats, support_labels, way: int) -> Tensor:
    """Stack one prototype per class from ``(N*K, T, d)`` class-major support features."""
    feats = as_tensor(support_feats)
    labels = np.asarray(support_labels)
    counts = np.bincount(labels, minlength=way)
    if np.any(counts == 0):
        raise ContractError(f"classes without support samples: {np.flatnonzero(counts == 0).tolist()}")
    if not np.all(counts == counts[0]) or not np.all(labels == np.repeat(np.arange(way), counts[0])):
        # irregular layout: gather class by class
        from .tensor import stack
        return stack([class_prototype(getitem(feats, np.flatnonzero(labels == c))) for c in range(way)])
    k = int(counts[0])
    return feats.reshape((way, k) + feats.shape[1:]).mean(axis=1)


def episode_logits(model, episode, metric: str = "bimhm", temperature: float = 1.0) -> Tensor:
    """Run support and query clips through ``model`` in one batch; return query logits."""
    frames = np.concatenate([episode.support, episode.query], axis=0)
    feats = model(frames)
    ns = episode.support.shape[0]
    protos = prototypes_from_support(feats[:ns], episode.support_labels, episode.way)
    return classify_query(feats[ns:], protos, metric, temperature)


def episode_loss(episode, model, metric: str = "bimhm", temperature: float = 1.0):
    """Mean cross-entropy over the episode's queries; returns ``(loss, logits)``."""
    logits = episode_logits(model, episode, metric, temperature)
    return cross_entropy(logits, episode.query_labels), logits
