"""Hashing head: channel-attention gate, small conv stack, classification and
hash layers, and the three losses (soft pairwise, bit balance, classification)
whose unweighted sum is the hashing objective.

Codes are q-dimensional over {-1, +1}; binarization is a straight-through
sign, so all losses stay differentiable w.r.t. the pre-sign logits.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, constant
from .codec import conv_param, _param_rng

HARD_TOL = 1e-12


@dataclass
class HashHeadConfig:
    q: int = 64
    classes: int = 8
    hidden: int = 128
    alpha: float = None
    gamma: float = None

    def __post_init__(self):
        if self.q <= 0:
            raise ValueError("code length must be positive")
        if self.alpha is None:
            self.alpha = 5.0 / self.q
        if self.gamma is None:
            self.gamma = 0.1 / self.q

    def to_dict(self):
        return {"q": self.q, "classes": self.classes, "hidden": self.hidden,
                "alpha": self.alpha, "gamma": self.gamma}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class PairBatch:
    """Ordered index pairs over a batch, in dense matrix form.

    weight[i, j] counts how often (i, j) occurs in the pair set; s_o is the
    label-cosine similarity and m flags hard pairs (s_o exactly 0 or 1).
    """

    s_o: np.ndarray
    m: np.ndarray
    weight: np.ndarray


def label_similarity(l_i, l_j):
    """Cosine similarity of label vectors; 0 when either vector is all-zero."""
    a = np.asarray(l_i, dtype=np.float64)
    b = np.asarray(l_j, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def similarity_matrix(labels):
    lab = np.asarray(labels, dtype=np.float64)
    norms = np.linalg.norm(lab, axis=1)
    denom = np.outer(norms, norms)
    with np.errstate(invalid="ignore", divide="ignore"):
        s = (lab @ lab.T) / denom
    s[denom == 0.0] = 0.0
    return np.clip(s, 0.0, 1.0)


def make_pair_batch(labels, pairs=None):
    """PairBatch over all ordered pairs of the batch, or an explicit pair list."""
    n = len(labels)
    s_o = similarity_matrix(labels)
    m = ((s_o <= HARD_TOL) | (s_o >= 1.0 - HARD_TOL)).astype(np.float64)
    if pairs is None:
        weight = np.ones((n, n))
    else:
        weight = np.zeros((n, n))
        for i, j in pairs:
            weight[i, j] += 1.0
    return PairBatch(s_o=s_o, m=m, weight=weight)


class HashHead:
    def __init__(self, config, latent_channels, seed=0):
        self.config = config
        self.latent_channels = latent_channels
        params = {}
        c = config
        rng = _param_rng(seed, "hash_head.att")
        params["hash_head.att.w"] = Tensor(
            rng.normal(0.0, latent_channels**-0.5, size=(latent_channels, latent_channels)),
            requires_grad=True, name="hash_head.att.w")
        params["hash_head.att.b"] = Tensor(
            np.zeros(latent_channels), requires_grad=True, name="hash_head.att.b")
        conv_param(params, seed, "hash_head.conv0", 3, 3, latent_channels, c.hidden)
        conv_param(params, seed, "hash_head.conv1", 1, 1, c.hidden, c.hidden)
        conv_param(params, seed, "hash_head.cls", 1, 1, c.hidden, c.classes)
        conv_param(params, seed, "hash_head.hash", 1, 1, c.hidden, c.q)
        self.params = params

    def forward(self, tape, latent):
        """latent (N,h,w,c) -> (logits (N,q), code (N,q) in {-1,+1}, label probs (N,C))."""
        n, h, w, c = latent.shape
        pooled = tape.mean(latent, axis=(1, 2))
        gate = tape.sigmoid(tape.badd(tape.matmul(pooled, self.params["hash_head.att.w"]),
                                      self.params["hash_head.att.b"]))
        gate4 = tape.expand_to(tape.reshape(gate, (n, 1, 1, c)), latent.shape)
        gated = tape.mul(latent, gate4)
        f = tape.relu(tape.badd(tape.conv2d(gated, self.params["hash_head.conv0.w"], stride=1, pad=1),
                                self.params["hash_head.conv0.b"]))
        f = tape.relu(tape.badd(tape.conv2d(f, self.params["hash_head.conv1.w"], stride=1, pad=0),
                                self.params["hash_head.conv1.b"]))
        cls_map = tape.badd(tape.conv2d(f, self.params["hash_head.cls.w"], stride=1, pad=0),
                            self.params["hash_head.cls.b"])
        label_probs = tape.sigmoid(tape.mean(cls_map, axis=(1, 2)))
        hash_map = tape.badd(tape.conv2d(f, self.params["hash_head.hash.w"], stride=1, pad=0),
                             self.params["hash_head.hash.b"])
        logits = tape.mean(hash_map, axis=(1, 2))
        code = tape.ste_sign(logits)
        return logits, code, label_probs


def _row_weights(pair_batch):
    w = pair_batch.weight
    return (w.sum(axis=1) + w.sum(axis=0))[:, None]


def soft_pairwise_loss(tape, codes, pair_batch, alpha, gamma, q):
    """Rank-aware pairwise loss: hard pairs get a logistic term on the code
    inner product, soft pairs a squared deviation from the target similarity."""
    s_h = tape.matmul(codes, tape.transpose(codes, (1, 0)))
    s_o = constant(pair_batch.s_o)
    m = constant(pair_batch.m)
    w = constant(pair_batch.weight)
    hard = tape.sub(tape.softplus(tape.scale_shift(s_h, alpha, 0.0)),
                    tape.mul(tape.scale_shift(s_h, alpha, 0.0), s_o))
    soft = tape.square(tape.sub(tape.scale_shift(s_h, 0.5, 0.5 * q), tape.scale_shift(s_o, float(q), 0.0)))
    soft = tape.scale_shift(soft, gamma, 0.0)
    inv_m = tape.scale_shift(m, -1.0, 1.0)
    per_pair = tape.add(tape.mul(m, hard), tape.mul(inv_m, soft))
    return tape.sum(tape.mul(w, per_pair))


def bit_balance_loss(tape, codes, pair_batch):
    """Sum over pairs of squared code-component sums; zero iff every code
    involved has an equal count of +1 and -1."""
    n, q = codes.shape
    rowsum = tape.matmul(codes, constant(np.ones((q, 1))))
    return tape.sum(tape.mul(tape.square(rowsum), constant(_row_weights(pair_batch))))


def classification_loss(tape, label_probs, labels, pair_batch):
    """Squared-error label loss accumulated over the pair set."""
    err = tape.sum(tape.square(tape.sub(label_probs, constant(np.asarray(labels, dtype=np.float64)))),
                   axis=1, keepdims=True)
    return tape.sum(tape.mul(err, constant(_row_weights(pair_batch))))


def hashing_loss(tape, codes, label_probs, labels, pair_batch, config):
    """Unweighted sum of the three components; the parts are kept for
    per-task gradient surgery."""
    l_p = soft_pairwise_loss(tape, codes, pair_batch, config.alpha, config.gamma, config.q)
    l_b = bit_balance_loss(tape, codes, pair_batch)
    l_c = classification_loss(tape, label_probs, labels, pair_batch)
    total = tape.add(tape.add(l_p, l_b), l_c)
    return {"pairwise": l_p, "balance": l_b, "classification": l_c, "total": total}
