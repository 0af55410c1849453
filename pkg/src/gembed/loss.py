"""Training objectives: cross entropy, the Gaussian constraint, and full-info replacement.

The Gaussian constraint pulls every embedding ``f_t`` toward the classifier
row of its own speaker::

    R = mean_t || f_t - theta[s_t] ||^2      (norm_form="squared", default)
    R = mean_t || f_t - theta[s_t] ||        (norm_form="unsquared")

and the training objective is ``CE + alpha * R``. The squared form is the
negative log-density of ``N(theta_s, I)`` up to constants.
"""

from dataclasses import dataclass

import numpy as np

from .errors import InputError
from .numkit import log_softmax_rows, softmax_rows

XVECTOR_ALPHA = 0.05
DVECTOR_ALPHA = 0.01
NORM_FORMS = ("squared", "unsquared")
KINK_GUARD = 1e-12


@dataclass
class ClassifierHead:
    theta: np.ndarray
    bias: np.ndarray = None

    @classmethod
    def from_params(cls, params):
        return cls(params["head.theta"], params["head.bias"])

    @property
    def num_speakers(self):
        return self.theta.shape[0]

    def logits(self, embeddings):
        z = np.asarray(embeddings) @ self.theta.T
        return z if self.bias is None else z + self.bias


@dataclass(frozen=True)
class LossConfig:
    alpha: float = XVECTOR_ALPHA
    norm_form: str = "squared"
    level: str = "utterance"
    use_bias: bool = True

    def __post_init__(self):
        if self.alpha < 0:
            raise InputError("alpha must be >= 0")
        if self.norm_form not in NORM_FORMS:
            raise InputError(f"norm_form must be one of {NORM_FORMS}")
        if self.level not in ("utterance", "frame"):
            raise InputError("level must be 'utterance' or 'frame'")

    @classmethod
    def for_mode(cls, mode, **overrides):
        """Defaults for a network mode: alpha 0.05 for x-vectors, 0.01 for d-vectors."""
        if mode == "xvector":
            base = dict(alpha=XVECTOR_ALPHA, level="utterance")
        elif mode == "dvector":
            base = dict(alpha=DVECTOR_ALPHA, level="frame")
        else:
            raise InputError(f"unknown mode {mode!r}")
        base.update(overrides)
        return cls(**base)

    def check_mode(self, mode):
        if (self.level == "frame") != (mode == "dvector"):
            raise InputError(f"loss level {self.level!r} does not match network mode {mode!r}")


@dataclass
class SpeakerMeans:
    v: np.ndarray          # (num_speakers, dim); rows of absent speakers are NaN
    present: np.ndarray    # bool per speaker
    counts: np.ndarray

    @property
    def missing(self):
        return np.flatnonzero(~self.present).tolist()


def speaker_means(embeddings, labels, num_speakers=None):
    """Per-speaker average embedding. Speakers with no embeddings are flagged, not zero-filled."""
    emb = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    if emb.ndim != 2 or emb.shape[0] == 0:
        raise InputError("speaker_means needs a nonempty (n, dim) array")
    if labels.shape != (emb.shape[0],):
        raise InputError(f"{labels.shape[0] if labels.ndim else 0} labels for {emb.shape[0]} embeddings")
    if num_speakers is None:
        num_speakers = int(labels.max()) + 1
    if labels.min() < 0 or labels.max() >= num_speakers:
        raise InputError(f"labels must lie in [0, {num_speakers})")
    sums = np.zeros((num_speakers, emb.shape[1]))
    np.add.at(sums, labels, emb)
    counts = np.bincount(labels, minlength=num_speakers)
    present = counts > 0
    v = np.full_like(sums, np.nan)
    v[present] = sums[present] / counts[present, None]
    return SpeakerMeans(v, present, counts)


def nonparam_probs(embedding, means):
    """Softmax over speakers of ``f . v(s)``; classifier with no trainable weights."""
    f = np.asarray(embedding, dtype=np.float64)
    v = means.v if isinstance(means, SpeakerMeans) else np.asarray(means, dtype=np.float64)
    if f.shape[-1] != v.shape[1]:
        raise InputError(f"embedding dim {f.shape[-1]} != speaker mean dim {v.shape[1]}")
    return softmax_rows(f @ v.T)


def _check_labels(labels, n, num_classes):
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise InputError(f"expected {n} labels, got shape {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise InputError("labels must be integers")
    if n and (labels.min() < 0 or labels.max() >= num_classes):
        raise InputError(f"label out of range [0, {num_classes})")
    return labels


def cross_entropy(logits, labels):
    """Batch-mean cross entropy and its gradient w.r.t. the logits."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] == 0:
        raise InputError("logits must be a nonempty (batch, classes) array")
    b, s = z.shape
    labels = _check_labels(labels, b, s)
    logp = log_softmax_rows(z)
    value = -logp[np.arange(b), labels].sum() / b
    grad = softmax_rows(z)
    grad[np.arange(b), labels] -= 1.0
    return value, grad / b


def gauss_regularizer(embeddings, labels, head, config):
    """Batch-mean distance of each embedding to its speaker row of theta.

    Returns ``(value, grad_embeddings, grad_theta)``.
    """
    f = np.asarray(embeddings, dtype=np.float64)
    theta = head.theta
    if f.ndim != 2 or f.shape[1] != theta.shape[1]:
        raise InputError(f"embeddings {f.shape} do not match theta {theta.shape}")
    b = f.shape[0]
    labels = _check_labels(labels, b, theta.shape[0])
    diff = f - theta[labels]
    if config.norm_form == "squared":
        value = (diff * diff).sum() / b
        g = 2.0 * diff / b
    else:
        dist = np.sqrt((diff * diff).sum(axis=1))
        value = dist.sum() / b
        safe = np.where(dist < KINK_GUARD, np.inf, dist)
        g = diff / safe[:, None] / b
    grad_theta = np.zeros_like(theta)
    np.add.at(grad_theta, labels, -g)
    return value, g, grad_theta


@dataclass
class ObjectiveResult:
    value: float
    ce: float
    r: float
    grad_logits: np.ndarray
    grad_embeddings: np.ndarray   # R path only; the logits path goes through the head
    grad_theta: np.ndarray        # R path only


def combined_objective(logits, embeddings, labels, head, config, alpha=None):
    """``CE + alpha * R`` with the gradient of each term kept separate per input.

    ``alpha`` overrides ``config.alpha`` (used for alpha schedules). With
    alpha == 0 the R gradients are exact zeros and the value equals CE.
    """
    alpha = config.alpha if alpha is None else alpha
    ce, g_logits = cross_entropy(logits, labels)
    if alpha == 0.0:
        r = gauss_regularizer(embeddings, labels, head, config)[0]
        return ObjectiveResult(ce, ce, r, g_logits,
                               np.zeros_like(np.asarray(embeddings, dtype=np.float64)),
                               np.zeros_like(head.theta))
    r, g_emb, g_theta = gauss_regularizer(embeddings, labels, head, config)
    return ObjectiveResult(ce + alpha * r, ce, r, g_logits, alpha * g_emb, alpha * g_theta)


def full_info_replace(head, means):
    """Return a head whose rows are the speaker means and whose bias is zero."""
    if means.v.shape != head.theta.shape:
        raise InputError(f"means {means.v.shape} do not match theta {head.theta.shape}")
    if not means.present.all():
        raise InputError(f"speaker means missing for speakers {means.missing}")
    bias = None if head.bias is None else np.zeros_like(head.bias)
    return ClassifierHead(means.v.copy(), bias)
