"""Mini-batch training, per-epoch diagnostics, checkpoints and gradient checks."""

import csv
import io
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import network
from .errors import DiagnosticError, InputError, TrainingError
from .io import atomic_write
from .loss import (
    ClassifierHead,
    LossConfig,
    SpeakerMeans,
    combined_objective,
    cross_entropy,
    full_info_replace,
    gauss_regularizer,
    speaker_means,
)
from .numkit import sym_eig

GAP_EPS = 1e-12
CSV_HEADER = ("epoch", "objective", "ce", "r", "theta_gap", "isotropy", "skew", "kurtosis")


# d-vector batches count frames; every sampled frame needs a full context window
DVECTOR_DEFAULTS = dict(batch_size=128, epochs=15, frames_per_utt=10, lr_decay=0.9)


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adam"
    learning_rate: float = 3e-3
    # learning rate is multiplied by this after every epoch
    lr_decay: float = 0.95
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 50
    # utterances per batch (xvector) or frames per batch (dvector)
    batch_size: int = 32
    seed: int = 0
    # (epoch, alpha) breakpoints; empty means loss_config.alpha throughout
    alpha_schedule: tuple = ()
    # full-info replacement every N epochs, 0 disables
    replace_every: int = 0
    shuffle: bool = True
    # dvector: frames sampled per utterance per epoch
    frames_per_utt: int = 20
    # xvector: train on one random chunk of this many frames per utterance, 0 = whole utterance
    chunk_frames: int = 64
    diag_utts_per_speaker: int = 10

    def __post_init__(self):
        if self.optimizer not in ("sgd", "adam"):
            raise InputError(f"unknown optimizer {self.optimizer!r}")
        if self.learning_rate < 0 or not 0.0 < self.lr_decay <= 1.0:
            raise InputError("learning_rate must be >= 0 and lr_decay in (0, 1]")
        if self.batch_size < 1 or self.epochs < 0 or self.replace_every < 0:
            raise InputError("batch_size >= 1, epochs >= 0 and replace_every >= 0 required")
        object.__setattr__(self, "alpha_schedule",
                           tuple(sorted((int(e), float(a)) for e, a in self.alpha_schedule)))
        if any(a < 0 for _, a in self.alpha_schedule):
            raise InputError("alpha schedule values must be >= 0")

    @classmethod
    def for_mode(cls, mode, **overrides):
        """Desk defaults per network mode; d-vector batches count frames, not utterances."""
        base = dict(DVECTOR_DEFAULTS) if mode == "dvector" else {}
        base.update(overrides)
        return cls(**base)

    def alpha_at(self, epoch, default):
        alpha = default
        for start, value in self.alpha_schedule:
            if start <= epoch:
                alpha = value
        return alpha


@dataclass
class DiagnosticsRecord:
    epoch: int
    objective: float
    ce_part: float
    r_part: float
    theta_to_mean_gap: float
    within_class_isotropy: float
    skewness_norm: float
    excess_kurtosis_norm: float

    def csv_row(self):
        return [str(self.epoch)] + [repr(float(getattr(self, f.name))) for f in fields(self)[1:]]


def write_diagnostics_csv(path, records):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for rec in records:
        writer.writerow(rec.csv_row())
    with atomic_write(path, "w") as fh:
        fh.write(buf.getvalue())


def read_diagnostics_csv(path):
    with open(path, encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if tuple(rows[0]) != CSV_HEADER:
        raise InputError(f"{path}: unexpected header {rows[0]}")
    return [DiagnosticsRecord(int(r[0]), *map(float, r[1:])) for r in rows[1:]]


# -- statistics ---------------------------------------------------------------

def standardized_moments(embeddings, labels):
    """Per-dimension skewness and excess kurtosis of within-class-centred embeddings."""
    emb = np.asarray(embeddings, dtype=np.float64)
    means = speaker_means(emb, labels)
    z = emb - means.v[labels]
    var = (z ** 2).mean(axis=0)
    var = np.where(var > 0, var, np.nan)
    skew = (z ** 3).mean(axis=0) / var ** 1.5
    kurt = (z ** 4).mean(axis=0) / var ** 2 - 3.0
    return np.nan_to_num(skew), np.nan_to_num(kurt)


def within_class_covariance(embeddings, labels):
    emb = np.asarray(embeddings, dtype=np.float64)
    means = speaker_means(emb, labels)
    z = emb - means.v[labels]
    return z.T @ z / len(z)


def embedding_statistics(embeddings, labels, head, loss_config, alpha=None, epoch=0,
                         reference_means=None):
    """All diagnostic statistics for a labelled set of embeddings.

    ``reference_means`` (a SpeakerMeans) replaces the per-speaker means of
    ``embeddings`` in the theta gap; training passes the epoch's in-batch means.
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    counts = np.bincount(labels, minlength=head.num_speakers)
    if (counts >= 2).sum() < 2:
        raise DiagnosticError("diagnostics need at least 2 speakers with at least 2 embeddings")
    alpha = loss_config.alpha if alpha is None else alpha
    ce, _ = cross_entropy(head.logits(emb), labels)
    r, _, _ = gauss_regularizer(emb, labels, head, loss_config)
    means = reference_means or speaker_means(emb, labels, head.num_speakers)
    p = means.present
    gaps = (np.linalg.norm(head.theta[p] - means.v[p], axis=1)
            / (np.linalg.norm(means.v[p], axis=1) + GAP_EPS))
    eig = sym_eig(within_class_covariance(emb, labels))[0]
    if not eig[-1] > 0:
        raise DiagnosticError(
            f"within-class covariance is singular ({len(emb)} embeddings, dim {emb.shape[1]}); "
            f"needs more than dim + speakers embeddings with no collapsed directions"
        )
    skew, kurt = standardized_moments(emb, labels)
    return DiagnosticsRecord(
        epoch=epoch,
        objective=float(ce + alpha * r),
        ce_part=float(ce),
        r_part=float(r),
        theta_to_mean_gap=float(gaps.mean()),
        within_class_isotropy=float(eig[0] / eig[-1]),
        skewness_norm=float(np.linalg.norm(skew)),
        excess_kurtosis_norm=float(np.linalg.norm(kurt)),
    )


def loss_level_embeddings(params, config, utterances):
    """Embeddings at the level the loss sees: one per utterance (xvector) or per frame (dvector)."""
    embs = network.forward_many(params, config, [u.frames for u in utterances])
    rows = [e.reshape(-1, e.shape[-1]) for e in embs]
    labels = [np.full(len(r), u.speaker) for r, u in zip(rows, utterances)]
    return np.concatenate(rows), np.concatenate(labels)


def diagnostic_subset(corpus, per_speaker):
    """The first ``per_speaker`` utterances of every speaker, in corpus order."""
    idx = [i for members in corpus.by_speaker() for i in members[:per_speaker]]
    return corpus.subset(sorted(idx))


def diagnose(params, net_config, corpus_subset, loss_config=None, alpha=None, epoch=0,
             reference_corpus=None, reference_means=None):
    """Diagnostics on ``corpus_subset``.

    The theta gap is measured against ``reference_means`` if given, else the
    speaker means of ``reference_corpus``, else those of the subset itself.
    """
    if len(corpus_subset) == 0:
        raise DiagnosticError("empty diagnostic subset")
    if loss_config is None:
        loss_config = LossConfig.for_mode(net_config.mode)
    emb, labels = loss_level_embeddings(params, net_config, corpus_subset.utterances)
    ref = reference_means
    if ref is None and reference_corpus is not None:
        ref = corpus_speaker_means(params, net_config, reference_corpus)
    return embedding_statistics(emb, labels, ClassifierHead.from_params(params),
                                loss_config, alpha, epoch, ref)


# -- optimisation ---------------------------------------------------------------

def init_optimizer_state(params, train_config):
    if train_config.optimizer == "adam":
        state = {f"opt.m.{k}": np.zeros_like(v) for k, v in params.items()}
        state.update({f"opt.v.{k}": np.zeros_like(v) for k, v in params.items()})
    else:
        state = {f"opt.vel.{k}": np.zeros_like(v) for k, v in params.items()}
    return state


def apply_update(params, grads, state, step, cfg, lr=None):
    """In-place optimiser update; ``step`` counts from 1."""
    lr = cfg.learning_rate if lr is None else lr
    if cfg.optimizer == "adam":
        c1 = 1.0 - cfg.beta1 ** step
        c2 = 1.0 - cfg.beta2 ** step
        for k, g in grads.items():
            m, v = state[f"opt.m.{k}"], state[f"opt.v.{k}"]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
    else:
        for k, g in grads.items():
            vel = state[f"opt.vel.{k}"]
            vel *= cfg.momentum
            vel += g
            params[k] -= lr * vel


def batch_objective(params, config, items, loss_config, alpha, ce_weight=1.0, sums=None):
    """Objective and parameter gradients for a batch.

    ``items`` is a list of ``(frames, label)``; ``frames`` may carry leading
    batch axes, in which case ``label`` has the same leading shape. Returns
    ``(value, ce, r, grads)`` with ``value = ce_weight * ce + alpha * r``.
    ``sums``, a ``(per_speaker_sum, count)`` pair, accumulates the batch embeddings.
    """
    embs, traces, labels = [], [], []
    for frames, label in items:
        emb, trace = network.forward_embedding(params, config, frames)
        label = np.asarray(label)
        if config.mode == "dvector":
            label = label[..., None]
        labels.append(np.broadcast_to(label, emb.shape[:-1]).reshape(-1))
        embs.append(emb)
        traces.append(trace)
    e_dim = config.embed_dim
    flat = np.concatenate([e.reshape(-1, e_dim) for e in embs])
    labels = np.concatenate(labels).astype(np.int64)
    if sums is not None:
        np.add.at(sums[0], labels, flat)
        np.add.at(sums[1], labels, 1)
    head = ClassifierHead.from_params(params)
    res = combined_objective(head.logits(flat), flat, labels, head, loss_config, alpha)
    g_flat, g_theta, g_bias = network.head_backward(params, flat, ce_weight * res.grad_logits)
    g_flat += res.grad_embeddings

    grads = {k: np.zeros_like(v) for k, v in params.items()}
    start = 0
    for emb, trace in zip(embs, traces):
        n = emb.size // e_dim
        g = network.backward(params, config, trace,
                             grad_embedding=g_flat[start:start + n].reshape(emb.shape))
        start += n
        for k, v in g.items():
            grads[k] += v
    grads["head.theta"] += g_theta + res.grad_theta
    grads["head.bias"] += g_bias
    return ce_weight * res.ce + alpha * res.r, res.ce, res.r, grads


def _epoch_batches(corpus, config, train_config, rng):
    """Lists of ``(frames, label)`` items for one epoch."""
    n = len(corpus)
    utts = corpus.utterances
    bs = train_config.batch_size
    if config.mode == "xvector":
        order = rng.permutation(n) if train_config.shuffle else np.arange(n)
        chunk = train_config.chunk_frames
        if chunk:
            chunk = max(chunk, config.min_frames)
            starts = np.array([rng.integers(0, max(u.num_frames - chunk, 0) + 1) for u in utts])
        for b in range(0, n, bs):
            sel = order[b:b + bs]
            if not chunk:
                yield [(utts[i].frames, utts[i].speaker) for i in sel]
                continue
            # utterances shorter than the chunk go in whole, as separate items
            full = [i for i in sel if utts[i].num_frames >= chunk]
            items = [(utts[i].frames, utts[i].speaker) for i in sel if utts[i].num_frames < chunk]
            if full:
                windows = np.stack([utts[i].frames[starts[i]:starts[i] + chunk] for i in full])
                items.insert(0, (windows, np.array([utts[i].speaker for i in full])))
            yield items
        return
    width = config.min_frames
    k = train_config.frames_per_utt
    which = np.repeat(np.arange(n), k)
    starts = np.concatenate([
        rng.integers(0, utts[i].num_frames - width + 1, size=k) for i in range(n)
    ])
    order = rng.permutation(len(which)) if train_config.shuffle else np.arange(len(which))
    for b in range(0, len(order), bs):
        sel = order[b:b + bs]
        windows = np.stack([utts[which[j]].frames[starts[j]:starts[j] + width] for j in sel])
        labels = np.array([utts[which[j]].speaker for j in sel])
        yield [(windows, labels)]


def corpus_speaker_means(params, config, corpus):
    emb, labels = loss_level_embeddings(params, config, corpus.utterances)
    return speaker_means(emb, labels, config.num_speakers)


def _epoch_means(sums, counts):
    present = counts > 0
    v = np.full_like(sums, np.nan)
    v[present] = sums[present] / counts[present, None]
    return SpeakerMeans(v, present, counts)


def _finite(params):
    return all(np.all(np.isfinite(v)) for v in params.values())


def save_checkpoint(path, params, net_config, train_config, epoch, step, opt_state):
    header = {"epoch": epoch, "step": step, "seed": train_config.seed,
              "optimizer": train_config.optimizer}
    network.save_model(path, params, net_config, header, opt_state)


def load_checkpoint(path):
    """Returns ``(params, net_config, epoch, step, opt_state)``."""
    params, config, header, extra = network.load_model(path)
    return params, config, int(header["epoch"]), int(header["step"]), extra


def train(corpus, net_config, loss_config, train_config, diag_corpus=None, init=None,
          checkpoint_path=None, checkpoint_every=0, resume=None, on_epoch=None):
    """Train an embedding network; returns ``(params, diagnostics)``.

    ``diag_corpus`` should hold utterances not used for training (see
    ``corpus.heldout``); without it the first ``diag_utts_per_speaker``
    training utterances per speaker are used. The theta gap is measured
    against the speaker means of the embeddings the loss saw during the
    epoch, accumulated over all training batches.
    ``init`` overrides the Glorot initialisation; ``resume`` is a checkpoint
    path whose epoch, parameters and optimiser state are restored. The
    shuffle order of each epoch depends only on ``(seed, epoch)``, so resumed
    runs reproduce uninterrupted ones bit for bit.
    """
    if corpus.num_speakers != net_config.num_speakers:
        raise InputError(f"corpus has {corpus.num_speakers} speakers, "
                         f"network expects {net_config.num_speakers}")
    if corpus.feat_dim != net_config.feat_dim:
        raise InputError(f"corpus feat_dim {corpus.feat_dim} != network {net_config.feat_dim}")
    short = [u.id for u in corpus.utterances if u.num_frames < net_config.min_frames]
    if short:
        raise InputError(f"{len(short)} utterances shorter than {net_config.min_frames} frames, "
                         f"e.g. {short[0]}")
    loss_config.check_mode(net_config.mode)
    if diag_corpus is None:
        diag_corpus = diagnostic_subset(corpus, train_config.diag_utts_per_speaker)

    if resume is not None:
        params, _, start_epoch, step, opt_state = load_checkpoint(resume)
    else:
        params = ({k: v.copy() for k, v in init.items()} if init is not None
                  else network.init_params(net_config, train_config.seed))
        start_epoch, step = 0, 0
        opt_state = init_optimizer_state(params, train_config)
    network.check_params(params, net_config)

    records = []
    last_finite = start_epoch - 1
    for epoch in range(start_epoch, train_config.epochs):
        alpha = train_config.alpha_at(epoch, loss_config.alpha)
        rng = np.random.default_rng([train_config.seed, epoch])
        lr = train_config.learning_rate * train_config.lr_decay ** epoch
        sums = (np.zeros((net_config.num_speakers, net_config.embed_dim)),
                np.zeros(net_config.num_speakers, dtype=np.int64))
        for items in _epoch_batches(corpus, net_config, train_config, rng):
            try:
                value, _, _, grads = batch_objective(params, net_config, items, loss_config,
                                                     alpha, sums=sums)
            except InputError as exc:
                if _finite(params):
                    raise
                raise TrainingError(f"non-finite parameters in epoch {epoch}", last_finite) from exc
            if not math.isfinite(value):
                raise TrainingError(f"objective became {value} in epoch {epoch}", last_finite)
            if not loss_config.use_bias:
                grads["head.bias"][:] = 0.0
            step += 1
            apply_update(params, grads, opt_state, step, train_config, lr)
        if not _finite(params):
            raise TrainingError(f"non-finite parameters after epoch {epoch}", last_finite)
        if train_config.replace_every and (epoch + 1) % train_config.replace_every == 0:
            head = full_info_replace(ClassifierHead.from_params(params),
                                     corpus_speaker_means(params, net_config, corpus))
            params["head.theta"] = head.theta
            params["head.bias"] = head.bias
        record = diagnose(params, net_config, diag_corpus, loss_config, alpha, epoch,
                          reference_means=_epoch_means(*sums))
        if not all(math.isfinite(v) for v in asdict(record).values()):
            raise TrainingError(f"non-finite diagnostics in epoch {epoch}", last_finite)
        last_finite = epoch
        records.append(record)
        if on_epoch is not None:
            on_epoch(record, params)
        if checkpoint_path and checkpoint_every and (epoch + 1) % checkpoint_every == 0:
            save_checkpoint(checkpoint_path, params, net_config, train_config,
                            epoch + 1, step, opt_state)
    return params, records


# -- gradient checking -----------------------------------------------------------

def tiny_config(mode="xvector", activation="tanh", num_speakers=3, feat_dim=4):
    """A two-TDNN-layer network with every width at most 16."""
    tdnn = [network.TdnnLayerSpec((-1, 0, 1), feat_dim, 6, activation),
            network.TdnnLayerSpec((0,) if mode == "xvector" else network.DVECTOR_POOL_OFFSETS,
                                  6, 5, activation)]
    pooled = 10 if mode == "xvector" else 5
    post = [network.AffineSpec(pooled, 8, activation), network.AffineSpec(8, 6, "identity")]
    return network.NetworkConfig(mode, tdnn, post, num_speakers)


OBJECTIVES = ("ce", "r", "ce+r")


def gradient_check(net_config=None, loss_config=None, seed=0, objectives=OBJECTIVES,
                   alpha=0.05, h=1e-5, num_utts=6, floor=1e-6, params=None, items=None):
    """Worst relative error between backward() and central differences.

    The error for one coordinate is ``|a - n| / max(|a|, |n|, floor)``; the
    maximum is taken over all parameters and the requested objectives
    ("ce", "r" or "ce+r" with weight ``alpha``). Random parameters and
    utterances are drawn from ``seed`` unless ``params``/``items`` are given.
    """
    if net_config is None:
        net_config = tiny_config()
    if loss_config is None:
        loss_config = LossConfig.for_mode(net_config.mode)
    rng = np.random.default_rng(seed)
    if params is None:
        params = network.init_params(net_config, seed)
        for k in params:
            params[k] = params[k] + rng.normal(0.0, 0.1, params[k].shape)
    else:
        params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    if items is None:
        s = net_config.num_speakers
        items = [(rng.normal(size=(net_config.min_frames + int(rng.integers(2, 6)),
                                   net_config.feat_dim)), i % s)
                 for i in range(max(num_utts, s))]

    weights = {"ce": (1.0, 0.0), "r": (0.0, 1.0), "ce+r": (1.0, alpha)}
    analytic = {}
    for name in objectives:
        w_ce, w_r = weights[name]
        analytic[name] = batch_objective(params, net_config, items, loss_config, w_r, w_ce)[3]

    def parts(p):
        _, ce, r, _ = batch_objective(p, net_config, items, loss_config, 0.0)
        return ce, r

    worst = 0.0
    for key, value in params.items():
        for idx in np.ndindex(value.shape):
            orig = value[idx]
            value[idx] = orig + h
            ce_p, r_p = parts(params)
            value[idx] = orig - h
            ce_m, r_m = parts(params)
            value[idx] = orig
            for name in objectives:
                w_ce, w_r = weights[name]
                num = (w_ce * (ce_p - ce_m) + w_r * (r_p - r_m)) / (2.0 * h)
                ana = analytic[name][key][idx]
                err = abs(ana - num) / max(abs(ana), abs(num), floor)
                worst = max(worst, err)
    return worst
