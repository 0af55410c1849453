"""LDA projection, two-covariance PLDA and cosine scoring of trials."""

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InputError, NotPositiveDefiniteError, NumericalError
from .io import atomic_write, load_bundle, read_lines, save_bundle
from .numkit import cholesky, sym_eig, tri_solve

DEFAULT_LDA_DIM = 150
FLOOR_FACTOR = 1e-6


def _group(embeddings, labels):
    x = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    if x.ndim != 2 or labels.shape != (x.shape[0],):
        raise InputError(f"need (n, dim) embeddings with n labels, got {x.shape} / {labels.shape}")
    speakers, inverse, counts = np.unique(labels, return_inverse=True, return_counts=True)
    means = np.zeros((len(speakers), x.shape[1]))
    np.add.at(means, inverse, x)
    means /= counts[:, None]
    return x, inverse, counts, means


def _floor(dim_trace, dim):
    return FLOOR_FACTOR * dim_trace / dim


def _whitener(within):
    """Cholesky factor of ``within``, flooring the diagonal once if needed."""
    try:
        return cholesky(within), within
    except NotPositiveDefiniteError:
        d = within.shape[0]
        bump = _floor(max(np.trace(within), 1.0), d)
        warnings.warn(f"within-class scatter is singular; adding {bump:.3g} * I", RuntimeWarning)
        floored = within + bump * np.eye(d)
        try:
            return cholesky(floored), floored
        except NotPositiveDefiniteError as exc:
            raise NumericalError(f"within-class scatter still singular after flooring: {exc}")


@dataclass
class LdaModel:
    projection: np.ndarray   # (embed_dim, out_dim)
    mean: np.ndarray
    eigenvalues: np.ndarray  # between/within ratios of the kept directions

    @property
    def out_dim(self):
        return self.projection.shape[1]

    def transform(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) @ self.projection


def fit_lda(embeddings, labels, out_dim):
    """Fisher LDA: whiten the within-class scatter, then diagonalise between-class scatter.

    The projected training data has identity within-class covariance.
    """
    x, inverse, counts, means = _group(embeddings, labels)
    n, d = x.shape
    s = len(counts)
    if s < 2:
        raise InputError("LDA needs at least two speakers")
    if not 1 <= out_dim <= min(d, s - 1):
        raise ConfigError(f"LDA out_dim must lie in [1, {min(d, s - 1)}], got {out_dim}")
    mu = x.mean(axis=0)
    z = x - means[inverse]
    sw = z.T @ z / n
    c = means - mu
    sb = (c * counts[:, None]).T @ c / n
    L, _ = _whitener(sw)
    m = tri_solve(L, tri_solve(L, sb).T).T
    vals, vecs = sym_eig(0.5 * (m + m.T))
    proj = tri_solve(L, vecs[:, :out_dim], trans=True)
    return LdaModel(proj, mu, vals[:out_dim])


def trace_ratio(lda, embeddings, labels):
    """trace(P' Sb P) / trace(P' Sw P) of the projected data."""
    y = lda.transform(embeddings)
    _, inverse, counts, means = _group(y, labels)
    z = y - means[inverse]
    c = means - y.mean(axis=0)
    return float((c ** 2 * counts[:, None]).sum() / (z ** 2).sum())


@dataclass
class PldaModel:
    mu: np.ndarray
    between_cov: np.ndarray
    within_cov: np.ndarray
    transform: np.ndarray    # rows map centred vectors into the jointly diagonal basis
    psi: np.ndarray          # between-speaker variances in that basis (within = I)

    @property
    def dim(self):
        return self.mu.shape[0]

    def project(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mu) @ self.transform.T


def _diagonalize(between, within):
    L = cholesky(within)
    m = tri_solve(L, tri_solve(L, between).T).T
    psi, v = sym_eig(0.5 * (m + m.T))
    return L, np.maximum(psi, 0.0), v


def plda_from_covariances(mu, between, within):
    """Build a scoring-ready model from given covariances (between PSD, within PD)."""
    mu = np.asarray(mu, dtype=np.float64)
    between = np.asarray(between, dtype=np.float64)
    within = np.asarray(within, dtype=np.float64)
    L, psi, v = _diagonalize(between, within)
    transform = tri_solve(L, v, trans=True).T        # v' L^-1
    return PldaModel(mu, between, within, transform, psi)


def fit_plda(embeddings, labels):
    """Moment-based two-covariance PLDA.

    within  = pooled within-speaker covariance (divides by N - S)
    between = covariance of speaker means - within / n_h, with n_h the
              harmonic mean of per-speaker counts; negative directions
              (relative to within) are clipped to zero.
    Only speakers with at least two embeddings are used.
    """
    x, inverse, counts, means = _group(embeddings, labels)
    keep = counts >= 2
    if keep.sum() < 2:
        raise InputError("PLDA needs at least two speakers with two or more embeddings each")
    rows = keep[inverse]
    x, inverse = x[rows], np.cumsum(keep)[inverse[rows]] - 1
    counts, means = counts[keep], means[keep]
    n, d = x.shape
    s = len(counts)
    z = x - means[inverse]
    within = z.T @ z / (n - s)
    w_vals, w_vecs = sym_eig(within)
    floor = _floor(max(w_vals.sum(), 1e-300), d)
    if w_vals[-1] < floor:
        within = (w_vecs * np.maximum(w_vals, floor)) @ w_vecs.T
    mu = means.mean(axis=0)
    c = means - mu
    n_h = s / (1.0 / counts).sum()
    between = c.T @ c / (s - 1) - within / n_h
    L, psi, v = _diagonalize(between, within)
    # clipped between-speaker covariance, mapped back from the whitened basis
    lv = L @ v
    between = (lv * psi) @ lv.T
    return PldaModel(mu, between, within, tri_solve(L, v, trans=True).T, psi)


def _llr_diag(u, w, psi):
    """Per-dimension same/different log-likelihood ratio with unit within variance."""
    a = psi + 1.0
    det = 2.0 * psi + 1.0
    uu = u * u + w * w
    quad = (a * uu - 2.0 * psi * u * w) / det - uu / a
    return (-0.5 * np.log(det) + np.log(a) - 0.5 * quad).sum(axis=-1)


def plda_score(model, enroll, test):
    """Log-likelihood ratio of same vs different speaker for one trial (or row-wise batches)."""
    e = np.asarray(enroll, dtype=np.float64)
    t = np.asarray(test, dtype=np.float64)
    if e.shape[-1] != model.dim or t.shape[-1] != model.dim:
        raise InputError(f"embedding dims {e.shape[-1]}/{t.shape[-1]} != PLDA dim {model.dim}")
    return _llr_diag(model.project(e), model.project(t), model.psi)


def cosine_score(enroll, test):
    e = np.asarray(enroll, dtype=np.float64)
    t = np.asarray(test, dtype=np.float64)
    if e.shape[-1] != t.shape[-1]:
        raise InputError(f"embedding dims differ: {e.shape[-1]} vs {t.shape[-1]}")
    ne = np.linalg.norm(e, axis=-1)
    nt = np.linalg.norm(t, axis=-1)
    if np.any(ne == 0) or np.any(nt == 0):
        raise InputError("cosine score of a zero vector is undefined")
    return np.clip((e * t).sum(axis=-1) / (ne * nt), -1.0, 1.0)


def length_normalize(x):
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.where(norms == 0, 1.0, norms) * np.sqrt(x.shape[-1])


@dataclass
class Backend:
    """Embedding post-processing plus a scorer: ``"plda"`` or ``"cosine"``."""

    kind: str = "plda"
    lda: LdaModel = None
    plda: PldaModel = None
    length_norm: bool = False

    def prepare(self, x):
        x = np.asarray(x, dtype=np.float64)
        if self.lda is not None:
            x = self.lda.transform(x)
        if self.length_norm:
            x = length_normalize(x)
        return x

    def score(self, enroll, test):
        e, t = self.prepare(enroll), self.prepare(test)
        if self.kind == "cosine":
            return cosine_score(e, t)
        return plda_score(self.plda, e, t)


def fit_backend(embeddings, labels, kind="plda", lda_dim=DEFAULT_LDA_DIM, length_norm=False):
    """LDA (to ``min(lda_dim, speakers - 1, dim)``; 0 disables) then PLDA or cosine."""
    if kind not in ("plda", "cosine"):
        raise ConfigError(f"backend must be 'plda' or 'cosine', got {kind!r}")
    x = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    backend = Backend(kind=kind, length_norm=length_norm)
    if lda_dim:
        dim = min(lda_dim, len(np.unique(labels)) - 1, x.shape[1])
        backend.lda = fit_lda(x, labels, dim)
    if kind == "plda":
        backend.plda = fit_plda(backend.prepare(x), labels)
    return backend


@dataclass
class ScoreSet:
    trials: list
    scores: np.ndarray

    def __len__(self):
        return len(self.trials)

    @property
    def labels(self):
        return np.array([t.is_target for t in self.trials], dtype=bool)


def score_trials(scorer, embeddings, trials, lda=None):
    """Score trials in order.

    ``scorer`` is a :class:`Backend`, a :class:`PldaModel` or the string
    ``"cosine"``; ``embeddings`` maps utterance id to vector. ``lda`` is
    applied first when given.
    """
    trials = list(trials)
    missing = sorted({i for t in trials for i in (t.enroll_id, t.test_id) if i not in embeddings})
    if missing:
        raise InputError(f"{len(missing)} trial ids have no embedding: {missing[:10]}")
    if not trials:
        return ScoreSet([], np.zeros(0))
    e = np.stack([embeddings[t.enroll_id] for t in trials])
    t = np.stack([embeddings[t.test_id] for t in trials])
    if lda is not None:
        e, t = lda.transform(e), lda.transform(t)
    if isinstance(scorer, Backend):
        scores = scorer.score(e, t)
    elif isinstance(scorer, PldaModel):
        scores = plda_score(scorer, e, t)
    elif scorer == "cosine":
        scores = cosine_score(e, t)
    else:
        raise InputError(f"unknown scorer {scorer!r}")
    if not np.all(np.isfinite(scores)):
        raise NumericalError("non-finite trial scores")
    return ScoreSet(trials, np.asarray(scores, dtype=np.float64))


def write_scores(path, score_set):
    with atomic_write(path, "w") as fh:
        for trial, s in zip(score_set.trials, score_set.scores):
            fh.write(f"{trial.enroll_id} {trial.test_id} {s:.6f}\n")


def read_scores(path):
    """Returns a list of ``(enroll_id, test_id, score)``."""
    out = []
    for n, line in enumerate(read_lines(path), 1):
        fields = line.split()
        if len(fields) != 3:
            raise InputError(f"{path}:{n}: expected '<enroll> <test> <score>'")
        out.append((fields[0], fields[1], float(fields[2])))
    return out


def save_backend(path, backend):
    header = {"kind": backend.kind, "length_norm": int(backend.length_norm),
              "lda": int(backend.lda is not None)}
    tensors = {}
    if backend.lda is not None:
        tensors.update({"lda.projection": backend.lda.projection, "lda.mean": backend.lda.mean,
                        "lda.eigenvalues": backend.lda.eigenvalues})
    if backend.plda is not None:
        p = backend.plda
        tensors.update({"plda.mu": p.mu, "plda.between": p.between_cov, "plda.within": p.within_cov,
                        "plda.transform": p.transform, "plda.psi": p.psi})
    save_bundle(path, header, tensors)


def load_backend(path):
    header, t = load_bundle(path)
    backend = Backend(kind=header["kind"], length_norm=bool(int(header["length_norm"])))
    if int(header["lda"]):
        backend.lda = LdaModel(t["lda.projection"], t["lda.mean"], t["lda.eigenvalues"])
    if "plda.mu" in t:
        backend.plda = PldaModel(t["plda.mu"], t["plda.between"], t["plda.within"],
                                 t["plda.transform"], t["plda.psi"])
    return backend
