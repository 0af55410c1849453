"""Synthetic speaker corpora, train/test splits and trial lists.

Frames are drawn directly in a Gaussian speaker-factor space::

    frame = speaker_mean + channel_offset + noise

with one speaker mean per speaker, one channel offset per utterance and
fresh noise per frame. Raising ``channel_scale`` on an evaluation corpus
gives a condition-mismatched test set.
"""

import os
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, FormatError, InputError
from .io import load_matrix, read_lines, save_matrix, write_lines  # noqa: F401 (re-exported)


@dataclass(frozen=True)
class Utterance:
    id: str
    speaker: int
    frames: np.ndarray

    @property
    def num_frames(self):
        return self.frames.shape[0]


@dataclass(frozen=True)
class Corpus:
    utterances: tuple
    num_speakers: int
    feat_dim: int
    # latent speaker means, kept when the corpus was synthesized
    speaker_means: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "utterances", tuple(self.utterances))
        seen = np.zeros(self.num_speakers, dtype=bool)
        for u in self.utterances:
            if not 0 <= u.speaker < self.num_speakers:
                raise InputError(f"utterance {u.id}: speaker {u.speaker} out of range")
            if u.frames.ndim != 2 or u.frames.shape[1] != self.feat_dim:
                raise InputError(f"utterance {u.id}: frames shape {u.frames.shape}")
            seen[u.speaker] = True
        if not seen.all():
            missing = np.flatnonzero(~seen).tolist()
            raise InputError(f"speakers without utterances: {missing[:10]}")

    def __len__(self):
        return len(self.utterances)

    @property
    def labels(self):
        return np.array([u.speaker for u in self.utterances], dtype=np.int64)

    @property
    def ids(self):
        return [u.id for u in self.utterances]

    def by_speaker(self):
        groups = [[] for _ in range(self.num_speakers)]
        for i, u in enumerate(self.utterances):
            groups[u.speaker].append(i)
        return groups

    def subset(self, indices):
        """Corpus restricted to ``indices``; speakers keep their original index."""
        return Corpus(
            [self.utterances[i] for i in indices],
            self.num_speakers,
            self.feat_dim,
            self.speaker_means,
        )


@dataclass(frozen=True)
class SynthSpec:
    num_speakers: int = 20
    utts_per_speaker: int = 30
    frames_min: int = 50
    frames_max: int = 300
    feat_dim: int = 20
    speaker_scale: float = 1.0
    channel_scale: float = 0.5
    noise_scale: float = 1.0
    seed: int = 0
    id_prefix: str = ""

    def validate(self):
        if self.num_speakers < 1 or self.utts_per_speaker < 1:
            raise ConfigError("need at least one speaker and one utterance per speaker")
        if self.feat_dim < 1:
            raise ConfigError("feat_dim must be positive")
        if not 1 <= self.frames_min <= self.frames_max:
            raise ConfigError(f"bad frame range [{self.frames_min}, {self.frames_max}]")
        for name in ("speaker_scale", "channel_scale", "noise_scale"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")


def generate(spec):
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    means = rng.normal(0.0, 1.0, (spec.num_speakers, spec.feat_dim)) * spec.speaker_scale
    return _draw(spec, means, rng)


def heldout(spec, corpus, utts_per_speaker=10, seed=None, id_prefix="heldout-"):
    """Fresh utterances of the speakers of ``corpus`` (generated from ``spec``).

    The recorded latent means are reused; channel and noise draws come from
    a separate stream, so none of the utterances overlap the training data.
    """
    if corpus.speaker_means is None:
        raise InputError("corpus has no recorded speaker means")
    spec = replace(spec, utts_per_speaker=utts_per_speaker, id_prefix=id_prefix,
                   seed=spec.seed + 20_011 if seed is None else seed)
    spec.validate()
    return _draw(spec, corpus.speaker_means, np.random.default_rng(spec.seed))


def _draw(spec, means, rng):
    utts = []
    for s in range(spec.num_speakers):
        for k in range(spec.utts_per_speaker):
            n = int(rng.integers(spec.frames_min, spec.frames_max + 1))
            offset = rng.normal(0.0, 1.0, spec.feat_dim) * spec.channel_scale
            noise = rng.normal(0.0, 1.0, (n, spec.feat_dim)) * spec.noise_scale
            frames = means[s] + offset + noise
            utts.append(Utterance(f"{spec.id_prefix}spk{s:04d}-utt{k:04d}", s, frames))
    return Corpus(utts, spec.num_speakers, spec.feat_dim, means)


def mismatched(spec, channel_factor=2.0, seed=None, id_prefix="eval-"):
    """Spec for an evaluation corpus of fresh speakers with a scaled channel."""
    return replace(
        spec,
        channel_scale=spec.channel_scale * channel_factor,
        seed=spec.seed + 10_007 if seed is None else seed,
        id_prefix=id_prefix,
    )


def split(corpus, train_fraction, seed):
    """Stratified per-speaker split into (train, test)."""
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError("train_fraction must lie strictly between 0 and 1")
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for s, members in enumerate(corpus.by_speaker()):
        n = len(members)
        if n < 2:
            raise ConfigError(f"speaker {s} has {n} utterance(s); cannot fill both halves")
        n_train = min(max(int(round(n * train_fraction)), 1), n - 1)
        perm = rng.permutation(n)
        train_idx.extend(sorted(members[i] for i in perm[:n_train]))
        test_idx.extend(sorted(members[i] for i in perm[n_train:]))
    return corpus.subset(sorted(train_idx)), corpus.subset(sorted(test_idx))


@dataclass(frozen=True)
class Trial:
    enroll_id: str
    test_id: str
    is_target: bool

    def __post_init__(self):
        if self.enroll_id == self.test_id:
            raise InputError(f"trial pairs {self.enroll_id!r} with itself")


def make_trials(test, num_target, num_nontarget, seed):
    """Sample unordered utterance pairs without replacement.

    Pairs are drawn from the i < j upper triangle, so no trial repeats and
    none is the reverse of another.
    """
    labels = test.labels
    i, j = np.triu_indices(len(labels), k=1)
    same = labels[i] == labels[j]
    tgt_pairs = np.flatnonzero(same)
    non_pairs = np.flatnonzero(~same)
    if num_target > len(tgt_pairs):
        raise ConfigError(f"requested {num_target} target trials, only {len(tgt_pairs)} exist")
    if num_nontarget > len(non_pairs):
        raise ConfigError(
            f"requested {num_nontarget} nontarget trials, only {len(non_pairs)} exist"
        )
    rng = np.random.default_rng(seed)
    chosen = np.concatenate([
        rng.choice(tgt_pairs, size=num_target, replace=False),
        rng.choice(non_pairs, size=num_nontarget, replace=False),
    ]).astype(np.int64)
    chosen = chosen[rng.permutation(len(chosen))]
    ids = test.ids
    return [Trial(ids[i[p]], ids[j[p]], bool(same[p])) for p in chosen]


def write_trials(path, trials):
    write_lines(
        path,
        (f"{t.enroll_id} {t.test_id} {'target' if t.is_target else 'nontarget'}" for t in trials),
    )


def read_trials(path):
    trials = []
    for n, line in enumerate(read_lines(path), 1):
        fields = line.split()
        if len(fields) != 3 or fields[2] not in ("target", "nontarget"):
            raise InputError(f"{path}:{n}: expected '<enroll> <test> target|nontarget'")
        trials.append(Trial(fields[0], fields[1], fields[2] == "target"))
    return trials


def save_corpus(directory, corpus):
    """Write ``frames.gemx`` (all frames stacked), ``utt2spk`` and ``utt2num_frames``."""
    os.makedirs(directory, exist_ok=True)
    frames = (np.concatenate([u.frames for u in corpus.utterances])
              if corpus.utterances else np.zeros((0, corpus.feat_dim)))
    save_matrix(os.path.join(directory, "frames.gemx"), frames)
    write_lines(os.path.join(directory, "utt2spk"),
                (f"{u.id} {u.speaker}" for u in corpus.utterances))
    write_lines(os.path.join(directory, "utt2num_frames"),
                (f"{u.id} {u.num_frames}" for u in corpus.utterances))


def read_utt2spk(path):
    out = {}
    for n, line in enumerate(read_lines(path), 1):
        fields = line.split()
        if len(fields) != 2:
            raise InputError(f"{path}:{n}: expected '<utt_id> <speaker>'")
        try:
            out[fields[0]] = int(fields[1])
        except ValueError:
            raise InputError(f"{path}:{n}: speaker index {fields[1]!r} is not an integer")
    return out


def load_corpus(directory):
    frames = load_matrix(os.path.join(directory, "frames.gemx"))
    utt2spk = read_utt2spk(os.path.join(directory, "utt2spk"))
    lengths = []
    for n, line in enumerate(read_lines(os.path.join(directory, "utt2num_frames")), 1):
        fields = line.split()
        if len(fields) != 2:
            raise InputError(f"utt2num_frames:{n}: expected '<utt_id> <count>'")
        lengths.append((fields[0], int(fields[1])))
    if sum(n for _, n in lengths) != frames.shape[0]:
        raise FormatError("utt2num_frames does not add up to the frame matrix", 0)
    utts, start = [], 0
    for uid, n in lengths:
        if uid not in utt2spk:
            raise InputError(f"utterance {uid} missing from utt2spk")
        utts.append(Utterance(uid, utt2spk[uid], frames[start:start + n]))
        start += n
    num_speakers = max(utt2spk.values()) + 1 if utt2spk else 0
    return Corpus(utts, num_speakers, frames.shape[1])
