"""The ``gembed`` command: synth, train, extract, fit-backend, score, eval, gradcheck, diagnose.

Configuration files hold UTF-8 ``key = value`` lines with ``#`` comments and
dotted keys (``loss.alpha = 0.05``). Values come from the chosen profile,
then the file, then ``--set key=value``, then the dedicated flags. Exit
codes: 0 success, 2 user error, 3 numerical failure.
"""

import argparse
import os
import sys
from dataclasses import fields, replace

from threadpoolctl import threadpool_limits

from . import backend, corpus, metrics, network, trainer
from .errors import ConfigError, GembedError, InputError, NumericalError
from .io import load_archive, save_archive
from .loss import LossConfig

EXIT_OK, EXIT_USER, EXIT_NUMERIC = 0, 2, 3
THREADS_ENV = "GEMBED_THREADS"


def _bool(text):
    value = text.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text):
    return tuple(int(x) for x in text.split(",") if x.strip())


def _floats(text):
    return tuple(float(x) for x in text.split(",") if x.strip())


def _schedule(text):
    """``"0:0,10:0.05"`` -> ((0, 0.0), (10, 0.05))."""
    out = []
    for item in text.split(","):
        if item.strip():
            epoch, alpha = item.split(":")
            out.append((int(epoch), float(alpha)))
    return tuple(out)


def _optional_int(text):
    return None if text.strip().lower() in ("", "none") else int(text)


# key -> (parser, description)
KEYS = {
    "synth.num_speakers": (int, "training speakers"),
    "synth.utts_per_speaker": (int, "training utterances per speaker"),
    "synth.frames_min": (int, "shortest utterance in frames"),
    "synth.frames_max": (int, "longest utterance in frames"),
    "synth.feat_dim": (int, "feature dimension"),
    "synth.speaker_scale": (float, "std of speaker latent means"),
    "synth.channel_scale": (float, "std of per-utterance channel offsets"),
    "synth.noise_scale": (float, "std of per-frame noise"),
    "synth.seed": (int, "corpus seed"),
    "synth.heldout_utts_per_speaker": (int, "held-out diagnostic utterances per training speaker"),
    "synth.test_speakers": (int, "fresh speakers in the test corpus"),
    "synth.test_utts_per_speaker": (int, "test utterances per speaker"),
    "synth.channel_factor": (float, "test channel_scale multiplier (condition mismatch)"),
    "trials.num_target": (int, "target trials sampled from the test corpus"),
    "trials.num_nontarget": (int, "nontarget trials sampled from the test corpus"),
    "network.mode": (str, "xvector or dvector"),
    "network.hidden": (int, "TDNN width"),
    "network.stats_dim": (_optional_int, "width of the last frame layer (default: hidden)"),
    "network.embed_dim": (int, "embedding dimension"),
    "network.post_hidden": (_ints, "comma list of hidden widths after pooling"),
    "network.activation": (str, "relu, tanh or identity"),
    "network.embed_activation": (str, "activation of the embedding layer"),
    "loss.alpha": (float, "weight of the Gaussian constraint (mode default if unset)"),
    "loss.norm_form": (str, "squared or unsquared"),
    "loss.use_bias": (_bool, "train the classifier bias"),
    "train.optimizer": (str, "adam or sgd"),
    "train.learning_rate": (float, "initial step size"),
    "train.lr_decay": (float, "per-epoch step size multiplier"),
    "train.momentum": (float, "sgd momentum"),
    "train.beta1": (float, "adam beta1"),
    "train.beta2": (float, "adam beta2"),
    "train.adam_eps": (float, "adam epsilon"),
    "train.epochs": (int, "training epochs"),
    "train.batch_size": (int, "utterances (xvector) or frames (dvector) per batch"),
    "train.seed": (int, "initialisation and shuffling seed"),
    "train.alpha_schedule": (_schedule, "epoch:alpha breakpoints, comma separated"),
    "train.replace_every": (int, "full-info replacement period in epochs, 0 disables"),
    "train.shuffle": (_bool, "shuffle utterances every epoch"),
    "train.frames_per_utt": (int, "dvector frames sampled per utterance per epoch"),
    "train.chunk_frames": (int, "xvector training chunk length, 0 = whole utterance"),
    "train.diag_utts_per_speaker": (int, "fallback diagnostic utterances per speaker"),
    "backend.kind": (str, "plda or cosine"),
    "backend.lda_dim": (int, "LDA output dimension, 0 disables"),
    "backend.length_norm": (_bool, "length-normalise before PLDA"),
    "eval.p_target": (_floats, "comma list of target priors for minDCF"),
}

PROFILES = {
    "desk": {
        "synth.num_speakers": 20, "synth.utts_per_speaker": 30, "synth.frames_min": 50,
        "synth.frames_max": 300, "synth.feat_dim": 20, "synth.speaker_scale": 1.0,
        "synth.channel_scale": 0.5, "synth.noise_scale": 1.0, "synth.seed": 0,
        "synth.heldout_utts_per_speaker": 10, "synth.test_speakers": 20,
        "synth.test_utts_per_speaker": 30, "synth.channel_factor": 2.0,
        "trials.num_target": 900, "trials.num_nontarget": 9000,
        "network.mode": "xvector", "network.hidden": 64, "network.stats_dim": None,
        "network.embed_dim": 64, "network.post_hidden": (), "network.activation": "tanh",
        "network.embed_activation": "identity",
        "loss.norm_form": "squared", "loss.use_bias": True,
        "backend.kind": "plda", "backend.lda_dim": backend.DEFAULT_LDA_DIM,
        "backend.length_norm": False,
        "eval.p_target": metrics.DEFAULT_P_TARGETS,
    },
}
# shape-compatibility only; far too large to train here
PROFILES["full"] = dict(PROFILES["desk"], **{
    "synth.num_speakers": network.FULL_NUM_SPEAKERS, "network.hidden": network.FULL_EMBED_DIM,
    "network.stats_dim": network.FULL_STATS_DIM, "network.embed_dim": network.FULL_EMBED_DIM,
    "network.post_hidden": (network.FULL_EMBED_DIM,), "network.activation": "relu",
})


def parse_config_text(text, source="<config>"):
    """``key = value`` lines to a dict of raw strings; unknown keys are rejected."""
    raw = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"{source}:{n}: unknown key {key!r}")
        raw[key] = value
    return raw


class RunConfig:
    """Typed configuration values; ``explicit`` records keys set outside the profile."""

    def __init__(self, profile="desk"):
        if profile not in PROFILES:
            raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
        self.values = dict(PROFILES[profile])
        self.explicit = set()

    def set(self, key, value):
        if key not in KEYS:
            raise ConfigError(f"unknown key {key!r}")
        if isinstance(value, str):
            try:
                value = KEYS[key][0](value)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {exc}") from None
        self.values[key] = value
        self.explicit.add(key)

    def update_text(self, text, source="<config>"):
        for key, value in parse_config_text(text, source).items():
            self.set(key, value)

    def __getitem__(self, key):
        return self.values[key]

    def _section(self, prefix):
        n = len(prefix) + 1
        return {k[n:]: v for k, v in self.values.items()
                if k.startswith(prefix + ".") and k in self.explicit}

    @property
    def mode(self):
        return self["network.mode"]

    def synth_spec(self):
        return corpus.SynthSpec(**{
            name: self[f"synth.{name}"] for name in (
                "num_speakers", "utts_per_speaker", "frames_min", "frames_max", "feat_dim",
                "speaker_scale", "channel_scale", "noise_scale", "seed")
        })

    def net_config(self, feat_dim, num_speakers):
        return network.build_config(
            self.mode, feat_dim, num_speakers, hidden=self["network.hidden"],
            stats_dim=self["network.stats_dim"], embed_dim=self["network.embed_dim"],
            post_hidden=self["network.post_hidden"], activation=self["network.activation"],
            embed_activation=self["network.embed_activation"])

    def loss_config(self):
        kw = {"norm_form": self["loss.norm_form"], "use_bias": self["loss.use_bias"]}
        if "loss.alpha" in self.values:
            kw["alpha"] = self["loss.alpha"]
        return LossConfig.for_mode(self.mode, **kw)

    def train_config(self):
        return trainer.TrainConfig.for_mode(self.mode, **self._section("train"))


def documented_keys():
    return "\n".join(f"  {k:<34} {desc}" for k, (_, desc) in KEYS.items())


# -- subcommands -----------------------------------------------------------------

def cmd_synth(args, cfg):
    spec = cfg.synth_spec()
    train = corpus.generate(spec)
    held = corpus.heldout(spec, train, cfg["synth.heldout_utts_per_speaker"])
    test_spec = corpus.mismatched(spec, cfg["synth.channel_factor"])
    test_spec = replace(test_spec, num_speakers=cfg["synth.test_speakers"],
                        utts_per_speaker=cfg["synth.test_utts_per_speaker"])
    test = corpus.generate(test_spec)
    trials = corpus.make_trials(test, cfg["trials.num_target"], cfg["trials.num_nontarget"],
                                spec.seed)
    os.makedirs(args.out, exist_ok=True)
    for name, c in (("train", train), ("heldout", held), ("test", test)):
        corpus.save_corpus(os.path.join(args.out, name), c)
    corpus.write_trials(os.path.join(args.out, "trials"), trials)
    for name, c in (("train", train), ("heldout", held), ("test", test)):
        frames = sum(u.num_frames for u in c.utterances)
        print(f"{name:<8} {c.num_speakers:>5} speakers {len(c):>6} utterances {frames:>9} frames")
    n_tgt = sum(t.is_target for t in trials)
    print(f"trials   {n_tgt} target, {len(trials) - n_tgt} nontarget")


def cmd_train(args, cfg):
    data = corpus.load_corpus(args.corpus)
    diag = corpus.load_corpus(args.diag) if args.diag else None
    net_config = cfg.net_config(data.feat_dim, data.num_speakers)
    loss_config = cfg.loss_config()
    train_config = cfg.train_config()

    def report(record, _params):
        print(f"epoch {record.epoch:>3}  objective {record.objective:.4f}  ce {record.ce_part:.4f}"
              f"  r {record.r_part:.4f}  theta_gap {record.theta_to_mean_gap:.4f}", flush=True)

    params, records = trainer.train(data, net_config, loss_config, train_config, diag_corpus=diag,
                                    on_epoch=None if args.quiet else report)
    network.save_model(args.out, params, net_config,
                       {"alpha": loss_config.alpha, "norm_form": loss_config.norm_form,
                        "epochs": train_config.epochs, "seed": train_config.seed})
    trainer.write_diagnostics_csv(args.diagnostics or f"{args.out}.diag.csv", records)


def cmd_extract(args, cfg):
    params, net_config, _, _ = network.load_model(args.model)
    data = corpus.load_corpus(args.corpus)
    if data.feat_dim != net_config.feat_dim:
        raise InputError(f"corpus feat_dim {data.feat_dim} != model feat_dim {net_config.feat_dim}")
    save_archive(args.out, data.ids, network.extract_embeddings(params, net_config, data.utterances))
    print(f"{len(data)} embeddings of dim {net_config.embed_dim} -> {args.out}")


def _labels_for(ids, utt2spk_path):
    utt2spk = corpus.read_utt2spk(utt2spk_path)
    missing = [i for i in ids if i not in utt2spk]
    if missing:
        raise InputError(f"{len(missing)} embeddings have no speaker label: {missing[:10]}")
    return [utt2spk[i] for i in ids]


def cmd_fit_backend(args, cfg):
    ids, emb = load_archive(args.embeddings)
    labels = _labels_for(ids, args.labels)
    model = backend.fit_backend(emb, labels, kind=cfg["backend.kind"], lda_dim=cfg["backend.lda_dim"],
                                length_norm=cfg["backend.length_norm"])
    backend.save_backend(args.out, model)
    lda = f"LDA {model.lda.out_dim}" if model.lda is not None else "no LDA"
    print(f"{model.kind} backend ({lda}) fitted on {len(ids)} embeddings -> {args.out}")


def cmd_score(args, cfg):
    model = backend.load_backend(args.model)
    ids, emb = load_archive(args.embeddings)
    trials = corpus.read_trials(args.trials)
    scores = backend.score_trials(model, dict(zip(ids, emb)), trials)
    backend.write_scores(args.out, scores)
    print(f"{len(scores)} trials scored -> {args.out}")


def load_score_set(scores_path, trials_path):
    """Join a score file with the trial keys; every trial must be scored."""
    scored = {(e, t): s for e, t, s in backend.read_scores(scores_path)}
    trials = corpus.read_trials(trials_path)
    missing = [f"{t.enroll_id} {t.test_id}" for t in trials if (t.enroll_id, t.test_id) not in scored]
    if missing:
        raise InputError(f"{len(missing)} trials have no score: {missing[:10]}")
    return backend.ScoreSet(trials, [scored[t.enroll_id, t.test_id] for t in trials])


def cmd_eval(args, cfg):
    report = metrics.evaluate(load_score_set(args.scores, args.trials),
                              p_targets=cfg["eval.p_target"])
    if args.out:
        metrics.write_report(args.out, report, args.name)
    sys.stdout.write(report.to_text(args.name))


def cmd_gradcheck(args, cfg):
    loss_config = LossConfig.for_mode(args.mode, norm_form=args.norm_form)
    net_config = trainer.tiny_config(args.mode)
    worst = 0.0
    for objective in trainer.OBJECTIVES:
        err = trainer.gradient_check(net_config, loss_config, seed=args.seed, objectives=(objective,),
                                     alpha=args.alpha, h=args.h)
        worst = max(worst, err)
        print(f"{objective:<5} max relative error {err:.3e}")
    if worst >= args.tol:
        raise NumericalError(f"gradient check failed: {worst:.3e} >= {args.tol:g}")


def cmd_diagnose(args, cfg):
    params, net_config, header, _ = network.load_model(args.model)
    data = corpus.load_corpus(args.corpus)
    reference = corpus.load_corpus(args.reference) if args.reference else None
    alpha = float(header.get("alpha", LossConfig.for_mode(net_config.mode).alpha))
    loss_config = LossConfig.for_mode(net_config.mode, alpha=alpha,
                                      norm_form=header.get("norm_form", "squared"))
    record = trainer.diagnose(params, net_config, data, loss_config, alpha,
                              int(header.get("epochs", 0)) - 1, reference_corpus=reference)
    if args.out:
        trainer.write_diagnostics_csv(args.out, [record])
    for f in fields(record):
        print(f"{f.name:<22} {getattr(record, f.name):.6g}")


# -- argument parsing ---------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--profile", choices=sorted(PROFILES), default="desk")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one configuration key (repeatable)")

    parser = argparse.ArgumentParser(
        prog="gembed", description="Gaussian-constrained speaker embedding toolkit.",
        epilog="configuration keys:\n" + documented_keys(),
        formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate train/heldout/test corpora and trials")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, dest="synth.seed")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train an embedding network")
    p.add_argument("--corpus", required=True)
    p.add_argument("--diag", help="held-out corpus for diagnostics")
    p.add_argument("--out", required=True)
    p.add_argument("--diagnostics", help="diagnostics CSV (default: OUT.diag.csv)")
    p.add_argument("--mode", choices=("xvector", "dvector"), dest="network.mode")
    p.add_argument("--alpha", type=float, dest="loss.alpha")
    p.add_argument("--norm-form", choices=("squared", "unsquared"), dest="loss.norm_form")
    p.add_argument("--replace-every", type=int, dest="train.replace_every")
    p.add_argument("--epochs", type=int, dest="train.epochs")
    p.add_argument("--seed", type=int, dest="train.seed")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("extract", parents=[common], help="embed every utterance of a corpus")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("fit-backend", parents=[common], help="fit LDA and PLDA (or cosine)")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--labels", required=True, help="utt2spk file")
    p.add_argument("--out", required=True)
    p.add_argument("--backend", choices=("plda", "cosine"), dest="backend.kind")
    p.add_argument("--lda-dim", type=int, dest="backend.lda_dim")
    p.add_argument("--length-norm", action="store_const", const=True, dest="backend.length_norm")
    p.set_defaults(func=cmd_fit_backend)

    p = sub.add_parser("score", parents=[common], help="score a trial list")
    p.add_argument("--model", required=True, help="backend file from fit-backend")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--trials", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", parents=[common], help="EER and minDCF of a score file")
    p.add_argument("--scores", required=True)
    p.add_argument("--trials", required=True)
    p.add_argument("--out", help="report CSV (a .txt table is written alongside)")
    p.add_argument("--name", default="system")
    p.add_argument("--p-target", type=float, action="append", dest="eval.p_target")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", parents=[common], help="backward pass vs central differences")
    p.add_argument("--mode", choices=("xvector", "dvector"), default="xvector")
    p.add_argument("--norm-form", choices=("squared", "unsquared"), default="squared")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("diagnose", parents=[common], help="diagnostic statistics of a model")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--reference", help="corpus whose speaker means define the theta gap")
    p.add_argument("--out", help="write the record as diagnostics CSV")
    p.set_defaults(func=cmd_diagnose)
    return parser


def resolve_config(args):
    cfg = RunConfig(args.profile)
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            cfg.update_text(fh.read(), args.config)
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        cfg.set(key.strip(), value.strip())
    for key, value in vars(args).items():
        if key in KEYS and value is not None:
            cfg.set(key, tuple(value) if isinstance(value, list) else value)
    return cfg


def thread_limit(environ=os.environ):
    text = environ.get(THREADS_ENV, "").strip()
    if not text:
        return None
    try:
        n = int(text)
    except ValueError:
        n = 0
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {text!r}")
    return n


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        with threadpool_limits(limits=thread_limit()):
            args.func(args, cfg)
    except NumericalError as exc:
        print(f"gembed: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (GembedError, OSError) as exc:
        print(f"gembed: error: {exc}", file=sys.stderr)
        return EXIT_USER
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
