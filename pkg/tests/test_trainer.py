import math

import numpy as np
import pytest

from gembed import corpus, network, trainer
from gembed.errors import DiagnosticError, InputError, TrainingError
from gembed.loss import ClassifierHead, LossConfig
from gembed.network import NetworkConfig, TdnnLayerSpec
from gembed.trainer import TrainConfig

import runs

from oracles import logsumexp_ce

SPEC = corpus.SynthSpec(num_speakers=3, utts_per_speaker=8, frames_min=12, frames_max=20,
                        feat_dim=4, seed=5)


@pytest.fixture(scope="module")
def small():
    return corpus.generate(SPEC)


def quick(mode="xvector", **kw):
    base = dict(epochs=3, batch_size=4, chunk_frames=0, frames_per_utt=3, seed=1)
    base.update(kw)
    return TrainConfig(**base)


def train(small, mode="xvector", alpha=0.05, **kw):
    cfg = trainer.tiny_config(mode)
    return trainer.train(small, cfg, LossConfig.for_mode(mode, alpha=alpha), quick(mode, **kw))


class TestTrainConfig:
    def test_alpha_schedule(self):
        cfg = TrainConfig(alpha_schedule=[(5, 1.0), (2, 0.5)])
        assert [cfg.alpha_at(e, 0.05) for e in (0, 2, 4, 5, 9)] == [0.05, 0.5, 0.5, 1.0, 1.0]

    def test_dvector_defaults(self):
        cfg = TrainConfig.for_mode("dvector", seed=3)
        assert cfg.batch_size == 128 and cfg.seed == 3
        assert TrainConfig.for_mode("xvector").batch_size == 32

    @pytest.mark.parametrize("kw", [dict(optimizer="lbfgs"), dict(batch_size=0),
                                    dict(learning_rate=-1.0), dict(alpha_schedule=[(0, -1.0)])])
    def test_invalid(self, kw):
        with pytest.raises(InputError):
            TrainConfig(**kw)


class TestTrain:
    def test_zero_epochs(self, small):
        cfg = trainer.tiny_config()
        params, records = trainer.train(small, cfg, LossConfig(), quick(epochs=0))
        init = network.init_params(cfg, 1)
        assert records == []
        for k in init:
            assert params[k].tobytes() == init[k].tobytes()

    @pytest.mark.parametrize("optimizer", ["adam", "sgd"])
    def test_zero_learning_rate(self, small, optimizer):
        params, records = train(small, learning_rate=0.0, optimizer=optimizer)
        init = network.init_params(trainer.tiny_config(), 1)
        for k in init:
            np.testing.assert_array_equal(params[k], init[k])
        assert len({r.objective for r in records}) == 1

    @pytest.mark.parametrize("mode", ["xvector", "dvector"])
    def test_deterministic(self, small, mode):
        a_params, a_rec = train(small, mode)
        b_params, b_rec = train(small, mode)
        for k in a_params:
            assert a_params[k].tobytes() == b_params[k].tobytes()
        assert a_rec == b_rec

    def test_chunked_deterministic(self, small):
        a, _ = train(small, chunk_frames=14)
        b, _ = train(small, chunk_frames=14)
        assert all(a[k].tobytes() == b[k].tobytes() for k in a)

    def test_one_record_per_epoch(self, small):
        _, records = train(small, epochs=4)
        assert [r.epoch for r in records] == [0, 1, 2, 3]
        assert all(math.isfinite(v) for r in records for v in vars(r).values())

    def test_checkpoint_resume_bit_identical(self, small, tmp_path):
        cfg = trainer.tiny_config()
        lc = LossConfig()
        full, _ = trainer.train(small, cfg, lc, quick(epochs=4))
        ckpt = tmp_path / "ckpt"
        trainer.train(small, cfg, lc, quick(epochs=2), checkpoint_path=ckpt, checkpoint_every=2)
        resumed, records = trainer.train(small, cfg, lc, quick(epochs=4), resume=ckpt)
        assert [r.epoch for r in records] == [2, 3]
        for k in full:
            assert full[k].tobytes() == resumed[k].tobytes()

    def test_replacement_sets_theta_to_means(self, small):
        cfg = trainer.tiny_config()
        params, _ = trainer.train(small, cfg, LossConfig(), quick(epochs=1, replace_every=1))
        means = trainer.corpus_speaker_means(params, cfg, small)
        np.testing.assert_array_equal(params["head.theta"], means.v)
        assert not params["head.bias"].any()

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_reports_last_finite_epoch(self, small):
        cfg = trainer.tiny_config()
        init = network.init_params(cfg, 0)
        init["fc1.weight"][0, 0] = np.inf
        with pytest.raises(TrainingError) as info:
            trainer.train(small, cfg, LossConfig(), quick(), init=init)
        assert info.value.last_finite_epoch == -1

    def test_speaker_count_mismatch(self, small):
        cfg = trainer.tiny_config(num_speakers=4)
        with pytest.raises(InputError):
            trainer.train(small, cfg, LossConfig(), quick())

    def test_loss_level_must_match_mode(self, small):
        with pytest.raises(InputError):
            trainer.train(small, trainer.tiny_config("dvector"), LossConfig(level="utterance"),
                          quick())

    def test_on_epoch_callback(self, small):
        seen = []
        trainer.train(small, trainer.tiny_config(), LossConfig(), quick(),
                      on_epoch=lambda rec, params: seen.append(rec.epoch))
        assert seen == [0, 1, 2]


class TestDiagnosticsCsv:
    def test_header_and_round_trip(self, small, tmp_path):
        _, records = train(small)
        trainer.write_diagnostics_csv(tmp_path / "d.csv", records)
        lines = (tmp_path / "d.csv").read_text().splitlines()
        assert lines[0] == "epoch,objective,ce,r,theta_gap,isotropy,skew,kurtosis"
        assert len(lines) == 4
        assert trainer.read_diagnostics_csv(tmp_path / "d.csv") == records


class TestStatistics:
    def test_hand_computed_two_speakers(self):
        # speaker 0: (1,0),(3,2) mean (2,1); speaker 1: (0,4),(2,4) mean (1,4)
        emb = np.array([[1.0, 0.0], [3.0, 2.0], [0.0, 4.0], [2.0, 4.0]])
        labels = np.array([0, 0, 1, 1])
        head = ClassifierHead(np.array([[2.0, 1.0], [1.0, 3.0]]), np.zeros(2))
        rec = trainer.embedding_statistics(emb, labels, head, LossConfig(alpha=0.05))
        # centred rows (-1,-1),(1,1),(-1,0),(1,0): covariance [[1, .5], [.5, .5]]
        root = math.sqrt(1.5 ** 2 - 4 * 0.25)
        assert abs(rec.within_class_isotropy - (1.5 + root) / (1.5 - root)) < 1e-10
        assert abs(rec.theta_to_mean_gap - 0.5 / math.sqrt(17)) < 1e-10
        # every row sits at squared distance 2 from its theta row
        assert abs(rec.r_part - 2.0) < 1e-10
        ce = logsumexp_ce((emb @ head.theta.T).tolist(), labels.tolist())
        assert abs(rec.ce_part - ce) < 1e-10
        assert abs(rec.objective - (ce + 0.1)) < 1e-10
        # x: kurtosis 1/1 - 3 = -2; y: 0.5/0.25 - 3 = -1; symmetric pairs have no skew
        assert abs(rec.skewness_norm) < 1e-10
        assert abs(rec.excess_kurtosis_norm - math.sqrt(5)) < 1e-10

    def test_theta_at_means_gives_zero_gap(self):
        rng = np.random.default_rng(0)
        emb, labels = rng.normal(size=(20, 3)), np.arange(20) % 4
        means = trainer.speaker_means(emb, labels)
        rec = trainer.embedding_statistics(emb, labels, ClassifierHead(means.v, np.zeros(4)),
                                           LossConfig())
        assert rec.theta_to_mean_gap == pytest.approx(0.0, abs=1e-15)

    def test_embeddings_on_theta_rows_are_degenerate(self):
        theta = np.array([[1.0, 0.0], [0.0, 1.0]])
        labels = np.array([0, 0, 1, 1])
        with pytest.raises(DiagnosticError, match="singular"):
            trainer.embedding_statistics(theta[labels], labels, ClassifierHead(theta),
                                         LossConfig())

    def test_isotropy_tends_to_one(self):
        rng = np.random.default_rng(1)
        ratios = []
        for n in (100, 20000):
            labels = np.arange(n) % 5
            emb = rng.normal(size=(n, 3)) + labels[:, None]
            rec = trainer.embedding_statistics(emb, labels, ClassifierHead(np.zeros((5, 3))),
                                               LossConfig())
            ratios.append(rec.within_class_isotropy)
        assert ratios[1] < ratios[0] and ratios[1] < 1.1

    def test_needs_two_speakers_with_two(self):
        with pytest.raises(DiagnosticError, match="at least 2 speakers"):
            trainer.embedding_statistics(np.ones((3, 2)), np.array([0, 0, 1]),
                                         ClassifierHead(np.zeros((2, 2))), LossConfig())

    def test_one_utterance_per_speaker(self, small):
        cfg = trainer.tiny_config()
        one = small.subset([m[0] for m in small.by_speaker()])
        with pytest.raises(DiagnosticError):
            trainer.diagnose(network.init_params(cfg, 0), cfg, one)


class TestGradientCheck:
    @pytest.mark.parametrize("mode", ["xvector", "dvector"])
    @pytest.mark.parametrize("norm_form", ["squared", "unsquared"])
    def test_tanh(self, mode, norm_form):
        cfg = trainer.tiny_config(mode)
        err = trainer.gradient_check(cfg, LossConfig.for_mode(mode, norm_form=norm_form), seed=2)
        assert err < 1e-4

    def test_linear_squared_head(self):
        cfg = NetworkConfig("dvector", [TdnnLayerSpec((-3, 0, 3), 2, 3, "identity")], [], 3)
        rng = np.random.default_rng(3)
        params = {k: rng.integers(-8, 9, size=s) / 8.0
                  for k, s in network.param_shapes(cfg).items()}
        items = [(rng.integers(-8, 9, size=(9, 2)) / 8.0, i % 3) for i in range(4)]
        err = trainer.gradient_check(cfg, LossConfig.for_mode("dvector"), objectives=("r",),
                                     h=2.0 ** -17, params=params, items=items)
        assert err < 1e-8

    def test_alpha_zero_additivity(self):
        cfg = trainer.tiny_config()
        rng = np.random.default_rng(4)
        params = network.init_params(cfg, 4)
        items = [(rng.normal(size=(8, 4)), i % 3) for i in range(6)]
        lc = LossConfig()
        _, _, _, g_zero = trainer.batch_objective(params, cfg, items, lc, 0.0)
        _, _, _, g_ce = trainer.batch_objective(params, cfg, items, lc, 0.0, ce_weight=1.0)
        _, _, _, g_r = trainer.batch_objective(params, cfg, items, lc, 1.0, ce_weight=0.0)
        _, _, _, g_sum = trainer.batch_objective(params, cfg, items, lc, 0.05)
        for k in params:
            np.testing.assert_array_equal(g_zero[k], g_ce[k])
            np.testing.assert_allclose(g_sum[k], g_ce[k] + 0.05 * g_r[k], rtol=0, atol=1e-14)


@pytest.mark.slow
class TestTrainingProperties:
    """Statistical properties on the standard 20-speaker corpus, five seeds."""

    def test_objective_decreases(self):
        for seed in runs.SEEDS:
            obj = [r.objective for r in runs.run("xvector", 0.05, seed)[1]]
            k = max(1, len(obj) // 10)
            assert np.mean(obj[-k:]) < np.mean(obj[:k])

    def test_r_non_increasing_over_final_half(self):
        ok = 0
        for seed in runs.SEEDS:
            r = np.array([rec.r_part for rec in runs.run("xvector", 0.05, seed)[1]])
            ok += bool(np.all(np.diff(r[len(r) // 2:]) <= 0))
        assert ok >= 4
