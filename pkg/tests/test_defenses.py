import numpy as np
from numpy.testing import assert_allclose
import pytest

from functions.attack.helpers import EvalSetup, InjectionLog, PerturbationSource, attack_channel, sample_attacker_channels
from functions.attack.models import Pgm, generate
from functions.attack.transform import apply_transform
from functions.data.helpers import synth_dataset
from functions.defenses.helpers import (
    DetectionBudget,
    DefenderPgm,
    adversarial_train,
    capture_channel,
    collect_grids,
    detect,
    detection_report,
    detection_scores,
    eval_defenses,
    eval_detection,
    fine_tune,
    oracle_defend,
    oracle_defense,
    perturbation_subtract,
    subtract,
    subtraction_defense,
    train_detector,
)
from functions.defenses.models import DetectorModel
from functions.jscc.helpers import ChannelSettings, build_codec, draw_link, link_draws, run_link
from functions.jscc.models import CodecKey
from functions.phy.helpers import OfdmConfig, allocate_symbols, complex_gaussian, constellation_points
from shared.errors import DatasetError, DefenseError, ShapeError


SETTINGS = ChannelSettings(n_taps=8, decay=0.5, snr_db=10.0)
OFDM = OfdmConfig()


def victim_grid(rng, rows: int = 12) -> np.ndarray:
    points = constellation_points("QPSK")
    return allocate_symbols(points[rng.integers(0, 4, size=rows * 48)], OFDM)[None]


@pytest.fixture
def small_pgm():
    return Pgm(np.random.default_rng(0), latent_dim=8, n_rows=4, channels=2, blocks=1)


@pytest.fixture
def attacker(small_pgm):
    return PerturbationSource("magmaw", pgm=small_pgm)


@pytest.fixture
def defender():
    return DefenderPgm(Pgm(np.random.default_rng(1), latent_dim=8, n_rows=4, channels=2, blocks=1))


@pytest.fixture
def text_codec():
    return build_codec(CodecKey("text", "QPSK", "1/12"), seed=0)


class TestSubtraction:
    def test_subtract_truncates_estimate(self, rng):
        estimate = complex_gaussian(rng, (12, 64), 1.0)
        h_a = complex_gaussian(rng, (64,), 1.0)
        assert_allclose(subtract(h_a * estimate[:3], estimate, h_a), 0.0, atol=1e-12)

    def test_short_estimate(self):
        with pytest.raises(ShapeError):
            subtract(np.zeros((4, 64)), np.zeros((3, 64)), np.ones(64))

    def test_own_guess_is_removed_exactly(self, rng, defender):
        z, tau = defender.draw(rng)
        tau = tau.with_epsilon(2.0)
        h_a = complex_gaussian(rng, (64,), 1.0)
        received = h_a * apply_transform(generate(defender.pgm, z), tau)
        assert_allclose(perturbation_subtract(received, defender, z, tau, h_a), 0.0, atol=1e-10)

    def test_hook_runs_inside_attack_channel(self, rng, attacker, defender):
        grid = victim_grid(rng)
        draw = draw_link(rng, 1, grid.shape[1], SETTINGS)
        channels = sample_attacker_channels(rng, 3, SETTINGS)
        log = InjectionLog()
        hook = subtraction_defense(defender, np.random.default_rng(2), channels)
        received = attack_channel(attacker.draw(rng), -10.0, channels[0], log=log, defend=hook)(0, grid, draw)
        assert received.shape == grid.shape
        assert log.residual_energy[0] > 0.0


class TestOracle:
    def setup_injection(self, rng, attacker):
        grid = victim_grid(rng)
        draw = draw_link(rng, 1, grid.shape[1], SETTINGS)
        h_a = complex_gaussian(rng, (64,), 1.0)
        return grid, draw, h_a, attacker.draw(rng)

    def test_synced_oracle_removes_everything(self, rng, attacker):
        grid, draw, h_a, perturbation = self.setup_injection(rng, attacker)
        log = InjectionLog()
        attack_channel(perturbation, -10.0, h_a, log=log, defend=oracle_defense(True))(0, grid, draw)
        assert log.residual_energy[0] < 1e-18 < log.attack_energy[0]

    def test_unsynced_oracle_leaves_residual(self, rng, attacker):
        grid, draw, h_a, perturbation = self.setup_injection(rng, attacker)
        log = InjectionLog()
        attack_channel(perturbation, -10.0, h_a, log=log, defend=oracle_defense(False, np.random.default_rng(3)))(0, grid, draw)
        assert log.residual_energy[0] > 1e-6 * log.attack_energy[0]

    def test_unsynced_oracle_with_correct_guess(self, rng, attacker):
        perturbation = attacker.draw(rng)
        tau = perturbation.tau.with_epsilon(1.0)
        h_a = complex_gaussian(rng, (64,), 1.0)
        received = h_a * apply_transform(perturbation.delta, tau)
        defended = oracle_defend(received, perturbation.delta, tau, h_a, synced=False, guess=(tau.phi, tau.delta_t))
        assert_allclose(defended, 0.0, atol=1e-10)

    def test_unsynced_oracle_needs_offsets(self, rng, attacker):
        perturbation = attacker.draw(rng)
        with pytest.raises(DefenseError):
            oracle_defend(np.zeros((12, 64)), perturbation.delta, perturbation.tau.with_epsilon(1.0), np.ones(64), synced=False)


class TestDetectorModel:
    def test_scores_are_probabilities(self, rng):
        detector = DetectorModel(np.random.default_rng(0), n_rows=2)
        scores = detection_scores(detector, rng.standard_normal((5, 2, 48, 2)))
        assert scores.shape == (5,) and np.all((scores > 0) & (scores < 1))
        score, flagged = detect(detector, rng.standard_normal((2, 48, 2)))
        assert flagged == (score >= 0.5)

    def test_input_shape_checked(self):
        with pytest.raises(ShapeError):
            DetectorModel(np.random.default_rng(0), n_rows=2)(np.zeros((1, 3, 48, 2)))

    def test_threshold_range(self):
        with pytest.raises(ShapeError):
            DetectorModel(np.random.default_rng(0), n_rows=2, threshold=1.5)

    def test_descriptor_round_trip(self):
        detector = DetectorModel(np.random.default_rng(0), n_rows=3, hidden=(8,), threshold=0.4)
        rebuilt = DetectorModel.from_descriptor(detector.descriptor())
        assert rebuilt.descriptor() == detector.descriptor()


class TestDetectorTraining:
    def separable(self, rng, count: int = 40):
        return rng.normal(0.0, 1.0, (count, 2, 48, 2)), rng.normal(1.5, 1.0, (count, 2, 48, 2))

    def test_learns_separable_grids(self, rng):
        clean, perturbed = self.separable(rng)
        result = train_detector(DetectorModel(np.random.default_rng(0), n_rows=2), clean, perturbed, epochs=15, lr=1e-2, batch_size=16)
        assert result.train_accuracy > 0.9
        assert detection_report(result.detector, clean, perturbed)["auc"] > 0.9

    def test_fine_tune_never_loses_accuracy(self, rng):
        clean, perturbed = self.separable(rng)
        detector = DetectorModel(np.random.default_rng(0), n_rows=2)
        train_detector(detector, clean[:10], perturbed[:10] - 1.5, epochs=2)
        before = (detection_scores(detector, np.concatenate([clean, perturbed])) >= 0.5) == np.repeat([False, True], len(clean))
        result = fine_tune(detector, clean, perturbed, epochs=3, lr=1e-2)
        assert result.train_accuracy >= before.mean()

    def test_needs_both_classes(self, rng):
        with pytest.raises(DatasetError):
            train_detector(DetectorModel(np.random.default_rng(0), n_rows=2), np.zeros((0, 2, 48, 2)), rng.standard_normal((3, 2, 48, 2)))

    def test_report_keys(self, rng):
        clean, perturbed = self.separable(rng, count=6)
        report = detection_report(DetectorModel(np.random.default_rng(0), n_rows=2), clean, perturbed)
        assert set(report) == {"auc", "detection_rate", "false_positive_rate"}
        assert 0.0 <= report["auc"] <= 1.0


class TestGridCollection:
    def test_capture_records_each_transmission(self, rng, text_codec):
        sink = []
        x = synth_dataset("text", 2, seed=0).inputs
        run_link(text_codec, x, link_draws(rng, text_codec, 2, SETTINGS), channel=capture_channel(sink, "QPSK"))
        assert len(sink) == 1
        assert sink[0].shape == (2, text_codec.n_rows(), 48, 2)

    def test_silent_attacker_leaves_grids_unchanged(self, text_codec):
        dataset = synth_dataset("text", 4, seed=0)
        channels = sample_attacker_channels(np.random.default_rng(0), 3, SETTINGS)
        clean, perturbed = collect_grids(text_codec, dataset, PerturbationSource("none"), -10.0, SETTINGS, channels, 3, seed=0, label="t")
        assert clean.shape == (3, text_codec.n_rows(), 48, 2)
        assert_allclose(perturbed, clean)

    def test_needs_items(self, text_codec):
        dataset = synth_dataset("text", 2, seed=0)
        with pytest.raises(DatasetError):
            collect_grids(text_codec, dataset, PerturbationSource("none"), -10.0, SETTINGS, np.ones((1, 64)), 0, seed=0, label="t")


class TestEvaluation:
    def test_defense_rows(self, text_codec, attacker, defender):
        channels = sample_attacker_channels(np.random.default_rng(0), 3, SETTINGS)
        setup = EvalSetup(SETTINGS, channels, seed=1, trials=2, workers=1)
        rows = eval_defenses(attacker, [text_codec], {"text": synth_dataset("text", 4, seed=0)}, -10.0, setup, defender=defender)
        by_defense = {row["defense"]: row for row in rows}
        assert list(by_defense) == ["none", "perturbation-subtraction", "oracle-synced", "oracle-unsynced"]
        assert by_defense["none"]["residual_power_ratio"] == pytest.approx(1.0)
        assert by_defense["oracle-synced"]["residual_power_ratio"] < 1e-12
        assert by_defense["oracle-synced"]["defended"] == pytest.approx(by_defense["oracle-synced"]["no_attack"])
        assert all(row["metric"] == "bleu" for row in rows)

    def test_subtraction_needs_defender(self, text_codec, attacker):
        setup = EvalSetup(SETTINGS, np.ones((1, 64)), trials=1, workers=1)
        with pytest.raises(DefenseError):
            eval_defenses(attacker, [text_codec], {"text": synth_dataset("text", 2, seed=0)}, -10.0, setup, defenses=("perturbation-subtraction",))

    @pytest.mark.slow
    def test_detection_rows(self, text_codec, attacker, defender):
        channels = sample_attacker_channels(np.random.default_rng(0), 3, SETTINGS)
        setup = EvalSetup(SETTINGS, channels, seed=1, trials=1, workers=1)
        budget = DetectionBudget(offline_items=4, online_items=4, test_items=4, epochs=1, fine_tune_epochs=1)
        rows = eval_detection(text_codec, synth_dataset("text", 4, seed=0), defender, {"magmaw": attacker}, -10.0, setup, budget)
        assert [row["stage"] for row in rows] == ["before-fine-tune", "after-fine-tune"]
        assert rows[0]["samples"] == 8


class TestAdversarialTraining:
    def test_empty_dataset(self, text_codec, defender):
        empty = synth_dataset("text", 1, seed=0).subset(np.array([], dtype=np.int64))
        with pytest.raises(DatasetError):
            adversarial_train(text_codec, empty, defender, np.ones((1, 64)))

    @pytest.mark.slow
    def test_dataset_grows_each_epoch(self, text_codec, defender):
        before = {k: v.copy() for k, v in text_codec.network.state_dict().items()}
        channels = sample_attacker_channels(np.random.default_rng(0), 3, SETTINGS)
        result = adversarial_train(text_codec, synth_dataset("text", 4, seed=0), defender, channels, SETTINGS, epochs=2, batch_size=2)
        assert result.dataset_sizes == [8, 12]
        assert len(result.adversarial_batches) == 4
        assert result.codec.role == "hardened"
        for key, value in text_codec.network.state_dict().items():
            assert np.array_equal(value, before[key])
