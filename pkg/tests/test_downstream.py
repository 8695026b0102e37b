import numpy as np
from numpy.testing import assert_allclose
import pytest

from functions.data.helpers import SyntheticDataset, synth_dataset
from functions.downstream.helpers import (
    TASK_CODECS,
    AttackRecord,
    attack_success_rate,
    classify,
    loss_cls_targeted,
    loss_cls_untargeted,
    targeted_margin,
    task_draws,
    task_inputs,
    task_link_graph,
    task_link_numpy,
    train_classifier,
    untargeted_margin,
)
from functions.downstream.models import Classifier
from functions.jscc.helpers import ChannelSettings, build_codec
from functions.jscc.models import CodecKey
from shared.errors import DatasetError, MetricError, ShapeError


QUIET = ChannelSettings(n_taps=8, decay=0.5, snr_db=200.0)
PROBS = np.array([[0.6, 0.3, 0.1], [0.2, 0.2, 0.6]])


def task_codecs(task: str) -> dict:
    return {modality: build_codec(CodecKey(modality, "QPSK", "1/12"), seed=0) for modality in TASK_CODECS[task]}


class TestClassifier:
    @pytest.mark.parametrize("task", ["vc", "ave"])
    def test_probabilities(self, task):
        clf = Classifier(task, np.random.default_rng(0))
        probs, classes = classify(clf, task_inputs(synth_dataset(task, 3, seed=0)))
        assert probs.shape == (3, clf.classes)
        assert_allclose(probs.sum(axis=-1), 1.0)
        assert np.array_equal(classes, np.argmax(probs, axis=-1))

    def test_unknown_task(self):
        with pytest.raises(ShapeError):
            Classifier("lipreading", np.random.default_rng(0))

    def test_descriptor_round_trip(self):
        clf = Classifier("ave", np.random.default_rng(0), role="surrogate", width_delta=-2, hidden_delta=4, use_audio=False)
        rebuilt = Classifier.from_descriptor(clf.descriptor())
        rebuilt.network.load_state_dict(clf.network.state_dict())
        inputs = task_inputs(synth_dataset("ave", 2, seed=0))
        assert_allclose(classify(rebuilt, inputs)[0], classify(clf, inputs)[0])

    def test_disabled_branch_ignores_its_input(self):
        clf = Classifier("ave", np.random.default_rng(0), use_audio=False)
        image, audio = task_inputs(synth_dataset("ave", 2, seed=0))
        assert_allclose(classify(clf, (image, audio))[0], classify(clf, (image, np.zeros_like(audio)))[0])

    def test_task_inputs(self):
        assert len(task_inputs(synth_dataset("ave", 2, seed=0))) == 2
        with pytest.raises(DatasetError):
            task_inputs(synth_dataset("image", 2, seed=0))


class TestMargins:
    def test_untargeted(self):
        assert_allclose(untargeted_margin(PROBS, np.array([0, 2])).data, [-0.3, -0.4])
        assert_allclose(untargeted_margin(PROBS, np.array([2, 0])).data, [0.5, 0.4])

    def test_targeted(self):
        assert_allclose(targeted_margin(PROBS, 1).data, [-0.3, -0.4])
        assert_allclose(targeted_margin(PROBS, 0).data, [0.3, -0.4])

    def test_target_out_of_range(self):
        with pytest.raises(ShapeError):
            targeted_margin(PROBS, 3)

    def test_clean_inputs_have_no_untargeted_margin(self):
        clf = Classifier("vc", np.random.default_rng(0))
        inputs = task_inputs(synth_dataset("vc", 4, seed=0))
        assert np.all(loss_cls_untargeted(clf, inputs, inputs) <= 0.0)

    def test_targeted_sign_matches_prediction(self):
        clf = Classifier("vc", np.random.default_rng(0))
        inputs = task_inputs(synth_dataset("vc", 4, seed=0))
        _, classes = classify(clf, inputs)
        margins = loss_cls_targeted(clf, inputs, int(classes[0]))
        assert margins[0] >= 0.0


class TestSuccessRate:
    def test_untargeted_records(self):
        records = [AttackRecord(0.2, 1), AttackRecord(-0.1, 0), AttackRecord(0.0, 2)]
        assert attack_success_rate(records) == pytest.approx(1 / 3)

    def test_targeted_records_use_prediction(self):
        records = [AttackRecord(-0.5, 3, target_class=3), AttackRecord(0.5, 1, target_class=3)]
        assert attack_success_rate(records) == 0.5

    def test_empty(self):
        with pytest.raises(MetricError):
            attack_success_rate([])


class TestTaskLink:
    @pytest.mark.parametrize("task", ["vc", "ave"])
    def test_numpy_link_keeps_shapes(self, task):
        codecs = task_codecs(task)
        inputs = task_inputs(synth_dataset(task, 2, seed=0))
        frames = inputs[0].shape[1]
        draws = task_draws(task, codecs, 2, frames, np.random.default_rng(0), QUIET)
        outputs = task_link_numpy(task, codecs, inputs, draws)
        assert [o.shape for o in outputs] == [i.shape for i in inputs]

    def test_graph_link_matches_numpy(self):
        codecs = task_codecs("vc")
        inputs = task_inputs(synth_dataset("vc", 2, seed=0))
        settings = ChannelSettings(snr_db=10.0)
        graph = task_link_graph("vc", codecs, inputs, np.random.default_rng(5), settings)
        numpy_out = task_link_numpy("vc", codecs, inputs, task_draws("vc", codecs, 2, inputs[0].shape[1], np.random.default_rng(5), settings))
        assert_allclose(graph.inputs[0].data, numpy_out[0], atol=1e-8)
        assert graph.rx_loss.shape == ()

    def test_gops_must_divide_clip(self):
        with pytest.raises(ShapeError):
            task_draws("vc", task_codecs("vc"), 1, 6, np.random.default_rng(0), QUIET)


class TestTraining:
    def test_empty_dataset(self):
        empty = SyntheticDataset("vc", np.zeros((0, 8, 3, 32, 32)), labels=np.zeros(0, dtype=np.int64))
        with pytest.raises(DatasetError):
            train_classifier(Classifier("vc", np.random.default_rng(0)), empty)

    @pytest.mark.slow
    def test_training_reduces_loss(self):
        result = train_classifier(Classifier("vc", np.random.default_rng(0)), synth_dataset("vc", 40, seed=0), epochs=4, lr=3e-3, batch_size=8)
        assert result.epoch_losses[-1] < result.epoch_losses[0]
        assert 0.0 <= result.val_accuracy <= 1.0
