import numpy as np
from numpy.testing import assert_allclose, assert_array_equal
import pytest

from functions.data.helpers import SyntheticDataset, synth_dataset
from functions.jscc.helpers import (
    ChannelSettings,
    build_codec,
    channel_output,
    decode,
    degradation,
    draw_link,
    forward_link,
    link_draws,
    quality_scores,
    reconstruction_loss,
    restore_codec,
    run_link,
    train_jscc,
    transmit,
)
from functions.jscc.models import (
    CodecArch,
    CodecKey,
    GopBuffer,
    TextVocab,
    build_network,
    gop_inverse,
    gop_order,
    hierarchical_structure,
    parse_rate,
    speech_deframe,
    speech_frame,
    symbol_budget,
    text_greedy_decode,
)
from functions.phy.helpers import OfdmConfig, constellation_points
from shared.autodiff import Tensor
from shared.errors import CodecError, DatasetError


QUIET = ChannelSettings(n_taps=8, decay=0.5, snr_db=200.0)


def codec_for(modality: str, constellation: str = "QPSK", rate: str = "1/12", seed: int = 0):
    return build_codec(CodecKey(modality, constellation, rate), seed)


class TestBudgets:
    @pytest.mark.parametrize(
        "modality,rate,expected",
        [("image", "1/6", 512), ("image", "1/12", 256), ("speech", "1/12", 85), ("text", "1/6", 69)],
    )
    def test_symbol_budget(self, modality, rate, expected):
        assert symbol_budget(modality, rate) == expected

    def test_rows_cover_budget(self):
        codec = codec_for("image", rate="1/6")
        assert codec.n_rows() == 11

    @pytest.mark.parametrize("rate", ["0", "3/2", "-1/6"])
    def test_invalid_rate(self, rate):
        with pytest.raises(CodecError):
            parse_rate(rate)

    def test_unknown_modality(self):
        with pytest.raises(CodecError):
            CodecKey("smell", "QPSK", "1/6")


class TestArchitecture:
    def test_surrogate_derivation(self):
        arch = CodecArch(widths=(16, 32), depth=0, hidden=32).derive(-4, 1, 8)
        assert arch == CodecArch(widths=(12, 28), depth=1, hidden=40)

    def test_derivation_floors(self):
        arch = CodecArch(widths=(3,), depth=0, hidden=4).derive(-10, -2, -10)
        assert arch.widths == (2,) and arch.depth == 0 and arch.hidden == 4

    def test_build_is_seeded(self):
        a, b = codec_for("image", seed=3), codec_for("image", seed=3)
        for key, value in a.network.state_dict().items():
            assert_array_equal(b.network.state_dict()[key], value)

    def test_restore_from_descriptor(self):
        codec = codec_for("speech", seed=1)
        restored = restore_codec(codec.descriptor(), codec.network.state_dict())
        assert restored.key == codec.key
        assert restored.arch == codec.arch

    def test_video_first_frame_uses_image_network(self, rng):
        video = codec_for("video")
        image = build_network("image", video.arch, video.n_symbols, rng)
        image.load_state_dict(video.network.intra.state_dict())
        pairs = Tensor(rng.standard_normal((1, video.n_symbols, 2)))
        assert_allclose(video.network.decode(pairs).data, image.decode(pairs).data)


class TestGopAndVocab:
    def test_hierarchical_structure(self):
        structure = hierarchical_structure(4)
        assert structure == (1, 3, 2, 4)
        assert gop_order(structure, 2) == 3
        assert gop_inverse(structure) == (1, 3, 2, 4)

    def test_invalid_structure(self):
        with pytest.raises(CodecError):
            gop_order((1, 1, 2), 1)

    def test_buffer_overflow(self):
        buffer = GopBuffer(2, (1, 2))
        buffer.append(None)
        buffer.append(None)
        with pytest.raises(CodecError):
            buffer.append(None)

    def test_sentence_encoding(self):
        vocab = TextVocab()
        ids = vocab.encode_sentence([5, 6, 7])
        assert ids.shape == (13,)
        assert vocab.words(ids) == [5, 6, 7]
        with pytest.raises(CodecError):
            vocab.encode_sentence(list(range(3, 16)))

    def test_greedy_decode_stops_at_end(self):
        vocab = TextVocab()
        logits = np.zeros((5, vocab.size))
        logits[0, 9] = logits[1, 4] = logits[2, vocab.end_id] = logits[3, 8] = 1.0
        assert text_greedy_decode(logits, vocab) == [9, 4]

    def test_speech_framing(self):
        clip = np.arange(1024.0)
        assert_array_equal(speech_deframe(speech_frame(clip)), clip)
        with pytest.raises(CodecError):
            speech_frame(np.zeros(1000))


class TestLink:
    def test_transmit_places_constellation_points(self):
        codec = codec_for("image")
        grid = transmit(codec, synth_dataset("image", 2, seed=0).inputs)
        assert grid.shape == (2, codec.n_rows(), 64)
        data = grid[..., list(OfdmConfig().data_subcarriers)]
        points = constellation_points("QPSK")
        assert np.all(np.min(np.abs(data[..., None] - points), axis=-1) < 1e-12)

    def test_noiseless_link_matches_direct_decoding(self, rng):
        codec = codec_for("text")
        x = synth_dataset("text", 3, seed=0).inputs
        draw = draw_link(rng, 3, codec.n_rows(), QUIET)
        through_channel = run_link(codec, x, [draw])
        direct = decode(codec, transmit(codec, x))
        assert_allclose(through_channel, direct, atol=1e-9)

    def test_graph_link_matches_numpy_link(self, rng):
        codec = codec_for("speech")
        x = synth_dataset("speech", 2, seed=0).inputs
        draws = link_draws(rng, codec, 2, ChannelSettings(snr_db=10.0))
        graph_out = forward_link(codec, x, draws).reconstruction.data
        assert_allclose(graph_out, run_link(codec, x, draws), atol=1e-8)

    def test_video_runs_the_gop(self, rng):
        codec = codec_for("video")
        x = synth_dataset("video", 2, seed=0).inputs
        draws = link_draws(rng, codec, 2, QUIET, gop_size=x.shape[1])
        assert len(draws) == x.shape[1]
        out = run_link(codec, x, draws, structure=hierarchical_structure(x.shape[1]))
        assert out.shape == x.shape

    def test_video_needs_buffer(self):
        codec = codec_for("video")
        with pytest.raises(CodecError):
            transmit(codec, synth_dataset("image", 1, seed=0).inputs)

    def test_channel_hook_sees_every_transmission(self, rng):
        codec = codec_for("image")
        x = synth_dataset("image", 2, seed=0).inputs
        seen = []

        def channel(step, grid, draw):
            seen.append(step)
            return channel_output(grid, draw)

        run_link(codec, x, link_draws(rng, codec, 2, QUIET), channel=channel)
        assert seen == [0]

    def test_decode_checks_rows(self):
        codec = codec_for("image")
        with pytest.raises(CodecError):
            decode(codec, np.zeros((1, codec.n_rows() + 1, 64)))


class TestQuality:
    def test_scores_per_modality(self):
        x = synth_dataset("image", 3, seed=0).inputs
        metric, scores = quality_scores("image", x, x)
        assert metric == "psnr" and np.all(scores == 99.0)
        metric, scores = quality_scores("speech", np.zeros((2, 1024)), np.ones((2, 1024)))
        assert metric == "mse"
        assert_allclose(scores, 1.0)

    def test_text_scores_use_decoded_tokens(self):
        vocab = TextVocab()
        ids = synth_dataset("text", 2, seed=0).inputs
        logits = np.eye(vocab.size)[ids] * 10.0
        metric, scores = quality_scores("text", ids, logits)
        assert metric == "bleu"
        assert_allclose(scores, 1.0)

    def test_degradation_sign(self):
        assert_allclose(degradation("psnr", np.array([30.0]), np.array([20.0])), [10.0])
        assert_allclose(degradation("mse", np.array([0.1]), np.array([0.4])), [0.3])

    def test_losses_are_scalars(self):
        x = synth_dataset("video", 2, seed=0).inputs
        codec = codec_for("video")
        rng = np.random.default_rng(0)
        output = forward_link(codec, x, link_draws(rng, codec, 2, QUIET, gop_size=x.shape[1]))
        assert reconstruction_loss("video", x, output.reconstruction).shape == ()


class TestTraining:
    def test_empty_dataset(self):
        with pytest.raises(DatasetError):
            train_jscc(codec_for("image"), SyntheticDataset("image", np.zeros((0, 3, 32, 32))))

    @pytest.mark.slow
    def test_training_reduces_validation_loss(self):
        codec = codec_for("speech")
        result = train_jscc(codec, synth_dataset("speech", 24, seed=0), ChannelSettings(snr_db=20.0), epochs=4, lr=3e-3, batch_size=8)
        assert result.final_val_loss < result.initial_val_loss
        assert len(result.epoch_losses) == 4
