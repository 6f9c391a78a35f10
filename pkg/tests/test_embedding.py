import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from signctx.embedding import (
    ClassProbabilityProvider,
    EmbeddingTable,
    FeatureEmbedding,
    FeatureSequence,
    feature_embed,
    positional_encode,
    positional_table,
    read_fmat,
    sign_embed,
    window_count,
    word_embed,
    write_fmat,
)
from signctx.errors import ConfigError, CorpusParseError, DimensionError, SequenceTooShortError, VocabularyError
from signctx.model import TranslationModel
from signctx.numerics import Tensor, adam_step, layer_norm, tensor_sum

from .conftest import tiny_config


def test_single_exact_window():
    assert sign_embed(FeatureSequence("v", np.zeros((16, 3)))).count == 1


def test_sixty_four_frames_give_thirteen_windows():
    assert sign_embed(FeatureSequence("v", np.zeros((64, 3)))).count == 13


def test_constant_frames_mean_pool():
    w = sign_embed(FeatureSequence("v", np.ones((40, 4))))
    assert (w.windows == 1.0).all() and w.windows.shape == (7, 4)


def test_too_short_sequence_reports_lengths():
    with pytest.raises(SequenceTooShortError) as exc:
        sign_embed(FeatureSequence("v", np.zeros((10, 2))))
    assert (exc.value.length, exc.value.window) == (10, 16)


def test_windows_match_explicit_slices():
    rng = np.random.default_rng(0)
    frames = rng.normal(size=(37, 3))
    w = sign_embed(FeatureSequence("v", frames)).windows
    for i in range(w.shape[0]):
        np.testing.assert_allclose(w[i], frames[4 * i : 4 * i + 16].mean(axis=0), atol=1e-14)


def test_class_probability_provider_rows_are_distributions():
    rng = np.random.default_rng(1)
    provider = ClassProbabilityProvider(rng.normal(size=(3, 5)))
    w = sign_embed(FeatureSequence("v", rng.normal(size=(30, 3))), provider)
    assert w.windows.shape == (4, 5)
    np.testing.assert_allclose(w.windows.sum(axis=1), 1.0, atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.integers(16, 400))
def test_window_count_formula(T):
    W = window_count(T)
    assert W == (T - 16) // 4 + 1
    assert (W - 1) * 4 + 16 <= T
    assert W * 4 + 16 > T  # no further window fits


def test_feature_sequence_validation():
    with pytest.raises(DimensionError):
        FeatureSequence("v", np.zeros((0, 3)))
    with pytest.raises(DimensionError):
        FeatureSequence("v", np.array([[np.nan]]))


# --- feature embedding ----------------------------------------------------------


def test_feature_embed_zero_input_gives_zeros():
    proj = FeatureEmbedding(np.random.default_rng(0), 3, 4)
    assert (feature_embed(np.zeros((2, 3)), proj).data == 0.0).all()


def test_feature_embed_identity_projection_is_layer_norm():
    proj = FeatureEmbedding(np.random.default_rng(0), 4, 4)
    proj.proj.weight.data[...] = np.eye(4)
    x = np.array([[1.0, 5.0, -2.0, 0.5]])
    expected = layer_norm(Tensor(x), Tensor(np.ones(4)), Tensor(np.zeros(4))).data
    np.testing.assert_array_equal(feature_embed(x, proj).data, expected)


def test_feature_embed_composition_oracle():
    rng = np.random.default_rng(2)
    proj = FeatureEmbedding(rng, 5, 6)
    proj.proj.bias.data[...] = rng.normal(size=6)
    proj.norm.gain.data[...] = rng.normal(size=6)
    proj.norm.bias.data[...] = rng.normal(size=6)
    x = rng.normal(size=(3, 5))
    y = x @ proj.proj.weight.data + proj.proj.bias.data
    mu = y.mean(axis=1, keepdims=True)
    var = ((y - mu) ** 2).mean(axis=1, keepdims=True)
    expected = (y - mu) / np.sqrt(var + 1e-5) * proj.norm.gain.data + proj.norm.bias.data
    np.testing.assert_allclose(feature_embed(x, proj).data, expected, atol=1e-12)


def test_feature_embed_width_mismatch():
    proj = FeatureEmbedding(np.random.default_rng(0), 3, 4)
    with pytest.raises(DimensionError):
        feature_embed(np.zeros((2, 5)), proj)


# --- word embedding ---------------------------------------------------------------


def test_word_embed_single_lookup_and_repeat():
    table = EmbeddingTable(np.random.default_rng(0), 6, 4)
    np.testing.assert_array_equal(word_embed([3], table).data[0], table.weights.data[3])
    rows = word_embed([2, 2], table)
    tensor_sum(rows).backward()
    np.testing.assert_array_equal(table.weights.grad[2], 2.0)


def test_unused_rows_get_zero_gradient_and_stay_put():
    table = EmbeddingTable(np.random.default_rng(0), 6, 4)
    before = table.weights.data.copy()
    tensor_sum(word_embed([1, 4], table) * 3.0).backward()
    unused = [0, 2, 3, 5]
    assert (table.weights.grad[unused] == 0.0).all()
    adam_step([table.weights], lr=0.1)
    np.testing.assert_array_equal(table.weights.data[unused], before[unused])
    assert not np.array_equal(table.weights.data[1], before[1])


def test_word_embed_out_of_range():
    table = EmbeddingTable(np.random.default_rng(0), 6, 4)
    with pytest.raises(VocabularyError) as exc:
        word_embed([1, 6], table)
    assert exc.value.token_id == 6


def test_text_streams_share_one_table():
    model = TranslationModel(tiny_config())
    tables = {id(m) for m in model.modules() if isinstance(m, EmbeddingTable)}
    assert tables == {id(model.word_table)}


# --- positional encoding -----------------------------------------------------------


def test_position_zero_row():
    assert positional_table(1, 6)[0].tolist() == [0.0, 1.0, 0.0, 1.0, 0.0, 1.0]


@pytest.mark.parametrize("d", [2, 8, 64])
def test_position_one_first_entry(d):
    assert positional_table(2, d)[1, 0] == pytest.approx(math.sin(1.0), abs=1e-15)
    assert positional_table(2, d)[1, 0] == pytest.approx(0.841471, abs=1e-6)


def test_positional_table_direct_formula():
    n, d = 7, 6
    pe = positional_table(n, d)
    for pos in range(n):
        for i in range(d // 2):
            angle = pos / 10000 ** (2 * i / d)
            assert pe[pos, 2 * i] == pytest.approx(math.sin(angle), abs=1e-12)
            assert pe[pos, 2 * i + 1] == pytest.approx(math.cos(angle), abs=1e-12)


def test_encode_zeros_is_table():
    np.testing.assert_array_equal(positional_encode(Tensor(np.zeros((5, 4)))).data, positional_table(5, 4))


def test_odd_width_rejected():
    with pytest.raises(ConfigError):
        positional_table(3, 5)


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float64, (4, 6), elements=st.floats(-10, 10)), hnp.arrays(np.float64, (4, 6), elements=st.floats(-10, 10)))
def test_positional_encoding_is_input_independent(x, y):
    diff = positional_encode(Tensor(x)).data - positional_encode(Tensor(y)).data
    np.testing.assert_allclose(diff, x - y, atol=1e-12)


# --- fmat -----------------------------------------------------------------------------


def test_fmat_round_trip_is_exact(tmp_path):
    rng = np.random.default_rng(0)
    frames = rng.normal(size=(5, 3)) * 1e3
    frames[0, 0] = 1e-300
    write_fmat(tmp_path / "a.fmat", frames)
    np.testing.assert_array_equal(read_fmat(tmp_path / "a.fmat"), frames)
    assert (tmp_path / "a.fmat").read_text().splitlines()[0] == "5 3"


@pytest.mark.parametrize(
    "text, line",
    [("2\n1 2\n", 1), ("2 2\n1 2\n3\n", 3), ("2 2\n1 x\n3 4\n", 2), ("3 2\n1 2\n3 4\n", 3)],
)
def test_fmat_parse_errors_carry_line(tmp_path, text, line):
    path = tmp_path / "bad.fmat"
    path.write_text(text)
    with pytest.raises(CorpusParseError) as exc:
        read_fmat(path)
    assert exc.value.line == line
