import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gaitvlm import encoders as enc
from gaitvlm import gaitparams as gp
from gaitvlm import numtext as nt

TEMPLATE = "Walking speed is {value} leg/sec."


@pytest.fixture(scope="module")
def vocab():
    return nt.Vocabulary.build()


@pytest.fixture(scope="module")
def encoder(vocab):
    return enc.TextEncoder(vocab, enc.EncoderConfig(dim=64, n_heads=4, n_layers=4, max_len=96))


# ---------------------------------------------------------------- token ids

@pytest.mark.parametrize("v,tok", [(-2.5, 49408), (0.0, 49508), (2.5, 49608)])
def test_token_id_anchors(v, tok):
    assert nt.number_to_token_id(v) == tok


def test_token_id_bijection():
    ids = [nt.number_to_token_id(nt.token_id_to_value(t)) for t in range(49408, 49609)]
    assert ids == list(range(49408, 49609))
    values = [nt.token_id_to_value(t) for t in range(49408, 49609)]
    assert len(set(values)) == 201 and values == sorted(values)


def test_round_half_up():
    assert nt.number_to_token_id(-2.5 + 0.5 * nt.BUCKET_WIDTH) == 49409
    assert nt.number_to_token_id(-2.5 + 0.49 * nt.BUCKET_WIDTH) == 49408


def test_numeric_ids_do_not_collide_with_eos():
    assert nt.EOS_ID == 49407
    assert not nt.is_numeric_id(nt.EOS_ID)


def test_out_of_range_value_is_an_error():
    with pytest.raises(ValueError):
        nt.number_to_token_id(2.6)
    with pytest.raises(ValueError):
        nt.token_id_to_value(49407)


@given(st.floats(-2.5, 2.5))
def test_bucket_centre_within_half_width(v):
    centre = nt.token_id_to_value(nt.number_to_token_id(v))
    assert abs(centre - v) <= nt.BUCKET_WIDTH / 2 + 1e-12


# ---------------------------------------------------------------- vocabulary

def test_vocabulary_layout(vocab):
    assert vocab.size == vocab.n_words + 1 + 201
    assert vocab.index(nt.EOS_ID) == vocab.n_words
    assert vocab.index(49408) == vocab.n_words + 1
    assert vocab.index(49608) == vocab.size - 1
    every = np.concatenate([np.arange(vocab.n_words), [nt.EOS_ID], np.arange(49408, 49609)])
    assert np.array_equal(vocab.index(every), np.arange(vocab.size))
    assert np.array_equal(vocab.id_at(np.arange(vocab.size)), every)


def test_vocabulary_rejects_gap_ids(vocab):
    with pytest.raises(KeyError):
        vocab.index(vocab.n_words + 5)
    with pytest.raises(KeyError):
        vocab.id_of("zebra")


def test_vocabulary_file_round_trip(vocab, tmp_path):
    path = tmp_path / "vocab.txt"
    vocab.save(path)
    assert nt.Vocabulary.load(path).words == vocab.words
    assert "[EOS]\t49407" in path.read_text()


def test_vocabulary_covers_every_description(vocab):
    for d in gp.load_definitions():
        for w in nt.split_words(d.description):
            assert w in vocab


# ---------------------------------------------------------------- basis

def test_num_orthogonal_to_positional_encoding():
    b = nt.build_num_basis(64, 77)
    assert np.max(np.abs(b.pe @ b.num)) < 1e-9
    assert abs(np.linalg.norm(b.num) - 1) < 1e-12


def test_is_vector_orthogonal_to_num():
    b = nt.build_num_basis(64, 77)
    assert abs(b.is_vec @ b.num) < 1e-12


def test_full_rank_positional_encoding_is_an_error():
    with pytest.raises(ValueError):
        nt.build_num_basis(2, 4, reserved=0)


def test_basis_is_deterministic():
    a, b = nt.build_num_basis(64, 77, seed=3), nt.build_num_basis(64, 77, seed=3)
    assert a.num.tobytes() == b.num.tobytes() and a.is_vec.tobytes() == b.is_vec.tobytes()


# ---------------------------------------------------------------- tokenisation

def test_fragment_structure(vocab):
    seq = nt.tokenize("Walking speed is 0.84 leg/sec", vocab, add_eos=False)
    assert seq.kinds.tolist() == [nt.WORD, nt.WORD, nt.IS, nt.NUM, nt.WORD]
    assert [vocab.token_of(int(i)) for i in seq.word_ids[seq.kinds == nt.WORD]] == ["walking", "speed", "leg/sec"]
    assert seq.values[3] == 0.84


def test_sentence_without_numbers(vocab):
    seq = nt.tokenize("walking speed and the step", vocab)
    assert not np.any(seq.kinds == nt.NUM)
    assert seq.word_ids[-1] == nt.EOS_ID


def test_out_of_vocabulary_word_named(vocab):
    with pytest.raises(KeyError, match="zebra"):
        nt.tokenize("Walking zebra is 0.1", vocab)


def test_raw_value_without_stats_rejected(vocab):
    with pytest.raises(ValueError):
        nt.tokenize("Walking speed is 92.9 leg/sec.", vocab)


def test_tokenize_normalises_with_stats(vocab):
    stats = gp.NormalizationStats({1: 1.0, 2: 100.0, 6: 0.6, 27: 0.4}, {1: 0.2, 2: 10.0, 6: 0.1, 27: 0.1})
    text = gp.render_sentence((1, 2, 6, 27), {1: 1.2, 2: 92.9, 6: 0.655, 27: 0.444})
    seq = nt.tokenize(text, vocab, stats)
    expected = [gp.normalize_value(v, stats, k) for k, v in [(1, 1.2), (2, 92.9), (6, 0.655), (27, 0.444)]]
    assert np.allclose(seq.values[seq.kinds == nt.NUM], expected, atol=1e-15, rtol=0)
    assert seq.param_ids == [1, 2, 6, 27]


def test_detokenize_round_trip(vocab):
    text = "Walking speed is 0.84 leg/sec, number of steps per minute is 1.5."
    seq = nt.tokenize(text, vocab)
    words = [w for w in nt.split_words(text) if not nt._is_number(w)]
    assert nt.detokenize_words(seq, vocab) == words


# ---------------------------------------------------------------- embeddings

def test_numeric_item_is_value_times_num_plus_pe(vocab, encoder):
    seq = nt.tokenize(TEMPLATE.replace("{value}", "0"), vocab)
    seq.values[seq.kinds == nt.NUM] = 1.37
    x = nt.item_embeddings(seq, encoder.token_table, vocab, encoder.basis)
    t = int(np.flatnonzero(seq.kinds == nt.NUM)[0])
    assert np.array_equal(x[t], encoder.basis.pe[t] + 1.37 * encoder.basis.num)
    s = int(np.flatnonzero(seq.kinds == nt.IS)[0])
    assert np.array_equal(x[s], encoder.basis.pe[s] + encoder.basis.is_vec)


def test_zero_value_contributes_only_position(vocab, encoder):
    seq = nt.tokenize(TEMPLATE.replace("{value}", "0"), vocab)
    x = nt.item_embeddings(seq, encoder.token_table, vocab, encoder.basis)
    t = int(np.flatnonzero(seq.kinds == nt.NUM)[0])
    assert np.array_equal(x[t], encoder.basis.pe[t])


def test_plain_token_ablation_uses_bucket_rows(vocab, encoder):
    seq = nt.tokenize(TEMPLATE.replace("{value}", "0"), vocab)
    x = nt.item_embeddings(seq, encoder.token_table, vocab, encoder.basis, numeric=False)
    t = int(np.flatnonzero(seq.kinds == nt.NUM)[0])
    assert np.array_equal(x[t], encoder.basis.pe[t] + encoder.token_rows(49508))


def test_sequence_too_long(vocab, encoder):
    seq = nt.tokenize(" ".join(["walking"] * 100), vocab)
    with pytest.raises(ValueError):
        nt.embed_sequence(seq, encoder)


def test_identical_values_bitwise_identical(vocab, encoder):
    a = nt.embed_sequence(nt.tokenize(TEMPLATE.replace("{value}", "0.5"), vocab), encoder)
    b = nt.embed_sequence(nt.tokenize(TEMPLATE.replace("{value}", "0.5"), vocab), encoder)
    assert a.tobytes() == b.tobytes()


def test_batched_embedding_matches_single(vocab, encoder):
    texts = ["Walking speed is 0.5 leg/sec.", "Walking speed is -1 leg/sec, number of steps per minute is 2."]
    seqs = [nt.tokenize(t, vocab) for t in texts]
    both = nt.embed_sequences(seqs, encoder)
    for s, row in zip(seqs, both):
        assert np.allclose(nt.embed_sequence(s, encoder), row, atol=1e-12, rtol=0)


def test_small_value_step_is_nearly_invisible(vocab, encoder):
    grid = np.arange(-2.5, 2.5 + 1e-9, 0.01)
    m = nt.similarity_map(TEMPLATE, grid, encoder)
    assert np.max(1 - np.diag(m, 1)) < 1e-3


def test_similarity_map_shape_and_symmetry(vocab, encoder):
    grid = np.linspace(-2.5, 2.5, 21)
    m = nt.similarity_map(TEMPLATE, grid, encoder)
    assert m.shape == (21, 21)
    assert np.max(np.abs(m - m.T)) < 1e-12
    assert np.max(np.abs(np.diag(m) - 1)) < 1e-12


def test_similarity_map_requires_sorted_grid(encoder):
    with pytest.raises(ValueError):
        nt.similarity_map(TEMPLATE, [0.5, 0.1], encoder)
