import numpy as np
import pytest

from dualid.autodiff import Tensor, no_grad
from dualid.data.synth import all_compositions, caption_text
from dualid.text.encoder import (MeanNameEmbedding, MissingSlotsError, TextEncoder, TokenEmbeddingSequence, encode,
                                 encode_prompt, mean_name_embedding, name_embeddings, splice_name_embeddings,
                                 splice_tensor)
from dualid.text.vocab import (N_NAMES, NAME_TOKENS, SEQ_LEN, VOCAB, UnknownWordError, Vocabulary, detokenize,
                               tokenize)


@pytest.fixture(scope="module")
def encoder():
    return TextEncoder(len(VOCAB), np.random.default_rng(0))


def test_vocabulary_layout():
    assert len(set(VOCAB.tokens)) == len(VOCAB)
    assert len(VOCAB.name_range) == N_NAMES == 128
    assert [VOCAB.tokens[i] for i in VOCAB.name_range] == list(NAME_TOKENS)
    assert Vocabulary.from_text(VOCAB.to_text()).tokens == VOCAB.tokens


def test_vocabulary_rejects_duplicates():
    with pytest.raises(ValueError):
        Vocabulary(["a", "a", "name000"])


def test_tokenize_placeholder():
    tok = tokenize("a photo of <id>")
    v = VOCAB
    expected = [v.start_id, v.id("a"), v.id("photo"), v.id("of"), *v.slot_ids]
    assert tok.ids[:7].tolist() == expected
    assert (tok.ids[7:] == v.pad_id).all()
    assert tok.slot_positions == (4, 5, 6)
    assert tok.length == 7


def test_tokenize_empty():
    tok = tokenize("")
    assert tok.ids[0] == VOCAB.start_id and (tok.ids[1:] == VOCAB.pad_id).all()
    assert tok.length == 1 and tok.slot_positions is None


def test_unknown_word_is_named():
    with pytest.raises(UnknownWordError, match="banana"):
        tokenize("a photo of banana")


def test_truncation():
    tok = tokenize(" ".join(["a"] * 40))
    assert tok.length == SEQ_LEN and len(tok.ids) == SEQ_LEN


def _grammar_sentences():
    for comp in all_compositions():
        for subject in ("a person", "<id>", "name042"):
            yield caption_text(comp, subject=subject)


def test_round_trip_every_grammar_sentence():
    for s in _grammar_sentences():
        assert detokenize(tokenize(s)) == s


def test_encode_is_deterministic(encoder):
    tok = tokenize("a photo of <id> on a red background")
    assert np.array_equal(encode(encoder, tok).embeddings, encode(encoder, tok).embeddings)
    assert encode(encoder, tok).name_slot_positions == (4, 5, 6)


def test_word_order_matters(encoder):
    a = encode_prompt(encoder, "a photo of a person").embeddings
    b = encode_prompt(encoder, "a of photo a person").embeddings
    assert not np.allclose(a, b)


def test_output_finite_for_every_token(encoder):
    rng = np.random.default_rng(0)
    ids = rng.integers(0, len(VOCAB), size=(256, SEQ_LEN))
    ids[: len(VOCAB), 1] = np.arange(len(VOCAB))
    with no_grad():
        out = encoder(ids).data
    assert np.isfinite(out).all()


def test_encoder_rejects_wrong_length(encoder):
    with pytest.raises(ValueError):
        encoder(np.zeros((1, SEQ_LEN + 1), dtype=np.int64))


def test_mean_name_embedding_properties(encoder):
    ebar = mean_name_embedding(encoder)
    names = name_embeddings(encoder)
    assert names.shape == (128, encoder.dim)
    assert ebar.norm > 0
    assert abs(ebar.norm - np.linalg.norm(ebar.vector)) < 1e-6
    assert ebar.norm <= np.linalg.norm(names, axis=1).mean() + 1e-6
    again = mean_name_embedding(encoder)
    assert np.array_equal(again.vector, ebar.vector) and again.norm == ebar.norm


def test_mean_name_embedding_degenerate_shared_row():
    enc = TextEncoder(len(VOCAB), np.random.default_rng(1))
    rows = enc.tok.weight.data
    rows[VOCAB.name_ids] = rows[VOCAB.name_ids[0]]
    ebar = mean_name_embedding(enc)
    single = encode_prompt(enc, "a photo of name000").embeddings[4]
    np.testing.assert_allclose(ebar.vector, single, rtol=1e-5, atol=1e-6)


def test_mean_name_embedding_zero_norm_rejected():
    with pytest.raises(ValueError):
        MeanNameEmbedding.from_vector(np.zeros(4))


def test_token_sequence_validates_slots():
    with pytest.raises(ValueError):
        TokenEmbeddingSequence(np.zeros((16, 4)), (4, 6, 7))
    with pytest.raises(ValueError):
        TokenEmbeddingSequence(np.zeros((16, 4)), (14, 15, 16))


def test_splice_read_back_and_identity(encoder):
    seq = encode_prompt(encoder, "a photo of <id>")
    rows = np.arange(3 * encoder.dim, dtype=np.float32).reshape(3, -1)
    out = splice_name_embeddings(seq, rows)
    assert np.array_equal(out.embeddings[4:7], rows)
    same = splice_name_embeddings(seq, seq.embeddings[4:7])
    assert np.array_equal(same.embeddings, seq.embeddings)


def test_splice_requires_slots(encoder):
    with pytest.raises(MissingSlotsError):
        splice_name_embeddings(encode_prompt(encoder, "a photo of a person"), np.zeros((3, encoder.dim)))


def test_splice_locality_randomized():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        start = int(rng.integers(1, SEQ_LEN - 2))
        seq = TokenEmbeddingSequence(rng.standard_normal((SEQ_LEN, 8)), (start, start + 1, start + 2))
        rows = rng.standard_normal((3, 8))
        out = splice_name_embeddings(seq, rows).embeddings
        changed = np.flatnonzero((out != seq.embeddings).any(axis=1))
        assert set(changed) <= {start, start + 1, start + 2}
        keep = np.ones(SEQ_LEN, bool)
        keep[start:start + 3] = False
        assert np.array_equal(out[keep], seq.embeddings[keep])
        assert np.array_equal(out[start:start + 3], rows)


def test_splice_tensor_matches_numpy_splice():
    rng = np.random.default_rng(3)
    ctx = rng.standard_normal((2, SEQ_LEN, 4))
    rows = rng.standard_normal((2, 3, 4))
    out = splice_tensor(Tensor(ctx), Tensor(rows), 4).data
    for i in range(2):
        ref = splice_name_embeddings(TokenEmbeddingSequence(ctx[i], (4, 5, 6)), rows[i]).embeddings
        assert np.array_equal(out[i], ref)
