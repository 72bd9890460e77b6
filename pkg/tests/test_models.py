import math

import numpy as np
import pytest

from lyrichan import autodiff as ad
from lyrichan.corpus import Song, Vocabulary
from lyrichan.models import (EmptySongError, HierBatch, ModelCheckpoint, ModelConfig,
                             build_model, han_forward, predict, song_units)
from lyrichan.training import evaluate

import oracles
from helpers import TINY, tiny_model, tiny_songs
from oracles import relative_error

ONE_WORD = Song(segments=[[[5]]], genre_id=0)


def params64(model):
    return {k: v.data.astype(np.float64) for k, v in model.parameters().items()}


# -- configuration --------------------------------------------------------------------

def test_granularity_defaults():
    line = ModelConfig("han-l", n_classes=2, vocab_size=5)
    seg = ModelConfig("han-s", n_classes=2, vocab_size=5)
    assert (line.granularity, line.max_units, line.max_words) == ("line", 60, 10)
    assert (seg.granularity, seg.max_units, seg.max_words) == ("segment", 10, 60)
    default_sizes = ModelConfig("han-l", n_classes=2, vocab_size=5)
    assert (default_sizes.embed_dim, default_sizes.hidden_size, default_sizes.attention_size) == \
        (100, 50, 100)


def test_unknown_architecture():
    with pytest.raises(ValueError, match="unknown model type"):
        ModelConfig("cnn", n_classes=2, vocab_size=5)


def test_song_units_line_and_segment():
    song = Song(segments=[[[2, 3], [4]], [[5]]])
    assert song_units(song, "line") == [[2, 3], [4], [], [5]]
    assert song_units(song, "line", segment_breaks=False) == [[2, 3], [4], [5]]
    assert song_units(song, "segment") == [[2, 3, 4], [5]]


def test_truncation_keeps_the_head():
    model = tiny_model("han-l", max_units=2, max_words=2)
    song = Song(segments=[[[2, 3, 4], [5, 6], [7]]], genre_id=0)
    ids = model.batch([song]).ids[0]
    np.testing.assert_array_equal(ids, [[2, 3], [5, 6]])
    lstm = tiny_model("lstm", max_seq_len=4)
    np.testing.assert_array_equal(lstm.batch([song]).ids[0], [2, 3, 4, 5])


@pytest.mark.parametrize("arch", ["lr", "lstm", "hn-l", "han-l", "han-s"])
def test_empty_song_rejected(arch):
    with pytest.raises(EmptySongError):
        tiny_model(arch).batch([Song(segments=[], genre_id=0)])


# -- han_forward ----------------------------------------------------------------------

def test_zero_output_layer_gives_uniform():
    model = tiny_model("han-l", n_classes=2)
    model.parameters()["out.W"].data[:] = 0
    model.parameters()["out.b"].data[:] = 0
    for song in tiny_songs():
        p, _, _ = han_forward(model, song)
        np.testing.assert_array_equal(p, [0.5, 0.5])


@pytest.mark.parametrize("arch", ["han-l", "han-s"])
def test_one_word_song_has_unit_weights(arch):
    p, ww, uw = han_forward(tiny_model(arch), ONE_WORD)
    assert uw[0] == 1.0 and ww[0, 0] == 1.0
    np.testing.assert_array_equal(uw[1:], 0.0)
    np.testing.assert_array_equal(ww[0, 1:], 0.0)
    assert abs(p.sum() - 1) < 1e-6


@pytest.mark.parametrize("arch, song", [
    ("han-l", Song(segments=[[[2, 3, 4], [5, 6]]], genre_id=0)),
    ("han-l", tiny_songs()[0]),  # with a segment-break unit
    ("han-l", tiny_songs()[1]),  # truncated to four units
    ("han-s", tiny_songs()[1]),
    ("hn-l", tiny_songs()[0]),
])
def test_straight_line_oracle(arch, song):
    with ad.precision("float64"):
        model = tiny_model(arch, seed=5)
        p, _, _ = han_forward(model, song)
    batch = model.batch([song])
    want = oracles.han_probabilities(params64(model), batch.ids[0], batch.unit_mask[0],
                                     attend=arch != "hn-l")
    assert relative_error(p, want, floor=1e-300).max() < 1e-10


def test_han_probabilities_valid():
    model = tiny_model("han-l")
    for song in tiny_songs():
        p, _, _ = han_forward(model, song)
        assert abs(p.sum() - 1.0) < 1e-6
        assert np.all((p > 0) & (p < 1))


def test_swapping_trailing_pad_units_leaves_p_unchanged():
    with ad.precision("float64"):
        model = tiny_model("han-l", max_units=6)
        song = Song(segments=[[[2, 3], [4]]], genre_id=1)
        batch = model.batch([song])
        assert not batch.unit_mask[0, 3:].any()
        order = [0, 1, 2, 4, 3, 5]
        swapped = HierBatch(batch.ids[:, order], batch.word_mask[:, order],
                            batch.unit_mask[:, order], batch.labels)
        a = ad.softmax(model.logits(batch)).data
        b = ad.softmax(model.logits(swapped)).data
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-9)


def test_blank_segment_break_can_carry_weight():
    # Word-level pooling over a break is empty, but the unit is still attended.
    model = tiny_model("han-l")
    _, ww, uw = han_forward(model, tiny_songs()[0])
    assert uw[2] > 0
    np.testing.assert_array_equal(ww[2], 0.0)


# -- predict --------------------------------------------------------------------------

def test_predict_examples():
    assert predict([0.1, 0.7, 0.2]) == 1
    assert predict([0.5, 0.5]) == 0


def test_predict_matches_linear_scan():
    rng = np.random.default_rng(0)
    for _ in range(50):
        p = rng.dirichlet(np.ones(117))
        best = 0
        for k in range(1, len(p)):
            if p[k] > p[best]:
                best = k
        assert predict(p) == best


# -- majority class -------------------------------------------------------------------

def test_majority_classifier():
    cfg = ModelConfig("mc", n_classes=3, vocab_size=20)
    model = build_model(cfg)
    train = [Song([[[2]]], g) for g in [1, 1, 0, 2, 1]]
    model.fit(train)
    assert model.forward() == 1
    test = [Song([[[3]]], g) for g in [0, 1, 1, 2, 2, 2, 1, 0]]
    acc, cm, preds = evaluate(model, test)
    assert list(preds) == [1] * 8
    assert acc == sum(s.genre_id == 1 for s in test) / len(test)
    with pytest.raises(TypeError):
        model.logits(model.batch(test))


def test_majority_tie_goes_to_lowest_id():
    model = build_model(ModelConfig("mc", n_classes=3, vocab_size=20))
    model.fit([Song([[[2]]], g) for g in [2, 1, 2, 1]])
    assert model.forward() == 1


# -- logistic regression ------------------------------------------------------------

def test_lr_zero_weights_uniform():
    model = tiny_model("lr", n_classes=4)
    model.parameters()["out.W"].data[:] = 0
    p = model.predict_proba(model.batch(tiny_songs()))
    np.testing.assert_array_equal(p, np.full((2, 4), 0.25))


def test_lr_repeated_token_vector():
    with ad.precision("float64"):
        model = tiny_model("lr")
        v = model.song_vector(model.batch([Song([[[7, 7], [7]]], 0)])).data[0]
    np.testing.assert_allclose(v, model.embedding.matrix.data[7], rtol=1e-15)


def test_lr_mean_oracle_ignores_padding():
    with ad.precision("float64"):
        model = tiny_model("lr", embed_dim=3)
        short = Song([[[3, 5], [1, 5, 9]]], 0)  # 5 tokens including an UNK
        long = Song([[[2] * 8]], 1)
        v = model.song_vector(model.batch([short, long])).data[0]
    E = model.embedding.matrix.data
    want = [math.fsum(E[t][k] for t in [3, 5, 1, 5, 9]) / 5 for k in range(3)]
    assert relative_error(v, want, floor=1e-300).max() < 1e-12


# -- LSTM -----------------------------------------------------------------------------

def lstm_arrays(model):
    return {k.split(".", 1)[1]: v.data.astype(np.float64)
            for k, v in model.parameters().items() if k.startswith("lstm.")}


def test_lstm_forget_bias_init():
    model = tiny_model("lstm")
    np.testing.assert_array_equal(model.parameters()["lstm.b_f"].data, 1.0)
    np.testing.assert_array_equal(model.parameters()["lstm.b_i"].data, 0.0)


def test_lstm_length_one_pools_first_state():
    with ad.precision("float64"):
        model = tiny_model("lstm")
        v = model.song_vector(model.batch([ONE_WORD])).data[0]
    x = model.embedding.matrix.data[5].tolist()
    h, _ = oracles.lstm_step(lstm_arrays(model), x, [0.0] * 3, [0.0] * 3)
    assert relative_error(v, h, floor=1e-300).max() < 1e-12


def test_lstm_zero_params_uniform():
    model = tiny_model("lstm")
    for t in model.parameters().values():
        t.data[:] = 0
    batch = model.batch(tiny_songs())
    np.testing.assert_array_equal(model.song_vector(batch).data, 0.0)
    np.testing.assert_allclose(model.predict_proba(batch), 1 / 3, rtol=1e-6)


def test_lstm_scalar_recursion_oracle():
    with ad.precision("float64"):
        model = tiny_model("lstm", embed_dim=1, hidden_size=1)
        rng = np.random.default_rng(3)
        for t in model.parameters().values():
            t.data[:] = rng.uniform(-2, 2, t.shape)
        model.after_step()
        song = Song([[[4, 9, 4]]], 0)
        other = Song([[[2, 3, 4, 5, 6]]], 1)  # longer: forces trailing PAD in the first row
        v = model.song_vector(model.batch([song, other])).data[0]
    P = lstm_arrays(model)
    E = model.embedding.matrix.data
    h, c, states = [0.0], [0.0], []
    for tok in [4, 9, 4]:
        h, c = oracles.lstm_step(P, [E[tok][0]], h, c)
        states.append(h[0])
    assert relative_error(v, [max(states)], floor=1e-300).max() < 1e-12


# -- HN-L -----------------------------------------------------------------------------

def copy_shared(dst, src):
    for name, t in src.parameters().items():
        dst.parameters()[name].data[...] = t.data


def test_hnl_equals_han_with_uniform_attention():
    with ad.precision("float64"):
        han, hnl = tiny_model("han-l", seed=1), tiny_model("hn-l", seed=2)
        copy_shared(han, hnl)
        for level in ("word_att", "unit_att"):
            han.parameters()[f"{level}.W_a"].data[:] = 0
            han.parameters()[f"{level}.b_a"].data[:] = 0
        for song in tiny_songs():
            a = ad.softmax(han.logits(han.batch([song]))).data
            b = ad.softmax(hnl.logits(hnl.batch([song]))).data
            np.testing.assert_allclose(a, b, rtol=1e-13)


def test_hnl_one_word_song_matches_han():
    with ad.precision("float64"):
        han, hnl = tiny_model("han-l", seed=1), tiny_model("hn-l", seed=2)
        copy_shared(han, hnl)
        a = ad.softmax(han.logits(han.batch([ONE_WORD]))).data
        b = ad.softmax(hnl.logits(hnl.batch([ONE_WORD]))).data
    np.testing.assert_array_equal(a, b)


def test_parameter_count_difference_is_two_attention_sets():
    han, hnl = tiny_model("han-l"), tiny_model("hn-l")
    A, M = TINY["attention_size"], 2 * TINY["hidden_size"]
    assert han.n_parameters() - hnl.n_parameters() == 2 * (A * M + A + A)
    assert tiny_model("han-s").n_parameters() == han.n_parameters()


def test_parameter_count_difference_from_checkpoint(tmp_path):
    counts = {}
    for arch in ("han-l", "hn-l"):
        ModelCheckpoint.from_model(tiny_model(arch), [f"t{i}" for i in range(20)], ["a", "b", "c"]
                                   ).save(tmp_path / arch)
        params = ModelCheckpoint.load(tmp_path / arch).params
        counts[arch] = sum(v.size for v in params.values())
    assert counts["han-l"] - counts["hn-l"] == 2 * (5 * 6 + 5 + 5)


# -- checkpoints ----------------------------------------------------------------------

VOCAB = Vocabulary([f"tok{i}" for i in range(18)])
GENRES = ["rock", "pop", "jazz"]


@pytest.mark.parametrize("arch", ["lr", "lstm", "hn-l", "han-l", "han-s"])
@pytest.mark.parametrize("dtype", ["float32", "float64"])
def test_checkpoint_roundtrip_bitwise(tmp_path, arch, dtype):
    with ad.precision(dtype):
        model = tiny_model(arch, seed=4)
        before = model.logits(model.batch(tiny_songs())).data
        ckpt = ModelCheckpoint.from_model(model, VOCAB, GENRES, {"seed": 4},
                                          [{"epoch": 1, "val_loss": 0.5}])
        ckpt.save(tmp_path / "m.ckpt")
    loaded = ModelCheckpoint.load(tmp_path / "m.ckpt")
    rebuilt = loaded.build()
    after = rebuilt.logits(rebuilt.batch(tiny_songs())).data
    assert after.dtype == before.dtype
    assert after.tobytes() == before.tobytes()
    for name, value in model.state_dict().items():
        assert loaded.params[name].tobytes() == value.tobytes()
    assert loaded.vocabulary() == VOCAB
    assert loaded.genres == GENRES
    assert loaded.history == [{"epoch": 1, "val_loss": 0.5}]
    assert loaded.config == model.config


def test_checkpoint_mc_keeps_majority(tmp_path):
    model = build_model(ModelConfig("mc", n_classes=3, vocab_size=20))
    model.fit([Song([[[2]]], 2)])
    ModelCheckpoint.from_model(model, VOCAB, GENRES).save(tmp_path / "mc.ckpt")
    assert ModelCheckpoint.load(tmp_path / "mc.ckpt").build().forward() == 2


def test_checkpoint_rejects_foreign_file(tmp_path):
    (tmp_path / "x").write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError, match="not a model checkpoint"):
        ModelCheckpoint.load(tmp_path / "x")


def test_interrupted_save_leaves_previous_file(tmp_path, monkeypatch):
    path = tmp_path / "m.ckpt"
    ckpt = ModelCheckpoint.from_model(tiny_model("lr"), VOCAB, GENRES)
    ckpt.save(path)
    good = path.read_bytes()

    def boom(fd):
        raise KeyboardInterrupt

    monkeypatch.setattr("os.fsync", boom)
    with pytest.raises(KeyboardInterrupt):
        ModelCheckpoint.from_model(tiny_model("lr", seed=9), VOCAB, GENRES).save(path)
    assert path.read_bytes() == good
    assert sorted(p.name for p in tmp_path.iterdir()) == ["m.ckpt"]
