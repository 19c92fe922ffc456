import numpy as np
import pytest

from conftest import tiny_config
from mnat import tensor as T
from mnat.data import MASK, PAD
from mnat.decoding import mask_predict, masking_schedule, refine, select_lowest_confidence, translate_batch
from mnat.model import NATModel, length_candidates


def test_masking_schedule_examples():
    assert masking_schedule(10, 1, 10) == 9
    assert masking_schedule(10, 9, 10) == 1
    assert masking_schedule(7, 2, 4) == 3


def test_masking_schedule_exhaustive_grid():
    for n in range(1, 33):
        for T_total in range(1, 11):
            counts = []
            for t in range(1, T_total):
                got = masking_schedule(n, t, T_total)
                assert got == int(np.floor(n * (T_total - t) / T_total))
                counts.append(got)
            assert all(a >= b for a, b in zip(counts, counts[1:]))
            assert sum(counts) <= n * (T_total - 1)
            for t in range(T_total, T_total + 2):
                with pytest.raises(ValueError):
                    masking_schedule(n, t, T_total)


def test_masking_schedule_errors():
    with pytest.raises(ValueError):
        masking_schedule(0, 1, 4)
    with pytest.raises(ValueError):
        masking_schedule(5, 0, 4)


def test_select_lowest_confidence():
    assert select_lowest_confidence([0.9, 0.1, 0.5], 1) == [1]
    assert select_lowest_confidence([0.5, 0.5, 0.9], 1) == [0]
    assert select_lowest_confidence([0.3, 0.2, 0.1], 3) == [0, 1, 2]
    with pytest.raises(ValueError):
        select_lowest_confidence([0.3], 2)


def test_single_pass_is_argmax(tiny_model):
    enc = tiny_model.encode([[5, 6, 7]])
    res = refine(tiny_model, enc, [4], 1)
    logits = tiny_model.decode([[MASK] * 4], enc).values[0]
    logits[:, :3] = -np.inf  # PAD, MASK, LENGTH are never emitted
    assert res.tokens[0].tolist() == logits.argmax(-1).tolist()
    assert res.iterations.tolist() == [1]


def test_confidences_in_unit_interval(tiny_model):
    enc = tiny_model.encode([[5, 6, 7], [8, 9, PAD]])
    res = refine(tiny_model, enc, [5, 3], 6)
    valid = np.arange(5)[None, :] < np.array([[5], [3]])
    assert np.all(res.confidences[valid] > 0) and np.all(res.confidences[valid] <= 1)
    assert np.all(res.tokens[~valid] == PAD)
    assert np.all(res.tokens[valid] > 2)


def test_unmasked_positions_stable_on_random_decodes():
    checked = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        model = NATModel(tiny_config(seed=seed % 7, vocab_size=12))
        n_src = int(rng.integers(1, 8))
        enc = model.encode(rng.integers(4, 12, size=(2, n_src)))
        lengths = rng.integers(1, 11, size=2)
        res = refine(model, enc, lengths, int(rng.integers(2, 8)), early_stop=False, keep_steps=True)
        for step in res.steps:
            assert np.array_equal(step.before[~step.masked], step.after[~step.masked])
            expected = (lengths[step.rows] * (len(res.steps) + 1 - (step.iteration - 1))) // (len(res.steps) + 1)
            assert step.masked.sum(1).tolist() == expected.tolist()
            checked += 1
        assert np.array_equal((res.tokens != PAD).sum(1), lengths)
    assert checked >= 100


class _FixedModel:
    """Decoder whose logits ignore its input, so refinement converges at once."""

    def __init__(self, model):
        self.config = model.config
        self.inner = model
        self.calls = 0

    def decode(self, tokens, enc, mode="eval", rng=None):
        self.calls += 1
        tokens = np.asarray(tokens)
        logits = np.tile(np.arange(self.config.vocab_size, dtype=np.float32), tokens.shape + (1,))
        return T.Tensor(logits)


def test_early_stop_when_iterations_match(tiny_model):
    fixed = _FixedModel(tiny_model)
    enc = tiny_model.encode([[5, 6]])
    res = refine(fixed, enc, [6], 10, keep_steps=True)
    # iteration 2 reproduces iteration 1, so iterations 3..10 are skipped
    assert res.iterations.tolist() == [2]
    assert fixed.calls == 2
    assert np.array_equal(res.steps[0].before, res.steps[0].after)


def test_early_stop_rows_leave_the_batch(tiny_model):
    enc = tiny_model.encode([[5, 6, 7]] * 3)
    res = refine(tiny_model, enc, [3, 6, 9], 10, keep_steps=True)
    stopped = set()
    for step in res.steps:
        assert not stopped & set(step.rows.tolist())
        for r, b, a in zip(step.rows, step.before, step.after):
            if np.array_equal(a, b):
                stopped.add(int(r))


def test_early_stop_only_saves_passes(tiny_model):
    enc = tiny_model.encode([[5, 6, 7], [9, 4, PAD]])
    a = refine(tiny_model, enc, [5, 4], 10, early_stop=True)
    b = refine(tiny_model, enc, [5, 4], 10, early_stop=False)
    assert b.iterations.tolist() == [10, 10]
    assert np.all(a.iterations <= 10)


def test_translate_single_candidate_is_identity(tiny_model):
    src = [5, 6, 7, 8]
    tr = translate_batch(tiny_model, [src], T_total=4, B=1)[0]
    enc = tiny_model.encode([src])
    n = length_candidates(enc.length_logits.values[0], 1)[0]
    res = refine(tiny_model, enc, [n], 4)
    assert tr.tokens == res.tokens[0, :n].tolist()
    assert abs(tr.score - res.scores()[0]) < 1e-5


def test_npd_picks_best_scoring_candidate(tiny_model):
    src = [5, 9, 7]
    tr = translate_batch(tiny_model, [src], T_total=3, B=5)[0]
    enc = tiny_model.encode([src])
    cands = length_candidates(enc.length_logits.values[0], 5)
    scores = [refine(tiny_model, enc, [n], 3).scores()[0] for n in cands]
    assert tr.length == cands[int(np.argmax(scores))]
    assert abs(tr.score - max(scores)) < 1e-5  # batched float32 rounding


def test_decoding_deterministic_and_batch_invariant(tiny_model):
    sources = [[5, 6, 7], [8], [9, 10, 11, 12, 13]]
    batched = [t.tokens for t in translate_batch(tiny_model, sources, 5, 3)]
    single = [mask_predict(tiny_model, s, 5, 3)[0] for s in sources]
    assert batched == single
    assert batched == [t.tokens for t in translate_batch(tiny_model, sources, 5, 3)]


def test_candidate_length_beyond_positions():
    model = NATModel(tiny_config(max_positions=6, max_length_bins=12))
    model.params["length.b"].values[:] = 0.0
    model.params["length.b"].values[10] = 100.0
    with pytest.raises(ValueError):
        translate_batch(model, [[5, 6]], 2, 1)


def test_refine_argument_errors(tiny_model):
    enc = tiny_model.encode([[5]])
    with pytest.raises(ValueError):
        refine(tiny_model, enc, [3], 0)
    with pytest.raises(ValueError):
        refine(tiny_model, enc, [0], 2)
