import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import tiny_config
from mnat import tensor as T
from mnat.data import MASK, PAD, batch_by_tokens, generate_synthetic_task, make_batch
from mnat.eecr import (
    LossBreakdown, MaskedTarget, TrainConfig, UpdateInputs, average_checkpoints, compute_loss,
    consistency_losses, format_log_line, length_loss, nll_masked, parameter_grads, parse_log_line,
    prepare_inputs, refine_predict, sample_mask, substitute, symmetric_kl, total_loss, train,
)
from mnat.model import NATModel
from mnat.tensor import Tensor


def kl_oracle(p, q):
    """Direct float64 summation of 0.5 * [KL(p||q) + KL(q||p)] with the 1e-9 floor."""
    p = np.maximum(np.asarray(p, dtype=np.float64), 1e-9)
    q = np.maximum(np.asarray(q, dtype=np.float64), 1e-9)
    return 0.5 * (sum(a * math.log(a / b) for a, b in zip(p, q)) + sum(b * math.log(b / a) for a, b in zip(p, q)))


# ---------------------------------------------------------------- mask sampling


def test_sample_mask_single_position(rng):
    mt = sample_mask([9], rng)
    assert mt.mask.tolist() == [True] and mt.tokens.tolist() == [MASK]


def test_sample_mask_partition(rng):
    mt = sample_mask([4, 5, 6, 7, 8], rng)
    assert set(mt.masked_positions) | set(mt.observed_positions) == set(range(5))
    assert not set(mt.masked_positions) & set(mt.observed_positions)
    assert len(mt.masked_positions) >= 1
    assert all(mt.tokens[i] == mt.truth[i] for i in mt.observed_positions)


def test_sample_mask_frequencies():
    rng = np.random.default_rng(42)
    counts = np.zeros(5)
    position = np.zeros(4)
    draws = 10000
    for _ in range(draws):
        mt = sample_mask([4, 5, 6, 7], rng)
        counts[mt.mask.sum()] += 1
        position += mt.mask
    assert np.all(np.abs(counts[1:] / draws - 0.25) <= 0.02)
    # E[m]/n = 2.5/4
    assert np.all(np.abs(position / draws - 0.625) <= 0.02)


def test_sample_mask_empty(rng):
    with pytest.raises(ValueError):
        sample_mask([], rng)


# ---------------------------------------------------------------- substitution


def _masked(truth, mask):
    truth = np.array(truth)
    mask = np.array(mask, dtype=bool)
    return MaskedTarget(np.where(mask, MASK, truth), mask, truth)


def test_substitute_beta_zero_and_one(rng):
    mt = _masked([4, 5, 6, 7, 8], [True, False, False, True, False])
    y_hat = np.array([10, 11, 12, 13, 14])
    assert substitute(mt, y_hat, 0.0, rng).tokens.tolist() == mt.tokens.tolist()
    full = substitute(mt, y_hat, 1.0, rng)
    assert full.tokens.tolist() == [MASK, 11, 12, MASK, 14]
    assert full.provenance == ["masked", "predicted", "predicted", "masked", "predicted"]


def test_substitute_frequency():
    rng = np.random.default_rng(3)
    mt = _masked(np.arange(4, 104), np.zeros(100, dtype=bool))
    y_hat = np.full(100, 200)
    predicted = sum(substitute(mt, y_hat, 0.3, rng).predicted.sum() for _ in range(100))
    assert abs(predicted / 10000 - 0.3) <= 0.015


def test_substitute_two_draws_differ_and_keep_masks(rng):
    mt = _masked(np.arange(4, 24), [i % 3 == 0 for i in range(20)])
    y_hat = np.full(20, 99)
    a, b = substitute(mt, y_hat, 0.5, rng), substitute(mt, y_hat, 0.5, rng)
    assert a.tokens.tolist() != b.tokens.tolist()
    for mixed in (a, b):
        assert np.array_equal(mixed.mask, mt.mask)
        assert np.all(mixed.tokens[mt.mask] == MASK)
        assert np.all(mixed.tokens[mixed.predicted] == 99)


def test_substitute_length_mismatch(rng):
    with pytest.raises(ValueError):
        substitute(_masked([4, 5], [True, False]), [4, 5, 6], 0.3, rng)


# ---------------------------------------------------------------- NLL


def test_nll_perfect_model_zero():
    lp = np.full((3, 4), -1e9, dtype=np.float32)
    lp[np.arange(3), [1, 2, 3]] = 0.0
    loss = nll_masked(Tensor(lp), [1, 2, 3], [True, True, False], 0.0)
    assert loss.item() == 0.0


def test_nll_uniform_model():
    v = 7
    lp = np.full((2, 5, v), -math.log(v), dtype=np.float32)
    mask = np.array([[1, 0, 1, 0, 0], [1, 1, 1, 1, 1]], dtype=bool)
    loss = nll_masked(Tensor(lp), np.full((2, 5), 4), mask, 0.0)
    assert abs(loss.item() - math.log(v)) < 1e-5


def test_nll_two_token_example():
    lp = np.log(np.array([[0.8, 0.2]], dtype=np.float32))
    assert abs(nll_masked(Tensor(lp), [0], [True], 0.0).item() - 0.22314) < 1e-4


def test_nll_label_smoothing_formula():
    lp = np.log(np.array([[0.7, 0.2, 0.1]], dtype=np.float64))
    eps = 0.1
    expected = (1 - eps) * -lp[0, 0] + eps * -lp[0].mean()
    assert abs(nll_masked(Tensor(lp.astype(np.float32)), [0], [True], eps).item() - expected) < 1e-5


def test_nll_ignores_observed_positions():
    lp = np.log(np.full((1, 3, 2), 0.5, dtype=np.float32))
    lp[0, 1] = np.log([0.999, 0.001])
    a = nll_masked(Tensor(lp), [[0, 1, 0]], [[True, False, True]], 0.0).item()
    assert abs(a - math.log(2)) < 1e-6


def test_nll_empty_mask():
    with pytest.raises(ValueError):
        nll_masked(Tensor(np.zeros((2, 3), dtype=np.float32)), [0, 0], [False, False])


# ---------------------------------------------------------------- KL


def test_symmetric_kl_examples():
    p = np.array([0.5, 0.5], dtype=np.float32)
    assert symmetric_kl(p, p).item() == 0.0
    assert abs(kl_oracle([0.5, 0.5], [0.9, 0.1]) - 0.5 * (0.51083 + 0.36813)) < 1e-4
    assert abs(symmetric_kl([0.5, 0.5], [0.9, 0.1]).item() - 0.4394) < 1e-3


def test_symmetric_kl_errors():
    with pytest.raises(ValueError):
        symmetric_kl([0.5, 0.5], [1.0])
    with pytest.raises(ValueError):
        symmetric_kl([0.5, 0.6], [0.5, 0.5])


@settings(max_examples=80, deadline=None)
@given(st.integers(2, 64), st.integers(0, 2**32 - 1))
def test_symmetric_kl_symmetric_nonnegative_matches_oracle(v, seed):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.full(v, 0.5)).astype(np.float32)
    q = rng.dirichlet(np.full(v, 0.5)).astype(np.float32)
    p, q = p / p.sum(dtype=np.float32), q / q.sum(dtype=np.float32)
    a, b = symmetric_kl(p, q).item(), symmetric_kl(q, p).item()
    assert a >= 0.0
    assert abs(a - b) <= 1e-6 * max(1.0, a)
    assert abs(a - kl_oracle(p, q)) <= 1e-6 * max(1.0, kl_oracle(p, q))


def test_consistency_examples():
    d1 = Tensor(np.array([[0.5, 0.5]], dtype=np.float32))
    d2 = Tensor(np.array([[0.9, 0.1]], dtype=np.float32))
    k1, k2 = consistency_losses(d1, d2, d1, [True])
    assert abs(k1.item() - 0.4394) < 1e-3
    assert abs(k2.item() - 0.4394) < 1e-3
    z1, z2 = consistency_losses(d1, d1, d1, [True])
    assert z1.item() == 0.0 and z2.item() == 0.0


def test_consistency_kld2_doubles_for_identical_mixed_views(rng):
    p = rng.dirichlet(np.ones(5), size=(1, 4)).astype(np.float32)
    q = rng.dirichlet(np.ones(5), size=(1, 4)).astype(np.float32)
    mask = np.array([[True, False, True, True]])
    _, k2 = consistency_losses(Tensor(p), Tensor(p), Tensor(q), mask)
    per_tok = np.mean([kl_oracle(p[0, t], q[0, t]) for t in (0, 2, 3)])
    assert abs(k2.item() - 2 * per_tok) < 1e-5


def test_consistency_gradients_reach_all_views(rng):
    views = [Tensor(rng.dirichlet(np.ones(4), size=(1, 3)).astype(np.float32), requires_grad=True) for _ in range(3)]
    k1, k2 = consistency_losses(*views, [[True, True, False]])
    T.backward(T.add(k1, k2))
    for v in views:
        assert v.grad is not None and np.abs(v.grad).sum() > 0


def test_consistency_mask_mismatch():
    d = Tensor(np.full((1, 3, 2), 0.5, dtype=np.float32))
    with pytest.raises(ValueError):
        consistency_losses(d, d, d, [[True, False]])


# ---------------------------------------------------------------- length + total


def test_length_loss_examples():
    logits = np.zeros(32, dtype=np.float32)
    logits[5] = 20.0
    assert length_loss(Tensor(logits), 5).item() <= 1e-3
    assert abs(length_loss(Tensor(np.zeros(32, dtype=np.float32)), 3).item() - math.log(32)) < 1e-4
    expected = -(0.0 - math.log(1 + math.e))
    assert abs(expected - 1.31326) < 1e-4
    assert abs(length_loss(Tensor(np.array([0.0, 1.0], dtype=np.float32)), 0).item() - 1.31326) < 1e-4
    with pytest.raises(ValueError):
        length_loss(Tensor(np.zeros(4, dtype=np.float32)), 4)


def _s(x):
    return Tensor(np.float32(x))


def test_total_loss_examples():
    t = total_loss(_s(3), _s(3), _s(3), _s(0.3), _s(0.3), _s(1), gamma=0.4)
    assert abs(t.item() - 4.08) < 1e-6
    t0 = total_loss(_s(2), _s(4), _s(3), _s(5), _s(7), _s(1), gamma=0.0)
    assert abs(t0.item() - 4.0) < 1e-6
    neg = total_loss(_s(3), _s(3), _s(3), _s(0.3), _s(0.3), _s(1), gamma=0.4, cr_sign=-1.0)
    assert abs(neg.item() - 3.92) < 1e-6


# ---------------------------------------------------------------- one update


def _batch(n=6, seed=0):
    pairs = generate_synthetic_task("reverse", 12, n, 7, seed=seed)
    return make_batch(pairs)


def test_refine_predict_k1_is_argmax(tiny_model):
    batch = _batch()
    y_hat, k = refine_predict(tiny_model, batch.source, batch.target_lengths, 1, np.random.default_rng(0))
    assert k == 1
    enc = tiny_model.encode(batch.source)
    valid = batch.target != PAD
    logits = tiny_model.decode(np.where(valid, MASK, PAD), enc).values
    logits[..., :3] = -np.inf
    assert np.array_equal(y_hat[valid], logits.argmax(-1)[valid])
    assert np.all(y_hat[~valid] == PAD)


def test_refine_predict_length_and_determinism(tiny_model):
    batch = _batch()
    a = refine_predict(tiny_model, batch.source, batch.target_lengths, 5, np.random.default_rng(9))
    b = refine_predict(tiny_model, batch.source, batch.target_lengths, 5, np.random.default_rng(9))
    assert np.array_equal(a[0], b[0]) and a[1] == b[1]
    assert np.array_equal((a[0] != PAD).sum(1), batch.target_lengths)
    ks = {refine_predict(tiny_model, batch.source, batch.target_lengths, 3, np.random.default_rng(s))[1]
          for s in range(40)}
    assert ks == {1, 2, 3}


def test_refine_predict_records_no_graph(tiny_model):
    batch = _batch()
    refine_predict(tiny_model, batch.source, batch.target_lengths, 3, np.random.default_rng(0))
    assert all(p.grad is None for p in tiny_model.params.values())


def _inputs(model, batch, cfg, seed=0):
    rngs = [np.random.default_rng([seed, i]) for i in range(3)]
    return prepare_inputs(model, batch, cfg, *rngs)


def test_mixed_views_share_mask(tiny_model):
    batch = _batch(8)
    cfg = TrainConfig(beta=0.5, K=3)
    inp = _inputs(tiny_model, batch, cfg)
    for view in (inp.mixed1, inp.mixed2, inp.masked):
        assert np.array_equal(view == MASK, inp.mask)
    obs = (~inp.mask) & (batch.target != PAD)
    assert np.array_equal(inp.masked[obs], batch.target[obs])


def test_degenerate_configuration_collapses():
    model = NATModel(tiny_config(dropout_rate=0.0))
    batch = _batch(8)
    cfg = TrainConfig(beta=0.0, gamma=0.4)
    inp = _inputs(model, batch, cfg)
    _, br = compute_loss(model, batch, inp, cfg, np.random.default_rng(0))
    assert abs(br.nll1 - br.nll3) <= 1e-5 and abs(br.nll2 - br.nll3) <= 1e-5
    assert br.kld1 <= 1e-6 and br.kld2 <= 1e-6
    assert abs(br.total - (br.nll3 + br.len_loss)) <= 1e-5


def test_prediction_pass_contributes_no_gradient():
    model = NATModel(tiny_config(dropout_rate=0.0))
    batch = _batch(5)
    cfg = TrainConfig(beta=0.4, gamma=0.4, K=4)
    base = _inputs(model, batch, cfg)
    grads = []
    # substitution selected no predicted token: mixed views equal the masked target
    for k in (1, 4):
        inp = UpdateInputs(base.masked, base.mask, base.masked.copy(), base.masked.copy(), k)
        total, _ = compute_loss(model, batch, inp, cfg, None)
        grads.append(parameter_grads(model, total))
    for name in grads[0]:
        assert np.array_equal(grads[0][name], grads[1][name])


def test_loss_breakdown_recomposes(tiny_model):
    batch = _batch(8)
    cfg = TrainConfig(beta=0.5, gamma=0.7, K=3)
    _, br = compute_loss(tiny_model, batch, _inputs(tiny_model, batch, cfg), cfg, None)
    assert abs(br.recomposed_total() - br.total) <= 1e-6
    assert br.kld1 > 0 and br.kld2 > 0


def test_log_line_round_trip():
    br = LossBreakdown(1.5, 1.25, 1.125, 0.1, 0.2, 0.3, 1.75, 0.4, 0.3, 3)
    row = parse_log_line(format_log_line(17, br, 1e-4))
    assert row["step"] == 17 and row["k_used"] == 3
    assert row["nll2"] == 1.25 and row["len"] == 0.3 and row["lr"] == 1e-4
    assert len(format_log_line(17, br, 1e-4).split("\t")) == 10


# ---------------------------------------------------------------- training loop


def _train_cfg(**kw):
    base = dict(beta=0.3, gamma=0.4, K=3, base_lr=2e-3, warmup=20, token_budget=64, max_updates=12,
                checkpoint_every=4, average_last=2, seed=5)
    base.update(kw)
    return TrainConfig(**base)


def test_train_writes_checkpoints_and_log(tmp_path, copy_pairs):
    model = NATModel(tiny_config(dropout_rate=0.1))
    log_path = tmp_path / "train.log"
    res = train(copy_pairs, model, _train_cfg(max_updates=10), out_dir=tmp_path, log_path=log_path)
    assert [p.name for p in res.checkpoints] == ["ckpt_0000004.mnat", "ckpt_0000008.mnat", "ckpt_0000010.mnat"]
    rows = [parse_log_line(line) for line in log_path.read_text().splitlines()]
    assert [r["step"] for r in rows] == list(range(1, 11))
    for r in rows:
        recomposed = (r["nll1"] + r["nll2"] + r["nll3"]) / 3 + 0.4 * (r["kld1"] + r["kld2"]) / 3 + r["len"]
        assert abs(recomposed - r["total"]) <= 1e-6
        assert 1 <= r["k_used"] <= 3
    assert len(res.snapshots) == 2


def test_train_deterministic(copy_pairs):
    outs = []
    for _ in range(2):
        model = NATModel(tiny_config(dropout_rate=0.1))
        res = train(copy_pairs, model, _train_cfg())
        outs.append(b"".join(res.averaged()[k].values.tobytes() for k in sorted(model.params)))
    assert outs[0] == outs[1]


def test_eecr_zero_matches_vanilla_trajectory(copy_pairs):
    totals = {}
    for objective in ("eecr", "cmlm"):
        model = NATModel(tiny_config(dropout_rate=0.0))
        res = train(copy_pairs, model, _train_cfg(beta=0.0, gamma=0.0, objective=objective, max_updates=15))
        totals[objective] = np.array([br.total for br in res.history])
    assert np.max(np.abs(totals["eecr"] - totals["cmlm"])) <= 1e-6


def test_train_rejects_short_length_head(copy_pairs):
    from mnat.eecr import TrainingError

    with pytest.raises(TrainingError):
        train(copy_pairs, NATModel(tiny_config(max_length_bins=8)), _train_cfg())


def test_train_config_validation():
    for bad in ({"beta": 1.5}, {"gamma": -1}, {"K": 0}, {"objective": "glat"}, {"cr_sign": 0.5}):
        with pytest.raises(ValueError):
            TrainConfig(**bad).validate()


def test_checkpoint_write_failure_keeps_last_durable(tmp_path, copy_pairs, monkeypatch):
    from mnat import eecr
    from mnat.checkpoint import load_checkpoint

    calls = {"n": 0}
    real = eecr.save_checkpoint

    def flaky(path, *a, **kw):
        calls["n"] += 1
        if calls["n"] == 2:
            raise OSError("disk full")
        return real(path, *a, **kw)

    monkeypatch.setattr(eecr, "save_checkpoint", flaky)
    with pytest.raises(eecr.TrainingError):
        train(copy_pairs, NATModel(tiny_config()), _train_cfg(), out_dir=tmp_path)
    files = sorted(p.name for p in tmp_path.iterdir())
    assert files == ["ckpt_0000004.mnat"]
    assert load_checkpoint(tmp_path / files[0]).step == 4


# ---------------------------------------------------------------- averaging


def _params(value, shape=(2, 3)):
    return {"a": np.full(shape, value, dtype=np.float32), "b": np.full(4, -value, dtype=np.float32)}


def test_average_examples(rng):
    single = {"a": rng.standard_normal((2, 3)).astype(np.float32), "b": rng.standard_normal(4).astype(np.float32)}
    one = average_checkpoints([single])
    assert all(one[k].values.tobytes() == single[k].tobytes() for k in single)
    many = average_checkpoints([single] * 10)
    assert all(np.max(np.abs(many[k].values - single[k])) <= 1e-7 for k in single)
    mid = average_checkpoints([{"x": np.array([0.0], dtype=np.float32)}, {"x": np.array([2.0], dtype=np.float32)}])
    assert mid["x"].values.tolist() == [1.0]


def test_average_mismatch():
    with pytest.raises(ValueError):
        average_checkpoints([_params(1.0), _params(1.0, (3, 2))])
    with pytest.raises(ValueError):
        average_checkpoints([_params(1.0), {"a": np.zeros((2, 3), dtype=np.float32)}])
    with pytest.raises(ValueError):
        average_checkpoints([])


def test_reported_total_tracks_graph_total(tiny_model):
    batch = _batch(8)
    for cfg in (TrainConfig(beta=0.5, gamma=0.7, K=3), TrainConfig(objective="cmlm")):
        total, br = compute_loss(tiny_model, batch, _inputs(tiny_model, batch, cfg), cfg, None)
        assert abs(total.item() - br.total) <= 1e-5 * max(1.0, abs(br.total))


def test_refine_predict_rejects_long_target(tiny_model):
    with pytest.raises(ValueError):
        refine_predict(tiny_model, [[5, 6]], [13], 2, np.random.default_rng(0))


def test_loss_decreases_on_copy_task():
    pairs = generate_synthetic_task("copy", 16, 400, 8, seed=1)
    model = NATModel(tiny_config(vocab_size=20, model_dim=32, hidden_dim=64, dropout_rate=0.1))
    res = train(pairs, model, TrainConfig(beta=0.3, gamma=0.4, K=3, base_lr=1e-3, warmup=100, token_budget=128,
                                          max_updates=500, checkpoint_every=10**9, seed=2))
    assert res.updates == 500
    assert res.history[-1].nll3 < res.history[0].nll3
