import numpy as np
import pytest

from seqdefer.core import CandidateSet, StepRecord, Trace
from seqdefer.rejectors import (
    MLP,
    MLPSpec,
    OneTimeRejector,
    RolloutMode,
    TokenRejector,
    TrainConfig,
    grad_check,
    load_checkpoint,
    onetime_batch_loss,
    onetime_default_config,
    onetime_scores,
    oracle_decision_bits,
    save_checkpoint,
    token_batch_loss,
    token_default_config,
    token_scores,
    train_onetime_rejector,
    train_token_rejector,
)
from seqdefer.surrogates import onetime_surrogate, token_surrogate
from conftest import make_random_trace


def traces_batch(seed, n=8, L=5):
    rng = np.random.default_rng(seed)
    return [make_random_trace(rng, L=L, instance_id=f"i{k}") for k in range(n)]


# --- rollout schedule ------------------------------------------------------


def test_scheduled_sampling_schedule():
    m = RolloutMode(variant="scheduled")
    assert [m.teacher_prob(e) for e in range(5)] == [1.0] * 5
    assert m.teacher_prob(5) == pytest.approx(0.95)
    assert m.teacher_prob(6) == pytest.approx(0.95 ** 2)
    assert m.teacher_prob(500) == 0.5  # floor


def test_rollout_fixed_variants():
    assert RolloutMode("teacher_forced").teacher_prob(99) == 1.0
    assert RolloutMode("free_running").teacher_prob(0) == 0.0
    with pytest.raises(ValueError):
        RolloutMode("sometimes")


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(kind="logistic", learning_rate=0.0)
    with pytest.raises(ValueError):
        TrainConfig(kind="logistic", val_fraction=1.0)


# --- models ----------------------------------------------------------------


def test_mlp_dropout_noop_at_eval():
    spec = MLPSpec(4, (8,), 2, dropout_rate=0.5)
    mlp = MLP(spec, np.random.default_rng(0))
    x = np.random.default_rng(1).normal(size=(3, 4))
    a = mlp.forward(x, train=False).data
    b = mlp.forward(x, train=False).data
    np.testing.assert_array_equal(a, b)
    c = mlp.forward(x, train=True, rng=np.random.default_rng(2)).data
    assert not np.array_equal(a, c)


def test_mlp_spec_validation():
    with pytest.raises(ValueError):
        MLPSpec(0, (4,), 1)
    with pytest.raises(ValueError):
        MLPSpec(3, (4,), 1, dropout_rate=1.0)
    with pytest.raises(ValueError):
        MLPSpec(3, (4,), 1, activation="gelu")


def test_onetime_scores_strictly_clamped():
    m = OneTimeRejector(3, 4, hidden=(64, 64), score_clamp=2.0, seed=0)
    # blow up the weights to force saturation; outputs must stay inside (-M, M)
    for _, p in m.named_params():
        p.data = p.data * 1e6
    g = m.forward(np.random.default_rng(0).normal(size=(50, 3))).data
    assert np.all(np.abs(g) < 2.0)
    assert np.max(np.abs(g)) > 1.99  # saturation actually reached


def test_token_forward_shapes_and_feature_check():
    model = TokenRejector(4, hidden=(8,), state_dim=3, seed=0)
    feats = np.random.default_rng(0).normal(size=(6, 5, 4))
    scores, decisions = model.forward_sequence(feats)
    assert len(scores) == 5 and scores[0].data.shape == (6, 1)
    assert decisions.shape == (6, 5)
    with pytest.raises(ValueError):
        model.forward_sequence(np.zeros((2, 3, 7)))


def test_teacher_forced_contexts_ignore_weights():
    traces = traces_batch(0)
    bits = oracle_decision_bits(traces)
    feats = np.stack([t.feature_matrix() for t in traces])
    m1 = TokenRejector(4, hidden=(8,), seed=1)
    m2 = TokenRejector(4, hidden=(8,), seed=2)
    _, d1 = m1.forward_sequence(feats, bits, teacher_prob=1.0)
    _, d2 = m2.forward_sequence(feats, bits, teacher_prob=1.0)
    np.testing.assert_array_equal(d1, d2)
    np.testing.assert_array_equal(d1, bits)


def test_free_running_contexts_follow_score_sign():
    model = TokenRejector(4, hidden=(), seed=0)  # linear
    feats = np.random.default_rng(3).normal(size=(4, 6, 4))
    scores, decisions = model.forward_sequence(feats)
    mat = np.concatenate([s.data for s in scores], axis=1)
    np.testing.assert_array_equal(decisions, (mat >= 0).astype(float))


def test_zero_weight_token_model_defers_everything():
    model = TokenRejector(4, hidden=(8,), seed=0)
    for _, p in model.named_params():
        p.data = np.zeros_like(p.data)
    feats = np.random.default_rng(0).normal(size=(3, 4, 4))
    scores, decisions = model.forward_sequence(feats)
    assert all(np.all(s.data == 0.0) for s in scores)
    np.testing.assert_array_equal(decisions, np.ones((3, 4)))  # r = 0 defers


# --- objectives match the reference surrogate functions ---------------------


def test_token_batch_loss_matches_reference():
    traces = traces_batch(1, n=5, L=4)
    model = TokenRejector(4, hidden=(6,), state_dim=0, dropout=0.0, seed=0)
    for kind in ("logistic", "square"):
        loss = float(token_batch_loss(model, traces, kind, teacher_prob=0.0).data)
        mat = token_scores(model, traces)
        ref = np.mean([
            token_surrogate(kind, t.step_losses(), t.step_costs(), mat[i])
            for i, t in enumerate(traces)
        ])
        assert loss == pytest.approx(ref, rel=1e-12)


def test_onetime_batch_loss_matches_reference():
    traces = traces_batch(2, n=5, L=4)
    model = OneTimeRejector(3, len(traces[0].candidates), hidden=(6,), dropout=0.0, seed=0)
    for kind in ("ce", "mae"):
        loss = float(onetime_batch_loss(model, traces, None, kind).data)
        g = onetime_scores(model, traces)
        ref = np.mean([onetime_surrogate(kind, t, None, g[i]) for i, t in enumerate(traces)])
        assert loss == pytest.approx(ref, rel=1e-12)


# --- gradient audit ---------------------------------------------------------


def test_grad_check_linear_token_logistic():
    traces = traces_batch(3, n=4, L=3)
    model = TokenRejector(4, hidden=(), state_dim=0, dropout=0.0, seed=0)
    err = grad_check(
        lambda: token_batch_loss(model, traces, "logistic", teacher_prob=1.0),
        model.named_params())
    assert err < 1e-4


def test_grad_check_recurrent_token_square():
    traces = traces_batch(4, n=3, L=4)
    model = TokenRejector(4, hidden=(5,), state_dim=3, dropout=0.0, seed=1)
    err = grad_check(
        lambda: token_batch_loss(model, traces, "square", teacher_prob=1.0),
        model.named_params())
    assert err < 1e-4


def test_grad_check_onetime_both_kinds():
    traces = traces_batch(5, n=4, L=4)
    for kind in ("ce", "mae"):
        model = OneTimeRejector(3, len(traces[0].candidates), hidden=(5,),
                                dropout=0.0, seed=2)
        err = grad_check(
            lambda: onetime_batch_loss(model, traces, None, kind),
            model.named_params())
        assert err < 1e-4


# --- training behavior -------------------------------------------------------


def test_zero_epochs_returns_initialized_model():
    traces = traces_batch(6)
    cfg = TrainConfig(kind="ce", epochs=0, seed=3)
    fresh = OneTimeRejector(3, len(traces[0].candidates), seed=3)
    trained, log = train_onetime_rejector(traces, None, cfg)
    assert log == []
    for (_, a), (_, b) in zip(trained.named_params(), fresh.named_params()):
        np.testing.assert_array_equal(a.data, b.data)


def test_degenerate_equal_losses_leave_weights_unchanged():
    # all candidates realize the same loss -> surrogate weights all zero
    rng = np.random.default_rng(7)
    base = make_random_trace(rng, L=3)
    flat = Trace(base.instance_id, base.x_summary, base.steps, base.candidates,
                 np.zeros(4), np.full(4, 2.5), 2.5, 2.5)
    traces = [flat] * 6
    cfg = TrainConfig(kind="ce", epochs=5, seed=0, batch_size=3)
    fresh = OneTimeRejector(3, 4, seed=0)
    trained, log = train_onetime_rejector(traces, None, cfg)
    assert len(log) > 0
    for (_, a), (_, b) in zip(trained.named_params(), fresh.named_params()):
        np.testing.assert_array_equal(a.data, b.data)


def test_training_is_bit_deterministic():
    traces = traces_batch(8, n=10, L=4)
    cfg = TrainConfig(kind="logistic", epochs=6, seed=11, batch_size=4,
                      rollout=RolloutMode("scheduled", warmup_epochs=2))
    m1, log1 = train_token_rejector(traces, cfg, hidden=(6,), state_dim=2, dropout=0.2)
    m2, log2 = train_token_rejector(traces, cfg, hidden=(6,), state_dim=2, dropout=0.2)
    assert log1 == log2
    for (_, a), (_, b) in zip(m1.named_params(), m2.named_params()):
        np.testing.assert_array_equal(a.data, b.data)


def test_training_log_tracks_best_and_schedule():
    traces = traces_batch(9, n=12, L=4)
    cfg = TrainConfig(kind="logistic", epochs=10, seed=5, patience=50,
                      rollout=RolloutMode("scheduled"))
    _, log = train_token_rejector(traces, cfg, hidden=(6,), state_dim=0, dropout=0.0)
    best = [rec["best_val"] for rec in log]
    assert all(b2 <= b1 + 1e-12 for b1, b2 in zip(best, best[1:]))
    probs = [rec["teacher_prob"] for rec in log]
    assert probs[:5] == [1.0] * 5 and probs[5] == pytest.approx(0.95)


def test_early_stopping_stops_before_epoch_budget():
    traces = traces_batch(10, n=8, L=3)
    # zero learning rate: nothing improves, patience should cut it off
    cfg = TrainConfig(kind="ce", epochs=500, learning_rate=1e-30, patience=4,
                      min_delta=1e-4, seed=0)
    _, log = train_onetime_rejector(traces, None, cfg)
    assert len(log) <= 6


def test_token_training_learns_separable_rule():
    # defer iff feature[0] > 0: make losses/costs so the oracle is that rule
    rng = np.random.default_rng(12)
    traces = []
    for k in range(40):
        L = 5
        f = rng.normal(size=(L, 4))
        losses = np.where(f[:, 0] > 0, 2.0, 0.1)  # keep cheap when f0 < 0
        costs = np.full(L, 1.0)
        steps = tuple(
            StepRecord(j + 1, 0.0, 0.0, float(losses[j]), float(costs[j]),
                       0.5, f[j]) for j in range(L))
        cum = np.concatenate([[0.0], np.cumsum(losses)])
        suf = np.concatenate([np.cumsum(costs[::-1])[::-1], [0.0]])
        pos = np.arange(1, L + 2)
        traces.append(Trace(f"s{k}", rng.normal(size=3), steps, CandidateSet.full(L),
                            cum[pos - 1], suf[pos - 1], float(suf[0]), float(cum[L])))
    cfg = TrainConfig(kind="logistic", epochs=120, learning_rate=0.05, batch_size=8,
                      weight_decay=0.0, patience=500, seed=1,
                      rollout=RolloutMode("teacher_forced"))
    model, _ = train_token_rejector(traces, cfg, hidden=(8,), state_dim=0, dropout=0.0)
    mat = token_scores(model, traces)
    want = np.stack([t.feature_matrix()[:, 0] > 0 for t in traces])
    got = mat >= 0
    assert np.mean(got == want) > 0.95


def test_onetime_training_moves_argmax_toward_cheap_position():
    # position 2 always realizes much lower loss; trained argmax should find it
    rng = np.random.default_rng(13)
    traces = []
    L = 3
    for k in range(30):
        base = make_random_trace(rng, L=L, instance_id=f"o{k}")
        prefix = np.array([0.0, 0.1, 5.0, 5.0])
        costs = np.array([5.0, 0.1, 5.0, 0.0])  # realized: 5.0, 0.2, 10.0, 5.0
        traces.append(Trace(base.instance_id, base.x_summary, base.steps,
                            base.candidates, prefix, costs, 5.0, 5.0))
    cfg = TrainConfig(kind="ce", epochs=300, learning_rate=0.05, batch_size=10,
                      weight_decay=0.0, patience=1000, seed=2)
    model, _ = train_onetime_rejector(traces, None, cfg, hidden=(4,), dropout=0.0)
    g = onetime_scores(model, traces)
    assert np.mean(np.argmax(g, axis=1) == 1) > 0.9


# --- checkpoints -------------------------------------------------------------


def test_checkpoint_roundtrip_bitwise(tmp_path):
    traces = traces_batch(14, n=6, L=4)
    cfg = TrainConfig(kind="ce", epochs=3, seed=4)
    model, _ = train_onetime_rejector(traces, None, cfg, hidden=(5,))
    path = tmp_path / "model.json"
    save_checkpoint(path, model, cfg)
    back, cfg2 = load_checkpoint(path)
    x = np.stack([t.x_summary for t in traces])
    np.testing.assert_array_equal(model.forward(x).data, back.forward(x).data)
    assert cfg2 == cfg


def test_checkpoint_roundtrip_token(tmp_path):
    model = TokenRejector(4, hidden=(6, 3), state_dim=2, dropout=0.4, seed=9)
    path = tmp_path / "tok.json"
    save_checkpoint(path, model)
    back, cfg = load_checkpoint(path)
    assert cfg is None
    feats = np.random.default_rng(0).normal(size=(3, 5, 4))
    a, _ = model.forward_sequence(feats)
    b, _ = back.forward_sequence(feats)
    for ta, tb in zip(a, b):
        np.testing.assert_array_equal(ta.data, tb.data)


def test_checkpoint_schema_checked(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{"version": "model/v0"}')
    with pytest.raises(ValueError, match="schema"):
        load_checkpoint(p)


def test_default_configs_match_documented_tables():
    t = token_default_config()
    assert (t.patience, t.weight_decay) == (7, 0.001)
    o = onetime_default_config()
    assert (o.patience, o.weight_decay, o.learning_rate) == (20, 0.005, 5e-4)


# --- committees --------------------------------------------------------------


def test_token_committee_scores_are_member_mean():
    from seqdefer.rejectors import committee_token_scores, train_token_committee

    traces = traces_batch(11, n=10)
    cfg = TrainConfig(kind="logistic", learning_rate=1e-3, epochs=3, batch_size=4,
                      patience=10, min_delta=0.0, weight_decay=0.0,
                      grad_clip_norm=1.0, seed=2,
                      rollout=RolloutMode(variant="free_running"))
    models = train_token_committee(traces, cfg, members=3, state_dim=0, hidden=(8,),
                                   dropout=0.0)
    assert len(models) == 3
    per_member = [token_scores(m, traces) for m in models]
    # distinct inits -> distinct scores
    assert not np.allclose(per_member[0], per_member[1])
    avg = committee_token_scores(models, traces)
    assert np.allclose(avg, np.mean(per_member, axis=0))


def test_onetime_committee_deterministic_and_validated():
    from seqdefer.rejectors import (committee_onetime_scores,
                                    train_onetime_committee)

    traces = traces_batch(12, n=10)
    cfg = TrainConfig(kind="ce", learning_rate=1e-3, epochs=3, batch_size=4,
                      patience=10, min_delta=0.0, weight_decay=0.0,
                      grad_clip_norm=1.0, seed=3)
    a = committee_onetime_scores(
        train_onetime_committee(traces, None, cfg, members=2, hidden=(8,)), traces)
    b = committee_onetime_scores(
        train_onetime_committee(traces, None, cfg, members=2, hidden=(8,)), traces)
    assert np.array_equal(a, b)
    with pytest.raises(ValueError, match="members"):
        train_onetime_committee(traces, None, cfg, members=0)
