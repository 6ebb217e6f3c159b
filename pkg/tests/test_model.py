import math

import numpy as np
import pytest

from sttrack import model as m
from sttrack.autodiff import AdamWConfig, Tensor
from sttrack.core import Box7, ClassId, Detection, StateVector
from sttrack.model import (
    SttConfig,
    TrainingExample,
    TrainSettings,
    association_accuracy,
    decode_state,
    encode_detection,
    extract_examples,
    init_params,
    loss_total,
    pack_batch,
    select_context,
    tdi_forward,
    temporal_fuse,
    train,
)
from sttrack.sim import MotionProfile, NoiseModel, ObjectSpec, SimConfig, generate

TINY = SttConfig(d_q=8, d_a=3, d_m=2, t_max=3, k_max=4, heads=2, mlp_hidden=8)


def make_detection(cx=0.0, cy=0.0, frame=0, det_id=0, cfg=TINY, motion=(0.0, 0.0),
                   appearance=None, conf=0.9, heading=0.2):
    if appearance is None:
        appearance = tuple(0.1 * (i + 1) for i in range(cfg.d_a))
    return Detection(
        box=Box7((cx, cy, 0.75), (2.0, 4.5, 1.5), heading),
        appearance=appearance,
        motion=motion,
        confidence=conf,
        frame_index=frame,
        detection_id=det_id,
        class_id=ClassId.VEHICLE,
    )


def make_example(cfg=TINY, n_hist=2, n_ctx=3, positive=0, offset=(0.0, 0.0)):
    ox, oy = offset
    history = tuple(
        make_detection(ox + 0.1 * i, oy, frame=i, det_id=i, cfg=cfg)
        for i in range(n_hist)
    )
    context = tuple(
        make_detection(ox + 0.5 * j, oy + 0.3, frame=n_hist, det_id=j, cfg=cfg)
        for j in range(n_ctx)
    )
    labels = tuple(1 if j == positive else 0 for j in range(n_ctx))
    anchor = history[-1].box.center_xy
    state_t = StateVector((ox + 0.2, oy), (1.0, 0.0), (0.1, 0.0))
    state_prev = StateVector((ox + 0.1, oy), (1.0, 0.0), (0.1, 0.0))
    return TrainingExample(history, context, labels, state_t, state_prev, anchor)


# --- encoder -----------------------------------------------------------------


def test_encode_output_width():
    params = init_params(TINY, seed=0)
    out = encode_detection(make_detection(), params, TINY)
    assert out.shape == (TINY.d_q,)


def test_encode_deterministic():
    params = init_params(TINY, seed=0)
    det = make_detection(1.0, 2.0)
    a = encode_detection(det, params, TINY, anchor=(0.0, 0.0))
    b = encode_detection(det, params, TINY, anchor=(0.0, 0.0))
    assert a.tobytes() == b.tobytes()


def test_encode_rejects_wrong_widths():
    params = init_params(TINY, seed=0)
    bad = make_detection(appearance=(0.1,) * 7)
    with pytest.raises(ValueError, match="7.*3"):
        encode_detection(bad, params, TINY)


def test_encode_gradient_wrt_input_features():
    # d(readout)/d(feature) via the graph matches central differences
    params = init_params(TINY, seed=1)
    rng = np.random.default_rng(0)
    feat = rng.normal(0, 1, (1, TINY.feature_width))
    readout = Tensor(rng.normal(0, 1, (TINY.d_q, 1)))

    leaf = Tensor(feat, requires_grad=True)
    out = m.ad.matmul(m.encode_batch(params, leaf), readout)
    out.backward()
    analytic = leaf.grad.copy()

    h = 1e-5
    for i in range(TINY.feature_width):
        feat_hi = feat.copy()
        feat_hi[0, i] += h
        feat_lo = feat.copy()
        feat_lo[0, i] -= h
        hi = m.ad.matmul(m.encode_batch(params, Tensor(feat_hi)), readout).item()
        lo = m.ad.matmul(m.encode_batch(params, Tensor(feat_lo)), readout).item()
        fd = (hi - lo) / (2 * h)
        rel = abs(analytic[0, i] - fd) / max(abs(analytic[0, i]) + abs(fd), 1e-3)
        assert rel <= 1e-4


# --- temporal fusion ---------------------------------------------------------


def test_fuse_single_embedding_deterministic_function():
    params = init_params(TINY, seed=0)
    emb = np.linspace(-1, 1, TINY.d_q)
    out1 = temporal_fuse([emb], params, TINY)
    out2 = temporal_fuse([emb.copy()], params, TINY)
    assert out1.shape == (TINY.d_q,)
    assert out1.tobytes() == out2.tobytes()


def test_fuse_rejects_empty_and_overlong_history():
    params = init_params(TINY, seed=0)
    with pytest.raises(ValueError):
        temporal_fuse([], params, TINY)
    emb = np.zeros(TINY.d_q)
    with pytest.raises(ValueError):
        temporal_fuse([emb] * (TINY.t_max + 1), params, TINY)


def test_padding_relayout_invariance():
    # Same real content in different physical slots must not change outputs.
    cfg = TINY
    params = init_params(cfg, seed=3)
    ex = make_example(cfg, n_hist=2, n_ctx=2)
    base = pack_batch([ex], cfg)
    moved = pack_batch(
        [ex],
        cfg,
        history_slots=[np.array([0, 2])],  # pad now sits between the reals
        context_slots=[np.array([1, 3])],
    )
    out_a = m.loss_components_batch(params, cfg, base)
    out_b = m.loss_components_batch(params, cfg, moved)
    for key in ("loss_d", "loss_s_t", "loss_s_prev", "total"):
        assert out_a[key].item() == pytest.approx(out_b[key].item(), abs=1e-9)


def test_fuse_gradient_check():
    cfg = TINY
    params = init_params(cfg, seed=4)
    rng = np.random.default_rng(5)
    emb = Tensor(rng.normal(0, 1, (2, cfg.t_max, cfg.d_q)), requires_grad=True)
    mask = np.array([[True, True, False], [True, True, True]])
    onehot = np.zeros((2, 3, 3))
    onehot[0, 0, 1] = onehot[0, 1, 2] = 1.0
    onehot[1, 0, 0] = onehot[1, 1, 1] = onehot[1, 2, 2] = 1.0
    pool = np.zeros((2, 1, 3))
    pool[0, 0, :2] = 0.5
    pool[1, 0, :] = 1 / 3
    readout = Tensor(rng.normal(0, 1, (cfg.d_q, 1)))

    def build():
        fused = m.temporal_fuse_batch(params, cfg, emb, mask, onehot, pool)
        return m.ad.sum_(m.ad.matmul(fused, readout))

    from test_autodiff import check_grad

    check_grad(build, {"emb": emb, "wq": params["tf.wq"], "pe": params["tf.pe"],
                       "ln_g": params["tf.ln_g"]})


# --- state decoding ----------------------------------------------------------


def test_decode_state_six_components():
    params = init_params(TINY, seed=0)
    out = decode_state(np.linspace(-1, 1, TINY.d_q), params)
    assert isinstance(out, StateVector)
    assert out.as_array().shape == (6,)


# --- context selection -------------------------------------------------------


def test_select_context_empty_when_out_of_radius():
    pred = StateVector.zero((0.0, 0.0))
    dets = [make_detection(100.0, 0.0)]
    assert select_context(pred, dets, d=5.0, k=3) == []


def test_select_context_singleton_at_zero_distance():
    pred = StateVector.zero((1.0, 1.0))
    det = make_detection(1.0, 1.0)
    assert select_context(pred, [det], d=5.0, k=3) == [det]


def test_select_context_truncates_to_k_nearest():
    rng = np.random.default_rng(7)
    pred = StateVector.zero((0.0, 0.0))
    dets = [
        make_detection(rng.uniform(-8, 8), rng.uniform(-8, 8), det_id=i)
        for i in range(30)
    ]
    got = select_context(pred, dets, d=20.0, k=20)
    assert len(got) == 20
    # independent full sort
    ranked = sorted(
        dets, key=lambda det: (math.hypot(det.box.center[0], det.box.center[1]),
                               det.detection_id)
    )
    assert got == ranked[:20]


# --- TDI ---------------------------------------------------------------------


def test_tdi_single_live_slot():
    params = init_params(TINY, seed=0)
    query = np.linspace(-1, 1, TINY.d_q)
    scores, state = tdi_forward(query, [make_detection()], params, TINY, (0.0, 0.0))
    assert scores.shape == (TINY.k_max,)
    assert scores[0] > 0.0
    assert np.all(scores[1:] == 0.0)
    assert isinstance(state, StateVector)


def test_tdi_scores_in_sigmoid_range():
    params = init_params(TINY, seed=2)
    query = np.linspace(-0.5, 0.5, TINY.d_q)
    context = [make_detection(0.5 * j, 0.1, det_id=j) for j in range(3)]
    scores, _ = tdi_forward(query, context, params, TINY, (0.0, 0.0))
    assert np.all((scores[:3] > 0.0) & (scores[:3] < 1.0))
    assert np.all(scores[3:] == 0.0)


def test_tdi_rejects_empty_context():
    params = init_params(TINY, seed=0)
    with pytest.raises(ValueError):
        tdi_forward(np.zeros(TINY.d_q), [], params, TINY, (0.0, 0.0))


# --- losses ------------------------------------------------------------------


def test_loss_single_context_half_score():
    # Zeroed score/state heads give AS = 0.5 exactly and zero state outputs;
    # with perfect zero targets the loss is gamma * ln 2.
    cfg = TINY
    params = init_params(cfg, seed=0)
    for name in ("tdi.score_w2", "tdi.score_b2", "tsd.w2", "tsd.b2",
                 "tdi.state_w2", "tdi.state_b2"):
        params[name].data[:] = 0.0
    det = make_detection(0.0, 0.0)
    ex = TrainingExample(
        history=(det,),
        context=(make_detection(0.0, 0.0, frame=1, det_id=0),),
        labels=(1,),
        state_t=StateVector.zero((0.0, 0.0)),
        state_prev=StateVector.zero((0.0, 0.0)),
        anchor=(0.0, 0.0),
    )
    loss = loss_total(ex, params, cfg)
    assert loss.item() == pytest.approx(cfg.gamma * math.log(2.0), abs=1e-12)
    assert loss.item() == pytest.approx(6.931, abs=1e-3)


def test_loss_zero_in_saturated_limit():
    logits = Tensor(np.array([[40.0, -40.0, -40.0]]))
    labels = np.array([[1.0, 0.0, 0.0]])
    mask = np.ones((1, 3), dtype=bool)
    bce = m.binary_cross_entropy_with_logits(logits, labels, mask)
    assert bce.item() == pytest.approx(0.0, abs=1e-12)


def test_full_model_gradient_check():
    cfg = TINY
    params = init_params(cfg, seed=11)
    ex = make_example(cfg, n_hist=3, n_ctx=4, positive=2)
    ex2 = make_example(cfg, n_hist=1, n_ctx=2, positive=1, offset=(3.0, -1.0))

    def build():
        batch = pack_batch([ex, ex2], cfg)
        return m.loss_components_batch(params, cfg, batch)["total"]

    from test_autodiff import check_grad

    check_grad(build, params)


def test_shape_invariants_across_cardinalities():
    cfg = TINY
    params = init_params(cfg, seed=1)
    for n_hist in range(1, cfg.t_max + 1):
        for n_ctx in range(1, cfg.k_max + 1):
            ex = make_example(cfg, n_hist=n_hist, n_ctx=n_ctx, positive=n_ctx - 1)
            batch = pack_batch([ex], cfg)
            hist_emb = m.encode_batch(params, Tensor(batch.hist_feat))
            assert hist_emb.shape == (1, cfg.t_max, cfg.d_q)
            query = m.temporal_fuse_batch(
                params, cfg, hist_emb, batch.hist_mask, batch.pe_onehot,
                batch.pool_weights,
            )
            assert query.shape == (1, cfg.d_q)
            ctx_emb = m.encode_batch(params, Tensor(batch.ctx_feat))
            scores, _, state = m.tdi_batch(params, cfg, query, ctx_emb, batch.ctx_mask)
            assert scores.shape == (1, cfg.k_max)
            assert state.shape == (1, 6)
            assert np.all(scores.data[0, n_ctx:] == 0.0)


def test_translation_equivariance():
    cfg = TINY
    params = init_params(cfg, seed=9)
    base = make_example(cfg, n_hist=3, n_ctx=3, positive=1)
    shifted = make_example(cfg, n_hist=3, n_ctx=3, positive=1, offset=(50.0, -20.0))

    def forward(ex):
        batch = pack_batch([ex], cfg)
        hist_emb = m.encode_batch(params, Tensor(batch.hist_feat))
        query = m.temporal_fuse_batch(
            params, cfg, hist_emb, batch.hist_mask, batch.pe_onehot,
            batch.pool_weights,
        )
        state_prev = m.decode_state_batch(params, query)
        ctx_emb = m.encode_batch(params, Tensor(batch.ctx_feat))
        scores, _, state_t = m.tdi_batch(params, cfg, query, ctx_emb, batch.ctx_mask)
        return scores.data, state_prev.data, state_t.data, np.array(ex.anchor)

    s_a, prev_a, st_a, anchor_a = forward(base)
    s_b, prev_b, st_b, anchor_b = forward(shifted)
    offset = anchor_b - anchor_a
    assert offset == pytest.approx([50.0, -20.0])
    assert s_b == pytest.approx(s_a, abs=1e-5)
    # anchor-relative outputs are identical; absolute positions shift by offset
    assert prev_b == pytest.approx(prev_a, abs=1e-5)
    assert st_b == pytest.approx(st_a, abs=1e-5)
    abs_a = prev_a[0, :2] + anchor_a
    abs_b = prev_b[0, :2] + anchor_b
    assert abs_b - abs_a == pytest.approx(offset, abs=1e-5)


# --- extraction and training --------------------------------------------------


def small_scenario(seed=0, frames=40):
    specs = (
        ObjectSpec(ClassId.VEHICLE, MotionProfile.static(), (0.0, 0.0), 0.1,
                   (2.0, 4.5, 1.5)),
        ObjectSpec(ClassId.VEHICLE, MotionProfile.constant_velocity(2.0, 0.5),
                   (-10.0, 5.0), 0.0, (2.0, 4.5, 1.5)),
    )
    cfg = SimConfig(
        frames=frames,
        objects=specs,
        noise=NoiseModel(center_sigma=0.05, heading_sigma=0.01, size_sigma=0.01,
                         appearance_sigma=0.1, fp_rate=0.3, miss_prob=0.05,
                         confidence_noise=0.02),
        appearance_dim=TINY.d_a,
    )
    return generate(cfg, seed=seed)


def test_extract_examples_labels_align_with_provenance():
    scenario = small_scenario()
    examples = extract_examples(scenario, TINY)
    assert len(examples) > 20
    for ex in examples:
        assert 1 <= len(ex.history) <= TINY.t_max
        assert 1 <= len(ex.context) <= TINY.k_max
        assert sum(ex.labels) in (0, 1)
    with_positive = [ex for ex in examples if sum(ex.labels) == 1]
    assert len(with_positive) > 10


def test_train_reduces_loss_and_is_deterministic():
    scenario = small_scenario()
    examples = extract_examples(scenario, TINY)
    settings = TrainSettings(
        steps=60,
        batch_size=16,
        log_every=10,
        optimizer=AdamWConfig(learning_rate=3e-3, weight_decay=0.01,
                              warmup_steps=5, total_steps=60),
    )
    params_a, log_a = train(examples, TINY, settings, seed=0)
    params_b, _ = train(examples, TINY, settings, seed=0)
    for name in params_a:
        assert params_a[name].data.tobytes() == params_b[name].data.tobytes()
    start = m.evaluate_loss(examples[:50], init_params(TINY, seed=0), TINY)
    end = m.evaluate_loss(examples[:50], params_a, TINY)
    assert end < start
    assert log_a[0]["step"] == 1
    assert log_a[-1]["step"] == 60


def test_association_only_ablation_trains():
    cfg = SttConfig(d_q=8, d_a=3, d_m=2, t_max=3, k_max=4, heads=2, mlp_hidden=8,
                    lambda_position=0.0, lambda_velocity=0.0,
                    lambda_acceleration=0.0, alpha=0.0)
    scenario = small_scenario()
    examples = extract_examples(scenario, cfg)
    settings = TrainSettings(steps=30, batch_size=8, log_every=10,
                             optimizer=AdamWConfig(learning_rate=3e-3))
    params, log = train(examples, cfg, settings, seed=1)
    assert all(math.isfinite(row["total"]) for row in log)
    # state losses carry zero weight in the total
    assert log[-1]["total"] == pytest.approx(10.0 * log[-1]["loss_d"], rel=1e-9)


def test_train_rejects_empty_dataset():
    with pytest.raises(ValueError):
        train([], TINY, TrainSettings(steps=1, batch_size=1), seed=0)


def test_association_accuracy_on_trained_model():
    scenario = small_scenario(seed=3, frames=60)
    examples = extract_examples(scenario, TINY)
    settings = TrainSettings(
        steps=150, batch_size=16, log_every=50,
        optimizer=AdamWConfig(learning_rate=3e-3, weight_decay=0.01),
    )
    params, _ = train(examples, TINY, settings, seed=2)
    held_out = extract_examples(small_scenario(seed=77, frames=60), TINY)
    acc = association_accuracy(held_out, params, TINY)
    assert acc > 0.8
