import numpy as np
import pytest

from staformer.autodiff import Tensor, check_gradients
from staformer.autodiff.nn import Init
from staformer.encoders import TokenSet2D, TokenSet3D
from staformer.errors import ConfigurationError, DimensionError, ValidationError
from staformer.fusion import (
    DualAttention,
    FeaturePyramid,
    FrameGuidedPool,
    FusionConfig,
    PyramidFusion,
    RefinedTokens,
    mean_pool,
    pyramid_shapes,
    sum_fusion,
)
from staformer.head import (
    DetectionHead,
    GroundTruthInstance,
    HeadConfig,
    STAPrediction,
    assign_cell,
    box_iou,
    decode,
    encode_box,
    nms,
    sta_loss,
)

from oracles import decode_oracle, iou_scalar

D = 4


def tokens2d(rng, h=4, w=4, d=D, grad=False):
    return TokenSet2D(Tensor(rng.standard_normal((h, w, d)), requires_grad=grad),
                      Tensor(rng.standard_normal(d), requires_grad=grad))


def tokens3d(rng, t=3, h=2, w=2, d=D, grad=False):
    return TokenSet3D(Tensor(rng.standard_normal((t, h, w, d)), requires_grad=grad),
                      Tensor(rng.standard_normal(d), requires_grad=grad))


def fcfg(**kw):
    base = dict(d=D, heads=2, frames=3)
    base.update(kw)
    return FusionConfig(**base)


def proj_loss(*pairs):
    total = None
    for t, p in pairs:
        term = (t * Tensor(p)).sum()
        total = term if total is None else total + term
    return total


# ----------------------------------------------------------------------
# fusion


def test_frame_guided_pool_shapes(rng):
    pool = FrameGuidedPool(fcfg(), Init(0, np.float64))
    out = pool(tokens3d(rng))
    assert out.tokens.shape == (2, 2, D)
    assert out.class_token.shape == (D,)
    w = out.attention[0]
    assert w.shape == (2, 5, 1 + 3 * 4)
    assert np.allclose(w.sum(-1), 1.0)


def test_frame_guided_pool_batched_equals_loop(rng):
    pool = FrameGuidedPool(fcfg(), Init(0, np.float64))
    vids = [tokens3d(rng) for _ in range(3)]
    batched = pool(TokenSet3D(Tensor(np.stack([v.tokens.data for v in vids])),
                              Tensor(np.stack([v.class_token.data for v in vids]))))
    for i, v in enumerate(vids):
        assert np.allclose(batched.tokens.data[i], pool(v).tokens.data, atol=1e-12)


def test_frame_guided_pool_rejects_bad_width(rng):
    pool = FrameGuidedPool(fcfg(), Init(0))
    with pytest.raises(DimensionError):
        pool(tokens3d(rng, d=6))


def test_mean_pool_matches_frame_guided_shape(rng):
    v = tokens3d(rng)
    pooled = FrameGuidedPool(fcfg(), Init(0, np.float64))(v)
    base = mean_pool(v)
    assert base.tokens.shape == pooled.tokens.shape
    assert np.allclose(base.tokens.data, v.tokens.data.mean(axis=0))


def test_frame_guided_pool_frame_order(rng):
    v = tokens3d(rng, t=4)
    perm = TokenSet3D(Tensor(v.tokens.data[[2, 0, 1, 3]]), v.class_token)
    plain = FrameGuidedPool(fcfg(frames=4, temporal_pos_embed=False), Init(0, np.float64))
    assert np.allclose(plain(v).tokens.data, plain(perm).tokens.data, atol=1e-12)
    timed = FrameGuidedPool(fcfg(frames=4), Init(0, np.float64))
    assert not np.allclose(timed(v).tokens.data, timed(perm).tokens.data, atol=1e-6)


def test_frame_guided_pool_uniform_attention_is_mean(rng):
    pool = FrameGuidedPool(fcfg(temporal_pos_embed=False), Init(0, np.float64))
    attn = pool.block.attn
    for lin in (attn.q, attn.k):
        lin.weight.data[...] = 0.0
        lin.bias.data[...] = 0.0
    v = tokens3d(rng)
    out = pool(v)
    normed = pool.block.norm_kv(Tensor(np.concatenate([v.class_token.data[None], v.tokens.data.reshape(-1, D)])))
    values = attn.out(attn.v(normed)).data
    expected = v.tokens.data[-1] + values.mean(axis=0)
    assert np.max(np.abs(out.tokens.data - expected)) < 1e-6


def test_frame_guided_pool_gradients():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        pool = FrameGuidedPool(fcfg(), Init(seed, np.float64))
        v = tokens3d(rng, grad=True)
        p1, p2 = rng.standard_normal((2, 2, D)), rng.standard_normal(D)

        def loss():
            out = pool(v)
            return proj_loss((out.tokens, p1), (out.class_token, p2))

        inputs = {"tokens": v.tokens, "cls": v.class_token, "time_pos": pool.time_pos,
                  "wk": pool.block.attn.k.weight}
        errs = check_gradients(loss, inputs)
        assert max(errs.values()) < 1e-5, (seed, errs)


def test_dual_attention_gradients():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        dual = DualAttention(fcfg(), Init(seed, np.float64))
        img = tokens2d(rng, 2, 3, grad=True)
        pooled = mean_pool(tokens3d(rng, 2, 2, 2, grad=True))
        ps = [rng.standard_normal(s) for s in [(2, 3, D), (2, 2, D), (D,)]]

        def loss():
            out = dual(img, pooled)
            return proj_loss((out.image, ps[0]), (out.video, ps[1]), (out.class_fused, ps[2]))

        errs = check_gradients(loss, {"img": img.tokens, "img_cls": img.class_token,
                                      "wv": dual.video_guided.attn.v.weight})
        assert max(errs.values()) < 1e-5, (seed, errs)


def test_dual_attention_uses_original_inputs(rng):
    """Each direction sees the other modality before its own refinement."""
    dual = DualAttention(fcfg(), Init(1, np.float64))
    img = tokens2d(rng, 2, 2)
    pooled = mean_pool(tokens3d(rng, 2, 2, 2))
    out = dual(img, pooled)
    vid_only, _ = dual.video_guided(
        Tensor(np.concatenate([pooled.class_token.data[None], pooled.tokens.data.reshape(4, D)])),
        Tensor(np.concatenate([img.class_token.data[None], img.tokens.data.reshape(4, D)])),
    )
    assert np.allclose(out.video.data.reshape(4, D), vid_only.data[1:], atol=1e-12)


def test_dual_attention_branches_are_isolated(rng):
    dual = DualAttention(fcfg(), Init(1, np.float64))
    img, pooled = tokens2d(rng, 2, 2), mean_pool(tokens3d(rng, 2, 2, 2))
    before = dual(img, pooled)
    for p in dual.image_guided.parameters():
        p.data += 0.5
    after = dual(img, pooled)
    assert np.array_equal(before.video.data, after.video.data)
    assert not np.allclose(before.image.data, after.image.data)


def test_every_fusion_parameter_gets_gradient(rng):
    cfg = fcfg()
    init = Init(4, np.float64)
    pool, dual, fuse = FrameGuidedPool(cfg, init), DualAttention(cfg, init), PyramidFusion(cfg, init, (4, 4))
    img, vid = tokens2d(rng), tokens3d(rng, h=4, w=4)
    levels = fuse(dual(img, pool(vid))).levels
    loss = proj_loss(*[(lvl, rng.standard_normal(lvl.shape)) for lvl in levels])
    loss.backward()
    for module in (pool, dual, fuse):
        for p in module.parameters():
            assert p.grad is not None and np.any(p.grad != 0)


def test_dual_attention_width_mismatch(rng):
    dual = DualAttention(fcfg(), Init(0))
    with pytest.raises(DimensionError):
        dual(tokens2d(rng, d=D), mean_pool(tokens3d(rng, d=6)))


def test_zero_init_fusion_stack_is_identity(rng):
    cfg = fcfg(zero_init_out=True)
    init = Init(2)
    pool, dual = FrameGuidedPool(cfg, init), DualAttention(cfg, init)
    img = TokenSet2D(Tensor(rng.standard_normal((2, 2, D)).astype(np.float32)),
                     Tensor(rng.standard_normal(D).astype(np.float32)))
    vid = TokenSet3D(Tensor(rng.standard_normal((3, 2, 2, D)).astype(np.float32)),
                     Tensor(rng.standard_normal(D).astype(np.float32)))
    out = dual(img, pool(vid))
    assert np.array_equal(out.image.data, img.tokens.data)
    assert np.array_equal(out.video.data, vid.tokens.data[-1])
    assert np.array_equal(out.class_fused.data, img.class_token.data + vid.class_token.data)


def test_sum_fusion_without_video(rng):
    img = tokens2d(rng)
    out = sum_fusion(img, None)
    assert out.video is None and out.class_fused is img.class_token


def test_pyramid_shapes_and_errors():
    assert pyramid_shapes((8, 8), 3) == [(8, 8), (4, 4), (2, 2)]
    with pytest.raises(ConfigurationError):
        pyramid_shapes((2, 2), 3)


def test_identity_pyramid_level0_reproduces_sum(rng):
    fuse = PyramidFusion(fcfg(), Init(0, np.float64), (4, 4))
    img, vid = rng.standard_normal((4, 4, D)), rng.standard_normal((4, 4, D))
    refined = RefinedTokens(Tensor(img), Tensor(vid), Tensor(np.zeros(D)), None, Tensor(np.zeros(D)))
    levels = fuse(refined).levels
    assert [lvl.shape for lvl in levels] == [(4, 4, D), (2, 2, D), (1, 1, D)]
    assert np.allclose(levels[0].data, img + vid, atol=1e-12)
    # a constant map survives downsampling unchanged (away from the zero padding)
    const = RefinedTokens(Tensor(np.ones((4, 4, D))), None, Tensor(np.zeros(D)), None, Tensor(np.zeros(D)))
    assert np.allclose(fuse(const).levels[2].data, 1.0)


def test_pyramid_gradients():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        fuse = PyramidFusion(fcfg(), Init(seed, np.float64), (4, 4))
        fuse.weight.data += 0.1 * rng.standard_normal(fuse.weight.shape)
        img = Tensor(rng.standard_normal((4, 4, D)), requires_grad=True)
        vid = Tensor(rng.standard_normal((2, 2, D)), requires_grad=True)
        ps = [rng.standard_normal(s) for s in [(4, 4, D), (2, 2, D), (1, 1, D)]]

        def loss():
            refined = RefinedTokens(img, vid, Tensor(np.zeros(D)), None, Tensor(np.zeros(D)))
            return proj_loss(*zip(fuse(refined).levels, ps))

        errs = check_gradients(loss, {"img": img, "vid": vid, "w": fuse.weight, "b": fuse.bias}, max_coords=40)
        assert max(errs.values()) < 1e-5, (seed, errs)


# ----------------------------------------------------------------------
# head


def hcfg(**kw):
    base = dict(d=D, num_nouns=3, num_verbs=2, hidden=8, levels=3)
    base.update(kw)
    return HeadConfig(**base)


def random_raw(rng, cfg, shapes=((4, 4), (2, 2), (1, 1)), scale=2.0):
    return [rng.standard_normal((h, w, cfg.channels)) * scale for h, w in shapes]


def test_decode_matches_oracle():
    for seed in range(30):
        rng = np.random.default_rng(seed)
        cfg = hcfg(score_threshold=0.3, max_detections=6)
        raw = random_raw(rng, cfg)
        got = decode(raw, cfg)
        ref = decode_oracle(raw, 3, 2, 0.3, 0.5, 6)
        assert len(got) == len(ref)
        for p, (score, box, noun, verb, ttc, cell) in zip(got, ref):
            assert p.cell == cell
            assert p.noun == noun and p.verb == verb
            assert abs(p.score - score) < 1e-12 and abs(p.ttc - ttc) < 1e-12
            assert np.allclose(p.box, box, atol=1e-12)


def test_decoded_box_centre_stays_in_cell():
    rng = np.random.default_rng(0)
    cfg = hcfg(score_threshold=0.0, nms_iou=1.0, max_detections=1000)
    raw = random_raw(rng, cfg, scale=30.0)
    for p in decode(raw, cfg):
        lvl, r, c = p.cell
        h, w = raw[lvl].shape[:2]
        assert 0.0 <= p.box[0] <= p.box[2] <= 1.0 and 0.0 <= p.box[1] <= p.box[3] <= 1.0
        assert np.isclose(p.noun_probs.sum(), 1.0) and p.ttc > 0


def test_nms_is_greedy_and_strict():
    def pred(box, score):
        return STAPrediction(box, np.ones(2) / 2, np.ones(2) / 2, 1.0, score, (0, 0, int(score * 100)))

    a = pred((0.0, 0.0, 0.5, 0.5), 0.9)
    b = pred((0.0, 0.0, 0.5, 0.5), 0.8)  # duplicate of a
    c = pred((0.0, 0.0, 0.5, 1.0), 0.7)  # IoU exactly 0.5 with a: kept
    d = pred((0.6, 0.6, 1.0, 1.0), 0.6)
    assert box_iou(a.box, c.box) == 0.5
    assert nms([d, c, b, a], 0.5) == [a, c, d]


def test_box_iou_against_scalar(rng):
    for _ in range(200):
        a = np.sort(rng.random(4).reshape(2, 2), axis=0).T.reshape(-1)[[0, 2, 1, 3]]
        b = np.sort(rng.random(4).reshape(2, 2), axis=0).T.reshape(-1)[[0, 2, 1, 3]]
        assert abs(box_iou(a, b) - iou_scalar(a, b)) < 1e-12


def test_encode_box_round_trip():
    cfg = hcfg(score_threshold=0.0)
    box = (0.30, 0.40, 0.55, 0.72)
    for h, w in [(4, 4), (2, 2), (1, 1)]:
        r, c = assign_cell(box, h, w)
        raw = np.full((h, w, cfg.channels), -20.0)
        raw[r, c, 1:5] = encode_box(box, r, c, h, w)
        raw[r, c, 0] = 5.0
        p = decode([raw], hcfg(levels=1, score_threshold=0.5))[0]
        assert np.allclose(p.box, box, atol=1e-9)


def test_ground_truth_validation():
    with pytest.raises(ValidationError):
        GroundTruthInstance((0.5, 0.5, 0.4, 0.6), 0, 0, 1.0)
    with pytest.raises(ValidationError):
        GroundTruthInstance((0.1, 0.1, 0.4, 0.6), 0, 0, 0.0)


def test_prediction_json_round_trip():
    p = STAPrediction((0.1, 0.2, 0.3, 0.4), np.array([0.2, 0.8]), np.array([0.6, 0.4]), 0.7, 0.55, (1, 0, 1))
    q = STAPrediction.from_json(p.to_json(3))
    assert q.box == p.box and np.array_equal(q.noun_probs, p.noun_probs) and q.score == p.score


def pyramid(rng, shapes=((4, 4), (2, 2), (1, 1)), batch=None, grad=False):
    lead = () if batch is None else (batch,)
    levels = [Tensor(rng.standard_normal((*lead, h, w, D)), requires_grad=grad) for h, w in shapes]
    return FeaturePyramid(levels, Tensor(rng.standard_normal((*lead, D)), requires_grad=grad))


def gts():
    return [GroundTruthInstance((0.1, 0.2, 0.45, 0.6), 1, 0, 0.8), GroundTruthInstance((0.5, 0.5, 0.9, 0.8), 2, 1, 1.6)]


def test_head_shapes_and_zero_init(rng):
    head = DetectionHead(hcfg(), Init(0, np.float64))
    raw = head(pyramid(rng))
    assert [r.shape for r in raw] == [(4, 4, 11), (2, 2, 11), (1, 1, 11)]
    # fc2 starts at zero: every cell emits the (zero) bias
    assert np.all(raw[0].data == 0.0)


def test_head_and_loss_gradients():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        head = DetectionHead(hcfg(zero_init=False), Init(seed, np.float64))
        pyr = pyramid(rng, grad=True)

        def loss():
            return sta_loss(head(pyr), gts(), head.cfg)

        inputs = {"lvl0": pyr.levels[0], "cls": pyr.class_token, "fc2": head.mlp.fc2.weight,
                  "ctx": head.context.weight}
        errs = check_gradients(loss, inputs, max_coords=60, seed=seed)
        assert max(errs.values()) < 1e-5, (seed, errs)


def test_loss_batched_equals_mean_of_singles(rng):
    head = DetectionHead(hcfg(zero_init=False), Init(1, np.float64))
    pyr = pyramid(rng, batch=2)
    targets = [gts(), gts()[:1]]
    batched = float(sta_loss(head(pyr), targets, head.cfg).data)
    singles = []
    for b in range(2):
        one = FeaturePyramid([lvl[b] for lvl in pyr.levels], pyr.class_token[b])
        singles.append(float(sta_loss(head(one), targets[b], head.cfg).data))
    assert np.isclose(batched, np.mean(singles), rtol=1e-12)


def test_loss_terms_and_perfect_raw_minimum():
    cfg = hcfg()
    gt = gts()
    shapes = [(4, 4), (2, 2), (1, 1)]
    raw = []
    for h, w in shapes:
        r = np.zeros((h, w, cfg.channels))
        r[..., 0] = -30.0
        raw.append(r)
    for lvl, (h, w) in enumerate(shapes):
        for g in gt:
            r, c = assign_cell(g.box, h, w)
            if raw[lvl][r, c, 0] > 0:
                continue
            raw[lvl][r, c, 0] = 30.0
            raw[lvl][r, c, 1:5] = encode_box(g.box, r, c, h, w)
            raw[lvl][r, c, 5 + g.noun] = 30.0
            raw[lvl][r, c, 5 + cfg.num_nouns + g.verb] = 30.0
            raw[lvl][r, c, -1] = np.log(np.expm1(g.ttc - 1e-3))
    total, terms = sta_loss([Tensor(r) for r in raw], gt, cfg, return_terms=True)
    assert set(terms) == {"objectness", "box", "noun", "verb", "ttc"}
    assert float(total.data) < 1e-6


def test_loss_rejects_bad_targets(rng):
    head = DetectionHead(hcfg(), Init(0, np.float64))
    raw = head(pyramid(rng))
    bad = GroundTruthInstance.__new__(GroundTruthInstance)
    object.__setattr__(bad, "box", (0.1, 0.1, 0.2, 0.2))
    object.__setattr__(bad, "noun", 0)
    object.__setattr__(bad, "verb", 0)
    object.__setattr__(bad, "ttc", -1.0)
    with pytest.raises(ValidationError):
        sta_loss(raw, [bad], head.cfg)
    with pytest.raises(ValidationError):
        sta_loss([r.reshape(1, *r.shape) for r in raw], [[], []], head.cfg)
