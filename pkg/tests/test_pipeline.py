import json
from pathlib import Path

import numpy as np
import pytest

from staformer.affordance import AffordanceConfig
from staformer.autodiff.serialize import load_tensor
from staformer.config import PipelineConfig, ablation_config, config_from_dict, load_config
from staformer.errors import ConfigurationError, IncompatibleCheckpointError, NumericError, ValidationError
from staformer.head import decode
from staformer.hotspot import HandObjectTracks, TrackFrame
from staformer.pipeline import (
    STAformer,
    build_affordance_db,
    dump_stages,
    load_checkpoint,
    predict_dataset,
    run_pipeline,
    run_pipeline_full,
    learning_rate,
    save_checkpoint,
    train_toy,
)
from staformer.synthetic import (
    DatasetSpec,
    generate_dataset,
    load_dataset,
    save_dataset,
    scene_nouns,
)

GOLDEN = Path(__file__).parent / "golden"


@pytest.fixture(scope="module")
def data():
    return generate_dataset(DatasetSpec(num_scenarios=24), 7)


def short_cfg(row="E", steps=5):
    cfg = ablation_config(row)
    cfg.train.steps = steps
    return cfg


# ----------------------------------------------------------------------
# synthetic data

def test_dataset_is_deterministic(data):
    again = generate_dataset(DatasetSpec(num_scenarios=24), 7)
    for a, b in zip(data, again):
        assert np.array_equal(a.video, b.video) and np.array_equal(a.image, b.image)
        assert a.gt == b.gt and a.narration == b.narration


def test_dataset_round_trip(tmp_path, data):
    spec = DatasetSpec(num_scenarios=24)
    save_dataset(data, tmp_path, spec, 7)
    back, spec2, seed = load_dataset(tmp_path)
    assert spec2 == spec and seed == 7
    for a, b in zip(data, back):
        assert np.array_equal(a.video, b.video) and a.gt == b.gt and a.tracks == b.tracks


def test_scenario_contract(data):
    for s in data:
        assert s.video.shape == (4, 32, 32, 3) and s.video.dtype == np.float32
        assert s.image.shape == (64, 64, 3)
        assert np.array_equal(s.image[::2, ::2], s.video[-1])
        (g,) = s.gt
        assert g.noun in scene_nouns(s.scene_id, 6)
        assert g.ttc > 0 and len(s.tracks.frames) == 4


def test_noun_classes_are_balanced():
    # 3000 draws put the 20% band at about 5 binomial standard deviations
    n = 3000
    scen = generate_dataset(DatasetSpec(num_scenarios=n), 11)
    counts = np.bincount([s.gt[0].noun for s in scen], minlength=6)
    assert np.all(np.abs(counts - n / 6) <= 0.2 * n / 6), counts


def test_static_verb_keeps_hand_still():
    scen = generate_dataset(DatasetSpec(num_scenarios=60), 3)
    for s in scen:
        hands = [f.hands[0] for f in s.tracks.frames]
        still = all(h == hands[0] for h in hands)
        assert still == (s.gt[0].verb == 0)


def test_opposite_swings_visit_the_same_positions():
    scen = generate_dataset(DatasetSpec(num_scenarios=80), 5)
    for s in scen:
        if s.gt[0].verb in (1, 2):
            xs = [f.hands[0][0] for f in s.tracks.frames]
            # last frame is the centre, the swing reaches both sides
            assert min(xs) < xs[-1] < max(xs)


def test_spec_validation():
    with pytest.raises(ConfigurationError):
        DatasetSpec(num_nouns=20).validate()
    with pytest.raises(ConfigurationError):
        DatasetSpec(num_verbs=9).validate()


# ----------------------------------------------------------------------
# config

def test_config_rejects_unknown_keys(tmp_path):
    with pytest.raises(ConfigurationError):
        config_from_dict({"head": {"num_nounz": 3}})
    p = tmp_path / "c.yaml"
    p.write_text("train:\n  lr: 0.01\n")
    assert load_config(p).train.lr == 0.01


def test_ablation_rows():
    assert not ablation_config("A").use_video
    assert ablation_config("B").fusion.pooling == "mean"
    assert ablation_config("C").fusion.pooling == "frame_guided"
    assert ablation_config("D").fusion.fusion == "dual" and not ablation_config("D").fusion.use_multi_head
    assert ablation_config("E").fusion.use_multi_head
    with pytest.raises(ConfigurationError):
        ablation_config("F")


# ----------------------------------------------------------------------
# model, training, checkpoints

def test_forward_shapes(data):
    model = STAformer(PipelineConfig())
    st = model(data[0].image, data[0].video)
    assert [r.shape[-1] for r in st.raw] == [1 + 4 + 6 + 4 + 1] * len(st.raw)
    for w in st.attention_maps():
        assert np.all(np.abs(w.sum(axis=-1) - 1) < 1e-5)


def test_training_is_seeded(data):
    a = train_toy(data, short_cfg())
    b = train_toy(data, short_cfg())
    assert a.history == b.history
    assert all(np.array_equal(a.state[k], b.state[k]) for k in a.state)
    cfg = short_cfg()
    cfg.train.seed = 1
    c = train_toy(data, cfg)
    assert c.history != a.history


def test_learning_rate_schedule():
    cfg = short_cfg(steps=110).train
    assert [learning_rate(cfg, s) for s in (0, 50, 109)] == [cfg.lr] * 3
    cfg.schedule, cfg.warmup_steps = "cosine", 10
    lrs = [learning_rate(cfg, s) for s in range(110)]
    assert lrs[0] == pytest.approx(cfg.lr / 10) and lrs[9] == pytest.approx(cfg.lr)
    assert lrs[10] == pytest.approx(cfg.lr) and lrs[60] == pytest.approx(cfg.lr / 2)
    assert all(a >= b for a, b in zip(lrs[10:], lrs[11:])) and lrs[-1] < 1e-3 * cfg.lr
    with pytest.raises(ConfigurationError):
        config_from_dict({"train": {"schedule": "linear"}})


def test_image_only_row_trains(data):
    ck = train_toy(data, short_cfg("A", steps=30))
    assert np.mean(ck.history[-5:]) < np.mean(ck.history[:5])


def test_divergence_raises_numeric_error(data):
    cfg = short_cfg(steps=3)
    model = STAformer(cfg)
    next(iter(model.parameters())).data[...] = np.nan
    with pytest.raises(NumericError):
        train_toy(data, cfg, model)


def test_empty_training_set():
    with pytest.raises(ValidationError):
        train_toy([], short_cfg())


def test_checkpoint_round_trip(tmp_path, data):
    ck = train_toy(data, short_cfg(steps=2))
    save_checkpoint(ck, tmp_path / "ck")
    back = load_checkpoint(tmp_path / "ck")
    assert back.history == ck.history
    m1, m2 = ck.build_model(), back.build_model()
    r1 = m1(data[0].image, data[0].video).raw[0].data
    r2 = m2(data[0].image, data[0].video).raw[0].data
    assert np.array_equal(r1, r2)


def test_incompatible_checkpoint(tmp_path, data):
    ck = train_toy(data, short_cfg(steps=1))
    other = ck.config.copy()
    other.head.num_nouns = 3
    with pytest.raises(IncompatibleCheckpointError):
        ck.build_model(other)
    save_checkpoint(ck, tmp_path / "ck")
    manifest = json.loads((tmp_path / "ck" / "manifest.json").read_text())
    manifest["format_version"] = 99
    (tmp_path / "ck" / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(IncompatibleCheckpointError):
        load_checkpoint(tmp_path / "ck")


# ----------------------------------------------------------------------
# inference

def test_no_enhancements_is_pass_through(data):
    cfg = PipelineConfig()
    model = STAformer(cfg)
    out = run_pipeline_full(data[0], cfg, model)
    expected = decode(out.stages.raw, cfg.head)
    assert [p.box for p in out.predictions] == [p.box for p in expected]
    assert [p.score for p in out.predictions] == [p.score for p in expected]


def test_hotspot_without_tracks_is_pass_through(data):
    cfg = PipelineConfig()
    cfg.hotspot.enabled = True
    model = STAformer(cfg)
    s = data[0]
    s_blank = type(s)(**{**s.__dict__, "tracks": HandObjectTracks([TrackFrame() for _ in range(4)])})
    plain = run_pipeline(s, PipelineConfig(), model)
    got = run_pipeline(s_blank, cfg, model)
    assert [p.score for p in got] == [p.score for p in plain]


def test_affordance_requires_database(data):
    cfg = PipelineConfig()
    cfg.affordance.enabled = True
    with pytest.raises(ValidationError):
        run_pipeline(data[0], cfg, STAformer(cfg))


def test_batched_prediction_matches_single(data):
    cfg = PipelineConfig()
    cfg.hotspot.enabled = True
    cfg.affordance = AffordanceConfig(enabled=True, num_zones=4)
    model = STAformer(cfg)
    db = build_affordance_db(model, data, cfg)
    batched = predict_dataset(model, data[:5], cfg, db)
    for s in data[:5]:
        single = run_pipeline(s, cfg, model, db)
        assert len(single) == len(batched[s.scenario_id])
        for a, b in zip(single, batched[s.scenario_id]):
            assert np.allclose(a.box, b.box, atol=1e-5) and abs(a.score - b.score) < 1e-5
            assert a.noun == b.noun and a.verb == b.verb


def _golden_output():
    cfg = PipelineConfig()
    cfg.hotspot.enabled = True
    scen = generate_dataset(DatasetSpec(num_scenarios=1), 42)[0]
    return run_pipeline_full(scen, cfg, STAformer(cfg))


def test_stage_dump_matches_golden(tmp_path):
    names = dump_stages(_golden_output(), tmp_path)
    assert sorted(p.name for p in GOLDEN.iterdir()) == sorted(names)
    for name in names:
        if name.endswith(".stat"):
            a, b = load_tensor(tmp_path / name), load_tensor(GOLDEN / name)
            assert a.dtype == b.dtype and np.array_equal(a, b), name
        else:
            assert (tmp_path / name).read_bytes() == (GOLDEN / name).read_bytes()


if __name__ == "__main__":
    # regenerate the golden files after an intentional numerical change
    GOLDEN.mkdir(exist_ok=True)
    for f in GOLDEN.iterdir():
        f.unlink()
    print(dump_stages(_golden_output(), GOLDEN))
