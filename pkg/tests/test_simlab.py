import math

import numpy as np
import pytest

from visanchor.anchor import select_optimal
from visanchor.codecode import FusionConfig
from visanchor.errors import ConfigError
from visanchor.respmap import image_response_map
from visanchor.simlab import (
    GeneratorConfig,
    Policy,
    evaluate,
    gen_instance,
    run_policy_compare,
    run_replacement,
    run_retention_sweep,
    run_submergence,
    run_sweep,
    run_text_selection,
    toy_answer,
)
from visanchor.tensorio import save_instance

# signal exactly along the caption direction, nothing else in the field
CLEAN = dict(signal_strength=1.0, noise_sigma=0.0, clutter_tokens=0, caption_noise=0.0, question_noise=0.0)


def _dir_bytes(path):
    return {p.name: p.read_bytes() for p in sorted(path.iterdir())}


# ---------------------------------------------------------------- generator


def test_same_seed_and_index_give_identical_bytes(tmp_path):
    cfg = GeneratorConfig(seed=11, distractor_kind="noise")
    a = save_instance(gen_instance(cfg, 3).bundle, tmp_path / "a")
    b = save_instance(gen_instance(cfg, 3).bundle, tmp_path / "b")
    assert _dir_bytes(a) == _dir_bytes(b)
    c = save_instance(gen_instance(cfg, 4).bundle, tmp_path / "c")
    assert _dir_bytes(a) != _dir_bytes(c)


def test_noise_free_hotspot_is_parallel_to_caption():
    cfg = GeneratorConfig(distractor_images=0, **CLEAN)
    inst = gen_instance(cfg, 0)
    for i, box in zip(inst.relevant, inst.hotspot_boxes):
        m = image_response_map(inst.bundle, i).scores
        inside = np.zeros_like(m, dtype=bool)
        inside[box.top : box.bottom + 1, box.left : box.right + 1] = True
        np.testing.assert_allclose(m[inside], 1.0, atol=1e-6)
        np.testing.assert_allclose(m[~inside], 0.0, atol=1e-12)


def test_blank_distractors_are_all_zero():
    inst = gen_instance(GeneratorConfig(distractor_images=3), 0)
    blanks = [img for i, img in enumerate(inst.bundle.images) if i not in inst.relevant]
    assert len(blanks) == 3
    for img in blanks:
        assert not img.tokens.any()
        assert img.caption is None


def test_blank_count_does_not_perturb_other_tensors():
    a = gen_instance(GeneratorConfig(distractor_images=0), 5)
    b = gen_instance(GeneratorConfig(distractor_images=4), 5)
    assert a.ground_truth == b.ground_truth
    assert a.hotspot_boxes == b.hotspot_boxes
    np.testing.assert_array_equal(a.bundle.question, b.bundle.question)
    for x, y in zip(a.bundle.images, b.bundle.images):
        assert x == y


def test_hotspot_boxes_respect_configured_sizes():
    cfg = GeneratorConfig(grid_u=6, grid_v=5, hotspot_w=(2, 4), hotspot_h=(1, 3))
    for idx in range(30):
        for box in gen_instance(cfg, idx).hotspot_boxes:
            assert 2 <= box.width <= 4 and 1 <= box.height <= 3
            assert 0 <= box.left and box.right < 6 and 0 <= box.top and box.bottom < 5


@pytest.mark.parametrize(
    "bad",
    [
        dict(signal_strength=0.0),
        dict(options=1),
        dict(dim=4, options=4),
        dict(distractor_kind="grey"),
        dict(replaced_confusers=1),
        dict(distractor_kind="noise", distractor_images=2, replaced_confusers=3),
        dict(hotspot_w=(3, 5)),
        dict(relevant_images=0, distractor_images=0),
        dict(seed=-1),
        dict(rectify="abs"),
        dict(clutter_tokens=8),
    ],
)
def test_invalid_configs_raise(bad):
    with pytest.raises(ConfigError):
        GeneratorConfig(**bad)


def test_config_json_round_trip_and_unknown_keys():
    cfg = GeneratorConfig(seed=3, hotspot_w=(1, 2))
    assert GeneratorConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        GeneratorConfig.from_dict({"seed": 1, "signal": 0.5})


def test_negative_index_rejected():
    with pytest.raises(ConfigError):
        gen_instance(GeneratorConfig(), -1)


# ---------------------------------------------------------------- toy scorer


def test_noise_free_full_policy_finds_answer():
    cfg = GeneratorConfig(distractor_images=0, **CLEAN)
    for idx in range(20):
        inst = gen_instance(cfg, idx)
        assert toy_answer(inst, Policy.full()) == inst.ground_truth


def test_anchor_undoes_blank_dilution_by_hand():
    # one 2x2 hotspot, six blank 4x4 images: the visual ground-truth score is
    # (hotspot cells * cos(answer, content)) / retained tokens
    cfg = GeneratorConfig(relevant_images=1, distractor_images=6, hotspot_w=(2, 2), hotspot_h=(2, 2), **CLEAN)
    inst = gen_instance(cfg, 0)
    gt = inst.ground_truth
    cos_gt = 1 / math.sqrt(2)  # answer vs normalize(category + answer)

    full = evaluate(inst, Policy.full())
    assert full.retained == 112
    assert full.scores[gt] == pytest.approx(4 * cos_gt / 112, abs=1e-9)

    sel = select_optimal(image_response_map(inst.bundle, 0), 0.5)
    box = inst.hotspot_boxes[0]
    assert sel.box.contains(box.left, box.top) and sel.box.contains(box.right, box.bottom)
    anc = evaluate(inst, Policy.anchor(0.5))
    # blank images are degenerate and keep the whole grid
    assert anc.retained == 96 + sel.box.area
    assert anc.scores[gt] == pytest.approx(4 * cos_gt / (96 + sel.box.area), abs=1e-9)
    assert anc.scores[gt] >= full.scores[gt]


def test_beta_one_fusion_matches_compressed_only():
    cfg = GeneratorConfig()
    one = FusionConfig(beta_override=1.0)
    lam0 = FusionConfig(lam=0.0)
    for idx in range(40):
        inst = gen_instance(cfg, idx)
        want = toy_answer(inst, Policy.anchor(0.5))
        assert toy_answer(inst, Policy.anchor(0.5), one) == want
        assert toy_answer(inst, Policy.anchor(0.5), lam0) == want


def test_beta_zero_fusion_matches_full():
    cfg = GeneratorConfig()
    zero = FusionConfig(beta_override=0.0)
    for idx in range(40):
        inst = gen_instance(cfg, idx)
        assert toy_answer(inst, Policy.anchor(0.3), zero) == toy_answer(inst, Policy.full())


def test_fused_scores_are_a_distribution():
    inst = gen_instance(GeneratorConfig(), 2)
    ev = evaluate(inst, Policy.anchor(0.5), FusionConfig())
    assert ev.scores.sum() == pytest.approx(1.0, abs=1e-12)
    assert ev.beta == pytest.approx(math.exp(-5.0 * ev.redundancy_rate))


def test_topk_policy_keeps_ceil_per_image():
    inst = gen_instance(GeneratorConfig(), 0)
    ev = evaluate(inst, Policy.topk(0.3))
    assert ev.retained == 6 * math.ceil(0.3 * 16)


def test_unknown_policy_rejected():
    with pytest.raises(ConfigError):
        evaluate(gen_instance(GeneratorConfig(), 0), Policy("random", 0.5))


# ---------------------------------------------------------------- experiments

SMALL = GeneratorConfig(instances=60)


def test_submergence_default_seed_regression():
    rep = run_submergence(GeneratorConfig(), 4)
    assert [p["x"] for p in rep.points] == [0, 1, 2, 3, 4]
    # frozen from the default seed
    assert [p["correct"] for p in rep.points] == [471, 459, 442, 418, 401]
    assert rep.accuracy(x=0) == 0.942


def test_submergence_single_point():
    rep = run_submergence(SMALL, 0)
    assert len(rep.points) == 1 and rep.points[0]["x"] == 0


def test_no_relevant_images_is_chance():
    rep = run_submergence(GeneratorConfig(relevant_images=0), 2)
    assert [p["x"] for p in rep.points] == [1, 2]
    for p in rep.points:
        # 3 sigma of a 500-draw binomial at p = 1/4
        assert abs(p["accuracy"] - 0.25) <= 3 * math.sqrt(0.25 * 0.75 / 500)
    assert rep.points[0]["correct"] == 107
    with pytest.raises(ConfigError):
        run_submergence(GeneratorConfig(relevant_images=0), 0)


def test_retention_ratio_one_equals_submergence_point():
    cfg = SMALL.replace(distractor_images=3)
    ret = run_retention_sweep(cfg, [1.0])
    sub = run_submergence(cfg, 3)
    assert len(ret.points) == 1
    assert ret.accuracy(x=1.0) == sub.accuracy(x=3)


def test_retention_always_includes_full_ratio():
    rep = run_retention_sweep(SMALL, [0.5, 0.25])
    assert [p["x"] for p in rep.points] == [1.0, 0.5, 0.25]


def test_retention_ratio_covering_hotspot_is_perfect():
    # 2x2 hotspot in a 4x4 grid: ratio 4/16 keeps exactly the hotspot
    cfg = GeneratorConfig(
        relevant_images=1, distractor_images=0, hotspot_w=(2, 2), hotspot_h=(2, 2), instances=1, **CLEAN
    )
    rep = run_retention_sweep(cfg, [0.25])
    assert rep.accuracy(x=0.25) == 1.0
    assert rep.points[-1]["retained_tokens"] == 4


@pytest.mark.parametrize("ratios", [[], [0.0], [1.5]])
def test_retention_bad_ratio_lists(ratios):
    with pytest.raises(ConfigError):
        run_retention_sweep(SMALL, ratios)


def test_retention_default_seed_regression():
    rep = run_retention_sweep(GeneratorConfig(), [0.2, 0.4, 0.6, 0.8])
    assert [(p["x"], p["correct"]) for p in rep.points] == [
        (1.0, 401),
        (0.8, 461),
        (0.6, 487),
        (0.4, 496),
        (0.2, 500),
    ]


def test_replacement_zero_is_baseline_and_all_replaced_clean_is_perfect():
    cfg = GeneratorConfig(distractor_kind="noise", instances=50, **CLEAN)
    rep = run_replacement(cfg, cfg.distractor_images)
    assert rep.points[0]["x"] == 0
    assert rep.accuracy(x=cfg.distractor_images) == 1.0
    base = run_submergence(cfg, 0)  # no confusers at all
    assert base.accuracy(x=0) == 1.0


def test_replacement_default_seed_regression():
    rep = run_replacement(GeneratorConfig(), 4)
    correct = [p["correct"] for p in rep.points]
    assert correct == [252, 298, 331, 364, 401]
    assert all(a <= b for a, b in zip(correct, correct[1:]))
    # fully replaced confusers are exactly the 4-blank submergence point
    assert rep.points[-1]["correct"] == 401


def test_replacement_bounds():
    with pytest.raises(ConfigError):
        run_replacement(SMALL, SMALL.distractor_images + 1)


def test_compare_lambda_zero_fusion_row_equals_compressed_variant():
    rep = run_policy_compare(SMALL, R=0.5, lam=0.0)
    rows = {p["label"]: p for p in rep.points}
    assert rows["anchor+cd"]["correct"] == rows["anchor"]["correct"]
    swapped = run_policy_compare(SMALL, R=0.5, lam=0.0, swap_weights=True)
    rows = {p["label"]: p for p in swapped.points}
    # swapped weights put beta = 1 on the global stream
    assert rows["anchor+cd"]["correct"] == rows["full"]["correct"]


def test_compare_R_one_anchor_equals_full():
    rows = {p["label"]: p for p in run_policy_compare(SMALL, R=1.0).points}
    assert rows["anchor"]["correct"] == rows["full"]["correct"]
    assert rows["anchor"]["retained_tokens"] == rows["full"]["retained_tokens"]
    assert rows["anchor"]["redundancy_rate"] == 0.0


def test_compare_default_seed_regression():
    rep = run_policy_compare(GeneratorConfig())
    rows = {p["label"]: p for p in rep.points}
    assert [p["label"] for p in rep.points] == ["full", "anchor", "anchor+cd", "topk"]
    assert {k: v["correct"] for k, v in rows.items()} == {"full": 401, "anchor": 428, "anchor+cd": 414, "topk": 423}
    assert rows["anchor"]["accuracy"] >= rows["full"]["accuracy"]
    assert rep.params["matched_topk_ratio"] == rows["anchor"]["retained_tokens"] / rows["anchor"]["total_tokens"]


def test_report_ratios_are_exact():
    for rep in (run_policy_compare(SMALL), run_retention_sweep(SMALL, [0.3])):
        for p in rep.points:
            assert p["compression_ratio"] == p["retained_tokens"] / p["total_tokens"]
            assert p["redundancy_rate"] == 1.0 - p["retained_tokens"] / p["total_tokens"]
            assert 0.0 <= p["accuracy"] <= 1.0
            assert p["accuracy"] == p["correct"] / p["instances"]


def test_sweep_one_row_per_grid_point():
    rep = run_sweep(SMALL, (0.1, 0.3, 0.5), (1.0, 3.0, 5.0, 7.0))
    assert len(rep.points) == 12
    assert {(p["R"], p["lambda"]) for p in rep.points} == {
        (r, l) for r in (0.1, 0.3, 0.5) for l in (1.0, 3.0, 5.0, 7.0)
    }
    assert rep.params["baseline"]["label"] == "full"
    with pytest.raises(ConfigError):
        run_sweep(SMALL, (), (5.0,))
    with pytest.raises(ConfigError):
        run_sweep(SMALL, (0.5,), (-1.0,))


def test_text_selection_rows():
    rep = run_text_selection(SMALL)
    assert [p["label"] for p in rep.points] == ["vanilla", "question-based", "caption-based"]


def test_parallel_matches_serial():
    a = run_policy_compare(SMALL, jobs=1).to_dict()
    b = run_policy_compare(SMALL, jobs=3).to_dict()
    assert a == b
