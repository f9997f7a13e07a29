import math
import random

import pytest
from hypothesis import given, strategies as st

import oracles
from cddmsl.detector import Detection
from cddmsl.evalkit import (
    EvalMismatch, ablation_table, average_precision, delta_stability, format_metrics, iou, map50,
    match_detections, read_metrics, run_protocol,
)
from cddmsl.synthdomains import ObjectInstance


# -- IoU -------------------------------------------------------------------------------

def test_iou_examples():
    assert iou((0, 0, 4, 4), (0, 0, 4, 4)) == 1.0
    assert iou((0, 0, 1, 1), (2, 2, 3, 3)) == 0.0
    assert iou((0, 0, 2, 2), (1, 1, 3, 3)) == pytest.approx(1 / 7)


def test_iou_degenerate():
    with pytest.raises(ValueError):
        iou((0, 0, 0, 2), (0, 0, 1, 1))


# -- AP ----------------------------------------------------------------------------------

GT1 = {0: [((0.0, 0.0, 10.0, 10.0), 0)]}


def test_ap_single_hit():
    assert average_precision([(0, (0, 0, 10, 10), 0, 0.9)], GT1, 0) == 1.0


def test_ap_below_threshold():
    shifted = (0.0, 0.0, 10.0, 4.0)  # inside the GT box, 40% of its area
    assert iou(shifted, (0, 0, 10, 10)) == pytest.approx(0.4)
    assert average_precision([(0, shifted, 0, 0.9)], GT1, 0) == 0.0


def test_ap_hits_at_ranks_one_and_three():
    gt = {0: [((0.0, 0.0, 10.0, 10.0), 0), ((20.0, 20.0, 30.0, 30.0), 0)]}
    dets = [(0, (0, 0, 10, 10), 0, 0.9), (0, (50, 50, 60, 60), 0, 0.8), (0, (20, 20, 30, 30), 0, 0.7)]
    got = average_precision(dets, gt, 0)
    assert got == oracles.brute_force_ap(dets, gt, 0)
    assert got == pytest.approx(0.5 * 1.0 + 0.5 * (2 / 3))


def test_ap_unknown_class():
    with pytest.raises(EvalMismatch):
        average_precision([], GT1, 7, classes=[0, 1])


def _random_case(rng, n_img=3, n_cls=2, max_gt=3, max_det=10):
    def box():
        x, y = rng.uniform(0, 40), rng.uniform(0, 40)
        return (x, y, x + rng.uniform(4, 20), y + rng.uniform(4, 20))

    gt = {i: [(box(), rng.randrange(n_cls)) for _ in range(rng.randint(0, max_gt))] for i in range(n_img)}
    dets = []
    for _ in range(rng.randint(0, max_det)):
        img = rng.randrange(n_img)
        if gt[img] and rng.random() < 0.6:
            b, c = rng.choice(gt[img])
            j = rng.uniform(-3, 3)
            dets.append((img, (b[0] + j, b[1] + j, b[2] + j, b[3] + j), c, round(rng.random(), 2)))
        else:
            dets.append((img, box(), rng.randrange(n_cls), round(rng.random(), 2)))
    return dets, gt


def test_ap_matches_brute_force_oracle():
    rng = random.Random(0)
    for case in range(200):
        dets, gt = _random_case(rng)
        for c in range(2):
            assert average_precision(dets, gt, c) == oracles.brute_force_ap(dets, gt, c), case


@given(st.integers(0, 10**6), st.floats(-5, 5))
def test_ap_score_shift_invariance(seed, shift):
    dets, gt = _random_case(random.Random(seed))
    shifted = [(i, b, c, s + shift) for i, b, c, s in dets]
    for c in range(2):
        assert average_precision(shifted, gt, c) == average_precision(dets, gt, c)


@given(st.integers(0, 10**6))
def test_matching_uniqueness(seed):
    dets, gt = _random_case(random.Random(seed))
    for c in range(2):
        m = match_detections(dets, gt, c)
        assert sum(m.tp) <= m.num_gt
        hits = [x for x in m.matched_gt if x is not None]
        assert len(hits) == len(set(hits))


@given(st.integers(0, 10**6))
def test_ap_monotone_under_new_true_positive(seed):
    rng = random.Random(seed)
    dets, gt = _random_case(rng)
    gt[0].append(((100.0, 100.0, 120.0, 120.0), 0))
    base = average_precision(dets, gt, 0)
    top = max([s for *_, s in dets], default=0.0) + 1.0
    assert average_precision(dets + [(0, (100, 100, 120, 120), 0, top)], gt, 0) >= base


@given(st.integers(0, 10**6))
def test_low_false_positive_does_not_raise_precision(seed):
    from cddmsl.evalkit import precision_recall
    dets, gt = _random_case(random.Random(seed))
    low = min([s for *_, s in dets], default=0.0) - 1.0
    before = precision_recall(match_detections(dets, gt, 0))
    after = precision_recall(match_detections(dets + [(0, (200, 200, 210, 210), 0, low)], gt, 0))
    assert after[0][: len(before[0])] == before[0]
    assert after[0][-1] <= (before[0][-1] if before[0] else 1.0)


# -- mAP -------------------------------------------------------------------------------------

def _gt_objs():
    return {0: [ObjectInstance((0, 0, 10, 10), 0), ObjectInstance((20, 20, 40, 40), 1)],
            1: [ObjectInstance((5, 5, 25, 25), 1)]}


def test_map_perfect_and_empty():
    gt = _gt_objs()
    perfect = {i: [Detection(tuple(float(v) for v in o.box), o.category, 0.9) for o in objs]
               for i, objs in gt.items()}
    assert map50(perfect, gt, [0, 1]).map == 1.0
    assert map50({}, gt, [0, 1]).map == 0.0


def test_map_two_class_toy_matches_oracle():
    gt = _gt_objs()
    dets = {0: [Detection((0.0, 0.0, 10.0, 9.0), 0, 0.6), Detection((21.0, 19.0, 40.0, 40.0), 1, 0.3)],
            1: [Detection((0.0, 0.0, 8.0, 8.0), 1, 0.8), Detection((5.0, 6.0, 25.0, 25.0), 1, 0.2)]}
    flat = [(i, d.box, d.category, d.confidence) for i in sorted(dets) for d in dets[i]]
    tgt = {i: [(tuple(map(float, o.box)), o.category) for o in objs] for i, objs in gt.items()}
    want = math.fsum(oracles.brute_force_ap(flat, tgt, c) for c in (0, 1)) / 2
    assert abs(map50(dets, gt, [0, 1]).map - want) < 1e-9


def test_map_excludes_classes_without_gt():
    gt = {0: [ObjectInstance((0, 0, 10, 10), 0)]}
    rep = map50({0: [Detection((0.0, 0.0, 10.0, 10.0), 0, 0.9), Detection((0.0, 0.0, 5.0, 5.0), 2, 0.9)]},
                gt, [0, 1, 2])
    assert set(rep.per_class_ap) == {0} and rep.map == 1.0


def test_map_errors():
    with pytest.raises(EvalMismatch):
        map50({}, {0: []}, [0])
    with pytest.raises(EvalMismatch):
        map50({5: []}, _gt_objs(), [0, 1])
    with pytest.raises(EvalMismatch):
        map50({}, _gt_objs(), [0])


# -- delta-stability ----------------------------------------------------------------------

@pytest.mark.parametrize("da,dg,delta", [(30.0, 30.0, 0.0), (40.4, 39.25, 1.15), (23.4, 23.25, 0.15)])
def test_delta_stability(da, dg, delta):
    assert delta_stability(da, dg) == pytest.approx(delta, abs=1e-9)


# -- protocols / sweeps --------------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_run():
    from cddmsl.config import from_dict
    from cddmsl.experiment import memory_data, train_experiment
    dg = from_dict({"dataset": {"counts": {"labeled": 16, "unlabeled": 6, "target": 5}},
                    "train": {"burnup_steps": 4, "joint_steps": 4, "batch_size": 4, "lr": 0.01}})
    data = memory_data(dg)
    return dg, data, train_experiment(dg, data)


def test_dg_protocol_targets(tiny_run):
    from cddmsl.experiment import evaluate
    cfg, data, state = tiny_run
    rep = evaluate(cfg, state, data)
    assert sorted(rep.per_target) == ["C", "D"]
    assert rep.map == pytest.approx((rep.per_target["C"].map + rep.per_target["D"].map) / 2)
    assert format_metrics(rep) == format_metrics(evaluate(cfg, state, data))


def _labels(data, n):
    return [[ObjectInstance(tuple(int(v) for v in b), int(c)) for b, c in zip(bx, cl)]
            for bx, cl in zip(data.train.boxes[:n], data.train.classes[:n])]


def test_da_protocol_target(tiny_run):
    cfg, data, state = tiny_run
    # stylized renders of labeled scenes carry the same boxes
    rep = run_protocol(state, "da", {"B": (data.train.aux["B"][:5], _labels(data, 5))}, sources=["A", "B"])
    assert list(rep.per_target) == ["B"]
    assert rep.protocol["protocol"] == "da"


def test_protocol_overlap_errors(tiny_run):
    cfg, data, state = tiny_run
    imgs, labels = data.targets["C"]
    with pytest.raises(EvalMismatch):
        run_protocol(state, "dg", {"A": (imgs, labels)}, sources=["A", "B"])
    with pytest.raises(EvalMismatch):
        run_protocol(state, "da", {"C": (imgs, labels)}, sources=["A", "B"])
    with pytest.raises(EvalMismatch):
        run_protocol(state, "xx", {"C": (imgs, labels)})


def test_metrics_tsv_round_trip(tiny_run, tmp_path):
    from cddmsl.experiment import evaluate
    cfg, data, state = tiny_run
    rep = evaluate(cfg, state, data)
    path = tmp_path / "m.tsv"
    path.write_text(format_metrics(rep))
    assert path.read_text().splitlines()[0] == "target\tclass\tap50"
    assert read_metrics(path)[("mean", "mAP")] == pytest.approx(100 * rep.map, abs=1e-4)


def test_ablation_sweep_order_and_all_off_equals_source_only(tiny_run):
    from cddmsl.experiment import ablation_sweep, run_cell
    from cddmsl.config import with_overrides
    cfg, data, _ = tiny_run
    off = {"train": {"use_inst": False, "use_img": False, "use_dist": False}}
    cells = [("all_off", off), ("img", {"train": {"use_inst": False, "use_dist": False}}),
             ("source_only", {"method": "source_only"}), ("full", {})]
    results = ablation_sweep(cfg, cells, data)
    assert [n for n, _ in results] == ["all_off", "img", "source_only", "full"]
    _, single = run_cell(with_overrides(cfg, {"method": "source_only"}), data)
    assert format_metrics(results[0][1]) == format_metrics(single)
    assert format_metrics(results[2][1]) == format_metrics(single)
    table = ablation_table(results).splitlines()
    assert table[0] == "cell\tC\tD\tmean" and len(table) == 5


def test_ablation_invalid_cell(tiny_run):
    from cddmsl.experiment import ablation_sweep
    cfg, data, _ = tiny_run
    with pytest.raises(ValueError, match="cell 1"):
        ablation_sweep(cfg, [("ok", {}), ("bad", {"train": {"lr": -1.0}})], data)
