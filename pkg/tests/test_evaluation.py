import numpy as np
import pytest

from svis import data as D
from svis import evaluation as E


def two_track_video(t_n=4):
    masks = np.zeros((t_n, 2, 8, 8), bool)
    for t in range(t_n):
        masks[t, 0, 0:3, t:t + 3] = True
        masks[t, 1, 5:8, 4:7] = True
    return D.VideoAnnotations(np.array([1, 2]), np.array([1, 1]), masks)


def perfect(ann, score=0.9):
    return [{"label": int(ann.classes[k]), "score": score, "masks": [m for m in ann.masks[:, k]]}
            for k in range(len(ann.ids))]


def test_perfect_predictions():
    ann = two_track_video()
    rep = E.evaluate_ap({"v": perfect(ann)}, {"v": ann})
    assert (rep.ap, rep.ap50, rep.ap75, rep.ar1, rep.ar10) == (1.0, 1.0, 1.0, 0.5, 1.0)


def test_no_predictions():
    ann = two_track_video()
    rep = E.evaluate_ap({}, {"v": ann})
    assert rep.ap == rep.ap50 == rep.ap75 == rep.ar1 == rep.ar10 == 0.0


def test_half_perfect_hand_value():
    # one of two gt tracks found: precision 1 up to recall 0.5, so 51 of 101 recall points score 1
    ann = two_track_video()
    rep = E.evaluate_ap({"v": perfect(ann)[:1]}, {"v": ann})
    assert rep.ap50 == pytest.approx(51 / 101, abs=1e-12)
    assert rep.ap == pytest.approx(51 / 101, abs=1e-12)


def test_wrong_label_is_false_positive():
    ann = two_track_video()
    preds = perfect(ann)
    preds[1]["label"] = 2
    rep = E.evaluate_ap({"v": preds}, {"v": ann})
    assert rep.ap50 == pytest.approx(51 / 101, abs=1e-12)


def test_prediction_order_invariance():
    ann = two_track_video()
    preds = perfect(ann, 0.5) + [{"label": 1, "score": 0.5, "masks": [np.ones((8, 8), bool)] * 4}]
    a = E.evaluate_ap({"v": preds}, {"v": ann})
    b = E.evaluate_ap({"v": preds[::-1]}, {"v": ann})
    assert a == b


def test_split_track_decreases_ap():
    ann = two_track_video()
    whole = perfect(ann)
    first, second = dict(whole[0]), dict(whole[0])
    first["masks"] = whole[0]["masks"][:2] + [None, None]
    second["masks"] = [None, None] + whole[0]["masks"][2:]
    split = [first, second, whole[1]]
    assert E.evaluate_ap({"v": split}, {"v": ann}).ap < E.evaluate_ap({"v": whole}, {"v": ann}).ap


def test_video_iou_sums_over_frames():
    p = np.zeros((2, 2, 2), bool)
    g = np.zeros((2, 2, 2), bool)
    p[0, 0, 0] = g[0, 0, 0] = True
    g[1] = True
    assert E.video_iou(p, g) == pytest.approx(1 / 5)


def test_identity_switches():
    ann = two_track_video()
    masks = [m for m in ann.masks[:, 0]]
    tracks = [{"track_id": 1, "masks": masks[:2] + [None, None]},
              {"track_id": 2, "masks": [None, None] + masks[2:]}]
    assert E.count_identity_switches(tracks, ann) == 1
    assert E.count_identity_switches([{"track_id": 1, "masks": masks}], ann) == 0


def test_report_row_formatting():
    rep = E.APReport(1.0, 0.5, 0.25, 0.0, 0.123)
    assert rep.row().split() == ["100.0", "50.0", "25.0", "0.0", "12.3"]
