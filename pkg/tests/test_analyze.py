import csv

import numpy as np
import pytest

from hypsep import analyze, nn, train

from .conftest import TINY_ENCODER


def _samples(conds_and_norms):
    conds, norms = [], []
    for c, vals in conds_and_norms.items():
        conds += [c] * len(vals)
        norms += list(vals)
    n = len(norms)
    return analyze.NormSamples(np.full(n, "s"), np.arange(n), np.zeros(n, int), np.array(norms), np.array(conds))


@pytest.mark.parametrize("means, rho, passed", [
    ([0.1, 0.2, 0.3, 0.4], 1.0, True),
    ([0.4, 0.3, 0.2, 0.1], -1.0, False),
    ([0.1, 0.3, 0.2, 0.4], 0.8, True),
])
def test_trend_test_values(means, rho, passed):
    rep = analyze.trend_test(means)
    assert rep.rho == pytest.approx(rho)
    assert rep.passed is passed and rep.sign == np.sign(rho) and rep.n_conditions == len(means)


def test_trend_test_with_mapping_and_too_few():
    rep = analyze.trend_test({"b": 2.0, "a": 1.0, "c": 3.0}, order=["a", "b", "c"])
    assert rep.rho == pytest.approx(1.0)
    with pytest.raises(ValueError):
        analyze.trend_test([1.0, 2.0])


def test_histograms_are_area_normalized():
    rng = np.random.default_rng(0)
    s = _samples({"a": rng.uniform(0, 0.5, 500), "b": rng.uniform(0.4, 0.9, 300)})
    edges, hists, summary = analyze.histogram_by_condition(s, bins=12)
    width = np.diff(edges)
    for h in hists.values():
        assert np.sum(h * width) == pytest.approx(1.0)
    assert [x.condition for x in summary] == ["a", "b"]
    assert summary[0].count == 500 and summary[1].mean > summary[0].mean


def test_empty_condition_warns():
    s = _samples({"a": [0.1, 0.2]})
    with pytest.warns(analyze.EmptyConditionWarning):
        _, hists, summary = analyze.histogram_by_condition(s, conditions=["a", "z"])
    assert summary[1].count == 0 and not hists["z"].any()
    with pytest.raises(ValueError):
        analyze.histogram_by_condition(_samples({}))


def test_condition_tags():
    assert analyze.condition_tag({"condition": {"relative_distance": 0.4}}) == "0.40"
    assert analyze.condition_tag({"condition": {"mic_distance": 0.2}}) == "0.20"
    assert analyze.condition_tag({"condition": {"density": "2,1"}, "density": [2, 1]}) == "2,1"


def test_collect_norms_on_probe(tiny_checkpoint, tiny_probes, tmp_path):
    eq, _ = tiny_probes
    s = analyze.collect_norms(tiny_checkpoint.checkpoint, eq)
    assert len(s) > 0
    assert set(s.condition) == {"0.00", "0.60", "1.20"}
    assert np.all(s.norm < analyze.manifold_bound(1.0))
    assert set(np.unique(s.source)) <= {0, 1}
    edges, hists, summary = analyze.histogram_by_condition(s)
    rows = list(csv.reader(open(analyze.write_histograms(tmp_path / "h.csv", edges, hists))))
    assert rows[0] == ["condition", "bin_left", "bin_right", "density_value"]
    assert len(rows) == 1 + 3 * (len(edges) - 1)
    analyze.write_summary(tmp_path / "s.csv", summary)
    model = nn.load_checkpoint(tiny_checkpoint.checkpoint)[0]
    pts = analyze.write_points(tmp_path / "p.csv", model, eq.scenes[0], eq.root, 16000, max_points=50)
    assert len(list(csv.reader(open(pts)))) == 51


def test_energy_floor_drops_quiet_bins(tiny_checkpoint, tiny_probes):
    eq, _ = tiny_probes
    model = nn.load_checkpoint(tiny_checkpoint.checkpoint)[0]
    loose = analyze.scene_norms(model, eq.scenes[0], eq.root, 16000, floor_db=-200)
    tight = analyze.scene_norms(model, eq.scenes[0], eq.root, 16000, floor_db=-20)
    assert len(tight) < len(loose)


def test_euclidean_checkpoint_rejected(tiny_data, tiny_probes, tmp_path):
    _, mans = tiny_data
    cfg = nn.ModelConfig(encoder=TINY_ENCODER, c=0.0, levels="parent")
    res = train.train_run(cfg, mans["train"], tmp_path, None, train.TrainConfig(epochs=1))
    with pytest.raises(analyze.EuclideanCheckpointError):
        analyze.collect_norms(res.checkpoint, tiny_probes[0])
