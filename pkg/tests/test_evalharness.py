from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedgin.evalharness import (CSV_HEADER, ExperimentSpec, MetricRow, MetricsReport, dice_score, evaluate_volume,
                                read_metrics_csv, run_experiment, summary_markdown, write_metrics_csv)
from fedgin.fedcore import FederationConfig
from fedgin.model import UNetConfig, init_params
from fedgin.synthdata import ClientSpec, make_volume

GRID = (8, 16, 16)
TINY = UNetConfig(depth=2, base_channels=4)
FED = FederationConfig(rounds=1, batch_size=4, lr=1e-3, unet=TINY)


def _spec(strategy="federated", clients=None, **kw):
    clients = clients or (ClientSpec("a", "A", 1, 11), ClientSpec("b", "B", 1, 12))
    base = dict(clients=tuple(clients), test_volumes=1, val_volumes=0, seeds=(0,), grid=GRID, federation=FED)
    base.update(kw)
    return ExperimentSpec(strategy, **base)


# --- Dice --------------------------------------------------------------------

def test_dice_examples():
    m = np.array([[1, 1], [0, 0]])
    assert dice_score(m, m, 1) == 1.0
    assert dice_score(np.array([1, 1, 0, 0]), np.array([0, 0, 1, 1]), 1) == 0.0
    p = np.array([1, 1, 1, 1, 0, 0, 0, 0])
    t = np.array([1, 1, 0, 0, 1, 1, 0, 0])
    assert dice_score(p, t, 1) == 0.5
    assert dice_score(np.zeros(4), np.zeros(4), 2) == 1.0
    assert dice_score(np.zeros(4), np.array([0, 2, 0, 0]), 2) == 0.0
    with pytest.raises(ValueError):
        dice_score(np.zeros(3), np.zeros(4), 1)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_dice_matches_voxel_sets(seed):
    rng = np.random.default_rng(seed)
    p, t = rng.integers(0, 3, (4, 5, 6)), rng.integers(0, 3, (4, 5, 6))
    for c in (1, 2):
        ps = {tuple(i) for i in np.argwhere(p == c)}
        ts = {tuple(i) for i in np.argwhere(t == c)}
        expected = 1.0 if not ps and not ts else 2 * len(ps & ts) / (len(ps) + len(ts))
        d = dice_score(p, t, c)
        assert d == pytest.approx(expected, abs=1e-12) and 0 <= d <= 1


# --- volume evaluation -------------------------------------------------------

def _oracle_params(cfg):
    """Zero net whose head bias makes every pixel background."""
    p = init_params(cfg, np.random.default_rng(0))
    for k in p:
        if k.endswith("weight") and "bn" not in k:
            p[k][:] = 0
    p["head.bias"][:] = [5.0, 0.0, 0.0]
    return p


def test_constant_background_scores_zero():
    vol = make_volume("v", "A", 1, 0, GRID)
    scores = evaluate_volume(_oracle_params(TINY), TINY, vol.slices())
    assert scores == {1: 0.0, 2: 0.0}


def test_perfect_oracle_scores_one(monkeypatch):
    from fedgin import evalharness

    vol = make_volume("v", "A", 1, 0, GRID)
    lookup = {s.slice_index: s.mask for s in vol.slices()}

    def oracle_predict(params, cfg, slices, domain=None, batch_size=16):
        return np.stack([lookup[s.slice_index] for s in sorted(slices, key=lambda s: s.slice_index)])

    monkeypatch.setattr(evalharness, "predict_slices", oracle_predict)
    assert evalharness.evaluate_volume(None, TINY, vol.slices()[::-1]) == {1: 1.0, 2: 1.0}


def test_restacked_dice_equals_direct_3d():
    from fedgin.evalharness import predict_slices

    vol = make_volume("v", "B", 2, 0, GRID)
    p = init_params(TINY, np.random.default_rng(3))
    pred = predict_slices(p, TINY, vol.slices())
    scores = evaluate_volume(p, TINY, list(reversed(vol.slices())))
    for c in (1, 2):
        assert scores[c] == dice_score(pred, vol.labels, c)


def test_missing_slice_is_an_error():
    vol = make_volume("v", "A", 1, 0, GRID)
    sl = vol.slices()
    with pytest.raises(ValueError, match="missing"):
        evaluate_volume(init_params(TINY, np.random.default_rng(0)), TINY, sl[:3] + sl[4:])


# --- experiment specs --------------------------------------------------------

def test_spec_invariants():
    with pytest.raises(ValueError):
        _spec(seeds=())
    with pytest.raises(ValueError):
        _spec(clients=(ClientSpec("a", "A", 1, 11),))
    with pytest.raises(ValueError):
        _spec("local")
    with pytest.raises(ValueError):
        _spec("swarm")
    assert _spec(norm_mode="dsbn").method == "dsbn"
    assert _spec("local", clients=(ClientSpec("a", "B", 1, 11),)).name == "local-B"


def test_report_reproducible_and_row_count():
    spec = _spec(seeds=(0, 1), augmentation="gin")
    a, b = run_experiment(spec), run_experiment(spec)
    assert len(a.rows) == 2 * 2 * 2  # seeds x volumes (1 per modality) x classes
    assert [r.dice for r in a.rows] == [r.dice for r in b.rows]
    assert all(0 <= r.dice <= 1 for r in a.rows)


def test_centralized_single_client_equals_local():
    one = (ClientSpec("a", "A", 1, 11),)
    local = run_experiment(_spec("local", clients=one))
    central = run_experiment(_spec("centralized", clients=one))
    assert [r.dice for r in local.rows] == [r.dice for r in central.rows]


def test_aggregate_matches_rows():
    rows = [MetricRow("s", "none", "A", 1, f"v{i}", seed, d)
            for seed, ds in ((0, [0.2, 0.4]), (1, [0.6, 1.0])) for i, d in enumerate(ds)]
    mean, std, n = MetricsReport(rows).aggregate()[("s", "none", "A", 1)]
    assert mean == pytest.approx(0.55, abs=1e-9) and n == 2
    assert std == pytest.approx(np.std([0.3, 0.8]), abs=1e-12)


# --- CSV ---------------------------------------------------------------------

def test_csv_empty_report_is_header_only(tmp_path):
    path = tmp_path / "m.csv"
    write_metrics_csv(MetricsReport(), path)
    assert path.read_bytes() == (",".join(CSV_HEADER) + "\n").encode()


def test_csv_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    rows = [MetricRow("federated", "gin", m, c, f"t{m}-{i}", s, float(rng.random()))
            for m in "AB" for c in (1, 2) for i in range(3) for s in (0, 1)]
    path = tmp_path / "m.csv"
    write_metrics_csv(MetricsReport(rows), path)
    raw = path.read_bytes()
    assert b"\r\n" not in raw and raw.count(b"\n") == len(rows) + 1
    back = read_metrics_csv(path)
    assert [(r.strategy, r.augmentation, r.modality, r.cls, r.volume_id, r.seed, r.dice) for r in back.rows] == \
        [(r.strategy, r.augmentation, r.modality, r.cls, r.volume_id, r.seed, r.dice) for r in rows]


def test_csv_unwritable_path(tmp_path):
    with pytest.raises(OSError):
        write_metrics_csv(MetricsReport(), tmp_path / "missing" / "m.csv")


def test_summary_flags_both_empty():
    rows = [MetricRow("s", "none", "A", 2, "v", 0, 1.0, both_empty=True), MetricRow("s", "none", "A", 1, "v", 0, 0.5)]
    text = summary_markdown(MetricsReport(rows))
    assert "| s | none |" in text and "1 measurement(s)" in text


def test_dsbn_experiment_runs():
    spec = _spec(norm_mode="dsbn", federation=replace(FED, unet=TINY))
    rep = run_experiment(spec)
    assert {r.augmentation for r in rep.rows} == {"dsbn"}
