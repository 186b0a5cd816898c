import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from dvgen import metrics
from dvgen import synthdata as sd
from dvgen.errors import DimensionMismatch, EmptyFrame, FrameTooSmall
from skimage.metrics import structural_similarity

from oracles import ssim_loops

frames16 = arrays(np.float64, (16, 16), elements=st.floats(0, 1))


def test_psnr_examples():
    x = np.zeros((4, 4))
    assert metrics.psnr(x, x) == math.inf
    assert metrics.psnr(x, np.full((4, 4), 0.1)) == pytest.approx(20.0, abs=1e-12)
    assert metrics.psnr(x, np.ones((4, 4))) == 0.0
    with pytest.raises(DimensionMismatch):
        metrics.psnr(x, np.zeros((4, 5)))


def test_ssim_examples(rng):
    x = rng.uniform(size=(16, 16))
    assert metrics.ssim(x, x) == pytest.approx(1.0, abs=1e-15)
    assert metrics.ssim(x, 1 - x) < 0
    with pytest.raises(FrameTooSmall):
        metrics.ssim(np.zeros((10, 16)), np.zeros((10, 16)))
    with pytest.raises(DimensionMismatch):
        metrics.ssim(x, x[:, :15])


def test_ssim_matches_loop_oracle(rng):
    for _ in range(5):
        x, y = rng.uniform(size=(2, 16, 16))
        assert metrics.ssim(x, y) == pytest.approx(ssim_loops(x, y), abs=1e-10)


def test_ssim_matches_scikit_image(rng):
    x, y = rng.uniform(size=(2, 16, 16))
    ref = structural_similarity(x, y, data_range=1.0, gaussian_weights=True, sigma=1.5,
                                use_sample_covariance=False)
    # scikit-image crops a 5-pixel border from the full map; the valid region is the same set
    assert metrics.ssim(x, y) == pytest.approx(ref, abs=1e-12)


@given(frames16, frames16)
def test_ssim_symmetric_and_bounded(x, y):
    a, b = metrics.ssim(x, y), metrics.ssim(y, x)
    assert abs(a - b) <= 1e-12
    assert -1 - 1e-12 <= a <= 1 + 1e-12


@given(frames16)
def test_self_similarity(x):
    assert metrics.ssim(x, x) == pytest.approx(1.0, abs=1e-12)
    assert metrics.psnr(x, x) == math.inf


def test_frame_curves_agree_with_scalar_metrics(rng):
    gt, tr = rng.uniform(size=(2, 3, 16, 16))
    c = metrics.frame_curves(gt, tr)
    for t in range(3):
        assert c["mse"][t] == pytest.approx(metrics.mse(gt[t], tr[t]), rel=1e-14)
        assert c["psnr"][t] == pytest.approx(metrics.psnr(gt[t], tr[t]), rel=1e-14)
        assert c["ssim"][t] == pytest.approx(metrics.ssim(gt[t], tr[t]), rel=1e-12)
    assert metrics.frame_curves(gt, gt)["psnr"].tolist() == [math.inf] * 3


class TestBestOfK:
    def test_single_trace(self, rng):
        gt = rng.uniform(size=(4, 16, 16))
        assert metrics.best_of_k(gt, [rng.uniform(size=(4, 16, 16))])[0] == 0

    @pytest.mark.parametrize("metric", ["mse", "psnr", "ssim"])
    def test_ground_truth_wins(self, rng, metric):
        gt = rng.uniform(size=(4, 16, 16))
        traces = [np.clip(gt + rng.normal(scale=0.2, size=gt.shape), 0, 1) for _ in range(3)]
        traces.insert(2, gt.copy())
        best, curve = metrics.best_of_k(gt, traces, metric)
        assert best == 2
        assert np.array_equal(curve, metrics.frame_curves(gt, gt)[metric])

    def test_ties_go_to_lowest_id(self, rng):
        gt = rng.uniform(size=(3, 16, 16))
        other = rng.uniform(size=(3, 16, 16))
        assert metrics.best_of_k(gt, [other, gt, gt], "mse")[0] == 1

    @pytest.mark.parametrize("metric", ["mse", "psnr", "ssim"])
    def test_matches_brute_force_on_walker(self, metric):
        cfg = sd.WalkerConfig()
        gt = sd.generate_episode(cfg, 0).frames[5:15]
        traces = [sd.generate_episode(cfg, s).frames[5:15] for s in (1, 2, 3)]
        scores = []
        for tr in traces:
            fn = {"mse": metrics.mse, "psnr": metrics.psnr, "ssim": metrics.ssim}[metric]
            scores.append(np.mean([fn(g, t) for g, t in zip(gt, tr)]))
        want = int(np.argmin(scores) if metric == "mse" else np.argmax(scores))
        assert metrics.best_of_k(gt, traces, metric)[0] == want

    def test_errors(self, rng):
        gt = rng.uniform(size=(3, 16, 16))
        with pytest.raises(ValueError):
            metrics.best_of_k(gt, [])
        with pytest.raises(DimensionMismatch):
            metrics.best_of_k(gt, [gt[:2]])
        with pytest.raises(ValueError):
            metrics.best_of_k(gt, [gt], "lpips")


def label_classifier(window):
    """Traces in these tests are integer label arrays; the verdict is the last label."""
    return int(window[-1])


def test_diversity_direct_formula():
    traces = [np.full(40, a) for a in (0, 1, 2, 0)]
    assert metrics.diversity_score(traces, [0, 1, 0, 1], label_classifier) == 0.5


def test_diversity_counts_still_as_changed():
    traces = [np.full(40, sd.STILL), np.full(40, 2)]
    assert metrics.diversity_score(traces, [2, 2], label_classifier) == 0.5


def test_diversity_window_checks():
    with pytest.raises(ValueError):
        metrics.diversity_score([np.zeros(20)], [0], label_classifier, (10, 25))
    with pytest.raises(DimensionMismatch):
        metrics.diversity_score([np.zeros(40)], [0, 1], label_classifier)


@given(st.lists(st.tuples(st.integers(0, 3), st.integers(-1, 3)), min_size=1, max_size=60))
def test_diversity_equals_off_diagonal_mass(pairs):
    ctx = [a for a, _ in pairs]
    traces = [np.full(40, b) for _, b in pairs]
    score = metrics.diversity_score(traces, ctx, label_classifier)
    counts = metrics.transition_matrix(traces, ctx, label_classifier, num_actions=4)
    assert counts.shape == (4, 5)
    mass = metrics.off_diagonal_mass(counts)
    assert isinstance(mass, Fraction)
    assert score == float(mass)
    assert 0 <= score <= 1
    np.testing.assert_array_equal(counts.sum(1), np.bincount(ctx, minlength=4))


def test_transition_matrix_diagonal_without_switching():
    cfg = sd.WalkerConfig(segment_length=(45, 45))
    clips = [sd.generate_episode(cfg, s) for s in range(12)]
    traces = [c.frames[5:] for c in clips]
    ctx = [c.labels[4] for c in clips]
    clf = lambda w: sd.classify_frames(w, cfg)
    counts = metrics.transition_matrix(traces, ctx, clf, num_actions=4)
    assert np.trace(counts[:, :4]) == 12
    assert metrics.diversity_score(traces, ctx, clf) == 0.0


def test_classifier_errors_propagate():
    cfg = sd.WalkerConfig()
    with pytest.raises(EmptyFrame):
        metrics.diversity_score([np.zeros((40, 16, 16))], [0], lambda w: sd.classify_frames(w, cfg))


def test_report_files_and_determinism(tmp_path, rng):
    gt = rng.uniform(size=(3, 16, 16))
    rep = metrics.EvalReport(
        curves=[(0, 0, t, *vals) for t, vals in enumerate(zip(*metrics.frame_curves(gt, gt).values()))],
        best={"mse": [(0, 0, np.zeros(3))]},
        diversity={(0, 2): 0.25},
        transitions={(0, 2): np.array([[1, 1, 0], [0, 2, 0]])},
        action_names=["a", "b"], num_contexts=1, num_traces=4)
    first = {p.name: p.read_bytes() for p in metrics.write_report(rep, tmp_path / "r1")}
    second = {p.name: p.read_bytes() for p in metrics.write_report(rep, tmp_path / "r2")}
    assert first == second
    assert "transitions_0-2.csv" in first
    head = first["transitions_0-2.csv"].decode().splitlines()[0]
    assert head.endswith("a,b,still")
    assert b"inf" in first["curves.csv"]
    summary = first["summary.csv"].decode()
    for col in metrics.RESERVED_COLUMNS:
        assert col in summary


def test_branch_point_ratio():
    stats = [np.array([9.0, 1, 1, 1, 1, 4, 1, 1, 1, 1.0])]
    ratio, at, mid = metrics.branch_point_ratio(stats, [[5]], margin=3)
    # frames 1, 2 and 8, 9 are mid-segment; frame 0 is ignored
    assert (at, mid, ratio) == (4.0, 1.0, 4.0)
    with pytest.raises(ValueError):
        metrics.branch_point_ratio(stats, [[]])
