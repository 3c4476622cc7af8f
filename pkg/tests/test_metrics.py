import json
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pointiid import metrics as M
from pointiid.metrics import Judgment


# -- independent oracles ------------------------------------------------------

def lstsq_scale(g, p):
    if not p.any():
        return 0.0
    return float(np.linalg.lstsq(p.reshape(-1, 1), g.reshape(-1), rcond=None)[0][0])


def mse_oracle(g, p):
    g, p = g.ravel(), p.ravel()
    return sum((a - b) ** 2 for a, b in zip(g, p)) / len(g)


def si_mse_oracle(g, p):
    alpha = lstsq_scale(g, p)
    return mse_oracle(g, alpha * p)


def window_list(h, w, frac=0.1):
    size = max(2, int(round(frac * max(h, w))))
    if size > h or size > w:
        return [(0, h, 0, w)]
    step = max(1, size // 2)
    out = []
    i = 0
    while i + size <= h:
        j = 0
        while j + size <= w:
            out.append((i, i + size, j, j + size))
            j += step
        i += step
    return out


def lmse_oracle(g, p):
    err = tot = 0.0
    for r0, r1, c0, c1 in window_list(*g.shape[:2]):
        gw, pw = g[r0:r1, c0:c1], p[r0:r1, c0:c1]
        alpha = lstsq_scale(gw, pw)
        err += float(((gw - alpha * pw) ** 2).sum())
        tot += float((gw**2).sum())
    return err / tot if tot else 0.0


def si_lmse_oracle(g, p):
    vals = []
    for r0, r1, c0, c1 in window_list(*g.shape[:2]):
        gw, pw = g[r0:r1, c0:c1], p[r0:r1, c0:c1]
        vals.append(si_mse_oracle(gw, pw))
    return float(np.mean(vals))


def ssim_oracle(g, p, win=11, sigma=1.5):
    """Direct double loop over window positions with a 2-D Gaussian."""
    if g.ndim == 2:
        g, p = g[..., None], p[..., None]
    ax = np.arange(win) - (win - 1) / 2
    k2 = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2 * sigma**2))
    k2 /= k2.sum()
    c1, c2 = 0.01**2, 0.03**2
    h, w = g.shape[:2]
    per_channel = []
    for c in range(g.shape[2]):
        vals = []
        for i in range(h - win + 1):
            for j in range(w - win + 1):
                x, y = g[i:i + win, j:j + win, c], p[i:i + win, j:j + win, c]
                mx, my = (k2 * x).sum(), (k2 * y).sum()
                vx = (k2 * (x - mx) ** 2).sum()
                vy = (k2 * (y - my) ** 2).sum()
                cxy = (k2 * (x - mx) * (y - my)).sum()
                vals.append((2 * mx * my + c1) * (2 * cxy + c2) / ((mx**2 + my**2 + c1) * (vx + vy + c2)))
        per_channel.append(np.mean(vals))
    return float(np.mean(per_channel))


def whdr_oracle(refl, judgments, delta=0.1):
    wrong = total = 0.0
    for j in judgments:
        l1 = max(1e-4, sum(refl[j.point1[1], j.point1[0]]) / 3)
        l2 = max(1e-4, sum(refl[j.point2[1], j.point2[0]]) / 3)
        if l2 * (1 + delta) < l1:
            guess = "2"
        elif l1 * (1 + delta) < l2:
            guess = "1"
        else:
            guess = "E"
        wrong += j.weight * (guess != j.darker)
        total += j.weight
    return wrong / total


def random_judgments(rng, h, w, n=30):
    out = []
    for _ in range(n):
        out.append(
            Judgment(
                (int(rng.integers(w)), int(rng.integers(h))),
                (int(rng.integers(w)), int(rng.integers(h))),
                str(rng.choice(["1", "2", "E"])),
                float(rng.uniform(0.1, 2.0)),
            )
        )
    return out


def instances(rng, count=20):
    for _ in range(count):
        h, w = (int(x) for x in rng.integers(4, 33, size=2))
        yield rng.uniform(size=(h, w, 3)), rng.uniform(size=(h, w, 3))


# -- oracle agreement -----------------------------------------------------------

def test_mse_oracle(rng):
    for g, p in instances(rng):
        assert abs(M.mse_metric(g, p) - mse_oracle(g, p)) < 1e-8


def test_si_mse_oracle(rng):
    for g, p in instances(rng):
        assert abs(M.si_mse(g, p) - si_mse_oracle(g, p)) < 1e-8


def test_lmse_oracle(rng):
    for g, p in instances(rng):
        assert abs(M.lmse(g, p) - lmse_oracle(g, p)) < 1e-8
        assert abs(M.si_lmse(g, p) - si_lmse_oracle(g, p)) < 1e-8


def test_ssim_oracle(rng):
    for g, p in instances(rng):
        if min(g.shape[:2]) < 11:
            g, p = np.pad(g, ((0, 11), (0, 11), (0, 0))), np.pad(p, ((0, 11), (0, 11), (0, 0)))
        assert abs(M.ssim(g, p) - ssim_oracle(g, p)) < 1e-6


def test_whdr_oracle(rng):
    for g, _ in instances(rng):
        js = random_judgments(rng, *g.shape[:2])
        assert abs(M.whdr(g, js) - whdr_oracle(g, js)) < 1e-8


# -- hand values and contracts ---------------------------------------------------

class TestPixelMetrics:
    def test_mse_hand(self):
        assert M.mse_metric(np.zeros((2, 2)), np.ones((2, 2))) == 1.0

    def test_mask(self):
        g, p = np.zeros((2, 2)), np.array([[1.0, 5.0], [1.0, 5.0]])
        mask = np.array([[True, False], [True, False]])
        assert M.mse_metric(g, p, mask) == 1.0

    def test_si_mse_scale_invariance(self, rng):
        g, p = rng.uniform(size=(8, 8, 3)), rng.uniform(size=(8, 8, 3))
        assert M.si_mse(g, 2 * g) == pytest.approx(0.0, abs=1e-30)
        assert M.si_mse(g, p * 7.5) == pytest.approx(M.si_mse(g, p), rel=1e-12)

    def test_si_mse_zero_prediction_warns(self):
        g = np.ones((3, 3))
        with pytest.warns(M.MetricWarning):
            assert M.si_mse(g, np.zeros((3, 3))) == 1.0

    def test_lmse_zero_prediction_is_one(self, rng):
        g = rng.uniform(0.1, 1, size=(20, 20))
        assert M.lmse(g, np.zeros_like(g)) == pytest.approx(1.0)

    def test_lmse_scaled_prediction_is_zero(self, rng):
        g = rng.uniform(size=(20, 20, 3))
        assert M.lmse(g, 3 * g) < 1e-25

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            M.mse_metric(np.zeros((2, 2)), np.zeros((2, 3)))

    def test_psnr(self):
        assert M.psnr(np.zeros((2, 2)), np.zeros((2, 2))) == M.PSNR_CAP
        assert M.psnr(np.zeros((2, 2)), np.full((2, 2), 0.1)) == pytest.approx(20.0)


class TestSsim:
    def test_identical(self, rng):
        g = rng.uniform(size=(16, 16, 3))
        assert M.ssim(g, g) == pytest.approx(1.0)
        assert M.dssim(g, g) == pytest.approx(0.0, abs=1e-12)

    def test_dssim_relation(self, rng):
        g, p = rng.uniform(size=(2, 16, 16))
        assert M.dssim(g, p) == pytest.approx((1 - M.ssim(g, p)) / 2)

    def test_small_image_warns(self, rng):
        g = rng.uniform(size=(6, 6))
        with pytest.warns(M.MetricWarning):
            assert M.ssim(g, g) == pytest.approx(1.0)

    def test_gaussian_window(self):
        k = M.gaussian_window()
        assert k.sum() == pytest.approx(1.0)
        assert k.argmax() == 5


class TestWhdr:
    def test_hand_cases(self):
        refl = np.array([[[0.5] * 3, [0.2] * 3, [0.52] * 3]])
        js = [Judgment((0, 0), (1, 0), "2"), Judgment((0, 0), (2, 0), "E"), Judgment((1, 0), (0, 0), "2")]
        assert M.whdr(refl, js) == pytest.approx(1 / 3)

    def test_weights(self):
        refl = np.array([[[0.5] * 3, [0.2] * 3]])
        js = [Judgment((0, 0), (1, 0), "2", 3.0), Judgment((0, 0), (1, 0), "1", 1.0)]
        assert M.whdr(refl, js) == pytest.approx(0.25)

    def test_zero_weight_is_nan(self):
        refl = np.ones((1, 2, 3))
        assert math.isnan(M.whdr(refl, [Judgment((0, 0), (1, 0), "E", 0.0)]))

    def test_out_of_bounds(self):
        with pytest.raises(ValueError):
            M.whdr(np.ones((2, 2, 3)), [Judgment((2, 0), (0, 0), "E")])

    def test_invalid_judgment(self):
        with pytest.raises(ValueError):
            Judgment((0, 0), (1, 1), "X")

    def test_load_judgments(self, tmp_path):
        path = tmp_path / "j.json"
        path.write_text(json.dumps([{"p1": [0, 1], "p2": [1, 0], "darker": "e", "weight": 0.5}]))
        (j,) = M.load_judgments(path)
        assert j == Judgment((0, 1), (1, 0), "E", 0.5)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from([0.25, 0.5, 2.0, 4.0, 0.125]))
def test_whdr_global_scale_invariance(seed, scale):
    rng = np.random.default_rng(seed)
    refl = rng.uniform(0.01, 0.2, size=(8, 8, 3))
    js = random_judgments(rng, 8, 8)
    assert M.whdr(refl * scale, js) == M.whdr(refl, js)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.01, 100))
def test_si_mse_pred_scaling_property(seed, scale):
    rng = np.random.default_rng(seed)
    g, p = rng.uniform(size=(6, 5)), rng.uniform(0.1, 1, size=(6, 5))
    assert M.si_mse(g, p * scale) == pytest.approx(M.si_mse(g, p), rel=1e-9, abs=1e-15)


def test_compute_masks_ssim_inputs(rng):
    g = rng.uniform(size=(12, 12, 3))
    p = g.copy()
    mask = np.ones((12, 12), dtype=bool)
    mask[:3] = False
    p[:3] = 0.9  # differences hidden by the mask
    assert M.compute("ssim", g, p, mask) == pytest.approx(1.0)
    assert M.compute("mse", g, p, mask) == 0.0


def test_rescale_reflectance():
    np.testing.assert_array_equal(M.rescale_reflectance(np.array([0.4, 3.0])), [0.2, 1.0])


def test_no_warnings_on_regular_input(rng):
    g, p = rng.uniform(size=(2, 16, 16, 3))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        for name in M.METRICS:
            M.compute(name, g, p)
