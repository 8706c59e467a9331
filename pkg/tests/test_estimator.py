import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from otfm.degradation import upsample_lr
from otfm.estimator import OTFMPansharpener
from otfm.imagery import SampleTriplet, stack_triplets
from otfm.validation import check_pan_lrms, check_triplets, to_triplets

TINY = dict(base_channels=8, levels=2, attention_window=3, potential_channels=8, batch_size=2)


def test_params_roundtrip():
    est = OTFMPansharpener(max_steps=3, **TINY)
    params = est.get_params()
    assert params["max_steps"] == 3 and params["base_channels"] == 8
    assert clone(est).get_params() == params
    est.set_params(steps=4)
    assert est.steps == 4


def test_predict_before_fit(small_set):
    with pytest.raises(NotFittedError):
        OTFMPansharpener(**TINY).predict(small_set)


def test_zero_step_fit_predicts_bicubic(small_set):
    est = OTFMPansharpener(max_steps=0, **TINY).fit(small_set)
    assert est.n_steps_ == 0
    out = est.predict(small_set[:2])
    pan, lrms, _ = stack_triplets(small_set[:2])
    np.testing.assert_array_equal(out, np.clip(upsample_lr(lrms, 4), 0, 1))
    np.testing.assert_array_equal(est.predict((pan, lrms)), out)
    assert 0 < est.score(small_set[:2]) <= 1


def test_short_fit_changes_output(small_set):
    est = OTFMPansharpener(max_steps=3, ema_decay=0.0, **TINY).fit(small_set)
    assert est.n_steps_ == 3
    pan, lrms, _ = stack_triplets(small_set[:1])
    assert not np.array_equal(est.predict((pan, lrms)), np.clip(upsample_lr(lrms, 4), 0, 1))


def test_fit_requires_reference(small_set):
    t = small_set[0]
    with pytest.raises(ValueError):
        OTFMPansharpener(**TINY).fit([SampleTriplet(t.pan, t.lrms, ratio=4)])


def test_validation_helpers(small_set):
    assert check_triplets(small_set[0]) == [small_set[0]]
    with pytest.raises(ValueError):
        check_triplets([])
    with pytest.raises(TypeError):
        check_triplets([1])
    with pytest.raises(ValueError):
        check_triplets(small_set, bands=3)
    pan, lrms, hrms = stack_triplets(small_set[:2])
    p, m = check_pan_lrms(pan[0], lrms[0], 4)
    assert p.shape == (1, 1, 32, 32) and m.shape == (1, 4, 8, 8)
    for bad in ((lrms, lrms), (pan, lrms[:1]), (pan, lrms[..., :4, :4])):
        with pytest.raises(ValueError):
            check_pan_lrms(*bad, 4)
    nan = pan.copy()
    nan[0, 0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        check_pan_lrms(nan, lrms, 4)
    ts = to_triplets(pan, lrms, 4, hrms)
    assert len(ts) == 2 and ts[1].hrms_ref is not None
