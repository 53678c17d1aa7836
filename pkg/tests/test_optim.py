import csv
import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from rotinv.optim import (LossCsv, LossReport, NumericError, ParamStore, adam_step, backward, edge_aware_smoothness,
                          fd_gradient, light_smoothness, light_whiteness, loss_cache, loss_data, loss_mask,
                          loss_residual, rel_err)

T = torch.float64


def t(x):
    return torch.tensor(np.asarray(x, dtype=np.float64))


def test_param_store_groups_are_disjoint_and_freezable():
    a = torch.nn.Parameter(t([1.0, 2.0]))
    b = torch.nn.Parameter(t([3.0]))
    s = ParamStore()
    s.add("a", [a], 0.1)
    s.add("b", [b], 0.1, trainable=False)
    assert a.requires_grad and not b.requires_grad
    with pytest.raises(ValueError):
        s.add("a", [], 0.1)
    with pytest.raises(ValueError):
        s.add("c", [a], 0.1)
    assert [g.name for g in s.trainable()] == ["a"]


def test_adam_updates_only_trainable_groups():
    a = torch.nn.Parameter(t([1.0, 2.0]))
    b = torch.nn.Parameter(t([3.0]))
    s = ParamStore()
    s.add("a", [a], 0.1)
    s.add("b", [b], 0.1, trainable=False)
    before = s.snapshot()
    loss = (a * a).sum() + (b * b).sum()
    backward(loss, s)
    adam_step(s)
    after = s.snapshot()
    assert torch.equal(before["b"], after["b"])
    # first bias-corrected Adam step moves each entry by lr against the gradient sign
    torch.testing.assert_close(after["a"], before["a"] - 0.1)


def test_per_group_learning_rates():
    a = torch.nn.Parameter(t([1.0]))
    b = torch.nn.Parameter(t([1.0]))
    s = ParamStore()
    s.add("a", [a], 0.1)
    s.add("b", [b], 0.01)
    backward((a + b).sum(), s)
    adam_step(s)
    assert float(a.detach()) == pytest.approx(0.9) and float(b.detach()) == pytest.approx(0.99)


def test_backward_names_the_non_finite_term():
    p = torch.nn.Parameter(t([1.0]))
    s = ParamStore()
    s.add("p", [p], 0.1)
    bad = p.sum() * float("nan")
    with pytest.raises(NumericError) as e:
        backward(p.sum() + bad, s, {"data": p.sum(), "residual": bad}, step=7)
    assert e.value.source == "residual" and e.value.step == 7
    q = torch.nn.Parameter(t([0.0]))
    s2 = ParamStore()
    s2.add("q", [q], 0.1)
    with pytest.raises(NumericError) as e:
        backward(torch.sqrt(q).sum() * 0.0 + q.sum(), s2)
    assert "q" in e.value.source


def test_grads_report_zero_for_untouched():
    a = torch.nn.Parameter(t([1.0]))
    b = torch.nn.Parameter(t([1.0, 2.0]))
    s = ParamStore()
    s.add("x", [a, b], 0.1)
    backward(a.sum() * 2, s)
    torch.testing.assert_close(s.grads()["x"], t([2.0, 0.0, 0.0]))


def test_loss_data_is_masked_l1():
    r = t([[0.1, 0.2, 0.3], [1.0, 1.0, 1.0]])
    g = t([[0.2, 0.2, 0.1], [0.0, 0.0, 0.0]])
    assert float(loss_data(r, g)) == pytest.approx((0.1 + 0 + 0.2 + 3.0) / 6)
    assert float(loss_data(r, g, mask=t([1.0, 0.0]))) == pytest.approx(0.1)
    assert float(loss_cache(r, g, mask=t([1.0, 0.0]))) == pytest.approx(0.1)


def test_empty_mask_warns_and_returns_zero():
    r = t([[0.1, 0.2, 0.3]]).requires_grad_(True)
    with pytest.warns(RuntimeWarning):
        v = loss_data(r, t([[0, 0, 0]]), mask=t([0.0]))
    assert float(v.detach()) == 0.0
    v.backward()
    assert torch.all(r.grad == 0)


def test_residual_loss():
    assert float(loss_residual(t([[1.0, 2.0, 3.0]]), t([[1.0, 1.0, 1.0]]))) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        loss_residual(torch.zeros((0, 3), dtype=T), torch.zeros((0, 3), dtype=T))


@given(st.lists(st.sampled_from([0.0, 1.0]), min_size=1, max_size=20))
def test_mask_loss_zero_on_exact_match(bits):
    m = t(bits)
    assert float(loss_mask(m, m)) == 0.0


def test_mask_loss_is_bce():
    a, g = t([0.8, 0.3]), t([1.0, 0.0])
    assert float(loss_mask(a, g)) == pytest.approx(-(math.log(0.8) + math.log(0.7)) / 2)


def test_edge_aware_smoothness():
    flat = torch.ones((1, 4, 4, 3), dtype=T)
    img = torch.zeros((1, 4, 4, 3), dtype=T)
    assert float(edge_aware_smoothness(flat, img)) == 0.0
    ramp = torch.arange(4, dtype=T).reshape(1, 1, 4, 1).expand(1, 4, 4, 1)
    # horizontal differences 1 everywhere, vertical 0, image flat
    assert float(edge_aware_smoothness(ramp, img)) == pytest.approx(1.0)
    edges = torch.zeros((1, 4, 4, 3), dtype=T)
    edges[:, :, 2:] = 5.0
    assert float(edge_aware_smoothness(ramp, edges)) < 1.0


def test_light_regularizers():
    rad = torch.ones((4, 8, 3), dtype=T)
    assert float(light_smoothness(rad)) == 0.0 and float(light_whiteness(rad)) == 0.0
    rad[..., 0] = 2.0
    assert float(light_whiteness(rad)) == pytest.approx((2 / 3 + 1 / 3 + 1 / 3) / 3)


def test_combine_weights_terms():
    rep = LossReport.combine(t(1.0), t(2.0), t(0.5), {"mask": t(1.0), "light_white": t(3.0)},
                             {"mask": 0.1, "albedo_smooth": 0, "rough_smooth": 0, "light_smooth": 0,
                              "light_white": 0.01}, lambda_residual=10.0)
    assert float(rep.total) == pytest.approx(1 + 2 + 5 + 0.1 + 0.03)


def test_loss_csv(tmp_path):
    w = LossCsv(tmp_path / "l.csv")
    w.write(0, LossReport(data=t(0.25), total=t(0.5)))
    rows = list(csv.reader(open(tmp_path / "l.csv")))
    assert rows[0][0] == "step" and rows[1][0] == "0"
    assert float(rows[1][rows[0].index("total")]) == 0.5


def test_fd_gradient_and_rel_err():
    p = t([0.3, -1.2])
    g = fd_gradient(lambda: (p ** 3).sum(), [p])[0]
    torch.testing.assert_close(g, 3 * p ** 2, rtol=1e-8, atol=1e-10)
    assert rel_err(t([1.0, 2.0]), t([1.0, 2.2])) == pytest.approx(0.2 / 2.2)
