"""Loss oracles: scalar recomputation, hand arithmetic, invariances and
finite-difference gradient checks."""

import math

import numpy as np
import pytest
import torch

from fsrn.losses import (
    FocalParams,
    NonFiniteLossError,
    focal_loss,
    max_margin_denominator,
    max_margin_loss,
    smooth_l1,
    total_loss,
)


def scalar_focal(p, p_t, alpha, gamma):
    """Independent recomputation of the symmetric two-term focal loss."""
    return -(alpha * p_t * (1 - p) ** gamma * math.log(p)
             + (1 - alpha) * (1 - p_t) * p ** gamma * math.log(1 - p))


def test_focal_hand_cases():
    v = focal_loss(torch.tensor(0.5, dtype=torch.float64), torch.tensor(1.0, dtype=torch.float64),
                   FocalParams(alpha=0.5, gamma=0.0))
    assert float(v) == pytest.approx(0.5 * math.log(2), abs=1e-12)
    v = focal_loss(torch.tensor(0.9, dtype=torch.float64), torch.tensor(1.0, dtype=torch.float64),
                   FocalParams(alpha=0.25, gamma=2.0))
    assert float(v) == pytest.approx(0.25 * 0.01 * -math.log(0.9), abs=1e-12)
    assert float(v) == pytest.approx(2.634e-4, abs=1e-6)


def test_focal_perfect_prediction_limit():
    v = focal_loss(torch.tensor(1.0, dtype=torch.float64), torch.tensor(1.0, dtype=torch.float64),
                   FocalParams(alpha=0.5, gamma=2.0))
    assert 0.0 <= float(v) < 1e-12


def test_focal_grid_matches_scalar_recomputation():
    ps = np.linspace(0.05, 0.95, 10)
    alphas = np.linspace(0.05, 0.95, 10)
    for gamma in (0.0, 1.0, 2.0):
        for alpha in alphas:
            params = FocalParams(alpha=float(alpha), gamma=gamma)
            for p in ps:
                for p_t in (0.0, 1.0):
                    got = float(focal_loss(torch.tensor(p, dtype=torch.float64),
                                           torch.tensor(p_t, dtype=torch.float64), params))
                    want = scalar_focal(float(p), p_t, float(alpha), gamma)
                    assert abs(got - want) < 1e-9


def test_focal_gamma0_half_alpha_is_half_bce():
    params = FocalParams(alpha=0.5, gamma=0.0)
    ps = torch.linspace(0.02, 0.98, 25, dtype=torch.float64)
    for p_t in (0.0, 1.0):
        t = torch.full_like(ps, p_t)
        got = focal_loss(ps, t, params)
        bce = -(t * torch.log(ps) + (1 - t) * torch.log(1 - ps))
        assert float((got - 0.5 * bce).abs().max()) < 1e-9


def test_focal_monotonic_in_p():
    params = FocalParams(alpha=0.3, gamma=2.0)
    ps = torch.linspace(0.01, 0.99, 50, dtype=torch.float64)
    pos = focal_loss(ps, torch.ones_like(ps), params)
    neg = focal_loss(ps, torch.zeros_like(ps), params)
    assert torch.all(pos[1:] < pos[:-1])
    assert torch.all(neg[1:] > neg[:-1])
    assert torch.all(pos >= 0) and torch.all(neg >= 0)


def test_focal_domain_error():
    with pytest.raises(ValueError):
        focal_loss(torch.tensor([-0.1]), torch.tensor([1.0]), FocalParams())
    with pytest.raises(ValueError):
        focal_loss(torch.tensor([1.3]), torch.tensor([0.0]), FocalParams())


def test_focal_foreground_mean_reduction():
    p = torch.tensor([0.9, 0.2, 0.8, 0.1], dtype=torch.float64)
    p_t = torch.tensor([1.0, 0.0, 1.0, 0.0], dtype=torch.float64)
    params = FocalParams(alpha=0.25, gamma=2.0)
    per_elem = focal_loss(p, p_t, params)
    red = focal_loss(p, p_t, params, reduction="foreground_mean", n_foreground=2)
    assert float(red) == pytest.approx(float(per_elem.sum()) / 2, rel=1e-12)
    # no foreground: normalizer clamps to 1 instead of dividing by zero
    red0 = focal_loss(p, torch.zeros_like(p_t), params, reduction="foreground_mean", n_foreground=0)
    neg_only = focal_loss(p, torch.zeros_like(p_t), params)
    assert float(red0) == pytest.approx(float(neg_only.sum()), rel=1e-12)


def test_focal_params_validation():
    with pytest.raises(ValueError):
        FocalParams(alpha=0.0)
    with pytest.raises(ValueError):
        FocalParams(alpha=1.0)
    with pytest.raises(ValueError):
        FocalParams(gamma=-0.5)


def test_max_margin_hand_case():
    protos = {
        1: torch.tensor([[0.0, 0.0], [2.0, 0.0]], dtype=torch.float64),
        2: torch.tensor([[0.0, 4.0], [0.0, 6.0]], dtype=torch.float64),
    }
    # means (1,0) and (0,5); intra 1+1; separation 26 per class
    assert float(max_margin_loss(protos)) == pytest.approx(1 / 26, abs=1e-15)
    assert max_margin_denominator(protos) == pytest.approx(52.0)


def test_max_margin_zero_intra_variance():
    protos = [
        torch.tensor([[1.0, 2.0], [1.0, 2.0]], dtype=torch.float64),
        torch.tensor([[5.0, 5.0], [5.0, 5.0]], dtype=torch.float64),
    ]
    assert float(max_margin_loss(protos)) == 0.0


def test_max_margin_invariances():
    rng = np.random.default_rng(5)
    groups = [torch.tensor(rng.normal(size=(3, 2)) + mu, dtype=torch.float64)
              for mu in ((0, 0), (6, 0), (0, 7))]
    base = float(max_margin_loss(groups))
    # scaling all vectors
    assert float(max_margin_loss([3.7 * g for g in groups])) == pytest.approx(base, rel=1e-12)
    # global rotation
    theta = 0.83
    rot = torch.tensor([[math.cos(theta), -math.sin(theta)],
                        [math.sin(theta), math.cos(theta)]], dtype=torch.float64)
    assert float(max_margin_loss([g @ rot.T for g in groups])) == pytest.approx(base, rel=1e-9)
    # permutation of classes
    assert float(max_margin_loss([groups[2], groups[0], groups[1]])) == pytest.approx(base, rel=1e-12)


def test_max_margin_decreases_when_means_separate():
    rng = np.random.default_rng(9)
    spread = [torch.tensor(rng.normal(scale=0.5, size=(4, 3)), dtype=torch.float64) for _ in range(2)]
    near = [spread[0] + torch.tensor([0.0, 0.0, 0.0]), spread[1] + torch.tensor([2.0, 0.0, 0.0])]
    far = [spread[0] + torch.tensor([0.0, 0.0, 0.0]), spread[1] + torch.tensor([8.0, 0.0, 0.0])]
    assert float(max_margin_loss(far)) < float(max_margin_loss(near))


def test_max_margin_requires_two_classes():
    with pytest.raises(ValueError):
        max_margin_loss([torch.ones(2, 3)])


def test_max_margin_degenerate_denominator():
    protos = [
        torch.tensor([[0.0, 1.0], [0.0, -1.0]], dtype=torch.float64),
        torch.tensor([[1.0, 0.0], [-1.0, 0.0]], dtype=torch.float64),
    ]
    # identical means: denominator 0, detectable, loss regularized and finite
    assert max_margin_denominator(protos) == 0.0
    v = float(max_margin_loss(protos))
    assert math.isfinite(v) and v > 0


def test_smooth_l1_hand_cases():
    assert float(smooth_l1(torch.tensor([0.5]), torch.tensor([0.0]))) == pytest.approx(0.125)
    assert float(smooth_l1(torch.tensor([2.0]), torch.tensor([0.0]))) == pytest.approx(1.5)
    t = torch.tensor([[0.3, -0.2, 1.1, 0.0]])
    assert float(smooth_l1(t, t)) == 0.0


def test_smooth_l1_mean_over_anchors():
    pred = torch.tensor([[0.5, 0.5, 0.5, 0.5], [2.0, 2.0, 2.0, 2.0]])
    target = torch.zeros_like(pred)
    # per-anchor sums 0.5 and 6.0, averaged over 2 anchors
    assert float(smooth_l1(pred, target)) == pytest.approx((4 * 0.125 + 4 * 1.5) / 2)


def test_smooth_l1_empty_and_mismatch():
    assert float(smooth_l1(torch.zeros(0, 4), torch.zeros(0, 4))) == 0.0
    with pytest.raises(ValueError):
        smooth_l1(torch.zeros(2, 4), torch.zeros(3, 4))


def test_total_loss_arithmetic():
    total, bd = total_loss(torch.tensor(1.0), torch.tensor(2.0), torch.tensor(3.0), 0.1)
    assert float(total) == pytest.approx(3.3, rel=1e-6)
    assert bd.total == bd.focal + bd.loc + bd.lambda_mm * bd.max_margin  # exact float identity
    total0, bd0 = total_loss(torch.tensor(1.5), torch.tensor(0.5), torch.tensor(9.0), 0.0)
    assert float(total0) == pytest.approx(2.0)
    assert bd0.total == bd0.focal + bd0.loc


def test_total_loss_nonfinite_names_component():
    with pytest.raises(NonFiniteLossError) as exc:
        total_loss(torch.tensor(1.0), torch.tensor(float("nan")), torch.tensor(0.0), 0.1)
    assert exc.value.component == "loc"
    with pytest.raises(NonFiniteLossError) as exc:
        total_loss(torch.tensor(float("inf")), torch.tensor(0.0), torch.tensor(0.0), 0.1)
    assert exc.value.component == "focal"


def test_breakdown_round_trips_through_dict():
    _, bd = total_loss(torch.tensor(0.25), torch.tensor(0.5), torch.tensor(2.0), 0.1)
    d = bd.as_dict()
    assert d["lambda"] == 0.1
    assert d["total"] == d["focal"] + d["loc"] + d["lambda"] * d["max_margin"]


# --- finite-difference gradient checks -------------------------------------

def fd_gradient(fn, x: torch.Tensor, eps: float = 1e-3) -> torch.Tensor:
    """Central finite differences of a scalar function, element by element."""
    grad = torch.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.numel()):
        orig = float(flat[i])
        flat[i] = orig + eps
        hi = float(fn(x))
        flat[i] = orig - eps
        lo = float(fn(x))
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return grad


def assert_grads_close(analytic: torch.Tensor, numeric: torch.Tensor, tol: float = 1e-3):
    denom = max(float(analytic.abs().max()), float(numeric.abs().max()), 1e-8)
    rel = float((analytic - numeric).abs().max()) / denom
    assert rel < tol, f"gradient mismatch: rel err {rel}"


def test_focal_gradient_matches_fd():
    torch.manual_seed(0)
    p = torch.rand(8, dtype=torch.float64) * 0.8 + 0.1
    p_t = (torch.rand(8) > 0.5).to(torch.float64)
    params = FocalParams(alpha=0.25, gamma=2.0)

    def fn(x):
        return focal_loss(x, p_t, params).sum()

    x = p.clone().requires_grad_(True)
    focal_loss(x, p_t, params).sum().backward()
    assert_grads_close(x.grad, fd_gradient(fn, p.clone()))


def test_max_margin_gradient_matches_fd():
    torch.manual_seed(1)
    v = torch.randn(2, 3, 4, dtype=torch.float64)  # 2 classes, K=3, D=4
    v[1] += 4.0

    def fn(x):
        return max_margin_loss([x[0], x[1]])

    x = v.clone().requires_grad_(True)
    max_margin_loss([x[0], x[1]]).backward()
    assert_grads_close(x.grad, fd_gradient(fn, v.clone()))


def test_smooth_l1_gradient_matches_fd():
    torch.manual_seed(2)
    pred = torch.randn(5, 4, dtype=torch.float64) * 2
    target = torch.randn(5, 4, dtype=torch.float64)
    # keep every element away from the |x| = beta kink where FD is invalid
    gap = (pred - target).abs() - 1.0
    pred[gap.abs() < 0.05] += 0.2

    def fn(x):
        return smooth_l1(x, target)

    x = pred.clone().requires_grad_(True)
    smooth_l1(x, target).backward()
    assert_grads_close(x.grad, fd_gradient(fn, pred.clone()))


def test_combined_objective_gradient_matches_fd():
    """End-to-end check through a tiny graph: one parameter vector feeds all
    three components via simple linear maps."""
    torch.manual_seed(3)
    theta0 = torch.randn(6, dtype=torch.float64) * 0.3
    p_t = torch.tensor([1.0, 0.0, 1.0], dtype=torch.float64)
    target = torch.tensor([[0.2, -0.1, 0.3, 0.05]], dtype=torch.float64)
    params = FocalParams(alpha=0.5, gamma=2.0)

    def objective(th):
        p = torch.sigmoid(th[:3])
        f = focal_loss(p, p_t, params).sum()
        pred = th[2:6].reshape(1, 4) * 0.5
        l = smooth_l1(pred, target)
        protos = [th[0:3].reshape(1, 3), th[3:6].reshape(1, 3) + 2.0]
        m = max_margin_loss(protos)
        total, _ = total_loss(f, l, m, 0.1)
        return total

    x = theta0.clone().requires_grad_(True)
    objective(x).backward()
    assert_grads_close(x.grad, fd_gradient(objective, theta0.clone()))
