import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import expit
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from mssa_lab import IterateState
from mssa_lab.bilevel import (
    HypercleanSOBA,
    HypercleanSpec,
    HypergradientError,
    LinearModel,
    MLPModel,
    QuadraticBilevelSpec,
    SOBAConfig,
    SobaNoise,
    conjugate_gradient,
    hyperclean_problem,
    hypergradient_oracle,
    identity_quadratic_spec,
    lint_soba_config,
    make_hyperclean_data,
    one_hot,
    quadratic_bilevel,
    random_quadratic_spec,
    soba_run,
    soba_system,
)
from mssa_lab.core import StepSchedule
from mssa_lab.verify import check_noise_variance


def central_diff(fun, x, u, h):
    return (fun(x + h * u) - fun(x - h * u)) / (2 * h)


def rel_err(a, b):
    return abs(a - b) / max(abs(b), 1e-300)


# quadratic problems ----------------------------------------------------------


def test_identity_operators_by_hand():
    sys = soba_system(quadratic_bilevel(identity_quadratic_spec(3)))
    rng = np.random.default_rng(0)
    x, y1, y2 = rng.standard_normal((3, 3))
    assert np.allclose(sys.secondary(1, x, [y1]), y1 - x, atol=1e-15)
    assert np.allclose(sys.secondary(2, x, [y1, y2]), y1 + y2, atol=1e-15)
    assert np.allclose(sys.main(x, [y1, y2]), -y2, atol=1e-15)


def test_identity_root_and_value():
    prob = quadratic_bilevel(identity_quadratic_spec(2))
    assert np.allclose(prob.x_star, 0.0)
    sys = soba_system(prob)
    z = np.zeros(2)
    assert np.allclose(sys.main(z, [z, z]), 0) and np.allclose(sys.secondary(2, z, [z, z]), 0)
    x = np.array([2.0, -1.0])
    assert prob.F(x) == pytest.approx(0.5 * x @ x)
    assert np.allclose(prob.hypergradient(np.zeros(2)), 0.0)


def test_identity_oracle_value():
    prob = quadratic_bilevel(identity_quadratic_spec(2))
    assert np.allclose(hypergradient_oracle(prob, [2.0, -1.0]), [2.0, -1.0], atol=1e-14)


@settings(max_examples=30, deadline=None)
@given(a=st.floats(-10, 10), seed=st.integers(0, 2**32 - 1))
def test_h2_affine_in_y2(a, seed):
    rng = np.random.default_rng(seed)
    prob = quadratic_bilevel(random_quadratic_spec(3, 4, rng))
    sys = soba_system(prob)
    x, y1, y2 = rng.standard_normal(3), rng.standard_normal(4), rng.standard_normal(4)
    lhs = sys.secondary(2, x, [y1, a * y2]) - sys.secondary(2, x, [y1, np.zeros(4)])
    assert np.allclose(lhs, a * (prob.spec.H @ y2), rtol=1e-12, atol=1e-12)


def test_oracle_matches_closed_form():
    prob = quadratic_bilevel(random_quadratic_spec(5, 4, np.random.default_rng(1)))
    for x in np.random.default_rng(2).standard_normal((5, 5)):
        g = hypergradient_oracle(prob, x, 1e-12)
        ref = prob.hypergradient(x)
        assert np.linalg.norm(g - ref) <= 1e-10 * np.linalg.norm(ref)


def test_oracle_vanishes_at_solution():
    prob = quadratic_bilevel(random_quadratic_spec(4, 3, np.random.default_rng(3)))
    tol = 1e-10
    assert np.linalg.norm(hypergradient_oracle(prob, prob.x_star, tol)) <= 10 * tol


def test_oracle_matches_finite_differences_of_F():
    prob = quadratic_bilevel(random_quadratic_spec(4, 3, np.random.default_rng(4)))
    rng = np.random.default_rng(5)
    x = rng.standard_normal(4)
    g = hypergradient_oracle(prob, x)
    for _ in range(10):
        u = rng.standard_normal(4)
        assert rel_err(g @ u, central_diff(prob.F, x, u, 1e-4)) < 1e-6


def test_oracle_y2_matches_inverse_hessian_formula():
    prob = quadratic_bilevel(random_quadratic_spec(3, 3, np.random.default_rng(6)))
    sys = soba_system(prob)
    x = np.array([0.3, -1.0, 2.0])
    y1, y2 = sys.y_diamond(x)
    ref = -np.linalg.solve(prob.spec.H, prob.grad_f_y(x, y1))
    assert np.allclose(y2, ref, atol=1e-10)
    assert np.allclose(y2, prob.y2_star(x, y1), atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), scale=st.floats(1e-6, 1e2))
def test_operator_root_equivalence(seed, scale):
    rng = np.random.default_rng(seed)
    prob = quadratic_bilevel(random_quadratic_spec(3, 4, rng))
    sys = soba_system(prob)
    C = prob.root_constant()
    x = rng.standard_normal(3)
    y1s, y2s = sys.y_diamond(x)
    y1 = y1s + scale * rng.standard_normal(4)
    y2 = y2s + scale * rng.standard_normal(4)
    tau = max(np.linalg.norm(sys.secondary(1, x, [y1])), np.linalg.norm(sys.secondary(2, x, [y1, y2])), np.linalg.norm(sys.main(x, [y1, y2])))
    assert np.linalg.norm(prob.hypergradient(x)) <= C * tau * (1 + 1e-10) + 1e-12


def test_quadratic_spec_validation():
    good = identity_quadratic_spec(2).__dict__.copy()
    for bad in (dict(H=-np.eye(2)), dict(H=np.array([[1.0, 2.0], [0.0, 1.0]])), dict(q=np.zeros(3)), dict(sigma=-1.0), dict(R=np.array([[1.0, 1.0], [0.0, 1.0]]))):
        with pytest.raises(ValueError):
            QuadraticBilevelSpec(**{**good, **bad})


def test_flat_upper_objective():
    s = identity_quadratic_spec(2).__dict__.copy()
    s.update(R=np.zeros((2, 2)))
    prob = quadratic_bilevel(QuadraticBilevelSpec(**s))
    x0 = np.array([1.0, -2.0])
    assert np.allclose(prob.hypergradient(x0), 0.0)
    traj = soba_run(prob, SOBAConfig.constant(0.1, 0.1, K=200), x0=x0, grad_metric=False)
    assert np.array_equal(traj.final_state.x, x0)


def test_self_test_quadratic_samplers():
    prob = quadratic_bilevel(random_quadratic_spec(3, 3, np.random.default_rng(7), sigma=0.5))
    rng = np.random.default_rng(8)
    z = prob.self_test(rng.standard_normal(3), rng.standard_normal(3), rng.standard_normal(3), n_samples=4000)
    assert max(z.values()) < 5.0


def test_soba_noise_mean_zero_and_variance_growth():
    prob = quadratic_bilevel(random_quadratic_spec(3, 3, np.random.default_rng(9), sigma=0.5))
    sys = soba_system(prob)
    rng = np.random.default_rng(10)
    probes = [
        IterateState(0, rng.standard_normal(3), (rng.standard_normal(3), s * rng.standard_normal(3)))
        for s in np.linspace(0.0, 10.0, 20)
    ]
    out = check_noise_variance(SobaNoise(prob, 1), sys, probes, 1000, indices=[0, 2])
    assert out[0].mean_zero and out[2].mean_zero
    y2_sq = np.array([float(p.ys[1] @ p.ys[1]) for p in probes])
    assert np.corrcoef(y2_sq, out[2].variances)[0, 1] > 0.9
    assert out[2].omegas[0] > 0


# SOBA runs -------------------------------------------------------------------


def test_noiseless_run_bit_identical_across_seeds():
    prob = quadratic_bilevel(random_quadratic_spec(3, 3, np.random.default_rng(11), sigma=0.0))
    a = soba_run(prob, SOBAConfig.st(0.5, K=300, seed=1), record_stride=50)
    b = soba_run(prob, SOBAConfig.st(0.5, K=300, seed=2), record_stride=50)
    assert a.columns == b.columns
    assert np.array_equal(a.final_state.x, b.final_state.x)


def test_noiseless_constant_run_converges():
    prob = quadratic_bilevel(random_quadratic_spec(4, 4, np.random.default_rng(7)))
    traj = soba_run(prob, SOBAConfig.constant(0.2, 0.25, K=3000), record_stride=3000)
    assert float(np.sum((traj.final_state.x - prob.x_star) ** 2)) <= 1e-10
    assert traj.last("grad_F_sq") <= 1e-10


def test_st_and_tt_both_converge_and_differ():
    prob = quadratic_bilevel(random_quadratic_spec(3, 3, np.random.default_rng(12), sigma=0.3))
    st_ = soba_run(prob, SOBAConfig.st(0.5, K=2000, seed=3, batch_size=1), record_stride=100)
    tt_ = soba_run(prob, SOBAConfig.tt(0.5, K=2000, seed=3, batch_size=1), record_stride=100)
    g0 = float(np.sum(prob.hypergradient(np.zeros(3)) ** 2))
    for t in (st_, tt_):
        assert t.failure is None
        assert t.last("grad_F_sq") < 0.05 * g0
    assert st_.columns["grad_F_sq"] != tt_.columns["grad_F_sq"]
    assert tt_.meta["soba"]["alpha"]["exponent"] == 0.6


def test_soba_config_validation():
    with pytest.raises(ValueError):
        SOBAConfig("XX", StepSchedule(), StepSchedule(), StepSchedule())
    with pytest.raises(ValueError):
        SOBAConfig("ST", StepSchedule("poly", 1, 0.5), StepSchedule("poly", 1, 0.4), StepSchedule("poly", 1, 0.5))
    with pytest.raises(ValueError):
        SOBAConfig.tt(1.0, exponents=(0.4, 0.6))
    with pytest.raises(ValueError):
        SOBAConfig.st(1.0, batch_size=0)
    cfg = SOBAConfig.tt(1.0)
    assert (cfg.alpha.exponent, cfg.beta1.exponent) == (0.6, 0.4)


def test_lint_warns_on_large_lower_steps():
    prob = quadratic_bilevel(random_quadratic_spec(2, 2, np.random.default_rng(0)))  # mu_g=1, ell_g=2
    with pytest.warns(RuntimeWarning):
        assert lint_soba_config(prob, SOBAConfig.constant(0.1, 0.5))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert lint_soba_config(prob, SOBAConfig.st(0.2)) == []


def test_conjugate_gradient():
    rng = np.random.default_rng(0)
    A = rng.standard_normal((6, 6))
    A = A @ A.T + np.eye(6)
    b = rng.standard_normal(6)
    z, res, _ = conjugate_gradient(lambda u: A @ u, b, 1e-12)
    assert np.allclose(A @ z, b, atol=1e-11) and res <= 1e-12
    with pytest.raises(HypergradientError):
        conjugate_gradient(lambda u: -u, b, 1e-12)


# hyperclean ------------------------------------------------------------------


def small_hyperclean(model="linear", n_tr=50, d=5, seed=0):
    return hyperclean_problem(make_hyperclean_data(n_tr=n_tr, n_val=40, n_test=30, d=d, seed=seed, model=model, hidden=6))


def test_one_hot():
    assert np.array_equal(one_hot([1, 0, 2], 3), [[0, 1, 0], [1, 0, 0], [0, 0, 1]])


def test_zero_logits_give_half_weights():
    prob = small_hyperclean(n_tr=10)
    assert np.all(expit(np.zeros(10)) == 0.5)
    y = np.random.default_rng(0).standard_normal(prob.dim_y)
    losses = prob.model.losses(y, prob.spec.X_tr, prob.T_tr)
    assert prob.lower_value(np.zeros(10), y) == pytest.approx(0.5 * losses.mean() + 0.5 * prob.spec.mu * y @ y)


def test_zero_predictor_loss():
    # one-hot targets give l_i = 1/2 at the zero predictor
    prob = small_hyperclean(n_tr=10)
    lam = np.random.default_rng(1).standard_normal(10)
    assert prob.lower_value(lam, np.zeros(prob.dim_y)) == pytest.approx(np.mean(expit(lam) * 0.5))


@pytest.mark.parametrize("model", ["linear", "mlp"])
def test_lower_gradient_finite_differences(model):
    prob = small_hyperclean(model, n_tr=10)
    rng = np.random.default_rng(2)
    lam, y = rng.standard_normal(10), prob.initial_y(rng) + 0.1 * rng.standard_normal(prob.dim_y)
    g = prob.grad_g_y(lam, y)
    for _ in range(5):
        u = rng.standard_normal(prob.dim_y)
        fd = central_diff(lambda z: prob.lower_value(lam, z), y, u, 1e-5)
        assert rel_err(g @ u, fd) < 1e-6


@pytest.mark.parametrize("model", ["linear", "mlp"])
def test_curvature_products_finite_differences(model):
    prob = small_hyperclean(model, n_tr=20)
    rng = np.random.default_rng(3)
    lam, y = rng.standard_normal(20), prob.initial_y(rng) + 0.1 * rng.standard_normal(prob.dim_y)
    u, dy = rng.standard_normal(prob.dim_y), rng.standard_normal(prob.dim_y)
    hv = prob.hvp_g_yy(lam, y, u)
    fd = central_diff(lambda z: prob.grad_g_y(lam, z), y, u, 1e-5)
    assert np.linalg.norm(hv - fd) <= 1e-6 * np.linalg.norm(fd)
    # cross derivative: d/dlam <grad_y g, u> along dlam equals <jvp, dlam>
    dl = rng.standard_normal(20)
    jv = prob.jvp_g_xy(lam, y, u)
    fd = central_diff(lambda l: prob.grad_g_y(l, y) @ u, lam, dl, 1e-5)
    assert rel_err(jv @ dl, fd) < 1e-6


def test_hyperclean_hypergradient_finite_differences():
    prob = small_hyperclean("linear")
    rng = np.random.default_rng(4)
    lam = rng.standard_normal(prob.dim_x)
    g = hypergradient_oracle(prob, lam)

    def F(l):
        return prob.upper_value(l, prob.lower_solution(l))

    for _ in range(10):
        u = rng.standard_normal(prob.dim_x)
        assert rel_err(g @ u, central_diff(F, lam, u, 1e-4)) < 1e-3


def test_mlp_hypergradient_finite_differences():
    prob = small_hyperclean("mlp", n_tr=30)
    rng = np.random.default_rng(5)
    lam = rng.standard_normal(prob.dim_x)
    g, parts = hypergradient_oracle(prob, lam, 1e-10, y0=prob.initial_y(), return_parts=True)

    def F(l):
        _, p = hypergradient_oracle(prob, l, 1e-10, y0=parts["y1"], return_parts=True)
        return prob.upper_value(l, p["y1"])

    for _ in range(3):
        u = rng.standard_normal(prob.dim_x)
        assert rel_err(g @ u, central_diff(F, lam, u, 1e-4)) < 1e-3


def test_hyperclean_samplers_unbiased():
    prob = small_hyperclean(n_tr=20)
    rng = np.random.default_rng(6)
    lam, y, u = rng.standard_normal(20), rng.standard_normal(prob.dim_y), rng.standard_normal(prob.dim_y)
    z = prob.self_test(lam, y, u, n_samples=3000, batch_size=4)
    assert max(z.values()) < 5.0


def test_hyperclean_lower_solution_is_stationary():
    prob = small_hyperclean()
    lam = np.random.default_rng(7).standard_normal(prob.dim_x)
    assert np.linalg.norm(prob.grad_g_y(lam, prob.lower_solution(lam))) < 1e-12
    assert small_hyperclean("mlp").lower_solution(lam) is None


def test_hyperclean_spec_validation():
    X, y = np.ones((4, 2)), np.array([0, 1, 0, 1])
    with pytest.raises(ValueError):
        HypercleanSpec(X[:0], y[:0], X, y)
    with pytest.raises(ValueError):
        HypercleanSpec(X, y, X, y, mu=0.0)
    with pytest.raises(ValueError):
        HypercleanSpec(X, y[:3], X, y)
    with pytest.raises(ValueError):
        HypercleanSpec(X, y + 1, X, y)


def test_desk_data_shapes_and_flips():
    spec = make_hyperclean_data(seed=3)
    assert spec.X_tr.shape == (500, 10) and spec.X_test.shape == (500, 10)
    assert (~spec.clean).sum() == 200
    again = make_hyperclean_data(seed=3)
    assert np.array_equal(spec.X_tr, again.X_tr) and np.array_equal(spec.y_tr, again.y_tr)


def test_hyperclean_run_records_accuracy_inputs():
    prob = small_hyperclean(n_tr=60)
    traj = soba_run(prob, SOBAConfig.st(100.0, 1.0, K=300, batch_size=10), record_stride=100)
    up = traj.column("upper_value")
    assert up[-1] < prob.upper_value(None, prob.initial_y())
    acc = prob.accuracies(traj.final_state.x, traj.final_state.ys[0])
    assert set(acc) == {"acc_test", "acc_clean"}
    assert 0 <= acc["acc_test"] <= 1


def test_models_reject_unknown_kind_and_pack_roundtrip():
    from mssa_lab.bilevel import make_model

    with pytest.raises(ValueError):
        make_model("cnn", 3, 2)
    m = MLPModel(3, 2, hidden=4)
    p = m.init_params(np.random.default_rng(0))
    assert np.array_equal(m.pack(*m.unpack(p)), p)
    assert LinearModel(3, 2).n_params == 8


# estimator -------------------------------------------------------------------


def test_estimator_fit_predict():
    spec = make_hyperclean_data(n_tr=200, n_val=200, n_test=200, seed=1)
    clf = HypercleanSOBA(max_iter=1500, random_state=0)
    clf.fit(spec.X_tr, spec.y_tr, spec.X_val, spec.y_val)
    assert clf.predict(spec.X_test).shape == (200,)
    assert clf.score(spec.X_test, spec.y_test) > 0.8
    assert clf.sample_weight_[spec.clean].mean() > clf.sample_weight_[~spec.clean].mean()
    assert clf.n_features_in_ == 10
    assert list(clf.classes_) == [0, 1]


def test_estimator_string_labels_and_holdout():
    spec = make_hyperclean_data(n_tr=100, n_val=10, n_test=10, d=4, seed=2)
    y = np.array(["a", "b"])[spec.y_tr]
    clf = HypercleanSOBA(max_iter=200).fit(spec.X_tr, y)
    assert set(clf.predict(spec.X_tr)) <= {"a", "b"}
    assert clf.lam_.shape == (50,)


def test_estimator_api_contract():
    clf = HypercleanSOBA(variant="TT", mu=0.1)
    assert clone(clf).get_params() == clf.get_params()
    with pytest.raises(NotFittedError):
        clf.predict(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        HypercleanSOBA(variant="XX").fit(np.random.default_rng(0).standard_normal((20, 2)), np.arange(20) % 2)
    fitted = HypercleanSOBA(max_iter=50).fit(np.random.default_rng(0).standard_normal((20, 2)), np.arange(20) % 2)
    with pytest.raises(ValueError):
        fitted.predict(np.zeros((2, 3)))
