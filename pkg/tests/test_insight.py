import math

import numpy as np
import pytest

from core.errors import QuadratureGridError, VanishingLikelihoodError
from core.insight import (
    QuadratureGrid,
    ToyJointModel,
    bayes_class_weights,
    expected_classifier,
    format_report,
    quadrature_convergence,
    run_all,
    unlabeled_gradient,
    verify_dynamic_weight,
    verify_gradient_decomposition,
    verify_trick,
    weight_monotonicity,
)


def _instance(seed, classes=3, pixels=4):
    model = ToyJointModel.random(classes, seed)
    rng = np.random.default_rng([seed, 11])
    source = rng.normal(size=pixels)
    x = model.generative_mean(source) + rng.normal(size=pixels)
    return model, source, x


@pytest.mark.parametrize("seed", range(20))
def test_log_marginal_gradient_trick(seed):
    model = ToyJointModel.random(2, seed)
    x = np.random.default_rng(seed).normal(size=5)
    assert verify_trick(model, x) < 1e-6


def test_trick_is_trivial_for_one_class():
    model = ToyJointModel.random(1, 0)
    assert verify_trick(model, 0.3) == 0.0
    assert verify_trick(model, [0.3, -1.2, 2.0]) < 1e-10


def test_trick_without_theta_dependence_is_zero():
    model = ToyJointModel(2, ToyJointModel.random(2, 3).theta, theta_dependent=False)
    assert verify_trick(model, [0.1, 0.5]) == 0.0


def test_trick_rejects_vanishing_likelihood():
    with pytest.raises(VanishingLikelihoodError):
        verify_trick(ToyJointModel.random(2, 0), [1e3])


def test_theta_must_match_class_count():
    with pytest.raises(ValueError):
        ToyJointModel(2, np.zeros(5))


def test_bayes_weight_equals_expected_classifier():
    model, source, x = _instance(0)
    check = verify_dynamic_weight(model, float(x[0]), source)
    assert check.max_gap < 1e-4
    assert abs(check.bayes.sum() - 1.0) < 1e-8
    assert abs(check.expectation.sum() - 1.0) < 1e-8
    assert len(check.rows()) == 3


def test_latent_free_classifier_gives_its_own_output():
    # w, b0, a(2), b(2) = 0, c(2)
    model = ToyJointModel(2, np.array([0.8, 0.1, 0.5, -0.4, 0.0, 0.0, 0.2, -0.1]))
    source = np.array([0.3, -0.2, 1.0])
    grid = model.latent_grid(source, 0)
    expected = model.classifier(0.7, 0.0)[0]
    np.testing.assert_allclose(expected_classifier(model, 0.7, source, 0, grid), expected, atol=1e-12)
    np.testing.assert_allclose(bayes_class_weights(model, 0.7, source, 0, grid), expected, atol=1e-12)


def test_far_pixel_has_vanishing_likelihood():
    model, source, _ = _instance(1)
    with pytest.raises(VanishingLikelihoodError):
        bayes_class_weights(model, 1e3, source, 0, model.latent_grid(source, 0))


def test_grid_guards():
    model, source, x = _instance(2)
    mean, var = model.latent(source, 0)
    narrow = QuadratureGrid.around(mean, math.sqrt(var), half_width=3.0, resolution=1024)
    with pytest.raises(QuadratureGridError, match="std"):
        verify_dynamic_weight(model, float(x[0]), source, narrow)
    coarse = QuadratureGrid.around(mean, math.sqrt(var), resolution=128)
    with pytest.raises(QuadratureGridError, match="below"):
        verify_dynamic_weight(model, float(x[0]), source, coarse)
    with pytest.raises(QuadratureGridError):
        QuadratureGrid(1.0, 1.0, 10)


def test_trapezoid_weights_integrate_a_gaussian():
    grid = QuadratureGrid.around(0.0, 1.0, resolution=1024)
    density = np.exp(-0.5 * grid.points ** 2) / math.sqrt(2 * math.pi)
    assert abs((grid.weights * density).sum() - 1.0) < 1e-10
    assert grid.tail_mass(0.0, 1.0) < 1e-14


def test_gap_shrinks_with_resolution():
    model, source, x = _instance(3)
    gaps = quadrature_convergence(model, float(x[1]), source, k=1)
    assert [n for n, _ in gaps] == [128, 256, 512, 1024]
    for (_, g1), (_, g2) in zip(gaps, gaps[1:]):
        assert g2 <= max(g1 / 2.0, 1e-12)


def test_unlabelled_gradient_decomposition():
    model, source, x = _instance(4, classes=2, pixels=2)
    assert verify_gradient_decomposition(model, x, source) < 1e-5


def test_unlabelled_gradient_vanishes_without_theta_dependence():
    model, source, x = _instance(5, classes=2, pixels=3)
    frozen = ToyJointModel(2, model.theta, theta_dependent=False)
    assert np.all(unlabeled_gradient(frozen, x, source) == 0.0)


def test_instance_size_limits():
    model, source, x = _instance(6, classes=2, pixels=5)
    with pytest.raises(ValueError):
        verify_gradient_decomposition(model, x, source)
    big, source, x = _instance(6, classes=4, pixels=2)
    with pytest.raises(ValueError):
        unlabeled_gradient(big, x, source)


def test_raising_a_class_bias_raises_its_weight():
    model, source, x = _instance(7)
    top, values = weight_monotonicity(model, float(x[0]), source)
    assert 0 <= top < 3
    assert all(b > a for a, b in zip(values, values[1:]))


def test_run_all_passes_and_reports():
    results = run_all(seed=0)
    assert {r.name for r in results} == {
        "trick", "dynamic_weight_gap", "dynamic_weight_normalisation", "quadrature_convergence",
        "gradient_decomposition", "weight_monotonicity",
    }
    assert all(r.passed for r in results), [r for r in results if not r.passed]
    text = format_report(results)
    assert text.rstrip().endswith("overall: PASS")


def test_posterior_and_marginal_agree_with_the_joint():
    model, _, x = _instance(4)
    joint = np.exp(model.log_joint(x))
    np.testing.assert_allclose(model.posterior(x), joint / joint.sum(axis=1, keepdims=True), rtol=1e-12)
    assert model.log_marginal(x) == pytest.approx(float(np.log(joint.sum(axis=1)).sum()), rel=1e-12)
