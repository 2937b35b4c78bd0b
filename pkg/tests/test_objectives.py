import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from virm import diffcore as dc
from virm.diffcore import Tensor
from virm.errors import ConfigError, ContractError, DimensionError
from virm.objectives import (AblationMode, classify, consistency_loss, env_risk, featurize, init_model,
                             irmv1_env_penalty, irmv1_penalty, virm_total_loss, vrex_penalty)
from virm.sda import SdaConfig, init_sda, vicinal_batch


def scalars(*vals):
    return [Tensor(v) for v in vals]


def test_vrex_examples():
    assert vrex_penalty(scalars(0.5, 0.5), 10.0).item() == 1.0
    assert vrex_penalty(scalars(0.2, 0.4), 0.0).item() == pytest.approx(0.6, abs=1e-15)
    assert vrex_penalty(scalars(0.2, 0.4), 1.0).item() == pytest.approx(0.61, abs=1e-15)
    with pytest.raises(ContractError):
        vrex_penalty([], 1.0)


@given(st.lists(st.floats(0, 10), min_size=1, max_size=5), st.floats(0.01, 100))
def test_vrex_at_least_sum(risks, beta):
    total = vrex_penalty(scalars(*risks), beta).item()
    assert total >= sum(risks) - 1e-9
    if len(set(risks)) == 1:
        assert total == pytest.approx(sum(risks), abs=1e-9)


def test_env_risk_zero_classifier_is_log2():
    rng = np.random.default_rng(0)
    params = init_model(3, (4,), 2, 2, rng)
    params.classifier[0].data[:] = 0.0
    params.classifier[1].data[:] = 0.0
    assert env_risk(params, rng.normal(size=(5, 3)), [0, 1, 0, 1, 1]).item() == pytest.approx(math.log(2), abs=1e-15)


def test_env_risk_trained_on_two_points():
    x = np.array([[1.0, 0.0], [-1.0, 0.0]])
    y = np.array([1, 0])
    params = init_model(2, (), 2, 2, np.random.default_rng(1))
    for _ in range(500):
        loss = env_risk(params, x, y)
        grads = dc.backward(loss, params.parameters())
        for p, g in zip(params.parameters(), grads):
            p.data = p.data - 0.5 * g
    assert env_risk(params, x, y).item() < 0.01


def test_env_risk_permutation_invariant():
    rng = np.random.default_rng(2)
    params = init_model(3, (4,), 2, 2, rng)
    x, y = rng.normal(size=(6, 3)), np.array([0, 1, 1, 0, 1, 0])
    perm = rng.permutation(6)
    assert env_risk(params, x, y).item() == pytest.approx(env_risk(params, x[perm], y[perm]).item(), abs=1e-15)
    with pytest.raises(ContractError):
        env_risk(params, np.zeros((0, 3)), [])


def test_irmv1_matches_finite_difference_in_scale():
    for z in (-1.3, 0.2, 2.0):
        logits = np.array([[z, -z]])

        def ce(s):
            return dc.softmax_cross_entropy(Tensor(s * logits), [0]).item()

        h = 1e-6
        deriv = (ce(1 + h) - ce(1 - h)) / (2 * h)
        assert irmv1_env_penalty(Tensor(logits), [0]).item() == pytest.approx(deriv ** 2, rel=1e-6, abs=1e-12)


def test_irmv1_zero_at_flat_scale_and_additive():
    assert irmv1_env_penalty(Tensor(np.zeros((3, 2))), [0, 1, 1]).item() == 0.0
    logits = Tensor(np.random.default_rng(3).normal(size=(4, 3)))
    y = [0, 2, 1, 1]
    one = irmv1_penalty([logits], [y]).item()
    assert irmv1_penalty([logits] * 3, [y] * 3).item() == pytest.approx(3 * one, rel=1e-14)


@given(st.lists(st.floats(-20, 20), min_size=6, max_size=6), st.lists(st.integers(0, 2), min_size=2, max_size=2))
def test_irmv1_nonnegative(vals, labels):
    assert irmv1_penalty([Tensor(np.reshape(vals, (2, 3)))], [labels]).item() >= 0.0


def test_irmv1_gradient():
    rng = np.random.default_rng(4)
    x = Tensor(rng.normal(size=(5, 3)))
    assert dc.finite_diff_check(lambda p: irmv1_env_penalty(dc.affine(x, p[0], None), [0, 1, 2, 1, 0]),
                                [rng.normal(size=(3, 3))]) < 1e-4


def test_consistency_examples():
    rng = np.random.default_rng(5)
    params = init_model(3, (4,), 4, 2, rng)
    x, y = rng.normal(size=(6, 3)), np.array([0, 1, 1, 0, 1, 0])
    z = featurize(params, x)
    assert consistency_loss(params, z, y).item() == env_risk(params, x, y).item()
    with pytest.raises(DimensionError):
        consistency_loss(params, z, y[:4])
    # copy order does not matter
    z2 = dc.concat_rows([z, z * 1.5])
    z2_swapped = dc.concat_rows([z * 1.5, z])
    yy = np.tile(y, 2)
    assert consistency_loss(params, z2, yy).item() == pytest.approx(consistency_loss(params, z2_swapped, yy).item(), abs=1e-14)


def test_consistency_grows_with_noise_for_trained_classifier():
    rng = np.random.default_rng(6)
    x = np.vstack([rng.normal(2, 0.3, (50, 2)), rng.normal(-2, 0.3, (50, 2))])
    y = np.repeat([1, 0], 50)
    params = init_model(2, (), 2, 2, rng)
    for _ in range(300):
        grads = dc.backward(env_risk(params, x, y), params.parameters())
        for p, g in zip(params.parameters(), grads):
            p.data = p.data - 0.5 * g
    z = featurize(params, x)
    xi = rng.standard_normal(z.shape)
    losses = [consistency_loss(params, z + Tensor(scale * xi), y).item() for scale in (0.0, 1.0, 10.0)]
    assert losses[0] < losses[1] < losses[2]


def _components(seed=0, lam=0.8):
    rng = np.random.default_rng(seed)
    params = init_model(3, (5,), 4, 2, rng)
    sda = init_sda(4, rng, zero_final=False)
    xs = [rng.normal(size=(6, 3)) for _ in range(2)]
    ys = [rng.integers(0, 2, 6) for _ in range(2)]
    risks = [env_risk(params, x, y) for x, y in zip(xs, ys)]
    aug_risks, sda_ls = [], []
    for x, y in zip(xs, ys):
        vb = vicinal_batch(sda, featurize(params, x), SdaConfig(lam=lam, U=3), rng)
        aug_risks.append(consistency_loss(params, vb.z_aug, np.tile(y, 3)))
        sda_ls.append(vb.loss)
    return risks, aug_risks, sda_ls[0] + sda_ls[1]


def test_mode_erm_is_vrex_with_zero_beta():
    risks, _, _ = _components()
    assert virm_total_loss("ERM", risks).item() == vrex_penalty(risks, 0.0).item()


def test_mode_a_with_zero_alpha_excludes_sda():
    risks, aug, sda_l = _components()
    expected = 0.5 * sum(r.item() + a.item() for r, a in zip(risks, aug))
    assert virm_total_loss("A", risks, aug, sda_l, alpha=0.0).item() == pytest.approx(expected, abs=1e-14)


def test_a_plus_v_without_noise_equals_v_plus_sda():
    risks, aug, sda_l = _components(lam=0.0)
    v = virm_total_loss("V", risks, beta=7.0).item()
    av = virm_total_loss("A_plus_V", risks, aug, sda_l, alpha=0.5, beta=7.0).item()
    assert av == pytest.approx(v + 0.5 * sda_l.item(), abs=1e-12)


def test_all_modes_collapse_to_erm():
    risks, aug, sda_l = _components(lam=0.0)
    erm = virm_total_loss("ERM", risks).item()
    for mode in AblationMode:
        val = virm_total_loss(mode, risks, aug, sda_l, alpha=0.0, beta=0.0).item()
        assert abs(val - erm) <= 1e-12, mode


def test_missing_components_raise():
    risks, aug, sda_l = _components()
    for mode in ("A", "VA", "A_plus_V"):
        with pytest.raises(ConfigError):
            virm_total_loss(mode, risks)
    with pytest.raises(ContractError):
        virm_total_loss("A", risks, aug[:1], sda_l)
    with pytest.raises(ValueError):
        virm_total_loss("bogus", risks)


def test_mode_flags():
    assert [m.value for m in AblationMode if m.uses_sda] == ["A", "VA", "A_plus_V"]
    assert [m.value for m in AblationMode if m.uses_penalty] == ["V", "VA", "A_plus_V"]


def full_loss(tensors, xs, ys, noise_seed, mode="A_plus_V", frozen=None):
    """Composite loss as a function of a flat tensor list: featurizer, classifier, estimator."""
    from virm.objectives import ModelParams
    from virm.sda import SdaParams, _NAMES

    (w0, b0, w1, b1, wc, bc), rest = tensors[:6], tensors[6:]
    params = ModelParams([(w0, b0), (w1, b1)], (wc, bc))
    sda = SdaParams(w1.shape[1], dict(zip(_NAMES, rest)))
    noise = np.random.default_rng(noise_seed)
    zs = [featurize(params, x) for x in xs]
    risks = [dc.softmax_cross_entropy(classify(params, z), y) for z, y in zip(zs, ys)]
    aug, sls = [], []
    for e, (z, y) in enumerate(zip(zs, ys)):
        vb = vicinal_batch(sda, z, SdaConfig(U=2), noise, None if frozen is None else frozen[e])
        aug.append(consistency_loss(params, vb.z_aug, np.tile(y, 2)))
        sls.append(vb.loss)
    return virm_total_loss(mode, risks, aug, sls[0] + sls[1], beta=3.0)


@pytest.mark.parametrize("mode", ["A", "VA", "A_plus_V"])
def test_full_loss_gradients_at_random_init(mode):
    for seed in range(3):
        rng = np.random.default_rng(seed)
        params = init_model(3, (4,), 3, 2, rng)
        sda = init_sda(3, rng, zero_final=False)
        point = [t.data for t in params.parameters() + sda.parameters()]
        xs = [rng.normal(size=(5, 3)) for _ in range(2)]
        ys = [rng.integers(0, 2, 5) for _ in range(2)]
        # the estimator reads a detached copy of z; hold that copy at its base value
        frozen = [featurize(params, x).data for x in xs]
        err = dc.finite_diff_check(lambda p: full_loss(p, xs, ys, 100 + seed, mode, frozen), point)
        assert err < 1e-4
