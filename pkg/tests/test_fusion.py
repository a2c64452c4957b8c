import numpy as np
import pytest
from oracles import composite_gradcheck, step_by_step_hds

from hfmf.config import ModelConfig
from hfmf.errors import ConfigurationError, ContractError
from hfmf.fusion import M1Model, hds, hierarchical_fuse, m1_forward, project_flatten
from hfmf.tensor import Tensor


def test_project_identity_is_reshape():
    f = np.random.default_rng(0).normal(size=(8, 3, 5))
    out = project_flatten(f, np.eye(8)).data
    for h in range(3):
        for w in range(5):
            np.testing.assert_array_equal(out[h * 5 + w], f[:, h, w])


def test_project_shape():
    out = project_flatten(np.zeros((64, 4, 4)), np.zeros((64, 64)))
    assert out.shape == (16, 64)


def test_project_matches_per_position_oracle():
    rng = np.random.default_rng(1)
    f, W = rng.normal(size=(16, 8, 8)), rng.normal(size=(16, 64))
    out = project_flatten(f, W).data
    for h in range(8):
        for w in range(8):
            np.testing.assert_allclose(out[h * 8 + w], f[:, h, w] @ W, atol=1e-12)


def test_hds_single_key():
    rng = np.random.default_rng(2)
    kv = rng.normal(size=(1, 8))
    out = hds(rng.normal(size=(1, 8)) * 100, kv).data
    np.testing.assert_allclose(out, kv, atol=1e-15)


def test_hds_identical_keys():
    row = np.random.default_rng(3).normal(size=8)
    out = hds(np.random.default_rng(4).normal(size=(5, 8)), np.tile(row, (7, 1))).data
    np.testing.assert_allclose(out, np.tile(row, (5, 1)), atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_hds_matches_step_by_step(seed):
    rng = np.random.default_rng(seed)
    q, kv = rng.normal(size=(4, 8)), rng.normal(size=(6, 8))
    np.testing.assert_allclose(hds(q, kv).data, step_by_step_hds(q, kv), rtol=0, atol=1e-10)


def test_hds_dim_mismatch():
    with pytest.raises(ContractError):
        hds(np.zeros((2, 4)), np.zeros((3, 5)))


@pytest.mark.parametrize("seed", range(3))
def test_chain_is_triple_composition(seed):
    rng = np.random.default_rng(seed)
    e = rng.normal(size=(16, 8))
    levels = tuple(Tensor(rng.normal(size=(n, 8))) for n in (64, 16, 4))
    chain = hierarchical_fuse(e, levels)
    manual = step_by_step_hds(step_by_step_hds(step_by_step_hds(e, levels[0].data), levels[1].data),
                              levels[2].data)
    np.testing.assert_allclose(chain.v_final.data, manual, rtol=0, atol=1e-10)
    assert chain.z_low.shape == chain.z_mid.shape == chain.z_high.shape == (16, 8)


def test_zero_query_gives_uniform_average():
    rng = np.random.default_rng(5)
    f1 = rng.normal(size=(64, 8))
    chain = hierarchical_fuse(np.zeros((16, 8)), (Tensor(f1), Tensor(f1[:16]), Tensor(f1[:4])))
    np.testing.assert_allclose(chain.z_low.data, np.tile(f1.mean(axis=0), (16, 1)), atol=1e-12)


@pytest.mark.parametrize("variant", ["full", "vit_only", "cnn_only"])
def test_m1_output_finite_and_deterministic(variant):
    m = M1Model(seed=0, variant=variant)
    img = np.random.default_rng(6).uniform(size=(3, 32, 32))
    a, b = m1_forward(m, img).data, m1_forward(m, img).data
    assert a.shape == (2,) and np.all(np.isfinite(a))
    np.testing.assert_array_equal(a, b)


def test_m1_batch_matches_single():
    m = M1Model(seed=1)
    imgs = np.random.default_rng(7).uniform(size=(3, 3, 32, 32))
    batch = m(imgs).data
    for i in range(3):
        np.testing.assert_allclose(batch[i], m1_forward(m, imgs[i]).data, atol=1e-12)


def test_m1_rejects_unknown_variant():
    with pytest.raises(ConfigurationError):
        M1Model(variant="both")


def test_m1_gradients_one_seed():
    m = M1Model(ModelConfig(), seed=3)
    img = np.random.default_rng(3).uniform(size=(3, 32, 32))
    rep, expected = composite_gradcheck(lambda x: m1_forward(m, x), img, m.parameters(), 3)
    assert rep.max_rel_error < 1e-4
    assert rep.checked == expected
