import numpy as np
import pytest
from conftest import dense_topk_oracle, random_dense, random_switch, switch_oracle
from hypothesis import given, settings
from hypothesis import strategies as st

from switch_sae.model import (
    ArchSpec,
    DenseSaeParams,
    flops_per_activation,
    matched_dense,
    relu_sae_forward,
    switch_sae_forward,
    topk_sae_forward,
)
from switch_sae.numerics import Rng


# --- TopK ----------------------------------------------------------------------


def test_identity_autoencoder():
    x = np.array([[1.0, -2.0, 0.5], [0.0, 3.0, -1.0]])
    p = DenseSaeParams(np.eye(3), np.eye(3), np.zeros(3))
    _, x_hat = topk_sae_forward(p, x, 3)
    np.testing.assert_array_equal(x_hat, x)


def test_topk_matches_dense_mask_oracle(rng):
    p = random_dense(rng, 2, 4)
    x = rng.normal((3, 2))
    lat, x_hat = topk_sae_forward(p, x, 2)
    expected = np.array([p.w_dec @ dense_topk_oracle(p.w_enc @ (r - p.b_pre), 2) + p.b_pre for r in x])
    np.testing.assert_allclose(x_hat, expected, rtol=1e-6, atol=1e-12)
    assert (np.count_nonzero(lat.to_dense(), axis=1) == 2).all()


def test_topk_dimension_mismatch(rng):
    p = random_dense(rng, 2, 4)
    with pytest.raises(ValueError):
        topk_sae_forward(p, np.zeros((3, 5)), 2)
    with pytest.raises(ValueError):
        topk_sae_forward(p, np.zeros((3, 2)), 5)


def test_topk_reconstruction_in_span_of_selected(rng):
    p = random_dense(rng, 8, 16)
    x = rng.normal((20, 8))
    lat, x_hat = topk_sae_forward(p, x, 3)
    for t in range(len(x)):
        cols = p.w_dec[:, lat.indices[t]]
        coef, *_ = np.linalg.lstsq(cols, x_hat[t] - p.b_pre, rcond=None)
        assert np.linalg.norm(cols @ coef - (x_hat[t] - p.b_pre)) < 1e-6


# --- ReLU ------------------------------------------------------------------------


def test_relu_all_negative_gives_bias():
    p = DenseSaeParams(-np.ones((3, 2)), np.eye(2, 3), np.array([0.5, -0.5]))
    x = np.array([[2.0, 2.0], [1.0, 3.0]])  # x - b_pre > 0, so W_enc(x - b) < 0
    z, x_hat = relu_sae_forward(p, x)
    assert not z.any()
    np.testing.assert_array_equal(x_hat, np.tile(p.b_pre, (2, 1)))


def test_relu_all_positive_equals_full_topk(rng):
    d, M = 3, 5
    p = random_dense(rng, d, M)
    p.w_enc = np.abs(p.w_enc)
    p.b_pre = np.zeros(d)
    x = np.abs(rng.normal((4, d))) + 0.1
    _, relu_hat = relu_sae_forward(p, x)
    _, topk_hat = topk_sae_forward(p, x, M)
    np.testing.assert_allclose(relu_hat, topk_hat, rtol=1e-12)


def test_relu_hand_case():
    w_enc = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, -1.0]])
    w_dec = np.array([[1.0, 0.0, 0.6], [0.0, 1.0, 0.8]])
    b = np.array([0.5, 0.5])
    x = np.array([[1.5, 2.5]])
    # u = (1, 2); pre = (1, 2, -1); z = (1, 2, 0); x_hat = (1, 2) + b
    z, x_hat = relu_sae_forward(DenseSaeParams(w_enc, w_dec, b), x)
    np.testing.assert_array_equal(z, [[1.0, 2.0, 0.0]])
    np.testing.assert_array_equal(x_hat, [[1.5, 2.5]])


# --- Switch ------------------------------------------------------------------------


def test_switch_single_expert(rng):
    p = random_switch(rng, 4, 1, 6)
    x = rng.normal((5, 4))
    routing, lat, x_hat = switch_sae_forward(p, x, 2)
    np.testing.assert_array_equal(routing.probs, np.ones((5, 1)))
    _, dense_hat = topk_sae_forward(p.expert(0), x, 2)
    np.testing.assert_allclose(x_hat, dense_hat, rtol=1e-12)


def test_switch_saturated_router(rng):
    p = random_switch(rng, 3, 4, 4)
    p.w_router = np.zeros((4, 3))
    p.w_router[2] = [40.0, 0.0, 0.0]
    p.b_router = np.zeros(3)
    x = np.array([[1.0, 0.2, -0.3], [2.0, -1.0, 0.5]])
    routing, _, _ = switch_sae_forward(p, x, 2)
    assert routing.selected.tolist() == [2, 2]
    np.testing.assert_allclose(routing.selected_prob, 1.0, atol=1e-9)


def test_switch_matches_all_experts_oracle(rng):
    p = random_switch(rng, 3, 2, 4)
    x = rng.normal((4, 3))
    _, lat, x_hat = switch_sae_forward(p, x, 2)
    np.testing.assert_allclose(x_hat, switch_oracle(p, x, 2), rtol=1e-6, atol=1e-12)
    assert (np.count_nonzero(lat.values, axis=1) == 2).all()


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 8), st.integers(1, 4), st.integers(1, 4), st.integers(1, 6), st.integers(0, 2**32))
def test_switch_forward_equivalence_property(d, N, m, T, seed):
    rng = Rng(seed)
    p = random_switch(rng, d, N, m)
    x = rng.normal((T, d))
    k = 1 + seed % m
    routing, lat, x_hat = switch_sae_forward(p, x, k)
    expected = switch_oracle(p, x, k)
    scale = np.maximum(np.abs(expected), 1e-12)
    assert np.all(np.abs(x_hat - expected) <= 1e-6 * scale + 1e-12)
    assert abs(routing.f.sum() - 1) < 1e-9 and abs(routing.P.sum() - 1) < 1e-9
    np.testing.assert_allclose(routing.probs.sum(axis=1), 1.0, atol=1e-9)
    np.testing.assert_array_equal(routing.f * T, np.round(routing.f * T))


def test_switch_routing_shift_invariance(rng):
    p = random_switch(rng, 5, 4, 3)
    x = rng.normal((10, 5))
    before, _, _ = switch_sae_forward(p, x, 2)
    shifted = p.copy()
    shifted.w_router = p.w_router + rng.normal(5)  # same vector added to every row
    after, _, _ = switch_sae_forward(shifted, x, 2)
    np.testing.assert_array_equal(before.selected, after.selected)
    np.testing.assert_allclose(before.probs, after.probs, rtol=1e-9)


def test_switch_only_reads_selected_expert(rng):
    p = random_switch(rng, 4, 3, 4)
    x = rng.normal((6, 4))
    routing, _, x_hat = switch_sae_forward(p, x, 2)
    unused = sorted(set(range(3)) - set(routing.selected.tolist()))
    if not unused:
        x = x[routing.selected != 0]
        routing, _, x_hat = switch_sae_forward(p, x, 2)
        unused = [0]
    poisoned = p.copy()
    poisoned.w_enc[unused] = np.nan
    poisoned.w_dec[unused] = np.nan
    _, _, x_hat2 = switch_sae_forward(poisoned, x, 2)
    np.testing.assert_array_equal(x_hat, x_hat2)


# --- FLOPs -----------------------------------------------------------------------


def test_flops_dense_paper_scale():
    r = flops_per_activation(ArchSpec("topk", 768, 24576, 1, 32))
    assert r.encoder_flops == 37_748_736
    assert r.router_flops == 0
    assert r.total_flops == r.encoder_flops + r.decoder_flops + r.bias_flops


def test_flops_width_matched_switch():
    sw = flops_per_activation(ArchSpec("switch", 768, 24576, 16, 32))
    assert sw.encoder_flops == 2_359_296 and sw.router_flops == 24_576
    dense = flops_per_activation(ArchSpec("topk", 768, 24576, 1, 32))
    ratio = dense.encoder_flops / (sw.encoder_flops + sw.router_flops)
    assert ratio == pytest.approx(15.835, abs=1e-3)


def test_flops_single_expert_matches_dense():
    a = flops_per_activation(ArchSpec("switch", 64, 256, 1, 8))
    b = flops_per_activation(ArchSpec("topk", 64, 256, 1, 8))
    assert a.encoder_flops == b.encoder_flops


def test_flops_monotone():
    enc = [flops_per_activation(ArchSpec("topk", 32, M, 1, 4)).encoder_flops for M in (64, 128, 256)]
    assert enc[1] == 2 * enc[0] and enc[2] == 2 * enc[1]
    sw = [flops_per_activation(ArchSpec("switch", 32, 256, N, 4)).encoder_flops for N in (1, 2, 4, 8)]
    assert sw == [2 * (256 // N) * 32 for N in (1, 2, 4, 8)]


def test_matched_dense_counterparts():
    m = matched_dense(ArchSpec("switch", 64, 1024, 4, 8))
    assert m["width_matched"].M == 1024 and m["flop_matched"].M == 256
    assert (flops_per_activation(m["flop_matched"]).encoder_flops
            == flops_per_activation(ArchSpec("switch", 64, 1024, 4, 8)).encoder_flops)


def test_arch_spec_validation():
    with pytest.raises(ValueError):
        ArchSpec("switch", 4, 10, 3, 1)
    with pytest.raises(ValueError):
        ArchSpec("gated", 4, 8)
