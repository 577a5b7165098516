"""Encoder forward/backward contracts, checked against finite differences."""

import numpy as np
import pytest

from touchalign.encoder import (
    EncoderConfig,
    backward_batch,
    compute_prototypes,
    encode_batch,
    encode_touch,
    extract_patches,
    forward_batch,
    init_params,
    param_order,
    resolve_sensor,
    resolve_sensors_batch,
)

TINY = EncoderConfig(
    h=8, w=8, patch_size=4, dim=8, n_blocks=1, n_heads=2,
    out_dim=4, tokens_per_sensor=2, n_sensors=2,
)


def _tiny_inputs(b=3, seed=0, dtype=np.float64):
    rng = np.random.default_rng(seed)
    images = rng.random((b, 8, 8, 3)).astype(dtype)
    sensors = rng.integers(0, 2, b)
    return images, sensors


def _f64_params(config, seed=0):
    return {k: v.astype(np.float64) for k, v in init_params(config, seed).items()}


def test_param_order_matches_init():
    params = init_params(TINY, seed=0)
    assert list(params.keys()) == param_order(TINY)


def test_init_kinds():
    params = init_params(TINY, seed=0)
    np.testing.assert_array_equal(params["blocks.0.ln1_g"], 1.0)
    np.testing.assert_array_equal(params["final_ln_g"], 1.0)
    for name in ("blocks.0.ln1_b", "blocks.0.qkv_b", "blocks.0.mlp_b1",
                 "blocks.0.mlp_b2", "patch_b", "proj_b", "final_ln_b"):
        np.testing.assert_array_equal(params[name], 0.0)
    # Weights draw from a 0.02-std Gaussian.
    w = params["blocks.0.qkv_w"]
    assert 0.005 < w.std() < 0.05 and abs(w.mean()) < 0.01


def test_init_deterministic_and_seed_sensitive():
    a = init_params(TINY, seed=1)
    b = init_params(TINY, seed=1)
    c = init_params(TINY, seed=2)
    for k in a:
        np.testing.assert_array_equal(a[k], b[k])
    assert any(np.any(a[k] != c[k]) for k in a)


def test_extract_patches_layout():
    img = np.arange(8 * 8 * 3, dtype=np.float64).reshape(1, 8, 8, 3)
    patches = extract_patches(img, patch_size=4)
    assert patches.shape == (1, 4, 48)
    # First patch is the top-left 4x4 block, row-major, channels fastest.
    expect = img[0, :4, :4, :].reshape(-1)
    np.testing.assert_array_equal(patches[0, 0], expect)
    # Second patch is the top-right block.
    expect = img[0, :4, 4:, :].reshape(-1)
    np.testing.assert_array_equal(patches[0, 1], expect)


def test_embeddings_unit_norm_float32():
    params = init_params(TINY, seed=0)
    images, sensors = _tiny_inputs(dtype=np.float32)
    emb, _ = forward_batch(params, TINY, images, sensors, want_cache=False)
    assert emb.dtype == np.float32
    np.testing.assert_allclose(np.linalg.norm(emb.astype(np.float64), axis=1), 1.0, atol=1e-6)


def test_forward_dtype_follows_inputs():
    params = _f64_params(TINY)
    images, sensors = _tiny_inputs()
    emb, _ = forward_batch(params, TINY, images, sensors, want_cache=False)
    assert emb.dtype == np.float64
    np.testing.assert_allclose(np.linalg.norm(emb, axis=1), 1.0, atol=1e-12)


def test_sensor_index_changes_embedding():
    params = init_params(TINY, seed=0)
    images, _ = _tiny_inputs(b=2, dtype=np.float32)
    e0 = encode_batch(params, TINY, images, np.array([0, 0]))
    e1 = encode_batch(params, TINY, images, np.array([1, 1]))
    assert np.any(e0 != e1)


def test_no_token_config_ignores_sensor_index():
    cfg = EncoderConfig(h=8, w=8, patch_size=4, dim=8, n_blocks=1, n_heads=2,
                        out_dim=4, tokens_per_sensor=0, n_sensors=2)
    params = init_params(cfg, seed=0)
    assert "sensor_tokens" not in params
    images, _ = _tiny_inputs(b=2, dtype=np.float32)
    e0 = encode_batch(params, cfg, images, np.array([0, 0]))
    e1 = encode_batch(params, cfg, images, np.array([1, 1]))
    np.testing.assert_array_equal(e0, e1)


def test_encode_touch_single_matches_batch():
    params = init_params(TINY, seed=0)
    images, sensors = _tiny_inputs(b=4, dtype=np.float32)
    batch = encode_batch(params, TINY, images, sensors)
    one = encode_touch(images[2], int(sensors[2]), params, TINY)
    np.testing.assert_allclose(one, batch[2], atol=1e-6)


# --- gradients ----------------------------------------------------------------

def _loss_and_grads(params, config, images, sensors, target):
    emb, cache = forward_batch(params, config, images, sensors, want_cache=True)
    loss = float(np.sum(emb * target))
    grads = backward_batch(params, cache, target.astype(emb.dtype))
    return loss, grads


def test_finite_difference_all_tensors():
    config = TINY
    params = _f64_params(config, seed=3)
    images, sensors = _tiny_inputs(b=3, seed=4)
    sensors = np.array([0, 1, 0])  # exercise both sensors' tokens
    rng = np.random.default_rng(5)
    target = rng.standard_normal((3, config.out_dim))

    _, grads = _loss_and_grads(params, config, images, sensors, target)
    eps = 1e-4
    worst = 0.0
    for name in param_order(config):
        analytic = grads[name]
        flat = params[name].reshape(-1)
        g_flat = analytic.reshape(-1)
        idx = np.linspace(0, flat.size - 1, min(flat.size, 40)).astype(int)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            up, _ = _loss_and_grads(params, config, images, sensors, target)
            flat[i] = orig - eps
            down, _ = _loss_and_grads(params, config, images, sensors, target)
            flat[i] = orig
            fd = (up - down) / (2 * eps)
            denom = max(abs(fd), abs(g_flat[i]), 1e-6)
            rel = abs(fd - g_flat[i]) / denom
            worst = max(worst, rel)
            assert rel < 1e-3, f"{name}[{i}]: analytic {g_flat[i]} vs fd {fd}"
    assert worst < 1e-3


def test_unused_sensor_tokens_get_exact_zero_grad():
    config = TINY
    params = _f64_params(config, seed=0)
    images, _ = _tiny_inputs(b=3)
    sensors = np.array([0, 0, 0])  # sensor 1 tokens never touched
    rng = np.random.default_rng(1)
    target = rng.standard_normal((3, config.out_dim))
    _, grads = _loss_and_grads(params, config, images, sensors, target)
    np.testing.assert_array_equal(grads["sensor_tokens"][1], 0.0)
    assert np.any(grads["sensor_tokens"][0] != 0.0)


def test_grad_shapes_match_params():
    params = _f64_params(TINY)
    images, sensors = _tiny_inputs()
    target = np.ones((3, TINY.out_dim))
    _, grads = _loss_and_grads(params, TINY, images, sensors, target)
    assert set(grads) == set(params)
    for k in params:
        assert grads[k].shape == params[k].shape


# --- prototypes / sensor resolution -------------------------------------------

def test_compute_prototypes_oracle():
    from touchalign.datagen import WorldConfig, generate_world

    ds = generate_world(
        WorldConfig(m=2, k=3, image_size=16, patch_size=4,
                    pairs_per_sensor=40, objects_per_class=4),
        seed=0,
    )
    protos = compute_prototypes(ds, "train")
    assert protos.shape == (3, 3)
    for s, part in enumerate(ds.parts):
        idx = part.split_indices("train")
        manual = part.touch[idx].astype(np.float64).mean(axis=(1, 2)).mean(axis=0)
        # Implementation keeps per-image means in float32; 1e-6 is plenty for
        # prototypes whose pairwise background gaps are >= 0.2/3 per channel.
        np.testing.assert_allclose(protos[s], manual, atol=1e-6)


def test_resolve_sensor_matches_exhaustive_l1():
    rng = np.random.default_rng(7)
    bank = rng.random((4, 3))
    for _ in range(50):
        img = rng.random((8, 8, 3)).astype(np.float32)
        got = resolve_sensor(img, bank)
        mean = img.astype(np.float64).mean(axis=(0, 1))
        dists = np.abs(bank - mean).sum(axis=1)
        assert got == int(np.argmin(dists))


def test_resolve_sensor_tie_breaks_low_index():
    bank = np.array([[0.5, 0.5, 0.5], [0.5, 0.5, 0.5]])
    img = np.full((4, 4, 3), 0.25, dtype=np.float32)
    assert resolve_sensor(img, bank) == 0


def test_resolve_sensors_batch_consistent():
    rng = np.random.default_rng(8)
    bank = rng.random((3, 3))
    imgs = rng.random((10, 8, 8, 3)).astype(np.float32)
    batch = resolve_sensors_batch(imgs, bank)
    singles = [resolve_sensor(img, bank) for img in imgs]
    np.testing.assert_array_equal(batch, singles)
