import numpy as np
import pytest

from anyprec.data import synth_dataset
from anyprec.diagnostics import (
    GradientTrace,
    activation_histogram,
    bn_calibrate,
    cross_bit_robustness,
    fgsm_attack,
    record_gradient_traces,
    uca,
    uca_matrix,
)
from anyprec.errors import PrecisionUnavailableError, UndefinedStatisticError, UsageError
from anyprec.network import init_model
from anyprec.training import TrainConfig, evaluate, train


def _trace(bits, steps):
    names = ["l1.weight", "l2.weight"]
    t = GradientTrace(bits=bits, layer_names=names)
    t.steps = steps
    return t


# ---------------------------------------------------------------------------
# uca
# ---------------------------------------------------------------------------


def test_uca_self_similarity(rng):
    steps = [{"l1.weight": rng.normal(size=6), "l2.weight": rng.normal(size=4)} for _ in range(3)]
    t = _trace(8, steps)
    assert uca(t, t) == pytest.approx(1.0)


def test_uca_antiparallel(rng):
    steps = [{"l1.weight": rng.normal(size=6), "l2.weight": rng.normal(size=4)} for _ in range(3)]
    neg = [{k: -v for k, v in s.items()} for s in steps]
    assert uca(_trace(1, steps), _trace(2, neg)) == pytest.approx(-1.0)


def test_uca_orthogonal():
    a = [{"l1.weight": np.array([1.0, 0.0]), "l2.weight": np.array([0.0, 1.0])}]
    b = [{"l1.weight": np.array([0.0, 1.0]), "l2.weight": np.array([1.0, 0.0])}]
    assert uca(_trace(1, a), _trace(2, b)) == pytest.approx(0.0)


def test_uca_excludes_zero_norm_pairs():
    a = [{"l1.weight": np.array([1.0, 0.0]), "l2.weight": np.zeros(2)}]
    b = [{"l1.weight": np.array([1.0, 0.0]), "l2.weight": np.ones(2)}]
    assert uca(_trace(1, a), _trace(2, b)) == pytest.approx(1.0)  # only one valid pair


def test_uca_no_valid_pairs():
    a = [{"l1.weight": np.zeros(2), "l2.weight": np.zeros(2)}]
    with pytest.raises(UndefinedStatisticError):
        uca(_trace(1, a), _trace(2, a))


def test_uca_misaligned_traces(rng):
    a = _trace(1, [{"l1.weight": rng.normal(size=3), "l2.weight": rng.normal(size=3)}])
    b = _trace(2, [])
    with pytest.raises(UsageError):
        uca(a, b)


def test_uca_bounded(rng):
    for _ in range(10):
        a = [{"l1.weight": rng.normal(size=8), "l2.weight": rng.normal(size=8)} for _ in range(2)]
        b = [{"l1.weight": rng.normal(size=8), "l2.weight": rng.normal(size=8)} for _ in range(2)]
        v = uca(_trace(1, a), _trace(2, b))
        assert -1.0 <= v <= 1.0


# ---------------------------------------------------------------------------
# recorded traces
# ---------------------------------------------------------------------------


def test_record_traces_shapes_and_matrix(mlp_arch):
    bits = [1, 8, 32]
    model = init_model(mlp_arch, bits, seed=0)
    ds = synth_dataset("two_gaussians", 128, seed=1)
    traces = record_gradient_traces(model, ds, bits, steps=4,
                                    config=TrainConfig(candidate_bits=bits, batch_size=32, kd_mode="off"))
    assert sorted(traces) == bits
    for t in traces.values():
        assert t.n_steps == 4
        assert t.layer_names == ["linear1.weight", "linear2.weight", "linear3.weight"]
    m = uca_matrix(traces)
    for a in bits:
        assert m[a][a] == pytest.approx(1.0)
        for b in bits:
            assert m[a][b] == pytest.approx(m[b][a])
            assert -1.0 <= m[a][b] <= 1.0


def test_record_traces_single_fp32(mlp_arch):
    model = init_model(mlp_arch, [32], seed=0)
    ds = synth_dataset("two_gaussians", 96, seed=2)
    traces = record_gradient_traces(model, ds, [32], steps=2,
                                    config=TrainConfig(candidate_bits=[32], batch_size=32, kd_mode="off"))
    assert uca(traces[32], traces[32]) == pytest.approx(1.0)


def test_record_traces_frozen_model_constant(mlp_arch):
    bits = [8, 32]
    ds = synth_dataset("two_gaussians", 32, seed=3)
    cfg = TrainConfig(candidate_bits=bits, batch_size=32, base_lr=0.0, kd_mode="off")
    model = init_model(mlp_arch, bits, seed=0)
    traces = record_gradient_traces(model, ds, bits, steps=3, config=cfg)
    # lr=0 and a single replayed batch: identical gradients every step
    for t in traces.values():
        for name in t.layer_names:
            for s in t.steps[1:]:
                assert np.allclose(s[name], t.steps[0][name], atol=1e-12)


# ---------------------------------------------------------------------------
# bn calibration
# ---------------------------------------------------------------------------


def _trained_mlp(mlp_arch, bits=(1, 2, 4, 8, 32), epochs=4, seed=0):
    model = init_model(mlp_arch, list(bits), seed=seed)
    ds = synth_dataset("two_gaussians", 256, seed=seed + 10)
    cfg = TrainConfig(candidate_bits=list(bits), epochs=epochs, batch_size=32, seed=seed)
    train(model, ds, cfg)
    return model, ds


def test_calibrate_registers_missing_bit(mlp_arch):
    model, ds = _trained_mlp(mlp_arch)
    with pytest.raises(PrecisionUnavailableError):
        model.select_bitwidth(3)
    bn_calibrate(model, 3, ds, num_batches=20)
    model.select_bitwidth(3)  # now fine
    res = evaluate(model, ds.images, ds.labels, [3])
    assert res[3][1] > 0.5


def test_calibrate_existing_bit_rejected(mlp_arch):
    model, ds = _trained_mlp(mlp_arch, bits=(8, 32), epochs=1)
    with pytest.raises(UsageError):
        bn_calibrate(model, 8, ds, num_batches=1)


def test_calibrate_touches_only_new_bn_state(mlp_arch):
    model, ds = _trained_mlp(mlp_arch, bits=(8, 32), epochs=1)
    before = model.state_dict()
    bn_calibrate(model, 5, ds, num_batches=10)
    after = model.state_dict()
    for k in before:
        assert np.array_equal(before[k], after[k]), k
    new_keys = [k for k in after if k not in before]
    assert new_keys and all(".5." in k for k in new_keys)


def test_recalibrating_existing_bit_reproduces_statistics(mlp_arch):
    """Resetting bit 8's statistics and re-estimating them by forwarding
    data must land within sampling noise of the trained statistics."""
    model, ds = _trained_mlp(mlp_arch, epochs=8)
    trained = {name: (bank.states[8].running_mean.copy(), bank.states[8].running_var.copy())
               for name, bank in model.banks.items()}
    for bank in model.banks.values():
        st = bank.states[8]
        st.running_mean = np.zeros(bank.channels, dtype=np.float32)
        st.running_var = np.ones(bank.channels, dtype=np.float32)
    model.select_bitwidth(8)
    count = 0
    while count < 100:
        for start in range(0, len(ds), 64):
            xb = ds.images[start:start + 64]
            if xb.shape[0] < 2:
                continue
            model.forward(xb, training=True)
            count += 1
            if count >= 100:
                break
    for name, bank in model.banks.items():
        mean_t, var_t = trained[name]
        st = bank.states[8]
        scale = np.sqrt(var_t + 1e-5)
        # geometric running average over 100 batches: generous noise bound
        assert np.abs(st.running_mean - mean_t).max() <= 0.5 * scale.max(), name
        assert np.abs(st.running_var - var_t).max() <= 0.75 * var_t.max() + 0.1, name


def test_calibrate_gamma_beta_from_nearest_bit(mlp_arch):
    model, _ds = _trained_mlp(mlp_arch, bits=(1, 4, 32), epochs=1)
    bn_calibrate(model, 3, _ds, num_batches=2)
    for bank in model.banks.values():
        # nearest existing to 3 is 4
        assert np.array_equal(bank.states[3].gamma.data, bank.states[4].gamma.data)
        assert np.array_equal(bank.states[3].beta.data, bank.states[4].beta.data)


def test_calibrate_zero_input_gives_bias_driven_statistics(mlp_arch):
    """All-zero inputs: the first layer emits its bias, so the calibrated
    running mean converges there and the variance collapses."""
    from anyprec.data import Dataset

    model, _ = _trained_mlp(mlp_arch, bits=(8, 32), epochs=1)
    zeros = Dataset(np.zeros((128, 1, 1, 8), dtype=np.float32),
                    np.zeros(128, dtype=np.int64))
    bn_calibrate(model, 5, zeros, num_batches=100)
    st = model.banks["bn1"].states[5]
    bias = model.params["linear1.bias"].data
    assert np.allclose(st.running_mean, bias, atol=1e-4)
    assert np.abs(st.running_var).max() < 1e-4  # 0.9^100 of the init remains


# ---------------------------------------------------------------------------
# histograms
# ---------------------------------------------------------------------------


def test_histogram_counts_and_conservation(mlp_arch):
    model, ds = _trained_mlp(mlp_arch, bits=(1, 8, 32), epochs=1)
    n = 100
    report = activation_histogram(model, ds.subset(n), [1, 8], ["linear1", "bn1"])
    for e in report.entries:
        assert e.counts.sum() == e.counts.sum() == n * 32  # 32 features per site
        assert np.all(np.diff(e.edges) > 0)
        assert len(e.counts) == 64


def test_histogram_invalid_site(mlp_arch):
    model, ds = _trained_mlp(mlp_arch, bits=(8, 32), epochs=1)
    with pytest.raises(UsageError):
        activation_histogram(model, ds, [8], ["nonexistent"])


def test_histogram_constant_activations_single_bin(mlp_arch):
    model, _ = _trained_mlp(mlp_arch, bits=(8, 32), epochs=1)
    from anyprec.data import Dataset

    # zeroed first layer: its output is constant whatever the input
    model.params["linear1.weight"].data[:] = 0.0
    model.params["linear1.bias"].data[:] = 0.0
    const = Dataset(np.full((16, 1, 1, 8), 0.5, dtype=np.float32),
                    np.zeros(16, dtype=np.int64))
    report = activation_histogram(model, const, [8], ["linear1"])
    for e in report.entries:
        assert (e.counts > 0).sum() == 1
        assert e.counts.sum() == 16 * 32


def test_histogram_csv_rows(mlp_arch):
    model, ds = _trained_mlp(mlp_arch, bits=(8, 32), epochs=1)
    report = activation_histogram(model, ds.subset(50), [8], ["bn1"])
    rows = report.to_csv_rows()
    assert rows[0] == ("site", "bit", "bin_lo", "bin_hi", "count")
    assert len(rows) == 1 + 64


def test_post_bn_rectifies_distribution_shift(mlp_arch):
    """Pre-BN means drift apart across bits; per-bit BN pulls them together."""
    model, ds = _trained_mlp(mlp_arch, bits=(1, 2, 4, 8, 32), epochs=6)
    report = activation_histogram(model, ds, [1, 8], ["linear2", "bn2"])
    pre1, pre8 = report.get("linear2", 1), report.get("linear2", 8)
    post1, post8 = report.get("bn2", 1), report.get("bn2", 8)
    pooled_pre = np.sqrt((pre1.variance + pre8.variance) / 2)
    pooled_post = np.sqrt((post1.variance + post8.variance) / 2)
    shift_pre = abs(pre1.mean - pre8.mean) / pooled_pre
    shift_post = abs(post1.mean - post8.mean) / pooled_post
    assert shift_post < 0.1
    assert shift_pre > shift_post


# ---------------------------------------------------------------------------
# fgsm / robustness
# ---------------------------------------------------------------------------


def test_fgsm_zero_epsilon_identity(mlp_arch):
    model, ds = _trained_mlp(mlp_arch, bits=(8, 32), epochs=1)
    x = ds.images[:8]
    adv = fgsm_attack(model, x, ds.labels[:8], 0.0, attack_bits=8)
    assert np.array_equal(adv, x)


def test_fgsm_epsilon_ball_exact(mlp_arch):
    model, ds = _trained_mlp(mlp_arch, bits=(1, 8, 32), epochs=2)
    x = ds.images[:64]
    eps = 0.007
    for bits in (1, 8, 32):
        adv = fgsm_attack(model, x, ds.labels[:64], eps, attack_bits=bits)
        assert np.abs(adv.astype(np.float64) - x.astype(np.float64)).max() <= eps
        assert adv.min() >= 0.0 and adv.max() <= 1.0


def test_fgsm_moves_by_epsilon_where_gradient_nonzero(mlp_arch):
    model, ds = _trained_mlp(mlp_arch, bits=(8, 32), epochs=2)
    x = ds.images[:16]
    eps = 0.01
    adv = fgsm_attack(model, x, ds.labels[:16], eps, attack_bits=32)
    delta = np.abs(adv.astype(np.float64) - x.astype(np.float64))
    moved = delta > 0
    # wherever it moved (and did not hit the [0,1] wall) the step is +-eps
    interior = moved & (adv > 0) & (adv < 1)
    assert interior.any()
    assert np.allclose(delta[interior], eps, atol=1e-9)


def test_fgsm_restores_active_bits(mlp_arch):
    model, ds = _trained_mlp(mlp_arch, bits=(8, 32), epochs=1)
    model.select_bitwidth(32)
    fgsm_attack(model, ds.images[:4], ds.labels[:4], 0.007, attack_bits=8)
    assert model.active_bits == 32


def test_cross_bit_robustness_matrix(mlp_arch):
    model, ds = _trained_mlp(mlp_arch, bits=(1, 8, 32), epochs=4)
    result = cross_bit_robustness(model, ds, 0.05, [1, 8, 32], sample_limit=128)
    assert result.bits == [1, 8, 32]
    for a in result.bits:
        for d in result.bits:
            assert 0.0 <= result.matrix[a][d] <= 1.0
        # attacks never help at the attacked bit
        assert result.matrix[a][a] <= result.clean[a] + 1e-9
    payload = result.to_json_dict()
    assert set(payload) == {"epsilon", "bits", "clean_accuracy", "matrix"}


def test_cross_bit_robustness_zero_eps_equals_clean(mlp_arch):
    model, ds = _trained_mlp(mlp_arch, bits=(8, 32), epochs=2)
    result = cross_bit_robustness(model, ds, 0.0, [8, 32], sample_limit=64)
    for a in result.bits:
        for d in result.bits:
            assert result.matrix[a][d] == pytest.approx(result.clean[d])
