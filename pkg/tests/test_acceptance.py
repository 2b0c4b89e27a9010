"""Acceptance criteria 1-8, one PASS/FAIL line each (printed in the terminal summary).

Run alone with ``pytest tests/test_acceptance.py -v``; criterion 5 trains three
desk-scale networks and takes the longest.
"""

import dataclasses
import time
from pathlib import Path

import numpy as np
import pytest

from hnext import autodiff as ad
from hnext.autodiff import gradient_check
from hnext.backbone import (
    BatchNormState,
    ConvLayerSpec,
    StreamBundle,
    h_batchnorm,
    h_bn_relu,
    h_conv,
    h_meanpool,
    h_relu,
    magnitude_readout,
    mask_tensor,
    upscale_tensor,
)
from hnext.cli import main as cli_main
from hnext.config import load_run_config, reference_mnist_config
from hnext.data import (
    FIXED_ANGLES,
    MnistSource,
    generate_dataset,
    read_archive,
    write_idx,
)
from hnext.filters import FilterMode
from hnext.grid import make_circular_mask, rotate_resample
from hnext.model import count_parameters, forward, init_params
from hnext.pooling import MsaPoolConfig, gap_pool, msa_pool, zernike_basis, zernike_pool
from hnext.train import accuracy_at_angle, loss_cross_entropy, train
from hnext.verify import backbone_features, fixed_angle_table

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
QUARTER_TURNS = (np.pi / 2, np.pi, 3 * np.pi / 2)


def random_draw(config, seed, x):
    """Random values for every trainable array, with batch-norm running
    statistics calibrated by one training-mode pass over ``x``."""
    rng = np.random.default_rng(seed)
    params = init_params(config, seed)
    for name in params.names():
        shape = params[name].shape
        if name.endswith("bn_gamma"):
            params[name] = rng.uniform(0.5, 2.0, shape)
        elif name.endswith(("bn_delta", "relu_bias")):
            params[name] = rng.normal(0.0, 0.5, shape)
    forward(dataclasses.replace(config, bn_momentum=1.0), params, x, training=True)
    return params


def phase_law_worst(config, params, x, dtype):
    """Largest absolute and relative (to max |F|) quarter-turn residual over layers."""
    base, orders = backbone_features(config, params, x, dtype)
    phases = np.array(orders)[None, :, None, None, None]
    worst_abs = worst_rel = 0.0
    for q in (1, 2, 3):
        theta = q * np.pi / 2
        turned, _ = backbone_features(config, params, np.rot90(x, q, axes=(1, 2)), dtype)
        for f0, f1 in zip(base, turned):
            expected = np.exp(1j * phases * theta) * rotate_resample(f0.astype(np.complex128), theta)
            err = float(np.abs(f1 - expected).max())
            worst_abs = max(worst_abs, err)
            worst_rel = max(worst_rel, err / float(np.abs(f0).max()))
    return worst_abs, worst_rel


def test_criterion_1_exact_rotation_equivariance(acceptance):
    start = time.perf_counter()
    config = load_run_config(CONFIGS / "desk-upmask.yaml").network
    worst = {np.float64: (0.0, 0.0), np.float32: (0.0, 0.0)}
    cases = [(config, draw) for draw in range(32)] + [(reference_mnist_config(), 100 + d) for d in range(2)]
    for cfg, draw in cases:
        rng = np.random.default_rng(draw)
        x = rng.random((8, cfg.input_size, cfg.input_size)) * make_circular_mask(cfg.input_size, cfg.input_size)
        params = random_draw(cfg, draw, x)
        for dtype in worst:
            a, r = phase_law_worst(cfg, params, x, dtype)
            worst[dtype] = (max(worst[dtype][0], a), max(worst[dtype][1], r))
    (a64, r64), (a32, r32) = worst[np.float64], worst[np.float32]
    ok = a64 < 1e-8 and a32 < 1e-3
    acceptance(1, ok, f"worst 90/180/270 residual {a64:.2e} (64-bit, bound 1e-8), {a32:.2e} (32-bit, "
                      f"bound 1e-3); relative {r64:.1e} / {r32:.1e}; {len(cases)} draws x 8 inputs, "
                      f"{time.perf_counter() - start:.0f}s")
    assert ok


def test_criterion_2_hard_invariance_of_heads(acceptance):
    worst = {"gap": 0.0, "zernike": 0.0, "msa": 0.0}
    mask = make_circular_mask(28, 28)
    basis = zernike_basis(28, 8)
    msa_cfg = MsaPoolConfig(heads=2, model_width=6, key_width=4, buckets=16)
    for draw in range(8):
        rng = np.random.default_rng(draw)
        x = rng.random((3, 6, 28, 28)) * mask
        weights = {k: rng.normal(size=s) for k, s in msa_cfg.weight_shapes().items()}
        base = {"gap": gap_pool(x, mask).data, "zernike": zernike_pool(x, basis).data,
                "msa": msa_pool(x, mask, weights, msa_cfg).data}
        for q in (1, 2, 3):
            xr = np.rot90(x, q, axes=(-2, -1))
            turned = {"gap": gap_pool(xr, mask).data, "zernike": zernike_pool(xr, basis).data,
                      "msa": msa_pool(xr, mask, weights, msa_cfg).data}
            for head in worst:
                worst[head] = max(worst[head], float(np.abs(turned[head] - base[head]).max()))
    ok = max(worst.values()) < 1e-8
    acceptance(2, ok, "max head change under quarter turns: "
                      + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + " (bound 1e-8)")
    assert ok


def _gradient_audit():
    """Relative finite-difference error per differentiable operation (float64, eps 1e-5)."""
    rng = np.random.default_rng(7)

    def c(*shape):
        return rng.normal(size=shape) + 1j * rng.normal(size=shape)

    def away_from_kinks(z, bias, margin=0.05):
        mag = np.abs(z) + bias[None, :, :, None, None]
        assert np.abs(mag).min() > margin
        return z

    def real_probe(out_shape):
        G = rng.normal(size=out_shape)
        return lambda t: (t * G).sum()

    def complex_probe(out_shape):
        G = c(*out_shape)
        return lambda t: (t * np.conj(G)).real.sum()

    checks = {}
    z = c(2, 3, 4)
    cp = complex_probe(z.shape)
    rz = real_probe(z.shape)
    checks["abs"] = ([z], lambda t: rz(ad.abs_(t[0])))
    checks["unit_phase"] = ([z], lambda t: cp(ad.unit_phase(t[0])))
    checks["unit_phase[soft]"] = ([z], lambda t: cp(ad.unit_phase(t[0], 0.5)))
    xr = rng.normal(size=(3, 4))
    rp = real_probe(xr.shape)
    checks["relu"] = ([xr + np.sign(xr) * 0.1], lambda t: rp(ad.relu(t[0])))
    checks["exp"] = ([xr], lambda t: rp(ad.exp(t[0])))
    checks["log"] = ([np.abs(xr) + 0.5], lambda t: rp(ad.log(t[0])))
    checks["sqrt"] = ([np.abs(xr) + 0.5], lambda t: rp(ad.sqrt(t[0])))
    checks["softmax"] = ([xr], lambda t: rp(ad.softmax(t[0], axis=-1)))
    cp32 = complex_probe((3, 2))
    checks["matmul/add/mul/div"] = (
        [c(3, 4), c(4, 2), rng.normal(size=(3, 2)) + 2.0],
        lambda t: cp32((t[0] @ t[1]) * 2.0 / t[2] + t[2]))
    cp24 = complex_probe((2, 4))
    checks["einsum"] = ([c(2, 3), c(3, 4)], lambda t: cp24(ad.einsum("ij,jk->ik", t[0], t[1])))
    checks["cross_entropy"] = ([rng.normal(size=(4, 5))],
                               lambda t: loss_cross_entropy(t[0], np.array([0, 4, 2, 2])))

    img = rng.normal(size=(2, 7, 7))
    rup, rimg = real_probe((2, 14, 14)), real_probe(img.shape)
    checks["upscale"] = ([img], lambda t: rup(upscale_tensor(t[0], 2)))
    checks["mask"] = ([img], lambda t: rimg(mask_tensor(t[0])))

    for mode in FilterMode:
        spec = ConvLayerSpec((0, 1), (0, 1, 2), 2, 2, k=5, rings=3, mode=mode, mask_after=True)
        R, beta, x = rng.normal(size=spec.radial_shape), rng.uniform(0, 6, spec.beta_shape), c(2, 2, 2, 8, 8)
        probe = complex_probe((2, 3, 2, 8, 8))
        checks[f"h_conv[{mode.value}]"] = (
            [x, R, beta], lambda t, spec=spec, probe=probe: probe(h_conv(StreamBundle(t[0], (0, 1)), spec, t[1], t[2]).data))

    zb = rng.uniform(0.7, 3.0, (3, 2, 2, 5, 5)) * np.exp(1j * rng.uniform(0, 2 * np.pi, (3, 2, 2, 5, 5)))
    bias = rng.uniform(-0.5, 0.5, (2, 2))
    probe = complex_probe(zb.shape)
    checks["h_relu"] = ([away_from_kinks(zb, bias), bias],
                        lambda t: probe(h_relu(StreamBundle(t[0], (0, 1)), t[1]).data))
    gamma, delta = rng.uniform(0.5, 1.5, (2, 2)), rng.normal(size=(2, 2))
    stats = (rng.uniform(0.5, 1.5, (2, 2)), rng.uniform(0.5, 1.5, (2, 2)))
    for training in (True, False):
        for mask in (True, False):
            def bn(t, training=training, mask=mask):
                state = BatchNormState(stats[0].copy(), stats[1].copy())
                return probe(h_batchnorm(StreamBundle(t[0], (0, 1)), t[1], t[2], state,
                                         training=training, mask=mask).data)
            checks[f"h_batchnorm[train={training},mask={mask}]"] = ([zb, gamma, delta], bn)

            def bnr(t, training=training, mask=mask):
                state = BatchNormState(stats[0].copy(), stats[1].copy())
                return probe(h_bn_relu(StreamBundle(t[0], (0, 1)), t[1], t[2], t[3], state,
                                       training=training, mask=mask).data)
            checks[f"h_bn_relu[train={training},mask={mask}]"] = ([zb, gamma, delta, bias], bnr)

            def bnr_soft(t, training=training, mask=mask):
                state = BatchNormState(stats[0].copy(), stats[1].copy())
                return probe(h_bn_relu(StreamBundle(t[0], (0, 1)), t[1], t[2], t[3], state,
                                       training=training, mask=mask, phase_eps=0.5).data)
            checks[f"h_bn_relu[train={training},mask={mask},soft]"] = ([zb, gamma, delta, bias], bnr_soft)
    zp = c(1, 2, 2, 6, 6)
    cpool = complex_probe((1, 2, 2, 3, 3))
    checks["h_meanpool"] = ([zp], lambda t: cpool(h_meanpool(StreamBundle(t[0], (0, 1)), 2).data))
    for mode, sc in (("m0", False), ("sum", False), ("sum", True), ("wide", False)):
        D = 4 if mode == "wide" else 2
        probe_r = real_probe((1, D, 6, 6))
        checks[f"readout[{mode}{',complex' if sc else ''}]"] = (
            [zp], lambda t, mode=mode, sc=sc, probe_r=probe_r: probe_r(magnitude_readout(StreamBundle(t[0], (0, 1)), mode, sc)))

    feats = rng.random((2, 3, 12, 12)) + 0.1
    mask = make_circular_mask(12, 12)
    rgap = real_probe((2, 3))
    checks["gap_pool"] = ([feats], lambda t: rgap(gap_pool(t[0], mask)))
    basis = zernike_basis(12, 4)
    rzer = real_probe((2, 3 * 9))
    checks["zernike_pool"] = ([feats], lambda t: rzer(zernike_pool(t[0], basis)))
    mcfg = MsaPoolConfig(heads=2, model_width=3, key_width=2, buckets=4)
    names = list(mcfg.weight_shapes())
    ws = [rng.normal(size=s) for s in mcfg.weight_shapes().values()]
    rmsa = real_probe((2, 3))
    checks["msa_pool"] = ([feats, *ws], lambda t: rmsa(msa_pool(t[0], mask, dict(zip(names, t[1:])), mcfg)))

    errors = {}
    for name, (inputs, f) in checks.items():
        errs = gradient_check(f, inputs, eps=1e-5, max_entries=40)
        errors[name] = max(errs)
    return errors


def test_criterion_3_gradient_correctness(acceptance):
    start = time.perf_counter()
    errors = _gradient_audit()
    worst = max(errors, key=errors.get)
    ok = errors[worst] < 1e-5
    acceptance(3, ok, f"{len(errors)} operations checked, worst {worst} rel. error {errors[worst]:.1e} "
                      f"(bound 1e-5), {time.perf_counter() - start:.1f}s")
    assert ok, {k: v for k, v in errors.items() if v >= 1e-5}


def test_criterion_4_zernike_oracle(acceptance):
    G = 64
    basis = zernike_basis(G, 8)
    V = basis.basis.reshape(len(basis.pairs), -1)
    gram = np.abs(V.conj() @ V.T)
    diag = np.sqrt(np.outer(np.diag(gram), np.diag(gram)))
    ortho = float((gram / diag - np.eye(len(V))).max())

    z = zernike_pool(make_circular_mask(G, G)[None, None], basis).data[0]
    leak = float(np.abs(z[1:]).max() / z[0])
    z00_err = abs(z[0] - 1.0)

    rng = np.random.default_rng(0)
    img = np.zeros((G, G))
    img[20:34, 22:35] = rng.random((14, 13))
    shifts = [(5, -3), (-7, 9), (11, 4)]
    base = zernike_pool(img[None, None], basis).data
    trans = max(float(np.abs(zernike_pool(np.roll(img, s, axis=(0, 1))[None, None], basis).data - base).max())
                for s in shifts)
    ok = ortho < 5e-2 and leak < 1e-2 and z00_err < 1e-2 and trans < 1e-6
    acceptance(4, ok, f"grid 64: off-diag/diag {ortho:.3f} (<5e-2); constant disk Z00 {z[0]:.4f}, "
                      f"other moments {leak:.1e} relative (<1e-2); translation {trans:.1e} (<1e-6)")
    assert ok


DESK = ("desk-hnet", "desk-up", "desk-upmask")


@pytest.mark.slow
def test_criterion_5_desk_ablation(acceptance, mnist_5k):
    start = time.perf_counter()
    images, labels = mnist_5k
    source = MnistSource(images, labels, images[:0], labels[:0])
    gaps, tables, acc0, seconds = {}, {}, {}, {}
    for name in DESK:
        run = load_run_config(CONFIGS / f"{name}.yaml")
        d = run.data
        splits = generate_dataset(d.variant, d.seed, source,
                                  {"train": d.train_size, "valid": d.valid_size, "test": 0})
        t0 = time.perf_counter()
        params, records = train(run.network, splits, train_config=run.train)
        seconds[name] = time.perf_counter() - t0
        valid = splits["valid"]
        acc0[name] = records[-1].acc_0
        gaps[name] = 100 * (records[-1].acc_0 - records[-1].acc_45)
        if name == "desk-upmask":
            tables[name] = fixed_angle_table(run.network, params, valid, FIXED_ANGLES)
        print(f"{name}: acc@0 {acc0[name]:.4f} acc@45 {records[-1].acc_45:.4f} "
              f"gap {gaps[name]:.2f} pts, {seconds[name]:.0f}s, final loss {records[-1].loss:.4f}")
    spread = 100 * tables["desk-upmask"].spread
    ordering = gaps["desk-hnet"] > gaps["desk-up"] > gaps["desk-upmask"]
    ok = (ordering and gaps["desk-upmask"] <= 3.0 and acc0["desk-upmask"] >= 0.90 and spread < 1.5)
    acceptance(5, ok, "gaps (pts) hnet {:.2f} > up {:.2f} > up+mask {:.2f} (<=3): {}; "
                      "up+mask acc@0 {:.3f} (>=0.90); 12-angle spread {:.2f} pts (<1.5); {:.0f} min".format(
                          gaps["desk-hnet"], gaps["desk-up"], gaps["desk-upmask"], ordering,
                          acc0["desk-upmask"], spread, (time.perf_counter() - start) / 60))
    assert ok


def test_criterion_6_parameter_budget(acceptance):
    n = count_parameters(reference_mnist_config())
    ok = 0.8 * 28_000 <= n <= 1.2 * 28_000
    acceptance(6, ok, f"reference config has {n} parameters (28000 +/- 20%)")
    assert ok


@pytest.fixture(scope="module")
def full_size_mnist(tmp_path_factory):
    """Synthetic MNIST-shaped IDX files with the official 60k/10k counts."""
    d = tmp_path_factory.mktemp("mnist-full")
    rng = np.random.default_rng(0)
    write_idx(d / "train-images-idx3-ubyte", rng.integers(0, 256, (60_000, 28, 28), dtype=np.uint8))
    write_idx(d / "train-labels-idx1-ubyte", rng.integers(0, 10, 60_000).astype(np.uint8))
    write_idx(d / "t10k-images-idx3-ubyte", rng.integers(0, 256, (10_000, 28, 28), dtype=np.uint8))
    write_idx(d / "t10k-labels-idx1-ubyte", rng.integers(0, 10, 10_000).astype(np.uint8))
    return d


def test_criterion_7_dataset_contract(acceptance, full_size_mnist, tmp_path):
    expected = {"mnist-rot-test": {"train": 50_000, "valid": 10_000, "test": 10_000},
                "swn-gcn-mnist": {"train": 50_000, "valid": 10_000, "test": 120_000},
                "rot-mnist": {"train": 10_000, "valid": 50_000, "test": 2_000}}
    problems = []
    for variant, sizes in expected.items():
        cfg = tmp_path / f"{variant}.yaml"
        cfg.write_text(f"data: {{variant: {variant}, seed: 5}}\npaths: {{data_dir: '{full_size_mnist}'}}\n")
        out = tmp_path / variant
        if cli_main(["generate", "--config", str(cfg), "--out", str(out)]) != 0:
            problems.append(f"{variant}: generate failed")
            continue
        first = (out / "manifest.json").read_text()
        splits = {s: read_archive(out / f"{variant}-{s}.hnxd") for s in sizes}
        got = {s: len(ds) for s, ds in splits.items()}
        if got != sizes:
            problems.append(f"{variant}: sizes {got}")
        if variant == "mnist-rot-test" and np.any(splits["train"].angles != 0):
            problems.append("mnist-rot-test: rotated training images")
        if variant == "swn-gcn-mnist":
            values, counts = np.unique(splits["test"].angles, return_counts=True)
            if tuple(values) != FIXED_ANGLES or set(counts) != {10_000}:
                problems.append("swn-gcn-mnist: test angles are not 12 x 10000 fixed values")
        del splits
        if cli_main(["generate", "--config", str(cfg), "--out", str(out), "--force"]) != 0:
            problems.append(f"{variant}: regenerate failed")
        elif (out / "manifest.json").read_text() != first:
            problems.append(f"{variant}: checksums changed on rerun")
    ok = not problems
    acceptance(7, ok, "standard split sizes, train angles, 12 fixed test angles and rerun checksums "
                      + ("all match" if ok else "; ".join(problems)))
    assert ok


def test_criterion_8_ci_gate(acceptance, tmp_path):
    good = cli_main(["verify", "--config", str(CONFIGS / "upmask.yaml"), "--random-weights",
                     "--out", str(tmp_path / "upmask")])
    bad = cli_main(["verify", "--config", str(CONFIGS / "broken.yaml"), "--random-weights",
                    "--out", str(tmp_path / "broken")])
    ok = good == 0 and bad == 1
    acceptance(8, ok, f"verify --random-weights exits {good} on UP+MASK (want 0), {bad} on broken (want 1)")
    assert ok
