"""Acceptance criteria 1-9, each at its stated tolerance.

Every criterion prints one ``ACCEPTANCE <n> PASS|FAIL`` line (collected in
the terminal summary and in ``acceptance_report.txt``).  Criterion 7 trains
the desk-scale models once per session through the harness; criteria 6 and 8
reuse those runs.  Expect roughly an hour on one CPU core.
"""

import json
import math
import shutil
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES, TINY_ENCODER, param_values, rebind
from mtwb import cplx, harness
from mtwb import tensor as T
from mtwb.baselines import MLPFeedback, angular_dictionary, fully_digital_precoder, somp, somp_estimate
from mtwb.ce import ce_loss, init_ce
from mtwb.channel import PRESETS, ChannelConfig, angular_energy, gen_channel, gen_channels, nmse_db, sample_rng
from mtwb.config import build_config
from mtwb.csi import TransformerFeedback, csi_loss, dequantize, quantize, straight_through
from mtwb.dataset import gen_dataset, read_dataset
from mtwb.gradcheck import finite_diff_check
from mtwb.hbf import HBFModel, hbf_forward, hbf_rate, normalize_power, sum_rate_precoder, user_channels
from mtwb.transformer import (
    EncoderConfig, encoder_forward, flop_count, init_encoder, linear, multi_head_attention, preset_config,
)

DESK = PRESETS["desk"]
SOMP_RECOVERY_RATE = 0.95  # pinned from the first 200-trial oracle run (194/200)


@contextmanager
def criterion(number, title):
    start = time.perf_counter()
    notes = []
    try:
        yield notes
    except BaseException as e:
        detail = "; ".join(notes + [f"{type(e).__name__}: {str(e).splitlines()[0] if str(e) else ''}"])
        ACCEPTANCE_LINES.append(f"ACCEPTANCE {number} FAIL {title} ({detail})")
        raise
    ACCEPTANCE_LINES.append(f"ACCEPTANCE {number} PASS {title} "
                            f"({'; '.join(notes + [f'{time.perf_counter() - start:.1f}s'])})")


# ---------------------------------------------------------------- 1


def _primitive_cases(rng):
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((3, 4))
    pos = rng.uniform(0.5, 2.0, (3, 4))
    w = rng.standard_normal((3, 4))
    m = rng.standard_normal((4, 5))
    wm = rng.standard_normal((3, 5))
    g, beta = rng.uniform(0.5, 1.5, 4), rng.standard_normal(4)
    lin = {"p.w": rng.standard_normal((4, 2)), "p.b": rng.standard_normal(2)}
    wl = rng.standard_normal((3, 2))
    linear_ops = {
        "add": (lambda x, y: ((x + y) * w).sum(), [a, b]),
        "sub": (lambda x, y: ((x - y) * w).sum(), [a, b]),
        "neg": (lambda x: ((-x) * w).sum(), [a]),
        "scale": (lambda x: (T.scale(x, 2.5) * w).sum(), [a]),
        "matmul": (lambda x, y: (T.matmul(x, y) * wm).sum(), [a, m]),
        "sum": (lambda x: T.sum_(x * w, axis=0).sum(), [a]),
        "mean": (lambda x: T.mean(x * w, axis=1).sum(), [a]),
        "reshape": (lambda x: (T.reshape(x, (4, 3)) * w.reshape(4, 3)).sum(), [a]),
        "transpose": (lambda x: (T.transpose(x, (1, 0)) * w.T).sum(), [a]),
        "swap_last": (lambda x: (T.swap_last(x) * w.T).sum(), [a]),
        "concat": (lambda x, y: (T.concat([x, y], axis=0) * np.vstack([w, w])).sum(), [a, b]),
        "stack": (lambda x, y: (T.stack([x, y]) * np.stack([w, -w])).sum(), [a, b]),
        "getitem": (lambda x: (x[1:, ::2] * w[1:, ::2]).sum(), [a]),
        "straight_through": (lambda x: (straight_through(T.sigmoid(x), 3) * w).sum(), [a]),
        "linear": (lambda p: (linear(T.Tensor(a), p, "p") * wl).sum(), lin),
    }
    nonlinear_ops = {
        "mul": (lambda x, y: (x * y * w).sum(), [a, b]),
        "div": (lambda x, y: ((x / y) * w).sum(), [a, pos]),
        "exp": (lambda x: (T.exp(x) * w).sum(), [a]),
        "log": (lambda x: (T.log(x) * w).sum(), [pos]),
        "sqrt": (lambda x: (T.sqrt(x) * w).sum(), [pos]),
        "sin": (lambda x: (T.sin(x) * w).sum(), [a]),
        "cos": (lambda x: (T.cos(x) * w).sum(), [a]),
        "relu": (lambda x: (T.relu(x) * w).sum(), [a + np.sign(a) * 0.1]),
        "sigmoid": (lambda x: (T.sigmoid(x) * w).sum(), [a]),
        "softmax": (lambda x: (T.softmax(x) * w).sum(), [a]),
        "layer_norm": (lambda x, gg, bb: (T.layer_norm(x, gg, bb) * w).sum(), [a, g, beta]),
        "normalize_power": (lambda rr, ri, br, bi: sum(
            (p * q).sum() for p, q in zip(normalize_power((rr, ri), (br, bi)), (w[:2, :2], w[1:, 2:]))),
            [rng.standard_normal((3, 2)), rng.standard_normal((3, 2)), rng.standard_normal((2, 2)),
             rng.standard_normal((2, 2))]),
    }
    return linear_ops, nonlinear_ops


def _attention_case(rng):
    cfg = EncoderConfig(n_layers=1, d_model=8, n_heads=2, seq_len=3, in_features=5)
    params = {k: v.data for k, v in init_encoder(cfg, rng).items()}
    for name in params:
        if ".ln" in name:
            params[name] = rng.uniform(0.5, 1.5, params[name].shape)
    w = rng.standard_normal((3, 8))

    def attention(p):
        return (multi_head_attention(p["x"], p, "layer0", 2) * w).sum()

    def encoder(p):
        return (encoder_forward(p["x_raw"], p, cfg) * w).sum()

    return {"attention": (attention, {"x": rng.standard_normal((3, 8)), **params}),
            "encoder": (encoder, {"x_raw": rng.standard_normal((3, 5)), **params})}


def _pipeline_cases(rng):
    tiny = ChannelConfig(n_x=2, n_y=2, n_subcarriers=3, n_clusters=2, n_paths=2, max_delay=2.0)
    H = gen_channels(tiny, 2, 5)
    cases = {}

    ce = init_ce(tiny, pilot_ratio=0.5, seed=2, **TINY_ENCODER)
    cases["ce_loss"] = (lambda p: (rebind(ce, p), ce_loss(H, ce, None, None))[1], param_values(ce))

    fb = TransformerFeedback(tiny, 3, 2, **TINY_ENCODER)
    cases["csi_loss"] = (lambda p: (rebind(fb, p, fb.ue.params, fb.bs.params), csi_loss(H, fb))[1], param_values(fb))

    mlp = MLPFeedback(tiny, 4, 2, encoder_widths=(6, 5, 4), decoder_widths=(5, 6, 24))
    cases["mlp_csi_loss"] = (lambda p: (rebind(mlp, p), csi_loss(H, mlp))[1], param_values(mlp))

    pairs = user_channels(gen_channels(tiny, 4, 6), 2)
    h1 = HBFModel(tiny, 2, mode=1, seed=5, **TINY_ENCODER)
    cases["hbf_rate_mode1"] = (lambda p: (rebind(h1, p), hbf_rate(pairs, h1))[1], param_values(h1))
    h2 = HBFModel(tiny, 2, mode=2, feedback_bits=4, seed=5, **TINY_ENCODER)
    cases["hbf_rate_mode2"] = (lambda p: (rebind(h2, p, h2.ue.params), hbf_rate(pairs, h2))[1], param_values(h2))
    return cases


def test_criterion_1_gradients():
    with criterion(1, "gradient suite") as notes:
        start = time.perf_counter()
        rng = np.random.default_rng(101)
        linear_ops, nonlinear_ops = _primitive_cases(rng)
        worst = {}
        for name, (fn, point) in linear_ops.items():
            worst[name] = (finite_diff_check(fn, point), 1e-6)
        for name, (fn, point) in nonlinear_ops.items():
            worst[name] = (finite_diff_check(fn, point), 1e-4)
        for name, (fn, point) in {**_attention_case(rng), **_pipeline_cases(rng)}.items():
            worst[name] = (finite_diff_check(fn, point), 1e-4)
        elapsed = time.perf_counter() - start
        failed = {k: v for k, v in worst.items() if v[0] >= v[1]}
        notes.append(f"{len(worst)} checks, worst {max(v[0] for v in worst.values()):.2e}, {elapsed:.0f}s")
        assert not failed, f"over tolerance: {failed}"
        assert elapsed < 120


# ---------------------------------------------------------------- 2


def test_criterion_2_attention_invariants():
    with criterion(2, "attention invariants") as notes:
        rng = np.random.default_rng(202)
        cfg = preset_config("S", seq_len=8, in_features=12)
        params = init_encoder(cfg, rng)
        x = rng.standard_normal((6, 8, 64))
        _, weights = multi_head_attention(x, params, "layer0", cfg.n_heads, return_weights=True)
        dev = max(np.max(np.abs(w.data.sum(axis=-1) - 1.0)) for w in weights)
        assert dev <= 1e-12
        raw = rng.standard_normal((6, 8, 12))
        perm = rng.permutation(8)
        a = encoder_forward(raw, params, cfg, use_positions=False).data[:, perm]
        b = encoder_forward(raw[:, perm], params, cfg, use_positions=False).data
        assert a.tobytes() == b.tobytes()
        base = encoder_forward(raw, params, cfg).data
        for c in (2.0, 0.5, 4.0, 0.125):
            scaled = {k: (T.Tensor(v.data * c) if k.endswith(".wk") else T.Tensor(v.data / c) if k.endswith(".wq")
                          else v) for k, v in params.items()}
            assert encoder_forward(raw, scaled, cfg).data.tobytes() == base.tobytes(), c
        notes.append(f"row-sum dev {dev:.1e}; permutation and c in {{2, 1/2, 4, 1/8}} bit-exact")


# ---------------------------------------------------------------- 3


def test_criterion_3_complexity():
    with criterion(3, "complexity orders") as notes:
        for cfg in (EncoderConfig(2, 16, 4, 8, 6), preset_config("S", 8, 32), preset_config("M", 16, 12)):
            params = init_encoder(cfg, np.random.default_rng(0))
            with T.count_macs() as counter:
                encoder_forward(np.ones((cfg.seq_len, cfg.in_features)), params, cfg)
            assert counter.total == flop_count(cfg)["total"]
        for n, d in ((8, 16), (16, 64), (32, 32)):
            base = flop_count(EncoderConfig(2, d, 4, n, 6))
            longer = flop_count(EncoderConfig(2, d, 4, 2 * n, 6))
            wider = flop_count(EncoderConfig(2, 2 * d, 4, n, 6))
            assert longer["attention_scores_flops"] == 4 * base["attention_scores_flops"]
            assert wider["ff_flops"] == 4 * base["ff_flops"]
        notes.append("instrumented == flop_count on 3 configs; x4 ratios exact")


# ---------------------------------------------------------------- 4


def test_criterion_4_somp():
    with criterion(4, "SOMP oracle") as notes:
        rng = np.random.default_rng(404)
        d2 = angular_dictionary(DESK, 2)
        A = rng.standard_normal((6, 16)) + 1j * rng.standard_normal((6, 16))
        H = np.outer(rng.standard_normal(8) + 1j * rng.standard_normal(8), d2.atoms[:, 21])
        one = nmse_db(somp_estimate(H @ A.T, A, d2, 1), H)
        assert one <= -100.0
        d1 = angular_dictionary(DESK, 1)
        rng = np.random.default_rng(2024)
        hits, monotone = 0, True
        for _ in range(200):
            A = (rng.standard_normal((8, 16)) + 1j * rng.standard_normal((8, 16))) / np.sqrt(2)
            support = rng.choice(d1.size, 3, replace=False)
            coef = (rng.standard_normal((3, 8)) + 1j * rng.standard_normal((3, 8))) / np.sqrt(2)
            H = (d1.atoms[:, support] @ coef).T
            res = somp(A @ d1.atoms, (H @ A.T).T, 3)
            hits += set(res.support) == set(support)
            monotone &= bool(np.all(np.diff(res.residual_norms) <= 1e-12))
        notes.append(f"T=1 NMSE {one:.0f} dB; T=3/M=8 recovery {hits}/200; residual monotone {monotone}")
        assert monotone
        assert hits / 200 >= SOMP_RECOVERY_RATE


# ---------------------------------------------------------------- 5


def test_criterion_5_quantizer():
    with criterion(5, "quantizer") as notes:
        s = np.linspace(0.0, 1.0, 10_001)
        for B in range(1, 9):
            err = np.abs(s - dequantize(quantize(s, B), B)).max()
            assert err <= 1.0 / 2 ** (B + 1) + 1e-12
            n = 1 << B
            codes = (np.arange(n) + 0.5) / n
            bits = quantize(codes, B)
            assert np.array_equal(dequantize(bits, B), codes)
            assert np.array_equal(quantize(dequantize(bits, B), B), bits)
            for n_cw in (1, 3, 16):
                assert quantize(np.full((2, n_cw), 0.4), B).shape == (2, n_cw * B)
        notes.append("B=1..8 on a 10^4 grid; 2^B codepoints idempotent")


# ---------------------------------------------------------------- 7 (shared desk-scale runs)


@pytest.fixture(scope="module")
def desk_runs(tmp_path_factory):
    """Train every desk-scale model once through the harness."""
    root = tmp_path_factory.mktemp("desk")
    cfg = build_config(seed=0)
    out = {}
    for command in ("ce-train", "csi-train", "hbf-train"):
        start = time.perf_counter()
        run_dir = root / command.split("-")[0]
        records = harness.run(cfg, command, run_dir)
        out[command.split("-")[0]] = {"dir": run_dir, "records": records, "seconds": time.perf_counter() - start}
    return out


def _value(records, scheme, coordinate):
    (value,) = [r.value for r in records if r.scheme == scheme and r.coordinate == coordinate]
    return value


def test_criterion_7_orderings(desk_runs):
    with criterion(7, "desk-scale orderings") as notes:
        total = sum(r["seconds"] for r in desk_runs.values())
        ce = desk_runs["ce"]["records"]
        t10, s10 = _value(ce, "Transformer-S", 10.0), _value(ce, "SOMP", 10.0)
        t0, t20 = _value(ce, "Transformer-S", 0.0), _value(ce, "Transformer-S", 20.0)
        notes.append(f"(a) CE {t10:.2f} vs SOMP {s10:.2f} dB at 10 dB, {t0:.2f} -> {t20:.2f} dB over 0 -> 20 dB")

        csi = desk_runs["csi"]["records"]
        tr = [_value(csi, "Transformer-S", b) for b in (16, 32, 64)]
        mlp = [_value(csi, "MLP", b) for b in (16, 32, 64)]
        notes.append("(b) CSI T " + "/".join(f"{v:.2f}" for v in tr) + " MLP " + "/".join(f"{v:.2f}" for v in mlp))

        hbf = desk_runs["hbf"]["records"]
        perfect = [_value(hbf, "HBF-Transformer-S-perfect", b) for b in (8, 16, 32)]
        fb = [_value(hbf, "HBF-Transformer-S-feedback", b) for b in (8, 16, 32)]
        notes.append(f"(c) HBF perfect {perfect[0]:.3f}, feedback " + "/".join(f"{v:.3f}" for v in fb))
        notes.append(f"training {total / 60:.0f} min")

        checks = {
            "a: CE beats SOMP at 10 dB": t10 < s10,
            "a: NMSE(20) <= NMSE(0)": t20 <= t0,
            "b: NMSE non-increasing in bits": tr[1] <= tr[0] and tr[2] <= tr[1],
            "b: Transformer beats MLP at equal bits": all(t < m for t, m in zip(tr, mlp)),
            "c: perfect >= feedback": all(p >= f for p, f in zip(perfect, fb)),
            "c: feedback non-decreasing in bits": fb[1] >= fb[0] and fb[2] >= fb[1],
            "total < 2 h": total < 7200,
        }
        failed = [k for k, ok in checks.items() if not ok]
        assert not failed, failed


# ---------------------------------------------------------------- 6


def test_criterion_6_feasibility(desk_runs):
    with criterion(6, "beamformer feasibility") as notes:
        cfg = build_config(seed=0)
        run_dir = desk_runs["hbf"]["dir"]
        test = user_channels(read_dataset(run_dir / "data" / "test.mtwc").H, 2)
        models = [HBFModel(DESK, 2, mode=1, seed=7)]  # untrained, random parameters
        for name, bits in (("hbf-mode1", None), ("hbf-mode2-8", 8), ("hbf-mode2-16", 16), ("hbf-mode2-32", 32)):
            m = HBFModel(DESK, 2, mode=1 if bits is None else 2, feedback_bits=bits,
                         bits_per_entry=cfg.hbf["bits_per_entry"], seed=cfg.seed)
            harness.load_model(run_dir / "checkpoints" / f"{name}.ckpt", m.params)
            models.append(m)
        zf = np.array([sum_rate_precoder(ch, fully_digital_precoder(ch)).item() for ch in test])
        worst_power, batches, worst_ulps = 0.0, 0, 0.0
        for m in models:
            for start in range(0, len(test), 50):
                batch = test[start:start + 50]
                out = hbf_forward(batch, m)
                modulus, _ = out.analog_polar()
                assert np.all(modulus == 1.0 / math.sqrt(16))
                F_RF = cplx.combine(out.F_RF)
                worst_ulps = max(worst_ulps, np.max(np.abs(np.abs(F_RF) - 0.25)) / np.spacing(0.25))
                W = F_RF[:, None] @ cplx.combine(out.F_BB)
                worst_power = max(worst_power, np.max(np.abs(np.linalg.norm(W, axis=(-2, -1)) ** 2 - 2.0)))
                rate = sum_rate_precoder(batch, W).item()
                assert rate <= zf[start:start + 50].mean(), (start, rate)
                batches += 1
        notes.append(f"{len(models)} models x {batches // len(models)} batches; power dev {worst_power:.1e}; "
                     f"rectangular |F_RF| within {worst_ulps:.0f} ulp")
        assert worst_power <= 1e-9


# ---------------------------------------------------------------- 8


def test_criterion_8_determinism(desk_runs, tmp_path):
    with criterion(8, "determinism") as notes:
        checked = 0
        # full replay of the desk CE run from its manifest
        replays = [(desk_runs["ce"]["dir"], "ce")]
        # small end-to-end runs of the other two pipelines, each replayed from its manifest
        small = build_config({"seed": 5, "data": {"n_train": 96, "n_val": 32, "n_test": 32},
                              "train": {"epochs": 3}, "csi": {"feedback_bits": [16, 32]},
                              "hbf": {"feedback_bits": [8, 16]}})
        for command in ("csi-train", "hbf-train"):
            run_dir = tmp_path / f"small-{command}"
            harness.run(small, command, run_dir)
            replays.append((run_dir, command.split("-")[0]))
        for run_dir, pipeline in replays:
            manifest = json.loads((run_dir / "manifest.json").read_text())
            cfg = build_config(manifest["config"])
            again = tmp_path / f"replay-{pipeline}-{checked}"
            harness.run(cfg, manifest["command"], again)
            a = harness.read_results(run_dir / "results.csv")
            b = harness.read_results(again / "results.csv")
            key = lambda rs: [(r.scheme, r.coordinate, r.metric, r.value, r.params, r.flops) for r in rs]
            assert key(a) == key(b), pipeline
            checked += len(a)
        notes.append(f"{checked} CSV metrics reproduced bit-for-bit over 3 replayed runs")


# ---------------------------------------------------------------- 9


def test_criterion_9_channel_model(tmp_path):
    with criterion(9, "channel model") as notes:
        H = gen_channels(DESK, 10_000, 909)
        power = np.mean(np.sum(np.abs(H) ** 2, axis=(1, 2)))
        expected = DESK.n_subcarriers * DESK.n_antennas
        assert abs(power / expected - 1.0) <= 0.02
        single = ChannelConfig(n_clusters=1, angle_spread_deg=0.0)
        ranks = set()
        for i in range(20):
            Hs = gen_channel(single, sample_rng(99, i)).H
            s = np.linalg.svd(Hs, compute_uv=False)
            ranks.add(int(np.sum(s > 1e-10 * s[0])))
        assert ranks == {1}
        path = gen_dataset(DESK, 64, 77, tmp_path / "d.mtwc")
        ds = read_dataset(path, expect_config=DESK)
        assert ds.H.tobytes() == gen_channels(DESK, 64, 77).tobytes()
        again = gen_dataset(DESK, 64, 77, tmp_path / "e.mtwc")
        assert Path(path).read_bytes() == Path(again).read_bytes()
        notes.append(f"mean |H|^2 / (K N_t) = {power / expected:.4f}; zero-spread single cluster rank 1; "
                     "round-trip bit-exact")
