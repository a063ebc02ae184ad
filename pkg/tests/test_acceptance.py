"""Acceptance gate: one PASS/FAIL line per criterion.

The lines are echoed in the terminal summary; ``-s`` also shows them inline.
"""
import hashlib
import time

import numpy as np
from PIL import Image

from conftest import block_image
from test_attention import softmax_oracle
from test_tiling import merge_oracle
from test_wavelet import fd_gradient
from priorscale.attention import AttentionMap, attention_scores, compose_attention, crop_attention, interpolate_attention
from priorscale.backends import MockCaptioner, MockCodec, MockDenoiser, MockTextConditioner, OracleDenoiser
from priorscale.cli import main
from priorscale.pipeline import Backends, PipelineConfig, resize_image, upscale
from priorscale.regional_prompts import PromptCache, build_instruction, caption_all
from priorscale.scheduler import GSPSchedule, add_noise, ddim_step, entry_step, gsp_delta, predict_z0
from priorscale.tiling import RegionSpec, crop, merge, partition
from priorscale.wavelet import gsp_gradient, gsp_loss, haar_analysis, haar_synthesis, resize

# collected by the terminal summary hook in conftest.py
REPORT_LINES: list[str] = []

# relative slack for float ties when checking a trace for monotonicity
TIE_RTOL = 1e-12


def report(number, name, ok, detail, elapsed=None, budget=None):
    timed = elapsed is not None and budget is not None
    in_time = not timed or elapsed < budget
    passed = bool(ok) and in_time
    timing = f" [{elapsed:.2f}s < {budget:g}s]" if timed else ""
    line = f"{'PASS' if passed else 'FAIL'} criterion {number:2d} {name}: {detail}{timing}"
    REPORT_LINES.append(line)
    print("\n" + line)
    assert ok, detail
    assert in_time, f"took {elapsed:.2f}s, budget {budget}s"


def test_01_wavelet_round_trip():
    tic = time.perf_counter()
    rng = np.random.default_rng(1)
    worst_rt, worst_energy = 0.0, 0.0
    for _ in range(200):
        h, w = 2 * rng.integers(1, 33, size=2)
        x = rng.standard_normal((int(rng.integers(1, 5)), h, w)) * rng.uniform(0.1, 10)
        d = haar_analysis(x)
        worst_rt = max(worst_rt, float(np.abs(haar_synthesis(d) - x).max()))
        worst_energy = max(worst_energy, abs(d.energy() - float(np.sum(x**2))) / float(np.sum(x**2)))
    elapsed = time.perf_counter() - tic
    ok = worst_rt <= 1e-6 and worst_energy <= 1e-6
    report(1, "wavelet round-trip", ok, f"max |x - S(A(x))| = {worst_rt:.1e}, max Parseval rel err = {worst_energy:.1e}", elapsed, 1)


def test_02_gsp_gradient(sched):
    tic = time.perf_counter()
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(20):
        t = int(rng.integers(1, sched.total_steps + 1))
        z_low = rng.standard_normal((4, 16, 16))
        z_t = add_noise(rng.standard_normal((4, 16, 16)), t, rng.standard_normal((4, 16, 16)), sched)
        eps_hat = rng.standard_normal((4, 16, 16))  # frozen noise prediction
        analytic = gsp_gradient(z_low, predict_z0(z_t, eps_hat, t, sched), t, sched)
        numeric = fd_gradient(lambda z: gsp_loss(z_low, predict_z0(z, eps_hat, t, sched)), z_t)
        worst = max(worst, float(np.abs(analytic - numeric).max() / np.abs(numeric).max()))
    elapsed = time.perf_counter() - tic
    report(2, "GSP gradient vs central differences", worst <= 1e-4, f"max rel err = {worst:.1e} over 20 instances", elapsed, 10)


def test_03_schedule_endpoints():
    T, s = 1000, 0.2
    gsp = GSPSchedule(s, "cosine")
    hi, lo, mid = gsp_delta(T, T, gsp), gsp_delta(0, T, gsp), gsp_delta(T // 2, T, gsp)
    ok = hi == s and lo == 0.0 and abs(mid - s / 2) <= 1e-12
    report(3, "cosine schedule endpoints", ok, f"delta_T = {hi!r}, delta_0 = {lo!r}, delta_T/2 = {mid!r}")


def test_04_partition_counts():
    four_x = len(partition(512, 512, 128, 64))
    f = 2
    two_x = len(partition(256, 256, 128, 64))
    ok = four_x == 49 and two_x == (2 * f - 1) ** 2 == 9
    report(4, "partition arithmetic", ok, f"512/128/64 -> {four_x} regions, 256/128/64 -> {two_x} regions")


def test_05_entry_steps():
    a, b = entry_step(50, 0.45), entry_step(8, 0.45)
    report(5, "entry-step arithmetic", a == 22 and b == 3, f"50 -> {a}, 8 -> {b}")


def test_06_merge_oracle():
    tic = time.perf_counter()
    rng = np.random.default_rng(6)
    mismatches = round_trip_failures = snapped = 0
    for _ in range(100):
        size = int(rng.integers(2, 9))
        overlap = int(rng.integers(0, size))
        h, w = (int(v) for v in rng.integers(size, 4 * size + 1, size=2))
        part = partition(h, w, size, overlap)
        snapped += any((r.top % part.stride) or (r.left % part.stride) for r in part.regions)
        regions = [rng.standard_normal((2, r.height, r.width)) for r in part.regions]
        mismatches += not np.array_equal(merge(regions, part.regions, h, w), merge_oracle(regions, part.regions, h, w))
        z = rng.standard_normal((2, h, w))
        round_trip_failures += not np.array_equal(merge([crop(z, r) for r in part.regions], part.regions, h, w), z)
    elapsed = time.perf_counter() - tic
    ok = mismatches == 0 and round_trip_failures == 0 and snapped > 0
    detail = f"{mismatches} oracle mismatches, {round_trip_failures} round-trip failures, {snapped} boundary-snapped partitions"
    report(6, "merge oracle equivalence", ok, detail, elapsed, 5)


def test_07_attention_invariants():
    tic = time.perf_counter()
    rng = np.random.default_rng(7)
    worst_rows = worst_compose = 0.0
    for _ in range(100):
        h, w, k = (int(v) for v in rng.integers(1, 9, size=3))
        amap = AttentionMap(rng.dirichlet(np.ones(k), size=h * w), h, w)
        th, tw = h * int(rng.integers(1, 4)), w * int(rng.integers(1, 4))
        up = interpolate_attention(amap, th, tw)
        top, left = int(rng.integers(0, th)), int(rng.integers(0, tw))
        window = RegionSpec(0, top, left, int(rng.integers(1, th - top + 1)), int(rng.integers(1, tw - left + 1)))
        sub = crop_attention(up, window)
        for m in (up, sub):
            worst_rows = max(worst_rows, float(np.abs(m.scores.sum(axis=1) - 1).max()))

        n, d, kg, dv = (int(v) for v in rng.integers(1, 7, size=4))
        q, ks, vs = rng.standard_normal((n, d)), rng.standard_normal((k, d)), rng.standard_normal((k, dv))
        prior, vg = rng.dirichlet(np.ones(kg), size=n), rng.standard_normal((kg, dv))
        brute = (softmax_oracle(q, ks) @ vs + prior @ vg) / 2
        worst_compose = max(worst_compose, float(np.abs(compose_attention(q, ks, vs, prior, vg) - brute).max()))
    q, ks, vs = rng.standard_normal((5, 3)), rng.standard_normal((4, 3)), rng.standard_normal((4, 2))
    c_s = softmax_oracle(q, ks) @ vs
    collapsed = compose_attention(q, ks, vs, attention_scores(q, ks), vs)
    exact_collapse = np.array_equal(collapsed, attention_scores(q, ks) @ vs) and np.allclose(collapsed, c_s)
    elapsed = time.perf_counter() - tic
    ok = worst_rows <= 1e-5 and worst_compose <= 1e-6 and exact_collapse
    detail = f"max row-sum err = {worst_rows:.1e}, max compose err = {worst_compose:.1e}, equal-input collapse exact = {exact_collapse}"
    report(7, "attention invariants", ok, detail, elapsed, 5)


def _oracle_run(image, size, region_size, target):
    cfg = PipelineConfig(size, size, region_size=region_size, enable_gsp=False, enable_rap=False, enable_rsp=False)
    return upscale(image, "x", cfg, Backends(OracleDenoiser(target), MockCodec(), MockTextConditioner()))


def test_08_oracle_rollout():
    tic = time.perf_counter()
    rng = np.random.default_rng(8)
    image = block_image(rng, 8, 8, block=16)
    target = MockCodec().encode(resize_image(image, 256, 256)) + 0.1 * rng.standard_normal((4, 32, 32))
    single = _oracle_run(image, 256, None, target)
    multi = _oracle_run(image, 256, 16, target)
    err1 = float(np.abs(single.latent - target).max())
    err9 = float(np.abs(multi.latent - target).max())
    elapsed = time.perf_counter() - tic
    ok = (len(single.timesteps), len(single.partition), len(multi.partition)) == (22, 1, 9) and max(err1, err9) <= 1e-3
    detail = f"{len(single.timesteps)} steps; 1 region L_inf = {err1:.1e}, {len(multi.partition)} regions L_inf = {err9:.1e}"
    report(8, "oracle rollout", ok, detail, elapsed, 10)


def test_09_gsp_efficacy():
    tic = time.perf_counter()
    rng = np.random.default_rng(9)
    image = block_image(rng, 16, 16)
    codec = MockCodec()
    # unperturbed latent at the target size; its low band is the structure target
    clean = resize(codec.encode(image), 32, 32)
    perturbed = clean + 0.5 * resize(rng.standard_normal((4, 4, 4)), 32, 32)
    cfg = PipelineConfig(256, 256, region_size=16, enable_rap=False, enable_rsp=False)
    out = upscale(image, "x", cfg, Backends(OracleDenoiser(perturbed), codec, MockTextConditioner()))
    trace = np.asarray(out.gsp_loss_trace)
    frac = float(np.mean(trace[1:] <= trace[:-1] * (1 + TIE_RTOL)))
    elapsed = time.perf_counter() - tic
    ok = frac >= 0.9 and out.final_gsp_loss < trace[0]
    detail = f"{frac:.0%} non-increasing pairs, loss {trace[0]:.4f} -> {out.final_gsp_loss:.4f}"
    report(9, "GSP efficacy", ok, detail, elapsed, 10)


def _png(path, image):
    Image.fromarray(np.rint(image * 255).astype(np.uint8)).save(path)


def test_10_cli_determinism(tmp_path):
    tic = time.perf_counter()
    low = tmp_path / "low.png"
    _png(low, block_image(np.random.default_rng(10), 16, 16))
    digests = []
    for name, seed in (("a", 3), ("b", 3), ("c", 4)):
        out = tmp_path / f"{name}.png"
        code = main(["-i", str(low), "-o", str(out), "-p", "a red barn", "--scale", "4",
                     "--backend", "mock", "--seed", str(seed), "--cache", str(tmp_path / "cache.jsonl")])
        assert code == 0
        with Image.open(out) as im:
            assert im.size == (512, 512)
        digests.append(hashlib.sha256(out.read_bytes()).hexdigest())
    elapsed = time.perf_counter() - tic
    ok = digests[0] == digests[1] != digests[2]
    detail = f"same seed identical = {digests[0] == digests[1]}, different seed differs = {digests[0] != digests[2]}"
    report(10, "end-to-end determinism", ok, detail, elapsed, 30)


def test_11_reduction():
    rng = np.random.default_rng(11)
    image = block_image(rng, 8, 8, block=16)
    codec, text, den = MockCodec(), MockTextConditioner(), MockDenoiser(seed=5)
    cfg = PipelineConfig(256, 256, region_size=32, seed=21, enable_gsp=False, enable_rap=False, enable_rsp=False)
    out = upscale(image, "a red barn", cfg, Backends(den, codec, text))

    z0 = codec.encode(resize_image(image, 256, 256))
    steps = out.timesteps
    z = add_noise(z0, steps[0][0], np.random.default_rng(21).standard_normal(z0.shape), den.schedule)
    cond = text.encode("a red barn")
    for t, t_prev in steps:
        z = ddim_step(z, den.predict_noise(z, t, cond, guidance_scale=cfg.guidance_scale), t, t_prev, den.schedule)
    ok = len(out.partition) == 1 and np.array_equal(out.latent, z) and np.array_equal(out.image, codec.decode(z))
    report(11, "reduction to plain diffuse-then-denoise", ok, f"{len(steps)} steps, bitwise equal = {ok}")


def test_12_captioning_plumbing(tmp_path):
    image = np.random.default_rng(12).random((512, 512, 3))
    part = partition(64, 64, 16, 8)
    cap = MockCaptioner()
    path = str(tmp_path / "captions.jsonl")
    caption_all(cap, image, part, "a red barn", PromptCache(path))
    first = cap.calls
    caption_all(cap, image, part, "a red barn", PromptCache(path))
    rerun = cap.calls - first
    expected = (
        "Given the description of a full image a cat, describe the following image "
        "<regional image>, which is part of the full image."
    )
    verbatim = build_instruction("a cat") == expected
    ok = len(part) == 49 and first <= 49 and rerun == 0 and verbatim
    report(12, "captioning plumbing", ok, f"{len(part)} regions, {first} calls first run, {rerun} on rerun, template verbatim = {verbatim}")


def test_09_supplement_partially_informed_oracle():
    """Informational: GSP with an oracle whose estimate tracks the noisy latent.

    Not a criterion; the trace is printed so the stronger behaviour is visible.
    """
    rng = np.random.default_rng(9)
    image = block_image(rng, 16, 16)
    codec = MockCodec()
    clean = resize(codec.encode(image), 32, 32)
    perturbed = clean + 0.5 * resize(rng.standard_normal((4, 4, 4)), 32, 32)
    finals = {}
    for on in (False, True):
        cfg = PipelineConfig(256, 256, region_size=16, enable_gsp=on, enable_rap=False, enable_rsp=False)
        out = upscale(image, "x", cfg, Backends(OracleDenoiser(perturbed, spread=0.5), codec, MockTextConditioner()))
        finals[on] = out
    trace = np.asarray(finals[True].gsp_loss_trace)
    frac = float(np.mean(trace[1:] <= trace[:-1]))
    line = (f"INFO supplement 9: spread oracle, {frac:.0%} non-increasing pairs, "
            f"min {trace.min():.2f} at step {int(trace.argmin())}, final with GSP {finals[True].final_gsp_loss:.2f} "
            f"vs without {finals[False].final_gsp_loss:.2f}")
    REPORT_LINES.append(line)
    print("\n" + line)
    assert finals[True].final_gsp_loss < finals[False].final_gsp_loss
