import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ldn.deploy import (FP16_TOL, PARITY_TOL, estimate_memory, export_fp16, fits, make_plan, parity_check,
                        receptive_radius, run_path, tiled_forward, tiling_tolerance)
from ldn.errors import AlignmentError, ShapeError
from ldn.models import INPUT, ActivationTape, ArchConfig, build, network, save_weights

STUDENT = ArchConfig.student((4, 8), 16, (1, 1, 1))
TEACHER = ArchConfig.teacher((4, 8), 8, (1, 1, 1))


def _probe_reach(cfg, size, y, x, seed=0):
    """Largest row/col distance of output pixels that change when input pixel (y, x) is perturbed."""
    net = network(cfg)
    p = {k: v.astype(np.float64) for k, v in net.init(seed, residual_gain=1.0).items()}
    img = np.random.default_rng(seed).uniform(0.3, 0.7, (1, size, size, 3))
    base = net.forward(p, img, impl="direct")
    img[0, y, x] += 0.5
    moved = np.argwhere(np.any(net.forward(p, img, impl="direct") != base, axis=-1)[0])
    return int(np.max(np.abs(moved - [y, x]))) if moved.size else 0


def _dependency_reach(cfg, size, y, x):
    """Largest row/col distance of input pixels that output pixel (y, x) depends on.

    All weights are positive and inputs sit in (0, 1), so every ReLU and the
    output clip stay in their linear range and each structural path from an
    input pixel contributes a strictly positive term to the derivative.
    """
    net = network(cfg)
    p = {}
    for name, shape in net.param_shapes.items():
        if name.endswith(".weight"):
            p[name] = np.full(shape, 1.0 / np.prod(shape[:3]))
        elif name.endswith(".alpha"):
            p[name] = np.full(shape, 0.25)
        else:
            p[name] = np.zeros(shape)
    last = "out.conv.weight" if cfg.kind == "student" else "out.conv2.weight"
    p[last] *= 1e-6
    img = np.random.default_rng(0).uniform(0.3, 0.7, (1, size, size, 3))
    tape = ActivationTape()
    out = net.forward(p, img, tape)
    up = np.zeros_like(out)
    up[0, y, x, 0] = 1.0
    # drop the identity term of the global residual so only network paths count
    g = net.backward(p, tape, up)[INPUT] - up
    deps = np.argwhere(np.any(g != 0, axis=-1)[0])
    return int(np.max(np.abs(deps - [y, x])))


def _probe_size(cfg):
    r = receptive_radius(cfg)
    size = 2 * r + 4 * cfg.alignment
    return size + -size % cfg.alignment


@pytest.mark.parametrize("cfg", [STUDENT, TEACHER, ArchConfig.student((2, 2, 2, 2), 2)],
                         ids=["student", "teacher", "default-topology"])
def test_receptive_radius_is_tight(cfg):
    # the radius depends on topology only, so a narrow copy of the default student stands in for it
    if cfg.level_widths == (2, 2, 2, 2):
        assert receptive_radius(cfg) == receptive_radius(ArchConfig.student())
    size = _probe_size(cfg)
    c = size // 2
    reach = max(_dependency_reach(cfg, size, c + ph, c + ph) for ph in range(cfg.alignment))
    assert reach == receptive_radius(cfg)


@pytest.mark.parametrize("cfg", [STUDENT, TEACHER], ids=["student", "teacher"])
def test_pixels_outside_radius_leave_output_bit_identical(cfg):
    size = _probe_size(cfg)
    c = size // 2
    reach = max(_probe_reach(cfg, size, c + ph, c + ph) for ph in range(cfg.alignment))
    assert reach <= receptive_radius(cfg)


def test_radius_grows_with_depth():
    assert receptive_radius(ArchConfig.student((4, 8, 16), 16)) > receptive_radius(STUDENT)
    assert receptive_radius(ArchConfig.student((4, 8), 16, (2, 1, 1))) > receptive_radius(STUDENT)


def test_plan_geometry():
    plan = make_plan(STUDENT, 64, 48, (32, 16))
    assert plan.halo == receptive_radius(STUDENT)
    covered = np.zeros((64, 48), int)
    for t in plan.tiles:
        covered[t.y0 : t.y0 + t.h, t.x0 : t.x0 + t.w] += 1
        assert 0 <= t.wy0 <= t.y0 and t.y0 + t.h <= t.wy1 <= 64
        assert all(v % plan.alignment == 0 for v in (t.wy0, t.wx0, t.wy1, t.wx1))
    assert (covered == 1).all()
    with pytest.raises(AlignmentError):
        make_plan(STUDENT, 64, 48, 6)
    with pytest.raises(AlignmentError):
        make_plan(STUDENT, 62, 48, 8)
    with pytest.raises(ShapeError):
        make_plan(STUDENT, 64, 48, 8, halo=plan.halo - 1)


@given(st.integers(0, 10_000), st.sampled_from([STUDENT, TEACHER]), st.integers(1, 4), st.integers(1, 4),
       st.integers(0, 12))
@settings(max_examples=12, deadline=None)
def test_tiled_forward_equals_whole_image(seed, cfg, ty, tx, extra):
    rng = np.random.default_rng(seed)
    m = cfg.alignment
    h, w = 64 + m * int(rng.integers(0, 4)), 64 + m * int(rng.integers(0, 4))
    p = build(cfg, seed, residual_gain=0.5)
    x = rng.random((1, h, w, 3), dtype=np.float32)
    plan = make_plan(cfg, h, w, (ty * 2 * m, tx * 2 * m), halo=receptive_radius(cfg) + extra)
    whole = network(cfg).forward(p, x, impl="direct")
    assert tiled_forward(cfg, p, x, plan, impl="direct").tobytes() == whole.tobytes()


def test_tiled_gemm_within_documented_bound():
    p = build(STUDENT, 1, residual_gain=0.5)
    x = np.random.default_rng(1).random((1, 64, 64, 3), dtype=np.float32)
    plan = make_plan(STUDENT, 64, 64, 16)
    whole = network(STUDENT).forward(p, x, impl="gemm")
    gap = np.max(np.abs(tiled_forward(STUDENT, p, x, plan, impl="gemm") - whole))
    assert gap <= tiling_tolerance("gemm") and tiling_tolerance("direct") == 0


def test_threaded_tiles_match_serial():
    p = build(STUDENT, 2, residual_gain=0.5)
    x = np.random.default_rng(2).random((1, 64, 64, 3), dtype=np.float32)
    plan = make_plan(STUDENT, 64, 64, 16)
    a = tiled_forward(STUDENT, p, x, plan, threads=1)
    b = tiled_forward(STUDENT, p, x, plan, threads=3)
    assert a.tobytes() == b.tobytes()


def test_tiled_forward_rejects_mismatched_plan():
    p = build(STUDENT)
    x = np.zeros((1, 32, 32, 3), np.float32)
    with pytest.raises(ShapeError):
        tiled_forward(STUDENT, p, x, make_plan(STUDENT, 64, 64, 16))
    with pytest.raises(AlignmentError):
        deeper = ArchConfig.teacher((4, 4, 4), 8)
        tiled_forward(STUDENT, p, x, make_plan(deeper, 32, 32, 8, halo=receptive_radius(STUDENT) + 200))


def test_memory_liveness_by_hand():
    cfg = ArchConfig.student((2,), 4, (0, 0, 0))
    est = estimate_memory(cfg, 4, 4, dtype=np.float32)
    names = [row.name for row in est.layers]
    assert names[0] == "in.conv"
    # input (48 B) stays live to the final residual; the skip tensor to the decoder concat
    assert est.layers[0].live_bytes == 4 * 4 * 3 * 4 + 4 * 4 * 2 * 4
    assert est.peak_activation_bytes == max(r.live_bytes for r in est.layers)
    assert est.peak_activation_bytes >= est.layers[-1].bytes


def test_memory_scales_with_resolution_and_dtype():
    cfg = ArchConfig.student()
    a = estimate_memory(cfg, 256, 256)
    b = estimate_memory(cfg, 512, 512)
    assert b.peak_activation_bytes == 4 * a.peak_activation_bytes
    assert estimate_memory(cfg, 256, 256, np.float32).peak_activation_bytes == 2 * a.peak_activation_bytes
    assert estimate_memory(ArchConfig.teacher(), 256, 256).peak_activation_bytes > a.peak_activation_bytes
    with pytest.raises(AlignmentError):
        estimate_memory(cfg, 250, 256)


def test_tiling_caps_memory():
    cfg = ArchConfig.student()
    whole = estimate_memory(cfg, 1024, 1024)
    plan = make_plan(cfg, 1024, 1024, 256)
    tiled = estimate_memory(cfg, 1024, 1024, plan=plan)
    assert tiled.tiled and tiled.peak_activation_bytes < whole.peak_activation_bytes
    assert fits(tiled, tiled.peak_activation_bytes) and not fits(tiled, tiled.peak_activation_bytes - 1)
    assert "peak" in tiled.table().splitlines()[-1]


def test_fp16_export():
    p = build(TEACHER, 0)
    p["in.conv1.bias"] = np.array([7e4, 0, 0, 0], np.float32)
    res = export_fp16(p)
    assert res.saturated == 1
    assert all(v.dtype == np.float16 for v in res.params.values())
    assert export_fp16(res.params).saturated == 0


@pytest.mark.parametrize("cfg", [STUDENT, TEACHER], ids=["student", "teacher"])
def test_parity_paths(cfg):
    p = build(cfg, 0, residual_gain=0.1)
    xs = [np.random.default_rng(i).random((1, 32, 32, 3), dtype=np.float32) for i in range(2)]
    r = parity_check(cfg, p, xs)
    assert r.passed and r.max_abs_dev < PARITY_TOL and len(r.rows) == 2
    f = parity_check(cfg, p, xs, path_b="FP16-weights")
    assert f.tolerance == FP16_TOL and f.passed and f.max_abs_dev > 0
    assert "PASS" in f.text().splitlines()[-1]
    strict = parity_check(cfg, p, xs, path_b="FP16-weights", tolerance=1e-9)
    assert not strict.passed
    with pytest.raises(ValueError):
        run_path(cfg, p, xs[0], "int8")


def test_parity_csv(tmp_path):
    p = build(STUDENT, 0, residual_gain=0.1)
    r = parity_check(STUDENT, p, [np.zeros((1, 16, 16, 3), np.float32)], ids=["zeros"])
    r.write_csv(tmp_path / "p.csv")
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0] == "input_id,path_a,path_b,max_abs_dev,pass" and lines[1].startswith("zeros,")


@pytest.mark.parametrize("tile", [32, 64], ids=["quarters", "single-tile"])
def test_default_student_tiles_64_image(tile):
    cfg = ArchConfig.student()
    p = build(cfg, 5, residual_gain=0.5)
    x = np.random.default_rng(5).random((1, 64, 64, 3), dtype=np.float32)
    plan = make_plan(cfg, 64, 64, tile)
    assert len(plan.tiles) == (64 // tile) ** 2
    whole = network(cfg).forward(p, x, impl="direct")
    assert tiled_forward(cfg, p, x, plan, impl="direct").tobytes() == whole.tobytes()


def test_memory_is_monotone_in_width():
    small = estimate_memory(ArchConfig.student((8, 16), 32), 64, 64).peak_activation_bytes
    wide = estimate_memory(ArchConfig.student((16, 32), 32), 64, 64).peak_activation_bytes
    assert wide >= small


@pytest.mark.xfail(strict=True, reason="liveness estimate gives teacher/student of about 3.9x at 2432x3200")
def test_teacher_memory_exceeds_student_tenfold():
    s = estimate_memory(ArchConfig.student(), 2432, 3200).peak_activation_bytes
    t = estimate_memory(ArchConfig.teacher(), 2432, 3200).peak_activation_bytes
    assert t > 10 * s


def test_fp16_file_is_half_the_f32_file(tmp_path):
    p = build(ArchConfig.student(), 0)
    save_weights(tmp_path / "f32.ldnw", p)
    save_weights(tmp_path / "f16.ldnw", export_fp16(p).params)
    a, b = (tmp_path / "f32.ldnw").stat().st_size, (tmp_path / "f16.ldnw").stat().st_size
    n = sum(v.size for v in p.values())
    # headers are identical, so the size difference is exactly two bytes per value
    assert a - b == 2 * n
    assert abs(a / 7.52e6 - 1) < 0.1
