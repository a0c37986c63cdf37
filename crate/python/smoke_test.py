#!/usr/bin/env python3
"""Smoke test for the cais_py extension module.

Build the module first:

    cargo build -p cais-py            # or --release

then run this script from anywhere; it locates the shared library in the
cargo target directory and imports it under the expected module name.
"""

import pathlib
import shutil
import sys
import sysconfig
import tempfile


def locate_extension() -> pathlib.Path:
    root = pathlib.Path(__file__).resolve().parent.parent
    candidates = [
        root / "target" / profile / name
        for profile in ("release", "debug")
        for name in ("libcais_py.so", "libcais_py.dylib", "cais_py.dll")
    ]
    built = [p for p in candidates if p.exists()]
    if not built:
        sys.exit("cais_py is not built; run `cargo build -p cais-py` first")
    return max(built, key=lambda p: p.stat().st_mtime)


def import_module():
    src = locate_extension()
    suffix = sysconfig.get_config_var("EXT_SUFFIX") or ".so"
    tmp = tempfile.mkdtemp(prefix="cais_py_")
    shutil.copy2(src, pathlib.Path(tmp) / f"cais_py{suffix}")
    sys.path.insert(0, tmp)
    import cais_py  # noqa: E402

    return cais_py


def approx_equal(a, b, tol=1e-6):
    return all(abs(x - y) <= tol for x, y in zip(a, b)) and len(a) == len(b)


def main() -> None:
    m = import_module()

    # One-hot guidance turns both guided paths into nearest-neighbor.
    h, w, d, s, window = 3, 4, 2, 2, 3
    cv = m.seeded_volume(h, w, d, seed=7)
    one_hot = m.one_hot_guidance(window, h * s, w * s)
    dec, dec_shape = m.cais_upsample(cv, (h, w, d), one_hot, one_hot, window, s)
    full, full_shape = m.full3d_upsample(cv, (h, w, d), one_hot, one_hot, window, s)
    near, near_shape = m.upsample_baseline(cv, (h, w, d), s, "nearest")
    assert dec_shape == full_shape == near_shape == (h * s, w * s, d * s)
    assert approx_equal(dec, near), "decomposed != nearest under one-hot guidance"
    assert approx_equal(full, near), "full3d != nearest under one-hot guidance"

    # Smooth guidance keeps the volume finite and the regression in range.
    g_l = m.seeded_guidance(window, h * s, w * s, seed=1)
    g_r = m.seeded_guidance(window, h * s, w * s, seed=2)
    out, shape = m.cais_upsample(cv, (h, w, d), g_l, g_r, window, s)
    disp = m.soft_argmin(out, shape)
    assert len(disp) == shape[0] * shape[1]
    assert all(0.0 <= v <= shape[2] - 1 for v in disp)

    # Manual backward passes agree with finite differences.
    for target in ("cais", "soft_argmin", "loss"):
        e = m.gradcheck(target, seed=1)
        assert e < 1e-5, f"gradcheck {target}: {e}"

    # Scene generation and the metric helpers are wired through.
    scene = m.gen_scene(3, 16, 16, rects=2, dmax=4)
    assert len(scene["gt"]) == 16 * 16 and any(scene["mask"])
    assert m.epe(scene["gt"], scene["gt"], scene["mask"]) == 0.0

    # A tiny training run returns a sane report.
    report = m.train_toy(1, iterations=2, scale=2, size=16, dmax=4)
    assert len(report["losses"]) == 2
    assert report["epe_final"] > 0.0 and report["epe_trilinear"] > 0.0

    print("smoke test: PASS")


if __name__ == "__main__":
    main()
