"""Smoke test for the vodkit Python module.

Build and install first, e.g. `maturin develop -m crates/python/Cargo.toml`.
"""

import math

import vodkit


def main():
    a = vodkit.BBox(0, 0, 10, 10)
    b = vodkit.BBox(5, 0, 15, 10)
    assert math.isclose(vodkit.iou(a, b), 1 / 3)
    delta = vodkit.encode(a, b)
    back = vodkit.decode(a, delta)
    assert all(math.isclose(x, y, abs_tol=1e-9) for x, y in zip(back.corners, b.corners))
    assert vodkit.nms([a, b, a], [0.5, 0.9, 0.4], 0.45) == [1, 0]

    t = [[[1.0, 2.0], [3.0, 4.0]]]
    assert vodkit.depthwise_correlate(t, t) == [[[30.0]]]
    pooled = vodkit.roi_align(t, vodkit.BBox(0, 0, 2, 2), 1, 1, 1.0, samples=64)
    assert math.isclose(pooled[0][0][0], 2.5)

    gt, dets = vodkit.scenario("noiseless")
    cfg = vodkit.RunConfig()
    cfg.tracker_noise = 0.0
    for variant in vodkit.VARIANTS:
        out = vodkit.run_variant(variant, dets, gt, cfg)
        result = vodkit.evaluate([out], [gt])
        assert result.map == 1.0, (variant, result.map)

    gt, dets = vodkit.scenario("degradation", seed=3)
    cfg = vodkit.RunConfig()
    maps = {v: vodkit.evaluate([vodkit.run_variant(v, dets, gt, cfg)], [gt]).map for v in vodkit.VARIANTS}
    for v, m in maps.items():
        print(f"{v:>16} {m:.4f}")

    try:
        cfg.t_merge = 2.0
    except ValueError:
        pass
    else:
        raise AssertionError("out-of-range T_merge accepted")
    print("smoke test passed")


if __name__ == "__main__":
    main()
