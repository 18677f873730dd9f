"""Smoke test for the `insta` extension module."""

import math
import tempfile

import insta


def main():
    f = insta.Tensor.uniform([8, 5, 5], 1.0, seed=1)
    g = insta.Tensor.uniform([8, 5, 5, 3, 3], 1.0, seed=2)

    out = insta.adapt(f, g)
    conv = insta.dynamic_conv_oracle(f, g)
    residual = [o - x for o, x in zip(out.data, f.data)]
    assert max(abs(r - c) for r, c in zip(residual, conv.data)) < 1e-12

    u = insta.unfold(f, 3)
    assert u.shape == [8, 5, 5, 3, 3]
    assert u.at([2, 1, 1, 1, 1]) == f.at([2, 1, 1])

    dc = insta.msa_encode(f, [(0, 0)])
    gap = insta.gap_encode(f)
    assert all(abs(a - 25 * b) < 1e-12 for a, b in zip(dc.data, gap.data))
    assert insta.frequency_selection(8, 5, 5)[0] == (0, 0)

    gen = insta.Generator(8, 5, 5, k=3, seed=3)
    gen.train(False)
    k = gen.dynamic_kernel(f)
    assert k.shape == [8, 5, 5, 3, 3]
    assert all(math.isfinite(v) for v in k.data)

    ctx = insta.Context(8, seed=4)
    supports = [insta.Tensor.uniform([8, 5, 5], 1.0, seed=s) for s in range(5)]
    assert ctx.summary(supports) == ctx.summary(supports[::-1])

    assert insta.param_count_report(640, 640, 5, 5, 3) == {"dynamic": 144000, "standard": 3686400}

    worst = max(err for _, err in insta.gradcheck_suite(0, 1e-6))
    assert worst < 1e-5, worst

    with tempfile.TemporaryDirectory() as out_dir:
        doc = insta.run_cli(["bench", "--c", "16", "--h", "5", "--w", "5", "--output", out_dir])
        assert doc["schema_version"] == 1
        assert doc["result"]["dynamic"] == 16 * 25 * 9

    try:
        insta.Tensor([2, 2], [1.0])
    except ValueError:
        pass
    else:
        raise AssertionError("mismatched shape accepted")

    print(f"insta smoke test passed (gradcheck worst {worst:.2e})")


if __name__ == "__main__":
    main()
