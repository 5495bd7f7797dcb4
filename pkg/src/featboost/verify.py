"""Gradient-check and brute-force-oracle suites.

Runnable outside the unit-test harness (via the CLI) and reused by the
acceptance tests. Gradient checks are evaluated at generic points: random
instances whose piecewise ops come too close to a kink for the central
difference step are discarded and redrawn, since finite differences are
meaningless across a kink.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import booster, diffkernel as dk, fastap, matcher, oracles
from .datagen import SceneSpec, generate_pair, verify_labels

OP_TOL = 1e-6
FASTAP_TOL = 1e-5
FULL_LOSS_TOL = 1e-4
KINK_MARGIN = 2e-4
FD_STEP = 1e-5


@dataclass
class CheckRow:
    name: str
    passed: bool
    detail: str

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status:4s}  {self.name}  ({self.detail})"


def format_table(rows):
    return "\n".join(str(r) for r in rows)


def all_passed(rows):
    return all(r.passed for r in rows)


# ---------------------------------------------------------------------------
# gradient checks


def _nudge(values, kinks, margin=1e-2):
    """Push entries away from the given kink locations (generic inputs)."""
    out = np.array(values, dtype=np.float64)
    for k in kinks:
        close = np.abs(out - k) < margin
        out[close] += 2 * margin
    return out


def _weighted(w, out):
    return dk.sum_all(dk.mul(out, dk.tensor(w)))


def _rand(rng, r, c, lo=-2.0, hi=2.0):
    return dk.tensor(rng.uniform(lo, hi, size=(r, c)))


def _nudged(rng, r, c, kinks):
    return dk.tensor(_nudge(rng.uniform(-2.0, 2.0, size=(r, c)), kinks))


def _unit_rows(rng, r, d):
    m = rng.normal(size=(r, d))
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def _geo_rows(rng, r):
    return np.column_stack([rng.uniform(0, 1, (r, 3)),
                            rng.uniform(-3, 3, (r, 1)),
                            rng.uniform(1, 4, (r, 1))])


def primitive_cases():
    """(name, make) pairs; make(rng) returns (scalar_fn, params_to_check)."""

    def simple(op_from, shapes, **tensor_kwargs):
        def make(rng):
            args = [maker(rng) for maker in shapes]
            w_shape = op_from(*args).shape
            w = rng.uniform(-1.0, 1.0, size=w_shape)
            return (lambda: _weighted(w, op_from(*args))), list(args)
        return make

    cases = [
        ("add", simple(dk.add, [lambda r: _rand(r, 4, 6), lambda r: _rand(r, 4, 6)])),
        ("add broadcast", simple(dk.add, [lambda r: _rand(r, 4, 6), lambda r: _rand(r, 1, 6)])),
        ("sub", simple(dk.sub, [lambda r: _rand(r, 4, 6), lambda r: _rand(r, 4, 6)])),
        ("mul", simple(dk.mul, [lambda r: _rand(r, 4, 6), lambda r: _rand(r, 4, 6)])),
        ("mul broadcast", simple(dk.mul, [lambda r: _rand(r, 4, 6), lambda r: _rand(r, 4, 1)])),
        ("div", simple(dk.div, [lambda r: _rand(r, 4, 6), lambda r: _rand(r, 4, 6, 1.0, 3.0)])),
        ("scale", simple(lambda a: dk.scale(a, -1.7), [lambda r: _rand(r, 4, 6)])),
        ("add_const", simple(lambda a: dk.add_const(a, 0.3), [lambda r: _rand(r, 4, 6)])),
        ("matmul", simple(dk.matmul, [lambda r: _rand(r, 3, 5), lambda r: _rand(r, 5, 4)])),
        ("transpose", simple(dk.transpose, [lambda r: _rand(r, 3, 5)])),
        ("affine", simple(dk.affine, [lambda r: _rand(r, 4, 5), lambda r: _rand(r, 5, 3),
                                      lambda r: _rand(r, 1, 3)])),
        ("relu", simple(dk.relu, [lambda r: _nudged(r, 4, 6, [0.0])])),
        ("sigmoid", simple(dk.sigmoid, [lambda r: _rand(r, 4, 6)])),
        ("tanh_act", simple(dk.tanh_act, [lambda r: _rand(r, 4, 6)])),
        ("abs_val", simple(dk.abs_val, [lambda r: _nudged(r, 4, 6, [0.0])])),
        ("clamp", simple(lambda a: dk.clamp(a, -1.0, 1.0),
                         [lambda r: _nudged(r, 4, 6, [-1.0, 1.0])])),
        ("maximum_const", simple(lambda a: dk.maximum_const(a, 0.5),
                                 [lambda r: _nudged(r, 4, 6, [0.5])])),
        ("softmax_over_context", simple(dk.softmax_over_context, [lambda r: _rand(r, 5, 4)])),
        ("softmax_rows", simple(dk.softmax_rows, [lambda r: _rand(r, 5, 4)])),
        ("l2_normalize", simple(dk.l2_normalize, [lambda r: _rand(r, 4, 6)])),
        ("layer_norm", simple(dk.layer_norm, [lambda r: _rand(r, 4, 6),
                                              lambda r: _rand(r, 1, 6, 0.5, 1.5),
                                              lambda r: _rand(r, 1, 6)])),
        ("sum_over_rows", simple(dk.sum_over_rows, [lambda r: _rand(r, 4, 6)])),
        ("sum_over_cols", simple(dk.sum_over_cols, [lambda r: _rand(r, 4, 6)])),
        ("sum_all", simple(dk.sum_all, [lambda r: _rand(r, 4, 6)])),
        ("cumsum_cols", simple(dk.cumsum_cols, [lambda r: _rand(r, 4, 6)])),
        ("binarize_st relaxed", simple(lambda a: booster.binarize_st(a, relaxed=True),
                                       [lambda r: _rand(r, 4, 6)])),
    ]
    return cases


def composite_cases():
    """Model-level differentiable ops (checked at the op tolerance)."""
    d, n = 8, 4

    def mk_project(rng):
        params = booster.BoosterParams.init_random(d, 1, "real", seed=int(rng.integers(2 ** 31)),
                                           identity_residuals=False)
        x = dk.tensor(_unit_rows(rng, n, d))
        w = rng.uniform(-1, 1, (n, d))
        checked = [x] + [params[k] for k in ("desc.w1", "desc.w1.b", "desc.w2", "desc.w2.b")]
        return (lambda: _weighted(w, booster.project_descriptor(x, params))), checked

    def mk_geometry(rng):
        params = booster.BoosterParams.init_random(d, 1, "real", seed=int(rng.integers(2 ** 31)),
                                           identity_residuals=False)
        g = dk.tensor(_geo_rows(rng, n))
        w = rng.uniform(-1, 1, (n, d))
        checked = [g] + [params[f"geo.w{i}"] for i in range(1, 6)] \
            + [params[f"geo.w{i}.b"] for i in range(1, 6)]
        return (lambda: _weighted(w, booster.encode_geometry(g, params))), checked

    def mk_aft(rng):
        x = _rand(rng, n, d, -1.5, 1.5)
        wq, wk, wv = (_rand(rng, d, d, -0.6, 0.6) for _ in range(3))
        w = rng.uniform(-1, 1, (n, d))
        return (lambda: _weighted(w, booster.aft_simple(x, wq, wk, wv))), [x, wq, wk, wv]

    def mk_encoder(rng):
        params = booster.BoosterParams.init_random(d, 1, "real", seed=int(rng.integers(2 ** 31)),
                                           identity_residuals=False)
        x = _rand(rng, n, d, -1.5, 1.5)
        w = rng.uniform(-1, 1, (n, d))
        checked = [x, params["enc0.wq"], params["enc0.ffn.w1"], params["enc0.ffn.w2.b"],
                   params["enc0.ln1_gain"], params["enc0.ln2_bias"]]
        return (lambda: _weighted(w, booster.encoder_layer(x, params, 0))), checked

    def mk_distances_real(rng):
        # raw inputs pass through l2_normalize so the unit-norm precondition
        # holds at every perturbed evaluation point
        a = _rand(rng, 2, d)
        b = _rand(rng, 5, d)
        w = rng.uniform(-1, 1, (2, 5))
        return (lambda: _weighted(w, fastap.distances_real(
            dk.l2_normalize(a), dk.l2_normalize(b)))), [a, b]

    return [("project_descriptor", mk_project),
            ("encode_geometry", mk_geometry),
            ("aft_simple", mk_aft),
            ("encoder_layer", mk_encoder),
            ("distances_real", mk_distances_real)]


def make_fastap_case(rng):
    m = 12
    grid = fastap.real_grid(10)
    z = dk.tensor(_nudge(rng.uniform(0.05, 3.95, size=(1, m)), grid.centers, margin=5e-3))
    pos = rng.random(m) < 0.4
    if not pos.any():
        pos[int(rng.integers(m))] = True
    return (lambda: fastap.fastap(z, pos, grid)), [z]


def random_labels(rng, n, m):
    lab = rng.choice([-1, 0, 1], size=(n, m), p=[0.55, 0.15, 0.3])
    for i in range(n):
        if not (lab[i] == 1).any():
            lab[i, int(rng.integers(m))] = 1
        if not (lab[i] == -1).any():
            j = int(rng.integers(m))
            lab[i, (j + 1) % m] = -1
    return fastap.MatchLabels(lab.astype(np.int8))


def make_pair_loss_case(head, relaxed):
    n, d = 4, 8

    def make(rng):
        params = booster.BoosterParams.init_random(d, 1, head, seed=int(rng.integers(2 ** 31)),
                                                    identity_residuals=False)
        da = _unit_rows(rng, n, d)
        db = _unit_rows(rng, n, d)
        ga, gb = _geo_rows(rng, n), _geo_rows(rng, n)
        labels = random_labels(rng, n, n)

        def f():
            xa = booster.boost_matrix(dk.tensor(da), dk.tensor(ga), params,
                                      relaxed_binary=relaxed)
            xb = booster.boost_matrix(dk.tensor(db), dk.tensor(gb), params,
                                      relaxed_binary=relaxed)
            return fastap.pair_loss(xa, xb, dk.tensor(da), dk.tensor(db), labels,
                                    10.0, boosted_kind=head, raw_kind="real",
                                    bins=10, relaxed_binary=relaxed)

        return f, list(params.tensors.values())

    return make


def generic_grad_check(make_case, seed, sample=None, max_draws=60):
    """Gradient-check one random instance drawn at a generic point."""
    for attempt in range(max_draws):
        rng = np.random.default_rng(np.random.SeedSequence([seed, attempt]))
        f, params = make_case(rng)
        with dk.probe_kinks() as probe:
            f()
        if probe.min_margin() < KINK_MARGIN:
            continue
        return dk.grad_check(f, params, h=FD_STEP, sample=sample,
                             rng=np.random.default_rng(seed))
    raise RuntimeError("could not draw a generic instance")


def _sweep(name, make_case, seeds, tol, sample=None):
    worst = 0.0
    for s in range(seeds):
        worst = max(worst, generic_grad_check(make_case, s, sample=sample))
    return CheckRow(f"grad {name}", worst <= tol,
                    f"max rel err {worst:.3e}, tol {tol:g}, {seeds} seeds")


def run_gradcheck_suite(seeds=100, full_loss_seeds=None, sample=60):
    """Finite-difference checks for primitives, composites, and the pair loss."""
    if full_loss_seeds is None:
        full_loss_seeds = max(4, seeds // 5)
    rows = []
    for name, make in primitive_cases():
        rows.append(_sweep(name, make, seeds, OP_TOL))
    for name, make in composite_cases():
        rows.append(_sweep(name, make, max(8, seeds // 4), OP_TOL, sample=sample))
    rows.append(_sweep("fastap", make_fastap_case, seeds, FASTAP_TOL))
    rows.append(_sweep("pair_loss real head", make_pair_loss_case("real", False),
                       full_loss_seeds, FULL_LOSS_TOL, sample=10))
    rows.append(_sweep("pair_loss binary head (relaxed)",
                       make_pair_loss_case("binary", True),
                       full_loss_seeds, FULL_LOSS_TOL, sample=10))
    return rows


# ---------------------------------------------------------------------------
# oracle comparisons


def _max_abs(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0:
        return 0.0
    return float(np.abs(a - b).max())


def check_affine_oracle(seeds=50):
    worst = 0.0
    for s in range(seeds):
        rng = np.random.default_rng(np.random.SeedSequence([11, s]))
        a = rng.uniform(-2, 2, (3, 2))
        b = rng.uniform(-2, 2, (2, 4))
        bias = rng.uniform(-1, 1, (1, 4))
        got = dk.affine(dk.tensor(a), dk.tensor(b), dk.tensor(bias)).data
        want = oracles.matmul_triple_loop(a, b) + bias
        worst = max(worst, _max_abs(got, want))
    return CheckRow("oracle affine vs triple loop", worst <= 1e-12,
                    f"max abs err {worst:.3e}, {seeds} seeds")


def check_softmax_oracle(seeds=50):
    worst = 0.0
    for s in range(seeds):
        rng = np.random.default_rng(np.random.SeedSequence([12, s]))
        k = rng.uniform(-2, 2, (3, 2))
        got = dk.softmax_over_context(dk.tensor(k)).data
        worst = max(worst, _max_abs(got, oracles.softmax_columns_direct(k)))
    return CheckRow("oracle column softmax vs direct", worst <= 1e-12,
                    f"max abs err {worst:.3e}, {seeds} seeds")


def check_aft_oracle(seeds=200, tol=1e-12):
    worst = 0.0
    rng_master = np.random.default_rng(13)
    for s in range(seeds):
        rng = np.random.default_rng(np.random.SeedSequence([13, s]))
        n = int(rng.integers(1, 17))
        d = int(rng.integers(1, 9))
        x = rng.uniform(-2, 2, (n, d))
        wq, wk, wv = (rng.uniform(-1, 1, (d, d)) for _ in range(3))
        got = booster.aft_simple(dk.tensor(x), dk.tensor(wq), dk.tensor(wk),
                                 dk.tensor(wv)).data
        want = oracles.aft_literal(x, wq, wk, wv)
        worst = max(worst, _max_abs(got, want))
    del rng_master
    return CheckRow("oracle aft_simple vs literal formula", worst <= tol,
                    f"max abs err {worst:.3e} <= {tol:g}, {seeds} seeds, N<=16 D<=8")


def check_mha_oracle(seeds=40):
    worst = 0.0
    for s in range(seeds):
        rng = np.random.default_rng(np.random.SeedSequence([14, s]))
        heads = int(rng.choice([1, 2, 4]))
        d = heads * int(rng.integers(1, 4))
        n = int(rng.integers(1, 7))
        x = rng.uniform(-2, 2, (n, d))
        wq, wk, wv = (rng.uniform(-1, 1, (d, d)) for _ in range(3))
        got = booster.mha_reference(x, heads, wq, wk, wv)
        want = oracles.mha_by_hand(x, heads, wq, wk, wv)
        worst = max(worst, _max_abs(got, want))
    return CheckRow("oracle mha_reference vs by-hand", worst <= 1e-12,
                    f"max abs err {worst:.3e}, {seeds} seeds")


def check_boost_composition(seeds=10):
    worst = 0.0
    for s in range(seeds):
        rng = np.random.default_rng(np.random.SeedSequence([15, s]))
        head = "real" if s % 2 == 0 else "binary"
        params = booster.BoosterParams.init_random(8, 2, head, seed=s,
                                                    identity_residuals=False)
        desc = _unit_rows(rng, 5, 8)
        geo = _geo_rows(rng, 5)
        got = booster.boost_matrix(dk.tensor(desc), dk.tensor(geo), params).data
        want = oracles.boost_compose(desc, geo, params)
        worst = max(worst, _max_abs(got, want))
    return CheckRow("oracle boost vs composed pipeline", worst <= 1e-9,
                    f"max abs err {worst:.3e}, {seeds} seeds")


def check_fastap_bruteforce(seeds=100, tol=1e-10):
    worst = 0.0
    for s in range(seeds):
        rng = np.random.default_rng(np.random.SeedSequence([16, s]))
        m = 20
        grid = fastap.real_grid(10)
        z = rng.uniform(0.0, 4.0, m)
        pos = rng.random(m) < 0.35
        if not pos.any():
            pos[int(rng.integers(m))] = True
        got = fastap.fastap(dk.tensor(z), pos, grid).item()
        want = oracles.fastap_histogram_direct(z, pos, grid.centers, grid.delta)
        worst = max(worst, abs(got - want))
    return CheckRow("oracle fastap vs brute-force histogram", worst <= tol,
                    f"max abs err {worst:.3e} <= {tol:g}, {seeds} seeds")


def check_fastap_exact_equivalence(seeds=500, tol=1e-9):
    """Quantized AP with bins = D on integer distances equals exact AP."""
    worst = 0.0
    for s in range(seeds):
        rng = np.random.default_rng(np.random.SeedSequence([17, s]))
        d = int(rng.integers(2, 17))
        m = int(rng.integers(2, 31))
        bits_a = rng.integers(0, 2, d)
        bits_b = rng.integers(0, 2, (m, d))
        z = np.array([oracles.hamming_bit_loop(bits_a, row) for row in bits_b],
                     dtype=np.float64)
        pos = rng.random(m) < 0.3
        if not pos.any():
            pos[int(rng.integers(m))] = True
        got = fastap.fastap(dk.tensor(z), pos, fastap.binary_grid(d, bins=d)).item()
        want = fastap.exact_ap_binary(z, pos)
        worst = max(worst, abs(got - want))
    return CheckRow("oracle fastap(b=D) vs exact binary AP", worst <= tol,
                    f"max abs err {worst:.3e} <= {tol:g}, {seeds} seeds, D<=16")


def check_exact_ap_oracle(seeds=200):
    worst = 0.0
    for s in range(seeds):
        rng = np.random.default_rng(np.random.SeedSequence([18, s]))
        m = int(rng.integers(2, 25))
        z = rng.integers(0, 17, m).astype(np.float64)
        pos = rng.random(m) < 0.4
        if not pos.any():
            pos[int(rng.integers(m))] = True
        got = fastap.exact_ap_binary(z, pos)
        want = oracles.exact_ap_rank_walk(z, pos)
        worst = max(worst, abs(got - want))
    return CheckRow("oracle exact binary AP vs rank walk", worst <= 1e-12,
                    f"max abs err {worst:.3e}, {seeds} seeds")


def check_hamming_popcount(pairs=1000, dim=256):
    rng = np.random.default_rng(19)
    worst = 0
    for _ in range(pairs):
        a = rng.integers(0, 2, dim).astype(np.uint8)
        b = rng.integers(0, 2, dim).astype(np.uint8)
        got = matcher.hamming_matrix(a.reshape(1, -1), b.reshape(1, -1))[0, 0]
        eq13 = fastap.distances_binary(dk.tensor(a * 2.0 - 1.0),
                                       dk.tensor(b * 2.0 - 1.0)).item()
        want = oracles.hamming_bit_loop(a, b)
        worst = max(worst, abs(int(got) - want), abs(int(eq13) - want))
    return CheckRow("oracle hamming popcount vs bit loop", worst == 0,
                    f"max abs err {worst}, {pairs} pairs, D={dim}")


def check_nn_match_oracle(seeds=30):
    from .booster import DescriptorVector, FeatureSet, KeypointGeometry
    bad = 0
    for s in range(seeds):
        rng = np.random.default_rng(np.random.SeedSequence([20, s]))
        n, m, d = int(rng.integers(1, 12)), int(rng.integers(1, 12)), 6

        def fs(k):
            kps = [KeypointGeometry(0.1, 0.1, 0.5, 0.0, 1.0) for _ in range(k)]
            descs = [DescriptorVector("real", rng.normal(size=d)) for _ in range(k)]
            return FeatureSet("x", 100, 100, kps, descs)

        a, b = fs(n), fs(m)
        ms = matcher.nn_match(a, b, "euclidean")
        dist = matcher.euclidean_matrix(a.descriptor_matrix(), b.descriptor_matrix())
        best_idx, best_d, second_d = oracles.nn_exhaustive(dist)
        if list(ms.idx_b) != best_idx or _max_abs(ms.distance, best_d) > 1e-12:
            bad += 1
    return CheckRow("oracle nn_match vs exhaustive scan", bad == 0,
                    f"{bad} mismatching instances of {seeds}")


def check_label_consistency(pairs=20):
    bad = 0
    for s in range(pairs):
        spec = SceneSpec(num_keypoints=16, seed=s)
        if not verify_labels(generate_pair(spec)):
            bad += 1
    return CheckRow("labels recomputed from warp", bad == 0,
                    f"{bad} inconsistent pairs of {pairs}")


def run_oracle_suite(scale=1.0):
    """Brute-force comparisons for every oracle-backed contract."""
    k = lambda n: max(2, int(n * scale))
    return [
        check_affine_oracle(k(50)),
        check_softmax_oracle(k(50)),
        check_aft_oracle(k(200)),
        check_mha_oracle(k(40)),
        check_boost_composition(k(10)),
        check_fastap_bruteforce(k(100)),
        check_fastap_exact_equivalence(k(500)),
        check_exact_ap_oracle(k(200)),
        check_hamming_popcount(k(1000)),
        check_nn_match_oracle(k(30)),
        check_label_consistency(k(20)),
    ]
