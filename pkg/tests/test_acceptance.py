"""Top-level acceptance checks, one test and one printed verdict per criterion.

Run with -s to see every [PASS]/[FAIL] line. Criterion 9 trains six small
models (about 70 minutes on one CPU core) and is gated behind --runslow.
"""
import time
from fractions import Fraction

import numpy as np
import pytest

from structattn.attention import (
    MLRAttentionConfig,
    ScoreFunctionConfig,
    score_matrix_bilinear,
    score_matrix_mlr_attention,
    score_matrix_standard,
)
from structattn.cli import gradient_check, oracle_sweep
from structattn.costs import (
    bilinear_btt_flops,
    bilinear_mlr_flops,
    kv_cache_size,
    mlr_attention_score_flops,
    table1_summary,
)
from structattn.icl import ICLTaskConfig, TrainConfig, icl_loss, sample_batch, train
from structattn.model import ModelConfig, Transformer
from structattn.mup import BASE_LR_GRID, MupRule, adam_lr, init_std
from structattn.structured import (
    BTTSpec,
    LowRankSpec,
    MLBTCSpec,
    MLRSpec,
    apply,
    factor_tensors,
    factors_from_arrays,
    init_factors,
    materialize,
    numeric_rank,
    param_count,
    rank_upper_bound,
)
from structattn.tensor import Tensor, flop_scope


def report(n: int, ok: bool, detail: str):
    print(f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {detail}")
    assert ok, f"criterion {n}: {detail}"


# ---------------------------------------------------------------------------
# 1. structured apply/bilinear vs dense materialization, random configs
# ---------------------------------------------------------------------------

def test_criterion_01_oracle_equivalence_sweep():
    t0 = time.perf_counter()
    worst = 0.0
    for family in ("low-rank", "mlr", "btt", "mlbtc"):
        worst = max(worst, oracle_sweep(family, trials=50, seed=0))
    elapsed = time.perf_counter() - t0
    report(1, worst <= 1e-10 and elapsed < 60,
           f"4 families x 50 configs, max |delta| = {worst:.2e}, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 2. block-built hierarchical scores vs the entrywise formula
# ---------------------------------------------------------------------------

def _shared_depth(j, jp, t, levels):
    depth = 0
    for l in range(levels):
        p = 1 << l
        if j // (t // p) == jp // (t // p):
            depth = l + 1
        else:
            break
    return depth


def _entrywise_scores(x, wq, wk, ranks):
    t = x.shape[0]
    offs = np.concatenate([[0], np.cumsum(ranks)])
    s = np.zeros((t, t))
    for j in range(t):
        for jp in range(t):
            for l in range(_shared_depth(j, jp, t, len(ranks))):
                lm, rm = wq[:, offs[l]:offs[l + 1]], wk[:, offs[l]:offs[l + 1]]
                s[j, jp] += (x[j] @ lm) @ (rm.T @ x[jp])
    return s


def test_criterion_02_hierarchical_score_entrywise_identity():
    rng = np.random.default_rng(1)
    worst, cases = 0.0, 0
    for t in (2, 4, 8, 16):
        for levels in (1, 2, 3, 4):
            p = 1 << (levels - 1)
            if t % p or t <= p:
                continue
            for _ in range(4):
                ranks = tuple(int(rng.integers(1, 5)) for _ in range(levels))
                d = int(rng.integers(2, 8))
                x = rng.standard_normal((t, d))
                wq = rng.standard_normal((d, sum(ranks)))
                wk = rng.standard_normal((d, sum(ranks)))
                got = score_matrix_mlr_attention(Tensor(x), Tensor(wq), Tensor(wk),
                                                 MLRAttentionConfig(ranks)).to_numpy()
                worst = max(worst, float(np.max(np.abs(got - _entrywise_scores(x, wq, wk, ranks)))))
                cases += 1
    report(2, worst <= 1e-12, f"{cases} (T, L, ranks) cases, max |delta| = {worst:.2e}")


# ---------------------------------------------------------------------------
# 3. parameter counts and rank bounds, with generic rank attainment
# ---------------------------------------------------------------------------

def test_criterion_03_param_and_rank_closed_forms():
    failures = []
    cases = []
    for d in (16, 32):
        lr = (LowRankSpec(d, d, d // 4), 2 * d * (d // 4), d // 4)
        mlr = (MLRSpec.equal_blocks(d, d, (d // 4, 2, 1)),
               2 * d * (d // 4 + 3), min(d, d // 4 + 2 * 2 + 1 * 4))
        cases += [lr, mlr, (MLBTCSpec.from_mlr(mlr[0]), mlr[1], mlr[2])]
    for d in (16, 25):
        root = int(round(d ** 0.5))
        cases += [(BTTSpec.square_root(d, s=1), 2 * d * root, d),
                  (BTTSpec.square_root(d, s=2), 4 * d * root, d)]
    for spec, want_params, want_bound in cases:
        d = spec.m
        if param_count(spec) != want_params:
            failures.append(f"{spec.family} D={d} params")
        if rank_upper_bound(spec) != want_bound:
            failures.append(f"{spec.family} D={d} bound")
        if not isinstance(spec, MLBTCSpec):
            summary = table1_summary(spec)
            if summary.params != want_params or summary.rank_bound != want_bound:
                failures.append(f"{spec.family} D={d} summary")
        for seed in range(20):
            dense = materialize(spec, init_factors(spec, np.random.default_rng(seed)))
            if numeric_rank(dense) != want_bound:
                failures.append(f"{spec.family} D={d} seed {seed} rank")
    report(3, not failures,
           "params/rank bounds exact, rank attained on 20 seeds x 10 specs"
           if not failures else f"failed: {failures[:4]}")


# ---------------------------------------------------------------------------
# 4. quoted cost formulas, and the runtime counter agreeing with them
# ---------------------------------------------------------------------------

def test_criterion_04_flop_formulas_and_runtime_counter():
    t, d = 1024, 512
    ranks = (32, 16, 8, 8)
    r = sum(ranks)
    checks = []

    want = 2 * t * d * r + t * t * sum((1 << l) * rl for l, rl in enumerate(ranks))
    checks.append(bilinear_mlr_flops(t, d, ranks, "optimal") == want)

    db, s = 256, 2
    root = int(np.sqrt(db))
    checks.append(bilinear_btt_flops(t, db, s, "chained") == t * t * db + 2 * s * t * db * root)

    mranks = [8] * 8
    score_only = sum(t * t * rl // (1 << l) for l, rl in enumerate(mranks))
    checks.append(mlr_attention_score_flops(t, mranks) == score_only == 16_711_680)

    rng = np.random.default_rng(2)
    x = Tensor(rng.standard_normal((t, d)))

    spec = MLRSpec.equal_blocks(d, d, ranks)
    factors = init_factors(spec, rng)
    qb = tuple(tuple(lev) for lev in factors.left)
    kb = tuple(tuple(lev) for lev in factors.right)
    with flop_scope() as c:
        score_matrix_bilinear(x, ScoreFunctionConfig("bilinear-mlr", spec=spec,
                                                     qk_norm=False), qb, kb)
    ratio_mlr = c.macs / bilinear_mlr_flops(t, d, ranks, "optimal")
    checks.append(abs(ratio_mlr - 1.0) <= 0.10)

    bspec = BTTSpec.square_root(db, s=s)
    bf = init_factors(bspec, rng)
    xb = Tensor(rng.standard_normal((t, db)))
    with flop_scope() as c:
        score_matrix_bilinear(xb, ScoreFunctionConfig("bilinear-btt", spec=bspec,
                                                      qk_norm=False),
                              tuple(bf.left), tuple(bf.right))
    ratio_btt = c.macs / bilinear_btt_flops(t, db, s, "chained")
    checks.append(abs(ratio_btt - 1.0) <= 0.10)

    wq = Tensor(rng.standard_normal((d, sum(mranks))))
    wk = Tensor(rng.standard_normal((d, sum(mranks))))
    with flop_scope() as c:
        score_matrix_mlr_attention(x, wq, wk, MLRAttentionConfig(tuple(mranks)))
    ratio_mlra = (c.macs - 2 * t * d * sum(mranks)) / score_only
    checks.append(abs(ratio_mlra - 1.0) <= 0.10)

    report(4, all(checks),
           f"closed forms exact; runtime/formula ratios "
           f"{ratio_mlr:.3f}, {ratio_btt:.3f}, {ratio_mlra:.3f} at T={t}")


# ---------------------------------------------------------------------------
# 5. retained-key saving at the quoted configuration
# ---------------------------------------------------------------------------

def test_criterion_05_kv_cache_saving():
    t, mranks = 1024, [8] * 8
    retained = kv_cache_size(t, mranks)
    baseline = 64 * t
    ratio = baseline / retained
    report(5, retained == 16_320 and baseline == 65_536 and 4.0 <= ratio <= 4.05,
           f"retained {retained} vs {baseline}, ratio {ratio:.4f}")


# ---------------------------------------------------------------------------
# 6. end-to-end gradients vs central finite differences
# ---------------------------------------------------------------------------

def test_criterion_06_gradient_suite():
    t0 = time.perf_counter()
    cases = [("standard", 8, 4), ("standard", 4, 3),
             ("bilinear-mlr", 8, 4), ("bilinear-mlr", 4, 3),
             ("bilinear-btt", 4, 4), ("bilinear-btt", 4, 3),
             ("mlr-attention", 8, 4), ("mlr-attention", 4, 3)]
    worst = max(gradient_check(kind, d, t, seed=0) for kind, d, t in cases)
    elapsed = time.perf_counter() - t0
    report(6, worst < 1e-5 and elapsed < 60,
           f"{len(cases)} score-kind instances, max rel err = {worst:.2e}, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 7. reduction identities between families and score kinds
# ---------------------------------------------------------------------------

def test_criterion_07_reduction_identities():
    rng = np.random.default_rng(3)
    d, r, t = 8, 3, 8
    x = rng.standard_normal((t, d))
    wq = rng.standard_normal((d, r))
    wk = rng.standard_normal((d, r))
    flat = score_matrix_standard(Tensor(x), Tensor(wq), Tensor(wk)).to_numpy()

    spec1 = MLRSpec.equal_blocks(d, d, (r,))
    bil = score_matrix_bilinear(Tensor(x),
                                ScoreFunctionConfig("bilinear-mlr", spec=spec1, qk_norm=False),
                                ((Tensor(wq),),), ((Tensor(wk),),)).to_numpy()
    worst = float(np.max(np.abs(bil - flat)))

    hier = score_matrix_mlr_attention(Tensor(x), Tensor(wq), Tensor(wk),
                                      MLRAttentionConfig((r,))).to_numpy()
    worst = max(worst, float(np.max(np.abs(hier - flat))))

    mlr = MLRSpec.equal_blocks(16, 16, (4, 2))
    fm = init_factors(mlr, np.random.default_rng(4))
    gm = factors_from_arrays(MLBTCSpec.from_mlr(mlr),
                             [f.to_numpy() for f in factor_tensors(fm)])
    worst = max(worst, float(np.max(np.abs(
        materialize(mlr, fm) - materialize(MLBTCSpec.from_mlr(mlr), gm)))))

    btt = BTTSpec(3, 4, 2, 5, s=2)
    fb = init_factors(btt, np.random.default_rng(5))
    gb = factors_from_arrays(MLBTCSpec.from_btt(btt),
                             [f.to_numpy() for f in factor_tensors(fb)])
    worst = max(worst, float(np.max(np.abs(
        materialize(btt, fb) - materialize(MLBTCSpec.from_btt(btt), gb)))))
    xs = np.random.default_rng(6).standard_normal((btt.n, 3))
    worst = max(worst, float(np.max(np.abs(
        apply(btt, fb, xs).to_numpy() - apply(MLBTCSpec.from_btt(btt), gb, xs).to_numpy()))))

    report(7, worst <= 1e-12, f"all five reductions, max |delta| = {worst:.2e}")


# ---------------------------------------------------------------------------
# 8. fresh-model loss is 1 for every architecture in the grid
# ---------------------------------------------------------------------------

ARCH_GRID = [
    ("standard-h1", dict(score_kind="standard", heads=1)),
    ("standard-h8", dict(score_kind="standard", heads=8)),
    ("bilinear-mlr", dict(score_kind="bilinear-mlr", heads=8, ranks=(8, 4, 2))),
    ("bilinear-btt", dict(score_kind="bilinear-btt", heads=8, btt_s=2)),
    ("mlr-attention", dict(score_kind="mlr-attention", heads=1)),
]


def test_criterion_08_zero_init_loss_is_one():
    task = ICLTaskConfig(d_input=8, seed=0)
    batch = sample_batch(task, 2048, (0, 7))
    results = []
    for name, kw in ARCH_GRID:
        cfg = ModelConfig(d_input=8, d_model=64, layers=2, **kw)
        model = Transformer.init(cfg, np.random.default_rng(11))
        loss = icl_loss(model, batch).item()
        results.append((name, loss))
    ok = all(abs(loss - 1.0) <= 0.1 for _, loss in results)
    report(8, ok, "2048-prompt init loss per architecture: "
           + ", ".join(f"{n} {v:.3f}" for n, v in results))


# ---------------------------------------------------------------------------
# 9. rank-bottleneck ordering at desk scale (slow, optional)
# ---------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_09_rank_bottleneck_direction():
    task = ICLTaskConfig(d_input=16, seed=0)
    train_kw = dict(steps=10_000, batch_size=16, base_lr=1e-3,
                    eval_every=2_000, eval_prompts=256)
    finals = {}
    for name, heads in (("full-rank-h1", 1), ("bottleneck-h8", 8)):
        cfg = ModelConfig(d_input=16, d_model=64, layers=2, heads=heads)
        errs = []
        for seed in (0, 1, 2):
            res = train(cfg, task, TrainConfig(seed=seed, **train_kw))
            errs.append([r["eval_error"] for r in res.rows
                         if not np.isnan(r["eval_error"])][-1])
        finals[name] = float(np.median(errs))
    full, bottleneck = finals["full-rank-h1"], finals["bottleneck-h8"]
    report(9, full <= 0.5 * bottleneck,
           f"median final eval over 3 seeds: full-rank {full:.4f}, "
           f"8-head {bottleneck:.4f} (need full-rank <= half)")


# ---------------------------------------------------------------------------
# 10. width-transfer closed forms and the coordinate-scale band
# ---------------------------------------------------------------------------

def _mup_closed_forms_exact() -> bool:
    for base_lr in BASE_LR_GRID:
        for d1, d2 in ((64, 64), (64, 128), (64, 512), (128, 1024)):
            dense = MupRule("hidden-dense", d2, d2, base_lr, d1, d2)
            if init_std(dense) != float(np.sqrt(1.0 / d2)):
                return False
            if adam_lr(dense) != float(Fraction(base_lr) * d1 / d2):
                return False
            for level in (1, 2, 3):
                p = 2 ** (level - 1)
                mlr = MupRule("mlr-factor", d2 // p, 4, base_lr, d1, d2, level=level)
                if init_std(mlr) != float(np.sqrt(p / d2)):
                    return False
                if adam_lr(mlr) != float(Fraction(base_lr) * d1 * p / d2):
                    return False
            root = int(np.sqrt(d2))
            if root * root == d2:
                left = MupRule("btt-left", 2 * root, root, base_lr, d1, d2)
                right = MupRule("btt-right", root, 2 * root, base_lr, d1, d2, a=root)
                if init_std(left) != float(np.sqrt(1.0 / (2 * root))):
                    return False
                if adam_lr(left) != float(Fraction(base_lr) * d1 / (2 * root)):
                    return False
                if adam_lr(right) != float(Fraction(base_lr) * d1 / root):
                    return False
            out = MupRule("output", d2, 1, base_lr, d1, d2)
            if init_std(out) != 0.0 or adam_lr(out) != float(Fraction(base_lr) * d1 / d2):
                return False
    return True


def _rms_band(kind: str, width: int, **kw) -> tuple[float, float]:
    cfg = ModelConfig(d_input=8, d_model=width, layers=2, score_kind=kind, **kw)
    model = Transformer.init(cfg, np.random.default_rng(21), base_width=64)
    batch = sample_batch(ICLTaskConfig(d_input=8, seed=0), 8, (0, 22))
    probes = []
    model.forward(batch.tokens, probes=probes)
    vals = [rms for _, rms, _ in probes]
    return min(vals), max(vals)


def test_criterion_10_mup_tables_and_stability_band():
    forms_ok = _mup_closed_forms_exact()
    lo, hi = np.inf, 0.0
    for kind, kw, widths in (
            ("standard", dict(heads=8), (64, 128, 256, 512)),
            ("bilinear-mlr", dict(heads=8, ranks=(8, 4, 2)), (64, 128, 256, 512)),
            ("mlr-attention", dict(heads=1), (64, 128, 256, 512)),
            ("bilinear-btt", dict(heads=8, btt_s=2), (64, 256)),
    ):
        for width in widths:
            a, b = _rms_band(kind, width, **kw)
            lo, hi = min(lo, a), max(hi, b)
    band_ok = 0.3 <= lo and hi <= 3.0
    report(10, forms_ok and band_ok,
           f"closed forms exact on the grid; activation rms in "
           f"[{lo:.3f}, {hi:.3f}] across widths (band [0.3, 3.0])")
