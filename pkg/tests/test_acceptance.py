"""Acceptance criteria, one test each; every test prints a PASS/FAIL line."""

import time

import numpy as np
import pytest

from ziqe.benchmark import BenchmarkConfig, ordering_wins, run_head_comparison, summarize
from ziqe.distributions import BetaMeanPrecision, beta_log_pdf, beta_variance, fit_phi_mle
from ziqe.metrics import edit_distance, evaluate, ndcg, word_error_rate
from ziqe.nn import MaskMode, ParamStore, Tensor
from ziqe.nn import tensor as T
from ziqe.qe_head import beta_surrogate, head_predict
from ziqe.speech_bert import MASKED, SUBSTITUTED, UNCHANGED, ModelConfig, SpeechBert, apply_masking
from ziqe.verify import format_table, gradient_checks

_trapezoid = getattr(np, "trapezoid", None) or np.trapz

MU_GRID = np.round(np.arange(1, 10) / 10, 2)
PHI_GRID = (0.5, 2.0, 10.0, 50.0)
Y_GRID = np.round(np.arange(5, 100, 5) / 100, 2)


def test_01_surrogate_gradient_matches_log_density(report):
    start = time.perf_counter()
    worst = 0.0
    h = 1e-6
    for phi in PHI_GRID:
        for y in Y_GRID:
            mu = Tensor(MU_GRID.copy(), requires_grad=True)
            T.tsum(beta_surrogate(mu, np.full(MU_GRID.size, y), phi)).backward()
            for m, analytic in zip(MU_GRID, mu.grad):
                up = beta_log_pdf(y, BetaMeanPrecision(m + h, phi))
                down = beta_log_pdf(y, BetaMeanPrecision(m - h, phi))
                numeric = (up - down) / (2 * h)
                # the score vanishes exactly at y = mu = 0.5, where only rounding noise remains
                worst = max(worst, abs(analytic - numeric) / max(abs(numeric), abs(analytic), 1e-3))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-4 and elapsed < 5
    report(1, ok, f"max rel err {worst:.2e} over {MU_GRID.size * len(PHI_GRID) * Y_GRID.size} points, {elapsed:.2f}s")
    assert worst < 1e-4
    assert elapsed < 5


def test_02_beta_density_normalizes(report):
    start = time.perf_counter()
    y = np.linspace(1e-6, 1 - 1e-6, 400_001)
    masses = []
    for phi in PHI_GRID:
        for mu in MU_GRID:
            if min(mu * phi, (1 - mu) * phi) < 1:
                continue
            masses.append(_trapezoid(np.exp(beta_log_pdf(y, BetaMeanPrecision(mu, phi))), y))
    masses = np.array(masses)
    elapsed = time.perf_counter() - start
    ok = bool(np.all((masses >= 0.999) & (masses <= 1.001))) and elapsed < 5
    report(2, ok, f"{masses.size} grid points, mass in [{masses.min():.6f}, {masses.max():.6f}], {elapsed:.2f}s")
    assert np.all((masses >= 0.999) & (masses <= 1.001))
    assert elapsed < 5


def test_03_variance_identity(report, rng):
    worst = 0.0
    for _ in range(100):
        params = BetaMeanPrecision(rng.uniform(0.01, 0.99), rng.uniform(0.1, 200.0))
        shape = params.to_shape()
        a, b = shape.a, shape.b
        reference = a * b / ((a + b) ** 2 * (a + b + 1))
        worst = max(worst, abs(beta_variance(params) - reference) / reference)
    report(3, worst <= 1e-12, f"max rel diff {worst:.2e} on 100 draws")
    assert worst <= 1e-12


def test_04_phi_mle_recovery(report):
    start = time.perf_counter()
    gen = np.random.default_rng(4)
    phi_23 = fit_phi_mle(gen.beta(2.0, 3.0, size=10_000))
    phi_11 = fit_phi_mle(gen.beta(1.0, 1.0, size=10_000))
    elapsed = time.perf_counter() - start
    ok = abs(phi_23 - 5.0) <= 0.25 and abs(phi_11 - 2.0) <= 0.10 and elapsed < 10
    report(4, ok, f"Beta(2,3) -> {phi_23:.4f}, Beta(1,1) -> {phi_11:.4f}, {elapsed:.2f}s")
    assert abs(phi_23 - 5.0) <= 0.25
    assert abs(phi_11 - 2.0) <= 0.10
    assert elapsed < 10


def _strings_up_to(length: int, alphabet: int = 3) -> list[tuple[int, ...]]:
    out = [()]
    frontier = [()]
    for _ in range(length):
        frontier = [s + (c,) for s in frontier for c in range(alphabet)]
        out += frontier
    return out


def _brute_force_distances(strings: list[tuple[int, ...]], alphabet: int = 3) -> np.ndarray:
    """All-pairs edit distance by breadth-first search over single edits.

    Optimal edit scripts between strings of length <= L can be ordered to stay
    within length L, so the search graph is the closed set of short strings.
    """
    index = {s: i for i, s in enumerate(strings)}
    n = len(strings)
    adj = np.zeros((n, n), dtype=np.float32)
    for s, i in index.items():
        for p in range(len(s) + 1):
            for c in range(alphabet):
                t = s[:p] + (c,) + s[p:]
                if t in index:
                    adj[i, index[t]] = adj[index[t], i] = 1
                if p < len(s) and c != s[p]:
                    adj[i, index[s[:p] + (c,) + s[p + 1:]]] = 1
    dist = np.full((n, n), -1, dtype=np.int64)
    reached = np.eye(n, dtype=np.float32)
    dist[reached > 0] = 0
    step = 0
    while (dist < 0).any():
        step += 1
        reached = np.minimum(reached + reached @ adj, 1.0)
        dist[(reached > 0) & (dist < 0)] = step
    return dist


def test_05_wer_matches_brute_force(report):
    start = time.perf_counter()
    strings = _strings_up_to(6)
    dist = _brute_force_distances(strings)
    mismatches = 0
    pairs = 0
    for i, ref in enumerate(strings):
        if not ref:
            continue
        n = len(ref)
        row = dist[i]
        for j, hyp in enumerate(strings):
            pairs += 1
            if word_error_rate(ref, hyp) != row[j] / n:
                mismatches += 1
    elapsed = time.perf_counter() - start
    ok = mismatches == 0 and elapsed < 30
    report(5, ok, f"{pairs} pairs, {mismatches} mismatches, {elapsed:.1f}s")
    assert mismatches == 0
    assert elapsed < 30


def test_06_masking_statistics(report):
    vocab = 50
    seq_len = 100
    counts = {MASKED: 0, SUBSTITUTED: 0, UNCHANGED: 0}
    total = 0
    gen = np.random.default_rng(6)
    for k in range(10_000):
        tokens = gen.integers(4, vocab, size=seq_len)
        outcome = apply_masking(tokens, 1_000_003 * k + 17, vocab)
        for kind in outcome.outcome_kind:
            counts[kind] += 1
        total += seq_len
    pct = {k: 100.0 * v / total for k, v in counts.items()}
    ok = (abs(pct[MASKED] - 12.0) <= 0.5 and abs(pct[SUBSTITUTED] - 1.5) <= 0.15
          and abs(pct[UNCHANGED] - 1.5) <= 0.15)
    report(6, ok, f"{total} tokens: masked {pct[MASKED]:.3f}%, substituted {pct[SUBSTITUTED]:.3f}%, "
                  f"unchanged {pct[UNCHANGED]:.3f}%")
    assert abs(pct[MASKED] - 12.0) <= 0.5
    assert abs(pct[SUBSTITUTED] - 1.5) <= 0.15
    assert abs(pct[UNCHANGED] - 1.5) <= 0.15


def test_07_mask_switch_causality(report):
    cfg = ModelConfig(vocab_size=30, feature_dim=12, d_model=16, heads=4, encoder_layers=1,
                      memory_layers=2, feedforward_dim=24)
    model = SpeechBert(cfg, seed=7)
    gen = np.random.default_rng(7)
    causal_ok = full_ok = 0
    for _ in range(20):
        length, frames = int(gen.integers(4, 12)), int(gen.integers(3, 10))
        memory, frame_valid = model.speech_encode([gen.normal(size=(frames, cfg.feature_dim))])
        ids = gen.integers(4, cfg.vocab_size, size=(1, length))
        valid = np.ones_like(ids, dtype=bool)

        cut = int(gen.integers(0, length - 1))
        changed = ids.copy()
        changed[0, cut + 1:] = gen.integers(4, cfg.vocab_size, size=length - cut - 1)
        a = model.text_encode(ids, valid, memory, frame_valid, MaskMode.CAUSAL).data
        b = model.text_encode(changed, valid, memory, frame_valid, MaskMode.CAUSAL).data
        causal_ok += bool(np.array_equal(a[0, :cut + 1], b[0, :cut + 1]))

        pos = int(gen.integers(0, length))
        changed = ids.copy()
        changed[0, pos] = 4 + (ids[0, pos] - 4 + 1) % (cfg.vocab_size - 4)
        a = model.text_encode(ids, valid, memory, frame_valid, MaskMode.FULL).data
        b = model.text_encode(changed, valid, memory, frame_valid, MaskMode.FULL).data
        full_ok += bool(np.all(np.any(a[0] != b[0], axis=-1)))
    ok = causal_ok == 20 and full_ok == 20
    report(7, ok, f"causal prefix bit-identical {causal_ok}/20, full mode all positions changed {full_ok}/20")
    assert causal_ok == 20
    assert full_ok == 20


def test_08_finite_difference_suite(report):
    start = time.perf_counter()
    rows = gradient_checks(seed=8)
    elapsed = time.perf_counter() - start
    failed = [r.name for r in rows if not r.passed]
    worst = max(r.max_rel_error for r in rows)
    ok = not failed and elapsed < 60
    report(8, ok, f"{len(rows)} checks, worst rel err {worst:.2e}, {elapsed:.1f}s"
                  + (f", failed: {failed}" if failed else ""))
    print(format_table(rows))
    assert not failed
    assert elapsed < 60


@pytest.mark.slow
def test_09_toy_head_ordering(report):
    result = run_head_comparison(BenchmarkConfig(), log=print)
    print(summarize(result))
    gain = result.masked_accuracy - result.majority_baseline
    means = {h: result.mean(h) for h in ("zi_beta", "zi_linear", "linear")}
    wins = ordering_wins(result, "zi_beta", "linear")
    part_a = gain >= 0.20
    part_b = means["zi_beta"] >= means["zi_linear"] and means["zi_beta"] > means["linear"] and wins >= 3
    fast = result.seconds < 30 * 60
    report(9, part_a and part_b and fast,
           f"(a) accuracy gain {100 * gain:.1f} points [{'ok' if part_a else 'fail'}]; "
           f"(b) mean pearson zi_beta {means['zi_beta']:.4f} zi_linear {means['zi_linear']:.4f} "
           f"linear {means['linear']:.4f}, zi_beta>linear on {wins}/4 seeds [{'ok' if part_b else 'fail'}]; "
           f"{result.seconds / 60:.1f} min")
    assert part_a, "pretraining gain below 20 points"
    assert part_b, "zero-inflated Beta head does not lead the head ordering"
    assert fast


def test_10_expected_prediction_contract(report, rng):
    hidden = 6
    worst = 0.0
    monotone = 0
    for _ in range(1000):
        store = ParamStore(np.float64)
        for name in ("mu", "lambda"):
            store.add(f"qe_head/{name}/w", rng.normal(size=(hidden, 1)))
            store.add(f"qe_head/{name}/b", rng.normal(size=(1,)))
        h = rng.normal(size=hidden)
        base = head_predict(h, store)
        worst = max(worst, abs(base.expected_wer - (1 - base.lambda_zero) * base.mu))
        store["qe_head/lambda/b"].data += 0.5
        more_zero = head_predict(h, store)
        store["qe_head/lambda/b"].data -= 0.5
        store["qe_head/mu/b"].data += 0.5
        higher_mu = head_predict(h, store)
        monotone += (more_zero.lambda_zero > base.lambda_zero and more_zero.expected_wer < base.expected_wer
                     and higher_mu.mu > base.mu and higher_mu.expected_wer > base.expected_wer)
    ok = worst <= 1e-12 and monotone == 1000
    report(10, ok, f"max |expected - (1-lambda)mu| {worst:.1e}, monotone in {monotone}/1000")
    assert worst <= 1e-12
    assert monotone == 1000


def test_11_metric_edge_cases(report, rng):
    labels = np.concatenate([np.zeros(20), rng.uniform(0.01, 1.4, size=80)])
    rng.shuffle(labels)
    r = evaluate(labels, labels)
    identity_ok = r.mae == 0.0 and abs(r.pearson - 1.0) < 1e-12 and abs(r.ndcg - 1.0) < 1e-12 and r.f1 == 1.0
    transforms = [np.exp, lambda x: x ** 3, lambda x: 2.5 * x - 7.0, np.arctan, lambda x: np.log1p(np.exp(x))]
    invariant = 0
    for k in range(100):
        pred = rng.normal(size=int(rng.integers(2, 60)))
        true = rng.uniform(0.0, 1.5, size=pred.size)
        f = transforms[k % len(transforms)]
        invariant += ndcg(pred, true) == ndcg(f(pred), true)
    ok = identity_ok and invariant == 100
    report(11, ok, f"evaluate(labels, labels) -> mae {r.mae} pearson {r.pearson:.12f} ndcg {r.ndcg:.12f} "
                   f"f1 {r.f1}; ndcg invariant {invariant}/100")
    assert identity_ok
    assert invariant == 100

