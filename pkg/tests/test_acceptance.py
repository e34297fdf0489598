"""
End-to-end properties at full trial counts: eigen-equivalence, certificates,
RFF residual, gradient, pseudometric, trace identity, scaling, planted
recovery, alignment and report determinism.
"""

import os
import sys
import time

import numpy as np
import pytest
from dotenv import load_dotenv

PROJECT_ROOT = os.path.abspath(os.path.join(os.path.dirname(__file__), ".."))
sys.path.insert(0, PROJECT_ROOT)

from spec_compare.cli import EXIT_OK, main
from spec_compare.config import AlignConfig, SpecConfig
from spec_compare.diagnostics import corollary1_check, rff_residual, theorem1_certificate, validate_clusters
from spec_compare.diff_align import align_descent, linear_spec_diff, spec_diff, spec_diff_gradient
from spec_compare.errors import AlignDivergenceError, NumericalError
from spec_compare.io_model import EmbeddingSet, pair, write_embedding_set
from spec_compare.kernels import KernelSpec, build_feature_map, exact_gaussian_kernel_matrix
from spec_compare.spec_core import (
    accumulate,
    build_gamma,
    covariance_from_features,
    eigendecompose_gamma,
    run_spec_paired,
    spec_direct_oracle,
)
from spec_compare.synthetic import blob_pair, normalized_kernel, orthogonal_recovery, planted_pair, random_pair

load_dotenv()


def _maps(paired, kind):
    return (
        build_feature_map(KernelSpec(kind=kind), paired.a.d),
        build_feature_map(KernelSpec(kind=kind), paired.b.d),
    )


def test_gamma_spectrum_matches_difference_kernel():
    rng = np.random.default_rng(100)
    started = time.perf_counter()
    for trial in range(50):
        n = int(rng.integers(40, 501))
        d1, d2 = (int(v) for v in rng.integers(2, 17, size=2))
        kind = ("linear", "cosine")[trial % 2]
        paired = random_pair(n, d1, d2, seed=trial)
        map1, map2 = _maps(paired, kind)

        gamma = build_gamma(accumulate(paired, map1, map2, chunk_size=97))
        ours = np.sort([lam for lam, _ in eigendecompose_gamma(gamma)])
        oracle = np.array([lam for lam, _ in spec_direct_oracle(paired, map1, map2)])
        oracle = np.sort(oracle[np.abs(oracle) > 1e-9])

        assert ours.size == oracle.size == d1 + d2, f"trial {trial}"
        np.testing.assert_allclose(ours, oracle, atol=1e-8, err_msg=f"trial {trial}")
    assert time.perf_counter() - started < 30


def _random_kernel_pair(rng, trial):
    n = int(rng.integers(10, 201))
    if trial % 2 == 0:
        return normalized_kernel(n, int(rng.integers(1, 12)), seed=trial), \
            normalized_kernel(n, int(rng.integers(1, 12)), seed=trial + 1000)
    X = rng.standard_normal((n, 3))
    Y = rng.standard_normal((n, 5))
    return exact_gaussian_kernel_matrix(X, float(rng.uniform(0.5, 3.0))), \
        exact_gaussian_kernel_matrix(Y, float(rng.uniform(0.5, 3.0)))


def test_separation_certificate_and_corollary_never_fail():
    rng = np.random.default_rng(200)
    applicable = 0
    for trial in range(200):
        K1, K2 = _random_kernel_pair(rng, trial)
        n = K1.shape[0]
        index_set = rng.choice(n, size=int(rng.integers(1, n)), replace=False)

        cert = theorem1_certificate(K1, K2, index_set)
        assert cert.satisfied, f"trial {trial}: lhs={cert.lhs} xi={cert.xi}"

        check = corollary1_check(K1, K2, index_set)
        if check.applicable:
            applicable += 1
            assert check.satisfied, f"trial {trial}: {check.actual_tail_norm} > {check.bound}"
    assert applicable > 0


def test_rff_residual_bound_holds():
    started = time.perf_counter()
    satisfied = 0
    for trial in range(100):
        paired = blob_pair(n=500, d=8, seed=trial)
        report = rff_residual(paired, 2.0, 2.0, m=2000, delta=0.05, seed=trial)
        satisfied += report.satisfied
    assert satisfied >= 95
    assert time.perf_counter() - started < 300


def _dense_rho(X, W, F):
    gamma = build_gamma(covariance_from_features(X @ W.T, F))
    return float(np.max(np.abs(np.linalg.eigvals(gamma.dense))))


def test_gradient_matches_finite_differences():
    checked = 0
    seed = 0
    h = 1e-5
    while checked < 20:
        rng = np.random.default_rng(300 + seed)
        seed += 1
        n, dx, dy, dw = int(rng.integers(30, 120)), int(rng.integers(2, 6)), int(rng.integers(1, 5)), int(rng.integers(1, 5))
        X = rng.standard_normal((n, dx))
        F = rng.standard_normal((n, dy))
        W = rng.standard_normal((dw, dx))
        if linear_spec_diff(X, W, F).degenerate:
            continue

        grad = spec_diff_gradient(X, W, F)
        numeric = np.zeros_like(W)
        for i in range(dw):
            for j in range(dx):
                step = np.zeros_like(W)
                step[i, j] = h
                numeric[i, j] = (_dense_rho(X, W + step, F) - _dense_rho(X, W - step, F)) / (2 * h)
        assert np.max(np.abs(grad - numeric)) / np.max(np.abs(numeric)) <= 1e-4, f"instance {seed - 1}"
        checked += 1


def test_spec_diff_is_a_pseudometric():
    rng = np.random.default_rng(400)
    for trial in range(30):
        n = int(rng.integers(30, 120))
        ids = tuple(f"s{i}" for i in range(n))
        embs = [EmbeddingSet(ids=ids, data=rng.standard_normal((n, int(rng.integers(2, 8))))) for _ in range(3)]
        cosine = [build_feature_map(KernelSpec(kind="cosine"), e.d) for e in embs]

        def rho(i, j):
            return spec_diff(pair(embs[i], embs[j]), cosine[i], cosine[j]).rho

        ab, ba, bc, ac = rho(0, 1), rho(1, 0), rho(1, 2), rho(0, 2)
        assert abs(ab - ba) <= 1e-10, f"trial {trial}"
        assert rho(0, 0) == 0.0
        assert ac <= ab + bc + 1e-9, f"trial {trial}"


def test_trace_of_gamma_vanishes_for_normalized_kernels():
    for trial in range(50):
        paired = random_pair(80, 4, 6, seed=500 + trial)
        if trial % 2 == 0:
            map1, map2 = _maps(paired, "cosine")
        else:
            map1 = build_feature_map(KernelSpec("gaussian_rff", 1.0, 64, trial), 4)
            map2 = build_feature_map(KernelSpec("gaussian_rff", 2.0, 64, trial), 6)
        gamma = build_gamma(accumulate(paired, map1, map2))
        assert abs(np.sum(np.linalg.eigvals(gamma.dense).real)) <= 1e-9, f"trial {trial}"


def _accumulate_seconds(n, d, repeats=3):
    rng = np.random.default_rng(600)
    emb = EmbeddingSet.from_array(rng.standard_normal((n, d), dtype=np.float32))
    paired = pair(emb, emb)
    linear = build_feature_map(KernelSpec(kind="linear"), d)
    best = np.inf
    for _ in range(repeats):
        started = time.perf_counter()
        accumulate(paired, linear, linear)
        best = min(best, time.perf_counter() - started)
    return best


@pytest.mark.slow
def test_accumulate_scales_linearly():
    # d1 = d2 = 512; the 2*10^5-sample set takes ~800 MB
    small = _accumulate_seconds(20_000, 512)
    large = _accumulate_seconds(200_000, 512)
    assert large <= 15 * small, f"{large:.3f}s vs {small:.3f}s"


def test_planted_block_recovery():
    paired, block = planted_pair(n=500, d=32, seed=0)
    result = run_spec_paired(paired, SpecConfig(top_k=1, top_r=len(block)))
    found = set(result.side("A")[0].indices)
    jaccard = len(found & set(block)) / len(found | set(block))
    assert jaccard >= 0.9

    validation = validate_clusters(result, paired, runs=50, seed=0)
    assert validation.ami_a - validation.ami_b >= 0.3


def _align_passes(X, F, step):
    config = AlignConfig(beta=1.0, step=step, iterations=500, early_stop_ratio=0.1, power_max_iter=1000, seed=0)
    try:
        state = align_descent(X, F, config)
    except (AlignDivergenceError, NumericalError):
        return False
    values = np.array([row[1] for row in state.history])
    monotone = np.mean(np.diff(values) <= 1e-12) if values.size > 1 else 1.0
    return values[-1] <= 0.1 * values[0] and monotone >= 0.9


def test_align_demo_recovers_rotation():
    X, F, _ = orthogonal_recovery(n=200, dx=4, seed=0)
    assert any(_align_passes(X, F, step) for step in (1e-1, 1e-2, 1e-3))


def test_compare_reports_are_byte_identical(tmp_path):
    paired = random_pair(150, 4, 6, seed=800)
    write_embedding_set(paired.a, tmp_path / "a.csv")
    write_embedding_set(paired.b, tmp_path / "b.csv")
    args = ["compare", "--emb-a", str(tmp_path / "a.csv"), "--emb-b", str(tmp_path / "b.csv"),
            "--kernel-a", "gaussian_rff", "--kernel-b", "gaussian_rff", "--sigma-a", "1.5", "--sigma-b", "2.5",
            "--rff-dim", "128", "--seed", "11", "--top-k", "3", "--top-r", "10"]
    assert main([*args, "--out", str(tmp_path / "one.json")]) == EXIT_OK
    assert main([*args, "--out", str(tmp_path / "two.json")]) == EXIT_OK
    assert (tmp_path / "one.json").read_bytes() == (tmp_path / "two.json").read_bytes()


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
