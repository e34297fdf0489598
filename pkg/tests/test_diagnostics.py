import os
import sys

import numpy as np
import pytest
from dotenv import load_dotenv

PROJECT_ROOT = os.path.abspath(os.path.join(os.path.dirname(__file__), ".."))
sys.path.insert(0, PROJECT_ROOT)

from spec_compare.config import SpecConfig
from spec_compare.diagnostics import (
    ami,
    corollary1_check,
    corollary_bound,
    kmeans,
    label_agreement,
    nmi,
    rff_bound,
    rff_residual,
    similarity_ranking,
    spec_labels,
    theorem1_certificate,
    validate_clusters,
    within_cluster_distances,
)
from spec_compare.errors import ValidationError
from spec_compare.io_model import EmbeddingSet, LabelVector, pair
from spec_compare.kernels import KernelSpec, build_feature_map, kernel_matrix
from spec_compare.spec_core import ClusterReport, SpecResult, run_spec_paired
from spec_compare.synthetic import blob_pair, normalized_kernel, planted_pair, random_pair

load_dotenv()


def _cosine_kernels(paired):
    K1 = kernel_matrix(paired.a, build_feature_map(KernelSpec(kind="cosine"), paired.a.d))
    K2 = kernel_matrix(paired.b, build_feature_map(KernelSpec(kind="cosine"), paired.b.d))
    return K1, K2


@pytest.fixture(scope="module")
def planted():
    paired, block = planted_pair(n=200, d=32, seed=1)
    result = run_spec_paired(paired, SpecConfig(top_k=1, top_r=len(block)))
    return paired, block, result


@pytest.mark.parametrize("seed", range(5))
def test_separation_certificate_holds_on_random_kernels(seed):
    rng = np.random.default_rng(seed)
    n = 40
    K1 = normalized_kernel(n, rank=5, seed=seed)
    K2 = normalized_kernel(n, rank=8, seed=seed + 100)
    index_set = rng.choice(n, size=int(rng.integers(1, n)), replace=False)
    cert = theorem1_certificate(K1, K2, index_set)
    assert cert.satisfied
    assert cert.xi == pytest.approx(4 * (cert.eps1 ** 2 + cert.eps2))
    assert cert.lhs >= 0


def test_certificate_rejects_bad_kernels():
    K = normalized_kernel(10, rank=3)
    with pytest.raises(ValidationError, match="unit diagonal"):
        theorem1_certificate(2.0 * K, K, [0, 1])
    not_psd = np.eye(3)
    not_psd[0, 1] = not_psd[1, 0] = 2.0
    with pytest.raises(ValidationError, match="not PSD"):
        theorem1_certificate(not_psd, np.eye(3), [0])


@pytest.mark.parametrize("index_set", [[], list(range(10)), [10], [-1]])
def test_certificate_rejects_bad_index_sets(index_set):
    K = normalized_kernel(10, rank=3)
    with pytest.raises(ValidationError):
        theorem1_certificate(K, K, index_set)


def test_corollary_bound_value():
    assert corollary_bound(0.3, 0.07, 0.5) == pytest.approx(1.6)


def test_corollary_on_planted_block(planted):
    paired, block, _ = planted
    K1, K2 = _cosine_kernels(paired)
    check = corollary1_check(K1, K2, block)
    assert check.applicable
    assert check.gap > 0
    assert check.satisfied


def test_corollary_not_applicable_without_gap():
    K = normalized_kernel(20, rank=4, seed=2)
    check = corollary1_check(K, K, [0, 1, 2])
    assert not check.applicable
    assert check.satisfied is None and check.bound is None


def test_rff_bound_value():
    assert rff_bound(2000, 0.05) == pytest.approx(0.2361, abs=1e-4)


def test_rff_residual_within_bound():
    paired = random_pair(100, 3, 3, seed=3)
    report = rff_residual(paired, 1.5, 1.5, m=500, delta=0.05, seed=0)
    assert report.satisfied
    assert report.residual_sum < 0.1 * report.bound


def test_rff_residual_rejects_large_n():
    paired = random_pair(30, 2, 2, seed=4)
    with pytest.raises(ValidationError, match="cap"):
        rff_residual(paired, 1.0, 1.0, m=10, cap=20)


def test_rff_residual_shrinks_when_m_doubles():
    shrank = 0
    for trial in range(10):
        paired = blob_pair(n=200, d=4, seed=trial)
        small = rff_residual(paired, 2.0, 2.0, m=250, delta=0.05, seed=trial)
        large = rff_residual(paired, 2.0, 2.0, m=500, delta=0.05, seed=trial)
        shrank += large.residual_sum < small.residual_sum
    assert shrank >= 8


def test_kmeans_is_seeded():
    rng = np.random.default_rng(5)
    X = np.vstack([rng.standard_normal((30, 2)), rng.standard_normal((30, 2)) + 8.0])
    first = kmeans(X, 2, runs=3, seed=1)
    second = kmeans(X, 2, runs=3, seed=1)
    assert len(first) == 3
    for left, right in zip(first, second):
        np.testing.assert_array_equal(left, right)
    assert ami(first[0], np.repeat([0, 1], 30)) == pytest.approx(1.0)
    with pytest.raises(ValidationError):
        kmeans(X, 1)
    with pytest.raises(ValidationError):
        kmeans(X, 61)


def test_mutual_information_conventions():
    assert ami([0, 0, 0], [1, 1, 1]) == 1.0
    assert nmi([0, 0, 0], [0, 1, 0]) == 0.0
    assert ami([0, 1, 0, 1], [1, 0, 1, 0]) == pytest.approx(1.0)
    assert nmi([0, 1, 0, 1], [5, 7, 5, 7]) == pytest.approx(1.0)
    with pytest.raises(ValidationError):
        ami([0, 1], [0, 1, 1])


def test_ami_near_zero_for_independent_labelings():
    rng = np.random.default_rng(21)
    for trial in range(20):
        left = rng.integers(0, 5, size=1000)
        right = rng.integers(0, 5, size=1000)
        score = ami(left, right)
        assert abs(score) <= 0.05, f"trial {trial}"
        assert nmi(left, right) >= score


def test_mutual_information_is_symmetric_and_relabel_invariant():
    rng = np.random.default_rng(22)
    left = rng.integers(0, 4, size=300)
    right = np.where(rng.random(300) < 0.6, left, rng.integers(0, 4, size=300))
    relabel = np.array([2, 0, 3, 1])
    assert ami(left, right) == pytest.approx(ami(right, left), abs=1e-10)
    assert nmi(left, right) == pytest.approx(nmi(right, left), abs=1e-10)
    assert ami(relabel[left], right) == pytest.approx(ami(left, right), abs=1e-10)
    assert nmi(left, relabel[right]) == pytest.approx(nmi(left, right), abs=1e-10)
    assert nmi(left, right) >= ami(left, right)


def test_spec_labels_mark_cluster_members(planted):
    paired, block, result = planted
    labels = spec_labels(result, paired.n)
    assert set(np.flatnonzero(labels == 1)) == set(result.side("A")[0].indices)
    assert np.count_nonzero(labels) == len(block)


def test_similarity_and_distances_favour_embedding_a(planted):
    paired, _, result = planted
    top = result.side("A")[0]
    similarity = similarity_ranking(top, paired, seed=0)
    assert similarity["A"]["margin"] > similarity["B"]["margin"]
    distances = within_cluster_distances(top, paired)
    assert distances["A"] < distances["B"]


def test_validate_clusters(planted):
    paired, _, result = planted
    validation = validate_clusters(result, paired, runs=3, seed=0)
    assert validation.k == 2 and validation.runs == 3
    assert -1.0 <= validation.ami_b <= 1.0
    assert validation.ami_a > validation.ami_b
    assert set(validation.to_dict()) >= {"ami_a", "ami_b", "nmi_a", "nmi_b", "similarity", "distances"}


def test_validate_clusters_needs_side_a():
    paired = random_pair(10, 2, 2, seed=6)
    empty = SpecResult(eigenpairs=[], clusters=[], spec_diff=0.0, config={})
    with pytest.raises(ValidationError, match="side-A"):
        validate_clusters(empty, paired, runs=1)


def test_label_agreement(planted):
    paired, block, result = planted
    truth = np.zeros(paired.n, dtype=np.int64)
    truth[block] = 1
    scores = label_agreement(result, LabelVector(labels=truth))
    assert scores["ami"] > 0.8


def test_identical_embeddings_similarity_margin_is_shared():
    rng = np.random.default_rng(7)
    emb = EmbeddingSet.from_array(rng.standard_normal((20, 3)))
    paired = pair(emb, emb)
    cluster = ClusterReport(rank=1, eigenvalue=0.1, side="A", sample_ids=tuple(paired.ids[:10]),
                            weights=(0.1,) * 10, indices=tuple(range(10)))
    report = similarity_ranking(cluster, paired, seed=0)
    assert report["A"] == report["B"]


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
