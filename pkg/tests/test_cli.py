import os
import sys
import json

import numpy as np
import pandas as pd
import pytest
from dotenv import load_dotenv

PROJECT_ROOT = os.path.abspath(os.path.join(os.path.dirname(__file__), ".."))
sys.path.insert(0, PROJECT_ROOT)

from spec_compare.cli import (
    EXIT_DIVERGENCE,
    EXIT_NUMERICAL,
    EXIT_OK,
    EXIT_VALIDATION,
    exit_code_for,
    main,
)
from spec_compare.errors import AlignDivergenceError, PowerIterationError, StageError, ValidationError
from spec_compare.io_model import EmbeddingSet, write_embedding_set
from spec_compare.synthetic import orthogonal_recovery, planted_pair

load_dotenv()


@pytest.fixture(scope="module")
def planted_files(tmp_path_factory):
    root = tmp_path_factory.mktemp("planted")
    paired, block = planted_pair(n=200, d=32, seed=2)
    write_embedding_set(paired.a, root / "a.csv")
    write_embedding_set(paired.b, root / "b.csv")
    return root, paired, block


def _data_args(root):
    return ["--emb-a", str(root / "a.csv"), "--emb-b", str(root / "b.csv")]


def test_compare_writes_json_report(planted_files, tmp_path):
    root, paired, block = planted_files
    out = tmp_path / "report.json"
    code = main(["compare", *_data_args(root), "--top-k", "1", "--top-r", str(len(block)), "--out", str(out)])
    assert code == EXIT_OK

    payload = json.loads(out.read_text())
    assert payload["spec_diff"] > 0
    top = [c for c in payload["clusters"] if c["side"] == "A" and c["rank"] == 1][0]
    expected = {paired.ids[i] for i in block}
    assert len(set(top["sample_ids"]) & expected) >= 0.9 * len(block)
    assert payload["config"]["top_k"] == 1


def test_compare_stdout_is_clean_json(planted_files, capsys):
    root, _, _ = planted_files
    code = main(["compare", *_data_args(root), "--top-k", "1", "--top-r", "3"])
    assert code == EXIT_OK
    payload = json.loads(capsys.readouterr().out)
    assert set(payload) >= {"spec_diff", "eigenvalues", "clusters", "config"}


def test_compare_markdown(planted_files, tmp_path):
    root, _, _ = planted_files
    out = tmp_path / "report.md"
    assert main(["compare", *_data_args(root), "--format", "markdown", "--top-k", "1", "--top-r", "5",
                 "--out", str(out)]) == EXIT_OK
    assert out.read_text().startswith("# SPEC report")


def test_compare_with_labels_and_config_file(planted_files, tmp_path):
    root, paired, block = planted_files
    labels = tmp_path / "labels.txt"
    truth = np.zeros(paired.n, dtype=int)
    truth[block] = 1
    labels.write_text("\n".join(str(v) for v in truth) + "\n")
    config = tmp_path / "run.toml"
    config.write_text(f"top_k = 1\ntop_r = {len(block)}\nvalidate_runs = 2\n")

    out = tmp_path / "report.json"
    code = main(["compare", *_data_args(root), "--config", str(config), "--labels", str(labels), "--out", str(out)])
    assert code == EXIT_OK
    payload = json.loads(out.read_text())
    assert payload["config"]["top_r"] == len(block)
    assert payload["diagnostics"]["labels"]["ami"] > 0.8
    assert payload["diagnostics"]["validation"]["runs"] == 2


def test_missing_file_exit_code(tmp_path):
    code = main(["compare", "--emb-a", str(tmp_path / "a.csv"), "--emb-b", str(tmp_path / "b.csv")])
    assert code == EXIT_VALIDATION


def test_id_mismatch_exit_code(tmp_path):
    a = EmbeddingSet(ids=("x", "y", "z"), data=np.eye(3))
    b = EmbeddingSet(ids=("x", "z", "y"), data=np.eye(3))
    write_embedding_set(a, tmp_path / "a.csv")
    write_embedding_set(b, tmp_path / "b.csv")
    assert main(["diff", *_data_args(tmp_path)]) == EXIT_VALIDATION


def test_header_flag_controls_first_row(tmp_path):
    (tmp_path / "a.csv").write_text("s0,0,1\ns1,1,0\ns2,2,2\n")
    (tmp_path / "b.csv").write_text("s0,5,7\ns1,1,3\ns2,2,1\n")
    # auto drops a.csv's first row as a positional header, so ids no longer line up
    assert main(["diff", *_data_args(tmp_path)]) == EXIT_VALIDATION
    assert main(["diff", *_data_args(tmp_path), "--header", "no"]) == EXIT_OK


def test_diff_prints_single_number(planted_files, capsys):
    root, _, _ = planted_files
    assert main(["diff", *_data_args(root)]) == EXIT_OK
    value = float(capsys.readouterr().out.strip())
    assert value > 0


def test_diff_of_identical_embeddings_is_zero(planted_files, capsys):
    root, _, _ = planted_files
    code = main(["diff", "--emb-a", str(root / "a.csv"), "--emb-b", str(root / "a.csv")])
    assert code == EXIT_OK
    assert capsys.readouterr().out.strip() == "0.000000000000"


def test_diff_json(planted_files, capsys):
    root, _, _ = planted_files
    assert main(["diff", *_data_args(root), "--json"]) == EXIT_OK
    payload = json.loads(capsys.readouterr().out)
    assert payload["rho"] == pytest.approx(abs(payload["lambda_top"]))


def _align_files(tmp_path):
    X, F, _ = orthogonal_recovery(n=120, dx=3, seed=3)
    write_embedding_set(EmbeddingSet.from_array(X), tmp_path / "x.csv")
    write_embedding_set(EmbeddingSet.from_array(F), tmp_path / "f.csv")
    init = tmp_path / "w0.csv"
    pd.DataFrame(1.2 * np.eye(3)).to_csv(init, header=False, index=False)
    return ["--inputs", str(tmp_path / "x.csv"), "--reference", str(tmp_path / "f.csv"), "--init-weights", str(init)]


def test_align_demo_writes_trajectory(tmp_path, capsys):
    out = tmp_path / "trajectory.csv"
    code = main(["align-demo", *_align_files(tmp_path), "--out", str(out), "--step", "0.01", "--steps", "30"])
    assert code == EXIT_OK
    frame = pd.read_csv(out)
    assert len(frame) == 31
    assert frame["spec_diff"].iloc[-1] < frame["spec_diff"].iloc[0]
    assert float(capsys.readouterr().out.strip()) == pytest.approx(frame["spec_diff"].iloc[-1], rel=1e-9)


def test_align_demo_divergence(tmp_path):
    out = tmp_path / "trajectory.csv"
    code = main(["align-demo", *_align_files(tmp_path), "--out", str(out), "--step", "5", "--steps", "10"])
    assert code == EXIT_DIVERGENCE
    assert len(pd.read_csv(out)) >= 2


def test_diagnose_theorem1_with_default_index_set(planted_files, tmp_path):
    root, _, _ = planted_files
    out = tmp_path / "theorem1.json"
    code = main(["diagnose", "theorem1", *_data_args(root), "--top-k", "1", "--top-r", "20", "--out", str(out)])
    assert code == EXIT_OK
    report = json.loads(out.read_text())["report"]
    assert report["satisfied"] is True
    assert len(report["index_set"]) == 20


def test_diagnose_corollary1_with_index_file(planted_files, tmp_path, capsys):
    root, _, block = planted_files
    index_file = tmp_path / "block.txt"
    index_file.write_text("\n".join(str(i) for i in block))
    code = main(["diagnose", "corollary1", *_data_args(root), "--index-set", str(index_file)])
    assert code == EXIT_OK
    report = json.loads(capsys.readouterr().out)["report"]
    assert report["applicable"] and report["satisfied"]


def test_diagnose_rff_residual(planted_files, capsys):
    root, _, _ = planted_files
    code = main(["diagnose", "rff-residual", *_data_args(root), "--sigma-a", "5", "--sigma-b", "5", "--rff-dim", "400"])
    assert code == EXIT_OK
    report = json.loads(capsys.readouterr().out)["report"]
    assert report["m"] == 400
    assert report["satisfied"]


def test_diagnose_validate(planted_files, capsys):
    root, _, block = planted_files
    code = main(["diagnose", "validate", *_data_args(root), "--top-k", "1", "--top-r", str(len(block)),
                 "--validate-runs", "2"])
    assert code == EXIT_OK
    report = json.loads(capsys.readouterr().out)["report"]
    assert report["ami_a"] > report["ami_b"]


def test_exit_code_mapping():
    assert exit_code_for(ValidationError("bad")) == EXIT_VALIDATION
    assert exit_code_for(StageError("eigendecompose", PowerIterationError("stuck"))) == EXIT_NUMERICAL
    assert exit_code_for(AlignDivergenceError("boom")) == EXIT_DIVERGENCE
    assert exit_code_for(KeyError("x")) == 1


def test_bad_flag_value_exits_with_usage():
    with pytest.raises(SystemExit) as info:
        main(["compare", "--kernel-a", "rbf"])
    assert info.value.code == 2


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
